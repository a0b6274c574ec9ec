use std::io::{BufRead, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::Mesh;
use crate::error::{Error, Result};
use crate::geom::Vec3;

/// Binary little-endian PLY: `float` x y z vertices, `uchar`-counted `int`
/// face lists.
pub fn write_ply<W: Write>(mesh: &Mesh, w: &mut W) -> Result<()> {
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.triangles.len()
    )?;
    for v in &mesh.vertices {
        for c in v.iter() {
            w.write_f32::<LittleEndian>(*c as f32)?;
        }
    }
    for t in &mesh.triangles {
        w.write_u8(3)?;
        for &i in t {
            w.write_i32::<LittleEndian>(i as i32)?;
        }
    }
    Ok(())
}

/// Reads meshes written by [`write_ply`].
pub fn read_ply<R: BufRead>(r: &mut R) -> Result<Mesh> {
    let mut line = String::new();
    let mut header = Vec::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Format("PLY header not terminated".into()));
        }
        let l = line.trim().to_string();
        if l == "end_header" {
            break;
        }
        header.push(l);
    }
    if header.first().map(String::as_str) != Some("ply") {
        return Err(Error::Format("not a PLY file".into()));
    }
    if !header.iter().any(|l| l == "format binary_little_endian 1.0") {
        return Err(Error::Format("only binary little-endian PLY is supported".into()));
    }
    let count = |name: &str| -> Result<usize> {
        header
            .iter()
            .find_map(|l| l.strip_prefix(&format!("element {name} ")))
            .ok_or_else(|| Error::Format(format!("PLY lacks element {name}")))?
            .parse()
            .map_err(|_| Error::Format(format!("bad {name} count")))
    };
    let (nv, nf) = (count("vertex")?, count("face")?);
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let mut p = [0f32; 3];
        r.read_f32_into::<LittleEndian>(&mut p)?;
        vertices.push(Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64));
    }
    let mut triangles = Vec::with_capacity(nf);
    for _ in 0..nf {
        if r.read_u8()? != 3 {
            return Err(Error::Format("only triangle faces are supported".into()));
        }
        let mut t = [0u32; 3];
        for i in &mut t {
            let v = r.read_i32::<LittleEndian>()?;
            if v < 0 || v as usize >= nv {
                return Err(Error::Format(format!("face index {v} out of range")));
            }
            *i = v as u32;
        }
        triangles.push(t);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after PLY body".into()));
    }
    Ok(Mesh::new(vertices, triangles))
}
