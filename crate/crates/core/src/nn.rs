//! Small dense layers, seeded initialization and the `SSTW` weight file.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f32 = 0.01;

#[inline]
pub fn leaky_relu(x: f32) -> f32 {
    if x >= 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Seeded `uniform(-k, k)` initializer with `k = 1/sqrt(fan_in)`.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, n: usize, fan_in: usize) -> Vec<f32> {
        let k = 1.0 / (fan_in.max(1) as f32).sqrt();
        (0..n).map(|_| self.rng.random_range(-k..=k)).collect()
    }
}

/// Fully connected layer, `y = W x + b`, weights row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, init: &mut Initializer) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: init.uniform(in_dim * out_dim, in_dim),
            bias: init.uniform(out_dim, in_dim),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    #[inline]
    pub fn row(&self, o: usize) -> &[f32] {
        &self.weight[o * self.in_dim..(o + 1) * self.in_dim]
    }

    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        debug_assert_eq!(x.len(), self.in_dim);
        (0..self.out_dim)
            .map(|o| dot(self.row(o), x) + self.bias[o])
            .collect()
    }

    /// Same map evaluated in f64.
    pub fn forward_f64(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|o| {
                self.row(o)
                    .iter()
                    .zip(x)
                    .map(|(w, v)| *w as f64 * v)
                    .sum::<f64>()
                    + self.bias[o] as f64
            })
            .collect()
    }

    pub(crate) fn export(&self, name: &str, store: &mut WeightStore) {
        store.put(
            format!("{name}.weight"),
            vec![self.out_dim, self.in_dim],
            self.weight.clone(),
        );
        store.put(format!("{name}.bias"), vec![self.out_dim], self.bias.clone());
    }

    pub(crate) fn import(&mut self, name: &str, store: &WeightStore) -> Result<()> {
        self.weight = store.take(&format!("{name}.weight"), &[self.out_dim, self.in_dim])?;
        self.bias = store.take(&format!("{name}.bias"), &[self.out_dim])?;
        Ok(())
    }
}

/// One named tensor in a weight file.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Named tensors in insertion-independent (sorted) order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    tensors: BTreeMap<String, StoredTensor>,
}

const WEIGHT_MAGIC: &[u8; 4] = b"SSTW";
const WEIGHT_VERSION: u32 = 1;

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.get(name)
    }

    pub fn put(&mut self, name: String, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.insert(name, StoredTensor { shape, data });
    }

    pub(crate) fn take(&self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("weight file lacks tensor {name}")))?;
        if t.shape != shape {
            return Err(Error::Shape(format!(
                "tensor {name}: expected {shape:?}, found {:?}",
                t.shape
            )));
        }
        Ok(t.data.clone())
    }

    /// Layout: magic `SSTW`, `u32` version, `u32` layer count; per layer
    /// `u32` name length, name bytes, `i32` rank, `i32` dims, `f32` data.
    /// Little-endian throughout.
    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(WEIGHT_MAGIC)?;
        w.write_u32::<LittleEndian>(WEIGHT_VERSION)?;
        w.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_i32::<LittleEndian>(t.shape.len() as i32)?;
            for &d in &t.shape {
                w.write_i32::<LittleEndian>(d as i32)?;
            }
            for &v in &t.data {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != WEIGHT_MAGIC {
            return Err(Error::Format("not an SSTW weight file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != WEIGHT_VERSION {
            return Err(Error::Format(format!("unsupported SSTW version {version}")));
        }
        let count = r.read_u32::<LittleEndian>()?;
        let mut store = WeightStore::new();
        for _ in 0..count {
            let len = r.read_u32::<LittleEndian>()? as usize;
            if len > 4096 {
                return Err(Error::Format("tensor name too long".into()));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = r.read_i32::<LittleEndian>()?;
            if !(0..=8).contains(&rank) {
                return Err(Error::Format(format!("tensor {name}: bad rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                let d = r.read_i32::<LittleEndian>()?;
                if d < 0 {
                    return Err(Error::Format(format!("tensor {name}: negative dim")));
                }
                shape.push(d as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut data)?;
            store.put(name, shape, data);
        }
        Ok(store)
    }
}
