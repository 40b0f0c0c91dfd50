//! Small neural-network building blocks over candle tensors.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names and are
//! initialized from a seeded ChaCha stream, so a given seed always produces
//! the same weights.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub fn device() -> Device {
    Device::Cpu
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    Uniform { fan_in: usize },
    Normal { std: f64 },
    Zeros,
    Ones,
}

/// Named trainable parameters.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n)
                    .map(|_| self.rng.random_range(-bound..bound) as f32)
                    .collect()
            }
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut self.rng) as f32).collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &device())?)?;
        let t = var.as_tensor().clone();
        if self.vars.insert(name.to_string(), var).is_some() {
            return Err(Error::InvalidConfig(format!("duplicate parameter {name}")));
        }
        Ok(t)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Parameters whose name starts with one of `prefixes`.
    pub fn select(&self, prefixes: &[&str]) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites every parameter from `tensors`; names and shapes must match exactly.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (name, var) in &self.vars {
            let key = format!("{prefix}{name}");
            let t = tensors
                .get(&key)
                .ok_or_else(|| Error::shape(format!("tensor {key}"), "missing"))?;
            if t.dims() != var.dims() {
                return Err(Error::shape(format!("{key} {:?}", var.dims()), format!("{:?}", t.dims())));
            }
            var.set(&t.to_dtype(DType::F32)?)?;
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }
}

/// Stable fingerprint of parameter values (SHA-256 over names and raw f32 bits).
pub fn fingerprint(tensors: &[(String, Tensor)]) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update(name.as_bytes());
        for v in t.flatten_all()?.to_vec1::<f32>()? {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = ps.param(&format!("{name}.weight"), &[d_out, d_in], Init::Uniform { fan_in: d_in })?;
        let bias = ps.param(&format!("{name}.bias"), &[d_out], Init::Uniform { fan_in: d_in })?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    pub fn no_bias(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = ps.param(&format!("{name}.weight"), &[d_out, d_in], Init::Uniform { fan_in: d_in })?;
        Ok(Self { weight, bias: None })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }
}

#[derive(Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.param(&format!("{name}.gamma"), &[dim], Init::Ones)?,
            beta: ps.param(&format!("{name}.beta"), &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Tanh,
}

impl Activation {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Relu => x.relu()?,
            Activation::Gelu => x.gelu_erf()?,
            Activation::Tanh => x.tanh()?,
        })
    }
}

/// Fully connected stack with an activation between layers (none after the last).
#[derive(Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
    act: Activation,
}

impl Mlp {
    pub fn new(ps: &mut ParamStore, name: &str, dims: &[usize], act: Activation) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(ps, &format!("{name}.{i}"), w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, act })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = self.act.apply(&h)?;
            }
        }
        Ok(h)
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }
}

/// Pre-norm transformer block: self-attention then a GELU feed-forward.
#[derive(Clone)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    ff: Mlp,
    heads: usize,
}

impl TransformerBlock {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, ff_mult: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "embedding width {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim)?,
            qkv: Linear::new(ps, &format!("{name}.qkv"), dim, 3 * dim)?,
            proj: Linear::new(ps, &format!("{name}.proj"), dim, dim)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim)?,
            ff: Mlp::new(ps, &format!("{name}.ff"), &[dim, ff_mult * dim, dim], Activation::Gelu)?,
            heads,
        })
    }

    /// `x`: batch x tokens x dim.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let hd = d / self.heads;
        let qkv = self
            .qkv
            .forward(&self.ln1.forward(x)?)?
            .reshape((b, t, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (hd as f64).sqrt())?;
        let att = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = att
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, t, d))?;
        let x = (x + self.proj.forward(&out)?)?;
        let ff = self.ff.forward(&self.ln2.forward(&x)?)?;
        Ok((x + ff)?)
    }
}

/// Converts a batch of `f32` rows into a `rows x cols` tensor.
pub fn matrix(rows: &[Vec<f32>], cols: usize) -> Result<Tensor> {
    let mut flat = Vec::with_capacity(rows.len() * cols);
    for r in rows {
        if r.len() != cols {
            return Err(Error::shape(cols, r.len()));
        }
        flat.extend_from_slice(r);
    }
    Ok(Tensor::from_vec(flat, (rows.len(), cols), &device())?)
}

/// Seeded batch indices: a prefix of a Fisher-Yates shuffle of `0..n`.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    use rand::seq::index::sample;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    if batch >= n {
        let mut all: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        all.shuffle(&mut rng);
        return all;
    }
    sample(&mut rng, n, batch).into_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_init_is_reproducible() {
        let mut a = ParamStore::new(7);
        let mut b = ParamStore::new(7);
        Linear::new(&mut a, "l", 4, 3).unwrap();
        Linear::new(&mut b, "l", 4, 3).unwrap();
        assert_eq!(
            fingerprint(&a.named_tensors()).unwrap(),
            fingerprint(&b.named_tensors()).unwrap()
        );
        assert!(a.param("l.weight", &[1], Init::Zeros).is_err());
    }

    #[test]
    fn layer_norm_normalizes() {
        let mut ps = ParamStore::new(0);
        let ln = LayerNorm::new(&mut ps, "ln", 5).unwrap();
        let x = Tensor::new(&[[1f32, 2., 3., 4., 10.]], &device()).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f32>().unwrap();
        let mean: f32 = y[0].iter().sum::<f32>() / 5.0;
        let var: f32 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 5.0;
        assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn transformer_block_shapes() {
        let mut ps = ParamStore::new(0);
        let blk = TransformerBlock::new(&mut ps, "b", 16, 4, 2).unwrap();
        let x = Tensor::zeros((2, 5, 16), DType::F32, &device()).unwrap();
        assert_eq!(blk.forward(&x).unwrap().dims(), &[2, 5, 16]);
        assert!(TransformerBlock::new(&mut ps, "c", 10, 4, 2).is_err());
    }

    #[test]
    fn batch_indices_deterministic_and_distinct() {
        let a = batch_indices(100, 10, 3, 5);
        assert_eq!(a, batch_indices(100, 10, 3, 5));
        assert_ne!(a, batch_indices(100, 10, 3, 6));
        let mut s = a.clone();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 10);
        assert_eq!(batch_indices(4, 10, 0, 0).len(), 4);
    }
}
