//! Parameter storage and the layers the UNet is assembled from.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Serialized form of one parameter tensor.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct NamedParam<T> {
    pub name: String,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<NamedParam<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.params.push(NamedParam { name: name.into(), value });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: usize) -> &NamedParam<T> {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut NamedParam<T> {
        &mut self.params[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedParam<T>> {
        self.params.iter()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Places parameter `id` on the tape.
    pub fn var(&self, g: &Graph<T>, id: usize) -> Var {
        g.param(id, self.params[id].value.clone())
    }

    pub fn to_records(&self) -> Vec<ParamRecord> {
        self.params
            .iter()
            .map(|p| ParamRecord {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                values: p.value.data().iter().map(|v| v.to_f32().unwrap_or(0.0)).collect(),
            })
            .collect()
    }

    /// Overwrites values from records; names and shapes must match exactly.
    pub fn load_records(&mut self, records: &[ParamRecord]) -> Result<(), String> {
        if records.len() != self.params.len() {
            return Err(format!("parameter count mismatch: checkpoint has {}, model has {}", records.len(), self.params.len()));
        }
        for (p, r) in self.params.iter_mut().zip(records) {
            if p.name != r.name || p.value.shape() != r.shape.as_slice() {
                return Err(format!("parameter {} {:?} does not match checkpoint entry {} {:?}", p.name, p.value.shape(), r.name, r.shape));
            }
            if r.values.len() != p.value.len() {
                return Err(format!("parameter {} has a truncated payload", r.name));
            }
            for (d, &v) in p.value.data_mut().iter_mut().zip(&r.values) {
                *d = T::from_f32(v).unwrap_or_else(T::zero);
            }
        }
        Ok(())
    }

    /// Same architecture with every value cast to another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { params: self.params.iter().map(|p| NamedParam { name: p.name.clone(), value: p.value.cast() }).collect() }
    }
}

/// Seeded initializer shared by all layers of one model.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn normal<T: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std.max(0.0)).expect("valid std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(dist.sample(&mut self.rng)).unwrap()).collect();
        Tensor::from_vec(shape, data)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: usize,
    pub bias: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Same-padded convolution with `1/sqrt(fan_in)` weight scale times `gain`.
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, cin: usize, cout: usize, k: usize, gain: f64) -> Self {
        let std = gain / ((cin * k * k) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), init.normal(&[cout, cin, k, k], std));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { weight, bias, stride: 1, pad: k / 2 }
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let w = ps.var(g, self.weight);
        let b = ps.var(g, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, din: usize, dout: usize, gain: f64) -> Self {
        let std = gain / (din as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), init.normal(&[dout, din], std));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dout]));
        Self { weight, bias }
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let w = ps.var(g, self.weight);
        let b = ps.var(g, self.bias);
        g.linear(x, w, Some(b))
    }
}

/// Pre-activation residual block with optional feature-wise conditioning.
#[derive(Clone, Debug)]
pub struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    film: Option<(Linear, Linear)>,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, cin: usize, cout: usize, cond_dim: Option<usize>) -> Self {
        let conv1 = Conv2d::new(store, init, &format!("{name}.conv1"), cin, cout, 3, 1.0);
        let film = cond_dim.map(|d| {
            (
                Linear::new(store, init, &format!("{name}.film_scale"), d, cout, 0.1),
                Linear::new(store, init, &format!("{name}.film_shift"), d, cout, 1.0),
            )
        });
        let conv2 = Conv2d::new(store, init, &format!("{name}.conv2"), cout, cout, 3, 0.5);
        let skip = (cin != cout).then(|| Conv2d::new(store, init, &format!("{name}.skip"), cin, cout, 1, 1.0));
        Self { conv1, conv2, film, skip }
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, ps: &ParamStore<T>, x: Var, cond: Option<Var>) -> Var {
        let mut h = self.conv1.forward(g, ps, g.silu(x));
        if let (Some((fs, ft)), Some(c)) = (&self.film, cond) {
            let scale = fs.forward(g, ps, c);
            let shift = ft.forward(g, ps, c);
            h = g.film(h, scale, shift);
        }
        h = self.conv2.forward(g, ps, g.silu(h));
        let s = match &self.skip {
            Some(conv) => conv.forward(g, ps, x),
            None => x,
        };
        g.add(h, s)
    }
}

/// Residual single-head spatial self-attention.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    q: Conv2d,
    k: Conv2d,
    v: Conv2d,
    proj: Conv2d,
}

impl SelfAttention {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, ch: usize) -> Self {
        Self {
            q: Conv2d::new(store, init, &format!("{name}.q"), ch, ch, 1, 1.0),
            k: Conv2d::new(store, init, &format!("{name}.k"), ch, ch, 1, 1.0),
            v: Conv2d::new(store, init, &format!("{name}.v"), ch, ch, 1, 1.0),
            proj: Conv2d::new(store, init, &format!("{name}.proj"), ch, ch, 1, 0.5),
        }
    }

    pub fn forward<T: Real>(&self, g: &Graph<T>, ps: &ParamStore<T>, x: Var) -> Var {
        let q = self.q.forward(g, ps, x);
        let k = self.k.forward(g, ps, x);
        let v = self.v.forward(g, ps, x);
        let a = g.attention(q, k, v);
        let o = self.proj.forward(g, ps, a);
        g.add(x, o)
    }
}

/// Sinusoidal features of continuous scalars, `[n, dim]`, frequencies
/// geometrically spaced from 1 down to 1e-4.
pub fn sinusoidal_embedding<T: Real>(values: &[f64], dim: usize) -> Tensor<T> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let mut data = Vec::with_capacity(values.len() * dim);
    for &v in values {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push(T::from_f64((v * freq).sin()).unwrap());
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push(T::from_f64((v * freq).cos()).unwrap());
        }
    }
    Tensor::from_vec(&[values.len(), dim], data)
}
