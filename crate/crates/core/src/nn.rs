//! Parameter storage, dense layers and the Adam optimizer.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::graph::{Gradients, Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(self.id(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Order-sensitive FNV-1a over names and bit patterns of every value
    /// whose name starts with `prefix`.
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for (name, v) in self.names.iter().zip(&self.values) {
            if !name.starts_with(prefix) {
                continue;
            }
            name.bytes().for_each(&mut feed);
            for x in v.iter() {
                x.to_bits().to_le_bytes().into_iter().for_each(&mut feed);
            }
        }
        h
    }
}

pub fn uniform_init(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

pub fn normal_init(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let n = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_fn((rows, cols), |_| n.sample(rng))
}

/// `y = x W + b`, `W` stored in×out.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Linear {
            w: store.add(format!("{name}.w"), uniform_init(rng, fan_in, fan_out, bound)),
            b: store.add(format!("{name}.b"), Array2::zeros((1, fan_out))),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// Layer normalization with learned gain and bias.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Array2::ones((1, dim))),
            bias: store.add(format!("{name}.bias"), Array2::zeros((1, dim))),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm(x);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    /// Fraction of the peak rate reached at the end of cosine decay.
    pub min_lr_ratio: f64,
    pub warmup_steps: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            min_lr_ratio: 0.1,
            warmup_steps: 50,
        }
    }
}

impl OptimizerConfig {
    /// Learning rate at `step` (0-based) of a run of `total` steps:
    /// linear warmup then cosine decay to `min_lr_ratio · lr`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cos)
    }
}

/// Adam with global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: OptimizerConfig,
    m: Vec<Option<Array2<f64>>>,
    v: Vec<Option<Array2<f64>>>,
    t: Vec<u64>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StepReport {
    pub grad_norm: f64,
    pub clipped: bool,
    pub lr: f64,
}

impl Adam {
    pub fn new(cfg: OptimizerConfig, store: &ParamStore) -> Self {
        Adam {
            cfg,
            m: vec![None; store.len()],
            v: vec![None; store.len()],
            t: vec![0; store.len()],
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, mut grads: Gradients, lr: f64) -> StepReport {
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
            self.t.resize(store.len(), 0);
        }
        let norm = grads.global_norm();
        let clipped = self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm;
        if clipped {
            grads.scale(self.cfg.clip_norm / norm);
        }
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        let mut ids: Vec<ParamId> = grads.iter().map(|(id, _)| *id).collect();
        ids.sort();
        for id in ids {
            let g = grads.get(id).expect("present");
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.v[i].get_or_insert_with(|| Array2::zeros(g.dim()));
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let p = store.get_mut(id);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
        StepReport {
            grad_norm: norm,
            clipped,
            lr,
        }
    }
}

/// Fixed sinusoidal features of a scalar in [0, 1]; every entry lies in [-1, 1].
pub fn sinusoidal(x: f64, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let freq = std::f64::consts::PI * (1u64 << (i / 2)) as f64;
            if i % 2 == 0 {
                (freq * x).sin()
            } else {
                (freq * x).cos()
            }
        })
        .collect()
}

/// Standard transformer sinusoidal encoding of an integer position.
pub fn position_encoding(pos: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = pos as f64 * rate;
            if i % 2 == 0 {
                a.sin()
            } else {
                a.cos()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = OptimizerConfig {
            warmup_steps: 10,
            ..Default::default()
        };
        assert!((cfg.lr_at(9, 110) - cfg.lr).abs() < 1e-15);
        assert!((cfg.lr_at(10, 110) - cfg.lr).abs() < 1e-15);
        assert!((cfg.lr_at(110, 110) - cfg.lr * cfg.min_lr_ratio).abs() < 1e-12);
        assert!(cfg.lr_at(60, 110) < cfg.lr);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let id = store.add("x", normal_init(&mut rng, 1, 4, 1.0));
        let mut opt = Adam::new(
            OptimizerConfig {
                lr: 0.05,
                clip_norm: 0.0,
                ..Default::default()
            },
            &store,
        );
        for _ in 0..500 {
            let grads = {
                let mut g = Graph::new(&store);
                let x = g.param(id);
                let sq = g.mul(x, x);
                let l = g.sum(sq);
                g.backward(l)
            };
            opt.step(&mut store, grads, 0.05);
        }
        assert!(store.get(id).iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn clipping_bounds_update_norm() {
        let mut store = ParamStore::new();
        let id = store.add("x", Array2::from_elem((1, 1), 100.0));
        let mut opt = Adam::new(OptimizerConfig::default(), &store);
        let grads = {
            let mut g = Graph::new(&store);
            let x = g.param(id);
            let sq = g.mul(x, x);
            let l = g.sum(sq);
            g.backward(l)
        };
        let rep = opt.step(&mut store, grads, 1e-3);
        assert!(rep.clipped);
        assert!((rep.grad_norm - 200.0).abs() < 1e-9);
    }

    #[test]
    fn sinusoidal_bounded_and_deterministic() {
        for i in 0..=20 {
            let x = i as f64 / 20.0;
            let a = sinusoidal(x, 8);
            assert_eq!(a, sinusoidal(x, 8));
            assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn checksum_tracks_prefix_only() {
        let mut store = ParamStore::new();
        let a = store.add("enc.a", Array2::zeros((2, 2)));
        store.add("head.b", Array2::zeros((2, 2)));
        let before = store.checksum("enc.");
        store.get_mut(store.id("head.b").unwrap())[[0, 0]] = 1.0;
        assert_eq!(before, store.checksum("enc."));
        store.get_mut(a)[[0, 0]] = 1.0;
        assert_ne!(before, store.checksum("enc."));
    }
}
