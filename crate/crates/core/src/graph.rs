//! Tape-based reverse-mode automatic differentiation over 2-D `f64` arrays.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters are read
//! by reference from a [`ParamStore`]; constants are copied in. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and
//! returns one gradient per trainable parameter touched by the pass.
//!
//! Nodes that depend only on constants or frozen parameters never receive
//! gradient buffers, so frozen sub-networks cost one forward pass only.

use std::collections::BTreeMap;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::nn::{ParamId, ParamStore};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Pairs and negative candidates for an InfoNCE term over rows of an
/// embedding matrix.
#[derive(Debug, Clone, Default)]
pub struct ContrastSet {
    /// (anchor row, positive row)
    pub pairs: Vec<(usize, usize)>,
    /// Negative rows for each pair, same order as `pairs`.
    pub negatives: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct GaussianPrior {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Transpose(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ReplaceRows(Var, Vec<usize>, Var),
    LayerNorm(Var, Array2<f64>),
    Sum(Var),
    Mean(Var),
    FoldSegments(Var, usize),
    UnfoldSegments(Var, usize),
    RepeatCols(Var, usize),
    DepthwiseConv {
        x: Var,
        w: Var,
        seg: usize,
    },
    ChannelLift {
        x: Array2<f64>,
        present: Vec<bool>,
        seg: usize,
        w: Var,
        b: Var,
        emb: Var,
        missing: Var,
    },
    StraightThrough(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        probs: Vec<Array2<f64>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Array2<f64>,
    },
    SoftCrossEntropy {
        logits: Var,
        targets: Array2<f64>,
        probs: Array2<f64>,
    },
    MaskedMse {
        pred: Var,
        target: Array2<f64>,
        weight: Array2<f64>,
    },
    MaskedMae {
        pred: Var,
        target: Array2<f64>,
        weight: Array2<f64>,
    },
    L2NormalizeRows(Var, Vec<f64>),
    InfoNce {
        emb: Var,
        set: ContrastSet,
        temperature: f64,
    },
    ConsistencyKl {
        poro: Var,
        logits: Var,
        prior: GaussianPrior,
        eps: f64,
    },
}

struct Node {
    value: Option<Array2<f64>>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    frozen: Vec<bool>,
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

fn softmax_row(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

fn softmax_rows(a: &Array2<f64>) -> Array2<f64> {
    let mut p = a.as_standard_layout().into_owned();
    for mut row in p.rows_mut() {
        softmax_row(row.as_slice_mut().expect("standard layout"));
    }
    p
}

/// Log-sum-exp of a slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn gaussian_assignment(y: f64, prior: &GaussianPrior) -> Vec<f64> {
    let mut a: Vec<f64> = prior
        .means
        .iter()
        .zip(&prior.stds)
        .map(|(m, s)| -(y - m).powi(2) / (2.0 * s * s) - s.ln())
        .collect();
    softmax_row(&mut a);
    a
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            store,
            frozen: vec![false; store.len()],
            nodes: Vec::with_capacity(256),
        }
    }

    /// Marks every parameter whose name starts with `prefix` as frozen.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for (id, name) in self.store.names().enumerate() {
            if name.starts_with(prefix) {
                self.frozen[id] = true;
            }
        }
    }

    pub fn freeze_all(&mut self) {
        self.frozen.iter_mut().for_each(|f| *f = true);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(a), _) => a,
            (None, Op::Param(id)) => self.store.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, a: Array2<f64>) -> Var {
        self.push(a, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let needs = !self.frozen[id.index()];
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: needs,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// `a + r` with `r` a 1×n row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let out = self.value(a) + self.value(r);
        let ng = self.ng(a) || self.ng(r);
        self.push(out, Op::AddRow(a, r), ng)
    }

    pub fn mul_row(&mut self, a: Var, r: Var) -> Var {
        let out = self.value(a) * self.value(r);
        let ng = self.ng(a) || self.ng(r);
        self.push(out, Op::MulRow(a, r), ng)
    }

    /// `a + c` with `c` an m×1 column broadcast over the columns of `a`.
    pub fn add_col(&mut self, a: Var, c: Var) -> Var {
        let out = self.value(a) + self.value(c);
        let ng = self.ng(a) || self.ng(c);
        self.push(out, Op::AddCol(a, c), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a) * s;
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| gelu_parts(x).0);
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().as_standard_layout().into_owned();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let out = self.value(a).select(Axis(0), idx);
        let ng = self.ng(a);
        self.push(out, Op::GatherRows(a, idx.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Replaces the listed rows of `a` with the 1×n row `r`.
    pub fn replace_rows(&mut self, a: Var, rows: &[usize], r: Var) -> Var {
        let mut out = self.value(a).clone();
        let rv = self.value(r).row(0).to_owned();
        for &i in rows {
            out.row_mut(i).assign(&rv);
        }
        let ng = self.ng(a) || self.ng(r);
        self.push(out, Op::ReplaceRows(a, rows.to_vec(), r), ng)
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.ncols() as f64;
        let mut y = x.clone();
        let mut inv = Array2::zeros((x.nrows(), 1));
        for (i, mut row) in y.rows_mut().into_iter().enumerate() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv[[i, 0]] = is;
        }
        let ng = self.ng(a);
        self.push(y, Op::LayerNorm(a, inv), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Array2::from_elem((1, 1), x.sum() / x.len() as f64);
        let ng = self.ng(a);
        self.push(out, Op::Mean(a), ng)
    }

    /// D×(B·seg) → B×(D·seg): each column block becomes one row, channel-major.
    pub fn fold_segments(&mut self, a: Var, seg: usize) -> Var {
        let out = fold(self.value(a), seg);
        let ng = self.ng(a);
        self.push(out, Op::FoldSegments(a, seg), ng)
    }

    /// Inverse of [`Graph::fold_segments`]; `channels` is D.
    pub fn unfold_segments(&mut self, a: Var, seg: usize) -> Var {
        let out = unfold(self.value(a), seg);
        let ng = self.ng(a);
        self.push(out, Op::UnfoldSegments(a, seg), ng)
    }

    /// D×B → D×(B·times), repeating each column `times` times.
    pub fn repeat_cols(&mut self, a: Var, times: usize) -> Var {
        let x = self.value(a);
        let (d, b) = x.dim();
        let mut out = Array2::zeros((d, b * times));
        for j in 0..b {
            let col = x.column(j);
            for t in 0..times {
                out.column_mut(j * times + t).assign(&col);
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::RepeatCols(a, times), ng)
    }

    /// Per-channel "same" convolution over independent column segments of
    /// length `seg`. `w` is D×k with k odd.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, seg: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (d, cols) = xv.dim();
        let k = wv.ncols();
        assert!(k % 2 == 1, "depthwise kernel must be odd");
        assert_eq!(cols % seg, 0, "columns not a multiple of segment length");
        let pad = k / 2;
        let mut out = Array2::zeros((d, cols));
        for c in 0..d {
            let xr = xv.row(c);
            let wr = wv.row(c);
            let mut or = out.row_mut(c);
            for b0 in (0..cols).step_by(seg) {
                for t in 0..seg {
                    let mut acc = 0.0;
                    for j in 0..k {
                        let src = t as isize + j as isize - pad as isize;
                        if src >= 0 && (src as usize) < seg {
                            acc += wr[j] * xr[b0 + src as usize];
                        }
                    }
                    or[b0 + t] = acc;
                }
            }
        }
        let ng = self.ng(x) || self.ng(w);
        self.push(out, Op::DepthwiseConv { x, w, seg }, ng)
    }

    /// Lifts each scalar curve sample to an `e`-dim feature and adds the
    /// channel's curve-type embedding. Channels flagged absent (per
    /// channel and segment, `present[c * n_seg + b]`) take the missing
    /// token instead of the lifted value.
    ///
    /// `x` is C×(B·seg); output is (C·e)×(B·seg).
    #[allow(clippy::too_many_arguments)]
    pub fn channel_lift(
        &mut self,
        x: Array2<f64>,
        present: Vec<bool>,
        seg: usize,
        w: Var,
        b: Var,
        emb: Var,
        missing: Var,
    ) -> Var {
        let (c_n, cols) = x.dim();
        let n_seg = cols / seg;
        assert_eq!(present.len(), c_n * n_seg);
        let wv = self.value(w);
        let bv = self.value(b);
        let ev = self.value(emb);
        let mv = self.value(missing);
        let e = wv.ncols();
        assert_eq!(ev.nrows(), c_n, "one curve-type embedding per channel");
        let mut out = Array2::zeros((c_n * e, cols));
        for c in 0..c_n {
            for col in 0..cols {
                let here = present[c * n_seg + col / seg];
                for j in 0..e {
                    let base = if here {
                        x[[c, col]] * wv[[0, j]] + bv[[0, j]]
                    } else {
                        mv[[0, j]]
                    };
                    out[[c * e + j, col]] = base + ev[[c, j]];
                }
            }
        }
        let ng = self.ng(w) || self.ng(b) || self.ng(emb) || self.ng(missing);
        self.push(
            out,
            Op::ChannelLift {
                x,
                present,
                seg,
                w,
                b,
                emb,
                missing,
            },
            ng,
        )
    }

    /// Forward value `quantized`, gradient passed straight to `z`.
    pub fn straight_through(&mut self, z: Var, quantized: Array2<f64>) -> Var {
        assert_eq!(self.value(z).dim(), quantized.dim());
        let ng = self.ng(z);
        self.push(quantized, Op::StraightThrough(z), ng)
    }

    /// Bidirectional multi-head scaled dot-product attention over
    /// independent row blocks of length `seq`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize) -> Var {
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let (n, dm) = qv.dim();
        assert_eq!(n % seq, 0);
        assert_eq!(dm % heads, 0);
        let dh = dm / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((n, dm));
        let mut probs = Vec::with_capacity(n / seq * heads);
        for b in 0..n / seq {
            let rows = b * seq..(b + 1) * seq;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = qv.slice(s![rows.clone(), cols.clone()]);
                let kh = kv.slice(s![rows.clone(), cols.clone()]);
                let vh = vv.slice(s![rows.clone(), cols.clone()]);
                let scores = qh.dot(&kh.t()) * scale;
                let p = softmax_rows(&scores);
                out.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            },
            ng,
        )
    }

    /// Mean softmax cross-entropy of `logits` rows against class ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len());
        let probs = softmax_rows(lv);
        let n = targets.len() as f64;
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = lv.row(i);
            let lse = log_sum_exp(row.as_slice().expect("standard layout"));
            loss += lse - row[t];
        }
        let ng = self.ng(logits);
        self.push(
            Array2::from_elem((1, 1), loss / n),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Mean over rows of −Σ_k y_k log softmax(logits)_k.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Array2<f64>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.dim(), targets.dim());
        let probs = softmax_rows(lv);
        let n = lv.nrows() as f64;
        let mut loss = 0.0;
        for (i, row) in lv.rows().into_iter().enumerate() {
            let lse = log_sum_exp(row.as_slice().expect("standard layout"));
            for (k, &l) in row.iter().enumerate() {
                loss -= targets[[i, k]] * (l - lse);
            }
        }
        let ng = self.ng(logits);
        self.push(
            Array2::from_elem((1, 1), loss / n),
            Op::SoftCrossEntropy {
                logits,
                targets,
                probs,
            },
            ng,
        )
    }

    /// Σ w (pred − target)² / Σ w. Returns 0 when the weight mass is 0.
    pub fn masked_mse(&mut self, pred: Var, target: Array2<f64>, weight: Array2<f64>) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.dim(), target.dim());
        assert_eq!(pv.dim(), weight.dim());
        let mass = weight.sum();
        let mut acc = 0.0;
        Zip::from(pv).and(&target).and(&weight).for_each(|&p, &t, &w| acc += w * (p - t) * (p - t));
        let val = if mass > 0.0 { acc / mass } else { 0.0 };
        let ng = self.ng(pred);
        self.push(
            Array2::from_elem((1, 1), val),
            Op::MaskedMse {
                pred,
                target,
                weight,
            },
            ng,
        )
    }

    /// Σ w |pred − target| / Σ w.
    pub fn masked_mae(&mut self, pred: Var, target: Array2<f64>, weight: Array2<f64>) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.dim(), target.dim());
        assert_eq!(pv.dim(), weight.dim());
        let mass = weight.sum();
        let mut acc = 0.0;
        Zip::from(pv).and(&target).and(&weight).for_each(|&p, &t, &w| acc += w * (p - t).abs());
        let val = if mass > 0.0 { acc / mass } else { 0.0 };
        let ng = self.ng(pred);
        self.push(
            Array2::from_elem((1, 1), val),
            Op::MaskedMae {
                pred,
                target,
                weight,
            },
            ng,
        )
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut y = x.clone();
        let mut norms = Vec::with_capacity(x.nrows());
        for mut row in y.rows_mut() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        let ng = self.ng(a);
        self.push(y, Op::L2NormalizeRows(a, norms), ng)
    }

    /// Mean InfoNCE over `set.pairs`, with cosine similarity given by dot
    /// products of the (already normalized) rows of `emb`. The denominator
    /// holds the positive plus every listed negative.
    pub fn info_nce(&mut self, emb: Var, set: ContrastSet, temperature: f64) -> Var {
        assert_eq!(set.pairs.len(), set.negatives.len());
        let e = self.value(emb);
        let mut loss = 0.0;
        for (&(i, j), negs) in set.pairs.iter().zip(&set.negatives) {
            let ai = e.row(i);
            let mut logits = Vec::with_capacity(negs.len() + 1);
            logits.push(ai.dot(&e.row(j)) / temperature);
            for &n in negs {
                logits.push(ai.dot(&e.row(n)) / temperature);
            }
            loss += log_sum_exp(&logits) - logits[0];
        }
        let val = if set.pairs.is_empty() {
            0.0
        } else {
            loss / set.pairs.len() as f64
        };
        let ng = self.ng(emb);
        self.push(
            Array2::from_elem((1, 1), val),
            Op::InfoNce {
                emb,
                set,
                temperature,
            },
            ng,
        )
    }

    /// Mean over rows of KL(P_poro ‖ softmax(logits)) where P_poro is the
    /// normalized Gaussian likelihood of each porosity value under the
    /// per-class priors. Both distributions are ε-smoothed.
    pub fn consistency_kl(&mut self, poro: Var, logits: Var, prior: GaussianPrior, eps: f64) -> Var {
        let pv = self.value(poro);
        let lv = self.value(logits);
        let n_cls = prior.means.len();
        assert_eq!(lv.ncols(), n_cls);
        assert_eq!(pv.nrows(), lv.nrows());
        let q = softmax_rows(lv);
        let z = 1.0 + n_cls as f64 * eps;
        let mut total = 0.0;
        for t in 0..pv.nrows() {
            let p = gaussian_assignment(pv[[t, 0]], &prior);
            for k in 0..n_cls {
                let ps = (p[k] + eps) / z;
                let qs = (q[[t, k]] + eps) / z;
                total += ps * (ps.ln() - qs.ln());
            }
        }
        let val = total / pv.nrows().max(1) as f64;
        let ng = self.ng(poro) || self.ng(logits);
        self.push(
            Array2::from_elem((1, 1), val),
            Op::ConsistencyKl {
                poro,
                logits,
                prior,
                eps,
            },
            ng,
        )
    }

    /// Reverse pass from a 1×1 node. Returns gradients for every
    /// trainable parameter reached.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));
        let mut out = Gradients::default();

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let acc = |v: Var, d: Array2<f64>, grads: &mut Vec<Option<Array2<f64>>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &d,
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.accumulate(*id, g),
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        acc(*a, g.dot(&self.value(*b).t()), &mut grads);
                    }
                    if self.ng(*b) {
                        acc(*b, self.value(*a).t().dot(&g), &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, -g, &mut grads);
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        acc(*a, &g * self.value(*b), &mut grads);
                    }
                    if self.ng(*b) {
                        acc(*b, &g * self.value(*a), &mut grads);
                    }
                }
                Op::AddRow(a, r) => {
                    if self.ng(*r) {
                        acc(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)), &mut grads);
                    }
                    acc(*a, g, &mut grads);
                }
                Op::MulRow(a, r) => {
                    if self.ng(*r) {
                        let d = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(*r, d, &mut grads);
                    }
                    if self.ng(*a) {
                        acc(*a, &g * self.value(*r), &mut grads);
                    }
                }
                Op::AddCol(a, c) => {
                    if self.ng(*c) {
                        acc(*c, g.sum_axis(Axis(1)).insert_axis(Axis(1)), &mut grads);
                    }
                    acc(*a, g, &mut grads);
                }
                Op::Scale(a, s) => acc(*a, g * *s, &mut grads),
                Op::Gelu(a) => {
                    let d = Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|&gv, &x| gv * gelu_parts(x).1);
                    acc(*a, d, &mut grads);
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().expect("value");
                    let d = Zip::from(&g).and(y).map_collect(|&gv, &yv| gv * yv * (1.0 - yv));
                    acc(*a, d, &mut grads);
                }
                Op::Transpose(a) => acc(*a, g.t().as_standard_layout().into_owned(), &mut grads),
                Op::GatherRows(a, idx) => {
                    let mut d = Array2::zeros(self.value(*a).dim());
                    for (i, &src) in idx.iter().enumerate() {
                        let mut row = d.row_mut(src);
                        row += &g.row(i);
                    }
                    acc(*a, d, &mut grads);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let r = self.value(*p).nrows();
                        if self.ng(*p) {
                            acc(*p, g.slice(s![start..start + r, ..]).to_owned(), &mut grads);
                        }
                        start += r;
                    }
                }
                Op::ReplaceRows(a, rows, r) => {
                    let mut da = g.clone();
                    let mut dr = Array2::zeros((1, g.ncols()));
                    for &i in rows {
                        {
                            let mut row = dr.row_mut(0);
                            row += &g.row(i);
                        }
                        da.row_mut(i).fill(0.0);
                    }
                    acc(*a, da, &mut grads);
                    acc(*r, dr, &mut grads);
                }
                Op::LayerNorm(a, inv) => {
                    let y = node.value.as_ref().expect("value");
                    let n = y.ncols() as f64;
                    let mut d = Array2::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let gr = g.row(i);
                        let yr = y.row(i);
                        let mg = gr.sum() / n;
                        let mgy = gr.dot(&yr) / n;
                        let is = inv[[i, 0]];
                        for j in 0..y.ncols() {
                            d[[i, j]] = is * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::Sum(a) => {
                    let d = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    acc(*a, d, &mut grads);
                }
                Op::Mean(a) => {
                    let x = self.value(*a);
                    let d = Array2::from_elem(x.dim(), g[[0, 0]] / x.len() as f64);
                    acc(*a, d, &mut grads);
                }
                Op::FoldSegments(a, seg) => acc(*a, unfold(&g, *seg), &mut grads),
                Op::UnfoldSegments(a, seg) => acc(*a, fold(&g, *seg), &mut grads),
                Op::RepeatCols(a, times) => {
                    let (d, b) = self.value(*a).dim();
                    let mut da = Array2::zeros((d, b));
                    for j in 0..b {
                        for t in 0..*times {
                            let mut col = da.column_mut(j);
                            col += &g.column(j * times + t);
                        }
                    }
                    acc(*a, da, &mut grads);
                }
                Op::DepthwiseConv { x, w, seg } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (d, cols) = xv.dim();
                    let k = wv.ncols();
                    let pad = k / 2;
                    let mut dx = Array2::zeros((d, cols));
                    let mut dw = Array2::zeros((d, k));
                    for c in 0..d {
                        for b0 in (0..cols).step_by(*seg) {
                            for t in 0..*seg {
                                let gv = g[[c, b0 + t]];
                                if gv == 0.0 {
                                    continue;
                                }
                                for j in 0..k {
                                    let src = t as isize + j as isize - pad as isize;
                                    if src >= 0 && (src as usize) < *seg {
                                        let si = b0 + src as usize;
                                        dx[[c, si]] += gv * wv[[c, j]];
                                        dw[[c, j]] += gv * xv[[c, si]];
                                    }
                                }
                            }
                        }
                    }
                    acc(*x, dx, &mut grads);
                    acc(*w, dw, &mut grads);
                }
                Op::ChannelLift {
                    x,
                    present,
                    seg,
                    w,
                    b,
                    emb,
                    missing,
                } => {
                    let (c_n, cols) = x.dim();
                    let n_seg = cols / seg;
                    let e = self.value(*w).ncols();
                    let mut dw = Array2::zeros((1, e));
                    let mut db = Array2::zeros((1, e));
                    let mut demb = Array2::zeros((c_n, e));
                    let mut dmiss = Array2::zeros((1, e));
                    for c in 0..c_n {
                        for col in 0..cols {
                            let here = present[c * n_seg + col / seg];
                            for j in 0..e {
                                let gv = g[[c * e + j, col]];
                                demb[[c, j]] += gv;
                                if here {
                                    dw[[0, j]] += gv * x[[c, col]];
                                    db[[0, j]] += gv;
                                } else {
                                    dmiss[[0, j]] += gv;
                                }
                            }
                        }
                    }
                    acc(*w, dw, &mut grads);
                    acc(*b, db, &mut grads);
                    acc(*emb, demb, &mut grads);
                    acc(*missing, dmiss, &mut grads);
                }
                Op::StraightThrough(z) => acc(*z, g, &mut grads),
                Op::Attention {
                    q,
                    k,
                    v,
                    seq,
                    heads,
                    probs,
                } => {
                    let qv = self.value(*q);
                    let kv = self.value(*k);
                    let vv = self.value(*v);
                    let (n, dm) = qv.dim();
                    let dh = dm / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Array2::zeros((n, dm));
                    let mut dk = Array2::zeros((n, dm));
                    let mut dv = Array2::zeros((n, dm));
                    for b in 0..n / seq {
                        let rows = b * seq..(b + 1) * seq;
                        for h in 0..*heads {
                            let cols = h * dh..(h + 1) * dh;
                            let p = &probs[b * heads + h];
                            let go = g.slice(s![rows.clone(), cols.clone()]);
                            let qh = qv.slice(s![rows.clone(), cols.clone()]);
                            let kh = kv.slice(s![rows.clone(), cols.clone()]);
                            let vh = vv.slice(s![rows.clone(), cols.clone()]);
                            dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&go));
                            let dp = go.dot(&vh.t());
                            let mut ds = Array2::zeros(p.dim());
                            for i in 0..*seq {
                                let dot: f64 = p.row(i).dot(&dp.row(i));
                                for j in 0..*seq {
                                    ds[[i, j]] = p[[i, j]] * (dp[[i, j]] - dot) * scale;
                                }
                            }
                            dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&kh));
                            dk.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.t().dot(&qh));
                        }
                    }
                    acc(*q, dq, &mut grads);
                    acc(*k, dk, &mut grads);
                    acc(*v, dv, &mut grads);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = g[[0, 0]] / targets.len() as f64;
                    let mut d = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        d[[i, t]] -= 1.0;
                    }
                    acc(*logits, d * scale, &mut grads);
                }
                Op::SoftCrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = g[[0, 0]] / probs.nrows() as f64;
                    let mut d = probs.clone();
                    for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                        let mass = targets.row(i).sum();
                        row *= mass;
                        row -= &targets.row(i);
                    }
                    acc(*logits, d * scale, &mut grads);
                }
                Op::MaskedMse {
                    pred,
                    target,
                    weight,
                } => {
                    let mass = weight.sum();
                    if mass > 0.0 {
                        let c = 2.0 * g[[0, 0]] / mass;
                        let d = Zip::from(self.value(*pred))
                            .and(target)
                            .and(weight)
                            .map_collect(|&p, &t, &w| c * w * (p - t));
                        acc(*pred, d, &mut grads);
                    }
                }
                Op::MaskedMae {
                    pred,
                    target,
                    weight,
                } => {
                    let mass = weight.sum();
                    if mass > 0.0 {
                        let c = g[[0, 0]] / mass;
                        let d = Zip::from(self.value(*pred))
                            .and(target)
                            .and(weight)
                            .map_collect(|&p, &t, &w| c * w * (p - t).signum() * ((p != t) as u8 as f64));
                        acc(*pred, d, &mut grads);
                    }
                }
                Op::L2NormalizeRows(a, norms) => {
                    let y = node.value.as_ref().expect("value");
                    let mut d = Array2::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let yg = y.row(i).dot(&g.row(i));
                        for j in 0..y.ncols() {
                            d[[i, j]] = (g[[i, j]] - y[[i, j]] * yg) / norms[i];
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::InfoNce {
                    emb,
                    set,
                    temperature,
                } => {
                    if !set.pairs.is_empty() {
                        let e = self.value(*emb);
                        let mut d = Array2::zeros(e.dim());
                        let scale = g[[0, 0]] / set.pairs.len() as f64;
                        for (&(i, j), negs) in set.pairs.iter().zip(&set.negatives) {
                            let mut others = Vec::with_capacity(negs.len() + 1);
                            others.push(j);
                            others.extend_from_slice(negs);
                            let mut p: Vec<f64> =
                                others.iter().map(|&o| e.row(i).dot(&e.row(o)) / temperature).collect();
                            softmax_row(&mut p);
                            for (slot, &o) in others.iter().enumerate() {
                                let dl = if slot == 0 { p[0] - 1.0 } else { p[slot] };
                                let ds = dl * scale / temperature;
                                if ds == 0.0 {
                                    continue;
                                }
                                for c in 0..e.ncols() {
                                    d[[i, c]] += ds * e[[o, c]];
                                    d[[o, c]] += ds * e[[i, c]];
                                }
                            }
                        }
                        acc(*emb, d, &mut grads);
                    }
                }
                Op::ConsistencyKl {
                    poro,
                    logits,
                    prior,
                    eps,
                } => {
                    let pv = self.value(*poro);
                    let lv = self.value(*logits);
                    let n_cls = prior.means.len();
                    let rows = pv.nrows();
                    let q = softmax_rows(lv);
                    let z = 1.0 + n_cls as f64 * eps;
                    let scale = g[[0, 0]] / rows.max(1) as f64;
                    let mut dpor = Array2::zeros(pv.dim());
                    let mut dlog = Array2::zeros(lv.dim());
                    for t in 0..rows {
                        let y = pv[[t, 0]];
                        let p = gaussian_assignment(y, prior);
                        let ps: Vec<f64> = p.iter().map(|v| (v + eps) / z).collect();
                        let qs: Vec<f64> = (0..n_cls).map(|k| (q[[t, k]] + eps) / z).collect();
                        let gp: Vec<f64> = (0..n_cls).map(|k| (ps[k].ln() - qs[k].ln() + 1.0) / z).collect();
                        let gq: Vec<f64> = (0..n_cls).map(|k| -ps[k] / (qs[k] * z)).collect();
                        let pgp: f64 = (0..n_cls).map(|k| p[k] * gp[k]).sum();
                        let qgq: f64 = (0..n_cls).map(|k| q[[t, k]] * gq[k]).sum();
                        let mut dy = 0.0;
                        for k in 0..n_cls {
                            let ga = p[k] * (gp[k] - pgp);
                            let sd = prior.stds[k];
                            dy += ga * (-(y - prior.means[k]) / (sd * sd));
                            dlog[[t, k]] = scale * q[[t, k]] * (gq[k] - qgq);
                        }
                        dpor[[t, 0]] = scale * dy;
                    }
                    acc(*poro, dpor, &mut grads);
                    acc(*logits, dlog, &mut grads);
                }
            }
        }
        out
    }
}

fn fold(x: &Array2<f64>, seg: usize) -> Array2<f64> {
    let (d, cols) = x.dim();
    let b = cols / seg;
    let mut out = Array2::zeros((b, d * seg));
    for bi in 0..b {
        for c in 0..d {
            out.slice_mut(s![bi, c * seg..(c + 1) * seg])
                .assign(&x.slice(s![c, bi * seg..(bi + 1) * seg]));
        }
    }
    out
}

fn unfold(x: &Array2<f64>, seg: usize) -> Array2<f64> {
    let (b, width) = x.dim();
    let d = width / seg;
    let mut out = Array2::zeros((d, b * seg));
    for bi in 0..b {
        for c in 0..d {
            out.slice_mut(s![c, bi * seg..(bi + 1) * seg])
                .assign(&x.slice(s![bi, c * seg..(c + 1) * seg]));
        }
    }
    out
}

/// Gradients keyed by parameter.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    map: BTreeMap<ParamId, Array2<f64>>,
}

impl Gradients {
    fn accumulate(&mut self, id: ParamId, g: Array2<f64>) {
        match self.map.get_mut(&id) {
            Some(existing) => *existing += &g,
            None => {
                self.map.insert(id, g);
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Array2<f64>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&ParamId, &mut Array2<f64>)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.map.values().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.map.values_mut() {
            *g *= s;
        }
    }
}
