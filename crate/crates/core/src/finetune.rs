//! Multi-task heads (reconstruction, porosity, lithology) with a
//! porosity–lithology consistency term, trained over a frozen backbone.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GaussianPrior, Graph, Var};
use crate::nn::{Adam, Linear, ParamStore};
use crate::pretrain::{Backbone, PretrainError, TokenSequence};

pub const CONSISTENCY_EPS: f64 = 1e-8;
const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum FinetuneError {
    #[error("reconstruction mask is empty")]
    EmptyMask,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("row {row} is not a distribution (sum {sum})")]
    NotADistribution { row: usize, sum: f64 },
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
    #[error("invalid fine-tuning config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Backbone(#[from] PretrainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultiTaskWeights {
    pub lambda_r: f64,
    pub lambda_p: f64,
    pub lambda_l: f64,
    pub gamma: f64,
}

impl Default for MultiTaskWeights {
    fn default() -> Self {
        MultiTaskWeights {
            lambda_r: 1.0,
            lambda_p: 1.0,
            lambda_l: 1.0,
            gamma: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub weights: MultiTaskWeights,
    /// Extra multiplier on the auxiliary terms (reconstruction and
    /// consistency).
    pub aux_multiplier: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub labeled_wells: usize,
    pub freeze_encoder: bool,
    pub modality_dropout: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            weights: MultiTaskWeights::default(),
            aux_multiplier: 1.0,
            steps: 500,
            batch_size: 8,
            labeled_wells: 5,
            freeze_encoder: true,
            modality_dropout: 0.15,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), FinetuneError> {
        let w = &self.weights;
        if [w.lambda_r, w.lambda_p, w.lambda_l, w.gamma, self.aux_multiplier]
            .iter()
            .any(|&v| v < 0.0 || !v.is_finite())
        {
            return Err(FinetuneError::InvalidConfig("weights must be finite and nonnegative".into()));
        }
        if w.lambda_r + w.lambda_p + w.lambda_l + w.gamma == 0.0 {
            return Err(FinetuneError::InvalidConfig("at least one task weight must be positive".into()));
        }
        if self.batch_size == 0 || self.labeled_wells == 0 {
            return Err(FinetuneError::InvalidConfig("batch_size and labeled_wells must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.modality_dropout) {
            return Err(FinetuneError::InvalidConfig("modality_dropout must lie in [0,1]".into()));
        }
        Ok(())
    }

    /// Task weights with the auxiliary multiplier applied.
    pub fn effective_weights(&self) -> MultiTaskWeights {
        MultiTaskWeights {
            lambda_r: self.weights.lambda_r * self.aux_multiplier,
            gamma: self.weights.gamma * self.aux_multiplier,
            ..self.weights
        }
    }
}

/// Mean squared error over the (row, column) entries in `mask`.
pub fn recon_loss(x_hat: &Array2<f64>, x: &Array2<f64>, mask: &[(usize, usize)]) -> Result<f64, FinetuneError> {
    if mask.is_empty() {
        return Err(FinetuneError::EmptyMask);
    }
    if x_hat.dim() != x.dim() {
        return Err(FinetuneError::LengthMismatch(x_hat.len(), x.len()));
    }
    Ok(mask.iter().map(|&ix| (x_hat[ix] - x[ix]).powi(2)).sum::<f64>() / mask.len() as f64)
}

pub fn poro_loss(y_hat: &[f64], y: &[f64]) -> Result<f64, FinetuneError> {
    if y_hat.len() != y.len() {
        return Err(FinetuneError::LengthMismatch(y_hat.len(), y.len()));
    }
    if y.is_empty() {
        return Err(FinetuneError::LengthMismatch(0, 0));
    }
    Ok(y_hat.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

fn check_distributions(p: &Array2<f64>) -> Result<(), FinetuneError> {
    for (row, r) in p.rows().into_iter().enumerate() {
        let sum: f64 = r.sum();
        if (sum - 1.0).abs() > 1e-6 || r.iter().any(|&v| v < 0.0) {
            return Err(FinetuneError::NotADistribution { row, sum });
        }
    }
    Ok(())
}

/// Mean per-row cross-entropy `−Σ y log max(ŷ, ε)`.
pub fn litho_loss(probs: &Array2<f64>, one_hot: &Array2<f64>) -> Result<f64, FinetuneError> {
    if probs.dim() != one_hot.dim() {
        return Err(FinetuneError::LengthMismatch(probs.nrows(), one_hot.nrows()));
    }
    check_distributions(probs)?;
    let n = probs.nrows().max(1) as f64;
    Ok(-probs
        .iter()
        .zip(one_hot)
        .map(|(p, y)| if *y == 0.0 { 0.0 } else { y * p.max(LOG_EPS).ln() })
        .sum::<f64>()
        / n)
}

/// Normalized Gaussian likelihood of `y` under each class prior.
pub fn porosity_distribution(y: f64, prior: &GaussianPrior) -> Vec<f64> {
    let logs: Vec<f64> = prior
        .means
        .iter()
        .zip(&prior.stds)
        .map(|(m, s)| -(y - m).powi(2) / (2.0 * s * s) - s.ln())
        .collect();
    let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logs.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// ε-smoothed KL(P ‖ Q) of two distributions.
pub fn smoothed_kl(p: &[f64], q: &[f64], eps: f64) -> f64 {
    let z = 1.0 + p.len() as f64 * eps;
    p.iter()
        .zip(q)
        .map(|(a, b)| {
            let ps = (a + eps) / z;
            let qs = (b + eps) / z;
            ps * (ps.ln() - qs.ln())
        })
        .sum()
}

/// Mean over positions of KL(P_poro ‖ litho_probs).
pub fn consistency_loss(poro_pred: &[f64], litho_probs: &Array2<f64>, prior: &GaussianPrior) -> Result<f64, FinetuneError> {
    if poro_pred.len() != litho_probs.nrows() {
        return Err(FinetuneError::LengthMismatch(poro_pred.len(), litho_probs.nrows()));
    }
    check_distributions(litho_probs)?;
    if poro_pred.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = poro_pred
        .iter()
        .zip(litho_probs.rows())
        .map(|(&y, q)| smoothed_kl(&porosity_distribution(y, prior), q.as_slice().expect("row"), CONSISTENCY_EPS))
        .sum();
    Ok(total / poro_pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossComponents {
    /// `None` when the reconstruction mask is empty.
    pub recon: Option<f64>,
    pub poro: f64,
    pub litho: f64,
    pub consistency: f64,
}

impl LossComponents {
    pub fn weighted(&self, w: &MultiTaskWeights) -> f64 {
        w.lambda_r * self.recon.unwrap_or(0.0) + w.lambda_p * self.poro + w.lambda_l * self.litho + w.gamma * self.consistency
    }
}

/// Head outputs on a batch, in plain arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskOutputs {
    pub recon: Array2<f64>,
    pub poro: Vec<f64>,
    pub litho_probs: Array2<f64>,
}

/// Supervision for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    /// Row of the hidden-state matrix feeding each labeled position.
    pub position_rows: Vec<usize>,
    pub poro: Vec<f64>,
    pub litho: Vec<usize>,
    /// Reconstruction target per token row (C·L columns).
    pub recon_target: Array2<f64>,
    /// Entries of the reconstruction mask set.
    pub recon_mask: Vec<(usize, usize)>,
}

impl LabeledBatch {
    pub fn one_hot(&self, classes: usize) -> Array2<f64> {
        let mut y = Array2::zeros((self.litho.len(), classes));
        for (i, &k) in self.litho.iter().enumerate() {
            y[[i, k]] = 1.0;
        }
        y
    }

    fn validate(&self, classes: usize) -> Result<(), FinetuneError> {
        if self.poro.len() != self.position_rows.len() {
            return Err(FinetuneError::LengthMismatch(self.poro.len(), self.position_rows.len()));
        }
        if self.litho.len() != self.position_rows.len() {
            return Err(FinetuneError::LengthMismatch(self.litho.len(), self.position_rows.len()));
        }
        if self.litho.iter().any(|&k| k >= classes) {
            return Err(FinetuneError::InvalidConfig("lithology id out of range".into()));
        }
        if self.poro.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(FinetuneError::InvalidConfig("porosity target outside [0,1]".into()));
        }
        Ok(())
    }
}

/// Multi-task loss from plain outputs: components and their weighted sum.
/// An empty reconstruction mask drops that term.
pub fn multitask_loss(
    out: &TaskOutputs,
    batch: &LabeledBatch,
    prior: &GaussianPrior,
    w: &MultiTaskWeights,
) -> Result<(f64, LossComponents), FinetuneError> {
    let classes = out.litho_probs.ncols();
    let recon = match recon_loss(&out.recon, &batch.recon_target, &batch.recon_mask) {
        Ok(v) => Some(v),
        Err(FinetuneError::EmptyMask) => None,
        Err(e) => return Err(e),
    };
    let c = LossComponents {
        recon,
        poro: poro_loss(&out.poro, &batch.poro)?,
        litho: litho_loss(&out.litho_probs, &batch.one_hot(classes))?,
        consistency: consistency_loss(&out.poro, &out.litho_probs, prior)?,
    };
    Ok((c.weighted(w), c))
}

#[derive(Debug, Clone)]
pub struct TaskHeads {
    pub litho: Linear,
    pub poro: Linear,
    pub recon: Linear,
    pub prior: GaussianPrior,
    pub classes: usize,
}

pub struct HeadForward {
    pub recon: Option<Var>,
    pub poro: Var,
    pub litho: Var,
    pub consistency: Var,
    pub total: Var,
    pub outputs: TaskOutputs,
}

impl TaskHeads {
    pub fn new(
        store: &mut ParamStore,
        d_model: usize,
        classes: usize,
        recon_width: usize,
        prior: GaussianPrior,
        rng: &mut impl Rng,
    ) -> Result<Self, FinetuneError> {
        if prior.means.len() != classes || prior.stds.len() != classes || prior.stds.iter().any(|&s| s <= 0.0) {
            return Err(FinetuneError::InvalidConfig("prior must give a positive std per class".into()));
        }
        // Porosity starts at the prior mean with no feature dependence.
        let poro = Linear::new(store, "heads.poro", d_model, 1, rng);
        let mean = (prior.means.iter().sum::<f64>() / classes as f64).clamp(1e-3, 1.0 - 1e-3);
        store.get_mut(poro.w).fill(0.0);
        store.get_mut(poro.b).fill((mean / (1.0 - mean)).ln());
        Ok(TaskHeads {
            litho: Linear::new(store, "heads.litho", d_model, classes, rng),
            poro,
            recon: Linear::new(store, "heads.recon", d_model, recon_width, rng),
            prior,
            classes,
        })
    }

    /// Multi-task objective on hidden states (one row per token).
    pub fn objective(&self, g: &mut Graph, hidden: Var, batch: &LabeledBatch, w: &MultiTaskWeights) -> Result<HeadForward, FinetuneError> {
        batch.validate(self.classes)?;
        let h = g.gather_rows(hidden, &batch.position_rows);
        let logits = self.litho.forward(g, h);
        let raw = self.poro.forward(g, h);
        let poro = g.sigmoid(raw);
        let recon = self.recon.forward(g, hidden);

        let poro_col = Array2::from_shape_vec((batch.poro.len(), 1), batch.poro.clone()).expect("shape");
        let mae = g.masked_mae(poro, poro_col, Array2::ones((batch.poro.len(), 1)));
        let ce = g.cross_entropy(logits, &batch.litho);
        let kl = g.consistency_kl(poro, logits, self.prior.clone(), CONSISTENCY_EPS);
        let rec = if batch.recon_mask.is_empty() {
            None
        } else {
            let mut wgt = Array2::zeros(batch.recon_target.dim());
            for &ix in &batch.recon_mask {
                wgt[ix] = 1.0;
            }
            Some(g.masked_mse(recon, batch.recon_target.clone(), wgt))
        };
        let mut total = g.scale(mae, w.lambda_p);
        let t = g.scale(ce, w.lambda_l);
        total = g.add(total, t);
        let t = g.scale(kl, w.gamma);
        total = g.add(total, t);
        if let Some(r) = rec {
            let t = g.scale(r, w.lambda_r);
            total = g.add(total, t);
        }
        let lv = g.value(logits).clone();
        let outputs = TaskOutputs {
            recon: g.value(recon).clone(),
            poro: g.value(poro).column(0).to_vec(),
            litho_probs: softmax_rows(&lv),
        };
        Ok(HeadForward {
            recon: rec,
            poro: mae,
            litho: ce,
            consistency: kl,
            total,
            outputs,
        })
    }

    /// Plain multi-task loss with this head's prior.
    pub fn loss_of(&self, out: &TaskOutputs, batch: &LabeledBatch, w: &MultiTaskWeights) -> Result<(f64, LossComponents), FinetuneError> {
        multitask_loss(out, batch, &self.prior, w)
    }
}

pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    y
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FinetuneMetrics {
    pub step: usize,
    pub total: f64,
    pub recon: f64,
    pub poro: f64,
    pub litho: f64,
    pub consistency: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// One optimizer step of the heads (and the backbone unless frozen).
#[allow(clippy::too_many_arguments)]
pub fn finetune_step(
    backbone: &Backbone,
    heads: &TaskHeads,
    store: &mut ParamStore,
    opt: &mut Adam,
    seqs: &[TokenSequence],
    batch: &LabeledBatch,
    w: &MultiTaskWeights,
    freeze_encoder: bool,
    step: usize,
    lr: f64,
) -> Result<FinetuneMetrics, FinetuneError> {
    let (metrics, grads) = {
        let mut g = Graph::new(store);
        g.freeze_prefix("tokenizer.");
        if freeze_encoder {
            g.freeze_prefix("backbone.");
        }
        let masks = vec![Vec::new(); seqs.len()];
        let hidden = backbone.forward(&mut g, seqs, &masks)?;
        let f = heads.objective(&mut g, hidden, batch, w)?;
        let total = g.scalar(f.total);
        if !total.is_finite() {
            return Err(FinetuneError::NonFiniteLoss(step));
        }
        let m = FinetuneMetrics {
            step,
            total,
            recon: f.recon.map(|r| g.scalar(r)).unwrap_or(0.0),
            poro: g.scalar(f.poro),
            litho: g.scalar(f.litho),
            consistency: g.scalar(f.consistency),
            lr,
            grad_norm: 0.0,
        };
        (m, g.backward(f.total))
    };
    let rep = opt.step(store, grads, lr);
    Ok(FinetuneMetrics {
        grad_norm: rep.grad_norm,
        ..metrics
    })
}

/// Index of the token whose patch center is nearest to sample `i`; ties go
/// to the lower token.
pub fn nearest_token(i: usize, n_tokens: usize, patch_len: usize, stride: usize) -> usize {
    let center = |j: usize| j as f64 * stride as f64 + (patch_len as f64 - 1.0) / 2.0;
    let approx = ((i as f64 - (patch_len as f64 - 1.0) / 2.0) / stride as f64).floor().max(0.0) as usize;
    let lo = approx.min(n_tokens - 1);
    let hi = (approx + 1).min(n_tokens - 1);
    if (center(hi) - i as f64).abs() < (center(lo) - i as f64).abs() {
        hi
    } else {
        lo
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::normal_init;
    use crate::pretrain::PretrainConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn prior() -> GaussianPrior {
        GaussianPrior {
            means: vec![0.08, 0.24, 0.12],
            stds: vec![0.03, 0.04, 0.04],
        }
    }

    #[test]
    fn recon_examples() {
        let x = Array2::from_elem((2, 3), 1.0);
        assert_eq!(recon_loss(&x, &x, &[(0, 0), (1, 2)]).unwrap(), 0.0);
        let mut y = x.clone();
        y[[1, 1]] = 3.0;
        assert_eq!(recon_loss(&y, &x, &[(1, 1)]).unwrap(), 4.0);
        y[[0, 0]] = 100.0;
        assert_eq!(recon_loss(&y, &x, &[(1, 1)]).unwrap(), 4.0);
        assert_eq!(recon_loss(&y, &x, &[]), Err(FinetuneError::EmptyMask));
    }

    #[test]
    fn poro_examples() {
        assert_eq!(poro_loss(&[0.1, 0.2], &[0.1, 0.2]).unwrap(), 0.0);
        assert!((poro_loss(&[0.2, 0.3, 0.4], &[0.1, 0.2, 0.3]).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(poro_loss(&[0.0; 5], &[0.0; 4]), Err(FinetuneError::LengthMismatch(5, 4)));
    }

    #[test]
    fn litho_examples() {
        let y = Array2::from_shape_vec((2, 3), vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(litho_loss(&y, &y).unwrap(), 0.0);
        let u = Array2::from_elem((2, 3), 1.0 / 3.0);
        assert!((litho_loss(&u, &y).unwrap() - 3f64.ln()).abs() < 1e-12);
        let bad = Array2::from_shape_vec((1, 2), vec![0.3, 0.4]).unwrap();
        assert!(matches!(
            litho_loss(&bad, &Array2::zeros((1, 2))),
            Err(FinetuneError::NotADistribution { row: 0, .. })
        ));
    }

    #[test]
    fn kl_examples() {
        assert!((smoothed_kl(&[1.0, 0.0], &[0.5, 0.5], CONSISTENCY_EPS) - 2f64.ln()).abs() < 1e-6);
        let p = prior();
        let y = [0.05, 0.2, 0.3];
        let q = Array2::from_shape_fn((3, 3), |(t, k)| porosity_distribution(y[t], &p)[k]);
        assert!(consistency_loss(&y, &q, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn nearest_token_assignment() {
        // L=4, s=2: centers at 1.5, 3.5, 5.5.
        let got: Vec<usize> = (0..8).map(|i| nearest_token(i, 3, 4, 2)).collect();
        assert_eq!(got, vec![0, 0, 0, 1, 1, 2, 2, 2]);
        for i in 0..200 {
            let j = nearest_token(i, 10, 16, 8);
            let brute = (0..10)
                .min_by(|&a, &b| {
                    let da = (a as f64 * 8.0 + 7.5 - i as f64).abs();
                    let db = (b as f64 * 8.0 + 7.5 - i as f64).abs();
                    da.total_cmp(&db).then(a.cmp(&b))
                })
                .unwrap();
            assert_eq!(j, brute, "sample {i}");
        }
    }

    fn setup() -> (Backbone, TaskHeads, ParamStore, Vec<TokenSequence>, LabeledBatch) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cfg = PretrainConfig {
            layers: 1,
            heads: 2,
            d_model: 8,
            ffn_dim: 8,
            proj_dim: 4,
            depth_pos_dim: 4,
            ..Default::default()
        };
        let bb = Backbone::new(cfg, 10, 4, false, &mut store, &mut rng).unwrap();
        let heads = TaskHeads::new(&mut store, 8, 3, 6, prior(), &mut rng).unwrap();
        let seqs: Vec<TokenSequence> = (0..2)
            .map(|b| TokenSequence {
                well_id: format!("w{b}"),
                start: 0,
                token_indices: (0..4).map(|_| rng.gen_range(0..10)).collect(),
                rel_depths: (0..4).map(|i| i as f64 / 4.0).collect(),
                latents: None,
                targets: None,
            })
            .collect();
        let n = 12;
        let batch = LabeledBatch {
            position_rows: (0..n).map(|i| i * 8 / n).collect(),
            poro: (0..n).map(|_| rng.gen_range(0.05..0.3)).collect(),
            litho: (0..n).map(|i| i % 3).collect(),
            recon_target: normal_init(&mut rng, 8, 6, 1.0),
            recon_mask: vec![(0, 1), (3, 4), (7, 5)],
        };
        (bb, heads, store, seqs, batch)
    }

    #[test]
    fn graph_objective_matches_plain_components() {
        let (bb, heads, store, seqs, batch) = setup();
        let w = MultiTaskWeights {
            lambda_r: 1.0,
            lambda_p: 2.0,
            lambda_l: 3.0,
            gamma: 0.5,
        };
        let mut g = Graph::new(&store);
        let hidden = bb.forward(&mut g, &seqs, &[vec![], vec![]]).unwrap();
        let f = heads.objective(&mut g, hidden, &batch, &w).unwrap();
        let (plain, c) = heads.loss_of(&f.outputs, &batch, &w).unwrap();
        assert!((g.scalar(f.total) - plain).abs() < 1e-12);
        let sum = c.recon.unwrap() + 2.0 * c.poro + 3.0 * c.litho + 0.5 * c.consistency;
        assert!((plain - sum).abs() < 1e-12);
        assert!((g.scalar(f.poro) - c.poro).abs() < 1e-12);
        assert!((g.scalar(f.consistency) - c.consistency).abs() < 1e-12);

        let zero = MultiTaskWeights {
            lambda_r: 0.0,
            lambda_p: 0.0,
            lambda_l: 0.0,
            gamma: 0.0,
        };
        assert_eq!(heads.loss_of(&f.outputs, &batch, &zero).unwrap().0, 0.0);
        let only_r = MultiTaskWeights {
            lambda_r: 1.0,
            ..zero
        };
        assert_eq!(heads.loss_of(&f.outputs, &batch, &only_r).unwrap().0, c.recon.unwrap());
    }

    #[test]
    fn frozen_step_keeps_backbone_bits() {
        let (bb, heads, mut store, seqs, batch) = setup();
        let before = store.checksum("backbone.");
        let heads_before = store.checksum("heads.");
        let mut opt = Adam::new(Default::default(), &store);
        let w = MultiTaskWeights::default();
        let first = finetune_step(&bb, &heads, &mut store, &mut opt, &seqs, &batch, &w, true, 0, 1e-2).unwrap();
        let mut last = first;
        for s in 1..100 {
            last = finetune_step(&bb, &heads, &mut store, &mut opt, &seqs, &batch, &w, true, s, 1e-2).unwrap();
        }
        assert_eq!(store.checksum("backbone."), before);
        assert_ne!(store.checksum("heads."), heads_before);
        assert!(first.grad_norm > 0.0);
        assert!(last.total < first.total);
    }

    #[test]
    fn gamma_zero_consistency_has_no_gradient_effect() {
        let (bb, heads, store, seqs, batch) = setup();
        let w = MultiTaskWeights {
            gamma: 0.0,
            ..Default::default()
        };
        let grads = |prior: GaussianPrior| {
            let h = TaskHeads { prior, ..heads.clone() };
            let mut g = Graph::new(&store);
            g.freeze_prefix("backbone.");
            let hidden = bb.forward(&mut g, &seqs, &[vec![], vec![]]).unwrap();
            let f = h.objective(&mut g, hidden, &batch, &w).unwrap();
            let gr = g.backward(f.total);
            gr.get(heads.litho.w).unwrap().clone()
        };
        let other = GaussianPrior {
            means: vec![0.5, 0.1, 0.9],
            stds: vec![0.2, 0.01, 0.3],
        };
        assert_eq!(grads(prior()), grads(other));
    }
}
