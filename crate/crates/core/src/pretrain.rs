//! Transformer backbone over token sequences, block masking, masked-token
//! modeling, cross-well positive pairs and the contrastive term.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Patch;
use crate::graph::{log_sum_exp, ContrastSet, Graph, Var};
use crate::nn::{normal_init, position_encoding, sinusoidal, Adam, LayerNorm, Linear, ParamId, ParamStore};

#[derive(Debug, Error, PartialEq)]
pub enum PretrainError {
    #[error("mask is empty")]
    EmptyMask,
    #[error("zero-length embedding vector")]
    ZeroVector,
    #[error("non-finite loss at step {step}: mtm={mtm}, scl={scl}")]
    NonFiniteLoss { step: usize, mtm: f64, scl: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid pretraining config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    DepthOnly,
    DepthSimilarity,
    Anchored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    /// Dimension of the contrastive projection head output.
    pub proj_dim: usize,
    pub depth_pos_dim: usize,
    /// Tokens per training sequence.
    pub seq_len: usize,
    pub mask_ratio: f64,
    pub block_length: usize,
    pub temperature: f64,
    pub tau_sim: f64,
    pub depth_tolerance: f64,
    pub alpha: f64,
    pub smoothing_window: usize,
    pub pair_mode: PairMode,
    /// Neighborhood (in windows) around a shared layer top for anchored pairs.
    pub anchor_radius: usize,
    /// Same-well windows closer than this are never used as negatives.
    pub negative_exclusion: usize,
    pub max_pairs_per_batch: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub modality_dropout: f64,
    /// Steps between intermediate checkpoints; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            layers: 4,
            heads: 4,
            d_model: 128,
            ffn_dim: 256,
            proj_dim: 64,
            depth_pos_dim: 16,
            seq_len: 16,
            mask_ratio: 0.3,
            block_length: 5,
            temperature: 0.07,
            tau_sim: 0.8,
            depth_tolerance: 0.02,
            alpha: 0.1,
            smoothing_window: 11,
            pair_mode: PairMode::DepthSimilarity,
            anchor_radius: 2,
            negative_exclusion: 2,
            max_pairs_per_batch: 64,
            steps: 2000,
            batch_size: 16,
            modality_dropout: 0.15,
            checkpoint_every: 500,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), PretrainError> {
        let bad = |m: &str| Err(PretrainError::InvalidConfig(m.to_string()));
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("d_model must be a positive multiple of heads");
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return bad("mask_ratio must lie in [0,1]");
        }
        if self.block_length == 0 {
            return bad("block_length must be at least 1");
        }
        if self.temperature <= 0.0 {
            return bad("temperature must be positive");
        }
        if self.alpha < 0.0 || self.depth_tolerance < 0.0 {
            return bad("alpha and depth_tolerance must be nonnegative");
        }
        if self.seq_len == 0 || self.batch_size == 0 {
            return bad("seq_len and batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.modality_dropout) {
            return bad("modality_dropout must lie in [0,1]");
        }
        Ok(())
    }
}

/// A window of consecutive tokens from one well.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub well_id: String,
    /// Index of the first token within its well's full token stream.
    pub start: usize,
    pub token_indices: Vec<usize>,
    pub rel_depths: Vec<f64>,
    /// Continuous encoder outputs (T×d), used by the continuous-input arm.
    pub latents: Option<Array2<f64>>,
    /// Clean reconstruction targets when the inputs above come from a
    /// modality-dropout view; `None` means the inputs are their own targets.
    pub targets: Option<SequenceTargets>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceTargets {
    pub token_indices: Vec<usize>,
    pub latents: Option<Array2<f64>>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.token_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_indices.is_empty()
    }

    pub fn target_indices(&self) -> &[usize] {
        self.targets.as_ref().map_or(&self.token_indices, |t| &t.token_indices)
    }

    pub fn target_latents(&self) -> Option<&Array2<f64>> {
        match &self.targets {
            Some(t) => t.latents.as_ref(),
            None => self.latents.as_ref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    /// Sorted masked positions.
    pub positions: Vec<usize>,
    pub block_length: usize,
    pub ratio: f64,
}

/// Samples non-overlapping contiguous blocks until `floor(r·T)` positions
/// are masked. Blocks are truncated to the remaining budget, and shrink
/// when no free run of the requested length is left.
pub fn make_block_mask(t: usize, r: f64, block_length: usize, rng: &mut impl Rng) -> MaskPlan {
    assert!((0.0..=1.0).contains(&r) && block_length >= 1);
    let target = ((r * t as f64) + 1e-9).floor() as usize;
    let target = target.min(t);
    let mut masked = vec![false; t];
    let mut count = 0;
    while count < target {
        let mut len = block_length.min(target - count);
        loop {
            let starts: Vec<usize> = (0..=t - len).filter(|&s| masked[s..s + len].iter().all(|m| !m)).collect();
            if let Some(&s) = starts.choose(rng) {
                masked[s..s + len].iter_mut().for_each(|m| *m = true);
                count += len;
                break;
            }
            len -= 1;
        }
    }
    MaskPlan {
        positions: (0..t).filter(|&i| masked[i]).collect(),
        block_length,
        ratio: r,
    }
}

/// Mean cross-entropy of `logits` rows against `targets`.
pub fn mtm_loss(logits: &Array2<f64>, targets: &[usize]) -> Result<f64, PretrainError> {
    if targets.is_empty() {
        return Err(PretrainError::EmptyMask);
    }
    if logits.nrows() != targets.len() {
        return Err(PretrainError::ShapeMismatch(format!(
            "{} logit rows for {} targets",
            logits.nrows(),
            targets.len()
        )));
    }
    let total: f64 = logits
        .rows()
        .into_iter()
        .zip(targets)
        .map(|(row, &y)| log_sum_exp(row.as_slice().expect("contiguous")) - row[y])
        .sum();
    Ok(total / targets.len() as f64)
}

/// MTM loss reading full-sequence logits only at the plan's positions.
pub fn mtm_loss_at(logits: &Array2<f64>, targets: &[usize], plan: &MaskPlan) -> Result<f64, PretrainError> {
    let sub = logits.select(ndarray::Axis(0), &plan.positions);
    let t: Vec<usize> = plan.positions.iter().map(|&r| targets[r]).collect();
    mtm_loss(&sub, &t)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, PretrainError> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(PretrainError::ZeroVector);
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// InfoNCE for one anchor: `−log(exp(s⁺/τ) / (exp(s⁺/τ) + Σ exp(s⁻/τ)))`
/// with cosine similarities.
pub fn scl_loss(anchor: &[f64], positive: &[f64], negatives: &[Vec<f64>], temperature: f64) -> Result<f64, PretrainError> {
    if temperature <= 0.0 {
        return Err(PretrainError::InvalidConfig("temperature must be positive".into()));
    }
    let mut logits = vec![cosine(anchor, positive)? / temperature];
    for n in negatives {
        logits.push(cosine(anchor, n)? / temperature);
    }
    Ok(log_sum_exp(&logits) - logits[0])
}

/// Marks every channel missing independently with probability `prob` and
/// zeroes its values. One uniform draw is consumed per channel.
pub fn modality_dropout(p: &Patch, prob: f64, rng: &mut impl Rng) -> Patch {
    assert!((0.0..=1.0).contains(&prob));
    let mut out = p.clone();
    for c in 0..out.channels() {
        let u: f64 = rng.gen();
        if u < prob {
            out.missing_mask[c] = true;
            out.values.row_mut(c).fill(0.0);
        }
    }
    out
}

/// Centered moving average; the window is truncated at the ends.
pub fn moving_average(x: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    let mut prefix = vec![0.0; x.len() + 1];
    for (i, v) in x.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
    }
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(x.len());
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// Pearson correlation; 0 when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    if a.is_empty() {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Per-well window metadata used to build positive pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct WellWindows {
    pub well_id: String,
    pub rel_depths: Vec<f64>,
    /// Per window, per channel: low-pass filtered values (None if missing).
    pub signals: Vec<Vec<Option<Vec<f64>>>>,
    /// (window index nearest the top, layer id)
    pub tops: Vec<(usize, u32)>,
}

impl WellWindows {
    pub fn from_patches(well_id: &str, patches: &[Patch], tops: &[(f64, u32)], centers: &[f64], window: usize) -> Self {
        let signals = patches
            .iter()
            .map(|p| {
                (0..p.channels())
                    .map(|c| {
                        (!p.missing_mask[c])
                            .then(|| moving_average(p.values.row(c).as_slice().expect("row"), window))
                    })
                    .collect()
            })
            .collect();
        let tops = tops
            .iter()
            .filter_map(|&(depth, id)| {
                let (i, _) = centers
                    .iter()
                    .enumerate()
                    .min_by(|a, b| (a.1 - depth).abs().total_cmp(&(b.1 - depth).abs()))?;
                Some((i, id))
            })
            .collect();
        WellWindows {
            well_id: well_id.to_string(),
            rel_depths: patches.iter().map(|p| p.rel_depth).collect(),
            signals,
            tops,
        }
    }

    pub fn len(&self) -> usize {
        self.rel_depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rel_depths.is_empty()
    }
}

/// Pearson r of two windows over the channels present in both,
/// concatenated; 0 when no channel is shared.
pub fn window_similarity(a: &[Option<Vec<f64>>], b: &[Option<Vec<f64>>]) -> f64 {
    let mut xa = Vec::new();
    let mut xb = Vec::new();
    for (ca, cb) in a.iter().zip(b) {
        if let (Some(u), Some(v)) = (ca, cb) {
            xa.extend_from_slice(u);
            xb.extend_from_slice(v);
        }
    }
    pearson(&xa, &xb)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WindowRef {
    /// Index into the well list the pair was built from.
    pub well: usize,
    pub position: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositivePair {
    pub anchor: WindowRef,
    pub positive: WindowRef,
    pub similarity: f64,
    pub mode: PairMode,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairParams {
    pub mode: PairMode,
    pub depth_tolerance: f64,
    pub tau_sim: f64,
    pub anchor_radius: usize,
}

/// Whether a candidate pair satisfies the predicate of `params.mode`.
pub fn pair_predicate(wells: &[WellWindows], a: WindowRef, b: WindowRef, params: &PairParams) -> bool {
    if a.well == b.well {
        return false;
    }
    let (wa, wb) = (&wells[a.well], &wells[b.well]);
    match params.mode {
        PairMode::DepthOnly => (wa.rel_depths[a.position] - wb.rel_depths[b.position]).abs() <= params.depth_tolerance,
        PairMode::DepthSimilarity => {
            (wa.rel_depths[a.position] - wb.rel_depths[b.position]).abs() <= params.depth_tolerance
                && window_similarity(&wa.signals[a.position], &wb.signals[b.position]) > params.tau_sim
        }
        PairMode::Anchored => {
            let r = params.anchor_radius as i64;
            wa.tops.iter().any(|&(ia, id)| {
                let off = a.position as i64 - ia as i64;
                off.abs() <= r
                    && wb
                        .tops
                        .iter()
                        .any(|&(ib, idb)| idb == id && b.position as i64 - ib as i64 == off)
            })
        }
    }
}

/// Cross-well positives between every ordered well pair `a < b`.
///
/// Depth modes keep, per anchor window and partner well, the single best
/// admissible match (nearest relative depth, or highest similarity in the
/// similarity mode; ties to the lower index). Anchored mode pairs windows
/// at equal offsets from a layer top shared by id.
pub fn build_positive_pairs(wells: &[WellWindows], params: &PairParams) -> Vec<PositivePair> {
    let mut out = Vec::new();
    for a in 0..wells.len() {
        for b in a + 1..wells.len() {
            match params.mode {
                PairMode::Anchored => anchored_pairs(wells, a, b, params, &mut out),
                _ => depth_pairs(wells, a, b, params, &mut out),
            }
        }
    }
    out
}

fn depth_pairs(wells: &[WellWindows], a: usize, b: usize, params: &PairParams, out: &mut Vec<PositivePair>) {
    let (wa, wb) = (&wells[a], &wells[b]);
    for i in 0..wa.len() {
        let rd = wa.rel_depths[i];
        let mut best: Option<(usize, f64, f64)> = None;
        for j in 0..wb.len() {
            let dd = (rd - wb.rel_depths[j]).abs();
            if dd > params.depth_tolerance {
                continue;
            }
            let sim = window_similarity(&wa.signals[i], &wb.signals[j]);
            let better = match (params.mode, best) {
                (_, None) => true,
                (PairMode::DepthSimilarity, Some((_, _, s))) => sim > s,
                (_, Some((_, d, _))) => dd < d,
            };
            if params.mode == PairMode::DepthSimilarity && sim <= params.tau_sim {
                continue;
            }
            if better {
                best = Some((j, dd, sim));
            }
        }
        if let Some((j, _, sim)) = best {
            out.push(PositivePair {
                anchor: WindowRef { well: a, position: i },
                positive: WindowRef { well: b, position: j },
                similarity: sim,
                mode: params.mode,
            });
        }
    }
}

fn anchored_pairs(wells: &[WellWindows], a: usize, b: usize, params: &PairParams, out: &mut Vec<PositivePair>) {
    let (wa, wb) = (&wells[a], &wells[b]);
    let r = params.anchor_radius as i64;
    let mut seen = std::collections::BTreeSet::new();
    for &(ia, id) in &wa.tops {
        for &(ib, _) in wb.tops.iter().filter(|t| t.1 == id) {
            for off in -r..=r {
                let (pa, pb) = (ia as i64 + off, ib as i64 + off);
                if pa < 0 || pb < 0 || pa as usize >= wa.len() || pb as usize >= wb.len() {
                    continue;
                }
                if seen.insert((pa as usize, pb as usize)) {
                    out.push(PositivePair {
                        anchor: WindowRef { well: a, position: pa as usize },
                        positive: WindowRef { well: b, position: pb as usize },
                        similarity: window_similarity(&wa.signals[pa as usize], &wb.signals[pb as usize]),
                        mode: PairMode::Anchored,
                    });
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

/// Token-input or continuous-input embedding front end.
#[derive(Debug, Clone)]
pub enum InputEmbedding {
    /// (K+1)×d_model table; row K is the mask token.
    Tokens { table: ParamId, codebook_size: usize },
    /// Linear map of continuous latents plus a learned mask vector.
    Latents { proj: Linear, mask: ParamId },
}

/// Output head for masked positions.
#[derive(Debug, Clone)]
pub enum MaskedHead {
    /// Logits over K codes.
    Classify(Linear),
    /// Regression onto the continuous latent.
    Regress(Linear),
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: PretrainConfig,
    pub input: InputEmbedding,
    pub depth_proj: Linear,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub head: MaskedHead,
    pub proj1: Linear,
    pub proj2: Linear,
}

impl Backbone {
    /// Token-input backbone (`continuous = false`) or the continuous-input
    /// variant fed with encoder latents of width `latent_dim`.
    pub fn new(
        cfg: PretrainConfig,
        codebook_size: usize,
        latent_dim: usize,
        continuous: bool,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Result<Self, PretrainError> {
        cfg.validate()?;
        let dm = cfg.d_model;
        let input = if continuous {
            InputEmbedding::Latents {
                proj: Linear::new(store, "backbone.input_proj", latent_dim, dm, rng),
                mask: store.add("backbone.mask_vector", normal_init(rng, 1, dm, 1.0)),
            }
        } else {
            InputEmbedding::Tokens {
                table: store.add("backbone.token_embedding", normal_init(rng, codebook_size + 1, dm, 1.0)),
                codebook_size,
            }
        };
        let depth_proj = Linear::new(store, "backbone.depth_proj", cfg.depth_pos_dim, dm, rng);
        let blocks = (0..cfg.layers)
            .map(|i| {
                let n = format!("backbone.block{i}");
                Block {
                    ln1: LayerNorm::new(store, &format!("{n}.ln1"), dm),
                    q: Linear::new(store, &format!("{n}.q"), dm, dm, rng),
                    k: Linear::new(store, &format!("{n}.k"), dm, dm, rng),
                    v: Linear::new(store, &format!("{n}.v"), dm, dm, rng),
                    o: Linear::new(store, &format!("{n}.o"), dm, dm, rng),
                    ln2: LayerNorm::new(store, &format!("{n}.ln2"), dm),
                    ff1: Linear::new(store, &format!("{n}.ff1"), dm, cfg.ffn_dim, rng),
                    ff2: Linear::new(store, &format!("{n}.ff2"), cfg.ffn_dim, dm, rng),
                }
            })
            .collect();
        let ln_f = LayerNorm::new(store, "backbone.ln_f", dm);
        let head = if continuous {
            MaskedHead::Regress(Linear::new(store, "backbone.latent_head", dm, latent_dim, rng))
        } else {
            MaskedHead::Classify(Linear::new(store, "backbone.mtm_head", dm, codebook_size, rng))
        };
        let proj1 = Linear::new(store, "backbone.proj1", dm, dm, rng);
        let proj2 = Linear::new(store, "backbone.proj2", dm, cfg.proj_dim, rng);
        Ok(Backbone {
            cfg,
            input,
            depth_proj,
            blocks,
            ln_f,
            head,
            proj1,
            proj2,
        })
    }

    /// Rows `0..K` of the token table become a random linear image of the
    /// column-standardized codebook, so nearby codes start with nearby
    /// embeddings. The mask row is left as is.
    pub fn seed_token_embedding(&self, store: &mut ParamStore, codebook: &Array2<f64>, rng: &mut impl Rng) -> Result<(), PretrainError> {
        let InputEmbedding::Tokens { table, codebook_size } = &self.input else {
            return Ok(());
        };
        let (k, d) = codebook.dim();
        if k != *codebook_size || d == 0 {
            return Err(PretrainError::ShapeMismatch("codebook does not match the token table".into()));
        }
        let mut z = codebook.clone();
        for mut col in z.columns_mut() {
            let mean = col.mean().unwrap_or(0.0);
            let std = col.mapv(|v| (v - mean).powi(2)).mean().unwrap_or(0.0).sqrt();
            col.mapv_inplace(|v| if std > 1e-12 { (v - mean) / std } else { 0.0 });
        }
        let proj = normal_init(rng, d, self.cfg.d_model, 1.0 / (d as f64).sqrt());
        let rows = z.dot(&proj);
        store.get_mut(*table).slice_mut(ndarray::s![..k, ..]).assign(&rows);
        Ok(())
    }

    pub fn is_continuous(&self) -> bool {
        matches!(self.input, InputEmbedding::Latents { .. })
    }

    /// Hidden states, (B·T)×d_model with row `b·T + t`. `masks[b]` lists
    /// the masked positions of sequence `b`.
    pub fn forward(&self, g: &mut Graph, seqs: &[TokenSequence], masks: &[Vec<usize>]) -> Result<Var, PretrainError> {
        let t = seqs.first().map(|s| s.len()).ok_or(PretrainError::ShapeMismatch("empty batch".into()))?;
        if seqs.iter().any(|s| s.len() != t || s.rel_depths.len() != t) || masks.len() != seqs.len() {
            return Err(PretrainError::ShapeMismatch("ragged sequence batch".into()));
        }
        let n = seqs.len() * t;
        let dm = self.cfg.d_model;
        let masked_rows: Vec<usize> = masks
            .iter()
            .enumerate()
            .flat_map(|(b, m)| m.iter().map(move |&p| b * t + p))
            .collect();
        let mut x = match &self.input {
            InputEmbedding::Tokens { table, codebook_size } => {
                let mut ids: Vec<usize> = seqs.iter().flat_map(|s| s.token_indices.iter().copied()).collect();
                if ids.iter().any(|&i| i >= *codebook_size) {
                    return Err(PretrainError::ShapeMismatch("token index out of range".into()));
                }
                for &r in &masked_rows {
                    ids[r] = *codebook_size;
                }
                let tab = g.param(*table);
                g.gather_rows(tab, &ids)
            }
            InputEmbedding::Latents { proj, mask } => {
                let d = proj_in_dim(g, proj);
                let mut z = Array2::zeros((n, d));
                for (b, s) in seqs.iter().enumerate() {
                    let lat = s
                        .latents
                        .as_ref()
                        .ok_or(PretrainError::ShapeMismatch("missing latents".into()))?;
                    if lat.dim() != (t, d) {
                        return Err(PretrainError::ShapeMismatch("latent shape".into()));
                    }
                    z.slice_mut(ndarray::s![b * t..(b + 1) * t, ..]).assign(lat);
                }
                let zc = g.constant(z);
                let e = proj.forward(g, zc);
                if masked_rows.is_empty() {
                    e
                } else {
                    let m = g.param(*mask);
                    g.replace_rows(e, &masked_rows, m)
                }
            }
        };
        let mut depth = Array2::zeros((n, self.cfg.depth_pos_dim));
        let mut pos = Array2::zeros((n, dm));
        for (b, s) in seqs.iter().enumerate() {
            for i in 0..t {
                for (j, v) in sinusoidal(s.rel_depths[i], self.cfg.depth_pos_dim).into_iter().enumerate() {
                    depth[[b * t + i, j]] = v;
                }
                for (j, v) in position_encoding(i, dm).into_iter().enumerate() {
                    pos[[b * t + i, j]] = v;
                }
            }
        }
        // Token identity should dominate the positional terms.
        x = g.scale(x, (dm as f64).sqrt());
        let depth = g.constant(depth);
        let depth = self.depth_proj.forward(g, depth);
        let pos = g.constant(pos);
        x = g.add(x, depth);
        x = g.add(x, pos);
        for blk in &self.blocks {
            let h = blk.ln1.forward(g, x);
            let q = blk.q.forward(g, h);
            let k = blk.k.forward(g, h);
            let v = blk.v.forward(g, h);
            let a = g.attention(q, k, v, t, self.cfg.heads);
            let a = blk.o.forward(g, a);
            x = g.add(x, a);
            let h = blk.ln2.forward(g, x);
            let f = blk.ff1.forward(g, h);
            let f = g.gelu(f);
            let f = blk.ff2.forward(g, f);
            x = g.add(x, f);
        }
        Ok(self.ln_f.forward(g, x))
    }

    /// L2-normalized contrastive embeddings of hidden rows.
    pub fn project(&self, g: &mut Graph, hidden: Var) -> Var {
        let p = self.proj1.forward(g, hidden);
        let p = g.gelu(p);
        let p = self.proj2.forward(g, p);
        g.l2_normalize_rows(p)
    }

    /// Combined objective `MTM + α·SCL` on a batch.
    pub fn objective(&self, g: &mut Graph, batch: &PretrainBatch, alpha: f64) -> Result<PretrainOutputs, PretrainError> {
        let hidden = self.forward(g, &batch.seqs, &batch.masks)?;
        let t = batch.seqs[0].len();
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        let mut latent_targets = Vec::new();
        for (b, m) in batch.masks.iter().enumerate() {
            for &p in m {
                rows.push(b * t + p);
                targets.push(batch.seqs[b].target_indices()[p]);
                if let Some(l) = batch.seqs[b].target_latents() {
                    latent_targets.push(l.row(p).to_owned());
                }
            }
        }
        let (mtm, mask_acc) = if rows.is_empty() {
            (g.constant(Array2::zeros((1, 1))), 0.0)
        } else {
            let h = g.gather_rows(hidden, &rows);
            match &self.head {
                MaskedHead::Classify(lin) => {
                    let logits = lin.forward(g, h);
                    let lv = g.value(logits);
                    let correct = lv
                        .rows()
                        .into_iter()
                        .zip(&targets)
                        .filter(|(r, &y)| argmax(r.as_slice().expect("row")) == y)
                        .count();
                    let acc = correct as f64 / targets.len() as f64;
                    (g.cross_entropy(logits, &targets), acc)
                }
                MaskedHead::Regress(lin) => {
                    let pred = lin.forward(g, h);
                    if latent_targets.len() != rows.len() {
                        return Err(PretrainError::ShapeMismatch("missing latents".into()));
                    }
                    let views: Vec<_> = latent_targets.iter().map(|r| r.view()).collect();
                    let tgt = ndarray::stack(ndarray::Axis(0), &views).expect("stack");
                    let w = Array2::ones(tgt.dim());
                    (g.masked_mse(pred, tgt, w), f64::NAN)
                }
            }
        };
        let pairs = batch.contrast.pairs.len();
        let scl = if pairs == 0 || alpha == 0.0 {
            g.constant(Array2::zeros((1, 1)))
        } else {
            let e = self.project(g, hidden);
            g.info_nce(e, batch.contrast.clone(), self.cfg.temperature)
        };
        let weighted = g.scale(scl, alpha);
        let total = g.add(mtm, weighted);
        Ok(PretrainOutputs {
            hidden,
            mtm,
            scl,
            total,
            mask_acc,
            masked: rows.len(),
            pairs,
        })
    }
}

fn proj_in_dim(g: &mut Graph, lin: &Linear) -> usize {
    let w = g.param(lin.w);
    g.value(w).nrows()
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

pub struct PretrainOutputs {
    pub hidden: Var,
    pub mtm: Var,
    pub scl: Var,
    pub total: Var,
    /// Top-1 accuracy on masked positions (NaN for the regression head).
    pub mask_acc: f64,
    pub masked: usize,
    pub pairs: usize,
}

#[derive(Debug, Clone)]
pub struct PretrainBatch {
    pub seqs: Vec<TokenSequence>,
    pub masks: Vec<Vec<usize>>,
    /// Pairs and negatives over rows `b·T + t`.
    pub contrast: ContrastSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PretrainMetrics {
    pub step: usize,
    pub mtm: f64,
    pub scl: f64,
    pub total: f64,
    pub mask_acc: f64,
    pub pairs_in_batch: usize,
    pub lr: f64,
    pub grad_norm: f64,
}

/// One optimizer step on `L_MTM + α·L_SCL`.
pub fn pretrain_step(
    backbone: &Backbone,
    store: &mut ParamStore,
    opt: &mut Adam,
    batch: &PretrainBatch,
    alpha: f64,
    step: usize,
    lr: f64,
) -> Result<PretrainMetrics, PretrainError> {
    let (metrics, grads) = {
        let mut g = Graph::new(store);
        g.freeze_prefix("tokenizer.");
        let out = backbone.objective(&mut g, batch, alpha)?;
        let (mtm, scl, total) = (g.scalar(out.mtm), g.scalar(out.scl), g.scalar(out.total));
        if !total.is_finite() {
            return Err(PretrainError::NonFiniteLoss { step, mtm, scl });
        }
        let grads = g.backward(out.total);
        (
            PretrainMetrics {
                step,
                mtm,
                scl,
                total,
                mask_acc: out.mask_acc,
                pairs_in_batch: out.pairs,
                lr,
                grad_norm: 0.0,
            },
            grads,
        )
    };
    let report = opt.step(store, grads, lr);
    Ok(PretrainMetrics {
        grad_norm: report.grad_norm,
        ..metrics
    })
}

/// Full token stream of one well.
#[derive(Debug, Clone, PartialEq)]
pub struct WellTokens {
    pub well_id: String,
    pub indices: Vec<usize>,
    pub rel_depths: Vec<f64>,
    /// n×d encoder latents.
    pub latents: Array2<f64>,
    pub scores: Vec<f64>,
    /// Token streams of the same patches re-encoded after modality dropout.
    pub views: Vec<TokenView>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenView {
    pub indices: Vec<usize>,
    pub latents: Array2<f64>,
}

impl WellTokens {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn sequence(&self, start: usize, len: usize) -> TokenSequence {
        TokenSequence {
            well_id: self.well_id.clone(),
            start,
            token_indices: self.indices[start..start + len].to_vec(),
            rel_depths: self.rel_depths[start..start + len].to_vec(),
            latents: Some(self.latents.slice(ndarray::s![start..start + len, ..]).to_owned()),
            targets: None,
        }
    }

    /// Like [`WellTokens::sequence`] but with inputs taken from dropout
    /// view `view` and the clean stream as targets.
    pub fn view_sequence(&self, view: usize, start: usize, len: usize) -> TokenSequence {
        let clean = self.sequence(start, len);
        let v = &self.views[view];
        TokenSequence {
            token_indices: v.indices[start..start + len].to_vec(),
            latents: Some(v.latents.slice(ndarray::s![start..start + len, ..]).to_owned()),
            targets: Some(SequenceTargets {
                token_indices: clean.token_indices.clone(),
                latents: clean.latents.clone(),
            }),
            ..clean
        }
    }
}

/// Draws pretraining batches: half of each batch is built around sampled
/// positive pairs (both sides' sequences), the rest from random windows
/// whose mean patch score exceeds the threshold.
pub struct PretrainSampler {
    pub wells: Vec<WellTokens>,
    pub pairs: Vec<PositivePair>,
    by_anchor: BTreeMap<(usize, usize), Vec<usize>>,
    eligible: Vec<(usize, usize)>,
    seq_len: usize,
}

impl PretrainSampler {
    pub fn new(wells: Vec<WellTokens>, pairs: Vec<PositivePair>, seq_len: usize, score_threshold: f64) -> Self {
        let pairs: Vec<PositivePair> = pairs
            .into_iter()
            .filter(|p| wells[p.anchor.well].len() >= seq_len && wells[p.positive.well].len() >= seq_len)
            .collect();
        let mut by_anchor: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (i, p) in pairs.iter().enumerate() {
            by_anchor.entry((p.anchor.well, p.anchor.position)).or_default().push(i);
        }
        let mut eligible = Vec::new();
        for (w, wt) in wells.iter().enumerate() {
            if wt.len() < seq_len {
                continue;
            }
            for s in 0..=wt.len() - seq_len {
                let m = wt.scores[s..s + seq_len].iter().sum::<f64>() / seq_len as f64;
                if m > score_threshold {
                    eligible.push((w, s));
                }
            }
        }
        PretrainSampler {
            wells,
            pairs,
            by_anchor,
            eligible,
            seq_len,
        }
    }

    pub fn has_data(&self) -> bool {
        !self.eligible.is_empty() || !self.pairs.is_empty()
    }

    fn start_containing(&self, well: usize, pos: usize, rng: &mut impl Rng) -> usize {
        let n = self.wells[well].len();
        let lo = pos.saturating_sub(self.seq_len - 1);
        let hi = pos.min(n - self.seq_len);
        rng.gen_range(lo..=hi)
    }

    pub fn sample(&self, cfg: &PretrainConfig, rng: &mut impl Rng) -> PretrainBatch {
        let t = self.seq_len;
        let mut picks: Vec<(usize, usize)> = Vec::with_capacity(cfg.batch_size);
        let from_pairs = if self.eligible.is_empty() { cfg.batch_size } else { cfg.batch_size / 2 };
        if !self.pairs.is_empty() {
            while picks.len() + 2 <= from_pairs {
                let p = self.pairs[rng.gen_range(0..self.pairs.len())];
                picks.push((p.anchor.well, self.start_containing(p.anchor.well, p.anchor.position, rng)));
                picks.push((p.positive.well, self.start_containing(p.positive.well, p.positive.position, rng)));
            }
        }
        while picks.len() < cfg.batch_size {
            if self.eligible.is_empty() {
                let p = self.pairs[rng.gen_range(0..self.pairs.len())];
                picks.push((p.anchor.well, self.start_containing(p.anchor.well, p.anchor.position, rng)));
            } else {
                picks.push(self.eligible[rng.gen_range(0..self.eligible.len())]);
            }
        }
        let seqs: Vec<TokenSequence> = picks
            .iter()
            .map(|&(w, s)| {
                let wt = &self.wells[w];
                // view 0 is the clean stream
                match rng.gen_range(0..=wt.views.len()) {
                    0 => wt.sequence(s, t),
                    v => wt.view_sequence(v - 1, s, t),
                }
            })
            .collect();
        let masks: Vec<Vec<usize>> = (0..seqs.len())
            .map(|_| make_block_mask(t, cfg.mask_ratio, cfg.block_length, rng).positions)
            .collect();
        let contrast = self.contrast_set(&picks, cfg, rng);
        PretrainBatch { seqs, masks, contrast }
    }

    /// Every stored pair whose two windows both fall inside sequences of the
    /// batch, in both directions, capped at `max_pairs_per_batch`.
    fn contrast_set(&self, picks: &[(usize, usize)], cfg: &PretrainConfig, rng: &mut impl Rng) -> ContrastSet {
        let t = self.seq_len;
        let mut rows_of: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (b, &(w, s)) in picks.iter().enumerate() {
            for i in 0..t {
                rows_of.entry((w, s + i)).or_default().push(b * t + i);
            }
        }
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        let mut keys: Vec<&(usize, usize)> = rows_of.keys().collect();
        keys.sort();
        for key in keys {
            let Some(ids) = self.by_anchor.get(key) else { continue };
            for &pi in ids {
                let p = self.pairs[pi];
                if let Some(pos_rows) = rows_of.get(&(p.positive.well, p.positive.position)) {
                    let a = rows_of[key][0];
                    let b = pos_rows[0];
                    pairs.push((a, b));
                    pairs.push((b, a));
                }
            }
        }
        if pairs.len() > cfg.max_pairs_per_batch {
            pairs.shuffle(rng);
            pairs.truncate(cfg.max_pairs_per_batch);
        }
        let row_info: Vec<(usize, usize, f64)> = picks
            .iter()
            .flat_map(|&(w, s)| (0..t).map(move |i| (w, s + i)))
            .map(|(w, p)| (w, p, self.wells[w].rel_depths[p]))
            .collect();
        let negatives = pairs
            .iter()
            .map(|&(a, p)| {
                let (wa, pa, ra) = row_info[a];
                let (wp, pp, _) = row_info[p];
                (0..row_info.len())
                    .filter(|&r| {
                        let (w, pos, rd) = row_info[r];
                        if w == wa {
                            pos.abs_diff(pa) > cfg.negative_exclusion
                        } else if w == wp {
                            pos.abs_diff(pp) > cfg.negative_exclusion
                        } else {
                            (rd - ra).abs() > cfg.depth_tolerance
                        }
                    })
                    .collect()
            })
            .collect();
        ContrastSet { pairs, negatives }
    }
}
