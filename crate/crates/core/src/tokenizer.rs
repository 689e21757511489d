//! Domain-aware patch encoder, vector quantization against an EMA-maintained
//! codebook, and the mirrored decoder.
//!
//! The encoder lifts every curve sample to a small feature vector, adds a
//! curve-type embedding per channel and a projected sinusoidal encoding of
//! the patch's relative depth, then runs residual depthwise-separable
//! convolutions before projecting the flattened feature map to `d`.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CurveKind, Patch};
use crate::graph::{Graph, Var};
use crate::nn::{normal_init, sinusoidal, uniform_init, Adam, Linear, ParamId, ParamStore};

pub const CODEBOOK_EPS: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum TokenizerError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("code index {index} out of range for codebook of size {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("dead codes present but no re-initialization candidates")]
    NoCandidates,
    #[error("invalid tokenizer config: {0}")]
    InvalidConfig(String),
}

fn shape(expected: impl ToString, got: impl ToString) -> TokenizerError {
    TokenizerError::ShapeMismatch {
        expected: expected.to_string(),
        got: got.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    /// Codebook size K.
    pub codebook_size: usize,
    /// Latent dimension d.
    pub latent_dim: usize,
    /// Commitment weight β.
    pub beta: f64,
    /// Patch length L in samples.
    pub patch_len: usize,
    /// Patch stride s in samples.
    pub stride: usize,
    pub ema_decay: f64,
    /// Steps without assignment after which a code is re-initialized.
    pub dead_threshold: u64,
    pub conv_layers: usize,
    pub kernel: usize,
    pub curve_emb_dim: usize,
    pub depth_pos_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub reinit_every: usize,
    /// Modality-dropout probability applied to encoder inputs.
    pub modality_dropout: f64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            codebook_size: 256,
            latent_dim: 64,
            beta: 0.25,
            patch_len: 64,
            stride: 32,
            ema_decay: 0.99,
            dead_threshold: 200,
            conv_layers: 3,
            kernel: 5,
            curve_emb_dim: 8,
            depth_pos_dim: 8,
            steps: 1000,
            batch_size: 64,
            reinit_every: 50,
            modality_dropout: 0.15,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<(), TokenizerError> {
        let bad = |m: &str| Err(TokenizerError::InvalidConfig(m.to_string()));
        if self.codebook_size < 2 {
            return bad("codebook_size must be at least 2");
        }
        if self.latent_dim == 0 || self.patch_len == 0 || self.stride == 0 {
            return bad("latent_dim, patch_len and stride must be positive");
        }
        if self.kernel % 2 == 0 {
            return bad("kernel must be odd");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0,1)");
        }
        if self.beta < 0.0 {
            return bad("beta must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.modality_dropout) {
            return bad("modality_dropout must lie in [0,1]");
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        CurveKind::ALL.len()
    }

    /// Width of the convolutional feature map (C · d_emb).
    pub fn feature_channels(&self) -> usize {
        self.channels() * self.curve_emb_dim
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SeparableConv {
    pub depthwise: ParamId,
    pub pointwise: ParamId,
    pub bias: ParamId,
}

impl SeparableConv {
    fn new(store: &mut ParamStore, name: &str, channels: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let dw_bound = (3.0 / kernel as f64).sqrt();
        let pw_bound = 0.5 * (3.0 / channels as f64).sqrt();
        SeparableConv {
            depthwise: store.add(format!("{name}.depthwise"), uniform_init(rng, channels, kernel, dw_bound)),
            pointwise: store.add(format!("{name}.pointwise"), uniform_init(rng, channels, channels, pw_bound)),
            bias: store.add(format!("{name}.bias"), Array2::zeros((channels, 1))),
        }
    }

    /// `h + gelu(W_pw · dw(h) + b)` over column segments of length `seg`.
    fn forward(&self, g: &mut Graph, h: Var, seg: usize) -> Var {
        let dw = g.param(self.depthwise);
        let pw = g.param(self.pointwise);
        let b = g.param(self.bias);
        let u = g.depthwise_conv(h, dw, seg);
        let v = g.matmul(pw, u);
        let v = g.add_col(v, b);
        let a = g.gelu(v);
        g.add(h, a)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub lift_w: ParamId,
    pub lift_b: ParamId,
    pub curve_emb: ParamId,
    pub missing_token: ParamId,
    pub depth_proj: ParamId,
    pub convs: Vec<SeparableConv>,
    pub proj: Linear,
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub expand: Linear,
    pub convs: Vec<SeparableConv>,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

/// K×d code vectors with EMA statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub vectors: Array2<f64>,
    pub ema_counts: Vec<f64>,
    pub ema_sums: Array2<f64>,
    pub decay: f64,
    pub dead_threshold: u64,
    pub steps_since_use: Vec<u64>,
    /// Total assignments per code since creation (diagnostic).
    pub usage: Vec<u64>,
}

impl Codebook {
    pub fn new(vectors: Array2<f64>, decay: f64, dead_threshold: u64) -> Self {
        let k = vectors.nrows();
        assert!(k >= 2, "codebook needs at least two codes");
        Codebook {
            ema_sums: vectors.clone(),
            vectors,
            ema_counts: vec![1.0; k],
            decay,
            dead_threshold,
            steps_since_use: vec![0; k],
            usage: vec![0; k],
        }
    }

    pub fn size(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Number of codes with any recorded assignment.
    pub fn used_codes(&self) -> usize {
        self.usage.iter().filter(|&&u| u > 0).count()
    }

    /// EMA step over one batch of assignments. Counts and sums of every
    /// code decay; only codes with assignments get a new vector.
    pub fn ema_update(&mut self, assignments: &[(usize, &[f64])]) -> Result<(), TokenizerError> {
        let (k, d) = self.vectors.dim();
        let mut n = vec![0.0; k];
        let mut sums = Array2::<f64>::zeros((k, d));
        for &(idx, z) in assignments {
            if idx >= k {
                return Err(TokenizerError::IndexOutOfRange { index: idx, size: k });
            }
            if z.len() != d {
                return Err(shape(d, z.len()));
            }
            n[idx] += 1.0;
            for (s, v) in sums.row_mut(idx).iter_mut().zip(z) {
                *s += v;
            }
        }
        let gamma = self.decay;
        for c in 0..k {
            self.ema_counts[c] = gamma * self.ema_counts[c] + (1.0 - gamma) * n[c];
            for j in 0..d {
                self.ema_sums[[c, j]] = gamma * self.ema_sums[[c, j]] + (1.0 - gamma) * sums[[c, j]];
            }
            if n[c] > 0.0 {
                let denom = self.ema_counts[c].max(CODEBOOK_EPS);
                for j in 0..d {
                    self.vectors[[c, j]] = self.ema_sums[[c, j]] / denom;
                }
                self.steps_since_use[c] = 0;
                self.usage[c] += n[c] as u64;
            } else {
                self.steps_since_use[c] += 1;
            }
        }
        Ok(())
    }

    pub fn dead_codes(&self) -> Vec<usize> {
        (0..self.size())
            .filter(|&c| self.steps_since_use[c] > self.dead_threshold)
            .collect()
    }

    /// Replaces every dead code with a latent drawn from the top decile
    /// (by reconstruction loss) of `candidates`. Returns the replaced codes.
    pub fn reinit_dead_codes(
        &mut self,
        candidates: &[(Vec<f64>, f64)],
        rng: &mut impl Rng,
    ) -> Result<Vec<usize>, TokenizerError> {
        let dead = self.dead_codes();
        if dead.is_empty() {
            return Ok(dead);
        }
        if candidates.is_empty() {
            return Err(TokenizerError::NoCandidates);
        }
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&a, &b| candidates[b].1.total_cmp(&candidates[a].1).then(a.cmp(&b)));
        let top = candidates.len().div_ceil(10).max(1);
        let pool = &order[..top];
        for &c in &dead {
            let pick = *pool.choose(rng).expect("nonempty pool");
            let z = &candidates[pick].0;
            if z.len() != self.dim() {
                return Err(shape(self.dim(), z.len()));
            }
            let row = Array1::from(z.clone());
            self.vectors.row_mut(c).assign(&row);
            self.ema_sums.row_mut(c).assign(&row);
            self.ema_counts[c] = 1.0;
            self.steps_since_use[c] = 0;
        }
        Ok(dead)
    }
}

/// Nearest code by Euclidean distance; ties go to the lowest index.
pub fn quantize(z_e: &[f64], cb: &Codebook) -> (usize, Vec<f64>) {
    assert_eq!(z_e.len(), cb.dim(), "latent dimension mismatch");
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, row) in cb.vectors.rows().into_iter().enumerate() {
        let d: f64 = row.iter().zip(z_e).map(|(e, z)| (z - e) * (z - e)).sum();
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    (best, cb.vectors.row(best).to_vec())
}

/// Per-sample VQ-VAE objective
/// `‖x − x̂‖² + ‖sg[z_e] − e_k‖² + β‖z_e − sg[e_k]‖²` (squared L2 norms).
pub fn vq_loss(x: &Array2<f64>, x_hat: &Array2<f64>, z_e: &[f64], e_k: &[f64], beta: f64) -> Result<f64, TokenizerError> {
    if x.dim() != x_hat.dim() {
        return Err(shape(format!("{:?}", x.dim()), format!("{:?}", x_hat.dim())));
    }
    if z_e.len() != e_k.len() {
        return Err(shape(z_e.len(), e_k.len()));
    }
    let recon: f64 = x.iter().zip(x_hat).map(|(a, b)| (a - b).powi(2)).sum();
    let dist: f64 = z_e.iter().zip(e_k).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(recon + dist + beta * dist)
}

/// How the quantized latent is formed in a differentiable forward pass.
#[derive(Debug, Clone)]
pub enum QuantizeMode {
    /// Nearest code, straight-through gradient.
    StraightThrough,
    /// `z_e + offset` with a constant offset and fixed code indices: the
    /// smooth surrogate whose exact gradient the straight-through
    /// estimator reproduces. Used for finite-difference verification.
    FrozenOffset { indices: Vec<usize>, offsets: Array2<f64> },
}

/// Graph handles and scalar terms of one VQ forward pass.
pub struct VqForward {
    pub z_e: Var,
    pub recon: Var,
    pub indices: Vec<usize>,
    pub quantized: Array2<f64>,
    /// Batch mean of ‖x − x̂‖² over present target entries.
    pub recon_term: Var,
    /// Batch mean of β‖z_e − sg[e_k]‖².
    pub commit_term: Var,
    /// Batch mean of ‖sg[z_e] − e_k‖²; the codebook follows EMA so this is
    /// reported, not differentiated.
    pub codebook_term: f64,
    pub total: Var,
    /// Per-sample reconstruction error, for dead-code candidates.
    pub per_sample_recon: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub cfg: TokenizerConfig,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    pub codebook: Codebook,
}

/// Stacks patches into the C×(B·L) layout plus per-(channel, patch)
/// presence flags.
pub fn stack_patches(patches: &[&Patch], channels: usize, len: usize) -> Result<(Array2<f64>, Vec<bool>), TokenizerError> {
    let b = patches.len();
    let mut x = Array2::zeros((channels, b * len));
    let mut present = vec![false; channels * b];
    for (i, p) in patches.iter().enumerate() {
        if p.values.dim() != (channels, len) {
            return Err(shape(format!("({channels}, {len})"), format!("{:?}", p.values.dim())));
        }
        for c in 0..channels {
            let here = !p.missing_mask[c];
            present[c * b + i] = here;
            if here {
                for t in 0..len {
                    x[[c, i * len + t]] = p.values[[c, t]];
                }
            }
        }
    }
    Ok((x, present))
}

impl Tokenizer {
    /// Registers parameters under `tokenizer.` and builds a placeholder
    /// codebook (re-seeded from data by [`Tokenizer::init_codebook`]).
    pub fn new(cfg: TokenizerConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self, TokenizerError> {
        cfg.validate()?;
        let c = cfg.channels();
        let e = cfg.curve_emb_dim;
        let dc = cfg.feature_channels();
        let l = cfg.patch_len;
        let encoder = EncoderParams {
            lift_w: store.add("tokenizer.encoder.lift_w", normal_init(rng, 1, e, 1.0)),
            lift_b: store.add("tokenizer.encoder.lift_b", Array2::zeros((1, e))),
            curve_emb: store.add("tokenizer.encoder.curve_emb", normal_init(rng, c, e, 0.5)),
            missing_token: store.add("tokenizer.encoder.missing_token", normal_init(rng, 1, e, 0.5)),
            depth_proj: store.add(
                "tokenizer.encoder.depth_proj",
                normal_init(rng, dc, cfg.depth_pos_dim, 0.3),
            ),
            convs: (0..cfg.conv_layers)
                .map(|i| SeparableConv::new(store, &format!("tokenizer.encoder.conv{i}"), dc, cfg.kernel, rng))
                .collect(),
            proj: Linear::new(store, "tokenizer.encoder.proj", dc * l, cfg.latent_dim, rng),
        };
        let decoder = DecoderParams {
            expand: Linear::new(store, "tokenizer.decoder.expand", cfg.latent_dim, dc * l, rng),
            convs: (0..cfg.conv_layers)
                .map(|i| SeparableConv::new(store, &format!("tokenizer.decoder.conv{i}"), dc, cfg.kernel, rng))
                .collect(),
            out_w: store.add(
                "tokenizer.decoder.out_w",
                uniform_init(rng, c, dc, (6.0 / (c + dc) as f64).sqrt()),
            ),
            out_b: store.add("tokenizer.decoder.out_b", Array2::zeros((c, 1))),
        };
        let codebook = Codebook::new(
            normal_init(rng, cfg.codebook_size, cfg.latent_dim, 1.0),
            cfg.ema_decay,
            cfg.dead_threshold,
        );
        Ok(Tokenizer {
            cfg,
            encoder,
            decoder,
            codebook,
        })
    }

    /// Differentiable encoder: returns B×d latents.
    pub fn encode_graph(&self, g: &mut Graph, patches: &[&Patch]) -> Result<Var, TokenizerError> {
        let c = self.cfg.channels();
        let l = self.cfg.patch_len;
        let b = patches.len();
        let (x, present) = stack_patches(patches, c, l)?;
        let enc = &self.encoder;
        let w = g.param(enc.lift_w);
        let bias = g.param(enc.lift_b);
        let emb = g.param(enc.curve_emb);
        let miss = g.param(enc.missing_token);
        let mut h = g.channel_lift(x, present, l, w, bias, emb, miss);

        let mut pos = Array2::zeros((self.cfg.depth_pos_dim, b));
        for (i, p) in patches.iter().enumerate() {
            for (j, v) in sinusoidal(p.rel_depth, self.cfg.depth_pos_dim).into_iter().enumerate() {
                pos[[j, i]] = v;
            }
        }
        let pos = g.constant(pos);
        let proj = g.param(enc.depth_proj);
        let depth = g.matmul(proj, pos);
        let depth = g.repeat_cols(depth, l);
        h = g.add(h, depth);
        for conv in &enc.convs {
            h = conv.forward(g, h, l);
        }
        let flat = g.fold_segments(h, l);
        Ok(enc.proj.forward(g, flat))
    }

    /// Differentiable decoder: B×d latents to C×(B·L) reconstructions.
    pub fn decode_graph(&self, g: &mut Graph, z: Var) -> Var {
        let l = self.cfg.patch_len;
        let dec = &self.decoder;
        let flat = dec.expand.forward(g, z);
        let mut h = g.unfold_segments(flat, l);
        for conv in &dec.convs {
            h = conv.forward(g, h, l);
        }
        let w = g.param(dec.out_w);
        let b = g.param(dec.out_b);
        let y = g.matmul(w, h);
        g.add_col(y, b)
    }

    /// Full VQ forward: encode `inputs`, quantize, decode, and score the
    /// reconstruction against `targets` on their present channels.
    pub fn vq_forward(
        &self,
        g: &mut Graph,
        inputs: &[&Patch],
        targets: &[&Patch],
        mode: &QuantizeMode,
    ) -> Result<VqForward, TokenizerError> {
        if inputs.len() != targets.len() || inputs.is_empty() {
            return Err(shape(inputs.len(), targets.len()));
        }
        let b = inputs.len();
        let d = self.cfg.latent_dim;
        let z_e = self.encode_graph(g, inputs)?;
        let ze_val = g.value(z_e).clone();
        let (indices, quantized, zq) = match mode {
            QuantizeMode::StraightThrough => {
                let mut q = Array2::zeros((b, d));
                let mut idx = Vec::with_capacity(b);
                for i in 0..b {
                    let (k, v) = quantize(ze_val.row(i).as_slice().expect("row"), &self.codebook);
                    idx.push(k);
                    q.row_mut(i).assign(&Array1::from(v));
                }
                let st = g.straight_through(z_e, q.clone());
                (idx, q, st)
            }
            QuantizeMode::FrozenOffset { indices, offsets } => {
                let off = g.constant(offsets.clone());
                let st = g.add(z_e, off);
                let q = indices
                    .iter()
                    .map(|&k| self.codebook.vectors.row(k).to_owned())
                    .collect::<Vec<_>>();
                let q = ndarray::stack(ndarray::Axis(0), &q.iter().map(|r| r.view()).collect::<Vec<_>>())
                    .expect("stack");
                (indices.clone(), q, st)
            }
        };
        let recon = self.decode_graph(g, zq);

        let (tx, present) = stack_patches(targets, self.cfg.channels(), self.cfg.patch_len)?;
        let l = self.cfg.patch_len;
        let mut weight = Array2::zeros(tx.dim());
        for c in 0..self.cfg.channels() {
            for i in 0..b {
                if present[c * b + i] {
                    for t in 0..l {
                        weight[[c, i * l + t]] = 1.0;
                    }
                }
            }
        }
        let mass = weight.sum();
        let mse = g.masked_mse(recon, tx.clone(), weight.clone());
        let recon_term = g.scale(mse, mass / b as f64);

        let mut per_sample_recon = vec![0.0; b];
        {
            let rv = g.value(recon);
            for c in 0..self.cfg.channels() {
                for i in 0..b {
                    for t in 0..l {
                        let col = i * l + t;
                        per_sample_recon[i] += weight[[c, col]] * (rv[[c, col]] - tx[[c, col]]).powi(2);
                    }
                }
            }
        }

        let code_rows = g.constant(quantized.clone());
        let diff = g.sub(z_e, code_rows);
        let sq = g.mul(diff, diff);
        let commit_sum = g.sum(sq);
        let commit_term = g.scale(commit_sum, self.cfg.beta / b as f64);
        let codebook_term = (&ze_val - &quantized).mapv(|v| v * v).sum() / b as f64;
        let total = g.add(recon_term, commit_term);
        Ok(VqForward {
            z_e,
            recon,
            indices,
            quantized,
            recon_term,
            commit_term,
            codebook_term,
            total,
            per_sample_recon,
        })
    }

    /// Latent for one patch (no gradient).
    pub fn encode_patch(&self, store: &ParamStore, p: &Patch) -> Result<Vec<f64>, TokenizerError> {
        let mut g = Graph::new(store);
        g.freeze_all();
        let z = self.encode_graph(&mut g, &[p])?;
        Ok(g.value(z).row(0).to_vec())
    }

    /// Reconstruction for one quantized latent (no gradient).
    pub fn decode(&self, store: &ParamStore, z_q: &[f64]) -> Result<Array2<f64>, TokenizerError> {
        if z_q.len() != self.cfg.latent_dim {
            return Err(shape(self.cfg.latent_dim, z_q.len()));
        }
        let mut g = Graph::new(store);
        g.freeze_all();
        let z = g.constant(Array2::from_shape_vec((1, z_q.len()), z_q.to_vec()).expect("shape"));
        let out = self.decode_graph(&mut g, z);
        Ok(g.value(out).clone())
    }

    /// Encodes and quantizes patches in chunks; returns (index, z_e) per patch.
    pub fn tokenize(&self, store: &ParamStore, patches: &[Patch]) -> Result<Vec<(usize, Vec<f64>)>, TokenizerError> {
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(64) {
            let refs: Vec<&Patch> = chunk.iter().collect();
            let mut g = Graph::new(store);
            g.freeze_all();
            let z = self.encode_graph(&mut g, &refs)?;
            for row in g.value(z).rows() {
                let v = row.to_vec();
                let (k, _) = quantize(&v, &self.codebook);
                out.push((k, v));
            }
        }
        Ok(out)
    }

    /// Seeds the codebook with encoder outputs of randomly chosen patches
    /// (with replacement when there are fewer patches than codes).
    pub fn init_codebook(&mut self, store: &ParamStore, patches: &[Patch], rng: &mut impl Rng) -> Result<(), TokenizerError> {
        let k = self.cfg.codebook_size;
        let picks: Vec<Patch> = (0..k).map(|_| patches[rng.gen_range(0..patches.len())].clone()).collect();
        let toks = self.tokenize(store, &picks)?;
        let mut v = Array2::zeros((k, self.cfg.latent_dim));
        for (i, (_, z)) in toks.iter().enumerate() {
            for (j, x) in z.iter().enumerate() {
                v[[i, j]] = x + 1e-3 * rng.gen_range(-1.0..1.0);
            }
        }
        self.codebook = Codebook::new(v, self.cfg.ema_decay, self.cfg.dead_threshold);
        Ok(())
    }

    /// One optimizer step of the encoder/decoder plus the EMA codebook
    /// update. Dead codes are recycled every `reinit_every` steps.
    pub fn train_step(
        &mut self,
        store: &mut ParamStore,
        opt: &mut Adam,
        inputs: &[&Patch],
        targets: &[&Patch],
        step: usize,
        lr: f64,
        rng: &mut impl Rng,
    ) -> Result<TokenizerMetrics, TokenizerError> {
        let (metrics, grads, assignments) = {
            let mut g = Graph::new(store);
            let f = self.vq_forward(&mut g, inputs, targets, &QuantizeMode::StraightThrough)?;
            let grads = g.backward(f.total);
            let ze = g.value(f.z_e).clone();
            let assignments: Vec<(usize, Vec<f64>, f64)> = f
                .indices
                .iter()
                .enumerate()
                .map(|(i, &k)| (k, ze.row(i).to_vec(), f.per_sample_recon[i]))
                .collect();
            let distinct = {
                let mut v = f.indices.clone();
                v.sort_unstable();
                v.dedup();
                v.len()
            };
            let metrics = TokenizerMetrics {
                step,
                recon: g.scalar(f.recon_term),
                codebook: f.codebook_term,
                commitment: g.scalar(f.commit_term),
                total: g.scalar(f.total) + f.codebook_term,
                batch_codes: distinct,
                used_codes: 0,
                reinitialized: 0,
            };
            (metrics, grads, assignments)
        };
        opt.step(store, grads, lr);
        let refs: Vec<(usize, &[f64])> = assignments.iter().map(|(k, z, _)| (*k, z.as_slice())).collect();
        self.codebook.ema_update(&refs)?;
        let mut reinitialized = 0;
        if self.cfg.reinit_every > 0 && (step + 1) % self.cfg.reinit_every == 0 {
            let cands: Vec<(Vec<f64>, f64)> = assignments.into_iter().map(|(_, z, l)| (z, l)).collect();
            reinitialized = self.codebook.reinit_dead_codes(&cands, rng)?.len();
        }
        Ok(TokenizerMetrics {
            used_codes: self.codebook.used_codes(),
            reinitialized,
            ..metrics
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TokenizerMetrics {
    pub step: usize,
    pub recon: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub total: f64,
    pub batch_codes: usize,
    pub used_codes: usize,
    pub reinitialized: usize,
}

/// Per-code usage diagnostic: `code,ema_count,usage,steps_since_use`.
pub fn usage_csv(cb: &Codebook) -> String {
    let mut s = String::from("code,ema_count,usage,steps_since_use\n");
    for k in 0..cb.size() {
        s.push_str(&format!("{k},{},{},{}\n", cb.ema_counts[k], cb.usage[k], cb.steps_since_use[k]));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> TokenizerConfig {
        TokenizerConfig {
            codebook_size: 8,
            latent_dim: 4,
            patch_len: 8,
            stride: 4,
            conv_layers: 2,
            kernel: 3,
            curve_emb_dim: 2,
            depth_pos_dim: 4,
            ..Default::default()
        }
    }

    fn patch(seed: u64, len: usize) -> Patch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Patch {
            well_id: "w".into(),
            start_index: 0,
            values: normal_init(&mut rng, 5, len, 1.0),
            rel_depth: 0.3,
            curve_kinds: CurveKind::ALL.to_vec(),
            missing_mask: vec![false, false, true, false, false],
        }
    }

    fn cb(rows: Vec<Vec<f64>>) -> Codebook {
        let k = rows.len();
        let d = rows[0].len();
        Codebook::new(
            Array2::from_shape_vec((k, d), rows.concat()).unwrap(),
            0.99,
            200,
        )
    }

    #[test]
    fn quantize_examples() {
        let c = cb(vec![vec![0.0, 0.0], vec![1.0, 1.0]]);
        assert_eq!(quantize(&[0.1, 0.2], &c), (0, vec![0.0, 0.0]));
        let c = cb(vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 0.0], vec![-1.0, 3.0]]);
        assert_eq!(quantize(&[-1.0, 3.0], &c), (3, vec![-1.0, 3.0]));
        let c = cb(vec![vec![-1.0, 0.0], vec![1.0, 0.0]]);
        assert_eq!(quantize(&[0.0, 0.5], &c).0, 0);
    }

    #[test]
    fn vq_loss_examples() {
        let x = Array2::zeros((1, 3));
        assert_eq!(vq_loss(&x, &x, &[1.0, 2.0], &[1.0, 2.0], 0.25).unwrap(), 0.0);
        let l = vq_loss(&x, &x, &[1.0, 0.0], &[0.0, 0.0], 0.25).unwrap();
        assert!((l - 1.25).abs() < 1e-15);
        let y = Array2::from_elem((1, 3), 1.0);
        let a = vq_loss(&x, &y, &[1.0, 0.0], &[0.0, 0.0], 0.0).unwrap();
        assert!((a - 4.0).abs() < 1e-15);
        assert!(matches!(vq_loss(&x, &y, &[1.0], &[0.0, 0.0], 0.0), Err(TokenizerError::ShapeMismatch { .. })));
    }

    #[test]
    fn ema_examples() {
        let mut c = cb(vec![vec![0.0, 0.0], vec![1.0, 1.0]]);
        c.ema_counts[0] = 10.0;
        c.ema_update(&[(0, &[1.0, 1.0]), (0, &[3.0, 1.0])]).unwrap();
        assert!((c.ema_counts[0] - 9.92).abs() < 1e-12);
        assert_eq!(c.steps_since_use, vec![0, 1]);
        let row1 = c.vectors.row(1).to_owned();

        let before = c.vectors.clone();
        c.ema_update(&[]).unwrap();
        assert_eq!(c.vectors, before);
        assert_eq!(c.steps_since_use, vec![1, 2]);

        c.ema_update(&[(0, &[5.0, 5.0])]).unwrap();
        assert_eq!(c.vectors.row(1), row1);
        assert_ne!(c.vectors.row(0), before.row(0));

        assert_eq!(
            c.ema_update(&[(2, &[0.0, 0.0])]),
            Err(TokenizerError::IndexOutOfRange { index: 2, size: 2 })
        );
    }

    #[test]
    fn ema_mass_recurrence() {
        let mut c = cb(vec![vec![0.0; 3]; 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let total: f64 = c.ema_counts.iter().sum();
            let n = rng.gen_range(0..10);
            let zs: Vec<(usize, Vec<f64>)> = (0..n).map(|_| (rng.gen_range(0..5), vec![rng.gen(); 3])).collect();
            let refs: Vec<(usize, &[f64])> = zs.iter().map(|(k, z)| (*k, z.as_slice())).collect();
            c.ema_update(&refs).unwrap();
            let after: f64 = c.ema_counts.iter().sum();
            assert!((after - (0.99 * total + 0.01 * n as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn reinit_examples() {
        let mut c = cb(vec![vec![0.0, 0.0], vec![1.0, 1.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let before = c.clone();
        assert!(c.reinit_dead_codes(&[], &mut rng).unwrap().is_empty());
        assert_eq!(c, before);

        c.steps_since_use[1] = 201;
        assert_eq!(c.reinit_dead_codes(&[], &mut rng), Err(TokenizerError::NoCandidates));
        let replaced = c.reinit_dead_codes(&[(vec![7.0, 8.0], 0.5)], &mut rng).unwrap();
        assert_eq!(replaced, vec![1]);
        assert_eq!(c.vectors.row(1).to_vec(), vec![7.0, 8.0]);
        assert_eq!(c.steps_since_use[1], 0);

        let cands: Vec<(Vec<f64>, f64)> = (0..30).map(|i| (vec![i as f64, 0.0], i as f64)).collect();
        let run = |seed| {
            let mut c = cb(vec![vec![0.0, 0.0]; 4]);
            c.steps_since_use = vec![300; 4];
            c.reinit_dead_codes(&cands, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            c.vectors
        };
        let a = run(9);
        assert_eq!(a, run(9));
        // Top decile of 30 candidates is losses {27, 28, 29}.
        assert!(a.column(0).iter().all(|&v| v >= 27.0));
    }

    #[test]
    fn encode_decode_contracts() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tok = Tokenizer::new(tiny_cfg(), &mut store, &mut rng).unwrap();
        let p = patch(1, 8);
        let z = tok.encode_patch(&store, &p).unwrap();
        assert_eq!(z.len(), 4);
        assert_eq!(z, tok.encode_patch(&store, &p).unwrap());

        let mut all_missing = p.clone();
        all_missing.missing_mask = vec![true; 5];
        let z0 = tok.encode_patch(&store, &all_missing).unwrap();
        let mut other = patch(2, 8);
        other.missing_mask = vec![true; 5];
        assert_eq!(z0, tok.encode_patch(&store, &other).unwrap());
        assert!(z0.iter().all(|v| v.is_finite()));

        assert!(matches!(tok.encode_patch(&store, &patch(1, 6)), Err(TokenizerError::ShapeMismatch { .. })));

        let r = tok.decode(&store, &[0.0; 4]).unwrap();
        assert_eq!(r.dim(), (5, 8));
        assert!(r.iter().all(|v| v.is_finite()));
        assert_eq!(r, tok.decode(&store, &[0.0; 4]).unwrap());
        assert!(tok.decode(&store, &[0.0; 3]).is_err());
    }

    #[test]
    fn training_reduces_reconstruction() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tok = Tokenizer::new(tiny_cfg(), &mut store, &mut rng).unwrap();
        let patches: Vec<Patch> = (0..16).map(|i| patch(i, 8)).collect();
        tok.init_codebook(&store, &patches, &mut rng).unwrap();
        let mut opt = Adam::new(Default::default(), &store);
        let refs: Vec<&Patch> = patches.iter().collect();
        let first = tok.train_step(&mut store, &mut opt, &refs, &refs, 0, 3e-3, &mut rng).unwrap();
        let mut last = first;
        for s in 1..150 {
            last = tok.train_step(&mut store, &mut opt, &refs, &refs, s, 3e-3, &mut rng).unwrap();
        }
        assert!(last.recon < first.recon, "{} !< {}", last.recon, first.recon);
    }
}
