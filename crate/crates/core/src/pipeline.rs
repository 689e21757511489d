//! Stage runners shared by the command-line tool and the tests.
//!
//! Every stage starts from a [`ModelState`] and returns a new one, so an
//! in-process run and a run resumed from checkpoint files see the same
//! (f32-rounded) weights at each stage boundary.

use std::fs::File;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::checkpoint::{CheckpointError, ModelState, Stage};
use crate::config::{Ablation, ConfigError, TrainConfig};
use crate::corpus::{
    extract_patches, generate_synthetic_corpus, normalize_well, split_wells, write_corpus, write_json, CorpusError,
    Manifest, Patch, Split, WellLog, WellSplit,
};
use crate::eval::{
    classification_metrics, clustering_metrics, regression_metrics, EmbeddingRow, EvalError, MetricReport,
    SeedMetrics,
};
use crate::finetune::{finetune_step, nearest_token, FinetuneError, FinetuneMetrics, LabeledBatch, TaskHeads};
use crate::graph::{GaussianPrior, Graph};
use crate::loader::{calibrate_threshold, collect_sorted, Encoder, LoaderError, WellSource};
use crate::nn::{Adam, ParamStore};
use crate::pretrain::{
    argmax, build_positive_pairs, make_block_mask, modality_dropout, pretrain_step, Backbone, MaskedHead, PairParams,
    PretrainError, WindowRef,
    PretrainMetrics, PretrainSampler, TokenSequence, TokenView, WellTokens, WellWindows,
};
use crate::tokenizer::{Tokenizer, TokenizerError, TokenizerMetrics};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Pretrain(#[from] PretrainError),
    #[error(transparent)]
    Finetune(#[from] FinetuneError),
    #[error(transparent)]
    Loader(#[from] LoaderError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("stage order violation: `{command}` needs a {expected} checkpoint, got {found}")]
    StageOrderViolation {
        command: &'static str,
        expected: &'static str,
        found: String,
    },
    #[error("a paired t-test was requested but no baseline metrics file was given")]
    MissingBaseline,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
}

impl PipelineError {
    /// 2 for usage and configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Usage(_) | PipelineError::MissingBaseline => 2,
            _ => 1,
        }
    }
}

pub(crate) fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

/// RNG streams, one per stage, so stages do not perturb each other.
mod streams {
    pub const TOKENIZER: u64 = 1;
    pub const PRETRAIN: u64 = 2;
    pub const FINETUNE: u64 = 3;
    pub const SCRATCH: u64 = 4;
    pub const VIEWS: u64 = 5;
    pub const EVAL: u64 = 6;
}

pub fn stage_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// CSV metrics file written row by row (flushed after each row).
pub struct MetricsSink {
    writer: Option<(PathBuf, csv::Writer<File>)>,
}

impl MetricsSink {
    pub fn none() -> Self {
        MetricsSink { writer: None }
    }

    pub fn create(path: &Path) -> Result<Self> {
        let w = csv::Writer::from_path(path).map_err(|e| PipelineError::Io {
            path: path.to_path_buf(),
            source: e.into(),
        })?;
        Ok(MetricsSink {
            writer: Some((path.to_path_buf(), w)),
        })
    }

    pub fn push<T: Serialize>(&mut self, row: &T) -> Result<()> {
        if let Some((path, w)) = &mut self.writer {
            let err = |e: csv::Error| PipelineError::Io {
                path: path.clone(),
                source: e.into(),
            };
            w.serialize(row).map_err(err)?;
            w.flush().map_err(io_error(path))?;
        }
        Ok(())
    }
}

/// Normalized wells with their well-level split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub wells: Vec<WellLog>,
    pub split: WellSplit,
}

impl Dataset {
    /// Uses the split recorded in the manifest when every entry has one,
    /// otherwise splits with the configured ratios and seed.
    pub fn new(raw: Vec<WellLog>, manifest: &Manifest, cfg: &TrainConfig) -> Result<Self> {
        let wells = raw.iter().map(normalize_well).collect::<std::result::Result<Vec<_>, _>>()?;
        let split = match WellSplit::from_manifest(manifest, cfg.seed) {
            Some(s) => s,
            None => {
                let ids: Vec<String> = wells.iter().map(|w| w.well_id.clone()).collect();
                split_wells(&ids, (cfg.split.train, cfg.split.val, cfg.split.test), cfg.seed)?
            }
        };
        Ok(Dataset { wells, split })
    }

    pub fn from_manifest(path: &Path, cfg: &TrainConfig) -> Result<Self> {
        let manifest = Manifest::read(path)?;
        let raw = manifest.load_all()?;
        Self::new(raw, &manifest, cfg)
    }

    /// Generates the synthetic corpus in memory with a seeded split.
    pub fn synthetic(cfg: &TrainConfig) -> Result<Self> {
        let corpus = generate_synthetic_corpus(&cfg.corpus)?;
        let ids: Vec<String> = corpus.wells.iter().map(|w| w.well_id.clone()).collect();
        let split = split_wells(&ids, (cfg.split.train, cfg.split.val, cfg.split.test), cfg.seed)?;
        let manifest = corpus.manifest.with_split(&split);
        Self::new(corpus.wells, &manifest, cfg)
    }

    pub fn well(&self, id: &str) -> Option<&WellLog> {
        self.wells.iter().find(|w| w.well_id == id)
    }

    /// Wells of one split in split-list order.
    pub fn wells_in(&self, split: Split) -> Vec<&WellLog> {
        let ids = match split {
            Split::Train => &self.split.train,
            Split::Val => &self.split.val,
            Split::Test => &self.split.test,
        };
        ids.iter().filter_map(|id| self.well(id)).collect()
    }

    /// The first `n` training wells that carry both label tracks.
    pub fn labeled_train(&self, n: usize) -> Vec<&WellLog> {
        self.wells_in(Split::Train)
            .into_iter()
            .filter(|w| w.litho.is_some() && w.porosity.is_some())
            .take(n)
            .collect()
    }
}

/// Writes corpus files, manifest (with split column) and `split.json`;
/// returns the manifest path.
pub fn generate(cfg: &TrainConfig, out_dir: &Path) -> Result<PathBuf> {
    let mut corpus = generate_synthetic_corpus(&cfg.corpus)?;
    let ids: Vec<String> = corpus.wells.iter().map(|w| w.well_id.clone()).collect();
    let split = split_wells(&ids, (cfg.split.train, cfg.split.val, cfg.split.test), cfg.seed)?;
    corpus.manifest = corpus.manifest.with_split(&split);
    let manifest = write_corpus(&corpus, out_dir)?;
    write_json(&split, &out_dir.join("split.json"))?;
    Ok(manifest)
}

/// Live modules rebuilt from (or about to become) a checkpoint.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: TrainConfig,
    pub store: ParamStore,
    pub tokenizer: Tokenizer,
    pub backbone: Option<Backbone>,
    pub heads: Option<TaskHeads>,
}

impl Model {
    /// Fresh modules initialized from `rng`.
    pub fn fresh(cfg: &TrainConfig, backbone: bool, heads: bool, rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let tokenizer = Tokenizer::new(cfg.tokenizer.clone(), &mut store, rng)?;
        let backbone = if backbone || heads {
            Some(Backbone::new(
                cfg.pretrain.clone(),
                cfg.tokenizer.codebook_size,
                cfg.tokenizer.latent_dim,
                cfg.ablation == Ablation::RawCont,
                &mut store,
                rng,
            )?)
        } else {
            None
        };
        let heads = if heads {
            let (means, stds) = cfg.corpus.porosity_priors();
            let classes = means.len();
            Some(TaskHeads::new(
                &mut store,
                cfg.pretrain.d_model,
                classes,
                cfg.tokenizer.channels() * cfg.tokenizer.patch_len,
                GaussianPrior { means, stds },
                rng,
            )?)
        } else {
            None
        };
        Ok(Model {
            cfg: cfg.clone(),
            store,
            tokenizer,
            backbone,
            heads,
        })
    }

    /// Builds the requested modules, then overwrites the ones the
    /// checkpoint carries.
    pub fn from_state(state: &ModelState, cfg: &TrainConfig, backbone: bool, heads: bool, rng: &mut impl Rng) -> Result<Self> {
        check_compatible(&state.config, cfg, state.stage)?;
        let mut m = Model::fresh(cfg, backbone, heads, rng)?;
        let mut prefixes = vec!["tokenizer."];
        if state.stage >= Stage::Pretrained && m.backbone.is_some() {
            prefixes.push("backbone.");
        }
        if state.stage >= Stage::Finetuned && m.heads.is_some() {
            prefixes.push("heads.");
        }
        state.restore(&mut m.store, &prefixes)?;
        m.tokenizer.codebook = state.codebook()?;
        if state.stage == Stage::Tokenizer {
            if let Some(b) = &m.backbone {
                b.seed_token_embedding(&mut m.store, &m.tokenizer.codebook.vectors, rng)?;
            }
        }
        Ok(m)
    }

    pub fn capture(&self, stage: Stage, step: u64, scalars: &[(&str, f64)]) -> ModelState {
        let mut s = ModelState::capture(stage, step, self.cfg.seed, &self.cfg, &self.store, Some(&self.tokenizer.codebook));
        for (k, v) in scalars {
            s.scalars.insert(k.to_string(), *v);
        }
        s
    }

    fn backbone(&self) -> &Backbone {
        self.backbone.as_ref().expect("backbone built")
    }

    fn heads(&self) -> &TaskHeads {
        self.heads.as_ref().expect("heads built")
    }

    /// Clean token stream of a well plus `views` modality-dropout streams.
    pub fn encode_well(&self, well: &WellLog, views: usize, dropout: f64, rng: &mut impl Rng) -> Result<(Vec<Patch>, WellTokens, Vec<Vec<Vec<bool>>>)> {
        let tc = &self.cfg.tokenizer;
        let patches = extract_patches(well, tc.patch_len, tc.stride);
        let toks = self.tokenizer.tokenize(&self.store, &patches)?;
        let d = tc.latent_dim;
        let stream = |toks: &[(usize, Vec<f64>)]| {
            let idx: Vec<usize> = toks.iter().map(|t| t.0).collect();
            let flat: Vec<f64> = toks.iter().flat_map(|t| t.1.iter().copied()).collect();
            (idx, Array2::from_shape_vec((toks.len(), d), flat).expect("latent rows"))
        };
        let (indices, latents) = stream(&toks);
        let mut view_list = Vec::new();
        let mut masks = Vec::new();
        if dropout > 0.0 {
            for _ in 0..views {
                let dropped: Vec<Patch> = patches.iter().map(|p| modality_dropout(p, dropout, rng)).collect();
                let (vi, vl) = stream(&self.tokenizer.tokenize(&self.store, &dropped)?);
                view_list.push(TokenView { indices: vi, latents: vl });
                masks.push(dropped.into_iter().map(|p| p.missing_mask).collect());
            }
        }
        let wt = WellTokens {
            well_id: well.well_id.clone(),
            indices,
            rel_depths: patches.iter().map(|p| p.rel_depth).collect(),
            latents,
            scores: vec![0.0; patches.len()],
            views: view_list,
        };
        Ok((patches, wt, masks))
    }

    /// Backbone hidden states for every token of a well (n×d_model),
    /// computed in `seq_len` chunks; the last chunk is aligned to the end.
    pub fn hidden_states(&self, tokens: &WellTokens) -> Result<Array2<f64>> {
        self.per_token(tokens, false)
    }

    /// L2-normalized contrastive projections for every token of a well.
    pub fn contrast_embeddings(&self, tokens: &WellTokens) -> Result<Array2<f64>> {
        self.per_token(tokens, true)
    }

    fn per_token(&self, tokens: &WellTokens, project: bool) -> Result<Array2<f64>> {
        let n = tokens.len();
        let width = if project {
            self.cfg.pretrain.proj_dim
        } else {
            self.cfg.pretrain.d_model
        };
        if n == 0 {
            return Ok(Array2::zeros((0, width)));
        }
        let t = self.cfg.pretrain.seq_len.min(n);
        let mut starts: Vec<usize> = (0..=n - t).step_by(t).collect();
        if starts.last() != Some(&(n - t)) {
            starts.push(n - t);
        }
        let seqs: Vec<TokenSequence> = starts.iter().map(|&s| tokens.sequence(s, t)).collect();
        let masks = vec![Vec::new(); seqs.len()];
        let mut g = Graph::new(&self.store);
        g.freeze_all();
        let mut h = self.backbone().forward(&mut g, &seqs, &masks)?;
        if project {
            h = self.backbone().project(&mut g, h);
        }
        let hv = g.value(h);
        let mut out = Array2::zeros((n, width));
        for (b, &s) in starts.iter().enumerate() {
            for i in 0..t {
                out.row_mut(s + i).assign(&hv.row(b * t + i));
            }
        }
        Ok(out)
    }

    /// Per-token lithology logits and porosity from hidden states.
    pub fn head_outputs(&self, hidden: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
        let heads = self.heads();
        let mut g = Graph::new(&self.store);
        g.freeze_all();
        let h = g.constant(hidden.clone());
        let logits = heads.litho.forward(&mut g, h);
        let raw = heads.poro.forward(&mut g, h);
        let poro = g.sigmoid(raw);
        (g.value(logits).clone(), g.value(poro).column(0).to_vec())
    }
}

/// Later stages may take a config other than the checkpoint's, but the
/// architecture it describes must match.
fn check_compatible(saved: &TrainConfig, cfg: &TrainConfig, stage: Stage) -> Result<()> {
    let bad = |what: &str| Err(ConfigError::Invalid(format!("{what} differs from the checkpoint's configuration")).into());
    let (a, b) = (&saved.tokenizer, &cfg.tokenizer);
    if (a.codebook_size, a.latent_dim, a.patch_len, a.stride, a.conv_layers, a.kernel, a.curve_emb_dim, a.depth_pos_dim)
        != (b.codebook_size, b.latent_dim, b.patch_len, b.stride, b.conv_layers, b.kernel, b.curve_emb_dim, b.depth_pos_dim)
    {
        return bad("tokenizer architecture");
    }
    if stage >= Stage::Pretrained {
        let (a, b) = (&saved.pretrain, &cfg.pretrain);
        if (a.layers, a.heads, a.d_model, a.ffn_dim, a.proj_dim, a.depth_pos_dim)
            != (b.layers, b.heads, b.d_model, b.ffn_dim, b.proj_dim, b.depth_pos_dim)
            || (saved.ablation == Ablation::RawCont) != (cfg.ablation == Ablation::RawCont)
        {
            return bad("backbone architecture");
        }
    }
    if stage >= Stage::Finetuned && saved.corpus.lithologies.len() != cfg.corpus.lithologies.len() {
        return bad("lithology class count");
    }
    Ok(())
}

fn require_stage(state: &ModelState, command: &'static str, allowed: &[Stage], expected: &'static str) -> Result<()> {
    if allowed.contains(&state.stage) {
        Ok(())
    } else {
        Err(PipelineError::StageOrderViolation {
            command,
            expected,
            found: state.stage.name().to_string(),
        })
    }
}

#[derive(Debug)]
pub struct TokenizerRun {
    pub state: ModelState,
    pub metrics: Vec<TokenizerMetrics>,
}

/// Trains the tokenizer on the patches of `wells`: modality-dropout
/// inputs, clean reconstruction targets.
pub fn train_tokenizer(cfg: &TrainConfig, wells: &[&WellLog], seed: u64, sink: &mut MetricsSink) -> Result<TokenizerRun> {
    let (model, metrics) = train_tokenizer_model(cfg, wells, seed, streams::TOKENIZER, sink)?;
    Ok(TokenizerRun {
        state: model.capture(Stage::Tokenizer, cfg.tokenizer.steps as u64, &[]),
        metrics,
    })
}

fn train_tokenizer_model(
    cfg: &TrainConfig,
    wells: &[&WellLog],
    seed: u64,
    stream: u64,
    sink: &mut MetricsSink,
) -> Result<(Model, Vec<TokenizerMetrics>)> {
    let tc = &cfg.tokenizer;
    let patches: Vec<Patch> = wells
        .iter()
        .flat_map(|w| extract_patches(w, tc.patch_len, tc.stride))
        .collect();
    if patches.is_empty() {
        return Err(PipelineError::InsufficientData("no training patches for the tokenizer".into()));
    }
    let mut rng = stage_rng(seed, stream);
    let mut model = Model::fresh(cfg, false, false, &mut rng)?;
    model.tokenizer.init_codebook(&model.store, &patches, &mut rng)?;
    let mut opt = Adam::new(cfg.optimizer.clone(), &model.store);
    let mut metrics = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let picks: Vec<&Patch> = (0..tc.batch_size).map(|_| &patches[rng.gen_range(0..patches.len())]).collect();
        let inputs: Vec<Patch> = picks.iter().map(|p| modality_dropout(p, tc.modality_dropout, &mut rng)).collect();
        let input_refs: Vec<&Patch> = inputs.iter().collect();
        let lr = cfg.optimizer.lr_at(step, tc.steps);
        let m = model
            .tokenizer
            .train_step(&mut model.store, &mut opt, &input_refs, &picks, step, lr, &mut rng)?;
        sink.push(&m)?;
        metrics.push(m);
    }
    Ok((model, metrics))
}

/// Pair-matching windows of one well: layer tops are placed at the patch
/// whose center depth is nearest.
pub fn well_windows(well: &WellLog, patches: &[Patch], cfg: &TrainConfig) -> WellWindows {
    let l = cfg.tokenizer.patch_len;
    let centers: Vec<f64> = patches
        .iter()
        .map(|p| 0.5 * (well.depths[p.start_index] + well.depths[p.start_index + l - 1]))
        .collect();
    let tops: Vec<(f64, u32)> = well.layer_tops.iter().map(|t| (t.depth, t.layer_id as u32)).collect();
    WellWindows::from_patches(&well.well_id, patches, &tops, &centers, cfg.pretrain.smoothing_window)
}

pub fn pair_params(cfg: &TrainConfig) -> PairParams {
    let pc = &cfg.pretrain;
    PairParams {
        mode: pc.pair_mode,
        depth_tolerance: pc.depth_tolerance,
        tau_sim: pc.tau_sim,
        anchor_radius: pc.anchor_radius,
    }
}

/// Self-supervised diagnostics of a pretrained model on held-out wells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SignalReport {
    /// Top-1 accuracy of the masked-token head at masked positions (NaN
    /// for the continuous-input variant).
    pub mask_accuracy: f64,
    pub masked: usize,
    /// Distinct codes in the held-out token streams.
    pub codes_used: usize,
    /// Mean cosine of contrastive embeddings over positive pairs.
    pub pair_cosine: f64,
    /// Mean cosine over random cross-well window pairs.
    pub random_cosine: f64,
    pub pairs: usize,
}

/// Masked-token accuracy over non-overlapping `seq_len` windows with block
/// masks, and positive-pair versus random cross-well cosine similarity.
pub fn learning_signal(model: &Model, wells: &[&WellLog], seed: u64) -> Result<SignalReport> {
    let pc = &model.cfg.pretrain;
    let t = pc.seq_len;
    let mut rng = stage_rng(seed, streams::EVAL);
    let backbone = model.backbone();
    let mut encoded = Vec::with_capacity(wells.len());
    let mut windows = Vec::with_capacity(wells.len());
    let mut codes = std::collections::BTreeSet::new();
    let (mut correct, mut masked) = (0usize, 0usize);
    for &w in wells {
        let (patches, tokens, _) = model.encode_well(w, 0, 0.0, &mut rng)?;
        codes.extend(tokens.indices.iter().copied());
        if tokens.len() >= t {
            let seqs: Vec<TokenSequence> = (0..=tokens.len() - t).step_by(t).map(|s| tokens.sequence(s, t)).collect();
            let masks: Vec<Vec<usize>> = seqs
                .iter()
                .map(|_| make_block_mask(t, pc.mask_ratio, pc.block_length, &mut rng).positions)
                .collect();
            if let MaskedHead::Classify(head) = &backbone.head {
                let mut g = Graph::new(&model.store);
                g.freeze_all();
                let h = backbone.forward(&mut g, &seqs, &masks)?;
                let logits = head.forward(&mut g, h);
                let lv = g.value(logits);
                for (b, m) in masks.iter().enumerate() {
                    for &p in m {
                        masked += 1;
                        if argmax(lv.row(b * t + p).as_slice().expect("row")) == seqs[b].token_indices[p] {
                            correct += 1;
                        }
                    }
                }
            }
        }
        windows.push(well_windows(w, &patches, &model.cfg));
        let emb = model.contrast_embeddings(&tokens)?;
        encoded.push(emb);
    }
    let pairs = build_positive_pairs(&windows, &pair_params(&model.cfg));
    let dot = |a: WindowRef, b: WindowRef| encoded[a.well].row(a.position).dot(&encoded[b.well].row(b.position));
    let pair_cosine = pairs.iter().map(|p| dot(p.anchor, p.positive)).sum::<f64>() / pairs.len().max(1) as f64;
    let mut random_sum = 0.0;
    let mut random_n = 0usize;
    if wells.len() >= 2 {
        for p in &pairs {
            let mut other = rng.gen_range(0..wells.len() - 1);
            if other >= p.anchor.well {
                other += 1;
            }
            if encoded[other].nrows() == 0 {
                continue;
            }
            let pos = rng.gen_range(0..encoded[other].nrows());
            random_sum += dot(p.anchor, WindowRef { well: other, position: pos });
            random_n += 1;
        }
    }
    Ok(SignalReport {
        mask_accuracy: if masked == 0 { f64::NAN } else { correct as f64 / masked as f64 },
        masked,
        codes_used: codes.len(),
        pair_cosine: if pairs.is_empty() { f64::NAN } else { pair_cosine },
        random_cosine: if random_n == 0 { f64::NAN } else { random_sum / random_n as f64 },
        pairs: pairs.len(),
    })
}

#[derive(Debug)]
pub struct PretrainRun {
    pub state: ModelState,
    pub metrics: Vec<PretrainMetrics>,
    pub score_threshold: f64,
    pub pairs: usize,
}

/// Pretrains the backbone on the training wells. Tokens come through the
/// scored loader; the sequence-level score threshold is fixed by config or
/// calibrated on the training scores.
/// Pretrains a fresh backbone over a tokenizer checkpoint. When
/// `checkpoint` is given, intermediate states are written there every
/// `checkpoint_every` steps.
pub fn pretrain(state: &ModelState, cfg: &TrainConfig, data: &Dataset, sink: &mut MetricsSink, checkpoint: Option<&Path>) -> Result<PretrainRun> {
    require_stage(state, "pretrain", &[Stage::Tokenizer], "tokenizer")?;
    let cfg = cfg.resolved();
    let pc = &cfg.pretrain;
    let mut rng = stage_rng(cfg.seed, streams::PRETRAIN);
    let mut model = Model::from_state(state, &cfg, true, false, &mut rng)?;
    let train = data.wells_in(Split::Train);
    let source = WellSource::Memory(train.iter().map(|w| (*w).clone()).collect());
    let loaded = collect_sorted(
        &source,
        &cfg.loader_config(f64::NEG_INFINITY),
        Some(Encoder {
            tokenizer: &model.tokenizer,
            store: &model.store,
        }),
        true,
    )?;
    let all_scores: Vec<f64> = loaded.iter().map(|p| p.score).collect();
    let threshold = cfg
        .loader
        .score_threshold
        .unwrap_or_else(|| calibrate_threshold(&all_scores, cfg.loader.calibration_quantile));

    let mut view_rng = stage_rng(cfg.seed, streams::VIEWS);
    let tc = &cfg.tokenizer;
    let mut tokens = Vec::with_capacity(train.len());
    let mut windows = Vec::with_capacity(train.len());
    for w in &train {
        let patches = extract_patches(w, tc.patch_len, tc.stride);
        let items: Vec<_> = loaded.iter().filter(|p| p.well_id == w.well_id).collect();
        debug_assert_eq!(items.len(), patches.len());
        let d = tc.latent_dim;
        let flat: Vec<f64> = items.iter().flat_map(|p| p.latent.clone().unwrap_or_default()).collect();
        let mut views = Vec::new();
        if pc.modality_dropout > 0.0 {
            for _ in 0..cfg.dropout_views {
                let dropped: Vec<Patch> = patches.iter().map(|p| modality_dropout(p, pc.modality_dropout, &mut view_rng)).collect();
                let toks = model.tokenizer.tokenize(&model.store, &dropped)?;
                let vflat: Vec<f64> = toks.iter().flat_map(|t| t.1.iter().copied()).collect();
                views.push(TokenView {
                    indices: toks.iter().map(|t| t.0).collect(),
                    latents: Array2::from_shape_vec((toks.len(), d), vflat).expect("latent rows"),
                });
            }
        }
        tokens.push(WellTokens {
            well_id: w.well_id.clone(),
            indices: items.iter().map(|p| p.token.unwrap_or(0)).collect(),
            rel_depths: items.iter().map(|p| p.rel_depth).collect(),
            latents: Array2::from_shape_vec((items.len(), d), flat).expect("latent rows"),
            scores: items.iter().map(|p| p.score).collect(),
            views,
        });
        windows.push(well_windows(w, &patches, &cfg));
    }
    let pairs = build_positive_pairs(&windows, &pair_params(&cfg));
    let n_pairs = pairs.len();
    let sampler = PretrainSampler::new(tokens, pairs, pc.seq_len, threshold);
    if !sampler.has_data() {
        return Err(PipelineError::InsufficientData(
            "no training windows pass the score threshold and no positive pairs exist".into(),
        ));
    }
    let mut opt = Adam::new(cfg.optimizer.clone(), &model.store);
    let backbone = model.backbone.clone().expect("backbone built");
    let mut metrics = Vec::with_capacity(pc.steps);
    for step in 0..pc.steps {
        let batch = sampler.sample(pc, &mut rng);
        let lr = cfg.optimizer.lr_at(step, pc.steps);
        let m = pretrain_step(&backbone, &mut model.store, &mut opt, &batch, pc.alpha, step, lr)?;
        sink.push(&m)?;
        metrics.push(m);
        let done = step + 1;
        if let Some(path) = checkpoint {
            if pc.checkpoint_every > 0 && done % pc.checkpoint_every == 0 && done < pc.steps {
                model
                    .capture(Stage::Pretrained, done as u64, &[("score_threshold", threshold)])
                    .save(path)?;
            }
        }
    }
    Ok(PretrainRun {
        state: model.capture(Stage::Pretrained, pc.steps as u64, &[("score_threshold", threshold)]),
        metrics,
        score_threshold: threshold,
        pairs: n_pairs,
    })
}

/// A labeled well prepared for fine-tuning.
struct LabeledWell<'a> {
    well: &'a WellLog,
    patches: Vec<Patch>,
    tokens: WellTokens,
    /// Per view, per patch: channel missing after dropout.
    view_missing: Vec<Vec<Vec<bool>>>,
}

fn labeled_batch(model: &Model, wells: &[LabeledWell<'_>], rng: &mut impl Rng) -> (Vec<TokenSequence>, LabeledBatch) {
    let tc = &model.cfg.tokenizer;
    let t = model.cfg.pretrain.seq_len;
    let (l, stride) = (tc.patch_len, tc.stride);
    let c = tc.channels();
    let bsz = model.cfg.finetune.batch_size;
    let mut seqs = Vec::with_capacity(bsz);
    let mut rows = Vec::new();
    let mut poro = Vec::new();
    let mut litho = Vec::new();
    let mut recon_target = Array2::zeros((bsz * t, c * l));
    let mut recon_mask = Vec::new();
    for b in 0..bsz {
        let lw = &wells[rng.gen_range(0..wells.len())];
        let n = lw.tokens.len();
        let s = rng.gen_range(0..=n - t);
        let view = rng.gen_range(0..=lw.tokens.views.len());
        seqs.push(match view {
            0 => lw.tokens.sequence(s, t),
            v => lw.tokens.view_sequence(v - 1, s, t),
        });
        let labels_p = lw.well.porosity.as_ref().expect("labeled");
        let labels_l = lw.well.litho.as_ref().expect("labeled");
        let lo = lw.patches[s].start_index;
        let hi = lw.patches[s + t - 1].start_index + l;
        for i in lo..hi {
            let j = nearest_token(i, n, l, stride).clamp(s, s + t - 1);
            rows.push(b * t + j - s);
            poro.push(labels_p[i]);
            litho.push(labels_l[i]);
        }
        for j in 0..t {
            let p = &lw.patches[s + j];
            let r = b * t + j;
            for ch in 0..c {
                for k in 0..l {
                    recon_target[[r, ch * l + k]] = p.values[[ch, k]];
                }
                let dropped = view > 0 && lw.view_missing[view - 1][s + j][ch] && !p.missing_mask[ch];
                if dropped {
                    recon_mask.extend((0..l).map(|k| (r, ch * l + k)));
                }
            }
        }
    }
    (
        seqs,
        LabeledBatch {
            position_rows: rows,
            poro,
            litho,
            recon_target,
            recon_mask,
        },
    )
}

fn finetune_model(model: &mut Model, wells: &[&WellLog], freeze_encoder: bool, seed: u64, stream: u64, sink: &mut MetricsSink) -> Result<Vec<FinetuneMetrics>> {
    let fc = model.cfg.finetune.clone();
    let t = model.cfg.pretrain.seq_len;
    let mut rng = stage_rng(seed, stream);
    let mut labeled = Vec::with_capacity(wells.len());
    for &w in wells {
        let (patches, tokens, view_missing) = model.encode_well(w, model.cfg.dropout_views, fc.modality_dropout, &mut rng)?;
        if tokens.len() >= t {
            labeled.push(LabeledWell {
                well: w,
                patches,
                tokens,
                view_missing,
            });
        }
    }
    if labeled.is_empty() {
        return Err(PipelineError::InsufficientData(format!(
            "no labeled well has at least {t} patches"
        )));
    }
    let weights = fc.effective_weights();
    let mut opt = Adam::new(model.cfg.optimizer.clone(), &model.store);
    let backbone = model.backbone().clone();
    let heads = model.heads().clone();
    let mut metrics = Vec::with_capacity(fc.steps);
    for step in 0..fc.steps {
        let (seqs, batch) = labeled_batch(model, &labeled, &mut rng);
        let lr = model.cfg.optimizer.lr_at(step, fc.steps);
        let m = finetune_step(&backbone, &heads, &mut model.store, &mut opt, &seqs, &batch, &weights, freeze_encoder, step, lr)?;
        sink.push(&m)?;
        metrics.push(m);
    }
    Ok(metrics)
}

#[derive(Debug)]
pub struct FinetuneRun {
    pub state: ModelState,
    pub metrics: Vec<FinetuneMetrics>,
}

/// Fine-tunes the task heads (and the backbone unless frozen) on the first
/// `labeled_wells` labeled training wells.
pub fn finetune(state: &ModelState, cfg: &TrainConfig, data: &Dataset, seed: u64, sink: &mut MetricsSink) -> Result<FinetuneRun> {
    require_stage(state, "finetune", &[Stage::Pretrained], "pretrained")?;
    let (model, metrics) = finetune_from_pretrained(state, cfg, data, seed, sink)?;
    let mut scalars: Vec<(&str, f64)> = Vec::new();
    let threshold = state.scalars.get("score_threshold").copied();
    if let Some(v) = threshold {
        scalars.push(("score_threshold", v));
    }
    Ok(FinetuneRun {
        state: model.capture(Stage::Finetuned, cfg.finetune.steps as u64, &scalars),
        metrics,
    })
}

fn finetune_from_pretrained(state: &ModelState, cfg: &TrainConfig, data: &Dataset, seed: u64, sink: &mut MetricsSink) -> Result<(Model, Vec<FinetuneMetrics>)> {
    let cfg = cfg.resolved();
    let mut init_rng = stage_rng(seed, streams::FINETUNE);
    let mut model = Model::from_state(state, &cfg, true, true, &mut init_rng)?;
    let wells = data.labeled_train(cfg.finetune.labeled_wells);
    let metrics = finetune_model(&mut model, &wells, cfg.finetune.freeze_encoder, seed, streams::FINETUNE, sink)?;
    Ok((model, metrics))
}

/// Per-sample predictions of one well.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub well_id: String,
    pub depth: f64,
    pub litho_true: Option<usize>,
    pub litho_pred: usize,
    pub litho_probs: Vec<f64>,
    pub poro_true: Option<f64>,
    pub poro_pred: f64,
}

/// Token-level view of an evaluation well.
pub struct EncodedWell {
    pub patches: Vec<Patch>,
    pub tokens: WellTokens,
    pub hidden: Array2<f64>,
}

pub fn encode_for_eval(model: &Model, well: &WellLog) -> Result<EncodedWell> {
    let mut unused = stage_rng(0, streams::EVAL);
    let (patches, tokens, _) = model.encode_well(well, 0, 0.0, &mut unused)?;
    let hidden = model.hidden_states(&tokens)?;
    Ok(EncodedWell { patches, tokens, hidden })
}

/// Every sample gets the prediction of its nearest token.
pub fn predict_well(model: &Model, well: &WellLog, enc: &EncodedWell) -> Vec<PredictionRow> {
    let n = enc.tokens.len();
    if n == 0 {
        return Vec::new();
    }
    let (logits, poro) = model.head_outputs(&enc.hidden);
    let tc = &model.cfg.tokenizer;
    (0..well.len())
        .map(|i| {
            let j = nearest_token(i, n, tc.patch_len, tc.stride);
            let row = logits.row(j);
            let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            PredictionRow {
                well_id: well.well_id.clone(),
                depth: well.depths[i],
                litho_true: well.litho.as_ref().map(|v| v[i]),
                litho_pred: argmax(row.as_slice().expect("row")),
                litho_probs: e.iter().map(|v| v / z).collect(),
                poro_true: well.porosity.as_ref().map(|v| v[i]),
                poro_pred: poro[j],
            }
        })
        .collect()
}

/// Writes predictions with one probability column per lithology.
pub fn write_predictions(rows: &[PredictionRow], path: &Path) -> Result<()> {
    let classes = rows.first().map_or(0, |r| r.litho_probs.len());
    let mut w = csv::Writer::from_path(path).map_err(|e| io_error(path)(e.into()))?;
    let mut header = vec!["well_id".to_string(), "depth".into(), "litho_true".into(), "litho_pred".into()];
    header.extend((0..classes).map(|k| format!("litho_prob_{k}")));
    header.extend(["poro_true".to_string(), "poro_pred".into()]);
    w.write_record(&header).map_err(|e| io_error(path)(e.into()))?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for r in rows {
        let mut rec = vec![
            r.well_id.clone(),
            r.depth.to_string(),
            opt(r.litho_true.map(|v| v.to_string())),
            r.litho_pred.to_string(),
        ];
        rec.extend(r.litho_probs.iter().map(|p| p.to_string()));
        rec.push(opt(r.poro_true.map(|v| v.to_string())));
        rec.push(r.poro_pred.to_string());
        w.write_record(&rec).map_err(|e| io_error(path)(e.into()))?;
    }
    w.flush().map_err(io_error(path))?;
    Ok(())
}

fn center_index(p: &Patch, patch_len: usize) -> usize {
    p.start_index + patch_len / 2
}

/// Metrics of a fine-tuned model on the wells of `split`.
pub fn evaluate_model(model: &Model, data: &Dataset, split: Split, seed: u64) -> Result<SeedMetrics> {
    let l = model.cfg.tokenizer.patch_len;
    let mut litho_pred = Vec::new();
    let mut litho_true = Vec::new();
    let mut poro_pred = Vec::new();
    let mut poro_true = Vec::new();
    let mut emb = Vec::new();
    let mut emb_labels = Vec::new();
    for w in data.wells_in(split) {
        let enc = encode_for_eval(model, w)?;
        for r in predict_well(model, w, &enc) {
            if let (Some(t), Some(p)) = (r.litho_true, r.poro_true) {
                litho_true.push(t);
                litho_pred.push(r.litho_pred);
                poro_true.push(p);
                poro_pred.push(r.poro_pred);
            }
        }
        if let Some(lit) = &w.litho {
            for (j, p) in enc.patches.iter().enumerate() {
                emb.push(enc.hidden.row(j).to_vec());
                emb_labels.push(lit[center_index(p, l)]);
            }
        }
    }
    if litho_true.is_empty() {
        return Err(PipelineError::InsufficientData(format!("no labeled samples in the {} split", split.name())));
    }
    let (acc, f1) = classification_metrics(&litho_pred, &litho_true)?;
    let (mae, mse) = regression_metrics(&poro_pred, &poro_true)?;
    let k = model.cfg.eval.cluster_k.unwrap_or_else(|| {
        let mut v = emb_labels.clone();
        v.sort_unstable();
        v.dedup();
        v.len()
    });
    let (ari, purity) = if k >= 2 && emb.len() >= k {
        clustering_metrics(&emb, &emb_labels, k, seed)?
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(SeedMetrics {
        seed,
        litho_accuracy: acc,
        litho_macro_f1: f1,
        poro_mae: mae,
        poro_mse: mse,
        ari,
        purity,
    })
}

/// Evaluation over seeds. A pretrained checkpoint is fine-tuned once per
/// seed; a fine-tuned checkpoint is evaluated as is (the seed then only
/// affects clustering).
pub fn evaluate(state: &ModelState, cfg: &TrainConfig, data: &Dataset, seeds: &[u64], split: Split) -> Result<MetricReport> {
    require_stage(state, "eval", &[Stage::Pretrained, Stage::Finetuned], "pretrained or finetuned")?;
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let model = match state.stage {
            Stage::Finetuned => {
                let mut rng = stage_rng(seed, streams::EVAL);
                Model::from_state(state, &cfg.resolved(), true, true, &mut rng)?
            }
            _ => finetune_from_pretrained(state, cfg, data, seed, &mut MetricsSink::none())?.0,
        };
        per_seed.push(evaluate_model(&model, data, split, seed)?);
    }
    Ok(MetricReport {
        split: split.name().to_string(),
        per_seed,
    })
}

/// Identically sized model without pretraining: tokenizer trained on the
/// labeled wells only, random backbone, everything fine-tuned jointly.
pub fn scratch_baseline(cfg: &TrainConfig, data: &Dataset, seeds: &[u64], split: Split) -> Result<MetricReport> {
    let cfg = cfg.resolved();
    let wells = data.labeled_train(cfg.finetune.labeled_wells);
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (tok, _) = train_tokenizer_model(&cfg, &wells, seed, streams::SCRATCH, &mut MetricsSink::none())?;
        let state = tok.capture(Stage::Tokenizer, cfg.tokenizer.steps as u64, &[]);
        let mut rng = stage_rng(seed, streams::SCRATCH);
        let mut model = Model::from_state(&state, &cfg, true, true, &mut rng)?;
        finetune_model(&mut model, &wells, false, seed, streams::SCRATCH, &mut MetricsSink::none())?;
        per_seed.push(evaluate_model(&model, data, split, seed)?);
    }
    Ok(MetricReport {
        split: split.name().to_string(),
        per_seed,
    })
}

fn layer_at(well: &WellLog, depth: f64) -> Option<u32> {
    well.layer_tops
        .iter()
        .filter(|t| t.depth <= depth)
        .max_by(|a, b| a.depth.total_cmp(&b.depth))
        .map(|t| t.layer_id as u32)
}

/// Patch-level (encoder latent) and, when a backbone exists, token-level
/// (hidden state) embeddings for the wells of `split`.
pub fn embeddings(model: &Model, data: &Dataset, split: Split) -> Result<(Vec<EmbeddingRow>, Vec<EmbeddingRow>)> {
    let l = model.cfg.tokenizer.patch_len;
    let mut patch_rows = Vec::new();
    let mut token_rows = Vec::new();
    for w in data.wells_in(split) {
        let mut unused = stage_rng(0, streams::EVAL);
        let (patches, tokens, _) = model.encode_well(w, 0, 0.0, &mut unused)?;
        let hidden = match model.backbone {
            Some(_) => Some(model.hidden_states(&tokens)?),
            None => None,
        };
        for (j, p) in patches.iter().enumerate() {
            let ci = center_index(p, l);
            let depth = 0.5 * (w.depths[p.start_index] + w.depths[p.start_index + l - 1]);
            let row = |values: Vec<f64>| EmbeddingRow {
                well_id: w.well_id.clone(),
                depth,
                layer_id: layer_at(w, depth),
                litho: w.litho.as_ref().map(|v| v[ci]),
                values,
            };
            patch_rows.push(row(tokens.latents.row(j).to_vec()));
            if let Some(h) = &hidden {
                token_rows.push(row(h.row(j).to_vec()));
            }
        }
    }
    Ok((patch_rows, token_rows))
}

/// Every stage in one process; used by the reproducibility checks.
#[derive(Debug)]
pub struct FullRun {
    pub tokenizer: TokenizerRun,
    pub pretrain: PretrainRun,
    pub finetune: FinetuneRun,
    pub report: MetricReport,
}

pub fn run_all(cfg: &TrainConfig, data: &Dataset, out_dir: Option<&Path>) -> Result<FullRun> {
    let sink = |name: &str| match out_dir {
        Some(d) => MetricsSink::create(&d.join(name)),
        None => Ok(MetricsSink::none()),
    };
    let train = data.wells_in(Split::Train);
    let tokenizer = train_tokenizer(cfg, &train, cfg.seed, &mut sink("tokenizer_metrics.csv")?)?;
    let ckpt = out_dir.map(|d| d.join("pretrained.ckpt"));
    let pretrain = pretrain(&tokenizer.state, cfg, data, &mut sink("pretrain_metrics.csv")?, ckpt.as_deref())?;
    let finetune = finetune(&pretrain.state, cfg, data, cfg.seed, &mut sink("finetune_metrics.csv")?)?;
    let report = evaluate(&finetune.state, cfg, data, &cfg.eval.seeds, Split::Test)?;
    if let Some(d) = out_dir {
        crate::eval::write_csv(&report.per_seed, &d.join("metrics_per_seed.csv"))?;
        crate::eval::write_csv(&report.aggregate(), &d.join("metrics_aggregate.csv"))?;
    }
    Ok(FullRun {
        tokenizer,
        pretrain,
        finetune,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> TrainConfig {
        let mut c = TrainConfig::default();
        c.corpus.n_wells = 8;
        c.corpus.depth_range = (1000.0, 1040.0);
        c.corpus.sample_spacing = 0.25;
        c.tokenizer.codebook_size = 16;
        c.tokenizer.latent_dim = 8;
        c.tokenizer.patch_len = 16;
        c.tokenizer.stride = 8;
        c.tokenizer.conv_layers = 1;
        c.tokenizer.kernel = 3;
        c.tokenizer.curve_emb_dim = 4;
        c.tokenizer.depth_pos_dim = 4;
        c.tokenizer.steps = 5;
        c.tokenizer.batch_size = 8;
        c.tokenizer.reinit_every = 2;
        c.tokenizer.dead_threshold = 3;
        c.pretrain.layers = 1;
        c.pretrain.heads = 2;
        c.pretrain.d_model = 16;
        c.pretrain.ffn_dim = 32;
        c.pretrain.proj_dim = 8;
        c.pretrain.depth_pos_dim = 4;
        c.pretrain.seq_len = 6;
        c.pretrain.block_length = 2;
        c.pretrain.steps = 4;
        c.pretrain.batch_size = 4;
        c.finetune.steps = 4;
        c.finetune.batch_size = 2;
        c.finetune.labeled_wells = 3;
        c.loader.workers = 2;
        c.optimizer.warmup_steps = 1;
        c.eval.seeds = vec![0, 1];
        c.validate().unwrap();
        c
    }

    #[test]
    fn stages_chain_and_enforce_order() {
        let cfg = tiny_config();
        let data = Dataset::synthetic(&cfg).unwrap();
        let train = data.wells_in(Split::Train);
        let tok = train_tokenizer(&cfg, &train, cfg.seed, &mut MetricsSink::none()).unwrap();
        assert_eq!(tok.metrics.len(), 5);
        let err = finetune(&tok.state, &cfg, &data, 0, &mut MetricsSink::none()).unwrap_err();
        assert!(matches!(err, PipelineError::StageOrderViolation { .. }));
        assert!(evaluate(&tok.state, &cfg, &data, &[0], Split::Test).is_err());
        let pre = pretrain(&tok.state, &cfg, &data, &mut MetricsSink::none(), None).unwrap();
        assert!(matches!(
            pretrain(&pre.state, &cfg, &data, &mut MetricsSink::none(), None),
            Err(PipelineError::StageOrderViolation { .. })
        ));
        // the tokenizer is frozen during pretraining
        let m = Model::from_state(&pre.state, &cfg, true, false, &mut stage_rng(0, 9)).unwrap();
        let t = Model::from_state(&tok.state, &cfg, false, false, &mut stage_rng(0, 9)).unwrap();
        assert_eq!(m.store.checksum("tokenizer."), t.store.checksum("tokenizer."));
        let ft = finetune(&pre.state, &cfg, &data, 0, &mut MetricsSink::none()).unwrap();
        let f = Model::from_state(&ft.state, &cfg, true, true, &mut stage_rng(0, 9)).unwrap();
        assert_eq!(m.store.checksum("backbone."), f.store.checksum("backbone."));
        let report = evaluate(&ft.state, &cfg, &data, &[0, 1], Split::Test).unwrap();
        assert_eq!(report.per_seed.len(), 2);
        assert_eq!(report.per_seed[0].poro_mse, report.per_seed[1].poro_mse);
    }

    #[test]
    fn vq_noscl_has_zero_contrastive_term() {
        let mut cfg = tiny_config();
        cfg.ablation = Ablation::VqNoscl;
        let data = Dataset::synthetic(&cfg).unwrap();
        let train = data.wells_in(Split::Train);
        let tok = train_tokenizer(&cfg, &train, cfg.seed, &mut MetricsSink::none()).unwrap();
        let pre = pretrain(&tok.state, &cfg, &data, &mut MetricsSink::none(), None).unwrap();
        assert!(pre.metrics.iter().all(|m| m.scl == 0.0));
        assert_eq!(pre.state.config.pretrain.alpha, 0.0);
    }

    #[test]
    fn hidden_states_cover_every_token() {
        let cfg = tiny_config();
        let data = Dataset::synthetic(&cfg).unwrap();
        let model = Model::fresh(&cfg, true, true, &mut stage_rng(1, 1)).unwrap();
        let w = data.wells_in(Split::Test)[0];
        let enc = encode_for_eval(&model, w).unwrap();
        assert_eq!(enc.hidden.nrows(), enc.tokens.len());
        assert!(enc.tokens.len() % cfg.pretrain.seq_len != 0);
        assert!(enc.hidden.iter().all(|v| v.is_finite()));
        let preds = predict_well(&model, w, &enc);
        assert_eq!(preds.len(), w.len());
    }
}
