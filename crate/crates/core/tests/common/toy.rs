//! Toy models (K=16, d=8, two backbone layers) and finite-difference
//! checks of the three training objectives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wlfm::corpus::{extract_patches, generate_synthetic_corpus, normalize_well, Patch, SynthConfig};
use wlfm::finetune::{LabeledBatch, MultiTaskWeights, TaskHeads};
use wlfm::graph::{ContrastSet, GaussianPrior, Graph};
use wlfm::nn::{normal_init, ParamStore};
use wlfm::pretrain::{make_block_mask, Backbone, PretrainBatch, PretrainConfig, TokenSequence};
use wlfm::tokenizer::{QuantizeMode, Tokenizer, TokenizerConfig};

use super::{finite_difference_check, FdCheck};

pub const K: usize = 16;
pub const D: usize = 8;
pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared on absolute error.
pub const FD_FLOOR: f64 = 1e-5;

pub fn tokenizer_config() -> TokenizerConfig {
    TokenizerConfig {
        codebook_size: K,
        latent_dim: D,
        patch_len: 8,
        stride: 4,
        conv_layers: 2,
        kernel: 3,
        curve_emb_dim: 2,
        depth_pos_dim: 4,
        ..TokenizerConfig::default()
    }
}

pub fn pretrain_config() -> PretrainConfig {
    PretrainConfig {
        layers: 2,
        heads: 2,
        d_model: 8,
        ffn_dim: 16,
        proj_dim: 4,
        depth_pos_dim: 4,
        seq_len: 6,
        mask_ratio: 0.34,
        block_length: 2,
        ..PretrainConfig::default()
    }
}

/// Normalized patches from a short synthetic corpus, with one channel
/// knocked out in every third patch.
pub fn patches(seed: u64, n: usize) -> Vec<Patch> {
    let cfg = SynthConfig {
        n_wells: 2,
        depth_range: (1000.0, 1010.0),
        sample_spacing: 0.25,
        seed,
        ..SynthConfig::default()
    };
    let corpus = generate_synthetic_corpus(&cfg).expect("corpus");
    let tc = tokenizer_config();
    let mut out: Vec<Patch> = corpus
        .wells
        .iter()
        .flat_map(|w| extract_patches(&normalize_well(w).expect("normalize"), tc.patch_len, tc.stride))
        .take(n)
        .collect();
    for (i, p) in out.iter_mut().enumerate() {
        if i % 3 == 2 {
            let c = i % p.channels();
            p.missing_mask[c] = true;
            p.values.row_mut(c).fill(0.0);
        }
    }
    out
}

/// VQ objective of the tokenizer under the frozen-offset surrogate, whose
/// exact gradient is the straight-through gradient at the base point.
pub fn vq_check(seed: u64, samples: usize) -> FdCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut tok = Tokenizer::new(tokenizer_config(), &mut store, &mut rng).expect("tokenizer");
    let ps = patches(seed, 6);
    tok.init_codebook(&store, &ps, &mut rng).expect("codebook");
    let refs: Vec<&Patch> = ps.iter().collect();
    let mode = {
        let mut g = Graph::new(&store);
        let f = tok.vq_forward(&mut g, &refs, &refs, &QuantizeMode::StraightThrough).expect("forward");
        let z_e = g.value(f.z_e).clone();
        QuantizeMode::FrozenOffset {
            offsets: &f.quantized - &z_e,
            indices: f.indices,
        }
    };
    let loss = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let f = tok.vq_forward(&mut g, &refs, &refs, &mode).expect("forward");
        g.scalar(f.total)
    };
    let grads = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let f = tok.vq_forward(&mut g, &refs, &refs, &mode).expect("forward");
        g.backward(f.total)
    };
    finite_difference_check(&mut store, loss, grads, |n| n.starts_with("tokenizer."), samples, FD_STEP, FD_FLOOR, seed)
}

fn sequences(rng: &mut impl Rng, b: usize, t: usize, continuous: bool) -> Vec<TokenSequence> {
    (0..b)
        .map(|i| TokenSequence {
            well_id: format!("w{i}"),
            start: 0,
            token_indices: (0..t).map(|_| rng.gen_range(0..K)).collect(),
            rel_depths: (0..t).map(|j| (i as f64 * 0.1 + j as f64 * 0.05).min(1.0)).collect(),
            latents: continuous.then(|| normal_init(rng, t, D, 1.0)),
            targets: None,
        })
        .collect()
}

/// `MTM + α·SCL` (or the latent-regression variant) over backbone
/// parameters.
pub fn pretrain_check(seed: u64, samples: usize, continuous: bool) -> FdCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let pc = pretrain_config();
    let backbone = Backbone::new(pc.clone(), K, D, continuous, &mut store, &mut rng).expect("backbone");
    let t = pc.seq_len;
    let seqs = sequences(&mut rng, 2, t, continuous);
    let masks = (0..2)
        .map(|_| make_block_mask(t, pc.mask_ratio, pc.block_length, &mut rng).positions)
        .collect();
    let batch = PretrainBatch {
        seqs,
        masks,
        contrast: ContrastSet {
            pairs: vec![(0, t + 1), (3, t + 4)],
            negatives: vec![vec![2, t + 3, t + 5], vec![1, t, 5]],
        },
    };
    let alpha = 0.5;
    let loss = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let o = backbone.objective(&mut g, &batch, alpha).expect("objective");
        g.scalar(o.total)
    };
    let grads = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let o = backbone.objective(&mut g, &batch, alpha).expect("objective");
        g.backward(o.total)
    };
    finite_difference_check(&mut store, loss, grads, |n| n.starts_with("backbone."), samples, FD_STEP, FD_FLOOR, seed)
}

/// Multi-task objective through an unfrozen backbone into the heads.
pub fn multitask_check(seed: u64, samples: usize) -> FdCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let pc = pretrain_config();
    let backbone = Backbone::new(pc.clone(), K, D, false, &mut store, &mut rng).expect("backbone");
    let prior = GaussianPrior {
        means: vec![0.08, 0.24, 0.12],
        stds: vec![0.03, 0.04, 0.04],
    };
    let recon_width = 5;
    let heads = TaskHeads::new(&mut store, pc.d_model, 3, recon_width, prior, &mut rng).expect("heads");
    // The porosity head starts feature-blind; give it weights so the
    // porosity path reaches the backbone.
    *store.get_mut(heads.poro.w) = normal_init(&mut rng, pc.d_model, 1, 0.5);
    let t = pc.seq_len;
    let seqs = sequences(&mut rng, 2, t, false);
    let n = 9;
    let batch = LabeledBatch {
        position_rows: (0..n).map(|_| rng.gen_range(0..2 * t)).collect(),
        poro: (0..n).map(|_| rng.gen_range(0.02..0.35)).collect(),
        litho: (0..n).map(|_| rng.gen_range(0..3)).collect(),
        recon_target: normal_init(&mut rng, 2 * t, recon_width, 1.0),
        recon_mask: (0..recon_width).flat_map(|c| [(1, c), (t + 2, c)]).collect(),
    };
    let w = MultiTaskWeights {
        lambda_r: 0.7,
        lambda_p: 1.3,
        lambda_l: 0.9,
        gamma: 0.4,
    };
    let build = |g: &mut Graph| {
        let masks = vec![Vec::new(); seqs.len()];
        let h = backbone.forward(g, &seqs, &masks).expect("forward");
        heads.objective(g, h, &batch, &w).expect("objective").total
    };
    let loss = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let total = build(&mut g);
        g.scalar(total)
    };
    let grads = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let total = build(&mut g);
        g.backward(total)
    };
    let select = |n: &str| {
        (n.starts_with("backbone.") || n.starts_with("heads."))
            && !n.starts_with("backbone.mtm_head")
            && !n.starts_with("backbone.proj")
    };
    finite_difference_check(&mut store, loss, grads, select, samples, FD_STEP, FD_FLOOR, seed)
}
