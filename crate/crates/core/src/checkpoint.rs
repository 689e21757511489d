//! `ModelState` checkpoint container.
//!
//! Layout: the 8-byte magic `WLFMCKPT`, a little-endian u64 header length,
//! a JSON header (stage, step, seed, resolved config, codebook bookkeeping,
//! tensor directory) and then the tensors as little-endian f32, in
//! directory order. Offsets in the directory are byte offsets into the
//! tensor section.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::TrainConfig;
use crate::corpus::FORMAT_VERSION;
use crate::nn::ParamStore;
use crate::tokenizer::Codebook;

const MAGIC: &[u8; 8] = b"WLFMCKPT";

const CODEBOOK_VECTORS: &str = "codebook.vectors";
const CODEBOOK_COUNTS: &str = "codebook.ema_counts";
const CODEBOOK_SUMS: &str = "codebook.ema_sums";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("unsupported checkpoint format_version {0}")]
    UnsupportedVersion(u32),
    #[error("tensor `{0}` missing")]
    MissingTensor(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: [usize; 2],
        found: [usize; 2],
    },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Tokenizer,
    Pretrained,
    Finetuned,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Tokenizer => "tokenizer",
            Stage::Pretrained => "pretrained",
            Stage::Finetuned => "finetuned",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn from_array(name: &str, a: &Array2<f64>) -> Self {
        Tensor {
            name: name.to_string(),
            shape: [a.nrows(), a.ncols()],
            data: a.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_array(&self) -> Array2<f64> {
        let data = self.data.iter().map(|&v| v as f64).collect();
        Array2::from_shape_vec((self.shape[0], self.shape[1]), data).expect("shape matches data")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookMeta {
    pub steps_since_use: Vec<u64>,
    pub usage: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    stage: Stage,
    step: u64,
    seed: u64,
    config: TrainConfig,
    codebook: Option<CodebookMeta>,
    scalars: BTreeMap<String, f64>,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to rebuild a model at a later stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub format_version: u32,
    pub stage: Stage,
    pub step: u64,
    pub seed: u64,
    pub config: TrainConfig,
    pub codebook: Option<CodebookMeta>,
    /// Stage outputs that are not tensors (e.g. calibrated thresholds).
    pub scalars: BTreeMap<String, f64>,
    pub tensors: Vec<Tensor>,
}

impl ModelState {
    /// Snapshot of every parameter in `store` (insertion order), plus the
    /// codebook when given.
    pub fn capture(
        stage: Stage,
        step: u64,
        seed: u64,
        config: &TrainConfig,
        store: &ParamStore,
        codebook: Option<&Codebook>,
    ) -> Self {
        let mut tensors: Vec<Tensor> = store
            .ids()
            .map(|id| Tensor::from_array(store.name(id), store.get(id)))
            .collect();
        let meta = codebook.map(|cb| {
            tensors.push(Tensor::from_array(CODEBOOK_VECTORS, &cb.vectors));
            let counts = Array2::from_shape_vec((1, cb.ema_counts.len()), cb.ema_counts.clone()).expect("row");
            tensors.push(Tensor::from_array(CODEBOOK_COUNTS, &counts));
            tensors.push(Tensor::from_array(CODEBOOK_SUMS, &cb.ema_sums));
            CodebookMeta {
                steps_since_use: cb.steps_since_use.clone(),
                usage: cb.usage.clone(),
            }
        });
        ModelState {
            format_version: FORMAT_VERSION,
            stage,
            step,
            seed,
            config: config.clone(),
            codebook: meta,
            scalars: BTreeMap::new(),
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Overwrites every parameter of `store` whose name starts with one of
    /// `prefixes` with the stored tensor. Each such parameter must be
    /// present with a matching shape.
    pub fn restore(&self, store: &mut ParamStore, prefixes: &[&str]) -> Result<usize, CheckpointError> {
        let ids: Vec<_> = store.ids().collect();
        let mut restored = 0;
        for id in ids {
            let name = store.name(id).to_string();
            if !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            let t = self.tensor(&name).ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
            let target = store.get_mut(id);
            let expected = [target.nrows(), target.ncols()];
            if t.shape != expected {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected,
                    found: t.shape,
                });
            }
            *target = t.to_array();
            restored += 1;
        }
        Ok(restored)
    }

    /// Rebuilds the codebook using decay and dead threshold from the
    /// embedded config.
    pub fn codebook(&self) -> Result<Codebook, CheckpointError> {
        let meta = self
            .codebook
            .as_ref()
            .ok_or_else(|| CheckpointError::MissingTensor(CODEBOOK_VECTORS.into()))?;
        let get = |n: &str| self.tensor(n).ok_or_else(|| CheckpointError::MissingTensor(n.into()));
        let vectors = get(CODEBOOK_VECTORS)?.to_array();
        let counts = get(CODEBOOK_COUNTS)?.to_array();
        let sums = get(CODEBOOK_SUMS)?.to_array();
        let k = vectors.nrows();
        if counts.len() != k || sums.dim() != vectors.dim() || meta.usage.len() != k || meta.steps_since_use.len() != k {
            return Err(CheckpointError::Header("codebook tensors disagree in size".into()));
        }
        let tc = &self.config.tokenizer;
        let mut cb = Codebook::new(vectors, tc.ema_decay, tc.dead_threshold);
        cb.ema_counts = counts.iter().copied().collect();
        cb.ema_sums = sums;
        cb.steps_since_use = meta.steps_since_use.clone();
        cb.usage = meta.usage.clone();
        Ok(cb)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let entries = self
            .tensors
            .iter()
            .map(|t| {
                let len = t.data.len() as u64 * 4;
                let e = TensorEntry {
                    name: t.name.clone(),
                    shape: t.shape,
                    offset,
                    len,
                };
                offset += len;
                e
            })
            .collect();
        let header = Header {
            format_version: self.format_version,
            stage: self.stage,
            step: self.step,
            seed: self.seed,
            config: self.config.clone(),
            codebook: self.codebook.clone(),
            scalars: self.scalars.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 16 {
            return Err(CheckpointError::Truncated("missing preamble".into()));
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() < hlen {
            return Err(CheckpointError::Truncated("header".into()));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| CheckpointError::Header(e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(header.format_version));
        }
        let data = &body[hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut expected_offset = 0u64;
        for e in header.tensors {
            let n = e.shape[0] * e.shape[1];
            if e.len != n as u64 * 4 || e.offset != expected_offset {
                return Err(CheckpointError::Header(format!("inconsistent directory entry for `{}`", e.name)));
            }
            let start = e.offset as usize;
            let end = start + e.len as usize;
            if end > data.len() {
                return Err(CheckpointError::Truncated(format!("tensor `{}`", e.name)));
            }
            let values = data[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            expected_offset = end as u64;
            tensors.push(Tensor {
                name: e.name,
                shape: e.shape,
                data: values,
            });
        }
        if expected_offset as usize != data.len() {
            return Err(CheckpointError::Header("trailing bytes after tensor data".into()));
        }
        Ok(ModelState {
            format_version: header.format_version,
            stage: header.stage,
            step: header.step,
            seed: header.seed,
            config: header.config,
            codebook: header.codebook,
            scalars: header.scalars,
            tensors,
        })
    }

    /// Writes to a sibling temp file, syncs it and renames over `path`, so
    /// readers see either the previous file or the complete new one.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = self.to_bytes();
        let file_name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let tmp = path.with_file_name(format!(".{file_name}.tmp"));
        {
            let mut f = std::fs::File::create(&tmp).map_err(io(&tmp))?;
            f.write_all(&bytes).map_err(io(&tmp))?;
            f.sync_all().map_err(io(&tmp))?;
        }
        std::fs::rename(&tmp, path).map_err(io(path))
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(io(path))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_state() -> ModelState {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.add("a.w", crate::nn::normal_init(&mut rng, 3, 4, 1.0));
        store.add("b.bias", Array2::zeros((1, 5)));
        let mut cb = Codebook::new(crate::nn::normal_init(&mut rng, 4, 2, 1.0), 0.99, 10);
        cb.usage = vec![1, 2, 3, 4];
        cb.steps_since_use = vec![0, 5, 0, 7];
        let mut s = ModelState::capture(Stage::Pretrained, 17, 9, &TrainConfig::default(), &store, Some(&cb));
        s.scalars.insert("score_threshold".into(), 0.123456789);
        s
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let s = sample_state();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        s.save(&p).unwrap();
        let first = std::fs::read(&p).unwrap();
        let back = ModelState::load(&p).unwrap();
        assert_eq!(back, s);
        back.save(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);
        assert!(!dir.path().join(".m.ckpt.tmp").exists());
    }

    #[test]
    fn restore_and_codebook() {
        let s = sample_state();
        let mut store = ParamStore::new();
        let w = store.add("a.w", Array2::zeros((3, 4)));
        store.add("c.other", Array2::zeros((2, 2)));
        assert_eq!(s.restore(&mut store, &["a."]).unwrap(), 1);
        assert_eq!(store.get(w), &s.tensor("a.w").unwrap().to_array());
        assert!(matches!(s.restore(&mut store, &["c."]), Err(CheckpointError::MissingTensor(_))));
        let cb = s.codebook().unwrap();
        assert_eq!(cb.usage, vec![1, 2, 3, 4]);
        assert_eq!(cb.steps_since_use, vec![0, 5, 0, 7]);
        let mut bad = ParamStore::new();
        bad.add("a.w", Array2::zeros((4, 3)));
        assert!(matches!(s.restore(&mut bad, &["a."]), Err(CheckpointError::ShapeMismatch { .. })));
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = sample_state().to_bytes();
        assert!(matches!(ModelState::from_bytes(b"NOTACKPT\0\0\0\0\0\0\0\0"), Err(CheckpointError::BadMagic)));
        assert!(ModelState::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(ModelState::from_bytes(&extra).is_err());
    }
}
