//! Well-log data model, CSV ingestion, per-well normalization, patch
//! extraction, well-level splits and the seeded synthetic corpus.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

/// Floor applied to per-well standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

const SPACING_RTOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: no DEPTH column")]
    MissingDepthColumn { path: String },
    #[error("{path}: depth not strictly increasing at row {row}")]
    NonMonotonicDepth { path: String, row: usize },
    #[error("{path}: depth spacing not uniform at row {row}")]
    NonUniformSpacing { path: String, row: usize },
    #[error("{path}: unknown curve name `{name}`")]
    UnknownCurveName { path: String, name: String },
    #[error("{path}: row {row} has {got} fields, header has {expected}")]
    RaggedColumns {
        path: String,
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("{path}: empty well")]
    EmptyWell { path: String },
    #[error("{path}: row {row}: cannot parse `{value}`")]
    Parse { path: String, row: usize, value: String },
    #[error("well {well}: porosity {value} outside [0, 1]")]
    PorosityOutOfRange { well: String, value: f64 },
    #[error("well {well}: non-finite value in {curve}")]
    NonFinite { well: String, curve: String },
    #[error("well {well}: resistivity must be positive for log transform (found {value})")]
    NonPositiveResistivity { well: String, value: f64 },
    #[error("invalid transition matrix: {0}")]
    InvalidTransitionMatrix(String),
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("split ratios must be nonnegative and sum to 1 (got {0:?})")]
    BadRatios((f64, f64, f64)),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error on {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub(crate) fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> CorpusError + '_ {
    move |source| CorpusError::Csv {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CurveKind {
    #[serde(rename = "GR")]
    Gr,
    #[serde(rename = "SP")]
    Sp,
    #[serde(rename = "AC")]
    Ac,
    #[serde(rename = "DEN")]
    Den,
    #[serde(rename = "RT")]
    Rt,
}

impl CurveKind {
    /// Canonical channel order used for every patch.
    pub const ALL: [CurveKind; 5] = [CurveKind::Gr, CurveKind::Sp, CurveKind::Ac, CurveKind::Den, CurveKind::Rt];

    pub fn name(self) -> &'static str {
        match self {
            CurveKind::Gr => "GR",
            CurveKind::Sp => "SP",
            CurveKind::Ac => "AC",
            CurveKind::Den => "DEN",
            CurveKind::Rt => "RT",
        }
    }

    /// Whether the curve is log10-transformed before z-scoring.
    pub fn log_transform(self) -> bool {
        matches!(self, CurveKind::Rt)
    }

    pub fn channel(self) -> usize {
        self as usize
    }
}

impl fmt::Display for CurveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CurveKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CurveKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| s.to_string())
    }
}

/// Constants that map a normalized curve back to physical units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveNorm {
    pub mean: f64,
    pub std: f64,
    pub log10: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub kind: CurveKind,
    pub values: Vec<f64>,
    /// Present once the curve has been normalized.
    pub norm: Option<CurveNorm>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerTop {
    pub depth: f64,
    pub layer_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WellLog {
    pub well_id: String,
    pub depths: Vec<f64>,
    /// Sorted by `CurveKind`, at most one curve per kind.
    pub curves: Vec<Curve>,
    pub litho: Option<Vec<usize>>,
    pub porosity: Option<Vec<f64>>,
    pub layer_tops: Vec<LayerTop>,
}

impl WellLog {
    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }

    pub fn curve(&self, kind: CurveKind) -> Option<&Curve> {
        self.curves.iter().find(|c| c.kind == kind)
    }

    pub fn top(&self) -> f64 {
        self.depths[0]
    }

    pub fn bottom(&self) -> f64 {
        *self.depths.last().expect("nonempty well")
    }

    /// Relative depth in [0, 1] of an absolute depth within this well.
    pub fn rel_depth(&self, depth: f64) -> f64 {
        let span = self.bottom() - self.top();
        if span <= 0.0 {
            0.5
        } else {
            ((depth - self.top()) / span).clamp(0.0, 1.0)
        }
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let path = self.well_id.clone();
        let n = self.depths.len();
        if n == 0 {
            return Err(CorpusError::EmptyWell { path });
        }
        check_depths(&self.depths, &path)?;
        for c in &self.curves {
            if c.values.len() != n {
                return Err(CorpusError::RaggedColumns {
                    path,
                    row: c.values.len(),
                    got: c.values.len(),
                    expected: n,
                });
            }
        }
        if let Some(l) = &self.litho {
            if l.len() != n {
                return Err(CorpusError::RaggedColumns {
                    path,
                    row: l.len(),
                    got: l.len(),
                    expected: n,
                });
            }
        }
        if let Some(p) = &self.porosity {
            if p.len() != n {
                return Err(CorpusError::RaggedColumns {
                    path,
                    row: p.len(),
                    got: p.len(),
                    expected: n,
                });
            }
            if let Some(&bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(CorpusError::PorosityOutOfRange {
                    well: self.well_id.clone(),
                    value: bad,
                });
            }
        }
        Ok(())
    }

    /// Inverts normalization for one curve using the recorded constants.
    pub fn denormalized(&self, kind: CurveKind) -> Option<Vec<f64>> {
        let c = self.curve(kind)?;
        let Some(norm) = c.norm else {
            return Some(c.values.clone());
        };
        Some(
            c.values
                .iter()
                .map(|&z| {
                    let v = z * norm.std + norm.mean;
                    if norm.log10 {
                        10f64.powf(v)
                    } else {
                        v
                    }
                })
                .collect(),
        )
    }

    pub fn is_normalized(&self) -> bool {
        self.curves.iter().all(|c| c.norm.is_some())
    }
}

fn check_depths(depths: &[f64], path: &str) -> Result<(), CorpusError> {
    for i in 1..depths.len() {
        if depths[i] <= depths[i - 1] {
            return Err(CorpusError::NonMonotonicDepth {
                path: path.to_string(),
                row: i,
            });
        }
    }
    if depths.len() > 2 {
        let step = depths[1] - depths[0];
        for i in 2..depths.len() {
            let d = depths[i] - depths[i - 1];
            if (d - step).abs() > SPACING_RTOL * step.abs().max(depths[i].abs()) {
                return Err(CorpusError::NonUniformSpacing {
                    path: path.to_string(),
                    row: i,
                });
            }
        }
    }
    Ok(())
}

fn parse_f64(s: &str, path: &Path, row: usize) -> Result<f64, CorpusError> {
    s.trim().parse::<f64>().map_err(|_| CorpusError::Parse {
        path: path.display().to_string(),
        row,
        value: s.to_string(),
    })
}

enum Column {
    Depth,
    Curve(CurveKind),
    Litho,
    Poro,
}

/// Reads a well CSV (`DEPTH,GR,SP,AC,DEN,RT[,LITHO][,PORO]`, absent
/// curves omitted). Layer tops are read from an optional sidecar
/// `<stem>.tops.csv` with columns `depth,layer_id`.
pub fn load_well(path: &Path) -> Result<WellLog, CorpusError> {
    let pstr = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err(path))?;
    let headers = rdr.headers().map_err(csv_err(path))?.clone();
    let mut cols = Vec::with_capacity(headers.len());
    for h in headers.iter() {
        let col = match h.to_ascii_uppercase().as_str() {
            "DEPTH" => Column::Depth,
            "LITHO" => Column::Litho,
            "PORO" => Column::Poro,
            other => Column::Curve(other.parse().map_err(|name| CorpusError::UnknownCurveName {
                path: pstr.clone(),
                name,
            })?),
        };
        cols.push(col);
    }
    if !cols.iter().any(|c| matches!(c, Column::Depth)) {
        return Err(CorpusError::MissingDepthColumn { path: pstr });
    }
    let mut depths = Vec::new();
    let mut curves: BTreeMap<CurveKind, Vec<f64>> = BTreeMap::new();
    let mut litho = Vec::new();
    let mut poro = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        if rec.len() != cols.len() {
            return Err(CorpusError::RaggedColumns {
                path: pstr,
                row: row + 1,
                got: rec.len(),
                expected: cols.len(),
            });
        }
        for (field, col) in rec.iter().zip(&cols) {
            match col {
                Column::Depth => depths.push(parse_f64(field, path, row + 1)?),
                Column::Curve(k) => curves.entry(*k).or_default().push(parse_f64(field, path, row + 1)?),
                Column::Litho => litho.push(field.trim().parse::<usize>().map_err(|_| CorpusError::Parse {
                    path: pstr.clone(),
                    row: row + 1,
                    value: field.to_string(),
                })?),
                Column::Poro => poro.push(parse_f64(field, path, row + 1)?),
            }
        }
    }
    if depths.is_empty() {
        return Err(CorpusError::EmptyWell { path: pstr });
    }
    check_depths(&depths, &pstr)?;
    let well_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| pstr.clone());
    let has_litho = cols.iter().any(|c| matches!(c, Column::Litho));
    let has_poro = cols.iter().any(|c| matches!(c, Column::Poro));
    let tops_path = tops_sidecar(path);
    let layer_tops = if tops_path.exists() {
        read_tops(&tops_path)?
    } else {
        Vec::new()
    };
    let well = WellLog {
        well_id,
        depths,
        curves: curves
            .into_iter()
            .map(|(kind, values)| Curve {
                kind,
                values,
                norm: None,
            })
            .collect(),
        litho: has_litho.then_some(litho),
        porosity: has_poro.then_some(poro),
        layer_tops,
    };
    well.validate()?;
    Ok(well)
}

pub fn tops_sidecar(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.tops.csv"))
}

fn read_tops(path: &Path) -> Result<Vec<LayerTop>, CorpusError> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut tops = Vec::new();
    for rec in rdr.deserialize() {
        tops.push(rec.map_err(csv_err(path))?);
    }
    Ok(tops)
}

/// Writes a well in the CSV layout read by [`load_well`], plus the
/// layer-tops sidecar when the well has any.
pub fn write_well(well: &WellLog, path: &Path) -> Result<(), CorpusError> {
    let mut out = String::new();
    out.push_str("DEPTH");
    for c in &well.curves {
        out.push(',');
        out.push_str(c.kind.name());
    }
    if well.litho.is_some() {
        out.push_str(",LITHO");
    }
    if well.porosity.is_some() {
        out.push_str(",PORO");
    }
    out.push('\n');
    for i in 0..well.len() {
        out.push_str(&well.depths[i].to_string());
        for c in &well.curves {
            out.push(',');
            out.push_str(&c.values[i].to_string());
        }
        if let Some(l) = &well.litho {
            out.push(',');
            out.push_str(&l[i].to_string());
        }
        if let Some(p) = &well.porosity {
            out.push(',');
            out.push_str(&p[i].to_string());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))?;
    if !well.layer_tops.is_empty() {
        let tp = tops_sidecar(path);
        let mut w = csv::Writer::from_path(&tp).map_err(csv_err(&tp))?;
        for t in &well.layer_tops {
            w.serialize(t).map_err(csv_err(&tp))?;
        }
        w.flush().map_err(io_err(&tp))?;
    }
    Ok(())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-well z-scoring with population statistics; log-transformed kinds
/// pass through log10 first. Already-normalized curves are left as is.
pub fn normalize_well(well: &WellLog) -> Result<WellLog, CorpusError> {
    let mut out = well.clone();
    for c in out.curves.iter_mut() {
        if c.norm.is_some() {
            continue;
        }
        if c.values.iter().any(|v| !v.is_finite()) {
            return Err(CorpusError::NonFinite {
                well: well.well_id.clone(),
                curve: c.kind.to_string(),
            });
        }
        let log10 = c.kind.log_transform();
        if log10 {
            if let Some(&bad) = c.values.iter().find(|&&v| v <= 0.0) {
                return Err(CorpusError::NonPositiveResistivity {
                    well: well.well_id.clone(),
                    value: bad,
                });
            }
            c.values.iter_mut().for_each(|v| *v = v.log10());
        }
        let (mean, std) = mean_std(&c.values);
        let std = std.max(STD_FLOOR);
        c.values.iter_mut().for_each(|v| *v = (*v - mean) / std);
        c.norm = Some(CurveNorm { mean, std, log10 });
    }
    Ok(out)
}

/// A C×L window over the canonical channel set [`CurveKind::ALL`].
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub well_id: String,
    pub start_index: usize,
    pub values: Array2<f64>,
    pub rel_depth: f64,
    pub curve_kinds: Vec<CurveKind>,
    pub missing_mask: Vec<bool>,
}

impl Patch {
    pub fn channels(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }

    pub fn present_channels(&self) -> impl Iterator<Item = usize> + '_ {
        self.missing_mask.iter().enumerate().filter(|(_, m)| !**m).map(|(c, _)| c)
    }
}

/// Patches start at 0, s, 2s, … while start + L ≤ n. Wells shorter than
/// L yield nothing.
pub fn extract_patches(well: &WellLog, len: usize, stride: usize) -> Vec<Patch> {
    assert!(len >= 1 && stride >= 1, "patch length and stride must be positive");
    let n = well.len();
    if n < len {
        return Vec::new();
    }
    let kinds = CurveKind::ALL.to_vec();
    let mut out = Vec::with_capacity((n - len) / stride + 1);
    let mut start = 0;
    while start + len <= n {
        let mut values = Array2::zeros((kinds.len(), len));
        let mut missing = vec![true; kinds.len()];
        for c in &well.curves {
            let ch = c.kind.channel();
            missing[ch] = false;
            for t in 0..len {
                values[[ch, t]] = c.values[start + t];
            }
        }
        let center = 0.5 * (well.depths[start] + well.depths[start + len - 1]);
        out.push(Patch {
            well_id: well.well_id.clone(),
            start_index: start,
            values,
            rel_depth: well.rel_depth(center),
            curve_kinds: kinds.clone(),
            missing_mask: missing,
        });
        start += stride;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub mean: f64,
    pub std: f64,
}

impl Response {
    pub const fn new(mean: f64, std: f64) -> Self {
        Response { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lithology {
    pub name: String,
    /// Responses in `CurveKind::ALL` order. RT is given in ohm·m for the
    /// mean and in log10 units for the std; its noise is applied in log10
    /// space.
    pub curves: [Response; 5],
    pub porosity: Response,
}

/// Parameters of the synthetic layer-cake basin.
///
/// A basin-wide Markov chain over lithologies produces a sequence of beds.
/// Every well samples the same bed sequence with per-bed thickness jitter
/// and occasional lateral facies changes, so relative depth and layer ids
/// align across wells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub format_version: u32,
    pub n_wells: usize,
    pub depth_range: (f64, f64),
    pub sample_spacing: f64,
    pub lithology_count: usize,
    pub transition_matrix: Vec<Vec<f64>>,
    pub lithologies: Vec<Lithology>,
    /// Bed thickness range in meters, drawn uniformly per basin bed.
    pub bed_thickness: (f64, f64),
    /// Relative std of the per-well thickness perturbation of each bed.
    pub thickness_jitter: f64,
    /// Probability that a well redraws a bed's lithology.
    pub lateral_variability: f64,
    /// White-noise std as a multiple of each response std.
    pub noise_std: f64,
    /// Drift amplitude as a multiple of each response std.
    pub drift_amplitude: f64,
    /// Per-well multiplicative gain jitter on every curve (tool bias).
    pub tool_gain_jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            format_version: FORMAT_VERSION,
            n_wells: 20,
            depth_range: (1000.0, 1200.0),
            sample_spacing: 0.125,
            lithology_count: 3,
            transition_matrix: vec![
                vec![0.50, 0.30, 0.20],
                vec![0.40, 0.40, 0.20],
                vec![0.35, 0.25, 0.40],
            ],
            lithologies: default_lithologies(),
            bed_thickness: (2.0, 8.0),
            thickness_jitter: 0.2,
            lateral_variability: 0.1,
            noise_std: 0.5,
            drift_amplitude: 1.0,
            tool_gain_jitter: 0.05,
            seed: 42,
        }
    }
}

pub fn default_lithologies() -> Vec<Lithology> {
    vec![
        Lithology {
            name: "shale".into(),
            curves: [
                Response::new(105.0, 8.0),
                Response::new(-5.0, 4.0),
                Response::new(100.0, 6.0),
                Response::new(2.50, 0.04),
                Response::new(5.0, 0.15),
            ],
            porosity: Response::new(0.08, 0.03),
        },
        Lithology {
            name: "sand".into(),
            curves: [
                Response::new(45.0, 8.0),
                Response::new(-45.0, 6.0),
                Response::new(85.0, 5.0),
                Response::new(2.30, 0.04),
                Response::new(30.0, 0.2),
            ],
            porosity: Response::new(0.24, 0.04),
        },
        Lithology {
            name: "carbonate".into(),
            curves: [
                Response::new(25.0, 6.0),
                Response::new(-20.0, 5.0),
                Response::new(55.0, 4.0),
                Response::new(2.68, 0.03),
                Response::new(300.0, 0.25),
            ],
            porosity: Response::new(0.12, 0.04),
        },
    ]
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let k = self.lithology_count;
        if k == 0 || self.lithologies.len() != k {
            return Err(CorpusError::InvalidConfig(format!(
                "lithology_count {k} but {} lithologies given",
                self.lithologies.len()
            )));
        }
        if self.transition_matrix.len() != k || self.transition_matrix.iter().any(|r| r.len() != k) {
            return Err(CorpusError::InvalidTransitionMatrix(format!("expected {k}×{k}")));
        }
        for (i, row) in self.transition_matrix.iter().enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(CorpusError::InvalidTransitionMatrix(format!("row {i} has entries outside [0,1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(CorpusError::InvalidTransitionMatrix(format!("row {i} sums to {s}")));
            }
        }
        let stds_ok = self
            .lithologies
            .iter()
            .all(|l| l.porosity.std >= 0.0 && l.curves.iter().all(|r| r.std >= 0.0));
        if !stds_ok || self.noise_std < 0.0 || self.drift_amplitude < 0.0 || self.thickness_jitter < 0.0 {
            return Err(CorpusError::InvalidConfig("standard deviations must be nonnegative".into()));
        }
        if self.lithologies.iter().any(|l| l.curves[CurveKind::Rt.channel()].mean <= 0.0) {
            return Err(CorpusError::InvalidConfig("RT means must be positive".into()));
        }
        let (lo, hi) = self.depth_range;
        if !(hi > lo) || !(self.sample_spacing > 0.0) {
            return Err(CorpusError::InvalidConfig("empty depth range or nonpositive spacing".into()));
        }
        let (t0, t1) = self.bed_thickness;
        if !(t0 > 0.0 && t1 >= t0) {
            return Err(CorpusError::InvalidConfig("bed thickness range must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lateral_variability) {
            return Err(CorpusError::InvalidConfig("lateral_variability must lie in [0,1]".into()));
        }
        Ok(())
    }

    pub fn samples_per_well(&self) -> usize {
        let (lo, hi) = self.depth_range;
        ((hi - lo) / self.sample_spacing).floor() as usize + 1
    }

    pub fn porosity_priors(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.lithologies.iter().map(|l| l.porosity.mean).collect(),
            self.lithologies.iter().map(|l| l.porosity.std.max(1e-3)).collect(),
        )
    }
}

fn draw_next(rng: &mut impl Rng, row: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (j, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub wells: Vec<WellLog>,
    pub manifest: Manifest,
}

/// Generates the corpus. Deterministic given `cfg`; each well draws from
/// its own RNG stream so well `i` does not depend on `n_wells`.
pub fn generate_synthetic_corpus(cfg: &SynthConfig) -> Result<SyntheticCorpus, CorpusError> {
    cfg.validate()?;
    let (lo, hi) = cfg.depth_range;
    let span = hi - lo;
    let mut basin_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    basin_rng.set_stream(0);
    // Enough beds for the thickest plausible well.
    let (t0, t1) = cfg.bed_thickness;
    let mut beds: Vec<(usize, f64)> = Vec::new();
    let mut total = 0.0;
    let mut lith = basin_rng.gen_range(0..cfg.lithology_count);
    while total < span * (2.0 + 4.0 * cfg.thickness_jitter) {
        let th = if t1 > t0 { basin_rng.gen_range(t0..t1) } else { t0 };
        beds.push((lith, th));
        total += th;
        lith = draw_next(&mut basin_rng, &cfg.transition_matrix[lith]);
    }

    let n = cfg.samples_per_well();
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut wells = Vec::with_capacity(cfg.n_wells);
    for w in 0..cfg.n_wells {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(w as u64 + 1);
        // Per-well bed sequence.
        let mut bed_top = Vec::with_capacity(beds.len());
        let mut bed_lith = Vec::with_capacity(beds.len());
        let mut d = lo;
        let mut prev: Option<usize> = None;
        for &(l, th) in &beds {
            let jitter = 1.0 + cfg.thickness_jitter * std_normal.sample(&mut rng);
            let thick = th * jitter.max(0.2);
            let lith = if rng.gen::<f64>() < cfg.lateral_variability {
                match prev {
                    Some(p) => draw_next(&mut rng, &cfg.transition_matrix[p]),
                    None => rng.gen_range(0..cfg.lithology_count),
                }
            } else {
                l
            };
            bed_top.push(d);
            bed_lith.push(lith);
            prev = Some(lith);
            d += thick;
            if d > hi {
                break;
            }
        }
        let gains: Vec<f64> = (0..5).map(|_| 1.0 + cfg.tool_gain_jitter * std_normal.sample(&mut rng)).collect();
        let periods: Vec<f64> = (0..5).map(|_| rng.gen_range(40.0..160.0)).collect();
        let phases: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        let bed_offsets: Vec<[f64; 5]> = bed_lith
            .iter()
            .map(|_| {
                let mut o = [0.0; 5];
                o.iter_mut().for_each(|v| *v = std_normal.sample(&mut rng));
                o
            })
            .collect();

        let mut depths = Vec::with_capacity(n);
        let mut litho = Vec::with_capacity(n);
        let mut poro = Vec::with_capacity(n);
        let mut curves: Vec<Vec<f64>> = vec![Vec::with_capacity(n); 5];
        let mut bed = 0usize;
        let mut tops = Vec::new();
        let mut last_lith: Option<usize> = None;
        for i in 0..n {
            let depth = lo + i as f64 * cfg.sample_spacing;
            while bed + 1 < bed_top.len() && bed_top[bed + 1] <= depth {
                bed += 1;
            }
            let l = bed_lith[bed];
            if last_lith != Some(l) {
                tops.push(LayerTop { depth, layer_id: bed });
                last_lith = Some(l);
            }
            let spec = &cfg.lithologies[l];
            let phi = (spec.porosity.mean + spec.porosity.std * std_normal.sample(&mut rng)).clamp(0.0, 1.0);
            for (ch, kind) in CurveKind::ALL.iter().enumerate() {
                let r = spec.curves[ch];
                let drift = cfg.drift_amplitude * r.std * (std::f64::consts::TAU * depth / periods[ch] + phases[ch]).sin();
                let noise = cfg.noise_std * r.std * std_normal.sample(&mut rng);
                let base = if kind.log_transform() { r.mean.log10() } else { r.mean };
                let mut v = base + 0.5 * r.std * bed_offsets[bed][ch] + drift + noise;
                match kind {
                    CurveKind::Den => v -= 1.65 * (phi - spec.porosity.mean),
                    CurveKind::Ac => v += 150.0 * (phi - spec.porosity.mean),
                    _ => {}
                }
                let v = if kind.log_transform() {
                    10f64.powf(v) * gains[ch]
                } else {
                    v * gains[ch]
                };
                curves[ch].push(v);
            }
            depths.push(depth);
            litho.push(l);
            poro.push(phi);
        }
        wells.push(WellLog {
            well_id: well_name(w),
            depths,
            curves: CurveKind::ALL
                .iter()
                .zip(curves)
                .map(|(&kind, values)| Curve {
                    kind,
                    values,
                    norm: None,
                })
                .collect(),
            litho: Some(litho),
            porosity: Some(poro),
            layer_tops: tops,
        });
    }
    let manifest = Manifest {
        entries: wells
            .iter()
            .map(|w| ManifestEntry {
                well_id: w.well_id.clone(),
                path: PathBuf::from(format!("{}.csv", w.well_id)),
                split: None,
            })
            .collect(),
    };
    Ok(SyntheticCorpus { wells, manifest })
}

pub fn well_name(i: usize) -> String {
    format!("well_{i:04}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub well_id: String,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn well_ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.well_id.clone()).collect()
    }

    pub fn read(path: &Path) -> Result<Self, CorpusError> {
        let mut rdr = csv::ReaderBuilder::new()
            .flexible(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(csv_err(path))?;
        let headers = rdr.headers().map_err(csv_err(path))?.clone();
        let find = |name: &str| headers.iter().position(|h| h == name);
        let (Some(id_col), Some(path_col)) = (find("well_id"), find("path")) else {
            return Err(CorpusError::Manifest("header must contain well_id,path".into()));
        };
        let split_col = find("split");
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut entries = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(csv_err(path))?;
            let get = |i: usize| rec.get(i).unwrap_or("").to_string();
            let p = PathBuf::from(get(path_col));
            let split = match split_col.map(get) {
                Some(s) if !s.is_empty() => Some(s.parse().map_err(|s| CorpusError::Manifest(format!("unknown split `{s}`")))?),
                _ => None,
            };
            entries.push(ManifestEntry {
                well_id: get(id_col),
                path: if p.is_absolute() { p } else { base.join(p) },
                split,
            });
        }
        Ok(Manifest { entries })
    }

    /// Writes the manifest with paths relative to `base` where possible.
    pub fn write(&self, path: &Path) -> Result<(), CorpusError> {
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut out = String::from("well_id,path,split\n");
        for e in &self.entries {
            let rel = e.path.strip_prefix(&base).unwrap_or(&e.path);
            out.push_str(&format!(
                "{},{},{}\n",
                e.well_id,
                rel.display(),
                e.split.map(Split::name).unwrap_or("")
            ));
        }
        fs::write(path, out).map_err(io_err(path))
    }

    pub fn with_split(&self, split: &WellSplit) -> Manifest {
        Manifest {
            entries: self
                .entries
                .iter()
                .map(|e| ManifestEntry {
                    split: split.split_of(&e.well_id),
                    ..e.clone()
                })
                .collect(),
        }
    }

    pub fn wells_in(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == Some(split)).collect()
    }

    pub fn load_all(&self) -> Result<Vec<WellLog>, CorpusError> {
        self.entries
            .iter()
            .map(|e| {
                let mut w = load_well(&e.path)?;
                w.well_id = e.well_id.clone();
                Ok(w)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WellSplit {
    pub format_version: u32,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

impl WellSplit {
    pub fn split_of(&self, well: &str) -> Option<Split> {
        if self.train.iter().any(|w| w == well) {
            Some(Split::Train)
        } else if self.val.iter().any(|w| w == well) {
            Some(Split::Val)
        } else if self.test.iter().any(|w| w == well) {
            Some(Split::Test)
        } else {
            None
        }
    }

    pub fn from_manifest(m: &Manifest, seed: u64) -> Option<WellSplit> {
        let mut s = WellSplit {
            format_version: FORMAT_VERSION,
            train: vec![],
            val: vec![],
            test: vec![],
            seed,
        };
        for e in &m.entries {
            match e.split? {
                Split::Train => s.train.push(e.well_id.clone()),
                Split::Val => s.val.push(e.well_id.clone()),
                Split::Test => s.test.push(e.well_id.clone()),
            }
        }
        Some(s)
    }

    /// Number of wells appearing in more than one set, or in none of
    /// `all_wells`, or missing from the split. Zero for a valid split.
    pub fn leakage_violations(&self, all_wells: &[String]) -> usize {
        let mut count: BTreeMap<&str, usize> = BTreeMap::new();
        for w in self.train.iter().chain(&self.val).chain(&self.test) {
            *count.entry(w.as_str()).or_default() += 1;
        }
        let dup = count.values().filter(|&&c| c > 1).count();
        let missing = all_wells.iter().filter(|w| !count.contains_key(w.as_str())).count();
        let extra = count.keys().filter(|w| !all_wells.iter().any(|a| a == *w)).count();
        dup + missing + extra
    }
}

/// Deterministic well-level split. Sizes are rounded proportions with
/// the test set taking the remainder.
pub fn split_wells(well_ids: &[String], ratios: (f64, f64, f64), seed: u64) -> Result<WellSplit, CorpusError> {
    let (a, b, c) = ratios;
    if a < 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(CorpusError::BadRatios(ratios));
    }
    let n = well_ids.len();
    let mut ids = well_ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_train = ((a * n as f64).round() as usize).min(n);
    let n_val = ((b * n as f64).round() as usize).min(n - n_train);
    let test = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    Ok(WellSplit {
        format_version: FORMAT_VERSION,
        train: ids,
        val,
        test,
        seed,
    })
}

/// Writes every well plus `manifest.csv` into `dir`; returns the manifest path.
pub fn write_corpus(corpus: &SyntheticCorpus, dir: &Path) -> Result<PathBuf, CorpusError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = corpus.manifest.clone();
    for (w, e) in corpus.wells.iter().zip(manifest.entries.iter_mut()) {
        let p = dir.join(format!("{}.csv", w.well_id));
        write_well(w, &p)?;
        e.path = p;
    }
    let mp = dir.join("manifest.csv");
    manifest.write(&mp)?;
    Ok(mp)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CorpusError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n").map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    fn tiny_well(values: Vec<f64>) -> WellLog {
        let n = values.len();
        WellLog {
            well_id: "w".into(),
            depths: (0..n).map(|i| 100.0 + i as f64 * 0.125).collect(),
            curves: vec![Curve {
                kind: CurveKind::Gr,
                values,
                norm: None,
            }],
            litho: None,
            porosity: None,
            layer_tops: vec![],
        }
    }

    #[test]
    fn load_minimal_well() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(dir.path(), "a.csv", "DEPTH,GR,SP\n100,50,1\n100.5,60,2\n101,70,3\n");
        let w = load_well(&p).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w.curves.len(), 2);
        assert!(w.litho.is_none() && w.porosity.is_none());
        assert_eq!(w.well_id, "a");
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(dir.path(), "b.csv", "GR,SP\n1,2\n");
        assert!(matches!(load_well(&p), Err(CorpusError::MissingDepthColumn { .. })));
        let p = write_tmp(dir.path(), "c.csv", "DEPTH,GR\n100,1\n99,2\n101,3\n");
        assert!(matches!(load_well(&p), Err(CorpusError::NonMonotonicDepth { .. })));
        let p = write_tmp(dir.path(), "d.csv", "DEPTH,XYZ\n100,1\n");
        assert!(matches!(load_well(&p), Err(CorpusError::UnknownCurveName { name, .. }) if name == "XYZ"));
        let p = write_tmp(dir.path(), "e.csv", "DEPTH,GR\n100,1\n101\n");
        assert!(matches!(load_well(&p), Err(CorpusError::RaggedColumns { .. })));
        let p = write_tmp(dir.path(), "f.csv", "DEPTH,GR,PORO\n100,1,1.5\n");
        assert!(matches!(load_well(&p), Err(CorpusError::PorosityOutOfRange { .. })));
    }

    #[test]
    fn labels_are_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_tmp(dir.path(), "g.csv", "DEPTH,GR,RT,LITHO,PORO\n1,10,5,0,0.1\n2,11,6,2,0.2\n");
        let w = load_well(&p).unwrap();
        assert_eq!(w.litho, Some(vec![0, 2]));
        assert_eq!(w.porosity, Some(vec![0.1, 0.2]));
    }

    #[test]
    fn normalize_examples() {
        let w = normalize_well(&tiny_well(vec![1.0, 2.0, 3.0])).unwrap();
        let expect = 1.224_744_871_391_589;
        let v = &w.curves[0].values;
        assert!((v[0] + expect).abs() < 1e-12 && v[1].abs() < 1e-12 && (v[2] - expect).abs() < 1e-12);

        let w = normalize_well(&tiny_well(vec![5.0; 3])).unwrap();
        assert!(w.curves[0].values.iter().all(|&v| v == 0.0));

        let mut rt = tiny_well(vec![10.0, 100.0, 1000.0]);
        rt.curves[0].kind = CurveKind::Rt;
        let w = normalize_well(&rt).unwrap();
        let v = &w.curves[0].values;
        assert!((v[0] + expect).abs() < 1e-12 && v[1].abs() < 1e-12 && (v[2] - expect).abs() < 1e-12);

        rt.curves[0].values[1] = 0.0;
        assert!(matches!(normalize_well(&rt), Err(CorpusError::NonPositiveResistivity { .. })));
    }

    #[test]
    fn patch_counts_and_rel_depth() {
        let w = tiny_well((0..10).map(f64::from).collect());
        let p = extract_patches(&w, 4, 2);
        assert_eq!(p.iter().map(|p| p.start_index).collect::<Vec<_>>(), vec![0, 2, 4, 6]);
        assert!(extract_patches(&tiny_well(vec![0.0; 3]), 4, 1).is_empty());
        let p = extract_patches(&tiny_well(vec![0.0; 4]), 4, 1);
        assert_eq!(p.len(), 1);
        assert!((p[0].rel_depth - 0.5).abs() < 1e-12);
        assert_eq!(p[0].missing_mask, vec![false, true, true, true, true]);
    }

    #[test]
    fn split_examples() {
        let ids: Vec<String> = (0..10).map(well_name).collect();
        let s = split_wells(&ids, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        assert_eq!(s, split_wells(&ids, (0.8, 0.1, 0.1), 3).unwrap());
        assert_eq!(s.leakage_violations(&ids), 0);
        assert!(matches!(split_wells(&ids, (0.7, 0.1, 0.1), 3), Err(CorpusError::BadRatios(_))));
    }

    #[test]
    fn synth_examples() {
        let cfg = SynthConfig {
            n_wells: 5,
            depth_range: (1000.0, 1040.0),
            ..Default::default()
        };
        let a = generate_synthetic_corpus(&cfg).unwrap();
        assert_eq!(a.manifest.entries.len(), 5);
        assert_eq!(a, generate_synthetic_corpus(&cfg).unwrap());
        for w in &a.wells {
            w.validate().unwrap();
        }

        let ident = SynthConfig {
            transition_matrix: vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
            lateral_variability: 0.0,
            ..cfg.clone()
        };
        let b = generate_synthetic_corpus(&ident).unwrap();
        for w in &b.wells {
            assert_eq!(w.layer_tops.len(), 1);
            let l = w.litho.as_ref().unwrap();
            assert!(l.iter().all(|&x| x == l[0]));
        }

        let bad = SynthConfig {
            transition_matrix: vec![vec![0.5, 0.4, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
            ..cfg
        };
        assert!(matches!(generate_synthetic_corpus(&bad), Err(CorpusError::InvalidTransitionMatrix(_))));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_wells: 3,
            depth_range: (1000.0, 1010.0),
            ..Default::default()
        };
        let corpus = generate_synthetic_corpus(&cfg).unwrap();
        let mp = write_corpus(&corpus, dir.path()).unwrap();
        let m = Manifest::read(&mp).unwrap();
        assert_eq!(m.well_ids(), corpus.manifest.well_ids());
        let wells = m.load_all().unwrap();
        for (a, b) in wells.iter().zip(&corpus.wells) {
            assert_eq!(a.depths, b.depths);
            assert_eq!(a.curves, b.curves);
            assert_eq!(a.litho, b.litho);
            assert_eq!(a.porosity, b.porosity);
            assert_eq!(a.layer_tops, b.layer_tops);
        }
    }
}
