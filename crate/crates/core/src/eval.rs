//! Classification, regression and clustering metrics, the paired t-test,
//! seed aggregation and embedding export.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("all paired differences are identical and nonzero; p is undefined")]
    ZeroVariance,
    #[error("io: {0}")]
    Io(String),
}

fn same_len(a: usize, b: usize) -> Result<(), EvalError> {
    if a != b {
        Err(EvalError::LengthMismatch(a, b))
    } else {
        Ok(())
    }
}

/// Accuracy in percent and macro F1 over the classes present in `targets`.
pub fn classification_metrics(preds: &[usize], targets: &[usize]) -> Result<(f64, f64), EvalError> {
    same_len(preds.len(), targets.len())?;
    if targets.is_empty() {
        return Err(EvalError::DegenerateInput("no samples".into()));
    }
    let correct = preds.iter().zip(targets).filter(|(p, t)| p == t).count();
    let acc = 100.0 * correct as f64 / targets.len() as f64;
    let mut classes: Vec<usize> = targets.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let f1: f64 = classes
        .iter()
        .map(|&k| {
            let tp = preds.iter().zip(targets).filter(|(p, t)| **p == k && **t == k).count() as f64;
            let fp = preds.iter().zip(targets).filter(|(p, t)| **p == k && **t != k).count() as f64;
            let fn_ = preds.iter().zip(targets).filter(|(p, t)| **p != k && **t == k).count() as f64;
            let d = 2.0 * tp + fp + fn_;
            if d == 0.0 {
                0.0
            } else {
                2.0 * tp / d
            }
        })
        .sum::<f64>()
        / classes.len() as f64;
    Ok((acc, f1))
}

/// (MAE, MSE)
pub fn regression_metrics(preds: &[f64], targets: &[f64]) -> Result<(f64, f64), EvalError> {
    same_len(preds.len(), targets.len())?;
    if targets.is_empty() {
        return Err(EvalError::DegenerateInput("no samples".into()));
    }
    let n = targets.len() as f64;
    let mae = preds.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let mse = preds.iter().zip(targets).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n;
    Ok((mae, mse))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// k-means with seeded farthest-point initialization: the first center is
/// a uniformly drawn point, each next one the point farthest from its
/// nearest chosen center (ties to the lower index). Lloyd iterations stop
/// when no center moves more than 1e-6 or after 100 rounds.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<usize>, EvalError> {
    if k < 1 || points.len() < k {
        return Err(EvalError::DegenerateInput(format!("{} points for k={k}", points.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let mut best = 0;
        for i in 1..points.len() {
            if nearest[i] > nearest[best] {
                best = i;
            }
        }
        centers.push(points[best].clone());
        for (i, p) in points.iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(p, &points[best]));
        }
    }
    let dim = points[0].len();
    let mut assign = vec![0; points.len()];
    for _ in 0..100 {
        for (i, p) in points.iter().enumerate() {
            let mut b = 0;
            let mut bd = f64::INFINITY;
            for (c, ctr) in centers.iter().enumerate() {
                let d = sq_dist(p, ctr);
                if d < bd {
                    bd = d;
                    b = c;
                }
            }
            assign[i] = b;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let new: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(&new, &centers[c]).sqrt());
            centers[c] = new;
        }
        if shift <= 1e-6 {
            break;
        }
    }
    Ok(assign)
}

fn comb2(n: u64) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

fn contingency(a: &[usize], b: &[usize]) -> (BTreeMap<(usize, usize), u64>, BTreeMap<usize, u64>, BTreeMap<usize, u64>) {
    let mut cells = BTreeMap::new();
    let mut ra = BTreeMap::new();
    let mut rb = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *cells.entry((x, y)).or_insert(0) += 1;
        *ra.entry(x).or_insert(0) += 1;
        *rb.entry(y).or_insert(0) += 1;
    }
    (cells, ra, rb)
}

/// Adjusted Rand index of two labelings.
pub fn adjusted_rand_index(clusters: &[usize], labels: &[usize]) -> Result<f64, EvalError> {
    same_len(clusters.len(), labels.len())?;
    let n = clusters.len() as u64;
    let (cells, ra, rb) = contingency(clusters, labels);
    let index: f64 = cells.values().map(|&c| comb2(c)).sum();
    let sa: f64 = ra.values().map(|&c| comb2(c)).sum();
    let sb: f64 = rb.values().map(|&c| comb2(c)).sum();
    let total = comb2(n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sa * sb / total;
    let max = (sa + sb) / 2.0;
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Σ over clusters of the majority-class count, divided by N.
pub fn purity(clusters: &[usize], labels: &[usize]) -> Result<f64, EvalError> {
    same_len(clusters.len(), labels.len())?;
    if labels.is_empty() {
        return Err(EvalError::DegenerateInput("no samples".into()));
    }
    let (cells, _, _) = contingency(clusters, labels);
    let mut best: BTreeMap<usize, u64> = BTreeMap::new();
    for (&(c, _), &n) in &cells {
        let e = best.entry(c).or_insert(0);
        *e = (*e).max(n);
    }
    Ok(best.values().sum::<u64>() as f64 / labels.len() as f64)
}

/// (ARI, purity) of k-means clusters against `labels`.
pub fn clustering_metrics(embeddings: &[Vec<f64>], labels: &[usize], k: usize, seed: u64) -> Result<(f64, f64), EvalError> {
    same_len(embeddings.len(), labels.len())?;
    if k < 2 {
        return Err(EvalError::DegenerateInput("k must be at least 2".into()));
    }
    let clusters = kmeans(embeddings, k, seed)?;
    Ok((adjusted_rand_index(&clusters, labels)?, purity(&clusters, labels)?))
}

/// ln Γ(x) for x > 0 (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, &c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b).
pub fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Two-sided p-value of Student's t with `df` degrees of freedom.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    inc_beta(df / 2.0, 0.5, df / (df + t * t))
}

/// Paired t-test on `a − b`: (t, two-sided p) with n−1 degrees of freedom.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64), EvalError> {
    same_len(a.len(), b.len())?;
    if a.len() < 2 {
        return Err(EvalError::DegenerateInput("paired t-test needs at least 2 pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return if mean == 0.0 { Ok((0.0, 1.0)) } else { Err(EvalError::ZeroVariance) };
    }
    let t = mean / (var / n).sqrt();
    Ok((t, t_two_sided_p(t, n - 1.0)))
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, 0.0);
    }
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

/// Metrics from one evaluation seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub litho_accuracy: f64,
    pub litho_macro_f1: f64,
    pub poro_mae: f64,
    pub poro_mse: f64,
    pub ari: f64,
    pub purity: f64,
}

impl SeedMetrics {
    pub const NAMES: [&'static str; 6] = ["litho_accuracy", "litho_macro_f1", "poro_mae", "poro_mse", "ari", "purity"];

    pub fn values(&self) -> [f64; 6] {
        [
            self.litho_accuracy,
            self.litho_macro_f1,
            self.poro_mae,
            self.poro_mse,
            self.ari,
            self.purity,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub split: String,
    pub per_seed: Vec<SeedMetrics>,
}

impl MetricReport {
    pub fn aggregate(&self) -> Vec<AggregateRow> {
        SeedMetrics::NAMES
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let vals: Vec<f64> = self.per_seed.iter().map(|m| m.values()[i]).collect();
                let (mean, std) = mean_std(&vals);
                AggregateRow {
                    metric: name.to_string(),
                    mean,
                    std,
                    n_seeds: vals.len(),
                }
            })
            .collect()
    }

    pub fn metric(&self, name: &str) -> Option<Vec<f64>> {
        let i = SeedMetrics::NAMES.iter().position(|n| *n == name)?;
        Some(self.per_seed.iter().map(|m| m.values()[i]).collect())
    }

    /// Fixed-width table for terminal output.
    pub fn table(&self) -> String {
        let mut s = format!("split: {}  seeds: {}\n", self.split, self.per_seed.len());
        s.push_str(&format!("{:<16} {:>12} {:>12}\n", "metric", "mean", "std"));
        for r in self.aggregate() {
            s.push_str(&format!("{:<16} {:>12.6} {:>12.6}\n", r.metric, r.mean, r.std));
        }
        s
    }
}

pub fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<(), EvalError> {
    let io = |e: csv::Error| EvalError::Io(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| EvalError::Io(e.to_string()))
}

pub fn read_seed_metrics(path: &Path) -> Result<Vec<SeedMetrics>, EvalError> {
    let io = |e: csv::Error| EvalError::Io(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(io)?;
    r.deserialize().collect::<Result<Vec<SeedMetrics>, _>>().map_err(io)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTestRow {
    pub metric: String,
    pub t: f64,
    pub p: f64,
}

/// Paired t-tests per metric against a baseline report with the same seeds.
pub fn compare_reports(ours: &MetricReport, baseline: &[SeedMetrics]) -> Result<Vec<TTestRow>, EvalError> {
    same_len(ours.per_seed.len(), baseline.len())?;
    SeedMetrics::NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let a: Vec<f64> = ours.per_seed.iter().map(|m| m.values()[i]).collect();
            let b: Vec<f64> = baseline.iter().map(|m| m.values()[i]).collect();
            let (t, p) = match paired_t_test(&a, &b) {
                Ok(v) => v,
                Err(EvalError::ZeroVariance) => (f64::NAN, f64::NAN),
                Err(e) => return Err(e),
            };
            Ok(TTestRow {
                metric: name.to_string(),
                t,
                p,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub well_id: String,
    pub depth: f64,
    pub layer_id: Option<u32>,
    pub litho: Option<usize>,
    pub values: Vec<f64>,
}

/// Writes `well_id,depth,layer_id,litho,e_1..e_d`; optional fields are
/// left empty when unknown.
pub fn write_embeddings(rows: &[EmbeddingRow], out: &mut impl Write) -> Result<(), EvalError> {
    let d = rows.first().map(|r| r.values.len()).unwrap_or(0);
    let io = |e: std::io::Error| EvalError::Io(e.to_string());
    let mut header = String::from("well_id,depth,layer_id,litho");
    for i in 1..=d {
        header.push_str(&format!(",e_{i}"));
    }
    writeln!(out, "{header}").map_err(io)?;
    for r in rows {
        if r.values.len() != d {
            return Err(EvalError::LengthMismatch(r.values.len(), d));
        }
        let mut line = format!(
            "{},{},{},{}",
            r.well_id,
            r.depth,
            r.layer_id.map(|v| v.to_string()).unwrap_or_default(),
            r.litho.map(|v| v.to_string()).unwrap_or_default()
        );
        for v in &r.values {
            line.push(',');
            line.push_str(&v.to_string());
        }
        writeln!(out, "{line}").map_err(io)?;
    }
    Ok(())
}
