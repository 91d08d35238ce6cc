//! Statistics for the uncertainty study: Pearson correlation, OOD
//! displacement and histogram overlap, DVH metrics and the paired Wilcoxon
//! signed-rank test, plus the report writers.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::grid::{Mask, Volume};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {need} values, have {have}")]
    TooFew { need: usize, have: usize },
    #[error("zero variance")]
    DegenerateVariance,
    #[error("in-distribution values have zero spread")]
    DegenerateId,
    #[error("empty structure")]
    EmptyStructure,
    #[error("no common sample ids: {0}")]
    IdMismatch(String),
    #[error("non-finite value")]
    NonFinite,
    #[error("failed to write {path}: {reason}")]
    Write { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn check_finite(v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(EvalError::NonFinite)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation.
fn pop_std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Pearson `r` and its two-sided p-value from the t distribution with `n - 2`
/// degrees of freedom.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(EvalError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 3 {
        return Err(EvalError::TooFew { need: 3, have: n });
    }
    check_finite(x)?;
    check_finite(y)?;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::DegenerateVariance);
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p = if r.abs() == 1.0 {
        0.0
    } else {
        let t2 = r * r * df / (1.0 - r * r);
        beta_reg(df / 2.0, 0.5, df / (df + t2)).clamp(0.0, 1.0)
    };
    Ok((r, p))
}

/// `(mean(ood) - mean(id)) / std(id)` with the population std.
pub fn z_score(id: &[f64], ood: &[f64]) -> Result<f64> {
    if id.len() < 2 {
        return Err(EvalError::DegenerateId);
    }
    if ood.is_empty() {
        return Err(EvalError::TooFew { need: 1, have: 0 });
    }
    check_finite(id)?;
    check_finite(ood)?;
    let s = pop_std(id);
    if s == 0.0 {
        return Err(EvalError::DegenerateId);
    }
    Ok((mean(ood) - mean(id)) / s)
}

/// Values of both lists inside `[max(mins), min(maxes)]`; 0 when that interval is empty.
pub fn overlap_count(id: &[f64], ood: &[f64]) -> usize {
    if id.is_empty() || ood.is_empty() {
        return 0;
    }
    let lo_hi = |v: &[f64]| {
        v.iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)))
    };
    let (a0, a1) = lo_hi(id);
    let (b0, b1) = lo_hi(ood);
    let (lo, hi) = (a0.max(b0), a1.min(b1));
    if lo > hi {
        return 0;
    }
    id.iter().chain(ood).filter(|&&v| v >= lo && v <= hi).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DvhKind {
    Dmean,
    D2,
    D95,
    D99,
}

impl DvhKind {
    pub const TARGET: [DvhKind; 2] = [DvhKind::D95, DvhKind::D99];
    pub const OAR: [DvhKind; 2] = [DvhKind::Dmean, DvhKind::D2];

    pub fn as_str(self) -> &'static str {
        match self {
            DvhKind::Dmean => "Dmean",
            DvhKind::D2 => "D2",
            DvhKind::D95 => "D95",
            DvhKind::D99 => "D99",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DvhMetric {
    pub kind: DvhKind,
    pub structure: String,
    pub value: f64,
}

/// Linear-interpolation percentile `q` (0..=100) of `sorted` values.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    match sorted.get(i + 1) {
        Some(&next) if frac > 0.0 => sorted[i] + frac * (next - sorted[i]),
        _ => sorted[i],
    }
}

/// Dmean, or `Dx` as the `(100 - x)`-th percentile of the dose inside `structure`.
pub fn dvh_metric(dose: &Volume, structure: &Mask, name: &str, kind: DvhKind) -> Result<DvhMetric> {
    if dose.shape() != structure.shape() {
        return Err(EvalError::LengthMismatch(dose.len(), structure.len()));
    }
    let mut vals: Vec<f64> = dose
        .data()
        .iter()
        .zip(structure.data())
        .filter(|(_, &m)| m != 0)
        .map(|(&d, _)| d as f64)
        .collect();
    if vals.is_empty() {
        return Err(EvalError::EmptyStructure);
    }
    vals.sort_by(f64::total_cmp);
    let value = match kind {
        DvhKind::Dmean => mean(&vals),
        DvhKind::D2 => percentile(&vals, 98.0),
        DvhKind::D95 => percentile(&vals, 5.0),
        DvhKind::D99 => percentile(&vals, 1.0),
    };
    Ok(DvhMetric {
        kind,
        structure: name.to_string(),
        value,
    })
}

/// Largest sample size for which the exact null distribution is enumerated.
pub const WILCOXON_EXACT_MAX: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wilcoxon {
    /// `min(W+, W-)`.
    pub w: f64,
    /// Nonzero differences.
    pub n: usize,
    pub p: f64,
    pub exact: bool,
}

/// Midranks of `|d|` (1-based), ties sharing the mean of their positions.
pub fn midranks(d: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.sort_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs()));
    let mut ranks = vec![0.0; d.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && d[idx[j + 1]].abs() == d[idx[i]].abs() {
            j += 1;
        }
        let r = (i + j + 2) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn signed_rank_sums(d: &[f64], ranks: &[f64]) -> (f64, f64) {
    d.iter().zip(ranks).fold((0.0, 0.0), |(p, m), (&x, &r)| {
        if x > 0.0 {
            (p + r, m)
        } else {
            (p, m + r)
        }
    })
}

/// Exact two-sided p: `2 · P(W+ <= w)` under the sign-flip null, capped at 1.
///
/// Midranks are doubled so that rank sums stay integral.
pub fn wilcoxon_exact_p(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut ways = vec![0u64; total + 1];
    ways[0] = 1;
    for &r in &doubled {
        for s in (r..=total).rev() {
            ways[s] += ways[s - r];
        }
    }
    let limit = (2.0 * w).round() as usize;
    let count: u64 = ways[..=limit.min(total)].iter().sum();
    (2.0 * count as f64 / 2f64.powi(ranks.len() as i32)).min(1.0)
}

/// Normal approximation with tie and continuity corrections.
pub fn wilcoxon_normal_p(ranks: &[f64], w: f64) -> f64 {
    let n = ranks.len() as f64;
    let mu = n * (n + 1.0) / 4.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
        let t = j as f64;
        tie += t * t * t - t;
        i += j;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w - mu).abs() - 0.5).max(0.0) / var.sqrt();
    erfc(z / std::f64::consts::SQRT_2).min(1.0)
}

/// Paired two-sided Wilcoxon signed-rank test on `a - b`.
///
/// Zero differences are dropped; if nothing is left, `p = 1`. Exact for up to
/// [`WILCOXON_EXACT_MAX`] nonzero differences, normal approximation beyond.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<Wilcoxon> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    check_finite(a)?;
    check_finite(b)?;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|&v| v != 0.0).collect();
    if d.is_empty() {
        return Ok(Wilcoxon {
            w: 0.0,
            n: 0,
            p: 1.0,
            exact: true,
        });
    }
    if d.len() < 5 {
        return Err(EvalError::TooFew {
            need: 5,
            have: d.len(),
        });
    }
    let ranks = midranks(&d);
    let (wp, wm) = signed_rank_sums(&d, &ranks);
    let w = wp.min(wm);
    let exact = d.len() <= WILCOXON_EXACT_MAX;
    let p = if exact {
        wilcoxon_exact_p(&ranks, w)
    } else {
        wilcoxon_normal_p(&ranks, w)
    };
    Ok(Wilcoxon {
        w,
        n: d.len(),
        p,
        exact,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PearsonEntry {
    pub n: usize,
    /// `None` when either series has zero variance.
    pub r: Option<f64>,
    pub p: Option<f64>,
}

/// Correlation of every method's scores with the per-sample dose error.
///
/// Each method must score a non-empty set of ids, all of which have a dose error.
pub fn run_id_analysis(
    scores: &BTreeMap<String, BTreeMap<String, f64>>,
    dose_mse: &BTreeMap<String, f64>,
) -> Result<BTreeMap<String, PearsonEntry>> {
    let mut out = BTreeMap::new();
    for (method, by_id) in scores {
        if by_id.is_empty() {
            return Err(EvalError::IdMismatch(format!("{method} has no scores")));
        }
        let mut x = Vec::with_capacity(by_id.len());
        let mut y = Vec::with_capacity(by_id.len());
        for (id, &v) in by_id {
            let e = dose_mse
                .get(id)
                .ok_or_else(|| EvalError::IdMismatch(format!("{method}: no dose error for {id}")))?;
            x.push(v);
            y.push(*e);
        }
        let entry = match pearson(&x, &y) {
            Ok((r, p)) => PearsonEntry {
                n: x.len(),
                r: Some(r),
                p: Some(p),
            },
            Err(EvalError::DegenerateVariance) => PearsonEntry {
                n: x.len(),
                r: None,
                p: None,
            },
            Err(e) => return Err(e),
        };
        out.insert(method.clone(), entry);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodEntry {
    /// `None` when the ID scores have zero spread.
    pub z_score: Option<f64>,
    pub overlap: usize,
    pub n_id: usize,
    pub n_ood: usize,
}

pub fn ood_entry(id: &[f64], ood: &[f64]) -> Result<OodEntry> {
    let z_score = match z_score(id, ood) {
        Ok(z) => Some(z),
        Err(EvalError::DegenerateId) => None,
        Err(e) => return Err(e),
    };
    Ok(OodEntry {
        z_score,
        overlap: overlap_count(id, ood),
        n_id: id.len(),
        n_ood: ood.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DvhRow {
    pub structure: String,
    pub metric: DvhKind,
    pub n: usize,
    /// Mean absolute metric error of the model without the reconstruction branch.
    pub mae_single: f64,
    /// Mean absolute metric error of the dual-decoder model.
    pub mae_dual: f64,
    pub wilcoxon_p: f64,
}

/// Paired test of per-patient absolute DVH errors of two dose predictors
/// against the ground truth, one row per structure and metric.
///
/// `errors[k]` holds `(structure, metric, |single - truth|, |dual - truth|)`
/// for every patient.
pub fn dvh_impact(errors: &[(String, DvhKind, Vec<f64>, Vec<f64>)]) -> Result<Vec<DvhRow>> {
    errors
        .iter()
        .map(|(s, k, single, dual)| {
            let w = wilcoxon_signed_rank(single, dual)?;
            Ok(DvhRow {
                structure: s.clone(),
                metric: *k,
                n: single.len(),
                mae_single: mean(single),
                mae_dual: mean(dual),
                wilcoxon_p: w.p,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub pearson: BTreeMap<String, PearsonEntry>,
    pub ood: BTreeMap<String, OodEntry>,
    pub dvh_impact: Vec<DvhRow>,
    /// Correlations reported for the clinical cohort, kept for comparison only.
    pub reference_pearson: BTreeMap<String, f64>,
    pub provenance: Provenance,
}

pub fn reference_pearson() -> BTreeMap<String, f64> {
    [("RECON", 0.620), ("DE", 0.447), ("MCDO(0.5)", 0.612)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

fn io_err(path: &Path, e: impl ToString) -> EvalError {
    EvalError::Write {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(header).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// File-name-safe form of a method tag: `MCDO(0.5)` becomes `MCDO_0.5`.
pub fn method_slug(method: &str) -> String {
    method.replace('(', "_").replace(')', "")
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Writes `report.json`, `table1.csv` (DVH impact), `table2.csv`
    /// (correlations) and `table3.csv` (OOD separation) into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let report = dir.join("report.json");
        fs::write(&report, self.to_json()).map_err(|e| io_err(&report, e))?;
        write_csv(
            &dir.join("table1.csv"),
            &["structure", "metric", "n", "mae_single", "mae_dual", "wilcoxon_p"],
            self.dvh_impact.iter().map(|r| {
                vec![
                    r.structure.clone(),
                    r.metric.as_str().to_string(),
                    r.n.to_string(),
                    r.mae_single.to_string(),
                    r.mae_dual.to_string(),
                    r.wilcoxon_p.to_string(),
                ]
            }),
        )?;
        write_csv(
            &dir.join("table2.csv"),
            &["method", "r", "p", "n"],
            self.pearson
                .iter()
                .map(|(m, e)| vec![m.clone(), opt(e.r), opt(e.p), e.n.to_string()]),
        )?;
        write_csv(
            &dir.join("table3.csv"),
            &["method", "z", "overlap"],
            self.ood
                .iter()
                .map(|(m, e)| vec![m.clone(), opt(e.z_score), e.overlap.to_string()]),
        )
    }
}

/// Writes one `hist_<method>.csv` (value, family) per method.
pub fn write_histograms(dir: &Path, rows: &BTreeMap<String, Vec<(f64, String)>>) -> Result<()> {
    for (method, vals) in rows {
        write_csv(
            &dir.join(format!("hist_{}.csv", method_slug(method))),
            &["value", "family"],
            vals.iter().map(|(v, f)| vec![v.to_string(), f.clone()]),
        )?;
    }
    Ok(())
}
