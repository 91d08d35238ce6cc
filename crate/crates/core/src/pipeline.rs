//! Run configuration and the experiment stages: data generation, nested
//! cross-validation training, uncertainty scoring, evaluation and the
//! reconstruction-branch ablation.
//!
//! Every stage writes its outputs under `output_dir` and is a deterministic
//! function of the run configuration. Folds and ensemble members may train in
//! parallel; results are collected in index order, so thread count does not
//! change any output.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::{self, DvhKind, DvhRow, EvalError, EvalReport, Provenance};
use crate::net::{NetConfig, NetError, Params};
use crate::synth::{self, DatasetSpec, Family, Sample, SynthError, DOSE_SCALE, OAR_NAMES};
use crate::train::{self, CvPlan, CvSizes, TrainConfig, TrainError, Trained};
use crate::uq::{self, UqError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    Internal,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
            ErrorKind::Internal => 5,
        }
    }
}

#[derive(Debug, Error)]
#[error("{stage}: {message}")]
pub struct PipelineError {
    pub stage: &'static str,
    pub kind: ErrorKind,
    pub message: String,
}

impl PipelineError {
    fn new(stage: &'static str, kind: ErrorKind, message: impl fmt::Display) -> Self {
        Self {
            stage,
            kind,
            message: message.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

trait Classify: fmt::Display {
    fn kind(&self) -> ErrorKind;
}

impl Classify for SynthError {
    fn kind(&self) -> ErrorKind {
        match self {
            SynthError::SpecInvalid(_) => ErrorKind::Config,
            _ => ErrorKind::Data,
        }
    }
}

impl Classify for NetError {
    fn kind(&self) -> ErrorKind {
        match self {
            NetError::InvalidConfig(_) | NetError::ShapeMismatch(_) => ErrorKind::Config,
            NetError::NonFinite => ErrorKind::Numeric,
            NetError::MissingLabel | NetError::Store { .. } | NetError::Io(_) => ErrorKind::Data,
            NetError::EmptyBatch => ErrorKind::Internal,
        }
    }
}

impl Classify for TrainError {
    fn kind(&self) -> ErrorKind {
        match self {
            TrainError::InvalidConfig(_)
            | TrainError::TooFewSamples { .. }
            | TrainError::DuplicateSeed(_) => ErrorKind::Config,
            TrainError::NonFiniteGradient(_) | TrainError::NonFiniteLoss(_) => ErrorKind::Numeric,
            TrainError::MissingLabel(_) | TrainError::EmptyTarget(_) => ErrorKind::Data,
            TrainError::Write { .. } | TrainError::Grid(_) => ErrorKind::Internal,
            TrainError::Net(e) => e.kind(),
        }
    }
}

impl Classify for UqError {
    fn kind(&self) -> ErrorKind {
        match self {
            UqError::NoReconBranch
            | UqError::BadDropProb(_)
            | UqError::TooFewPasses(_)
            | UqError::EmptyEnsemble
            | UqError::BadTile { .. } => ErrorKind::Config,
            UqError::MissingLabel(_) => ErrorKind::Data,
            UqError::Grid(_) => ErrorKind::Internal,
            UqError::Net(e) => e.kind(),
        }
    }
}

impl Classify for EvalError {
    fn kind(&self) -> ErrorKind {
        match self {
            EvalError::NonFinite => ErrorKind::Numeric,
            EvalError::Write { .. } => ErrorKind::Internal,
            _ => ErrorKind::Data,
        }
    }
}

fn at<E: Classify>(stage: &'static str) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::new(stage, e.kind(), e)
}

fn io_at<'a>(stage: &'static str, path: &'a Path) -> impl Fn(std::io::Error) -> PipelineError + 'a {
    move |e| PipelineError::new(stage, ErrorKind::Internal, format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub n_folds: usize,
    pub outer: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            n_folds: 11,
            outer: 3,
            val: 5,
            test: 5,
        }
    }
}

impl CvConfig {
    pub fn sizes(&self) -> CvSizes {
        CvSizes {
            outer: self.outer,
            val: self.val,
            test: self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UqConfig {
    pub mcdo_probs: Vec<f64>,
    pub mcdo_passes: usize,
    pub de_models: usize,
    /// Fold whose model is used for OOD scoring, the ensemble and the ablation.
    pub selected_fold: usize,
    /// Base seed of the dropout masks.
    pub seed: u64,
    /// Inference window; defaults to the training patch size.
    pub tile: Option<Vec<usize>>,
}

impl Default for UqConfig {
    fn default() -> Self {
        Self {
            mcdo_probs: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            mcdo_passes: 20,
            de_models: 20,
            selected_fold: 0,
            seed: 42,
            tile: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub cv: CvConfig,
    pub uq: UqConfig,
    pub output_dir: PathBuf,
    /// Existing dataset directory; the dataset is regenerated in memory when unset.
    pub data_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            cv: CvConfig::default(),
            uq: UqConfig::default(),
            output_dir: PathBuf::from("run"),
            data_dir: None,
        }
    }
}

/// Sets the value at a dotted `path` inside a JSON document. `raw` is parsed
/// as JSON when possible and taken as a string otherwise.
pub fn apply_override(doc: &mut Value, path: &str, raw: &str) -> std::result::Result<(), String> {
    let mut cur = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, k) in keys.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| format!("{path}: {} is not an object", keys[..i].join(".")))?;
        let slot = obj
            .get_mut(*k)
            .ok_or_else(|| format!("{path}: unknown field `{k}`"))?;
        if i + 1 == keys.len() {
            *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            return Ok(());
        }
        cur = slot;
    }
    Err(format!("empty override path `{path}`"))
}

fn config_err(m: impl fmt::Display) -> PipelineError {
    PipelineError::new("config", ErrorKind::Config, m)
}

impl RunConfig {
    /// Reads a JSON config (or starts from defaults), applies dotted
    /// overrides in order, then the global seed override, and validates.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)], seed: Option<u64>) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
                let parsed: RunConfig = serde_json::from_str(&text)
                    .map_err(|e| config_err(format!("{}: {e}", p.display())))?;
                serde_json::to_value(parsed).expect("config serializes")
            }
            None => serde_json::to_value(RunConfig::default()).expect("config serializes"),
        };
        for (k, v) in overrides {
            apply_override(&mut doc, k, v).map_err(config_err)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(doc).map_err(config_err)?;
        if let Some(s) = seed {
            cfg.set_seed(s);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Replaces every seed of the run.
    pub fn set_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.train.seed = seed;
        self.uq.seed = seed;
    }

    pub fn tile(&self) -> Vec<usize> {
        self.uq.tile.clone().unwrap_or_else(|| self.train.patch_size.clone())
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate().map_err(at("config"))?;
        self.net.validate().map_err(at("config"))?;
        self.train.validate().map_err(at("config"))?;
        let nd = self.dataset.shape.len();
        if self.net.ndim != nd {
            return Err(config_err(format!("net.ndim {} but dataset is {nd}-d", self.net.ndim)));
        }
        let want = 3 + OAR_NAMES.len();
        if self.net.in_channels != want {
            return Err(config_err(format!("net.in_channels must be {want}")));
        }
        let m = self.net.size_multiple();
        for (name, win) in [("train.patch_size", &self.train.patch_size), ("uq.tile", &self.tile())] {
            if win.len() != nd
                || win.iter().zip(&self.dataset.shape).any(|(&w, &n)| w > n || w % m != 0)
            {
                return Err(config_err(format!(
                    "{name} {win:?} must have {nd} axes, fit {:?} and be divisible by {m}",
                    self.dataset.shape
                )));
            }
        }
        if self.uq.mcdo_passes < 2 {
            return Err(config_err("uq.mcdo_passes must be at least 2"));
        }
        if self.uq.de_models == 0 {
            return Err(config_err("uq.de_models must be at least 1"));
        }
        if let Some(p) = self.uq.mcdo_probs.iter().find(|p| !(0.0..1.0).contains(*p)) {
            return Err(config_err(format!("uq.mcdo_probs entry {p} outside [0, 1)")));
        }
        if self.uq.selected_fold >= self.cv.n_folds {
            return Err(config_err("uq.selected_fold must be below cv.n_folds"));
        }
        if self.cv.outer + self.cv.val + self.cv.test < 5 {
            return Err(config_err("cv.outer + cv.val + cv.test must be at least 5 for the paired test"));
        }
        let ids: Vec<String> = (0..self.dataset.n_id).map(|i| i.to_string()).collect();
        train::make_cv_plan(&ids, self.cv.n_folds, self.cv.sizes(), 0).map_err(at("config"))?;
        Ok(())
    }

    /// SHA-256 of the config with the output and data locations blanked.
    pub fn hash(&self) -> String {
        let canon = RunConfig {
            output_dir: PathBuf::new(),
            data_dir: None,
            ..self.clone()
        };
        let json = serde_json::to_vec(&canon).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_at("config", dir))?;
        let p = dir.join("config.json");
        let json = serde_json::to_string_pretty(self).expect("config serializes") + "\n";
        fs::write(&p, json).map_err(io_at("config", &p))
    }

    fn fold_seed(&self, fold: usize) -> u64 {
        self.train.seed.wrapping_add(fold as u64)
    }

    /// Seeds of the ensemble: the selected fold model first, then seeds no fold uses.
    fn ensemble_seeds(&self) -> Vec<u64> {
        let mut s = vec![self.fold_seed(self.uq.selected_fold)];
        s.extend((1..self.uq.de_models).map(|j| self.train.seed.wrapping_add((self.cv.n_folds + j) as u64)));
        s
    }
}

/// The configured dataset: loaded from `data_dir` when it exists, generated otherwise.
pub fn load_samples(cfg: &RunConfig) -> Result<Vec<Sample>> {
    match &cfg.data_dir {
        Some(d) if d.exists() => synth::load_dataset(d).map_err(at("data")),
        _ => synth::generate(&cfg.dataset).map_err(at("data")),
    }
}

/// Generates the dataset and writes it to `out`, returning the sample count.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<usize> {
    let samples = synth::generate(&cfg.dataset).map_err(at("gen-data"))?;
    synth::save_dataset(out, &samples).map_err(at("gen-data"))?;
    Ok(samples.len())
}

fn id_samples(samples: &[Sample]) -> Vec<String> {
    samples
        .iter()
        .filter(|s| s.family == Family::Id)
        .map(|s| s.id.clone())
        .collect()
}

pub fn cv_plan(cfg: &RunConfig, samples: &[Sample]) -> Result<CvPlan> {
    train::make_cv_plan(&id_samples(samples), cfg.cv.n_folds, cfg.cv.sizes(), cfg.train.seed)
        .map_err(at("cv"))
}

fn lookup<'a>(samples: &'a [Sample], ids: &[String]) -> Result<Vec<&'a Sample>> {
    let by_id: BTreeMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .copied()
                .ok_or_else(|| PipelineError::new("data", ErrorKind::Data, format!("unknown sample {id}")))
        })
        .collect()
}

fn train_fold(
    cfg: &RunConfig,
    samples: &[Sample],
    plan: &CvPlan,
    fold: usize,
    net: &NetConfig,
    seed: u64,
) -> Result<Trained> {
    let f = &plan.folds[fold];
    let tr = lookup(samples, &f.train)?;
    let va = lookup(samples, &f.val)?;
    let tc = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    train::train_model(&tr, &va, &tc, net).map_err(at("train"))
}

fn save_model(dir: &Path, t: &Trained) -> Result<()> {
    t.params.save(dir).map_err(at("train"))?;
    train::write_history(&dir.join("history.csv"), &t.history).map_err(at("train"))
}

/// Trains the dual-decoder model of the selected fold into `<output_dir>/train`.
pub fn cmd_train(cfg: &RunConfig) -> Result<Trained> {
    let samples = load_samples(cfg)?;
    let plan = cv_plan(cfg, &samples)?;
    let fold = cfg.uq.selected_fold;
    let t = train_fold(cfg, &samples, &plan, fold, &cfg.net, cfg.fold_seed(fold))?;
    let dir = cfg.output_dir.join("train");
    cfg.write_to(&dir)?;
    save_model(&dir, &t)?;
    Ok(t)
}

/// One line of `scores.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub sample_id: String,
    pub family: Family,
    pub method: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DoseErrorRow {
    sample_id: String,
    dose_mse: f64,
}

/// Scores and forward-pass counts gathered by the scoring stages.
#[derive(Debug, Clone, Default)]
pub struct Scored {
    pub rows: Vec<ScoreRow>,
    pub dose_mse: BTreeMap<String, f64>,
    /// Forward passes per method, summed over samples.
    pub passes: BTreeMap<String, usize>,
}

impl Scored {
    fn push(&mut self, s: &Sample, score: uq::UncertaintyScore) {
        let method = score.method.to_string();
        *self.passes.entry(method.clone()).or_default() += score.passes;
        self.rows.push(ScoreRow {
            sample_id: s.id.clone(),
            family: s.family,
            method,
            value: score.value,
        });
    }

    fn extend(&mut self, other: Scored) {
        self.rows.extend(other.rows);
        self.dose_mse.extend(other.dose_mse);
        for (k, v) in other.passes {
            *self.passes.entry(k).or_default() += v;
        }
    }

    fn sort(&mut self) {
        self.rows
            .sort_by(|a, b| (&a.method, a.family, &a.sample_id).cmp(&(&b.method, b.family, &b.sample_id)));
    }
}

/// splitmix64 finaliser, used to derive per-sample dropout seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn mcdo_seed(cfg: &RunConfig, sample: &str, prob_index: usize) -> u64 {
    let h = Sha256::digest(sample.as_bytes());
    let tag = u64::from_le_bytes(h[..8].try_into().unwrap());
    mix(cfg.uq.seed ^ mix(tag ^ prob_index as u64))
}

/// RECON and every MCDO variant for `targets`; `score` decides which samples
/// get rows, the others only contribute their dose error.
fn score_single_model(
    cfg: &RunConfig,
    p: &Params,
    targets: &[&Sample],
    score: impl Fn(&Sample) -> bool,
) -> Result<Scored> {
    let tile = cfg.tile();
    let mut out = Scored::default();
    for &s in targets {
        let (recon, dose_hat) = uq::recon_uncertainty(p, s, &tile).map_err(at("uq"))?;
        if s.dose.is_some() {
            out.dose_mse
                .insert(s.id.clone(), uq::dose_mse(s, &dose_hat).map_err(at("uq"))?);
        }
        if !score(s) {
            continue;
        }
        out.push(s, recon);
        for (qi, &q) in cfg.uq.mcdo_probs.iter().enumerate() {
            let sc = uq::mcdo_uncertainty(p, s, q, cfg.uq.mcdo_passes, mcdo_seed(cfg, &s.id, qi), &tile)
                .map_err(at("uq"))?;
            out.push(s, sc);
        }
    }
    Ok(out)
}

fn score_ensemble(cfg: &RunConfig, models: &[Params], targets: &[&Sample]) -> Result<Scored> {
    if models.len() == 1 {
        log::warn!("deep ensemble has a single member; DE scores are all zero");
    }
    let tile = cfg.tile();
    let mut out = Scored::default();
    for &s in targets {
        let sc = uq::de_uncertainty(models, s, &tile).map_err(at("uq"))?;
        out.push(s, sc);
    }
    Ok(out)
}

fn write_scores(dir: &Path, scored: &Scored) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_at("uq", dir))?;
    let err = |p: &Path| {
        let p = p.display().to_string();
        move |e: csv::Error| PipelineError::new("uq", ErrorKind::Internal, format!("{p}: {e}"))
    };
    let p = dir.join("scores.csv");
    let mut w = csv::Writer::from_path(&p).map_err(err(&p))?;
    for r in &scored.rows {
        w.serialize(r).map_err(err(&p))?;
    }
    w.flush().map_err(|e| err(&p)(e.into()))?;
    let p = dir.join("dose_error.csv");
    let mut w = csv::Writer::from_path(&p).map_err(err(&p))?;
    for (id, v) in &scored.dose_mse {
        w.serialize(DoseErrorRow {
            sample_id: id.clone(),
            dose_mse: *v,
        })
        .map_err(err(&p))?;
    }
    w.flush().map_err(|e| err(&p)(e.into()))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| PipelineError::new("eval", ErrorKind::Data, format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| PipelineError::new("eval", ErrorKind::Data, format!("{}: {e}", path.display())))
}

/// Scores the selected fold's held-out ID samples and every OOD sample with
/// the model in `model_dir` (RECON and MCDO) and, when given, the ensemble
/// members in `ensemble` (DE). Writes `scores.csv` and `dose_error.csv`.
pub fn cmd_uq(cfg: &RunConfig, model_dir: &Path, ensemble: &[PathBuf]) -> Result<Scored> {
    let samples = load_samples(cfg)?;
    let plan = cv_plan(cfg, &samples)?;
    let p = Params::load(model_dir).map_err(at("uq"))?;
    let mut ids = plan.held_out(cfg.uq.selected_fold);
    ids.extend(samples.iter().filter(|s| s.family == Family::Ood).map(|s| s.id.clone()));
    let targets = lookup(&samples, &ids)?;
    let mut scored = score_single_model(cfg, &p, &targets, |_| true)?;
    if !ensemble.is_empty() {
        let models = ensemble
            .iter()
            .map(|d| Params::load(d).map_err(at("uq")))
            .collect::<Result<Vec<_>>>()?;
        scored.extend(score_ensemble(cfg, &models, &targets)?);
    }
    scored.sort();
    write_scores(&cfg.output_dir, &scored)?;
    Ok(scored)
}

/// Builds the report from `scores.csv`, `dose_error.csv` and, when present,
/// `ablation.json` in the output directory, and writes all tables.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport> {
    let dir = &cfg.output_dir;
    let rows: Vec<ScoreRow> = read_csv(&dir.join("scores.csv"))?;
    let dose: BTreeMap<String, f64> = read_csv::<DoseErrorRow>(&dir.join("dose_error.csv"))?
        .into_iter()
        .map(|r| (r.sample_id, r.dose_mse))
        .collect();
    let abl = dir.join("ablation.json");
    let dvh_impact: Vec<DvhRow> = if abl.exists() {
        let text = fs::read_to_string(&abl).map_err(io_at("eval", &abl))?;
        serde_json::from_str(&text)
            .map_err(|e| PipelineError::new("eval", ErrorKind::Data, format!("{}: {e}", abl.display())))?
    } else {
        Vec::new()
    };
    let report = build_report(cfg, &rows, &dose, dvh_impact)?;
    report.write(dir).map_err(at("eval"))?;
    let mut hist: BTreeMap<String, Vec<(f64, String)>> = BTreeMap::new();
    for r in &rows {
        hist.entry(r.method.clone())
            .or_default()
            .push((r.value, r.family.as_str().to_string()));
    }
    eval::write_histograms(dir, &hist).map_err(at("eval"))?;
    Ok(report)
}

pub fn build_report(
    cfg: &RunConfig,
    rows: &[ScoreRow],
    dose_mse: &BTreeMap<String, f64>,
    dvh_impact: Vec<DvhRow>,
) -> Result<EvalReport> {
    let mut id_scores: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    let mut ood_scores: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in rows {
        match r.family {
            Family::Id => {
                id_scores
                    .entry(r.method.clone())
                    .or_default()
                    .insert(r.sample_id.clone(), r.value);
            }
            Family::Ood => ood_scores.entry(r.method.clone()).or_default().push(r.value),
        }
    }
    let pearson = eval::run_id_analysis(&id_scores, dose_mse).map_err(at("eval"))?;
    let mut ood = BTreeMap::new();
    for (m, o) in &ood_scores {
        let id: Vec<f64> = id_scores.get(m).map(|v| v.values().copied().collect()).unwrap_or_default();
        if !id.is_empty() {
            ood.insert(m.clone(), eval::ood_entry(&id, o).map_err(at("eval"))?);
        }
    }
    let seeds = [
        ("dataset", cfg.dataset.seed),
        ("train", cfg.train.seed),
        ("uq", cfg.uq.seed),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    Ok(EvalReport {
        pearson,
        ood,
        dvh_impact,
        reference_pearson: eval::reference_pearson(),
        provenance: Provenance {
            config_hash: cfg.hash(),
            seeds,
        },
    })
}

/// Per-patient absolute DVH errors (dose units) of two models against the
/// label, then one paired test per structure and metric. Targets get D95 and
/// D99, OARs Dmean and D2.
pub fn ablation_rows(single: &Params, dual: &Params, samples: &[&Sample], tile: &[usize]) -> Result<Vec<DvhRow>> {
    let gy = |v: &crate::grid::Volume| {
        v.map(|x| (x as f64 * DOSE_SCALE) as f32)
            .map_err(|e| PipelineError::new("ablation", ErrorKind::Numeric, e))
    };
    let mut table: BTreeMap<(usize, DvhKind), (String, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for &s in samples {
        let truth = s
            .dose
            .as_ref()
            .ok_or_else(|| PipelineError::new("ablation", ErrorKind::Data, format!("{} has no dose", s.id)))?;
        let ps = gy(&uq::predict_full(single, s, tile).map_err(at("ablation"))?.dose)?;
        let pd = gy(&uq::predict_full(dual, s, tile).map_err(at("ablation"))?.dose)?;
        for (si, (name, mask)) in s.structures().into_iter().enumerate() {
            let kinds = if si < 2 { DvhKind::TARGET } else { DvhKind::OAR };
            for k in kinds {
                let m = |d| {
                    eval::dvh_metric(d, mask, name, k)
                        .map(|x| x.value)
                        .map_err(at("ablation"))
                };
                let t = m(truth)?;
                let e = table
                    .entry((si, k))
                    .or_insert_with(|| (name.to_string(), Vec::new(), Vec::new()));
                e.1.push((m(&ps)? - t).abs());
                e.2.push((m(&pd)? - t).abs());
            }
        }
    }
    let errors: Vec<(String, DvhKind, Vec<f64>, Vec<f64>)> =
        table.into_iter().map(|((_, k), (n, a, b))| (n, k, a, b)).collect();
    eval::dvh_impact(&errors).map_err(at("ablation"))
}

fn write_ablation(dir: &Path, rows: &[DvhRow]) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_at("ablation", dir))?;
    let p = dir.join("ablation.json");
    let json = serde_json::to_string_pretty(rows).expect("rows serialize") + "\n";
    fs::write(&p, json).map_err(io_at("ablation", &p))
}

fn single_branch(cfg: &RunConfig) -> NetConfig {
    NetConfig {
        recon_branch: false,
        ..cfg.net.clone()
    }
}

fn dual_branch(cfg: &RunConfig) -> NetConfig {
    NetConfig {
        recon_branch: true,
        ..cfg.net.clone()
    }
}

/// Trains single- and dual-decoder models on the selected fold with the same
/// seed and compares their DVH errors on every sample that fold never trained on.
pub fn cmd_ablation(cfg: &RunConfig) -> Result<Vec<DvhRow>> {
    let samples = load_samples(cfg)?;
    let plan = cv_plan(cfg, &samples)?;
    let fold = cfg.uq.selected_fold;
    let seed = cfg.fold_seed(fold);
    let nets = [single_branch(cfg), dual_branch(cfg)];
    let trained = nets
        .par_iter()
        .map(|n| train_fold(cfg, &samples, &plan, fold, n, seed))
        .collect::<Result<Vec<_>>>()?;
    let held = lookup(&samples, &plan.held_out(fold))?;
    let rows = ablation_rows(&trained[0].params, &trained[1].params, &held, &cfg.tile())?;
    cfg.write_to(&cfg.output_dir)?;
    write_ablation(&cfg.output_dir, &rows)?;
    let table = EvalReport {
        dvh_impact: rows.clone(),
        ..EvalReport::default()
    };
    table.write(&cfg.output_dir.join("ablation")).map_err(at("ablation"))?;
    Ok(rows)
}

/// Output of [`cmd_pipeline`].
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub report: EvalReport,
    pub scored: Scored,
    pub plan: CvPlan,
}

/// The full experiment: nested CV training of the dual-decoder network, RECON
/// and MCDO scoring of every fold's test set, OOD scoring, the deep ensemble
/// and the single-decoder ablation on the selected fold, then the report.
pub fn cmd_pipeline(cfg: &RunConfig) -> Result<PipelineRun> {
    let out = &cfg.output_dir;
    cfg.write_to(out)?;
    let samples = load_samples(cfg)?;
    let plan = cv_plan(cfg, &samples)?;
    let plan_path = out.join("cv_plan.json");
    fs::write(&plan_path, serde_json::to_string_pretty(&plan).expect("plan serializes") + "\n")
        .map_err(io_at("cv", &plan_path))?;
    let sel = cfg.uq.selected_fold;
    let ood: Vec<&Sample> = samples.iter().filter(|s| s.family == Family::Ood).collect();
    let dual = dual_branch(cfg);

    log::info!("training {} folds", plan.folds.len());
    let folds = (0..plan.folds.len())
        .into_par_iter()
        .map(|k| -> Result<(Trained, Scored)> {
            let t = train_fold(cfg, &samples, &plan, k, &dual, cfg.fold_seed(k))?;
            save_model(&out.join(format!("models/fold_{k:02}")), &t)?;
            let test = lookup(&samples, &plan.folds[k].test)?;
            let mut scored = score_single_model(cfg, &t.params, &test, |_| true)?;
            if k == sel {
                // the selected model also scores OOD and provides dose errors
                // for the rest of its held-out set (used by the ensemble)
                let mut extra = lookup(&samples, &plan.folds[k].val)?;
                extra.extend(lookup(&samples, &plan.outer_holdout)?);
                extra.extend(ood.iter().copied());
                scored.extend(score_single_model(cfg, &t.params, &extra, |s| s.family == Family::Ood)?);
            }
            log::info!("fold {k} done");
            Ok((t, scored))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut scored = Scored::default();
    let mut fold_models = Vec::with_capacity(folds.len());
    for (t, s) in folds {
        scored.extend(s);
        fold_models.push(t);
    }

    log::info!("training {} ensemble members and the single-decoder model", cfg.uq.de_models - 1);
    let seeds = cfg.ensemble_seeds();
    let jobs: Vec<(NetConfig, u64)> = seeds[1..]
        .iter()
        .map(|&s| (dual.clone(), s))
        .chain(std::iter::once((single_branch(cfg), cfg.fold_seed(sel))))
        .collect();
    let mut extra = jobs
        .par_iter()
        .map(|(n, s)| train_fold(cfg, &samples, &plan, sel, n, *s))
        .collect::<Result<Vec<_>>>()?;
    let single = extra.pop().expect("single-decoder job present");
    save_model(&out.join("models/single"), &single)?;
    let mut members = vec![fold_models[sel].params.clone()];
    for (j, t) in extra.into_iter().enumerate() {
        save_model(&out.join(format!("models/de_{:02}", j + 1)), &t)?;
        members.push(t.params);
    }

    let held = lookup(&samples, &plan.held_out(sel))?;
    let mut de_targets = held.clone();
    de_targets.extend(ood.iter().copied());
    scored.extend(score_ensemble(cfg, &members, &de_targets)?);
    scored.sort();
    write_scores(out, &scored)?;

    log::info!("ablation on {} held-out samples", held.len());
    let rows = ablation_rows(&single.params, &fold_models[sel].params, &held, &cfg.tile())?;
    write_ablation(out, &rows)?;

    let report = cmd_eval(cfg)?;
    Ok(PipelineRun { report, scored, plan })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn tiny(dir: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.dataset.n_id = 14;
        cfg.dataset.n_ood = 3;
        cfg.dataset.shape = vec![32, 32];
        cfg.dataset.spacing = vec![1.0, 1.0];
        cfg.net.levels = 2;
        cfg.net.base_channels = 4;
        cfg.net.growth = 4;
        cfg.net.convs_per_block = 1;
        cfg.train.epochs = 1;
        cfg.train.patch_size = vec![16, 16];
        cfg.train.patches_per_patient = 1;
        cfg.cv = CvConfig {
            n_folds: 2,
            outer: 1,
            val: 2,
            test: 2,
        };
        cfg.uq.mcdo_probs = vec![0.5];
        cfg.uq.mcdo_passes = 2;
        cfg.uq.de_models = 2;
        cfg.output_dir = dir.to_path_buf();
        cfg
    }

    #[test]
    fn defaults_validate() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.uq.mcdo_probs, vec![0.1, 0.2, 0.3, 0.4, 0.5]);
        assert_eq!((cfg.uq.mcdo_passes, cfg.uq.de_models), (20, 20));
        assert_eq!(cfg.tile(), vec![32, 32]);
    }

    #[test]
    fn overrides_and_seed() {
        let o = |k: &str, v: &str| (k.to_string(), v.to_string());
        let cfg = RunConfig::load(
            None,
            &[o("train.epochs", "7"), o("uq.mcdo_probs", "[0.5]"), o("output_dir", "out/x")],
            Some(9),
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.uq.mcdo_probs, vec![0.5]);
        assert_eq!(cfg.output_dir, PathBuf::from("out/x"));
        assert_eq!((cfg.dataset.seed, cfg.train.seed, cfg.uq.seed), (9, 9, 9));
        let e = RunConfig::load(None, &[o("train.epoch", "7")], None).unwrap_err();
        assert_eq!(e.kind, ErrorKind::Config);
        let e = RunConfig::load(None, &[o("uq.mcdo_passes", "1")], None).unwrap_err();
        assert_eq!(e.kind.exit_code(), 2);
        let e = RunConfig::load(None, &[o("dataset.n_id", "5")], None).unwrap_err();
        assert_eq!(e.kind, ErrorKind::Config);
    }

    #[test]
    fn hash_ignores_locations() {
        let a = RunConfig::default();
        let b = RunConfig {
            output_dir: "elsewhere".into(),
            data_dir: Some("data".into()),
            ..a.clone()
        };
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.train.epochs = 3;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn ensemble_seeds_are_distinct_from_folds() {
        let cfg = RunConfig::default();
        let s = cfg.ensemble_seeds();
        assert_eq!(s.len(), 20);
        assert_eq!(s[0], cfg.fold_seed(0));
        let folds: BTreeSet<u64> = (0..cfg.cv.n_folds).map(|k| cfg.fold_seed(k)).collect();
        assert!(s[1..].iter().all(|x| !folds.contains(x)));
        assert_eq!(s.iter().collect::<BTreeSet<_>>().len(), 20);
    }

    #[test]
    fn ablation_self_comparison_is_null() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let samples = load_samples(&cfg).unwrap();
        let p = crate::net::init(&cfg.net, 1).unwrap();
        let ids: Vec<&Sample> = samples.iter().filter(|s| s.family == Family::Id).take(6).collect();
        let rows = ablation_rows(&p, &p, &ids, &cfg.tile()).unwrap();
        assert_eq!(rows.len(), 2 * 2 + OAR_NAMES.len() * 2);
        assert!(rows.iter().all(|r| r.wilcoxon_p == 1.0));
    }

    #[test]
    fn tiny_pipeline_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let run = cmd_pipeline(&cfg).unwrap();
        for f in ["report.json", "table1.csv", "table2.csv", "table3.csv", "scores.csv", "config.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        assert!(dir.path().join("hist_RECON.csv").exists());
        let r = &run.report;
        assert_eq!(
            r.pearson.keys().cloned().collect::<Vec<_>>(),
            vec!["DE", "MCDO(0.5)", "RECON"]
        );
        assert_eq!(r.pearson["RECON"].n, 4);
        assert_eq!(r.pearson["DE"].n, 5);
        assert_eq!(r.ood["RECON"].n_ood, 3);
        assert_eq!(r.dvh_impact.len(), 10);
        for e in r.pearson.values() {
            if let Some(p) = e.p {
                assert!((0.0..=1.0).contains(&p));
            }
        }
        for row in &r.dvh_impact {
            assert!((0.0..=1.0).contains(&row.wilcoxon_p));
        }
        let tiles = uq::tile_count(&[32, 32], &[16, 16]);
        // 4 ID test + 3 OOD samples scored by RECON, one pass per tile
        assert_eq!(run.scored.passes["RECON"], 7 * tiles);
        assert_eq!(run.scored.passes["MCDO(0.5)"], 7 * 2 * tiles);
        // the ensemble scores the 5 held-out ID samples and the 3 OOD samples
        assert_eq!(run.scored.passes["DE"], 8 * 2 * tiles);
        let saved: RunConfig =
            serde_json::from_str(&fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
        assert_eq!(saved, cfg);
    }
}
