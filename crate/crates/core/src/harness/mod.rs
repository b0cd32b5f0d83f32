//! Run configuration, training, evaluation, ablation grids and reports.
//!
//! A run is described by a TOML file with the sections `[run]`, `[data]`,
//! `[model]`, `[loss]`, `[optim]`, `[eval]` and, for grids, `[ablate]`.
//! Every section is optional; omitted keys take their defaults. Built-in
//! presets live in `presets/` and are compiled into the binary.

mod ablate;
mod eval;
mod report;
mod train;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{gen_scenes, gen_toy, SceneSpec, SplitDataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::nets::{Model, ModelConfig};
use crate::objectives::LossConfig;
use crate::rng::Rng;

pub use ablate::{ablate, AblationCell, AblationReport, DeltaRow, Grid};
pub use eval::{eval_forecast, eval_model, eval_toy, toy_kl, EvalDetail, ForecastEval, ToyEval};
pub use report::{aggregate, MetricReport};
pub use train::{build_model, train, trace_health, TraceHealth, TraceRow, TrainOutcome};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "CU_LAB_SEED";

const PRESETS: [(&str, &str); 4] = [
    ("toy", include_str!("../../presets/toy.toml")),
    ("toy-reduced", include_str!("../../presets/toy-reduced.toml")),
    ("toy-smoke", include_str!("../../presets/toy-smoke.toml")),
    ("scenes", include_str!("../../presets/scenes.toml")),
];

/// Names of the built-in presets.
pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|p| p.0)
}

pub fn preset(name: &str) -> Result<RunConfig> {
    let (_, text) = PRESETS.iter().find(|p| p.0 == name).ok_or_else(|| {
        Error::Config(format!("unknown preset `{name}` (known: {})", preset_names().collect::<Vec<_>>().join(", ")))
    })?;
    RunConfig::from_toml(text)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub name: String,
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { name: "run".into(), seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Toy,
    Scenes,
    /// A directory written by `gen-data`.
    Files,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    /// Seed of the generator; the run seed when absent.
    pub seed: Option<u64>,
    pub toy: SyntheticSpec,
    pub scenes: SceneSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { source: DataSource::Toy, path: None, seed: None, toy: SyntheticSpec::default(), scenes: SceneSpec::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { optimizer: OptimizerKind::Sgd, lr: 1e-3, steps: 20_000, batch: 32, clip: 5.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Validation cadence in steps; `0` keeps the final parameters.
    pub every: usize,
    /// Validation instances used for checkpoint selection.
    pub val_instances: usize,
    /// Monte-Carlo draws per instance for the validation KL.
    pub val_kl_samples: usize,
    /// Monte-Carlo draws per instance for the test KL.
    pub kl_samples: usize,
    /// Bins of the stochasticity-uncertainty curve.
    pub curve_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { every: 1000, val_instances: 200, val_kl_samples: 200, kl_samples: 2000, curve_bins: 10 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub grid: Option<Grid>,
    /// Scene coupling per dataset of the grid; the configured scenes only
    /// when empty.
    pub couplings: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let o = &self.optim;
        if !(o.lr >= 0.0) || !o.lr.is_finite() {
            return Err(Error::Config(format!("lr must be non-negative, got {}", o.lr)));
        }
        if o.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(o.clip >= 0.0) {
            return Err(Error::Config(format!("clip must be non-negative, got {}", o.clip)));
        }
        if self.eval.val_kl_samples < 2 || self.eval.kl_samples < 2 || self.eval.curve_bins == 0 {
            return Err(Error::Config("eval sample counts must be at least 2 and curve_bins positive".into()));
        }
        if self.data.source == DataSource::Files && self.data.path.is_none() {
            return Err(Error::Config("data.source = \"files\" needs data.path".into()));
        }
        Ok(())
    }

    /// Applies `CU_LAB_SEED` and then an explicit seed, in that order of
    /// precedence (the explicit seed wins).
    pub fn with_seed_overrides(mut self, explicit: Option<u64>) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.run.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        if let Some(s) = explicit {
            self.run.seed = s;
        }
        Ok(self)
    }

    /// Checks that referenced paths exist.
    pub fn check_paths(&self) -> Result<()> {
        if let (DataSource::Files, Some(p)) = (self.data.source, &self.data.path) {
            if !p.is_dir() {
                return Err(Error::Config(format!("data directory {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.run.seed)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("configuration serialises");
        hex::encode(Sha256::digest(json))
    }
}

/// Loads or generates the dataset a configuration refers to.
pub fn load_data(cfg: &RunConfig) -> Result<SplitDataset> {
    cfg.check_paths()?;
    match cfg.data.source {
        DataSource::Toy => gen_toy(&SyntheticSpec { seed: cfg.data_seed(), ..cfg.data.toy.clone() }),
        DataSource::Scenes => gen_scenes(&SceneSpec { seed: cfg.data_seed(), ..cfg.data.scenes.clone() }),
        DataSource::Files => SplitDataset::load_dir(cfg.data.path.as_ref().expect("validated")),
    }
}

/// Everything needed to trace a trained model back to its inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub config_hash: String,
    pub data_hash: String,
    pub checkpoint_hash: String,
    pub steps: usize,
    pub best_step: usize,
    pub validation: Vec<(usize, f64)>,
    pub health: TraceHealth,
    pub wall_clock_secs: f64,
}

fn trace_csv(trace: &[TraceRow]) -> String {
    let header: Vec<String> = ["step", "total", "lap_cu", "autl", "grad_norm"].map(String::from).to_vec();
    let rows: Vec<Vec<String>> = trace
        .iter()
        .map(|r| vec![r.step.to_string(), format!("{:?}", r.total), format!("{:?}", r.lap_cu), format!("{:?}", r.autl), format!("{:?}", r.grad_norm)])
        .collect();
    report::csv_string(&header, &rows)
}

/// Writes a dataset to `out/data/`; returns its content hash.
pub fn run_gen_data(cfg: &RunConfig, out: &Path) -> Result<String> {
    let data = load_data(cfg)?;
    data.save_dir(out.join("data"))?;
    data.content_hash()
}

/// Trains and writes `model.ckpt`, `trace.csv`, `config.toml` and
/// `run.json` into `out`.
pub fn run_train(cfg: &RunConfig, data: &SplitDataset, out: &Path) -> Result<(TrainOutcome, RunRecord)> {
    let start = std::time::Instant::now();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let outcome = train(cfg, data, Some(out))?;
    let ckpt = out.join("model.ckpt");
    outcome.model.save(&ckpt)?;
    write_file(&out.join("trace.csv"), trace_csv(&outcome.trace).as_bytes())?;
    write_file(&out.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    let record = RunRecord {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        data_hash: data.content_hash()?,
        checkpoint_hash: file_hash(&ckpt)?,
        steps: outcome.trace.len(),
        best_step: outcome.best_step,
        validation: outcome.validation.clone(),
        health: trace_health(&outcome.trace, 100, 500),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    write_file(&out.join("run.json"), serde_json::to_string_pretty(&record).expect("json").as_bytes())?;
    Ok((outcome, record))
}

/// Test-split report of a model.
pub fn evaluate(cfg: &RunConfig, model: &Model, data: &SplitDataset, data_hash: &str) -> Result<MetricReport> {
    let rng = Rng::new(cfg.run.seed).split(train::STREAM_TEST);
    let detail = eval_model(model, &data.test.instances, data.test.task(), cfg.eval.kl_samples, cfg.eval.curve_bins, &rng)?;
    Ok(MetricReport {
        name: cfg.run.name.clone(),
        split: "test".into(),
        seed: cfg.run.seed,
        estimator: model.config().estimator.label().into(),
        interaction: ablate::interaction_label(model.config().interaction).into(),
        config_hash: cfg.hash(),
        data_hash: data_hash.into(),
        metrics: detail.values().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        detail,
    })
}

/// Evaluates the checkpoint in `out` and writes `metrics.{csv,json}`
/// beside it. The checkpoint is verified unchanged afterwards.
pub fn run_eval(cfg: &RunConfig, data: &SplitDataset, out: &Path) -> Result<MetricReport> {
    let ckpt = out.join("model.ckpt");
    let before = file_hash(&ckpt)?;
    let model = Model::load(&ckpt)?;
    let report = evaluate(cfg, &model, data, &data.content_hash()?)?;
    if file_hash(&ckpt)? != before {
        return Err(Error::Contract(format!("{} changed during evaluation", ckpt.display())));
    }
    report.write(out)?;
    Ok(report)
}

/// Train then evaluate; writes all artifacts when `out` is given.
pub fn run_cell(cfg: &RunConfig, data: &SplitDataset, out: Option<&Path>) -> Result<(TrainOutcome, MetricReport)> {
    match out {
        Some(dir) => {
            let (outcome, _) = run_train(cfg, data, dir)?;
            let report = run_eval(cfg, data, dir)?;
            Ok((outcome, report))
        }
        None => {
            let outcome = train(cfg, data, None)?;
            let report = evaluate(cfg, &outcome.model, data, &data.content_hash()?)?;
            Ok((outcome, report))
        }
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse() {
        for name in preset_names() {
            preset(name).unwrap();
        }
        assert!(preset("nope").is_err());
    }

    #[test]
    fn empty_config_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("[optim]\nlearning_rate = 1.0\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[optim]\nbatch = 0\n"), Err(Error::Config(_))));
    }

    #[test]
    fn toml_roundtrip_keeps_hash() {
        let cfg = preset("scenes").unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let other = RunConfig { run: RunSection { seed: 9, ..cfg.run.clone() }, ..cfg.clone() };
        assert_ne!(other.hash(), cfg.hash());
    }
}
