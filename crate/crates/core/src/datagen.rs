//! Synthetic datasets and their on-disk format.
//!
//! Two generators are provided:
//!
//! - [`gen_toy`]: straight-line agents corrupted by multivariate Laplace
//!   noise coupled across agents. The model sees the noisy sample and has
//!   to recover the mean trajectory and the agent-by-agent covariance
//!   ([`Task::Density`]).
//! - [`gen_scenes`]: small multi-modal forecasting scenes in which every
//!   agent follows one behaviour archetype after the present, and followers
//!   copy the leader's archetype with a configurable probability
//!   ([`Task::Forecast`]).
//!
//! # File format
//!
//! A dataset split is a text file of JSON lines. The first line is the
//! header:
//!
//! ```text
//! {"version":1,"task":"density","m":4,"t_minus":50,"t_plus":0,"count":3600,"generator":{...}}
//! ```
//!
//! followed by exactly `count` record lines:
//!
//! ```text
//! {"id":"train-000000","past":[...],"future":[...],"gt_mean":[...],"gt_sigma":[...],"gt_lambda":1.0}
//! ```
//!
//! Arrays are flattened row-major. `past` has `2·t_minus` rows (x and y of
//! each timestamp interleaved) and `m` columns, one per agent; `future` has
//! `2·t_plus` rows. Floats are written in their shortest round-trip form,
//! so saving and loading is bit-exact.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::Rng;
use crate::stats::MvnParams;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Recover the distribution of the observed sample; the target is `past`.
    Density,
    /// Predict `future` from `past`.
    Forecast,
}

/// Behaviour labels of a generated scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneLabels {
    pub archetypes: Vec<usize>,
    pub leader: usize,
}

/// One scene: `past` is `2T₋ × m`, `future` is `2T₊ × m`.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub id: String,
    pub past: Matrix,
    pub future: Matrix,
    pub gt_mean: Option<Matrix>,
    pub gt_sigma: Option<Matrix>,
    pub gt_lambda: Option<f64>,
    pub labels: Option<SceneLabels>,
}

impl Instance {
    pub fn agents(&self) -> usize {
        self.past.cols()
    }

    /// Regression target for `task`.
    pub fn target(&self, task: Task) -> &Matrix {
        match task {
            Task::Density => &self.past,
            Task::Forecast => &self.future,
        }
    }

    /// Covariance of the generating law, `λ·Σ_gt`.
    pub fn gt_covariance(&self) -> Option<Matrix> {
        Some(self.gt_sigma.as_ref()?.scale(self.gt_lambda?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub task: Task,
    pub m: usize,
    pub t_minus: usize,
    pub t_plus: usize,
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<serde_json::Value>,
}

/// One split of instances sharing extents.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub instances: Vec<Instance>,
}

/// Train, validation and test splits.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    past: Vec<f64>,
    future: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_sigma: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<SceneLabels>,
}

impl Dataset {
    pub fn new(
        task: Task,
        m: usize,
        t_minus: usize,
        t_plus: usize,
        generator: Option<serde_json::Value>,
        instances: Vec<Instance>,
    ) -> Result<Self> {
        let header = DatasetHeader {
            version: FORMAT_VERSION,
            task,
            m,
            t_minus,
            t_plus,
            count: instances.len(),
            generator,
        };
        let ds = Self { header, instances };
        for (i, inst) in ds.instances.iter().enumerate() {
            ds.validate(inst).map_err(|e| Error::Validation(format!("instance {i}: {e}")))?;
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn task(&self) -> Task {
        self.header.task
    }

    fn validate(&self, inst: &Instance) -> std::result::Result<(), String> {
        let h = &self.header;
        let check = |name: &str, m: &Matrix, rows: usize| {
            if m.rows() != rows || m.cols() != h.m {
                Err(format!(
                    "{name} is {}x{}, header declares {rows}x{}",
                    m.rows(),
                    m.cols(),
                    h.m
                ))
            } else {
                Ok(())
            }
        };
        check("past", &inst.past, 2 * h.t_minus)?;
        check("future", &inst.future, 2 * h.t_plus)?;
        let target_rows = match h.task {
            Task::Density => 2 * h.t_minus,
            Task::Forecast => 2 * h.t_plus,
        };
        let has_gt = [inst.gt_mean.is_some(), inst.gt_sigma.is_some(), inst.gt_lambda.is_some()];
        match h.task {
            Task::Density => {
                if has_gt.contains(&false) {
                    return Err("density instances carry gt_mean, gt_sigma and gt_lambda".into());
                }
                check("gt_mean", inst.gt_mean.as_ref().unwrap(), target_rows)?;
                let s = inst.gt_sigma.as_ref().unwrap();
                if s.rows() != h.m || s.cols() != h.m {
                    return Err(format!("gt_sigma is {}x{}", s.rows(), s.cols()));
                }
                let l = inst.gt_lambda.unwrap();
                if !(l > 0.0) {
                    return Err(format!("gt_lambda must be positive, got {l}"));
                }
            }
            Task::Forecast => {
                if has_gt.contains(&true) {
                    return Err("forecast instances carry no distribution parameters".into());
                }
            }
        }
        if let Some(labels) = &inst.labels {
            if labels.archetypes.len() != h.m || labels.leader >= h.m {
                return Err("labels do not match the agent count".into());
            }
        }
        Ok(())
    }

    fn to_record(inst: &Instance) -> Record {
        Record {
            id: inst.id.clone(),
            past: inst.past.data().to_vec(),
            future: inst.future.data().to_vec(),
            gt_mean: inst.gt_mean.as_ref().map(|m| m.data().to_vec()),
            gt_sigma: inst.gt_sigma.as_ref().map(|m| m.data().to_vec()),
            gt_lambda: inst.gt_lambda,
            labels: inst.labels.clone(),
        }
    }

    fn decode_record(&self, r: Record) -> Result<Instance> {
        let h = &self.header;
        let mat = |name: &str, rows: usize, data: Vec<f64>| {
            if data.len() != rows * h.m {
                return Err(Error::Validation(format!(
                    "{name} holds {} values ({} rows of {}), header declares {rows} rows",
                    data.len(),
                    data.len() as f64 / h.m.max(1) as f64,
                    h.m
                )));
            }
            Matrix::new(rows, h.m, data)
        };
        let target_rows = match h.task {
            Task::Density => 2 * h.t_minus,
            Task::Forecast => 2 * h.t_plus,
        };
        let inst = Instance {
            past: mat("past", 2 * h.t_minus, r.past)?,
            future: mat("future", 2 * h.t_plus, r.future)?,
            gt_mean: r.gt_mean.map(|d| mat("gt_mean", target_rows, d)).transpose()?,
            gt_sigma: r
                .gt_sigma
                .map(|d| {
                    if d.len() != h.m * h.m {
                        return Err(Error::Validation(format!(
                            "gt_sigma holds {} values, expected {}",
                            d.len(),
                            h.m * h.m
                        )));
                    }
                    Matrix::new(h.m, h.m, d)
                })
                .transpose()?,
            gt_lambda: r.gt_lambda,
            labels: r.labels,
            id: r.id,
        };
        self.validate(&inst).map_err(Error::Validation)?;
        Ok(inst)
    }

    /// Serialized bytes of the whole split.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let json = |e: serde_json::Error| Error::Numeric(format!("serialization failed: {e}"));
        serde_json::to_writer(&mut out, &self.header).map_err(json)?;
        out.push(b'\n');
        for inst in &self.instances {
            serde_json::to_writer(&mut out, &Self::to_record(inst)).map_err(json)?;
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(BufReader::new(f))
    }

    pub fn read(reader: impl BufRead) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        let parse_err = |line: usize, message: String| Error::Parse { line: line + 1, message };
        let (n0, first) = lines.next().ok_or_else(|| parse_err(0, "empty file".into()))?;
        let first = first.map_err(|e| parse_err(n0, e.to_string()))?;
        let header: DatasetHeader =
            serde_json::from_str(&first).map_err(|e| parse_err(n0, format!("bad header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(parse_err(n0, format!("unsupported version {}", header.version)));
        }
        let mut ds = Dataset { header, instances: Vec::new() };
        for (n, line) in lines {
            let line = line.map_err(|e| parse_err(n, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(n, e.to_string()))?;
            let inst = ds.decode_record(rec).map_err(|e| match e {
                Error::Validation(msg) => Error::Validation(format!("line {}: {msg}", n + 1)),
                other => other,
            })?;
            ds.instances.push(inst);
        }
        if ds.instances.len() != ds.header.count {
            return Err(Error::Validation(format!(
                "header declares {} records, found {}",
                ds.header.count,
                ds.instances.len()
            )));
        }
        Ok(ds)
    }

    /// SHA-256 of the serialized split.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

impl SplitDataset {
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.train.save(dir.join("train.jsonl"))?;
        self.val.save(dir.join("val.jsonl"))?;
        self.test.save(dir.join("test.jsonl"))
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Ok(Self {
            train: Dataset::load(dir.join("train.jsonl"))?,
            val: Dataset::load(dir.join("val.jsonl"))?,
            test: Dataset::load(dir.join("test.jsonl"))?,
        })
    }

    /// Hash over all three splits.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for d in [&self.train, &self.val, &self.test] {
            h.update(d.to_bytes()?);
        }
        Ok(hex::encode(h.finalize()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Counts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Counts {
    fn validate(&self) -> Result<()> {
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return Err(Error::Config(format!("all split counts must be positive, got {self:?}")));
        }
        Ok(())
    }
}

/// How many exponential mixing draws a toy instance uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhiDraw {
    /// One draw per (timestamp, coordinate) slice: slices are i.i.d. Laplace.
    PerSlice,
    /// One draw shared by the whole instance.
    PerInstance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionRanges {
    /// Initial coordinates are uniform in `[-position, position]`.
    pub position: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    /// Agent slot `j` heads along `2πj/m`, jittered uniformly by this much.
    pub heading_jitter: f64,
}

impl Default for MotionRanges {
    fn default() -> Self {
        Self { position: 10.0, speed_min: 0.1, speed_max: 1.0, heading_jitter: 0.3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub m: usize,
    pub timestamps: usize,
    /// Laplace scale matrix `Σ_gt`; drawn from `seed` when absent.
    pub sigma_gt: Option<Matrix>,
    pub lambda_gt: f64,
    pub counts: Counts,
    pub seed: u64,
    pub motion: MotionRanges,
    pub phi_draw: PhiDraw,
    /// Present agents in a random order per instance, conjugating `Σ_gt`.
    pub shuffle_agents: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            m: 4,
            timestamps: 50,
            sigma_gt: None,
            lambda_gt: 1.0,
            counts: Counts { train: 36_000, val: 7_000, test: 7_000 },
            seed: 0,
            motion: MotionRanges::default(),
            phi_draw: PhiDraw::PerSlice,
            shuffle_agents: true,
        }
    }
}

impl SyntheticSpec {
    /// `Σ_gt`, either given or drawn from the seed.
    pub fn resolved_sigma(&self) -> Result<Matrix> {
        let sigma = match &self.sigma_gt {
            Some(s) => s.clone(),
            None => random_spd(self.m, 0.3, 2.0, &mut Rng::new(self.seed).split(u64::MAX)),
        };
        MvnParams::new(vec![0.0; self.m], sigma.clone())?;
        Ok(sigma)
    }
}

/// `Q·diag(λ)·Qᵀ` with a Haar-random rotation `Q` and eigenvalues in
/// `[lo, hi]`; both end points are always part of the spectrum.
pub fn random_spd(n: usize, lo: f64, hi: f64, rng: &mut Rng) -> Matrix {
    let mut eig: Vec<f64> = (0..n).map(|_| rng.uniform_range(lo, hi)).collect();
    if n >= 2 {
        eig[0] = lo;
        eig[n - 1] = hi;
    }
    // Gram-Schmidt on a Gaussian matrix gives a Haar rotation
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    while q.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            q.push(v);
        }
    }
    let mut s = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v: f64 = (0..n).map(|k| q[k][i] * eig[k] * q[k][j]).sum();
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    s
}

fn split_stream(split: usize, index: usize) -> u64 {
    ((split as u64) << 40) | index as u64
}

/// Generates the toy density-estimation dataset.
pub fn gen_toy(spec: &SyntheticSpec) -> Result<SplitDataset> {
    spec.counts.validate()?;
    if spec.m == 0 || spec.timestamps == 0 {
        return Err(Error::Config("toy spec needs m > 0 and timestamps > 0".into()));
    }
    if !(spec.lambda_gt > 0.0) {
        return Err(Error::Domain(format!("λ_gt must be positive, got {}", spec.lambda_gt)));
    }
    let sigma = spec.resolved_sigma()?;
    let noise = MvnParams::new(vec![0.0; spec.m], sigma.clone())?;
    let root = Rng::new(spec.seed);
    let generator = serde_json::json!({
        "kind": "toy",
        "spec": spec,
        "sigma_gt": sigma,
    });
    let counts = [spec.counts.train, spec.counts.val, spec.counts.test];
    let names = ["train", "val", "test"];
    let mut splits = Vec::with_capacity(3);
    for (s, (&count, name)) in counts.iter().zip(names).enumerate() {
        let instances = (0..count)
            .map(|i| {
                let mut rng = root.split(split_stream(s, i));
                toy_instance(spec, &sigma, &noise, &mut rng, format!("{name}-{i:06}"))
            })
            .collect::<Vec<_>>();
        splits.push(Dataset::new(
            Task::Density,
            spec.m,
            spec.timestamps,
            0,
            Some(generator.clone()),
            instances,
        )?);
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(SplitDataset { train, val, test })
}

fn toy_instance(
    spec: &SyntheticSpec,
    sigma: &Matrix,
    noise: &MvnParams,
    rng: &mut Rng,
    id: String,
) -> Instance {
    let m = spec.m;
    let rows = 2 * spec.timestamps;
    let mo = &spec.motion;
    let mut mean = Matrix::zeros(rows, m);
    for slot in 0..m {
        let x0 = rng.uniform_range(-mo.position, mo.position);
        let y0 = rng.uniform_range(-mo.position, mo.position);
        let speed = rng.uniform_range(mo.speed_min, mo.speed_max);
        let heading = std::f64::consts::TAU * slot as f64 / m as f64
            + rng.uniform_range(-mo.heading_jitter, mo.heading_jitter);
        let (vx, vy) = (speed * heading.cos(), speed * heading.sin());
        for t in 0..spec.timestamps {
            mean[(2 * t, slot)] = x0 + vx * t as f64;
            mean[(2 * t + 1, slot)] = y0 + vy * t as f64;
        }
    }
    let shared_phi = crate::stats::exp_from_uniform(spec.lambda_gt, rng.uniform_open_closed());
    let mut sample = mean.clone();
    for r in 0..rows {
        let g = noise.sample_one(rng);
        let phi = match spec.phi_draw {
            PhiDraw::PerSlice => crate::stats::exp_from_uniform(spec.lambda_gt, rng.uniform_open_closed()),
            PhiDraw::PerInstance => shared_phi,
        };
        let s = phi.sqrt();
        for slot in 0..m {
            sample[(r, slot)] += g[slot] * s;
        }
    }
    let perm: Vec<usize> = if spec.shuffle_agents { rng.permutation(m) } else { (0..m).collect() };
    Instance {
        id,
        past: permute_columns(&sample, &perm),
        future: Matrix::zeros(0, m),
        gt_mean: Some(permute_columns(&mean, &perm)),
        gt_sigma: Some(sigma.conjugate_by_permutation(&perm)),
        gt_lambda: Some(spec.lambda_gt),
        labels: None,
    }
}

/// Moves column `i` to position `perm[i]`.
pub fn permute_columns(a: &Matrix, perm: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), a.cols());
    for r in 0..a.rows() {
        for (c, &p) in perm.iter().enumerate() {
            out[(r, p)] = a[(r, c)];
        }
    }
    out
}

/// Post-present behaviour of an agent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Archetype {
    Straight,
    Stop,
    TurnLeft,
    TurnRight,
}

impl Archetype {
    pub const ALL: [Archetype; 4] =
        [Archetype::Straight, Archetype::Stop, Archetype::TurnLeft, Archetype::TurnRight];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub m: usize,
    /// Number of archetypes in play, taken from [`Archetype::ALL`] in order.
    pub archetypes: usize,
    /// Probability that a follower copies the leader's archetype.
    pub coupling: f64,
    /// Standard deviation of isotropic observation noise.
    pub noise: f64,
    pub t_minus: usize,
    pub t_plus: usize,
    /// Steps before the present at which the leader starts its manoeuvre.
    pub lead_in: usize,
    pub counts: Counts,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            m: 4,
            archetypes: 3,
            coupling: 0.8,
            noise: 0.05,
            t_minus: 8,
            t_plus: 12,
            lead_in: 3,
            counts: Counts { train: 2000, val: 300, test: 500 },
            seed: 0,
        }
    }
}

impl SceneSpec {
    fn validate(&self) -> Result<()> {
        self.counts.validate()?;
        if self.archetypes < 2 || self.archetypes > Archetype::ALL.len() {
            return Err(Error::Config(format!(
                "scenes need between 2 and {} archetypes, got {}",
                Archetype::ALL.len(),
                self.archetypes
            )));
        }
        if !(0.0..=1.0).contains(&self.coupling) {
            return Err(Error::Config(format!("coupling must lie in [0, 1], got {}", self.coupling)));
        }
        if self.m == 0 || self.t_minus == 0 || self.t_plus == 0 {
            return Err(Error::Config("scenes need m, t_minus and t_plus > 0".into()));
        }
        if self.lead_in >= self.t_minus {
            return Err(Error::Config("lead_in must be shorter than the past window".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config(format!("noise must be non-negative, got {}", self.noise)));
        }
        Ok(())
    }
}

const TURN_RATE: f64 = 0.15;
const MAX_TURN: f64 = std::f64::consts::FRAC_PI_2;
const STOP_STEPS: f64 = 6.0;

/// Position track for steps `-(t_minus-1)..=t_plus`, manoeuvring from `start`.
fn track(
    arche: Archetype,
    origin: (f64, f64),
    speed: f64,
    heading: f64,
    start: i64,
    t_minus: usize,
    t_plus: usize,
) -> Vec<(f64, f64)> {
    let first = -(t_minus as i64) + 1;
    let mut pos = origin;
    let mut out = Vec::with_capacity(t_minus + t_plus);
    out.push(pos);
    for t in first + 1..=t_plus as i64 {
        let since = (t - start).max(0) as f64;
        let (s, h) = match arche {
            Archetype::Straight => (speed, heading),
            Archetype::Stop => (speed * (1.0 - since / STOP_STEPS).max(0.0), heading),
            Archetype::TurnLeft => (speed, heading + (TURN_RATE * since).min(MAX_TURN)),
            Archetype::TurnRight => (speed, heading - (TURN_RATE * since).min(MAX_TURN)),
        };
        pos = (pos.0 + s * h.cos(), pos.1 + s * h.sin());
        out.push(pos);
    }
    out
}

/// Generates multi-modal forecasting scenes.
pub fn gen_scenes(spec: &SceneSpec) -> Result<SplitDataset> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let generator = serde_json::json!({ "kind": "scenes", "spec": spec });
    let counts = [spec.counts.train, spec.counts.val, spec.counts.test];
    let names = ["train", "val", "test"];
    let mut splits = Vec::with_capacity(3);
    for (s, (&count, name)) in counts.iter().zip(names).enumerate() {
        let instances = (0..count)
            .map(|i| scene_instance(spec, &mut root.split(split_stream(s, i)), format!("{name}-{i:06}")))
            .collect::<Vec<_>>();
        splits.push(Dataset::new(
            Task::Forecast,
            spec.m,
            spec.t_minus,
            spec.t_plus,
            Some(generator.clone()),
            instances,
        )?);
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(SplitDataset { train, val, test })
}

fn scene_instance(spec: &SceneSpec, rng: &mut Rng, id: String) -> Instance {
    let m = spec.m;
    let leader_arch = rng.below(spec.archetypes);
    let mut arch = vec![leader_arch; m];
    for a in arch.iter_mut().skip(1) {
        if !rng.bernoulli(spec.coupling) {
            *a = rng.below(spec.archetypes);
        }
    }
    let mut past = Matrix::zeros(2 * spec.t_minus, m);
    let mut future = Matrix::zeros(2 * spec.t_plus, m);
    let mut slots = Vec::with_capacity(m);
    for (slot, &a) in arch.iter().enumerate() {
        let origin = (rng.uniform_range(-10.0, 10.0), rng.uniform_range(-10.0, 10.0));
        let speed = rng.uniform_range(0.5, 1.5);
        let heading = rng.uniform_range(0.0, std::f64::consts::TAU);
        let start = if slot == 0 { -(spec.lead_in as i64) } else { 0 };
        slots.push(track(Archetype::ALL[a], origin, speed, heading, start, spec.t_minus, spec.t_plus));
    }
    let perm = rng.permutation(m);
    for (slot, tr) in slots.iter().enumerate() {
        let col = perm[slot];
        for (t, &(x, y)) in tr.iter().enumerate() {
            let nx = spec.noise * rng.standard_normal();
            let ny = spec.noise * rng.standard_normal();
            let (dst, row) = if t < spec.t_minus {
                (&mut past, t)
            } else {
                (&mut future, t - spec.t_minus)
            };
            dst[(2 * row, col)] = x + nx;
            dst[(2 * row + 1, col)] = y + ny;
        }
    }
    let mut archetypes = vec![0; m];
    for (slot, &a) in arch.iter().enumerate() {
        archetypes[perm[slot]] = a;
    }
    Instance {
        id,
        past,
        future,
        gt_mean: None,
        gt_sigma: None,
        gt_lambda: None,
        labels: Some(SceneLabels { archetypes, leader: perm[0] }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::sample_moments;

    fn small_toy(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            counts: Counts { train: 20, val: 5, test: 5 },
            seed,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn default_spec_matches_published_sizes() {
        let spec = SyntheticSpec::default();
        assert_eq!(spec.counts, Counts { train: 36_000, val: 7_000, test: 7_000 });
        assert_eq!((spec.m, 2 * spec.timestamps), (4, 100));
    }

    #[test]
    fn toy_shapes_and_determinism() {
        let a = gen_toy(&small_toy(3)).unwrap();
        let b = gen_toy(&small_toy(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (20, 5, 5));
        let inst = &a.train.instances[0];
        assert_eq!((inst.past.rows(), inst.past.cols()), (100, 4));
        assert_ne!(a, gen_toy(&small_toy(4)).unwrap());
    }

    #[test]
    fn toy_rejects_degenerate_sigma() {
        let spec = SyntheticSpec { sigma_gt: Some(Matrix::zeros(4, 4)), ..small_toy(1) };
        assert!(matches!(gen_toy(&spec), Err(Error::Definiteness(_))));
        let spec = SyntheticSpec { counts: Counts { train: 0, val: 1, test: 1 }, ..small_toy(1) };
        assert!(matches!(gen_toy(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn default_sigma_spectrum() {
        let s = small_toy(9).resolved_sigma().unwrap();
        let ev = s.symmetric_eigenvalues().unwrap();
        assert!((ev[0] - 0.3).abs() < 1e-12 && (ev[3] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn pooled_noise_covariance_converges_to_lambda_sigma() {
        let spec = SyntheticSpec {
            counts: Counts { train: 10_000, val: 1, test: 1 },
            lambda_gt: 1.5,
            shuffle_agents: false,
            seed: 17,
            ..SyntheticSpec::default()
        };
        let data = gen_toy(&spec).unwrap();
        let mut noise = Vec::with_capacity(10_000 * 100);
        for inst in &data.train.instances {
            let mean = inst.gt_mean.as_ref().unwrap();
            for r in 0..inst.past.rows() {
                noise.push((0..4).map(|c| inst.past[(r, c)] - mean[(r, c)]).collect::<Vec<_>>());
            }
        }
        let (_, cov) = sample_moments(&noise);
        let target = spec.resolved_sigma().unwrap().scale(1.5);
        assert!(cov.max_abs_diff(&target) < 0.05 * target.max_abs());
    }

    #[test]
    fn shuffled_instances_carry_conjugated_sigma() {
        let spec = small_toy(5);
        let sigma = spec.resolved_sigma().unwrap();
        let data = gen_toy(&spec).unwrap();
        let mut seen_nontrivial = false;
        for inst in &data.train.instances {
            let s = inst.gt_sigma.as_ref().unwrap();
            let ev = s.symmetric_eigenvalues().unwrap();
            let ev0 = sigma.symmetric_eigenvalues().unwrap();
            assert!(ev.iter().zip(&ev0).all(|(a, b)| (a - b).abs() < 1e-12));
            seen_nontrivial |= s != &sigma;
        }
        assert!(seen_nontrivial);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let data = gen_toy(&SyntheticSpec { counts: Counts { train: 100, val: 1, test: 1 }, ..small_toy(2) })
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        data.train.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back, data.train);
        for (a, b) in back.instances.iter().zip(&data.train.instances) {
            assert!(a.past.data().iter().zip(b.past.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let data = gen_toy(&small_toy(2)).unwrap();
        let bytes = data.train.to_bytes().unwrap();
        let cut = &bytes[..bytes.len() / 2];
        let err = Dataset::read(cut).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");

        // whole records missing
        let text = String::from_utf8(bytes).unwrap();
        let short: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
        assert!(matches!(Dataset::read(short.as_bytes()), Err(Error::Validation(_))));
    }

    #[test]
    fn extent_mismatch_is_a_validation_error() {
        let data = gen_toy(&small_toy(2)).unwrap();
        let text = String::from_utf8(data.train.to_bytes().unwrap()).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut rec: serde_json::Value = serde_json::from_str(&lines[1]).unwrap();
        let past = rec["past"].as_array_mut().unwrap();
        past.truncate(99 * 4);
        lines[1] = rec.to_string();
        let err = Dataset::read(lines.join("\n").as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains("line 2")), "{err}");
    }

    #[test]
    fn scenes_full_coupling_copies_leader() {
        let spec = SceneSpec {
            archetypes: 2,
            coupling: 1.0,
            counts: Counts { train: 200, val: 1, test: 1 },
            ..SceneSpec::default()
        };
        let data = gen_scenes(&spec).unwrap();
        for inst in &data.train.instances {
            let l = inst.labels.as_ref().unwrap();
            assert!(l.archetypes.iter().all(|&a| a == l.archetypes[l.leader]));
        }
    }

    #[test]
    fn scenes_zero_coupling_is_uncorrelated() {
        let n = 4000;
        let spec = SceneSpec {
            coupling: 0.0,
            counts: Counts { train: n, val: 1, test: 1 },
            seed: 3,
            ..SceneSpec::default()
        };
        let data = gen_scenes(&spec).unwrap();
        let pairs: Vec<(f64, f64)> = data
            .train
            .instances
            .iter()
            .map(|inst| {
                let l = inst.labels.as_ref().unwrap();
                let follower = (0..spec.m).find(|&i| i != l.leader).unwrap();
                (l.archetypes[l.leader] as f64, l.archetypes[follower] as f64)
            })
            .collect();
        let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n as f64;
        let my = pairs.iter().map(|p| p.1).sum::<f64>() / n as f64;
        let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pairs.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let syy: f64 = pairs.iter().map(|p| (p.1 - my).powi(2)).sum();
        let corr = sxy / (sxx * syy).sqrt();
        assert!(corr.abs() < 3.0 / (n as f64).sqrt(), "{corr}");
    }

    #[test]
    fn scenes_are_byte_deterministic() {
        let spec = SceneSpec { counts: Counts { train: 30, val: 5, test: 5 }, seed: 11, ..SceneSpec::default() };
        let a = gen_scenes(&spec).unwrap();
        let b = gen_scenes(&spec).unwrap();
        assert_eq!(a.content_hash().unwrap(), b.content_hash().unwrap());
    }

    #[test]
    fn scenes_need_two_archetypes() {
        let spec = SceneSpec { archetypes: 1, ..SceneSpec::default() };
        assert!(matches!(gen_scenes(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn straight_track_is_uniform() {
        let t = track(Archetype::Straight, (0.0, 0.0), 1.0, 0.0, 0, 3, 2);
        let xs: Vec<f64> = t.iter().map(|p| p.0).collect();
        assert_eq!(xs, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        let s = track(Archetype::Stop, (0.0, 0.0), 1.0, 0.0, 0, 1, 10);
        assert_eq!(s[9].0, s[10].0);
    }
}
