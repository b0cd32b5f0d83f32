//! Learnable components: trajectory encoder, per-mode mean heads, the
//! auxiliary Φ̂ head and three interchangeable estimators of Σ̂⁻¹.
//!
//! Everything is evaluated on a batch at once. Agents of all instances are
//! stacked as rows, so an instance with `m` agents occupies `m` consecutive
//! rows; per-instance matrices (attention weights, Σ̂⁻¹) are stacked the same
//! way as `B·m × m` blocks. Inside the graph a trajectory is one row of
//! length `2T` (x and y interleaved per step), the transpose of the
//! [`Instance`](crate::datagen::Instance) layout.
//!
//! Estimators:
//!
//! - [`EstimatorKind::PeCu`]: `Σ̂⁻¹ = E′E′ᵀ + τI` with the rows of `E′`
//!   produced by a shared per-agent network. Permutation-equivariant and
//!   positive definite with smallest eigenvalue at least `τ`.
//! - [`EstimatorKind::CuNpe`]: `Σ̂⁻¹ = LDLᵀ` read off a network that sees the
//!   agents concatenated in their input order. Positive definite but not
//!   equivariant.
//! - [`EstimatorKind::IuOnly`]: diagonal `Σ̂⁻¹`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::Rng;
use crate::tensor::{Bound, Graph, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    PeCu,
    CuNpe,
    IuOnly,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [EstimatorKind::IuOnly, EstimatorKind::CuNpe, EstimatorKind::PeCu];

    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::PeCu => "pe-cu",
            EstimatorKind::CuNpe => "cu-npe",
            EstimatorKind::IuOnly => "iu-only",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interaction {
    None,
    Attention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositivityMap {
    Softplus,
    Exp,
}

/// Reference point subtracted from each agent's input and added back to
/// its predicted means.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Anchor {
    None,
    /// Mean position over the past window.
    Centroid,
    /// Last observed position.
    Last,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub layers: usize,
    pub k: usize,
    pub tau: f64,
    pub estimator: EstimatorKind,
    pub interaction: Interaction,
    pub activation: Activation,
    pub init_seed: u64,
    pub phi_map: PositivityMap,
    /// Polynomial degree of the mean decoder; `None` outputs every step.
    pub decoder_degree: Option<usize>,
    /// Width of the rows of `E′` (pe-cu) or of the per-agent code (cu-npe).
    pub embed: usize,
    pub anchor: Anchor,
    /// Positions are divided by this before entering the network.
    pub input_scale: f64,
    /// Cut gradients from the Φ̂ and Σ̂⁻¹ heads into the means.
    pub stop_grad_mean: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 3,
            k: 1,
            tau: 1e-3,
            estimator: EstimatorKind::PeCu,
            interaction: Interaction::None,
            activation: Activation::Relu,
            init_seed: 0,
            phi_map: PositivityMap::Softplus,
            decoder_degree: None,
            embed: 8,
            anchor: Anchor::Centroid,
            input_scale: 10.0,
            stop_grad_mean: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.hidden == 0 || self.layers == 0 || self.embed == 0 {
            return bad("hidden, layers and embed must be positive".into());
        }
        if !(self.input_scale > 0.0) {
            return bad(format!("input_scale must be positive, got {}", self.input_scale));
        }
        Ok(())
    }
}

/// Problem extents a model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub m: usize,
    /// Rows of the past window (`2T₋`).
    pub t_in: usize,
    /// Rows of the predicted window.
    pub t_out: usize,
}

/// Graph handles for one batch of predictions. Every per-mode entry is
/// stacked over instances: `means[k]` is `B·m × t_out`, `phi[k]` is
/// `B·m × 1` and `sigma_inv[k]` is `B·m × m`.
#[derive(Clone, Debug)]
pub struct BatchOutput {
    pub batch: usize,
    pub feat: Var,
    pub means: Vec<Var>,
    pub phi: Vec<Var>,
    pub sigma_inv: Vec<Var>,
}

/// Per-instance prediction as plain values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveOutput {
    /// `K` matrices of shape `t_out × m`.
    pub means: Vec<Matrix>,
    /// `K × m` positive scalars.
    pub phi: Vec<Vec<f64>>,
    /// `K` symmetric positive-definite `m × m` matrices.
    pub sigma_inv: Vec<Matrix>,
}

impl PredictiveOutput {
    pub fn modes(&self) -> usize {
        self.means.len()
    }

    pub fn agents(&self) -> usize {
        self.phi.first().map_or(0, Vec::len)
    }
}

/// Constant inputs of one batch, shared by the stage functions.
pub struct BatchInput {
    batch: usize,
    x: Var,
    anchors: Var,
    eye: Var,
}

/// Parameters plus the configuration they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    dims: Dims,
    params: ParamStore,
}

fn init_weight(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.uniform_range(-bound, bound)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("finite init")
}

struct Builder {
    rng: Rng,
    params: ParamStore,
}

impl Builder {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.params.insert(format!("{name}.w"), init_weight(&mut self.rng, fan_in, fan_out))?;
        self.params.insert(format!("{name}.b"), Tensor::zeros(&[1, fan_out]))
    }

    fn mlp(&mut self, name: &str, widths: &[usize]) -> Result<()> {
        for (i, w) in widths.windows(2).enumerate() {
            self.linear(&format!("{name}.{i}"), w[0], w[1])?;
        }
        Ok(())
    }
}

/// Basis taking `2(d+1)` polynomial coefficients to `t_out` interleaved rows.
fn poly_basis(degree: usize, t_out: usize) -> Tensor {
    let steps = t_out / 2;
    let n = 2 * (degree + 1);
    let mut data = vec![0.0; n * t_out];
    for t in 0..steps {
        let tau = if steps > 1 { 2.0 * t as f64 / (steps - 1) as f64 - 1.0 } else { 0.0 };
        for c in 0..=degree {
            let v = tau.powi(c as i32);
            data[c * t_out + 2 * t] = v;
            data[(degree + 1 + c) * t_out + 2 * t + 1] = v;
        }
    }
    Tensor::matrix(n, t_out, data).expect("finite basis")
}

impl Model {
    pub fn new(config: ModelConfig, dims: Dims) -> Result<Self> {
        config.validate()?;
        if dims.m == 0 || dims.t_in == 0 || dims.t_out == 0 || !dims.t_in.is_multiple_of(2) || !dims.t_out.is_multiple_of(2) {
            return Err(Error::Config(format!("invalid extents {dims:?}")));
        }
        let (h, e, m) = (config.hidden, config.embed, dims.m);
        let mut b = Builder { rng: Rng::new(config.init_seed), params: ParamStore::new() };
        let mut widths = vec![dims.t_in];
        widths.extend(std::iter::repeat_n(h, config.layers));
        b.mlp("enc", &widths)?;
        if config.interaction == Interaction::Attention {
            for name in ["att.q", "att.k", "att.v"] {
                b.params.insert(format!("{name}.w"), init_weight(&mut b.rng, h, h))?;
            }
        }
        let coef = Self::coef_width(&config, &dims);
        for k in 0..config.k {
            b.mlp(&format!("mean.{k}"), &[h, h, coef])?;
        }
        let head_in = h + dims.t_out;
        b.mlp("phi", &[head_in, h, 1])?;
        match config.estimator {
            EstimatorKind::PeCu => b.mlp("sigma", &[head_in, h, e])?,
            EstimatorKind::IuOnly => b.mlp("sigma", &[head_in, h, 1])?,
            EstimatorKind::CuNpe => {
                b.mlp("sigma", &[head_in, h, e])?;
                b.linear("npe", m * e, m * (m - 1) / 2 + m)?;
            }
        }
        Ok(Self { config, dims, params: b.params })
    }

    fn coef_width(config: &ModelConfig, dims: &Dims) -> usize {
        match config.decoder_degree {
            Some(d) => 2 * (d + 1),
            None => dims.t_out,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Sets every parameter to zero.
    pub fn zero_params(&mut self) {
        for (_, t) in self.params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn anchor_of(&self, past: &Matrix, agent: usize) -> (f64, f64) {
        let steps = past.rows() / 2;
        match self.config.anchor {
            Anchor::None => (0.0, 0.0),
            Anchor::Last => (past[(2 * steps - 2, agent)], past[(2 * steps - 1, agent)]),
            Anchor::Centroid => {
                let (mut x, mut y) = (0.0, 0.0);
                for t in 0..steps {
                    x += past[(2 * t, agent)];
                    y += past[(2 * t + 1, agent)];
                }
                (x / steps as f64, y / steps as f64)
            }
        }
    }

    /// Records the constant inputs of a batch.
    pub fn input(&self, g: &mut Graph, pasts: &[&Matrix]) -> Result<BatchInput> {
        let (m, t_in, t_out) = (self.dims.m, self.dims.t_in, self.dims.t_out);
        if pasts.is_empty() {
            return Err(Error::Dimension("empty batch".into()));
        }
        let rows = pasts.len() * m;
        let mut x = Vec::with_capacity(rows * t_in);
        let mut anchors = Vec::with_capacity(rows * t_out);
        let mut eye = vec![0.0; rows * m];
        let s = self.config.input_scale;
        for (b, past) in pasts.iter().enumerate() {
            if past.rows() != t_in || past.cols() != m {
                return Err(Error::Dimension(format!(
                    "instance {b} is {}x{}, model expects {t_in}x{m}",
                    past.rows(),
                    past.cols()
                )));
            }
            for i in 0..m {
                let (ax, ay) = self.anchor_of(past, i);
                for t in 0..t_in / 2 {
                    x.push((past[(2 * t, i)] - ax) / s);
                    x.push((past[(2 * t + 1, i)] - ay) / s);
                }
                for _ in 0..t_out / 2 {
                    anchors.push(ax);
                    anchors.push(ay);
                }
                eye[(b * m + i) * m + i] = 1.0;
            }
        }
        Ok(BatchInput {
            batch: pasts.len(),
            x: g.constant(Tensor::matrix(rows, t_in, x)?),
            anchors: g.constant(Tensor::matrix(rows, t_out, anchors)?),
            eye: g.constant(Tensor::matrix(rows, m, eye)?),
        })
    }

    fn act(&self, g: &mut Graph, v: Var) -> Result<Var> {
        match self.config.activation {
            Activation::Relu => g.relu(v),
            Activation::Tanh => g.tanh(v),
        }
    }

    fn linear(&self, g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.var(&format!("{name}.w")))?;
        let rows = g.shape(x)[0];
        let b = g.repeat_rows(p.var(&format!("{name}.b")), rows)?;
        g.add(y, b)
    }

    /// Layers `name.0 … name.(n-1)`, activated between layers only.
    fn mlp(&self, g: &mut Graph, p: &Bound, name: &str, n: usize, mut x: Var) -> Result<Var> {
        for i in 0..n {
            x = self.linear(g, p, &format!("{name}.{i}"), x)?;
            if i + 1 < n {
                x = self.act(g, x)?;
            }
        }
        Ok(x)
    }

    fn positive(&self, g: &mut Graph, v: Var, floor: f64) -> Result<Var> {
        let y = match self.config.phi_map {
            PositivityMap::Softplus => g.softplus(v)?,
            PositivityMap::Exp => g.exp(v)?,
        };
        g.shift(y, floor)
    }

    /// Latent features `B·m × hidden`: a shared per-agent network, then one
    /// round of dot-product attention across the agents of each instance.
    pub fn encode(&self, g: &mut Graph, p: &Bound, input: &BatchInput) -> Result<Var> {
        let mut h = input.x;
        for i in 0..self.config.layers {
            h = self.linear(g, p, &format!("enc.{i}"), h)?;
            h = self.act(g, h)?;
        }
        if self.config.interaction == Interaction::Attention {
            let q = g.matmul(h, p.var("att.q.w"))?;
            let k = g.matmul(h, p.var("att.k.w"))?;
            let v = g.matmul(h, p.var("att.v.w"))?;
            let logits = g.block_matmul(q, k, input.batch, true)?;
            let logits = g.scale(logits, 1.0 / (self.config.hidden as f64).sqrt())?;
            let w = g.softmax_rows(logits)?;
            let mixed = g.block_matmul(w, v, input.batch, false)?;
            h = g.add(h, mixed)?;
        }
        Ok(h)
    }

    /// Per-mode means relative to the anchor, in network units.
    pub fn predict_mean_rel(&self, g: &mut Graph, p: &Bound, feat: Var) -> Result<Vec<Var>> {
        let basis = self
            .config
            .decoder_degree
            .map(|d| g.constant(poly_basis(d, self.dims.t_out)));
        (0..self.config.k)
            .map(|k| {
                let coef = self.mlp(g, p, &format!("mean.{k}"), 2, feat)?;
                match basis {
                    Some(b) => g.matmul(coef, b),
                    None => Ok(coef),
                }
            })
            .collect()
    }

    fn head_input(&self, g: &mut Graph, feat: Var, mean_rel: Var) -> Result<Var> {
        let mean_rel = if self.config.stop_grad_mean { g.detach(mean_rel) } else { mean_rel };
        g.concat_cols(feat, mean_rel)
    }

    /// Strictly positive `Φ̂`, `B·m × 1`, for one mode.
    pub fn predict_phi(&self, g: &mut Graph, p: &Bound, feat: Var, mean_rel: Var) -> Result<Var> {
        let x = self.head_input(g, feat, mean_rel)?;
        let z = self.mlp(g, p, "phi", 2, x)?;
        self.positive(g, z, 1e-6)
    }

    /// `Σ̂⁻¹` for one mode, stacked as `B·m × m`.
    pub fn estimate_sigma_inv(
        &self,
        g: &mut Graph,
        p: &Bound,
        input: &BatchInput,
        feat: Var,
        mean_rel: Var,
    ) -> Result<Var> {
        let x = self.head_input(g, feat, mean_rel)?;
        let z = self.mlp(g, p, "sigma", 2, x)?;
        let tau = self.config.tau;
        match self.config.estimator {
            EstimatorKind::PeCu => {
                let gram = g.block_matmul(z, z, input.batch, true)?;
                let t = g.scale(input.eye, tau)?;
                g.add(gram, t)
            }
            EstimatorKind::IuOnly => {
                let d = self.positive(g, z, tau)?;
                let d = g.repeat_cols(d, self.dims.m)?;
                g.mul(d, input.eye)
            }
            EstimatorKind::CuNpe => {
                let m = self.dims.m;
                let flat = g.reshape(z, &[input.batch, m * self.config.embed])?;
                let out = self.linear(g, p, "npe", flat)?;
                let n_off = m * (m - 1) / 2;
                let off = g.slice_cols(out, 0, n_off)?;
                let d_raw = g.slice_cols(out, n_off, n_off + m)?;
                let d = self.positive(g, d_raw, tau)?;
                ldl_stack(g, off, d, m)
            }
        }
    }

    /// Full forward pass on a batch.
    pub fn forward(&self, g: &mut Graph, p: &Bound, pasts: &[&Matrix]) -> Result<BatchOutput> {
        let input = self.input(g, pasts)?;
        let feat = self.encode(g, p, &input)?;
        let rel = self.predict_mean_rel(g, p, feat)?;
        let mut out = BatchOutput {
            batch: input.batch,
            feat,
            means: Vec::with_capacity(rel.len()),
            phi: Vec::with_capacity(rel.len()),
            sigma_inv: Vec::with_capacity(rel.len()),
        };
        for &r in &rel {
            let scaled = g.scale(r, self.config.input_scale)?;
            out.means.push(g.add(scaled, input.anchors)?);
            out.phi.push(self.predict_phi(g, p, feat, r)?);
            out.sigma_inv.push(self.estimate_sigma_inv(g, p, &input, feat, r)?);
        }
        Ok(out)
    }

    /// Unpacks a batch output into per-instance values.
    pub fn unpack(&self, g: &Graph, out: &BatchOutput) -> Vec<PredictiveOutput> {
        let (m, t) = (self.dims.m, self.dims.t_out);
        (0..out.batch)
            .map(|b| {
                let means = out
                    .means
                    .iter()
                    .map(|&v| {
                        let d = g.value(v).data();
                        let mut mat = Matrix::zeros(t, m);
                        for i in 0..m {
                            for r in 0..t {
                                mat[(r, i)] = d[(b * m + i) * t + r];
                            }
                        }
                        mat
                    })
                    .collect();
                let phi = out.phi.iter().map(|&v| g.value(v).data()[b * m..(b + 1) * m].to_vec()).collect();
                let sigma_inv = out
                    .sigma_inv
                    .iter()
                    .map(|&v| {
                        let d = &g.value(v).data()[b * m * m..(b + 1) * m * m];
                        Matrix::new(m, m, d.to_vec()).expect("square block")
                    })
                    .collect();
                PredictiveOutput { means, phi, sigma_inv }
            })
            .collect()
    }

    /// Inference on a batch with frozen parameters.
    pub fn predict_batch(&self, pasts: &[&Matrix]) -> Result<Vec<PredictiveOutput>> {
        let mut g = Graph::new();
        let p = self.params.attach_frozen(&mut g);
        let out = self.forward(&mut g, &p, pasts)?;
        Ok(self.unpack(&g, &out))
    }

    pub fn predict(&self, past: &Matrix) -> Result<PredictiveOutput> {
        Ok(self.predict_batch(&[past])?.pop().expect("one instance"))
    }

    /// Writes a checkpoint: a header line with the configuration, then one
    /// line per named parameter array.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            kind: "checkpoint".into(),
            config: self.config.clone(),
            dims: self.dims,
            count: self.params.len(),
        };
        let json = |e: serde_json::Error| Error::Numeric(format!("serialization failed: {e}"));
        serde_json::to_writer(&mut out, &header).map_err(json)?;
        out.push(b'\n');
        for (name, t) in self.params.iter() {
            let rec = ParamRecord { name: name.to_string(), shape: t.shape().to_vec(), data: t.data().to_vec() };
            serde_json::to_writer(&mut out, &rec).map_err(json)?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(f).lines();
        let parse = |line: usize, message: String| Error::Parse { line, message };
        let first = lines
            .next()
            .ok_or_else(|| parse(1, "empty checkpoint".into()))?
            .map_err(|e| parse(1, e.to_string()))?;
        let header: CheckpointHeader = serde_json::from_str(&first).map_err(|e| parse(1, e.to_string()))?;
        if header.version != CHECKPOINT_VERSION || header.kind != "checkpoint" {
            return Err(parse(1, "not a checkpoint of a supported version".into()));
        }
        let mut model = Model::new(header.config, header.dims)?;
        let mut seen = 0;
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| parse(i + 2, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ParamRecord = serde_json::from_str(&line).map_err(|e| parse(i + 2, e.to_string()))?;
            let slot = model
                .params
                .get_mut(&rec.name)
                .ok_or_else(|| Error::Validation(format!("line {}: unknown parameter `{}`", i + 2, rec.name)))?;
            if slot.shape() != rec.shape.as_slice() {
                return Err(Error::Validation(format!(
                    "line {}: `{}` has shape {:?}, model expects {:?}",
                    i + 2,
                    rec.name,
                    rec.shape,
                    slot.shape()
                )));
            }
            *slot = Tensor::new(&rec.shape, rec.data)?;
            seen += 1;
        }
        if seen != header.count || seen != model.params.len() {
            return Err(Error::Validation(format!(
                "checkpoint holds {seen} arrays, model has {}",
                model.params.len()
            )));
        }
        Ok(model)
    }
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    kind: String,
    config: ModelConfig,
    dims: Dims,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Stacks `T × m` matrices (instance layout) as `B·m × T` agent rows.
pub fn stack_agent_rows(mats: &[&Matrix]) -> Result<Tensor> {
    let first = mats.first().ok_or_else(|| Error::Dimension("empty batch".into()))?;
    let (t, m) = (first.rows(), first.cols());
    let mut data = Vec::with_capacity(mats.len() * t * m);
    for (b, mat) in mats.iter().enumerate() {
        if mat.rows() != t || mat.cols() != m {
            return Err(Error::Dimension(format!(
                "instance {b} is {}x{}, expected {t}x{m}",
                mat.rows(),
                mat.cols()
            )));
        }
        for i in 0..m {
            data.extend((0..t).map(|r| mat[(r, i)]));
        }
    }
    Tensor::matrix(mats.len() * m, t, data)
}

/// `L·D·Lᵀ` stacked as `B·m × m`, from the strictly-lower entries of a
/// unit lower-triangular `L` (`B × m(m−1)/2`, row by row) and the diagonal
/// `D` (`B × m`).
pub fn ldl_stack(g: &mut Graph, lower: Var, d: Var, m: usize) -> Result<Var> {
    let batch = g.shape(d)[0];
    let n_off = m * (m - 1) / 2;
    let mut scatter = vec![0.0; n_off * m * m];
    let mut idx = 0;
    for i in 1..m {
        for j in 0..i {
            scatter[idx * m * m + i * m + j] = 1.0;
            idx += 1;
        }
    }
    let mut spread = vec![0.0; m * m * m];
    for i in 0..m {
        for j in 0..m {
            spread[j * m * m + i * m + j] = 1.0;
        }
    }
    let mut eye = vec![0.0; batch * m * m];
    for b in 0..batch {
        for i in 0..m {
            eye[b * m * m + i * m + i] = 1.0;
        }
    }
    let eye = g.constant(Tensor::matrix(batch, m * m, eye)?);
    let l_flat = if n_off > 0 {
        let s = g.constant(Tensor::matrix(n_off, m * m, scatter)?);
        let off = g.matmul(lower, s)?;
        g.add(off, eye)?
    } else {
        eye
    };
    let spread = g.constant(Tensor::matrix(m, m * m, spread)?);
    let d_cols = g.matmul(d, spread)?;
    let ld = g.mul(l_flat, d_cols)?;
    let l = g.reshape(l_flat, &[batch * m, m])?;
    let ld = g.reshape(ld, &[batch * m, m])?;
    g.block_matmul(ld, l, batch, true)
}

/// Per-agent mode choice: the mode with the smallest `Φ̂` for that agent,
/// lowest index on ties. Returns the assembled `t_out × m` means and the
/// chosen mode of each agent.
pub fn select(means: &[Matrix], phi: &[Vec<f64>]) -> Result<(Matrix, Vec<usize>)> {
    let k = means.len();
    if k == 0 || phi.len() != k {
        return Err(Error::Dimension(format!("{k} mean modes but {} Φ̂ modes", phi.len())));
    }
    let m = means[0].cols();
    if phi.iter().any(|p| p.len() != m) {
        return Err(Error::Dimension("Φ̂ rows must have one entry per agent".into()));
    }
    let mut chosen = Vec::with_capacity(m);
    let mut out = Matrix::zeros(means[0].rows(), m);
    for i in 0..m {
        let mut best = 0;
        for j in 1..k {
            if phi[j][i] < phi[best][i] {
                best = j;
            }
        }
        for r in 0..out.rows() {
            out[(r, i)] = means[best][(r, i)];
        }
        chosen.push(best);
    }
    Ok((out, chosen))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::permute_columns;

    fn random_past(rng: &mut Rng, t_in: usize, m: usize) -> Matrix {
        Matrix::new(t_in, m, (0..t_in * m).map(|_| rng.uniform_range(-5.0, 5.0)).collect()).unwrap()
    }

    fn config(estimator: EstimatorKind, interaction: Interaction, seed: u64) -> ModelConfig {
        ModelConfig {
            hidden: 16,
            layers: 2,
            k: 2,
            embed: 4,
            estimator,
            interaction,
            init_seed: seed,
            ..ModelConfig::default()
        }
    }

    const DIMS: Dims = Dims { m: 4, t_in: 8, t_out: 6 };

    #[test]
    fn encoder_without_interaction_is_separable() {
        let model = Model::new(config(EstimatorKind::PeCu, Interaction::None, 1), DIMS).unwrap();
        let mut rng = Rng::new(2);
        let past = random_past(&mut rng, 8, 4);
        let mut zeroed = past.clone();
        for r in 0..8 {
            zeroed[(r, 2)] = 0.0;
        }
        let feats = |x: &Matrix| {
            let mut g = Graph::new();
            let p = model.params.attach_frozen(&mut g);
            let input = model.input(&mut g, &[x]).unwrap();
            let f = model.encode(&mut g, &p, &input).unwrap();
            g.value(f).clone()
        };
        let (a, b) = (feats(&past), feats(&zeroed));
        let h = 16;
        for i in [0, 1, 3] {
            assert_eq!(&a.data()[i * h..(i + 1) * h], &b.data()[i * h..(i + 1) * h]);
        }
    }

    #[test]
    fn single_agent_attention_is_a_residual_value_map() {
        let dims = Dims { m: 1, t_in: 8, t_out: 6 };
        let with = Model::new(config(EstimatorKind::PeCu, Interaction::Attention, 3), dims).unwrap();
        let mut rng = Rng::new(4);
        let past = random_past(&mut rng, 8, 1);
        let mut g = Graph::new();
        let p = with.params.attach_frozen(&mut g);
        let input = with.input(&mut g, &[&past]).unwrap();
        let f = with.encode(&mut g, &p, &input).unwrap();
        // same encoder weights, attention removed
        let mut h = input.x;
        for i in 0..2 {
            h = with.linear(&mut g, &p, &format!("enc.{i}"), h).unwrap();
            h = g.relu(h).unwrap();
        }
        let v = g.matmul(h, p.var("att.v.w")).unwrap();
        let want = g.add(h, v).unwrap();
        assert!(g.value(f).data().iter().zip(g.value(want).data()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn full_pipeline_equivariance() {
        let mut rng = Rng::new(8);
        for interaction in [Interaction::None, Interaction::Attention] {
            let model = Model::new(config(EstimatorKind::PeCu, interaction, 5), DIMS).unwrap();
            let past = random_past(&mut rng, 8, 4);
            let perm = rng.permutation(4);
            let a = model.predict(&past).unwrap();
            let b = model.predict(&permute_columns(&past, &perm)).unwrap();
            for k in 0..2 {
                assert!(permute_columns(&a.means[k], &perm).max_abs_diff(&b.means[k]) < 1e-9);
                assert!(a.sigma_inv[k].conjugate_by_permutation(&perm).max_abs_diff(&b.sigma_inv[k]) < 1e-9);
                for i in 0..4 {
                    assert!((a.phi[k][i] - b.phi[k][perm[i]]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn pe_sigma_inv_is_pd_above_tau() {
        let mut rng = Rng::new(9);
        for seed in 0..50 {
            let model = Model::new(config(EstimatorKind::PeCu, Interaction::Attention, seed), DIMS).unwrap();
            let out = model.predict(&random_past(&mut rng, 8, 4)).unwrap();
            for s in &out.sigma_inv {
                assert!(s.is_symmetric(1e-9));
                let ev = s.symmetric_eigenvalues().unwrap();
                assert!(ev[0] >= 1e-3 * (1.0 - 1e-9));
            }
            assert!(out.phi.iter().flatten().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn zero_weights_degenerate_outputs() {
        let mut cfg = config(EstimatorKind::PeCu, Interaction::Attention, 1);
        cfg.anchor = Anchor::None;
        let mut model = Model::new(cfg, DIMS).unwrap();
        model.zero_params();
        let out = model.predict(&random_past(&mut Rng::new(1), 8, 4)).unwrap();
        assert_eq!(out.sigma_inv[0], Matrix::identity(4).scale(1e-3));
        assert!(out.means.iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn iu_is_diagonal_and_matches_pe_tau_case() {
        let mut iu = Model::new(config(EstimatorKind::IuOnly, Interaction::None, 2), DIMS).unwrap();
        let past = random_past(&mut Rng::new(3), 8, 4);
        let out = iu.predict(&past).unwrap();
        for s in &out.sigma_inv {
            for i in 0..4 {
                assert!(s[(i, i)] > 0.0);
                for j in 0..4 {
                    if i != j {
                        assert_eq!(s[(i, j)].to_bits(), 0f64.to_bits());
                    }
                }
            }
        }
        iu.zero_params();
        let mut pe_cfg = config(EstimatorKind::PeCu, Interaction::None, 2);
        pe_cfg.tau = 2f64.ln() + 1e-3;
        let mut pe = Model::new(pe_cfg, DIMS).unwrap();
        pe.zero_params();
        let a = iu.predict(&past).unwrap();
        let b = pe.predict(&past).unwrap();
        assert!(a.sigma_inv[0].max_abs_diff(&b.sigma_inv[0]) < 1e-15);
    }

    #[test]
    fn ldl_reconstruction() {
        let mut g = Graph::new();
        let lower = g.constant(Tensor::matrix(1, 1, vec![0.0]).unwrap());
        let d = g.constant(Tensor::matrix(1, 2, vec![2.0, 3.0]).unwrap());
        let s = ldl_stack(&mut g, lower, d, 2).unwrap();
        assert_eq!(g.value(s).data(), &[2.0, 0.0, 0.0, 3.0]);

        let lower = g.constant(Tensor::matrix(1, 1, vec![0.5]).unwrap());
        let s = ldl_stack(&mut g, lower, d, 2).unwrap();
        // L = [[1,0],[.5,1]], D = diag(2,3): LDLᵀ = [[2,1],[1,3.5]]
        assert_eq!(g.value(s).data(), &[2.0, 1.0, 1.0, 3.5]);
    }

    #[test]
    fn npe_is_pd_but_not_equivariant() {
        let mut rng = Rng::new(12);
        let mut worst: f64 = 0.0;
        for seed in 0..20 {
            let model = Model::new(config(EstimatorKind::CuNpe, Interaction::None, seed), DIMS).unwrap();
            let past = random_past(&mut rng, 8, 4);
            let perm = rng.permutation(4);
            let a = model.predict(&past).unwrap();
            let b = model.predict(&permute_columns(&past, &perm)).unwrap();
            assert!(a.sigma_inv[0].symmetric_eigenvalues().unwrap()[0] > 0.0);
            worst = worst.max(a.sigma_inv[0].conjugate_by_permutation(&perm).max_abs_diff(&b.sigma_inv[0]));
        }
        assert!(worst > 1e-3, "{worst}");
    }

    #[test]
    fn exp_positivity_map() {
        let mut cfg = config(EstimatorKind::IuOnly, Interaction::Attention, 4);
        cfg.phi_map = PositivityMap::Exp;
        let model = Model::new(cfg, DIMS).unwrap();
        let out = model.predict(&random_past(&mut Rng::new(5), 8, 4)).unwrap();
        assert!(out.phi.iter().flatten().all(|&p| p > 0.0));
    }

    #[test]
    fn select_examples() {
        let means: Vec<Matrix> = (0..3).map(|k| Matrix::new(2, 1, vec![k as f64; 2]).unwrap()).collect();
        let (best, k) = select(&means, &[vec![3.0], vec![1.0], vec![2.0]]).unwrap();
        assert_eq!(k, vec![1]);
        assert_eq!(best.data(), &[1.0, 1.0]);
        let (_, k) = select(&means, &[vec![1.0], vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(k, vec![0]);
        let (_, k) = select(&means, &[vec![30.0], vec![10.0], vec![20.0]]).unwrap();
        assert_eq!(k, vec![1]);
    }

    #[test]
    fn init_is_deterministic_and_checkpoint_round_trips() {
        let cfg = config(EstimatorKind::CuNpe, Interaction::Attention, 7);
        let a = Model::new(cfg.clone(), DIMS).unwrap();
        assert_eq!(a, Model::new(cfg, DIMS).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.jsonl");
        a.save(&path).unwrap();
        assert_eq!(Model::load(&path).unwrap(), a);
    }

    #[test]
    fn polynomial_decoder_shapes() {
        let mut cfg = config(EstimatorKind::PeCu, Interaction::None, 1);
        cfg.decoder_degree = Some(1);
        cfg.k = 1;
        let model = Model::new(cfg, DIMS).unwrap();
        let out = model.predict(&random_past(&mut Rng::new(1), 8, 4)).unwrap();
        assert_eq!((out.means[0].rows(), out.means[0].cols()), (6, 4));
        // degree 1: equally spaced steps have constant increments
        let m = &out.means[0];
        let d1 = m[(2, 0)] - m[(0, 0)];
        let d2 = m[(4, 0)] - m[(2, 0)];
        assert!((d1 - d2).abs() < 1e-12);
    }

    #[test]
    fn bad_shapes_and_config_are_rejected() {
        let model = Model::new(config(EstimatorKind::PeCu, Interaction::None, 1), DIMS).unwrap();
        let wrong = Matrix::zeros(8, 3);
        assert!(matches!(model.predict(&wrong), Err(Error::Dimension(_))));
        let cfg = ModelConfig { tau: 0.0, ..ModelConfig::default() };
        assert!(matches!(Model::new(cfg, DIMS), Err(Error::Config(_))));
    }
}
