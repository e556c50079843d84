//! Noise predictors: the analytic optimum for Gaussian-mixture data and a
//! small trainable MLP, plus the supervised training loop that fits the MLP
//! to predict the noise injected by the forward process.
//!
//! Both predictors are conditioned on the cumulative retention `alpha_bar`
//! rather than the raw timestep; the two are equivalent and `alpha_bar`
//! transfers across schedules.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::forward_diffuse;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::sample::Sample;
use crate::schedule::NoiseSchedule;
use crate::tensor_io;

/// Isotropic Gaussian mixture; the data distribution for which the optimal
/// noise predictor has a closed form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != variances.len() {
            return Err(Error::InvalidSpec(
                "mixture needs matching weights/means/variances".into(),
            ));
        }
        let wsum: f64 = weights.iter().sum();
        if (wsum - 1.0).abs() > 1e-12 || weights.iter().any(|&w| w <= 0.0) {
            return Err(Error::InvalidSpec(format!(
                "mixture weights must be positive and sum to 1, got sum {wsum}"
            )));
        }
        if variances.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidSpec("mixture variances must be positive".into()));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(Error::InvalidSpec("mixture means must share one dimension".into()));
        }
        Ok(GaussianMixture {
            weights,
            means,
            variances,
        })
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    /// Overall mean vector of the mixture.
    pub fn mean_vector(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (w, m) in self.weights.iter().zip(&self.means) {
            for (o, v) in out.iter_mut().zip(m) {
                *o += w * v;
            }
        }
        out
    }

    /// Per-coordinate raw second moment `E[x_j^2]`.
    pub fn second_moment_vector(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for ((w, m), v) in self.weights.iter().zip(&self.means).zip(&self.variances) {
            for (o, mj) in out.iter_mut().zip(m) {
                *o += w * (v + mj * mj);
            }
        }
        out
    }

    pub fn draw(&self, rng: &mut RngStream) -> Sample {
        let u = rng.next_uniform();
        let mut acc = 0.0;
        let mut idx = self.components() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                idx = i;
                break;
            }
        }
        let sd = self.variances[idx].sqrt();
        let values = self.means[idx]
            .iter()
            .map(|&m| m + sd * rng.next_normal())
            .collect();
        Sample::new(vec![self.dim()], values).expect("mixture draw is finite")
    }

    /// Posterior component responsibilities at noise level `alpha_bar`,
    /// computed with log-sum-exp stabilization. Sums to 1.
    pub fn responsibilities(&self, x: &[f64], alpha_bar: f64) -> Vec<f64> {
        let d = self.dim() as f64;
        let root = alpha_bar.sqrt();
        let mut logs: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((w, m), v)| {
                // Marginal of component i at level alpha_bar:
                // N(sqrt(abar) mu_i, (abar v_i + 1 - abar) I).
                let s = alpha_bar * v + (1.0 - alpha_bar);
                let dist_sq: f64 = x
                    .iter()
                    .zip(m)
                    .map(|(xj, mj)| {
                        let dlt = xj - root * mj;
                        dlt * dlt
                    })
                    .sum();
                w.ln() - 0.5 * d * (std::f64::consts::TAU * s).ln() - dist_sq / (2.0 * s)
            })
            .collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for l in logs.iter_mut() {
            *l = (*l - max).exp();
            total += *l;
        }
        logs.iter().map(|l| l / total).collect()
    }

    /// Exact posterior mean `E[x0 | x_t]` under the mixture at level
    /// `alpha_bar`, by standard Gaussian conditioning per component.
    pub fn posterior_x0_mean(&self, x: &[f64], alpha_bar: f64) -> Vec<f64> {
        let resp = self.responsibilities(x, alpha_bar);
        let root = alpha_bar.sqrt();
        let mut out = vec![0.0; self.dim()];
        for ((r, m), v) in resp.iter().zip(&self.means).zip(&self.variances) {
            let s = alpha_bar * v + (1.0 - alpha_bar);
            let gain = root * v / s;
            for (o, (xj, mj)) in out.iter_mut().zip(x.iter().zip(m)) {
                *o += r * (mj + gain * (xj - root * mj));
            }
        }
        out
    }

    /// Optimal noise prediction at level `alpha_bar`. Algebraically equal to
    /// `(x - sqrt(abar) E[x0|x]) / sqrt(1 - abar)`, evaluated in the score
    /// form `sqrt(1 - abar) * sum_i r_i (x - sqrt(abar) mu_i) / s_i`, which
    /// stays finite as `alpha_bar -> 1`.
    pub fn eps_at(&self, x: &[f64], alpha_bar: f64) -> Vec<f64> {
        let resp = self.responsibilities(x, alpha_bar);
        let root = alpha_bar.sqrt();
        let noise_sd = (1.0 - alpha_bar).sqrt();
        let mut out = vec![0.0; self.dim()];
        for ((r, m), v) in resp.iter().zip(&self.means).zip(&self.variances) {
            let s = alpha_bar * v + (1.0 - alpha_bar);
            for (o, (xj, mj)) in out.iter_mut().zip(x.iter().zip(m)) {
                *o += r * (xj - root * mj) / s;
            }
        }
        for o in out.iter_mut() {
            *o *= noise_sd;
        }
        out
    }
}

/// Optimal predictor of the injected noise for mixture data, at timestep `t`
/// of `sched`.
pub fn eps_analytic(
    mix: &GaussianMixture,
    xt: &Sample,
    sched: &NoiseSchedule,
    t: usize,
) -> Result<Sample> {
    sched.check_t(t)?;
    eps_analytic_at(mix, xt, sched.alpha_bar(t))
}

/// Same as [`eps_analytic`] with `alpha_bar` given directly.
pub fn eps_analytic_at(mix: &GaussianMixture, xt: &Sample, alpha_bar: f64) -> Result<Sample> {
    if xt.len() != mix.dim() {
        return Err(Error::ShapeMismatch {
            expected: vec![mix.dim()],
            got: xt.shape().to_vec(),
        });
    }
    Sample::new(xt.shape().to_vec(), mix.eps_at(xt.values(), alpha_bar))
}

/// Sinusoidal features of `alpha_bar`: `k/2` frequencies geometric from 1 to
/// 1e4, each contributing a sine and a cosine.
pub fn time_features(alpha_bar: f64, k: usize) -> Vec<f64> {
    debug_assert!(k % 2 == 0 && k >= 2);
    let half = k / 2;
    let mut out = Vec::with_capacity(k);
    for j in 0..half {
        let exponent = if half == 1 {
            0.0
        } else {
            4.0 * j as f64 / (half - 1) as f64
        };
        let freq = 10f64.powf(exponent);
        out.push((freq * alpha_bar).sin());
        out.push((freq * alpha_bar).cos());
    }
    out
}

/// Two-hidden-layer tanh MLP. Used both as the noise predictor
/// (`input = [x_t, time features]`) and as the latent embedder
/// (`time_features = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub data_dim: usize,
    pub hidden_dim: usize,
    pub time_features: usize,
    /// Row-major `[hidden, data_dim + time_features]`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// Row-major `[hidden, hidden]`.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    /// Row-major `[data_dim, hidden]`.
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
}

/// Architecture knobs for a fresh MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArch {
    pub hidden: usize,
    pub time_features: usize,
}

impl Default for MlpArch {
    fn default() -> Self {
        MlpArch {
            hidden: 128,
            time_features: 16,
        }
    }
}

impl MlpParams {
    pub fn input_dim(&self) -> usize {
        self.data_dim + self.time_features
    }

    pub fn validate(&self) -> Result<()> {
        let n_in = self.input_dim();
        let h = self.hidden_dim;
        let d = self.data_dim;
        if d == 0 || h == 0 {
            return Err(Error::InvalidSpec("mlp dims must be positive".into()));
        }
        if self.time_features % 2 != 0 {
            return Err(Error::InvalidSpec("time feature count must be even".into()));
        }
        let ok = self.w1.len() == h * n_in
            && self.b1.len() == h
            && self.w2.len() == h * h
            && self.b2.len() == h
            && self.w3.len() == d * h
            && self.b3.len() == d;
        if !ok {
            return Err(Error::InvalidSpec("mlp parameter buffers inconsistent".into()));
        }
        let all = [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3];
        if all.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite("mlp parameters".into()));
        }
        Ok(())
    }

    pub fn zeros(data_dim: usize, arch: MlpArch) -> Self {
        let n_in = data_dim + arch.time_features;
        let h = arch.hidden;
        MlpParams {
            data_dim,
            hidden_dim: h,
            time_features: arch.time_features,
            w1: vec![0.0; h * n_in],
            b1: vec![0.0; h],
            w2: vec![0.0; h * h],
            b2: vec![0.0; h],
            w3: vec![0.0; data_dim * h],
            b3: vec![0.0; data_dim],
        }
    }

    /// Glorot-uniform initialization from the given stream.
    pub fn init(data_dim: usize, arch: MlpArch, rng: &mut RngStream) -> Self {
        let mut p = Self::zeros(data_dim, arch);
        let n_in = p.input_dim();
        let h = arch.hidden;
        fill_glorot(&mut p.w1, n_in, h, rng);
        fill_glorot(&mut p.w2, h, h, rng);
        fill_glorot(&mut p.w3, h, data_dim, rng);
        p
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len() + self.w3.len() + self.b3.len()
    }

    /// Forward pass on a raw input vector of length `input_dim()`.
    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.forward_cached(input).out
    }

    /// Forward pass for a data vector plus time conditioning.
    pub fn forward_with_time(&self, x: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
        if x.len() != self.data_dim {
            return Err(Error::ShapeMismatch {
                expected: vec![self.data_dim],
                got: vec![x.len()],
            });
        }
        let mut input = Vec::with_capacity(self.input_dim());
        input.extend_from_slice(x);
        input.extend(time_features(alpha_bar, self.time_features));
        Ok(self.forward(&input))
    }

    /// Forward pass without time conditioning (embedder usage).
    pub fn forward_plain(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.time_features != 0 {
            return Err(Error::InvalidSpec(
                "this mlp expects time features; use forward_with_time".into(),
            ));
        }
        if x.len() != self.data_dim {
            return Err(Error::ShapeMismatch {
                expected: vec![self.data_dim],
                got: vec![x.len()],
            });
        }
        Ok(self.forward(x))
    }

    pub(crate) fn forward_cached(&self, input: &[f64]) -> ForwardCache {
        debug_assert_eq!(input.len(), self.input_dim());
        let h = self.hidden_dim;
        let a1 = affine_tanh(&self.w1, &self.b1, input, h);
        let a2 = affine_tanh(&self.w2, &self.b2, &a1, h);
        let out = affine(&self.w3, &self.b3, &a2, self.data_dim);
        ForwardCache { a1, a2, out }
    }

    /// Accumulates gradients for one sample given `d_out = dL/d(out)`.
    pub(crate) fn backward_into(
        &self,
        input: &[f64],
        cache: &ForwardCache,
        d_out: &[f64],
        g: &mut MlpGrads,
    ) {
        let h = self.hidden_dim;
        // Output layer.
        for (i, &go) in d_out.iter().enumerate() {
            g.b3[i] += go;
            let row = &mut g.w3[i * h..(i + 1) * h];
            for (w, &a) in row.iter_mut().zip(&cache.a2) {
                *w += go * a;
            }
        }
        // d a2 = W3^T d_out, then through tanh.
        let mut d_z2 = vec![0.0; h];
        for (i, &go) in d_out.iter().enumerate() {
            let row = &self.w3[i * h..(i + 1) * h];
            for (dz, &w) in d_z2.iter_mut().zip(row) {
                *dz += w * go;
            }
        }
        for (dz, &a) in d_z2.iter_mut().zip(&cache.a2) {
            *dz *= 1.0 - a * a;
        }
        for (i, &dz) in d_z2.iter().enumerate() {
            g.b2[i] += dz;
            let row = &mut g.w2[i * h..(i + 1) * h];
            for (w, &a) in row.iter_mut().zip(&cache.a1) {
                *w += dz * a;
            }
        }
        // d a1 = W2^T d_z2, then through tanh.
        let mut d_z1 = vec![0.0; h];
        for (i, &dz) in d_z2.iter().enumerate() {
            let row = &self.w2[i * h..(i + 1) * h];
            for (d1, &w) in d_z1.iter_mut().zip(row) {
                *d1 += w * dz;
            }
        }
        for (d1, &a) in d_z1.iter_mut().zip(&cache.a1) {
            *d1 *= 1.0 - a * a;
        }
        let n_in = self.input_dim();
        for (i, &d1) in d_z1.iter().enumerate() {
            g.b1[i] += d1;
            let row = &mut g.w1[i * n_in..(i + 1) * n_in];
            for (w, &v) in row.iter_mut().zip(input) {
                *w += d1 * v;
            }
        }
    }

    pub(crate) fn sgd_step(&mut self, g: &MlpGrads, lr: f64) {
        for (p, d) in self.w1.iter_mut().zip(&g.w1) {
            *p -= lr * d;
        }
        for (p, d) in self.b1.iter_mut().zip(&g.b1) {
            *p -= lr * d;
        }
        for (p, d) in self.w2.iter_mut().zip(&g.w2) {
            *p -= lr * d;
        }
        for (p, d) in self.b2.iter_mut().zip(&g.b2) {
            *p -= lr * d;
        }
        for (p, d) in self.w3.iter_mut().zip(&g.w3) {
            *p -= lr * d;
        }
        for (p, d) in self.b3.iter_mut().zip(&g.b3) {
            *p -= lr * d;
        }
    }

    /// Flat view of all parameters, used by the finite-difference checks.
    pub fn param(&self, idx: usize) -> f64 {
        *self.param_slot(idx)
    }

    pub fn set_param(&mut self, idx: usize, v: f64) {
        *self.param_slot_mut(idx) = v;
    }

    fn param_slot(&self, idx: usize) -> &f64 {
        let bufs = [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3];
        let mut i = idx;
        for b in bufs {
            if i < b.len() {
                return &b[i];
            }
            i -= b.len();
        }
        panic!("parameter index {idx} out of range");
    }

    fn param_slot_mut(&mut self, idx: usize) -> &mut f64 {
        let lens = [
            self.w1.len(),
            self.b1.len(),
            self.w2.len(),
            self.b2.len(),
            self.w3.len(),
            self.b3.len(),
        ];
        let mut i = idx;
        for (k, len) in lens.iter().enumerate() {
            if i < *len {
                return match k {
                    0 => &mut self.w1[i],
                    1 => &mut self.b1[i],
                    2 => &mut self.w2[i],
                    3 => &mut self.b2[i],
                    4 => &mut self.w3[i],
                    _ => &mut self.b3[i],
                };
            }
            i -= len;
        }
        panic!("parameter index {idx} out of range");
    }

    /// Serializes one tensor per layer plus a JSON sidecar listing names and
    /// shapes.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let n_in = self.input_dim();
        let h = self.hidden_dim;
        let d = self.data_dim;
        let tensors: [(&str, Vec<usize>, &Vec<f64>); 6] = [
            ("w1", vec![h, n_in], &self.w1),
            ("b1", vec![h], &self.b1),
            ("w2", vec![h, h], &self.w2),
            ("b2", vec![h], &self.b2),
            ("w3", vec![d, h], &self.w3),
            ("b3", vec![d], &self.b3),
        ];
        let mut listed = Vec::new();
        for (name, shape, values) in &tensors {
            let t = Sample::new(shape.clone(), (*values).clone())?;
            tensor_io::write_tensor(dir.join(format!("{name}.dtl")), &t)?;
            listed.push(TensorEntry {
                name: (*name).into(),
                shape: shape.clone(),
                file: format!("{name}.dtl"),
            });
        }
        let meta = MlpManifest {
            data_dim: self.data_dim,
            hidden_dim: self.hidden_dim,
            time_features: self.time_features,
            tensors: listed,
        };
        let mut body = serde_json::to_string_pretty(&meta)?;
        body.push('\n');
        crate::manifest::atomic_write(dir.join("layers.json"), body.as_bytes())
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join("layers.json");
        let body = std::fs::read_to_string(&meta_path)
            .map_err(|e| Error::io(meta_path.display().to_string(), e))?;
        let meta: MlpManifest = serde_json::from_str(&body)?;
        let mut buffers: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for entry in &meta.tensors {
            let t = tensor_io::read_tensor(dir.join(&entry.file))?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::InvalidSpec(format!(
                    "tensor {} has shape {:?}, manifest says {:?}",
                    entry.name,
                    t.shape(),
                    entry.shape
                )));
            }
            buffers.insert(entry.name.clone(), t.into_values());
        }
        let mut take = |name: &str| {
            buffers
                .remove(name)
                .ok_or_else(|| Error::InvalidSpec(format!("model dir missing tensor {name}")))
        };
        let p = MlpParams {
            data_dim: meta.data_dim,
            hidden_dim: meta.hidden_dim,
            time_features: meta.time_features,
            w1: take("w1")?,
            b1: take("b1")?,
            w2: take("w2")?,
            b2: take("b2")?,
            w3: take("w3")?,
            b3: take("b3")?,
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MlpManifest {
    data_dim: usize,
    hidden_dim: usize,
    time_features: usize,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

pub(crate) struct ForwardCache {
    a1: Vec<f64>,
    a2: Vec<f64>,
    out: Vec<f64>,
}

impl ForwardCache {
    pub(crate) fn out(&self) -> &[f64] {
        &self.out
    }
}

/// Gradient buffers mirroring [`MlpParams`].
pub struct MlpGrads {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    w3: Vec<f64>,
    b3: Vec<f64>,
}

impl MlpGrads {
    pub fn zeros_like(p: &MlpParams) -> Self {
        MlpGrads {
            w1: vec![0.0; p.w1.len()],
            b1: vec![0.0; p.b1.len()],
            w2: vec![0.0; p.w2.len()],
            b2: vec![0.0; p.b2.len()],
            w3: vec![0.0; p.w3.len()],
            b3: vec![0.0; p.b3.len()],
        }
    }

    pub(crate) fn zero(&mut self) {
        for b in [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ] {
            b.fill(0.0);
        }
    }

    /// Flat view matching `MlpParams::param` indexing.
    pub fn param(&self, idx: usize) -> f64 {
        let bufs = [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3];
        let mut i = idx;
        for b in bufs {
            if i < b.len() {
                return b[i];
            }
            i -= b.len();
        }
        panic!("gradient index {idx} out of range");
    }
}

fn fill_glorot(buf: &mut [f64], fan_in: usize, fan_out: usize, rng: &mut RngStream) {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in buf.iter_mut() {
        *v = (2.0 * rng.next_uniform() - 1.0) * bound;
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
    let cols = x.len();
    let mut out = Vec::with_capacity(rows);
    for i in 0..rows {
        let row = &w[i * cols..(i + 1) * cols];
        let dot: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
        out.push(dot + b[i]);
    }
    out
}

fn affine_tanh(w: &[f64], b: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
    let mut out = affine(w, b, x, rows);
    for v in out.iter_mut() {
        *v = v.tanh();
    }
    out
}

/// Noise prediction through the MLP at timestep `t` of `sched`.
pub fn eps_mlp(params: &MlpParams, xt: &Sample, sched: &NoiseSchedule, t: usize) -> Result<Sample> {
    sched.check_t(t)?;
    let out = params.forward_with_time(xt.values(), sched.alpha_bar(t))?;
    Sample::new(xt.shape().to_vec(), out)
}

/// A noise predictor: either the analytic mixture optimum or a trained MLP.
#[derive(Debug, Clone)]
pub enum DenoiserModel {
    AnalyticMixture(GaussianMixture),
    Mlp(MlpParams),
}

impl DenoiserModel {
    pub fn dim(&self) -> usize {
        match self {
            DenoiserModel::AnalyticMixture(m) => m.dim(),
            DenoiserModel::Mlp(p) => p.data_dim,
        }
    }

    pub fn predict_eps(&self, xt: &Sample, alpha_bar: f64) -> Result<Sample> {
        match self {
            DenoiserModel::AnalyticMixture(m) => eps_analytic_at(m, xt, alpha_bar),
            DenoiserModel::Mlp(p) => {
                let out = p.forward_with_time(xt.values(), alpha_bar)?;
                Sample::new(xt.shape().to_vec(), out)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub n_steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.n_steps == 0 || !(self.learning_rate >= 0.0) {
            return Err(Error::InvalidSpec(format!(
                "train config must be positive: batch {} steps {} lr {}",
                self.batch_size, self.n_steps, self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Source of clean training samples.
pub trait DataSampler {
    fn dim(&self) -> usize;
    fn draw(&self, rng: &mut RngStream) -> Sample;
}

impl DataSampler for GaussianMixture {
    fn dim(&self) -> usize {
        self.dim()
    }

    fn draw(&self, rng: &mut RngStream) -> Sample {
        GaussianMixture::draw(self, rng)
    }
}

/// Uniform draws from a fixed pool of samples.
pub struct PoolSampler {
    samples: Vec<Sample>,
}

impl PoolSampler {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("sample pool".into()));
        }
        let shape = samples[0].shape().to_vec();
        for s in &samples {
            if s.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    expected: shape,
                    got: s.shape().to_vec(),
                });
            }
        }
        Ok(PoolSampler { samples })
    }
}

impl DataSampler for PoolSampler {
    fn dim(&self) -> usize {
        self.samples[0].len()
    }

    fn draw(&self, rng: &mut RngStream) -> Sample {
        let idx = rng.next_below(self.samples.len() as u64) as usize;
        self.samples[idx].clone()
    }
}

pub struct TrainOutcome {
    pub params: MlpParams,
    /// Per-step training loss (mean squared error per element).
    pub losses: Vec<f64>,
}

/// Supervised noise-prediction training: repeatedly draw a clean sample, a
/// uniform timestep and a fresh noise vector, diffuse, and take one SGD step
/// on the squared prediction error. Losses are recorded per step; NaN aborts
/// with a diagnostic.
pub fn train_denoiser(
    data: &dyn DataSampler,
    sched: &NoiseSchedule,
    arch: MlpArch,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if arch.time_features == 0 || arch.time_features % 2 != 0 {
        return Err(Error::InvalidSpec(
            "denoiser needs an even, positive time feature count".into(),
        ));
    }
    let d = data.dim();
    let mut rng = RngStream::new(cfg.seed);
    let mut params = MlpParams::init(d, arch, &mut rng);
    let mut grads = MlpGrads::zeros_like(&params);
    let mut losses = Vec::with_capacity(cfg.n_steps);
    let t_max = sched.timesteps() as u64;
    let norm = 1.0 / (cfg.batch_size * d) as f64;

    let mut input = vec![0.0; params.input_dim()];
    for step in 0..cfg.n_steps {
        grads.zero();
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            let x0 = data.draw(&mut rng);
            let t = 1 + rng.next_below(t_max) as usize;
            let eps = rng.normal_sample(x0.shape());
            let xt = forward_diffuse(&x0, sched, t, &eps)?;
            input[..d].copy_from_slice(xt.values());
            input[d..].copy_from_slice(&time_features(sched.alpha_bar(t), arch.time_features));
            let cache = params.forward_cached(&input);
            let mut d_out = vec![0.0; d];
            for ((o, e), slot) in cache.out.iter().zip(eps.values()).zip(d_out.iter_mut()) {
                let diff = o - e;
                loss += diff * diff * norm;
                *slot = 2.0 * diff * norm;
            }
            params.backward_into(&input, &cache, &d_out, &mut grads);
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss diverged at step {step}"
            )));
        }
        params.sgd_step(&grads, cfg.learning_rate);
        losses.push(loss);
    }
    Ok(TrainOutcome { params, losses })
}

/// Squared-error loss of the MLP noise predictor on one already-diffused
/// example; shared by training and the finite-difference gradient check.
pub fn denoiser_example_loss(
    params: &MlpParams,
    xt: &Sample,
    alpha_bar: f64,
    eps: &Sample,
) -> Result<f64> {
    let out = params.forward_with_time(xt.values(), alpha_bar)?;
    let norm = 1.0 / xt.len() as f64;
    Ok(out
        .iter()
        .zip(eps.values())
        .map(|(o, e)| (o - e) * (o - e) * norm)
        .sum())
}

/// Reverse-mode gradient of [`denoiser_example_loss`] for every parameter.
pub fn denoiser_example_grads(
    params: &MlpParams,
    xt: &Sample,
    alpha_bar: f64,
    eps: &Sample,
) -> Result<MlpGrads> {
    let d = params.data_dim;
    let mut input = Vec::with_capacity(params.input_dim());
    input.extend_from_slice(xt.values());
    input.extend(time_features(alpha_bar, params.time_features));
    let cache = params.forward_cached(&input);
    let norm = 1.0 / d as f64;
    let d_out: Vec<f64> = cache
        .out
        .iter()
        .zip(eps.values())
        .map(|(o, e)| 2.0 * (o - e) * norm)
        .collect();
    let mut grads = MlpGrads::zeros_like(params);
    params.backward_into(&input, &cache, &d_out, &mut grads);
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{build_schedule, ScheduleSpec};
    use proptest::prelude::*;

    fn sched100() -> NoiseSchedule {
        build_schedule(&ScheduleSpec::linear(100, 1e-3, 0.05)).unwrap()
    }

    #[test]
    fn mixture_validates() {
        assert!(GaussianMixture::new(vec![0.5, 0.4], vec![vec![0.0], vec![1.0]], vec![1.0, 1.0])
            .is_err());
        assert!(GaussianMixture::new(vec![1.0], vec![vec![0.0]], vec![0.0]).is_err());
        assert!(GaussianMixture::new(vec![0.5, 0.5], vec![vec![0.0], vec![1.0, 2.0]], vec![1.0, 1.0])
            .is_err());
    }

    #[test]
    fn single_component_conditioning_hand_example() {
        // mean 0, variance 1, abar = 0.5, x = 1:
        // E[x0|x] = sqrt(0.5) * x = 0.70711 and eps = 0.70711.
        let mix = GaussianMixture::new(vec![1.0], vec![vec![0.0]], vec![1.0]).unwrap();
        let post = mix.posterior_x0_mean(&[1.0], 0.5);
        assert!((post[0] - (0.5f64).sqrt()).abs() < 1e-12);
        let eps = mix.eps_at(&[1.0], 0.5);
        let expect = (1.0 - (0.5f64).sqrt() * post[0]) / (0.5f64).sqrt();
        assert!((eps[0] - expect).abs() < 1e-12);
        assert!((eps[0] - 0.70711).abs() < 1e-5);
    }

    #[test]
    fn symmetric_point_between_mirror_components() {
        let mix = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![vec![-2.0], vec![2.0]],
            vec![0.5, 0.5],
        )
        .unwrap();
        let post = mix.posterior_x0_mean(&[0.0], 0.7);
        assert!(post[0].abs() < 1e-12);
        let eps = mix.eps_at(&[0.0], 0.7);
        assert!(eps[0].abs() < 1e-12);
    }

    #[test]
    fn eps_bounded_near_alpha_bar_one() {
        let mix = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![vec![-1.0], vec![1.0]],
            vec![0.04, 0.04],
        )
        .unwrap();
        // Inside the data support, the score form stays small as the noise
        // variance vanishes.
        for &x in &[-1.0, -0.5, 0.5, 1.0] {
            let eps = mix.eps_at(&[x], 1.0 - 1e-6);
            assert!(eps[0].is_finite());
            assert!(eps[0].abs() < 1.0, "eps({x}) = {}", eps[0]);
        }
        let at_one = mix.eps_at(&[0.5], 1.0);
        assert_eq!(at_one[0], 0.0);
    }

    #[test]
    fn score_form_matches_definition() {
        // eps == (x - sqrt(abar) E[x0|x]) / sqrt(1-abar) away from the
        // boundary.
        let mix = GaussianMixture::new(
            vec![0.3, 0.7],
            vec![vec![-1.0, 0.5], vec![2.0, -0.25]],
            vec![0.2, 0.8],
        )
        .unwrap();
        let x = [0.4, -0.9];
        for &abar in &[0.1, 0.5, 0.9] {
            let eps = mix.eps_at(&x, abar);
            let post = mix.posterior_x0_mean(&x, abar);
            for j in 0..2 {
                let direct = (x[j] - abar.sqrt() * post[j]) / (1.0 - abar).sqrt();
                assert!((eps[j] - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn posterior_mean_matches_monte_carlo() {
        // Monte Carlo oracle: draw x0 from the mixture, diffuse, and average
        // x0 over draws landing near the probe point.
        let mix = GaussianMixture::new(vec![0.4, 0.6], vec![vec![-1.5], vec![1.0]], vec![0.3, 0.5])
            .unwrap();
        let abar: f64 = 0.6;
        let probe = 0.2;
        let band = 0.05;
        let mut rng = RngStream::new(123);
        let mut acc = 0.0;
        let mut count = 0usize;
        for _ in 0..1_000_000 {
            let x0 = mix.draw(&mut rng);
            let xt = abar.sqrt() * x0.values()[0] + (1.0 - abar).sqrt() * rng.next_normal();
            if (xt - probe).abs() < band {
                acc += x0.values()[0];
                count += 1;
            }
        }
        let mc = acc / count as f64;
        let exact = mix.posterior_x0_mean(&[probe], abar)[0];
        assert!(count > 10_000);
        // Band-averaging and MC noise both contribute; 2e-2 is ample.
        assert!((mc - exact).abs() < 2e-2, "mc {mc} vs exact {exact}");
    }

    #[test]
    fn mlp_zero_params_give_zero_output() {
        let p = MlpParams::zeros(3, MlpArch { hidden: 8, time_features: 4 });
        let out = p.forward_with_time(&[0.5, -0.5, 1.0], 0.7).unwrap();
        assert_eq!(out, vec![0.0; 3]);
    }

    #[test]
    fn mlp_output_shape_and_determinism() {
        let mut rng = RngStream::new(17);
        let p = MlpParams::init(5, MlpArch { hidden: 16, time_features: 6 }, &mut rng);
        let x = [0.1, 0.2, 0.3, 0.4, 0.5];
        let a = p.forward_with_time(&x, 0.3).unwrap();
        let b = p.forward_with_time(&x, 0.3).unwrap();
        assert_eq!(a.len(), 5);
        for (u, v) in a.iter().zip(&b) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn eps_mlp_checks_range_and_shape() {
        let sched = sched100();
        let mut rng = RngStream::new(1);
        let p = MlpParams::init(2, MlpArch { hidden: 8, time_features: 4 }, &mut rng);
        let x = Sample::from_vec(vec![0.0, 0.0]).unwrap();
        assert!(eps_mlp(&p, &x, &sched, 0).is_err());
        assert!(eps_mlp(&p, &x, &sched, 101).is_err());
        let bad = Sample::from_vec(vec![0.0; 3]).unwrap();
        assert!(eps_mlp(&p, &bad, &sched, 5).is_err());
        assert_eq!(eps_mlp(&p, &x, &sched, 5).unwrap().shape(), x.shape());
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = RngStream::new(2);
        let p = MlpParams::init(3, MlpArch { hidden: 4, time_features: 2 }, &mut rng);
        p.save_dir(dir.path()).unwrap();
        let q = MlpParams::load_dir(dir.path()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let mix = GaussianMixture::new(vec![1.0], vec![vec![0.0, 0.0]], vec![1.0]).unwrap();
        let sched = sched100();
        let arch = MlpArch { hidden: 8, time_features: 4 };
        let cfg = TrainConfig {
            batch_size: 4,
            n_steps: 10,
            learning_rate: 0.0,
            seed: 5,
        };
        let out = train_denoiser(&mix, &sched, arch, &cfg).unwrap();
        let fresh = MlpParams::init(2, arch, &mut RngStream::new(5));
        assert_eq!(out.params, fresh);
        assert_eq!(out.losses.len(), 10);
    }

    #[test]
    fn training_reduces_loss_on_toy_mixture() {
        let mix = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![vec![-2.0, 0.0], vec![2.0, 0.0]],
            vec![0.05, 0.05],
        )
        .unwrap();
        let sched = sched100();
        let cfg = TrainConfig {
            batch_size: 16,
            n_steps: 1500,
            learning_rate: 5e-3,
            seed: 3,
        };
        let out = train_denoiser(&mix, &sched, MlpArch { hidden: 32, time_features: 8 }, &cfg)
            .unwrap();
        let head: f64 = out.losses[..200].iter().sum::<f64>() / 200.0;
        let tail: f64 = out.losses[out.losses.len() - 200..].iter().sum::<f64>() / 200.0;
        assert!(tail < head, "head {head} tail {tail}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = RngStream::new(31);
        let mut params = MlpParams::init(2, MlpArch { hidden: 10, time_features: 4 }, &mut rng);
        let xt = Sample::from_vec(vec![0.3, -0.8]).unwrap();
        let eps = Sample::from_vec(vec![0.9, 0.1]).unwrap();
        let abar = 0.42;
        let grads = denoiser_example_grads(&params, &xt, abar, &eps).unwrap();
        let n = params.num_params();
        let h = 1e-5;
        for k in 0..50 {
            let idx = (k * 97) % n;
            let orig = params.param(idx);
            params.set_param(idx, orig + h);
            let up = denoiser_example_loss(&params, &xt, abar, &eps).unwrap();
            params.set_param(idx, orig - h);
            let down = denoiser_example_loss(&params, &xt, abar, &eps).unwrap();
            params.set_param(idx, orig);
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.param(idx);
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            assert!(rel < 1e-4, "idx {idx}: analytic {analytic} numeric {numeric}");
        }
    }

    proptest! {
        #[test]
        fn responsibilities_sum_to_one(
            x in proptest::collection::vec(-5.0f64..5.0, 2),
            abar in 1e-6f64..1.0,
        ) {
            let mix = GaussianMixture::new(
                vec![0.2, 0.5, 0.3],
                vec![vec![-2.0, 0.0], vec![0.0, 1.0], vec![3.0, -1.0]],
                vec![0.3, 1.0, 0.7],
            ).unwrap();
            let r = mix.responsibilities(&x, abar);
            let sum: f64 = r.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(r.iter().all(|&v| v >= 0.0));
        }
    }
}
