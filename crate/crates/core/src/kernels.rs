//! Unifying random kernels: finite random feature maps `x -> g(omega, x)`.
//!
//! A kernel is described by a [`UrkConfig`]: a sampler for the random
//! weights `omega`, a [`KernelNetwork`] `g` whose trainable weights live in a
//! [`ParamVector`], a sample count `m` and a normaliser. The feature matrix
//! stacks `m` blocks of `d` rows, block `i` being `g(omega_i, X)`, and the
//! kernel is the Gram product of feature columns.
//!
//! Random streams are assigned per omega sample (`ChaCha8` stream `i` of the
//! configured seed), so any sample range can be regenerated independently
//! and parallel evaluation never changes results.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, Tape, Unary, Var};
use crate::error::{FedError, Result};
use crate::linalg::{self, DenseMatrix};
use crate::params::{ParamLayout, ParamVector, LOG_LAMBDA, LOG_SIGMA};

/// Omega samples evaluated per chunk when streaming large `m`.
pub const STREAM_CHUNK: usize = 2048;

/// Feature-map columns above which evaluation is split across threads.
const PARALLEL_COLUMNS: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OmegaKind {
    /// `scale * N(0, I_dim)`.
    StandardNormal {
        dim: usize,
        #[serde(default = "default_scale")]
        scale: f64,
    },
    /// Counts of `trials` categorical draws over `probabilities`.
    Multinomial { trials: u32, probabilities: Vec<f64> },
}

fn default_scale() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OmegaSampler {
    #[serde(flatten)]
    pub kind: OmegaKind,
    pub seed: u64,
}

impl OmegaSampler {
    pub fn dim(&self) -> usize {
        match &self.kind {
            OmegaKind::StandardNormal { dim, .. } => *dim,
            OmegaKind::Multinomial { probabilities, .. } => probabilities.len(),
        }
    }

    fn validate(&self) -> Result<()> {
        match &self.kind {
            OmegaKind::StandardNormal { dim, scale } => {
                if *dim == 0 {
                    return Err(FedError::InvalidConfig("omega dimension must be >= 1".into()));
                }
                if !(scale.is_finite() && *scale > 0.0) {
                    return Err(FedError::InvalidConfig(format!("omega scale must be positive, got {scale}")));
                }
            }
            OmegaKind::Multinomial { trials, probabilities } => {
                if probabilities.is_empty() {
                    return Err(FedError::InvalidConfig("multinomial needs at least one category".into()));
                }
                if probabilities.iter().any(|&p| !(p >= 0.0)) {
                    return Err(FedError::InvalidConfig("multinomial probabilities must be non-negative".into()));
                }
                let total: f64 = probabilities.iter().sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(FedError::InvalidConfig(format!(
                        "multinomial probabilities sum to {total}, expected 1"
                    )));
                }
                if *trials == 0 {
                    return Err(FedError::InvalidConfig("multinomial needs at least one trial".into()));
                }
            }
        }
        Ok(())
    }

    fn stream(&self, sample: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(sample as u64);
        rng
    }

    fn draw_into(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        match &self.kind {
            OmegaKind::StandardNormal { scale, .. } => {
                for v in out.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v = scale * z;
                }
            }
            OmegaKind::Multinomial { trials, probabilities } => {
                out.iter_mut().for_each(|v| *v = 0.0);
                let last = probabilities.iter().rposition(|&p| p > 0.0).unwrap_or(0);
                for _ in 0..*trials {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut cat = last;
                    for (k, &p) in probabilities.iter().enumerate() {
                        acc += p;
                        if u < acc && p > 0.0 {
                            cat = k;
                            break;
                        }
                    }
                    out[cat] += 1.0;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Exp,
    Cos,
    Sin,
}

impl Activation {
    fn unary(self) -> Option<Unary> {
        match self {
            Activation::Identity => None,
            Activation::Tanh => Some(Unary::Tanh),
            Activation::Relu => Some(Unary::Relu),
            Activation::Exp => Some(Unary::Exp),
            Activation::Cos => Some(Unary::Cos),
            Activation::Sin => Some(Unary::Sin),
        }
    }

    fn apply(self, tape: &mut Tape, v: Var) -> Var {
        match self.unary() {
            Some(u) => tape.unary(u, v),
            None => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
}

/// Residual network applied to each omega sample: `h(w) = w + W2 tanh(W1 w + b1) + b2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShifterSpec {
    pub hidden: usize,
}

/// How inputs are randomised per omega sample before the extractor.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ReplicatePolicy {
    #[default]
    None,
    /// `x * (1 + scale * eps_i)` elementwise.
    MultiplyNoise { scale: f64 },
    /// `x + scale * eps_i`.
    AddNoise { scale: f64 },
}

impl ReplicatePolicy {
    pub fn is_none(&self) -> bool {
        matches!(self, ReplicatePolicy::None)
    }
}

/// How the (shifted) omega sample and the extracted features form `g`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Combine {
    /// `[cos(h(w)^T f(x)), sin(h(w)^T f(x))]`, two features per sample.
    RffCosSin,
    /// `act(h(w)^T f(x))`, one feature per sample.
    InnerProduct { activation: Activation },
    /// `prod_i xbar_i^{w_i}` with `xbar = [sqrt(2c), sqrt(2q) f(x)]`; needs
    /// integer omega.
    ElementwisePower { constant: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelNetwork {
    pub input_dim: usize,
    #[serde(default)]
    pub extractor: Vec<LayerSpec>,
    #[serde(default)]
    pub shifter: Option<ShifterSpec>,
    #[serde(default)]
    pub replicate: ReplicatePolicy,
    pub combine: Combine,
}

impl KernelNetwork {
    /// Width of the extractor output.
    pub fn latent_dim(&self) -> usize {
        self.extractor.last().map_or(self.input_dim, |l| l.width)
    }

    /// Dimension of omega expected by the combine rule.
    pub fn omega_dim(&self) -> usize {
        match self.combine {
            Combine::ElementwisePower { .. } => self.latent_dim() + 1,
            _ => self.latent_dim(),
        }
    }

    /// Features produced per omega sample.
    pub fn output_dim(&self) -> usize {
        match self.combine {
            Combine::RffCosSin => 2,
            _ => 1,
        }
    }

    pub fn layout(&self) -> Result<ParamLayout> {
        let mut l = ParamLayout::new();
        let mut fan_in = self.input_dim;
        for (i, layer) in self.extractor.iter().enumerate() {
            l.push(format!("extractor.{i}.weight"), layer.width, fan_in)?;
            l.push(format!("extractor.{i}.bias"), layer.width, 1)?;
            fan_in = layer.width;
        }
        if let Some(s) = &self.shifter {
            let d = self.omega_dim();
            l.push("shifter.0.weight", s.hidden, d)?;
            l.push("shifter.0.bias", s.hidden, 1)?;
            l.push("shifter.1.weight", d, s.hidden)?;
            l.push("shifter.1.bias", d, 1)?;
        }
        l.push(LOG_SIGMA, 1, 1)?;
        l.push(LOG_LAMBDA, 1, 1)?;
        Ok(l)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    SqrtM,
    SqrtMMinusOne,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UrkConfig {
    pub sampler: OmegaSampler,
    pub network: KernelNetwork,
    pub m: usize,
    pub normalization: Normalization,
}

impl UrkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(FedError::InvalidConfig(format!("sample count m must be >= 2, got {}", self.m)));
        }
        if self.network.input_dim == 0 {
            return Err(FedError::InvalidConfig("input dimension must be >= 1".into()));
        }
        if self.network.extractor.iter().any(|l| l.width == 0) {
            return Err(FedError::InvalidConfig("extractor layers need width >= 1".into()));
        }
        self.sampler.validate()?;
        if self.sampler.dim() != self.network.omega_dim() {
            return Err(FedError::InvalidConfig(format!(
                "sampler draws {}-dimensional omega but the network expects {}",
                self.sampler.dim(),
                self.network.omega_dim()
            )));
        }
        match (&self.network.combine, &self.sampler.kind) {
            (Combine::ElementwisePower { constant }, OmegaKind::Multinomial { .. }) => {
                if !(*constant >= 0.0) {
                    return Err(FedError::InvalidConfig("polynomial constant must be >= 0".into()));
                }
                if self.network.shifter.is_some() || !self.network.replicate.is_none() {
                    return Err(FedError::InvalidConfig(
                        "elementwise-power combine supports neither a shifter nor replication".into(),
                    ));
                }
            }
            (Combine::ElementwisePower { .. }, _) => {
                return Err(FedError::InvalidConfig("elementwise-power combine needs a multinomial sampler".into()))
            }
            (_, OmegaKind::Multinomial { .. }) => {
                return Err(FedError::InvalidConfig("multinomial omega only pairs with elementwise-power".into()))
            }
            _ => {}
        }
        match self.network.replicate {
            ReplicatePolicy::MultiplyNoise { scale } | ReplicatePolicy::AddNoise { scale } if !scale.is_finite() => {
                return Err(FedError::InvalidConfig("replicate scale must be finite".into()))
            }
            _ => {}
        }
        Ok(())
    }

    /// Total feature dimension `m * d`.
    pub fn feature_dim(&self) -> usize {
        self.m * self.network.output_dim()
    }

    pub fn normalizer(&self) -> f64 {
        match self.normalization {
            Normalization::SqrtM => (self.m as f64).sqrt(),
            Normalization::SqrtMMinusOne => ((self.m - 1) as f64).sqrt(),
        }
    }

    pub fn layout(&self) -> Result<ParamLayout> {
        self.network.layout()
    }

    fn replicate_dim(&self) -> usize {
        if self.network.replicate.is_none() {
            0
        } else {
            self.network.input_dim
        }
    }
}

/// Random weights for a contiguous range of sample indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OmegaSamples {
    /// `count x omega_dim`, one sample per row.
    pub weights: DenseMatrix,
    /// `count x input_dim` replication noise, present iff replication is on.
    pub noise: Option<DenseMatrix>,
}

impl OmegaSamples {
    pub fn count(&self) -> usize {
        self.weights.rows()
    }

    /// Weights with any replication noise appended as extra columns.
    pub fn to_matrix(&self) -> DenseMatrix {
        match &self.noise {
            Some(n) => DenseMatrix::hstack(&[&self.weights, n]).expect("row counts agree"),
            None => self.weights.clone(),
        }
    }

    /// Inverse of [`OmegaSamples::to_matrix`].
    pub fn from_matrix(m: &DenseMatrix, omega_dim: usize) -> Result<Self> {
        if m.cols() < omega_dim {
            return Err(FedError::ShapeMismatch(format!(
                "omega matrix has {} columns, need at least {omega_dim}",
                m.cols()
            )));
        }
        let head: Vec<usize> = (0..omega_dim).collect();
        let tail: Vec<usize> = (omega_dim..m.cols()).collect();
        let to_cols = |idx: &[usize]| m.transpose().select_rows(idx).transpose();
        Ok(Self { weights: to_cols(&head), noise: (!tail.is_empty()).then(|| to_cols(&tail)) })
    }

    /// Rows `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        let idx: Vec<usize> = (start..end).collect();
        Self { weights: self.weights.select_rows(&idx), noise: self.noise.as_ref().map(|n| n.select_rows(&idx)) }
    }
}

/// All `m` omega samples of a config.
pub fn sample_omegas(config: &UrkConfig) -> Result<OmegaSamples> {
    config.validate()?;
    Ok(sample_omega_range(config, 0, config.m))
}

/// Samples `start..start + count`, each from its own random stream.
pub fn sample_omega_range(config: &UrkConfig, start: usize, count: usize) -> OmegaSamples {
    let dim = config.sampler.dim();
    let rdim = config.replicate_dim();
    let mut w = vec![0.0; count * dim];
    let mut noise = vec![0.0; count * rdim];
    for i in 0..count {
        let mut rng = config.sampler.stream(start + i);
        config.sampler.draw_into(&mut rng, &mut w[i * dim..(i + 1) * dim]);
        for v in &mut noise[i * rdim..(i + 1) * rdim] {
            *v = rng.sample(StandardNormal);
        }
    }
    OmegaSamples {
        weights: DenseMatrix::from_raw(count, dim, w),
        noise: (rdim > 0).then(|| DenseMatrix::from_raw(count, rdim, noise)),
    }
}

/// Fresh network weights (Glorot-uniform, zero biases) plus `log sigma`,
/// `log lambda`.
pub fn init_params(config: &UrkConfig, seed: u64, sigma: f64, lambda: f64) -> Result<ParamVector> {
    config.validate()?;
    if !(sigma > 0.0 && lambda > 0.0) {
        return Err(FedError::InvalidConfig("initial sigma and lambda must be positive".into()));
    }
    let layout = config.layout()?;
    let mut p = ParamVector::zeros(layout.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for b in layout.blocks() {
        if b.name.ends_with(".weight") {
            let mut bound = (6.0 / (b.rows + b.cols) as f64).sqrt();
            // keep the shifter close to the identity at start
            if b.name == "shifter.1.weight" {
                bound *= 0.1;
            }
            for v in p.block_mut(&b.name)? {
                *v = rng.random_range(-bound..bound);
            }
        }
    }
    p.block_mut(LOG_SIGMA)?[0] = sigma.ln();
    p.block_mut(LOG_LAMBDA)?[0] = lambda.ln();
    Ok(p)
}

/// Records the unnormalised features `g(omega_i, X)` (`count*d x n`) on a tape.
pub fn raw_features_on_tape(
    tape: &mut Tape,
    config: &UrkConfig,
    params: &BoundParams,
    omegas: &OmegaSamples,
    x: &DenseMatrix,
) -> Result<Var> {
    let net = &config.network;
    if x.rows() != net.input_dim {
        return Err(FedError::ShapeMismatch(format!(
            "inputs have {} rows, network expects {}",
            x.rows(),
            net.input_dim
        )));
    }
    if omegas.weights.cols() != net.omega_dim() {
        return Err(FedError::ShapeMismatch(format!(
            "omega samples have {} columns, network expects {}",
            omegas.weights.cols(),
            net.omega_dim()
        )));
    }
    let count = omegas.count();
    let n = x.cols();

    // Inputs, replicated per sample if requested.
    let input = match (&net.replicate, &omegas.noise) {
        (ReplicatePolicy::None, _) => x.clone(),
        (policy, Some(noise)) => replicate_inputs(x, noise, policy),
        (_, None) => return Err(FedError::ShapeMismatch("replication noise missing from omega samples".into())),
    };
    let mut h = tape.leaf(input);
    for (i, layer) in net.extractor.iter().enumerate() {
        let w = params.get(&format!("extractor.{i}.weight"))?;
        let b = params.get(&format!("extractor.{i}.bias"))?;
        let z = tape.matmul(w, h)?;
        let z = tape.add_column(z, b)?;
        h = layer.activation.apply(tape, z);
    }

    if let Combine::ElementwisePower { constant } = net.combine {
        let q = net.latent_dim();
        let head = tape.leaf(DenseMatrix::filled(1, n, (2.0 * constant).sqrt()));
        let tail = tape.scale((2.0 * q as f64).sqrt(), h);
        let base = tape.vstack(&[head, tail])?;
        return tape.monomial(base, Arc::new(omegas.weights.clone()));
    }

    // omega as columns, optionally shifted
    let mut w = tape.leaf(omegas.weights.transpose());
    if net.shifter.is_some() {
        let w1 = params.get("shifter.0.weight")?;
        let b1 = params.get("shifter.0.bias")?;
        let w2 = params.get("shifter.1.weight")?;
        let b2 = params.get("shifter.1.bias")?;
        let z = tape.matmul(w1, w)?;
        let z = tape.add_column(z, b1)?;
        let z = tape.tanh(z);
        let z = tape.matmul(w2, z)?;
        let z = tape.add_column(z, b2)?;
        w = tape.add(w, z)?;
    }

    let proj = if net.replicate.is_none() {
        let wt = tape.transpose(w);
        tape.matmul(wt, h)?
    } else {
        debug_assert_eq!(tape.value(h).cols(), count * n);
        tape.replica_project(w, h)?
    };

    match net.combine {
        Combine::RffCosSin => {
            let c = tape.cos(proj);
            let s = tape.sin(proj);
            tape.interleave_rows(&[c, s])
        }
        Combine::InnerProduct { activation } => Ok(activation.apply(tape, proj)),
        Combine::ElementwisePower { .. } => unreachable!("handled above"),
    }
}

/// Normalised feature matrix `Phi` (`m*d x n`) recorded on a tape, for
/// training.
pub fn features_on_tape(
    tape: &mut Tape,
    config: &UrkConfig,
    params: &BoundParams,
    omegas: &OmegaSamples,
    x: &DenseMatrix,
) -> Result<Var> {
    let raw = raw_features_on_tape(tape, config, params, omegas, x)?;
    Ok(tape.scale(1.0 / config.normalizer(), raw))
}

fn replicate_inputs(x: &DenseMatrix, noise: &DenseMatrix, policy: &ReplicatePolicy) -> DenseMatrix {
    let (p, n) = x.shape();
    let count = noise.rows();
    DenseMatrix::from_fn(p, count * n, |r, c| {
        let (i, j) = (c / n, c % n);
        let eps = noise[(i, r)];
        match *policy {
            ReplicatePolicy::MultiplyNoise { scale } => x[(r, j)] * (1.0 + scale * eps),
            ReplicatePolicy::AddNoise { scale } => x[(r, j)] + scale * eps,
            ReplicatePolicy::None => x[(r, j)],
        }
    })
}

fn raw_features(
    config: &UrkConfig,
    params: &ParamVector,
    omegas: &OmegaSamples,
    x: &DenseMatrix,
) -> Result<DenseMatrix> {
    let mut tape = Tape::new();
    let bound = tape.bind(params)?;
    let v = raw_features_on_tape(&mut tape, config, &bound, omegas, x)?;
    Ok(tape.value(v).clone())
}

/// Normalised feature matrix for fixed omega samples.
///
/// Columns are evaluated in independent blocks (in parallel when `x` is
/// wide); every column depends only on its own input, so the result does
/// not depend on the split.
pub fn feature_map_with(
    config: &UrkConfig,
    params: &ParamVector,
    omegas: &OmegaSamples,
    x: &DenseMatrix,
) -> Result<DenseMatrix> {
    let n = x.cols();
    let raw = if n > PARALLEL_COLUMNS {
        let blocks: Vec<Vec<usize>> =
            (0..n).collect::<Vec<_>>().chunks(PARALLEL_COLUMNS).map(<[usize]>::to_vec).collect();
        let parts: Vec<DenseMatrix> = blocks
            .par_iter()
            .map(|idx| raw_features(config, params, omegas, &x.select_cols(idx)))
            .collect::<Result<_>>()?;
        DenseMatrix::hstack(&parts.iter().collect::<Vec<_>>())?
    } else {
        raw_features(config, params, omegas, x)?
    };
    Ok(raw.scale(1.0 / config.normalizer()))
}

/// Normalised feature matrix `Phi` (`m*d x n`), sampling omega from the
/// config.
pub fn feature_map(config: &UrkConfig, params: &ParamVector, x: &DenseMatrix) -> Result<DenseMatrix> {
    let omegas = sample_omegas(config)?;
    feature_map_with(config, params, &omegas, x)
}

/// `feature_map(X)^T feature_map(X')`, accumulated over omega chunks so the
/// full feature matrix is never materialised.
pub fn urk_kernel(config: &UrkConfig, params: &ParamVector, x: &DenseMatrix, x2: &DenseMatrix) -> Result<DenseMatrix> {
    config.validate()?;
    check_inputs(config, x)?;
    check_inputs(config, x2)?;
    let partials: Vec<DenseMatrix> = chunk_ranges(config.m)
        .into_par_iter()
        .map(|(start, end)| {
            let om = sample_omega_range(config, start, end - start);
            let a = raw_features(config, params, &om, x)?;
            let b = raw_features(config, params, &om, x2)?;
            a.transpose().matmul(&b)
        })
        .collect::<Result<_>>()?;
    let mut k = DenseMatrix::zeros(x.cols(), x2.cols());
    for p in &partials {
        k.add_assign(p)?;
    }
    let norm2 = config.normalizer().powi(2);
    Ok(k.scale(1.0 / norm2))
}

/// Monte-Carlo estimate of `k(x_j, x'_j)` for paired columns, with its
/// estimated standard error.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedEstimate {
    pub values: Vec<f64>,
    pub std_errors: Vec<f64>,
}

pub fn paired_kernel_estimate(
    config: &UrkConfig,
    params: &ParamVector,
    x: &DenseMatrix,
    x2: &DenseMatrix,
) -> Result<PairedEstimate> {
    config.validate()?;
    check_inputs(config, x)?;
    check_inputs(config, x2)?;
    if x.cols() != x2.cols() {
        return Err(FedError::ShapeMismatch("paired inputs need equal column counts".into()));
    }
    let n = x.cols();
    let d = config.network.output_dim();
    let partials: Vec<(Vec<f64>, Vec<f64>)> = chunk_ranges(config.m)
        .into_par_iter()
        .map(|(start, end)| {
            let om = sample_omega_range(config, start, end - start);
            let a = raw_features(config, params, &om, x)?;
            let b = raw_features(config, params, &om, x2)?;
            let mut s1 = vec![0.0; n];
            let mut s2 = vec![0.0; n];
            for i in 0..(end - start) {
                for j in 0..n {
                    let v: f64 = (0..d).map(|r| a[(i * d + r, j)] * b[(i * d + r, j)]).sum();
                    s1[j] += v;
                    s2[j] += v * v;
                }
            }
            Ok((s1, s2))
        })
        .collect::<Result<_>>()?;
    let mut s1 = vec![0.0; n];
    let mut s2 = vec![0.0; n];
    for (a, b) in &partials {
        for j in 0..n {
            s1[j] += a[j];
            s2[j] += b[j];
        }
    }
    let m = config.m as f64;
    let norm2 = config.normalizer().powi(2);
    let values = s1.iter().map(|s| s / norm2).collect();
    let std_errors = s1
        .iter()
        .zip(&s2)
        .map(|(&a, &b)| {
            let mean = a / m;
            let var = ((b - m * mean * mean) / (m - 1.0)).max(0.0);
            // the estimate is (m / norm2) * mean
            (m / norm2) * (var / m).sqrt()
        })
        .collect();
    Ok(PairedEstimate { values, std_errors })
}

fn chunk_ranges(m: usize) -> Vec<(usize, usize)> {
    (0..m).step_by(STREAM_CHUNK).map(|s| (s, (s + STREAM_CHUNK).min(m))).collect()
}

fn check_inputs(config: &UrkConfig, x: &DenseMatrix) -> Result<()> {
    if x.rows() != config.network.input_dim {
        return Err(FedError::ShapeMismatch(format!(
            "inputs have {} rows, network expects {}",
            x.rows(),
            config.network.input_dim
        )));
    }
    Ok(())
}

/// A fixed-feature network: no trainable weights besides the hyperparameters.
fn plain_network(input_dim: usize, combine: Combine) -> KernelNetwork {
    KernelNetwork { input_dim, extractor: Vec::new(), shifter: None, replicate: ReplicatePolicy::None, combine }
}

/// Random Fourier features for the Gaussian kernel `exp(-|x - x'|^2 / 2l^2)`.
pub fn rff_gaussian(lengthscale: f64, dim: usize, m: usize, seed: u64) -> Result<UrkConfig> {
    if !(lengthscale > 0.0) {
        return Err(FedError::InvalidConfig(format!("lengthscale must be positive, got {lengthscale}")));
    }
    let c = UrkConfig {
        sampler: OmegaSampler { kind: OmegaKind::StandardNormal { dim, scale: 1.0 / lengthscale }, seed },
        network: plain_network(dim, Combine::RffCosSin),
        m,
        normalization: Normalization::SqrtM,
    };
    c.validate()?;
    Ok(c)
}

/// `g(w, x) = exp(w^T x)` with standard-normal `w`; limit kernel
/// `exp(|x + x'|^2 / 2)`.
pub fn exp_kernel_construction(dim: usize, m: usize, seed: u64) -> Result<UrkConfig> {
    let c = UrkConfig {
        sampler: OmegaSampler { kind: OmegaKind::StandardNormal { dim, scale: 1.0 }, seed },
        network: plain_network(dim, Combine::InnerProduct { activation: Activation::Exp }),
        m,
        normalization: Normalization::SqrtM,
    };
    c.validate()?;
    Ok(c)
}

/// Multinomial monomial features; limit kernel `(x^T x' + c)^n`.
pub fn poly_kernel_construction(constant: f64, degree: u32, dim: usize, m: usize, seed: u64) -> Result<UrkConfig> {
    if dim == 0 {
        return Err(FedError::InvalidConfig("input dimension must be >= 1".into()));
    }
    let mut probabilities = vec![0.5];
    probabilities.extend(std::iter::repeat_n(1.0 / (2.0 * dim as f64), dim));
    let c = UrkConfig {
        sampler: OmegaSampler { kind: OmegaKind::Multinomial { trials: degree, probabilities }, seed },
        network: plain_network(dim, Combine::ElementwisePower { constant }),
        m,
        normalization: Normalization::SqrtM,
    };
    c.validate()?;
    Ok(c)
}

/// Parameters for a config without trainable network weights.
pub fn fixed_params(config: &UrkConfig) -> Result<ParamVector> {
    init_params(config, 0, 1.0, 1.0)
}

/// Analytic limit kernels used as oracles.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ClosedForm {
    Gaussian { lengthscale: f64 },
    Exp,
    Poly { constant: f64, degree: u32 },
}

impl ClosedForm {
    pub fn eval(&self, x: &[f64], x2: &[f64]) -> f64 {
        assert_eq!(x.len(), x2.len(), "closed-form kernel inputs differ in dimension");
        match *self {
            ClosedForm::Gaussian { lengthscale } => {
                let d2: f64 = x.iter().zip(x2).map(|(a, b)| (a - b) * (a - b)).sum();
                (-d2 / (2.0 * lengthscale * lengthscale)).exp()
            }
            ClosedForm::Exp => {
                let s2: f64 = x.iter().zip(x2).map(|(a, b)| (a + b) * (a + b)).sum();
                (s2 / 2.0).exp()
            }
            ClosedForm::Poly { constant, degree } => (linalg::dot(x, x2) + constant).powi(degree as i32),
        }
    }
}

pub fn closed_form(kind: ClosedForm, x: &[f64], x2: &[f64]) -> f64 {
    kind.eval(x, x2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: &[f64]) -> DenseMatrix {
        DenseMatrix::column(v)
    }

    fn constant_config(m: usize) -> UrkConfig {
        // cos(0 * x) = 1 in every feature
        UrkConfig {
            sampler: OmegaSampler { kind: OmegaKind::StandardNormal { dim: 1, scale: 1.0 }, seed: 3 },
            network: KernelNetwork {
                input_dim: 1,
                extractor: vec![LayerSpec { width: 1, activation: Activation::Identity }],
                shifter: None,
                replicate: ReplicatePolicy::None,
                combine: Combine::InnerProduct { activation: Activation::Cos },
            },
            m,
            normalization: Normalization::SqrtM,
        }
    }

    #[test]
    fn standard_normal_moments() {
        let c = rff_gaussian(1.0, 1, 1_000_000, 42).unwrap();
        let om = sample_omegas(&c).unwrap();
        let v = om.weights.as_slice();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (v.len() - 1) as f64;
        assert!(mean.abs() < 0.005, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "variance {var}");
    }

    #[test]
    fn degenerate_multinomial() {
        let c = UrkConfig {
            sampler: OmegaSampler {
                kind: OmegaKind::Multinomial { trials: 3, probabilities: vec![1.0, 0.0, 0.0] },
                seed: 1,
            },
            network: plain_network(2, Combine::ElementwisePower { constant: 1.0 }),
            m: 17,
            normalization: Normalization::SqrtM,
        };
        let om = sample_omegas(&c).unwrap();
        for i in 0..17 {
            assert_eq!(om.weights.row(i), &[3.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_range_consistent() {
        let c = poly_kernel_construction(1.0, 3, 2, 500, 9).unwrap();
        let a = sample_omegas(&c).unwrap();
        let b = sample_omegas(&c).unwrap();
        assert_eq!(a, b);
        assert_eq!(sample_omega_range(&c, 100, 50), a.slice(100, 150));
        let mut c2 = c.clone();
        c2.sampler.seed = 10;
        assert_ne!(sample_omegas(&c2).unwrap(), a);
    }

    #[test]
    fn multinomial_rows_sum_to_trials() {
        let c = poly_kernel_construction(0.5, 4, 3, 1000, 5).unwrap();
        let om = sample_omegas(&c).unwrap();
        for i in 0..om.count() {
            assert_eq!(om.weights.row(i).iter().sum::<f64>(), 4.0);
        }
    }

    #[test]
    fn constant_features() {
        let c = constant_config(5);
        let mut p = init_params(&c, 0, 1.0, 1.0).unwrap();
        p.block_mut("extractor.0.weight").unwrap()[0] = 0.0;
        let x = DenseMatrix::row_vector(&[-1.0, 0.5, 3.0]);
        let phi = feature_map(&c, &p, &x).unwrap();
        for v in phi.as_slice() {
            assert!((v - 1.0 / 5f64.sqrt()).abs() < 1e-15);
        }
        let gram = phi.transpose().matmul(&phi).unwrap();
        for v in gram.as_slice() {
            assert!((v - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn rff_columns_have_unit_norm() {
        let c = rff_gaussian(0.7, 3, 64, 1).unwrap();
        let p = fixed_params(&c).unwrap();
        let x = DenseMatrix::from_fn(3, 7, |r, col| (r as f64 - 1.0) * 0.3 + col as f64 * 0.11);
        let phi = feature_map(&c, &p, &x).unwrap();
        assert_eq!(phi.rows(), 128);
        for j in 0..7 {
            let nrm: f64 = phi.col(j).iter().map(|v| v * v).sum();
            assert!((nrm - 1.0).abs() < 1e-14);
        }
        // row block i is [cos, sin] of sample i
        let om = sample_omegas(&c).unwrap();
        let proj: f64 = (0..3).map(|k| om.weights[(5, k)] * x[(k, 2)]).sum();
        assert!((phi[(10, 2)] - proj.cos() / 8.0).abs() < 1e-14);
        assert!((phi[(11, 2)] - proj.sin() / 8.0).abs() < 1e-14);
    }

    #[test]
    fn feature_map_rejects_wrong_input_dim() {
        let c = rff_gaussian(1.0, 2, 4, 0).unwrap();
        let p = fixed_params(&c).unwrap();
        let err = feature_map(&c, &p, &DenseMatrix::zeros(3, 2)).unwrap_err();
        assert!(matches!(err, FedError::ShapeMismatch(_)));
        assert!(matches!(
            urk_kernel(&c, &p, &DenseMatrix::zeros(1, 1), &DenseMatrix::zeros(2, 1)),
            Err(FedError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn rff_diagonal_is_exactly_one() {
        let c = rff_gaussian(1.3, 2, 1000, 4).unwrap();
        let p = fixed_params(&c).unwrap();
        let x = DenseMatrix::column(&[0.3, -2.0]);
        let k = urk_kernel(&c, &p, &x, &x).unwrap();
        assert!((k[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rff_matches_gaussian_1d() {
        let c = rff_gaussian(1.0, 1, 50_000, 2024).unwrap();
        let p = fixed_params(&c).unwrap();
        let k = urk_kernel(&c, &p, &single(&[0.0]), &single(&[1.0])).unwrap()[(0, 0)];
        assert!((k - (-0.5f64).exp()).abs() < 0.02, "k = {k}");
    }

    #[test]
    fn urk_kernel_matches_explicit_features() {
        let c = exp_kernel_construction(2, 5000, 8).unwrap();
        let p = fixed_params(&c).unwrap();
        let x = DenseMatrix::from_rows(&[vec![0.1, -0.2, 0.3], vec![0.0, 0.4, -0.1]]).unwrap();
        let phi = feature_map(&c, &p, &x).unwrap();
        let direct = phi.transpose().matmul(&phi).unwrap();
        let streamed = urk_kernel(&c, &p, &x, &x).unwrap();
        assert!(direct.max_abs_diff(&streamed) < 1e-12);
    }

    #[test]
    fn exp_kernel_zero_input_is_exact() {
        let c = exp_kernel_construction(1, 1000, 1).unwrap();
        let p = fixed_params(&c).unwrap();
        let est = paired_kernel_estimate(&c, &p, &single(&[0.0]), &single(&[0.0])).unwrap();
        assert!((est.values[0] - 1.0).abs() < 1e-12);
        assert!(est.std_errors[0] < 1e-12);
    }

    #[test]
    fn exp_kernel_monte_carlo() {
        let c = exp_kernel_construction(1, 200_000, 77).unwrap();
        let p = fixed_params(&c).unwrap();
        let x = DenseMatrix::row_vector(&[1.0, 1.0]);
        let x2 = DenseMatrix::row_vector(&[1.0, -1.0]);
        let est = paired_kernel_estimate(&c, &p, &x, &x2).unwrap();
        let truth = [ClosedForm::Exp.eval(&[1.0], &[1.0]), ClosedForm::Exp.eval(&[1.0], &[-1.0])];
        assert!((truth[0] - 2f64.exp()).abs() < 1e-12 && truth[1] == 1.0);
        for (j, t) in truth.iter().enumerate() {
            let err = (est.values[j] - t).abs();
            assert!(err <= 3.0 * est.std_errors[j], "pair {j}: err {err}, se {}", est.std_errors[j]);
        }
    }

    #[test]
    fn poly_kernel_monte_carlo() {
        // (0 + 1)^2 = 1, (1 + 1)^2 = 4, (-1 + 0)^2 = 1
        type Case<'a> = (&'a [f64], &'a [f64], f64, u32, f64);
        let cases: [Case; 3] =
            [(&[0.0], &[0.0], 1.0, 2, 1.0), (&[1.0, 0.0], &[1.0, 0.0], 1.0, 2, 4.0), (&[1.0], &[-1.0], 0.0, 2, 1.0)];
        for (x, x2, c0, deg, expected) in cases {
            assert!((ClosedForm::Poly { constant: c0, degree: deg }.eval(x, x2) - expected).abs() < 1e-12);
            let c = poly_kernel_construction(c0, deg, x.len(), 100_000, 31).unwrap();
            let p = fixed_params(&c).unwrap();
            let est = paired_kernel_estimate(&c, &p, &single(x), &single(x2)).unwrap();
            let err = (est.values[0] - expected).abs();
            assert!(
                err <= 3.0 * est.std_errors[0].max(1e-12),
                "{x:?},{x2:?}: est {} se {}",
                est.values[0],
                est.std_errors[0]
            );
        }
    }

    #[test]
    fn closed_forms() {
        assert_eq!(ClosedForm::Gaussian { lengthscale: 2.0 }.eval(&[1.0, 2.0], &[1.0, 2.0]), 1.0);
        assert!((ClosedForm::Exp.eval(&[1.0], &[1.0]) - 2f64.exp()).abs() < 1e-12);
        assert_eq!(ClosedForm::Poly { constant: 1.0, degree: 3 }.eval(&[1.0], &[1.0]), 8.0);
    }

    #[test]
    fn invalid_configs() {
        assert!(rff_gaussian(0.0, 1, 10, 0).is_err());
        assert!(rff_gaussian(1.0, 1, 1, 0).is_err());
        let mut c = poly_kernel_construction(1.0, 2, 2, 10, 0).unwrap();
        c.sampler.kind = OmegaKind::Multinomial { trials: 2, probabilities: vec![0.5, 0.5, 0.1] };
        assert!(c.validate().is_err());
        let mut c = rff_gaussian(1.0, 2, 10, 0).unwrap();
        c.network.extractor.push(LayerSpec { width: 3, activation: Activation::Tanh });
        assert!(c.validate().is_err(), "omega dim no longer matches latent dim");
    }

    #[test]
    fn parallel_split_is_bitwise_identical() {
        let c = UrkConfig {
            sampler: OmegaSampler { kind: OmegaKind::StandardNormal { dim: 3, scale: 1.0 }, seed: 12 },
            network: KernelNetwork {
                input_dim: 2,
                extractor: vec![
                    LayerSpec { width: 4, activation: Activation::Tanh },
                    LayerSpec { width: 3, activation: Activation::Identity },
                ],
                shifter: Some(ShifterSpec { hidden: 4 }),
                replicate: ReplicatePolicy::None,
                combine: Combine::RffCosSin,
            },
            m: 8,
            normalization: Normalization::SqrtMMinusOne,
        };
        let p = init_params(&c, 5, 0.5, 1.0).unwrap();
        let x = DenseMatrix::from_fn(2, 1300, |r, j| ((r * 7 + j) as f64 * 0.013).sin());
        let whole = feature_map(&c, &p, &x).unwrap();
        let om = sample_omegas(&c).unwrap();
        let cols: Vec<usize> = (600..700).collect();
        let part = raw_features(&c, &p, &om, &x.select_cols(&cols)).unwrap().scale(1.0 / c.normalizer());
        assert_eq!(part, whole.select_cols(&cols));
    }

    #[test]
    fn replicate_policies_produce_finite_features() {
        for policy in [ReplicatePolicy::MultiplyNoise { scale: 0.1 }, ReplicatePolicy::AddNoise { scale: 0.1 }] {
            let c = UrkConfig {
                sampler: OmegaSampler { kind: OmegaKind::StandardNormal { dim: 2, scale: 1.0 }, seed: 2 },
                network: KernelNetwork {
                    input_dim: 1,
                    extractor: vec![LayerSpec { width: 2, activation: Activation::Tanh }],
                    shifter: None,
                    replicate: policy,
                    combine: Combine::RffCosSin,
                },
                m: 6,
                normalization: Normalization::SqrtM,
            };
            let p = init_params(&c, 1, 1.0, 1.0).unwrap();
            let om = sample_omegas(&c).unwrap();
            assert_eq!(om.noise.as_ref().unwrap().shape(), (6, 1));
            let phi = feature_map(&c, &p, &DenseMatrix::row_vector(&[0.0, 1.0, -2.0])).unwrap();
            assert_eq!(phi.shape(), (12, 3));
            assert!(phi.is_finite());
        }
    }
}
