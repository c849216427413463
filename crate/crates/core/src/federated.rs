//! Two-phase federated training of a random-feature Bayesian regressor.
//!
//! Phase 1 learns the kernel network: every round, clients ascend their
//! local log marginal likelihood starting from the broadcast model, and the
//! server aggregates the results by averaging or by distillation on a
//! held-out set. Phase 2 fits the last layer exactly: clients send only
//! `D x D` scatter matrices and `D`-vectors, and the server assembles the
//! same posterior a centralised fit on the pooled data would produce.
//!
//! All messages between the in-process server and clients travel through
//! [`Message`] encoding, so the byte counts in [`CommStats`] are real.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{evaluate, evaluate_with_gradient, BoundParams, Tape, Var};
use crate::blr::{self, BlrPosterior, PredictiveDistribution};
use crate::data::Dataset;
use crate::error::{FedError, Result};
use crate::kernels::{self, OmegaSamples, UrkConfig};
use crate::linalg::{self, CholeskyFactor, DenseMatrix};
use crate::messages::Message;
use crate::metrics;
use crate::params::{ParamVector, LOG_LAMBDA, LOG_SIGMA};

/// Phase-1 aggregation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase1 {
    /// No aggregation: each client keeps training its own kernel.
    Local,
    /// Parameter averaging.
    Avg,
    /// Knowledge distillation on a server-held dataset.
    Kd,
}

/// Phase-2 last-layer fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase2 {
    /// Each client fits on its own data only.
    Local,
    /// Exact fit over every client's data.
    Global,
}

/// One cell of the `{local, avg, kd} x {local, global}` ablation grid,
/// written `phase1+phase2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AblationMode {
    pub phase1: Phase1,
    pub phase2: Phase2,
}

impl AblationMode {
    pub const FEDBNR: Self = Self { phase1: Phase1::Avg, phase2: Phase2::Global };
    pub const FEDBNR_KD: Self = Self { phase1: Phase1::Kd, phase2: Phase2::Global };
    pub const LOCAL_LOCAL: Self = Self { phase1: Phase1::Local, phase2: Phase2::Local };
    pub const LOCAL_GLOBAL: Self = Self { phase1: Phase1::Local, phase2: Phase2::Global };

    pub fn all() -> [Self; 6] {
        let mut out = [Self::FEDBNR; 6];
        let mut i = 0;
        for p1 in [Phase1::Local, Phase1::Avg, Phase1::Kd] {
            for p2 in [Phase2::Local, Phase2::Global] {
                out[i] = Self { phase1: p1, phase2: p2 };
                i += 1;
            }
        }
        out
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p1 = match self.phase1 {
            Phase1::Local => "local",
            Phase1::Avg => "avg",
            Phase1::Kd => "kd",
        };
        let p2 = match self.phase2 {
            Phase2::Local => "local",
            Phase2::Global => "global",
        };
        write!(f, "{p1}+{p2}")
    }
}

impl FromStr for AblationMode {
    type Err = FedError;

    fn from_str(s: &str) -> Result<Self> {
        let mode = match s.trim() {
            "fedbnr" => return Ok(Self::FEDBNR),
            "fedbnr-kd" => return Ok(Self::FEDBNR_KD),
            m => m,
        };
        let (a, b) = mode.split_once('+').ok_or_else(|| FedError::UnknownMode(s.into()))?;
        let phase1 = match a {
            "local" => Phase1::Local,
            "avg" => Phase1::Avg,
            "kd" => Phase1::Kd,
            _ => return Err(FedError::UnknownMode(s.into())),
        };
        let phase2 = match b {
            "local" => Phase2::Local,
            "global" => Phase2::Global,
            _ => return Err(FedError::UnknownMode(s.into())),
        };
        Ok(Self { phase1, phase2 })
    }
}

impl TryFrom<String> for AblationMode {
    type Error = FedError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AblationMode> for String {
    fn from(m: AblationMode) -> Self {
        m.to_string()
    }
}

/// Parses a mode name (`avg+global`, `local+local`, ..., or the aliases
/// `fedbnr` and `fedbnr-kd`).
pub fn ablation_select(mode: &str) -> Result<AblationMode> {
    mode.parse()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: AblationMode,
    pub local_epochs: usize,
    pub max_rounds: usize,
    /// Step size of local gradient ascent.
    pub lr: f64,
    /// Step size of server-side distillation.
    pub kd_lr: f64,
    pub kd_epochs: usize,
    pub kd_alpha: f64,
    pub patience: usize,
    /// Weight clients by dataset size when averaging.
    pub weighted_fedavg: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: AblationMode::FEDBNR,
            local_epochs: 50,
            max_rounds: 100,
            lr: 1e-3,
            kd_lr: 1e-3,
            kd_epochs: 50,
            kd_alpha: 1.0,
            patience: 5,
            weighted_fedavg: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(FedError::InvalidConfig("patience must be >= 1".into()));
        }
        if !(self.kd_alpha >= 0.0) {
            return Err(FedError::InvalidConfig(format!("kd_alpha must be >= 0, got {}", self.kd_alpha)));
        }
        for (name, v) in [("lr", self.lr), ("kd_lr", self.kd_lr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(FedError::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// A client: private data plus its current kernel parameters.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub data: Dataset,
    pub params: ParamVector,
}

/// Server-side state between aggregation barriers.
#[derive(Clone, Debug)]
pub struct ServerState {
    pub global: ParamVector,
    /// Shared randomness, fixed for the lifetime of a run.
    pub omegas: OmegaSamples,
    pub kd: Option<Dataset>,
    pub mode: AblationMode,
    pub round: usize,
}

impl ServerState {
    pub fn new(global: ParamVector, omegas: OmegaSamples, kd: Option<Dataset>, mode: AblationMode) -> Result<Self> {
        if mode.phase1 == Phase1::Kd && kd.as_ref().is_none_or(Dataset::is_empty) {
            return Err(FedError::NoKdData);
        }
        Ok(Self { global, omegas, kd, mode, round: 0 })
    }
}

/// Bytes and message counts that crossed the simulated network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommStats {
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
    pub messages: u64,
}

impl CommStats {
    fn up(&mut self, bytes: &[u8]) {
        self.uplink_bytes += bytes.len() as u64;
        self.messages += 1;
    }

    fn down(&mut self, bytes: &[u8], recipients: usize) {
        self.downlink_bytes += (bytes.len() * recipients) as u64;
        self.messages += recipients as u64;
    }
}

fn check_data(data: &Dataset, urk: &UrkConfig) -> Result<()> {
    if data.num_features() != urk.network.input_dim {
        return Err(FedError::ShapeMismatch(format!(
            "data has {} features, kernel expects {}",
            data.num_features(),
            urk.network.input_dim
        )));
    }
    Ok(())
}

/// Records the local log marginal likelihood of `data` on a tape.
pub fn lml_on_tape(
    tape: &mut Tape,
    bound: &BoundParams,
    urk: &UrkConfig,
    omegas: &OmegaSamples,
    data: &Dataset,
) -> Result<Var> {
    let phi = kernels::features_on_tape(tape, urk, bound, omegas, &data.x)?;
    blr::log_marginal_on_tape(tape, phi, &data.y, bound.get(LOG_SIGMA)?, bound.get(LOG_LAMBDA)?)
}

pub fn local_lml(urk: &UrkConfig, omegas: &OmegaSamples, params: &ParamVector, data: &Dataset) -> Result<f64> {
    evaluate(params, |t: &mut Tape, b: &BoundParams| lml_on_tape(t, b, urk, omegas, data))
}

/// Failures that only arise once the iterate has blown up.
fn divergence(err: FedError, context: &str) -> FedError {
    match err {
        FedError::NotPositiveDefinite { .. } | FedError::NotSymmetric(_) | FedError::NonFinite(_) => {
            FedError::NonFiniteLoss(format!("{context}: {err}"))
        }
        other => other,
    }
}

/// Full-batch gradient ascent on the client's log marginal likelihood,
/// starting from the broadcast parameters.
pub fn local_update(
    urk: &UrkConfig,
    omegas: &OmegaSamples,
    data: &Dataset,
    start: &ParamVector,
    epochs: usize,
    lr: f64,
) -> Result<ParamVector> {
    check_data(data, urk)?;
    let mut p = start.clone();
    let loss = |t: &mut Tape, b: &BoundParams| lml_on_tape(t, b, urk, omegas, data);
    for epoch in 0..epochs {
        let ctx = format!("local epoch {epoch}");
        let (value, grad) = evaluate_with_gradient(&p, loss).map_err(|e| divergence(e, &ctx))?;
        if !value.is_finite() || !grad.is_finite() {
            return Err(FedError::NonFiniteLoss(ctx));
        }
        p.add_scaled(lr, &grad)?;
    }
    let (sigma, lambda) = (p.sigma()?, p.lambda()?);
    if !p.is_finite() || !(sigma > 0.0 && sigma.is_finite() && lambda > 0.0 && lambda.is_finite()) {
        return Err(FedError::NonFiniteLoss(format!(
            "parameters after local update (sigma = {sigma}, lambda = {lambda})"
        )));
    }
    Ok(p)
}

/// Mean of client parameters (including `log sigma`, `log lambda`), or the
/// weighted mean when `weights` is given. Written as `first + mean of
/// differences` so identical inputs reproduce the input bit for bit.
pub fn fedavg_aggregate(updates: &[ParamVector], weights: Option<&[f64]>) -> Result<ParamVector> {
    let first = updates.first().ok_or(FedError::EmptyInput)?;
    for u in &updates[1..] {
        first.ensure_same_layout(u)?;
    }
    let w: Vec<f64> = match weights {
        Some(w) => {
            if w.len() != updates.len() || w.iter().any(|v| !(*v >= 0.0)) {
                return Err(FedError::InvalidConfig("averaging weights must be non-negative, one per client".into()));
            }
            let total: f64 = w.iter().sum();
            if !(total > 0.0) {
                return Err(FedError::InvalidConfig("averaging weights sum to zero".into()));
            }
            w.iter().map(|v| v / total).collect()
        }
        None => vec![1.0 / updates.len() as f64; updates.len()],
    };
    let mut out = first.clone();
    let base = first.values();
    let mut acc = vec![0.0; base.len()];
    for (u, wi) in updates.iter().zip(&w).skip(1) {
        for ((a, v), b) in acc.iter_mut().zip(u.values()).zip(base) {
            *a += wi * (v - b);
        }
    }
    for (o, a) in out.values_mut().iter_mut().zip(&acc) {
        *o += a;
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct KdOutcome {
    pub params: ParamVector,
    /// Distillation loss before the first and after every accepted step.
    pub losses: Vec<f64>,
}

/// Server-side distillation: gradient descent from `global` on
/// `-LML(kd) + alpha * mean((K_global - mean_c K_c)^2)` over the
/// distillation inputs. The step is halved whenever it would increase the
/// loss, so the recorded losses never increase.
#[allow(clippy::too_many_arguments)]
pub fn kd_aggregate(
    urk: &UrkConfig,
    omegas: &OmegaSamples,
    global: &ParamVector,
    updates: &[ParamVector],
    kd: &Dataset,
    alpha: f64,
    epochs: usize,
    lr: f64,
) -> Result<KdOutcome> {
    if kd.is_empty() {
        return Err(FedError::NoKdData);
    }
    if !(alpha >= 0.0) {
        return Err(FedError::InvalidConfig(format!("kd alpha must be >= 0, got {alpha}")));
    }
    check_data(kd, urk)?;
    if updates.is_empty() {
        return Err(FedError::EmptyInput);
    }
    let mut target = DenseMatrix::zeros(kd.len(), kd.len());
    for u in updates {
        global.ensure_same_layout(u)?;
        let phi = kernels::feature_map_with(urk, u, omegas, &kd.x)?;
        target.add_assign(&phi.transpose_matmul(&phi)?)?;
    }
    let target = target.scale(1.0 / updates.len() as f64);
    let n2 = (kd.len() * kd.len()) as f64;
    let loss = |t: &mut Tape, b: &BoundParams| -> Result<Var> {
        let phi = kernels::features_on_tape(t, urk, b, omegas, &kd.x)?;
        let lml = blr::log_marginal_on_tape(t, phi, &kd.y, b.get(LOG_SIGMA)?, b.get(LOG_LAMBDA)?)?;
        let phit = t.transpose(phi);
        let k = t.matmul(phit, phi)?;
        let kbar = t.leaf(target.clone());
        let diff = t.sub(k, kbar)?;
        let sq = t.mul(diff, diff)?;
        let sse = t.sum(sq);
        let mse = t.scale(alpha / n2, sse);
        let neg = t.scale(-1.0, lml);
        t.add(mse, neg)
    };

    let mut p = global.clone();
    let (mut value, mut grad) = evaluate_with_gradient(&p, loss).map_err(|e| divergence(e, "distillation start"))?;
    if !value.is_finite() {
        return Err(FedError::NonFiniteLoss("distillation start".into()));
    }
    let mut losses = vec![value];
    let mut step = lr;
    'epochs: for _ in 0..epochs {
        if step == 0.0 {
            break;
        }
        loop {
            let mut cand = p.clone();
            cand.add_scaled(-step, &grad)?;
            if let Ok((v, g)) = evaluate_with_gradient(&cand, loss) {
                if v.is_finite() && g.is_finite() && v <= value {
                    p = cand;
                    value = v;
                    grad = g;
                    losses.push(v);
                    break;
                }
            }
            step *= 0.5;
            if step < lr * 1e-12 {
                break 'epochs;
            }
        }
    }
    Ok(KdOutcome { params: p, losses })
}

/// Client side of phase 2: `Phi_c Phi_c^T`.
pub fn phase2_scatter(
    urk: &UrkConfig,
    omegas: &OmegaSamples,
    params: &ParamVector,
    x: &DenseMatrix,
) -> Result<DenseMatrix> {
    Ok(kernels::feature_map_with(urk, params, omegas, x)?.gram_rows())
}

/// Server side of phase 2: `A = sigma^-2 sum_c S_c + lambda^-2 I` and its
/// Cholesky factor, which is what gets broadcast.
pub fn phase2_assemble(
    scatters: &[DenseMatrix],
    dim: usize,
    sigma: f64,
    lambda: f64,
) -> Result<(DenseMatrix, CholeskyFactor)> {
    let mut total = DenseMatrix::zeros(dim, dim);
    for s in scatters {
        total.add_assign(s)?;
    }
    let a = blr::precision_from_scatter(&total, sigma, lambda)?;
    let l = linalg::cholesky(&a)?;
    Ok((a, l))
}

/// Client side of the weight step: `sigma^-2 A^-1 Phi_c y_c`.
pub fn phase2_client_weights(
    urk: &UrkConfig,
    omegas: &OmegaSamples,
    params: &ParamVector,
    data: &Dataset,
    precision: &CholeskyFactor,
    sigma: f64,
) -> Result<Vec<f64>> {
    let phi = kernels::feature_map_with(urk, params, omegas, &data.x)?;
    weights_from_features(&phi, &data.y, precision, sigma)
}

fn weights_from_features(phi: &DenseMatrix, y: &[f64], precision: &CholeskyFactor, sigma: f64) -> Result<Vec<f64>> {
    let b = phi.matmul(&DenseMatrix::column(y))?;
    let w = linalg::solve_psd(precision, &b)?;
    Ok(w.into_vec().into_iter().map(|v| v / (sigma * sigma)).collect())
}

/// Runs phase 2 for one kernel over a set of clients through encoded
/// messages and returns the resulting posterior.
pub fn phase2_protocol(
    urk: &UrkConfig,
    omegas: &OmegaSamples,
    params: &ParamVector,
    clients: &[&Dataset],
    comm: &mut CommStats,
) -> Result<BlrPosterior> {
    let sigma = params.sigma()?;
    let lambda = params.lambda()?;
    let dim = urk.feature_dim();

    let broadcast = Message::ModelBroadcast { params: params.values().to_vec(), omegas: omegas.to_matrix() }.encode();
    comm.down(&broadcast, clients.len());
    let (client_params, client_omegas) = match Message::decode(&broadcast)? {
        Message::ModelBroadcast { params: values, omegas: om } => (
            ParamVector::from_values(params.layout().clone(), values)?,
            OmegaSamples::from_matrix(&om, urk.network.omega_dim())?,
        ),
        _ => unreachable!("decoded a model broadcast"),
    };

    // Each client keeps its features locally and ships only the scatter.
    let phis: Vec<DenseMatrix> = clients
        .par_iter()
        .map(|d| {
            check_data(d, urk)?;
            kernels::feature_map_with(urk, &client_params, &client_omegas, &d.x)
        })
        .collect::<Result<_>>()?;
    let mut scatters = Vec::with_capacity(clients.len());
    for phi in &phis {
        let bytes = Message::ScatterMatrix(phi.gram_rows()).encode();
        comm.up(&bytes);
        match Message::decode(&bytes)? {
            Message::ScatterMatrix(s) => scatters.push(s),
            _ => unreachable!("decoded a scatter matrix"),
        }
    }

    let (a, chol) = phase2_assemble(&scatters, dim, sigma, lambda)?;
    let bytes = Message::PrecisionBroadcast(chol.lower().clone()).encode();
    comm.down(&bytes, clients.len());
    let client_chol = match Message::decode(&bytes)? {
        Message::PrecisionBroadcast(l) => CholeskyFactor::from_lower(l)?,
        _ => unreachable!("decoded a precision broadcast"),
    };

    let parts: Vec<Vec<f64>> = phis
        .par_iter()
        .zip(clients.par_iter())
        .map(|(phi, d)| weights_from_features(phi, &d.y, &client_chol, sigma))
        .collect::<Result<_>>()?;
    let mut w_bar = vec![0.0; dim];
    for part in parts {
        let bytes = Message::IntermediateWeights(part).encode();
        comm.up(&bytes);
        let Message::IntermediateWeights(v) = Message::decode(&bytes)? else {
            unreachable!("decoded intermediate weights")
        };
        for (w, x) in w_bar.iter_mut().zip(&v) {
            *w += x;
        }
    }
    let bytes = Message::GlobalWeights(w_bar.clone()).encode();
    comm.down(&bytes, clients.len());
    BlrPosterior::from_parts(a, chol, w_bar, sigma, lambda)
}

/// A kernel plus an exact last-layer posterior.
#[derive(Clone, Debug)]
pub struct FittedModel {
    pub params: ParamVector,
    pub posterior: BlrPosterior,
}

impl FittedModel {
    pub fn predict(&self, urk: &UrkConfig, omegas: &OmegaSamples, x: &DenseMatrix) -> Result<PredictiveDistribution> {
        let phi = kernels::feature_map_with(urk, &self.params, omegas, x)?;
        blr::blr_predict(&self.posterior, &phi)
    }

    pub fn rmse(&self, urk: &UrkConfig, omegas: &OmegaSamples, data: &Dataset) -> Result<f64> {
        metrics::rmse(&self.predict(urk, omegas, &data.x)?.mean, &data.y)
    }
}

/// Metrics recorded after each aggregation round (round 0 is the
/// initialisation).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub validation_rmse: f64,
    pub test_rmse: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub mode: AblationMode,
    /// One model for shared-kernel global modes, otherwise one per client.
    pub models: Vec<FittedModel>,
    pub global: ParamVector,
    pub client_params: Vec<ParamVector>,
    pub rounds: Vec<RoundLog>,
    /// Round whose parameters were kept.
    pub best_round: usize,
    pub comm: CommStats,
}

impl RunOutcome {
    pub fn predict_all(
        &self,
        urk: &UrkConfig,
        omegas: &OmegaSamples,
        x: &DenseMatrix,
    ) -> Result<Vec<PredictiveDistribution>> {
        self.models.par_iter().map(|m| m.predict(urk, omegas, x)).collect()
    }

    /// Mean RMSE over the fitted models.
    pub fn mean_rmse(&self, urk: &UrkConfig, omegas: &OmegaSamples, data: &Dataset) -> Result<f64> {
        mean_rmse(&self.models, urk, omegas, data)
    }
}

fn mean_rmse(models: &[FittedModel], urk: &UrkConfig, omegas: &OmegaSamples, data: &Dataset) -> Result<f64> {
    let r: Vec<f64> = models.par_iter().map(|m| m.rmse(urk, omegas, data)).collect::<Result<_>>()?;
    Ok(r.iter().sum::<f64>() / r.len() as f64)
}

/// Inputs of a run besides the configs.
#[derive(Clone, Copy, Debug)]
pub struct RunData<'a> {
    pub clients: &'a [Dataset],
    pub validation: &'a Dataset,
    pub test: Option<&'a Dataset>,
    /// Distillation set, required for `kd+*` modes.
    pub kd: Option<&'a Dataset>,
}

/// Fits the phase-2 models for the current kernels under the given mode.
pub fn fit_models(
    urk: &UrkConfig,
    omegas: &OmegaSamples,
    mode: AblationMode,
    global: &ParamVector,
    client_params: &[ParamVector],
    clients: &[Dataset],
    comm: &mut CommStats,
) -> Result<Vec<FittedModel>> {
    let all: Vec<&Dataset> = clients.iter().collect();
    let kernel_of = |c: usize| if mode.phase1 == Phase1::Local { &client_params[c] } else { global };
    match (mode.phase1, mode.phase2) {
        (Phase1::Avg | Phase1::Kd, Phase2::Global) => {
            let posterior = phase2_protocol(urk, omegas, global, &all, comm)?;
            Ok(vec![FittedModel { params: global.clone(), posterior }])
        }
        (Phase1::Local, Phase2::Global) => (0..clients.len())
            .map(|c| {
                let params = client_params[c].clone();
                let posterior = phase2_protocol(urk, omegas, &params, &all, comm)?;
                Ok(FittedModel { params, posterior })
            })
            .collect(),
        (_, Phase2::Local) => (0..clients.len())
            .map(|c| {
                let params = kernel_of(c).clone();
                let posterior = phase2_protocol(urk, omegas, &params, &[&clients[c]], comm)?;
                Ok(FittedModel { params, posterior })
            })
            .collect(),
    }
}

/// Full two-phase run with early stopping on validation RMSE.
///
/// Each round, clients start from the broadcast global parameters (or their
/// own, when phase 1 is local), run `local_epochs` ascent steps in
/// parallel, and the server aggregates. The validation RMSE of the models
/// phase 2 would produce right now is tracked; training stops after
/// `patience` rounds without improvement and the best round's parameters
/// are used for the final phase 2.
pub fn run_fedbnr(
    urk: &UrkConfig,
    run: &RunConfig,
    omegas: &OmegaSamples,
    init: &ParamVector,
    data: RunData<'_>,
) -> Result<RunOutcome> {
    run.validate()?;
    urk.validate()?;
    if data.clients.is_empty() {
        return Err(FedError::EmptyInput);
    }
    for (c, d) in data.clients.iter().enumerate() {
        if d.is_empty() {
            return Err(FedError::EmptyClient(c));
        }
        check_data(d, urk)?;
    }
    let mut server = ServerState::new(init.clone(), omegas.clone(), data.kd.cloned(), run.mode)?;
    let k = data.clients.len();
    let mut clients: Vec<ClientState> = data
        .clients
        .iter()
        .enumerate()
        .map(|(id, d)| ClientState { id, data: d.clone(), params: init.clone() })
        .collect();
    let sizes: Vec<f64> = data.clients.iter().map(|d| d.len() as f64).collect();
    let mut comm = CommStats::default();

    let evaluate_round = |global: &ParamVector, cps: &[ParamVector], comm: &mut CommStats, round: usize| {
        let models = fit_models(urk, omegas, run.mode, global, cps, data.clients, comm)?;
        let validation_rmse = mean_rmse(&models, urk, omegas, data.validation)?;
        let test_rmse = data.test.map(|t| mean_rmse(&models, urk, omegas, t)).transpose()?;
        Ok::<_, FedError>(RoundLog { round, validation_rmse, test_rmse })
    };

    let params_of = |cs: &[ClientState]| cs.iter().map(|c| c.params.clone()).collect::<Vec<_>>();
    let mut rounds = vec![evaluate_round(&server.global, &params_of(&clients), &mut comm, 0)?];
    let mut best = (0, rounds[0].validation_rmse, server.global.clone(), params_of(&clients));
    let mut stale = 0;

    for round in 1..=run.max_rounds {
        server.round = round;
        let shared = run.mode.phase1 != Phase1::Local;
        if shared {
            let bytes =
                Message::ModelBroadcast { params: server.global.values().to_vec(), omegas: server.omegas.to_matrix() }
                    .encode();
            comm.down(&bytes, k);
            let Message::ModelBroadcast { params, .. } = Message::decode(&bytes)? else {
                unreachable!("decoded a model broadcast")
            };
            let received = ParamVector::from_values(server.global.layout().clone(), params)?;
            for c in &mut clients {
                c.params = received.clone();
            }
        }

        let updates: Vec<ParamVector> = clients
            .par_iter()
            .map(|c| {
                local_update(urk, &server.omegas, &c.data, &c.params, run.local_epochs, run.lr).map_err(|e| match e {
                    FedError::NonFiniteLoss(m) => {
                        FedError::NonFiniteLoss(format!("round {round}, client {}: {m}", c.id))
                    }
                    other => other,
                })
            })
            .collect::<Result<_>>()?;

        let mut received = Vec::with_capacity(k);
        for u in &updates {
            let bytes = Message::ClientModelUpdate { params: u.values().to_vec() }.encode();
            if shared {
                comm.up(&bytes);
            }
            let Message::ClientModelUpdate { params } = Message::decode(&bytes)? else {
                unreachable!("decoded a client update")
            };
            received.push(ParamVector::from_values(u.layout().clone(), params)?);
        }

        match run.mode.phase1 {
            Phase1::Local => {
                for (c, u) in clients.iter_mut().zip(received) {
                    c.params = u;
                }
            }
            Phase1::Avg => {
                server.global = fedavg_aggregate(&received, run.weighted_fedavg.then_some(sizes.as_slice()))?;
            }
            Phase1::Kd => {
                let kd = server.kd.as_ref().ok_or(FedError::NoKdData)?;
                server.global = kd_aggregate(
                    urk,
                    &server.omegas,
                    &server.global,
                    &received,
                    kd,
                    run.kd_alpha,
                    run.kd_epochs,
                    run.kd_lr,
                )?
                .params;
            }
        }

        let log = evaluate_round(&server.global, &params_of(&clients), &mut comm, round)?;
        let improved = log.validation_rmse < best.1;
        rounds.push(log);
        if improved {
            best = (round, rounds[round].validation_rmse, server.global.clone(), params_of(&clients));
            stale = 0;
        } else {
            stale += 1;
            if stale >= run.patience {
                break;
            }
        }
    }

    let (best_round, _, global, client_params) = best;
    let models = fit_models(urk, omegas, run.mode, &global, &client_params, data.clients, &mut comm)?;
    Ok(RunOutcome { mode: run.mode, models, global, client_params, rounds, best_round, comm })
}
