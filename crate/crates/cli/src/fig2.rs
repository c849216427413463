//! Two-client synthetic study on `x sin(x)`.
//!
//! A kernel is learned once on all 200 training points and then frozen.
//! Client 1 holds the points in `[-5, 0)`, client 2 those in `[0, 5]`. The
//! federated model aggregates both clients exactly; the local baseline fits
//! each client alone. A third client then joins with a growing sample,
//! either from the same range or from `[5, 15]`, and is scored against the
//! federated model including it and against a model fitted on its data only.

use std::fs;
use std::path::Path;

use fedbnr::data::{range_partition, synthetic_1d, Dataset, Standardizer, SyntheticFn};
use fedbnr::federated::{fit_models, run_fedbnr, AblationMode, CommStats, FittedModel, RunConfig, RunData};
use fedbnr::kernels::{
    init_params, sample_omegas, Activation, Combine, KernelNetwork, LayerSpec, Normalization, OmegaKind, OmegaSampler,
    OmegaSamples, ReplicatePolicy, UrkConfig,
};
use fedbnr::linalg::DenseMatrix;
use fedbnr::metrics;
use fedbnr::params::ParamVector;
use serde::{Deserialize, Serialize};

use crate::CliError;

const Z95: f64 = 1.959_963_984_540_054;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fig2Options {
    pub seed: u64,
    pub n_train: usize,
    pub noise: f64,
    pub n_validation: usize,
    pub n_test: usize,
    pub grid_points: usize,
    pub new_client_sizes: Vec<usize>,
    pub m: usize,
    pub hidden: usize,
    pub latent: usize,
    pub run: RunConfig,
}

impl Default for Fig2Options {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train: 200,
            noise: 0.5,
            n_validation: 100,
            n_test: 1000,
            grid_points: 201,
            new_client_sizes: vec![10, 20, 50, 100, 150, 200],
            m: 50,
            hidden: 32,
            latent: 2,
            run: RunConfig {
                mode: AblationMode::FEDBNR,
                local_epochs: 50,
                max_rounds: 100,
                lr: 1e-2,
                patience: 10,
                ..RunConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub x: f64,
    pub mean: f64,
    pub lower95: f64,
    pub upper95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NewClientRow {
    pub range: String,
    pub size: usize,
    pub fedbnr_rmse: f64,
    pub local_rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fig2Summary {
    pub seed: u64,
    pub client_sizes: Vec<usize>,
    pub kernel_rounds: usize,
    pub centralized_rmse: f64,
    pub fedbnr_rmse: f64,
    /// Mean over the two per-client models.
    pub local_local_rmse: f64,
    pub sigma: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fig2Outcome {
    pub summary: Fig2Summary,
    pub grid: Vec<GridRow>,
    pub new_client: Vec<NewClientRow>,
}

fn kernel_config(opts: &Fig2Options) -> UrkConfig {
    UrkConfig {
        sampler: OmegaSampler { kind: OmegaKind::StandardNormal { dim: opts.latent, scale: 1.0 }, seed: opts.seed },
        network: KernelNetwork {
            input_dim: 1,
            extractor: vec![
                LayerSpec { width: opts.hidden, activation: Activation::Tanh },
                LayerSpec { width: opts.latent, activation: Activation::Identity },
            ],
            shifter: None,
            replicate: ReplicatePolicy::None,
            combine: Combine::RffCosSin,
        },
        m: opts.m,
        normalization: Normalization::SqrtMMinusOne,
    }
}

struct Frozen<'a> {
    urk: &'a UrkConfig,
    omegas: &'a OmegaSamples,
    params: &'a ParamVector,
    scaler: &'a Standardizer,
}

impl Frozen<'_> {
    fn fit(&self, clients: &[Dataset], mode: AblationMode) -> Result<Vec<FittedModel>, CliError> {
        let copies = vec![self.params.clone(); clients.len()];
        Ok(fit_models(self.urk, self.omegas, mode, self.params, &copies, clients, &mut CommStats::default())?)
    }

    /// Mean raw-unit test RMSE over the models.
    fn rmse(&self, models: &[FittedModel], test: &Dataset) -> Result<f64, CliError> {
        let mut total = 0.0;
        for model in models {
            total += model.rmse(self.urk, self.omegas, test)?;
        }
        Ok(total / models.len() as f64 * self.scaler.y_std)
    }
}

pub fn synthetic_fig2(opts: &Fig2Options) -> Result<Fig2Outcome, CliError> {
    let f = SyntheticFn::XSinX;
    let range = (-5.0, 5.0);
    let seed = opts.seed;
    let train_raw = synthetic_1d(f, range, opts.n_train, opts.noise, seed)?;
    let scaler = Standardizer::fit(&train_raw)?;
    let train = scaler.transform(&train_raw);
    let validation = scaler.transform(&synthetic_1d(f, range, opts.n_validation, opts.noise, seed.wrapping_add(1))?);
    let test = scaler.transform(&synthetic_1d(f, range, opts.n_test, opts.noise, seed.wrapping_add(2))?);

    let urk = kernel_config(opts);
    let omegas = sample_omegas(&urk)?;
    let init = init_params(&urk, seed, 0.5, 1.0)?;
    let central = run_fedbnr(
        &urk,
        &opts.run,
        &omegas,
        &init,
        RunData { clients: std::slice::from_ref(&train), validation: &validation, test: None, kd: None },
    )?;
    let frozen = Frozen { urk: &urk, omegas: &omegas, params: &central.global, scaler: &scaler };

    let plan = range_partition(&train_raw, &[0.0])?;
    let clients: Vec<Dataset> = plan.clients.iter().map(|idx| train.subset(idx)).collect();
    let centralized_rmse = frozen.rmse(&central.models, &test)?;
    let fed = frozen.fit(&clients, AblationMode::FEDBNR)?;
    let fedbnr_rmse = frozen.rmse(&fed, &test)?;
    let local_local_rmse = frozen.rmse(&frozen.fit(&clients, AblationMode::LOCAL_LOCAL)?, &test)?;

    let n = opts.grid_points.max(2);
    let xs: Vec<f64> = (0..n).map(|i| range.0 + (range.1 - range.0) * i as f64 / (n - 1) as f64).collect();
    let xs_std =
        DenseMatrix::row_vector(&xs.iter().map(|x| (x - scaler.x_mean[0]) / scaler.x_std[0]).collect::<Vec<_>>());
    let pred = fed[0].predict(&urk, &omegas, &xs_std)?.rescale(scaler.y_mean, scaler.y_std);
    let grid = xs
        .iter()
        .zip(pred.mean.iter().zip(pred.std_dev()))
        .map(|(&x, (&mean, sd))| GridRow { x, mean, lower95: mean - Z95 * sd, upper95: mean + Z95 * sd })
        .collect();

    let mut new_client = Vec::new();
    let largest = opts.new_client_sizes.iter().copied().max().unwrap_or(0);
    for (label, new_range, offset) in [("[-5,5]", (-5.0, 5.0), 3u64), ("[5,15]", (5.0, 15.0), 4)] {
        if largest == 0 {
            break;
        }
        let pool = scaler.transform(&synthetic_1d(f, new_range, largest, opts.noise, seed.wrapping_add(offset))?);
        for &size in &opts.new_client_sizes {
            let own = pool.subset(&(0..size).collect::<Vec<_>>());
            let mut joined = clients.clone();
            joined.push(own.clone());
            let fedbnr_rmse = frozen.rmse(&frozen.fit(&joined, AblationMode::FEDBNR)?, &test)?;
            let local_rmse = frozen.rmse(&frozen.fit(&[own], AblationMode::FEDBNR)?, &test)?;
            new_client.push(NewClientRow { range: label.to_string(), size, fedbnr_rmse, local_rmse });
        }
    }

    let summary = Fig2Summary {
        seed,
        client_sizes: clients.iter().map(Dataset::len).collect(),
        kernel_rounds: central.rounds.len() - 1,
        centralized_rmse,
        fedbnr_rmse,
        local_local_rmse,
        sigma: central.global.sigma()? * scaler.y_std,
        lambda: central.global.lambda()?,
    };
    Ok(Fig2Outcome { summary, grid, new_client })
}

/// Writes `prediction.csv`, `new_client.csv` and `summary.json`.
pub fn write_fig2(outcome: &Fig2Outcome, dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("prediction.csv"))?;
    for row in &outcome.grid {
        w.serialize(row)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("new_client.csv"))?;
    for row in &outcome.new_client {
        w.serialize(row)?;
    }
    w.flush()?;
    let mut text = serde_json::to_string_pretty(&outcome.summary)?;
    text.push('\n');
    fs::write(dir.join("summary.json"), text)?;
    Ok(())
}

/// RMSE of the prediction grid mean against the noiseless truth.
pub fn grid_truth_rmse(grid: &[GridRow]) -> Result<f64, CliError> {
    let mean: Vec<f64> = grid.iter().map(|r| r.mean).collect();
    let truth: Vec<f64> = grid.iter().map(|r| SyntheticFn::XSinX.eval(r.x)).collect();
    Ok(metrics::rmse(&mean, &truth)?)
}
