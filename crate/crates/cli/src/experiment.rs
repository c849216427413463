//! Multi-seed experiment runs and their result files.
//!
//! Output layout under the output directory:
//! - `records/<mode>_seed<seed>.json`: one [`ExperimentRecord`] per run;
//! - `summary.csv`: mean and standard error over seeds, one row per mode;
//! - `timings.csv`: wall-clock seconds per run, kept apart from the records
//!   so that repeated runs produce byte-identical JSON.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fedbnr::data::{
    ccpp_like, correlation_sorted_partition, load_csv, range_partition, split_811, synthetic_1d, Dataset, Standardizer,
};
use fedbnr::federated::{run_fedbnr, AblationMode, CommStats, Phase1, RoundLog, RunConfig, RunData};
use fedbnr::kernels::{init_params, sample_omegas, OmegaSamples, UrkConfig};
use fedbnr::metrics;
use fedbnr::params::ParamVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetSpec, ExperimentConfig, PartitionSpec};
use crate::CliError;

/// Share of the validation split handed to the server as distillation data.
pub const KD_SHARE: f64 = 0.8;

pub fn load_dataset(spec: &DatasetSpec) -> Result<Dataset, CliError> {
    Ok(match spec {
        DatasetSpec::Csv { path, target, max_rows, subsample_seed, .. } => {
            let ds = load_csv(path, target)?.dataset;
            match max_rows {
                Some(k) if *k < ds.len() => {
                    let mut idx: Vec<usize> = (0..ds.len()).collect();
                    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(*subsample_seed));
                    idx.truncate(*k);
                    idx.sort_unstable();
                    ds.subset(&idx)
                }
                _ => ds,
            }
        }
        DatasetSpec::Synthetic1d { function, range, n, noise, seed } => {
            synthetic_1d(*function, (range[0], range[1]), *n, *noise, *seed)?
        }
        DatasetSpec::CcppLike { n, seed } => ccpp_like(*n, *seed)?,
    })
}

/// Standardised inputs of one run.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub urk: UrkConfig,
    pub omegas: OmegaSamples,
    pub init: ParamVector,
    pub run: RunConfig,
    pub clients: Vec<Dataset>,
    pub validation: Dataset,
    pub test: Dataset,
    pub kd: Option<Dataset>,
    pub standardizer: Standardizer,
}

/// Splits, partitions and standardises the data for one seed and mode.
///
/// The seed drives the 8:1:1 split, the chunk pairing, the omega samples
/// and the network initialisation.
pub fn prepare(config: &ExperimentConfig, data: &Dataset, seed: u64, mode: AblationMode) -> Result<Prepared, CliError> {
    let split = split_811(data.len(), seed)?;
    let train_raw = data.subset(&split.train);
    let plan = match &config.partition {
        PartitionSpec::CorrelationSorted { num_clients } => {
            correlation_sorted_partition(&train_raw, *num_clients, seed)?
        }
        PartitionSpec::Range { boundaries } => range_partition(&train_raw, boundaries)?,
    };
    let standardizer = Standardizer::fit(&train_raw)?;
    let train = standardizer.transform(&train_raw);
    let clients = plan.clients.iter().map(|idx| train.subset(idx)).collect();
    let mut validation = standardizer.transform(&data.subset(&split.valid));
    let test = standardizer.transform(&data.subset(&split.test));

    let kd = if mode.phase1 == Phase1::Kd {
        let cut = ((validation.len() as f64) * KD_SHARE).round() as usize;
        let cut = cut.clamp(1, validation.len().saturating_sub(1));
        let idx: Vec<usize> = (0..validation.len()).collect();
        let kd = validation.subset(&idx[..cut]);
        validation = validation.subset(&idx[cut..]);
        Some(kd)
    } else {
        None
    };

    let urk = config.kernel.build(data.num_features(), seed)?;
    let omegas = sample_omegas(&urk)?;
    let init = init_params(&urk, seed, config.init.sigma, config.init.lambda)?;
    let mut run = config.run.resolve(config.dataset.benchmark(), config.partition.num_clients());
    run.mode = mode;
    Ok(Prepared { urk, omegas, init, run, clients, validation, test, kd, standardizer })
}

/// Test-set metrics in raw target units, averaged over the fitted models.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestMetrics {
    pub rmse: f64,
    pub ece: f64,
    pub mce: f64,
    pub brier: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    pub mode: AblationMode,
    pub run: RunConfig,
    pub client_sizes: Vec<usize>,
    pub n_validation: usize,
    pub n_test: usize,
    pub n_kd: usize,
    pub best_round: usize,
    /// Per-round RMSE in raw target units.
    pub rounds: Vec<RoundLog>,
    pub test: TestMetrics,
    pub comm: CommStats,
}

/// Runs one (seed, mode) cell and scores it on the test split.
pub fn run_seed(
    config: &ExperimentConfig,
    config_hash: &str,
    data: &Dataset,
    seed: u64,
    mode: AblationMode,
) -> Result<ExperimentRecord, CliError> {
    let context = |e| CliError::Run { context: format!("{} (mode {mode}, seed {seed})", config.name), source: e };
    let p = prepare(config, data, seed, mode)?;
    let outcome = run_fedbnr(
        &p.urk,
        &p.run,
        &p.omegas,
        &p.init,
        RunData { clients: &p.clients, validation: &p.validation, test: Some(&p.test), kd: p.kd.as_ref() },
    )
    .map_err(context)?;

    let scale = p.standardizer.y_std;
    let raw_targets = p.standardizer.inverse_targets(&p.test.y);
    let levels = metrics::default_levels();
    let preds = outcome.predict_all(&p.urk, &p.omegas, &p.test.x).map_err(context)?;
    let mut sums = [0.0; 4];
    for pred in &preds {
        let pred = pred.rescale(p.standardizer.y_mean, scale);
        let curve = metrics::calibration_curve(&pred, &raw_targets, &levels)?;
        sums[0] += metrics::rmse(&pred.mean, &raw_targets)?;
        sums[1] += metrics::ece(&curve);
        sums[2] += metrics::mce(&curve);
        sums[3] += metrics::brier(&curve);
    }
    let k = preds.len() as f64;
    let test = TestMetrics { rmse: sums[0] / k, ece: sums[1] / k, mce: sums[2] / k, brier: sums[3] / k };
    let rounds = outcome
        .rounds
        .iter()
        .map(|r| RoundLog {
            round: r.round,
            validation_rmse: r.validation_rmse * scale,
            test_rmse: r.test_rmse.map(|t| t * scale),
        })
        .collect();

    Ok(ExperimentRecord {
        name: config.name.clone(),
        config_hash: config_hash.to_string(),
        seed,
        mode,
        run: p.run,
        client_sizes: p.clients.iter().map(Dataset::len).collect(),
        n_validation: p.validation.len(),
        n_test: p.test.len(),
        n_kd: p.kd.as_ref().map_or(0, Dataset::len),
        best_round: outcome.best_round,
        rounds,
        test,
        comm: outcome.comm,
    })
}

/// Mean and standard error of each test metric over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub name: String,
    pub mode: String,
    pub num_seeds: usize,
    pub rmse_mean: f64,
    pub rmse_sem: f64,
    pub ece_mean: f64,
    pub ece_sem: f64,
    pub mce_mean: f64,
    pub mce_sem: f64,
    pub brier_mean: f64,
    pub brier_sem: f64,
}

pub fn summarize(name: &str, mode: AblationMode, records: &[&ExperimentRecord]) -> Result<SummaryRow, CliError> {
    let stat = |f: fn(&TestMetrics) -> f64| metrics::mean_sem(&records.iter().map(|r| f(&r.test)).collect::<Vec<_>>());
    let (rmse_mean, rmse_sem) = stat(|t| t.rmse)?;
    let (ece_mean, ece_sem) = stat(|t| t.ece)?;
    let (mce_mean, mce_sem) = stat(|t| t.mce)?;
    let (brier_mean, brier_sem) = stat(|t| t.brier)?;
    Ok(SummaryRow {
        name: name.to_string(),
        mode: mode.to_string(),
        num_seeds: records.len(),
        rmse_mean,
        rmse_sem,
        ece_mean,
        ece_sem,
        mce_mean,
        mce_sem,
        brier_mean,
        brier_sem,
    })
}

fn mode_slug(mode: AblationMode) -> String {
    mode.to_string().replace('+', "-")
}

pub fn record_path(out_dir: &Path, mode: AblationMode, seed: u64) -> PathBuf {
    out_dir.join("records").join(format!("{}_seed{seed}.json", mode_slug(mode)))
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub records: Vec<ExperimentRecord>,
    pub summary: Vec<SummaryRow>,
    pub out_dir: PathBuf,
}

/// Runs every seed (and every ablation cell when `sweep` is set) and writes
/// the result files. Independent runs execute in parallel.
pub fn cmd_run(config: &ExperimentConfig, sweep: bool, out_dir: &Path) -> Result<RunReport, CliError> {
    let hash = config.hash();
    let data = load_dataset(&config.dataset)?;
    let modes: Vec<AblationMode> =
        if sweep { AblationMode::all().to_vec() } else { vec![config.run.mode.unwrap_or(RunConfig::default().mode)] };
    let jobs: Vec<(AblationMode, u64)> =
        modes.iter().flat_map(|&m| config.seeds.iter().map(move |&s| (m, s))).collect();
    let results: Vec<(ExperimentRecord, f64)> = jobs
        .par_iter()
        .map(|&(mode, seed)| {
            let start = Instant::now();
            let record = run_seed(config, &hash, &data, seed, mode)?;
            Ok((record, start.elapsed().as_secs_f64()))
        })
        .collect::<Result<_, CliError>>()?;

    fs::create_dir_all(out_dir.join("records"))?;
    let mut timings = csv::Writer::from_path(out_dir.join("timings.csv"))?;
    timings.write_record(["mode", "seed", "wall_seconds"])?;
    for (record, secs) in &results {
        let mut text = serde_json::to_string_pretty(record)?;
        text.push('\n');
        fs::write(record_path(out_dir, record.mode, record.seed), text)?;
        timings.write_record([record.mode.to_string(), record.seed.to_string(), format!("{secs:.3}")])?;
    }
    timings.flush()?;

    let records: Vec<ExperimentRecord> = results.into_iter().map(|(r, _)| r).collect();
    let summary = modes
        .iter()
        .map(|&mode| {
            let of_mode: Vec<&ExperimentRecord> = records.iter().filter(|r| r.mode == mode).collect();
            summarize(&config.name, mode, &of_mode)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut writer = csv::Writer::from_path(out_dir.join("summary.csv"))?;
    for row in &summary {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(RunReport { records, summary, out_dir: out_dir.to_path_buf() })
}
