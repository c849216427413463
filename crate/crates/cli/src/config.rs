//! Experiment configuration files (JSON).

use std::fs;
use std::path::{Path, PathBuf};

use fedbnr::data::{SyntheticFn, TargetColumn};
use fedbnr::federated::{AblationMode, RunConfig};
use fedbnr::kernels::{
    Activation, Combine, KernelNetwork, LayerSpec, Normalization, OmegaKind, OmegaSampler, ReplicatePolicy,
    ShifterSpec, UrkConfig,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub partition: PartitionSpec,
    #[serde(default)]
    pub kernel: KernelSpec,
    #[serde(default)]
    pub run: RunSpec,
    #[serde(default)]
    pub init: InitSpec,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Relative paths resolve against the config file's directory.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// Public regression benchmarks with tuned distillation weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Benchmark {
    Skillcraft,
    Sml,
    Parkinsons,
    Bike,
    Ccpp,
}

impl Benchmark {
    /// Distillation weight tuned for 10 and 100 clients.
    pub fn kd_alpha(self, num_clients: usize) -> f64 {
        let (ten, hundred) = match self {
            Benchmark::Skillcraft => (10.0, 2.0),
            Benchmark::Sml => (1.0, 0.5),
            Benchmark::Parkinsons => (5.0, 2.0),
            Benchmark::Bike => (5.0, 0.5),
            Benchmark::Ccpp => (5.0, 5.0),
        };
        if num_clients >= 100 {
            hundred
        } else {
            ten
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    Csv {
        path: PathBuf,
        target: TargetColumn,
        /// Random subsample size, drawn with `subsample_seed`.
        #[serde(default)]
        max_rows: Option<usize>,
        #[serde(default)]
        subsample_seed: u64,
        #[serde(default)]
        benchmark: Option<Benchmark>,
    },
    #[serde(rename = "synthetic-1d")]
    Synthetic1d {
        function: SyntheticFn,
        #[serde(default = "default_range")]
        range: [f64; 2],
        n: usize,
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Power-plant style synthetic data with four features.
    CcppLike {
        n: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn default_range() -> [f64; 2] {
    [-5.0, 5.0]
}

impl DatasetSpec {
    pub fn benchmark(&self) -> Option<Benchmark> {
        match self {
            DatasetSpec::Csv { benchmark, .. } => *benchmark,
            DatasetSpec::CcppLike { .. } => Some(Benchmark::Ccpp),
            DatasetSpec::Synthetic1d { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PartitionSpec {
    CorrelationSorted {
        num_clients: usize,
    },
    /// Clients by ranges of the first (raw, unstandardised) feature.
    Range {
        boundaries: Vec<f64>,
    },
}

impl Default for PartitionSpec {
    fn default() -> Self {
        PartitionSpec::CorrelationSorted { num_clients: 10 }
    }
}

impl PartitionSpec {
    pub fn num_clients(&self) -> usize {
        match self {
            PartitionSpec::CorrelationSorted { num_clients } => *num_clients,
            PartitionSpec::Range { boundaries } => boundaries.len() + 1,
        }
    }
}

/// Kernel network minus the input dimension, which comes from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSpec {
    pub extractor: Vec<LayerSpec>,
    pub shifter: Option<ShifterSpec>,
    pub replicate: ReplicatePolicy,
    pub combine: Combine,
    pub m: usize,
    /// Scale of standard-normal omega; ignored when `omega` is given.
    pub omega_scale: f64,
    pub omega: Option<OmegaKind>,
    pub normalization: Normalization,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self {
            extractor: vec![
                LayerSpec { width: 32, activation: Activation::Tanh },
                LayerSpec { width: 5, activation: Activation::Identity },
            ],
            shifter: Some(ShifterSpec { hidden: 5 }),
            replicate: ReplicatePolicy::None,
            combine: Combine::RffCosSin,
            m: 50,
            omega_scale: 1.0,
            omega: None,
            normalization: Normalization::SqrtMMinusOne,
        }
    }
}

impl KernelSpec {
    pub fn build(&self, input_dim: usize, seed: u64) -> Result<UrkConfig, CliError> {
        let network = KernelNetwork {
            input_dim,
            extractor: self.extractor.clone(),
            shifter: self.shifter.clone(),
            replicate: self.replicate.clone(),
            combine: self.combine.clone(),
        };
        let kind = self
            .omega
            .clone()
            .unwrap_or(OmegaKind::StandardNormal { dim: network.omega_dim(), scale: self.omega_scale });
        let urk =
            UrkConfig { sampler: OmegaSampler { kind, seed }, network, m: self.m, normalization: self.normalization };
        urk.validate()?;
        Ok(urk)
    }
}

/// Protocol settings; unset fields take the library defaults, and an unset
/// `kd_alpha` follows the benchmark table when the dataset names one.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    #[serde(default)]
    pub mode: Option<AblationMode>,
    #[serde(default)]
    pub local_epochs: Option<usize>,
    #[serde(default)]
    pub max_rounds: Option<usize>,
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default)]
    pub kd_lr: Option<f64>,
    #[serde(default)]
    pub kd_epochs: Option<usize>,
    #[serde(default)]
    pub kd_alpha: Option<f64>,
    #[serde(default)]
    pub patience: Option<usize>,
    #[serde(default)]
    pub weighted_fedavg: Option<bool>,
}

impl RunSpec {
    pub fn resolve(&self, benchmark: Option<Benchmark>, num_clients: usize) -> RunConfig {
        let d = RunConfig::default();
        RunConfig {
            mode: self.mode.unwrap_or(d.mode),
            local_epochs: self.local_epochs.unwrap_or(d.local_epochs),
            max_rounds: self.max_rounds.unwrap_or(d.max_rounds),
            lr: self.lr.unwrap_or(d.lr),
            kd_lr: self.kd_lr.unwrap_or(d.kd_lr),
            kd_epochs: self.kd_epochs.unwrap_or(d.kd_epochs),
            kd_alpha: self.kd_alpha.or(benchmark.map(|b| b.kd_alpha(num_clients))).unwrap_or(d.kd_alpha),
            patience: self.patience.unwrap_or(d.patience),
            weighted_fedavg: self.weighted_fedavg.unwrap_or(d.weighted_fedavg),
        }
    }
}

/// Initial noise and prior scales, in standardised target units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitSpec {
    pub sigma: f64,
    pub lambda: f64,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self { sigma: 0.5, lambda: 1.0 }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |path: &str, message: String| Err(CliError::Config { path: path.into(), message });
        if self.seeds.is_empty() {
            return invalid("seeds", "at least one seed is required".into());
        }
        if self.partition.num_clients() == 0 {
            return invalid("partition.num_clients", "at least one client is required".into());
        }
        if self.kernel.m < 2 {
            return invalid("kernel.m", format!("must be >= 2, got {}", self.kernel.m));
        }
        if !(self.init.sigma > 0.0 && self.init.lambda > 0.0) {
            return invalid("init", "sigma and lambda must be positive".into());
        }
        let run = self.run.resolve(self.dataset.benchmark(), self.partition.num_clients());
        run.validate().map_err(|e| CliError::Config { path: "run".into(), message: e.to_string() })
    }

    /// SHA-256 of the canonical JSON form (sorted keys, defaults filled in).
    /// The output directory does not take part.
    pub fn hash(&self) -> String {
        let stripped = Self { output_dir: None, ..self.clone() };
        let value = serde_json::to_value(&stripped).expect("config serialises");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: ExperimentConfig = serde_path_to_error::deserialize(de)
        .map_err(|e| CliError::Config { path: e.path().to_string(), message: e.inner().to_string() })?;
    config.validate()?;
    Ok(config)
}

/// Reads a config and resolves relative paths against its directory.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Read { path: path.to_path_buf(), source })?;
    let mut config = parse_config(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    if let DatasetSpec::Csv { path: p, .. } = &mut config.dataset {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    if let Some(out) = &mut config.output_dir {
        if out.is_relative() {
            *out = base.join(&*out);
        }
    }
    Ok(config)
}
