//! Monte-Carlo convergence of the random-feature constructions to their
//! closed-form kernels, plus positive semi-definiteness of random networks.

use std::fmt;

use fedbnr::kernels::{
    exp_kernel_construction, fixed_params, init_params, paired_kernel_estimate, poly_kernel_construction, rff_gaussian,
    urk_kernel, Activation, ClosedForm, Combine, KernelNetwork, LayerSpec, Normalization, OmegaKind, OmegaSampler,
    ReplicatePolicy, ShifterSpec, UrkConfig,
};
use fedbnr::linalg::{symmetric_eigenvalues, DenseMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const DEFAULT_M_VALUES: [usize; 3] = [100, 10_000, 1_000_000];
pub const NUM_PAIRS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Construction {
    /// Gaussian kernel with unit lengthscale, inputs in `[-1, 1]^3`.
    Rff,
    /// `exp(|x + x'|^2 / 2)`, inputs in `[-0.5, 0.5]^2`.
    Exp,
    /// `(x^T x' + 1)^2`, inputs in `[-1, 1]^2`.
    Poly,
}

impl Construction {
    pub const ALL: [Construction; 3] = [Construction::Rff, Construction::Exp, Construction::Poly];

    fn dim(self) -> usize {
        match self {
            Construction::Rff => 3,
            Construction::Exp | Construction::Poly => 2,
        }
    }

    fn half_width(self) -> f64 {
        match self {
            Construction::Exp => 0.5,
            _ => 1.0,
        }
    }

    fn config(self, m: usize, seed: u64) -> Result<UrkConfig, CliError> {
        Ok(match self {
            Construction::Rff => rff_gaussian(1.0, 3, m, seed)?,
            Construction::Exp => exp_kernel_construction(2, m, seed)?,
            Construction::Poly => poly_kernel_construction(1.0, 2, 2, m, seed)?,
        })
    }

    fn closed_form(self) -> ClosedForm {
        match self {
            Construction::Rff => ClosedForm::Gaussian { lengthscale: 1.0 },
            Construction::Exp => ClosedForm::Exp,
            Construction::Poly => ClosedForm::Poly { constant: 1.0, degree: 2 },
        }
    }
}

impl fmt::Display for Construction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Construction::Rff => "rff",
            Construction::Exp => "exp",
            Construction::Poly => "poly",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceLine {
    pub construction: Construction,
    pub m: usize,
    pub max_abs_error: f64,
    /// Largest per-pair error measured in estimated standard errors.
    pub max_error_in_se: f64,
}

/// Estimates the kernel on `NUM_PAIRS` random input pairs.
pub fn convergence(construction: Construction, m: usize, seed: u64) -> Result<ConvergenceLine, CliError> {
    let p = construction.dim();
    let h = construction.half_width();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000);
    let mut draw = || DenseMatrix::from_fn(p, NUM_PAIRS, |_, _| rng.random_range(-h..=h));
    let x = draw();
    let x2 = draw();
    let config = construction.config(m, seed)?;
    let est = paired_kernel_estimate(&config, &fixed_params(&config)?, &x, &x2)?;
    let truth = construction.closed_form();
    let mut max_abs_error = 0.0f64;
    let mut max_error_in_se = 0.0f64;
    for j in 0..NUM_PAIRS {
        let err = (est.values[j] - truth.eval(&x.col(j), &x2.col(j))).abs();
        max_abs_error = max_abs_error.max(err);
        let se = est.std_errors[j];
        let ratio = if se > 0.0 {
            err / se
        } else if err < 1e-12 {
            0.0
        } else {
            f64::INFINITY
        };
        max_error_in_se = max_error_in_se.max(ratio);
    }
    Ok(ConvergenceLine { construction, m, max_abs_error, max_error_in_se })
}

/// A random network drawn over every combine, replicate and shifter option.
pub fn random_urk(rng: &mut impl Rng, input_dim: usize, seed: u64) -> Result<UrkConfig, CliError> {
    let layers = rng.random_range(0..=2);
    let activations = [Activation::Tanh, Activation::Relu, Activation::Identity, Activation::Sin];
    let extractor: Vec<LayerSpec> = (0..layers)
        .map(|_| LayerSpec {
            width: rng.random_range(1..=6),
            activation: activations[rng.random_range(0..activations.len())],
        })
        .collect();
    let m = rng.random_range(2..=20);
    let kind = rng.random_range(0..3);
    let (combine, shifter, replicate) = if kind == 2 {
        (Combine::ElementwisePower { constant: rng.random_range(0.0..2.0) }, None, ReplicatePolicy::None)
    } else {
        let combine = if kind == 0 {
            Combine::RffCosSin
        } else {
            let acts = [Activation::Tanh, Activation::Relu, Activation::Cos, Activation::Exp, Activation::Identity];
            Combine::InnerProduct { activation: acts[rng.random_range(0..acts.len())] }
        };
        let shifter = rng.random_bool(0.5).then(|| ShifterSpec { hidden: rng.random_range(1..=4) });
        let replicate = match rng.random_range(0..3) {
            0 => ReplicatePolicy::None,
            1 => ReplicatePolicy::MultiplyNoise { scale: rng.random_range(0.0..0.5) },
            _ => ReplicatePolicy::AddNoise { scale: rng.random_range(0.0..0.5) },
        };
        (combine, shifter, replicate)
    };
    let network = KernelNetwork { input_dim, extractor, shifter, replicate, combine };
    let dim = network.omega_dim();
    let omega = if kind == 2 {
        let raw: Vec<f64> = (0..dim).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        OmegaKind::Multinomial {
            trials: rng.random_range(1..=3),
            probabilities: raw.iter().map(|v| v / total).collect(),
        }
    } else {
        OmegaKind::StandardNormal { dim, scale: rng.random_range(0.2..1.5) }
    };
    let normalization = if rng.random_bool(0.5) { Normalization::SqrtM } else { Normalization::SqrtMMinusOne };
    let urk = UrkConfig { sampler: OmegaSampler { kind: omega, seed }, network, m, normalization };
    urk.validate()?;
    Ok(urk)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsdLine {
    pub configs: usize,
    /// Smallest `min eigenvalue / trace` over all configs.
    pub min_eig_over_trace: f64,
}

/// Gram matrices of `configs` random networks on random inputs.
pub fn psd_suite(configs: usize, seed: u64) -> Result<PsdLine, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::INFINITY;
    for i in 0..configs {
        let p = rng.random_range(1..=4);
        let urk = random_urk(&mut rng, p, seed.wrapping_add(i as u64))?;
        let params = init_params(&urk, rng.random(), 1.0, 1.0)?;
        let n = rng.random_range(2..=30);
        let x = DenseMatrix::from_fn(p, n, |_, _| rng.random_range(-1.0..=1.0));
        let k = urk_kernel(&urk, &params, &x, &x)?;
        let trace = k.trace();
        let min = symmetric_eigenvalues(&k)?.into_iter().fold(f64::INFINITY, f64::min);
        let ratio = if trace > 0.0 { min / trace } else { min };
        worst = worst.min(ratio);
    }
    Ok(PsdLine { configs, min_eig_over_trace: worst })
}

/// Largest deviation of `k(x, x)` from 1 for Gaussian random features.
pub fn rff_diagonal(seed: u64) -> Result<f64, CliError> {
    let config = rff_gaussian(1.0, 3, 1000, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DenseMatrix::from_fn(3, 50, |_, _| rng.random_range(-3.0..=3.0));
    let est = paired_kernel_estimate(&config, &fixed_params(&config)?, &x, &x)?;
    Ok(est.values.iter().fold(0.0f64, |acc, v| acc.max((v - 1.0).abs())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelCheckReport {
    pub convergence: Vec<ConvergenceLine>,
    pub psd: PsdLine,
    pub rff_diagonal_max_deviation: f64,
}

impl KernelCheckReport {
    /// Whether the maximum error shrinks with every increase of `m`.
    pub fn decreasing(&self, construction: Construction) -> bool {
        let errs: Vec<f64> =
            self.convergence.iter().filter(|l| l.construction == construction).map(|l| l.max_abs_error).collect();
        errs.windows(2).all(|w| w[1] < w[0])
    }
}

impl fmt::Display for KernelCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<6} {:>9} {:>14} {:>12}", "kernel", "m", "max_abs_err", "max_err/se")?;
        for l in &self.convergence {
            writeln!(f, "{:<6} {:>9} {:>14.6e} {:>12.3}", l.construction, l.m, l.max_abs_error, l.max_error_in_se)?;
        }
        for c in Construction::ALL {
            if self.convergence.iter().any(|l| l.construction == c) {
                writeln!(f, "{c}: error decreasing with m: {}", self.decreasing(c))?;
            }
        }
        writeln!(f, "psd: {} configs, min eig / trace = {:.3e}", self.psd.configs, self.psd.min_eig_over_trace)?;
        write!(f, "rff diagonal: max |k(x, x) - 1| = {:.1e}", self.rff_diagonal_max_deviation)
    }
}

/// Runs the convergence suite at every default `m` up to `m_max`.
pub fn cmd_kernel_check(m_max: usize, seed: u64) -> Result<KernelCheckReport, CliError> {
    let mut lines = Vec::new();
    for c in Construction::ALL {
        for &m in DEFAULT_M_VALUES.iter().filter(|&&m| m <= m_max) {
            lines.push(convergence(c, m, seed)?);
        }
    }
    Ok(KernelCheckReport {
        convergence: lines,
        psd: psd_suite(50, seed)?,
        rff_diagonal_max_deviation: rff_diagonal(seed)?,
    })
}
