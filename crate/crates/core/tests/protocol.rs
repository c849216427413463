use fedbnr::blr::{blr_fit, blr_predict, BlrPosterior};
use fedbnr::data::Dataset;
use fedbnr::federated::{
    fedavg_aggregate, local_update, phase2_protocol, phase2_scatter, run_fedbnr, AblationMode, CommStats, Phase1,
    RunConfig, RunData,
};
use fedbnr::kernels::{
    feature_map_with, init_params, sample_omegas, Activation, Combine, KernelNetwork, LayerSpec, Normalization,
    OmegaKind, OmegaSampler, OmegaSamples, ReplicatePolicy, ShifterSpec, UrkConfig,
};
use fedbnr::linalg::DenseMatrix;
use fedbnr::messages::Message;
use fedbnr::params::ParamVector;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn network(p: usize, m: usize, seed: u64) -> UrkConfig {
    UrkConfig {
        sampler: OmegaSampler { kind: OmegaKind::StandardNormal { dim: 3, scale: 1.0 }, seed },
        network: KernelNetwork {
            input_dim: p,
            extractor: vec![
                LayerSpec { width: 6, activation: Activation::Tanh },
                LayerSpec { width: 3, activation: Activation::Identity },
            ],
            shifter: Some(ShifterSpec { hidden: 3 }),
            replicate: ReplicatePolicy::None,
            combine: Combine::RffCosSin,
        },
        m,
        normalization: Normalization::SqrtMMinusOne,
    }
}

fn random_data(rng: &mut ChaCha8Rng, p: usize, n: usize) -> Dataset {
    let x = DenseMatrix::from_fn(p, n, |_, _| rng.random_range(-2.0..2.0));
    let y = (0..n).map(|j| x[(0, j)].sin() + 0.1 * rng.random_range(-1.0..1.0)).collect();
    Dataset::unnamed(x, y).unwrap()
}

fn split_into(data: &Dataset, k: usize, rng: &mut ChaCha8Rng) -> Vec<Dataset> {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(rng);
    // random cut points with every client non-empty
    let mut cuts: Vec<usize> = (1..data.len()).collect();
    cuts.shuffle(rng);
    let mut cuts: Vec<usize> = cuts[..k - 1].to_vec();
    cuts.sort_unstable();
    cuts.insert(0, 0);
    cuts.push(data.len());
    cuts.windows(2).map(|w| data.subset(&idx[w[0]..w[1]])).collect()
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

struct Setup {
    urk: UrkConfig,
    omegas: OmegaSamples,
    params: ParamVector,
}

fn setup(p: usize, m: usize, seed: u64) -> Setup {
    let urk = network(p, m, seed);
    let omegas = sample_omegas(&urk).unwrap();
    let params = init_params(&urk, seed, 0.3, 1.2).unwrap();
    Setup { urk, omegas, params }
}

fn pooled(s: &Setup, data: &Dataset) -> BlrPosterior {
    let phi = feature_map_with(&s.urk, &s.params, &s.omegas, &data.x).unwrap();
    blr_fit(&phi, &data.y, s.params.sigma().unwrap(), s.params.lambda().unwrap()).unwrap()
}

#[test]
fn federated_posterior_equals_pooled_fit() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (i, &k) in [1usize, 2, 5, 17].iter().cycle().take(8).enumerate() {
        let p = rng.random_range(1..=5);
        let s = setup(p, rng.random_range(5..=25), i as u64);
        let n = rng.random_range(40..=200);
        let data = random_data(&mut rng, p, n);
        let clients = split_into(&data, k, &mut rng);
        let refs: Vec<&Dataset> = clients.iter().collect();
        let fed = phase2_protocol(&s.urk, &s.omegas, &s.params, &refs, &mut CommStats::default()).unwrap();
        let central = pooled(&s, &data);
        assert!(rel(fed.a.as_slice(), central.a.as_slice()) < 1e-8, "k = {k}");
        assert!(rel(&fed.w_bar, &central.w_bar) < 1e-8, "k = {k}");
        let test = random_data(&mut rng, p, 30);
        let phi = feature_map_with(&s.urk, &s.params, &s.omegas, &test.x).unwrap();
        let (a, b) = (blr_predict(&fed, &phi).unwrap(), blr_predict(&central, &phi).unwrap());
        assert!(rel(&a.mean, &b.mean) < 1e-8);
        assert!(rel(&a.variance, &b.variance) < 1e-8);
    }
}

#[test]
fn client_order_does_not_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let s = setup(3, 20, 5);
    let data = random_data(&mut rng, 3, 150);
    let mut clients = split_into(&data, 6, &mut rng);
    let run = |cs: &[Dataset]| {
        let refs: Vec<&Dataset> = cs.iter().collect();
        phase2_protocol(&s.urk, &s.omegas, &s.params, &refs, &mut CommStats::default()).unwrap()
    };
    let first = run(&clients);
    clients.reverse();
    clients.swap(0, 3);
    let second = run(&clients);
    assert!(first.a.max_abs_diff(&second.a) <= 1e-12);
    assert!(rel(&first.w_bar, &second.w_bar) <= 1e-12);
}

#[test]
fn message_sizes_do_not_depend_on_client_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let s = setup(2, 15, 9);
    let d = s.urk.feature_dim();
    let mut sizes = Vec::new();
    for n in [1, 1000] {
        let data = random_data(&mut rng, 2, n);
        let scatter = phase2_scatter(&s.urk, &s.omegas, &s.params, &data.x).unwrap();
        let weights = vec![0.0; d];
        sizes.push((
            Message::ScatterMatrix(scatter).encode().len(),
            Message::IntermediateWeights(weights).encode().len(),
        ));
        let mut comm = CommStats::default();
        phase2_protocol(&s.urk, &s.omegas, &s.params, &[&data], &mut comm).unwrap();
        sizes.push((comm.uplink_bytes as usize, comm.downlink_bytes as usize));
    }
    assert_eq!(sizes[0], sizes[2]);
    assert_eq!(sizes[1], sizes[3]);
    assert_eq!(sizes[0].0, 9 + 8 * d * d);
}

#[test]
fn fedavg_of_unchanged_clients_is_bitwise_fixed_point() {
    let s = setup(2, 10, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data = random_data(&mut rng, 2, 20);
    let updates: Vec<ParamVector> =
        (0..7).map(|_| local_update(&s.urk, &s.omegas, &data, &s.params, 0, 1e-3).unwrap()).collect();
    let avg = fedavg_aggregate(&updates, None).unwrap();
    assert_eq!(avg.values(), s.params.values());
    let weighted = fedavg_aggregate(&updates, Some(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0])).unwrap();
    assert_eq!(weighted.values(), s.params.values());
}

fn small_run(mode: AblationMode, max_rounds: usize) -> RunConfig {
    RunConfig { mode, local_epochs: 5, max_rounds, lr: 1e-2, patience: 3, ..RunConfig::default() }
}

#[test]
fn single_client_matches_centralized_training() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let s = setup(2, 12, 21);
    let data = random_data(&mut rng, 2, 60);
    let validation = random_data(&mut rng, 2, 20);
    let test = random_data(&mut rng, 2, 25);
    let clients = [data.clone()];
    let mut predictions = Vec::new();
    for mode in AblationMode::all().into_iter().filter(|m| m.phase1 != Phase1::Kd) {
        let out = run_fedbnr(
            &s.urk,
            &small_run(mode, 4),
            &s.omegas,
            &s.params,
            RunData { clients: &clients, validation: &validation, test: None, kd: None },
        )
        .unwrap();
        assert_eq!(out.models.len(), 1);
        let pred = out.predict_all(&s.urk, &s.omegas, &test.x).unwrap().remove(0);
        // centralised oracle: same number of ascent steps on the pooled data
        let mut params = s.params.clone();
        for _ in 0..out.best_round {
            params = local_update(&s.urk, &s.omegas, &data, &params, 5, 1e-2).unwrap();
        }
        let central = Setup { urk: s.urk.clone(), omegas: s.omegas.clone(), params };
        let phi = feature_map_with(&s.urk, &central.params, &s.omegas, &test.x).unwrap();
        let expected = blr_predict(&pooled(&central, &data), &phi).unwrap();
        assert!(rel(&pred.mean, &expected.mean) < 1e-10, "{mode}");
        assert!(rel(&pred.variance, &expected.variance) < 1e-10, "{mode}");
        predictions.push(pred);
    }
    for p in &predictions[1..] {
        assert!(rel(&p.mean, &predictions[0].mean) < 1e-10);
    }
}

#[test]
fn zero_rounds_keeps_initial_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = setup(2, 10, 2);
    let clients: Vec<Dataset> = (0..3).map(|_| random_data(&mut rng, 2, 15)).collect();
    let validation = random_data(&mut rng, 2, 10);
    let out = run_fedbnr(
        &s.urk,
        &small_run(AblationMode::FEDBNR, 0),
        &s.omegas,
        &s.params,
        RunData { clients: &clients, validation: &validation, test: None, kd: None },
    )
    .unwrap();
    assert_eq!(out.best_round, 0);
    assert_eq!(out.rounds.len(), 1);
    assert_eq!(out.global.values(), s.params.values());
}

#[test]
fn kd_mode_requires_distillation_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = setup(1, 8, 4);
    let clients = [random_data(&mut rng, 1, 15)];
    let validation = random_data(&mut rng, 1, 10);
    let err = run_fedbnr(
        &s.urk,
        &small_run(AblationMode::FEDBNR_KD, 2),
        &s.omegas,
        &s.params,
        RunData { clients: &clients, validation: &validation, test: None, kd: None },
    )
    .unwrap_err();
    assert!(matches!(err, fedbnr::FedError::NoKdData));
}
