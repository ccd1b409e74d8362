use tracelab_core::bridge::BridgeEndpoints;
use tracelab_core::gmm::{Condition, GmmDistribution, GmmFamily};
use tracelab_core::nn::{
    mlp_forward, optimal_denoiser_mse, train_bridge_score, train_dsm, Activation, AdapterParams, BridgeEndpointSpec,
    BridgeHyper, BridgeTrainer, DsmHyper, InputLayout, Mlp, MlpScore,
};
use tracelab_core::render::ViewTransform;
use tracelab_core::rng::rng_for;
use tracelab_core::schedule::NoiseSchedule;
use tracelab_core::score::AnalyticScore;

fn standard_normal_prior(dim: usize) -> AnalyticScore {
    let p = GmmDistribution::isotropic(vec![0.0; dim], 1.0).unwrap();
    AnalyticScore::new(GmmFamily::new(vec![p]).unwrap(), NoiseSchedule::default())
}

fn network(dim: usize, seed: u64) -> Mlp {
    let layout = InputLayout {
        data_dim: dim,
        n_conditions: 1,
    };
    Mlp::random(layout, &[64, 64], Activation::Silu, &mut rng_for(seed, &[])).unwrap()
}

#[test]
fn dsm_on_standard_normal_reaches_the_optimal_denoiser() {
    let prior = standard_normal_prior(2);
    let mut model = network(2, 1);
    let hyper = DsmHyper {
        seed: 3,
        ..DsmHyper::default()
    };
    let report = train_dsm(&mut model, &prior, &hyper).unwrap();
    assert_eq!(report.losses.len(), 20_000);
    assert!(report.losses.iter().all(|l| l.is_finite()));
    let scored = MlpScore {
        base: model,
        adapter: None,
    };
    let mse = optimal_denoiser_mse(&scored, &prior, Condition::Class(0), 4000, 0).unwrap();
    println!("dsm mse to optimal denoiser: {mse:.5}");
    assert!(mse < 0.05, "mse {mse}");
}

#[test]
fn dsm_first_loss_is_about_the_dimension() {
    let prior = standard_normal_prior(2);
    let mut model = network(2, 2);
    // the output layer starts small, so the first prediction is near zero
    let hyper = DsmHyper {
        steps: 1,
        batch_size: 4096,
        ..DsmHyper::default()
    };
    let report = train_dsm(&mut model, &prior, &hyper).unwrap();
    assert!((report.losses[0] - 2.0).abs() < 0.35, "{}", report.losses[0]);
}

#[test]
fn dsm_is_deterministic_and_zero_steps_keep_the_initialization() {
    let prior = standard_normal_prior(2);
    let hyper = DsmHyper {
        steps: 50,
        ..DsmHyper::default()
    };
    let (mut a, mut b) = (network(2, 4), network(2, 4));
    let ra = train_dsm(&mut a, &prior, &hyper).unwrap();
    let rb = train_dsm(&mut b, &prior, &hyper).unwrap();
    assert_eq!(ra.losses, rb.losses);
    assert_eq!(a.flat_params(), b.flat_params());

    let mut c = network(2, 4);
    let init = c.fingerprint();
    let rc = train_dsm(
        &mut c,
        &prior,
        &DsmHyper {
            steps: 0,
            ..DsmHyper::default()
        },
    )
    .unwrap();
    assert!(rc.losses.is_empty());
    assert_eq!(rc.snapshot_id, init);
}

#[test]
fn bridge_training_on_fixed_aligned_endpoints_learns_the_noise() {
    let base = network(2, 5);
    let base_fp = base.fingerprint();
    let adapter = AdapterParams::new(&base, 4, 1.0, &mut rng_for(5, &[1])).unwrap();
    let mut trainer = BridgeTrainer::new(adapter, 1e-3);
    let x = vec![0.5, -0.5];
    let ends = BridgeEndpoints::new(x.clone(), x).unwrap();
    let hyper = BridgeHyper {
        seed: 6,
        ..BridgeHyper::default()
    };
    let report = train_bridge_score(
        &base,
        &mut trainer,
        |_, _| BridgeEndpointSpec {
            endpoints: ends.clone(),
            y: Condition::Class(0),
            view: ViewTransform::identity(),
        },
        &NoiseSchedule::default(),
        &hyper,
    )
    .unwrap();
    assert_eq!(report.losses.len(), 5000);
    let tail: f64 = report.losses[4900..].iter().sum::<f64>() / 100.0;
    println!("bridge loss: first {:.4}, last-100 mean {tail:.5}", report.losses[0]);
    assert!(tail < 0.05, "tail loss {tail}");
    assert_eq!(base.fingerprint(), base_fp);
}

#[test]
fn zero_scale_adapter_leaves_the_output_unchanged() {
    let base = network(2, 7);
    let adapter = AdapterParams::new(&base, 4, 0.0, &mut rng_for(7, &[1])).unwrap();
    let mut trainer = BridgeTrainer::new(adapter, 1e-2);
    let x = vec![1.0, 0.0];
    let ends = BridgeEndpoints::new(x.clone(), vec![-1.0, 0.5]).unwrap();
    let view = ViewTransform::identity();
    let before = mlp_forward(&base, None, &x, 0.3, Condition::Class(0), &view).unwrap();
    let report = train_bridge_score(
        &base,
        &mut trainer,
        |_, _| BridgeEndpointSpec {
            endpoints: ends.clone(),
            y: Condition::Class(0),
            view,
        },
        &NoiseSchedule::default(),
        &BridgeHyper {
            steps: 20,
            ..BridgeHyper::default()
        },
    )
    .unwrap();
    assert_eq!(report.losses.len(), 20);
    let after = mlp_forward(&base, Some(&trainer.adapter), &x, 0.3, Condition::Class(0), &view).unwrap();
    assert_eq!(before, after);
}
