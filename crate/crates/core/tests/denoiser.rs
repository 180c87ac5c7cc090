use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rigidtrack::denoise::{
    fit_coefficients, heldout_mse, heldout_set, loss_geodesic, loss_phi, train_denoiser,
    DenoiserConfig, DenoiserNet, FitConfig, PhiObjective, TrainConfig, TrainState, ViewPair,
};
use rigidtrack::geom3d::{RigidTransform, Volume3};
use rigidtrack::harness::{make_phantom_with, PhantomSpec};
use rigidtrack::steerable::{Ecnn, EcnnConfig, FieldType};

fn corpus(n: usize, count: u64, from: u64) -> Vec<Volume3> {
    (from..from + count)
        .map(|s| {
            make_phantom_with(&PhantomSpec::new([n, n, n], 4, s))
                .unwrap()
                .image
        })
        .collect()
}

#[test]
fn short_training_run_reduces_heldout_error() {
    let train = corpus(16, 12, 100);
    let held = corpus(16, 4, 500);
    let cfg = TrainConfig {
        steps: 150,
        trans_range_vox: 1.5,
        seed: 2,
        ..TrainConfig::default()
    };
    let net = DenoiserNet::new(
        DenoiserConfig {
            width: 8,
            ..DenoiserConfig::default()
        },
        1,
    )
    .unwrap();
    let mut state = TrainState::new(net, cfg.lr, 1);
    let report = train_denoiser(&train, &held, &cfg, &mut state, |_, _| {}).unwrap();
    assert!(report.final_mse < 0.5 * report.initial_mse, "{report:?}");
    assert!(state.history().iter().all(|l| l.is_finite() && *l >= 0.0));
    // The report is the held-out error of the returned network.
    let pairs = heldout_set(&held, &cfg).unwrap();
    assert_eq!(heldout_mse(state.net(), &pairs).unwrap(), report.final_mse);
}

#[test]
fn training_is_deterministic() {
    let train = corpus(8, 3, 0);
    let cfg = TrainConfig {
        steps: 5,
        trans_range_vox: 1.0,
        ..TrainConfig::default()
    };
    let run = || {
        let net = DenoiserNet::new(
            DenoiserConfig {
                width: 4,
                ..DenoiserConfig::default()
            },
            3,
        )
        .unwrap();
        let mut s = TrainState::new(net, cfg.lr, 3);
        train_denoiser(&train, &train, &cfg, &mut s, |_, _| {}).unwrap();
        s
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history(), b.history());
    assert_eq!(a.net().params(), b.net().params());
}

fn tiny_ecnn() -> Ecnn {
    Ecnn::new(
        EcnnConfig {
            hidden: FieldType::new(vec![2, 2, 1]).unwrap(),
            depth: 3,
            outputs: 16,
            ..EcnnConfig::desk()
        },
        4,
    )
    .unwrap()
}

fn view_pairs(n: usize, count: u64) -> Vec<ViewPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    (0..count)
        .map(|s| {
            let img = make_phantom_with(&PhantomSpec::new([n, n, n], 4, 40 + s))
                .unwrap()
                .image;
            let c = img.center();
            let t1 = RigidTransform::sample(20.0, 1.0, c, &mut rng);
            let t2 = RigidTransform::sample(20.0, 1.0, c, &mut rng);
            (img, t1, t2)
        })
        .collect()
}

#[test]
fn coordinate_descent_never_increases_the_loss() {
    let pairs = view_pairs(16, 2);
    for objective in [PhiObjective::Image, PhiObjective::Geodesic] {
        let mut net = tiny_ecnn();
        let before = net.params();
        let cfg = FitConfig {
            steps: 8,
            objective,
            seed: 1,
            ..FitConfig::default()
        };
        let report = fit_coefficients(&mut net, &pairs, &cfg).unwrap();
        assert_eq!(report.history.len(), 8);
        let mut last = report.initial_loss;
        for &l in &report.history {
            assert!(l <= last);
            last = l;
        }
        assert_eq!(report.final_loss, last);
        if report.accepted == 0 {
            assert_eq!(net.params(), before);
        }
    }
}

#[test]
fn identical_views_give_identity_and_floor_losses() {
    let (img, t1, _) = view_pairs(16, 1).remove(0);
    let net = tiny_ecnn();
    assert!(loss_geodesic(&net, &img, &t1, &t1).unwrap() < 1e-6);
    let floor = loss_phi(&net, &img, &t1, &t1).unwrap();
    assert!(floor < 1e-9, "{floor}");
}
