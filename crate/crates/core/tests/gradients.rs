mod common;

use common::{max_fd_error, min_relu_margin};
use pearl_core::nn::{random_input, Activation, DenseStack, LossKind};
use pearl_core::seed::SeedTree;
use rand::Rng as _;

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

fn random_dims(rng: &mut pearl_core::seed::Rng) -> Vec<usize> {
    let depth = rng.random_range(1..5);
    (0..=depth).map(|_| rng.random_range(1..9)).collect()
}

#[test]
fn smooth_nets_match_central_differences() {
    let mut rng = SeedTree::new(301).stream("fd-smooth");
    for _ in 0..60 {
        let dims = random_dims(&mut rng);
        let hidden = if rng.random_bool(0.5) { Activation::Sigmoid } else { Activation::Linear };
        let net = DenseStack::new(&dims, hidden, Activation::Linear, &mut rng);
        let x = random_input(dims[0], &mut rng);
        let target = random_input(*dims.last().unwrap(), &mut rng);
        let err = max_fd_error(&net, &x, &target, LossKind::Mse, H);
        assert!(err < TOL, "dims {dims:?}: {err}");
    }
}

#[test]
fn relu_nets_match_away_from_kinks() {
    let mut rng = SeedTree::new(302).stream("fd-relu");
    let mut checked = 0;
    while checked < 60 {
        let dims = random_dims(&mut rng);
        let net = DenseStack::new(&dims, Activation::Relu, Activation::Linear, &mut rng);
        let x = random_input(dims[0], &mut rng);
        if min_relu_margin(&net, &x) < 1e-3 {
            continue;
        }
        let target = random_input(*dims.last().unwrap(), &mut rng);
        let err = max_fd_error(&net, &x, &target, LossKind::Mse, H);
        assert!(err < TOL, "dims {dims:?}: {err}");
        checked += 1;
    }
}

#[test]
fn sigmoid_output_with_bce_matches() {
    let mut rng = SeedTree::new(303).stream("fd-bce");
    let mut checked = 0;
    while checked < 40 {
        let mut dims = random_dims(&mut rng);
        *dims.last_mut().unwrap() = 1;
        let net = DenseStack::new(&dims, Activation::Relu, Activation::Sigmoid, &mut rng);
        let x = random_input(dims[0], &mut rng);
        if min_relu_margin(&net, &x) < 1e-3 {
            continue;
        }
        let target = [f64::from(u8::from(rng.random_bool(0.5)))];
        let err = max_fd_error(&net, &x, &target, LossKind::Bce, H);
        assert!(err < TOL, "dims {dims:?}: {err}");
        checked += 1;
    }
}
