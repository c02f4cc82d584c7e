//! Data-consistency convergence against a pseudo-inverse oracle, and the
//! loss decrease of the shipped presets.

use nalgebra::{DMatrix, DVector};

use dcdp::operators::materialize;
use dcdp::rng::{derive_seed, seeded, standard_normal};
use dcdp::tasks::{self, ImagePriorSpec, OperatorSpec};
use dcdp::operators::Identity;
use dcdp::*;

/// Largest eigenvalue of AᵀA by power iteration.
fn lipschitz(op: &dyn LinearOperator<f64>) -> f64 {
    let mut v: Vec<f64> = standard_normal(&mut seeded(9), op.in_shape().len());
    let mut lambda = 0.0;
    for _ in 0..200 {
        let w = op.normal(&v);
        lambda = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        v = w.iter().map(|x| x / lambda).collect();
    }
    lambda
}

#[test]
fn converges_to_the_projection_of_y_onto_the_range() {
    let shape = ImageShape::gray(8, 8);
    for spec in [OperatorSpec::Inpaint { box_size: 3 }, OperatorSpec::SuperResolution { factor: 2 }, OperatorSpec::GaussianBlur { size: 3, sigma: 0.5 }] {
        let op = spec.build::<f64>(shape).unwrap();
        let l = lipschitz(op.as_ref());
        let momentum = 0.5;
        let lr = 1.0 * (1.0 - momentum) / l;
        let y: Vec<f64> = standard_normal(&mut seeded(1), op.out_shape().len());
        let init: Vec<f64> = standard_normal(&mut seeded(2), shape.len());
        let cfg = FidelityConfig::new(5000, lr, momentum).unwrap();
        let out = data_fidelity(op.as_ref(), &y, &init, &cfg).unwrap();

        let a = materialize(op.as_ref());
        let a = DMatrix::from_fn(a.rows(), a.cols(), |i, j| a[(i, j)]);
        let pinv = a.clone().pseudo_inverse(1e-10).unwrap();
        let proj_y = &a * (&pinv * DVector::from_column_slice(&y));
        let ax = &a * DVector::from_column_slice(&out.x);
        assert!((ax - &proj_y).amax() < 1e-6, "{spec}");
        // The null-space part of the start is untouched.
        let null = DMatrix::identity(shape.len(), shape.len()) - &pinv * &a;
        let drift = &null * (DVector::from_column_slice(&out.x) - DVector::from_column_slice(&init));
        assert!(drift.amax() < 1e-8, "{spec}");
        let tail = &out.losses[out.losses.len() - 50..];
        assert!(tail.windows(2).all(|w| w[1] <= w[0] + 1e-15), "{spec}");
    }
}

#[test]
fn presets_decrease_the_loss_on_every_task() {
    let spec = ImagePriorSpec::default();
    let prior: GaussianMixture<f64> = spec.mixture().unwrap();
    let shape = spec.shape().unwrap();
    for op_spec in [OperatorSpec::DESK_INPAINT, OperatorSpec::DESK_SR, OperatorSpec::DESK_GAUSSIAN, OperatorSpec::DESK_MOTION] {
        let op = op_spec.build::<f64>(shape).unwrap();
        let preset = tasks::preset_for(&op_spec);
        for s in 0..5 {
            let x = prior.sample(&mut seeded(derive_seed(3, s)));
            let y = measure(op.as_ref(), &x, 0.05, s).unwrap();
            let start = prior.sample(&mut seeded(derive_seed(4, s)));
            let out = data_fidelity(op.as_ref(), &y.y, &start, &preset.fidelity().unwrap()).unwrap();
            assert!(out.final_loss() <= out.losses[0], "{op_spec} seed {s}");
        }
    }
}

#[test]
fn identity_converges_to_machine_precision() {
    let op = Identity::new(ImageShape::gray(4, 4));
    let y: Vec<f64> = standard_normal(&mut seeded(5), 16);
    let out = data_fidelity(&op, &y, &[0.0; 16], &FidelityConfig::new(200, 0.3, 0.5).unwrap()).unwrap();
    assert!(out.final_loss() < 1e-8 * out.losses[0]);
}
