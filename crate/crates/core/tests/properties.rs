use proptest::prelude::*;

use dcdp::io::{format_tensor, parse_tensor};
use dcdp::operators::adjoint_residual;
use dcdp::rng::{seeded, standard_normal};
use dcdp::tasks::{ImagePriorSpec, OperatorSpec};
use dcdp::*;

fn op_spec() -> impl Strategy<Value = (OperatorSpec, usize)> {
    prop_oneof![
        (1usize..5).prop_map(|b| (OperatorSpec::Inpaint { box_size: b }, 8)),
        (1usize..4).prop_map(|f| (OperatorSpec::SuperResolution { factor: f }, 12)),
        (0usize..3, 0.3f64..3.0).prop_map(|(s, sigma)| (OperatorSpec::GaussianBlur { size: 2 * s + 1, sigma }, 8)),
        (0usize..3, 1.0f64..5.0, 0.0f64..180.0)
            .prop_map(|(s, length, angle)| (OperatorSpec::MotionBlur { size: 2 * s + 3, length, angle }, 8)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_operator_is_adjoint((spec, side) in op_spec(), seed in any::<u64>()) {
        let shape = ImageShape::new(side, side, 2).unwrap();
        let op = spec.build::<f64>(shape).unwrap();
        let x: Vec<f64> = standard_normal(&mut seeded(seed), shape.len());
        let y: Vec<f64> = standard_normal(&mut seeded(seed ^ 1), op.out_shape().len());
        prop_assert!(adjoint_residual(op.as_ref(), &x, &y) < 1e-12);
    }

    #[test]
    fn operator_specs_round_trip_through_text((spec, _) in op_spec()) {
        let back: OperatorSpec = spec.to_string().parse().unwrap();
        prop_assert_eq!(back, spec);
    }

    #[test]
    fn tensors_round_trip_exactly(values in prop::collection::vec(-1e6f64..1e6, 6)) {
        let shape = ImageShape::new(1, 2, 3).unwrap();
        let (back, s) = parse_tensor::<f64>(&format_tensor(&values, shape).unwrap()).unwrap();
        prop_assert_eq!(s, shape);
        prop_assert_eq!(back, values);
    }

    #[test]
    fn psnr_falls_as_the_error_grows(a in 0.01f64..0.5, b in 0.01f64..0.5) {
        let truth = vec![0.0; 16];
        let near: Vec<f64> = vec![a.min(b); 16];
        let far: Vec<f64> = vec![a.max(b); 16];
        prop_assert!(psnr(&near, &truth, 2.0).unwrap() >= psnr(&far, &truth, 2.0).unwrap());
    }
}

#[test]
fn single_precision_solve_runs_end_to_end() {
    let spec = ImagePriorSpec { height: 8, width: 8, components: 2, ..Default::default() };
    let prior: GaussianMixture32 = spec.mixture().unwrap();
    let sched = NoiseSchedule32::ddpm();
    let score = GmmScore32::new(prior.clone(), sched.clone());
    let op = OperatorSpec::SuperResolution { factor: 2 }.build::<f32>(spec.shape().unwrap()).unwrap();
    let x = prior.sample(&mut seeded(1));
    let y = measure(op.as_ref(), &x, 0.05, 2).unwrap();
    let cfg: SolverConfig32 = dcdp::tasks::PRESET_SR.solver(PurifyBackend::Ddim { n_steps: 10 }, 3).unwrap();
    let out = dcdp_solve(op.as_ref(), &y, &score, &sched, &cfg, Some(&x)).unwrap();
    assert!(out.reconstruction.iter().all(|v| v.is_finite()));
    let start = mse(&vec![0.0; x.len()], &x).unwrap();
    assert!(mse(&out.reconstruction, &x).unwrap() < start);
}
