use rareopt::model::{ModelFamily, ThetaBox};
use rareopt::optimize::{
    ascend_g_n, normal_cone_distance, project_box, solve_limit, AscentOptions, LimitGradient, LimitOptions, StepRule,
};
use rareopt::*;

fn safe_linear() -> (Model, TiltableDistribution) {
    // G = X − θ with X ~ N(5, 1) and θ ∈ [0, 1]: the mean never leaves A.
    (
        Model::new(ModelFamily::Linear { dim: 1 }, ThetaBox::new(vec![0.0], vec![1.0]).unwrap()).unwrap(),
        TiltableDistribution::mv_normal(vec![5.0], vec![vec![1.0]]).unwrap(),
    )
}

#[test]
fn projection_and_normal_cone_values() {
    let b1 = ThetaBox::new(vec![0.0], vec![1.5]).unwrap();
    assert_eq!(project_box(&[0.7], &b1), vec![0.7]);
    assert_eq!(project_box(&[2.0], &b1), vec![1.5]);
    let b2 = ThetaBox::new(vec![0.0, 0.0], vec![1.5, 2.0]).unwrap();
    assert_eq!(project_box(&[-1.0, 3.0], &b2), vec![0.0, 2.0]);

    assert_eq!(normal_cone_distance(&[0.0, 0.0], &[0.5, 0.5], &b2), 0.0);
    assert_eq!(normal_cone_distance(&[0.8], &[1.5], &b1), 0.0);
    assert!((normal_cone_distance(&[0.3, -0.4], &[0.5, 0.5], &b2) - 0.5).abs() < 1e-15);
}

#[test]
fn flat_start_stops_immediately() {
    let (model, dist) = safe_linear();
    let phi = SmoothingPhi::new(1e5, 0.01).unwrap();
    let opts = AscentOptions::new(EstimatorKind::Plain, StepRule::Diminishing { s0: 0.1 }, 1e-4, 50);
    let trace = ascend_g_n(&model, &dist, &phi, &SimulationSpec::new(20, 1_000, 1), &[0.5], &opts).unwrap();
    assert!(trace.converged);
    assert_eq!(trace.iterates.len(), 1);
    assert_eq!(trace.last().gradient, vec![0.0]);
}

#[test]
fn ascent_stays_feasible_and_trends_upward() {
    let p = rareopt::presets::example1();
    let opts = AscentOptions::new(EstimatorKind::IsX, StepRule::Diminishing { s0: 0.3 }, 1e-6, 30);
    let spec = SimulationSpec::new(p.n, 20_000, 4);
    let trace = ascend_g_n(&p.model, &p.dist, &p.phi, &spec, &[0.05], &opts).unwrap();
    assert!(trace.iterates.iter().all(|it| p.model.theta_box().contains(&it.theta)));
    let g: Vec<f64> = trace.iterates.iter().map(|it| it.g_estimate).collect();
    let se = trace.iterates.iter().map(|it| it.g_se).fold(0.0, f64::max);
    let smooth: Vec<f64> = g.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    for (k, w) in smooth.windows(2).enumerate() {
        assert!(w[1] >= w[0] - 3.0 * se, "window {k}: {} after {} (se {se})", w[1], w[0]);
    }
    assert!(smooth.last().unwrap() > &(smooth[0] + 0.01));
}

#[test]
fn ascent_errors_carry_the_iterate() {
    let p = rareopt::presets::example1();
    let opts = AscentOptions::new(EstimatorKind::Plain, StepRule::Diminishing { s0: 0.1 }, 1e-6, 3);
    let phi = SmoothingPhi::indicator();
    let err = ascend_g_n(&p.model, &p.dist, &phi, &SimulationSpec::new(p.n, 100, 1), &[0.6], &opts).unwrap_err();
    match err {
        Error::AtIterate { iteration, theta, source } => {
            assert_eq!((iteration, theta), (0, vec![0.6]));
            assert!(matches!(*source, Error::InvalidParameter(_)));
        }
        other => panic!("unexpected error {other:?}"),
    }
}

#[test]
fn limit_solution_is_stationary() {
    let p = rareopt::presets::example1();
    let sol = solve_limit(&p.model, &p.dist, &p.phi, &LimitOptions::default()).unwrap();
    assert!(sol.projected_gradient <= 1e-4, "{sol:?}");
    let fd = solve_limit(
        &p.model,
        &p.dist,
        &p.phi,
        &LimitOptions { gradient: LimitGradient::FiniteDifference, ..LimitOptions::default() },
    )
    .unwrap();
    assert!((fd.theta[0] - sol.theta[0]).abs() < 1e-3 && (fd.g - sol.g).abs() < 1e-8);
}

#[test]
fn limit_is_zero_when_the_mean_is_always_safe() {
    let (model, dist) = safe_linear();
    let phi = SmoothingPhi::new(1e5, 0.01).unwrap();
    let sol = solve_limit(&model, &dist, &phi, &LimitOptions::default()).unwrap();
    assert!(sol.g.abs() < 1e-12);
    assert!(model.theta_box().contains(&sol.theta));
}
