mod common;

use offdec::analysis::{evaluate_joint, extrapolation_error, value_consensus};
use offdec::env::matrix_game;
use offdec::learner::greedy_policy;
use offdec::tables::matrix_qtables;
use offdec::transforms::{TransformMode, TransformSpec};

#[test]
fn matrix_game_metrics_by_mode() {
    let env = matrix_game();
    let run = |mode| {
        let qs = matrix_qtables(&TransformSpec::new(mode)).unwrap();
        let policies: Vec<_> = qs.iter().map(greedy_policy).collect();
        let ret = evaluate_joint(&env, &policies, 100, 1).unwrap().mean_return;
        let consensus = value_consensus(&qs, &[0]).unwrap();
        let extrap = extrapolation_error(&env, &policies, &qs, 100, 1, 0.95).unwrap();
        (ret, consensus, extrap)
    };
    let (ret_none, cons_none, _) = run(TransformMode::None);
    let (ret_vd, cons_vd, _) = run(TransformMode::Vd);
    let (ret_vdtn, cons_vdtn, extrap_vdtn) = run(TransformMode::VdTn);
    assert_eq!(ret_none, 5.0);
    assert_eq!(ret_vdtn, 6.0);
    // vd alone: both agents pick a2 and miscoordinate
    assert_eq!(ret_vd, 1.0);
    assert!(cons_vdtn < 1e-12 && cons_vdtn < cons_vd && cons_none > 0.0);
    assert!((extrap_vdtn - (6.0 - 37.0 / 7.0)).abs() < 1e-9);
}

#[test]
fn extrapolation_error_of_unmodified_learner_exceeds_vd_tn_on_skewed_data() {
    let d = common::extrapolation_direction(20);
    eprintln!(
        "mean extrapolation error: none {:.4}, vd_tn {:.4}; none larger on {}/{} seeds",
        d.mean_none, d.mean_vd_tn, d.none_worse, d.seeds
    );
    assert!(
        d.mean_none > d.mean_vd_tn,
        "none {:.4} <= vd_tn {:.4}",
        d.mean_none,
        d.mean_vd_tn
    );
}
