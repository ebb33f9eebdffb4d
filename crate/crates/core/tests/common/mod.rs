#![allow(dead_code)]

use offdec::analysis::extrapolation_error;
use offdec::dataset::collect;
use offdec::empirical::build_model;
use offdec::env::{random_mdp, JointPolicy};
use offdec::learner::{greedy_policy, modified_value_iteration, LearnConfig};
use offdec::transforms::{TransformMode, TransformSpec};

pub struct Direction {
    pub mean_none: f64,
    pub mean_vd_tn: f64,
    /// Seeds where the unmodified learner's error is larger.
    pub none_worse: usize,
    pub seeds: usize,
}

/// Extrapolation error of mode none vs vd_tn on random MDPs whose dataset
/// comes from a skewed behavior policy.
pub fn extrapolation_direction(seeds: u64) -> Direction {
    let gamma = 0.9;
    let (mut sum_none, mut sum_vdtn, mut none_worse) = (0.0, 0.0, 0);
    for seed in 0..seeds {
        let env = random_mdp(5, 2, 2, 1.0, 5.0, seed).unwrap().with_horizon(Some(300)).unwrap();
        let skewed = vec![0.9, 0.1];
        let beh = JointPolicy::state_independent(&env, &[skewed.clone(), skewed]).unwrap();
        let data = collect(&env, &beh, 200, seed).unwrap();
        let err = |mode| {
            let cfg = LearnConfig { gamma, ..Default::default() }.with_transform(TransformSpec::new(mode));
            let qs: Vec<_> = data
                .iter()
                .enumerate()
                .map(|(i, d)| {
                    let m = build_model(d, env.n_states(), env.n_actions(i)).unwrap();
                    modified_value_iteration(&m, &cfg).unwrap()
                })
                .collect();
            let policies: Vec<_> = qs.iter().map(greedy_policy).collect();
            extrapolation_error(&env, &policies, &qs, 200, seed, gamma).unwrap()
        };
        let (none, vdtn) = (err(TransformMode::None), err(TransformMode::VdTn));
        sum_none += none;
        sum_vdtn += vdtn;
        none_worse += usize::from(none > vdtn);
    }
    Direction {
        mean_none: sum_none / seeds as f64,
        mean_vd_tn: sum_vdtn / seeds as f64,
        none_worse,
        seeds: seeds as usize,
    }
}

/// Path of the matrix-game config shipped with the repository.
pub fn repo_config(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}
