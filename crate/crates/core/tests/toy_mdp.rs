mod common;

use common::toy_mdp_optimal_policy;
use pearl_core::qnet::{train_phase1, QTrainConfig};
use pearl_core::seed::SeedTree;
use pearl_core::ToyMdp;

fn config() -> QTrainConfig {
    QTrainConfig {
        steps_per_layer: 5_000,
        ..QTrainConfig::default()
    }
}

#[test]
fn four_layer_run_freezes_and_every_branch_is_optimal() {
    let cfg = config();
    let optimal = toy_mdp_optimal_policy(cfg.gamma);
    assert_eq!(optimal, [0, 1]);
    for seed in [1, 2, 3] {
        let mut env = ToyMdp::new(50);
        let out = train_phase1(&mut env, &cfg, 4, &mut SeedTree::new(seed).stream("toy")).unwrap();
        for stage in 1..4 {
            for earlier in 0..stage {
                assert_eq!(out.freeze_hashes[stage][earlier], out.freeze_hashes[earlier][earlier], "seed {seed}");
            }
        }
        assert_eq!(out.net.stage_hashes(), out.freeze_hashes[3]);
        for b in 0..4 {
            for (s, want) in optimal.iter().enumerate() {
                let mut obs = [0.0; 2];
                obs[s] = 1.0;
                assert_eq!(out.net.greedy_action(&obs, b).unwrap(), *want, "seed {seed} branch {b}");
            }
        }
    }
}
