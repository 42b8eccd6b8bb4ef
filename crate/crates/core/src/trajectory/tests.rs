use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::envs::{Environment, GridLayout, GridPixels};
use crate::policy::{PolicyHandle, ToyPolicy, TrainAlgorithm};
use crate::tensor::l2_norm;

#[test]
fn normalize_reward_hits_bounds_and_midpoint() {
    assert_relative_eq!(normalize_reward(5.0f64, 1.0, 5.0).unwrap(), 1.0);
    // the floor clamps the minimum
    assert_relative_eq!(normalize_reward(1.0f64, 1.0, 5.0).unwrap(), 1e-3);
    assert_relative_eq!(normalize_reward(3.0f64, 1.0, 5.0).unwrap(), 0.5);
    assert!(matches!(normalize_reward(0.0f64, 2.0, 2.0), Err(Error::Config(_))));
}

#[test]
fn returns_to_go_matches_log_half_sums() {
    // all rewards 1 -> 0 everywhere
    let ones = vec![1.0f64; 5];
    for t in 0..5 {
        assert_eq!(returns_to_go(&ones, t).unwrap(), 0.0);
    }
    // single reward 0.5 -> 1
    assert_relative_eq!(returns_to_go(&[0.5f64], 0).unwrap(), 1.0, epsilon = 1e-12);
    // [0.5, 0.25] from t = 0 -> 1 + 2 = 3
    assert_relative_eq!(returns_to_go(&[0.5f64, 0.25], 0).unwrap(), 3.0, epsilon = 1e-12);
    // out-of-domain rewards
    assert!(matches!(returns_to_go(&[0.0f64], 0), Err(Error::Domain(_))));
    assert!(matches!(returns_to_go(&[1.5f64], 0), Err(Error::Domain(_))));
}

#[test]
fn returns_to_go_all_agrees_with_per_step() {
    let rewards = vec![0.9f64, 0.5, 0.25, 1.0, 0.7];
    let all = returns_to_go_all(&rewards).unwrap();
    for t in 0..rewards.len() {
        assert_relative_eq!(all[t], returns_to_go(&rewards, t).unwrap(), epsilon = 1e-12);
    }
}

#[test]
fn patch_counts_match_grid_arithmetic() {
    let layout = PatchLayout::new(84, 84, 1, 14).unwrap();
    assert_eq!(layout.num_patches(), 36);
    let img = vec![0.25f64; layout.obs_dim()];
    let grid = patchify(&img, &layout).unwrap();
    assert_eq!(grid.num_patches(), 36);

    let small = PatchLayout::new(28, 28, 1, 14).unwrap();
    assert_eq!(small.num_patches(), 4);

    assert!(matches!(PatchLayout::new(30, 28, 1, 14), Err(Error::Shape(_))));
}

#[test]
fn patchify_roundtrip_is_bit_exact() {
    let layout = PatchLayout::new(28, 28, 1, 14).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img: Vec<f64> = (0..layout.obs_dim()).map(|_| rand::Rng::gen::<f64>(&mut rng)).collect();
    let grid = patchify(&img, &layout).unwrap();
    let back = unpatchify(&grid, &layout).unwrap();
    assert_eq!(img, back);
}

#[test]
fn unpatchify_permutation_matches_unpatchify() {
    let layout = PatchLayout::new(8, 12, 1, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img: Vec<f64> = (0..layout.obs_dim()).map(|_| rand::Rng::gen::<f64>(&mut rng)).collect();
    let grid = patchify(&img, &layout).unwrap();
    let perm = layout.unpatchify_permutation();
    let via_perm: Vec<f64> = perm.iter().map(|&p| grid.patches.data[p]).collect();
    assert_eq!(via_perm, img);
}

fn record(t: usize, wadv: Option<f64>) -> TrajectoryRecord<f64> {
    TrajectoryRecord {
        t,
        state: vec![0.5; 4],
        action: ActionValue::Discrete(1),
        delta: vec![0.0; 4],
        reward: 0.5,
        returns_to_go: 1.0,
        weighted_advantage: wadv,
    }
}

#[test]
fn token_counts_follow_steps_and_patches() {
    let layout = PatchLayout::new(2, 2, 1, 1).unwrap(); // 4 patches of 1 px
    let recs = vec![record(0, Some(0.1))];
    let seq = build_token_sequence(&recs, ConditionKind::WeightedAdvantage, Some(&layout)).unwrap();
    assert_eq!(seq.tokens.len(), 7); // 1 + 4 + 1 + 1

    let recs2 = vec![record(0, Some(0.1)), record(1, Some(0.2))];
    let layout36 = PatchLayout::new(6, 6, 1, 1).unwrap(); // 36 patches
    let recs2: Vec<_> = recs2
        .into_iter()
        .map(|mut r| {
            r.state = vec![0.5; 36];
            r.delta = vec![0.0; 36];
            r
        })
        .collect();
    let seq2 = build_token_sequence(&recs2, ConditionKind::WeightedAdvantage, Some(&layout36)).unwrap();
    assert_eq!(seq2.tokens.len(), 78); // 2 * 39
}

#[test]
fn missing_weighted_advantage_is_a_data_error() {
    let recs = vec![record(0, None)];
    assert!(matches!(
        build_token_sequence(&recs, ConditionKind::WeightedAdvantage, None),
        Err(Error::Data(_))
    ));
    // returns-to-go conditioning is fine without the annotation
    build_token_sequence(&recs, ConditionKind::ReturnsToGo, None).unwrap();
}

#[test]
fn ordinary_condition_inverts_the_bounded_map() {
    let lambda = 0.5f64;
    let a = 1.7f64;
    let w = a / (1.0 + lambda * a.abs());
    let recs = vec![record(0, Some(w))];
    let seq =
        build_token_sequence(&recs, ConditionKind::OrdinaryAdvantage { lambda }, None).unwrap();
    match &seq.tokens[0] {
        Token::Condition(c) => assert_relative_eq!(*c, a, epsilon = 1e-12),
        _ => panic!("first token must be the condition"),
    }
}

fn toy_dataset(n_steps: usize) -> Dataset<f64> {
    let mut mix = std::collections::BTreeMap::new();
    mix.insert("random".to_string(), 1.0);
    let rewards = vec![0.5f64; n_steps];
    let rtg = returns_to_go_all(&rewards).unwrap();
    Dataset {
        manifest: DatasetManifest {
            schema_version: SCHEMA_VERSION,
            env_id: "grid".into(),
            collector_mix: mix,
            episode_count: 1,
            epsilon: 1.5,
            seed: 7,
            reward_normalization: RewardBounds { r_min: 0.0, r_max: 1.0 },
            config_hash: None,
        },
        trajectories: vec![Trajectory {
            records: (0..n_steps)
                .map(|t| TrajectoryRecord {
                    t,
                    state: vec![0.125, 0.25, 0.375],
                    action: ActionValue::Discrete(t % 2),
                    delta: vec![0.001 * t as f64, -0.25, 0.0625],
                    reward: rewards[t],
                    returns_to_go: rtg[t],
                    weighted_advantage: if t % 2 == 0 { Some(0.25) } else { None },
                })
                .collect(),
        }],
    }
}

#[test]
fn empty_dataset_serializes_to_manifest_only() {
    let mut ds = toy_dataset(1);
    ds.trajectories.clear();
    let mut buf = Vec::new();
    serialize_dataset(&ds, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 1);
    let back: Dataset<f64> = deserialize_dataset(text.as_bytes()).unwrap();
    assert_eq!(back.manifest, ds.manifest);
    assert!(back.trajectories.is_empty());
}

#[test]
fn roundtrip_preserves_every_field() {
    let ds = toy_dataset(3);
    let mut buf = Vec::new();
    serialize_dataset(&ds, &mut buf).unwrap();
    let back: Dataset<f64> = deserialize_dataset(buf.as_slice()).unwrap();
    assert_eq!(back, ds);
}

#[test]
fn invalid_collector_fractions_are_rejected() {
    let mut ds = toy_dataset(1);
    ds.manifest.collector_mix.insert("fgsm".into(), 0.5);
    ds.manifest.collector_mix.insert("random".into(), 0.6);
    let mut buf = Vec::new();
    assert!(matches!(serialize_dataset(&ds, &mut buf), Err(Error::Data(_))));
}

#[test]
fn malformed_line_reports_its_number() {
    let ds = toy_dataset(2);
    let mut buf = Vec::new();
    serialize_dataset(&ds, &mut buf).unwrap();
    let mut text = String::from_utf8(buf).unwrap();
    text.push_str("{not json\n");
    match deserialize_dataset::<f64, _>(text.as_bytes()) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected parse error with line number, got {other:?}"),
    }
}

fn tiny_grid_handle(seed: u64) -> (GridPixels<f64>, PolicyHandle<f64>) {
    let layout = GridLayout::default();
    let env: GridPixels<f64> = GridPixels::new(layout);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy = ToyPolicy::init(env.obs_dim(), env.n_actions(), TrainAlgorithm::QLearning, &mut rng);
    (env, PolicyHandle::white_box(policy))
}

#[test]
fn zero_budget_random_collection_equals_clean_rollouts() {
    let (env, handle) = tiny_grid_handle(3);
    let ds = collect(&env, &handle, Collector::Random, 2, 0.0, 11).unwrap();
    for rec in ds.records() {
        assert!(rec.delta.iter().all(|&d| d == 0.0));
    }
    // replay each episode clean with the same env seed: actions must agree
    for (ep, traj) in ds.trajectories.iter().enumerate() {
        let episode_seed = {
            // same derivation as the collector
            let mut rng =
                ChaCha8Rng::seed_from_u64(super::collect::derive_seed(11, Collector::Random, ep));
            rand::Rng::gen::<u64>(&mut rng)
        };
        let mut env2 = env.clone();
        let mut obs = env2.reset(episode_seed);
        for rec in &traj.records {
            assert_eq!(rec.state, obs);
            let a = handle.act(&obs);
            match rec.action {
                ActionValue::Discrete(rec_a) => assert_eq!(rec_a, a),
                _ => panic!("grid actions are discrete"),
            }
            obs = env2.step(a).obs;
        }
    }
}

#[test]
fn every_collected_perturbation_respects_the_budget() {
    let (env, handle) = tiny_grid_handle(4);
    let eps = 1.5;
    for collector in [Collector::Random, Collector::Fgsm] {
        let ds = collect(&env, &handle, collector, 3, eps, 13).unwrap();
        for rec in ds.records() {
            assert!(l2_norm(&rec.delta) <= eps + 1e-9);
        }
    }
}

#[test]
fn fixed_seed_collection_is_byte_identical() {
    let (env, handle) = tiny_grid_handle(5);
    let a = collect(&env, &handle, Collector::Fgsm, 3, 1.0, 17).unwrap();
    let b = collect(&env, &handle, Collector::Fgsm, 3, 1.0, 17).unwrap();
    let mut buf_a = Vec::new();
    let mut buf_b = Vec::new();
    serialize_dataset(&a, &mut buf_a).unwrap();
    serialize_dataset(&b, &mut buf_b).unwrap();
    assert_eq!(buf_a, buf_b);
}

#[test]
fn fgsm_against_black_box_is_a_capability_violation() {
    let (env, _) = tiny_grid_handle(6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let policy = ToyPolicy::init(
        Environment::<f64>::obs_dim(&env),
        Environment::<f64>::n_actions(&env),
        TrainAlgorithm::QLearning,
        &mut rng,
    );
    let handle = PolicyHandle::black_box(policy);
    assert!(matches!(
        collect(&env, &handle, Collector::Fgsm, 1, 1.0, 3),
        Err(Error::Capability(_))
    ));
}

#[test]
fn mixed_collection_records_fraction_map() {
    let (env, handle) = tiny_grid_handle(7);
    let ds = collect_mixed(
        &env,
        &handle,
        &[(Collector::Random, 0.5), (Collector::Fgsm, 0.5)],
        4,
        1.0,
        19,
    )
    .unwrap();
    assert_eq!(ds.trajectories.len(), 4);
    assert_eq!(ds.manifest.collector_mix.len(), 2);
    ds.manifest.validate().unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Decreasing any single reward strictly increases the returns-to-go at
    /// or before that step.
    #[test]
    fn rtg_monotone_in_each_reward(
        seed in 0u64..500,
        len in 2usize..8,
        u in 1usize..7,
        shrink in 0.05f64..0.9,
    ) {
        let u = u % len;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rewards: Vec<f64> = (0..len).map(|_| rand::Rng::gen_range(&mut rng, 0.05..1.0)).collect();
        let mut lowered = rewards.clone();
        lowered[u] *= shrink;
        let base = returns_to_go_all(&rewards).unwrap();
        let after = returns_to_go_all(&lowered).unwrap();
        for t in 0..=u {
            prop_assert!(after[t] > base[t]);
        }
        for t in u + 1..len {
            prop_assert_eq!(after[t], base[t]);
        }
    }

    /// unpatchify . patchify is the identity for random divisible shapes.
    #[test]
    fn patch_roundtrip_identity(
        seed in 0u64..500,
        gh in 1usize..4,
        gw in 1usize..4,
        side in 1usize..6,
    ) {
        let layout = PatchLayout::new(gh * side, gw * side, 1, side).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img: Vec<f64> = (0..layout.obs_dim()).map(|_| rand::Rng::gen::<f64>(&mut rng)).collect();
        let grid = patchify(&img, &layout).unwrap();
        let back = unpatchify(&grid, &layout).unwrap();
        prop_assert_eq!(img, back);
    }

    /// Dataset serialization round-trips values exactly.
    #[test]
    fn serialization_roundtrip_exact(steps in 1usize..5) {
        let ds = toy_dataset(steps);
        let mut buf = Vec::new();
        serialize_dataset(&ds, &mut buf).unwrap();
        let back: Dataset<f64> = deserialize_dataset(buf.as_slice()).unwrap();
        prop_assert_eq!(back, ds);
    }
}
