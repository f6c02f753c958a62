mod common;

use std::collections::BTreeMap;

use common::{random_grid, random_walk};
use proptest::prelude::*;
use trajattr::analysis::{
    bin_of, classify_behavior, cluster_behavior_purity, state_trajectory_distance, BehaviorLabel, DistanceMode,
};
use trajattr::attribution::{attribute, compute_metrics, ExplanationPolicies};
use trajattr::clustering::{dbscan, xmeans, ClusterAssignment, DbscanConfig, XMeansConfig};
use trajattr::dynaq::{isv, train_offline, train_online, QInit, TrainConfig};
use trajattr::embedding::{complementary_sets, data_embedding, wasserstein1, DataEmbedding};
use trajattr::encoder::{embed_trajectory, init_params, reconstruction_loss};
use trajattr::gridworld::{builtin_env, Action, Distance};
use trajattr::par::Exec;
use trajattr::trajstore::{
    dataset_to_string, detokenize, generate_dataset, parse_dataset, tokenize, GenConfig, TrajectoryDataset,
};

fn simplex(raw: &[f64]) -> DataEmbedding {
    let s: f64 = raw.iter().sum();
    DataEmbedding { probs: raw.iter().map(|x| x / s).collect() }
}

fn labels_valid(a: &ClusterAssignment, n: usize, noise_ok: bool) {
    assert_eq!(a.labels.len(), n);
    for &l in &a.labels {
        assert!(l < a.k as i64 && (l >= 0 || (noise_ok && l == -1)));
    }
    let sizes = a.sizes();
    assert!(sizes.iter().all(|&s| s > 0));
    let noise = a.labels.iter().filter(|&&l| l == -1).count();
    assert_eq!(sizes.iter().sum::<usize>() + noise, n);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn steps_are_deterministic_and_rewards_partitioned(seed in 0u64..10_000) {
        let env = random_grid(seed);
        for s in 0..env.n_states() {
            if env.is_obstacle(s) {
                continue;
            }
            if env.is_terminal(s) {
                prop_assert!(env.step(s, Action::Up).is_err());
                continue;
            }
            for &a in env.valid_actions(s).unwrap() {
                let o = env.step(s, a).unwrap();
                prop_assert_eq!(o, env.step(s, a).unwrap());
                prop_assert!(o.reward == 0.0 || o.reward == 1.0 || o.reward == -1.0);
                if o.reward != 0.0 {
                    prop_assert!(o.done);
                }
            }
        }
    }

    #[test]
    fn manhattan_is_admissible(seed in 0u64..10_000, i in 0usize..100, j in 0usize..100) {
        let env = random_grid(seed);
        let open: Vec<usize> = (0..env.n_states()).filter(|&s| !env.is_obstacle(s)).collect();
        let (a, b) = (open[i % open.len()], open[j % open.len()]);
        if let Distance::Steps(d) = env.shortest_distance(a, b).unwrap() {
            let ((ar, ac), (br, bc)) = (env.coords(a), env.coords(b));
            prop_assert!(ar.abs_diff(br) + ac.abs_diff(bc) <= d);
        }
    }

    #[test]
    fn tokens_and_files_round_trip(seed in 0u64..10_000, n in 1usize..6) {
        let env = builtin_env("gridworld7").unwrap();
        let trajectories: Vec<_> = (0..n).map(|i| random_walk(&env, seed * 10 + i as u64, 40)).collect();
        for t in &trajectories {
            prop_assert_eq!(&detokenize(&tokenize(t, &env).unwrap(), &env).unwrap(), t);
            for tr in t.real() {
                let o = env.step(tr.s, tr.a).unwrap();
                prop_assert_eq!((o.next_state, o.reward), (tr.s_next, tr.r));
            }
        }
        let ds = TrajectoryDataset { env_name: "gridworld7".into(), config_hash: "h".into(), trajectories };
        let text = dataset_to_string(&ds);
        prop_assert_eq!(parse_dataset(&text, "mem", &env).unwrap(), ds);
    }

    #[test]
    fn w1_is_a_metric(
        a in prop::collection::vec(0.01f64..1.0, 6),
        b in prop::collection::vec(0.01f64..1.0, 6),
        c in prop::collection::vec(0.01f64..1.0, 6),
    ) {
        let (p, q, r) = (simplex(&a), simplex(&b), simplex(&c));
        let pq = wasserstein1(&p, &q).unwrap();
        prop_assert!(wasserstein1(&p, &p).unwrap().abs() < 1e-9);
        prop_assert!((pq - wasserstein1(&q, &p).unwrap()).abs() < 1e-12);
        prop_assert!(pq <= wasserstein1(&p, &r).unwrap() + wasserstein1(&r, &q).unwrap() + 1e-12);
        if pq < 1e-9 {
            for (x, y) in p.probs.iter().zip(&q.probs) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn data_embedding_is_on_the_simplex(rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 1..12)) {
        prop_assume!(rows.iter().flatten().any(|x| x.abs() > 1e-6));
        if let Ok(d) = data_embedding(&rows) {
            prop_assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(d.probs.iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }

    #[test]
    fn complements_partition_the_indices(labels in prop::collection::vec(-1i64..4, 2..30)) {
        let k = 4;
        prop_assume!((0..k).all(|j| labels.contains(&j)));
        let a = ClusterAssignment { labels: labels.clone(), k: k as usize, centroids: None };
        let sets = complementary_sets(&a).unwrap();
        prop_assert_eq!(sets.len(), k as usize + 1);
        for set in &sets[1..] {
            let j = set.removed_cluster.unwrap();
            let mut all: Vec<usize> = set.trajectory_indices.clone();
            all.extend(a.members(j));
            all.sort_unstable();
            prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn clusterings_give_valid_labels(pts in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 2), 4..40), seed in 0u64..100) {
        let cfg = XMeansConfig { k_max: 6, center_seed: seed, ..XMeansConfig::default() };
        let x = xmeans(&pts, &cfg).unwrap();
        labels_valid(&x, pts.len(), false);
        prop_assert_eq!(&xmeans(&pts, &cfg).unwrap(), &x);
        let d = dbscan(&pts, &DbscanConfig { eps: 2.0, min_pts: 3 }).unwrap();
        labels_valid(&d, pts.len(), true);
        let mut rev = pts.clone();
        rev.reverse();
        let mut back = dbscan(&rev, &DbscanConfig { eps: 2.0, min_pts: 3 }).unwrap().labels;
        back.reverse();
        prop_assert_eq!(back, d.labels);
    }

    #[test]
    fn mean_pooling_recovers_bounded_hidden_states(tokens in prop::collection::vec(0usize..8, 1..8), seed in 0u64..50) {
        let p = init_params(8, 4, 3, seed).unwrap();
        let full = embed_trajectory(&p, &tokens).unwrap();
        prop_assert_eq!(&full, &embed_trajectory(&p, &tokens).unwrap());
        prop_assert!(reconstruction_loss(&p, &tokens).unwrap() >= 0.0);
        let mut prev = vec![0.0; 4];
        for n in 1..=tokens.len() {
            let e = embed_trajectory(&p, &tokens[..n]).unwrap();
            for (x, y) in e.iter().zip(&prev) {
                let h = n as f64 * x - (n as f64 - 1.0) * y;
                prop_assert!(h.abs() < 1.0 + 1e-9);
            }
            prev = e;
        }
    }

    #[test]
    fn distance_bins_partition_and_pass_through_is_zero(d in 0.0f64..30.0, seed in 0u64..1000) {
        let bin = bin_of(d);
        let edges = [0.0, 3.0, 6.0, 9.0, f64::INFINITY];
        prop_assert!(edges[bin] <= d && d < edges[bin + 1]);
        let env = builtin_env("gridworld7").unwrap();
        let t = random_walk(&env, seed, 30);
        for s in env.decision_states() {
            let v = state_trajectory_distance(&env, s, &t, DistanceMode::PassThroughZero).unwrap().value;
            prop_assert_eq!(v == 0.0, t.visited().contains(&s));
        }
    }

    #[test]
    fn purity_is_bounded(labels in prop::collection::vec(0i64..3, 3..15), seed in 0u64..1000) {
        prop_assume!((0..3).all(|j| labels.contains(&j)));
        let env = builtin_env("gridworld7").unwrap();
        let trajectories: Vec<_> = (0..labels.len()).map(|i| random_walk(&env, seed * 100 + i as u64, 30)).collect();
        for t in &trajectories {
            let l = classify_behavior(t, &env);
            let n = [BehaviorLabel::FallingIntoLava, BehaviorLabel::GoalTopRight, BehaviorLabel::MidGridJourney, BehaviorLabel::None]
                .iter()
                .filter(|&&x| x == l)
                .count();
            prop_assert_eq!(n, 1);
        }
        let ds = TrajectoryDataset { env_name: "gridworld7".into(), config_hash: String::new(), trajectories };
        let a = ClusterAssignment { labels, k: 3, centroids: None };
        for b in cluster_behavior_purity(&env, &ds, &a).values() {
            prop_assert!((0.0..=1.0).contains(&b.purity));
            if b.size == 1 {
                prop_assert_eq!(b.purity, 1.0);
                prop_assert!(b.uniform_length);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn online_training_is_seed_deterministic(seed in 0u64..1000) {
        let env = builtin_env("gridworld7").unwrap();
        let cfg = TrainConfig { episodes: 10, seed, ..TrainConfig::default() };
        let a = train_online(&env, &cfg).unwrap();
        let b = train_online(&env, &cfg).unwrap();
        prop_assert_eq!(a.policy, b.policy);
        prop_assert_eq!(a.episode_lengths, b.episode_lengths);
    }

    #[test]
    fn offline_sweeps_contract(seed in 0u64..1000) {
        let env = builtin_env("gridworld7").unwrap();
        let data: Vec<_> = (0..6).map(|i| random_walk(&env, seed * 10 + i, 60)).collect();
        let cfg = |n| TrainConfig { offline_sweeps: n, offline_tol: 0.0, seed, ..TrainConfig::default() };
        let a = train_offline(&env, &data, &cfg(400)).unwrap();
        let b = train_offline(&env, &data, &cfg(401)).unwrap();
        let moved = a.q.iter().flatten().zip(b.q.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(moved < 1e-6, "moved {}", moved);
    }

    #[test]
    fn generation_is_deterministic_and_consistent(seed in 0u64..1000) {
        let env = builtin_env("gridworld7").unwrap();
        let cfg = GenConfig {
            n_traj: 4,
            train: TrainConfig { episodes: 8, ..TrainConfig::default() },
            ..GenConfig::default()
        };
        let a = generate_dataset(&env, &cfg, seed, Exec::Sequential).unwrap();
        let b = generate_dataset(&env, &cfg, seed, Exec::Parallel).unwrap();
        prop_assert_eq!(dataset_to_string(&a), dataset_to_string(&b));
        for t in &a.trajectories {
            for tr in t.real() {
                let o = env.step(tr.s, tr.a).unwrap();
                prop_assert_eq!((o.next_state, o.reward), (tr.s_next, tr.r));
            }
        }
    }

    #[test]
    fn attribution_is_consistent_with_contrast(seed in 0u64..1000) {
        let env = builtin_env("gridworld7").unwrap();
        let data: Vec<_> = (0..9).map(|i| random_walk(&env, seed * 10 + i, 60)).collect();
        let a = ClusterAssignment { labels: (0..9).map(|i| i % 3).collect(), k: 3, centroids: None };
        let cfg = TrainConfig { seed, ..TrainConfig::default() };
        let original = train_offline(&env, &data, &cfg).unwrap();
        let clusters: BTreeMap<i64, _> = (0..3)
            .map(|j| {
                let keep: Vec<_> = data.iter().enumerate().filter(|(i, _)| a.labels[*i] != j).map(|(_, t)| t).collect();
                (j, train_offline(&env, keep, &cfg).unwrap())
            })
            .collect();
        let w: BTreeMap<i64, f64> = (0..3).map(|j| (j, 0.1 * j as f64)).collect();
        let eval = env.decision_states();
        let policies = ExplanationPolicies { original: original.clone(), clusters: clusters.clone() };
        let m = compute_metrics(&policies, &w, &a, &eval, env.start()).unwrap();
        for row in m.cluster_rows() {
            let j = row.cluster.unwrap();
            let hits = m.attributions.iter().filter(|r| r.candidate_clusters.contains(&j)).count();
            prop_assert!((row.action_contrast - hits as f64 / eval.len() as f64).abs() < 1e-12);
        }
        let same: BTreeMap<i64, _> = (0..3).map(|j| (j, original.clone())).collect();
        for &s in &eval {
            prop_assert_eq!(attribute(s, &original, &same, &w, &a).attributed_cluster, None);
        }
    }

    #[test]
    fn nested_goal_data_is_monotone(seed in 0u64..1000, cut in 1usize..6) {
        let env = builtin_env("gridworld7").unwrap();
        let agent = train_online(&env, &TrainConfig { episodes: 40, seed, ..TrainConfig::default() }).unwrap();
        let mut r = trajattr::rng::stream(seed, "nested", 0);
        let data: Vec<_> = (0..8)
            .map(|_| trajattr::dynaq::perform(&env, &agent.policy, 60, 0.2, &mut r).unwrap())
            .filter(|t| t.outcome() == trajattr::trajstore::Outcome::Goal)
            .collect();
        prop_assume!(data.len() > cut);
        let cfg = TrainConfig { offline_init: QInit::Zero, seed, ..TrainConfig::default() };
        let full = train_offline(&env, &data, &cfg).unwrap();
        let big = train_offline(&env, &data[..cut + 1], &cfg).unwrap();
        let small = train_offline(&env, &data[..cut], &cfg).unwrap();
        let dq = |p: &trajattr::dynaq::QTablePolicy| {
            env.decision_states()
                .iter()
                .map(|&s| {
                    let a = full.greedy(s).code();
                    (full.q[s][a] - p.q[s][a]).abs()
                })
                .sum::<f64>()
        };
        prop_assert!(dq(&big) <= dq(&small) + 1e-9);
        prop_assert!(isv(&full, env.start()) + 1e-9 >= isv(&big, env.start()));
        prop_assert!(isv(&big, env.start()) + 1e-9 >= isv(&small, env.start()));
    }
}
