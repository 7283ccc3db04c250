use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use proptest::prelude::*;

use cycle_reward::backend::{ChatMessage, MatchOn, ModelClient, Respond, ScriptRule, ScriptedBackend, TaskKind, TemplateRegistry};
use cycle_reward::cycle::{run_cycles, CycleConfig};
use cycle_reward::exec::Executor;
use cycle_reward::eval::{accuracy, consistency_ratio, EvalRow};
use cycle_reward::grpo::{advantages, group_and_normalize, pack_batches, RewardGroup, ZERO_VARIANCE_STD};
use cycle_reward::prep::{build_inconsistency_subset, inconsistent_count};
use cycle_reward::voting::{mode_vote, pooled_vote, vote_answers};
use cycle_reward::{
    Answer, ImageRef, MatcherPolicy, Modality, ModalityView, PipelineConfig, Query, QueryOrigin, Rollout,
    RolloutGroup, Sample, SamplingParams,
};

fn population_std(r: &[f64]) -> f64 {
    let n = r.len() as f64;
    let m = r.iter().sum::<f64>() / n;
    (r.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt()
}

fn rollout(raw: &str, modality: Modality, i: usize) -> Rollout {
    Rollout {
        answer: Answer::new(raw, &MatcherPolicy::default(), None),
        sample_id: "s".into(),
        view_modality: modality,
        query: Query {
            text: "q".into(),
            origin: QueryOrigin::Dataset,
        },
        rollout_index: i,
        sampling: SamplingParams::default(),
        backend_fingerprint: "p".into(),
    }
}

fn answer_pool() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["Paris", "paris", "London", "Rome", "12", "12.3", "40"]), 1..12)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

fn group(sid: usize, k: usize, rewards: Vec<f64>) -> RewardGroup {
    RewardGroup {
        sample_id: format!("s{sid:03}"),
        path_code: "TT".into(),
        modality: Modality::Text,
        prompt: vec![ChatMessage::user_text(format!("q{sid}"))],
        responses: (0..k).map(|j| format!("r{j}")).collect(),
        rewards,
    }
}

proptest! {
    #[test]
    fn advantages_are_centred_and_scaled(r in prop::collection::vec(0.0f64..=1.0, 2..=16)) {
        let a = advantages(&r);
        prop_assert_eq!(a.len(), r.len());
        if population_std(&r) < ZERO_VARIANCE_STD {
            prop_assert!(a.iter().all(|&x| x == 0.0));
        } else {
            prop_assert!(a.iter().sum::<f64>().abs() < 1e-9);
            prop_assert!((population_std(&a) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn advantages_follow_reward_order(r in prop::collection::vec(prop::sample::select(vec![0.0, 1.0]), 2..=16)) {
        let a = advantages(&r);
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        for (x, adv) in r.iter().zip(&a) {
            if *x > mean { prop_assert!(*adv > 0.0); }
            if *x < mean { prop_assert!(*adv < 0.0); }
        }
        for i in 0..r.len() {
            for j in 0..r.len() {
                if r[i] < r[j] { prop_assert!(a[i] < a[j]); }
            }
        }
    }

    #[test]
    fn advantages_ignore_reward_offset(r in prop::collection::vec(0.0f64..=1.0, 2..=16), c in -5.0f64..5.0) {
        let shifted: Vec<f64> = r.iter().map(|x| x + c).collect();
        for (x, y) in advantages(&r).iter().zip(advantages(&shifted)) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn vote_winner_has_the_largest_cluster(pool in answer_pool()) {
        let p = MatcherPolicy::default();
        let v = vote_answers(&pool, &p, None).unwrap();
        let winner = &pool[v.winner];
        let support = pool.iter().filter(|a| cycle_reward::matches(a, winner, &p, None)).count();
        prop_assert!(support >= v.support);
        // The winner is the earliest member of its cluster.
        prop_assert!(pool[..v.winner].iter().all(|a| !cycle_reward::matches(a, winner, &p, None)));
    }

    #[test]
    fn vote_support_is_order_free(pool in answer_pool(), seed in any::<u64>()) {
        let p = MatcherPolicy::default();
        let mut shuffled = pool.clone();
        let n = shuffled.len();
        for i in (1..n).rev() {
            shuffled.swap(i, (seed.rotate_left(i as u32) % (i as u64 + 1)) as usize);
        }
        let a = vote_answers(&pool, &p, None).unwrap();
        let b = vote_answers(&shuffled, &p, None).unwrap();
        prop_assert_eq!(a.support, b.support);
        prop_assert_eq!(a.tie_broken, b.tie_broken);
    }

    #[test]
    fn pooled_vote_is_a_vote_over_the_concatenation(text in answer_pool(), image in answer_pool()) {
        let p = MatcherPolicy::default();
        let t: Vec<Rollout> = text.iter().enumerate().map(|(i, a)| rollout(a, Modality::Text, i)).collect();
        let im: Vec<Rollout> = image.iter().enumerate().map(|(i, a)| rollout(a, Modality::Image, i)).collect();
        let pooled = pooled_vote(&RolloutGroup::new(t.clone()), &RolloutGroup::new(im.clone()), &p, None);
        let flat = mode_vote(&[t, im].concat(), &p, None);
        prop_assert_eq!(pooled.answer, flat.answer);
        prop_assert_eq!(pooled.support, flat.support);
        prop_assert_eq!(pooled.tie_broken, flat.tie_broken);
        prop_assert_eq!(pooled.total, text.len() + image.len());
    }

    #[test]
    fn consistency_ratio_is_order_free(
        preds in prop::collection::vec((answer_pool(), answer_pool()), 1..40),
    ) {
        let p = MatcherPolicy::default();
        let mut rows: Vec<EvalRow> = preds
            .iter()
            .enumerate()
            .map(|(i, (t, im))| EvalRow::from_predictions(&format!("r{i}"), "d", Some(&t[0]), Some(&im[0]), Some("Paris"), &p, None))
            .collect();
        let a = consistency_ratio(&rows).unwrap();
        let acc = accuracy(&rows, Modality::Image).unwrap();
        rows.reverse();
        prop_assert_eq!(a, consistency_ratio(&rows).unwrap());
        prop_assert_eq!(acc, accuracy(&rows, Modality::Image).unwrap());
        prop_assert!((0.0..=1.0).contains(&a.value));
        prop_assert_eq!(a.hits, rows.iter().filter(|r| r.agree == Some(true)).count());
    }

    #[test]
    fn inconsistent_count_is_the_ceiling(num in 0usize..=100, n in 1usize..5000) {
        let rho = num as f64 / 100.0;
        prop_assert_eq!(inconsistent_count(rho, n), (num * n).div_ceil(100));
    }

    #[test]
    fn subset_has_exact_mix(bad in 0usize..60, good in 0usize..60, n in 0usize..50, num in 0usize..=10, seed in any::<u64>()) {
        let p = MatcherPolicy::default();
        let rows: Vec<EvalRow> = (0..bad + good)
            .map(|i| {
                let image = if i < bad { "London" } else { "Paris" };
                EvalRow::from_predictions(&format!("r{i:03}"), "d", Some("Paris"), Some(image), None, &p, None)
            })
            .collect();
        let rho = num as f64 / 10.0;
        let want_bad = (num * n).div_ceil(10);
        match build_inconsistency_subset(&rows, rho, n, seed) {
            Ok(s) => {
                prop_assert_eq!(s.ids.len(), n);
                prop_assert_eq!(s.ids.iter().collect::<BTreeSet<_>>().len(), n);
                let picked_bad = s.ids.iter().filter(|id| id[1..].parse::<usize>().unwrap() < bad).count();
                prop_assert_eq!(picked_bad, want_bad);
            }
            Err(_) => prop_assert!(want_bad > bad || n - want_bad > good),
        }
    }

    #[test]
    fn packing_keeps_groups_whole(
        sizes in prop::collection::vec(2usize..=8, 1..80),
        batch_size in 8usize..64,
        seed in any::<u64>(),
    ) {
        let groups: Vec<RewardGroup> = sizes
            .iter()
            .enumerate()
            .map(|(i, &k)| group(i, k, (0..k).map(|j| (j % 2) as f64).collect()))
            .collect();
        let norm = group_and_normalize(&groups, 0.01);
        let batches = pack_batches(&norm.instances, batch_size, seed);
        let mut home: BTreeMap<String, usize> = BTreeMap::new();
        let mut total = 0;
        for (b, batch) in batches.iter().enumerate() {
            prop_assert!(!batch.is_empty() && batch.len() <= batch_size);
            for inst in batch {
                let owner = *home.entry(inst.group_id.clone()).or_insert(b);
                prop_assert_eq!(owner, b);
            }
            total += batch.len();
        }
        prop_assert_eq!(total, sizes.iter().sum::<usize>());
        prop_assert_eq!(batches, pack_batches(&norm.instances, batch_size, seed));
    }

    #[test]
    fn small_groups_are_set_aside(k in 0usize..2) {
        let norm = group_and_normalize(&[group(0, k, vec![1.0; k])], 0.01);
        prop_assert!(norm.instances.is_empty());
        prop_assert_eq!(norm.degenerate.len(), 1);
    }

    #[test]
    fn cycle_rewards_are_binary_and_consistency_is_their_conjunction(
        p_right in 0.0f64..=1.0,
        k in 1usize..6,
        n in 1usize..6,
        seed in any::<u64>(),
    ) {
        let forward = if p_right == 0.0 || p_right == 1.0 {
            Respond::Fixed(if p_right == 1.0 { "Paris" } else { "Rome" }.into())
        } else {
            Respond::Distribution(vec![("Paris".into(), p_right), ("Rome".into(), 1.0 - p_right)])
        };
        let rules = vec![
            ScriptRule::fixed(MatchOn::Task(TaskKind::Backward), None, "Which city?"),
            ScriptRule { match_on: MatchOn::Any, modality_filter: None, respond: forward },
        ];
        let client = ModelClient::new(Arc::new(ScriptedBackend::new(rules, seed).unwrap()));
        let samples: Vec<Sample> = (0..n)
            .map(|i| {
                let mut s = Sample::new(format!("s{i}"), "generic");
                s.text_view = Some(ModalityView::text("notes"));
                s.image_view = Some(ModalityView::image(ImageRef::Url(format!("https://img.invalid/{i}"))));
                s.candidate_answer = Some("paris".into());
                s
            })
            .collect();
        let config = PipelineConfig { rollouts_per_modality: k, cycle_config: CycleConfig::Mixed, ..PipelineConfig::default() };
        let out = run_cycles(&samples, &config, &client, &TemplateRegistry::builtin(), &Executor::sequential());
        prop_assert!(out.failures.is_empty());
        prop_assert_eq!(out.records.len(), 4 * n);
        for r in &out.records {
            prop_assert_eq!(r.rewards.len(), k);
            prop_assert!(r.rewards.iter().all(|&x| x <= 1));
            for (reward, ro) in r.rewards.iter().zip(&r.forward_group.rollouts) {
                prop_assert_eq!(*reward == 1, cycle_reward::matches(&ro.answer.raw, "paris", &config.matcher_policy, None));
            }
        }
        for c in &out.consistency {
            let all = out.records.iter().filter(|r| r.sample_id == c.sample_id).all(|r| r.rewards.iter().all(|&x| x == 1));
            prop_assert_eq!(c.all_paths_consistent, all);
        }
    }
}
