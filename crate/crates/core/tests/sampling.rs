mod common;

use alignlab::mdp::{State, TokenMdp};
use alignlab::pipeline::{bt_label, reward_accuracy, PreferenceTriple};
use alignlab::policy::{sample_index, PolicyRole, TabularPolicy};
use alignlab::seed;
use common::logistic;
use std::collections::BTreeMap;

const DRAWS: usize = 100_000;

fn within_three_sigma(count: usize, p: f64) -> bool {
    let n = DRAWS as f64;
    let sd = (p * (1.0 - p) / n).sqrt();
    (count as f64 / n - p).abs() <= 3.0 * sd
}

#[test]
fn sampled_first_tokens_match_distribution() {
    let mdp = TokenMdp::new(4, 0, 3, vec![vec![2]]).unwrap();
    let s = State::new(&[2], &[]);
    let mut logits = BTreeMap::new();
    logits.insert(s.clone(), vec![0.3, -1.0, 1.2, 0.0]);
    let policy = TabularPolicy::from_logits(4, PolicyRole::Student, logits).unwrap();
    let probs = policy.action_distribution(&s);
    let mut rng = seed::stream(11, "mc");
    let mut counts = [0usize; 4];
    for _ in 0..DRAWS {
        counts[policy.sample_response(&mdp, &[2], &mut rng).actions[0]] += 1;
    }
    let mut direct = [0usize; 4];
    for _ in 0..DRAWS {
        direct[sample_index(&probs, &mut rng)] += 1;
    }
    for a in 0..4 {
        assert!(
            within_three_sigma(counts[a], probs[a]),
            "action {a}: {} vs {}",
            counts[a],
            probs[a]
        );
        assert!(
            within_three_sigma(direct[a], probs[a]),
            "action {a}: {} vs {}",
            direct[a],
            probs[a]
        );
    }
}

#[test]
fn bradley_terry_rate_at_margin_two() {
    let p = logistic(2.0);
    assert!((p - 0.88080).abs() < 1e-5);
    let mut rng = seed::stream(5, "bt");
    let wins = (0..DRAWS).filter(|_| bt_label(0.5, -1.5, &mut rng)).count();
    assert!(within_three_sigma(wins, p), "{wins}");
}

#[test]
fn uniform_policy_accuracy_is_one_half_on_equal_lengths() {
    let policy = TabularPolicy::uniform(4, PolicyRole::Student);
    let pairs: Vec<PreferenceTriple> = (1..4)
        .map(|a| PreferenceTriple::new(vec![1], vec![a, 0], vec![0, a]).unwrap())
        .collect();
    assert_eq!(reward_accuracy(&policy, &pairs), 0.5);
}
