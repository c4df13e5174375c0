mod common;

use common::{closed_form_return, ToyMdp};
use proptest::collection::vec;
use proptest::prelude::*;
use rcm_core::chunking::{accumulated_rewards, action_credits};
use rcm_core::trainer::Adam;

fn unit_pairs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..=8).prop_flat_map(|n| (vec(0.0f64..=1.0, n), vec(0.0f64..=1.0, n)))
}

#[test]
fn hand_unrolled_example() {
    let r = accumulated_rewards(&[0.5, 1.0], &[0.2, 0.4]).unwrap();
    assert!((r[0] - 0.3).abs() < 1e-15 && (r[1] - 0.4).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn recursion_equals_closed_form((q, r) in unit_pairs()) {
        let ret = accumulated_rewards(&q, &r).unwrap();
        for c in 0..q.len() {
            let want = closed_form_return(&q[c..], &r[c..]);
            prop_assert!((ret[c] - want).abs() <= 1e-12, "{} vs {}", ret[c], want);
        }
    }

    #[test]
    fn returns_stay_in_unit_interval((q, r) in unit_pairs()) {
        for x in accumulated_rewards(&q, &r).unwrap() {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&x));
        }
    }

    #[test]
    fn returns_are_monotone_in_each_reward((q, r) in unit_pairs(), k in 0usize..8, bump in 0.0f64..1.0) {
        let k = k % q.len();
        let mut up = r.clone();
        up[k] = (up[k] + bump).min(1.0);
        let a = accumulated_rewards(&q, &r).unwrap();
        let b = accumulated_rewards(&q, &up).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(y >= x);
        }
    }

    #[test]
    fn certain_containment_absorbs((q, r) in unit_pairs(), k in 0usize..8, tail in vec(0.0f64..=1.0, 8)) {
        let k = k % q.len();
        let mut q = q;
        q[k] = 1.0;
        let before = accumulated_rewards(&q, &r).unwrap();
        prop_assert_eq!(before[k], r[k]);
        // Changing anything after the absorbing segment leaves earlier returns alone.
        let mut r2 = r.clone();
        let mut q2 = q.clone();
        for c in k + 1..q.len() {
            r2[c] = tail[c % 8];
            q2[c] = tail[(c + 3) % 8];
        }
        let after = accumulated_rewards(&q2, &r2).unwrap();
        prop_assert_eq!(&before[..=k], &after[..=k]);
    }

    #[test]
    fn credits_weight_next_return_by_reach((q, r) in unit_pairs()) {
        let ret = accumulated_rewards(&q, &r).unwrap();
        let credits = action_credits(&q, &ret).unwrap();
        prop_assert_eq!(*credits.last().unwrap(), 0.0);
        for c in 0..q.len() - 1 {
            let reach: f64 = q[..=c].iter().map(|x| 1.0 - x).product();
            prop_assert!((credits[c] - reach * ret[c + 1]).abs() < 1e-12);
        }
    }
}

#[test]
fn mismatched_lengths_are_rejected() {
    assert!(accumulated_rewards(&[0.5], &[0.1, 0.2]).is_err());
    assert!(action_credits(&[0.5], &[0.1, 0.2]).is_err());
}

#[test]
fn sampled_policy_gradient_is_unbiased() {
    let mut mdp = ToyMdp::new();
    let exact = mdp.exact_grad();
    let sampled = mdp.sampled_grad(200_000, 11);
    for s in 0..3 {
        for k in 0..2 {
            let rel = (sampled[s][k] - exact[s][k]).abs() / exact[s][k].abs();
            assert!(rel < 0.02, "state {s} action {k}: {} vs {}", sampled[s][k], exact[s][k]);
        }
    }
}

#[test]
fn expected_reward_rises_under_policy_gradient_ascent() {
    let mut mdp = ToyMdp::new();
    let mut adam = Adam::new(&mdp.store, 0.9, 0.999, 1e-8);
    let mut windows = Vec::new();
    let mut acc = 0.0;
    for step in 1..=1000 {
        mdp.sampled_grad(64, step as u64);
        adam.step(&mut mdp.store, step, 0.01);
        acc += mdp.exact_j();
        if step % 100 == 0 {
            windows.push(acc / 100.0);
            acc = 0.0;
        }
    }
    for w in windows.windows(2) {
        assert!(w[1] >= w[0], "{windows:?}");
    }
    let best = [(0, 0), (0, 1), (1, 0), (1, 1)]
        .into_iter()
        .map(|(a, b)| {
            let (q, r) = mdp.trajectory(a, b);
            closed_form_return(&q, &r)
        })
        .fold(0.0, f64::max);
    assert!(windows.last().unwrap() > &(0.9 * best), "{windows:?} best {best}");
}
