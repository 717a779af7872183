mod support;

use pourl_core::consensus::{Choice, Decision};
use pourl_core::{fork_choice, TieBreakRule};
use support::chains::{menu, reward_chain};

#[test]
fn longest_chain_wins_regardless_of_rewards() {
    let oracle = menu(&[0.1, 5.0]);
    let long = reward_chain(&oracle, &[0.1; 11], "l");
    let short = reward_chain(&oracle, &[5.0; 8], "s");
    assert_eq!((long.len(), short.len()), (12, 9));
    for rule in [TieBreakRule::LastReward, TieBreakRule::SumReward] {
        assert_eq!(fork_choice(&short, &long, rule, &oracle).unwrap(), (Choice::Candidate, Decision::Longer));
        assert_eq!(fork_choice(&long, &short, rule, &oracle).unwrap(), (Choice::Local, Decision::Longer));
    }
}

#[test]
fn last_reward_prefers_higher_tip() {
    let oracle = menu(&[0.5, 0.9, 0.2]);
    let low = reward_chain(&oracle, &[0.2, 0.2, 0.5], "a");
    let high = reward_chain(&oracle, &[0.2, 0.2, 0.9], "b");
    assert_eq!(fork_choice(&low, &high, TieBreakRule::LastReward, &oracle).unwrap(), (Choice::Candidate, Decision::Reward));
    assert_eq!(fork_choice(&high, &low, TieBreakRule::LastReward, &oracle).unwrap(), (Choice::Local, Decision::Reward));
}

#[test]
fn sum_reward_prefers_higher_total() {
    let oracle = menu(&[0.5, 1.7, 1.1, 0.8]);
    // the 3.2 chain has the higher tip, so the rules disagree
    let a = reward_chain(&oracle, &[0.5, 0.5, 0.5, 1.7], "a");
    let b = reward_chain(&oracle, &[1.1, 1.1, 1.1, 0.8], "b");
    assert!((a.reward_sum() - 3.2).abs() < 1e-12);
    assert!((b.reward_sum() - 4.1).abs() < 1e-12);
    assert_eq!(fork_choice(&a, &b, TieBreakRule::SumReward, &oracle).unwrap(), (Choice::Candidate, Decision::Reward));
    assert_eq!(fork_choice(&b, &a, TieBreakRule::SumReward, &oracle).unwrap(), (Choice::Local, Decision::Reward));
    assert_eq!(fork_choice(&b, &a, TieBreakRule::LastReward, &oracle).unwrap(), (Choice::Candidate, Decision::Reward));
}
