use levelk::levelk::{
    evaluate, level0_action, level0_policy_map, train_level_k, Action, EnvConfig, EnvState, RlConfig,
};
use levelk::policy::Policy;

fn sample(p: &Policy, rng: &mut dyn rand::RngCore) -> Action {
    let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    let mut acc = 0.0;
    for (i, q) in p.probs().iter().enumerate() {
        acc += q;
        if u < acc {
            return Action::from_index(i).unwrap();
        }
    }
    Action::from_index(p.len() - 1).unwrap()
}

#[test]
fn level1_brakes_behind_a_close_leader() {
    let env = EnvConfig::default();
    let out = train_level_k(&env, &level0_policy_map(&env), &RlConfig::default(), 1, 11).unwrap();
    let table = &out.table;
    // the most visited small-gap states with a closing leader
    let mut close: Vec<_> = table
        .values
        .keys()
        .copied()
        .filter(|&s| {
            let st = EnvState::from_id(s, &env).unwrap();
            st.front_gap == 0 && st.rel_speed == 0 && st.speed >= 2
        })
        .collect();
    close.sort_by_key(|s| std::cmp::Reverse(table.visits.get(s).copied().unwrap_or(0)));
    assert!(!close.is_empty(), "no small-gap states visited");
    let mut braking = 0;
    for s in close.iter().take(5) {
        let q = table.get(*s).unwrap();
        let brake = q[Action::Decelerate.index()].max(q[Action::HardBrake.index()]);
        if brake > q[Action::Accelerate.index()] {
            braking += 1;
        }
    }
    assert!(braking * 2 > close.len().min(5), "braking preferred in only {braking} of the visited close states");
}

#[test]
fn level1_outscores_level0_against_level0_traffic() {
    let env = EnvConfig::default();
    let rl = RlConfig::default();
    let opponents = level0_policy_map(&env);
    let seeds = 20;
    let (mut l0, mut l1) = (0.0, 0.0);
    for seed in 0..seeds {
        let table = train_level_k(&env, &opponents, &rl, 1, seed).unwrap().table;
        l1 += evaluate(&env, &opponents, &rl, 20, seed, |s, _| {
            table.greedy(s).unwrap_or_else(|| table.resolve(s, &env).map(|(id, _)| table.greedy(id).unwrap()).unwrap())
        })
        .unwrap();
        l0 += evaluate(&env, &opponents, &rl, 20, seed, |s, rng| {
            let st = EnvState::from_id(s, &env).unwrap();
            let p = Policy::smoothed_one_hot(Action::ALL.len(), level0_action(&st, &env.level0).index(), env.level0.epsilon);
            sample(&p, rng)
        })
        .unwrap();
    }
    let (l0, l1) = (l0 / seeds as f64, l1 / seeds as f64);
    assert!(l1 > l0, "level-1 mean reward {l1:.3} vs level-0 {l0:.3}");
}
