use super::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_cfg() -> PpoConfig {
    PpoConfig {
        actor_hidden: vec![32, 32],
        critic_hidden: vec![32, 32],
        activation: Activation::Tanh,
        ..Default::default()
    }
}

fn setup(seed: u64, n: usize) -> (Policy, PendulumEnv, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let env = PendulumEnv::new(n, seed);
    let p = Policy::new(&small_cfg(), 3, 3, 1, &mut rng);
    (p, env, rng)
}

#[test]
fn gae_three_step_hand_oracle() {
    // one env, done after step 1
    let r = [1.0, 2.0, 3.0];
    let v = [0.5, 1.0, 1.5];
    let d = [false, true, false];
    let (g, l) = (0.9, 0.8);
    let (adv, ret) = compute_advantages(&r, &v, &d, &[2.0], 1, g, l);
    let d2 = 3.0 + 0.9 * 2.0 - 1.5;
    let d1 = 2.0 - 1.0;
    let d0 = 1.0 + 0.9 * 1.0 - 0.5;
    let a2 = d2;
    let a1 = d1;
    let a0 = d0 + g * l * a1;
    assert_eq!(adv, vec![a0, a1, a2]);
    assert_eq!(ret, vec![a0 + 0.5, a1 + 1.0, a2 + 1.5]);
}

#[test]
fn gae_limits() {
    let r = [0.3, -0.2, 0.7, 1.1, 0.0, 0.4];
    let v = [0.1, 0.2, -0.3, 0.4, 0.5, 0.6];
    let d = [false; 6];
    let last = [0.9, -0.4];
    let (a, _) = compute_advantages(&r, &v, &d, &last, 2, 0.0, 0.95);
    for i in 0..6 {
        assert_eq!(a[i], r[i] - v[i]);
    }
    let (a, _) = compute_advantages(&r, &v, &d, &last, 2, 0.9, 0.0);
    for i in 0..6 {
        let next = if i + 2 < 6 { v[i + 2] } else { last[i % 2] };
        assert!((a[i] - (r[i] + 0.9 * next - v[i])).abs() < 1e-15);
    }
}

#[test]
fn surrogate_clipping_scalar_cases() {
    let eps = 0.2;
    // ratio 1.5 with positive advantage: clipped, no gradient
    let (l, g, c) = clipped_surrogate(1.5f64.ln(), 0.0, 2.0, eps);
    assert!(c && g == 0.0);
    assert!((l + 1.2 * 2.0).abs() < 1e-12);
    // ratio 0.5 with positive advantage: unclipped branch is the minimum
    let (l, g, c) = clipped_surrogate(0.5f64.ln(), 0.0, 2.0, eps);
    assert!(!c);
    assert!((l + 1.0).abs() < 1e-12);
    assert!((g + 2.0 * 0.5).abs() < 1e-12);
    // ratio 0.5 with negative advantage: clipped at 0.8
    let (l, g, c) = clipped_surrogate(0.5f64.ln(), 0.0, -1.0, eps);
    assert!(c && g == 0.0);
    assert!((l - 0.8).abs() < 1e-12);
}

#[test]
fn collection_shapes_and_determinism() {
    let run = || {
        let (mut p, mut env, mut rng) = setup(4, 4);
        collect_rollouts(&mut p, &mut env, 16, SampleMode::Deterministic, true, 0.99, &mut rng).unwrap()
    };
    let a = run();
    assert_eq!(a.len(), 64);
    assert_eq!(a.actor_obs.ncols(), 64);
    assert_eq!(a, run());
    assert_eq!(a.actions, a.means);
}

#[test]
fn zero_advantage_leaves_actor_unchanged() {
    let (mut p, mut env, mut rng) = setup(5, 4);
    let mut buf = collect_rollouts(&mut p, &mut env, 16, SampleMode::Stochastic, true, 0.99, &mut rng).unwrap();
    buf.rewards = buf.values.clone();
    let mut ppo = Ppo::new(PpoConfig {
        gamma: 0.0,
        ..small_cfg()
    });
    let before = p.clone();
    let m = ppo.update(&mut p, &buf, &mut rng).unwrap();
    assert_eq!(p.actor, before.actor);
    assert_eq!(p.log_std, before.log_std);
    assert_ne!(p.critic, before.critic);
    assert!(m.kl.is_finite());
    assert_eq!(m.surrogate, 0.0);
}

#[test]
fn non_finite_update_restores_parameters() {
    let (mut p, mut env, mut rng) = setup(6, 2);
    let mut buf = collect_rollouts(&mut p, &mut env, 8, SampleMode::Stochastic, true, 0.99, &mut rng).unwrap();
    buf.rewards[3] = f64::NAN;
    let mut ppo = Ppo::new(small_cfg());
    let before = (p.clone(), ppo.clone());
    assert!(ppo.update(&mut p, &buf, &mut rng).is_err());
    assert_eq!(p, before.0);
    assert_eq!(ppo, before.1);
}

#[test]
fn update_reports_finite_metrics_and_bounded_log_std() {
    let (mut p, mut env, mut rng) = setup(7, 4);
    let mut ppo = Ppo::new(small_cfg());
    for _ in 0..3 {
        let buf = collect_rollouts(&mut p, &mut env, 16, SampleMode::Stochastic, true, 0.99, &mut rng).unwrap();
        let m = ppo.update(&mut p, &buf, &mut rng).unwrap();
        assert!(m.kl.is_finite() && m.kl >= -1e-12);
        assert!((0.0..=1.0).contains(&m.clip_fraction));
        assert!(m.value_loss.is_finite());
    }
    assert!(p.log_std.iter().all(|l| (-4.0..=1.0).contains(l)));
}

#[test]
fn checkpoint_round_trip() {
    let (p, _, _) = setup(8, 1);
    let mut ck = Checkpoint::default();
    p.to_checkpoint(&mut ck, "policy/");
    let back = Policy::from_checkpoint(&Checkpoint::from_json(&ck.to_json()).unwrap(), "policy/").unwrap();
    assert_eq!(back, p);
    assert!(Policy::from_checkpoint(&ck, "other/").is_err());
}

/// Marks every fifth step of env 0 as a failed simulation with garbage reward.
struct Poisoned(PendulumEnv, usize);

impl VecEnvironment for Poisoned {
    fn num_envs(&self) -> usize {
        self.0.num_envs()
    }
    fn actor_dim(&self) -> usize {
        3
    }
    fn critic_dim(&self) -> usize {
        3
    }
    fn action_dim(&self) -> usize {
        1
    }
    fn term_names(&self) -> Vec<String> {
        self.0.term_names()
    }
    fn observe(&self) -> (ActorBatch, CriticBatch) {
        self.0.observe()
    }
    fn step(&mut self, a: &DMatrix<f64>) -> Result<Vec<Transition>, PpoError> {
        let mut t = self.0.step(a)?;
        self.1 += 1;
        if self.1 % 5 == 0 {
            t[0].reward = f64::NAN;
            t[0].terms = vec![f64::NEG_INFINITY];
            t[0].excluded = true;
        }
        Ok(t)
    }
}

#[test]
fn excluded_transitions_cannot_poison_the_update() {
    let (mut p, env, mut rng) = setup(9, 3);
    let mut env = Poisoned(env, 0);
    let buf = collect_rollouts(&mut p, &mut env, 20, SampleMode::Stochastic, true, 0.99, &mut rng).unwrap();
    assert_eq!(buf.excluded.iter().filter(|x| **x).count(), 4);
    assert!(buf.rewards.iter().all(|r| r.is_finite()));
    assert!(buf.mean_terms()[0].1.is_finite());
    let mut ppo = Ppo::new(small_cfg());
    assert!(ppo.update(&mut p, &buf, &mut rng).unwrap().kl.is_finite());
}
