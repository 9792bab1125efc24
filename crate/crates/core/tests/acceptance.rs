//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.
//!
//! `cargo test --release -p solo9 --test acceptance -- --nocapture`

use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use solo9::coopt::{builtin_plan, run_plan, IterationPlan};
use solo9::dataset::{
    augment_zero_waist, drop_waist, extract_discriminator_obs, solo8_trot_fixture, MotionDataset, WAIST_INDEX,
};
use solo9::disc::{discriminator_loss, DiscConfig, Discriminator};
use solo9::env::default_pose;
use solo9::env::reward::{reward_angvel, reward_clearance, reward_slip, reward_smooth};
use solo9::eval::{builtin_protocol, evaluate, scripted_twist_log, steering_metrics, EvalProtocol, TurningRadius};
use solo9::nn::{backward, forward, input_gradient_norm, Activation, NetParams};
use solo9::physics::log::LogEncoding;
use solo9::physics::{ContactParams, FootKinematics, Mirror, Sim, Terrain, Vec3, DEFAULT_DT};
use solo9::ppo::{collect_rollouts, PendulumEnv, Policy, Ppo, PpoConfig, SampleMode, VecEnvironment};
use solo9::rollout::ZeroController;
use solo9::variant::Variant;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

// ---------------------------------------------------------------- 1

fn reward_kernels() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        // yaw-rate tracking, both modes
        let (v, w, c, s) = (u(-2.0, 2.0), u(-2.0, 2.0), u(0.1, 3.0), u(0.05, 1.0));
        let d = v - w;
        let oracle = c / (d / s).powi(2).exp();
        worst = worst.max(rel(reward_angvel(v, w, c, s, false), oracle));
        worst = worst.max(rel(reward_angvel(v, w, c, s, true), c * (d.abs() * d.abs()).exp()));

        let feet: [FootKinematics; 4] = std::array::from_fn(|_| FootKinematics {
            p_z: u(0.0, 0.2),
            v_xy: [u(-2.0, 2.0), u(-2.0, 2.0)],
            contact: u(0.0, 1.0) < 0.5,
        });
        // slip
        let c = u(-2.0, -0.01);
        let mut s = 0.0;
        for f in &feet {
            if f.contact {
                s += f.v_xy[0].hypot(f.v_xy[1]).powi(2);
            }
        }
        if s > 0.0 {
            worst = worst.max(rel(reward_slip(&feet, c), c * s));
        }
        // clearance
        let (pz, c) = (u(0.01, 0.1), u(-30.0, -0.1));
        let s: f64 = feet.iter().map(|f| ((f.p_z - pz).abs() * f.v_xy[0].hypot(f.v_xy[1])).powi(2)).sum();
        worst = worst.max(rel(reward_clearance(&feet, pz, c), c * s));
        // smoothness
        let a: Vec<f64> = (0..9).map(|_| u(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..9).map(|_| u(-1.0, 1.0)).collect();
        let c = u(-1.0, -0.01);
        let s = a.iter().zip(&b).fold(0.0, |acc, (x, y)| acc + (x - y).abs().powi(2));
        worst = worst.max(rel(reward_smooth(&a, &b, c), c * s));
    }
    let still = [FootKinematics { p_z: 0.0, v_xy: [0.0, 0.0], contact: true }; 4];
    let airborne = [FootKinematics { p_z: 0.1, v_xy: [0.3, 0.4], contact: false }; 4];
    let at_target = [FootKinematics { p_z: 0.05, v_xy: [1.0, -1.0], contact: true }; 4];
    let zeros = reward_angvel(0.3, 0.3, 1.5, 0.25, false) == 1.5
        && reward_angvel(0.3, 0.3, 1.5, 0.25, true) == 1.5
        && reward_slip(&airborne, -1.0) == 0.0
        && reward_slip(&still, -1.0) == 0.0
        && reward_clearance(&at_target, 0.05, -1.0) == 0.0
        && reward_clearance(&still, 0.05, -1.0) == 0.0
        && reward_smooth(&[0.2; 9], &[0.2; 9], -1.0) == 0.0;
    verdict(worst < 1e-12 && zeros, format!("max rel err {worst:.1e} over 4×1000 inputs, zero cases exact: {zeros}"))
}

// ---------------------------------------------------------------- 2

fn fd_params(n: &NetParams<f64>, f: &dyn Fn(&NetParams<f64>) -> f64) -> Vec<DMatrix<f64>> {
    let h = 1e-6;
    let mut out = Vec::new();
    for t in 0..n.tensors().len() {
        let (r, c) = n.tensors()[t].shape();
        let mut g = DMatrix::zeros(r, c);
        for i in 0..g.len() {
            let mut p = n.clone();
            p.tensors_mut()[t][i] += h;
            let mut m = n.clone();
            m.tensors_mut()[t][i] -= h;
            g[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

fn worst_gap(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> f64 {
    let mut w: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.iter().zip(y.iter()) {
            // entries below the difference noise floor are compared absolutely
            w = w.max((p - q).abs() / p.abs().max(q.abs()).max(1e-3));
        }
    }
    w
}

fn gradients() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for act in [Activation::Identity, Activation::Tanh, Activation::Elu, Activation::Relu] {
        let n = NetParams::new(&[4, 6, 5, 2], act, Activation::Tanh, 1.0, &mut rng);
        let x = DMatrix::from_fn(4, 7, |_, _| rng.random_range(-1.0..1.0));
        let dy = DMatrix::from_fn(2, 7, |_, _| rng.random_range(-1.0..1.0));
        let mut pass = forward(&n, &x).unwrap();
        let g = backward(&n, &mut pass, &dy).unwrap();
        let fd = fd_params(&n, &|p| p.eval(&x).unwrap().component_mul(&dy).sum());
        worst = worst.max(worst_gap(&g.params, &fd));
        // input gradient
        let mut fdx = DMatrix::zeros(4, 7);
        for i in 0..x.len() {
            let mut p = x.clone();
            p[i] += 1e-6;
            let mut m = x.clone();
            m[i] -= 1e-6;
            fdx[i] = (n.eval(&p).unwrap().component_mul(&dy).sum() - n.eval(&m).unwrap().component_mul(&dy).sum()) / 2e-6;
        }
        worst = worst.max(worst_gap(&[g.input.clone()], &[fdx]));
    }
    // full discriminator loss with the gradient penalty; smooth activations,
    // where second derivatives exist everywhere
    for (k, act) in [Activation::Tanh, Activation::Elu].into_iter().enumerate() {
        let n = NetParams::new(&[6, 8, 8, 1], act, Activation::Identity, 1.0, &mut ChaCha8Rng::seed_from_u64(10 + k as u64));
        let e = DMatrix::from_fn(6, 5, |_, _| rng.random_range(-1.0..1.0));
        let p = DMatrix::from_fn(6, 4, |_, _| rng.random_range(-1.0..1.0));
        let (_, g) = discriminator_loss(&n, &e, &p, 10.0).unwrap();
        let fd = fd_params(&n, &|q| discriminator_loss(q, &e, &p, 10.0).unwrap().0.total);
        worst = worst.max(worst_gap(&g, &fd));
    }
    verdict(worst < 1e-4, format!("max rel err {worst:.1e} (4 activations, input and parameter gradients, LSGAN + GP loss)"))
}

// ---------------------------------------------------------------- 3

fn physics() -> Verdict {
    let model = Arc::new(Variant::Solo9.model());
    let sim = Sim::new(model.clone(), Arc::new(Terrain::flat()), ContactParams::default());
    let q = default_pose(&model);
    let n = q.len();

    // free fall, tumbling
    let mut s = sim.state_at(Vec3::new(0.0, 0.0, 10.0), UnitQuaternion::from_euler_angles(0.3, -0.2, 0.5), &q);
    s.base_lin_vel = Vec3::new(0.4, -0.3, 1.0);
    s.base_ang_vel = Vec3::new(0.8, -0.5, 1.2);
    s.qdot = (0..n).map(|k| 1.5 * (k as f64 * 1.3).sin()).collect();
    let e0 = sim.energy(&s);
    let mut drift: f64 = 0.0;
    for _ in 0..(1.0 / DEFAULT_DT) as usize {
        s = sim.step(&s, &vec![0.0; n], DEFAULT_DT).unwrap().0;
        drift = drift.max((sim.energy(&s) - e0).abs() / e0.abs());
    }

    // standing under PD: deepest foot-sphere penetration
    let mut s = sim.standing_state(&q, 0.0, 0.0, 0.0);
    let mut pen: f64 = 0.0;
    for _ in 0..750 {
        let t: Vec<f64> = (0..n).map(|k| 5.0 * (q[k] - s.q[k]) - 0.2 * s.qdot[k]).collect();
        let (next, info) = sim.step(&s, &t, DEFAULT_DT).unwrap();
        for c in &info.contacts {
            if c.force.z > 0.0 {
                pen = pen.max(model.contact_radius - c.point.z);
            }
        }
        s = next;
    }

    // sagittal mirror of a waist-driven motion
    let mirror = Mirror::new(&model).unwrap();
    let w = model.waist_index().unwrap();
    let mut a = sim.standing_state(&q, 0.0, 0.0, 0.0);
    let mut b = mirror.state(&a);
    for i in 0..150 {
        let mut ta: Vec<f64> = (0..n).map(|k| 5.0 * (q[k] - a.q[k]) - 0.2 * a.qdot[k]).collect();
        if i < 60 {
            ta[w] = 1.5;
        }
        let tb = mirror.joints(&ta);
        a = sim.step(&a, &ta, DEFAULT_DT).unwrap().0;
        b = sim.step(&b, &tb, DEFAULT_DT).unwrap().0;
    }
    let m = mirror.state(&a);
    let sym = (m.base_pos - b.base_pos).norm()
        + (m.base_lin_vel - b.base_lin_vel).norm()
        + (m.base_ang_vel - b.base_ang_vel).norm()
        + (m.base_quat.coords - b.base_quat.coords).norm()
        + m.q.iter().zip(&b.q).map(|(x, y)| (x - y).abs()).sum::<f64>()
        + m.qdot.iter().zip(&b.qdot).map(|(x, y)| (x - y).abs()).sum::<f64>();
    let moved = a.q[w].abs() > 0.01;
    verdict(
        drift < 0.01 && pen < 0.005 && sym < 1e-9 && moved,
        format!("energy drift {:.3}% over 1 s, standing penetration {:.2} mm, mirror error {sym:.1e}", 100.0 * drift, 1e3 * pen),
    )
}

// ---------------------------------------------------------------- 4

fn dataset_pipeline() -> Verdict {
    let ds8 = solo8_trot_fixture();
    let ds9 = augment_zero_waist(&ds8, WAIST_INDEX).unwrap();
    let back = drop_waist(&ds9, WAIST_INDEX, &ds8.meta).unwrap();
    let round = back == ds8;
    let waist_zero = ds9.clips.iter().flat_map(|c| &c.frames).all(|f| f.q[WAIST_INDEX] == 0.0 && f.qdot[WAIST_INDEX] == 0.0);

    let f = ds9.clips[0].frames[3].clone();
    let obs = extract_discriminator_obs(&f).unwrap();
    let mut g = f.clone();
    g.base_pos = [5.0, -3.0, f.base_pos[2]];
    // extra yaw rate about the base's own vertical axis
    let up = f.rotation() * Vec3::z();
    g.ang_vel = (Vec3::from(f.ang_vel) + up * 2.5).into();
    let blind = extract_discriminator_obs(&g).unwrap();
    let ignores = obs.iter().zip(&blind).all(|(a, b)| (a - b).abs() < 1e-12);

    let dir = tempfile::tempdir().unwrap();
    let mut files = true;
    for enc in [LogEncoding::Binary, LogEncoding::Text] {
        let p = dir.path().join("ds");
        ds9.save(&p, enc).unwrap();
        files &= MotionDataset::load(&p).unwrap() == ds9;
    }
    verdict(
        round && waist_zero && obs.len() == 27 && ignores && files,
        format!("augment round trip {round}, obs dim {}, blind to base position and yaw rate {ignores}, file round trip {files}", obs.len()),
    )
}

// ---------------------------------------------------------------- 5

fn discriminator() -> Verdict {
    let dim = 8;
    let sample = |rng: &mut ChaCha8Rng, centre: f64, n: usize| DMatrix::from_fn(dim, n, |_, _| centre + rng.random_range(-0.5..0.5));
    let mut separated = 0;
    let mut scores = Vec::new();
    for seed in 0..5 {
        let cfg = DiscConfig { window: 1, hidden: vec![64, 64], ..Default::default() };
        let mut d = Discriminator::new(cfg, dim, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        for _ in 0..500 {
            let e = sample(&mut rng, 1.0, 128);
            let p = sample(&mut rng, -1.0, 128);
            d.update(&e, &p).unwrap();
        }
        let me = d.score(&sample(&mut rng, 1.0, 512)).unwrap().iter().sum::<f64>() / 512.0;
        let mp = d.score(&sample(&mut rng, -1.0, 512)).unwrap().iter().sum::<f64>() / 512.0;
        if me > 0.8 && mp < -0.8 {
            separated += 1;
        }
        scores.push(format!("{me:+.2}/{mp:+.2}"));
    }

    // same data, same init: the penalty must flatten D around expert samples
    let mut reduced = 0;
    for seed in 0..5 {
        let mut norms = [0.0; 2];
        for (k, lambda) in [0.0, 10.0].into_iter().enumerate() {
            let cfg = DiscConfig { window: 1, hidden: vec![64, 64], lambda_gp: lambda, ..Default::default() };
            let mut d = Discriminator::new(cfg, dim, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            for _ in 0..500 {
                let e = sample(&mut rng, 0.3, 128);
                let p = sample(&mut rng, -0.3, 128);
                d.update(&e, &p).unwrap();
            }
            let e = d.norm.normalize(&sample(&mut rng, 0.3, 512));
            let g = input_gradient_norm(&d.net, &e).unwrap();
            norms[k] = g.iter().sum::<f64>() / g.len() as f64;
        }
        if norms[1] < norms[0] {
            reduced += 1;
        }
    }
    verdict(
        separated >= 4 && reduced == 5,
        format!("separated {separated}/5 seeds (D expert/policy {}), penalty reduced expert gradient norm {reduced}/5", scores.join(" ")),
    )
}

// ---------------------------------------------------------------- 6

fn optimizer() -> Verdict {
    let mut ok = 0;
    let mut detail = Vec::new();
    for seed in 0..5 {
        let cfg = PpoConfig { actor_hidden: vec![32, 32], critic_hidden: vec![32, 32], activation: Activation::Tanh, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut env = PendulumEnv::new(16, seed);
        let mut policy = Policy::new(&cfg, env.actor_dim(), env.critic_dim(), env.action_dim(), &mut rng);
        let mut ppo = Ppo::new(cfg.clone());
        let mut returns = Vec::new();
        for _ in 0..200 {
            let buf = collect_rollouts(&mut policy, &mut env, 32, SampleMode::Stochastic, true, cfg.gamma, &mut rng).unwrap();
            returns.push(buf.episode_returns.clone());
            ppo.update(&mut policy, &buf, &mut rng).unwrap();
        }
        let mean = |s: &[Vec<f64>]| {
            let all: Vec<f64> = s.iter().flatten().copied().collect();
            all.iter().sum::<f64>() / all.len().max(1) as f64
        };
        let (first, last) = (mean(&returns[..10]), mean(&returns[190..]));
        if last >= first + 0.5 * first.abs() {
            ok += 1;
        }
        detail.push(format!("{first:.1}→{last:.1}"));
    }
    verdict(ok >= 4, format!("pendulum return improved ≥50% for {ok}/5 seeds ({})", detail.join(", ")))
}

// ---------------------------------------------------------------- 7

fn desk_plan() -> IterationPlan {
    IterationPlan::from_toml(builtin_plan("desk").unwrap(), &[]).unwrap()
}

/// Per-iteration mean of the `r_imitation` column.
fn stream_imitation(path: &std::path::Path, iterations: usize) -> Vec<f64> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let (it, ri) = (
        header.iter().position(|h| *h == "iteration").unwrap(),
        header.iter().position(|h| *h == "r_imitation").unwrap(),
    );
    let mut sum = vec![0.0; iterations];
    let mut n = vec![0usize; iterations];
    for l in lines {
        let v: Vec<&str> = l.split(',').collect();
        let k: usize = v[it].parse().unwrap();
        sum[k] += v[ri].parse::<f64>().unwrap();
        n[k] += 1;
    }
    sum.iter().zip(&n).map(|(s, n)| s / *n as f64).collect()
}

fn co_optimization() -> Verdict {
    let plan = desk_plan();
    let ds = solo8_trot_fixture();
    let mut monotone = 0;
    let mut reproducible = 0;
    let mut detail = Vec::new();
    for seed in 0..5 {
        let dir = tempfile::tempdir().unwrap();
        let a = run_plan(&plan, &ds, seed, Some(dir.path())).unwrap();
        let b = run_plan(&plan, &ds, seed, None).unwrap();
        let ri = stream_imitation(&dir.path().join("metrics.csv"), plan.iterations.len());
        let reported: Vec<f64> = a.reports.iter().map(|r| r.mean_imitation_reward).collect();
        assert!(ri.iter().zip(&reported).all(|(x, y)| (x - y).abs() < 1e-9), "report disagrees with the metrics stream");
        let complete = a.failure.is_none() && ri.len() == plan.iterations.len();
        if complete && ri.windows(2).all(|w| w[1] >= w[0]) {
            monotone += 1;
        }
        if a.hashes() == b.hashes() {
            reproducible += 1;
        }
        let ri: Vec<String> = ri.iter().map(|v| format!("{v:.3}")).collect();
        detail.push(format!("[{}]", ri.join(" ")));
    }
    verdict(
        monotone >= 4 && reproducible == 5,
        format!("r^I non-decreasing for {monotone}/5 seeds {}, lineage reproducible {reproducible}/5", detail.join(" ")),
    )
}

// ---------------------------------------------------------------- 8

fn orderings() -> Verdict {
    let variants = [Variant::Solo9, Variant::Solo9Fixed, Variant::Solo9Free];
    let ds = solo8_trot_fixture();
    let mut table = Vec::new();
    for v in variants {
        let mut plan = desk_plan();
        plan.variant = v;
        let res = run_plan(&plan, &ds, 0, None).unwrap();
        let policy = res.policy.expect("at least one trained iteration");
        // desk scale: 40 episodes in each of 5 seed groups per magnitude
        let over = ["n_episodes=40".to_string(), "log_episodes=0".to_string()];
        let mut p = EvalProtocol::from_toml(builtin_protocol("tableIII").unwrap(), &over).unwrap();
        p.variant = v;
        let r = evaluate(&policy, &p, v.name(), None).unwrap();
        table.push(r.conditions.iter().map(|c| c.survival_rate).collect::<Vec<f64>>());
    }
    let by_variant = (0..table[0].len()).all(|m| table[0][m] >= table[1][m] && table[1][m] >= table[2][m]);
    let by_magnitude = table.iter().all(|row| row.windows(2).all(|w| w[1] <= w[0]));
    let fmt = |r: &[f64]| r.iter().map(|s| format!("{s:.3}")).collect::<Vec<_>>().join("/");
    verdict(
        by_variant && by_magnitude,
        format!(
            "survival at 0.5/0.7/1.0 m/s: solo9 {}, fixed {}, free {}; variant order {by_variant}, magnitude order {by_magnitude}",
            fmt(&table[0]),
            fmt(&table[1]),
            fmt(&table[2])
        ),
    )
}

// ---------------------------------------------------------------- 9

fn steering() -> Verdict {
    let names: Vec<String> = Variant::Solo9.model().joints.iter().map(|j| j.name.clone()).collect();
    let mut worst: f64 = 0.0;
    for (v, w) in [(0.6, -0.4), (0.3, 0.25), (1.0, 1.5), (0.2, -0.05)] {
        let log = scripted_twist_log(&names, v, w, 0.02, 750, 0.22);
        match steering_metrics(&[&log], w, 2.0, 0.02).radius {
            TurningRadius::Radius(r) => worst = worst.max((r - v / w.abs()).abs()),
            _ => worst = f64::INFINITY,
        }
    }
    let p = EvalProtocol::from_toml(builtin_protocol("steering").unwrap(), &[]).unwrap();
    let constants = p.lin_vel == 0.6 && p.yaw_rates == [-0.4] && p.duration_s == 15.0;
    let r = evaluate(&ZeroController(Variant::Solo9.dof()), &p, "zero", None).unwrap();
    let ran = r.conditions.len() == 1 && r.conditions[0].episodes == p.n_episodes * p.seed_groups;
    verdict(
        worst < 1e-6 && constants && ran,
        format!("scripted radius error {worst:.1e} m; bundled protocol 0.6 m/s, -0.4 rad/s runs: {ran}"),
    )
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Verdict, Duration); 9] = [
        ("reward kernels", reward_kernels, Duration::from_secs(1)),
        ("gradients", gradients, Duration::from_secs(30)),
        ("physics sanity", physics, Duration::from_secs(60)),
        ("dataset pipeline", dataset_pipeline, Duration::from_secs(10)),
        ("discriminator", discriminator, Duration::from_secs(300)),
        ("optimizer", optimizer, Duration::from_secs(600)),
        ("co-optimization", co_optimization, Duration::from_secs(7200)),
        ("variant orderings", orderings, Duration::from_secs(7200)),
        ("steering metric", steering, Duration::from_secs(60)),
    ];
    let mut failed = Vec::new();
    for (i, (name, f, budget)) in criteria.into_iter().enumerate() {
        let t = Instant::now();
        let v = f();
        let dt = t.elapsed();
        let pass = v.pass && dt <= budget;
        println!(
            "criterion {}: {} {name}: {} [{:.1} s, budget {} s]",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            dt.as_secs_f64(),
            budget.as_secs()
        );
        if !pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
