use std::path::Path;
use std::process::{Command, Output};

use solo9::dataset::{solo8_trot_fixture, MotionDataset};
use solo9::physics::log::{LogEncoding, TrajectoryLog};

fn solo9(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_solo9")).args(args).output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(solo9(&[]).status.code(), Some(1));
    assert_eq!(solo9(&["fly"]).status.code(), Some(1));
    let o = solo9(&["augment", "--in", "a", "--out", "b", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(solo9(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_two() {
    let d = tempfile::tempdir().unwrap();
    let o = solo9(&["augment", "--in", p(&d.path().join("missing.qmds")), "--out", p(&d.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    let o = solo9(&["evaluate", "--protocol", "nope", "--out", p(&d.path().join("r.json"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn augment_writes_nine_joint_dataset() {
    let d = tempfile::tempdir().unwrap();
    let src = d.path().join("solo8.mds");
    let dst = d.path().join("solo9.mds");
    let ds = solo8_trot_fixture();
    ds.save(&src, LogEncoding::Binary).unwrap();
    let o = solo9(&["augment", "--in", p(&src), "--out", p(&dst)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let aug = MotionDataset::load(&dst).unwrap();
    assert_eq!(aug.meta.dof, 9);
    assert_eq!(aug, solo9::dataset::augment_zero_waist(&ds, 4).unwrap());
    // a second pass is a runtime error, not a silent 10-joint dataset
    assert_eq!(solo9(&["augment", "--in", p(&dst), "--out", p(&src)]).status.code(), Some(2));
}

#[test]
fn replay_and_plot() {
    let d = tempfile::tempdir().unwrap();
    let src = d.path().join("solo8.mds");
    solo8_trot_fixture().save(&src, LogEncoding::Text).unwrap();
    let log = d.path().join("clip.log");
    let o = solo9(&["replay", "--dataset", p(&src), "--clip", "0", "--out", p(&log), "--text"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let l = TrajectoryLog::read(&mut std::io::BufReader::new(std::fs::File::open(&log).unwrap())).unwrap();
    assert_eq!(l.frames.len(), solo8_trot_fixture().clips[0].frames.len());
    assert!(l.channel("foot3_z").is_some());

    let svg = d.path().join("path.svg");
    assert!(solo9(&["plot", "--in", p(&log), "--out", p(&svg)]).status.success());
    assert!(std::fs::read_to_string(&svg).unwrap().contains("<svg"));

    let metrics = d.path().join("metrics.csv");
    std::fs::write(&metrics, "update,mean_reward,r_imitation\n0,0.1,0.5\n1,0.2,0.6\n2,0.25,0.55\n").unwrap();
    let svg = d.path().join("metrics.svg");
    assert!(solo9(&["plot", "--in", p(&metrics), "--out", p(&svg)]).status.success());
    assert!(std::fs::read_to_string(&svg).unwrap().contains("r_imitation"));
    let o = solo9(&["plot", "--in", p(&metrics), "--out", p(&svg), "--columns", "nope"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn evaluate_table_three_for_the_welded_variant() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("report.json");
    // shortened so the test stays quick; the protocol itself is untouched otherwise
    let o = solo9(&[
        "evaluate", "--protocol", "tableIII", "--variant", "solo9_fixed", "--out", p(&out),
        "--set", "n_episodes=2", "--set", "seed_groups=2", "--set", "duration_s=0.5",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(r["protocol"]["variant"], "solo9_fixed");
    let mags: Vec<f64> = r["conditions"].as_array().unwrap().iter().map(|c| c["push_magnitude"].as_f64().unwrap()).collect();
    assert_eq!(mags, vec![0.5, 0.7, 1.0]);
}

#[test]
fn training_twice_gives_identical_lineage() {
    let d = tempfile::tempdir().unwrap();
    let plan = d.path().join("tiny.toml");
    std::fs::write(
        &plan,
        "n_envs = 4\nsteps_per_update = 8\nexport_duration_s = 0.5\ntracking_gate = 10.0\n\
         [env.curriculum]\nenabled = false\n[env.sim]\nterrain_variants = 1\n\
         [ppo]\nactor_hidden = [16]\ncritic_hidden = [16]\n[disc]\nhidden = [16]\nbatch = 16\n\
         [[iteration]]\nw_imitation = 0.3\nupdates = 2\nexport_episodes = 2\n\
         [[iteration]]\nw_imitation = 0.6\nupdates = 2\nexport_episodes = 2\n",
    )
    .unwrap();
    let run = |dir: &str| {
        let out = d.path().join(dir);
        let o = solo9(&["train", "--plan", p(&plan), "--seed", "1", "--out", p(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read_to_string(out.join("lineage.json")).unwrap()
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    assert!(d.path().join("a/metrics.csv").exists());

    // the trained policy drives an evaluation
    let ck = d.path().join("a/checkpoints/iter_002.json");
    let report = d.path().join("steer.json");
    let o = solo9(&[
        "evaluate", "--protocol", "steering", "--policy", p(&ck), "--out", p(&report),
        "--set", "n_episodes=1", "--set", "seed_groups=2", "--set", "duration_s=0.5",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["controller"], p(&ck));
    assert_eq!(r["conditions"][0]["episodes"], 2);
}
