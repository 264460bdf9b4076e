use std::process::Command;

use rbvla_cli::run;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rbvla"))
}

#[test]
fn gen_data_writes_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.bin");
    let code = run([
        "rbvla",
        "gen-data",
        "--task",
        "ppN",
        "--episodes",
        "10",
        "--seed",
        "7",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    assert!(out.exists());
}

#[test]
fn policy_without_belief_is_a_dependency_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["train", "--stage", "policy", "--run-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("belief"), "{err}");
    assert!(err.contains("train --stage"), "{err}");
}

#[test]
fn help_everywhere_exits_zero() {
    for sub in [
        vec!["--help"],
        vec!["gen-data", "--help"],
        vec!["train", "--help"],
        vec!["eval", "--help"],
        vec!["analyze", "--help"],
        vec!["bench", "--help"],
        vec!["rollout", "--help"],
    ] {
        let out = bin().args(&sub).output().unwrap();
        assert_eq!(out.status.code(), Some(0), "{sub:?}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"), "{sub:?}");
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(["rbvla", "gen-data", "--bogus"]), 1);
    assert_eq!(run(["rbvla", "frobnicate"]), 1);
    assert_eq!(run(["rbvla", "--set", "no_such_key=1", "bench", "memory"]), 1);
    assert_eq!(run(["rbvla", "train", "--stage", "belief", "--ablation", "xyz"]), 1);
}

#[test]
fn belief_stage_for_a_beliefless_variant_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let rd = dir.path().to_str().unwrap();
    let small = ["--set", "episodes=4", "--set", "warmstart_iters=1", "--set", "horizon=60"];
    assert_eq!(run([&["rbvla", "--run-dir", rd, "gen-data"][..], &small[..]].concat()), 0);
    assert_eq!(run([&["rbvla", "--run-dir", rd, "train", "--stage", "warmstart"][..], &small[..]].concat()), 0);
    assert_eq!(
        run([&["rbvla", "--run-dir", rd, "train", "--stage", "belief", "--ablation", "fff"][..], &small[..]].concat()),
        1
    );
}

#[test]
fn expert_eval_and_memory_bench_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let rd = dir.path().to_str().unwrap();
    let dims = ["--set", "d_f=8", "--set", "d_b=8", "--set", "d_z=4"];
    assert_eq!(run([&["rbvla", "--run-dir", rd, "eval", "--variant", "expert", "--episodes", "3"][..], &dims[..]].concat()), 0);
    assert!(dir.path().join("reports/eval-ppN-expert.txt").exists());
    assert!(dir.path().join("reports/eval-ppN-expert-episodes.csv").exists());
    assert_eq!(run([&["rbvla", "--run-dir", rd, "bench", "memory"][..], &dims[..]].concat()), 0);
    let text = std::fs::read_to_string(dir.path().join("reports/memory-ratios.csv")).unwrap();
    assert!(text.starts_with("policy,ctx1,ctx2,ctx4,ctx8\n"));
    assert!(text.contains("belief_recursive,1.0,1.0,1.0,1.0"));
    assert!(dir.path().join("reports/memory.svg").exists());
}

#[test]
fn rollout_frames_are_png() {
    let dir = tempfile::tempdir().unwrap();
    let frames = vec![
        rbvla::simenv::Observation {
            image: vec![128; 32 * 32 * 3],
            proprio: [0.0; 6],
        };
        2
    ];
    rbvla_cli::write_frames(dir.path(), &frames, 2).unwrap();
    let img = image::open(dir.path().join("frame_00001.png")).unwrap();
    assert_eq!((img.width(), img.height()), (64, 64));
}
