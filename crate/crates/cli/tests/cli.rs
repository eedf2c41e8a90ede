use std::path::Path;
use std::process::{Command, Output};

use needforge::agent::{case_studies, case_study_taxonomy};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_needforge"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_lists_subcommands() {
    let o = run(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["curate", "gen-world", "train", "eval", "infer", "score", "stats"] {
        assert!(text.contains(sub), "missing {sub} in\n{text}");
    }
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_is_usage_error() {
    assert_eq!(run(&["stats", "--bogus"]).status.code(), Some(2));
}

#[test]
fn missing_file_is_runtime_error() {
    let o = run(&["train", "--world", "missing.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("file not found"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.ini");
    std::fs::write(&cfg, "[grpo]\nlearning_rate = 0.1\nwobble = 2\n").unwrap();
    let world = dir.path().join("world.json");
    assert!(run(&["gen-world", "--out", p(&world)]).status.success());
    let o = run(&["--config", p(&cfg), "train", "--world", p(&world), "--steps", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("wobble"), "{}", stderr(&o));
}

#[test]
fn stats_from_counts() {
    let o = run(&["stats", "--counts", "10302,422,263437"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((v["avg_seq_len"].as_f64().unwrap() - 25.57).abs() < 0.005);
    assert!((v["sparsity"].as_f64().unwrap() - 0.9394).abs() < 0.00005);
}

/// gen-world → curate → stats → train → eval, each twice with the same
/// seed to check byte-identical outputs.
#[test]
fn end_to_end_pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("run.ini");
    std::fs::write(
        &cfg,
        "[world]\nn_users = 60\nseq_min = 2\nseq_max = 12\n\
         [grpo]\nsteps = 3\nprompts_per_step = 2\ngroup_size = 4\nlearning_rate = 0.5\n\
         [curriculum]\nprobe_size = 32\n\
         [curation]\nk = 3\n",
    )
    .unwrap();
    let mut outputs = Vec::new();
    for round in 0..2 {
        let r = d.join(format!("r{round}"));
        std::fs::create_dir(&r).unwrap();
        let (world, users, tax) = (r.join("world.json"), r.join("users.jsonl"), r.join("tax.json"));
        let base = ["--config", p(&cfg), "--seed", "7", "--log-level", "warn"];
        let step = |extra: &[&str]| {
            let o = bin().args(base).args(extra).output().unwrap();
            assert!(o.status.success(), "{extra:?}: {}", stderr(&o));
            o
        };
        step(&["gen-world", "--out", p(&world), "--users", p(&users), "--taxonomy-out", p(&tax)]);
        let (curated, report) = (r.join("curated.jsonl"), r.join("clusters.json"));
        step(&["curate", "--input", p(&users), "--taxonomy", p(&tax), "--out", p(&curated), "--report", p(&report)]);
        let stats = step(&["stats", "--data", p(&users), "--taxonomy", p(&tax)]);
        let (ckpt, csv) = (r.join("ckpt"), r.join("stats.csv"));
        step(&["train", "--world", p(&world), "--out", p(&ckpt), "--stats", p(&csv)]);
        let eval = r.join("eval.json");
        step(&["eval", "--ckpt", p(&ckpt), "--data", p(&users), "--world", p(&world), "--report", p(&eval), "--slices", "cold_start,len=3..5"]);

        let header = std::fs::read_to_string(&csv).unwrap();
        assert!(header.starts_with("step,phase,mean_reward,entropy_need,entropy_cat,entropy_beh,kl,need_acc,cat_hr1"));
        assert_eq!(header.lines().count(), 1 + 9);
        assert!(ckpt.join("phase1_need.json").exists());
        let rep: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&eval).unwrap()).unwrap();
        assert!(rep["slices"]["cold_start"]["n_examples"].is_u64());
        assert!(rep["category"]["hr@1"].as_f64().unwrap() <= rep["category"]["hr@5"].as_f64().unwrap());

        let mut files = Vec::new();
        for f in [&world, &users, &curated, &report, &ckpt.join("checkpoint.json"), &csv, &eval] {
            files.push(std::fs::read(f).unwrap());
        }
        files.push(stats.stdout);
        outputs.push(files);
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn infer_and_score_with_stub_backend() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let tax = d.join("tax.json");
    std::fs::write(&tax, serde_json::to_string(&case_study_taxonomy()).unwrap()).unwrap();
    let fixtures = d.join("fixtures");
    std::fs::create_dir(&fixtures).unwrap();
    let cs = &case_studies()[2];
    std::fs::write(fixtures.join("case3.json"), serde_json::to_string(&cs.fixture).unwrap()).unwrap();

    let out = d.join("transcript.jsonl");
    let o = run(&[
        "infer", "--backend", "stub", "--fixtures", p(&fixtures), "--user", "case3", "--context", "22,workplace",
        "--taxonomy", p(&tax), "--out", p(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = std::fs::read_to_string(&out).unwrap();
    let t: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(t["steps"][1]["resolution"]["label"], "Economy Hotel");
    assert_eq!(t["steps"].as_array().unwrap().len(), 3);

    let truths = d.join("truths.jsonl");
    std::fs::write(
        &truths,
        format!("{}\n", serde_json::json!({"need": cs.expected_need, "category": cs.expected_category, "behavior": cs.expected_behavior})),
    )
    .unwrap();
    let scores = d.join("scores.json");
    let o = run(&["score", "--transcripts", p(&out), "--truths", p(&truths), "--taxonomy", p(&tax), "--out", p(&scores)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&scores).unwrap()).unwrap();
    assert_eq!(s["aggregate"]["need_accuracy"], 1.0);
    assert_eq!(s["aggregate"]["behavior_accuracy"], 1.0);

    // Misaligned truths are an error.
    std::fs::write(&truths, "").unwrap();
    let o = run(&["score", "--transcripts", p(&out), "--truths", p(&truths), "--taxonomy", p(&tax)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn infer_stub_without_fixture_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let tax = dir.path().join("tax.json");
    std::fs::write(&tax, serde_json::to_string(&case_study_taxonomy()).unwrap()).unwrap();
    let o = run(&[
        "infer", "--backend", "stub", "--fixtures", p(dir.path()), "--user", "nobody", "--context", "9,home",
        "--taxonomy", p(&tax), "--out", p(&dir.path().join("t.jsonl")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("file not found"), "{}", stderr(&o));
}

#[test]
fn bad_context_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let tax = dir.path().join("tax.json");
    std::fs::write(&tax, serde_json::to_string(&case_study_taxonomy()).unwrap()).unwrap();
    let o = run(&[
        "infer", "--backend", "stub", "--fixtures", p(dir.path()), "--user", "x", "--context", "25,home",
        "--taxonomy", p(&tax), "--out", p(&dir.path().join("t.jsonl")),
    ]);
    assert_eq!(o.status.code(), Some(1));
}
