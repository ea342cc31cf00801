use std::path::Path;
use std::process::{Command, Output};

use rflow::cli::{gradcheck_errors, load_config, read_corpus, RunConfig, GRADCHECK_TOL};
use rflow::synthworld::World;

const TINY: &str = "
[corpus]
utterances = 40
[ft_corpus]
utterances = 20
[model]
hidden = 6
depth = 1
[pretrain]
steps = 10
[finetune]
steps = 6
[sampler]
nfe = 4
[eval]
seeds = [0, 1]
[eval.set]
samples = 4
";

fn rflow(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rflow"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stderr_json(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    assert_eq!(text.trim().lines().count(), 1, "{text}");
    serde_json::from_str(text.trim()).unwrap()
}

#[test]
fn tiny_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let base = ["--config", "tiny.toml", "--out", "run"];
    for cmd in [&["gen-corpus"][..], &["filter"], &["pretrain"], &["finetune"], &["eval"], &["report"]] {
        let args: Vec<&str> = base.iter().chain(cmd).copied().collect();
        let o = rflow(dir.path(), &args);
        assert!(o.status.success(), "{cmd:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let run = dir.path().join("run");
    let csv = std::fs::read_to_string(run.join("eval/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(1).unwrap().ends_with(",8"));
    assert_eq!(csv, std::fs::read_to_string(run.join("report/report.csv")).unwrap());

    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("pretrain/run.json")).unwrap()).unwrap();
    let cfg = load_config(Some(&dir.path().join("tiny.toml")), &[], None).unwrap();
    assert_eq!(meta["config_sha256"], cfg.hash());
    assert_eq!(meta["command"], "pretrain");

    // the stored corpus reads back exactly
    let world = World::new(cfg.world, cfg.seed).unwrap();
    let back = read_corpus(&run.join("corpus"), "finetune", &world).unwrap();
    let fresh = rflow::synthworld::gen_corpus(&world, &cfg.ft_corpus, "ft", 2).unwrap();
    assert_eq!(back.len(), 20);
    for (a, b) in back.iter().zip(&fresh) {
        assert_eq!(a.features, b.features);
        assert_eq!(a.phonemes, b.phonemes);
        assert_eq!(a.phone_durations, b.phone_durations);
    }

    let kept = std::fs::read_to_string(run.join("filter/kept.txt")).unwrap();
    let stats: serde_json::Value =
        serde_json::from_str(std::fs::read_to_string(run.join("filter/stats.json")).unwrap().trim()).unwrap();
    assert_eq!(kept.lines().count() as u64, stats["kept"].as_u64().unwrap());
}

#[test]
fn typo_gets_a_suggestion_and_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = rflow(dir.path(), &["--set", "pretrain.stpes=3", "gradcheck"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr_json(&o);
    assert!(e["message"].as_str().unwrap().contains("did you mean `pretrain.steps`"), "{e}");

    std::fs::write(dir.path().join("bad.toml"), "[sampler]\nnfe = 31\n").unwrap();
    let o = rflow(dir.path(), &["--config", "bad.toml", "gradcheck"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "config");

    assert_eq!(rflow(dir.path(), &["no-such-command"]).status.code(), Some(2));
}

#[test]
fn missing_inputs_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["filter", "pretrain", "finetune", "report"] {
        let o = rflow(dir.path(), &["--out", "empty", cmd]);
        assert_eq!(o.status.code(), Some(3), "{cmd}");
        assert_eq!(stderr_json(&o)["error"], "data");
    }
}

#[test]
fn gradcheck_command_passes() {
    let (vf, dur) = gradcheck_errors(0).unwrap();
    assert!(vf < GRADCHECK_TOL && dur < GRADCHECK_TOL, "{vf} {dur}");
    let dir = tempfile::tempdir().unwrap();
    let o = rflow(dir.path(), &["--out", "g", "gradcheck"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["pass"], true);
}

#[test]
fn overrides_parse_as_toml_values() {
    let cfg = load_config(
        None,
        &[
            "pretrain.steps=123".into(),
            "eval.seeds=[4, 5]".into(),
            "sampler.solver=euler".into(),
            "pretrain.use_filtered=false".into(),
        ],
        Some(9),
    )
    .unwrap();
    assert_eq!(cfg.pretrain.steps, 123);
    assert_eq!(cfg.eval.seeds, vec![4, 5]);
    assert!(!cfg.pretrain.use_filtered);
    assert_eq!(cfg.seed, 9);
    assert!(load_config(None, &["pretrain.steps".into()], None).is_err());
    assert!(load_config(None, &["pretrain=3".into()], None).is_err());

    let d = RunConfig::default();
    let round: RunConfig = toml::from_str(&d.to_toml()).unwrap();
    assert_eq!(round, d);
    assert_eq!(d.hash(), round.hash());
}
