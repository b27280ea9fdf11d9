mod common;

use std::fs;
use std::path::Path;

use common::*;
use serde::{Deserialize, Serialize};
use treefield_core::TreeSpec;
use treefield_field::Hyper;
use treefield_pipeline::TrainConfig;

#[derive(Serialize, Deserialize, PartialEq, Debug)]
#[serde(deny_unknown_fields)]
struct Config {
    synth: TreeSpec,
    model: Hyper,
    train: TrainConfig,
}

fn small_config() -> Config {
    Config {
        synth: fixture_spec(),
        model: Hyper::toy(),
        train: TrainConfig {
            epochs: 1,
            batch_size: 2,
            n_s: 160,
            n_k: 40,
            q_r: 40,
            q_l: 30,
            q_s: 30,
            min_nodes: 6,
            ..TrainConfig::desk()
        },
    }
}

fn write_small_config(dir: &Path) -> String {
    let p = dir.join("small.toml");
    fs::write(&p, toml::to_string(&small_config()).unwrap()).unwrap();
    p.to_str().unwrap().to_string()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn bytes_of(root: &Path) -> Vec<(String, Vec<u8>)> {
    files_under(root)
        .into_iter()
        .map(|p| (p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn help_exits_zero() {
    let out = run(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("weak-acc"));
}

#[test]
fn unknown_subcommand_exits_two() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn missing_input_is_a_one_line_usage_error() {
    let out = run(&["eval", "--case", "/nonexistent/case", "--pred", "/nonexistent/pred", "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: no such directory"), "{err}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = toml::to_string(&small_config()).unwrap();
    text = text.replace("[train]\n", "[train]\nwarmup = 3\n");
    let p = dir.path().join("bad.toml");
    fs::write(&p, text).unwrap();
    let out = run(&["--config", p.to_str().unwrap(), "synth", "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warmup"));
}

#[test]
fn mismatched_class_counts_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.model.label_classes = 5;
    let p = dir.path().join("c.toml");
    fs::write(&p, toml::to_string(&cfg).unwrap()).unwrap();
    let out = run(&["--config", p.to_str().unwrap(), "synth", "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn shipped_presets_equal_the_code_presets() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let desk: Config = toml::from_str(&fs::read_to_string(root.join("desk.toml")).unwrap()).unwrap();
    assert_eq!(desk, Config { synth: TreeSpec::desk(), model: Hyper::desk(), train: TrainConfig::desk() });
    let paper: Config = toml::from_str(&fs::read_to_string(root.join("paper.toml")).unwrap()).unwrap();
    assert_eq!(paper.model, Hyper::paper());
    assert_eq!(paper.train, TrainConfig::paper());
    paper.synth.validate().unwrap();
    assert_eq!(paper.synth.class_count as usize, paper.model.label_classes);
    assert_eq!(paper.synth.segment_count as usize, paper.model.segment_classes);
    treefield_core::generate_case(&paper.synth).unwrap();
}

/// Set `TREEFIELD_BLESS=1` to rewrite the bundled fixture.
#[test]
fn bundled_fixture_matches_its_generator() {
    if std::env::var("TREEFIELD_BLESS").as_deref() == Ok("1") {
        let _ = fs::remove_dir_all(fixture_dir());
        write_fixture(&fixture_dir());
    }
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    assert_eq!(bytes_of(dir.path()), bytes_of(&fixture_dir()));
}

#[test]
fn eval_on_the_oracle_fixture_is_perfect_and_leaves_inputs_alone() {
    let before = bytes_of(&fixture_dir());
    let out = tempfile::tempdir().unwrap();
    let f = fixture_dir();
    ok(&[
        "eval",
        "--case",
        f.join("case").to_str().unwrap(),
        "--pred",
        f.join("pred").to_str().unwrap(),
        "--out",
        out.path().to_str().unwrap(),
    ]);
    let m = read_metrics(out.path());
    for key in ["cf1", "dmf1", "gdice", "dice_tree", "dice_skeleton", "dice_lung"] {
        assert_eq!(m[key], 1.0, "{key}");
    }
    assert_eq!(m["ncc"], 1);
    assert_eq!(bytes_of(&fixture_dir()), before);
}

#[test]
fn synth_and_corrupt_are_reproducible_under_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_small_config(dir.path());
    let go = |tag: &str, seed: &str| {
        let (s, c) = (dir.path().join(format!("s{tag}")), dir.path().join(format!("c{tag}")));
        ok(&["--config", &cfg, "--seed", seed, "synth", "--out", s.to_str().unwrap(), "--count", "2"]);
        ok(&["--config", &cfg, "corrupt", "--data", s.to_str().unwrap(), "--out", c.to_str().unwrap()]);
        (bytes_of(&s), bytes_of(&c))
    };
    let a = go("a", "5");
    let b = go("b", "5");
    let c = go("c", "6");
    assert_eq!(a, b);
    assert_ne!(a.0, c.0);
    assert!(a.1.iter().any(|(n, _)| n.ends_with("corrupted.vvol")));
}

#[test]
fn train_infer_eval_and_bench_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    let cfg = write_small_config(dir.path());
    ok(&["--config", &cfg, "synth", "--out", &d("synth"), "--count", "2"]);
    ok(&["--config", &cfg, "corrupt", "--data", &d("synth"), "--out", &d("data")]);
    ok(&["--config", &cfg, "train", "--data", &d("data"), "--out", &d("run"), "--fusion", "late"]);
    let history = fs::read_to_string(dir.path().join("run/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 2);
    assert!(fs::read_to_string(dir.path().join("run/config.toml")).unwrap().contains("fusion = \"late\""));

    let case = d("data/case_0000");
    let model = d("run/model.tfck");
    ok(&["--config", &cfg, "infer", "--model", &model, "--case", &case, "--out", &d("pred"), "--chunk", "100"]);
    for f in ["repaired_tree.vvol", "repair_mask.vvol", "labeled_tree.vvol", "segments.vvol", "timings.json"] {
        assert!(dir.path().join("pred").join(f).is_file(), "{f}");
    }
    ok(&["--config", &cfg, "eval", "--case", &case, "--pred", &d("pred"), "--out", &d("e1")]);
    ok(&["--config", &cfg, "eval", "--case", &case, "--model", &model, "--out", &d("e2")]);
    assert_eq!(read_metrics(&dir.path().join("e1")), read_metrics(&dir.path().join("e2")));

    let bench = d("bench.json");
    ok(&["--config", &cfg, "bench", "--out", &bench, "--model", &model]);
    let b: serde_json::Value = serde_json::from_str(&fs::read_to_string(&bench).unwrap()).unwrap();
    assert!(b["inference"]["total"].as_f64().unwrap() > 0.0);
}

#[test]
fn weak_acc_prints_a_row_per_case() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_small_config(dir.path());
    let out = ok(&["--config", &cfg, "weak-acc", "--count", "2", "--queries", "20000"]);
    assert_eq!(out.lines().count(), 4, "{out}");
    assert!(out.lines().last().unwrap().starts_with(" mean"));
}

#[test]
fn eval_rejects_an_uncorrupted_case() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_small_config(dir.path());
    let s = dir.path().join("s");
    ok(&["--config", &cfg, "synth", "--out", s.to_str().unwrap()]);
    let out = run(&[
        "--config",
        &cfg,
        "eval",
        "--case",
        s.join("case_0000").to_str().unwrap(),
        "--pred",
        s.to_str().unwrap(),
        "--out",
        dir.path().join("e").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not corrupted"));
}
