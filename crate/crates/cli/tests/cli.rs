use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mcnip(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcnip"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

const SMALL: [&str; 10] = ["--users", "200", "--groups", "2", "--items-per-group", "5", "--feature-dim", "6", "--ratings-per-user", "5"];

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_writes_every_item_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let args = ["synth", "--groups", "4", "--items-per-group", "20", "--users", "400", "--seed", "1"];
    let stdout = ok(&mcnip(&args, &a));
    assert!(stdout.contains("80 items"), "{stdout}");
    ok(&mcnip(&args, &b));
    for f in ["ratings.csv", "features.csv", "ideal_items.csv", "groups.json", "id_map.json"] {
        assert_eq!(fs::read(a.join("data").join(f)).unwrap(), fs::read(b.join("data").join(f)).unwrap(), "{f}");
    }
    let features = fs::read_to_string(a.join("data/features.csv")).unwrap();
    assert_eq!(features.lines().count(), 81);
}

#[test]
fn uneven_groups_are_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = mcnip(&["synth", "--groups", "3", "--users", "5000"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("3 groups"));
}

#[test]
fn missing_inputs_exit_with_four() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mcnip(&["train"], dir.path()).status.code(), Some(4));
    assert_eq!(mcnip(&["cover"], dir.path()).status.code(), Some(4));
    let o = mcnip(&["pipeline", "--config", "does-not-exist.toml"], dir.path());
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn stages_chain_through_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let mut synth = vec!["synth", "--seed", "2"];
    synth.extend(SMALL);
    ok(&mcnip(&synth, out));
    let stdout = ok(&mcnip(&["train", "--model", "lm", "--latent", "3", "--epochs", "3", "--seed", "2"], out));
    assert!(stdout.contains("lm model"));
    ok(&mcnip(&["sample", "--candidates", "300", "--seed", "2"], out));
    ok(&mcnip(&["cover", "--K", "2", "--tau", "0.5", "--seed", "2"], out));
    let ledger = out.join("ledger.csv");
    ok(&mcnip(&["eval", "--seed", "2", "--ledger", ledger.to_str().unwrap()], out));

    let history = json(&out.join("history.json"));
    assert_eq!(history["meta"]["seed"], 2);
    assert_eq!(history["epochs"].as_array().unwrap().len(), 4);
    let solution = json(&out.join("solution.json"));
    assert_eq!(solution["selected"].as_array().unwrap().len(), 2);
    let report = json(&out.join("report.json"));
    assert!(report["rmse_to_ideal"].as_f64().is_some());
    assert!(report["meta"]["config_hash"].as_str().unwrap().len() == 64);
    assert_eq!(fs::read_to_string(&ledger).unwrap().lines().count(), 2);
    let manifest = json(&out.join("run_meta.json"));
    for f in ["data/ratings.csv", "model.ckpt", "candidates.csv", "solution.json", "report.json"] {
        assert!(manifest["files"][f].is_string(), "{f} missing from manifest");
    }
}

#[test]
fn candidates_from_another_model_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let mut synth = vec!["synth"];
    synth.extend(SMALL);
    ok(&mcnip(&synth, out));
    ok(&mcnip(&["train", "--model", "lm", "--latent", "2", "--epochs", "1"], out));
    ok(&mcnip(&["sample", "--candidates", "50"], out));
    ok(&mcnip(&["train", "--model", "lm", "--latent", "2", "--epochs", "2"], out));
    let o = mcnip(&["cover", "--K", "1"], out);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("different model"));
}

#[test]
fn divergence_exits_with_three_and_keeps_history() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let mut synth = vec!["synth"];
    synth.extend(SMALL);
    ok(&mcnip(&synth, out));
    let o = mcnip(&["train", "--model", "lm", "--lr", "1e300", "--epochs", "5"], out);
    assert_eq!(o.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    let history = json(&out.join("history.json"));
    assert!(!history["epochs"].as_array().unwrap().is_empty());
}

#[test]
fn config_file_with_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        "seed = 4\n[synth]\nnum_users = 200\nnum_groups = 2\nitems_per_group = 5\nfeature_dim = 6\nratings_per_user = 5\n\
         [train]\nmodel = \"vae\"\nlatent_dim = 2\nhidden = [4]\nmax_epochs = 2\n[sample]\ncandidates = 200\n[cover]\nk = 1\n",
    )
    .unwrap();
    let out = dir.path().join("run");
    let cfg_arg = cfg.to_str().unwrap();
    ok(&mcnip(&["pipeline", "--config", cfg_arg, "--K", "3"], &out));
    let solution = json(&out.join("solution.json"));
    assert_eq!(solution["k"], 3);
    assert_eq!(solution["meta"]["seed"], 4);

    // equal configs give identical numeric outputs
    let again = dir.path().join("again");
    ok(&mcnip(&["pipeline", "--config", cfg_arg, "--K", "3"], &again));
    for f in ["report.json", "solution.json", "history.json", "candidates.csv", "model.ckpt"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn repeats_emit_ledger_rows_and_medians() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["pipeline", "--model", "lm", "--latent", "2", "--epochs", "2", "--candidates", "100", "--K", "2", "--repeats", "3"];
    args.extend(SMALL);
    let stdout = ok(&mcnip(&args, dir.path()));
    let agg: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(agg["runs"], 3);
    assert_eq!(fs::read_to_string(dir.path().join("ledger.csv")).unwrap().lines().count(), 4);
    assert!(json(&dir.path().join("aggregate.json"))["meta"]["version"].is_string());
}

#[test]
fn bad_flag_values_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mcnip(&["train", "--model", "forest"], dir.path()).status.code(), Some(2));
    assert_eq!(mcnip(&["cover", "--tau", "1.5"], dir.path()).status.code(), Some(2));
}
