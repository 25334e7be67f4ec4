use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dbgp_cli::config::{key_listing, parse_override, provenance};
use dbgp_cli::{exit_code, resolve, RunConfig, EXIT_CONFIG, EXIT_DATA, EXIT_IO};
use dbgp_core::dbgp::ModelVariant;
use dbgp_core::Error;

const TINY: &str = r#"
seed = 4
variant = "BE"

[cohort]
n_patients = 400
n_codes = 30
positive_rate = 0.3
max_sequence_length = 48

[encoder]
max_sequence_length = 48
hidden_size = 8
n_layers = 1
n_heads = 2
intermediate_size = 8
pool_size_dense = 8
pool_size_gp = 4

[gp]
grid_size = 6
n_inducing = 8

[pretrain]
epochs = 1

[train]
epochs = 2
batch_size = 32
learning_rate = 3e-3

[eval]
samples = 4
repro_samples = 8
"#;

fn write_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p
}

fn dbgp(config: &Path, out: &Path, command: &str, sets: &[String]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dbgp"));
    cmd.arg(command).arg("--config").arg(config).arg("--out").arg(out).env("RUST_LOG", "warn");
    for s in sets {
        cmd.arg("--set").arg(s);
    }
    cmd.output().unwrap()
}

fn run_ok(config: &Path, out: &Path, command: &str, sets: &[String]) -> PathBuf {
    let o = dbgp(config, out, command, sets);
    assert!(o.status.success(), "{command}: {}", String::from_utf8_lossy(&o.stderr));
    PathBuf::from(String::from_utf8(o.stdout).unwrap().trim())
}

fn set_path(key: &str, p: &Path) -> String {
    format!("paths.{key}=\"{}\"", p.display())
}

#[test]
fn resolution_applies_layers_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let file = write_config(dir.path());
    let c = resolve(Some(&file), &["train.epochs=7".into(), "variant=kiss_gp".into()], None).unwrap();
    assert_eq!(c.train.epochs, 7);
    assert_eq!(c.variant, ModelVariant::KissGp);
    assert_eq!(c.encoder.hidden_size, 8);
    assert_eq!(c.gp.latent_dim, 2);
    assert_eq!((c.seed, c.cohort.seed, c.train.seed, c.pretrain.seed), (4, 4, 4, 4));
    let c = resolve(Some(&file), &["seed=9".into()], Some(11)).unwrap();
    assert_eq!((c.seed, c.cohort.seed), (11, 11));
    assert_eq!(resolve(None, &[], None).unwrap(), RunConfig::default());
}

#[test]
fn bad_configurations_are_config_errors() {
    let cases: [&[&str]; 6] = [
        &["nope=1"],
        &["train.seed=2"],
        &["train.epochs=\"many\""],
        &["encoder=3"],
        &["encoder.n_heads=7"],
        &["no_equals_sign"],
    ];
    for sets in cases {
        let sets: Vec<String> = sets.iter().map(|s| s.to_string()).collect();
        let err = resolve(None, &sets, None).unwrap_err();
        assert_eq!(exit_code(&err), EXIT_CONFIG, "{sets:?}: {err}");
    }
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    fs::write(&p, "[train]\nepochs = 1\nbogus = 2\n").unwrap();
    assert_eq!(exit_code(&resolve(Some(&p), &[], None).unwrap_err()), EXIT_CONFIG);
    assert!(matches!(resolve(Some(&dir.path().join("absent.toml")), &[], None), Err(Error::Io { .. })));
}

#[test]
fn overrides_parse_toml_values_with_string_fallback() {
    assert_eq!(parse_override("a.b=3").unwrap().1, toml::Value::Integer(3));
    assert_eq!(parse_override("a=[0.5, 0.6]").unwrap().1.as_array().unwrap().len(), 2);
    assert_eq!(parse_override("p=some/dir").unwrap().1, toml::Value::String("some/dir".into()));
}

#[test]
fn help_lists_every_key_with_default_and_provenance() {
    let listing = key_listing();
    let defaults = toml::Table::try_from(RunConfig::default()).unwrap();
    for (section, v) in &defaults {
        if let toml::Value::Table(t) = v {
            for k in t.keys().filter(|k| *k != "seed") {
                assert!(listing.contains(&format!("{section}.{k}")), "{section}.{k} missing");
            }
        }
    }
    assert!(listing.contains("[paper]") && listing.contains("[toolkit]"));
    assert_eq!(provenance("encoder.hidden_size"), "paper");
    assert_eq!(provenance("gp.grid_size"), "toolkit");
    let o = Command::new(env!("CARGO_BIN_EXE_dbgp")).arg("--help").output().unwrap();
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("train.learning_rate") && text.contains("eval.samples"));
}

#[test]
fn pipeline_runs_end_to_end_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("runs");
    let data = run_ok(&cfg, &out, "generate", &[]);
    let pre = run_ok(&cfg, &out, "pretrain", &[set_path("data", &data)]);
    let model = run_ok(&cfg, &out, "train", &[set_path("data", &data), set_path("pretrained", &pre)]);
    let preds = run_ok(&cfg, &out, "predict", &[set_path("data", &data), set_path("checkpoint", &model)]);
    let sets = [set_path("data", &data), set_path("checkpoint", &model), set_path("predictions", &preds)];
    let report = run_ok(&cfg, &out, "report", &sets);
    for f in ["confidence.tsv", "calibration.tsv", "uncertainty.tsv", "entropy.tsv", "summary.json"] {
        assert!(report.join(f).is_file(), "{f}");
    }
    let name = report.file_name().unwrap().to_string_lossy().to_string();
    assert!(name.starts_with("report-") && name.split('-').count() == 3, "{name}");

    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(report.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["seed"], 4);
    assert!(summary["config"].get("paths").is_none());
    assert!(summary["inputs"]["predictions"].as_str().unwrap().starts_with("sha256:"));
    let calib = fs::read_to_string(report.join("calibration.tsv")).unwrap();
    assert!(calib.starts_with("# seed = 4"));
    let counts: usize = calib
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split('\t').nth(2).unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(counts, summary["n_patients"].as_u64().unwrap() as usize);

    let repro = run_ok(&cfg, &out, "repro", &[set_path("data", &data), set_path("checkpoint", &model)]);
    let cmp = fs::read_to_string(repro.join("comparison.tsv")).unwrap();
    assert_eq!(cmp.lines().filter(|l| !l.starts_with('#')).count(), 3);
    assert!(repro.join("predictions_s8.json").is_file());

    let again = run_ok(&cfg, &out, "predict", &[set_path("data", &data), set_path("checkpoint", &model)]);
    assert_ne!(again, preds);
    assert_eq!(fs::read(again.join("predictions.json")).unwrap(), fs::read(preds.join("predictions.json")).unwrap());

    // a single-class predictions file makes the ranking metrics undefined
    let path = preds.join("predictions.json");
    let mut doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    for y in doc["samples"]["labels"].as_array_mut().unwrap() {
        *y = 0.into();
    }
    fs::write(&path, doc.to_string()).unwrap();
    let o = dbgp(&cfg, &out, "report", &[set_path("predictions", &preds)]);
    assert_eq!(o.status.code(), Some(EXIT_DATA), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn missing_inputs_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("runs");
    assert_eq!(dbgp(&cfg, &out, "train", &[]).status.code(), Some(EXIT_CONFIG));
    let absent = dir.path().join("absent");
    assert_eq!(dbgp(&cfg, &out, "train", &[set_path("data", &absent)]).status.code(), Some(EXIT_IO));
    let o = Command::new(env!("CARGO_BIN_EXE_dbgp")).arg("bogus").output().unwrap();
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
}
