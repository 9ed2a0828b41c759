use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use covertwatch_core::pipeline::experiment::ExperimentReport;
use covertwatch_core::plant::build_default_grid;

const TINY: &str = r#"
seed = 3
levels = [0.0]
severities = []
output = "out"

[data]
hours = 30
normal_episodes = 2
contaminant_episodes = 0
dnn_episodes = 1
test_episodes = 1

[model]
window = 4
samples = 2

[train.vae]
max_epochs = 3

[train.lstm]
max_epochs = 3

[train.dnn]
max_epochs = 3

[train.ae]
max_epochs = 3
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_covertwatch")).current_dir(dir).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), config).unwrap();
    dir
}

#[test]
fn missing_grid_file_is_a_config_error() {
    let dir = setup(&format!("grid = \"no_such_grid.toml\"\n{TINY}"));
    let o = run(dir.path(), &["simulate", "--config", "c.toml"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no_such_grid.toml"), "{}", stderr(&o));
}

#[test]
fn bad_config_key_is_a_config_error() {
    let dir = setup("unknown_key = 1\n");
    assert_eq!(code(&run(dir.path(), &["simulate", "--config", "c.toml"])), 2);
}

#[test]
fn simulate_writes_named_columns_reproducibly() {
    let dir = setup(TINY);
    let o = run(dir.path(), &["simulate", "--config", "c.toml"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("test.csv"));
    let data = dir.path().join("out/data");
    let text = fs::read_to_string(data.join("normal.csv")).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let channels = build_default_grid().channel_names();
    assert_eq!(&header[..3], &["episode", "t", "label"]);
    assert_eq!(header[3..3 + channels.len()], channels.iter().map(String::as_str).collect::<Vec<_>>()[..]);
    let first = fs::read(data.join("manifest.json")).unwrap();
    assert_eq!(code(&run(dir.path(), &["simulate", "--config", "c.toml"])), 0);
    assert_eq!(fs::read(data.join("manifest.json")).unwrap(), first);
}

#[test]
fn train_without_attack_data_at_positive_level_is_a_config_error() {
    let dir = setup(TINY);
    assert_eq!(code(&run(dir.path(), &["simulate", "--config", "c.toml"])), 0);
    fs::write(dir.path().join("c2.toml"), TINY.replace("levels = [0.0]", "levels = [0.0, 0.2]")).unwrap();
    let o = run(dir.path(), &["train", "--config", "c2.toml"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("attack"));
    fs::remove_file(dir.path().join("out/data/contaminant.csv")).unwrap();
    let o = run(dir.path(), &["train", "--config", "c2.toml"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("contaminant.csv"), "{}", stderr(&o));
}

#[test]
fn train_before_simulate_is_a_config_error() {
    let dir = setup(TINY);
    assert_eq!(code(&run(dir.path(), &["train", "--config", "c.toml"])), 2);
}

#[test]
fn full_flow_and_comparison() {
    let dir = setup(TINY);
    let d = dir.path();
    assert_eq!(code(&run(d, &["simulate", "--config", "c.toml"])), 0);
    let o = run(d, &["train", "--config", "c.toml"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(d.join("out/models/proposed/vae_0.json").exists());
    assert!(d.join("out/models/curves/lstm_0.csv").exists());
    let dnn = fs::read(d.join("out/models/proposed/dnn.json")).unwrap();
    assert_eq!(code(&run(d, &["train", "--config", "c.toml"])), 0);
    assert_eq!(fs::read(d.join("out/models/proposed/dnn.json")).unwrap(), dnn, "training is idempotent");

    let o = run(d, &["train", "--config", "c.toml", "--baseline", "ae"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(d.join("out/models/ae/ae_0.json").exists());

    let o = run(d, &["evaluate", "--config", "c.toml", "--compare", "proposed,ae"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.lines().any(|l| l.contains("proposed") && l.contains("ae") && !l.contains("accuracy")), "{table}");

    let text = fs::read_to_string(d.join("out/report.json")).unwrap();
    let report = ExperimentReport::from_json(&text).unwrap();
    assert_eq!(report.to_json(), text);
    assert_eq!(report.entries.len(), 2);
    for e in &report.entries {
        let r = &e.report;
        for v in [r.accuracy, r.macro_precision, r.macro_recall, r.macro_f1, r.auc.unwrap()] {
            assert!((0.0..=1.0).contains(&v));
        }
        for (c, row) in r.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), r.per_class[c].support);
        }
    }
    assert!(fs::read_to_string(d.join("out/confusion.csv")).unwrap().starts_with("method,level,truth,predicted,count"));
    assert!(fs::read_to_string(d.join("out/roc.csv")).unwrap().starts_with("method,level,threshold,fpr,tpr"));

    let o = run(d, &["infer", "--config", "c.toml"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.starts_with("episode,t,label,predicted,p_0,p_1,p_2,p_3"));
    // One cold-start window per episode yields no decision.
    assert_eq!(out.lines().count() - 1, 4 * (30 - 4));
}

#[test]
fn bundle_version_mismatch_fails_evaluation() {
    let dir = setup(TINY);
    let d = dir.path();
    assert_eq!(code(&run(d, &["simulate", "--config", "c.toml"])), 0);
    assert_eq!(code(&run(d, &["train", "--config", "c.toml"])), 0);
    let p = d.join("out/models/proposed/vae_0.json");
    let text = fs::read_to_string(&p).unwrap().replacen("\"format\": 1", "\"format\": 9", 1);
    fs::write(&p, text).unwrap();
    let o = run(d, &["evaluate", "--config", "c.toml"]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
}

#[test]
fn evaluate_without_models_fails_evaluation() {
    let dir = setup(TINY);
    assert_eq!(code(&run(dir.path(), &["simulate", "--config", "c.toml"])), 0);
    assert_eq!(code(&run(dir.path(), &["evaluate", "--config", "c.toml", "--compare", "ae"])), 5);
}
