use std::path::Path;
use std::process::{Command, Output};

fn metactl(args: &[&str], out_root: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_metactl"));
    cmd.args(args).env_remove("METACTL_OUT");
    if let Some(root) = out_root {
        cmd.env("METACTL_OUT", root);
    }
    cmd.output().expect("binary runs")
}

const TINY: &str = r#"
seeds = [0, 1, 2]
train_episodes = 2
train_steps_per_episode = 3
adapt_episodes = 2
adapt_steps_per_episode = 2
eval_episodes = 1
export_draws = 2
context_episodes = 1
hidden = [8, 8]
encoder_hidden = [8]
feature_dim = 4
batch_size = 8
context_size = 8
n_setpoints = 2
steps_per_setpoint = 10
"#;

#[test]
fn run_metrics_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("out");
    let o = metactl(
        &[
            "run",
            "first-order-adapt",
            "--config",
            cfg.to_str().unwrap(),
            "--seed-count",
            "2",
            "--variant",
            "DE",
            "--out",
            out.to_str().unwrap(),
        ],
        None,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let res = out.join("first-order-adapt").join("DE");
    let resolved = std::fs::read_to_string(res.join("config.toml")).unwrap();
    assert!(resolved.contains("seeds = [0, 1]"));
    let episodes = std::fs::read_to_string(res.join("episodes.csv")).unwrap();
    assert!(episodes.starts_with("seed,task_id,episode,cum_reward\n"));
    assert_eq!(episodes.lines().count(), 1 + 2 * 2);

    std::fs::remove_file(res.join("metrics.csv")).unwrap();
    let o = metactl(&["metrics", res.to_str().unwrap()], None);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("episode,q1,median,q3,moving_avg_median"));
    assert!(res.join("metrics.csv").is_file());

    let export = dir.path().join("export");
    let ckpt = res.join("seed-0").join("checkpoint.json");
    let o = metactl(&["export-embeddings", ckpt.to_str().unwrap(), export.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let z = std::fs::read_to_string(export.join("embeddings.csv")).unwrap();
    assert!(z.starts_with("task_id,z1,z2,z3\n"));
    assert_eq!(z.lines().count(), 1 + 16 * 2);
}

#[test]
fn env_var_sets_default_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let o = metactl(
        &["run", "binary-gain", "--config", cfg.to_str().unwrap(), "--seed-count", "1", "--variant", "noembed"],
        Some(dir.path()),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("binary-gain/NoEmbed/episodes.csv").is_file());
    assert!(!dir.path().join("binary-gain/NoEmbed/seed-0/embeddings.csv").exists());
}

#[test]
fn bad_arguments_fail() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!metactl(&["run", "no-such-preset"], Some(dir.path())).status.success());
    assert!(!metactl(&["run", "binary-gain", "--variant", "Scratch"], Some(dir.path())).status.success());
    assert!(!metactl(&["run", "binary-gain", "--variant", "XY"], Some(dir.path())).status.success());
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "preset = \"objectives-adapt\"\n").unwrap();
    let o = metactl(&["run", "binary-gain", "--config", cfg.to_str().unwrap()], Some(dir.path()));
    assert!(!o.status.success());
    assert!(!metactl(&["metrics", dir.path().join("missing").to_str().unwrap()], None).status.success());
}
