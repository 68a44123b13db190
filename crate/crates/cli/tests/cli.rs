use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ices(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ices")).args(args).output().expect("run ices")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const TINY: &str = r#"
variant = "ices"
seed = 3
step_max = 400
out_dir = "unused"

[env]
name = "noisy_corridor"
width = 5
height = 3
episode_limit = 10

[algo]
batch_size = 4
hidden_dim = 8
mixer_embed_dim = 4
scaffold_hidden = 8
decoder_hidden = 8
eval_interval = 200
eval_episodes = 2
"#;

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn listing(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    names
}

#[test]
fn train_writes_exactly_three_artifacts_and_refuses_reuse() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("run");
    let o = ices(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(listing(&out), ["checkpoint.bin", "manifest.toml", "metrics.csv"]);

    let manifest: toml::Table = fs::read_to_string(out.join("manifest.toml")).unwrap().parse().unwrap();
    assert!(manifest["config_hash"].as_str().unwrap().len() >= 8);
    assert!(manifest["finished_unix"].as_integer().unwrap() >= manifest["started_unix"].as_integer().unwrap());
    assert_eq!(manifest["config"]["seed"].as_integer(), Some(3));
    assert_eq!(manifest["final"]["step"].as_integer(), Some(400));

    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,episodes,test_return_mean,test_win_rate,"));
    assert_eq!(metrics.lines().count(), 1 + 3);

    let again = ices(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_ne!(code(&again), 0);
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    let forced = ices(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--force"]);
    assert_eq!(code(&forced), 0);

    let ev = ices(&["eval", "--config", &cfg, "--out", out.to_str().unwrap(), "--episodes", "3"]);
    assert_eq!(code(&ev), 0, "{}", String::from_utf8_lossy(&ev.stderr));
    assert!(String::from_utf8_lossy(&ev.stdout).contains("episodes=3"));
}

#[test]
fn eval_rejects_a_checkpoint_of_another_shape() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("run");
    assert_eq!(code(&ices(&["train", "--config", &cfg, "--out", out.to_str().unwrap()])), 0);
    let wider = write_config(tmp.path(), &TINY.replace("hidden_dim = 8", "hidden_dim = 6"));
    let ev = ices(&["eval", "--config", &wider, "--checkpoint", out.join("checkpoint.bin").to_str().unwrap()]);
    assert_ne!(code(&ev), 0);
}

#[test]
fn exit_codes_separate_usage_validation_and_numeric_failures() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&ices(&["train", "--no-such-flag"])), 1);
    assert_eq!(code(&ices(&[])), 1);
    assert_eq!(code(&ices(&["--help"])), 0);

    let bad = write_config(tmp.path(), &TINY.replace("batch_size = 4", "batch_size = 4\ngamma = 1.5"));
    let o = ices(&["train", "--config", &bad, "--out", tmp.path().join("x").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("algo.gamma"));

    let cfg = write_config(tmp.path(), TINY);
    assert_eq!(code(&ices(&["train", "--config", &cfg, "--variant", "nope", "--out", tmp.path().join("y").to_str().unwrap()])), 2);

    let blowup = write_config(tmp.path(), &TINY.replace("batch_size = 4", "batch_size = 4\nlr_exploit = 1e300"));
    let out = tmp.path().join("z");
    let o = ices(&["train", "--config", &blowup, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let diag = fs::read_to_string(out.join("diagnostic.txt")).unwrap();
    assert!(diag.contains("step:"));
}

#[test]
fn gradcheck_passes_and_reports_injected_faults() {
    let ok = ices(&["gradcheck"]);
    assert_eq!(code(&ok), 0);
    let text = String::from_utf8_lossy(&ok.stdout);
    for c in ["mlp", "gru", "mixer", "td", "elbo", "actor", "actor_literal", "value"] {
        assert!(text.lines().any(|l| l.starts_with(c)), "{c} missing from\n{text}");
    }
    let bad = ices(&["gradcheck", "--inject-fault", "td"]);
    assert_eq!(code(&bad), 3);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("td"));
}

#[test]
fn sweep_writes_one_run_per_value_and_a_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &TINY.replace("step_max = 400", "step_max = 200"));
    let root = tmp.path().join("sweep");
    let o = ices(&["sweep", "--config", &cfg, "--out", root.to_str().unwrap(), "--param", "alpha", "--values", "0.05,0.2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(listing(&root), ["alpha_0.05", "alpha_0.2", "summary.csv"]);
    let summary = fs::read_to_string(root.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    let manifest: toml::Table = fs::read_to_string(root.join("alpha_0.2/manifest.toml")).unwrap().parse().unwrap();
    assert_eq!(manifest["config"]["algo"]["alpha_start"].as_float(), Some(0.2));
    assert_eq!(manifest["config"]["algo"]["alpha_end"].as_float(), Some(0.2));

    assert_eq!(code(&ices(&["sweep", "--config", &cfg, "--param", "gamma", "--values", "0.5"])), 1);
    assert_eq!(code(&ices(&["sweep", "--config", &cfg, "--param", "beta"])), 1);
}

#[test]
fn plot_draws_runs_plus_median_and_names_missing_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let header = "step,episodes,test_return_mean,test_win_rate,loss_td,loss_elbo,loss_actor,loss_value,mean_r_int,actor_entropy,alpha,epsilon";
    let mut inputs = Vec::new();
    for k in 0..3 {
        let dir = tmp.path().join(format!("seed{k}"));
        fs::create_dir_all(&dir).unwrap();
        let p = dir.join("metrics.csv");
        fs::write(&p, format!("{header}\n0,0,0,0,nan,nan,nan,nan,nan,nan,0.2,1\n100,5,0,{},1,1,1,1,1,1,0.1,0.5\n", k as f64 / 2.0)).unwrap();
        inputs.push(p.display().to_string());
    }
    let svg = tmp.path().join("out.svg");
    let mut args = vec!["plot", "--out", svg.to_str().unwrap()];
    args.extend(inputs.iter().map(String::as_str));
    assert_eq!(code(&ices(&args)), 0);
    let text = fs::read_to_string(&svg).unwrap();
    assert!(text.starts_with("<svg"));
    assert_eq!(text.matches("<polyline").count(), 4);
    assert!(text.contains(">median<"));

    let broken = tmp.path().join("broken.csv");
    fs::write(&broken, "step,episodes\n1,2\n").unwrap();
    let o = ices(&["plot", "--out", svg.to_str().unwrap(), broken.to_str().unwrap()]);
    assert_ne!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("test_win_rate"));
}
