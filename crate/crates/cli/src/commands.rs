//! Subcommand implementations. Each returns a process exit code.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use ices_core::checkpoint;
use ices_core::checks::gradcheck_suite;
use ices_core::config::{EnvConfig, ExperimentConfig, Variant};
use ices_core::par;
use ices_core::trainer::{evaluate, MetricsRow, Trainer};
use ices_core::IcesError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.txt";
const TOLERANCE: f64 = 1e-4;

pub fn exit_code(e: &IcesError) -> i32 {
    match e {
        IcesError::Config { .. } => EXIT_VALIDATION,
        IcesError::Numeric(_) | IcesError::DegenerateDistribution(_) | IcesError::InfiniteKl(_) => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

fn fail(e: &IcesError) -> i32 {
    eprintln!("error: {e}");
    exit_code(e)
}

/// Command-line overrides applied on top of a config document.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub variant: Option<String>,
}

pub fn load_config(path: Option<&Path>, o: &Overrides) -> Result<ExperimentConfig, IcesError> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::new(EnvConfig::corridor()),
    };
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(out) = &o.out {
        cfg.out_dir = out.display().to_string();
    }
    if let Some(v) = &o.variant {
        cfg.variant = v.parse::<Variant>()?;
    }
    cfg.apply_variant_overrides();
    cfg.validate()?;
    Ok(cfg)
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

#[derive(Serialize)]
struct FinalSummary {
    step: u64,
    episodes: u64,
    test_return_mean: f64,
    test_win_rate: f64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_hash: String,
    started_unix: u64,
    finished_unix: u64,
    #[serde(rename = "final")]
    final_metrics: Option<FinalSummary>,
    config: &'a ExperimentConfig,
}

/// Refuses to reuse a directory holding run artifacts unless `force`.
fn prepare_out_dir(dir: &Path, force: bool) -> Result<(), IcesError> {
    let artifacts = [METRICS_FILE, MANIFEST_FILE, CHECKPOINT_FILE, DIAGNOSTIC_FILE];
    let taken = artifacts.iter().any(|f| dir.join(f).exists());
    if taken && !force {
        return Err(IcesError::Io(std::io::Error::new(
            std::io::ErrorKind::AlreadyExists,
            format!("{} already holds a run; pass --force to overwrite", dir.display()),
        )));
    }
    fs::create_dir_all(dir)?;
    for f in artifacts {
        let p = dir.join(f);
        if p.exists() {
            fs::remove_file(p)?;
        }
    }
    Ok(())
}

/// Trains one configuration and writes its artifacts. Returns the final
/// metrics row on success.
pub fn train_run(cfg: &ExperimentConfig, force: bool) -> Result<Option<MetricsRow>, IcesError> {
    let dir = PathBuf::from(&cfg.out_dir);
    prepare_out_dir(&dir, force)?;
    let started = unix_now();
    let mut trainer = Trainer::new(cfg.clone())?;
    let outcome = trainer.run();
    fs::write(dir.join(METRICS_FILE), trainer.metrics_csv())?;
    if let Err(e) = outcome {
        let diag = format!(
            "error: {e}\nstep: {}\nepisodes: {}\ntrain_events: {}\nconfig_hash: {}\nlast_metrics: {}\n",
            trainer.t_env,
            trainer.episodes,
            trainer.train_events,
            cfg.content_hash(),
            trainer.metrics.last().map(|m| m.csv_line()).unwrap_or_default()
        );
        fs::write(dir.join(DIAGNOSTIC_FILE), diag)?;
        return Err(e);
    }
    let mut ckpt = Vec::new();
    checkpoint::write_store(&trainer.exploit.store, &mut ckpt)?;
    fs::write(dir.join(CHECKPOINT_FILE), ckpt)?;
    let last = trainer.metrics.last().copied();
    let manifest = Manifest {
        config_hash: cfg.content_hash(),
        started_unix: started,
        finished_unix: unix_now(),
        final_metrics: last.map(|m| FinalSummary {
            step: m.step,
            episodes: m.episodes,
            test_return_mean: m.test_return_mean,
            test_win_rate: m.test_win_rate,
        }),
        config: cfg,
    };
    let text = toml::to_string(&manifest).map_err(|e| IcesError::Io(std::io::Error::other(e.to_string())))?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(last)
}

pub fn cmd_train(config: Option<&Path>, o: &Overrides, force: bool) -> i32 {
    let cfg = match load_config(config, o) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    match train_run(&cfg, force) {
        Ok(last) => {
            if let Some(m) = last {
                println!("step={} test_return_mean={:.4} test_win_rate={:.4}", m.step, m.test_return_mean, m.test_win_rate);
            }
            println!("artifacts written to {}", cfg.out_dir);
            EXIT_OK
        }
        Err(e) => fail(&e),
    }
}

pub fn cmd_eval(config: Option<&Path>, o: &Overrides, checkpoint_path: Option<&Path>, episodes: Option<usize>) -> i32 {
    let cfg = match load_config(config, o) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    let path = checkpoint_path.map(Path::to_path_buf).unwrap_or_else(|| Path::new(&cfg.out_dir).join(CHECKPOINT_FILE));
    let run = || -> Result<(), IcesError> {
        let mut trainer = Trainer::new(cfg.clone())?;
        let bytes = fs::read(&path)?;
        checkpoint::load_into(&mut trainer.exploit.store, bytes.as_slice())?;
        let mut env = cfg.env.build()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let m = evaluate(&trainer.exploit, env.as_mut(), episodes.unwrap_or(cfg.algo.eval_episodes), &mut rng)?;
        println!("episodes={} test_return_mean={:.4} test_win_rate={:.4}", m.episodes, m.return_mean, m.win_rate);
        Ok(())
    };
    match run() {
        Ok(()) => EXIT_OK,
        Err(e) => fail(&e),
    }
}

pub fn cmd_gradcheck(seed: u64, fault: Option<&str>) -> i32 {
    let report = match gradcheck_suite(seed, fault) {
        Ok(r) => r,
        Err(e) => return fail(&e),
    };
    let mut offenders = Vec::new();
    for c in &report {
        let ok = c.report.max_rel_error <= TOLERANCE;
        println!(
            "{:<14} max_rel_error={:.3e} coordinates={:<5} {}",
            c.component,
            c.report.max_rel_error,
            c.report.coordinates,
            if ok { "ok" } else { "FAILED" }
        );
        if !ok {
            offenders.push(c.component);
        }
    }
    if offenders.is_empty() {
        EXIT_OK
    } else {
        eprintln!("gradient check failed for: {}", offenders.join(", "));
        EXIT_NUMERIC
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Alpha,
    Beta,
}

impl std::str::FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "alpha" => Ok(SweepParam::Alpha),
            "beta" => Ok(SweepParam::Beta),
            other => Err(format!("cannot sweep `{other}`; choose alpha or beta")),
        }
    }
}

/// Child configuration for one sweep point. An α point holds α constant.
pub fn sweep_child(base: &ExperimentConfig, param: SweepParam, value: f64, seed: u64, dir: &Path) -> ExperimentConfig {
    let mut c = base.clone();
    match param {
        SweepParam::Alpha => {
            c.algo.alpha_start = value;
            c.algo.alpha_end = value;
        }
        SweepParam::Beta => c.algo.beta = value,
    }
    c.seed = seed;
    c.out_dir = dir.display().to_string();
    c
}

pub fn cmd_sweep(config: Option<&Path>, o: &Overrides, param: &str, values: &[f64], seeds: &[u64], force: bool) -> i32 {
    let param: SweepParam = match param.parse() {
        Ok(p) => p,
        Err(m) => {
            eprintln!("error: {m}");
            return EXIT_USAGE;
        }
    };
    if values.is_empty() {
        eprintln!("error: sweep needs at least one value");
        return EXIT_USAGE;
    }
    let base = match load_config(config, o) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    let seeds = if seeds.is_empty() { vec![base.seed] } else { seeds.to_vec() };
    let root = PathBuf::from(&base.out_dir);
    let name = match param {
        SweepParam::Alpha => "alpha",
        SweepParam::Beta => "beta",
    };
    let mut children = Vec::new();
    for v in values {
        for s in &seeds {
            let mut dir = root.join(format!("{name}_{v}"));
            if seeds.len() > 1 {
                dir = dir.join(format!("seed_{s}"));
            }
            let child = sweep_child(&base, param, *v, *s, &dir);
            if let Err(e) = child.validate() {
                return fail(&e);
            }
            children.push((*v, *s, child));
        }
    }
    let threads = std::env::var("ICES_THREADS").ok().and_then(|t| t.parse::<usize>().ok());
    let results = par::with_threads(threads, || par::map_slice(&children, |(_, _, c)| train_run(c, force)));

    let mut summary = String::from("param,value,seed,step,test_return_mean,test_win_rate,run_dir\n");
    let mut worst = EXIT_OK;
    for ((v, s, c), r) in children.iter().zip(results) {
        match r {
            Ok(Some(m)) => {
                summary.push_str(&format!("{name},{v},{s},{},{:.6},{:.6},{}\n", m.step, m.test_return_mean, m.test_win_rate, c.out_dir));
            }
            Ok(None) => summary.push_str(&format!("{name},{v},{s},0,nan,nan,{}\n", c.out_dir)),
            Err(e) => {
                eprintln!("{}: {e}", c.out_dir);
                worst = worst.max(exit_code(&e));
                summary.push_str(&format!("{name},{v},{s},failed,nan,nan,{}\n", c.out_dir));
            }
        }
    }
    if let Err(e) = fs::create_dir_all(&root).and_then(|_| fs::write(root.join("summary.csv"), &summary)) {
        return fail(&IcesError::Io(e));
    }
    print!("{summary}");
    worst
}

pub fn cmd_plot(inputs: &[PathBuf], out: &Path) -> i32 {
    use crate::plot::{read_series, render_svg};
    let mut series = Vec::new();
    for p in inputs {
        match read_series(p) {
            Ok(s) => series.push(s),
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_VALIDATION;
            }
        }
    }
    match render_svg(&series) {
        Ok(svg) => match fs::write(out, svg) {
            Ok(()) => {
                println!("wrote {}", out.display());
                EXIT_OK
            }
            Err(e) => fail(&IcesError::Io(e)),
        },
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}
