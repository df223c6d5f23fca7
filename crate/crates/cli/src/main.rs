//! Command-line front end for the policy-optimization lab.
//!
//! Subcommands: `gen-dataset`, `train`, `eval`, `compare`, `gradcheck`.
//! Exit codes are a stable scripting contract: 0 success, 1 failed check or
//! runtime failure, 2 usage, 3 numerical abort, 4 corrupt artifact.

mod args;
mod gradcheck;
mod manifest;
mod svg;

use args::{flag, required, switch, Args};
use cappo_core::checkpoint;
use cappo_core::config::{ConfigError, TrainingConfig};
use cappo_core::env::{self, EnvError};
use cappo_core::hash::git_blob_hash;
use cappo_core::metrics::{read_metrics, MetricsRow};
use cappo_core::trainer::{self, Conditioning, Mode, TrainError};
use manifest::Manifest;
use std::path::{Path, PathBuf};

#[derive(Debug)]
enum CliError {
    /// exit 1: failed verification or runtime failure
    Failure(String),
    /// exit 2: bad flags, bad config, missing inputs
    Usage(String),
    /// exit 3: non-finite loss/gradient abort
    Numerical(String),
    /// exit 4: corrupt artifact (dataset, checkpoint, metrics)
    Corrupt(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Failure(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Corrupt(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Failure(m) | CliError::Usage(m) | CliError::Numerical(m) | CliError::Corrupt(m) => m,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Usage(m) => CliError::Usage(m),
            TrainError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            TrainError::Checkpoint(c) => match c {
                checkpoint::CheckpointError::Corrupt { .. } => CliError::Corrupt(c.to_string()),
                checkpoint::CheckpointError::Io { .. } => CliError::Failure(c.to_string()),
            },
            TrainError::Env(env_err) => env_to_cli(env_err),
            TrainError::Config(c) => CliError::Usage(c.to_string()),
            other => CliError::Failure(other.to_string()),
        }
    }
}

fn env_to_cli(e: EnvError) -> CliError {
    match e {
        EnvError::Usage(m) => CliError::Usage(m),
        EnvError::Parse { .. } => CliError::Corrupt(e.to_string()),
        EnvError::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
            CliError::Usage(e.to_string())
        }
        EnvError::Io { .. } => CliError::Failure(e.to_string()),
    }
}

fn config_to_cli(e: ConfigError) -> CliError {
    match e {
        ConfigError::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
            CliError::Usage(e.to_string())
        }
        other => CliError::Usage(other.to_string()),
    }
}

const USAGE: &str = "\
usage: cappo <command> [flags]

commands:
  gen-dataset  --n N [--seed S] [--p-attr P] [--noise-sigma S]
               [--caption-quality low|mid|high] [--k-max K] --out FILE
  train        --data FILE --out DIR [--mode grpo|cappo] [--config FILE]
               [--steps N] [--seed S] [--resume CKPT]
  eval         --ckpt FILE --data FILE [--config FILE] [--out FILE]
               [--oracle-self-test]
  compare      --out DIR RUN_DIR RUN_DIR [RUN_DIR...]
  gradcheck    [--seed S] [--configs N] [--h H] [--tol TOL]
               [--self-test-fault]

environment: CAPPO_THREADS caps rollout parallelism.
";

fn main() {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match dispatch(&argv) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}", e.message());
            std::process::exit(e.code());
        }
    }
}

fn dispatch(argv: &[String]) -> Result<(), CliError> {
    let Some(cmd) = argv.first() else {
        eprint!("{USAGE}");
        return Err(CliError::Usage("missing command".into()));
    };
    let rest = &argv[1..];
    match cmd.as_str() {
        "gen-dataset" => cmd_gen_dataset(rest),
        "train" => cmd_train(rest),
        "eval" => cmd_eval(rest),
        "compare" => cmd_compare(rest),
        "gradcheck" => cmd_gradcheck(rest),
        "help" | "--help" | "-h" => {
            print!("{USAGE}");
            Ok(())
        }
        other => {
            eprint!("{USAGE}");
            Err(CliError::Usage(format!("unknown command `{other}`")))
        }
    }
}

fn caption_quality_to_p(q: &str) -> Result<f64, CliError> {
    match q {
        "low" => Ok(0.30),
        "mid" => Ok(0.15),
        "high" => Ok(0.00),
        other => Err(CliError::Usage(format!(
            "flag `--caption-quality`: expected low|mid|high, got `{other}`"
        ))),
    }
}

fn cmd_gen_dataset(argv: &[String]) -> Result<(), CliError> {
    let spec = [
        required("n"),
        flag("seed"),
        flag("p-attr"),
        flag("noise-sigma"),
        flag("caption-quality"),
        flag("k-max"),
        required("out"),
    ];
    let a = Args::parse(argv, &spec).map_err(CliError::Usage)?;
    let n: usize = a.require("n").map_err(CliError::Usage)?;
    if n < 1 {
        return Err(CliError::Usage("flag `--n` must be >= 1".into()));
    }
    let seed: u64 = a.parse_value("seed").map_err(CliError::Usage)?.unwrap_or(0);
    let p_attr: f64 = a.parse_value("p-attr").map_err(CliError::Usage)?.unwrap_or(0.3);
    let noise_sigma: f64 =
        a.parse_value("noise-sigma").map_err(CliError::Usage)?.unwrap_or(0.25);
    let quality = a.get("caption-quality").unwrap_or("high");
    let caption_p_attr = caption_quality_to_p(quality)?;
    let k_max: usize = a.parse_value("k-max").map_err(CliError::Usage)?.unwrap_or(6);
    let out = PathBuf::from(a.get("out").unwrap());

    let corruption = env::CorruptionConfig { p_attr, noise_sigma, caption_p_attr };
    let samples = env::build_samples(n, seed, k_max, &corruption).map_err(env_to_cli)?;
    env::write_dataset(&out, &samples, k_max).map_err(env_to_cli)?;
    let bytes = std::fs::read(&out)
        .map_err(|e| CliError::Failure(format!("re-reading {}: {e}", out.display())))?;
    let content_hash = git_blob_hash(&bytes);

    let manifest_path = PathBuf::from(format!("{}.manifest", out.display()));
    let manifest = format!(
        "cappo-dataset-manifest v1\nn {n}\nseed {seed}\np_attr {p_attr}\nnoise_sigma {noise_sigma}\n\
         caption_quality {quality}\ncaption_p_attr {caption_p_attr}\nk_max {k_max}\n\
         content_hash {content_hash}\nout {}\n",
        out.display()
    );
    std::fs::write(&manifest_path, manifest)
        .map_err(|e| CliError::Failure(format!("writing manifest: {e}")))?;
    println!("wrote {n} samples to {} (hash {content_hash})", out.display());
    println!("manifest: {}", manifest_path.display());
    Ok(())
}

fn load_config(a: &Args) -> Result<TrainingConfig, CliError> {
    let mut cfg = match a.get("config") {
        Some(path) => TrainingConfig::from_file(Path::new(path)).map_err(config_to_cli)?,
        None => TrainingConfig::default(),
    };
    if let Some(steps) = a.parse_value::<usize>("steps").map_err(CliError::Usage)? {
        cfg.total_steps = steps;
    }
    if let Some(seed) = a.parse_value::<u64>("seed").map_err(CliError::Usage)? {
        cfg.seed = seed;
    }
    cfg.validate().map_err(config_to_cli)?;
    Ok(cfg)
}

fn cmd_train(argv: &[String]) -> Result<(), CliError> {
    let spec = [
        required("data"),
        required("out"),
        flag("mode"),
        flag("config"),
        flag("steps"),
        flag("seed"),
        flag("resume"),
    ];
    let a = Args::parse(argv, &spec).map_err(CliError::Usage)?;
    let mode_name = a.get("mode").unwrap_or("cappo");
    let mode = Mode::parse(mode_name)
        .ok_or_else(|| CliError::Usage(format!("flag `--mode`: expected grpo|cappo, got `{mode_name}`")))?;
    let data_path = PathBuf::from(a.get("data").unwrap());
    let out_dir = PathBuf::from(a.get("out").unwrap());
    if out_dir.exists() {
        return Err(CliError::Usage(format!(
            "flag `--out`: run directory {} already exists (runs are append-only)",
            out_dir.display()
        )));
    }
    let mut cfg = load_config(&a)?;

    let (dataset, k_max) = env::read_dataset(&data_path).map_err(env_to_cli)?;
    if cfg.k_max != k_max {
        cfg.k_max = k_max;
        cfg.validate().map_err(config_to_cli)?;
    }

    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Failure(format!("creating {}: {e}", out_dir.display())))?;
    let dataset_bytes = std::fs::read(&data_path)
        .map_err(|e| CliError::Failure(format!("reading {}: {e}", data_path.display())))?;
    let mut manifest = Manifest {
        run_id: format!(
            "{}-{}",
            out_dir.file_name().map(|s| s.to_string_lossy().to_string()).unwrap_or_default(),
            &cfg.content_hash()[..8]
        ),
        mode: mode.name().to_string(),
        dataset: data_path.display().to_string(),
        dataset_hash: git_blob_hash(&dataset_bytes),
        config: cfg.clone(),
        started_unix: manifest::unix_now(),
        ended_unix: None,
        outputs: Vec::new(),
    };
    manifest.write(&out_dir).map_err(|e| CliError::Failure(format!("writing manifest: {e}")))?;

    let resume = a.get("resume").map(PathBuf::from);
    let outcome = trainer::train_loop(&cfg, &dataset, mode, &out_dir, resume.as_deref())?;

    manifest.ended_unix = Some(manifest::unix_now());
    manifest.outputs.push(outcome.metrics_path.display().to_string());
    for c in &outcome.checkpoints {
        manifest.outputs.push(c.display().to_string());
    }
    manifest.write(&out_dir).map_err(|e| CliError::Failure(format!("writing manifest: {e}")))?;

    if let Some(last) = outcome.rows.last() {
        println!(
            "done: {} steps, final mean_reward {:.4}, caption_kl {:.6}, entropy {:.4}",
            last.step, last.mean_reward, last.caption_kl, last.entropy
        );
    }
    println!("run directory: {}", out_dir.display());
    Ok(())
}

fn cmd_eval(argv: &[String]) -> Result<(), CliError> {
    let spec = [
        required("ckpt"),
        required("data"),
        flag("config"),
        flag("out"),
        switch("oracle-self-test"),
    ];
    let a = Args::parse(argv, &spec).map_err(CliError::Usage)?;
    let ckpt_path = PathBuf::from(a.get("ckpt").unwrap());
    let data_path = PathBuf::from(a.get("data").unwrap());
    let mut cfg = load_config(&a)?;

    let (dataset, k_max) = env::read_dataset(&data_path).map_err(env_to_cli)?;
    if cfg.k_max != k_max {
        cfg.k_max = k_max;
        cfg.validate().map_err(config_to_cli)?;
    }

    let mut lines = vec!["conditioning,accuracy,mean_reward,n".to_string()];
    if a.has("oracle-self-test") {
        let report = trainer::evaluate_responses(&dataset, |s| env::oracle_response(s.gold()));
        lines.push(format!("oracle,{},{},{}", report.accuracy, report.mean_reward, report.n));
    } else {
        if !ckpt_path.exists() {
            return Err(CliError::Usage(format!(
                "flag `--ckpt`: {} does not exist",
                ckpt_path.display()
            )));
        }
        let ckpt = checkpoint::load(&ckpt_path).map_err(|e| match e {
            checkpoint::CheckpointError::Corrupt { .. } => CliError::Corrupt(e.to_string()),
            checkpoint::CheckpointError::Io { .. } => CliError::Failure(e.to_string()),
        })?;
        checkpoint::validate_shapes(&ckpt.params, &cfg.model())
            .map_err(|e| CliError::Corrupt(e.to_string()))?;
        for conditioning in [Conditioning::Image, Conditioning::Caption] {
            let report = trainer::evaluate_accuracy(&ckpt.params, &cfg, &dataset, conditioning);
            lines.push(format!(
                "{},{},{},{}",
                conditioning.name(),
                report.accuracy,
                report.mean_reward,
                report.n
            ));
        }
    }
    let csv = lines.join("\n") + "\n";
    print!("{csv}");
    if let Some(out) = a.get("out") {
        std::fs::write(out, &csv).map_err(|e| CliError::Failure(format!("writing {out}: {e}")))?;
    }
    Ok(())
}

const COMPARE_METRICS: [(&str, &str); 5] = [
    ("mean_reward", "reward"),
    ("mean_resp_len", "resp_len"),
    ("caption_kl", "caption_kl"),
    ("entropy", "entropy"),
    ("total_loss", "loss"),
];

fn run_label(dir: &str) -> String {
    Path::new(dir)
        .file_name()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| dir.to_string())
}

fn cmd_compare(argv: &[String]) -> Result<(), CliError> {
    let spec = [required("out")];
    let a = Args::parse(argv, &spec).map_err(CliError::Usage)?;
    if a.positional.len() < 2 {
        return Err(CliError::Usage(format!(
            "compare needs at least 2 run directories, got {}",
            a.positional.len()
        )));
    }
    let out_dir = PathBuf::from(a.get("out").unwrap());
    if out_dir.exists() {
        return Err(CliError::Usage(format!(
            "flag `--out`: {} already exists (runs are append-only)",
            out_dir.display()
        )));
    }

    let mut runs: Vec<(String, Vec<MetricsRow>)> = Vec::new();
    for dir in &a.positional {
        let path = Path::new(dir).join("metrics.csv");
        if !path.exists() {
            return Err(CliError::Usage(format!("no metrics.csv under {dir}")));
        }
        let rows = read_metrics(&path).map_err(|e| CliError::Corrupt(e.to_string()))?;
        if rows.is_empty() {
            return Err(CliError::Corrupt(format!("{dir}: metrics.csv has no rows")));
        }
        runs.push((run_label(dir), rows));
    }

    let common = runs.iter().map(|(_, r)| r.len()).min().unwrap();
    if runs.iter().any(|(_, r)| r.len() != common) {
        eprintln!("warning: step counts differ; truncating to common prefix of {common} steps");
    }

    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Failure(format!("creating {}: {e}", out_dir.display())))?;

    for (column, file_stem) in COMPARE_METRICS {
        let series: Vec<(String, Vec<(f64, f64)>)> = runs
            .iter()
            .map(|(label, rows)| {
                let pts = rows[..common]
                    .iter()
                    .map(|r| (r.step as f64, r.metric(column).unwrap()))
                    .collect();
                (label.clone(), pts)
            })
            .collect();
        let path = out_dir.join(format!("{file_stem}.svg"));
        svg::line_chart(&path, column, &series)
            .map_err(|e| CliError::Failure(format!("writing {}: {e}", path.display())))?;
    }

    // final-window summary: mean over the last 20% of common steps
    let window = (common / 5).max(1);
    let mut summary_csv = String::from("metric,run,final_window_mean,diff_vs_first\n");
    let mut summary_txt = format!("final-window means (last {window} of {common} steps)\n");
    for (column, _) in COMPARE_METRICS {
        let mut first_mean = 0.0;
        for (ri, (label, rows)) in runs.iter().enumerate() {
            let tail = &rows[common - window..common];
            let mean =
                tail.iter().map(|r| r.metric(column).unwrap()).sum::<f64>() / window as f64;
            if ri == 0 {
                first_mean = mean;
            }
            let diff = mean - first_mean;
            summary_csv.push_str(&format!("{column},{label},{mean},{diff}\n"));
            summary_txt.push_str(&format!("  {column:<14} {label:<24} {mean:>14.6} (diff {diff:+.6})\n"));
        }
    }
    std::fs::write(out_dir.join("summary.csv"), &summary_csv)
        .map_err(|e| CliError::Failure(format!("writing summary.csv: {e}")))?;
    std::fs::write(out_dir.join("summary.txt"), &summary_txt)
        .map_err(|e| CliError::Failure(format!("writing summary.txt: {e}")))?;
    print!("{summary_txt}");
    println!("charts and summary in {}", out_dir.display());
    Ok(())
}

fn cmd_gradcheck(argv: &[String]) -> Result<(), CliError> {
    let spec = [flag("seed"), flag("configs"), flag("h"), flag("tol"), switch("self-test-fault")];
    let a = Args::parse(argv, &spec).map_err(CliError::Usage)?;
    let seed: u64 = a.parse_value("seed").map_err(CliError::Usage)?.unwrap_or(7);
    let configs: usize = a.parse_value("configs").map_err(CliError::Usage)?.unwrap_or(20);
    let h: f64 = a.parse_value("h").map_err(CliError::Usage)?.unwrap_or(1e-5);
    let tol: f64 = a.parse_value("tol").map_err(CliError::Usage)?.unwrap_or(1e-4);
    if configs < 1 {
        return Err(CliError::Usage("flag `--configs` must be >= 1".into()));
    }
    if h <= 0.0 {
        return Err(CliError::Usage("flag `--h` must be > 0".into()));
    }

    let outcomes = gradcheck::run(seed, configs, h, tol, a.has("self-test-fault"));
    let mut all_pass = true;
    println!("gradient checks over {configs} seeded configurations (h = {h}, tol = {tol}):");
    for o in &outcomes {
        println!(
            "  {:<26} max_rel_err {:>12.3e}  {}",
            o.name,
            o.max_rel_err,
            if o.passed { "PASS" } else { "FAIL" }
        );
        all_pass &= o.passed;
    }
    if all_pass {
        Ok(())
    } else {
        Err(CliError::Failure("gradient check failed".into()))
    }
}
