use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use covertwatch_core::pipeline::experiment::{
    decisions_csv, evaluate_all, infer, read_data, read_models, simulate, train_offline, write_data, write_models,
    write_report, ExperimentConfig, ExperimentReport, Method,
};
use covertwatch_core::pipeline::PipelineError;
use covertwatch_core::plant::GridModel;
use covertwatch_core::threat::Scenario;

const EXIT_CONFIG: u8 = 2;
const EXIT_SIMULATION: u8 = 3;
const EXIT_TRAINING: u8 = 4;
const EXIT_EVALUATION: u8 = 5;

#[derive(Parser)]
#[command(name = "covertwatch", version, about = "Covert attack detection and localization on a simulated power grid")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    /// The proposed VAE/LSTM detector.
    Vae,
    /// The autoencoder baseline.
    Ae,
}

impl Baseline {
    fn method(self) -> Method {
        match self {
            Baseline::Vae => Method::Proposed,
            Baseline::Ae => Method::Ae,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate labeled datasets and state-estimation residuals.
    Simulate(Common),
    /// Train per-level models and the classifier.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "vae")]
        baseline: Baseline,
        /// Levels trained in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run a trained detector over a dataset and print per-frame decisions.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "vae")]
        baseline: Baseline,
        /// Dataset CSV; the held-out test set when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Contamination level of the models to use.
        #[arg(long, default_value_t = 0.0)]
        level: f64,
    },
    /// Score trained detectors on the held-out data.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated methods: proposed, ae.
        #[arg(long, default_value = "proposed")]
        compare: String,
    },
}

struct Failure {
    code: u8,
    message: String,
}

fn fail(code: u8) -> impl Fn(PipelineError) -> Failure {
    move |e| {
        let code = if matches!(e, PipelineError::InvalidConfig(_) | PipelineError::InsufficientAttackData(_)) { EXIT_CONFIG } else { code };
        Failure { code, message: e.to_string() }
    }
}

fn config_failure(e: PipelineError) -> Failure {
    Failure { code: EXIT_CONFIG, message: e.to_string() }
}

struct Setup {
    config: ExperimentConfig,
    grid: GridModel,
}

fn setup(common: &Common) -> Result<Setup, Failure> {
    let mut config = match &common.config {
        Some(p) => ExperimentConfig::load(p).map_err(config_failure)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        config.seed = s;
    }
    if let Some(o) = &common.out {
        config.output = o.clone();
    }
    let grid = config.load_grid().map_err(config_failure)?;
    Ok(Setup { config, grid })
}

fn progress(msg: &str) {
    eprintln!("{msg}");
}

fn scenarios(s: &Setup) -> Result<Vec<Scenario>, Failure> {
    s.config.load_scenarios(&s.grid).map_err(config_failure)
}

fn cmd_simulate(common: &Common) -> Result<(), Failure> {
    let s = setup(common)?;
    let scenarios = scenarios(&s)?;
    progress(&format!("simulating {} test scenarios", scenarios.len()));
    let data = simulate(&s.grid, &s.config, &scenarios).map_err(fail(EXIT_SIMULATION))?;
    let manifest = write_data(&s.config.output, &data, &s.config).map_err(fail(EXIT_SIMULATION))?;
    println!("{:<32} {:>8}", "file", "rows");
    for f in &manifest.files {
        println!("{:<32} {:>8}", f.name, f.rows);
    }
    Ok(())
}

fn cmd_train(common: &Common, baseline: Baseline, jobs: usize) -> Result<(), Failure> {
    let s = setup(common)?;
    if jobs == 0 {
        return Err(Failure { code: EXIT_CONFIG, message: "--jobs must be at least 1".into() });
    }
    let data = read_data(&s.config.output, &s.grid, &s.config).map_err(fail(EXIT_TRAINING))?;
    let method = baseline.method();
    let models = train_offline(&data, &s.config, &[method], jobs, &progress).map_err(fail(EXIT_TRAINING))?;
    write_models(&s.config.output, &s.config, &models).map_err(fail(EXIT_TRAINING))?;
    println!("{:<10} {:>6} {:>10} {:>8} {:>12}", "model", "level", "epochs", "best", "test loss");
    let row = |name: &str, level: Option<f64>, h: &covertwatch_core::neural::train::TrainHistory| {
        let level = level.map_or("-".to_string(), |l| l.to_string());
        println!("{name:<10} {level:>6} {:>10} {:>8} {:>12.6}", h.epochs.len(), h.best_epoch, h.best_test_loss());
    };
    if let Some(p) = &models.proposed {
        for m in &p.levels {
            row("vae", Some(m.level), &m.vae_history);
            row("lstm", Some(m.level), &m.lstm_history);
        }
        row("dnn", None, &p.dnn.history);
    }
    if let Some(b) = &models.baseline {
        for m in &b.levels {
            row("ae", Some(m.level), &m.history);
        }
        row("dnn_ae", None, &b.dnn.history);
    }
    Ok(())
}

fn cmd_infer(common: &Common, baseline: Baseline, input: Option<&PathBuf>, level: f64) -> Result<(), Failure> {
    let s = setup(common)?;
    let method = baseline.method();
    let data = read_data(&s.config.output, &s.grid, &s.config).map_err(fail(EXIT_EVALUATION))?;
    let models = read_models(&s.config.output, &[method]).map_err(fail(EXIT_EVALUATION))?;
    let set = match input {
        None => data.test.clone(),
        Some(p) => {
            let d = covertwatch_core::io::read_dataset(p, &s.grid).map_err(fail(EXIT_EVALUATION))?;
            let weights: Vec<f64> = data.noise_std.iter().map(|s| 1.0 / (s * s)).collect();
            let se = covertwatch_core::pipeline::se_residuals(&s.grid, &d, &weights).map_err(fail(EXIT_EVALUATION))?;
            covertwatch_core::pipeline::experiment::ResidualSet { data: d, se }
        }
    };
    let result = infer(&set, &data.noise_std, &s.config, &models, method, level).map_err(fail(EXIT_EVALUATION))?;
    progress(&format!("{} decisions over {} frames", result.decisions.len(), set.data.len()));
    print!("{}", decisions_csv(&set.data, &result));
    Ok(())
}

fn print_report(report: &ExperimentReport, methods: &[Method]) {
    println!("{:<10} {:>6} {:>9} {:>10} {:>8} {:>8} {:>8}", "method", "level", "accuracy", "precision", "recall", "f1", "auc");
    for e in &report.entries {
        let r = &e.report;
        let auc = r.auc.map_or("-".to_string(), |a| format!("{a:.4}"));
        println!(
            "{:<10} {:>6} {:>9.4} {:>10.4} {:>8.4} {:>8.4} {:>8}",
            e.method.name(),
            e.level,
            r.accuracy,
            r.macro_precision,
            r.macro_recall,
            r.macro_f1,
            auc
        );
    }
    if methods.len() > 1 {
        println!();
        let header: Vec<String> = methods.iter().map(|m| format!("{:>10}", m.name())).collect();
        println!("{:>6} {}", "level", header.join(" "));
        let mut levels: Vec<f64> = report.entries.iter().map(|e| e.level).collect();
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        for l in levels {
            let cells: Vec<String> = methods
                .iter()
                .map(|&m| report.entry(m, l).map_or(format!("{:>10}", "-"), |r| format!("{:>10.4}", r.accuracy)))
                .collect();
            println!("{l:>6} {}", cells.join(" "));
        }
    }
    for p in &report.sweep {
        println!("severity {:>4}: mean attack probability {:.4}", p.severity, p.mean_attack_probability);
    }
}

fn cmd_evaluate(common: &Common, compare: &str) -> Result<(), Failure> {
    let s = setup(common)?;
    let mut methods = Vec::new();
    for name in compare.split(',') {
        let m = Method::parse(name)
            .ok_or_else(|| Failure { code: EXIT_CONFIG, message: format!("unknown method {name:?} (expected proposed or ae)") })?;
        if !methods.contains(&m) {
            methods.push(m);
        }
    }
    let data = read_data(&s.config.output, &s.grid, &s.config).map_err(fail(EXIT_EVALUATION))?;
    let models = read_models(&s.config.output, &methods).map_err(fail(EXIT_EVALUATION))?;
    let report = evaluate_all(&data, &s.config, &models, &progress).map_err(fail(EXIT_EVALUATION))?;
    write_report(&s.config.output, &report).map_err(fail(EXIT_EVALUATION))?;
    for e in report.entries.iter().flat_map(|e| e.report.warnings.iter().map(move |w| (e, w))) {
        progress(&format!("warning ({} level {}): {}", e.0.method.name(), e.0.level, e.1));
    }
    print_report(&report, &methods);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(c) => cmd_simulate(c),
        Command::Train { common, baseline, jobs } => cmd_train(common, *baseline, *jobs),
        Command::Infer { common, baseline, input, level } => cmd_infer(common, *baseline, input.as_ref(), *level),
        Command::Evaluate { common, compare } => cmd_evaluate(common, compare),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
