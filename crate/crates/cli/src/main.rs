use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use skdlab::gradcheck::{gradcheck, GradcheckSpec};
use skdlab::harness::{
    build_team, compare_regimes, distill_seeds, sample_stats, train_teachers, ExperimentConfig, Regime, SimulationSpec,
};
use skdlab::io::{rows_to_csv, write_atomic, write_json};
use skdlab::sampling::{DistributionKind, DistributionSpec};
use skdlab::Error;

const CONFIG_ERROR: u8 = 2;
const NUMERIC_FAILURE: u8 = 3;

#[derive(Parser)]
#[command(name = "skdlab", version, about = "Multi-teacher knowledge distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Base preset: default, cifar-analog or glue-analog.
    #[arg(long)]
    preset: Option<String>,
    /// Overrides the seed list (or the teacher seed for train-teachers).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured teacher team and save checkpoints.
    TrainTeachers(Common),
    /// Distill a student under the configured regime for every seed.
    Distill {
        #[command(flatten)]
        common: Common,
        /// Overrides `regime`.
        #[arg(long)]
        regime: Option<String>,
    },
    /// Check analytic loss gradients against central differences.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Instances per loss family.
        #[arg(long)]
        instances: Option<usize>,
    },
    /// Monte-Carlo ledger of averaged-ensemble vs sampled-teacher gradient terms.
    SimulateGradients {
        /// TOML simulation settings.
        #[arg(long, short)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Number of independent sampling seeds.
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Draw teachers and test the frequencies against the resolved distribution.
    SampleStats {
        #[arg(long, default_value_t = 4)]
        teachers: usize,
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// uniform, explicit, score_proportional or rank_softmax.
        #[arg(long, default_value = "uniform")]
        kind: String,
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        scores: Option<Vec<f64>>,
        #[arg(long)]
        rank_temperature: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every regime over the seed list and tabulate against no-KD.
    CompareRegimes {
        #[command(flatten)]
        common: Common,
        /// Comma-separated regimes; defaults to the config's `compare` list.
        #[arg(long, value_delimiter = ',')]
        regimes: Option<Vec<String>>,
    },
}

fn load_config(common: &Common) -> skdlab::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path, common.preset.as_deref())?,
        None => ExperimentConfig::preset(common.preset.as_deref().unwrap_or("default"))?,
    };
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_train_teachers(common: Common) -> skdlab::Result<()> {
    let mut cfg = load_config(&common)?;
    if let Some(seed) = common.seed {
        cfg.teachers.seed = seed;
    }
    let (train, test) = cfg.dataset.build()?;
    let dir = cfg.out.join("teachers");
    for (model, report) in train_teachers(&cfg, &train, &test)? {
        model.save(dir.join(format!("{}.model", report.name)))?;
        report.save(&dir.join(format!("{}.json", report.name)))?;
        println!(
            "{}: dims {:?}, test accuracy {:.4}",
            report.name,
            model.dims(),
            report.final_metrics.accuracy.unwrap_or(f64::NAN)
        );
    }
    println!("checkpoints in {}", dir.display());
    Ok(())
}

fn run_distill(common: Common, regime: Option<String>) -> skdlab::Result<()> {
    let mut cfg = load_config(&common)?;
    if let Some(r) = regime {
        cfg.regime = Regime::parse(&r)?;
        cfg.validate()?;
    }
    let (train, test) = cfg.dataset.build()?;
    let team = match cfg.regime {
        Regime::None => None,
        _ => Some(build_team(&cfg, &train, &test)?),
    };
    let dir = cfg.out.join(&cfg.name).join(cfg.regime.name());
    for report in distill_seeds(&cfg, team.as_ref(), &train, &test)? {
        report.save(&dir.join(format!("seed-{}.json", report.seed)))?;
        println!(
            "{} seed {}: last accuracy {:.4}, best {:.4} at epoch {}",
            cfg.regime.name(),
            report.seed,
            report.final_metrics.accuracy.unwrap_or(f64::NAN),
            report.best_metrics.accuracy.unwrap_or(f64::NAN),
            report.best_epoch
        );
    }
    Ok(())
}

fn run_gradcheck(seed: Option<u64>, out: Option<PathBuf>, instances: Option<usize>) -> Result<(), Failure> {
    let mut spec = GradcheckSpec::default();
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(n) = instances {
        spec.instances_per_family = n;
    }
    let report = gradcheck(&spec)?;
    for f in &report.families {
        println!(
            "{:?}: {} instances, max relative error {:.3e} ({})",
            f.family,
            f.instances,
            f.max_rel_err,
            if f.passed { "pass" } else { "FAIL" }
        );
    }
    if let Some(dir) = out {
        write_json(&dir.join("gradcheck.json"), &report)?;
    }
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Numeric(format!(
            "gradient check exceeded tolerance {:e}",
            spec.tolerance
        )))
    }
}

fn run_simulate(
    config: Option<PathBuf>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    iterations: Option<usize>,
    seeds: Option<usize>,
    temperature: Option<f64>,
) -> skdlab::Result<()> {
    let mut spec = match config {
        Some(path) => SimulationSpec::load(path)?,
        None => SimulationSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(l) = iterations {
        spec.iterations = l;
    }
    if let Some(k) = seeds {
        spec.num_seeds = k;
    }
    if let Some(t) = temperature {
        spec.temperature = t;
    }
    let sweep = spec.run()?;
    let out = out.unwrap_or_else(|| PathBuf::from("runs"));
    let rows = sweep.rows(false);
    let csv = rows_to_csv(&rows)?;
    print!("{csv}");
    write_atomic(&out.join("simulate-gradients.csv"), csv.as_bytes())?;
    write_atomic(
        &out.join("simulate-gradients-corrected.csv"),
        rows_to_csv(&sweep.rows(true))?.as_bytes(),
    )?;
    write_json(&out.join("simulate-gradients.json"), &sweep)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_sample_stats(
    teachers: usize,
    draws: usize,
    seed: u64,
    kind: &str,
    weights: Option<Vec<f64>>,
    scores: Option<Vec<f64>>,
    rank_temperature: Option<f64>,
    out: Option<PathBuf>,
) -> skdlab::Result<()> {
    let kind = match kind {
        "uniform" => DistributionKind::Uniform,
        "explicit" => DistributionKind::Explicit,
        "score_proportional" => DistributionKind::ScoreProportional,
        "rank_softmax" => DistributionKind::RankSoftmax,
        other => return Err(Error::Config(format!("unknown distribution kind `{other}`"))),
    };
    let teachers = weights.as_ref().or(scores.as_ref()).map_or(teachers, Vec::len);
    let spec = DistributionSpec {
        kind,
        weights,
        scores,
        rank_temperature,
    };
    let stats = sample_stats(&spec, teachers, draws, seed)?;
    println!("teacher,probability,count,frequency");
    for i in 0..teachers {
        println!(
            "{},{},{},{}",
            i, stats.probabilities[i], stats.counts[i], stats.frequencies[i]
        );
    }
    println!(
        "chi-square {:.4} on {} dof, p-value {:.6}",
        stats.chi_square.statistic, stats.chi_square.dof, stats.chi_square.p_value
    );
    if let Some(dir) = out {
        write_json(&dir.join("sample-stats.json"), &stats)?;
    }
    Ok(())
}

fn run_compare(common: Common, regimes: Option<Vec<String>>) -> skdlab::Result<()> {
    let cfg = load_config(&common)?;
    let regimes = match regimes {
        Some(names) => names
            .iter()
            .map(|r| Regime::parse(r))
            .collect::<skdlab::Result<Vec<_>>>()?,
        None => cfg.compare.clone(),
    };
    let (train, test) = cfg.dataset.build()?;
    let team = build_team(&cfg, &train, &test)?;
    let (table, runs) = compare_regimes(&cfg, &regimes, &[("TT1".to_string(), team)], &train, &test)?;
    let dir = cfg.out.join(&cfg.name);
    for ((_, regime), reports) in &runs {
        for r in reports {
            r.save(&dir.join(regime.name()).join(format!("seed-{}.json", r.seed)))?;
        }
    }
    let csv = table.to_csv();
    print!("{csv}");
    write_atomic(&dir.join("comparison.csv"), csv.as_bytes())?;
    Ok(())
}

enum Failure {
    Run(Error),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

fn exit_code(f: &Failure) -> u8 {
    match f {
        Failure::Run(Error::Numeric(_)) | Failure::Numeric(_) => NUMERIC_FAILURE,
        Failure::Run(_) => CONFIG_ERROR,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result: Result<(), Failure> = match cli.command {
        Command::TrainTeachers(c) => run_train_teachers(c).map_err(Into::into),
        Command::Distill { common, regime } => run_distill(common, regime).map_err(Into::into),
        Command::Gradcheck { seed, out, instances } => run_gradcheck(seed, out, instances),
        Command::SimulateGradients {
            config,
            seed,
            out,
            iterations,
            seeds,
            temperature,
        } => run_simulate(config, seed, out, iterations, seeds, temperature).map_err(Into::into),
        Command::SampleStats {
            teachers,
            draws,
            seed,
            kind,
            weights,
            scores,
            rank_temperature,
            out,
        } => run_sample_stats(teachers, draws, seed, &kind, weights, scores, rank_temperature, out).map_err(Into::into),
        Command::CompareRegimes { common, regimes } => run_compare(common, regimes).map_err(Into::into),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Run(e) => eprintln!("error: {e}"),
                Failure::Numeric(msg) => eprintln!("error: {msg}"),
            }
            ExitCode::from(exit_code(&f))
        }
    }
}
