//! Experiment orchestration: teacher training, distillation under each
//! regime, regime comparison tables, sampler statistics and gradient-ledger
//! simulations.
//!
//! Seeds: a run with seed `s` initializes the student from `s`, shuffles
//! batches from `s ^ SHUFFLE_STREAM` and draws teachers from
//! `s ^ SAMPLER_STREAM`, so the teacher stream never perturbs batch order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::convergence::{simulate_seeds, SeedSweep};
use crate::data::{gen_blobs, gen_spirals, load_csv, CsvSchema, Dataset, Split, TaskKind};
use crate::error::{Error, Result};
use crate::kd::{
    avg_ensemble_logits, grad_total_wrt_student_logits, mtbert_grad_with, mtbert_loss_with, soft_targets, student_loss,
    total_loss, KdConfig, LogitVector, MtbertConfig, OneHotLabel,
};
use crate::metrics::MetricReport;
use crate::nn::{Activation, Mlp};
use crate::optim::{AdamConfig, OptimizerConfig, OptimizerState, SgdConfig};
use crate::rng::{split_seed, SeededRng};
use crate::sampling::{
    chi_square_test, sample_counts, ChiSquareTest, DistributionSpec, SamplerState, SamplingDistribution, TeacherTeam,
};

pub const SHUFFLE_STREAM: u64 = 0x5348_5546;
pub const SAMPLER_STREAM: u64 = 0x5341_4d50;
pub const TEST_STREAM: u64 = 0x7e57;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    None,
    VanillaKd,
    AvgEnsemble,
    Mtbert,
    Skd,
}

impl Regime {
    pub const ALL: [Regime; 5] = [
        Regime::None,
        Regime::VanillaKd,
        Regime::AvgEnsemble,
        Regime::Mtbert,
        Regime::Skd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::None => "none",
            Regime::VanillaKd => "vanilla_kd",
            Regime::AvgEnsemble => "avg_ensemble",
            Regime::Mtbert => "mtbert",
            Regime::Skd => "skd",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown regime `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Spirals,
    Blobs,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub classes: usize,
    pub points_per_class: usize,
    pub test_points_per_class: usize,
    pub noise: f64,
    pub separation: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_path: Option<PathBuf>,
    pub num_features: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Spirals,
            classes: 3,
            points_per_class: 200,
            test_points_per_class: 200,
            noise: 0.1,
            separation: 6.0,
            seed: 2024,
            train_path: None,
            test_path: None,
            num_features: 2,
        }
    }
}

impl DatasetConfig {
    /// Train and test splits; generated test sets use `seed ^ TEST_STREAM`.
    pub fn build(&self) -> Result<(Dataset<f64>, Dataset<f64>)> {
        let test_seed = split_seed(self.seed, TEST_STREAM);
        let (train, test) = match self.kind {
            DatasetKind::Spirals => (
                gen_spirals(self.classes, self.points_per_class, self.noise, self.seed)?,
                gen_spirals(self.classes, self.test_points_per_class, self.noise, test_seed)?,
            ),
            DatasetKind::Blobs => (
                gen_blobs(self.classes, self.points_per_class, self.separation, self.seed)?,
                gen_blobs(self.classes, self.test_points_per_class, self.separation, test_seed)?,
            ),
            DatasetKind::Csv => {
                let schema = CsvSchema {
                    num_features: self.num_features,
                    task: TaskKind::Classification {
                        num_classes: self.classes,
                    },
                };
                let path = |p: &Option<PathBuf>, key: &str| {
                    p.clone()
                        .ok_or_else(|| Error::Config(format!("csv datasets need `dataset.{key}`")))
                };
                (
                    load_csv(path(&self.train_path, "train_path")?, schema, Split::Train)?,
                    load_csv(path(&self.test_path, "test_path")?, schema, Split::Test)?,
                )
            }
        };
        if train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        Ok((train.with_split(Split::Train), test.with_split(Split::Test)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            hidden: vec![8],
            activation: Activation::Relu,
        }
    }
}

impl ArchConfig {
    pub fn dims(&self, input: usize, classes: usize) -> Vec<usize> {
        std::iter::once(input)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(classes))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeamConfig {
    /// Hidden widths of each teacher.
    pub hidden: Vec<Vec<usize>>,
    pub activation: Activation,
    pub epochs: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub names: Option<Vec<String>>,
    /// Load these `SKDLAB-MODEL-v1` files instead of training.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoints: Option<Vec<PathBuf>>,
}

impl Default for TeamConfig {
    fn default() -> Self {
        Self {
            hidden: vec![vec![4], vec![8], vec![16], vec![32], vec![64]],
            activation: Activation::Relu,
            epochs: 200,
            seed: 7,
            names: None,
            checkpoints: None,
        }
    }
}

impl TeamConfig {
    pub fn len(&self) -> usize {
        self.checkpoints.as_ref().map_or(self.hidden.len(), Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn names(&self) -> Vec<String> {
        self.names
            .clone()
            .unwrap_or_else(|| TeacherTeam::<f64>::default_names(self.len()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KdSection {
    pub temperature: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Temperature of the teacher prediction in the MTBERT weight `1/(1+CE(y, p_t))`.
    pub mtbert_quality_temperature: f64,
}

impl Default for KdSection {
    fn default() -> Self {
        Self {
            temperature: 4.0,
            alpha: 1.0,
            beta: 1.0,
            mtbert_quality_temperature: 1.0,
        }
    }
}

impl KdSection {
    pub fn kd_config(&self) -> Result<KdConfig<f64>> {
        KdConfig::new(self.temperature, self.alpha, self.beta)
    }

    pub fn mtbert_config(&self) -> MtbertConfig<f64> {
        MtbertConfig {
            temperature: self.temperature,
            quality_temperature: self.mtbert_quality_temperature,
        }
    }
}

/// When SKD draws a new teacher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    #[default]
    Batch,
    Epoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub regime: Regime,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub student: ArchConfig,
    pub teachers: TeamConfig,
    pub kd: KdSection,
    pub distribution: DistributionSpec,
    pub optimizer: OptimizerConfig<f64>,
    pub granularity: Granularity,
    /// Regimes listed by `compare-regimes`.
    pub compare: Vec<Regime>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "spirals".into(),
            regime: Regime::Skd,
            seeds: vec![0, 1, 2, 3, 4],
            epochs: 200,
            batch_size: 32,
            out: PathBuf::from("runs"),
            dataset: DatasetConfig::default(),
            student: ArchConfig::default(),
            teachers: TeamConfig::default(),
            kd: KdSection::default(),
            distribution: DistributionSpec::default(),
            optimizer: OptimizerConfig::Adam(AdamConfig::default()),
            granularity: Granularity::Batch,
            compare: vec![Regime::None, Regime::AvgEnsemble, Regime::Mtbert, Regime::Skd],
        }
    }
}

pub const PRESETS: [&str; 3] = ["default", "cifar-analog", "glue-analog"];

impl ExperimentConfig {
    /// Named starting points: `default` (spirals, 200 epochs, batch 32, Adam),
    /// `cifar-analog` (240 epochs, batch 64, SGD 0.05 with ×0.1 at
    /// 150/180/210, weight decay 5e-4) and `glue-analog` (Adam with 10%
    /// warmup and linear decay, batch 32, 15 epochs).
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        match name {
            "default" => Ok(base),
            "cifar-analog" => Ok(Self {
                name: "cifar-analog".into(),
                epochs: 240,
                batch_size: 64,
                optimizer: OptimizerConfig::Sgd(SgdConfig::default()),
                teachers: TeamConfig {
                    epochs: 240,
                    ..base.teachers.clone()
                },
                ..base
            }),
            "glue-analog" => Ok(Self {
                name: "glue-analog".into(),
                epochs: 15,
                batch_size: 32,
                optimizer: OptimizerConfig::Adam(AdamConfig {
                    peak_lr: 2e-2,
                    ..AdamConfig::default()
                }),
                teachers: TeamConfig {
                    epochs: 10,
                    ..base.teachers.clone()
                },
                ..base
            }),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected one of {})",
                PRESETS.join(", ")
            ))),
        }
    }

    /// Parses TOML, layering the file over its `preset` key (or `preset` when given).
    pub fn from_toml_str(text: &str, preset: Option<&str>) -> Result<Self> {
        let mut file: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("config is not valid TOML: {e}")))?;
        let file_preset = match file.remove("preset") {
            Some(toml::Value::String(s)) => Some(s),
            Some(_) => return Err(Error::Config("`preset` must be a string".into())),
            None => None,
        };
        let name = preset
            .map(str::to_owned)
            .or(file_preset)
            .unwrap_or_else(|| "default".into());
        let base = Self::preset(&name)?;
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        // An explicit optimizer kind replaces the preset's optimizer wholesale.
        if file.get("optimizer").and_then(|o| o.get("kind")).is_some() {
            merged.remove("optimizer");
        }
        merge_tables(&mut merged, file);
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, preset: Option<&str>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, preset)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.optimizer.validate()?;
        if self.regime != Regime::None {
            self.kd.kd_config()?;
        }
        let n = self.teachers.len();
        if let Some(names) = &self.teachers.names {
            if names.len() != n {
                return Err(Error::Config(format!("{} teacher names for {n} teachers", names.len())));
            }
        }
        match self.regime {
            Regime::VanillaKd if n != 1 => {
                return Err(Error::Config(format!("vanilla_kd needs exactly one teacher, got {n}")))
            }
            Regime::AvgEnsemble | Regime::Mtbert | Regime::Skd if n == 0 => {
                return Err(Error::Config(format!(
                    "{} needs at least one teacher",
                    self.regime.name()
                )))
            }
            _ => {}
        }
        if self.regime == Regime::Skd {
            self.distribution.build::<f64>(n)?;
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(json).iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train: MetricReport,
    pub test: MetricReport,
}

/// Instrumentation of teacher forward passes per optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ComputeCounters {
    pub iterations: u64,
    pub teacher_forwards: u64,
    pub min_forwards_per_iteration: u64,
    pub max_forwards_per_iteration: u64,
}

impl ComputeCounters {
    fn record(&mut self, forwards: u64) {
        if self.iterations == 0 {
            self.min_forwards_per_iteration = forwards;
            self.max_forwards_per_iteration = forwards;
        } else {
            self.min_forwards_per_iteration = self.min_forwards_per_iteration.min(forwards);
            self.max_forwards_per_iteration = self.max_forwards_per_iteration.max(forwards);
        }
        self.iterations += 1;
        self.teacher_forwards += forwards;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub regime: Regime,
    pub seed: u64,
    pub config_hash: String,
    pub kd: Option<KdSection>,
    pub epochs: Vec<EpochRecord>,
    /// Test metrics after the last epoch.
    pub final_metrics: MetricReport,
    /// Epoch (1-based; 0 = untrained) with the best test headline metric.
    pub best_epoch: usize,
    pub best_metrics: MetricReport,
    /// Mean batch loss of every optimizer step.
    pub step_losses: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_names: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_sample_counts: Option<Vec<u64>>,
    pub counters: ComputeCounters,
    pub wall_clock_secs: f64,
}

impl RunReport {
    /// Reports are equal up to wall-clock time.
    pub fn same_metrics(&self, other: &Self) -> bool {
        let strip = |r: &Self| Self {
            wall_clock_secs: 0.0,
            ..r.clone()
        };
        strip(self) == strip(other)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }
}

fn labels_of(d: &Dataset<f64>) -> Result<&[usize]> {
    d.labels()
        .ok_or_else(|| Error::Config("distillation requires a classification dataset".into()))
}

fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                )
                .0
        })
        .collect()
}

pub fn evaluate(model: &Mlp<f64>, data: &Dataset<f64>) -> Result<MetricReport> {
    let labels = labels_of(data)?;
    if data.is_empty() {
        return Ok(MetricReport::default());
    }
    let preds = argmax_rows(&model.infer(data.features.view())?);
    MetricReport::classification(&preds, labels)
}

/// How the per-batch target and loss are formed.
enum Target<'a> {
    None,
    Teacher {
        team: &'a TeacherTeam<f64>,
        regime: Regime,
        kd: KdConfig<f64>,
        mtbert: MtbertConfig<f64>,
    },
}

fn row_logits(m: &Array2<f64>, i: usize) -> Result<LogitVector<f64>> {
    LogitVector::new(m.row(i).to_vec())
}

/// Per-row loss and `∂loss/∂z_s` for a batch; returns the mean loss.
fn batch_objective(
    target: &Target<'_>,
    student_logits: &Array2<f64>,
    x: &Array2<f64>,
    labels: &[usize],
    teacher: Option<usize>,
    counters: &mut ComputeCounters,
) -> Result<(f64, Array2<f64>)> {
    let (b, c) = student_logits.dim();
    let mut upstream = Array2::zeros((b, c));
    let mut total = 0.0;
    match target {
        Target::None => {
            for i in 0..b {
                let z = student_logits.row(i);
                let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
                total += lse - z[labels[i]];
                for k in 0..c {
                    let p = (z[k] - lse).exp();
                    upstream[[i, k]] = p - if k == labels[i] { 1.0 } else { 0.0 };
                }
            }
        }
        Target::Teacher {
            team,
            regime,
            kd,
            mtbert,
        } => {
            let forward_all =
                || -> Result<Vec<Array2<f64>>> { team.teachers().iter().map(|t| t.infer(x.view())).collect() };
            let (teacher_logits, forwards) = match regime {
                Regime::VanillaKd => (vec![team.teachers()[0].infer(x.view())?], 1),
                Regime::Skd => {
                    let n = teacher.expect("skd draws a teacher");
                    (vec![team.teachers()[n].infer(x.view())?], 1)
                }
                Regime::AvgEnsemble | Regime::Mtbert => (forward_all()?, team.len() as u64),
                Regime::None => unreachable!("no-KD runs carry no teacher"),
            };
            counters.record(forwards);
            for i in 0..b {
                let y = OneHotLabel::new(labels[i], c)?;
                let z_s = row_logits(student_logits, i)?;
                let rows: Vec<LogitVector<f64>> =
                    teacher_logits.iter().map(|m| row_logits(m, i)).collect::<Result<_>>()?;
                let (loss, grad) = match regime {
                    Regime::Mtbert => {
                        let d = mtbert_loss_with(&rows, &z_s, y, mtbert)?;
                        let gd = mtbert_grad_with(&rows, &z_s, y, mtbert)?;
                        let p_s = soft_targets(&z_s, kd.temperature)?;
                        let s = student_loss(y, &p_s)?;
                        let grad = gd
                            .iter()
                            .zip(p_s.as_slice())
                            .enumerate()
                            .map(|(k, (g, p))| {
                                let hot = if k == y.class() { 1.0 } else { 0.0 };
                                kd.alpha * g + kd.beta * (p - hot) / kd.temperature
                            })
                            .collect::<Vec<_>>();
                        (kd.alpha * d + kd.beta * s, grad)
                    }
                    Regime::AvgEnsemble => {
                        let z_t = avg_ensemble_logits(&rows)?;
                        (
                            total_loss(&z_t, &z_s, y, kd)?,
                            grad_total_wrt_student_logits(&z_t, &z_s, y, kd)?,
                        )
                    }
                    _ => (
                        total_loss(&rows[0], &z_s, y, kd)?,
                        grad_total_wrt_student_logits(&rows[0], &z_s, y, kd)?,
                    ),
                };
                total += loss;
                for (k, g) in grad.into_iter().enumerate() {
                    upstream[[i, k]] = g;
                }
            }
        }
    }
    Ok((total / b as f64, upstream))
}

struct TrainSpec<'a> {
    name: &'a str,
    regime: Regime,
    seed: u64,
    epochs: usize,
    batch_size: usize,
    optimizer: &'a OptimizerConfig<f64>,
    granularity: Granularity,
    config_hash: String,
    kd: Option<KdSection>,
}

fn train_model(
    model: &mut Mlp<f64>,
    spec: &TrainSpec<'_>,
    target: &Target<'_>,
    train: &Dataset<f64>,
    test: &Dataset<f64>,
) -> Result<RunReport> {
    let started = Instant::now();
    let labels = labels_of(train)?;
    let batches_per_epoch = train.len().div_ceil(spec.batch_size);
    let optimizer = spec.optimizer.with_total_steps(spec.epochs * batches_per_epoch);
    optimizer.validate()?;
    let mut state = OptimizerState::new(model);
    let mut shuffle_rng = SeededRng::new(split_seed(spec.seed, SHUFFLE_STREAM));
    let mut sampler = SamplerState::new(split_seed(spec.seed, SAMPLER_STREAM));
    let team = match target {
        Target::Teacher { team, .. } => Some(*team),
        Target::None => None,
    };
    let mut sample_counts = team.map(|t| vec![0u64; t.len()]);
    let mut counters = ComputeCounters::default();
    let mut step_losses = Vec::with_capacity(spec.epochs * batches_per_epoch);
    let mut epochs = Vec::with_capacity(spec.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let initial = evaluate(model, test)?;
    let (mut best_epoch, mut best_metrics) = (0, initial);
    let mut epoch_teacher = None;

    for epoch in 0..spec.epochs {
        state.epoch = epoch;
        order.shuffle(&mut shuffle_rng);
        if spec.regime == Regime::Skd && spec.granularity == Granularity::Epoch {
            epoch_teacher = Some(team.expect("skd has a team").sampler().sample(&mut sampler));
        }
        let mut loss_sum = 0.0;
        for chunk in order.chunks(spec.batch_size) {
            let x = train.features.select(Axis(0), chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let teacher = match (spec.regime, spec.granularity) {
                (Regime::Skd, Granularity::Batch) => Some(team.expect("skd has a team").sampler().sample(&mut sampler)),
                (Regime::Skd, Granularity::Epoch) => epoch_teacher,
                _ => None,
            };
            if let (Some(n), Some(counts)) = (teacher, sample_counts.as_mut()) {
                counts[n] += 1;
            }
            let logits = model.forward(x.view())?;
            let (loss, upstream) = batch_objective(target, &logits, &x, &y, teacher, &mut counters)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "{}: non-finite loss at epoch {epoch}, step {}",
                    spec.name,
                    step_losses.len()
                )));
            }
            let tape = model.backward(upstream.view())?;
            optimizer.step(model, &tape, &mut state)?;
            step_losses.push(loss);
            loss_sum += loss;
        }
        let train_metrics = evaluate(model, train)?;
        let test_metrics = evaluate(model, test)?;
        if test_metrics.headline() > best_metrics.headline() {
            best_epoch = epoch + 1;
            best_metrics = test_metrics;
        }
        epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / batches_per_epoch as f64,
            train: train_metrics,
            test: test_metrics,
        });
    }
    model.clear_cache();
    let final_metrics = epochs.last().map_or(initial, |e| e.test);
    Ok(RunReport {
        name: spec.name.to_string(),
        regime: spec.regime,
        seed: spec.seed,
        config_hash: spec.config_hash.clone(),
        kd: spec.kd.clone(),
        epochs,
        final_metrics,
        best_epoch,
        best_metrics,
        step_losses,
        teacher_names: team.map(|t| t.names().to_vec()),
        teacher_sample_counts: if spec.regime == Regime::Skd {
            sample_counts
        } else {
            None
        },
        counters,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Trains each teacher independently on the training split with plain
/// cross-entropy; teacher `i` uses seed `teachers.seed ^ i`.
pub fn train_teachers(
    cfg: &ExperimentConfig,
    train: &Dataset<f64>,
    test: &Dataset<f64>,
) -> Result<Vec<(Mlp<f64>, RunReport)>> {
    let classes = train
        .num_classes()
        .ok_or_else(|| Error::Config("teachers need a classification dataset".into()))?;
    let names = cfg.teachers.names();
    let hash = cfg.hash();
    cfg.teachers
        .hidden
        .par_iter()
        .enumerate()
        .map(|(i, hidden)| {
            let seed = split_seed(cfg.teachers.seed, i as u64);
            let arch = ArchConfig {
                hidden: hidden.clone(),
                activation: cfg.teachers.activation,
            };
            let mut model = Mlp::init(&arch.dims(train.num_features(), classes), arch.activation, seed)?;
            let spec = TrainSpec {
                name: &names[i],
                regime: Regime::None,
                seed,
                epochs: cfg.teachers.epochs,
                batch_size: cfg.batch_size,
                optimizer: &cfg.optimizer,
                granularity: Granularity::Batch,
                config_hash: hash.clone(),
                kd: None,
            };
            let report = train_model(&mut model, &spec, &Target::None, train, test)?;
            Ok((model, report))
        })
        .collect()
}

/// Loads `teachers.checkpoints`, or trains the configured team.
pub fn build_team(cfg: &ExperimentConfig, train: &Dataset<f64>, test: &Dataset<f64>) -> Result<TeacherTeam<f64>> {
    let models = match &cfg.teachers.checkpoints {
        Some(paths) => paths.iter().map(Mlp::load).collect::<Result<Vec<_>>>()?,
        None => train_teachers(cfg, train, test)?.into_iter().map(|(m, _)| m).collect(),
    };
    let dist = cfg.distribution.build::<f64>(models.len())?;
    TeacherTeam::new(models, cfg.teachers.names(), dist)
}

/// Distills a fresh student for one seed under `cfg.regime`.
pub fn distill(
    cfg: &ExperimentConfig,
    team: Option<&TeacherTeam<f64>>,
    train: &Dataset<f64>,
    test: &Dataset<f64>,
    seed: u64,
) -> Result<RunReport> {
    let classes = train
        .num_classes()
        .ok_or_else(|| Error::Config("distillation requires a classification dataset".into()))?;
    let target = match cfg.regime {
        Regime::None => Target::None,
        regime => {
            let team = team.ok_or_else(|| Error::Config(format!("{} needs a teacher team", regime.name())))?;
            if regime == Regime::VanillaKd && team.len() != 1 {
                return Err(Error::Config(format!(
                    "vanilla_kd needs exactly one teacher, got {}",
                    team.len()
                )));
            }
            if team.num_classes() != classes || team.teachers()[0].input_dim() != train.num_features() {
                return Err(Error::Shape(format!(
                    "teachers map {} -> {}, data has {} features and {classes} classes",
                    team.teachers()[0].input_dim(),
                    team.num_classes(),
                    train.num_features()
                )));
            }
            Target::Teacher {
                team,
                regime,
                kd: cfg.kd.kd_config()?,
                mtbert: cfg.kd.mtbert_config(),
            }
        }
    };
    let mut student = Mlp::init(
        &cfg.student.dims(train.num_features(), classes),
        cfg.student.activation,
        seed,
    )?;
    let spec = TrainSpec {
        name: &cfg.name,
        regime: cfg.regime,
        seed,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        optimizer: &cfg.optimizer,
        granularity: cfg.granularity,
        config_hash: cfg.hash(),
        kd: (cfg.regime != Regime::None).then(|| cfg.kd.clone()),
    };
    train_model(&mut student, &spec, &target, train, test)
}

/// `distill` for every seed in `cfg.seeds`, in parallel.
pub fn distill_seeds(
    cfg: &ExperimentConfig,
    team: Option<&TeacherTeam<f64>>,
    train: &Dataset<f64>,
    test: &Dataset<f64>,
) -> Result<Vec<RunReport>> {
    cfg.seeds
        .par_iter()
        .map(|&s| distill(cfg, team, train, test, s))
        .collect()
}

/// Reports of every seed, keyed by team name and regime.
pub type RunsByCell = BTreeMap<(String, Regime), Vec<RunReport>>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub team: String,
    pub regime: Regime,
    pub metric: &'static str,
    pub n_seeds: usize,
    pub last_mean: f64,
    pub last_sd: f64,
    pub best_mean: f64,
    pub best_sd: f64,
    pub delta_vs_none: f64,
    /// `↑` when the last-epoch mean is at least the no-KD mean, `↓` otherwise.
    pub arrow: &'static str,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub const HEADER: [&'static str; 10] = [
        "team",
        "regime",
        "metric",
        "n_seeds",
        "last_mean",
        "last_sd",
        "best_mean",
        "best_sd",
        "delta_vs_none",
        "arrow",
    ];

    pub fn to_csv(&self) -> String {
        let mut s = Self::HEADER.join(",");
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.team,
                r.regime.name(),
                r.metric,
                r.n_seeds,
                r.last_mean,
                r.last_sd,
                r.best_mean,
                r.best_sd,
                r.delta_vs_none,
                r.arrow
            );
        }
        s
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

fn headline(m: &MetricReport) -> f64 {
    m.headline().unwrap_or(f64::NAN)
}

/// Runs every `(team, regime, seed)` cell and tabulates test accuracy as
/// mean ± sd over seeds, with the arrow against the team's no-KD baseline.
pub fn compare_regimes(
    cfg: &ExperimentConfig,
    regimes: &[Regime],
    teams: &[(String, TeacherTeam<f64>)],
    train: &Dataset<f64>,
    test: &Dataset<f64>,
) -> Result<(ComparisonTable, RunsByCell)> {
    if regimes.is_empty() || teams.is_empty() {
        return Err(Error::Config(
            "compare-regimes needs at least one regime and one team".into(),
        ));
    }
    let mut wanted: Vec<Regime> = regimes.to_vec();
    if !wanted.contains(&Regime::None) {
        wanted.push(Regime::None);
    }
    wanted.sort();
    wanted.dedup();
    let cells: Vec<(usize, Regime, u64)> = (0..teams.len())
        .flat_map(|t| {
            wanted
                .iter()
                .flat_map(move |&r| cfg.seeds.iter().map(move |&s| (t, r, s)))
        })
        .collect();
    let results: Vec<((usize, Regime), RunReport)> = cells
        .par_iter()
        .map(|&(t, regime, seed)| {
            let cell_cfg = ExperimentConfig { regime, ..cfg.clone() };
            let team = (regime != Regime::None).then_some(&teams[t].1);
            distill(&cell_cfg, team, train, test, seed).map(|r| ((t, regime), r))
        })
        .collect::<Result<_>>()?;
    let mut runs = RunsByCell::new();
    for ((t, regime), report) in results {
        runs.entry((teams[t].0.clone(), regime)).or_default().push(report);
    }
    let mut rows = Vec::new();
    for (team_name, _) in teams {
        let baseline = &runs[&(team_name.clone(), Regime::None)];
        let base_last: Vec<f64> = baseline.iter().map(|r| headline(&r.final_metrics)).collect();
        let (base_mean, _) = mean_sd(&base_last);
        for &regime in regimes {
            let reports = &runs[&(team_name.clone(), regime)];
            let last: Vec<f64> = reports.iter().map(|r| headline(&r.final_metrics)).collect();
            let best: Vec<f64> = reports.iter().map(|r| headline(&r.best_metrics)).collect();
            let (last_mean, last_sd) = mean_sd(&last);
            let (best_mean, best_sd) = mean_sd(&best);
            let delta = last_mean - base_mean;
            rows.push(ComparisonRow {
                team: team_name.clone(),
                regime,
                metric: "accuracy",
                n_seeds: reports.len(),
                last_mean,
                last_sd,
                best_mean,
                best_sd,
                delta_vs_none: delta,
                arrow: if delta >= 0.0 { "↑" } else { "↓" },
            });
        }
    }
    Ok((ComparisonTable { rows }, runs))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleStats {
    pub probabilities: Vec<f64>,
    pub counts: Vec<u64>,
    pub frequencies: Vec<f64>,
    pub chi_square: ChiSquareTest,
}

pub fn sample_stats(spec: &DistributionSpec, teachers: usize, draws: usize, seed: u64) -> Result<SampleStats> {
    let dist: SamplingDistribution<f64> = spec.build(teachers)?;
    let sampler = crate::sampling::CategoricalSampler::new(&dist.resolve()?);
    let counts = sample_counts(&sampler, &mut SamplerState::new(seed), draws)?;
    let chi_square = chi_square_test(&counts, sampler.probabilities())?;
    Ok(SampleStats {
        probabilities: sampler.probabilities().to_vec(),
        frequencies: counts.iter().map(|&c| c as f64 / draws as f64).collect(),
        counts,
        chi_square,
    })
}

/// Student logits fed to the gradient ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TrajectorySpec {
    /// The same logits at every iteration.
    Fixed { logits: Vec<f64> },
    /// Independent uniform logits in `[-scale, scale]`.
    Random { scale: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSpec {
    pub teacher_logits: Vec<Vec<f64>>,
    pub temperature: f64,
    pub iterations: usize,
    pub num_seeds: usize,
    pub seed: u64,
    pub trajectory: TrajectorySpec,
    pub distribution: DistributionSpec,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        Self {
            teacher_logits: vec![vec![2.0, 0.0, -1.0], vec![0.0, 1.5, 0.0], vec![-1.0, 0.0, 3.0]],
            temperature: 1.0,
            iterations: 10_000,
            num_seeds: 20,
            seed: 0,
            trajectory: TrajectorySpec::Random { scale: 2.0, seed: 1 },
            distribution: DistributionSpec::default(),
        }
    }
}

impl SimulationSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("invalid simulation spec: {e}")))
    }

    pub fn run(&self) -> Result<SeedSweep> {
        let teachers: Vec<LogitVector<f64>> = self
            .teacher_logits
            .iter()
            .map(|z| LogitVector::from_slice(z))
            .collect::<Result<_>>()?;
        let c = teachers
            .first()
            .ok_or_else(|| Error::Config("simulation needs teacher logits".into()))?
            .len();
        let trajectory: Vec<LogitVector<f64>> = match &self.trajectory {
            TrajectorySpec::Fixed { logits } => {
                let z = LogitVector::from_slice(logits)?;
                vec![z; self.iterations]
            }
            TrajectorySpec::Random { scale, seed } => {
                let mut rng = SeededRng::new(*seed);
                (0..self.iterations)
                    .map(|_| LogitVector::new((0..c).map(|_| scale * (2.0 * rng.uniform() - 1.0)).collect()))
                    .collect::<Result<_>>()?
            }
        };
        let dist = self.distribution.build::<f64>(teachers.len())?;
        let seeds: Vec<u64> = (0..self.num_seeds as u64).map(|i| split_seed(self.seed, i)).collect();
        simulate_seeds(&teachers, &trajectory, &dist, self.temperature, &seeds)
    }
}
