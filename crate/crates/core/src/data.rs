//! Synthetic datasets and CSV ingestion.
//!
//! CSV layout: a header `f0,f1,…,f{D-1},label`, one example per line,
//! `.` as decimal separator, LF line endings.

use std::f64::consts::PI;
use std::fs::File;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets<F> {
    Classes { labels: Vec<usize>, num_classes: usize },
    Real(Vec<F>),
}

impl<F> Targets<F> {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Real(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<F> {
    pub features: Array2<F>,
    pub targets: Targets<F>,
    pub split: Split,
}

impl<F: Scalar> Dataset<F> {
    pub fn new(features: Array2<F>, targets: Targets<F>, split: Split) -> Result<Self> {
        if features.nrows() != targets.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                targets.len()
            )));
        }
        if let Targets::Classes { labels, num_classes } = &targets {
            if let Some(&bad) = labels.iter().find(|&&l| l >= *num_classes) {
                return Err(Error::Bounds {
                    index: bad,
                    len: *num_classes,
                });
            }
        }
        Ok(Self {
            features,
            targets,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> Option<usize> {
        match &self.targets {
            Targets::Classes { num_classes, .. } => Some(*num_classes),
            Targets::Real(_) => None,
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Classes { labels, .. } => Some(labels),
            Targets::Real(_) => None,
        }
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let features = self.features.select(Axis(0), indices);
        let targets = match &self.targets {
            Targets::Classes { labels, num_classes } => Targets::Classes {
                labels: indices.iter().map(|&i| labels[i]).collect(),
                num_classes: *num_classes,
            },
            Targets::Real(v) => Targets::Real(indices.iter().map(|&i| v[i]).collect()),
        };
        Self {
            features,
            targets,
            split: self.split,
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

fn normal(rng: &mut SeededRng) -> f64 {
    StandardNormal.sample(rng)
}

/// `classes` interleaved two-dimensional spiral arms.
///
/// Arm `k` starts at the origin with angle offset `2πk/C` and sweeps four
/// radians while its radius grows linearly to one; angles receive Gaussian
/// noise with standard deviation `noise_sd`.
pub fn gen_spirals<F: Scalar>(classes: usize, points_per_class: usize, noise_sd: f64, seed: u64) -> Result<Dataset<F>> {
    if classes < 2 {
        return Err(Error::Config("spirals need at least two classes".into()));
    }
    if !(noise_sd >= 0.0) {
        return Err(Error::Config("noise_sd must be nonnegative".into()));
    }
    let mut rng = SeededRng::new(seed);
    let n = classes * points_per_class;
    let mut features = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for k in 0..classes {
        for i in 0..points_per_class {
            let r = if points_per_class > 1 {
                i as f64 / (points_per_class - 1) as f64
            } else {
                0.0
            };
            let theta = 2.0 * PI * k as f64 / classes as f64 + 4.0 * r + noise_sd * normal(&mut rng);
            let row = k * points_per_class + i;
            features[[row, 0]] = F::of(r * theta.sin());
            features[[row, 1]] = F::of(r * theta.cos());
            labels.push(k);
        }
    }
    Dataset::new(
        features,
        Targets::Classes {
            labels,
            num_classes: classes,
        },
        Split::Train,
    )
}

/// Unit-variance isotropic Gaussian clusters centred on a circle of radius `separation`.
pub fn gen_blobs<F: Scalar>(classes: usize, points_per_class: usize, separation: f64, seed: u64) -> Result<Dataset<F>> {
    if classes < 2 {
        return Err(Error::Config("blobs need at least two classes".into()));
    }
    let mut rng = SeededRng::new(seed);
    let n = classes * points_per_class;
    let mut features = Array2::zeros((n, 2));
    let mut labels = Vec::with_capacity(n);
    for k in 0..classes {
        let angle = 2.0 * PI * k as f64 / classes as f64;
        let (cx, cy) = (separation * angle.cos(), separation * angle.sin());
        for i in 0..points_per_class {
            let row = k * points_per_class + i;
            features[[row, 0]] = F::of(cx + normal(&mut rng));
            features[[row, 1]] = F::of(cy + normal(&mut rng));
            labels.push(k);
        }
    }
    Dataset::new(
        features,
        Targets::Classes {
            labels,
            num_classes: classes,
        },
        Split::Train,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Classification { num_classes: usize },
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CsvSchema {
    pub num_features: usize,
    pub task: TaskKind,
}

fn header(num_features: usize) -> Vec<String> {
    (0..num_features)
        .map(|i| format!("f{i}"))
        .chain(std::iter::once("label".to_string()))
        .collect()
}

pub fn load_csv<F: Scalar>(path: impl AsRef<Path>, schema: CsvSchema, split: Split) -> Result<Dataset<F>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema, split)
}

pub fn read_csv<F: Scalar, R: std::io::Read>(reader: R, schema: CsvSchema, split: Split) -> Result<Dataset<F>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let expected = header(schema.num_features);
    let mut records = rdr.records();
    let parse_err = |line: u64, msg: String| Error::Parse {
        line: line as usize,
        msg,
    };
    let head = records
        .next()
        .ok_or_else(|| parse_err(1, "missing header row".into()))?
        .map_err(|e| parse_err(1, e.to_string()))?;
    if head.iter().map(str::trim).ne(expected.iter().map(String::as_str)) {
        return Err(parse_err(1, format!("header must be `{}`", expected.join(","))));
    }

    let width = schema.num_features;
    let mut values: Vec<F> = Vec::new();
    let mut labels = Vec::new();
    let mut reals = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width + 1 {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", width + 1, rec.len()),
            ));
        }
        for field in rec.iter().take(width) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("bad number `{field}`")))?;
            values.push(F::of(v));
        }
        let raw = rec[width].trim();
        match schema.task {
            TaskKind::Classification { num_classes } => {
                let l: usize = raw
                    .parse()
                    .map_err(|_| parse_err(line, format!("bad class label `{raw}`")))?;
                if l >= num_classes {
                    return Err(parse_err(line, format!("label {l} outside [0, {num_classes})")));
                }
                labels.push(l);
            }
            TaskKind::Regression => {
                let v: f64 = raw
                    .parse()
                    .map_err(|_| parse_err(line, format!("bad target `{raw}`")))?;
                reals.push(F::of(v));
            }
        }
    }
    let rows = values.len() / width.max(1);
    let rows = if width == 0 { labels.len() + reals.len() } else { rows };
    let features = Array2::from_shape_vec((rows, width), values).expect("row widths checked");
    let targets = match schema.task {
        TaskKind::Classification { num_classes } => Targets::Classes { labels, num_classes },
        TaskKind::Regression => Targets::Real(reals),
    };
    Dataset::new(features, targets, split)
}

/// Writes `dataset` in the CSV layout; numbers use Rust's shortest round-trip decimal form.
pub fn write_csv<F: Scalar, W: std::io::Write>(dataset: &Dataset<F>, writer: W) -> Result<()> {
    let to_err = |e: csv::Error| Error::Numeric(format!("csv write failed: {e}"));
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    w.write_record(header(dataset.num_features())).map_err(to_err)?;
    for (i, row) in dataset.features.rows().into_iter().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| format!("{}", v.as_f64())).collect();
        rec.push(match &dataset.targets {
            Targets::Classes { labels, .. } => labels[i].to_string(),
            Targets::Real(v) => format!("{}", v[i].as_f64()),
        });
        w.write_record(&rec).map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::Numeric(format!("csv flush failed: {e}")))
}

pub fn save_csv<F: Scalar>(dataset: &Dataset<F>, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_csv(dataset, &mut buf)?;
    crate::io::write_atomic(path.as_ref(), &buf)
}
