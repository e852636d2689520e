//! Accumulated gradient amounts under average-ensemble and stochastic
//! single-teacher distillation.
//!
//! For a fixed student trajectory `z_s^(1..L)` and teacher logits, the
//! per-class update amounts are
//!
//! ```text
//! G_avg[i] = Σ_l (ln p(z_s^(l),T)_i − a_i) / T,   a = p(mean_n z_t^(n), T)
//! G_skd[i] = Σ_l (ln p(z_s^(l),T)_i − b_i^(l)) / T, b^(l) = p(z_t^(n_l), T)
//! ```
//!
//! with `n_l` drawn independently each iteration. The shared `ln p` term
//! cancels in `G_skd − G_avg`; a second pair using `p` in place of `ln p`
//! (the true distilled-loss gradient) is tracked alongside and marked
//! `corrected`.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kd::{p_avg, p_skd, soft_targets, LogitVector, ProbVector};
use crate::sampling::{CategoricalSampler, SamplerState, SamplingDistribution};
use crate::scalar::{shifted_mean, shifted_variance, Scalar};

/// Soft target of the averaged teacher logits.
pub fn term_a<F: Scalar>(teachers: &[LogitVector<F>], temperature: F) -> Result<ProbVector<F>> {
    p_avg(teachers, temperature)
}

/// Soft target of the sampled teacher `n`.
pub fn term_b<F: Scalar>(teachers: &[LogitVector<F>], n: usize, temperature: F) -> Result<ProbVector<F>> {
    p_skd(teachers, n, temperature)
}

/// `E[b] = Σ_n P(n)·p(z_t^(n), T)`, evaluated as `t_0 + Σ_n P(n)(t_n − t_0)`
/// in teacher order. The anchored form is exact when all teachers agree.
pub fn expected_b<F: Scalar>(teacher_targets: &[Vec<F>], probs: &[F]) -> Result<Vec<F>> {
    let first = teacher_targets
        .first()
        .ok_or_else(|| Error::Config("teacher team is empty".into()))?;
    if probs.len() != teacher_targets.len() {
        return Err(Error::Shape(format!(
            "{} probabilities for {} teachers",
            probs.len(),
            teacher_targets.len()
        )));
    }
    Ok((0..first.len())
        .map(|i| {
            let delta = teacher_targets
                .iter()
                .zip(probs)
                .fold(F::zero(), |acc, (t, &p)| acc + p * (t[i] - first[i]));
            first[i] + delta
        })
        .collect())
}

/// Variance of `b_i` under the sampling distribution.
pub fn variance_b<F: Scalar>(teacher_targets: &[Vec<F>], probs: &[F]) -> Result<Vec<F>> {
    let mean = expected_b(teacher_targets, probs)?;
    Ok((0..mean.len())
        .map(|i| {
            teacher_targets
                .iter()
                .zip(probs)
                .fold(F::zero(), |acc, (t, &p)| acc + p * (t[i] - mean[i]) * (t[i] - mean[i]))
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientLedger<F> {
    pub temperature: F,
    pub iterations: usize,
    pub a: Vec<F>,
    pub teacher_targets: Vec<Vec<F>>,
    pub sampling_probs: Vec<F>,
    /// Teacher index drawn at each iteration.
    pub sampled: Vec<usize>,
    /// `b^(l)` for each iteration, one row per iteration.
    pub b_samples: Vec<Vec<F>>,
    pub g_avg: Vec<F>,
    pub g_skd: Vec<F>,
    pub g_avg_corrected: Vec<F>,
    pub g_skd_corrected: Vec<F>,
}

impl<F: Scalar> GradientLedger<F> {
    pub fn num_classes(&self) -> usize {
        self.a.len()
    }
}

fn log_softmax<F: Scalar>(z: &[F], t: F) -> Vec<F> {
    let max = z.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = z.iter().map(|&v| ((v - max) / t).exp()).sum::<F>().ln();
    z.iter().map(|&v| (v - max) / t - lse).collect()
}

pub fn simulate_ledger<F: Scalar>(
    teachers: &[LogitVector<F>],
    trajectory: &[LogitVector<F>],
    distribution: &SamplingDistribution<F>,
    temperature: F,
    seed: u64,
) -> Result<GradientLedger<F>> {
    if trajectory.is_empty() {
        return Err(Error::Config("student trajectory needs at least one iteration".into()));
    }
    let a = term_a(teachers, temperature)?.into_inner();
    let c = a.len();
    if distribution.len() != teachers.len() {
        return Err(Error::Shape(format!(
            "distribution over {} teachers for a team of {}",
            distribution.len(),
            teachers.len()
        )));
    }
    if let Some(bad) = trajectory.iter().position(|z| z.len() != c) {
        return Err(Error::Shape(format!(
            "student logits at iteration {bad} do not have {c} classes"
        )));
    }
    let teacher_targets: Vec<Vec<F>> = (0..teachers.len())
        .map(|n| term_b(teachers, n, temperature).map(ProbVector::into_inner))
        .collect::<Result<_>>()?;
    let probs = distribution.resolve()?;
    let sampler = CategoricalSampler::new(&probs);
    let mut state = SamplerState::new(seed);

    let zeros = || vec![F::zero(); c];
    let (mut g_avg, mut g_skd, mut g_avg_c, mut g_skd_c) = (zeros(), zeros(), zeros(), zeros());
    let mut sampled = Vec::with_capacity(trajectory.len());
    let mut b_samples = Vec::with_capacity(trajectory.len());
    for z_s in trajectory {
        let log_p = log_softmax(z_s.as_slice(), temperature);
        let p = soft_targets(z_s, temperature)?.into_inner();
        let n = sampler.sample(&mut state);
        let b = &teacher_targets[n];
        for i in 0..c {
            g_avg[i] += (log_p[i] - a[i]) / temperature;
            g_skd[i] += (log_p[i] - b[i]) / temperature;
            g_avg_c[i] += (p[i] - a[i]) / temperature;
            g_skd_c[i] += (p[i] - b[i]) / temperature;
        }
        sampled.push(n);
        b_samples.push(b.clone());
    }
    Ok(GradientLedger {
        temperature,
        iterations: trajectory.len(),
        a,
        teacher_targets,
        sampling_probs: probs.into_inner(),
        sampled,
        b_samples,
        g_avg,
        g_skd,
        g_avg_corrected: g_avg_c,
        g_skd_corrected: g_skd_c,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassSummary {
    pub class: usize,
    pub a: f64,
    pub e_b_closed: f64,
    pub e_b_mc: f64,
    /// `a − E[b]` from the closed form.
    pub gap: f64,
    pub gap_mc: f64,
    pub var_b: f64,
    pub var_b_closed: f64,
    pub g_avg: f64,
    pub g_skd: f64,
    pub g_avg_corrected: f64,
    pub g_skd_corrected: f64,
}

/// Largest deviation of the running mean of `b` from `E[b]` after `iteration` draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub max_abs_deviation: f64,
    /// `max_i sd(b_i) / sqrt(iteration)`, the SGD-style reference rate.
    pub reference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LedgerReport {
    pub temperature: f64,
    pub iterations: usize,
    pub classes: Vec<ClassSummary>,
    pub curve: Vec<CurvePoint>,
}

fn checkpoints(l: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut decade = 1;
    while decade <= l {
        for m in [1, 2, 5] {
            let k = m * decade;
            if k <= l {
                out.push(k);
            }
        }
        decade *= 10;
    }
    if out.last() != Some(&l) {
        out.push(l);
    }
    out
}

pub fn ledger_report<F: Scalar>(ledger: &GradientLedger<F>) -> Result<LedgerReport> {
    let c = ledger.num_classes();
    let e_b = expected_b(&ledger.teacher_targets, &ledger.sampling_probs)?;
    let var_closed = variance_b(&ledger.teacher_targets, &ledger.sampling_probs)?;
    let mut classes = Vec::with_capacity(c);
    for i in 0..c {
        let column: Vec<F> = ledger.b_samples.iter().map(|b| b[i]).collect();
        let mean = shifted_mean(column.iter().copied()).expect("ledger has iterations");
        let var = shifted_variance(&column).expect("ledger has iterations");
        classes.push(ClassSummary {
            class: i,
            a: ledger.a[i].as_f64(),
            e_b_closed: e_b[i].as_f64(),
            e_b_mc: mean.as_f64(),
            gap: (ledger.a[i] - e_b[i]).as_f64(),
            gap_mc: (ledger.a[i] - mean).as_f64(),
            var_b: var.as_f64(),
            var_b_closed: var_closed[i].as_f64(),
            g_avg: ledger.g_avg[i].as_f64(),
            g_skd: ledger.g_skd[i].as_f64(),
            g_avg_corrected: ledger.g_avg_corrected[i].as_f64(),
            g_skd_corrected: ledger.g_skd_corrected[i].as_f64(),
        });
    }

    let max_sd = var_closed.iter().map(|v| v.as_f64().sqrt()).fold(0.0, f64::max);
    let marks = checkpoints(ledger.iterations);
    let mut curve = Vec::with_capacity(marks.len());
    let mut sums = vec![0.0f64; c];
    let mut next = 0;
    for (l, b) in ledger.b_samples.iter().enumerate() {
        for i in 0..c {
            sums[i] += (b[i] - e_b[i]).as_f64();
        }
        if marks.get(next) == Some(&(l + 1)) {
            let k = (l + 1) as f64;
            curve.push(CurvePoint {
                iteration: l + 1,
                max_abs_deviation: sums.iter().map(|s| (s / k).abs()).fold(0.0, f64::max),
                reference: max_sd / k.sqrt(),
            });
            next += 1;
        }
    }
    Ok(LedgerReport {
        temperature: ledger.temperature.as_f64(),
        iterations: ledger.iterations,
        classes,
        curve,
    })
}

/// Mean and variance of `G_skd` across independent sampling seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedSweep {
    pub seeds: Vec<u64>,
    pub g_avg: Vec<f64>,
    pub g_skd_mean: Vec<f64>,
    pub g_skd_var: Vec<f64>,
    pub g_skd_corrected_mean: Vec<f64>,
    pub g_skd_corrected_var: Vec<f64>,
    /// Report over all seeds' draws pooled into one ledger.
    pub pooled: LedgerReport,
}

pub fn simulate_seeds<F: Scalar>(
    teachers: &[LogitVector<F>],
    trajectory: &[LogitVector<F>],
    distribution: &SamplingDistribution<F>,
    temperature: F,
    seeds: &[u64],
) -> Result<SeedSweep> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let ledgers: Vec<GradientLedger<F>> = seeds
        .par_iter()
        .map(|&s| simulate_ledger(teachers, trajectory, distribution, temperature, s))
        .collect::<Result<_>>()?;
    let c = ledgers[0].num_classes();
    let across = |pick: &dyn Fn(&GradientLedger<F>) -> F| -> (f64, f64) {
        let values: Vec<F> = ledgers.iter().map(pick).collect();
        (
            shifted_mean(values.iter().copied()).expect("seeds nonempty").as_f64(),
            shifted_variance(&values).expect("seeds nonempty").as_f64(),
        )
    };
    let (g_skd_mean, g_skd_var): (Vec<f64>, Vec<f64>) = (0..c).map(|i| across(&|l| l.g_skd[i])).unzip();
    let (gc_mean, gc_var): (Vec<f64>, Vec<f64>) = (0..c).map(|i| across(&|l| l.g_skd_corrected[i])).unzip();
    let mut pooled = ledgers[0].clone();
    for l in &ledgers[1..] {
        pooled.sampled.extend_from_slice(&l.sampled);
        pooled.b_samples.extend(l.b_samples.iter().cloned());
    }
    pooled.iterations = pooled.b_samples.len();
    let mut pooled_report = ledger_report(&pooled)?;
    // G values are per-run quantities; the pooled report keeps the first seed's.
    pooled_report.iterations = ledgers[0].iterations;
    Ok(SeedSweep {
        seeds: seeds.to_vec(),
        g_avg: ledgers[0].g_avg.iter().map(|v| v.as_f64()).collect(),
        g_skd_mean,
        g_skd_var,
        g_skd_corrected_mean: gc_mean,
        g_skd_corrected_var: gc_var,
        pooled: pooled_report,
    })
}

/// Rows of the `simulate-gradients` CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationRow {
    pub class: usize,
    pub a: f64,
    #[serde(rename = "E_b_closed")]
    pub e_b_closed: f64,
    #[serde(rename = "E_b_mc")]
    pub e_b_mc: f64,
    pub gap: f64,
    pub var_b: f64,
    pub g_avg: f64,
    pub g_skd_mean: f64,
    pub g_skd_var: f64,
}

impl SeedSweep {
    /// One row per class; `corrected` selects the `p`-based ledger.
    pub fn rows(&self, corrected: bool) -> Vec<SimulationRow> {
        self.pooled
            .classes
            .iter()
            .enumerate()
            .map(|(i, cs)| SimulationRow {
                class: cs.class,
                a: cs.a,
                e_b_closed: cs.e_b_closed,
                e_b_mc: cs.e_b_mc,
                gap: cs.gap,
                var_b: cs.var_b,
                g_avg: if corrected { cs.g_avg_corrected } else { self.g_avg[i] },
                g_skd_mean: if corrected {
                    self.g_skd_corrected_mean[i]
                } else {
                    self.g_skd_mean[i]
                },
                g_skd_var: if corrected {
                    self.g_skd_corrected_var[i]
                } else {
                    self.g_skd_var[i]
                },
            })
            .collect()
    }
}
