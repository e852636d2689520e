//! Categorical distributions over a teacher team and the seeded per-iteration
//! teacher selector.
//!
//! Draws use inverse-CDF over the resolved probabilities in teacher order: a
//! uniform `u ∈ [0, 1)` selects the first index whose cumulative mass exceeds
//! `u`. Zero-mass teachers occupy empty intervals and are never selected.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::kd::ProbVector;
use crate::nn::Mlp;
use crate::rng::SeededRng;
use crate::scalar::Scalar;

/// Offset added after min-shifting scores so the lowest score keeps some mass.
pub const SCORE_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum SamplingDistribution<F> {
    Uniform { n: usize },
    Explicit { weights: Vec<F> },
    ScoreProportional { scores: Vec<F> },
    RankSoftmax { scores: Vec<F>, rank_temperature: F },
}

impl<F: Scalar> SamplingDistribution<F> {
    pub fn len(&self) -> usize {
        match self {
            Self::Uniform { n } => *n,
            Self::Explicit { weights } => weights.len(),
            Self::ScoreProportional { scores } | Self::RankSoftmax { scores, .. } => scores.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> DistributionKind {
        match self {
            Self::Uniform { .. } => DistributionKind::Uniform,
            Self::Explicit { .. } => DistributionKind::Explicit,
            Self::ScoreProportional { .. } => DistributionKind::ScoreProportional,
            Self::RankSoftmax { .. } => DistributionKind::RankSoftmax,
        }
    }

    /// Probability of drawing each teacher.
    pub fn resolve(&self) -> Result<ProbVector<F>> {
        if self.is_empty() {
            return Err(Error::Config("sampling distribution over zero teachers".into()));
        }
        match self {
            Self::Uniform { n } => {
                let p = F::one() / F::of(*n as f64);
                ProbVector::new(vec![p; *n])
            }
            Self::Explicit { weights } => {
                if weights.iter().any(|&w| w < F::zero()) {
                    return Err(Error::Config(format!("negative sampling weight in {weights:?}")));
                }
                if weights.iter().all(|&w| w == F::zero()) {
                    return Err(Error::Config("explicit sampling weights are all zero".into()));
                }
                ProbVector::normalized(weights)
            }
            Self::ScoreProportional { scores } => {
                check_finite(scores)?;
                let min = scores.iter().copied().fold(F::infinity(), F::min);
                let eps = F::of(SCORE_EPSILON);
                let shifted: Vec<F> = scores.iter().map(|&s| s - min + eps).collect();
                ProbVector::normalized(&shifted)
            }
            Self::RankSoftmax {
                scores,
                rank_temperature,
            } => {
                check_finite(scores)?;
                if !(*rank_temperature > F::zero()) {
                    return Err(Error::Config("rank_temperature must be positive".into()));
                }
                let max = scores.iter().copied().fold(F::neg_infinity(), F::max);
                let exps: Vec<F> = scores.iter().map(|&s| ((s - max) / *rank_temperature).exp()).collect();
                ProbVector::normalized(&exps)
            }
        }
    }
}

fn check_finite<F: Scalar>(scores: &[F]) -> Result<()> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Config(format!("non-finite score in {scores:?}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistributionKind {
    Uniform,
    Explicit,
    ScoreProportional,
    RankSoftmax,
}

/// Config-file form: `distribution = { kind, weights?, scores?, rank_temperature? }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionSpec {
    pub kind: DistributionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_temperature: Option<f64>,
}

impl Default for DistributionSpec {
    fn default() -> Self {
        Self {
            kind: DistributionKind::Uniform,
            weights: None,
            scores: None,
            rank_temperature: None,
        }
    }
}

impl DistributionSpec {
    /// Builds the distribution for a team of `n` teachers.
    pub fn build<F: Scalar>(&self, n: usize) -> Result<SamplingDistribution<F>> {
        let field = |v: &Option<Vec<f64>>, name: &str| -> Result<Vec<F>> {
            let v = v
                .as_ref()
                .ok_or_else(|| Error::Config(format!("distribution kind {:?} needs `{name}`", self.kind)))?;
            if v.len() != n {
                return Err(Error::Config(format!(
                    "`{name}` has {} entries for {n} teachers",
                    v.len()
                )));
            }
            Ok(v.iter().map(|&x| F::of(x)).collect())
        };
        let dist =
            match self.kind {
                DistributionKind::Uniform => SamplingDistribution::Uniform { n },
                DistributionKind::Explicit => SamplingDistribution::Explicit {
                    weights: field(&self.weights, "weights")?,
                },
                DistributionKind::ScoreProportional => SamplingDistribution::ScoreProportional {
                    scores: field(&self.scores, "scores")?,
                },
                DistributionKind::RankSoftmax => SamplingDistribution::RankSoftmax {
                    scores: field(&self.scores, "scores")?,
                    rank_temperature: F::of(self.rank_temperature.ok_or_else(|| {
                        Error::Config("distribution kind rank_softmax needs `rank_temperature`".into())
                    })?),
                },
            };
        dist.resolve()?;
        Ok(dist)
    }
}

/// Inverse-CDF sampler over a resolved probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalSampler {
    probs: Vec<f64>,
    cumulative: Vec<f64>,
    last_nonzero: usize,
}

impl CategoricalSampler {
    pub fn new<F: Scalar>(probs: &ProbVector<F>) -> Self {
        let probs: Vec<f64> = probs.as_slice().iter().map(|p| p.as_f64()).collect();
        let mut acc = 0.0;
        let cumulative = probs
            .iter()
            .map(|&p| {
                acc += p;
                acc
            })
            .collect();
        let last_nonzero = probs.iter().rposition(|&p| p > 0.0).expect("resolved mass is positive");
        Self {
            probs,
            cumulative,
            last_nonzero,
        }
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn index_for(&self, u: f64) -> usize {
        // First boundary strictly above u; equal boundaries resolve to the lower index.
        let i = self.cumulative.partition_point(|&c| c <= u);
        i.min(self.last_nonzero)
    }

    pub fn sample(&self, state: &mut SamplerState) -> usize {
        let u = state.rng.uniform();
        state.counter += 1;
        self.index_for(u)
    }
}

/// Deterministic draw stream.
#[derive(Debug, Clone)]
pub struct SamplerState {
    rng: SeededRng,
    counter: u64,
}

impl SamplerState {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: SeededRng::new(seed),
            counter: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.rng.seed()
    }

    /// Number of draws made so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }
}

/// `N` frozen teachers, their names and the distribution used to pick one.
#[derive(Debug, Clone)]
pub struct TeacherTeam<F> {
    teachers: Vec<Mlp<F>>,
    names: Vec<String>,
    distribution: SamplingDistribution<F>,
    sampler: CategoricalSampler,
}

impl<F: Scalar> TeacherTeam<F> {
    pub fn new(teachers: Vec<Mlp<F>>, names: Vec<String>, distribution: SamplingDistribution<F>) -> Result<Self> {
        let first = teachers
            .first()
            .ok_or_else(|| Error::Config("teacher team is empty".into()))?;
        if names.len() != teachers.len() {
            return Err(Error::Config(format!(
                "{} names for {} teachers",
                names.len(),
                teachers.len()
            )));
        }
        if distribution.len() != teachers.len() {
            return Err(Error::Config(format!(
                "distribution over {} teachers for a team of {}",
                distribution.len(),
                teachers.len()
            )));
        }
        let (c, d) = (first.num_classes(), first.input_dim());
        for (t, name) in teachers.iter().zip(&names) {
            if t.num_classes() != c || t.input_dim() != d {
                return Err(Error::Shape(format!(
                    "teacher {name} maps {} -> {}, team expects {d} -> {c}",
                    t.input_dim(),
                    t.num_classes()
                )));
            }
        }
        let sampler = CategoricalSampler::new(&distribution.resolve()?);
        Ok(Self {
            teachers,
            names,
            distribution,
            sampler,
        })
    }

    /// Names `T01`, `T02`, ... in team order.
    pub fn default_names(n: usize) -> Vec<String> {
        (1..=n).map(|i| format!("T{i:02}")).collect()
    }

    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }

    pub fn teachers(&self) -> &[Mlp<F>] {
        &self.teachers
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn distribution(&self) -> &SamplingDistribution<F> {
        &self.distribution
    }

    pub fn sampler(&self) -> &CategoricalSampler {
        &self.sampler
    }

    pub fn num_classes(&self) -> usize {
        self.teachers[0].num_classes()
    }
}

pub fn sample_teacher<F: Scalar>(team: &TeacherTeam<F>, state: &mut SamplerState) -> usize {
    team.sampler.sample(state)
}

/// Normalized histogram of `draws` samples.
pub fn empirical_frequencies(sampler: &CategoricalSampler, state: &mut SamplerState, draws: usize) -> Result<Vec<f64>> {
    let counts = sample_counts(sampler, state, draws)?;
    Ok(counts.iter().map(|&c| c as f64 / draws as f64).collect())
}

pub fn sample_counts(sampler: &CategoricalSampler, state: &mut SamplerState, draws: usize) -> Result<Vec<u64>> {
    if draws == 0 {
        return Err(Error::Config("draws must be positive".into()));
    }
    let mut counts = vec![0u64; sampler.len()];
    for _ in 0..draws {
        counts[sampler.sample(state)] += 1;
    }
    Ok(counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChiSquareTest {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Pearson goodness-of-fit of `counts` against `probs`. Categories with zero
/// probability are excluded; any count landing on one gives `p = 0`.
pub fn chi_square_test(counts: &[u64], probs: &[f64]) -> Result<ChiSquareTest> {
    if counts.len() != probs.len() {
        return Err(Error::Shape(format!(
            "{} counts for {} categories",
            counts.len(),
            probs.len()
        )));
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Config("no observations".into()));
    }
    let mut statistic = 0.0;
    let mut live = 0usize;
    for (&c, &p) in counts.iter().zip(probs) {
        if p == 0.0 {
            if c > 0 {
                return Ok(ChiSquareTest {
                    statistic: f64::INFINITY,
                    dof: 0,
                    p_value: 0.0,
                });
            }
            continue;
        }
        live += 1;
        let expected = p * total as f64;
        statistic += (c as f64 - expected).powi(2) / expected;
    }
    let dof = live.saturating_sub(1);
    let p_value = if dof == 0 {
        1.0
    } else {
        let dist = ChiSquared::new(dof as f64).map_err(|e| Error::Numeric(e.to_string()))?;
        1.0 - dist.cdf(statistic)
    };
    Ok(ChiSquareTest {
        statistic,
        dof,
        p_value,
    })
}
