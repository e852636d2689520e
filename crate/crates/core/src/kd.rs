//! Knowledge-distillation losses and their gradients with respect to the
//! student's logits.
//!
//! Soft targets are `p_i = exp(z_i/T) / Σ_j exp(z_j/T)`. The total loss is
//! `α·CE(p(z_t,T), p(z_s,T)) + β·CE(y, p(z_s,T))`; both terms use the
//! student's tempered prediction. Gradients carry a single `1/T`:
//! `∂CE(p_t, p_s)/∂z_s = (p_s − p_t)/T`. No `T²` rescaling is applied.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{shifted_mean, Scalar};

/// Raw class scores of length `C ≥ 2`, all finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector<F>(Vec<F>);

impl<F: Scalar> LogitVector<F> {
    pub fn new(values: Vec<F>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Shape(format!(
                "logits need at least 2 classes, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("logit {i} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn from_slice(values: &[F]) -> Result<Self> {
        Self::new(values.to_vec())
    }

    pub fn as_slice(&self) -> &[F] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<F> {
        self.0
    }
}

/// Probability vector: entries in `[0, 1]` summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector<F>(Vec<F>);

impl<F: Scalar> ProbVector<F> {
    pub fn new(values: Vec<F>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Shape("empty probability vector".into()));
        }
        if values.iter().any(|&p| !(p >= F::zero() && p <= F::one())) {
            return Err(Error::Config(format!("probabilities must lie in [0, 1]: {values:?}")));
        }
        let sum: F = values.iter().copied().sum();
        if (sum - F::one()).abs() > F::simplex_tol(values.len()) {
            return Err(Error::Config(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self(values))
    }

    /// Normalizes nonnegative weights.
    pub fn normalized(weights: &[F]) -> Result<Self> {
        if weights.iter().any(|&w| !(w >= F::zero()) || !w.is_finite()) {
            return Err(Error::Config(format!(
                "weights must be finite and nonnegative: {weights:?}"
            )));
        }
        let total: F = weights.iter().copied().sum();
        if total <= F::zero() {
            return Err(Error::Config("weights sum to zero".into()));
        }
        Ok(Self(weights.iter().map(|&w| w / total).collect()))
    }

    pub(crate) fn from_softmax(values: Vec<F>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[F] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<F> {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct OneHotLabel {
    class: usize,
    num_classes: usize,
}

impl OneHotLabel {
    pub fn new(class: usize, num_classes: usize) -> Result<Self> {
        if class >= num_classes {
            return Err(Error::Bounds {
                index: class,
                len: num_classes,
            });
        }
        Ok(Self { class, num_classes })
    }

    pub fn class(&self) -> usize {
        self.class
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn to_dense<F: Scalar>(&self) -> Vec<F> {
        (0..self.num_classes)
            .map(|k| if k == self.class { F::one() } else { F::zero() })
            .collect()
    }
}

/// Temperature and the weights of the distilled and student terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdConfig<F> {
    pub temperature: F,
    pub alpha: F,
    pub beta: F,
}

impl<F: Scalar> KdConfig<F> {
    pub fn new(temperature: F, alpha: F, beta: F) -> Result<Self> {
        let cfg = Self {
            temperature,
            alpha,
            beta,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        if !(self.alpha >= F::zero()) || !(self.beta >= F::zero()) {
            return Err(Error::Config("alpha and beta must be nonnegative".into()));
        }
        if !(self.alpha + self.beta > F::zero()) {
            return Err(Error::Config("alpha + beta must be positive".into()));
        }
        Ok(())
    }
}

impl<F: Scalar> Default for KdConfig<F> {
    fn default() -> Self {
        Self {
            temperature: F::of(4.0),
            alpha: F::one(),
            beta: F::one(),
        }
    }
}

fn check_temperature<F: Scalar>(t: F) -> Result<()> {
    if !(t > F::zero()) || !t.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

fn check_same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: lengths {a} and {b} differ")));
    }
    Ok(())
}

fn softmax<F: Scalar>(z: &[F], t: F) -> Vec<F> {
    let max = z.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = z.iter().map(|&v| ((v - max) / t).exp()).collect();
    let total: F = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `ln p(z, T)` via log-sum-exp.
fn log_softmax<F: Scalar>(z: &[F], t: F) -> Vec<F> {
    let max = z.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = z.iter().map(|&v| ((v - max) / t).exp()).sum::<F>().ln();
    z.iter().map(|&v| (v - max) / t - lse).collect()
}

/// `Σ_k −target_k · ln pred_k` with `pred` clamped away from zero.
pub fn cross_entropy<F: Scalar>(target: &[F], pred: &[F]) -> Result<F> {
    check_same_len(target.len(), pred.len(), "cross-entropy")?;
    let floor = F::prob_floor();
    Ok(target
        .iter()
        .zip(pred)
        .map(|(&a, &b)| {
            if a == F::zero() {
                F::zero()
            } else {
                -a * b.max(floor).ln()
            }
        })
        .sum())
}

fn cross_entropy_log<F: Scalar>(target: &[F], log_pred: &[F]) -> F {
    target
        .iter()
        .zip(log_pred)
        .map(|(&a, &lb)| if a == F::zero() { F::zero() } else { -a * lb })
        .sum()
}

/// Tempered softmax of `z`.
pub fn soft_targets<F: Scalar>(z: &LogitVector<F>, temperature: F) -> Result<ProbVector<F>> {
    check_temperature(temperature)?;
    Ok(ProbVector::from_softmax(softmax(z.as_slice(), temperature)))
}

/// Cross-entropy from the teacher soft target to the student soft target.
pub fn distilled_loss<F: Scalar>(p_t: &ProbVector<F>, p_s: &ProbVector<F>) -> Result<F> {
    cross_entropy(p_t.as_slice(), p_s.as_slice())
}

/// `−ln p_s[y]`.
pub fn student_loss<F: Scalar>(y: OneHotLabel, p_s: &ProbVector<F>) -> Result<F> {
    check_same_len(y.num_classes(), p_s.len(), "student loss")?;
    Ok(-p_s.as_slice()[y.class()].max(F::prob_floor()).ln())
}

pub fn total_loss<F: Scalar>(
    z_t: &LogitVector<F>,
    z_s: &LogitVector<F>,
    y: OneHotLabel,
    cfg: &KdConfig<F>,
) -> Result<F> {
    cfg.validate()?;
    check_same_len(z_t.len(), z_s.len(), "teacher/student logits")?;
    check_same_len(y.num_classes(), z_s.len(), "label/student logits")?;
    let t = cfg.temperature;
    let log_ps = log_softmax(z_s.as_slice(), t);
    let p_t = softmax(z_t.as_slice(), t);
    let distilled = cross_entropy_log(&p_t, &log_ps);
    let student = -log_ps[y.class()];
    Ok(cfg.alpha * distilled + cfg.beta * student)
}

/// `(p(z_s,T) − p(z_t,T)) / T`.
pub fn grad_distilled_wrt_student_logits<F: Scalar>(
    z_t: &LogitVector<F>,
    z_s: &LogitVector<F>,
    temperature: F,
) -> Result<Vec<F>> {
    check_temperature(temperature)?;
    check_same_len(z_t.len(), z_s.len(), "teacher/student logits")?;
    let p_s = softmax(z_s.as_slice(), temperature);
    let p_t = softmax(z_t.as_slice(), temperature);
    Ok(p_s.iter().zip(&p_t).map(|(&s, &t)| (s - t) / temperature).collect())
}

/// `α·(p_s − p_t)/T + β·(p_s − onehot(y))/T`.
pub fn grad_total_wrt_student_logits<F: Scalar>(
    z_t: &LogitVector<F>,
    z_s: &LogitVector<F>,
    y: OneHotLabel,
    cfg: &KdConfig<F>,
) -> Result<Vec<F>> {
    cfg.validate()?;
    check_same_len(z_t.len(), z_s.len(), "teacher/student logits")?;
    check_same_len(y.num_classes(), z_s.len(), "label/student logits")?;
    let t = cfg.temperature;
    let p_s = softmax(z_s.as_slice(), t);
    let p_t = softmax(z_t.as_slice(), t);
    Ok(p_s
        .iter()
        .zip(&p_t)
        .enumerate()
        .map(|(k, (&s, &pt))| {
            let yk = if k == y.class() { F::one() } else { F::zero() };
            cfg.alpha * (s - pt) / t + cfg.beta * (s - yk) / t
        })
        .collect())
}

fn check_team<F: Scalar>(team: &[LogitVector<F>]) -> Result<usize> {
    let first = team
        .first()
        .ok_or_else(|| Error::Config("teacher team is empty".into()))?;
    for (i, z) in team.iter().enumerate() {
        check_same_len(first.len(), z.len(), &format!("teacher {i} logits"))?;
    }
    Ok(first.len())
}

/// Elementwise mean of the teachers' logits.
pub fn avg_ensemble_logits<F: Scalar>(team: &[LogitVector<F>]) -> Result<LogitVector<F>> {
    let c = check_team(team)?;
    let mean = (0..c)
        .map(|k| shifted_mean(team.iter().map(|z| z.as_slice()[k])).expect("team is nonempty"))
        .collect();
    Ok(LogitVector(mean))
}

/// Soft target of the averaged teacher logits.
pub fn p_avg<F: Scalar>(team: &[LogitVector<F>], temperature: F) -> Result<ProbVector<F>> {
    soft_targets(&avg_ensemble_logits(team)?, temperature)
}

/// Soft target of the single sampled teacher `n`.
pub fn p_skd<F: Scalar>(team: &[LogitVector<F>], n: usize, temperature: F) -> Result<ProbVector<F>> {
    check_team(team)?;
    let z = team.get(n).ok_or(Error::Bounds {
        index: n,
        len: team.len(),
    })?;
    soft_targets(z, temperature)
}

/// Temperatures used by the confidence-weighted multi-teacher loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MtbertConfig<F> {
    /// Temperature of the distillation cross-entropy in the numerator.
    pub temperature: F,
    /// Temperature of the teacher prediction scored against the label.
    pub quality_temperature: F,
}

impl<F: Scalar> MtbertConfig<F> {
    pub fn new(temperature: F) -> Self {
        Self {
            temperature,
            quality_temperature: F::one(),
        }
    }
}

/// `1 / (1 + CE(y, p(z_t, T_q)))`.
pub fn mtbert_teacher_weight<F: Scalar>(z_t: &LogitVector<F>, y: OneHotLabel, quality_temperature: F) -> Result<F> {
    check_temperature(quality_temperature)?;
    check_same_len(y.num_classes(), z_t.len(), "label/teacher logits")?;
    let ce = -log_softmax(z_t.as_slice(), quality_temperature)[y.class()];
    Ok(F::one() / (F::one() + ce))
}

/// `Σ_i CE(p(z_ti,T), p(z_s,T)) / (1 + CE(y, p(z_ti,1)))`.
pub fn mtbert_loss<F: Scalar>(
    teachers: &[LogitVector<F>],
    z_s: &LogitVector<F>,
    y: OneHotLabel,
    temperature: F,
) -> Result<F> {
    mtbert_loss_with(teachers, z_s, y, &MtbertConfig::new(temperature))
}

pub fn mtbert_loss_with<F: Scalar>(
    teachers: &[LogitVector<F>],
    z_s: &LogitVector<F>,
    y: OneHotLabel,
    cfg: &MtbertConfig<F>,
) -> Result<F> {
    let c = check_team(teachers)?;
    check_temperature(cfg.temperature)?;
    check_same_len(c, z_s.len(), "teacher/student logits")?;
    let log_ps = log_softmax(z_s.as_slice(), cfg.temperature);
    teachers.iter().try_fold(F::zero(), |acc, z_t| {
        let w = mtbert_teacher_weight(z_t, y, cfg.quality_temperature)?;
        let p_t = softmax(z_t.as_slice(), cfg.temperature);
        Ok(acc + w * cross_entropy_log(&p_t, &log_ps))
    })
}

pub fn mtbert_grad_wrt_student_logits<F: Scalar>(
    teachers: &[LogitVector<F>],
    z_s: &LogitVector<F>,
    y: OneHotLabel,
    temperature: F,
) -> Result<Vec<F>> {
    mtbert_grad_with(teachers, z_s, y, &MtbertConfig::new(temperature))
}

/// `Σ_i w_i·(p(z_s,T) − p(z_ti,T))/T`.
pub fn mtbert_grad_with<F: Scalar>(
    teachers: &[LogitVector<F>],
    z_s: &LogitVector<F>,
    y: OneHotLabel,
    cfg: &MtbertConfig<F>,
) -> Result<Vec<F>> {
    let c = check_team(teachers)?;
    check_temperature(cfg.temperature)?;
    check_same_len(c, z_s.len(), "teacher/student logits")?;
    let t = cfg.temperature;
    let p_s = softmax(z_s.as_slice(), t);
    let mut grad = vec![F::zero(); c];
    for z_t in teachers {
        let w = mtbert_teacher_weight(z_t, y, cfg.quality_temperature)?;
        let p_t = softmax(z_t.as_slice(), t);
        for k in 0..c {
            grad[k] += w * (p_s[k] - p_t[k]) / t;
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn lv(v: &[f64]) -> LogitVector<f64> {
        LogitVector::from_slice(v).unwrap()
    }

    fn pv(v: &[f64]) -> ProbVector<f64> {
        ProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn soft_targets_symmetric() {
        let p = soft_targets(&lv(&[0.0, 0.0, 0.0]), 1.0).unwrap();
        for &x in p.as_slice() {
            assert_abs_diff_eq!(x, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn soft_targets_infinite_temperature() {
        let p = soft_targets(&lv(&[1.0, 2.0, 3.0]), 1e9).unwrap();
        for &x in p.as_slice() {
            assert!((x - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn soft_targets_reference_values() {
        // e^k / (e + e^2 + e^3), evaluated at 50 digits.
        let p = soft_targets(&lv(&[1.0, 2.0, 3.0]), 1.0).unwrap();
        let want = [0.090_030_573_170_380_46, 0.24472847105479765, 0.665_240_955_774_821_9];
        for (a, b) in p.as_slice().iter().zip(want) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-6);
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn soft_targets_rejects_bad_temperature() {
        assert!(matches!(soft_targets(&lv(&[1.0, 2.0]), 0.0), Err(Error::Config(_))));
        assert!(matches!(soft_targets(&lv(&[1.0, 2.0]), -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn soft_targets_shift_invariant_exactly() {
        // Shifts that are exactly representable leave every entry bit-identical.
        let z = [0.375, -1.703125, 2.25, 0.0];
        let shifted: Vec<f64> = z.iter().map(|v| v + 1024.0).collect();
        assert_eq!(
            soft_targets(&lv(&z), 2.0).unwrap(),
            soft_targets(&lv(&shifted), 2.0).unwrap()
        );
    }

    #[test]
    fn logit_vector_validation() {
        assert!(LogitVector::new(vec![1.0f64]).is_err());
        assert!(LogitVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(LogitVector::new(vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn prob_vector_validation() {
        assert!(ProbVector::new(vec![0.5f64, 0.6]).is_err());
        assert!(ProbVector::new(vec![-0.1f64, 1.1]).is_err());
        assert!(ProbVector::<f64>::normalized(&[0.0, 0.0]).is_err());
        assert_eq!(
            ProbVector::normalized(&[1.0f64, 3.0]).unwrap().as_slice(),
            &[0.25, 0.75]
        );
    }

    #[test]
    fn distilled_loss_cases() {
        let p_s = pv(&[0.2, 0.5, 0.3]);
        assert_eq!(distilled_loss(&pv(&[0.0, 0.0, 1.0]), &p_s).unwrap(), -(0.3f64).ln());
        assert_abs_diff_eq!(
            distilled_loss(&pv(&[0.5, 0.5]), &pv(&[0.5, 0.5])).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        // -(0.7 ln 0.4 + 0.3 ln 0.6) at 50 digits.
        assert_abs_diff_eq!(
            distilled_loss(&pv(&[0.7, 0.3]), &pv(&[0.4, 0.6])).unwrap(),
            0.794_651_199_441_705_7,
            epsilon = 1e-15
        );
        assert!(matches!(distilled_loss(&pv(&[0.5, 0.5]), &p_s), Err(Error::Shape(_))));
    }

    #[test]
    fn distilled_loss_clamps_zero_student_probability() {
        let l = distilled_loss(&pv(&[0.0, 1.0]), &pv(&[1.0, 0.0])).unwrap();
        assert!(l.is_finite());
        assert_abs_diff_eq!(l, -(1e-300f64).ln(), epsilon = 1e-9);
    }

    #[test]
    fn student_loss_cases() {
        let y = OneHotLabel::new(1, 3).unwrap();
        assert_eq!(student_loss(y, &pv(&[0.0, 1.0, 0.0])).unwrap(), 0.0);
        let u = pv(&[0.25; 4]);
        for c in 0..4 {
            assert_abs_diff_eq!(
                student_loss(OneHotLabel::new(c, 4).unwrap(), &u).unwrap(),
                4f64.ln(),
                epsilon = 1e-15
            );
        }
        assert_abs_diff_eq!(
            student_loss(y, &pv(&[0.2, 0.5, 0.3])).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-15
        );
        assert!(OneHotLabel::new(3, 3).is_err());
    }

    #[test]
    fn total_loss_reductions() {
        let z_t = lv(&[1.5, -0.5, 0.25]);
        let z_s = lv(&[0.2, 0.9, -1.1]);
        let y = OneHotLabel::new(2, 3).unwrap();
        let t = 2.0;

        let cfg = KdConfig::new(t, 0.0, 0.7).unwrap();
        let p_s = soft_targets(&z_s, t).unwrap();
        assert_abs_diff_eq!(
            total_loss(&z_t, &z_s, y, &cfg).unwrap(),
            0.7 * student_loss(y, &p_s).unwrap(),
            epsilon = 1e-15
        );

        let cfg = KdConfig::new(t, 1.3, 0.0).unwrap();
        let entropy: f64 = p_s.as_slice().iter().map(|p| -p * p.ln()).sum();
        assert_abs_diff_eq!(total_loss(&z_s, &z_s, y, &cfg).unwrap(), 1.3 * entropy, epsilon = 1e-14);

        let cfg = KdConfig::new(t, 1.0, 1.0).unwrap();
        let p_t = soft_targets(&z_t, t).unwrap();
        let parts = distilled_loss(&p_t, &p_s).unwrap() + student_loss(y, &p_s).unwrap();
        assert_abs_diff_eq!(total_loss(&z_t, &z_s, y, &cfg).unwrap(), parts, epsilon = 1e-14);
    }

    #[test]
    fn kd_config_validation() {
        assert!(KdConfig::new(0.0, 1.0, 1.0).is_err());
        assert!(KdConfig::new(1.0, 0.0, 0.0).is_err());
        assert!(KdConfig::new(1.0, -1.0, 2.0).is_err());
        let d = KdConfig::<f64>::default();
        assert_eq!((d.temperature, d.alpha, d.beta), (4.0, 1.0, 1.0));
    }

    #[test]
    fn grad_distilled_matched_is_zero_and_zero_sum() {
        let z = lv(&[0.4, -2.0, 1.0, 3.0]);
        assert!(grad_distilled_wrt_student_logits(&z, &z, 3.0)
            .unwrap()
            .iter()
            .all(|&g| g == 0.0));
        let g = grad_distilled_wrt_student_logits(&lv(&[5.0, 1.0, -2.0, 0.0]), &z, 0.5).unwrap();
        assert!(g.iter().sum::<f64>().abs() < 1e-15);
        assert!(grad_distilled_wrt_student_logits(&z, &z, 0.0).is_err());
    }

    #[test]
    fn grad_total_perfect_student_is_zero() {
        // p(z_s, T) is exactly one-hot in f64 for this gap.
        let z_s = lv(&[0.0, 2000.0, 0.0]);
        let y = OneHotLabel::new(1, 3).unwrap();
        let cfg = KdConfig::new(1.0, 0.0, 1.0).unwrap();
        let g = grad_total_wrt_student_logits(&lv(&[1.0, 2.0, 3.0]), &z_s, y, &cfg).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_total_is_linear_in_alpha() {
        let z_t = lv(&[1.0, -1.0, 0.5]);
        let z_s = lv(&[0.0, 0.3, -0.2]);
        let y = OneHotLabel::new(0, 3).unwrap();
        let g =
            |a: f64, b: f64| grad_total_wrt_student_logits(&z_t, &z_s, y, &KdConfig::new(2.0, a, b).unwrap()).unwrap();
        let (g1, g2, g0) = (g(1.0, 1.0), g(2.0, 1.0), g(0.0, 1.0));
        for k in 0..3 {
            assert_abs_diff_eq!(g2[k] - g0[k], 2.0 * (g1[k] - g0[k]), epsilon = 1e-15);
        }
    }

    #[test]
    fn ensemble_mean_cases() {
        let v = lv(&[0.3, -1.2, 7.0]);
        assert_eq!(avg_ensemble_logits(std::slice::from_ref(&v)).unwrap(), v);
        let neg = lv(&[-0.3, 1.2, -7.0]);
        assert!(avg_ensemble_logits(&[v.clone(), neg])
            .unwrap()
            .as_slice()
            .iter()
            .all(|&x| x == 0.0));
        let m = avg_ensemble_logits(&[lv(&[1.0, 2.0]), lv(&[4.0, -2.0]), lv(&[1.0, 3.0])]).unwrap();
        assert_abs_diff_eq!(m.as_slice()[0], 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.as_slice()[1], 1.0, epsilon = 1e-15);
        assert!(matches!(avg_ensemble_logits::<f64>(&[]), Err(Error::Config(_))));
        assert!(matches!(
            avg_ensemble_logits(&[lv(&[1.0, 2.0]), lv(&[1.0, 2.0, 3.0])]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn p_avg_and_p_skd_degenerate_teams() {
        let z = lv(&[0.1, 0.2, 2.5]);
        let own = soft_targets(&z, 2.0).unwrap();
        let team = vec![z.clone(), z.clone(), z.clone()];
        assert_eq!(p_avg(&team, 2.0).unwrap(), own);
        for n in 0..3 {
            assert_eq!(p_skd(&team, n, 2.0).unwrap(), p_avg(&team, 2.0).unwrap());
        }
        assert_eq!(p_avg(&team[..1], 2.0).unwrap(), own);
        assert_eq!(p_skd(&team[..1], 0, 2.0).unwrap(), own);
        assert!(matches!(p_skd(&team, 3, 2.0), Err(Error::Bounds { index: 3, len: 3 })));
    }

    #[test]
    fn jensen_gap_on_concrete_pair() {
        let team = vec![lv(&[2.0, 0.0]), lv(&[0.0, 0.0])];
        let avg = p_avg(&team, 1.0).unwrap();
        // softmax([1, 0]) vs mean(softmax([2, 0]), [0.5, 0.5]).
        let e1 = 1f64.exp();
        let e2 = 2f64.exp();
        assert_abs_diff_eq!(avg.as_slice()[0], e1 / (e1 + 1.0), epsilon = 1e-15);
        let mean0 = 0.5 * (e2 / (e2 + 1.0) + 0.5);
        assert!((avg.as_slice()[0] - mean0).abs() > 1e-3);
    }

    #[test]
    fn mtbert_perfect_teacher_reduces_to_distilled_loss() {
        let teacher = lv(&[0.0, 0.0, 1000.0]);
        let y = OneHotLabel::new(2, 3).unwrap();
        assert_eq!(mtbert_teacher_weight(&teacher, y, 1.0).unwrap(), 1.0);
        let z_s = lv(&[0.3, 0.1, -0.4]);
        let t = 1.0;
        let p_t = soft_targets(&teacher, t).unwrap();
        let p_s = soft_targets(&z_s, t).unwrap();
        assert_abs_diff_eq!(
            mtbert_loss(&[teacher], &z_s, y, t).unwrap(),
            distilled_loss(&p_t, &p_s).unwrap(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn mtbert_duplicate_teachers_double() {
        let z = lv(&[0.5, -0.2, 1.4]);
        let z_s = lv(&[0.0, 0.1, 0.2]);
        let y = OneHotLabel::new(0, 3).unwrap();
        let one = mtbert_loss(std::slice::from_ref(&z), &z_s, y, 3.0).unwrap();
        let two = mtbert_loss(&[z.clone(), z], &z_s, y, 3.0).unwrap();
        assert_eq!(two, 2.0 * one);
    }

    #[test]
    fn mtbert_two_teacher_per_term() {
        let teachers = vec![lv(&[2.0, 0.0, -1.0]), lv(&[-0.5, 1.5, 0.0])];
        let z_s = lv(&[0.1, 0.2, 0.3]);
        let y = OneHotLabel::new(1, 3).unwrap();
        let t = 2.0;
        let p_s = soft_targets(&z_s, t).unwrap();
        let expected: f64 = teachers
            .iter()
            .map(|z| {
                let p1 = soft_targets(z, 1.0).unwrap();
                let w = 1.0 / (1.0 + student_loss(y, &p1).unwrap());
                w * distilled_loss(&soft_targets(z, t).unwrap(), &p_s).unwrap()
            })
            .sum();
        assert_abs_diff_eq!(mtbert_loss(&teachers, &z_s, y, t).unwrap(), expected, epsilon = 1e-14);
        assert!(matches!(mtbert_loss::<f64>(&[], &z_s, y, t), Err(Error::Config(_))));
    }

    #[test]
    fn mtbert_grad_zero_when_teachers_match_student() {
        let z_s = lv(&[0.5, 0.5, -1.0]);
        let y = OneHotLabel::new(0, 3).unwrap();
        let g = mtbert_grad_wrt_student_logits(&[z_s.clone(), z_s.clone()], &z_s, y, 2.0).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        let g = mtbert_grad_wrt_student_logits(&[lv(&[3.0, 0.0, 1.0]), lv(&[0.0, -2.0, 0.5])], &z_s, y, 0.5).unwrap();
        assert!(g.iter().sum::<f64>().abs() < 1e-14);
    }

    #[test]
    fn mtbert_quality_temperature_is_configurable() {
        let z = lv(&[1.0, 0.0]);
        let y = OneHotLabel::new(0, 2).unwrap();
        let w1 = mtbert_teacher_weight(&z, y, 1.0).unwrap();
        let w4 = mtbert_teacher_weight(&z, y, 4.0).unwrap();
        assert!(w1 > w4);
    }

    #[test]
    fn f32_losses() {
        let z_t = LogitVector::new(vec![1.0f32, 0.0, -1.0]).unwrap();
        let z_s = LogitVector::new(vec![0.0f32, 0.5, 0.0]).unwrap();
        let y = OneHotLabel::new(0, 3).unwrap();
        let l = total_loss(&z_t, &z_s, y, &KdConfig::default()).unwrap();
        assert!(l.is_finite() && l > 0.0);
    }
}
