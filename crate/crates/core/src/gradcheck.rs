//! Finite-difference verification of the analytic logit gradients.
//!
//! Each family (distilled, total, MTBERT) is checked on random instances by
//! central differences of the loss value alone, so the oracle never touches
//! the closed-form gradient code.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kd::{
    distilled_loss, grad_distilled_wrt_student_logits, grad_total_wrt_student_logits, mtbert_grad_wrt_student_logits,
    mtbert_loss, soft_targets, total_loss, KdConfig, LogitVector, OneHotLabel,
};
use crate::rng::SeededRng;

/// `(f(x + h·e_k) − f(x − h·e_k)) / 2h` for every coordinate `k`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + h;
            let up = f(&probe);
            probe[k] = x[k] - h;
            let down = f(&probe);
            probe[k] = x[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Floor of the relative-error denominator, so vanishing gradients are
/// compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞, REL_ERR_FLOOR)`.
///
/// Normalizing by the gradient's scale rather than per component keeps
/// near-zero entries (common in softmax gradients) from amplifying the
/// `O(h²)` truncation error of the difference quotient.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(REL_ERR_FLOOR, |m, v| m.max(v.abs()));
    diff / scale
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossFamily {
    Distilled,
    Total,
    Mtbert,
}

impl LossFamily {
    pub const ALL: [LossFamily; 3] = [LossFamily::Distilled, LossFamily::Total, LossFamily::Mtbert];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSpec {
    pub instances_per_family: usize,
    pub min_classes: usize,
    pub max_classes: usize,
    pub temperatures: Vec<f64>,
    pub step: f64,
    pub tolerance: f64,
    pub max_teachers: usize,
    pub logit_scale: f64,
    pub seed: u64,
}

impl Default for GradcheckSpec {
    fn default() -> Self {
        Self {
            instances_per_family: 1000,
            min_classes: 2,
            max_classes: 10,
            temperatures: vec![0.5, 1.0, 2.0, 4.0, 8.0],
            step: 1e-5,
            tolerance: 1e-6,
            max_teachers: 5,
            logit_scale: 3.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FamilyResult {
    pub family: LossFamily,
    pub instances: usize,
    pub max_rel_err: f64,
    pub worst_instance: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub spec: GradcheckSpec,
    pub families: Vec<FamilyResult>,
    pub passed: bool,
}

/// One randomly drawn problem.
#[derive(Debug, Clone)]
pub struct Instance {
    pub teachers: Vec<Vec<f64>>,
    pub student: Vec<f64>,
    pub label: usize,
    pub temperature: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Instance {
    pub fn draw(spec: &GradcheckSpec, rng: &mut SeededRng) -> Self {
        let span = spec.max_classes - spec.min_classes + 1;
        let c = spec.min_classes + (rng.uniform() * span as f64) as usize;
        let logits = |rng: &mut SeededRng| -> Vec<f64> {
            (0..c).map(|_| spec.logit_scale * (2.0 * rng.uniform() - 1.0)).collect()
        };
        let n = 1 + (rng.uniform() * spec.max_teachers.max(1) as f64) as usize;
        let teachers = (0..n).map(|_| logits(rng)).collect();
        let student = logits(rng);
        let label = (rng.uniform() * c as f64) as usize;
        let temperature = spec.temperatures[(rng.uniform() * spec.temperatures.len() as f64) as usize];
        let alpha = 0.1 + 1.9 * rng.uniform();
        let beta = 0.1 + 1.9 * rng.uniform();
        Self {
            teachers,
            student,
            label,
            temperature,
            alpha,
            beta,
        }
    }

    fn lv(v: &[f64]) -> Result<LogitVector<f64>> {
        LogitVector::from_slice(v)
    }

    /// Analytic and finite-difference gradients for `family`.
    pub fn gradients(&self, family: LossFamily, h: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let t = self.temperature;
        let c = self.student.len();
        let y = OneHotLabel::new(self.label, c)?;
        let z_s = Self::lv(&self.student)?;
        let z_t = Self::lv(&self.teachers[0])?;
        let team: Vec<LogitVector<f64>> = self.teachers.iter().map(|z| Self::lv(z)).collect::<Result<_>>()?;
        let cfg = KdConfig::new(t, self.alpha, self.beta)?;
        let p_t = soft_targets(&z_t, t)?;
        Ok(match family {
            LossFamily::Distilled => (
                grad_distilled_wrt_student_logits(&z_t, &z_s, t)?,
                central_difference(
                    |x| distilled_loss(&p_t, &soft_targets(&Self::lv(x).unwrap(), t).unwrap()).unwrap(),
                    &self.student,
                    h,
                ),
            ),
            LossFamily::Total => (
                grad_total_wrt_student_logits(&z_t, &z_s, y, &cfg)?,
                central_difference(
                    |x| total_loss(&z_t, &Self::lv(x).unwrap(), y, &cfg).unwrap(),
                    &self.student,
                    h,
                ),
            ),
            LossFamily::Mtbert => (
                mtbert_grad_wrt_student_logits(&team, &z_s, y, t)?,
                central_difference(
                    |x| mtbert_loss(&team, &Self::lv(x).unwrap(), y, t).unwrap(),
                    &self.student,
                    h,
                ),
            ),
        })
    }
}

pub fn gradcheck(spec: &GradcheckSpec) -> Result<GradcheckReport> {
    if spec.min_classes < 2 || spec.max_classes < spec.min_classes || spec.temperatures.is_empty() {
        return Err(crate::error::Error::Config(
            "gradcheck needs 2 <= min_classes <= max_classes and temperatures".into(),
        ));
    }
    let mut families = Vec::with_capacity(LossFamily::ALL.len());
    for (k, family) in LossFamily::ALL.into_iter().enumerate() {
        let mut rng = SeededRng::new(crate::rng::split_seed(spec.seed, k as u64));
        let mut worst = (0.0f64, 0usize);
        for i in 0..spec.instances_per_family {
            let inst = Instance::draw(spec, &mut rng);
            let (analytic, numeric) = inst.gradients(family, spec.step)?;
            let err = relative_error(&analytic, &numeric);
            if err > worst.0 || err.is_nan() {
                worst = (err, i);
            }
        }
        families.push(FamilyResult {
            family,
            instances: spec.instances_per_family,
            max_rel_err: worst.0,
            worst_instance: worst.1,
            passed: worst.0 < spec.tolerance,
        });
    }
    let passed = families.iter().all(|f| f.passed);
    Ok(GradcheckReport {
        spec: spec.clone(),
        families,
        passed,
    })
}
