//! Top-k logits distillation loss and its gradient.
//!
//! ```text
//! L = α·T²·KL(σ(z_s[idx]/T) ‖ σ(z_t/T)) + (1−α)·CE(y, z_s)
//! ```
//!
//! `idx` are the teacher's stored top-k vocabulary indices; the student is
//! sliced at those indices and renormalized over the slice. The KL direction
//! above (student first) is the default; [`KlDirection::TeacherStudent`]
//! gives the conventional reverse.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum KdError {
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("true label {label} outside vocabulary of {vocab}")]
    LabelOutOfRange { label: usize, vocab: usize },
    #[error("teacher index {index} outside vocabulary of {vocab}")]
    IndexOutOfRange { index: usize, vocab: usize },
    #[error("teacher index {0} repeated")]
    DuplicateIndex(usize),
    #[error("teacher slice is empty")]
    EmptySlice,
    #[error("{idx} teacher indices but {val} teacher values")]
    SliceMismatch { idx: usize, val: usize },
    #[error("invalid parameters: {0}")]
    Params(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// KL(student ‖ teacher).
    #[default]
    StudentTeacher,
    /// KL(teacher ‖ student).
    TeacherStudent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdParams {
    pub alpha: f64,
    pub temperature: f64,
    /// Cap on the teacher entries used; records holding more keep their
    /// `k` highest-valued ones.
    pub k: usize,
    pub direction: KlDirection,
}

impl Default for KdParams {
    fn default() -> Self {
        KdParams {
            alpha: 0.5,
            temperature: 1.0,
            k: 8,
            direction: KlDirection::StudentTeacher,
        }
    }
}

impl KdParams {
    pub fn validate(&self) -> Result<(), KdError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(KdError::Params(format!("alpha {} not in [0, 1]", self.alpha)));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(KdError::Params(format!("temperature {} must be > 0", self.temperature)));
        }
        if self.k == 0 {
            return Err(KdError::Params("k must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKLogitRecord {
    pub teacher_idx: Vec<usize>,
    pub teacher_val: Vec<f64>,
    /// Full-vocabulary student logits.
    pub student_logits: Vec<f64>,
    pub true_label: usize,
}

impl TopKLogitRecord {
    pub fn k(&self) -> usize {
        self.teacher_idx.len()
    }

    pub fn validate(&self) -> Result<(), KdError> {
        let vocab = self.student_logits.len();
        if self.teacher_idx.is_empty() {
            return Err(KdError::EmptySlice);
        }
        if self.teacher_idx.len() != self.teacher_val.len() {
            return Err(KdError::SliceMismatch {
                idx: self.teacher_idx.len(),
                val: self.teacher_val.len(),
            });
        }
        if self.true_label >= vocab {
            return Err(KdError::LabelOutOfRange {
                label: self.true_label,
                vocab,
            });
        }
        let mut seen = std::collections::HashSet::new();
        for &i in &self.teacher_idx {
            if i >= vocab {
                return Err(KdError::IndexOutOfRange { index: i, vocab });
            }
            if !seen.insert(i) {
                return Err(KdError::DuplicateIndex(i));
            }
        }
        if !self.teacher_val.iter().all(|v| v.is_finite()) {
            return Err(KdError::NonFinite("teacher logits"));
        }
        if !self.student_logits.iter().all(|v| v.is_finite()) {
            return Err(KdError::NonFinite("student logits"));
        }
        Ok(())
    }

    /// Positions (into the teacher arrays) of the entries in use: all of
    /// them, or the `k` highest teacher values (ties by position).
    fn active(&self, k: usize) -> Vec<usize> {
        let mut pos: Vec<usize> = (0..self.k()).collect();
        if k < pos.len() {
            pos.sort_by(|&a, &b| self.teacher_val[b].total_cmp(&self.teacher_val[a]).then(a.cmp(&b)));
            pos.truncate(k);
            pos.sort_unstable();
        }
        pos
    }
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Σ p (log p − log q), given log-probabilities.
fn kl(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p.iter().zip(log_q).map(|(lp, lq)| lp.exp() * (lp - lq)).sum()
}

struct Parts {
    active: Vec<usize>,
    log_s: Vec<f64>,
    log_t: Vec<f64>,
    log_full: Vec<f64>,
}

fn parts(rec: &TopKLogitRecord, p: &KdParams) -> Result<Parts, KdError> {
    p.validate()?;
    rec.validate()?;
    let active = rec.active(p.k);
    let s: Vec<f64> = active.iter().map(|&a| rec.student_logits[rec.teacher_idx[a]] / p.temperature).collect();
    let t: Vec<f64> = active.iter().map(|&a| rec.teacher_val[a] / p.temperature).collect();
    Ok(Parts {
        active,
        log_s: log_softmax(&s),
        log_t: log_softmax(&t),
        log_full: log_softmax(&rec.student_logits),
    })
}

pub fn kd_loss(rec: &TopKLogitRecord, p: &KdParams) -> Result<f64, KdError> {
    let Parts { log_s, log_t, log_full, .. } = parts(rec, p)?;
    let divergence = match p.direction {
        KlDirection::StudentTeacher => kl(&log_s, &log_t),
        KlDirection::TeacherStudent => kl(&log_t, &log_s),
    };
    let ce = -log_full[rec.true_label];
    Ok(p.alpha * p.temperature * p.temperature * divergence + (1.0 - p.alpha) * ce)
}

/// Gradient with respect to the full student logit vector.
pub fn kd_loss_grad(rec: &TopKLogitRecord, p: &KdParams) -> Result<Vec<f64>, KdError> {
    let Parts {
        active,
        log_s,
        log_t,
        log_full,
    } = parts(rec, p)?;
    let mut grad: Vec<f64> = log_full.iter().map(|l| (1.0 - p.alpha) * l.exp()).collect();
    grad[rec.true_label] -= 1.0 - p.alpha;
    // The T² factor meets one 1/T from the chain rule through z/T.
    let scale = p.alpha * p.temperature;
    match p.direction {
        KlDirection::StudentTeacher => {
            let d = kl(&log_s, &log_t);
            for (j, &a) in active.iter().enumerate() {
                let s = log_s[j].exp();
                grad[rec.teacher_idx[a]] += scale * s * (log_s[j] - log_t[j] - d);
            }
        }
        KlDirection::TeacherStudent => {
            for (j, &a) in active.iter().enumerate() {
                grad[rec.teacher_idx[a]] += scale * (log_s[j].exp() - log_t[j].exp());
            }
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdBatchReport {
    pub losses: Vec<f64>,
    pub mean: f64,
    pub params: KdParams,
}

pub fn kd_loss_batch(records: &[TopKLogitRecord], p: &KdParams) -> Result<KdBatchReport, KdError> {
    let losses = records.iter().map(|r| kd_loss(r, p)).collect::<Result<Vec<_>, _>>()?;
    let mean = if losses.is_empty() {
        0.0
    } else {
        losses.iter().sum::<f64>() / losses.len() as f64
    };
    Ok(KdBatchReport {
        losses,
        mean,
        params: *p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::index::sample;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_record(rng: &mut ChaCha8Rng, vocab: usize, k: usize) -> TopKLogitRecord {
        TopKLogitRecord {
            teacher_idx: sample(rng, vocab, k).into_vec(),
            teacher_val: (0..k).map(|_| rng.random_range(-4.0..4.0)).collect(),
            student_logits: (0..vocab).map(|_| rng.random_range(-4.0..4.0)).collect(),
            true_label: rng.random_range(0..vocab),
        }
    }

    /// The written formula evaluated term by term with plain exp/ln.
    fn oracle(rec: &TopKLogitRecord, p: &KdParams) -> f64 {
        let t = p.temperature;
        let zs: Vec<f64> = rec.teacher_idx.iter().map(|&i| (rec.student_logits[i] / t).exp()).collect();
        let zt: Vec<f64> = rec.teacher_val.iter().map(|v| (v / t).exp()).collect();
        let (ns, nt): (f64, f64) = (zs.iter().sum(), zt.iter().sum());
        let mut kl = 0.0;
        for j in 0..zs.len() {
            let (s, q) = (zs[j] / ns, zt[j] / nt);
            kl += s * (s / q).ln();
        }
        let full: f64 = rec.student_logits.iter().map(|v| v.exp()).sum();
        let ce = -(rec.student_logits[rec.true_label].exp() / full).ln();
        p.alpha * t * t * kl + (1.0 - p.alpha) * ce
    }

    #[test]
    fn matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = KdParams {
            temperature: 2.0,
            ..KdParams::default()
        };
        for _ in 0..50 {
            let r = random_record(&mut rng, 50, 8);
            assert!((kd_loss(&r, &p).unwrap() - oracle(&r, &p)).abs() < 1e-9);
        }
    }

    #[test]
    fn alpha_zero_is_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = random_record(&mut rng, 50, 8);
        let p = KdParams {
            alpha: 0.0,
            ..KdParams::default()
        };
        let ce = -log_softmax(&r.student_logits)[r.true_label];
        assert!((kd_loss(&r, &p).unwrap() - ce).abs() <= 1e-12);
        let g = kd_loss_grad(&r, &p).unwrap();
        let sm: Vec<f64> = log_softmax(&r.student_logits).iter().map(|l| l.exp()).collect();
        for (i, gi) in g.iter().enumerate() {
            let want = sm[i] - if i == r.true_label { 1.0 } else { 0.0 };
            assert!((gi - want).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_slices_zero_loss_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut r = random_record(&mut rng, 50, 8);
        r.teacher_val = r.teacher_idx.iter().map(|&i| r.student_logits[i]).collect();
        for direction in [KlDirection::StudentTeacher, KlDirection::TeacherStudent] {
            let p = KdParams {
                alpha: 1.0,
                temperature: 1.5,
                direction,
                ..KdParams::default()
            };
            assert!(kd_loss(&r, &p).unwrap().abs() <= 1e-12);
            assert!(kd_loss_grad(&r, &p).unwrap().iter().all(|g| g.abs() < 1e-12));
        }
    }

    #[test]
    fn full_vocab_slice_is_full_kl() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut r = random_record(&mut rng, 30, 30);
        r.teacher_idx = (0..30).collect();
        let p = KdParams {
            alpha: 1.0,
            k: 30,
            ..KdParams::default()
        };
        let ls = log_softmax(&r.student_logits);
        let lt = log_softmax(&r.teacher_val);
        let full: f64 = (0..30).map(|i| ls[i].exp() * (ls[i] - lt[i])).sum();
        assert!((kd_loss(&r, &p).unwrap() - full).abs() <= 1e-9);
    }

    fn check_finite_differences(direction: KlDirection, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let r = random_record(&mut rng, 50, 8);
            let p = KdParams {
                alpha: rng.random_range(0.0..1.0),
                temperature: rng.random_range(0.5..3.0),
                k: 8,
                direction,
            };
            let g = kd_loss_grad(&r, &p).unwrap();
            let h = 1e-5;
            for i in 0..50 {
                let (mut up, mut dn) = (r.clone(), r.clone());
                up.student_logits[i] += h;
                dn.student_logits[i] -= h;
                let fd = (kd_loss(&up, &p).unwrap() - kd_loss(&dn, &p).unwrap()) / (2.0 * h);
                let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        assert!(worst <= 1e-4, "max relative error {worst}");
    }

    #[test]
    fn gradient_finite_differences() {
        check_finite_differences(KlDirection::StudentTeacher, 5);
        check_finite_differences(KlDirection::TeacherStudent, 6);
    }

    #[test]
    fn k_cap_uses_highest_teacher_values() {
        let r = TopKLogitRecord {
            teacher_idx: vec![0, 1, 2],
            teacher_val: vec![1.0, 5.0, 3.0],
            student_logits: vec![0.0, 0.0, 0.0, 0.0],
            true_label: 3,
        };
        assert_eq!(r.active(2), vec![1, 2]);
        assert_eq!(r.active(8), vec![0, 1, 2]);
    }

    #[test]
    fn rejects_bad_input() {
        let base = TopKLogitRecord {
            teacher_idx: vec![0, 1],
            teacher_val: vec![1.0, 2.0],
            student_logits: vec![0.0; 4],
            true_label: 1,
        };
        let p = KdParams::default();
        let mut r = base.clone();
        r.true_label = 4;
        assert!(matches!(kd_loss(&r, &p), Err(KdError::LabelOutOfRange { .. })));
        let mut r = base.clone();
        r.student_logits[2] = f64::NAN;
        assert_eq!(kd_loss(&r, &p), Err(KdError::NonFinite("student logits")));
        let mut r = base.clone();
        r.teacher_idx = vec![1, 1];
        assert_eq!(kd_loss(&r, &p), Err(KdError::DuplicateIndex(1)));
        let bad = KdParams {
            temperature: 0.0,
            ..p
        };
        assert!(matches!(kd_loss(&base, &bad), Err(KdError::Params(_))));
    }

    proptest! {
        #[test]
        fn nonnegative_and_shift_invariant(
            seed in any::<u64>(),
            shift in -50.0f64..50.0,
            alpha in 0.0f64..=1.0,
            temperature in 0.2f64..5.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = random_record(&mut rng, 20, 5);
            let p = KdParams { alpha, temperature, k: 5, ..KdParams::default() };
            let l = kd_loss(&r, &p).unwrap();
            prop_assert!(l >= -1e-12);
            let mut shifted = r.clone();
            shifted.student_logits.iter_mut().for_each(|v| *v += shift);
            shifted.teacher_val.iter_mut().for_each(|v| *v += shift);
            prop_assert!((kd_loss(&shifted, &p).unwrap() - l).abs() < 1e-9);
        }
    }
}
