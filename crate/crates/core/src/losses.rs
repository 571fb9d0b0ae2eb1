//! Objective terms: the Siamese distance loss, categorical cross-entropy,
//! the prototype assignment with its regularizers, and their combination.
//!
//! Tape-level functions build differentiable graphs; the plain `f64`
//! functions evaluate the same formulas on values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, sigmoid, softmax, Tape, Tensor, Var};

pub use crate::data::{Pair, PairBatch};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Scale inside the sigmoid of the pair similarity.
    pub gamma_d: f64,
    /// Hardness of the soft prototype assignment.
    pub gamma_s: f64,
    /// Weight of the distance loss against the classification loss.
    pub lambda: f64,
    /// Compactness: `‖g − c_m‖₁`.
    pub lambda1: f64,
    /// Separation: pairwise prototype L1 distances (subtracted).
    pub lambda2: f64,
    /// Prototype L2 norms.
    pub lambda3: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma_d: 1.0,
            gamma_s: 1.0,
            lambda: 0.5,
            lambda1: 0.01,
            lambda2: 0.01,
            lambda3: 0.001,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma_d", self.gamma_d), ("gamma_s", self.gamma_s)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        check_lambda(self.lambda)?;
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

/// `s = 2·(1 − σ(γ_d·‖fs − ft‖₂))`: 1 for identical features, tending to 0
/// as they move apart.
pub fn pair_similarity(fs: &[f64], ft: &[f64], gamma_d: f64) -> Result<f64> {
    if fs.len() != ft.len() {
        return Err(Error::dim(format!(
            "feature lengths differ: {} vs {}",
            fs.len(),
            ft.len()
        )));
    }
    let dist = fs
        .iter()
        .zip(ft)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(2.0 * (1.0 - sigmoid(gamma_d * dist)))
}

pub fn pair_similarity_var(tape: &mut Tape, fs: Var, ft: Var, gamma_d: f64) -> Result<Var> {
    let diff = tape.sub(fs, ft)?;
    let dist = tape.l2_norm(diff);
    let z = tape.scale(dist, gamma_d);
    let sig = tape.sigmoid(z);
    let neg = tape.scale(sig, -2.0);
    Ok(tape.shift(neg, 2.0))
}

/// Binary cross-entropy of one pair's similarity against its same-class flag.
pub fn pair_loss(tape: &mut Tape, fs: Var, ft: Var, same_class: bool, gamma_d: f64) -> Result<Var> {
    let s = pair_similarity_var(tape, fs, ft, gamma_d)?;
    tape.bce(s, if same_class { 1.0 } else { 0.0 })
}

/// Mean pair loss over `(source feature, target feature, same_class)` triples.
pub fn distance_loss(tape: &mut Tape, pairs: &[(Var, Var, bool)], gamma_d: f64) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::data("distance loss needs at least one pair"));
    }
    let terms = pairs
        .iter()
        .map(|&(fs, ft, same)| pair_loss(tape, fs, ft, same, gamma_d))
        .collect::<Result<Vec<_>>>()?;
    tape.mean_n(&terms)
}

/// Clamped binary cross-entropy on values.
pub fn bce(p: f64, target: f64) -> f64 {
    use crate::tensor::BCE_CLAMP;
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// `−ln probs[label]`, evaluated as a log-softmax of `ln probs`.
pub fn categorical_ce(probs: &[f64], label: usize) -> Result<f64> {
    if label >= probs.len() {
        return Err(Error::dim(format!(
            "label {label} out of range for {} classes",
            probs.len()
        )));
    }
    let logits: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
    Ok(log_sum_exp(&logits) - logits[label])
}

/// Softmax over classes of `−γ_s · ‖projected − c_i‖²`.
pub fn prototype_assignment(projected: &[f64], prototypes: &Tensor, gamma_s: f64) -> Result<Vec<f64>> {
    let logits = prototype_logits_values(projected, prototypes, gamma_s)?;
    Ok(softmax(&logits))
}

fn prototype_logits_values(projected: &[f64], prototypes: &Tensor, gamma_s: f64) -> Result<Vec<f64>> {
    let p = projected.len();
    if prototypes.shape().len() != 2 || prototypes.shape()[1] != p {
        return Err(Error::dim(format!(
            "prototypes {:?} do not match projection length {p}",
            prototypes.shape()
        )));
    }
    Ok(prototypes
        .data()
        .chunks_exact(p)
        .map(|c| -gamma_s * c.iter().zip(projected).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .collect())
}

/// Assignment logits `−γ_s · d(projected, c_i)` on the tape.
pub fn prototype_logits(tape: &mut Tape, projected: Var, prototypes: Var, gamma_s: f64) -> Result<Var> {
    let d = tape.sq_dist_rows(projected, prototypes)?;
    Ok(tape.scale(d, -gamma_s))
}

/// Cross-entropy of the prototype assignment against `label`.
pub fn proto_class_loss(
    tape: &mut Tape,
    projected: Var,
    prototypes: Var,
    label: usize,
    gamma_s: f64,
) -> Result<Var> {
    let logits = prototype_logits(tape, projected, prototypes, gamma_s)?;
    tape.cross_entropy_logits(logits, label)
}

/// Value of the prototype class loss without a tape.
pub fn proto_class_loss_value(
    projected: &[f64],
    prototypes: &Tensor,
    label: usize,
    gamma_s: f64,
) -> Result<f64> {
    let logits = prototype_logits_values(projected, prototypes, gamma_s)?;
    if label >= logits.len() {
        return Err(Error::dim(format!("label {label} out of range")));
    }
    Ok(log_sum_exp(&logits) - logits[label])
}

/// Assembles the regularized classification loss from its four terms.
pub fn lcb_from_terms(
    class_loss: f64,
    compact_l1: f64,
    pair_l1_sum: f64,
    norm_sum: f64,
    cfg: &LossConfig,
) -> f64 {
    class_loss + cfg.lambda1 * compact_l1 - cfg.lambda2 * pair_l1_sum + cfg.lambda3 * norm_sum
}

/// Regularized prototype loss for one sample. Unordered prototype pairs are
/// counted once in the separation term.
pub fn proto_loss_lcb(
    tape: &mut Tape,
    projected: Var,
    prototypes: Var,
    label: usize,
    cfg: &LossConfig,
) -> Result<Var> {
    proto_loss_lcb_batch(tape, &[(projected, label)], prototypes, cfg)
}

/// Mean of [`proto_loss_lcb`] over a batch. The prototype-only terms are
/// the same for every sample and are built once.
pub fn proto_loss_lcb_batch(
    tape: &mut Tape,
    samples: &[(Var, usize)],
    prototypes: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    if samples.is_empty() {
        return Err(Error::data("classification loss needs at least one sample"));
    }
    let mut per_sample = Vec::with_capacity(samples.len());
    for &(projected, label) in samples {
        let lc = proto_class_loss(tape, projected, prototypes, label, cfg.gamma_s)?;
        if cfg.lambda1 > 0.0 {
            let own = tape.row(prototypes, label)?;
            let diff = tape.sub(projected, own)?;
            let l1 = tape.l1_norm(diff);
            let weighted = tape.scale(l1, cfg.lambda1);
            per_sample.push(tape.add(lc, weighted)?);
        } else {
            per_sample.push(lc);
        }
    }
    let mut total = tape.mean_n(&per_sample)?;
    if cfg.lambda2 > 0.0 {
        let pairs = tape.pairwise_l1(prototypes)?;
        let weighted = tape.scale(pairs, -cfg.lambda2);
        total = tape.add(total, weighted)?;
    }
    if cfg.lambda3 > 0.0 {
        let norms = tape.row_norm_sum(prototypes)?;
        let weighted = tape.scale(norms, cfg.lambda3);
        total = tape.add(total, weighted)?;
    }
    Ok(total)
}

/// Mean cross-entropy of traditional-head logits.
pub fn softmax_ce_batch(tape: &mut Tape, samples: &[(Var, usize)]) -> Result<Var> {
    if samples.is_empty() {
        return Err(Error::data("classification loss needs at least one sample"));
    }
    let terms = samples
        .iter()
        .map(|&(logits, label)| tape.cross_entropy_logits(logits, label))
        .collect::<Result<Vec<_>>>()?;
    tape.mean_n(&terms)
}

/// `λ·L_D + (1 − λ)·L_CB` on values.
pub fn combined_loss(distance_term: f64, classification_term: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(lambda * distance_term + (1.0 - lambda) * classification_term)
}

pub fn combined_loss_var(tape: &mut Tape, distance_term: Var, classification_term: Var, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    let a = tape.scale(distance_term, lambda);
    let b = tape.scale(classification_term, 1.0 - lambda);
    tape.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn similarity_examples() {
        let f = [0.2, 0.4, 0.9];
        assert_eq!(pair_similarity(&f, &f, 1.0).unwrap(), 1.0);
        // gamma * |delta| = ln 3 gives sigma = 0.75.
        let s = pair_similarity(&[3f64.ln(), 0.0], &[0.0, 0.0], 1.0).unwrap();
        assert!((s - 0.5).abs() < 1e-12);
        assert!(pair_similarity(&[0.0], &[0.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn similarity_strictly_decreasing() {
        let mut prev = f64::INFINITY;
        for i in 0..200 {
            let d = i as f64 * 0.05;
            let s = pair_similarity(&[d, 0.0], &[0.0, 0.0], 0.7).unwrap();
            assert!(s < prev);
            prev = s;
        }
    }

    #[test]
    fn bce_examples() {
        assert_eq!(bce(1.0, 1.0), -(1.0f64 - 1e-12).ln());
        assert!(bce(1.0, 1.0) < 1e-11);
        assert!((bce(0.5, 1.0) - LN2).abs() < 1e-12);
        let clamped = bce(1.0, 0.0);
        assert!(clamped.is_finite() && clamped > 27.0);
    }

    #[test]
    fn distance_loss_identical_features() {
        let mut t = Tape::new();
        let f = t.param(Tensor::vector(&[0.3, 0.6]));
        let g = t.param(Tensor::vector(&[0.3, 0.6]));
        let pos = distance_loss(&mut t, &[(f, g, true)], 1.0).unwrap();
        assert!(t.value(pos).item() < 1e-11);
        let neg = distance_loss(&mut t, &[(f, g, false)], 1.0).unwrap();
        assert!(t.value(neg).item() > 27.0);
        assert!(distance_loss(&mut t, &[], 1.0).is_err());
    }

    #[test]
    fn categorical_ce_examples() {
        assert!(categorical_ce(&[0.0, 1.0, 0.0], 1).unwrap().abs() < 1e-12);
        assert!((categorical_ce(&[0.1; 10], 4).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!((categorical_ce(&[0.5, 0.5], 0).unwrap() - LN2).abs() < 1e-12);
        assert!(categorical_ce(&[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn assignment_examples() {
        let protos = Tensor::new(vec![4, 2], vec![1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]).unwrap();
        let a = prototype_assignment(&[0.0, 0.0], &protos, 2.0).unwrap();
        assert!(a.iter().all(|v| (v - 0.25).abs() < 1e-12));

        let a = prototype_assignment(&[0.9, 0.3], &protos, 0.0).unwrap();
        assert!(a.iter().all(|v| (v - 0.25).abs() < 1e-12));

        let a = prototype_assignment(&[0.9, 0.0], &protos, 200.0).unwrap();
        assert!(a[0] > 1.0 - 1e-12);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn proto_class_loss_examples() {
        let far = Tensor::new(vec![3, 1], vec![0.0, 10.0, -10.0]).unwrap();
        assert!(proto_class_loss_value(&[0.0], &far, 0, 50.0).unwrap() < 1e-12);

        let mut data = Vec::new();
        for i in 0..10 {
            let a = i as f64 * std::f64::consts::TAU / 10.0;
            data.extend([a.cos(), a.sin()]);
        }
        let ring = Tensor::new(vec![10, 2], data).unwrap();
        let l = proto_class_loss_value(&[0.0, 0.0], &ring, 7, 3.0).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn lcb_term_arithmetic() {
        let cfg = LossConfig {
            lambda1: 0.1,
            lambda2: 0.1,
            lambda3: 0.01,
            ..LossConfig::default()
        };
        assert!((lcb_from_terms(1.0, 2.0, 3.0, 4.0, &cfg) - 0.94).abs() < 1e-12);
    }

    #[test]
    fn lcb_regularizer_values() {
        let mut t = Tape::new();
        let mut c = vec![0.0; 10];
        c[5] = 1.0;
        let protos = t.param(Tensor::new(vec![2, 5], c).unwrap());
        let pairs = t.pairwise_l1(protos).unwrap();
        let norms = t.row_norm_sum(protos).unwrap();
        assert_eq!(t.value(pairs).item(), 1.0);
        assert_eq!(t.value(norms).item(), 1.0);
    }

    #[test]
    fn lcb_without_regularizers_is_class_loss() {
        let cfg = LossConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            ..LossConfig::default()
        };
        let mut t = Tape::new();
        let protos = t.param(Tensor::new(vec![3, 2], vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6]).unwrap());
        let z = t.param(Tensor::vector(&[0.7, -0.1]));
        let lcb = proto_loss_lcb(&mut t, z, protos, 2, &cfg).unwrap();
        let lc = proto_class_loss(&mut t, z, protos, 2, cfg.gamma_s).unwrap();
        assert!((t.value(lcb).item() - t.value(lc).item()).abs() < 1e-15);
    }

    #[test]
    fn combined_examples() {
        assert_eq!(combined_loss(2.0, 4.0, 0.5).unwrap(), 3.0);
        assert_eq!(combined_loss(2.0, 4.0, 1.0).unwrap(), 2.0);
        assert_eq!(combined_loss(2.0, 4.0, 0.0).unwrap(), 4.0);
        assert!(matches!(combined_loss(2.0, 4.0, 1.5), Err(Error::Config(_))));
        assert!(combined_loss(2.0, 4.0, -0.1).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            gamma_s: 0.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossConfig {
            lambda2: -1.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
