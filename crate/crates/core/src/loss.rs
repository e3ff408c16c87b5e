//! Asymmetric loss over the classes annotated in the current task.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AslConfig {
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    /// Probabilities are clamped to `[clip, 1 - clip]` before taking logs.
    pub clip: f64,
}

impl Default for AslConfig {
    fn default() -> Self {
        Self {
            gamma_pos: 0.0,
            gamma_neg: 4.0,
            clip: 1e-7,
        }
    }
}

impl AslConfig {
    pub fn bce() -> Self {
        Self {
            gamma_pos: 0.0,
            gamma_neg: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_pos >= 0.0 && self.gamma_neg >= 0.0) {
            return Err(Error::Config("ASL focusing exponents must be >= 0".into()));
        }
        if !(self.clip > 0.0 && self.clip < 0.5) {
            return Err(Error::Config("ASL clip must lie in (0, 0.5)".into()));
        }
        Ok(())
    }
}

/// `−mean[ y (1−p)^γ+ log p + (1−y) p^γ− log(1−p) ]` with
/// `p = clamp(sigmoid(logit))`, averaged over every (sample, class) entry.
///
/// `logits` and `targets` share a shape; targets must be 0 or 1.
pub fn asl_loss<'t>(logits: &Var<'t>, targets: &Tensor, cfg: &AslConfig) -> Result<Var<'t>> {
    if logits.shape() != targets.shape() {
        return Err(Error::shape("asl_loss", &logits.shape(), targets.shape()));
    }
    if let Some(bad) = targets.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::invalid("asl_loss", format!("target {bad} is not 0 or 1")));
    }
    if targets.is_empty() {
        return Err(Error::invalid("asl_loss", "no targets"));
    }
    let tape = logits.tape();
    let y = tape.constant(targets.clone());
    let not_y = tape.constant(Tensor::new(
        targets.shape().to_vec(),
        targets.data().iter().map(|v| 1.0 - v).collect(),
    )?);
    let p = logits.sigmoid().clamp(cfg.clip, 1.0 - cfg.clip);
    let q = p.neg().add_scalar(1.0);
    let pos = q.powf(cfg.gamma_pos).mul(&p.log()?)?.mul(&y)?;
    let neg = p.powf(cfg.gamma_neg).mul(&q.log()?)?.mul(&not_y)?;
    Ok(pos.add(&neg)?.mean().neg())
}

/// Target entries for the classes of the current task, in `task_classes`
/// order. `labels` is indexed by class id.
pub fn mask_to_task(labels: &[u8], task_classes: &[usize]) -> Vec<f64> {
    task_classes
        .iter()
        .map(|&c| f64::from(labels.get(c).copied().unwrap_or(0)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn loss(logits: &[f64], targets: &[f64], cfg: &AslConfig) -> f64 {
        let tape = Tape::new();
        let l = tape.constant(Tensor::from_vec(logits.to_vec()));
        asl_loss(&l, &Tensor::from_vec(targets.to_vec()), cfg).unwrap().item()
    }

    #[test]
    fn bce_reduction_at_zero_logits() {
        let v = loss(&[0.0, 0.0], &[1.0, 0.0], &AslConfig::bce());
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn saturated_predictions_have_near_zero_loss() {
        let v = loss(&[40.0, -40.0], &[1.0, 0.0], &AslConfig::default());
        assert!(v < 1e-6, "{v}");
    }

    #[test]
    fn easy_negative_is_down_weighted() {
        let cfg = AslConfig::default();
        // p clamps to clip on a confident negative
        let asl = loss(&[-40.0], &[0.0], &cfg);
        let expect = -(cfg.clip.powf(4.0) * (1.0 - cfg.clip).ln());
        assert!((asl - expect).abs() < 1e-30);
        for z in [-3.0, -0.5, 0.0, 1.0, 2.5] {
            assert!(loss(&[z], &[0.0], &cfg) <= loss(&[z], &[0.0], &AslConfig::bce()));
        }
    }

    #[test]
    fn rejects_non_binary_target() {
        let tape = Tape::new();
        let l = tape.constant(Tensor::from_vec(vec![0.0]));
        assert!(asl_loss(&l, &Tensor::from_vec(vec![0.5]), &AslConfig::default()).is_err());
    }

    #[test]
    fn task_masking() {
        // cat, dog, car
        let labels = [1u8, 1, 0];
        assert_eq!(mask_to_task(&labels, &[2]), vec![0.0]);
        assert_eq!(mask_to_task(&labels, &[0, 1, 2]), vec![1.0, 1.0, 0.0]);
        let wide = vec![0u8; 50];
        let task: Vec<usize> = (40..50).collect();
        assert_eq!(mask_to_task(&wide, &task).len(), 10);
    }
}
