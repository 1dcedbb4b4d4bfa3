//! Training objectives on the fused class logits: label-smoothed binary
//! cross-entropy plus the asymmetric loss, each averaged over classes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::sigmoid_scalar;
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub smooth_eps: f64,
    pub gamma_pos: f64,
    pub gamma_neg: f64,
    pub margin: f64,
    pub floor: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            smooth_eps: 0.1,
            gamma_pos: 0.0,
            gamma_neg: 4.0,
            margin: 0.05,
            floor: 1e-8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !unit(self.smooth_eps) {
            return Err(Error::config("loss.smooth_eps", "must be in [0, 1)"));
        }
        if !(self.gamma_pos >= 0.0) || !self.gamma_pos.is_finite() {
            return Err(Error::config("loss.gamma_pos", "must be finite and >= 0"));
        }
        if !(self.gamma_neg >= 0.0) || !self.gamma_neg.is_finite() {
            return Err(Error::config("loss.gamma_neg", "must be finite and >= 0"));
        }
        if !unit(self.margin) {
            return Err(Error::config("loss.margin", "must be in [0, 1)"));
        }
        if !(self.floor > 0.0 && self.floor < 0.5) {
            return Err(Error::config("loss.floor", "must be in (0, 0.5)"));
        }
        Ok(())
    }
}

fn check_targets(logits: &[f64], targets: &[f64]) -> Result<()> {
    if logits.len() != targets.len() {
        return Err(Error::shape("loss targets", &[logits.len()], &[targets.len()]));
    }
    if targets.iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::Argument("targets must be 0 or 1".into()));
    }
    Ok(())
}

/// Clamped probability and whether the clamp was active.
fn clamped_prob(z: f64, floor: f64) -> (f64, bool) {
    let p = sigmoid_scalar(z);
    if p < floor {
        (floor, true)
    } else if p > 1.0 - floor {
        (1.0 - floor, true)
    } else {
        (p, false)
    }
}

/// `x^gamma` derivative, taken as 0 at the non-smooth point `x = 0`.
fn pow_grad(x: f64, gamma: f64) -> f64 {
    if gamma == 0.0 || x == 0.0 {
        0.0
    } else {
        gamma * x.powf(gamma - 1.0)
    }
}

/// Per-class smoothed BCE terms and their derivatives w.r.t. the logits.
fn smooth_bce_terms(logits: &[f64], targets: &[f64], eps: f64, floor: f64) -> Vec<(f64, f64)> {
    logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| {
            let ys = y * (1.0 - eps) + eps / 2.0;
            let (p, clamped) = clamped_prob(z, floor);
            let loss = -(ys * p.ln() + (1.0 - ys) * (1.0 - p).ln());
            let grad = if clamped { 0.0 } else { p - ys };
            (loss, grad)
        })
        .collect()
}

fn asymmetric_terms(logits: &[f64], targets: &[f64], cfg: &LossConfig) -> Vec<(f64, f64)> {
    logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| {
            let (p, clamped) = clamped_prob(z, cfg.floor);
            let dp_dz = if clamped { 0.0 } else { p * (1.0 - p) };
            if y == 1.0 {
                let q = 1.0 - p;
                let w = q.powf(cfg.gamma_pos);
                let nl = -p.ln();
                let loss = w * nl;
                // d/dp [q^g * (-ln p)] = -g q^(g-1) (-ln p) - q^g / p
                let dl_dp = -pow_grad(q, cfg.gamma_pos) * nl - w / p;
                (loss, dl_dp * dp_dz)
            } else {
                let pm = (p - cfg.margin).max(0.0);
                let (one_minus, floored) = if 1.0 - pm < cfg.floor {
                    (cfg.floor, true)
                } else {
                    (1.0 - pm, false)
                };
                let w = pm.powf(cfg.gamma_neg);
                let nl = -one_minus.ln();
                let loss = w * nl;
                let dl_dpm = pow_grad(pm, cfg.gamma_neg) * nl
                    + if floored { 0.0 } else { w / one_minus };
                let dpm_dp = if p > cfg.margin { 1.0 } else { 0.0 };
                (loss, dl_dpm * dpm_dp * dp_dz)
            }
        })
        .collect()
}

fn mean_of(terms: &[(f64, f64)]) -> f64 {
    terms.iter().map(|t| t.0).sum::<f64>() / terms.len() as f64
}

/// Label-smoothed BCE, averaged over classes.
pub fn label_smooth_bce(logits: &[f64], targets: &[f64], eps: f64, floor: f64) -> Result<f64> {
    check_targets(logits, targets)?;
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Argument(format!("smoothing eps {eps} not in [0, 1)")));
    }
    Ok(mean_of(&smooth_bce_terms(logits, targets, eps, floor)))
}

/// Asymmetric loss, averaged over classes.
pub fn asymmetric_loss(logits: &[f64], targets: &[f64], cfg: &LossConfig) -> Result<f64> {
    check_targets(logits, targets)?;
    Ok(mean_of(&asymmetric_terms(logits, targets, cfg)))
}

pub fn total_loss_value(logits: &[f64], targets: &[f64], cfg: &LossConfig) -> Result<f64> {
    Ok(label_smooth_bce(logits, targets, cfg.smooth_eps, cfg.floor)?
        + asymmetric_loss(logits, targets, cfg)?)
}

fn record(tape: &mut Tape, logits: Var, terms: Vec<(f64, f64)>) -> Var {
    let n = terms.len() as f64;
    let value = Tensor::scalar(mean_of(&terms));
    let grads: Vec<f64> = terms.iter().map(|t| t.1 / n).collect();
    tape.custom(
        &[logits],
        value,
        Box::new(move |g, inputs, _| {
            let s = g.data()[0];
            let data = grads.iter().map(|d| d * s).collect();
            Ok(vec![Tensor::new(inputs[0].shape(), data)?])
        }),
    )
}

/// Label-smoothed BCE recorded on the tape.
pub fn label_smooth_bce_on(
    tape: &mut Tape,
    logits: Var,
    targets: &[f64],
    cfg: &LossConfig,
) -> Result<Var> {
    let z = tape.value(logits).data().to_vec();
    check_targets(&z, targets)?;
    let terms = smooth_bce_terms(&z, targets, cfg.smooth_eps, cfg.floor);
    Ok(record(tape, logits, terms))
}

/// Asymmetric loss recorded on the tape.
pub fn asymmetric_loss_on(
    tape: &mut Tape,
    logits: Var,
    targets: &[f64],
    cfg: &LossConfig,
) -> Result<Var> {
    let z = tape.value(logits).data().to_vec();
    check_targets(&z, targets)?;
    let terms = asymmetric_terms(&z, targets, cfg);
    Ok(record(tape, logits, terms))
}

/// Sum of both objectives, differentiable end to end.
pub fn total_loss(tape: &mut Tape, logits: Var, targets: &[f64], cfg: &LossConfig) -> Result<Var> {
    let a = label_smooth_bce_on(tape, logits, targets, cfg)?;
    let b = asymmetric_loss_on(tape, logits, targets, cfg)?;
    tape.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain_bce(z: &[f64], y: &[f64], floor: f64) -> f64 {
        let s: f64 = z
            .iter()
            .zip(y)
            .map(|(&z, &y)| {
                let p = sigmoid_scalar(z).clamp(floor, 1.0 - floor);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum();
        s / z.len() as f64
    }

    #[test]
    fn confident_correct_tends_to_zero() {
        let l = label_smooth_bce(&[30.0], &[1.0], 0.0, 1e-8).unwrap();
        assert!(l < 1e-7);
        let cfg = LossConfig::default();
        assert!(asymmetric_loss(&[30.0], &[1.0], &cfg).unwrap() < 1e-7);
    }

    #[test]
    fn zero_eps_is_plain_bce() {
        let z = [0.3, -1.2, 4.0, -7.5];
        let y = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(label_smooth_bce(&z, &y, 0.0, 1e-8).unwrap(), plain_bce(&z, &y, 1e-8));
    }

    #[test]
    fn smoothing_at_zero_logit_is_log2() {
        let l = label_smooth_bce(&[0.0], &[1.0], 0.1, 1e-8).unwrap();
        let hand = -(0.95 * 0.5f64.ln() + 0.05 * 0.5f64.ln());
        assert!((l - hand).abs() < 1e-15);
        assert!((l - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn margin_dead_zone() {
        let cfg = LossConfig::default();
        // sigmoid(-4) ~ 0.018 < 0.05
        assert_eq!(asymmetric_loss(&[-4.0], &[0.0], &cfg).unwrap(), 0.0);
    }

    #[test]
    fn shifted_negative_hand_value() {
        let cfg = LossConfig::default();
        let z = (0.9f64 / 0.1).ln(); // sigmoid(z) = 0.9
        let l = asymmetric_loss(&[z], &[0.0], &cfg).unwrap();
        let pm: f64 = sigmoid_scalar(z) - 0.05;
        let hand = 0.85f64.powi(4) * -(0.15f64.ln());
        assert!((pm - 0.85).abs() < 1e-12);
        assert!((l - hand).abs() < 1e-10, "{l} vs {hand}");
    }

    #[test]
    fn degenerate_config_is_twice_bce() {
        let cfg = LossConfig {
            smooth_eps: 0.0,
            gamma_pos: 0.0,
            gamma_neg: 0.0,
            margin: 0.0,
            ..LossConfig::default()
        };
        let z = [0.3, -1.2, 4.0, -7.5, 25.0, -25.0];
        let y = [1.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        let total = total_loss_value(&z, &y, &cfg).unwrap();
        assert_eq!(total, 2.0 * plain_bce(&z, &y, cfg.floor));
    }

    #[test]
    fn tape_total_matches_value_path() {
        let cfg = LossConfig::default();
        let z = [0.3, -1.2, 4.0];
        let y = [1.0, 0.0, 0.0];
        let mut tape = Tape::new();
        let v = tape.input(Tensor::vector(&z));
        let l = total_loss(&mut tape, v, &y, &cfg).unwrap();
        assert_eq!(tape.value(l).data()[0], total_loss_value(&z, &y, &cfg).unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            smooth_eps: 1.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = LossConfig {
            gamma_neg: -1.0,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn bad_targets_rejected() {
        assert!(label_smooth_bce(&[0.0], &[0.5], 0.1, 1e-8).is_err());
        assert!(label_smooth_bce(&[0.0, 1.0], &[0.0], 0.1, 1e-8).is_err());
    }
}
