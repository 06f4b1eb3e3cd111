//! Supervised change-detection losses and the weighted multitask objective.

use sdacd_grad::Var;
use serde::{Deserialize, Serialize};

use crate::domain::{ChangeMask, ChangeProbMap, DomainTag};
use crate::error::{Error, Result};

/// Floor applied to probabilities inside every logarithm.
pub const PROB_FLOOR: f32 = 1e-7;

pub const DICE_SMOOTH: f64 = 1.0;

/// Inverse-frequency class weights are clamped to this interval.
pub const CLASS_WEIGHT_RANGE: (f64, f64) = (0.1, 10.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_cyc: f64,
    pub lambda_i: f64,
    pub lambda_f: f64,
    pub lambda_cd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cyc: 10.0,
            lambda_i: 1.0,
            lambda_f: 0.1,
            lambda_cd: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_i", self.lambda_i),
            ("lambda_f", self.lambda_f),
            ("lambda_cd", self.lambda_cd),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which feature-adaptation term enters the total.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaTerm {
    /// Extractor/classifier phases.
    Confusion,
    /// Domain-discriminator phase.
    Discriminator,
}

/// The four aggregate terms of the multitask objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ObjectiveComponents {
    pub cyc: f64,
    pub adv_i: f64,
    pub adv_f: f64,
    pub cd: f64,
}

/// `λ_cyc·cyc + λ_i·adv_i + λ_f·adv_f + λ_cd·cd`
pub fn weighted_objective(c: &ObjectiveComponents, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("cyc", c.cyc), ("adv_i", c.adv_i), ("adv_f", c.adv_f), ("cd", c.cd)] {
        if !v.is_finite() {
            return Err(Error::Numerical(format!("loss component `{name}` is {v}")));
        }
    }
    Ok(w.lambda_cyc * c.cyc + w.lambda_i * c.adv_i + w.lambda_f * c.adv_f + w.lambda_cd * c.cd)
}

/// Per-step loss report. `cd_per_pair` is indexed in [`DomainTag::ALL`]
/// order; inactive pairs are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBundle {
    pub cyc: f64,
    pub adv_i: f64,
    pub adv_f_disc: f64,
    pub adv_f_conf: f64,
    pub cd_per_pair: [Option<f64>; 3],
    pub cd_final: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn cd_pair(&self, tag: DomainTag) -> Option<f64> {
        self.cd_per_pair[tag as usize]
    }

    pub fn cd_sum(&self) -> f64 {
        self.cd_per_pair.iter().flatten().sum::<f64>() + self.cd_final
    }

    pub fn components(&self, term: FaTerm) -> ObjectiveComponents {
        ObjectiveComponents {
            cyc: self.cyc,
            adv_i: self.adv_i,
            adv_f: match term {
                FaTerm::Confusion => self.adv_f_conf,
                FaTerm::Discriminator => self.adv_f_disc,
            },
            cd: self.cd_sum(),
        }
    }

    /// Every field that is present is finite.
    pub fn check_finite(&self) -> Result<()> {
        let mut fields = vec![
            ("cyc", self.cyc),
            ("adv_i", self.adv_i),
            ("adv_f_disc", self.adv_f_disc),
            ("adv_f_conf", self.adv_f_conf),
            ("cd_final", self.cd_final),
            ("total", self.total),
        ];
        for (tag, v) in DomainTag::ALL.iter().zip(self.cd_per_pair) {
            if let Some(v) = v {
                fields.push((tag.name(), v));
            }
        }
        match fields.iter().find(|(_, v)| !v.is_finite()) {
            Some((name, v)) => Err(Error::Numerical(format!("loss component `{name}` is {v}"))),
            None => Ok(()),
        }
    }
}

pub fn total_objective(bundle: &LossBundle, w: &LossWeights, term: FaTerm) -> Result<f64> {
    weighted_objective(&bundle.components(term), w)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w0: f64,
    pub w1: f64,
}

impl Default for ClassWeights {
    fn default() -> Self {
        Self { w0: 1.0, w1: 1.0 }
    }
}

/// Inverse-frequency weights `w1 = N/(2·N_change)`, `w0 = N/(2·N_nochange)`,
/// clamped. An absent class counts as one pixel.
pub fn class_weights(labels: &[u8]) -> ClassWeights {
    let n = labels.len() as f64;
    let changed = labels.iter().filter(|&&y| y == 1).count();
    let unchanged = labels.len() - changed;
    let (lo, hi) = CLASS_WEIGHT_RANGE;
    let w = |count: usize| (n / (2.0 * count.max(1) as f64)).clamp(lo, hi);
    ClassWeights {
        w0: w(unchanged),
        w1: w(changed),
    }
}

fn ln_floor(p: f64) -> f64 {
    p.max(PROB_FLOOR as f64).ln()
}

/// Mean weighted binary cross-entropy and its gradient w.r.t. `p`.
pub fn wce_value_grad(p: &[f64], y: &[u8], w: ClassWeights) -> (f64, Vec<f64>) {
    let n = p.len() as f64;
    let floor = PROB_FLOOR as f64;
    let mut total = 0.0;
    let grad = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            if y == 1 {
                total -= w.w1 * ln_floor(p);
                if p > floor {
                    -w.w1 / (p * n)
                } else {
                    0.0
                }
            } else {
                total -= w.w0 * ln_floor(1.0 - p);
                if 1.0 - p > floor {
                    w.w0 / ((1.0 - p) * n)
                } else {
                    0.0
                }
            }
        })
        .collect();
    (total / n, grad)
}

/// `1 - (2·Σpy + s) / (Σp + Σy + s)` and its gradient w.r.t. `p`.
pub fn dice_value_grad(p: &[f64], y: &[u8], smooth: f64) -> (f64, Vec<f64>) {
    let inter: f64 = p.iter().zip(y).map(|(&p, &y)| p * y as f64).sum();
    let sp: f64 = p.iter().sum();
    let sy: f64 = y.iter().map(|&y| y as f64).sum();
    let num = 2.0 * inter + smooth;
    let den = sp + sy + smooth;
    let grad = y
        .iter()
        .map(|&y| -(2.0 * y as f64 * den - num) / (den * den))
        .collect();
    (1.0 - num / den, grad)
}

fn check_dims(probs: &ChangeProbMap, gt: &ChangeMask) -> Result<()> {
    if probs.height() != gt.height() || probs.width() != gt.width() {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            probs.height(),
            probs.width(),
            gt.height(),
            gt.width()
        )));
    }
    Ok(())
}

fn widen(probs: &ChangeProbMap) -> Vec<f64> {
    probs.values().iter().map(|&v| v as f64).collect()
}

pub fn weighted_cross_entropy(probs: &ChangeProbMap, gt: &ChangeMask, w: ClassWeights) -> Result<f64> {
    check_dims(probs, gt)?;
    if !(w.w0 > 0.0 && w.w1 > 0.0) {
        return Err(Error::Config(format!("class weights must be positive, got {w:?}")));
    }
    Ok(wce_value_grad(&widen(probs), gt.values(), w).0)
}

pub fn dice_loss(probs: &ChangeProbMap, gt: &ChangeMask, smooth: f64) -> Result<f64> {
    check_dims(probs, gt)?;
    if smooth <= 0.0 {
        return Err(Error::Config(format!("dice smoothing must be positive, got {smooth}")));
    }
    Ok(dice_value_grad(&widen(probs), gt.values(), smooth).0)
}

/// WCE + dice.
pub fn hybrid_loss(probs: &ChangeProbMap, gt: &ChangeMask, w: ClassWeights, smooth: f64) -> Result<f64> {
    Ok(weighted_cross_entropy(probs, gt, w)? + dice_loss(probs, gt, smooth)?)
}

/// WCE + dice on a graph node holding probabilities, labels aligned with
/// its flattened data.
pub fn hybrid_loss_var(probs: &Var, labels: &[u8], w: ClassWeights, smooth: f64) -> Var {
    let labels = labels.to_vec();
    probs.scalar_map(move |p| {
        let p: Vec<f64> = p.iter().map(|&v| v as f64).collect();
        let (wce, g1) = wce_value_grad(&p, &labels, w);
        let (dice, g2) = dice_value_grad(&p, &labels, smooth);
        let grad = g1.iter().zip(&g2).map(|(a, b)| (a + b) as f32).collect();
        ((wce + dice) as f32, grad)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CdLoss {
    pub per_pair: Vec<f64>,
    pub final_loss: f64,
    pub total: f64,
}

/// Hybrid loss of every per-pair prediction plus the fused prediction.
pub fn change_detection_loss(
    per_pair: &[ChangeProbMap],
    final_pred: &ChangeProbMap,
    gt: &ChangeMask,
    w: ClassWeights,
    smooth: f64,
) -> Result<CdLoss> {
    if per_pair.is_empty() {
        return Err(Error::Config("change-detection loss needs at least one pair prediction".into()));
    }
    let per_pair = per_pair
        .iter()
        .map(|p| hybrid_loss(p, gt, w, smooth))
        .collect::<Result<Vec<_>>>()?;
    let final_loss = hybrid_loss(final_pred, gt, w, smooth)?;
    let total = per_pair.iter().sum::<f64>() + final_loss;
    Ok(CdLoss {
        per_pair,
        final_loss,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(values: &[f32], h: usize, w: usize) -> ChangeProbMap {
        ChangeProbMap::new(h, w, values.to_vec()).unwrap()
    }

    fn mask(values: &[u8], h: usize, w: usize) -> ChangeMask {
        ChangeMask::new(h, w, values.to_vec()).unwrap()
    }

    #[test]
    fn wce_examples() {
        let p = map(&[0.5], 1, 1);
        let y = mask(&[1], 1, 1);
        let w = ClassWeights { w0: 1.0, w1: 1.0 };
        assert!((weighted_cross_entropy(&p, &y, w).unwrap() - 0.6931).abs() < 1e-4);
        let w2 = ClassWeights { w0: 1.0, w1: 2.0 };
        assert!((weighted_cross_entropy(&p, &y, w2).unwrap() - 1.3863).abs() < 1e-4);
        let perfect = weighted_cross_entropy(&map(&[1.0, 0.0], 1, 2), &mask(&[1, 0], 1, 2), w2).unwrap();
        assert!(perfect < 1e-6);
    }

    #[test]
    fn dice_examples() {
        let y = mask(&[1, 1, 1, 1, 0, 0, 0, 0, 0], 3, 3);
        let exact = map(&[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0], 3, 3);
        assert_eq!(dice_loss(&exact, &y, 1.0).unwrap(), 0.0);
        let zeros = ChangeProbMap::uniform(3, 3, 0.0).unwrap();
        assert!((dice_loss(&zeros, &y, 1.0).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(dice_loss(&zeros, &ChangeMask::zeros(3, 3), 1.0).unwrap(), 0.0);
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let p = ChangeProbMap::uniform(2, 2, 0.5).unwrap();
        let y = ChangeMask::zeros(2, 3);
        assert!(matches!(dice_loss(&p, &y, 1.0), Err(Error::Shape(_))));
        assert!(matches!(
            weighted_cross_entropy(&p, &y, ClassWeights::default()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn cd_loss_sums_components() {
        let y = mask(&[1, 0, 0, 1], 2, 2);
        let p = map(&[0.7, 0.2, 0.4, 0.6], 2, 2);
        let l = hybrid_loss(&p, &y, ClassWeights::default(), 1.0).unwrap();
        let cd = change_detection_loss(&[p.clone(), p.clone(), p.clone()], &p, &y, ClassWeights::default(), 1.0).unwrap();
        assert!((cd.total - 4.0 * l).abs() < 1e-12);
        let cd2 = change_detection_loss(&[p.clone(), p.clone()], &p, &y, ClassWeights::default(), 1.0).unwrap();
        assert_eq!(cd2.per_pair.len(), 2);
        assert!((cd2.total - 3.0 * l).abs() < 1e-12);
        assert!(matches!(
            change_detection_loss(&[], &p, &y, ClassWeights::default(), 1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn class_weights_inverse_frequency() {
        let w = class_weights(&[1, 0, 0, 0]);
        assert!((w.w1 - 2.0).abs() < 1e-12);
        assert!((w.w0 - 4.0 / 6.0).abs() < 1e-12);
        let none = class_weights(&[0; 100]);
        assert_eq!(none.w1, 10.0);
        assert!((none.w0 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn objective_examples() {
        let unit = ObjectiveComponents {
            cyc: 1.0,
            adv_i: 1.0,
            adv_f: 1.0,
            cd: 1.0,
        };
        assert_eq!(weighted_objective(&unit, &LossWeights::default()).unwrap(), 12.1);
        assert_eq!(
            weighted_objective(&ObjectiveComponents::default(), &LossWeights::default()).unwrap(),
            0.0
        );
        let ones = LossWeights {
            lambda_cyc: 1.0,
            lambda_i: 1.0,
            lambda_f: 1.0,
            lambda_cd: 1.0,
        };
        let c = ObjectiveComponents {
            cyc: 2.0,
            adv_i: 3.0,
            adv_f: 4.0,
            cd: 5.0,
        };
        assert_eq!(weighted_objective(&c, &ones).unwrap(), 14.0);
    }

    #[test]
    fn non_finite_component_is_named() {
        let bundle = LossBundle {
            adv_f_disc: f64::NAN,
            ..Default::default()
        };
        let err = total_objective(&bundle, &LossWeights::default(), FaTerm::Discriminator).unwrap_err();
        assert!(matches!(err, Error::Numerical(ref m) if m.contains("adv_f")));
        // the confusion-phase total does not read the discriminator term
        assert!(total_objective(&bundle, &LossWeights::default(), FaTerm::Confusion).is_ok());
    }

    #[test]
    fn bundle_total_uses_phase_term() {
        let bundle = LossBundle {
            adv_f_disc: 2.0,
            adv_f_conf: 3.0,
            cd_per_pair: [Some(1.0), None, Some(1.0)],
            cd_final: 1.0,
            ..Default::default()
        };
        let w = LossWeights::default();
        assert!((total_objective(&bundle, &w, FaTerm::Confusion).unwrap() - (0.3 + 3.0)).abs() < 1e-12);
        assert!((total_objective(&bundle, &w, FaTerm::Discriminator).unwrap() - (0.2 + 3.0)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn dice_is_bounded(values in proptest::collection::vec(0.0f32..=1.0, 16), labels in proptest::collection::vec(0u8..=1, 16), smooth in 1e-3f64..10.0) {
            let d = dice_loss(&map(&values, 4, 4), &mask(&labels, 4, 4), smooth).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
        }

        #[test]
        fn wce_monotone_in_p(a in 0.01f64..0.99, b in 0.01f64..0.99) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let w = ClassWeights { w0: 1.3, w1: 0.7 };
            prop_assert!(wce_value_grad(&[hi], &[1], w).0 <= wce_value_grad(&[lo], &[1], w).0);
            prop_assert!(wce_value_grad(&[hi], &[0], w).0 >= wce_value_grad(&[lo], &[0], w).0);
        }

        #[test]
        fn objective_is_linear(base in proptest::array::uniform4(-5.0f64..5.0), k in 0usize..4, delta in -3.0f64..3.0) {
            let comp = |v: [f64; 4]| ObjectiveComponents { cyc: v[0], adv_i: v[1], adv_f: v[2], cd: v[3] };
            let w = LossWeights::default();
            let lambdas = [w.lambda_cyc, w.lambda_i, w.lambda_f, w.lambda_cd];
            let mut moved = base;
            moved[k] += delta;
            let diff = weighted_objective(&comp(moved), &w).unwrap() - weighted_objective(&comp(base), &w).unwrap();
            prop_assert!((diff - lambdas[k] * delta).abs() < 1e-9);
        }
    }
}
