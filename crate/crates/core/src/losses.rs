//! Least-squares adversarial loss, discriminator feature matching, and the
//! combined generator and discriminator objectives.
//!
//! Reductions: mean over elements inside a map, plain sums over layers and
//! scales, accumulated in scale-then-layer order.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::discriminator::Discriminators;
use crate::error::{Error, Result};
use crate::nn::Bound;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the feature-matching term.
    pub lambda_fm: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda_fm: 10.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_fm >= 0.0) {
            return Err(Error::invalid(format!("lambda_fm {} must be >= 0", self.lambda_fm)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn target(self) -> f64 {
        match self {
            Label::Real => 1.0,
            Label::Fake => 0.0,
        }
    }
}

/// Mean squared deviation of a prediction map from the constant label.
pub fn adversarial_loss(prediction: &Tensor, label: Label) -> f64 {
    let t = label.target();
    prediction.data().iter().map(|v| (v - t) * (v - t)).sum::<f64>() / prediction.len() as f64
}

/// Sum over scales and layers of the mean absolute feature difference.
pub fn feature_matching_loss(real: &[Vec<Tensor>], fake: &[Vec<Tensor>]) -> Result<f64> {
    if real.len() != fake.len() {
        return Err(Error::shape(format!(
            "{} real scales vs {} fake scales",
            real.len(),
            fake.len()
        )));
    }
    let mut total = 0.0;
    for (rs, fs) in real.iter().zip(fake) {
        if rs.len() != fs.len() {
            return Err(Error::shape("feature layer counts differ"));
        }
        for (r, f) in rs.iter().zip(fs) {
            if r.shape() != f.shape() {
                return Err(Error::shape(format!(
                    "feature {:?} vs {:?}",
                    r.shape(),
                    f.shape()
                )));
            }
            let l1: f64 = r.data().iter().zip(f.data()).map(|(a, b)| (a - b).abs()).sum();
            total += l1 / r.len() as f64;
        }
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorLoss {
    pub total: f64,
    pub adversarial: f64,
    /// Unweighted feature-matching sum; `total = adversarial + lambda * feature_matching`.
    pub feature_matching: f64,
}

/// Graph handles of the generator objective.
pub struct GeneratorLossVars {
    pub total: Var,
    pub adversarial: Var,
    pub feature_matching: Var,
}

/// Record `sum_k [ LSGAN(D_k(X, fake), real) + lambda * FM_k ]`. Real-pair
/// features are detached, so the feature-matching term only pulls on `fake`.
pub fn generator_objective_graph(
    g: &mut Graph,
    discs: &Discriminators,
    bound: &[Bound<'_>],
    x: Var,
    y_real: Var,
    fake: Var,
    cfg: &LossConfig,
) -> Result<GeneratorLossVars> {
    let real = discs.forward_graph(g, bound, x, y_real)?;
    let fake_out = discs.forward_graph(g, bound, x, fake)?;
    let mut adv_terms = Vec::with_capacity(real.len());
    let mut fm_terms = Vec::new();
    for (r, f) in real.iter().zip(&fake_out) {
        adv_terms.push(g.mse_const(f.prediction, Label::Real.target()));
        for (&rf, &ff) in r.features.iter().zip(&f.features) {
            let rf = g.detach(rf);
            fm_terms.push(g.l1_mean(ff, rf)?);
        }
    }
    let adversarial = g.sum(&adv_terms)?;
    let feature_matching = g.sum(&fm_terms)?;
    let weighted = g.scale(feature_matching, cfg.lambda_fm);
    let total = g.sum(&[adversarial, weighted])?;
    Ok(GeneratorLossVars {
        total,
        adversarial,
        feature_matching,
    })
}

/// Record `sum_k [ LSGAN(D_k(X, Y_real), real) + LSGAN(D_k(X, Y_fake), fake) ] / 2`.
pub fn discriminator_objective_graph(
    g: &mut Graph,
    discs: &Discriminators,
    bound: &[Bound<'_>],
    x: Var,
    y_real: Var,
    y_fake: Var,
) -> Result<Var> {
    let y_fake = g.detach(y_fake);
    let real = discs.forward_graph(g, bound, x, y_real)?;
    let fake = discs.forward_graph(g, bound, x, y_fake)?;
    let mut terms = Vec::with_capacity(2 * real.len());
    for (r, f) in real.iter().zip(&fake) {
        terms.push(g.mse_const(r.prediction, Label::Real.target()));
        terms.push(g.mse_const(f.prediction, Label::Fake.target()));
    }
    let sum = g.sum(&terms)?;
    Ok(g.scale(sum, 0.5))
}

/// Value of the generator objective for a given (already output-gated) fake.
pub fn generator_objective(
    discs: &Discriminators,
    fake_masked: &Tensor,
    x: &Tensor,
    y_real: &Tensor,
    cfg: &LossConfig,
) -> Result<GeneratorLoss> {
    let mut g = Graph::new();
    let bound = discs.bind(&mut g, false);
    let (xv, yv, fv) = (
        g.constant(x.clone()),
        g.constant(y_real.clone()),
        g.constant(fake_masked.clone()),
    );
    let vars = generator_objective_graph(&mut g, discs, &bound, xv, yv, fv, cfg)?;
    Ok(GeneratorLoss {
        total: g.value(vars.total).item(),
        adversarial: g.value(vars.adversarial).item(),
        feature_matching: g.value(vars.feature_matching).item(),
    })
}

/// Value of the discriminator objective.
pub fn discriminator_objective(
    discs: &Discriminators,
    x: &Tensor,
    y_real: &Tensor,
    y_fake_detached: &Tensor,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = discs.bind(&mut g, false);
    let (xv, yv, fv) = (
        g.constant(x.clone()),
        g.constant(y_real.clone()),
        g.constant(y_fake_detached.clone()),
    );
    let v = discriminator_objective_graph(&mut g, discs, &bound, xv, yv, fv)?;
    Ok(g.value(v).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adversarial_examples() {
        assert_eq!(adversarial_loss(&Tensor::full([1, 1, 3, 3], 1.0), Label::Real), 0.0);
        assert_eq!(adversarial_loss(&Tensor::full([1, 1, 3, 3], 0.5), Label::Real), 0.25);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vals: Vec<f64> = (0..9).map(|_| rng.random_range(-2.0..2.0)).collect();
        let t = Tensor::from_vec([1, 1, 3, 3], vals.clone()).unwrap();
        let mut oracle = 0.0;
        for v in &vals {
            oracle += v * v;
        }
        oracle /= 9.0;
        assert!((adversarial_loss(&t, Label::Fake) - oracle).abs() < 1e-15);
    }

    #[test]
    fn feature_matching_examples() {
        let real = vec![vec![Tensor::full([1, 2, 3, 3], 0.2), Tensor::full([1, 4, 2, 2], -1.0)]];
        assert_eq!(feature_matching_loss(&real, &real).unwrap(), 0.0);
        let fake: Vec<Vec<Tensor>> = real
            .iter()
            .map(|s| s.iter().map(|t| t.map(|v| v + 0.5)).collect())
            .collect();
        assert!((feature_matching_loss(&real, &fake).unwrap() - 1.0).abs() < 1e-15);
        let bad = vec![vec![Tensor::zeros([1, 2, 3, 3]), Tensor::zeros([1, 4, 2, 3])]];
        assert!(feature_matching_loss(&real, &bad).is_err());
    }

    #[test]
    fn negative_lambda_rejected() {
        assert!(LossConfig { lambda_fm: -1.0 }.validate().is_err());
        assert!(LossConfig { lambda_fm: f64::NAN }.validate().is_err());
        assert!(LossConfig::default().validate().is_ok());
    }
}
