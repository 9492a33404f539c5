//! Differentiable loss terms for generator training: the GAN term, the
//! adversarial embedding term (mse / 2-norm / cosine, targeted or
//! untargeted), the perturbation-magnitude term (threshold hinge or DSSIM),
//! and their weighted combination.

use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};

use crate::embedder::Embedding;
use crate::error::{Error, Result};
use crate::imaging::{apply_perturbation, ssim_with_grad, Image, Perturbation, SsimParams};

/// Weights of L(G) = alpha * L_GAN + beta * L_adv + gamma * L_pert.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LossWeights {
    /// Defaults for the regime with a discriminator.
    pub fn with_discriminator() -> Self {
        LossWeights { alpha: 1.0, beta: 1.0, gamma: 10.0 }
    }

    /// Defaults for the discriminator-free regime; alpha is irrelevant
    /// because the GAN term is omitted from the combination.
    pub fn without_discriminator() -> Self {
        LossWeights { alpha: 0.0, beta: 1.0, gamma: 10.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::InvalidConfig("loss weights must be >= 0".into()));
        }
        if self.alpha == 0.0 && self.beta == 0.0 && self.gamma == 0.0 {
            return Err(Error::InvalidConfig(
                "at least one loss weight must be nonzero".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvLossKind {
    Mse,
    TwoNorm,
    Cosine,
}

/// Adversarial-loss configuration. For targeted attacks the target embedding
/// is carried here and doubles as the reference passed to `loss_adv`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvLossVariant {
    pub kind: AdvLossKind,
    pub targeted: bool,
    pub target: Option<Embedding>,
}

impl AdvLossVariant {
    pub fn untargeted(kind: AdvLossKind) -> Self {
        AdvLossVariant { kind, targeted: false, target: None }
    }

    pub fn targeted(kind: AdvLossKind, target: Embedding) -> Self {
        AdvLossVariant { kind, targeted: true, target: Some(target) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.targeted && self.target.is_none() {
            return Err(Error::InvalidConfig(
                "targeted adversarial loss requires a target embedding".into(),
            ));
        }
        if !self.targeted && self.target.is_some() {
            return Err(Error::InvalidConfig(
                "untargeted adversarial loss must not carry a target".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PertLossKind {
    Threshold,
    Ssim,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PertLossVariant {
    pub kind: PertLossKind,
    /// Per-pixel modification bound, used by the threshold kind.
    pub threshold: f64,
    /// SSIM settings, used by the ssim kind.
    #[serde(default)]
    pub ssim: SsimParams,
}

impl PertLossVariant {
    pub fn threshold(t: f64) -> Self {
        PertLossVariant { kind: PertLossKind::Threshold, threshold: t, ssim: SsimParams::default() }
    }

    pub fn ssim(params: SsimParams) -> Self {
        PertLossVariant { kind: PertLossKind::Ssim, threshold: 0.0, ssim: params }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == PertLossKind::Threshold && !(self.threshold > 0.0 && self.threshold <= 1.0)
        {
            return Err(Error::InvalidConfig(format!(
                "threshold must be in (0, 1], got {}",
                self.threshold
            )));
        }
        if self.kind == PertLossKind::Ssim {
            self.ssim.validate()?;
        }
        Ok(())
    }
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "{name} must lie strictly in (0, 1), got {p}"
        )));
    }
    Ok(())
}

/// Generator GAN term: -log p, rewarding the discriminator judging the
/// adversarial image as real.
pub fn loss_gan(disc_prob_on_adv: f64) -> Result<f64> {
    check_prob("disc_prob_on_adv", disc_prob_on_adv)?;
    Ok(-disc_prob_on_adv.ln())
}

/// d(loss_gan)/d(prob) = -1/p.
pub fn loss_gan_grad(disc_prob_on_adv: f64) -> Result<f64> {
    check_prob("disc_prob_on_adv", disc_prob_on_adv)?;
    Ok(-1.0 / disc_prob_on_adv)
}

/// Discriminator BCE: -log(p_real) - log(1 - p_adv).
pub fn loss_disc(prob_on_real: f64, prob_on_adv: f64) -> Result<f64> {
    check_prob("prob_on_real", prob_on_real)?;
    check_prob("prob_on_adv", prob_on_adv)?;
    Ok(-prob_on_real.ln() - (1.0 - prob_on_adv).ln())
}

/// Gradients of `loss_disc` wrt (prob_on_real, prob_on_adv).
pub fn loss_disc_grad(prob_on_real: f64, prob_on_adv: f64) -> Result<(f64, f64)> {
    check_prob("prob_on_real", prob_on_real)?;
    check_prob("prob_on_adv", prob_on_adv)?;
    Ok((-1.0 / prob_on_real, 1.0 / (1.0 - prob_on_adv)))
}

/// Distance D(a, r) per kind and its gradient wrt `a`, on raw vectors. The
/// training path treats embedding components as free variables (the
/// unit-norm constraint is handled by backpropagating through the
/// normalisation layer).
pub fn adv_distance_grad(a: &Array1<f64>, r: &Array1<f64>, kind: AdvLossKind) -> (f64, Array1<f64>) {
    match kind {
        AdvLossKind::Mse => {
            let d = a - r;
            let n = a.len() as f64;
            let value = d.mapv(|v| v * v).sum() / n;
            (value, d.mapv(|v| 2.0 * v / n))
        }
        AdvLossKind::TwoNorm => {
            let d = a - r;
            let norm = d.dot(&d).sqrt();
            if norm < 1e-12 {
                (0.0, Array1::zeros(a.len()))
            } else {
                (norm, d.mapv(|v| v / norm))
            }
        }
        AdvLossKind::Cosine => (1.0 - a.dot(r), r.mapv(|v| -v)),
    }
}

fn adv_reference<'a>(e_ref: &'a Embedding, v: &'a AdvLossVariant) -> Result<&'a Embedding> {
    v.validate()?;
    Ok(match &v.target {
        Some(t) => t,
        None => e_ref,
    })
}

/// Targeted: D(e_adv, target). Untargeted: -D(e_adv, e_ref) (the distance to
/// the original identity is maximised).
pub fn loss_adv(e_adv: &Embedding, e_ref: &Embedding, v: &AdvLossVariant) -> Result<f64> {
    Ok(loss_adv_with_grad(e_adv, e_ref, v)?.0)
}

/// Loss plus its gradient wrt the components of `e_adv`.
pub fn loss_adv_with_grad(
    e_adv: &Embedding,
    e_ref: &Embedding,
    v: &AdvLossVariant,
) -> Result<(f64, Array1<f64>)> {
    let reference = adv_reference(e_ref, v)?;
    if e_adv.dim() != reference.dim() {
        return Err(Error::shape(
            format!("embedding dim {}", reference.dim()),
            format!("embedding dim {}", e_adv.dim()),
        ));
    }
    let (d, g) = adv_distance_grad(e_adv.values(), reference.values(), v.kind);
    if v.targeted {
        Ok((d, g))
    } else {
        Ok((-d, g.mapv(|x| -x)))
    }
}

/// Perturbation-magnitude term.
pub fn loss_pert(x: &Image, delta: &Perturbation, v: &PertLossVariant) -> Result<f64> {
    Ok(loss_pert_with_grad(x, delta, v)?.0)
}

/// Loss plus its gradient wrt `delta`.
pub fn loss_pert_with_grad(
    x: &Image,
    delta: &Perturbation,
    v: &PertLossVariant,
) -> Result<(f64, Array3<f64>)> {
    v.validate()?;
    if x.data().dim() != delta.data().dim() {
        return Err(Error::shape(
            format!("{:?}", x.data().dim()),
            format!("{:?}", delta.data().dim()),
        ));
    }
    match v.kind {
        PertLossKind::Threshold => {
            let t = v.threshold;
            let n = delta.data().len() as f64;
            let mut grad = Array3::zeros(delta.data().dim());
            let mut total = 0.0;
            for (g, &d) in grad.iter_mut().zip(delta.data().iter()) {
                let excess = d.abs() - t;
                if excess > 0.0 {
                    total += excess * excess;
                    *g = 2.0 * excess * d.signum() / n;
                }
            }
            Ok((total / n, grad))
        }
        PertLossKind::Ssim => {
            let y = apply_perturbation(x, delta)?;
            let (s, ds_dy) = ssim_with_grad(x, &y, &v.ssim)?;
            // dssim = (1 - ssim) / 2; clamp at the [0,1] bounds zeroes the
            // pass-through gradient
            let mut grad = ds_dy.mapv(|g| -0.5 * g);
            for (g, (&xi, &di)) in grad
                .iter_mut()
                .zip(x.data().iter().zip(delta.data().iter()))
            {
                let raw = xi + di;
                if !(raw > 0.0 && raw < 1.0) {
                    *g = 0.0;
                }
            }
            Ok(((1.0 - s) / 2.0, grad))
        }
    }
}

/// alpha * l_gan + beta * l_adv + gamma * l_pert; the GAN term is omitted
/// entirely (`l_gan = None`) when the discriminator is disabled.
pub fn combined_generator_loss(
    w: &LossWeights,
    l_gan: Option<f64>,
    l_adv: f64,
    l_pert: f64,
) -> f64 {
    let gan_term = match l_gan {
        Some(l) => w.alpha * l,
        None => 0.0,
    };
    gan_term + w.beta * l_adv + w.gamma * l_pert
}
