//! The classifier and generator objectives and their components: supervised
//! cross entropy, confidence-thresholded pseudo-labeling on generated
//! samples, KL consistency between batch-mean class distributions, and the
//! adversarial real/fake terms.

use alloc::string::ToString;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId, Primitive};

/// tau: pseudo-label confidence threshold; alpha: KL consistency weight;
/// lambda: unsupervised / classifier-adversarial weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub tau: f64,
    pub alpha: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            tau: 0.9,
            alpha: 0.3,
            lambda: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Invalid("tau must lie in [0, 1]".to_string()));
        }
        if self.alpha < 0.0 || self.lambda < 0.0 {
            return Err(Error::Invalid("alpha and lambda must be >= 0".to_string()));
        }
        Ok(())
    }
}

/// Direction of the consistency term between the batch-mean distribution on
/// real samples and the one on generated samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KlDirection {
    /// KL(real || generated)
    #[default]
    RealToFake,
    /// KL(generated || real)
    FakeToReal,
}

impl KlDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            KlDirection::RealToFake => "real-to-fake",
            KlDirection::FakeToReal => "fake-to-real",
        }
    }
}

/// Scalar record of every loss component of one step. Components that a
/// trainer does not compute stay at 0.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub l_s: f64,
    pub l_u: f64,
    pub l_kl: f64,
    pub l_c_total: f64,
    pub l_d_real: f64,
    pub l_d_fake: f64,
    pub l_gen_adv: f64,
    pub l_cu: f64,
    pub l_g_total: f64,
    pub accepted_fraction: f64,
}

impl LossReport {
    pub fn all_finite(&self) -> bool {
        [
            self.l_s,
            self.l_u,
            self.l_kl,
            self.l_c_total,
            self.l_d_real,
            self.l_d_fake,
            self.l_gen_adv,
            self.l_cu,
            self.l_g_total,
            self.accepted_fraction,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Mean negative log likelihood of the true labels, in log-sum-exp form.
pub fn supervised_loss(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    g.cross_entropy_mean(logits, labels)
}

/// Self-training term on generated-sample logits: rows whose max softmax
/// probability strictly exceeds tau contribute the cross entropy against
/// their own argmax (a constant), divided by the full batch size. Returns
/// the node and the accepted fraction.
pub fn pseudo_label_loss(g: &mut Graph, logits_g: NodeId, tau: f64) -> Result<(NodeId, f64)> {
    g.pseudo_label_mean(logits_g, tau)
}

/// KL divergence between the batch-mean predicted distributions on real and
/// generated samples; `direction` picks which side is the reference.
pub fn kl_consistency_loss(
    g: &mut Graph,
    logits_real: NodeId,
    logits_g: NodeId,
    direction: KlDirection,
) -> Result<NodeId> {
    match direction {
        KlDirection::RealToFake => g.kl_batch_mean(logits_real, logits_g),
        KlDirection::FakeToReal => g.kl_batch_mean(logits_g, logits_real),
    }
}

/// Full classifier objective: L_s + lambda * L_u + alpha * L_kl.
///
/// Zero-weighted terms are omitted from the returned node entirely, so with
/// lambda = alpha = 0 the result is the supervised loss node itself and
/// `logits_g` may be `None`.
pub fn classifier_objective(
    g: &mut Graph,
    logits: NodeId,
    labels: &[usize],
    logits_g: Option<NodeId>,
    weights: &LossWeights,
    direction: KlDirection,
) -> Result<(NodeId, LossReport)> {
    weights.validate()?;
    let l_s = supervised_loss(g, logits, labels)?;
    let mut report = LossReport {
        l_s: g.value(l_s).item(),
        ..LossReport::default()
    };
    let mut total = l_s;
    if weights.lambda != 0.0 || weights.alpha != 0.0 {
        let logits_g = logits_g.ok_or_else(|| {
            Error::Invalid("classifier objective with nonzero lambda or alpha needs generated-sample logits".to_string())
        })?;
        if weights.lambda != 0.0 {
            let (l_u, frac) = pseudo_label_loss(g, logits_g, weights.tau)?;
            report.l_u = g.value(l_u).item();
            report.accepted_fraction = frac;
            let scaled = g.scale(l_u, weights.lambda);
            total = g.apply(Primitive::Add, &[total, scaled])?;
        }
        if weights.alpha != 0.0 {
            let l_kl = kl_consistency_loss(g, logits, logits_g, direction)?;
            report.l_kl = g.value(l_kl).item();
            let scaled = g.scale(l_kl, weights.alpha);
            total = g.apply(Primitive::Add, &[total, scaled])?;
        }
    }
    report.l_c_total = g.value(total).item();
    Ok((total, report))
}

/// Conventional discriminator loss mean(-ln D(real)) + mean(-ln(1 - D(fake))).
/// Returns the node plus the two component values.
pub fn discriminator_loss(
    g: &mut Graph,
    d_real: NodeId,
    d_fake: NodeId,
) -> Result<(NodeId, f64, f64)> {
    let real_term = g.neg_log_mean(d_real);
    let fake_term = g.neg_log_one_minus_mean(d_fake);
    let total = g.apply(Primitive::Add, &[real_term, fake_term])?;
    Ok((total, g.value(real_term).item(), g.value(fake_term).item()))
}

/// Generator objective: the non-saturating adversarial term mean(-ln D(fake))
/// plus lambda times the pseudo-label loss on the (frozen) classifier's
/// logits for the same fake batch. With lambda = 0 the adversarial node is
/// returned unchanged and `logits_g` may be `None`.
pub fn generator_objective(
    g: &mut Graph,
    d_fake: NodeId,
    logits_g: Option<NodeId>,
    weights: &LossWeights,
) -> Result<(NodeId, LossReport)> {
    weights.validate()?;
    let adv = g.neg_log_mean(d_fake);
    let mut report = LossReport {
        l_gen_adv: g.value(adv).item(),
        ..LossReport::default()
    };
    let mut total = adv;
    if weights.lambda != 0.0 {
        let logits_g = logits_g.ok_or_else(|| {
            Error::Invalid("generator objective with nonzero lambda needs classifier logits".to_string())
        })?;
        let (l_cu, frac) = pseudo_label_loss(g, logits_g, weights.tau)?;
        report.l_cu = g.value(l_cu).item();
        report.accepted_fraction = frac;
        let scaled = g.scale(l_cu, weights.lambda);
        total = g.apply(Primitive::Add, &[total, scaled])?;
    }
    report.l_g_total = g.value(total).item();
    Ok((total, report))
}
