//! Per-step trainers: the three-network simultaneous update plus the
//! baseline procedures it is compared against, and held-out evaluation.
//!
//! Within one step the three networks are updated in a configurable order
//! (discriminator, generator, classifier by default). The fake batch is
//! produced once at the start of the step; the discriminator and classifier
//! consume its values as constants, while the generator's own update
//! differentiates through its forward pass. Each network receives exactly
//! one optimizer step per call.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::adam::{AdamParams, AdamState};
use crate::data::{Dataset, LabeledBatch, UnlabeledBatch};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::loss::{
    classifier_objective, discriminator_loss, generator_objective, KlDirection, LossReport,
    LossWeights,
};
use crate::net::{Mode, Network};
use crate::tensor::Tensor;

/// The training procedures reported in the benchmark grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainerKind {
    /// Supervised classifier only.
    Vanilla,
    /// One shared network scoring num_classes + 1 outputs (extra fake class).
    MultitaskD,
    /// Separate classifier on pseudo-labeled fakes; generator gets no
    /// classifier feedback.
    EcGan,
    /// Full three-network scheme with pseudo-label and KL terms.
    TriGan,
}

impl TrainerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainerKind::Vanilla => "vanilla",
            TrainerKind::MultitaskD => "multitask",
            TrainerKind::EcGan => "ecgan",
            TrainerKind::TriGan => "3ngan",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(TrainerKind::Vanilla),
            "multitask" => Ok(TrainerKind::MultitaskD),
            "ecgan" => Ok(TrainerKind::EcGan),
            "3ngan" => Ok(TrainerKind::TriGan),
            other => Err(Error::Invalid(alloc::format!(
                "unknown trainer {other:?}; expected vanilla | multitask | ecgan | 3ngan"
            ))),
        }
    }

    pub fn uses_gan(self) -> bool {
        !matches!(self, TrainerKind::Vanilla)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Discriminator,
    Generator,
    Classifier,
}

/// Order of the three per-step updates, e.g. "dgc".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UpdateOrder(pub [Phase; 3]);

impl Default for UpdateOrder {
    fn default() -> Self {
        UpdateOrder([Phase::Discriminator, Phase::Generator, Phase::Classifier])
    }
}

impl UpdateOrder {
    pub fn parse(s: &str) -> Result<Self> {
        let mut phases = [Phase::Discriminator; 3];
        if s.len() != 3 {
            return Err(Error::Invalid(
                "update order must be a permutation of \"dgc\"".to_string(),
            ));
        }
        for (slot, ch) in phases.iter_mut().zip(s.chars()) {
            *slot = match ch {
                'd' => Phase::Discriminator,
                'g' => Phase::Generator,
                'c' => Phase::Classifier,
                _ => {
                    return Err(Error::Invalid(
                        "update order must be a permutation of \"dgc\"".to_string(),
                    ))
                }
            };
        }
        for p in [Phase::Discriminator, Phase::Generator, Phase::Classifier] {
            if !phases.contains(&p) {
                return Err(Error::Invalid(
                    "update order must be a permutation of \"dgc\"".to_string(),
                ));
            }
        }
        Ok(UpdateOrder(phases))
    }

    pub fn as_str(&self) -> alloc::string::String {
        self.0
            .iter()
            .map(|p| match p {
                Phase::Discriminator => 'd',
                Phase::Generator => 'g',
                Phase::Classifier => 'c',
            })
            .collect()
    }
}

/// A network together with its optimizer state.
#[derive(Debug, Clone)]
pub struct NetState {
    pub net: Network,
    pub opt: AdamState,
}

impl NetState {
    pub fn new(net: Network, hp: AdamParams) -> Self {
        let sizes = net.param_sizes();
        NetState {
            net,
            opt: AdamState::new(hp, &sizes),
        }
    }
}

/// Step-level knobs shared by the GAN trainers.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepConfig {
    pub weights: LossWeights,
    pub kl_direction: KlDirection,
    pub update_order: UpdateOrder,
}

/// Losses plus quick diagnostics for one training step.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepMetrics {
    pub report: LossReport,
    pub train_accuracy: f64,
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
}

impl StepMetrics {
    pub fn all_finite(&self) -> bool {
        self.report.all_finite()
            && self.train_accuracy.is_finite()
            && self.d_real_mean.is_finite()
            && self.d_fake_mean.is_finite()
    }
}

fn ensure_finite(component: &'static str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { component, value })
    }
}

/// Standard-normal latent batch.
pub fn sample_latent(batch: usize, latent_dim: usize, rng: &mut ChaCha12Rng) -> Tensor {
    let data = (0..batch * latent_dim)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Tensor::new(vec![batch, latent_dim], data).unwrap()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn hits_from_logits(logits: &Tensor, labels: &[usize], eval_classes: usize) -> usize {
    let (_, cols) = logits.as_rows();
    let classes = eval_classes.min(cols);
    let mut hits = 0usize;
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits.data()[r * cols..r * cols + classes];
        let mut best = 0;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    hits
}

fn accuracy_from_logits(logits: &Tensor, labels: &[usize], eval_classes: usize) -> f64 {
    hits_from_logits(logits, labels, eval_classes) as f64 / labels.len() as f64
}

fn optimizer_step(state: &mut NetState, g: &Graph, bound: &[NodeId]) -> Result<()> {
    let grads: Vec<Option<&[f64]>> = bound.iter().map(|id| g.grad(*id)).collect();
    let NetState { net, opt } = state;
    let mut params: Vec<(&str, &mut [f64])> = net.params_mut().collect();
    opt.step(&mut params, &grads)
}

/// Shared generator-forward prologue: samples z, runs the generator inside
/// its own (gradient-carrying) graph and extracts the fake image values.
struct FakePass {
    graph: Graph,
    bound: Vec<NodeId>,
    fake_id: NodeId,
    fake: UnlabeledBatch,
}

fn generator_forward(
    gen: &mut NetState,
    batch: usize,
    rng: &mut ChaCha12Rng,
) -> Result<FakePass> {
    let mut graph = Graph::new();
    let bound = gen.net.bind(&mut graph, true);
    let z = sample_latent(batch, gen.net.spec().latent_dim, rng);
    let z_id = graph.constant(z);
    let fake_id = gen.net.forward(&mut graph, &bound, z_id, Mode::Train)?;
    let fake = UnlabeledBatch {
        images: graph.value(fake_id).clone(),
    };
    Ok(FakePass {
        graph,
        bound,
        fake_id,
        fake,
    })
}

/// Discriminator update on real vs detached fake images.
fn discriminator_update(
    batch: &LabeledBatch,
    fake: &UnlabeledBatch,
    dis: &mut NetState,
) -> Result<(f64, f64, f64, f64)> {
    let mut g = Graph::new();
    let bound = dis.net.bind(&mut g, true);
    let real_id = g.constant(batch.images.clone());
    let fake_id = g.constant(fake.images.clone());
    let d_real = dis.net.forward(&mut g, &bound, real_id, Mode::Train)?;
    let d_fake = dis.net.forward(&mut g, &bound, fake_id, Mode::Train)?;
    let (loss, l_d_real, l_d_fake) = discriminator_loss(&mut g, d_real, d_fake)?;
    ensure_finite("l_d_real", l_d_real)?;
    ensure_finite("l_d_fake", l_d_fake)?;
    g.backward(loss)?;
    optimizer_step(dis, &g, &bound)?;
    Ok((
        l_d_real,
        l_d_fake,
        mean(g.value(d_real).data()),
        mean(g.value(d_fake).data()),
    ))
}

/// Generator update through frozen discriminator (and, with nonzero lambda,
/// a frozen classifier in training-statistics mode).
fn generator_update(
    pass: &mut FakePass,
    gen: &mut NetState,
    dis: &mut NetState,
    cls: Option<&mut NetState>,
    weights: &LossWeights,
) -> Result<LossReport> {
    let g = &mut pass.graph;
    let d_bound = dis.net.bind(g, false);
    let d_fake = dis.net.forward(g, &d_bound, pass.fake_id, Mode::Train)?;
    let logits_g = match (weights.lambda != 0.0, cls) {
        (true, Some(cls)) => {
            let c_bound = cls.net.bind(g, false);
            Some(cls.net.forward(g, &c_bound, pass.fake_id, Mode::Train)?)
        }
        _ => None,
    };
    let (loss, report) = generator_objective(g, d_fake, logits_g, weights)?;
    ensure_finite("l_gen_adv", report.l_gen_adv)?;
    ensure_finite("l_g_total", report.l_g_total)?;
    g.backward(loss)?;
    optimizer_step(gen, g, &pass.bound)?;
    Ok(report)
}

/// Classifier update on the real batch plus detached fakes.
fn classifier_update(
    batch: &LabeledBatch,
    fake: Option<&UnlabeledBatch>,
    cls: &mut NetState,
    weights: &LossWeights,
    direction: KlDirection,
) -> Result<(LossReport, f64)> {
    let mut g = Graph::new();
    let bound = cls.net.bind(&mut g, true);
    let real_id = g.constant(batch.images.clone());
    let logits = cls.net.forward(&mut g, &bound, real_id, Mode::Train)?;
    let logits_g = match fake {
        Some(fake) if weights.lambda != 0.0 || weights.alpha != 0.0 => {
            let fake_id = g.constant(fake.images.clone());
            Some(cls.net.forward(&mut g, &bound, fake_id, Mode::Train)?)
        }
        _ => None,
    };
    let (loss, report) =
        classifier_objective(&mut g, logits, &batch.labels, logits_g, weights, direction)?;
    ensure_finite("l_s", report.l_s)?;
    ensure_finite("l_c_total", report.l_c_total)?;
    g.backward(loss)?;
    let acc = accuracy_from_logits(g.value(logits), &batch.labels, usize::MAX);
    optimizer_step(cls, &g, &bound)?;
    Ok((report, acc))
}

/// One step of the full three-network scheme.
pub fn tri_gan_step(
    batch: &LabeledBatch,
    gen: &mut NetState,
    dis: &mut NetState,
    cls: &mut NetState,
    cfg: &StepConfig,
    rng: &mut ChaCha12Rng,
) -> Result<StepMetrics> {
    gan_step(batch, gen, dis, cls, &cfg.weights, cfg, rng)
}

/// One step of the separate-classifier baseline: the classifier trains on
/// pseudo-labeled fakes but the generator sees only the adversarial term,
/// and there is no KL consistency.
pub fn ecgan_step(
    batch: &LabeledBatch,
    gen: &mut NetState,
    dis: &mut NetState,
    cls: &mut NetState,
    cfg: &StepConfig,
    rng: &mut ChaCha12Rng,
) -> Result<StepMetrics> {
    let weights = LossWeights {
        alpha: 0.0,
        ..cfg.weights
    };
    let gen_weights = LossWeights {
        lambda: 0.0,
        alpha: 0.0,
        ..cfg.weights
    };
    let mut metrics = StepMetrics::default();
    run_phases(
        batch,
        gen,
        dis,
        Some(cls),
        &weights,
        &gen_weights,
        cfg,
        rng,
        &mut metrics,
    )?;
    Ok(metrics)
}

fn gan_step(
    batch: &LabeledBatch,
    gen: &mut NetState,
    dis: &mut NetState,
    cls: &mut NetState,
    weights: &LossWeights,
    cfg: &StepConfig,
    rng: &mut ChaCha12Rng,
) -> Result<StepMetrics> {
    let mut metrics = StepMetrics::default();
    run_phases(
        batch,
        gen,
        dis,
        Some(cls),
        weights,
        weights,
        cfg,
        rng,
        &mut metrics,
    )?;
    Ok(metrics)
}

#[allow(clippy::too_many_arguments)]
fn run_phases(
    batch: &LabeledBatch,
    gen: &mut NetState,
    dis: &mut NetState,
    mut cls: Option<&mut NetState>,
    cls_weights: &LossWeights,
    gen_weights: &LossWeights,
    cfg: &StepConfig,
    rng: &mut ChaCha12Rng,
    metrics: &mut StepMetrics,
) -> Result<()> {
    cls_weights.validate()?;
    gen_weights.validate()?;
    let mut pass = generator_forward(gen, batch.len(), rng)?;
    for phase in cfg.update_order.0 {
        match phase {
            Phase::Discriminator => {
                let (l_d_real, l_d_fake, d_real_mean, d_fake_mean) =
                    discriminator_update(batch, &pass.fake, dis)?;
                metrics.report.l_d_real = l_d_real;
                metrics.report.l_d_fake = l_d_fake;
                metrics.d_real_mean = d_real_mean;
                metrics.d_fake_mean = d_fake_mean;
            }
            Phase::Generator => {
                let report =
                    generator_update(&mut pass, gen, dis, cls.as_deref_mut(), gen_weights)?;
                metrics.report.l_gen_adv = report.l_gen_adv;
                metrics.report.l_cu = report.l_cu;
                metrics.report.l_g_total = report.l_g_total;
            }
            Phase::Classifier => {
                let cls = cls.as_deref_mut().ok_or_else(|| {
                    Error::Invalid("classifier phase requires a classifier".to_string())
                })?;
                let (report, acc) = classifier_update(
                    batch,
                    Some(&pass.fake),
                    cls,
                    cls_weights,
                    cfg.kl_direction,
                )?;
                metrics.report.l_s = report.l_s;
                metrics.report.l_u = report.l_u;
                metrics.report.l_kl = report.l_kl;
                metrics.report.l_c_total = report.l_c_total;
                metrics.report.accepted_fraction = report.accepted_fraction;
                metrics.train_accuracy = acc;
            }
        }
    }
    Ok(())
}

/// One step of the supervised-only baseline.
pub fn vanilla_step(batch: &LabeledBatch, cls: &mut NetState) -> Result<StepMetrics> {
    let weights = LossWeights {
        lambda: 0.0,
        alpha: 0.0,
        ..LossWeights::default()
    };
    let (report, acc) = classifier_update(batch, None, cls, &weights, KlDirection::RealToFake)?;
    Ok(StepMetrics {
        report,
        train_accuracy: acc,
        d_real_mean: 0.0,
        d_fake_mean: 0.0,
    })
}

/// One step of the shared-network baseline: a single trunk scores
/// num_classes real classes plus one fake class. Real samples train toward
/// their label, detached fakes toward the fake class, and the generator is
/// pushed away from the fake class.
pub fn multitask_step(
    batch: &LabeledBatch,
    gen: &mut NetState,
    shared: &mut NetState,
    rng: &mut ChaCha12Rng,
) -> Result<StepMetrics> {
    let fake_class = shared.net.spec().num_classes - 1;
    let mut metrics = StepMetrics::default();
    let mut pass = generator_forward(gen, batch.len(), rng)?;

    // Shared network update: classification plus fake-class discrimination.
    {
        let mut g = Graph::new();
        let bound = shared.net.bind(&mut g, true);
        let real_id = g.constant(batch.images.clone());
        let logits_real = shared.net.forward(&mut g, &bound, real_id, Mode::Train)?;
        let fake_id = g.constant(pass.fake.images.clone());
        let logits_fake = shared.net.forward(&mut g, &bound, fake_id, Mode::Train)?;
        let ce_real = g.cross_entropy_mean(logits_real, &batch.labels)?;
        let fake_labels = vec![fake_class; batch.len()];
        let ce_fake = g.cross_entropy_mean(logits_fake, &fake_labels)?;
        let loss = g.apply(crate::graph::Primitive::Add, &[ce_real, ce_fake])?;
        metrics.report.l_s = g.value(ce_real).item();
        metrics.report.l_d_fake = g.value(ce_fake).item();
        metrics.report.l_c_total = g.value(loss).item();
        ensure_finite("l_s", metrics.report.l_s)?;
        ensure_finite("l_d_fake", metrics.report.l_d_fake)?;
        g.backward(loss)?;
        metrics.train_accuracy =
            accuracy_from_logits(g.value(logits_real), &batch.labels, fake_class);
        metrics.d_real_mean = 1.0 - mean_class_prob(g.value(logits_real), fake_class);
        optimizer_step(shared, &g, &bound)?;
    }

    // Generator update: avoid the fake class through the frozen shared net.
    {
        let g = &mut pass.graph;
        let bound = shared.net.bind(g, false);
        let logits_f = shared.net.forward(g, &bound, pass.fake_id, Mode::Train)?;
        let loss = g.avoid_class_mean(logits_f, fake_class)?;
        metrics.report.l_gen_adv = g.value(loss).item();
        metrics.report.l_g_total = metrics.report.l_gen_adv;
        ensure_finite("l_gen_adv", metrics.report.l_gen_adv)?;
        metrics.d_fake_mean = 1.0 - mean_class_prob(g.value(logits_f), fake_class);
        g.backward(loss)?;
        optimizer_step(gen, g, &pass.bound)?;
    }
    Ok(metrics)
}

/// Mean softmax probability of one class over a logits batch.
pub fn mean_class_prob(logits: &Tensor, class: usize) -> f64 {
    let (rows, cols) = logits.as_rows();
    let p = crate::kernels::softmax_rows(logits.data(), cols);
    let mut total = 0.0;
    for r in 0..rows {
        total += p[r * cols + class];
    }
    total / rows as f64
}

/// Fraction of argmax-correct predictions over the whole dataset, in
/// evaluation mode (running batchnorm statistics). `eval_classes` restricts
/// argmax to the first k outputs (the shared-network baseline carries an
/// extra fake class).
pub fn evaluate(cls: &mut Network, dataset: &Dataset, eval_classes: usize) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::BadDataset {
            reason: "evaluation on an empty dataset".to_string(),
        });
    }
    let chunk = 50usize;
    let mut hits = 0usize;
    let mut idx = 0usize;
    while idx < dataset.len() {
        let end = (idx + chunk).min(dataset.len());
        let batch = dataset.slice_batch(idx, end);
        let logits = cls.infer(&batch.images, Mode::Eval)?;
        hits += hits_from_logits(&logits, &batch.labels, eval_classes);
        idx = end;
    }
    Ok(hits as f64 / dataset.len() as f64)
}
