//! Acceptance suite: one test per release criterion, each printing a
//! PASS line on success. Run with `cargo test -p trigan-cli --test
//! acceptance -- --nocapture` to see the lines.

use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use trigan_cli::config::ExperimentConfig;
use trigan_cli::run::{train_run_with, METRICS_HEADER};
use trigan_cli::sweep::{mean_std, sweep};
use trigan_core::adam::AdamParams;
use trigan_core::data::{make_synthetic, SyntheticSpec};
use trigan_core::graph::{Graph, NodeId, Primitive};
use trigan_core::loss::{
    classifier_objective, discriminator_loss, generator_objective, kl_consistency_loss,
    pseudo_label_loss, supervised_loss, KlDirection, LossWeights,
};
use trigan_core::net::{
    build_classifier, build_discriminator, build_generator, init_weights, Mode, NetworkSpec, Role,
};
use trigan_core::tensor::Tensor;
use trigan_core::train::{ecgan_step, tri_gan_step, NetState, StepConfig};

fn pass(name: &str) {
    println!("ACCEPTANCE {name}: PASS");
}

// ---------------------------------------------------------------------
// Shared finite-difference oracle
// ---------------------------------------------------------------------

fn fd_check(inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[NodeId]) -> NodeId, label: &str) {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = build(&mut g, &ids);
    g.backward(loss).unwrap();
    let grads: Vec<Vec<f64>> = ids.iter().map(|id| g.grad(*id).unwrap().to_vec()).collect();
    let h = 1e-5;
    for (k, t) in inputs.iter().enumerate() {
        for e in 0..t.numel() {
            let eval = |delta: f64| {
                let mut g2 = Graph::new();
                let ids2: Vec<NodeId> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, tj)| {
                        let mut tj = tj.clone();
                        if j == k {
                            tj.data_mut()[e] += delta;
                        }
                        g2.constant(tj)
                    })
                    .collect();
                let l = build(&mut g2, &ids2);
                g2.value(l).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let analytic = grads[k][e];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
            assert!(
                rel < 1e-4,
                "{label}: input {k} elem {e}: analytic {analytic} numeric {numeric}"
            );
        }
    }
}

fn rand_tensor(rng: &mut ChaCha12Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn confident_logits(rng: &mut ChaCha12Rng, b: usize, c: usize, tau: f64) -> Tensor {
    loop {
        let t = rand_tensor(rng, vec![b, c], -2.0, 2.0);
        let ok = t.data().chunks(c).all(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = exps.iter().sum();
            let mut ps: Vec<f64> = exps.iter().map(|e| e / s).collect();
            ps.sort_by(|a, b| b.partial_cmp(a).unwrap());
            (ps[0] - tau).abs() > 0.03 && ps[0] - ps[1] > 0.02
        });
        if ok {
            return t;
        }
    }
}

/// Criterion: every primitive and every loss passes central finite
/// differences on >= 20 random small instances at rel error < 1e-4, within
/// a minute.
#[test]
fn acceptance_gradient_correctness() {
    let started = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(4242);
    let weights = LossWeights {
        tau: 0.5,
        alpha: 0.3,
        lambda: 0.01,
    };
    for i in 0..20usize {
        let b = 1 + i % 3;
        let c = 2 + i % 3;
        // Primitives under a weighted-mean head.
        let up2 = rand_tensor(&mut rng, vec![b, c], -1.0, 1.0);
        for prim in [
            Primitive::Relu,
            Primitive::LeakyRelu { slope: 0.2 },
            Primitive::Tanh,
            Primitive::Sigmoid,
            Primitive::Softmax,
        ] {
            let x = {
                let t = rand_tensor(&mut rng, vec![b, c], 0.1, 1.6);
                let signs: Vec<f64> = t
                    .data()
                    .iter()
                    .map(|&v| if rng.gen_bool(0.5) { v } else { -v })
                    .collect();
                Tensor::new(vec![b, c], signs).unwrap()
            };
            let (p, u) = (prim.clone(), up2.clone());
            fd_check(
                &[x],
                &|g, ids| {
                    let y = g.apply(p.clone(), &[ids[0]]).unwrap();
                    let w = g.constant(u.clone());
                    let m = g.apply(Primitive::Mul, &[y, w]).unwrap();
                    g.apply(Primitive::Mean, &[m]).unwrap()
                },
                "primitive",
            );
        }
        let xp = rand_tensor(&mut rng, vec![b, c], 0.4, 2.0);
        let u = up2.clone();
        fd_check(
            &[xp],
            &|g, ids| {
                let y = g.apply(Primitive::Log, &[ids[0]]).unwrap();
                let w = g.constant(u.clone());
                let m = g.apply(Primitive::Mul, &[y, w]).unwrap();
                g.apply(Primitive::Mean, &[m]).unwrap()
            },
            "log",
        );
        // add / mul / mean / reshape / concat.
        let a = rand_tensor(&mut rng, vec![b, c], -1.0, 1.0);
        let b2 = rand_tensor(&mut rng, vec![b, c], -1.0, 1.0);
        let cat_up = rand_tensor(&mut rng, vec![b, 2 * c], -1.0, 1.0);
        fd_check(
            &[a.clone(), b2.clone()],
            &|g, ids| {
                let s = g.apply(Primitive::Add, &[ids[0], ids[1]]).unwrap();
                let p = g.apply(Primitive::Mul, &[s, ids[1]]).unwrap();
                let cat = g.apply(Primitive::Concat { axis: 1 }, &[p, ids[0]]).unwrap();
                let r = g
                    .apply(Primitive::Reshape { shape: vec![b * 2 * c] }, &[cat])
                    .unwrap();
                let w0 = g.constant(cat_up.clone());
                let w = g
                    .apply(Primitive::Reshape { shape: vec![b * 2 * c] }, &[w0])
                    .unwrap();
                let m = g.apply(Primitive::Mul, &[r, w]).unwrap();
                g.apply(Primitive::Mean, &[m]).unwrap()
            },
            "structural",
        );
        // linear / conv2d / conv2d_transpose / batchnorm2d.
        let x = rand_tensor(&mut rng, vec![b, 3], -1.0, 1.0);
        let w = rand_tensor(&mut rng, vec![3, c], -1.0, 1.0);
        let bias = rand_tensor(&mut rng, vec![c], -0.3, 0.3);
        let u = up2.clone();
        fd_check(
            &[x, w, bias],
            &|g, ids| {
                let y = g.apply(Primitive::Linear, &[ids[0], ids[1], ids[2]]).unwrap();
                let w = g.constant(u.clone());
                let m = g.apply(Primitive::Mul, &[y, w]).unwrap();
                g.apply(Primitive::Mean, &[m]).unwrap()
            },
            "linear",
        );
        let (ci, co, k, s, p, hh) = (1 + i % 2, 1 + (i + 1) % 2, 3, 1 + i % 2, i % 2, 5);
        let x = rand_tensor(&mut rng, vec![2, ci, hh, hh], -1.0, 1.0);
        let w = rand_tensor(&mut rng, vec![co, ci, k, k], -1.0, 1.0);
        let bias = rand_tensor(&mut rng, vec![co], -0.3, 0.3);
        let oh = (hh + 2 * p - k) / s + 1;
        let u = rand_tensor(&mut rng, vec![2, co, oh, oh], -1.0, 1.0);
        fd_check(
            &[x, w, bias],
            &|g, ids| {
                let y = g
                    .apply(Primitive::Conv2d { stride: s, padding: p }, &[ids[0], ids[1], ids[2]])
                    .unwrap();
                let w = g.constant(u.clone());
                let m = g.apply(Primitive::Mul, &[y, w]).unwrap();
                g.apply(Primitive::Mean, &[m]).unwrap()
            },
            "conv2d",
        );
        let x = rand_tensor(&mut rng, vec![2, ci, 3, 3], -1.0, 1.0);
        let w = rand_tensor(&mut rng, vec![ci, co, k, k], -1.0, 1.0);
        let bias = rand_tensor(&mut rng, vec![co], -0.3, 0.3);
        let oh = 2 * s + k - 2 * p;
        let u = rand_tensor(&mut rng, vec![2, co, oh, oh], -1.0, 1.0);
        fd_check(
            &[x, w, bias],
            &|g, ids| {
                let y = g
                    .apply(
                        Primitive::ConvTranspose2d { stride: s, padding: p },
                        &[ids[0], ids[1], ids[2]],
                    )
                    .unwrap();
                let w = g.constant(u.clone());
                let m = g.apply(Primitive::Mul, &[y, w]).unwrap();
                g.apply(Primitive::Mean, &[m]).unwrap()
            },
            "conv2d_transpose",
        );
        let x = rand_tensor(&mut rng, vec![2, 2, 3, 3], -2.0, 2.0);
        let gamma = rand_tensor(&mut rng, vec![2], 0.5, 1.5);
        let beta = rand_tensor(&mut rng, vec![2], -0.5, 0.5);
        let u = rand_tensor(&mut rng, vec![2, 2, 3, 3], -1.0, 1.0);
        fd_check(
            &[x, gamma, beta],
            &|g, ids| {
                let y = g
                    .apply(Primitive::BatchNorm2d { eps: 1e-5 }, &[ids[0], ids[1], ids[2]])
                    .unwrap();
                let w = g.constant(u.clone());
                let m = g.apply(Primitive::Mul, &[y, w]).unwrap();
                g.apply(Primitive::Mean, &[m]).unwrap()
            },
            "batchnorm2d",
        );
        // Losses.
        let logits = rand_tensor(&mut rng, vec![b, c], -2.0, 2.0);
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
        let l = labels.clone();
        fd_check(
            std::slice::from_ref(&logits),
            &|g, ids| supervised_loss(g, ids[0], &l).unwrap(),
            "supervised",
        );
        let safe = confident_logits(&mut rng, b, c, weights.tau);
        fd_check(
            std::slice::from_ref(&safe),
            &|g, ids| pseudo_label_loss(g, ids[0], weights.tau).unwrap().0,
            "pseudo_label",
        );
        let other = rand_tensor(&mut rng, vec![b, c], -2.0, 2.0);
        fd_check(
            &[logits.clone(), other.clone()],
            &|g, ids| kl_consistency_loss(g, ids[0], ids[1], KlDirection::RealToFake).unwrap(),
            "kl",
        );
        let d_real = rand_tensor(&mut rng, vec![b], 0.05, 0.95);
        let d_fake = rand_tensor(&mut rng, vec![b], 0.05, 0.95);
        fd_check(
            &[d_real, d_fake.clone()],
            &|g, ids| discriminator_loss(g, ids[0], ids[1]).unwrap().0,
            "discriminator",
        );
        fd_check(
            &[d_fake, safe.clone()],
            &|g, ids| generator_objective(g, ids[0], Some(ids[1]), &weights).unwrap().0,
            "generator_composite",
        );
        let lbl = labels.clone();
        fd_check(
            &[logits, safe],
            &|g, ids| {
                classifier_objective(g, ids[0], &lbl, Some(ids[1]), &weights, KlDirection::RealToFake)
                    .unwrap()
                    .0
            },
            "classifier_composite",
        );
    }
    let elapsed = started.elapsed();
    assert!(
        elapsed < Duration::from_secs(60),
        "gradient checks took {elapsed:?}"
    );
    pass(&format!("gradient-correctness ({elapsed:.2?})"));
}

/// Criterion: the reduction identities hold bit-exactly (or below 1e-12).
#[test]
fn acceptance_loss_identities() {
    let mut g = Graph::new();
    // classifier_objective(lambda=0, alpha=0) == supervised_loss.
    let logits = g.constant(Tensor::new(vec![3, 2], vec![0.4, -1.2, 0.0, 2.0, -0.7, 0.1]).unwrap());
    let labels = [0, 1, 1];
    let w0 = LossWeights {
        lambda: 0.0,
        alpha: 0.0,
        ..LossWeights::default()
    };
    let (total, _) =
        classifier_objective(&mut g, logits, &labels, None, &w0, KlDirection::RealToFake).unwrap();
    let l_s = supervised_loss(&mut g, logits, &labels).unwrap();
    assert_eq!(g.value(total).item().to_bits(), g.value(l_s).item().to_bits());

    // generator_objective(lambda=0) == the adversarial term.
    let d_fake = g.constant(Tensor::new(vec![3], vec![0.3, 0.6, 0.9]).unwrap());
    let (lg, _) = generator_objective(&mut g, d_fake, None, &w0).unwrap();
    let adv = g.neg_log_mean(d_fake);
    assert_eq!(g.value(lg).item().to_bits(), g.value(adv).item().to_bits());

    // pseudo_label_loss(tau = 1) = 0.
    let sharp = g.constant(Tensor::new(vec![2, 2], vec![500.0, -500.0, -500.0, 500.0]).unwrap());
    let (pl, frac) = pseudo_label_loss(&mut g, sharp, 1.0).unwrap();
    assert_eq!(g.value(pl).item(), 0.0);
    assert_eq!(frac, 0.0);

    // KL(P || P) = 0.
    let kl = kl_consistency_loss(&mut g, logits, logits, KlDirection::RealToFake).unwrap();
    assert_eq!(g.value(kl).item(), 0.0);

    // Uniform-logits cross entropy = ln C.
    for c in 2..6usize {
        let uniform = g.constant(Tensor::zeros(vec![2, c]));
        let ce = supervised_loss(&mut g, uniform, &[0, c - 1]).unwrap();
        assert!((g.value(ce).item() - (c as f64).ln()).abs() < 1e-12);
    }
    pass("loss-identities");
}

// ---------------------------------------------------------------------
// Naive convolution references
// ---------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn naive_conv(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    dims: (usize, usize, usize, usize, usize, usize),
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let (b, ci, h, wd, co, k) = dims;
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (wd + 2 * padding - k) / stride + 1;
    let mut y = vec![0.0; b * co * oh * ow];
    for (idx, out) in y.iter_mut().enumerate() {
        let c = idx % ow;
        let r = (idx / ow) % oh;
        let oc = (idx / (ow * oh)) % co;
        let bi = idx / (ow * oh * co);
        let mut acc = bias[oc];
        for ic in 0..ci {
            for i in 0..k {
                for j in 0..k {
                    let ih = (r * stride + i) as isize - padding as isize;
                    let iw = (c * stride + j) as isize - padding as isize;
                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wd {
                        acc += x[((bi * ci + ic) * h + ih as usize) * wd + iw as usize]
                            * w[((oc * ci + ic) * k + i) * k + j];
                    }
                }
            }
        }
        *out = acc;
    }
    y
}

/// Criterion: conv2d and conv2d_transpose match the naive reference on
/// random inputs up to 7x7 with absolute error < 1e-10.
#[test]
fn acceptance_convolution_oracle_equivalence() {
    let mut rng = ChaCha12Rng::seed_from_u64(777);
    for _ in 0..30 {
        let (b, ci, co) = (rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..3));
        let k = rng.gen_range(1..5);
        let stride = rng.gen_range(1..3);
        let padding = rng.gen_range(0..2);
        let h = rng.gen_range(k..8);
        let x: Vec<f64> = (0..b * ci * h * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..co * ci * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..co).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let want = naive_conv(&x, &w, &bias, (b, ci, h, h, co, k), stride, padding);
        let mut g = Graph::new();
        let xi = g.constant(Tensor::new(vec![b, ci, h, h], x).unwrap());
        let wi = g.constant(Tensor::new(vec![co, ci, k, k], w).unwrap());
        let bi = g.constant(Tensor::new(vec![co], bias).unwrap());
        let y = g.apply(Primitive::Conv2d { stride, padding }, &[xi, wi, bi]).unwrap();
        for (a, e) in g.value(y).data().iter().zip(&want) {
            assert!((a - e).abs() < 1e-10);
        }
    }
    // Transposed convolution through zero stuffing + flipped kernel.
    for _ in 0..30 {
        let (b, ci, co) = (rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..3));
        let k = rng.gen_range(2..5);
        let stride = rng.gen_range(1..3);
        let padding = rng.gen_range(0..k.min(2));
        let h = rng.gen_range(2..8);
        let x: Vec<f64> = (0..b * ci * h * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..ci * co * k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..co).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // Zero-stuff x, flip + transpose w, then run the naive conv.
        let hs = (h - 1) * stride + 1;
        let mut stuffed = vec![0.0; b * ci * hs * hs];
        for bi in 0..b {
            for ic in 0..ci {
                for r in 0..h {
                    for c in 0..h {
                        stuffed[((bi * ci + ic) * hs + r * stride) * hs + c * stride] =
                            x[((bi * ci + ic) * h + r) * h + c];
                    }
                }
            }
        }
        let mut flipped = vec![0.0; co * ci * k * k];
        for ic in 0..ci {
            for oc in 0..co {
                for i in 0..k {
                    for j in 0..k {
                        flipped[((oc * ci + ic) * k + k - 1 - i) * k + k - 1 - j] =
                            w[((ic * co + oc) * k + i) * k + j];
                    }
                }
            }
        }
        let want = naive_conv(
            &stuffed,
            &flipped,
            &bias,
            (b, ci, hs, hs, co, k),
            1,
            k - 1 - padding,
        );
        let mut g = Graph::new();
        let xi = g.constant(Tensor::new(vec![b, ci, h, h], x).unwrap());
        let wi = g.constant(Tensor::new(vec![ci, co, k, k], w).unwrap());
        let bi = g.constant(Tensor::new(vec![co], bias).unwrap());
        let y = g
            .apply(Primitive::ConvTranspose2d { stride, padding }, &[xi, wi, bi])
            .unwrap();
        for (a, e) in g.value(y).data().iter().zip(&want) {
            assert!((a - e).abs() < 1e-10);
        }
    }
    pass("convolution-oracle-equivalence");
}

// ---------------------------------------------------------------------
// Step-level contracts
// ---------------------------------------------------------------------

fn trio(seed: u64) -> (NetState, NetState, NetState) {
    use trigan_core::seeds::{derive, Stream};
    let mut spec = NetworkSpec::new(Role::Generator, 32);
    spec.base_width = 4;
    spec.latent_dim = 16;
    let mut gen = build_generator(spec).unwrap();
    spec.role = Role::Discriminator;
    let mut dis = build_discriminator(spec).unwrap();
    spec.role = Role::Classifier;
    let mut cls = build_classifier(spec).unwrap();
    init_weights(&mut gen, derive(seed, Stream::GeneratorInit));
    init_weights(&mut dis, derive(seed, Stream::DiscriminatorInit));
    init_weights(&mut cls, derive(seed, Stream::ClassifierInit));
    let hp = AdamParams::default();
    (
        NetState::new(gen, hp),
        NetState::new(dis, hp),
        NetState::new(cls, hp),
    )
}

fn params_of(state: &NetState) -> Vec<Vec<u64>> {
    state
        .net
        .params()
        .iter()
        .map(|p| p.value.data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

fn batch_of(seed: u64) -> trigan_core::data::LabeledBatch {
    let ds = make_synthetic(&SyntheticSpec::new(32, 4, seed)).unwrap();
    ds.slice_batch(0, 8)
}

/// Criterion: frozen-parameter and no-gradient-leak contracts over 10
/// random steps, bit-exactly.
#[test]
fn acceptance_frozen_parameter_contracts() {
    let mut canonical = trio(99);
    for step in 0..10u64 {
        let batch = batch_of(step);
        // Within one step, every ordering of the three updates must leave
        // the discriminator and classifier results identical: their updates
        // depend only on the step-start fakes and their own parameters.
        let orders = ["dgc", "gdc", "dcg", "cdg", "gcd", "cgd"];
        let mut outcomes = Vec::new();
        for order in orders {
            let (mut g, mut d, mut c) = canonical.clone();
            let cfg = StepConfig {
                update_order: trigan_core::train::UpdateOrder::parse(order).unwrap(),
                ..StepConfig::default()
            };
            let mut rng = ChaCha12Rng::seed_from_u64(5000 + step);
            tri_gan_step(&batch, &mut g, &mut d, &mut c, &cfg, &mut rng).unwrap();
            outcomes.push((params_of(&g), params_of(&d), params_of(&c)));
        }
        for o in &outcomes[1..] {
            assert_eq!(outcomes[0].1, o.1, "discriminator differs across orders");
            assert_eq!(outcomes[0].2, o.2, "classifier differs across orders");
        }
        assert_eq!(outcomes[1].0, outcomes[4].0, "generator-first group");
        assert_eq!(outcomes[2].0, outcomes[3].0, "generator-last group");

        // No gradient reaches frozen parameters in the generator's update.
        let (gen, dis, cls) = &mut canonical;
        let mut graph = Graph::new();
        let g_bound = gen.net.bind(&mut graph, true);
        let mut rng = ChaCha12Rng::seed_from_u64(6000 + step);
        let z = trigan_core::train::sample_latent(4, gen.net.spec().latent_dim, &mut rng);
        let z_id = graph.constant(z);
        let fake = gen.net.forward(&mut graph, &g_bound, z_id, Mode::Train).unwrap();
        let d_bound = dis.net.bind(&mut graph, false);
        let c_bound = cls.net.bind(&mut graph, false);
        let d_fake = dis.net.forward(&mut graph, &d_bound, fake, Mode::Train).unwrap();
        let logits_g = cls.net.forward(&mut graph, &c_bound, fake, Mode::Train).unwrap();
        let w = LossWeights {
            tau: 0.0,
            ..LossWeights::default()
        };
        let (loss, _) = generator_objective(&mut graph, d_fake, Some(logits_g), &w).unwrap();
        graph.backward(loss).unwrap();
        for id in d_bound.iter().chain(&c_bound) {
            assert!(graph.grad(*id).is_none(), "gradient leaked into frozen net");
        }

        let mut rng = ChaCha12Rng::seed_from_u64(5000 + step);
        let (gen, dis, cls) = &mut canonical;
        tri_gan_step(&batch, gen, dis, cls, &StepConfig::default(), &mut rng).unwrap();
    }
    pass("frozen-parameter-contracts");
}

/// Criterion: tri_gan(lambda=0, alpha=0) and ecgan(alpha=0, lambda=0)
/// produce bit-identical parameter trajectories over 5 steps.
#[test]
fn acceptance_reduction_lattice() {
    let weights = LossWeights {
        lambda: 0.0,
        alpha: 0.0,
        ..LossWeights::default()
    };
    let cfg = StepConfig {
        weights,
        ..StepConfig::default()
    };
    let (mut tg, mut td, mut tc) = trio(123);
    let (mut eg, mut ed, mut ec) = trio(123);
    for step in 0..5u64 {
        let batch = batch_of(40 + step);
        let mut ra = ChaCha12Rng::seed_from_u64(7000 + step);
        let mut rb = ChaCha12Rng::seed_from_u64(7000 + step);
        tri_gan_step(&batch, &mut tg, &mut td, &mut tc, &cfg, &mut ra).unwrap();
        ecgan_step(&batch, &mut eg, &mut ed, &mut ec, &cfg, &mut rb).unwrap();
        assert_eq!(params_of(&tg), params_of(&eg));
        assert_eq!(params_of(&td), params_of(&ed));
        assert_eq!(params_of(&tc), params_of(&ec));
    }
    pass("reduction-lattice");
}

// ---------------------------------------------------------------------
// Desk-scale smoke benchmark
// ---------------------------------------------------------------------

fn smoke_config(trainer: &str, seed: u64, out: &std::path::Path) -> ExperimentConfig {
    ExperimentConfig {
        trainer: trainer.into(),
        synthetic: true,
        image_size: 32,
        base_width: 8,
        latent_dim: 100,
        n_train: 200,
        val_size: 400,
        pool_size: Some(200),
        data_seed: Some(1),
        epochs: 30,
        batch_size: 10,
        seed,
        sample_every: 0,
        out_dir: Some(out.to_path_buf()),
        ..ExperimentConfig::default()
    }
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Criterion: the property-based stand-in for the full-scale comparison:
/// vanilla median accuracy >= 0.85; the three-network scheme is
/// non-inferior (within 0.02); each run stays under 15 CPU minutes. The
/// soft ordering trend is reported but non-blocking.
#[test]
fn acceptance_smoke_benchmark() {
    let dir = tempfile::tempdir().unwrap();
    let trainers = ["vanilla", "ecgan", "3ngan"];
    let seeds = [1u64, 2, 3, 4, 5];
    let mut runs: Vec<(usize, u64)> = Vec::new();
    for (t, _) in trainers.iter().enumerate() {
        for &s in &seeds {
            runs.push((t, s));
        }
    }
    let results: Vec<std::sync::Mutex<Option<f64>>> =
        runs.iter().map(|_| std::sync::Mutex::new(None)).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let out = dir.path().to_path_buf();
    std::thread::scope(|scope| {
        for _ in 0..4 {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= runs.len() {
                    break;
                }
                let (t, s) = runs[i];
                let started = Instant::now();
                let outcome = train_run_with(&smoke_config(trainers[t], s, &out), false).unwrap();
                assert!(
                    started.elapsed() < Duration::from_secs(900),
                    "run exceeded 15 minutes"
                );
                *results[i].lock().unwrap() = Some(outcome.final_accuracy);
            });
        }
    });
    let mut acc = [Vec::new(), Vec::new(), Vec::new()];
    for ((t, _), r) in runs.iter().zip(&results) {
        acc[*t].push(r.lock().unwrap().expect("run finished"));
    }
    let vanilla = median(&mut acc[0]);
    let ec = median(&mut acc[1]);
    let tri = median(&mut acc[2]);
    println!("smoke medians: vanilla {vanilla:.4} ecgan {ec:.4} 3ngan {tri:.4}");
    assert!(vanilla >= 0.85, "vanilla median {vanilla}");
    assert!(tri >= vanilla - 0.02, "non-inferiority violated: {tri} vs {vanilla}");
    let ordering_holds = tri + 0.01 >= ec && ec + 0.01 >= vanilla;
    println!(
        "ACCEPTANCE smoke-ordering-trend (non-blocking): {}",
        if ordering_holds { "PASS" } else { "FAIL" }
    );
    pass("smoke-benchmark");
}

// ---------------------------------------------------------------------
// Harness-level criteria
// ---------------------------------------------------------------------

/// Criterion: identical config + seed reproduce metrics.csv and every PGM
/// byte-for-byte through the CLI binary.
#[test]
fn acceptance_determinism() {
    let bin = env!("CARGO_BIN_EXE_trigan");
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let status = std::process::Command::new(bin)
            .args([
                "train",
                "--algo",
                "3ngan",
                "--synthetic",
                "--n-train",
                "20",
                "--val-size",
                "20",
                "--image-size",
                "32",
                "--base-width",
                "4",
                "--latent-dim",
                "16",
                "--epochs",
                "2",
                "--batch-size",
                "5",
                "--seed",
                "9",
                "--sample-every",
                "1",
                "--out-dir",
            ])
            .arg(d.path())
            .status()
            .expect("binary runs");
        assert!(status.success());
    }
    let list = |root: &std::path::Path| -> Vec<std::path::PathBuf> {
        let hash_dir = std::fs::read_dir(root)
            .unwrap()
            .map(|e| e.unwrap().path())
            .find(|p| p.is_dir())
            .expect("run dir exists");
        let mut files: Vec<_> = std::fs::read_dir(hash_dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| {
                let name = p.file_name().unwrap().to_string_lossy().into_owned();
                name == "metrics.csv" || name.ends_with(".pgm")
            })
            .collect();
        files.sort();
        files
    };
    let (a, b) = (list(dirs[0].path()), list(dirs[1].path()));
    assert_eq!(a.len(), b.len());
    assert!(a.iter().any(|p| p.to_string_lossy().ends_with(".pgm")));
    for (fa, fb) in a.iter().zip(&b) {
        assert_eq!(fa.file_name(), fb.file_name());
        let (ba, bb) = (std::fs::read(fa).unwrap(), std::fs::read(fb).unwrap());
        assert_eq!(ba, bb, "{:?} differs between identical runs", fa.file_name());
    }
    pass("determinism");
}

/// Criterion: the sweep under protocol defaults produces the 4-trainer x
/// 5-size aggregate table, and its aggregates recompute exactly from
/// summary.csv. Protocol defaults themselves are pinned.
#[test]
fn acceptance_protocol_fidelity() {
    let d = ExperimentConfig::default();
    assert_eq!(d.epochs, 100);
    assert_eq!(d.batch_size, 10);
    assert_eq!(d.repeats, 5);
    assert_eq!(d.train_sizes, vec![200, 500, 750, 1000, 2000]);
    assert_eq!((d.tau, d.alpha, d.lambda), (0.9, 0.3, 0.01));
    assert_eq!(d.image_size, 64);
    assert_eq!(
        d.trainers,
        vec!["vanilla", "multitask", "ecgan", "3ngan"]
    );

    // Layout check at zero epochs: full default grid shape, tiny compute.
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        synthetic: true,
        image_size: 32,
        base_width: 4,
        latent_dim: 16,
        epochs: 0,
        repeats: 1,
        val_size: 40,
        out_dir: Some(dir.path().to_path_buf()),
        ..ExperimentConfig::default()
    };
    let outcome = sweep(&config).unwrap();
    assert_eq!(outcome.failures, 0);
    let summary = std::fs::read_to_string(outcome.sweep_dir.join("summary.csv")).unwrap();
    let aggregate = std::fs::read_to_string(outcome.sweep_dir.join("aggregate.csv")).unwrap();
    let summary_rows: Vec<&str> = summary.lines().skip(1).filter(|l| !l.is_empty()).collect();
    let aggregate_rows: Vec<&str> = aggregate.lines().skip(1).filter(|l| !l.is_empty()).collect();
    assert_eq!(summary_rows.len(), 4 * 5);
    assert_eq!(aggregate_rows.len(), 4 * 5, "4 trainers x 5 sizes");

    // Aggregates are exact recomputations of the summary rows.
    for row in aggregate_rows {
        let cells: Vec<&str> = row.split(',').collect();
        let (trainer, size) = (cells[0], cells[1]);
        let accs: Vec<f64> = summary_rows
            .iter()
            .filter(|r| {
                let c: Vec<&str> = r.split(',').collect();
                c[0] == trainer && c[1] == size
            })
            .map(|r| r.rsplit(',').next().unwrap().parse::<f64>().unwrap())
            .collect();
        let (mean, std) = mean_std(&accs);
        assert_eq!(cells[2].parse::<f64>().unwrap().to_bits(), mean.to_bits());
        assert_eq!(cells[3].parse::<f64>().unwrap().to_bits(), std.to_bits());
        assert_eq!(cells[4].parse::<usize>().unwrap(), accs.len());
    }
    pass("protocol-fidelity");
}

/// Spec example: a 30-epoch run writes 30 epoch rows per split, and the
/// vanilla trainer populates strictly fewer loss columns.
#[test]
fn acceptance_metrics_contract() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = smoke_config("3ngan", 1, dir.path());
    config.trainer = "3ngan".into();
    config.epochs = 3;
    config.n_train = 20;
    config.pool_size = Some(20);
    config.val_size = 20;
    config.base_width = 4;
    config.latent_dim = 16;
    let outcome = train_run_with(&config, false).unwrap();
    let text = std::fs::read_to_string(outcome.run_dir.join("metrics.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), METRICS_HEADER);
    let rows: Vec<&str> = text.lines().skip(1).filter(|l| !l.is_empty()).collect();
    assert_eq!(rows.len(), 2 * config.epochs);
    let tri_cols = rows[0].split(',').filter(|c| !c.is_empty()).count();

    config.trainer = "vanilla".into();
    let outcome = train_run_with(&config, false).unwrap();
    let text = std::fs::read_to_string(outcome.run_dir.join("metrics.csv")).unwrap();
    let first: &str = text.lines().nth(1).unwrap();
    let van_cols = first.split(',').filter(|c| !c.is_empty()).count();
    assert!(van_cols < tri_cols, "{van_cols} vs {tri_cols}");
    pass("metrics-contract");
}
