//! One training run: dataset resolution, the epoch loop, metrics.csv,
//! sample grids and final checkpoints, all under out_root/<config-hash>/.

use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use trigan_core::adam::AdamParams;
use trigan_core::data::{batch_iter, make_synthetic, subsample_balanced, Dataset, SyntheticSpec};
use trigan_core::net::{
    build_classifier, build_discriminator, build_generator, init_weights, Mode, NetworkSpec, Role,
};
use trigan_core::seeds::{self, Stream};
use trigan_core::train::{
    ecgan_step, evaluate, multitask_step, sample_latent, tri_gan_step, vanilla_step, NetState,
    StepConfig, StepMetrics, TrainerKind,
};

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::pgm;
use crate::CliError;

pub const METRICS_HEADER: &str =
    "epoch,split,l_s,l_u,l_kl,l_d_real,l_d_fake,l_gen_adv,l_cu,accuracy,accepted_fraction";

pub struct RunOutcome {
    pub config_hash: String,
    pub run_dir: PathBuf,
    pub final_accuracy: f64,
}

/// Train and validation splits for a config.
pub fn resolve_datasets(config: &ExperimentConfig) -> Result<(Dataset, Dataset), CliError> {
    let data_seed = config.resolved_data_seed();
    let (pool, val) = if config.synthetic {
        let pool_spec = SyntheticSpec::new(config.image_size, config.resolved_pool_size() / 2, data_seed);
        let val_seed = seeds::derive(data_seed, Stream::SyntheticVal);
        let val_spec = SyntheticSpec::new(config.image_size, config.val_size / 2, val_seed);
        (
            make_synthetic(&pool_spec).map_err(CliError::from)?,
            make_synthetic(&val_spec).map_err(CliError::from)?,
        )
    } else {
        let root = config.data_dir.as_ref().expect("validated");
        let train_dir = root.join("train");
        let val_dir = root.join("val");
        if !train_dir.is_dir() || !val_dir.is_dir() {
            return Err(CliError::new(format!(
                "{} must hold train/ and val/ class directories",
                root.display()
            )));
        }
        (
            crate::imgdir::load_image_dir(&train_dir, config.image_size)?,
            crate::imgdir::load_image_dir(&val_dir, config.image_size)?,
        )
    };
    let train = subsample_balanced(&pool, config.n_train, seeds::derive(config.seed, Stream::Shuffle))
        .map_err(CliError::from)?;
    Ok((train, val))
}

struct Nets {
    gen: Option<NetState>,
    dis: Option<NetState>,
    cls: NetState,
}

fn build_nets(config: &ExperimentConfig, kind: TrainerKind, num_classes: usize) -> Result<Nets, CliError> {
    let hp = AdamParams {
        lr: config.lr,
        beta1: config.beta1,
        beta2: config.beta2,
        eps: config.eps,
    };
    let base = |role: Role| {
        let mut s = NetworkSpec::new(role, config.image_size);
        s.latent_dim = config.latent_dim;
        s.base_width = config.base_width;
        s.num_classes = num_classes;
        s
    };
    let mut cls_spec = base(Role::Classifier);
    if kind == TrainerKind::MultitaskD {
        cls_spec.num_classes = num_classes + 1;
    }
    let mut cls = build_classifier(cls_spec).map_err(CliError::from)?;
    init_weights(&mut cls, seeds::derive(config.seed, Stream::ClassifierInit));
    let cls = NetState::new(cls, hp);

    let (gen, dis) = if kind.uses_gan() {
        let mut gen = build_generator(base(Role::Generator)).map_err(CliError::from)?;
        init_weights(&mut gen, seeds::derive(config.seed, Stream::GeneratorInit));
        let dis = if kind == TrainerKind::MultitaskD {
            None
        } else {
            let mut dis = build_discriminator(base(Role::Discriminator)).map_err(CliError::from)?;
            init_weights(&mut dis, seeds::derive(config.seed, Stream::DiscriminatorInit));
            Some(NetState::new(dis, hp))
        };
        (Some(NetState::new(gen, hp)), dis)
    } else {
        (None, None)
    };
    Ok(Nets { gen, dis, cls })
}

/// Which metrics.csv columns a trainer populates on its train rows.
fn columns(kind: TrainerKind, m: &StepMetrics) -> [Option<f64>; 9] {
    let r = &m.report;
    match kind {
        TrainerKind::Vanilla => [
            Some(r.l_s),
            None,
            None,
            None,
            None,
            None,
            None,
            Some(m.train_accuracy),
            None,
        ],
        TrainerKind::MultitaskD => [
            Some(r.l_s),
            None,
            None,
            None,
            Some(r.l_d_fake),
            Some(r.l_gen_adv),
            None,
            Some(m.train_accuracy),
            None,
        ],
        TrainerKind::EcGan => [
            Some(r.l_s),
            Some(r.l_u),
            None,
            Some(r.l_d_real),
            Some(r.l_d_fake),
            Some(r.l_gen_adv),
            None,
            Some(m.train_accuracy),
            Some(r.accepted_fraction),
        ],
        TrainerKind::TriGan => [
            Some(r.l_s),
            Some(r.l_u),
            Some(r.l_kl),
            Some(r.l_d_real),
            Some(r.l_d_fake),
            Some(r.l_gen_adv),
            Some(r.l_cu),
            Some(m.train_accuracy),
            Some(r.accepted_fraction),
        ],
    }
}

fn csv_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn train_row(epoch: usize, kind: TrainerKind, mean: &StepMetrics) -> String {
    let c = columns(kind, mean);
    format!(
        "{epoch},train,{},{},{},{},{},{},{},{},{}",
        csv_cell(c[0]),
        csv_cell(c[1]),
        csv_cell(c[2]),
        csv_cell(c[3]),
        csv_cell(c[4]),
        csv_cell(c[5]),
        csv_cell(c[6]),
        csv_cell(c[7]),
        csv_cell(c[8]),
    )
}

fn val_row(epoch: usize, accuracy: f64) -> String {
    format!("{epoch},val,,,,,,,,{accuracy},")
}

fn add_metrics(sum: &mut StepMetrics, m: &StepMetrics) {
    let (a, b) = (&mut sum.report, &m.report);
    a.l_s += b.l_s;
    a.l_u += b.l_u;
    a.l_kl += b.l_kl;
    a.l_c_total += b.l_c_total;
    a.l_d_real += b.l_d_real;
    a.l_d_fake += b.l_d_fake;
    a.l_gen_adv += b.l_gen_adv;
    a.l_cu += b.l_cu;
    a.l_g_total += b.l_g_total;
    a.accepted_fraction += b.accepted_fraction;
    sum.train_accuracy += m.train_accuracy;
    sum.d_real_mean += m.d_real_mean;
    sum.d_fake_mean += m.d_fake_mean;
}

fn scale_metrics(sum: &mut StepMetrics, factor: f64) {
    let r = &mut sum.report;
    for v in [
        &mut r.l_s,
        &mut r.l_u,
        &mut r.l_kl,
        &mut r.l_c_total,
        &mut r.l_d_real,
        &mut r.l_d_fake,
        &mut r.l_gen_adv,
        &mut r.l_cu,
        &mut r.l_g_total,
        &mut r.accepted_fraction,
    ] {
        *v *= factor;
    }
    sum.train_accuracy *= factor;
    sum.d_real_mean *= factor;
    sum.d_fake_mean *= factor;
}

pub fn train_run(config: &ExperimentConfig) -> Result<RunOutcome, CliError> {
    train_run_with(config, true)
}

/// As [`train_run`], with per-epoch stdout logging switchable (sweep cells
/// run quietly).
pub fn train_run_with(config: &ExperimentConfig, log_epochs: bool) -> Result<RunOutcome, CliError> {
    config.validate()?;
    let started = Instant::now();
    let kind = config.trainer_kind()?;
    let step_cfg = StepConfig {
        weights: trigan_core::loss::LossWeights {
            tau: config.tau,
            alpha: config.alpha,
            lambda: config.lambda,
        },
        kl_direction: config.kl_direction()?,
        update_order: config.update_order()?,
    };

    let (train_ds, val_ds) = resolve_datasets(config)?;
    let num_classes = train_ds.num_classes();
    let mut nets = build_nets(config, kind, num_classes)?;

    let hash = config.hash();
    let run_dir = config.out_root().join(&hash);
    fs::create_dir_all(&run_dir)
        .map_err(|e| CliError::new(format!("cannot create {}: {e}", run_dir.display())))?;
    fs::write(
        run_dir.join("config.json"),
        serde_json::to_string_pretty(config).expect("config serializes"),
    )
    .map_err(|e| CliError::new(format!("cannot write config.json: {e}")))?;

    let metrics_path = run_dir.join("metrics.csv");
    let mut metrics = String::from(METRICS_HEADER);
    metrics.push('\n');

    let mut latent_rng = seeds::rng(config.seed, Stream::Latent);
    let mut val_history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut mean = StepMetrics::default();
        let mut steps = 0usize;
        for batch in batch_iter(&train_ds, config.batch_size, config.seed, (epoch - 1) as u64)
            .map_err(CliError::from)?
        {
            let m = match kind {
                TrainerKind::Vanilla => vanilla_step(&batch, &mut nets.cls),
                TrainerKind::MultitaskD => multitask_step(
                    &batch,
                    nets.gen.as_mut().expect("multitask has a generator"),
                    &mut nets.cls,
                    &mut latent_rng,
                ),
                TrainerKind::EcGan => ecgan_step(
                    &batch,
                    nets.gen.as_mut().expect("ecgan has a generator"),
                    nets.dis.as_mut().expect("ecgan has a discriminator"),
                    &mut nets.cls,
                    &step_cfg,
                    &mut latent_rng,
                ),
                TrainerKind::TriGan => tri_gan_step(
                    &batch,
                    nets.gen.as_mut().expect("3ngan has a generator"),
                    nets.dis.as_mut().expect("3ngan has a discriminator"),
                    &mut nets.cls,
                    &step_cfg,
                    &mut latent_rng,
                ),
            }
            .map_err(CliError::from)?;
            add_metrics(&mut mean, &m);
            steps += 1;
        }
        if steps > 0 {
            scale_metrics(&mut mean, 1.0 / steps as f64);
        }
        let val_acc = evaluate(&mut nets.cls.net, &val_ds, num_classes).map_err(CliError::from)?;
        val_history.push(val_acc);
        metrics.push_str(&train_row(epoch, kind, &mean));
        metrics.push('\n');
        metrics.push_str(&val_row(epoch, val_acc));
        metrics.push('\n');
        // Persist metrics every epoch so aborted runs keep their history.
        fs::write(&metrics_path, &metrics)
            .map_err(|e| CliError::new(format!("cannot write metrics.csv: {e}")))?;
        if log_epochs {
            println!(
                "epoch {epoch}/{}: l_s {:.4} val_acc {:.4}",
                config.epochs, mean.report.l_s, val_acc
            );
        }

        if kind.uses_gan() && config.sample_every > 0 && epoch % config.sample_every == 0 {
            let gen = nets.gen.as_mut().expect("gan trainer has a generator");
            write_sample_grid(gen, config, epoch, &run_dir)?;
        }
    }
    fs::write(&metrics_path, &metrics)
        .map_err(|e| CliError::new(format!("cannot write metrics.csv: {e}")))?;

    let final_accuracy = match val_history.last() {
        Some(&acc) => acc,
        None => evaluate(&mut nets.cls.net, &val_ds, num_classes).map_err(CliError::from)?,
    };

    checkpoint::save(&nets.cls.net, &run_dir.join("classifier.ckpt"))?;
    if let Some(gen) = &nets.gen {
        checkpoint::save(&gen.net, &run_dir.join("generator.ckpt"))?;
    }
    if let Some(dis) = &nets.dis {
        checkpoint::save(&dis.net, &run_dir.join("discriminator.ckpt"))?;
    }

    let record = serde_json::json!({
        "config_hash": hash,
        "trainer": config.trainer,
        "n_train": config.n_train,
        "seed": config.seed,
        "epochs": config.epochs,
        "final_accuracy": final_accuracy,
        "val_accuracy_per_epoch": val_history,
        "wall_ms": started.elapsed().as_millis() as u64,
        "version": env!("CARGO_PKG_VERSION"),
    });
    fs::write(
        run_dir.join("run.json"),
        serde_json::to_string_pretty(&record).expect("record serializes"),
    )
    .map_err(|e| CliError::new(format!("cannot write run.json: {e}")))?;

    Ok(RunOutcome {
        config_hash: hash,
        run_dir,
        final_accuracy,
    })
}

fn write_sample_grid(
    gen: &mut NetState,
    config: &ExperimentConfig,
    epoch: usize,
    run_dir: &std::path::Path,
) -> Result<(), CliError> {
    // A dedicated stream keeps grid sampling from disturbing training draws.
    let mut rng = seeds::rng_indexed(config.seed, Stream::Latent, 1 + epoch as u64);
    let z = sample_latent(64, gen.net.spec().latent_dim, &mut rng);
    let images = gen.net.infer(&z, Mode::Eval).map_err(CliError::from)?;
    let (w, h, bytes) = pgm::montage_bytes(&images);
    let path = run_dir.join(format!("samples_epoch{epoch:04}.pgm"));
    pgm::write_pgm(&path, w, h, &bytes)
}

/// Count data rows (excluding header) of a metrics file; test helper used
/// by the acceptance suite as well.
pub fn metrics_row_count(text: &str) -> usize {
    text.lines().skip(1).filter(|l| !l.is_empty()).count()
}
