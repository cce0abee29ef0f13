//! `trigan`: experiment harness for the three-network adversarial trainer.
//!
//! Subcommands: train (one run), sweep (trainer x size x repeat grid),
//! generate (images from a generator checkpoint), eval (accuracy of a
//! classifier checkpoint on a dataset).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use trigan_cli::config::ExperimentConfig;
use trigan_cli::{checkpoint, imgdir, pgm, run, sweep, CliError};

#[derive(Parser)]
#[command(name = "trigan", version, about = "Three-network adversarial training harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one training configuration.
    Train(RunArgs),
    /// Run the trainer x size x repeat grid and aggregate the results.
    Sweep(RunArgs),
    /// Sample images from a generator checkpoint.
    Generate(GenerateArgs),
    /// Evaluate a classifier checkpoint on a dataset.
    Eval(EvalArgs),
}

/// Flags shared by train and sweep; every flag overrides the config file.
#[derive(Args)]
struct RunArgs {
    /// JSON config file; flags given here override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trainer: vanilla | multitask | ecgan | 3ngan.
    #[arg(long)]
    algo: Option<String>,
    /// Use the built-in synthetic dataset.
    #[arg(long)]
    synthetic: bool,
    /// Root directory holding train/ and val/ class directories.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Number of training images (balanced across classes).
    #[arg(long)]
    n_train: Option<usize>,
    /// Synthetic validation set size.
    #[arg(long)]
    val_size: Option<usize>,
    /// Synthetic pool size that n_train is subsampled from.
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    base_width: Option<usize>,
    /// Pseudo-label confidence threshold.
    #[arg(long)]
    tau: Option<f64>,
    /// KL consistency weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// Unsupervised / classifier-adversarial weight.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    /// Output root (default: $TRIGAN_OUT or ./runs).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// real-to-fake | fake-to-real.
    #[arg(long)]
    kl_direction: Option<String>,
    /// Permutation of "dgc".
    #[arg(long)]
    update_order: Option<String>,
    /// Export a sample grid every N epochs (0 disables).
    #[arg(long)]
    sample_every: Option<usize>,
    /// Sweep: comma-separated training-set sizes.
    #[arg(long)]
    train_sizes: Option<String>,
    /// Sweep: repeats per cell (repeat k uses seed + k).
    #[arg(long)]
    repeats: Option<usize>,
    /// Sweep: comma-separated trainer list.
    #[arg(long)]
    trainers: Option<String>,
    /// Sweep: concurrent cells.
    #[arg(long)]
    jobs: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! overlay {
            ($($field:ident),* $(,)?) => {
                $(if let Some(v) = &self.$field { c.$field = v.clone(); })*
            };
        }
        overlay!(
            n_train,
            val_size,
            epochs,
            batch_size,
            seed,
            image_size,
            latent_dim,
            base_width,
            tau,
            alpha,
            lambda,
            lr,
            beta1,
            beta2,
            eps,
            update_order,
            kl_direction,
            sample_every,
            repeats,
            jobs,
        );
        if let Some(algo) = &self.algo {
            c.trainer = algo.clone();
        }
        if self.synthetic {
            c.synthetic = true;
        }
        if let Some(dir) = &self.data_dir {
            c.data_dir = Some(dir.clone());
            c.synthetic = false;
        }
        if let Some(dir) = &self.out_dir {
            c.out_dir = Some(dir.clone());
        }
        if let Some(pool) = self.pool_size {
            c.pool_size = Some(pool);
        }
        if let Some(sizes) = &self.train_sizes {
            c.train_sizes = parse_list(sizes, "train_sizes")?;
        }
        if let Some(trainers) = &self.trainers {
            c.trainers = trainers.split(',').map(|s| s.trim().to_string()).collect();
        }
        Ok(c)
    }
}

fn parse_list(text: &str, what: &str) -> Result<Vec<usize>, CliError> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| CliError::new(format!("{what}: {s:?} is not a positive integer")))
        })
        .collect()
}

#[derive(Args)]
struct GenerateArgs {
    /// Generator checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Number of images to write.
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory for the PGM files.
    #[arg(long, default_value = "samples")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Classifier checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    synthetic: bool,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Synthetic validation set size.
    #[arg(long, default_value_t = 400)]
    val_size: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn cmd_generate(args: &GenerateArgs) -> Result<(), CliError> {
    use trigan_core::net::{Mode, Role};
    use trigan_core::seeds::{self, Stream};
    use trigan_core::train::sample_latent;

    let mut gen = checkpoint::load_role(&args.checkpoint, Role::Generator)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::new(format!("cannot create {}: {e}", args.out.display())))?;
    let mut rng = seeds::rng(args.seed, Stream::Latent);
    let z = sample_latent(args.count.max(1), gen.spec().latent_dim, &mut rng);
    let images = gen.infer(&z, Mode::Eval).map_err(CliError::from)?;
    let (h, w) = (images.shape()[2], images.shape()[3]);
    for i in 0..args.count {
        let bytes = pgm::sample_bytes(&images, i);
        pgm::write_pgm(&args.out.join(format!("sample_{i:03}.pgm")), w, h, &bytes)?;
    }
    let (mw, mh, bytes) = pgm::montage_bytes(&images);
    pgm::write_pgm(&args.out.join("montage.pgm"), mw, mh, &bytes)?;
    println!(
        "wrote {} samples and montage.pgm under {}",
        args.count,
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    use trigan_core::data::{make_synthetic, SyntheticSpec};
    use trigan_core::net::Role;
    use trigan_core::seeds::{self, Stream};
    use trigan_core::train::evaluate;

    let mut cls = checkpoint::load_role(&args.checkpoint, Role::Classifier)?;
    let ds = if args.synthetic {
        if args.val_size % 2 != 0 {
            return Err(CliError::new("val_size must be even for the synthetic set"));
        }
        let val_seed = seeds::derive(args.seed, Stream::SyntheticVal);
        make_synthetic(&SyntheticSpec::new(
            cls.spec().image_size,
            args.val_size / 2,
            val_seed,
        ))
        .map_err(CliError::from)?
    } else {
        let root = args
            .data_dir
            .as_ref()
            .ok_or_else(|| CliError::new("no dataset source: pass --synthetic or --data-dir"))?;
        let val_dir = root.join("val");
        let dir = if val_dir.is_dir() { val_dir } else { root.clone() };
        imgdir::load_image_dir(&dir, cls.spec().image_size)?
    };
    let acc = evaluate(&mut cls, &ds, ds.num_classes()).map_err(CliError::from)?;
    println!("accuracy {acc}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result: Result<ExitCode, CliError> = match &cli.cmd {
        Cmd::Train(args) => args.resolve().and_then(|c| run::train_run(&c)).map(|outcome| {
            println!(
                "run {} finished: final accuracy {}",
                outcome.config_hash, outcome.final_accuracy
            );
            println!("artifacts under {}", outcome.run_dir.display());
            ExitCode::SUCCESS
        }),
        Cmd::Sweep(args) => args.resolve().and_then(|c| sweep::sweep(&c)).map(|outcome| {
            println!("sweep artifacts under {}", outcome.sweep_dir.display());
            if outcome.failures > 0 {
                eprintln!("{} cells failed", outcome.failures);
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            }
        }),
        Cmd::Generate(args) => cmd_generate(args).map(|_| ExitCode::SUCCESS),
        Cmd::Eval(args) => cmd_eval(args).map(|_| ExitCode::SUCCESS),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
