//! The trainer x size x repeat benchmark grid: runs every cell (optionally
//! in parallel), then writes summary.csv (one row per cell) and
//! aggregate.csv (mean/std per trainer x size) shaped like the comparison
//! table of the protocol.

use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::config::ExperimentConfig;
use crate::run::train_run_with;
use crate::CliError;

pub struct SweepOutcome {
    pub sweep_dir: PathBuf,
    pub failures: usize,
}

struct Cell {
    trainer: String,
    size: usize,
    repeat: usize,
    config: ExperimentConfig,
}

fn cell_grid(config: &ExperimentConfig) -> Vec<Cell> {
    let pool = *config.train_sizes.iter().max().expect("validated non-empty");
    let mut cells = Vec::new();
    for trainer in &config.trainers {
        for &size in &config.train_sizes {
            for repeat in 0..config.repeats {
                let cell = ExperimentConfig {
                    trainer: trainer.clone(),
                    n_train: size,
                    seed: config.seed + repeat as u64,
                    data_seed: Some(config.resolved_data_seed()),
                    pool_size: Some(pool.max(config.resolved_pool_size())),
                    jobs: 1,
                    ..config.clone()
                };
                cells.push(Cell {
                    trainer: trainer.clone(),
                    size,
                    repeat,
                    config: cell,
                });
            }
        }
    }
    cells
}

pub fn sweep(config: &ExperimentConfig) -> Result<SweepOutcome, CliError> {
    config.validate()?;
    let sweep_dir = config.out_root().join(format!("sweep-{}", config.hash()));
    fs::create_dir_all(&sweep_dir)
        .map_err(|e| CliError::new(format!("cannot create {}: {e}", sweep_dir.display())))?;
    fs::write(
        sweep_dir.join("config.json"),
        serde_json::to_string_pretty(config).expect("config serializes"),
    )
    .map_err(|e| CliError::new(format!("cannot write config.json: {e}")))?;

    let cells = cell_grid(config);
    let results: Vec<Mutex<Option<Result<f64, String>>>> =
        cells.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = config.jobs.max(1).min(cells.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let cell = &cells[i];
                println!(
                    "cell {}/{}: {} size {} repeat {}",
                    i + 1,
                    cells.len(),
                    cell.trainer,
                    cell.size,
                    cell.repeat
                );
                let outcome = train_run_with(&cell.config, false)
                    .map(|o| o.final_accuracy)
                    .map_err(|e| format!("{e}"));
                *results[i].lock().unwrap() = Some(outcome);
            });
        }
    });

    let mut summary = String::from("trainer,size,repeat,seed,final_acc\n");
    let mut failures = 0usize;
    let mut by_group: Vec<((String, usize), Vec<f64>)> = Vec::new();
    for (cell, result) in cells.iter().zip(&results) {
        let result = result.lock().unwrap().take().expect("cell ran");
        let acc_text = match &result {
            Ok(acc) => format!("{acc}"),
            Err(e) => {
                failures += 1;
                eprintln!(
                    "cell failed: {} size {} repeat {}: {e}",
                    cell.trainer, cell.size, cell.repeat
                );
                String::new()
            }
        };
        summary.push_str(&format!(
            "{},{},{},{},{acc_text}\n",
            cell.trainer, cell.size, cell.repeat, cell.config.seed
        ));
        if let Ok(acc) = result {
            let key = (cell.trainer.clone(), cell.size);
            match by_group.iter_mut().find(|(k, _)| *k == key) {
                Some((_, accs)) => accs.push(acc),
                None => by_group.push((key, vec![acc])),
            }
        }
    }
    fs::write(sweep_dir.join("summary.csv"), &summary)
        .map_err(|e| CliError::new(format!("cannot write summary.csv: {e}")))?;

    let mut aggregate = String::from("trainer,size,mean_acc,std_acc,repeats\n");
    for ((trainer, size), accs) in &by_group {
        let (mean, std) = mean_std(accs);
        aggregate.push_str(&format!("{trainer},{size},{mean},{std},{}\n", accs.len()));
    }
    fs::write(sweep_dir.join("aggregate.csv"), &aggregate)
        .map_err(|e| CliError::new(format!("cannot write aggregate.csv: {e}")))?;

    print_table(config, &by_group);
    Ok(SweepOutcome {
        sweep_dir,
        failures,
    })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn print_table(config: &ExperimentConfig, by_group: &[((String, usize), Vec<f64>)]) {
    print!("{:>12}", "trainer");
    for size in &config.train_sizes {
        print!("  {size:>15}");
    }
    println!();
    for trainer in &config.trainers {
        print!("{trainer:>12}");
        for size in &config.train_sizes {
            let cell = by_group
                .iter()
                .find(|((t, s), _)| t == trainer && s == size)
                .map(|(_, accs)| {
                    let (mean, std) = mean_std(accs);
                    format!("{:.4} +- {:.4}", mean, std)
                })
                .unwrap_or_else(|| "-".into());
            print!("  {cell:>15}");
        }
        println!();
    }
}
