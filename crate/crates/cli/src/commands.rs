//! Subcommand implementations.

use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::time::Instant;

use rankclip_core::data::{generate_dataset, load_dataset, save_dataset};
use rankclip_core::metrics::evaluate;
use rankclip_core::trainer::load_checkpoint;
use rankclip_core::{Ablation, EncoderParams, Error, LossBreakdown, MetricsReport, PairedDataset, Trainer};
use serde::Serialize;

use crate::config::{ConfigError, RunConfig};
use crate::verify;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn invalid(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_INVALID,
            message: message.into(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::invalid(e.to_string())
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Divergence { .. } | Error::Io(_) => EXIT_RUNTIME,
            _ => EXIT_INVALID,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError {
            code: EXIT_RUNTIME,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

pub const HISTORY_FILE: &str = "history.ndjson";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const SUMMARY_FILE: &str = "summary.json";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const COMPARE_CSV: &str = "compare.csv";
pub const WINS_CSV: &str = "wins.csv";

fn load_config(path: &Path, seed: Option<u64>) -> CliResult<RunConfig> {
    let cfg = RunConfig::load(path)?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

pub fn gen_data(config: &Path, out: &Path) -> CliResult {
    let cfg = load_config(config, None)?;
    let ds = generate_dataset(&cfg.dataset)?;
    save_dataset(&ds, out)?;
    println!(
        "wrote {}: {} pairs ({} train, {} eval), {} classes, image_dim {}, text_dim {}",
        out.display(),
        ds.len(),
        ds.indices(rankclip_core::Split::Train).len(),
        ds.indices(rankclip_core::Split::Eval).len(),
        ds.num_classes(),
        ds.image_dim(),
        ds.text_dim()
    );
    Ok(())
}

#[derive(Serialize)]
struct Summary {
    ablation: &'static str,
    seed: u64,
    epochs: usize,
    steps: u64,
    final_loss: LossBreakdown,
    final_temperature: f64,
    wall_time_s: f64,
}

struct Trained {
    params: EncoderParams,
    last: LossBreakdown,
    steps: u64,
    wall_s: f64,
}

fn train_model(cfg: &RunConfig, ds: &PairedDataset, out: Option<&Path>) -> CliResult<Trained> {
    let mut enc = cfg.encoder_config(cfg.seed);
    enc.image_input_dim = ds.image_dim();
    enc.text_input_dim = ds.text_dim();
    let params = EncoderParams::init(&enc)?;
    let mut train_cfg = cfg.train.clone();
    if let Some(dir) = out {
        train_cfg.history_path = Some(dir.join(HISTORY_FILE));
        train_cfg.checkpoint_path = Some(dir.join(CHECKPOINT_FILE));
    }
    let started = Instant::now();
    let mut trainer = Trainer::new(train_cfg, params)?;
    trainer.run(ds, None)?;
    let last = trainer
        .history
        .last()
        .map(|r| r.breakdown)
        .ok_or_else(|| CliError::invalid("no training steps"))?;
    if let Some(dir) = out {
        trainer.save(dir.join(CHECKPOINT_FILE))?;
    }
    Ok(Trained {
        params: trainer.params,
        last,
        steps: trainer.step,
        wall_s: started.elapsed().as_secs_f64(),
    })
}

pub fn train(config: &Path, data: &Path, out: &Path, seed: Option<u64>) -> CliResult {
    let cfg = load_config(config, seed)?;
    let ds = load_dataset(data)?;
    fs::create_dir_all(out)?;
    let trained = train_model(&cfg, &ds, Some(out))?;
    let last = trained.last;
    let summary = Summary {
        ablation: cfg.train.loss.ablation.as_str(),
        seed: cfg.seed,
        epochs: cfg.train.epochs,
        steps: trained.steps,
        final_loss: last,
        final_temperature: (-trained.params.log_inv_tau.item()?).exp(),
        wall_time_s: trained.wall_s,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(out.join(SUMMARY_FILE), json + "\n")?;
    println!(
        "trained {} epochs ({} steps) in {:.2} s; final total {:.6} (clip {:.6}, in {:.6}, cross {:.6})",
        summary.epochs, summary.steps, trained.wall_s, last.total, last.l_clip, last.l_in, last.l_cross
    );
    Ok(())
}

pub fn eval(config: Option<&Path>, checkpoint: &Path, data: &Path, out: &Path) -> CliResult {
    let eval_cfg = match config {
        Some(p) => load_config(p, None)?.eval,
        None => Default::default(),
    };
    let (params, _, _) = load_checkpoint(checkpoint)?;
    let ds = load_dataset(data)?;
    let report = evaluate(&params, &ds, &ds.class_texts, &eval_cfg)?;
    fs::create_dir_all(out)?;
    fs::write(out.join(METRICS_JSON), report.to_json() + "\n")?;
    fs::write(
        out.join(METRICS_CSV),
        format!("{}\n{}\n", report.csv_header(), report.csv_row()),
    )?;
    println!(
        "top1 {:.4}  i2t R@1 {:.4}  t2i R@1 {:.4}  gap {:.4}  spearman {:.4}  probe {:.4}",
        report.top_k_accuracy.values().next().copied().unwrap_or(f64::NAN),
        report.recall_image_to_text.values().next().copied().unwrap_or(f64::NAN),
        report.recall_text_to_image.values().next().copied().unwrap_or(f64::NAN),
        report.modality_gap,
        report.consistency_spearman,
        report.linear_probe_accuracy
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyMode {
    Gradcheck,
    Oracle,
    Schedule,
}

pub fn verify(mode: VerifyMode, config: Option<&Path>) -> CliResult {
    let report = match mode {
        VerifyMode::Gradcheck => verify::gradcheck_suite(10)?,
        VerifyMode::Oracle => verify::oracle_suite()?,
        VerifyMode::Schedule => {
            let n = match config {
                Some(p) => load_config(p, None)?.train.epochs,
                None => 64,
            };
            if n < 2 {
                return Err(CliError::invalid(format!("schedule needs at least 2 epochs, got {n}")));
            }
            let (report, table) = verify::schedule_suite(n)?;
            println!("epoch,lambda");
            for (i, l) in table {
                println!("{i},{l}");
            }
            report
        }
    };
    print!("{}", report.render());
    if report.passed() {
        Ok(())
    } else {
        Err(CliError {
            code: EXIT_VERIFY,
            message: "verification failed".into(),
        })
    }
}

struct Cell {
    variant: Ablation,
    seed: u64,
    last: LossBreakdown,
    metrics: MetricsReport,
}

fn worker_count(cells: usize) -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    let cap = std::env::var("RANKCLIP_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(available);
    cap.min(cells).max(1)
}

/// Metrics where a lower value is better.
const LOWER_IS_BETTER: [&str; 3] = ["uniformity", "modality_gap", "pair_gap_mean"];

pub fn compare(config: &Path, data: Option<&Path>, out: &Path, seed: Option<u64>) -> CliResult {
    let mut cfg = load_config(config, None)?;
    if let Some(s) = seed {
        cfg.compare.seeds = vec![s];
    }
    let ds = match data {
        Some(p) => load_dataset(p)?,
        None => generate_dataset(&cfg.dataset)?,
    };
    let jobs: Vec<(Ablation, u64)> = cfg
        .compare
        .variants
        .iter()
        .flat_map(|&v| cfg.compare.seeds.iter().map(move |&s| (v, s)))
        .collect();

    let results: Mutex<Vec<Option<CliResult<Cell>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = Mutex::new(0usize);
    let started = Instant::now();
    std::thread::scope(|scope| {
        for _ in 0..worker_count(jobs.len()) {
            scope.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("job counter");
                    let i = *n;
                    *n += 1;
                    i
                };
                let Some(&(variant, seed)) = jobs.get(i) else { break };
                let mut run = cfg.clone().with_seed(seed);
                run.train.loss.ablation = variant;
                let cell = train_model(&run, &ds, None).and_then(|t| {
                    let metrics = evaluate(&t.params, &ds, &ds.class_texts, &run.eval)?;
                    Ok(Cell {
                        variant,
                        seed,
                        last: t.last,
                        metrics,
                    })
                });
                results.lock().expect("results")[i] = Some(cell);
            });
        }
    });
    let cells: Vec<Cell> = results
        .into_inner()
        .expect("results")
        .into_iter()
        .map(|c| c.expect("every job ran"))
        .collect::<CliResult<_>>()?;

    fs::create_dir_all(out)?;
    let mut csv = format!(
        "variant,seed,l_clip,l_in,l_cross,total,{}\n",
        cells[0].metrics.csv_header()
    );
    for c in &cells {
        csv += &format!(
            "{},{},{},{},{},{},{}\n",
            c.variant.as_str(),
            c.seed,
            c.last.l_clip,
            c.last.l_in,
            c.last.l_cross,
            c.last.total,
            c.metrics.csv_row()
        );
    }
    fs::write(out.join(COMPARE_CSV), &csv)?;

    let find = |v: Ablation, s: u64| cells.iter().find(|c| c.variant == v && c.seed == s);
    let paired: Vec<(&Cell, &Cell)> = cfg
        .compare
        .seeds
        .iter()
        .filter_map(|&s| Some((find(Ablation::Full, s)?, find(Ablation::ClipOnly, s)?)))
        .collect();
    if !paired.is_empty() {
        let header: Vec<String> = paired[0].0.metrics.csv_header().split(',').map(String::from).collect();
        let mut wins = String::from("metric,full_wins,clip_only_wins,ties\n");
        for (col, name) in header.iter().enumerate().filter(|(_, n)| n.as_str() != "n") {
            let (mut full, mut clip, mut ties) = (0, 0, 0);
            for (f, c) in &paired {
                let fv: f64 = f
                    .metrics
                    .csv_row()
                    .split(',')
                    .nth(col)
                    .and_then(|v| v.parse().ok())
                    .unwrap_or(f64::NAN);
                let cv: f64 = c
                    .metrics
                    .csv_row()
                    .split(',')
                    .nth(col)
                    .and_then(|v| v.parse().ok())
                    .unwrap_or(f64::NAN);
                let sign = if LOWER_IS_BETTER.contains(&name.as_str()) {
                    -1.0
                } else {
                    1.0
                };
                match (sign * (fv - cv)).partial_cmp(&0.0) {
                    Some(std::cmp::Ordering::Greater) => full += 1,
                    Some(std::cmp::Ordering::Less) => clip += 1,
                    _ => ties += 1,
                }
            }
            wins += &format!("{name},{full},{clip},{ties}\n");
        }
        fs::write(out.join(WINS_CSV), &wins)?;
        print!("{wins}");
    }
    println!("{} runs in {:.1} s", cells.len(), started.elapsed().as_secs_f64());
    Ok(())
}
