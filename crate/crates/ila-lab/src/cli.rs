//! The four experiment commands behind one binary: train, lr-search,
//! eval, analyze. All outputs are deterministic in (config, seeds), so a
//! rerun rewrites identical bytes.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use ila_core::analysis;
use ila_core::model::{ForwardOptions, Model};
use ila_core::rng::Rng;

use crate::checkpoint;
use crate::config::{rsds_name, variant_name, ExperimentConfig};
use crate::data::{self, Sample};
use crate::report::{self, AccuracyRow};
use crate::train::{self, TrainConfig};
use crate::{LabError, Result};

#[derive(Debug, Parser)]
#[command(name = "ila-lab", about = "Adapter fine-tuning experiment harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fine-tune one model per seed and write reports, checkpoints, and
    /// accuracy tables.
    Train(CommonArgs),
    /// Grid-search the learning rate on a held-out slice of train data.
    LrSearch(CommonArgs),
    /// Evaluate a checkpoint on the eval split.
    Eval(EvalArgs),
    /// Emit cost (params, FLOPs) and attention-similarity reports.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated seed list overriding the config.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Max concurrent runs; capped by ILA_LAB_THREADS.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Output directory overriding the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Adapter variant override.
    #[arg(long)]
    pub variant: Option<String>,
    /// Residual-branch mode override.
    #[arg(long)]
    pub rsds: Option<String>,
    /// Input side override; also adjusts the training crop.
    #[arg(long)]
    pub image_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint directory (full, or a backbone to compose onto).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Optional adapter-only checkpoint overlaid on `--checkpoint`.
    #[arg(long)]
    pub adapter: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Optional trained checkpoint; defaults to seeded initialization.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Probe images for the attention-similarity matrix.
    #[arg(long, default_value_t = 64)]
    pub probe: usize,
}

fn effective_jobs(requested: usize) -> usize {
    let cap = std::env::var("ILA_LAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(usize::MAX);
    requested.clamp(1, cap.max(1))
}

fn load_config(args: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if !args.seeds.is_empty() {
        cfg.seeds = args.seeds.clone();
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(v) = &args.variant {
        cfg.adapter.variant = v.clone();
    }
    if let Some(r) = &args.rsds {
        cfg.adapter.rsds = r.clone();
    }
    if let Some(side) = args.image_size {
        let scale = side as f64 / cfg.model.image_size as f64;
        cfg.model.image_size = side;
        cfg.training.crop = side;
        cfg.training.resize_to =
            ((cfg.training.resize_to as f64 * scale).round() as usize).max(side);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Deterministic stratified split of a directory dataset.
fn split_dir_dataset(samples: Vec<Sample>, eval_fraction: f64, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let mut byclass: std::collections::BTreeMap<usize, Vec<Sample>> = Default::default();
    for s in samples {
        byclass.entry(s.label).or_default().push(s);
    }
    let mut rng = Rng::derive(seed, "dir-eval-split");
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (_, mut group) in byclass {
        rng.shuffle(&mut group);
        let n_eval = ((group.len() as f64 * eval_fraction).round() as usize).min(group.len());
        for (i, s) in group.into_iter().enumerate() {
            if i < n_eval {
                eval.push(s);
            } else {
                train.push(s);
            }
        }
    }
    (train, eval)
}

fn load_data(cfg: &ExperimentConfig) -> Result<(Vec<Sample>, Vec<Sample>, String)> {
    if let Some(spec) = &cfg.data.synthetic {
        let (train, test) = data::generate_synthetic(spec)?;
        Ok((train, test, "synthetic".into()))
    } else {
        let path = cfg.data.path.as_ref().unwrap();
        let (samples, _) = data::load_image_dir(path)?;
        if samples.is_empty() {
            return Err(LabError::Config(format!("{} holds no images", path.display())));
        }
        let n_classes = samples.iter().map(|s| s.label).max().unwrap() + 1;
        if n_classes != cfg.model.num_classes {
            return Err(LabError::Config(format!(
                "dataset has {n_classes} classes, model expects {}",
                cfg.model.num_classes
            )));
        }
        let (train, eval) = split_dir_dataset(samples, cfg.data.eval_fraction, 0);
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into());
        Ok((train, eval, name))
    }
}

fn build_model(cfg: &ExperimentConfig, seed: u64) -> Result<Model> {
    Model::build(cfg.vit_config(), cfg.ila_config()?, seed).map_err(LabError::from)
}

/// Run `f(seed)` for every seed, at most `jobs` at a time; results come
/// back in seed order regardless of completion order.
fn per_seed<T: Send>(seeds: &[u64], jobs: usize, f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    let jobs = effective_jobs(jobs);
    let f = &f;
    let mut out = Vec::with_capacity(seeds.len());
    for chunk in seeds.chunks(jobs) {
        let results: Vec<Result<T>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&seed| scope.spawn(move || f(seed)))
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

pub fn cmd_train(args: &CommonArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let (train_split, eval_split, dataset) = load_data(&cfg)?;
    cfg.training.validate(train_split.len())?;
    let reports = per_seed(&cfg.seeds, args.jobs, |seed| {
        let mut model = build_model(&cfg, seed)?;
        let run_cfg = TrainConfig {
            seed,
            ..cfg.training.clone()
        };
        let report = train::train_model(&mut model, &train_split, &eval_split, &run_cfg)?;
        Ok((model, report))
    })?;
    let mut rows = Vec::new();
    for (seed, (model, report)) in cfg.seeds.iter().zip(&reports) {
        let ckpt = cfg.out_dir.join(format!("checkpoint-seed{seed}"));
        checkpoint::save_full(&ckpt.join("full"), &model.store)?;
        checkpoint::save_adapter(&ckpt.join("adapter"), &model.store)?;
        report::write_text(
            &cfg.out_dir.join(format!("report-seed{seed}.json")),
            &serde_json::to_string_pretty(report)?,
        )?;
        rows.push(AccuracyRow {
            variant: variant_name(cfg.ila_config()?.variant).into(),
            rsds: rsds_name(cfg.ila_config()?.rsds_mode).into(),
            dataset: dataset.clone(),
            seed: *seed,
            lr: cfg.training.base_lr,
            accuracy: report.final_acc,
        });
    }
    report::write_text(&cfg.out_dir.join("accuracy.csv"), &report::accuracy_csv(&rows))?;
    report::write_text(&cfg.out_dir.join("aggregate.csv"), &report::aggregate_csv(&rows))?;
    for row in &rows {
        println!("seed {} top-1 {:.2}%", row.seed, row.accuracy);
    }
    Ok(())
}

pub fn cmd_lr_search(args: &CommonArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let (train_split, _, _) = load_data(&cfg)?;
    let seed = cfg.seeds[0];
    let search_cfg = TrainConfig {
        seed,
        ..cfg.training.clone()
    };
    let factory = || build_model(&cfg, seed);
    let (chosen, outcomes) = train::lr_search(&factory, &train_split, &search_cfg)?;
    let mut table = String::from("lr,accuracy,status\n");
    for o in &outcomes {
        match o.accuracy {
            Some(a) => table.push_str(&format!("{},{},ok\n", o.lr, a)),
            None => table.push_str(&format!("{},,diverged\n", o.lr)),
        }
    }
    report::write_text(&cfg.out_dir.join("lr_search.csv"), &table)?;
    // derived config: identical to the input but for the chosen LR
    let mut derived = ExperimentConfig::load(&args.config)?;
    derived.training.base_lr = chosen;
    derived.save(&cfg.out_dir.join("config-chosen-lr.json"))?;
    println!("chosen lr {chosen}");
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let (_, eval_split, dataset) = load_data(&cfg)?;
    let mut model = build_model(&cfg, cfg.seeds[0])?;
    let loaded = checkpoint::load(&args.checkpoint)?;
    checkpoint::compose(&mut model.store, &loaded)?;
    if let Some(adapter) = &args.adapter {
        let overlay = checkpoint::load(adapter)?;
        checkpoint::compose(&mut model.store, &overlay)?;
    }
    let acc = train::evaluate_top1(&model, &eval_split, &cfg.training)?;
    let rows = vec![AccuracyRow {
        variant: variant_name(cfg.ila_config()?.variant).into(),
        rsds: rsds_name(cfg.ila_config()?.rsds_mode).into(),
        dataset,
        seed: cfg.seeds[0],
        lr: cfg.training.base_lr,
        accuracy: acc,
    }];
    report::write_text(&cfg.out_dir.join("eval.csv"), &report::accuracy_csv(&rows))?;
    println!("top-1 {acc:.2}%");
    Ok(())
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let mut model = build_model(&cfg, cfg.seeds[0])?;
    if let Some(ckpt) = &args.checkpoint {
        let loaded = checkpoint::load(ckpt)?;
        checkpoint::compose(&mut model.store, &loaded)?;
    }
    let cost = analysis::cost_report(&model).map_err(LabError::from)?;
    report::write_text(&cfg.out_dir.join("cost.json"), &report::cost_json(&cost)?)?;
    report::write_text(&cfg.out_dir.join("cost.csv"), &report::cost_csv(&cost))?;

    let (_, eval_split, _) = load_data(&cfg)?;
    let probe: Vec<&Sample> = eval_split.iter().take(args.probe.max(2)).collect();
    let mut rng = Rng::derive(0, "probe-noop");
    let (images, _) = data::batch_images(
        &probe,
        data::PreprocessMode::Eval,
        cfg.training.resize_to,
        cfg.training.crop,
        &mut rng,
    )?;
    let mut g = ila_core::graph::Graph::new();
    let out = model.forward(
        &mut g,
        &images,
        ForwardOptions {
            capture_attention: true,
            ..Default::default()
        },
    )?;
    let cka = analysis::attention_cka_matrix(&out.attention).map_err(LabError::from)?;
    report::write_text(&cfg.out_dir.join("cka.csv"), &report::cka_csv(&cka))?;
    println!(
        "params {} trainable {} flops {}",
        cost.params_total, cost.params_trainable, cost.flops
    );
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::LrSearch(a) => cmd_lr_search(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Analyze(a) => cmd_analyze(a),
    }
}
