use std::path::{Path, PathBuf};

use gtpc_core::data::{
    ingest, make_split_with_holdout, patch_dataset, read_index_lists, synth_generate, write_dataset, Dataset, SplitManifest,
};
use gtpc_core::engine::{evaluate, load_checkpoint, train, ExperimentConfig, Metrics, Precision, TrainData, TrainOptions, Variant};
use gtpc_core::model::ImagePair;
use gtpc_core::report::{binarize, line_plot, pct, render_error_map, run_dir_name, save_png, RunRecord, Series, Table};
use gtpc_core::{Error, Result, Scalar};

use crate::{Cli, Command, DataArgs, RunArgs};

pub fn run(cli: &Cli) -> Result<()> {
    if cli.deterministic {
        log::info!("deterministic mode: single-threaded execution");
    }
    match &cli.command {
        Command::Split { data, ratio, val, test, out } => cmd_split(cli, data, *ratio, *val, *test, out.as_deref()),
        Command::Synth { count, size, out } => cmd_synth(cli, *count, *size, out),
        Command::Train { run, variant } => {
            let mut cfg = resolve_config(cli, run)?;
            if let Some(v) = variant {
                cfg = cfg.with_variant(Variant::parse(v)?);
                cfg.validate()?;
            }
            let (ds, manifest) = load_run_data(run)?;
            let rec = train_run(cli, &cfg, &ds, &manifest, &run.manifest)?;
            println!("{}", summary_line(&rec));
            Ok(())
        }
        Command::Eval { checkpoint, data, manifest, split } => {
            let ds = load_dataset(data)?;
            let samples = select_split(&ds, manifest.as_deref(), split)?;
            let (net, cfg) = load_checkpoint::<f64>(checkpoint)?;
            let m = evaluate(&net, &samples, cfg.train.eval_batch)?;
            println!(
                "split {split} samples {} IoU {:.4} OA {:.4} (tp {} tn {} fp {} fn {})",
                samples.len(),
                m.iou,
                m.oa,
                m.confusion.tp,
                m.confusion.tn,
                m.confusion.fp,
                m.confusion.fn_
            );
            Ok(())
        }
        Command::Ablate { run, variants } => cmd_ablate(cli, run, variants),
        Command::GateSweep { run, quantiles } => cmd_gate_sweep(cli, run, quantiles),
        Command::Render { checkpoint, data, manifest, split, out, limit } => {
            cmd_render(checkpoint, data, manifest.as_deref(), split, out, *limit)
        }
    }
}

fn seed(cli: &Cli) -> u64 {
    cli.seed.unwrap_or(0)
}

fn load_dataset(args: &DataArgs) -> Result<Dataset> {
    let ingested = ingest(&args.data)?;
    for r in &ingested.rejects {
        log::warn!("skipped {}: {}", r.file.display(), r.reason);
    }
    let ds = match args.patch {
        Some(p) => patch_dataset(&ingested.dataset, p)?,
        None => ingested.dataset,
    };
    if ds.is_empty() {
        return Err(Error::Empty(format!("dataset {}", args.data.display())));
    }
    Ok(ds)
}

fn load_run_data(run: &RunArgs) -> Result<(Dataset, SplitManifest)> {
    let ds = load_dataset(&run.data)?;
    let manifest = SplitManifest::load(&run.manifest)?;
    Ok((ds, manifest))
}

/// Configuration file (or defaults), then command-line overrides.
fn resolve_config(cli: &Cli, run: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(e) = run.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = run.steps_per_epoch {
        cfg.train.steps_per_epoch = Some(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn select_split(ds: &Dataset, manifest: Option<&Path>, split: &str) -> Result<Vec<ImagePair>> {
    if split == "all" {
        return Ok(ds.samples.clone());
    }
    let Some(path) = manifest else {
        return Err(Error::InvalidArgument(format!("--split {split} needs --manifest")));
    };
    let m = SplitManifest::load(path)?;
    let ids = match split {
        "test" => &m.test_ids,
        "val" => &m.val_ids,
        "labeled" => &m.labeled_ids,
        "unlabeled" => &m.unlabeled_ids,
        other => return Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
    };
    if ids.is_empty() {
        return Err(Error::Empty(format!("{split} split of {}", path.display())));
    }
    ds.select(ids)
}

fn cmd_split(cli: &Cli, data: &DataArgs, ratio: f64, val: f64, test: f64, out: Option<&Path>) -> Result<()> {
    let manifest = match read_index_lists(&data.data)? {
        Some(lists) => lists.into_manifest(ratio, seed(cli))?,
        None => make_split_with_holdout(&load_dataset(data)?.ids(), ratio, val, test, seed(cli))?,
    };
    let path = out.map_or_else(|| cli.out_dir.join("split.toml"), Path::to_path_buf);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    manifest.save(&path)?;
    println!(
        "wrote {} (labeled {}, unlabeled {}, val {}, test {})",
        path.display(),
        manifest.labeled_ids.len(),
        manifest.unlabeled_ids.len(),
        manifest.val_ids.len(),
        manifest.test_ids.len()
    );
    Ok(())
}

fn cmd_synth(cli: &Cli, count: usize, size: usize, out: &Path) -> Result<()> {
    if count == 0 {
        return Err(Error::InvalidArgument("--count must be positive".into()));
    }
    let ds = synth_generate(count, size, seed(cli))?;
    write_dataset(&ds, out)?;
    println!("wrote {count} pairs of {size}x{size} to {}", out.display());
    Ok(())
}

/// Trains, evaluates the best checkpoint on the test ids and writes
/// `run.json` next to the other run artifacts.
pub fn train_run(cli: &Cli, cfg: &ExperimentConfig, ds: &Dataset, manifest: &SplitManifest, manifest_path: &Path) -> Result<RunRecord> {
    let data = TrainData::from_manifest(ds, manifest)?;
    let test = if manifest.test_ids.is_empty() { Vec::new() } else { ds.select(&manifest.test_ids)? };
    let dir = cli.out_dir.join(run_dir_name(cfg));
    log::info!("run {} ({} labeled, {} unlabeled) -> {}", cfg.variant, data.labeled.len(), data.unlabeled.len(), dir.display());
    let (best_epoch, best_val, final_val, test_metrics) = match cfg.model.precision {
        Precision::F32 => train_typed::<f32>(cfg, &data, &test, &dir)?,
        Precision::F64 => train_typed::<f64>(cfg, &data, &test, &dir)?,
    };
    let rec = RunRecord {
        config_hash: cfg.hash(),
        variant: cfg.variant.to_string(),
        seed: cfg.seed,
        manifest: Some(manifest_path.to_path_buf()),
        best_epoch,
        best_val,
        final_val,
        test: test_metrics,
        history: dir.join("history.jsonl"),
        checkpoint: dir.join("best.safetensors"),
    };
    rec.save(&dir.join("run.json"))?;
    Ok(rec)
}

type TypedOutcome = (usize, Option<Metrics>, Option<Metrics>, Option<Metrics>);

fn train_typed<T: Scalar>(cfg: &ExperimentConfig, data: &TrainData, test: &[ImagePair], dir: &Path) -> Result<TypedOutcome> {
    let out = train::<T>(cfg, data, &TrainOptions { out_dir: Some(dir.to_path_buf()) })?;
    let final_val = out.history.epochs().filter_map(|e| e.val).last();
    let test_metrics = if test.is_empty() { None } else { Some(evaluate(&out.best, test, cfg.train.eval_batch)?) };
    Ok((out.best_epoch, out.best_val, final_val, test_metrics))
}

/// Test metrics when a test split exists, else the best validation ones.
fn headline(rec: &RunRecord) -> Option<Metrics> {
    rec.test.or(rec.best_val)
}

fn summary_line(rec: &RunRecord) -> String {
    let m = headline(rec);
    format!(
        "{} seed {}: IoU {} OA {} (best epoch {}) -> {}",
        rec.variant,
        rec.seed,
        pct(m.map(|m| m.iou)),
        pct(m.map(|m| m.oa)),
        rec.best_epoch,
        rec.checkpoint.parent().map_or(PathBuf::new(), Path::to_path_buf).display()
    )
}

fn cmd_ablate(cli: &Cli, run: &RunArgs, variants: &[String]) -> Result<()> {
    let base = resolve_config(cli, run)?;
    let variants: Vec<Variant> =
        if variants.is_empty() { Variant::ALL.to_vec() } else { variants.iter().map(|v| Variant::parse(v)).collect::<Result<_>>()? };
    let (ds, manifest) = load_run_data(run)?;
    let mut table = Table::new(&["variant", "IoU", "OA", "status"]);
    let mut failures = 0;
    for v in variants {
        let cfg = base.with_variant(v);
        let row = match cfg.validate().and_then(|_| train_run(cli, &cfg, &ds, &manifest, &run.manifest)) {
            Ok(rec) => {
                let m = headline(&rec);
                vec![v.to_string(), pct(m.map(|m| m.iou)), pct(m.map(|m| m.oa)), "ok".into()]
            }
            Err(e) => {
                log::error!("variant {v} failed: {e}");
                failures += 1;
                vec![v.to_string(), "-".into(), "-".into(), format!("failed: {e}")]
            }
        };
        table.push(row)?;
    }
    table.save(&cli.out_dir, "ablation")?;
    print!("{}", table.to_text());
    if failures == table.rows.len() {
        return Err(Error::InvalidArgument("every variant failed".into()));
    }
    Ok(())
}

fn cmd_gate_sweep(cli: &Cli, run: &RunArgs, quantiles: &[f64]) -> Result<()> {
    if quantiles.is_empty() {
        return Err(Error::InvalidArgument("no quantiles given".into()));
    }
    let base = resolve_config(cli, run)?.with_variant(Variant::Gtpc);
    let (ds, manifest) = load_run_data(run)?;
    let mut table = Table::new(&["quantile", "IoU", "OA", "default", "status"]);
    let mut points = Vec::new();
    let mut highlight = None;
    for &q in quantiles {
        let mut cfg = base.clone();
        cfg.gate.quantile = q;
        let is_default = q == 0.5;
        if is_default {
            highlight = Some(points.len());
        }
        let flag = if is_default { "*" } else { "" }.to_string();
        match cfg.validate().and_then(|_| train_run(cli, &cfg, &ds, &manifest, &run.manifest)) {
            Ok(rec) => {
                let m = headline(&rec);
                points.push((q, m.map_or(f64::NAN, |m| 100.0 * m.iou)));
                table.push(vec![format!("{q}"), pct(m.map(|m| m.iou)), pct(m.map(|m| m.oa)), flag, "ok".into()])?;
            }
            Err(e) => {
                log::error!("quantile {q} failed: {e}");
                points.push((q, f64::NAN));
                table.push(vec![format!("{q}"), "-".into(), "-".into(), flag, format!("failed: {e}")])?;
            }
        }
    }
    table.save(&cli.out_dir, "gate_sweep")?;
    print!("{}", table.to_text());
    let plot_path = cli.out_dir.join("gate_sweep.png");
    match line_plot(&[Series { points, color: [30, 80, 200], highlight }], 480, 320) {
        Ok(img) => save_png(&img, &plot_path)?,
        Err(Error::Empty(_)) => return Err(Error::InvalidArgument("every quantile failed".into())),
        Err(e) => return Err(e),
    }
    println!("plot: {}", plot_path.display());
    Ok(())
}

fn cmd_render(checkpoint: &Path, data: &DataArgs, manifest: Option<&Path>, split: &str, out: &Path, limit: Option<usize>) -> Result<()> {
    let ds = load_dataset(data)?;
    let mut samples = select_split(&ds, manifest, split)?;
    samples.retain(|s| s.label.is_some());
    if let Some(n) = limit {
        samples.truncate(n);
    }
    if samples.is_empty() {
        return Err(Error::Empty("labeled samples to render".into()));
    }
    let (net, cfg) = load_checkpoint::<f64>(checkpoint)?;
    std::fs::create_dir_all(out)?;
    for chunk in samples.chunks(cfg.train.eval_batch) {
        let probs = net.predict_pairs(chunk, chunk.len())?;
        for (s, p) in chunk.iter().zip(&probs) {
            let label = s.label.as_ref().expect("filtered to labeled samples");
            save_png(&render_error_map(&binarize(p)?, label)?, &out.join(format!("{}.png", s.id)))?;
        }
    }
    println!("wrote {} error maps to {}", samples.len(), out.display());
    Ok(())
}
