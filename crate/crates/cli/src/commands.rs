use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use tagunet::evaluation::{evaluate_dataset, write_evaluation, EvalOptions, EvalReport};
use tagunet::hierarchy::{HierarchyCache, DEFAULT_KNN};
use tagunet::meshgraph::{DatasetManifest, ManifestEntry, Split};
use tagunet::model::{count_params, prepare, ConvKind, Model, ModelConfig, ModelKind, PreparedGraph};
use tagunet::synthgen::{gen_dataset, SynthSpec};
use tagunet::training::{train, TrainConfig, TrainOptions, FINAL_CHECKPOINT};

use crate::args::*;
use crate::UsageError;

pub const CACHE_ENV: &str = "TAGUNET_CACHE_DIR";

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn write_resolved(out: &Path, value: &impl Serialize) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join("resolved_config.json");
    tagunet::jsonfmt::write_json_pretty(&path, value)?;
    Ok(())
}

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    DatasetManifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn cache_for(manifest: &DatasetManifest) -> HierarchyCache {
    match std::env::var_os(CACHE_ENV) {
        Some(dir) if !dir.is_empty() => HierarchyCache::new(PathBuf::from(dir)),
        _ => HierarchyCache::new(manifest.root.join(".cache").join("hierarchies")),
    }
}

fn splits_of(split: SplitArg) -> Vec<Split> {
    match split {
        SplitArg::Train => vec![Split::Train],
        SplitArg::Test => vec![Split::Test],
        SplitArg::All => vec![Split::Train, Split::Test],
    }
}

fn run_jobs<T: Send, F>(jobs: usize, n: usize, f: F) -> Result<Vec<T>>
where
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    let results: Vec<Result<T>> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
        pool.install(|| (0..n).into_par_iter().map(&f).collect())
    } else {
        (0..n).map(&f).collect()
    };
    results.into_iter().collect()
}

fn read_run_config(path: Option<&Path>) -> Result<Option<RunConfig>> {
    let Some(path) = path else { return Ok(None) };
    let bytes = fs::read(path).with_context(|| format!("reading config {}", path.display()))?;
    let cfg = serde_json::from_slice(&bytes)
        .map_err(|e| usage(format!("invalid config file {}: {e}", path.display())))?;
    Ok(Some(cfg))
}

/// Narrow widths used for desk-scale experiments.
pub fn small_preset(dim: usize) -> ModelConfig {
    let mut c = ModelConfig::uniform(
        ModelKind::TagUnet,
        ConvKind::EdgeConv,
        dim,
        3,
        &[32, 32],
        32,
        &[64, 64, 64],
        &[],
    );
    c.knn_k = DEFAULT_KNN;
    c
}

pub fn resolve_model(opts: &ModelOpts, manifest: &DatasetManifest) -> Result<ModelConfig> {
    let mut cfg = match (opts.preset.unwrap_or(Preset::Reference), manifest.dim) {
        (Preset::Reference, 2) => ModelConfig::reference_2d(),
        (Preset::Reference, 3) => ModelConfig::reference_3d(),
        (Preset::Small, d) if d == 2 || d == 3 => small_preset(d),
        (_, d) => bail!("unsupported dataset dim {d}"),
    };
    let (kind, conv) = match opts.model.unwrap_or(ModelName::EdgeconvUnet) {
        ModelName::EdgeconvUnet => (ModelKind::TagUnet, ConvKind::EdgeConv),
        ModelName::GcnconvUnet => (ModelKind::TagUnet, ConvKind::GcnConv),
        ModelName::PlainGnn => (ModelKind::PlainGnn, ConvKind::EdgeConv),
    };
    cfg.kind = kind;
    cfg.conv = conv;
    cfg.dim = manifest.dim;
    cfg.feature_names = manifest.feature_names.clone();
    let depth = opts.depth.unwrap_or(cfg.depth);
    let channels = opts.channels.unwrap_or(cfg.encoder_channels[0]);
    cfg.depth = depth;
    cfg.encoder_channels = vec![channels; depth + 1];
    cfg.decoder_channels = vec![channels; depth];
    if let Some(h) = &opts.conv_hidden {
        cfg.conv_hidden = h.clone();
    }
    if let Some(h) = &opts.output_hidden {
        cfg.output_hidden = h.clone();
    }
    if opts.lift_width.is_some() {
        cfg.lift_width = opts.lift_width;
    }
    if let Some(c) = opts.cluster_size {
        cfg.cluster_size = c;
    }
    if let Some(k) = opts.knn {
        cfg.knn_k = k;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

pub fn resolve_train(opts: &TrainOpts) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        lr: opts.lr.unwrap_or(d.lr),
        epochs: opts.epochs.unwrap_or(d.epochs),
        batch_size: opts.batch.unwrap_or(d.batch_size),
        seed: opts.seed.unwrap_or(d.seed),
        checkpoint_every: opts.checkpoint_every,
        clip_norm: opts.clip_norm,
        standardize: !opts.no_standardize.unwrap_or(false),
        ..d
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn prepare_entries(
    manifest: &DatasetManifest,
    entries: &[&ManifestEntry],
    config: &ModelConfig,
    cache: &HierarchyCache,
    jobs: usize,
) -> Result<Vec<PreparedGraph>> {
    run_jobs(jobs, entries.len(), |i| {
        let g = manifest.load_entry(entries[i])?;
        Ok(prepare(&g, config, Some(cache))?)
    })
}

pub fn synth(args: &SynthArgs, jobs: usize) -> Result<()> {
    let bytes = fs::read(&args.spec).with_context(|| format!("reading spec {}", args.spec.display()))?;
    let spec: SynthSpec =
        serde_json::from_slice(&bytes).map_err(|e| usage(format!("invalid synth spec: {e}")))?;
    spec.validate().map_err(|e| usage(e.to_string()))?;
    write_resolved(&args.out, &json!({ "command": "synth", "spec": spec }))?;
    let manifest = gen_dataset(&spec, &args.out, jobs)?;
    println!(
        "wrote {} shapes ({} train, {} test) to {}",
        manifest.entries.len(),
        manifest.entries(Split::Train).count(),
        manifest.entries(Split::Test).count(),
        args.out.display()
    );
    Ok(())
}

pub fn hierarchy(args: &HierarchyArgs, jobs: usize) -> Result<()> {
    let manifest = load_manifest(&args.data)?;
    let c = args
        .cluster_size
        .unwrap_or_else(|| tagunet::hierarchy::default_cluster_size(manifest.dim));
    let cache = cache_for(&manifest);
    if let Some(out) = &args.out {
        write_resolved(
            out,
            &json!({"command": "hierarchy", "data": args.data, "depth": args.depth, "cluster_size": c, "knn": args.knn}),
        )?;
    }
    let entries: Vec<&ManifestEntry> = match &args.inspect {
        Some(name) => {
            let e = manifest
                .entries
                .iter()
                .find(|e| &e.name == name)
                .ok_or_else(|| usage(format!("no shape named {name:?} in the manifest")))?;
            vec![e]
        }
        None => manifest.entries.iter().collect(),
    };
    let sizes = run_jobs(jobs, entries.len(), |i| {
        let g = manifest.load_entry(entries[i])?;
        let h = cache.get_or_build(&g, args.depth, c, args.knn)?;
        Ok(json!({ "name": g.name, "depth": h.depth, "level_sizes": h.level_sizes() }))
    })?;
    if args.inspect.is_some() {
        println!("{}", serde_json::to_string_pretty(&sizes[0])?);
    } else {
        println!("cached {} hierarchies under {}", sizes.len(), cache.root().display());
    }
    if let Some(out) = &args.out {
        tagunet::jsonfmt::write_json_pretty(&out.join("hierarchies.json"), &sizes)?;
    }
    Ok(())
}

struct TrainedRun {
    model: Model,
    config: ModelConfig,
}

fn train_one(
    manifest: &DatasetManifest,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    out: &Path,
    jobs: usize,
) -> Result<TrainedRun> {
    let cache = cache_for(manifest);
    let entries: Vec<&ManifestEntry> = manifest.entries(Split::Train).collect();
    if entries.is_empty() {
        bail!("the manifest has no train split");
    }
    let samples = prepare_entries(manifest, &entries, model_cfg, &cache, jobs)?;
    log::info!(
        "training {} parameters on {} shapes",
        count_params(model_cfg),
        samples.len()
    );
    let outcome = train(
        model_cfg,
        train_cfg,
        &samples,
        &TrainOptions {
            out_dir: Some(out.to_path_buf()),
        },
    )?;
    Ok(TrainedRun {
        model: outcome.model,
        config: model_cfg.clone(),
    })
}

pub fn train_cmd(args: &TrainArgs, jobs: usize) -> Result<()> {
    let file = read_run_config(args.config.as_deref())?;
    let run = RunConfig::merge(
        RunConfig {
            model: args.model.clone(),
            train: args.train.clone(),
        },
        file,
    );
    let manifest = load_manifest(&args.data)?;
    let model_cfg = resolve_model(&run.model, &manifest)?;
    let train_cfg = resolve_train(&run.train)?;
    write_resolved(
        &args.out,
        &json!({"command": "train", "data": args.data, "options": run, "model": model_cfg, "train": train_cfg}),
    )?;
    let trained = train_one(&manifest, &model_cfg, &train_cfg, &args.out, jobs)?;
    println!(
        "trained {} ({} parameters); checkpoint {}",
        args.out.display(),
        trained.model.num_params(),
        args.out.join(FINAL_CHECKPOINT).display()
    );
    Ok(())
}

fn load_model_for(ckpt: &Path, manifest: &DatasetManifest) -> Result<Model> {
    let model =
        Model::load_checkpoint(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    if model.config.dim != manifest.dim {
        bail!(
            "checkpoint is {}-D but the dataset is {}-D",
            model.config.dim,
            manifest.dim
        );
    }
    Ok(model)
}

pub fn predict(args: &PredictArgs, jobs: usize) -> Result<()> {
    let manifest = load_manifest(&args.data)?;
    let model = load_model_for(&args.ckpt, &manifest)?;
    write_resolved(
        &args.out,
        &json!({"command": "predict", "data": args.data, "ckpt": args.ckpt, "split": args.split}),
    )?;
    let splits = splits_of(args.split);
    let entries: Vec<&ManifestEntry> = manifest.entries.iter().filter(|e| splits.contains(&e.split)).collect();
    let cache = cache_for(&manifest);
    let axes = ["x", "y", "z"];
    run_jobs(jobs, entries.len(), |i| {
        let g = manifest.load_entry(entries[i])?;
        let input = prepare(&g, &model.config, Some(&cache))?;
        let pred = model.predict::<f32>(&input)?;
        let mut csv = String::from("node_id");
        for a in &axes[..g.dim] {
            csv.push(',');
            csv.push_str(a);
        }
        csv.push_str(",prediction\n");
        for (n, p) in pred.iter().enumerate() {
            let _ = write!(csv, "{n}");
            for x in g.coord(n) {
                let _ = write!(csv, ",{x:.17e}");
            }
            let _ = writeln!(csv, ",{p:.17e}");
        }
        let path = args.out.join(format!("{}.csv", g.name));
        fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    })?;
    println!("wrote predictions for {} shapes to {}", entries.len(), args.out.display());
    Ok(())
}

fn print_report(report: &EvalReport) {
    for s in &report.summaries {
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
        let mut line = format!(
            "{}: {} shapes, median R² {}, mean R² {}",
            s.split,
            s.num_shapes,
            fmt(s.median_r2),
            fmt(s.mean_r2)
        );
        if s.median_accuracy.is_some() {
            let _ = write!(
                line,
                ", median accuracy {}, median F1 {}",
                fmt(s.median_accuracy),
                fmt(s.median_f1)
            );
        }
        if !s.degenerate.is_empty() {
            let _ = write!(line, ", {} degenerate", s.degenerate.len());
        }
        println!("{line}");
    }
}

pub fn evaluate(args: &EvaluateArgs, jobs: usize) -> Result<()> {
    let manifest = load_manifest(&args.data)?;
    let model = load_model_for(&args.ckpt, &manifest)?;
    write_resolved(
        &args.out,
        &json!({"command": "evaluate", "data": args.data, "ckpt": args.ckpt,
                "split": args.split, "threshold": args.threshold, "scatter": args.scatter}),
    )?;
    let eval = evaluate_dataset(
        &model,
        &manifest,
        &splits_of(args.split),
        &EvalOptions {
            threshold: args.threshold,
            cache: Some(cache_for(&manifest)),
            jobs,
            keep_predictions: args.scatter,
            ..Default::default()
        },
    )?;
    write_evaluation(&eval, &args.out)?;
    print_report(&eval.report);
    Ok(())
}

#[derive(Debug, Serialize)]
struct ComparisonRow {
    model: String,
    params: usize,
    train_median_r2: Option<f64>,
    test_median_r2: Option<f64>,
    test_median_accuracy: Option<f64>,
    test_median_f1: Option<f64>,
}

fn comparison_markdown(rows: &[ComparisonRow]) -> String {
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
    let mut md = String::from("| Model | Parameters | Train median R² | Test median R² |\n|---|---:|---:|---:|\n");
    for r in rows {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} |",
            r.model,
            r.params,
            fmt(r.train_median_r2),
            fmt(r.test_median_r2)
        );
    }
    md
}

pub fn compare(args: &CompareArgs, jobs: usize) -> Result<()> {
    let file = read_run_config(args.config.as_deref())?;
    let run = RunConfig::merge(
        RunConfig {
            model: args.model.clone(),
            train: args.train.clone(),
        },
        file,
    );
    let manifest = load_manifest(&args.data)?;
    let train_cfg = resolve_train(&run.train)?;
    let mut configs = Vec::new();
    for &name in &args.models {
        let opts = ModelOpts {
            model: Some(name),
            ..run.model.clone()
        };
        configs.push((name, resolve_model(&opts, &manifest)?));
    }
    write_resolved(
        &args.out,
        &json!({"command": "compare", "data": args.data, "options": run, "train": train_cfg,
                "threshold": args.threshold,
                "models": configs.iter().map(|(n, c)| json!({"name": n.as_str(), "config": c})).collect::<Vec<_>>()}),
    )?;
    let mut rows = Vec::new();
    for (name, cfg) in &configs {
        let dir = args.out.join(name.as_str());
        let trained = train_one(&manifest, cfg, &train_cfg, &dir, jobs)?;
        let eval = evaluate_dataset(
            &trained.model,
            &manifest,
            &[Split::Train, Split::Test],
            &EvalOptions {
                threshold: args.threshold,
                cache: Some(cache_for(&manifest)),
                jobs,
                ..Default::default()
            },
        )?;
        write_evaluation(&eval, &dir.join("eval"))?;
        let train_s = eval.report.summary(Split::Train);
        let test_s = eval.report.summary(Split::Test);
        rows.push(ComparisonRow {
            model: name.as_str().to_string(),
            params: count_params(&trained.config),
            train_median_r2: train_s.and_then(|s| s.median_r2),
            test_median_r2: test_s.and_then(|s| s.median_r2),
            test_median_accuracy: test_s.and_then(|s| s.median_accuracy),
            test_median_f1: test_s.and_then(|s| s.median_f1),
        });
    }
    let md = comparison_markdown(&rows);
    fs::write(args.out.join("comparison.md"), &md)?;
    tagunet::jsonfmt::write_json_17(&args.out.join("comparison.json"), &rows)?;
    print!("{md}");
    Ok(())
}
