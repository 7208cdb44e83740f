//! Every subcommand except `train`.

use std::fs;
use std::path::PathBuf;

use anyhow::{anyhow, Context};
use clap::Args;
use log::info;

use cafpn_core::checks::{all_check_names, default_options, run_check, GRAD_TOL};
use cafpn_core::data::stats::{dataset_stats, read_category_map, write_category_csv, write_class_csv};
use cafpn_core::data::synth::{synthetic_textures, write_dataset};
use cafpn_core::data::tiny::{generate_tiny, TileFilters};
use cafpn_core::data::{ingest, Dataset, IngestOptions, Split};
use cafpn_core::introspect::{activation_summary, export_traces, trace_forward};
use cafpn_core::trainer::{evaluate, load_checkpoint};
use cafpn_core::{Model, ModelSpec};
use cafpn_tensor::Tensor;

use crate::{require_path, ArchArgs, CmdResult, Failure};

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    pub split: SplitArg,
    /// Split seed; use the training run's seed to score its validation set.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long)]
    pub allow_train_only: bool,
}

pub fn eval(a: EvalArgs) -> CmdResult {
    require_path(&a.ckpt, "checkpoint")?;
    require_path(&a.data, "data directory")?;
    let (model, meta) = load_checkpoint(&a.ckpt)?;
    let manifest = ingest(&a.data, a.seed, IngestOptions { allow_train_only: a.allow_train_only })?;
    if manifest.classes != meta.class_names {
        return Err(usage(anyhow!(
            "dataset classes {:?} differ from the checkpoint's {:?}",
            manifest.classes,
            meta.class_names
        )));
    }
    let ds = match a.split {
        SplitArg::Train => Dataset::load(&manifest, Split::Train)?,
        SplitArg::Val => Dataset::load(&manifest, Split::Val)?,
        SplitArg::All => {
            let mut d = Dataset::load(&manifest, Split::Train)?;
            let v = Dataset::load(&manifest, Split::Val)?;
            d.images.extend(v.images);
            d.labels.extend(v.labels);
            d
        }
    };
    let acc = evaluate(&model, &ds, &meta.preprocessor, a.batch_size)?;
    println!("{{\"split\":\"{:?}\",\"images\":{},\"top1\":{acc}}}", a.split, ds.len());
    Ok(())
}

#[derive(Args, Debug)]
pub struct CropTinyArgs {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub dst: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub tile: usize,
    /// Luminance variance below which a tile counts as blank.
    #[arg(long, default_value_t = TileFilters::default().min_variance)]
    pub min_variance: f64,
    /// Distance from the border mean within which a tile counts as background.
    #[arg(long, default_value_t = TileFilters::default().background_delta)]
    pub background_delta: f64,
}

pub fn crop_tiny(a: CropTinyArgs) -> CmdResult {
    require_path(&a.src, "source directory")?;
    if a.tile == 0 {
        return Err(usage(anyhow!("--tile must be positive")));
    }
    let manifest = ingest(&a.src, 0, IngestOptions { allow_train_only: true })?;
    let filters = TileFilters {
        min_variance: a.min_variance,
        background_delta: a.background_delta,
    };
    let report = generate_tiny(&manifest, &a.dst, a.tile, filters)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.into()))?;
    fs::write(a.dst.join("tiny_report.json"), &json).map_err(usage)?;
    println!(
        "images {} (undersized {}), tiles {} raw, {} kept, {} blank, {} background",
        report.images, report.undersized, report.raw_tiles, report.kept, report.blank, report.background
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// CSV with `class,category` rows.
    #[arg(long)]
    pub categories: Option<PathBuf>,
    /// Directory for the CSV reports (default: the data directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub allow_train_only: bool,
}

pub fn stats(a: StatsArgs) -> CmdResult {
    require_path(&a.data, "data directory")?;
    let manifest = ingest(&a.data, a.seed, IngestOptions { allow_train_only: a.allow_train_only })?;
    let map = match &a.categories {
        Some(p) => {
            require_path(p, "category map")?;
            Some(read_category_map(p)?)
        }
        None => None,
    };
    let report = dataset_stats(&manifest, map.as_ref());
    let out = a.out.unwrap_or_else(|| a.data.clone());
    fs::create_dir_all(&out).map_err(usage)?;
    write_class_csv(&report, out.join("class_counts.csv"))?;
    if report.categories.is_some() {
        write_category_csv(&report, out.join("category_counts.csv"))?;
    }
    println!("classes {} images {}", report.classes.len(), report.total_images());
    if let Some(c) = report.largest_class() {
        println!("largest class {} with {} images", c.class, c.total);
    }
    for c in report.categories.iter().flatten() {
        println!("category {} classes {} images {}", c.category, c.classes, c.images);
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Number of images to trace.
    #[arg(long, default_value_t = 8)]
    pub images: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset to draw validation images from; synthetic textures otherwise.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
}

pub fn inspect(a: InspectArgs) -> CmdResult {
    require_path(&a.ckpt, "checkpoint")?;
    let (model, meta) = load_checkpoint(&a.ckpt)?;
    let ds = match &a.data {
        Some(d) => {
            require_path(d, "data directory")?;
            let manifest = ingest(d, a.seed, IngestOptions { allow_train_only: true })?;
            let mut ds = Dataset::load(&manifest, Split::Val)?;
            if ds.len() < a.images {
                ds = Dataset::load(&manifest, Split::Train)?;
            }
            ds
        }
        None => {
            let size = model.spec.backbone.input_size;
            let k = model.spec.num_classes;
            synthetic_textures(k, a.images.div_ceil(k).max(1), size, a.seed)
        }
    };
    let n = a.images.min(ds.len());
    if n == 0 {
        return Err(usage(anyhow!("no images to inspect")));
    }
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(a.seed);
    let mut traces = Vec::new();
    for chunk in (0..n).collect::<Vec<_>>().chunks(a.batch_size.max(1)) {
        let imgs: Vec<Tensor> = chunk
            .iter()
            .map(|&i| meta.preprocessor.apply(&ds.images[i], false, &mut rng))
            .collect();
        traces.push(trace_forward(&model, &Tensor::stack(&imgs)?)?);
    }
    let files = export_traces(&a.out, &traces)?;
    info!("wrote {files} files under {}", a.out.join("trace").display());
    if let Ok(summary) = activation_summary(&traces) {
        for s in summary {
            println!(
                "level {} {:?}: mean {:.4} std {:.4} min {:.4} max {:.4}",
                s.level, s.flow, s.mean, s.std, s.min, s.max
            );
        }
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// A single check (default: all of them).
    #[arg(long)]
    pub module: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Consecutive seeds to run from `--seed`.
    #[arg(long, default_value_t = 1)]
    pub runs: u64,
}

pub fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let names: Vec<&str> = match &a.module {
        Some(m) => {
            if !all_check_names().contains(&m.as_str()) {
                return Err(usage(anyhow!(
                    "unknown check `{m}`; expected one of {}",
                    all_check_names().join(", ")
                )));
            }
            vec![m.as_str()]
        }
        None => all_check_names(),
    };
    let mut failures = Vec::new();
    for seed in a.seed..a.seed + a.runs {
        for name in &names {
            let r = run_check(name, seed, default_options())?;
            let ok = r.passes(GRAD_TOL);
            println!(
                "{} {name} seed {seed}: max rel error {:.3e} over {} entries",
                if ok { "ok  " } else { "FAIL" },
                r.max_rel_error,
                r.checked
            );
            if !ok {
                let w = r.worst.as_ref().map_or(String::new(), |w| {
                    format!(
                        " (worst {}[{}]: analytic {:.6e}, numeric {:.6e})",
                        w.input, w.index, w.analytic, w.numeric
                    )
                });
                failures.push(format!("{name} seed {seed}: {:.3e}{w}", r.max_rel_error));
            }
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(failures.join("; ")))
    }
}

#[derive(Args, Debug)]
pub struct ParamsArgs {
    #[command(flatten)]
    pub arch: ArchArgs,
    #[arg(long, default_value_t = 98)]
    pub classes: usize,
}

pub fn params(a: ParamsArgs) -> CmdResult {
    let mut spec = ModelSpec::standard(a.arch.depth, a.arch.model.into(), a.classes)?;
    if let Some(u) = a.arch.upsample {
        spec.pyramid.upsample = u.into();
    }
    if let Some(w) = a.arch.width {
        spec.pyramid.width = w;
    }
    if let Some(t) = a.arch.reduction {
        spec.pyramid.reduction = t;
    }
    let model = Model::new(spec, 0)?;
    let s = &model.store;
    let total = model.count_parameters();
    println!("backbone {}", s.count_prefix("backbone/"));
    println!("pyramid {}", s.count_prefix("pyramid/"));
    println!("head {}", s.count_prefix("head/"));
    println!("total {total} ({:.2}M)", total as f64 / 1e6);
    Ok(())
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    #[arg(long, default_value_t = 20)]
    pub per_class: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn synth(a: SynthArgs) -> CmdResult {
    if a.classes < 2 || a.per_class == 0 || a.size == 0 {
        return Err(usage(anyhow!("need at least 2 classes, 1 image per class and a positive size")));
    }
    let ds = synthetic_textures(a.classes, a.per_class, a.size, a.seed);
    write_dataset(&a.out, &ds)
        .with_context(|| format!("writing `{}`", a.out.display()))
        .map_err(usage)?;
    println!("wrote {} images in {} classes to {}", ds.len(), a.classes, a.out.display());
    Ok(())
}
