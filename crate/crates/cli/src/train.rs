//! The `train` subcommand.

use std::fs;
use std::ops::ControlFlow;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use log::info;

use cafpn_core::data::{ingest, AugMode, Dataset, IngestOptions, Normalization, Preprocessor, Split};
use cafpn_core::model::model_name;
use cafpn_core::trainer::{preset, save_checkpoint, train, CheckpointMeta};
use cafpn_core::{Model, ModelSpec};

use crate::settings::{Overrides, RunConfig};
use crate::{require_path, ArchArgs, CmdResult, Failure};

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub arch: ArchArgs,
    /// cnh_aug, cnh_mixup, cnh_noaug, tcnh_aug, tcnh_mixup, tcnh_noaug or smoke.
    #[arg(long)]
    pub preset: String,
    /// Dataset root with one directory of .tnsr images per class.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file of setting overrides, applied before explicit flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Keep classes too small for a validation share, training only.
    #[arg(long)]
    pub allow_train_only: bool,
}

impl TrainArgs {
    fn flag_overrides(&self) -> Overrides {
        Overrides {
            epochs: self.epochs,
            batch_size: self.batch_size,
            base_lr: self.lr,
            weight_decay: self.weight_decay,
            seed: self.seed,
            upsample: self.arch.upsample.map(Into::into),
            width: self.arch.width,
            reduction: self.arch.reduction,
            ..Default::default()
        }
    }
}

pub fn run(args: TrainArgs, threads: Option<usize>) -> CmdResult {
    require_path(&args.data, "data directory")?;
    let mut cfg = preset(&args.preset)?;
    cfg.check_depth(args.arch.depth)?;
    let file = match &args.config {
        Some(p) => {
            require_path(p, "config file")?;
            Overrides::read(p).map_err(Failure::Usage)?
        }
        None => Overrides::default(),
    };
    let flags = args.flag_overrides();
    let merged = file.layered(&flags);
    merged.apply_train(&mut cfg);
    cfg.validate()?;

    let manifest = ingest(&args.data, cfg.seed, IngestOptions { allow_train_only: args.allow_train_only })?;
    let fusion = args.arch.model.into();
    let mut spec = ModelSpec::standard(args.arch.depth, fusion, manifest.num_classes())?;
    merged.apply_model(&mut spec);
    spec.validate()?;

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating `{}`", args.out.display()))
        .map_err(Failure::Usage)?;
    let record = RunConfig {
        command: "train".into(),
        model: model_name(fusion).into(),
        depth: args.arch.depth,
        preset: args.preset.clone(),
        data: args.data.clone(),
        config_file: args.config.clone(),
        threads,
        flags,
        train: cfg.clone(),
        spec: spec.clone(),
    };
    let cfg_json = serde_json::to_string_pretty(&record).map_err(|e| Failure::Runtime(e.into()))?;
    fs::write(args.out.join("config.json"), cfg_json).map_err(|e| Failure::Usage(e.into()))?;
    manifest.write_csv(args.out.join("manifest.csv"))?;

    let train_set = Dataset::load(&manifest, Split::Train)?;
    let val_set = Dataset::load(&manifest, Split::Val)?;
    let prep = Preprocessor {
        style: cfg.crop,
        norm: Normalization::fit(&train_set.images)?,
        augment: cfg.regime != AugMode::None,
    };
    let mut model = Model::new(spec.clone(), cfg.seed)?;
    info!(
        "{}-{} with {} parameters; {} train / {} val images; preset {}",
        model_name(fusion),
        args.arch.depth,
        model.count_parameters(),
        train_set.len(),
        val_set.len(),
        cfg.name
    );
    let val = (!val_set.is_empty()).then_some(&val_set);
    let mut run = train(&mut model, &train_set, val, &prep, &cfg, |_, _| ControlFlow::Continue(()))?;
    let ckpt = args.out.join("model.tnsr");
    let meta = CheckpointMeta {
        spec,
        preprocessor: prep,
        class_names: manifest.classes.clone(),
    };
    save_checkpoint(&model, &meta, &ckpt)?;
    run.checkpoint = Some(ckpt.clone());
    run.write_csv(args.out.join("run.csv"))?;
    if let Some(last) = run.last() {
        println!(
            "epochs {} train_acc {:.4} val_acc {} checkpoint {}",
            run.epochs.len(),
            last.train_acc,
            last.val_acc.map_or("-".into(), |v| format!("{v:.4}")),
            ckpt.display()
        );
    }
    Ok(())
}
