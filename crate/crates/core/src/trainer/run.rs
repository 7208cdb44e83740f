//! The epoch loop and top-1 evaluation.

use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use cafpn_tensor::Tensor;
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{mixup_batch, one_hot, Dataset, Preprocessor};
use crate::error::{io_err, Error, Result};
use crate::model::Model;
use crate::nn::{apply_stat_updates, Mode, Session};
use crate::trainer::optim::SgdNesterov;
use crate::trainer::preset::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Top-1 on the augmented training batches, against the unmixed labels.
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunRecord {
    pub epochs: Vec<EpochRecord>,
    pub checkpoint: Option<PathBuf>,
}

impl RunRecord {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path.as_ref())?;
        for e in &self.epochs {
            w.serialize(e)?;
        }
        w.flush().map_err(io_err(path.as_ref()))?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let epochs = r.deserialize().collect::<std::result::Result<_, _>>()?;
        Ok(Self {
            epochs,
            checkpoint: None,
        })
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Independent streams for shuffling and augmentation, fixed by
/// `(seed, epoch)` so an epoch can be replayed without its predecessors.
fn epoch_rngs(seed: u64, epoch: usize) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut order = ChaCha8Rng::seed_from_u64(seed);
    order.set_stream(2 * epoch as u64);
    let mut aug = ChaCha8Rng::seed_from_u64(seed);
    aug.set_stream(2 * epoch as u64 + 1);
    (order, aug)
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

fn check_classes(model: &Model, ds: &Dataset) -> Result<()> {
    if ds.num_classes() != model.spec.num_classes {
        return Err(Error::Data(format!(
            "dataset has {} classes but the model predicts {}",
            ds.num_classes(),
            model.spec.num_classes
        )));
    }
    Ok(())
}

/// Trains in place. `on_epoch` sees every record as it is produced and may
/// stop the run early by returning `Break`.
pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    prep: &Preprocessor,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&Model, &EpochRecord) -> ControlFlow<()>,
) -> Result<RunRecord> {
    cfg.validate()?;
    check_classes(model, train_set)?;
    if let Some(v) = val_set {
        check_classes(model, v)?;
    }
    if train_set.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let k = model.spec.num_classes;
    let mut opt = SgdNesterov::new(cfg.momentum, cfg.weight_decay);
    let mut record = RunRecord::default();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let (mut order_rng, mut aug_rng) = epoch_rngs(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let imgs: Vec<Tensor> = batch
                .iter()
                .map(|&i| prep.apply(&train_set.images[i], true, &mut aug_rng))
                .collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train_set.labels[i]).collect();
            let mut x = Tensor::stack(&imgs)?;
            let mut target = one_hot(&labels, k);
            if let Some(mix) = cfg.mixup.filter(|m| m.active(epoch)) {
                let lambda = mix.sample_lambda(epoch, &mut aug_rng)?;
                let mut perm: Vec<usize> = (0..batch.len()).collect();
                perm.shuffle(&mut aug_rng);
                let xb = Tensor::stack(&perm.iter().map(|&p| imgs[p].clone()).collect::<Vec<_>>())?;
                let yb = one_hot(&perm.iter().map(|&p| labels[p]).collect::<Vec<_>>(), k);
                (x, target) = mixup_batch(&x, &target, &xb, &yb, lambda)?;
            }
            let (grads, updates, loss, preds) = {
                let mut s = Session::new(&model.store, Mode::Train, true);
                let xv = s.input(x);
                let logits = model.forward(&mut s, xv)?;
                let loss = s.g.softmax_cross_entropy(logits, &target)?;
                let grads = s.g.backward(loss)?;
                let z = s.g.value(logits);
                let preds: Vec<usize> = (0..batch.len()).map(|i| argmax(z.row(i))).collect();
                (s.param_grads(&grads), s.take_stat_updates(), s.g.value(loss).item(), preds)
            };
            opt.step(&mut model.store, &grads, lr)?;
            apply_stat_updates(&mut model.store, &updates);
            loss_sum += loss * batch.len() as f64;
            correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
        }
        let val_acc = val_set.map(|v| evaluate(model, v, prep, cfg.batch_size)).transpose()?;
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            val_acc,
        };
        info!(
            "epoch {epoch:>3} lr {lr:.5} loss {:.4} train {:.4} val {}",
            rec.train_loss,
            rec.train_acc,
            val_acc.map_or("-".into(), |v| format!("{v:.4}"))
        );
        let flow = on_epoch(model, &rec);
        record.epochs.push(rec);
        if flow.is_break() {
            break;
        }
    }
    Ok(record)
}

/// Eval-mode predictions on the deterministic preprocessing path.
pub fn predict_labels(model: &Model, ds: &Dataset, prep: &Preprocessor, batch_size: usize) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(ds.len());
    for idx in (0..ds.len()).collect::<Vec<_>>().chunks(batch_size.max(1)) {
        let imgs: Vec<Tensor> = idx.iter().map(|&i| prep.apply(&ds.images[i], false, &mut rng)).collect();
        let z = model.predict(&Tensor::stack(&imgs)?)?;
        out.extend((0..idx.len()).map(|i| argmax(z.row(i))));
    }
    Ok(out)
}

/// Top-1 accuracy in [0, 1].
pub fn evaluate(model: &Model, ds: &Dataset, prep: &Preprocessor, batch_size: usize) -> Result<f64> {
    check_classes(model, ds)?;
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty split".into()));
    }
    let preds = predict_labels(model, ds, prep, batch_size)?;
    let hits = preds.iter().zip(&ds.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / ds.len() as f64)
}
