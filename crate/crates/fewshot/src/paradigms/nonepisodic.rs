//! Non-episodic pretraining: whole-dataset supervised cross-entropy
//! over global labels, through the projector.

use std::time::Instant;

use crate::data::{sample_batches, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::nn::loss::argmax_lowest;
use crate::nn::sgd::{cosine_lr, Sgd};
use crate::rng::stream;

use super::{EpochRecord, ParadigmConfig, ParadigmKind, TrainingHistory};

/// SGD over shuffled batches with momentum, weight decay and cosine
/// learning-rate decay. Returns per-epoch mean loss records.
pub fn pretrain_nonepisodic(
    bundle: &mut ModelBundle,
    source: &LabeledDataset,
    cfg: &ParadigmConfig,
) -> Result<TrainingHistory> {
    assert!(
        matches!(cfg.kind, ParadigmKind::NonEpisodic),
        "non-episodic config required"
    );
    cfg.validate()?;
    if bundle.num_classes() != source.num_classes() {
        return Err(Error::ClassCountMismatch {
            expected: bundle.num_classes(),
            actual: source.num_classes(),
        });
    }
    let mut opt = Sgd::new(&bundle.params, cfg.momentum, cfg.weight_decay);
    let mut history = TrainingHistory::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cosine_lr(cfg.outer_lr, epoch, cfg.epochs);
        let mut rng = stream(bundle.seed, &format!("nonepi-epoch-{epoch}"));
        let mut loss_sum = 0.0;
        let mut item_count = 0usize;
        for (x, y) in sample_batches(source, cfg.batch_size, &mut rng)? {
            let batch_len = y.len();
            let (loss, grads) = bundle.ce_loss_and_grads(&x, &y, true)?;
            opt.step(&mut bundle.params, &grads, lr);
            loss_sum += loss * batch_len as f64;
            item_count += batch_len;
        }
        history.records.push(EpochRecord {
            epoch,
            loss: loss_sum / item_count as f64,
            accuracy: None,
            lr,
            wall_s: start.elapsed().as_secs_f64(),
        });
        bundle.epoch += 1;
    }
    Ok(history)
}

/// Classification accuracy of the full training path (extractor,
/// projector, head) over a dataset's global labels, measured with
/// eval-mode BN so the result is deterministic and batch-independent.
pub fn train_path_accuracy(
    bundle: &ModelBundle,
    dataset: &LabeledDataset,
    batch: usize,
) -> Result<f64> {
    let indices = dataset.all_indices();
    let mut correct = 0usize;
    for chunk in indices.chunks(batch.max(1)) {
        let x = dataset.stack(chunk);
        bundle.arch.check_input(&x)?;
        let feats = bundle
            .arch
            .extractor
            .forward_eval(&bundle.params, &bundle.buffers, &x);
        let projected = bundle
            .arch
            .projector
            .forward_eval(&bundle.params, &bundle.buffers, &feats);
        let (logits, _) = bundle.arch.head.forward(&bundle.params, &projected);
        for (row, &(class, _)) in logits.rows().into_iter().zip(chunk.iter()) {
            if argmax_lowest(row.iter().copied()) == class {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}
