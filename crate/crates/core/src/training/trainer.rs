use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{lr_at, SelectOn, TrainConfig};
use super::metrics::{argmax2, Metrics};
use crate::autodiff::{Tape, Tensor};
use crate::encoder::FrozenBackbone;
use crate::error::{Error, Result};
use crate::init;
use crate::optim::Sgd;
use crate::prompts::{batch_loss, dmdp_forward, PreparedSample, PromptBank, PromptConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub train_loss: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub val_acc: f64,
    pub val_macro_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub select_on: SelectOn,
    pub best_epoch: usize,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Bank from the best validation epoch.
    pub best: PromptBank,
    /// Bank after the last epoch.
    pub last: PromptBank,
    pub history: History,
}

/// Applies one optimizer update per named gradient. Names outside the bank
/// are refused: the only other tensors in a forward pass are backbone ones.
pub fn apply_gradients(bank: &mut PromptBank, opt: &mut Sgd, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
    let known: Vec<String> = bank.named_tensors().into_iter().map(|(n, _)| n).collect();
    if let Some(stray) = grads.keys().find(|n| !known.contains(n)) {
        return Err(Error::FrozenParameter(stray.clone()));
    }
    bank.visit_mut(&mut |name, t| {
        if let Some(g) = grads.get(&name) {
            opt.update(&name, t, g, lr);
        }
    });
    Ok(())
}

/// Forward, backward and update on one batch; returns the batch loss.
pub fn train_step(
    backbone: &FrozenBackbone,
    bank: &mut PromptBank,
    prompt: &PromptConfig,
    batch: &[&PreparedSample],
    opt: &mut Sgd,
    lr: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let params = backbone.register(&mut tape);
    let vars = bank.register(&mut tape);
    let loss = batch_loss(&mut tape, &params, backbone.config(), &vars, prompt, batch)?;
    tape.backward(loss)?;
    backbone.ensure_no_grads(&tape, &params)?;
    let mut grads = BTreeMap::new();
    vars.visit(&mut |name, v| {
        let g = tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(*v)));
        grads.insert(name, g);
    });
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NumericInstability(format!("non-finite gradient for `{name}`")));
    }
    let value = tape.value(loss).item();
    apply_gradients(bank, opt, &grads, lr)?;
    Ok(value)
}

const EVAL_CHUNK: usize = 32;

/// Logits for every sample, computed with all tensors held constant.
pub fn predict(
    backbone: &FrozenBackbone,
    bank: &PromptBank,
    prompt: &PromptConfig,
    samples: &[PreparedSample],
) -> Result<Vec<[f64; 2]>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let mut tape = Tape::new();
        let params = backbone.register(&mut tape);
        let vars = bank.map(&mut |_, t| tape.constant(t.clone()));
        for s in chunk {
            let f = dmdp_forward(&mut tape, &params, backbone.config(), &vars, prompt, s)?;
            let l = tape.value(f.logits).data();
            out.push([l[0], l[1]]);
        }
    }
    Ok(out)
}

pub fn evaluate(
    backbone: &FrozenBackbone,
    bank: &PromptBank,
    prompt: &PromptConfig,
    samples: &[PreparedSample],
) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty test set".into()));
    }
    let preds: Vec<usize> = predict(backbone, bank, prompt, samples)?
        .into_iter()
        .map(argmax2)
        .collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    Metrics::from_predictions(&labels, &preds)
}

/// Prompt tuning with SGD + momentum on the bank only. After every epoch the
/// bank is scored on `val`; the best epoch (earliest on ties) is returned.
pub fn train(
    backbone: &FrozenBackbone,
    bank: PromptBank,
    prompt: &PromptConfig,
    cfg: &TrainConfig,
    train_set: &[PreparedSample],
    val_set: &[PreparedSample],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    prompt.validate(backbone.config())?;
    bank.check(prompt, backbone.config())?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Contract("training and validation sets must be non-empty".into()));
    }
    let mut rng = init::sub_rng(cfg.seed, 41);
    let mut opt = Sgd::new(cfg.momentum);
    let mut bank = bank;
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, PromptBank)> = None;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedSample> = idx.iter().map(|&i| &train_set[i]).collect();
            lr = lr_at(step, cfg, steps_per_epoch);
            loss_sum += train_step(backbone, &mut bank, prompt, &batch, &mut opt, lr)?;
            step += 1;
        }
        let val = evaluate(backbone, &bank, prompt, val_set)?;
        let score = match cfg.select_on {
            SelectOn::Accuracy => val.accuracy,
            SelectOn::MacroF1 => val.macro_f1,
        };
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, bank.clone()));
        }
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / steps_per_epoch as f64,
            lr,
            val_acc: val.accuracy,
            val_macro_f1: val.macro_f1,
        });
    }
    let (_, best_epoch, best_bank) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best: best_bank,
        last: bank,
        history: History {
            select_on: cfg.select_on,
            best_epoch,
            epochs: records,
        },
    })
}
