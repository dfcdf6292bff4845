//! Contrastive image-text pretraining of the backbone.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::forward::{encode_image, encode_text, TokenSeq};
use super::params::{DualEncoderParams, EncoderConfig};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::init;
use crate::optim::Adam;

/// Upper bound on the learned logit scale (temperature 100).
pub const MAX_LOGIT_SCALE: f64 = 4.605_170_185_988_092;

/// One aligned image-text pair; `concept` identifies what both sides depict.
#[derive(Clone, Debug)]
pub struct PretrainPair {
    pub pixels: Vec<f64>,
    pub tokens: TokenSeq,
    pub concept: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            epochs: 50,
            lr: 3e-3,
            batch_size: 32,
            seed: 7,
        }
    }
}

/// Symmetric InfoNCE over a `[B, B]` logit matrix whose diagonal holds the
/// matching pairs.
pub fn symmetric_contrastive_loss(tape: &mut Tape, logits: Var) -> Result<Var> {
    let (rows, cols) = tape.value(logits).dims2();
    if rows != cols {
        return Err(Error::shape("contrastive_loss", tape.shape(logits), &[rows, rows]));
    }
    if rows < 2 {
        return Err(Error::DegenerateContrastive(rows));
    }
    let targets: Vec<usize> = (0..rows).collect();
    let image_side = tape.cross_entropy(logits, &targets)?;
    let lt = tape.transpose(logits);
    let text_side = tape.cross_entropy(lt, &targets)?;
    let total = tape.add(image_side, text_side)?;
    Ok(tape.mul_const(total, 0.5))
}

/// Cosine-similarity logits `exp(logit_scale) · norm(I) · norm(T)ᵀ`.
pub fn contrastive_logits(tape: &mut Tape, images: Var, texts: Var, logit_scale: Var) -> Result<Var> {
    let i = tape.normalize_rows(images)?;
    let t = tape.normalize_rows(texts)?;
    let tt = tape.transpose(t);
    let sim = tape.matmul(i, tt)?;
    let temp = tape.exp(logit_scale);
    tape.scale(sim, temp)
}

/// Per-pair share of the symmetric loss: the mean of the pair's image→text
/// and text→image cross-entropies.
pub fn per_pair_contrastive_losses(logits: &Tensor) -> Vec<f64> {
    let (n, _) = logits.dims2();
    let lse = |vals: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = vals.collect();
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    (0..n)
        .map(|k| {
            let row = lse(&mut (0..n).map(|j| logits.at(k, j)));
            let col = lse(&mut (0..n).map(|i| logits.at(i, k)));
            0.5 * ((row - logits.at(k, k)) + (col - logits.at(k, k)))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub params: DualEncoderParams,
    /// Mean batch loss per epoch.
    pub loss_curve: Vec<f64>,
}

/// Trains every backbone tensor with Adam on the symmetric contrastive loss.
pub fn contrastive_pretrain(
    mut params: DualEncoderParams,
    cfg: &EncoderConfig,
    pairs: &[PretrainPair],
    opts: &PretrainOptions,
) -> Result<PretrainOutcome> {
    if pairs.is_empty() {
        return Err(Error::Contract("pretraining corpus is empty".into()));
    }
    if opts.batch_size < 2 || pairs.len() < 2 {
        return Err(Error::DegenerateContrastive(opts.batch_size.min(pairs.len())));
    }
    let mut rng = init::sub_rng(opts.seed, 11);
    let mut adam = Adam::default();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut curve = Vec::with_capacity(opts.epochs);
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(opts.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut tape = Tape::new();
            let vars = params.register(&mut tape, true);
            let mut imgs = Vec::with_capacity(chunk.len());
            let mut txts = Vec::with_capacity(chunk.len());
            for &k in chunk {
                imgs.push(encode_image(&mut tape, &vars, cfg, &pairs[k].pixels, None)?.embedding);
                txts.push(encode_text(&mut tape, &vars, cfg, &pairs[k].tokens, None)?.embedding);
            }
            let i = tape.concat(&imgs, 0)?;
            let t = tape.concat(&txts, 0)?;
            let logits = contrastive_logits(&mut tape, i, t, vars.logit_scale)?;
            let loss = symmetric_contrastive_loss(&mut tape, logits)?;
            total += tape.value(loss).item();
            batches += 1;
            tape.backward(loss)?;

            let mut grads = BTreeMap::new();
            vars.visit("", &mut |name, v| {
                if let Some(g) = tape.grad(*v) {
                    grads.insert(name, g.clone());
                }
            });
            adam.begin_step();
            params.visit_mut("", &mut |name, t| {
                if let Some(g) = grads.get(&name) {
                    adam.update(&name, t, g, opts.lr);
                }
            });
            let s = params.logit_scale.data_mut();
            s[0] = s[0].clamp(0.0, MAX_LOGIT_SCALE);
        }
        curve.push(total / batches.max(1) as f64);
    }
    Ok(PretrainOutcome {
        params,
        loss_curve: curve,
    })
}

/// Prompt-free embeddings of every pair, `[n, d]` for images and texts.
pub fn embed_pairs(
    params: &DualEncoderParams,
    cfg: &EncoderConfig,
    pairs: &[PretrainPair],
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let mut imgs = Vec::with_capacity(pairs.len());
    let mut txts = Vec::with_capacity(pairs.len());
    for p in pairs {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape, false);
        let i = encode_image(&mut tape, &vars, cfg, &p.pixels, None)?.embedding;
        let t = encode_text(&mut tape, &vars, cfg, &p.tokens, None)?.embedding;
        imgs.push(tape.value(i).clone());
        txts.push(tape.value(t).clone());
    }
    Ok((imgs, txts))
}

/// Fraction of images whose most similar text (cosine) depicts the same concept.
pub fn concept_retrieval_at_1(params: &DualEncoderParams, cfg: &EncoderConfig, pairs: &[PretrainPair]) -> Result<f64> {
    let (imgs, txts) = embed_pairs(params, cfg, pairs)?;
    let unit = |t: &Tensor| {
        let n = t.data().iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
        t.data().iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let txt_units: Vec<Vec<f64>> = txts.iter().map(unit).collect();
    let mut hits = 0usize;
    for (k, img) in imgs.iter().enumerate() {
        let iu = unit(img);
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (j, tu) in txt_units.iter().enumerate() {
            let s: f64 = iu.iter().zip(tu).map(|(a, b)| a * b).sum();
            if s > best.0 {
                best = (s, j);
            }
        }
        if pairs[best.1].concept == pairs[k].concept {
            hits += 1;
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}
