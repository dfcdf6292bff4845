//! Browser bindings for three small views of the model: the gate curve and
//! how gate and modality weight scale the first-layer prompts, synthetic
//! samples, and prompt attention heatmaps. Every function returns JSON.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use dmdp::analysis::{extract_prompt_attention, Modality};
use dmdp::autodiff::{Tape, Tensor};
use dmdp::data::{gen_synthetic, synthetic_vocab, SarcasmCase};
use dmdp::encoder::{DualEncoderParams, EncoderConfig, FrozenBackbone};
use dmdp::prompts::{first_layer_prompts, gate_value, prepare_samples, PromptBank, PromptConfig};

fn fail(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn case_of(case: u32) -> Result<SarcasmCase, JsError> {
    match case {
        0 => Ok(SarcasmCase::Mixed),
        c => SarcasmCase::from_index(c as u64).map_err(fail),
    }
}

fn frobenius(t: &Tensor) -> f64 {
    t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `g = tanh(τ)` sampled at `n` evenly spaced τ in `[lo, hi]`.
#[wasm_bindgen]
pub fn gate_curve(lo: f64, hi: f64, n: usize) -> Result<String, JsError> {
    if n < 2 || lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) {
        return Err(JsError::new("need n >= 2 and lo < hi"));
    }
    let points: Vec<Value> = (0..n)
        .map(|i| {
            let tau = lo + (hi - lo) * i as f64 / (n - 1) as f64;
            let mut tape = Tape::new();
            let t = tape.constant(Tensor::scalar(tau));
            let g = gate_value(&mut tape, t);
            json!([tau, tape.value(g).item()])
        })
        .collect();
    Ok(json!({ "points": points }).to_string())
}

/// First-layer text and vision prompts of a freshly initialized DMDP bank
/// for gate prior `tau` and modality weight `r`.
#[wasm_bindgen]
pub fn first_layer(tau: f64, r: f64, seed: u64) -> Result<String, JsError> {
    if !(0.0..=1.0).contains(&r) {
        return Err(JsError::new("r must lie in [0, 1]"));
    }
    let enc = EncoderConfig::default();
    let cfg = PromptConfig {
        gate_prior_init: tau,
        ..PromptConfig::default().capped(enc.layers)
    };
    let bank = PromptBank::init(&cfg, &enc, seed).map_err(fail)?;
    let mut tape = Tape::new();
    let vars = bank.map(&mut |_, t| tape.constant(t.clone()));
    let tau_var = vars.gate_prior.ok_or_else(|| JsError::new("bank has no gate"))?;
    let g = gate_value(&mut tape, tau_var);
    let r_var = tape.constant(Tensor::matrix(1, 1, vec![r]).map_err(fail)?);
    let (qt, qv) = first_layer_prompts(&mut tape, &vars, g, r_var).map_err(fail)?;
    let rows = |t: &Tensor| -> Vec<Vec<f64>> { (0..t.rows()).map(|i| t.row_slice(i).to_vec()).collect() };
    let (qt, qv) = (tape.value(qt), tape.value(qv));
    Ok(json!({
        "g": tape.value(g).item(),
        "r": r,
        "text_norm": frobenius(qt),
        "vision_norm": frobenius(qv),
        "text": rows(qt),
        "vision": rows(qv),
    })
    .to_string())
}

/// One synthetic sample with its hidden classes.
#[wasm_bindgen]
pub fn synthetic_sample(case: u32, seed: u64, index: usize) -> Result<String, JsError> {
    let enc = EncoderConfig::default();
    let n = (index + 1).max(4);
    let data = gen_synthetic(case_of(case)?, n, seed, enc.image_size, enc.max_text_len).map_err(fail)?;
    let s = &data.manifest.samples[index];
    let l = data.latents[index];
    let image: Vec<Vec<u8>> = (0..s.image.height)
        .map(|r| s.image.pixels[r * s.image.width..(r + 1) * s.image.width].to_vec())
        .collect();
    Ok(json!({
        "id": s.id,
        "image": image,
        "text": s.text,
        "label": s.label,
        "visual": l.visual,
        "textual": l.textual,
    })
    .to_string())
}

/// Head-averaged last-layer prompt attention for a synthetic sample, using
/// a random frozen backbone and an untrained bank.
#[wasm_bindgen]
pub fn attention_maps(case: u32, seed: u64, index: usize, tau: f64) -> Result<String, JsError> {
    let enc = EncoderConfig::default();
    let backbone =
        FrozenBackbone::freeze(DualEncoderParams::init(&enc, seed).map_err(fail)?, enc.clone()).map_err(fail)?;
    let cfg = PromptConfig {
        gate_prior_init: tau,
        ..PromptConfig::default().capped(enc.layers)
    };
    let bank = PromptBank::init(&cfg, &enc, seed).map_err(fail)?;
    let vocab = synthetic_vocab();
    let n = (index + 1).max(4);
    let data = gen_synthetic(case_of(case)?, n, seed, enc.image_size, enc.max_text_len).map_err(fail)?;
    let samples = prepare_samples(&backbone, &vocab, &data.manifest).map_err(fail)?;
    let maps = extract_prompt_attention(&backbone, &bank, &cfg, &vocab, &samples[index], None).map_err(fail)?;
    let side = enc.image_size / enc.patch_size;
    let out: Vec<Value> = maps
        .iter()
        .map(|m| {
            let (labels, weights): (Vec<&str>, Vec<f64>) = match m.modality {
                Modality::Text => m.incoming.iter().map(|t| (t.label.as_str(), t.weight)).unzip(),
                Modality::Vision => m
                    .targets
                    .iter()
                    .filter(|t| !t.flagged)
                    .map(|t| (t.label.as_str(), t.weight))
                    .unzip(),
            };
            json!({
                "modality": m.modality,
                "prompt": m.prompt_index,
                "labels": labels,
                "weights": weights,
                "grid": if m.modality == Modality::Vision { json!([side, side]) } else { json!([1, weights.len()]) },
            })
        })
        .collect();
    Ok(json!({ "text": data.manifest.samples[index].text, "maps": out }).to_string())
}
