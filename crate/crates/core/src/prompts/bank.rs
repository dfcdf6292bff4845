use std::collections::BTreeMap;

use super::config::{PromptConfig, Variant};
use crate::autodiff::{Tape, Tensor, Var};
use crate::encoder::{EncoderConfig, Linear};
use crate::error::{Error, Result};
use crate::init;

pub const PROMPT_STD: f64 = 0.02;

/// All trainable prompt-tuning state. Which fields are present depends on the
/// variant; absent parts are simply not part of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank<T = Tensor> {
    pub variant: Variant,
    /// `[c, d_t]` first-layer text prompts (the shared matrix under UPT).
    pub text_prompts: Option<T>,
    /// `[c, d_v]` first-layer vision prompts (IPT and V_TO_T).
    pub vision_prompts: Option<T>,
    /// `S - 1` sharing tokens `[c, d_t]`, one per deeper injection layer.
    pub text_share: Vec<T>,
    /// `S - 1` sharing tokens `[c, d_v]`.
    pub vision_share: Vec<T>,
    /// One cross-modal map per injection layer: text to vision, or vision to
    /// text under V_TO_T.
    pub projections: Vec<Linear<T>>,
    /// `[1]` gate prior τ.
    pub gate_prior: Option<T>,
    /// `[2d, 1]` modality weighting layer.
    pub weight_mod: Option<Linear<T>>,
    /// `[2d, 2]` classification head over `[image ∥ text]`.
    pub classifier: Linear<T>,
}

impl PromptBank<Tensor> {
    pub fn init(cfg: &PromptConfig, enc: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate(enc)?;
        let mut rng = init::sub_rng(seed, 11);
        let (c, s, v) = (cfg.length, cfg.depth, cfg.variant);
        let (dt, dv, d) = (enc.text_width, enc.vision_width, enc.embed_dim);
        let ones = |w: usize| (1..s).map(|_| Tensor::ones(&[c, w])).collect::<Vec<_>>();

        let text_prompts = (v != Variant::VToT).then(|| init::normal(&mut rng, &[c, dt], PROMPT_STD));
        let vision_prompts =
            matches!(v, Variant::Ipt | Variant::VToT).then(|| init::normal(&mut rng, &[c, dv], PROMPT_STD));
        let vision_share = if v == Variant::Upt { Vec::new() } else { ones(dv) };
        let projections = match v {
            Variant::Upt | Variant::Ipt => Vec::new(),
            Variant::VToT => (0..s).map(|_| Linear::init(&mut rng, dv, dt, true)).collect(),
            _ => (0..s).map(|_| Linear::init(&mut rng, dt, dv, true)).collect(),
        };
        let gate_prior = v.has_gate().then(|| Tensor::scalar(cfg.gate_prior_init));
        let weight_mod = v.has_weight_mod().then(|| Linear::init(&mut rng, 2 * d, 1, true));
        let classifier = Linear::init(&mut rng, 2 * d, 2, true);
        let bank = PromptBank {
            variant: v,
            text_prompts,
            vision_prompts,
            text_share: ones(dt),
            vision_share,
            projections,
            gate_prior,
            weight_mod,
            classifier,
        };
        bank.check(cfg, enc)?;
        Ok(bank)
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n, t)));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Every tensor becomes a differentiable leaf.
    pub fn register(&self, tape: &mut Tape) -> PromptBank<Var> {
        self.map(&mut |_, t| tape.param(t.clone()))
    }

    /// Rebuilds a bank from named tensors, using `reference` for structure.
    pub fn from_named(reference: &PromptBank, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut missing = None;
        let bank = reference.map(&mut |name, t| match tensors.remove(name) {
            Some(v) if v.shape() == t.shape() => v,
            Some(v) => {
                missing.get_or_insert(format!("`{name}` has shape {:?}, expected {:?}", v.shape(), t.shape()));
                t.clone()
            }
            None => {
                missing.get_or_insert(format!("`{name}` is missing"));
                t.clone()
            }
        });
        if let Some(msg) = missing {
            return Err(Error::Validation(format!("prompt bank: {msg}")));
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Validation(format!("prompt bank: unexpected tensor `{extra}`")));
        }
        Ok(bank)
    }

    /// Verifies that the bank's variant and shapes agree with the configs.
    pub fn check(&self, cfg: &PromptConfig, enc: &EncoderConfig) -> Result<()> {
        if self.variant != cfg.variant {
            return Err(Error::Config(format!(
                "prompt bank holds variant {} but the config asks for {}",
                self.variant, cfg.variant
            )));
        }
        let expected = Self::skeleton(cfg, enc);
        let ours: Vec<(String, Vec<usize>)> = self
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if ours != expected {
            return Err(Error::Config(format!(
                "prompt bank layout does not match config (length {}, depth {}, variant {})",
                cfg.length, cfg.depth, cfg.variant
            )));
        }
        Ok(())
    }

    fn skeleton(cfg: &PromptConfig, enc: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
        let (c, s, v) = (cfg.length, cfg.depth, cfg.variant);
        let (dt, dv, d) = (enc.text_width, enc.vision_width, enc.embed_dim);
        let mut out = Vec::new();
        if v != Variant::VToT {
            out.push(("text_prompts".to_string(), vec![c, dt]));
        }
        if matches!(v, Variant::Ipt | Variant::VToT) {
            out.push(("vision_prompts".to_string(), vec![c, dv]));
        }
        for i in 1..s {
            out.push((format!("text_share.{i}"), vec![c, dt]));
        }
        if v != Variant::Upt {
            for i in 1..s {
                out.push((format!("vision_share.{i}"), vec![c, dv]));
            }
        }
        let (pin, pout) = if v == Variant::VToT { (dv, dt) } else { (dt, dv) };
        if !matches!(v, Variant::Upt | Variant::Ipt) {
            for i in 0..s {
                out.push((format!("projections.{i}.weight"), vec![pin, pout]));
                out.push((format!("projections.{i}.bias"), vec![pout]));
            }
        }
        if v.has_gate() {
            out.push(("gate_prior".to_string(), vec![1]));
        }
        if v.has_weight_mod() {
            out.push(("weight_mod.weight".to_string(), vec![2 * d, 1]));
            out.push(("weight_mod.bias".to_string(), vec![1]));
        }
        out.push(("classifier.weight".to_string(), vec![2 * d, 2]));
        out.push(("classifier.bias".to_string(), vec![2]));
        out
    }
}

impl<T> PromptBank<T> {
    /// Visits tensors in a fixed order under stable dotted names.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        if let Some(p) = &self.text_prompts {
            f("text_prompts".into(), p);
        }
        if let Some(p) = &self.vision_prompts {
            f("vision_prompts".into(), p);
        }
        for (i, t) in self.text_share.iter().enumerate() {
            f(format!("text_share.{}", i + 1), t);
        }
        for (i, t) in self.vision_share.iter().enumerate() {
            f(format!("vision_share.{}", i + 1), t);
        }
        for (i, h) in self.projections.iter().enumerate() {
            h.visit(&format!("projections.{i}"), f);
        }
        if let Some(t) = &self.gate_prior {
            f("gate_prior".into(), t);
        }
        if let Some(w) = &self.weight_mod {
            w.visit("weight_mod", f);
        }
        self.classifier.visit("classifier", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut T)) {
        if let Some(p) = &mut self.text_prompts {
            f("text_prompts".into(), p);
        }
        if let Some(p) = &mut self.vision_prompts {
            f("vision_prompts".into(), p);
        }
        for (i, t) in self.text_share.iter_mut().enumerate() {
            f(format!("text_share.{}", i + 1), t);
        }
        for (i, t) in self.vision_share.iter_mut().enumerate() {
            f(format!("vision_share.{}", i + 1), t);
        }
        for (i, h) in self.projections.iter_mut().enumerate() {
            h.visit_mut(&format!("projections.{i}"), f);
        }
        if let Some(t) = &mut self.gate_prior {
            f("gate_prior".into(), t);
        }
        if let Some(w) = &mut self.weight_mod {
            w.visit_mut("weight_mod", f);
        }
        self.classifier.visit_mut("classifier", f);
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&str, &T) -> U) -> PromptBank<U> {
        PromptBank {
            variant: self.variant,
            text_prompts: self.text_prompts.as_ref().map(|p| f("text_prompts", p)),
            vision_prompts: self.vision_prompts.as_ref().map(|p| f("vision_prompts", p)),
            text_share: self
                .text_share
                .iter()
                .enumerate()
                .map(|(i, t)| f(&format!("text_share.{}", i + 1), t))
                .collect(),
            vision_share: self
                .vision_share
                .iter()
                .enumerate()
                .map(|(i, t)| f(&format!("vision_share.{}", i + 1), t))
                .collect(),
            projections: self
                .projections
                .iter()
                .enumerate()
                .map(|(i, h)| h.map(&format!("projections.{i}"), f))
                .collect(),
            gate_prior: self.gate_prior.as_ref().map(|t| f("gate_prior", t)),
            weight_mod: self.weight_mod.as_ref().map(|w| w.map("weight_mod", f)),
            classifier: self.classifier.map("classifier", f),
        }
    }
}
