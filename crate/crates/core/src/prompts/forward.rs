use super::bank::PromptBank;
use super::config::{PromptConfig, Variant};
use super::ops::{first_layer_prompts, gate_value, modality_weight, project_prompts, share_prompts};
use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{Manifest, Vocab};
use crate::encoder::{
    encode_image, encode_text, DualEncoderParams, Encoded, EncoderConfig, FixedPrompts, FrozenBackbone, PromptInjector,
    TokenSeq,
};
use crate::error::{Error, Result};

/// A sample ready for the model, with its prompt-free embeddings cached.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    pub pixels: Vec<f64>,
    pub tokens: TokenSeq,
    pub label: usize,
    /// `[1, d]` image embedding without prompts (ĩ).
    pub frozen_image: Tensor,
    /// `[1, d]` text embedding without prompts (t̃).
    pub frozen_text: Tensor,
}

impl PreparedSample {
    /// Runs the prompt-free towers for a single sample.
    pub fn new(backbone: &FrozenBackbone, id: &str, pixels: Vec<f64>, tokens: TokenSeq, label: usize) -> Result<Self> {
        let mut tape = Tape::new();
        let params = backbone.register(&mut tape);
        let cfg = backbone.config();
        let image = encode_image(&mut tape, &params, cfg, &pixels, None)?;
        let text = encode_text(&mut tape, &params, cfg, &tokens, None)?;
        Ok(PreparedSample {
            id: id.to_string(),
            frozen_image: tape.value(image.embedding).clone(),
            frozen_text: tape.value(text.embedding).clone(),
            pixels,
            tokens,
            label,
        })
    }
}

const PREPARE_CHUNK: usize = 64;

/// Tokenizes, normalizes and runs the prompt-free towers over `manifest`.
pub fn prepare_samples(backbone: &FrozenBackbone, vocab: &Vocab, manifest: &Manifest) -> Result<Vec<PreparedSample>> {
    let cfg = backbone.config();
    manifest.check_image_size(cfg.image_size)?;
    let mut out = Vec::with_capacity(manifest.len());
    for chunk in manifest.samples.chunks(PREPARE_CHUNK) {
        let mut tape = Tape::new();
        let params = backbone.register(&mut tape);
        for s in chunk {
            let pixels = s.image.normalized();
            let tokens = vocab.tokenize(&s.text, cfg.max_text_len)?;
            let image = encode_image(&mut tape, &params, cfg, &pixels, None)?;
            let text = encode_text(&mut tape, &params, cfg, &tokens, None)?;
            out.push(PreparedSample {
                id: s.id.clone(),
                frozen_image: tape.value(image.embedding).clone(),
                frozen_text: tape.value(text.embedding).clone(),
                pixels,
                tokens,
                label: s.label as usize,
            });
        }
    }
    Ok(out)
}

/// Supplies the leading tower's prompts: fixed rows at layer 0, then the
/// carried prompt state scaled by the sharing tokens. Records every state so
/// the other tower can follow it.
struct LeadPrompts<'a> {
    first: Var,
    share: &'a [Var],
    len: usize,
    states: Vec<Var>,
}

impl PromptInjector for LeadPrompts<'_> {
    fn prompt_len(&self) -> usize {
        self.len
    }

    fn depth(&self) -> usize {
        self.share.len() + 1
    }

    fn inject(&mut self, tape: &mut Tape, layer: usize, carried: Option<Var>) -> Result<Var> {
        let rows = match (layer, carried) {
            (0, _) => self.first,
            (_, Some(c)) => share_prompts(tape, c, self.share[layer - 1])?,
            (_, None) => return Err(Error::Contract(format!("no carried prompts at layer {layer}"))),
        };
        self.states.push(rows);
        Ok(rows)
    }
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[1, 2]`
    pub logits: Var,
    /// Gate value g.
    pub gate: Var,
    /// Modality weight r.
    pub weight: Var,
    pub image: Encoded,
    pub text: Encoded,
}

/// Plain values read back from a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostics {
    pub logits: [f64; 2],
    pub r: f64,
    pub g: f64,
    pub image_embedding: Vec<f64>,
    pub text_embedding: Vec<f64>,
    /// Per-head final-layer attention of the vision tower.
    pub vision_attention: Vec<Tensor>,
    /// Per-head final-layer attention of the text tower.
    pub text_attention: Vec<Tensor>,
    pub vision_prompt_offset: usize,
    pub text_prompt_offset: usize,
}

impl ForwardOutput {
    pub fn diagnostics(&self, tape: &Tape) -> Diagnostics {
        let l = tape.value(self.logits).data();
        Diagnostics {
            logits: [l[0], l[1]],
            r: tape.value(self.weight).item(),
            g: tape.value(self.gate).item(),
            image_embedding: tape.value(self.image.embedding).data().to_vec(),
            text_embedding: tape.value(self.text.embedding).data().to_vec(),
            vision_attention: self
                .image
                .last_attention
                .iter()
                .map(|&v| tape.value(v).clone())
                .collect(),
            text_attention: self
                .text
                .last_attention
                .iter()
                .map(|&v| tape.value(v).clone())
                .collect(),
            vision_prompt_offset: self.image.prompt_offset,
            text_prompt_offset: self.text.prompt_offset,
        }
    }
}

fn check_layout(bank: &PromptBank<Var>, cfg: &PromptConfig, enc: &EncoderConfig) -> Result<()> {
    if cfg.depth > enc.layers {
        return Err(Error::Depth {
            depth: cfg.depth,
            layers: enc.layers,
        });
    }
    if bank.variant != cfg.variant {
        return Err(Error::Config(format!(
            "prompt bank holds variant {} but the config asks for {}",
            bank.variant, cfg.variant
        )));
    }
    let v = cfg.variant;
    let s = cfg.depth;
    let shares_ok = bank.text_share.len() + 1 == s && (v == Variant::Upt || bank.vision_share.len() + 1 == s);
    let maps_ok = match v {
        Variant::Upt | Variant::Ipt => bank.projections.is_empty(),
        _ => bank.projections.len() == s,
    };
    if !shares_ok || !maps_ok {
        return Err(Error::Config(format!("{v} bank does not match prompt depth {s}")));
    }
    Ok(())
}

/// Full prompted forward pass for one sample, ending in two class logits.
pub fn dmdp_forward(
    tape: &mut Tape,
    backbone: &DualEncoderParams<Var>,
    enc: &EncoderConfig,
    bank: &PromptBank<Var>,
    cfg: &PromptConfig,
    sample: &PreparedSample,
) -> Result<ForwardOutput> {
    check_layout(bank, cfg, enc)?;
    let v = cfg.variant;
    let c = cfg.length;

    let gate = match bank.gate_prior {
        Some(tau) if v.has_gate() => gate_value(tape, tau),
        None if !v.has_gate() => tape.constant(Tensor::scalar(1.0)),
        _ => return Err(Error::Config(format!("{v} bank has an inconsistent gate prior"))),
    };
    let weight = match &bank.weight_mod {
        Some(wm) if v.has_weight_mod() => {
            let i = tape.constant(sample.frozen_image.clone());
            let t = tape.constant(sample.frozen_text.clone());
            modality_weight(tape, wm, i, t)?
        }
        None if !v.has_weight_mod() => tape.constant(Tensor::matrix(1, 1, vec![0.5])?),
        _ => return Err(Error::Config(format!("{v} bank has an inconsistent modality weight"))),
    };
    let (q_text, q_vision) = first_layer_prompts(tape, bank, gate, weight)?;

    let (image, text) = match v {
        Variant::VToT => {
            let mut lead = LeadPrompts {
                first: q_vision,
                share: &bank.vision_share,
                len: c,
                states: Vec::new(),
            };
            let image = encode_image(tape, backbone, enc, &sample.pixels, Some(&mut lead))?;
            let mut rows = vec![q_text];
            for i in 1..cfg.depth {
                let projected = project_prompts(tape, &bank.projections[i], lead.states[i])?;
                rows.push(share_prompts(tape, projected, bank.text_share[i - 1])?);
            }
            let mut follow = FixedPrompts { rows, len: c };
            let text = encode_text(tape, backbone, enc, &sample.tokens, Some(&mut follow))?;
            (image, text)
        }
        Variant::Ipt => {
            let mut lead_t = LeadPrompts {
                first: q_text,
                share: &bank.text_share,
                len: c,
                states: Vec::new(),
            };
            let text = encode_text(tape, backbone, enc, &sample.tokens, Some(&mut lead_t))?;
            let mut lead_v = LeadPrompts {
                first: q_vision,
                share: &bank.vision_share,
                len: c,
                states: Vec::new(),
            };
            let image = encode_image(tape, backbone, enc, &sample.pixels, Some(&mut lead_v))?;
            (image, text)
        }
        _ => {
            let mut lead = LeadPrompts {
                first: q_text,
                share: &bank.text_share,
                len: c,
                states: Vec::new(),
            };
            let text = encode_text(tape, backbone, enc, &sample.tokens, Some(&mut lead))?;
            let mut rows = vec![q_vision];
            for i in 1..cfg.depth {
                if v == Variant::Upt {
                    rows.push(lead.states[i]);
                } else {
                    let projected = project_prompts(tape, &bank.projections[i], lead.states[i])?;
                    rows.push(share_prompts(tape, projected, bank.vision_share[i - 1])?);
                }
            }
            let mut follow = FixedPrompts { rows, len: c };
            let image = encode_image(tape, backbone, enc, &sample.pixels, Some(&mut follow))?;
            (image, text)
        }
    };

    let joint = tape.concat_last_axis(&[image.embedding, text.embedding])?;
    let logits = bank.classifier.forward(tape, joint)?;
    Ok(ForwardOutput {
        logits,
        gate,
        weight,
        image,
        text,
    })
}

/// Stacks per-sample logits into `[batch, 2]`.
pub fn batch_logits(
    tape: &mut Tape,
    backbone: &DualEncoderParams<Var>,
    enc: &EncoderConfig,
    bank: &PromptBank<Var>,
    cfg: &PromptConfig,
    samples: &[&PreparedSample],
) -> Result<Var> {
    if samples.is_empty() {
        return Err(Error::Contract("batch is empty".into()));
    }
    let rows = samples
        .iter()
        .map(|s| dmdp_forward(tape, backbone, enc, bank, cfg, s).map(|o| o.logits))
        .collect::<Result<Vec<_>>>()?;
    if rows.len() == 1 {
        Ok(rows[0])
    } else {
        tape.concat(&rows, 0)
    }
}

/// Mean cross-entropy of a batch.
pub fn batch_loss(
    tape: &mut Tape,
    backbone: &DualEncoderParams<Var>,
    enc: &EncoderConfig,
    bank: &PromptBank<Var>,
    cfg: &PromptConfig,
    samples: &[&PreparedSample],
) -> Result<Var> {
    let logits = batch_logits(tape, backbone, enc, bank, cfg, samples)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    tape.cross_entropy(logits, &labels)
}

/// Inference on a private tape with every tensor held constant.
pub fn infer(
    backbone: &FrozenBackbone,
    bank: &PromptBank,
    cfg: &PromptConfig,
    sample: &PreparedSample,
) -> Result<Diagnostics> {
    let mut tape = Tape::new();
    let params = backbone.register(&mut tape);
    let bank_vars = bank.map(&mut |_, t| tape.constant(t.clone()));
    let out = dmdp_forward(&mut tape, &params, backbone.config(), &bank_vars, cfg, sample)?;
    Ok(out.diagnostics(&tape))
}
