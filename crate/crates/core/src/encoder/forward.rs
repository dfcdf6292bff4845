use super::params::{Block, DualEncoderParams, EncoderConfig};
use crate::autodiff::{causal_mask, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Token ids of one text, padded to a fixed length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    /// Position of `<eos>`, the last non-pad token.
    pub eos_index: usize,
}

/// Supplies prompt rows to an encoder, one call per injection layer.
///
/// Before layer `layer < depth()` the encoder asks for the rows that occupy the
/// prompt positions. `carried` holds the previous layer's output at those
/// positions (`None` before the first layer). Returned rows replace the
/// carried ones; layers at or beyond `depth()` process the prompt rows like
/// ordinary tokens.
pub trait PromptInjector {
    fn prompt_len(&self) -> usize;
    fn depth(&self) -> usize;
    fn inject(&mut self, tape: &mut Tape, layer: usize, carried: Option<Var>) -> Result<Var>;
}

/// Pre-computed rows per injection layer.
pub struct FixedPrompts {
    pub rows: Vec<Var>,
    pub len: usize,
}

impl PromptInjector for FixedPrompts {
    fn prompt_len(&self) -> usize {
        self.len
    }

    fn depth(&self) -> usize {
        self.rows.len()
    }

    fn inject(&mut self, _tape: &mut Tape, layer: usize, _carried: Option<Var>) -> Result<Var> {
        Ok(self.rows[layer])
    }
}

/// Output of one encoder pass.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[1, d]` projected embedding.
    pub embedding: Var,
    /// Token states after every layer, `[seq, width]` each.
    pub layer_trace: Vec<Var>,
    /// Per-head attention probabilities of the final layer, `[seq, seq]` each.
    pub last_attention: Vec<Var>,
    /// First prompt position in the sequence.
    pub prompt_offset: usize,
    pub prompt_len: usize,
    pub seq_len: usize,
}

fn block_forward(
    tape: &mut Tape,
    block: &Block<Var>,
    x: Var,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<(Var, Vec<Var>)> {
    let width = tape.value(x).cols();
    let head_dim = width / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let h = block.ln1.forward(tape, x)?;
    let q = block.query.forward(tape, h)?;
    let k = block.key.forward(tape, h)?;
    let v = block.value.forward(tape, h)?;
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for hd in 0..heads {
        let qh = tape.slice_cols(q, hd * head_dim, head_dim)?;
        let kh = tape.slice_cols(k, hd * head_dim, head_dim)?;
        let vh = tape.slice_cols(v, hd * head_dim, head_dim)?;
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.mul_const(scores, scale);
        let p = tape.softmax_masked(scores, mask)?;
        outs.push(tape.matmul(p, vh)?);
        probs.push(p);
    }
    let merged = if heads == 1 {
        outs[0]
    } else {
        tape.concat_last_axis(&outs)?
    };
    let attn = block.out.forward(tape, merged)?;
    let x = tape.add(x, attn)?;

    let h = block.ln2.forward(tape, x)?;
    let h = block.fc1.forward(tape, h)?;
    let h = tape.gelu(h);
    let h = block.fc2.forward(tape, h)?;
    let x = tape.add(x, h)?;
    Ok((x, probs))
}

fn check_depth(injector: &Option<&mut dyn PromptInjector>, layers: usize) -> Result<usize> {
    match injector {
        Some(inj) => {
            if inj.depth() > layers {
                return Err(Error::Depth {
                    depth: inj.depth(),
                    layers,
                });
            }
            if inj.depth() == 0 || inj.prompt_len() == 0 {
                return Err(Error::Config("prompt plan needs depth and length of at least 1".into()));
            }
            Ok(inj.prompt_len())
        }
        None => Ok(0),
    }
}

fn check_prompt_rows(tape: &Tape, rows: Var, len: usize, width: usize) -> Result<()> {
    if tape.value(rows).dims2() != (len, width) {
        return Err(Error::shape("prompt_injection", tape.shape(rows), &[len, width]));
    }
    Ok(())
}

/// Splits a channel-major pixel buffer into flattened patches `[m, p·p·ch]`.
pub fn patchify(cfg: &EncoderConfig, pixels: &[f64]) -> Result<Tensor> {
    let s = cfg.image_size;
    let p = cfg.patch_size;
    if pixels.len() != cfg.channels * s * s {
        return Err(Error::Contract(format!(
            "image has {} values, expected {} ({}x{}x{})",
            pixels.len(),
            cfg.channels * s * s,
            cfg.channels,
            s,
            s
        )));
    }
    let side = s / p;
    let mut data = Vec::with_capacity(pixels.len());
    for pr in 0..side {
        for pc in 0..side {
            for ch in 0..cfg.channels {
                for y in 0..p {
                    for x in 0..p {
                        data.push(pixels[ch * s * s + (pr * p + y) * s + pc * p + x]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![side * side, cfg.patch_dim()], data)
}

/// Vision tower. Token order is `[class, patches…, prompts…]`; the embedding
/// is read from the class token after the last layer.
pub fn encode_image(
    tape: &mut Tape,
    params: &DualEncoderParams<Var>,
    cfg: &EncoderConfig,
    pixels: &[f64],
    mut prompts: Option<&mut dyn PromptInjector>,
) -> Result<Encoded> {
    let layers = params.vision_layers.len();
    let c = check_depth(&prompts, layers)?;
    let m = cfg.num_patches();
    let width = cfg.vision_width;

    let patches = tape.constant(patchify(cfg, pixels)?);
    let emb = params.patch_embed.forward(tape, patches)?;
    let pos = tape.slice_rows(params.vision_pos, 0, m + 1)?;
    let tokens = tape.concat(&[params.class_token, emb], 0)?;
    let mut x = tape.add(tokens, pos)?;

    let mut trace = Vec::with_capacity(layers);
    let mut last_attention = Vec::new();
    for (i, block) in params.vision_layers.iter().enumerate() {
        if let Some(inj) = prompts.as_deref_mut() {
            if i < inj.depth() {
                let carried = if i == 0 {
                    None
                } else {
                    Some(tape.slice_rows(x, m + 1, c)?)
                };
                let rows = inj.inject(tape, i, carried)?;
                check_prompt_rows(tape, rows, c, width)?;
                let base = if i == 0 { x } else { tape.slice_rows(x, 0, m + 1)? };
                x = tape.concat(&[base, rows], 0)?;
            }
        }
        let (y, probs) = block_forward(tape, block, x, cfg.heads, None)?;
        x = y;
        trace.push(x);
        last_attention = probs;
    }
    let cls = tape.slice_rows(x, 0, 1)?;
    let cls = params.vision_ln_post.forward(tape, cls)?;
    let embedding = tape.matmul(cls, params.proj_image)?;
    Ok(Encoded {
        embedding,
        layer_trace: trace,
        last_attention,
        prompt_offset: m + 1,
        prompt_len: c,
        seq_len: m + 1 + c,
    })
}

/// Text tower with causal attention. Token order is `[prompts…, words…]`; the
/// embedding is read at the `<eos>` position after the last layer.
pub fn encode_text(
    tape: &mut Tape,
    params: &DualEncoderParams<Var>,
    cfg: &EncoderConfig,
    tokens: &TokenSeq,
    mut prompts: Option<&mut dyn PromptInjector>,
) -> Result<Encoded> {
    let layers = params.text_layers.len();
    let c = check_depth(&prompts, layers)?;
    let n = tokens.ids.len();
    if n == 0 || n > cfg.max_text_len {
        return Err(Error::Contract(format!(
            "token sequence of length {n} must be within 1..={}",
            cfg.max_text_len
        )));
    }
    if tokens.eos_index >= n {
        return Err(Error::Contract(format!(
            "eos_index {} out of range for {n} tokens",
            tokens.eos_index
        )));
    }
    let width = cfg.text_width;
    let words = tape.embedding(params.word_embed, &tokens.ids)?;
    let pos = tape.slice_rows(params.text_pos, 0, n)?;
    let mut x = tape.add(words, pos)?;
    let mask = causal_mask(n + c);

    let mut trace = Vec::with_capacity(layers);
    let mut last_attention = Vec::new();
    for (i, block) in params.text_layers.iter().enumerate() {
        if let Some(inj) = prompts.as_deref_mut() {
            if i < inj.depth() {
                let carried = if i == 0 { None } else { Some(tape.slice_rows(x, 0, c)?) };
                let rows = inj.inject(tape, i, carried)?;
                check_prompt_rows(tape, rows, c, width)?;
                let rest = if i == 0 { x } else { tape.slice_rows(x, c, n)? };
                x = tape.concat(&[rows, rest], 0)?;
            }
        }
        let (y, probs) = block_forward(tape, block, x, cfg.heads, Some(&mask))?;
        x = y;
        trace.push(x);
        last_attention = probs;
    }
    let eos = tape.slice_rows(x, c + tokens.eos_index, 1)?;
    let eos = params.text_ln_final.forward(tape, eos)?;
    let embedding = tape.matmul(eos, params.proj_text)?;
    Ok(Encoded {
        embedding,
        layer_trace: trace,
        last_attention,
        prompt_offset: 0,
        prompt_len: c,
        seq_len: n + c,
    })
}
