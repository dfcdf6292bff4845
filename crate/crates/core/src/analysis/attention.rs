use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::Vocab;
use crate::encoder::FrozenBackbone;
use crate::error::{Error, Result};
use crate::prompts::{infer, PreparedSample, PromptBank, PromptConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Vision,
}

/// One attended position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionTarget {
    pub label: String,
    pub weight: f64,
    /// Set for prompt and class positions, which are reported but are not
    /// words or patches.
    pub flagged: bool,
}

/// Last-layer attention of one prompt token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub modality: Modality,
    pub prompt_index: usize,
    pub layer: usize,
    /// `None` when heads are averaged.
    pub head: Option<usize>,
    /// The prompt's own attention row over every position; sums to 1.
    pub targets: Vec<AttentionTarget>,
    /// Attention each word or patch pays to this prompt. In the causal text
    /// tower a prompt cannot look at later words, so this column is the
    /// informative part of a text map.
    pub incoming: Vec<AttentionTarget>,
}

impl AttentionMap {
    pub fn row_sum(&self) -> f64 {
        self.targets.iter().map(|t| t.weight).sum()
    }
}

fn select_heads(heads: &[Tensor], head: Option<usize>) -> Result<Tensor> {
    match head {
        Some(h) => heads
            .get(h)
            .cloned()
            .ok_or_else(|| Error::Config(format!("head {h} out of range for {} heads", heads.len()))),
        None => {
            let n = heads.len() as f64;
            let mut avg = Tensor::zeros(heads[0].shape());
            for t in heads {
                for (a, v) in avg.data_mut().iter_mut().zip(t.data()) {
                    *a += v;
                }
            }
            Ok(avg.map(|v| v / n))
        }
    }
}

/// One tower's attention matrix with its token labels.
struct Tower<'a> {
    modality: Modality,
    attn: &'a Tensor,
    labels: &'a [(String, bool)],
    /// Rows whose attention to the prompt is reported as `incoming`.
    incoming_rows: &'a [usize],
    first_prompt_row: usize,
}

fn build_map(tower: &Tower, prompt_index: usize, layer: usize, head: Option<usize>) -> AttentionMap {
    let Tower {
        modality,
        attn,
        labels,
        incoming_rows,
        first_prompt_row,
    } = *tower;
    let row = first_prompt_row + prompt_index;
    let targets = labels
        .iter()
        .enumerate()
        .map(|(j, (label, flagged))| AttentionTarget {
            label: label.clone(),
            weight: attn.at(row, j),
            flagged: *flagged,
        })
        .collect();
    let incoming = incoming_rows
        .iter()
        .map(|&i| AttentionTarget {
            label: labels[i].0.clone(),
            weight: attn.at(i, row),
            flagged: labels[i].1,
        })
        .collect();
    AttentionMap {
        modality,
        prompt_index,
        layer,
        head,
        targets,
        incoming,
    }
}

/// Attention maps of every text and vision prompt token at the last layer
/// of each tower: `c` text maps followed by `c` vision maps. `head` selects
/// a single head; `None` averages them.
pub fn extract_prompt_attention(
    backbone: &FrozenBackbone,
    bank: &PromptBank,
    cfg: &PromptConfig,
    vocab: &Vocab,
    sample: &PreparedSample,
    head: Option<usize>,
) -> Result<Vec<AttentionMap>> {
    let d = infer(backbone, bank, cfg, sample)?;
    let enc = backbone.config();
    let layer = enc.layers - 1;
    let c = cfg.length;
    let mut maps = Vec::with_capacity(2 * c);

    let text = select_heads(&d.text_attention, head)?;
    let mut labels: Vec<(String, bool)> = (0..c).map(|k| (format!("prompt{k}"), true)).collect();
    for &id in &sample.tokens.ids {
        labels.push((vocab.token(id).unwrap_or(crate::data::UNK).to_string(), false));
    }
    let words: Vec<usize> = (c..=c + sample.tokens.eos_index).collect();
    for k in 0..c {
        let tower = Tower {
            modality: Modality::Text,
            attn: &text,
            labels: &labels,
            incoming_rows: &words,
            first_prompt_row: d.text_prompt_offset,
        };
        maps.push(build_map(&tower, k, layer, head));
    }

    let vision = select_heads(&d.vision_attention, head)?;
    let side = enc.image_size / enc.patch_size;
    let mut labels = vec![("class".to_string(), true)];
    for p in 0..enc.num_patches() {
        labels.push((format!("patch({},{})", p / side, p % side), false));
    }
    for k in 0..c {
        labels.push((format!("prompt{k}"), true));
    }
    let patches: Vec<usize> = (1..=enc.num_patches()).collect();
    for k in 0..c {
        let tower = Tower {
            modality: Modality::Vision,
            attn: &vision,
            labels: &labels,
            incoming_rows: &patches,
            first_prompt_row: d.vision_prompt_offset,
        };
        maps.push(build_map(&tower, k, layer, head));
    }
    Ok(maps)
}

/// Plain (P2) graymap of a map's word or patch weights, one pixel per
/// position, scaled so the largest weight is 255. Vision maps use the
/// prompt's row laid out on the patch grid; text maps use the incoming
/// attention of each word, as a single row.
pub fn to_pgm(map: &AttentionMap, grid_side: usize) -> String {
    let (values, width, height): (Vec<f64>, usize, usize) = match map.modality {
        Modality::Vision => {
            let v: Vec<f64> = map.targets.iter().filter(|t| !t.flagged).map(|t| t.weight).collect();
            (v, grid_side, grid_side)
        }
        Modality::Text => {
            let v: Vec<f64> = map.incoming.iter().map(|t| t.weight).collect();
            let n = v.len();
            (v, n, 1)
        }
    };
    let max = values.iter().cloned().fold(0.0, f64::max);
    let mut out = format!("P2\n{width} {height}\n255\n");
    for r in 0..height {
        let row: Vec<String> = values[r * width..(r + 1) * width]
            .iter()
            .map(|&v| if max > 0.0 { (255.0 * v / max).round() as u32 } else { 0 }.to_string())
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// A parsed plain graymap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graymap {
    pub width: usize,
    pub height: usize,
    pub max_value: u32,
    pub pixels: Vec<u32>,
}

/// Parses a P2 graymap, allowing `#` comments.
pub fn parse_pgm(text: &str) -> Result<Graymap> {
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    let bad = |m: &str| Error::Validation(format!("invalid P2 graymap: {m}"));
    if tokens.next() != Some("P2") {
        return Err(bad("missing P2 magic"));
    }
    let mut num = |what: &str| -> Result<u32> {
        tokens
            .next()
            .ok_or_else(|| bad(&format!("missing {what}")))?
            .parse::<u32>()
            .map_err(|_| bad(&format!("non-numeric {what}")))
    };
    let width = num("width")? as usize;
    let height = num("height")? as usize;
    let max_value = num("maximum value")?;
    if width == 0 || height == 0 || max_value == 0 || max_value > 65535 {
        return Err(bad("dimensions and maximum value must be positive"));
    }
    let mut pixels = Vec::with_capacity(width * height);
    for _ in 0..width * height {
        let p = num("pixel")?;
        if p > max_value {
            return Err(bad("pixel exceeds maximum value"));
        }
        pixels.push(p);
    }
    if tokens.next().is_some() {
        return Err(bad("trailing data"));
    }
    Ok(Graymap {
        width,
        height,
        max_value,
        pixels,
    })
}
