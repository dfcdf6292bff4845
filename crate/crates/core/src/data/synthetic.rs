//! Synthetic image-text sarcasm corpus.
//!
//! Every sample carries a binary visual class `a` (a dark scene crossed by a
//! bright horizontal bar, or a bright scene crossed by a dark vertical bar) and
//! a binary textual class `b` (a keyword drawn from one of two disjoint claim
//! sets, mixed with distractor words). The label depends on the case:
//!
//! * incongruity: `y = a XOR b`, sarcastic exactly when the modalities disagree;
//! * image-driven: `y = a`, the text is noise;
//! * text-driven: `y = b`, the image is noise.

use std::fmt;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::manifest::{ImageGrid, Manifest, Sample};
use super::vocab::{Vocab, EOS, PAD, UNK};
use crate::error::{Error, Result};
use crate::init::{self, SeededRng};

pub const CLAIMS: [[&str; 6]; 2] = [
    ["love", "great", "wonderful", "lovely", "perfect", "best"],
    ["hate", "awful", "terrible", "horrible", "worst", "ugly"],
];

pub const DISTRACTORS: [&str; 12] = [
    "the", "day", "weather", "today", "is", "so", "this", "my", "just", "really", "morning", "view",
];

/// Vocabulary covering the generator's words.
pub fn synthetic_vocab() -> Vocab {
    let mut tokens: Vec<String> = [PAD, UNK, EOS].iter().map(|s| s.to_string()).collect();
    tokens.extend(CLAIMS.iter().flatten().map(|s| s.to_string()));
    tokens.extend(DISTRACTORS.iter().map(|s| s.to_string()));
    Vocab::new(tokens).expect("synthetic vocabulary is well formed")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SarcasmCase {
    Incongruity,
    ImageDriven,
    TextDriven,
    /// Equal thirds of the three cases, assigned round-robin.
    Mixed,
}

impl SarcasmCase {
    pub fn from_index(i: u64) -> Result<Self> {
        match i {
            1 => Ok(SarcasmCase::Incongruity),
            2 => Ok(SarcasmCase::ImageDriven),
            3 => Ok(SarcasmCase::TextDriven),
            _ => Err(Error::Config(format!(
                "data.case must be 1, 2, 3 or \"mixed\", got {i}"
            ))),
        }
    }

    pub fn label(self, visual: u8, textual: u8) -> u8 {
        match self {
            SarcasmCase::Incongruity => visual ^ textual,
            SarcasmCase::ImageDriven => visual,
            SarcasmCase::TextDriven => textual,
            SarcasmCase::Mixed => unreachable!("mixed corpora label per underlying case"),
        }
    }

    fn for_sample(self, idx: usize) -> SarcasmCase {
        match self {
            SarcasmCase::Mixed => [
                SarcasmCase::Incongruity,
                SarcasmCase::ImageDriven,
                SarcasmCase::TextDriven,
            ][idx % 3],
            c => c,
        }
    }

    fn index(self) -> u8 {
        match self {
            SarcasmCase::Incongruity => 1,
            SarcasmCase::ImageDriven => 2,
            SarcasmCase::TextDriven => 3,
            SarcasmCase::Mixed => 0,
        }
    }
}

impl fmt::Display for SarcasmCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SarcasmCase::Mixed => write!(f, "mixed"),
            c => write!(f, "{}", c.index()),
        }
    }
}

impl Serialize for SarcasmCase {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            SarcasmCase::Mixed => s.serialize_str("mixed"),
            c => s.serialize_u64(c.index() as u64),
        }
    }
}

impl<'de> Deserialize<'de> for SarcasmCase {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        match &v {
            serde_json::Value::Number(n) if n.as_u64().is_some() => {
                SarcasmCase::from_index(n.as_u64().unwrap()).map_err(serde::de::Error::custom)
            }
            serde_json::Value::String(s) if s == "mixed" => Ok(SarcasmCase::Mixed),
            serde_json::Value::String(s) => s
                .parse::<u64>()
                .map_err(|_| serde::de::Error::custom(format!("unknown case `{s}`")))
                .and_then(|i| SarcasmCase::from_index(i).map_err(serde::de::Error::custom)),
            other => Err(serde::de::Error::custom(format!("unknown case {other}"))),
        }
    }
}

/// Hidden generative factors of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Latent {
    pub case: SarcasmCase,
    pub visual: u8,
    pub textual: u8,
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub manifest: Manifest,
    pub latents: Vec<Latent>,
    /// Congruent pairs (visual class == textual class); `label` holds the shared class.
    pub pretrain_pairs: Manifest,
}

pub fn render_image(rng: &mut SeededRng, class: u8, size: usize) -> ImageGrid {
    let noise = Normal::new(0.0, 18.0).expect("finite noise");
    let (background, bar) = if class == 0 { (70.0, 210.0) } else { (185.0, 45.0) };
    let thickness = (size / 4).max(1);
    let offset = rng.random_range(0..=size - thickness);
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let on_bar = if class == 0 {
                (offset..offset + thickness).contains(&y)
            } else {
                (offset..offset + thickness).contains(&x)
            };
            let base = if on_bar { bar } else { background };
            let v: f64 = base + noise.sample(rng);
            pixels.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    ImageGrid::new(size, size, pixels).expect("square image")
}

pub fn render_text(rng: &mut SeededRng, class: u8, max_text_len: usize) -> String {
    let max_words = max_text_len.saturating_sub(1).max(1);
    let n_words = rng.random_range(max_words.min(3)..=max_words);
    let n_claims = if n_words >= 3 { rng.random_range(1..=2) } else { 1 };
    let mut words: Vec<&str> = (0..n_claims)
        .map(|_| *CLAIMS[class as usize].choose(rng).expect("non-empty claims"))
        .collect();
    while words.len() < n_words {
        words.push(DISTRACTORS.choose(rng).expect("non-empty distractors"));
    }
    words.shuffle(rng);
    words.join(" ")
}

/// Generates `n_samples` labelled samples plus as many congruent pretraining pairs.
pub fn gen_synthetic(
    case: SarcasmCase,
    n_samples: usize,
    seed: u64,
    image_size: usize,
    max_text_len: usize,
) -> Result<SyntheticData> {
    if n_samples < 4 {
        return Err(Error::Config(format!(
            "synthetic corpus needs at least 4 samples, got {n_samples}"
        )));
    }
    let mut rng = init::sub_rng(seed, 21);
    let mut samples = Vec::with_capacity(n_samples);
    let mut latents = Vec::with_capacity(n_samples);
    for idx in 0..n_samples {
        let sample_case = case.for_sample(idx);
        let visual: u8 = rng.random_range(0..=1);
        let textual: u8 = rng.random_range(0..=1);
        let image = render_image(&mut rng, visual, image_size);
        let text = render_text(&mut rng, textual, max_text_len);
        samples.push(Sample {
            id: format!("case{case}-s{seed}-{idx:05}"),
            image,
            text,
            label: sample_case.label(visual, textual),
        });
        latents.push(Latent {
            case: sample_case,
            visual,
            textual,
        });
    }
    let mut pair_rng = init::sub_rng(seed, 22);
    let pairs = (0..n_samples)
        .map(|idx| {
            let class: u8 = pair_rng.random_range(0..=1);
            Sample {
                id: format!("pair-s{seed}-{idx:05}"),
                image: render_image(&mut pair_rng, class, image_size),
                text: render_text(&mut pair_rng, class, max_text_len),
                label: class,
            }
        })
        .collect();
    Ok(SyntheticData {
        manifest: Manifest::new(&format!("synthetic-case{case}-seed{seed}"), samples)?,
        latents,
        pretrain_pairs: Manifest::new(&format!("pretrain-pairs-seed{seed}"), pairs)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn incongruity_is_xor_and_symmetric() {
        let c = SarcasmCase::Incongruity;
        assert_eq!(c.label(1, 1), 0);
        assert_eq!(c.label(0, 0), 0);
        for a in 0..2 {
            for b in 0..2 {
                assert_eq!(c.label(a, b), c.label(b, a));
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = gen_synthetic(SarcasmCase::Incongruity, 16, 5, 8, 8).unwrap();
        let b = gen_synthetic(SarcasmCase::Incongruity, 16, 5, 8, 8).unwrap();
        assert_eq!(a.manifest.to_jsonl(), b.manifest.to_jsonl());
        assert_eq!(a.pretrain_pairs.to_jsonl(), b.pretrain_pairs.to_jsonl());
        let c = gen_synthetic(SarcasmCase::Incongruity, 16, 6, 8, 8).unwrap();
        assert_ne!(a.manifest.to_jsonl(), c.manifest.to_jsonl());
    }

    #[test]
    fn texts_fit_and_use_known_words() {
        let v = synthetic_vocab();
        let d = gen_synthetic(SarcasmCase::TextDriven, 50, 1, 8, 6).unwrap();
        for (s, l) in d.manifest.samples.iter().zip(&d.latents) {
            let t = v.tokenize(&s.text, 6).unwrap();
            assert!(!t.ids.contains(&v.unk_id()));
            assert!(s.text.split(' ').any(|w| CLAIMS[l.textual as usize].contains(&w)));
            assert!(!s.text.split(' ').any(|w| CLAIMS[1 - l.textual as usize].contains(&w)));
        }
    }

    #[test]
    fn mixed_assigns_cases_round_robin() {
        let d = gen_synthetic(SarcasmCase::Mixed, 9, 2, 8, 8).unwrap();
        let cases: Vec<u8> = d.latents.iter().map(|l| l.case.index()).collect();
        assert_eq!(cases, vec![1, 2, 3, 1, 2, 3, 1, 2, 3]);
    }

    #[test]
    fn case_serde() {
        let c: SarcasmCase = serde_json::from_str("\"mixed\"").unwrap();
        assert_eq!(c, SarcasmCase::Mixed);
        let c: SarcasmCase = serde_json::from_str("2").unwrap();
        assert_eq!(c, SarcasmCase::ImageDriven);
        assert_eq!(serde_json::to_string(&SarcasmCase::TextDriven).unwrap(), "3");
        assert!(serde_json::from_str::<SarcasmCase>("4").is_err());
    }
}
