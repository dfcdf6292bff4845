//! Corpus formats, tokenizer, synthetic generator and few-shot sampling.

mod manifest;
mod split;
mod synthetic;
mod vocab;

pub use manifest::{load_manifest, save_manifest, ImageGrid, Manifest, ManifestMeta, Sample};
pub use split::{few_shot_sample, FewShotSplit, SplitCounts, SplitDescriptor, SplitPolicy};
pub use synthetic::{
    gen_synthetic, render_image, render_text, synthetic_vocab, Latent, SarcasmCase, SyntheticData, CLAIMS, DISTRACTORS,
};
pub use vocab::{Vocab, EOS, PAD, UNK};

use crate::encoder::{EncoderConfig, PretrainPair};
use crate::error::Result;

/// Tokenizes and normalizes a manifest of congruent pairs; `label` becomes the concept.
pub fn pretrain_pairs(manifest: &Manifest, vocab: &Vocab, cfg: &EncoderConfig) -> Result<Vec<PretrainPair>> {
    manifest.check_image_size(cfg.image_size)?;
    manifest
        .samples
        .iter()
        .map(|s| {
            Ok(PretrainPair {
                pixels: s.image.normalized(),
                tokens: vocab.tokenize(&s.text, cfg.max_text_len)?,
                concept: s.label as usize,
            })
        })
        .collect()
}
