use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::init::{self, SeededRng};

/// Shapes of both encoders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub vocab_size: usize,
    /// Maximum number of text tokens, `<eos>` included.
    pub max_text_len: usize,
    pub vision_width: usize,
    pub text_width: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Extra positional rows beyond the word/patch positions.
    pub pos_reserve: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            vocab_size: 32,
            max_text_len: 8,
            vision_width: 16,
            text_width: 16,
            embed_dim: 8,
            layers: 2,
            heads: 2,
            mlp_ratio: 2,
            pos_reserve: 8,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "encoder.image_size {} must be a positive multiple of encoder.patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0
            || !self.vision_width.is_multiple_of(self.heads)
            || !self.text_width.is_multiple_of(self.heads)
        {
            return fail(format!(
                "encoder.vision_width {} and encoder.text_width {} must be divisible by encoder.heads {}",
                self.vision_width, self.text_width, self.heads
            ));
        }
        for (name, v) in [
            ("encoder.layers", self.layers),
            ("encoder.channels", self.channels),
            ("encoder.embed_dim", self.embed_dim),
            ("encoder.mlp_ratio", self.mlp_ratio),
            ("encoder.max_text_len", self.max_text_len),
            ("encoder.vocab_size", self.vocab_size),
        ] {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        Ok(())
    }

    /// Number of patch tokens `m`.
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Affine map `x·W + b`, `W` stored as `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T = Tensor> {
    pub weight: T,
    pub bias: Option<T>,
}

impl Linear<Tensor> {
    pub fn init(rng: &mut SeededRng, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Linear {
            weight: init::uniform(rng, &[fan_in, fan_out], bound),
            bias: bias.then(|| init::uniform(rng, &[fan_out], bound)),
        }
    }

    pub fn identity(n: usize, bias: bool) -> Self {
        Linear {
            weight: Tensor::identity(n),
            bias: bias.then(|| Tensor::zeros(&[n])),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

impl<T> Linear<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Linear<U> {
        Linear {
            weight: f(&join(prefix, "weight"), &self.weight),
            bias: self.bias.as_ref().map(|b| f(&join(prefix, "bias"), b)),
        }
    }
}

impl Linear<Var> {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        match self.bias {
            Some(b) => tape.add(y, b),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<T = Tensor> {
    pub gamma: T,
    pub beta: T,
}

impl LayerNorm<Tensor> {
    pub fn init(width: usize) -> Self {
        LayerNorm {
            gamma: Tensor::ones(&[width]),
            beta: Tensor::zeros(&[width]),
        }
    }
}

impl<T> LayerNorm<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
    }

    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> LayerNorm<U> {
        LayerNorm {
            gamma: f(&join(prefix, "gamma"), &self.gamma),
            beta: f(&join(prefix, "beta"), &self.beta),
        }
    }
}

impl LayerNorm<Var> {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.layernorm(x, self.gamma, self.beta)
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T = Tensor> {
    pub ln1: LayerNorm<T>,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub out: Linear<T>,
    pub ln2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl Block<Tensor> {
    pub fn init(rng: &mut SeededRng, width: usize, mlp_ratio: usize) -> Self {
        let hidden = width * mlp_ratio;
        Block {
            ln1: LayerNorm::init(width),
            query: Linear::init(rng, width, width, true),
            key: Linear::init(rng, width, width, true),
            value: Linear::init(rng, width, width, true),
            out: Linear::init(rng, width, width, true),
            ln2: LayerNorm::init(width),
            fc1: Linear::init(rng, width, hidden, true),
            fc2: Linear::init(rng, hidden, width, true),
        }
    }
}

impl<T> Block<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.query.visit(&join(prefix, "attn.query"), f);
        self.key.visit(&join(prefix, "attn.key"), f);
        self.value.visit(&join(prefix, "attn.value"), f);
        self.out.visit(&join(prefix, "attn.out"), f);
        self.ln2.visit(&join(prefix, "ln2"), f);
        self.fc1.visit(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit(&join(prefix, "mlp.fc2"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.query.visit_mut(&join(prefix, "attn.query"), f);
        self.key.visit_mut(&join(prefix, "attn.key"), f);
        self.value.visit_mut(&join(prefix, "attn.value"), f);
        self.out.visit_mut(&join(prefix, "attn.out"), f);
        self.ln2.visit_mut(&join(prefix, "ln2"), f);
        self.fc1.visit_mut(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit_mut(&join(prefix, "mlp.fc2"), f);
    }

    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> Block<U> {
        Block {
            ln1: self.ln1.map(&join(prefix, "ln1"), f),
            query: self.query.map(&join(prefix, "attn.query"), f),
            key: self.key.map(&join(prefix, "attn.key"), f),
            value: self.value.map(&join(prefix, "attn.value"), f),
            out: self.out.map(&join(prefix, "attn.out"), f),
            ln2: self.ln2.map(&join(prefix, "ln2"), f),
            fc1: self.fc1.map(&join(prefix, "mlp.fc1"), f),
            fc2: self.fc2.map(&join(prefix, "mlp.fc2"), f),
        }
    }
}

/// Every backbone weight of the image and text towers.
#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoderParams<T = Tensor> {
    pub patch_embed: Linear<T>,
    /// `[m + 1 + reserve, d_v]`
    pub vision_pos: T,
    /// `[1, d_v]`
    pub class_token: T,
    pub vision_layers: Vec<Block<T>>,
    pub vision_ln_post: LayerNorm<T>,
    /// `[d_v, d]`
    pub proj_image: T,
    /// `[vocab, d_t]`
    pub word_embed: T,
    /// `[max_text_len + reserve, d_t]`
    pub text_pos: T,
    pub text_layers: Vec<Block<T>>,
    pub text_ln_final: LayerNorm<T>,
    /// `[d_t, d]`
    pub proj_text: T,
    /// `[1]`; contrastive temperature is `exp(logit_scale)`.
    pub logit_scale: T,
}

pub const POS_STD: f64 = 0.02;

impl DualEncoderParams<Tensor> {
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = init::rng(seed);
        let (dv, dt, d) = (cfg.vision_width, cfg.text_width, cfg.embed_dim);
        let patch_embed = Linear::init(&mut rng, cfg.patch_dim(), dv, true);
        let vision_pos = init::normal(&mut rng, &[cfg.num_patches() + 1 + cfg.pos_reserve, dv], POS_STD);
        let class_token = init::normal(&mut rng, &[1, dv], POS_STD);
        let vision_layers = (0..cfg.layers)
            .map(|_| Block::init(&mut rng, dv, cfg.mlp_ratio))
            .collect();
        let proj_image = Linear::init(&mut rng, dv, d, false).weight;
        let word_embed = init::normal(&mut rng, &[cfg.vocab_size, dt], POS_STD);
        let text_pos = init::normal(&mut rng, &[cfg.max_text_len + cfg.pos_reserve, dt], POS_STD);
        let text_layers = (0..cfg.layers)
            .map(|_| Block::init(&mut rng, dt, cfg.mlp_ratio))
            .collect();
        let proj_text = Linear::init(&mut rng, dt, d, false).weight;
        Ok(DualEncoderParams {
            patch_embed,
            vision_pos,
            class_token,
            vision_layers,
            vision_ln_post: LayerNorm::init(dv),
            proj_image,
            word_embed,
            text_pos,
            text_layers,
            text_ln_final: LayerNorm::init(dt),
            proj_text,
            logit_scale: Tensor::scalar((1.0f64 / 0.07).ln()),
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n, t)));
        out
    }

    /// Places every tensor on `tape`, as trainable leaves or as constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> DualEncoderParams<Var> {
        self.map("", &mut |_, t| tape.leaf(t.clone(), trainable))
    }

    /// Checks tensor shapes against `cfg`.
    pub fn check_shapes(&self, cfg: &EncoderConfig) -> Result<()> {
        let reference = DualEncoderParams::init(cfg, 0)?;
        let ours = self.named_tensors();
        let theirs = reference.named_tensors();
        if ours.len() != theirs.len() {
            return Err(Error::Validation(format!(
                "backbone has {} tensors, configuration expects {}",
                ours.len(),
                theirs.len()
            )));
        }
        for ((n1, t1), (n2, t2)) in ours.iter().zip(&theirs) {
            if n1 != n2 || t1.shape() != t2.shape() {
                return Err(Error::Validation(format!(
                    "backbone tensor {n1} {:?} does not match expected {n2} {:?}",
                    t1.shape(),
                    t2.shape()
                )));
            }
        }
        Ok(())
    }
}

impl<T> DualEncoderParams<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.patch_embed.visit(&join(prefix, "vision.patch_embed"), f);
        f(join(prefix, "vision.pos"), &self.vision_pos);
        f(join(prefix, "vision.class_token"), &self.class_token);
        for (i, b) in self.vision_layers.iter().enumerate() {
            b.visit(&join(prefix, &format!("vision.layers.{i}")), f);
        }
        self.vision_ln_post.visit(&join(prefix, "vision.ln_post"), f);
        f(join(prefix, "vision.proj"), &self.proj_image);
        f(join(prefix, "text.word_embed"), &self.word_embed);
        f(join(prefix, "text.pos"), &self.text_pos);
        for (i, b) in self.text_layers.iter().enumerate() {
            b.visit(&join(prefix, &format!("text.layers.{i}")), f);
        }
        self.text_ln_final.visit(&join(prefix, "text.ln_final"), f);
        f(join(prefix, "text.proj"), &self.proj_text);
        f(join(prefix, "logit_scale"), &self.logit_scale);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut T)) {
        self.patch_embed.visit_mut(&join(prefix, "vision.patch_embed"), f);
        f(join(prefix, "vision.pos"), &mut self.vision_pos);
        f(join(prefix, "vision.class_token"), &mut self.class_token);
        for (i, b) in self.vision_layers.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("vision.layers.{i}")), f);
        }
        self.vision_ln_post.visit_mut(&join(prefix, "vision.ln_post"), f);
        f(join(prefix, "vision.proj"), &mut self.proj_image);
        f(join(prefix, "text.word_embed"), &mut self.word_embed);
        f(join(prefix, "text.pos"), &mut self.text_pos);
        for (i, b) in self.text_layers.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("text.layers.{i}")), f);
        }
        self.text_ln_final.visit_mut(&join(prefix, "text.ln_final"), f);
        f(join(prefix, "text.proj"), &mut self.proj_text);
        f(join(prefix, "logit_scale"), &mut self.logit_scale);
    }

    pub fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> DualEncoderParams<U> {
        DualEncoderParams {
            patch_embed: self.patch_embed.map(&join(prefix, "vision.patch_embed"), f),
            vision_pos: f(&join(prefix, "vision.pos"), &self.vision_pos),
            class_token: f(&join(prefix, "vision.class_token"), &self.class_token),
            vision_layers: self
                .vision_layers
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&join(prefix, &format!("vision.layers.{i}")), f))
                .collect(),
            vision_ln_post: self.vision_ln_post.map(&join(prefix, "vision.ln_post"), f),
            proj_image: f(&join(prefix, "vision.proj"), &self.proj_image),
            word_embed: f(&join(prefix, "text.word_embed"), &self.word_embed),
            text_pos: f(&join(prefix, "text.pos"), &self.text_pos),
            text_layers: self
                .text_layers
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&join(prefix, &format!("text.layers.{i}")), f))
                .collect(),
            text_ln_final: self.text_ln_final.map(&join(prefix, "text.ln_final"), f),
            proj_text: f(&join(prefix, "text.proj"), &self.proj_text),
            logit_scale: f(&join(prefix, "logit_scale"), &self.logit_scale),
        }
    }
}
