use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use dmdp::analysis::{
    ablation_suite, cross_dataset_eval, extract_prompt_attention, sweep, to_pgm, Modality, PreparedSplit, RunPlan,
    SweepAxis,
};
use dmdp::checkpoint::{file_digest, Checkpoint};
use dmdp::data::{
    few_shot_sample, gen_synthetic, load_manifest, pretrain_pairs, save_manifest, synthetic_vocab, FewShotSplit,
    Manifest, SarcasmCase, Vocab,
};
use dmdp::encoder::{concept_retrieval_at_1, contrastive_pretrain, DualEncoderParams, FrozenBackbone};
use dmdp::prompts::{prepare_samples, PromptBank};
use dmdp::training::{evaluate, train};

use crate::config::{ExperimentConfig, Pairing};
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn vocab(cfg: &ExperimentConfig) -> Result<Vocab> {
    match &cfg.data.vocab {
        Some(p) => Ok(Vocab::from_text(&fs::read_to_string(p)?)?),
        None => Ok(synthetic_vocab()),
    }
}

fn pool(cfg: &ExperimentConfig) -> Result<Manifest> {
    match &cfg.data.manifest {
        Some(p) => Ok(load_manifest(p)?),
        None => {
            let e = &cfg.encoder;
            Ok(gen_synthetic(cfg.data.case, cfg.data.n, cfg.data.seed, e.image_size, e.max_text_len)?.manifest)
        }
    }
}

fn split_with_seed(cfg: &ExperimentConfig, pool: &Manifest, seed: u64) -> Result<FewShotSplit> {
    if let Some(dir) = &cfg.data.split_dir {
        return Ok(FewShotSplit::load(dir)?);
    }
    let valid = cfg.data.valid_manifest.as_deref().map(load_manifest).transpose()?;
    let test = cfg.data.test_manifest.as_deref().map(load_manifest).transpose()?;
    Ok(few_shot_sample(
        pool,
        cfg.data.split,
        seed,
        valid.as_ref(),
        test.as_ref(),
    )?)
}

fn backbone_path(out: &Path) -> PathBuf {
    out.join("backbone.ckpt")
}

fn bank_path(out: &Path) -> PathBuf {
    out.join("bank.ckpt")
}

/// The frozen backbone for training-type commands.
fn backbone(cfg: &ExperimentConfig, out: &Path) -> Result<FrozenBackbone> {
    let params = if cfg.pretrain.random_backbone {
        DualEncoderParams::init(&cfg.encoder, cfg.pretrain.seed)?
    } else {
        let path = backbone_path(out);
        if !path.exists() {
            return Err(CliError::Runtime(format!(
                "{} not found; run `dmdp pretrain` first or set pretrain.random_backbone=true",
                path.display()
            )));
        }
        Checkpoint::load(&path)?.backbone(&cfg.encoder)?
    };
    Ok(FrozenBackbone::freeze(params, cfg.encoder.clone())?)
}

/// Backbone and bank from `bank.ckpt`.
fn trained(cfg: &ExperimentConfig, out: &Path) -> Result<(FrozenBackbone, PromptBank)> {
    let path = bank_path(out);
    if !path.exists() {
        return Err(CliError::Runtime(format!(
            "{} not found; run `dmdp train` first",
            path.display()
        )));
    }
    let ck = Checkpoint::load(&path)?;
    let bb = FrozenBackbone::freeze(ck.backbone(&cfg.encoder)?, cfg.encoder.clone())?;
    let bank = ck.bank(&cfg.prompt, &cfg.encoder)?;
    Ok((bb, bank))
}

fn write_meta(cfg: &ExperimentConfig, out: &Path, command: &str, backbone: Option<&FrozenBackbone>) -> Result<()> {
    let mut files = BTreeMap::new();
    for name in ["backbone.ckpt", "bank.ckpt"] {
        let p = out.join(name);
        if p.exists() {
            files.insert(name.to_string(), file_digest(&p)?);
        }
    }
    let meta = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.train.seed,
        "config": cfg,
        "backbone_fingerprint": backbone.map(|b| b.fingerprint().to_string()),
        "checkpoints": files,
    });
    write_json(&out.join("run_meta.json"), &meta)
}

fn prepared_splits(cfg: &ExperimentConfig, bb: &FrozenBackbone) -> Result<(Vec<PreparedSplit>, RunPlan)> {
    let pool = pool(cfg)?;
    let vocab = vocab(cfg)?;
    let seeds = &cfg.experiment.seeds;
    let (splits, plan) = match cfg.experiment.pairing {
        Pairing::Paired => (
            seeds
                .iter()
                .map(|&s| split_with_seed(cfg, &pool, s))
                .collect::<Result<Vec<_>>>()?,
            RunPlan::paired(seeds),
        ),
        Pairing::Cross => (
            vec![split_with_seed(cfg, &pool, cfg.data.split_seed)?],
            RunPlan::cross(1, seeds),
        ),
    };
    let prepared = splits
        .iter()
        .map(|s| PreparedSplit::new(bb, &vocab, s))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((prepared, plan))
}

pub fn gen(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let e = &cfg.encoder;
    let data = gen_synthetic(cfg.data.case, cfg.data.n, cfg.data.seed, e.image_size, e.max_text_len)?;
    save_manifest(&data.manifest, &out.join("manifest.jsonl"))?;
    save_manifest(&data.pretrain_pairs, &out.join("pretrain_pairs.jsonl"))?;
    fs::write(out.join("vocab.txt"), synthetic_vocab().to_text())?;
    write_meta(cfg, out, "gen", None)
}

pub fn pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let e = &cfg.encoder;
    let pairs_manifest = match &cfg.pretrain.manifest {
        Some(p) => load_manifest(p)?,
        None => {
            gen_synthetic(
                SarcasmCase::Incongruity,
                cfg.pretrain.pairs,
                cfg.pretrain.pair_seed,
                e.image_size,
                e.max_text_len,
            )?
            .pretrain_pairs
        }
    };
    let pairs = pretrain_pairs(&pairs_manifest, &vocab(cfg)?, e)?;
    let init = DualEncoderParams::init(e, cfg.pretrain.seed)?;
    let outcome = contrastive_pretrain(init, e, &pairs, &cfg.pretrain.options())?;
    let retrieval = concept_retrieval_at_1(&outcome.params, e, &pairs)?;
    Checkpoint::from_model(&outcome.params, None).save(&backbone_path(out))?;
    write_json(
        &out.join("pretrain.json"),
        &json!({ "loss_curve": outcome.loss_curve, "retrieval_at_1": retrieval }),
    )?;
    let bb = FrozenBackbone::freeze(outcome.params, e.clone())?;
    write_meta(cfg, out, "pretrain", Some(&bb))
}

pub fn split(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let s = split_with_seed(cfg, &pool(cfg)?, cfg.data.split_seed)?;
    s.save(&out.join("split"))?;
    write_meta(cfg, out, "split", None)
}

pub fn train_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let bb = backbone(cfg, out)?;
    let s = split_with_seed(cfg, &pool(cfg)?, cfg.data.split_seed)?;
    let vocab = vocab(cfg)?;
    let tr = prepare_samples(&bb, &vocab, &s.train)?;
    let va = prepare_samples(&bb, &vocab, &s.valid)?;
    let bank = PromptBank::init(&cfg.prompt, bb.config(), cfg.train.seed)?;
    let outcome = train(&bb, bank, &cfg.prompt, &cfg.train, &tr, &va)?;
    Checkpoint::from_model(bb.params(), Some(&outcome.best)).save(&bank_path(out))?;
    write_json(&out.join("history.json"), &outcome.history)?;
    write_meta(cfg, out, "train", Some(&bb))
}

pub fn eval(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let (bb, bank) = trained(cfg, out)?;
    let s = split_with_seed(cfg, &pool(cfg)?, cfg.data.split_seed)?;
    let vocab = vocab(cfg)?;
    let test = prepare_samples(&bb, &vocab, &s.test)?;
    let metrics = evaluate(&bb, &bank, &cfg.prompt, &test)?;
    let targets = cfg
        .data
        .targets
        .iter()
        .map(|p| load_manifest(p))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let cross = cross_dataset_eval(&bb, &bank, &cfg.prompt, &vocab, &targets)?;
    write_json(&out.join("metrics.json"), &json!({ "test": metrics, "targets": cross }))?;
    write_meta(cfg, out, "eval", Some(&bb))
}

pub fn ablate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let bb = backbone(cfg, out)?;
    let (splits, plan) = prepared_splits(cfg, &bb)?;
    let table = ablation_suite(&bb, &splits, &plan, &cfg.prompt, &cfg.train)?;
    write_json(&out.join("ablation.json"), &table)?;
    write_meta(cfg, out, "ablate", Some(&bb))
}

pub fn sweep_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let bb = backbone(cfg, out)?;
    let (splits, plan) = prepared_splits(cfg, &bb)?;
    let depths = if cfg.experiment.depths.is_empty() {
        (1..=cfg.encoder.layers).collect()
    } else {
        cfg.experiment.depths.clone()
    };
    let d = sweep(&bb, SweepAxis::Depth, &depths, &splits, &plan, &cfg.prompt, &cfg.train)?;
    fs::write(out.join("sweep_depth.csv"), d.to_csv())?;
    let l = sweep(
        &bb,
        SweepAxis::Length,
        &cfg.experiment.lengths,
        &splits,
        &plan,
        &cfg.prompt,
        &cfg.train,
    )?;
    fs::write(out.join("sweep_length.csv"), l.to_csv())?;
    write_meta(cfg, out, "sweep", Some(&bb))
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn attn(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let (bb, bank) = trained(cfg, out)?;
    let s = split_with_seed(cfg, &pool(cfg)?, cfg.data.split_seed)?;
    let vocab = vocab(cfg)?;
    let n = cfg.experiment.attn_samples.min(s.test.len());
    let test = prepare_samples(
        &bb,
        &vocab,
        &Manifest::new(&s.test.meta.name, s.test.samples[..n].to_vec())?,
    )?;
    let dir = out.join("attn");
    fs::create_dir_all(&dir)?;
    let side = cfg.encoder.image_size / cfg.encoder.patch_size;
    let mut heads: Vec<Option<usize>> = vec![None];
    if cfg.experiment.per_head {
        heads.extend((0..cfg.encoder.heads).map(Some));
    }
    let mut all = BTreeMap::new();
    for sample in &test {
        let mut maps = Vec::new();
        for &h in &heads {
            for m in extract_prompt_attention(&bb, &bank, &cfg.prompt, &vocab, sample, h)? {
                let modality = match m.modality {
                    Modality::Text => "text",
                    Modality::Vision => "vision",
                };
                let suffix = h.map(|h| format!("_h{h}")).unwrap_or_default();
                let name = format!("{}_{modality}_p{}{suffix}.pgm", file_stem(&sample.id), m.prompt_index);
                fs::write(dir.join(name), to_pgm(&m, side))?;
                maps.push(m);
            }
        }
        all.insert(sample.id.clone(), maps);
    }
    write_json(&dir.join("maps.json"), &all)?;
    write_meta(cfg, out, "attn", Some(&bb))
}
