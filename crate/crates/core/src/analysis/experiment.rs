use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data::{FewShotSplit, Manifest, SplitDescriptor, Vocab};
use crate::encoder::FrozenBackbone;
use crate::error::{Error, Result};
use crate::prompts::{prepare_samples, PreparedSample, PromptBank, PromptConfig, Variant};
use crate::training::{aggregate_runs, evaluate, train, Metrics, RunRecord, RunReport, TrainConfig};

/// A few-shot split with every sample run through the prompt-free towers.
#[derive(Clone, Debug)]
pub struct PreparedSplit {
    pub descriptor: SplitDescriptor,
    pub train: Vec<PreparedSample>,
    pub valid: Vec<PreparedSample>,
    pub test: Vec<PreparedSample>,
}

impl PreparedSplit {
    pub fn new(backbone: &FrozenBackbone, vocab: &Vocab, split: &FewShotSplit) -> Result<Self> {
        Ok(PreparedSplit {
            descriptor: split.descriptor(),
            train: prepare_samples(backbone, vocab, &split.train)?,
            valid: prepare_samples(backbone, vocab, &split.valid)?,
            test: prepare_samples(backbone, vocab, &split.test)?,
        })
    }
}

/// Which (split, seed) pairs make up one aggregate.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunPlan {
    pub cells: Vec<(usize, u64)>,
}

impl RunPlan {
    /// Every seed on every split.
    pub fn cross(n_splits: usize, seeds: &[u64]) -> Self {
        RunPlan {
            cells: (0..n_splits)
                .flat_map(|s| seeds.iter().map(move |&seed| (s, seed)))
                .collect(),
        }
    }

    /// Split `i` with `seeds[i]`.
    pub fn paired(seeds: &[u64]) -> Self {
        RunPlan {
            cells: seeds.iter().enumerate().map(|(i, &s)| (i, s)).collect(),
        }
    }

    fn check(&self, splits: &[PreparedSplit]) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::Config("run plan is empty".into()));
        }
        match self.cells.iter().find(|(s, _)| *s >= splits.len()) {
            Some((s, _)) => Err(Error::Config(format!(
                "run plan refers to split {s} of {}",
                splits.len()
            ))),
            None => Ok(()),
        }
    }
}

/// Maps `f` over `items` on scoped worker threads; results come back in
/// input order regardless of completion order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(items.len().max(1));
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect()
}

/// Trains a fresh bank (initialized and shuffled with `seed`) and scores the
/// best-on-validation bank on the split's test set.
pub fn run_cell(
    backbone: &FrozenBackbone,
    prompt: &PromptConfig,
    train_cfg: &TrainConfig,
    split: &PreparedSplit,
    split_index: usize,
    seed: u64,
) -> Result<RunRecord> {
    let bank = PromptBank::init(prompt, backbone.config(), seed)?;
    let cfg = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    let out = train(backbone, bank, prompt, &cfg, &split.train, &split.valid)?;
    let m = evaluate(backbone, &out.best, prompt, &split.test)?;
    Ok(RunRecord {
        seed,
        split: split_index as u64,
        acc: m.accuracy,
        macro_f1: m.macro_f1,
    })
}

struct Job<'a> {
    prompt: &'a PromptConfig,
    split: usize,
    seed: u64,
}

/// Runs every (config, plan cell) pair, in parallel, and aggregates per config.
fn run_grid(
    backbone: &FrozenBackbone,
    prompts: &[PromptConfig],
    train_cfg: &TrainConfig,
    splits: &[PreparedSplit],
    plan: &RunPlan,
) -> Result<Vec<Result<RunReport>>> {
    plan.check(splits)?;
    let jobs: Vec<Job> = prompts
        .iter()
        .flat_map(|p| {
            plan.cells
                .iter()
                .map(move |&(split, seed)| Job { prompt: p, split, seed })
        })
        .collect();
    let results = parallel_map(&jobs, |j| {
        run_cell(backbone, j.prompt, train_cfg, &splits[j.split], j.split, j.seed)
    });
    let per = plan.cells.len();
    let mut out = Vec::with_capacity(prompts.len());
    let mut it = results.into_iter();
    for _ in prompts {
        let runs: Result<Vec<RunRecord>> = it.by_ref().take(per).collect();
        out.push(runs.and_then(aggregate_runs));
    }
    Ok(out)
}

/// Trains and scores a single configuration over the plan.
pub fn run_protocol(
    backbone: &FrozenBackbone,
    prompt: &PromptConfig,
    train_cfg: &TrainConfig,
    splits: &[PreparedSplit],
    plan: &RunPlan,
) -> Result<RunReport> {
    run_grid(backbone, std::slice::from_ref(prompt), train_cfg, splits, plan)?
        .pop()
        .expect("one config")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: Option<RunReport>,
    /// Why the row failed, if it did.
    pub error: Option<String>,
    /// Descriptors of the splits this row was trained and scored on.
    pub splits: Vec<SplitDescriptor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub plan: RunPlan,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }
}

/// All six variants on identical splits and seeds, one row each. A failing
/// variant is recorded in its row and does not abort the others.
pub fn ablation_suite(
    backbone: &FrozenBackbone,
    splits: &[PreparedSplit],
    plan: &RunPlan,
    base: &PromptConfig,
    train_cfg: &TrainConfig,
) -> Result<AblationTable> {
    let seeds: std::collections::BTreeSet<u64> = plan.cells.iter().map(|c| c.1).collect();
    if seeds.len() < 2 {
        return Err(Error::Config("an ablation needs at least 2 seeds".into()));
    }
    let prompts: Vec<PromptConfig> = Variant::ALL
        .iter()
        .map(|&variant| PromptConfig {
            variant,
            ..base.clone()
        })
        .collect();
    let reports = run_grid(backbone, &prompts, train_cfg, splits, plan)?;
    let descriptors: Vec<SplitDescriptor> = splits.iter().map(|s| s.descriptor.clone()).collect();
    let rows = Variant::ALL
        .iter()
        .zip(reports)
        .map(|(&variant, r)| {
            let (report, error) = match r {
                Ok(rep) => (Some(rep), None),
                Err(e) => (None, Some(e.to_string())),
            };
            AblationRow {
                variant,
                report,
                error,
                splits: descriptors.clone(),
            }
        })
        .collect();
    Ok(AblationTable {
        plan: plan.clone(),
        rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Depth,
    Length,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub values: Vec<(usize, RunReport)>,
}

pub const SWEEP_CSV_HEADER: &str = "setting,acc_mean,acc_std,f1_mean,f1_std";

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(SWEEP_CSV_HEADER);
        out.push('\n');
        for (setting, r) in &self.values {
            out.push_str(&format!(
                "{setting},{:.6},{:.6},{:.6},{:.6}\n",
                r.mean.acc, r.std.acc, r.mean.macro_f1, r.std.macro_f1
            ));
        }
        out
    }
}

/// Trains the base config at each setting of `axis`. Settings must be
/// strictly increasing; depths must lie in `1..=layers`, lengths be ≥ 1.
pub fn sweep(
    backbone: &FrozenBackbone,
    axis: SweepAxis,
    settings: &[usize],
    splits: &[PreparedSplit],
    plan: &RunPlan,
    base: &PromptConfig,
    train_cfg: &TrainConfig,
) -> Result<SweepResult> {
    if settings.is_empty() || settings.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "sweep settings {settings:?} must be non-empty and strictly increasing"
        )));
    }
    let layers = backbone.config().layers;
    let prompts = settings
        .iter()
        .map(|&v| {
            let p = match axis {
                SweepAxis::Depth => PromptConfig {
                    depth: v,
                    ..base.clone()
                },
                SweepAxis::Length => PromptConfig {
                    length: v,
                    ..base.clone()
                },
            };
            if axis == SweepAxis::Depth && (v == 0 || v > layers) {
                return Err(Error::Depth { depth: v, layers });
            }
            p.validate(backbone.config())?;
            Ok(p)
        })
        .collect::<Result<Vec<_>>>()?;
    let reports = run_grid(backbone, &prompts, train_cfg, splits, plan)?;
    let values = settings
        .iter()
        .zip(reports)
        .map(|(&s, r)| r.map(|rep| (s, rep)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { axis, values })
}

/// Scores a trained bank on other corpora without further training,
/// keyed by manifest name.
pub fn cross_dataset_eval(
    backbone: &FrozenBackbone,
    bank: &PromptBank,
    prompt: &PromptConfig,
    vocab: &Vocab,
    targets: &[Manifest],
) -> Result<BTreeMap<String, Metrics>> {
    bank.check(prompt, backbone.config())
        .map_err(|e| Error::Validation(format!("bank does not fit the backbone: {e}")))?;
    let mut out = BTreeMap::new();
    for m in targets {
        let samples = prepare_samples(backbone, vocab, m)?;
        let metrics = evaluate(backbone, bank, prompt, &samples)?;
        if out.insert(m.meta.name.clone(), metrics).is_some() {
            return Err(Error::Validation(format!(
                "duplicate target manifest name `{}`",
                m.meta.name
            )));
        }
    }
    Ok(out)
}
