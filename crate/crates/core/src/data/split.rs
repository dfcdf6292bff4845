use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::manifest::{load_manifest, save_manifest, Manifest, Sample};
use crate::error::{Error, Result};
use crate::init;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitPolicy {
    /// `floor(fraction · |pool| / 2)` samples per class.
    Percent { fraction: f64 },
    /// Exactly `k` samples per class.
    KShot { k: usize },
}

impl SplitPolicy {
    pub fn per_class(&self, pool_len: usize) -> usize {
        match *self {
            SplitPolicy::Percent { fraction } => (fraction * pool_len as f64 / 2.0).floor() as usize,
            SplitPolicy::KShot { k } => k,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: BTreeMap<String, usize>,
    pub valid: BTreeMap<String, usize>,
    pub test: BTreeMap<String, usize>,
}

/// Persisted summary of a split, enough to tell two splits apart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitDescriptor {
    pub policy: SplitPolicy,
    pub seed: u64,
    pub counts: SplitCounts,
    /// SHA-256 over the ordered train, valid and test ids.
    pub ids_digest: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FewShotSplit {
    pub train: Manifest,
    pub valid: Manifest,
    pub test: Manifest,
    pub seed: u64,
    pub policy: SplitPolicy,
}

fn counts_of(m: &Manifest) -> BTreeMap<String, usize> {
    let c = m.class_counts();
    BTreeMap::from([("0".to_string(), c[0]), ("1".to_string(), c[1])])
}

fn by_class(samples: &[Sample]) -> [Vec<usize>; 2] {
    let mut out = [Vec::new(), Vec::new()];
    for (i, s) in samples.iter().enumerate() {
        out[s.label as usize].push(i);
    }
    out
}

fn take(samples: &[Sample], idx: &[usize]) -> Vec<Sample> {
    idx.iter().map(|&i| samples[i].clone()).collect()
}

/// Draws class-balanced train and validation sets from `pool`.
///
/// Validation is drawn from `valid_pool` when given, otherwise disjointly from
/// `pool`. The test set is `test` when given, otherwise every pool sample not
/// drawn for training or validation.
pub fn few_shot_sample(
    pool: &Manifest,
    policy: SplitPolicy,
    seed: u64,
    valid_pool: Option<&Manifest>,
    test: Option<&Manifest>,
) -> Result<FewShotSplit> {
    let per_class = policy.per_class(pool.len());
    if per_class == 0 {
        return Err(Error::Config(format!(
            "split policy {policy:?} selects no samples from a pool of {}",
            pool.len()
        )));
    }
    let mut rng = init::sub_rng(seed, 31);
    let mut classes = by_class(&pool.samples);
    for c in classes.iter_mut() {
        c.shuffle(&mut rng);
    }
    let need_from_pool = if valid_pool.is_some() { per_class } else { 2 * per_class };
    for (class, members) in classes.iter().enumerate() {
        if members.len() < need_from_pool {
            return Err(Error::Sampling {
                class: class as u8,
                needed: need_from_pool,
                available: members.len(),
            });
        }
    }
    let mut train_idx = Vec::with_capacity(2 * per_class);
    let mut valid_idx = Vec::with_capacity(2 * per_class);
    for members in &classes {
        train_idx.extend_from_slice(&members[..per_class]);
        if valid_pool.is_none() {
            valid_idx.extend_from_slice(&members[per_class..2 * per_class]);
        }
    }
    train_idx.sort_unstable();
    valid_idx.sort_unstable();

    let valid_samples = match valid_pool {
        Some(vp) => {
            let mut vclasses = by_class(&vp.samples);
            let mut vidx = Vec::with_capacity(2 * per_class);
            for (class, members) in vclasses.iter_mut().enumerate() {
                if members.len() < per_class {
                    return Err(Error::Sampling {
                        class: class as u8,
                        needed: per_class,
                        available: members.len(),
                    });
                }
                members.shuffle(&mut rng);
                vidx.extend_from_slice(&members[..per_class]);
            }
            vidx.sort_unstable();
            take(&vp.samples, &vidx)
        }
        None => take(&pool.samples, &valid_idx),
    };

    let test = match test {
        Some(t) => t.clone(),
        None => {
            let mut used = vec![false; pool.len()];
            for &i in train_idx.iter().chain(&valid_idx) {
                used[i] = true;
            }
            let rest: Vec<Sample> = pool
                .samples
                .iter()
                .zip(&used)
                .filter(|(_, &u)| !u)
                .map(|(s, _)| s.clone())
                .collect();
            Manifest::new(&format!("{}-test", pool.meta.name), rest)?
        }
    };
    Ok(FewShotSplit {
        train: Manifest::new(&format!("{}-train", pool.meta.name), take(&pool.samples, &train_idx))?,
        valid: Manifest::new(&format!("{}-valid", pool.meta.name), valid_samples)?,
        test,
        seed,
        policy,
    })
}

impl FewShotSplit {
    pub fn descriptor(&self) -> SplitDescriptor {
        let mut h = Sha256::new();
        for (tag, m) in [("train", &self.train), ("valid", &self.valid), ("test", &self.test)] {
            h.update(tag.as_bytes());
            for s in &m.samples {
                h.update(s.id.as_bytes());
                h.update([0u8]);
            }
        }
        SplitDescriptor {
            policy: self.policy,
            seed: self.seed,
            counts: SplitCounts {
                train: counts_of(&self.train),
                valid: counts_of(&self.valid),
                test: counts_of(&self.test),
            },
            ids_digest: h.finalize().iter().map(|b| format!("{b:02x}")).collect(),
        }
    }

    /// Writes `train.jsonl`, `valid.jsonl`, `test.jsonl` and `split.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_manifest(&self.train, &dir.join("train.jsonl"))?;
        save_manifest(&self.valid, &dir.join("valid.jsonl"))?;
        save_manifest(&self.test, &dir.join("test.jsonl"))?;
        let mut json = serde_json::to_string_pretty(&self.descriptor())?;
        json.push('\n');
        fs::write(dir.join("split.json"), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let desc: SplitDescriptor = serde_json::from_str(&fs::read_to_string(dir.join("split.json"))?)?;
        let split = FewShotSplit {
            train: load_manifest(&dir.join("train.jsonl"))?,
            valid: load_manifest(&dir.join("valid.jsonl"))?,
            test: load_manifest(&dir.join("test.jsonl"))?,
            seed: desc.seed,
            policy: desc.policy,
        };
        if split.descriptor().ids_digest != desc.ids_digest {
            return Err(Error::Validation(format!(
                "split in {} does not match its descriptor",
                dir.display()
            )));
        }
        Ok(split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::ImageGrid;
    use std::collections::HashSet;

    fn pool(pos: usize, neg: usize) -> Manifest {
        let img = ImageGrid::new(1, 1, vec![0]).unwrap();
        let samples = (0..pos + neg)
            .map(|i| Sample {
                id: format!("s{i}"),
                image: img.clone(),
                text: String::new(),
                label: u8::from(i < pos),
            })
            .collect();
        Manifest::new("pool", samples).unwrap()
    }

    #[test]
    fn k_shot_counts_and_disjointness() {
        let p = pool(40, 60);
        let s = few_shot_sample(&p, SplitPolicy::KShot { k: 5 }, 3, None, None).unwrap();
        assert_eq!(s.train.class_counts(), [5, 5]);
        assert_eq!(s.valid.class_counts(), [5, 5]);
        assert_eq!(s.test.len(), 80);
        let train: HashSet<_> = s.train.samples.iter().map(|x| &x.id).collect();
        assert!(s.valid.samples.iter().all(|x| !train.contains(&x.id)));
        assert!(s.test.samples.iter().all(|x| !train.contains(&x.id)));
    }

    #[test]
    fn insufficient_class_names_the_class() {
        let p = pool(3, 50);
        match few_shot_sample(&p, SplitPolicy::KShot { k: 2 }, 0, None, None) {
            Err(Error::Sampling {
                class: 1,
                needed: 4,
                available: 3,
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn same_seed_same_descriptor() {
        let p = pool(30, 30);
        let a = few_shot_sample(&p, SplitPolicy::KShot { k: 4 }, 9, None, None).unwrap();
        let b = few_shot_sample(&p, SplitPolicy::KShot { k: 4 }, 9, None, None).unwrap();
        let c = few_shot_sample(&p, SplitPolicy::KShot { k: 4 }, 10, None, None).unwrap();
        assert_eq!(a.descriptor(), b.descriptor());
        assert_ne!(a.descriptor().ids_digest, c.descriptor().ids_digest);
    }

    #[test]
    fn save_and_load_split() {
        let dir = tempfile::tempdir().unwrap();
        let p = pool(20, 20);
        let s = few_shot_sample(&p, SplitPolicy::Percent { fraction: 0.2 }, 1, None, None).unwrap();
        s.save(dir.path()).unwrap();
        let back = FewShotSplit::load(dir.path()).unwrap();
        assert_eq!(back.descriptor(), s.descriptor());
        let json = fs::read_to_string(dir.path().join("split.json")).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["policy"]["kind"], "percent");
        assert_eq!(v["counts"]["train"]["1"], 4);
    }
}
