use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Disjoint id lists for one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub schema_version: u32,
    pub ratio: f64,
    pub seed: u64,
    pub labeled_ids: Vec<String>,
    pub unlabeled_ids: Vec<String>,
    #[serde(default)]
    pub val_ids: Vec<String>,
    #[serde(default)]
    pub test_ids: Vec<String>,
}

impl SplitManifest {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Parse {
                what: "split manifest".into(),
                message: format!("schema_version {} is not supported (expected {MANIFEST_SCHEMA_VERSION})", self.schema_version),
            });
        }
        let mut seen = HashSet::new();
        for id in self.labeled_ids.iter().chain(&self.unlabeled_ids).chain(&self.val_ids).chain(&self.test_ids) {
            if !seen.insert(id) {
                return Err(Error::InvalidArgument(format!("id {id} appears in more than one split")));
            }
        }
        if self.labeled_ids.is_empty() {
            return Err(Error::InvalidArgument("manifest has no labeled samples".into()));
        }
        Ok(())
    }

    pub fn train_ids(&self) -> Vec<String> {
        self.labeled_ids.iter().chain(&self.unlabeled_ids).cloned().collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse { what: "split manifest".into(), message: e.to_string() })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text).map_err(|e| Error::Parse { what: "split manifest".into(), message: e.to_string() })?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!("labeled ratio must lie in (0, 1), got {ratio}")));
    }
    Ok(())
}

fn split_train(mut train: Vec<String>, ratio: f64, rng: &mut ChaCha8Rng) -> Result<(Vec<String>, Vec<String>)> {
    train.shuffle(rng);
    let n_lab = (ratio * train.len() as f64).round() as usize;
    if n_lab == 0 {
        return Err(Error::InvalidArgument(format!("ratio {ratio} of {} samples leaves no labeled sample", train.len())));
    }
    let unlabeled = train.split_off(n_lab.min(train.len()));
    Ok((train, unlabeled))
}

/// Labeled/unlabeled partition of `train_ids`: `round(ratio * n)` ids drawn
/// uniformly without replacement.
pub fn make_split(train_ids: &[String], ratio: f64, seed: u64) -> Result<SplitManifest> {
    make_split_with_holdout(train_ids, ratio, 0.0, 0.0, seed)
}

/// As `make_split`, after first holding out `round(val_frac * n)` ids for
/// validation and `round(test_frac * n)` for testing.
pub fn make_split_with_holdout(ids: &[String], ratio: f64, val_frac: f64, test_frac: f64, seed: u64) -> Result<SplitManifest> {
    check_ratio(ratio)?;
    if !(0.0..1.0).contains(&val_frac) || !(0.0..1.0).contains(&test_frac) || val_frac + test_frac >= 1.0 {
        return Err(Error::InvalidArgument(format!("holdout fractions {val_frac} + {test_frac} must leave training data")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all = ids.to_vec();
    all.shuffle(&mut rng);
    let n = all.len();
    let n_test = (test_frac * n as f64).round() as usize;
    let n_val = (val_frac * n as f64).round() as usize;
    let test_ids: Vec<String> = all.drain(..n_test).collect();
    let val_ids: Vec<String> = all.drain(..n_val.min(all.len())).collect();
    let (labeled_ids, unlabeled_ids) = split_train(all, ratio, &mut rng)?;
    let m = SplitManifest { schema_version: MANIFEST_SCHEMA_VERSION, ratio, seed, labeled_ids, unlabeled_ids, val_ids, test_ids };
    m.validate()?;
    Ok(m)
}

/// Predefined `train.txt`, `val.txt` and `test.txt` lists (one id per
/// line) found in a dataset root.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IndexLists {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl IndexLists {
    pub fn into_manifest(self, ratio: f64, seed: u64) -> Result<SplitManifest> {
        check_ratio(ratio)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (labeled_ids, unlabeled_ids) = split_train(self.train, ratio, &mut rng)?;
        let m = SplitManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            ratio,
            seed,
            labeled_ids,
            unlabeled_ids,
            val_ids: self.val,
            test_ids: self.test,
        };
        m.validate()?;
        Ok(m)
    }
}

fn read_list(path: &Path) -> Result<Vec<String>> {
    Ok(std::fs::read_to_string(path)?
        .lines()
        .map(|l| l.trim())
        .filter(|l| !l.is_empty())
        .map(|l| Path::new(l).file_stem().and_then(|s| s.to_str()).unwrap_or(l).to_string())
        .collect())
}

/// Reads the index lists under `root`, or `None` when `train.txt` is absent.
pub fn read_index_lists(root: &Path) -> Result<Option<IndexLists>> {
    let train = root.join("train.txt");
    if !train.is_file() {
        return Ok(None);
    }
    let opt = |name: &str| -> Result<Vec<String>> {
        let p = root.join(name);
        if p.is_file() { read_list(&p) } else { Ok(Vec::new()) }
    };
    Ok(Some(IndexLists { train: read_list(&train)?, val: opt("val.txt")?, test: opt("test.txt")? }))
}
