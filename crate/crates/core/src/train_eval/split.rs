use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{io_err, Result, TrainEvalError};
use crate::scene::{load_records, save_records, LinkRecord, SplitName};

/// How links are divided into training and evaluation sets.
///
/// Scenes are assigned to `areas` disjoint areas. Two areas are held out
/// entirely (novel maps); links of the remaining areas are split at random
/// into train / test / validation fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub areas: usize,
    pub novel_test_area: usize,
    pub novel_val_area: usize,
    /// Fractions of known-area links for (train, test, val).
    pub known_fractions: [f64; 3],
}

impl Default for SplitPlan {
    fn default() -> Self {
        SplitPlan {
            areas: 4,
            novel_test_area: 0,
            novel_val_area: 1,
            known_fractions: [0.16, 0.80, 0.04],
        }
    }
}

impl SplitPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainEvalError::Plan(m));
        if self.areas < 3 {
            return bad(format!("need at least 3 areas, got {}", self.areas));
        }
        if self.novel_test_area >= self.areas || self.novel_val_area >= self.areas {
            return bad("novel area id out of range".into());
        }
        if self.novel_test_area == self.novel_val_area {
            return bad("novel test and val areas must differ".into());
        }
        let f = self.known_fractions;
        if f.iter().any(|v| !(0.0..=1.0).contains(v)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return bad(format!("fractions {f:?} must lie in [0, 1] and sum to 1"));
        }
        Ok(())
    }
}

/// Assign each distinct scene id to an area, round-robin over sorted ids.
pub fn assign_areas(records: &[LinkRecord], areas: usize) -> BTreeMap<String, usize> {
    let ids: BTreeSet<&str> = records.iter().map(|r| r.scene_id.as_str()).collect();
    ids.into_iter()
        .enumerate()
        .map(|(i, id)| (id.to_string(), i % areas))
        .collect()
}

/// Records of all five splits plus the area map that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub sets: BTreeMap<SplitName, Vec<LinkRecord>>,
    pub areas: BTreeMap<String, usize>,
}

impl Splits {
    pub fn get(&self, name: SplitName) -> &[LinkRecord] {
        self.sets.get(&name).map_or(&[], |v| v.as_slice())
    }
}

#[derive(Serialize, Deserialize)]
struct SplitMeta {
    plan: SplitPlan,
    seed: u64,
    areas: BTreeMap<String, usize>,
    counts: BTreeMap<String, usize>,
}

/// Deterministic split of `records` under `plan`. Links in known areas are
/// shuffled with `seed` and cut at the rounded fractions; each split keeps
/// the input order of its links.
pub fn make_splits(records: &[LinkRecord], plan: &SplitPlan, seed: u64) -> Result<Splits> {
    plan.validate()?;
    let areas = assign_areas(records, plan.areas);
    for a in 0..plan.areas {
        if !areas.values().any(|&v| v == a) {
            return Err(TrainEvalError::EmptyArea(a));
        }
    }
    let mut known = Vec::new();
    let mut sets: BTreeMap<SplitName, Vec<usize>> =
        SplitName::ALL.iter().map(|&n| (n, Vec::new())).collect();
    for (i, r) in records.iter().enumerate() {
        let a = areas[&r.scene_id];
        if a == plan.novel_test_area {
            sets.get_mut(&SplitName::TestNovel).unwrap().push(i);
        } else if a == plan.novel_val_area {
            sets.get_mut(&SplitName::ValNovel).unwrap().push(i);
        } else {
            known.push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    known.shuffle(&mut rng);
    let n = known.len();
    let n_train = (plan.known_fractions[0] * n as f64).round() as usize;
    let n_val = ((plan.known_fractions[2] * n as f64).round() as usize).min(n - n_train);
    let (train, rest) = known.split_at(n_train);
    let (val, test) = rest.split_at(n_val);
    for (name, part) in [
        (SplitName::Train, train),
        (SplitName::ValKnown, val),
        (SplitName::TestKnown, test),
    ] {
        let mut v = part.to_vec();
        v.sort_unstable();
        sets.insert(name, v);
    }
    Ok(Splits {
        sets: sets
            .into_iter()
            .map(|(k, idx)| (k, idx.into_iter().map(|i| records[i].clone()).collect()))
            .collect(),
        areas,
    })
}

/// Write `<name>.jsonl` for every split plus `split_meta.json`.
pub fn save_splits(
    splits: &Splits,
    plan: &SplitPlan,
    seed: u64,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for name in SplitName::ALL {
        save_records(
            splits.get(name),
            dir.join(format!("{}.jsonl", name.as_str())),
        )?;
    }
    let meta = SplitMeta {
        plan: plan.clone(),
        seed,
        areas: splits.areas.clone(),
        counts: SplitName::ALL
            .iter()
            .map(|n| (n.as_str().to_string(), splits.get(*n).len()))
            .collect(),
    };
    let path = dir.join("split_meta.json");
    let text = serde_json::to_string_pretty(&meta).expect("split meta serializes") + "\n";
    fs::write(&path, text).map_err(io_err(path))
}

pub fn load_splits(dir: impl AsRef<Path>) -> Result<Splits> {
    let dir = dir.as_ref();
    let mut sets = BTreeMap::new();
    for name in SplitName::ALL {
        sets.insert(
            name,
            load_records(dir.join(format!("{}.jsonl", name.as_str())))?,
        );
    }
    let path = dir.join("split_meta.json");
    let areas = match fs::read_to_string(&path) {
        Ok(text) => {
            serde_json::from_str::<SplitMeta>(&text)
                .map_err(|e| TrainEvalError::Parse {
                    path: path.clone(),
                    line: e.line(),
                    msg: e.to_string(),
                })?
                .areas
        }
        Err(_) => BTreeMap::new(),
    };
    Ok(Splits { sets, areas })
}
