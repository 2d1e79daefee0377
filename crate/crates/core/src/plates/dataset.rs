use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{derive_seed, Rng};

use super::{random_label, render_plate, Manifest, PlateSample, PlateStyle, Record};

const LABEL_KEY: u64 = 0x4C41_4245_4C;
const RENDER_KEY: u64 = 0x5245_4E44;
const SPLIT_KEY: u64 = 0x5350_4C49_54;

/// Names of the three manifests written by [`generate_dataset`].
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub count: usize,
    /// Relative sizes of the train / val / test splits.
    pub split: [u32; 3],
    pub style: PlateStyle,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            count: 1000,
            split: [7, 2, 1],
            style: PlateStyle::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.split.iter().all(|&s| s == 0) {
            return Err(Error::config("plates.split", "at least one split must be non-zero"));
        }
        self.style.validate()
    }

    /// Exact split sizes: floor quotas for train and val, remainder to test.
    pub fn split_sizes(&self) -> [usize; 3] {
        let total: u64 = self.split.iter().map(|&s| s as u64).sum();
        let n = self.count as u64;
        let train = (n * self.split[0] as u64 / total) as usize;
        let val = (n * self.split[1] as u64 / total) as usize;
        [train, val, self.count - train - val]
    }
}

/// Per-split manifests, in [`SPLITS`] order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetSplits {
    pub train: Manifest,
    pub val: Manifest,
    pub test: Manifest,
}

impl DatasetSplits {
    pub fn get(&self, name: &str) -> Option<&Manifest> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

pub fn sample_id(index: usize) -> String {
    format!("p{index:06}")
}

/// Renders sample `index` of a dataset seeded with `seed`.
pub fn dataset_sample(style: &PlateStyle, seed: u64, index: usize) -> Result<PlateSample> {
    let vocab = style.vocab()?;
    let sample_seed = derive_seed(seed, index as u64);
    let mut label_rng = Rng::new(derive_seed(sample_seed, LABEL_KEY));
    let label = random_label(&vocab, style, &mut label_rng);
    let mut s = render_plate(&label, style, derive_seed(sample_seed, RENDER_KEY))?;
    s.id = sample_id(index);
    s.seed = sample_seed;
    Ok(s)
}

/// Split index (0 train, 1 val, 2 test) of every sample, ranked by a seeded
/// hash of the id so the assignment is a pure function of `(count, seed)`.
pub fn assign_splits(config: &DatasetConfig, seed: u64) -> Vec<usize> {
    let mut order: Vec<(u64, usize)> = (0..config.count)
        .map(|i| (derive_seed(seed ^ SPLIT_KEY, i as u64), i))
        .collect();
    order.sort_unstable();
    let [train, val, _] = config.split_sizes();
    let mut out = vec![0; config.count];
    for (rank, &(_, i)) in order.iter().enumerate() {
        out[i] = if rank < train {
            0
        } else if rank < train + val {
            1
        } else {
            2
        };
    }
    out
}

/// Writes `hq/<id>.pgm` for every sample plus `train.jsonl`, `val.jsonl` and
/// `test.jsonl` into `out_dir`. On failure every file created so far is
/// removed.
pub fn generate_dataset(config: &DatasetConfig, seed: u64, out_dir: &Path) -> Result<DatasetSplits> {
    config.validate()?;
    let mut written: Vec<PathBuf> = Vec::new();
    let result = write_dataset(config, seed, out_dir, &mut written);
    if result.is_err() {
        for p in written.iter().rev() {
            let _ = fs::remove_file(p);
        }
    }
    result
}

fn write_dataset(
    config: &DatasetConfig,
    seed: u64,
    out_dir: &Path,
    written: &mut Vec<PathBuf>,
) -> Result<DatasetSplits> {
    let hq_dir = out_dir.join("hq");
    fs::create_dir_all(&hq_dir).map_err(|e| Error::io(&hq_dir, e))?;
    let ext = if config.style.channels == 3 { "ppm" } else { "pgm" };
    let outcomes: Vec<(Option<PathBuf>, Result<Record>)> = (0..config.count)
        .into_par_iter()
        .map(|i| {
            let sample = match dataset_sample(&config.style, seed, i) {
                Ok(s) => s,
                Err(e) => return (None, Err(e)),
            };
            let rel = format!("hq/{}.{ext}", sample.id);
            let path = out_dir.join(&rel);
            match sample.image.write(&path) {
                Ok(()) => (
                    Some(path),
                    Ok(Record {
                        id: sample.id,
                        hq_path: Some(rel),
                        lq_path: None,
                        label: sample.label,
                        boxes: sample.boxes,
                        seed: sample.seed,
                    }),
                ),
                Err(e) => (None, Err(e)),
            }
        })
        .collect();
    let mut records = Vec::with_capacity(outcomes.len());
    let mut first_err = None;
    for (path, rec) in outcomes {
        written.extend(path);
        match rec {
            Ok(r) => records.push(r),
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }
    let assignment = assign_splits(config, seed);
    let mut parts: [Vec<Record>; 3] = Default::default();
    for (rec, &split) in records.into_iter().zip(&assignment) {
        parts[split].push(rec);
    }
    let [train, val, test] = parts.map(|p| Manifest { records: p });
    let splits = DatasetSplits { train, val, test };
    for name in SPLITS {
        let path = out_dir.join(format!("{name}.jsonl"));
        splits.get(name).expect("known split").write(&path)?;
        written.push(path);
    }
    Ok(splits)
}
