//! Synthetic corpus layout: `<root>/<category>/<id>_{partial,gt}.xyz` plus
//! `manifest.txt` with one `category id seed split` line per entry.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::geom::PointCloud;
use crate::pointio::io::{read_xyz, write_xyz};
use crate::pointio::partial::make_partial;
use crate::pointio::shapes::{normalize, sample_surface, ShapeSpec};

pub const CATEGORIES: [&str; 4] = ["box", "sphere", "cylinder", "composite"];
pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub category: String,
    pub id: String,
    pub seed: u64,
    pub split: Split,
}

impl ManifestEntry {
    pub fn partial_path(&self, root: &Path) -> PathBuf {
        root.join(&self.category)
            .join(format!("{}_partial.xyz", self.id))
    }

    pub fn gt_path(&self, root: &Path) -> PathBuf {
        root.join(&self.category)
            .join(format!("{}_gt.xyz", self.id))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{} {} {} {}\n", e.category, e.id, e.seed, e.split))
            .collect()
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let f: Vec<&str> = line.split(' ').collect();
            let [category, id, seed, split] = f.as_slice() else {
                return Err(err(format!(
                    "expected `category id seed split`, found {line:?}"
                )));
            };
            entries.push(ManifestEntry {
                category: category.to_string(),
                id: id.to_string(),
                seed: seed
                    .parse()
                    .map_err(|_| err(format!("invalid seed {seed:?}")))?,
                split: split.parse().map_err(err)?,
            });
        }
        Ok(Manifest { entries })
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&path, &text)
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST);
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))
    }
}

/// Per-entry seeds: category `c` draws from stream `c` of the master seed, so
/// a smaller `count` yields a prefix of a larger one.
pub fn plan(master_seed: u64, count: usize, train_fraction: f64) -> Manifest {
    let n_train = (count as f64 * train_fraction).round() as usize;
    let mut entries = Vec::with_capacity(CATEGORIES.len() * count);
    for (c, category) in CATEGORIES.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream(c as u64);
        for i in 0..count {
            entries.push(ManifestEntry {
                category: category.to_string(),
                id: format!("{i:04}"),
                seed: rng.gen(),
                split: if i < n_train {
                    Split::Train
                } else {
                    Split::Test
                },
            });
        }
    }
    Manifest { entries }
}

/// The complete and partial clouds of one manifest entry.
pub fn generate_entry(entry: &ManifestEntry, cfg: &DataConfig) -> Result<(PointCloud, PointCloud)> {
    let mut rng = ChaCha8Rng::seed_from_u64(entry.seed);
    let spec = ShapeSpec::random(&entry.category, &mut rng)?;
    let gt = normalize(&sample_surface(&spec, cfg.gt_points, rng.gen())?)?;
    let partial = make_partial(&gt, cfg.partial_points, rng.gen())?;
    Ok((partial, gt))
}

/// Writes `count` entries per category under `root`.
pub fn generate(root: &Path, cfg: &DataConfig, master_seed: u64, count: usize) -> Result<Manifest> {
    if count == 0 {
        return Err(Error::contract(
            "dataset needs at least one entry per category",
        ));
    }
    let manifest = plan(master_seed, count, cfg.train_fraction);
    for category in CATEGORIES {
        let dir = root.join(category);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for entry in &manifest.entries {
        let (partial, gt) = generate_entry(entry, cfg)?;
        write_xyz(entry.partial_path(root), &partial)?;
        write_xyz(entry.gt_path(root), &gt)?;
    }
    manifest.write(root)?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEntry {
    pub category: String,
    pub id: String,
    pub split: Split,
    pub partial: PointCloud,
    pub gt: PointCloud,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub entries: Vec<DatasetEntry>,
}

impl Dataset {
    /// Loads every entry listed in the manifest.
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = Manifest::read(root)?;
        let entries = manifest
            .entries
            .iter()
            .map(|e| {
                Ok(DatasetEntry {
                    category: e.category.clone(),
                    id: e.id.clone(),
                    split: e.split,
                    partial: read_xyz(e.partial_path(root))?,
                    gt: read_xyz(e.gt_path(root))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { entries })
    }

    pub fn split(&self, split: Split) -> Vec<&DatasetEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Category names in first-appearance order.
    pub fn categories(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.category.as_str()) {
                out.push(&e.category);
            }
        }
        out
    }
}
