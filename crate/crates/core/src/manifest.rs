//! Train/validation manifests over a folder of PPM images.
//!
//! A manifest is line-oriented text: `key=value` header lines (`root`,
//! `seed`, `split`), then one relative path per line, sorted, UTF-8 with LF
//! endings. The split itself comes from a deterministic shuffle of the
//! sorted file list under the manifest seed, 10:4 train:validation.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{read_ppm, ImageRGB};
use crate::rng::derive_seed;

const SPLIT_TAG: u64 = 0x73706c6974; // "split"

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
        }
    }

    pub fn manifest_name(&self) -> &'static str {
        match self {
            Split::Train => "train.manifest",
            Split::Validation => "validation.manifest",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub seed: u64,
    entries: Vec<String>,
}

impl DatasetManifest {
    /// Builds a manifest from an explicit entry list; entries are stored
    /// sorted and must be unique.
    pub fn new(
        root: impl Into<PathBuf>,
        split: Split,
        seed: u64,
        mut entries: Vec<String>,
    ) -> Result<DatasetManifest> {
        entries.sort();
        if entries.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::contract("manifest entries must be unique"));
        }
        Ok(DatasetManifest {
            root: root.into(),
            split,
            seed,
            entries,
        })
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn image_path(&self, index: usize) -> PathBuf {
        self.root.join(&self.entries[index])
    }

    pub fn load_image(&self, index: usize) -> Result<ImageRGB> {
        read_ppm(&self.image_path(index))
    }

    pub fn load_images(&self) -> Result<Vec<ImageRGB>> {
        (0..self.len()).map(|i| self.load_image(i)).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("root={}\n", self.root.display()));
        s.push_str(&format!("seed={}\n", self.seed));
        s.push_str(&format!("split={}\n", self.split.as_str()));
        for e in &self.entries {
            s.push_str(e);
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Parses manifest text. A relative `root` is resolved against
    /// `base_dir` (normally the directory holding the manifest file).
    pub fn parse(text: &str, base_dir: &Path) -> Result<DatasetManifest> {
        let mut root: Option<PathBuf> = None;
        let mut seed: Option<u64> = None;
        let mut split: Option<Split> = None;
        let mut entries = Vec::new();
        let mut offset = 0usize;
        for line in text.lines() {
            let line_offset = offset;
            offset += line.len() + 1;
            if line.is_empty() {
                continue;
            }
            if let Some((key, value)) = line.split_once('=') {
                match key {
                    "root" => root = Some(PathBuf::from(value)),
                    "seed" => {
                        seed = Some(value.parse().map_err(|_| {
                            Error::format(line_offset, format!("invalid seed `{value}`"))
                        })?)
                    }
                    "split" => {
                        split = Some(match value {
                            "train" => Split::Train,
                            "validation" => Split::Validation,
                            other => {
                                return Err(Error::format(
                                    line_offset,
                                    format!("unknown split `{other}`"),
                                ))
                            }
                        })
                    }
                    other => {
                        return Err(Error::format(
                            line_offset,
                            format!("unknown header key `{other}`"),
                        ))
                    }
                }
            } else {
                entries.push(line.to_string());
            }
        }
        let root = root.ok_or_else(|| Error::format(0, "missing root= header"))?;
        let seed = seed.ok_or_else(|| Error::format(0, "missing seed= header"))?;
        let split = split.ok_or_else(|| Error::format(0, "missing split= header"))?;
        let root = if root.is_absolute() {
            root
        } else {
            base_dir.join(root)
        };
        DatasetManifest::new(root, split, seed, entries)
    }

    pub fn read(path: &Path) -> Result<DatasetManifest> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        DatasetManifest::parse(&text, base)
    }
}

/// Lists the `.ppm` files directly inside `dir`, as sorted relative names.
pub fn scan_ppm_dir(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if name.ends_with(".ppm") && entry.file_type()?.is_file() {
            names.push(name.into_owned());
        }
    }
    names.sort();
    Ok(names)
}

/// Splits a file list into disjoint train/validation manifests by a seeded
/// shuffle of the sorted list. `train_count` overrides the default 10:4
/// ratio when given.
pub fn split_manifests(
    root: impl Into<PathBuf>,
    mut paths: Vec<String>,
    seed: u64,
    train_count: Option<usize>,
) -> Result<(DatasetManifest, DatasetManifest)> {
    let root = root.into();
    paths.sort();
    if paths.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::contract("duplicate paths in dataset"));
    }
    let n = paths.len();
    let n_train = match train_count {
        Some(t) => {
            if t > n {
                return Err(Error::contract(format!(
                    "train count {t} exceeds dataset size {n}"
                )));
            }
            t
        }
        // round-half-up of n * 10/14
        None => (n * 10 + 7) / 14,
    };
    let mut shuffled = paths;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SPLIT_TAG, 0));
    shuffled.shuffle(&mut rng);
    let train = shuffled[..n_train].to_vec();
    let val = shuffled[n_train..].to_vec();
    Ok((
        DatasetManifest::new(root.clone(), Split::Train, seed, train)?,
        DatasetManifest::new(root, Split::Validation, seed, val)?,
    ))
}
