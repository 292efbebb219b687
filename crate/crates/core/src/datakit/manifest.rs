use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{check_scale, DataError};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(DataError::Contract(format!(
                "unknown split {other}; expected train, val or test"
            ))),
        }
    }
}

/// One HR image and its LR counterparts; paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairEntry {
    pub id: String,
    pub hr: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_2: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_4: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_8: Option<String>,
}

impl PairEntry {
    pub fn lr(&self, scale: usize) -> Option<&str> {
        match scale {
            2 => self.lr_2.as_deref(),
            4 => self.lr_4.as_deref(),
            8 => self.lr_8.as_deref(),
            _ => None,
        }
    }

    pub(crate) fn set_lr(&mut self, scale: usize, path: String) {
        match scale {
            2 => self.lr_2 = Some(path),
            4 => self.lr_4 = Some(path),
            8 => self.lr_8 = Some(path),
            _ => unreachable!("scale checked by caller"),
        }
    }
}

/// An input that could not be used, with the reason.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rejected {
    pub path: String,
    pub reason: String,
}

/// Dataset description, stored as TOML:
///
/// ```toml
/// version = 1
/// jpeg_quality = 85
/// seed = 7
/// scales = [2, 4, 8]
/// hr_width = 640
/// hr_height = 480
///
/// [[train]]
/// id = "reef_001"
/// hr = "hr/reef_001.png"
/// lr_2 = "lr_2x/reef_001.png"
/// ```
///
/// followed by `[[val]]`, `[[test]]` and `[[rejected]]` tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub jpeg_quality: u8,
    pub seed: u64,
    pub scales: Vec<usize>,
    pub hr_width: usize,
    pub hr_height: usize,
    #[serde(default)]
    pub train: Vec<PairEntry>,
    #[serde(default)]
    pub val: Vec<PairEntry>,
    #[serde(default)]
    pub test: Vec<PairEntry>,
    #[serde(default)]
    pub rejected: Vec<Rejected>,
    /// Directory the relative paths resolve against; not stored.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> &[PairEntry] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    /// Absolute `(lr, hr)` paths of a split at `scale`.
    pub fn pairs(&self, split: Split, scale: usize) -> Result<Vec<(PathBuf, PathBuf)>, DataError> {
        check_scale(scale)?;
        if !self.scales.contains(&scale) {
            return Err(DataError::Contract(format!(
                "dataset has no {scale}x low-resolution set"
            )));
        }
        self.split(split)
            .iter()
            .map(|p| {
                let lr = p
                    .lr(scale)
                    .ok_or_else(|| DataError::Manifest(format!("{} has no {scale}x entry", p.id)))?;
                Ok((self.resolve(lr), self.resolve(&p.hr)))
            })
            .collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest fields are always serializable")
    }

    pub fn from_toml(text: &str, root: impl Into<PathBuf>) -> Result<Self, DataError> {
        let mut m: DatasetManifest = toml::from_str(text).map_err(|e| DataError::Manifest(e.to_string()))?;
        if m.version != MANIFEST_VERSION {
            return Err(DataError::Manifest(format!(
                "version {} is not supported (expected {MANIFEST_VERSION})",
                m.version
            )));
        }
        m.root = root.into();
        m.check_structure()?;
        Ok(m)
    }

    /// Loads `manifest.toml` from a dataset directory (or a manifest file path).
    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&file).map_err(|e| DataError::io(&file, e))?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, root)
    }

    pub fn save(&self) -> Result<PathBuf, DataError> {
        let file = self.root.join(MANIFEST_FILE);
        fs::write(&file, self.to_toml()).map_err(|e| DataError::io(&file, e))?;
        Ok(file)
    }

    fn check_structure(&self) -> Result<(), DataError> {
        for &s in &self.scales {
            check_scale(s).map_err(|e| DataError::Manifest(e.to_string()))?;
        }
        // Splits are disjoint and no pair is listed twice.
        let mut seen = HashSet::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            for p in self.split(split) {
                if !seen.insert(p.hr.as_str()) {
                    return Err(DataError::Manifest(format!("{} is listed more than once", p.hr)));
                }
            }
        }
        Ok(())
    }

    /// Re-reads the header of every listed file and checks its extent.
    pub fn validate(&self) -> Result<(), DataError> {
        self.check_structure()?;
        for split in [Split::Train, Split::Val, Split::Test] {
            for p in self.split(split) {
                expect_extent(&self.resolve(&p.hr), self.hr_width, self.hr_height)?;
                for &s in &self.scales {
                    let lr = p
                        .lr(s)
                        .ok_or_else(|| DataError::Manifest(format!("{} has no {s}x entry", p.id)))?;
                    expect_extent(&self.resolve(lr), self.hr_width / s, self.hr_height / s)?;
                }
            }
        }
        Ok(())
    }
}

fn expect_extent(path: &Path, width: usize, height: usize) -> Result<(), DataError> {
    let (w, h) = ::image::image_dimensions(path).map_err(|e| DataError::image(path, e))?;
    if (w as usize, h as usize) != (width, height) {
        return Err(DataError::Manifest(format!(
            "{} is {w}x{h}, expected {width}x{height}",
            path.display()
        )));
    }
    Ok(())
}
