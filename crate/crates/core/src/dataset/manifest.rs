use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pnm;
use super::synthetic::ShapeParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    /// Image path relative to the manifest directory.
    pub image: String,
    pub label: usize,
    /// Ground-truth region (PGM), when available.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    pub split: Split,
    /// Parameters of the class-determining shape for synthetic data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<ShapeParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// `[H, W, C]` of every image.
    pub image_size: [usize; 3],
    pub classes: Vec<String>,
    pub entries: Vec<Entry>,
    /// Directory the entry paths are relative to.
    #[serde(skip)]
    pub root: PathBuf,
}

/// Images of one split, decoded into memory.
#[derive(Clone, Debug, Default)]
pub struct LabeledImages {
    pub ids: Vec<String>,
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub masks: Vec<Option<Vec<bool>>>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Keeps the first `n` images.
    pub fn truncate(&mut self, n: usize) {
        self.ids.truncate(n);
        self.images.truncate(n);
        self.labels.truncate(n);
        self.masks.truncate(n);
    }
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn path_of(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn load_image(&self, entry: &Entry) -> Result<Tensor> {
        let path = self.path_of(&entry.image);
        let img = pnm::read(&path)?;
        if img.shape() != self.image_size {
            return Err(Error::Data(format!(
                "{}: image is {:?}, manifest declares {:?}",
                path.display(),
                img.shape(),
                self.image_size
            )));
        }
        Ok(img)
    }

    pub fn load_mask(&self, entry: &Entry) -> Result<Option<Vec<bool>>> {
        let Some(rel) = &entry.mask else { return Ok(None) };
        let path = self.path_of(rel);
        let (mask, h, w) = pnm::read_mask(&path)?;
        if [h, w] != self.image_size[..2] {
            return Err(Error::Data(format!(
                "{}: mask is {h}x{w}, manifest declares {:?}",
                path.display(),
                self.image_size
            )));
        }
        Ok(Some(mask))
    }

    /// Decodes every image (and mask) of a split, in manifest order.
    pub fn load_split(&self, split: Split) -> Result<LabeledImages> {
        let entries: Vec<&Entry> = self.entries_in(split).collect();
        let loaded = entries
            .par_iter()
            .map(|e| Ok((self.load_image(e)?, self.load_mask(e)?)))
            .collect::<Result<Vec<_>>>()?;
        let mut out = LabeledImages::default();
        for (e, (img, mask)) in entries.iter().zip(loaded) {
            out.ids.push(e.image.clone());
            out.images.push(img);
            out.labels.push(e.label);
            out.masks.push(mask);
        }
        Ok(out)
    }
}

/// Reads and validates `manifest.json`. Images are decoded on demand.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut m: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::Data(format!(
            "{}: manifest version {} is not supported (expected {MANIFEST_VERSION})",
            path.display(),
            m.version
        )));
    }
    m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    if m.classes.is_empty() {
        return Err(Error::Data("manifest lists no classes".into()));
    }
    if m.image_size.iter().any(|&d| d == 0) {
        return Err(Error::Data(format!("invalid image_size {:?}", m.image_size)));
    }
    let mut seen = std::collections::HashSet::new();
    for e in &m.entries {
        if e.label >= m.classes.len() {
            return Err(Error::LabelOutOfRange {
                label: e.label,
                classes: m.classes.len(),
            });
        }
        if !seen.insert(&e.image) {
            return Err(Error::Data(format!("{} appears in the manifest twice", e.image)));
        }
        for rel in std::iter::once(&e.image).chain(e.mask.as_ref()) {
            let p = m.path_of(rel);
            if !p.is_file() {
                return Err(Error::Data(format!("missing file {}", p.display())));
            }
        }
    }
    Ok(m)
}
