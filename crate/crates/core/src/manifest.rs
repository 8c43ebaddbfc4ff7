//! JSON atlas and case manifests.
//!
//! Paths inside a manifest are resolved relative to the manifest's own
//! directory unless they are absolute.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{AtlasPair, AtlasSet, CardiacPhase, ImageGrid, LabelMap};
use crate::io;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtlasEntry {
    pub id: String,
    pub phase: CardiacPhase,
    pub image: PathBuf,
    pub labels: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AtlasManifest {
    pub atlases: Vec<AtlasEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceEntry {
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseEntry {
    pub slices: Vec<SliceEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseManifest {
    pub case_id: String,
    /// Pixel spacing in mm; when present every slice must match it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<[f64; 2]>,
    pub slice_thickness: f64,
    pub phases: BTreeMap<CardiacPhase, PhaseEntry>,
}

/// One loaded slice of a case.
#[derive(Clone, Debug)]
pub struct CaseSlice {
    pub image: ImageGrid,
    pub truth: Option<LabelMap>,
}

/// A case manifest with all rasters loaded.
#[derive(Clone, Debug)]
pub struct LoadedCase {
    pub case_id: String,
    pub slice_thickness: f64,
    pub phases: BTreeMap<CardiacPhase, Vec<CaseSlice>>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `value` as pretty JSON, creating parent directories.
pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl AtlasManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let m: Self = read_json(path.as_ref())?;
        if m.atlases.is_empty() {
            return Err(Error::format(
                path.as_ref(),
                "atlas manifest lists no atlases",
            ));
        }
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(self, path)
    }

    /// Loads the atlases of one phase in manifest order; `None` if the
    /// manifest has none for that phase.
    pub fn load_phase(
        &self,
        manifest_path: impl AsRef<Path>,
        phase: CardiacPhase,
    ) -> Result<Option<AtlasSet>> {
        let base = base_dir(manifest_path.as_ref());
        let mut pairs = Vec::new();
        for e in self.atlases.iter().filter(|e| e.phase == phase) {
            let image = io::load_image(resolve(&base, &e.image))?;
            let labels = io::load_labels(resolve(&base, &e.labels))?;
            pairs.push(AtlasPair::new(e.id.clone(), image, labels)?);
        }
        if pairs.is_empty() {
            return Ok(None);
        }
        AtlasSet::new(phase, pairs).map(Some)
    }
}

impl CaseManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let m: Self = read_json(path)?;
        m.check().map_err(|reason| Error::format(path, reason))?;
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(self, path)
    }

    fn check(&self) -> std::result::Result<(), String> {
        if !(self.slice_thickness > 0.0) || !self.slice_thickness.is_finite() {
            return Err(format!(
                "slice_thickness must be > 0, got {}",
                self.slice_thickness
            ));
        }
        if self.phases.values().all(|p| p.slices.is_empty()) {
            return Err("case lists no slices".into());
        }
        if let Some(s) = self.spacing {
            if !(s[0] > 0.0 && s[1] > 0.0) {
                return Err(format!("spacing must be positive, got {s:?}"));
            }
        }
        Ok(())
    }

    /// Loads every slice (and truth, where listed).
    pub fn load(&self, manifest_path: impl AsRef<Path>) -> Result<LoadedCase> {
        let base = base_dir(manifest_path.as_ref());
        let mut phases = BTreeMap::new();
        for (&phase, entry) in &self.phases {
            let mut slices = Vec::new();
            for s in &entry.slices {
                let path = resolve(&base, &s.image);
                let image = io::load_image(&path)?;
                if let Some(sp) = self.spacing {
                    if image.spacing() != sp {
                        return Err(Error::GeometryMismatch(format!(
                            "{} has spacing {:?}, manifest says {sp:?}",
                            path.display(),
                            image.spacing()
                        )));
                    }
                }
                let truth = match &s.truth {
                    Some(t) => {
                        let labels = io::load_labels(resolve(&base, t))?;
                        image.require_geometry(&labels, "slice truth")?;
                        Some(labels)
                    }
                    None => None,
                };
                slices.push(CaseSlice { image, truth });
            }
            if !slices.is_empty() {
                phases.insert(phase, slices);
            }
        }
        Ok(LoadedCase {
            case_id: self.case_id.clone(),
            slice_thickness: self.slice_thickness,
            phases,
        })
    }
}
