//! Per-step attention dumps: raw little-endian `f32` arrays plus a JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::backend::{LayerId, LayerTopology};
use crate::pipeline::step::{StepEvent, StepObserver};
use crate::teacher::AttentionMapStore;
use crate::tensor::{le_bytes, AttentionMap};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapSource {
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpEntry {
    pub step: usize,
    pub timestep: u32,
    pub source: MapSource,
    pub layer: LayerId,
    pub layer_name: String,
    /// `[batch, heads, queries, keys]`
    pub shape: [usize; 4],
    /// Relative to the manifest's directory.
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpManifest {
    pub dtype: String,
    pub byte_order: String,
    pub entries: Vec<DumpEntry>,
}

/// Streams every step's maps to disk; nothing but the manifest is kept in memory.
pub struct AttentionDumper {
    dir: PathBuf,
    topology: LayerTopology,
    entries: Vec<DumpEntry>,
}

impl AttentionDumper {
    pub fn new(dir: impl Into<PathBuf>, topology: &LayerTopology) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            topology: topology.clone(),
            entries: Vec::new(),
        })
    }

    fn write_store(&mut self, store: &AttentionMapStore, source: MapSource) -> Result<()> {
        let tag = match source {
            MapSource::Teacher => "teacher",
            MapSource::Student => "student",
        };
        for (layer, map) in store.entries() {
            let file = format!("step{:03}_{tag}_layer{}.f32", store.step_index(), layer.0);
            let standard = map.as_array().as_standard_layout();
            fs::write(self.dir.join(&file), le_bytes(standard.iter()))?;
            let (b, h, q, k) = map.dim();
            self.entries.push(DumpEntry {
                step: store.step_index(),
                timestep: store.timestep(),
                source,
                layer,
                layer_name: self
                    .topology
                    .get(layer)
                    .map_or_else(|| format!("layer{}", layer.0), |l| l.name.clone()),
                shape: [b, h, q, k],
                file,
            });
        }
        Ok(())
    }

    /// Writes the manifest and returns its path.
    pub fn finish(self) -> Result<PathBuf> {
        let manifest = DumpManifest {
            dtype: "float32".into(),
            byte_order: "little".into(),
            entries: self.entries,
        };
        let path = self.dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(path)
    }
}

impl StepObserver for AttentionDumper {
    fn wants_student_maps(&self) -> bool {
        true
    }

    fn on_step(&mut self, event: StepEvent<'_>) -> Result<()> {
        if let Some(store) = event.teacher_maps {
            self.write_store(store, MapSource::Teacher)?;
        }
        if let Some(store) = event.student_maps {
            self.write_store(store, MapSource::Student)?;
        }
        Ok(())
    }
}

/// Reads a dump directory back into maps.
pub fn load_dump(dir: &Path) -> Result<Vec<(DumpEntry, AttentionMap)>> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|source| Error::Read {
        path: manifest_path.clone(),
        source,
    })?;
    let manifest: DumpManifest = serde_json::from_str(&text)?;
    manifest
        .entries
        .into_iter()
        .map(|entry| {
            let path = dir.join(&entry.file);
            let bytes = fs::read(&path).map_err(|source| Error::Read { path, source })?;
            let values: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunks of 4")))
                .collect();
            let [b, h, q, k] = entry.shape;
            let array = Array4::from_shape_vec((b, h, q, k), values)
                .map_err(|e| Error::Dimension(format!("{}: {e}", entry.file)))?;
            Ok((entry, AttentionMap::new(array)?))
        })
        .collect()
}
