//! Prompt × style benchmark grids and their definition files.

use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::pipeline::config::parse_document;
use crate::pipeline::{GenerationConfig, PartialConfig};

/// Overrides applied to a single cell on top of the grid-wide ones.
#[derive(Debug, Clone, PartialEq)]
pub struct CellOverride {
    pub prompt_index: usize,
    pub style_index: usize,
    pub overrides: PartialConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkGrid {
    pub prompts: Vec<String>,
    pub style_images: Vec<PathBuf>,
    /// Grid-wide settings; `prompt` and `style_image_path` are set per cell.
    pub overrides: PartialConfig,
    pub cell_overrides: Vec<CellOverride>,
}

/// `"A <color> <object>"` for every color and object, colors outermost.
pub fn color_object_prompts(colors: &[String], objects: &[String]) -> Vec<String> {
    colors
        .iter()
        .flat_map(|c| objects.iter().map(move |o| format!("A {c} {o}")))
        .collect()
}

fn string_list(key: &str, value: Option<Value>) -> Result<Vec<String>> {
    match value {
        None | Some(Value::Null) => Ok(Vec::new()),
        Some(v) => serde_json::from_value(v).map_err(|e| Error::config(key, e.to_string())),
    }
}

fn index(key: &str, map: &mut Map<String, Value>) -> Result<usize> {
    let value = map
        .remove(key)
        .ok_or_else(|| Error::config(format!("cells.{key}"), "missing"))?;
    serde_json::from_value(value).map_err(|e| Error::config(format!("cells.{key}"), e.to_string()))
}

impl BenchmarkGrid {
    pub fn new(prompts: Vec<String>, style_images: Vec<PathBuf>) -> Self {
        Self {
            prompts,
            style_images,
            overrides: PartialConfig::default(),
            cell_overrides: Vec::new(),
        }
    }

    /// Parses a grid definition. Relative style paths resolve against `base_dir`.
    ///
    /// Keys: `prompts`, `style_images`, optional `template` (`colors`,
    /// `objects`), optional `overrides` (generation keys), optional `cells`
    /// (each with `prompt`, `style` indices plus generation keys).
    pub fn from_value(value: Value, base_dir: &Path) -> Result<Self> {
        let Value::Object(mut map) = value else {
            return Err(Error::config("grid", "expected a table"));
        };
        let mut prompts = string_list("prompts", map.remove("prompts"))?;
        if let Some(template) = map.remove("template") {
            let Value::Object(mut t) = template else {
                return Err(Error::config("template", "expected a table with colors and objects"));
            };
            let colors = string_list("template.colors", t.remove("colors"))?;
            let objects = string_list("template.objects", t.remove("objects"))?;
            if let Some(extra) = t.keys().next() {
                return Err(Error::config(format!("template.{extra}"), "unknown key"));
            }
            prompts.extend(color_object_prompts(&colors, &objects));
        }
        let style_images = string_list("style_images", map.remove("style_images"))?
            .into_iter()
            .map(|p| base_dir.join(p))
            .collect();
        let overrides = match map.remove("overrides") {
            None => PartialConfig::default(),
            Some(v) => PartialConfig::from_value(v, "overrides")?,
        };
        let cell_overrides = match map.remove("cells") {
            None => Vec::new(),
            Some(Value::Array(cells)) => cells
                .into_iter()
                .map(|cell| {
                    let Value::Object(mut cell) = cell else {
                        return Err(Error::config("cells", "each cell must be a table"));
                    };
                    Ok(CellOverride {
                        prompt_index: index("prompt", &mut cell)?,
                        style_index: index("style", &mut cell)?,
                        overrides: PartialConfig::from_map(cell)?,
                    })
                })
                .collect::<Result<_>>()?,
            Some(_) => return Err(Error::config("cells", "expected a list")),
        };
        if let Some(extra) = map.keys().next() {
            return Err(Error::config(extra.clone(), "unknown key"));
        }
        let grid = Self {
            prompts,
            style_images,
            overrides,
            cell_overrides,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_value(parse_document(path, &text)?, base)
    }

    /// Non-empty axes, in-range cell overrides, and a resolvable grid-wide config.
    pub fn validate(&self) -> Result<()> {
        if self.prompts.is_empty() {
            return Err(Error::config("prompts", "the grid needs at least one prompt"));
        }
        if self.style_images.is_empty() {
            return Err(Error::config("style_images", "the grid needs at least one style image"));
        }
        for cell in &self.cell_overrides {
            if cell.prompt_index >= self.prompts.len() || cell.style_index >= self.style_images.len() {
                return Err(Error::config(
                    "cells",
                    format!("cell ({}, {}) is outside the grid", cell.prompt_index, cell.style_index),
                ));
            }
        }
        self.cell_config(0, 0, &PartialConfig::default()).map(|_| ())
    }

    pub fn len(&self) -> usize {
        self.prompts.len() * self.style_images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cells in generation order: prompt-major, then style.
    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let styles = self.style_images.len();
        (0..self.prompts.len()).flat_map(move |i| (0..styles).map(move |j| (i, j)))
    }

    /// Resolved config of cell `(i, j)`: grid overrides, then cell overrides,
    /// then `extra` (used for ablation toggles).
    pub fn cell_config(&self, i: usize, j: usize, extra: &PartialConfig) -> Result<GenerationConfig> {
        let mut layered = self.overrides.clone();
        for cell in self
            .cell_overrides
            .iter()
            .filter(|c| (c.prompt_index, c.style_index) == (i, j))
        {
            layered = layered.overlay(cell.overrides.clone());
        }
        let placement = PartialConfig {
            prompt: Some(self.prompts[i].clone()),
            style_image_path: Some(self.style_images[j].clone()),
            ..PartialConfig::default()
        };
        layered.overlay(placement).overlay(extra.clone()).resolve()
    }
}
