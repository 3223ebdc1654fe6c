//! Report files: per-cell JSON lines, summary JSON, CSV table, timings, error manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BenchmarkRun, CellResult, ResultTable};
use crate::error::Result;
use crate::pipeline::FusionMode;

pub const CELLS_FILE: &str = "cells.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const ERRORS_FILE: &str = "errors.json";

#[derive(Serialize)]
struct CellLine<'a> {
    configuration: &'a str,
    #[serde(flatten)]
    cell: &'a CellResult,
}

/// One JSON object per cell, rows in table order.
pub fn write_cells_jsonl(table: &ResultTable, mut out: impl Write) -> Result<()> {
    for row in &table.rows {
        for cell in &row.cells {
            serde_json::to_writer(
                &mut out,
                &CellLine {
                    configuration: &row.label,
                    cell,
                },
            )?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn summary_json(table: &ResultTable) -> Result<String> {
    let mut text = serde_json::to_string_pretty(table)?;
    text.push('\n');
    Ok(text)
}

pub fn parse_summary(text: &str) -> Result<ResultTable> {
    Ok(serde_json::from_str(text)?)
}

/// Table layout: one line per configuration with its mechanism toggles and mean score.
pub fn write_csv(table: &ResultTable, out: impl Write) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record([
        "configuration",
        "cross_modal_adain",
        "teacher",
        "text_alignment",
        "cells",
        "complete",
    ])?;
    for row in &table.rows {
        let adain = row.fusion_mode == FusionMode::CrossModalAdain;
        let teacher = row.teacher_enabled && row.teacher_cutoff > 0;
        writer.write_record([
            row.label.clone(),
            adain.to_string(),
            teacher.to_string(),
            row.mean.map(|m| format!("{m:.6}")).unwrap_or_default(),
            row.cells.len().to_string(),
            row.complete.to_string(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedCell {
    pub configuration: String,
    pub image_id: String,
    pub prompt: String,
    pub style_image: String,
    pub error: String,
}

pub fn failed_cells(table: &ResultTable) -> Vec<FailedCell> {
    table
        .rows
        .iter()
        .flat_map(|row| {
            row.failed_cells().map(|c| FailedCell {
                configuration: row.label.clone(),
                image_id: c.image_id.clone(),
                prompt: c.prompt.clone(),
                style_image: c.style_image.clone(),
                error: c.error.clone().unwrap_or_default(),
            })
        })
        .collect()
}

/// Paths written by [`write_report`].
#[derive(Debug, Clone, Default)]
pub struct ReportFiles {
    pub cells: PathBuf,
    pub summary: PathBuf,
    pub timing: PathBuf,
    pub errors: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    pub images: Vec<PathBuf>,
}

/// Writes a run's reports into `dir`; `csv` is an extra path for the table export.
///
/// Everything except `timing.jsonl` is a pure function of the inputs.
/// `errors.json` is only written when some cell failed.
pub fn write_report(dir: &Path, run: &BenchmarkRun, csv: Option<&Path>) -> Result<ReportFiles> {
    fs::create_dir_all(dir)?;
    let mut files = ReportFiles {
        cells: dir.join(CELLS_FILE),
        summary: dir.join(SUMMARY_FILE),
        timing: dir.join(TIMING_FILE),
        ..ReportFiles::default()
    };

    let mut cells = Vec::new();
    write_cells_jsonl(&run.table, &mut cells)?;
    fs::write(&files.cells, cells)?;
    fs::write(&files.summary, summary_json(&run.table)?)?;

    let mut timing = Vec::new();
    for t in &run.timings {
        serde_json::to_writer(&mut timing, t)?;
        timing.push(b'\n');
    }
    fs::write(&files.timing, timing)?;

    let failed = failed_cells(&run.table);
    let errors = dir.join(ERRORS_FILE);
    if failed.is_empty() {
        if errors.exists() {
            fs::remove_file(&errors)?;
        }
    } else {
        fs::write(&errors, serde_json::to_string_pretty(&failed)? + "\n")?;
        files.errors = Some(errors);
    }

    if let Some(path) = csv {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        write_csv(&run.table, fs::File::create(path)?)?;
        files.csv = Some(path.to_path_buf());
    }

    for (id, image) in &run.images {
        let path = dir.join("images").join(format!("{id}.png"));
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        image.save_with_format(&path, image::ImageFormat::Png)?;
        files.images.push(path);
    }
    Ok(files)
}
