//! Text-alignment benchmark harness: prompt × style grids, ablation tables, reports.

pub mod embedder;
pub mod grid;
pub mod report;
pub mod votes;

use std::time::Instant;

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use embedder::{Embedder, FixedEmbedder, MockEmbedder, UNIT_NORM_TOLERANCE};
pub use grid::{BenchmarkGrid, CellOverride};

use crate::error::{Error, Result};
use crate::guidance::GuidanceMode;
use crate::pipeline::backend::Backend;
use crate::pipeline::{generate, FusionMode, GenerationConfig, PartialConfig};

/// Cosine similarity between an image and its prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentScore {
    pub value: f64,
    pub prompt: String,
    pub image_id: String,
}

fn check_unit(what: &str, v: &[f32]) -> Result<()> {
    let norm = v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
    if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
        return Err(Error::Embedder(format!("{what} embedding has norm {norm}, expected 1")));
    }
    Ok(())
}

/// Scores `image` against `prompt` as the cosine of their unit embeddings.
pub fn text_alignment(
    image: &RgbImage,
    prompt: &str,
    image_id: &str,
    embedder: &dyn Embedder,
) -> Result<AlignmentScore> {
    let img = embedder.embed_image(image)?;
    let txt = embedder.embed_text(prompt)?;
    check_unit("image", &img)?;
    check_unit("text", &txt)?;
    if img.len() != txt.len() {
        return Err(Error::Embedder(format!(
            "image and text embeddings differ in width: {} vs {}",
            img.len(),
            txt.len()
        )));
    }
    let cosine: f64 = img.iter().zip(&txt).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
    Ok(AlignmentScore {
        value: cosine.clamp(-1.0, 1.0),
        prompt: prompt.to_string(),
        image_id: image_id.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub prompt_index: usize,
    pub style_index: usize,
    pub prompt: String,
    pub style_image: String,
    pub image_id: String,
    pub score: Option<f64>,
    pub error: Option<String>,
}

/// One configuration's scores over the whole grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub label: String,
    pub fusion_mode: FusionMode,
    pub teacher_enabled: bool,
    pub teacher_cutoff: usize,
    pub scfg_mode: GuidanceMode,
    /// Unweighted mean over scored cells; `None` when no cell succeeded.
    pub mean: Option<f64>,
    pub complete: bool,
    pub cells: Vec<CellResult>,
}

impl ResultRow {
    pub fn failed_cells(&self) -> impl Iterator<Item = &CellResult> {
        self.cells.iter().filter(|c| c.error.is_some())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn is_complete(&self) -> bool {
        self.rows.iter().all(|r| r.complete)
    }
}

/// Wall-clock cost of one generated cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellTiming {
    pub image_id: String,
    pub seconds: f64,
}

/// Results plus the nondeterministic by-products of a run.
#[derive(Debug, Clone)]
pub struct BenchmarkRun {
    pub table: ResultTable,
    pub timings: Vec<CellTiming>,
    /// `(image_id, image)` for every generated cell, when requested.
    pub images: Vec<(String, RgbImage)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Worker threads for cell generation; 1 runs cells in grid order on the caller.
    pub jobs: usize,
    pub keep_images: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            jobs: 1,
            keep_images: false,
        }
    }
}

/// Row label from the mechanism toggles, e.g. `baseline`, `+teacher`, `+adain`, `+both`.
pub fn mechanism_label(config: &GenerationConfig) -> String {
    let adain = config.fusion_mode == FusionMode::CrossModalAdain;
    let teacher = config.teacher_enabled && config.teacher_cutoff > 0;
    let mut label = match (adain, teacher) {
        (false, false) => "baseline",
        (false, true) => "+teacher",
        (true, false) => "+adain",
        (true, true) => "+both",
    }
    .to_string();
    if config.scfg_mode == GuidanceMode::StyleCfg {
        label.push_str("+scfg");
    }
    label
}

struct CellOutcome {
    result: CellResult,
    timing: Option<CellTiming>,
    image: Option<RgbImage>,
}

fn run_cell(
    grid: &BenchmarkGrid,
    (i, j): (usize, usize),
    label: &str,
    extra: &PartialConfig,
    backend: &dyn Backend,
    embedder: &dyn Embedder,
    keep_image: bool,
) -> CellOutcome {
    let image_id = format!("{label}/p{i:03}_s{j:03}");
    let started = Instant::now();
    let scored = grid.cell_config(i, j, extra).and_then(|config| {
        let generation = generate(&config, backend)?;
        let score = text_alignment(&generation.image, &config.prompt, &image_id, embedder)?;
        Ok((score, generation.image))
    });
    let seconds = started.elapsed().as_secs_f64();
    let mut result = CellResult {
        prompt_index: i,
        style_index: j,
        prompt: grid.prompts[i].clone(),
        style_image: grid.style_images[j].display().to_string(),
        image_id: image_id.clone(),
        score: None,
        error: None,
    };
    match scored {
        Ok((score, image)) => {
            result.score = Some(score.value);
            CellOutcome {
                result,
                timing: Some(CellTiming { image_id, seconds }),
                image: keep_image.then_some(image),
            }
        }
        Err(e) => {
            log::warn!("cell {image_id} failed: {e}");
            result.error = Some(e.to_string());
            CellOutcome {
                result,
                timing: None,
                image: None,
            }
        }
    }
}

/// One row's table entry, per-cell timings and kept images.
type RowRun = (ResultRow, Vec<CellTiming>, Vec<(String, RgbImage)>);

fn run_row(
    grid: &BenchmarkGrid,
    extra: &PartialConfig,
    backend: &dyn Backend,
    embedder: &dyn Embedder,
    options: RunOptions,
    pool: Option<&rayon::ThreadPool>,
) -> Result<RowRun> {
    let reference = grid.cell_config(0, 0, extra)?;
    let label = mechanism_label(&reference);
    let cells: Vec<(usize, usize)> = grid.cells().collect();
    let outcomes: Vec<CellOutcome> = match pool {
        Some(pool) => pool.install(|| {
            cells
                .par_iter()
                .map(|&cell| run_cell(grid, cell, &label, extra, backend, embedder, options.keep_images))
                .collect()
        }),
        None => cells
            .iter()
            .map(|&cell| run_cell(grid, cell, &label, extra, backend, embedder, options.keep_images))
            .collect(),
    };

    let mut results = Vec::with_capacity(outcomes.len());
    let mut timings = Vec::new();
    let mut images = Vec::new();
    for outcome in outcomes {
        timings.extend(outcome.timing);
        if let Some(image) = outcome.image {
            images.push((outcome.result.image_id.clone(), image));
        }
        results.push(outcome.result);
    }
    let scores: Vec<f64> = results.iter().filter_map(|c| c.score).collect();
    let mean = (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64);
    let row = ResultRow {
        label,
        fusion_mode: reference.fusion_mode,
        teacher_enabled: reference.teacher_enabled,
        teacher_cutoff: reference.teacher_cutoff,
        scfg_mode: reference.scfg_mode,
        mean,
        complete: scores.len() == results.len(),
        cells: results,
    };
    Ok((row, timings, images))
}

fn thread_pool(options: RunOptions, backend: &dyn Backend) -> Result<Option<rayon::ThreadPool>> {
    if options.jobs <= 1 {
        return Ok(None);
    }
    if !backend.is_stateless() {
        log::warn!(
            "backend {} is not stateless; running cells sequentially",
            backend.name()
        );
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(options.jobs)
        .build()
        .map(Some)
        .map_err(|e| Error::Backend(e.to_string()))
}

fn run_rows(
    grid: &BenchmarkGrid,
    rows: &[PartialConfig],
    backend: &dyn Backend,
    embedder: &dyn Embedder,
    options: RunOptions,
) -> Result<BenchmarkRun> {
    grid.validate()?;
    for extra in rows {
        grid.cell_config(0, 0, extra)?;
    }
    let pool = thread_pool(options, backend)?;
    let mut run = BenchmarkRun {
        table: ResultTable::default(),
        timings: Vec::new(),
        images: Vec::new(),
    };
    for extra in rows {
        let (row, timings, images) = run_row(grid, extra, backend, embedder, options, pool.as_ref())?;
        run.table.rows.push(row);
        run.timings.extend(timings);
        run.images.extend(images);
    }
    Ok(run)
}

/// Scores every cell of `grid` under its own configuration: one row.
///
/// Failed cells are recorded and the run continues; the row is then marked incomplete.
pub fn run_benchmark(
    grid: &BenchmarkGrid,
    backend: &dyn Backend,
    embedder: &dyn Embedder,
    options: RunOptions,
) -> Result<BenchmarkRun> {
    run_rows(grid, &[PartialConfig::default()], backend, embedder, options)
}

/// The four mechanism toggles compared by the ablation, in row order.
pub fn ablation_toggles() -> [PartialConfig; 4] {
    let toggle = |adain: bool, teacher: bool| PartialConfig {
        fusion_mode: Some(if adain {
            FusionMode::CrossModalAdain
        } else {
            FusionMode::WeightedSum
        }),
        teacher_enabled: Some(teacher),
        ..PartialConfig::default()
    };
    [
        toggle(false, false),
        toggle(false, true),
        toggle(true, false),
        toggle(true, true),
    ]
}

/// Runs the grid once per row of [`ablation_toggles`]: baseline, +teacher, +adain, +both.
pub fn run_ablation(
    grid: &BenchmarkGrid,
    backend: &dyn Backend,
    embedder: &dyn Embedder,
    options: RunOptions,
) -> Result<BenchmarkRun> {
    run_rows(grid, &ablation_toggles(), backend, embedder, options)
}
