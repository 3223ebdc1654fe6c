use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use stylefuse::evaluation::report::write_report;
use stylefuse::evaluation::{
    run_ablation, run_benchmark, BenchmarkGrid, BenchmarkRun, Embedder, MockEmbedder, RunOptions,
};
use stylefuse::guidance::{BranchEvaluation, GuidanceMode};
use stylefuse::pipeline::dump::AttentionDumper;
use stylefuse::pipeline::{
    generate_observed, open_backend, BackendKind, FusionMode, Generation, GenerationConfig, PartialConfig, StepSummary,
};
use stylefuse::{Error, Result};

#[derive(Parser)]
#[command(name = "stylefuse", version, about = "Training-free text-driven style transfer")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one image and its JSON sidecar.
    Generate(GenerateArgs),
    /// Score every cell of a prompt × style grid.
    Benchmark(GridArgs),
    /// Run a grid under the four mechanism combinations.
    Ablate(GridArgs),
    /// Generate one image and dump every step's self-attention maps.
    DumpAttn(DumpArgs),
}

#[derive(Args, Default)]
struct ConfigFlags {
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    negative_prompt: Option<String>,
    #[arg(long)]
    style_image: Option<PathBuf>,
    #[arg(long)]
    negative_style_image: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Classifier-free guidance scale s (1 disables guidance).
    #[arg(long)]
    guidance_scale: Option<f64>,
    /// `weighted_sum` or `cross_modal_adain`.
    #[arg(long)]
    fusion_mode: Option<FusionMode>,
    /// Style weight of `weighted_sum` fusion.
    #[arg(long)]
    lambda: Option<f64>,
    /// Number of initial steps whose self-attention maps come from the teacher.
    #[arg(long)]
    teacher_cutoff: Option<usize>,
    /// Disable teacher self-attention replacement.
    #[arg(long)]
    no_teacher: bool,
    /// `text_cfg` or `style_cfg`; defaults to `style_cfg` when a negative style image is given.
    #[arg(long)]
    scfg_mode: Option<GuidanceMode>,
    /// Guidance weight w of style-based guidance (defaults to scale - 1).
    #[arg(long)]
    scfg_weight: Option<f64>,
    /// `batched` or `sequential` evaluation of the two guidance branches.
    #[arg(long)]
    branch_evaluation: Option<BranchEvaluation>,
    /// `toy` or `external`.
    #[arg(long)]
    backend: Option<BackendKind>,
    /// TOML or JSON config file; a previous run's sidecar also works.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigFlags {
    fn partial(&self) -> PartialConfig {
        PartialConfig {
            prompt: self.prompt.clone(),
            negative_prompt: self.negative_prompt.clone(),
            style_image_path: self.style_image.clone(),
            negative_style_image_path: self.negative_style_image.clone(),
            seed: self.seed,
            steps: self.steps,
            guidance_scale: self.guidance_scale,
            lambda: self.lambda,
            fusion_mode: self.fusion_mode,
            teacher_enabled: self.no_teacher.then_some(false),
            teacher_cutoff: self.teacher_cutoff,
            scfg_mode: self.scfg_mode,
            scfg_weight: self.scfg_weight,
            branch_evaluation: self.branch_evaluation,
            backend: self.backend,
        }
    }

    /// Flags over file over defaults.
    fn resolve(&self) -> Result<GenerationConfig> {
        let file = match &self.config {
            Some(path) => PartialConfig::load(path)?,
            None => PartialConfig::default(),
        };
        let config = file.overlay(self.partial()).resolve()?;
        for (key, path) in [
            ("style_image_path", &config.style_image_path),
            ("negative_style_image_path", &config.negative_style_image_path),
        ] {
            if let Some(path) = path.as_ref().filter(|p| !p.is_file()) {
                return Err(Error::config(key, format!("{} is not a readable file", path.display())));
            }
        }
        Ok(config)
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    flags: ConfigFlags,
    /// Output PNG; the sidecar and timing files are written next to it.
    #[arg(long, default_value = "out.png")]
    out: PathBuf,
    /// Also dump per-step self-attention maps into this directory.
    #[arg(long)]
    dump_attn: Option<PathBuf>,
}

#[derive(Args)]
struct DumpArgs {
    #[command(flatten)]
    flags: ConfigFlags,
    /// Output directory for maps, manifest, image and sidecar.
    #[arg(long, default_value = "attention")]
    out: PathBuf,
}

#[derive(Args)]
struct GridArgs {
    /// Grid file (TOML or JSON).
    #[arg(long)]
    grid: PathBuf,
    /// Report directory.
    #[arg(long, default_value = "benchmark")]
    out: PathBuf,
    /// Also export the result table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Parallel cell generation (stateless backends only).
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Keep every generated image under `<out>/images`.
    #[arg(long)]
    save_images: bool,
    /// Alignment scorer; only `mock` ships with this build.
    #[arg(long, default_value = "mock")]
    embedder: String,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    config: &'a GenerationConfig,
    backend: &'a str,
    image: String,
    image_size: [u32; 2],
    image_sha256: String,
    trajectory: &'a [StepSummary],
    timing_file: String,
}

#[derive(Serialize)]
struct Timing<'a> {
    total_seconds: f64,
    step_seconds: &'a [f64],
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Writes the PNG, a deterministic sidecar and a separate timing file.
fn write_outputs(
    image_path: &Path,
    config: &GenerationConfig,
    backend: &str,
    generation: &Generation,
) -> Result<PathBuf> {
    if let Some(parent) = image_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    generation.image.save_with_format(image_path, image::ImageFormat::Png)?;
    let sidecar_path = image_path.with_extension("json");
    let timing_path = image_path.with_extension("timing.json");
    let (w, h) = generation.image.dimensions();
    write_json(
        &sidecar_path,
        &Sidecar {
            config,
            backend,
            image: file_name(image_path),
            image_size: [w, h],
            image_sha256: hex::encode(Sha256::digest(generation.image.as_raw())),
            trajectory: &generation.trajectory,
            timing_file: file_name(&timing_path),
        },
    )?;
    write_json(
        &timing_path,
        &Timing {
            total_seconds: generation.step_seconds.iter().sum(),
            step_seconds: &generation.step_seconds,
        },
    )?;
    Ok(sidecar_path)
}

fn run_generation(flags: &ConfigFlags, image_path: &Path, dump_dir: Option<&Path>) -> Result<()> {
    let config = flags.resolve()?;
    let backend = open_backend(config.backend)?;
    let generation = match dump_dir {
        Some(dir) => {
            let mut dumper = AttentionDumper::new(dir, backend.denoiser().topology())?;
            let generation = generate_observed(&config, backend.as_ref(), &mut dumper)?;
            let manifest = dumper.finish()?;
            log::info!("attention maps: {}", manifest.display());
            generation
        }
        None => generate_observed(&config, backend.as_ref(), &mut ())?,
    };
    let sidecar = write_outputs(image_path, &config, backend.name(), &generation)?;
    log::info!("wrote {} and {}", image_path.display(), sidecar.display());
    Ok(())
}

enum Outcome {
    Done,
    Partial,
}

fn run_grid(args: &GridArgs, ablate: bool) -> Result<Outcome> {
    let embedder: Box<dyn Embedder> = match args.embedder.as_str() {
        "mock" => Box::new(MockEmbedder::default()),
        other => return Err(Error::config("embedder", format!("unknown embedder `{other}`"))),
    };
    if args.jobs == 0 {
        return Err(Error::config("jobs", "must be at least 1"));
    }
    let grid = BenchmarkGrid::load(&args.grid)?;
    let backend_kind = grid.cell_config(0, 0, &PartialConfig::default())?.backend;
    let backend = open_backend(backend_kind)?;
    let options = RunOptions {
        jobs: args.jobs,
        keep_images: args.save_images,
    };
    let run: BenchmarkRun = if ablate {
        run_ablation(&grid, backend.as_ref(), embedder.as_ref(), options)?
    } else {
        run_benchmark(&grid, backend.as_ref(), embedder.as_ref(), options)?
    };
    let files = write_report(&args.out, &run, args.csv.as_deref())?;
    for row in &run.table.rows {
        match row.mean {
            Some(mean) => println!("{:<12} {mean:.6}", row.label),
            None => println!("{:<12} -", row.label),
        }
    }
    match files.errors {
        Some(errors) => {
            log::error!("some cells failed; see {}", errors.display());
            Ok(Outcome::Partial)
        }
        None => Ok(Outcome::Done),
    }
}

fn run(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Generate(args) => {
            run_generation(&args.flags, &args.out, args.dump_attn.as_deref()).map(|_| Outcome::Done)
        }
        Command::DumpAttn(args) => {
            run_generation(&args.flags, &args.out.join("image.png"), Some(&args.out)).map(|_| Outcome::Done)
        }
        Command::Benchmark(args) => run_grid(args, false),
        Command::Ablate(args) => run_grid(args, true),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Warn,
        (false, 1) => log::LevelFilter::Info,
        (false, _) => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    match run(&cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
