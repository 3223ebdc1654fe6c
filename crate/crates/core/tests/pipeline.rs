mod common;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Mutex;

use ndarray::Array4;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use stylefuse::guidance::{BranchEvaluation, ConditioningBundle, GuidanceMode, NoisePrediction};
use stylefuse::pipeline::backend::{Backend, BranchCondition, Denoiser, Fusion, Hooks, LayerTopology};
use stylefuse::pipeline::{
    denoise_step, generate, generate_observed, prepare_conditioning, FusionMode, GenerationConfig, LatentState,
    TimestepSchedule, TrajectoryRecorder,
};
use stylefuse::teacher::{run_guided, Models, TeacherConfig};
use stylefuse::tensor::Embedding;
use stylefuse::toy::{ToyBackend, ToyConfig};

use common::{bundle, fixture, random_latent, rng, sampling, step_params, toy};

const GOLDEN: &str = "golden.json";
const GOLDEN_SEEDS: [u64; 3] = [42, 7, 2024];

/// Recorded outputs of the toy backend. Regenerate with `STYLEFUSE_BLESS=1`.
#[derive(Debug, Default, Serialize, Deserialize)]
struct Golden {
    /// seed -> SHA-256 of the raw RGB pixels of the all-off 10-step run
    baseline: BTreeMap<u64, String>,
    /// SHA-256 of the little-endian f64 noise prediction for a zero latent and zero embeddings at t = 0
    bias_response: String,
    /// fixture file -> SHA-256 of its little-endian f32 style embedding
    style_embeddings: BTreeMap<String, String>,
}

fn blessing() -> bool {
    std::env::var_os("STYLEFUSE_BLESS").is_some()
}

fn load_golden() -> Golden {
    let text = std::fs::read_to_string(fixture(GOLDEN)).expect("golden fixture missing; run with STYLEFUSE_BLESS=1");
    serde_json::from_str(&text).unwrap()
}

static BLESS_LOCK: Mutex<()> = Mutex::new(());

fn check_golden(update: impl FnOnce(&mut Golden), read: impl FnOnce(&Golden)) {
    if blessing() {
        let _guard = BLESS_LOCK.lock().unwrap();
        let mut golden = std::fs::read_to_string(fixture(GOLDEN))
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default();
        update(&mut golden);
        std::fs::write(fixture(GOLDEN), serde_json::to_string_pretty(&golden).unwrap() + "\n").unwrap();
    } else {
        read(&load_golden());
    }
}

fn sha(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn baseline_config(seed: u64) -> GenerationConfig {
    let mut c = GenerationConfig::new("A red apple").baseline();
    c.style_image_path = Some(fixture("style_watercolor.png"));
    c.seed = seed;
    c.steps = 10;
    c
}

fn baseline_png(seed: u64) -> PathBuf {
    fixture(&format!("baseline_seed{seed}.png"))
}

#[test]
fn all_off_matches_the_recorded_baseline() {
    let backend = toy();
    let images: Vec<_> = GOLDEN_SEEDS
        .iter()
        .map(|&seed| (seed, generate(&baseline_config(seed), &backend).unwrap().image))
        .collect();
    check_golden(
        |g| {
            for (seed, image) in &images {
                image.save(baseline_png(*seed)).unwrap();
                g.baseline.insert(*seed, sha(image.as_raw()));
            }
        },
        |g| {
            for (seed, image) in &images {
                let recorded = image::open(baseline_png(*seed)).unwrap().into_rgb8();
                assert_eq!(image.as_raw(), recorded.as_raw(), "seed {seed}");
                assert_eq!(&sha(image.as_raw()), &g.baseline[seed]);
            }
        },
    );
}

#[test]
fn each_mechanism_changes_the_output() {
    let backend = toy();
    let base = generate(&baseline_config(42), &backend).unwrap().image;

    let mut adain = baseline_config(42);
    adain.fusion_mode = FusionMode::CrossModalAdain;
    let mut teacher = baseline_config(42);
    teacher.teacher_enabled = true;
    teacher.teacher_cutoff = 3;
    let mut scfg = baseline_config(42);
    scfg.negative_style_image_path = Some(fixture("style_negative.png"));
    scfg.scfg_mode = GuidanceMode::StyleCfg;

    for (name, config) in [("adain", adain), ("teacher", teacher), ("scfg", scfg)] {
        let image = generate(&config, &backend).unwrap().image;
        assert_ne!(image.as_raw(), base.as_raw(), "{name} left the output unchanged");
    }
}

#[test]
fn inert_settings_keep_the_baseline() {
    let backend = toy();
    let base = generate(&baseline_config(7), &backend).unwrap().image;
    let mut variants = Vec::new();
    let mut c = baseline_config(7);
    c.teacher_cutoff = 5;
    variants.push(("cutoff with teacher off", c));
    let mut c = baseline_config(7);
    c.lambda = Some(1.0);
    variants.push(("explicit lambda 1", c));
    let mut c = baseline_config(7);
    c.branch_evaluation = BranchEvaluation::Sequential;
    variants.push(("sequential branches", c));
    let mut c = baseline_config(7);
    c.scfg_weight = Some(1.5);
    variants.push(("style weight under text guidance", c));
    for (name, config) in variants {
        assert_eq!(
            generate(&config, &backend).unwrap().image.as_raw(),
            base.as_raw(),
            "{name}"
        );
    }
}

#[test]
fn generation_is_deterministic() {
    let backend = toy();
    let mut config = baseline_config(42);
    config.fusion_mode = FusionMode::CrossModalAdain;
    config.teacher_enabled = true;
    config.teacher_cutoff = 4;
    let a = generate(&config, &backend).unwrap();
    let b = generate(&config, &ToyBackend::new(0).unwrap()).unwrap();
    assert_eq!(a.image, b.image);
    assert_eq!(a.latent, b.latent);
    assert_eq!(a.trajectory, b.trajectory);
    let encode = |img: &image::RgbImage| {
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png).unwrap();
        out.into_inner()
    };
    assert_eq!(encode(&a.image), encode(&b.image));
}

#[test]
fn shapes_are_conserved() {
    let backend = toy();
    let mut config = baseline_config(1);
    config.teacher_enabled = true;
    config.teacher_cutoff = 2;
    let mut recorder = TrajectoryRecorder::default();
    let generation = generate_observed(&config, &backend, &mut recorder).unwrap();
    let (c, h, w) = backend.latent_shape();
    assert_eq!(recorder.steps.len(), 10);
    for (i, step) in recorder.steps.iter().enumerate() {
        assert_eq!(step.student.z.dim(), (1, c, h, w));
        assert_eq!(step.student.step_index, i + 1);
        assert!(step.student.is_finite());
    }
    let f = backend.vae_scale_factor() as u32;
    assert_eq!(generation.image.dimensions(), (w as u32 * f, h as u32 * f));
    assert_eq!(generation.trajectory.iter().filter(|s| s.teacher_active).count(), 2);
    assert_eq!(generation.step_seconds.len(), 10);
}

#[test]
fn matched_style_statistics_leave_the_trajectory_text_only() {
    let backend = ToyBackend::with_config(
        0,
        &ToyConfig {
            tie_style_projections: true,
            ..ToyConfig::default()
        },
    )
    .unwrap();
    let text = bundle(&backend, "A red apple").text_only();
    // the style branch sees the prompt itself through identical projections,
    // so its features have exactly the text branch's statistics
    let matched = ConditioningBundle {
        style_pos: Some(text.text_pos.clone()),
        ..text.clone()
    };
    let schedule = TimestepSchedule::new(10).unwrap();
    let init = LatentState::initial_noise(42, (1, 4, 8, 8), &schedule);
    let models = Models {
        teacher: backend.teacher(),
        student: backend.denoiser(),
    };
    // w = 0: only the positive branch, whose style input is the matched one, contributes
    let params = sampling(Fusion::CrossModalAdain, 1.0);
    let trajectory = |conds: &ConditioningBundle| {
        let mut recorder = TrajectoryRecorder::default();
        run_guided(
            models,
            &init,
            conds,
            &TeacherConfig::disabled(),
            &schedule,
            &params,
            &mut recorder,
        )
        .unwrap();
        recorder.steps
    };
    let (fused, plain) = (trajectory(&matched), trajectory(&text));
    for (a, b) in fused.iter().zip(&plain) {
        for (x, y) in a.student.z.iter().zip(b.student.z.iter()) {
            assert!((x - y).abs() <= 1e-5, "step {}: {x} vs {y}", a.step_index);
        }
    }
}

/// Scaled-linear betas from 0.00085 to 0.012 over 1000 steps, accumulated independently.
fn alpha_bar_oracle(t: u32) -> f64 {
    let (a, b) = (0.00085f64.sqrt(), 0.012f64.sqrt());
    (0..=t)
        .map(|i| 1.0 - (a + (b - a) * f64::from(i) / 999.0).powi(2))
        .product()
}

#[test]
fn schedule_matches_the_beta_oracle() {
    for steps in [1, 10, 50, 100] {
        let s = TimestepSchedule::new(steps).unwrap();
        let stride = 1000 / steps as u32;
        for (i, &t) in s.timesteps().iter().enumerate() {
            assert_eq!(t, (steps - 1 - i) as u32 * stride + 1);
            assert!((s.alpha_cumprod(i) - alpha_bar_oracle(t)).abs() < 1e-12);
        }
        assert_eq!(s.alpha_cumprod(steps), 1.0);
    }
}

#[test]
fn step_equals_hand_composed_sequence() {
    let backend = toy();
    let style = std::fs::read(fixture("style_watercolor.png")).unwrap();
    let schedule = TimestepSchedule::new(10).unwrap();
    let mut r = rng(8);
    let state = LatentState {
        z: random_latent(&mut r, (1, 4, 8, 8)),
        timestep: schedule.timestep(3),
        step_index: 3,
    };
    let conds = ConditioningBundle {
        text_pos: backend.encode_text("A red apple").unwrap(),
        text_neg: backend.encode_text("").unwrap(),
        style_pos: Some(backend.encode_style(&style).unwrap()),
        style_neg: None,
    };
    let params = step_params(GuidanceMode::TextCfg, 5.0, Fusion::CrossModalAdain);
    let got = denoise_step(
        backend.denoiser(),
        &state,
        &conds,
        &schedule,
        &params,
        &mut Hooks::none(),
    )
    .unwrap();

    // encode -> attend + fuse (per branch) -> guide -> DDIM
    let branch = |text: &Embedding| {
        backend
            .denoiser()
            .predict(
                &state.z,
                state.timestep,
                &[BranchCondition {
                    text,
                    style: conds.style_pos.as_ref(),
                }],
                Fusion::CrossModalAdain,
                &mut Hooks::none(),
            )
            .unwrap()
            .into_array()
    };
    let (c, n) = (branch(&conds.text_pos), branch(&conds.text_neg));
    let a = schedule.alpha_cumprod(3);
    let a_prev = schedule.alpha_cumprod(4);
    let mut want = state.z.clone();
    for (((x, &c), &n), out) in state.z.iter().zip(&c).zip(&n).zip(want.iter_mut()) {
        let eps = c + 4.0 * (c - n);
        let clean = (f64::from(*x) - (1.0 - a).sqrt() * eps) / a.sqrt();
        *out = (a_prev.sqrt() * clean + (1.0 - a_prev).sqrt() * eps) as f32;
    }
    assert_eq!(got.z, want);
    assert_eq!(got.step_index, 4);
    assert_eq!(got.timestep, schedule.timestep(4));
}

#[test]
fn degenerate_guidance_is_a_single_branch_update() {
    let backend = toy();
    let mut conds = bundle(&backend, "A red apple");
    conds.text_neg = conds.text_pos.clone();
    let schedule = TimestepSchedule::new(10).unwrap();
    let state = LatentState::initial_noise(3, (1, 4, 8, 8), &schedule);
    let params = step_params(GuidanceMode::TextCfg, 1.0, Fusion::CrossModalAdain);
    let got = denoise_step(
        backend.denoiser(),
        &state,
        &conds,
        &schedule,
        &params,
        &mut Hooks::none(),
    )
    .unwrap();
    let eps = backend
        .denoiser()
        .predict(
            &state.z,
            state.timestep,
            &[BranchCondition {
                text: &conds.text_pos,
                style: conds.style_pos.as_ref(),
            }],
            Fusion::CrossModalAdain,
            &mut Hooks::none(),
        )
        .unwrap();
    assert_eq!(got, schedule.step(&state, &eps).unwrap());
}

/// Returns the exact noise that separates `z` from a known clean latent.
struct NoiseOracle {
    clean: Array4<f32>,
    topology: LayerTopology,
}

impl Denoiser for NoiseOracle {
    fn topology(&self) -> &LayerTopology {
        &self.topology
    }

    fn predict(
        &self,
        z: &Array4<f32>,
        timestep: u32,
        conds: &[BranchCondition<'_>],
        _fusion: Fusion,
        hooks: &mut Hooks<'_>,
    ) -> stylefuse::Result<NoisePrediction> {
        hooks.validate(&self.topology)?;
        assert_eq!(conds.len(), z.dim().0);
        let a = alpha_bar_oracle(timestep);
        let mut eps = Array4::<f64>::zeros(z.dim());
        for (n, mut out) in eps.outer_iter_mut().enumerate() {
            let zn = z.index_axis(ndarray::Axis(0), n);
            out.zip_mut_with(&zn, |e, &x| *e = f64::from(x));
            out.zip_mut_with(&self.clean.index_axis(ndarray::Axis(0), 0), |e, &x0| {
                *e = (*e - a.sqrt() * f64::from(x0)) / (1.0 - a).sqrt();
            });
        }
        NoisePrediction::new(eps)
    }
}

#[test]
fn true_noise_reconstructs_the_clean_latent() {
    let mut r = rng(21);
    let clean = random_latent(&mut r, (1, 4, 8, 8));
    let oracle = NoiseOracle {
        clean: clean.clone(),
        topology: LayerTopology::default(),
    };
    let conds = ConditioningBundle {
        text_pos: Embedding::zeros(8, 16),
        text_neg: Embedding::zeros(8, 16),
        style_pos: None,
        style_neg: None,
    };
    for steps in [10, 50] {
        let schedule = TimestepSchedule::new(steps).unwrap();
        let noise = random_latent(&mut r, (1, 4, 8, 8));
        let init = LatentState {
            z: schedule.add_noise(&clean, &noise, 0).unwrap(),
            timestep: schedule.timestep(0),
            step_index: 0,
        };
        let models = Models {
            teacher: &oracle,
            student: &oracle,
        };
        let last = run_guided(
            models,
            &init,
            &conds,
            &TeacherConfig::disabled(),
            &schedule,
            &sampling(Fusion::CrossModalAdain, 5.0),
            &mut (),
        )
        .unwrap();
        let worst = last
            .z
            .iter()
            .zip(&clean)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        assert!(worst <= 1e-4, "{steps} steps: max error {worst}");
        assert_eq!(last.step_index, steps);
    }
}

#[test]
fn zero_input_gives_the_recorded_bias_response() {
    let backend = toy();
    let zeros = Embedding::zeros(8, 16);
    let style = Embedding::zeros(4, 16);
    let run = || {
        backend
            .denoiser()
            .predict(
                &Array4::zeros((1, 4, 8, 8)),
                0,
                &[BranchCondition {
                    text: &zeros,
                    style: Some(&style),
                }],
                Fusion::CrossModalAdain,
                &mut Hooks::none(),
            )
            .unwrap()
    };
    let eps = run();
    assert_eq!(eps, run());
    let bytes: Vec<u8> = eps.as_array().iter().flat_map(|v| v.to_le_bytes()).collect();
    let digest = sha(bytes);
    check_golden(
        |g| g.bias_response = digest.clone(),
        |g| assert_eq!(digest, g.bias_response),
    );
}

#[test]
fn conditioning_defaults_and_fixture_hashes() {
    let backend = toy();
    let mut config = GenerationConfig::new("A red apple");
    config.teacher_enabled = false;
    let conds = prepare_conditioning(&config, &backend).unwrap();
    assert_eq!(conds.text_neg, backend.encode_text("").unwrap());
    assert!(conds.style_pos.is_none() && conds.style_neg.is_none());

    let names = ["style_watercolor.png", "style_ink.png", "style_negative.png"];
    let digests: BTreeMap<String, String> = names
        .iter()
        .map(|name| {
            config.style_image_path = Some(fixture(name));
            let conds = prepare_conditioning(&config, &backend).unwrap();
            let style = conds.style_pos.unwrap();
            let again = backend.encode_style(&std::fs::read(fixture(name)).unwrap()).unwrap();
            assert_eq!(style, again);
            let bytes: Vec<u8> = style.view().iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.to_string(), sha(bytes))
        })
        .collect();
    check_golden(
        |g| g.style_embeddings = digests.clone(),
        |g| assert_eq!(digests, g.style_embeddings),
    );

    config.style_image_path = Some(fixture("does_not_exist.png"));
    assert!(matches!(
        prepare_conditioning(&config, &backend),
        Err(stylefuse::Error::Read { .. })
    ));
}

#[test]
fn text_only_run_is_plain_text_to_image() {
    let backend = toy();
    let mut config = GenerationConfig::new("A red apple").baseline();
    config.steps = 5;
    let plain = generate(&config, &backend).unwrap();
    config.fusion_mode = FusionMode::CrossModalAdain;
    // without a style image the fusion mode has nothing to act on
    assert_eq!(generate(&config, &backend).unwrap().image, plain.image);
}
