//! Backend contract checks, run against the toy backend.

mod common;

use ndarray::Array4;

use stylefuse::attention::attention_map;
use stylefuse::pipeline::backend::{Backend, BranchCondition, Fusion, Hooks, LayerKind, Taps};
use stylefuse::tensor::Embedding;
use stylefuse::toy::{build_toy, ToyBackend};
use stylefuse::Error;

use common::{bundle, random_latent, rng};

fn check_backend(backend: &dyn Backend) {
    let topology = backend.denoiser().topology();
    assert!(topology.self_attention().count() > 0);
    let mut ids: Vec<_> = topology.layers.iter().map(|l| l.id).collect();
    ids.dedup();
    assert_eq!(ids.len(), topology.layers.len(), "layer ids must be unique");
    for layer in &topology.layers {
        assert_eq!(topology.get(layer.id), Some(layer));
        assert_eq!(layer.channels % layer.heads, 0);
    }
    assert_eq!(backend.teacher().topology(), topology);

    let (c, h, w) = backend.latent_shape();
    let z = random_latent(&mut rng(0), (2, c, h, w));
    let conds = bundle(backend, "A red apple");
    let branches = [
        BranchCondition {
            text: &conds.text_pos,
            style: conds.style_pos.as_ref(),
        },
        BranchCondition {
            text: &conds.text_neg,
            style: None,
        },
    ];
    let predict = |hooks: &mut Hooks<'_>| {
        backend
            .denoiser()
            .predict(&z, 500, &branches, Fusion::CrossModalAdain, hooks)
            .unwrap()
    };
    let mut taps = Taps::default();
    let first = predict(&mut Hooks {
        taps: Some(&mut taps),
        ..Hooks::default()
    });
    assert_eq!(first, predict(&mut Hooks::none()), "predictions must be deterministic");
    assert_eq!(first.dim(), z.dim());

    // every self-attention map is observable and recomputable from its Q and K
    let self_layers: Vec<_> = topology.self_attention().collect();
    assert_eq!(taps.self_attention.len(), self_layers.len());
    for (tap, layer) in taps.self_attention.iter().zip(&self_layers) {
        assert_eq!(tap.layer, layer.id);
        let recomputed = attention_map(&tap.q, &tap.k, layer.heads).unwrap();
        for (a, b) in recomputed.view().iter().zip(tap.map.view().iter()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }
    assert_eq!(taps.cross_attention.len(), topology.cross_attention().count());

    // conditions must match the batch
    let err = backend
        .denoiser()
        .predict(&z, 500, &branches[..1], Fusion::CrossModalAdain, &mut Hooks::none())
        .unwrap_err();
    assert!(matches!(err, Error::Dimension(_)));

    let image = backend
        .decode(&z.slice(ndarray::s![..1, .., .., ..]).to_owned())
        .unwrap();
    let f = backend.vae_scale_factor() as u32;
    assert_eq!(image.dimensions(), (w as u32 * f, h as u32 * f));
    assert_eq!(backend.encode_text("x").unwrap(), backend.encode_text("x").unwrap());
    assert!(backend.is_stateless());
}

#[test]
fn toy_backend_conforms() {
    check_backend(&ToyBackend::new(0).unwrap());
    check_backend(&ToyBackend::new(3).unwrap());
}

#[test]
fn weights_depend_only_on_the_seed() {
    let (a, _) = build_toy(0).unwrap();
    let (b, _) = build_toy(0).unwrap();
    let (c, _) = build_toy(1).unwrap();
    assert_eq!(a.weight_checksum(), b.weight_checksum());
    assert_ne!(a.weight_checksum(), c.weight_checksum());
}

#[test]
fn topology_has_two_blocks_of_each_kind() {
    let backend = ToyBackend::new(0).unwrap();
    let topology = backend.denoiser().topology();
    let kinds: Vec<_> = topology.layers.iter().map(|l| l.kind).collect();
    assert_eq!(
        kinds,
        [
            LayerKind::SelfAttention,
            LayerKind::DualCrossAttention,
            LayerKind::SelfAttention,
            LayerKind::DualCrossAttention
        ]
    );
}

#[test]
fn dropping_the_style_branch_is_zero_weight_fusion() {
    let backend = ToyBackend::new(0).unwrap();
    let conds = bundle(&backend, "A red apple");
    let z = random_latent(&mut rng(4), (1, 4, 8, 8));
    let predict = |style: Option<&Embedding>, fusion| {
        backend
            .denoiser()
            .predict(
                &z,
                300,
                &[BranchCondition {
                    text: &conds.text_pos,
                    style,
                }],
                fusion,
                &mut Hooks::none(),
            )
            .unwrap()
    };
    assert_eq!(
        predict(None, Fusion::CrossModalAdain),
        predict(conds.style_pos.as_ref(), Fusion::WeightedSum { lambda: 0.0 })
    );
}

#[test]
fn malformed_inputs_are_rejected() {
    let backend = ToyBackend::new(0).unwrap();
    let text = backend.encode_text("x").unwrap();
    let cond = [BranchCondition {
        text: &text,
        style: None,
    }];
    let predict = |z: &Array4<f32>, cond: &[BranchCondition<'_>]| {
        backend
            .denoiser()
            .predict(z, 1, cond, Fusion::CrossModalAdain, &mut Hooks::none())
    };
    assert!(matches!(
        predict(&Array4::zeros((1, 3, 8, 8)), &cond),
        Err(Error::Dimension(_))
    ));
    let mut nan = Array4::zeros((1, 4, 8, 8));
    nan[[0, 0, 0, 0]] = f32::NAN;
    assert!(matches!(predict(&nan, &cond), Err(Error::Numeric(_))));
    let narrow = Embedding::zeros(8, 3);
    let bad = [BranchCondition {
        text: &narrow,
        style: None,
    }];
    assert!(matches!(
        predict(&Array4::zeros((1, 4, 8, 8)), &bad),
        Err(Error::Dimension(_))
    ));
    assert!(matches!(backend.encode_style(&[]), Err(Error::Encoder(_))));
}
