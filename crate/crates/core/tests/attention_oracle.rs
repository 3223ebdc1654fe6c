#![allow(clippy::needless_range_loop)]

mod common;

use rand::Rng;

use stylefuse::attention::{adain, attention, channel_statistics, cross_modal_adain_fusion, weighted_sum_fusion};
use stylefuse::tensor::FeatureMap;

use common::{random_features, rng};

/// Explicit exp/sum over every query-key pair, per head.
fn naive_attention(q: &FeatureMap, k: &FeatureMap, v: &FeatureMap, heads: usize) -> Vec<Vec<Vec<f64>>> {
    let (batch, nq, channels) = q.dim();
    let nk = k.tokens();
    let hd = channels / heads;
    let (q, k, v) = (q.view(), k.view(), v.view());
    let mut out = vec![vec![vec![0.0; channels]; nq]; batch];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..nq {
                let mut scores = Vec::with_capacity(nk);
                for j in 0..nk {
                    let mut dot = 0.0f64;
                    for d in 0..hd {
                        dot += f64::from(q[[b, i, h * hd + d]]) * f64::from(k[[b, j, h * hd + d]]);
                    }
                    scores.push(dot / (hd as f64).sqrt());
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                for d in 0..hd {
                    let mut acc = 0.0;
                    for j in 0..nk {
                        acc += exps[j] / total * f64::from(v[[b, j, h * hd + d]]);
                    }
                    out[b][i][h * hd + d] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn attention_matches_triple_loop_oracle() {
    let mut r = rng(1);
    for _ in 0..100 {
        let heads = r.random_range(1..=2usize);
        let channels = heads * r.random_range(1..=8 / heads);
        let nq = r.random_range(1..=8);
        let nk = r.random_range(1..=8);
        let batch = r.random_range(1..=2);
        let q = random_features(&mut r, batch, nq, channels);
        let k = random_features(&mut r, batch, nk, channels);
        let v = random_features(&mut r, batch, nk, channels);
        let got = attention(&q, &k, &v, heads).unwrap();
        let want = naive_attention(&q, &k, &v, heads);
        for b in 0..batch {
            for i in 0..nq {
                for c in 0..channels {
                    let diff = (f64::from(got.output.view()[[b, i, c]]) - want[b][i][c]).abs();
                    assert!(diff < 1e-6, "diff {diff} at ({b},{i},{c})");
                }
            }
        }
        assert!(got.map.max_row_sum_error() <= 1e-5);
        assert!(got.map.view().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
}

#[test]
fn three_token_four_channel_case() {
    let mut r = rng(3);
    let q = random_features(&mut r, 1, 3, 4);
    let k = random_features(&mut r, 1, 3, 4);
    let v = random_features(&mut r, 1, 3, 4);
    let got = attention(&q, &k, &v, 1).unwrap();
    let want = naive_attention(&q, &k, &v, 1);
    for i in 0..3 {
        for c in 0..4 {
            assert!((f64::from(got.output.view()[[0, i, c]]) - want[0][i][c]).abs() < 1e-6);
        }
    }
}

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

#[test]
fn adain_takes_on_style_statistics() {
    let mut r = rng(2);
    let mut checked = 0;
    while checked < 100 {
        let channels = r.random_range(1..=8);
        let (nx, ny) = (r.random_range(2..=16), r.random_range(2..=16));
        let x = random_features(&mut r, 1, nx, channels);
        let y = random_features(&mut r, 1, ny, channels);
        let (sx, sy) = (channel_statistics(&x), channel_statistics(&y));
        if sx.std.iter().chain(sy.std.iter()).any(|&s| s <= 1e-3) {
            continue;
        }
        checked += 1;
        let out = channel_statistics(&adain(&x, &y).unwrap());
        for c in 0..channels {
            let (mu, sigma) = (sy.mean[[0, c]], sy.std[[0, c]]);
            // means near zero make a relative bound meaningless; scale by sigma instead
            assert!((out.mean[[0, c]] - mu).abs() / mu.abs().max(sigma) < 1e-4);
            assert!(relative(out.std[[0, c]], sigma) < 1e-4);
        }
        let same = adain(&x, &x).unwrap();
        for (a, b) in same.view().iter().zip(x.view().iter()) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn fused_statistics_follow_the_style_branch() {
    let mut r = rng(4);
    for _ in 0..50 {
        let text = random_features(&mut r, 2, 6, 5);
        let style = random_features(&mut r, 2, 6, 5);
        let fused = cross_modal_adain_fusion(&text, &style).unwrap();
        let (got, want) = (channel_statistics(&fused), channel_statistics(&style));
        for (a, b) in got.mean.iter().zip(want.mean.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
        for (a, b) in got.std.iter().zip(want.std.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}

#[test]
fn matched_statistics_fuse_to_the_text_branch() {
    let mut r = rng(5);
    let text = random_features(&mut r, 1, 8, 4);
    // a token permutation keeps every per-channel statistic
    let mut rows: Vec<_> = text
        .view()
        .outer_iter()
        .next()
        .unwrap()
        .outer_iter()
        .map(|t| t.to_vec())
        .collect();
    rows.reverse();
    let style = FeatureMap::from_shape_vec((1, 8, 4), rows.concat()).unwrap();
    let fused = cross_modal_adain_fusion(&text, &style).unwrap();
    for (a, b) in fused.view().iter().zip(text.view().iter()) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn weighted_sum_matches_elementwise_oracle() {
    let mut r = rng(6);
    let text = random_features(&mut r, 2, 5, 3);
    let style = random_features(&mut r, 2, 5, 3);
    let out = weighted_sum_fusion(&text, &style, 0.5).unwrap();
    for ((o, t), s) in out.view().iter().zip(text.view().iter()).zip(style.view().iter()) {
        assert_eq!(*o, t + 0.5 * s);
    }
    assert_eq!(weighted_sum_fusion(&text, &style, 0.0).unwrap(), text);
}
