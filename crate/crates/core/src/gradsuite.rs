//! Finite-difference suite over every differentiable primitive and the
//! composed training loss of a small network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{grids_from_features, zoom_image, DEFAULT_EPS, DEFAULT_RHO};
use crate::error::Result;
use crate::losses::{
    classification_loss, hash_regression_loss, smooth_labels, total_balanced_loss, Balance,
    LossMask, LossWeights,
};
use crate::ndtensor::gradcheck::{check, GradReport, DEFAULT_STEP};
use crate::ndtensor::{Tape, Tensor, Var};
use crate::net::{forward_full, Bound, NetConfig, Network, StageSpec};

/// Tolerance every check must beat.
pub const SUITE_TOLERANCE: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values kept clear of the ReLU kink by at least 0.05.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(0.05..1.0);
        if rng.gen() {
            v
        } else {
            -v
        }
    })
}

/// Strictly distinct values, so max pooling has no ties.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.1).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape.to_vec(), v).expect("shape")
}

/// Weighted sum with fixed random weights, so every output entry matters.
fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random(tape.shape(x), &mut rng));
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

fn primitive_checks(rng: &mut ChaCha8Rng) -> Result<Vec<GradReport>> {
    let step = DEFAULT_STEP;
    let mut out = Vec::new();
    out.push(check(
        "matmul",
        &[("a", random(&[3, 4], rng)), ("b", random(&[4, 2], rng))],
        step,
        |t, v| {
            let m = t.matmul(v[0], v[1])?;
            weighted_sum(t, m, 1)
        },
    )?);
    out.push(check(
        "conv2d",
        &[
            ("input", random(&[2, 2, 5, 5], rng)),
            ("kernel", random(&[3, 2, 3, 3], rng)),
        ],
        step,
        |t, v| {
            let c = t.conv2d(v[0], v[1], 1, 1)?;
            weighted_sum(t, c, 2)
        },
    )?);
    out.push(check(
        "conv2d stride 2",
        &[
            ("input", random(&[1, 2, 7, 7], rng)),
            ("kernel", random(&[2, 2, 3, 3], rng)),
        ],
        step,
        |t, v| {
            let c = t.conv2d(v[0], v[1], 2, 0)?;
            weighted_sum(t, c, 3)
        },
    )?);
    let grid = Tensor::from_fn(&[1, 3, 4, 2], |i| -0.93 + 0.137 * i as f64 % 1.8);
    out.push(check(
        "grid_sample",
        &[("input", random(&[1, 2, 4, 5], rng)), ("grid", grid)],
        step,
        |t, v| {
            let s = t.grid_sample(v[0], v[1])?;
            weighted_sum(t, s, 4)
        },
    )?);
    out.push(check(
        "relu",
        &[("x", away_from_zero(&[2, 3, 4], rng))],
        step,
        |t, v| {
            let r = t.relu(v[0]);
            weighted_sum(t, r, 5)
        },
    )?);
    out.push(check(
        "maxpool2",
        &[("x", distinct(&[1, 2, 4, 6], rng))],
        step,
        |t, v| {
            let p = t.maxpool2(v[0])?;
            weighted_sum(t, p, 6)
        },
    )?);
    out.push(check(
        "global_avg_pool",
        &[("x", random(&[2, 3, 3, 4], rng))],
        step,
        |t, v| {
            let p = t.global_avg_pool(v[0])?;
            weighted_sum(t, p, 7)
        },
    )?);
    out.push(check(
        "add/sub/mul",
        &[("a", random(&[2, 3], rng)), ("b", random(&[2, 3], rng))],
        step,
        |t, v| {
            let s = t.add(v[0], v[1])?;
            let d = t.sub(v[0], v[1])?;
            let m = t.mul(s, d)?;
            weighted_sum(t, m, 8)
        },
    )?);
    out.push(check(
        "add_bias/scale",
        &[
            ("x", random(&[2, 3, 2, 2], rng)),
            ("bias", random(&[3], rng)),
        ],
        step,
        |t, v| {
            let b = t.add_bias(v[0], v[1])?;
            let s = t.scale(b, -1.7);
            weighted_sum(t, s, 9)
        },
    )?);
    out.push(check(
        "softplus/ln/powf",
        &[("x", random(&[5], rng))],
        step,
        |t, v| {
            let sp = t.softplus(v[0]);
            let l = t.ln(sp);
            let p = t.powf(sp, -2.0);
            let s = t.add(l, p)?;
            let a = t.add_scalar(s, 0.5);
            weighted_sum(t, a, 10)
        },
    )?);
    out.push(check(
        "concat_cols",
        &[("a", random(&[2, 3], rng)), ("b", random(&[2, 1], rng))],
        step,
        |t, v| {
            let c = t.concat_cols(&[v[0], v[1]])?;
            weighted_sum(t, c, 11)
        },
    )?);
    let targets = smooth_labels(&[2, 0], 5, 0.1)?;
    out.push(check(
        "softmax_cross_entropy",
        &[("logits", random(&[2, 5], rng))],
        step,
        |t, v| t.softmax_cross_entropy(v[0], &targets),
    )?);
    Ok(out)
}

/// Small network used by the composed check.
pub fn suite_network_config() -> NetConfig {
    NetConfig {
        stages: vec![
            StageSpec {
                in_channels: 3,
                out_channels: 3,
            },
            StageSpec {
                in_channels: 3,
                out_channels: 4,
            },
        ],
        feature_dim: 3,
        code_bits: 12,
        num_classes: 3,
        input: (3, 8, 8),
        enabled_stages: vec![1, 2],
    }
}

/// `L_TOTAL` of both branches against every parameter, `raw_a` and `raw_b`.
///
/// The zoomed image is fixed up front; the sampler passes no gradient.
pub fn full_model_check(seed: u64) -> Result<GradReport> {
    let cfg = suite_network_config();
    let net = Network::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D);
    let image = random(&[2, 3, 8, 8], &mut rng);
    let top = net.top_features(&image)?;
    let zoomed = zoom_image(
        &image,
        &grids_from_features(&top, (8, 8), DEFAULT_RHO, DEFAULT_EPS)?,
    )?;
    let labels = [0usize, 2];
    let smoothed = smooth_labels(&labels, cfg.num_classes, 0.1)?;
    let codes = Tensor::from_fn(&[2, 12], |i| if (i * 7 + 3) % 5 < 2 { 1.0 } else { -1.0 });
    let weights = LossWeights {
        raw_a: 0.4,
        raw_b: -0.3,
    };

    let names: Vec<String> = net
        .params
        .entries()
        .iter()
        .map(|(n, _)| n.clone())
        .collect();
    let mut inputs: Vec<(&str, Tensor)> = net
        .params
        .entries()
        .iter()
        .map(|(n, t)| (n.as_str(), t.clone()))
        .collect();
    inputs.push(("loss.raw_a", Tensor::scalar(weights.raw_a)));
    inputs.push(("loss.raw_b", Tensor::scalar(weights.raw_b)));

    check("full model L_TOTAL", &inputs, DEFAULT_STEP, |tape, vars| {
        let np = names.len();
        let bound = Bound::new(
            names
                .iter()
                .cloned()
                .zip(vars[..np].iter().copied())
                .collect(),
        );
        let x = tape.constant(image.clone());
        let z = tape.constant(zoomed.clone());
        let out = forward_full(tape, &cfg, &bound, x, Some(z))?;
        let cls = classification_loss(
            tape,
            out.logits_org,
            out.logits_aug,
            &smoothed,
            LossMask::FULL,
        )?;
        let hash = hash_regression_loss(tape, out.h_global, &codes)?;
        total_balanced_loss(
            tape,
            hash,
            cls.cls,
            (vars[np], vars[np + 1]),
            Balance::Learned,
        )
    })
}

/// Every primitive check followed by the composed one.
pub fn run_suite(seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = primitive_checks(&mut rng)?;
    reports.push(full_model_check(seed)?);
    Ok(reports)
}
