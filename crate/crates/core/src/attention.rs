//! Attention-guided zoom.
//!
//! The top-stage feature map is turned into a non-negative attention map,
//! normalised, multiplied by a Gaussian centred on its peak and converted to
//! a sampling grid by per-axis marginal inverse-CDF sampling. Zooming is plain
//! bilinear resampling through that grid and carries no gradient.

use crate::error::{Error, Result};
use crate::ndtensor::{Tape, Tensor};

/// Gaussian std as a fraction of `min(H, W)`.
pub const DEFAULT_RHO: f64 = 0.25;
/// Mass added to every marginal bin.
pub const DEFAULT_EPS: f64 = 1e-3;

/// Row-major `height x width` map of non-negative values.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl AttentionMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::dim(
                "attention map",
                &[height, width],
                &[values.len()],
            ));
        }
        Ok(AttentionMap {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, v: f64) -> Self {
        AttentionMap {
            height,
            width,
            values: vec![v; height * width],
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.width + c]
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `(row, col)` of the largest value; ties go to the smallest flat index.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }
}

/// Source coordinates in `[-1, 1]` for every output pixel, stored as `(x, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingGrid {
    pub height: usize,
    pub width: usize,
    pub coords: Vec<f64>,
    /// Gaussian centre `(row, col)` in saliency pixels, if one was used.
    pub center: Option<(usize, usize)>,
    pub std: f64,
}

impl SamplingGrid {
    /// Separable grid from per-axis coordinate lists.
    pub fn from_axes(xs: &[f64], ys: &[f64]) -> Self {
        let mut coords = Vec::with_capacity(xs.len() * ys.len() * 2);
        for &y in ys {
            for &x in xs {
                coords.push(x);
                coords.push(y);
            }
        }
        SamplingGrid {
            height: ys.len(),
            width: xs.len(),
            coords,
            center: None,
            std: 0.0,
        }
    }

    pub fn identity(height: usize, width: usize) -> Self {
        Self::from_axes(&linspace(width), &linspace(height))
    }

    pub fn x(&self, r: usize, c: usize) -> f64 {
        self.coords[2 * (r * self.width + c)]
    }

    pub fn y(&self, r: usize, c: usize) -> f64 {
        self.coords[2 * (r * self.width + c) + 1]
    }

    /// `[1, H', W', 2]` tensor for `grid_sample`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.height, self.width, 2], self.coords.clone()).expect("grid extent")
    }
}

/// `n` evenly spaced points from -1 to 1 inclusive.
pub fn linspace(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n)
        .map(|i| {
            if i == n - 1 {
                1.0
            } else {
                -1.0 + 2.0 * i as f64 / (n - 1) as f64
            }
        })
        .collect()
}

fn upsample_axis(src: usize, dst: usize, i: usize) -> (usize, usize, f64) {
    if src == 1 || dst == 1 {
        return (0, 0, 0.0);
    }
    let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
    let i0 = (pos.floor() as usize).min(src - 2);
    (i0, i0 + 1, pos - i0 as f64)
}

/// Channel sum of `ReLU(x_top)` per sample, bilinearly upsampled (corners aligned).
pub fn attention_from_features(x_top: &Tensor, out: (usize, usize)) -> Result<Vec<AttentionMap>> {
    let s = x_top.shape();
    if s.len() != 4 || s[2] < 2 || s[3] < 2 {
        return Err(Error::dim("attention_from_features", &[0, 0, 2, 2], s));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = out;
    let plane = h * w;
    let mut maps = Vec::with_capacity(n);
    for b in 0..n {
        let mut sum = vec![0.0; plane];
        for ch in 0..c {
            let src = &x_top.data()[(b * c + ch) * plane..][..plane];
            for (acc, &v) in sum.iter_mut().zip(src) {
                *acc += v.max(0.0);
            }
        }
        let mut values = Vec::with_capacity(oh * ow);
        for r in 0..oh {
            let (r0, r1, fy) = upsample_axis(h, oh, r);
            for col in 0..ow {
                let (c0, c1, fx) = upsample_axis(w, ow, col);
                let top = sum[r0 * w + c0] * (1.0 - fx) + sum[r0 * w + c1] * fx;
                let bot = sum[r1 * w + c0] * (1.0 - fx) + sum[r1 * w + c1] * fx;
                values.push(top * (1.0 - fy) + bot * fy);
            }
        }
        maps.push(AttentionMap::new(oh, ow, values)?);
    }
    Ok(maps)
}

/// `A / max(A)`; an all-zero map comes back unchanged.
pub fn normalize_attention(a: &AttentionMap) -> AttentionMap {
    let m = a.max();
    let mut out = a.clone();
    if m > 0.0 {
        out.values.iter_mut().for_each(|v| *v /= m);
    }
    out
}

/// Multiplies by an isotropic Gaussian centred at the argmax and renormalises.
pub fn build_saliency(
    a_star: &AttentionMap,
    rho: f64,
) -> Result<(AttentionMap, (usize, usize), f64)> {
    if !(rho > 0.0) {
        return Err(Error::Config(format!(
            "saliency rho must be positive, got {rho}"
        )));
    }
    let std = rho * a_star.height.min(a_star.width) as f64;
    let (cr, cc) = a_star.argmax();
    let denom = 2.0 * std * std;
    let mut out = a_star.clone();
    for r in 0..out.height {
        for c in 0..out.width {
            let d2 = (r as f64 - cr as f64).powi(2) + (c as f64 - cc as f64).powi(2);
            out.values[r * out.width + c] *= (-d2 / denom).exp();
        }
    }
    Ok((normalize_attention(&out), (cr, cc), std))
}

/// Inverse of the piecewise-linear CDF through knots at the pixel centres.
fn inverse_cdf_axis(marginal: &[f64], samples: usize) -> Vec<f64> {
    let n = marginal.len();
    if n == 1 || samples == 1 {
        return linspace(samples);
    }
    let knots = linspace(n);
    let mut cdf = Vec::with_capacity(n);
    cdf.push(0.0);
    for i in 1..n {
        let prev = cdf[i - 1];
        cdf.push(prev + 0.5 * (marginal[i - 1] + marginal[i]));
    }
    let total = cdf[n - 1];
    let mut out = Vec::with_capacity(samples);
    let mut seg = 0;
    for t in 0..samples {
        if t == 0 {
            out.push(-1.0);
            continue;
        }
        if t == samples - 1 {
            out.push(1.0);
            continue;
        }
        let q = total * t as f64 / (samples - 1) as f64;
        while seg + 2 < n && cdf[seg + 1] < q {
            seg += 1;
        }
        let span = cdf[seg + 1] - cdf[seg];
        let frac = ((q - cdf[seg]) / span).clamp(0.0, 1.0);
        let x = knots[seg] + frac * (knots[seg + 1] - knots[seg]);
        let floor = *out.last().unwrap();
        out.push(x.max(floor));
    }
    out
}

/// Marginal inverse-CDF grid of extent `out`.
pub fn grid_from_saliency(s: &AttentionMap, out: (usize, usize), eps: f64) -> Result<SamplingGrid> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!(
            "marginal floor eps must be positive, got {eps}"
        )));
    }
    let (oh, ow) = out;
    if oh == 0 || ow == 0 {
        return Err(Error::dim("grid_from_saliency", &[1, 1], &[oh, ow]));
    }
    if s.values.iter().all(|&v| v == 0.0) {
        return Ok(SamplingGrid::identity(oh, ow));
    }
    let mut rows = vec![eps; s.height];
    let mut cols = vec![eps; s.width];
    for r in 0..s.height {
        for c in 0..s.width {
            let v = s.at(r, c);
            rows[r] += v;
            cols[c] += v;
        }
    }
    Ok(SamplingGrid::from_axes(
        &inverse_cdf_axis(&cols, ow),
        &inverse_cdf_axis(&rows, oh),
    ))
}

/// Bilinear resampling of every image through its own grid.
pub fn zoom_image(images: &Tensor, grids: &[SamplingGrid]) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || s[0] != grids.len() {
        return Err(Error::dim("zoom_image", &[grids.len(), 0, 0, 0], s));
    }
    let (gh, gw) = (grids[0].height, grids[0].width);
    if grids.iter().any(|g| g.height != gh || g.width != gw) {
        return Err(Error::Usage("zoom grids differ in extent".into()));
    }
    let mut coords = Vec::with_capacity(grids.len() * gh * gw * 2);
    for g in grids {
        coords.extend_from_slice(&g.coords);
    }
    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let grid = tape.constant(Tensor::new(vec![grids.len(), gh, gw, 2], coords)?);
    let out = tape.grid_sample(x, grid)?;
    Ok(tape.value(out).clone())
}

/// Full chain from top-stage features to one grid per sample.
pub fn grids_from_features(
    x_top: &Tensor,
    image_size: (usize, usize),
    rho: f64,
    eps: f64,
) -> Result<Vec<SamplingGrid>> {
    attention_from_features(x_top, image_size)?
        .iter()
        .map(|a| {
            let a_star = normalize_attention(a);
            if a_star.values.iter().all(|&v| v == 0.0) {
                return Ok(SamplingGrid::identity(image_size.0, image_size.1));
            }
            let (sal, center, std) = build_saliency(&a_star, rho)?;
            let mut g = grid_from_saliency(&sal, image_size, eps)?;
            g.center = Some(center);
            g.std = std;
            Ok(g)
        })
        .collect()
}

/// Binary PGM (`P5`) of a map scaled so its maximum is white.
pub fn map_to_pgm(a: &AttentionMap) -> Vec<u8> {
    let m = a.max();
    let scale = if m > 0.0 { 255.0 / m } else { 0.0 };
    let mut out = format!("P5\n{} {}\n255\n", a.width, a.height).into_bytes();
    out.extend(
        a.values
            .iter()
            .map(|&v| (v * scale).round().clamp(0.0, 255.0) as u8),
    );
    out
}

/// Binary PGM of an 8-pixel checkerboard seen through the grid.
pub fn grid_to_pgm(g: &SamplingGrid, src: (usize, usize)) -> Vec<u8> {
    let (sh, sw) = src;
    let mut out = format!("P5\n{} {}\n255\n", g.width, g.height).into_bytes();
    for r in 0..g.height {
        for c in 0..g.width {
            let px = ((g.x(r, c) + 1.0) * 0.5 * (sw.max(2) - 1) as f64).round() as usize;
            let py = ((g.y(r, c) + 1.0) * 0.5 * (sh.max(2) - 1) as f64).round() as usize;
            out.push(if (px / 8 + py / 8).is_multiple_of(2) { 230 } else { 40 });
        }
    }
    out
}
