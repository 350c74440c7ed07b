//! WebAssembly bindings for the static demo page in `www/`.

use fghash::attention::{
    build_saliency, grid_from_saliency, normalize_attention, zoom_image, AttentionMap, SamplingGrid,
};
use fghash::data::{Image, Split, SyntheticSpec};
use fghash::ndtensor::Tensor;
use fghash::retrieval::{mean_average_precision, rank_database, BinaryCode, HashIndex};
use fghash::solver::{solve, LabelMatrix, SolverConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

fn js_err(e: fghash::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn to_rgba(img: &Image) -> Vec<u8> {
    let plane = img.height * img.width;
    let mut out = Vec::with_capacity(4 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            out.push((img.data[ch * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(255);
    }
    out
}

fn from_rgba(rgba: &[u8], height: usize, width: usize) -> Result<Image, JsError> {
    let plane = height * width;
    if rgba.len() != 4 * plane {
        return Err(JsError::new(&format!(
            "expected {} RGBA bytes, got {}",
            4 * plane,
            rgba.len()
        )));
    }
    let mut data = vec![0.0; 3 * plane];
    for p in 0..plane {
        for ch in 0..3 {
            data[ch * plane + p] = rgba[4 * p + ch] as f64 / 255.0;
        }
    }
    Image::new(height, width, data).map_err(js_err)
}

fn gray_rgba(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .flat_map(|&v| {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g, 255]
        })
        .collect()
}

/// One 64x64 synthetic training image as RGBA.
#[wasm_bindgen]
pub fn render_sample(class: usize, index: usize, seed: u64) -> Result<Vec<u8>, JsError> {
    let spec = SyntheticSpec {
        seed,
        ..SyntheticSpec::default()
    };
    if class >= spec.num_classes {
        return Err(JsError::new(&format!(
            "class must be below {}",
            spec.num_classes
        )));
    }
    Ok(to_rgba(&spec.render(class, Split::Train, index)))
}

#[wasm_bindgen]
pub struct Zoom {
    zoomed: Vec<u8>,
    saliency: Vec<u8>,
    grid: Vec<f64>,
}

#[wasm_bindgen]
impl Zoom {
    pub fn zoomed(&self) -> Vec<u8> {
        self.zoomed.clone()
    }

    pub fn saliency(&self) -> Vec<u8> {
        self.saliency.clone()
    }

    /// Sampling coordinates as interleaved `(x, y)` in `[-1, 1]`, row major.
    pub fn grid(&self) -> Vec<f64> {
        self.grid.clone()
    }
}

/// Resamples an image so the region around `(row, col)` gets more pixels.
///
/// The attention is a bump of the given width over a faint floor; it then
/// goes through the same saliency and inverse-CDF stages as in training.
#[wasm_bindgen]
pub fn zoom_at(
    rgba: &[u8],
    height: usize,
    width: usize,
    row: f64,
    col: f64,
    bump: f64,
    rho: f64,
) -> Result<Zoom, JsError> {
    let img = from_rgba(rgba, height, width)?;
    let bump = bump.max(0.5);
    let values: Vec<f64> = (0..height * width)
        .map(|i| {
            let (r, c) = ((i / width) as f64, (i % width) as f64);
            0.02 + (-((r - row).powi(2) + (c - col).powi(2)) / (2.0 * bump * bump)).exp()
        })
        .collect();
    let a = normalize_attention(&AttentionMap::new(height, width, values).map_err(js_err)?);
    let (sal, _, _) = build_saliency(&a, rho).map_err(js_err)?;
    let grid = grid_from_saliency(&sal, (height, width), 1e-3).map_err(js_err)?;
    let x = Tensor::new(vec![1, 3, height, width], img.data.clone()).map_err(js_err)?;
    let z = zoom_image(&x, std::slice::from_ref(&grid)).map_err(js_err)?;
    let zoomed = Image::new(height, width, z.data().to_vec()).map_err(js_err)?;
    Ok(Zoom {
        zoomed: to_rgba(&zoomed),
        saliency: gray_rgba(&sal.values),
        grid: grid.coords,
    })
}

/// Identity sampling grid, for drawing the undistorted lattice.
#[wasm_bindgen]
pub fn identity_grid(height: usize, width: usize) -> Vec<f64> {
    SamplingGrid::identity(height, width).coords
}

#[wasm_bindgen]
pub struct Codes {
    labels: Vec<usize>,
    codes: Vec<BinaryCode>,
    trace: Vec<f64>,
    classes: usize,
}

/// Solves binary codes for `classes x per_class` balanced labels.
#[wasm_bindgen]
pub fn solve_codes(
    classes: usize,
    per_class: usize,
    bits: usize,
    sigma: f64,
    seed: u64,
) -> Result<Codes, JsError> {
    if classes == 0 || per_class == 0 || bits == 0 || bits > 64 {
        return Err(JsError::new(
            "classes and per_class must be positive, bits in 1..=64",
        ));
    }
    let labels: Vec<usize> = (0..classes * per_class).map(|i| i % classes).collect();
    let cfg = SolverConfig {
        sigma,
        seed,
        ..SolverConfig::default()
    };
    let out = solve(
        &LabelMatrix::new(classes, labels.clone()).map_err(js_err)?,
        bits,
        &cfg,
    )
    .map_err(js_err)?;
    let codes = out
        .state
        .codes
        .columns()
        .map(BinaryCode::from_signs)
        .collect::<Result<Vec<_>, _>>()
        .map_err(js_err)?;
    Ok(Codes {
        labels,
        codes,
        trace: out.trace,
        classes,
    })
}

#[wasm_bindgen]
impl Codes {
    /// Objective after initialization and after each sweep.
    pub fn trace(&self) -> Vec<f64> {
        self.trace.clone()
    }

    /// One line per class: the class id and its first sample's code as `+`/`-`.
    pub fn class_codes(&self) -> String {
        (0..self.classes)
            .filter_map(|c| {
                let i = self.labels.iter().position(|&l| l == c)?;
                let bits: String = self.codes[i]
                    .to_signs()
                    .iter()
                    .map(|&s| if s > 0 { '+' } else { '-' })
                    .collect();
                Some(format!("{c}: {bits}"))
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Flips each database bit with probability `flip`, ranks the database for
    /// sample `query` and reports the mAP over all queries.
    pub fn search(
        &self,
        flip: f64,
        seed: u64,
        query: usize,
        top: usize,
    ) -> Result<Search, JsError> {
        if query >= self.codes.len() {
            return Err(JsError::new(&format!(
                "query must be below {}",
                self.codes.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noisy = self
            .codes
            .iter()
            .map(|c| {
                let signs: Vec<i8> = c
                    .to_signs()
                    .iter()
                    .map(|&s| {
                        if rng.gen_bool(flip.clamp(0.0, 1.0)) {
                            -s
                        } else {
                            s
                        }
                    })
                    .collect();
                BinaryCode::from_signs(&signs)
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(js_err)?;
        let index = HashIndex::new(noisy, self.labels.clone()).map_err(js_err)?;
        let map = mean_average_precision(&self.codes, &self.labels, &index, true)
            .map_err(js_err)?
            .map;
        let ranking = rank_database(&self.codes[query], &index).map_err(js_err)?;
        let lines = ranking
            .iter()
            .filter(|&&(id, _)| id != query)
            .take(top)
            .map(|&(id, d)| {
                let hit = if self.labels[id] == self.labels[query] {
                    "match"
                } else {
                    ""
                };
                format!("{id:>4}  class {}  distance {d:>2}  {hit}", self.labels[id])
            })
            .collect::<Vec<_>>()
            .join("\n");
        Ok(Search { map, lines })
    }
}

#[wasm_bindgen]
pub struct Search {
    map: f64,
    lines: String,
}

#[wasm_bindgen]
impl Search {
    pub fn map(&self) -> f64 {
        self.map
    }

    pub fn lines(&self) -> String {
        self.lines.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zoom_keeps_shape_and_magnifies_the_click() {
        let rgba = render_sample(3, 0, 0).unwrap();
        let z = zoom_at(&rgba, 64, 64, 20.0, 40.0, 6.0, 0.25).unwrap();
        assert_eq!(z.zoomed().len(), rgba.len());
        let g = z.grid();
        let step = |c: usize| g[2 * (32 * 64 + c + 1)] - g[2 * (32 * 64 + c)];
        assert!(step(40) < step(5));
    }

    #[test]
    fn clean_codes_retrieve_perfectly() {
        let codes = solve_codes(4, 10, 12, 1.0, 0).unwrap();
        assert_eq!(codes.class_codes().lines().count(), 4);
        let s = codes.search(0.0, 0, 0, 5).unwrap();
        assert_eq!(s.map(), 1.0);
        assert_eq!(s.lines().lines().count(), 5);
        assert!(codes.search(0.4, 1, 0, 5).unwrap().map() < 1.0);
    }
}
