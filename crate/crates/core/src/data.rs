//! Images, the synthetic fine-grained dataset, manifests and the train/eval
//! preprocessing.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ndtensor::Tensor;

/// 3-channel CHW image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != 3 * height * width {
            return Err(Error::dim("Image", &[3, height, width], &[data.len()]));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let plane = height * width;
        let data = (0..3 * plane).map(|i| rgb[i / plane]).collect();
        Image {
            height,
            width,
            data,
        }
    }

    pub fn at(&self, ch: usize, r: usize, c: usize) -> f64 {
        self.data[(ch * self.height + r) * self.width + c]
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, p) in img.enumerate_pixels() {
            for ch in 0..3 {
                data[(ch * h + y as usize) * w + x as usize] = p[ch] as f64 / 255.0;
            }
        }
        Image {
            height: h,
            width: w,
            data,
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |ch: usize| {
                (self.at(ch, y as usize, x as usize) * 255.0)
                    .round()
                    .clamp(0.0, 255.0) as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_rgb8(&image::open(path)?.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Bilinear (corners aligned) resample of the window `[y0, y0+h) x [x0, x0+w)`.
    pub fn resample(&self, y0: f64, x0: f64, h: f64, w: f64, out_h: usize, out_w: usize) -> Image {
        let mut data = Vec::with_capacity(3 * out_h * out_w);
        let coord = |start: f64, len: f64, i: usize, n: usize, extent: usize| {
            let t = if n > 1 {
                i as f64 / (n - 1) as f64
            } else {
                0.5
            };
            (start + t * (len - 1.0)).clamp(0.0, (extent - 1) as f64)
        };
        for ch in 0..3 {
            for r in 0..out_h {
                let y = coord(y0, h, r, out_h, self.height);
                let (ya, fy) = split(y, self.height);
                for c in 0..out_w {
                    let x = coord(x0, w, c, out_w, self.width);
                    let (xa, fx) = split(x, self.width);
                    let (yb, xb) = ((ya + 1).min(self.height - 1), (xa + 1).min(self.width - 1));
                    let top = self.at(ch, ya, xa) * (1.0 - fx) + self.at(ch, ya, xb) * fx;
                    let bot = self.at(ch, yb, xa) * (1.0 - fx) + self.at(ch, yb, xb) * fx;
                    data.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
        Image {
            height: out_h,
            width: out_w,
            data,
        }
    }

    pub fn resize(&self, out_h: usize, out_w: usize) -> Image {
        self.resample(
            0.0,
            0.0,
            self.height as f64,
            self.width as f64,
            out_h,
            out_w,
        )
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        for ch in 0..3 {
            for r in 0..self.height {
                for c in 0..self.width {
                    out.data[(ch * self.height + r) * self.width + c] =
                        self.at(ch, r, self.width - 1 - c);
                }
            }
        }
        out
    }
}

fn split(v: f64, extent: usize) -> (usize, f64) {
    let i = (v.floor() as usize).min(extent - 1);
    (i, v - i as f64)
}

/// SplitMix64 finaliser over a sequence of words.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// One random crop-and-flip decision.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    /// Crop area as a fraction of the image.
    pub scale: f64,
    /// Crop origin as a fraction of the free margin, each in `[0, 1]`.
    pub offset: (f64, f64),
    pub flip: bool,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        scale: 1.0,
        offset: (0.0, 0.0),
        flip: false,
    };

    /// Draw for `(seed, sample id, epoch)`.
    pub fn for_sample(seed: u64, id: u64, epoch: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, id, epoch, 0xA06]));
        AugmentDraw {
            scale: rng.gen_range(0.7..=1.0),
            offset: (rng.gen(), rng.gen()),
            flip: rng.gen_bool(0.5),
        }
    }
}

/// Random-area square crop resized back to the input size, then optional flip.
pub fn augment_train(image: &Image, draw: AugmentDraw) -> Image {
    let side = draw.scale.sqrt();
    let (h, w) = (image.height as f64 * side, image.width as f64 * side);
    let y0 = draw.offset.0 * (image.height as f64 - h);
    let x0 = draw.offset.1 * (image.width as f64 - w);
    let out = image.resample(y0, x0, h, w, image.height, image.width);
    if draw.flip {
        out.flip_horizontal()
    } else {
        out
    }
}

/// Evaluation resize and crop sizes.
pub const EVAL_RESIZE: usize = 72;
pub const EVAL_CROP: usize = 64;

/// Resize to 72x72 and take the central 64x64 window.
pub fn preprocess_eval(image: &Image) -> Image {
    let big = image.resize(EVAL_RESIZE, EVAL_RESIZE);
    let off = (EVAL_RESIZE - EVAL_CROP) / 2;
    let mut data = Vec::with_capacity(3 * EVAL_CROP * EVAL_CROP);
    for ch in 0..3 {
        for r in 0..EVAL_CROP {
            for c in 0..EVAL_CROP {
                data.push(big.at(ch, r + off, c + off));
            }
        }
    }
    Image {
        height: EVAL_CROP,
        width: EVAL_CROP,
        data,
    }
}

/// Network input normalisation.
pub fn to_input(v: f64) -> f64 {
    (v - 0.5) * 4.0
}

/// Stacks images into a normalised `[N, 3, H, W]` batch.
pub fn batch_tensor(images: &[&Image]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Usage("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for im in images {
        if im.height != h || im.width != w {
            return Err(Error::dim("batch_tensor", &[h, w], &[im.height, im.width]));
        }
        data.extend(im.data.iter().map(|&v| to_input(v)));
    }
    Tensor::new(vec![images.len(), 3, h, w], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
    Retrieval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Retrieval => "retrieval",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            "retrieval" => Some(Split::Retrieval),
            _ => None,
        }
    }
}

/// Parameters of the synthetic fine-grained dataset.
///
/// Class `c` sets three binary attributes: stripe orientation, stripe scale
/// (fine or coarse) and body hue (warm or cool). Outline, position, size,
/// background, illumination, stripe phase and the appendage vary freely
/// within a class.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub retrieval_per_class: usize,
    pub size: usize,
    pub seed: u64,
    /// Maximum body-centre displacement in pixels.
    pub position_jitter: f64,
    /// Fine stripe width range in pixels; coarse classes double it.
    pub stroke_width: (f64, f64),
    /// Body hue jitter in degrees.
    pub hue_jitter: f64,
    /// Global brightness gain range.
    pub illumination: (f64, f64),
    /// Per-channel background spread around mid grey.
    pub background_jitter: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 8,
            train_per_class: 50,
            test_per_class: 50,
            retrieval_per_class: 0,
            size: 64,
            seed: 0,
            position_jitter: 10.0,
            stroke_width: (2.0, 4.5),
            hue_jitter: 25.0,
            illumination: (0.6, 1.4),
            background_jitter: 0.35,
        }
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > 8 {
            return Err(Error::Config(format!(
                "synthetic classes must be in 1..=8, got {}",
                self.num_classes
            )));
        }
        if self.size < 16 {
            return Err(Error::Config(format!(
                "synthetic size {} below 16",
                self.size
            )));
        }
        if self.train_per_class == 0 {
            return Err(Error::Config("train split is empty".into()));
        }
        Ok(())
    }

    /// Renders sample `index` of `class` in `split`, quantised to 8 bits.
    pub fn render(&self, class: usize, split: Split, index: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
            self.seed,
            class as u64,
            split as u64,
            index as u64,
        ]));
        let n = self.size;
        let s = n as f64 / 64.0;
        let vertical = class & 1 == 1;
        let coarse = class >> 1 & 1 == 1;
        let warm = class >> 2 & 1 == 0;

        let bj = self.background_jitter;
        let bg = [
            0.5 + rng.gen_range(-bj..=bj),
            0.5 + rng.gen_range(-bj..=bj),
            0.5 + rng.gen_range(-bj..=bj),
        ];
        let grad_dir: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let grad_amp = rng.gen_range(0.0..0.3);
        let gain = rng.gen_range(self.illumination.0..=self.illumination.1);

        let jitter = self.position_jitter * s;
        let cy = n as f64 / 2.0 + rng.gen_range(-jitter..=jitter);
        let cx = n as f64 / 2.0 + rng.gen_range(-jitter..=jitter);
        let radius = rng.gen_range(15.0..19.0) * s;
        let square = rng.gen_bool(0.5);
        let base_hue = if warm { 35.0 } else { 190.0 };
        let body = hsv(
            base_hue + rng.gen_range(-self.hue_jitter..=self.hue_jitter),
            rng.gen_range(0.3..0.5),
            rng.gen_range(0.6..0.8),
        );
        let stripe_dark = rng.gen_range(0.35..0.5);
        let stroke = rng.gen_range(self.stroke_width.0..=self.stroke_width.1)
            * s
            * if coarse { 2.0 } else { 1.0 };
        let period = stroke * rng.gen_range(2.0..2.4);
        let phase = rng.gen_range(0.0..period);

        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let app_r = rng.gen_range(5.5..7.0) * s;
        let (ay, ax) = (cy + radius * angle.sin(), cx + radius * angle.cos());
        let app = hsv(
            rng.gen_range(0.0..360.0),
            rng.gen_range(0.6..0.9),
            rng.gen_range(0.6..0.9),
        );

        let mut data = vec![0.0; 3 * n * n];
        for r in 0..n {
            for c in 0..n {
                let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
                let (dy, dx) = (y - cy, x - cx);
                let inside = if square {
                    dy.abs().max(dx.abs()) <= radius * 0.88
                } else {
                    dy * dy + dx * dx <= radius * radius
                };
                let shade = 1.0
                    + grad_amp
                        * ((x / n as f64 - 0.5) * grad_dir.cos()
                            + (y / n as f64 - 0.5) * grad_dir.sin());
                let mut px = bg;
                if inside {
                    px = body;
                    let along = if vertical { x } else { y };
                    if (along - phase).rem_euclid(period) < stroke {
                        px = [
                            px[0] * stripe_dark,
                            px[1] * stripe_dark,
                            px[2] * stripe_dark,
                        ];
                    }
                }
                if (y - ay).powi(2) + (x - ax).powi(2) <= app_r * app_r {
                    px = app;
                }
                for ch in 0..3 {
                    let noise: f64 = rng.gen_range(-0.04..0.04);
                    let v = (px[ch] * shade * gain + noise).clamp(0.0, 1.0);
                    data[(ch * n + r) * n + c] = (v * 255.0).round() / 255.0;
                }
            }
        }
        Image {
            height: n,
            width: n,
            data,
        }
    }

    /// All samples in manifest order: split, then class, then index.
    pub fn samples(&self) -> Vec<(Split, usize, usize)> {
        let mut out = Vec::new();
        for (split, per) in [
            (Split::Train, self.train_per_class),
            (Split::Test, self.test_per_class),
            (Split::Retrieval, self.retrieval_per_class),
        ] {
            for class in 0..self.num_classes {
                for i in 0..per {
                    out.push((split, class, i));
                }
            }
        }
        out
    }

    /// Renders the whole dataset in memory.
    pub fn generate(&self) -> Result<Dataset> {
        self.validate()?;
        let samples = self
            .samples()
            .into_iter()
            .map(|(split, class, i)| Sample {
                split,
                label: class,
                image: self.render(class, split, i),
            })
            .collect();
        Ok(Dataset {
            num_classes: self.num_classes,
            samples,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub split: Split,
    pub label: usize,
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    /// Retrieval split when present, otherwise train.
    pub fn database(&self) -> Vec<&Sample> {
        let r = self.split(Split::Retrieval);
        if r.is_empty() {
            self.split(Split::Train)
        } else {
            r
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
}

/// Line-oriented list of images with labels, splits and a content checksum.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub num_classes: usize,
    pub checksum: String,
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_TAG: &str = "fghash-manifest v1";

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{MANIFEST_TAG}\nclasses={}\nrecords={}\nchecksum={}\n",
            self.num_classes,
            self.records.len(),
            self.checksum
        );
        for r in &self.records {
            s.push_str(&format!(
                "{} {} {}\n",
                r.split.as_str(),
                r.label,
                r.path.display()
            ));
        }
        s
    }

    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        let mut lines = text.lines();
        let err = |field: &str, msg: String| Error::format(source, field, msg);
        if lines.next() != Some(MANIFEST_TAG) {
            return Err(err(
                "schema",
                format!("first line must be `{MANIFEST_TAG}`"),
            ));
        }
        let mut field = |name: &str| -> Result<String> {
            let line = lines.next().unwrap_or_default();
            line.strip_prefix(&format!("{name}="))
                .map(str::to_string)
                .ok_or_else(|| err(name, format!("expected `{name}=...`, got `{line}`")))
        };
        let num_classes: usize = field("classes")?
            .parse()
            .map_err(|_| err("classes", "not an integer".into()))?;
        let count: usize = field("records")?
            .parse()
            .map_err(|_| err("records", "not an integer".into()))?;
        let checksum = field("checksum")?;
        let records = lines
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, line)| {
                let mut parts = line.splitn(3, ' ');
                let (s, l, p) = (parts.next(), parts.next(), parts.next());
                let split = s
                    .and_then(Split::parse)
                    .ok_or_else(|| err("split", format!("record {i}: bad split in `{line}`")))?;
                let label: usize = l
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| err("label", format!("record {i}: bad label in `{line}`")))?;
                if label >= num_classes {
                    return Err(err(
                        "label",
                        format!("record {i}: label {label} >= classes {num_classes}"),
                    ));
                }
                let path = p.ok_or_else(|| err("path", format!("record {i}: missing path")))?;
                Ok(ManifestRecord {
                    path: PathBuf::from(path),
                    label,
                    split,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if records.len() != count {
            return Err(err(
                "records",
                format!("header says {count}, found {}", records.len()),
            ));
        }
        if !records.iter().any(|r| r.split == Split::Train) {
            return Err(err("split", "no train records".into()));
        }
        Ok(DatasetManifest {
            num_classes,
            checksum,
            records,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?, path)
    }

    /// SHA-256 over every record's path and file bytes, in order.
    pub fn compute_checksum(records: &[ManifestRecord], root: &Path) -> Result<String> {
        let mut hasher = Sha256::new();
        for r in records {
            hasher.update(r.path.to_string_lossy().as_bytes());
            hasher.update([0]);
            hasher.update(fs::read(root.join(&r.path))?);
        }
        Ok(hex::encode(hasher.finalize()))
    }

    /// Loads and checksum-verifies the images; paths resolve against `root`.
    pub fn load(&self, root: &Path) -> Result<Dataset> {
        let actual = Self::compute_checksum(&self.records, root)?;
        if actual != self.checksum {
            return Err(Error::format(
                root,
                "checksum",
                format!(
                    "image store mutated: manifest {}, files {}",
                    self.checksum, actual
                ),
            ));
        }
        let samples = self
            .records
            .iter()
            .map(|r| {
                Ok(Sample {
                    split: r.split,
                    label: r.label,
                    image: Image::load(&root.join(&r.path))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            num_classes: self.num_classes,
            samples,
        })
    }

    /// Manifest over an existing folder tree `root/<split>/<class>/<image>`.
    ///
    /// Class names are sorted and numbered densely.
    pub fn scan_folder(root: &Path) -> Result<Self> {
        let mut names = std::collections::BTreeSet::new();
        let mut found = Vec::new();
        for split in [Split::Train, Split::Test, Split::Retrieval] {
            let dir = root.join(split.as_str());
            if !dir.is_dir() {
                continue;
            }
            for class in sorted_entries(&dir)? {
                if !class.is_dir() {
                    continue;
                }
                let name = class.file_name().unwrap().to_string_lossy().to_string();
                names.insert(name.clone());
                for file in sorted_entries(&class)? {
                    let rel = file.strip_prefix(root).unwrap().to_path_buf();
                    found.push((split, name.clone(), rel));
                }
            }
        }
        let names: Vec<String> = names.into_iter().collect();
        let records: Vec<ManifestRecord> = found
            .into_iter()
            .map(|(split, name, path)| ManifestRecord {
                path,
                label: names.binary_search(&name).unwrap(),
                split,
            })
            .collect();
        if !records.iter().any(|r| r.split == Split::Train) {
            return Err(Error::Data(format!(
                "{} has no train/<class>/ images",
                root.display()
            )));
        }
        let checksum = Self::compute_checksum(&records, root)?;
        Ok(DatasetManifest {
            num_classes: names.len(),
            checksum,
            records,
        })
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    v.sort();
    Ok(v)
}

/// Renders the synthetic set as PNGs under `root/images` and writes `root/manifest.txt`.
pub fn write_synthetic(spec: &SyntheticSpec, root: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    fs::create_dir_all(root.join("images"))?;
    let mut records = Vec::new();
    for (split, class, i) in spec.samples() {
        let rel = PathBuf::from(format!("images/{}_{class}_{i:04}.png", split.as_str()));
        spec.render(class, split, i).save_png(&root.join(&rel))?;
        records.push(ManifestRecord {
            path: rel,
            label: class,
            split,
        });
    }
    let checksum = DatasetManifest::compute_checksum(&records, root)?;
    let manifest = DatasetManifest {
        num_classes: spec.num_classes,
        checksum,
        records,
    };
    fs::write(root.join("manifest.txt"), manifest.to_text())?;
    Ok(manifest)
}

/// Nearest-centroid accuracy in raw pixel space, trained on train, scored on test.
pub fn nearest_centroid_accuracy(data: &Dataset) -> f64 {
    let train = data.split(Split::Train);
    let test = data.split(Split::Test);
    let dim = train[0].image.data.len();
    let mut centroids = vec![vec![0.0; dim]; data.num_classes];
    let mut counts = vec![0usize; data.num_classes];
    for s in &train {
        counts[s.label] += 1;
        for (c, v) in centroids[s.label].iter_mut().zip(&s.image.data) {
            *c += v;
        }
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    let correct = test
        .iter()
        .filter(|s| {
            let best = (0..data.num_classes)
                .min_by(|&a, &b| {
                    let da: f64 = centroids[a]
                        .iter()
                        .zip(&s.image.data)
                        .map(|(c, v)| (c - v).powi(2))
                        .sum();
                    let db: f64 = centroids[b]
                        .iter()
                        .zip(&s.image.data)
                        .map(|(c, v)| (c - v).powi(2))
                        .sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            best == s.label
        })
        .count();
    correct as f64 / test.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            train_per_class: 3,
            test_per_class: 2,
            size: 32,
            ..SyntheticSpec::default()
        }
    }

    fn random_image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(16, 16, (0..3 * 256).map(|_| rng.gen()).collect()).unwrap()
    }

    #[test]
    fn default_spec_counts() {
        let spec = SyntheticSpec::default();
        assert_eq!(spec.samples().len(), 800);
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = small_spec();
        assert_eq!(spec.generate().unwrap(), spec.generate().unwrap());
        let other = SyntheticSpec {
            seed: 1,
            ..small_spec()
        };
        assert_ne!(
            spec.render(0, Split::Train, 0),
            other.render(0, Split::Train, 0)
        );
    }

    #[test]
    fn write_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec();
        let m = write_synthetic(&spec, dir.path()).unwrap();
        let again = tempfile::tempdir().unwrap();
        assert_eq!(
            write_synthetic(&spec, again.path()).unwrap().checksum,
            m.checksum
        );

        let text = fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
        let parsed = DatasetManifest::parse(&text, Path::new("manifest.txt")).unwrap();
        assert_eq!(parsed, m);
        assert_eq!(parsed.to_text(), text);
        let data = parsed.load(dir.path()).unwrap();
        assert_eq!(data, spec.generate().unwrap());
    }

    #[test]
    fn mutated_store_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_synthetic(&small_spec(), dir.path()).unwrap();
        let victim = dir.path().join(&m.records[3].path);
        let mut img = Image::load(&victim).unwrap();
        img.data[0] = 1.0 - img.data[0];
        img.save_png(&victim).unwrap();
        assert!(matches!(m.load(dir.path()), Err(Error::Format { .. })));
    }

    #[test]
    fn manifest_parse_errors_name_the_field() {
        let p = Path::new("m.txt");
        let bad = |t: &str, want: &str| match DatasetManifest::parse(t, p) {
            Err(Error::Format { field, .. }) => assert_eq!(field, want),
            other => panic!("{other:?}"),
        };
        bad("nope\n", "schema");
        bad(&format!("{MANIFEST_TAG}\nclasses=x\n"), "classes");
        bad(
            &format!("{MANIFEST_TAG}\nclasses=2\nrecords=1\nchecksum=0\ntrain 5 a.png\n"),
            "label",
        );
        bad(
            &format!("{MANIFEST_TAG}\nclasses=2\nrecords=2\nchecksum=0\ntrain 0 a.png\n"),
            "records",
        );
        bad(
            &format!("{MANIFEST_TAG}\nclasses=2\nrecords=1\nchecksum=0\ntest 0 a.png\n"),
            "split",
        );
    }

    #[test]
    fn folder_scan_numbers_classes() {
        let dir = tempfile::tempdir().unwrap();
        for (split, class) in [("train", "owl"), ("train", "crow"), ("test", "owl")] {
            let d = dir.path().join(split).join(class);
            fs::create_dir_all(&d).unwrap();
            random_image(1).save_png(&d.join("a.png")).unwrap();
        }
        let m = DatasetManifest::scan_folder(dir.path()).unwrap();
        assert_eq!(m.num_classes, 2);
        let labels: Vec<(Split, usize)> = m.records.iter().map(|r| (r.split, r.label)).collect();
        assert_eq!(
            labels,
            vec![(Split::Train, 0), (Split::Train, 1), (Split::Test, 1)]
        );
        assert_eq!(m.load(dir.path()).unwrap().samples.len(), 3);
    }

    #[test]
    fn flip_is_an_involution() {
        let img = random_image(2);
        let draw = AugmentDraw {
            scale: 0.8,
            offset: (0.3, 0.6),
            flip: true,
        };
        let once = augment_train(&img, draw);
        let unflipped = augment_train(
            &img,
            AugmentDraw {
                flip: false,
                ..draw
            },
        );
        assert_eq!(once.flip_horizontal(), unflipped);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
    }

    #[test]
    fn full_crop_without_flip_is_identity() {
        let img = random_image(3);
        let out = augment_train(&img, AugmentDraw::IDENTITY);
        let diff = out
            .data
            .iter()
            .zip(&img.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn augmentation_replays() {
        let img = random_image(4);
        let a = augment_train(&img, AugmentDraw::for_sample(7, 11, 3));
        let b = augment_train(&img, AugmentDraw::for_sample(7, 11, 3));
        assert_eq!(a, b);
        assert_ne!(
            AugmentDraw::for_sample(7, 11, 3),
            AugmentDraw::for_sample(7, 11, 4)
        );
        let d = AugmentDraw::for_sample(1, 2, 3);
        assert!((0.7..=1.0).contains(&d.scale));
    }

    #[test]
    fn eval_crop_of_72_is_central_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let big = Image::new(72, 72, (0..3 * 72 * 72).map(|_| rng.gen()).collect()).unwrap();
        let out = preprocess_eval(&big);
        assert_eq!((out.height, out.width), (64, 64));
        for ch in 0..3 {
            for r in [0, 17, 63] {
                for c in [0, 40, 63] {
                    assert!((out.at(ch, r, c) - big.at(ch, r + 4, c + 4)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn eval_constant_and_deterministic() {
        let flat = Image::filled(64, 64, [0.2, 0.4, 0.6]);
        let out = preprocess_eval(&flat);
        assert!(out.data[..4096].iter().all(|&v| (v - 0.2).abs() < 1e-12));
        let img = random_image(6).resize(64, 64);
        assert_eq!(preprocess_eval(&img), preprocess_eval(&img));
    }

    #[test]
    fn batch_tensor_shapes() {
        let (a, b) = (random_image(1), random_image(2));
        let t = batch_tensor(&[&a, &b]).unwrap();
        assert_eq!(t.shape(), &[2, 3, 16, 16]);
        assert_eq!(t.data()[0], to_input(a.data[0]));
        let c = Image::filled(8, 8, [0.0; 3]);
        assert!(batch_tensor(&[&a, &c]).is_err());
    }
}
