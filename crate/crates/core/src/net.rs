//! Cascaded multi-stage hashing network.
//!
//! A stack of conv(3x3)-ReLU-maxpool(2) stages produces maps `x_1 .. x_n`.
//! Each enabled stage goes through its own block (1x1 conv, ReLU, global
//! average pool) to a `d`-wide feature `f_j`; the concatenation of those is the
//! global hash feature, projected affinely to `k` pre-sign code values.
//!
//! The classification branch reuses the deepest stage's feature, maps it
//! through a raw-branch hash layer and a linear classifier. The attention-zoomed
//! image travels through exactly the same parameters.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ndtensor::{Tape, Tensor, Var};

/// Code lengths the network supports.
pub const SUPPORTED_BITS: [usize; 4] = [12, 24, 32, 48];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub stages: Vec<StageSpec>,
    /// Width `d` of every per-stage feature.
    pub feature_dim: usize,
    pub code_bits: usize,
    pub num_classes: usize,
    /// `(channels, height, width)`.
    pub input: (usize, usize, usize),
    /// 1-based stage numbers feeding the global fusion, ascending.
    pub enabled_stages: Vec<usize>,
}

impl NetConfig {
    /// 3-stage 16/32/64 backbone on 64x64 RGB input with all stages fused.
    pub fn desk(code_bits: usize, num_classes: usize) -> Self {
        NetConfig {
            stages: vec![
                StageSpec {
                    in_channels: 3,
                    out_channels: 16,
                },
                StageSpec {
                    in_channels: 16,
                    out_channels: 32,
                },
                StageSpec {
                    in_channels: 32,
                    out_channels: 64,
                },
            ],
            feature_dim: 32,
            code_bits,
            num_classes,
            input: (3, 64, 64),
            enabled_stages: vec![1, 2, 3],
        }
    }

    pub fn with_enabled_stages(mut self, stages: &[usize]) -> Self {
        self.enabled_stages = stages.to_vec();
        self
    }

    pub fn depth(&self) -> usize {
        self.stages.len()
    }

    pub fn fused_dim(&self) -> usize {
        self.feature_dim * self.enabled_stages.len()
    }

    /// `(channels, height, width)` of stage `j`'s output (1-based).
    pub fn stage_shape(&self, j: usize) -> (usize, usize, usize) {
        let (_, h, w) = self.input;
        (self.stages[j - 1].out_channels, h >> j, w >> j)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stages.is_empty() {
            return bad("network needs at least one stage".into());
        }
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return bad(format!("input extent {c}x{h}x{w} has a zero axis"));
        }
        let div = 1usize << self.stages.len();
        if h % div != 0 || w % div != 0 {
            return bad(format!(
                "input {h}x{w} not divisible by 2^{} = {div}",
                self.stages.len()
            ));
        }
        let mut prev = c;
        for (i, s) in self.stages.iter().enumerate() {
            if s.in_channels != prev || s.out_channels == 0 {
                return bad(format!(
                    "stage {} expects {} input channels, got {}",
                    i + 1,
                    prev,
                    s.in_channels
                ));
            }
            prev = s.out_channels;
        }
        if self.feature_dim == 0 || self.num_classes == 0 {
            return bad("feature_dim and num_classes must be positive".into());
        }
        if !SUPPORTED_BITS.contains(&self.code_bits) {
            return bad(format!(
                "code_bits {} not in {:?}",
                self.code_bits, SUPPORTED_BITS
            ));
        }
        if self.enabled_stages.is_empty() {
            return bad("enabled_stages is empty".into());
        }
        if !self.enabled_stages.windows(2).all(|p| p[0] < p[1]) {
            return bad(format!(
                "enabled_stages {:?} must be strictly ascending",
                self.enabled_stages
            ));
        }
        if self.enabled_stages[0] == 0 || *self.enabled_stages.last().unwrap() > self.depth() {
            return bad(format!(
                "enabled_stages {:?} outside 1..={}",
                self.enabled_stages,
                self.depth()
            ));
        }
        if *self.enabled_stages.last().unwrap() != self.depth() {
            return bad(format!(
                "enabled_stages {:?} must include the deepest stage {}",
                self.enabled_stages,
                self.depth()
            ));
        }
        Ok(())
    }

    /// Line-oriented `key=value` rendering used by checkpoints.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let stages: Vec<String> = self
            .stages
            .iter()
            .map(|st| format!("{}:{}", st.in_channels, st.out_channels))
            .collect();
        let enabled: Vec<String> = self.enabled_stages.iter().map(|j| j.to_string()).collect();
        let _ = writeln!(s, "stages={}", stages.join(","));
        let _ = writeln!(s, "feature_dim={}", self.feature_dim);
        let _ = writeln!(s, "code_bits={}", self.code_bits);
        let _ = writeln!(s, "num_classes={}", self.num_classes);
        let _ = writeln!(
            s,
            "input={}x{}x{}",
            self.input.0, self.input.1, self.input.2
        );
        let _ = writeln!(s, "enabled_stages={}", enabled.join(","));
        s
    }

    pub fn from_fields(fields: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            fields
                .get(k)
                .ok_or_else(|| Error::Validation(format!("missing config field `{k}`")))
        };
        let num = |k: &str, v: &str| {
            v.trim().parse::<usize>().map_err(|_| {
                Error::Validation(format!("config field `{k}`: `{v}` is not an integer"))
            })
        };
        let stages = get("stages")?
            .split(',')
            .map(|p| {
                let (a, b) = p.split_once(':').ok_or_else(|| {
                    Error::Validation(format!("config field `stages`: bad entry `{p}`"))
                })?;
                Ok(StageSpec {
                    in_channels: num("stages", a)?,
                    out_channels: num("stages", b)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let input: Vec<usize> = get("input")?
            .split('x')
            .map(|v| num("input", v))
            .collect::<Result<_>>()?;
        if input.len() != 3 {
            return Err(Error::Validation(
                "config field `input`: expected CxHxW".into(),
            ));
        }
        let cfg = NetConfig {
            stages,
            feature_dim: num("feature_dim", get("feature_dim")?)?,
            code_bits: num("code_bits", get("code_bits")?)?,
            num_classes: num("num_classes", get("num_classes")?)?,
            input: (input[0], input[1], input[2]),
            enabled_stages: get("enabled_stages")?
                .split(',')
                .map(|v| num("enabled_stages", v))
                .collect::<Result<_>>()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Named parameter tensors, in a canonical order derived from [`NetConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    entries: Vec<(String, Tensor)>,
}

pub fn stage_weight(j: usize) -> String {
    format!("stage{j}.weight")
}
pub fn stage_bias(j: usize) -> String {
    format!("stage{j}.bias")
}
pub fn block_weight(j: usize) -> String {
    format!("block{j}.weight")
}
pub fn block_bias(j: usize) -> String {
    format!("block{j}.bias")
}
pub fn stage_hash_weight(j: usize) -> String {
    format!("stage_hash{j}.weight")
}
pub fn stage_hash_bias(j: usize) -> String {
    format!("stage_hash{j}.bias")
}
/// Variance gain of the global hash head relative to fan-in scaling.
const HASH_HEAD_GAIN: f64 = 0.01;

pub const HASH_WEIGHT: &str = "hash.weight";
pub const HASH_BIAS: &str = "hash.bias";
pub const RAW_HASH_WEIGHT: &str = "raw_hash.weight";
pub const RAW_HASH_BIAS: &str = "raw_hash.bias";
pub const CLASSIFIER_WEIGHT: &str = "classifier.weight";
pub const CLASSIFIER_BIAS: &str = "classifier.bias";

impl NetParams {
    /// Expected `(name, shape)` list for a configuration.
    pub fn layout(cfg: &NetConfig) -> Vec<(String, Vec<usize>)> {
        let (d, k, l) = (cfg.feature_dim, cfg.code_bits, cfg.num_classes);
        let mut out = Vec::new();
        for (i, s) in cfg.stages.iter().enumerate() {
            let j = i + 1;
            out.push((stage_weight(j), vec![s.out_channels, s.in_channels, 3, 3]));
            out.push((stage_bias(j), vec![s.out_channels]));
        }
        for &j in &cfg.enabled_stages {
            let c = cfg.stages[j - 1].out_channels;
            out.push((block_weight(j), vec![d, c, 1, 1]));
            out.push((block_bias(j), vec![d]));
            out.push((stage_hash_weight(j), vec![d, k]));
            out.push((stage_hash_bias(j), vec![k]));
        }
        out.push((HASH_WEIGHT.into(), vec![cfg.fused_dim(), k]));
        out.push((HASH_BIAS.into(), vec![k]));
        out.push((RAW_HASH_WEIGHT.into(), vec![d, k]));
        out.push((RAW_HASH_BIAS.into(), vec![k]));
        out.push((CLASSIFIER_WEIGHT.into(), vec![k, l]));
        out.push((CLASSIFIER_BIAS.into(), vec![l]));
        out
    }

    /// He-normal weights (fan-in scaled), zero biases. The global hash
    /// head starts near zero so initial codes sit at the origin.
    pub fn init(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = Self::layout(cfg)
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    let fan_in: usize = if shape.len() == 4 {
                        shape[1..].iter().product()
                    } else {
                        shape[0]
                    };
                    let gain = if shape.len() == 4 {
                        2.0
                    } else if name == HASH_WEIGHT {
                        HASH_HEAD_GAIN
                    } else {
                        1.0
                    };
                    let normal =
                        Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
                    Tensor::from_fn(&shape, |_| normal.sample(&mut rng))
                };
                (name, t)
            })
            .collect();
        Ok(NetParams { entries })
    }

    /// Builds from named tensors, checking them against the layout.
    pub fn from_entries(cfg: &NetConfig, entries: Vec<(String, Tensor)>) -> Result<Self> {
        let layout = Self::layout(cfg);
        if layout.len() != entries.len() {
            return Err(Error::Validation(format!(
                "expected {} parameter arrays, got {}",
                layout.len(),
                entries.len()
            )));
        }
        for ((name, shape), (got_name, t)) in layout.iter().zip(&entries) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::Validation(format!(
                    "parameter `{got_name}` {:?} does not match expected `{name}` {:?}",
                    t.shape(),
                    shape
                )));
            }
            if !t.is_finite() {
                return Err(Error::Validation(format!(
                    "parameter `{name}` is not finite"
                )));
            }
        }
        Ok(NetParams { entries })
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), tape.leaf(t.clone(), trainable)))
            .collect();
        Bound { vars }
    }
}

/// Parameters recorded on a tape, addressable by name.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<(String, Var)>,
}

impl Bound {
    pub fn new(vars: Vec<(String, Var)>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn vars(&self) -> &[(String, Var)] {
        &self.vars
    }
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    pub stage_maps: Vec<Var>,
    /// `(stage number, f_j)` for each enabled stage, ascending.
    pub stage_features: Vec<(usize, Var)>,
    pub f_global: Var,
    /// Pre-sign global code values, `N x k`.
    pub h_global: Var,
    /// Pre-sign raw-branch code, `N x k`.
    pub c_org: Var,
    pub logits_org: Var,
    pub logits_aug: Option<Var>,
    /// `sign(H_j(f_j))` per enabled stage, each `N x k` over `{-1, +1}`.
    pub stage_codes: Vec<(usize, Tensor)>,
}

fn check_image(tape: &Tape, cfg: &NetConfig, image: Var) -> Result<()> {
    let s = tape.shape(image);
    let (c, h, w) = cfg.input;
    if s.len() != 4 || s[1] != c || s[2] != h || s[3] != w {
        return Err(Error::Config(format!(
            "image shape {s:?} does not match configured input {c}x{h}x{w}"
        )));
    }
    Ok(())
}

/// `x_1 = N_1(T)`, `x_j = N_j(x_{j-1})`.
pub fn forward_backbone(
    tape: &mut Tape,
    cfg: &NetConfig,
    p: &Bound,
    image: Var,
) -> Result<Vec<Var>> {
    check_image(tape, cfg, image)?;
    let mut maps = Vec::with_capacity(cfg.depth());
    let mut x = image;
    for j in 1..=cfg.depth() {
        let conv = tape.conv2d(x, p.var(&stage_weight(j)), 1, 1)?;
        let biased = tape.add_bias(conv, p.var(&stage_bias(j)))?;
        let act = tape.relu(biased);
        x = tape.maxpool2(act)?;
        maps.push(x);
    }
    Ok(maps)
}

/// Block `C_j` for one stage map: 1x1 conv to `d` channels, ReLU, average pool.
pub fn stage_block(tape: &mut Tape, p: &Bound, stage: usize, map: Var) -> Result<Var> {
    let conv = tape.conv2d(map, p.var(&block_weight(stage)), 1, 0)?;
    let biased = tape.add_bias(conv, p.var(&block_bias(stage)))?;
    let act = tape.relu(biased);
    tape.global_avg_pool(act)
}

/// `f_j = C_j(x_j)` for every enabled stage.
pub fn stage_features(
    tape: &mut Tape,
    cfg: &NetConfig,
    p: &Bound,
    maps: &[Var],
) -> Result<Vec<(usize, Var)>> {
    cfg.enabled_stages
        .iter()
        .map(|&j| {
            let map = *maps
                .get(j - 1)
                .ok_or_else(|| Error::Usage(format!("stage {j} map missing")))?;
            Ok((j, stage_block(tape, p, j, map)?))
        })
        .collect()
}

/// Concatenation of per-stage features in ascending stage order.
pub fn fuse_global(tape: &mut Tape, features: &[(usize, Var)]) -> Result<Var> {
    if features.is_empty() {
        return Err(Error::Usage("global fusion of zero stage features".into()));
    }
    if !features.windows(2).all(|w| w[0].0 < w[1].0) {
        let order: Vec<usize> = features.iter().map(|f| f.0).collect();
        return Err(Error::Usage(format!(
            "stage features must be in ascending stage order, got {order:?}"
        )));
    }
    if features.len() == 1 {
        return Ok(features[0].1);
    }
    let vars: Vec<Var> = features.iter().map(|f| f.1).collect();
    tape.concat_cols(&vars)
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add_bias(xw, b)
}

/// `h = f_global W^h + b`, the pre-sign global code.
pub fn hash_projection(tape: &mut Tape, p: &Bound, f_global: Var) -> Result<Var> {
    affine(tape, f_global, p.var(HASH_WEIGHT), p.var(HASH_BIAS))
}

/// Raw hash layer then linear classifier; returns `(pre-sign code, logits)`.
pub fn classify(tape: &mut Tape, p: &Bound, feature: Var) -> Result<(Var, Var)> {
    let code = affine(tape, feature, p.var(RAW_HASH_WEIGHT), p.var(RAW_HASH_BIAS))?;
    let logits = affine(tape, code, p.var(CLASSIFIER_WEIGHT), p.var(CLASSIFIER_BIAS))?;
    Ok((code, logits))
}

fn sign_tensor(t: &Tensor) -> Tensor {
    Tensor::new(
        t.shape().to_vec(),
        t.data()
            .iter()
            .map(|&v| if v >= 0.0 { 1.0 } else { -1.0 })
            .collect(),
    )
    .expect("same shape")
}

/// Both branches; the zoomed image is optional (evaluation omits it).
pub fn forward_full(
    tape: &mut Tape,
    cfg: &NetConfig,
    p: &Bound,
    image: Var,
    zoomed: Option<Var>,
) -> Result<ForwardOutputs> {
    forward_with_zoom(tape, cfg, p, image, |_, _| Ok(zoomed))
}

/// Like [`forward_full`], with the zoomed input produced from the raw
/// branch's deepest stage map once it is available.
pub fn forward_with_zoom<F>(
    tape: &mut Tape,
    cfg: &NetConfig,
    p: &Bound,
    image: Var,
    zoom: F,
) -> Result<ForwardOutputs>
where
    F: FnOnce(&mut Tape, Var) -> Result<Option<Var>>,
{
    let stage_maps = forward_backbone(tape, cfg, p, image)?;
    let feats = stage_features(tape, cfg, p, &stage_maps)?;
    let f_global = fuse_global(tape, &feats)?;
    let h_global = hash_projection(tape, p, f_global)?;

    let top = cfg.depth();
    let f_org = feats.last().expect("deepest stage enabled").1;
    let (c_org, logits_org) = classify(tape, p, f_org)?;

    let logits_aug = match zoom(tape, stage_maps[top - 1])? {
        Some(z) => {
            let maps = forward_backbone(tape, cfg, p, z)?;
            let f_aug = stage_block(tape, p, top, maps[top - 1])?;
            Some(classify(tape, p, f_aug)?.1)
        }
        None => None,
    };

    let mut stage_codes = Vec::with_capacity(feats.len());
    for &(j, f) in &feats {
        let h = affine(
            tape,
            f,
            p.var(&stage_hash_weight(j)),
            p.var(&stage_hash_bias(j)),
        )?;
        stage_codes.push((j, sign_tensor(tape.value(h))));
    }

    Ok(ForwardOutputs {
        stage_maps,
        stage_features: feats,
        f_global,
        h_global,
        c_org,
        logits_org,
        logits_aug,
        stage_codes,
    })
}

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: NetConfig,
    pub params: NetParams,
}

impl Network {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        let params = NetParams::init(&config, seed)?;
        Ok(Network { config, params })
    }

    /// Pre-sign global codes for a batch `[N, C, H, W]`, evaluation path.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let out = forward_full(&mut tape, &self.config, &p, x, None)?;
        Ok(tape.value(out.h_global).clone())
    }

    /// Deepest stage map for a batch, used to build attention.
    pub fn top_features(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let maps = forward_backbone(&mut tape, &self.config, &p, x)?;
        Ok(tape.value(*maps.last().unwrap()).clone())
    }
}
