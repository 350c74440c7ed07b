//! Two-phase training: solve binary code targets for the training labels,
//! then fit the network and the loss weights by momentum SGD.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{grids_from_features, zoom_image, DEFAULT_EPS, DEFAULT_RHO};
use crate::checkpoint::Checkpoint;
use crate::data::{
    augment_train, batch_tensor, mix_seed, preprocess_eval, AugmentDraw, Image, Sample,
};
use crate::error::{Error, Result};
use crate::losses::{
    classification_loss, hash_regression_loss, smooth_labels, total_balanced_loss, Balance,
    ClsLosses, LossBreakdown, LossMask, LossWeights, DEFAULT_SMOOTHING,
};
use crate::ndtensor::{Tape, Tensor, Var};
use crate::net::{forward_with_zoom, Bound, NetConfig, Network};
use crate::retrieval::{encode_rows, mean_average_precision, BinaryCode, EvalReport, HashIndex};
use crate::solver::{solve, CodeMatrix, LabelMatrix, SolveOutcome, SolverConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub smoothing: f64,
    pub sigma: f64,
    pub mask: LossMask,
    pub balance: Balance,
    pub rho: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    /// Full-scale schedule: 150 epochs from a base rate of 0.008.
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 32,
            lr: 0.008,
            momentum: 0.9,
            weight_decay: 3e-4,
            seed: 0,
            smoothing: DEFAULT_SMOOTHING,
            sigma: 1.0,
            mask: LossMask::FULL,
            balance: Balance::Learned,
            rho: DEFAULT_RHO,
            eps: DEFAULT_EPS,
        }
    }
}

impl TrainConfig {
    /// 30 epochs on 64x64 synthetic data.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 30,
            lr: 0.06,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return bad(format!("smoothing {} outside [0, 1)", self.smoothing));
        }
        if !(self.sigma > 0.0) || !(self.rho > 0.0) || !(self.eps > 0.0) {
            return bad("sigma, rho and eps must be positive".into());
        }
        Ok(())
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            sigma: self.sigma,
            seed: self.seed,
            ..SolverConfig::default()
        }
    }
}

/// Base rate, x0.1 from half the epochs on, x0.01 from three quarters on.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let e = epoch as f64;
    let n = cfg.epochs as f64;
    if e >= 0.75 * n {
        cfg.lr * 0.01
    } else if e >= 0.5 * n {
        cfg.lr * 0.1
    } else {
        cfg.lr
    }
}

/// Momentum buffers, one per parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<Vec<f64>>,
    pub step: usize,
    pub lr: f64,
}

impl SgdState {
    pub fn new(sizes: impl IntoIterator<Item = usize>, lr: f64) -> Self {
        SgdState {
            velocity: sizes.into_iter().map(|n| vec![0.0; n]).collect(),
            step: 0,
            lr,
        }
    }
}

/// One parameter array with its gradient; a missing gradient counts as zero.
pub struct ParamSlot<'a> {
    pub name: &'a str,
    pub value: &'a mut [f64],
    pub grad: Option<&'a [f64]>,
    pub decay: bool,
}

/// `v <- m v + g + wd p; p <- p - lr v`, with `wd` only on decaying slots.
///
/// Nothing is updated when any gradient is non-finite.
pub fn sgd_step(
    slots: &mut [ParamSlot<'_>],
    state: &mut SgdState,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if slots.len() != state.velocity.len() {
        return Err(Error::dim(
            "sgd_step",
            &[state.velocity.len()],
            &[slots.len()],
        ));
    }
    for (slot, v) in slots.iter().zip(&state.velocity) {
        if slot.value.len() != v.len() || slot.grad.is_some_and(|g| g.len() != v.len()) {
            return Err(Error::dim(
                "sgd_step",
                &[v.len()],
                &[slot.value.len(), slot.grad.map_or(0, <[f64]>::len)],
            ));
        }
        if let Some(g) = slot.grad {
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(format!(
                    "{}[{i}] = {}",
                    slot.name, g[i]
                )));
            }
        }
    }
    for (slot, v) in slots.iter_mut().zip(&mut state.velocity) {
        let wd = if slot.decay { weight_decay } else { 0.0 };
        for i in 0..v.len() {
            let g = slot.grad.map_or(0.0, |g| g[i]);
            v[i] = momentum * v[i] + g + wd * slot.value[i];
            slot.value[i] -= state.lr * v[i];
        }
    }
    state.step += 1;
    Ok(())
}

/// One line of the metrics log. Masked branches are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub cls_org: Option<f64>,
    pub cls_aug: Option<f64>,
    pub hash: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub probe_map: Option<f64>,
}

pub const METRICS_TAG: &str = "fghash-metrics v1";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "na".to_string(), |x| x.to_string())
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} cls_org={} cls_aug={} hash={} total={} alpha={} beta={} lr={} probe_map={}",
            self.epoch,
            opt(self.cls_org),
            opt(self.cls_aug),
            self.hash,
            self.total,
            self.alpha,
            self.beta,
            self.lr,
            opt(self.probe_map)
        )
    }

    pub fn parse_line(line: &str) -> std::result::Result<Self, (String, String)> {
        let mut map = std::collections::BTreeMap::new();
        for part in line.split_whitespace() {
            let (k, v) = part.split_once('=').ok_or_else(|| {
                (
                    "record".to_string(),
                    format!("token `{part}` is not key=value"),
                )
            })?;
            map.insert(k, v);
        }
        let raw = |k: &str| {
            map.get(k)
                .copied()
                .ok_or_else(|| (k.to_string(), "missing".to_string()))
        };
        let num = |k: &str| -> std::result::Result<f64, (String, String)> {
            raw(k)?
                .parse::<f64>()
                .map_err(|_| (k.to_string(), "not a number".to_string()))
        };
        let maybe = |k: &str| -> std::result::Result<Option<f64>, (String, String)> {
            match raw(k)? {
                "na" => Ok(None),
                v => v
                    .parse::<f64>()
                    .map(Some)
                    .map_err(|_| (k.to_string(), "not a number".to_string())),
            }
        };
        Ok(EpochRecord {
            epoch: raw("epoch")?
                .parse()
                .map_err(|_| ("epoch".to_string(), "not an integer".to_string()))?,
            cls_org: maybe("cls_org")?,
            cls_aug: maybe("cls_aug")?,
            hash: num("hash")?,
            total: num("total")?,
            alpha: num("alpha")?,
            beta: num("beta")?,
            lr: num("lr")?,
            probe_map: maybe("probe_map")?,
        })
    }
}

pub fn metrics_to_text(log: &[EpochRecord]) -> String {
    let mut s = format!("{METRICS_TAG}\n");
    for r in log {
        let _ = writeln!(s, "{}", r.to_line());
    }
    s
}

pub fn metrics_from_text(text: &str, source: &std::path::Path) -> Result<Vec<EpochRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_TAG) {
        return Err(Error::format(
            source,
            "schema",
            format!("first line must be `{METRICS_TAG}`"),
        ));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| EpochRecord::parse_line(l).map_err(|(f, m)| Error::format(source, &f, m)))
        .collect()
}

/// Queries and database scored after every epoch.
pub struct Probe<'a> {
    pub queries: Vec<&'a Sample>,
    pub database: Vec<&'a Sample>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochRecord>,
    /// Loss weights in effect for the first update.
    pub initial_weights: LossWeights,
    pub codes: CodeMatrix,
    pub solve: SolveOutcome,
}

/// Per-epoch callback, e.g. for saving the running checkpoint.
pub type EpochHook<'a> = dyn FnMut(&EpochRecord, &Checkpoint) -> Result<()> + 'a;

/// Solves code targets for `train` and fits the network.
pub fn fit(
    train: &[&Sample],
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
    probe: Option<&Probe<'_>>,
    on_epoch: &mut EpochHook<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    net_cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let (_, h, w) = net_cfg.input;
    if let Some(s) = train
        .iter()
        .find(|s| s.image.height != h || s.image.width != w)
    {
        return Err(Error::Data(format!(
            "training image {}x{} does not match network input {h}x{w}",
            s.image.height, s.image.width
        )));
    }
    let labels = LabelMatrix::new(net_cfg.num_classes, train.iter().map(|s| s.label).collect())?;
    let solved = solve(&labels, net_cfg.code_bits, &cfg.solver_config())?;
    let codes = solved.state.codes.clone();

    let network = Network::new(net_cfg.clone(), cfg.seed)?;
    let mut ckpt = Checkpoint {
        network,
        weights: LossWeights::default(),
        epoch: 0,
    };
    let mut sgd = SgdState::new(
        ckpt.network
            .params
            .entries()
            .iter()
            .map(|(_, t)| t.len())
            .chain([1, 1]),
        cfg.lr,
    );
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let k = net_cfg.code_bits;
    let mut initial_weights = ckpt.weights;

    for epoch in 0..cfg.epochs {
        sgd.lr = lr_at(epoch, cfg);
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[
            cfg.seed,
            epoch as u64,
            0x5EED,
        ])));
        let mut sums = LossBreakdown::default();
        for batch in order.chunks(cfg.batch_size) {
            let images: Vec<Image> = batch
                .iter()
                .map(|&i| {
                    augment_train(
                        &train[i].image,
                        AugmentDraw::for_sample(cfg.seed, i as u64, epoch as u64),
                    )
                })
                .collect();
            let refs: Vec<&Image> = images.iter().collect();
            let ids: Vec<usize> = batch.iter().map(|&i| train[i].label).collect();
            let mut targets = Vec::with_capacity(batch.len() * k);
            for &i in batch {
                targets.extend(codes.column(i).iter().map(|&b| b as f64));
            }
            let targets = Tensor::new(vec![batch.len(), k], targets)?;
            let x = batch_tensor(&refs)?;
            if epoch == 0 && sgd.step == 0 && cfg.balance == Balance::Learned {
                ckpt.weights = balanced_weights(&ckpt, cfg, &x, &ids, &targets)?;
                initial_weights = ckpt.weights;
            }
            let b = train_batch(&mut ckpt, &mut sgd, cfg, &x, &ids, &targets)?;
            let n = batch.len() as f64;
            sums.cls_org += b.cls_org * n;
            sums.cls_aug += b.cls_aug * n;
            sums.hash += b.hash * n;
            sums.total += b.total * n;
        }
        let n = train.len() as f64;
        ckpt.epoch = epoch + 1;
        let probe_map = match probe {
            Some(p) => Some(evaluate(&ckpt.network, &p.queries, &p.database)?.map),
            None => None,
        };
        let record = EpochRecord {
            epoch,
            cls_org: cfg.mask.cls_org.then_some(sums.cls_org / n),
            cls_aug: cfg.mask.cls_aug.then_some(sums.cls_aug / n),
            hash: sums.hash / n,
            total: sums.total / n,
            alpha: ckpt.weights.alpha(),
            beta: ckpt.weights.beta(),
            lr: sgd.lr,
            probe_map,
        };
        on_epoch(&record, &ckpt)?;
        log.push(record);
    }
    Ok(TrainOutcome {
        checkpoint: ckpt,
        log,
        initial_weights,
        codes,
        solve: solved,
    })
}

struct BatchGraph {
    tape: Tape,
    params: Bound,
    raw: (Var, Var),
    cls: ClsLosses,
    hash: Var,
    total: Var,
}

fn build_batch(
    ckpt: &Checkpoint,
    cfg: &TrainConfig,
    x: &Tensor,
    labels: &[usize],
    code_targets: &Tensor,
) -> Result<BatchGraph> {
    let net_cfg = &ckpt.network.config;
    let (_, h, w) = net_cfg.input;
    let mut tape = Tape::new();
    let params = ckpt.network.params.bind(&mut tape, true);
    let raw = ckpt
        .weights
        .bind(&mut tape, cfg.balance == Balance::Learned);
    let xv = tape.constant(x.clone());
    let mask = cfg.mask;
    let out = forward_with_zoom(&mut tape, net_cfg, &params, xv, |tape, top| {
        if !mask.cls_aug {
            return Ok(None);
        }
        let grids = grids_from_features(tape.value(top), (h, w), cfg.rho, cfg.eps)?;
        let zoomed = zoom_image(x, &grids)?;
        Ok(Some(tape.constant(zoomed)))
    })?;

    let smoothed = smooth_labels(labels, net_cfg.num_classes, cfg.smoothing)?;
    let cls = classification_loss(&mut tape, out.logits_org, out.logits_aug, &smoothed, mask)?;
    let hash = hash_regression_loss(&mut tape, out.h_global, code_targets)?;
    let total = total_balanced_loss(&mut tape, hash, cls.cls, raw, cfg.balance)?;
    Ok(BatchGraph {
        tape,
        params,
        raw,
        cls,
        hash,
        total,
    })
}

/// Loss weights balanced for the current network on one batch, without updating anything.
pub fn balanced_weights(
    ckpt: &Checkpoint,
    cfg: &TrainConfig,
    x: &Tensor,
    labels: &[usize],
    code_targets: &Tensor,
) -> Result<LossWeights> {
    let g = build_batch(ckpt, cfg, x, labels, code_targets)?;
    LossWeights::balanced_for(
        g.tape.value(g.hash).item(),
        g.cls.cls.map(|v| g.tape.value(v).item()),
    )
}

/// Forward, backward and one SGD step on a normalised batch.
pub fn train_batch(
    ckpt: &mut Checkpoint,
    sgd: &mut SgdState,
    cfg: &TrainConfig,
    x: &Tensor,
    labels: &[usize],
    code_targets: &Tensor,
) -> Result<LossBreakdown> {
    let BatchGraph {
        mut tape,
        params: p,
        raw,
        cls,
        hash,
        total,
    } = build_batch(ckpt, cfg, x, labels, code_targets)?;
    tape.backward(total)?;

    let value = |v: Option<_>| v.map_or(0.0, |v| tape.value(v).item());
    let breakdown = LossBreakdown {
        cls_org: value(cls.org),
        cls_aug: value(cls.aug),
        cls: value(cls.cls),
        hash: tape.value(hash).item(),
        total: tape.value(total).item(),
        alpha: ckpt.weights.alpha(),
        beta: ckpt.weights.beta(),
    };

    let grads: Vec<Option<Vec<f64>>> = p
        .vars()
        .iter()
        .map(|(_, v)| tape.grad(*v).map(<[f64]>::to_vec))
        .chain([raw.0, raw.1].map(|v| tape.grad(v).map(<[f64]>::to_vec)))
        .collect();
    let mut raw_a = [ckpt.weights.raw_a];
    let mut raw_b = [ckpt.weights.raw_b];
    let mut slots: Vec<ParamSlot<'_>> = ckpt
        .network
        .params
        .entries_mut()
        .map(|(name, t)| (name, t.data_mut()))
        .chain([
            ("loss.raw_a", &mut raw_a[..]),
            ("loss.raw_b", &mut raw_b[..]),
        ])
        .zip(&grads)
        .map(|((name, value), g)| ParamSlot {
            name,
            decay: !name.starts_with("loss."),
            value,
            grad: g.as_deref(),
        })
        .collect();
    sgd_step(&mut slots, sgd, cfg.momentum, cfg.weight_decay)?;
    drop(slots);
    ckpt.weights = LossWeights {
        raw_a: raw_a[0],
        raw_b: raw_b[0],
    };
    Ok(breakdown)
}

/// Images per forward pass during evaluation.
const EVAL_BATCH: usize = 64;

/// Pre-sign codes for images after evaluation preprocessing, `n x k` row-major.
pub fn embed_images(network: &Network, images: &[&Image]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(images.len() * network.config.code_bits);
    for chunk in images.chunks(EVAL_BATCH) {
        let prepped: Vec<Image> = chunk.iter().map(|im| preprocess_eval(im)).collect();
        let refs: Vec<&Image> = prepped.iter().collect();
        out.extend_from_slice(network.embed(&batch_tensor(&refs)?)?.data());
    }
    Ok(out)
}

pub fn encode_images(network: &Network, images: &[&Image]) -> Result<Vec<BinaryCode>> {
    Ok(encode_rows(
        &embed_images(network, images)?,
        network.config.code_bits,
    ))
}

/// mAP of `queries` ranked against `database`.
pub fn evaluate(
    network: &Network,
    queries: &[&Sample],
    database: &[&Sample],
) -> Result<EvalReport> {
    let db_imgs: Vec<&Image> = database.iter().map(|x| &x.image).collect();
    let q_imgs: Vec<&Image> = queries.iter().map(|x| &x.image).collect();
    let db_codes = encode_images(network, &db_imgs)?;
    let index = HashIndex::new(db_codes, database.iter().map(|s| s.label).collect())?;
    let q_codes = encode_images(network, &q_imgs)?;
    let q_labels: Vec<usize> = queries.iter().map(|s| s.label).collect();
    mean_average_precision(&q_codes, &q_labels, &index, false)
}
