use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fghash::attention::{
    attention_from_features, build_saliency, grid_from_saliency, grid_to_pgm, map_to_pgm,
    normalize_attention, zoom_image, DEFAULT_EPS, DEFAULT_RHO,
};
use fghash::checkpoint::Checkpoint;
use fghash::codes::{load_index, save_index, CodesFile};
use fghash::data::{
    batch_tensor, preprocess_eval, write_synthetic, Dataset, DatasetManifest, Image, Sample, Split,
    SyntheticSpec,
};
use fghash::gradsuite::{run_suite, SUITE_TOLERANCE};
use fghash::losses::{Balance, LossMask};
use fghash::net::{NetConfig, Network, SUPPORTED_BITS};
use fghash::retrieval::{mean_average_precision, rank_database, HashIndex};
use fghash::solver::{solve, LabelMatrix, SolverConfig};
use fghash::trainer::{
    encode_images, fit, metrics_from_text, metrics_to_text, EpochRecord, Probe, TrainConfig,
};
use fghash::{Error, Result};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Fine-grained image hashing with a cascaded network and a balanced two-task loss.
#[derive(Parser)]
#[command(name = "fghash", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset and write its manifest.
    GenData(GenData),
    /// Solve binary code targets for a label set.
    SolveCodes(SolveCodes),
    /// Train a network; the checkpoint is rewritten after every epoch.
    Train(Train),
    /// Encode a manifest split to binary codes with a trained checkpoint.
    Encode(Encode),
    /// Build a Hamming index from a codes file.
    Index(IndexCmd),
    /// Rank an index for one query code.
    Query(Query),
    /// Mean average precision of query codes against an index or themselves.
    EvalMap(EvalMap),
    /// Finite-difference check of every differentiable operation and the full loss.
    Gradcheck(Gradcheck),
    /// Plot a metrics log as SVG files.
    PlotMetrics(PlotMetrics),
}

#[derive(Args)]
struct GenData {
    /// Output directory; receives `manifest.txt` and `images/`.
    #[arg(long)]
    out: PathBuf,
    /// Treat `--out` as an existing `<split>/<class>/<image>` tree and only write its manifest.
    #[arg(long)]
    from_folder: bool,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 50)]
    train_per_class: usize,
    #[arg(long, default_value_t = 50)]
    test_per_class: usize,
    #[arg(long, default_value_t = 0)]
    retrieval_per_class: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct LabelSource {
    /// Take labels from this manifest instead of balanced ones.
    #[arg(long, conflicts_with_all = ["classes", "per_class"])]
    manifest: Option<PathBuf>,
    /// Split of the manifest to read labels from.
    #[arg(long, default_value = "train")]
    split: String,
    /// Balanced labels: number of classes.
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Balanced labels: samples per class.
    #[arg(long, default_value_t = 20)]
    per_class: usize,
}

#[derive(Args)]
struct SolveCodes {
    #[arg(long, default_value_t = 12)]
    bits: usize,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    #[command(flatten)]
    labels: LabelSource,
    /// Codes file to write.
    #[arg(long, default_value = "codes.bin")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MaskArg {
    Full,
    Org,
    Aug,
    HashOnly,
}

impl MaskArg {
    fn mask(self) -> LossMask {
        match self {
            MaskArg::Full => LossMask::FULL,
            MaskArg::Org => LossMask {
                cls_org: true,
                cls_aug: false,
            },
            MaskArg::Aug => LossMask {
                cls_org: false,
                cls_aug: true,
            },
            MaskArg::HashOnly => LossMask::HASH_ONLY,
        }
    }
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 12)]
    bits: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Stages feeding the global code, e.g. `1,2,3`.
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 3])]
    stages: Vec<usize>,
    /// Classification terms to keep.
    #[arg(long, value_enum, default_value = "full")]
    mask: MaskArg,
    /// Use `L_HASH + L_CLS` instead of learned weights.
    #[arg(long)]
    fixed_weights: bool,
    /// Metrics log path.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Evaluate test-split mAP against the training split after each epoch.
    #[arg(long)]
    probe: bool,
}

#[derive(Args)]
struct Encode {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
    /// Write attention, sampling-grid PGMs and zoomed PNGs for the first images here.
    #[arg(long)]
    dump_attention: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    dump_limit: usize,
}

#[derive(Args)]
struct IndexCmd {
    #[arg(long)]
    codes: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Query {
    #[arg(long)]
    index: PathBuf,
    /// Codes file holding the query.
    #[arg(long)]
    codes: PathBuf,
    /// Row of the codes file to use as the query.
    #[arg(long, default_value_t = 0)]
    id: usize,
    #[arg(long, default_value_t = 10)]
    top: usize,
}

#[derive(Args)]
struct EvalMap {
    /// Query codes.
    #[arg(long)]
    codes: PathBuf,
    /// Database index; without it the query codes are their own database, self excluded.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Also write the full report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct Gradcheck {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PlotMetrics {
    #[arg(long)]
    metrics: PathBuf,
    /// Directory receiving `weights.svg` and `losses.svg`.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) | Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::SolveCodes(a) => solve_codes(a),
        Command::Train(a) => train(a),
        Command::Encode(a) => encode(a),
        Command::Index(a) => index(a),
        Command::Query(a) => query(a),
        Command::EvalMap(a) => eval_map(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::PlotMetrics(a) => plot_metrics(a),
    }
}

fn parse_split(s: &str) -> Result<Split> {
    Split::parse(s)
        .ok_or_else(|| Error::Usage(format!("unknown split `{s}` (train, test or retrieval)")))
}

fn check_bits(k: usize) -> Result<()> {
    if SUPPORTED_BITS.contains(&k) {
        Ok(())
    } else {
        Err(Error::Usage(format!(
            "--bits must be one of {SUPPORTED_BITS:?}, got {k}"
        )))
    }
}

/// Loads a manifest and its images, resizing to the network input where needed.
fn load_dataset(manifest: &Path, size: usize) -> Result<Dataset> {
    let m = DatasetManifest::read(manifest)?;
    let root = manifest.parent().unwrap_or(Path::new("."));
    let mut data = m.load(root)?;
    for s in &mut data.samples {
        if s.image.height != size || s.image.width != size {
            s.image = s.image.resize(size, size);
        }
    }
    Ok(data)
}

fn gen_data(a: GenData) -> Result<()> {
    if a.from_folder {
        let m = DatasetManifest::scan_folder(&a.out)?;
        fs::write(a.out.join("manifest.txt"), m.to_text())?;
        println!(
            "wrote {} records to {}",
            m.records.len(),
            a.out.join("manifest.txt").display()
        );
        return Ok(());
    }
    let spec = SyntheticSpec {
        num_classes: a.classes,
        train_per_class: a.train_per_class,
        test_per_class: a.test_per_class,
        retrieval_per_class: a.retrieval_per_class,
        size: a.size,
        seed: a.seed,
        ..SyntheticSpec::default()
    };
    fs::create_dir_all(&a.out)?;
    let m = write_synthetic(&spec, &a.out)?;
    println!(
        "wrote {} records to {}",
        m.records.len(),
        a.out.join("manifest.txt").display()
    );
    println!("checksum {}", m.checksum);
    Ok(())
}

fn labels_from(src: &LabelSource) -> Result<(Vec<usize>, usize)> {
    match &src.manifest {
        Some(path) => {
            let m = DatasetManifest::read(path)?;
            let split = parse_split(&src.split)?;
            let labels: Vec<usize> = m
                .records
                .iter()
                .filter(|r| r.split == split)
                .map(|r| r.label)
                .collect();
            if labels.is_empty() {
                return Err(Error::Data(format!(
                    "split `{}` of {} is empty",
                    src.split,
                    path.display()
                )));
            }
            Ok((labels, m.num_classes))
        }
        None if src.classes == 0 || src.per_class == 0 => Err(Error::Usage(
            "--classes and --per-class must be positive".into(),
        )),
        None => Ok((
            (0..src.classes * src.per_class)
                .map(|i| i % src.classes)
                .collect(),
            src.classes,
        )),
    }
}

fn solve_codes(a: SolveCodes) -> Result<()> {
    if a.bits == 0 {
        return Err(Error::Usage("--bits must be positive".into()));
    }
    let (labels, l) = labels_from(&a.labels)?;
    let cfg = SolverConfig {
        sigma: a.sigma,
        seed: a.seed,
        max_iters: a.max_iters,
        ..SolverConfig::default()
    };
    let out = solve(&LabelMatrix::new(l, labels.clone())?, a.bits, &cfg)?;
    for (i, v) in out.trace.iter().enumerate() {
        println!("iteration {i} objective {v:.12}");
    }
    CodesFile::from_solver(&labels, l, &cfg, &out)?.save(&a.out)?;
    println!(
        "wrote {} codes of {} bits to {}",
        labels.len(),
        a.bits,
        a.out.display()
    );
    Ok(())
}

fn train(a: Train) -> Result<()> {
    check_bits(a.bits)?;
    let mut stages = a.stages.clone();
    stages.sort_unstable();
    stages.dedup();
    let data = load_dataset(&a.manifest, 64)?;
    let net_cfg = NetConfig::desk(a.bits, data.num_classes).with_enabled_stages(&stages);
    net_cfg
        .validate()
        .map_err(|e| Error::Usage(e.to_string()))?;
    let desk = TrainConfig::desk();
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr.unwrap_or(desk.lr),
        seed: a.seed,
        sigma: a.sigma,
        mask: a.mask.mask(),
        balance: if a.fixed_weights {
            Balance::Fixed
        } else {
            Balance::Learned
        },
        ..desk
    };
    let train = data.split(Split::Train);
    let probe = a.probe.then(|| Probe {
        queries: data.split(Split::Test),
        database: data.database(),
    });
    if let Some(p) = &probe {
        if p.queries.is_empty() {
            return Err(Error::Data("--probe needs a non-empty test split".into()));
        }
    }
    let mut log: Vec<EpochRecord> = Vec::new();
    let out = fit(&train, &net_cfg, &cfg, probe.as_ref(), &mut |r, ckpt| {
        println!("{}", r.to_line());
        ckpt.save(&a.out)?;
        log.push(r.clone());
        if let Some(m) = &a.metrics {
            fs::write(m, metrics_to_text(&log))?;
        }
        Ok(())
    })?;
    out.checkpoint.save(&a.out)?;
    if let Some(m) = &a.metrics {
        fs::write(m, metrics_to_text(&out.log))?;
    }
    println!("saved {}", a.out.display());
    Ok(())
}

fn encode(a: Encode) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let (_, h, w) = ckpt.network.config.input;
    let data = load_dataset(&a.manifest, h)?;
    if data.num_classes != ckpt.network.config.num_classes {
        return Err(Error::Data(format!(
            "manifest has {} classes, checkpoint {}",
            data.num_classes, ckpt.network.config.num_classes
        )));
    }
    let split = parse_split(&a.split)?;
    let samples: Vec<&Sample> = data.split(split);
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let codes = encode_images(&ckpt.network, &images)?;
    let file = CodesFile {
        num_classes: data.num_classes,
        labels: samples.iter().map(|s| s.label).collect(),
        codes,
        solver: None,
    };
    file.save(&a.out)?;
    println!("wrote {} codes to {}", file.codes.len(), a.out.display());
    if let Some(dir) = &a.dump_attention {
        dump_attention(
            &ckpt.network,
            &images[..images.len().min(a.dump_limit)],
            (h, w),
            dir,
        )?;
    }
    Ok(())
}

fn dump_attention(
    net: &Network,
    images: &[&Image],
    size: (usize, usize),
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let prepped: Vec<Image> = images.iter().map(|im| preprocess_eval(im)).collect();
    let refs: Vec<&Image> = prepped.iter().collect();
    let x = batch_tensor(&refs)?;
    let top = net.top_features(&x)?;
    let maps = attention_from_features(&top, size)?;
    let mut grids = Vec::with_capacity(maps.len());
    for (i, a) in maps.iter().enumerate() {
        let (s, _, _) = build_saliency(&normalize_attention(a), DEFAULT_RHO)?;
        let g = grid_from_saliency(&s, size, DEFAULT_EPS)?;
        fs::write(
            dir.join(format!("{i:04}_attention.pgm")),
            map_to_pgm(&normalize_attention(a)),
        )?;
        fs::write(dir.join(format!("{i:04}_saliency.pgm")), map_to_pgm(&s))?;
        fs::write(dir.join(format!("{i:04}_grid.pgm")), grid_to_pgm(&g, size))?;
        grids.push(g);
    }
    let zoomed = zoom_image(&x, &grids)?;
    let (c, h, w) = (3, size.0, size.1);
    for (i, src) in prepped.iter().enumerate() {
        src.save_png(&dir.join(format!("{i:04}_input.png")))?;
        let plane = &zoomed.data()[i * c * h * w..(i + 1) * c * h * w];
        let data = plane
            .iter()
            .map(|v| (v / 4.0 + 0.5).clamp(0.0, 1.0))
            .collect();
        Image::new(h, w, data)?.save_png(&dir.join(format!("{i:04}_zoomed.png")))?;
    }
    println!(
        "wrote attention dumps for {} images to {}",
        images.len(),
        dir.display()
    );
    Ok(())
}

fn index(a: IndexCmd) -> Result<()> {
    let f = CodesFile::load(&a.codes)?;
    let idx = HashIndex::new(f.codes, f.labels)?;
    save_index(&idx, f.num_classes, &a.out)?;
    println!(
        "indexed {} codes of {} bits into {}",
        idx.len(),
        idx.k(),
        a.out.display()
    );
    Ok(())
}

fn query(a: Query) -> Result<()> {
    let (idx, _) = load_index(&a.index)?;
    let f = CodesFile::load(&a.codes)?;
    let q = f.codes.get(a.id).ok_or_else(|| {
        Error::Usage(format!(
            "--id {} out of range for {} codes",
            a.id,
            f.codes.len()
        ))
    })?;
    println!("query {} label {}", a.id, f.labels[a.id]);
    println!("rank id label distance");
    for (rank, (id, d)) in rank_database(q, &idx)?.into_iter().take(a.top).enumerate() {
        println!("{} {id} {} {d}", rank + 1, idx.labels()[id]);
    }
    Ok(())
}

fn eval_map(a: EvalMap) -> Result<()> {
    let f = CodesFile::load(&a.codes)?;
    let report = match &a.index {
        Some(p) => {
            let (idx, _) = load_index(p)?;
            mean_average_precision(&f.codes, &f.labels, &idx, false)?
        }
        None => {
            let idx = HashIndex::new(f.codes.clone(), f.labels.clone())?;
            mean_average_precision(&f.codes, &f.labels, &idx, true)?
        }
    };
    println!("map {:.12}", report.map);
    println!(
        "queries {} database {} skipped {}",
        report.n_queries, report.n_database, report.skipped
    );
    if let Some(p) = &a.report {
        fs::write(p, report.to_text())?;
    }
    Ok(())
}

fn gradcheck(a: Gradcheck) -> Result<()> {
    let reports = run_suite(a.seed)?;
    let mut failed = 0;
    for r in &reports {
        let ok = r.passes(SUITE_TOLERANCE);
        failed += usize::from(!ok);
        println!(
            "{} {} max_rel_error={:.3e}",
            if ok { "PASS" } else { "FAIL" },
            r.label,
            r.max_rel_error()
        );
    }
    if failed > 0 {
        return Err(Error::Validation(format!(
            "{failed} of {} gradient checks failed",
            reports.len()
        )));
    }
    println!("all {} gradient checks passed", reports.len());
    Ok(())
}

fn plot_metrics(a: PlotMetrics) -> Result<()> {
    let text = fs::read_to_string(&a.metrics)?;
    let log = metrics_from_text(&text, &a.metrics)?;
    if log.is_empty() {
        return Err(Error::Data(format!(
            "{} holds no epochs",
            a.metrics.display()
        )));
    }
    fs::create_dir_all(&a.out)?;
    let x: Vec<f64> = log.iter().map(|r| r.epoch as f64).collect();
    let weights = svg_plot(
        "loss weights",
        &x,
        &[
            ("alpha", log.iter().map(|r| Some(r.alpha)).collect()),
            ("beta", log.iter().map(|r| Some(r.beta)).collect()),
        ],
    );
    let losses = svg_plot(
        "losses and probe mAP",
        &x,
        &[
            ("L_HASH", log.iter().map(|r| Some(r.hash)).collect()),
            ("L_cls_org", log.iter().map(|r| r.cls_org).collect()),
            ("L_cls_aug", log.iter().map(|r| r.cls_aug).collect()),
            ("L_TOTAL", log.iter().map(|r| Some(r.total)).collect()),
            ("probe mAP", log.iter().map(|r| r.probe_map).collect()),
        ],
    );
    fs::write(a.out.join("weights.svg"), weights)?;
    fs::write(a.out.join("losses.svg"), losses)?;
    println!(
        "wrote {} and {}",
        a.out.join("weights.svg").display(),
        a.out.join("losses.svg").display()
    );
    Ok(())
}

const COLORS: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

fn svg_plot(title: &str, x: &[f64], series: &[(&str, Vec<Option<f64>>)]) -> String {
    let (w, h, m) = (640.0, 360.0, 48.0);
    let vals = series.iter().flat_map(|(_, s)| s.iter().flatten().copied());
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    let (lo, hi) = if lo.is_finite() && hi > lo {
        (lo.min(0.0), hi)
    } else {
        (0.0, 1.0)
    };
    let x_max = x.last().copied().unwrap_or(0.0).max(1.0);
    let px = |e: f64| m + (w - 2.0 * m) * e / x_max;
    let py = |v: f64| h - m - (h - 2.0 * m) * (v - lo) / (hi - lo);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{m}\" y=\"20\" font-size=\"14\">{title}</text>\n\
         <line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{m}\" y=\"{lb}\">0</text><text x=\"{r}\" y=\"{lb}\" text-anchor=\"end\">epoch {x_max}</text>\n\
         <text x=\"4\" y=\"{m}\">{hi:.3}</text><text x=\"4\" y=\"{b}\">{lo:.3}</text>\n",
        b = h - m,
        r = w - m,
        lb = h - m + 16.0,
    );
    for (i, (name, ys)) in series.iter().enumerate() {
        let pts: Vec<String> = x
            .iter()
            .zip(ys)
            .filter_map(|(&e, v)| v.map(|v| format!("{:.2},{:.2}", px(e), py(v))))
            .collect();
        if pts.is_empty() {
            continue;
        }
        let color = COLORS[i % COLORS.len()];
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{name}</text>\n",
            w - m - 100.0,
            m + 16.0 * i as f64
        ));
    }
    s.push_str("</svg>\n");
    s
}
