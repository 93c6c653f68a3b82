//! Command-line entry point: config resolution, training, evaluation,
//! benchmarking, plotting, and synthetic-data generation.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bench::bench_step;
use crate::data::{gen_synthetic, load_cifar10, write_cifar10, Dataset, Split};
use crate::eval::{fit_linear_probe, knn_classify, ProbeConfig};
use crate::losses::{LossConfig, LossKind};
use crate::model::{load_checkpoint, EncoderConfig, Model, ProjectorConfig};
use crate::slicing::SliceplanConfig;
use crate::train::{write_metrics_csv, TrainConfig, Trainer};

#[derive(Debug, Parser)]
#[command(name = "whitebed", about = "Self-supervised representation learning workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an encoder with the configured self-supervised loss.
    Train(RunArgs),
    /// Linear-probe evaluation of a checkpoint.
    EvalLinear(EvalArgs),
    /// k-nearest-neighbor evaluation of a checkpoint.
    EvalKnn(EvalArgs),
    /// Time training steps with a per-segment breakdown.
    Bench(BenchArgs),
    /// Render metrics CSV columns as an SVG line chart.
    Plot(PlotArgs),
    /// Generate a synthetic dataset in the CIFAR-10 binary layout.
    GenData(GenDataArgs),
}

#[derive(Debug, Args, Clone)]
pub struct RunArgs {
    /// JSON run config; omitted fields take documented defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory (also honored via WHITEBED_DATA).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Zero wall-clock columns so repeated runs are byte-identical.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Checkpoint produced by `train`.
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value_t = 20)]
    steps: usize,
}

#[derive(Debug, Args)]
struct PlotArgs {
    /// Metrics CSV produced by `train`.
    #[arg(long)]
    csv: PathBuf,
    /// Comma-separated column names to plot against epoch.
    #[arg(long, default_value = "loss")]
    cols: String,
    /// Moving-average smoothing coefficient in [0, 1); 0 disables.
    #[arg(long, default_value_t = 0.0)]
    smooth: f64,
    /// Output SVG path; defaults to the CSV path with an .svg extension.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    per_class: usize,
    #[arg(long, default_value_t = 16)]
    test_per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Synthetic only: class and sample counts.
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    /// Keep only the first N train / test samples (reduced-scale runs).
    pub limit: Option<usize>,
    pub test_limit: Option<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            classes: 4,
            per_class: 64,
            test_per_class: 16,
            limit: None,
            test_limit: None,
        }
    }
}

/// Loss section of the run config; omitted fields inherit the per-kind
/// defaults (wmse: normalize+whiten, sub_size = 2·out_dim, τ = 0.5).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub kind: LossKind,
    pub d: Option<usize>,
    pub normalize: Option<bool>,
    pub whiten: Option<bool>,
    pub tau: Option<f64>,
    pub margin: Option<f64>,
    pub sub_size: Option<usize>,
    pub iterations: Option<usize>,
    pub ridge: Option<f64>,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            kind: LossKind::Wmse,
            d: None,
            normalize: None,
            whiten: None,
            tau: None,
            margin: None,
            sub_size: None,
            iterations: None,
            ridge: None,
        }
    }
}

impl LossSpec {
    /// Fill defaults from the embedding width and freeze every field so the
    /// emitted resolved config is fully explicit.
    pub fn resolve(&mut self, out_dim: usize) -> Result<LossConfig, String> {
        let d = self.d.unwrap_or(2);
        let mut cfg = match self.kind {
            LossKind::Wmse => LossConfig::wmse(d, out_dim),
            LossKind::BnMse => LossConfig::bn_mse(d, out_dim),
            LossKind::Contrastive | LossKind::Triplet => {
                let mut c = LossConfig::contrastive(0.5, true, false, out_dim);
                c.kind = self.kind;
                c.d = d;
                c.sliceplan = SliceplanConfig::with_default_sub_size(d, out_dim);
                c
            }
        };
        if let Some(v) = self.normalize {
            cfg.normalize = v;
        }
        if let Some(v) = self.whiten {
            cfg.whiten = v;
        }
        if let Some(v) = self.tau {
            cfg.tau = v;
        }
        if let Some(v) = self.margin {
            cfg.margin = v;
        }
        if let Some(v) = self.sub_size {
            cfg.sliceplan.sub_size = v;
        }
        if let Some(v) = self.iterations {
            cfg.sliceplan.iterations = v;
        }
        if let Some(v) = self.ridge {
            cfg.ridge = v;
        }
        cfg.validate().map_err(|e| e.to_string())?;
        self.d = Some(cfg.d);
        self.normalize = Some(cfg.normalize);
        self.whiten = Some(cfg.whiten);
        self.tau = Some(cfg.tau);
        self.margin = Some(cfg.margin);
        self.sub_size = Some(cfg.sliceplan.sub_size);
        self.iterations = Some(cfg.sliceplan.iterations);
        self.ridge = Some(cfg.ridge);
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub warmup_iters: usize,
    pub drop_factor: f64,
    pub drop_epochs: [usize; 2],
    pub batch_origins: usize,
    pub weight_decay: f64,
    pub decoupled_weight_decay: bool,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    pub eval_every: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::new(20, LossConfig::wmse(2, 64));
        Self {
            epochs: 20,
            lr: t.lr,
            warmup_iters: t.warmup_iters,
            drop_factor: t.drop_factor,
            drop_epochs: t.drop_epochs,
            batch_origins: t.batch_origins,
            weight_decay: t.weight_decay,
            decoupled_weight_decay: t.decoupled_weight_decay,
            adam_betas: t.adam_betas,
            adam_eps: t.adam_eps,
            eval_every: t.eval_every,
        }
    }
}

fn default_encoder() -> EncoderConfig {
    EncoderConfig::smallconv(32)
}

fn default_projector() -> ProjectorConfig {
    ProjectorConfig::new(64)
}

fn default_knn_k() -> usize {
    5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default = "default_encoder")]
    pub encoder: EncoderConfig,
    #[serde(default = "default_projector")]
    pub projector: ProjectorConfig,
    #[serde(default)]
    pub loss: LossSpec,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default = "default_knn_k")]
    pub knn_k: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            encoder: default_encoder(),
            projector: default_projector(),
            loss: LossSpec::default(),
            train: TrainSection::default(),
            probe: ProbeConfig::default(),
            knn_k: default_knn_k(),
            seed: 0,
            data_dir: None,
            out_dir: None,
            deterministic: false,
        }
    }
}

/// A run config with every default made explicit plus the assembled
/// TrainConfig, ready to execute and to emit as resolved_config.json.
#[derive(Debug)]
pub struct Resolved {
    pub run: RunConfig,
    pub train_cfg: TrainConfig,
    pub out_dir: PathBuf,
    pub data_dir: Option<PathBuf>,
    pub digest: String,
}

/// Read, override, validate, and default-fill a run configuration.
pub fn parse_config(path: Option<&Path>, args: &RunArgs) -> Result<Resolved, String> {
    let mut run: RunConfig = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        run.seed = seed;
    }
    if let Some(dir) = &args.data_dir {
        run.data_dir = Some(dir.clone());
    }
    if let Some(dir) = &args.out_dir {
        run.out_dir = Some(dir.clone());
    }
    if args.deterministic {
        run.deterministic = true;
    }
    run.encoder.validate().map_err(|e| e.to_string())?;
    run.projector.validate().map_err(|e| e.to_string())?;
    run.probe.validate().map_err(|e| e.to_string())?;
    let loss = run.loss.resolve(run.projector.out_dim)?;
    let mut train_cfg = TrainConfig::new(run.train.epochs, loss);
    train_cfg.lr = run.train.lr;
    train_cfg.warmup_iters = run.train.warmup_iters;
    train_cfg.drop_factor = run.train.drop_factor;
    train_cfg.drop_epochs = run.train.drop_epochs;
    train_cfg.batch_origins = run.train.batch_origins;
    train_cfg.weight_decay = run.train.weight_decay;
    train_cfg.decoupled_weight_decay = run.train.decoupled_weight_decay;
    train_cfg.adam_betas = run.train.adam_betas;
    train_cfg.adam_eps = run.train.adam_eps;
    train_cfg.eval_every = run.train.eval_every;
    train_cfg.seed = run.seed;
    train_cfg.validate().map_err(|e| e.to_string())?;
    let out_dir = run.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    let data_dir = run
        .data_dir
        .clone()
        .or_else(|| std::env::var_os("WHITEBED_DATA").map(PathBuf::from));
    let canonical = serde_json::to_string(&run).map_err(|e| e.to_string())?;
    let digest = fnv1a_hex(canonical.as_bytes());
    Ok(Resolved { run, train_cfg, out_dir, data_dir, digest })
}

fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

fn emit_resolved(resolved: &Resolved) -> Result<(), String> {
    fs::create_dir_all(&resolved.out_dir).map_err(|e| e.to_string())?;
    let path = resolved.out_dir.join("resolved_config.json");
    let text = serde_json::to_string_pretty(&resolved.run).map_err(|e| e.to_string())?;
    fs::write(&path, text).map_err(|e| format!("{}: {e}", path.display()))
}

fn load_datasets(resolved: &Resolved) -> Result<(Dataset, Dataset), String> {
    let cfg = &resolved.run.dataset;
    let (mut train, mut test) = match cfg.kind {
        DatasetKind::Synthetic => {
            let train = gen_synthetic(cfg.classes, cfg.per_class, resolved.run.seed)
                .map_err(|e| e.to_string())?;
            let test = gen_synthetic(cfg.classes, cfg.test_per_class, resolved.run.seed ^ 0x5eed)
                .map_err(|e| e.to_string())?;
            (train, test)
        }
        DatasetKind::Cifar10 => {
            let dir = resolved
                .data_dir
                .as_ref()
                .ok_or("cifar10 needs --data-dir, config data_dir, or WHITEBED_DATA")?;
            let train = load_cifar10(dir, Split::Train).map_err(|e| e.to_string())?;
            let test = load_cifar10(dir, Split::Test).map_err(|e| e.to_string())?;
            (train, test)
        }
    };
    if let Some(n) = cfg.limit {
        train.truncate(n);
    }
    if let Some(n) = cfg.test_limit {
        test.truncate(n);
    }
    Ok((train, test))
}

#[derive(Debug, Serialize)]
struct ResultsJson<'a> {
    protocol: &'a str,
    dataset: &'a DatasetKind,
    seed: u64,
    accuracy: f64,
    config_digest: &'a str,
}

fn load_model(path: &Path) -> Result<Model<f64>, String> {
    let (tensors, meta) = load_checkpoint(path).map_err(|e| e.to_string())?;
    let encoder: EncoderConfig = serde_json::from_value(meta["encoder"].clone())
        .map_err(|e| format!("checkpoint meta: {e}"))?;
    let projector: ProjectorConfig = serde_json::from_value(meta["projector"].clone())
        .map_err(|e| format!("checkpoint meta: {e}"))?;
    Model::from_tensors(encoder, projector, &tensors).map_err(|e| e.to_string())
}

fn cmd_train(args: &RunArgs) -> Result<(), String> {
    let resolved = parse_config(args.config.as_deref(), args)?;
    emit_resolved(&resolved)?;
    let (train_ds, test_ds) = load_datasets(&resolved)?;
    let model: Model<f64> =
        Model::init(resolved.run.encoder.clone(), resolved.run.projector.clone(), resolved.run.seed)
            .map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(resolved.train_cfg.clone(), model).map_err(|e| e.to_string())?;
    let k = resolved.run.knn_k;
    let mut hook = |m: &Model<f64>| {
        let acc = knn_classify(m, &train_ds, &test_ds, k).ok();
        (acc, None)
    };
    let mut metrics = trainer.fit(&train_ds, Some(&mut hook)).map_err(|e| e.to_string())?;
    if resolved.run.deterministic {
        for row in &mut metrics {
            row.ms_per_iter = 0.0;
        }
    }
    write_metrics_csv(&resolved.out_dir.join("metrics.csv"), &metrics).map_err(|e| e.to_string())?;
    trainer.save(&resolved.out_dir.join("model.ckpt")).map_err(|e| e.to_string())?;
    let last = metrics.last();
    println!(
        "trained {} epochs; final loss {}; knn {}",
        resolved.train_cfg.epochs,
        last.map(|r| r.loss.to_string()).unwrap_or_else(|| "n/a".into()),
        last.and_then(|r| r.knn_acc).map(|a| format!("{a:.4}")).unwrap_or_else(|| "n/a".into()),
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs, protocol: &str) -> Result<(), String> {
    let resolved = parse_config(args.run.config.as_deref(), &args.run)?;
    emit_resolved(&resolved)?;
    let (train_ds, test_ds) = load_datasets(&resolved)?;
    let model = load_model(&args.ckpt)?;
    let accuracy = match protocol {
        "linear" => {
            fit_linear_probe(&model, &train_ds, &test_ds, &resolved.run.probe)
                .map_err(|e| e.to_string())?
                .1
        }
        _ => knn_classify(&model, &train_ds, &test_ds, resolved.run.knn_k)
            .map_err(|e| e.to_string())?,
    };
    let results = ResultsJson {
        protocol,
        dataset: &resolved.run.dataset.kind,
        seed: resolved.run.seed,
        accuracy,
        config_digest: &resolved.digest,
    };
    let path = resolved.out_dir.join(format!("results_{protocol}.json"));
    fs::write(&path, serde_json::to_string_pretty(&results).map_err(|e| e.to_string())?)
        .map_err(|e| format!("{}: {e}", path.display()))?;
    println!("{protocol} accuracy {accuracy:.4}");
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> Result<(), String> {
    let resolved = parse_config(args.run.config.as_deref(), &args.run)?;
    emit_resolved(&resolved)?;
    let (train_ds, _) = load_datasets(&resolved)?;
    let mut model: Model<f64> =
        Model::init(resolved.run.encoder.clone(), resolved.run.projector.clone(), resolved.run.seed)
            .map_err(|e| e.to_string())?;
    let report = bench_step(&resolved.train_cfg, &mut model, &train_ds, args.warmup, args.steps)
        .map_err(|e| e.to_string())?;
    report.write_csv(&resolved.out_dir.join("bench.csv")).map_err(|e| e.to_string())?;
    print!("{}", report.to_csv());
    Ok(())
}

/// Exponential moving average with coefficient `alpha` (0 disables).
fn smooth_series(values: &[f64], alpha: f64) -> Vec<f64> {
    if alpha <= 0.0 {
        return values.to_vec();
    }
    let mut out = Vec::with_capacity(values.len());
    let mut prev: Option<f64> = None;
    for &v in values {
        let s = match prev {
            None => v,
            Some(p) => alpha * p + (1.0 - alpha) * v,
        };
        out.push(s);
        prev = Some(s);
    }
    out
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Render one polyline per requested column against the epoch column.
pub fn render_svg(
    header: &[String],
    rows: &[Vec<String>],
    cols: &[String],
    smooth: f64,
) -> Result<String, String> {
    let col_index = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| format!("column {name} not in CSV header {header:?}"))
    };
    let epoch_i = col_index("epoch")?;
    let (w, h, ml, mr, mt, mb) = (640.0, 400.0, 60.0, 20.0, 20.0, 40.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);
    let mut series = Vec::new();
    for name in cols {
        let i = col_index(name)?;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for row in rows {
            if let (Ok(x), Ok(y)) = (row[epoch_i].parse::<f64>(), row[i].parse::<f64>()) {
                xs.push(x);
                ys.push(y);
            }
        }
        if xs.is_empty() {
            return Err(format!("column {name} has no numeric values"));
        }
        let ys = smooth_series(&ys, smooth);
        series.push((name.clone(), xs, ys));
    }
    let all_x: Vec<f64> = series.iter().flat_map(|(_, xs, _)| xs.iter().copied()).collect();
    let all_y: Vec<f64> = series.iter().flat_map(|(_, _, ys)| ys.iter().copied()).collect();
    let (x0, x1) = bounds(&all_x);
    let (y0, y1) = bounds(&all_y);
    let sx = |x: f64| ml + (x - x0) / (x1 - x0).max(1e-12) * pw;
    let sy = |y: f64| mt + ph - (y - y0) / (y1 - y0).max(1e-12) * ph;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    ));
    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        mt + ph,
        ml + pw,
        mt + ph
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        mt + ph
    ));
    svg.push_str(&format!(
        "<text x=\"{ml}\" y=\"{}\" text-anchor=\"middle\">{x0}</text>\n",
        h - 10.0
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x1}</text>\n",
        ml + pw,
        h - 10.0
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{y0:.4}</text>\n",
        ml - 5.0,
        mt + ph
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{y1:.4}</text>\n",
        ml - 5.0,
        mt + 10.0
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">epoch</text>\n",
        ml + pw / 2.0,
        h - 10.0
    ));
    for (s, (name, xs, ys)) in series.iter().enumerate() {
        let color = PALETTE[s % PALETTE.len()];
        let points: Vec<String> =
            xs.iter().zip(ys).map(|(&x, &y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        let ly = mt + 15.0 + 15.0 * s as f64;
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            ml + pw - 120.0,
            ml + pw - 100.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\">{name}</text>\n",
            ml + pw - 95.0,
            ly + 4.0
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn bounds(values: &[f64]) -> (f64, f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn cmd_plot(args: &PlotArgs) -> Result<(), String> {
    if !(0.0..1.0).contains(&args.smooth) {
        return Err(format!("smooth must lie in [0, 1), got {}", args.smooth));
    }
    let text = fs::read_to_string(&args.csv).map_err(|e| format!("{}: {e}", args.csv.display()))?;
    let mut lines = text.lines();
    let header: Vec<String> =
        lines.next().ok_or("empty CSV")?.split(',').map(str::to_string).collect();
    let rows: Vec<Vec<String>> =
        lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    let cols: Vec<String> = args.cols.split(',').map(str::to_string).collect();
    let svg = render_svg(&header, &rows, &cols, args.smooth)?;
    let out = args.out.clone().unwrap_or_else(|| args.csv.with_extension("svg"));
    fs::write(&out, svg).map_err(|e| format!("{}: {e}", out.display()))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<(), String> {
    let train = gen_synthetic(args.classes, args.per_class, args.seed).map_err(|e| e.to_string())?;
    let test =
        gen_synthetic(args.classes, args.test_per_class, args.seed ^ 0x5eed).map_err(|e| e.to_string())?;
    fs::create_dir_all(&args.out).map_err(|e| e.to_string())?;
    // CIFAR-10 binary layout: five train batch files plus a test batch.
    let chunk = train.len().div_ceil(5);
    for (i, images) in train.images.chunks(chunk.max(1)).enumerate().take(5) {
        let part = Dataset {
            images: images.to_vec(),
            labels: train.labels[i * chunk..(i * chunk + images.len())].to_vec(),
            class_count: train.class_count,
        };
        write_cifar10(&part, &args.out.join(format!("data_batch_{}.bin", i + 1)))
            .map_err(|e| e.to_string())?;
    }
    for i in train.images.chunks(chunk.max(1)).count()..5 {
        // Loader expects all five files; pad with empty is invalid, so
        // duplicate the last chunk boundary as zero-record files are not
        // allowed. Generate at least 5 samples per chunk instead.
        return Err(format!(
            "too few train samples to fill data_batch_{}.bin; increase --per-class",
            i + 1
        ));
    }
    write_cifar10(&test, &args.out.join("test_batch.bin")).map_err(|e| e.to_string())?;
    println!(
        "wrote {} train and {} test records to {}",
        train.len(),
        test.len(),
        args.out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), String> {
    match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::EvalLinear(args) => cmd_eval(args, "linear"),
        Command::EvalKnn(args) => cmd_eval(args, "knn"),
        Command::Bench(args) => cmd_bench(args),
        Command::Plot(args) => cmd_plot(args),
        Command::GenData(args) => cmd_gen_data(args),
    }
}

pub fn main() {
    let cli = Cli::parse();
    if let Err(msg) = run(cli) {
        eprintln!("error: {msg}");
        std::process::exit(1);
    }
}
