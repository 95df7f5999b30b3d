use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use doclocate::data::{
    generate_scene, occlusion_sweep, read_dataset, read_ppm, write_dataset, DataError, Dataset, SceneConfig,
    SceneSample, SWEEP_FRACTIONS,
};
use doclocate::eval::plot::{line_chart, scatter_log_x, Series};
use doclocate::eval::{
    benchmark_checkpoint, benchmark_inference, evaluate_dataset, occlusion_suite, out_of_frame_check, run_ablation,
    AblationAxis, AblationPlan, AblationTable, CenterSquarePredictor, EvalError, ModelPredictor, OraclePredictor,
    Predictor,
};
use doclocate::model::{load_checkpoint, predict_quad, ModelError};
use doclocate::train::{threads_from_env, PreparedSet, RunPaths, TrainConfig, TrainError, Trainer};

#[derive(Parser)]
#[command(name = "doclocate", version, about = "Document corner localization: data, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a model from scratch (or resume a run).
    Train(TrainArgs),
    /// Score a checkpoint (or a reference predictor) on a dataset.
    Eval(EvalArgs),
    /// Predict the corners of one image.
    Infer(InferArgs),
    /// Measure single-frame inference latency.
    Bench(BenchArgs),
    /// Train and score variants along one axis over several seeds.
    Ablate(AblateArgs),
    /// Draw SVG charts from ablation reports.
    Plot(PlotArgs),
}

#[derive(Args, Serialize)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Probability that a scene gets a corner occluder.
    #[arg(long, default_value_t = 0.2)]
    occlusion: f64,
    /// Probability of a frame without a document.
    #[arg(long, default_value_t = 0.05)]
    negatives: f64,
    #[arg(long, default_value_t = 0.3)]
    out_of_frame: f64,
    /// Frame side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Render every scene once per occlusion fraction 0, 0.05, 0.1, 0.2.
    #[arg(long)]
    sweep: bool,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Profile {
    Desk,
    Paper,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Profile::Desk)]
    profile: Profile,
    /// Overrides the profile's epoch count; milestones scale along.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_fusion: bool,
    #[arg(long)]
    no_line_loss: bool,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    n_points: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Validation dataset scored periodically during training.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Continue from the run's saved training state.
    #[arg(long)]
    resume: bool,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum PredictorKind {
    Model,
    Oracle,
    Center,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PredictorKind::Model)]
    predictor: PredictorKind,
    /// JSON report path; per-sample rows go next to it with a `.csv`
    /// extension.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also report the Jaccard index per occlusion fraction.
    #[arg(long)]
    occlusion_suite: bool,
}

#[derive(Args, Serialize)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Serialize)]
struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 100)]
    frames: usize,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    /// Time the unpruned model as well.
    #[arg(long)]
    compare: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// fusion, line_loss or alpha.
    #[arg(long)]
    axis: String,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, value_enum, default_value_t = Profile::Desk)]
    profile: Profile,
    #[arg(long)]
    epochs: Option<usize>,
    /// Width multiplier for axes other than alpha.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    no_fusion: bool,
    /// Timed frames per variant; 0 skips latency.
    #[arg(long, default_value_t = 0)]
    bench_frames: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct PlotArgs {
    /// Ablation reports written by `ablate --out`.
    #[arg(long = "ablation", required = true)]
    ablations: Vec<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidConfig(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_) => Failure::Usage(e.to_string()),
            ModelError::Numerics(_) => Failure::Numeric(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) => Failure::Usage(e.to_string()),
            TrainError::NonFinite { .. } | TrainError::Numerics(_) | TrainError::Loss(_) => {
                Failure::Numeric(e.to_string())
            }
            TrainError::Data(d) => d.into(),
            TrainError::Model(m) => m.into(),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::InvalidArgument(m) => Failure::Usage(m),
            EvalError::Model(m) => m.into(),
            EvalError::Data(d) => d.into(),
            EvalError::Train(t) => t.into(),
        }
    }
}

type Outcome = Result<(), Failure>;

fn echo(command: &str, flags: &impl Serialize) -> Value {
    json!({ "command": command, "flags": flags })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Outcome {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Failure::Data(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn write_report(path: &Path, header: &Value, result: impl Serialize) -> Outcome {
    let mut doc = header.clone();
    doc["result"] = serde_json::to_value(result).map_err(|e| Failure::Data(e.to_string()))?;
    let text = serde_json::to_string_pretty(&doc).expect("report serializes");
    write_file(path, text + "\n")
}

/// CSV text preceded by the flag echo as a `#` comment line.
fn with_preamble(header: &Value, csv: &str) -> String {
    format!("# {header}\n{csv}")
}

fn check_probability(name: &str, p: f64) -> Outcome {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Failure::Usage(format!("--{name} must lie in [0, 1], got {p}")))
    }
}

fn gen_data(a: &GenDataArgs) -> Outcome {
    check_probability("occlusion", a.occlusion)?;
    check_probability("negatives", a.negatives)?;
    check_probability("out-of-frame", a.out_of_frame)?;
    let cfg = SceneConfig {
        image_hw: a.size,
        occlusion_prob: a.occlusion,
        negative_prob: a.negatives,
        out_of_frame_prob: a.out_of_frame,
        seed: a.seed,
        ..SceneConfig::default()
    };
    cfg.validate()?;
    let occupied = fs::read_dir(&a.out).is_ok_and(|mut d| d.next().is_some());
    if occupied {
        if !a.force {
            return Err(Failure::Usage(format!(
                "{} is not empty; pass --force to overwrite",
                a.out.display()
            )));
        }
        for name in ["index.json", "labels.jsonl"] {
            let _ = fs::remove_file(a.out.join(name));
        }
        let _ = fs::remove_dir_all(a.out.join("images"));
    }
    let samples: Vec<SceneSample> = if a.sweep {
        occlusion_sweep(&cfg, a.count, &SWEEP_FRACTIONS)?
    } else {
        (0..a.count)
            .map(|i| generate_scene(&cfg, i))
            .collect::<Result<_, _>>()?
    };
    let index = write_dataset(&samples, &a.out, Some(&cfg), echo("gen-data", a))?;
    println!(
        "wrote {} frames to {} (labels sha256 {})",
        index.count,
        a.out.display(),
        index.labels_sha256
    );
    Ok(())
}

fn apply_overrides(cfg: &mut TrainConfig, alpha: Option<f64>, no_fusion: bool, no_line_loss: bool) {
    if let Some(al) = alpha {
        cfg.model.alpha = al;
    }
    if no_fusion {
        cfg.model.fusion_enabled = false;
    }
    if no_line_loss {
        *cfg = cfg.clone().without_line_loss();
    }
}

fn base_config(profile: Profile, epochs: Option<usize>) -> TrainConfig {
    let cfg = match profile {
        Profile::Desk => TrainConfig::desk(),
        Profile::Paper => TrainConfig::paper(),
    };
    let mut cfg = match epochs {
        Some(e) => cfg.with_epochs(e),
        None => cfg,
    };
    cfg.threads = threads_from_env();
    cfg
}

fn train_cmd(a: &TrainArgs) -> Outcome {
    let mut cfg = base_config(a.profile, a.epochs);
    cfg.seed = a.seed;
    apply_overrides(&mut cfg, a.alpha, a.no_fusion, a.no_line_loss);
    if let Some(n) = a.n_points {
        cfg.model.n_points = n;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    cfg.data_path = Some(a.data.clone());
    cfg.val_path = a.val.clone();
    cfg.validate()?;
    let header = echo("train", a);
    let mut paths = RunPaths::new(&a.out);
    paths.preamble = Some(header.to_string());
    let mut trainer = if a.resume && paths.state().exists() {
        let t = Trainer::load_state(&paths.state())?;
        if t.config != cfg {
            return Err(Failure::Usage(format!(
                "saved state in {} was produced with different settings",
                paths.state().display()
            )));
        }
        t
    } else {
        Trainer::new(cfg.clone())?
    };
    trainer.ckpt.meta = json!({ "command": "train", "flags": a, "train_config": cfg });
    let samples = read_dataset(&a.data)?;
    let set = PreparedSet::new(&samples, &cfg.model)?;
    let val = a.val.as_deref().map(read_dataset).transpose()?;
    trainer.fit(&set, val.as_deref(), Some(&paths), &mut |m| {
        let ji = m.val_ji.map(|v| format!(" val_ji {v:.4}")).unwrap_or_default();
        eprintln!("epoch {} lr {} loss {:.6}{ji}", m.epoch, m.lr, m.loss.total);
    })?;
    let last = trainer.metrics.last().map_or(f64::NAN, |m| m.loss.total);
    println!(
        "trained {} epochs ({} parameters), final loss {last:.6}; checkpoint {}, metrics {}",
        trainer.epoch,
        trainer.ckpt.parameter_count(),
        a.out.display(),
        paths.metrics().display()
    );
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Outcome {
    let ds = Dataset::open(&a.data)?;
    let ckpt = match (a.predictor, &a.ckpt) {
        (PredictorKind::Model, None) => {
            return Err(Failure::Usage("--ckpt is required for the model predictor".into()))
        }
        (PredictorKind::Model, Some(p)) => Some(load_checkpoint(p)?),
        _ => None,
    };
    let mut predictor: Box<dyn Predictor + '_> = match (&ckpt, a.predictor) {
        (Some(c), _) => Box::new(ModelPredictor::new(c)),
        (None, PredictorKind::Center) => Box::new(CenterSquarePredictor { fraction: 0.6 }),
        (None, _) => Box::new(OraclePredictor),
    };
    let report = evaluate_dataset(predictor.as_mut(), &ds);
    let mut extra = json!({});
    if a.occlusion_suite || ds.labels.iter().any(|l| l.meta.out_of_frame) {
        let samples = read_dataset(&a.data)?;
        if a.occlusion_suite {
            let curve = occlusion_suite(predictor.as_mut(), &samples)?;
            for p in &curve.points {
                println!(
                    "occlusion {:.2}: ji {:.4} corner distance {:.4} ({} frames)",
                    p.fraction, p.mean_ji, p.mean_corner_distance, p.frames
                );
            }
            extra["occlusion"] = serde_json::to_value(curve).expect("curve serializes");
        }
        let oof = out_of_frame_check(predictor.as_mut(), &samples);
        extra["out_of_frame"] = serde_json::to_value(oof).expect("report serializes");
    }
    for b in &report.per_background {
        println!("{:>9}: ji {:.4} ({} frames)", b.background.name(), b.mean_ji, b.frames);
    }
    println!(
        "overall ji {:.4} over {} frames; {} failures; class accuracy {:.4}",
        report.overall_ji, report.frames, report.failures, report.class_accuracy
    );
    if let Some(out) = &a.out {
        let header = echo("eval", a);
        write_file(&out.with_extension("csv"), with_preamble(&header, &report.to_csv()))?;
        write_report(out, &header, json!({ "report": report, "extra": extra }))?;
    }
    Ok(())
}

fn infer_cmd(a: &InferArgs) -> Outcome {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let img = read_ppm(&a.image)?;
    let s = ckpt.config.input_hw;
    let (quad, class) = predict_quad(
        &ckpt,
        &img.resize(s, s).to_tensor(),
        img.width as f64,
        img.height as f64,
    )?;
    let corners: Vec<[f64; 2]> = quad.corners.iter().map(|p| [p.x, p.y]).collect();
    if a.json {
        let doc = json!({
            "command": "infer",
            "flags": a,
            "corners": corners,
            "class": class,
            "image_w": img.width,
            "image_h": img.height,
        });
        println!("{doc}");
    } else {
        for (k, c) in corners.iter().enumerate() {
            println!("corner {k}: {:.2} {:.2}", c[0], c[1]);
        }
        println!("class {class}");
    }
    Ok(())
}

fn bench_cmd(a: &BenchArgs) -> Outcome {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let pruned = benchmark_inference(&ckpt, a.frames, a.warmup)?;
    let full = if a.compare && !ckpt.pruned {
        Some(benchmark_checkpoint(&ckpt, a.frames, a.warmup)?)
    } else {
        None
    };
    for r in std::iter::once(&pruned).chain(&full) {
        println!(
            "{}: mean {:.3} ms, p50 {:.3} ms, p95 {:.3} ms, {:.1} fps, {} parameters, within 33.3 ms budget: {}",
            if r.pruned { "pruned" } else { "unpruned" },
            r.mean_ms,
            r.p50_ms,
            r.p95_ms,
            r.fps,
            r.parameter_count,
            r.within_budget
        );
    }
    println!("host: {}", pruned.host);
    if let Some(out) = &a.out {
        write_report(out, &echo("bench", a), json!({ "pruned": pruned, "unpruned": full }))?;
    }
    Ok(())
}

fn ablate_cmd(a: &AblateArgs) -> Outcome {
    let axis = AblationAxis::parse(&a.axis)
        .ok_or_else(|| Failure::Usage(format!("unknown axis `{}`; use fusion, line_loss or alpha", a.axis)))?;
    let mut base = base_config(a.profile, a.epochs);
    apply_overrides(&mut base, a.alpha, a.no_fusion, false);
    base.eval_every = 0;
    base.validate()?;
    let train = read_dataset(&a.data)?;
    let test = read_dataset(&a.test)?;
    let set = PreparedSet::new(&train, &base.model)?;
    let plan = AblationPlan {
        axis,
        values: a.values.clone(),
        seeds: a.seeds.clone(),
        bench_frames: a.bench_frames,
    };
    let table = run_ablation(&base, &plan, &set, &test, &mut |r| {
        eprintln!("{} = {} seed {}: ji {:.4}", axis.name(), r.value, r.seed, r.ji);
    })?;
    for c in &table.cells {
        println!(
            "{} = {}: median ji {:.4} (min {:.4}, max {:.4}, {} runs, {} parameters)",
            axis.name(),
            c.value,
            c.median_ji,
            c.min_ji,
            c.max_ji,
            c.runs,
            c.parameters
        );
    }
    if let Some(out) = &a.out {
        let header = echo("ablate", a);
        write_file(&out.with_extension("csv"), with_preamble(&header, &table.to_csv()))?;
        write_report(out, &header, &table)?;
    }
    Ok(())
}

fn read_table(path: &Path) -> Result<AblationTable, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let body = doc.get("result").cloned().unwrap_or(doc);
    serde_json::from_value(body).map_err(|e| Failure::Data(format!("{}: not an ablation report: {e}", path.display())))
}

fn plot_cmd(a: &PlotArgs) -> Outcome {
    let mut scatter = Vec::new();
    let mut alpha = Vec::new();
    for path in &a.ablations {
        let t = read_table(path)?;
        let stem = path.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
        let fusion = if t.base.model.fusion_enabled { "fusion" } else { "no fusion" };
        for c in &t.cells {
            if let Some(ms) = c.median_latency_ms {
                scatter.push(Series {
                    name: format!("{stem} {}={}", t.axis.name(), c.value),
                    points: vec![(ms, c.median_ji)],
                });
            }
        }
        if t.axis == AblationAxis::Alpha {
            let mut points: Vec<(f64, f64)> = t.cells.iter().map(|c| (c.value, c.median_ji)).collect();
            points.sort_by(|p, q| p.0.total_cmp(&q.0));
            alpha.push(Series {
                name: format!("{stem} ({fusion})"),
                points,
            });
        }
        if t.axis == AblationAxis::Fusion {
            for on in [true, false] {
                if let Some(c) = t.cell(if on { 1.0 } else { 0.0 }) {
                    let name = format!("{} {stem}", if on { "fusion" } else { "no fusion" });
                    match alpha.iter_mut().find(|s: &&mut Series| s.name == name) {
                        Some(s) => s.points.push((t.base.model.alpha, c.median_ji)),
                        None => alpha.push(Series {
                            name,
                            points: vec![(t.base.model.alpha, c.median_ji)],
                        }),
                    }
                }
            }
        }
    }
    let mut written = Vec::new();
    if !scatter.is_empty() {
        let p = a.out_dir.join("ji_vs_latency.svg");
        write_file(&p, scatter_log_x("Jaccard index vs latency", "mean latency (ms)", "median JI", &scatter))?;
        written.push(p);
    }
    if !alpha.is_empty() {
        let p = a.out_dir.join("ji_vs_alpha.svg");
        write_file(&p, line_chart("Jaccard index vs width multiplier", "alpha", "median JI", &alpha))?;
        written.push(p);
    }
    if written.is_empty() {
        return Err(Failure::Usage(
            "nothing to plot: reports carry no latency and no alpha or fusion axis".into(),
        ));
    }
    let meta = a.out_dir.join("plots.json");
    write_report(&meta, &echo("plot", a), &written)?;
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Plot(a) => plot_cmd(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message().replace('\n', " "));
            ExitCode::from(f.code())
        }
    }
}
