use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use nlinv::data::{self, load_features, save_csv, FeatureMatrix};
use nlinv::detector::sha256_hex;
use nlinv::eval::{auroc, landscape, run_benchmark, BenchmarkConfig, ToyShape, ToyTask};
use nlinv::invariant::ScaleModel;
use nlinv::{DetectorConfig, Error, ErrorKind, InvariantDetector, Matrix, ScaleConfig};

#[derive(Parser)]
#[command(name = "nlinv", version, about = "Out-of-distribution detection with learned invariants")]
struct Cli {
    /// Report errors on stderr as JSON.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a detector on one feature file per scale.
    Train(TrainCmd),
    /// Score feature files with a trained detector.
    Score(ScoreCmd),
    /// AUROC of a score file against labels.
    Eval(EvalCmd),
    /// Run a benchmark described by a JSON config.
    Bench(BenchCmd),
    /// Generate 2-D toy data, train on it and export the learned maps.
    Toy(ToyCmd),
    /// Loss and AUC over a grid of parameter perturbations.
    Landscape(LandscapeCmd),
}

#[derive(Args, Clone)]
struct TrainFlags {
    /// Percentage of variance the invariants may explain.
    #[arg(long = "p", default_value_t = 5.0)]
    p_percent: f64,
    #[arg(long, default_value_t = 25)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    lr_end: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Train on raw features instead of z-scored ones.
    #[arg(long)]
    no_standardize: bool,
    /// Drop the reconstruction term from the loss.
    #[arg(long)]
    no_bwd_loss: bool,
    /// Use the PCA affine invariants instead of a network.
    #[arg(long)]
    linear: bool,
    /// Coupling MLP width (default: max(D - ceil(D/2), 32)).
    #[arg(long)]
    hidden: Option<usize>,
    /// Number of coupling blocks.
    #[arg(long, default_value_t = nlinv::vpn::DEFAULT_BLOCKS)]
    blocks: usize,
    /// Number of invariants, overriding the variance rule.
    #[arg(long)]
    k: Option<usize>,
}

impl TrainFlags {
    fn detector_config(&self, knn: bool) -> DetectorConfig {
        DetectorConfig {
            scale: ScaleConfig {
                p_percent: self.p_percent,
                epochs: self.epochs,
                batch_size: self.batch,
                lr_start: self.lr,
                lr_end: self.lr_end,
                seed: self.seed,
                backward_loss: !self.no_bwd_loss,
                linear: self.linear,
                blocks: self.blocks,
                hidden: self.hidden,
                k: self.k,
            },
            standardize: !self.no_standardize,
            knn,
        }
    }
}

#[derive(Args)]
struct TrainCmd {
    /// Feature file per scale (.csv or NLFM1 binary).
    #[arg(long, num_args = 1.., required = true)]
    features: Vec<PathBuf>,
    /// The last CSV column is a 0/1 label (ignored for training).
    #[arg(long)]
    csv_labels: bool,
    /// Skip building the 2-NN index; the model then scores S_inv only.
    #[arg(long)]
    no_knn: bool,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ScoreChoice {
    Inv,
    Final,
}

#[derive(Args)]
struct ScoreCmd {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    features: Vec<PathBuf>,
    #[arg(long)]
    csv_labels: bool,
    #[arg(long, value_enum, default_value_t = ScoreChoice::Final)]
    score: ScoreChoice,
    /// Output CSV (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    scores: PathBuf,
    /// One 0/1 label per line.
    #[arg(long, conflicts_with = "test_with_labels", required_unless_present = "test_with_labels")]
    labels: Option<PathBuf>,
    /// Labeled test features: CSV with a final label column, or NLFM1 with labels.
    #[arg(long)]
    test_with_labels: Option<PathBuf>,
    /// Score column (default: S_final when present, else S_inv).
    #[arg(long)]
    column: Option<String>,
}

#[derive(Args)]
struct BenchCmd {
    #[arg(long)]
    config: PathBuf,
    /// Report path prefix, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ShapeArg {
    Circle,
    Ushape,
}

#[derive(Args)]
struct ToyCmd {
    #[arg(long, value_enum, default_value_t = ShapeArg::Circle)]
    shape: ShapeArg,
    /// Training samples.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Test inliers and test outliers, each.
    #[arg(long, default_value_t = 500)]
    n_test: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Half-width of the outlier box.
    #[arg(long = "box", default_value_t = 4.0)]
    box_half_width: f64,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LandscapeCmd {
    #[arg(long)]
    model: PathBuf,
    /// Labeled test features.
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value_t = 25)]
    grid: usize,
    #[arg(long, default_value_t = 1.0)]
    range: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV (stdout if omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn kind_name(kind: ErrorKind) -> &'static str {
    match kind {
        ErrorKind::Usage => "usage",
        ErrorKind::Data => "data",
        ErrorKind::Numeric => "numeric",
    }
}

fn configure_threads() -> nlinv::Result<()> {
    let Ok(value) = std::env::var("NLINV_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::invalid(format!("NLINV_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Train(c) => train(c),
        Command::Score(c) => score(c),
        Command::Eval(c) => evaluate(c, cli.json),
        Command::Bench(c) => bench(c),
        Command::Toy(c) => toy(c),
        Command::Landscape(c) => run_landscape(c),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(e.kind());
            if cli.json {
                let body = json!({
                    "error": {"kind": kind_name(e.kind()), "message": e.to_string(), "exit_code": code}
                });
                eprintln!("{body}");
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(code)
        }
    }
}

fn echo_config(command: &str, config: &impl Serialize) -> nlinv::Result<()> {
    eprintln!("# nlinv {command} {}", serde_json::to_string(config)?);
    Ok(())
}

fn load_scales(paths: &[PathBuf], csv_labels: bool) -> nlinv::Result<Vec<FeatureMatrix>> {
    paths.iter().map(|p| load_features(p, csv_labels)).collect()
}

fn write_or_print(out: Option<&Path>, text: &str) -> nlinv::Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Error::from(e).context(format!("writing {}", p.display()))),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn train_detector(scales: &[&Matrix], cfg: &DetectorConfig) -> nlinv::Result<InvariantDetector> {
    let n = scales.len();
    let epochs = cfg.scale.epochs;
    InvariantDetector::train_with(scales, cfg, |scale, e| {
        eprintln!(
            "scale {}/{n} epoch {}/{epochs} lr {:.3e} loss {:.6}",
            scale + 1,
            e.epoch + 1,
            e.lr,
            e.loss
        );
    })
}

fn describe(det: &InvariantDetector) {
    for (i, ts) in det.scales.iter().enumerate() {
        let errors: Vec<String> = ts.errors.iter().map(|e| format!("{e:.3e}")).collect();
        eprintln!("scale {}: D = {}, K = {}, e = [{}]", i + 1, ts.dim(), ts.k, errors.join(", "));
    }
}

fn train(c: &TrainCmd) -> nlinv::Result<()> {
    let cfg = c.train.detector_config(!c.no_knn);
    cfg.scale.validate()?;
    echo_config("train", &json!({"features": c.features, "out": c.out, "detector": cfg}))?;
    let scales = load_scales(&c.features, c.csv_labels)?;
    let refs: Vec<&Matrix> = scales.iter().map(|f| &f.values).collect();
    let det = train_detector(&refs, &cfg)?;
    describe(&det);
    let bytes = det.to_bytes()?;
    fs::write(&c.out, &bytes).map_err(|e| Error::from(e).context(format!("writing {}", c.out.display())))?;
    eprintln!("wrote {} (sha256 {})", c.out.display(), sha256_hex(&bytes));
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn score(c: &ScoreCmd) -> nlinv::Result<()> {
    let bytes = fs::read(&c.model).map_err(|e| Error::from(e).context(format!("reading {}", c.model.display())))?;
    let det = InvariantDetector::from_bytes(&bytes).map_err(|e| e.context(format!("loading {}", c.model.display())))?;
    let header = json!({"model_sha256": sha256_hex(&bytes), "score": c.score, "scales": c.features.len()});
    echo_config("score", &header)?;
    let scales = load_scales(&c.features, c.csv_labels)?;
    let refs: Vec<&Matrix> = scales.iter().map(|f| &f.values).collect();
    let table = det.score(&refs, c.score == ScoreChoice::Final)?;
    let fin = table.s_final();

    let mut out = format!("# nlinv score {header}\nid,S_inv,S_2nn,S_final\n");
    for i in 0..table.len() {
        let nn = table.s_2nn.as_ref().map(|v| v[i]);
        let f = fin.as_ref().map(|v| v[i]);
        writeln!(out, "{i},{},{},{}", table.s_inv[i], fmt_opt(nn), fmt_opt(f)).unwrap();
    }
    write_or_print(c.out.as_deref(), &out)
}

/// Reads a score CSV into (column name, values).
fn read_scores(path: &Path, column: Option<&str>) -> nlinv::Result<(String, Vec<f64>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{} is empty", path.display())))?
        .split(',')
        .collect();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let pick = |name: &str| header.iter().position(|h| h.trim() == name);
    let name = match column {
        Some(c) => c.to_string(),
        None => {
            let has_final = pick("S_final").is_some_and(|i| rows.iter().all(|r| r.get(i).is_some_and(|v| !v.is_empty())));
            if has_final { "S_final" } else { "S_inv" }.to_string()
        }
    };
    let col = pick(&name).ok_or_else(|| Error::invalid(format!("{} has no column {name:?}", path.display())))?;
    let values = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.get(col)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::Parse {
                    line: i + 2,
                    column: col + 1,
                    message: format!("missing or non-numeric {name} value"),
                })
        })
        .collect::<nlinv::Result<_>>()?;
    Ok((name, values))
}

fn evaluate(c: &EvalCmd, as_json: bool) -> nlinv::Result<()> {
    let (column, scores) = read_scores(&c.scores, c.column.as_deref())?;
    let labels = match (&c.labels, &c.test_with_labels) {
        (Some(p), _) => data::load_labels(p)?,
        (None, Some(p)) => load_features(p, true)?
            .labels
            .ok_or_else(|| Error::invalid(format!("{} carries no labels", p.display())))?,
        (None, None) => return Err(Error::invalid("either --labels or --test-with-labels is required")),
    };
    let auc = auroc(&scores, &labels)?;
    if as_json {
        println!("{}", json!({"column": column, "auc": auc, "n": scores.len()}));
    } else {
        println!("{column} AUC {auc}");
    }
    Ok(())
}

fn bench(c: &BenchCmd) -> nlinv::Result<()> {
    let mut cfg = BenchmarkConfig::load(&c.config)?;
    if let Some(out) = &c.out {
        cfg.output = Some(out.clone());
    }
    echo_config("bench", &cfg)?;
    let base = c.config.parent().unwrap_or(Path::new("."));
    let report = run_benchmark(&cfg, base)?;
    for s in &report.per_seed {
        println!("seed {} AUC {}", s.seed, s.auc);
    }
    println!("mean {:.4} std {:.4} ({:.1}s)", report.mean, report.std, report.wall_time_s);
    if let Some(prefix) = &cfg.output {
        let prefix = if prefix.is_absolute() { prefix.clone() } else { base.join(prefix) };
        report.write(&prefix)?;
        eprintln!("wrote {}.json and {}.csv", prefix.display(), prefix.display());
    }
    Ok(())
}

fn toy(c: &ToyCmd) -> nlinv::Result<()> {
    let mut flags = c.train.clone();
    flags.k.get_or_insert(1);
    let cfg = flags.detector_config(true);
    cfg.scale.validate()?;
    let task = ToyTask {
        shape: match c.shape {
            ShapeArg::Circle => ToyShape::Circle,
            ShapeArg::Ushape => ToyShape::Ushape,
        },
        n_train: c.n,
        n_test_inliers: c.n_test,
        n_test_outliers: c.n_test,
        noise: c.noise,
        box_half_width: c.box_half_width,
    };
    echo_config("toy", &json!({"task": task, "out": c.out, "detector": cfg}))?;
    let (train, test) = task.generate(c.train.seed)?;
    let det = train_detector(&[&train.values], &cfg)?;
    describe(&det);

    fs::create_dir_all(&c.out)?;
    save_csv(c.out.join("train.csv"), &train)?;
    save_csv(c.out.join("test.csv"), &test)?;
    det.save(c.out.join("model.nldet"))?;

    let ts = &det.scales[0];
    let x = ts.prepare(&train.values)?;
    let (rep, rec) = match &ts.model {
        ScaleModel::Vpn(m) => (m.forward(&x)?, m.reconstruct(&x, ts.k)?),
        ScaleModel::Affine { mean, directions } => {
            // coordinates in the full PCA basis, invariants first
            let centered = x.sub_row(mean);
            let g = centered.matmul_nt(directions);
            let back = centered.sub(&g.matmul(directions));
            (g, back.add_row(mean))
        }
    };
    let rec = match &ts.standardizer {
        Some(s) => s.invert(&rec)?,
        None => rec,
    };
    let named = |m: Matrix, prefix: &str| {
        let mut fm = FeatureMatrix::new(m);
        fm.columns = (0..fm.cols()).map(|i| format!("{prefix}{i}")).collect();
        fm
    };
    save_csv(c.out.join("invariant.csv"), &named(rep, "g"))?;
    save_csv(c.out.join("reconstruction.csv"), &named(rec, "x"))?;

    let labels = test.labels.as_ref().expect("toy test set is labeled");
    let table = det.score(&[&test.values], true)?;
    println!("S_inv AUC {}", auroc(&table.s_inv, labels)?);
    println!("S_final AUC {}", auroc(&table.s_final().expect("2-NN scores"), labels)?);
    eprintln!("wrote train.csv, test.csv, invariant.csv, reconstruction.csv, model.nldet to {}", c.out.display());
    Ok(())
}

fn run_landscape(c: &LandscapeCmd) -> nlinv::Result<()> {
    echo_config("landscape", &json!({"model": c.model, "test": c.test, "grid": c.grid, "range": c.range, "seed": c.seed}))?;
    let det = InvariantDetector::load(&c.model)?;
    let test = load_features(&c.test, true)?;
    let labels = test
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("{} carries no labels", c.test.display())))?;
    let grid = landscape(&det, &test.values, labels, c.grid, c.range, c.seed)?;
    write_or_print(c.out.as_deref(), &grid.to_csv())?;
    match grid.loss_auc_spearman() {
        Ok(rho) => eprintln!("spearman(loss, auc) = {rho:.4}"),
        Err(e) => eprintln!("spearman(loss, auc) unavailable: {e}"),
    }
    Ok(())
}
