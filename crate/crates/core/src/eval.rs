//! AUROC, rank correlation, the benchmark runner and loss landscapes.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{Dn2Model, MahaModel, DN2_DEFAULT_K};
use crate::data::{
    self, encode_bin, gen_box, gen_circle, gen_ushape, make_shallow_split, FeatureMatrix, Registry,
    Standardizer,
};
use crate::detector::{sha256_hex, DetectorConfig, InvariantDetector};
use crate::error::{Error, Result, ResultExt};
use crate::invariant::{training_errors, ScaleConfig, ScaleModel, TrainedScale};
use crate::linalg::Matrix;
use crate::vpn::{backward_loss, forward_loss, VpnModel, DEFAULT_BLOCKS};

/// Average ranks (1-based), ties sharing the mean of their positions.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        for &o in &order[i..j] {
            ranks[o] = rank;
        }
        i = j;
    }
    ranks
}

/// Probability that a random label-1 sample outscores a random label-0
/// sample, ties counting one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("scores contain NaN"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.iter().filter(|&&l| l == 0).count();
    if pos + neg != labels.len() {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("AUROC needs both inliers and outliers"));
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(r, _)| r).sum();
    let (pos, neg) = (pos as f64, neg as f64);
    Ok((rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg))
}

/// Spearman rank correlation.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid("spearman needs two equal-length series of at least 2 values"));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::DegenerateData("rank correlation of a constant series".into()));
    }
    Ok(cov / (va * vb).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyShape {
    Circle,
    Ushape,
}

/// Two-dimensional toy problem: inliers on a noisy curve, outliers uniform
/// in a box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyTask {
    pub shape: ToyShape,
    pub n_train: usize,
    pub n_test_inliers: usize,
    pub n_test_outliers: usize,
    pub noise: f64,
    pub box_half_width: f64,
}

impl Default for ToyTask {
    fn default() -> Self {
        ToyTask {
            shape: ToyShape::Circle,
            n_train: 1000,
            n_test_inliers: 500,
            n_test_outliers: 500,
            noise: 0.05,
            box_half_width: 4.0,
        }
    }
}

impl ToyTask {
    fn inliers(&self, n: usize, seed: u64) -> Result<FeatureMatrix> {
        match self.shape {
            ToyShape::Circle => gen_circle(n, 1.0, self.noise, seed),
            ToyShape::Ushape => gen_ushape(n, self.noise, seed),
        }
    }

    /// Unlabeled training set and labeled test set (outliers labeled 1,
    /// listed after the inliers).
    pub fn generate(&self, seed: u64) -> Result<(FeatureMatrix, FeatureMatrix)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seeds: [u64; 3] = rng.random();
        let train = self.inliers(self.n_train, seeds[0])?;
        let test_in = self.inliers(self.n_test_inliers, seeds[1])?;
        let test_out = gen_box(self.n_test_outliers, 2, self.box_half_width, seeds[2])?;
        let values = test_in.values.concat_rows(&test_out.values);
        let labels = std::iter::repeat_n(0, self.n_test_inliers)
            .chain(std::iter::repeat_n(1, self.n_test_outliers))
            .collect();
        Ok((train, FeatureMatrix::with_labels(values, labels)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Nlinvs,
    NlinvsNoBwd,
    LinearInvariants,
    Mahaad,
    Dn2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreKind {
    #[serde(rename = "S_inv", alias = "inv")]
    Inv,
    #[serde(rename = "S_final", alias = "final")]
    Final,
}

impl Method {
    pub fn default_score(self) -> Option<ScoreKind> {
        match self {
            Method::Nlinvs => Some(ScoreKind::Final),
            Method::NlinvsNoBwd | Method::LinearInvariants => Some(ScoreKind::Inv),
            Method::Mahaad | Method::Dn2 => None,
        }
    }

    /// Method/score pairs that correspond to an ablation row or baseline.
    pub fn check_score(self, score: Option<ScoreKind>) -> Result<()> {
        let ok = match (self, score) {
            (_, None) => true,
            (Method::Nlinvs, Some(_)) => true,
            (Method::NlinvsNoBwd | Method::LinearInvariants, Some(ScoreKind::Inv)) => true,
            _ => false,
        };
        if !ok {
            return Err(Error::invalid(format!(
                "score {score:?} is not available for method {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    /// A dataset from a registry file, split per seed.
    Registry { registry: PathBuf, name: String },
    /// A labeled CSV (last column 0/1), split per seed.
    Csv { path: PathBuf },
    /// Fixed per-scale train and test files. Labels come from
    /// `test_labels` (one 0/1 per line) or else from the first test file.
    Split {
        train: Vec<PathBuf>,
        test: Vec<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
    },
    /// Generated toy data.
    Toy(ToyTask),
}

/// Training hyperparameters of a benchmark; the method fixes the rest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub p_percent: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub blocks: usize,
    pub hidden: Option<usize>,
    pub k: Option<usize>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let s = ScaleConfig::default();
        TrainSettings {
            p_percent: s.p_percent,
            epochs: s.epochs,
            batch_size: s.batch_size,
            lr_start: s.lr_start,
            lr_end: s.lr_end,
            blocks: DEFAULT_BLOCKS,
            hidden: s.hidden,
            k: s.k,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub method: Method,
    #[serde(default)]
    pub score: Option<ScoreKind>,
    pub dataset: DatasetSpec,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default = "default_true")]
    pub standardize: bool,
    #[serde(default = "default_dn2_k")]
    pub dn2_k: usize,
    /// Report path prefix; `.json` and `.csv` are appended.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

fn default_true() -> bool {
    true
}

fn default_dn2_k() -> usize {
    DN2_DEFAULT_K
}

impl BenchmarkConfig {
    pub fn new(method: Method, dataset: DatasetSpec) -> Self {
        BenchmarkConfig {
            name: None,
            method,
            score: None,
            dataset,
            seeds: default_seeds(),
            train: TrainSettings::default(),
            standardize: true,
            dn2_k: DN2_DEFAULT_K,
            output: None,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(Error::from)
            .context(|| format!("reading {}", path.display()))?;
        let cfg: BenchmarkConfig = serde_json::from_str(&text)
            .map_err(Error::from)
            .context(|| format!("parsing {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.method.check_score(self.score)?;
        if self.seeds.is_empty() {
            return Err(Error::invalid("at least one seed is required"));
        }
        self.detector_config(0).scale.validate()
    }

    pub fn resolved_score(&self) -> Option<ScoreKind> {
        self.score.or(self.method.default_score())
    }

    /// Detector settings for one seed of an invariant-based method.
    pub fn detector_config(&self, seed: u64) -> DetectorConfig {
        let t = &self.train;
        DetectorConfig {
            scale: ScaleConfig {
                p_percent: t.p_percent,
                epochs: t.epochs,
                batch_size: t.batch_size,
                lr_start: t.lr_start,
                lr_end: t.lr_end,
                seed,
                backward_loss: self.method != Method::NlinvsNoBwd,
                linear: self.method == Method::LinearInvariants,
                blocks: t.blocks,
                hidden: t.hidden,
                k: t.k,
            },
            standardize: self.standardize,
            knn: self.resolved_score() == Some(ScoreKind::Final),
        }
    }
}

/// Train and test features, one matrix per scale, and test labels.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: Vec<Matrix>,
    pub test: Vec<Matrix>,
    pub labels: Vec<u8>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn split_full(full: &FeatureMatrix, seed: u64) -> Result<Prepared> {
    let split = make_shallow_split(full, seed)?;
    Ok(Prepared {
        train: vec![split.train.values],
        labels: split.test.labels.clone().expect("split test set is labeled"),
        test: vec![split.test.values],
    })
}

/// Loads (or generates) the data of one seed; relative paths resolve
/// against `base`.
pub fn prepare_dataset(spec: &DatasetSpec, seed: u64, base: &Path) -> Result<Prepared> {
    match spec {
        DatasetSpec::Registry { registry, name } => {
            let reg = Registry::load(resolve(base, registry))?;
            split_full(&reg.load_dataset(name)?, seed).context(|| format!("dataset {name}"))
        }
        DatasetSpec::Csv { path } => {
            let path = resolve(base, path);
            split_full(&data::load_csv(&path, true)?, seed).context(|| format!("dataset {}", path.display()))
        }
        DatasetSpec::Split {
            train,
            test,
            test_labels,
        } => {
            if train.is_empty() || train.len() != test.len() {
                return Err(Error::invalid(format!(
                    "{} train files but {} test files",
                    train.len(),
                    test.len()
                )));
            }
            let load = |p: &PathBuf, labels: bool| data::load_features(resolve(base, p), labels);
            let train = train
                .iter()
                .map(|p| load(p, false).map(|f| f.values))
                .collect::<Result<Vec<_>>>()?;
            let mut test_files = Vec::with_capacity(test.len());
            for (i, p) in test.iter().enumerate() {
                test_files.push(load(p, i == 0 && test_labels.is_none())?);
            }
            let labels = match test_labels {
                Some(p) => Some(data::load_labels(resolve(base, p))?),
                None => test_files[0].labels.take(),
            }
            .ok_or_else(|| Error::invalid("test labels are missing"))?;
            Ok(Prepared {
                train,
                test: test_files.into_iter().map(|f| f.values).collect(),
                labels,
            })
        }
        DatasetSpec::Toy(task) => {
            let (train, test) = task.generate(seed)?;
            Ok(Prepared {
                train: vec![train.values],
                labels: test.labels.expect("toy test set is labeled"),
                test: vec![test.values],
            })
        }
    }
}

/// Result of one method on one seed.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub scores: Vec<f64>,
    pub auc: f64,
    pub model_hash: String,
    pub detector: Option<InvariantDetector>,
}

fn standardized(train: &[Matrix], test: &[Matrix], on: bool) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
    if !on {
        return Ok((train.to_vec(), test.to_vec()));
    }
    let mut tr = Vec::with_capacity(train.len());
    let mut te = Vec::with_capacity(test.len());
    for (a, b) in train.iter().zip(test) {
        let s = Standardizer::fit(a)?;
        tr.push(s.apply(a)?);
        te.push(s.apply(b)?);
    }
    Ok((tr, te))
}

fn hash_matrices(tag: &str, xs: &[Matrix]) -> String {
    let mut bytes = tag.as_bytes().to_vec();
    for x in xs {
        bytes.extend(encode_bin(&FeatureMatrix::new(x.clone())));
    }
    sha256_hex(&bytes)
}

/// Trains and scores one seed of a benchmark.
pub fn run_seed(cfg: &BenchmarkConfig, data: &Prepared, seed: u64) -> Result<SeedRun> {
    if data.train.len() != data.test.len() {
        return Err(Error::invalid("train and test scale counts differ"));
    }
    let train: Vec<&Matrix> = data.train.iter().collect();
    let (scores, hash, detector) = match cfg.method {
        Method::Nlinvs | Method::NlinvsNoBwd | Method::LinearInvariants => {
            let det_cfg = cfg.detector_config(seed);
            let det = InvariantDetector::train(&train, &det_cfg)?;
            let test: Vec<&Matrix> = data.test.iter().collect();
            let kind = cfg.resolved_score().unwrap_or(ScoreKind::Inv);
            let table = det.score(&test, kind == ScoreKind::Final)?;
            let scores = match kind {
                ScoreKind::Inv => table.s_inv,
                ScoreKind::Final => table.s_final().expect("2-NN scores requested"),
            };
            let hash = sha256_hex(&det.to_bytes()?);
            (scores, hash, Some(det))
        }
        Method::Mahaad => {
            let (tr, te) = standardized(&data.train, &data.test, cfg.standardize)?;
            let model = MahaModel::fit(&tr.iter().collect::<Vec<_>>())?;
            let scores = model.score(&te.iter().collect::<Vec<_>>())?;
            (scores, hash_matrices("mahaad", &tr), None)
        }
        Method::Dn2 => {
            let (tr, te) = standardized(&data.train, &data.test, cfg.standardize)?;
            let hash = hash_matrices(&format!("dn2 k={}", cfg.dn2_k), &tr);
            let model = Dn2Model::new(tr.into_iter().map(Arc::new).collect(), cfg.dn2_k)?;
            (model.score(&te.iter().collect::<Vec<_>>())?, hash, None)
        }
    };
    let auc = auroc(&scores, &data.labels)?;
    Ok(SeedRun {
        scores,
        auc,
        model_hash: hash,
        detector,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedAuc {
    pub seed: u64,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config: BenchmarkConfig,
    pub per_seed: Vec<SeedAuc>,
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub std: f64,
    pub wall_time_s: f64,
    pub model_hashes: Vec<String>,
}

impl BenchmarkReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,auc,model_hash\n");
        for (s, h) in self.per_seed.iter().zip(&self.model_hashes) {
            out.push_str(&format!("{},{},{}\n", s.seed, s.auc, h));
        }
        out
    }

    /// Writes `<prefix>.json` and `<prefix>.csv`.
    pub fn write(&self, prefix: &Path) -> Result<()> {
        let with = |ext: &str| {
            let mut p = prefix.as_os_str().to_owned();
            p.push(ext);
            PathBuf::from(p)
        };
        if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(with(".json"), serde_json::to_string_pretty(self)?)?;
        std::fs::write(with(".csv"), self.to_csv())?;
        Ok(())
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs every seed (in parallel) and aggregates the AUCs.
pub fn run_benchmark(cfg: &BenchmarkConfig, base: &Path) -> Result<BenchmarkReport> {
    cfg.validate()?;
    let start = Instant::now();
    let runs: Vec<(u64, SeedRun)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let data = prepare_dataset(&cfg.dataset, seed, base)?;
            let run = run_seed(cfg, &data, seed).context(|| format!("{:?}, seed {seed}", cfg.method))?;
            Ok((seed, run))
        })
        .collect::<Result<_>>()?;
    let aucs: Vec<f64> = runs.iter().map(|(_, r)| r.auc).collect();
    let (mean, std) = mean_std(&aucs);
    Ok(BenchmarkReport {
        config: cfg.clone(),
        per_seed: runs.iter().map(|(seed, r)| SeedAuc { seed: *seed, auc: r.auc }).collect(),
        mean,
        std,
        wall_time_s: start.elapsed().as_secs_f64(),
        model_hashes: runs.into_iter().map(|(_, r)| r.model_hash).collect(),
    })
}

/// One landscape cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeCell {
    pub x: f64,
    pub y: f64,
    pub loss: f64,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandscapeGrid {
    pub grid_n: usize,
    pub range: f64,
    /// Row-major over `y`, then `x`.
    pub cells: Vec<LandscapeCell>,
}

impl LandscapeGrid {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,loss,auc\n");
        for c in &self.cells {
            out.push_str(&format!("{},{},{},{}\n", c.x, c.y, c.loss, c.auc));
        }
        out
    }

    /// Spearman correlation between loss and AUC over finite cells.
    pub fn loss_auc_spearman(&self) -> Result<f64> {
        let (loss, auc): (Vec<f64>, Vec<f64>) = self
            .cells
            .iter()
            .filter(|c| c.loss.is_finite() && c.auc.is_finite())
            .map(|c| (c.loss, c.auc))
            .unzip();
        spearman(&loss, &auc)
    }
}

/// Grid coordinate `i` of `n` over `[-range, range]`; the middle of an odd
/// grid is exactly zero.
pub fn grid_coord(i: usize, n: usize, range: f64) -> f64 {
    let half = (n - 1) as f64 / 2.0;
    range * (i as f64 - half) / half
}

/// Random direction in parameter space, each tensor rescaled to the norm of
/// the matching parameter tensor.
pub fn filter_normalized_direction(params: &[Matrix], rng: &mut ChaCha8Rng) -> Vec<Matrix> {
    params
        .iter()
        .map(|p| {
            let d = Matrix::from_fn(p.rows(), p.cols(), |_, _| StandardNormal.sample(&mut *rng));
            let (dn, pn) = (d.sum_squares().sqrt(), p.sum_squares().sqrt());
            if dn > 0.0 {
                d.scale(pn / dn)
            } else {
                d
            }
        })
        .collect()
}

fn cell_metrics(model: &VpnModel, ts: &TrainedScale, test: &Matrix, labels: &[u8], with_bwd: bool) -> (f64, f64) {
    let train = &ts.features;
    let loss = (|| -> Result<f64> {
        let mut l = forward_loss(model, train, ts.k)?;
        if with_bwd {
            l += backward_loss(model, train, ts.k)?;
        }
        Ok(l)
    })()
    .unwrap_or(f64::NAN);
    let auc = (|| -> Result<f64> {
        let errors = training_errors(model, train, ts.k)?;
        let probe = TrainedScale {
            model: ScaleModel::Vpn(model.clone()),
            errors,
            history: Vec::new(),
            ..ts.clone()
        };
        let scores = probe.score_prepared(test)?;
        if scores.iter().any(|s| !s.is_finite()) {
            return Ok(f64::NAN);
        }
        auroc(&scores, labels)
    })()
    .unwrap_or(f64::NAN);
    (loss, auc)
}

/// Training loss and `S_inv` AUC of a single-scale network detector over a
/// `grid_n × grid_n` grid of parameter perturbations. `test` holds raw
/// features.
pub fn landscape(
    det: &InvariantDetector,
    test: &Matrix,
    labels: &[u8],
    grid_n: usize,
    range: f64,
    seed: u64,
) -> Result<LandscapeGrid> {
    if grid_n < 3 {
        return Err(Error::invalid(format!("grid size must be at least 3, got {grid_n}")));
    }
    if !(range > 0.0) || !range.is_finite() {
        return Err(Error::invalid(format!("range must be positive, got {range}")));
    }
    let [ts] = det.scales.as_slice() else {
        return Err(Error::invalid("landscapes need a single-scale detector"));
    };
    let ScaleModel::Vpn(model) = &ts.model else {
        return Err(Error::invalid("landscapes need a network detector, not an affine one"));
    };
    if labels.len() != test.rows() {
        return Err(Error::invalid("label count does not match the test set"));
    }
    let test = ts.prepare(test)?;
    let params = model.params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d1 = filter_normalized_direction(&params, &mut rng);
    let d2 = filter_normalized_direction(&params, &mut rng);
    let with_bwd = det.config.scale.backward_loss;

    let cells = (0..grid_n * grid_n)
        .into_par_iter()
        .map(|cell| {
            let (j, i) = (cell / grid_n, cell % grid_n);
            let (x, y) = (grid_coord(i, grid_n, range), grid_coord(j, grid_n, range));
            let moved: Vec<Matrix> = params
                .iter()
                .zip(d1.iter().zip(&d2))
                .map(|(p, (a, b))| p.add(&a.scale(x)).add(&b.scale(y)))
                .collect();
            let mut m = model.clone();
            m.set_params(&moved)?;
            let (loss, auc) = cell_metrics(&m, ts, &test, labels, with_bwd);
            Ok(LandscapeCell { x, y, loss, auc })
        })
        .collect::<Result<_>>()?;
    Ok(LandscapeGrid {
        grid_n,
        range,
        cells,
    })
}
