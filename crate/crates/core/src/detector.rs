//! Multi-scale detector: training, scoring and the on-disk container.
//!
//! Container layout (integers little-endian):
//!
//! ```text
//! "NLDET1\0"
//! u32 header length, JSON header
//! per scale: u64 length, model bytes; u64 length, NLFM1 training features
//! SHA-256 of everything above
//! ```
//!
//! Network scales store their model in the `NLINV1` format. Affine scales
//! store an NLFM1 matrix whose first row is the mean and whose remaining
//! rows are the invariant directions.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{decode_bin, encode_bin, FeatureMatrix, Standardizer};
use crate::error::{Error, Result, ResultExt};
use crate::invariant::{train_scale_with, EpochLoss, ScaleConfig, ScaleModel, TrainedScale};
use crate::knn::{KnnIndex, KnnScale};
use crate::linalg::Matrix;
use crate::vpn;

pub const DETECTOR_MAGIC: &[u8; 7] = b"NLDET1\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub scale: ScaleConfig,
    /// Z-score each scale with training statistics.
    pub standardize: bool,
    /// Build the 2-NN index at training time.
    pub knn: bool,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            scale: ScaleConfig::default(),
            standardize: true,
            knn: true,
        }
    }
}

impl DetectorConfig {
    /// Seed used for scale `index`.
    pub fn scale_seed(&self, index: usize) -> u64 {
        self.scale.seed.wrapping_add(index as u64)
    }
}

/// Per-sample scores; `s_2nn` is absent when only invariants were scored.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub s_inv: Vec<f64>,
    pub s_2nn: Option<Vec<f64>>,
}

impl ScoreTable {
    pub fn len(&self) -> usize {
        self.s_inv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s_inv.is_empty()
    }

    /// `S_inv + S_2nn`, or `None` without 2-NN scores.
    pub fn s_final(&self) -> Option<Vec<f64>> {
        self.s_2nn
            .as_ref()
            .map(|nn| self.s_inv.iter().zip(nn).map(|(a, b)| a + b).collect())
    }
}

#[derive(Clone, Debug)]
pub struct InvariantDetector {
    pub config: DetectorConfig,
    pub scales: Vec<TrainedScale>,
    pub knn: Option<KnnIndex>,
}

fn check_rows(scales: &[&Matrix]) -> Result<usize> {
    let first = scales
        .first()
        .ok_or_else(|| Error::invalid("at least one feature scale is required"))?;
    if let Some(bad) = scales.iter().find(|x| x.rows() != first.rows()) {
        return Err(Error::invalid(format!(
            "scales have different sample counts: {} and {}",
            first.rows(),
            bad.rows()
        )));
    }
    Ok(first.rows())
}

impl InvariantDetector {
    pub fn train(scales: &[&Matrix], config: &DetectorConfig) -> Result<Self> {
        Self::train_with(scales, config, |_, _| {})
    }

    /// Trains every scale (in parallel); `on_epoch` receives the scale index
    /// and each finished epoch.
    pub fn train_with(
        scales: &[&Matrix],
        config: &DetectorConfig,
        on_epoch: impl Fn(usize, &EpochLoss) + Sync,
    ) -> Result<Self> {
        config.scale.validate()?;
        check_rows(scales)?;
        let trained: Vec<TrainedScale> = scales
            .par_iter()
            .enumerate()
            .map(|(i, raw)| {
                let standardizer = if config.standardize {
                    Some(Standardizer::fit(raw)?)
                } else {
                    None
                };
                let x = match &standardizer {
                    Some(s) => s.apply(raw)?,
                    None => (*raw).clone(),
                };
                let cfg = ScaleConfig {
                    seed: config.scale_seed(i),
                    ..config.scale.clone()
                };
                let mut ts = train_scale_with(&x, &cfg, |e| on_epoch(i, e))
                    .map_err(|e| e.context(format!("training scale {i}")))?;
                ts.standardizer = standardizer;
                Ok(ts)
            })
            .collect::<Result<_>>()?;
        let knn = if config.knn {
            Some(KnnIndex {
                scales: trained
                    .iter()
                    .map(|ts| KnnScale::build(ts.features.clone(), ts.k))
                    .collect::<Result<_>>()?,
            })
        } else {
            None
        };
        Ok(InvariantDetector {
            config: config.clone(),
            scales: trained,
            knn,
        })
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn total_k(&self) -> usize {
        self.scales.iter().map(|s| s.k).sum()
    }

    /// Scores raw per-scale features. `with_knn` adds the 2-NN score.
    pub fn score(&self, scales: &[&Matrix], with_knn: bool) -> Result<ScoreTable> {
        if scales.len() != self.scales.len() {
            return Err(Error::invalid(format!(
                "detector has {} scales, got {} feature files",
                self.scales.len(),
                scales.len()
            )));
        }
        let n = check_rows(scales)?;
        let knn = match (with_knn, &self.knn) {
            (false, _) => None,
            (true, Some(index)) => Some(index),
            (true, None) => {
                return Err(Error::invalid(
                    "detector was trained without a 2-NN index; score invariants only",
                ))
            }
        };
        let mut s_inv = vec![0.0; n];
        let mut s_2nn = knn.map(|_| vec![0.0; n]);
        for (i, (ts, raw)) in self.scales.iter().zip(scales).enumerate() {
            let x = ts.prepare(raw).map_err(|e| e.context(format!("scale {i}")))?;
            for (t, s) in s_inv.iter_mut().zip(ts.score_prepared(&x)?) {
                *t += s;
            }
            if let (Some(index), Some(total)) = (knn, s_2nn.as_mut()) {
                for (t, s) in total.iter_mut().zip(index.scales[i].score_rows(&x)?) {
                    *t += s;
                }
            }
        }
        Ok(ScoreTable { s_inv, s_2nn })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format: "nlinv-detector".into(),
            version: FORMAT_VERSION,
            config: self.config.clone(),
            scales: self
                .scales
                .iter()
                .enumerate()
                .map(|(i, ts)| ScaleHeader {
                    kind: match ts.model {
                        ScaleModel::Vpn(_) => ScaleKind::Vpn,
                        ScaleModel::Affine { .. } => ScaleKind::Affine,
                    },
                    dim: ts.dim(),
                    k: ts.k,
                    seed: self.config.scale_seed(i),
                    errors: ts.errors.clone(),
                    standardizer: ts.standardizer.clone(),
                    loo_mean: self.knn.as_ref().map(|k| k.scales[i].loo_mean),
                    history: ts.history.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(DETECTOR_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for ts in &self.scales {
            let model = match &ts.model {
                ScaleModel::Vpn(m) => vpn::serialize(m, ts.k),
                ScaleModel::Affine { mean, directions } => {
                    let stacked = Matrix::row_vector(mean).concat_rows(directions);
                    encode_bin(&FeatureMatrix::new(stacked))
                }
            };
            push_blob(&mut out, &model);
            push_blob(&mut out, &encode_bin(&FeatureMatrix::new((*ts.features).clone())));
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(DETECTOR_MAGIC.len())? != DETECTOR_MAGIC {
            return Err(Error::Format("not a detector file (expected NLDET1 magic)".into()));
        }
        if bytes.len() < DETECTOR_MAGIC.len() + 4 + 32 {
            return Err(Error::Format("detector file truncated".into()));
        }
        let (payload, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(payload).as_slice() != digest {
            return Err(Error::Format("detector checksum mismatch".into()));
        }
        r.bytes = payload;
        let header_len = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(r.take(header_len)?)?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported detector format version {}",
                header.version
            )));
        }
        let mut scales = Vec::with_capacity(header.scales.len());
        let mut knn = Vec::new();
        for (i, sh) in header.scales.into_iter().enumerate() {
            let model_bytes = r.blob()?;
            let features = decode_bin(r.blob()?)
                .map_err(|e| e.context(format!("scale {i} features")))?
                .values;
            let model = match sh.kind {
                ScaleKind::Vpn => {
                    let (m, k) = vpn::deserialize(model_bytes)?;
                    if k != sh.k {
                        return Err(Error::Format(format!("scale {i}: header K {} vs model K {k}", sh.k)));
                    }
                    ScaleModel::Vpn(m)
                }
                ScaleKind::Affine => {
                    let stacked = decode_bin(model_bytes)?.values;
                    if stacked.rows() != sh.k + 1 {
                        return Err(Error::Format(format!("scale {i}: affine model has wrong row count")));
                    }
                    ScaleModel::Affine {
                        mean: stacked.row(0).to_vec(),
                        directions: stacked.slice_rows(1, stacked.rows()),
                    }
                }
            };
            if model.dim() != sh.dim || features.cols() != sh.dim || sh.errors.len() != sh.k {
                return Err(Error::Format(format!("scale {i}: inconsistent dimensions")));
            }
            let features = Arc::new(features);
            if let Some(loo) = sh.loo_mean {
                knn.push(KnnScale::from_parts(features.clone(), sh.k, loo)?);
            }
            scales.push(TrainedScale {
                model,
                k: sh.k,
                errors: sh.errors,
                features,
                standardizer: sh.standardizer,
                history: sh.history,
            });
        }
        if r.pos != payload.len() {
            return Err(Error::Format("trailing bytes in detector file".into()));
        }
        let knn = match knn.len() {
            0 => None,
            n if n == scales.len() => Some(KnnIndex { scales: knn }),
            _ => return Err(Error::Format("2-NN statistics missing for some scales".into())),
        };
        Ok(InvariantDetector {
            config: header.config,
            scales,
            knn,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?)
            .map_err(Error::from)
            .context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)
            .map_err(Error::from)
            .context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&bytes).context(|| format!("loading {}", path.display()))
    }
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ScaleKind {
    Vpn,
    Affine,
}

#[derive(Serialize, Deserialize)]
struct ScaleHeader {
    kind: ScaleKind,
    dim: usize,
    k: usize,
    seed: u64,
    errors: Vec<f64>,
    standardizer: Option<Standardizer>,
    loo_mean: Option<f64>,
    history: Vec<EpochLoss>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: DetectorConfig,
    scales: Vec<ScaleHeader>,
}

fn push_blob(out: &mut Vec<u8>, blob: &[u8]) {
    out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    out.extend_from_slice(blob);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("detector file truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn blob(&mut self) -> Result<&'a [u8]> {
        let len = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        let len = usize::try_from(len).map_err(|_| Error::Format("blob too large".into()))?;
        self.take(len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_box, gen_circle};

    fn quick(seed: u64) -> DetectorConfig {
        DetectorConfig {
            scale: ScaleConfig {
                epochs: 2,
                seed,
                hidden: Some(8),
                k: Some(1),
                ..ScaleConfig::default()
            },
            ..DetectorConfig::default()
        }
    }

    #[test]
    fn container_round_trip() {
        let a = gen_circle(120, 1.0, 0.05, 1).unwrap().values;
        let b = gen_box(120, 3, 1.0, 2).unwrap().values;
        let det = InvariantDetector::train(&[&a, &b], &quick(4)).unwrap();
        let bytes = det.to_bytes().unwrap();
        let back = InvariantDetector::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let probe_a = gen_circle(10, 1.5, 0.0, 3).unwrap().values;
        let probe_b = gen_box(10, 3, 2.0, 4).unwrap().values;
        assert_eq!(
            det.score(&[&probe_a, &probe_b], true).unwrap(),
            back.score(&[&probe_a, &probe_b], true).unwrap()
        );
    }

    #[test]
    fn linear_container_round_trip() {
        let a = gen_box(80, 4, 1.0, 1).unwrap().values;
        let cfg = DetectorConfig {
            scale: ScaleConfig {
                linear: true,
                k: None,
                ..quick(0).scale
            },
            knn: false,
            ..quick(0)
        };
        let det = InvariantDetector::train(&[&a], &cfg).unwrap();
        let back = InvariantDetector::from_bytes(&det.to_bytes().unwrap()).unwrap();
        assert!(back.knn.is_none());
        assert_eq!(det.score(&[&a], false).unwrap(), back.score(&[&a], false).unwrap());
        assert!(back.score(&[&a], true).is_err());
    }

    #[test]
    fn corrupted_container_is_rejected() {
        let a = gen_circle(50, 1.0, 0.05, 1).unwrap().values;
        let bytes = InvariantDetector::train(&[&a], &quick(0)).unwrap().to_bytes().unwrap();
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 1;
        assert!(matches!(InvariantDetector::from_bytes(&flipped), Err(Error::Format(_))));
        assert!(matches!(InvariantDetector::from_bytes(&bytes[..20]), Err(Error::Format(_))));
        assert!(matches!(InvariantDetector::from_bytes(b"NLINV1\0xxxx"), Err(Error::Format(_))));
    }

    #[test]
    fn multi_scale_scores_sum() {
        let a = gen_circle(100, 1.0, 0.05, 1).unwrap().values;
        let b = gen_circle(100, 2.0, 0.05, 2).unwrap().values;
        let det = InvariantDetector::train(&[&a, &b], &quick(7)).unwrap();
        let (pa, pb) = (gen_box(7, 2, 2.0, 5).unwrap().values, gen_box(7, 2, 2.0, 6).unwrap().values);
        let table = det.score(&[&pa, &pb], true).unwrap();
        let s0 = det.scales[0].score(&pa).unwrap();
        let s1 = det.scales[1].score(&pb).unwrap();
        for i in 0..7 {
            assert_eq!(table.s_inv[i], s0[i] + s1[i]);
        }
        let fin = table.s_final().unwrap();
        let nn = table.s_2nn.as_ref().unwrap();
        for i in 0..7 {
            assert_eq!(fin[i], table.s_inv[i] + nn[i]);
        }
    }

    #[test]
    fn scale_count_and_row_mismatches() {
        let a = gen_circle(60, 1.0, 0.05, 1).unwrap().values;
        let short = gen_circle(59, 1.0, 0.05, 1).unwrap().values;
        assert!(InvariantDetector::train(&[&a, &short], &quick(0)).is_err());
        let det = InvariantDetector::train(&[&a], &quick(0)).unwrap();
        assert!(matches!(det.score(&[&a, &a], false), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn scales_get_distinct_seeds() {
        let cfg = quick(10);
        assert_eq!(cfg.scale_seed(0), 10);
        assert_eq!(cfg.scale_seed(2), 12);
    }
}
