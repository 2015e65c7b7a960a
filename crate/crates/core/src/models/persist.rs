//! Self-describing model files.
//!
//! A model file is one JSON document. Every floating-point array is stored as
//! `{"dims": [...], "data": "<base64>"}` where `data` is the packed
//! little-endian `f64` bytes, so a save/load round trip is bit-exact.
//!
//! ```json
//! {
//!   "format": "bayesfit-model",
//!   "version": 1,
//!   "kind": "linear_regression",
//!   "seed": 42,
//!   "spec": { "model": "linear_regression", "weight_scale": 10.0, ... },
//!   "feature_names": ["x"],
//!   "normalization": { "x_mean": {...}, "x_sd": {...}, "y_mean": {...}, "y_sd": {...} },
//!   "artifact": { "engine": "advi", "mu": {...}, "omega": {...}, "elbo": {...}, "window": 100 },
//!   "train": null
//! }
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{EstimatorState, FittedArtifact, ModelSpec, Normalization, TrainingData};
use crate::advi::{ElboHistory, VariationalPosterior};
use crate::linalg::Matrix;
use crate::nuts::{BlockView, ChainTrace, IterationStats, Trace};

pub const FORMAT_VERSION: u32 = 1;
pub const FORMAT_TAG: &str = "bayesfit-model";

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt model file: field `{field}`: {detail}")]
    Corrupt { field: String, detail: String },
    #[error("unsupported model file version {found} (expected {expected})")]
    Version { found: u64, expected: u32 },
    #[error("model file holds a {found} model, expected {expected}")]
    KindMismatch { expected: &'static str, found: String },
}

fn corrupt(field: impl Into<String>, detail: impl Into<String>) -> PersistError {
    PersistError::Corrupt {
        field: field.into(),
        detail: detail.into(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Packed {
    dims: Vec<usize>,
    data: String,
}

impl Packed {
    fn new(dims: Vec<usize>, values: &[f64]) -> Self {
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            dims,
            data: STANDARD.encode(bytes),
        }
    }

    fn scalar(v: f64) -> Self {
        Self::new(vec![], &[v])
    }

    fn vector(v: &[f64]) -> Self {
        Self::new(vec![v.len()], v)
    }

    fn matrix(m: &Matrix) -> Self {
        Self::new(vec![m.rows(), m.cols()], m.as_slice())
    }

    fn rows(rows: &[Vec<f64>], cols: usize) -> Self {
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], &flat)
    }

    fn decode(&self, field: &str, rank: usize) -> Result<Vec<f64>, PersistError> {
        if self.dims.len() != rank {
            return Err(corrupt(field, format!("expected rank {rank}, found dims {:?}", self.dims)));
        }
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| corrupt(field, format!("invalid base64: {e}")))?;
        let expected: usize = self.dims.iter().product();
        if bytes.len() != expected * 8 {
            return Err(corrupt(
                field,
                format!("dims {:?} need {} bytes, found {}", self.dims, expected * 8, bytes.len()),
            ));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect())
    }

    fn to_scalar(&self, field: &str) -> Result<f64, PersistError> {
        Ok(self.decode(field, 0)?[0])
    }

    fn to_vector(&self, field: &str) -> Result<Vec<f64>, PersistError> {
        self.decode(field, 1)
    }

    fn to_matrix(&self, field: &str) -> Result<Matrix, PersistError> {
        let v = self.decode(field, 2)?;
        Ok(Matrix::from_row_major(self.dims[0], self.dims[1], v))
    }

    fn to_rows(&self, field: &str, cols: usize) -> Result<Vec<Vec<f64>>, PersistError> {
        let m = self.to_matrix(field)?;
        if m.cols() != cols {
            return Err(corrupt(field, format!("expected {cols} columns, found {}", m.cols())));
        }
        Ok((0..m.rows()).map(|i| m.row(i).to_vec()).collect())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NormDoc {
    x_mean: Packed,
    x_sd: Packed,
    y_mean: Packed,
    y_sd: Packed,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChainDoc {
    draws: Packed,
    warmup_draws: Packed,
    /// Columns: divergent, tree_depth, n_leapfrog, step_size, accept_stat, energy.
    stats: Packed,
    step_size: Packed,
    inv_mass: Packed,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "engine", rename_all = "snake_case", deny_unknown_fields)]
enum ArtifactDoc {
    Advi {
        mu: Packed,
        omega: Packed,
        elbo: Packed,
        window: usize,
    },
    Nuts {
        names: Vec<String>,
        blocks: Vec<BlockView>,
        warmup: usize,
        warnings: Vec<String>,
        chains: Vec<ChainDoc>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainDoc {
    x: Packed,
    y: Packed,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    format: String,
    version: u32,
    kind: String,
    seed: u64,
    spec: ModelSpec,
    feature_names: Vec<String>,
    normalization: NormDoc,
    artifact: ArtifactDoc,
    train: Option<TrainDoc>,
}

const STAT_COLS: usize = 6;

fn stats_rows(stats: &[IterationStats]) -> Vec<Vec<f64>> {
    stats
        .iter()
        .map(|s| {
            vec![
                if s.divergent { 1.0 } else { 0.0 },
                s.tree_depth as f64,
                s.n_leapfrog as f64,
                s.step_size,
                s.accept_stat,
                s.energy,
            ]
        })
        .collect()
}

fn stats_from_rows(rows: Vec<Vec<f64>>) -> Vec<IterationStats> {
    rows.into_iter()
        .map(|r| IterationStats {
            divergent: r[0] != 0.0,
            tree_depth: r[1] as usize,
            n_leapfrog: r[2] as usize,
            step_size: r[3],
            accept_stat: r[4],
            energy: r[5],
        })
        .collect()
}

fn to_document(state: &EstimatorState) -> Document {
    let n = &state.normalization;
    let artifact = match &state.artifact {
        FittedArtifact::Variational { posterior, history } => ArtifactDoc::Advi {
            mu: Packed::vector(&posterior.mu),
            omega: Packed::vector(&posterior.omega),
            elbo: Packed::vector(&history.values),
            window: history.window,
        },
        FittedArtifact::Trace(t) => {
            let k = t.names.len();
            ArtifactDoc::Nuts {
                names: t.names.clone(),
                blocks: t.blocks.clone(),
                warmup: t.warmup,
                warnings: t.warnings.clone(),
                chains: t
                    .chains
                    .iter()
                    .map(|c| ChainDoc {
                        draws: Packed::rows(&c.draws, k),
                        warmup_draws: Packed::rows(&c.warmup_draws, k),
                        stats: Packed::rows(&stats_rows(&c.stats), STAT_COLS),
                        step_size: Packed::scalar(c.step_size),
                        inv_mass: Packed::vector(&c.inv_mass),
                    })
                    .collect(),
            }
        }
    };
    Document {
        format: FORMAT_TAG.into(),
        version: state.version,
        kind: state.kind().as_str().into(),
        seed: state.seed,
        spec: state.spec.clone(),
        feature_names: state.feature_names.clone(),
        normalization: NormDoc {
            x_mean: Packed::vector(&n.x_mean),
            x_sd: Packed::vector(&n.x_sd),
            y_mean: Packed::scalar(n.y_mean),
            y_sd: Packed::scalar(n.y_sd),
        },
        artifact,
        train: state.train.as_ref().map(|t| TrainDoc {
            x: Packed::matrix(&t.x),
            y: Packed::vector(&t.y),
        }),
    }
}

fn from_document(doc: Document) -> Result<EstimatorState, PersistError> {
    if doc.kind != doc.spec.kind().as_str() {
        return Err(corrupt(
            "kind",
            format!("`{}` does not match the stored model settings for `{}`", doc.kind, doc.spec.kind()),
        ));
    }
    let d = doc.feature_names.len();
    let normalization = Normalization {
        x_mean: doc.normalization.x_mean.to_vector("normalization.x_mean")?,
        x_sd: doc.normalization.x_sd.to_vector("normalization.x_sd")?,
        y_mean: doc.normalization.y_mean.to_scalar("normalization.y_mean")?,
        y_sd: doc.normalization.y_sd.to_scalar("normalization.y_sd")?,
    };
    if normalization.x_mean.len() != d || normalization.x_sd.len() != d {
        return Err(corrupt("normalization", format!("expected {d} feature constants")));
    }
    let artifact = match doc.artifact {
        ArtifactDoc::Advi {
            mu,
            omega,
            elbo,
            window,
        } => {
            let mu = mu.to_vector("artifact.mu")?;
            let omega = omega.to_vector("artifact.omega")?;
            let posterior = VariationalPosterior::new(mu, omega)
                .map_err(|e| corrupt("artifact.omega", e.to_string()))?;
            let mut history = ElboHistory::new(window);
            history.values = elbo.to_vector("artifact.elbo")?;
            FittedArtifact::Variational { posterior, history }
        }
        ArtifactDoc::Nuts {
            names,
            blocks,
            warmup,
            warnings,
            chains,
        } => {
            let k = names.len();
            let chains = chains
                .into_iter()
                .enumerate()
                .map(|(c, ch)| {
                    let f = |name: &str| format!("artifact.chains[{c}].{name}");
                    let stats = stats_from_rows(ch.stats.to_rows(&f("stats"), STAT_COLS)?);
                    let draws = ch.draws.to_rows(&f("draws"), k)?;
                    if stats.len() != draws.len() {
                        return Err(corrupt(f("stats"), "row count differs from draws"));
                    }
                    Ok(ChainTrace {
                        draws,
                        stats,
                        warmup_draws: ch.warmup_draws.to_rows(&f("warmup_draws"), k)?,
                        step_size: ch.step_size.to_scalar(&f("step_size"))?,
                        inv_mass: ch.inv_mass.to_vector(&f("inv_mass"))?,
                    })
                })
                .collect::<Result<Vec<_>, PersistError>>()?;
            FittedArtifact::Trace(Trace {
                names,
                blocks,
                chains,
                warmup,
                warnings,
            })
        }
    };
    let train = match doc.train {
        Some(t) => Some(TrainingData {
            x: t.x.to_matrix("train.x")?,
            y: t.y.to_vector("train.y")?,
        }),
        None => None,
    };
    Ok(EstimatorState {
        version: doc.version,
        spec: doc.spec,
        feature_names: doc.feature_names,
        normalization,
        artifact,
        train,
        seed: doc.seed,
    })
}

/// Serializes a fitted state to the model-file text.
pub fn encode_state(state: &EstimatorState) -> String {
    serde_json::to_string_pretty(&to_document(state)).expect("model document serializes") + "\n"
}

/// Parses model-file text, checking the format tag and version first.
pub fn decode_state(text: &str) -> Result<EstimatorState, PersistError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| corrupt("<document>", e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| corrupt("<document>", "not a JSON object"))?;
    match obj.get("format").and_then(|f| f.as_str()) {
        Some(FORMAT_TAG) => {}
        Some(other) => return Err(corrupt("format", format!("unknown format `{other}`"))),
        None => return Err(corrupt("format", "missing")),
    }
    let version = obj
        .get("version")
        .ok_or_else(|| corrupt("version", "missing"))?
        .as_u64()
        .ok_or_else(|| corrupt("version", "not an unsigned integer"))?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(PersistError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let doc: Document = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        corrupt(path, e.into_inner().to_string())
    })?;
    from_document(doc)
}

pub fn save_state(state: &EstimatorState, path: &Path) -> Result<(), PersistError> {
    fs::write(path, encode_state(state)).map_err(|source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_state(path: &Path) -> Result<EstimatorState, PersistError> {
    let text = fs::read_to_string(path).map_err(|source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_state(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{LinearRegressionSpec, ModelKind};

    fn sample_state() -> EstimatorState {
        EstimatorState {
            version: FORMAT_VERSION,
            spec: ModelSpec::LinearRegression(LinearRegressionSpec::default()),
            feature_names: vec!["x".into()],
            normalization: Normalization {
                x_mean: vec![0.1],
                x_sd: vec![1.0 / 3.0],
                y_mean: -2.5e-300,
                y_sd: 7.0,
            },
            artifact: FittedArtifact::Variational {
                posterior: VariationalPosterior::new(vec![0.3, 0.1 + 0.2, -1.0], vec![-1.0, -2.0, f64::MIN_POSITIVE])
                    .unwrap(),
                history: ElboHistory {
                    values: vec![f64::NEG_INFINITY, -3.25, -1.0 / 7.0],
                    window: 100,
                },
            },
            train: None,
            seed: u64::MAX,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let s = sample_state();
        let back = decode_state(&encode_state(&s)).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.kind(), ModelKind::LinearRegression);
    }

    #[test]
    fn version_is_checked() {
        let text = encode_state(&sample_state()).replace("\"version\": 1", "\"version\": 999");
        assert!(matches!(decode_state(&text), Err(PersistError::Version { found: 999, .. })));
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let text = encode_state(&sample_state());
        let cut = &text[..text.len() / 2];
        assert!(matches!(decode_state(cut), Err(PersistError::Corrupt { .. })));
    }

    #[test]
    fn bad_array_names_its_field() {
        let text = encode_state(&sample_state());
        let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
        let mut doc = doc;
        doc["normalization"]["x_sd"]["data"] = "AAAA".into();
        match decode_state(&doc.to_string()) {
            Err(PersistError::Corrupt { field, .. }) => assert_eq!(field, "normalization.x_sd"),
            other => panic!("unexpected {other:?}"),
        }
        let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
        doc["artifact"].as_object_mut().unwrap().remove("omega");
        match decode_state(&doc.to_string()) {
            Err(PersistError::Corrupt { field, detail }) => {
                assert!(field.starts_with("artifact"), "{field}");
                assert!(detail.contains("omega"), "{detail}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
