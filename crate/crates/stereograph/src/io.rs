//! Dataset and metrics files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stereograph_core::data::Dataset;
use stereograph_core::trainer::{RepeatSummary, TrainConfig};

/// Errors from reading or writing files.
#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}:{column}: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Data {
        path: PathBuf,
        #[source]
        source: stereograph_core::Error,
    },
}

/// On-disk dataset layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    name: String,
    n: usize,
    n_classes: usize,
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    /// Required key; `null` means no input graph.
    #[serde(deserialize_with = "Option::deserialize")]
    edges: Option<Vec<[usize; 2]>>,
}

fn schema_error(path: &Path, e: &serde_json::Error) -> IoError {
    IoError::Schema {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

/// Parses a dataset document. `origin` only labels errors.
pub fn parse_dataset(text: &str, origin: &Path) -> Result<Dataset, IoError> {
    let file: DatasetFile = serde_json::from_str(text).map_err(|e| schema_error(origin, &e))?;
    let data_err = |source| IoError::Data {
        path: origin.to_path_buf(),
        source,
    };
    if file.labels.len() != file.n {
        return Err(data_err(stereograph_core::Error::Data(format!(
            "n = {} but {} labels are listed",
            file.n,
            file.labels.len()
        ))));
    }
    let edges = file.edges.map(|e| e.into_iter().map(|[i, j]| (i, j)).collect());
    Dataset::new(file.name, file.n_classes, file.features, file.labels, edges).map_err(data_err)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, IoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })?;
    parse_dataset(&text, path)
}

pub fn dataset_to_json(data: &Dataset) -> String {
    let file = DatasetFile {
        name: data.name.clone(),
        n: data.n(),
        n_classes: data.n_classes,
        features: data.features().to_rows(),
        labels: data.labels().to_vec(),
        edges: data.edges().map(|e| e.iter().map(|&(i, j)| [i, j]).collect()),
    };
    serde_json::to_string(&file).expect("datasets always serialise")
}

fn write(path: &Path, text: &str) -> Result<(), IoError> {
    fs::write(path, text).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_dataset(data: &Dataset, path: impl AsRef<Path>) -> Result<(), IoError> {
    write(path.as_ref(), &dataset_to_json(data))
}

/// Outcome of one run inside a metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub test_acc: f64,
    pub best_epoch: usize,
    /// Component curvatures at the selected epoch, keyed like `P1`.
    pub curvature: BTreeMap<String, f64>,
    pub temperature: Option<f64>,
}

/// Summary written by `train --out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub mean_acc: f64,
    pub std_acc: f64,
    pub per_run: Vec<RunRecord>,
    /// Mean over runs of each curved component's selected curvature.
    pub curvature_final: BTreeMap<String, f64>,
    /// Mean over runs of the selected temperature.
    pub temperature_final: Option<f64>,
}

/// Component keys: kind letter followed by the component's position.
fn curvature_keys(config: &TrainConfig) -> Vec<Option<String>> {
    config.model.latent.as_ref().map_or_else(Vec::new, |l| {
        l.signature
            .components()
            .iter()
            .enumerate()
            .map(|(i, c)| (c.kind.curvature_sign() != 0).then(|| format!("{}{i}", c.kind.letter())))
            .collect()
    })
}

impl MetricsFile {
    pub fn from_summary(config: &TrainConfig, summary: &RepeatSummary) -> Self {
        let keys = curvature_keys(config);
        let per_run: Vec<RunRecord> = summary
            .runs
            .iter()
            .enumerate()
            .map(|(r, m)| RunRecord {
                seed: config.seed.wrapping_add(r as u64),
                test_acc: m.test_acc,
                best_epoch: m.best_epoch,
                curvature: keys
                    .iter()
                    .zip(m.final_curvatures())
                    .filter_map(|(k, &v)| k.clone().map(|k| (k, v)))
                    .collect(),
                temperature: m.final_temperature(),
            })
            .collect();
        let runs = per_run.len() as f64;
        let mut curvature_final = BTreeMap::new();
        for rec in &per_run {
            for (k, v) in &rec.curvature {
                *curvature_final.entry(k.clone()).or_insert(0.0) += v / runs;
            }
        }
        let temperature_final = per_run
            .iter()
            .map(|r| r.temperature)
            .sum::<Option<f64>>()
            .map(|t| t / runs);
        MetricsFile {
            mean_acc: summary.mean,
            std_acc: summary.std,
            per_run,
            curvature_final,
            temperature_final,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics always serialise");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IoError> {
        write(path.as_ref(), &self.to_json())
    }
}
