//! Darcy datasets as line-delimited JSON: one header line, then one
//! record per sample.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::darcy::{generate_darcy_sample, grid_to_graph};
use crate::error::{invalid, AmqError, Result};
use crate::graph::{Incoming, MeshGraph};
use crate::tensor::Matrix;

pub const FORMAT: &str = "amq-darcy-jsonl";
pub const GENERATOR_VERSION: u32 = 1;

/// A graph with per-node regression targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub graph: MeshGraph,
    pub targets: Matrix,
    pub seed: u64,
}

impl Sample {
    pub fn incoming(&self) -> Incoming {
        self.graph.incoming()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Source grid size (nodes per side, boundary included).
    pub n: usize,
    pub stride: usize,
    pub k: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n: 32, stride: 2, k: 5, n_train: 200, n_val: 50, seed: 0 }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 8 {
            return invalid(format!("grid size {} is below 8", self.n));
        }
        if self.stride == 0 || self.k == 0 {
            return invalid("stride and k must be positive");
        }
        let side = self.n.div_ceil(self.stride);
        if side * side < self.k {
            return invalid(format!("{} graph nodes for k = {}", side * side, self.k));
        }
        if self.n_train == 0 {
            return invalid("at least one training sample is required");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub generator_version: u32,
    pub seed: u64,
    pub n: usize,
    pub stride: usize,
    pub k: usize,
    pub n_train: usize,
    pub n_val: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    split: Split,
    seed: u64,
    positions: Vec<Vec<f64>>,
    edges: Vec<(usize, usize)>,
    features: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Split {
    Train,
    Val,
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

impl Record {
    fn from_sample(s: &Sample, split: Split) -> Self {
        Self {
            split,
            seed: s.seed,
            positions: rows(&s.graph.positions),
            edges: s.graph.edges.clone(),
            features: rows(&s.graph.features),
            targets: rows(&s.targets),
        }
    }

    fn into_sample(self) -> Result<Sample> {
        let graph = MeshGraph::new(
            Matrix::from_rows(&self.positions)?,
            Matrix::from_rows(&self.features)?,
            self.edges,
            None,
        )?;
        let targets = Matrix::from_rows(&self.targets)?;
        if targets.rows() != graph.n_nodes() {
            return Err(AmqError::Format("target count differs from node count".into()));
        }
        Ok(Sample { graph, targets, seed: self.seed })
    }
}

/// Per-sample generator seeds, training samples first, drawn from a
/// stream seeded by `cfg.seed`.
pub fn sample_seeds(cfg: &DataConfig) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.n_train + cfg.n_val).map(|_| rng.next_u64()).collect()
}

/// Generates `n_train + n_val` solved samples.
pub fn generate_dataset(cfg: &DataConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut samples = sample_seeds(cfg)
        .into_iter()
        .map(|seed| grid_to_graph(&generate_darcy_sample(cfg.n, seed)?, cfg.stride, cfg.k))
        .collect::<Result<Vec<Sample>>>()?;
    let val = samples.split_off(cfg.n_train);
    let train = samples;
    let header = DatasetHeader {
        format: FORMAT.into(),
        generator_version: GENERATOR_VERSION,
        seed: cfg.seed,
        n: cfg.n,
        stride: cfg.stride,
        k: cfg.k,
        n_train: cfg.n_train,
        n_val: cfg.n_val,
    };
    Ok(Dataset { header, train, val })
}

fn json_err(e: serde_json::Error) -> AmqError {
    AmqError::Format(e.to_string())
}

impl Dataset {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &self.header).map_err(json_err)?;
        w.write_all(b"\n")?;
        let all = self.train.iter().map(|s| (s, Split::Train)).chain(self.val.iter().map(|s| (s, Split::Val)));
        for (s, split) in all {
            serde_json::to_writer(&mut w, &Record::from_sample(s, split)).map_err(json_err)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let mut lines = BufReader::new(File::open(path)?).lines();
        let first = lines.next().ok_or_else(|| AmqError::Format("empty dataset file".into()))??;
        let header: DatasetHeader = serde_json::from_str(&first).map_err(json_err)?;
        if header.format != FORMAT || header.generator_version != GENERATOR_VERSION {
            return Err(AmqError::Format(format!(
                "unsupported dataset {} version {}",
                header.format, header.generator_version
            )));
        }
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(json_err)?;
            match rec.split {
                Split::Train => train.push(rec.into_sample()?),
                Split::Val => val.push(rec.into_sample()?),
            }
        }
        if train.len() != header.n_train || val.len() != header.n_val {
            return Err(AmqError::Format(format!(
                "header promises {}/{} samples, file has {}/{}",
                header.n_train,
                header.n_val,
                train.len(),
                val.len()
            )));
        }
        Ok(Self { header, train, val })
    }
}

/// Lowercase hex SHA-256 of a file.
pub fn file_sha256(path: &Path) -> Result<String> {
    let mut f = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}
