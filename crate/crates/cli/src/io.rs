//! Artifact formats: embedding dumps (CSV) and report envelopes (JSON).
//!
//! A dump has the header `modality,sample_id,label,e0,...,e{d-1}`, rows
//! grouped by modality (in first-appearance order) and sorted by sample id.
//! Coordinates use Rust's shortest decimal representation that parses back
//! to the same `f64`, so a write/read cycle is exact.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use dagr_core::geom::{EmbeddingBatch, ModalityBatchSet};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("io error on {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("malformed dump: {0}")]
    Format(String),
}

fn fmt_err(msg: impl Into<String>) -> DumpError {
    DumpError::Format(msg.into())
}

/// Embeddings of several modalities over shared sample ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDump {
    pub modality_names: Vec<String>,
    /// Sorted ascending; row `i` of every block belongs to `sample_ids[i]`.
    pub sample_ids: Vec<u64>,
    pub labels: Vec<usize>,
    pub blocks: Vec<DMatrix<f64>>,
}

impl EmbeddingDump {
    /// Dump of `set` with sample ids `0..B` in row order.
    pub fn from_set(set: &ModalityBatchSet) -> Self {
        Self {
            modality_names: set.modality_names.clone(),
            sample_ids: (0..set.samples() as u64).collect(),
            labels: set.labels.clone(),
            blocks: set.batches.iter().map(|b| b.data().clone()).collect(),
        }
    }

    pub fn to_set(&self) -> Result<ModalityBatchSet, DumpError> {
        let batches = self
            .blocks
            .iter()
            .map(|b| EmbeddingBatch::new(b.clone()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| fmt_err(e.to_string()))?;
        ModalityBatchSet::with_names(batches, self.labels.clone(), self.modality_names.clone())
            .map_err(|e| fmt_err(e.to_string()))
    }

    pub fn write<W: std::io::Write>(&self, w: W) -> Result<(), DumpError> {
        let d = self.blocks.iter().map(|b| b.ncols()).max().unwrap_or(0);
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["modality".to_string(), "sample_id".into(), "label".into()];
        header.extend((0..d).map(|k| format!("e{k}")));
        let io = |e: csv::Error| DumpError::Io {
            path: "<writer>".into(),
            reason: e.to_string(),
        };
        out.write_record(&header).map_err(io)?;
        let mut order: Vec<usize> = (0..self.sample_ids.len()).collect();
        order.sort_by_key(|&i| self.sample_ids[i]);
        for (name, block) in self.modality_names.iter().zip(&self.blocks) {
            for &i in &order {
                let mut rec = vec![name.clone(), self.sample_ids[i].to_string(), self.labels[i].to_string()];
                rec.extend(block.row(i).iter().map(|v| format!("{v}")));
                // pad so every record has the header's width
                rec.resize(3 + d, String::new());
                out.write_record(&rec).map_err(io)?;
            }
        }
        out.flush().map_err(|e| DumpError::Io {
            path: "<writer>".into(),
            reason: e.to_string(),
        })
    }

    pub fn read<R: std::io::Read>(r: R) -> Result<Self, DumpError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let header = rdr.headers().map_err(|e| fmt_err(e.to_string()))?.clone();
        if header.len() < 4 || &header[0] != "modality" || &header[1] != "sample_id" || &header[2] != "label" {
            return Err(fmt_err("header must start with modality,sample_id,label,e0"));
        }
        for (k, h) in header.iter().skip(3).enumerate() {
            if h != format!("e{k}") {
                return Err(fmt_err(format!("column {} should be e{k}, found {h}", k + 3)));
            }
        }
        let mut names: Vec<String> = Vec::new();
        let mut rows: Vec<BTreeMap<u64, Vec<f64>>> = Vec::new();
        let mut labels: HashMap<u64, usize> = HashMap::new();
        let mut dims: Vec<Option<usize>> = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| fmt_err(e.to_string()))?;
            let at = line + 2;
            let m = match names.iter().position(|n| n == &rec[0]) {
                Some(m) => m,
                None => {
                    names.push(rec[0].to_string());
                    rows.push(BTreeMap::new());
                    dims.push(None);
                    names.len() - 1
                }
            };
            let id: u64 = rec[1].parse().map_err(|_| fmt_err(format!("line {at}: bad sample_id")))?;
            let label: usize = rec[2].parse().map_err(|_| fmt_err(format!("line {at}: bad label")))?;
            let vals = rec
                .iter()
                .skip(3)
                .take_while(|s| !s.is_empty())
                .map(|s| s.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| fmt_err(format!("line {at}: bad coordinate")))?;
            if rec.iter().skip(3 + vals.len()).any(|s| !s.is_empty()) {
                return Err(fmt_err(format!("line {at}: gap in coordinates")));
            }
            match dims[m] {
                None => dims[m] = Some(vals.len()),
                Some(d) if d != vals.len() => {
                    return Err(fmt_err(format!("line {at}: modality {} has mixed widths", names[m])));
                }
                _ => {}
            }
            if *labels.entry(id).or_insert(label) != label {
                return Err(fmt_err(format!("line {at}: label of sample {id} differs across modalities")));
            }
            if rows[m].insert(id, vals).is_some() {
                return Err(fmt_err(format!("line {at}: duplicate sample {id} in {}", names[m])));
            }
        }
        if names.is_empty() {
            return Err(fmt_err("no rows"));
        }
        let ids: Vec<u64> = rows[0].keys().copied().collect();
        for (m, r) in rows.iter().enumerate() {
            if !r.keys().eq(ids.iter()) {
                return Err(fmt_err(format!("modality {} covers different samples", names[m])));
            }
        }
        let blocks = rows
            .iter()
            .zip(&dims)
            .map(|(r, d)| {
                let d = d.unwrap_or(0);
                DMatrix::from_row_iterator(r.len(), d, r.values().flatten().copied())
            })
            .collect();
        Ok(Self {
            modality_names: names,
            labels: ids.iter().map(|i| labels[i]).collect(),
            sample_ids: ids,
            blocks,
        })
    }

    pub fn write_file(&self, path: &Path) -> Result<(), DumpError> {
        let f = std::fs::File::create(path).map_err(|e| DumpError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        self.write(std::io::BufWriter::new(f))
    }

    pub fn read_file(path: &Path) -> Result<Self, DumpError> {
        let f = std::fs::File::open(path).map_err(|e| DumpError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::read(std::io::BufReader::new(f))
    }
}

/// JSON wrapper written by every subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEnvelope {
    pub version: String,
    pub command: String,
    pub config_echo: serde_json::Value,
    pub seed: u64,
    pub started_at: String,
    pub results: serde_json::Value,
}

impl ReportEnvelope {
    pub fn new(command: &str, config_echo: serde_json::Value, seed: u64, started_at: String, results: serde_json::Value) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_echo,
            seed,
            started_at,
            results,
        }
    }

    pub fn write_file(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, text + "\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dagr_core::rng::SplitMix64;

    fn sample() -> EmbeddingDump {
        let mut rng = SplitMix64::new(5);
        EmbeddingDump {
            modality_names: vec!["audio".into(), "video".into()],
            sample_ids: vec![3, 7, 11],
            labels: vec![0, 1, 0],
            blocks: vec![
                DMatrix::from_fn(3, 4, |_, _| rng.normal() * 1e-3),
                DMatrix::from_fn(3, 2, |_, _| rng.normal() * 1e6),
            ],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let d = sample();
        let mut buf = Vec::new();
        d.write(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("modality,sample_id,label,e0,e1,e2,e3\n"));
        let back = EmbeddingDump::read(&buf[..]).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn rejects_inconsistent_dumps() {
        let bad_label = "modality,sample_id,label,e0\na,0,0,1.0\nb,0,1,1.0\n";
        assert!(EmbeddingDump::read(bad_label.as_bytes()).is_err());
        let dup = "modality,sample_id,label,e0\na,0,0,1.0\na,0,0,2.0\n";
        assert!(EmbeddingDump::read(dup.as_bytes()).is_err());
        let missing = "modality,sample_id,label,e0\na,0,0,1.0\na,1,0,1.0\nb,0,0,1.0\n";
        assert!(EmbeddingDump::read(missing.as_bytes()).is_err());
        let header = "mod,sample_id,label,e0\n";
        assert!(EmbeddingDump::read(header.as_bytes()).is_err());
    }

    #[test]
    fn rows_sorted_by_id() {
        let text = "modality,sample_id,label,e0\na,5,1,0.5\na,2,0,0.25\n";
        let d = EmbeddingDump::read(text.as_bytes()).unwrap();
        assert_eq!(d.sample_ids, vec![2, 5]);
        assert_eq!(d.labels, vec![0, 1]);
        assert_eq!(d.blocks[0][(0, 0)], 0.25);
    }
}
