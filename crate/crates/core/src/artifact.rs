//! Provenance stamps and weight-file helpers shared by the model modules.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{read_records, write_records, Record, Tensor};

/// Identifies the configuration and seed an artifact was produced from.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Provenance {
    /// Hex SHA-256 of the canonical config text.
    pub config_hash: String,
    pub seed: u64,
}

const HASH_RECORD: &str = "__provenance__/config_sha256";
const SEED_RECORD: &str = "__provenance__/seed";
pub const KIND_PREFIX: &str = "__kind__/";

impl Provenance {
    /// Records holding the hash bytes and the seed split into 16-bit words,
    /// both exactly representable in f32.
    pub fn to_records(&self) -> Vec<Record> {
        let bytes = hex::decode(&self.config_hash).unwrap_or_default();
        let hash: Vec<f32> = bytes.iter().map(|&b| b as f32).collect();
        let seed: Vec<f32> = (0..4).map(|i| ((self.seed >> (16 * i)) & 0xffff) as f32).collect();
        let mut out = Vec::new();
        if !hash.is_empty() {
            out.push(Record::new(HASH_RECORD, Tensor::from_slice(&hash)));
        }
        out.push(Record::new(SEED_RECORD, Tensor::from_slice(&seed)));
        out
    }

    pub fn from_records(records: &[Record]) -> Provenance {
        let mut p = Provenance::default();
        for r in records {
            if r.name == HASH_RECORD {
                let bytes: Vec<u8> = r.tensor.data().iter().map(|&v| v as u8).collect();
                p.config_hash = hex::encode(bytes);
            } else if r.name == SEED_RECORD {
                p.seed = r
                    .tensor
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| (v as u64) << (16 * i))
                    .sum();
            }
        }
        p
    }
}

pub fn kind_record(kind: &str) -> Record {
    Record::new(format!("{KIND_PREFIX}{kind}"), Tensor::scalar(1.0))
}

pub fn kind_of(records: &[Record]) -> Option<&str> {
    records.iter().find_map(|r| r.name.strip_prefix(KIND_PREFIX))
}

pub fn save_records(path: &Path, records: &[Record]) -> Result<()> {
    let f = File::create(path)?;
    write_records(BufWriter::new(f), records)
}

pub fn load_records(path: &Path, hint: &str) -> Result<Vec<Record>> {
    let f = File::open(path).map_err(|e| {
        Error::MissingArtifact(format!("{} ({e}); run `{hint}` first", path.display()))
    })?;
    read_records(BufReader::new(f))
}
