//! Feature files: a JSON-lines manifest plus a raw little-endian `f64` blob.
//!
//! The first manifest line is the header
//! `{"version":1,"C":..,"d_image_in":..,"L":..,"d_word":..}`; every following
//! line describes one record
//! `{"id":..,"domain":"image"|"text","labels":[0,1,..],"pair_id":..,"offset":..,"rows":..,"cols":..}`
//! whose values live at byte `offset` of the blob, `rows·cols` doubles in
//! row-major order. Image records are `1 × d_image_in`; text records are
//! `rows × d_word` with `rows ≤ L` and are zero-padded to `L` on load.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, Domain, Sample};
use crate::error::DataError;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureHeader {
    pub version: u32,
    #[serde(rename = "C")]
    pub n_categories: usize,
    pub d_image_in: usize,
    #[serde(rename = "L")]
    pub max_len: usize,
    pub d_word: usize,
}

impl FeatureHeader {
    pub fn new(n_categories: usize, d_image_in: usize, max_len: usize, d_word: usize) -> Self {
        Self {
            version: FORMAT_VERSION,
            n_categories,
            d_image_in,
            max_len,
            d_word,
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.version != FORMAT_VERSION {
            return Err(DataError::Header(format!(
                "unsupported version {} (expected {FORMAT_VERSION})",
                self.version
            )));
        }
        for (name, v) in [
            ("C", self.n_categories),
            ("d_image_in", self.d_image_in),
            ("L", self.max_len),
            ("d_word", self.d_word),
        ] {
            if v == 0 {
                return Err(DataError::Header(format!("`{name}` must be at least 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    domain: String,
    #[serde(serialize_with = "labels_as_integers")]
    labels: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pair_id: Option<String>,
    offset: u64,
    rows: usize,
    cols: usize,
}

/// Readers accept `1` and `1.0`; writers emit `1`.
fn labels_as_integers<S: serde::Serializer>(labels: &[f64], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(labels.iter().map(|&l| l as u8))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `samples` to `manifest` and `blob`. Text features are written with
/// all `L` rows, so loading them back is bit-exact.
pub fn write_features(
    manifest: &Path,
    blob: &Path,
    header: &FeatureHeader,
    samples: &[Sample],
) -> Result<(), DataError> {
    header.validate()?;
    let mut m = BufWriter::new(fs::File::create(manifest).map_err(io_err(manifest))?);
    let mut b = BufWriter::new(fs::File::create(blob).map_err(io_err(blob))?);
    let head = serde_json::to_string(header).expect("header serializes");
    writeln!(m, "{head}").map_err(io_err(manifest))?;
    let mut offset = 0u64;
    for s in samples {
        let (rows, cols) = match s.feature.shape() {
            &[n] => (1, n),
            &[r, c] => (r, c),
            other => {
                return Err(DataError::Batch(format!(
                    "sample {} has unsupported feature shape {other:?}",
                    s.id
                )))
            }
        };
        let rec = Record {
            id: s.id.clone(),
            domain: s.domain.as_str().to_string(),
            labels: s.labels.data().to_vec(),
            pair_id: s.pair_id.clone(),
            offset,
            rows,
            cols,
        };
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(m, "{line}").map_err(io_err(manifest))?;
        for v in s.feature.data() {
            b.write_all(&v.to_le_bytes()).map_err(io_err(blob))?;
        }
        offset += (rows * cols * 8) as u64;
    }
    m.flush().map_err(io_err(manifest))?;
    b.flush().map_err(io_err(blob))?;
    Ok(())
}

/// Loads and validates every record in `manifest`, in file order.
pub fn load_features(blob: &Path, manifest: &Path) -> Result<(FeatureHeader, Vec<Sample>), DataError> {
    let text = fs::read_to_string(manifest).map_err(io_err(manifest))?;
    let bytes = fs::read(blob).map_err(io_err(blob))?;
    parse_features(&text, &bytes)
}

fn parse_features(manifest: &str, blob: &[u8]) -> Result<(FeatureHeader, Vec<Sample>), DataError> {
    let mut lines = manifest.lines().filter(|l| !l.trim().is_empty());
    let head_line = lines
        .next()
        .ok_or_else(|| DataError::Header("manifest is empty".into()))?;
    let header: FeatureHeader =
        serde_json::from_str(head_line).map_err(|e| DataError::Header(e.to_string()))?;
    header.validate()?;
    let mut samples = Vec::new();
    for (index, line) in lines.enumerate() {
        let rec: Record = serde_json::from_str(line).map_err(|e| DataError::Record {
            index,
            message: e.to_string(),
        })?;
        samples.push(decode_record(index, rec, &header, blob)?);
    }
    Ok((header, samples))
}

fn decode_record(
    index: usize,
    rec: Record,
    header: &FeatureHeader,
    blob: &[u8],
) -> Result<Sample, DataError> {
    let domain = Domain::parse(&rec.domain).ok_or_else(|| DataError::UnknownDomain {
        index,
        tag: rec.domain.clone(),
    })?;
    let labels_err = |message: String| DataError::Labels {
        index,
        id: rec.id.clone(),
        message,
    };
    if rec.labels.len() != header.n_categories {
        return Err(labels_err(format!(
            "{} labels, expected C={}",
            rec.labels.len(),
            header.n_categories
        )));
    }
    if rec.labels.iter().any(|&l| l != 0.0 && l != 1.0) {
        return Err(labels_err("labels must be 0 or 1".into()));
    }
    if !rec.labels.contains(&1.0) {
        return Err(labels_err("at least one label must be set".into()));
    }
    let shape_err = |expected: String| DataError::Shape {
        index,
        id: rec.id.clone(),
        rows: rec.rows,
        cols: rec.cols,
        expected,
    };
    match domain {
        Domain::Image if rec.rows != 1 || rec.cols != header.d_image_in => {
            return Err(shape_err(format!("1x{}", header.d_image_in)));
        }
        Domain::Text if rec.rows == 0 || rec.rows > header.max_len || rec.cols != header.d_word => {
            return Err(shape_err(format!("(1..={})x{}", header.max_len, header.d_word)));
        }
        _ => {}
    }
    let n = rec.rows * rec.cols;
    let start = rec.offset as usize;
    let end = start.checked_add(n * 8);
    if rec.offset % 8 != 0 || end.is_none_or(|e| e > blob.len()) {
        return Err(DataError::Record {
            index,
            message: format!(
                "offset {} with {n} values is outside the {}-byte blob",
                rec.offset,
                blob.len()
            ),
        });
    }
    let mut values: Vec<f64> = blob[start..start + n * 8]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(DataError::NonFinite { index, id: rec.id });
    }
    let feature = match domain {
        Domain::Image => Tensor::from_vec(values),
        Domain::Text => {
            values.resize(header.max_len * header.d_word, 0.0);
            Tensor::new(&[header.max_len, header.d_word], values).expect("padded to L rows")
        }
    };
    Ok(Sample {
        id: rec.id,
        domain,
        feature,
        labels: Tensor::from_vec(rec.labels),
        pair_id: rec.pair_id,
    })
}

/// `(manifest, blob)` paths of split `name` inside `dir`.
pub fn split_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{name}.jsonl")),
        dir.join(format!("{name}.bin")),
    )
}

pub fn load_split(dir: &Path, name: &str) -> Result<(FeatureHeader, Vec<Sample>), DataError> {
    let (manifest, blob) = split_paths(dir, name);
    load_features(&blob, &manifest)
}

/// Writes `train` and `test` splits into `dir`.
pub fn save_dataset_dir(dir: &Path, data: &Dataset) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (name, samples) in [("train", &data.train), ("test", &data.test)] {
        let (manifest, blob) = split_paths(dir, name);
        write_features(&manifest, &blob, &data.header, samples)?;
    }
    Ok(())
}

pub fn load_dataset_dir(dir: &Path) -> Result<Dataset, DataError> {
    let (header, train) = load_split(dir, "train")?;
    let (test_header, test) = load_split(dir, "test")?;
    if test_header != header {
        return Err(DataError::Header(format!(
            "train and test headers differ: {header:?} vs {test_header:?}"
        )));
    }
    Ok(Dataset {
        header,
        train,
        test,
    })
}
