//! Per-sample logits records and the `AMIA` binary container.
//!
//! A container holds, for every sample, the target token ids and the raw
//! pre-softmax logits row that predicts each target. Rows are already aligned
//! with their targets: row `i` is the prediction distribution for
//! `targets[i]`. All probability math happens in [`derive_distributions`],
//! in 64-bit precision.
//!
//! Layout (all integers and reals little-endian):
//!
//! ```text
//! "AMIA" | version: u32 = 1 | vocab_size: u32
//! per record:
//!   id_len: u32 | id: UTF-8 bytes | label: u8 | slice: u8 | seq_len: u32
//!   targets: seq_len x u32 | logits: seq_len x vocab_size x f32 (row-major)
//! ```

use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"AMIA";
pub const FORMAT_VERSION: u32 = 1;
/// Magic + version + vocab size.
pub const HEADER_LEN: usize = 12;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("empty dataset")]
    EmptyDataset,
    #[error(
        "vocab mismatch: record `{sample_id}` has vocab size {found}, dataset declares {expected}"
    )]
    VocabMismatch {
        sample_id: String,
        expected: usize,
        found: usize,
    },
    #[error("invalid record `{sample_id}`: {reason}")]
    InvalidRecord { sample_id: String, reason: String },
    #[error("bad magic bytes {0:?}, expected \"AMIA\"")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload at byte {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("trailing garbage: {0} bytes after the last record")]
    TrailingBytes(usize),
}

#[derive(Debug, Error, PartialEq)]
pub enum DistributionError {
    #[error("non-finite logit in row {row}")]
    NonFiniteLogit { row: usize },
}

/// Membership label of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    NonMember = 0,
    Member = 1,
}

impl Label {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Label::NonMember),
            1 => Some(Label::Member),
            _ => None,
        }
    }

    pub fn is_member(self) -> bool {
        self == Label::Member
    }
}

/// Which part of the model output a logits slice was taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slice {
    Img = 0,
    Inst = 1,
    Desp = 2,
    InstDesp = 3,
    Text = 4,
}

impl Slice {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Slice::Img),
            1 => Some(Slice::Inst),
            2 => Some(Slice::Desp),
            3 => Some(Slice::InstDesp),
            4 => Some(Slice::Text),
            _ => None,
        }
    }
}

impl fmt::Display for Slice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Slice::Img => "img",
            Slice::Inst => "inst",
            Slice::Desp => "desp",
            Slice::InstDesp => "inst_desp",
            Slice::Text => "text",
        };
        f.write_str(s)
    }
}

/// One sample: aligned targets plus one logits row per target.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsRecord {
    pub sample_id: String,
    pub label: Label,
    pub slice: Slice,
    pub targets: Vec<u32>,
    /// Row-major `targets.len() x vocab_size`.
    pub logits: Vec<f32>,
}

impl LogitsRecord {
    pub fn new(
        sample_id: impl Into<String>,
        label: Label,
        slice: Slice,
        targets: Vec<u32>,
        logits: Vec<f32>,
    ) -> Self {
        Self {
            sample_id: sample_id.into(),
            label,
            slice,
            targets,
            logits,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.targets.len()
    }

    /// Vocabulary size implied by the logits buffer, or `None` if the buffer
    /// is not a whole number of rows.
    pub fn vocab_size(&self) -> Option<usize> {
        let n = self.targets.len();
        if n == 0 || self.logits.len() % n != 0 {
            return None;
        }
        Some(self.logits.len() / n)
    }

    pub fn row(&self, i: usize, vocab: usize) -> &[f32] {
        &self.logits[i * vocab..(i + 1) * vocab]
    }

    /// Image slices carry no ground-truth ids; exporters write all-zero
    /// targets as a sentinel.
    pub fn has_sentinel_targets(&self) -> bool {
        self.slice == Slice::Img && self.targets.iter().all(|&t| t == 0)
    }

    fn validate(&self, vocab: usize) -> Result<(), ContainerError> {
        let invalid = |reason: String| ContainerError::InvalidRecord {
            sample_id: self.sample_id.clone(),
            reason,
        };
        if self.targets.is_empty() {
            return Err(invalid("sequence length must be at least 1".into()));
        }
        match self.vocab_size() {
            Some(v) if v == vocab => {}
            Some(v) => {
                return Err(ContainerError::VocabMismatch {
                    sample_id: self.sample_id.clone(),
                    expected: vocab,
                    found: v,
                })
            }
            None => {
                return Err(invalid(format!(
                    "{} logits do not form {} whole rows",
                    self.logits.len(),
                    self.targets.len()
                )))
            }
        }
        if let Some(&t) = self.targets.iter().find(|&&t| t as usize >= vocab) {
            return Err(invalid(format!(
                "target id {t} outside vocabulary of {vocab}"
            )));
        }
        if u32::try_from(self.sample_id.len()).is_err() {
            return Err(invalid("sample id too long".into()));
        }
        Ok(())
    }
}

/// A set of records sharing one vocabulary.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub vocab_size: usize,
    pub records: Vec<LogitsRecord>,
    /// Free-text metadata. Not part of the on-disk container.
    pub provenance: String,
}

impl Dataset {
    pub fn new(vocab_size: usize, records: Vec<LogitsRecord>) -> Self {
        Self {
            vocab_size,
            records,
            provenance: String::new(),
        }
    }

    pub fn with_provenance(mut self, provenance: impl Into<String>) -> Self {
        self.provenance = provenance.into();
        self
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `(members, non-members)`.
    pub fn class_counts(&self) -> (usize, usize) {
        let members = self.records.iter().filter(|r| r.label.is_member()).count();
        (members, self.records.len() - members)
    }

    pub fn validate(&self) -> Result<(), ContainerError> {
        if self.records.is_empty() {
            return Err(ContainerError::EmptyDataset);
        }
        if self.vocab_size == 0 || u32::try_from(self.vocab_size).is_err() {
            return Err(ContainerError::InvalidRecord {
                sample_id: String::new(),
                reason: format!("vocab size {} not representable", self.vocab_size),
            });
        }
        self.records
            .iter()
            .try_for_each(|r| r.validate(self.vocab_size))
    }

    /// Subset by record indices, preserving vocabulary and provenance.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            vocab_size: self.vocab_size,
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            provenance: self.provenance.clone(),
        }
    }
}

/// Serializes a dataset into container bytes. Validation runs first, so an
/// invalid dataset produces no output at all.
pub fn encode_container(dataset: &Dataset) -> Result<Vec<u8>, ContainerError> {
    dataset.validate()?;
    let v = dataset.vocab_size;
    let payload: usize = dataset
        .records
        .iter()
        .map(|r| 4 + r.sample_id.len() + 2 + 4 + r.targets.len() * (4 + 4 * v))
        .sum();
    let mut buf = Vec::with_capacity(HEADER_LEN + payload);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(v as u32).to_le_bytes());
    for rec in &dataset.records {
        buf.extend_from_slice(&(rec.sample_id.len() as u32).to_le_bytes());
        buf.extend_from_slice(rec.sample_id.as_bytes());
        buf.push(rec.label.code());
        buf.push(rec.slice.code());
        buf.extend_from_slice(&(rec.targets.len() as u32).to_le_bytes());
        for t in &rec.targets {
            buf.extend_from_slice(&t.to_le_bytes());
        }
        for x in &rec.logits {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn write_container(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), ContainerError> {
    let bytes = encode_container(dataset)?;
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return Err(ContainerError::Truncated {
                offset: self.pos,
                needed: n - remaining,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, ContainerError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ContainerError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_container(bytes: &[u8]) -> Result<Dataset, ContainerError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(ContainerError::BadMagic([
            magic[0], magic[1], magic[2], magic[3],
        ]));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(ContainerError::UnsupportedVersion(version));
    }
    let vocab = cur.u32()? as usize;
    let mut records = Vec::new();
    while cur.pos < bytes.len() {
        let id_len = cur.u32()? as usize;
        let id_bytes = cur.take(id_len)?;
        let sample_id =
            String::from_utf8(id_bytes.to_vec()).map_err(|_| ContainerError::InvalidRecord {
                sample_id: String::from_utf8_lossy(id_bytes).into_owned(),
                reason: "sample id is not valid UTF-8".into(),
            })?;
        let invalid = |reason: String| ContainerError::InvalidRecord {
            sample_id: sample_id.clone(),
            reason,
        };
        let label_code = cur.u8()?;
        let label = Label::from_code(label_code)
            .ok_or_else(|| invalid(format!("unknown label code {label_code}")))?;
        let slice_code = cur.u8()?;
        let slice = Slice::from_code(slice_code)
            .ok_or_else(|| invalid(format!("unknown slice code {slice_code}")))?;
        let n = cur.u32()? as usize;
        let target_bytes = cur.take(
            n.checked_mul(4)
                .ok_or_else(|| invalid("length overflow".into()))?,
        )?;
        let targets = target_bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let cells = n
            .checked_mul(vocab)
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| invalid("length overflow".into()))?;
        let logits = cur
            .take(cells)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let rec = LogitsRecord {
            sample_id,
            label,
            slice,
            targets,
            logits,
        };
        rec.validate(vocab)?;
        records.push(rec);
    }
    let dataset = Dataset::new(vocab, records);
    if dataset.records.is_empty() {
        return Err(ContainerError::EmptyDataset);
    }
    Ok(dataset)
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Dataset, ContainerError> {
    decode_container(&fs::read(path)?)
}

/// 64-bit softmax and log-softmax of every row of a record, together with
/// the targets they predict.
#[derive(Debug, Clone)]
pub struct Distributions {
    pub seq_len: usize,
    pub vocab: usize,
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub targets: Vec<u32>,
    /// False for image slices whose targets are the all-zero sentinel.
    pub has_targets: bool,
}

impl Distributions {
    pub fn prob_row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.vocab..(i + 1) * self.vocab]
    }

    pub fn log_prob_row(&self, i: usize) -> &[f64] {
        &self.log_probs[i * self.vocab..(i + 1) * self.vocab]
    }

    /// Probability of the target token at every position.
    pub fn target_probs(&self) -> Vec<f64> {
        (0..self.seq_len)
            .map(|i| self.probs[i * self.vocab + self.targets[i] as usize])
            .collect()
    }

    /// Log-probability of the target token at every position.
    pub fn target_log_probs(&self) -> Vec<f64> {
        (0..self.seq_len)
            .map(|i| self.log_probs[i * self.vocab + self.targets[i] as usize])
            .collect()
    }
}

/// Stable softmax of one row: subtract the row max, normalize in 64 bits,
/// and take log-probabilities from the log-sum-exp rather than from the
/// (possibly underflowed) probabilities.
pub fn softmax_row(row: &[f32], probs: &mut [f64], log_probs: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let mut sum = 0.0;
    for (p, &x) in probs.iter_mut().zip(row) {
        *p = (x as f64 - max).exp();
        sum += *p;
    }
    let log_sum = sum.ln();
    for ((p, lp), &x) in probs.iter_mut().zip(log_probs.iter_mut()).zip(row) {
        *p /= sum;
        *lp = x as f64 - max - log_sum;
    }
}

pub fn derive_distributions(record: &LogitsRecord) -> Result<Distributions, DistributionError> {
    let n = record.seq_len();
    let v = record.logits.len() / n.max(1);
    let mut probs = vec![0.0; n * v];
    let mut log_probs = vec![0.0; n * v];
    for i in 0..n {
        let row = record.row(i, v);
        if row.iter().any(|x| !x.is_finite()) {
            return Err(DistributionError::NonFiniteLogit { row: i });
        }
        softmax_row(
            row,
            &mut probs[i * v..(i + 1) * v],
            &mut log_probs[i * v..(i + 1) * v],
        );
    }
    Ok(Distributions {
        seq_len: n,
        vocab: v,
        probs,
        log_probs,
        targets: record.targets.clone(),
        has_targets: !record.has_sentinel_targets(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, label: Label, targets: Vec<u32>, logits: Vec<f32>) -> LogitsRecord {
        LogitsRecord::new(id, label, Slice::Text, targets, logits)
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let ds = Dataset::new(3, vec![]);
        let err = encode_container(&ds).unwrap_err();
        assert!(matches!(err, ContainerError::EmptyDataset));
        assert_eq!(err.to_string(), "empty dataset");
    }

    #[test]
    fn vocab_mismatch_is_rejected_before_writing() {
        let ds = Dataset::new(
            3,
            vec![
                record("a", Label::Member, vec![0], vec![0.0; 3]),
                record("b", Label::NonMember, vec![0], vec![0.0; 4]),
            ],
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.amia");
        let err = write_container(&ds, &path).unwrap_err();
        assert!(matches!(
            err,
            ContainerError::VocabMismatch { found: 4, .. }
        ));
        assert!(err.to_string().contains("vocab mismatch"));
        assert!(!path.exists());
    }

    #[test]
    fn single_record_layout_is_byte_exact() {
        let logits = vec![0.5f32, -1.0, 2.0, 3.25, 0.0, -0.125];
        let ds = Dataset::new(
            3,
            vec![record("s1", Label::Member, vec![2, 0], logits.clone())],
        );
        let bytes = encode_container(&ds).unwrap();

        // Independent layout oracle.
        let mut expected = Vec::new();
        expected.extend_from_slice(b"AMIA");
        expected.extend_from_slice(&[1, 0, 0, 0]);
        expected.extend_from_slice(&[3, 0, 0, 0]);
        expected.extend_from_slice(&[2, 0, 0, 0]);
        expected.extend_from_slice(b"s1");
        expected.push(1);
        expected.push(4);
        expected.extend_from_slice(&[2, 0, 0, 0]);
        expected.extend_from_slice(&[2, 0, 0, 0, 0, 0, 0, 0]);
        for x in &logits {
            expected.extend_from_slice(&x.to_bits().to_le_bytes());
        }
        assert_eq!(
            bytes.len(),
            HEADER_LEN + 4 + 2 + 1 + 1 + 4 + 2 * 4 + 2 * 3 * 4
        );
        assert_eq!(bytes, expected);
        assert_eq!(decode_container(&bytes).unwrap(), ds);
    }

    #[test]
    fn decode_errors_are_distinct() {
        let ds = Dataset::new(
            2,
            vec![record("a", Label::NonMember, vec![1], vec![1.0, 2.0])],
        );
        let good = encode_container(&ds).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            decode_container(&bad_magic),
            Err(ContainerError::BadMagic(_))
        ));

        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(matches!(
            decode_container(&bad_version),
            Err(ContainerError::UnsupportedVersion(2))
        ));

        let truncated = &good[..good.len() - 3];
        assert!(matches!(
            decode_container(truncated),
            Err(ContainerError::Truncated { needed: 3, .. })
        ));
        assert!(matches!(
            decode_container(&good[..2]),
            Err(ContainerError::Truncated { .. })
        ));
    }

    #[test]
    fn out_of_range_target_is_invalid() {
        let ds = Dataset::new(2, vec![record("a", Label::Member, vec![2], vec![0.0, 0.0])]);
        assert!(matches!(
            encode_container(&ds),
            Err(ContainerError::InvalidRecord { .. })
        ));
    }

    #[test]
    fn uniform_row_gives_uniform_probs() {
        let rec = record("u", Label::Member, vec![0], vec![0.0; 3]);
        let d = derive_distributions(&rec).unwrap();
        for &p in &d.probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn extreme_row_does_not_overflow() {
        let rec = record("x", Label::Member, vec![0], vec![1000.0, 0.0, 0.0]);
        let d = derive_distributions(&rec).unwrap();
        assert!((d.probs[0] - 1.0).abs() < 1e-15);
        assert!(d.probs.iter().all(|p| p.is_finite()));
        // Oracle: log p1 = -1000 - log(1 + 2 e^-1000) = -1000 to double precision.
        assert!(d.log_probs[0].abs() < 1e-300);
        assert_eq!(d.log_probs[1], -1000.0);
        assert!(d.log_probs[2].is_finite());
    }

    #[test]
    fn nan_logit_names_the_row() {
        let rec = record(
            "n",
            Label::Member,
            vec![0, 0],
            vec![0.0, 1.0, f32::NAN, 0.0],
        );
        assert_eq!(
            derive_distributions(&rec).unwrap_err(),
            DistributionError::NonFiniteLogit { row: 1 }
        );
    }

    #[test]
    fn img_sentinel_detection() {
        let mut rec = LogitsRecord::new("i", Label::Member, Slice::Img, vec![0, 0], vec![0.0; 4]);
        assert!(rec.has_sentinel_targets());
        assert!(!derive_distributions(&rec).unwrap().has_targets);
        rec.slice = Slice::Inst;
        assert!(!rec.has_sentinel_targets());
    }
}
