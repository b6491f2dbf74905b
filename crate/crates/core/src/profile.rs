//! Recorded compute and transfer samples.
//!
//! Two CSV schemas are accepted, told apart by their header:
//! `minibatch,phase,layer_type,flops,time_s` and `minibatch,seq_no,bytes,time_s`.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{LayerType, PhaseLayer};

pub const COMPUTE_HEADER: [&str; 5] = ["minibatch", "phase", "layer_type", "flops", "time_s"];
pub const TRANSFER_HEADER: [&str; 4] = ["minibatch", "seq_no", "bytes", "time_s"];

/// Samples shorter than this are treated as timer noise.
pub const DEFAULT_MIN_SAMPLE_SECONDS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("failed to read profile {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: empty file")]
    Empty { path: String },
    #[error("{path}: header {found:?} matches neither profile schema")]
    MissingColumns { path: String, found: Vec<String> },
    #[error("{path}: no valid rows")]
    NoValidRows { path: String },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("minibatch size must be positive")]
    ZeroMinibatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputeSample {
    pub minibatch: u32,
    pub phase: u32,
    pub layer_type: LayerType,
    pub flops: u64,
    pub time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSample {
    pub minibatch: u32,
    pub seq_no: u32,
    pub bytes: u64,
    pub time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProfileSet {
    pub compute_samples: Vec<ComputeSample>,
    pub transfer_samples: Vec<TransferSample>,
    pub sampled_minibatches: BTreeSet<u32>,
}

impl ProfileSet {
    pub fn push_compute(&mut self, s: ComputeSample) {
        self.sampled_minibatches.insert(s.minibatch);
        self.compute_samples.push(s);
    }

    pub fn push_transfer(&mut self, s: TransferSample) {
        self.sampled_minibatches.insert(s.minibatch);
        self.transfer_samples.push(s);
    }
}

/// A rejected row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowDiagnostic {
    pub path: String,
    /// 1-based data row number (header excluded).
    pub row: usize,
    pub message: String,
}

impl fmt::Display for RowDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} row {}: {}", self.path, self.row, self.message)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Schema {
    Compute,
    Transfer,
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub min_sample_seconds: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            min_sample_seconds: DEFAULT_MIN_SAMPLE_SECONDS,
        }
    }
}

/// Loads and validates profile CSVs. Bad rows are skipped and reported.
pub fn load_profiles<P: AsRef<Path>>(
    paths: &[P],
    opts: LoadOptions,
) -> Result<(ProfileSet, Vec<RowDiagnostic>), ProfileError> {
    let mut set = ProfileSet::default();
    let mut diags = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let name = path.display().to_string();
        let mut text = String::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_string(&mut text))
            .map_err(|source| ProfileError::Io {
                path: name.clone(),
                source,
            })?;
        read_profile_text(&name, &text, opts, &mut set, &mut diags)?;
    }
    Ok((set, diags))
}

fn read_profile_text(
    name: &str,
    text: &str,
    opts: LoadOptions,
    set: &mut ProfileSet,
    diags: &mut Vec<RowDiagnostic>,
) -> Result<(), ProfileError> {
    if text.trim().is_empty() {
        return Err(ProfileError::Empty { path: name.into() });
    }
    let csv_err = |source| ProfileError::Csv {
        path: name.into(),
        source,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_string)
        .collect();
    let schema = if header == COMPUTE_HEADER {
        Schema::Compute
    } else if header == TRANSFER_HEADER {
        Schema::Transfer
    } else {
        return Err(ProfileError::MissingColumns {
            path: name.into(),
            found: header,
        });
    };

    let mut valid = 0usize;
    let mut reject = |row: usize, message: String| {
        diags.push(RowDiagnostic {
            path: name.into(),
            row,
            message,
        })
    };
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                reject(row, e.to_string());
                continue;
            }
        };
        match schema {
            Schema::Compute => match record.deserialize::<ComputeSample>(Some(&rdr_header(&COMPUTE_HEADER))) {
                Ok(s) => match check_compute(&s, opts) {
                    Ok(()) => {
                        set.push_compute(s);
                        valid += 1;
                    }
                    Err(msg) => reject(row, msg),
                },
                Err(e) => reject(row, e.to_string()),
            },
            Schema::Transfer => match record.deserialize::<TransferSample>(Some(&rdr_header(&TRANSFER_HEADER))) {
                Ok(s) => match check_transfer(&s, opts) {
                    Ok(()) => {
                        set.push_transfer(s);
                        valid += 1;
                    }
                    Err(msg) => reject(row, msg),
                },
                Err(e) => reject(row, e.to_string()),
            },
        }
    }
    if valid == 0 {
        return Err(ProfileError::NoValidRows { path: name.into() });
    }
    Ok(())
}

fn rdr_header(cols: &[&str]) -> csv::StringRecord {
    csv::StringRecord::from(cols.to_vec())
}

fn check_time(t: f64, opts: LoadOptions) -> Result<(), String> {
    if !(t.is_finite() && t > 0.0) {
        return Err(format!("time_s must be positive, got {t}"));
    }
    if t < opts.min_sample_seconds {
        return Err(format!(
            "time_s {t} below noise threshold {}",
            opts.min_sample_seconds
        ));
    }
    Ok(())
}

fn check_compute(s: &ComputeSample, opts: LoadOptions) -> Result<(), String> {
    if s.minibatch == 0 {
        return Err("minibatch must be positive".into());
    }
    if s.flops == 0 {
        return Err("flops must be positive".into());
    }
    check_time(s.time_s, opts)
}

fn check_transfer(s: &TransferSample, opts: LoadOptions) -> Result<(), String> {
    if s.minibatch == 0 {
        return Err("minibatch must be positive".into());
    }
    if s.bytes == 0 {
        return Err("bytes must be positive".into());
    }
    check_time(s.time_s, opts)
}

pub fn write_compute_csv<W: Write>(w: W, samples: &[ComputeSample]) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(w);
    for s in samples {
        wtr.serialize(s)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_transfer_csv<W: Write>(w: W, samples: &[TransferSample]) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(w);
    for s in samples {
        wtr.serialize(s)?;
    }
    wtr.flush()?;
    Ok(())
}

/// `(k / k_base) * flops_base`, rounded half-up to an integer FLOP count.
pub fn scale_flops(phase: &PhaseLayer, k: u32, k_base: u32) -> Result<u64, ProfileError> {
    scale_flop_count(phase.flops_base, k, k_base)
}

pub fn scale_flop_count(flops_base: u64, k: u32, k_base: u32) -> Result<u64, ProfileError> {
    if k == 0 || k_base == 0 {
        return Err(ProfileError::ZeroMinibatch);
    }
    let num = flops_base as u128 * k as u128;
    let den = k_base as u128;
    let rounded = (2 * num + den) / (2 * den);
    Ok(u64::try_from(rounded).expect("scaled FLOPs overflow u64"))
}

/// Aggregate transfer rate `sum(bytes) / sum(time)`, or `fallback` with no samples.
pub fn effective_bandwidth(samples: &[TransferSample], fallback: f64) -> f64 {
    let (bytes, time) = samples
        .iter()
        .fold((0.0f64, 0.0f64), |(b, t), s| (b + s.bytes as f64, t + s.time_s));
    if samples.is_empty() || time <= 0.0 {
        fallback
    } else {
        bytes / time
    }
}
