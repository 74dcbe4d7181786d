//! Long-format longitudinal data: one row per (subject, time, value) observation.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// One subject's observations, time-ordered as read.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

/// Ragged collection of subjects. Subject index is order of first appearance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LongitudinalDataset {
    subjects: Vec<Subject>,
}

impl LongitudinalDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_subjects(subjects: Vec<Subject>) -> Self {
        Self { subjects }
    }

    pub fn push(&mut self, subject_id: &str, time: f64, value: f64) {
        match self.subjects.iter_mut().find(|s| s.id == subject_id) {
            Some(s) => {
                s.times.push(time);
                s.values.push(value);
            }
            None => self.subjects.push(Subject {
                id: subject_id.to_string(),
                times: vec![time],
                values: vec![value],
            }),
        }
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_obs(&self) -> usize {
        self.subjects.iter().map(|s| s.times.len()).sum()
    }

    pub fn subject_index(&self, id: &str) -> Option<usize> {
        self.subjects.iter().position(|s| s.id == id)
    }

    /// All observation times, in subject order.
    pub fn pooled_times(&self) -> Vec<f64> {
        self.subjects
            .iter()
            .flat_map(|s| s.times.iter().copied())
            .collect()
    }

    /// Read `subject,time,value` CSV. Errors carry the 1-based line number.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        {
            let hdr = rdr.headers().map_err(|e| Error::Parse {
                line: 1,
                message: e.to_string(),
            })?;
            let cols: Vec<&str> = hdr.iter().map(|h| h.trim()).collect();
            if cols != ["subject", "time", "value"] {
                return Err(Error::Parse {
                    line: 1,
                    message: format!(
                        "expected header `subject,time,value`, got `{}`",
                        cols.join(",")
                    ),
                });
            }
        }
        let mut data = Self::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
            if rec.len() != 3 {
                return Err(Error::Parse {
                    line,
                    message: format!("expected 3 fields, got {}", rec.len()),
                });
            }
            let parse = |field: &str, name: &str| -> Result<f64> {
                let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("non-numeric {name} `{field}`"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line,
                        message: format!("non-finite {name} `{field}`"),
                    });
                }
                Ok(v)
            };
            let t = parse(&rec[1], "time")?;
            let y = parse(&rec[2], "value")?;
            data.push(rec[0].trim(), t, y);
        }
        if data.n_subjects() == 0 {
            return Err(Error::Parse {
                line: 1,
                message: "no data rows".to_string(),
            });
        }
        Ok(data)
    }

    pub fn read_csv_path<P: AsRef<Path>>(path: P) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(f)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["subject", "time", "value"])
            .map_err(|e| Error::Numerical(e.to_string()))?;
        for s in &self.subjects {
            for (t, y) in s.times.iter().zip(&s.values) {
                w.write_record([s.id.as_str(), &fmt_f64(*t), &fmt_f64(*y)])
                    .map_err(|e| Error::Numerical(e.to_string()))?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// FNV-1a hash over the exact bit patterns of the data, for model/data
    /// integrity checks.
    pub fn content_hash(&self) -> u64 {
        let mut h = Fnv::new();
        h.write_u64(self.subjects.len() as u64);
        for s in &self.subjects {
            h.write_bytes(s.id.as_bytes());
            h.write_u64(s.times.len() as u64);
            for &t in &s.times {
                h.write_u64(t.to_bits());
            }
            for &v in &s.values {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }
}

/// Shortest round-trip decimal representation.
pub(crate) fn fmt_f64(v: f64) -> String {
    let mut buf = ryu_like(v);
    if buf.is_empty() {
        buf = v.to_string();
    }
    buf
}

fn ryu_like(v: f64) -> String {
    // `{}` on f64 uses the shortest representation that round-trips.
    format!("{v}")
}

pub(crate) struct Fnv(u64);

impl Fnv {
    pub fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
    pub fn write_bytes(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    pub fn write_u64(&mut self, v: u64) {
        self.write_bytes(&v.to_le_bytes());
    }
    pub fn finish(&self) -> u64 {
        self.0
    }
}
