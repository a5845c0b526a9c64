//! Sequence files.
//!
//! ```text
//! SMATSEQ 1 text
//! sequence <id> <category> <frames>
//! frame <index> <n_points> <x y z w l h yaw> <points>
//! ```
//!
//! In text mode the points are `4 n` decimal numbers. In binary mode they
//! are one base64 token holding `n x 4` little-endian `f32` values. Boxes
//! are decimal in both modes.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use thiserror::Error;

use crate::geometry::Box3D;
use crate::pillars::PointCloud;
use crate::tracker::{Frame, Sequence};

pub const MAGIC: &str = "SMATSEQ";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SeqIoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("unknown point format {0:?} (expected text or binary)")]
    Format(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PointFormat {
    #[default]
    Text,
    Binary,
}

impl FromStr for PointFormat {
    type Err = SeqIoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(Self::Text),
            "binary" => Ok(Self::Binary),
            _ => Err(SeqIoError::Format(s.to_string())),
        }
    }
}

impl fmt::Display for PointFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Text => "text",
            Self::Binary => "binary",
        })
    }
}

/// Where sequences come from. Converters for public benchmarks would
/// implement this; only the file reader ships.
pub trait SequenceSource {
    fn sequences(&self) -> Result<Vec<Sequence>, SeqIoError>;
}

/// Reads a sequence file from disk.
pub struct SequenceFile(pub std::path::PathBuf);

impl SequenceSource for SequenceFile {
    fn sequences(&self) -> Result<Vec<Sequence>, SeqIoError> {
        let f = std::fs::File::open(&self.0)?;
        read_sequences(std::io::BufReader::new(f))
    }
}

pub fn write_sequences(out: &mut impl Write, seqs: &[Sequence], format: PointFormat) -> Result<(), SeqIoError> {
    writeln!(out, "{MAGIC} {VERSION} {format}")?;
    for s in seqs {
        writeln!(out, "sequence {} {} {}", s.id, s.category, s.frames.len())?;
        for (i, f) in s.frames.iter().enumerate() {
            write!(out, "frame {i} {}", f.points.len())?;
            for v in f.gt.to_array() {
                write!(out, " {v}")?;
            }
            match format {
                PointFormat::Text => {
                    for p in &f.points.points {
                        for v in p {
                            write!(out, " {v}")?;
                        }
                    }
                }
                PointFormat::Binary => {
                    let bytes: Vec<u8> = f.points.points.iter().flatten().flat_map(|&v| (v as f32).to_le_bytes()).collect();
                    write!(out, " {}", STANDARD.encode(bytes))?;
                }
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

fn perr(line: usize, reason: impl ToString) -> SeqIoError {
    SeqIoError::Parse {
        line,
        reason: reason.to_string(),
    }
}

fn num<T: FromStr>(line: usize, tok: Option<&str>, what: &str) -> Result<T, SeqIoError> {
    let t = tok.ok_or_else(|| perr(line, format!("missing {what}")))?;
    t.parse().map_err(|_| perr(line, format!("bad {what} {t:?}")))
}

pub fn read_sequences(input: impl BufRead) -> Result<Vec<Sequence>, SeqIoError> {
    let mut lines = input.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, header) = lines.next().ok_or_else(|| perr(1, "empty file"))?;
    let header = header?;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() != 3 || h[0] != MAGIC {
        return Err(perr(1, format!("expected `{MAGIC} {VERSION} text|binary`")));
    }
    if h[1] != VERSION.to_string() {
        return Err(perr(1, format!("unsupported version {}", h[1])));
    }
    let format: PointFormat = h[2].parse()?;
    let mut seqs: Vec<(Sequence, usize)> = Vec::new();
    for (n, line) in lines {
        let line = line?;
        let mut tok = line.split_whitespace();
        match tok.next() {
            None => continue,
            Some("sequence") => {
                let id = tok.next().ok_or_else(|| perr(n, "missing id"))?.to_string();
                let category = tok.next().ok_or_else(|| perr(n, "missing category"))?.to_string();
                let count: usize = num(n, tok.next(), "frame count")?;
                seqs.push((
                    Sequence {
                        id,
                        category,
                        frames: Vec::with_capacity(count),
                    },
                    count,
                ));
            }
            Some("frame") => {
                let (seq, _) = seqs.last_mut().ok_or_else(|| perr(n, "frame before any sequence"))?;
                let idx: usize = num(n, tok.next(), "frame index")?;
                if idx != seq.frames.len() {
                    return Err(perr(n, format!("frame {idx} out of order")));
                }
                let np: usize = num(n, tok.next(), "point count")?;
                let mut b = [0.0; 7];
                for v in b.iter_mut() {
                    *v = num(n, tok.next(), "box value")?;
                }
                let gt = Box3D::from_array(b).map_err(|e| perr(n, e))?;
                let points = match format {
                    PointFormat::Text => (0..np)
                        .map(|_| {
                            let mut p = [0.0; 4];
                            for v in p.iter_mut() {
                                *v = num(n, tok.next(), "point value")?;
                            }
                            Ok(p)
                        })
                        .collect::<Result<Vec<_>, SeqIoError>>()?,
                    PointFormat::Binary => {
                        let bytes = match tok.next() {
                            Some(t) => STANDARD.decode(t).map_err(|e| perr(n, e))?,
                            None => Vec::new(),
                        };
                        if bytes.len() != np * 16 {
                            return Err(perr(n, format!("expected {} point bytes, got {}", np * 16, bytes.len())));
                        }
                        bytes
                            .chunks_exact(16)
                            .map(|c| std::array::from_fn(|k| f32::from_le_bytes(c[4 * k..4 * k + 4].try_into().unwrap()) as f64))
                            .collect()
                    }
                };
                if tok.next().is_some() {
                    return Err(perr(n, "trailing values"));
                }
                let points = PointCloud::new(points).map_err(|e| perr(n, e))?;
                seq.frames.push(Frame { points, gt });
            }
            Some(other) => return Err(perr(n, format!("unknown record {other:?}"))),
        }
    }
    seqs.into_iter()
        .map(|(s, count)| {
            if s.frames.len() == count {
                Ok(s)
            } else {
                Err(perr(0, format!("sequence {} declares {count} frames, has {}", s.id, s.frames.len())))
            }
        })
        .collect()
}
