//! Triplet file I/O: line-delimited JSON records with fields context (≤5
//! strings), query, rewrite, label ("pos"|"neg"), source_session.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{CqrTriplet, Label};
use crate::error::{Result, TeresaError};
use crate::text::MAX_CONTEXT_TURNS;

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn validate(t: &CqrTriplet, path: &str, line: usize) -> Result<()> {
    let fail = |msg: String| TeresaError::Schema {
        path: path.to_string(),
        line,
        msg,
    };
    if t.context.len() > MAX_CONTEXT_TURNS {
        return Err(fail(format!(
            "context has {} turns, max {MAX_CONTEXT_TURNS}",
            t.context.len()
        )));
    }
    if t.query.trim().is_empty() {
        return Err(fail("empty query".to_string()));
    }
    if t.rewrite.trim().is_empty() {
        return Err(fail("empty rewrite".to_string()));
    }
    let same = normalize_ws(&t.query) == normalize_ws(&t.rewrite);
    match t.label {
        Label::Neg if !same => Err(fail("label neg but query differs from rewrite".to_string())),
        Label::Pos if same => Err(fail("label pos but query equals rewrite".to_string())),
        _ => Ok(()),
    }
}

/// Streaming reader over a triplet file.
pub struct TripletReader {
    path: String,
    lines: std::io::Lines<BufReader<File>>,
    line_no: usize,
}

impl TripletReader {
    pub fn open<P: AsRef<Path>>(path: P) -> Result<TripletReader> {
        let file = File::open(path.as_ref())?;
        Ok(TripletReader {
            path: path.as_ref().display().to_string(),
            lines: BufReader::new(file).lines(),
            line_no: 0,
        })
    }
}

impl Iterator for TripletReader {
    type Item = Result<CqrTriplet>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.line_no += 1;
            let line = match self.lines.next()? {
                Err(e) => return Some(Err(e.into())),
                Ok(l) => l,
            };
            if line.trim().is_empty() {
                continue;
            }
            let parsed: std::result::Result<CqrTriplet, _> = serde_json::from_str(&line);
            return Some(match parsed {
                Err(e) => Err(TeresaError::Schema {
                    path: self.path.clone(),
                    line: self.line_no,
                    msg: e.to_string(),
                }),
                Ok(t) => validate(&t, &self.path, self.line_no).map(|()| t),
            });
        }
    }
}

/// Reads a whole triplet file into memory.
pub fn read_triplets<P: AsRef<Path>>(path: P) -> Result<Vec<CqrTriplet>> {
    TripletReader::open(path)?.collect()
}

/// Writes triplets as line-delimited JSON.
pub fn write_triplets<P: AsRef<Path>>(path: P, triplets: &[CqrTriplet]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in triplets {
        serde_json::to_writer(&mut w, t).map_err(|e| TeresaError::InvalidInput(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
