//! Streaming corpus I/O: session files and POS lexicon files.
//!
//! Session files are line-delimited JSON, one object per line with fields
//! `session_id` and `utterances` (array of `{speaker, text}`). Lexicon files
//! are UTF-8 lines `surface<TAB>TAG[,TAG...]`. Malformed lines are reported
//! with their line number.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{DialogueSession, PosLexicon, PosTag};
use crate::error::{Result, TeresaError};

/// Streaming reader over a session file; yields one session per line and
/// holds at most one record in memory.
pub struct SessionReader {
    path: String,
    lines: std::io::Lines<BufReader<File>>,
    line_no: usize,
}

impl SessionReader {
    pub fn open<P: AsRef<Path>>(path: P) -> Result<SessionReader> {
        let file = File::open(path.as_ref())?;
        Ok(SessionReader {
            path: path.as_ref().display().to_string(),
            lines: BufReader::new(file).lines(),
            line_no: 0,
        })
    }

    fn parse(&self, line: &str) -> Result<DialogueSession> {
        let mut session: DialogueSession =
            serde_json::from_str(line).map_err(|e| TeresaError::Schema {
                path: self.path.clone(),
                line: self.line_no,
                msg: e.to_string(),
            })?;
        for u in &mut session.utterances {
            u.text = u.text.trim().to_string();
            if u.text.is_empty() {
                return Err(TeresaError::Schema {
                    path: self.path.clone(),
                    line: self.line_no,
                    msg: "utterance text empty after trim".to_string(),
                });
            }
        }
        Ok(session)
    }
}

impl Iterator for SessionReader {
    type Item = Result<DialogueSession>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.line_no += 1;
            match self.lines.next()? {
                Err(e) => return Some(Err(e.into())),
                Ok(line) if line.trim().is_empty() => continue,
                Ok(line) => return Some(self.parse(&line)),
            }
        }
    }
}

/// Reads a whole session file into memory.
pub fn read_sessions<P: AsRef<Path>>(path: P) -> Result<Vec<DialogueSession>> {
    SessionReader::open(path)?.collect()
}

/// Writes sessions as line-delimited JSON.
pub fn write_sessions<P: AsRef<Path>>(path: P, sessions: &[DialogueSession]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in sessions {
        serde_json::to_writer(&mut w, s).map_err(|e| TeresaError::InvalidInput(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a lexicon file of `surface<TAB>TAG[,TAG...]` lines.
pub fn read_lexicon<P: AsRef<Path>>(path: P) -> Result<PosLexicon> {
    let display = path.as_ref().display().to_string();
    let file = File::open(path.as_ref())?;
    let mut lex = PosLexicon::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (surface, tags) = line.split_once('\t').ok_or_else(|| TeresaError::Schema {
            path: display.clone(),
            line: line_no,
            msg: "expected surface<TAB>TAG[,TAG...]".to_string(),
        })?;
        if surface.is_empty() {
            return Err(TeresaError::Schema {
                path: display.clone(),
                line: line_no,
                msg: "empty surface".to_string(),
            });
        }
        for tag in tags.split(',') {
            let tag = tag.trim();
            let parsed = PosTag::parse(tag).ok_or_else(|| TeresaError::Schema {
                path: display.clone(),
                line: line_no,
                msg: format!("unknown tag {tag:?}"),
            })?;
            lex.insert(surface, parsed);
        }
    }
    Ok(lex)
}

/// Writes a lexicon in the same line format `read_lexicon` accepts, entries
/// sorted by surface for determinism.
pub fn write_lexicon<P: AsRef<Path>>(path: P, entries: &[(String, Vec<PosTag>)]) -> Result<()> {
    let mut sorted: Vec<&(String, Vec<PosTag>)> = entries.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut w = BufWriter::new(File::create(path)?);
    for (surface, tags) in sorted {
        let names: Vec<&str> = tags
            .iter()
            .map(|t| match t {
                PosTag::Noun => "NOUN",
                PosTag::Verb => "VERB",
                PosTag::Adj => "ADJ",
                PosTag::Pronoun => "PRONOUN",
                PosTag::Other => "OTHER",
            })
            .collect();
        writeln!(w, "{surface}\t{}", names.join(","))?;
    }
    w.flush()?;
    Ok(())
}
