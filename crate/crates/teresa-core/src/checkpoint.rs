//! Checkpoint serialization: a flat binary tensor container plus a JSON
//! sidecar and a plain-text vocabulary file.
//!
//! A checkpoint directory holds:
//! - `model.bin`: magic `TERESA01`, a little-endian u32 manifest length, a
//!   JSON manifest of `{name, rows, cols, offset}` entries (offset in bytes
//!   from the start of the payload), then the payload of little-endian f64
//!   values in manifest order.
//! - `model.json`: the model configuration, the vocabulary content hash, and
//!   the optimizer step the weights were saved at.
//! - `vocab.txt`: one vocabulary entry per line, reserved tokens first.
//! - `optimizer.bin` (optional): first and second moment vectors in the same
//!   container format, named `m.<param>` / `v.<param>`, plus the scalar
//!   `adam.step`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::AdamState;
use crate::error::{Result, TeresaError};
use crate::model::{Model, TeresaConfig};
use crate::text::Vocab;

const MAGIC: &[u8; 8] = b"TERESA01";

/// (name, rows, cols, values) — the in-memory form of one container entry.
pub type TensorEntry = (String, usize, usize, Vec<f64>);

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    config: TeresaConfig,
    vocab_hash: String,
    step: u64,
}

fn schema_err(path: &Path, msg: impl Into<String>) -> TeresaError {
    TeresaError::Schema {
        path: path.display().to_string(),
        line: 0,
        msg: msg.into(),
    }
}

/// Writes a tensor container file.
pub fn write_container(path: &Path, entries: &[TensorEntry]) -> Result<()> {
    let mut manifest = Vec::with_capacity(entries.len());
    let mut offset = 0u64;
    for (name, rows, cols, values) in entries {
        if rows * cols != values.len() {
            return Err(schema_err(
                path,
                format!("{name}: {rows}x{cols} manifest vs {} values", values.len()),
            ));
        }
        manifest.push(ManifestEntry {
            name: name.clone(),
            rows: *rows,
            cols: *cols,
            offset,
        });
        offset += (values.len() * 8) as u64;
    }
    let manifest_json = serde_json::to_vec(&manifest)
        .map_err(|e| schema_err(path, format!("manifest encode: {e}")))?;
    let mut file = fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&(manifest_json.len() as u32).to_le_bytes())?;
    file.write_all(&manifest_json)?;
    let mut payload = Vec::with_capacity(offset as usize);
    for (_, _, _, values) in entries {
        for v in values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    file.write_all(&payload)?;
    Ok(())
}

/// Reads a tensor container file back into named entries.
pub fn read_container(path: &Path) -> Result<Vec<TensorEntry>> {
    let mut file = fs::File::open(path)?;
    let mut raw = Vec::new();
    file.read_to_end(&mut raw)?;
    if raw.len() < MAGIC.len() + 4 || &raw[..MAGIC.len()] != MAGIC {
        return Err(schema_err(path, "bad magic; not a tensor container"));
    }
    let mlen = u32::from_le_bytes(raw[8..12].try_into().expect("4 bytes")) as usize;
    let manifest_end = 12 + mlen;
    if raw.len() < manifest_end {
        return Err(schema_err(path, "truncated manifest"));
    }
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(&raw[12..manifest_end])
        .map_err(|e| schema_err(path, format!("manifest decode: {e}")))?;
    let payload = &raw[manifest_end..];
    let mut entries = Vec::with_capacity(manifest.len());
    let mut expected = 0u64;
    for m in &manifest {
        if m.offset != expected {
            return Err(schema_err(
                path,
                format!("{}: offset {} but payload cursor {expected}", m.name, m.offset),
            ));
        }
        let n = m.rows * m.cols;
        let lo = m.offset as usize;
        let hi = lo + n * 8;
        if hi > payload.len() {
            return Err(schema_err(path, format!("{}: payload truncated", m.name)));
        }
        let values: Vec<f64> = payload[lo..hi]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        entries.push((m.name.clone(), m.rows, m.cols, values));
        expected = hi as u64;
    }
    if expected as usize != payload.len() {
        return Err(schema_err(path, "trailing bytes after last tensor"));
    }
    Ok(entries)
}

/// Writes the model weights, configuration sidecar, and vocabulary into
/// `dir`, creating it if needed.
pub fn save_checkpoint(dir: &Path, model: &Model, step: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_container(&dir.join("model.bin"), &model.params.snapshot())?;
    let sidecar = Sidecar {
        config: model.config.clone(),
        vocab_hash: model.vocab.content_hash(),
        step,
    };
    let json = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| schema_err(dir, format!("sidecar encode: {e}")))?;
    fs::write(dir.join("model.json"), json + "\n")?;
    let mut vocab_txt = model.vocab.entries().join("\n");
    vocab_txt.push('\n');
    fs::write(dir.join("vocab.txt"), vocab_txt)?;
    Ok(())
}

/// Reconstructs a model from a checkpoint directory; returns it with the
/// step the weights were saved at. The sidecar's vocabulary hash must match
/// the vocabulary file.
pub fn load_checkpoint(dir: &Path) -> Result<(Model, u64)> {
    let sidecar_path = dir.join("model.json");
    let json = fs::read_to_string(&sidecar_path)?;
    let sidecar: Sidecar = serde_json::from_str(&json)
        .map_err(|e| schema_err(&sidecar_path, format!("sidecar decode: {e}")))?;
    let vocab_path = dir.join("vocab.txt");
    let vocab_txt = fs::read_to_string(&vocab_path)?;
    let entries: Vec<&str> = vocab_txt.lines().collect();
    let vocab = Vocab::from_entries(&entries)?;
    if vocab.content_hash() != sidecar.vocab_hash {
        return Err(schema_err(
            &vocab_path,
            format!(
                "vocabulary hash {} does not match sidecar {}",
                vocab.content_hash(),
                sidecar.vocab_hash
            ),
        ));
    }
    let model = Model::new(sidecar.config, vocab, 0)?;
    let tensors = read_container(&dir.join("model.bin"))?;
    model.params.restore(&tensors)?;
    Ok((model, sidecar.step))
}

/// Writes optimizer moments alongside the model files.
pub fn save_optimizer(dir: &Path, model: &Model, adam: &AdamState) -> Result<()> {
    let (m, v, step) = adam.parts();
    let named = model.params.named();
    if m.len() != named.len() {
        return Err(TeresaError::InvalidInput(format!(
            "optimizer tracks {} tensors but model has {}",
            m.len(),
            named.len()
        )));
    }
    let mut entries = Vec::with_capacity(2 * named.len() + 1);
    for ((name, t), (mi, vi)) in named.iter().zip(m.iter().zip(v)) {
        entries.push((format!("m.{name}"), t.rows(), t.cols(), mi.clone()));
        entries.push((format!("v.{name}"), t.rows(), t.cols(), vi.clone()));
    }
    entries.push(("adam.step".into(), 1, 1, vec![step as f64]));
    write_container(&dir.join("optimizer.bin"), &entries)
}

/// Loads optimizer moments for `model`'s parameters, if the file exists.
pub fn load_optimizer(dir: &Path, model: &Model) -> Result<Option<AdamState>> {
    let path = dir.join("optimizer.bin");
    if !path.exists() {
        return Ok(None);
    }
    let raw = read_container(&path)?;
    let mut by_name: std::collections::HashMap<String, (usize, usize, Vec<f64>)> = raw
        .into_iter()
        .map(|(n, r, c, v)| (n, (r, c, v)))
        .collect();
    let mut take = |name: String, rows: usize, cols: usize| -> Result<Vec<f64>> {
        let (r, c, v) = by_name
            .remove(&name)
            .ok_or_else(|| schema_err(&path, format!("missing entry {name}")))?;
        if (r, c) != (rows, cols) {
            return Err(schema_err(
                &path,
                format!("{name}: shape {r}x{c}, model needs {rows}x{cols}"),
            ));
        }
        Ok(v)
    };
    let mut m = Vec::new();
    let mut v = Vec::new();
    for (name, t) in model.params.named() {
        m.push(take(format!("m.{name}"), t.rows(), t.cols())?);
        v.push(take(format!("v.{name}"), t.rows(), t.cols())?);
    }
    let step = take("adam.step".into(), 1, 1)?[0];
    if !by_name.is_empty() {
        let mut extras: Vec<&String> = by_name.keys().collect();
        extras.sort();
        return Err(schema_err(
            &path,
            format!("unexpected entries: {extras:?}"),
        ));
    }
    if step < 0.0 || step.fract() != 0.0 {
        return Err(schema_err(&path, format!("bad step counter {step}")));
    }
    Ok(Some(AdamState::from_parts(m, v, step as u64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TeresaConfig;
    use crate::text::{build_vocab, DialogueSession, Speaker, Utterance};

    fn tiny_model(seed: u64) -> Model {
        let sessions = vec![DialogueSession {
            session_id: "s".into(),
            utterances: vec![Utterance {
                speaker: Speaker::User,
                text: "alpha beta gamma delta".into(),
            }],
        }];
        let vocab = build_vocab(&sessions, 1).unwrap();
        let cfg = TeresaConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            max_len: 32,
            n_intents: 4,
            dropout: 0.0,
        };
        Model::new(cfg, vocab, seed).unwrap()
    }

    #[test]
    fn container_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let entries: Vec<TensorEntry> = vec![
            ("a".into(), 2, 3, vec![1.0, -2.5, 3.0, 0.0, 1e-300, 6.25]),
            ("b".into(), 1, 1, vec![f64::MIN_POSITIVE]),
        ];
        write_container(&path, &entries).unwrap();
        let back = read_container(&path).unwrap();
        assert_eq!(back.len(), 2);
        for ((n0, r0, c0, v0), (n1, r1, c1, v1)) in entries.iter().zip(&back) {
            assert_eq!((n0, r0, c0), (n1, r1, c1));
            for (a, b) in v0.iter().zip(v1) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn corrupt_container_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        write_container(&path, &[("a".into(), 1, 2, vec![1.0, 2.0])]).unwrap();
        let mut raw = fs::read(&path).unwrap();
        raw[0] = b'X';
        fs::write(&path, &raw).unwrap();
        assert!(matches!(
            read_container(&path).unwrap_err(),
            TeresaError::Schema { .. }
        ));
        // Truncated payload.
        write_container(&path, &[("a".into(), 1, 2, vec![1.0, 2.0])]).unwrap();
        let raw = fs::read(&path).unwrap();
        fs::write(&path, &raw[..raw.len() - 4]).unwrap();
        assert!(read_container(&path).is_err());
    }

    #[test]
    fn checkpoint_round_trips_weights_and_step() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model(11);
        save_checkpoint(dir.path(), &model, 42).unwrap();
        let (loaded, step) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(step, 42);
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded.vocab.entries(), model.vocab.entries());
        for ((n0, _, _, v0), (n1, _, _, v1)) in
            model.params.snapshot().iter().zip(loaded.params.snapshot().iter())
        {
            assert_eq!(n0, n1);
            for (a, b) in v0.iter().zip(v1) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn vocab_hash_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model(3);
        save_checkpoint(dir.path(), &model, 1).unwrap();
        let vocab_path = dir.path().join("vocab.txt");
        let txt = fs::read_to_string(&vocab_path).unwrap();
        fs::write(&vocab_path, txt.replace("alpha", "omega")).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path()).unwrap_err(),
            TeresaError::Schema { .. }
        ));
    }

    #[test]
    fn missing_tensor_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model(4);
        save_checkpoint(dir.path(), &model, 1).unwrap();
        let mut entries = read_container(&dir.path().join("model.bin")).unwrap();
        entries.pop();
        write_container(&dir.path().join("model.bin"), &entries).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }

    #[test]
    fn optimizer_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model(5);
        let params = model.params.all();
        let mut adam = AdamState::new(&params);
        // Fake a step so the moments are nonzero.
        for t in &params {
            t.accum_grad(&vec![0.25; t.len()]);
        }
        adam.step(&params, 1e-3).unwrap();
        save_optimizer(dir.path(), &model, &adam).unwrap();
        let back = load_optimizer(dir.path(), &model).unwrap().unwrap();
        assert_eq!(back.step_count(), 1);
        let (m0, v0, _) = adam.parts();
        let (m1, v1, _) = back.parts();
        assert_eq!(m0, m1);
        assert_eq!(v0, v1);
        assert!(load_optimizer(tempfile::tempdir().unwrap().path(), &model)
            .unwrap()
            .is_none());
    }
}
