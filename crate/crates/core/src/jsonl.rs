//! Line-delimited JSON files and content digests.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("{path}: {cause}")]
    Io { path: PathBuf, cause: io::Error },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl JsonlError {
    pub(crate) fn io(path: &Path, cause: io::Error) -> Self {
        JsonlError::Io {
            path: path.to_path_buf(),
            cause,
        }
    }
}

/// Reads every non-blank line of `path` as one `T`.
pub fn read<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let file = File::open(path).map_err(|e| JsonlError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| JsonlError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| JsonlError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Writes records one per line, replacing the file.
pub fn write<T: Serialize>(path: &Path, records: &[T]) -> Result<(), JsonlError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| JsonlError::io(dir, e))?;
        }
    }
    let file = File::create(path).map_err(|e| JsonlError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| JsonlError::io(path, e))?;
    }
    w.flush().map_err(|e| JsonlError::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String, JsonlError> {
    let bytes = fs::read(path).map_err(|e| JsonlError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{ImageRef, ModalityView, Sample};
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn sample_roundtrip(id in "[a-z0-9_-]{1,8}", text in ".{0,20}", gold in proptest::option::of(".{0,6}")) {
            let mut s = Sample::new(id, "tag");
            s.text_view = Some(ModalityView::text(text));
            s.image_view = Some(ModalityView::image(ImageRef::Url("https://x/y.png".into())));
            s.gold_answer = gold;
            s.meta.insert("k".into(), "v".into());
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("s.jsonl");
            write(&p, std::slice::from_ref(&s)).unwrap();
            let back: Vec<Sample> = read(&p).unwrap();
            prop_assert_eq!(back, vec![s]);
        }
    }

    #[test]
    fn parse_error_has_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        fs::write(&p, "{\"a\":1}\n\nnot json\n").unwrap();
        match read::<serde_json::Value>(&p) {
            Err(JsonlError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn field_order_is_declaration_order() {
        let s = Sample::new("a", "t");
        let line = serde_json::to_string(&s).unwrap();
        let keys = ["\"id\"", "\"text_view\"", "\"image_view\"", "\"gold_answer\"", "\"choices\"", "\"candidate_answer\"", "\"dataset_tag\""];
        let pos: Vec<usize> = keys.iter().map(|k| line.find(k).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
    }
}
