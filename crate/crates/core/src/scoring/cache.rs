use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::TripletExample;

const CACHE_FILE: &str = "scores.jsonl";

#[derive(Serialize, Deserialize)]
struct Entry {
    key: String,
    p_yes: f64,
}

/// Append-only, content-addressed store of backend scores.
///
/// Keys hash the backend identity together with everything the backend
/// sees, so a changed instruction or endpoint never reuses a stale score.
/// A truncated last line (from an interrupted run) is ignored on load.
#[derive(Debug)]
pub struct ScoreCache {
    path: PathBuf,
    entries: Mutex<HashMap<String, f64>>,
    file: Mutex<File>,
}

impl ScoreCache {
    pub fn open(dir: &Path) -> Result<ScoreCache> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(CACHE_FILE);
        let mut entries = HashMap::new();
        if path.exists() {
            let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                match serde_json::from_str::<Entry>(&line) {
                    Ok(e) if (0.0..=1.0).contains(&e.p_yes) => {
                        entries.insert(e.key, e.p_yes);
                    }
                    _ => log::warn!("skipping unreadable score cache line in {}", path.display()),
                }
            }
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.last().is_some_and(|&b| b != b'\n') {
            file.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        Ok(ScoreCache {
            path,
            entries: Mutex::new(entries),
            file: Mutex::new(file),
        })
    }

    pub fn key(identity: &str, t: &TripletExample) -> String {
        let mut h = Sha256::new();
        for part in [identity, &t.triplet_id, &t.instruction, &t.input, &t.label] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.entries.lock().unwrap().get(key).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn put_all(&self, items: &[(&str, f64)]) -> Result<()> {
        let mut buf = String::new();
        for (key, p_yes) in items {
            let line = serde_json::to_string(&Entry { key: key.to_string(), p_yes: *p_yes })
                .expect("cache entry serializes");
            buf.push_str(&line);
            buf.push('\n');
        }
        {
            let mut f = self.file.lock().unwrap();
            f.write_all(buf.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
            f.flush().map_err(|e| Error::io(&self.path, e))?;
        }
        let mut entries = self.entries.lock().unwrap();
        for (key, p_yes) in items {
            entries.insert(key.to_string(), *p_yes);
        }
        Ok(())
    }
}
