//! Deterministic local backends.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{CompletionParams, Completer, Embedder, Scorer};
use crate::error::{Error, Result};
use crate::io;
use crate::model::{ScoreRecord, TripletExample};

pub const ORACLE_GOLD: f64 = 0.9;
pub const ORACLE_OTHER: f64 = 0.1;

/// 0.9 for the gold label of each instance, 0.1 for every other label.
#[derive(Debug, Clone)]
pub struct OracleScorer {
    gold: HashMap<String, String>,
    digest: String,
}

impl OracleScorer {
    pub fn new(gold: HashMap<String, String>) -> Self {
        let sorted: BTreeMap<_, _> = gold.iter().collect();
        let digest = io::sha256_hex(&serde_json::to_vec(&sorted).expect("gold map serializes"));
        OracleScorer { gold, digest }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(OracleScorer::new(io::read_json(path)?))
    }
}

impl Scorer for OracleScorer {
    fn identity(&self) -> String {
        format!("oracle-mock:{}", self.digest)
    }

    fn score_batch(&self, batch: &[TripletExample]) -> Result<Vec<ScoreRecord>> {
        Ok(batch
            .iter()
            .map(|t| {
                let hit = self.gold.get(&t.instance_id).is_some_and(|g| *g == t.label);
                ScoreRecord {
                    triplet_id: t.triplet_id.clone(),
                    p_yes: if hit { ORACLE_GOLD } else { ORACLE_OTHER },
                }
            })
            .collect())
    }
}

/// Uniform pseudo-random scores derived from SHA-256 of the triplet id and a
/// salt, so labels carry no signal.
#[derive(Debug, Clone)]
pub struct HashScorer {
    salt: String,
}

impl HashScorer {
    pub fn new(salt: impl Into<String>) -> Self {
        HashScorer { salt: salt.into() }
    }

    pub fn p_yes(&self, triplet_id: &str) -> f64 {
        hash_unit(triplet_id, &self.salt)
    }
}

/// First eight bytes of SHA-256(id ‖ salt), big-endian, divided by 2^64.
pub fn hash_unit(id: &str, salt: &str) -> f64 {
    let mut h = Sha256::new();
    h.update(id.as_bytes());
    h.update(salt.as_bytes());
    let digest = h.finalize();
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_be_bytes(head) as f64 / 18_446_744_073_709_551_616.0
}

impl Scorer for HashScorer {
    fn identity(&self) -> String {
        format!("hash-mock:{}", self.salt)
    }

    fn score_batch(&self, batch: &[TripletExample]) -> Result<Vec<ScoreRecord>> {
        Ok(batch
            .iter()
            .map(|t| ScoreRecord {
                triplet_id: t.triplet_id.clone(),
                p_yes: self.p_yes(&t.triplet_id),
            })
            .collect())
    }
}

/// Serves precomputed scores from a JSONL file of `{triplet_id, p_yes}`.
#[derive(Debug, Clone)]
pub struct ScoreFileScorer {
    scores: HashMap<String, f64>,
    digest: String,
}

impl ScoreFileScorer {
    pub fn load(path: &Path) -> Result<Self> {
        let records: Vec<ScoreRecord> = io::read_jsonl(path)?;
        let mut scores = HashMap::with_capacity(records.len());
        for r in records {
            if scores.insert(r.triplet_id.clone(), r.p_yes).is_some() {
                return Err(Error::ScoreMismatch(format!("{} lists {} twice", path.display(), r.triplet_id)));
            }
        }
        Ok(ScoreFileScorer { scores, digest: io::file_digest(path)? })
    }

    pub fn from_records(records: &[ScoreRecord]) -> Self {
        ScoreFileScorer {
            scores: records.iter().map(|r| (r.triplet_id.clone(), r.p_yes)).collect(),
            digest: String::new(),
        }
    }
}

impl Scorer for ScoreFileScorer {
    fn identity(&self) -> String {
        format!("score-file:{}", self.digest)
    }

    fn precheck(&self, triplets: &[TripletExample]) -> Result<()> {
        let missing: Vec<String> = triplets
            .iter()
            .filter(|t| !self.scores.contains_key(&t.triplet_id))
            .map(|t| t.triplet_id.clone())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::MissingScores { missing })
        }
    }

    fn score_batch(&self, batch: &[TripletExample]) -> Result<Vec<ScoreRecord>> {
        self.precheck(batch)?;
        Ok(batch
            .iter()
            .map(|t| ScoreRecord {
                triplet_id: t.triplet_id.clone(),
                p_yes: self.scores[&t.triplet_id],
            })
            .collect())
    }
}

/// Completion mock: returns the prompt's last block, then every field named
/// in the first block that the last block lacks, filled with a fixed string.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoCompleter;

impl Completer for EchoCompleter {
    fn complete(&self, prompt: &str, _params: &CompletionParams) -> Result<String> {
        let blocks: Vec<&str> = prompt.split("\n\n").map(str::trim).filter(|b| !b.is_empty()).collect();
        let (Some(first), Some(last)) = (blocks.first(), blocks.last()) else {
            return Ok(prompt.to_string());
        };
        let field = |line: &str| line.split_once(':').map(|(name, _)| name.trim().to_string());
        let present: Vec<String> = last.lines().filter_map(field).collect();
        let mut out = last.to_string();
        for name in first.lines().filter_map(field) {
            if !present.contains(&name) {
                out.push_str(&format!("\n{name}: mock {name}"));
            }
        }
        Ok(out)
    }
}

/// Embedding mock: lowercase whitespace tokens hashed into `dim` buckets,
/// L2-normalised.
#[derive(Debug, Clone, Copy)]
pub struct HashedBagOfWords {
    dim: usize,
}

impl HashedBagOfWords {
    pub fn new(dim: usize) -> Self {
        HashedBagOfWords { dim: dim.max(1) }
    }

    pub fn vector(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for token in text.split_whitespace() {
            let bucket = (hash_unit(&token.to_lowercase(), "") * self.dim as f64) as usize;
            v[bucket.min(self.dim - 1)] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl Embedder for HashedBagOfWords {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}
