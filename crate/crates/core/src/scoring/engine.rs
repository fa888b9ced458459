use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use super::{RetryPolicy, ScoreCache, Scorer};
use crate::error::{Error, Result};
use crate::model::{ScoreRecord, TripletExample};

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOptions {
    pub batch_size: usize,
    pub max_concurrency: usize,
    pub retry: RetryPolicy,
}

impl Default for BatchOptions {
    fn default() -> Self {
        BatchOptions {
            batch_size: 32,
            max_concurrency: 4,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoringOutcome {
    /// One record per input triplet, in input order.
    pub scores: Vec<ScoreRecord>,
    pub backend_calls: usize,
    pub cache_hits: usize,
}

/// Scores `triplets` in batches across up to `max_concurrency` workers.
///
/// Failed batches are retried with exponential backoff; once a batch runs
/// out of attempts the remaining work is abandoned and the error lists every
/// triplet id that never received a score.
pub fn score_with(
    scorer: &dyn Scorer,
    triplets: &[TripletExample],
    opts: &BatchOptions,
    cache: Option<&ScoreCache>,
) -> Result<ScoringOutcome> {
    if opts.batch_size == 0 || opts.max_concurrency == 0 || opts.retry.max_attempts == 0 {
        return Err(Error::InvalidArgument("batch_size, max_concurrency and max_attempts must be positive".into()));
    }
    let mut seen = HashSet::with_capacity(triplets.len());
    for t in triplets {
        if !seen.insert(t.triplet_id.as_str()) {
            return Err(Error::InvalidArgument(format!("duplicate triplet id {}", t.triplet_id)));
        }
    }
    scorer.precheck(triplets)?;

    let identity = scorer.identity();
    let mut slots: Vec<Option<f64>> = vec![None; triplets.len()];
    let mut keys = Vec::new();
    let mut cache_hits = 0;
    if let Some(cache) = cache {
        keys = triplets.iter().map(|t| ScoreCache::key(&identity, t)).collect();
        for (slot, key) in slots.iter_mut().zip(&keys) {
            if let Some(p) = cache.get(key) {
                *slot = Some(p);
                cache_hits += 1;
            }
        }
    }
    let pending: Vec<usize> = (0..triplets.len()).filter(|&i| slots[i].is_none()).collect();
    let batches: Vec<&[usize]> = pending.chunks(opts.batch_size).collect();

    let slots = Mutex::new(slots);
    let next = AtomicUsize::new(0);
    let calls = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let failure: Mutex<Option<(String, u32)>> = Mutex::new(None);
    let workers = opts.max_concurrency.min(batches.len());

    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let b = next.fetch_add(1, Ordering::SeqCst);
                let Some(idx) = batches.get(b) else { break };
                let batch: Vec<TripletExample> = idx.iter().map(|&i| triplets[i].clone()).collect();
                match run_batch(scorer, &batch, &opts.retry, &calls, &abort) {
                    Ok(values) => {
                        if let Some(cache) = cache {
                            let entries: Vec<(&str, f64)> =
                                idx.iter().zip(&values).map(|(&i, &p)| (keys[i].as_str(), p)).collect();
                            if let Err(e) = cache.put_all(&entries) {
                                log::warn!("score cache write failed: {e}");
                            }
                        }
                        let mut slots = slots.lock().unwrap();
                        for (&i, p) in idx.iter().zip(values) {
                            slots[i] = Some(p);
                        }
                    }
                    Err((message, attempts)) => {
                        abort.store(true, Ordering::SeqCst);
                        failure.lock().unwrap().get_or_insert((message, attempts));
                        break;
                    }
                }
            });
        }
    });

    let slots = slots.into_inner().unwrap();
    if let Some((message, attempts)) = failure.into_inner().unwrap() {
        let unfetched: Vec<String> = triplets
            .iter()
            .zip(&slots)
            .filter(|(_, s)| s.is_none())
            .map(|(t, _)| t.triplet_id.clone())
            .collect();
        return Err(Error::BatchFailed {
            message: format!("{message} (after {attempts} attempts)"),
            unfetched,
        });
    }
    let scores = triplets
        .iter()
        .zip(slots)
        .map(|(t, p)| ScoreRecord {
            triplet_id: t.triplet_id.clone(),
            p_yes: p.expect("every batch succeeded"),
        })
        .collect();
    Ok(ScoringOutcome {
        scores,
        backend_calls: calls.into_inner(),
        cache_hits,
    })
}

fn run_batch(
    scorer: &dyn Scorer,
    batch: &[TripletExample],
    retry: &RetryPolicy,
    calls: &AtomicUsize,
    abort: &AtomicBool,
) -> std::result::Result<Vec<f64>, (String, u32)> {
    let mut last = String::new();
    for attempt in 1..=retry.max_attempts {
        if attempt > 1 {
            if abort.load(Ordering::SeqCst) {
                return Err((format!("aborted: {last}"), attempt - 1));
            }
            std::thread::sleep(retry.backoff(attempt - 1));
        }
        calls.fetch_add(1, Ordering::SeqCst);
        match scorer.score_batch(batch).and_then(|records| align(batch, records)) {
            Ok(values) => return Ok(values),
            Err(e) => {
                log::warn!("scoring batch attempt {attempt}/{} failed: {e}", retry.max_attempts);
                last = e.to_string();
            }
        }
    }
    Err((last, retry.max_attempts))
}

/// Puts backend records back into batch order, rejecting missing, unknown
/// or repeated ids.
fn align(batch: &[TripletExample], records: Vec<ScoreRecord>) -> Result<Vec<f64>> {
    let mut by_id: HashMap<String, f64> = HashMap::with_capacity(records.len());
    for r in records {
        crate::model::check_probability(r.p_yes)?;
        if by_id.insert(r.triplet_id.clone(), r.p_yes).is_some() {
            return Err(Error::ScoreMismatch(format!("backend repeated id {}", r.triplet_id)));
        }
    }
    let values: Vec<f64> = batch
        .iter()
        .map(|t| {
            by_id
                .remove(&t.triplet_id)
                .ok_or_else(|| Error::ScoreMismatch(format!("backend omitted id {}", t.triplet_id)))
        })
        .collect::<Result<_>>()?;
    if let Some(extra) = by_id.keys().next() {
        return Err(Error::ScoreMismatch(format!("backend returned unknown id {extra}")));
    }
    Ok(values)
}
