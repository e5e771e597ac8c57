//! Click logs, sessionization, the train/validation/test split, and
//! skip-gram pair generation.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::catalog::Vocabulary;
use crate::error::{Error, Result};

pub const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClickEvent {
    pub user_id: String,
    pub hotel_id: String,
    /// Seconds since the Unix epoch.
    pub timestamp: i64,
}

/// Sessions split three ways. `T` is the hotel key: ids straight out of a
/// click log, or dense vocabulary indices once a vocabulary exists.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionCorpus<T = u32> {
    pub train: Vec<Vec<T>>,
    pub validation: Vec<Vec<T>>,
    pub test: Vec<Vec<T>>,
    pub split_seed: u64,
    pub split_ratios: [f64; 3],
}

impl<T> SessionCorpus<T> {
    pub fn session_count(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn splits(&self) -> [&[Vec<T>]; 3] {
        [&self.train, &self.validation, &self.test]
    }
}

impl SessionCorpus<String> {
    /// Maps hotel ids to vocabulary indices.
    pub fn to_indices(&self, vocab: &Vocabulary) -> Result<SessionCorpus<u32>> {
        let map = |split: &[Vec<String>]| -> Result<Vec<Vec<u32>>> {
            split
                .iter()
                .map(|s| s.iter().map(|id| vocab.require(id)).collect())
                .collect()
        };
        Ok(SessionCorpus {
            train: map(&self.train)?,
            validation: map(&self.validation)?,
            test: map(&self.test)?,
            split_seed: self.split_seed,
            split_ratios: self.split_ratios,
        })
    }
}

/// A skip-gram training example: predict `context` given `target`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TrainingPair {
    pub target: u32,
    pub context: u32,
}

/// Parses a timestamp cell: integer epoch seconds or ISO-8601.
pub fn parse_timestamp(cell: &str) -> Option<i64> {
    if let Ok(v) = cell.parse::<i64>() {
        return Some(v);
    }
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(cell) {
        return Some(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S%.f"] {
        if let Ok(dt) = chrono::NaiveDateTime::parse_from_str(cell, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    chrono::NaiveDate::parse_from_str(cell, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|dt| dt.and_utc().timestamp())
}

pub fn load_click_log(path: &Path) -> Result<Vec<ClickEvent>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_click_log(file, &path.display().to_string())
}

/// Reads a `user_id, hotel_id, timestamp` CSV. Rows need not be sorted.
pub fn read_click_log<R: Read>(reader: R, source: &str) -> Result<Vec<ClickEvent>> {
    let parse_err = |line: u64, message: String| Error::Parse {
        file: source.to_string(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if !header.is_empty() && header.iter().collect::<Vec<_>>() != ["user_id", "hotel_id", "timestamp"] {
        return Err(parse_err(1, "header must be user_id,hotel_id,timestamp".into()));
    }
    let mut events = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if row.len() != 3 {
            return Err(parse_err(line, format!("expected 3 fields, found {}", row.len())));
        }
        let timestamp = parse_timestamp(&row[2])
            .ok_or_else(|| parse_err(line, format!("bad timestamp `{}`", &row[2])))?;
        if timestamp < 0 {
            return Err(parse_err(line, "negative timestamp".into()));
        }
        if row[0].is_empty() || row[1].is_empty() {
            return Err(parse_err(line, "empty user_id or hotel_id".into()));
        }
        events.push(ClickEvent {
            user_id: row[0].to_string(),
            hotel_id: row[1].to_string(),
            timestamp,
        });
    }
    Ok(events)
}

pub fn write_click_log<W: std::io::Write>(writer: W, events: &[ClickEvent]) -> Result<()> {
    let err = |e: csv::Error| Error::Invalid(format!("writing click log: {e}"));
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["user_id", "hotel_id", "timestamp"]).map_err(err)?;
    for e in events {
        w.write_record([e.user_id.as_str(), e.hotel_id.as_str(), &e.timestamp.to_string()])
            .map_err(err)?;
    }
    w.flush().map_err(|e| Error::Invalid(format!("writing click log: {e}")))?;
    Ok(())
}

/// Groups clicks into sessions.
///
/// Events are grouped per user and ordered by time; a new session starts
/// wherever consecutive clicks are more than `gap_days` apart. Repeated
/// clicks on the same hotel in a row collapse to one, and sessions shorter
/// than two clicks are dropped. Output is ordered by user id, then time.
pub fn sessionize(events: &[ClickEvent], gap_days: f64) -> Vec<Vec<String>> {
    let max_gap = gap_days * SECONDS_PER_DAY as f64;
    let mut by_user: BTreeMap<&str, Vec<&ClickEvent>> = BTreeMap::new();
    for e in events {
        by_user.entry(e.user_id.as_str()).or_default().push(e);
    }
    let mut sessions = Vec::new();
    for (_, mut clicks) in by_user {
        // stable: simultaneous clicks keep log order
        clicks.sort_by_key(|e| e.timestamp);
        let mut current: Vec<String> = Vec::new();
        let mut last_ts: Option<i64> = None;
        for e in clicks {
            if let Some(prev) = last_ts {
                if (e.timestamp - prev) as f64 > max_gap {
                    if current.len() >= 2 {
                        sessions.push(std::mem::take(&mut current));
                    } else {
                        current.clear();
                    }
                }
            }
            last_ts = Some(e.timestamp);
            if current.last() != Some(&e.hotel_id) {
                current.push(e.hotel_id.clone());
            }
        }
        if current.len() >= 2 {
            sessions.push(current);
        }
    }
    sessions
}

fn session_key<T: AsRef<[u8]>>(session: &[T], seed: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for item in session {
        let bytes = item.as_ref();
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    h.finalize().into()
}

/// Randomly assigns sessions to train/validation/test.
///
/// Each session is keyed by a hash of `(seed, content)`; sessions sorted by
/// key fill the splits in order, so split sizes match the ratios to within
/// one session and the assignment does not depend on input order.
pub fn split_corpus<T: AsRef<[u8]> + Ord + Clone>(
    sessions: Vec<Vec<T>>,
    ratios: [f64; 3],
    seed: u64,
) -> Result<SessionCorpus<T>> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(Error::Config("split ratios must be non-negative".into()));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios sum to {total}, not 1")));
    }
    let requested = ratios.iter().filter(|&&r| r > 0.0).count();
    // an empty corpus is allowed; a small one that cannot fill every split is not
    if !sessions.is_empty() && sessions.len() < requested {
        return Err(Error::Invalid(format!(
            "{} sessions cannot fill {requested} non-empty splits",
            sessions.len()
        )));
    }
    let sizes = apportion(sessions.len(), ratios);

    let mut keyed: Vec<([u8; 32], Vec<T>)> = sessions
        .into_iter()
        .map(|s| (session_key(&s, seed), s))
        .collect();
    keyed.sort();
    let mut it = keyed.into_iter().map(|(_, s)| s);
    let train: Vec<_> = it.by_ref().take(sizes[0]).collect();
    let validation: Vec<_> = it.by_ref().take(sizes[1]).collect();
    let test: Vec<_> = it.collect();
    Ok(SessionCorpus {
        train,
        validation,
        test,
        split_seed: seed,
        split_ratios: ratios,
    })
}

/// Largest-remainder apportionment; every non-zero ratio gets at least one
/// item when `n` allows it.
fn apportion(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes = [0usize; 3];
    for i in 0..3 {
        sizes[i] = exact[i].floor() as usize;
    }
    let mut left = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            sizes[i] += 1;
            left -= 1;
        }
    }
    // a tiny ratio may round to zero although enough sessions exist
    for i in 0..3 {
        if ratios[i] > 0.0 && sizes[i] == 0 {
            let donor = (0..3).max_by_key(|&j| sizes[j]).unwrap();
            if sizes[donor] > 1 {
                sizes[donor] -= 1;
                sizes[i] += 1;
            }
        }
    }
    sizes
}

/// Skip-gram pairs for every position `t` and every `c` with
/// `0 < |c - t| <= window`, clipped at the session bounds. Ordered by `t`,
/// then `c`.
pub fn generate_pairs(session: &[u32], window: usize) -> Vec<TrainingPair> {
    let mut pairs = Vec::new();
    append_pairs(session, window, &mut pairs);
    pairs
}

pub fn append_pairs(session: &[u32], window: usize, out: &mut Vec<TrainingPair>) {
    let n = session.len();
    for t in 0..n {
        let lo = t.saturating_sub(window);
        let hi = (t + window).min(n.saturating_sub(1));
        for c in lo..=hi {
            if c != t {
                out.push(TrainingPair {
                    target: session[t],
                    context: session[c],
                });
            }
        }
    }
}

/// Consecutive `(h_t, h_{t+1})` pairs used as next-click prediction tasks.
pub fn next_click_pairs(sessions: &[Vec<u32>]) -> Vec<TrainingPair> {
    sessions
        .iter()
        .flat_map(|s| {
            s.windows(2).map(|w| TrainingPair {
                target: w[0],
                context: w[1],
            })
        })
        .collect()
}

/// Removes every click on a hotel in `held_out`, re-collapses immediate
/// repeats created by the removal and drops sessions left shorter than two.
pub fn strip_hotels<T: PartialEq + Clone>(sessions: &[Vec<T>], held_out: &[T]) -> Vec<Vec<T>> {
    sessions
        .iter()
        .filter_map(|s| {
            let mut kept: Vec<T> = Vec::with_capacity(s.len());
            for h in s {
                if !held_out.contains(h) && kept.last() != Some(h) {
                    kept.push(h.clone());
                }
            }
            (kept.len() >= 2).then_some(kept)
        })
        .collect()
}
