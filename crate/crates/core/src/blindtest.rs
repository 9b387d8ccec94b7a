//! Human blind test: a balanced, shuffled set of clean and corrected patches
//! shown without labels, the rater's judgments, and the confusion they yield.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{streams, RngStream};

pub const DEFAULT_ITEMS: usize = 100;
pub const DEFAULT_PATCH: usize = 500;

/// What an item really is, and what a rater may answer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Judgment {
    OriginalClean,
    Corrected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlindItem {
    pub item_id: String,
    /// Patch file, relative to the pool directory of its truth.
    pub patch: String,
    pub truth: Judgment,
    pub answer: Option<Judgment>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlindSession {
    pub session_id: String,
    pub patch_size: usize,
    pub seed: u64,
    pub created_at: u64,
    pub completed_at: Option<u64>,
    pub items: Vec<BlindItem>,
}

/// Item ids are `{session_id}-{position}`, so an id alone locates its session.
pub fn item_id(session_id: &str, position: usize) -> String {
    format!("{session_id}-{position:04}")
}

pub fn session_of_item(item_id: &str) -> Option<&str> {
    let (session, pos) = item_id.rsplit_once('-')?;
    (!session.is_empty() && pos.len() == 4 && pos.bytes().all(|b| b.is_ascii_digit())).then_some(session)
}

/// Draws `n / 2` patches from each pool without replacement and shuffles the
/// presentation order, all from `seed`.
pub fn create_session(
    session_id: &str,
    clean_pool: &[String],
    corrected_pool: &[String],
    n: usize,
    patch_size: usize,
    seed: u64,
    now: u64,
) -> Result<BlindSession> {
    if n == 0 || n % 2 != 0 {
        return Err(Error::Config(format!("blind test size must be a positive even number, got {n}")));
    }
    if patch_size == 0 {
        return Err(Error::Config("patch size must be positive".into()));
    }
    let half = n / 2;
    for (name, pool) in [("clean", clean_pool), ("corrected", corrected_pool)] {
        if pool.len() < half {
            return Err(Error::Input(format!(
                "{name} pool has {} patches, {half} needed",
                pool.len()
            )));
        }
    }
    let stream = RngStream::new(seed, streams::BLINDTEST);
    let mut picked: Vec<(String, Judgment)> = Vec::with_capacity(n);
    for (k, (pool, truth)) in [
        (clean_pool, Judgment::OriginalClean),
        (corrected_pool, Judgment::Corrected),
    ]
    .into_iter()
    .enumerate()
    {
        let mut rng = stream.child(k as u64).rng();
        let mut idx = index::sample(&mut rng, pool.len(), half).into_vec();
        idx.sort_unstable();
        picked.extend(idx.into_iter().map(|i| (pool[i].clone(), truth)));
    }
    picked.shuffle(&mut stream.child(2).rng());
    let items = picked
        .into_iter()
        .enumerate()
        .map(|(pos, (patch, truth))| BlindItem {
            item_id: item_id(session_id, pos),
            patch,
            truth,
            answer: None,
        })
        .collect();
    Ok(BlindSession {
        session_id: session_id.to_string(),
        patch_size,
        seed,
        created_at: now,
        completed_at: None,
        items,
    })
}

impl BlindSession {
    pub fn answered(&self) -> usize {
        self.items.iter().filter(|i| i.answer.is_some()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.answered() == self.items.len()
    }

    pub fn item(&self, item_id: &str) -> Result<&BlindItem> {
        self.items
            .iter()
            .find(|i| i.item_id == item_id)
            .ok_or_else(|| Error::NotFound(format!("item `{item_id}`")))
    }

    /// Stores an answer. Each item can be answered exactly once.
    pub fn record_answer(&mut self, item_id: &str, answer: Judgment, now: u64) -> Result<()> {
        let item = self
            .items
            .iter_mut()
            .find(|i| i.item_id == item_id)
            .ok_or_else(|| Error::NotFound(format!("item `{item_id}`")))?;
        if item.answer.is_some() {
            return Err(Error::Conflict(format!("item `{item_id}` is already answered")));
        }
        item.answer = Some(answer);
        if self.is_complete() {
            self.completed_at = Some(now);
        }
        Ok(())
    }

    /// The payload the rater's interface may see: ids and answers, never truth.
    pub fn view(&self) -> SessionView {
        SessionView {
            session_id: self.session_id.clone(),
            n: self.items.len(),
            patch_size: self.patch_size,
            answered: self.answered(),
            complete: self.is_complete(),
            items: self
                .items
                .iter()
                .map(|i| ItemView {
                    item_id: i.item_id.clone(),
                    answer: match i.answer {
                        Some(Judgment::OriginalClean) => "original_clean",
                        Some(Judgment::Corrected) => "corrected",
                        None => "unanswered",
                    }
                    .to_string(),
                })
                .collect(),
        }
    }

    /// Confusion statistics; an unfinished session needs `allow_partial`.
    pub fn report(&self, allow_partial: bool) -> Result<BlindReport> {
        let answered = self.answered();
        if answered < self.items.len() && !allow_partial {
            return Err(Error::Incomplete {
                answered,
                total: self.items.len(),
            });
        }
        let mut c = Confusion::default();
        for item in &self.items {
            match (item.truth, item.answer) {
                (Judgment::OriginalClean, Some(Judgment::OriginalClean)) => c.clean_as_clean += 1,
                (Judgment::OriginalClean, Some(Judgment::Corrected)) => c.clean_as_corrected += 1,
                (Judgment::Corrected, Some(Judgment::OriginalClean)) => c.corrected_as_clean += 1,
                (Judgment::Corrected, Some(Judgment::Corrected)) => c.corrected_as_corrected += 1,
                (_, None) => {}
            }
        }
        Ok(BlindReport::from_confusion(c, self.items.len()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemView {
    pub item_id: String,
    /// `original_clean`, `corrected` or `unanswered`.
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub n: usize,
    pub patch_size: usize,
    pub answered: usize,
    pub complete: bool,
    pub items: Vec<ItemView>,
}

/// Rows are truth, columns the rater's answer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub clean_as_clean: usize,
    pub clean_as_corrected: usize,
    pub corrected_as_clean: usize,
    pub corrected_as_corrected: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.clean_as_clean + self.clean_as_corrected + self.corrected_as_clean + self.corrected_as_corrected
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlindReport {
    pub confusion: Confusion,
    /// Share of corrected patches the rater took for untouched tissue.
    pub corrected_as_original_rate: f64,
    /// Share of clean patches the rater took for corrected ones.
    pub clean_as_corrected_rate: f64,
    pub answered: usize,
    pub total: usize,
    pub partial: bool,
}

impl BlindReport {
    pub fn from_confusion(c: Confusion, total: usize) -> Self {
        let ratio = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
        BlindReport {
            confusion: c,
            corrected_as_original_rate: ratio(c.corrected_as_clean, c.corrected_as_corrected),
            clean_as_corrected_rate: ratio(c.clean_as_corrected, c.clean_as_clean),
            answered: c.total(),
            total,
            partial: c.total() < total,
        }
    }
}

/// One JSON file per session under a data directory, replaced atomically.
#[derive(Clone, Debug)]
pub struct SessionStore {
    dir: PathBuf,
}

impl SessionStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(SessionStore { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, session_id: &str) -> Result<PathBuf> {
        if session_id.is_empty() || !session_id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_') {
            return Err(Error::NotFound(format!("session `{session_id}`")));
        }
        Ok(self.dir.join(format!("{session_id}.json")))
    }

    pub fn save(&self, s: &BlindSession) -> Result<()> {
        let path = self.path(&s.session_id)?;
        let tmp = path.with_extension("json.partial");
        let body = serde_json::to_vec_pretty(s).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    pub fn load(&self, session_id: &str) -> Result<BlindSession> {
        let path = self.path(session_id)?;
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::NotFound(format!("session `{session_id}`")))
            }
            Err(e) => return Err(Error::io(&path, e)),
        };
        serde_json::from_slice(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    /// Ids of every stored session, sorted.
    pub fn list(&self) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.dir).map_err(|e| Error::io(&self.dir, e))? {
            let entry = entry.map_err(|e| Error::io(&self.dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(id) = name.strip_suffix(".json") {
                out.push(id.to_string());
            }
        }
        out.sort();
        Ok(out)
    }
}

/// Sorted image file names (png, jpg, tif) directly inside `dir`.
pub fn list_patches(dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let ext = name.rsplit('.').next().unwrap_or("").to_ascii_lowercase();
        if matches!(ext.as_str(), "png" | "jpg" | "jpeg" | "tif" | "tiff") {
            out.push(name);
        }
    }
    out.sort();
    Ok(out)
}

/// Request and response bodies of the blind-test HTTP API.
pub mod wire {
    use serde::{Deserialize, Serialize};

    use super::Judgment;

    #[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct CreateSession {
        pub n: Option<usize>,
        pub patch_size: Option<usize>,
        pub seed: Option<u64>,
    }

    #[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
    pub struct SessionCreated {
        pub session_id: String,
        pub n: usize,
        pub patch_size: usize,
        pub seed: u64,
    }

    #[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
    pub struct ItemList {
        pub session_id: String,
        pub item_ids: Vec<String>,
    }

    #[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct Answer {
        pub answer: Judgment,
    }

    #[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
    pub struct AnswerRecorded {
        pub item_id: String,
        pub answered: usize,
        pub n: usize,
        pub complete: bool,
    }

    #[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
    pub struct ErrorBody {
        /// Stable machine-readable code, e.g. `not_found` or `conflict`.
        pub error: String,
        pub message: String,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pool(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i:03}.png")).collect()
    }

    fn session(n: usize, seed: u64) -> BlindSession {
        create_session("s1", &pool("c", 60), &pool("k", 60), n, 500, seed, 0).unwrap()
    }

    #[test]
    fn ten_items_are_half_and_half() {
        let s = session(10, 1);
        let clean = s.items.iter().filter(|i| i.truth == Judgment::OriginalClean).count();
        assert_eq!((s.items.len(), clean), (10, 5));
        let order: Vec<_> = s.items.iter().map(|i| &i.patch).collect();
        let again = session(10, 1);
        assert_eq!(order, again.items.iter().map(|i| &i.patch).collect::<Vec<_>>());
    }

    #[test]
    fn paper_protocol_parameters() {
        let s = session(DEFAULT_ITEMS, 5);
        assert_eq!(s.items.len(), 100);
        assert_eq!(s.patch_size, DEFAULT_PATCH);
    }

    #[test]
    fn creation_errors() {
        assert!(matches!(
            create_session("s", &pool("c", 9), &pool("k", 9), 7, 500, 0, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            create_session("s", &pool("c", 4), &pool("k", 9), 10, 500, 0, 0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn answers_are_write_once() {
        let mut s = session(10, 2);
        let first = s.items[0].item_id.clone();
        s.record_answer(&first, Judgment::Corrected, 1).unwrap();
        assert_eq!(s.answered(), 1);
        assert!(matches!(
            s.record_answer(&first, Judgment::OriginalClean, 2),
            Err(Error::Conflict(_))
        ));
        assert!(matches!(
            s.record_answer("nope-0000", Judgment::Corrected, 2),
            Err(Error::NotFound(_))
        ));
        assert!(matches!(s.report(false), Err(Error::Incomplete { answered: 1, total: 10 })));
        assert!(s.report(true).unwrap().partial);
    }

    fn answer_all(s: &mut BlindSession, f: impl Fn(usize, Judgment) -> Judgment) {
        for k in 0..s.items.len() {
            let (id, truth) = (s.items[k].item_id.clone(), s.items[k].truth);
            s.record_answer(&id, f(k, truth), 9).unwrap();
        }
    }

    #[test]
    fn perfect_and_all_clean_raters() {
        let mut s = session(10, 3);
        answer_all(&mut s, |_, t| t);
        let r = s.report(false).unwrap();
        assert_eq!((r.confusion.clean_as_corrected, r.confusion.corrected_as_clean), (0, 0));
        assert_eq!(s.completed_at, Some(9));

        let mut s = session(10, 3);
        answer_all(&mut s, |_, _| Judgment::OriginalClean);
        let r = s.report(false).unwrap();
        assert_eq!(r.corrected_as_original_rate, 1.0);
        assert_eq!(r.clean_as_corrected_rate, 0.0);
    }

    #[test]
    fn published_blind_test_rates() {
        let c = Confusion {
            clean_as_clean: 30,
            clean_as_corrected: 20,
            corrected_as_clean: 35,
            corrected_as_corrected: 15,
        };
        let r = BlindReport::from_confusion(c, 100);
        assert!((r.corrected_as_original_rate - 0.70).abs() < 1e-12);
        assert!((r.clean_as_corrected_rate - 0.40).abs() < 1e-12);
    }

    #[test]
    fn view_never_carries_truth() {
        let mut s = session(10, 4);
        let id = s.items[3].item_id.clone();
        s.record_answer(&id, Judgment::Corrected, 1).unwrap();
        let json = serde_json::to_string(&s.view()).unwrap();
        assert!(!json.contains("truth"));
        assert!(!json.contains(".png"));
        assert_eq!(session_of_item(&id), Some("s1"));
    }

    #[test]
    fn store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::open(dir.path()).unwrap();
        let s = session(4, 0);
        store.save(&s).unwrap();
        assert_eq!(store.load("s1").unwrap(), s);
        assert_eq!(store.list().unwrap(), vec!["s1".to_string()]);
        assert!(matches!(store.load("missing"), Err(Error::NotFound(_))));
        assert!(matches!(store.load("../x"), Err(Error::NotFound(_))));
    }

    proptest! {
        #[test]
        fn balance_and_conservation(half in 1usize..30, seed in any::<u64>(), mask in any::<u64>()) {
            let mut s = create_session("p", &pool("c", 30), &pool("k", 30), 2 * half, 64, seed, 0).unwrap();
            let clean = s.items.iter().filter(|i| i.truth == Judgment::OriginalClean).count();
            prop_assert_eq!(clean, half);
            answer_all(&mut s, |k, _| if mask >> (k % 64) & 1 == 1 { Judgment::Corrected } else { Judgment::OriginalClean });
            prop_assert_eq!(s.report(false).unwrap().confusion.total(), 2 * half);
        }
    }
}
