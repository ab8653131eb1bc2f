//! Append-only expert-label store with periodic snapshots.
//!
//! `events.jsonl` holds one sequenced event per line and is never rewritten,
//! apart from dropping a torn final line left by a crash mid-write.
//! `snapshot.json` is the full state at some sequence number; opening loads
//! it and replays the newer events.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crs_core::bench::{check_confidence, ExpertLabel};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServeError};

pub const EVENTS_FILE: &str = "events.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub rater: String,
    /// Position in the case queue the rater should resume at.
    pub cursor: usize,
    pub case_id: Option<String>,
    pub timestamp: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Label(ExpertLabel),
    Session(Session),
}

#[derive(Serialize, Deserialize)]
struct LogLine {
    seq: u64,
    event: Event,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreState {
    /// Sequence number of the last applied event.
    pub seq: u64,
    /// Every label revision in write order.
    pub labels: Vec<ExpertLabel>,
    pub sessions: BTreeMap<String, Session>,
}

impl StoreState {
    fn apply(&mut self, seq: u64, event: Event) -> Result<()> {
        if seq != self.seq + 1 {
            return Err(ServeError::Config(format!("event log gap: expected seq {}, found {seq}", self.seq + 1)));
        }
        match event {
            Event::Label(l) => self.labels.push(l),
            Event::Session(s) => {
                self.sessions.insert(s.rater.clone(), s);
            }
        }
        self.seq = seq;
        Ok(())
    }

    /// Revisions of one rater's call on one case, oldest first.
    pub fn history(&self, rater: &str, case_id: &str) -> Vec<&ExpertLabel> {
        self.labels.iter().filter(|l| l.rater == rater && l.case_id == case_id).collect()
    }

    /// Latest revision per case for `rater`, with the number of revisions.
    pub fn latest_for(&self, rater: &str) -> Vec<(ExpertLabel, usize)> {
        let mut out: BTreeMap<&str, (ExpertLabel, usize)> = BTreeMap::new();
        for l in self.labels.iter().filter(|l| l.rater == rater) {
            let e = out.entry(&l.case_id).or_insert_with(|| (l.clone(), 0));
            e.1 += 1;
            if l.revision >= e.0.revision {
                e.0 = l.clone();
            }
        }
        out.into_values().collect()
    }
}

pub struct LabelStore {
    dir: PathBuf,
    log: File,
    state: StoreState,
    snapshot_every: u64,
}

fn read_snapshot(dir: &Path) -> Result<StoreState> {
    match std::fs::read(dir.join(SNAPSHOT_FILE)) {
        Ok(bytes) => Ok(serde_json::from_slice(&bytes)?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(StoreState::default()),
        Err(e) => Err(e.into()),
    }
}

/// Applies every logged event newer than `state.seq`. Returns the byte
/// length of the well-formed prefix of the log.
fn replay(file: &mut File, state: &mut StoreState) -> Result<u64> {
    file.seek(SeekFrom::Start(0))?;
    let mut reader = BufReader::new(file);
    let mut good = 0u64;
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line)?;
        if n == 0 {
            break;
        }
        if !line.ends_with('\n') {
            // Torn write: the crash happened before the newline landed.
            break;
        }
        let rec: LogLine = serde_json::from_str(line.trim_end())
            .map_err(|e| ServeError::Config(format!("corrupt event at byte {good}: {e}")))?;
        if rec.seq > state.seq {
            state.apply(rec.seq, rec.event)?;
        }
        good += n as u64;
    }
    Ok(good)
}

impl LabelStore {
    pub fn open(dir: &Path, snapshot_every: u64) -> Result<LabelStore> {
        std::fs::create_dir_all(dir)?;
        let mut log = OpenOptions::new().read(true).append(true).create(true).open(dir.join(EVENTS_FILE))?;
        let mut state = read_snapshot(dir)?;
        let good = replay(&mut log, &mut state)?;
        if good < log.metadata()?.len() {
            log.set_len(good)?;
            log.sync_all()?;
        }
        Ok(LabelStore { dir: dir.to_path_buf(), log, state, snapshot_every: snapshot_every.max(1) })
    }

    /// State rebuilt from the event log alone, ignoring any snapshot.
    pub fn replay_from_empty(dir: &Path) -> Result<StoreState> {
        let mut file = File::open(dir.join(EVENTS_FILE))?;
        let mut state = StoreState::default();
        replay(&mut file, &mut state)?;
        Ok(state)
    }

    pub fn state(&self) -> &StoreState {
        &self.state
    }

    fn append(&mut self, event: Event) -> Result<()> {
        let seq = self.state.seq + 1;
        let mut bytes = serde_json::to_vec(&LogLine { seq, event: event.clone() })?;
        bytes.push(b'\n');
        self.log.write_all(&bytes)?;
        self.log.sync_data()?;
        self.state.apply(seq, event)?;
        if seq % self.snapshot_every == 0 {
            self.snapshot()?;
        }
        Ok(())
    }

    /// Records a call; the first one for a (rater, case) pair is revision 1
    /// and every later one revises it.
    pub fn submit(&mut self, rater: &str, case_id: &str, call: u8, confidence: i64, timestamp: u64) -> Result<ExpertLabel> {
        let confidence = check_confidence(confidence)?;
        if call > 1 {
            return Err(ServeError::BadRequest(format!("call must be 0 or 1, got {call}")));
        }
        let revision = self.state.history(rater, case_id).len() as u32 + 1;
        let label = ExpertLabel { rater: rater.into(), case_id: case_id.into(), call, confidence, timestamp, revision };
        self.append(Event::Label(label.clone()))?;
        Ok(label)
    }

    pub fn put_session(&mut self, session: Session) -> Result<()> {
        self.append(Event::Session(session))
    }

    /// Writes the full state atomically via a temporary file and rename.
    pub fn snapshot(&self) -> Result<()> {
        let tmp = self.dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        let mut f = File::create(&tmp)?;
        f.write_all(&serde_json::to_vec(&self.state)?)?;
        f.sync_all()?;
        std::fs::rename(&tmp, self.dir.join(SNAPSHOT_FILE))?;
        Ok(())
    }
}

/// Third-party label table: `rater,case_id,call,confidence,timestamp,revision`.
pub fn labels_to_csv(labels: &[ExpertLabel]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for l in labels {
        w.serialize(l).map_err(crs_core::Error::from)?;
    }
    let bytes = w.into_inner().map_err(|e| ServeError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn labels_from_csv<R: Read>(input: R) -> Result<Vec<ExpertLabel>> {
    #[derive(Deserialize)]
    struct Row {
        rater: String,
        case_id: String,
        call: u8,
        confidence: i64,
        timestamp: u64,
        revision: u32,
    }
    let mut r = csv::Reader::from_reader(input);
    r.deserialize::<Row>()
        .map(|row| {
            let row = row.map_err(crs_core::Error::from)?;
            if row.call > 1 {
                return Err(ServeError::BadRequest(format!("call must be 0 or 1, got {}", row.call)));
            }
            Ok(ExpertLabel {
                confidence: check_confidence(row.confidence)?,
                rater: row.rater,
                case_id: row.case_id,
                call: row.call,
                timestamp: row.timestamp,
                revision: row.revision,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn submit_revise_and_history() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = LabelStore::open(dir.path(), 100).unwrap();
        s.submit("d1", "c1", 1, 3, 10).unwrap();
        let r = s.submit("d1", "c1", 0, 5, 20).unwrap();
        assert_eq!(r.revision, 2);
        s.submit("d2", "c1", 1, 2, 30).unwrap();
        let latest = s.state().latest_for("d1");
        assert_eq!(latest.len(), 1);
        assert_eq!((latest[0].0.call, latest[0].1), (0, 2));
        assert_eq!(s.state().history("d1", "c1").len(), 2);
    }

    #[test]
    fn confidence_and_call_bounds() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = LabelStore::open(dir.path(), 100).unwrap();
        assert_eq!(s.submit("d", "c", 1, 6, 0).unwrap_err().kind(), "MalformedConfidence");
        assert_eq!(s.submit("d", "c", 1, 0, 0).unwrap_err().kind(), "MalformedConfidence");
        assert_eq!(s.submit("d", "c", 2, 3, 0).unwrap_err().kind(), "BadRequest");
        assert_eq!(s.state().seq, 0);
    }

    #[test]
    fn reopen_with_and_without_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = LabelStore::open(dir.path(), 3).unwrap();
        for i in 0..7 {
            s.submit("d", &format!("c{}", i % 3), (i % 2) as u8, 1 + i % 5, i as u64).unwrap();
        }
        s.put_session(Session { rater: "d".into(), cursor: 4, case_id: Some("c1".into()), timestamp: 99 }).unwrap();
        let before = s.state().clone();
        drop(s);
        assert!(dir.path().join(SNAPSHOT_FILE).exists());
        let reopened = LabelStore::open(dir.path(), 3).unwrap();
        assert_eq!(reopened.state(), &before);
        assert_eq!(LabelStore::replay_from_empty(dir.path()).unwrap(), before);
    }

    #[test]
    fn torn_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = LabelStore::open(dir.path(), 100).unwrap();
        s.submit("d", "c", 1, 3, 1).unwrap();
        let before = s.state().clone();
        drop(s);
        let mut f = OpenOptions::new().append(true).open(dir.path().join(EVENTS_FILE)).unwrap();
        f.write_all(b"{\"seq\":2,\"event\":{\"type\":\"la").unwrap();
        drop(f);
        let mut s = LabelStore::open(dir.path(), 100).unwrap();
        assert_eq!(s.state(), &before);
        s.submit("d", "c", 0, 3, 2).unwrap();
        assert_eq!(LabelStore::replay_from_empty(dir.path()).unwrap(), *s.state());
    }

    #[test]
    fn csv_round_trip() {
        let labels = vec![
            ExpertLabel { rater: "D1".into(), case_id: "c,1".into(), call: 1, confidence: 4, timestamp: 5, revision: 1 },
            ExpertLabel { rater: "D2".into(), case_id: "c2".into(), call: 0, confidence: 1, timestamp: 6, revision: 2 },
        ];
        let text = labels_to_csv(&labels).unwrap();
        assert!(text.starts_with("rater,case_id,call,confidence,timestamp,revision\n"));
        assert_eq!(labels_from_csv(text.as_bytes()).unwrap(), labels);
        let bad = "rater,case_id,call,confidence,timestamp,revision\nD,c,1,9,0,1\n";
        assert_eq!(labels_from_csv(bad.as_bytes()).unwrap_err().kind(), "MalformedConfidence");
    }
}
