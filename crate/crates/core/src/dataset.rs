//! Event ingestion, gap-based sessionization and chronological splits.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::quantile_sorted;

/// Default inactivity gap that closes a session: 30 minutes.
pub const DEFAULT_GAP_SECONDS: f64 = 1800.0;
/// Sessions shorter than this many seconds are dropped.
pub const DEFAULT_MIN_SESSION_SECONDS: f64 = 1.0;

/// One raw listening event.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub user_id: String,
    /// Seconds since the Unix epoch, UTC.
    pub timestamp: f64,
    pub item_id: Option<String>,
}

/// Layout of the timestamp column in an event log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogFormat {
    /// `user \t ISO-8601 timestamp [\t item ...]`, the last.fm-1K layout.
    #[default]
    Lastfm,
    /// `user \t epoch seconds [\t item ...]`.
    Epoch,
}

impl FromStr for LogFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lastfm" | "iso8601" => Ok(LogFormat::Lastfm),
            "epoch" => Ok(LogFormat::Epoch),
            other => Err(Error::InvalidArgument(format!("unknown log format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ParseOptions {
    pub format: LogFormat,
    /// Largest tolerated fraction of malformed lines before the parse fails.
    pub max_malformed_fraction: f64,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self {
            format: LogFormat::Lastfm,
            max_malformed_fraction: 0.05,
        }
    }
}

/// Parsed events grouped by user, each group sorted ascending by timestamp.
#[derive(Debug, Clone, Default)]
pub struct EventLog {
    pub users: BTreeMap<String, Vec<Event>>,
    pub malformed: usize,
    pub total_lines: usize,
}

impl EventLog {
    pub fn n_events(&self) -> usize {
        self.users.values().map(Vec::len).sum()
    }
}

fn parse_timestamp(raw: &str, format: LogFormat) -> Option<f64> {
    let raw = raw.trim();
    let ts = match format {
        LogFormat::Epoch => raw.parse::<f64>().ok()?,
        LogFormat::Lastfm => match DateTime::parse_from_rfc3339(raw) {
            Ok(dt) => dt.timestamp() as f64 + f64::from(dt.timestamp_subsec_nanos()) * 1e-9,
            Err(_) => {
                let naive = NaiveDateTime::parse_from_str(raw, "%Y-%m-%dT%H:%M:%S")
                    .or_else(|_| NaiveDateTime::parse_from_str(raw, "%Y-%m-%d %H:%M:%S"))
                    .ok()?;
                naive.and_utc().timestamp() as f64
            }
        },
    };
    (ts.is_finite() && ts >= 0.0).then_some(ts)
}

fn parse_line(line: &str, format: LogFormat) -> Option<Event> {
    let mut cols = line.split('\t');
    let user = cols.next()?.trim();
    if user.is_empty() {
        return None;
    }
    let timestamp = parse_timestamp(cols.next()?, format)?;
    let item_id = cols.next().map(str::trim).filter(|s| !s.is_empty()).map(str::to_owned);
    Some(Event {
        user_id: user.to_owned(),
        timestamp,
        item_id,
    })
}

/// Parses a tab-separated event log from any reader. Blank lines are skipped.
pub fn parse_events<R: BufRead>(reader: R, opts: &ParseOptions) -> Result<EventLog> {
    let mut log = EventLog::default();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io("<event log>", e))?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        log.total_lines += 1;
        match parse_line(line, opts.format) {
            Some(ev) => log.users.entry(ev.user_id.clone()).or_default().push(ev),
            None => log.malformed += 1,
        }
    }
    if log.malformed == log.total_lines {
        return Err(Error::NoParseableLines("<event log>".into()));
    }
    let frac = log.malformed as f64 / log.total_lines as f64;
    if frac > opts.max_malformed_fraction {
        return Err(Error::TooManyMalformed {
            malformed: log.malformed,
            total: log.total_lines,
            tolerance: opts.max_malformed_fraction,
        });
    }
    // stable: ties keep input order
    for events in log.users.values_mut() {
        events.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    }
    Ok(log)
}

pub fn parse_event_log(path: impl AsRef<Path>, opts: &ParseOptions) -> Result<EventLog> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_events(BufReader::new(file), opts).map_err(|e| match e {
        Error::NoParseableLines(_) => Error::NoParseableLines(path.to_owned()),
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// A maximal run of events with no inactivity gap above the threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub user_id: String,
    pub start_time: f64,
    #[serde(rename = "raw_length_s")]
    pub raw_length: f64,
    pub log_length: f64,
    /// 1-based position in the user's chronological order.
    pub session_index: usize,
}

impl Session {
    pub fn new(user_id: impl Into<String>, start_time: f64, raw_length: f64, session_index: usize) -> Self {
        Self {
            user_id: user_id.into(),
            start_time,
            raw_length,
            log_length: raw_length.ln(),
            session_index,
        }
    }

    pub fn end_time(&self) -> f64 {
        self.start_time + self.raw_length
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserSessions {
    pub user_id: String,
    pub sessions: Vec<Session>,
}

impl UserSessions {
    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn log_lengths(&self) -> Vec<f64> {
        self.sessions.iter().map(|s| s.log_length).collect()
    }
}

/// Sessions grouped by user; users ordered by id, sessions by start time.
#[derive(Debug, Clone, Default)]
pub struct SessionDataset {
    users: Vec<UserSessions>,
    index: HashMap<String, usize>,
    n_sessions: usize,
}

impl SessionDataset {
    pub fn from_sessions(sessions: impl IntoIterator<Item = Session>) -> Self {
        let mut grouped: BTreeMap<String, Vec<Session>> = BTreeMap::new();
        for s in sessions {
            grouped.entry(s.user_id.clone()).or_default().push(s);
        }
        let mut users = Vec::with_capacity(grouped.len());
        let mut n_sessions = 0;
        for (user_id, mut sessions) in grouped {
            sessions.sort_by(|a, b| {
                a.start_time
                    .total_cmp(&b.start_time)
                    .then(a.session_index.cmp(&b.session_index))
            });
            n_sessions += sessions.len();
            users.push(UserSessions { user_id, sessions });
        }
        let index = users.iter().enumerate().map(|(i, u)| (u.user_id.clone(), i)).collect();
        Self {
            users,
            index,
            n_sessions,
        }
    }

    pub fn users(&self) -> &[UserSessions] {
        &self.users
    }

    pub fn user(&self, user_id: &str) -> Option<&UserSessions> {
        self.index.get(user_id).map(|&i| &self.users[i])
    }

    pub fn contains_user(&self, user_id: &str) -> bool {
        self.index.contains_key(user_id)
    }

    /// Number of users, `N`.
    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    /// Total number of sessions, `N₀`.
    pub fn n_sessions(&self) -> usize {
        self.n_sessions
    }

    pub fn is_empty(&self) -> bool {
        self.n_sessions == 0
    }

    pub fn session_counts(&self) -> BTreeMap<String, usize> {
        self.users.iter().map(|u| (u.user_id.clone(), u.len())).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Session> {
        self.users.iter().flat_map(|u| u.sessions.iter())
    }

    pub fn union(&self, other: &SessionDataset) -> SessionDataset {
        SessionDataset::from_sessions(self.iter().chain(other.iter()).cloned())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SessionizeConfig {
    pub gap_threshold: f64,
    pub min_session_length: f64,
}

impl Default for SessionizeConfig {
    fn default() -> Self {
        Self {
            gap_threshold: DEFAULT_GAP_SECONDS,
            min_session_length: DEFAULT_MIN_SESSION_SECONDS,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SessionizeReport {
    pub sessions: usize,
    pub dropped_short: usize,
    pub users_without_sessions: usize,
}

impl fmt::Display for SessionizeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "sessions={} dropped_short={} users_without_sessions={}",
            self.sessions, self.dropped_short, self.users_without_sessions
        )
    }
}

/// Cuts each user's event stream wherever the gap between consecutive events
/// is strictly greater than `gap_threshold`.
pub fn sessionize(
    users: &BTreeMap<String, Vec<Event>>,
    cfg: &SessionizeConfig,
) -> Result<(SessionDataset, SessionizeReport)> {
    if !(cfg.gap_threshold > 0.0) {
        return Err(Error::InvalidArgument("gap_threshold must be positive".into()));
    }
    let mut report = SessionizeReport::default();
    let mut out = Vec::new();
    for (user, events) in users {
        if events.windows(2).any(|w| w[1].timestamp < w[0].timestamp) {
            return Err(Error::InvalidArgument(format!(
                "events for user `{user}` are not sorted by timestamp"
            )));
        }
        let mut spans: Vec<(f64, f64)> = Vec::new();
        for ev in events {
            match spans.last_mut() {
                Some((_, last)) if ev.timestamp - *last <= cfg.gap_threshold => *last = ev.timestamp,
                _ => spans.push((ev.timestamp, ev.timestamp)),
            }
        }
        let mut index = 0;
        for (start, end) in spans {
            let len = end - start;
            if len < cfg.min_session_length || len <= 0.0 {
                report.dropped_short += 1;
                continue;
            }
            index += 1;
            out.push(Session::new(user.clone(), start, len, index));
        }
        if index == 0 {
            report.users_without_sessions += 1;
        }
    }
    report.sessions = out.len();
    Ok((SessionDataset::from_sessions(out), report))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
        }
    }
}

impl FromStr for SplitFractions {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::InvalidFractions(s.to_owned()))?;
        match parts[..] {
            [train, valid, test] => Ok(Self { train, valid, test }),
            _ => Err(Error::InvalidFractions(s.to_owned())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: SessionDataset,
    pub valid: SessionDataset,
    pub test: SessionDataset,
    pub fractions: SplitFractions,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SplitReport {
    pub train: usize,
    pub valid_before_filter: usize,
    pub test_before_filter: usize,
    pub removed_valid: usize,
    pub removed_test: usize,
}

impl fmt::Display for SplitReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "train_sessions\t{}", self.train)?;
        writeln!(f, "valid_sessions\t{}", self.valid_before_filter - self.removed_valid)?;
        writeln!(f, "test_sessions\t{}", self.test_before_filter - self.removed_test)?;
        writeln!(f, "removed_valid_unknown_user\t{}", self.removed_valid)?;
        write!(f, "removed_test_unknown_user\t{}", self.removed_test)
    }
}

fn split_count(fraction: f64, total: usize) -> usize {
    // guards against 0.7 * 10 = 7.000000000000001 rounding up
    ((fraction * total as f64 - 1e-9).ceil().max(0.0) as usize).min(total)
}

/// Sorts all sessions by start time and cuts the timeline into train,
/// validation and test blocks; validation/test sessions of users never seen in
/// training are removed.
pub fn chronological_split(ds: &SessionDataset, fractions: SplitFractions) -> Result<(SplitDataset, SplitReport)> {
    let SplitFractions { train, valid, test } = fractions;
    let all = [train, valid, test];
    if all.iter().any(|f| !f.is_finite() || *f < 0.0) || ((train + valid + test) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidFractions(format!("{train},{valid},{test}")));
    }
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut sessions: Vec<&Session> = ds.iter().collect();
    sessions.sort_by(|a, b| {
        a.start_time
            .total_cmp(&b.start_time)
            .then_with(|| a.user_id.cmp(&b.user_id))
            .then(a.session_index.cmp(&b.session_index))
    });
    let n = sessions.len();
    let n_train = split_count(train, n);
    let n_valid = split_count(valid, n).min(n - n_train);

    let train_part: Vec<Session> = sessions[..n_train].iter().map(|s| (*s).clone()).collect();
    let seen: HashSet<&str> = train_part.iter().map(|s| s.user_id.as_str()).collect();
    let keep = |part: &[&Session]| -> (Vec<Session>, usize) {
        let kept: Vec<Session> = part
            .iter()
            .filter(|s| seen.contains(s.user_id.as_str()))
            .map(|s| (*s).clone())
            .collect();
        let removed = part.len() - kept.len();
        (kept, removed)
    };
    let (valid_part, removed_valid) = keep(&sessions[n_train..n_train + n_valid]);
    let (test_part, removed_test) = keep(&sessions[n_train + n_valid..]);

    let report = SplitReport {
        train: n_train,
        valid_before_filter: n_valid,
        test_before_filter: n - n_train - n_valid,
        removed_valid,
        removed_test,
    };
    for (name, part) in [
        ("train", &train_part),
        ("validation", &valid_part),
        ("test", &test_part),
    ] {
        if part.is_empty() {
            return Err(Error::EmptySplit(name));
        }
    }
    let split = SplitDataset {
        train: SessionDataset::from_sessions(train_part),
        valid: SessionDataset::from_sessions(valid_part),
        test: SessionDataset::from_sessions(test_part),
        fractions,
    };
    Ok((split, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuantileSummary {
    pub q25: f64,
    pub median: f64,
    pub mean: f64,
    pub q75: f64,
}

/// Quartiles and mean of max-normalized raw and log session lengths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LengthSummary {
    pub raw: QuantileSummary,
    pub log: QuantileSummary,
}

impl fmt::Display for LengthSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "stat\traw\tlog")?;
        writeln!(f, "q25\t{:.3}\t{:.3}", self.raw.q25, self.log.q25)?;
        writeln!(f, "median\t{:.3}\t{:.3}", self.raw.median, self.log.median)?;
        writeln!(f, "mean\t{:.3}\t{:.3}", self.raw.mean, self.log.mean)?;
        write!(f, "q75\t{:.3}\t{:.3}", self.raw.q75, self.log.q75)
    }
}

fn normalized_summary(mut values: Vec<f64>) -> QuantileSummary {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v /= max);
    } else {
        values.iter_mut().for_each(|v| *v = 0.0);
    }
    values.sort_by(f64::total_cmp);
    let q = |p| quantile_sorted(&values, p).unwrap_or(0.0);
    QuantileSummary {
        q25: q(0.25),
        median: q(0.5),
        mean: values.iter().sum::<f64>() / values.len() as f64,
        q75: q(0.75),
    }
}

pub fn summarize(ds: &SessionDataset) -> Result<LengthSummary> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(LengthSummary {
        raw: normalized_summary(ds.iter().map(|s| s.raw_length).collect()),
        log: normalized_summary(ds.iter().map(|s| s.log_length).collect()),
    })
}

pub fn write_sessions<'a>(path: impl AsRef<Path>, sessions: impl IntoIterator<Item = &'a Session>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for s in sessions {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_sessions(path: impl AsRef<Path>) -> Result<SessionDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let mut out = Vec::new();
    for row in r.deserialize::<Session>() {
        let s = row?;
        if !(s.raw_length > 0.0) || !s.start_time.is_finite() {
            return Err(Error::Corrupt(format!(
                "{}: invalid session row for `{}`",
                path.display(),
                s.user_id
            )));
        }
        out.push(Session::new(s.user_id, s.start_time, s.raw_length, s.session_index));
    }
    Ok(SessionDataset::from_sessions(out))
}

pub const SPLIT_FILES: [&str; 3] = ["train.csv", "valid.csv", "test.csv"];

pub fn write_split(dir: impl AsRef<Path>, split: &SplitDataset, report: &SplitReport) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, part) in SPLIT_FILES.iter().zip([&split.train, &split.valid, &split.test]) {
        write_sessions(dir.join(name), part.iter())?;
    }
    let report_path = dir.join("split_report.txt");
    let mut f = File::create(&report_path).map_err(|e| Error::io(&report_path, e))?;
    let fr = split.fractions;
    writeln!(f, "fractions\t{},{},{}\n{report}", fr.train, fr.valid, fr.test)
        .map_err(|e| Error::io(&report_path, e))?;
    Ok(())
}

pub fn read_split(dir: impl AsRef<Path>) -> Result<SplitDataset> {
    let dir = dir.as_ref();
    let train = read_sessions(dir.join(SPLIT_FILES[0]))?;
    let valid = read_sessions(dir.join(SPLIT_FILES[1]))?;
    let test = read_sessions(dir.join(SPLIT_FILES[2]))?;
    let total = (train.n_sessions() + valid.n_sessions() + test.n_sessions()) as f64;
    let fractions = SplitFractions {
        train: train.n_sessions() as f64 / total,
        valid: valid.n_sessions() as f64 / total,
        test: test.n_sessions() as f64 / total,
    };
    Ok(SplitDataset {
        train,
        valid,
        test,
        fractions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn events(user: &str, ts: &[f64]) -> BTreeMap<String, Vec<Event>> {
        let evs = ts
            .iter()
            .map(|&t| Event {
                user_id: user.into(),
                timestamp: t,
                item_id: None,
            })
            .collect();
        BTreeMap::from([(user.to_owned(), evs)])
    }

    fn sessions_of(ds: &SessionDataset) -> Vec<(f64, f64)> {
        ds.iter().map(|s| (s.start_time, s.raw_length)).collect()
    }

    #[test]
    fn parses_three_ordered_lines() {
        let text = "u1\t2009-05-04T23:08:57Z\ta\nu1\t2009-05-04T23:10:00Z\tb\nu1\t2009-05-04T23:15:00Z\n";
        let log = parse_events(text.as_bytes(), &ParseOptions::default()).unwrap();
        let evs = &log.users["u1"];
        assert_eq!(evs.len(), 3);
        assert!(evs.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
        assert_eq!(evs[0].item_id.as_deref(), Some("a"));
        assert_eq!(evs[2].item_id, None);
    }

    #[test]
    fn empty_log_is_an_error() {
        let err = parse_events("".as_bytes(), &ParseOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NoParseableLines(_)));
        assert!(err.to_string().contains("zero parseable lines"));
    }

    #[test]
    fn counts_one_malformed_line_in_a_hundred() {
        let mut text = String::new();
        for i in 0..100 {
            if i == 42 {
                text.push_str("u1\tnot-a-time\n");
            } else {
                text.push_str(&format!("u{}\t{}\n", i % 3, 1000 + i));
            }
        }
        let opts = ParseOptions {
            format: LogFormat::Epoch,
            ..Default::default()
        };
        let log = parse_events(text.as_bytes(), &opts).unwrap();
        assert_eq!(log.n_events(), 99);
        assert_eq!(log.malformed, 1);
    }

    #[test]
    fn malformed_fraction_above_tolerance_fails() {
        let text = "u\t1\nu\tbad\nu\tbad\nu\t5\n";
        let opts = ParseOptions {
            format: LogFormat::Epoch,
            max_malformed_fraction: 0.25,
        };
        assert!(matches!(
            parse_events(text.as_bytes(), &opts),
            Err(Error::TooManyMalformed { malformed: 2, .. })
        ));
    }

    #[test]
    fn timestamp_ties_keep_input_order() {
        let text = "u\t10\tfirst\nu\t5\tearly\nu\t10\tsecond\n";
        let opts = ParseOptions {
            format: LogFormat::Epoch,
            ..Default::default()
        };
        let log = parse_events(text.as_bytes(), &opts).unwrap();
        let items: Vec<_> = log.users["u"].iter().map(|e| e.item_id.clone().unwrap()).collect();
        assert_eq!(items, ["early", "first", "second"]);
    }

    #[test]
    fn sessionize_examples() {
        let cfg = SessionizeConfig::default();
        let (ds, _) = sessionize(&events("a", &[0.0, 600.0, 1200.0]), &cfg).unwrap();
        assert_eq!(sessions_of(&ds), vec![(0.0, 1200.0)]);

        let (ds, report) = sessionize(&events("a", &[0.0, 600.0, 600.0 + 1801.0]), &cfg).unwrap();
        // second session is a single event and is dropped
        assert_eq!(sessions_of(&ds), vec![(0.0, 600.0)]);
        assert_eq!(report.dropped_short, 1);

        let (ds, report) = sessionize(&events("a", &[0.0]), &cfg).unwrap();
        assert!(ds.is_empty());
        assert_eq!(report.dropped_short, 1);
        assert_eq!(report.users_without_sessions, 1);
    }

    #[test]
    fn gap_of_exactly_threshold_stays_in_session() {
        let cfg = SessionizeConfig::default();
        let (ds, _) = sessionize(&events("a", &[0.0, 1800.0, 3600.0]), &cfg).unwrap();
        assert_eq!(sessions_of(&ds), vec![(0.0, 3600.0)]);
    }

    #[test]
    fn unsorted_events_are_rejected() {
        let cfg = SessionizeConfig::default();
        assert!(sessionize(&events("a", &[10.0, 0.0]), &cfg).is_err());
    }

    fn one_user(n: usize) -> SessionDataset {
        SessionDataset::from_sessions((0..n).map(|i| Session::new("a", i as f64 * 10_000.0, 100.0, i + 1)))
    }

    #[test]
    fn split_single_user_eight_one_one() {
        let (split, report) = chronological_split(&one_user(10), SplitFractions::default()).unwrap();
        assert_eq!(
            (
                split.train.n_sessions(),
                split.valid.n_sessions(),
                split.test.n_sessions()
            ),
            (8, 1, 1)
        );
        assert_eq!(report.removed_test + report.removed_valid, 0);
    }

    #[test]
    fn split_removes_users_unseen_in_training() {
        let mut sessions: Vec<Session> = (0..19).map(|i| Session::new("A", i as f64, 5.0, i + 1)).collect();
        sessions.push(Session::new("B", 18.5, 5.0, 1));
        let ds = SessionDataset::from_sessions(sessions);
        let (split, report) = chronological_split(&ds, SplitFractions::default()).unwrap();
        assert_eq!(report.removed_test, 1);
        assert!(!split.test.contains_user("B"));
        assert_eq!(split.test.n_sessions(), 1);
        assert_eq!(
            split.train.n_sessions() + split.valid.n_sessions() + split.test.n_sessions(),
            19
        );
    }

    #[test]
    fn degenerate_fractions_give_empty_split() {
        let f = SplitFractions {
            train: 1.0,
            valid: 0.0,
            test: 0.0,
        };
        let err = chronological_split(&one_user(10), f).unwrap_err();
        assert!(err.to_string().contains("empty split"));
        let bad = SplitFractions {
            train: 0.9,
            valid: 0.2,
            test: 0.1,
        };
        assert!(matches!(
            chronological_split(&one_user(10), bad),
            Err(Error::InvalidFractions(_))
        ));
    }

    #[test]
    fn split_ties_break_by_user_then_index() {
        let sessions = vec![
            Session::new("b", 0.0, 2.0, 1),
            Session::new("a", 0.0, 2.0, 1),
            Session::new("a", 5.0, 2.0, 2),
            Session::new("b", 5.0, 2.0, 2),
        ];
        let f = SplitFractions {
            train: 0.5,
            valid: 0.25,
            test: 0.25,
        };
        let (split, _) = chronological_split(&SessionDataset::from_sessions(sessions), f).unwrap();
        assert_eq!(split.valid.iter().next().unwrap().user_id, "a");
        assert_eq!(split.test.iter().next().unwrap().user_id, "b");
    }

    #[test]
    fn summary_examples() {
        let e = std::f64::consts::E;
        let constant = SessionDataset::from_sessions((0..3).map(|i| Session::new("u", i as f64, e, i + 1)));
        let s = summarize(&constant).unwrap();
        assert_eq!((s.log.q25, s.log.median, s.log.mean, s.log.q75), (1.0, 1.0, 1.0, 1.0));

        let two = SessionDataset::from_sessions([Session::new("u", 0.0, 1.0, 1), Session::new("u", 9.0, e, 2)]);
        let s = summarize(&two).unwrap();
        assert_eq!(s.log.median, 0.5);
        assert_eq!(s.log.q25, 0.25);
        assert!(summarize(&SessionDataset::default()).is_err());
    }

    #[test]
    fn sessions_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = one_user(4);
        let path = dir.path().join("s.csv");
        write_sessions(&path, ds.iter()).unwrap();
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("user_id,start_time,raw_length_s,log_length,session_index\n"));
        let back = read_sessions(&path).unwrap();
        assert_eq!(
            back.iter().cloned().collect::<Vec<_>>(),
            ds.iter().cloned().collect::<Vec<_>>()
        );
    }
}
