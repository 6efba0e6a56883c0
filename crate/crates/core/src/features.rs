//! Per-session covariates and their standardization into a design matrix.
//!
//! Every statistic that is not a property of the session's own past (user
//! average duration, imputation medians) is computed from the training part
//! only and reused unchanged for validation and test rows.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::path::Path;

use chrono::{DateTime, Timelike};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Session, SessionDataset, SplitDataset};
use crate::error::{Error, Result};
use crate::stats::{mean, median};

pub const ABSENCE_TIME: &str = "absence_time";
pub const PREVIOUS_DURATION: &str = "previous_duration";
pub const AVG_USER_DURATION: &str = "avg_user_duration";
pub const LOG_ABSENCE_TIME: &str = "log_absence_time";
pub const LOG_PREVIOUS_DURATION: &str = "log_previous_duration";
pub const LOG_AVG_USER_DURATION: &str = "log_avg_user_duration";
pub const SESSION_TIME: &str = "session_time";

/// Columns derivable from timestamps alone.
pub const DERIVED_COLUMNS: [&str; 7] = [
    ABSENCE_TIME,
    PREVIOUS_DURATION,
    AVG_USER_DURATION,
    LOG_ABSENCE_TIME,
    LOG_PREVIOUS_DURATION,
    LOG_AVG_USER_DURATION,
    SESSION_TIME,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Requested columns, in output order.
    pub columns: Vec<String>,
    /// Optional user-static categorical attributes (gender, device, ...),
    /// keyed by user then attribute name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub user_attributes: BTreeMap<String, BTreeMap<String, String>>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            columns: DERIVED_COLUMNS.iter().map(|s| s.to_string()).collect(),
            user_attributes: BTreeMap::new(),
        }
    }
}

impl FeatureConfig {
    /// Reads `user_id,attr1,attr2,...` rows and appends every attribute column
    /// to the requested columns.
    pub fn with_attribute_file(mut self, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = csv::Reader::from_reader(file);
        let headers = r.headers()?.clone();
        for rec in r.records() {
            let rec = rec?;
            let user = rec.get(0).unwrap_or_default().to_owned();
            let attrs = self.user_attributes.entry(user).or_default();
            for (name, value) in headers.iter().zip(rec.iter()).skip(1) {
                if !value.is_empty() {
                    attrs.insert(name.to_owned(), value.to_owned());
                }
            }
        }
        for name in headers.iter().skip(1) {
            if !self.columns.iter().any(|c| c == name) {
                self.columns.push(name.to_owned());
            }
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldKind {
    Numeric,
    Categorical { levels: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    /// Value depends on statistics computed from the training part.
    pub train_statistic: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub fields: Vec<FieldSpec>,
}

impl FeatureSchema {
    /// Hash over field names and kinds; level sets are deliberately excluded
    /// so tables built on different row subsets stay compatible.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for f in &self.fields {
            h.update(f.name.as_bytes());
            h.update(match f.kind {
                FieldKind::Numeric => b":n;",
                FieldKind::Categorical { .. } => b":c;",
            });
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RowKey {
    pub user_id: String,
    pub session_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Numeric(Vec<f64>),
    Categorical(Vec<String>),
}

/// Raw (unstandardized) feature values, one row per session.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub schema: FeatureSchema,
    pub keys: Vec<RowKey>,
    pub columns: Vec<Column>,
}

impl FeatureTable {
    pub fn n_rows(&self) -> usize {
        self.keys.len()
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.schema
            .fields
            .iter()
            .position(|f| f.name == name)
            .map(|i| &self.columns[i])
    }

    pub fn numeric(&self, name: &str) -> Option<&[f64]> {
        match self.column(name)? {
            Column::Numeric(v) => Some(v),
            Column::Categorical(_) => None,
        }
    }

    /// Row-wise concatenation; categorical level sets are merged.
    pub fn concat(&self, other: &FeatureTable) -> Result<FeatureTable> {
        if self.schema.hash() != other.schema.hash() {
            return Err(Error::SchemaMismatch(
                "cannot concatenate tables with different fields".into(),
            ));
        }
        let columns: Vec<Column> = self
            .columns
            .iter()
            .zip(&other.columns)
            .map(|(a, b)| match (a, b) {
                (Column::Numeric(a), Column::Numeric(b)) => Column::Numeric([&a[..], &b[..]].concat()),
                (Column::Categorical(a), Column::Categorical(b)) => Column::Categorical([&a[..], &b[..]].concat()),
                _ => unreachable!("schema hash covers column kinds"),
            })
            .collect();
        let fields = self
            .schema
            .fields
            .iter()
            .zip(&columns)
            .map(|(f, c)| FieldSpec {
                kind: match c {
                    Column::Numeric(_) => FieldKind::Numeric,
                    Column::Categorical(v) => FieldKind::Categorical { levels: levels_of(v) },
                },
                ..f.clone()
            })
            .collect();
        Ok(FeatureTable {
            schema: FeatureSchema { fields },
            keys: [&self.keys[..], &other.keys[..]].concat(),
            columns,
        })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let mut header = vec!["user_id".to_owned(), "session_index".to_owned()];
        header.extend(self.schema.fields.iter().map(|f| f.name.clone()));
        w.write_record(&header)?;
        for (r, key) in self.keys.iter().enumerate() {
            let mut rec = vec![key.user_id.clone(), key.session_index.to_string()];
            rec.extend(self.columns.iter().map(|c| match c {
                Column::Numeric(v) => v[r].to_string(),
                Column::Categorical(v) => v[r].clone(),
            }));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn levels_of(values: &[String]) -> Vec<String> {
    values.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect()
}

#[derive(Debug, Clone)]
pub struct SplitFeatures {
    pub train: FeatureTable,
    pub valid: FeatureTable,
    pub test: FeatureTable,
}

/// Morning if the UTC clock hour of `start_time` is before noon.
pub fn session_time_of_day(start_time: f64) -> &'static str {
    let hour = DateTime::from_timestamp(start_time.floor() as i64, 0)
        .map(|dt| dt.hour())
        .unwrap_or(0);
    if hour < 12 {
        "morning"
    } else {
        "afternoon"
    }
}

#[derive(Debug, Clone, Copy)]
struct History {
    absence: Option<f64>,
    previous: Option<f64>,
}

/// Builds the feature tables of all three parts of a split.
pub fn build_features(split: &SplitDataset, cfg: &FeatureConfig) -> Result<SplitFeatures> {
    if split.train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    let mut seen = BTreeSet::new();
    for name in &cfg.columns {
        if !seen.insert(name.as_str()) {
            return Err(Error::InvalidArgument(format!("duplicate feature column `{name}`")));
        }
        let derivable =
            DERIVED_COLUMNS.contains(&name.as_str()) || cfg.user_attributes.values().any(|a| a.contains_key(name));
        if !derivable {
            return Err(Error::MissingFeature(name.clone()));
        }
    }

    // Session history over the full timeline; predecessors in earlier parts are
    // past information and may be used.
    let everything = split.train.union(&split.valid).union(&split.test);
    let mut history: HashMap<(&str, usize), History> = HashMap::new();
    for user in everything.users() {
        let mut prev: Option<&Session> = None;
        for s in &user.sessions {
            let h = History {
                absence: prev.map(|p| (s.start_time - p.end_time()).max(0.0)),
                previous: prev.map(|p| p.raw_length),
            };
            history.insert((user.user_id.as_str(), s.session_index), h);
            prev = Some(s);
        }
    }

    let train_hist: Vec<History> = split
        .train
        .iter()
        .map(|s| history[&(s.user_id.as_str(), s.session_index)])
        .collect();
    let absence_fill = median(&train_hist.iter().filter_map(|h| h.absence).collect::<Vec<_>>()).unwrap_or(0.0);
    let previous_fill = median(&train_hist.iter().filter_map(|h| h.previous).collect::<Vec<_>>()).unwrap_or(0.0);
    let user_avg: HashMap<&str, f64> = split
        .train
        .users()
        .iter()
        .map(|u| {
            let lens: Vec<f64> = u.sessions.iter().map(|s| s.raw_length).collect();
            (u.user_id.as_str(), mean(&lens).unwrap_or(0.0))
        })
        .collect();
    let global_avg = mean(&split.train.iter().map(|s| s.raw_length).collect::<Vec<_>>()).unwrap_or(0.0);

    let ctx = BuildContext {
        cfg,
        history: &history,
        absence_fill,
        previous_fill,
        user_avg: &user_avg,
        global_avg,
    };
    let train = ctx.table(&split.train, None);
    let train_levels: Vec<Option<Vec<String>>> = train
        .schema
        .fields
        .iter()
        .map(|f| match &f.kind {
            FieldKind::Categorical { levels } => Some(levels.clone()),
            FieldKind::Numeric => None,
        })
        .collect();
    Ok(SplitFeatures {
        valid: ctx.table(&split.valid, Some(&train_levels)),
        test: ctx.table(&split.test, Some(&train_levels)),
        train,
    })
}

struct BuildContext<'a> {
    cfg: &'a FeatureConfig,
    history: &'a HashMap<(&'a str, usize), History>,
    absence_fill: f64,
    previous_fill: f64,
    user_avg: &'a HashMap<&'a str, f64>,
    global_avg: f64,
}

impl BuildContext<'_> {
    fn table(&self, ds: &SessionDataset, levels: Option<&[Option<Vec<String>>]>) -> FeatureTable {
        let rows: Vec<&Session> = ds.iter().collect();
        let keys = rows
            .iter()
            .map(|s| RowKey {
                user_id: s.user_id.clone(),
                session_index: s.session_index,
            })
            .collect();
        let mut fields = Vec::new();
        let mut columns = Vec::new();
        for (i, name) in self.cfg.columns.iter().enumerate() {
            let numeric = |f: &dyn Fn(&Session) -> f64| Column::Numeric(rows.iter().map(|s| f(s)).collect());
            let hist = |s: &Session| self.history[&(s.user_id.as_str(), s.session_index)];
            let absence = |s: &Session| hist(s).absence.unwrap_or(self.absence_fill);
            let previous = |s: &Session| hist(s).previous.unwrap_or(self.previous_fill);
            let avg = |s: &Session| {
                self.user_avg
                    .get(s.user_id.as_str())
                    .copied()
                    .unwrap_or(self.global_avg)
            };
            let (col, train_statistic) = match name.as_str() {
                ABSENCE_TIME => (numeric(&absence), true),
                PREVIOUS_DURATION => (numeric(&previous), true),
                AVG_USER_DURATION => (numeric(&avg), true),
                LOG_ABSENCE_TIME => (numeric(&|s| absence(s).ln_1p()), true),
                LOG_PREVIOUS_DURATION => (numeric(&|s| previous(s).ln_1p()), true),
                LOG_AVG_USER_DURATION => (numeric(&|s| avg(s).ln_1p()), true),
                SESSION_TIME => (
                    Column::Categorical(
                        rows.iter()
                            .map(|s| session_time_of_day(s.start_time).to_owned())
                            .collect(),
                    ),
                    false,
                ),
                attr => (
                    Column::Categorical(
                        rows.iter()
                            .map(|s| {
                                self.cfg
                                    .user_attributes
                                    .get(&s.user_id)
                                    .and_then(|a| a.get(attr))
                                    .cloned()
                                    .unwrap_or_else(|| "NA".to_owned())
                            })
                            .collect(),
                    ),
                    false,
                ),
            };
            let kind = match &col {
                Column::Numeric(_) => FieldKind::Numeric,
                Column::Categorical(v) => FieldKind::Categorical {
                    levels: levels
                        .and_then(|l| l[i].clone())
                        .filter(|l| !l.is_empty())
                        .unwrap_or_else(|| levels_of(v)),
                },
            };
            fields.push(FieldSpec {
                name: name.clone(),
                kind,
                train_statistic,
            });
            columns.push(col);
        }
        FeatureTable {
            schema: FeatureSchema { fields },
            keys,
            columns,
        }
    }
}

/// One column of the encoded matrix: a numeric field or one indicator of a
/// categorical level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedColumn {
    pub name: String,
    pub field: usize,
    pub level: Option<String>,
}

/// Centering and unit-norm scaling constants learned from a training table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub schema_hash: String,
    pub field_names: Vec<String>,
    pub columns: Vec<EncodedColumn>,
    pub means: Vec<f64>,
    pub norms: Vec<f64>,
    pub dropped: Vec<String>,
}

/// Dense standardized covariates with their row and column labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub x: DMatrix<f64>,
    pub keys: Vec<RowKey>,
    pub columns: Vec<String>,
}

impl DesignMatrix {
    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.x.ncols()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        let mut header = vec!["user_id".to_owned(), "session_index".to_owned()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header)?;
        for (r, key) in self.keys.iter().enumerate() {
            let mut rec = vec![key.user_id.clone(), key.session_index.to_string()];
            rec.extend(self.x.row(r).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Candidate encoded columns: numeric fields as-is, categoricals one-hot with
/// the first (sorted) level as the dropped reference.
fn candidate_columns(table: &FeatureTable) -> Vec<EncodedColumn> {
    let mut out = Vec::new();
    for (i, (field, col)) in table.schema.fields.iter().zip(&table.columns).enumerate() {
        match col {
            Column::Numeric(_) => out.push(EncodedColumn {
                name: field.name.clone(),
                field: i,
                level: None,
            }),
            Column::Categorical(values) => {
                for level in levels_of(values).into_iter().skip(1) {
                    out.push(EncodedColumn {
                        name: format!("{}={}", field.name, level),
                        field: i,
                        level: Some(level),
                    });
                }
            }
        }
    }
    out
}

fn raw_values(table: &FeatureTable, col: &EncodedColumn) -> Vec<f64> {
    match (&table.columns[col.field], &col.level) {
        (Column::Numeric(v), _) => v.clone(),
        (Column::Categorical(v), Some(level)) => v.iter().map(|x| if x == level { 1.0 } else { 0.0 }).collect(),
        (Column::Categorical(_), None) => unreachable!("categorical columns always carry a level"),
    }
}

/// Learns per-column means and post-centering ℓ₂ norms; constant columns are
/// dropped.
pub fn fit_standardizer(table: &FeatureTable) -> Result<(Standardizer, DesignMatrix)> {
    if table.n_rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    let n = table.n_rows() as f64;
    let mut std = Standardizer {
        schema_hash: table.schema.hash(),
        field_names: table.schema.fields.iter().map(|f| f.name.clone()).collect(),
        columns: Vec::new(),
        means: Vec::new(),
        norms: Vec::new(),
        dropped: Vec::new(),
    };
    for col in candidate_columns(table) {
        let v = raw_values(table, &col);
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("feature table"));
        }
        if v.iter().all(|&x| x == v[0]) {
            std.dropped.push(col.name);
            continue;
        }
        let m = v.iter().sum::<f64>() / n;
        let norm = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>().sqrt();
        std.columns.push(col);
        std.means.push(m);
        std.norms.push(norm);
    }
    if std.columns.is_empty() {
        return Err(Error::AllColumnsConstant);
    }
    let dm = apply_standardizer(&std, table)?;
    Ok((std, dm))
}

/// Applies fit-time constants to another table with the same fields. Unseen
/// categorical levels encode as all zeros.
pub fn apply_standardizer(std: &Standardizer, table: &FeatureTable) -> Result<DesignMatrix> {
    if table.schema.hash() != std.schema_hash {
        let got: Vec<&str> = table.schema.fields.iter().map(|f| f.name.as_str()).collect();
        return Err(Error::SchemaMismatch(format!(
            "expected fields {:?}, got {:?}",
            std.field_names, got
        )));
    }
    let (n, d) = (table.n_rows(), std.columns.len());
    let mut x = DMatrix::zeros(n, d);
    for (j, col) in std.columns.iter().enumerate() {
        for (r, v) in raw_values(table, col).into_iter().enumerate() {
            x[(r, j)] = (v - std.means[j]) / std.norms[j];
        }
    }
    Ok(DesignMatrix {
        x,
        keys: table.keys.clone(),
        columns: std.columns.iter().map(|c| c.name.clone()).collect(),
    })
}
