//! Study datasets: loading, validation, feature alignment, subsampling and
//! pooling of studies.
//!
//! Study files are comma-separated UTF-8 with a header row. The first column
//! is `outcome` for binary or continuous outcomes; survival studies start
//! with two columns `time,event`. Every remaining column is a feature.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Binary,
    Continuous,
    Survival,
}

impl std::str::FromStr for OutcomeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(OutcomeKind::Binary),
            "continuous" => Ok(OutcomeKind::Continuous),
            "survival" => Ok(OutcomeKind::Survival),
            other => Err(Error::InvalidArgument(format!("unknown outcome kind `{other}`"))),
        }
    }
}

/// Outcome vector of one study. Binary outcomes are stored as 0.0/1.0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Binary(Vec<f64>),
    Continuous(Vec<f64>),
    Survival { time: Vec<f64>, event: Vec<bool> },
}

impl Outcome {
    pub fn kind(&self) -> OutcomeKind {
        match self {
            Outcome::Binary(_) => OutcomeKind::Binary,
            Outcome::Continuous(_) => OutcomeKind::Continuous,
            Outcome::Survival { .. } => OutcomeKind::Survival,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Outcome::Binary(y) | Outcome::Continuous(y) => y.len(),
            Outcome::Survival { time, .. } => time.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Response values for regression learners; `None` for survival outcomes.
    pub fn response(&self) -> Option<&[f64]> {
        match self {
            Outcome::Binary(y) | Outcome::Continuous(y) => Some(y),
            Outcome::Survival { .. } => None,
        }
    }

    pub fn select(&self, rows: &[usize]) -> Outcome {
        let pick = |v: &[f64]| rows.iter().map(|&i| v[i]).collect::<Vec<_>>();
        match self {
            Outcome::Binary(y) => Outcome::Binary(pick(y)),
            Outcome::Continuous(y) => Outcome::Continuous(pick(y)),
            Outcome::Survival { time, event } => Outcome::Survival {
                time: pick(time),
                event: rows.iter().map(|&i| event[i]).collect(),
            },
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Outcome::Binary(y) => {
                if let Some(bad) = y.iter().find(|&&v| v != 0.0 && v != 1.0) {
                    return Err(Error::InvalidData(format!("binary outcome value {bad} is not 0 or 1")));
                }
            }
            Outcome::Continuous(y) => {
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidData("non-finite continuous outcome".into()));
                }
            }
            Outcome::Survival { time, event } => {
                if time.len() != event.len() {
                    return Err(Error::InvalidData("survival time/event lengths differ".into()));
                }
                if let Some(bad) = time.iter().find(|&&t| !(t.is_finite() && t > 0.0)) {
                    return Err(Error::InvalidData(format!("survival time {bad} is not strictly positive")));
                }
            }
        }
        Ok(())
    }

    fn concat(parts: &[&Outcome]) -> Result<Outcome> {
        let kind = parts[0].kind();
        if parts.iter().any(|o| o.kind() != kind) {
            return Err(Error::OutcomeType("studies in the set have different outcome kinds".into()));
        }
        let flat = |f: &dyn Fn(&Outcome) -> &[f64]| parts.iter().flat_map(|o| f(o).iter().copied()).collect::<Vec<_>>();
        Ok(match kind {
            OutcomeKind::Binary => Outcome::Binary(flat(&|o| o.response().unwrap())),
            OutcomeKind::Continuous => Outcome::Continuous(flat(&|o| o.response().unwrap())),
            OutcomeKind::Survival => {
                let mut time = Vec::new();
                let mut event = Vec::new();
                for o in parts {
                    if let Outcome::Survival { time: t, event: e } = o {
                        time.extend_from_slice(t);
                        event.extend_from_slice(e);
                    }
                }
                Outcome::Survival { time, event }
            }
        })
    }
}

/// One study: `n` rows of `p` features plus an outcome per row.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyDataset {
    id: String,
    features: DMatrix<f64>,
    outcome: Outcome,
    feature_names: Vec<String>,
}

impl StudyDataset {
    pub fn new(
        id: impl Into<String>,
        features: DMatrix<f64>,
        outcome: Outcome,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        let id = id.into();
        let (n, p) = features.shape();
        if n == 0 {
            return Err(Error::InvalidData(format!("study {id} has no rows")));
        }
        if outcome.len() != n {
            return Err(Error::InvalidData(format!(
                "study {id}: {} outcomes for {n} feature rows",
                outcome.len()
            )));
        }
        if feature_names.len() != p {
            return Err(Error::InvalidData(format!(
                "study {id}: {} feature names for {p} columns",
                feature_names.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("study {id} has non-finite feature values")));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = feature_names.iter().find(|name| !seen.insert(name.as_str())) {
            return Err(Error::InvalidData(format!("study {id}: duplicate feature name `{dup}`")));
        }
        outcome.validate().map_err(|e| Error::InvalidData(format!("study {id}: {e}")))?;
        Ok(StudyDataset { id, features, outcome, feature_names })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn p(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn outcome(&self) -> &Outcome {
        &self.outcome
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// Rows `rows` (repeats allowed) as a new study with id `id`.
    pub fn select_rows(&self, rows: &[usize], id: impl Into<String>) -> StudyDataset {
        StudyDataset {
            id: id.into(),
            features: self.features.select_rows(rows),
            outcome: self.outcome.select(rows),
            feature_names: self.feature_names.clone(),
        }
    }

    fn select_columns(&self, cols: &[usize]) -> StudyDataset {
        StudyDataset {
            id: self.id.clone(),
            features: self.features.select_columns(cols),
            outcome: self.outcome.clone(),
            feature_names: cols.iter().map(|&c| self.feature_names[c].clone()).collect(),
        }
    }
}

/// An ordered collection of at least two studies with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyCollection {
    studies: Vec<StudyDataset>,
    shared_features: Option<Vec<String>>,
}

impl StudyCollection {
    pub fn new(studies: Vec<StudyDataset>) -> Result<Self> {
        if studies.len() < 2 {
            return Err(Error::Size(format!("a collection needs at least 2 studies, got {}", studies.len())));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = studies.iter().find(|s| !seen.insert(s.id())) {
            return Err(Error::InvalidData(format!("duplicate study id `{}`", dup.id())));
        }
        let first = studies[0].feature_names();
        let shared_features = studies
            .iter()
            .all(|s| s.feature_names() == first)
            .then(|| first.to_vec());
        Ok(StudyCollection { studies, shared_features })
    }

    pub fn studies(&self) -> &[StudyDataset] {
        &self.studies
    }

    pub fn len(&self) -> usize {
        self.studies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.studies.is_empty()
    }

    pub fn study(&self, index: usize) -> &StudyDataset {
        &self.studies[index]
    }

    pub fn ids(&self) -> Vec<String> {
        self.studies.iter().map(|s| s.id.clone()).collect()
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.studies
            .iter()
            .position(|s| s.id == id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown study id `{id}`")))
    }

    /// The common feature list, present once every study has identical names.
    pub fn shared_features(&self) -> Option<&[String]> {
        self.shared_features.as_deref()
    }

    pub fn is_aligned(&self) -> bool {
        self.shared_features.is_some()
    }

    pub fn outcome_kind(&self) -> Result<OutcomeKind> {
        let kind = self.studies[0].outcome().kind();
        if self.studies.iter().any(|s| s.outcome().kind() != kind) {
            return Err(Error::OutcomeType("studies have different outcome kinds".into()));
        }
        Ok(kind)
    }

    /// Sub-collection of the given study indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<StudyCollection> {
        StudyCollection::new(indices.iter().map(|&i| self.studies[i].clone()).collect())
    }

    /// Replace the studies, keeping ids and feature names. Used by resampling.
    pub fn with_studies(&self, studies: Vec<StudyDataset>) -> StudyCollection {
        debug_assert_eq!(studies.len(), self.studies.len());
        StudyCollection { studies, shared_features: self.shared_features.clone() }
    }
}

fn load_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Load { file: path.display().to_string(), line, message: message.into() }
}

fn parse_cell(path: &Path, line: usize, column: &str, cell: &str) -> Result<f64> {
    let value: f64 = cell
        .trim()
        .parse()
        .map_err(|_| load_error(path, line, format!("column `{column}`: `{cell}` is not a number")))?;
    if !value.is_finite() {
        return Err(load_error(path, line, format!("column `{column}`: non-finite value `{cell}`")));
    }
    Ok(value)
}

/// Read one study file. The study id is the file stem.
pub fn load_study(path: &Path, kind: OutcomeKind) -> Result<StudyDataset> {
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| load_error(path, 0, "path has no file name"))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| load_error(path, 0, e.to_string()))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| load_error(path, 1, e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    let lead = match kind {
        OutcomeKind::Survival => {
            if header.len() < 2 || header[0] != "time" || header[1] != "event" {
                return Err(load_error(path, 1, "missing survival columns `time,event`"));
            }
            2
        }
        _ => {
            if header.first().map(String::as_str) != Some("outcome") {
                return Err(load_error(path, 1, "missing outcome column `outcome`"));
            }
            1
        }
    };
    let names = header[lead..].to_vec();
    let p = names.len();

    let mut values = Vec::new();
    let mut response = Vec::new();
    let mut events = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| load_error(path, line, e.to_string()))?;
        if record.len() != header.len() {
            return Err(load_error(
                path,
                line,
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        response.push(parse_cell(path, line, &header[0], &record[0])?);
        if kind == OutcomeKind::Survival {
            let e = parse_cell(path, line, "event", &record[1])?;
            if e != 0.0 && e != 1.0 {
                return Err(load_error(path, line, format!("event indicator `{}` is not 0 or 1", &record[1])));
            }
            events.push(e == 1.0);
        }
        for (c, cell) in record.iter().skip(lead).enumerate() {
            values.push(parse_cell(path, line, &names[c], cell)?);
        }
    }
    let n = response.len();
    if n == 0 {
        return Err(load_error(path, 2, "no data rows"));
    }
    let outcome = match kind {
        OutcomeKind::Binary => Outcome::Binary(response),
        OutcomeKind::Continuous => Outcome::Continuous(response),
        OutcomeKind::Survival => Outcome::Survival { time: response, event: events },
    };
    let features = DMatrix::from_row_slice(n, p, &values);
    StudyDataset::new(id, features, outcome, names).map_err(|e| load_error(path, 0, e.to_string()))
}

/// Load every file (concurrently); studies keep the order of `paths`.
pub fn load_studies<P: AsRef<Path> + Sync>(paths: &[P], kind: OutcomeKind) -> Result<StudyCollection> {
    let studies = paths
        .par_iter()
        .map(|p| load_study(p.as_ref(), kind))
        .collect::<Result<Vec<_>>>()?;
    let mut seen = HashSet::new();
    for (study, path) in studies.iter().zip(paths) {
        if !seen.insert(study.id().to_string()) {
            return Err(load_error(path.as_ref(), 0, format!("duplicate study id `{}`", study.id())));
        }
    }
    StudyCollection::new(studies)
}

/// Write a study in the documented CSV layout.
pub fn write_study(study: &StudyDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    let mut header: Vec<String> = match study.outcome() {
        Outcome::Survival { .. } => vec!["time".into(), "event".into()],
        _ => vec!["outcome".into()],
    };
    header.extend(study.feature_names().iter().cloned());
    w.write_record(&header).map_err(|e| Error::Io(e.into()))?;
    for i in 0..study.n() {
        let mut rec: Vec<String> = match study.outcome() {
            Outcome::Binary(y) | Outcome::Continuous(y) => vec![format_value(y[i])],
            Outcome::Survival { time, event } => {
                vec![format_value(time[i]), if event[i] { "1".into() } else { "0".into() }]
            }
        };
        rec.extend(study.features().row(i).iter().map(|&v| format_value(v)));
        w.write_record(&rec).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

fn format_value(v: f64) -> String {
    // Shortest representation that round-trips exactly.
    format!("{v:?}")
}

/// Restrict every study to the features present in all studies, in the
/// order of the first study. Matching is exact and case-sensitive.
pub fn align_features(collection: &StudyCollection) -> Result<StudyCollection> {
    let sets: Vec<HashSet<&str>> = collection
        .studies
        .iter()
        .map(|s| s.feature_names.iter().map(String::as_str).collect())
        .collect();
    let shared: Vec<String> = collection.studies[0]
        .feature_names
        .iter()
        .filter(|name| sets.iter().all(|set| set.contains(name.as_str())))
        .cloned()
        .collect();
    if shared.is_empty() {
        let counts = collection
            .studies
            .iter()
            .map(|s| format!("{}: {}", s.id, s.p()))
            .collect::<Vec<_>>()
            .join(", ");
        return Err(Error::Alignment(format!("no feature is shared by all studies (feature counts {counts})")));
    }
    let studies = collection
        .studies
        .iter()
        .map(|s| {
            let cols: Vec<usize> = shared
                .iter()
                .map(|name| s.feature_names.iter().position(|f| f == name).unwrap())
                .collect();
            s.select_columns(&cols)
        })
        .collect();
    Ok(StudyCollection { studies, shared_features: Some(shared) })
}

/// `j` distinct rows drawn uniformly without replacement, in draw order.
pub fn subsample<R: Rng + ?Sized>(study: &StudyDataset, j: usize, rng: &mut R) -> Result<StudyDataset> {
    if j == 0 || j > study.n() {
        return Err(Error::Size(format!("cannot draw {j} rows from study {} with {} rows", study.id, study.n())));
    }
    let rows = rand::seq::index::sample(rng, study.n(), j).into_vec();
    Ok(study.select_rows(&rows, study.id.clone()))
}

/// Effective member indices of `members` once `exclude` is removed, in
/// collection order and without duplicates.
pub fn effective_members(members: &[usize], exclude: Option<usize>) -> Vec<usize> {
    let mut out: Vec<usize> = members.iter().copied().filter(|&m| Some(m) != exclude).collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Row-concatenation of studies `members \ {exclude}` (indices), in
/// collection order.
pub fn combine_indices(
    collection: &StudyCollection,
    members: &[usize],
    exclude: Option<usize>,
) -> Result<StudyDataset> {
    if let Some(&bad) = members.iter().chain(exclude.iter()).find(|&&i| i >= collection.len()) {
        return Err(Error::InvalidArgument(format!("study index {bad} out of range")));
    }
    let effective = effective_members(members, exclude);
    if effective.is_empty() {
        return Err(Error::DegenerateSet(
            "the training set is empty once the validation study is removed".into(),
        ));
    }
    let parts: Vec<&StudyDataset> = effective.iter().map(|&i| &collection.studies[i]).collect();
    if effective.len() == 1 {
        return Ok(parts[0].clone());
    }
    let p = parts[0].p();
    if parts.iter().any(|s| s.feature_names != parts[0].feature_names) {
        return Err(Error::Alignment("studies must be aligned before they are combined".into()));
    }
    let n: usize = parts.iter().map(|s| s.n()).sum();
    let outcome = Outcome::concat(&parts.iter().map(|s| &s.outcome).collect::<Vec<_>>())?;
    let mut features = DMatrix::zeros(n, p);
    let mut offset = 0;
    for s in &parts {
        features.view_mut((offset, 0), (s.n(), p)).copy_from(&s.features);
        offset += s.n();
    }
    let id = parts.iter().map(|s| s.id.as_str()).collect::<Vec<_>>().join("+");
    Ok(StudyDataset { id, features, outcome, feature_names: parts[0].feature_names.clone() })
}

/// Pool the studies named in `members`, leaving out `exclude` if given.
pub fn combine(collection: &StudyCollection, members: &[&str], exclude: Option<&str>) -> Result<StudyDataset> {
    if members.is_empty() {
        return Err(Error::DegenerateSet("empty study set".into()));
    }
    let idx = members.iter().map(|id| collection.index_of(id)).collect::<Result<Vec<_>>>()?;
    let ex = exclude.map(|id| collection.index_of(id)).transpose()?;
    combine_indices(collection, &idx, ex)
}

/// Paths of `*.csv` files in `dir`, sorted by name.
pub fn csv_files_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    paths.sort();
    Ok(paths)
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn combine_excludes_validation_study(n in prop::collection::vec(1usize..5, 3..5), ex in 0usize..3) {
            let studies: Vec<_> = n.iter().enumerate().map(|(s, &rows)| {
                // feature value encodes the originating study
                StudyDataset::new(
                    format!("s{s}"),
                    DMatrix::from_element(rows, 1, s as f64),
                    Outcome::Continuous(vec![0.0; rows]),
                    vec!["x".into()],
                ).unwrap()
            }).collect();
            let c = StudyCollection::new(studies).unwrap();
            let all: Vec<usize> = (0..c.len()).collect();
            let pooled = combine_indices(&c, &all, Some(ex)).unwrap();
            prop_assert!(pooled.features().iter().all(|&v| v != ex as f64));
            let expected: usize = n.iter().enumerate().filter(|(i, _)| *i != ex).map(|(_, r)| r).sum();
            prop_assert_eq!(pooled.n(), expected);
        }
    }
}
