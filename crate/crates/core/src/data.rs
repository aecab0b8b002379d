//! Study data types, validation, and CSV ingestion.
//!
//! A subject carries its longitudinal tumor-burden measurements, the observed
//! progression (or censoring) time, the event indicator, and three covariate
//! rows: one for the change-point longitudinal model, one for the stable-group
//! longitudinal model, and one for the AFT event-time model. Covariates are
//! baseline-only, so each row is constant across a subject's visits.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DAYS_PER_YEAR: f64 = 365.25;

/// One longitudinal measurement row as it appears in the input file.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalRecord {
    pub subject_id: String,
    pub visit_time: f64,
    pub outcome: f64,
}

/// Latent group membership. Only censored subjects can be stable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupLabel {
    ChangePoint,
    Stable,
    Unknown,
}

impl GroupLabel {
    /// The label that is known from the observed data alone.
    pub fn observed(event_indicator: bool) -> Self {
        if event_indicator {
            GroupLabel::ChangePoint
        } else {
            GroupLabel::Unknown
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectData {
    pub subject_id: String,
    visit_times: Vec<f64>,
    outcomes: Vec<f64>,
    pub event_time: f64,
    pub event_indicator: bool,
    pub long_covariates: Vec<f64>,
    pub stable_covariates: Vec<f64>,
    pub tte_covariates: Vec<f64>,
}

impl SubjectData {
    /// Builds a validated subject. Visits must already be sorted.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        subject_id: impl Into<String>,
        visit_times: Vec<f64>,
        outcomes: Vec<f64>,
        event_time: f64,
        event_indicator: bool,
        long_covariates: Vec<f64>,
        stable_covariates: Vec<f64>,
        tte_covariates: Vec<f64>,
    ) -> Result<Self> {
        let subject_id = subject_id.into();
        let fail = |msg: String| Err(Error::validation(&subject_id, msg));
        if visit_times.is_empty() {
            return fail("at least one visit is required".into());
        }
        if visit_times.len() != outcomes.len() {
            return fail(format!(
                "{} visit times but {} outcomes",
                visit_times.len(),
                outcomes.len()
            ));
        }
        for (j, (&s, &y)) in visit_times.iter().zip(&outcomes).enumerate() {
            if !s.is_finite() || s < 0.0 {
                return fail(format!("visit {j} has invalid time {s}"));
            }
            if !y.is_finite() {
                return fail(format!("visit {j} has non-finite outcome"));
            }
        }
        if visit_times.windows(2).any(|w| w[1] <= w[0]) {
            return fail("visit times must be strictly increasing".into());
        }
        if !(event_time.is_finite() && event_time > 0.0) {
            return fail(format!("event time must be positive, got {event_time}"));
        }
        let last = *visit_times.last().unwrap();
        if last > event_time {
            return fail(format!(
                "last visit at {last} is after the observed event time {event_time}"
            ));
        }
        for (name, row) in [
            ("longitudinal", &long_covariates),
            ("stable", &stable_covariates),
            ("event-time", &tte_covariates),
        ] {
            if row.iter().any(|v| !v.is_finite()) {
                return fail(format!("non-finite {name} covariate"));
            }
        }
        Ok(Self {
            subject_id,
            visit_times,
            outcomes,
            event_time,
            event_indicator,
            long_covariates,
            stable_covariates,
            tte_covariates,
        })
    }

    pub fn visit_times(&self) -> &[f64] {
        &self.visit_times
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    pub fn n_visits(&self) -> usize {
        self.visit_times.len()
    }

    pub fn records(&self) -> impl Iterator<Item = LongitudinalRecord> + '_ {
        self.visit_times
            .iter()
            .zip(&self.outcomes)
            .map(|(&visit_time, &outcome)| LongitudinalRecord {
                subject_id: self.subject_id.clone(),
                visit_time,
                outcome,
            })
    }

    /// Log of the observed event (or censoring) time.
    pub fn log_event_time(&self) -> Result<f64> {
        log_event_time(self.event_time)
    }

    pub fn observed_label(&self) -> GroupLabel {
        GroupLabel::observed(self.event_indicator)
    }

    /// Same subject under a new identifier (used when resampling).
    pub fn relabeled(&self, subject_id: String) -> Self {
        Self {
            subject_id,
            ..self.clone()
        }
    }
}

pub fn log_event_time(event_time: f64) -> Result<f64> {
    if event_time > 0.0 {
        Ok(event_time.ln())
    } else {
        Err(Error::Domain(format!(
            "event time must be positive, got {event_time}"
        )))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyDataset {
    subjects: Vec<SubjectData>,
    total_obs: usize,
}

/// Sample means of the three covariate rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMeans {
    pub long: Vec<f64>,
    pub stable: Vec<f64>,
    pub tte: Vec<f64>,
}

impl StudyDataset {
    pub fn new(subjects: Vec<SubjectData>) -> Result<Self> {
        let first = subjects
            .first()
            .ok_or_else(|| Error::Dataset("no subjects".into()))?;
        let dims = (
            first.long_covariates.len(),
            first.stable_covariates.len(),
            first.tte_covariates.len(),
        );
        for s in &subjects {
            let d = (
                s.long_covariates.len(),
                s.stable_covariates.len(),
                s.tte_covariates.len(),
            );
            if d != dims {
                return Err(Error::validation(
                    &s.subject_id,
                    format!("covariate dimensions {d:?} differ from {dims:?}"),
                ));
            }
        }
        let total_obs = subjects.iter().map(SubjectData::n_visits).sum();
        Ok(Self {
            subjects,
            total_obs,
        })
    }

    pub fn subjects(&self) -> &[SubjectData] {
        &self.subjects
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn total_obs(&self) -> usize {
        self.total_obs
    }

    pub fn p_long(&self) -> usize {
        self.subjects[0].long_covariates.len()
    }

    pub fn p_stable(&self) -> usize {
        self.subjects[0].stable_covariates.len()
    }

    pub fn p_tte(&self) -> usize {
        self.subjects[0].tte_covariates.len()
    }

    pub fn n_events(&self) -> usize {
        self.subjects.iter().filter(|s| s.event_indicator).count()
    }

    pub fn design_means(&self) -> DesignMeans {
        let n = self.len() as f64;
        let mean = |pick: fn(&SubjectData) -> &Vec<f64>, p: usize| {
            let mut m = vec![0.0; p];
            for s in &self.subjects {
                for (acc, v) in m.iter_mut().zip(pick(s)) {
                    *acc += v;
                }
            }
            m.iter_mut().for_each(|v| *v /= n);
            m
        };
        DesignMeans {
            long: mean(|s| &s.long_covariates, self.p_long()),
            stable: mean(|s| &s.stable_covariates, self.p_stable()),
            tte: mean(|s| &s.tte_covariates, self.p_tte()),
        }
    }

    /// Writes the longitudinal and event CSV files plus a matching schema.
    pub fn write_csv(&self, long_path: &Path, event_path: &Path) -> Result<Schema> {
        write_arms_csv(&[(String::new(), self)], long_path, event_path)
    }
}

/// Writes several arms into one pair of files. With more than one arm, or a
/// named single arm, the event file gets an `arm` column. Subject ids must be
/// unique across arms.
pub fn write_arms_csv(arms: &[(String, &StudyDataset)], long_path: &Path, event_path: &Path) -> Result<Schema> {
    let first = arms.first().ok_or_else(|| Error::Dataset("no arms to write".into()))?.1;
    let mut schema = Schema::for_dims(first.p_long(), first.p_stable(), first.p_tte());
    if arms.len() > 1 || !arms[0].0.is_empty() {
        schema.arm = Some("arm".into());
    }
    if arms.iter().any(|(_, d)| (d.p_long(), d.p_stable(), d.p_tte()) != (first.p_long(), first.p_stable(), first.p_tte())) {
        return Err(Error::Dataset("arms have different covariate dimensions".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for (name, d) in arms {
        if let Some(s) = d.subjects().iter().find(|s| !seen.insert(s.subject_id.as_str())) {
            return Err(Error::Dataset(format!("subject id {} in arm '{name}' is already used by another arm", s.subject_id)));
        }
    }
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| Error::Io { path, source }
    };

    let mut long = csv::Writer::from_writer(File::create(long_path).map_err(io_err(long_path))?);
    let mut header = vec![
        schema.subject_id.clone(),
        schema.visit_time.clone(),
        schema.outcome.clone(),
    ];
    header.extend(schema.long_covariates.iter().cloned());
    header.extend(
        schema
            .stable_covariates
            .iter()
            .filter(|c| !schema.long_covariates.contains(c))
            .cloned(),
    );
    long.write_record(&header)?;
    let shared = schema.stable_covariates == schema.long_covariates;
    for s in arms.iter().flat_map(|(_, d)| d.subjects()) {
        for (t, y) in s.visit_times.iter().zip(&s.outcomes) {
            let mut row = vec![s.subject_id.clone(), fmt_f64(*t), fmt_f64(*y)];
            row.extend(s.long_covariates.iter().map(|v| fmt_f64(*v)));
            if !shared {
                row.extend(s.stable_covariates.iter().map(|v| fmt_f64(*v)));
            }
            long.write_record(&row)?;
        }
    }
    long.flush().map_err(io_err(long_path))?;

    let mut ev = csv::Writer::from_writer(File::create(event_path).map_err(io_err(event_path))?);
    let mut header = vec![
        schema.subject_id.clone(),
        schema.event_time.clone(),
        schema.event.clone(),
    ];
    header.extend(schema.tte_covariates.iter().cloned());
    header.extend(schema.arm.clone());
    ev.write_record(&header)?;
    for (arm, d) in arms {
        for s in d.subjects() {
            let mut row = vec![
                s.subject_id.clone(),
                fmt_f64(s.event_time),
                if s.event_indicator { "1" } else { "0" }.to_string(),
            ];
            row.extend(s.tte_covariates.iter().map(|v| fmt_f64(*v)));
            if schema.arm.is_some() {
                row.push(arm.clone());
            }
            ev.write_record(&row)?;
        }
    }
    ev.flush().map_err(io_err(event_path))?;
    Ok(schema)
}

/// Shortest representation that parses back to the identical f64.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Column roles for the longitudinal and event files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schema {
    pub subject_id: String,
    pub visit_time: String,
    pub outcome: String,
    pub long_covariates: Vec<String>,
    pub stable_covariates: Vec<String>,
    pub event_time: String,
    pub event: String,
    pub tte_covariates: Vec<String>,
    /// Optional treatment-arm column in the event file.
    pub arm: Option<String>,
    /// Times in the files are in days and are converted to years.
    pub days: bool,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            subject_id: "subject_id".into(),
            visit_time: "visit_time".into(),
            outcome: "y".into(),
            long_covariates: Vec::new(),
            stable_covariates: Vec::new(),
            event_time: "event_time".into(),
            event: "event".into(),
            tte_covariates: Vec::new(),
            arm: None,
            days: false,
        }
    }
}

impl Schema {
    pub fn for_dims(p_long: usize, p_stable: usize, p_tte: usize) -> Self {
        let long: Vec<String> = (1..=p_long).map(|j| format!("x{j}")).collect();
        let stable = if p_stable == p_long {
            long.clone()
        } else {
            (1..=p_stable).map(|j| format!("xs{j}")).collect()
        };
        Self {
            long_covariates: long,
            stable_covariates: stable,
            tte_covariates: (1..=p_tte).map(|j| format!("w{j}")).collect(),
            ..Self::default()
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
    }

    /// Fills empty covariate lists from the file headers: `x*` columns feed
    /// both longitudinal models, `w*` columns feed the event-time model.
    fn resolve(&self, long_header: &[String], event_header: &[String]) -> Self {
        let mut out = self.clone();
        if out.long_covariates.is_empty() {
            out.long_covariates = long_header
                .iter()
                .filter(|h| is_prefixed_index(h, "x"))
                .cloned()
                .collect();
        }
        if out.stable_covariates.is_empty() {
            out.stable_covariates = out.long_covariates.clone();
        }
        if out.tte_covariates.is_empty() {
            out.tte_covariates = event_header
                .iter()
                .filter(|h| is_prefixed_index(h, "w"))
                .cloned()
                .collect();
        }
        out
    }
}

fn is_prefixed_index(name: &str, prefix: &str) -> bool {
    name.strip_prefix(prefix)
        .is_some_and(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
}

fn column(header: &[String], name: &str, file: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Schema(format!("column '{name}' not found in {file}")))
}

fn parse_num(field: &str, file: &str, row: usize, col: &str) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
        file: file.to_string(),
        row,
        message: format!("column '{col}': cannot parse '{field}' as a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            file: file.to_string(),
            row,
            message: format!("column '{col}': non-finite value"),
        });
    }
    Ok(v)
}

struct EventRow {
    event_time: f64,
    event: bool,
    tte: Vec<f64>,
    arm: Option<String>,
}

struct LongRows {
    times: Vec<f64>,
    outcomes: Vec<f64>,
    long: Vec<f64>,
    stable: Vec<f64>,
}

/// Reads and validates both files. With an `arm` column configured the result
/// holds one dataset per arm (keyed by arm label); otherwise a single entry
/// keyed by the empty string.
pub fn ingest_by_arm(
    long_path: &Path,
    event_path: &Path,
    schema: &Schema,
) -> Result<BTreeMap<String, StudyDataset>> {
    let open = |path: &Path| {
        csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => Error::Io {
                path: path.to_path_buf(),
                source,
            },
            other => Error::Parse {
                file: path.display().to_string(),
                row: 0,
                message: format!("{other:?}"),
            },
        })
    };
    let long_name = long_path.display().to_string();
    let event_name = event_path.display().to_string();
    let mut long_rdr = open(long_path)?;
    let mut event_rdr = open(event_path)?;
    let long_header: Vec<String> = long_rdr.headers()?.iter().map(str::to_string).collect();
    let event_header: Vec<String> = event_rdr.headers()?.iter().map(str::to_string).collect();
    let schema = schema.resolve(&long_header, &event_header);
    let scale = if schema.days { 1.0 / DAYS_PER_YEAR } else { 1.0 };

    let e_id = column(&event_header, &schema.subject_id, &event_name)?;
    let e_time = column(&event_header, &schema.event_time, &event_name)?;
    let e_ev = column(&event_header, &schema.event, &event_name)?;
    let e_arm = schema
        .arm
        .as_deref()
        .map(|a| column(&event_header, a, &event_name))
        .transpose()?;
    let e_tte = schema
        .tte_covariates
        .iter()
        .map(|c| column(&event_header, c, &event_name))
        .collect::<Result<Vec<_>>>()?;

    let mut events: HashMap<String, EventRow> = HashMap::new();
    for (i, rec) in event_rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let id = rec[e_id].trim().to_string();
        let event_time = parse_num(&rec[e_time], &event_name, row, &schema.event_time)? * scale;
        let event = match rec[e_ev].trim() {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::Parse {
                    file: event_name.clone(),
                    row,
                    message: format!("event indicator must be 0 or 1, got '{other}'"),
                })
            }
        };
        let tte = e_tte
            .iter()
            .zip(&schema.tte_covariates)
            .map(|(&c, name)| parse_num(&rec[c], &event_name, row, name))
            .collect::<Result<Vec<_>>>()?;
        let arm = e_arm.map(|c| rec[c].trim().to_string());
        if events
            .insert(
                id.clone(),
                EventRow {
                    event_time,
                    event,
                    tte,
                    arm,
                },
            )
            .is_some()
        {
            return Err(Error::validation(&id, "duplicate row in event file"));
        }
    }

    let l_id = column(&long_header, &schema.subject_id, &long_name)?;
    let l_time = column(&long_header, &schema.visit_time, &long_name)?;
    let l_y = column(&long_header, &schema.outcome, &long_name)?;
    let l_long = schema
        .long_covariates
        .iter()
        .map(|c| column(&long_header, c, &long_name))
        .collect::<Result<Vec<_>>>()?;
    let l_stable = schema
        .stable_covariates
        .iter()
        .map(|c| column(&long_header, c, &long_name))
        .collect::<Result<Vec<_>>>()?;

    // Subjects keep the order of their first appearance.
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, LongRows> = HashMap::new();
    for (i, rec) in long_rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let id = rec[l_id].trim().to_string();
        let t = parse_num(&rec[l_time], &long_name, row, &schema.visit_time)? * scale;
        let y = parse_num(&rec[l_y], &long_name, row, &schema.outcome)?;
        let read_row = |cols: &[usize], names: &[String]| {
            cols.iter()
                .zip(names)
                .map(|(&c, name)| parse_num(&rec[c], &long_name, row, name))
                .collect::<Result<Vec<_>>>()
        };
        let long = read_row(&l_long, &schema.long_covariates)?;
        let stable = read_row(&l_stable, &schema.stable_covariates)?;
        match rows.get_mut(&id) {
            Some(entry) => {
                if entry.long != long || entry.stable != stable {
                    return Err(Error::validation(
                        &id,
                        format!(
                            "covariates change between visits (row {row}); only baseline covariates are supported"
                        ),
                    ));
                }
                entry.times.push(t);
                entry.outcomes.push(y);
            }
            None => {
                order.push(id.clone());
                rows.insert(
                    id,
                    LongRows {
                        times: vec![t],
                        outcomes: vec![y],
                        long,
                        stable,
                    },
                );
            }
        }
    }

    let mut by_arm: BTreeMap<String, Vec<SubjectData>> = BTreeMap::new();
    for id in order {
        let r = rows.remove(&id).unwrap();
        let ev = events
            .get(&id)
            .ok_or_else(|| Error::Linkage { subject: id.clone() })?;
        let mut idx: Vec<usize> = (0..r.times.len()).collect();
        idx.sort_by(|&a, &b| r.times[a].total_cmp(&r.times[b]));
        let times = idx.iter().map(|&k| r.times[k]).collect();
        let outcomes = idx.iter().map(|&k| r.outcomes[k]).collect();
        let subject = SubjectData::new(
            id,
            times,
            outcomes,
            ev.event_time,
            ev.event,
            r.long,
            r.stable,
            ev.tte.clone(),
        )?;
        by_arm
            .entry(ev.arm.clone().unwrap_or_default())
            .or_default()
            .push(subject);
    }
    by_arm
        .into_iter()
        .map(|(arm, subjects)| StudyDataset::new(subjects).map(|d| (arm, d)))
        .collect()
}

/// Reads both files into a single dataset, ignoring any arm column.
pub fn ingest_dataset(long_path: &Path, event_path: &Path, schema: &Schema) -> Result<StudyDataset> {
    let schema = Schema {
        arm: None,
        ..schema.clone()
    };
    let mut by_arm = ingest_by_arm(long_path, event_path, &schema)?;
    Ok(by_arm.remove("").expect("single arm"))
}

/// Writes `schema` as pretty JSON.
pub fn write_schema(schema: &Schema, path: &Path) -> Result<()> {
    let mut f = File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::to_writer_pretty(&mut f, schema)?;
    writeln!(f).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
