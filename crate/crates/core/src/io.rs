//! Tab-separated readers and writers: ratings, fitted parameters, rater
//! weights, simulation truth and report tables.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a value
//! read back is bit-identical to the one written.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{Aggregate, Comparison, Method, WeekMetrics, WeekRow};
use crate::model::{classify_note, LatentParams, RatingEvent};
use crate::sim::SimTruth;
use crate::theory::{Claim, NoteLimitRow};

pub const COL_NOTE: &str = "noteId";
pub const COL_RATER: &str = "raterParticipantId";
pub const COL_CREATED: &str = "createdAtMillis";
pub const COL_LEVEL: &str = "helpfulnessLevel";
/// Optional continuous report accompanying synthetic ratings.
pub const COL_LATENT: &str = "latentReport";

pub fn level_value(level: &str) -> Option<f64> {
    match level {
        "HELPFUL" => Some(1.0),
        "SOMEWHAT_HELPFUL" => Some(0.5),
        "NOT_HELPFUL" => Some(0.0),
        _ => None,
    }
}

pub fn level_name(value: f64) -> &'static str {
    if value == 1.0 {
        "HELPFUL"
    } else if value == 0.5 {
        "SOMEWHAT_HELPFUL"
    } else {
        "NOT_HELPFUL"
    }
}

/// Parsed ratings plus the number of rows dropped for an unknown level.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ingested {
    pub events: Vec<RatingEvent>,
    pub skipped: usize,
}

fn tsv_reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(true)
        .flexible(true)
        .quoting(false)
        .from_reader(r)
}

fn tsv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .delimiter(b'\t')
        .quote_style(csv::QuoteStyle::Never)
        .from_writer(w)
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::MissingColumn(name.to_string()))
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

fn field<'a>(rec: &'a csv::StringRecord, idx: usize, name: &str) -> Result<&'a str> {
    rec.get(idx).ok_or_else(|| Error::Parse {
        line: line_of(rec),
        message: format!("row has no {name} field"),
    })
}

/// Reads ratings in the public schema. Extra columns are ignored; rows with
/// an unknown helpfulness level are counted and skipped. Events come back
/// sorted by timestamp (stable).
pub fn read_ratings<R: Read>(r: R) -> Result<Ingested> {
    let mut rdr = tsv_reader(r);
    let headers = rdr.headers()?.clone();
    let c_note = column(&headers, COL_NOTE)?;
    let c_rater = column(&headers, COL_RATER)?;
    let c_time = column(&headers, COL_CREATED)?;
    let c_level = column(&headers, COL_LEVEL)?;
    let c_latent = headers.iter().position(|h| h == COL_LATENT);
    let mut out = Ingested::default();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let Some(value) = level_value(field(&rec, c_level, COL_LEVEL)?) else {
            out.skipped += 1;
            continue;
        };
        let ts_raw = field(&rec, c_time, COL_CREATED)?;
        let ts: i64 = ts_raw.parse().map_err(|_| Error::Parse {
            line,
            message: format!("unparseable {COL_CREATED} {ts_raw:?}"),
        })?;
        let mut ev = RatingEvent::new(
            field(&rec, c_rater, COL_RATER)?,
            field(&rec, c_note, COL_NOTE)?,
            ts,
            value,
        )
        .map_err(|e| Error::Parse { line, message: e.to_string() })?;
        if let Some(c) = c_latent {
            let raw = field(&rec, c, COL_LATENT)?;
            if !raw.is_empty() {
                let x: f64 = raw.parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("unparseable {COL_LATENT} {raw:?}"),
                })?;
                if !x.is_finite() {
                    return Err(Error::Parse { line, message: format!("non-finite {COL_LATENT}") });
                }
                ev = ev.with_latent(x);
            }
        }
        out.events.push(ev);
    }
    out.events.sort_by_key(|e| e.created_at_ms);
    if out.skipped > 0 {
        log::warn!("skipped {} ratings with an unknown helpfulness level", out.skipped);
    }
    Ok(out)
}

pub fn ingest_ratings_tsv(path: impl AsRef<Path>) -> Result<Ingested> {
    read_ratings(File::open(path)?)
}

/// Writes ratings in the public schema; `latentReport` is added when any
/// event carries a latent value.
pub fn write_ratings<W: Write>(w: W, events: &[RatingEvent]) -> Result<()> {
    let latent = events.iter().any(|e| e.latent.is_some());
    let mut wr = tsv_writer(w);
    let mut header = vec![COL_NOTE, COL_RATER, COL_CREATED, COL_LEVEL];
    if latent {
        header.push(COL_LATENT);
    }
    wr.write_record(&header)?;
    for e in events {
        let mut row = vec![
            e.note_id.clone(),
            e.rater_id.clone(),
            e.created_at_ms.to_string(),
            level_name(e.rating).to_string(),
        ];
        if latent {
            row.push(e.latent.map(|x| x.to_string()).unwrap_or_default());
        }
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

/// Fitted parameters with the ids their indices refer to.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSnapshot {
    pub params: LatentParams,
    pub user_ids: Vec<String>,
    pub note_ids: Vec<String>,
}

impl ParamSnapshot {
    pub fn new(params: LatentParams, user_ids: Vec<String>, note_ids: Vec<String>) -> Result<Self> {
        if user_ids.len() != params.num_users() || note_ids.len() != params.num_notes() {
            return Err(Error::DimensionMismatch {
                what: "parameter ids",
                expected: params.num_users() + params.num_notes(),
                found: user_ids.len() + note_ids.len(),
            });
        }
        Ok(Self { params, user_ids, note_ids })
    }
}

const PARAM_HEADER: [&str; 6] = ["block", "index", "id", "intercept", "factor", "status"];

/// Long format, `1 + U + N` rows: one `global` row carrying μ, then one row
/// per rater `(h_u, f_u)` and per note `(i_n, g_n, status)`.
pub fn write_params<W: Write>(w: W, snap: &ParamSnapshot) -> Result<()> {
    let mut wr = tsv_writer(w);
    wr.write_record(PARAM_HEADER)?;
    let p = &snap.params;
    wr.write_record(["global", "0", "", &p.mu.to_string(), "", ""])?;
    for (u, id) in snap.user_ids.iter().enumerate() {
        wr.write_record(["rater", &u.to_string(), id, &p.h[u].to_string(), &p.f[u].to_string(), ""])?;
    }
    for (n, id) in snap.note_ids.iter().enumerate() {
        wr.write_record([
            "note",
            &n.to_string(),
            id,
            &p.i[n].to_string(),
            &p.g[n].to_string(),
            classify_note(p.i[n]).as_str(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

fn parse_f64(raw: &str, line: u64, what: &str) -> Result<f64> {
    raw.parse().map_err(|_| Error::Parse {
        line,
        message: format!("unparseable {what} {raw:?}"),
    })
}

pub fn read_params<R: Read>(r: R) -> Result<ParamSnapshot> {
    let mut rdr = tsv_reader(r);
    let headers = rdr.headers()?.clone();
    let idx: Vec<usize> = PARAM_HEADER
        .iter()
        .map(|c| column(&headers, c))
        .collect::<Result<_>>()?;
    let mut mu = None;
    let (mut users, mut notes) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let get = |k: usize| field(&rec, idx[k], PARAM_HEADER[k]);
        match get(0)? {
            "global" => mu = Some(parse_f64(get(3)?, line, "mu")?),
            block @ ("rater" | "note") => {
                let row = (
                    get(2)?.to_string(),
                    parse_f64(get(3)?, line, "intercept")?,
                    parse_f64(get(4)?, line, "factor")?,
                );
                if block == "rater" { users.push(row) } else { notes.push(row) }
            }
            other => {
                return Err(Error::Parse { line, message: format!("unknown block {other:?}") });
            }
        }
    }
    let mu = mu.ok_or_else(|| Error::Parse { line: 0, message: "no global row".into() })?;
    let (user_ids, h, f) = unzip3(users);
    let (note_ids, i, g) = unzip3(notes);
    ParamSnapshot::new(LatentParams::new(mu, h, i, f, g)?, user_ids, note_ids)
}

fn unzip3(rows: Vec<(String, f64, f64)>) -> (Vec<String>, Vec<f64>, Vec<f64>) {
    let mut a = Vec::with_capacity(rows.len());
    let mut b = Vec::with_capacity(rows.len());
    let mut c = Vec::with_capacity(rows.len());
    for (x, y, z) in rows {
        a.push(x);
        b.push(y);
        c.push(z);
    }
    (a, b, c)
}

/// `raterParticipantId, sigma2, weight`; an empty `sigma2` marks a rater
/// that received the pooled variance.
pub fn write_weights<W: Write>(w: W, user_ids: &[String], sigma2: &[Option<f64>], weights: &[f64]) -> Result<()> {
    let mut wr = tsv_writer(w);
    wr.write_record([COL_RATER, "sigma2", "weight"])?;
    for ((id, s), w) in user_ids.iter().zip(sigma2).zip(weights) {
        wr.write_record([id.as_str(), &s.map(|x| x.to_string()).unwrap_or_default(), &w.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

/// Long format `block, id, field, value` with blocks `global`, `rater` and
/// `note`.
pub fn write_truth<W: Write>(w: W, truth: &SimTruth, user_ids: &[String], note_ids: &[String]) -> Result<()> {
    let mut wr = tsv_writer(w);
    wr.write_record(["block", "id", "field", "value"])?;
    let t = &truth.theta0;
    for (name, v) in [
        ("mu", t.mu),
        ("mu_f", truth.mu_f),
        ("sigma_m_base", truth.sigma_m.base),
        ("sigma_m_slope", truth.sigma_m.slope),
    ] {
        wr.write_record(["global", "", name, &v.to_string()])?;
    }
    for (u, id) in user_ids.iter().enumerate() {
        for (name, v) in [("h", t.h[u]), ("f", t.f[u]), ("sigma", truth.sigma_u[u])] {
            wr.write_record(["rater", id, name, &v.to_string()])?;
        }
    }
    for (n, id) in note_ids.iter().enumerate() {
        for (name, v) in [
            ("i", t.i[n]),
            ("g", t.g[n]),
            ("c", truth.c_n[n]),
            ("rho", truth.rho_n[n]),
            ("m", truth.m_n[n]),
            ("delta", truth.delta_n[n]),
        ] {
            wr.write_record(["note", id, name, &v.to_string()])?;
        }
    }
    wr.flush()?;
    Ok(())
}

/// Truth read back from [`write_truth`], with rater and note ids in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct TruthTable {
    pub global: HashMap<String, f64>,
    pub user_ids: Vec<String>,
    pub users: HashMap<String, HashMap<String, f64>>,
    pub note_ids: Vec<String>,
    pub notes: HashMap<String, HashMap<String, f64>>,
}

impl TruthTable {
    pub fn note_value(&self, id: &str, field: &str) -> Option<f64> {
        self.notes.get(id)?.get(field).copied()
    }

    pub fn user_value(&self, id: &str, field: &str) -> Option<f64> {
        self.users.get(id)?.get(field).copied()
    }
}

pub fn read_truth<R: Read>(r: R) -> Result<TruthTable> {
    let mut rdr = tsv_reader(r);
    let headers = rdr.headers()?.clone();
    let cols: Vec<usize> = ["block", "id", "field", "value"]
        .iter()
        .map(|c| column(&headers, c))
        .collect::<Result<_>>()?;
    let mut t = TruthTable {
        global: HashMap::new(),
        user_ids: Vec::new(),
        users: HashMap::new(),
        note_ids: Vec::new(),
        notes: HashMap::new(),
    };
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let block = field(&rec, cols[0], "block")?;
        let id = field(&rec, cols[1], "id")?.to_string();
        let name = field(&rec, cols[2], "field")?.to_string();
        let value = parse_f64(field(&rec, cols[3], "value")?, line, "value")?;
        let (ids, map) = match block {
            "global" => {
                t.global.insert(name, value);
                continue;
            }
            "rater" => (&mut t.user_ids, &mut t.users),
            "note" => (&mut t.note_ids, &mut t.notes),
            other => return Err(Error::Parse { line, message: format!("unknown block {other:?}") }),
        };
        let entry = map.entry(id.clone()).or_insert_with(|| {
            ids.push(id);
            HashMap::new()
        });
        entry.insert(name, value);
    }
    Ok(t)
}

/// Marker for a missing value in report files.
pub const NA: &str = "NA";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| NA.to_string(), |x| x.to_string())
}

fn parse_opt(raw: &str, line: u64, what: &str) -> Result<Option<f64>> {
    if raw == NA {
        Ok(None)
    } else {
        parse_f64(raw, line, what).map(Some)
    }
}

const EVAL_WEEK_HEADER: [&str; 12] = [
    "week",
    "week_start_ms",
    "raters",
    "notes",
    "ratings",
    "method",
    "in_sample_n",
    "in_sample_mse",
    "oos_n",
    "oos_mse",
    "oos_mar",
    "oos_medar",
];

/// One row per week and method; missing metrics are written as `NA`.
pub fn write_eval_weeks<W: Write>(w: W, rows: &[WeekRow]) -> Result<()> {
    let mut wr = tsv_writer(w);
    wr.write_record(EVAL_WEEK_HEADER)?;
    for r in rows {
        for (method, m) in &r.metrics {
            wr.write_record([
                r.week.to_string(),
                r.start_ms.to_string(),
                r.raters.to_string(),
                r.notes.to_string(),
                r.ratings.to_string(),
                method.as_str().to_string(),
                m.in_sample_n.to_string(),
                opt(m.in_sample_mse),
                m.oos_n.to_string(),
                opt(m.oos_mse),
                opt(m.oos_mar),
                opt(m.oos_medar),
            ])?;
        }
    }
    wr.flush()?;
    Ok(())
}

pub fn read_eval_weeks<R: Read>(r: R) -> Result<Vec<WeekRow>> {
    let mut rdr = tsv_reader(r);
    let headers = rdr.headers()?.clone();
    let idx: Vec<usize> = EVAL_WEEK_HEADER
        .iter()
        .map(|c| column(&headers, c))
        .collect::<Result<_>>()?;
    let mut rows: Vec<WeekRow> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        let get = |k: usize| field(&rec, idx[k], EVAL_WEEK_HEADER[k]);
        let int = |k: usize| -> Result<i64> {
            let raw = get(k)?;
            raw.parse().map_err(|_| Error::Parse {
                line,
                message: format!("unparseable {} {raw:?}", EVAL_WEEK_HEADER[k]),
            })
        };
        let method = match get(5)? {
            "baseline" => Method::Baseline,
            "two_stage" => Method::TwoStage,
            other => return Err(Error::Parse { line, message: format!("unknown method {other:?}") }),
        };
        let metrics = WeekMetrics {
            in_sample_n: int(6)? as usize,
            in_sample_mse: parse_opt(get(7)?, line, "in_sample_mse")?,
            oos_n: int(8)? as usize,
            oos_mse: parse_opt(get(9)?, line, "oos_mse")?,
            oos_mar: parse_opt(get(10)?, line, "oos_mar")?,
            oos_medar: parse_opt(get(11)?, line, "oos_medar")?,
        };
        let week = int(0)?;
        match rows.last_mut() {
            Some(last) if last.week == week => last.metrics.push((method, metrics)),
            _ => rows.push(WeekRow {
                week,
                start_ms: int(1)?,
                raters: int(2)? as usize,
                notes: int(3)? as usize,
                ratings: int(4)? as usize,
                metrics: vec![(method, metrics)],
            }),
        }
    }
    Ok(rows)
}

pub fn write_eval_summary<W: Write>(w: W, aggregates: &[Aggregate]) -> Result<()> {
    let mut wr = tsv_writer(w);
    wr.write_record(["method", "metric", "weeks", "mean", "ci_low", "ci_high"])?;
    for a in aggregates {
        wr.write_record([
            a.method.as_str().to_string(),
            a.metric.as_str().to_string(),
            a.weeks.to_string(),
            opt(a.mean),
            opt(a.ci_low),
            opt(a.ci_high),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// Per-week rows followed by `average` rows; an undefined improvement is
/// written as `n/a`.
pub fn write_comparison<W: Write>(w: W, c: &Comparison) -> Result<()> {
    let pct = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| x.to_string());
    let mut wr = tsv_writer(w);
    wr.write_record(["week", "metric", "baseline", "two_stage", "improvement_pct"])?;
    for r in &c.rows {
        wr.write_record([
            r.week.to_string(),
            r.metric.as_str().to_string(),
            opt(r.baseline),
            opt(r.two_stage),
            pct(r.improvement_pct),
        ])?;
    }
    for (metric, v) in &c.average_pct {
        wr.write_record(["average", metric.as_str(), NA, NA, &pct(*v)])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_claims<W: Write>(w: W, claims: &[Claim]) -> Result<()> {
    let mut wr = tsv_writer(w);
    wr.write_record(["scenario", "claim", "check", "predicted", "observed", "tolerance", "status"])?;
    for c in claims {
        wr.write_record([
            c.scenario.as_str().to_string(),
            c.name.clone(),
            c.check.as_str().to_string(),
            c.predicted.to_string(),
            c.observed.to_string(),
            c.tolerance.to_string(),
            c.status.as_str().to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_note_limits<W: Write>(w: W, rows: &[NoteLimitRow]) -> Result<()> {
    let mut wr = tsv_writer(w);
    wr.write_record(["note", "predicted", "observed", "truth"])?;
    for r in rows {
        wr.write_record([r.note.to_string(), r.predicted.to_string(), r.observed.to_string(), r.truth.to_string()])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn create_file(path: impl AsRef<Path>) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}
