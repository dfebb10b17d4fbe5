//! CSV files: datasets, training pairs, metric logs, sweeps, studies, rate maps
//! and selection reports. Floats are written in shortest round-trip form, so
//! reading a file back reproduces the values exactly.

use std::fs::File;
use std::path::Path;

use brittle_core::brittle::RateCell;
use brittle_core::simulators::{Dataset, StateVec};
use brittle_core::smc::{SelectionReport, StudyRow, SweepResult};
use brittle_core::training::{MetricRecord, TrainingPair};

use crate::error::Error;

type Writer = csv::Writer<File>;

fn create(path: &Path) -> Result<Writer, Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().flexible(false).from_writer(file))
}

fn open(path: &Path) -> Result<csv::Reader<File>, Error> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Reader::from_reader(file))
}

fn row(w: &mut Writer, path: &Path, fields: &[String]) -> Result<(), Error> {
    w.write_record(fields).map_err(|e| Error::format(path, e))
}

fn finish(mut w: Writer, path: &Path) -> Result<(), Error> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn parse(path: &Path, line: usize, s: &str) -> Result<f64, Error> {
    s.trim()
        .parse()
        .map_err(|_| Error::format(path, format!("line {line}: `{s}` is not a number")))
}

fn headers(path: &Path, r: &mut csv::Reader<File>) -> Result<Vec<String>, Error> {
    Ok(r.headers()
        .map_err(|e| Error::format(path, e))?
        .iter()
        .map(str::to_owned)
        .collect())
}

fn count_prefixed(headers: &[String], prefix: char) -> usize {
    headers
        .iter()
        .filter(|h| h.starts_with(prefix) && h[1..].parse::<usize>().is_ok())
        .count()
}

fn records(path: &Path, r: &mut csv::Reader<File>) -> Result<Vec<(usize, csv::StringRecord)>, Error> {
    r.records()
        .enumerate()
        .map(|(i, rec)| rec.map(|rec| (i + 2, rec)).map_err(|e| Error::format(path, e)))
        .collect()
}

/// One row per time step: `t, y0.., x0..`; the `y` fields are empty at `t = 0`.
pub fn write_dataset(path: &Path, data: &Dataset) -> Result<(), Error> {
    let dy = data.observations.first().map_or(0, Vec::len);
    let dx = data.states.first().map_or(0, |s| s.len());
    let mut w = create(path)?;
    let mut head = vec![String::from("t")];
    head.extend((0..dy).map(|i| format!("y{i}")));
    head.extend((0..dx).map(|i| format!("x{i}")));
    row(&mut w, path, &head)?;
    for (t, x) in data.states.iter().enumerate() {
        let mut fields = vec![t.to_string()];
        match t.checked_sub(1).and_then(|k| data.observations.get(k)) {
            Some(y) => fields.extend(y.iter().map(|v| num(*v))),
            None => fields.extend((0..dy).map(|_| String::new())),
        }
        fields.extend(x.iter().map(|v| num(*v)));
        row(&mut w, path, &fields)?;
    }
    finish(w, path)
}

pub fn read_dataset(path: &Path) -> Result<Dataset, Error> {
    let mut r = open(path)?;
    let head = headers(path, &mut r)?;
    let (dy, dx) = (count_prefixed(&head, 'y'), count_prefixed(&head, 'x'));
    if head.first().map(String::as_str) != Some("t") || head.len() != 1 + dy + dx {
        return Err(Error::format(path, "expected columns t, y0.., x0.."));
    }
    let mut data = Dataset::default();
    for (line, rec) in records(path, &mut r)? {
        let t = data.states.len();
        if t > 0 {
            let y = (1..=dy).map(|i| parse(path, line, &rec[i])).collect::<Result<_, _>>()?;
            data.observations.push(y);
        }
        let x = (1 + dy..1 + dy + dx)
            .map(|i| parse(path, line, &rec[i]))
            .collect::<Result<Vec<_>, _>>()?;
        data.states.push(StateVec(x));
    }
    Ok(data)
}

/// `x0.., z0..` per pair.
pub fn write_pairs(path: &Path, pairs: &[TrainingPair]) -> Result<(), Error> {
    let (dx, dz) = pairs.first().map_or((0, 0), |p| (p.x_prev.len(), p.z.len()));
    let mut w = create(path)?;
    let mut head: Vec<String> = (0..dx).map(|i| format!("x{i}")).collect();
    head.extend((0..dz).map(|i| format!("z{i}")));
    row(&mut w, path, &head)?;
    for p in pairs {
        let fields: Vec<String> = p.x_prev.iter().chain(&p.z).map(|v| num(*v)).collect();
        row(&mut w, path, &fields)?;
    }
    finish(w, path)
}

pub fn read_pairs(path: &Path) -> Result<Vec<TrainingPair>, Error> {
    let mut r = open(path)?;
    let head = headers(path, &mut r)?;
    let (dx, dz) = (count_prefixed(&head, 'x'), count_prefixed(&head, 'z'));
    if head.len() != dx + dz || dx == 0 || dz == 0 {
        return Err(Error::format(path, "expected columns x0.., z0.."));
    }
    records(path, &mut r)?
        .into_iter()
        .map(|(line, rec)| {
            let vals = rec
                .iter()
                .map(|s| parse(path, line, s))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(TrainingPair {
                x_prev: StateVec(vals[..dx].to_vec()),
                z: vals[dx..].to_vec(),
            })
        })
        .collect()
}

pub fn write_metrics(path: &Path, log: &[MetricRecord]) -> Result<(), Error> {
    let mut w = create(path)?;
    let head = [
        "iteration",
        "train_objective",
        "held_out_objective",
        "rejection_rate",
        "grad_norm",
    ];
    row(&mut w, path, &head.map(String::from))?;
    for m in log {
        row(
            &mut w,
            path,
            &[
                m.iteration.to_string(),
                num(m.train_objective),
                opt(m.held_out_objective),
                opt(m.rejection_rate),
                num(m.grad_norm),
            ],
        )?;
    }
    finish(w, path)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>, Error> {
    let mut r = open(path)?;
    records(path, &mut r)?
        .into_iter()
        .map(|(line, rec)| {
            if rec.len() != 5 {
                return Err(Error::format(path, format!("line {line}: expected 5 fields")));
            }
            let optional = |s: &str| {
                if s.is_empty() {
                    Ok(None)
                } else {
                    parse(path, line, s).map(Some)
                }
            };
            Ok(MetricRecord {
                iteration: rec[0]
                    .parse()
                    .map_err(|_| Error::format(path, format!("line {line}: bad iteration")))?,
                train_objective: parse(path, line, &rec[1])?,
                held_out_objective: optional(&rec[2])?,
                rejection_rate: optional(&rec[3])?,
                grad_norm: parse(path, line, &rec[4])?,
            })
        })
        .collect()
}

/// Per-step log mean weights (`sweep, step, log_mean_weight`) and per-sweep
/// totals (`sweep, log_evidence, failed, simulator_calls`).
pub fn write_sweeps(steps_path: &Path, summary_path: &Path, sweeps: &[SweepResult]) -> Result<(), Error> {
    let mut w = create(steps_path)?;
    row(
        &mut w,
        steps_path,
        &["sweep", "step", "log_mean_weight"].map(String::from),
    )?;
    for (s, res) in sweeps.iter().enumerate() {
        for (t, l) in res.step_log_mean_weights.iter().enumerate() {
            row(&mut w, steps_path, &[s.to_string(), (t + 1).to_string(), num(*l)])?;
        }
    }
    finish(w, steps_path)?;
    let mut w = create(summary_path)?;
    let head = ["sweep", "log_evidence", "failed", "simulator_calls"];
    row(&mut w, summary_path, &head.map(String::from))?;
    for (s, res) in sweeps.iter().enumerate() {
        let fields = [
            s.to_string(),
            num(res.log_evidence),
            res.failed.to_string(),
            res.simulator_calls.to_string(),
        ];
        row(&mut w, summary_path, &fields)?;
    }
    finish(w, summary_path)
}

pub fn write_study(path: &Path, rows: &[StudyRow]) -> Result<(), Error> {
    let mut w = create(path)?;
    let head = ["dataset", "var_p", "var_q", "mean_p", "mean_q", "failed_p", "failed_q"];
    row(&mut w, path, &head.map(String::from))?;
    for r in rows {
        let fields = [
            r.dataset.to_string(),
            num(r.var_p),
            num(r.var_q),
            num(r.mean_p),
            num(r.mean_q),
            r.failed_p.to_string(),
            r.failed_q.to_string(),
        ];
        row(&mut w, path, &fields)?;
    }
    finish(w, path)
}

pub fn read_study(path: &Path) -> Result<Vec<StudyRow>, Error> {
    let mut r = open(path)?;
    records(path, &mut r)?
        .into_iter()
        .map(|(line, rec)| {
            if rec.len() != 7 {
                return Err(Error::format(path, format!("line {line}: expected 7 fields")));
            }
            let int = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::format(path, format!("line {line}: `{s}` is not a count")))
            };
            Ok(StudyRow {
                dataset: int(&rec[0])?,
                var_p: parse(path, line, &rec[1])?,
                var_q: parse(path, line, &rec[2])?,
                mean_p: parse(path, line, &rec[3])?,
                mean_q: parse(path, line, &rec[4])?,
                failed_p: int(&rec[5])?,
                failed_q: int(&rec[6])?,
            })
        })
        .collect()
}

pub fn write_rate_map(path: &Path, cells: &[RateCell]) -> Result<(), Error> {
    let mut w = create(path)?;
    row(
        &mut w,
        path,
        &["grid_x", "grid_y", "rate", "n_trials"].map(String::from),
    )?;
    for c in cells {
        row(&mut w, path, &[num(c.x), num(c.y), num(c.rate), c.n_trials.to_string()])?;
    }
    finish(w, path)
}

pub fn write_selection(path: &Path, names: &[String], report: &SelectionReport) -> Result<(), Error> {
    let mut w = create(path)?;
    let head = [
        "hypothesis",
        "mean_log_evidence",
        "std_error",
        "pooled_log_evidence",
        "n_failed",
        "posterior",
        "selected",
    ];
    row(&mut w, path, &head.map(String::from))?;
    for (i, (name, h)) in names.iter().zip(&report.hypotheses).enumerate() {
        let fields = [
            name.clone(),
            num(h.mean_log_evidence),
            num(h.std_error),
            num(h.pooled_log_evidence),
            h.n_failed.to_string(),
            num(h.posterior),
            (i == report.selected).to_string(),
        ];
        row(&mut w, path, &fields)?;
    }
    finish(w, path)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
