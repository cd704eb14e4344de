use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "epoch,split,metric,value";

/// One point of a learning curve.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveRecord {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl CurveRecord {
    pub fn new(epoch: usize, split: &str, metric: &str, value: f64) -> Self {
        CurveRecord { epoch, split: split.to_string(), metric: metric.to_string(), value }
    }
}

fn check_field(s: &str) -> Result<()> {
    if s.is_empty() || s.contains([',', '\n', '\r']) {
        return Err(Error::format("curve record", format!("field `{s}` is empty or contains a separator")));
    }
    Ok(())
}

pub fn to_csv(records: &[CurveRecord]) -> Result<String> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        check_field(&r.split)?;
        check_field(&r.metric)?;
        writeln!(out, "{},{},{},{:.6}", r.epoch, r.split, r.metric, r.value).unwrap();
    }
    Ok(out)
}

pub fn parse_csv(text: &str) -> Result<Vec<CurveRecord>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        _ => return Err(Error::format("curve csv", format!("first line must be `{CSV_HEADER}`"))),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |d: &str| Error::format("curve csv", format!("line {}: {d}", i + 1));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        let epoch = f[0].parse().map_err(|_| bad("epoch is not an integer"))?;
        let value: f64 = f[3].parse().map_err(|_| bad("value is not a number"))?;
        check_field(f[1]).map_err(|_| bad("empty split"))?;
        check_field(f[2]).map_err(|_| bad("empty metric"))?;
        out.push(CurveRecord { epoch, split: f[1].to_string(), metric: f[2].to_string(), value });
    }
    Ok(out)
}

pub fn write_csv(path: &Path, records: &[CurveRecord]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, to_csv(records)?).map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<CurveRecord>> {
    parse_csv(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// `(epoch, value)` pairs of one split/metric, in record order.
pub fn series(records: &[CurveRecord], split: &str, metric: &str) -> Vec<(usize, f64)> {
    records.iter().filter(|r| r.split == split && r.metric == metric).map(|r| (r.epoch, r.value)).collect()
}

/// A named run's records, or `None` when the run is missing.
pub type NamedRun<'a> = (&'a str, Option<&'a [CurveRecord]>);

/// Side-by-side curve of two runs at their common epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub title: String,
    pub labels: [String; 2],
    pub split: String,
    pub metric: String,
    /// `(epoch, a, b, b − a)`.
    pub rows: Vec<(usize, f64, f64, f64)>,
    /// Runs that were requested but not available.
    pub absent: Vec<String>,
}

pub fn compare(title: &str, a: NamedRun, b: NamedRun, split: &str, metric: &str) -> Comparison {
    let absent: Vec<String> = [a, b].iter().filter(|r| r.1.is_none()).map(|r| r.0.to_string()).collect();
    let mut rows = Vec::new();
    if let (Some(ra), Some(rb)) = (a.1, b.1) {
        let sb = series(rb, split, metric);
        for (e, va) in series(ra, split, metric) {
            if let Some(&(_, vb)) = sb.iter().find(|&&(eb, _)| eb == e) {
                rows.push((e, va, vb, vb - va));
            }
        }
    }
    Comparison {
        title: title.to_string(),
        labels: [a.0.to_string(), b.0.to_string()],
        split: split.to_string(),
        metric: metric.to_string(),
        rows,
        absent,
    }
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = format!("epoch,{},{},delta\n", self.labels[0], self.labels[1]);
        for (e, a, b, d) in &self.rows {
            writeln!(out, "{e},{a:.6},{b:.6},{d:.6}").unwrap();
        }
        out
    }

    /// Human-readable summary: final values, delta, and any missing run.
    pub fn summary(&self) -> String {
        let mut s = format!("{} ({} {}):", self.title, self.split, self.metric);
        for a in &self.absent {
            write!(s, " run `{a}` absent;").unwrap();
        }
        match self.rows.last() {
            Some((e, a, b, d)) => {
                write!(s, " epoch {e}: {} {a:.6}, {} {b:.6}, delta {d:+.6}", self.labels[0], self.labels[1]).unwrap()
            }
            None => s.push_str(" no common epochs"),
        }
        s
    }
}
