use std::fmt::Write as _;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDateTime, Timelike};

use super::PipelineError;
use crate::embedding::CalendarIndex;
use crate::numerics::Tensor;

const MINUTES_PER_DAY: u32 = 24 * 60;
const TIME_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// Gap-free sensor readings, `N × T_total`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReadingsTable {
    pub interval_minutes: u32,
    pub start: NaiveDateTime,
    /// `[N, T_total]`.
    pub values: Tensor,
    /// Cells that were missing in the source and filled during ingestion.
    pub filled_gaps: usize,
}

impl ReadingsTable {
    pub fn new(interval_minutes: u32, start: NaiveDateTime, values: Tensor) -> Result<Self, PipelineError> {
        if values.rank() != 2 {
            return Err(PipelineError::Input(format!("readings must be N×T, got {:?}", values.shape())));
        }
        if interval_minutes == 0 || !MINUTES_PER_DAY.is_multiple_of(interval_minutes) {
            return Err(PipelineError::Input(format!("interval {interval_minutes} min does not divide a day")));
        }
        values.ensure_finite("readings")?;
        Ok(Self { interval_minutes, start, values, filled_gaps: 0 })
    }

    pub fn n_nodes(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_steps(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn steps_per_day(&self) -> usize {
        (MINUTES_PER_DAY / self.interval_minutes) as usize
    }

    pub fn get(&self, node: usize, step: usize) -> f64 {
        self.values.data()[node * self.n_steps() + step]
    }

    /// Time-of-day slot and weekday of `step`.
    pub fn calendar(&self, step: usize) -> CalendarIndex {
        let ts = self.start + Duration::minutes(step as i64 * self.interval_minutes as i64);
        let minute = ts.hour() * 60 + ts.minute();
        CalendarIndex {
            tod: (minute / self.interval_minutes) as usize,
            dow: ts.weekday().num_days_from_monday() as usize,
        }
    }

    /// Columns `range` of every node as `N × len`.
    pub fn slice_steps(&self, range: std::ops::Range<usize>) -> Tensor {
        let t = self.n_steps();
        let mut data = Vec::with_capacity(self.n_nodes() * range.len());
        for row in self.values.data().chunks(t) {
            data.extend_from_slice(&row[range.clone()]);
        }
        Tensor::new(vec![self.n_nodes(), range.len()], data).expect("non-empty range")
    }

    pub fn ensure_nodes(&self, n: usize) -> Result<(), PipelineError> {
        if self.n_nodes() != n {
            return Err(PipelineError::Input(format!(
                "readings have {} nodes but the graph has {n}",
                self.n_nodes()
            )));
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# readings N={} interval={} start={}\n",
            self.n_nodes(),
            self.interval_minutes,
            self.start.format(TIME_FORMAT)
        );
        for step in 0..self.n_steps() {
            for node in 0..self.n_nodes() {
                if node > 0 {
                    s.push(',');
                }
                let _ = write!(s, "{:?}", self.get(node, step));
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), PipelineError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

pub fn load_readings(path: impl AsRef<Path>) -> Result<ReadingsTable, PipelineError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| PipelineError::Input(format!("cannot read {}: {e}", path.display())))?;
    parse_readings(&text)
}

/// Parses the readings CSV. Empty or `nan` cells are forward-filled per node
/// (leading gaps take the first observed value).
pub fn parse_readings(text: &str) -> Result<ReadingsTable, PipelineError> {
    let perr = |line: usize, msg: String| PipelineError::Parse { line, msg };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
    let (hline, header) = lines.next().ok_or_else(|| perr(1, "empty readings file".into()))?;
    let (n, interval, start) = parse_header(header).map_err(|m| perr(hline, m))?;

    let mut rows: Vec<Vec<Option<f64>>> = Vec::new();
    for (lineno, line) in lines {
        if line.starts_with('#') {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| match f.trim() {
                "" => Ok(None),
                s if s.eq_ignore_ascii_case("nan") => Ok(None),
                s => match s.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(Some(v)),
                    _ => Err(perr(lineno, format!("bad value `{s}`"))),
                },
            })
            .collect::<Result<Vec<_>, _>>()?;
        if row.len() != n {
            return Err(perr(lineno, format!("expected {n} values, found {}", row.len())));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(PipelineError::Input("readings file has no data rows".into()));
    }
    let t = rows.len();
    let mut values = vec![0.0; n * t];
    let mut gaps = 0;
    for node in 0..n {
        let first = rows
            .iter()
            .find_map(|r| r[node])
            .ok_or_else(|| PipelineError::Input(format!("node {node} has no readings")))?;
        let mut last = first;
        for (step, row) in rows.iter().enumerate() {
            match row[node] {
                Some(v) => last = v,
                None => gaps += 1,
            }
            values[node * t + step] = last;
        }
    }
    let mut table = ReadingsTable::new(interval, start, Tensor::new(vec![n, t], values)?)?;
    table.filled_gaps = gaps;
    Ok(table)
}

fn parse_header(line: &str) -> Result<(usize, u32, NaiveDateTime), String> {
    let rest = line
        .strip_prefix('#')
        .map(str::trim_start)
        .and_then(|l| l.strip_prefix("readings"))
        .ok_or("header must start with `# readings`")?;
    let (mut n, mut interval, mut start) = (None, None, None);
    for field in rest.split_whitespace() {
        let (key, val) = field.split_once('=').ok_or_else(|| format!("bad header field `{field}`"))?;
        match key {
            "N" => n = Some(val.parse::<usize>().map_err(|_| format!("bad node count `{val}`"))?),
            "interval" => interval = Some(val.parse::<u32>().map_err(|_| format!("bad interval `{val}`"))?),
            "start" => {
                start = Some(
                    NaiveDateTime::parse_from_str(val, TIME_FORMAT)
                        .or_else(|_| NaiveDateTime::parse_from_str(val, "%Y-%m-%dT%H:%M"))
                        .map_err(|_| format!("bad start timestamp `{val}`"))?,
                )
            }
            other => return Err(format!("unknown header field `{other}`")),
        }
    }
    let n = n.ok_or("header lacks N=")?;
    if n == 0 {
        return Err("N must be positive".into());
    }
    Ok((n, interval.unwrap_or(5), start.ok_or("header lacks start=")?))
}
