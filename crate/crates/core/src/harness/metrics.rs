//! Metrics rows and their CSV form.

use std::fmt::Write as _;
use std::str::FromStr;

pub const CSV_HEADER: &str =
    "run_id,method,seed,phase,iteration,peer_id,chain_step,mean_return_self,mean_return_peers,auc";

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Val,
    Test,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Val => "val",
            Phase::Test => "test",
        }
    }
}

impl FromStr for Phase {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Phase::Train),
            "val" => Ok(Phase::Val),
            "test" => Ok(Phase::Test),
            _ => Err(format!("unknown phase {s:?}")),
        }
    }
}

/// One row. Summary rows (one per peer chain) leave `chain_step` empty and
/// carry `auc`; per-step rows carry `chain_step` and no `auc`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub run_id: String,
    pub method: String,
    pub seed: u64,
    pub phase: Phase,
    pub iteration: Option<usize>,
    pub peer_id: Option<usize>,
    pub chain_step: Option<usize>,
    pub mean_return_self: f64,
    pub mean_return_peers: f64,
    pub auc: Option<f64>,
}

fn opt<T: ToString>(x: &Option<T>) -> String {
    x.as_ref().map(T::to_string).unwrap_or_default()
}

impl MetricRow {
    pub fn to_csv_line(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{:.16e},{:.16e},{}",
            self.run_id,
            self.method,
            self.seed,
            self.phase.as_str(),
            opt(&self.iteration),
            opt(&self.peer_id),
            opt(&self.chain_step),
            self.mean_return_self,
            self.mean_return_peers,
            self.auc.map(|a| format!("{a:.16e}")).unwrap_or_default()
        );
        s
    }

    pub fn from_csv_line(line: &str) -> Result<Self, String> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(format!("expected 10 fields, got {}", f.len()));
        }
        fn num<T: FromStr>(s: &str) -> Result<Option<T>, String> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| format!("bad number {s:?}"))
            }
        }
        let req = |s: &str| -> Result<f64, String> { num(s)?.ok_or_else(|| "missing value".to_string()) };
        Ok(MetricRow {
            run_id: f[0].to_string(),
            method: f[1].to_string(),
            seed: num(f[2])?.ok_or("missing seed")?,
            phase: f[3].parse()?,
            iteration: num(f[4])?,
            peer_id: num(f[5])?,
            chain_step: num(f[6])?,
            mean_return_self: req(f[7])?,
            mean_return_peers: req(f[8])?,
            auc: num(f[9])?,
        })
    }
}

pub fn to_csv(rows: &[MetricRow]) -> String {
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv_line());
        s.push('\n');
    }
    s
}

/// Rows without the header, for appending to an existing file.
pub fn to_csv_rows(rows: &[MetricRow]) -> String {
    rows.iter().map(|r| r.to_csv_line() + "\n").collect()
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricRow>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        _ => return Err("missing or wrong metrics header".into()),
    }
    lines
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| MetricRow::from_csv_line(l).map_err(|e| format!("row {}: {e}", i + 1)))
        .collect()
}
