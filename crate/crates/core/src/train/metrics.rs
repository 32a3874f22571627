//! Append-only metrics CSV.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::probes::{EmbeddingSimilarity, SimilarityReport};

pub const METRICS_HEADER: &str = "step,loss_total,loss_mlm,loss_tc,loss_tp,lr,grad_norm,masked_acc,intra_cos,inter_cos,contextual_score,ratio_l1,ratio_l2,ratio_l10,ratio_cos,ratio_dot,elapsed_ms";

pub const EMBEDDING_HEADER: &str = "step,word1,word2,cosine";

/// One metrics line; `None` renders as an empty cell.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricsRow {
    pub step: u64,
    pub loss_total: Option<f64>,
    pub loss_mlm: Option<f64>,
    pub loss_tc: Option<f64>,
    pub loss_tp: Option<f64>,
    pub lr: Option<f64>,
    pub grad_norm: Option<f64>,
    pub masked_acc: Option<f64>,
    pub intra_cos: Option<f64>,
    pub inter_cos: Option<f64>,
    pub contextual_score: Option<f64>,
    pub ratio_l1: Option<f64>,
    pub ratio_l2: Option<f64>,
    pub ratio_l10: Option<f64>,
    pub ratio_cos: Option<f64>,
    pub ratio_dot: Option<f64>,
    pub elapsed_ms: Option<u64>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_cell(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::Input(format!("bad metrics cell `{s}`")))
}

impl MetricsRow {
    pub fn set_probe(&mut self, r: &SimilarityReport) {
        self.intra_cos = Some(r.cosine.intra_mean);
        self.inter_cos = Some(r.cosine.inter_mean);
        self.contextual_score = Some(r.contextual_score);
        self.ratio_l1 = Some(r.l1.ratio);
        self.ratio_l2 = Some(r.l2.ratio);
        self.ratio_l10 = Some(r.l10.ratio);
        self.ratio_cos = Some(r.cosine.ratio);
        self.ratio_dot = Some(r.dot.ratio);
    }

    /// The numeric cells after `step`, in header order (elapsed excluded).
    pub fn values(&self) -> [Option<f64>; 15] {
        [
            self.loss_total,
            self.loss_mlm,
            self.loss_tc,
            self.loss_tp,
            self.lr,
            self.grad_norm,
            self.masked_acc,
            self.intra_cos,
            self.inter_cos,
            self.contextual_score,
            self.ratio_l1,
            self.ratio_l2,
            self.ratio_l10,
            self.ratio_cos,
            self.ratio_dot,
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut cells = vec![self.step.to_string()];
        cells.extend(self.values().into_iter().map(cell));
        cells.push(self.elapsed_ms.map(|e| e.to_string()).unwrap_or_default());
        cells.join(",")
    }

    pub fn parse(line: &str) -> Result<Self> {
        let cells: Vec<&str> = line.trim_end().split(',').collect();
        if cells.len() != 17 {
            return Err(Error::Input(format!("metrics line has {} cells, expected 17", cells.len())));
        }
        let f = |i: usize| parse_cell(cells[i]);
        Ok(MetricsRow {
            step: cells[0]
                .parse()
                .map_err(|_| Error::Input(format!("bad step `{}`", cells[0])))?,
            loss_total: f(1)?,
            loss_mlm: f(2)?,
            loss_tc: f(3)?,
            loss_tp: f(4)?,
            lr: f(5)?,
            grad_norm: f(6)?,
            masked_acc: f(7)?,
            intra_cos: f(8)?,
            inter_cos: f(9)?,
            contextual_score: f(10)?,
            ratio_l1: f(11)?,
            ratio_l2: f(12)?,
            ratio_l10: f(13)?,
            ratio_cos: f(14)?,
            ratio_dot: f(15)?,
            elapsed_ms: match cells[16] {
                "" => None,
                s => Some(s.parse().map_err(|_| Error::Input(format!("bad elapsed `{s}`")))?),
            },
        })
    }
}

/// Reads every row of a metrics file.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    match lines.next() {
        Some(Ok(h)) if h == METRICS_HEADER => {}
        _ => return Err(Error::Input(format!("{} is not a metrics file", path.display()))),
    }
    lines
        .map(|l| MetricsRow::parse(&l.map_err(|e| Error::io(path, e))?))
        .collect()
}

/// CSV file that gets a header when created and rows appended afterwards.
#[derive(Debug)]
pub struct CsvSink {
    path: PathBuf,
    file: File,
}

impl CsvSink {
    /// Creates (truncating) `path` and writes `header`.
    pub fn create(path: &Path, header: &str) -> Result<Self> {
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "{header}").map_err(|e| Error::io(path, e))?;
        Ok(CsvSink {
            path: path.to_path_buf(),
            file,
        })
    }

    /// Opens `path` for appending, creating it with `header` if missing.
    pub fn append(path: &Path, header: &str) -> Result<Self> {
        if !path.exists() {
            return Self::create(path, header);
        }
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(CsvSink {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn write_line(&mut self, line: &str) -> Result<()> {
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))?;
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Embedding-similarity lines for one probe: one per pair plus a `mean` line.
pub fn embedding_lines(step: u64, sim: &EmbeddingSimilarity) -> Vec<String> {
    let mut out: Vec<String> = sim
        .per_pair
        .iter()
        .map(|(a, b, c)| format!("{step},{a},{b},{c}"))
        .collect();
    out.push(format!("{step},mean,,{}", sim.mean));
    out
}

/// Side-by-side table of two runs keyed by step; every metrics column is
/// repeated with each run's prefix.
pub fn join_metrics(a: &[MetricsRow], b: &[MetricsRow], name_a: &str, name_b: &str) -> String {
    let columns: Vec<&str> = METRICS_HEADER.split(',').skip(1).take(15).collect();
    let mut header = vec!["step".to_string()];
    for name in [name_a, name_b] {
        header.extend(columns.iter().map(|c| format!("{name}_{c}")));
    }
    let mut steps: Vec<u64> = a.iter().chain(b).map(|r| r.step).collect();
    steps.sort_unstable();
    steps.dedup();
    let mut out = header.join(",");
    out.push('\n');
    for s in steps {
        let mut cells = vec![s.to_string()];
        for rows in [a, b] {
            match rows.iter().find(|r| r.step == s) {
                Some(r) => cells.extend(r.values().into_iter().map(cell)),
                None => cells.extend(std::iter::repeat(String::new()).take(15)),
            }
        }
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_has_seventeen_columns() {
        assert_eq!(METRICS_HEADER.split(',').count(), 17);
    }

    #[test]
    fn rows_round_trip_through_csv() {
        let row = MetricsRow {
            step: 12,
            loss_total: Some(3.25),
            loss_mlm: Some(0.1 + 0.2),
            loss_tc: None,
            ratio_l2: Some(f64::NAN),
            elapsed_ms: Some(40),
            ..Default::default()
        };
        let line = row.to_csv();
        assert!(line.starts_with("12,3.25,0.30000000000000004,,,"));
        let back = MetricsRow::parse(&line).unwrap();
        assert_eq!(back.loss_mlm, row.loss_mlm);
        assert!(back.ratio_l2.unwrap().is_nan());
        assert_eq!(back.to_csv(), line);
        assert!(MetricsRow::parse("1,2").is_err());
    }

    #[test]
    fn join_aligns_steps() {
        let a = [MetricsRow {
            step: 0,
            contextual_score: Some(0.5),
            ..Default::default()
        }];
        let b = [MetricsRow {
            step: 1,
            loss_total: Some(2.0),
            ..Default::default()
        }];
        let j = join_metrics(&a, &b, "a", "b");
        let lines: Vec<&str> = j.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("step,a_loss_total,"));
        assert!(lines[0].ends_with(",b_ratio_dot"));
        assert_eq!(lines[1].split(',').count(), 31);
        assert_eq!(lines[1].split(',').nth(10), Some("0.5"));
        assert_eq!(lines[2].split(',').nth(16), Some("2"));
    }
}
