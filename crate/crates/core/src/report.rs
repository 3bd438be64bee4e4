//! CSV stream reports and loss logs.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::runtime::{EpochLog, HealthKind, StreamRecord};

pub fn stream_header(layers: usize) -> Vec<String> {
    let mut h: Vec<String> = ["instance_idx", "ade", "fde", "rr", "loss", "grad_norm", "health"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((1..=layers).map(|l| format!("e_{l}")));
    h.extend((1..=layers).map(|l| format!("alpha_{l}")));
    h
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Writes `records` with `layers` expert and alpha columns; missing values
/// stay empty.
pub fn write_stream_report<W: Write>(out: W, records: &[StreamRecord], layers: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(stream_header(layers))?;
    for r in records {
        let mut row = vec![
            r.instance_idx.to_string(),
            r.ade.to_string(),
            r.fde.to_string(),
            cell(r.rr),
            r.loss.to_string(),
            r.grad_norm.to_string(),
            r.health.to_string(),
        ];
        row.extend((0..layers).map(|l| cell(r.expert.get(l).copied())));
        row.extend((0..layers).map(|l| cell(r.alpha.get(l).copied())));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// A parsed report row; `grad_norm` is the applied (post-clip) norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub instance_idx: usize,
    pub ade: f64,
    pub fde: f64,
    pub rr: Option<f64>,
    pub loss: f64,
    pub grad_norm: f64,
    pub health: HealthKind,
    pub expert: Vec<Option<f64>>,
    pub alpha: Vec<Option<f64>>,
}

fn row_error(row: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        source_name: "report".into(),
        line: row,
        msg: msg.into(),
    }
}

/// Reads a stream report; errors name the 1-based line (header is line 1).
pub fn read_stream_report<R: Read>(input: R) -> Result<Vec<ReportRow>> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = rd.headers().map_err(|e| row_error(1, e.to_string()))?.clone();
    let fixed = stream_header(0);
    if header.len() < fixed.len() || header.iter().zip(&fixed).any(|(a, b)| a != b) {
        return Err(row_error(1, "unexpected header"));
    }
    let extra = header.len() - fixed.len();
    if !extra.is_multiple_of(2) {
        return Err(row_error(1, "expert and alpha column counts differ"));
    }
    let layers = extra / 2;
    if stream_header(layers) != header.iter().collect::<Vec<_>>() {
        return Err(row_error(1, "unexpected header"));
    }
    let mut rows = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| row_error(line, e.to_string()))?;
        let num = |k: usize| -> Result<f64> {
            rec[k]
                .parse::<f64>()
                .map_err(|_| row_error(line, format!("column {} is not a number: {:?}", &header[k], &rec[k])))
        };
        let opt = |k: usize| -> Result<Option<f64>> {
            if rec[k].is_empty() {
                Ok(None)
            } else {
                num(k).map(Some)
            }
        };
        rows.push(ReportRow {
            instance_idx: rec[0]
                .parse()
                .map_err(|_| row_error(line, format!("bad instance_idx {:?}", &rec[0])))?,
            ade: num(1)?,
            fde: num(2)?,
            rr: opt(3)?,
            loss: num(4)?,
            grad_norm: num(5)?,
            health: rec[6].parse().map_err(|e: Error| row_error(line, e.to_string()))?,
            expert: (0..layers).map(|l| opt(7 + l)).collect::<Result<_>>()?,
            alpha: (0..layers).map(|l| opt(7 + layers + l)).collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}

pub fn write_loss_log<W: Write>(out: W, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "lr", "mean_loss"])?;
    for e in log {
        w.write_record([e.epoch.to_string(), e.lr.to_string(), e.mean_loss.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
