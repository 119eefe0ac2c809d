//! CSV ingestion and emission of epoched series, and causal downsampling.
//!
//! Two layouts are understood:
//!
//! * wide: header `trial,time,<channel>,<channel>,...`, one row per sample;
//! * long: header `trial,channel,time,value`, one row per value.
//!
//! Trials are integer labels and are ordered by label; within a trial the
//! samples are ordered by `time`. Values are written with the shortest
//! representation that parses back to the same `f64`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EpochedSeries;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    #[default]
    Wide,
    Long,
}

impl std::str::FromStr for Layout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wide" => Ok(Layout::Wide),
            "long" => Ok(Layout::Long),
            other => Err(Error::Config(format!("unknown CSV layout '{other}'"))),
        }
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => parse_err(line, format!("{kind:?}")),
    }
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, name: &str, line: usize) -> Result<T> {
    let raw = rec.get(i).ok_or_else(|| parse_err(line, format!("missing column '{name}'")))?;
    raw.trim().parse().map_err(|_| parse_err(line, format!("cannot parse {name} '{raw}'")))
}

fn value(rec: &csv::StringRecord, i: usize, name: &str, line: usize) -> Result<f64> {
    let v: f64 = field(rec, i, name, line)?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("non-finite {name} value '{}'", rec.get(i).unwrap_or(""))));
    }
    Ok(v)
}

fn check_header(h: &csv::StringRecord, expect: &[&str]) -> Result<()> {
    for (i, name) in expect.iter().enumerate() {
        if h.get(i).map(str::trim) != Some(*name) {
            return Err(parse_err(1, format!("expected column {} to be '{name}'", i + 1)));
        }
    }
    Ok(())
}

/// Read a series from any reader.
pub fn read_csv<R: Read>(reader: R, layout: Layout) -> Result<EpochedSeries> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header = rdr.headers().map_err(csv_err)?.clone();
    // (trial, channel) -> time -> value
    let mut cells: BTreeMap<(i64, usize), BTreeMap<i64, f64>> = BTreeMap::new();
    let channels = match layout {
        Layout::Wide => {
            check_header(&header, &["trial", "time"])?;
            let d = header.len().saturating_sub(2);
            if d == 0 {
                return Err(parse_err(1, "no channel columns"));
            }
            d
        }
        Layout::Long => {
            check_header(&header, &["trial", "channel", "time", "value"])?;
            0
        }
    };
    let mut max_channel = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let trial: i64 = field(&rec, 0, "trial", line)?;
        match layout {
            Layout::Wide => {
                if rec.len() != channels + 2 {
                    return Err(parse_err(line, format!("expected {} fields, found {}", channels + 2, rec.len())));
                }
                let time: i64 = field(&rec, 1, "time", line)?;
                for ch in 0..channels {
                    let v = value(&rec, ch + 2, header.get(ch + 2).unwrap_or("value"), line)?;
                    if cells.entry((trial, ch)).or_default().insert(time, v).is_some() {
                        return Err(parse_err(line, format!("duplicate sample trial {trial} time {time}")));
                    }
                }
            }
            Layout::Long => {
                if rec.len() != 4 {
                    return Err(parse_err(line, format!("expected 4 fields, found {}", rec.len())));
                }
                let ch: usize = field(&rec, 1, "channel", line)?;
                let time: i64 = field(&rec, 2, "time", line)?;
                let v = value(&rec, 3, "value", line)?;
                max_channel = max_channel.max(ch + 1);
                if cells.entry((trial, ch)).or_default().insert(time, v).is_some() {
                    return Err(parse_err(line, format!("duplicate sample trial {trial} channel {ch} time {time}")));
                }
            }
        }
    }
    let d = if layout == Layout::Wide { channels } else { max_channel };
    let trials: Vec<i64> = {
        let mut t: Vec<i64> = cells.keys().map(|k| k.0).collect();
        t.dedup();
        t
    };
    if trials.is_empty() {
        return Err(Error::Shape("the file holds no samples".into()));
    }
    let mut out = Vec::with_capacity(trials.len());
    let mut len = None;
    for &tr in &trials {
        let mut chans = Vec::with_capacity(d);
        for ch in 0..d {
            let col = cells.remove(&(tr, ch)).ok_or_else(|| Error::Shape(format!("trial {tr} lacks channel {ch}")))?;
            let vals: Vec<f64> = col.into_values().collect();
            if *len.get_or_insert(vals.len()) != vals.len() {
                return Err(Error::Shape(format!(
                    "trial {tr} channel {ch} has {} samples, expected {}",
                    vals.len(),
                    len.unwrap()
                )));
            }
            chans.push(vals);
        }
        out.push(chans);
    }
    EpochedSeries::new(out)
}

pub fn ingest_csv(path: impl AsRef<Path>, layout: Layout) -> Result<EpochedSeries> {
    read_csv(File::open(path)?, layout)
}

/// Write `series` with 0-based trial labels and 1-based times.
pub fn write_csv<W: Write>(series: &EpochedSeries, writer: W, layout: Layout) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| csv_err(e);
    match layout {
        Layout::Wide => {
            let mut header = vec!["trial".to_string(), "time".to_string()];
            header.extend((0..series.channels()).map(|i| format!("ch{i}")));
            w.write_record(&header).map_err(io)?;
            for j in 0..series.trials() {
                for t in 0..series.len() {
                    let mut row = vec![j.to_string(), (t + 1).to_string()];
                    row.extend((0..series.channels()).map(|i| series.get(j, i, t).to_string()));
                    w.write_record(&row).map_err(io)?;
                }
            }
        }
        Layout::Long => {
            w.write_record(["trial", "channel", "time", "value"]).map_err(io)?;
            for j in 0..series.trials() {
                for i in 0..series.channels() {
                    for t in 0..series.len() {
                        w.write_record([
                            j.to_string(),
                            i.to_string(),
                            (t + 1).to_string(),
                            series.get(j, i, t).to_string(),
                        ])
                        .map_err(io)?;
                    }
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn emit_csv(series: &EpochedSeries, path: impl AsRef<Path>, layout: Layout) -> Result<()> {
    write_csv(series, File::create(path)?, layout)
}

/// Default exponential-smoother weight for a downsampling factor `m`.
pub fn default_smoothing(m: usize) -> f64 {
    2.0 / (m as f64 + 1.0)
}

/// Causal exponential smoothing `y_t = lambda x_t + (1 - lambda) y_{t-1}`
/// (with `y_0 = x_0`) followed by keeping every `m`-th sample, the last of
/// each block of `m`.
pub fn downsample_causal(series: &EpochedSeries, m: usize, lambda: Option<f64>) -> Result<EpochedSeries> {
    if m == 0 {
        return Err(Error::Config("downsampling factor must be at least 1".into()));
    }
    if m >= series.len() && m > 1 {
        return Err(Error::Config(format!("factor {m} is not below the series length {}", series.len())));
    }
    let lambda = lambda.unwrap_or_else(|| default_smoothing(m));
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::Config(format!("smoothing weight {lambda} outside (0, 1]")));
    }
    let out_len = series.len() / m;
    let mut data = Vec::with_capacity(series.trials() * series.channels() * out_len);
    for j in 0..series.trials() {
        for i in 0..series.channels() {
            let x = series.channel(j, i);
            let mut y = x[0];
            for (t, &v) in x.iter().enumerate() {
                if t > 0 {
                    y += lambda * (v - y);
                }
                if (t + 1) % m == 0 {
                    data.push(y);
                }
            }
        }
    }
    let mut out = EpochedSeries::from_flat(series.trials(), series.channels(), out_len, data)?;
    out.sample_rate = series.sample_rate.map(|r| r / m as f64);
    Ok(out)
}
