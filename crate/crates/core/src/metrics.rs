//! Composite evaluation scores over precomputed component scores, plus a
//! per-channel statistics distance for comparing latents.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::{channel_stats, Tensor};

/// Component scores of one method. Similarities lie in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComponentScores {
    pub dino: f64,
    pub clip_i: f64,
    pub clip_t: f64,
    pub fid: Option<f64>,
    pub lpips: Option<f64>,
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Argument(format!("{name} must be finite, got {v}")))
    }
}

/// `(DINO + 1) · (CLIP-T + 1)`
pub fn dc_score(s: &ComponentScores) -> Result<f64> {
    Ok((finite("dino", s.dino)? + 1.0) * (finite("clip_t", s.clip_t)? + 1.0))
}

/// `(CLIP-I + 1) · (CLIP-T + 1)`
pub fn cc_score(s: &ComponentScores) -> Result<f64> {
    Ok((finite("clip_i", s.clip_i)? + 1.0) * (finite("clip_t", s.clip_t)? + 1.0))
}

/// `(1 + FID) · (1 + LPIPS)`
pub fn artfid_form(fid: f64, lpips: f64) -> Result<f64> {
    if !(fid >= 0.0 && fid.is_finite()) || !(lpips >= 0.0 && lpips.is_finite()) {
        return Err(Error::Argument(format!(
            "fid and lpips must be finite and non-negative, got {fid} and {lpips}"
        )));
    }
    Ok((1.0 + fid) * (1.0 + lpips))
}

/// ArtFID form of a score row; errors when FID or LPIPS is missing.
pub fn artfid_score(s: &ComponentScores) -> Result<f64> {
    match (s.fid, s.lpips) {
        (Some(f), Some(l)) => artfid_form(f, l),
        _ => Err(Error::Argument("artfid needs both fid and lpips".into())),
    }
}

/// L2 distance between the concatenated per-channel `(μ, σ)` vectors of
/// two latents, channels on axis 0.
pub fn channel_stat_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.rank() < 2 || b.rank() < 2 || a.shape()[0] != b.shape()[0] {
        return Err(Error::Shape(format!(
            "channel_stat_distance needs equal channel counts, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (sa, sb) = (channel_stats(a, 0)?, channel_stats(b, 0)?);
    let mean = sa.mean.iter().zip(&sb.mean).map(|(x, y)| (x - y).powi(2));
    let std = sa.std.iter().zip(&sb.std).map(|(x, y)| (x - y).powi(2));
    Ok(mean.chain(std).sum::<f64>().sqrt())
}

pub const SCORES_HEADER: [&str; 6] = ["method", "dino", "clip_i", "clip_t", "fid", "lpips"];

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub method: String,
    pub scores: ComponentScores,
}

/// Parses a scores CSV. `fid` and `lpips` cells may be empty.
pub fn read_scores_csv(input: impl Read) -> Result<Vec<ScoreRow>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header = reader
        .headers()
        .map_err(|e| Error::Csv { line: 1, detail: e.to_string() })?
        .clone();
    if header.iter().ne(SCORES_HEADER) {
        return Err(Error::Csv {
            line: 1,
            detail: format!("expected header {}, got {}", SCORES_HEADER.join(","), header.iter().collect::<Vec<_>>().join(",")),
        });
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Csv {
            line: e.position().map_or(0, |p| p.line()),
            detail: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let cell = |col: usize| -> Result<Option<f64>> {
            let raw = &record[col];
            if raw.is_empty() {
                return Ok(None);
            }
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(Some(v)),
                _ => Err(Error::Csv {
                    line,
                    detail: format!("column {} ({}): not a finite number: {raw:?}", col + 1, SCORES_HEADER[col]),
                }),
            }
        };
        let required = |col: usize| -> Result<f64> {
            cell(col)?.ok_or_else(|| Error::Csv {
                line,
                detail: format!("column {} ({}) is empty", col + 1, SCORES_HEADER[col]),
            })
        };
        rows.push(ScoreRow {
            method: record[0].to_string(),
            scores: ComponentScores {
                dino: required(1)?,
                clip_i: required(2)?,
                clip_t: required(3)?,
                fid: cell(4)?,
                lpips: cell(5)?,
            },
        });
    }
    Ok(rows)
}

/// Writes the input columns followed by `dc,cc,artfid`. `artfid` is left
/// empty for rows without FID or LPIPS.
pub fn write_report(rows: &[ScoreRow], output: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(output);
    let to_err = |e: csv::Error| Error::Csv { line: 0, detail: e.to_string() };
    let mut header = SCORES_HEADER.to_vec();
    header.extend(["dc", "cc", "artfid"]);
    w.write_record(&header).map_err(to_err)?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for row in rows {
        let s = &row.scores;
        let artfid = match (s.fid, s.lpips) {
            (Some(f), Some(l)) => format!("{:.6}", artfid_form(f, l)?),
            _ => String::new(),
        };
        w.write_record([
            row.method.clone(),
            s.dino.to_string(),
            s.clip_i.to_string(),
            s.clip_t.to_string(),
            opt(s.fid),
            opt(s.lpips),
            format!("{:.6}", dc_score(s)?),
            format!("{:.6}", cc_score(s)?),
            artfid,
        ])
        .map_err(to_err)?;
    }
    w.flush().map_err(|e| Error::Csv { line: 0, detail: e.to_string() })
}

/// Component scores of the published comparison table, as a scores CSV.
pub const TABLE1_CSV: &str = include_str!("../data/table1.csv");

/// Composite values reported alongside [`TABLE1_CSV`], row for row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportedComposites {
    pub method: &'static str,
    pub artfid: f64,
    pub dc: f64,
    pub cc: f64,
}

pub const TABLE1_REPORTED: [ReportedComposites; 11] = [
    ReportedComposites { method: "DDIM", artfid: 31.149, dc: 1.524, cc: 1.780 },
    ReportedComposites { method: "ControlNet", artfid: 24.751, dc: 1.831, cc: 1.916 },
    ReportedComposites { method: "StyTR2", artfid: 17.460, dc: 1.729, cc: 1.794 },
    ReportedComposites { method: "InstructPix2Pix", artfid: 28.319, dc: 1.908, cc: 1.963 },
    ReportedComposites { method: "InstantStyle", artfid: 27.244, dc: 1.765, cc: 1.921 },
    ReportedComposites { method: "CSGO", artfid: 27.116, dc: 1.775, cc: 1.893 },
    ReportedComposites { method: "StyleID", artfid: 15.161, dc: 1.873, cc: 1.964 },
    ReportedComposites { method: "STAM", artfid: 16.941, dc: 1.869, cc: 1.963 },
    ReportedComposites { method: "AttDistillation", artfid: 16.170, dc: 1.878, cc: 1.969 },
    ReportedComposites { method: "DiffArtist", artfid: 16.174, dc: 1.987, cc: 1.984 },
    ReportedComposites { method: "HAM", artfid: 15.151, dc: 2.113, cc: 2.057 },
];

/// Rounds to the table's three decimals.
pub fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

/// Whether `computed`, at the table's precision, is within one unit of
/// the last reported digit of `reported`.
pub fn matches_reported(computed: f64, reported: f64) -> bool {
    (round3(computed) - reported).abs() <= 1e-3 + 1e-9
}
