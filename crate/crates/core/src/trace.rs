//! Exports of decode traces: a per-step confidence heatmap and a per-token
//! refinement record.
//!
//! Heatmap CSV (`step,position,confidence,carried`) has one row per step
//! and generated position. A position committed in an earlier step carries
//! its commit-time confidence forward with `carried = 1`. A companion file
//! `<stem>_aggregates.csv` holds `step,mean,min` over each step's rows.
//!
//! Refinement JSON is an array of
//! `{"position", "token", "commit_step", "remask_events"}` objects, where
//! `remask_events` counts the steps whose adaptive re-mask set contained the
//! position.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::{DecodeResult, StepTrace};
use crate::error::{invalid_input, Result};
use crate::types::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepAggregate {
    pub step: usize,
    pub mean: f64,
    pub min: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapData {
    /// Traced sequence positions, ascending.
    pub positions: Vec<usize>,
    /// `confidence[step][i]` for `positions[i]`.
    pub confidence: Vec<Vec<f32>>,
    pub carried: Vec<Vec<bool>>,
    pub aggregates: Vec<StepAggregate>,
}

fn aggregate(step: usize, row: &[f32]) -> StepAggregate {
    let sum: f64 = row.iter().map(|&c| c as f64).sum();
    StepAggregate {
        step,
        mean: sum / row.len() as f64,
        min: row.iter().map(|&c| c as f64).fold(f64::INFINITY, f64::min),
    }
}

impl HeatmapData {
    pub fn from_traces(traces: &[StepTrace]) -> Result<Self> {
        if traces.is_empty() {
            return Err(invalid_input("no decode steps to export"));
        }
        let mut positions: Vec<usize> = traces
            .iter()
            .flat_map(|t| t.candidates.iter().map(|c| c.position))
            .collect();
        positions.sort_unstable();
        positions.dedup();
        if positions.is_empty() {
            return Err(invalid_input("traces contain no candidate positions"));
        }

        let mut committed: BTreeMap<usize, f32> = BTreeMap::new();
        let mut confidence = Vec::with_capacity(traces.len());
        let mut carried = Vec::with_capacity(traces.len());
        for trace in traces {
            let mut row = Vec::with_capacity(positions.len());
            let mut flags = Vec::with_capacity(positions.len());
            for &p in &positions {
                if let Some(c) = trace.candidates.iter().find(|c| c.position == p) {
                    row.push(c.confidence);
                    flags.push(false);
                } else if let Some(&c) = committed.get(&p) {
                    row.push(c);
                    flags.push(true);
                } else {
                    return Err(invalid_input(format!(
                        "position {p} is neither a candidate nor committed at step {}",
                        trace.step
                    )));
                }
            }
            for &p in &trace.revealed {
                if let Some(c) = trace.candidates.iter().find(|c| c.position == p) {
                    committed.insert(p, c.confidence);
                }
            }
            confidence.push(row);
            carried.push(flags);
        }
        let aggregates = confidence
            .iter()
            .enumerate()
            .map(|(k, row)| aggregate(k, row))
            .collect();
        Ok(Self {
            positions,
            confidence,
            carried,
            aggregates,
        })
    }

    pub fn steps(&self) -> usize {
        self.confidence.len()
    }

    /// Recomputes the aggregates from the matrix.
    pub fn recompute_aggregates(&self) -> Vec<StepAggregate> {
        self.confidence
            .iter()
            .enumerate()
            .map(|(k, row)| aggregate(k, row))
            .collect()
    }
}

/// `dir/name.csv` -> `dir/name_aggregates.csv`.
pub fn aggregates_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}_aggregates.csv"))
}

/// Writes the heatmap CSV and its aggregates companion; returns the
/// companion's path.
pub fn export_heatmap(traces: &[StepTrace], path: &Path) -> Result<PathBuf> {
    let data = HeatmapData::from_traces(traces)?;
    write_heatmap(&data, path)
}

pub fn write_heatmap(data: &HeatmapData, path: &Path) -> Result<PathBuf> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "step,position,confidence,carried")?;
    for (k, (row, flags)) in data.confidence.iter().zip(&data.carried).enumerate() {
        for ((&p, &c), &carried) in data.positions.iter().zip(row).zip(flags) {
            writeln!(w, "{k},{p},{c},{}", u8::from(carried))?;
        }
    }
    w.flush()?;

    let agg_path = aggregates_path(path);
    let mut w = BufWriter::new(File::create(&agg_path)?);
    writeln!(w, "step,mean,min")?;
    for a in &data.aggregates {
        writeln!(w, "{},{},{}", a.step, a.mean, a.min)?;
    }
    w.flush()?;
    Ok(agg_path)
}

fn parse_field<T: std::str::FromStr>(field: Option<&str>, line_no: usize) -> Result<T> {
    field
        .and_then(|f| f.trim().parse().ok())
        .ok_or_else(|| invalid_input(format!("bad field on line {line_no}")))
}

fn data_lines<'a>(text: &'a str, header: &str) -> Result<impl Iterator<Item = (usize, &'a str)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == header => {}
        _ => return Err(invalid_input(format!("expected header {header:?}"))),
    }
    Ok(lines.filter(|(_, l)| !l.trim().is_empty()).map(|(i, l)| (i + 1, l)))
}

/// Reads a heatmap CSV and its aggregates companion.
pub fn parse_heatmap(path: &Path) -> Result<HeatmapData> {
    let text = fs::read_to_string(path)?;
    let mut cells: BTreeMap<(usize, usize), (f32, bool)> = BTreeMap::new();
    for (line_no, line) in data_lines(&text, "step,position,confidence,carried")? {
        let mut f = line.split(',');
        let step: usize = parse_field(f.next(), line_no)?;
        let pos: usize = parse_field(f.next(), line_no)?;
        let conf: f32 = parse_field(f.next(), line_no)?;
        let carried: u8 = parse_field(f.next(), line_no)?;
        if carried > 1 || f.next().is_some() {
            return Err(invalid_input(format!("malformed heatmap row on line {line_no}")));
        }
        cells.insert((step, pos), (conf, carried == 1));
    }
    let mut positions: Vec<usize> = cells.keys().map(|&(_, p)| p).collect();
    positions.sort_unstable();
    positions.dedup();
    let steps = cells.keys().map(|&(s, _)| s + 1).max().unwrap_or(0);
    let mut confidence = vec![Vec::with_capacity(positions.len()); steps];
    let mut carried = vec![Vec::with_capacity(positions.len()); steps];
    for k in 0..steps {
        for &p in &positions {
            let &(c, flag) = cells
                .get(&(k, p))
                .ok_or_else(|| invalid_input(format!("heatmap is missing step {k}, position {p}")))?;
            confidence[k].push(c);
            carried[k].push(flag);
        }
    }

    let agg_text = fs::read_to_string(aggregates_path(path))?;
    let mut aggregates = Vec::new();
    for (line_no, line) in data_lines(&agg_text, "step,mean,min")? {
        let mut f = line.split(',');
        aggregates.push(StepAggregate {
            step: parse_field(f.next(), line_no)?,
            mean: parse_field(f.next(), line_no)?,
            min: parse_field(f.next(), line_no)?,
        });
    }
    Ok(HeatmapData {
        positions,
        confidence,
        carried,
        aggregates,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinementEntry {
    pub position: usize,
    pub token: TokenId,
    pub commit_step: usize,
    pub remask_events: usize,
}

pub fn refinement_data(result: &DecodeResult) -> Vec<RefinementEntry> {
    let prompt_len = result.final_seq.prompt_len;
    result
        .generated()
        .iter()
        .zip(&result.commit_step)
        .enumerate()
        .map(|(i, (&token, &commit_step))| {
            let position = prompt_len + i;
            RefinementEntry {
                position,
                token,
                commit_step,
                remask_events: result
                    .traces
                    .iter()
                    .filter(|t| t.acfg_remasked.contains(&position))
                    .count(),
            }
        })
        .collect()
}

pub fn export_refinement(result: &DecodeResult, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, &refinement_data(result))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn parse_refinement(path: &Path) -> Result<Vec<RefinementEntry>> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Heatmap as an SVG: steps down, positions across, darker is more
/// confident. Carried-forward cells are drawn hatched-grey.
pub fn heatmap_svg(data: &HeatmapData) -> String {
    const CELL: usize = 18;
    const MARGIN: usize = 40;
    let width = MARGIN + CELL * data.positions.len() + 10;
    let height = MARGIN + CELL * data.steps() + 10;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="10">"#
    );
    let _ = writeln!(svg, r#"<text x="4" y="12">step \ position</text>"#);
    for (i, p) in data.positions.iter().enumerate() {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}">{p}</text>"#,
            MARGIN + i * CELL + 3,
            MARGIN - 6
        );
    }
    for (k, (row, flags)) in data.confidence.iter().zip(&data.carried).enumerate() {
        let y = MARGIN + k * CELL;
        let _ = writeln!(svg, r#"<text x="4" y="{}">{k}</text>"#, y + 13);
        for (i, (&c, &carried)) in row.iter().zip(flags).enumerate() {
            let x = MARGIN + i * CELL;
            let shade = (255.0 * (1.0 - c.clamp(0.0, 1.0))) as u8;
            let fill = if carried {
                format!("rgb({shade},{shade},{shade})")
            } else {
                format!("rgb({shade},{shade},255)")
            };
            let _ = writeln!(
                svg,
                r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{fill}"><title>step {k}, position {}: {c}</title></rect>"#,
                data.positions[i]
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::Candidate;

    fn cand(position: usize, token: TokenId, confidence: f32) -> Candidate {
        Candidate {
            position,
            token,
            confidence,
        }
    }

    #[test]
    fn single_cell_heatmap() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("heat.csv");
        let traces = vec![StepTrace {
            step: 0,
            candidates: vec![cand(0, 1, 0.6)],
            acfg_remasked: vec![],
            revealed: vec![0],
        }];
        let agg = export_heatmap(&traces, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "step,position,confidence,carried\n0,0,0.6,0\n");
        assert_eq!(agg, dir.path().join("heat_aggregates.csv"));
        assert_eq!(
            fs::read_to_string(agg).unwrap(),
            "step,mean,min\n0,0.6000000238418579,0.6000000238418579\n"
        );
    }

    #[test]
    fn carried_values_follow_commits() {
        let traces = vec![
            StepTrace {
                step: 0,
                candidates: vec![cand(3, 0, 0.9), cand(4, 1, 0.4)],
                acfg_remasked: vec![],
                revealed: vec![3],
            },
            StepTrace {
                step: 1,
                candidates: vec![cand(4, 1, 0.7)],
                acfg_remasked: vec![3],
                revealed: vec![4],
            },
        ];
        let h = HeatmapData::from_traces(&traces).unwrap();
        assert_eq!(h.positions, vec![3, 4]);
        assert_eq!(h.confidence, vec![vec![0.9, 0.4], vec![0.9, 0.7]]);
        assert_eq!(h.carried, vec![vec![false, false], vec![true, false]]);
        assert!((h.aggregates[1].mean - 0.8).abs() < 1e-6);
        assert!((h.aggregates[0].min - 0.4).abs() < 1e-6);
        assert!(heatmap_svg(&h).contains("<rect"));
    }

    #[test]
    fn empty_traces_rejected() {
        assert!(HeatmapData::from_traces(&[]).is_err());
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let traces = vec![StepTrace {
            step: 0,
            candidates: vec![cand(0, 1, 0.6)],
            acfg_remasked: vec![],
            revealed: vec![0],
        }];
        let err = export_heatmap(&traces, Path::new("/nonexistent-dir/x/heat.csv")).unwrap_err();
        assert!(matches!(err, crate::Error::Io(_)));
    }

    #[test]
    fn parse_rejects_missing_cells() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        fs::write(&path, "step,position,confidence,carried\n0,0,0.5,0\n1,1,0.5,0\n").unwrap();
        fs::write(aggregates_path(&path), "step,mean,min\n").unwrap();
        assert!(parse_heatmap(&path).is_err());
    }
}
