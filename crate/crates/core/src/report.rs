//! Report rendering: JSON of every cell, a CSV grid, an SVG heatmap and
//! the pass/fail verdict of the sanity tests.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::InputFormat;
use crate::matrix::{CellKey, Dataset, EvalMatrix};
use crate::stats::{delong_test, DelongResult};

pub const SCHEMA_VERSION: u32 = 1;

impl FromStr for Dataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dev" | "development" => Ok(Dataset::Development),
            "gen" | "generalization" => Ok(Dataset::Generalization),
            _ => Err(Error::InvalidConfig(format!("unknown dataset {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerdictConfig {
    /// A sanity cell fails only when its lower bound exceeds `0.5 + band`.
    pub band: f64,
    /// Also gate on target-removed cells of systems trained in other formats.
    pub gate_all_target_removed: bool,
    pub roi_check_gates_verdict: bool,
}

impl Default for VerdictConfig {
    fn default() -> Self {
        VerdictConfig { band: 0.0, gate_all_target_removed: false, roi_check_gates_verdict: false }
    }
}

impl VerdictConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.band) {
            return Err(Error::InvalidConfig(format!("verdict: band must lie in [0, 0.5), got {}", self.band)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SanityKind {
    /// Tested without the target.
    TargetRemoved,
    /// Trained and tested on noise images.
    Noise,
}

/// One cell that should sit at chance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SanityCheck {
    pub kind: SanityKind,
    pub cell: CellKey,
    pub mean_auc: f64,
    pub ci95: (f64, f64),
    pub gating: bool,
    pub passed: bool,
}

/// Does a system trained on the target alone keep its performance when
/// shown the whole image?
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiCheck {
    pub narrow: CellKey,
    pub wide: CellKey,
    pub comparison: DelongResult,
    pub gating: bool,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub pass: bool,
    pub band: f64,
    pub significance: f64,
    pub checks: Vec<SanityCheck>,
    pub roi: Option<RoiCheck>,
}

impl Verdict {
    pub fn failures(&self) -> impl Iterator<Item = &SanityCheck> {
        self.checks.iter().filter(|c| c.gating && !c.passed)
    }

    pub fn label(&self) -> &'static str {
        if self.pass {
            "PASS"
        } else {
            "FAIL"
        }
    }
}

/// A cell sits at chance unless its interval lies entirely above
/// `0.5 + band` while its mean is above one half.
pub fn at_chance(mean: f64, lo: f64, band: f64) -> bool {
    !(lo > 0.5 + band && mean > 0.5)
}

pub fn verdict(m: &EvalMatrix, cfg: &VerdictConfig) -> Result<Verdict> {
    cfg.validate()?;
    let mut checks = Vec::new();
    for c in &m.cells {
        let kind = match (c.key.dataset, c.key.test) {
            (Dataset::Development, InputFormat::TargetRemoved) => SanityKind::TargetRemoved,
            (Dataset::Development, InputFormat::Noise) if c.key.train == InputFormat::Noise => SanityKind::Noise,
            _ => continue,
        };
        let gating = c.self_test || cfg.gate_all_target_removed;
        checks.push(SanityCheck {
            kind,
            cell: c.key,
            mean_auc: c.mean_auc,
            ci95: c.ci95,
            gating,
            passed: at_chance(c.mean_auc, c.ci95.0, cfg.band),
        });
    }

    let narrow = CellKey::dev(InputFormat::TargetOnly, InputFormat::TargetOnly);
    let wide = CellKey::dev(InputFormat::TargetOnly, InputFormat::Original);
    let roi = match (m.cell(narrow), m.cell(wide)) {
        (Some(a), Some(b)) => {
            let comparison = delong_test(&a.pooled, &b.pooled)?;
            let passed = !comparison.significant(m.significance);
            Some(RoiCheck { narrow, wide, comparison, gating: cfg.roi_check_gates_verdict, passed })
        }
        _ => None,
    };

    let roi_ok = roi.as_ref().is_none_or(|r| !r.gating || r.passed);
    let pass = checks.iter().all(|c| !c.gating || c.passed) && roi_ok;
    Ok(Verdict { pass, band: cfg.band, significance: m.significance, checks, roi })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub matrix: EvalMatrix,
    pub verdict: Verdict,
}

impl Report {
    pub fn new(matrix: EvalMatrix, cfg: &VerdictConfig) -> Result<Self> {
        let verdict = verdict(&matrix, cfg)?;
        Ok(Report { schema_version: SCHEMA_VERSION, matrix, verdict })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let r: Report = serde_json::from_str(text).map_err(|e| Error::json(path, e))?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::UnsupportedVersion { path: path.into(), found: r.schema_version.into() });
        }
        Ok(r)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Report::from_json(&text, path)
    }
}

/// The heatmap grid: rows are training formats, columns are
/// (dataset, test format).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub rows: Vec<InputFormat>,
    pub columns: Vec<(Dataset, InputFormat)>,
    /// `(mean, lo, hi)` per row and column.
    pub values: Vec<Vec<Option<(f64, f64, f64)>>>,
}

fn column_name((d, f): (Dataset, InputFormat)) -> String {
    format!("{}/{}", d.short(), f)
}

impl Grid {
    pub fn from_matrix(m: &EvalMatrix) -> Self {
        let columns: Vec<_> = m
            .dev_formats
            .iter()
            .map(|&f| (Dataset::Development, f))
            .chain(m.gen_formats.iter().map(|&f| (Dataset::Generalization, f)))
            .collect();
        let values = m
            .train_formats
            .iter()
            .map(|&t| {
                columns
                    .iter()
                    .map(|&(d, f)| m.cell(CellKey::new(t, d, f)).map(|c| (c.mean_auc, c.ci95.0, c.ci95.1)))
                    .collect()
            })
            .collect();
        Grid { rows: m.train_formats.clone(), columns, values }
    }

    /// Values use the shortest representation that parses back exactly.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["train".to_string()];
        header.extend(self.columns.iter().map(|&c| column_name(c)));
        w.write_record(&header).expect("in-memory write");
        for (row, vals) in self.rows.iter().zip(&self.values) {
            let mut rec = vec![row.to_string()];
            rec.extend(vals.iter().map(|v| v.map(|(m, l, h)| format!("{m},{l},{h}")).unwrap_or_default()));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::InvalidConfig(format!("heatmap csv: {msg}"));
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
        let columns = header
            .iter()
            .skip(1)
            .map(|h| {
                let (d, f) = h.split_once('/').ok_or_else(|| bad(format!("column {h:?}")))?;
                Ok((d.parse()?, f.parse()?))
            })
            .collect::<Result<Vec<_>>>()?;
        let (mut rows, mut values) = (Vec::new(), Vec::new());
        for rec in r.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            rows.push(rec.get(0).unwrap_or_default().parse()?);
            let vals = rec
                .iter()
                .skip(1)
                .map(|cell| {
                    if cell.is_empty() {
                        return Ok(None);
                    }
                    let v: Vec<f64> = cell
                        .split(',')
                        .map(|x| x.parse::<f64>().map_err(|_| bad(format!("value {cell:?}"))))
                        .collect::<Result<_>>()?;
                    match v[..] {
                        [m, l, h] => Ok(Some((m, l, h))),
                        _ => Err(bad(format!("cell {cell:?} is not mean,lo,hi"))),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            values.push(vals);
        }
        Ok(Grid { rows, columns, values })
    }

    pub fn to_svg(&self) -> String {
        const LABEL_W: usize = 130;
        const HEAD_H: usize = 40;
        const CELL_W: usize = 150;
        const CELL_H: usize = 44;
        let width = LABEL_W + CELL_W * self.columns.len() + 10;
        let height = HEAD_H + CELL_H * self.rows.len() + 10;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
        for (j, &c) in self.columns.iter().enumerate() {
            let x = LABEL_W + j * CELL_W + CELL_W / 2;
            let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, HEAD_H - 14, column_name(c));
        }
        for (i, (row, vals)) in self.rows.iter().zip(&self.values).enumerate() {
            let y = HEAD_H + i * CELL_H;
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{row}</text>"#, LABEL_W - 8, y + CELL_H / 2 + 4);
            for (j, v) in vals.iter().enumerate() {
                let x = LABEL_W + j * CELL_W;
                let (fill, text) = match v {
                    Some((m, l, h)) => (heat_color(*m), format!("{m:.2} ({l:.2}\u{2013}{h:.2})")),
                    None => ("#eeeeee".to_string(), "n/a".to_string()),
                };
                let _ = writeln!(
                    s,
                    r#"<rect x="{x}" y="{y}" width="{CELL_W}" height="{CELL_H}" fill="{fill}" stroke="white"/>"#
                );
                let _ = writeln!(
                    s,
                    r#"<text x="{}" y="{}" text-anchor="middle">{text}</text>"#,
                    x + CELL_W / 2,
                    y + CELL_H / 2 + 4
                );
            }
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Diverging scale: blue at 0, white at 0.5, red at 1.
pub fn heat_color(auc: f64) -> String {
    let t = auc.clamp(0.0, 1.0);
    let (r, g, b) = if t >= 0.5 {
        let u = (t - 0.5) * 2.0;
        (255.0, 255.0 * (1.0 - u) + 60.0 * u, 255.0 * (1.0 - u) + 50.0 * u)
    } else {
        let u = (0.5 - t) * 2.0;
        (255.0 * (1.0 - u) + 50.0 * u, 255.0 * (1.0 - u) + 90.0 * u, 255.0)
    };
    format!("#{:02x}{:02x}{:02x}", r.round() as u8, g.round() as u8, b.round() as u8)
}

/// Human-readable summary of the verdict and the pairwise tests.
pub fn verdict_text(r: &Report) -> String {
    let v = &r.verdict;
    let mut s = String::new();
    let _ = writeln!(s, "verdict: {}", v.label());
    for c in &v.checks {
        let _ = writeln!(
            s,
            "  {} {:<40} mean {:.3} ci [{:.3}, {:.3}]{}",
            if c.passed { "ok  " } else { "FAIL" },
            c.cell.to_string(),
            c.mean_auc,
            c.ci95.0,
            c.ci95.1,
            if c.gating { "" } else { " (reported only)" }
        );
    }
    if let Some(roi) = &v.roi {
        let _ = writeln!(
            s,
            "  {} roi: {} vs {} diff {:.3} p {:.4}{}",
            if roi.passed { "ok  " } else { "FAIL" },
            roi.narrow,
            roi.wide,
            roi.comparison.auc_diff,
            roi.comparison.p,
            if roi.gating { "" } else { " (reported only)" }
        );
    }
    for p in &r.matrix.pairwise {
        let _ = writeln!(
            s,
            "  delong {} vs {}: diff {:.3} p {:.4}{}",
            p.a,
            p.b,
            p.result.auc_diff,
            p.result.p,
            if p.significant { " *" } else { "" }
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub json: PathBuf,
    pub csv: PathBuf,
    pub svg: PathBuf,
    pub verdict: PathBuf,
}

pub fn render_report(r: &Report, out_dir: impl AsRef<Path>) -> Result<ReportFiles> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = ReportFiles {
        json: dir.join("report.json"),
        csv: dir.join("heatmap.csv"),
        svg: dir.join("heatmap.svg"),
        verdict: dir.join("verdict.txt"),
    };
    let grid = Grid::from_matrix(&r.matrix);
    for (path, body) in [
        (&files.json, r.to_json()),
        (&files.csv, grid.to_csv()),
        (&files.svg, grid.to_svg()),
        (&files.verdict, verdict_text(r)),
    ] {
        fs::write(path, body).map_err(|e| Error::io(path, e))?;
    }
    Ok(files)
}
