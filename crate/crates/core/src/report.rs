//! Result tables, CMC data and qualitative image grids.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::dataio::{ImageTensor, Protocol};
use crate::error::{Error, Result};
use crate::recog::Metrics;

const METHOD_ORDER: [&str; 4] = ["plain", "patch", "pix2pix", "tvgan"];

/// Human-readable method name.
pub fn display_name(method: &str) -> &str {
    match method {
        "plain" => "Plain thermal",
        "patch" => "Patch-based",
        "pix2pix" => "Pix2Pix",
        "tvgan" => "TV-GAN",
        other => other,
    }
}

fn method_key(method: &str) -> (usize, &str) {
    let pos = METHOD_ORDER.iter().position(|m| *m == method).unwrap_or(METHOD_ORDER.len());
    (pos, method)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    /// Mean accuracy in percent, one value per rank level.
    pub values: Vec<f64>,
    pub n_splits: usize,
}

/// Mean rank-k accuracy (percent) across splits, one row per method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub protocol: Protocol,
    pub ranks: Vec<usize>,
    pub rows: Vec<TableRow>,
    pub n_splits: usize,
}

fn common_protocol(metrics: &[Metrics]) -> Result<Protocol> {
    let first = metrics.first().ok_or_else(|| Error::invalid("no metrics given"))?;
    if let Some(m) = metrics.iter().find(|m| m.protocol != first.protocol) {
        return Err(Error::invalid(format!(
            "mixed protocols: {} ({}/{}) and {} ({}/{})",
            first.protocol, first.method, first.split, m.protocol, m.method, m.split
        )));
    }
    Ok(first.protocol)
}

fn group_by_method(metrics: &[Metrics]) -> Vec<(&str, Vec<&Metrics>)> {
    let mut groups: BTreeMap<(usize, &str), Vec<&Metrics>> = BTreeMap::new();
    for m in metrics {
        groups.entry(method_key(&m.method)).or_default().push(m);
    }
    groups.into_iter().map(|((_, name), v)| (name, v)).collect()
}

impl ResultsTable {
    pub fn from_metrics(metrics: &[Metrics]) -> Result<Self> {
        let protocol = common_protocol(metrics)?;
        let ranks: Vec<usize> = metrics[0].accuracies.keys().copied().collect();
        if let Some(m) = metrics.iter().find(|m| !m.accuracies.keys().copied().eq(ranks.iter().copied())) {
            return Err(Error::invalid(format!(
                "metrics for {}/{} use different rank levels",
                m.method, m.split
            )));
        }
        let rows: Vec<TableRow> = group_by_method(metrics)
            .into_iter()
            .map(|(method, group)| {
                let n = group.len() as f64;
                let values = ranks
                    .iter()
                    .map(|k| group.iter().map(|m| 100.0 * m.accuracies[k]).sum::<f64>() / n)
                    .collect();
                TableRow {
                    method: method.to_string(),
                    values,
                    n_splits: group.len(),
                }
            })
            .collect();
        let n_splits = rows.iter().map(|r| r.n_splits).max().unwrap_or(0);
        Ok(ResultsTable {
            protocol,
            ranks,
            rows,
            n_splits,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method");
        for k in &self.ranks {
            let _ = write!(out, ",rank{k}");
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.method);
            for v in &row.values {
                let _ = write!(out, ",{v:.1}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Method |");
        for k in &self.ranks {
            let _ = write!(out, " Rank {k} |");
        }
        out.push_str("\n|---|");
        out.push_str(&"---:|".repeat(self.ranks.len()));
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "| {} |", display_name(&row.method));
            for v in &row.values {
                let _ = write!(out, " {v:.1} |");
            }
            out.push('\n');
        }
        out
    }
}

/// CSV of split-averaged CMC curves: `rank,<method>...`.
pub fn cmc_csv(metrics: &[Metrics]) -> Result<String> {
    common_protocol(metrics)?;
    let groups = group_by_method(metrics);
    let len = metrics[0].cmc.len();
    if let Some(m) = metrics.iter().find(|m| m.cmc.len() != len) {
        return Err(Error::invalid(format!(
            "CMC of {}/{} has {} points, expected {len}",
            m.method,
            m.split,
            m.cmc.len()
        )));
    }
    let curves: Vec<Vec<f64>> = groups
        .iter()
        .map(|(_, g)| (0..len).map(|i| g.iter().map(|m| m.cmc[i]).sum::<f64>() / g.len() as f64).collect())
        .collect();
    let mut out = String::from("rank");
    for (name, _) in &groups {
        let _ = write!(out, ",{name}");
    }
    out.push('\n');
    for i in 0..len {
        let _ = write!(out, "{}", i + 1);
        for c in &curves {
            let _ = write!(out, ",{}", c[i]);
        }
        out.push('\n');
    }
    Ok(out)
}

const GRID_PAD: u32 = 2;

/// Tiles images row by row with a white border. All images must share one
/// size; single-channel images are shown in grey.
pub fn image_grid(rows: &[Vec<ImageTensor>]) -> Result<RgbImage> {
    let first = rows
        .iter()
        .flat_map(|r| r.first())
        .next()
        .ok_or_else(|| Error::invalid("image grid needs at least one image"))?;
    let (h, w) = (first.height() as u32, first.width() as u32);
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0) as u32;
    let mut canvas = RgbImage::from_pixel(
        GRID_PAD + cols * (w + GRID_PAD),
        GRID_PAD + rows.len() as u32 * (h + GRID_PAD),
        Rgb([255, 255, 255]),
    );
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            if img.height() as u32 != h || img.width() as u32 != w {
                return Err(Error::shape(format!(
                    "grid cell ({r}, {c}) is {}x{}, expected {h}x{w}",
                    img.height(),
                    img.width()
                )));
            }
            let tile = img.to_rgb_image();
            let (x0, y0) = (GRID_PAD + c as u32 * (w + GRID_PAD), GRID_PAD + r as u32 * (h + GRID_PAD));
            for (x, y, p) in tile.enumerate_pixels() {
                canvas.put_pixel(x0 + x, y0 + y, *p);
            }
        }
    }
    Ok(canvas)
}

pub fn save_image_grid(rows: &[Vec<ImageTensor>], path: &Path) -> Result<()> {
    image_grid(rows)?.save(path)?;
    Ok(())
}
