//! CSV tables for run reports, sweeps and diagnostics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::diagnostics::{DivergenceReport, LayerCurves};
use crate::error::Result;
use crate::simulator::{RunReport, RunSettings, SweepPoint};

/// Formats with 9 significant digits, trailing zeros dropped, in the style of `%.9g`.
pub fn sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// A header plus rows of already formatted cells.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&'static str]) -> Self {
        Self {
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn append(&mut self, other: Table) {
        self.rows.extend(other.rows);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(fs::write(path, self.to_csv())?)
    }
}

pub const STEP_HEADER: [&str; 12] = [
    "policy",
    "step",
    "layer",
    "triggered",
    "occupancy",
    "text_retained",
    "visual_retained",
    "k_intra",
    "k_inter",
    "recon_error",
    "bytes_cached",
    "full_bytes",
];

/// One row per (step, layer) policy invocation.
pub fn step_table(report: &RunReport) -> Table {
    let mut t = Table::new(&STEP_HEADER);
    for e in &report.per_step {
        let d = &e.decision;
        t.push(vec![
            report.policy.label().to_string(),
            e.step.to_string(),
            e.layer.to_string(),
            u8::from(d.triggered).to_string(),
            d.achieved_occupancy.to_string(),
            d.per_modality_retained.0.to_string(),
            d.per_modality_retained.1.to_string(),
            d.ks_used.0.to_string(),
            d.ks_used.1.to_string(),
            sig9(report.recon_error[e.step]),
            report.bytes_cached[e.step].to_string(),
            report.full_bytes[e.step].to_string(),
        ]);
    }
    t
}

/// Summary of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultsRow {
    pub policy: String,
    pub budget_fraction: f64,
    pub cross_ratio: f64,
    pub smooth_n: f64,
    pub seed: u64,
    pub achieved_occupancy: f64,
    pub text_retained: usize,
    pub visual_retained: usize,
    pub mean_recon_error: f64,
    pub bytes_cached: usize,
    pub full_bytes: usize,
}

pub const RESULTS_HEADER: [&str; 11] = [
    "policy",
    "budget_fraction",
    "cross_ratio",
    "smooth_n",
    "seed",
    "achieved_occupancy",
    "text_retained",
    "visual_retained",
    "mean_recon_error",
    "bytes_cached",
    "full_bytes",
];

impl ResultsRow {
    pub fn new(settings: &RunSettings, report: &RunReport) -> Self {
        Self {
            policy: settings.policy.label().to_string(),
            budget_fraction: settings.budget_fraction,
            cross_ratio: settings.cfg.cross_ratio,
            smooth_n: settings.cfg.smooth_n,
            seed: settings.cfg.seed,
            achieved_occupancy: report.achieved_budget_fraction,
            text_retained: report.final_modality_counts.0,
            visual_retained: report.final_modality_counts.1,
            mean_recon_error: report.mean_recon_error(),
            bytes_cached: report.bytes_cached.last().copied().unwrap_or(0),
            full_bytes: report.full_bytes.last().copied().unwrap_or(0),
        }
    }

    pub fn cells(&self) -> Vec<String> {
        vec![
            self.policy.clone(),
            sig9(self.budget_fraction),
            sig9(self.cross_ratio),
            sig9(self.smooth_n),
            self.seed.to_string(),
            sig9(self.achieved_occupancy),
            self.text_retained.to_string(),
            self.visual_retained.to_string(),
            sig9(self.mean_recon_error),
            self.bytes_cached.to_string(),
            self.full_bytes.to_string(),
        ]
    }
}

pub fn results_table(rows: &[ResultsRow]) -> Table {
    let mut t = Table::new(&RESULTS_HEADER);
    rows.iter().for_each(|r| t.push(r.cells()));
    t
}

pub fn sweep_rows(points: &[SweepPoint]) -> Vec<ResultsRow> {
    points.iter().map(|p| ResultsRow::new(&p.settings, &p.report)).collect()
}

pub fn divergence_table(report: &DivergenceReport) -> Table {
    let mut t = Table::new(&["layer", "js", "intra_samples", "inter_samples", "bins", "epsilon"]);
    for l in &report.per_layer {
        t.push(vec![
            l.layer.to_string(),
            sig9(l.js),
            l.intra_samples.to_string(),
            l.inter_samples.to_string(),
            report.bins.to_string(),
            sig9(report.epsilon),
        ]);
    }
    t
}

pub fn density_table(curves: &[LayerCurves]) -> Table {
    let mut t = Table::new(&["layer", "series", "x", "density", "bandwidth"]);
    for c in curves {
        for (name, curve) in [("intra", &c.intra), ("inter", &c.inter)] {
            let h = sig9(curve.bandwidth);
            for (x, y) in curve.grid.iter().zip(&curve.density) {
                t.push(vec![c.layer.to_string(), name.into(), sig9(*x), sig9(*y), h.clone()]);
            }
        }
    }
    t
}

/// Pretty JSON of any resolved configuration, newline-terminated.
pub fn sidecar_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    let _ = writeln!(s);
    Ok(s)
}
