//! Density estimates and divergences of intra- versus inter-modality attention weights.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decompose::block_views;
use crate::error::{Error, Result};
use crate::scoring::{softmax_rows, trim_observation};
use crate::trace::AttentionTrace;

pub const KDE_GRID_POINTS: usize = 512;
const BANDWIDTH_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// Silverman's rule of thumb.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl DensityCurve {
    /// Trapezoidal integral over the grid.
    pub fn integral(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
            .sum()
    }

    pub fn peak(&self) -> f64 {
        self.density.iter().copied().fold(0.0, f64::max)
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Silverman bandwidth `1.06 * min(std, IQR / 1.34) * n^(-1/5)`, with the spread floored.
pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let std = if samples.len() > 1 {
        (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let spread = std.min(iqr / 1.34).max(BANDWIDTH_FLOOR);
    Ok(1.06 * spread * n.powf(-0.2))
}

/// Gaussian kernel density estimate on 512 points spanning four bandwidths past the samples.
pub fn kde(samples: &[f64], bandwidth: Bandwidth) -> Result<DensityCurve> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    let h = match bandwidth {
        Bandwidth::Auto => silverman_bandwidth(samples)?,
        Bandwidth::Fixed(h) if h > 0.0 && h.is_finite() => h,
        Bandwidth::Fixed(h) => return Err(Error::InvalidBandwidth(h)),
    };
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min) - 4.0 * h;
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 4.0 * h;
    let step = (hi - lo) / (KDE_GRID_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..KDE_GRID_POINTS).map(|i| lo + step * i as f64).collect();
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let density = grid
        .par_iter()
        .map(|&x| {
            samples
                .iter()
                .map(|s| {
                    let z = (x - s) / h;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
                * norm
        })
        .collect();
    Ok(DensityCurve {
        grid,
        density,
        bandwidth: h,
    })
}

pub const DEFAULT_BINS: usize = 64;
pub const DEFAULT_EPSILON: f64 = 1e-10;

fn histogram(samples: &[f64], lo: f64, width: f64, bins: usize, eps: f64) -> Vec<f64> {
    let mut counts = vec![0.0; bins];
    for &x in samples {
        let i = if width > 0.0 {
            (((x - lo) / width * bins as f64) as usize).min(bins - 1)
        } else {
            0
        };
        counts[i] += 1.0;
    }
    let total: f64 = counts.iter().map(|c| c + eps).sum();
    counts.iter().map(|c| (c + eps) / total).collect()
}

/// Jensen-Shannon divergence (nats) between histograms of two sample sets on their joint range,
/// with `eps` added to every bin.
pub fn js_divergence_with(p: &[f64], q: &[f64], bins: usize, eps: f64) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::EmptySamples);
    }
    if bins < 2 {
        return Err(Error::TooFewBins(bins));
    }
    let (lo, hi) = p
        .iter()
        .chain(q)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let hp = histogram(p, lo, hi - lo, bins, eps);
    let hq = histogram(q, lo, hi - lo, bins, eps);
    let js: f64 = hp
        .iter()
        .zip(&hq)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            0.5 * (a * (a / m).ln() + b * (b / m).ln())
        })
        .sum();
    Ok(js.clamp(0.0, std::f64::consts::LN_2))
}

pub fn js_divergence(p: &[f64], q: &[f64], bins: usize) -> Result<f64> {
    js_divergence_with(p, q, bins, DEFAULT_EPSILON)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub bins: usize,
    pub epsilon: f64,
    /// Query rows per step taken from the end of each block.
    pub obs_window: usize,
    /// Most recent keys left out of the samples.
    pub recent: usize,
    /// Density curves use at most this many evenly strided samples; divergences use all.
    pub kde_max_samples: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            bins: DEFAULT_BINS,
            epsilon: DEFAULT_EPSILON,
            obs_window: 32,
            recent: 32,
            kde_max_samples: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerDivergence {
    pub layer: usize,
    pub js: f64,
    pub intra_samples: usize,
    pub inter_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivergenceReport {
    pub per_layer: Vec<LayerDivergence>,
    pub bins: usize,
    pub epsilon: f64,
}

/// Intra and inter density curves of one layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCurves {
    pub layer: usize,
    pub intra: DensityCurve,
    pub inter: DensityCurve,
}

fn strided(samples: &[f64], max: usize) -> Vec<f64> {
    if samples.len() <= max.max(1) {
        return samples.to_vec();
    }
    let max = max.max(1);
    (0..max).map(|i| samples[i * samples.len() / max]).collect()
}

/// Attention weights of one layer split by modality pairing, over every step and head.
pub fn layer_samples(trace: &AttentionTrace, layer: usize, cfg: &DiagnosticsConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut intra = Vec::new();
    let mut inter = Vec::new();
    for (s, step) in trace.steps.iter().enumerate() {
        let tags = trace.tags_at(s);
        for head in &step.logits[layer] {
            let w = softmax_rows(head);
            let recent = cfg.recent.min(w.cols() - 1);
            let window = trim_observation(&w, cfg.obs_window, recent)?;
            let q_tags = tags.tail(window.rows());
            let k_tags = tags.head(window.cols());
            let views = block_views(&window, &q_tags, &k_tags)?;
            intra.extend(views.intra_samples());
            inter.extend(views.inter_samples());
        }
    }
    Ok((intra, inter))
}

/// Per-layer divergence between intra and inter weights, with density curves for both.
pub fn layer_report(trace: &AttentionTrace, cfg: &DiagnosticsConfig) -> Result<(DivergenceReport, Vec<LayerCurves>)> {
    if trace.layers == 0 {
        return Err(Error::Layerless);
    }
    let rows: Vec<(LayerDivergence, LayerCurves)> = (0..trace.layers)
        .into_par_iter()
        .map(|layer| {
            let (intra, inter) = layer_samples(trace, layer, cfg)?;
            let js = js_divergence_with(&intra, &inter, cfg.bins, cfg.epsilon)?;
            let curves = LayerCurves {
                layer,
                intra: kde(&strided(&intra, cfg.kde_max_samples), Bandwidth::Auto)?,
                inter: kde(&strided(&inter, cfg.kde_max_samples), Bandwidth::Auto)?,
            };
            let div = LayerDivergence {
                layer,
                js,
                intra_samples: intra.len(),
                inter_samples: inter.len(),
            };
            Ok((div, curves))
        })
        .collect::<Result<_>>()?;
    let (per_layer, curves) = rows.into_iter().unzip();
    Ok((
        DivergenceReport {
            per_layer,
            bins: cfg.bins,
            epsilon: cfg.epsilon,
        },
        curves,
    ))
}
