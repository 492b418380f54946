//! Step-by-step decode replay with a pruned cache and a full reference cache in lockstep.
//!
//! Step 0 is the prefill: the whole prompt is cached at once, scored and possibly pruned. Every
//! later step appends its new tokens, measures how far the latest query's attention output over
//! the pruned cache drifts from the full-cache output, then lets the policy evict. A layer whose
//! cache has been pruned attends with the policy's smoothing constant; untouched layers use plain
//! softmax.

use std::env;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::KvCache;
use crate::config::PruneConfig;
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::policies::{new_policy, PolicyDecision, PolicyKind};
use crate::scoring::{n_softmax_row, Logits};
use crate::synth::{synth_decoder, SynthModel, SynthSpec};
use crate::trace::AttentionTrace;

/// Anything that can be replayed: a trace plus keys and values for every position.
pub trait DecodeSource: Sync {
    fn trace(&self) -> &AttentionTrace;

    /// Key and value vectors (length `head_dim`) of `position` in `layer`.
    fn key_value(&self, layer: usize, position: usize) -> (Vec<f64>, Vec<f64>);
}

/// The synthetic model together with the trace it produced.
pub struct SynthSource {
    model: SynthModel,
    trace: AttentionTrace,
}

impl SynthSource {
    pub fn new(spec: &SynthSpec) -> Result<Self> {
        let model = synth_decoder(spec)?;
        let trace = model.trace();
        Ok(Self { model, trace })
    }

    pub fn spec(&self) -> &SynthSpec {
        self.model.spec()
    }
}

impl DecodeSource for SynthSource {
    fn trace(&self) -> &AttentionTrace {
        &self.trace
    }

    fn key_value(&self, layer: usize, position: usize) -> (Vec<f64>, Vec<f64>) {
        self.model.key_value(layer, position)
    }
}

/// A recorded trace. Traces carry logits only, so keys and values are drawn from a seeded
/// generator keyed by `(seed, layer, position)`.
pub struct ReplaySource {
    trace: AttentionTrace,
    seed: u64,
}

impl ReplaySource {
    pub fn new(trace: AttentionTrace, seed: u64) -> Result<Self> {
        trace.validate()?;
        Ok(Self { trace, seed })
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl DecodeSource for ReplaySource {
    fn trace(&self) -> &AttentionTrace {
        &self.trace
    }

    fn key_value(&self, layer: usize, position: usize) -> (Vec<f64>, Vec<f64>) {
        let key = splitmix(splitmix(self.seed ^ splitmix(layer as u64)) ^ position as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let mut draw = || -> Vec<f64> {
            (0..self.trace.head_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect()
        };
        let k = draw();
        let v = draw();
        (k, v)
    }
}

/// One policy invocation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepEvent {
    pub step: usize,
    pub layer: usize,
    pub decision: PolicyDecision,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub policy: PolicyKind,
    pub config: PruneConfig,
    /// One entry per (step, layer), step-major.
    pub per_step: Vec<StepEvent>,
    /// Per step, the layer mean of the head-stacked L2 distance at the latest query.
    pub recon_error: Vec<f64>,
    /// Mean over steps of pruned-cache length divided by full-cache length.
    pub achieved_budget_fraction: f64,
    /// Text and visual share of the final caches.
    pub retained_modality_mix: (f64, f64),
    /// Text and visual token counts of the final caches, summed over layers.
    pub final_modality_counts: (usize, usize),
    /// Bytes held by the pruned caches after each step.
    pub bytes_cached: Vec<usize>,
    /// Bytes a full cache holds after each step.
    pub full_bytes: Vec<usize>,
}

impl RunReport {
    pub fn mean_recon_error(&self) -> f64 {
        if self.recon_error.is_empty() {
            0.0
        } else {
            self.recon_error.iter().sum::<f64>() / self.recon_error.len() as f64
        }
    }

    /// Decisions of the steps where eviction ran.
    pub fn pruning_events(&self) -> impl Iterator<Item = &StepEvent> {
        self.per_step.iter().filter(|e| e.decision.triggered)
    }

    /// Mean cache length per layer after the last step.
    pub fn final_occupancy(&self) -> f64 {
        let (t, v) = self.final_modality_counts;
        let layers = self.per_step.iter().map(|e| e.layer + 1).max().unwrap_or(1);
        (t + v) as f64 / layers as f64
    }
}

fn attend(weights: &[f64], values: &KvCache) -> Vec<f64> {
    let mut out = vec![0.0; values.head_dim()];
    for (w, v) in weights.iter().zip(values.values().iter_rows()) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    out
}

/// Head-stacked L2 distance between the latest query's outputs over the two caches.
fn output_gap(
    heads: &[Logits],
    full: &KvCache,
    pruned: &KvCache,
    pruned_cols: &[usize],
    n: f64,
) -> Result<f64> {
    let all: Vec<usize> = (0..full.len()).collect();
    let kept: Vec<usize> = (0..pruned.len()).collect();
    let mut sq = 0.0;
    for h in heads {
        let row = h.row(h.rows() - 1);
        let reference = attend(&n_softmax_row(row, &all, 0.0)?, full);
        let sub: Vec<f64> = pruned_cols.iter().map(|&c| row[c]).collect();
        let approx = attend(&n_softmax_row(&sub, &kept, n)?, pruned);
        sq += reference
            .iter()
            .zip(&approx)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(sq.sqrt())
}

fn check_step_shape(trace: &AttentionTrace, s: usize, keys: usize) -> Result<()> {
    let step = &trace.steps[s];
    if step.logits.len() != trace.layers {
        return Err(Error::TraceShape {
            step: s,
            reason: format!("{} layers, header says {}", step.logits.len(), trace.layers),
        });
    }
    for (layer, heads) in step.logits.iter().enumerate() {
        if heads.len() != trace.heads {
            return Err(Error::TraceShape {
                step: s,
                reason: format!("layer {layer} has {} heads, header says {}", heads.len(), trace.heads),
            });
        }
        if let Some(h) = heads.iter().find(|h| h.cols() != keys || h.rows() == 0 || h.rows() > keys) {
            return Err(Error::TraceShape {
                step: s,
                reason: format!("layer {layer} block is {}x{} with {keys} keys", h.rows(), h.cols()),
            });
        }
    }
    Ok(())
}

/// Replays every step of `source` under `policy`.
pub fn run_decode(source: &dyn DecodeSource, policy: PolicyKind, cfg: &PruneConfig) -> Result<RunReport> {
    let cfg = cfg.clone().validate()?;
    let trace = source.trace();
    if trace.layers == 0 {
        return Err(Error::Layerless);
    }
    let d = trace.head_dim;
    let mut pruned: Vec<KvCache> = (0..trace.layers).map(|_| KvCache::empty(d)).collect::<Result<_>>()?;
    let mut full = pruned.clone();
    let mut policies: Vec<_> = (0..trace.layers).map(|_| new_policy(policy)).collect();
    let mut smoothed = vec![false; trace.layers];
    let mut tags = trace.prefill.clone();
    let mut fresh: Vec<(usize, Modality)> = tags.as_slice().iter().copied().enumerate().collect();

    let mut per_step = Vec::with_capacity(trace.steps.len() * trace.layers);
    let mut recon_error = Vec::with_capacity(trace.steps.len());
    let mut bytes_cached = Vec::with_capacity(trace.steps.len());
    let mut full_bytes = Vec::with_capacity(trace.steps.len());
    let mut occupancy = Vec::with_capacity(trace.steps.len());

    for (s, step) in trace.steps.iter().enumerate() {
        if s > 0 {
            let start = tags.len();
            tags.extend_from(step.new_tags.as_slice());
            fresh = (start..tags.len()).map(|p| (p, tags.get(p))).collect();
        }
        let keys = tags.len();
        check_step_shape(trace, s, keys)?;
        for layer in 0..trace.layers {
            for &(p, tag) in &fresh {
                let (k, v) = source.key_value(layer, p);
                if k.len() != d || v.len() != d {
                    return Err(Error::DimensionMismatch {
                        what: "key/value width vs head dimension",
                        expected: d,
                        found: k.len().min(v.len()),
                    });
                }
                pruned[layer].append(&k, &v, tag, p)?;
                full[layer].append(&k, &v, tag, p)?;
            }
        }

        let mut gap = 0.0;
        for (layer, heads) in step.logits.iter().enumerate() {
            let cols = pruned[layer].positions().to_vec();
            let n = if smoothed[layer] { policies[layer].deployed_n(&cfg) } else { 0.0 };
            gap += output_gap(heads, &full[layer], &pruned[layer], &cols, n)?;

            let local: Vec<Logits> = heads.iter().map(|h| h.select_cols(&cols)).collect();
            let query_tags = tags.tail(heads[0].rows());
            let (next, decision) = policies[layer].step(&pruned[layer], &local, &query_tags, &cfg)?;
            smoothed[layer] |= decision.triggered;
            pruned[layer] = next;
            per_step.push(StepEvent { step: s, layer, decision });
        }
        recon_error.push(gap / trace.layers as f64);
        let held: usize = pruned.iter().map(KvCache::len).sum();
        let total: usize = full.iter().map(KvCache::len).sum();
        occupancy.push(held as f64 / total.max(1) as f64);
        bytes_cached.push(pruned.iter().map(KvCache::bytes).sum());
        full_bytes.push(full.iter().map(KvCache::bytes).sum());
    }

    let text: usize = pruned.iter().map(|c| c.tags().text_count()).sum();
    let visual: usize = pruned.iter().map(|c| c.tags().visual_count()).sum();
    let held = (text + visual).max(1) as f64;
    Ok(RunReport {
        policy,
        config: cfg,
        per_step,
        recon_error,
        achieved_budget_fraction: occupancy.iter().sum::<f64>() / occupancy.len().max(1) as f64,
        retained_modality_mix: (text as f64 / held, visual as f64 / held),
        final_modality_counts: (text, visual),
        bytes_cached,
        full_bytes,
    })
}

/// Budget length for a fraction of `full_len`; fractions of 1 or more never trigger eviction.
pub fn budget_for_fraction(fraction: f64, full_len: usize) -> Result<usize> {
    if !(fraction > 0.0 && fraction.is_finite()) {
        return Err(Error::InvalidBudgetFraction(fraction));
    }
    if fraction >= 1.0 {
        Ok(full_len + 1)
    } else {
        Ok((fraction * full_len as f64).ceil() as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    BudgetFraction,
    CrossRatio,
    SmoothN,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "budget" | "budget_fraction" | "budget-fraction" => Ok(SweepAxis::BudgetFraction),
            "ratio" | "cross_ratio" | "cross-ratio" => Ok(SweepAxis::CrossRatio),
            "n" | "smooth_n" | "smooth-n" => Ok(SweepAxis::SmoothN),
            _ => Err(Error::UnknownName {
                kind: "sweep axis",
                value: s.to_string(),
            }),
        }
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepAxis::BudgetFraction => "budget_fraction",
            SweepAxis::CrossRatio => "cross_ratio",
            SweepAxis::SmoothN => "smooth_n",
        })
    }
}

/// Fixed settings of a run: the policy, its config and the budget as a fraction of the final
/// sequence length (which overrides `cfg.budget`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub policy: PolicyKind,
    pub budget_fraction: f64,
    pub cfg: PruneConfig,
}

impl RunSettings {
    pub fn resolve(&self, full_len: usize) -> Result<PruneConfig> {
        let mut cfg = self.cfg.clone();
        cfg.budget = budget_for_fraction(self.budget_fraction, full_len)?;
        Ok(cfg.validate()?)
    }

    pub fn with_axis(&self, axis: SweepAxis, value: f64) -> Self {
        let mut out = self.clone();
        match axis {
            SweepAxis::BudgetFraction => out.budget_fraction = value,
            SweepAxis::CrossRatio => out.cfg.cross_ratio = value,
            SweepAxis::SmoothN => out.cfg.smooth_n = value,
        }
        out
    }

    pub fn run(&self, source: &dyn DecodeSource) -> Result<RunReport> {
        let cfg = self.resolve(source.trace().final_len())?;
        run_decode(source, self.policy, &cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub value: f64,
    pub settings: RunSettings,
    pub report: RunReport,
}

/// Worker count from `KVPRUNE_THREADS`, or the rayon default when unset or unparsable.
pub fn thread_count() -> usize {
    env::var("KVPRUNE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

/// Runs every grid value in parallel; rows come back in grid order.
pub fn sweep(source: &dyn DecodeSource, axis: SweepAxis, grid: &[f64], base: &RunSettings) -> Result<Vec<SweepPoint>> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let full_len = source.trace().final_len();
    let settings: Vec<RunSettings> = grid.iter().map(|&v| base.with_axis(axis, v)).collect();
    for s in &settings {
        s.resolve(full_len)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    pool.install(|| {
        grid.par_iter()
            .zip(settings.par_iter())
            .map(|(&value, s)| {
                Ok(SweepPoint {
                    value,
                    settings: s.clone(),
                    report: s.run(source)?,
                })
            })
            .collect()
    })
}

/// Convenience: synthesize and run in one call.
pub fn run_synth(spec: &SynthSpec, settings: &RunSettings) -> Result<RunReport> {
    settings.run(&SynthSource::new(spec)?)
}
