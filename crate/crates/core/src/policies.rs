//! Eviction policies: cross-self pruning and simplified baselines.
//!
//! Every policy sees the same inputs at each decode step: the current cache and, per head, the
//! logits of the observation queries against every cached key. Baselines are single-knob
//! approximations of well-known methods and are labelled "-like" wherever they are reported.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cache::KvCache;
use crate::config::{HeadMode, PruneConfig};
use crate::decompose::{count_tag, cross_self_importance, ImportanceScores};
use crate::error::{Error, Result};
use crate::modality::{Modality, TaggedSequence};
use crate::scoring::{head_average, n_softmax_rows, trim_observation, Kept, Logits, Weights};
use crate::select::{apply_prune, cross_self_select, topk_mask, PruneMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Csp,
    GlobalTopK,
    AccumulatedScore,
    FullCache,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [
        PolicyKind::Csp,
        PolicyKind::GlobalTopK,
        PolicyKind::AccumulatedScore,
        PolicyKind::FullCache,
    ];

    /// Name accepted on the command line and in config files.
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Csp => "csp",
            PolicyKind::GlobalTopK => "global-topk",
            PolicyKind::AccumulatedScore => "accum",
            PolicyKind::FullCache => "full",
        }
    }

    /// Name used in reports.
    pub fn label(self) -> &'static str {
        match self {
            PolicyKind::Csp => "csp",
            PolicyKind::GlobalTopK => "snapkv-like",
            PolicyKind::AccumulatedScore => "h2o-like",
            PolicyKind::FullCache => "full",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "csp" => Ok(PolicyKind::Csp),
            "global-topk" | "snapkv" => Ok(PolicyKind::GlobalTopK),
            "accum" | "h2o" => Ok(PolicyKind::AccumulatedScore),
            "full" => Ok(PolicyKind::FullCache),
            other => Err(Error::UnknownName {
                kind: "policy",
                value: other.to_string(),
            }),
        }
    }
}

/// What a policy did at one step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyDecision {
    /// Whether eviction ran (the cache had reached the budget).
    pub triggered: bool,
    /// Retained indices over the non-recent prefix of the pre-step cache.
    pub retained_mask: PruneMask,
    /// `|retained_mask| + recent` after a prune, the unchanged length otherwise.
    pub achieved_occupancy: usize,
    /// Text and visual counts inside `retained_mask`.
    pub per_modality_retained: (usize, usize),
    pub ks_used: (usize, usize),
    /// Absolute positions held by the cache after the step.
    pub retained_positions: Vec<usize>,
}

impl PolicyDecision {
    fn no_op(cache: &KvCache, recent: usize) -> Self {
        let universe = cache.len().saturating_sub(recent);
        let mask = PruneMask::full(universe);
        let per_modality = modality_counts(cache.tags(), mask.indices());
        Self {
            triggered: false,
            retained_mask: mask,
            achieved_occupancy: cache.len(),
            per_modality_retained: per_modality,
            ks_used: (0, 0),
            retained_positions: cache.positions().to_vec(),
        }
    }

    fn pruned(before: &KvCache, after: &KvCache, mask: PruneMask, ks: (usize, usize), recent: usize) -> Self {
        let per_modality = modality_counts(before.tags(), mask.indices());
        Self {
            triggered: true,
            achieved_occupancy: mask.len() + recent,
            retained_mask: mask,
            per_modality_retained: per_modality,
            ks_used: ks,
            retained_positions: after.positions().to_vec(),
        }
    }
}

fn modality_counts(tags: &TaggedSequence, idx: &[usize]) -> (usize, usize) {
    (
        count_tag(tags, idx, Modality::Text),
        count_tag(tags, idx, Modality::Visual),
    )
}

fn check_inputs(cache: &KvCache, heads: &[Logits], query_tags: &TaggedSequence) -> Result<()> {
    if heads.is_empty() {
        return Err(Error::NoHeads);
    }
    for h in heads {
        if h.cols() != cache.len() {
            return Err(Error::DimensionMismatch {
                what: "logit columns vs cache length",
                expected: cache.len(),
                found: h.cols(),
            });
        }
        if h.rows() != query_tags.len() {
            return Err(Error::DimensionMismatch {
                what: "logit rows vs query tags",
                expected: query_tags.len(),
                found: h.rows(),
            });
        }
    }
    Ok(())
}

/// Per-head weights of the observation window over the non-recent keys.
fn windowed_heads(heads: &[Logits], cfg: &PruneConfig, n: f64) -> Result<Vec<Weights>> {
    heads
        .iter()
        .map(|h| {
            let w = n_softmax_rows(h, Kept::All, n)?;
            trim_observation(&w, cfg.obs_window, cfg.recent)
        })
        .collect()
}

fn windowed_average(heads: &[Logits], cfg: &PruneConfig, n: f64) -> Result<Weights> {
    head_average(&windowed_heads(heads, cfg, n)?)
}

/// One step of cross-self pruning.
///
/// Returns the cache untouched while it is shorter than the budget. Otherwise the n-softmax
/// weights of the observation window are decomposed into intra and inter scores, each side picks
/// its own top-k, the intersection is kept and the recent window is appended.
pub fn csp_step(
    cache: &KvCache,
    heads: &[Logits],
    query_tags: &TaggedSequence,
    cfg: &PruneConfig,
) -> Result<(KvCache, PolicyDecision)> {
    check_inputs(cache, heads, query_tags)?;
    if cache.len() < cfg.budget {
        return Ok((cache.clone(), PolicyDecision::no_op(cache, cfg.recent)));
    }
    let len = cache.len();
    let q_tags = query_tags.tail(cfg.obs_window);
    let key_tags = cache.tags().head(len - cfg.recent.min(len));

    let (mask, ks) = match cfg.head_mode {
        HeadMode::Averaged => {
            let window = windowed_average(heads, cfg, cfg.smooth_n)?;
            let imp = cross_self_importance(&window, &q_tags, &key_tags)?;
            let sel = cross_self_select(&imp, cfg)?;
            (sel.mask, (sel.k_intra, sel.k_inter))
        }
        HeadMode::PerHead => per_head_select(heads, &q_tags, &key_tags, cfg)?,
    };
    let pruned = apply_prune(cache, &mask, cfg.recent)?;
    let decision = PolicyDecision::pruned(cache, &pruned, mask, ks, cfg.recent);
    Ok((pruned, decision))
}

/// Selects per head, then keeps the tokens chosen by the most heads (ties: larger summed
/// importance, then smaller index), capped at the largest per-head selection.
fn per_head_select(
    heads: &[Logits],
    q_tags: &TaggedSequence,
    key_tags: &TaggedSequence,
    cfg: &PruneConfig,
) -> Result<(PruneMask, (usize, usize))> {
    let windows = windowed_heads(heads, cfg, cfg.smooth_n)?;
    let n = key_tags.len();
    let mut votes = vec![0usize; n];
    let mut total = vec![0.0; n];
    let mut cap = 0;
    let mut ks = (0, 0);
    for (h, w) in windows.iter().enumerate() {
        let imp: ImportanceScores = cross_self_importance(w, q_tags, key_tags)?;
        let sel = cross_self_select(&imp, cfg)?;
        if h == 0 {
            ks = (sel.k_intra, sel.k_inter);
        }
        cap = cap.max(sel.mask.len());
        for &j in sel.mask.indices() {
            votes[j] += 1;
        }
        for (t, v) in total.iter_mut().zip(imp.total()) {
            *t += v;
        }
    }
    let mut order: Vec<usize> = (0..n).filter(|&j| votes[j] > 0).collect();
    order.sort_by(|&a, &b| {
        votes[b]
            .cmp(&votes[a])
            .then(total[b].total_cmp(&total[a]))
            .then(a.cmp(&b))
    });
    order.truncate(cap);
    Ok((PruneMask::from_indices(order, n)?, ks))
}

/// Centred 1-D max pool with edge clipping. Width 1 is the identity.
pub fn max_pool(scores: &[f64], width: usize) -> Vec<f64> {
    if width <= 1 {
        return scores.to_vec();
    }
    let half = width / 2;
    (0..scores.len())
        .map(|j| {
            let lo = j.saturating_sub(half);
            let hi = (j + width - half).min(scores.len());
            scores[lo..hi].iter().copied().fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

fn baseline_n(cfg: &PruneConfig) -> f64 {
    if cfg.smooth_baselines {
        cfg.smooth_n
    } else {
        0.0
    }
}

/// Global top-k over undecomposed column sums (SnapKV-like).
pub fn global_topk_step(
    cache: &KvCache,
    heads: &[Logits],
    query_tags: &TaggedSequence,
    cfg: &PruneConfig,
) -> Result<(KvCache, PolicyDecision)> {
    check_inputs(cache, heads, query_tags)?;
    if cache.len() < cfg.budget {
        return Ok((cache.clone(), PolicyDecision::no_op(cache, cfg.recent)));
    }
    let window = windowed_average(heads, cfg, baseline_n(cfg))?;
    let scores = max_pool(&window.column_sums(), cfg.pool_width);
    let k = cfg.pool().min(scores.len());
    let mask = topk_mask(&scores, k);
    let pruned = apply_prune(cache, &mask, cfg.recent)?;
    let decision = PolicyDecision::pruned(cache, &pruned, mask, (k, 0), cfg.recent);
    Ok((pruned, decision))
}

/// Per-key accumulated attention, one entry per cached token.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Accumulator {
    scores: Vec<f64>,
}

impl Accumulator {
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Accumulated-score eviction (H2O-like): every step adds the observation window's column sums
/// to each key's running total; once the budget is reached the top `T - R` totals outside the
/// recent window survive.
pub fn accumulated_score_step(
    cache: &KvCache,
    heads: &[Logits],
    query_tags: &TaggedSequence,
    cfg: &PruneConfig,
    running: &Accumulator,
) -> Result<(KvCache, PolicyDecision, Accumulator)> {
    check_inputs(cache, heads, query_tags)?;
    let len = cache.len();
    if running.len() > len {
        return Err(Error::DimensionMismatch {
            what: "accumulator length vs cache length",
            expected: len,
            found: running.len(),
        });
    }
    let mut scores = running.scores.clone();
    scores.resize(len, 0.0);
    let n = baseline_n(cfg);
    let weights: Vec<Weights> = heads
        .iter()
        .map(|h| {
            let w = n_softmax_rows(h, Kept::All, n)?;
            Weights::new(w.matrix().slice(
                w.rows().saturating_sub(cfg.obs_window),
                w.rows(),
                0,
                w.cols(),
            ))
        })
        .collect::<Result<_>>()?;
    let avg = head_average(&weights)?;
    for (s, c) in scores.iter_mut().zip(avg.column_sums()) {
        *s += c;
    }

    if len < cfg.budget {
        return Ok((
            cache.clone(),
            PolicyDecision::no_op(cache, cfg.recent),
            Accumulator { scores },
        ));
    }
    let candidates = len - cfg.recent.min(len);
    let k = cfg.pool().min(candidates);
    let mask = topk_mask(&scores[..candidates], k);
    let pruned = apply_prune(cache, &mask, cfg.recent)?;
    let kept: Vec<f64> = mask
        .indices()
        .iter()
        .map(|&j| scores[j])
        .chain(scores[candidates..].iter().copied())
        .collect();
    let decision = PolicyDecision::pruned(cache, &pruned, mask, (k, 0), cfg.recent);
    Ok((pruned, decision, Accumulator { scores: kept }))
}

/// Per-stream policy state behind one interface.
pub trait EvictionPolicy: Send {
    fn kind(&self) -> PolicyKind;

    fn step(
        &mut self,
        cache: &KvCache,
        heads: &[Logits],
        query_tags: &TaggedSequence,
        cfg: &PruneConfig,
    ) -> Result<(KvCache, PolicyDecision)>;

    /// Smoothing constant used for attention over a cache this policy has pruned.
    fn deployed_n(&self, cfg: &PruneConfig) -> f64 {
        match self.kind() {
            PolicyKind::Csp => cfg.smooth_n,
            PolicyKind::FullCache => 0.0,
            _ => baseline_n(cfg),
        }
    }
}

#[derive(Debug, Default)]
pub struct Csp;

impl EvictionPolicy for Csp {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Csp
    }

    fn step(&mut self, cache: &KvCache, heads: &[Logits], q: &TaggedSequence, cfg: &PruneConfig) -> Result<(KvCache, PolicyDecision)> {
        csp_step(cache, heads, q, cfg)
    }
}

#[derive(Debug, Default)]
pub struct GlobalTopK;

impl EvictionPolicy for GlobalTopK {
    fn kind(&self) -> PolicyKind {
        PolicyKind::GlobalTopK
    }

    fn step(&mut self, cache: &KvCache, heads: &[Logits], q: &TaggedSequence, cfg: &PruneConfig) -> Result<(KvCache, PolicyDecision)> {
        global_topk_step(cache, heads, q, cfg)
    }
}

#[derive(Debug, Default)]
pub struct AccumulatedScore {
    running: Accumulator,
}

impl EvictionPolicy for AccumulatedScore {
    fn kind(&self) -> PolicyKind {
        PolicyKind::AccumulatedScore
    }

    fn step(&mut self, cache: &KvCache, heads: &[Logits], q: &TaggedSequence, cfg: &PruneConfig) -> Result<(KvCache, PolicyDecision)> {
        let (next, decision, running) = accumulated_score_step(cache, heads, q, cfg, &self.running)?;
        self.running = running;
        Ok((next, decision))
    }
}

/// Never evicts.
#[derive(Debug, Default)]
pub struct FullCache;

impl EvictionPolicy for FullCache {
    fn kind(&self) -> PolicyKind {
        PolicyKind::FullCache
    }

    fn step(&mut self, cache: &KvCache, heads: &[Logits], q: &TaggedSequence, cfg: &PruneConfig) -> Result<(KvCache, PolicyDecision)> {
        check_inputs(cache, heads, q)?;
        Ok((cache.clone(), PolicyDecision::no_op(cache, cfg.recent)))
    }
}

pub fn new_policy(kind: PolicyKind) -> Box<dyn EvictionPolicy> {
    match kind {
        PolicyKind::Csp => Box::new(Csp),
        PolicyKind::GlobalTopK => Box::new(GlobalTopK),
        PolicyKind::AccumulatedScore => Box::<AccumulatedScore>::default(),
        PolicyKind::FullCache => Box::new(FullCache),
    }
}
