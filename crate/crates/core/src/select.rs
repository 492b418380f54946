//! Top-k masks, mask intersection, budget split and cache pruning.

use serde::Serialize;

use crate::cache::KvCache;
use crate::config::PruneConfig;
use crate::decompose::ImportanceScores;
use crate::error::{Error, Result};

/// Sorted set of retained key indices over `0..universe`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct PruneMask {
    retained: Vec<usize>,
    universe: usize,
}

impl PruneMask {
    /// Requires strictly ascending indices below `universe`.
    pub fn new(retained: Vec<usize>, universe: usize) -> Result<Self> {
        let ascending = retained.windows(2).all(|w| w[0] < w[1]);
        if !ascending || retained.last().is_some_and(|&i| i >= universe) {
            return Err(Error::MalformedMask { universe });
        }
        Ok(Self { retained, universe })
    }

    /// Sorts and deduplicates before validating.
    pub fn from_indices(mut indices: Vec<usize>, universe: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        Self::new(indices, universe)
    }

    pub fn full(universe: usize) -> Self {
        Self {
            retained: (0..universe).collect(),
            universe,
        }
    }

    pub fn empty(universe: usize) -> Self {
        Self {
            retained: Vec::new(),
            universe,
        }
    }

    pub fn len(&self) -> usize {
        self.retained.len()
    }

    pub fn is_empty(&self) -> bool {
        self.retained.is_empty()
    }

    pub fn universe(&self) -> usize {
        self.universe
    }

    pub fn indices(&self) -> &[usize] {
        &self.retained
    }

    pub fn contains(&self, i: usize) -> bool {
        self.retained.binary_search(&i).is_ok()
    }

    pub fn is_subset_of(&self, other: &PruneMask) -> bool {
        self.universe == other.universe && self.retained.iter().all(|&i| other.contains(i))
    }
}

/// Indices ordered by descending score; equal scores keep the smaller index first.
pub fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// The `k` highest-scoring indices (all of them when `k >= len`).
pub fn topk_mask(scores: &[f64], k: usize) -> PruneMask {
    let mut top = rank_order(scores);
    top.truncate(k);
    top.sort_unstable();
    PruneMask {
        retained: top,
        universe: scores.len(),
    }
}

pub fn intersect_masks(a: &PruneMask, b: &PruneMask) -> Result<PruneMask> {
    if a.universe != b.universe {
        return Err(Error::UniverseMismatch {
            left: a.universe,
            right: b.universe,
        });
    }
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::with_capacity(a.len().min(b.len()));
    while i < a.retained.len() && j < b.retained.len() {
        match a.retained[i].cmp(&b.retained[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a.retained[i]);
                i += 1;
                j += 1;
            }
        }
    }
    Ok(PruneMask {
        retained: out,
        universe: a.universe,
    })
}

fn split_pool(cross_ratio: f64, pool: usize) -> (usize, usize) {
    let k_inter = ((cross_ratio * pool as f64) + 0.5).floor() as usize;
    let k_inter = k_inter.min(pool);
    (pool - k_inter, k_inter)
}

/// Splits the pool `max(T - R, 0)` into `(k_intra, k_inter)`, rounding the inter share half up,
/// then clamps each to the candidate count.
pub fn budget_to_k(cfg: &PruneConfig, candidates: usize) -> (usize, usize) {
    let (k_intra, k_inter) = split_pool(cfg.cross_ratio, cfg.pool());
    (k_intra.min(candidates), k_inter.min(candidates))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Selection {
    pub mask: PruneMask,
    pub intra_mask: PruneMask,
    pub inter_mask: PruneMask,
    /// Effective top-k sizes after clamping and widening.
    pub k_intra: usize,
    pub k_inter: usize,
}

/// Multiplies the scores of the last `window` candidates by `bias`.
pub fn apply_recency_bias(scores: &[f64], window: usize, bias: f64) -> Vec<f64> {
    let start = scores.len().saturating_sub(window);
    scores
        .iter()
        .enumerate()
        .map(|(j, &s)| if j >= start { s * bias } else { s })
        .collect()
}

/// Independent top-k over intra and inter scores, intersected.
///
/// A ratio of exactly 0 (or 1) leaves the inter (or intra) side unconstrained, so the result is
/// the plain top-`pool` of the other side.
pub fn cross_self_select(imp: &ImportanceScores, cfg: &PruneConfig) -> Result<Selection> {
    let n = imp.len();
    if n == 0 || imp.inter.len() != n {
        return Err(Error::EmptyImportance);
    }
    let intra = apply_recency_bias(&imp.intra, cfg.obs_window, cfg.recency_bias);
    let inter = apply_recency_bias(&imp.inter, cfg.obs_window, cfg.recency_bias);
    let order_intra = rank_order(&intra);
    let order_inter = rank_order(&inter);
    let mut rank_intra = vec![0; n];
    let mut rank_inter = vec![0; n];
    for (r, &j) in order_intra.iter().enumerate() {
        rank_intra[j] = r;
    }
    for (r, &j) in order_inter.iter().enumerate() {
        rank_inter[j] = r;
    }

    let pool = cfg.pool();
    let ks_for = |p: usize| -> (usize, usize) {
        let (ki, kc) = split_pool(cfg.cross_ratio, p);
        let ki = if cfg.cross_ratio == 1.0 { n } else { ki.min(n) };
        let kc = if cfg.cross_ratio == 0.0 { n } else { kc.min(n) };
        (ki, kc)
    };
    let members = |ki: usize, kc: usize| -> Vec<usize> {
        (0..n)
            .filter(|&j| rank_intra[j] < ki && rank_inter[j] < kc)
            .collect()
    };

    let (mut ki, mut kc) = ks_for(pool);
    let mut retained = members(ki, kc);
    if cfg.widen_to_budget {
        let target = pool.min(n);
        let mut p = pool;
        let mut prev = retained.clone();
        while retained.len() < target && (ki < n || kc < n) {
            p += 1;
            (ki, kc) = ks_for(p);
            prev = std::mem::replace(&mut retained, members(ki, kc));
        }
        if retained.len() > target {
            // drop the weakest of the tokens admitted by the last growth step
            let total = imp.total();
            let mut fresh: Vec<usize> = retained.iter().copied().filter(|j| prev.binary_search(j).is_err()).collect();
            fresh.sort_by(|&a, &b| total[b].total_cmp(&total[a]).then(a.cmp(&b)));
            fresh.truncate(target - prev.len());
            retained = prev;
            retained.extend(fresh);
            retained.sort_unstable();
        }
    }

    let mut intra_mask: Vec<usize> = order_intra[..ki].to_vec();
    let mut inter_mask: Vec<usize> = order_inter[..kc].to_vec();
    intra_mask.sort_unstable();
    inter_mask.sort_unstable();
    Ok(Selection {
        mask: PruneMask {
            retained,
            universe: n,
        },
        intra_mask: PruneMask {
            retained: intra_mask,
            universe: n,
        },
        inter_mask: PruneMask {
            retained: inter_mask,
            universe: n,
        },
        k_intra: ki,
        k_inter: kc,
    })
}

/// Keeps the masked prefix tokens followed by the last `recent` tokens, in original order.
pub fn apply_prune(cache: &KvCache, mask: &PruneMask, recent: usize) -> Result<KvCache> {
    let len = cache.len();
    if recent >= len {
        return Err(Error::RecentWindowTooLarge { recent, len });
    }
    if mask.universe() != len - recent {
        return Err(Error::UniverseMismatch {
            left: mask.universe(),
            right: len - recent,
        });
    }
    let rows: Vec<usize> = mask
        .indices()
        .iter()
        .copied()
        .chain(len - recent..len)
        .collect();
    Ok(cache.gather(&rows))
}
