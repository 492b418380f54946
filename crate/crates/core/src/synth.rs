//! Deterministic toy decoder that emits attention traces.
//!
//! Every position gets a fixed Gaussian embedding; each layer has random query/key/value
//! projections per head, with queries and keys rescaled to norm `sqrt(d)`. Logits are `spread * q.k / sqrt(d)`, and every inter-modality
//! query/key pair is lowered by `shift`, which produces the gap between intra- and
//! inter-modality weight distributions. Generated tokens are text.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::modality::{Modality, TaggedSequence};
use crate::scoring::Logits;
use crate::trace::{AttentionTrace, TraceStep};

/// Prefill layout of text and visual tokens.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interleave {
    /// All visual tokens, then all text tokens.
    Block,
    /// Evenly spread, starting with text.
    #[default]
    Alternating,
    /// Seeded shuffle.
    Random,
}

impl FromStr for Interleave {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "block" => Ok(Interleave::Block),
            "alternating" | "alt" => Ok(Interleave::Alternating),
            "random" => Ok(Interleave::Random),
            _ => Err(Error::UnknownName {
                kind: "interleave pattern",
                value: s.to_string(),
            }),
        }
    }
}

impl fmt::Display for Interleave {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Interleave::Block => "block",
            Interleave::Alternating => "alternating",
            Interleave::Random => "random",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub text_tokens: usize,
    pub visual_tokens: usize,
    pub interleave: Interleave,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Trace steps: the prefill observation plus `steps - 1` generated tokens.
    pub steps: usize,
    /// Logit reduction applied to every inter-modality query/key pair.
    pub shift: f64,
    /// Logit scale.
    pub spread: f64,
    /// Most recent query rows recorded per step.
    pub obs_rows: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            text_tokens: 64,
            visual_tokens: 64,
            interleave: Interleave::Alternating,
            layers: 2,
            heads: 4,
            head_dim: 16,
            steps: 33,
            shift: 2.0,
            spread: 1.0,
            obs_rows: 32,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("text_tokens", self.text_tokens),
            ("visual_tokens", self.visual_tokens),
            ("layers", self.layers),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("steps", self.steps),
            ("obs_rows", self.obs_rows),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidSynthSpec(format!("{name} must be >= 1")));
        }
        if !(self.spread > 0.0 && self.spread.is_finite()) {
            return Err(Error::InvalidSynthSpec(format!("spread must be > 0, got {}", self.spread)));
        }
        if !self.shift.is_finite() {
            return Err(Error::InvalidSynthSpec("shift must be finite".into()));
        }
        Ok(())
    }

    pub fn prefill_len(&self) -> usize {
        self.text_tokens + self.visual_tokens
    }

    /// Sequence length after the last step.
    pub fn final_len(&self) -> usize {
        self.prefill_len() + self.steps - 1
    }

    pub fn prefill_tags(&self, rng: &mut ChaCha8Rng) -> TaggedSequence {
        let total = self.prefill_len();
        let (lt, lv) = (self.text_tokens, self.visual_tokens);
        match self.interleave {
            Interleave::Block => std::iter::repeat_n(Modality::Visual, lv)
                .chain(std::iter::repeat_n(Modality::Text, lt))
                .collect(),
            Interleave::Alternating => (0..total)
                .map(|i| {
                    if (i + 1) * lv / total > i * lv / total {
                        Modality::Visual
                    } else {
                        Modality::Text
                    }
                })
                .collect(),
            Interleave::Random => {
                let mut tags: Vec<Modality> = std::iter::repeat_n(Modality::Text, lt)
                    .chain(std::iter::repeat_n(Modality::Visual, lv))
                    .collect();
                tags.shuffle(rng);
                tags.into()
            }
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

/// Rows rescaled to norm `sqrt(d)`, so `q.k / sqrt(d)` has unit variance for random directions.
fn normalized(mut m: Matrix) -> Matrix {
    let target = (m.cols() as f64).sqrt();
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v *= target / norm);
        }
    }
    m
}

fn project(x: &Matrix, w: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), w.cols());
    for r in 0..x.rows() {
        let xr = x.row(r);
        let dst = out.row_mut(r);
        for (c, d) in dst.iter_mut().enumerate() {
            *d = xr.iter().enumerate().map(|(k, v)| v * w.get(k, c)).sum();
        }
    }
    out
}

struct LayerWeights {
    queries: Vec<Matrix>,
    keys: Vec<Matrix>,
    values: Matrix,
}

/// A fixed random model; cheap to share across threads.
pub struct SynthModel {
    spec: SynthSpec,
    tags: TaggedSequence,
    layers: Vec<LayerWeights>,
}

impl SynthModel {
    pub fn spec(&self) -> &SynthSpec {
        &self.spec
    }

    /// Tags for every position up to the final step.
    pub fn tags(&self) -> &TaggedSequence {
        &self.tags
    }

    fn logit(&self, layer: usize, head: usize, q: usize, k: usize) -> f64 {
        let lw = &self.layers[layer];
        let d = self.spec.head_dim as f64;
        let mut v = self.spec.spread * dot(lw.queries[head].row(q), lw.keys[head].row(k)) / d.sqrt();
        if self.tags.get(q) != self.tags.get(k) {
            v -= self.spec.shift;
        }
        // traces store binary32, so the model emits values that survive the round trip
        v as f32 as f64
    }

    /// Key and value of `position` in `layer`. Keys are taken from head 0.
    pub fn key_value(&self, layer: usize, position: usize) -> (Vec<f64>, Vec<f64>) {
        let lw = &self.layers[layer];
        (lw.keys[0].row(position).to_vec(), lw.values.row(position).to_vec())
    }

    pub fn trace(&self) -> AttentionTrace {
        let spec = &self.spec;
        let l0 = spec.prefill_len();
        let steps = (0..spec.steps)
            .map(|s| {
                let keys = l0 + s;
                let new_tags = if s == 0 {
                    TaggedSequence::default()
                } else {
                    self.tags.select(&[keys - 1])
                };
                let rows = spec.obs_rows.min(keys);
                let logits = (0..spec.layers)
                    .map(|layer| {
                        (0..spec.heads)
                            .map(|head| {
                                let mut m = Matrix::zeros(rows, keys);
                                for (r, q) in (keys - rows..keys).enumerate() {
                                    for k in 0..keys {
                                        m.set(r, k, self.logit(layer, head, q, k));
                                    }
                                }
                                Logits::new(m).expect("finite logits")
                            })
                            .collect()
                    })
                    .collect();
                TraceStep { new_tags, logits }
            })
            .collect();
        AttentionTrace {
            layers: spec.layers,
            heads: spec.heads,
            head_dim: spec.head_dim,
            prefill: self.tags.head(l0),
            steps,
        }
    }
}

/// Builds the toy model. The same spec always yields bit-identical traces.
pub fn synth_decoder(spec: &SynthSpec) -> Result<SynthModel> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut tags = spec.prefill_tags(&mut rng);
    for _ in 1..spec.steps {
        tags.push(Modality::Text);
    }
    let d = spec.head_dim;
    let embeddings = gaussian(&mut rng, spec.final_len(), d, 1.0);
    let w_scale = 1.0 / (d as f64).sqrt();
    let layers = (0..spec.layers)
        .map(|_| {
            let values = project(&embeddings, &gaussian(&mut rng, d, d, w_scale));
            let mut queries = Vec::with_capacity(spec.heads);
            let mut keys = Vec::with_capacity(spec.heads);
            for _ in 0..spec.heads {
                queries.push(normalized(project(&embeddings, &gaussian(&mut rng, d, d, w_scale))));
                keys.push(normalized(project(&embeddings, &gaussian(&mut rng, d, d, w_scale))));
            }
            LayerWeights { queries, keys, values }
        })
        .collect();
    Ok(SynthModel {
        spec: spec.clone(),
        tags,
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            text_tokens: 6,
            visual_tokens: 4,
            layers: 2,
            heads: 2,
            head_dim: 4,
            steps: 4,
            obs_rows: 3,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn same_seed_same_trace() {
        let a = synth_decoder(&small()).unwrap().trace();
        let b = synth_decoder(&small()).unwrap().trace();
        assert_eq!(a, b);
        let mut other = small();
        other.seed = 8;
        assert_ne!(synth_decoder(&other).unwrap().trace(), a);
    }

    #[test]
    fn trace_shape_and_tags() {
        let spec = small();
        let t = synth_decoder(&spec).unwrap().trace();
        t.validate().unwrap();
        assert_eq!(t.steps.len(), 4);
        assert_eq!(t.prefill.len(), 10);
        assert_eq!(t.prefill.text_count(), 6);
        assert!(t.steps[0].new_tags.is_empty());
        assert_eq!(t.steps[1].new_tags.as_slice(), &[Modality::Text]);
        assert_eq!(t.final_len(), spec.final_len());
        assert_eq!(t.steps[3].logits[1][0].cols(), 13);
        assert_eq!(t.steps[3].logits[1][0].rows(), 3);
    }

    #[test]
    fn layouts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut spec = small();
        spec.text_tokens = 3;
        spec.visual_tokens = 3;
        assert_eq!(spec.prefill_tags(&mut rng).to_string(), "TVTVTV");
        spec.interleave = Interleave::Block;
        assert_eq!(spec.prefill_tags(&mut rng).to_string(), "VVVTTT");
        spec.interleave = Interleave::Random;
        let r = spec.prefill_tags(&mut rng);
        assert_eq!((r.text_count(), r.visual_count()), (3, 3));
    }

    #[test]
    fn inter_pairs_are_shifted() {
        let mut spec = small();
        spec.shift = 0.0;
        let base = synth_decoder(&spec).unwrap();
        spec.shift = 3.0;
        let shifted = synth_decoder(&spec).unwrap();
        let tags = base.tags().clone();
        for q in 0..tags.len() {
            for k in 0..tags.len() {
                let delta = base.logit(0, 0, q, k) - shifted.logit(0, 0, q, k);
                let expect = if tags.get(q) == tags.get(k) { 0.0 } else { 3.0 };
                assert!((delta - expect).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn invalid_specs() {
        let mut spec = small();
        spec.heads = 0;
        assert!(synth_decoder(&spec).is_err());
        let mut spec = small();
        spec.spread = 0.0;
        assert!(synth_decoder(&spec).is_err());
    }
}
