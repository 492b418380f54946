//! Intra-/inter-modality decomposition of an attention window.
//!
//! A key's intra score sums the weights it receives from queries of its own modality and its
//! inter score sums those from the other modality. For block-contiguous sequences this is the
//! concatenation of per-block column sums; tag-conditioned accumulation extends it to arbitrary
//! interleavings.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::modality::{Modality, TaggedSequence};
use crate::scoring::Weights;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImportanceScores {
    pub intra: Vec<f64>,
    pub inter: Vec<f64>,
    pub key_tags: TaggedSequence,
}

impl ImportanceScores {
    pub fn len(&self) -> usize {
        self.intra.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intra.is_empty()
    }

    /// `intra + inter`, the undecomposed column sums.
    pub fn total(&self) -> Vec<f64> {
        self.intra.iter().zip(&self.inter).map(|(a, b)| a + b).collect()
    }
}

fn check_tags(weights: &Weights, query_tags: &TaggedSequence, key_tags: &TaggedSequence) -> Result<()> {
    if query_tags.len() != weights.rows() {
        return Err(Error::DimensionMismatch {
            what: "query tags vs weight rows",
            expected: weights.rows(),
            found: query_tags.len(),
        });
    }
    if key_tags.len() != weights.cols() {
        return Err(Error::DimensionMismatch {
            what: "key tags vs weight columns",
            expected: weights.cols(),
            found: key_tags.len(),
        });
    }
    Ok(())
}

pub fn cross_self_importance(
    weights: &Weights,
    query_tags: &TaggedSequence,
    key_tags: &TaggedSequence,
) -> Result<ImportanceScores> {
    check_tags(weights, query_tags, key_tags)?;
    let cols = weights.cols();
    let mut intra = vec![0.0; cols];
    let mut inter = vec![0.0; cols];
    let keys = key_tags.as_slice();
    for (i, &qt) in query_tags.as_slice().iter().enumerate() {
        for (j, &w) in weights.row(i).iter().enumerate() {
            if keys[j] == qt {
                intra[j] += w;
            } else {
                inter[j] += w;
            }
        }
    }
    Ok(ImportanceScores {
        intra,
        inter,
        key_tags: key_tags.clone(),
    })
}

/// The four modality blocks of an attention window.
///
/// Rows and columns keep their original sequence order within each modality.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockViews {
    /// Text queries x text keys.
    pub self_text: Matrix,
    /// Visual queries x visual keys.
    pub self_visual: Matrix,
    /// Visual queries x text keys.
    pub cross_text: Matrix,
    /// Text queries x visual keys.
    pub cross_visual: Matrix,
    pub text_queries: Vec<usize>,
    pub visual_queries: Vec<usize>,
    pub text_keys: Vec<usize>,
    pub visual_keys: Vec<usize>,
}

impl BlockViews {
    /// Scatters the blocks back into a `rows x cols` matrix.
    pub fn scatter(&self, rows: usize, cols: usize) -> Matrix {
        let mut out = Matrix::zeros(rows, cols);
        let mut put = |block: &Matrix, qs: &[usize], ks: &[usize]| {
            for (bi, &q) in qs.iter().enumerate() {
                for (bj, &k) in ks.iter().enumerate() {
                    out.set(q, k, block.get(bi, bj));
                }
            }
        };
        put(&self.self_text, &self.text_queries, &self.text_keys);
        put(&self.self_visual, &self.visual_queries, &self.visual_keys);
        put(&self.cross_text, &self.visual_queries, &self.text_keys);
        put(&self.cross_visual, &self.text_queries, &self.visual_keys);
        out
    }

    /// All intra-modality entries (text block first, then visual).
    pub fn intra_samples(&self) -> Vec<f64> {
        self.self_text
            .data()
            .iter()
            .chain(self.self_visual.data())
            .copied()
            .collect()
    }

    /// All inter-modality entries.
    pub fn inter_samples(&self) -> Vec<f64> {
        self.cross_text
            .data()
            .iter()
            .chain(self.cross_visual.data())
            .copied()
            .collect()
    }
}

pub fn block_views(weights: &Weights, query_tags: &TaggedSequence, key_tags: &TaggedSequence) -> Result<BlockViews> {
    check_tags(weights, query_tags, key_tags)?;
    let (text_queries, visual_queries) = query_tags.modality_index();
    let (text_keys, visual_keys) = key_tags.modality_index();
    let m = weights.matrix();
    Ok(BlockViews {
        self_text: m.gather(&text_queries, &text_keys),
        self_visual: m.gather(&visual_queries, &visual_keys),
        cross_text: m.gather(&visual_queries, &text_keys),
        cross_visual: m.gather(&text_queries, &visual_keys),
        text_queries,
        visual_queries,
        text_keys,
        visual_keys,
    })
}

/// Count of `tag` among the given key positions.
pub(crate) fn count_tag(tags: &TaggedSequence, positions: &[usize], tag: Modality) -> usize {
    positions.iter().filter(|&&p| tags.get(p) == tag).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(s: &str) -> TaggedSequence {
        TaggedSequence::parse(s).unwrap()
    }

    fn example() -> Weights {
        Weights::from_rows(&[[0.5, 0.2, 0.3], [0.1, 0.6, 0.3]]).unwrap()
    }

    /// Direct restatement of the definition: one pass per (query, key) pair.
    fn oracle(w: &[Vec<f64>], q: &[Modality], k: &[Modality]) -> (Vec<f64>, Vec<f64>) {
        let mut intra = vec![0.0; k.len()];
        let mut inter = vec![0.0; k.len()];
        for (j, &kt) in k.iter().enumerate() {
            for (i, &qt) in q.iter().enumerate() {
                if qt == kt {
                    intra[j] += w[i][j];
                } else {
                    inter[j] += w[i][j];
                }
            }
        }
        (intra, inter)
    }

    #[test]
    fn worked_example() {
        let imp = cross_self_importance(&example(), &seq("TV"), &seq("TVT")).unwrap();
        let expect_intra = [0.5, 0.6, 0.3];
        let expect_inter = [0.1, 0.2, 0.3];
        for j in 0..3 {
            assert!((imp.intra[j] - expect_intra[j]).abs() < 1e-15);
            assert!((imp.inter[j] - expect_inter[j]).abs() < 1e-15);
        }
        let (oi, oe) = oracle(
            &[vec![0.5, 0.2, 0.3], vec![0.1, 0.6, 0.3]],
            seq("TV").as_slice(),
            seq("TVT").as_slice(),
        );
        assert_eq!(imp.intra, oi);
        assert_eq!(imp.inter, oe);
    }

    #[test]
    fn single_modality_has_no_inter() {
        let w = example();
        let imp = cross_self_importance(&w, &seq("TT"), &seq("TTT")).unwrap();
        assert!(imp.inter.iter().all(|&v| v == 0.0));
        assert_eq!(imp.intra, w.column_sums());
    }

    #[test]
    fn uniform_weights() {
        let l = 4;
        let w = Weights::new(Matrix::from_vec(3, l, vec![1.0 / l as f64; 3 * l]).unwrap()).unwrap();
        let imp = cross_self_importance(&w, &seq("TTV"), &seq("TVVT")).unwrap();
        // two text queries, one visual query
        let expect = [2.0 / 4.0, 1.0 / 4.0, 1.0 / 4.0, 2.0 / 4.0];
        for j in 0..l {
            assert!((imp.intra[j] - expect[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn tag_length_mismatch() {
        assert!(cross_self_importance(&example(), &seq("T"), &seq("TVT")).is_err());
        assert!(block_views(&example(), &seq("TV"), &seq("TV")).is_err());
    }

    #[test]
    fn worked_example_blocks() {
        let b = block_views(&example(), &seq("TV"), &seq("TVT")).unwrap();
        assert_eq!(b.self_text.data(), &[0.5, 0.3]);
        assert_eq!(b.self_visual.data(), &[0.6]);
        assert_eq!(b.cross_text.data(), &[0.1, 0.3]);
        assert_eq!(b.cross_visual.data(), &[0.2]);
    }

    #[test]
    fn single_modality_blocks_are_empty() {
        let b = block_views(&example(), &seq("TT"), &seq("TTT")).unwrap();
        assert_eq!(b.self_visual.rows() * b.self_visual.cols(), 0);
        assert_eq!(b.cross_text.rows() * b.cross_text.cols(), 0);
        assert_eq!(b.cross_visual.rows() * b.cross_visual.cols(), 0);
        assert_eq!(b.self_text.data(), example().matrix().data());
    }

    #[test]
    fn contiguous_blocks_are_slices() {
        let m = Matrix::from_vec(4, 4, (0..16).map(|v| v as f64 / 16.0).collect()).unwrap();
        let w = Weights::new(m.clone()).unwrap();
        let tags = seq("TTVV");
        let b = block_views(&w, &tags, &tags).unwrap();
        assert_eq!(b.self_text, m.slice(0, 2, 0, 2));
        assert_eq!(b.self_visual, m.slice(2, 4, 2, 4));
        assert_eq!(b.cross_text, m.slice(2, 4, 0, 2));
        assert_eq!(b.cross_visual, m.slice(0, 2, 2, 4));
    }

    fn tagged_matrix() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<bool>, Vec<bool>)> {
        (1usize..8, 1usize..12).prop_flat_map(|(r, c)| {
            (
                proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, c), r),
                proptest::collection::vec(any::<bool>(), r),
                proptest::collection::vec(any::<bool>(), c),
            )
        })
    }

    fn tags(bits: &[bool]) -> TaggedSequence {
        bits.iter()
            .map(|&b| if b { Modality::Visual } else { Modality::Text })
            .collect()
    }

    proptest! {
        #[test]
        fn conservation((rows, qb, kb) in tagged_matrix()) {
            let w = Weights::from_rows(&rows).unwrap();
            let imp = cross_self_importance(&w, &tags(&qb), &tags(&kb)).unwrap();
            let sums = w.column_sums();
            for j in 0..sums.len() {
                prop_assert!((imp.intra[j] + imp.inter[j] - sums[j]).abs() < 1e-9);
                prop_assert!(imp.intra[j] >= 0.0 && imp.inter[j] >= 0.0);
            }
            let (oi, oe) = oracle(&rows, tags(&qb).as_slice(), tags(&kb).as_slice());
            for j in 0..sums.len() {
                prop_assert!((imp.intra[j] - oi[j]).abs() < 1e-12);
                prop_assert!((imp.inter[j] - oe[j]).abs() < 1e-12);
            }
        }

        #[test]
        fn blocks_reconstruct((rows, qb, kb) in tagged_matrix()) {
            let w = Weights::from_rows(&rows).unwrap();
            let b = block_views(&w, &tags(&qb), &tags(&kb)).unwrap();
            prop_assert_eq!(&b.scatter(w.rows(), w.cols()), w.matrix());
        }

        #[test]
        fn permutation_equivariant((rows, qb, kb) in tagged_matrix(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut perm: Vec<usize> = (0..kb.len()).collect();
            perm.shuffle(&mut rng);
            let w = Weights::from_rows(&rows).unwrap();
            let base = cross_self_importance(&w, &tags(&qb), &tags(&kb)).unwrap();
            let pr: Vec<usize> = (0..rows.len()).collect();
            let pw = Weights::new(w.matrix().gather(&pr, &perm)).unwrap();
            let pk: Vec<bool> = perm.iter().map(|&p| kb[p]).collect();
            let moved = cross_self_importance(&pw, &tags(&qb), &tags(&pk)).unwrap();
            for (new_j, &old_j) in perm.iter().enumerate() {
                prop_assert_eq!(moved.intra[new_j], base.intra[old_j]);
                prop_assert_eq!(moved.inter[new_j], base.inter[old_j]);
            }
        }
    }
}
