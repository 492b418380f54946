//! Per-token modality labels for interleaved text/visual sequences.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Visual,
}

impl Modality {
    /// Byte used by the trace format: 0 = text, 1 = visual.
    pub fn to_byte(self) -> u8 {
        match self {
            Modality::Text => 0,
            Modality::Visual => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Modality::Text),
            1 => Some(Modality::Visual),
            _ => None,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Modality::Text => Modality::Visual,
            Modality::Visual => Modality::Text,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Text => "text",
            Modality::Visual => "visual",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "t" | "text" => Ok(Modality::Text),
            "v" | "visual" | "image" => Ok(Modality::Visual),
            _ => Err(Error::UnknownName {
                kind: "modality",
                value: s.to_string(),
            }),
        }
    }
}

/// Ordered modality tags, one per token. No contiguity is assumed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedSequence(Vec<Modality>);

impl TaggedSequence {
    pub fn new(tags: Vec<Modality>) -> Self {
        Self(tags)
    }

    /// Parses a compact form such as `"TVT"`.
    pub fn parse(s: &str) -> Result<Self, Error> {
        s.chars()
            .filter(|c| !c.is_whitespace() && *c != ',')
            .map(|c| c.to_string().parse())
            .collect::<Result<Vec<_>, _>>()
            .map(Self)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[Modality] {
        &self.0
    }

    pub fn get(&self, i: usize) -> Modality {
        self.0[i]
    }

    pub fn push(&mut self, tag: Modality) {
        self.0.push(tag);
    }

    pub fn extend_from(&mut self, other: &[Modality]) {
        self.0.extend_from_slice(other);
    }

    pub fn text_count(&self) -> usize {
        self.0.iter().filter(|&&t| t == Modality::Text).count()
    }

    pub fn visual_count(&self) -> usize {
        self.len() - self.text_count()
    }

    /// Text and visual positions, each ascending. Together they partition `0..len`.
    pub fn modality_index(&self) -> (Vec<usize>, Vec<usize>) {
        let mut text = Vec::new();
        let mut visual = Vec::new();
        for (i, tag) in self.0.iter().enumerate() {
            match tag {
                Modality::Text => text.push(i),
                Modality::Visual => visual.push(i),
            }
        }
        (text, visual)
    }

    /// Tags at the given positions, in the order given.
    pub fn select(&self, positions: &[usize]) -> TaggedSequence {
        TaggedSequence(positions.iter().map(|&p| self.0[p]).collect())
    }

    /// The last `n` tags (all of them if `n >= len`).
    pub fn tail(&self, n: usize) -> TaggedSequence {
        let start = self.len().saturating_sub(n);
        TaggedSequence(self.0[start..].to_vec())
    }

    pub fn head(&self, n: usize) -> TaggedSequence {
        TaggedSequence(self.0[..n.min(self.len())].to_vec())
    }
}

impl From<Vec<Modality>> for TaggedSequence {
    fn from(v: Vec<Modality>) -> Self {
        Self(v)
    }
}

impl FromIterator<Modality> for TaggedSequence {
    fn from_iter<I: IntoIterator<Item = Modality>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl fmt::Display for TaggedSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.0 {
            f.write_str(match t {
                Modality::Text => "T",
                Modality::Visual => "V",
            })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(s: &str) -> TaggedSequence {
        TaggedSequence::parse(s).unwrap()
    }

    #[test]
    fn index_interleaved() {
        assert_eq!(seq("TVT").modality_index(), (vec![0, 2], vec![1]));
    }

    #[test]
    fn index_empty() {
        assert_eq!(seq("").modality_index(), (vec![], vec![]));
    }

    #[test]
    fn index_single_modality() {
        assert_eq!(seq("VVV").modality_index(), (vec![], vec![0, 1, 2]));
    }

    #[test]
    fn counts_and_display() {
        let s = seq("T V V T T");
        assert_eq!(s.text_count(), 3);
        assert_eq!(s.visual_count(), 2);
        assert_eq!(s.to_string(), "TVVTT");
        assert!(TaggedSequence::parse("TX").is_err());
    }

    proptest! {
        #[test]
        fn index_partitions(bits in proptest::collection::vec(any::<bool>(), 0..200)) {
            let s: TaggedSequence = bits
                .iter()
                .map(|&b| if b { Modality::Visual } else { Modality::Text })
                .collect();
            let (t, v) = s.modality_index();
            prop_assert_eq!(t.len() + v.len(), s.len());
            prop_assert_eq!(t.len(), s.text_count());
            prop_assert!(t.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(v.windows(2).all(|w| w[0] < w[1]));
            let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..s.len()).collect::<Vec<_>>());
        }
    }
}
