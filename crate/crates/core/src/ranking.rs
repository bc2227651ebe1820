//! Rankings as permutations of item indices.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::{Error, Result};

/// A ranking of `n` items.
///
/// Stored both as the presentation order (item index at each position, top
/// first) and as the inverse map from item to its 1-based rank.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Ranking {
    order: Vec<usize>,
    ranks: Vec<usize>,
}

impl Ranking {
    /// Builds a ranking from the presentation order, top position first.
    pub fn from_order(order: Vec<usize>) -> Result<Self> {
        let n = order.len();
        let mut ranks = vec![0usize; n];
        for (pos, &item) in order.iter().enumerate() {
            if item >= n {
                return Err(Error::InvalidRanking(format!("item {item} out of range for {n} items")));
            }
            if ranks[item] != 0 {
                return Err(Error::InvalidRanking(format!("item {item} appears twice")));
            }
            ranks[item] = pos + 1;
        }
        Ok(Self { order, ranks })
    }

    /// Builds a ranking from per-item 1-based ranks.
    pub fn from_ranks(ranks: Vec<usize>) -> Result<Self> {
        let n = ranks.len();
        let mut order = vec![usize::MAX; n];
        for (item, &rank) in ranks.iter().enumerate() {
            if rank == 0 || rank > n {
                return Err(Error::InvalidRanking(format!("rank {rank} out of range 1..={n}")));
            }
            if order[rank - 1] != usize::MAX {
                return Err(Error::InvalidRanking(format!("rank {rank} assigned twice")));
            }
            order[rank - 1] = item;
        }
        Ok(Self { order, ranks })
    }

    pub fn identity(n: usize) -> Self {
        Self { order: (0..n).collect(), ranks: (1..=n).collect() }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Item indices in presentation order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// 1-based rank of every item.
    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    /// 1-based rank of `item`.
    pub fn rank_of(&self, item: usize) -> usize {
        self.ranks[item]
    }

    /// Exchanges the items at two 0-based positions.
    pub fn swap_positions(&mut self, a: usize, b: usize) {
        self.order.swap(a, b);
        self.ranks[self.order[a]] = a + 1;
        self.ranks[self.order[b]] = b + 1;
    }
}

// Serialized as per-item 1-based ranks.
impl Serialize for Ranking {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.ranks.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Ranking {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let ranks = Vec::<usize>::deserialize(deserializer)?;
        Ranking::from_ranks(ranks).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_and_ranks_are_inverse() {
        let r = Ranking::from_order(vec![2, 0, 1]).unwrap();
        assert_eq!(r.ranks(), &[2, 3, 1]);
        let back = Ranking::from_ranks(r.ranks().to_vec()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn rejects_non_permutations() {
        assert!(Ranking::from_order(vec![0, 0]).is_err());
        assert!(Ranking::from_order(vec![0, 2]).is_err());
        assert!(Ranking::from_ranks(vec![1, 1]).is_err());
        assert!(Ranking::from_ranks(vec![0, 1]).is_err());
    }

    #[test]
    fn swap_keeps_inverse_consistent() {
        let mut r = Ranking::identity(4);
        r.swap_positions(0, 2);
        assert_eq!(r.order(), &[2, 1, 0, 3]);
        assert_eq!(r.rank_of(2), 1);
        assert_eq!(r.rank_of(0), 3);
    }

    #[test]
    fn serializes_as_ranks() {
        let r = Ranking::from_order(vec![1, 0]).unwrap();
        assert_eq!(serde_json::to_string(&r).unwrap(), "[2,1]");
        let back: Ranking = serde_json::from_str("[2,1]").unwrap();
        assert_eq!(back, r);
    }
}
