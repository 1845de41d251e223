//! Canonical (order-of-appearance) labelings and set-partition enumeration.
//!
//! Labels are 0-based: a sequence is canonical when `c[0] == 0` and every
//! `c[m] <= 1 + max(c[..m])`. Canonical sequences are restricted-growth
//! strings and stand in one-to-one correspondence with set partitions.

use crate::error::{Error, Result};

pub fn is_canonical(labels: &[usize]) -> bool {
    let mut next = 0;
    for &c in labels {
        if c > next {
            return false;
        }
        if c == next {
            next += 1;
        }
    }
    true
}

pub fn check_canonical(labels: &[usize]) -> Result<()> {
    let mut next = 0;
    for (m, &c) in labels.iter().enumerate() {
        if c > next {
            return Err(Error::Labels(format!(
                "label {c} at position {m} exceeds the next free cluster {next}"
            )));
        }
        if c == next {
            next += 1;
        }
    }
    Ok(())
}

/// Relabels clusters in order of first appearance.
pub fn canonicalize<T: PartialEq + Copy>(labels: &[T]) -> Vec<usize> {
    let mut seen: Vec<T> = Vec::new();
    labels
        .iter()
        .map(|l| match seen.iter().position(|s| s == l) {
            Some(i) => i,
            None => {
                seen.push(*l);
                seen.len() - 1
            }
        })
        .collect()
}

pub fn num_clusters(labels: &[usize]) -> usize {
    labels.iter().max().map_or(0, |m| m + 1)
}

pub fn cluster_sizes(labels: &[usize]) -> Vec<usize> {
    let mut sizes = vec![0; num_clusters(labels)];
    for &c in labels {
        sizes[c] += 1;
    }
    sizes
}

/// Labels of the points `order[0], order[1], ...` given per-point labels,
/// canonicalized for that visiting order.
pub fn reorder(labels_by_point: &[usize], order: &[usize]) -> Vec<usize> {
    let visited: Vec<usize> = order.iter().map(|&i| labels_by_point[i]).collect();
    canonicalize(&visited)
}

/// Inverse of [`reorder`]: per-point labels (canonical in point order) from
/// labels given in visiting order.
pub fn to_point_order(labels_in_order: &[usize], order: &[usize]) -> Vec<usize> {
    let mut by_point = vec![0; order.len()];
    for (m, &i) in order.iter().enumerate() {
        by_point[i] = labels_in_order[m];
    }
    canonicalize(&by_point)
}

/// Bell number `B(n)`.
pub fn bell(n: usize) -> u64 {
    // Bell triangle.
    let mut row = vec![1u64];
    for _ in 0..n {
        let mut next = vec![*row.last().unwrap()];
        for v in &row {
            let last = *next.last().unwrap();
            next.push(last + v);
        }
        row = next;
    }
    row[0]
}

/// All restricted-growth strings of length `n` in lexicographic order.
#[derive(Debug, Clone)]
pub struct RestrictedGrowth {
    current: Vec<usize>,
    /// `maxes[i] = max(current[..=i])`.
    maxes: Vec<usize>,
    done: bool,
}

impl RestrictedGrowth {
    pub fn new(n: usize) -> Self {
        Self { current: vec![0; n], maxes: vec![0; n], done: false }
    }
}

impl Iterator for RestrictedGrowth {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        let out = self.current.clone();
        let n = self.current.len();
        // Advance: rightmost position that can still grow.
        let mut i = n;
        loop {
            if i <= 1 {
                self.done = true;
                break;
            }
            i -= 1;
            if self.current[i] <= self.maxes[i - 1] {
                self.current[i] += 1;
                self.maxes[i] = self.maxes[i - 1].max(self.current[i]);
                for j in i + 1..n {
                    self.current[j] = 0;
                    self.maxes[j] = self.maxes[i];
                }
                break;
            }
        }
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bell_numbers() {
        let expect = [1, 1, 2, 5, 15, 52, 203, 877, 4140, 21147, 115975];
        for (n, b) in expect.iter().enumerate() {
            assert_eq!(bell(n), *b);
        }
    }

    #[test]
    fn enumeration_counts_match_bell() {
        for n in 0..=8 {
            let all: Vec<_> = RestrictedGrowth::new(n).collect();
            assert_eq!(all.len() as u64, bell(n), "n = {n}");
            assert!(all.iter().all(|c| is_canonical(c)));
            assert!(all.windows(2).all(|w| w[0] < w[1]), "lexicographic");
        }
    }

    #[test]
    fn enumerates_n3() {
        let all: Vec<_> = RestrictedGrowth::new(3).collect();
        assert_eq!(all, vec![vec![0, 0, 0], vec![0, 0, 1], vec![0, 1, 0], vec![0, 1, 1], vec![0, 1, 2]]);
    }

    #[test]
    fn canonical_checks() {
        assert!(is_canonical(&[0, 0, 1, 0, 2]));
        assert!(!is_canonical(&[1, 0]));
        assert!(!is_canonical(&[0, 2]));
        assert!(check_canonical(&[0, 2]).is_err());
        assert_eq!(canonicalize(&[7, 7, 3, 9, 3]), vec![0, 0, 1, 2, 1]);
    }

    proptest! {
        #[test]
        fn reorder_round_trips(raw in proptest::collection::vec(0usize..4, 1..12), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let labels = canonicalize(&raw);
            let mut order: Vec<usize> = (0..labels.len()).collect();
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let visited = reorder(&labels, &order);
            prop_assert!(is_canonical(&visited));
            prop_assert_eq!(to_point_order(&visited, &order), labels);
        }
    }
}
