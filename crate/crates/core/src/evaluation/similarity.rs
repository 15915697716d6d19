//! Toolkit-free sequence similarity and nearest-neighbour baselines.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::data::fnv64;

pub const NGRAM_MAX: usize = 4;
pub const NGRAM_BINS: u64 = 2048;

/// Hashed n-gram set (n = 1..=4, 2048 bins) of a token sequence.
pub fn ngram_bins<S: AsRef<str>>(tokens: &[S]) -> HashSet<u64> {
    let mut out = HashSet::new();
    for n in 1..=NGRAM_MAX {
        for w in tokens.windows(n) {
            let mut key = format!("{n}");
            for t in w {
                key.push('\u{1f}');
                key.push_str(t.as_ref());
            }
            out.insert(fnv64(key.as_bytes()) % NGRAM_BINS);
        }
    }
    out
}

/// `|A ∩ B| / |A ∪ B|` over hashed n-gram bins; 1 for two empty inputs.
pub fn tanimoto_of_sets(a: &HashSet<u64>, b: &HashSet<u64>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

pub fn token_tanimoto<S: AsRef<str>>(a: &[S], b: &[S]) -> f64 {
    tanimoto_of_sets(&ngram_bins(a), &ngram_bins(b))
}

/// Token-level edit distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (a, b): (Vec<&T>, Vec<&T>) = (a.iter().collect(), b.iter().collect());
    strsim::generic_levenshtein(&a, &b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    Levenshtein,
    Tanimoto,
}

/// Mean label of the `k` nearest training items per query. Equal distances
/// are ordered by training index.
pub fn knn_baseline<S: AsRef<str> + PartialEq>(
    train: &[(Vec<S>, f64)],
    queries: &[Vec<S>],
    k: usize,
    distance: Distance,
) -> Vec<f64> {
    let k = k.clamp(1, train.len().max(1));
    if train.is_empty() {
        return vec![0.0; queries.len()];
    }
    let train_bins: Vec<HashSet<u64>> = match distance {
        Distance::Tanimoto => train.iter().map(|(t, _)| ngram_bins(t)).collect(),
        Distance::Levenshtein => Vec::new(),
    };
    queries
        .iter()
        .map(|q| {
            let mut d: Vec<(f64, usize)> = match distance {
                Distance::Levenshtein => {
                    train.iter().enumerate().map(|(i, (t, _))| (levenshtein(q, t) as f64, i)).collect()
                }
                Distance::Tanimoto => {
                    let qb = ngram_bins(q);
                    train_bins.iter().enumerate().map(|(i, b)| (1.0 - tanimoto_of_sets(&qb, b), i)).collect()
                }
            };
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < d.len() {
                d.select_nth_unstable_by(k - 1, cmp);
            }
            d[..k].iter().map(|&(_, i)| train[i].1).sum::<f64>() / k as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.chars().map(|c| c.to_string()).collect()
    }

    #[test]
    fn tanimoto_bounds() {
        assert_eq!(token_tanimoto(&toks("ABCA"), &toks("ABCA")), 1.0);
        assert_eq!(token_tanimoto(&toks("ABC"), &toks("XYZ")), 0.0);
        let s = token_tanimoto(&toks("ABCD"), &toks("ABCE"));
        assert!(s > 0.0 && s < 1.0);
    }

    #[test]
    fn edit_distance() {
        assert_eq!(levenshtein(&toks("kitten"), &toks("sitting")), 3);
        assert_eq!(levenshtein(&toks(""), &toks("ab")), 2);
    }

    #[test]
    fn knn_limits() {
        let train = vec![(toks("AAAA"), 1.0), (toks("BBBB"), 0.0), (toks("AABB"), 0.5)];
        let q = vec![toks("AAAA"), toks("BBBA")];
        assert_eq!(knn_baseline(&train, &q, 1, Distance::Levenshtein), vec![1.0, 0.0]);
        assert_eq!(knn_baseline(&train, &q, 3, Distance::Tanimoto), vec![0.5, 0.5]);
        // equidistant neighbours resolve to the earlier training item
        let tie = vec![(toks("AB"), 1.0), (toks("BA"), 0.0)];
        assert_eq!(knn_baseline(&tie, &[toks("AA")], 1, Distance::Levenshtein), vec![1.0]);
    }
}
