use std::collections::HashMap;
use std::hash::Hash;

/// Pooled corpus statistics for n = 1..=4.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BleuStats {
    /// Clipped n-gram matches.
    pub matches: [u64; 4],
    /// Candidate n-gram counts.
    pub totals: [u64; 4],
    pub candidate_len: u64,
    pub reference_len: u64,
}

impl BleuStats {
    /// Geometric mean of the pooled precisions times the brevity penalty; 0 when any precision is 0.
    pub fn score(&self) -> f64 {
        if self.matches.iter().any(|&m| m == 0) {
            return 0.0;
        }
        let log_p: f64 = (0..4).map(|n| (self.matches[n] as f64 / self.totals[n] as f64).ln()).sum::<f64>() / 4.0;
        let (c, r) = (self.candidate_len as f64, self.reference_len as f64);
        let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
        bp * log_p.exp()
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], u64> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

pub fn bleu_stats<T: Eq + Hash, S: AsRef<[T]>>(candidates: &[S], references: &[S]) -> Result<BleuStats, super::EvalError> {
    if candidates.len() != references.len() {
        return Err(super::EvalError::LengthMismatch { candidates: candidates.len(), references: references.len() });
    }
    let mut s = BleuStats::default();
    for (c, r) in candidates.iter().zip(references) {
        let (c, r) = (c.as_ref(), r.as_ref());
        s.candidate_len += c.len() as u64;
        s.reference_len += r.len() as u64;
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (g, k) in ngram_counts(c, n) {
                s.matches[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
                s.totals[n - 1] += k;
            }
        }
    }
    Ok(s)
}

/// Corpus BLEU-4 of each candidate against its single reference, unsmoothed.
pub fn bleu4<T: Eq + Hash, S: AsRef<[T]>>(candidates: &[S], references: &[S]) -> Result<f64, super::EvalError> {
    Ok(bleu_stats(candidates, references)?.score())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Counts by direct enumeration: for every candidate n-gram position, how many times does the
    /// same n-gram occur in each sentence, with clipping applied per distinct n-gram.
    fn oracle(pairs: &[(Vec<u8>, Vec<u8>)]) -> BleuStats {
        let mut s = BleuStats::default();
        for (c, r) in pairs {
            s.candidate_len += c.len() as u64;
            s.reference_len += r.len() as u64;
            for n in 1..=4usize {
                if c.len() < n {
                    continue;
                }
                let occurrences = |hay: &Vec<u8>, g: &[u8]| (0..=hay.len().saturating_sub(n)).filter(|&j| hay.len() >= n && &hay[j..j + n] == g).count() as u64;
                for i in 0..=c.len() - n {
                    let g = &c[i..i + n];
                    s.totals[n - 1] += 1;
                    // Only the first occurrence of each distinct n-gram contributes its clipped count.
                    if (0..i).any(|j| &c[j..j + n] == g) {
                        continue;
                    }
                    s.matches[n - 1] += occurrences(c, g).min(occurrences(r, g));
                }
            }
        }
        s
    }

    fn all_sentences(max_len: usize) -> Vec<Vec<u8>> {
        let mut out = vec![vec![]];
        let mut frontier = vec![vec![]];
        for _ in 0..max_len {
            frontier = frontier
                .iter()
                .flat_map(|s: &Vec<u8>| (0..5u8).map(move |a| [s.clone(), vec![a]].concat()))
                .collect();
            out.extend(frontier.iter().cloned());
        }
        out
    }

    #[test]
    fn hand_example() {
        let c = vec![vec!["a", "b", "c", "d", "e"]];
        let r = vec![vec!["a", "b", "c", "d"]];
        let want = (4.0 / 5.0 * 3.0 / 4.0 * 2.0 / 3.0 * 1.0 / 2.0f64).powf(0.25);
        let got = bleu4(&c, &r).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert_eq!(format!("{got:.4}"), "0.6687");
    }

    #[test]
    fn identity_and_disjoint() {
        let s = vec![vec![1, 2, 3, 4, 5], vec![2, 2, 3, 1]];
        assert_eq!(bleu4(&s, &s).unwrap(), 1.0);
        assert_eq!(bleu4(&[vec![9, 9, 9, 9]], &[vec![1, 2, 3, 4]]).unwrap(), 0.0);
    }

    #[test]
    fn brevity_penalty_applies_to_short_candidates() {
        let c = vec![vec![1, 2, 3, 4]];
        let r = vec![vec![1, 2, 3, 4, 5, 6]];
        assert!((bleu4(&c, &r).unwrap() - (1.0f64 - 6.0 / 4.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(bleu4(&[vec![1]], &[vec![1], vec![2]]).is_err());
    }

    #[test]
    fn exhaustive_short_pairs_match_oracle() {
        let all = all_sentences(3);
        assert_eq!(all.len(), 156);
        for c in &all {
            for r in &all {
                let pair = [(c.clone(), r.clone())];
                assert_eq!(bleu_stats(&[c.clone()], &[r.clone()]).unwrap(), oracle(&pair));
            }
        }
    }

    #[test]
    fn every_candidate_up_to_eight_matches_oracle() {
        let fixed = vec![0, 1, 2, 3, 4, 0, 1, 2];
        for c in all_sentences(8) {
            let rev: Vec<u8> = c.iter().rev().copied().collect();
            for r in [&fixed, &rev] {
                let pair = [(c.clone(), r.clone())];
                assert_eq!(bleu_stats(&[c.clone()], &[r.clone()]).unwrap(), oracle(&pair));
            }
        }
    }

    proptest! {
        #[test]
        fn pooled_counts_match_oracle(
            pairs in prop::collection::vec((prop::collection::vec(0..5u8, 0..=8), prop::collection::vec(0..5u8, 0..=8)), 1..6)
        ) {
            let (c, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
            prop_assert_eq!(bleu_stats(&c, &r).unwrap(), oracle(&pairs));
        }
    }
}
