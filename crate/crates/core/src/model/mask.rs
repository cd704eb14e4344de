use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::pretext::rng_for;
use crate::tensor::{Tensor, MASKED};

/// Additive `N×N` decoder self-attention mask: zero inside a query group,
/// [`MASKED`] across groups.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    groups: usize,
    matrix: Tensor,
}

impl AttentionMask {
    pub fn num_queries(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn num_groups(&self) -> usize {
        self.groups
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.matrix
    }

    pub fn is_masked(&self, i: usize, j: usize) -> bool {
        self.matrix.get(&[i, j]) != 0.0
    }
}

fn check_groups(n: usize, m: usize) -> Result<()> {
    if m == 0 || n == 0 || !n.is_multiple_of(m) {
        return Err(Error::Config(format!("{n} object queries cannot be split into {m} equal groups")));
    }
    Ok(())
}

/// Group of query position `i` when `n` queries form `m` contiguous groups.
pub fn group_of(i: usize, n: usize, m: usize) -> usize {
    i / (n / m)
}

pub fn build_attention_mask(n: usize, m: usize) -> Result<AttentionMask> {
    check_groups(n, m)?;
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if group_of(i, n, m) != group_of(j, n, m) {
                data[i * n + j] = MASKED;
            }
        }
    }
    Ok(AttentionMask { groups: m, matrix: Tensor::new(vec![n, n], data)? })
}

/// Patch index feeding each of the `n` query positions.
pub fn group_assignment(n: usize, m: usize) -> Result<Vec<usize>> {
    check_groups(n, m)?;
    Ok((0..n).map(|i| group_of(i, n, m)).collect())
}

/// Embedding index used at each query position. Identity unless `enabled`.
pub fn shuffle_queries(n: usize, seed: u64, enabled: bool) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    if enabled {
        perm.shuffle(&mut rng_for(seed));
    }
    perm
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_groups_of_three() {
        let m = build_attention_mask(6, 2).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(m.is_masked(i, j), (i < 3) != (j < 3));
            }
        }
        assert_eq!(group_assignment(6, 2).unwrap(), vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn ten_blocks_of_ten() {
        let m = build_attention_mask(100, 10).unwrap();
        let open = m.as_tensor().data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(open, 10 * 10 * 10);
        assert!(!m.is_masked(19, 10) && m.is_masked(19, 20));
    }

    #[test]
    fn single_group_is_unmasked() {
        let m = build_attention_mask(7, 1).unwrap();
        assert!(m.as_tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_is_config_error() {
        assert!(matches!(build_attention_mask(10, 3), Err(Error::Config(_))));
        assert!(build_attention_mask(10, 0).is_err());
    }

    #[test]
    fn shuffle_off_is_identity() {
        assert_eq!(shuffle_queries(5, 99, false), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn shuffle_spreads_embeddings_evenly_over_groups() {
        let (n, m, trials) = (16, 4, 10_000);
        let mut counts = vec![vec![0usize; m]; n];
        for seed in 0..trials {
            let perm = shuffle_queries(n, seed, true);
            for (pos, &e) in perm.iter().enumerate() {
                counts[e][group_of(pos, n, m)] += 1;
            }
        }
        for row in &counts {
            for &c in row {
                let f = c as f64 / trials as f64;
                assert!((f - 1.0 / m as f64).abs() <= 0.02, "frequency {f}");
            }
        }
    }

    proptest! {
        #[test]
        fn mask_is_symmetric_with_open_diagonal(g in 1usize..8, per in 1usize..6) {
            let n = g * per;
            let m = build_attention_mask(n, g).unwrap();
            for i in 0..n {
                prop_assert!(!m.is_masked(i, i));
                for j in 0..n {
                    prop_assert_eq!(m.is_masked(i, j), m.is_masked(j, i));
                }
            }
        }

        #[test]
        fn shuffle_is_a_bijection(n in 1usize..64, seed: u64) {
            let mut p = shuffle_queries(n, seed, true);
            prop_assert_eq!(&p, &shuffle_queries(n, seed, true));
            p.sort_unstable();
            prop_assert_eq!(p, (0..n).collect::<Vec<_>>());
        }
    }
}
