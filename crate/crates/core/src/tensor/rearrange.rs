//! Structured index permutations (einops-style factor/permute/merge).
//!
//! A [`RearrangeSpec`] factors each input axis into elementary axes ("atoms"),
//! permutes the atoms, and merges consecutive atoms back into output axes.
//! Applying a spec moves values without creating or destroying any, so every
//! spec has an exact inverse.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RearrangeSpec {
    /// Extents of the atoms making up each input axis, in row-major order.
    input_axes: Vec<Vec<usize>>,
    /// `perm[k]` = index (into the flattened atom list) of the atom that
    /// lands at output position `k`.
    perm: Vec<usize>,
    /// How many consecutive permuted atoms merge into each output axis.
    output_groups: Vec<usize>,
}

impl RearrangeSpec {
    pub fn new(
        input_axes: Vec<Vec<usize>>,
        perm: Vec<usize>,
        output_groups: Vec<usize>,
    ) -> Result<Self> {
        let n_atoms: usize = input_axes.iter().map(|a| a.len()).sum();
        let invalid = |msg: String| Error::InvalidArgument {
            op: "rearrange",
            msg,
        };
        if perm.len() != n_atoms {
            return Err(invalid(format!(
                "permutation length {} != atom count {n_atoms}",
                perm.len()
            )));
        }
        let mut seen = vec![false; n_atoms];
        for &p in &perm {
            if p >= n_atoms || seen[p] {
                return Err(invalid(format!("not a permutation: {perm:?}")));
            }
            seen[p] = true;
        }
        if output_groups.iter().sum::<usize>() != n_atoms {
            return Err(invalid(format!(
                "output groups {output_groups:?} do not cover {n_atoms} atoms"
            )));
        }
        if input_axes.iter().any(|a| a.is_empty()) || output_groups.contains(&0) {
            return Err(invalid("empty axis group".into()));
        }
        if input_axes.iter().flatten().any(|&e| e == 0) {
            return Err(invalid("zero atom extent".into()));
        }
        Ok(RearrangeSpec {
            input_axes,
            perm,
            output_groups,
        })
    }

    /// Local aggregation: `(n_h g) (n_w g) c -> (n_h n_w) (g g) c`.
    /// Groups are contiguous g x g tiles.
    pub fn local_aggregate(h: usize, w: usize, c: usize, g: usize) -> Result<Self> {
        check_divisible(h, w, g)?;
        RearrangeSpec::new(
            vec![vec![h / g, g], vec![w / g, g], vec![c]],
            vec![0, 2, 1, 3, 4],
            vec![2, 2, 1],
        )
    }

    /// Global aggregation: `(g n_h) (g n_w) c -> (n_h n_w) (g g) c`.
    /// Groups are dilated lattices with stride (h/g, w/g).
    pub fn global_aggregate(h: usize, w: usize, c: usize, g: usize) -> Result<Self> {
        check_divisible(h, w, g)?;
        RearrangeSpec::new(
            vec![vec![g, h / g], vec![g, w / g], vec![c]],
            vec![1, 3, 0, 2, 4],
            vec![2, 2, 1],
        )
    }

    fn atom_extents(&self) -> Vec<usize> {
        self.input_axes.iter().flatten().copied().collect()
    }

    pub fn input_shape(&self) -> Vec<usize> {
        self.input_axes
            .iter()
            .map(|a| a.iter().product())
            .collect()
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let atoms = self.atom_extents();
        let mut shape = Vec::with_capacity(self.output_groups.len());
        let mut at = 0;
        for &len in &self.output_groups {
            shape.push(self.perm[at..at + len].iter().map(|&p| atoms[p]).product());
            at += len;
        }
        shape
    }

    /// Errors unless `shape` factors exactly as this spec requires.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let want = self.input_shape();
        if shape != want.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "rearrange",
                lhs: shape.to_vec(),
                rhs: want,
            });
        }
        Ok(())
    }

    /// The spec mapping this spec's output back onto its input.
    pub fn inverse(&self) -> RearrangeSpec {
        let atoms = self.atom_extents();
        let mut inv_input_axes = Vec::with_capacity(self.output_groups.len());
        let mut at = 0;
        for &len in &self.output_groups {
            inv_input_axes.push(self.perm[at..at + len].iter().map(|&p| atoms[p]).collect());
            at += len;
        }
        // Atom j of the original input sits at position perm^-1[j] of the
        // permuted list, which is the inverse spec's input atom order.
        let mut inv_perm = vec![0; self.perm.len()];
        for (k, &p) in self.perm.iter().enumerate() {
            inv_perm[p] = k;
        }
        let inv_output_groups = self.input_axes.iter().map(|a| a.len()).collect();
        RearrangeSpec {
            input_axes: inv_input_axes,
            perm: inv_perm,
            output_groups: inv_output_groups,
        }
    }

    /// Gathers `src` (row-major in the input shape) into a fresh buffer laid
    /// out row-major in the output shape.
    pub fn apply_data(&self, src: &[f64]) -> Vec<f64> {
        let atoms = self.atom_extents();
        let n = atoms.len();
        // Row-major strides of each atom within the input buffer.
        let mut in_strides = vec![1usize; n];
        for i in (0..n.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * atoms[i + 1];
        }
        let out_extents: Vec<usize> = self.perm.iter().map(|&p| atoms[p]).collect();
        let out_strides: Vec<usize> = self.perm.iter().map(|&p| in_strides[p]).collect();

        let numel = src.len();
        let mut dst = vec![0.0; numel];
        if n == 0 {
            dst.copy_from_slice(src);
            return dst;
        }
        // Odometer over the permuted atoms; `src_at` tracks the input offset.
        let mut counters = vec![0usize; n];
        let mut src_at = 0usize;
        for d in dst.iter_mut() {
            *d = src[src_at];
            for axis in (0..n).rev() {
                counters[axis] += 1;
                src_at += out_strides[axis];
                if counters[axis] < out_extents[axis] {
                    break;
                }
                src_at -= out_strides[axis] * out_extents[axis];
                counters[axis] = 0;
            }
        }
        dst
    }

    /// Flat output index for each flat input index (test/debug helper).
    pub fn index_map(&self) -> Vec<usize> {
        // Applying the inverse to the ramp [0, 1, ..] lands each input index
        // at the output position this spec would send it to.
        let n: usize = self.input_shape().iter().product();
        let ramp: Vec<f64> = (0..n).map(|i| i as f64).collect();
        self.inverse()
            .apply_data(&ramp)
            .iter()
            .map(|&v| v as usize)
            .collect()
    }
}

fn check_divisible(h: usize, w: usize, g: usize) -> Result<()> {
    if g == 0 || h % g != 0 || w % g != 0 {
        return Err(Error::InvalidArgument {
            op: "aggregate",
            msg: format!("group size {g} does not divide spatial dims {h}x{w}"),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn la_4x4() -> RearrangeSpec {
        RearrangeSpec::local_aggregate(4, 4, 1, 2).unwrap()
    }

    fn ga_4x4() -> RearrangeSpec {
        RearrangeSpec::global_aggregate(4, 4, 1, 2).unwrap()
    }

    /// Brute-force oracle: enumerate the einops index arithmetic directly.
    fn group_members(map: &[usize], group: usize, group_len: usize) -> Vec<usize> {
        let mut members: Vec<usize> = (0..map.len())
            .filter(|&src| map[src] / group_len == group)
            .collect();
        members.sort_unstable();
        members
    }

    #[test]
    fn la_group_zero_is_contiguous_tile() {
        let map = la_4x4().index_map();
        assert_eq!(group_members(&map, 0, 4), vec![0, 1, 4, 5]);
    }

    #[test]
    fn ga_group_zero_is_strided_lattice() {
        let map = ga_4x4().index_map();
        assert_eq!(group_members(&map, 0, 4), vec![0, 2, 8, 10]);
    }

    #[test]
    fn output_shape_is_groups_by_window() {
        assert_eq!(la_4x4().output_shape(), vec![4, 4, 1]);
        let spec = RearrangeSpec::local_aggregate(56, 56, 64, 7).unwrap();
        assert_eq!(spec.output_shape(), vec![64, 49, 64]);
    }

    #[test]
    fn inverse_round_trips_bit_exact() {
        for spec in [la_4x4(), ga_4x4()] {
            let n: usize = spec.input_shape().iter().product();
            let src: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
            let fwd = spec.apply_data(&src);
            let back = spec.inverse().apply_data(&fwd);
            assert_eq!(back, src);
        }
    }

    #[test]
    fn non_divisible_extent_is_rejected() {
        assert!(RearrangeSpec::local_aggregate(5, 4, 1, 2).is_err());
        assert!(RearrangeSpec::global_aggregate(4, 6, 1, 4).is_err());
    }

    #[test]
    fn degenerate_group_size_one_is_identity_grouping() {
        let la = RearrangeSpec::local_aggregate(3, 3, 2, 1).unwrap();
        let ga = RearrangeSpec::global_aggregate(3, 3, 2, 1).unwrap();
        assert_eq!(la.index_map(), ga.index_map());
        assert_eq!(la.output_shape(), vec![9, 1, 2]);
    }
}
