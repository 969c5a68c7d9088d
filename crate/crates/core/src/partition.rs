//! Member state layout and the N×M block redistribution between runner parts
//! and server shards.

use std::ops::Range;

use crate::error::{Error, Result};

/// A dynamic state of `n_dynamic` reals whose first `n_assimilated` entries are
/// the assimilated state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateLayout {
    n_dynamic: usize,
    n_assimilated: usize,
}

impl StateLayout {
    pub fn n_dynamic(&self) -> usize {
        self.n_dynamic
    }

    pub fn n_assimilated(&self) -> usize {
        self.n_assimilated
    }

    /// Always 0: the assimilated state is a prefix.
    pub fn assimilated_offset(&self) -> usize {
        0
    }

    pub fn assimilated_range(&self) -> Range<usize> {
        0..self.n_assimilated
    }
}

pub fn make_layout(n_dynamic: usize, n_assimilated: usize) -> Result<StateLayout> {
    if n_assimilated == 0 || n_assimilated > n_dynamic {
        return Err(Error::config(format!(
            "invalid layout: need 0 < n_assimilated ({n_assimilated}) <= n_dynamic ({n_dynamic})"
        )));
    }
    Ok(StateLayout {
        n_dynamic,
        n_assimilated,
    })
}

/// The state of one ensemble member as exchanged between server and runners.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicState {
    pub member_id: u32,
    pub values: Vec<f64>,
}

impl DynamicState {
    pub fn new(member_id: u32, values: Vec<f64>, layout: &StateLayout) -> Result<Self> {
        if values.len() != layout.n_dynamic {
            return Err(Error::config(format!(
                "member {member_id}: state has {} entries, layout expects {}",
                values.len(),
                layout.n_dynamic
            )));
        }
        Ok(Self { member_id, values })
    }

    pub fn assimilated<'a>(&'a self, layout: &StateLayout) -> &'a [f64] {
        &self.values[layout.assimilated_range()]
    }
}

/// Splits `[0, total)` into `parts` contiguous ranges whose sizes differ by at
/// most one, larger ranges first. Trailing ranges may be empty.
pub fn block_decompose(total: usize, parts: usize) -> Result<Vec<Range<usize>>> {
    if parts == 0 {
        return Err(Error::config("block decomposition needs at least one part"));
    }
    let base = total / parts;
    let extra = total % parts;
    let mut start = 0;
    Ok((0..parts)
        .map(|p| {
            let len = base + usize::from(p < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect())
}

fn intersect(a: &Range<usize>, b: &Range<usize>) -> Range<usize> {
    let start = a.start.max(b.start);
    let end = a.end.min(b.end);
    if start < end {
        start..end
    } else {
        // empty ranges are normalized so equality checks stay simple
        let at = start.min(a.end);
        at..at
    }
}

/// Which slice of the dynamic vector travels between runner part `p` and
/// server shard `s`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RedistributionMap {
    parts: Vec<Range<usize>>,
    shards: Vec<Range<usize>>,
    // transfers[p][s] = parts[p] ∩ shards[s]
    transfers: Vec<Vec<Range<usize>>>,
}

impl RedistributionMap {
    pub fn runner_parts(&self) -> usize {
        self.parts.len()
    }

    pub fn server_shards(&self) -> usize {
        self.shards.len()
    }

    pub fn part_range(&self, part: usize) -> Range<usize> {
        self.parts[part].clone()
    }

    pub fn shard_range(&self, shard: usize) -> Range<usize> {
        self.shards[shard].clone()
    }

    /// Global index range exchanged between `part` and `shard`.
    pub fn transfer(&self, part: usize, shard: usize) -> Range<usize> {
        self.transfers[part][shard].clone()
    }

    /// Slices a part-local buffer into the per-shard pieces it sends.
    pub fn scatter_part<'a>(&self, part: usize, local: &'a [f64]) -> Vec<&'a [f64]> {
        let base = self.parts[part].start;
        self.transfers[part]
            .iter()
            .map(|r| &local[r.start - base..r.end - base])
            .collect()
    }
}

pub fn make_redistribution_map(
    layout: &StateLayout,
    runner_parts: usize,
    server_shards: usize,
) -> Result<RedistributionMap> {
    let parts = block_decompose(layout.n_dynamic, runner_parts)?;
    let shards = block_decompose(layout.n_dynamic, server_shards)?;
    let transfers = parts
        .iter()
        .map(|p| shards.iter().map(|s| intersect(p, s)).collect())
        .collect();
    Ok(RedistributionMap {
        parts,
        shards,
        transfers,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn layouts() {
        let l = make_layout(100, 100).unwrap();
        assert_eq!(l.assimilated_range(), 0..100);
        let l = make_layout(92, 31).unwrap();
        assert_eq!(l.assimilated_range(), 0..31);
        assert_eq!(l.assimilated_offset(), 0);
        assert!(make_layout(10, 11).is_err());
        assert!(make_layout(10, 0).is_err());
    }

    #[test]
    fn dynamic_state_length_checked() {
        let l = make_layout(4, 2).unwrap();
        assert!(DynamicState::new(0, vec![0.0; 3], &l).is_err());
        let s = DynamicState::new(0, vec![1.0, 2.0, 3.0, 4.0], &l).unwrap();
        assert_eq!(s.assimilated(&l), &[1.0, 2.0]);
    }

    #[test]
    fn decompose_examples() {
        assert_eq!(block_decompose(10, 3).unwrap(), vec![0..4, 4..7, 7..10]);
        assert_eq!(
            block_decompose(5, 5).unwrap(),
            vec![0..1, 1..2, 2..3, 3..4, 4..5]
        );
        assert_eq!(
            block_decompose(3, 5).unwrap(),
            vec![0..1, 1..2, 2..3, 3..3, 3..3]
        );
        assert!(block_decompose(3, 0).is_err());
    }

    #[test]
    fn map_examples() {
        let l = make_layout(10, 10).unwrap();
        let m = make_redistribution_map(&l, 2, 2).unwrap();
        assert_eq!(m.transfer(0, 0), 0..5);
        assert!(m.transfer(0, 1).is_empty());

        let m = make_redistribution_map(&l, 1, 1).unwrap();
        assert_eq!(m.transfer(0, 0), 0..10);

        // shards follow the larger-first rule: [0,4) [4,7) [7,10)
        let m = make_redistribution_map(&l, 2, 3).unwrap();
        assert_eq!(m.shard_range(1), 4..7);
        assert_eq!(m.transfer(1, 1), 5..7);
        assert_eq!(m.transfer(1, 2), 7..10);
        assert!(m.transfer(1, 0).is_empty());
    }

    fn covers(ranges: &[Range<usize>], total: usize) -> bool {
        let mut next = 0;
        for r in ranges {
            if r.start != next || r.end < r.start {
                return false;
            }
            next = r.end;
        }
        next == total
    }

    proptest! {
        #[test]
        fn decomposition_partitions(total in 0usize..500, parts in 1usize..40) {
            let ranges = block_decompose(total, parts).unwrap();
            prop_assert_eq!(ranges.len(), parts);
            prop_assert!(covers(&ranges, total));
            let sizes: Vec<usize> = ranges.iter().map(|r| r.len()).collect();
            let max = *sizes.iter().max().unwrap();
            let min = *sizes.iter().min().unwrap();
            prop_assert!(max - min <= 1);
            // larger blocks come first
            prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
        }

        #[test]
        fn transfers_reassemble_parts(n in 1usize..300, p in 1usize..12, s in 1usize..12) {
            let l = make_layout(n, n).unwrap();
            let m = make_redistribution_map(&l, p, s).unwrap();
            prop_assert!(covers(&(0..p).map(|i| m.part_range(i)).collect::<Vec<_>>(), n));
            prop_assert!(covers(&(0..s).map(|i| m.shard_range(i)).collect::<Vec<_>>(), n));
            for part in 0..p {
                let pieces: Vec<_> = (0..s)
                    .map(|sh| m.transfer(part, sh))
                    .filter(|r| !r.is_empty())
                    .collect();
                prop_assert!(
                    pieces.is_empty() && m.part_range(part).is_empty()
                        || pieces.first().map(|r| r.start) == Some(m.part_range(part).start)
                            && pieces.last().map(|r| r.end) == Some(m.part_range(part).end)
                );
                prop_assert!(pieces.windows(2).all(|w| w[0].end == w[1].start));
            }
        }
    }

    #[test]
    fn scatter_gather_round_trip_all_small_grids() {
        let n = 37;
        let layout = make_layout(n, 20).unwrap();
        let original: Vec<f64> = (0..n).map(|i| (i as f64).sin() * 1e3 + 0.1).collect();
        for p in 1..=8 {
            for s in 1..=8 {
                let map = make_redistribution_map(&layout, p, s).unwrap();
                // each shard receives its pieces from every part
                let mut shards: Vec<Vec<f64>> =
                    (0..s).map(|sh| vec![f64::NAN; map.shard_range(sh).len()]).collect();
                for part in 0..p {
                    let local = &original[map.part_range(part)];
                    for (sh, piece) in map.scatter_part(part, local).into_iter().enumerate() {
                        let r = map.transfer(part, sh);
                        if r.is_empty() {
                            continue;
                        }
                        let off = r.start - map.shard_range(sh).start;
                        shards[sh][off..off + piece.len()].copy_from_slice(piece);
                    }
                }
                let gathered: Vec<f64> = shards.concat();
                assert_eq!(
                    gathered.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                    original.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                    "P={p} S={s}"
                );
            }
        }
    }
}
