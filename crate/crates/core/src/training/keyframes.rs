//! Greedy coverage-maximizing keyframe selection.

use fixedbitset::FixedBitSet;
use serde::{Deserialize, Serialize};

use super::config::CoverageSpace;
use crate::error::{Error, Result};
use crate::rasterizer::{coverage_pixels, coverage_texels, RasterOutput};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyframeSet {
    /// In selection order.
    pub frame_indices: Vec<usize>,
    #[serde(skip)]
    pub covered: FixedBitSet,
    pub budget: usize,
}

impl KeyframeSet {
    pub fn covered_count(&self) -> usize {
        self.covered.count_ones(..)
    }

    pub fn contains(&self, frame: usize) -> bool {
        self.frame_indices.contains(&frame)
    }
}

/// Greedy maximum coverage. Each round adds the set with the largest
/// marginal gain (lowest index on ties) and stops at `budget`, at zero
/// gain, or once `saturation` (a fraction of the union; 0 disables) is met.
pub fn greedy_max_coverage(sets: &[FixedBitSet], budget: usize, saturation: f64) -> Result<KeyframeSet> {
    if sets.is_empty() {
        return Err(Error::invalid("keyframe selection needs at least one frame"));
    }
    if budget == 0 {
        return Err(Error::invalid("keyframe budget must be >= 1"));
    }
    let len = sets.iter().map(FixedBitSet::len).max().unwrap_or(0);
    let mut union = FixedBitSet::with_capacity(len);
    for s in sets {
        union.union_with(s);
    }
    let target = (saturation * union.count_ones(..) as f64).ceil() as usize;
    let mut covered = FixedBitSet::with_capacity(len);
    let mut chosen = Vec::new();
    let mut taken = vec![false; sets.len()];
    while chosen.len() < budget {
        if saturation > 0.0 && covered.count_ones(..) >= target {
            break;
        }
        let mut best: Option<(usize, usize)> = None;
        for (i, s) in sets.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let gain = s.difference_count(&covered);
            if gain > 0 && best.is_none_or(|(_, g)| gain > g) {
                best = Some((i, gain));
            }
        }
        let Some((i, _)) = best else { break };
        taken[i] = true;
        covered.union_with(&sets[i]);
        chosen.push(i);
    }
    Ok(KeyframeSet {
        frame_indices: chosen,
        covered,
        budget,
    })
}

/// Best achievable coverage with at most `budget` sets, by enumeration.
pub fn exhaustive_max_coverage(sets: &[FixedBitSet], budget: usize) -> usize {
    fn rec(sets: &[FixedBitSet], start: usize, left: usize, acc: &FixedBitSet) -> usize {
        let mut best = acc.count_ones(..);
        if left == 0 {
            return best;
        }
        for i in start..sets.len() {
            let mut next = acc.clone();
            next.union_with(&sets[i]);
            best = best.max(rec(sets, i + 1, left - 1, &next));
        }
        best
    }
    let len = sets.iter().map(FixedBitSet::len).max().unwrap_or(0);
    rec(sets, 0, budget, &FixedBitSet::with_capacity(len))
}

/// Coverage sets for the given frames.
pub fn coverage_sets(rasters: &[&RasterOutput], space: CoverageSpace, texture_size: (usize, usize)) -> Vec<FixedBitSet> {
    crate::parallel::map_range(rasters.len(), |i| match space {
        CoverageSpace::Texel => coverage_texels(rasters[i], texture_size),
        CoverageSpace::Silhouette => coverage_pixels(rasters[i]),
    })
}

/// Texel-space keyframe selection over `rasters` (indices refer to it).
pub fn select_keyframes(
    rasters: &[RasterOutput],
    texture_resolution: (usize, usize),
    budget: usize,
) -> Result<KeyframeSet> {
    let refs: Vec<&RasterOutput> = rasters.iter().collect();
    greedy_max_coverage(&coverage_sets(&refs, CoverageSpace::Texel, texture_resolution), budget, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(len: usize, items: &[usize]) -> FixedBitSet {
        let mut s = FixedBitSet::with_capacity(len);
        for &i in items {
            s.insert(i);
        }
        s
    }

    #[test]
    fn constructed_example_matches_optimum() {
        let sets = vec![set(5, &[1, 2]), set(5, &[2, 3]), set(5, &[3, 4])];
        let k = greedy_max_coverage(&sets, 2, 0.0).unwrap();
        assert_eq!(k.frame_indices, vec![0, 2]);
        assert_eq!(k.covered.ones().collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        assert_eq!(k.covered_count(), exhaustive_max_coverage(&sets, 2));
    }

    #[test]
    fn single_full_frame() {
        let sets = vec![set(4, &[0, 1]), set(4, &[0, 1, 2, 3]), set(4, &[3])];
        let k = greedy_max_coverage(&sets, 3, 0.0).unwrap();
        assert_eq!(k.frame_indices, vec![1]);
    }

    #[test]
    fn large_budget_takes_all_useful_frames() {
        let sets = vec![set(6, &[0]), set(6, &[0]), set(6, &[1, 2]), set(6, &[5])];
        let k = greedy_max_coverage(&sets, 10, 0.0).unwrap();
        assert_eq!(k.frame_indices, vec![2, 0, 3]);
    }

    #[test]
    fn saturation_stops_early() {
        let sets = vec![set(10, &[0, 1, 2, 3, 4, 5, 6, 7, 8]), set(10, &[9])];
        assert_eq!(greedy_max_coverage(&sets, 2, 0.9).unwrap().frame_indices, vec![0]);
        assert_eq!(greedy_max_coverage(&sets, 2, 0.0).unwrap().frame_indices, vec![0, 1]);
    }

    #[test]
    fn errors() {
        assert!(greedy_max_coverage(&[], 2, 0.0).is_err());
        assert!(greedy_max_coverage(&[set(2, &[0])], 0, 0.0).is_err());
    }
}
