//! Binned regression trees: histogram split finding with leaf-wise growth
//! and per-node missing-value directions.

use serde::{Deserialize, Serialize};

pub const MISSING_BIN: u16 = u16::MAX;
const MAX_BINS: usize = 255;

/// Column-major binned view of a feature matrix. Bin boundaries are raw
/// feature thresholds, so grown trees predict directly on raw rows.
#[derive(Debug, Clone)]
pub struct BinnedMatrix {
    /// Per feature: sorted cut thresholds; values <= cuts[b] fall in bin b.
    pub cuts: Vec<Vec<f64>>,
    /// Per feature: bin index per row, MISSING_BIN for NaN.
    pub bins: Vec<Vec<u16>>,
    pub num_rows: usize,
}

fn build_cuts(values: &mut Vec<f64>) -> Vec<f64> {
    values.sort_by(|a, b| a.total_cmp(b));
    values.dedup();
    if values.len() < 2 {
        return Vec::new();
    }
    if values.len() <= MAX_BINS {
        values
            .windows(2)
            .map(|w| 0.5 * (w[0] + w[1]))
            .collect()
    } else {
        // evenly spaced ranks over the distinct values
        (1..MAX_BINS)
            .map(|k| {
                let idx = k * values.len() / MAX_BINS;
                0.5 * (values[idx - 1] + values[idx])
            })
            .collect()
    }
}

fn bin_of(cuts: &[f64], v: f64) -> u16 {
    if v.is_nan() {
        return MISSING_BIN;
    }
    cuts.partition_point(|c| *c < v) as u16
}

impl BinnedMatrix {
    pub fn from_rows<'a, I>(rows: I, num_features: usize) -> BinnedMatrix
    where
        I: Iterator<Item = &'a [f64]> + Clone,
    {
        let mut cuts = Vec::with_capacity(num_features);
        for f in 0..num_features {
            let mut col: Vec<f64> = rows
                .clone()
                .map(|r| r[f])
                .filter(|v| v.is_finite())
                .collect();
            cuts.push(build_cuts(&mut col));
        }
        let mut bins: Vec<Vec<u16>> = vec![Vec::new(); num_features];
        let mut num_rows = 0;
        for row in rows {
            num_rows += 1;
            for f in 0..num_features {
                bins[f].push(bin_of(&cuts[f], row[f]));
            }
        }
        BinnedMatrix {
            cuts,
            bins,
            num_rows,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        missing_left: bool,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionTree {
    /// Root at index 0; children referenced by index.
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut idx = 0;
        loop {
            match &self.nodes[idx] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    missing_left,
                    left,
                    right,
                } => {
                    let v = x[*feature];
                    idx = if v.is_nan() {
                        if *missing_left {
                            *left
                        } else {
                            *right
                        }
                    } else if v <= *threshold {
                        *left
                    } else {
                        *right
                    };
                }
            }
        }
    }

    /// Add this tree's split counts into `counts` (indexed by feature).
    pub fn accumulate_split_counts(&self, counts: &mut [u64]) {
        for node in &self.nodes {
            if let Node::Split { feature, .. } = node {
                counts[*feature] += 1;
            }
        }
    }

    pub fn num_splits(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Split { .. }))
            .count()
    }
}

#[derive(Debug, Clone, Copy)]
struct SplitChoice {
    feature: usize,
    bin: u16,
    missing_left: bool,
    gain: f64,
}

struct Candidate {
    slot: usize,
    rows: Vec<u32>,
    best: Option<SplitChoice>,
}

/// Structural growth constraints; leaf values are assigned afterwards.
#[derive(Debug, Clone, Copy)]
pub struct GrowthParams {
    pub max_leaves: usize,
    pub min_leaf_count: usize,
    pub min_split_gain: f64,
}

/// A grown tree whose leaves still hold placeholder values, plus the row
/// sets that landed in each leaf for value renewal.
pub struct GrownTree {
    pub tree: RegressionTree,
    pub leaf_rows: Vec<(usize, Vec<u32>)>,
}

fn best_split(
    binned: &BinnedMatrix,
    grads: &[f64],
    allowed: &[bool],
    rows: &[u32],
    params: &GrowthParams,
) -> Option<SplitChoice> {
    let n = rows.len();
    if n < 2 * params.min_leaf_count {
        return None;
    }
    let total: f64 = rows.iter().map(|&r| grads[r as usize]).sum();
    let parent_score = total * total / n as f64;
    let mut best: Option<SplitChoice> = None;

    for (feature, cuts) in binned.cuts.iter().enumerate() {
        if !allowed[feature] || cuts.is_empty() {
            continue;
        }
        let num_bins = cuts.len() + 1;
        let mut hist_sum = vec![0.0f64; num_bins];
        let mut hist_cnt = vec![0u32; num_bins];
        let mut miss_sum = 0.0;
        let mut miss_cnt = 0u32;
        let col = &binned.bins[feature];
        for &r in rows {
            let b = col[r as usize];
            let g = grads[r as usize];
            if b == MISSING_BIN {
                miss_sum += g;
                miss_cnt += 1;
            } else {
                hist_sum[b as usize] += g;
                hist_cnt[b as usize] += 1;
            }
        }
        if miss_cnt as usize == n {
            continue;
        }
        let mut left_sum = 0.0;
        let mut left_cnt = 0u32;
        for b in 0..num_bins - 1 {
            left_sum += hist_sum[b];
            left_cnt += hist_cnt[b];
            let directions: &[bool] = if miss_cnt > 0 { &[true, false] } else { &[true] };
            for &missing_left in directions {
                let (ls, lc) = if missing_left {
                    (left_sum + miss_sum, left_cnt + miss_cnt)
                } else {
                    (left_sum, left_cnt)
                };
                let rs = total - ls;
                let rc = n as u32 - lc;
                if (lc as usize) < params.min_leaf_count || (rc as usize) < params.min_leaf_count {
                    continue;
                }
                let gain = ls * ls / lc as f64 + rs * rs / rc as f64 - parent_score;
                if gain > params.min_split_gain + 1e-12
                    && best.map_or(true, |b| gain > b.gain)
                {
                    best = Some(SplitChoice {
                        feature,
                        bin: b as u16,
                        missing_left,
                        gain,
                    });
                }
            }
        }
    }
    best
}

/// Grow a tree leaf-wise on squared pseudo-gradient reduction, splitting
/// the open leaf with the largest gain until `max_leaves` is reached or no
/// admissible split remains.
pub fn grow_tree(
    binned: &BinnedMatrix,
    grads: &[f64],
    allowed: &[bool],
    params: &GrowthParams,
) -> GrownTree {
    let all_rows: Vec<u32> = (0..binned.num_rows as u32).collect();
    let mut nodes = vec![Node::Leaf { value: 0.0 }];
    let mut candidates: Vec<Option<Candidate>> = vec![Some(Candidate {
        slot: 0,
        best: best_split(binned, grads, allowed, &all_rows, params),
        rows: all_rows,
    })];
    let mut num_leaves = 1;

    while num_leaves < params.max_leaves {
        // first-best selection keeps ties deterministic
        let mut pick: Option<(usize, f64)> = None;
        for (i, cand) in candidates.iter().enumerate() {
            if let Some(c) = cand {
                if let Some(s) = c.best {
                    if pick.map_or(true, |(_, g)| s.gain > g) {
                        pick = Some((i, s.gain));
                    }
                }
            }
        }
        let Some((idx, _)) = pick else { break };
        let cand = candidates[idx].take().expect("picked candidate present");
        let choice = cand.best.expect("candidate has split");

        let col = &binned.bins[choice.feature];
        let (mut left_rows, mut right_rows) = (Vec::new(), Vec::new());
        for &r in &cand.rows {
            let b = col[r as usize];
            let go_left = if b == MISSING_BIN {
                choice.missing_left
            } else {
                b <= choice.bin
            };
            if go_left {
                left_rows.push(r);
            } else {
                right_rows.push(r);
            }
        }

        let left_slot = nodes.len();
        let right_slot = nodes.len() + 1;
        nodes.push(Node::Leaf { value: 0.0 });
        nodes.push(Node::Leaf { value: 0.0 });
        nodes[cand.slot] = Node::Split {
            feature: choice.feature,
            threshold: binned.cuts[choice.feature][choice.bin as usize],
            missing_left: choice.missing_left,
            left: left_slot,
            right: right_slot,
        };
        for (slot, rows) in [(left_slot, left_rows), (right_slot, right_rows)] {
            candidates.push(Some(Candidate {
                slot,
                best: best_split(binned, grads, allowed, &rows, params),
                rows,
            }));
        }
        num_leaves += 1;
    }

    let leaf_rows = candidates
        .into_iter()
        .flatten()
        .map(|c| (c.slot, c.rows))
        .collect();
    GrownTree {
        tree: RegressionTree { nodes },
        leaf_rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binned(rows: &[Vec<f64>]) -> BinnedMatrix {
        BinnedMatrix::from_rows(rows.iter().map(|r| r.as_slice()), rows[0].len())
    }

    #[test]
    fn binning_round_trips_thresholds() {
        let rows: Vec<Vec<f64>> = vec![vec![1.0], vec![2.0], vec![5.0], vec![2.0]];
        let b = binned(&rows);
        assert_eq!(b.cuts[0], vec![1.5, 3.5]);
        assert_eq!(b.bins[0], vec![0, 1, 2, 1]);
    }

    #[test]
    fn nan_maps_to_missing_bin() {
        let rows: Vec<Vec<f64>> = vec![vec![1.0], vec![f64::NAN], vec![2.0]];
        let b = binned(&rows);
        assert_eq!(b.bins[0][1], MISSING_BIN);
    }

    #[test]
    fn grows_single_split_on_step_function() {
        // gradient +1 where x > 0, -1 otherwise
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 - 4.5]).collect();
        let grads: Vec<f64> = rows
            .iter()
            .map(|r| if r[0] > 0.0 { 1.0 } else { -1.0 })
            .collect();
        let b = binned(&rows);
        let grown = grow_tree(
            &b,
            &grads,
            &[true],
            &GrowthParams {
                max_leaves: 2,
                min_leaf_count: 1,
                min_split_gain: 0.0,
            },
        );
        match &grown.tree.nodes[0] {
            Node::Split { threshold, .. } => {
                assert!(*threshold > -0.5 && *threshold < 0.5, "threshold {threshold}");
            }
            other => panic!("expected split at root, got {other:?}"),
        }
        assert_eq!(grown.leaf_rows.len(), 2);
    }

    #[test]
    fn constant_gradient_does_not_split() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let grads = vec![0.5; 10];
        let b = binned(&rows);
        let grown = grow_tree(
            &b,
            &grads,
            &[true],
            &GrowthParams {
                max_leaves: 8,
                min_leaf_count: 1,
                min_split_gain: 0.0,
            },
        );
        assert_eq!(grown.tree.num_splits(), 0);
    }

    #[test]
    fn min_leaf_count_limits_splits() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64]).collect();
        let grads = vec![-1.0, -1.0, -1.0, 1.0, 1.0, 1.0];
        let b = binned(&rows);
        let grown = grow_tree(
            &b,
            &grads,
            &[true],
            &GrowthParams {
                max_leaves: 8,
                min_leaf_count: 3,
                min_split_gain: 0.0,
            },
        );
        assert_eq!(grown.tree.num_splits(), 1);
    }

    #[test]
    fn missing_values_follow_stored_direction() {
        // missing rows carry strongly positive gradient: expect them routed
        // with the positive side
        let rows: Vec<Vec<f64>> = vec![
            vec![1.0],
            vec![2.0],
            vec![3.0],
            vec![10.0],
            vec![11.0],
            vec![f64::NAN],
            vec![f64::NAN],
        ];
        let grads = vec![-1.0, -1.0, -1.0, 1.0, 1.0, 1.0, 1.0];
        let b = binned(&rows);
        let grown = grow_tree(
            &b,
            &grads,
            &[true],
            &GrowthParams {
                max_leaves: 2,
                min_leaf_count: 1,
                min_split_gain: 0.0,
            },
        );
        let Node::Split { missing_left, .. } = grown.tree.nodes[0] else {
            panic!("expected split");
        };
        assert!(!missing_left);
        // prediction with NaN routes without panicking
        let _ = grown.tree.predict(&[f64::NAN]);
    }

    #[test]
    fn prediction_is_piecewise_constant() {
        let tree = RegressionTree {
            nodes: vec![
                Node::Split {
                    feature: 0,
                    threshold: 2.5,
                    missing_left: true,
                    left: 1,
                    right: 2,
                },
                Node::Leaf { value: -3.0 },
                Node::Leaf { value: 4.0 },
            ],
        };
        assert_eq!(tree.predict(&[2.4]), -3.0);
        assert_eq!(tree.predict(&[0.1]), -3.0);
        assert_eq!(tree.predict(&[2.6]), 4.0);
        assert_eq!(tree.predict(&[99.0]), 4.0);
        assert_eq!(tree.predict(&[f64::NAN]), -3.0);
    }

    #[test]
    fn disallowed_features_are_never_split() {
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|i| vec![i as f64, (i % 2) as f64])
            .collect();
        let grads: Vec<f64> = (0..10).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let b = binned(&rows);
        let grown = grow_tree(
            &b,
            &grads,
            &[true, false],
            &GrowthParams {
                max_leaves: 16,
                min_leaf_count: 1,
                min_split_gain: 0.0,
            },
        );
        let mut counts = vec![0u64; 2];
        grown.tree.accumulate_split_counts(&mut counts);
        assert_eq!(counts[1], 0);
    }
}
