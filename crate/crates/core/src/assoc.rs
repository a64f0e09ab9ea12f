//! Gated optimal bipartite assignment.
//!
//! [`hungarian_solve`] maximizes the number of allowed pairs first and
//! minimizes their total cost second. Both goals fold into one square
//! assignment problem: allowed costs are shifted to `[0, range]` and every
//! forbidden or padding edge costs `K = n * range + 1`, so trading one allowed
//! edge for a `K` edge always costs more than any rearrangement of the rest.
//! Ties between optimal solutions are broken towards the lexicographically
//! smallest detection sequence, reading tracks in index order.

use crate::model::LinkMatrix;
use crate::tensor::Mat;

/// A matching of rows to columns with its total cost.
#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    /// `(row, column)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    /// Sum of the matched costs, accumulated in row order.
    pub total_cost: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AssignmentResult {
    /// `(track, detection, score)` sorted by track.
    pub matches: Vec<(usize, usize, f64)>,
    pub unmatched_tracks: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
}

/// Classic shortest-augmenting-path assignment on a dense square matrix.
/// Returns the column of each row plus the dual potentials.
fn solve_square(c: &[f64], n: usize) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    const INF: f64 = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    // p[j] = row (1-based) assigned to column j; p[0] is the row being inserted
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = c[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0; n];
    for j in 1..=n {
        col_of[p[j] - 1] = j - 1;
    }
    (col_of, u[1..].to_vec(), v[1..].to_vec())
}

#[derive(Clone, Copy, PartialEq)]
enum Pin {
    Free,
    Column(usize),
    /// Row must stay on a padding or forbidden edge.
    Filler,
}

struct TieBreak<'a> {
    n: usize,
    tight: &'a [bool],
    filler: &'a [bool],
    pins: Vec<Pin>,
    col_of: Vec<usize>,
    row_of: Vec<usize>,
}

impl TieBreak<'_> {
    fn can_use(&self, r: usize, j: usize) -> bool {
        self.tight[r * self.n + j]
            && match self.pins[r] {
                Pin::Free => true,
                Pin::Column(c) => c == j,
                Pin::Filler => self.filler[r * self.n + j],
            }
    }

    /// Moves row `r` off its column onto some other usable column, recursively
    /// displacing rows, until column `target` is taken. Returns whether the
    /// rotation closed; on success the matching is updated.
    fn reroute(&mut self, r: usize, target: usize, seen: &mut [bool]) -> bool {
        for j in 0..self.n {
            if seen[j] || !self.can_use(r, j) || j == self.col_of[r] {
                continue;
            }
            seen[j] = true;
            if j == target {
                self.assign(r, j);
                return true;
            }
            let other = self.row_of[j];
            if self.pins[other] != Pin::Free && self.pins[other] != Pin::Filler {
                continue;
            }
            if self.reroute(other, target, seen) {
                self.assign(r, j);
                return true;
            }
        }
        false
    }

    fn assign(&mut self, r: usize, j: usize) {
        self.col_of[r] = j;
        self.row_of[j] = r;
    }

    /// Tries to give row `i` column `j` (freeing `i`'s current column).
    fn try_move(&mut self, i: usize, j: usize) -> bool {
        let cur = self.col_of[i];
        if cur == j {
            return true;
        }
        let saved = (self.col_of.clone(), self.row_of.clone());
        let other = self.row_of[j];
        if self.pins[other] == Pin::Column(j) {
            return false;
        }
        let mut seen = vec![false; self.n];
        seen[j] = true;
        // `other` must land on `cur` eventually, closing the cycle
        self.pins[i] = Pin::Column(j);
        let ok = self.reroute(other, cur, &mut seen);
        self.pins[i] = Pin::Free;
        if ok {
            self.assign(i, j);
        } else {
            (self.col_of, self.row_of) = saved;
        }
        ok
    }
}

/// Minimum-cost maximum-cardinality matching of rows to columns.
///
/// `forbidden`, if given, is row-major with one flag per entry; forbidden
/// entries and non-finite costs are never matched.
pub fn hungarian_solve(cost: &Mat<f64>, forbidden: Option<&[bool]>) -> Matching {
    let (nr, nc) = cost.shape();
    if let Some(f) = forbidden {
        assert_eq!(f.len(), nr * nc, "forbidden mask size");
    }
    let allowed = |i: usize, j: usize| cost.get(i, j).is_finite() && !forbidden.is_some_and(|f| f[i * nc + j]);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..nr {
        for j in 0..nc {
            if allowed(i, j) {
                lo = lo.min(cost.get(i, j));
                hi = hi.max(cost.get(i, j));
            }
        }
    }
    if !lo.is_finite() {
        return Matching {
            pairs: Vec::new(),
            total_cost: 0.0,
        };
    }
    let n = nr.max(nc);
    let big = n as f64 * (hi - lo) + 1.0;
    let mut c = vec![big; n * n];
    let mut filler = vec![true; n * n];
    for i in 0..nr {
        for j in 0..nc {
            if allowed(i, j) {
                c[i * n + j] = cost.get(i, j) - lo;
                filler[i * n + j] = false;
            }
        }
    }
    let (col_of, u, v) = solve_square(&c, n);
    let optimum: f64 = (0..n).map(|i| c[i * n + col_of[i]]).sum();

    // Edges with zero reduced cost are exactly those usable by some optimum.
    let tol = 1e-9 * big.max(1.0);
    let tight: Vec<bool> = (0..n * n)
        .map(|k| c[k] - u[k / n] - v[k % n] <= tol)
        .collect();
    let mut row_of = vec![0; n];
    for (i, &j) in col_of.iter().enumerate() {
        row_of[j] = i;
    }
    let mut tb = TieBreak {
        n,
        tight: &tight,
        filler: &filler,
        pins: vec![Pin::Free; n],
        col_of: col_of.clone(),
        row_of,
    };
    for i in 0..nr {
        let mut pinned = false;
        for j in 0..nc {
            if !filler[i * n + j] && tight[i * n + j] && tb.try_move(i, j) {
                tb.pins[i] = Pin::Column(j);
                pinned = true;
                break;
            }
        }
        if !pinned {
            tb.pins[i] = Pin::Filler;
        }
    }
    let refined: f64 = (0..n).map(|i| c[i * n + tb.col_of[i]]).sum();
    // guard against tolerance admitting a non-optimal edge
    let final_cols = if refined <= optimum + tol * n as f64 {
        tb.col_of
    } else {
        col_of
    };

    let mut pairs = Vec::new();
    let mut total_cost = 0.0;
    for (i, &j) in final_cols.iter().enumerate().take(nr) {
        if j < nc && !filler[i * n + j] {
            pairs.push((i, j));
            total_cost += cost.get(i, j);
        }
    }
    Matching { pairs, total_cost }
}

/// Gated assignment: pairs with `S_ij <= threshold` are forbidden and the
/// remaining ones matched to maximize the total score.
pub fn associate(scores: &LinkMatrix, threshold: f64) -> AssignmentResult {
    let s = &scores.scores;
    let (n, m) = s.shape();
    let forbidden: Vec<bool> = s.data().iter().map(|&v| !(v > threshold)).collect();
    let cost = s.map(|v| -v);
    let matching = hungarian_solve(&cost, Some(&forbidden));
    let mut track_used = vec![false; n];
    let mut det_used = vec![false; m];
    let matches = matching
        .pairs
        .iter()
        .map(|&(i, j)| {
            track_used[i] = true;
            det_used[j] = true;
            (i, j, s.get(i, j))
        })
        .collect();
    AssignmentResult {
        matches,
        unmatched_tracks: (0..n).filter(|&i| !track_used[i]).collect(),
        unmatched_detections: (0..m).filter(|&j| !det_used[j]).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive search: every partial injection, ranked by cardinality, then
    /// total cost, then the lexicographic detection sequence.
    pub(crate) fn brute_force(cost: &Mat<f64>, forbidden: &[bool]) -> Matching {
        let (nr, nc) = cost.shape();
        let mut best: Option<(usize, f64, Vec<usize>)> = None;
        let mut cur = vec![usize::MAX; nr];
        let mut used = vec![false; nc];
        fn rec(
            i: usize,
            cost: &Mat<f64>,
            forbidden: &[bool],
            cur: &mut Vec<usize>,
            used: &mut Vec<bool>,
            best: &mut Option<(usize, f64, Vec<usize>)>,
        ) {
            let (nr, nc) = cost.shape();
            if i == nr {
                let card = cur.iter().filter(|&&j| j != usize::MAX).count();
                let total: f64 = (0..nr)
                    .filter(|&r| cur[r] != usize::MAX)
                    .map(|r| cost.get(r, cur[r]))
                    .sum();
                let better = match best {
                    None => true,
                    Some((bc, bt, bs)) => {
                        card > *bc || (card == *bc && (total < *bt || (total == *bt && *cur < *bs)))
                    }
                };
                if better {
                    *best = Some((card, total, cur.clone()));
                }
                return;
            }
            for j in 0..nc {
                if !used[j] && !forbidden[i * nc + j] {
                    used[j] = true;
                    cur[i] = j;
                    rec(i + 1, cost, forbidden, cur, used, best);
                    used[j] = false;
                }
            }
            cur[i] = usize::MAX;
            rec(i + 1, cost, forbidden, cur, used, best);
        }
        rec(0, cost, forbidden, &mut cur, &mut used, &mut best);
        let (_, total, seq) = best.unwrap();
        Matching {
            pairs: seq
                .iter()
                .enumerate()
                .filter(|(_, &j)| j != usize::MAX)
                .map(|(i, &j)| (i, j))
                .collect(),
            total_cost: if seq.iter().all(|&j| j == usize::MAX) { 0.0 } else { total },
        }
    }

    #[test]
    fn diagonal_optimum() {
        let c = Mat::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        let m = hungarian_solve(&c, None);
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(m.total_cost, 2.0);
    }

    #[test]
    fn degenerate_shapes() {
        assert!(hungarian_solve(&Mat::zeros(0, 4), None).pairs.is_empty());
        assert!(hungarian_solve(&Mat::zeros(3, 0), None).pairs.is_empty());
        let all = vec![true; 4];
        assert!(hungarian_solve(&Mat::zeros(2, 2), Some(&all)).pairs.is_empty());
    }

    #[test]
    fn cardinality_beats_cost() {
        // the cheap edge (0,0) would block row 1 entirely
        let c = Mat::from_rows(&[vec![0.0, 5.0], vec![1.0, 100.0]]);
        let f = [false, false, false, true];
        let m = hungarian_solve(&c, Some(&f));
        assert_eq!(m.pairs, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn ties_prefer_smallest_detection_sequence() {
        let c = Mat::filled(3, 3, 1.0);
        assert_eq!(hungarian_solve(&c, None).pairs, vec![(0, 0), (1, 1), (2, 2)]);
        let c = Mat::filled(2, 4, 0.0);
        assert_eq!(hungarian_solve(&c, None).pairs, vec![(0, 0), (1, 1)]);
        let c = Mat::filled(4, 2, 0.0);
        assert_eq!(hungarian_solve(&c, None).pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn associate_examples() {
        let s = LinkMatrix {
            scores: Mat::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]),
        };
        let r = associate(&s, 0.5);
        assert_eq!(r.matches, vec![(0, 0, 0.9), (1, 1, 0.8)]);
        assert!(r.unmatched_tracks.is_empty() && r.unmatched_detections.is_empty());

        let s = LinkMatrix {
            scores: Mat::from_rows(&[vec![0.4]]),
        };
        let r = associate(&s, 0.5);
        assert!(r.matches.is_empty());
        assert_eq!((r.unmatched_tracks, r.unmatched_detections), (vec![0], vec![0]));

        // gate is strict
        let s = LinkMatrix {
            scores: Mat::from_rows(&[vec![0.5]]),
        };
        assert!(associate(&s, 0.5).matches.is_empty());
    }

    #[test]
    fn matches_brute_force_on_integer_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..300 {
            let (nr, nc) = (rng.gen_range(0..6), rng.gen_range(0..6));
            let c = Mat::from_fn(nr, nc, |_, _| rng.gen_range(0..3) as f64);
            let f: Vec<bool> = (0..nr * nc).map(|_| rng.gen_bool(0.3)).collect();
            assert_eq!(hungarian_solve(&c, Some(&f)), brute_force(&c, &f), "{c:?} {f:?}");
        }
    }

    proptest! {
        #[test]
        fn matches_brute_force_on_reals(
            nr in 0usize..6, nc in 0usize..6, seed in any::<u64>(), p in 0.0f64..0.6,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = Mat::from_fn(nr, nc, |_, _| rng.gen_range(-5.0..5.0));
            let f: Vec<bool> = (0..nr * nc).map(|_| rng.gen_bool(p)).collect();
            let got = hungarian_solve(&c, Some(&f));
            let want = brute_force(&c, &f);
            prop_assert_eq!(got.pairs.len(), want.pairs.len());
            prop_assert_eq!(got.total_cost, want.total_cost);
        }

        #[test]
        fn raising_the_gate_never_adds_matches(seed in any::<u64>(), lo in 0.0f64..1.0, hi in 0.0f64..1.0) {
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = LinkMatrix { scores: Mat::from_fn(4, 5, |_, _| rng.gen_range(0.0..1.0)) };
            let a = associate(&s, lo);
            let b = associate(&s, hi);
            prop_assert!(b.matches.len() <= a.matches.len());
            for &(i, j, v) in &b.matches {
                prop_assert!(v > hi);
                prop_assert_eq!(v, s.scores.get(i, j));
            }
            prop_assert_eq!(b.matches.len() + b.unmatched_tracks.len(), 4);
            prop_assert_eq!(b.matches.len() + b.unmatched_detections.len(), 5);
        }

        #[test]
        fn ungated_positive_scores_match_fully(seed in any::<u64>(), n in 1usize..6, m in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = LinkMatrix { scores: Mat::from_fn(n, m, |_, _| rng.gen_range(0.01..1.0)) };
            prop_assert_eq!(associate(&s, 0.0).matches.len(), n.min(m));
        }
    }
}
