//! Bipartite matching between predicted and ground-truth points and the
//! training loss built on the assignment.
//!
//! The solver is a rectangular Jonker-Volgenant shortest-augmenting-path
//! implementation. Ties are broken exactly: with the optimal duals in hand,
//! every optimal assignment lives in the zero-reduced-cost ("tight") graph,
//! so the lexicographically smallest pair list is recovered greedily with
//! matching-feasibility checks on that graph.

use ndarray::Array2;

use crate::decoder::{Anchor, DenseNodes, PredPoint};
use crate::error::{Error, Result};
use crate::tensor::{sigmoid_scalar, Elem, MatchPair, Tape, TensorRef};

/// Proposal-by-ground-truth matching costs. Entries are finite by
/// construction.
#[derive(Clone, Debug)]
pub struct CostMatrix {
    costs: Array2<f64>,
}

impl CostMatrix {
    pub fn new(costs: Array2<f64>) -> Result<Self> {
        if costs.nrows() == 0 || costs.ncols() == 0 {
            return Err(Error::invalid("cost matrix must be non-empty"));
        }
        if costs.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("cost matrix contains non-finite entries"));
        }
        Ok(CostMatrix { costs })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.costs.dim()
    }

    pub fn costs(&self) -> &Array2<f64> {
        &self.costs
    }
}

/// One-to-one assignment of size `min(P, N)`; pairs sorted by proposal
/// index.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    /// Weight of the regression term in the total loss.
    pub w_loc: f64,
    /// Weight of the Euclidean distance inside the matching cost.
    pub w_cost_loc: f64,
    /// Subtract proposal confidence from the matching cost. Disable for a
    /// pure-distance cost.
    pub use_score: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_loc: 2e-4,
            w_cost_loc: 0.05,
            use_score: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.w_loc < 0.0 || self.w_cost_loc < 0.0 {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// `cost[p][g] = w_cost_loc * |pred_p - gt_g| - score_p`.
pub fn build_cost(
    proposals: &[PredPoint],
    gts: &[(f64, f64)],
    w: &LossWeights,
) -> Result<CostMatrix> {
    if proposals.is_empty() || gts.is_empty() {
        return Err(Error::invalid(
            "matching requires at least one proposal and one ground-truth point",
        ));
    }
    w.validate()?;
    let mut costs = Array2::<f64>::zeros((proposals.len(), gts.len()));
    for (p, prop) in proposals.iter().enumerate() {
        for (g, gt) in gts.iter().enumerate() {
            let dist = ((prop.x - gt.0).powi(2) + (prop.y - gt.1).powi(2)).sqrt();
            let score_term = if w.use_score { prop.score } else { 0.0 };
            costs[(p, g)] = w.w_cost_loc * dist - score_term;
        }
    }
    CostMatrix::new(costs)
}

/// Minimum-total-cost one-to-one assignment without a tie-break policy:
/// whichever optimum the solver lands on, pairs sorted by proposal index.
/// Used where any optimal assignment is equally valid (the localization
/// metric), skipping the canonicalization cost on heavily tied inputs.
pub(crate) fn hungarian_any(costs: &CostMatrix) -> Result<Assignment> {
    let c = &costs.costs;
    let (p, n) = c.dim();
    let mut pairs: Vec<(usize, usize)> = if p <= n {
        let (col4row, _, _) = lapjv(c);
        col4row.into_iter().enumerate().collect()
    } else {
        let t = c.t().as_standard_layout().into_owned();
        let (col4row, _, _) = lapjv(&t);
        col4row
            .into_iter()
            .enumerate()
            .map(|(g, pi)| (pi, g))
            .collect()
    };
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(pi, g)| c[(pi, g)]).sum();
    Ok(Assignment { pairs, total_cost })
}

/// Minimum-total-cost one-to-one assignment; ties broken by the
/// lexicographically smallest pair list.
pub fn hungarian(costs: &CostMatrix) -> Result<Assignment> {
    let c = &costs.costs;
    let (p, n) = c.dim();
    let scale = c.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let tol = 1e-9 * (1.0 + scale);

    // Solve with rows = the smaller side; map duals back to the original
    // orientation. `row_dual[p] + col_dual[g] <= c[p][g]` with equality on
    // edges usable in an optimal assignment.
    let (row_dual, col_dual, mandatory_rows_from_dual) = if p <= n {
        let (_, u, v) = lapjv(c);
        (u, v, false)
    } else {
        let t = c.t().as_standard_layout().into_owned();
        let (_, u, v) = lapjv(&t);
        (v, u, true)
    };

    // Tight graph: edges with zero reduced cost under the optimal duals.
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); p];
    for pi in 0..p {
        for g in 0..n {
            if c[(pi, g)] - row_dual[pi] - col_dual[g] <= tol {
                adj[pi].push(g);
            }
        }
    }
    // A row (proposal) appears in every optimal assignment when its dual is
    // active; with P <= N all proposals are matched. Same for columns.
    let mandatory_row: Vec<bool> = (0..p)
        .map(|pi| {
            if mandatory_rows_from_dual {
                row_dual[pi] < -tol
            } else {
                true
            }
        })
        .collect();
    let mandatory_col: Vec<bool> = (0..n)
        .map(|g| if p > n { true } else { col_dual[g] < -tol })
        .collect();

    let m = p.min(n);
    let pairs = lex_smallest_matching(&adj, &mandatory_row, &mandatory_col, m, n);
    debug_assert_eq!(pairs.len(), m);
    let total_cost = pairs.iter().map(|&(pi, g)| c[(pi, g)]).sum();
    Ok(Assignment { pairs, total_cost })
}

/// Rectangular Jonker-Volgenant via successive shortest augmenting paths.
/// Requires `nr <= nc`; returns (assigned column per row, row duals, column
/// duals) with reduced costs `c - u - v >= 0` and zero on matched edges.
fn lapjv(cost: &Array2<f64>) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let (nr, nc) = cost.dim();
    assert!(nr <= nc);
    const UNSET: usize = usize::MAX;
    let mut u = vec![0.0f64; nr];
    let mut v = vec![0.0f64; nc];
    let mut col4row = vec![UNSET; nr];
    let mut row4col = vec![UNSET; nc];

    for cur_row in 0..nr {
        let mut shortest = vec![f64::INFINITY; nc];
        let mut path = vec![UNSET; nc];
        let mut sr = vec![false; nr];
        let mut sc = vec![false; nc];
        let mut remaining: Vec<usize> = (0..nc).collect();
        let mut min_val = 0.0f64;
        let mut i = cur_row;
        let mut sink = UNSET;
        while sink == UNSET {
            sr[i] = true;
            let mut lowest = f64::INFINITY;
            let mut index = UNSET;
            for (it, &j) in remaining.iter().enumerate() {
                let r = min_val + cost[(i, j)] - u[i] - v[j];
                if r < shortest[j] {
                    shortest[j] = r;
                    path[j] = i;
                }
                if shortest[j] < lowest
                    || (shortest[j] == lowest && row4col[j] == UNSET && index != UNSET)
                {
                    lowest = shortest[j];
                    index = it;
                }
                if index == UNSET {
                    lowest = shortest[j];
                    index = it;
                }
            }
            min_val = lowest;
            let j = remaining[index];
            if row4col[j] == UNSET {
                sink = j;
            } else {
                i = row4col[j];
            }
            sc[j] = true;
            remaining.swap_remove(index);
        }

        u[cur_row] += min_val;
        for ir in 0..nr {
            if sr[ir] && ir != cur_row {
                u[ir] += min_val - shortest[col4row[ir]];
            }
        }
        for (j, &in_sc) in sc.iter().enumerate() {
            if in_sc {
                v[j] -= min_val - shortest[j];
            }
        }

        let mut j = sink;
        loop {
            let ir = path[j];
            row4col[j] = ir;
            std::mem::swap(&mut col4row[ir], &mut j);
            if ir == cur_row {
                break;
            }
        }
    }
    (col4row, u, v)
}

/// Greedy lexicographic selection over the tight graph: process proposals in
/// ascending order, fixing the smallest ground-truth index that still allows
/// completing an optimal assignment (size `m`, covering all mandatory rows
/// and columns).
fn lex_smallest_matching(
    adj: &[Vec<usize>],
    mandatory_row: &[bool],
    mandatory_col: &[bool],
    m: usize,
    n_cols: usize,
) -> Vec<(usize, usize)> {
    let p = adj.len();
    let mut used_col = vec![false; n_cols];
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(m);

    // Fast path: exactly m tight edges means the optimum is unique.
    if adj.iter().map(|a| a.len()).sum::<usize>() == m {
        for (pi, cols) in adj.iter().enumerate() {
            for &g in cols {
                pairs.push((pi, g));
            }
        }
        pairs.sort_unstable();
        if pairs.len() == m
            && pairs
                .iter()
                .map(|&(_, g)| g)
                .collect::<std::collections::BTreeSet<_>>()
                .len()
                == m
        {
            return pairs;
        }
        pairs.clear();
    }

    for pi in 0..p {
        if pairs.len() == m {
            break;
        }
        let need_after = m - pairs.len() - 1;
        let mut chosen = None;
        for &g in &adj[pi] {
            if used_col[g] {
                continue;
            }
            used_col[g] = true;
            if completion_exists(
                adj,
                mandatory_row,
                mandatory_col,
                &used_col,
                pi + 1,
                need_after,
            ) {
                chosen = Some(g);
                break;
            }
            used_col[g] = false;
        }
        match chosen {
            Some(g) => pairs.push((pi, g)),
            None => {
                debug_assert!(
                    !mandatory_row[pi] || adj[pi].is_empty() || pairs.len() == m,
                    "mandatory proposal {pi} could not be matched"
                );
            }
        }
    }
    pairs
}

/// Does the tight graph restricted to rows `>= from_row` and unused columns
/// admit a matching of size `need` covering every mandatory row and every
/// mandatory unused column? Mendelsohn-Dulmage: separate coverage checks for
/// each side plus a size check are jointly sufficient.
fn completion_exists(
    adj: &[Vec<usize>],
    mandatory_row: &[bool],
    mandatory_col: &[bool],
    used_col: &[bool],
    from_row: usize,
    need: usize,
) -> bool {
    let p = adj.len();
    let rows: Vec<usize> = (from_row..p).filter(|&r| !adj[r].is_empty()).collect();

    // (a) all mandatory rows simultaneously matchable, extended to `need`.
    let mut matcher = Kuhn::new(adj, used_col);
    let mut size = 0usize;
    for &r in &rows {
        if mandatory_row[r] {
            if !matcher.augment(r) {
                return false;
            }
            size += 1;
        }
    }
    for &r in &rows {
        if size >= need {
            break;
        }
        if !mandatory_row[r] && matcher.augment(r) {
            size += 1;
        }
    }
    if size < need {
        return false;
    }

    // (b) all mandatory unused columns simultaneously matchable (transposed
    // orientation: augment from columns).
    let mut col_adj: Vec<Vec<usize>> = vec![Vec::new(); used_col.len()];
    for &r in &rows {
        for &g in &adj[r] {
            if !used_col[g] {
                col_adj[g].push(r);
            }
        }
    }
    let row_used = vec![false; p];
    let mut tmatcher = Kuhn::new(&col_adj, &row_used);
    for (g, &used) in used_col.iter().enumerate() {
        if !used && mandatory_col[g] && !col_adj[g].is_empty() {
            if !tmatcher.augment(g) {
                return false;
            }
        } else if !used && mandatory_col[g] && col_adj[g].is_empty() {
            return false;
        }
    }
    true
}

/// Kuhn's augmenting-path bipartite matcher over an adjacency list with a
/// blocked-column mask.
struct Kuhn<'a> {
    adj: &'a [Vec<usize>],
    blocked: &'a [bool],
    match_col: Vec<usize>,
}

impl<'a> Kuhn<'a> {
    fn new(adj: &'a [Vec<usize>], blocked: &'a [bool]) -> Self {
        Kuhn {
            adj,
            blocked,
            match_col: vec![usize::MAX; blocked.len()],
        }
    }

    fn augment(&mut self, row: usize) -> bool {
        let mut visited = vec![false; self.blocked.len()];
        self.try_row(row, &mut visited)
    }

    fn try_row(&mut self, row: usize, visited: &mut [bool]) -> bool {
        for &g in &self.adj[row] {
            if self.blocked[g] || visited[g] {
                continue;
            }
            visited[g] = true;
            if self.match_col[g] == usize::MAX || {
                let owner = self.match_col[g];
                self.try_row(owner, visited)
            } {
                self.match_col[g] = row;
                return true;
            }
        }
        false
    }
}

/// Per-step diagnostics emitted into the training log.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    pub matches: usize,
}

/// Match-and-score training loss over one scene.
///
/// Every grid cell contributes a proposal (no confidence thresholding during
/// training). Matched proposals are labeled 1 for the mean BCE term; the
/// regression term is the mean squared Euclidean distance over matched
/// pairs. `loss = cls + w_loc * reg`; empty scenes reduce to the
/// classification term with all labels zero.
pub fn compute_loss<F: Elem>(
    tape: &mut Tape<F>,
    dense: &DenseNodes,
    anchors: &[Anchor],
    gts: &[(f64, f64)],
    w: &LossWeights,
) -> Result<(TensorRef, LossBreakdown)> {
    w.validate()?;
    let off_shape = tape.value(dense.offsets).shape().to_vec();
    let (gh, gw) = (off_shape[1], off_shape[2]);
    if anchors.len() != gh * gw {
        return Err(Error::shape(format!(
            "anchor count {} does not match {gh}x{gw} grid",
            anchors.len()
        )));
    }

    let mut labels = ndarray::ArrayD::<F>::zeros(ndarray::IxDyn(&[1, gh, gw]));
    let mut match_pairs: Vec<MatchPair<F>> = Vec::new();
    if !gts.is_empty() {
        let offsets = tape.rc(dense.offsets);
        let logits = tape.rc(dense.logits);
        let off = offsets.as_slice().expect("offsets contiguous");
        let lg = logits.as_slice().expect("logits contiguous");
        let cells = gh * gw;
        let proposals: Vec<PredPoint> = (0..cells)
            .map(|k| PredPoint {
                x: anchors[k].x + off[k].to_f64(),
                y: anchors[k].y + off[cells + k].to_f64(),
                score: sigmoid_scalar(lg[k]).to_f64(),
            })
            .collect();
        let costs = build_cost(&proposals, gts, w)?;
        let assignment = hungarian(&costs)?;
        let labels_flat = labels.as_slice_mut().expect("labels contiguous");
        for &(pi, g) in &assignment.pairs {
            labels_flat[pi] = F::one();
            match_pairs.push(MatchPair {
                cell: pi,
                anchor: (F::from_f64(anchors[pi].x), F::from_f64(anchors[pi].y)),
                gt: (F::from_f64(gts[g].0), F::from_f64(gts[g].1)),
            });
        }
    }

    let matches = match_pairs.len();
    let cls = tape.bce_with_logits_mean(dense.logits, labels);
    let reg = tape.matched_sq_dist_mean(dense.offsets, match_pairs);
    let reg_w = tape.scale(reg, F::from_f64(w.w_loc));
    let loss = tape.add(cls, reg_w);
    let breakdown = LossBreakdown {
        total: Elem::to_f64(*tape.value(loss).first().unwrap()),
        cls: Elem::to_f64(*tape.value(cls).first().unwrap()),
        reg: Elem::to_f64(*tape.value(reg).first().unwrap()),
        matches,
    };
    Ok((loss, breakdown))
}
