//! Token-to-expert routing.
//!
//! Training-time routing solves a balanced capacitated assignment: every
//! expert receives either `floor(T/E)` or `ceil(T/E)` tokens and the total
//! affinity of the chosen token-expert pairs is maximal. The solver is an
//! exact shortest-augmenting-path assignment (Jonker-Volgenant style) over
//! an expanded matrix in which each expert is replicated once per capacity
//! slot. Inference-time routing is plain per-token argmax with no capacity
//! constraint. A brute-force enumerator over all capacity-respecting
//! assignments serves as the test oracle.

use crate::{Error, Result};

/// Dense token-by-expert affinity scores, row major.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    num_tokens: usize,
    num_experts: usize,
    scores: Vec<f64>,
}

impl AffinityMatrix {
    pub fn new(num_tokens: usize, num_experts: usize, scores: Vec<f64>) -> Result<Self> {
        if num_tokens == 0 || num_experts == 0 {
            return Err(Error::Domain(
                "affinity matrix needs at least one token and one expert".into(),
            ));
        }
        if scores.len() != num_tokens * num_experts {
            return Err(Error::Data(format!(
                "affinity matrix shape mismatch: {}x{} vs {} scores",
                num_tokens,
                num_experts,
                scores.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Domain(
                "affinity scores must be finite (no NaN or infinity)".into(),
            ));
        }
        Ok(AffinityMatrix {
            num_tokens,
            num_experts,
            scores,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let num_tokens = rows.len();
        let num_experts = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != num_experts) {
            return Err(Error::Data("ragged affinity matrix".into()));
        }
        let scores = rows.iter().flatten().copied().collect();
        AffinityMatrix::new(num_tokens, num_experts, scores)
    }

    pub fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    #[inline]
    pub fn score(&self, token: usize, expert: usize) -> f64 {
        self.scores[token * self.num_experts + expert]
    }

    fn row(&self, token: usize) -> &[f64] {
        &self.scores[token * self.num_experts..(token + 1) * self.num_experts]
    }
}

/// A token-to-expert map together with the per-expert token counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub expert_of: Vec<usize>,
    pub loads: Vec<usize>,
}

impl Assignment {
    fn from_expert_of(expert_of: Vec<usize>, num_experts: usize) -> Result<Self> {
        let loads = load_histogram(&expert_of, num_experts)?;
        Ok(Assignment { expert_of, loads })
    }

    /// Total affinity of the assigned pairs, summed in token order.
    pub fn total_score(&self, a: &AffinityMatrix) -> f64 {
        self.expert_of
            .iter()
            .enumerate()
            .map(|(t, &e)| a.score(t, e))
            .sum()
    }
}

/// Capacity of each expert for `num_tokens` tokens: the first
/// `num_tokens % num_experts` experts take `ceil(T/E)`, the rest `floor(T/E)`.
pub fn capacities(num_tokens: usize, num_experts: usize) -> Vec<usize> {
    let base = num_tokens / num_experts;
    let extra = num_tokens % num_experts;
    (0..num_experts)
        .map(|j| if j < extra { base + 1 } else { base })
        .collect()
}

/// Exact balanced assignment maximizing total affinity subject to the
/// capacities above. Ties between equal-score optima resolve toward the
/// lexicographically smallest `expert_of` vector.
pub fn balanced_assign(a: &AffinityMatrix) -> Assignment {
    let t = a.num_tokens;
    let caps = capacities(t, a.num_experts);

    // Expanded square problem: one column per capacity slot, slots ordered
    // by expert index so index ties favor low experts.
    let mut col_expert = Vec::with_capacity(t);
    for (j, &c) in caps.iter().enumerate() {
        col_expert.extend(std::iter::repeat(j).take(c));
    }
    debug_assert_eq!(col_expert.len(), t);

    let cost = |row: usize, col: usize| -a.score(row, col_expert[col]);
    let row_of_col = solve_min_assignment(t, &cost);

    let mut expert_of = vec![usize::MAX; t];
    for (col, &row) in row_of_col.iter().enumerate() {
        expert_of[row] = col_expert[col];
    }
    lexicographic_refine(a, &mut expert_of);
    Assignment::from_expert_of(expert_of, a.num_experts).expect("solver produced valid experts")
}

/// Jonker-Volgenant shortest augmenting path solver for the square
/// min-cost assignment problem. Returns `row_of_col`. Scans columns in
/// increasing index order and only switches on strict improvement, so
/// the result is deterministic and, on all-equal inputs, matches the
/// identity matching.
fn solve_min_assignment(n: usize, cost: &dyn Fn(usize, usize) -> f64) -> Vec<usize> {
    const UNSET: usize = usize::MAX;
    // 1-indexed with a virtual column 0, after the classic formulation.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![UNSET; n + 1]; // p[j]: row matched to column j
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
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
            if p[j0] == UNSET {
                break;
            }
        }
        // Augment along the recorded path.
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    (1..=n).map(|j| p[j] - 1).collect()
}

/// Pairwise tie refinement: swap two tokens' experts whenever the swap
/// keeps the pair's combined score bitwise identical and makes `expert_of`
/// lexicographically smaller. Random real-valued scores never tie, so this
/// pass is inert outside structured inputs (equal rows, zero gates).
fn lexicographic_refine(a: &AffinityMatrix, expert_of: &mut [usize]) {
    let t = expert_of.len();
    loop {
        let mut swapped = false;
        for t1 in 0..t {
            for t2 in (t1 + 1)..t {
                let (e1, e2) = (expert_of[t1], expert_of[t2]);
                if e2 < e1 && a.score(t1, e2) + a.score(t2, e1) == a.score(t1, e1) + a.score(t2, e2)
                {
                    expert_of[t1] = e2;
                    expert_of[t2] = e1;
                    swapped = true;
                }
            }
        }
        if !swapped {
            break;
        }
    }
}

/// Unconstrained per-token argmax routing; ties go to the lowest expert
/// index. This is the inference-time rule and also the "preferred expert"
/// view used by the usage instrumentation.
pub fn greedy_assign(a: &AffinityMatrix) -> Assignment {
    let expert_of = (0..a.num_tokens)
        .map(|t| {
            let row = a.row(t);
            let mut best = 0usize;
            for (j, &s) in row.iter().enumerate().skip(1) {
                if s > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    Assignment::from_expert_of(expert_of, a.num_experts).expect("argmax in range")
}

/// Maximum instance size accepted by [`brute_force_assign`].
pub const BRUTE_FORCE_MAX_TOKENS: usize = 10;

/// Enumerates every capacity-respecting assignment and returns a maximizer,
/// breaking score ties toward the lexicographically smallest `expert_of`.
/// Guarded to small instances; this is the oracle the exact solver is
/// checked against.
pub fn brute_force_assign(a: &AffinityMatrix) -> Result<Assignment> {
    if a.num_tokens > BRUTE_FORCE_MAX_TOKENS {
        return Err(Error::Capacity(format!(
            "brute force limited to {BRUTE_FORCE_MAX_TOKENS} tokens, got {}",
            a.num_tokens
        )));
    }
    let mut remaining = capacities(a.num_tokens, a.num_experts);
    let mut current = vec![0usize; a.num_tokens];
    let mut best: Option<(f64, Vec<usize>)> = None;

    fn recurse(
        a: &AffinityMatrix,
        token: usize,
        score: f64,
        remaining: &mut [usize],
        current: &mut [usize],
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        if token == a.num_tokens() {
            // Enumeration emits expert_of vectors in lexicographic order,
            // so strict improvement keeps the lexicographically smallest
            // maximizer.
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                *best = Some((score, current.to_vec()));
            }
            return;
        }
        for j in 0..a.num_experts() {
            if remaining[j] == 0 {
                continue;
            }
            remaining[j] -= 1;
            current[token] = j;
            recurse(a, token + 1, score + a.score(token, j), remaining, current, best);
            remaining[j] += 1;
        }
    }

    recurse(a, 0, 0.0, &mut remaining, &mut current, &mut best);
    let (_, expert_of) = best.expect("at least one feasible assignment exists");
    Assignment::from_expert_of(expert_of, a.num_experts)
}

/// Per-expert token counts for an expert map.
pub fn load_histogram(expert_of: &[usize], num_experts: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; num_experts];
    for &e in expert_of {
        if e >= num_experts {
            return Err(Error::Data(format!(
                "expert index {e} out of range for {num_experts} experts"
            )));
        }
        counts[e] += 1;
    }
    Ok(counts)
}
