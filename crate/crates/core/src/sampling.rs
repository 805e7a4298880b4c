//! Observation regimes and identifiability checkers.
//!
//! Three ways of observing the radio-map tensor are supported: coupled slabs
//! (two moving sensors), systematic fiber groups (static sensor clusters),
//! and random fiber masks (scattered sensors). Each regime comes with an
//! executable sufficient-condition checker; a failed check never proves
//! non-identifiability.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// Disclaimer attached to every report: the conditions are sufficient only.
pub const SUFFICIENT_ONLY: &str =
    "conditions are sufficient, not necessary; a failed check does not prove non-identifiability";

/// Index sets for the two-sensor slab regime: sensor 1 observes rows `s1`
/// over bands `s3`, sensor 2 observes columns `s2` over bands `s4`.
/// All indices are zero-based.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlabPlan {
    pub s1: Vec<usize>,
    pub s2: Vec<usize>,
    pub s3: Vec<usize>,
    pub s4: Vec<usize>,
}

fn validate_index_set(sel: &[usize], bound: usize, name: &str) -> Result<()> {
    if sel.is_empty() {
        return Err(Error::Validation(format!("{name} is empty")));
    }
    if sel.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Validation(format!("{name} must be strictly increasing (sorted, unique)")));
    }
    if *sel.last().unwrap() >= bound {
        return Err(Error::Validation(format!(
            "{name} contains index {} out of range (size {bound})",
            sel.last().unwrap()
        )));
    }
    Ok(())
}

fn sorted_intersection(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let (mut p, mut q) = (0, 0);
    while p < a.len() && q < b.len() {
        match a[p].cmp(&b[q]) {
            std::cmp::Ordering::Less => p += 1,
            std::cmp::Ordering::Greater => q += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[p]);
                p += 1;
                q += 1;
            }
        }
    }
    out
}

fn union_size(sets: impl Iterator<Item = Vec<usize>>, bound: usize) -> usize {
    let mut seen = vec![false; bound];
    for set in sets {
        for idx in set {
            if idx < bound {
                seen[idx] = true;
            }
        }
    }
    seen.iter().filter(|&&b| b).count()
}

impl SlabPlan {
    pub fn validate(&self, dims: (usize, usize, usize)) -> Result<()> {
        validate_index_set(&self.s1, dims.0, "s1")?;
        validate_index_set(&self.s2, dims.1, "s2")?;
        validate_index_set(&self.s3, dims.2, "s3")?;
        validate_index_set(&self.s4, dims.2, "s4")?;
        Ok(())
    }

    /// Whether `s3 ∪ s4 = [K]`; full-spectrum recovery claims require this.
    pub fn covers_all_bands(&self, k: usize) -> bool {
        union_size([self.s3.clone(), self.s4.clone()].into_iter(), k) == k
    }

    pub fn band_intersection(&self) -> Vec<usize> {
        sorted_intersection(&self.s3, &self.s4)
    }

    /// Equispaced rows/columns with both sensors covering every band.
    pub fn equispaced(dims: (usize, usize, usize), m: usize, n: usize) -> Result<Self> {
        let (ni, nj, nk) = dims;
        if m == 0 || m > ni || n == 0 || n > nj {
            return Err(Error::Usage(format!("cannot place {m} rows / {n} columns in {ni}×{nj}")));
        }
        let spread = |count: usize, size: usize| -> Vec<usize> {
            (0..count).map(|t| t * size / count + size / (2 * count)).collect()
        };
        let plan = SlabPlan {
            s1: spread(m, ni),
            s2: spread(n, nj),
            s3: (0..nk).collect(),
            s4: (0..nk).collect(),
        };
        plan.validate(dims)?;
        Ok(plan)
    }
}

/// One static-sensor group: the Cartesian grid `I^(d) × J^(d)` observed over
/// bands `K^(d)`. Zero-based.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupIndexSet {
    #[serde(rename = "I")]
    pub i: Vec<usize>,
    #[serde(rename = "J")]
    pub j: Vec<usize>,
    #[serde(rename = "K")]
    pub k: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiberGroupPlan {
    pub groups: Vec<GroupIndexSet>,
}

impl FiberGroupPlan {
    pub fn validate(&self, dims: (usize, usize, usize)) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::Validation("fiber-group plan has no groups".into()));
        }
        for (d, g) in self.groups.iter().enumerate() {
            validate_index_set(&g.i, dims.0, &format!("group {d} I-set"))?;
            validate_index_set(&g.j, dims.1, &format!("group {d} J-set"))?;
            validate_index_set(&g.k, dims.2, &format!("group {d} K-set"))?;
        }
        Ok(())
    }
}

/// Nonnegative weight tensor; zero marks an unobserved cell. Weight √P on a
/// cell observed by P overlapping groups makes the squared-weight loss equal
/// the per-group sum of losses.
#[derive(Debug, Clone)]
pub struct FiberMask {
    weights: Tensor3,
    observed_count: usize,
}

impl FiberMask {
    pub fn new(weights: Tensor3) -> Result<Self> {
        weights.check_finite()?;
        if weights.data().iter().any(|&w| w < 0.0) {
            return Err(Error::Validation("mask weights must be nonnegative".into()));
        }
        let observed_count = weights.data().iter().filter(|&&w| w > 0.0).count();
        Ok(Self { weights, observed_count })
    }

    pub fn all_ones(dims: (usize, usize, usize)) -> Self {
        let weights =
            Tensor3::new(dims, vec![1.0; dims.0 * dims.1 * dims.2]).expect("constant tensor");
        Self { observed_count: dims.0 * dims.1 * dims.2, weights }
    }

    pub fn weights(&self) -> &Tensor3 {
        &self.weights
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.weights.dims()
    }

    pub fn observed_count(&self) -> usize {
        self.observed_count
    }

    #[inline]
    pub fn weight(&self, i: usize, j: usize, k: usize) -> f64 {
        self.weights.get(i, j, k)
    }

    /// Observed cells as `(i, j, k, weight²)`, in storage order.
    pub fn observed_entries(&self) -> Vec<(usize, usize, usize, f64)> {
        let (ni, nj, _) = self.dims();
        self.weights
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(idx, &w)| {
                let i = idx % ni;
                let j = (idx / ni) % nj;
                let k = idx / (ni * nj);
                (i, j, k, w * w)
            })
            .collect()
    }
}

/// Extracts the two slab subtensors `X(s1, :, s3)` and `X(:, s2, s4)`.
pub fn slab_subtensors(x: &Tensor3, plan: &SlabPlan) -> Result<(Tensor3, Tensor3)> {
    plan.validate(x.dims())?;
    let all_j: Vec<usize> = (0..x.dims().1).collect();
    let all_i: Vec<usize> = (0..x.dims().0).collect();
    let x1 = x.subtensor(&plan.s1, &all_j, &plan.s3)?;
    let x2 = x.subtensor(&all_i, &plan.s2, &plan.s4)?;
    Ok((x1, x2))
}

/// Extracts one subtensor per sensor group.
pub fn group_subtensors(x: &Tensor3, plan: &FiberGroupPlan) -> Result<Vec<Tensor3>> {
    plan.validate(x.dims())?;
    plan.groups.iter().map(|g| x.subtensor(&g.i, &g.j, &g.k)).collect()
}

/// Embeds the two slab subtensors back into a full-size observation tensor
/// with a √count weight mask (cells seen by both sensors get weight √2 and
/// the average of the two readings).
pub fn slab_observations(
    x1: &Tensor3,
    x2: &Tensor3,
    plan: &SlabPlan,
    dims: (usize, usize, usize),
) -> Result<(Tensor3, FiberMask)> {
    plan.validate(dims)?;
    if x1.dims() != (plan.s1.len(), dims.1, plan.s3.len())
        || x2.dims() != (dims.0, plan.s2.len(), plan.s4.len())
    {
        return Err(Error::Dim("subtensor dims inconsistent with plan".into()));
    }
    let mut sums = Tensor3::zeros(dims);
    let mut counts = Tensor3::zeros(dims);
    for (t, &k) in plan.s3.iter().enumerate() {
        for j in 0..dims.1 {
            for (m, &i) in plan.s1.iter().enumerate() {
                let flat = sums.index(i, j, k);
                sums.data_mut()[flat] += x1.get(m, j, t);
                counts.data_mut()[flat] += 1.0;
            }
        }
    }
    for (t, &k) in plan.s4.iter().enumerate() {
        for (n, &j) in plan.s2.iter().enumerate() {
            for i in 0..dims.0 {
                let flat = sums.index(i, j, k);
                sums.data_mut()[flat] += x2.get(i, n, t);
                counts.data_mut()[flat] += 1.0;
            }
        }
    }
    let mut y = Tensor3::zeros(dims);
    for (flat, &n) in counts.data().iter().enumerate() {
        if n > 0.0 {
            y.data_mut()[flat] = sums.data()[flat] / n;
        }
    }
    let mut weights = counts;
    for v in weights.data_mut() {
        *v = v.sqrt();
    }
    Ok((y, FiberMask::new(weights)?))
}

/// Converts a fiber-group plan to a weight tensor with `W(i,j,k) = √P` where
/// P is the number of groups observing the cell.
pub fn plan_to_mask(plan: &FiberGroupPlan, dims: (usize, usize, usize)) -> Result<FiberMask> {
    plan.validate(dims)?;
    let mut counts = Tensor3::zeros(dims);
    for g in &plan.groups {
        for &k in &g.k {
            for &j in &g.j {
                for &i in &g.i {
                    let v = counts.get(i, j, k);
                    counts.set(i, j, k, v + 1.0);
                }
            }
        }
    }
    for v in counts.data_mut() {
        *v = v.sqrt();
    }
    FiberMask::new(counts)
}

/// Binary mask observing exactly `q` of the I entries of every column
/// `X(:, j, k)`, chosen uniformly without replacement.
pub fn random_fiber_mask(
    dims: (usize, usize, usize),
    q: usize,
    rng: &mut impl Rng,
) -> Result<FiberMask> {
    let (ni, nj, nk) = dims;
    if q == 0 || q > ni {
        return Err(Error::Usage(format!("per-column sample count q={q} out of range 1..={ni}")));
    }
    let mut weights = Tensor3::zeros(dims);
    for k in 0..nk {
        for j in 0..nj {
            for idx in rand::seq::index::sample(rng, ni, q) {
                weights.set(idx, j, k, 1.0);
            }
        }
    }
    FiberMask::new(weights)
}

/// One evaluated hypothesis clause of a checker.
#[derive(Debug, Clone, Serialize)]
pub struct Clause {
    pub condition: String,
    pub lhs: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl Clause {
    fn geq(condition: impl Into<String>, lhs: f64, threshold: f64) -> Self {
        Self { condition: condition.into(), lhs, threshold, pass: lhs >= threshold }
    }

    fn gt(condition: impl Into<String>, lhs: f64, threshold: f64) -> Self {
        Self { condition: condition.into(), lhs, threshold, pass: lhs > threshold }
    }
}

/// Outcome of an identifiability check: the conjunction of all clauses, plus
/// a witness ordering when the hypothesis asks for one.
#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub satisfied: bool,
    pub clauses: Vec<Clause>,
    pub witness: Option<Vec<usize>>,
    pub disclaimer: &'static str,
}

impl CheckReport {
    fn from_clauses(clauses: Vec<Clause>, witness: Option<Vec<usize>>) -> Self {
        Self {
            satisfied: clauses.iter().all(|c| c.pass),
            clauses,
            witness,
            disclaimer: SUFFICIENT_ONLY,
        }
    }
}

fn branch_term(rows: usize, cols: usize, l: usize, r: usize) -> usize {
    ((rows / l).min(r)) + ((cols / l).min(r))
}

/// Checker for the coupled two-slab regime.
///
/// Clauses: `|s3 ∩ s4| ≥ R` and at least one of
/// `(M ≥ 2L ∧ J ≥ LR ∧ min(⌊M/L⌋,R)+min(⌊J/L⌋,R) ≥ R+2)` or the symmetric
/// condition with N and I.
pub fn check_slab_identifiability(
    plan: &SlabPlan,
    dims: (usize, usize, usize),
    l: usize,
    r: usize,
) -> Result<CheckReport> {
    if l == 0 || r == 0 {
        return Err(Error::Usage("L and R must be positive".into()));
    }
    plan.validate(dims)?;
    let (ni, nj, _) = dims;
    let (m, n) = (plan.s1.len(), plan.s2.len());
    let inter = plan.band_intersection().len();

    let branch1 = m >= 2 * l && nj >= l * r && branch_term(m, nj, l, r) >= r + 2;
    let branch2 = n >= 2 * l && ni >= l * r && branch_term(n, ni, l, r) >= r + 2;
    let detail = format!(
        "row branch (M={m} ≥ {}, J={nj} ≥ {}, {} ≥ {}): {}; column branch (N={n} ≥ {}, I={ni} ≥ {}, {} ≥ {}): {}",
        2 * l,
        l * r,
        branch_term(m, nj, l, r),
        r + 2,
        if branch1 { "pass" } else { "fail" },
        2 * l,
        l * r,
        branch_term(n, ni, l, r),
        r + 2,
        if branch2 { "pass" } else { "fail" },
    );

    let clauses = vec![
        Clause::geq(format!("|s3 ∩ s4| ≥ R={r}"), inter as f64, r as f64),
        Clause::geq(format!("at least one slab branch holds [{detail}]"), (branch1 as u8 + branch2 as u8) as f64, 1.0),
    ];
    Ok(CheckReport::from_clauses(clauses, None))
}

fn group_pair_compat(a: &GroupIndexSet, b: &GroupIndexSet, l: usize, need_band_overlap: bool) -> bool {
    let spatial = sorted_intersection(&a.i, &b.i)
        .len()
        .max(sorted_intersection(&a.j, &b.j).len());
    let bands = sorted_intersection(&a.k, &b.k).len();
    spatial >= l && (!need_band_overlap || bands >= 2)
}

/// Searches for an ordering of the groups in which every consecutive pair is
/// compatible (a Hamiltonian path in the compatibility graph). Exhaustive
/// permutation search for D ≤ 8, bitmask dynamic programming beyond.
fn find_ordering(compat: &[Vec<bool>]) -> Option<Vec<usize>> {
    let d = compat.len();
    if d == 1 {
        return Some(vec![0]);
    }
    if d <= 8 {
        let mut perm: Vec<usize> = (0..d).collect();
        return permute_search(&mut perm, 0, compat).then_some(perm);
    }
    // DP over subsets: reach[mask][last] with parent pointers.
    let full = 1usize << d;
    let mut parent = vec![vec![usize::MAX; d]; full];
    let mut reach = vec![vec![false; d]; full];
    for v in 0..d {
        reach[1 << v][v] = true;
    }
    for mask in 1..full {
        for last in 0..d {
            if !reach[mask][last] {
                continue;
            }
            if mask == full - 1 {
                let mut path = vec![last];
                let (mut m, mut v) = (mask, last);
                while parent[m][v] != usize::MAX {
                    let p = parent[m][v];
                    m &= !(1 << v);
                    v = p;
                    path.push(v);
                }
                path.reverse();
                return Some(path);
            }
            for next in 0..d {
                if mask & (1 << next) == 0 && compat[last][next] {
                    let nm = mask | (1 << next);
                    if !reach[nm][next] {
                        reach[nm][next] = true;
                        parent[nm][next] = last;
                    }
                }
            }
        }
    }
    None
}

fn permute_search(perm: &mut Vec<usize>, at: usize, compat: &[Vec<bool>]) -> bool {
    let d = perm.len();
    if at == d {
        return perm.windows(2).all(|w| compat[w[0]][w[1]]);
    }
    for pick in at..d {
        perm.swap(at, pick);
        if (at == 0 || compat[perm[at - 1]][perm[at]]) && permute_search(perm, at + 1, compat) {
            return true;
        }
        perm.swap(at, pick);
    }
    false
}

/// Checker for the all-groups-identifiable fiber regime.
///
/// Clauses: the three index-set unions cover the full cube, per-group size
/// and rank conditions, and the existence of an ordering with spatial overlap
/// ≥ L and band overlap ≥ 2 between consecutive groups.
pub fn check_group_identifiability(
    plan: &FiberGroupPlan,
    dims: (usize, usize, usize),
    l: usize,
    r: usize,
) -> Result<CheckReport> {
    if l == 0 || r == 0 {
        return Err(Error::Usage("L and R must be positive".into()));
    }
    plan.validate(dims)?;
    let (ni, nj, nk) = dims;
    let g = &plan.groups;
    let mut clauses = vec![
        Clause::geq("∪ I(d) = [I]", union_size(g.iter().map(|s| s.i.clone()), ni) as f64, ni as f64),
        Clause::geq("∪ J(d) = [J]", union_size(g.iter().map(|s| s.j.clone()), nj) as f64, nj as f64),
        Clause::geq("∪ K(d) = [K]", union_size(g.iter().map(|s| s.k.clone()), nk) as f64, nk as f64),
        Clause::geq("min_d |I(d)| ≥ L", g.iter().map(|s| s.i.len()).min().unwrap() as f64, l as f64),
        Clause::geq("min_d |J(d)| ≥ L", g.iter().map(|s| s.j.len()).min().unwrap() as f64, l as f64),
        Clause::geq("min_d |K(d)| ≥ R", g.iter().map(|s| s.k.len()).min().unwrap() as f64, r as f64),
        Clause::geq(
            "min_d [min(⌊|I(d)|/L⌋,R) + min(⌊|J(d)|/L⌋,R)] ≥ R+2",
            g.iter().map(|s| branch_term(s.i.len(), s.j.len(), l, r)).min().unwrap() as f64,
            (r + 2) as f64,
        ),
    ];

    let compat: Vec<Vec<bool>> = g
        .iter()
        .map(|a| g.iter().map(|b| group_pair_compat(a, b, l, true)).collect())
        .collect();
    let witness = find_ordering(&compat);
    clauses.push(Clause::geq(
        "ordering exists with max(|I∩|,|J∩|) ≥ L and |K∩| ≥ 2 between consecutive groups",
        witness.is_some() as u8 as f64,
        1.0,
    ));
    Ok(CheckReport::from_clauses(clauses, witness))
}

/// Checker for the anchored fiber regime: one group must observe every band
/// and be identifiable on its own; the rest only need spatial overlap ≥ L
/// along an ordering.
pub fn check_anchor_identifiability(
    plan: &FiberGroupPlan,
    dims: (usize, usize, usize),
    l: usize,
    r: usize,
) -> Result<CheckReport> {
    if l == 0 || r == 0 {
        return Err(Error::Usage("L and R must be positive".into()));
    }
    plan.validate(dims)?;
    let (ni, nj, nk) = dims;
    let g = &plan.groups;
    let anchor = g
        .iter()
        .enumerate()
        .filter(|(_, s)| s.k.len() == nk)
        .max_by_key(|(_, s)| branch_term(s.i.len(), s.j.len(), l, r));
    let anchor_rank = anchor.map_or(0, |(_, s)| branch_term(s.i.len(), s.j.len(), l, r));

    let mut clauses = vec![
        Clause::geq("∪ I(d) = [I]", union_size(g.iter().map(|s| s.i.clone()), ni) as f64, ni as f64),
        Clause::geq("∪ J(d) = [J]", union_size(g.iter().map(|s| s.j.clone()), nj) as f64, nj as f64),
        Clause::geq("min_d |I(d)| ≥ L", g.iter().map(|s| s.i.len()).min().unwrap() as f64, l as f64),
        Clause::geq("min_d |J(d)| ≥ L", g.iter().map(|s| s.j.len()).min().unwrap() as f64, l as f64),
        Clause::geq("some group observes all K bands", anchor.is_some() as u8 as f64, 1.0),
        Clause::geq("K ≥ R", nk as f64, r as f64),
        Clause::geq(
            "anchor group: min(⌊|I(d0)|/L⌋,R) + min(⌊|J(d0)|/L⌋,R) ≥ R+2",
            anchor_rank as f64,
            (r + 2) as f64,
        ),
    ];

    let compat: Vec<Vec<bool>> = g
        .iter()
        .map(|a| g.iter().map(|b| group_pair_compat(a, b, l, false)).collect())
        .collect();
    let witness = find_ordering(&compat);
    clauses.push(Clause::geq(
        "ordering exists with max(|I∩|,|J∩|) ≥ L between consecutive groups",
        witness.is_some() as u8 as f64,
        1.0,
    ));
    Ok(CheckReport::from_clauses(clauses, witness))
}

/// Checker for the random-fiber regime with `q` observed entries per column
/// of every frontal slab. Logarithm is natural.
pub fn check_random_fiber(
    dims: (usize, usize, usize),
    l: usize,
    r: usize,
    q: usize,
    epsilon: f64,
) -> Result<CheckReport> {
    if l == 0 || r == 0 {
        return Err(Error::Usage("L and R must be positive".into()));
    }
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::Usage(format!("epsilon must lie in (0, 1], got {epsilon}")));
    }
    let (ni, nj, _) = dims;
    if q > ni {
        return Err(Error::Usage(format!("q={q} exceeds column length I={ni}")));
    }
    let lr = (l * r) as f64;
    let (fi, fj) = (ni as f64, nj as f64);
    let q_min = (12.0 * (fi / epsilon + 1.0).ln()).max(2.0 * lr);
    let clauses = vec![
        Clause::geq("I ≤ J", fj, fi),
        Clause::geq("LR ≤ I/6", fi / 6.0, lr),
        Clause::gt("J > (LR+1)(I−LR)", fj, (lr + 1.0) * (fi - lr)),
        Clause::geq("q ≥ max{12·ln(I/ε + 1), 2LR}", q as f64, q_min),
    ];
    Ok(CheckReport::from_clauses(clauses, None))
}
