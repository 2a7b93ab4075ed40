//! Optimal full matching on a scalar score.
//!
//! A full matching is a partition of (a subset of) the units into sets with
//! exactly one treated or exactly one control unit. Its cost is the sum over
//! sets of the score distances between the single-side unit and every unit on
//! the other side. Such a partition is the same thing as an edge cover of the
//! treated-control bipartite graph in which every component is a star, so the
//! optimum is a minimum-cost degree-capped edge cover. That cover is found as
//! a minimum-cost flow in which every newly covered unit earns a large bonus,
//! which makes the solver cover as many units as possible first and minimise
//! distance second.
//!
//! Distances are computed on scores scaled by 1e9 and rounded, so optimal
//! costs are exact integers and can be compared bit-for-bit.

mod flow;

use std::collections::BTreeSet;

use crate::design::{balance_table, MatchedDataset, UnitRecord};
use crate::error::{Error, Result};
use flow::Network;

const SCALE: f64 = 1e9;

/// Largest instance accepted by [`brute_force_full_match`].
pub const BRUTE_FORCE_LIMIT: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct MatchSpec {
    /// Maximum |score difference| between a treated and a control unit in the
    /// same set. Units with no admissible partner are dropped.
    pub caliper: Option<f64>,
    pub max_set_size: usize,
}

impl Default for MatchSpec {
    fn default() -> Self {
        Self {
            caliper: None,
            max_set_size: 8,
        }
    }
}

impl MatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.max_set_size < 2 {
            return Err(Error::Config(format!("max_set_size must be >= 2, got {}", self.max_set_size)));
        }
        if let Some(c) = self.caliper {
            if !(c > 0.0) {
                return Err(Error::Config(format!("caliper must be > 0, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    /// Member indices of each set, ascending; sets ordered by first member.
    pub sets: Vec<Vec<usize>>,
    pub dropped: Vec<usize>,
    /// Sum of within-set distances on the original score scale.
    pub cost: f64,
    /// The same objective on the integer grid used for optimisation.
    pub cost_units: i64,
}

impl MatchOutcome {
    /// Materialises the matching as a dataset; set ids are `S1`, `S2`, ...
    pub fn to_dataset(&self, units: &[UnitRecord], covariate_names: Vec<String>) -> Result<MatchedDataset> {
        MatchedDataset::from_partition(units, &self.sets, covariate_names)
    }
}

fn scaled(e: &[f64]) -> Result<Vec<i64>> {
    e.iter()
        .map(|&v| {
            let q = (v * SCALE).round();
            if v.is_finite() && q.abs() < 1e15 {
                Ok(q as i64)
            } else {
                Err(Error::Domain(format!("score {v} is not finite or too large to match on")))
            }
        })
        .collect()
}

fn check_inputs(e: &[f64], z: &[bool], spec: &MatchSpec) -> Result<Vec<i64>> {
    spec.validate()?;
    if e.len() != z.len() {
        return Err(Error::Domain(format!("{} scores for {} treatment flags", e.len(), z.len())));
    }
    let q = scaled(e)?;
    if !z.iter().any(|&b| b) {
        return Err(Error::Infeasible("no treated units".into()));
    }
    if z.iter().all(|&b| b) {
        return Err(Error::Infeasible("no control units".into()));
    }
    Ok(q)
}

fn admissible(e: &[f64], caliper: Option<f64>, a: usize, b: usize) -> bool {
    caliper.is_none_or(|c| (e[a] - e[b]).abs() <= c)
}

/// Turns a cover into stars by deleting edges whose endpoints are both
/// covered elsewhere, then groups the stars into sets.
fn stars(n: usize, edges: &BTreeSet<(usize, usize)>, q: &[i64], e: &[f64]) -> MatchOutcome {
    let mut degree = vec![0usize; n];
    for &(a, b) in edges {
        degree[a] += 1;
        degree[b] += 1;
    }
    let mut kept = Vec::with_capacity(edges.len());
    for &(a, b) in edges {
        if degree[a] >= 2 && degree[b] >= 2 {
            degree[a] -= 1;
            degree[b] -= 1;
        } else {
            kept.push((a, b));
        }
    }
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let (mut cost, mut cost_units) = (0.0, 0i64);
    for &(a, b) in &kept {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        parent[ra.max(rb)] = ra.min(rb);
        cost += (e[a] - e[b]).abs();
        cost_units += (q[a] - q[b]).abs();
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut dropped = Vec::new();
    for u in 0..n {
        if degree[u] == 0 {
            dropped.push(u);
        } else {
            let r = find(&mut parent, u);
            groups[r].push(u);
        }
    }
    MatchOutcome {
        sets: groups.into_iter().filter(|g| !g.is_empty()).collect(),
        dropped,
        cost,
        cost_units,
    }
}

/// Optimal full matching of units with scores `e` and treatment flags `z`.
///
/// Maximises the number of matched units, then minimises total distance.
/// Without a caliper every unit must be matched, otherwise the problem is
/// reported infeasible. Ties are resolved deterministically.
pub fn full_match(e: &[f64], z: &[bool], spec: &MatchSpec) -> Result<MatchOutcome> {
    let q = check_inputs(e, z, spec)?;
    let n = e.len();
    let (lo, hi) = (q.iter().min().unwrap(), q.iter().max().unwrap());
    let bonus = (hi - lo)
        .checked_add(1)
        .and_then(|span| span.checked_mul(n as i64 + 1))
        .ok_or_else(|| Error::Domain("score range too wide to match on".into()))?;
    let extra = spec.max_set_size as i64 - 2;
    let (s, t) = (n, n + 1);
    let mut g = Network::new(n + 2);
    for u in 0..n {
        if z[u] {
            g.add_arc(s, u, 1, -bonus);
            if extra > 0 {
                g.add_arc(s, u, extra, 0);
            }
        } else {
            g.add_arc(u, t, 1, -bonus);
            if extra > 0 {
                g.add_arc(u, t, extra, 0);
            }
        }
    }

    let edges = match spec.caliper {
        None => {
            // Flow travels along the sorted score line; any route from a
            // treated to a control unit costs exactly their distance.
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by_key(|&u| (q[u], u));
            let inf = (n * spec.max_set_size) as i64;
            for w in order.windows(2) {
                let gap = q[w[1]] - q[w[0]];
                g.add_arc(w[0], w[1], inf, gap);
                g.add_arc(w[1], w[0], inf, gap);
            }
            g.min_cost_flow(s, t);
            decompose_line_flow(&mut g, z, s, t)
        }
        Some(_) => {
            for a in (0..n).filter(|&a| z[a]) {
                for b in (0..n).filter(|&b| !z[b] && admissible(e, spec.caliper, a, b)) {
                    g.add_arc(a, b, 1, (q[a] - q[b]).abs());
                }
            }
            g.min_cost_flow(s, t);
            let mut edges = BTreeSet::new();
            for a in (0..n).filter(|&a| z[a]) {
                for arc in &g.adj[a] {
                    if arc.to < n && arc.cap > 0 && arc.flow > 0 {
                        edges.insert((a, arc.to));
                    }
                }
            }
            edges
        }
    };

    let out = stars(n, &edges, &q, e);
    finish(out, spec)
}

fn finish(out: MatchOutcome, spec: &MatchSpec) -> Result<MatchOutcome> {
    if out.sets.is_empty() {
        return Err(Error::Infeasible("no treated-control pair satisfies the caliper".into()));
    }
    if spec.caliper.is_none() && !out.dropped.is_empty() {
        return Err(Error::Infeasible(format!(
            "{} unit(s) cannot be placed with max set size {} (first: unit {})",
            out.dropped.len(),
            spec.max_set_size,
            out.dropped[0]
        )));
    }
    Ok(out)
}

/// Splits an integral flow on the score line into treated-control pairs.
fn decompose_line_flow(g: &mut Network, z: &[bool], s: usize, t: usize) -> BTreeSet<(usize, usize)> {
    let n = z.len();
    let mut sink_flow = vec![0i64; n];
    for u in (0..n).filter(|&u| !z[u]) {
        sink_flow[u] = g.adj[u].iter().filter(|a| a.to == t && a.cap > 0).map(|a| a.flow).sum();
    }
    let mut edges = BTreeSet::new();
    for u in (0..n).filter(|&u| z[u]) {
        let mut out: i64 = g.adj[s].iter().filter(|a| a.to == u).map(|a| a.flow).sum();
        while out > 0 {
            let path = line_path(g, u, &sink_flow, n);
            let end = *path.last().expect("flow conservation guarantees a sink");
            for w in path.windows(2) {
                let arc = g.adj[w[0]]
                    .iter_mut()
                    .find(|a| a.to == w[1] && a.cap > 0 && a.flow > 0)
                    .expect("path follows positive flow");
                arc.flow -= 1;
            }
            sink_flow[end] -= 1;
            out -= 1;
            edges.insert((u, end));
        }
    }
    edges
}

/// Depth-first search over unit nodes along arcs with positive flow, stopping
/// at the first control unit that still sends flow to the sink.
fn line_path(g: &Network, from: usize, sink_flow: &[i64], n: usize) -> Vec<usize> {
    let mut seen = vec![false; n];
    let mut stack = vec![(from, 0usize)];
    seen[from] = true;
    while let Some(&(u, _)) = stack.last() {
        if sink_flow[u] > 0 {
            return stack.into_iter().map(|(v, _)| v).collect();
        }
        let next = {
            let top = stack.last_mut().unwrap();
            let arcs = &g.adj[u];
            let mut found = None;
            while top.1 < arcs.len() {
                let a = &arcs[top.1];
                top.1 += 1;
                if a.to < n && a.cap > 0 && a.flow > 0 && !seen[a.to] {
                    found = Some(a.to);
                    break;
                }
            }
            found
        };
        match next {
            Some(v) => {
                seen[v] = true;
                stack.push((v, 0));
            }
            None => {
                stack.pop();
            }
        }
    }
    Vec::new()
}

/// Cost of a candidate set, or `None` if it is not a valid matched set.
fn block_cost(block: &[usize], q: &[i64], e: &[f64], z: &[bool], spec: &MatchSpec) -> Option<i64> {
    let treated: Vec<usize> = block.iter().copied().filter(|&u| z[u]).collect();
    let control: Vec<usize> = block.iter().copied().filter(|&u| !z[u]).collect();
    if block.len() > spec.max_set_size || treated.is_empty() || control.is_empty() {
        return None;
    }
    let (center, others) = if treated.len() == 1 {
        (treated[0], control)
    } else if control.len() == 1 {
        (control[0], treated)
    } else {
        return None;
    };
    let mut cost = 0;
    for &o in &others {
        if !admissible(e, spec.caliper, center, o) {
            return None;
        }
        cost += (q[center] - q[o]).abs();
    }
    Some(cost)
}

/// Exhaustive search over all set partitions (singleton blocks mean a unit
/// is dropped). Minimises the number of dropped units, then the cost.
pub fn brute_force_full_match(e: &[f64], z: &[bool], spec: &MatchSpec) -> Result<MatchOutcome> {
    if e.len() > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge {
            size: e.len(),
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let q = check_inputs(e, z, spec)?;
    let n = e.len();
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    let mut best: Option<(usize, i64, Vec<Vec<usize>>)> = None;

    fn recurse(
        u: usize,
        n: usize,
        blocks: &mut Vec<Vec<usize>>,
        best: &mut Option<(usize, i64, Vec<Vec<usize>>)>,
        eval: &dyn Fn(&[Vec<usize>]) -> Option<(usize, i64)>,
    ) {
        if u == n {
            if let Some((d, c)) = eval(blocks) {
                if best.as_ref().is_none_or(|b| (d, c) < (b.0, b.1)) {
                    *best = Some((d, c, blocks.clone()));
                }
            }
            return;
        }
        for k in 0..blocks.len() {
            blocks[k].push(u);
            recurse(u + 1, n, blocks, best, eval);
            blocks[k].pop();
        }
        blocks.push(vec![u]);
        recurse(u + 1, n, blocks, best, eval);
        blocks.pop();
    }

    let eval = |bs: &[Vec<usize>]| -> Option<(usize, i64)> {
        let (mut dropped, mut cost) = (0, 0);
        for b in bs {
            if b.len() == 1 {
                dropped += 1;
            } else {
                cost += block_cost(b, &q, e, z, spec)?;
            }
        }
        Some((dropped, cost))
    };
    recurse(0, n, &mut blocks, &mut best, &eval);

    let (_, cost_units, partition) = best.expect("the all-singletons partition is always admissible");
    let mut sets: Vec<Vec<usize>> = partition.into_iter().filter(|b| b.len() > 1).collect();
    sets.sort();
    let mut dropped: Vec<usize> = Vec::new();
    let mut matched = vec![false; n];
    let mut cost = 0.0;
    for s in &sets {
        for &u in s {
            matched[u] = true;
        }
        let t: Vec<usize> = s.iter().copied().filter(|&u| z[u]).collect();
        let c: Vec<usize> = s.iter().copied().filter(|&u| !z[u]).collect();
        let (center, others) = if t.len() == 1 { (t[0], c) } else { (c[0], t) };
        cost += others.iter().map(|&o| (e[center] - e[o]).abs()).sum::<f64>();
    }
    dropped.extend((0..n).filter(|&u| !matched[u]));
    finish(
        MatchOutcome {
            sets,
            dropped,
            cost,
            cost_units,
        },
        spec,
    )
}

/// True iff every post-matching |SMD| is below `threshold`; degenerate
/// covariates fail the gate.
pub fn apply_balance_gate(ds: &MatchedDataset, pre_matching: Option<&[UnitRecord]>, threshold: f64) -> Result<bool> {
    let rows = balance_table(ds, pre_matching)?;
    Ok(rows.iter().all(|r| !r.degenerate && r.smd_post.abs() < threshold))
}
