//! Gradient-boosted regression trees on the logistic loss.
//!
//! Each round fits a depth-limited tree to the first and second derivatives
//! of the loss (Newton boosting) with exact greedy split search over sorted
//! feature values. Among equal-gain splits the lowest feature index wins,
//! then the lowest threshold.

use super::PropensityModelSpec;
use crate::error::{Error, Result};
use crate::numeric::{expit, logit};

#[derive(Debug, Clone)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, row: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if row[feature] < threshold { left } else { right },
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct GbmModel {
    base_margin: f64,
    eta: f64,
    trees: Vec<Tree>,
}

impl GbmModel {
    pub fn n_rounds(&self) -> usize {
        self.trees.len()
    }

    /// Log-odds using the first `rounds` trees.
    pub fn margin_at(&self, row: &[f64], rounds: usize) -> f64 {
        self.base_margin
            + self.eta
                * self.trees[..rounds.min(self.trees.len())]
                    .iter()
                    .map(|t| t.predict(row))
                    .sum::<f64>()
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        expit(self.margin_at(row, self.trees.len()))
    }

    pub fn predict_all(&self, x: &[Vec<f64>]) -> Vec<f64> {
        x.iter().map(|r| self.predict(r)).collect()
    }
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    grad: &'a [f64],
    hess: &'a [f64],
    max_depth: usize,
    lambda: f64,
    min_child_weight: f64,
    nodes: Vec<Node>,
}

struct SplitChoice {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl Builder<'_> {
    fn leaf_value(&self, g: f64, h: f64) -> f64 {
        -g / (h + self.lambda)
    }

    fn score(&self, g: f64, h: f64) -> f64 {
        g * g / (h + self.lambda)
    }

    /// `sorted[f]` holds this node's rows ordered by feature `f`.
    fn build(&mut self, sorted: Vec<Vec<usize>>, depth: usize) -> usize {
        let rows = &sorted[0];
        let g: f64 = rows.iter().map(|&i| self.grad[i]).sum();
        let h: f64 = rows.iter().map(|&i| self.hess[i]).sum();
        let slot = self.nodes.len();
        self.nodes.push(Node::Leaf(self.leaf_value(g, h)));
        if depth >= self.max_depth || rows.len() < 2 {
            return slot;
        }
        let Some(best) = self.best_split(&sorted, g, h) else {
            return slot;
        };
        let goes_left = |i: usize| self.x[i][best.feature] < best.threshold;
        let (left, right): (Vec<Vec<usize>>, Vec<Vec<usize>>) = sorted
            .iter()
            .map(|list| list.iter().partition::<Vec<usize>, _>(|&&i| goes_left(i)))
            .unzip();
        let l = self.build(left, depth + 1);
        let r = self.build(right, depth + 1);
        self.nodes[slot] = Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left: l,
            right: r,
        };
        slot
    }

    fn best_split(&self, sorted: &[Vec<usize>], g: f64, h: f64) -> Option<SplitChoice> {
        let parent = self.score(g, h);
        let mut best: Option<SplitChoice> = None;
        for (f, order) in sorted.iter().enumerate() {
            let (mut gl, mut hl) = (0.0, 0.0);
            for w in 0..order.len() - 1 {
                let i = order[w];
                gl += self.grad[i];
                hl += self.hess[i];
                let (a, b) = (self.x[i][f], self.x[order[w + 1]][f]);
                if a == b {
                    continue;
                }
                let (gr, hr) = (g - gl, h - hl);
                if hl < self.min_child_weight || hr < self.min_child_weight {
                    continue;
                }
                let gain = 0.5 * (self.score(gl, hl) + self.score(gr, hr) - parent);
                if gain > 1e-12 && best.as_ref().is_none_or(|b| gain > b.gain) {
                    best = Some(SplitChoice {
                        feature: f,
                        threshold: 0.5 * (a + b),
                        gain,
                    });
                }
            }
        }
        best
    }
}

/// Boosted trees on row-major covariates `x` and binary labels `z`.
pub fn fit_gbm(x: &[Vec<f64>], z: &[bool], spec: &PropensityModelSpec) -> Result<GbmModel> {
    if spec.gbm_rounds == 0 || spec.gbm_depth == 0 {
        return Err(Error::Config("gbm rounds and depth must be at least 1".into()));
    }
    let n = x.len();
    if n != z.len() || n == 0 {
        return Err(Error::Domain(format!("{n} covariate rows for {} labels", z.len())));
    }
    let k = x[0].len();
    if k == 0 || x.iter().any(|r| r.len() != k || r.iter().any(|v| !v.is_finite())) {
        return Err(Error::Domain("covariates must be finite, rectangular and non-empty".into()));
    }
    let treated = z.iter().filter(|&&b| b).count();
    if treated == 0 || treated == n {
        return Err(Error::Domain("labels are all 0 or all 1".into()));
    }

    let base_margin = logit(treated as f64 / n as f64);
    let sorted: Vec<Vec<usize>> = (0..k)
        .map(|f| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
            idx
        })
        .collect();
    let mut margin = vec![base_margin; n];
    let mut trees = Vec::with_capacity(spec.gbm_rounds);
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    for _ in 0..spec.gbm_rounds {
        for i in 0..n {
            let p = expit(margin[i]);
            grad[i] = p - if z[i] { 1.0 } else { 0.0 };
            hess[i] = (p * (1.0 - p)).max(1e-16);
        }
        let mut b = Builder {
            x,
            grad: &grad,
            hess: &hess,
            max_depth: spec.gbm_depth,
            lambda: spec.gbm_lambda,
            min_child_weight: spec.gbm_min_child_weight,
            nodes: Vec::new(),
        };
        b.build(sorted.clone(), 0);
        let tree = Tree { nodes: b.nodes };
        for (m, row) in margin.iter_mut().zip(x) {
            *m += spec.gbm_eta * tree.predict(row);
        }
        trees.push(tree);
    }
    Ok(GbmModel {
        base_margin,
        eta: spec.gbm_eta,
        trees,
    })
}
