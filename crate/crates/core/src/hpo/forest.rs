//! Regression random forest with across-tree predictive variance.

use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TREES: usize = 100;
const MIN_LEAF: usize = 2;
const MAX_DEPTH: usize = 12;
const VARIANCE_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone)]
enum TreeNode {
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
    nodes: Vec<TreeNode>,
}

impl Tree {
    fn predict(&self, v: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                TreeNode::Leaf(value) => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if v[*feature] <= *threshold { *left } else { *right },
            }
        }
    }
}

fn mean(idx: &[usize], y: &[f64]) -> f64 {
    idx.iter().map(|&i| y[i]).sum::<f64>() / idx.len() as f64
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    mtry: usize,
    nodes: Vec<TreeNode>,
}

impl Builder<'_> {
    fn grow(&mut self, idx: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let at = self.nodes.len();
        self.nodes.push(TreeNode::Leaf(mean(&idx, self.y)));
        if idx.len() < 2 * MIN_LEAF || depth >= MAX_DEPTH {
            return at;
        }
        let dim = self.x[0].len();
        let mut best: Option<(f64, usize, f64)> = None;
        // Features beyond the first `mtry` are only consulted while no
        // valid split has been found.
        for (tried, feature) in sample(rng, dim, dim).into_iter().enumerate() {
            if tried >= self.mtry && best.is_some() {
                break;
            }
            let mut order = idx.clone();
            order.sort_by(|&a, &b| self.x[a][feature].total_cmp(&self.x[b][feature]));
            let total: f64 = order.iter().map(|&i| self.y[i]).sum();
            let mut left_sum = 0.0;
            for k in 1..order.len() {
                left_sum += self.y[order[k - 1]];
                let (a, b) = (self.x[order[k - 1]][feature], self.x[order[k]][feature]);
                if k < MIN_LEAF || order.len() - k < MIN_LEAF || a == b {
                    continue;
                }
                let nl = k as f64;
                let nr = (order.len() - k) as f64;
                // Maximizing this is equivalent to minimizing the summed
                // squared error of the two children.
                let score = left_sum * left_sum / nl + (total - left_sum) * (total - left_sum) / nr;
                if best.is_none_or(|(s, _, _)| score > s) {
                    best = Some((score, feature, 0.5 * (a + b)));
                }
            }
        }
        let Some((_, feature, threshold)) = best else { return at };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.x[i][feature] <= threshold);
        let left = self.grow(l, depth + 1, rng);
        let right = self.grow(r, depth + 1, rng);
        self.nodes[at] = TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        };
        at
    }
}

#[derive(Debug, Clone)]
pub struct RandomForest {
    trees: Vec<Tree>,
}

impl RandomForest {
    /// Bootstrap-aggregated CART trees, each split choosing among a random
    /// third of the features (at least one).
    pub fn fit(x: &[Vec<f64>], y: &[f64], seed: u64) -> RandomForest {
        assert!(!x.is_empty() && x.len() == y.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = x.len();
        let mtry = (x[0].len() / 3).max(1);
        let trees = (0..TREES)
            .map(|_| {
                let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                let mut b = Builder {
                    x,
                    y,
                    mtry,
                    nodes: Vec::new(),
                };
                b.grow(idx, 0, &mut rng);
                Tree { nodes: b.nodes }
            })
            .collect();
        RandomForest { trees }
    }

    /// Mean and variance across trees.
    pub fn predict(&self, v: &[f64]) -> (f64, f64) {
        let preds: Vec<f64> = self.trees.iter().map(|t| t.predict(v)).collect();
        let m = preds.iter().sum::<f64>() / preds.len() as f64;
        let var = preds.iter().map(|p| (p - m) * (p - m)).sum::<f64>() / preds.len() as f64;
        (m, var.max(VARIANCE_FLOOR))
    }
}
