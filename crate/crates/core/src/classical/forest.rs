//! Random forest of CART trees with Gini impurity and bootstrap sampling.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_training_set, ClassicalError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
    /// Features tried per split; `None` means `round(sqrt(d))`.
    pub max_features: Option<usize>,
    pub bootstrap: bool,
}

impl Default for RfConfig {
    fn default() -> Self {
        RfConfig {
            n_trees: 100,
            max_depth: 16,
            min_samples_split: 2,
            max_features: None,
            bootstrap: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Leaf {
        distribution: Vec<f64>,
        samples: usize,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// Flat tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn leaf_distribution(&self, x: &[f64]) -> &[f64] {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                TreeNode::Leaf { distribution, .. } => return distribution,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], at: usize) -> usize {
            match &nodes[at] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => {
                    1 + walk(nodes, *left).max(walk(nodes, *right))
                }
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfModel {
    pub num_classes: usize,
    pub seed: u64,
    pub config: RfConfig,
    pub trees: Vec<Tree>,
    pub train_accuracy: f64,
    /// `None` when bootstrap is off or no sample was ever out of bag.
    pub oob_accuracy: Option<f64>,
}

struct Grower<'a> {
    x: &'a [&'a [f64]],
    y: &'a [usize],
    num_classes: usize,
    cfg: &'a RfConfig,
    mtry: usize,
    nodes: Vec<TreeNode>,
}

fn gini(counts: &[usize], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

impl Grower<'_> {
    fn leaf(&mut self, idx: &[usize]) -> usize {
        let mut distribution = vec![0.0; self.num_classes];
        for &i in idx {
            distribution[self.y[i]] += 1.0;
        }
        distribution
            .iter_mut()
            .for_each(|d| *d /= idx.len() as f64);
        self.nodes.push(TreeNode::Leaf {
            distribution,
            samples: idx.len(),
        });
        self.nodes.len() - 1
    }

    /// Best (weighted child impurity, threshold) for one feature.
    fn best_threshold(&self, idx: &[usize], feature: usize) -> Option<(f64, f64)> {
        let mut pairs: Vec<(f64, usize)> =
            idx.iter().map(|&i| (self.x[i][feature], self.y[i])).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let n = pairs.len();
        let mut right = vec![0usize; self.num_classes];
        for &(_, c) in &pairs {
            right[c] += 1;
        }
        let mut left = vec![0usize; self.num_classes];
        let mut best: Option<(f64, f64)> = None;
        for k in 0..n - 1 {
            let c = pairs[k].1;
            left[c] += 1;
            right[c] -= 1;
            if pairs[k].0 >= pairs[k + 1].0 {
                continue;
            }
            let nl = k + 1;
            let nr = n - nl;
            let score = (nl as f64 * gini(&left, nl) + nr as f64 * gini(&right, nr)) / n as f64;
            if best.is_none_or(|(s, _)| score < s) {
                let mut thr = 0.5 * (pairs[k].0 + pairs[k + 1].0);
                if thr >= pairs[k + 1].0 {
                    thr = pairs[k].0;
                }
                best = Some((score, thr));
            }
        }
        best
    }

    fn grow(&mut self, idx: &[usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let first = self.y[idx[0]];
        let pure = idx.iter().all(|&i| self.y[i] == first);
        if pure || depth >= self.cfg.max_depth || idx.len() < self.cfg.min_samples_split {
            return self.leaf(idx);
        }
        let dim = self.x[0].len();
        let tried = sample(rng, dim, self.mtry).into_vec();
        let mut best: Option<(f64, usize, f64)> = None;
        let consider = |grower: &Self, f: usize, best: &mut Option<(f64, usize, f64)>| {
            if let Some((score, thr)) = grower.best_threshold(idx, f) {
                if best.is_none_or(|(s, _, _)| score < s) {
                    *best = Some((score, f, thr));
                }
            }
        };
        for &f in &tried {
            consider(self, f, &mut best);
        }
        if best.is_none() {
            // every sampled feature was constant here; fall back to the rest
            for f in (0..dim).filter(|f| !tried.contains(f)) {
                consider(self, f, &mut best);
            }
        }
        let Some((_, feature, threshold)) = best else {
            return self.leaf(idx);
        };
        let (l, r): (Vec<usize>, Vec<usize>) =
            idx.iter().partition(|&&i| self.x[i][feature] <= threshold);
        let at = self.nodes.len();
        self.nodes.push(TreeNode::Split {
            feature,
            threshold,
            left: 0,
            right: 0,
        });
        let left = self.grow(&l, depth + 1, rng);
        let right = self.grow(&r, depth + 1, rng);
        self.nodes[at] = TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        };
        at
    }
}

/// Trains a forest; tree `t` draws from a generator seeded with `seed + t`.
pub fn rf_train(
    features: &[&[f64]],
    labels: &[usize],
    num_classes: usize,
    cfg: &RfConfig,
    seed: u64,
) -> Result<RfModel, ClassicalError> {
    check_training_set(features, labels, num_classes)?;
    if cfg.n_trees == 0 {
        return Err(ClassicalError::InvalidConfig("n_trees must be >= 1".into()));
    }
    let n = features.len();
    let dim = features[0].len();
    let mtry = cfg
        .max_features
        .unwrap_or_else(|| (dim as f64).sqrt().round() as usize)
        .clamp(1, dim);

    let mut trees = Vec::with_capacity(cfg.n_trees);
    let mut oob_votes = vec![vec![0.0; num_classes]; n];
    let mut oob_seen = vec![false; n];
    for t in 0..cfg.n_trees {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
        let idx: Vec<usize> = if cfg.bootstrap {
            (0..n).map(|_| rng.random_range(0..n)).collect()
        } else {
            (0..n).collect()
        };
        let mut grower = Grower {
            x: features,
            y: labels,
            num_classes,
            cfg,
            mtry,
            nodes: Vec::new(),
        };
        grower.grow(&idx, 0, &mut rng);
        let tree = Tree {
            nodes: grower.nodes,
        };
        if cfg.bootstrap {
            let mut in_bag = vec![false; n];
            idx.iter().for_each(|&i| in_bag[i] = true);
            for i in (0..n).filter(|&i| !in_bag[i]) {
                oob_seen[i] = true;
                for (v, p) in oob_votes[i].iter_mut().zip(tree.leaf_distribution(features[i])) {
                    *v += p;
                }
            }
        }
        trees.push(tree);
    }

    let mut model = RfModel {
        num_classes,
        seed,
        config: cfg.clone(),
        trees,
        train_accuracy: 0.0,
        oob_accuracy: None,
    };
    let correct = features
        .iter()
        .zip(labels)
        .filter(|(x, &y)| model.predict(x).0 == y)
        .count();
    model.train_accuracy = correct as f64 / n as f64;
    let oob: Vec<usize> = (0..n).filter(|&i| oob_seen[i]).collect();
    if !oob.is_empty() {
        let hits = oob
            .iter()
            .filter(|&&i| argmax_lowest(&oob_votes[i]) == labels[i])
            .count();
        model.oob_accuracy = Some(hits as f64 / oob.len() as f64);
    }
    Ok(model)
}

fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in v.iter().enumerate() {
        if p > v[best] {
            best = i;
        }
    }
    best
}

impl RfModel {
    /// Mean leaf distribution across trees; ties go to the lowest class.
    pub fn predict(&self, x: &[f64]) -> (usize, Vec<f64>) {
        let mut probs = vec![0.0; self.num_classes];
        for tree in &self.trees {
            for (p, d) in probs.iter_mut().zip(tree.leaf_distribution(x)) {
                *p += d;
            }
        }
        let k = self.trees.len() as f64;
        probs.iter_mut().for_each(|p| *p /= k);
        (argmax_lowest(&probs), probs)
    }
}
