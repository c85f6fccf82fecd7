//! Class-weighted binary decision trees with Gini splits.

use rand::seq::index::sample;
use rand::Rng;

/// `sum_i alpha_i (1 - alpha_i) / 2`; for two classes this is `alpha (1 - alpha)`.
pub fn gini_impurity(freqs: &[f64]) -> f64 {
    freqs.iter().map(|a| a * (1.0 - a)).sum::<f64>() / 2.0
}

fn gini_of_sums(sums: &[f64]) -> (f64, f64) {
    let total: f64 = sums.iter().sum();
    if total <= 0.0 {
        return (0.0, 0.0);
    }
    let g = sums.iter().map(|s| s / total).map(|a| a * (1.0 - a)).sum::<f64>() / 2.0;
    (g, total)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        scores: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

pub(super) struct GrowParams<'a> {
    /// Column-major feature values.
    pub columns: &'a [Vec<f64>],
    pub y: &'a [usize],
    pub n_classes: usize,
    pub class_weight: &'a [f64],
    pub features_per_split: usize,
    pub min_impurity_decrease: f64,
}

/// Best split of one node on one feature: `(decrease, threshold)`.
fn best_threshold(p: &GrowParams, feature: usize, samples: &[usize], parent: &[f64]) -> Option<(f64, f64)> {
    let col = &p.columns[feature];
    let mut order: Vec<usize> = samples.to_vec();
    order.sort_by(|&a, &b| col[a].total_cmp(&col[b]));
    let (g_parent, w_parent) = gini_of_sums(parent);
    let mut left = vec![0.0; p.n_classes];
    let mut best: Option<(f64, f64)> = None;
    for k in 0..order.len() - 1 {
        let s = order[k];
        left[p.y[s]] += p.class_weight[p.y[s]];
        let (v, next) = (col[s], col[order[k + 1]]);
        if v == next {
            continue;
        }
        let right: Vec<f64> = parent.iter().zip(&left).map(|(a, b)| a - b).collect();
        let (gl, wl) = gini_of_sums(&left);
        let (gr, wr) = gini_of_sums(&right);
        let decrease = g_parent - (wl * gl + wr * gr) / w_parent;
        if best.is_none_or(|(d, _)| decrease > d) {
            best = Some((decrease, 0.5 * (v + next)));
        }
    }
    best
}

impl Tree {
    pub(super) fn grow<R: Rng>(p: &GrowParams, samples: Vec<usize>, rng: &mut R) -> Tree {
        let mut tree = Tree { nodes: Vec::new() };
        tree.build(p, samples, rng);
        tree
    }

    fn build<R: Rng>(&mut self, p: &GrowParams, samples: Vec<usize>, rng: &mut R) -> usize {
        let mut sums = vec![0.0; p.n_classes];
        for &s in &samples {
            sums[p.y[s]] += p.class_weight[p.y[s]];
        }
        let id = self.nodes.len();
        let total: f64 = sums.iter().sum();
        let leaf = Node::Leaf {
            scores: sums.iter().map(|s| if total > 0.0 { s / total } else { 0.0 }).collect(),
        };
        self.nodes.push(leaf);
        let pure = sums.iter().filter(|&&s| s > 0.0).count() <= 1;
        if pure || samples.len() < 2 {
            return id;
        }

        let n_features = p.columns.len();
        let mut feats = sample(rng, n_features, p.features_per_split.min(n_features)).into_vec();
        feats.sort_unstable();
        let mut best: Option<(f64, usize, f64)> = None;
        for &f in &feats {
            if let Some((d, t)) = best_threshold(p, f, &samples, &sums) {
                if best.is_none_or(|(bd, _, _)| d > bd) {
                    best = Some((d, f, t));
                }
            }
        }
        let Some((decrease, feature, threshold)) = best else {
            return id;
        };
        if decrease < p.min_impurity_decrease {
            return id;
        }
        let col = &p.columns[feature];
        let (l, r): (Vec<usize>, Vec<usize>) = samples.iter().partition(|&&s| col[s] <= threshold);
        let left = self.build(p, l, rng);
        let right = self.build(p, r, rng);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }

    /// Leaf scores for one row, reading feature `f` through `value(f)`.
    pub fn scores(&self, value: impl Fn(usize) -> f64) -> &[f64] {
        let mut k = 0;
        loop {
            match &self.nodes[k] {
                Node::Leaf { scores } => return scores,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => k = if value(*feature) <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, k: usize) -> usize {
            match &t.nodes[k] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, *left).max(go(t, *right)),
            }
        }
        go(self, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gini_values() {
        assert_eq!(gini_impurity(&[1.0, 0.0]), 0.0);
        assert_eq!(gini_impurity(&[0.5, 0.5]), 0.25);
        assert!((gini_impurity(&[0.3, 0.7]) - 0.21).abs() < 1e-15);
    }

    #[test]
    fn separable_feature_gives_one_split() {
        use rand::SeedableRng;
        let columns = vec![vec![0.0, 1.0, 2.0, 3.0], vec![5.0, 5.0, 5.0, 5.0]];
        let y = vec![0, 0, 1, 1];
        let p = GrowParams {
            columns: &columns,
            y: &y,
            n_classes: 2,
            class_weight: &[1.0, 1.0],
            features_per_split: 2,
            min_impurity_decrease: 0.002,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let t = Tree::grow(&p, vec![0, 1, 2, 3], &mut rng);
        assert_eq!(t.depth(), 1);
        assert_eq!(
            t.nodes[0],
            Node::Split {
                feature: 0,
                threshold: 1.5,
                left: 1,
                right: 2
            }
        );
        assert_eq!(t.scores(|f| [2.5, 5.0][f]), &[0.0, 1.0]);
    }
}
