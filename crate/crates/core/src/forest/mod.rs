//! Random forest classifier with out-of-bag evaluation and group
//! permutation importance.

mod tree;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use tree::{gini_impurity, Node, Tree};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::seeds::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub subsample_fraction: f64,
    pub subsample_with_replacement: bool,
    /// Defaults to `floor(sqrt(n_features))`.
    pub features_per_split: Option<usize>,
    pub min_impurity_decrease: f64,
    /// Fixed class weights; inverse in-bag class frequencies per tree if unset.
    pub class_weights: Option<BTreeMap<String, f64>>,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 300,
            subsample_fraction: 2.0 / 3.0,
            subsample_with_replacement: false,
            features_per_split: None,
            min_impurity_decrease: 0.002,
            class_weights: None,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self, n_features: usize) -> Result<usize> {
        if self.n_trees == 0 {
            return Err(Error::InvalidArgument("n_trees must be positive".into()));
        }
        if !(self.subsample_fraction > 0.0)
            || (!self.subsample_with_replacement && self.subsample_fraction > 1.0)
        {
            return Err(Error::InvalidArgument("subsample_fraction out of range".into()));
        }
        if !(self.min_impurity_decrease >= 0.0) {
            return Err(Error::InvalidArgument("min_impurity_decrease must be nonnegative".into()));
        }
        if let Some(w) = &self.class_weights {
            if w.values().any(|v| !(*v > 0.0)) {
                return Err(Error::InvalidArgument("class weights must be positive".into()));
            }
        }
        let f = self
            .features_per_split
            .unwrap_or_else(|| ((n_features as f64).sqrt().floor() as usize).max(1));
        if f == 0 || f > n_features {
            return Err(Error::InvalidArgument(format!(
                "features_per_split {f} outside 1..={n_features}"
            )));
        }
        Ok(f)
    }

    /// Expected fraction of trees for which a given case is out of bag.
    pub fn expected_oob_fraction(&self, n: usize) -> f64 {
        let k = (self.subsample_fraction * n as f64).round();
        if self.subsample_with_replacement {
            (1.0 - 1.0 / n as f64).powf(k)
        } else {
            1.0 - k / n as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedForest {
    pub classes: Vec<String>,
    pub n_features: usize,
    pub trees: Vec<Tree>,
    /// Per tree, sorted in-bag row indices with multiplicity.
    pub in_bag: Vec<Vec<usize>>,
    /// Weights used to break vote ties.
    pub vote_weights: Vec<f64>,
    /// Fewer than two classes in the training data.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OobReport {
    pub accuracy: f64,
    /// Row-normalized; rows are true classes.
    pub confusion: Vec<Vec<f64>>,
    pub evaluated: usize,
    /// Cases in bag for every tree.
    pub excluded: usize,
    pub mean_oob_trees: f64,
}

fn encode(labels: &[String]) -> (Vec<String>, Vec<usize>) {
    let mut classes: Vec<String> = labels.to_vec();
    classes.sort();
    classes.dedup();
    let y = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label present"))
        .collect();
    (classes, y)
}

fn inverse_frequency(counts: &[usize]) -> Vec<f64> {
    let n: usize = counts.iter().sum();
    let present = counts.iter().filter(|&&c| c > 0).count().max(1);
    counts
        .iter()
        .map(|&c| if c > 0 { n as f64 / (present * c) as f64 } else { 0.0 })
        .collect()
}

/// Trains on row-major `x` with one label per row.
pub fn train(x: &[Vec<f64>], labels: &[String], config: &ForestConfig) -> Result<TrainedForest> {
    let n = x.len();
    if n == 0 || labels.len() != n {
        return Err(Error::InvalidArgument("need one label per row and at least one row".into()));
    }
    let p = x[0].len();
    if p == 0 || x.iter().any(|r| r.len() != p || r.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidArgument("feature rows must be complete and of equal length".into()));
    }
    let features_per_split = config.validate(p)?;
    let (classes, y) = encode(labels);
    let k = classes.len();
    let mut counts = vec![0; k];
    for &c in &y {
        counts[c] += 1;
    }
    let fixed = match &config.class_weights {
        Some(w) => Some(
            classes
                .iter()
                .map(|c| {
                    w.get(c)
                        .copied()
                        .ok_or_else(|| Error::InvalidArgument(format!("no class weight for {c}")))
                })
                .collect::<Result<Vec<f64>>>()?,
        ),
        None => None,
    };
    let vote_weights = fixed.clone().unwrap_or_else(|| inverse_frequency(&counts));
    let degenerate = k < 2;
    if degenerate {
        log::warn!("training data has a single class; trees are single leaves");
    }
    let columns: Vec<Vec<f64>> = (0..p).map(|f| x.iter().map(|r| r[f]).collect()).collect();
    let m = ((config.subsample_fraction * n as f64).round() as usize).max(1);

    let grown: Vec<(Tree, Vec<usize>)> = (0..config.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_for(config.seed, "tree", &t.to_string());
            let mut bag: Vec<usize> = if config.subsample_with_replacement {
                (0..m).map(|_| rng.random_range(0..n)).collect()
            } else {
                sample(&mut rng, n, m.min(n)).into_vec()
            };
            bag.sort_unstable();
            let weights = match &fixed {
                Some(w) => w.clone(),
                None => {
                    let mut c = vec![0; k];
                    for &i in &bag {
                        c[y[i]] += 1;
                    }
                    inverse_frequency(&c)
                }
            };
            let params = tree::GrowParams {
                columns: &columns,
                y: &y,
                n_classes: k,
                class_weight: &weights,
                features_per_split,
                min_impurity_decrease: config.min_impurity_decrease,
            };
            let tree = if degenerate {
                Tree {
                    nodes: vec![Node::Leaf { scores: vec![1.0] }],
                }
            } else {
                Tree::grow(&params, bag.clone(), &mut rng)
            };
            (tree, bag)
        })
        .collect();
    let (trees, in_bag) = grown.into_iter().unzip();
    Ok(TrainedForest {
        classes,
        n_features: p,
        trees,
        in_bag,
        vote_weights,
        degenerate,
    })
}

pub fn train_matrix(features: &FeatureMatrix, config: &ForestConfig) -> Result<TrainedForest> {
    train(&features.values, &features.labels, config)
}

fn argmax_class(scores: &[f64]) -> usize {
    let mut best = 0;
    for (c, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = c;
        }
    }
    best
}

impl TrainedForest {
    /// Majority vote with ties broken toward the larger vote weight, then
    /// the lexicographically smaller class.
    fn vote(&self, votes: &[usize]) -> usize {
        let mut best = 0;
        for c in 1..votes.len() {
            let better = votes[c] > votes[best]
                || (votes[c] == votes[best] && self.vote_weights[c] > self.vote_weights[best]);
            if better {
                best = c;
            }
        }
        best
    }

    pub fn predict_row(&self, row: &[f64]) -> &str {
        let mut votes = vec![0; self.classes.len()];
        for t in &self.trees {
            votes[argmax_class(t.scores(|f| row[f]))] += 1;
        }
        &self.classes[self.vote(&votes)]
    }

    /// Out-of-bag evaluation. `value(i, f)` reads feature `f` of row `i`.
    fn oob_with(&self, n: usize, labels: &[String], value: impl Fn(usize, usize) -> f64 + Sync) -> Result<OobReport> {
        let k = self.classes.len();
        let truth: Vec<usize> = labels
            .iter()
            .map(|l| {
                self.classes
                    .binary_search(l)
                    .map_err(|_| Error::InvalidArgument(format!("label {l} unseen in training")))
            })
            .collect::<Result<_>>()?;
        let mut in_bag = vec![vec![false; n]; self.trees.len()];
        for (t, bag) in self.in_bag.iter().enumerate() {
            for &i in bag {
                if i < n {
                    in_bag[t][i] = true;
                }
            }
        }
        let per_row: Vec<Option<(usize, usize)>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut votes = vec![0; k];
                let mut count = 0;
                for (t, tree) in self.trees.iter().enumerate() {
                    if in_bag[t][i] {
                        continue;
                    }
                    count += 1;
                    votes[argmax_class(tree.scores(|f| value(i, f)))] += 1;
                }
                (count > 0).then(|| (self.vote(&votes), count))
            })
            .collect();
        let mut confusion = vec![vec![0.0; k]; k];
        let (mut correct, mut evaluated, mut trees_total) = (0usize, 0usize, 0usize);
        for (i, r) in per_row.iter().enumerate() {
            if let Some((pred, count)) = r {
                evaluated += 1;
                trees_total += count;
                confusion[truth[i]][*pred] += 1.0;
                if *pred == truth[i] {
                    correct += 1;
                }
            }
        }
        for row in confusion.iter_mut() {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        Ok(OobReport {
            accuracy: if evaluated > 0 { correct as f64 / evaluated as f64 } else { 0.0 },
            confusion,
            evaluated,
            excluded: n - evaluated,
            mean_oob_trees: if evaluated > 0 { trees_total as f64 / evaluated as f64 } else { 0.0 },
        })
    }

    /// OOB accuracy and confusion on the training rows.
    pub fn oob_evaluate(&self, x: &[Vec<f64>], labels: &[String]) -> Result<OobReport> {
        self.check_shape(x, labels)?;
        self.oob_with(x.len(), labels, |i, f| x[i][f])
    }

    fn check_shape(&self, x: &[Vec<f64>], labels: &[String]) -> Result<()> {
        if x.len() != labels.len() || x.iter().any(|r| r.len() != self.n_features) {
            return Err(Error::InvalidArgument("feature matrix does not match the forest".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("forest v1\n");
        let _ = writeln!(s, "classes {}", self.classes.join(" "));
        let _ = writeln!(s, "features {}", self.n_features);
        let _ = write!(s, "vote_weights");
        for w in &self.vote_weights {
            let _ = write!(s, " {w}");
        }
        let _ = writeln!(s, "\ndegenerate {}", self.degenerate);
        let _ = writeln!(s, "trees {}", self.trees.len());
        for (t, bag) in self.trees.iter().zip(&self.in_bag) {
            let _ = write!(s, "tree {}\ninbag", t.nodes.len());
            for i in bag {
                let _ = write!(s, " {i}");
            }
            s.push('\n');
            for n in &t.nodes {
                match n {
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        let _ = writeln!(s, "S {feature} {threshold} {left} {right}");
                    }
                    Node::Leaf { scores } => {
                        let _ = write!(s, "L");
                        for v in scores {
                            let _ = write!(s, " {v}");
                        }
                        s.push('\n');
                    }
                }
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::parse("<forest>", line, msg.to_string());
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| lines.next().ok_or_else(|| bad(0, &format!("missing {what}")));
        let (ln, head) = next("header")?;
        if head.trim() != "forest v1" {
            return Err(bad(ln, "unsupported forest format"));
        }
        fn rest<'a>(l: &'a str, key: &str) -> Option<&'a str> {
            l.strip_prefix(key).map(str::trim)
        }
        fn num<T: std::str::FromStr>(s: &str) -> Option<T> {
            s.parse().ok()
        }
        let (ln, l) = next("classes")?;
        let classes: Vec<String> = rest(l, "classes").ok_or_else(|| bad(ln, "classes"))?.split_whitespace().map(String::from).collect();
        let (ln, l) = next("features")?;
        let n_features = rest(l, "features").and_then(num).ok_or_else(|| bad(ln, "features"))?;
        let (ln, l) = next("vote weights")?;
        let vote_weights = rest(l, "vote_weights")
            .ok_or_else(|| bad(ln, "vote_weights"))?
            .split_whitespace()
            .map(|w| num(w).ok_or_else(|| bad(ln, "vote weight")))
            .collect::<Result<Vec<f64>>>()?;
        let (ln, l) = next("degenerate")?;
        let degenerate = rest(l, "degenerate").and_then(num).ok_or_else(|| bad(ln, "degenerate"))?;
        let (ln, l) = next("trees")?;
        let n_trees: usize = rest(l, "trees").and_then(num).ok_or_else(|| bad(ln, "trees"))?;
        let mut trees = Vec::with_capacity(n_trees);
        let mut in_bag = Vec::with_capacity(n_trees);
        for _ in 0..n_trees {
            let (ln, l) = next("tree")?;
            let n_nodes: usize = rest(l, "tree").and_then(num).ok_or_else(|| bad(ln, "tree"))?;
            let (ln, l) = next("inbag")?;
            let bag = rest(l, "inbag")
                .ok_or_else(|| bad(ln, "inbag"))?
                .split_whitespace()
                .map(|v| num(v).ok_or_else(|| bad(ln, "inbag index")))
                .collect::<Result<Vec<usize>>>()?;
            let mut nodes = Vec::with_capacity(n_nodes);
            for _ in 0..n_nodes {
                let (ln, l) = next("node")?;
                let f: Vec<&str> = l.split_whitespace().collect();
                let node = match f.first() {
                    Some(&"S") if f.len() == 5 => Node::Split {
                        feature: num(f[1]).ok_or_else(|| bad(ln, "feature"))?,
                        threshold: num(f[2]).ok_or_else(|| bad(ln, "threshold"))?,
                        left: num(f[3]).ok_or_else(|| bad(ln, "left"))?,
                        right: num(f[4]).ok_or_else(|| bad(ln, "right"))?,
                    },
                    Some(&"L") => Node::Leaf {
                        scores: f[1..]
                            .iter()
                            .map(|v| num(v).ok_or_else(|| bad(ln, "score")))
                            .collect::<Result<_>>()?,
                    },
                    _ => return Err(bad(ln, "bad node record")),
                };
                nodes.push(node);
            }
            trees.push(Tree { nodes });
            in_bag.push(bag);
        }
        Ok(Self {
            classes,
            n_features,
            trees,
            in_bag,
            vote_weights,
            degenerate,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImportanceConfig {
    /// Size of the pool of row permutations drawn per scramble; column `j`
    /// of a group uses permutation `j mod n_permutations`.
    pub n_permutations: usize,
    pub n_repeats: usize,
    pub seed: u64,
    /// Test hook: scramble with identity permutations.
    #[serde(skip)]
    pub identity: bool,
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        Self {
            n_permutations: 100,
            n_repeats: 100,
            seed: 0,
            identity: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupImportance {
    pub group: String,
    /// Mean OOB accuracy drop.
    pub importance: f64,
    pub std_dev: f64,
}

/// Mean OOB accuracy loss when the columns of each group are scrambled.
/// Sorted by decreasing importance.
pub fn group_importance(
    forest: &TrainedForest,
    x: &[Vec<f64>],
    labels: &[String],
    groups: &[(String, Vec<usize>)],
    config: &ImportanceConfig,
) -> Result<Vec<GroupImportance>> {
    forest.check_shape(x, labels)?;
    if config.n_permutations == 0 || config.n_repeats == 0 {
        return Err(Error::InvalidArgument("importance needs permutations and repeats".into()));
    }
    for (name, cols) in groups {
        if let Some(c) = cols.iter().find(|&&c| c >= forest.n_features) {
            return Err(Error::InvalidArgument(format!("group {name} references column {c}")));
        }
    }
    let n = x.len();
    let baseline = forest.oob_evaluate(x, labels)?.accuracy;
    let tasks: Vec<(usize, usize)> = (0..groups.len())
        .flat_map(|g| (0..config.n_repeats).map(move |r| (g, r)))
        .collect();
    let drops: Vec<Result<(usize, f64)>> = tasks
        .par_iter()
        .map(|&(g, r)| {
            let (name, cols) = &groups[g];
            let mut rng = rng_for(config.seed, name, &format!("repeat/{r}"));
            let pool: Vec<Vec<usize>> = (0..config.n_permutations.min(cols.len().max(1)))
                .map(|_| {
                    let mut p: Vec<usize> = (0..n).collect();
                    if !config.identity {
                        p.shuffle(&mut rng);
                    }
                    p
                })
                .collect();
            let mut perm_of: Vec<Option<&[usize]>> = vec![None; forest.n_features];
            for (j, &c) in cols.iter().enumerate() {
                perm_of[c] = Some(&pool[j % pool.len()]);
            }
            let acc = forest
                .oob_with(n, labels, |i, f| match perm_of[f] {
                    Some(p) => x[p[i]][f],
                    None => x[i][f],
                })?
                .accuracy;
            Ok((g, baseline - acc))
        })
        .collect();
    let mut per_group = vec![Vec::new(); groups.len()];
    for d in drops {
        let (g, v) = d?;
        per_group[g].push(v);
    }
    let mut out: Vec<GroupImportance> = groups
        .iter()
        .zip(per_group)
        .map(|((name, _), v)| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / v.len() as f64;
            GroupImportance {
                group: name.clone(),
                importance: mean,
                std_dev: var.sqrt(),
            }
        })
        .collect();
    out.sort_by(|a, b| b.importance.total_cmp(&a.importance).then_with(|| a.group.cmp(&b.group)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn separable(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<String>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let pos = i % 3 == 0;
            let mut row: Vec<f64> = (0..5).map(|_| rng.random()).collect();
            row[2] = if pos { 1.0 + rng.random::<f64>() } else { -rng.random::<f64>() };
            x.push(row);
            y.push(if pos { "pos" } else { "neg" }.to_string());
        }
        (x, y)
    }

    #[test]
    fn serialization_round_trip_and_determinism() {
        let (x, y) = separable(60, 1);
        let cfg = ForestConfig {
            n_trees: 8,
            seed: 3,
            ..Default::default()
        };
        let f = train(&x, &y, &cfg).unwrap();
        let g = train(&x, &y, &cfg).unwrap();
        assert_eq!(f.to_text(), g.to_text());
        assert_eq!(TrainedForest::from_text(&f.to_text()).unwrap(), f);
        assert!(f.in_bag.iter().all(|b| b.len() == 40));
    }

    #[test]
    fn oob_and_confusion() {
        let (x, y) = separable(90, 2);
        let f = train(&x, &y, &ForestConfig { n_trees: 50, ..Default::default() }).unwrap();
        let r = f.oob_evaluate(&x, &y).unwrap();
        assert!(r.accuracy >= 0.95, "{}", r.accuracy);
        for row in &r.confusion {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(f.predict_row(&[0.5, 0.5, 1.5, 0.5, 0.5]), "pos");
    }

    #[test]
    fn identity_permutation_has_zero_importance() {
        let (x, y) = separable(60, 4);
        let f = train(&x, &y, &ForestConfig { n_trees: 20, ..Default::default() }).unwrap();
        let groups = vec![("key".to_string(), vec![2]), ("noise".to_string(), vec![0, 1])];
        let cfg = ImportanceConfig {
            n_repeats: 3,
            identity: true,
            ..Default::default()
        };
        let imp = group_importance(&f, &x, &y, &groups, &cfg).unwrap();
        assert!(imp.iter().all(|g| g.importance == 0.0));
        let bad = vec![("x".to_string(), vec![9])];
        assert!(group_importance(&f, &x, &y, &bad, &cfg).is_err());
    }

    #[test]
    fn single_class_is_flagged() {
        let x = vec![vec![1.0], vec![2.0]];
        let y = vec!["a".to_string(), "a".to_string()];
        let f = train(&x, &y, &ForestConfig { n_trees: 2, ..Default::default() }).unwrap();
        assert!(f.degenerate);
        assert_eq!(f.predict_row(&[0.0]), "a");
    }
}
