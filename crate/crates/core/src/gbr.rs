//! Gradient-boosted regression trees on squared loss.

use std::path::Path;

use log::warn;
use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbrConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_leaf: usize,
    /// Fraction of rows drawn (without replacement) for each stage.
    pub subsample: f64,
    pub seed: u64,
}

impl Default for GbrConfig {
    fn default() -> Self {
        Self { n_trees: 500, max_depth: 3, learning_rate: 0.1, min_leaf: 5, subsample: 1.0, seed: 0 }
    }
}

impl GbrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::arg(format!("learning rate {} outside (0,1]", self.learning_rate)));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::arg(format!("subsample {} outside (0,1]", self.subsample)));
        }
        if self.min_leaf == 0 {
            return Err(Error::arg("min_leaf must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf { value: f64 },
    /// Rows with `x[feature] <= threshold` go left.
    Split { feature: usize, threshold: f64, gain: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    /// Root at index 0.
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf(value: f64) -> Self {
        Self { nodes: vec![Node::Leaf { value }] }
    }

    pub fn eval(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value } => return *value,
                Node::Split { feature, threshold, left, right, .. } => {
                    i = if row[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn n_splits(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Split { .. })).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbrModel {
    pub format_version: u32,
    pub n_features: usize,
    pub init_value: f64,
    pub learning_rate: f64,
    pub config: GbrConfig,
    pub trees: Vec<Tree>,
}

/// Per-stage training diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct GbrTrace {
    /// Training MSE after each stage, starting with the constant model.
    pub stage_mse: Vec<f64>,
    pub train_predictions: Vec<f64>,
}

struct Candidate {
    feature: usize,
    threshold: f64,
    gain: f64,
}

/// Best split of the rows currently in `node` along one presorted feature.
fn best_split_on(
    x: &DMatrix<f64>,
    resid: &[f64],
    order: &[usize],
    node_of: &[usize],
    node: usize,
    feature: usize,
    total: (f64, usize),
    min_leaf: usize,
) -> Option<Candidate> {
    let (sum, n) = total;
    let parent = sum * sum / n as f64;
    let (mut sl, mut nl) = (0.0, 0usize);
    let mut prev: Option<f64> = None;
    let mut best: Option<Candidate> = None;
    for &i in order {
        if node_of[i] != node {
            continue;
        }
        let v = x[(i, feature)];
        if let Some(p) = prev {
            if v > p && nl >= min_leaf && n - nl >= min_leaf {
                let sr = sum - sl;
                let gain = sl * sl / nl as f64 + sr * sr / (n - nl) as f64 - parent;
                if best.as_ref().is_none_or(|b| gain > b.gain) {
                    best = Some(Candidate { feature, threshold: 0.5 * (p + v), gain });
                }
            }
        }
        sl += resid[i];
        nl += 1;
        prev = Some(v);
    }
    best
}

fn grow_tree(x: &DMatrix<f64>, resid: &[f64], rows: &[usize], orders: &[Vec<usize>], cfg: &GbrConfig) -> Tree {
    let n_all = x.nrows();
    // Rows outside the stage sample carry the sentinel id.
    let mut node_of = vec![usize::MAX; n_all];
    for &i in rows {
        node_of[i] = 0;
    }
    let mut nodes = vec![Node::Leaf { value: 0.0 }];
    let mut frontier = vec![(0usize, 0usize)];
    while let Some((id, depth)) = frontier.pop() {
        let (mut sum, mut n) = (0.0, 0usize);
        for &i in rows {
            if node_of[i] == id {
                sum += resid[i];
                n += 1;
            }
        }
        let mean = if n > 0 { sum / n as f64 } else { 0.0 };
        nodes[id] = Node::Leaf { value: mean };
        if depth >= cfg.max_depth || n < 2 * cfg.min_leaf {
            continue;
        }
        let best = (0..x.ncols())
            .into_par_iter()
            .filter_map(|j| best_split_on(x, resid, &orders[j], &node_of, id, j, (sum, n), cfg.min_leaf))
            .collect::<Vec<_>>()
            .into_iter()
            .fold(None::<Candidate>, |acc, c| match acc {
                // Features arrive in index order, so ties keep the lower index.
                Some(a) if a.gain >= c.gain => Some(a),
                _ => Some(c),
            });
        let Some(best) = best else { continue };
        if !(best.gain > 1e-12 * (sum * sum / n as f64).max(1e-300)) || !best.gain.is_finite() {
            continue;
        }
        let (left, right) = (nodes.len(), nodes.len() + 1);
        nodes.push(Node::Leaf { value: 0.0 });
        nodes.push(Node::Leaf { value: 0.0 });
        for &i in rows {
            if node_of[i] == id {
                node_of[i] = if x[(i, best.feature)] <= best.threshold { left } else { right };
            }
        }
        nodes[id] = Node::Split { feature: best.feature, threshold: best.threshold, gain: best.gain, left, right };
        frontier.push((right, depth + 1));
        frontier.push((left, depth + 1));
    }
    Tree { nodes }
}

fn mse(y: &[f64], f: &[f64]) -> f64 {
    y.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64
}

pub fn fit(x: &DMatrix<f64>, y: &[f64], cfg: &GbrConfig) -> Result<GbrModel> {
    fit_traced(x, y, cfg).map(|(m, _)| m)
}

/// Fits and also returns the per-stage training trace.
pub fn fit_traced(x: &DMatrix<f64>, y: &[f64], cfg: &GbrConfig) -> Result<(GbrModel, GbrTrace)> {
    cfg.validate()?;
    let (n, d) = x.shape();
    if y.len() != n {
        return Err(Error::arg(format!("{n} rows but {} targets", y.len())));
    }
    if n < 2 * cfg.min_leaf || n == 0 {
        return Err(Error::arg(format!("need at least {} rows, got {n}", 2 * cfg.min_leaf.max(1))));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::arg("non-finite value in training data"));
    }
    let init_value = y.iter().sum::<f64>() / n as f64;
    let orders: Vec<Vec<usize>> = (0..d)
        .map(|j| {
            let mut o: Vec<usize> = (0..n).collect();
            o.sort_by(|&a, &b| x[(a, j)].total_cmp(&x[(b, j)]));
            o
        })
        .collect();
    let mut f = vec![init_value; n];
    let mut stage_mse = vec![mse(y, &f)];
    let mut trees = Vec::with_capacity(cfg.n_trees);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let m = ((cfg.subsample * n as f64).round() as usize).clamp(1, n);
    for stage in 0..cfg.n_trees {
        let resid: Vec<f64> = y.iter().zip(&f).map(|(a, b)| a - b).collect();
        let rows: Vec<usize> = if m == n {
            (0..n).collect()
        } else {
            let mut r = sample(&mut rng, n, m).into_vec();
            r.sort_unstable();
            r
        };
        let tree = grow_tree(x, &resid, &rows, &orders, cfg);
        if tree.n_splits() == 0 && m == n {
            if stage == 0 && cfg.max_depth > 0 && y.iter().any(|v| *v != y[0]) {
                warn!("no admissible split; model reduces to the training mean");
            }
            break;
        }
        for (i, fi) in f.iter_mut().enumerate() {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            *fi += cfg.learning_rate * tree.eval(&row);
        }
        stage_mse.push(mse(y, &f));
        trees.push(tree);
    }
    let model = GbrModel {
        format_version: FORMAT_VERSION,
        n_features: d,
        init_value,
        learning_rate: cfg.learning_rate,
        config: cfg.clone(),
        trees,
    };
    Ok((model, GbrTrace { stage_mse, train_predictions: f }))
}

impl GbrModel {
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.n_features {
            return Err(Error::arg(format!("expected {} features, got {}", self.n_features, x.ncols())));
        }
        Ok((0..x.nrows())
            .map(|i| {
                let row: Vec<f64> = x.row(i).iter().copied().collect();
                let mut f = self.init_value;
                for t in &self.trees {
                    f += self.learning_rate * t.eval(&row);
                }
                f
            })
            .collect())
    }

    /// Split-gain importance per feature, normalized to sum to one.
    pub fn importance(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.n_features];
        for t in &self.trees {
            for node in &t.nodes {
                if let Node::Split { feature, gain, .. } = node {
                    s[*feature] += gain;
                }
            }
        }
        let total: f64 = s.iter().sum();
        if total > 0.0 {
            s.iter().map(|v| v / total).collect()
        } else {
            warn!("model has no splits; importance is uniform");
            vec![1.0 / self.n_features.max(1) as f64; self.n_features]
        }
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let m: Self = serde_json::from_reader(std::io::BufReader::new(f))?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Spec(format!("unsupported GBR archive version {}", m.format_version)));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_trees_predicts_mean() {
        let x = DMatrix::from_fn(10, 2, |i, j| (i * (j + 1)) as f64);
        let y: Vec<f64> = (0..10).map(|i| (i * i) as f64).collect();
        let m = fit(&x, &y, &GbrConfig { n_trees: 0, ..Default::default() }).unwrap();
        assert!(m.trees.is_empty());
        assert!(m.predict(&x).unwrap().iter().all(|&p| p == 28.5));
    }

    #[test]
    fn depth_zero_is_constant_mean() {
        let x = DMatrix::from_fn(10, 1, |i, _| i as f64);
        let y: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let m = fit(&x, &y, &GbrConfig { max_depth: 0, ..Default::default() }).unwrap();
        assert!(m.predict(&x).unwrap().iter().all(|&p| p == 4.5));
    }

    #[test]
    fn depth_one_hand_trace() {
        // One stump at rate 1: best split between 2 and 3.
        let x = DMatrix::from_column_slice(6, 1, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let y = [1.0, 1.0, 1.0, 4.0, 4.0, 4.0];
        let cfg = GbrConfig { n_trees: 1, max_depth: 1, learning_rate: 1.0, min_leaf: 1, ..Default::default() };
        let m = fit(&x, &y, &cfg).unwrap();
        match &m.trees[0].nodes[0] {
            Node::Split { feature, threshold, gain, .. } => {
                assert_eq!((*feature, *threshold), (0, 2.5));
                // Parent SSE 13.5, children 0.
                assert!((gain - 13.5).abs() < 1e-12);
            }
            n => panic!("expected split, got {n:?}"),
        }
        let p = m.predict(&DMatrix::from_column_slice(4, 1, &[-10.0, 2.5, 2.6, 10.0])).unwrap();
        assert_eq!(p, vec![1.0, 1.0, 4.0, 4.0]);
    }

    #[test]
    fn min_leaf_respected() {
        let x = DMatrix::from_column_slice(6, 1, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let y = [0.0, 10.0, 10.0, 10.0, 10.0, 10.0];
        let cfg = GbrConfig { n_trees: 1, max_depth: 1, learning_rate: 1.0, min_leaf: 2, ..Default::default() };
        let m = fit(&x, &y, &cfg).unwrap();
        match &m.trees[0].nodes[0] {
            Node::Split { threshold, .. } => assert_eq!(*threshold, 1.5),
            n => panic!("expected split, got {n:?}"),
        }
    }

    #[test]
    fn constant_inputs_degenerate() {
        let x = DMatrix::from_element(20, 2, 1.0);
        let y: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let m = fit(&x, &y, &GbrConfig::default()).unwrap();
        assert!(m.trees.is_empty());
        assert_eq!(m.importance(), vec![0.5, 0.5]);
    }

    #[test]
    fn too_few_rows() {
        let x = DMatrix::from_element(9, 1, 1.0);
        assert!(matches!(fit(&x, &[0.0; 9], &GbrConfig::default()), Err(Error::Argument(_))));
    }

    #[test]
    fn dimension_mismatch() {
        let x = DMatrix::from_fn(12, 2, |i, j| (i + j) as f64);
        let m = fit(&x, &[1.0; 12], &GbrConfig::default()).unwrap();
        assert!(m.predict(&DMatrix::zeros(1, 3)).is_err());
    }
}
