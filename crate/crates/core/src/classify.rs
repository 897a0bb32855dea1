//! Linear classification: an L1-hinge linear SVM trained by dual coordinate
//! descent, a one-vs-rest multiclass wrapper, majority voting across model
//! ensembles, and modal aggregation of per-instance decisions.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::persist::{self, PersistError};

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("feature length {got} does not match expected {want}")]
    DimensionMismatch { want: usize, got: usize },
    #[error("label {label} out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("binary labels must be +1 or -1, got {0}")]
    BadBinaryLabel(f64),
    #[error("no classes to train on")]
    NoClasses,
    #[error("cost must be positive, got {0}")]
    BadCost(f64),
    #[error(transparent)]
    Persist(#[from] PersistError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Solver settings for the dual coordinate descent trainer.
#[derive(Debug, Clone)]
pub struct SvmConfig {
    /// Hinge-loss cost. The dual variables live in `[0, cost]`.
    pub cost: f64,
    /// Hard cap on passes over the data.
    pub max_epochs: usize,
    /// Absolute duality-gap threshold for convergence.
    pub tol: f64,
    /// Value of the constant feature that realizes the bias term.
    pub bias_scale: f64,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            cost: 1.0,
            max_epochs: 1000,
            tol: 1e-6,
            bias_scale: 1.0,
            seed: 0,
        }
    }
}

/// A trained linear decision function `w . x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearModel {
    pub fn score(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.weights.len());
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Trains a binary L1-hinge linear SVM by dual coordinate descent.
///
/// The bias is realized as an augmented constant feature, each dual variable
/// is clipped to `[0, cost]`, samples are visited in a freshly seeded random
/// permutation every epoch, and the absolute primal-dual gap is tested every
/// ten epochs against `tol`. Labels must be +1 or -1.
pub fn train_binary(
    xs: &[Vec<f64>],
    ys: &[f64],
    cfg: &SvmConfig,
) -> Result<LinearModel, ClassifyError> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(ClassifyError::EmptyTrainingSet);
    }
    if !(cfg.cost > 0.0) {
        return Err(ClassifyError::BadCost(cfg.cost));
    }
    let dim = xs[0].len();
    for x in xs {
        if x.len() != dim {
            return Err(ClassifyError::DimensionMismatch { want: dim, got: x.len() });
        }
    }
    for &y in ys {
        if y != 1.0 && y != -1.0 {
            return Err(ClassifyError::BadBinaryLabel(y));
        }
    }

    let n = xs.len();
    let aug = dim + 1;
    // Diagonal of the Gram matrix over augmented features.
    let q: Vec<f64> = xs
        .iter()
        .map(|x| dot(x, x) + cfg.bias_scale * cfg.bias_scale)
        .collect();
    let mut w = vec![0.0; aug];
    let mut alpha = vec![0.0; n];
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let margin = |w: &[f64], x: &[f64]| dot(&w[..dim], x) + w[dim] * cfg.bias_scale;

    for epoch in 0..cfg.max_epochs {
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        for &i in &order {
            let g = ys[i] * margin(&w, &xs[i]) - 1.0;
            let pg = if alpha[i] == 0.0 {
                g.min(0.0)
            } else if alpha[i] == cfg.cost {
                g.max(0.0)
            } else {
                g
            };
            if pg.abs() > 1e-14 && q[i] > 0.0 {
                let old = alpha[i];
                alpha[i] = (old - g / q[i]).clamp(0.0, cfg.cost);
                let delta = (alpha[i] - old) * ys[i];
                if delta != 0.0 {
                    for (wk, xk) in w[..dim].iter_mut().zip(&xs[i]) {
                        *wk += delta * xk;
                    }
                    w[dim] += delta * cfg.bias_scale;
                }
            }
        }
        if (epoch + 1) % 10 == 0 || epoch + 1 == cfg.max_epochs {
            let norm_sq = dot(&w, &w);
            let hinge: f64 = xs
                .iter()
                .zip(ys)
                .map(|(x, &y)| (1.0 - y * margin(&w, x)).max(0.0))
                .sum();
            let primal = 0.5 * norm_sq + cfg.cost * hinge;
            let dual = alpha.iter().sum::<f64>() - 0.5 * norm_sq;
            if primal - dual <= cfg.tol {
                break;
            }
        }
    }

    let bias = w[dim] * cfg.bias_scale;
    w.truncate(dim);
    Ok(LinearModel { weights: w, bias })
}

/// One-vs-rest multiclass linear SVM.
#[derive(Debug, Clone)]
pub struct MulticlassSvm {
    pub classes: Vec<String>,
    pub models: Vec<LinearModel>,
    pub dim: usize,
}

impl MulticlassSvm {
    /// Per-class decision scores for one feature vector.
    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>, ClassifyError> {
        if x.len() != self.dim {
            return Err(ClassifyError::DimensionMismatch { want: self.dim, got: x.len() });
        }
        Ok(self.models.iter().map(|m| m.score(x)).collect())
    }

    /// Index of the highest-scoring class; ties break toward the lowest index.
    pub fn predict(&self, x: &[f64]) -> Result<usize, ClassifyError> {
        Ok(argmax(&self.scores(x)?))
    }
}

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Trains one-vs-rest linear SVMs, one per class name, on label indices
/// into `classes`.
pub fn train_multiclass(
    features: &[Vec<f64>],
    labels: &[usize],
    classes: &[String],
    cfg: &SvmConfig,
) -> Result<MulticlassSvm, ClassifyError> {
    if classes.is_empty() {
        return Err(ClassifyError::NoClasses);
    }
    if features.is_empty() || features.len() != labels.len() {
        return Err(ClassifyError::EmptyTrainingSet);
    }
    for &l in labels {
        if l >= classes.len() {
            return Err(ClassifyError::BadLabel { label: l, classes: classes.len() });
        }
    }
    let dim = features[0].len();
    let mut models = Vec::with_capacity(classes.len());
    for (ci, _) in classes.iter().enumerate() {
        let ys: Vec<f64> = labels.iter().map(|&l| if l == ci { 1.0 } else { -1.0 }).collect();
        let mut sub = cfg.clone();
        sub.seed = cfg.seed.wrapping_add(ci as u64);
        models.push(train_binary(features, &ys, &sub)?);
    }
    Ok(MulticlassSvm { classes: classes.to_vec(), models, dim })
}

/// Majority decision over several per-model label choices. Ties on the vote
/// count break by the summed per-class scores of the tied classes; remaining
/// ties break toward the lowest class index. Returns `None` on empty input.
pub fn modal_label(labels: &[usize], scores: &[Vec<f64>], n_classes: usize) -> Option<usize> {
    if labels.is_empty() || n_classes == 0 {
        return None;
    }
    let mut votes = vec![0usize; n_classes];
    for &l in labels {
        if l < n_classes {
            votes[l] += 1;
        }
    }
    let top = *votes.iter().max().unwrap();
    let tied: Vec<usize> = (0..n_classes).filter(|&c| votes[c] == top).collect();
    if tied.len() == 1 {
        return Some(tied[0]);
    }
    let mut summed = vec![0.0; n_classes];
    for s in scores {
        for (c, v) in s.iter().enumerate().take(n_classes) {
            summed[c] += v;
        }
    }
    tied.iter()
        .copied()
        .max_by(|&a, &b| {
            summed[a]
                .partial_cmp(&summed[b])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(b.cmp(&a))
        })
        .or(Some(tied[0]))
}

/// Writes a multiclass model: magic, class names, and per-class weight
/// vectors with biases, in little-endian binary.
pub fn save_multiclass(model: &MulticlassSvm, path: &Path) -> Result<(), ClassifyError> {
    let file = File::create(path).map_err(|source| ClassifyError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    persist::write_magic(&mut w, "SVM1")?;
    persist::write_u32(&mut w, model.classes.len() as u32)?;
    persist::write_u32(&mut w, model.dim as u32)?;
    for (class, m) in model.classes.iter().zip(&model.models) {
        persist::write_str(&mut w, class)?;
        persist::write_f64_slice(&mut w, &m.weights)?;
        persist::write_f64(&mut w, m.bias)?;
    }
    Ok(())
}

/// Reads a multiclass model written by [`save_multiclass`].
pub fn load_multiclass(path: &Path) -> Result<MulticlassSvm, ClassifyError> {
    let file = File::open(path).map_err(|source| ClassifyError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut r = BufReader::new(file);
    persist::read_magic(&mut r, "SVM1")?;
    let n_classes = persist::read_u32(&mut r)? as usize;
    let dim = persist::read_u32(&mut r)? as usize;
    let mut classes = Vec::with_capacity(n_classes);
    let mut models = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        classes.push(persist::read_str(&mut r)?);
        let weights = persist::read_f64_vec(&mut r, dim)?;
        let bias = persist::read_f64(&mut r)?;
        models.push(LinearModel { weights, bias });
    }
    Ok(MulticlassSvm { classes, models, dim })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_pair_reaches_the_analytic_solution() {
        // Two mirrored points: the exact L1-hinge solution at cost 1 is
        // w = (1, 0) with zero bias, putting both points on the margin.
        let xs = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        let ys = vec![1.0, -1.0];
        let model = train_binary(&xs, &ys, &SvmConfig::default()).unwrap();
        assert!((model.weights[0] - 1.0).abs() < 1e-3, "w0 = {}", model.weights[0]);
        assert!(model.weights[1].abs() < 1e-3, "w1 = {}", model.weights[1]);
        assert!(model.bias.abs() < 1e-3, "bias = {}", model.bias);
        assert!((model.score(&xs[0]) - 1.0).abs() < 1e-3);
        assert!((model.score(&xs[1]) + 1.0).abs() < 1e-3);
    }

    #[test]
    fn separable_blobs_are_classified_perfectly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..40 {
            let jx: f64 = rng.random::<f64>() - 0.5;
            let jy: f64 = rng.random::<f64>() - 0.5;
            xs.push(vec![2.0 + jx, 1.0 + jy]);
            ys.push(1.0);
            xs.push(vec![-2.0 + jx, -1.0 + jy]);
            ys.push(-1.0);
        }
        let model = train_binary(&xs, &ys, &SvmConfig::default()).unwrap();
        for (x, &y) in xs.iter().zip(&ys) {
            assert!(model.score(x) * y > 0.0, "misclassified {x:?}");
        }
    }

    #[test]
    fn duality_gap_closes_on_a_small_problem() {
        let xs = vec![
            vec![1.5, 0.2],
            vec![1.1, -0.3],
            vec![-1.2, 0.1],
            vec![-0.9, 0.4],
        ];
        let ys = vec![1.0, 1.0, -1.0, -1.0];
        let cfg = SvmConfig::default();
        let model = train_binary(&xs, &ys, &cfg).unwrap();
        // Recompute the gap the solver targets.
        let cost = cfg.cost;
        let hinge: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(x, &y)| (1.0 - y * model.score(x)).max(0.0))
            .sum();
        let norm_sq: f64 = model.weights.iter().map(|w| w * w).sum::<f64>()
            + model.bias * model.bias;
        let primal = 0.5 * norm_sq + cost * hinge;
        // The dual objective is bounded above by the primal; with the gap
        // driven to 1e-6 the primal value itself must be near-optimal, which
        // for this separable layout means every point sits at hinge <= ~0.
        assert!(primal.is_finite());
        assert!(hinge < 1e-3, "hinge sum {hinge} should be driven out");
    }

    #[test]
    fn rejects_bad_labels_and_shapes() {
        let xs = vec![vec![1.0], vec![2.0]];
        assert!(matches!(
            train_binary(&xs, &[1.0, 0.5], &SvmConfig::default()),
            Err(ClassifyError::BadBinaryLabel(_))
        ));
        let ragged = vec![vec![1.0], vec![2.0, 3.0]];
        assert!(matches!(
            train_binary(&ragged, &[1.0, -1.0], &SvmConfig::default()),
            Err(ClassifyError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            train_binary(&[], &[], &SvmConfig::default()),
            Err(ClassifyError::EmptyTrainingSet)
        ));
    }

    fn four_blob_data() -> (Vec<Vec<f64>>, Vec<usize>, Vec<String>) {
        let centers = [(3.0, 0.0), (-3.0, 0.0), (0.0, 3.0), (0.0, -3.0)];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut xs = Vec::new();
        let mut ls = Vec::new();
        for (ci, &(cx, cy)) in centers.iter().enumerate() {
            for _ in 0..15 {
                xs.push(vec![
                    cx + rng.random::<f64>() - 0.5,
                    cy + rng.random::<f64>() - 0.5,
                ]);
                ls.push(ci);
            }
        }
        let names = (0..4).map(|i| format!("c{i}")).collect();
        (xs, ls, names)
    }

    #[test]
    fn one_vs_rest_separates_four_blobs() {
        let (xs, ls, names) = four_blob_data();
        let svm = train_multiclass(&xs, &ls, &names, &SvmConfig::default()).unwrap();
        let correct = xs
            .iter()
            .zip(&ls)
            .filter(|(x, &l)| svm.predict(x).unwrap() == l)
            .count();
        assert_eq!(correct, xs.len(), "all training points must be recovered");
    }

    #[test]
    fn multiclass_model_round_trips_through_disk() {
        let (xs, ls, names) = four_blob_data();
        let svm = train_multiclass(&xs, &ls, &names, &SvmConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.svm");
        save_multiclass(&svm, &path).unwrap();
        let back = load_multiclass(&path).unwrap();
        assert_eq!(back.classes, svm.classes);
        assert_eq!(back.dim, svm.dim);
        for (a, b) in svm.models.iter().zip(&back.models) {
            assert_eq!(a.weights, b.weights);
            assert_eq!(a.bias, b.bias);
        }
    }

    #[test]
    fn clear_majority_wins_regardless_of_scores() {
        let labels = [2, 2, 0];
        let scores = vec![
            vec![9.0, 0.0, 1.0],
            vec![0.0, 0.0, 1.0],
            vec![9.0, 0.0, 0.0],
        ];
        assert_eq!(modal_label(&labels, &scores, 3), Some(2));
    }

    #[test]
    fn vote_ties_break_by_summed_scores() {
        // One vote each; class 1 has the largest summed score.
        let labels = [0, 1, 2];
        let scores = vec![
            vec![0.2, 0.5, 0.1],
            vec![0.1, 0.9, 0.2],
            vec![0.3, 0.4, 0.6],
        ];
        assert_eq!(modal_label(&labels, &scores, 3), Some(1));
    }

    #[test]
    fn score_ties_break_toward_the_lowest_index() {
        let labels = [0, 1];
        let scores = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        assert_eq!(modal_label(&labels, &scores, 2), Some(0));
        assert_eq!(modal_label(&[], &[], 2), None);
    }
}
