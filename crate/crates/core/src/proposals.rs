//! Scale-proposal search over an anisotropic downsizing pyramid.
//!
//! A texture's intrinsic scale is found by scanning every pyramid level with
//! a small linear model over normed-gradient windows. Windows that score at
//! or above a learned acceptance threshold become proposals; proposals are
//! then reduced by demanding that each one has enough same-level neighbors
//! with closely matching local texture statistics, which concentrates the
//! survivors at the levels where the texture repeats in phase with the
//! scanning grid.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::classify::{self, ClassifyError, SvmConfig};
use crate::imagery::{self, Image, ImageryError, ScaleLevel};
use crate::lbp::{self, LbpError, LbpHistogram};
use crate::persist::{self, PersistError};

#[derive(Debug, Error)]
pub enum ProposalError {
    #[error("window side must be at least 3, got {0}")]
    WindowTooSmall(usize),
    #[error("stride must be positive")]
    ZeroStride,
    #[error("no positive windows were collected")]
    EmptyPositive,
    #[error("no negative windows were collected")]
    EmptyNegative,
    #[error("quantile {0} must lie in [0, 1]")]
    BadQuantile(f64),
    #[error("similarity calibration had no usable class pairs")]
    CalibrationFailed,
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Imagery(#[from] ImageryError),
    #[error(transparent)]
    Lbp(#[from] LbpError),
    #[error(transparent)]
    Persist(#[from] PersistError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed proposals file {path}: {reason}")]
    BadFile { path: String, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Geometry of the pyramid scan.
#[derive(Debug, Clone)]
pub struct ScanParams {
    /// Per-axis downsizing factor between adjacent pyramid levels.
    pub step: f64,
    /// Smallest level side kept in the pyramid.
    pub min_dim: usize,
    /// Window side in pixels; features have `window * window` entries.
    pub window: usize,
    /// Scan stride in pixels along both axes.
    pub stride: usize,
}

impl Default for ScanParams {
    fn default() -> Self {
        Self { step: 0.95, min_dim: 10, window: 8, stride: 8 }
    }
}

impl ScanParams {
    fn validate(&self) -> Result<(), ProposalError> {
        if self.window < 3 {
            return Err(ProposalError::WindowTooSmall(self.window));
        }
        if self.stride == 0 {
            return Err(ProposalError::ZeroStride);
        }
        Ok(())
    }
}

/// Linear scoring model over flattened normed-gradient windows, plus the
/// acceptance threshold calibrated on positive training scores.
#[derive(Debug, Clone, PartialEq)]
pub struct NgModel {
    pub window: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub threshold: f64,
}

impl NgModel {
    pub fn score(&self, feature: &[f64]) -> f64 {
        debug_assert_eq!(feature.len(), self.weights.len());
        self.weights.iter().zip(feature).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }
}

/// One accepted window: pyramid level, top-left corner, and model score.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub level: ScaleLevel,
    pub x: u32,
    pub y: u32,
    pub score: f64,
}

/// Scan result for one image: accepted windows and, for each, the local
/// texture histogram used by the reduction stage.
#[derive(Debug, Clone)]
pub struct ScanOutcome {
    pub proposals: Vec<Proposal>,
    pub histograms: Vec<LbpHistogram>,
}

/// Lower empirical quantile: with scores sorted ascending, the element at
/// index `floor(q * (len - 1))`.
pub fn lower_quantile(scores: &[f64], q: f64) -> Result<f64, ProposalError> {
    if scores.is_empty() {
        return Err(ProposalError::EmptyPositive);
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(ProposalError::BadQuantile(q));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let idx = (q * (sorted.len() - 1) as f64).floor() as usize;
    Ok(sorted[idx])
}

fn window_feature(ng: &Image, x: usize, y: usize, window: usize) -> Vec<f64> {
    let mut feat = Vec::with_capacity(window * window);
    for dy in 0..window {
        let row = ng.row(y + dy);
        feat.extend_from_slice(&row[x..x + window]);
    }
    feat
}

/// Trains the window model on labeled feature sets and fixes the acceptance
/// threshold at the given lower quantile of the positives' own scores.
pub fn train_ng_model(
    positives: &[Vec<f64>],
    negatives: &[Vec<f64>],
    window: usize,
    svm: &SvmConfig,
    quantile: f64,
) -> Result<NgModel, ProposalError> {
    if positives.is_empty() {
        return Err(ProposalError::EmptyPositive);
    }
    if negatives.is_empty() {
        return Err(ProposalError::EmptyNegative);
    }
    let mut xs = Vec::with_capacity(positives.len() + negatives.len());
    let mut ys = Vec::with_capacity(xs.capacity());
    for p in positives {
        xs.push(p.clone());
        ys.push(1.0);
    }
    for n in negatives {
        xs.push(n.clone());
        ys.push(-1.0);
    }
    let model = classify::train_binary(&xs, &ys, svm)?;
    let pos_scores: Vec<f64> = positives.iter().map(|p| model.score(p)).collect();
    let threshold = lower_quantile(&pos_scores, quantile)?;
    Ok(NgModel {
        window,
        weights: model.weights,
        bias: model.bias,
        threshold,
    })
}

/// Scans every pyramid level of `image` with the window model. A window
/// becomes a proposal when its score reaches the model threshold; each
/// proposal also records the texture histogram of its image window.
pub fn scan_image(
    image: &Image,
    model: &NgModel,
    params: &ScanParams,
) -> Result<ScanOutcome, ProposalError> {
    params.validate()?;
    let pyr = imagery::build_pyramid(image, params.step, params.min_dim)?;
    let mut proposals = Vec::new();
    let mut histograms = Vec::new();
    let w = params.window;
    for (level, img) in pyr.iter() {
        if img.width() < w || img.height() < w {
            continue;
        }
        let ng = imagery::gradient_norm(img);
        let mut y = 0;
        while y + w <= img.height() {
            let mut x = 0;
            while x + w <= img.width() {
                let feat = window_feature(&ng, x, y, w);
                let score = model.score(&feat);
                if score >= model.threshold {
                    let patch = img.crop(x, y, w, w)?;
                    histograms.push(lbp::lbp_histogram(&patch)?);
                    proposals.push(Proposal {
                        level,
                        x: x as u32,
                        y: y as u32,
                        score,
                    });
                }
                x += params.stride;
            }
            y += params.stride;
        }
    }
    Ok(ScanOutcome { proposals, histograms })
}

/// Keeps each proposal only if at least `min_similar` other proposals at the
/// same pyramid level have histogram similarity of at least `eta` with it.
/// Returns indices into the scan's proposal list, in their original order.
pub fn reduce_survivors(outcome: &ScanOutcome, eta: f64, min_similar: usize) -> Vec<usize> {
    let n = outcome.proposals.len();
    // Bucket proposal indices by level.
    let mut by_level: Vec<(ScaleLevel, Vec<usize>)> = Vec::new();
    for i in 0..n {
        let level = outcome.proposals[i].level;
        match by_level.iter_mut().find(|(l, _)| *l == level) {
            Some((_, v)) => v.push(i),
            None => by_level.push((level, vec![i])),
        }
    }
    let mut keep = vec![false; n];
    for (_, members) in &by_level {
        if members.len() <= min_similar {
            continue;
        }
        for (ai, &a) in members.iter().enumerate() {
            let mut similar = 0;
            for (bi, &b) in members.iter().enumerate() {
                if ai == bi {
                    continue;
                }
                if lbp::similarity(&outcome.histograms[a], &outcome.histograms[b]) >= eta {
                    similar += 1;
                    if similar >= min_similar {
                        break;
                    }
                }
            }
            keep[a] = similar >= min_similar;
        }
    }
    (0..n).filter(|&i| keep[i]).collect()
}

/// Calibrates the reduction similarity threshold from labeled training
/// histograms: images are classified by their nearest neighbor under
/// histogram intersection (leave-one-out); among correctly classified images
/// the per-class minimum pairwise similarity is taken, and the calibrated
/// threshold is the minimum of those over all classes with at least two
/// correctly classified members.
pub fn calibrate_eta(items: &[(usize, LbpHistogram)]) -> Result<f64, ProposalError> {
    let n = items.len();
    let mut correct = vec![false; n];
    for i in 0..n {
        let mut best_sim = f64::NEG_INFINITY;
        let mut best_label = None;
        for j in 0..n {
            if i == j {
                continue;
            }
            let sim = lbp::similarity(&items[i].1, &items[j].1);
            if sim > best_sim {
                best_sim = sim;
                best_label = Some(items[j].0);
            }
        }
        correct[i] = best_label == Some(items[i].0);
    }
    let mut classes: Vec<usize> = items.iter().map(|(c, _)| *c).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut eta = f64::INFINITY;
    let mut usable = false;
    for class in classes {
        let members: Vec<usize> = (0..n)
            .filter(|&i| items[i].0 == class && correct[i])
            .collect();
        if members.len() < 2 {
            continue;
        }
        usable = true;
        for (ai, &a) in members.iter().enumerate() {
            for &b in &members[ai + 1..] {
                let sim = lbp::similarity(&items[a].1, &items[b].1);
                if sim < eta {
                    eta = sim;
                }
            }
        }
    }
    if !usable {
        return Err(ProposalError::CalibrationFailed);
    }
    Ok(eta)
}

/// Fractional pyramid exponent at which a period of `effective_texel` pixels
/// shrinks to the window side; `None` when the period is already smaller.
pub fn canonical_exponent(effective_texel: f64, step: f64, window: usize) -> Option<f64> {
    if !(effective_texel.is_finite() && effective_texel > 0.0) {
        return None;
    }
    if effective_texel < window as f64 {
        return None;
    }
    Some((window as f64 / effective_texel).ln() / step.ln())
}

/// The most frequent level among proposals. `None` on empty input.
///
/// Ties between equally frequent levels are resolved structurally rather
/// than by an arbitrary ordering. On a periodic texture, survivor counts
/// saturate over a contiguous run of levels that starts at the coarse end
/// and extends down to the level framing one texel: every level in that
/// run still sees a window population homogeneous enough to keep whole
/// cohorts alive. Harmonic aliases can reach the same count, but they show
/// up as isolated levels detached from that run. So among the tied levels
/// we keep only the connected group (adjacency = one step in `m` or `n`)
/// that contains the smallest tied pair — the run anchored at the coarse
/// end — and report that group's largest pair, the run's deep edge.
pub fn modal_level(proposals: &[Proposal]) -> Option<ScaleLevel> {
    let mut counts: Vec<(ScaleLevel, usize)> = Vec::new();
    for p in proposals {
        match counts.iter_mut().find(|(l, _)| *l == p.level) {
            Some((_, c)) => *c += 1,
            None => counts.push((p.level, 1)),
        }
    }
    let best = counts.iter().map(|&(_, c)| c).max()?;
    let mut tied: Vec<ScaleLevel> = counts
        .into_iter()
        .filter(|&(_, c)| c == best)
        .map(|(l, _)| l)
        .collect();
    tied.sort_by_key(|l| (l.m, l.n));
    let mut group = vec![tied[0]];
    let mut frontier = vec![tied[0]];
    while let Some(cur) = frontier.pop() {
        for &cand in &tied {
            let dm = cand.m.abs_diff(cur.m);
            let dn = cand.n.abs_diff(cur.n);
            if dm + dn == 1 && !group.contains(&cand) {
                group.push(cand);
                frontier.push(cand);
            }
        }
    }
    group.into_iter().max_by_key(|l| (l.m, l.n))
}

/// Ranks the distinct levels among surviving proposals by proposal count,
/// then by summed score, then by smallest exponents, and returns at most
/// `max` of them. These are the levels worth expanding into instances.
pub fn select_instance_levels(survivors: &[Proposal], max: usize) -> Vec<ScaleLevel> {
    let mut stats: Vec<(ScaleLevel, usize, f64)> = Vec::new();
    for p in survivors {
        match stats.iter_mut().find(|(l, _, _)| *l == p.level) {
            Some((_, c, s)) => {
                *c += 1;
                *s += p.score;
            }
            None => stats.push((p.level, 1, p.score)),
        }
    }
    stats.sort_by(|a, b| {
        b.1.cmp(&a.1)
            .then(b.2.partial_cmp(&a.2).unwrap_or(std::cmp::Ordering::Equal))
            .then(a.0.m.cmp(&b.0.m))
            .then(a.0.n.cmp(&b.0.n))
    });
    stats.into_iter().take(max).map(|(l, _, _)| l).collect()
}

/// Sampling policy for building window training sets from annotated images.
#[derive(Debug, Clone)]
pub struct NgSampleConfig {
    /// Levels within this many exponents of the canonical level (per axis,
    /// rounded) contribute positive windows.
    pub pos_radius: u32,
    /// Levels at least this many exponents away on some axis contribute
    /// negative windows.
    pub neg_gap: u32,
    /// Cap on positive and on negative windows drawn from one image.
    pub max_per_image: usize,
    /// Number of negative levels sampled per image.
    pub neg_levels_per_image: usize,
    pub seed: u64,
}

impl Default for NgSampleConfig {
    fn default() -> Self {
        Self {
            pos_radius: 1,
            neg_gap: 3,
            max_per_image: 200,
            neg_levels_per_image: 12,
            seed: 0,
        }
    }
}

/// One annotated training image: pixels plus its fractional canonical
/// exponents per axis (where its texture period meets the window side).
/// An axis with `None` carries no recoverable period — windows there look
/// alike at every exponent, so that axis never separates positives from
/// negatives.
pub struct NgTrainItem<'a> {
    pub image: &'a Image,
    pub canonical: (Option<f64>, Option<f64>),
}

fn subsample<T>(items: &mut Vec<T>, cap: usize, rng: &mut impl Rng) {
    if items.len() <= cap {
        return;
    }
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
    items.truncate(cap);
}

/// Collects positive and negative window features across annotated images.
/// Positives come from levels near each image's canonical level, negatives
/// from clearly off-canonical levels.
pub fn build_training_windows(
    items: &[NgTrainItem<'_>],
    params: &ScanParams,
    cfg: &NgSampleConfig,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), ProposalError> {
    params.validate()?;
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (idx, item) in items.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(
            crate::datakit::derive_seed(cfg.seed, &[0x9e6, idx as u64]),
        );
        let pyr = imagery::build_pyramid(item.image, params.step, params.min_dim)?;
        let a_star = item.canonical.0.map(f64::round);
        let b_star = item.canonical.1.map(f64::round);
        if a_star.is_none() && b_star.is_none() {
            continue;
        }
        let mut pos = Vec::new();
        let mut neg_levels = Vec::new();
        for (level, img) in pyr.iter() {
            if img.width() < params.window || img.height() < params.window {
                continue;
            }
            // Distance to the canonical exponent, per structured axis.
            let da = a_star.map(|a| (level.m as f64 - a).abs());
            let db = b_star.map(|b| (level.n as f64 - b).abs());
            let r = cfg.pos_radius as f64;
            let near = da.unwrap_or(0.0) <= r && db.unwrap_or(0.0) <= r;
            let far = da.unwrap_or(0.0).max(db.unwrap_or(0.0)) >= cfg.neg_gap as f64;
            if near {
                let ng = imagery::gradient_norm(img);
                collect_windows(&ng, params, &mut pos);
            } else if far {
                neg_levels.push(level);
            }
        }
        subsample(&mut neg_levels, cfg.neg_levels_per_image, &mut rng);
        let mut neg = Vec::new();
        for level in neg_levels {
            if let Some(img) = pyr.level(level.m, level.n) {
                let ng = imagery::gradient_norm(img);
                collect_windows(&ng, params, &mut neg);
            }
        }
        subsample(&mut pos, cfg.max_per_image, &mut rng);
        subsample(&mut neg, cfg.max_per_image, &mut rng);
        positives.extend(pos);
        negatives.extend(neg);
    }
    if positives.is_empty() {
        return Err(ProposalError::EmptyPositive);
    }
    if negatives.is_empty() {
        return Err(ProposalError::EmptyNegative);
    }
    Ok((positives, negatives))
}

fn collect_windows(ng: &Image, params: &ScanParams, out: &mut Vec<Vec<f64>>) {
    let w = params.window;
    let mut y = 0;
    while y + w <= ng.height() {
        let mut x = 0;
        while x + w <= ng.width() {
            out.push(window_feature(ng, x, y, w));
            x += params.stride;
        }
        y += params.stride;
    }
}

/// Writes the window model: magic, window side, then the weight vector, the
/// bias, and the acceptance threshold as consecutive little-endian reals.
pub fn save_ng_model(model: &NgModel, path: &Path) -> Result<(), ProposalError> {
    let file = File::create(path).map_err(|source| ProposalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    persist::write_magic(&mut w, "NGM1")?;
    persist::write_u32(&mut w, model.window as u32)?;
    persist::write_f64_slice(&mut w, &model.weights)?;
    persist::write_f64(&mut w, model.bias)?;
    persist::write_f64(&mut w, model.threshold)?;
    Ok(())
}

/// Reads a window model written by [`save_ng_model`].
pub fn load_ng_model(path: &Path) -> Result<NgModel, ProposalError> {
    let file = File::open(path).map_err(|source| ProposalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut r = BufReader::new(file);
    persist::read_magic(&mut r, "NGM1")?;
    let window = persist::read_u32(&mut r)? as usize;
    let weights = persist::read_f64_vec(&mut r, window * window)?;
    let bias = persist::read_f64(&mut r)?;
    let threshold = persist::read_f64(&mut r)?;
    Ok(NgModel { window, weights, bias, threshold })
}

/// Writes proposals as CSV with columns `m,n,row,col,score`.
pub fn write_proposals_csv(path: &Path, proposals: &[Proposal]) -> Result<(), ProposalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["m", "n", "row", "col", "score"])?;
    for p in proposals {
        w.write_record([
            p.level.m.to_string(),
            p.level.n.to_string(),
            p.y.to_string(),
            p.x.to_string(),
            format!("{:.17e}", p.score),
        ])?;
    }
    w.flush().map_err(|source| ProposalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(())
}

/// Reads proposals written by [`write_proposals_csv`].
pub fn read_proposals_csv(path: &Path) -> Result<Vec<Proposal>, ProposalError> {
    let bad = |reason: String| ProposalError::BadFile {
        path: path.display().to_string(),
        reason,
    };
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let get = |i: usize| rec.get(i).unwrap_or("");
        let parse_u32 = |i: usize| {
            get(i)
                .parse::<u32>()
                .map_err(|_| bad(format!("row {}: bad integer {:?}", line + 2, get(i))))
        };
        let score: f64 = get(4)
            .parse()
            .map_err(|_| bad(format!("row {}: bad score {:?}", line + 2, get(4))))?;
        out.push(Proposal {
            level: ScaleLevel::new(parse_u32(0)?, parse_u32(1)?),
            y: parse_u32(2)?,
            x: parse_u32(3)?,
            score,
        });
    }
    Ok(out)
}
