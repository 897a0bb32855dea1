//! Patch-dictionary reconstruction and scale-band regrouping.
//!
//! A texture class whose samples span a wide range of downsizing levels is
//! split into subcategories by walking from the least-downsized samples
//! toward the heaviest: learn a small dictionary of 16×16 patches on the
//! ten least-downsized remaining samples, pull in every remaining sample
//! the dictionary reconstructs with a relative error below a threshold,
//! and repeat on what is left. Samples that look alike at the patch level
//! land in the same subcategory, so the group boundaries fall where the
//! texture's appearance breaks under downsizing.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::datakit::derive_seed;
use crate::imagery::{Image, ImageryError, ScaleLevel};
use crate::persist::{self, PersistError};

/// Side length of the square patches the dictionary is built on.
pub const PATCH_SIDE: usize = 16;
/// Dimension of a patch flattened to a vector.
pub const PATCH_DIM: usize = PATCH_SIDE * PATCH_SIDE;
/// Sparsity weight used when a stored dictionary does not carry one.
pub const DEFAULT_LAMBDA: f64 = 0.1;

#[derive(Debug, Error)]
pub enum BoundaryError {
    #[error("dictionary needs at least one atom")]
    NoAtoms,
    #[error("no training images were provided")]
    NoSamples,
    #[error("training patches are all constant; nothing to learn")]
    ConstantPatches,
    #[error("cannot reconstruct an all-zero image; the error ratio divides by its norm")]
    ZeroImage,
    #[error("membership threshold {0} must lie strictly inside (0, 1)")]
    BadThreshold(f64),
    #[error("atom length {got} does not match the {PATCH_DIM}-pixel patch size")]
    BadAtomLength { got: usize },
    #[error(transparent)]
    Imagery(#[from] ImageryError),
    #[error(transparent)]
    Persist(#[from] PersistError),
    #[error("malformed dictionary file {path}: {reason}")]
    BadFile { path: String, reason: String },
}

/// A learned patch dictionary: unit-L2 atoms of length [`PATCH_DIM`] plus
/// the sparsity weight used during sparse inference.
#[derive(Debug, Clone)]
pub struct Dictionary {
    pub atoms: Vec<Vec<f64>>,
    pub lambda: f64,
}

/// Settings for [`learn_dictionary`].
#[derive(Debug, Clone)]
pub struct DictConfig {
    /// Number of atoms to learn.
    pub atoms: usize,
    /// Sparsity weight on the code L1 norm.
    pub lambda: f64,
    /// Outer alternations between sparse inference and atom updates.
    pub outer_iters: usize,
    /// Shrinkage iterations per patch within one inference pass.
    pub inner_iters: usize,
    /// Seed for atom initialization and dead-atom replacement.
    pub seed: u64,
}

impl Default for DictConfig {
    fn default() -> Self {
        Self { atoms: 64, lambda: DEFAULT_LAMBDA, outer_iters: 12, inner_iters: 50, seed: 0 }
    }
}

/// Result of reconstructing one image against a dictionary.
#[derive(Debug, Clone)]
pub struct ReconReport {
    /// Relative reconstruction error `‖I − Î‖ / ‖I‖` (Frobenius norms,
    /// computed on the original support).
    pub delta: f64,
    /// Sparse code per tile, row-major over the padded tile grid.
    pub codes: Vec<Vec<f64>>,
    /// Tile grid width.
    pub tiles_x: usize,
    /// Tile grid height.
    pub tiles_y: usize,
}

/// A dataset regrouped per class into scale subcategories. Group entries
/// are indices into the sample slice the regrouping was computed from.
#[derive(Debug, Clone)]
pub struct Regrouping {
    pub classes: Vec<(String, Vec<Vec<usize>>)>,
}

impl Regrouping {
    /// Total number of subcategories across all classes.
    pub fn total_subcategories(&self) -> usize {
        self.classes.iter().map(|(_, g)| g.len()).sum()
    }
}

/// Mirrors index `i` back into `0..n` by reflecting at the borders, so the
/// padded region continues the image without a visible seam.
fn mirror(i: usize, n: usize) -> usize {
    if n <= 1 {
        return 0;
    }
    let period = 2 * n - 2;
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Cuts `img` into non-overlapping [`PATCH_SIDE`]-square tiles, reflecting
/// at the right and bottom borders when the dimensions are not multiples of
/// the patch side. Tiles come back row-major with their grid shape.
fn tile_patches(img: &Image) -> (Vec<Vec<f64>>, usize, usize) {
    let tiles_x = img.width().div_ceil(PATCH_SIDE);
    let tiles_y = img.height().div_ceil(PATCH_SIDE);
    let mut out = Vec::with_capacity(tiles_x * tiles_y);
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let mut patch = Vec::with_capacity(PATCH_DIM);
            for dy in 0..PATCH_SIDE {
                let y = mirror(ty * PATCH_SIDE + dy, img.height());
                for dx in 0..PATCH_SIDE {
                    let x = mirror(tx * PATCH_SIDE + dx, img.width());
                    patch.push(img.get(x, y));
                }
            }
            out.push(patch);
        }
    }
    (out, tiles_x, tiles_y)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Compensated sum; keeps the objective's rounding error far below the
/// 1e-9 monotonicity slack even over thousands of terms.
fn kahan_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Largest eigenvalue of `D Dᵀ` (atoms as rows) by power iteration, padded
/// by a small safety factor so `1/L` remains a valid shrinkage step.
fn lipschitz(atoms: &[Vec<f64>]) -> f64 {
    let a = atoms.len();
    let mut v = vec![1.0 / (a as f64).sqrt(); a];
    let mut l = 1.0;
    for _ in 0..60 {
        // u = Dᵀ v, w = D u
        let mut u = vec![0.0; PATCH_DIM];
        for (vi, atom) in v.iter().zip(atoms) {
            for (uj, aj) in u.iter_mut().zip(atom) {
                *uj += vi * aj;
            }
        }
        let mut w = vec![0.0; a];
        for (wi, atom) in w.iter_mut().zip(atoms) {
            *wi = atom.iter().zip(&u).map(|(x, y)| x * y).sum();
        }
        let n = norm(&w);
        if n < 1e-300 {
            break;
        }
        l = n;
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / n;
        }
    }
    l * 1.001 + 1e-12
}

/// One pass of iterative shrinkage on a single patch, warm-started from
/// `code`. With `step ≤ 1/L` every iteration lowers this patch's share of
/// the objective, so inference never undoes earlier progress.
fn ista(atoms: &[Vec<f64>], x: &[f64], code: &mut [f64], lambda: f64, step: f64, iters: usize) {
    let a = atoms.len();
    let mut recon = vec![0.0; PATCH_DIM];
    for _ in 0..iters {
        for r in recon.iter_mut() {
            *r = 0.0;
        }
        for (ci, atom) in code.iter().zip(atoms) {
            if *ci != 0.0 {
                for (rj, aj) in recon.iter_mut().zip(atom) {
                    *rj += ci * aj;
                }
            }
        }
        for j in 0..a {
            let grad: f64 = atoms[j]
                .iter()
                .zip(recon.iter().zip(x))
                .map(|(aj, (rj, xj))| aj * (rj - xj))
                .sum();
            let t = code[j] - step * grad;
            let thr = step * lambda;
            code[j] = if t > thr {
                t - thr
            } else if t < -thr {
                t + thr
            } else {
                0.0
            };
        }
    }
}

/// `0.5‖x − Dᵀa‖² + λ‖a‖₁` summed over all patches, compensated.
fn objective(atoms: &[Vec<f64>], patches: &[Vec<f64>], codes: &[Vec<f64>], lambda: f64) -> f64 {
    kahan_sum(patches.iter().zip(codes).map(|(x, code)| {
        let mut recon = vec![0.0; PATCH_DIM];
        for (ci, atom) in code.iter().zip(atoms) {
            if *ci != 0.0 {
                for (rj, aj) in recon.iter_mut().zip(atom) {
                    *rj += ci * aj;
                }
            }
        }
        let quad: f64 = recon.iter().zip(x).map(|(r, xi)| (r - xi) * (r - xi)).sum();
        let l1: f64 = code.iter().map(|c| c.abs()).sum();
        0.5 * quad + lambda * l1
    }))
}

fn random_unit(rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..PATCH_DIM).map(|_| rng.random::<f64>() - 0.5).collect();
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|a| a / n).collect();
        }
    }
}

/// Learns a patch dictionary and returns it along with the value of the
/// training objective at the end of every outer iteration. The sequence is
/// nonincreasing: sparse inference, the per-atom updates, and the final
/// rescaling each lower (or hold) the objective.
pub fn learn_dictionary_with_trace(
    images: &[&Image],
    cfg: &DictConfig,
) -> Result<(Dictionary, Vec<f64>), BoundaryError> {
    if images.is_empty() {
        return Err(BoundaryError::NoSamples);
    }
    if cfg.atoms == 0 {
        return Err(BoundaryError::NoAtoms);
    }
    if images.len() < 10 {
        log::warn!(
            "dictionary learning on {} images; ten is the standard sample count",
            images.len()
        );
    }
    let mut patches: Vec<Vec<f64>> = Vec::new();
    for img in images {
        patches.extend(tile_patches(img).0);
    }
    let spread = patches
        .iter()
        .map(|p| {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &v in p {
                lo = lo.min(v);
                hi = hi.max(v);
            }
            hi - lo
        })
        .fold(0.0f64, f64::max);
    if spread < 1e-12 {
        return Err(BoundaryError::ConstantPatches);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0xd1c7]));
    let mut order: Vec<usize> = (0..patches.len()).collect();
    order.shuffle(&mut rng);
    let mut atoms: Vec<Vec<f64>> = (0..cfg.atoms)
        .map(|j| {
            let p = &patches[order[j % order.len()]];
            let n = norm(p);
            if n > 1e-9 {
                p.iter().map(|v| v / n).collect()
            } else {
                random_unit(&mut rng)
            }
        })
        .collect();

    let mut codes: Vec<Vec<f64>> = vec![vec![0.0; cfg.atoms]; patches.len()];
    let mut trace = Vec::with_capacity(cfg.outer_iters);
    for _ in 0..cfg.outer_iters {
        // Sparse inference, warm-started so each pass only improves codes.
        let step = 1.0 / lipschitz(&atoms);
        patches
            .par_iter()
            .zip(codes.par_iter_mut())
            .for_each(|(x, code)| ista(&atoms, x, code, cfg.lambda, step, cfg.inner_iters));

        // Per-atom updates: minimize the quadratic term over the unit ball
        // one atom at a time (exact per-atom minimizer, so the objective
        // cannot rise), then push each atom out to unit norm while scaling
        // its codes down by the same factor — the reconstruction term is
        // untouched and the L1 term can only shrink.
        let a = cfg.atoms;
        let mut gram = vec![vec![0.0; a]; a];
        let mut corr = vec![vec![0.0; PATCH_DIM]; a];
        for (x, code) in patches.iter().zip(&codes) {
            for j in 0..a {
                let cj = code[j];
                if cj == 0.0 {
                    continue;
                }
                for k in 0..a {
                    gram[j][k] += cj * code[k];
                }
                for (cjl, xl) in corr[j].iter_mut().zip(x) {
                    *cjl += cj * xl;
                }
            }
        }
        for j in 0..a {
            if gram[j][j] == 0.0 {
                // Unused atom: its codes are all zero, so replacing it
                // leaves the objective untouched.
                atoms[j] = random_unit(&mut rng);
                continue;
            }
            let mut u = vec![0.0; PATCH_DIM];
            for (ul, (cl, dl)) in u.iter_mut().zip(corr[j].iter().zip(&atoms[j])) {
                *ul = *dl + *cl / gram[j][j];
            }
            for k in 0..a {
                if k == j || gram[j][k] == 0.0 {
                    continue;
                }
                let w = gram[j][k] / gram[j][j];
                for (ul, dl) in u.iter_mut().zip(&atoms[k]) {
                    *ul -= w * dl;
                }
            }
            let nu = norm(&u);
            if nu > 1.0 {
                for ul in u.iter_mut() {
                    *ul /= nu;
                }
            }
            atoms[j] = u;
        }
        for j in 0..a {
            let nj = norm(&atoms[j]);
            if nj == 0.0 {
                // A zero atom contributes nothing, so clearing its codes
                // only shrinks the L1 term, and the replacement starts
                // unused.
                for code in codes.iter_mut() {
                    code[j] = 0.0;
                }
                atoms[j] = random_unit(&mut rng);
                continue;
            }
            if (nj - 1.0).abs() > 1e-15 {
                for v in atoms[j].iter_mut() {
                    *v /= nj;
                }
                for code in codes.iter_mut() {
                    code[j] *= nj;
                }
            }
        }
        trace.push(objective(&atoms, &patches, &codes, cfg.lambda));
    }
    Ok((Dictionary { atoms, lambda: cfg.lambda }, trace))
}

/// Learns a patch dictionary on the given images. See
/// [`learn_dictionary_with_trace`] for the objective trace variant.
pub fn learn_dictionary(images: &[&Image], cfg: &DictConfig) -> Result<Dictionary, BoundaryError> {
    learn_dictionary_with_trace(images, cfg).map(|(d, _)| d)
}

fn check_atoms(dict: &Dictionary) -> Result<(), BoundaryError> {
    if dict.atoms.is_empty() {
        return Err(BoundaryError::NoAtoms);
    }
    for atom in &dict.atoms {
        if atom.len() != PATCH_DIM {
            return Err(BoundaryError::BadAtomLength { got: atom.len() });
        }
    }
    Ok(())
}

/// Reconstructs `img` tile by tile with `iters` shrinkage steps per tile.
pub fn reconstruct_with(
    img: &Image,
    dict: &Dictionary,
    iters: usize,
) -> Result<ReconReport, BoundaryError> {
    check_atoms(dict)?;
    let img_norm = norm(img.data());
    if img_norm == 0.0 {
        return Err(BoundaryError::ZeroImage);
    }
    let (patches, tiles_x, tiles_y) = tile_patches(img);
    let step = 1.0 / lipschitz(&dict.atoms);
    let codes: Vec<Vec<f64>> = patches
        .par_iter()
        .map(|x| {
            let mut code = vec![0.0; dict.atoms.len()];
            ista(&dict.atoms, x, &mut code, dict.lambda, step, iters);
            code
        })
        .collect();
    // Assemble the reconstruction and take the error on the original
    // support only; the reflected padding is bookkeeping, not signal.
    let mut err_sq = 0.0;
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let code = &codes[ty * tiles_x + tx];
            for dy in 0..PATCH_SIDE {
                let y = ty * PATCH_SIDE + dy;
                if y >= img.height() {
                    continue;
                }
                for dx in 0..PATCH_SIDE {
                    let x = tx * PATCH_SIDE + dx;
                    if x >= img.width() {
                        continue;
                    }
                    let mut v = 0.0;
                    let l = dy * PATCH_SIDE + dx;
                    for (ci, atom) in code.iter().zip(&dict.atoms) {
                        if *ci != 0.0 {
                            v += ci * atom[l];
                        }
                    }
                    let d = img.get(x, y) - v;
                    err_sq += d * d;
                }
            }
        }
    }
    Ok(ReconReport { delta: err_sq.sqrt() / img_norm, codes, tiles_x, tiles_y })
}

/// Number of shrinkage iterations used by [`reconstruct`].
pub const RECON_ITERS: usize = 50;

/// Reconstructs `img` from the dictionary and reports the relative error.
pub fn reconstruct(img: &Image, dict: &Dictionary) -> Result<ReconReport, BoundaryError> {
    reconstruct_with(img, dict, RECON_ITERS)
}

/// Splits one class into scale subcategories. Groups come back in
/// discovery order as index sets into `images`/`levels`; every index lands
/// in exactly one group.
///
/// Each round seeds a dictionary from the ten least-downsized remaining
/// samples (smallest exponent sum, ties by position), assigns every
/// remaining sample whose reconstruction error is below `xi`, and removes
/// the group. The seeds are force-assigned so a round always retires at
/// least ten samples even if the optimizer underdelivers.
pub fn regroup_refs(
    images: &[&Image],
    levels: &[ScaleLevel],
    xi: f64,
    cfg: &DictConfig,
) -> Result<Vec<Vec<usize>>, BoundaryError> {
    if !(xi > 0.0 && xi < 1.0) {
        return Err(BoundaryError::BadThreshold(xi));
    }
    assert_eq!(images.len(), levels.len(), "one scale level per image");
    let mut remaining: Vec<usize> = (0..images.len()).collect();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    while !remaining.is_empty() {
        remaining.sort_by_key(|&i| (levels[i].m as u64 + levels[i].n as u64, i));
        let seeds: Vec<usize> = remaining.iter().take(10).copied().collect();
        let seed_imgs: Vec<&Image> = seeds.iter().map(|&i| images[i]).collect();
        let round_cfg = DictConfig {
            seed: derive_seed(cfg.seed, &[0x9e97, groups.len() as u64]),
            ..cfg.clone()
        };
        let dict = learn_dictionary(&seed_imgs, &round_cfg)?;
        let deltas: Vec<f64> = remaining
            .par_iter()
            .map(|&i| reconstruct(images[i], &dict).map(|r| r.delta))
            .collect::<Result<_, _>>()?;
        let mut group = Vec::new();
        let mut rest = Vec::new();
        for (&i, &d) in remaining.iter().zip(&deltas) {
            if seeds.contains(&i) || d < xi {
                group.push(i);
            } else {
                rest.push(i);
            }
        }
        group.sort_unstable();
        groups.push(group);
        remaining = rest;
    }
    Ok(groups)
}

/// [`regroup_refs`] over owned `(Image, ScaleLevel)` pairs.
pub fn regroup_class(
    samples: &[(Image, ScaleLevel)],
    xi: f64,
    cfg: &DictConfig,
) -> Result<Vec<Vec<usize>>, BoundaryError> {
    let images: Vec<&Image> = samples.iter().map(|(i, _)| i).collect();
    let levels: Vec<ScaleLevel> = samples.iter().map(|(_, l)| *l).collect();
    regroup_refs(&images, &levels, xi, cfg)
}

/// Regroups every class of a labeled, scale-annotated sample set. Classes
/// keep their first-appearance order; group entries are indices into
/// `samples`. Classes are processed in parallel — each one's seed derives
/// from its position, so the outcome does not depend on scheduling.
pub fn regroup_dataset(
    samples: &[(String, Image, ScaleLevel)],
    xi: f64,
    cfg: &DictConfig,
) -> Result<Regrouping, BoundaryError> {
    let mut class_names: Vec<String> = Vec::new();
    for (c, _, _) in samples {
        if !class_names.contains(c) {
            class_names.push(c.clone());
        }
    }
    let classes = class_names
        .par_iter()
        .enumerate()
        .map(|(ci, name)| {
            let idx: Vec<usize> = samples
                .iter()
                .enumerate()
                .filter(|(_, (c, _, _))| c == name)
                .map(|(i, _)| i)
                .collect();
            let images: Vec<&Image> = idx.iter().map(|&i| &samples[i].1).collect();
            let levels: Vec<ScaleLevel> = idx.iter().map(|&i| samples[i].2).collect();
            let class_cfg =
                DictConfig { seed: derive_seed(cfg.seed, &[0xc1a5, ci as u64]), ..cfg.clone() };
            let local = regroup_refs(&images, &levels, xi, &class_cfg)?;
            let global: Vec<Vec<usize>> =
                local.iter().map(|g| g.iter().map(|&i| idx[i]).collect()).collect();
            Ok((name.clone(), global))
        })
        .collect::<Result<Vec<_>, BoundaryError>>()?;
    Ok(Regrouping { classes })
}

/// Writes `dict` as `DICT1`: magic, atom count, patch dimension, then the
/// atoms as 64-bit reals. The sparsity weight is not part of the format;
/// [`load_dictionary`] restores it as [`DEFAULT_LAMBDA`].
pub fn save_dictionary(dict: &Dictionary, path: &Path) -> Result<(), BoundaryError> {
    check_atoms(dict)?;
    let file = File::create(path).map_err(PersistError::from)?;
    let mut w = BufWriter::new(file);
    persist::write_magic(&mut w, "DICT1")?;
    persist::write_u32(&mut w, dict.atoms.len() as u32)?;
    persist::write_u32(&mut w, PATCH_DIM as u32)?;
    for atom in &dict.atoms {
        persist::write_f64_slice(&mut w, atom)?;
    }
    Ok(())
}

/// Reads a `DICT1` file written by [`save_dictionary`].
pub fn load_dictionary(path: &Path) -> Result<Dictionary, BoundaryError> {
    let file = File::open(path).map_err(PersistError::from)?;
    let mut r = BufReader::new(file);
    persist::read_magic(&mut r, "DICT1")?;
    let a = persist::read_u32(&mut r)? as usize;
    let dim = persist::read_u32(&mut r)? as usize;
    if dim != PATCH_DIM {
        return Err(BoundaryError::BadFile {
            path: path.display().to_string(),
            reason: format!("patch dimension {dim}, expected {PATCH_DIM}"),
        });
    }
    if a == 0 {
        return Err(BoundaryError::BadFile {
            path: path.display().to_string(),
            reason: "zero atoms".into(),
        });
    }
    let mut atoms = Vec::with_capacity(a);
    for _ in 0..a {
        atoms.push(persist::read_f64_vec(&mut r, PATCH_DIM)?);
    }
    Ok(Dictionary { atoms, lambda: DEFAULT_LAMBDA })
}
