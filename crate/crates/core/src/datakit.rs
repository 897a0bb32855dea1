//! Synthetic texture data: five deterministic texture families, scale-banded
//! dataset synthesis by downsizing-and-tiling, manifest files, and stratified
//! train/test splits.
//!
//! Every generator is a pure function of its parameters, so datasets are
//! reproducible bit for bit from a seed. The flagship benchmark built here,
//! `SynTex-5x3`, covers the five families at three designed scale bands with
//! 60 images per class.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::imagery::{self, Image, ImageryError, Pyramid, ScaleLevel};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown texture family {0:?}")]
    UnknownFamily(String),
    #[error("invalid texture parameter {name} = {value}")]
    BadParam { name: &'static str, value: f64 },
    #[error("manifest {path}: {reason}")]
    BadManifest { path: String, reason: String },
    #[error("split fraction {0} must lie in [0, 1]")]
    BadFraction(f64),
    #[error(transparent)]
    Imagery(#[from] ImageryError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

/// Mixes a master seed with stream identifiers so that derived generators
/// are decorrelated but fully determined by the master seed.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    // splitmix64 steps over the master and each part.
    let mut z = master;
    let mut mix = |v: u64| {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(v);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    };
    mix(0);
    for &p in parts {
        mix(p);
    }
    z
}

/// The five deterministic texture families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    /// Pure sine grating along x.
    Sinusoid,
    /// Square-wave grating along x: alternating bright and dark cells.
    Checkerboard,
    /// Skewed grating along x: a sharp climb out of a dark mortar groove,
    /// then a gentle fall back along the bright face.
    Brick,
    /// The brick skew mirrored along x: soft-edged bright blobs that each
    /// end in one crisp flank.
    BlobNoise,
    /// The brick lean run down the page instead of across (structured
    /// along y).
    Stripe,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Sinusoid,
        Family::Checkerboard,
        Family::Brick,
        Family::BlobNoise,
        Family::Stripe,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Family::Sinusoid => "sinusoid",
            Family::Checkerboard => "checkerboard",
            Family::Brick => "brick",
            Family::BlobNoise => "blobs",
            Family::Stripe => "stripe",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, DataError> {
        Family::ALL
            .iter()
            .copied()
            .find(|f| f.name() == name)
            .ok_or_else(|| DataError::UnknownFamily(name.to_string()))
    }

    /// Axes (x, y) along which the rendering carries its texel period at
    /// orientation zero, i.e. along which a scale estimate is meaningful.
    /// The bar family runs along y; every other family runs along x and is
    /// constant along y, so the flat axis carries no scale at all.
    pub fn structured_axes(&self) -> (bool, bool) {
        match self {
            Family::Stripe => (false, true),
            _ => (true, false),
        }
    }
}

/// Parameters for one generated base texture.
#[derive(Debug, Clone)]
pub struct TextureParams {
    pub family: Family,
    pub size: usize,
    /// Characteristic period in pixels (one full texture element).
    pub texel: f64,
    /// Pattern rotation in radians.
    pub orientation: f64,
    /// Peak-to-peak amplitude around mid-gray, in [0, 1].
    pub contrast: f64,
    /// Translation of the pattern, as a fraction of one period per axis.
    pub phase: (f64, f64),
    /// Reserved for families with stochastic structure; the current
    /// renderings are fully determined by the other fields.
    pub seed: u64,
}

impl TextureParams {
    pub fn new(family: Family, size: usize, texel: f64) -> Self {
        Self {
            family,
            size,
            texel,
            orientation: 0.0,
            contrast: 0.8,
            phase: (0.0, 0.0),
            seed: 0,
        }
    }
}

fn validate(p: &TextureParams) -> Result<(), DataError> {
    if p.size == 0 {
        return Err(DataError::BadParam { name: "size", value: 0.0 });
    }
    if !(p.texel >= 2.0 && p.texel <= p.size as f64) {
        return Err(DataError::BadParam { name: "texel", value: p.texel });
    }
    if !(0.0..=1.0).contains(&p.contrast) {
        return Err(DataError::BadParam { name: "contrast", value: p.contrast });
    }
    Ok(())
}

/// Generates one base texture. Deterministic in all parameters; contrast 0
/// yields a constant mid-gray image for every family.
pub fn generate_texture(p: &TextureParams) -> Result<Image, DataError> {
    validate(p)?;
    let (cos_t, sin_t) = (p.orientation.cos(), p.orientation.sin());
    let t = p.texel;
    let (px, py) = (p.phase.0 * t, p.phase.1 * t);
    let tau = std::f64::consts::TAU;
    // Every family is a smooth periodic waveform along one structured axis,
    // with the texel as its period, and is exactly constant along the other
    // axis. Three properties carry the benchmark. Smoothness keeps the
    // waveform recognizable after repeated bilinear resampling, so a
    // downsized copy still reads as the same family. Strict monotonicity
    // between isolated extrema (no flat plateau anywhere; see the swell
    // terms below) means the local intensity order is informative at every
    // pixel, so order-based codes never collapse to a handful of values.
    // Constancy along the cross axis means a resize there reproduces the
    // image exactly, so the period-matched pyramid level agrees across the
    // whole frame. The families differ in waveform shape, which is what the
    // classifiers learn.
    let along_y = matches!(p.family, Family::Stripe);
    let contrast = p.contrast;
    let img = Image::from_fn(p.size, p.size, |x, y| {
        let xf = x as f64;
        let yf = y as f64;
        let u = xf * cos_t + yf * sin_t + px;
        let v = -xf * sin_t + yf * cos_t + py;
        let th = tau * if along_y { v / t } else { u / t };
        0.5 + contrast * (waveform(p.family, th) - 0.5)
    })?;
    Ok(img)
}

/// One period of each family's profile, mapping an angle (one period = tau)
/// to a value in [0, 1]. Every shape is smooth, swings through most of the
/// range once per period, and keeps its gradient alive away from isolated
/// extrema, so downsized copies remain recognizable and local intensity
/// order stays informative at every pixel.
fn waveform(family: Family, th: f64) -> f64 {
    match family {
        Family::Sinusoid => 0.5 + 0.5 * th.sin(),
        // A sine pushed toward a square wave, with soft saturated tops.
        Family::Checkerboard => 0.5 + 0.5 * (2.2 * th.sin()).tanh() / f64::tanh(2.2),
        // Skewed wave: a sharp climb out of the dark mortar groove, then a
        // gentle fall along the bright face; rise and fall are asymmetric.
        Family::Brick => 0.5 + 0.5 * (th.sin() + 0.35 * (2.0 * th).sin()) / 1.35,
        // The brick lean mirrored: a gentle climb to the bright crest, then
        // a sharp drop, giving soft-edged blobs with one crisp flank.
        Family::BlobNoise => 0.5 + 0.5 * (th.sin() - 0.35 * (2.0 * th).sin()) / 1.35,
        // The same lean as brick, run down the page instead of across.
        Family::Stripe => 0.5 + 0.5 * (th.sin() + 0.35 * (2.0 * th).sin()) / 1.35,
    }
}

/// Downsizes `base` to pyramid level `(m, n)`, tiles the result to cover the
/// base frame, and crops back to the base size at a seeded random offset.
/// Level (0, 0) reproduces the base bit for bit.
pub fn synthesize_at(
    base: &Image,
    step: f64,
    level: ScaleLevel,
    rng: &mut impl Rng,
) -> Result<Image, DataError> {
    let w = imagery::scaled_dim(base.width(), step, level.m).max(1);
    let h = imagery::scaled_dim(base.height(), step, level.n).max(1);
    let small = imagery::resize(base, w, h)?;
    tile_and_crop(&small, base.width(), base.height(), rng)
}

fn tile_and_crop(
    small: &Image,
    out_w: usize,
    out_h: usize,
    rng: &mut impl Rng,
) -> Result<Image, DataError> {
    let canvas_w = out_w.div_ceil(small.width()) * small.width();
    let canvas_h = out_h.div_ceil(small.height()) * small.height();
    let canvas = small.tiled(canvas_w, canvas_h)?;
    let max_x = canvas_w - out_w;
    let max_y = canvas_h - out_h;
    let ox = if max_x == 0 { 0 } else { rng.random_range(0..=max_x) };
    let oy = if max_y == 0 { 0 } else { rng.random_range(0..=max_y) };
    Ok(canvas.crop(ox, oy, out_w, out_h)?)
}

/// Synthesizes the full scale-variation set of a base texture: one tiled,
/// cropped image per pyramid level (downsizing limit 10 pixels), each tagged
/// with its exponent pair. The output count equals the pyramid level count.
pub fn synthesize_sforrest(
    base: &Image,
    step: f64,
    seed: u64,
) -> Result<Vec<(ScaleLevel, Image)>, DataError> {
    let pyr: Pyramid = imagery::build_pyramid(base, step, 10)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5f00]));
    let mut out = Vec::with_capacity(pyr.len());
    for (level, img) in pyr.iter() {
        out.push((level, tile_and_crop(img, base.width(), base.height(), &mut rng)?));
    }
    Ok(out)
}

/// Which half of the data a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One dataset sample as recorded in the manifest.
#[derive(Debug, Clone)]
pub struct ManifestRow {
    /// Image path, relative to the manifest's directory.
    pub path: String,
    pub class: String,
    /// Downsizing exponents the sample was synthesized at.
    pub level: ScaleLevel,
    /// Designed subcategory (scale band) when known.
    pub subcategory: Option<u32>,
    pub split: Split,
}

/// Writes a manifest CSV with columns `path,class,m,n,subcategory,split`.
pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["path", "class", "m", "n", "subcategory", "split"])?;
    for r in rows {
        w.write_record([
            r.path.as_str(),
            r.class.as_str(),
            &r.level.m.to_string(),
            &r.level.n.to_string(),
            &r.subcategory.map(|s| s.to_string()).unwrap_or_default(),
            r.split.name(),
        ])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Reads a manifest CSV written by [`write_manifest`].
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, DataError> {
    let bad = |reason: String| DataError::BadManifest {
        path: path.display().to_string(),
        reason,
    };
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let expected = ["path", "class", "m", "n", "subcategory", "split"];
    let idx: Vec<usize> = expected
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h == *name)
                .ok_or_else(|| bad(format!("missing column {name:?}")))
        })
        .collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(idx[i]).unwrap_or("").to_string();
        let m: u32 = field(2)
            .parse()
            .map_err(|_| bad(format!("row {}: bad m {:?}", line + 2, field(2))))?;
        let n: u32 = field(3)
            .parse()
            .map_err(|_| bad(format!("row {}: bad n {:?}", line + 2, field(3))))?;
        let sub = field(4);
        let subcategory = if sub.is_empty() {
            None
        } else {
            Some(sub.parse().map_err(|_| bad(format!("row {}: bad subcategory {sub:?}", line + 2)))?)
        };
        let split = match field(5).as_str() {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(bad(format!("row {}: bad split {other:?}", line + 2))),
        };
        rows.push(ManifestRow {
            path: field(0),
            class: field(1),
            level: ScaleLevel::new(m, n),
            subcategory,
            split,
        });
    }
    if rows.is_empty() {
        return Err(bad("manifest has no data rows".into()));
    }
    Ok(rows)
}

/// Assigns train/test splits in place, stratified by class and, when
/// present, by designed subcategory within the class. Per-class train counts
/// land within one sample of `train_fraction` times the class size.
pub fn make_split(
    rows: &mut [ManifestRow],
    train_fraction: f64,
    seed: u64,
) -> Result<(), DataError> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(DataError::BadFraction(train_fraction));
    }
    let mut classes: Vec<String> = rows.iter().map(|r| r.class.clone()).collect();
    classes.sort();
    classes.dedup();
    for class in &classes {
        let class_idx: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].class == *class).collect();
        let class_target = (train_fraction * class_idx.len() as f64).round() as usize;

        // Group by subcategory (one group when absent), keep group order stable.
        let mut groups: Vec<(Option<u32>, Vec<usize>)> = Vec::new();
        for &i in &class_idx {
            let key = rows[i].subcategory;
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, v)) => v.push(i),
                None => groups.push((key, vec![i])),
            }
        }
        groups.sort_by_key(|(k, _)| *k);

        // Largest-remainder allocation of the class target across groups.
        let mut alloc: Vec<usize> = Vec::with_capacity(groups.len());
        let mut fracs: Vec<(usize, f64)> = Vec::new();
        let mut assigned = 0usize;
        for (gi, (_, members)) in groups.iter().enumerate() {
            let exact = class_target as f64 * members.len() as f64 / class_idx.len() as f64;
            let base = exact.floor() as usize;
            alloc.push(base.min(members.len()));
            assigned += alloc[gi];
            fracs.push((gi, exact - base as f64));
        }
        fracs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let mut remaining = class_target.saturating_sub(assigned);
        for &(gi, _) in &fracs {
            if remaining == 0 {
                break;
            }
            if alloc[gi] < groups[gi].1.len() {
                alloc[gi] += 1;
                remaining -= 1;
            }
        }

        for (gi, (_, members)) in groups.iter().enumerate() {
            let mut order = members.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[
                0x5117,
                class.bytes().fold(0u64, |a, b| a.wrapping_mul(31).wrapping_add(b as u64)),
                gi as u64,
            ]));
            // Fisher-Yates on the member list.
            for i in (1..order.len()).rev() {
                let j = rng.random_range(0..=i);
                order.swap(i, j);
            }
            for (k, &i) in order.iter().enumerate() {
                rows[i].split = if k < alloc[gi] { Split::Train } else { Split::Test };
            }
        }
    }
    Ok(())
}

/// Per-class metadata that downstream stages need: the base texel period.
pub fn write_meta(path: &Path, texels: &[(String, f64)]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["class", "texel"])?;
    for (class, texel) in texels {
        w.write_record([class.as_str(), &texel.to_string()])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Reads the per-class texel metadata written next to a manifest.
pub fn read_meta(path: &Path) -> Result<Vec<(String, f64)>, DataError> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let class = rec.get(0).unwrap_or("").to_string();
        let texel: f64 = rec.get(1).unwrap_or("").parse().map_err(|_| DataError::BadManifest {
            path: path.display().to_string(),
            reason: format!("bad texel for class {class:?}"),
        })?;
        out.push((class, texel));
    }
    Ok(out)
}

/// Configuration for the `SynTex-5x3` benchmark builder.
#[derive(Debug, Clone)]
pub struct SyntexConfig {
    pub size: usize,
    /// Base texel period in pixels. The default, 384/23, makes the period
    /// land within 0.06 px of the 8-px search window at the pyramid level
    /// that undoes each band exponent (floor-quantized level dimensions make
    /// exact coincidence at every exponent impossible; this texel centers the
    /// residual over all band exponents, and hits 8.0 px exactly at level 14,
    /// whose 96-px frame shrinks to 46 px).
    pub texel: f64,
    /// Inclusive downsizing-exponent ranges, one per scale band.
    pub bands: Vec<(u32, u32)>,
    pub per_band: usize,
    /// Maximum |n - m| jitter between the two axis exponents.
    pub anisotropy: u32,
    pub step: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SyntexConfig {
    fn default() -> Self {
        Self {
            size: 96,
            texel: 384.0 / 23.0,
            bands: vec![(2, 5), (8, 11), (14, 17)],
            per_band: 20,
            anisotropy: 1,
            step: 0.95,
            train_fraction: 0.5,
            seed: 7,
        }
    }
}

/// Builds the benchmark into `out_dir`: PNG images under `images/`, a
/// `manifest.csv` with designed scale bands as subcategories and a
/// stratified train/test split, and a `meta.csv` with per-class texels.
/// Returns the manifest rows.
pub fn build_syntex(out_dir: &Path, cfg: &SyntexConfig) -> Result<Vec<ManifestRow>, DataError> {
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(io_err(&images_dir))?;
    let mut rows = Vec::new();
    for (ci, family) in Family::ALL.iter().enumerate() {
        for (band, &(lo, hi)) in cfg.bands.iter().enumerate() {
            for idx in 0..cfg.per_band {
                let img_seed = derive_seed(cfg.seed, &[ci as u64, band as u64, idx as u64]);
                let mut rng = ChaCha8Rng::seed_from_u64(img_seed);
                let mut params = TextureParams::new(*family, cfg.size, cfg.texel);
                // Images of one class vary through phase, contrast, and
                // scale level, like repeated photographs of one material.
                params.phase = (rng.random::<f64>(), rng.random::<f64>());
                params.contrast = 0.7 + 0.25 * rng.random::<f64>();
                let m = rng.random_range(lo..=hi);
                let jitter = rng.random_range(0..=2 * cfg.anisotropy) as i64 - cfg.anisotropy as i64;
                let n = (m as i64 + jitter).clamp(lo as i64, hi as i64) as u32;
                let base = generate_texture(&params)?;
                let img = synthesize_at(&base, cfg.step, ScaleLevel::new(m, n), &mut rng)?;
                let file = format!("{}_{band}_{idx:02}.png", family.name());
                imagery::save_png(&img, &images_dir.join(&file))?;
                rows.push(ManifestRow {
                    path: format!("images/{file}"),
                    class: family.name().to_string(),
                    level: ScaleLevel::new(m, n),
                    subcategory: Some(band as u32),
                    split: Split::Test,
                });
            }
        }
    }
    make_split(&mut rows, cfg.train_fraction, derive_seed(cfg.seed, &[0x511]))?;
    write_manifest(&out_dir.join("manifest.csv"), &rows)?;
    let texels: Vec<(String, f64)> = Family::ALL
        .iter()
        .map(|f| (f.name().to_string(), cfg.texel))
        .collect();
    write_meta(&out_dir.join("meta.csv"), &texels)?;
    Ok(rows)
}
