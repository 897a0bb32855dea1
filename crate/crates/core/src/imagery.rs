//! Grayscale images and the resampling primitives the rest of the crate
//! builds on: bilinear resize, anisotropic image pyramids, gradient-norm
//! maps, patch extraction, and PNG/PGM file IO.
//!
//! Images hold intensities as `f64` in `[0, 1]`, row-major. The pyramid is
//! anisotropic: each axis carries its own downsizing exponent, so a level is
//! addressed by an exponent pair `(m, n)` rather than a single index.

use std::fmt;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

/// Errors for image construction, resampling, and IO.
#[derive(Debug, Error)]
pub enum ImageryError {
    #[error("image dimensions must be nonzero (got {width}x{height})")]
    ZeroDimension { width: usize, height: usize },
    #[error("pixel buffer length {got} does not match {width}x{height}")]
    BadLength { width: usize, height: usize, got: usize },
    #[error("intensity {value} at index {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("scale step must lie strictly between 0 and 1 (got {0})")]
    BadScaleStep(f64),
    #[error("pyramid is empty: base {width}x{height} is below min_dim {min_dim}")]
    EmptyPyramid { width: usize, height: usize, min_dim: usize },
    #[error("crop {x},{y} {width}x{height} exceeds image bounds {img_width}x{img_height}")]
    CropOutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
        img_width: usize,
        img_height: usize,
    },
    #[error("patch size {size} with stride {stride} does not fit in {width}x{height}")]
    PatchTooLarge { size: usize, stride: usize, width: usize, height: usize },
    #[error("unsupported image file {path}: {reason}")]
    Unsupported { path: String, reason: String },
    #[error("malformed PGM file {path}: {reason}")]
    MalformedPgm { path: String, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image decode error on {path}: {source}")]
    Decode {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

/// A grayscale image with intensities in `[0, 1]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    /// Builds an image from a row-major buffer, validating dimensions,
    /// length, and the `[0, 1]` intensity range.
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, ImageryError> {
        if width == 0 || height == 0 {
            return Err(ImageryError::ZeroDimension { width, height });
        }
        if data.len() != width * height {
            return Err(ImageryError::BadLength { width, height, got: data.len() });
        }
        for (i, &v) in data.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(ImageryError::OutOfRange { index: i, value: v });
            }
        }
        Ok(Self { width, height, data })
    }

    /// Builds an image by evaluating `f(x, y)`; values are clamped to `[0, 1]`.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self, ImageryError> {
        if width == 0 || height == 0 {
            return Err(ImageryError::ZeroDimension { width, height });
        }
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        Ok(Self { width, height, data })
    }

    /// A constant image.
    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self, ImageryError> {
        Self::new(width, height, vec![value.clamp(0.0, 1.0); width * height])
    }

    /// Converts 8-bit RGB samples using luma weights 0.299/0.587/0.114.
    /// Gray inputs (r == g == b) map exactly to `v / 255`.
    pub fn from_rgb8(
        width: usize,
        height: usize,
        rgb: &[u8],
    ) -> Result<Self, ImageryError> {
        if rgb.len() != width * height * 3 {
            return Err(ImageryError::BadLength { width, height, got: rgb.len() / 3 });
        }
        let mut data = Vec::with_capacity(width * height);
        for px in rgb.chunks_exact(3) {
            let (r, g, b) = (px[0], px[1], px[2]);
            let v = if r == g && g == b {
                f64::from(r) / 255.0
            } else {
                (0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b)) / 255.0
            };
            data.push(v.clamp(0.0, 1.0));
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Row-major pixel buffer.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        debug_assert!(x < self.width && y < self.height);
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn row(&self, y: usize) -> &[f64] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    /// Mean intensity.
    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Population standard deviation of intensities.
    pub fn stddev(&self) -> f64 {
        let mean = self.mean();
        let var = self
            .data
            .iter()
            .map(|v| {
                let d = v - mean;
                d * d
            })
            .sum::<f64>()
            / self.data.len() as f64;
        var.sqrt()
    }

    /// Copies out the `width x height` region whose top-left corner is `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> Result<Image, ImageryError> {
        if width == 0 || height == 0 {
            return Err(ImageryError::ZeroDimension { width, height });
        }
        if x + width > self.width || y + height > self.height {
            return Err(ImageryError::CropOutOfBounds {
                x,
                y,
                width,
                height,
                img_width: self.width,
                img_height: self.height,
            });
        }
        let mut data = Vec::with_capacity(width * height);
        for row in y..y + height {
            let start = row * self.width + x;
            data.extend_from_slice(&self.data[start..start + width]);
        }
        Ok(Image { width, height, data })
    }

    /// Tiles the image periodically to cover `width x height`, with the tile
    /// origin at (0, 0).
    pub fn tiled(&self, width: usize, height: usize) -> Result<Image, ImageryError> {
        if width == 0 || height == 0 {
            return Err(ImageryError::ZeroDimension { width, height });
        }
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            let src_row = self.row(y % self.height);
            for x in 0..width {
                data.push(src_row[x % self.width]);
            }
        }
        Ok(Image { width, height, data })
    }
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Bilinear resize to `new_width x new_height`. Output pixel centers are
/// mapped to input pixel-center coordinates, with clamping at the borders.
/// Resizing to the original size returns a bit-identical copy.
pub fn resize(img: &Image, new_width: usize, new_height: usize) -> Result<Image, ImageryError> {
    if new_width == 0 || new_height == 0 {
        return Err(ImageryError::ZeroDimension { width: new_width, height: new_height });
    }
    if new_width == img.width && new_height == img.height {
        return Ok(img.clone());
    }
    let sx = img.width as f64 / new_width as f64;
    let sy = img.height as f64 / new_height as f64;
    let mut data = Vec::with_capacity(new_width * new_height);
    for oy in 0..new_height {
        let src_y = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f64);
        let y0 = src_y.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let fy = src_y - y0 as f64;
        for ox in 0..new_width {
            let src_x = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f64);
            let x0 = src_x.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let fx = src_x - x0 as f64;
            let top = lerp(img.get(x0, y0), img.get(x1, y0), fx);
            let bot = lerp(img.get(x0, y1), img.get(x1, y1), fx);
            data.push(lerp(top, bot, fy).clamp(0.0, 1.0));
        }
    }
    Ok(Image { width: new_width, height: new_height, data })
}

/// An exponent pair addressing one pyramid level: the base is downsized by
/// `step^m` along x and `step^n` along y.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ScaleLevel {
    pub m: u32,
    pub n: u32,
}

impl ScaleLevel {
    pub fn new(m: u32, n: u32) -> Self {
        Self { m, n }
    }

    /// Area shrink factor `step^(m+n)`; the least-downsized level has the
    /// largest value.
    pub fn area_factor(&self, step: f64) -> f64 {
        step.powi(self.m as i32 + self.n as i32)
    }
}

impl fmt::Display for ScaleLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.m, self.n)
    }
}

/// Downsized dimension `floor(base * step^e)`.
pub fn scaled_dim(base: usize, step: f64, e: u32) -> usize {
    (base as f64 * step.powi(e as i32)).floor() as usize
}

/// Largest exponent (inclusive) for which `scaled_dim` stays at or above
/// `min_dim`, or `None` if even exponent 0 falls below it.
fn max_exponent(base: usize, step: f64, min_dim: usize) -> Option<u32> {
    if scaled_dim(base, step, 0) < min_dim {
        return None;
    }
    let mut e = 0u32;
    while scaled_dim(base, step, e + 1) >= min_dim {
        e += 1;
    }
    Some(e)
}

/// An anisotropic pyramid: every exponent pair `(m, n)` whose downsized
/// dimensions both stay at or above `min_dim`.
#[derive(Debug, Clone)]
pub struct Pyramid {
    step: f64,
    min_dim: usize,
    m_max: u32,
    n_max: u32,
    levels: Vec<Image>,
}

impl Pyramid {
    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn min_dim(&self) -> usize {
        self.min_dim
    }

    /// Largest valid x exponent (inclusive).
    pub fn m_max(&self) -> u32 {
        self.m_max
    }

    /// Largest valid y exponent (inclusive).
    pub fn n_max(&self) -> u32 {
        self.n_max
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn level(&self, m: u32, n: u32) -> Option<&Image> {
        if m > self.m_max || n > self.n_max {
            return None;
        }
        Some(&self.levels[(m as usize) * (self.n_max as usize + 1) + n as usize])
    }

    /// Iterates levels in row-major exponent order: (0,0), (0,1), ...
    pub fn iter(&self) -> impl Iterator<Item = (ScaleLevel, &Image)> {
        let n_count = self.n_max as usize + 1;
        self.levels.iter().enumerate().map(move |(i, img)| {
            let m = (i / n_count) as u32;
            let n = (i % n_count) as u32;
            (ScaleLevel::new(m, n), img)
        })
    }
}

/// Builds the anisotropic pyramid of `img` with per-axis shrink `step`
/// (strictly between 0 and 1), keeping every level whose width and height
/// both stay at or above `min_dim`. Level (0, 0) is a bit-identical copy of
/// the input. Each level is resampled directly from the base image.
pub fn build_pyramid(img: &Image, step: f64, min_dim: usize) -> Result<Pyramid, ImageryError> {
    if !(step > 0.0 && step < 1.0) {
        return Err(ImageryError::BadScaleStep(step));
    }
    let min_dim = min_dim.max(1);
    let (m_max, n_max) = match (
        max_exponent(img.width, step, min_dim),
        max_exponent(img.height, step, min_dim),
    ) {
        (Some(m), Some(n)) => (m, n),
        _ => {
            return Err(ImageryError::EmptyPyramid {
                width: img.width,
                height: img.height,
                min_dim,
            })
        }
    };
    let widths: Vec<usize> = (0..=m_max).map(|m| scaled_dim(img.width, step, m)).collect();
    let heights: Vec<usize> = (0..=n_max).map(|n| scaled_dim(img.height, step, n)).collect();
    let mut levels = Vec::with_capacity(widths.len() * heights.len());
    for &w in &widths {
        for &h in &heights {
            levels.push(resize(img, w, h)?);
        }
    }
    Ok(Pyramid { step, min_dim, m_max, n_max, levels })
}

/// Per-pixel gradient magnitude, normalized to `[0, 1]`.
///
/// Central differences in the interior, one-sided differences at the
/// borders; the magnitude `sqrt(gx^2 + gy^2)` is divided by `sqrt(2)` (the
/// largest value attainable on `[0, 1]` data) and clamped.
pub fn gradient_norm(img: &Image) -> Image {
    let (w, h) = (img.width, img.height);
    let mut data = vec![0.0; w * h];
    let inv_sqrt2 = 1.0 / std::f64::consts::SQRT_2;
    for y in 0..h {
        for x in 0..w {
            let gx = if w == 1 {
                0.0
            } else if x == 0 {
                img.get(1, y) - img.get(0, y)
            } else if x == w - 1 {
                img.get(w - 1, y) - img.get(w - 2, y)
            } else {
                (img.get(x + 1, y) - img.get(x - 1, y)) * 0.5
            };
            let gy = if h == 1 {
                0.0
            } else if y == 0 {
                img.get(x, 1) - img.get(x, 0)
            } else if y == h - 1 {
                img.get(x, h - 1) - img.get(x, h - 2)
            } else {
                (img.get(x, y + 1) - img.get(x, y - 1)) * 0.5
            };
            data[y * w + x] = ((gx * gx + gy * gy).sqrt() * inv_sqrt2).clamp(0.0, 1.0);
        }
    }
    Image { width: w, height: h, data }
}

/// Extracts square patches of side `size` at the given stride, flattened
/// row-major, enumerating positions top-to-bottom then left-to-right within
/// each row of positions.
pub fn extract_patches(
    img: &Image,
    size: usize,
    stride: usize,
) -> Result<Vec<Vec<f64>>, ImageryError> {
    if size == 0 || stride == 0 || size > img.width || size > img.height {
        return Err(ImageryError::PatchTooLarge {
            size,
            stride,
            width: img.width,
            height: img.height,
        });
    }
    let mut out = Vec::new();
    let mut y = 0;
    while y + size <= img.height {
        let mut x = 0;
        while x + size <= img.width {
            let mut patch = Vec::with_capacity(size * size);
            for dy in 0..size {
                let start = (y + dy) * img.width + x;
                patch.extend_from_slice(&img.data[start..start + size]);
            }
            out.push(patch);
            x += stride;
        }
        y += stride;
    }
    Ok(out)
}

/// Loads a PNG or binary PGM file by extension.
pub fn load_image(path: &Path) -> Result<Image, ImageryError> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    match ext.as_str() {
        "pgm" => load_pgm(path),
        "png" => {
            let dynimg = image::open(path).map_err(|source| ImageryError::Decode {
                path: path.display().to_string(),
                source,
            })?;
            let rgb = dynimg.to_rgb8();
            Image::from_rgb8(rgb.width() as usize, rgb.height() as usize, rgb.as_raw())
        }
        other => Err(ImageryError::Unsupported {
            path: path.display().to_string(),
            reason: format!("extension {other:?}; expected png or pgm"),
        }),
    }
}

/// Saves as 8-bit grayscale PNG (intensities rounded to 0..=255).
pub fn save_png(img: &Image, path: &Path) -> Result<(), ImageryError> {
    let buf: Vec<u8> = img.data.iter().map(|v| (v * 255.0).round() as u8).collect();
    let gray = image::GrayImage::from_raw(img.width as u32, img.height as u32, buf)
        .expect("buffer length matches dimensions");
    gray.save(path).map_err(|source| ImageryError::Decode {
        path: path.display().to_string(),
        source,
    })
}

/// Saves as binary PGM (P5, maxval 255).
pub fn save_pgm(img: &Image, path: &Path) -> Result<(), ImageryError> {
    let file = std::fs::File::create(path).map_err(|source| ImageryError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<std::fs::File>| -> std::io::Result<()> {
        write!(w, "P5\n{} {}\n255\n", img.width, img.height)?;
        let bytes: Vec<u8> = img.data.iter().map(|v| (v * 255.0).round() as u8).collect();
        w.write_all(&bytes)
    };
    write(&mut w).map_err(|source| ImageryError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads a binary PGM (P5) file with maxval at most 255.
pub fn load_pgm(path: &Path) -> Result<Image, ImageryError> {
    let bad = |reason: &str| ImageryError::MalformedPgm {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let file = std::fs::File::open(path).map_err(|source| ImageryError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = BufReader::new(file);

    // Header tokens may be separated by whitespace and '#' comments.
    let mut header_tokens = Vec::new();
    let mut byte = [0u8; 1];
    let mut token = String::new();
    let mut in_comment = false;
    while header_tokens.len() < 4 {
        let n = reader.read(&mut byte).map_err(|source| ImageryError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if n == 0 {
            return Err(bad("unexpected end of header"));
        }
        let c = byte[0] as char;
        if in_comment {
            if c == '\n' {
                in_comment = false;
            }
            continue;
        }
        if c == '#' {
            in_comment = true;
            continue;
        }
        if c.is_ascii_whitespace() {
            if !token.is_empty() {
                header_tokens.push(std::mem::take(&mut token));
            }
            continue;
        }
        token.push(c);
    }
    if header_tokens[0] != "P5" {
        return Err(bad("missing P5 magic"));
    }
    let width: usize = header_tokens[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = header_tokens[2].parse().map_err(|_| bad("bad height"))?;
    let maxval: u32 = header_tokens[3].parse().map_err(|_| bad("bad maxval"))?;
    if maxval == 0 || maxval > 255 {
        return Err(bad("maxval must be 1..=255"));
    }
    let mut bytes = vec![0u8; width * height];
    reader
        .read_exact(&mut bytes)
        .map_err(|_| bad("truncated pixel data"))?;
    let data: Vec<f64> = bytes.iter().map(|&b| f64::from(b) / f64::from(maxval)).collect();
    Image::new(width, height, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_to_same_size_is_bit_identical() {
        let img = Image::from_fn(7, 5, |x, y| ((x * 31 + y * 17) % 11) as f64 / 10.0).unwrap();
        let out = resize(&img, 7, 5).unwrap();
        assert_eq!(img.data(), out.data(), "identity resize must not touch pixels");
    }

    #[test]
    fn resize_checkerboard_2x2_to_1x1_averages() {
        let img = Image::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = resize(&img, 1, 1).unwrap();
        assert_eq!(out.get(0, 0), 0.5, "single output pixel must average all four inputs");
    }

    #[test]
    fn resize_keeps_constant_images_constant() {
        let img = Image::constant(10, 10, 0.37).unwrap();
        for (w, h) in [(3, 9), (17, 4), (10, 10), (1, 1)] {
            let out = resize(&img, w, h).unwrap();
            for &v in out.data() {
                assert_eq!(v, 0.37, "constant image resized to {w}x{h} changed value to {v}");
            }
        }
    }

    #[test]
    fn pyramid_level_counts_match_the_floor_rule() {
        let img = Image::constant(100, 100, 0.5).unwrap();
        let pyr = build_pyramid(&img, 0.95, 10).unwrap();
        assert_eq!(pyr.m_max(), 44, "100 * 0.95^44 ≈ 10.47 is the last width >= 10");
        assert_eq!(pyr.n_max(), 44);
        assert_eq!(pyr.len(), 45 * 45);
        // Level (0,0) is the untouched base.
        assert_eq!(pyr.level(0, 0).unwrap().data(), img.data());
        // Deepest level dimensions.
        let deepest = pyr.level(44, 44).unwrap();
        assert_eq!((deepest.width(), deepest.height()), (10, 10));
    }

    #[test]
    fn pyramid_grid_matches_exhaustive_enumeration() {
        let img = Image::constant(64, 48, 0.2).unwrap();
        let pyr = build_pyramid(&img, 0.9, 10).unwrap();
        let mut expected = 0usize;
        for m in 0..200u32 {
            for n in 0..200u32 {
                if scaled_dim(64, 0.9, m) >= 10 && scaled_dim(48, 0.9, n) >= 10 {
                    expected += 1;
                }
            }
        }
        assert_eq!(pyr.len(), expected, "level grid must cover exactly the valid exponent pairs");
    }

    #[test]
    fn pyramid_rejects_too_small_base_and_bad_step() {
        let img = Image::constant(8, 8, 0.5).unwrap();
        assert!(matches!(
            build_pyramid(&img, 0.95, 10),
            Err(ImageryError::EmptyPyramid { .. })
        ));
        assert!(matches!(build_pyramid(&img, 1.0, 4), Err(ImageryError::BadScaleStep(_))));
        assert!(matches!(build_pyramid(&img, 0.0, 4), Err(ImageryError::BadScaleStep(_))));
    }

    #[test]
    fn gradient_norm_is_zero_on_constant_images() {
        let img = Image::constant(12, 9, 0.8).unwrap();
        let g = gradient_norm(&img);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_norm_of_horizontal_ramp_is_flat_inside() {
        let w = 16usize;
        let img = Image::from_fn(w, 8, |x, _| x as f64 / (w - 1) as f64).unwrap();
        let g = gradient_norm(&img);
        let expected = (1.0 / (w - 1) as f64) / std::f64::consts::SQRT_2;
        for y in 1..7 {
            for x in 1..w - 1 {
                let v = g.get(x, y);
                assert!(
                    (v - expected).abs() < 1e-12,
                    "interior gradient at ({x},{y}) = {v}, expected {expected}"
                );
            }
        }
    }

    #[test]
    fn gradient_norm_stays_in_unit_range_on_extreme_edges() {
        // Alternating 0/1 columns produce the strongest possible response.
        let img = Image::from_fn(10, 10, |x, _| (x % 2) as f64).unwrap();
        let g = gradient_norm(&img);
        for &v in g.data() {
            assert!((0.0..=1.0).contains(&v), "gradient value {v} escaped [0,1]");
        }
    }

    #[test]
    fn extract_patches_enumerates_positions_row_major() {
        let img = Image::from_fn(20, 20, |x, y| ((x + y) % 2) as f64).unwrap();
        let patches = extract_patches(&img, 16, 4).unwrap();
        assert_eq!(patches.len(), 4, "20x20 with size 16 stride 4 has a 2x2 position grid");
        for p in &patches {
            assert_eq!(p.len(), 256);
        }
        // First patch starts at (0,0): element (0,0) is (0+0)%2 = 0.
        assert_eq!(patches[0][0], 0.0);
        // Second patch starts at (4,0): element (0,0) is (4+0)%2 = 0.
        assert_eq!(patches[1][0], 0.0);
    }

    #[test]
    fn extract_patches_rejects_oversized_requests() {
        let img = Image::constant(8, 8, 0.5).unwrap();
        assert!(extract_patches(&img, 9, 1).is_err());
        assert!(extract_patches(&img, 4, 0).is_err());
    }

    #[test]
    fn pgm_round_trip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        let img = Image::from_fn(13, 7, |x, y| ((x * 19 + y * 7) % 256) as f64 / 255.0).unwrap();
        save_pgm(&img, &path).unwrap();
        let back = load_pgm(&path).unwrap();
        assert_eq!((back.width(), back.height()), (13, 7));
        assert_eq!(back.data(), img.data(), "values on the 1/255 grid must round-trip exactly");
    }

    #[test]
    fn pgm_reader_accepts_comments_and_rejects_wide_maxval() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        std::fs::write(&path, b"P5 # comment\n# another\n2 2\n255\n\x00\x40\x80\xff").unwrap();
        let img = load_pgm(&path).unwrap();
        assert_eq!(img.get(1, 1), 1.0);
        let bad = dir.path().join("w.pgm");
        std::fs::write(&bad, b"P5\n1 1\n65535\n\x00\x00").unwrap();
        assert!(load_pgm(&bad).is_err(), "16-bit PGM support is not claimed");
    }

    #[test]
    fn png_round_trip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let img = Image::from_fn(9, 11, |x, y| ((x * 37 + y * 5) % 256) as f64 / 255.0).unwrap();
        save_png(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn tiled_covers_and_repeats() {
        let img = Image::new(2, 1, vec![0.25, 0.75]).unwrap();
        let t = img.tiled(5, 2).unwrap();
        assert_eq!(t.row(0), &[0.25, 0.75, 0.25, 0.75, 0.25]);
        assert_eq!(t.row(1), t.row(0));
    }
}
