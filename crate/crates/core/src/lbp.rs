//! Local binary patterns with 8 neighbors at radius 1, the uniform-pattern
//! histogram built from them, and histogram-intersection similarity.
//!
//! The neighbor ring is sampled in a fixed circular order starting at east
//! and proceeding counter-clockwise. The four axis-aligned neighbors fall on
//! pixel centers; the four diagonal samples lie at distance 1 along the
//! diagonals and are bilinearly interpolated. A neighbor contributes a 1 bit
//! when its value is greater than or equal to the center value, so adding a
//! constant or rescaling intensities by a positive factor leaves every code
//! unchanged.

use std::path::Path;
use std::sync::OnceLock;

use thiserror::Error;

use crate::imagery::Image;

#[derive(Debug, Error)]
pub enum LbpError {
    #[error("image {width}x{height} is too small for radius-1 codes (need at least 3x3)")]
    ImageTooSmall { width: usize, height: usize },
    #[error("histogram is not L1-normalized (sum = {sum})")]
    Unnormalized { sum: f64 },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Number of histogram bins: 58 uniform codes plus one joint non-uniform bin.
pub const BINS: usize = 59;

/// Index of the joint non-uniform bin.
pub const NONUNIFORM_BIN: usize = 58;

const SQRT1_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Neighbor offsets in sampling order: east first, counter-clockwise.
/// Diagonal entries are unit-distance points, not pixel centers.
const OFFSETS: [(f64, f64); 8] = [
    (1.0, 0.0),
    (SQRT1_2, -SQRT1_2),
    (0.0, -1.0),
    (-SQRT1_2, -SQRT1_2),
    (-1.0, 0.0),
    (-SQRT1_2, SQRT1_2),
    (0.0, 1.0),
    (SQRT1_2, SQRT1_2),
];

/// Code from a center value and 8 already-sampled neighbor values, in ring
/// order. Bit `i` is set when `neighbors[i] >= center`.
pub fn lbp_code(center: f64, neighbors: &[f64; 8]) -> u8 {
    let mut code = 0u8;
    for (i, &v) in neighbors.iter().enumerate() {
        if v >= center {
            code |= 1 << i;
        }
    }
    code
}

/// Number of 0/1 transitions around the circular code.
fn transitions(code: u8) -> u32 {
    let rotated = code.rotate_left(1);
    (code ^ rotated).count_ones()
}

/// A pattern is uniform when its circular bit string has at most two
/// transitions. Exactly 58 of the 256 codes qualify.
pub fn is_uniform(code: u8) -> bool {
    transitions(code) <= 2
}

fn bin_table() -> &'static [u8; 256] {
    static TABLE: OnceLock<[u8; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = [NONUNIFORM_BIN as u8; 256];
        let mut next = 0u8;
        for code in 0..=255u8 {
            if is_uniform(code) {
                table[code as usize] = next;
                next += 1;
            }
        }
        debug_assert_eq!(next as usize, NONUNIFORM_BIN);
        table
    })
}

/// Histogram bin for a code: uniform codes map to bins 0..=57 in ascending
/// code order; everything else lands in the joint bin 58.
pub fn bin_of(code: u8) -> usize {
    bin_table()[code as usize] as usize
}

/// Samples the neighbor ring around interior position `(x, y)` of a
/// row-major grid and returns the code. The caller must keep `(x, y)` at
/// least one pixel away from every border.
///
/// Comparisons are evaluated on neighbor-minus-center differences; for the
/// interpolated diagonals the difference is the bilinear blend of the four
/// corner differences, which keeps codes stable under affine intensity maps.
pub fn code_at(data: &[f64], width: usize, x: usize, y: usize) -> u8 {
    let center = data[y * width + x];
    let mut code = 0u8;
    for (i, &(dx, dy)) in OFFSETS.iter().enumerate() {
        let diff = if dx == 0.0 || dy == 0.0 {
            let nx = (x as f64 + dx) as usize;
            let ny = (y as f64 + dy) as usize;
            data[ny * width + nx] - center
        } else {
            let gx = x as f64 + dx;
            let gy = y as f64 + dy;
            let x0 = gx.floor() as usize;
            let y0 = gy.floor() as usize;
            let fx = gx - x0 as f64;
            let fy = gy - y0 as f64;
            let d00 = data[y0 * width + x0] - center;
            let d10 = data[y0 * width + x0 + 1] - center;
            let d01 = data[(y0 + 1) * width + x0] - center;
            let d11 = data[(y0 + 1) * width + x0 + 1] - center;
            let top = d00 + fx * (d10 - d00);
            let bot = d01 + fx * (d11 - d01);
            top + fy * (bot - top)
        };
        if diff >= 0.0 {
            code |= 1 << i;
        }
    }
    code
}

/// An L1-normalized 59-bin histogram of uniform codes.
#[derive(Debug, Clone, PartialEq)]
pub struct LbpHistogram {
    bins: [f64; BINS],
}

impl LbpHistogram {
    /// Wraps raw bins, validating L1 normalization to within 1e-6.
    pub fn from_bins(bins: [f64; BINS]) -> Result<Self, LbpError> {
        let sum: f64 = bins.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(LbpError::Unnormalized { sum });
        }
        Ok(Self { bins })
    }

    pub fn bins(&self) -> &[f64; BINS] {
        &self.bins
    }
}

/// Histogram over all interior positions of a row-major grid.
pub fn histogram_of_grid(data: &[f64], width: usize, height: usize) -> Result<LbpHistogram, LbpError> {
    if width < 3 || height < 3 {
        return Err(LbpError::ImageTooSmall { width, height });
    }
    let mut counts = [0u32; BINS];
    for y in 1..height - 1 {
        for x in 1..width - 1 {
            counts[bin_of(code_at(data, width, x, y))] += 1;
        }
    }
    let total = ((width - 2) * (height - 2)) as f64;
    let mut bins = [0.0; BINS];
    for (b, &c) in bins.iter_mut().zip(counts.iter()) {
        *b = f64::from(c) / total;
    }
    Ok(LbpHistogram { bins })
}

/// Histogram of an image's interior pixels.
pub fn lbp_histogram(img: &Image) -> Result<LbpHistogram, LbpError> {
    histogram_of_grid(img.data(), img.width(), img.height())
}

/// Histogram-intersection similarity: the sum of bin-wise minima. Both
/// inputs must be L1-normalized; the result lies in `[0, 1]` and equals 1
/// exactly when the histograms coincide.
pub fn similarity(a: &LbpHistogram, b: &LbpHistogram) -> f64 {
    a.bins
        .iter()
        .zip(b.bins.iter())
        .map(|(&x, &y)| x.min(y))
        .sum()
}

/// Writes labeled histograms as CSV: an `id` column followed by 59 bin
/// columns `b00..b58`.
pub fn write_histograms_csv<'a>(
    path: &Path,
    items: impl IntoIterator<Item = (&'a str, &'a LbpHistogram)>,
) -> Result<(), LbpError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string()];
    header.extend((0..BINS).map(|i| format!("b{i:02}")));
    w.write_record(&header)?;
    for (id, hist) in items {
        let mut rec = vec![id.to_string()];
        rec.extend(hist.bins.iter().map(|v| format!("{v}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagery::Image;

    #[test]
    fn exactly_58_codes_are_uniform() {
        let n = (0..=255u8).filter(|&c| is_uniform(c)).count();
        assert_eq!(n, 58, "fixed property of 8-bit circular patterns");
    }

    #[test]
    fn alternating_neighbors_make_a_nonuniform_code() {
        // Neighbors alternate just-above / just-below the center.
        let center = 0.5;
        let neighbors = [0.6, 0.4, 0.6, 0.4, 0.6, 0.4, 0.6, 0.4];
        let code = lbp_code(center, &neighbors);
        assert_eq!(code, 0b0101_0101, "bit i follows neighbor i");
        assert_eq!(code, 85);
        assert!(!is_uniform(code), "8 transitions is far beyond the uniform limit");
    }

    #[test]
    fn equal_neighbors_count_as_set_bits() {
        let code = lbp_code(0.5, &[0.5; 8]);
        assert_eq!(code, 255, "ties must resolve to 1 bits");
        assert!(is_uniform(255));
        assert!(is_uniform(0));
    }

    #[test]
    fn bin_mapping_is_ascending_and_complete() {
        assert_eq!(bin_of(0), 0, "code 0 is the smallest uniform code");
        assert_eq!(bin_of(255), 57, "code 255 is the largest uniform code");
        assert_eq!(bin_of(85), NONUNIFORM_BIN);
        let mut last = -1i32;
        for code in 0..=255u8 {
            if is_uniform(code) {
                let b = bin_of(code) as i32;
                assert!(b > last, "uniform bins must ascend with the code value");
                last = b;
            }
        }
    }

    #[test]
    fn constant_image_concentrates_in_the_last_uniform_bin() {
        let img = Image::constant(9, 9, 0.42).unwrap();
        let h = lbp_histogram(&img).unwrap();
        assert_eq!(h.bins()[57], 1.0, "all interior codes are 255 on a constant image");
        assert_eq!(h.bins().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn histograms_are_normalized_on_structured_images() {
        let img = Image::from_fn(17, 13, |x, y| ((x * 7 + y * 13) % 29) as f64 / 28.0).unwrap();
        let h = lbp_histogram(&img).unwrap();
        let sum: f64 = h.bins().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12, "histogram sum {sum} must be 1");
    }

    #[test]
    fn too_small_images_are_rejected() {
        let img = Image::constant(2, 8, 0.5).unwrap();
        assert!(matches!(
            lbp_histogram(&img),
            Err(LbpError::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn diagonal_samples_respect_quadrant_dominance() {
        // 3x3 grid, center 0.5. The NE diagonal sample interpolates only the
        // four pixels of the NE quadrant; forcing them all above (or below)
        // the center pins the bit regardless of the interpolation weights.
        let mut data = vec![0.5; 9];
        // NE quadrant corners for center (1,1): (1,0), (2,0), (1,1)=center, (2,1).
        data[1] = 0.9; // (1,0)
        data[2] = 0.9; // (2,0)
        data[5] = 0.9; // (2,1)
        let code = code_at(&data, 3, 1, 1);
        assert_eq!(code & 0b10, 0b10, "NE bit must be set when its quadrant is brighter");

        let mut data = vec![0.5; 9];
        data[1] = 0.1;
        data[2] = 0.1;
        data[5] = 0.1;
        // Center itself participates in the NE interpolation with weight > 0,
        // and equals the comparison value; the three dark corners pull the
        // sample strictly below the center.
        let code = code_at(&data, 3, 1, 1);
        assert_eq!(code & 0b10, 0, "NE bit must clear when its quadrant is darker");
    }

    #[test]
    fn codes_survive_affine_intensity_maps() {
        let img = Image::from_fn(12, 12, |x, y| ((x * 5 + y * 11) % 16) as f64 / 16.0).unwrap();
        let mapped = Image::from_fn(12, 12, |x, y| 0.2 + 0.6 * img.get(x, y)).unwrap();
        let ha = lbp_histogram(&img).unwrap();
        let hb = lbp_histogram(&mapped).unwrap();
        assert_eq!(ha, hb, "affine maps with positive slope must preserve every code");
    }

    #[test]
    fn similarity_bounds_and_identity() {
        let img = Image::from_fn(10, 10, |x, y| ((x + 2 * y) % 7) as f64 / 6.0).unwrap();
        let other = Image::from_fn(10, 10, |x, y| ((3 * x + y) % 5) as f64 / 4.0).unwrap();
        let ha = lbp_histogram(&img).unwrap();
        let hb = lbp_histogram(&other).unwrap();
        assert_eq!(similarity(&ha, &ha), 1.0, "self-similarity is exactly 1");
        let s = similarity(&ha, &hb);
        assert!((0.0..=1.0).contains(&s));
        assert!(s < 1.0, "different histograms cannot reach full intersection");
    }

    #[test]
    fn disjoint_histograms_have_zero_similarity() {
        let mut a = [0.0; BINS];
        a[0] = 1.0;
        let mut b = [0.0; BINS];
        b[57] = 1.0;
        let ha = LbpHistogram::from_bins(a).unwrap();
        let hb = LbpHistogram::from_bins(b).unwrap();
        assert_eq!(similarity(&ha, &hb), 0.0);
    }

    #[test]
    fn unnormalized_bins_are_rejected() {
        let mut bins = [0.0; BINS];
        bins[3] = 0.7;
        assert!(matches!(
            LbpHistogram::from_bins(bins),
            Err(LbpError::Unnormalized { .. })
        ));
    }

    #[test]
    fn histogram_csv_has_59_bin_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        let img = Image::from_fn(8, 8, |x, y| ((x ^ y) & 1) as f64).unwrap();
        let h = lbp_histogram(&img).unwrap();
        write_histograms_csv(&path, [("img0", &h)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert_eq!(header.split(',').count(), 60, "id column plus 59 bins");
        assert_eq!(lines.next().unwrap().split(',').count(), 60);
    }
}
