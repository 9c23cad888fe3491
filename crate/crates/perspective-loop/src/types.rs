//! Domain rasters shared by every module.
//!
//! All grids are row-major `H x W` (`[row, col]`), channels last where a
//! channel axis exists. Depth is metric meters everywhere in memory; file I/O
//! converts to and from millimeters at the boundary.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Label value excluded from every loss and metric.
pub const IGNORE_LABEL: u8 = 255;

/// Metric depth grid with a per-pixel validity mask.
///
/// Values at invalid pixels are never read; tests fuzz them to enforce this.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    values: Array2<f64>,
    valid: Array2<bool>,
}

impl DepthMap {
    /// Builds a depth map, checking that every valid pixel is finite and > 0.
    pub fn new(values: Array2<f64>, valid: Array2<bool>) -> Result<Self> {
        if values.dim() != valid.dim() {
            return Err(Error::Shape(format!(
                "depth values {:?} vs valid mask {:?}",
                values.dim(),
                valid.dim()
            )));
        }
        for ((r, c), &ok) in valid.indexed_iter() {
            if ok {
                let v = values[[r, c]];
                if !v.is_finite() || v <= 0.0 {
                    return Err(Error::Data(format!(
                        "depth at ({r},{c}) marked valid but is {v}"
                    )));
                }
            }
        }
        Ok(DepthMap { values, valid })
    }

    /// All-valid map from positive values.
    pub fn all_valid(values: Array2<f64>) -> Result<Self> {
        let valid = Array2::from_elem(values.dim(), true);
        DepthMap::new(values, valid)
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn valid(&self) -> &Array2<bool> {
        &self.valid
    }

    pub fn is_valid(&self, r: usize, c: usize) -> bool {
        self.valid[[r, c]]
    }

    /// Depth at a pixel; caller must have checked validity.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(self.valid[[r, c]], "read of invalid depth pixel");
        self.values[[r, c]]
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Iterator over (row, col, depth) of valid pixels.
    pub fn iter_valid(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.valid
            .indexed_iter()
            .filter(|(_, &ok)| ok)
            .map(|((r, c), _)| (r, c, self.values[[r, c]]))
    }

    /// Rewrites the values stored at invalid pixels. Used by tests to fuzz
    /// data that no consumer may read, and by I/O to normalize sentinels.
    pub fn overwrite_invalid(&mut self, value: f64) {
        for ((r, c), &ok) in self.valid.indexed_iter() {
            if !ok {
                self.values[[r, c]] = value;
            }
        }
    }
}

/// Per-pixel class indices in `[0, C-1]` plus the ignore value 255.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    labels: Array2<u8>,
}

impl LabelMap {
    /// Builds a label map, checking every non-ignore entry against `num_classes`.
    pub fn new(labels: Array2<u8>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 || num_classes > IGNORE_LABEL as usize {
            return Err(Error::Config(format!(
                "num_classes: {num_classes} out of range 1..=254"
            )));
        }
        for ((r, c), &l) in labels.indexed_iter() {
            if l != IGNORE_LABEL && l as usize >= num_classes {
                return Err(Error::Data(format!(
                    "label {l} at ({r},{c}) >= num_classes {num_classes}"
                )));
            }
        }
        Ok(LabelMap { labels })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.labels.dim()
    }

    pub fn labels(&self) -> &Array2<u8> {
        &self.labels
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.labels[[r, c]]
    }

    pub fn num_non_ignore(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE_LABEL).count()
    }
}

/// RGB image with entries in `[0, 1]`, shape `H x W x 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pixels: Array3<f64>,
}

impl Image {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        if pixels.dim().2 != 3 {
            return Err(Error::Shape(format!(
                "image must have 3 channels, got {}",
                pixels.dim().2
            )));
        }
        if pixels.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Data("image entries must lie in [0,1]".into()));
        }
        Ok(Image { pixels })
    }

    /// Height and width.
    pub fn dim(&self) -> (usize, usize) {
        let (h, w, _) = self.pixels.dim();
        (h, w)
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }
}

/// One dataset item: image, depth and labels on a shared grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub depth: DepthMap,
    pub labels: LabelMap,
    pub id: String,
}

impl Sample {
    pub fn new(image: Image, depth: DepthMap, labels: LabelMap, id: String) -> Result<Self> {
        let d = image.dim();
        if depth.dim() != d || labels.dim() != d {
            return Err(Error::Shape(format!(
                "sample {id}: image {:?}, depth {:?}, labels {:?} must share H x W",
                d,
                depth.dim(),
                labels.dim()
            )));
        }
        Ok(Sample {
            image,
            depth,
            labels,
            id,
        })
    }

    pub fn dim(&self) -> (usize, usize) {
        self.image.dim()
    }
}

/// Tolerance for the per-pixel gate normalization check.
pub const GATE_SUM_TOL: f64 = 1e-5;

/// Per-pixel nonnegative weights over `B` branches, summing to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct GateMap {
    weights: Array3<f64>,
}

impl GateMap {
    pub fn new(weights: Array3<f64>) -> Result<Self> {
        for ((r, c, _), &w) in weights.indexed_iter() {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Data(format!("gate weight {w} at ({r},{c})")));
            }
        }
        let (h, w_, b) = weights.dim();
        for r in 0..h {
            for c in 0..w_ {
                let s: f64 = (0..b).map(|k| weights[[r, c, k]]).sum();
                if (s - 1.0).abs() > GATE_SUM_TOL {
                    return Err(Error::Data(format!(
                        "gate weights at ({r},{c}) sum to {s}, expected 1"
                    )));
                }
            }
        }
        Ok(GateMap { weights })
    }

    /// `H' x W' x B` weight grid.
    pub fn weights(&self) -> &Array3<f64> {
        &self.weights
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.weights.dim()
    }

    /// Uniform 1/B gate.
    pub fn uniform(h: usize, w: usize, b: usize) -> Self {
        GateMap {
            weights: Array3::from_elem((h, w, b), 1.0 / b as f64),
        }
    }

    /// Index of the heaviest branch per pixel.
    pub fn argmax(&self) -> Array2<u8> {
        let (h, w, b) = self.weights.dim();
        Array2::from_shape_fn((h, w), |(r, c)| {
            (0..b)
                .max_by(|&i, &j| {
                    self.weights[[r, c, i]]
                        .partial_cmp(&self.weights[[r, c, j]])
                        .unwrap()
                })
                .unwrap() as u8
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn depth_rejects_nonpositive_valid_pixels() {
        let values = arr2(&[[1.0, 0.0]]);
        let valid = arr2(&[[true, true]]);
        assert!(DepthMap::new(values, valid).is_err());
        // Same values fine when the bad pixel is masked out.
        let values = arr2(&[[1.0, 0.0]]);
        let valid = arr2(&[[true, false]]);
        assert!(DepthMap::new(values, valid).is_ok());
    }

    #[test]
    fn depth_rejects_shape_mismatch() {
        let values = Array2::from_elem((2, 3), 1.0);
        let valid = Array2::from_elem((2, 2), true);
        assert!(DepthMap::new(values, valid).is_err());
    }

    #[test]
    fn labels_reject_out_of_range() {
        let l = arr2(&[[0u8, 3]]);
        assert!(LabelMap::new(l.clone(), 4).is_ok());
        assert!(LabelMap::new(l, 3).is_err());
        let ign = arr2(&[[IGNORE_LABEL, 0]]);
        assert!(LabelMap::new(ign, 1).is_ok());
    }

    #[test]
    fn image_rejects_out_of_range() {
        let mut px = Array3::zeros((2, 2, 3));
        px[[0, 0, 0]] = 1.5;
        assert!(Image::new(px).is_err());
    }

    #[test]
    fn sample_requires_shared_grid() {
        let image = Image::new(Array3::zeros((2, 2, 3))).unwrap();
        let depth = DepthMap::all_valid(Array2::from_elem((2, 2), 1.0)).unwrap();
        let labels = LabelMap::new(Array2::zeros((2, 3)), 4).unwrap();
        assert!(Sample::new(image, depth, labels, "x".into()).is_err());
    }

    #[test]
    fn gate_checks_normalization() {
        let ok = Array3::from_elem((2, 2, 4), 0.25);
        assert!(GateMap::new(ok).is_ok());
        let bad = Array3::from_elem((2, 2, 4), 0.3);
        assert!(GateMap::new(bad).is_err());
        let neg = {
            let mut g = Array3::from_elem((1, 1, 2), 0.5);
            g[[0, 0, 0]] = -0.1;
            g[[0, 0, 1]] = 1.1;
            g
        };
        assert!(GateMap::new(neg).is_err());
    }

    #[test]
    fn gate_uniform_and_argmax() {
        let g = GateMap::uniform(1, 2, 5);
        assert_eq!(g.dim(), (1, 2, 5));
        let mut w = Array3::zeros((1, 1, 3));
        w[[0, 0, 2]] = 1.0;
        let g = GateMap::new(w).unwrap();
        assert_eq!(g.argmax()[[0, 0]], 2);
    }
}
