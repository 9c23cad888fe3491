//! Depth quantization into scale bins and ground-truth gate construction.
//!
//! Depth is binned in log space: bin edges are empirical quantiles of
//! log-depth over a training split, so each of the B bins holds roughly 1/B
//! of the valid pixel mass. Near pixels land in low bins (large pooling
//! fields), far pixels in high bins.

use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{DepthMap, GateMap};

/// Bin value stored at invalid pixels.
pub const SENTINEL_BIN: u8 = u8::MAX;

/// Minimum number of valid pixels required to fit a scheme.
pub const MIN_FIT_PIXELS: usize = 1000;

/// Ordered log-depth thresholds mapping depth to one of B scale bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizationScheme {
    num_bins: usize,
    /// B-1 strictly ascending thresholds in log-meters.
    edges_log_m: Vec<f64>,
}

impl QuantizationScheme {
    pub fn new(edges_log_m: Vec<f64>, num_bins: usize) -> Result<Self> {
        if num_bins < 2 {
            return Err(Error::Config(format!(
                "num_bins: must be >= 2, got {num_bins}"
            )));
        }
        if edges_log_m.len() != num_bins - 1 {
            return Err(Error::Config(format!(
                "edges_log_m: expected {} edges for {num_bins} bins, got {}",
                num_bins - 1,
                edges_log_m.len()
            )));
        }
        if edges_log_m.iter().any(|e| !e.is_finite()) {
            return Err(Error::Config("edges_log_m: edges must be finite".into()));
        }
        if edges_log_m.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "edges_log_m: edges must be strictly increasing".into(),
            ));
        }
        Ok(QuantizationScheme {
            num_bins,
            edges_log_m,
        })
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn edges_log_m(&self) -> &[f64] {
        &self.edges_log_m
    }

    /// Bin index for a metric depth. A depth exactly on an edge goes to the
    /// higher bin.
    pub fn bin_of(&self, depth_m: f64) -> u8 {
        let x = depth_m.ln();
        self.edges_log_m.partition_point(|&e| e <= x) as u8
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let raw: QuantizationScheme = serde_json::from_str(&text)?;
        QuantizationScheme::new(raw.edges_log_m, raw.num_bins)
    }
}

/// Per-pixel bin indices plus the validity mask carried through from depth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedDepth {
    /// Bin in [0, B-1] at valid pixels, [`SENTINEL_BIN`] elsewhere.
    pub bins: Array2<u8>,
    pub valid: Array2<bool>,
}

impl QuantizedDepth {
    pub fn dim(&self) -> (usize, usize) {
        self.bins.dim()
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Linear-interpolation quantile over an already sorted slice.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let t = h - lo as f64;
    sorted[lo] * (1.0 - t) + sorted[hi] * t
}

/// Fits bin edges as the {1/B, ..., (B-1)/B} quantiles of log-depth over all
/// valid pixels of the collection.
pub fn fit_scheme<'a>(
    depths: impl IntoIterator<Item = &'a DepthMap>,
    num_bins: usize,
) -> Result<QuantizationScheme> {
    if num_bins < 2 {
        return Err(Error::Fit(format!("num_bins must be >= 2, got {num_bins}")));
    }
    let mut logs: Vec<f64> = Vec::new();
    for d in depths {
        logs.extend(d.iter_valid().map(|(_, _, v)| v.ln()));
    }
    if logs.len() < MIN_FIT_PIXELS {
        return Err(Error::Fit(format!(
            "need at least {MIN_FIT_PIXELS} valid depth pixels, got {}",
            logs.len()
        )));
    }
    logs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let edges: Vec<f64> = (1..num_bins)
        .map(|k| quantile_sorted(&logs, k as f64 / num_bins as f64))
        .collect();
    if edges.windows(2).any(|w| w[0] >= w[1]) || logs[0] == logs[logs.len() - 1] {
        return Err(Error::Fit(
            "degenerate depth distribution: quantile edges are not strictly increasing".into(),
        ));
    }
    QuantizationScheme::new(edges, num_bins)
}

/// Quantizes a depth map; invalid pixels pass through as invalid.
pub fn quantize(depth: &DepthMap, scheme: &QuantizationScheme) -> QuantizedDepth {
    let (h, w) = depth.dim();
    let mut bins = Array2::from_elem((h, w), SENTINEL_BIN);
    for (r, c, v) in depth.iter_valid() {
        bins[[r, c]] = scheme.bin_of(v);
    }
    QuantizedDepth {
        bins,
        valid: depth.valid().clone(),
    }
}

/// Builds the ground-truth gate: one-hot on the pixel's bin where depth is
/// valid, exactly uniform 1/B where it is missing.
pub fn gate_from_ground_truth(q: &QuantizedDepth, num_bins: usize) -> Result<GateMap> {
    let (h, w) = q.dim();
    let uniform = 1.0 / num_bins as f64;
    let mut weights = Array3::zeros((h, w, num_bins));
    for r in 0..h {
        for c in 0..w {
            if q.valid[[r, c]] {
                let b = q.bins[[r, c]] as usize;
                if b >= num_bins {
                    return Err(Error::Data(format!(
                        "bin {b} at ({r},{c}) out of range for {num_bins} bins"
                    )));
                }
                weights[[r, c, b]] = 1.0;
            } else {
                for b in 0..num_bins {
                    weights[[r, c, b]] = uniform;
                }
            }
        }
    }
    GateMap::new(weights)
}

/// Reduces a depth map to the feature grid by taking the lower median of the
/// valid depths in each `stride x stride` block. An output pixel is valid iff
/// its block contains at least one valid pixel.
pub fn downsample_to_feature_grid(depth: &DepthMap, stride: usize) -> Result<DepthMap> {
    let (h, w) = depth.dim();
    if stride == 0 || h % stride != 0 || w % stride != 0 {
        return Err(Error::Shape(format!(
            "depth {h}x{w} not divisible by stride {stride}; crop first"
        )));
    }
    let (oh, ow) = (h / stride, w / stride);
    let mut values = Array2::zeros((oh, ow));
    let mut valid = Array2::from_elem((oh, ow), false);
    let mut block: Vec<f64> = Vec::with_capacity(stride * stride);
    for br in 0..oh {
        for bc in 0..ow {
            block.clear();
            for r in br * stride..(br + 1) * stride {
                for c in bc * stride..(bc + 1) * stride {
                    if depth.is_valid(r, c) {
                        block.push(depth.get(r, c));
                    }
                }
            }
            if !block.is_empty() {
                block.sort_by(|a, b| a.partial_cmp(b).unwrap());
                values[[br, bc]] = block[(block.len() - 1) / 2];
                valid[[br, bc]] = true;
            }
        }
    }
    DepthMap::new(values, valid)
}
