//! Part-region proposal: score every kernel-sized window of an object
//! attention map with pooled attention, then keep the top-k non-overlapping
//! windows via greedy NMS. Average pooling runs on a summed-area table so the
//! stride-1 sweep stays O(1) per window.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::localize::BoundingBox;
use crate::rollout::AttentionMap;

/// Window pooling operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PoolMode {
    Average,
    /// Generalized mean `(mean of v^p)^(1/p)`; `p = 1` is average pooling.
    Gem { p: f64 },
    Max,
}

impl Default for PoolMode {
    fn default() -> Self {
        PoolMode::Average
    }
}

/// Interpretation of `kernel_ratio`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RatioMode {
    /// Ratio of the linear side: kernel side = ratio × map side.
    #[default]
    Linear,
    /// Ratio of the area: kernel side = sqrt(ratio) × map side.
    Area,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoringConfig {
    pub kernel_ratio: f64,
    pub ratio_mode: RatioMode,
    /// When set, kernel sides are floored to a multiple of this value
    /// (e.g. the patch side), keeping windows patch-aligned.
    pub kernel_snap: Option<usize>,
    pub stride: usize,
    pub pooling: PoolMode,
    pub top_k: usize,
    pub iou_threshold: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            kernel_ratio: 0.3,
            ratio_mode: RatioMode::Linear,
            kernel_snap: None,
            stride: 1,
            pooling: PoolMode::Average,
            top_k: 2,
            iou_threshold: 0.25,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kernel_ratio > 0.0 && self.kernel_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "kernel_ratio must be in (0, 1], got {}",
                self.kernel_ratio
            )));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be >= 1".into()));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.iou_threshold) {
            return Err(Error::Config(format!(
                "iou_threshold must be in [0, 1), got {}",
                self.iou_threshold
            )));
        }
        if let PoolMode::Gem { p } = self.pooling {
            if !(p >= 1.0 && p.is_finite()) {
                return Err(Error::Config(format!("gem p must be >= 1, got {p}")));
            }
        }
        if self.kernel_snap == Some(0) {
            return Err(Error::Config("kernel_snap must be >= 1".into()));
        }
        Ok(())
    }
}

/// A scored window; the box always has the kernel's dimensions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionCandidate {
    pub bbox: BoundingBox,
    pub score: f64,
}

/// `(R+1)×(C+1)` prefix sums giving any rectangle sum in four lookups.
#[derive(Debug, Clone)]
pub struct SummedAreaTable {
    table: Array2<f64>,
}

impl SummedAreaTable {
    pub fn new(map: ArrayView2<'_, f64>) -> Result<Self> {
        let (h, w) = map.dim();
        if h == 0 || w == 0 {
            return Err(Error::EmptyInput("map"));
        }
        let mut table = Array2::zeros((h + 1, w + 1));
        for y in 0..h {
            let mut row_sum = 0.0;
            for x in 0..w {
                row_sum += map[(y, x)];
                table[(y + 1, x + 1)] = table[(y, x + 1)] + row_sum;
            }
        }
        Ok(SummedAreaTable { table })
    }

    /// Sum over the half-open rectangle `[y0, y1) × [x0, x1)`.
    pub fn sum(&self, y0: usize, x0: usize, y1: usize, x1: usize) -> f64 {
        self.table[(y1, x1)] - self.table[(y0, x1)] - self.table[(y1, x0)] + self.table[(y0, x0)]
    }

    pub fn mean(&self, y0: usize, x0: usize, y1: usize, x1: usize) -> f64 {
        self.sum(y0, x0, y1, x1) / ((y1 - y0) * (x1 - x0)) as f64
    }

    /// Sum of the whole map (bottom-right table corner).
    pub fn total(&self) -> f64 {
        let (r, c) = self.table.dim();
        self.table[(r - 1, c - 1)]
    }
}

/// Kernel dimensions for an object map: `max(1, round(side_ratio × dim))`
/// per axis, clamped to the map, optionally floored to a `kernel_snap`
/// multiple (kept unsnapped when flooring would reach zero).
pub fn kernel_from_object(map_h: usize, map_w: usize, config: &ScoringConfig) -> Result<(usize, usize)> {
    config.validate()?;
    if map_h == 0 || map_w == 0 {
        return Err(Error::EmptyInput("map"));
    }
    let side_ratio = match config.ratio_mode {
        RatioMode::Linear => config.kernel_ratio,
        RatioMode::Area => config.kernel_ratio.sqrt(),
    };
    let one_side = |dim: usize| -> usize {
        let mut k = ((side_ratio * dim as f64).round() as usize).max(1).min(dim);
        if let Some(m) = config.kernel_snap {
            let snapped = (k / m) * m;
            if snapped >= 1 {
                k = snapped.min(dim);
            }
        }
        k
    };
    Ok((one_side(map_h), one_side(map_w)))
}

/// Score every window of the given kernel size on the stride lattice.
/// Returns candidates sorted by descending score; ties break by row-major
/// top-left position.
pub fn score_windows_with_kernel(
    map: &AttentionMap,
    kernel: (usize, usize),
    config: &ScoringConfig,
) -> Result<Vec<RegionCandidate>> {
    config.validate()?;
    let (kh, kw) = kernel;
    let (h, w) = (map.height(), map.width());
    if kh == 0 || kw == 0 {
        return Err(Error::Config("kernel dims must be >= 1".into()));
    }
    if kh > h || kw > w {
        return Err(Error::Validation(format!(
            "kernel {kh}x{kw} larger than map {h}x{w}"
        )));
    }
    let table = match config.pooling {
        PoolMode::Average => Some(SummedAreaTable::new(map.values.view())?),
        _ => None,
    };
    let area = (kh * kw) as f64;
    let mut candidates = Vec::new();
    let mut y = 0;
    while y + kh <= h {
        let mut x = 0;
        while x + kw <= w {
            let score = match &config.pooling {
                PoolMode::Average => table.as_ref().unwrap().sum(y, x, y + kh, x + kw) / area,
                PoolMode::Gem { p } => {
                    let window = map.values.slice(ndarray::s![y..y + kh, x..x + kw]);
                    let mean_pow = window.iter().map(|v| v.powf(*p)).sum::<f64>() / area;
                    mean_pow.powf(1.0 / p)
                }
                PoolMode::Max => {
                    let window = map.values.slice(ndarray::s![y..y + kh, x..x + kw]);
                    window.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                }
            };
            candidates.push(RegionCandidate {
                bbox: BoundingBox::new(x, y, x + kw, y + kh)?,
                score,
            });
            x += config.stride;
        }
        y += config.stride;
    }
    sort_candidates(&mut candidates);
    Ok(candidates)
}

/// Derive the kernel from the map dimensions, then score all windows.
pub fn score_windows(map: &AttentionMap, config: &ScoringConfig) -> Result<Vec<RegionCandidate>> {
    let kernel = kernel_from_object(map.height(), map.width(), config)?;
    score_windows_with_kernel(map, kernel, config)
}

/// Deterministic order: score descending, then top-left corner row-major.
pub fn sort_candidates(candidates: &mut [RegionCandidate]) {
    candidates.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("scores are finite")
            .then(a.bbox.y0.cmp(&b.bbox.y0))
            .then(a.bbox.x0.cmp(&b.bbox.x0))
    });
}

/// Greedy non-maximum suppression: repeatedly accept the best remaining
/// candidate and drop everything overlapping it beyond `iou_threshold`.
/// Returns at most `top_k` survivors in acceptance order.
pub fn nms_topk(
    candidates: &[RegionCandidate],
    iou_threshold: f64,
    top_k: usize,
) -> Vec<RegionCandidate> {
    let mut pool: Vec<RegionCandidate> = candidates.to_vec();
    sort_candidates(&mut pool);
    let mut kept: Vec<RegionCandidate> = Vec::with_capacity(top_k);
    for cand in pool {
        if kept.len() >= top_k {
            break;
        }
        if kept.iter().all(|k| k.bbox.iou(&cand.bbox) <= iou_threshold) {
            kept.push(cand);
        }
    }
    kept
}
