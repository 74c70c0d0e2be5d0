//! Attention rollout: collapse a per-layer, per-head attention stack into a
//! single CLS-to-patch map.
//!
//! Each layer's heads are fused into one T×T matrix, mixed with the identity
//! to account for residual connections, and row-renormalized. The fused
//! matrices are multiplied in layer order (later layers on the left), and the
//! CLS row of the product, restricted to the patch tokens, becomes the map.

use ndarray::{s, Array2};

use crate::encoder::AttentionStack;
use crate::error::{Error, Result};
use crate::image::{resize_plane, ResizeFilter};

/// Weight given to the raw attention; the identity gets the complement.
const RESIDUAL_MIX: f64 = 0.5;

/// How the heads of one layer collapse into a single matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeadFusion {
    #[default]
    Mean,
    Max,
    Min,
}

/// Coordinate system of an attention map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapSpace {
    /// One cell per encoder patch.
    PatchGrid,
    /// One cell per image pixel.
    Pixel,
}

/// Whether a map describes the whole frame or a cropped object region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapProvenance {
    FullImage,
    ObjectCrop,
}

/// 2-D non-negative scalar attention field.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub values: Array2<f64>,
    pub space: MapSpace,
    pub provenance: MapProvenance,
}

impl AttentionMap {
    pub fn new(values: Array2<f64>, space: MapSpace, provenance: MapProvenance) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::Shape("attention map must be at least 1x1".into()));
        }
        if values.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::Validation(
                "attention map values must be finite and >= 0".into(),
            ));
        }
        Ok(AttentionMap {
            values,
            space,
            provenance,
        })
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Row-major coordinates of the largest value; first occurrence wins.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0, 0);
        let mut best_val = f64::NEG_INFINITY;
        for ((y, x), &v) in self.values.indexed_iter() {
            if v > best_val {
                best_val = v;
                best = (y, x);
            }
        }
        best
    }
}

/// Rollout options. The residual mix is fixed at 0.5; only head fusion is
/// exposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RolloutConfig {
    pub fusion: HeadFusion,
}

/// Fuse one layer's heads and apply the residual correction:
/// `normalize_rows(0.5 * fuse(A) + 0.5 * I)`.
pub fn layer_fuse(stack: &AttentionStack, layer: usize, fusion: HeadFusion) -> Result<Array2<f64>> {
    if layer >= stack.n_layers() {
        return Err(Error::Shape(format!(
            "layer index {layer} out of range for {} layers",
            stack.n_layers()
        )));
    }
    let t = stack.n_tokens();
    let heads = stack.n_heads();
    let mut fused = match fusion {
        HeadFusion::Mean => {
            let mut acc = Array2::zeros((t, t));
            for h in 0..heads {
                acc += &stack.head(layer, h);
            }
            acc / heads as f64
        }
        HeadFusion::Max => {
            let mut acc = stack.head(layer, 0).to_owned();
            for h in 1..heads {
                acc.zip_mut_with(&stack.head(layer, h), |a, &b| *a = a.max(b));
            }
            acc
        }
        HeadFusion::Min => {
            let mut acc = stack.head(layer, 0).to_owned();
            for h in 1..heads {
                acc.zip_mut_with(&stack.head(layer, h), |a, &b| *a = a.min(b));
            }
            acc
        }
    };
    fused *= RESIDUAL_MIX;
    for i in 0..t {
        fused[(i, i)] += 1.0 - RESIDUAL_MIX;
    }
    // The diagonal guarantees every row sum is at least 0.5.
    for mut row in fused.rows_mut() {
        let sum = row.sum();
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(fused)
}

/// Cumulative rollout products after each layer: element `l` equals
/// `Â_l · Â_{l-1} · … · Â_0`. The last element is the full rollout matrix.
pub fn rollout_products(stack: &AttentionStack, config: &RolloutConfig) -> Result<Vec<Array2<f64>>> {
    let mut products = Vec::with_capacity(stack.n_layers());
    let mut running: Option<Array2<f64>> = None;
    for layer in 0..stack.n_layers() {
        let fused = layer_fuse(stack, layer, config.fusion)?;
        let next = match running {
            None => fused,
            Some(prev) => fused.dot(&prev),
        };
        products.push(next.clone());
        running = Some(next);
    }
    Ok(products)
}

/// Full rollout: CLS row of the layer product, restricted to patch tokens
/// and reshaped to the square patch grid.
pub fn rollout_map(stack: &AttentionStack, config: &RolloutConfig) -> Result<AttentionMap> {
    let n_patches = stack.n_tokens() - 1;
    if n_patches == 0 {
        return Err(Error::Shape("attention stack has no patch tokens".into()));
    }
    let grid = (n_patches as f64).sqrt().round() as usize;
    if grid * grid != n_patches {
        return Err(Error::Shape(format!(
            "{n_patches} patch tokens do not form a square grid"
        )));
    }
    let products = rollout_products(stack, config)?;
    let full = products.last().expect("non-empty stack");
    let cls_to_patches = full.slice(s![0, 1..]).to_owned();
    let values = cls_to_patches
        .into_shape_with_order((grid, grid))
        .map_err(|e| Error::Shape(e.to_string()))?;
    // Rollout entries are products/sums of non-negative terms; clip any
    // -0.0 noise rather than fail validation.
    let values = values.mapv(|v| v.max(0.0));
    AttentionMap::new(values, MapSpace::PatchGrid, MapProvenance::FullImage)
}

/// Resize a patch-grid map to pixel dimensions. Bilinear by default; nearest
/// is available for exact-value debugging.
pub fn upsample_map(
    map: &AttentionMap,
    target_h: usize,
    target_w: usize,
    filter: ResizeFilter,
) -> Result<AttentionMap> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::Config("upsample target dims must be >= 1".into()));
    }
    if target_h < map.height() || target_w < map.width() {
        return Err(Error::Config(format!(
            "upsample target {}x{} smaller than source {}x{}",
            target_h,
            target_w,
            map.height(),
            map.width()
        )));
    }
    let values = resize_plane(map.values.view(), target_h, target_w, filter);
    AttentionMap::new(values, MapSpace::Pixel, map.provenance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use ndarray::{Array4, Axis};

    fn identity_stack(layers: usize, heads: usize, t: usize) -> AttentionStack {
        let mut w = Array4::zeros((layers, heads, t, t));
        for l in 0..layers {
            for h in 0..heads {
                for i in 0..t {
                    w[(l, h, i, i)] = 1.0;
                }
            }
        }
        AttentionStack::new(w).unwrap()
    }

    fn uniform_stack(layers: usize, heads: usize, t: usize) -> AttentionStack {
        AttentionStack::new(Array4::from_elem((layers, heads, t, t), 1.0 / t as f64)).unwrap()
    }

    #[test]
    fn identity_heads_fuse_to_identity() {
        let stack = identity_stack(2, 3, 5);
        let fused = layer_fuse(&stack, 0, HeadFusion::Mean).unwrap();
        assert!((&fused - &Array2::<f64>::eye(5)).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn uniform_heads_fuse_to_analytic_values() {
        let t = 4;
        let stack = uniform_stack(1, 2, t);
        let fused = layer_fuse(&stack, 0, HeadFusion::Mean).unwrap();
        for i in 0..t {
            for j in 0..t {
                let expect = if i == j {
                    0.5 + 0.5 / t as f64
                } else {
                    0.5 / t as f64
                };
                assert!((fused[(i, j)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fuse_is_invariant_under_head_permutation() {
        let stack = synth::random_stack(2, 3, 6, 17);
        let mut permuted = stack.weights().clone();
        // swap heads 0 and 2 in both layers
        let head0 = permuted.index_axis(Axis(1), 0).to_owned();
        let head2 = permuted.index_axis(Axis(1), 2).to_owned();
        permuted.index_axis_mut(Axis(1), 0).assign(&head2);
        permuted.index_axis_mut(Axis(1), 2).assign(&head0);
        let permuted = AttentionStack::new(permuted).unwrap();
        for layer in 0..2 {
            let a = layer_fuse(&stack, layer, HeadFusion::Mean).unwrap();
            let b = layer_fuse(&permuted, layer, HeadFusion::Mean).unwrap();
            assert!((&a - &b).iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn fused_and_products_stay_row_stochastic() {
        for seed in 0..5 {
            let stack = synth::random_stack(3, 2, 10, seed);
            for fusion in [HeadFusion::Mean, HeadFusion::Max, HeadFusion::Min] {
                for layer in 0..3 {
                    let fused = layer_fuse(&stack, layer, fusion).unwrap();
                    for row in fused.rows() {
                        assert!((row.sum() - 1.0).abs() < 1e-6);
                        assert!(row.iter().all(|&v| v >= 0.0));
                    }
                }
                let products =
                    rollout_products(&stack, &RolloutConfig { fusion }).unwrap();
                for p in &products {
                    for row in p.rows() {
                        assert!((row.sum() - 1.0).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn single_layer_rollout_equals_fused_matrix() {
        let stack = synth::random_stack(1, 4, 8, 3);
        let config = RolloutConfig::default();
        let products = rollout_products(&stack, &config).unwrap();
        let fused = layer_fuse(&stack, 0, config.fusion).unwrap();
        assert_eq!(products.len(), 1);
        assert!((&products[0] - &fused).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn identity_attention_maps_to_zero() {
        // CLS row of the identity has all its mass on CLS itself.
        let stack = identity_stack(3, 2, 5); // 4 patches -> 2x2 grid
        let map = rollout_map(&stack, &RolloutConfig::default()).unwrap();
        assert_eq!(map.values.dim(), (2, 2));
        assert!(map.values.iter().all(|&v| v == 0.0));
        assert_eq!(map.space, MapSpace::PatchGrid);
    }

    #[test]
    fn uniform_attention_maps_to_constant() {
        let stack = uniform_stack(2, 3, 10); // 9 patches -> 3x3
        let map = rollout_map(&stack, &RolloutConfig::default()).unwrap();
        let first = map.values[(0, 0)];
        assert!(first > 0.0);
        assert!(map.values.iter().all(|&v| (v - first).abs() < 1e-12));
    }

    #[test]
    fn two_layer_product_matches_hand_multiplication() {
        // T = 2 (one patch). Layer 0: every token attends to token 0.
        // Layer 1: every token attends to token 1.
        //   fused_0 = [[1.0, 0.0], [0.5, 0.5]]
        //   fused_1 = [[0.5, 0.5], [0.0, 1.0]]
        //   R = fused_1 . fused_0 = [[0.75, 0.25], [0.5, 0.5]]
        // CLS->patch entry = 0.25; the reversed order would give 0.5.
        let mut w = Array4::zeros((2, 1, 2, 2));
        w[(0, 0, 0, 0)] = 1.0;
        w[(0, 0, 1, 0)] = 1.0;
        w[(1, 0, 0, 1)] = 1.0;
        w[(1, 0, 1, 1)] = 1.0;
        let stack = AttentionStack::new(w).unwrap();
        let products = rollout_products(&stack, &RolloutConfig::default()).unwrap();
        let r = &products[1];
        let expect = [[0.75, 0.25], [0.5, 0.5]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((r[(i, j)] - expect[i][j]).abs() < 1e-12);
            }
        }
        let map = rollout_map(&stack, &RolloutConfig::default()).unwrap();
        assert!((map.values[(0, 0)] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn non_square_patch_count_is_rejected() {
        let stack = uniform_stack(1, 1, 3); // 2 patches
        assert!(rollout_map(&stack, &RolloutConfig::default()).is_err());
    }

    #[test]
    fn upsample_preserves_constant_and_bounds() {
        let map = AttentionMap::new(
            Array2::from_elem((3, 3), 0.4),
            MapSpace::PatchGrid,
            MapProvenance::FullImage,
        )
        .unwrap();
        let up = upsample_map(&map, 12, 12, ResizeFilter::Bilinear).unwrap();
        assert_eq!(up.space, MapSpace::Pixel);
        assert!(up.values.iter().all(|&v| (v - 0.4).abs() < 1e-12));

        let random = synth::random_map(5, 7, 9);
        let (lo, hi) = random
            .values
            .iter()
            .fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        let up = upsample_map(&random, 20, 21, ResizeFilter::Bilinear).unwrap();
        assert!(up.values.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    #[test]
    fn upsample_to_same_size_is_identity() {
        let map = synth::random_map(6, 6, 2);
        let up = upsample_map(&map, 6, 6, ResizeFilter::Bilinear).unwrap();
        assert_eq!(up.values, map.values);
    }

    #[test]
    fn upsample_rejects_shrinking_and_zero() {
        let map = synth::random_map(4, 4, 2);
        assert!(upsample_map(&map, 2, 8, ResizeFilter::Bilinear).is_err());
        assert!(upsample_map(&map, 0, 8, ResizeFilter::Bilinear).is_err());
    }

    #[test]
    fn nearest_upsample_copies_blocks() {
        let map = AttentionMap::new(
            ndarray::array![[1.0, 2.0], [3.0, 4.0]],
            MapSpace::PatchGrid,
            MapProvenance::FullImage,
        )
        .unwrap();
        let up = upsample_map(&map, 4, 4, ResizeFilter::Nearest).unwrap();
        let expect = ndarray::array![
            [1.0, 1.0, 2.0, 2.0],
            [1.0, 1.0, 2.0, 2.0],
            [3.0, 3.0, 4.0, 4.0],
            [3.0, 3.0, 4.0, 4.0]
        ];
        assert_eq!(up.values, expect);
    }
}
