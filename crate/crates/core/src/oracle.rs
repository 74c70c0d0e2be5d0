//! Independent reference implementations used to cross-check the optimized
//! paths. Everything here is written the slow, obvious way on purpose — no
//! shared code with the implementations under test — and is exercised both
//! by the test suite and by the `selftest` CLI subcommand.

use ndarray::{Array2, ArrayView2};

use crate::encoder::{AttentionStack, HeadGradient, HeadWeights};
use crate::localize::{BinaryMask, Connectivity};
use crate::pipeline::StageOutputs;
use crate::regions::RegionCandidate;
use crate::rollout::HeadFusion;

/// Plain double-loop window sum.
pub fn window_sum_brute(map: &Array2<f64>, y: usize, x: usize, kh: usize, kw: usize) -> f64 {
    let mut sum = 0.0;
    for yy in y..y + kh {
        for xx in x..x + kw {
            sum += map[(yy, xx)];
        }
    }
    sum
}

/// Mean of every window position at stride 1, by brute force.
pub fn window_means_brute(map: &Array2<f64>, kh: usize, kw: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    let area = (kh * kw) as f64;
    Array2::from_shape_fn((h - kh + 1, w - kw + 1), |(y, x)| {
        window_sum_brute(map, y, x, kh, kw) / area
    })
}

/// Top-left corner of the best window by mean, brute force; row-major
/// tie-break.
pub fn argmax_window_mean(map: &Array2<f64>, kh: usize, kw: usize) -> (usize, usize) {
    let means = window_means_brute(map, kh, kw);
    let mut best = (0, 0);
    for ((y, x), &v) in means.indexed_iter() {
        if v > means[best] {
            best = (y, x);
        }
    }
    best
}

fn iou_ref(a: &RegionCandidate, b: &RegionCandidate) -> f64 {
    let ix0 = a.bbox.x0.max(b.bbox.x0) as f64;
    let iy0 = a.bbox.y0.max(b.bbox.y0) as f64;
    let ix1 = a.bbox.x1.min(b.bbox.x1) as f64;
    let iy1 = a.bbox.y1.min(b.bbox.y1) as f64;
    let inter = (ix1 - ix0).max(0.0) * (iy1 - iy0).max(0.0);
    let area_a = (a.bbox.x1 - a.bbox.x0) as f64 * (a.bbox.y1 - a.bbox.y0) as f64;
    let area_b = (b.bbox.x1 - b.bbox.x0) as f64 * (b.bbox.y1 - b.bbox.y0) as f64;
    inter / (area_a + area_b - inter)
}

/// O(n²) greedy NMS without pre-sorting: each round scans the whole
/// remaining pool for the best candidate (score, then top-left row-major),
/// accepts it, and removes everything overlapping it too much.
pub fn nms_greedy_reference(
    candidates: &[RegionCandidate],
    iou_threshold: f64,
    top_k: usize,
) -> Vec<RegionCandidate> {
    let mut pool: Vec<RegionCandidate> = candidates.to_vec();
    let mut kept = Vec::new();
    while kept.len() < top_k && !pool.is_empty() {
        let mut best = 0;
        for i in 1..pool.len() {
            let better = pool[i].score > pool[best].score
                || (pool[i].score == pool[best].score
                    && (pool[i].bbox.y0, pool[i].bbox.x0)
                        < (pool[best].bbox.y0, pool[best].bbox.x0));
            if better {
                best = i;
            }
        }
        let chosen = pool.remove(best);
        pool.retain(|c| iou_ref(&chosen, c) <= iou_threshold);
        kept.push(chosen);
    }
    kept
}

/// BFS flood fill labeling; labels are assigned in raster order of first
/// discovery, starting at 1.
pub fn flood_fill_labels(mask: &BinaryMask, connectivity: Connectivity) -> (Array2<usize>, usize) {
    let (h, w) = (mask.height(), mask.width());
    let mut labels = Array2::from_elem((h, w), 0usize);
    let mut count = 0;
    let offsets: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity::Eight => &[
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ],
    };
    for sy in 0..h {
        for sx in 0..w {
            if !mask.bits[(sy, sx)] || labels[(sy, sx)] != 0 {
                continue;
            }
            count += 1;
            let mut queue = std::collections::VecDeque::new();
            labels[(sy, sx)] = count;
            queue.push_back((sy, sx));
            while let Some((y, x)) = queue.pop_front() {
                for &(dy, dx) in offsets {
                    let ny = y as isize + dy;
                    let nx = x as isize + dx;
                    if ny < 0 || nx < 0 || ny as usize >= h || nx as usize >= w {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    if mask.bits[(ny, nx)] && labels[(ny, nx)] == 0 {
                        labels[(ny, nx)] = count;
                        queue.push_back((ny, nx));
                    }
                }
            }
        }
    }
    (labels, count)
}

/// True when two labelings induce the same partition of the foreground
/// (label numbering may differ).
pub fn same_partition(a: &Array2<usize>, b: &Array2<usize>) -> bool {
    if a.dim() != b.dim() {
        return false;
    }
    let mut a_to_b = std::collections::HashMap::new();
    let mut b_to_a = std::collections::HashMap::new();
    for (la, lb) in a.iter().zip(b.iter()) {
        if (*la == 0) != (*lb == 0) {
            return false;
        }
        if *la == 0 {
            continue;
        }
        if *a_to_b.entry(*la).or_insert(*lb) != *lb {
            return false;
        }
        if *b_to_a.entry(*lb).or_insert(*la) != *la {
            return false;
        }
    }
    true
}

/// Central finite differences of a scalar function of the head parameters.
pub fn finite_diff_head_gradient<F>(head: &HeadWeights, eps: f64, f: F) -> HeadGradient
where
    F: Fn(&HeadWeights) -> f64,
{
    let mut grad = HeadGradient::zeros_like(head);
    let mut probe = head.clone();

    macro_rules! diff_field {
        ($field:ident) => {
            for idx in 0..head.$field.len() {
                let orig = head.$field.as_slice().unwrap()[idx];
                probe.$field.as_slice_mut().unwrap()[idx] = orig + eps;
                let hi = f(&probe);
                probe.$field.as_slice_mut().unwrap()[idx] = orig - eps;
                let lo = f(&probe);
                probe.$field.as_slice_mut().unwrap()[idx] = orig;
                grad.$field.as_slice_mut().unwrap()[idx] = (hi - lo) / (2.0 * eps);
            }
        };
    }
    diff_field!(fc1_w);
    diff_field!(fc1_b);
    diff_field!(fc2_w);
    diff_field!(fc2_b);
    grad
}

fn fold_gradient_pairs<F>(a: &HeadGradient, b: &HeadGradient, mut f: F) -> f64
where
    F: FnMut(f64, f64) -> f64,
{
    let mut worst: f64 = 0.0;
    for (x, y) in a
        .fc1_w
        .iter()
        .zip(b.fc1_w.iter())
        .chain(a.fc1_b.iter().zip(b.fc1_b.iter()))
        .chain(a.fc2_w.iter().zip(b.fc2_w.iter()))
        .chain(a.fc2_b.iter().zip(b.fc2_b.iter()))
    {
        worst = worst.max(f(*x, *y));
    }
    worst
}

/// Max over parameters of `|a - b| / max(|a|, |b|, 1e-3)`.
pub fn max_relative_gradient_error(a: &HeadGradient, b: &HeadGradient) -> f64 {
    fold_gradient_pairs(a, b, |x, y| (x - y).abs() / x.abs().max(y.abs()).max(1e-3))
}

/// Max over parameters of `|a - b|`.
pub fn max_gradient_difference(a: &HeadGradient, b: &HeadGradient) -> f64 {
    fold_gradient_pairs(a, b, |x, y| (x - y).abs())
}

/// Standalone joint loss: softmax cross-entropy per stage, summed, written
/// without the library's log-sum-exp helper.
pub fn joint_loss_reference(outputs: &StageOutputs, label: usize) -> f64 {
    fn ce(logits: ndarray::ArrayView1<'_, f64>, label: usize) -> f64 {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        -(exps[label] / sum).ln()
    }
    let mut total = ce(outputs.logits_a.view(), label) + ce(outputs.logits_b.view(), label);
    for logits in &outputs.logits_c {
        total += ce(logits.view(), label);
    }
    total
}

/// Brute-force rollout: fuse heads with explicit loops, mix in the identity,
/// normalize rows, and multiply layer matrices with a triple loop.
pub fn rollout_reference(stack: &AttentionStack, fusion: HeadFusion) -> Array2<f64> {
    let t = stack.n_tokens();
    let heads = stack.n_heads();
    let mut result: Option<Array2<f64>> = None;
    for layer in 0..stack.n_layers() {
        let mut fused = Array2::zeros((t, t));
        for i in 0..t {
            for j in 0..t {
                let vals: Vec<f64> = (0..heads).map(|h| stack.head(layer, h)[(i, j)]).collect();
                fused[(i, j)] = match fusion {
                    HeadFusion::Mean => vals.iter().sum::<f64>() / heads as f64,
                    HeadFusion::Max => vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                    HeadFusion::Min => vals.iter().cloned().fold(f64::INFINITY, f64::min),
                };
            }
        }
        for i in 0..t {
            for j in 0..t {
                fused[(i, j)] = 0.5 * fused[(i, j)] + if i == j { 0.5 } else { 0.0 };
            }
        }
        for i in 0..t {
            let sum: f64 = (0..t).map(|j| fused[(i, j)]).sum();
            for j in 0..t {
                fused[(i, j)] /= sum;
            }
        }
        result = Some(match result {
            None => fused,
            Some(prev) => matmul_ref(fused.view(), prev.view()),
        });
    }
    result.expect("stack has at least one layer")
}

fn matmul_ref(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let (n, k) = a.dim();
    let (_, m) = b.dim();
    let mut out = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for kk in 0..k {
                acc += a[(i, kk)] * b[(kk, j)];
            }
            out[(i, j)] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    #[test]
    fn flood_fill_counts_an_l_shape_as_one_component() {
        let bits = ndarray::array![
            [true, false, false],
            [true, false, true],
            [true, true, true]
        ];
        let (_, count) = flood_fill_labels(&BinaryMask::new(bits), Connectivity::Four);
        assert_eq!(count, 1);
    }

    #[test]
    fn same_partition_detects_label_permutations_and_mismatches() {
        let a = ndarray::array![[1usize, 0], [0, 2]];
        let b = ndarray::array![[2usize, 0], [0, 1]];
        let c = ndarray::array![[1usize, 0], [0, 1]];
        assert!(same_partition(&a, &b));
        assert!(!same_partition(&a, &c));
    }

    #[test]
    fn reference_rollout_agrees_with_fast_path() {
        let stack = synth::random_stack(3, 2, 7, 5);
        let reference = rollout_reference(&stack, HeadFusion::Mean);
        let fast = crate::rollout::rollout_products(&stack, &Default::default())
            .unwrap()
            .pop()
            .unwrap();
        let worst = (&reference - &fast)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst < 1e-12, "max difference {worst}");
    }

    #[test]
    fn brute_window_means_have_expected_shape() {
        let map = synth::random_map(6, 9, 3);
        let means = window_means_brute(&map.values, 2, 3);
        assert_eq!(means.dim(), (5, 7));
    }
}
