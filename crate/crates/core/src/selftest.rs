//! Built-in sanity suite: quick, seeded checks of every numeric kernel
//! against its reference implementation or a frozen hand-computed value.
//! Each suite returns a one-line detail string; the CLI `selftest`
//! subcommand prints one pass/fail line per suite.

use ndarray::{Array1, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::{AugmentConfig, FillMode};
use crate::encoder::{
    classify_head, cross_entropy, head_gradient, EncoderConfig, WeightSet,
};
use crate::io::tensor::{decode_tensor, encode_tensor};
use crate::io::weights::{decode_weights, encode_weights};
use crate::localize::{
    binary_close, label_components, localize_object, Connectivity, LocalizeConfig,
};
use crate::oracle;
use crate::pipeline::{joint_loss, run_stages, PipelineConfig, RunMode};
use crate::regions::{
    kernel_from_object, nms_topk, RatioMode, ScoringConfig, SummedAreaTable,
};
use crate::rollout::{rollout_products, HeadFusion, RolloutConfig};
use crate::synth;

/// Outcome of a single selftest suite.
#[derive(Debug, Clone)]
pub struct SelftestResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Suite = fn() -> Result<String, String>;

fn check(ok: bool, msg: &str) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.to_string())
    }
}

fn rollout_row_stochastic() -> Result<String, String> {
    let config = RolloutConfig::default();
    let mut checked = 0usize;
    for seed in 0..12u64 {
        let stack = synth::random_stack(3, 2, 7, seed);
        let products = rollout_products(&stack, &config).map_err(|e| e.to_string())?;
        for matrix in &products {
            for row in matrix.rows() {
                let sum: f64 = row.sum();
                check((sum - 1.0).abs() <= 1e-5, &format!("row sum {sum} off unit"))?;
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} rollout rows within 1e-5 of unit sum"))
}

fn rollout_hand_case() -> Result<String, String> {
    // Two layers, one head, two tokens; attention rows chosen so the
    // residual-mixed product is computable by hand.
    let mut weights = ndarray::Array4::zeros((2, 1, 2, 2));
    weights[[0, 0, 0, 0]] = 1.0;
    weights[[0, 0, 1, 0]] = 1.0;
    weights[[1, 0, 0, 1]] = 1.0;
    weights[[1, 0, 1, 1]] = 1.0;
    let stack = crate::encoder::AttentionStack::new(weights).map_err(|e| e.to_string())?;
    let products =
        rollout_products(&stack, &RolloutConfig::default()).map_err(|e| e.to_string())?;
    let expected = [[0.75, 0.25], [0.5, 0.5]];
    let last = products.last().ok_or("no products")?;
    for y in 0..2 {
        for x in 0..2 {
            check(
                (last[[y, x]] - expected[y][x]).abs() <= 1e-6,
                &format!("hand rollout mismatch at ({y},{x}): {}", last[[y, x]]),
            )?;
        }
    }
    Ok("two-layer hand case matches to 1e-6".to_string())
}

fn rollout_matches_reference() -> Result<String, String> {
    let mut worst = 0.0f64;
    for (seed, fusion) in [(1, HeadFusion::Mean), (2, HeadFusion::Max), (3, HeadFusion::Min)] {
        let stack = synth::random_stack(4, 3, 10, seed);
        let config = RolloutConfig { fusion };
        let fast = rollout_products(&stack, &config)
            .map_err(|e| e.to_string())?
            .pop()
            .ok_or("no products")?;
        let slow = oracle::rollout_reference(&stack, fusion);
        for (a, b) in fast.iter().zip(slow.iter()) {
            worst = worst.max((a - b).abs());
        }
    }
    check(worst <= 1e-12, &format!("rollout deviates from reference by {worst}"))?;
    Ok(format!("max deviation from reference {worst:.1e}"))
}

fn integral_window_means() -> Result<String, String> {
    let mut worst = 0.0f64;
    let mut windows = 0usize;
    for seed in 0..8u64 {
        let map = synth::random_map(13, 9, seed);
        let table = SummedAreaTable::new(map.values.view()).map_err(|e| e.to_string())?;
        for kh in [1, 2, 5] {
            for kw in [1, 3, 7] {
                let brute = oracle::window_means_brute(&map.values, kh, kw);
                for ((y, x), &want) in brute.indexed_iter() {
                    let got = table.mean(y, x, y + kh, x + kw);
                    worst = worst.max((got - want).abs());
                    windows += 1;
                }
            }
        }
    }
    check(worst <= 1e-6, &format!("integral-image mean off by {worst}"))?;
    Ok(format!("{windows} windows, max abs error {worst:.1e}"))
}

fn nms_matches_oracle() -> Result<String, String> {
    for seed in 0..40u64 {
        let candidates = synth::random_candidates(24, 16, 16, seed);
        let fast = nms_topk(&candidates, 0.25, 4);
        let slow = oracle::nms_greedy_reference(&candidates, 0.25, 4);
        check(fast == slow, &format!("NMS disagrees with oracle at seed {seed}"))?;
    }
    Ok("40 candidate sets match the quadratic oracle exactly".to_string())
}

fn kernel_reference_values() -> Result<String, String> {
    let mut config = ScoringConfig { kernel_ratio: 0.3, ..ScoringConfig::default() };
    let (h, w) = kernel_from_object(384, 384, &config).map_err(|e| e.to_string())?;
    check((h, w) == (115, 115), &format!("linear kernel gave {h}x{w}, want 115x115"))?;
    config.kernel_snap = Some(16);
    let snapped = kernel_from_object(384, 384, &config).map_err(|e| e.to_string())?;
    check(snapped == (112, 112), &format!("snapped kernel gave {snapped:?}, want 112x112"))?;
    config.kernel_snap = None;
    config.ratio_mode = RatioMode::Area;
    let area = kernel_from_object(384, 384, &config).map_err(|e| e.to_string())?;
    check(area == (210, 210), &format!("area kernel gave {area:?}, want 210x210"))?;
    Ok("kernel sides 115 / 112 (snap 16) / 210 (area) at 384, ratio 0.3".to_string())
}

fn localization_box_contains_argmax() -> Result<String, String> {
    let config = LocalizeConfig::default();
    for seed in 0..30u64 {
        let map = synth::random_map(12, 12, seed);
        let (bbox, _) = localize_object(&map, &config).map_err(|e| e.to_string())?;
        let (ay, ax) = map.argmax();
        check(
            bbox.contains(ay, ax),
            &format!("box {bbox:?} misses argmax ({ay},{ax}) at seed {seed}"),
        )?;
    }
    Ok("30 object boxes all contain the attention argmax".to_string())
}

fn labeling_matches_flood_fill() -> Result<String, String> {
    for seed in 0..20u64 {
        let mask = synth::random_mask(16, 16, 0.4, seed);
        for connectivity in [Connectivity::Four, Connectivity::Eight] {
            let (fast, n_fast) = label_components(&mask, connectivity);
            let (slow, n_slow) = oracle::flood_fill_labels(&mask, connectivity);
            check(
                n_fast == n_slow && oracle::same_partition(&fast, &slow),
                &format!("labeling disagrees with flood fill at seed {seed}"),
            )?;
        }
    }
    Ok("20 masks partitioned identically to the flood-fill oracle".to_string())
}

fn closing_extensive_idempotent() -> Result<String, String> {
    for seed in 0..15u64 {
        let mask = synth::random_mask(14, 14, 0.3, seed);
        for radius in [1usize, 2] {
            let closed = binary_close(&mask, radius);
            check(mask.subset_of(&closed), &format!("closing lost pixels at seed {seed}"))?;
            let twice = binary_close(&closed, radius);
            check(twice == closed, &format!("closing not idempotent at seed {seed}"))?;
        }
    }
    Ok("closing is extensive and idempotent on 15 masks, radii 1-2".to_string())
}

fn erase_is_exact() -> Result<String, String> {
    let config = AugmentConfig {
        erase_probability: 1.0,
        erase_threshold: 0.5,
        fill: FillMode::Zero,
        ..AugmentConfig::default()
    };
    for seed in 0..10u64 {
        let image = synth::noise_image(8, 8, 3, seed);
        let map = synth::random_map(8, 8, seed + 100);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let outcome =
            crate::augment::attention_erase(&image, &map, &config, &mut rng)
                .map_err(|e| e.to_string())?;
        check(outcome.fired, "erase with probability one did not fire")?;
        let max = map.max();
        for y in 0..8 {
            for x in 0..8 {
                let erased = map.values[[y, x]] / max > 0.5;
                for c in 0..3 {
                    let got = outcome.image.data()[[y, x, c]];
                    let want = if erased { 0.0 } else { image.data()[[y, x, c]] };
                    check(
                        got.to_bits() == want.to_bits(),
                        &format!("pixel ({y},{x},{c}) is {got}, want {want}"),
                    )?;
                }
            }
        }
    }
    Ok("erase output matches the threshold predicate bit for bit".to_string())
}

fn joint_loss_is_additive() -> Result<String, String> {
    let mut worst = 0.0f64;
    for seed in 0..25u64 {
        let n_parts = (seed % 4) as usize;
        let outputs = synth::random_stage_outputs(5, n_parts, seed);
        let loss = joint_loss(&outputs, 2).map_err(|e| e.to_string())?;
        let parts: f64 = loss.l_c.iter().sum();
        worst = worst.max((loss.total - (loss.l_a + loss.l_b + parts)).abs());
        worst = worst.max((loss.total - oracle::joint_loss_reference(&outputs, 2)).abs());
    }
    check(worst <= 1e-9, &format!("joint loss additivity off by {worst}"))?;
    Ok(format!("25 stage outputs additive within {worst:.1e}"))
}

fn head_gradient_matches_finite_differences() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let head = synth::random_head(6, 10, 3, &mut rng);
    let batch: Vec<(Array1<f64>, usize)> = (0..4)
        .map(|i| {
            let x = Array1::from_shape_fn(6, |_| rng.random_range(-1.0..1.0));
            (x, i % 3)
        })
        .collect();
    let (analytic, _) = head_gradient(&head, &batch).map_err(|e| e.to_string())?;
    let numeric = oracle::finite_diff_head_gradient(&head, 1e-4, |h| {
        batch
            .iter()
            .map(|(x, y)| {
                cross_entropy(classify_head(x.view(), h).expect("shapes fixed").view(), *y)
                    .expect("label in range")
            })
            .sum()
    });
    let err = oracle::max_relative_gradient_error(&analytic, &numeric);
    check(err <= 1e-4, &format!("gradient relative error {err}"))?;
    Ok(format!("max relative error vs central differences {err:.1e}"))
}

fn tensor_and_weights_roundtrip() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let tensor =
        ArrayD::from_shape_fn(ndarray::IxDyn(&[3, 4, 2]), |_| {
            (rng.random::<f64>() as f32) as f64
        });
    let bytes = encode_tensor(&tensor).map_err(|e| e.to_string())?;
    let back = decode_tensor(&bytes).map_err(|e| e.to_string())?;
    check(back == tensor, "tensor round-trip changed values")?;
    let bytes2 = encode_tensor(&back).map_err(|e| e.to_string())?;
    check(bytes == bytes2, "tensor re-encode changed bytes")?;

    let config = EncoderConfig::toy();
    let weights = WeightSet::seeded(&config, 77).map_err(|e| e.to_string())?;
    let blob = encode_weights(&weights).map_err(|e| e.to_string())?;
    let decoded = decode_weights(&blob, &config).map_err(|e| e.to_string())?;
    let blob2 = encode_weights(&decoded).map_err(|e| e.to_string())?;
    check(blob == blob2, "weights re-encode changed bytes")?;
    Ok(format!("tensor and {}-byte weight blob round-trip bitwise", blob.len()))
}

fn pipeline_eval_is_deterministic() -> Result<String, String> {
    let config = PipelineConfig::default();
    let weights = WeightSet::seeded(&config.encoder, 5).map_err(|e| e.to_string())?;
    let image = synth::noise_image(128, 128, 1, 6);
    let mut rng_a = ChaCha8Rng::seed_from_u64(1);
    let mut rng_b = ChaCha8Rng::seed_from_u64(2);
    let first =
        run_stages(&image, &config, &weights, RunMode::Eval, &mut rng_a)
            .map_err(|e| e.to_string())?;
    let second =
        run_stages(&image, &config, &weights, RunMode::Eval, &mut rng_b)
            .map_err(|e| e.to_string())?;
    check(first == second, "eval pipeline differs between runs")?;
    Ok(format!(
        "two eval runs identical; {} part boxes, object box {:?}",
        first.part_boxes.len(),
        first.box_object
    ))
}

const SUITES: &[(&str, Suite)] = &[
    ("rollout-row-stochastic", rollout_row_stochastic),
    ("rollout-hand-case", rollout_hand_case),
    ("rollout-reference-agreement", rollout_matches_reference),
    ("integral-window-means", integral_window_means),
    ("nms-oracle-agreement", nms_matches_oracle),
    ("kernel-reference-values", kernel_reference_values),
    ("localization-box-argmax", localization_box_contains_argmax),
    ("component-labeling-oracle", labeling_matches_flood_fill),
    ("closing-extensive-idempotent", closing_extensive_idempotent),
    ("erase-exactness", erase_is_exact),
    ("joint-loss-additivity", joint_loss_is_additive),
    ("head-gradient-finite-diff", head_gradient_matches_finite_differences),
    ("tensor-weights-roundtrip", tensor_and_weights_roundtrip),
    ("pipeline-eval-determinism", pipeline_eval_is_deterministic),
];

/// Run every suite and collect results; never panics on failure, so all
/// suites report even when an early one breaks.
pub fn run_selftest() -> Vec<SelftestResult> {
    SUITES
        .iter()
        .map(|(name, suite)| match suite() {
            Ok(detail) => SelftestResult { name, passed: true, detail },
            Err(detail) => SelftestResult { name, passed: false, detail },
        })
        .collect()
}
