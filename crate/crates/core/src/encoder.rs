//! Minimal ViT-style encoder with attention capture.
//!
//! The encoder is a stack of pre-norm transformer blocks over patch tokens
//! plus a prepended CLS token. Every forward pass records the softmax
//! attention of every head in every layer, which is what the rest of the
//! pipeline consumes. Only the classification head (a 2-layer MLP with ReLU)
//! is trainable; the encoder body stays frozen.

use ndarray::{s, Array1, Array2, Array4, ArrayView1, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;

const LAYER_NORM_EPS: f64 = 1e-6;
const INIT_RANGE: f64 = 0.5;

/// Architecture of the encoder and its classification head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub image_side: usize,
    pub patch_side: usize,
    pub channels: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    pub mlp_hidden: usize,
    pub n_classes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::toy()
    }
}

impl EncoderConfig {
    /// Small configuration used for fast end-to-end runs: 64 px grayscale
    /// images, 8 px patches, 4 layers of 4 heads, 64-dim embeddings.
    pub fn toy() -> Self {
        EncoderConfig {
            image_side: 64,
            patch_side: 8,
            channels: 1,
            n_layers: 4,
            n_heads: 4,
            embed_dim: 64,
            mlp_hidden: 128,
            n_classes: 2,
        }
    }

    /// ViT-B/16 shapes at 384 px with a 200-way head. Used for shape checks
    /// only; no pretrained weights ship with this crate.
    pub fn reference() -> Self {
        EncoderConfig {
            image_side: 384,
            patch_side: 16,
            channels: 3,
            n_layers: 12,
            n_heads: 12,
            embed_dim: 768,
            mlp_hidden: 3072,
            n_classes: 200,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all_counts = [
            self.image_side,
            self.patch_side,
            self.channels,
            self.n_layers,
            self.n_heads,
            self.embed_dim,
            self.mlp_hidden,
            self.n_classes,
        ];
        if all_counts.iter().any(|&v| v == 0) {
            return Err(Error::Config("all encoder sizes must be >= 1".into()));
        }
        if self.image_side % self.patch_side != 0 {
            return Err(Error::Config(format!(
                "image_side {} not divisible by patch_side {}",
                self.image_side, self.patch_side
            )));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        Ok(())
    }

    /// Patches per image side.
    pub fn grid_side(&self) -> usize {
        self.image_side / self.patch_side
    }

    pub fn n_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Patch tokens plus the CLS token.
    pub fn n_tokens(&self) -> usize {
        self.n_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    /// Flattened patch length: `patch_side^2 * channels`.
    pub fn patch_dim(&self) -> usize {
        self.patch_side * self.patch_side * self.channels
    }
}

/// Token matrix `(n_tokens, embed_dim)`; row 0 is the CLS token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Array2<f64>,
}

impl TokenSequence {
    pub fn new(tokens: Array2<f64>) -> Result<Self> {
        if tokens.nrows() == 0 || tokens.ncols() == 0 {
            return Err(Error::Shape("empty token matrix".into()));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("token matrix has non-finite values".into()));
        }
        Ok(TokenSequence { tokens })
    }

    pub fn count(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn cls(&self) -> ArrayView1<'_, f64> {
        self.tokens.row(0)
    }
}

/// Per-layer, per-head softmax attention: `(n_layers, n_heads, T, T)`.
/// Every row of every head matrix is non-negative and sums to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    weights: Array4<f64>,
}

/// Row-sum slack accepted when constructing a stack from our own softmax.
pub const ROW_SUM_TOL: f64 = 1e-5;

impl AttentionStack {
    pub fn new(weights: Array4<f64>) -> Result<Self> {
        let (layers, heads, t1, t2) = weights.dim();
        if layers == 0 || heads == 0 || t1 == 0 {
            return Err(Error::Shape("empty attention stack".into()));
        }
        if t1 != t2 {
            return Err(Error::Shape(format!(
                "attention matrices must be square, got {t1}x{t2}"
            )));
        }
        for l in 0..layers {
            for h in 0..heads {
                for r in 0..t1 {
                    let row = weights.slice(s![l, h, r, ..]);
                    if row.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                        return Err(Error::Validation(format!(
                            "negative or non-finite attention at layer {l} head {h} row {r}"
                        )));
                    }
                    let sum: f64 = row.sum();
                    if (sum - 1.0).abs() > ROW_SUM_TOL {
                        return Err(Error::Validation(format!(
                            "attention row sums to {sum} at layer {l} head {h} row {r}"
                        )));
                    }
                }
            }
        }
        Ok(AttentionStack { weights })
    }

    pub fn n_layers(&self) -> usize {
        self.weights.dim().0
    }

    pub fn n_heads(&self) -> usize {
        self.weights.dim().1
    }

    pub fn n_tokens(&self) -> usize {
        self.weights.dim().2
    }

    pub fn weights(&self) -> &Array4<f64> {
        &self.weights
    }

    pub fn head(&self, layer: usize, head: usize) -> ndarray::ArrayView2<'_, f64> {
        self.weights.slice(s![layer, head, .., ..])
    }
}

/// Transformer block parameters. Matrices are laid out for row-vector
/// multiplication: `x (T,D) . w (D, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gamma: Array1<f64>,
    pub ln1_beta: Array1<f64>,
    pub qkv_w: Array2<f64>,
    pub qkv_b: Array1<f64>,
    pub out_w: Array2<f64>,
    pub out_b: Array1<f64>,
    pub ln2_gamma: Array1<f64>,
    pub ln2_beta: Array1<f64>,
    pub fc1_w: Array2<f64>,
    pub fc1_b: Array1<f64>,
    pub fc2_w: Array2<f64>,
    pub fc2_b: Array1<f64>,
}

/// The trainable classification head: `relu(x . fc1 + b1) . fc2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub fc1_w: Array2<f64>,
    pub fc1_b: Array1<f64>,
    pub fc2_w: Array2<f64>,
    pub fc2_b: Array1<f64>,
}

/// Gradient of a loss with respect to the head parameters.
#[derive(Debug, Clone)]
pub struct HeadGradient {
    pub fc1_w: Array2<f64>,
    pub fc1_b: Array1<f64>,
    pub fc2_w: Array2<f64>,
    pub fc2_b: Array1<f64>,
}

impl HeadGradient {
    pub fn zeros_like(head: &HeadWeights) -> Self {
        HeadGradient {
            fc1_w: Array2::zeros(head.fc1_w.dim()),
            fc1_b: Array1::zeros(head.fc1_b.dim()),
            fc2_w: Array2::zeros(head.fc2_w.dim()),
            fc2_b: Array1::zeros(head.fc2_b.dim()),
        }
    }

    pub fn add(&mut self, other: &HeadGradient) {
        self.fc1_w += &other.fc1_w;
        self.fc1_b += &other.fc1_b;
        self.fc2_w += &other.fc2_w;
        self.fc2_b += &other.fc2_b;
    }

    pub fn scale(&mut self, factor: f64) {
        self.fc1_w *= factor;
        self.fc1_b *= factor;
        self.fc2_w *= factor;
        self.fc2_b *= factor;
    }
}

/// All encoder and head parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    pub patch_w: Array2<f64>,
    pub patch_b: Array1<f64>,
    pub cls_token: Array1<f64>,
    pub pos_embed: Array2<f64>,
    pub layers: Vec<LayerWeights>,
    pub final_gamma: Array1<f64>,
    pub final_beta: Array1<f64>,
    pub head: HeadWeights,
}

impl WeightSet {
    /// Seeded uniform init in `[-0.5, 0.5]` for projections, embeddings and
    /// biases; layer-norm scales start at 1 and offsets at 0. Every value is
    /// rounded to f32 so weights survive the f32 container format exactly.
    pub fn seeded(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |n: usize| -> Array1<f64> {
            Array1::from_iter(
                (0..n).map(|_| (rng.random_range(-INIT_RANGE..=INIT_RANGE) as f32) as f64),
            )
        };
        let d = config.embed_dim;
        let mat = |rows: usize, cols: usize, rng_vals: &mut dyn FnMut(usize) -> Array1<f64>| {
            Array2::from_shape_vec((rows, cols), rng_vals(rows * cols).to_vec()).expect("shape")
        };

        let patch_w = mat(config.patch_dim(), d, &mut uniform);
        let patch_b = uniform(d);
        let cls_token = uniform(d);
        let pos_embed = mat(config.n_tokens(), d, &mut uniform);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                ln1_gamma: Array1::ones(d),
                ln1_beta: Array1::zeros(d),
                qkv_w: mat(d, 3 * d, &mut uniform),
                qkv_b: uniform(3 * d),
                out_w: mat(d, d, &mut uniform),
                out_b: uniform(d),
                ln2_gamma: Array1::ones(d),
                ln2_beta: Array1::zeros(d),
                fc1_w: mat(d, config.mlp_hidden, &mut uniform),
                fc1_b: uniform(config.mlp_hidden),
                fc2_w: mat(config.mlp_hidden, d, &mut uniform),
                fc2_b: uniform(d),
            });
        }
        let final_gamma = Array1::ones(d);
        let final_beta = Array1::zeros(d);
        let head = HeadWeights {
            fc1_w: mat(d, config.mlp_hidden, &mut uniform),
            fc1_b: uniform(config.mlp_hidden),
            fc2_w: mat(config.mlp_hidden, config.n_classes, &mut uniform),
            fc2_b: uniform(config.n_classes),
        };
        Ok(WeightSet {
            patch_w,
            patch_b,
            cls_token,
            pos_embed,
            layers,
            final_gamma,
            final_beta,
            head,
        })
    }

    pub fn validate_shapes(&self, config: &EncoderConfig) -> Result<()> {
        config.validate()?;
        let d = config.embed_dim;
        let check = |name: &str, ok: bool| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::Shape(format!("weight tensor {name} has a wrong shape")))
            }
        };
        check("patch_proj.weight", self.patch_w.dim() == (config.patch_dim(), d))?;
        check("patch_proj.bias", self.patch_b.len() == d)?;
        check("cls_token", self.cls_token.len() == d)?;
        check("pos_embed", self.pos_embed.dim() == (config.n_tokens(), d))?;
        if self.layers.len() != config.n_layers {
            return Err(Error::Shape(format!(
                "expected {} layers, found {}",
                config.n_layers,
                self.layers.len()
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let name = |part: &str| format!("layers.{i}.{part}");
            check(&name("ln1.gamma"), layer.ln1_gamma.len() == d)?;
            check(&name("ln1.beta"), layer.ln1_beta.len() == d)?;
            check(&name("qkv.weight"), layer.qkv_w.dim() == (d, 3 * d))?;
            check(&name("qkv.bias"), layer.qkv_b.len() == 3 * d)?;
            check(&name("out.weight"), layer.out_w.dim() == (d, d))?;
            check(&name("out.bias"), layer.out_b.len() == d)?;
            check(&name("ln2.gamma"), layer.ln2_gamma.len() == d)?;
            check(&name("ln2.beta"), layer.ln2_beta.len() == d)?;
            check(&name("mlp.fc1.weight"), layer.fc1_w.dim() == (d, config.mlp_hidden))?;
            check(&name("mlp.fc1.bias"), layer.fc1_b.len() == config.mlp_hidden)?;
            check(&name("mlp.fc2.weight"), layer.fc2_w.dim() == (config.mlp_hidden, d))?;
            check(&name("mlp.fc2.bias"), layer.fc2_b.len() == d)?;
        }
        check("ln_final.gamma", self.final_gamma.len() == d)?;
        check("ln_final.beta", self.final_beta.len() == d)?;
        check("head.fc1.weight", self.head.fc1_w.dim() == (d, config.mlp_hidden))?;
        check("head.fc1.bias", self.head.fc1_b.len() == config.mlp_hidden)?;
        check("head.fc2.weight", self.head.fc2_w.dim() == (config.mlp_hidden, config.n_classes))?;
        check("head.fc2.bias", self.head.fc2_b.len() == config.n_classes)?;
        Ok(())
    }
}

/// Split an image into non-overlapping patches, project them linearly, add
/// positional offsets and prepend the CLS token.
pub fn patch_embed(
    image: &Image,
    config: &EncoderConfig,
    weights: &WeightSet,
) -> Result<TokenSequence> {
    config.validate()?;
    if image.height() != config.image_side || image.width() != config.image_side {
        return Err(Error::Shape(format!(
            "expected {s}x{s} image, got {h}x{w}",
            s = config.image_side,
            h = image.height(),
            w = image.width()
        )));
    }
    if image.channels() != config.channels {
        return Err(Error::Shape(format!(
            "expected {} channels, got {}",
            config.channels,
            image.channels()
        )));
    }
    weights.validate_shapes(config)?;

    let grid = config.grid_side();
    let p = config.patch_side;
    let mut patches = Array2::zeros((config.n_patches(), config.patch_dim()));
    let data = image.data();
    for gy in 0..grid {
        for gx in 0..grid {
            let mut col = 0;
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..config.channels {
                        patches[(gy * grid + gx, col)] = data[(gy * p + py, gx * p + px, ch)];
                        col += 1;
                    }
                }
            }
        }
    }
    let projected = patches.dot(&weights.patch_w);
    let mut tokens = Array2::zeros((config.n_tokens(), config.embed_dim));
    tokens
        .row_mut(0)
        .assign(&(&weights.cls_token + &weights.pos_embed.row(0)));
    for i in 0..config.n_patches() {
        let row = &projected.row(i) + &weights.patch_b + &weights.pos_embed.row(i + 1);
        tokens.row_mut(i + 1).assign(&row);
    }
    TokenSequence::new(tokens)
}

fn layer_norm(x: &Array2<f64>, gamma: &Array1<f64>, beta: &Array1<f64>) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
    out * &gamma.view().insert_axis(Axis(0)) + &beta.view().insert_axis(Axis(0))
}

fn gelu(x: f64) -> f64 {
    // tanh approximation of the Gaussian error linear unit
    const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

/// Numerically stable in-place row softmax.
fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        row.iter_mut().for_each(|v| {
            *v = (*v - max).exp();
            sum += *v;
        });
        row.iter_mut().for_each(|v| *v /= sum);
    }
}

/// Run the transformer stack, returning the final tokens and the attention
/// of every layer and head.
pub fn encoder_forward(
    tokens: &TokenSequence,
    config: &EncoderConfig,
    weights: &WeightSet,
) -> Result<(TokenSequence, AttentionStack)> {
    config.validate()?;
    weights.validate_shapes(config)?;
    let t = config.n_tokens();
    let d = config.embed_dim;
    if tokens.tokens.dim() != (t, d) {
        return Err(Error::Shape(format!(
            "expected {t}x{d} tokens, got {}x{}",
            tokens.count(),
            tokens.tokens.ncols()
        )));
    }

    let heads = config.n_heads;
    let hd = config.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut x = tokens.tokens.clone();
    let mut stack = Array4::zeros((config.n_layers, heads, t, t));

    for (l, layer) in weights.layers.iter().enumerate() {
        let normed = layer_norm(&x, &layer.ln1_gamma, &layer.ln1_beta);
        let qkv = normed.dot(&layer.qkv_w) + &layer.qkv_b.view().insert_axis(Axis(0));
        let mut ctx = Array2::zeros((t, d));
        for h in 0..heads {
            let q = qkv.slice(s![.., h * hd..(h + 1) * hd]);
            let k = qkv.slice(s![.., d + h * hd..d + (h + 1) * hd]);
            let v = qkv.slice(s![.., 2 * d + h * hd..2 * d + (h + 1) * hd]);
            let mut scores = q.dot(&k.t()) * scale;
            softmax_rows(&mut scores);
            stack.slice_mut(s![l, h, .., ..]).assign(&scores);
            let head_ctx = scores.dot(&v);
            ctx.slice_mut(s![.., h * hd..(h + 1) * hd]).assign(&head_ctx);
        }
        let attn_out = ctx.dot(&layer.out_w) + &layer.out_b.view().insert_axis(Axis(0));
        x += &attn_out;

        let normed = layer_norm(&x, &layer.ln2_gamma, &layer.ln2_beta);
        let hidden = (normed.dot(&layer.fc1_w) + &layer.fc1_b.view().insert_axis(Axis(0)))
            .mapv(gelu);
        let mlp_out = hidden.dot(&layer.fc2_w) + &layer.fc2_b.view().insert_axis(Axis(0));
        x += &mlp_out;

        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: l });
        }
    }

    let x = layer_norm(&x, &weights.final_gamma, &weights.final_beta);
    Ok((TokenSequence::new(x)?, AttentionStack::new(stack)?))
}

/// Patch-embed then run the encoder in one call.
pub fn forward_image(
    image: &Image,
    config: &EncoderConfig,
    weights: &WeightSet,
) -> Result<(TokenSequence, AttentionStack)> {
    let tokens = patch_embed(image, config, weights)?;
    encoder_forward(&tokens, config, weights)
}

/// Classification head: `relu(x . fc1 + b1) . fc2 + b2`.
pub fn classify_head(cls: ArrayView1<'_, f64>, head: &HeadWeights) -> Result<Array1<f64>> {
    if cls.len() != head.fc1_w.nrows() {
        return Err(Error::Shape(format!(
            "cls token length {} does not match head input {}",
            cls.len(),
            head.fc1_w.nrows()
        )));
    }
    let hidden = (cls.dot(&head.fc1_w) + &head.fc1_b).mapv(|v| v.max(0.0));
    Ok(hidden.dot(&head.fc2_w) + &head.fc2_b)
}

/// `-log softmax(logits)[label]`, computed via log-sum-exp.
pub fn cross_entropy(logits: ArrayView1<'_, f64>, label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            n_classes: logits.len(),
        });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// Gradient of the *summed* cross-entropy of a batch with respect to the
/// head parameters, plus the summed loss. Callers divide by the batch size
/// when they want means.
pub fn head_gradient(
    head: &HeadWeights,
    batch: &[(Array1<f64>, usize)],
) -> Result<(HeadGradient, f64)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    let mut grad = HeadGradient::zeros_like(head);
    let mut loss_sum = 0.0;
    for (x, label) in batch {
        let pre = x.dot(&head.fc1_w) + &head.fc1_b;
        let hidden = pre.mapv(|v| v.max(0.0));
        let logits = hidden.dot(&head.fc2_w) + &head.fc2_b;
        loss_sum += cross_entropy(logits.view(), *label)?;

        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp = logits.mapv(|v| (v - max).exp());
        let mut dz = &exp / exp.sum();
        dz[*label] -= 1.0;

        // dW2 = hidden^T dz, db2 = dz
        for (i, &h) in hidden.iter().enumerate() {
            for (j, &g) in dz.iter().enumerate() {
                grad.fc2_w[(i, j)] += h * g;
            }
        }
        grad.fc2_b += &dz;

        let dh = head.fc2_w.dot(&dz);
        let dpre: Array1<f64> = dh
            .iter()
            .zip(pre.iter())
            .map(|(&g, &p)| if p > 0.0 { g } else { 0.0 })
            .collect();
        for (i, &xi) in x.iter().enumerate() {
            for (j, &g) in dpre.iter().enumerate() {
                grad.fc1_w[(i, j)] += xi * g;
            }
        }
        grad.fc1_b += &dpre;
    }
    Ok((grad, loss_sum))
}

/// One SGD step on the mean cross-entropy of a batch. Only head parameters
/// move. Returns the mean loss at the pre-update weights.
pub fn head_train_step(
    head: &mut HeadWeights,
    batch: &[(Array1<f64>, usize)],
    learning_rate: f64,
) -> Result<f64> {
    if !learning_rate.is_finite() || learning_rate < 0.0 {
        return Err(Error::Config(format!(
            "learning rate must be finite and >= 0, got {learning_rate}"
        )));
    }
    let (mut grad, loss_sum) = head_gradient(head, batch)?;
    let n = batch.len() as f64;
    grad.scale(1.0 / n);
    apply_head_gradient(head, &grad, learning_rate);
    Ok(loss_sum / n)
}

/// `head -= lr * grad`
pub fn apply_head_gradient(head: &mut HeadWeights, grad: &HeadGradient, learning_rate: f64) {
    head.fc1_w.scaled_add(-learning_rate, &grad.fc1_w);
    head.fc1_b.scaled_add(-learning_rate, &grad.fc1_b);
    head.fc2_w.scaled_add(-learning_rate, &grad.fc2_w);
    head.fc2_b.scaled_add(-learning_rate, &grad.fc2_b);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;

    fn toy() -> (EncoderConfig, WeightSet) {
        let config = EncoderConfig::toy();
        let weights = WeightSet::seeded(&config, 0).unwrap();
        (config, weights)
    }

    #[test]
    fn reference_config_has_577_tokens() {
        let config = EncoderConfig::reference();
        assert_eq!(config.n_tokens(), 577); // 24^2 + 1
        assert_eq!(config.n_classes, 200);
    }

    #[test]
    fn toy_config_has_65_tokens() {
        assert_eq!(EncoderConfig::toy().n_tokens(), 65);
    }

    #[test]
    fn config_rejects_indivisible_sides() {
        let mut config = EncoderConfig::toy();
        config.patch_side = 7;
        assert!(config.validate().is_err());
        let mut config = EncoderConfig::toy();
        config.n_heads = 5;
        assert!(config.validate().is_err());
    }

    #[test]
    fn zero_image_with_zero_offsets_gives_bias_rows() {
        let (config, mut weights) = toy();
        weights.pos_embed.fill(0.0);
        let image = Image::zeros(64, 64, 1);
        let tokens = patch_embed(&image, &config, &weights).unwrap();
        assert_eq!(tokens.count(), 65);
        for i in 1..65 {
            for (a, b) in tokens.tokens.row(i).iter().zip(weights.patch_b.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn patch_embed_rejects_wrong_size() {
        let (config, weights) = toy();
        let image = Image::zeros(32, 64, 1);
        let err = patch_embed(&image, &config, &weights).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        let image = Image::zeros(64, 64, 3);
        assert!(patch_embed(&image, &config, &weights).is_err());
    }

    #[test]
    fn forward_attention_rows_sum_to_one() {
        let (config, weights) = toy();
        let image = crate::synth::noise_image(64, 64, 1, 7);
        let (_, stack) = forward_image(&image, &config, &weights).unwrap();
        assert_eq!(stack.weights().dim(), (4, 4, 65, 65));
        for l in 0..4 {
            for h in 0..4 {
                for r in 0..65 {
                    let sum: f64 = stack.head(l, h).row(r).sum();
                    assert!((sum - 1.0).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let (config, weights) = toy();
        let image = crate::synth::noise_image(64, 64, 1, 3);
        let (t1, s1) = forward_image(&image, &config, &weights).unwrap();
        let (t2, s2) = forward_image(&image, &config, &weights).unwrap();
        assert_eq!(t1.tokens, t2.tokens);
        assert_eq!(s1.weights(), s2.weights());
    }

    #[test]
    fn classify_head_zero_weights_gives_zero_logits() {
        let head = HeadWeights {
            fc1_w: Array2::zeros((4, 6)),
            fc1_b: Array1::zeros(6),
            fc2_w: Array2::zeros((6, 3)),
            fc2_b: Array1::zeros(3),
        };
        let logits = classify_head(Array1::from(vec![1.0, -2.0, 3.0, 0.5]).view(), &head).unwrap();
        assert!(logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn classify_head_matches_hand_computed_relu_case() {
        // x = [1, -2, 3], identity fc1, identity fc2, b2 = [0.1, 0.2, 0.3]
        // hidden = relu(x) = [1, 0, 3]; logits = [1.1, 0.2, 3.3]
        let head = HeadWeights {
            fc1_w: Array2::eye(3),
            fc1_b: Array1::zeros(3),
            fc2_w: Array2::eye(3),
            fc2_b: Array1::from(vec![0.1, 0.2, 0.3]),
        };
        let logits = classify_head(Array1::from(vec![1.0, -2.0, 3.0]).view(), &head).unwrap();
        let expect = [1.1, 0.2, 3.3];
        for (a, b) in logits.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_n() {
        let logits = Array1::from(vec![0.7; 5]);
        let loss = cross_entropy(logits.view(), 2).unwrap();
        assert!((loss - 5.0_f64.ln()).abs() < 1e-12);
        // same loss for every label
        for label in 0..5 {
            let l = cross_entropy(logits.view(), label).unwrap();
            assert!((l - loss).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_matches_analytic_value() {
        let logits = Array1::from(vec![10.0, 0.0, 0.0]);
        let loss = cross_entropy(logits.view(), 0).unwrap();
        let expect = (1.0 + 2.0 * (-10.0_f64).exp()).ln();
        assert!((loss - expect).abs() < 1e-15);
        assert!((loss - 9.08e-5).abs() < 1e-7);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let logits = Array1::from(vec![0.0, 0.0]);
        assert!(matches!(
            cross_entropy(logits.view(), 2),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let head = crate::synth::random_head(4, 5, 3, &mut rng);
        let batch: Vec<(Array1<f64>, usize)> = (0..6)
            .map(|i| {
                let x = Array1::from_iter((0..4).map(|_| rng.random_range(-1.0..1.0)));
                (x, i % 3)
            })
            .collect();
        let (grad, _) = head_gradient(&head, &batch).unwrap();
        let fd = oracle::finite_diff_head_gradient(&head, 1e-4, |h| {
            batch
                .iter()
                .map(|(x, y)| {
                    cross_entropy(classify_head(x.view(), h).unwrap().view(), *y).unwrap()
                })
                .sum()
        });
        let worst = oracle::max_relative_gradient_error(&grad, &fd);
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn zero_learning_rate_leaves_weights_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut head = crate::synth::random_head(4, 5, 3, &mut rng);
        let before = head.clone();
        let batch = vec![(Array1::from(vec![0.3, -0.2, 0.5, 0.1]), 1usize)];
        head_train_step(&mut head, &batch, 0.0).unwrap();
        assert_eq!(head, before);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut head = crate::synth::random_head(4, 5, 3, &mut rng);
        assert!(matches!(
            head_train_step(&mut head, &[], 0.1),
            Err(Error::EmptyInput("batch"))
        ));
    }

    #[test]
    fn separable_point_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut head = crate::synth::random_head(4, 8, 2, &mut rng);
        let batch = vec![(Array1::from(vec![1.0, -0.5, 0.25, 2.0]), 0usize)];
        let mut loss = f64::MAX;
        for _ in 0..200 {
            loss = head_train_step(&mut head, &batch, 0.5).unwrap();
        }
        assert!(loss < 0.01, "final loss {loss}");
    }
}
