//! Fixed, differentiable image-to-feature map.
//!
//! The default stack is three stride-2 convolutions with leaky-ReLU
//! activations, global average pooling and a linear head. Weights are drawn
//! from a seeded distribution, rescaled so every linear layer has unit
//! operator norm, and never trained afterwards. The map is bias-free, so the
//! zero image maps to the zero feature vector.

mod io;
mod layers;

pub use io::{load_extractor, save_extractor};
pub use layers::{Conv2d, Dense, Layer, Shape, Tensor};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{shape_error, Image, MAX_INTENSITY};

/// Power-iteration rounds used for operator norm estimates.
pub const POWER_ITERATIONS: usize = 50;

/// Output of the extractor for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn zeros(dim: usize) -> Self {
        FeatureVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.0.iter().zip(other).map(|(a, b)| a * b).sum()
    }

    pub fn sub(&self, other: &FeatureVector) -> FeatureVector {
        FeatureVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| v.abs().max(m))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for FeatureVector {
    fn from(v: Vec<f64>) -> Self {
        FeatureVector(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    /// Output channels of the three convolutions; the last must be at least
    /// `feature_dim` for the feature Jacobian to reach full rank.
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub feature_dim: usize,
    pub leak: f64,
    /// Target Lipschitz bound of the whole map w.r.t. raw pixel intensities.
    pub lipschitz_scale: f64,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            input_height: 32,
            input_width: 32,
            input_channels: 3,
            conv_channels: vec![8, 16, 64],
            kernel: 3,
            feature_dim: 64,
            leak: 0.1,
            lipschitz_scale: 0.25,
            seed: 0x1C_5EED,
        }
    }
}

/// Immutable extractor parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorWeights {
    seed: u64,
    input: (usize, usize, usize),
    feature_dim: usize,
    lipschitz_scale: f64,
    layers: Vec<Layer>,
    normalized: bool,
}

impl ExtractorWeights {
    /// Seeded stack followed by Lipschitz normalization.
    pub fn new(config: &ExtractorConfig) -> Result<Self> {
        Self::random(config)?.normalize_lipschitz()
    }

    /// Seeded stack before normalization.
    pub fn random(config: &ExtractorConfig) -> Result<Self> {
        if config.conv_channels.len() != 3 {
            return Err(Error::InvalidArgument("exactly three convolutions expected".into()));
        }
        if config.feature_dim == 0 || config.kernel == 0 {
            return Err(Error::InvalidArgument("feature_dim and kernel must be positive".into()));
        }
        if !(config.lipschitz_scale > 0.0 && config.lipschitz_scale <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "lipschitz_scale must be in (0, 1], got {}",
                config.lipschitz_scale
            )));
        }
        if !(0.0..=1.0).contains(&config.leak) {
            return Err(Error::InvalidArgument("leak must lie in [0, 1]".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut layers = vec![Layer::Scale(1.0 / MAX_INTENSITY)];
        let mut shape = Shape {
            c: config.input_channels,
            h: config.input_height,
            w: config.input_width,
        };
        for &out in &config.conv_channels {
            let fan_in = shape.c * config.kernel * config.kernel;
            let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).unwrap();
            let conv = Conv2d {
                in_channels: shape.c,
                out_channels: out,
                kernel: config.kernel,
                stride: 2,
                padding: config.kernel / 2,
                weights: (0..out * fan_in).map(|_| normal.sample(&mut rng)).collect(),
            };
            let layer = Layer::Conv(conv);
            if !layer.accepts(shape) {
                return Err(Error::InvalidArgument(format!("input too small for convolution: {shape:?}")));
            }
            shape = layer.output_shape(shape);
            layers.push(layer);
            layers.push(Layer::LeakyRelu(config.leak));
        }
        let pooled_positions = (shape.h * shape.w) as f64;
        layers.push(Layer::GlobalAvgPool);
        let normal = Normal::new(0.0, (1.0 / shape.c as f64).sqrt()).unwrap();
        layers.push(Layer::Dense(Dense {
            rows: config.feature_dim,
            cols: shape.c,
            weights: (0..config.feature_dim * shape.c)
                .map(|_| normal.sample(&mut rng))
                .collect(),
        }));
        // Undo the fixed input scaling and pooling contraction so that the
        // composed bound equals `lipschitz_scale` once linear layers are unit norm.
        layers.push(Layer::Scale(
            config.lipschitz_scale * MAX_INTENSITY * pooled_positions.sqrt(),
        ));
        Ok(ExtractorWeights {
            seed: config.seed,
            input: (config.input_height, config.input_width, config.input_channels),
            feature_dim: config.feature_dim,
            lipschitz_scale: config.lipschitz_scale,
            layers,
            normalized: false,
        })
    }

    /// Arbitrary layer stack over images of shape `input` (`H, W, C`).
    pub fn from_layers(input: (usize, usize, usize), layers: Vec<Layer>, seed: u64) -> Result<Self> {
        let mut shape = Shape {
            c: input.2,
            h: input.0,
            w: input.1,
        };
        for layer in &layers {
            if !layer.accepts(shape) {
                return Err(Error::InvalidArgument(format!(
                    "layer {layer:?} does not accept input {shape:?}"
                )));
            }
            shape = layer.output_shape(shape);
        }
        if shape.h != 1 || shape.w != 1 {
            return Err(Error::InvalidArgument("stack must end in a vector".into()));
        }
        let mut weights = ExtractorWeights {
            seed,
            input,
            feature_dim: shape.c,
            lipschitz_scale: f64::NAN,
            layers,
            normalized: false,
        };
        weights.lipschitz_scale = weights.lipschitz_bound();
        Ok(weights)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input
    }

    pub fn lipschitz_scale(&self) -> f64 {
        self.lipschitz_scale
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    fn input_tensor_shape(&self) -> Shape {
        Shape {
            c: self.input.2,
            h: self.input.0,
            w: self.input.1,
        }
    }

    fn layer_input_shapes(&self) -> Vec<Shape> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut shape = self.input_tensor_shape();
        for layer in &self.layers {
            shapes.push(shape);
            shape = layer.output_shape(shape);
        }
        shapes
    }

    /// Estimated operator norm of each weighted layer, in stack order
    /// (`None` for weight-free layers).
    pub fn layer_norms(&self) -> Vec<Option<f64>> {
        self.layers
            .iter()
            .zip(self.layer_input_shapes())
            .enumerate()
            .map(|(idx, (layer, shape))| {
                layer
                    .has_weights()
                    .then(|| layer.operator_norm(shape, POWER_ITERATIONS, self.seed ^ idx as u64))
            })
            .collect()
    }

    /// Product of per-layer Lipschitz bounds, w.r.t. raw pixel intensities.
    pub fn lipschitz_bound(&self) -> f64 {
        self.layers
            .iter()
            .zip(self.layer_input_shapes())
            .zip(self.layer_norms())
            .map(|((layer, shape), norm)| norm.or_else(|| layer.fixed_lipschitz(shape)).unwrap())
            .product()
    }

    /// Rescales every linear layer to unit estimated operator norm.
    pub fn normalize_lipschitz(&self) -> Result<ExtractorWeights> {
        let norms = self.layer_norms();
        let mut out = self.clone();
        for (idx, (layer, norm)) in out.layers.iter_mut().zip(norms).enumerate() {
            let Some(norm) = norm else { continue };
            let weights = layer.weights_mut().expect("weighted layer");
            if norm == 0.0 || weights.iter().all(|&w| w == 0.0) {
                return Err(Error::DegenerateLayer(idx));
            }
            weights.iter_mut().for_each(|w| *w /= norm);
        }
        out.normalized = true;
        Ok(out)
    }

    fn to_tensor(&self, image: &Image) -> Result<Tensor> {
        if image.shape() != self.input {
            return Err(shape_error(self.input, image.shape()));
        }
        let (h, w, c) = self.input;
        let mut t = Tensor::zeros(self.input_tensor_shape());
        for (idx, &p) in image.pixels().iter().enumerate() {
            let ch = idx % c;
            let pos = idx / c;
            t.data[ch * h * w + pos] = p;
        }
        Ok(t)
    }

    fn forward_cached(&self, image: &Image) -> Result<(Vec<Tensor>, Tensor)> {
        let mut x = self.to_tensor(image)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let y = layer.forward(&x);
            inputs.push(x);
            x = y;
        }
        Ok((inputs, x))
    }

    pub fn extract(&self, image: &Image) -> Result<FeatureVector> {
        let mut x = self.to_tensor(image)?;
        for layer in &self.layers {
            x = layer.forward(&x);
        }
        Ok(FeatureVector(x.data))
    }

    /// `cotangent^T * (df/dp)`, returned in the image's interleaved layout.
    pub fn vjp(&self, image: &Image, cotangent: &[f64]) -> Result<Vec<f64>> {
        if cotangent.len() != self.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim,
                actual: cotangent.len(),
            });
        }
        let (inputs, out) = self.forward_cached(image)?;
        let mut grad = Tensor {
            data: cotangent.to_vec(),
            ..out
        };
        for (layer, input) in self.layers.iter().zip(&inputs).rev() {
            grad = layer.backward(input, &grad);
        }
        let (h, w, c) = self.input;
        let mut pixels = vec![0.0; h * w * c];
        for (idx, px) in pixels.iter_mut().enumerate() {
            *px = grad.data[(idx % c) * h * w + idx / c];
        }
        Ok(pixels)
    }
}

/// Convenience wrapper for the free-function form.
pub fn extract(weights: &ExtractorWeights, image: &Image) -> Result<FeatureVector> {
    weights.extract(image)
}

pub fn vjp(weights: &ExtractorWeights, image: &Image, cotangent: &FeatureVector) -> Result<Vec<f64>> {
    weights.vjp(image, cotangent.as_slice())
}

pub fn normalize_lipschitz(weights: &ExtractorWeights) -> Result<ExtractorWeights> {
    weights.normalize_lipschitz()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_config() -> ExtractorConfig {
        ExtractorConfig {
            input_height: 8,
            input_width: 8,
            conv_channels: vec![4, 6, 8],
            feature_dim: 8,
            ..ExtractorConfig::default()
        }
    }

    fn random_image(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Image {
        let px = (0..shape.0 * shape.1 * shape.2)
            .map(|_| rng.random_range(20.0..235.0))
            .collect();
        Image::from_pixels(shape.0, shape.1, shape.2, px).unwrap()
    }

    #[test]
    fn deterministic_and_zero_at_origin() {
        let w = ExtractorWeights::new(&small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_image(&mut rng, w.input_shape());
        assert_eq!(w.extract(&img).unwrap(), w.extract(&img).unwrap());
        let zero = Image::filled(8, 8, 3, 0.0);
        assert!(w.extract(&zero).unwrap().as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(w.extract(&img).unwrap().dim(), 8);
        assert!(w.extract(&Image::filled(4, 4, 3, 0.0)).is_err());
    }

    #[test]
    fn vjp_of_linear_map_is_transpose() {
        // f = A p for a 1x3 single-channel image.
        let a = vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0];
        let w = ExtractorWeights::from_layers(
            (1, 3, 1),
            vec![Layer::Dense(Dense {
                rows: 2,
                cols: 3,
                weights: a.clone(),
            })],
            0,
        )
        .unwrap();
        let img = Image::from_pixels(1, 3, 1, vec![10.0, 20.0, 30.0]).unwrap();
        assert_eq!(w.extract(&img).unwrap().0, vec![20.0, 95.0]);
        let g = w.vjp(&img, &[2.0, -1.0]).unwrap();
        let expected: Vec<f64> = (0..3).map(|j| 2.0 * a[j] - a[3 + j]).collect();
        assert_eq!(g, expected);
        assert!(w.vjp(&img, &[1.0]).is_err());
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let w = ExtractorWeights::new(&small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = random_image(&mut rng, w.input_shape());
        let g = w.vjp(&img, &vec![0.0; 8]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalization_is_idempotent_and_scale_free() {
        let raw = ExtractorWeights::random(&small_config()).unwrap();
        let once = raw.normalize_lipschitz().unwrap();
        for norm in once.layer_norms().into_iter().flatten() {
            assert!((norm - 1.0).abs() < 1e-6, "norm {norm}");
        }
        let twice = once.normalize_lipschitz().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = random_image(&mut rng, raw.input_shape());
        let (f1, f2) = (once.extract(&img).unwrap(), twice.extract(&img).unwrap());
        assert!(f1.sub(&f2).norm() <= 1e-6 * f1.norm());

        let mut scaled = raw.clone();
        if let Some(w) = scaled.layers[1].weights_mut() {
            w.iter_mut().for_each(|v| *v *= 10.0);
        }
        let renorm = scaled.normalize_lipschitz().unwrap();
        let f3 = renorm.extract(&img).unwrap();
        assert!(f1.sub(&f3).norm() <= 1e-6 * f1.norm());
    }

    #[test]
    fn identity_like_layer_is_unchanged() {
        let eye: Vec<f64> = (0..9).map(|i| if i % 4 == 0 { 1.0 } else { 0.0 }).collect();
        let w = ExtractorWeights::from_layers(
            (1, 3, 1),
            vec![Layer::Dense(Dense {
                rows: 3,
                cols: 3,
                weights: eye.clone(),
            })],
            0,
        )
        .unwrap();
        let n = w.normalize_lipschitz().unwrap();
        let Layer::Dense(d) = &n.layers()[0] else { unreachable!() };
        for (a, b) in d.weights.iter().zip(&eye) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_layer_is_rejected() {
        let w = ExtractorWeights::from_layers(
            (1, 2, 1),
            vec![Layer::Dense(Dense {
                rows: 1,
                cols: 2,
                weights: vec![0.0, 0.0],
            })],
            0,
        )
        .unwrap();
        assert!(matches!(w.normalize_lipschitz(), Err(Error::DegenerateLayer(0))));
    }

    #[test]
    fn composed_bound_matches_target() {
        let w = ExtractorWeights::new(&small_config()).unwrap();
        assert!((w.lipschitz_bound() - small_config().lipschitz_scale).abs() < 1e-6);
    }
}
