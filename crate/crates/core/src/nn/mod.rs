//! Encoder blocks for teacher and student towers.
//!
//! Weights use the row-vector convention `y = x·W + b`, with `W` stored
//! as `[in, out]`. Parameter names are fixed per block:
//!
//! | block      | names                                                     |
//! |------------|-----------------------------------------------------------|
//! | image      | `image.trunk.{i}.weight/bias`, `image.heads.weight/bias`  |
//! | adapter g  | `adapter.weight`, `adapter.bias`                          |
//! | text       | `text.embed`, `text.mlp.{i}.weight/bias`, `text.out.weight/bias` |
//! | projection | `proj.weight`, `proj.bias`                                |

mod params;
mod tower;

pub(crate) use params::hex;
pub use params::{pattern_matches, Binding, ParamSet};
pub use tower::{ImageTower, TextTower};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Graph, Tensor, Var};

pub const ADAPTER_WEIGHT: &str = "adapter.weight";
pub const ADAPTER_BIAS: &str = "adapter.bias";
pub const PROJ_WEIGHT: &str = "proj.weight";
pub const PROJ_BIAS: &str = "proj.bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Identity => Ok(x),
        }
    }
}

/// MLP trunk followed by one linear head per feature position.
///
/// The heads are stored as a single `[hidden, positions * channels]`
/// matrix; reading a batch output row-major as `(batch * positions) ×
/// channels` yields one feature row per position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEncoderSpec {
    pub input_dim: usize,
    pub positions: usize,
    pub channels: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

/// Bag-of-tokens text encoder: mean token embedding through an MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderSpec {
    pub vocab: usize,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

/// positions × channels feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.shape().len() != 2 {
            return Err(Error::shape("feature_map", "expected a matrix"));
        }
        Ok(Self(tensor))
    }

    pub fn positions(&self) -> usize {
        self.0.rows()
    }

    pub fn channels(&self) -> usize {
        self.0.cols()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn row(&self, p: usize) -> &[f64] {
        self.0.row(p)
    }
}

/// Single embedding row.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeature(pub Vec<f64>);

impl TextFeature {
    pub fn width(&self) -> usize {
        self.0.len()
    }
}

fn check_positive(what: &str, value: usize) -> Result<()> {
    if value == 0 {
        Err(Error::InvalidArgument(format!("{what} must be positive")))
    } else {
        Ok(())
    }
}

/// Uniform(−a, a) with `a = sqrt(6 / (fan_in + fan_out))`.
fn xavier(rows: usize, cols: usize, seed: u64, name: &str) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let mut rng = seed::stream(seed, name, 0);
    let values = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(&[rows, cols], values)
        .expect("positive dims")
        .trainable()
}

fn zero_bias(n: usize) -> Tensor {
    Tensor::zeros(&[n]).trainable()
}

fn insert_linear(
    params: &mut ParamSet,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    seed: u64,
) -> Result<()> {
    let w = format!("{prefix}.weight");
    params.insert(w.clone(), xavier(fan_in, fan_out, seed, &w))?;
    params.insert(format!("{prefix}.bias"), zero_bias(fan_out))
}

fn linear(g: &mut Graph, b: &Binding, prefix: &str, x: Var) -> Result<Var> {
    let w = b.get(&format!("{prefix}.weight"))?;
    let bias = b.get(&format!("{prefix}.bias"))?;
    g.affine(x, w, bias)
}

impl ImageEncoderSpec {
    pub fn validate(&self) -> Result<()> {
        check_positive("image input_dim", self.input_dim)?;
        check_positive("positions", self.positions)?;
        check_positive("channels", self.channels)?;
        self.hidden
            .iter()
            .try_for_each(|&h| check_positive("image hidden width", h))
    }

    pub fn trunk_out(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }

    /// Xavier-uniform weights, zero biases, all trainable.
    pub fn init(&self, seed: u64) -> Result<ParamSet> {
        self.validate()?;
        let mut params = ParamSet::new();
        let mut fan_in = self.input_dim;
        for (i, &h) in self.hidden.iter().enumerate() {
            insert_linear(&mut params, &format!("image.trunk.{i}"), fan_in, h, seed)?;
            fan_in = h;
        }
        insert_linear(
            &mut params,
            "image.heads",
            fan_in,
            self.positions * self.channels,
            seed,
        )?;
        Ok(params)
    }

    /// Encodes a batch × input_dim matrix into (batch · positions) ×
    /// channels feature rows, grouped by image.
    pub fn forward(&self, g: &mut Graph, b: &Binding, images: Var) -> Result<Var> {
        let input = g.value(images);
        if input.shape().len() != 2 || input.cols() != self.input_dim {
            return Err(Error::shape(
                "image_encode",
                format!(
                    "expected batch x {}, got {:?}",
                    self.input_dim,
                    input.shape()
                ),
            ));
        }
        let batch = input.rows();
        let mut x = images;
        for i in 0..self.hidden.len() {
            x = linear(g, b, &format!("image.trunk.{i}"), x)?;
            x = self.activation.apply(g, x)?;
        }
        let heads = linear(g, b, "image.heads", x)?;
        g.reshape(heads, &[batch * self.positions, self.channels])
    }
}

impl TextEncoderSpec {
    pub fn validate(&self) -> Result<()> {
        check_positive("vocab", self.vocab)?;
        check_positive("embed_dim", self.embed_dim)?;
        check_positive("text output_dim", self.output_dim)?;
        self.hidden
            .iter()
            .try_for_each(|&h| check_positive("text hidden width", h))
    }

    pub fn init(&self, seed: u64) -> Result<ParamSet> {
        self.validate()?;
        let mut params = ParamSet::new();
        params.insert(
            "text.embed",
            xavier(self.vocab, self.embed_dim, seed, "text.embed"),
        )?;
        let mut fan_in = self.embed_dim;
        for (i, &h) in self.hidden.iter().enumerate() {
            insert_linear(&mut params, &format!("text.mlp.{i}"), fan_in, h, seed)?;
            fan_in = h;
        }
        insert_linear(&mut params, "text.out", fan_in, self.output_dim, seed)?;
        Ok(params)
    }

    /// Encodes a batch of token sequences into batch × output_dim.
    pub fn forward(&self, g: &mut Graph, b: &Binding, sequences: &[Vec<usize>]) -> Result<Var> {
        if let Some(tok) = sequences.iter().flatten().find(|&&t| t >= self.vocab) {
            return Err(Error::InvalidArgument(format!(
                "token id {tok} is out of vocabulary (size {})",
                self.vocab
            )));
        }
        let table = b.get("text.embed")?;
        let mut x = g.embed_bag(table, sequences)?;
        for i in 0..self.hidden.len() {
            x = linear(g, b, &format!("text.mlp.{i}"), x)?;
            x = self.activation.apply(g, x)?;
        }
        linear(g, b, "text.out", x)
    }
}

/// Adapter `g`: 1×1 convolution over channels, i.e. `F[p]·W + b` per row.
pub fn init_adapter(in_channels: usize, out_channels: usize, seed: u64) -> Result<ParamSet> {
    check_positive("adapter input channels", in_channels)?;
    check_positive("adapter output channels", out_channels)?;
    let mut p = ParamSet::new();
    insert_linear(&mut p, "adapter", in_channels, out_channels, seed)?;
    Ok(p)
}

/// Fully-connected projection `L` from student to teacher text width.
pub fn init_projection(in_dim: usize, out_dim: usize, seed: u64) -> Result<ParamSet> {
    check_positive("projection input width", in_dim)?;
    check_positive("projection output width", out_dim)?;
    let mut p = ParamSet::new();
    insert_linear(&mut p, "proj", in_dim, out_dim, seed)?;
    Ok(p)
}

pub fn adapter_forward(g: &mut Graph, b: &Binding, features: Var) -> Result<Var> {
    let w = b.get(ADAPTER_WEIGHT)?;
    let (c_in, c_w) = (g.value(features).cols(), g.value(w).rows());
    if c_in != c_w {
        return Err(Error::shape(
            "channel_adapter",
            format!("feature map has {c_in} channels, adapter expects {c_w}"),
        ));
    }
    linear(g, b, "adapter", features)
}

pub fn projection_forward(g: &mut Graph, b: &Binding, features: Var) -> Result<Var> {
    let w = b.get(PROJ_WEIGHT)?;
    let (d_in, d_w) = (g.value(features).cols(), g.value(w).rows());
    if d_in != d_w {
        return Err(Error::shape(
            "projection_head",
            format!("feature has width {d_in}, projection expects {d_w}"),
        ));
    }
    linear(g, b, "proj", features)
}

/// Untraced single-image encoding.
pub fn image_encode(
    spec: &ImageEncoderSpec,
    params: &ParamSet,
    image: &[f64],
) -> Result<FeatureMap> {
    if image.len() != spec.input_dim {
        return Err(Error::shape(
            "image_encode",
            format!(
                "image has {} values, expected {}",
                image.len(),
                spec.input_dim
            ),
        ));
    }
    let mut g = Graph::new();
    let b = params.bind_frozen(&mut g);
    let x = g.constant(Tensor::new(&[1, image.len()], image.to_vec())?);
    let out = spec.forward(&mut g, &b, x)?;
    FeatureMap::new(g.value(out).clone())
}

pub fn channel_adapter(features: &FeatureMap, params: &ParamSet) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let b = params.bind_frozen(&mut g);
    let x = g.constant(features.tensor().clone());
    let out = adapter_forward(&mut g, &b, x)?;
    FeatureMap::new(g.value(out).clone())
}

pub fn text_encode(
    spec: &TextEncoderSpec,
    params: &ParamSet,
    tokens: &[usize],
) -> Result<TextFeature> {
    let mut g = Graph::new();
    let b = params.bind_frozen(&mut g);
    let out = spec.forward(&mut g, &b, &[tokens.to_vec()])?;
    Ok(TextFeature(g.value(out).values().to_vec()))
}

pub fn projection_head(feature: &TextFeature, params: &ParamSet) -> Result<TextFeature> {
    let mut g = Graph::new();
    let b = params.bind_frozen(&mut g);
    let x = g.constant(Tensor::new(&[1, feature.width()], feature.0.clone())?);
    let out = projection_forward(&mut g, &b, x)?;
    Ok(TextFeature(g.value(out).values().to_vec()))
}

/// Mean over positions.
pub fn pool_features(features: &FeatureMap) -> Vec<f64> {
    let c = features.channels();
    let mut out = vec![0.0; c];
    for p in 0..features.positions() {
        out.iter_mut()
            .zip(features.row(p))
            .for_each(|(o, x)| *o += x);
    }
    let inv = 1.0 / features.positions() as f64;
    out.iter_mut().for_each(|x| *x *= inv);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check_params;

    fn small_image_spec() -> ImageEncoderSpec {
        ImageEncoderSpec {
            input_dim: 16,
            positions: 4,
            channels: 8,
            hidden: vec![12],
            activation: Activation::Tanh,
        }
    }

    fn random_map(p: usize, c: usize, seed: u64) -> FeatureMap {
        let mut rng = seed::rng(seed);
        let v = (0..p * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureMap::new(Tensor::new(&[p, c], v).unwrap()).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_map() {
        let spec = small_image_spec();
        let mut params = spec.init(1).unwrap();
        for (_, t) in params.iter_mut() {
            t.values_mut().fill(0.0);
        }
        let fm = image_encode(&spec, &params, &[0.3; 16]).unwrap();
        assert_eq!((fm.positions(), fm.channels()), (4, 8));
        assert!(fm.tensor().values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn image_encode_is_deterministic_and_checks_length() {
        let spec = small_image_spec();
        let params = spec.init(3).unwrap();
        let img: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = image_encode(&spec, &params, &img).unwrap();
        let b = image_encode(&spec, &params, &img).unwrap();
        assert_eq!(a, b);
        assert!(image_encode(&spec, &params, &img[..15]).is_err());
    }

    #[test]
    fn init_is_seeded_with_zero_biases() {
        let spec = small_image_spec();
        let a = spec.init(5).unwrap();
        assert_eq!(a, spec.init(5).unwrap());
        assert_ne!(
            a.get("image.heads.weight").unwrap(),
            spec.init(6).unwrap().get("image.heads.weight").unwrap()
        );
        for (name, t) in a.iter() {
            if name.ends_with(".bias") {
                assert!(t.values().iter().all(|&x| x == 0.0), "{name}");
            }
        }
        let bound = (6.0f64 / (16 + 12) as f64).sqrt();
        assert!(a
            .get("image.trunk.0.weight")
            .unwrap()
            .values()
            .iter()
            .all(|x| x.abs() < bound));
    }

    #[test]
    fn identity_adapter_is_noop() {
        let mut p = init_adapter(8, 8, 0).unwrap();
        *p.get_mut(ADAPTER_WEIGHT).unwrap() = Tensor::identity(8);
        let f = random_map(4, 8, 9);
        assert_eq!(channel_adapter(&f, &p).unwrap(), f);
    }

    #[test]
    fn adapter_is_matmul_plus_bias_and_local() {
        let mut p = init_adapter(8, 32, 2).unwrap();
        p.get_mut(ADAPTER_BIAS)
            .unwrap()
            .values_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, b)| *b = 0.01 * i as f64);
        let f = random_map(4, 8, 10);
        let out = channel_adapter(&f, &p).unwrap();
        assert_eq!((out.positions(), out.channels()), (4, 32));
        let w = p.get(ADAPTER_WEIGHT).unwrap();
        let bias = p.get(ADAPTER_BIAS).unwrap().values();
        for pos in 0..4 {
            for c in 0..32 {
                let mut expect = bias[c];
                for k in 0..8 {
                    expect += f.row(pos)[k] * w.get(k, c);
                }
                assert!((out.row(pos)[c] - expect).abs() < 1e-12);
            }
            let single =
                FeatureMap::new(Tensor::new(&[1, 8], f.row(pos).to_vec()).unwrap()).unwrap();
            assert_eq!(channel_adapter(&single, &p).unwrap().row(0), out.row(pos));
        }
        let wrong = random_map(4, 6, 1);
        assert!(channel_adapter(&wrong, &p).is_err());
    }

    #[test]
    fn pooling_commutes_with_linear_adapter() {
        let p = init_adapter(8, 5, 4).unwrap();
        let f = random_map(4, 8, 11);
        let pooled_after = pool_features(&channel_adapter(&f, &p).unwrap());
        let pooled = pool_features(&f);
        let w = p.get(ADAPTER_WEIGHT).unwrap();
        for c in 0..5 {
            let expect: f64 = (0..8).map(|k| pooled[k] * w.get(k, c)).sum();
            assert!((pooled_after[c] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_examples() {
        let f =
            FeatureMap::new(Tensor::from_rows(&[vec![0.0, 2.0], vec![2.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(pool_features(&f), vec![1.0, 1.0]);
        let single = FeatureMap::new(Tensor::from_rows(&[vec![3.0, -1.0]]).unwrap()).unwrap();
        assert_eq!(pool_features(&single), vec![3.0, -1.0]);
    }

    fn text_spec() -> TextEncoderSpec {
        TextEncoderSpec {
            vocab: 20,
            embed_dim: 6,
            hidden: vec![8],
            output_dim: 16,
            activation: Activation::Tanh,
        }
    }

    #[test]
    fn text_encoder_is_bag_of_tokens() {
        let spec = text_spec();
        let params = spec.init(7).unwrap();
        let a = text_encode(&spec, &params, &[3, 9, 14, 9]).unwrap();
        let b = text_encode(&spec, &params, &[9, 14, 9, 3]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, text_encode(&spec, &params, &[3, 9, 14, 9]).unwrap());
        assert_eq!(a.width(), 16);
        assert!(text_encode(&spec, &params, &[20]).is_err());
        assert!(text_encode(&spec, &params, &[]).is_err());

        // a single token is exactly the MLP of its embedding row
        let single = text_encode(&spec, &params, &[5]).unwrap();
        let mut g = Graph::new();
        let bnd = params.bind_frozen(&mut g);
        let row = params.get("text.embed").unwrap().row(5).to_vec();
        let x = g.constant(Tensor::new(&[1, 6], row).unwrap());
        let h = linear(&mut g, &bnd, "text.mlp.0", x).unwrap();
        let h = g.tanh(h).unwrap();
        let o = linear(&mut g, &bnd, "text.out", h).unwrap();
        assert_eq!(g.value(o).values(), single.0.as_slice());
    }

    #[test]
    fn projection_examples() {
        let mut p = init_projection(16, 16, 1).unwrap();
        *p.get_mut(PROJ_WEIGHT).unwrap() = Tensor::identity(16);
        let w = TextFeature((0..16).map(|i| i as f64 * 0.1 - 0.5).collect());
        assert_eq!(projection_head(&w, &p).unwrap(), w);

        let mut p = init_projection(16, 32, 1).unwrap();
        p.get_mut(PROJ_WEIGHT).unwrap().values_mut().fill(0.0);
        p.get_mut(PROJ_BIAS).unwrap().values_mut().fill(0.25);
        let out = projection_head(&w, &p).unwrap();
        assert_eq!(out.0, vec![0.25; 32]);
        assert!(projection_head(&TextFeature(vec![1.0; 8]), &p).is_err());
    }

    #[test]
    fn blocks_pass_grad_check() {
        let spec = ImageEncoderSpec {
            input_dim: 5,
            positions: 2,
            channels: 3,
            hidden: vec![4],
            activation: Activation::Tanh,
        };
        let mut params = spec.init(21).unwrap();
        params.merge(init_adapter(3, 4, 22).unwrap()).unwrap();
        let mut rng = seed::rng(23);
        let images = Tensor::new(
            &[3, 5],
            (0..15).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let target = Tensor::new(
            &[6, 4],
            (0..24).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let err = grad_check_params(
            &params,
            |g, b| {
                let x = g.constant(images.clone());
                let f = spec.forward(g, b, x)?;
                let f = adapter_forward(g, b, f)?;
                let t = g.constant(target.clone());
                let d = g.sub(f, t)?;
                let sq = g.mul(d, d)?;
                g.mean(sq)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "image block grad check {err}");

        let tspec = TextEncoderSpec {
            vocab: 7,
            embed_dim: 3,
            hidden: vec![4],
            output_dim: 3,
            activation: Activation::Tanh,
        };
        let mut tparams = tspec.init(31).unwrap();
        tparams.merge(init_projection(3, 5, 32).unwrap()).unwrap();
        let seqs = vec![vec![0, 1, 1], vec![4, 6], vec![5]];
        let err = grad_check_params(
            &tparams,
            |g, b| {
                let w = tspec.forward(g, b, &seqs)?;
                let w = projection_forward(g, b, w)?;
                let t = g.tanh(w)?;
                g.mean(t)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "text block grad check {err}");
    }
}
