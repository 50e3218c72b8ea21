//! The task-decomposed network: encoder, three pairwise context-ensemble
//! modules merged into one shared latent tensor, and segmentation, class
//! and scene decoders reading from it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ConvOpts, Graph, Var};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Spatial downsampling of the encoder.
pub const DOWNSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Number of segmentation labels, background included.
    pub num_classes: usize,
    pub num_scenes: usize,
    pub dilation_rates: Vec<usize>,
    pub hidden_units: usize,
    /// `(H, W)` of input images.
    pub image_size: (usize, usize),
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_channels: 16,
            num_classes: 4,
            num_scenes: 2,
            dilation_rates: vec![1, 2, 4, 8],
            hidden_units: 64,
            image_size: (32, 32),
        }
    }
}

impl ModelConfig {
    pub fn feature_channels(&self) -> usize {
        self.base_channels * 4
    }

    pub fn feature_size(&self) -> (usize, usize) {
        (self.image_size.0 / DOWNSAMPLE, self.image_size.1 / DOWNSAMPLE)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.in_channels == 0 || self.base_channels == 0 || self.hidden_units == 0 {
            return bad("in_channels, base_channels and hidden_units must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.num_scenes < 2 {
            return bad(format!("num_scenes must be >= 2, got {}", self.num_scenes));
        }
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
            return bad(format!("image_size {h}x{w} must be positive multiples of {DOWNSAMPLE}"));
        }
        if self.dilation_rates.is_empty() || self.dilation_rates.contains(&0) {
            return bad(format!("dilation_rates {:?} must be non-empty and positive", self.dilation_rates));
        }
        let max_rate = *self.dilation_rates.iter().max().expect("non-empty");
        let footprint = 2 * max_rate + 1;
        if footprint > h.min(w) {
            return bad(format!(
                "dilation rate {max_rate} has a {footprint}x{footprint} footprint, larger than the {h}x{w} image"
            ));
        }
        Ok(())
    }
}

/// A convolution's parameters plus its fixed geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub opts: ConvOpts,
}

impl ConvLayer {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c_in: usize, c_out: usize, k: usize, opts: ConvOpts) -> Self {
        let fan_in = c_in * k * k;
        let weight = store.add(format!("{name}.weight"), kaiming(rng, &[c_out, c_in, k, k], fan_in));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Self { weight, bias, opts }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, b, self.opts)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DenseLayer {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, n_in: usize, n_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), kaiming(rng, &[n_out, n_in], n_in));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[n_out]));
        Self { weight, bias }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.dense(x, w, b)
    }
}

fn kaiming(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Cascaded dilated convolutions: branch `i` is `relu(conv_{rate_i})` applied
/// to branch `i-1` (branch 0 is the input). Output is the input plus every
/// branch, at the input's resolution.
pub fn context_ensemble(g: &mut Graph, store: &ParamStore, features: Var, convs: &[ConvLayer]) -> Result<Var> {
    let mut acc = features;
    let mut branch = features;
    for conv in convs {
        let z = conv.apply(g, store, branch)?;
        branch = g.relu(z);
        acc = g.add(acc, branch)?;
    }
    Ok(acc)
}

/// Merges the three pairwise ensemble outputs: channel concat followed by a
/// 1x1 convolution back to the feature width.
pub fn latent_space(g: &mut Graph, store: &ParamStore, f_sc: Var, f_ss: Var, f_cs: Var, merge: &ConvLayer) -> Result<Var> {
    let s = g.shape(f_sc).to_vec();
    if g.shape(f_ss) != s || g.shape(f_cs) != s {
        return Err(Error::shape(
            "latent_space",
            format!("ensemble outputs {:?}, {:?}, {:?} differ", s, g.shape(f_ss), g.shape(f_cs)),
        ));
    }
    let cat = g.concat_channels(&[f_sc, f_ss, f_cs])?;
    merge.apply(g, store, cat)
}

/// Task pairing of each context-ensemble module.
pub const ENSEMBLE_PAIRS: [&str; 3] = ["seg_class", "seg_scene", "class_scene"];

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDecompModel {
    cfg: ModelConfig,
    pub params: ParamStore,
    stem: ConvLayer,
    down1: ConvLayer,
    down2: ConvLayer,
    ensembles: [Vec<ConvLayer>; 3],
    merge: ConvLayer,
    seg_conv: ConvLayer,
    seg_refine1: ConvLayer,
    seg_refine2: ConvLayer,
    seg_out: ConvLayer,
    class_hidden: DenseLayer,
    class_out: DenseLayer,
    scene_hidden: DenseLayer,
    scene_out: DenseLayer,
}

/// Recorded outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    pub seg_logits: Var,
    pub class_logits: Var,
    pub scene_logits: Var,
    pub features: Var,
    pub ensembles: [Var; 3],
    pub latent: Var,
    pub seg_hidden: Var,
}

/// Plain-value outputs for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub seg_logits: Tensor,
    pub class_logits: Tensor,
    pub scene_logits: Tensor,
}

impl TaskDecompModel {
    /// Deterministic construction: same `(cfg, seed)` gives bit-identical parameters.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let b = cfg.base_channels;
        let c = cfg.feature_channels();
        let stem = ConvLayer::new(&mut ps, &mut rng, "encoder.stem", cfg.in_channels, b, 3, ConvOpts::default());
        let down1 = ConvLayer::new(&mut ps, &mut rng, "encoder.down1", b, 2 * b, 3, ConvOpts::strided(2));
        let down2 = ConvLayer::new(&mut ps, &mut rng, "encoder.down2", 2 * b, c, 3, ConvOpts::strided(2));
        let ensembles = ENSEMBLE_PAIRS.map(|pair| {
            cfg.dilation_rates
                .iter()
                .enumerate()
                .map(|(i, &d)| ConvLayer::new(&mut ps, &mut rng, &format!("ensemble.{pair}.{i}"), c, c, 3, ConvOpts::dilated(d)))
                .collect()
        });
        let merge = ConvLayer::new(&mut ps, &mut rng, "latent.merge", 3 * c, c, 1, ConvOpts::default());
        let seg_conv = ConvLayer::new(&mut ps, &mut rng, "seg.conv", c, b, 3, ConvOpts::default());
        let seg_refine1 = ConvLayer::new(&mut ps, &mut rng, "seg.refine1", b, b, 3, ConvOpts::default());
        let seg_refine2 = ConvLayer::new(&mut ps, &mut rng, "seg.refine2", b, b, 3, ConvOpts::default());
        let seg_out = ConvLayer::new(&mut ps, &mut rng, "seg.out", b, cfg.num_classes, 1, ConvOpts::default());
        let class_hidden = DenseLayer::new(&mut ps, &mut rng, "class.hidden", c, cfg.hidden_units);
        let class_out = DenseLayer::new(&mut ps, &mut rng, "class.out", cfg.hidden_units, cfg.num_classes - 1);
        let scene_hidden = DenseLayer::new(&mut ps, &mut rng, "scene.hidden", c, cfg.hidden_units);
        let scene_out = DenseLayer::new(&mut ps, &mut rng, "scene.out", cfg.hidden_units, cfg.num_scenes);
        Ok(Self {
            cfg: cfg.clone(),
            params: ps,
            stem,
            down1,
            down2,
            ensembles,
            merge,
            seg_conv,
            seg_refine1,
            seg_refine2,
            seg_out,
            class_hidden,
            class_out,
            scene_hidden,
            scene_out,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn ensemble_layers(&self, pair: usize) -> &[ConvLayer] {
        &self.ensembles[pair]
    }

    pub fn merge_layer(&self) -> &ConvLayer {
        &self.merge
    }

    /// Parameters feeding only the segmentation decoder (after the latent space).
    pub fn seg_decoder_params(&self) -> Vec<ParamId> {
        [self.seg_conv, self.seg_refine1, self.seg_refine2, self.seg_out]
            .iter()
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }

    /// Encoder parameters, shared by every head.
    pub fn encoder_params(&self) -> Vec<ParamId> {
        [self.stem, self.down1, self.down2].iter().flat_map(|l| [l.weight, l.bias]).collect()
    }

    /// Parameters of the class decoder.
    pub fn class_head_params(&self) -> Vec<ParamId> {
        [self.class_hidden, self.class_out].iter().flat_map(|l| [l.weight, l.bias]).collect()
    }

    /// Records a forward pass of `image` into `g` using `store` as the parameter source.
    ///
    /// `store` is normally `&self.params`; gradient checks pass a perturbed copy.
    pub fn forward_with(&self, g: &mut Graph, store: &ParamStore, image: &Tensor) -> Result<ModelOutput> {
        let (h, w) = self.cfg.image_size;
        if image.shape() != [self.cfg.in_channels, h, w] {
            return Err(Error::shape(
                "forward",
                format!("image {:?} does not match [{}, {h}, {w}]", image.shape(), self.cfg.in_channels),
            ));
        }
        let x = g.input(image.clone());
        let z = self.stem.apply(g, store, x)?;
        let e0 = g.relu(z);
        let z = self.down1.apply(g, store, e0)?;
        let e1 = g.relu(z);
        let z = self.down2.apply(g, store, e1)?;
        let features = g.relu(z);

        let mut ens = [features; 3];
        for (slot, convs) in ens.iter_mut().zip(&self.ensembles) {
            *slot = context_ensemble(g, store, features, convs)?;
        }
        let latent = latent_space(g, store, ens[0], ens[1], ens[2], &self.merge)?;

        let z = self.seg_conv.apply(g, store, latent)?;
        let seg_hidden = g.relu(z);
        // Full-resolution refinement of the blockwise-constant upsample.
        let up = g.upsample_nearest(seg_hidden, DOWNSAMPLE)?;
        let z = self.seg_refine1.apply(g, store, up)?;
        let r1 = g.relu(z);
        let z = self.seg_refine2.apply(g, store, r1)?;
        let r2 = g.relu(z);
        let seg_logits = self.seg_out.apply(g, store, r2)?;

        let pooled = g.global_avg_pool(latent)?;
        let class_logits = mlp_head(g, store, pooled, &self.class_hidden, &self.class_out)?;
        let scene_logits = mlp_head(g, store, pooled, &self.scene_hidden, &self.scene_out)?;

        Ok(ModelOutput {
            seg_logits,
            class_logits,
            scene_logits,
            features,
            ensembles: ens,
            latent,
            seg_hidden,
        })
    }

    pub fn forward(&self, g: &mut Graph, image: &Tensor) -> Result<ModelOutput> {
        self.forward_with(g, &self.params, image)
    }

    pub fn predict(&self, image: &Tensor) -> Result<Prediction> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, image)?;
        Ok(Prediction {
            seg_logits: g.value(out.seg_logits).clone(),
            class_logits: g.value(out.class_logits).clone(),
            scene_logits: g.value(out.scene_logits).clone(),
        })
    }
}

fn mlp_head(g: &mut Graph, store: &ParamStore, x: Var, hidden: &DenseLayer, out: &DenseLayer) -> Result<Var> {
    let z = hidden.apply(g, store, x)?;
    let a = g.relu(z);
    out.apply(g, store, a)
}
