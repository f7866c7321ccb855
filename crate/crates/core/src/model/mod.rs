//! Two-branch encoder: convolutional subsampling, stacked layers that run
//! multi-head self-attention and a convolutional gating unit side by side,
//! mean pooling and a linear classifier.

mod checkpoint;
mod forward;

pub use checkpoint::{
    config_hash, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use forward::{feature_batch, BoundModel, ForwardTrace, Mode};

use murmur_autodiff::{Graph, ParamStore, Scalar, StreamKey, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{N_FRAMES, N_MELS};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub model_dim: usize,
    /// Depthwise kernel of the gating branch (odd).
    pub conv_kernel: usize,
    /// Width multiplier of the gating branch up-projection.
    pub mlp_expand: usize,
    pub dropout_p: f64,
    pub n_classes: usize,
    /// Channels of both subsampling convolutions.
    pub subsample_channels: usize,
    /// Relative offsets beyond this share one bias.
    pub max_rel_offset: usize,
    pub n_mels: usize,
    pub n_frames: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            heads: 4,
            head_dim: 128,
            model_dim: 512,
            conv_kernel: 31,
            mlp_expand: 2,
            dropout_p: 0.1,
            n_classes: 3,
            subsample_channels: 32,
            max_rel_offset: 64,
            n_mels: N_MELS,
            n_frames: N_FRAMES,
        }
    }
}

impl ModelConfig {
    /// Same depth and head count with narrow heads, sized for one CPU core.
    pub fn desk() -> Self {
        Self {
            head_dim: 16,
            model_dim: 64,
            subsample_channels: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        let positive = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("mlp_expand", self.mlp_expand),
            ("n_classes", self.n_classes),
            ("subsample_channels", self.subsample_channels),
            ("n_mels", self.n_mels),
            ("n_frames", self.n_frames),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return fail(format!("{name} must be positive"));
        }
        if self.model_dim != self.heads * self.head_dim {
            return fail(format!(
                "model_dim {} must equal heads {} x head_dim {}",
                self.model_dim, self.heads, self.head_dim
            ));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return fail(format!("conv_kernel must be odd, got {}", self.conv_kernel));
        }
        if !(self.mlp_expand * self.model_dim).is_multiple_of(2) {
            return fail("gating width mlp_expand x model_dim must be even".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!(
                "dropout_p must lie in [0, 1), got {}",
                self.dropout_p
            ));
        }
        Ok(())
    }

    /// Frames after the two stride-2 convolutions.
    pub fn subsampled_frames(&self) -> usize {
        self.n_frames.div_ceil(2).div_ceil(2)
    }

    pub fn subsampled_mels(&self) -> usize {
        self.n_mels.div_ceil(2).div_ceil(2)
    }

    fn gate_width(&self) -> usize {
        self.mlp_expand * self.model_dim / 2
    }

    /// Closed-form number of trainable scalars.
    ///
    /// With `C` subsample channels, `F` subsampled Mel bins, `D` model width,
    /// `H` heads, `R` max offset, `G = mlp_expand·D/2`, `K` kernel and `N` classes:
    /// front `10C + 9C² + C + (C·F + 1)·D`, each layer
    /// `4D + 4(D² + D) + H(2R + 1) + 2G(D + 1) + G·K + (G + 1)·D + (2D + 1)·D`,
    /// tail `2D + (D + 1)·N`.
    pub fn parameter_count(&self) -> usize {
        let (c, f, d, h, r) = (
            self.subsample_channels,
            self.subsampled_mels(),
            self.model_dim,
            self.heads,
            self.max_rel_offset,
        );
        let (g, k, n) = (self.gate_width(), self.conv_kernel, self.n_classes);
        let front = 10 * c + 9 * c * c + c + (c * f + 1) * d;
        let layer = 4 * d
            + 4 * (d * d + d)
            + h * (2 * r + 1)
            + 2 * g * (d + 1)
            + g * k
            + (g + 1) * d
            + (2 * d + 1) * d;
        front + self.layers * layer + 2 * d + (d + 1) * n
    }
}

/// Parameter slots of one encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSlots {
    pub attn_norm: (usize, usize),
    pub query: (usize, usize),
    pub key: (usize, usize),
    pub value: (usize, usize),
    pub out: (usize, usize),
    pub rel_bias: usize,
    pub conv_norm: (usize, usize),
    pub up: (usize, usize),
    pub depthwise: usize,
    pub down: (usize, usize),
    pub merge: (usize, usize),
}

/// Where each parameter lives in the store; `(weight, bias)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub conv1: (usize, usize),
    pub conv2: (usize, usize),
    pub proj: (usize, usize),
    pub layers: Vec<LayerSlots>,
    pub final_norm: (usize, usize),
    pub head: (usize, usize),
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    /// Gaussian with standard deviation `1/sqrt(fan_in)`.
    FanIn(usize),
}

type AddParam<'a> = dyn FnMut(String, Vec<usize>, Init) -> Result<usize> + 'a;

struct Builder<'a, 'b> {
    add: &'a mut AddParam<'b>,
}

impl Builder<'_, '_> {
    fn raw(&mut self, name: String, shape: Vec<usize>, init: Init) -> Result<usize> {
        (self.add)(name, shape, init)
    }

    fn affine(
        &mut self,
        name: &str,
        weight: Vec<usize>,
        width: usize,
        fan_in: usize,
    ) -> Result<(usize, usize)> {
        Ok((
            self.raw(format!("{name}.weight"), weight, Init::FanIn(fan_in))?,
            self.raw(format!("{name}.bias"), vec![width], Init::Zeros)?,
        ))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<(usize, usize)> {
        self.affine(name, vec![fan_in, fan_out], fan_out, fan_in)
    }

    fn norm(&mut self, name: &str, width: usize) -> Result<(usize, usize)> {
        Ok((
            self.raw(format!("{name}.gamma"), vec![width], Init::Ones)?,
            self.raw(format!("{name}.beta"), vec![width], Init::Zeros)?,
        ))
    }
}

fn build_layout(cfg: &ModelConfig, add: &mut AddParam<'_>) -> Result<Layout> {
    let (c, d, g) = (cfg.subsample_channels, cfg.model_dim, cfg.gate_width());
    let mut b = Builder { add };
    let conv1 = b.affine("subsample.conv1", vec![c, 1, 3, 3], c, 9)?;
    let conv2 = b.affine("subsample.conv2", vec![c, c, 3, 3], c, 9 * c)?;
    let flat = c * cfg.subsampled_mels();
    let proj = b.linear("subsample.proj", flat, d)?;
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        layers.push(LayerSlots {
            attn_norm: b.norm(&p("attn_norm"), d)?,
            query: b.linear(&p("attn.query"), d, d)?,
            key: b.linear(&p("attn.key"), d, d)?,
            value: b.linear(&p("attn.value"), d, d)?,
            out: b.linear(&p("attn.out"), d, d)?,
            rel_bias: b.raw(
                p("attn.rel_bias"),
                vec![cfg.heads, 2 * cfg.max_rel_offset + 1],
                Init::Zeros,
            )?,
            conv_norm: b.norm(&p("conv_norm"), d)?,
            up: b.linear(&p("gate.up"), d, 2 * g)?,
            depthwise: b.raw(
                p("gate.depthwise"),
                vec![g, cfg.conv_kernel],
                Init::FanIn(cfg.conv_kernel),
            )?,
            down: b.linear(&p("gate.down"), g, d)?,
            merge: b.linear(&p("merge"), 2 * d, d)?,
        });
    }
    Ok(Layout {
        conv1,
        conv2,
        proj,
        layers,
        final_norm: b.norm("final_norm", d)?,
        head: b.linear("head", d, cfg.n_classes)?,
    })
}

/// Weights plus the architecture they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<S> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
    pub layout: Layout,
}

impl<S: Scalar> ModelState<S> {
    /// Freshly initialised weights drawn from `key`.
    pub fn init(config: ModelConfig, key: StreamKey) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = build_layout(&config, &mut |name, shape, init| {
            let tensor = match init {
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::filled(&shape, S::one()),
                Init::FanIn(n) => Tensor::randn(
                    &shape,
                    1.0 / (n as f64).sqrt(),
                    &mut key.derive(&name).rng(),
                ),
            };
            Ok(params.insert(name, tensor)?)
        })?;
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Binds every parameter to `graph` as a differentiable leaf.
    pub fn bind(&self, graph: &mut Graph<S>) -> BoundModel<'_, S> {
        BoundModel::from_vars(self, self.params.bind(graph))
    }

    pub fn cast<T: Scalar>(&self) -> ModelState<T> {
        ModelState {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Logits `[batch, n_classes]` for a batch of feature maps.
    pub fn logits(&self, maps: &[&crate::features::FeatureMap], mode: &Mode) -> Result<Tensor<S>> {
        let mut g = Graph::inference();
        let bound = self.bind(&mut g);
        let x = g.constant(feature_batch(maps)?);
        let z = bound.forward(&mut g, x, mode, None)?;
        Ok(g.value(z).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_dimensions() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.model_dim, 512);
        assert_eq!(c.subsampled_frames(), 61);
        assert_eq!(c.subsampled_mels(), 32);
        ModelConfig::desk().validate().unwrap();
        assert_eq!(ModelConfig::desk().layers, 6);
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            ModelConfig {
                model_dim: 500,
                ..ModelConfig::default()
            },
            ModelConfig {
                conv_kernel: 30,
                ..ModelConfig::default()
            },
            ModelConfig {
                dropout_p: 1.0,
                ..ModelConfig::default()
            },
            ModelConfig {
                layers: 0,
                ..ModelConfig::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn parameter_count_matches_store() {
        for cfg in [
            ModelConfig::desk(),
            ModelConfig {
                layers: 2,
                heads: 2,
                head_dim: 4,
                model_dim: 8,
                subsample_channels: 2,
                mlp_expand: 3,
                conv_kernel: 5,
                max_rel_offset: 3,
                ..ModelConfig::default()
            },
        ] {
            let m = ModelState::<f32>::init(cfg.clone(), StreamKey::root(0)).unwrap();
            assert_eq!(m.params.numel(), cfg.parameter_count());
        }
    }

    #[test]
    fn default_parameter_count_by_hand() {
        // C=32, F=32, D=512, H=4, R=64, G=512, K=31, N=3
        let front = 32 * 9 + 32 + 32 * 32 * 9 + 32 + 1024 * 512 + 512;
        let attn = 2 * 512 + 4 * (512 * 512 + 512) + 4 * 129;
        let gate = 2 * 512 + (512 * 1024 + 1024) + 512 * 31 + (512 * 512 + 512);
        let merge = 1024 * 512 + 512;
        let tail = 2 * 512 + 512 * 3 + 3;
        assert_eq!(
            ModelConfig::default().parameter_count(),
            front + 6 * (attn + gate + merge) + tail
        );
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelState::<f32>::init(ModelConfig::desk(), StreamKey::root(3)).unwrap();
        let b = ModelState::<f32>::init(ModelConfig::desk(), StreamKey::root(3)).unwrap();
        let c = ModelState::<f32>::init(ModelConfig::desk(), StreamKey::root(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
