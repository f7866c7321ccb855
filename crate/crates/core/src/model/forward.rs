use murmur_autodiff::{Conv2dGeometry, Graph, Scalar, StreamKey, Tensor, Var};

use super::{LayerSlots, ModelState};
use crate::error::{invalid, Result};
use crate::features::FeatureMap;

/// Dropout behaviour of a forward pass.
///
/// The stochastic modes carry one key per batch row; every dropout site
/// derives its mask from the row key, so a sample's masks do not depend on
/// its batch neighbours.
#[derive(Clone, Copy, Debug)]
pub enum Mode<'k> {
    Eval,
    Train(&'k [StreamKey]),
    Mc(&'k [StreamKey]),
}

impl Mode<'_> {
    fn keys(&self) -> Option<&[StreamKey]> {
        match self {
            Mode::Eval => None,
            Mode::Train(k) | Mode::Mc(k) => Some(k),
        }
    }
}

/// Intermediate values captured during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace<S> {
    /// `(stage, shape)` in evaluation order.
    pub shapes: Vec<(String, Vec<usize>)>,
    /// Pre-softmax attention scores per layer, `[batch, heads, T, T]`.
    pub attn_logits: Vec<Tensor<S>>,
    /// Attention weights per layer, `[batch, heads, T, T]`.
    pub attn_probs: Vec<Tensor<S>>,
}

/// Stacks feature maps into a `[batch, mels, frames]` tensor.
pub fn feature_batch<S: Scalar>(maps: &[&FeatureMap]) -> Result<Tensor<S>> {
    if maps.is_empty() {
        return Err(invalid("empty feature batch"));
    }
    let [m, f] = FeatureMap::SHAPE;
    let data = maps
        .iter()
        .flat_map(|map| map.values().iter().map(|&v| S::of(v as f64)))
        .collect();
    Ok(Tensor::new(&[maps.len(), m, f], data)?)
}

/// A model whose parameters have been placed on a graph.
pub struct BoundModel<'m, S> {
    model: &'m ModelState<S>,
    vars: Vec<Var>,
}

impl<'m, S: Scalar> BoundModel<'m, S> {
    /// Pairs `model`'s architecture with parameter handles already on a graph.
    pub fn from_vars(model: &'m ModelState<S>, vars: Vec<Var>) -> Self {
        Self { model, vars }
    }

    /// Graph handle of each parameter, in store order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn v(&self, slot: usize) -> Var {
        self.vars[slot]
    }

    /// `[batch, mels, frames]` features to `[batch, classes]` logits.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        input: Var,
        mode: &Mode,
        mut trace: Option<&mut ForwardTrace<S>>,
    ) -> Result<Var> {
        let lay = &self.model.layout;
        let mut x = self.subsample(g, input)?;
        note(&mut trace, "subsample", g.shape(x));
        for l in 0..lay.layers.len() {
            x = self.encode_layer(g, x, l, mode, trace.as_deref_mut())?;
            note(&mut trace, &format!("layer{l}"), g.shape(x));
        }
        let x = g.layer_norm(x, self.v(lay.final_norm.0), self.v(lay.final_norm.1))?;
        let pooled = g.mean_axis(x, 1)?;
        note(&mut trace, "pool", g.shape(pooled));
        let logits = g.linear(pooled, self.v(lay.head.0), self.v(lay.head.1))?;
        note(&mut trace, "logits", g.shape(logits));
        Ok(logits)
    }

    /// Two stride-2 convolutions over (mel, time), then a projection of
    /// each frame's channels × mels onto the model width.
    pub fn subsample(&self, g: &mut Graph<S>, input: Var) -> Result<Var> {
        let cfg = &self.model.config;
        let lay = &self.model.layout;
        let shape = g.shape(input).to_vec();
        if shape.len() != 3 || shape[0] == 0 || shape[1..] != [cfg.n_mels, cfg.n_frames] {
            return Err(invalid(format!(
                "expected [batch, {}, {}] features, got {shape:?}",
                cfg.n_mels, cfg.n_frames
            )));
        }
        let geo = Conv2dGeometry {
            stride: 2,
            padding: 1,
        };
        let x = g.reshape(input, &[shape[0], 1, shape[1], shape[2]])?;
        let x = g.conv2d(x, self.v(lay.conv1.0), self.v(lay.conv1.1), geo)?;
        let x = g.gelu(x)?;
        let x = g.conv2d(x, self.v(lay.conv2.0), self.v(lay.conv2.1), geo)?;
        let x = g.permute(x, &[0, 3, 1, 2])?;
        let s = g.shape(x).to_vec();
        let x = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
        Ok(g.linear(x, self.v(lay.proj.0), self.v(lay.proj.1))?)
    }

    /// One two-branch layer on `[batch, T, model_dim]`; shape preserving.
    pub fn encode_layer(
        &self,
        g: &mut Graph<S>,
        x: Var,
        layer: usize,
        mode: &Mode,
        trace: Option<&mut ForwardTrace<S>>,
    ) -> Result<Var> {
        let s = &self.model.layout.layers[layer];
        let attn = self.attention_branch(g, x, s, layer, mode, trace)?;
        let gate = self.gating_branch(g, x, s, layer, mode)?;
        let both = g.concat_last(attn, gate)?;
        let merged = g.linear(both, self.v(s.merge.0), self.v(s.merge.1))?;
        Ok(g.add(merged, x)?)
    }

    fn attention_branch(
        &self,
        g: &mut Graph<S>,
        x: Var,
        s: &LayerSlots,
        layer: usize,
        mode: &Mode,
        trace: Option<&mut ForwardTrace<S>>,
    ) -> Result<Var> {
        let cfg = &self.model.config;
        let shape = g.shape(x).to_vec();
        let (b, t, h, hd) = (shape[0], shape[1], cfg.heads, cfg.head_dim);
        let xn = g.layer_norm(x, self.v(s.attn_norm.0), self.v(s.attn_norm.1))?;
        let heads = |g: &mut Graph<S>, (w, bias): (usize, usize)| -> Result<Var> {
            let y = g.linear(xn, self.v(w), self.v(bias))?;
            let y = g.reshape(y, &[b, t, h, hd])?;
            let y = g.permute(y, &[0, 2, 1, 3])?;
            Ok(g.reshape(y, &[b * h, t, hd])?)
        };
        let q = heads(g, s.query)?;
        let k = heads(g, s.key)?;
        let v = heads(g, s.value)?;
        let kt = g.transpose_last(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (hd as f64).sqrt())?;
        let scores = g.reshape(scores, &[b, h, t, t])?;
        let bias = g.rel_pos_bias(self.v(s.rel_bias), t)?;
        let scores = g.add(scores, bias)?;
        let probs = g.softmax(scores)?;
        if let Some(tr) = trace {
            tr.attn_logits.push(g.value(scores).clone());
            tr.attn_probs.push(g.value(probs).clone());
        }
        let probs = g.reshape(probs, &[b * h, t, t])?;
        let ctx = g.matmul(probs, v)?;
        let ctx = g.reshape(ctx, &[b, h, t, hd])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, t, h * hd])?;
        let out = g.linear(ctx, self.v(s.out.0), self.v(s.out.1))?;
        self.dropout(g, out, mode, layer, "attn")
    }

    fn gating_branch(
        &self,
        g: &mut Graph<S>,
        x: Var,
        s: &LayerSlots,
        layer: usize,
        mode: &Mode,
    ) -> Result<Var> {
        let width = self.model.config.gate_width();
        let xn = g.layer_norm(x, self.v(s.conv_norm.0), self.v(s.conv_norm.1))?;
        let up = g.linear(xn, self.v(s.up.0), self.v(s.up.1))?;
        let up = g.gelu(up)?;
        let content = g.slice_last(up, 0, width)?;
        let gate = g.slice_last(up, width, width)?;
        let gate = g.depthwise_conv1d(gate, self.v(s.depthwise))?;
        let gated = g.mul(content, gate)?;
        let down = g.linear(gated, self.v(s.down.0), self.v(s.down.1))?;
        self.dropout(g, down, mode, layer, "gate")
    }

    fn dropout(
        &self,
        g: &mut Graph<S>,
        x: Var,
        mode: &Mode,
        layer: usize,
        site: &str,
    ) -> Result<Var> {
        match mode.keys() {
            None => Ok(x),
            Some(keys) => {
                let label = format!("layer{layer}.{site}");
                let site_keys: Vec<StreamKey> = keys.iter().map(|k| k.derive(&label)).collect();
                Ok(g.dropout(x, self.model.config.dropout_p, &site_keys)?)
            }
        }
    }
}

fn note<S>(trace: &mut Option<&mut ForwardTrace<S>>, stage: &str, shape: &[usize]) {
    if let Some(t) = trace {
        t.shapes.push((stage.to_string(), shape.to_vec()));
    }
}
