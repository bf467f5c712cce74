//! Multi-dimensional dynamic convolution.
//!
//! A [`DynConvLayer`] owns a static kernel `W` and three squeeze-and-excitation
//! style [`AttentionHead`]s. For every batch item the heads produce a spatial,
//! an input-channel and an output-channel attention vector; the kernel used
//! for that item is `W * (a_spa + a_in + a_out) / 3`, each vector broadcast
//! along its own kernel axis. The bias is not modulated.
//!
//! The heads read an attention input rather than the convolution input.
//! [`DenseAttentionState`] supplies it: either the previous layer's output,
//! or (densely connected mode) a running half/half mix of that output with
//! the previous attention input, so earlier layers fade geometrically.

use crate::autodiff::{Tape, Var};
use crate::conv::ConvGeometry;
use crate::error::{PvcError, Result};
use crate::params::{xavier_uniform, BoundParams, ParamId, ParamStore};
use crate::tensor::Tensor;
use rand::Rng;

/// How attention values are obtained during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum AttentionMode {
    /// Computed by the heads.
    #[default]
    Learned,
    /// Every attention value replaced by a constant (heads bypassed).
    Forced(f64),
}

/// GAP -> FC(2n) -> ReLU -> FC(n) -> sigmoid.
#[derive(Clone, Debug)]
pub struct AttentionHead {
    pub fc1_weight: ParamId,
    pub fc1_bias: ParamId,
    pub fc2_weight: ParamId,
    pub fc2_bias: ParamId,
    pub in_features: usize,
    pub n: usize,
}

impl AttentionHead {
    pub fn new(store: &mut ParamStore, prefix: &str, in_features: usize, n: usize, rng: &mut impl Rng) -> Self {
        let hidden = 2 * n;
        AttentionHead {
            fc1_weight: store.add(format!("{prefix}.fc1.weight"), xavier_uniform(&[hidden, in_features], rng)),
            fc1_bias: store.add(format!("{prefix}.fc1.bias"), Tensor::zeros(&[hidden])),
            fc2_weight: store.add(format!("{prefix}.fc2.weight"), xavier_uniform(&[n, hidden], rng)),
            fc2_bias: store.add(format!("{prefix}.fc2.bias"), Tensor::zeros(&[n])),
            in_features,
            n,
        }
    }

    /// `x_in [N, C_in, D, H, W] -> [N, n]`.
    pub fn forward<'t>(&self, params: &BoundParams<'t>, x_in: Var<'t>) -> Result<Var<'t>> {
        let shape = x_in.shape();
        if shape.len() != 5 || shape[1] != self.in_features {
            return Err(PvcError::dim(
                "attention_forward",
                format!("head expects {} channels, input has shape {shape:?}", self.in_features),
            ));
        }
        x_in.global_avg_pool()?
            .linear(params.var(self.fc1_weight), params.var(self.fc1_bias))?
            .relu()
            .linear(params.var(self.fc2_weight), params.var(self.fc2_bias))
            .map(Var::sigmoid)
    }
}

pub fn attention_forward<'t>(head: &AttentionHead, params: &BoundParams<'t>, x_in: Var<'t>) -> Result<Var<'t>> {
    head.forward(params, x_in)
}

/// Per-item dynamic kernel `[N, C_out, C_in, kd, kh, kw]` from a static
/// kernel and `[N, n]` attention vectors.
pub fn dynamic_kernel<'t>(w: Var<'t>, a_spa: Var<'t>, a_in: Var<'t>, a_out: Var<'t>) -> Result<Var<'t>> {
    w.modulate_kernel(a_spa, a_in, a_out)
}

/// The three heads of a dynamic layer.
#[derive(Clone, Debug)]
pub struct AttentionHeads {
    pub spatial: AttentionHead,
    pub input: AttentionHead,
    pub output: AttentionHead,
}

#[derive(Clone, Debug)]
pub struct DynConvLayer {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    /// `None` for a static layer.
    pub heads: Option<AttentionHeads>,
    pub geom: ConvGeometry,
    pub transpose: bool,
    /// Apply ReLU to the output.
    pub relu: bool,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: [usize; 3],
}

/// Construction parameters for a [`DynConvLayer`].
#[derive(Clone, Debug)]
pub struct LayerSpec {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: [usize; 3],
    pub geom: ConvGeometry,
    pub transpose: bool,
    pub relu: bool,
    /// Channel count of the attention input; `None` builds a static layer.
    pub attention_features: Option<usize>,
}

impl DynConvLayer {
    pub fn new(store: &mut ParamStore, spec: LayerSpec, rng: &mut impl Rng) -> Self {
        let [kd, kh, kw] = spec.kernel;
        let name = spec.name;
        let weight = store.add(
            format!("{name}.weight"),
            xavier_uniform(&[spec.c_out, spec.c_in, kd, kh, kw], rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[spec.c_out]));
        let heads = spec.attention_features.map(|f| AttentionHeads {
            spatial: AttentionHead::new(store, &format!("{name}.att_spa"), f, kd * kh * kw, rng),
            input: AttentionHead::new(store, &format!("{name}.att_in"), f, spec.c_in, rng),
            output: AttentionHead::new(store, &format!("{name}.att_out"), f, spec.c_out, rng),
        });
        DynConvLayer {
            name,
            weight,
            bias,
            heads,
            geom: spec.geom,
            transpose: spec.transpose,
            relu: spec.relu,
            c_in: spec.c_in,
            c_out: spec.c_out,
            kernel: spec.kernel,
        }
    }

    pub fn is_dynamic(&self) -> bool {
        self.heads.is_some()
    }

    pub fn spatial_len(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Attention vectors `(a_spa, a_in, a_out)`, each `[N, n]`.
    pub fn attention<'t>(
        &self,
        params: &BoundParams<'t>,
        attention_input: Var<'t>,
        mode: AttentionMode,
    ) -> Result<Option<(Var<'t>, Var<'t>, Var<'t>)>> {
        let Some(heads) = &self.heads else {
            return Ok(None);
        };
        let batch = attention_input.shape()[0];
        Ok(Some(match mode {
            AttentionMode::Learned => (
                heads.spatial.forward(params, attention_input)?,
                heads.input.forward(params, attention_input)?,
                heads.output.forward(params, attention_input)?,
            ),
            AttentionMode::Forced(v) => {
                let tape: &'t Tape = attention_input.tape();
                let c = |n: usize| tape.constant(Tensor::full(&[batch, n], v));
                (c(self.spatial_len()), c(self.c_in), c(self.c_out))
            }
        }))
    }

    /// Convolves `x` with the (dynamic) kernel. `attention_input` is ignored
    /// by static layers and required by dynamic ones.
    pub fn forward<'t>(
        &self,
        params: &BoundParams<'t>,
        x: Var<'t>,
        attention_input: Option<Var<'t>>,
        mode: AttentionMode,
    ) -> Result<Var<'t>> {
        let xs = x.shape();
        if xs.len() != 5 || xs[1] != self.c_in {
            return Err(PvcError::dim(
                "dynconv_forward",
                format!("layer {} expects {} input channels, got shape {xs:?}", self.name, self.c_in),
            ));
        }
        let w = params.var(self.weight);
        let b = params.var(self.bias);
        let kernel = if self.is_dynamic() {
            let a_in = attention_input.ok_or_else(|| {
                PvcError::Contract(format!("dynamic layer {} needs an attention input", self.name))
            })?;
            if a_in.shape()[0] != xs[0] {
                return Err(PvcError::dim(
                    "dynconv_forward",
                    format!("attention batch {} differs from input batch {}", a_in.shape()[0], xs[0]),
                ));
            }
            let (s, i, o) = self.attention(params, a_in, mode)?.expect("dynamic layer has heads");
            dynamic_kernel(w, s, i, o)?
        } else {
            w
        };
        let y = if self.transpose {
            x.conv3d_transpose(kernel, Some(b), self.geom)?
        } else {
            x.conv3d(kernel, Some(b), self.geom)?
        };
        Ok(if self.relu { y.relu() } else { y })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.weight, self.bias];
        if let Some(h) = &self.heads {
            for head in [&h.spatial, &h.input, &h.output] {
                ids.extend([head.fc1_weight, head.fc1_bias, head.fc2_weight, head.fc2_bias]);
            }
        }
        ids
    }
}

/// `½ (x_lminus1 + x_prev)`, with `x_prev` first reconciled to the shape of
/// `x_lminus1`: spatial extents are centre-cropped or zero-padded, and a
/// differing channel count is replaced by the channel mean replicated.
pub fn dense_mix<'t>(x_lminus1: Var<'t>, x_prev: Var<'t>) -> Result<Var<'t>> {
    let target = x_lminus1.shape();
    let prev_shape = x_prev.shape();
    if target.len() != 5 || prev_shape.len() != 5 || target[0] != prev_shape[0] {
        return Err(PvcError::dim(
            "dense_mix",
            format!("cannot reconcile {prev_shape:?} with {target:?}"),
        ));
    }
    let fitted = x_prev
        .fit_channels(target[1])?
        .center_fit([target[2], target[3], target[4]])?;
    Ok(x_lminus1.add(fitted)?.scalar_mul(0.5))
}

/// Carries attention inputs along a chain of layers.
///
/// Before the first layer runs, the state holds the raw network input, which
/// is that layer's attention input. Afterwards, in dense mode the input to
/// layer `l` is `½ (x_{l-1} + x_{l-1}^in)` with `x_1^in := x_1`, so the raw
/// volume drives only layer 1 and the unrolled weights over
/// `x_{l-1}, x_{l-2}, ..., x_1` are `½, ¼, ..., 2^{-(l-2)}, 2^{-(l-2)}`.
/// Without dense mode it is simply `x_{l-1}`.
#[derive(Clone, Debug)]
pub struct DenseAttentionState<'t> {
    x_prev: Var<'t>,
    last_output: Option<Var<'t>>,
    layer: usize,
    dense: bool,
}

impl<'t> DenseAttentionState<'t> {
    pub fn new(input: Var<'t>, dense: bool) -> Self {
        DenseAttentionState {
            x_prev: input,
            last_output: None,
            layer: 1,
            dense,
        }
    }

    /// 1-based index of the next layer to run.
    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn is_dense(&self) -> bool {
        self.dense
    }

    /// Attention input for the current layer (does not advance the chain).
    pub fn next_attention_input(&mut self) -> Result<Var<'t>> {
        let Some(last) = self.last_output else {
            return Ok(self.x_prev);
        };
        if !self.dense {
            return Ok(last);
        }
        if self.layer == 2 {
            self.x_prev = last;
            return Ok(last);
        }
        let mixed = dense_mix(last, self.x_prev)?;
        self.x_prev = mixed;
        Ok(mixed)
    }

    /// Records the current layer's output and moves to the next layer.
    pub fn record_output(&mut self, y: Var<'t>) {
        self.last_output = Some(y);
        self.layer += 1;
    }

    /// Output channel count of the most recent layer (input channels before
    /// any layer has run).
    pub fn feature_channels(&self) -> usize {
        self.last_output.unwrap_or(self.x_prev).shape()[1]
    }
}

/// One dynamic layer step: attention input from `state`, convolution of `x`,
/// output recorded back into `state`.
pub fn dynconv_forward<'t>(
    layer: &DynConvLayer,
    params: &BoundParams<'t>,
    x: Var<'t>,
    state: &mut DenseAttentionState<'t>,
    mode: AttentionMode,
) -> Result<Var<'t>> {
    let a_in = if layer.is_dynamic() {
        Some(state.next_attention_input()?)
    } else {
        None
    };
    let y = layer.forward(params, x, a_in, mode)?;
    state.record_output(y);
    Ok(y)
}
