//! Densely connected dynamic U-net.
//!
//! Down block `b`: valid `1x3x3` (dynamic) convolution that trims H and W by
//! two, then a dense block. Up block `j`: transposed `1x3x3` convolution that
//! grows H and W by two, then a dense block. Up block 0 reads the deepest down
//! output; up block `j > 0` reads the previous up output concatenated with
//! the matching down output. A `1x1x1` convolution to one channel with ReLU
//! produces the activity estimate. Every convolution is followed by ReLU and
//! the depth axis is never resampled.
//!
//! A dense block with `L` layers: layer `i` convolves the concatenation of the
//! block input and all earlier in-block outputs with a padded `5x3x3` kernel;
//! a `1x1x1` transition folds all `L + 1` feature groups back to `filters`.
//!
//! Block indices in errors count down blocks first (`0..blocks`), then up
//! blocks (`blocks..2*blocks`).

use crate::autodiff::{Tape, Var};
use crate::conv::ConvGeometry;
use crate::dynconv::{dynconv_forward, AttentionMode, DenseAttentionState, DynConvLayer, LayerSpec};
use crate::error::{PvcError, Result};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Non-linearity after the terminal 1x1x1 convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    /// Can latch at an all-zero output once every terminal pre-activation
    /// goes negative.
    Relu,
    /// `ln(1 + e^x)`: positive with a gradient everywhere.
    #[default]
    Softplus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// 1 (emission only) or 2 (emission plus CT-like channel).
    pub input_channels: usize,
    pub filters: usize,
    pub down_up_blocks: usize,
    pub dense_layers_per_block: usize,
    pub sampling_kernel: [usize; 3],
    pub dense_kernel: [usize; 3],
    pub dc_dy_enabled: bool,
    pub dynamic_enabled: bool,
    /// Spatial extents the model will see, checked at build time when set.
    pub input_dims: Option<[usize; 3]>,
    pub output_activation: OutputActivation,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_channels: 1,
            filters: 32,
            down_up_blocks: 4,
            dense_layers_per_block: 2,
            sampling_kernel: [1, 3, 3],
            dense_kernel: [5, 3, 3],
            dc_dy_enabled: true,
            dynamic_enabled: true,
            input_dims: None,
            output_activation: OutputActivation::Softplus,
        }
    }
}

impl NetworkConfig {
    /// Plain U-net (static kernels).
    pub fn static_unet() -> Self {
        NetworkConfig {
            dynamic_enabled: false,
            dc_dy_enabled: false,
            ..Self::default()
        }
    }

    /// Dynamic U-net whose attentions read only the previous layer.
    pub fn dynamic_unet() -> Self {
        NetworkConfig {
            dc_dy_enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PvcError::Config(m));
        if !(1..=2).contains(&self.input_channels) {
            return bad(format!("input_channels must be 1 or 2, got {}", self.input_channels));
        }
        if self.filters == 0 || self.down_up_blocks == 0 {
            return bad("filters and down_up_blocks must be positive".into());
        }
        if self.sampling_kernel.contains(&0) || self.dense_kernel.contains(&0) {
            return bad("kernel extents must be positive".into());
        }
        if self.sampling_kernel[0] != 1 {
            return bad("sampling kernel must have depth 1 so the z extent is preserved".into());
        }
        if self.dense_kernel.iter().any(|k| k % 2 == 0) {
            return bad(format!("dense kernel {:?} must be odd for same-size padding", self.dense_kernel));
        }
        if self.dc_dy_enabled && !self.dynamic_enabled {
            return bad("dc_dy_enabled requires dynamic_enabled".into());
        }
        if let Some(d) = self.input_dims {
            trace_shapes(self, [1, self.input_channels, d[0], d[1], d[2]])?;
        }
        Ok(())
    }

    fn dense_geom(&self) -> ConvGeometry {
        ConvGeometry::padded(self.dense_kernel.map(|k| k / 2))
    }
}

/// Output shape of every layer for an input of `shape`, without computing
/// anything. Fails with [`PvcError::BlockShape`] at the first block whose
/// sampling convolution does not fit.
pub fn trace_shapes(config: &NetworkConfig, shape: [usize; 5]) -> Result<Vec<(String, [usize; 5])>> {
    let [n, c, d, h, w] = shape;
    if c != config.input_channels {
        return Err(PvcError::dim(
            "network",
            format!("input has {c} channels, config expects {}", config.input_channels),
        ));
    }
    let f = config.filters;
    let k = config.sampling_kernel;
    let blocks = config.down_up_blocks;
    let mut out = Vec::new();
    let mut spatial = [d, h, w];
    for b in 0..blocks {
        spatial = ConvGeometry::valid()
            .conv_output("down sampling", spatial, k)
            .map_err(|e| PvcError::BlockShape {
                block: b,
                detail: format!("input {:?} too small: {e}", [d, h, w]),
            })?;
        out.push((format!("down{b}.sample"), [n, f, spatial[0], spatial[1], spatial[2]]));
        out.push((format!("down{b}.dense"), [n, f, spatial[0], spatial[1], spatial[2]]));
    }
    for j in 0..blocks {
        spatial = ConvGeometry::valid().transpose_output("up sampling", spatial, k)?;
        out.push((format!("up{j}.sample"), [n, f, spatial[0], spatial[1], spatial[2]]));
        out.push((format!("up{j}.dense"), [n, f, spatial[0], spatial[1], spatial[2]]));
    }
    out.push(("terminal".into(), [n, 1, spatial[0], spatial[1], spatial[2]]));
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Block {
    pub sample: DynConvLayer,
    pub dense: Vec<DynConvLayer>,
    pub transition: DynConvLayer,
}

impl Block {
    fn layers(&self) -> impl Iterator<Item = &DynConvLayer> {
        std::iter::once(&self.sample)
            .chain(self.dense.iter())
            .chain(std::iter::once(&self.transition))
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: NetworkConfig,
    pub params: ParamStore,
    pub down: Vec<Block>,
    pub up: Vec<Block>,
    pub terminal: DynConvLayer,
}

struct Builder<'a> {
    config: &'a NetworkConfig,
    store: ParamStore,
    rng: ChaCha8Rng,
    /// Channels of the attention input for the next layer.
    attention_features: usize,
}

impl Builder<'_> {
    fn layer(&mut self, name: String, c_in: usize, c_out: usize, kernel: [usize; 3], geom: ConvGeometry, transpose: bool) -> DynConvLayer {
        let spec = LayerSpec {
            name,
            c_in,
            c_out,
            kernel,
            geom,
            transpose,
            relu: true,
            attention_features: self.config.dynamic_enabled.then_some(self.attention_features),
        };
        self.attention_features = c_out;
        DynConvLayer::new(&mut self.store, spec, &mut self.rng)
    }

    fn block(&mut self, prefix: &str, c_in: usize, transpose: bool) -> Block {
        let f = self.config.filters;
        let cfg = self.config;
        let sample = self.layer(format!("{prefix}.sample"), c_in, f, cfg.sampling_kernel, ConvGeometry::valid(), transpose);
        let dense = (0..cfg.dense_layers_per_block)
            .map(|i| self.layer(format!("{prefix}.dense{i}"), (i + 1) * f, f, cfg.dense_kernel, cfg.dense_geom(), false))
            .collect();
        let transition = self.layer(
            format!("{prefix}.transition"),
            (cfg.dense_layers_per_block + 1) * f,
            f,
            [1, 1, 1],
            ConvGeometry::valid(),
            false,
        );
        Block { sample, dense, transition }
    }
}

impl Model {
    /// Xavier-uniform kernels and zero biases, deterministic in `seed`.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut b = Builder {
            config,
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            attention_features: config.input_channels,
        };
        let f = config.filters;
        let mut down = Vec::with_capacity(config.down_up_blocks);
        for i in 0..config.down_up_blocks {
            let c_in = if i == 0 { config.input_channels } else { f };
            down.push(b.block(&format!("down{i}"), c_in, false));
        }
        let mut up = Vec::with_capacity(config.down_up_blocks);
        for j in 0..config.down_up_blocks {
            let c_in = if j == 0 { f } else { 2 * f };
            up.push(b.block(&format!("up{j}"), c_in, true));
        }
        let mut terminal = b.layer("terminal".into(), f, 1, [1, 1, 1], ConvGeometry::valid(), false);
        terminal.relu = config.output_activation == OutputActivation::Relu;
        Ok(Model {
            config: config.clone(),
            params: b.store,
            down,
            up,
            terminal,
        })
    }

    pub fn layers(&self) -> impl Iterator<Item = &DynConvLayer> {
        self.down
            .iter()
            .chain(self.up.iter())
            .flat_map(Block::layers)
            .chain(std::iter::once(&self.terminal))
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Scalars held by convolution kernels and biases (excluding heads).
    pub fn conv_parameter_count(&self) -> usize {
        self.layers()
            .map(|l| self.params.get(l.weight).len() + self.params.get(l.bias).len())
            .sum()
    }

    /// `[N, C, D, H, W] -> [N, 1, D, H, W]` on an existing tape.
    pub fn forward<'t>(&self, params: &BoundParams<'t>, x: Var<'t>, mode: AttentionMode) -> Result<Var<'t>> {
        let shape = x.shape();
        let s: [usize; 5] = shape
            .as_slice()
            .try_into()
            .map_err(|_| PvcError::dim("network", format!("expected [N, C, D, H, W], got {shape:?}")))?;
        trace_shapes(&self.config, s)?;
        let mut state = DenseAttentionState::new(x, self.config.dc_dy_enabled);
        let run_block = |block: &Block, input: Var<'t>, state: &mut DenseAttentionState<'t>| -> Result<Var<'t>> {
            let h0 = dynconv_forward(&block.sample, params, input, state, mode)?;
            let mut group = vec![h0];
            for layer in &block.dense {
                let inp = if group.len() == 1 { h0 } else { Var::concat(&group, 1)? };
                group.push(dynconv_forward(layer, params, inp, state, mode)?);
            }
            let all = Var::concat(&group, 1)?;
            dynconv_forward(&block.transition, params, all, state, mode)
        };
        let mut skips = Vec::with_capacity(self.down.len());
        let mut h = x;
        for block in &self.down {
            h = run_block(block, h, &mut state)?;
            skips.push(h);
        }
        for (j, block) in self.up.iter().enumerate() {
            let input = if j == 0 {
                h
            } else {
                Var::concat(&[h, skips[skips.len() - 1 - j]], 1)?
            };
            h = run_block(block, input, &mut state)?;
        }
        let y = dynconv_forward(&self.terminal, params, h, &mut state, mode)?;
        Ok(match self.config.output_activation {
            OutputActivation::Relu => y,
            OutputActivation::Softplus => y.softplus(),
        })
    }

    /// Inference on a fresh tape with learned attention.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.predict_with(x, AttentionMode::Learned)
    }

    pub fn predict_with(&self, x: &Tensor, mode: AttentionMode) -> Result<Tensor> {
        let tape = Tape::new();
        let params = self.params.bind(&tape, false);
        let y = self.forward(&params, tape.constant(x.clone()), mode)?;
        Ok(y.to_tensor())
    }
}
