//! Conditional velocity estimators.
//!
//! Two variants share one parameter/gradient machinery: a UNet for
//! images and a small MLP for the two-component toy problem. Both take
//! the interpolant state `x_t`, an encoding of the back-projected data
//! `A^T b`, the time `t` and (for the noise-informed variant) the
//! normalized noise level, and return an estimate of the transport
//! velocity.
//!
//! The UNet realization: per level a residual block of two 3x3
//! convolutions with SiLU, conditioning injected between the convs
//! (time and noise embeddings projected to per-channel biases, the
//! data encoding pooled to the level's resolution and projected by a
//! 1x1 conv), 2x average-pool downsampling, nearest-neighbor
//! upsampling followed by a 3x3 conv, and skip connections by channel
//! concatenation. The data encoder is a single learnable 3x3
//! convolution (an affine map for the MLP variant).

mod tape;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, DawnError, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

use tape::{NodeId, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    Mlp,
    Unet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    /// `(C, H, W)` for the UNet, `(n,)` for the MLP.
    pub input_shape: Vec<usize>,
    /// UNet widths, first entry the image channel count: `[c, 16, 32]`.
    pub channels: Vec<usize>,
    /// MLP hidden widths.
    pub hidden: Vec<usize>,
    /// Length of the time / noise embeddings.
    pub embed_dim: usize,
    /// Channel count of the UNet data encoder output.
    pub encoder_channels: usize,
    /// Whether the estimator receives the noise level.
    pub noise_conditioning: bool,
}

impl ModelConfig {
    /// UNet sized by image side: 3 levels `[c, 16, 32]` up to side 32,
    /// 5 levels `[c, 16, 32, 64, 128]` at side 64.
    pub fn unet_for_side(image_channels: usize, side: usize, noise_conditioning: bool) -> Self {
        let channels = if side <= 32 {
            vec![image_channels, 16, 32]
        } else {
            vec![image_channels, 16, 32, 64, 128]
        };
        Self {
            variant: ModelVariant::Unet,
            input_shape: vec![image_channels, side, side],
            channels,
            hidden: Vec::new(),
            embed_dim: 256,
            encoder_channels: 16,
            noise_conditioning,
        }
    }

    /// Toy network for the duathlon problem: three hidden layers of 64
    /// on the concatenation of `x_t`, the encoded data and 32-wide
    /// scalar embeddings.
    pub fn mlp_toy(noise_conditioning: bool) -> Self {
        Self {
            variant: ModelVariant::Mlp,
            input_shape: vec![2],
            channels: Vec::new(),
            hidden: vec![64, 64, 64],
            embed_dim: 32,
            encoder_channels: 0,
            noise_conditioning,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 4 || self.embed_dim % 2 != 0 {
            return Err(DawnError::Config(format!(
                "embed_dim must be even and >= 4, got {}",
                self.embed_dim
            )));
        }
        match self.variant {
            ModelVariant::Mlp => {
                if self.input_shape.len() != 1 {
                    return Err(DawnError::Config(format!(
                        "mlp input shape must be (n,), got {:?}",
                        self.input_shape
                    )));
                }
                if self.hidden.is_empty() {
                    return Err(DawnError::Config("mlp needs hidden widths".into()));
                }
            }
            ModelVariant::Unet => {
                if self.input_shape.len() != 3 {
                    return Err(DawnError::Config(format!(
                        "unet input shape must be (C,H,W), got {:?}",
                        self.input_shape
                    )));
                }
                if self.channels.len() < 2 {
                    return Err(DawnError::Config(
                        "unet channel list needs at least [c, w1]".into(),
                    ));
                }
                if self.channels[0] != self.input_shape[0] {
                    return Err(DawnError::Config(format!(
                        "channel list head {} must equal image channels {}",
                        self.channels[0], self.input_shape[0]
                    )));
                }
                if self.encoder_channels == 0 {
                    return Err(DawnError::Config("encoder_channels must be positive".into()));
                }
                let levels = self.channels.len() - 1;
                let down = 1usize << (levels - 1);
                let (h, w) = (self.input_shape[1], self.input_shape[2]);
                if h % down != 0 || w % down != 0 {
                    return Err(DawnError::Config(format!(
                        "input {h}x{w} not divisible by the {down}x downsampling of {levels} levels"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Named learnable tensors in a fixed, deterministic order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    entries: Vec<(String, Tensor)>,
}

impl ParameterSet {
    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub(crate) fn value_at(&self, idx: usize) -> &Tensor {
        &self.entries[idx].1
    }

    pub(crate) fn value_at_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].1
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Mutable access by flat scalar index across all entries, used by
    /// finite-difference probes.
    pub fn scalar_mut(&mut self, flat: usize) -> &mut f64 {
        let mut offset = flat;
        for (_, t) in &mut self.entries {
            if offset < t.len() {
                return &mut t.data_mut()[offset];
            }
            offset -= t.len();
        }
        panic!("flat parameter index {flat} out of range");
    }
}

/// Per-parameter gradients, aligned with a [`ParameterSet`].
#[derive(Debug, Clone)]
pub struct Gradients {
    entries: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(params: &ParameterSet) -> Self {
        Self {
            entries: params
                .entries
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    pub fn get(&self, params: &ParameterSet, name: &str) -> Option<&Tensor> {
        params.index_of(name).map(|i| &self.entries[i])
    }

    pub(crate) fn value_at(&self, idx: usize) -> &Tensor {
        &self.entries[idx]
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        assert_eq!(self.entries.len(), other.entries.len());
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            a.add_scaled_mut(1.0, b).expect("gradient shapes agree");
        }
    }

    pub fn scale_mut(&mut self, a: f64) {
        for t in &mut self.entries {
            for v in t.data_mut() {
                *v *= a;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0f64, |m, t| m.max(t.max_abs()))
    }

    /// Read by flat scalar index, mirroring `ParameterSet::scalar_mut`.
    pub fn scalar(&self, flat: usize) -> f64 {
        let mut offset = flat;
        for t in &self.entries {
            if offset < t.len() {
                return t.data()[offset];
            }
            offset -= t.len();
        }
        panic!("flat gradient index {flat} out of range");
    }
}

#[derive(Debug, Clone)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
    bias: bool,
}

fn weight(name: impl Into<String>, shape: Vec<usize>, fan_in: usize) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        shape,
        fan_in,
        bias: false,
    }
}

fn bias(name: impl Into<String>, len: usize) -> ParamSpec {
    ParamSpec {
        name: name.into(),
        shape: vec![len],
        fan_in: 0,
        bias: true,
    }
}

fn linear_specs(out: &mut Vec<ParamSpec>, prefix: &str, n_out: usize, n_in: usize) {
    out.push(weight(format!("{prefix}.w"), vec![n_out, n_in], n_in));
    out.push(bias(format!("{prefix}.b"), n_out));
}

fn conv_specs(out: &mut Vec<ParamSpec>, prefix: &str, cout: usize, cin: usize, k: usize) {
    out.push(weight(
        format!("{prefix}.w"),
        vec![cout, cin, k, k],
        cin * k * k,
    ));
    out.push(bias(format!("{prefix}.b"), cout));
}

fn embed_specs(out: &mut Vec<ParamSpec>, prefix: &str, dim: usize) {
    linear_specs(out, &format!("{prefix}.fc1"), dim, dim);
    linear_specs(out, &format!("{prefix}.fc2"), dim, dim);
}

fn resblock_specs(out: &mut Vec<ParamSpec>, site: &str, width: usize, cfg: &ModelConfig) {
    conv_specs(out, &format!("{site}.conv1"), width, width, 3);
    linear_specs(out, &format!("{site}.t_proj"), width, cfg.embed_dim);
    if cfg.noise_conditioning {
        linear_specs(out, &format!("{site}.s_proj"), width, cfg.embed_dim);
    }
    conv_specs(out, &format!("{site}.d_proj"), width, cfg.encoder_channels, 1);
    conv_specs(out, &format!("{site}.conv2"), width, width, 3);
}

fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    match cfg.variant {
        ModelVariant::Mlp => {
            let n = cfg.input_shape[0];
            linear_specs(&mut specs, "enc", n, n);
            embed_specs(&mut specs, "t_embed", cfg.embed_dim);
            if cfg.noise_conditioning {
                embed_specs(&mut specs, "s_embed", cfg.embed_dim);
            }
            let mut width = 2 * n + cfg.embed_dim * if cfg.noise_conditioning { 2 } else { 1 };
            for (i, &h) in cfg.hidden.iter().enumerate() {
                linear_specs(&mut specs, &format!("fc{}", i + 1), h, width);
                width = h;
            }
            linear_specs(&mut specs, "out", n, width);
        }
        ModelVariant::Unet => {
            let c = cfg.channels[0];
            let widths = &cfg.channels[1..];
            let levels = widths.len();
            conv_specs(&mut specs, "enc", cfg.encoder_channels, c, 3);
            embed_specs(&mut specs, "t_embed", cfg.embed_dim);
            if cfg.noise_conditioning {
                embed_specs(&mut specs, "s_embed", cfg.embed_dim);
            }
            conv_specs(&mut specs, "stem", widths[0], c, 3);
            for i in 0..levels - 1 {
                resblock_specs(&mut specs, &format!("down{i}"), widths[i], cfg);
                conv_specs(&mut specs, &format!("shrink{i}"), widths[i + 1], widths[i], 3);
            }
            resblock_specs(&mut specs, "mid", widths[levels - 1], cfg);
            for i in (0..levels - 1).rev() {
                conv_specs(&mut specs, &format!("grow{i}"), widths[i], widths[i + 1], 3);
                conv_specs(&mut specs, &format!("fuse{i}"), widths[i], 2 * widths[i], 3);
                resblock_specs(&mut specs, &format!("up{i}"), widths[i], cfg);
            }
            conv_specs(&mut specs, "head", c, widths[0], 3);
        }
    }
    specs
}

fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Fixed sinusoidal features of a scalar: `embed_dim/2` sine/cosine
/// pairs with frequencies geometric between 1 and 1000, matched to
/// arguments of order one (t in [0,1], normalized noise in [0,0.2]).
fn sinusoidal_features(value: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Tensor::zeros(&[dim]);
    for i in 0..half {
        let expo = if half > 1 {
            i as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let freq = 1000f64.powf(expo);
        out.data_mut()[i] = (freq * value).sin();
        out.data_mut()[half + i] = (freq * value).cos();
    }
    out
}

/// Which scalar-embedding pathway to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingKind {
    Time,
    Noise,
}

enum DataInput<'a> {
    /// Back-projected data `A^T b`; runs through the learnable encoder.
    Raw(&'a Tensor),
    /// Pre-encoded data embedding, as produced by `encode_data`.
    Encoded(&'a Tensor),
}

pub struct VelocityModel {
    cfg: ModelConfig,
}

/// Recorded forward pass; `backward` can be called any number of
/// times, each returning fresh gradients for the supplied upstream.
pub struct Recording {
    tape: Tape,
    output: NodeId,
    x_t_node: NodeId,
    used: Vec<(usize, NodeId)>,
    n_params: usize,
}

pub struct BackwardPass {
    pub grads: Gradients,
    pub d_x_t: Tensor,
}

impl Recording {
    pub fn output(&self) -> &Tensor {
        self.tape.value(self.output)
    }

    pub fn backward(&self, upstream: &Tensor) -> Result<BackwardPass> {
        if upstream.shape() != self.output().shape() {
            return Err(shape_err(format!(
                "upstream shape {:?} does not match output {:?}",
                upstream.shape(),
                self.output().shape()
            )));
        }
        let node_grads = self.tape.backward(self.output, upstream.clone());
        let mut entries: Vec<Option<Tensor>> = vec![None; self.n_params];
        for &(param_idx, node_id) in &self.used {
            if let Some(g) = &node_grads[node_id] {
                entries[param_idx] = Some(g.clone());
            }
        }
        let d_x_t = node_grads[self.x_t_node]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.tape.value(self.x_t_node).shape()));
        // Parameters the graph never touched (possible only for a
        // malformed spec list) fall back to zero gradients.
        let grads = Gradients {
            entries: entries
                .into_iter()
                .enumerate()
                .map(|(i, g)| g.unwrap_or_else(|| Tensor::zeros(self.shape_of(i))))
                .collect(),
        };
        Ok(BackwardPass { grads, d_x_t })
    }

    fn shape_of(&self, param_idx: usize) -> &[usize] {
        let node = self
            .used
            .iter()
            .find(|(i, _)| *i == param_idx)
            .map(|(_, n)| *n)
            .expect("parameter index out of range");
        self.tape.value(node).shape()
    }
}

struct Builder<'p> {
    tape: Tape,
    params: &'p ParameterSet,
    used: Vec<(usize, NodeId)>,
}

impl<'p> Builder<'p> {
    fn new(params: &'p ParameterSet) -> Self {
        Self {
            tape: Tape::new(),
            params,
            used: Vec::new(),
        }
    }

    fn param(&mut self, name: &str) -> NodeId {
        let idx = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("model references unknown parameter {name}"));
        if let Some(&(_, id)) = self.used.iter().find(|(i, _)| *i == idx) {
            return id;
        }
        let id = self.tape.leaf(self.params.value_at(idx).clone());
        self.used.push((idx, id));
        id
    }

    fn linear(&mut self, x: NodeId, prefix: &str) -> NodeId {
        let w = self.param(&format!("{prefix}.w"));
        let b = self.param(&format!("{prefix}.b"));
        self.tape.linear(x, w, b)
    }

    fn conv(&mut self, x: NodeId, prefix: &str) -> NodeId {
        let w = self.param(&format!("{prefix}.w"));
        let b = self.param(&format!("{prefix}.b"));
        self.tape.conv2d(x, w, b)
    }

    fn embed(&mut self, value: f64, prefix: &str, dim: usize) -> NodeId {
        let feats = self.tape.leaf(sinusoidal_features(value, dim));
        let h = self.linear(feats, &format!("{prefix}.fc1"));
        let h = self.tape.silu(h);
        self.linear(h, &format!("{prefix}.fc2"))
    }
}

impl VelocityModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Deterministic fan-in-scaled uniform initialization. Each
    /// parameter draws from its own stream keyed by the parameter
    /// name, so variants sharing a name share initial values.
    pub fn init_params(&self, seed: u64) -> ParameterSet {
        let master = SeededRng::new(seed);
        let entries = param_specs(&self.cfg)
            .into_iter()
            .map(|spec| {
                let value = if spec.bias {
                    Tensor::zeros(&spec.shape)
                } else {
                    let mut rng = master.child(fnv1a64(&spec.name));
                    let bound = 1.0 / (spec.fan_in.max(1) as f64).sqrt();
                    Tensor::from_fn(&spec.shape, |_| rng.uniform(-bound, bound))
                };
                (spec.name, value)
            })
            .collect();
        ParameterSet { entries }
    }

    /// Total learnable scalar count, a pure function of the config.
    pub fn param_count(&self) -> usize {
        param_specs(&self.cfg)
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }

    /// Evaluates one scalar-embedding pathway.
    pub fn embed_scalar(
        &self,
        params: &ParameterSet,
        value: f64,
        kind: EmbeddingKind,
    ) -> Result<Tensor> {
        if !value.is_finite() {
            return Err(DawnError::InvalidParameter(format!(
                "embedding input must be finite, got {value}"
            )));
        }
        let prefix = match kind {
            EmbeddingKind::Time => "t_embed",
            EmbeddingKind::Noise => {
                if !self.cfg.noise_conditioning {
                    return Err(DawnError::Config(
                        "noise embedding requested from a noise-blind model".into(),
                    ));
                }
                "s_embed"
            }
        };
        let mut b = Builder::new(params);
        let out = b.embed(value, prefix, self.cfg.embed_dim);
        Ok(b.tape.value(out).clone())
    }

    /// Runs the learnable data encoder on `A^T b`.
    pub fn encode_data(&self, params: &ParameterSet, atb: &Tensor) -> Result<Tensor> {
        self.check_data_shape(atb)?;
        let mut b = Builder::new(params);
        let leaf = b.tape.leaf(atb.clone());
        let out = match self.cfg.variant {
            ModelVariant::Mlp => b.linear(leaf, "enc"),
            ModelVariant::Unet => b.conv(leaf, "enc"),
        };
        Ok(b.tape.value(out).clone())
    }

    fn check_input_shape(&self, x_t: &Tensor) -> Result<()> {
        if x_t.shape() != &self.cfg.input_shape[..] {
            return Err(shape_err(format!(
                "model input shape {:?}, got {:?}",
                self.cfg.input_shape,
                x_t.shape()
            )));
        }
        Ok(())
    }

    fn check_data_shape(&self, atb: &Tensor) -> Result<()> {
        self.check_input_shape(atb)
    }

    fn check_conditioning(&self, sigma: Option<f64>) -> Result<()> {
        match (self.cfg.noise_conditioning, sigma) {
            (true, None) => Err(DawnError::Config(
                "noise-informed model needs a sigma value".into(),
            )),
            (false, Some(_)) => Err(DawnError::Config(
                "sigma supplied to a noise-blind model".into(),
            )),
            _ => Ok(()),
        }
    }

    fn encoded_shape(&self) -> Vec<usize> {
        match self.cfg.variant {
            ModelVariant::Mlp => self.cfg.input_shape.clone(),
            ModelVariant::Unet => vec![
                self.cfg.encoder_channels,
                self.cfg.input_shape[1],
                self.cfg.input_shape[2],
            ],
        }
    }

    fn build(
        &self,
        params: &ParameterSet,
        x_t: &Tensor,
        data: DataInput<'_>,
        t: f64,
        sigma: Option<f64>,
    ) -> Result<Recording> {
        self.check_input_shape(x_t)?;
        self.check_conditioning(sigma)?;
        if !t.is_finite() {
            return Err(DawnError::InvalidParameter(format!("time must be finite, got {t}")));
        }
        match &data {
            DataInput::Raw(atb) => self.check_data_shape(atb)?,
            DataInput::Encoded(e) => {
                if e.shape() != &self.encoded_shape()[..] {
                    return Err(shape_err(format!(
                        "data embedding shape {:?}, expected {:?}",
                        e.shape(),
                        self.encoded_shape()
                    )));
                }
            }
        }

        let mut b = Builder::new(params);
        let x_t_node = b.tape.leaf(x_t.clone());
        let enc = match &data {
            DataInput::Raw(atb) => {
                let leaf = b.tape.leaf((*atb).clone());
                match self.cfg.variant {
                    ModelVariant::Mlp => b.linear(leaf, "enc"),
                    ModelVariant::Unet => b.conv(leaf, "enc"),
                }
            }
            DataInput::Encoded(e) => b.tape.leaf((*e).clone()),
        };
        let temb = b.embed(t, "t_embed", self.cfg.embed_dim);
        let semb = match sigma {
            Some(s) => Some(b.embed(s, "s_embed", self.cfg.embed_dim)),
            None => None,
        };

        let output = match self.cfg.variant {
            ModelVariant::Mlp => self.build_mlp(&mut b, x_t_node, enc, temb, semb),
            ModelVariant::Unet => self.build_unet(&mut b, x_t_node, enc, temb, semb),
        };
        Ok(Recording {
            tape: b.tape,
            output,
            x_t_node,
            used: b.used,
            n_params: params.len(),
        })
    }

    fn build_mlp(
        &self,
        b: &mut Builder<'_>,
        x_t: NodeId,
        enc: NodeId,
        temb: NodeId,
        semb: Option<NodeId>,
    ) -> NodeId {
        let mut parts = vec![x_t, enc, temb];
        if let Some(s) = semb {
            parts.push(s);
        }
        let mut h = b.tape.concat(parts);
        for i in 0..self.cfg.hidden.len() {
            h = b.linear(h, &format!("fc{}", i + 1));
            h = b.tape.silu(h);
        }
        b.linear(h, "out")
    }

    fn build_unet(
        &self,
        b: &mut Builder<'_>,
        x_t: NodeId,
        enc: NodeId,
        temb: NodeId,
        semb: Option<NodeId>,
    ) -> NodeId {
        let widths = &self.cfg.channels[1..];
        let levels = widths.len();

        // Data encoding pooled once per depth.
        let mut enc_pool = vec![enc];
        for d in 1..levels {
            let prev = enc_pool[d - 1];
            enc_pool.push(b.tape.avg_pool2(prev));
        }

        let resblock = |b: &mut Builder<'_>, x: NodeId, depth: usize, site: &str| {
            let mut h = b.conv(x, &format!("{site}.conv1"));
            let t_bias = b.linear(temb, &format!("{site}.t_proj"));
            h = b.tape.add_channel_bias(h, t_bias);
            if let Some(s) = semb {
                let s_bias = b.linear(s, &format!("{site}.s_proj"));
                h = b.tape.add_channel_bias(h, s_bias);
            }
            let d_map = b.conv(enc_pool[depth], &format!("{site}.d_proj"));
            h = b.tape.add(h, d_map);
            h = b.tape.silu(h);
            h = b.conv(h, &format!("{site}.conv2"));
            b.tape.add(x, h)
        };

        let mut x = b.conv(x_t, "stem");
        let mut skips = Vec::new();
        for i in 0..levels - 1 {
            x = resblock(b, x, i, &format!("down{i}"));
            skips.push(x);
            let pooled = b.tape.avg_pool2(x);
            x = b.conv(pooled, &format!("shrink{i}"));
        }
        x = resblock(b, x, levels - 1, "mid");
        for i in (0..levels - 1).rev() {
            let up = b.tape.upsample_nearest2(x);
            x = b.conv(up, &format!("grow{i}"));
            let skip = skips.pop().expect("skip stack underflow");
            let cat = b.tape.concat(vec![x, skip]);
            x = b.conv(cat, &format!("fuse{i}"));
            x = resblock(b, x, i, &format!("up{i}"));
        }
        b.conv(x, "head")
    }

    /// Plain forward pass on a pre-encoded data embedding. Used at
    /// inference, where the embedding of the fixed observation is
    /// computed once and reused across ensemble members and steps.
    pub fn forward(
        &self,
        params: &ParameterSet,
        x_t: &Tensor,
        data_emb: &Tensor,
        t: f64,
        sigma: Option<f64>,
    ) -> Result<Tensor> {
        let rec = self.build(params, x_t, DataInput::Encoded(data_emb), t, sigma)?;
        Ok(rec.output().clone())
    }

    /// Forward pass straight from `A^T b` (encoder included), recorded
    /// for backpropagation through both the estimator and the encoder.
    pub fn forward_recorded(
        &self,
        params: &ParameterSet,
        x_t: &Tensor,
        atb: &Tensor,
        t: f64,
        sigma: Option<f64>,
    ) -> Result<Recording> {
        self.build(params, x_t, DataInput::Raw(atb), t, sigma)
    }
}
