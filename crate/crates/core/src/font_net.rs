//! Typeface transfer network: style and content encoders over reference
//! sets, a bilinear mixer, and a skip-connected deconvolution decoder.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{BoundParams, NetworkParams};
use crate::tensor::{BnMode, Graph, RunningStats, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const INIT_STD: f64 = 0.02;

const ENCODERS: [&str; 2] = ["style_enc", "content_enc"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FontNetConfig {
    pub image_size: usize,
    /// Images per reference set.
    pub r: usize,
    pub base_channels: usize,
    /// Concatenate encoder activations into the decoder. When false the
    /// decoder sees zero tensors of the same shape instead.
    pub skips: bool,
}

impl Default for FontNetConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            r: 4,
            base_channels: 16,
            skips: true,
        }
    }
}

impl FontNetConfig {
    pub fn new(image_size: usize, r: usize, base_channels: usize) -> Result<Self> {
        let c = Self {
            image_size,
            r,
            base_channels,
            skips: true,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 || self.r == 0 || self.base_channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "need image_size ≥ 16, r ≥ 1 and base_channels ≥ 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Encoder layer count: one stride-1 layer, then stride-2 halvings
    /// (rounding up) until the map is 1×1.
    pub fn depth(&self) -> usize {
        let mut n = 1;
        let mut s = self.image_size;
        while s > 1 {
            s = s.div_ceil(2);
            n += 1;
        }
        n
    }

    /// Spatial extent after each encoder layer.
    pub fn encoder_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.image_size];
        while *sizes.last().expect("non-empty") > 1 {
            let s = sizes.last().expect("non-empty").div_ceil(2);
            sizes.push(s);
        }
        sizes
    }

    /// Output channels of each encoder layer: 1, 2, 4, then 8 times C.
    pub fn encoder_channels(&self) -> Vec<usize> {
        (0..self.depth()).map(|i| self.base_channels * [1, 2, 4, 8][i.min(3)]).collect()
    }

    /// Width of both codes and of the mixer output.
    pub fn code_width(&self) -> usize {
        *self.encoder_channels().last().expect("depth ≥ 1")
    }

    /// Output channels of the up-sampling blocks, deepest first.
    pub fn decoder_channels(&self) -> Vec<usize> {
        let enc = self.encoder_channels();
        (0..self.depth() - 1).map(|i| enc[self.depth() - 2 - i]).collect()
    }
}

/// Running statistics of every batch-norm layer, keyed by layer name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BnBuffers {
    pub layers: BTreeMap<String, RunningStats>,
}

impl BnBuffers {
    fn get_mut(&mut self, name: &str) -> Result<&mut RunningStats> {
        self.layers
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no running statistics for `{name}`")))
    }
}

/// Content-encoder activations handed to the decoder, shallowest first.
#[derive(Clone, Debug)]
pub struct SkipStack {
    pub maps: Vec<Var>,
}

impl SkipStack {
    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct FontNet {
    pub config: FontNetConfig,
    pub params: NetworkParams,
    pub buffers: BnBuffers,
}

impl FontNet {
    /// Kernels and the mixer tensor from `N(0, 0.02)`, BN scale 1 and
    /// shift 0, zero biases.
    pub fn new(config: FontNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = NetworkParams::new();
        let mut buffers = BnBuffers::default();
        let enc = config.encoder_channels();
        let depth = config.depth();
        let mut add_bn = |p: &mut NetworkParams, name: String, c: usize| -> Result<()> {
            p.insert(format!("{name}.gamma"), Tensor::full(&[c], 1.0))?;
            p.insert(format!("{name}.beta"), Tensor::zeros(&[c]))?;
            buffers.layers.insert(name, RunningStats::new(c));
            Ok(())
        };
        for e in ENCODERS {
            let mut cin = config.r;
            for (i, &c) in enc.iter().enumerate() {
                let k = if i == 0 { 5 } else { 3 };
                p.insert_layer(&format!("{e}.{i}.conv"), &[c, cin, k, k], c, INIT_STD, &mut rng)?;
                if i + 1 < depth {
                    add_bn(&mut p, format!("{e}.{i}.bn"), c)?;
                }
                cin = c;
            }
        }
        let w = config.code_width();
        p.insert("mixer.w", Tensor::randn(&[w, w, w], INIT_STD, &mut rng))?;
        let mut cin = w;
        for (i, &c) in config.decoder_channels().iter().enumerate() {
            p.insert_layer(&format!("decoder.{i}.deconv"), &[cin, c, 3, 3], c, INIT_STD, &mut rng)?;
            add_bn(&mut p, format!("decoder.{i}.bn"), c)?;
            // the next block also receives the symmetric skip
            cin = 2 * c;
        }
        p.insert_layer("decoder.out", &[cin, 1, 5, 5], 1, INIT_STD, &mut rng)?;
        Ok(Self {
            config,
            params: p,
            buffers,
        })
    }

    fn check_refs(&self, refs: &[usize]) -> Result<()> {
        let s = self.config.image_size;
        match refs {
            [_, r, h, w] if *r == self.config.r && *h == s && *w == s => Ok(()),
            other => Err(Error::shape(
                "reference set",
                format!("expected [B, {}, {s}, {s}] (r = {}, size = {s}), got {other:?}", self.config.r, self.config.r),
            )),
        }
    }

    fn bn(
        &self,
        g: &mut Graph,
        b: &BoundParams,
        name: &str,
        x: Var,
        mode: BnMode,
        buffers: &mut BnBuffers,
    ) -> Result<Var> {
        let gamma = b.var(&format!("{name}.gamma"))?;
        let beta = b.var(&format!("{name}.beta"))?;
        g.batchnorm2d(x, gamma, beta, mode, buffers.get_mut(name)?, BN_MOMENTUM, BN_EPSILON)
    }

    /// Runs one encoder; returns every layer's activation, shallowest first.
    fn encode(
        &self,
        g: &mut Graph,
        b: &BoundParams,
        which: &str,
        refs: Var,
        mode: BnMode,
        buffers: &mut BnBuffers,
    ) -> Result<Vec<Var>> {
        self.check_refs(g.shape(refs))?;
        let depth = self.config.depth();
        let mut acts = Vec::with_capacity(depth);
        let mut h = refs;
        for i in 0..depth {
            let (stride, pad) = if i == 0 { (1, 2) } else { (2, 1) };
            let w = b.var(&format!("{which}.{i}.conv.w"))?;
            let bias = b.var(&format!("{which}.{i}.conv.b"))?;
            let mut y = g.conv2d(h, w, bias, stride, pad)?;
            // The 1×1 bottleneck skips batch norm: normalizing a single
            // position per sample would erase the code.
            if i + 1 < depth {
                y = self.bn(g, b, &format!("{which}.{i}.bn"), y, mode, buffers)?;
            }
            h = g.leaky_relu(y, LEAKY_SLOPE);
            acts.push(h);
        }
        Ok(acts)
    }

    fn flatten_code(&self, g: &mut Graph, v: Var) -> Result<Var> {
        let batch = g.shape(v)[0];
        g.reshape(v, &[batch, self.config.code_width()])
    }

    /// Style code `[B, 8C]` of a `[B, r, size, size]` reference stack.
    pub fn style_encode(&self, g: &mut Graph, b: &BoundParams, refs: Var, mode: BnMode, buffers: &mut BnBuffers) -> Result<Var> {
        let acts = self.encode(g, b, "style_enc", refs, mode, buffers)?;
        self.flatten_code(g, *acts.last().expect("depth ≥ 1"))
    }

    /// Content code `[B, 8C]` and the skip activations.
    pub fn content_encode(
        &self,
        g: &mut Graph,
        b: &BoundParams,
        refs: Var,
        mode: BnMode,
        buffers: &mut BnBuffers,
    ) -> Result<(Var, SkipStack)> {
        let mut acts = self.encode(g, b, "content_enc", refs, mode, buffers)?;
        let code = acts.pop().expect("depth ≥ 1");
        Ok((self.flatten_code(g, code)?, SkipStack { maps: acts }))
    }

    /// `F[b,k] = Σ S[b,r] W[r,k,c] C[b,c]`.
    pub fn mix(&self, g: &mut Graph, b: &BoundParams, style_code: Var, content_code: Var) -> Result<Var> {
        g.bilinear_contract(style_code, b.var("mixer.w")?, content_code)
    }

    /// Sigmoid image `[B, 1, size, size]` from the mixed code.
    pub fn decode(
        &self,
        g: &mut Graph,
        b: &BoundParams,
        mixed: Var,
        skips: &SkipStack,
        mode: BnMode,
        buffers: &mut BnBuffers,
    ) -> Result<Var> {
        let depth = self.config.depth();
        if skips.len() != depth - 1 {
            return Err(Error::shape("decode", format!("{} skips, expected {}", skips.len(), depth - 1)));
        }
        let sizes = self.config.encoder_sizes();
        let batch = g.shape(mixed)[0];
        let mut h = g.reshape(mixed, &[batch, self.config.code_width(), 1, 1])?;
        for i in 0..depth - 1 {
            if i > 0 {
                h = self.attach_skip(g, h, skips.maps[depth - 1 - i])?;
            }
            let target = sizes[depth - 2 - i];
            let in_size = g.shape(h)[2];
            let output_padding = target + 1 - 2 * in_size;
            let w = b.var(&format!("decoder.{i}.deconv.w"))?;
            let bias = b.var(&format!("decoder.{i}.deconv.b"))?;
            let y = g.deconv2d(h, w, bias, 2, 1, output_padding)?;
            let y = self.bn(g, b, &format!("decoder.{i}.bn"), y, mode, buffers)?;
            h = g.relu(y);
        }
        h = self.attach_skip(g, h, skips.maps[0])?;
        let y = g.deconv2d(h, b.var("decoder.out.w")?, b.var("decoder.out.b")?, 1, 2, 0)?;
        Ok(g.sigmoid(y))
    }

    fn attach_skip(&self, g: &mut Graph, h: Var, skip: Var) -> Result<Var> {
        if g.shape(h)[2..] != g.shape(skip)[2..] {
            return Err(Error::shape(
                "decode",
                format!("skip {:?} does not match decoder map {:?}", g.shape(skip), g.shape(h)),
            ));
        }
        let skip = if self.config.skips {
            skip
        } else {
            g.constant(Tensor::zeros(g.shape(skip)))
        };
        g.concat_channels(h, skip)
    }

    /// Full pipeline on the tape.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &BoundParams,
        style_refs: Var,
        content_refs: Var,
        mode: BnMode,
        buffers: &mut BnBuffers,
    ) -> Result<Var> {
        if g.shape(style_refs)[0] != g.shape(content_refs)[0] {
            return Err(Error::shape(
                "forward",
                format!("style batch {:?} vs content batch {:?}", g.shape(style_refs), g.shape(content_refs)),
            ));
        }
        let s = self.style_encode(g, b, style_refs, mode, buffers)?;
        let (c, skips) = self.content_encode(g, b, content_refs, mode, buffers)?;
        let m = self.mix(g, b, s, c)?;
        self.decode(g, b, m, &skips, mode, buffers)
    }

    /// Inference with running batch-norm statistics; no state changes.
    pub fn generate(&self, style_refs: &Tensor, content_refs: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let s = g.constant(style_refs.clone());
        let c = g.constant(content_refs.clone());
        let mut buffers = self.buffers.clone();
        let out = self.forward(&mut g, &b, s, c, BnMode::Eval, &mut buffers)?;
        Ok(g.value(out).clone())
    }
}
