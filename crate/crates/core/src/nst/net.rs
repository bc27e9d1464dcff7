use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{channel_stats, content_loss, statistic_match, style_loss, total_loss, tv_loss, ChannelStats, NstWeights, MATCH_EPSILON};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::optim::{adam_step_filtered, AdamState};
use crate::params::{BoundParams, NetworkParams};
use crate::tensor::{Graph, Tensor, Var};

/// One convolution block: kernel, stride, output channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
}

impl ConvSpec {
    pub const fn new(kernel: usize, stride: usize, channels: usize) -> Self {
        Self { kernel, stride, channels }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NstConfig {
    /// 1 for grayscale, 3 for colour.
    pub in_channels: usize,
    /// Convolution blocks shared by the style and content encoder plans.
    pub encoder_blocks: Vec<ConvSpec>,
    pub style_res_blocks: usize,
    pub content_res_blocks: usize,
    pub decoder_res_blocks: usize,
    pub res_kernel: usize,
    pub slope: f64,
    /// Output channels of the four loss-extractor stages.
    pub extractor_channels: [usize; 4],
    pub extractor_seed: u64,
    pub weights: NstWeights,
}

impl Default for NstConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            encoder_blocks: vec![ConvSpec::new(9, 1, 8), ConvSpec::new(3, 2, 16), ConvSpec::new(3, 2, 32)],
            style_res_blocks: 1,
            content_res_blocks: 4,
            decoder_res_blocks: 4,
            res_kernel: 3,
            slope: 0.2,
            extractor_channels: [8, 16, 32, 32],
            extractor_seed: 0x5eed,
            weights: NstWeights::default(),
        }
    }
}

impl NstConfig {
    /// Default architecture for `in_channels`-channel images.
    pub fn new(in_channels: usize) -> Self {
        Self {
            in_channels,
            ..Self::default()
        }
    }

    /// Channel count of the feature map where statistics are matched.
    pub fn mix_channels(&self) -> usize {
        self.encoder_blocks.last().map_or(0, |b| b.channels)
    }

    /// Width of the style head; the first half is the mean, the second the
    /// standard deviation.
    pub fn fc_width(&self) -> usize {
        2 * self.mix_channels()
    }

    /// Product of the encoder strides.
    pub fn downsampling(&self) -> usize {
        self.encoder_blocks.iter().map(|b| b.stride).product()
    }

    fn validate(&self) -> Result<()> {
        if self.encoder_blocks.is_empty() || self.in_channels == 0 {
            return Err(Error::InvalidArgument("NST config needs input channels and encoder blocks".into()));
        }
        if self.encoder_blocks.iter().any(|b| b.kernel % 2 == 0 || b.stride == 0 || b.channels == 0) {
            return Err(Error::InvalidArgument("NST blocks need odd kernels and positive strides".into()));
        }
        if self.res_kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument("residual kernel must be odd".into()));
        }
        Ok(())
    }
}

/// He-normal standard deviation for a conv kernel.
fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

fn add_conv(p: &mut NetworkParams, name: &str, cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    p.insert_layer(name, &[cout, cin, k, k], cout, he_std(cin * k * k), rng)
}

fn conv(g: &mut Graph, b: &BoundParams, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = b.var(&format!("{name}.w"))?;
    let bias = b.var(&format!("{name}.b"))?;
    let k = g.shape(w)[2];
    g.conv2d(x, w, bias, stride, k / 2)
}

/// Style encoder, content encoder and decoder of the feed-forward transfer
/// network. Every layer is unnormalized.
#[derive(Clone, Debug)]
pub struct NstNet {
    pub config: NstConfig,
    pub params: NetworkParams,
}

impl NstNet {
    pub fn new(config: NstConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = NetworkParams::new();
        let rk = config.res_kernel;
        for enc in ["style_enc", "content_enc"] {
            let mut cin = config.in_channels;
            for (i, blk) in config.encoder_blocks.iter().enumerate() {
                add_conv(&mut p, &format!("{enc}.{i}"), cin, blk.channels, blk.kernel, &mut rng)?;
                cin = blk.channels;
            }
            let n_res = if enc == "style_enc" { config.style_res_blocks } else { config.content_res_blocks };
            for j in 0..n_res {
                add_conv(&mut p, &format!("{enc}.res{j}.a"), cin, cin, rk, &mut rng)?;
                add_conv(&mut p, &format!("{enc}.res{j}.b"), cin, cin, rk, &mut rng)?;
            }
        }
        let c = config.mix_channels();
        p.insert_layer("style_enc.fc", &[config.fc_width(), c], config.fc_width(), he_std(c), &mut rng)?;
        for j in 0..config.decoder_res_blocks {
            add_conv(&mut p, &format!("decoder.res{j}.a"), c, c, rk, &mut rng)?;
            add_conv(&mut p, &format!("decoder.res{j}.b"), c, c, rk, &mut rng)?;
        }
        let blocks = &config.encoder_blocks;
        for i in (1..blocks.len()).rev() {
            add_conv(&mut p, &format!("decoder.up{i}"), blocks[i].channels, blocks[i - 1].channels, blocks[i].kernel, &mut rng)?;
        }
        add_conv(&mut p, "decoder.out", blocks[0].channels, config.in_channels, blocks[0].kernel, &mut rng)?;
        Ok(Self { config, params: p })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.config.in_channels {
            return Err(Error::shape("nst", format!("expected {} channels, got {c}", self.config.in_channels)));
        }
        if h < self.config.downsampling() || w < self.config.downsampling() {
            return Err(Error::shape(
                "nst",
                format!("{h}×{w} input is smaller than the encoder downsampling {}", self.config.downsampling()),
            ));
        }
        Ok(())
    }

    fn encoder_trunk(&self, g: &mut Graph, b: &BoundParams, enc: &str, x: Var, n_res: usize) -> Result<Var> {
        let slope = self.config.slope;
        let mut h = x;
        for (i, blk) in self.config.encoder_blocks.iter().enumerate() {
            let y = conv(g, b, &format!("{enc}.{i}"), h, blk.stride)?;
            h = g.leaky_relu(y, slope);
        }
        for j in 0..n_res {
            let y = conv(g, b, &format!("{enc}.res{j}.a"), h, 1)?;
            let y = g.leaky_relu(y, slope);
            let y = conv(g, b, &format!("{enc}.res{j}.b"), y, 1)?;
            let y = g.leaky_relu(y, slope);
            h = g.add(h, y)?;
        }
        Ok(h)
    }

    /// Content feature map at the mixing layer.
    pub fn encode_content(&self, g: &mut Graph, b: &BoundParams, x: Var) -> Result<Var> {
        self.encoder_trunk(g, b, "content_enc", x, self.config.content_res_blocks)
    }

    /// Emitted `(mean, std)` statistic vectors, each `[B, mix_channels]`.
    /// The std half goes through softplus so it stays positive.
    pub fn encode_style(&self, g: &mut Graph, b: &BoundParams, x: Var) -> Result<(Var, Var)> {
        let h = self.encoder_trunk(g, b, "style_enc", x, self.config.style_res_blocks)?;
        let pooled = g.global_avg_pool(h)?;
        let batch = g.shape(pooled)[0];
        let flat = g.reshape(pooled, &[batch, self.config.mix_channels()])?;
        let head = g.fully_connected(flat, b.var("style_enc.fc.w")?, b.var("style_enc.fc.b")?)?;
        let c = self.config.mix_channels();
        let mean = g.narrow(head, 0, c)?;
        let raw = g.narrow(head, c, c)?;
        let std = g.softplus(raw);
        Ok((mean, std))
    }

    /// Image from matched features, cropped to `height × width`.
    pub fn decode(&self, g: &mut Graph, b: &BoundParams, f: Var, height: usize, width: usize) -> Result<Var> {
        let mut h = f;
        for j in 0..self.config.decoder_res_blocks {
            let y = conv(g, b, &format!("decoder.res{j}.a"), h, 1)?;
            let y = g.relu(y);
            let y = conv(g, b, &format!("decoder.res{j}.b"), y, 1)?;
            let y = g.relu(y);
            h = g.add(h, y)?;
        }
        let blocks = &self.config.encoder_blocks;
        for i in (1..blocks.len()).rev() {
            if blocks[i].stride > 1 {
                h = g.upsample_nearest(h, blocks[i].stride)?;
            }
            let y = conv(g, b, &format!("decoder.up{i}"), h, 1)?;
            h = g.relu(y);
        }
        let out = conv(g, b, "decoder.out", h, 1)?;
        g.crop(out, height, width)
    }

    /// Content features as a plain tensor.
    pub fn content_features(&self, content: &Tensor) -> Result<Tensor> {
        self.check_input(content)?;
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let x = g.constant(content.clone());
        let f = self.encode_content(&mut g, &b, x)?;
        Ok(g.value(f).clone())
    }

    /// Statistics emitted by the style encoder.
    pub fn style_stats(&self, style: &Tensor) -> Result<ChannelStats> {
        self.check_input(style)?;
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let x = g.constant(style.clone());
        let (m, s) = self.encode_style(&mut g, &b, x)?;
        let (batch, c) = (g.shape(m)[0], g.shape(m)[1]);
        ChannelStats::new(batch, c, g.value(m).data().to_vec(), g.value(s).data().to_vec())
    }

    /// Decodes an already matched feature map.
    pub fn decode_features(&self, f: &Tensor, height: usize, width: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let fv = g.constant(f.clone());
        let out = self.decode(&mut g, &b, fv, height, width)?;
        Ok(g.value(out).clone())
    }

    /// Stylizes `content` with statistics blended between its own (`alpha
    /// = 0`) and those the style encoder emits for `style` (`alpha = 1`).
    pub fn tradeoff(&self, style: &Tensor, content: &Tensor, alpha: f64) -> Result<Tensor> {
        let f = self.content_features(content)?;
        let own = channel_stats(&f, 0.0)?;
        let sty = self.style_stats(style)?;
        let mixed = super::tradeoff_mix(&f, &own, &sty, alpha)?;
        let (_, _, h, w) = content.dims4()?;
        self.decode_features(&mixed, h, w)
    }

    /// Stylizes `content` with statistics blended between two styles.
    pub fn interpolate(&self, style1: &Tensor, style2: &Tensor, content: &Tensor, alpha: f64) -> Result<Tensor> {
        let f = self.content_features(content)?;
        let s1 = self.style_stats(style1)?;
        let s2 = self.style_stats(style2)?;
        let mixed = super::style_interpolate(&f, &s1, &s2, alpha)?;
        let (_, _, h, w) = content.dims4()?;
        self.decode_features(&mixed, h, w)
    }

    /// Parameters plus the input channel count. The rest of the
    /// architecture is the default one.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        if self.config != NstConfig::new(self.config.in_channels) {
            return Err(Error::InvalidArgument("only default architectures can be checkpointed".into()));
        }
        let mut ck = Checkpoint::new();
        ck.insert("meta.nst", Tensor::new(vec![1], vec![self.config.in_channels as f64])?)?;
        for (name, t) in self.params.iter() {
            ck.insert(format!("param.{name}"), t.clone())?;
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let c = ck.get("meta.nst")?.data()[0];
        if !(c >= 1.0 && c.fract() == 0.0) {
            return Err(Error::Data(format!("meta.nst holds invalid channel count {c}")));
        }
        let mut net = Self::new(NstConfig::new(c as usize), 0)?;
        let stored = ck.with_prefix("param.").count();
        if stored != net.params.len() {
            return Err(Error::Data(format!("checkpoint holds {stored} parameters, expected {}", net.params.len())));
        }
        for (name, p) in net.params.iter_mut() {
            let t = ck.get(&format!("param.{name}"))?;
            if t.shape() != p.shape() {
                return Err(Error::Data(format!("`{name}` has shape {:?}, expected {:?}", t.shape(), p.shape())));
            }
            p.data_mut().copy_from_slice(t.data());
        }
        Ok(net)
    }
}

/// Content-encode, match to the style encoder's statistics, decode.
pub fn nst_forward(style: &Tensor, content: &Tensor, net: &NstNet) -> Result<Tensor> {
    net.tradeoff(style, content, 1.0)
}

/// Content features re-normalized to `stats`, the mixing step in isolation.
pub fn nst_mix_with_stats(net: &NstNet, content: &Tensor, stats: &ChannelStats) -> Result<Tensor> {
    let f = net.content_features(content)?;
    statistic_match(&f, stats, MATCH_EPSILON)
}

/// Fixed four-stage convolutional feature extractor for the perceptual
/// objective. Stage outputs (after ReLU) are the style taps, the last stage
/// is also the content tap.
#[derive(Clone, Debug)]
pub struct LossExtractor {
    params: NetworkParams,
    strides: [usize; 4],
}

impl LossExtractor {
    pub fn random(in_channels: usize, channels: [usize; 4], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = NetworkParams::new();
        let mut cin = in_channels;
        for (i, c) in channels.iter().enumerate() {
            add_conv(&mut p, &format!("extractor.{i}"), cin, *c, 3, &mut rng)?;
            cin = *c;
        }
        Ok(Self {
            params: p,
            strides: [1, 2, 2, 2],
        })
    }

    pub fn for_config(config: &NstConfig) -> Result<Self> {
        Self::random(config.in_channels, config.extractor_channels, config.extractor_seed)
    }

    /// Replaces weights with any `extractor.*` tensors found in `source`,
    /// e.g. a checkpoint holding pretrained weights.
    pub fn load_from(&mut self, source: &NetworkParams) -> Result<usize> {
        let mut n = 0;
        for (name, t) in source.iter().filter(|(n, _)| n.starts_with("extractor.")) {
            let slot = self.params.get_mut(name)?;
            if slot.shape() != t.shape() {
                return Err(Error::shape(
                    "extractor",
                    format!("`{name}` has shape {:?}, expected {:?}", t.shape(), slot.shape()),
                ));
            }
            slot.data_mut().copy_from_slice(t.data());
            n += 1;
        }
        Ok(n)
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    /// The four stage outputs, shallowest first.
    pub fn features(&self, g: &mut Graph, b: &BoundParams, x: Var) -> Result<Vec<Var>> {
        let mut taps = Vec::with_capacity(4);
        let mut h = x;
        for (i, s) in self.strides.iter().enumerate() {
            let y = conv(g, b, &format!("extractor.{i}"), h, *s)?;
            h = g.relu(y);
            taps.push(h);
        }
        Ok(taps)
    }

    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        self.params.bind(g, false)
    }
}

/// Per-step objective values from [`fit_decoder`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitLog {
    pub total: Vec<f64>,
    pub content: Vec<f64>,
    pub style: Vec<f64>,
    pub tv: Vec<f64>,
}

/// Trains only the decoder on `(style, content)` pairs stacked into one
/// batch, with the full content/style/TV objective measured by `extractor`.
pub fn fit_decoder(
    net: &mut NstNet,
    extractor: &LossExtractor,
    pairs: &[(Tensor, Tensor)],
    steps: usize,
    lr: f64,
) -> Result<FitLog> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("fit_decoder needs at least one pair".into()));
    }
    let styles: Vec<Tensor> = pairs.iter().map(|p| p.0.clone()).collect();
    let contents: Vec<Tensor> = pairs.iter().map(|p| p.1.clone()).collect();
    let style = Tensor::stack_batch(&styles)?;
    let content = Tensor::stack_batch(&contents)?;
    net.check_input(&style)?;
    net.check_input(&content)?;
    let (_, _, h, w) = content.dims4()?;
    // Encoders are frozen, so the matched features are fixed.
    let f = net.content_features(&content)?;
    let stats = net.style_stats(&style)?;
    let matched = statistic_match(&f, &stats, MATCH_EPSILON)?;

    let mut adam = AdamState::new(lr);
    let mut log = FitLog::default();
    let weights = net.config.weights;
    for _ in 0..=steps {
        let mut g = Graph::new();
        let b = net.params.bind(&mut g, true);
        let eb = extractor.bind(&mut g);
        let fv = g.constant(matched.clone());
        let out = net.decode(&mut g, &b, fv, h, w)?;
        let sv = g.constant(style.clone());
        let cv = g.constant(content.clone());
        let gen_taps = extractor.features(&mut g, &eb, out)?;
        let sty_taps = extractor.features(&mut g, &eb, sv)?;
        let con_taps = extractor.features(&mut g, &eb, cv)?;
        let lc = content_loss(&mut g, gen_taps[3], con_taps[3])?;
        let ls = style_loss(&mut g, &gen_taps, &sty_taps)?;
        let ltv = tv_loss(&mut g, out)?;
        let total = total_loss(&mut g, lc, ls, ltv, &weights)?;
        let value = g.value(total).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step: log.total.len() as u64,
                loss: value,
                targets: Vec::new(),
            });
        }
        log.total.push(value);
        log.content.push(g.value(lc).data()[0]);
        log.style.push(g.value(ls).data()[0]);
        log.tv.push(g.value(ltv).data()[0]);
        if log.total.len() > steps {
            break;
        }
        let mut grads = g.backward(total)?;
        b.write_grads(&mut grads, &mut net.params)?;
        adam_step_filtered(&mut net.params, &mut adam, |n| n.starts_with("decoder."))?;
        for (_, p) in net.params.iter_mut() {
            p.take_grad();
        }
    }
    Ok(log)
}
