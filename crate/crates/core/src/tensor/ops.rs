//! Differentiable operations. Each constructor validates shapes, computes
//! the forward value and records an [`Op`]; [`backward_op`] holds the matching
//! adjoint.

use super::conv::{col2im, gemm, im2col, ConvGeom};
use super::graph::{accumulate, Node};
use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Batch-norm behaviour: normalize by batch statistics (and update the
/// running estimate) or by the running estimate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Exponential moving averages of per-channel mean and (unbiased) variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

pub(super) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Softplus(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    Deconv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mode: BnMode,
    },
    ConcatChannels(Var, Var),
    Narrow {
        input: Var,
        start: usize,
    },
    UpsampleNearest(Var, usize),
    GlobalAvgPool(Var),
    Crop(Var),
    FullyConnected {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Bilinear {
        style: Var,
        w: Var,
        content: Var,
    },
    InstanceNorm {
        input: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ChannelAffine {
        input: Var,
        scale: Var,
        shift: Var,
    },
    ChannelMean(Var),
    ChannelStd(Var),
    WeightedL1 {
        generated: Var,
        target: Vec<f64>,
        weights: Vec<f64>,
    },
    TotalVariation(Var),
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn dims4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    t.dims4().map_err(|_| {
        Error::shape(op, format!("expected B×C×H×W, got {:?}", t.shape()))
    })
}

fn conv_geom(
    op: &'static str,
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<ConvGeom> {
    if stride == 0 {
        return Err(Error::shape(op, "stride must be positive"));
    }
    if kernel == 0 {
        return Err(Error::shape(op, "kernel extent must be positive"));
    }
    let out_h = ConvGeom::out_extent(height, kernel, stride, padding);
    let out_w = ConvGeom::out_extent(width, kernel, stride, padding);
    match (out_h, out_w) {
        (Some(out_h), Some(out_w)) => Ok(ConvGeom {
            channels,
            height,
            width,
            kernel,
            stride,
            padding,
            out_h,
            out_w,
        }),
        _ => Err(Error::shape(
            op,
            format!("padded input {height}×{width} (pad {padding}) smaller than kernel {kernel}"),
        )),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    fn elementwise(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect())
            .expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.elementwise("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.map(a, |x| x * factor);
        self.push(out, Op::Scale(a, factor), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x * x);
        self.push(out, Op::Square(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.sum() / t.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// `x` where `x ≥ 0`, `slope·x` elsewhere.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.map(a, |x| if x >= 0.0 { x } else { slope * x });
        self.push(out, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        self.push(out, Op::Softplus(a), &[a])
    }

    /// Cross-correlation of `input` (`B×Cin×H×W`) with `kernel`
    /// (`Cout×Cin×k×k`) plus a per-channel `bias`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (b, cin, h, w) = dims4("conv2d", self.value(input))?;
        let (cout, kcin, kh, kw) = dims4("conv2d", self.value(kernel))?;
        if kcin != cin || kh != kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {:?} incompatible with input {:?}", self.shape(kernel), self.shape(input)),
            ));
        }
        if self.shape(bias) != [cout] {
            return Err(Error::shape("conv2d", format!("bias {:?}, expected [{cout}]", self.shape(bias))));
        }
        let g = conv_geom("conv2d", cin, h, w, kh, stride, padding)?;
        let (rows, n_out) = (g.col_rows(), g.col_cols());
        let mut out = vec![0.0; b * cout * n_out];
        let mut cols = vec![0.0; rows * n_out];
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let bias_v = self.value(bias).data();
        for bi in 0..b {
            im2col(&x[bi * cin * h * w..(bi + 1) * cin * h * w], &g, &mut cols);
            let ob = &mut out[bi * cout * n_out..(bi + 1) * cout * n_out];
            for (co, plane) in ob.chunks_mut(n_out).enumerate() {
                plane.fill(bias_v[co]);
            }
            gemm(cout, rows, n_out, k, false, &cols, false, 1.0, ob);
        }
        let out = Tensor::new(vec![b, cout, g.out_h, g.out_w], out)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            &[input, kernel, bias],
        ))
    }

    /// Transposed convolution: the adjoint of [`Graph::conv2d`] with the
    /// same kernel, whose shape here reads `Cin×Cout×k×k`. Output extent is
    /// `(H−1)·stride − 2·padding + k + output_padding`.
    #[allow(clippy::too_many_arguments)]
    pub fn deconv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let (b, cin, h, w) = dims4("deconv2d", self.value(input))?;
        let (kcin, cout, kh, kw) = dims4("deconv2d", self.value(kernel))?;
        if kcin != cin || kh != kw {
            return Err(Error::shape(
                "deconv2d",
                format!("kernel {:?} incompatible with input {:?}", self.shape(kernel), self.shape(input)),
            ));
        }
        if self.shape(bias) != [cout] {
            return Err(Error::shape("deconv2d", format!("bias {:?}, expected [{cout}]", self.shape(bias))));
        }
        if stride == 0 {
            return Err(Error::shape("deconv2d", "stride must be positive"));
        }
        if output_padding >= stride {
            return Err(Error::shape(
                "deconv2d",
                format!("output_padding {output_padding} must be smaller than stride {stride}"),
            ));
        }
        let extent = |len: usize| -> Result<usize> {
            let e = (len as isize - 1) * stride as isize - 2 * padding as isize + kh as isize + output_padding as isize;
            if e < 1 {
                return Err(Error::shape("deconv2d", format!("output extent {e} from input {len}")));
            }
            Ok(e as usize)
        };
        let (oh, ow) = (extent(h)?, extent(w)?);
        let g = conv_geom("deconv2d", cout, oh, ow, kh, stride, padding)?;
        debug_assert_eq!((g.out_h, g.out_w), (h, w));
        let (rows, n_in) = (g.col_rows(), g.col_cols());
        let mut out = vec![0.0; b * cout * oh * ow];
        let mut cols = vec![0.0; rows * n_in];
        let y = self.value(input).data();
        let k = self.value(kernel).data();
        let bias_v = self.value(bias).data();
        for bi in 0..b {
            gemm(rows, cin, n_in, k, true, &y[bi * cin * n_in..(bi + 1) * cin * n_in], false, 0.0, &mut cols);
            let ob = &mut out[bi * cout * oh * ow..(bi + 1) * cout * oh * ow];
            col2im(&cols, &g, ob);
            for (co, plane) in ob.chunks_mut(oh * ow).enumerate() {
                plane.iter_mut().for_each(|v| *v += bias_v[co]);
            }
        }
        let out = Tensor::new(vec![b, cout, oh, ow], out)?;
        Ok(self.push(
            out,
            Op::Deconv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            },
            &[input, kernel, bias],
        ))
    }

    /// Per-channel batch normalization with learned `gamma`/`beta`.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        running: &mut RunningStats,
        momentum: f64,
        epsilon: f64,
    ) -> Result<Var> {
        if !(epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!("batchnorm epsilon must be > 0, got {epsilon}")));
        }
        let (b, c, h, w) = dims4("batchnorm2d", self.value(input))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || running.channels() != c {
            return Err(Error::shape(
                "batchnorm2d",
                format!(
                    "input has {c} channels, gamma {:?}, beta {:?}, running {}",
                    self.shape(gamma),
                    self.shape(beta),
                    running.channels()
                ),
            ));
        }
        let hw = h * w;
        let n = (b * hw) as f64;
        let x = self.value(input).data();
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; c];
        let mut out = vec![0.0; x.len()];
        for ch in 0..c {
            let (mean, var) = match mode {
                BnMode::Train => {
                    let mut s = 0.0;
                    for bi in 0..b {
                        s += x[(bi * c + ch) * hw..(bi * c + ch + 1) * hw].iter().sum::<f64>();
                    }
                    let mean = s / n;
                    let mut ss = 0.0;
                    for bi in 0..b {
                        ss += x[(bi * c + ch) * hw..(bi * c + ch + 1) * hw]
                            .iter()
                            .map(|v| (v - mean) * (v - mean))
                            .sum::<f64>();
                    }
                    let var = ss / n;
                    let unbiased = if n > 1.0 { ss / (n - 1.0) } else { var };
                    running.mean[ch] = (1.0 - momentum) * running.mean[ch] + momentum * mean;
                    running.var[ch] = (1.0 - momentum) * running.var[ch] + momentum * unbiased;
                    (mean, var)
                }
                BnMode::Eval => (running.mean[ch], running.var[ch]),
            };
            let is = 1.0 / (var + epsilon).sqrt();
            inv_std[ch] = is;
            for bi in 0..b {
                let range = (bi * c + ch) * hw..(bi * c + ch + 1) * hw;
                for i in range {
                    let xh = (x[i] - mean) * is;
                    xhat[i] = xh;
                    out[i] = gm[ch] * xh + bt[ch];
                }
            }
        }
        let out = Tensor::new(vec![b, c, h, w], out)?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            },
            &[input, gamma, beta],
        ))
    }

    /// Stacks `b`'s channels after `a`'s.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ca, ha, wa) = dims4("concat_channels", self.value(a))?;
        let (bb, cb, hb, wb) = dims4("concat_channels", self.value(b))?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let hw = ha * wa;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(xa.len() + xb.len());
        for bi in 0..ba {
            out.extend_from_slice(&xa[bi * ca * hw..(bi + 1) * ca * hw]);
            out.extend_from_slice(&xb[bi * cb * hw..(bi + 1) * cb * hw]);
        }
        let out = Tensor::new(vec![ba, ca + cb, ha, wa], out)?;
        Ok(self.push(out, Op::ConcatChannels(a, b), &[a, b]))
    }

    /// Slice `start..start+len` of axis 1.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 || start + len > shape[1] || len == 0 {
            return Err(Error::shape(
                "narrow",
                format!("cannot take {start}..{} of axis 1 in {shape:?}", start + len),
            ));
        }
        let inner: usize = shape[2..].iter().product();
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(shape[0] * len * inner);
        for o in 0..shape[0] {
            let base = (o * shape[1] + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut new_shape = shape.clone();
        new_shape[1] = len;
        let out = Tensor::new(new_shape, out)?;
        Ok(self.push(out, Op::Narrow { input: a, start }, &[a]))
    }

    /// Replicates every pixel into a `factor × factor` block.
    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::InvalidArgument("upsample factor must be ≥ 1".into()));
        }
        let (b, c, h, w) = dims4("upsample_nearest", self.value(a))?;
        let (oh, ow) = (h * factor, w * factor);
        let x = self.value(a).data();
        let mut out = vec![0.0; b * c * oh * ow];
        for p in 0..b * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[p * oh * ow + oy * ow + ox] = x[p * h * w + (oy / factor) * w + ox / factor];
                }
            }
        }
        let out = Tensor::new(vec![b, c, oh, ow], out)?;
        Ok(self.push(out, Op::UpsampleNearest(a, factor), &[a]))
    }

    /// Spatial mean per channel, `B×C×1×1`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let (b, c, h, w) = dims4("global_avg_pool", self.value(a))?;
        let hw = h * w;
        let x = self.value(a).data();
        let out = (0..b * c)
            .map(|p| x[p * hw..(p + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let out = Tensor::new(vec![b, c, 1, 1], out)?;
        Ok(self.push(out, Op::GlobalAvgPool(a), &[a]))
    }

    /// Keeps the top-left `height × width` window.
    pub fn crop(&mut self, a: Var, height: usize, width: usize) -> Result<Var> {
        let (b, c, h, w) = dims4("crop", self.value(a))?;
        if height > h || width > w || height == 0 || width == 0 {
            return Err(Error::shape("crop", format!("cannot crop {h}×{w} to {height}×{width}")));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(b * c * height * width);
        for p in 0..b * c {
            for y in 0..height {
                let row = p * h * w + y * w;
                out.extend_from_slice(&x[row..row + width]);
            }
        }
        let out = Tensor::new(vec![b, c, height, width], out)?;
        Ok(self.push(out, Op::Crop(a), &[a]))
    }

    /// `input · weightᵀ + bias` for `input: B×Cin`, `weight: Cout×Cin`.
    pub fn fully_connected(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (b, cin) = match self.shape(input) {
            [b, cin] => (*b, *cin),
            s => return Err(Error::shape("fully_connected", format!("input must be B×Cin, got {s:?}"))),
        };
        let cout = match self.shape(weight) {
            [cout, wc] if *wc == cin => *cout,
            s => return Err(Error::shape("fully_connected", format!("weight {s:?} incompatible with input width {cin}"))),
        };
        if self.shape(bias) != [cout] {
            return Err(Error::shape("fully_connected", format!("bias {:?}, expected [{cout}]", self.shape(bias))));
        }
        let bias_v = self.value(bias).data();
        let mut out: Vec<f64> = (0..b).flat_map(|_| bias_v.iter().copied()).collect();
        gemm(b, cin, cout, self.value(input).data(), false, self.value(weight).data(), true, 1.0, &mut out);
        let out = Tensor::new(vec![b, cout], out)?;
        Ok(self.push(out, Op::FullyConnected { input, weight, bias }, &[input, weight, bias]))
    }

    /// `out[b,k] = Σ_r Σ_c style[b,r] · w[r,k,c] · content[b,c]`.
    pub fn bilinear_contract(&mut self, style: Var, w: Var, content: Var) -> Result<Var> {
        let (b, r) = match self.shape(style) {
            [b, r] => (*b, *r),
            s => return Err(Error::shape("bilinear_contract", format!("style must be B×R, got {s:?}"))),
        };
        let (wr, k, wc) = match self.shape(w) {
            [wr, k, wc] => (*wr, *k, *wc),
            s => return Err(Error::shape("bilinear_contract", format!("mixer must be R×K×Bc, got {s:?}"))),
        };
        let bc = match self.shape(content) {
            [cb, bc] if *cb == b => *bc,
            s => return Err(Error::shape("bilinear_contract", format!("content {s:?} vs style batch {b}"))),
        };
        if wr != r || wc != bc {
            return Err(Error::shape(
                "bilinear_contract",
                format!("mixer {wr}×{k}×{wc} vs style width {r}, content width {bc}"),
            ));
        }
        let (s, wm, c) = (self.value(style).data(), self.value(w).data(), self.value(content).data());
        let tmp = mixer_times_content(wm, c, r * k, bc, b);
        let mut out = vec![0.0; b * k];
        for bi in 0..b {
            for ri in 0..r {
                let sr = s[bi * r + ri];
                for ki in 0..k {
                    out[bi * k + ki] += sr * tmp[(ri * k + ki) * b + bi];
                }
            }
        }
        let out = Tensor::new(vec![b, k], out)?;
        Ok(self.push(out, Op::Bilinear { style, w, content }, &[style, w, content]))
    }

    /// Normalizes every (batch, channel) plane to zero mean and unit
    /// standard deviation, with `epsilon` added to the variance.
    pub fn instance_norm(&mut self, a: Var, epsilon: f64) -> Result<Var> {
        let (b, c, h, w) = dims4("instance_norm", self.value(a))?;
        let hw = h * w;
        let x = self.value(a).data();
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; b * c];
        for p in 0..b * c {
            let plane = &x[p * hw..(p + 1) * hw];
            let mean = plane.iter().sum::<f64>() / hw as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            let is = 1.0 / (var + epsilon).sqrt();
            inv_std[p] = is;
            for (o, v) in xhat[p * hw..(p + 1) * hw].iter_mut().zip(plane) {
                *o = (v - mean) * is;
            }
        }
        if !inv_std.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(
                "instance_norm of a constant plane needs epsilon > 0".into(),
            ));
        }
        let out = Tensor::new(vec![b, c, h, w], xhat.clone())?;
        Ok(self.push(out, Op::InstanceNorm { input: a, xhat, inv_std }, &[a]))
    }

    /// `input[b,c,·,·] · scale[b,c] + shift[b,c]`.
    pub fn channel_affine(&mut self, input: Var, scale: Var, shift: Var) -> Result<Var> {
        let (b, c, h, w) = dims4("channel_affine", self.value(input))?;
        if self.shape(scale) != [b, c] || self.shape(shift) != [b, c] {
            return Err(Error::shape(
                "channel_affine",
                format!("scale {:?} / shift {:?} vs [{b}, {c}]", self.shape(scale), self.shape(shift)),
            ));
        }
        let hw = h * w;
        let (x, s, t) = (self.value(input).data(), self.value(scale).data(), self.value(shift).data());
        let mut out = vec![0.0; x.len()];
        for p in 0..b * c {
            for i in p * hw..(p + 1) * hw {
                out[i] = x[i] * s[p] + t[p];
            }
        }
        let out = Tensor::new(vec![b, c, h, w], out)?;
        Ok(self.push(out, Op::ChannelAffine { input, scale, shift }, &[input, scale, shift]))
    }

    /// Spatial mean of every (batch, channel) plane, `B×C`.
    pub fn channel_mean(&mut self, a: Var) -> Result<Var> {
        let (b, c, h, w) = dims4("channel_mean", self.value(a))?;
        let hw = h * w;
        let x = self.value(a).data();
        let out = (0..b * c).map(|p| x[p * hw..(p + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
        let out = Tensor::new(vec![b, c], out)?;
        Ok(self.push(out, Op::ChannelMean(a), &[a]))
    }

    /// Population standard deviation of every (batch, channel) plane, `B×C`.
    /// The derivative at a constant plane is taken as zero.
    pub fn channel_std(&mut self, a: Var) -> Result<Var> {
        let (b, c, h, w) = dims4("channel_std", self.value(a))?;
        let hw = h * w;
        let x = self.value(a).data();
        let out = (0..b * c)
            .map(|p| {
                let plane = &x[p * hw..(p + 1) * hw];
                let mean = plane.iter().sum::<f64>() / hw as f64;
                (plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64).sqrt()
            })
            .collect();
        let out = Tensor::new(vec![b, c], out)?;
        Ok(self.push(out, Op::ChannelStd(a), &[a]))
    }

    /// `Σ_b weights[b] · Σ_pixels |generated − target|`.
    pub fn weighted_l1(&mut self, generated: Var, target: &Tensor, weights: &[f64]) -> Result<Var> {
        let g = self.value(generated);
        same_shape("weighted_l1", g, target)?;
        let b = g.shape()[0];
        if weights.len() != b {
            return Err(Error::shape("weighted_l1", format!("{} weights for batch {b}", weights.len())));
        }
        let per = g.numel() / b;
        let mut total = 0.0;
        for (bi, wt) in weights.iter().enumerate() {
            let r = bi * per..(bi + 1) * per;
            let s: f64 = g.data()[r.clone()].iter().zip(&target.data()[r]).map(|(x, y)| (x - y).abs()).sum();
            total += wt * s;
        }
        let op = Op::WeightedL1 {
            generated,
            target: target.data().to_vec(),
            weights: weights.to_vec(),
        };
        Ok(self.push(Tensor::scalar(total), op, &[generated]))
    }

    /// Anisotropic squared total variation divided by the element count.
    pub fn total_variation(&mut self, a: Var) -> Result<Var> {
        let (b, c, h, w) = dims4("total_variation", self.value(a))?;
        let x = self.value(a).data();
        let mut s = 0.0;
        for p in 0..b * c {
            let plane = &x[p * h * w..(p + 1) * h * w];
            for y in 0..h {
                for xx in 0..w {
                    let v = plane[y * w + xx];
                    if y + 1 < h {
                        let d = plane[(y + 1) * w + xx] - v;
                        s += d * d;
                    }
                    if xx + 1 < w {
                        let d = plane[y * w + xx + 1] - v;
                        s += d * d;
                    }
                }
            }
        }
        let n = x.len() as f64;
        Ok(self.push(Tensor::scalar(s / n), Op::TotalVariation(a), &[a]))
    }
}

pub(super) fn backward_op(
    op: &Op,
    out: &Tensor,
    dout: &[f64],
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
) {
    let val = |v: Var| &nodes[v.0].value;
    let tracked = |v: Var| nodes[v.0].requires_grad;
    match *op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, a, |g| add_into(g, dout));
            accumulate(nodes, grads, b, |g| add_into(g, dout));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, a, |g| add_into(g, dout));
            accumulate(nodes, grads, b, |g| g.iter_mut().zip(dout).for_each(|(g, d)| *g -= d));
        }
        Op::Mul(a, b) => {
            let (xa, xb) = (val(a).data(), val(b).data());
            accumulate(nodes, grads, a, |g| {
                for i in 0..g.len() {
                    g[i] += dout[i] * xb[i];
                }
            });
            accumulate(nodes, grads, b, |g| {
                for i in 0..g.len() {
                    g[i] += dout[i] * xa[i];
                }
            });
        }
        Op::Scale(a, f) => accumulate(nodes, grads, a, |g| g.iter_mut().zip(dout).for_each(|(g, d)| *g += f * d)),
        Op::Square(a) => {
            let x = val(a).data();
            accumulate(nodes, grads, a, |g| {
                for i in 0..g.len() {
                    g[i] += 2.0 * x[i] * dout[i];
                }
            });
        }
        Op::Sum(a) => accumulate(nodes, grads, a, |g| g.iter_mut().for_each(|g| *g += dout[0])),
        Op::Mean(a) => {
            let n = val(a).numel() as f64;
            accumulate(nodes, grads, a, |g| g.iter_mut().for_each(|g| *g += dout[0] / n));
        }
        Op::Reshape(a) => accumulate(nodes, grads, a, |g| add_into(g, dout)),
        Op::LeakyRelu(a, slope) => {
            let x = val(a).data();
            accumulate(nodes, grads, a, |g| {
                for i in 0..g.len() {
                    g[i] += if x[i] >= 0.0 { dout[i] } else { slope * dout[i] };
                }
            });
        }
        Op::Sigmoid(a) => {
            let y = out.data();
            accumulate(nodes, grads, a, |g| {
                for i in 0..g.len() {
                    g[i] += dout[i] * y[i] * (1.0 - y[i]);
                }
            });
        }
        Op::Softplus(a) => {
            let x = val(a).data();
            accumulate(nodes, grads, a, |g| {
                for i in 0..g.len() {
                    g[i] += dout[i] * sigmoid(x[i]);
                }
            });
        }
        Op::Conv2d {
            input,
            kernel,
            bias,
            stride,
            padding,
        } => {
            let (b, cin, h, w) = val(input).dims4().expect("recorded shape");
            let (cout, _, k, _) = val(kernel).dims4().expect("recorded shape");
            let g = conv_geom("conv2d", cin, h, w, k, stride, padding).expect("recorded geometry");
            let (rows, n_out) = (g.col_rows(), g.col_cols());
            let x = val(input).data();
            let kd = val(kernel).data();
            let mut cols = vec![0.0; rows * n_out];
            let mut dk = vec![0.0; cout * rows];
            let mut dx = if tracked(input) { Some(vec![0.0; x.len()]) } else { None };
            for bi in 0..b {
                let dob = &dout[bi * cout * n_out..(bi + 1) * cout * n_out];
                if tracked(kernel) {
                    im2col(&x[bi * cin * h * w..(bi + 1) * cin * h * w], &g, &mut cols);
                    gemm(cout, n_out, rows, dob, false, &cols, true, 1.0, &mut dk);
                }
                if let Some(dx) = dx.as_mut() {
                    gemm(rows, cout, n_out, kd, true, dob, false, 0.0, &mut cols);
                    col2im(&cols, &g, &mut dx[bi * cin * h * w..(bi + 1) * cin * h * w]);
                }
            }
            if let Some(dx) = dx {
                accumulate(nodes, grads, input, |g| add_into(g, &dx));
            }
            accumulate(nodes, grads, kernel, |g| add_into(g, &dk));
            accumulate(nodes, grads, bias, |g| sum_planes(g, dout, b, cout, n_out));
        }
        Op::Deconv2d {
            input,
            kernel,
            bias,
            stride,
            padding,
        } => {
            let (b, cin, h, w) = val(input).dims4().expect("recorded shape");
            let (_, cout, k, _) = val(kernel).dims4().expect("recorded shape");
            let (_, _, oh, ow) = out.dims4().expect("recorded shape");
            let g = conv_geom("deconv2d", cout, oh, ow, k, stride, padding).expect("recorded geometry");
            let (rows, n_in) = (g.col_rows(), g.col_cols());
            debug_assert_eq!(n_in, h * w);
            let y = val(input).data();
            let kd = val(kernel).data();
            let mut cols = vec![0.0; rows * n_in];
            let mut dk = vec![0.0; cin * rows];
            let mut dy = vec![0.0; y.len()];
            for bi in 0..b {
                im2col(&dout[bi * cout * oh * ow..(bi + 1) * cout * oh * ow], &g, &mut cols);
                let yb = &y[bi * cin * n_in..(bi + 1) * cin * n_in];
                if tracked(kernel) {
                    gemm(cin, n_in, rows, yb, false, &cols, true, 1.0, &mut dk);
                }
                if tracked(input) {
                    gemm(cin, rows, n_in, kd, false, &cols, false, 0.0, &mut dy[bi * cin * n_in..(bi + 1) * cin * n_in]);
                }
            }
            accumulate(nodes, grads, input, |g| add_into(g, &dy));
            accumulate(nodes, grads, kernel, |g| add_into(g, &dk));
            accumulate(nodes, grads, bias, |g| sum_planes(g, dout, b, cout, oh * ow));
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            ref xhat,
            ref inv_std,
            mode,
        } => {
            let (b, c, h, w) = val(input).dims4().expect("recorded shape");
            let hw = h * w;
            let n = (b * hw) as f64;
            let gm = val(gamma).data();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let mut dx = vec![0.0; b * c * hw];
            for ch in 0..c {
                let (mut sd, mut sdx) = (0.0, 0.0);
                for bi in 0..b {
                    for i in (bi * c + ch) * hw..(bi * c + ch + 1) * hw {
                        sd += dout[i];
                        sdx += dout[i] * xhat[i];
                    }
                }
                dgamma[ch] = sdx;
                dbeta[ch] = sd;
                let scale = gm[ch] * inv_std[ch];
                for bi in 0..b {
                    for i in (bi * c + ch) * hw..(bi * c + ch + 1) * hw {
                        dx[i] = match mode {
                            BnMode::Train => scale * (dout[i] - sd / n - xhat[i] * sdx / n),
                            BnMode::Eval => scale * dout[i],
                        };
                    }
                }
            }
            accumulate(nodes, grads, input, |g| add_into(g, &dx));
            accumulate(nodes, grads, gamma, |g| add_into(g, &dgamma));
            accumulate(nodes, grads, beta, |g| add_into(g, &dbeta));
        }
        Op::ConcatChannels(a, b) => {
            let (bs, ca, h, w) = val(a).dims4().expect("recorded shape");
            let cb = val(b).shape()[1];
            let hw = h * w;
            accumulate(nodes, grads, a, |g| {
                for bi in 0..bs {
                    let src = &dout[bi * (ca + cb) * hw..(bi * (ca + cb) + ca) * hw];
                    add_into(&mut g[bi * ca * hw..(bi + 1) * ca * hw], src);
                }
            });
            accumulate(nodes, grads, b, |g| {
                for bi in 0..bs {
                    let src = &dout[(bi * (ca + cb) + ca) * hw..(bi + 1) * (ca + cb) * hw];
                    add_into(&mut g[bi * cb * hw..(bi + 1) * cb * hw], src);
                }
            });
        }
        Op::Narrow { input, start } => {
            let shape = val(input).shape();
            let len = out.shape()[1];
            let inner: usize = shape[2..].iter().product();
            let width = shape[1];
            accumulate(nodes, grads, input, |g| {
                for o in 0..shape[0] {
                    let base = (o * width + start) * inner;
                    add_into(&mut g[base..base + len * inner], &dout[o * len * inner..(o + 1) * len * inner]);
                }
            });
        }
        Op::UpsampleNearest(a, f) => {
            let (b, c, h, w) = val(a).dims4().expect("recorded shape");
            let (oh, ow) = (h * f, w * f);
            accumulate(nodes, grads, a, |g| {
                for p in 0..b * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            g[p * h * w + (oy / f) * w + ox / f] += dout[p * oh * ow + oy * ow + ox];
                        }
                    }
                }
            });
        }
        Op::GlobalAvgPool(a) | Op::ChannelMean(a) => {
            let (b, c, h, w) = val(a).dims4().expect("recorded shape");
            let hw = h * w;
            accumulate(nodes, grads, a, |g| {
                for p in 0..b * c {
                    let d = dout[p] / hw as f64;
                    g[p * hw..(p + 1) * hw].iter_mut().for_each(|v| *v += d);
                }
            });
        }
        Op::Crop(a) => {
            let (b, c, h, w) = val(a).dims4().expect("recorded shape");
            let (_, _, ch, cw) = out.dims4().expect("recorded shape");
            accumulate(nodes, grads, a, |g| {
                for p in 0..b * c {
                    for y in 0..ch {
                        let row = p * h * w + y * w;
                        add_into(&mut g[row..row + cw], &dout[(p * ch + y) * cw..(p * ch + y + 1) * cw]);
                    }
                }
            });
        }
        Op::FullyConnected { input, weight, bias } => {
            let (b, cin) = (val(input).shape()[0], val(input).shape()[1]);
            let cout = val(weight).shape()[0];
            let (x, wd) = (val(input).data(), val(weight).data());
            accumulate(nodes, grads, input, |g| gemm(b, cout, cin, dout, false, wd, false, 1.0, g));
            accumulate(nodes, grads, weight, |g| gemm(cout, b, cin, dout, true, x, false, 1.0, g));
            accumulate(nodes, grads, bias, |g| {
                for bi in 0..b {
                    add_into(g, &dout[bi * cout..(bi + 1) * cout]);
                }
            });
        }
        Op::Bilinear { style, w, content } => {
            let (b, r) = (val(style).shape()[0], val(style).shape()[1]);
            let (k, bc) = (val(w).shape()[1], val(w).shape()[2]);
            let (s, wm, c) = (val(style).data(), val(w).data(), val(content).data());
            let mut ds = vec![0.0; b * r];
            if tracked(style) {
                let tmp = mixer_times_content(wm, c, r * k, bc, b);
                for bi in 0..b {
                    for ri in 0..r {
                        ds[bi * r + ri] = (0..k).map(|ki| tmp[(ri * k + ki) * b + bi] * dout[bi * k + ki]).sum();
                    }
                }
            }
            // u[b, r, k] = style[b, r] · dout[b, k]
            let mut u = vec![0.0; b * r * k];
            for bi in 0..b {
                for ri in 0..r {
                    for ki in 0..k {
                        u[(bi * r + ri) * k + ki] = s[bi * r + ri] * dout[bi * k + ki];
                    }
                }
            }
            accumulate(nodes, grads, content, |g| gemm(b, r * k, bc, &u, false, wm, false, 1.0, g));
            accumulate(nodes, grads, w, |g| gemm(r * k, b, bc, &u, true, c, false, 1.0, g));
            accumulate(nodes, grads, style, |g| add_into(g, &ds));
        }
        Op::InstanceNorm {
            input,
            ref xhat,
            ref inv_std,
        } => {
            let (b, c, h, w) = val(input).dims4().expect("recorded shape");
            let hw = h * w;
            let n = hw as f64;
            accumulate(nodes, grads, input, |g| {
                for p in 0..b * c {
                    let r = p * hw..(p + 1) * hw;
                    let sd: f64 = dout[r.clone()].iter().sum();
                    let sdx: f64 = dout[r.clone()].iter().zip(&xhat[r.clone()]).map(|(d, x)| d * x).sum();
                    for i in r {
                        g[i] += inv_std[p] * (dout[i] - sd / n - xhat[i] * sdx / n);
                    }
                }
            });
        }
        Op::ChannelAffine { input, scale, shift } => {
            let (b, c, h, w) = val(input).dims4().expect("recorded shape");
            let hw = h * w;
            let (x, s) = (val(input).data(), val(scale).data());
            accumulate(nodes, grads, input, |g| {
                for p in 0..b * c {
                    for i in p * hw..(p + 1) * hw {
                        g[i] += dout[i] * s[p];
                    }
                }
            });
            accumulate(nodes, grads, scale, |g| {
                for p in 0..b * c {
                    g[p] += (p * hw..(p + 1) * hw).map(|i| dout[i] * x[i]).sum::<f64>();
                }
            });
            accumulate(nodes, grads, shift, |g| {
                for p in 0..b * c {
                    g[p] += dout[p * hw..(p + 1) * hw].iter().sum::<f64>();
                }
            });
        }
        Op::ChannelStd(a) => {
            let (b, c, h, w) = val(a).dims4().expect("recorded shape");
            let hw = h * w;
            let x = val(a).data();
            let sd = out.data();
            accumulate(nodes, grads, a, |g| {
                for p in 0..b * c {
                    if sd[p] == 0.0 {
                        continue;
                    }
                    let plane = &x[p * hw..(p + 1) * hw];
                    let mean = plane.iter().sum::<f64>() / hw as f64;
                    let f = dout[p] / (hw as f64 * sd[p]);
                    for (gi, v) in g[p * hw..(p + 1) * hw].iter_mut().zip(plane) {
                        *gi += f * (v - mean);
                    }
                }
            });
        }
        Op::WeightedL1 {
            generated,
            ref target,
            ref weights,
        } => {
            let gv = val(generated).data();
            let per = gv.len() / weights.len();
            accumulate(nodes, grads, generated, |g| {
                for (i, gi) in g.iter_mut().enumerate() {
                    let diff = gv[i] - target[i];
                    let sign = if diff > 0.0 {
                        1.0
                    } else if diff < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    *gi += dout[0] * weights[i / per] * sign;
                }
            });
        }
        Op::TotalVariation(a) => {
            let (b, c, h, w) = val(a).dims4().expect("recorded shape");
            let x = val(a).data();
            let f = 2.0 * dout[0] / x.len() as f64;
            accumulate(nodes, grads, a, |g| {
                for p in 0..b * c {
                    let base = p * h * w;
                    for y in 0..h {
                        for xx in 0..w {
                            let i = base + y * w + xx;
                            if y + 1 < h {
                                let d = x[i + w] - x[i];
                                g[i + w] += f * d;
                                g[i] -= f * d;
                            }
                            if xx + 1 < w {
                                let d = x[i + 1] - x[i];
                                g[i + 1] += f * d;
                                g[i] -= f * d;
                            }
                        }
                    }
                }
            });
        }
    }
}

/// `W·Cᵀ` for a `rows × bc` mixer and `batch × bc` content codes, laid out
/// `rows × batch`.
fn mixer_times_content(wm: &[f64], c: &[f64], rows: usize, bc: usize, batch: usize) -> Vec<f64> {
    let mut tmp = vec![0.0; rows * batch];
    gemm(rows, bc, batch, wm, false, c, true, 0.0, &mut tmp);
    tmp
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn sum_planes(dst: &mut [f64], src: &[f64], batch: usize, channels: usize, plane: usize) {
    for bi in 0..batch {
        for c in 0..channels {
            let start = (bi * channels + c) * plane;
            dst[c] += src[start..start + plane].iter().sum::<f64>();
        }
    }
}
