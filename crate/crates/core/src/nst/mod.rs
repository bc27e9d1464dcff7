//! Statistic-matching style transfer: per-channel feature statistics,
//! matching, trade-off and interpolation, and the perceptual objective.

mod net;

pub use net::{fit_decoder, nst_forward, nst_mix_with_stats, ConvSpec, FitLog, LossExtractor, NstConfig, NstNet};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Variance guard used by [`statistic_match`] and the mixing layer.
pub const MATCH_EPSILON: f64 = 1e-8;

/// Per (batch, channel) spatial mean and standard deviation, batch-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub batch: usize,
    pub channels: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn new(batch: usize, channels: usize, mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        let n = batch * channels;
        if mean.len() != n || std.len() != n {
            return Err(Error::shape(
                "channel_stats",
                format!("{} means and {} stds for {batch}×{channels}", mean.len(), std.len()),
            ));
        }
        if let Some(s) = std.iter().find(|s| !(**s >= 0.0)) {
            return Err(Error::InvalidArgument(format!("negative or NaN std {s}")));
        }
        Ok(Self {
            batch,
            channels,
            mean,
            std,
        })
    }

    /// `(1 − α)·self + α·other`, elementwise on both vectors.
    pub fn lerp(&self, other: &ChannelStats, alpha: f64) -> Result<ChannelStats> {
        check_alpha(alpha)?;
        if (self.batch, self.channels) != (other.batch, other.channels) {
            return Err(Error::shape(
                "lerp",
                format!("{}×{} vs {}×{}", self.batch, self.channels, other.batch, other.channels),
            ));
        }
        let mix = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (1.0 - alpha) * x + alpha * y).collect();
        Ok(ChannelStats {
            batch: self.batch,
            channels: self.channels,
            mean: mix(&self.mean, &other.mean),
            std: mix(&self.std, &other.std),
        })
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} is outside [0, 1]")));
    }
    Ok(())
}

/// Spatial mean and `sqrt(var + epsilon)` of every plane of a `[B,C,H,W]`
/// tensor, with the population variance.
pub fn channel_stats(f: &Tensor, epsilon: f64) -> Result<ChannelStats> {
    let (b, c, h, w) = f.dims4()?;
    let hw = h * w;
    if hw == 0 {
        return Err(Error::shape("channel_stats", "empty spatial extent"));
    }
    if epsilon < 0.0 {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} < 0")));
    }
    let mut mean = Vec::with_capacity(b * c);
    let mut std = Vec::with_capacity(b * c);
    for plane in f.data().chunks(hw) {
        let m = plane.iter().sum::<f64>() / hw as f64;
        let v = plane.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / hw as f64;
        mean.push(m);
        std.push((v + epsilon).sqrt());
    }
    ChannelStats::new(b, c, mean, std)
}

/// Re-normalizes every plane of `f_con` to carry `target`'s statistics.
/// The plane's standard deviation is floored at `sqrt(epsilon)` before
/// dividing, so non-degenerate planes hit the target exactly and constant
/// planes map to the target mean.
pub fn statistic_match(f_con: &Tensor, target: &ChannelStats, epsilon: f64) -> Result<Tensor> {
    let (b, c, h, w) = f_con.dims4()?;
    if (b, c) != (target.batch, target.channels) {
        return Err(Error::shape(
            "statistic_match",
            format!("features {b}×{c} vs stats {}×{}", target.batch, target.channels),
        ));
    }
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument("statistic_match needs epsilon > 0".into()));
    }
    let hw = h * w;
    let own = channel_stats(f_con, 0.0)?;
    let floor = epsilon.sqrt();
    let mut out = f_con.clone();
    for (p, plane) in out.data_mut().chunks_mut(hw).enumerate() {
        let k = target.std[p] / own.std[p].max(floor);
        for v in plane {
            *v = (*v - own.mean[p]) * k + target.mean[p];
        }
    }
    Ok(out)
}

/// Matches `f_con` to a blend of its own statistics and a style's.
/// `alpha = 0` reconstructs the content statistics, `alpha = 1` the style's.
pub fn tradeoff_mix(f_con: &Tensor, con_stats: &ChannelStats, sty_stats: &ChannelStats, alpha: f64) -> Result<Tensor> {
    let blended = con_stats.lerp(sty_stats, alpha)?;
    statistic_match(f_con, &blended, MATCH_EPSILON)
}

/// Matches `f_con` to a blend of two style statistics.
pub fn style_interpolate(f_con: &Tensor, stats1: &ChannelStats, stats2: &ChannelStats, alpha: f64) -> Result<Tensor> {
    let blended = stats1.lerp(stats2, alpha)?;
    statistic_match(f_con, &blended, MATCH_EPSILON)
}

/// Relative weights of the three objective terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NstWeights {
    pub content: f64,
    pub style: f64,
    pub tv: f64,
}

impl Default for NstWeights {
    fn default() -> Self {
        Self {
            content: 1.0,
            style: 5.0,
            tv: 1e-5,
        }
    }
}

/// Squared Euclidean distance divided by the element count.
pub fn content_loss(g: &mut Graph, f_gen: Var, f_con: Var) -> Result<Var> {
    let d = g.sub(f_gen, f_con)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Sum over layers of squared distances between channel means and between
/// channel standard deviations, averaged over the batch.
pub fn style_loss(g: &mut Graph, f_gen: &[Var], f_sty: &[Var]) -> Result<Var> {
    if f_gen.len() != f_sty.len() || f_gen.is_empty() {
        return Err(Error::shape(
            "style_loss",
            format!("{} generated layers vs {} style layers", f_gen.len(), f_sty.len()),
        ));
    }
    let batch = g.shape(f_gen[0])[0];
    let mut total: Option<Var> = None;
    for (&a, &b) in f_gen.iter().zip(f_sty) {
        let (ma, mb) = (g.channel_mean(a)?, g.channel_mean(b)?);
        let (sa, sb) = (g.channel_std(a)?, g.channel_std(b)?);
        let dm = g.sub(ma, mb)?;
        let ds = g.sub(sa, sb)?;
        let (dm2, ds2) = (g.square(dm), g.square(ds));
        let (lm, ls) = (g.sum(dm2), g.sum(ds2));
        let layer = g.add(lm, ls)?;
        total = Some(match total {
            Some(t) => g.add(t, layer)?,
            None => layer,
        });
    }
    let total = total.expect("at least one layer");
    Ok(g.scale(total, 1.0 / batch as f64))
}

/// Anisotropic squared total variation over the pixel count.
pub fn tv_loss(g: &mut Graph, image: Var) -> Result<Var> {
    g.total_variation(image)
}

/// `λc·Lc + λs·Ls + λtv·Ltv`.
pub fn total_loss(g: &mut Graph, content: Var, style: Var, tv: Var, w: &NstWeights) -> Result<Var> {
    if w.content < 0.0 || w.style < 0.0 || w.tv < 0.0 {
        return Err(Error::InvalidArgument(format!("negative loss weight in {w:?}")));
    }
    let c = g.scale(content, w.content);
    let s = g.scale(style, w.style);
    let t = g.scale(tv, w.tv);
    let cs = g.add(c, s)?;
    g.add(cs, t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn value(f: impl FnOnce(&mut Graph) -> Result<Var>) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g).unwrap();
        g.value(v).data()[0]
    }

    #[test]
    fn stats_hand_cases() {
        let s = channel_stats(&t(&[1, 1, 1, 2], &[1.0, 3.0]), 0.0).unwrap();
        assert_eq!((s.mean[0], s.std[0]), (2.0, 1.0));
        let s = channel_stats(&Tensor::full(&[1, 1, 2, 2], 7.0), 1e-8).unwrap();
        assert_eq!(s.mean[0], 7.0);
        assert!((s.std[0] - 1e-4).abs() < 1e-12);
    }

    #[test]
    fn statistic_match_hand_case_and_identity() {
        let target = ChannelStats::new(1, 1, vec![10.0], vec![4.0]).unwrap();
        let out = statistic_match(&t(&[1, 1, 1, 2], &[1.0, 3.0]), &target, MATCH_EPSILON).unwrap();
        assert!((out.data()[0] - 6.0).abs() < 1e-7 && (out.data()[1] - 14.0).abs() < 1e-7);

        let f = t(&[1, 2, 2, 2], &[0.1, 0.5, -0.3, 2.0, 1.0, 1.5, 0.2, -4.0]);
        let own = channel_stats(&f, 0.0).unwrap();
        let back = statistic_match(&f, &own, MATCH_EPSILON).unwrap();
        for (a, b) in back.data().iter().zip(f.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_channel_maps_to_target_mean() {
        let target = ChannelStats::new(1, 1, vec![3.0], vec![2.0]).unwrap();
        let out = statistic_match(&Tensor::full(&[1, 1, 2, 2], 5.0), &target, MATCH_EPSILON).unwrap();
        assert!(out.data().iter().all(|v| *v == 3.0));
    }

    #[test]
    fn alpha_bounds_are_enforced() {
        let f = t(&[1, 1, 1, 2], &[0.0, 1.0]);
        let s = channel_stats(&f, 0.0).unwrap();
        assert!(tradeoff_mix(&f, &s, &s, 1.5).is_err());
        assert!(style_interpolate(&f, &s, &s, -0.1).is_err());
        assert!(tradeoff_mix(&f, &s, &s, 1.0).is_ok());
    }

    #[test]
    fn loss_hand_cases() {
        let lc = value(|g| {
            let a = g.constant(t(&[1, 1, 1, 2], &[0.0, 0.0]));
            let b = g.constant(t(&[1, 1, 1, 2], &[1.0, 1.0]));
            content_loss(g, a, b)
        });
        assert_eq!(lc, 1.0);
        let ls = value(|g| {
            let a = g.constant(t(&[1, 1, 1, 2], &[1.0, 3.0]));
            let b = g.constant(t(&[1, 1, 1, 2], &[0.0, 0.0]));
            style_loss(g, &[a], &[b])
        });
        assert_eq!(ls, 5.0);
        let tv = value(|g| {
            let a = g.constant(t(&[1, 1, 1, 2], &[0.0, 1.0]));
            tv_loss(g, a)
        });
        assert_eq!(tv, 0.5);
        let tv1 = value(|g| {
            let a = g.constant(t(&[1, 1, 1, 1], &[0.3]));
            tv_loss(g, a)
        });
        assert_eq!(tv1, 0.0);
        let total = value(|g| {
            let one = g.constant(Tensor::scalar(1.0));
            total_loss(g, one, one, one, &NstWeights::default())
        });
        assert!((total - 6.00001).abs() < 1e-12);
    }

    #[test]
    fn style_loss_rejects_layer_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(style_loss(&mut g, &[a, a], &[a]).is_err());
    }
}
