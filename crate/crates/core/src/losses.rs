//! Glyph reconstruction objective and evaluation metrics.
//!
//! Every image here is a grayscale tensor with values in `[0, 1]`, white
//! background at 1. A pixel counts as black when its value is below 0.5.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Values strictly below this are black.
pub const BLACK_THRESHOLD: f64 = 0.5;

/// Per-target weights for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchWeights {
    /// `1 / N_b` per target, or `1 / numel` for a blank target.
    pub st_weight: Vec<f64>,
    /// Softmax of black-pixel mean intensity across the batch.
    pub d_weight: Vec<f64>,
    /// Batch indices of targets with no black pixel.
    pub degenerate: Vec<usize>,
}

impl BatchWeights {
    pub fn combined(&self) -> Vec<f64> {
        self.st_weight.iter().zip(&self.d_weight).map(|(a, b)| a * b).collect()
    }
}

fn check_range(op: &str, x: &[f64]) -> Result<()> {
    match x.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(i) => Err(Error::InvalidArgument(format!(
            "{op}: value {} at index {i} is outside [0, 1]",
            x[i]
        ))),
        None => Ok(()),
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Black-pixel mask of an image.
pub fn binarize(image: &Tensor) -> Result<Vec<bool>> {
    check_range("binarize", image.data())?;
    Ok(image.data().iter().map(|v| *v < BLACK_THRESHOLD).collect())
}

/// `1 / N_b`. A blank image gets `1 / numel` and the returned flag is set.
pub fn size_thickness_weight(target: &Tensor) -> Result<(f64, bool)> {
    let mask = binarize(target)?;
    let n = mask.iter().filter(|b| **b).count();
    if n == 0 {
        Ok((1.0 / mask.len() as f64, true))
    } else {
        Ok((1.0 / n as f64, false))
    }
}

/// Mean intensity of the black pixels, 0 for a blank image.
fn black_mean(image: &[f64]) -> f64 {
    let (sum, n) = image
        .iter()
        .filter(|v| **v < BLACK_THRESHOLD)
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Softmax over the batch of per-image black-pixel means. `targets` is a
/// `[B, …]` batch.
pub fn darkness_weight(targets: &Tensor) -> Result<Vec<f64>> {
    let b = targets.shape()[0];
    if b == 0 {
        return Err(Error::InvalidArgument("darkness_weight: empty batch".into()));
    }
    check_range("darkness_weight", targets.data())?;
    let per = targets.numel() / b;
    let means: Vec<f64> = (0..b).map(|i| black_mean(&targets.data()[i * per..(i + 1) * per])).collect();
    let top = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = means.iter().map(|m| (m - top).exp()).collect();
    let z: f64 = exp.iter().sum();
    Ok(exp.into_iter().map(|e| e / z).collect())
}

/// Both weight families for a `[B, …]` target batch.
pub fn batch_weights(targets: &Tensor) -> Result<BatchWeights> {
    let b = targets.shape()[0];
    let d_weight = darkness_weight(targets)?;
    let per = targets.numel() / b;
    let mut st_weight = Vec::with_capacity(b);
    let mut degenerate = Vec::new();
    for i in 0..b {
        let item = Tensor::new(vec![per], targets.data()[i * per..(i + 1) * per].to_vec())?;
        let (w, blank) = size_thickness_weight(&item)?;
        if blank {
            degenerate.push(i);
        }
        st_weight.push(w);
    }
    Ok(BatchWeights {
        st_weight,
        d_weight,
        degenerate,
    })
}

/// Records the weighted L1 objective on `g`. Weights depend on the targets
/// only, so they enter as constants.
pub fn weighted_l1_loss(g: &mut Graph, generated: Var, targets: &Tensor) -> Result<(Var, BatchWeights)> {
    if g.shape(generated) != targets.shape() {
        return Err(Error::shape(
            "weighted_l1_loss",
            format!("{:?} vs {:?}", g.shape(generated), targets.shape()),
        ));
    }
    let weights = batch_weights(targets)?;
    let loss = g.weighted_l1(generated, targets, &weights.combined())?;
    Ok((loss, weights))
}

/// Loss value without recording gradients.
pub fn weighted_l1_value(generated: &Tensor, targets: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(generated.clone());
    let (loss, _) = weighted_l1_loss(&mut g, v, targets)?;
    Ok(g.value(loss).data()[0])
}

/// Mean absolute difference.
pub fn l1_metric(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same("l1_metric", a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
    Ok(s / a.numel() as f64)
}

/// Root of the mean squared difference.
pub fn rmse_metric(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same("rmse_metric", a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((s / a.numel() as f64).sqrt())
}

/// Fraction of pixels whose binarized values disagree.
pub fn pdar_metric(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same("pdar_metric", a, b)?;
    let (ma, mb) = (binarize(a)?, binarize(b)?);
    let diff = ma.iter().zip(&mb).filter(|(x, y)| x != y).count();
    Ok(diff as f64 / a.numel() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn binarize_threshold_is_strict() {
        let m = binarize(&img(&[3], &[0.0, 0.5, 0.4999])).unwrap();
        assert_eq!(m, vec![true, false, true]);
        assert!(binarize(&img(&[1], &[1.5])).is_err());
        assert!(binarize(&img(&[1], &[f64::NAN])).is_err());
    }

    #[test]
    fn size_thickness_cases() {
        assert_eq!(size_thickness_weight(&Tensor::zeros(&[2, 2])).unwrap(), (0.25, false));
        assert_eq!(size_thickness_weight(&Tensor::full(&[3, 3], 1.0)).unwrap(), (1.0 / 9.0, true));
    }

    #[test]
    fn darkness_weight_cases() {
        assert_eq!(darkness_weight(&Tensor::zeros(&[1, 1, 2, 2])).unwrap(), vec![1.0]);
        let w = darkness_weight(&img(&[2, 1], &[0.3, 0.3])).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);
        let w = darkness_weight(&img(&[2, 1], &[0.2, 0.4])).unwrap();
        assert!((w[0] - 0.4502).abs() < 1e-4 && (w[1] - 0.5498).abs() < 1e-4);
        // blank image contributes a mean of 0
        let w = darkness_weight(&img(&[2, 1], &[1.0, 0.0])).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);
        assert!(darkness_weight(&Tensor::new(vec![0, 1], vec![]).unwrap()).is_err());
    }

    #[test]
    fn weighted_l1_single_pixel() {
        let v = weighted_l1_value(&img(&[1, 1, 1, 1], &[0.3]), &img(&[1, 1, 1, 1], &[0.0])).unwrap();
        assert!((v - 0.3).abs() < 1e-15);
        let t = img(&[1, 1, 1, 2], &[0.0, 1.0]);
        assert_eq!(weighted_l1_value(&t, &t).unwrap(), 0.0);
        assert!(weighted_l1_value(&Tensor::zeros(&[1, 1, 1, 1]), &t).is_err());
    }

    #[test]
    fn metric_hand_values() {
        let a = img(&[1, 2], &[0.0, 0.0]);
        let b = img(&[1, 2], &[0.2, 0.4]);
        assert!((l1_metric(&a, &b).unwrap() - 0.3).abs() < 1e-15);
        assert!((rmse_metric(&a, &b).unwrap() - 0.1f64.sqrt()).abs() < 1e-15);
        let m = img(&[2, 2], &[0.0, 1.0, 0.0, 1.0]);
        let n = img(&[2, 2], &[0.0, 1.0, 1.0, 1.0]);
        assert_eq!(pdar_metric(&m, &n).unwrap(), 0.25);
        let c = img(&[2, 2], &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(pdar_metric(&m, &c).unwrap(), 1.0);
        assert!(l1_metric(&a, &m).is_err());
    }
}
