use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Probability clamp for the cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Scalar loss with its gradient with respect to the prediction.
#[derive(Clone, Debug)]
pub struct Loss<T> {
    pub value: f64,
    pub grad: Tensor<T>,
}

fn same_shape<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// Mean squared error over all elements.
pub fn mse_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Loss<T>> {
    same_shape(pred, target)?;
    let n = pred.len().max(1) as f64;
    let mut sum = 0.0;
    let mut grad = Tensor::zeros(pred.shape().to_vec());
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p.f64() - t.f64();
        sum += d * d;
        *g = T::of(2.0 * d / n);
    }
    Ok(Loss { value: sum / n, grad })
}

/// `−mean(w_fg·y·ln p + (1−y)·ln(1−p))` with `p` clamped to `[ε, 1−ε]`.
pub fn weighted_bce_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, w_fg: f64) -> Result<Loss<T>> {
    same_shape(pred, target)?;
    if !(w_fg > 0.0) {
        return Err(Error::InvalidConfig(format!("foreground weight must be positive, got {w_fg}")));
    }
    let n = pred.len().max(1) as f64;
    let mut sum = 0.0;
    let mut grad = Tensor::zeros(pred.shape().to_vec());
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let (raw, y) = (p.f64(), t.f64());
        let q = raw.clamp(BCE_EPS, 1.0 - BCE_EPS);
        sum -= w_fg * y * q.ln() + (1.0 - y) * (1.0 - q).ln();
        *g = if raw == q {
            T::of(-(w_fg * y / q - (1.0 - y) / (1.0 - q)) / n)
        } else {
            T::zero()
        };
    }
    Ok(Loss { value: sum / n, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn mse_cases() {
        let a = t(&[1.0, -2.0, 3.0]);
        assert_eq!(mse_loss(&a, &a).unwrap().value, 0.0);
        let b = t(&[2.0, -1.0, 4.0]);
        assert_eq!(mse_loss(&b, &a).unwrap().value, 1.0);
        assert_eq!(mse_loss(&a, &t(&[1.0])).unwrap_err().code(), "ShapeError");
    }

    #[test]
    fn bce_cases() {
        let ones = t(&[1.0; 5]);
        let half = t(&[0.5; 5]);
        let l = weighted_bce_loss(&half, &ones, 2.0).unwrap();
        assert!((l.value - 2.0 * 2f64.ln()).abs() < 1e-12);
        let y = t(&[1.0, 0.0, 1.0, 0.0]);
        let l = weighted_bce_loss(&y, &y, 2.0).unwrap();
        assert!(l.value >= 0.0 && l.value <= 2.0 * (1.0 / (1.0 - BCE_EPS)).ln() + 1e-15);
        assert_eq!(weighted_bce_loss(&half, &y, 2.0).unwrap_err().code(), "ShapeError");
    }

    #[test]
    fn unit_weight_is_plain_bce() {
        let p = t(&[0.2, 0.7, 0.9, 0.4]);
        let y = t(&[0.0, 1.0, 1.0, 0.0]);
        let plain: f64 = -[0.8f64.ln(), 0.7f64.ln(), 0.9f64.ln(), 0.6f64.ln()].iter().sum::<f64>() / 4.0;
        assert!((weighted_bce_loss(&p, &y, 1.0).unwrap().value - plain).abs() < 1e-14);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let h = 1e-5;
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p: Vec<f64> = (0..12).map(|_| rng.random_range(0.05..0.95)).collect();
            let y: Vec<f64> = (0..12).map(|_| rng.random_bool(0.5) as u8 as f64).collect();
            let target = t(&y);
            let losses: [&dyn Fn(&Tensor<f64>) -> Loss<f64>; 2] = [
                &|q| mse_loss(q, &target).unwrap(),
                &|q| weighted_bce_loss(q, &target, 2.0).unwrap(),
            ];
            for f in losses {
                let g = f(&t(&p)).grad;
                for i in 0..p.len() {
                    let (mut up, mut dn) = (p.clone(), p.clone());
                    up[i] += h;
                    dn[i] -= h;
                    let num = (f(&t(&up)).value - f(&t(&dn)).value) / (2.0 * h);
                    let a = g.data()[i];
                    assert!((a - num).abs() / a.abs().max(num.abs()).max(1e-6) < 1e-6, "{a} vs {num}");
                }
            }
        }
    }
}
