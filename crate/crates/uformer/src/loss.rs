//! Training objectives: sample-domain loss, spectral-magnitude loss over RI
//! components, a direct RI regression variant, and the alpha-blended
//! time-frequency combination.

use crate::error::{Error, Result};
use crate::tensor::{el, Elem, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossMode {
    /// Time-domain samples only.
    T,
    /// Elementwise regression on the RI spectrogram arrays.
    Ri,
    /// Blend of time loss and L1 spectral-magnitude loss.
    #[default]
    Tf1,
    /// Blend of time loss and L2 spectral-magnitude loss.
    Tf2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossFlavor {
    Mae,
    #[default]
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreqNorm {
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub mode: LossMode,
    /// Flavor of the time branch; the `Ri` mode reuses it for the elementwise
    /// RI regression.
    pub time_flavor: LossFlavor,
    /// Weight of the time branch in the `Tf1`/`Tf2` blend.
    pub alpha: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            mode: LossMode::default(),
            time_flavor: LossFlavor::default(),
            alpha: 0.8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "loss.alpha must lie in [0,1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Mean per-sample error between an estimate and its reference, MSE or MAE.
pub fn time_loss<E: Elem>(estimate: &Tensor<E>, reference: &Tensor<E>, flavor: LossFlavor) -> Tensor<E> {
    assert_eq!(
        estimate.shape(),
        reference.shape(),
        "time_loss: length mismatch {:?} vs {:?}",
        estimate.shape(),
        reference.shape()
    );
    let diff = estimate.sub(reference);
    match flavor {
        LossFlavor::Mse => diff.mul(&diff).mean_all(),
        LossFlavor::Mae => diff.abs().mean_all(),
    }
}

/// Per-cell absolute RI magnitude `|X_r| + |X_i|` of an `[N,2,T,F]` tensor.
fn ri_magnitude<E: Elem>(spec: &Tensor<E>) -> Tensor<E> {
    assert!(
        spec.rank() == 4 && spec.shape()[1] == 2,
        "freq_loss: expected [N,2,T,F] RI layout, got {:?}",
        spec.shape()
    );
    let a = spec.abs();
    a.slice(1, 0, 1).add(&a.slice(1, 1, 1))
}

/// Mean cellwise difference of RI magnitudes, with an L1 or squared outer
/// term. Zero whenever `|X_r| + |X_i|` matches cellwise, sign changes of the
/// components included.
pub fn freq_loss<E: Elem>(estimate: &Tensor<E>, reference: &Tensor<E>, norm: FreqNorm) -> Tensor<E> {
    assert_eq!(
        estimate.shape(),
        reference.shape(),
        "freq_loss: shape mismatch {:?} vs {:?}",
        estimate.shape(),
        reference.shape()
    );
    let diff = ri_magnitude(estimate).sub(&ri_magnitude(reference));
    match norm {
        FreqNorm::L1 => diff.abs().mean_all(),
        FreqNorm::L2 => diff.mul(&diff).mean_all(),
    }
}

/// Mean elementwise regression directly on the RI arrays.
pub fn ri_loss<E: Elem>(estimate: &Tensor<E>, reference: &Tensor<E>, flavor: LossFlavor) -> Tensor<E> {
    assert_eq!(
        estimate.shape(),
        reference.shape(),
        "ri_loss: shape mismatch {:?} vs {:?}",
        estimate.shape(),
        reference.shape()
    );
    let diff = estimate.sub(reference);
    match flavor {
        LossFlavor::Mse => diff.mul(&diff).mean_all(),
        LossFlavor::Mae => diff.abs().mean_all(),
    }
}

/// Dispatches on the configured mode; `Tf1`/`Tf2` blend as
/// `alpha * L_time + (1 - alpha) * L_freq`.
pub fn combined_loss<E: Elem>(
    time_estimate: &Tensor<E>,
    time_reference: &Tensor<E>,
    ri_estimate: &Tensor<E>,
    ri_reference: &Tensor<E>,
    config: &LossConfig,
) -> Tensor<E> {
    match config.mode {
        LossMode::T => time_loss(time_estimate, time_reference, config.time_flavor),
        LossMode::Ri => ri_loss(ri_estimate, ri_reference, config.time_flavor),
        LossMode::Tf1 | LossMode::Tf2 => {
            let norm = if config.mode == LossMode::Tf1 {
                FreqNorm::L1
            } else {
                FreqNorm::L2
            };
            let alpha = el::<E>(config.alpha as f64);
            let one_minus = el::<E>(1.0 - config.alpha as f64);
            let lt = time_loss(time_estimate, time_reference, config.time_flavor);
            let lf = freq_loss(ri_estimate, ri_reference, norm);
            lt.scale(alpha).add(&lf.scale(one_minus))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new((0..n).map(|_| r.gen_range(-1.0..1.0)).collect(), shape)
    }

    #[test]
    fn time_loss_hand_values() {
        let x = Tensor::<f32>::new(vec![1.0, 1.0], &[2]);
        let zero = Tensor::zeros(&[2]);
        assert_eq!(time_loss(&zero, &x, LossFlavor::Mse).item(), 1.0);
        assert_eq!(time_loss(&zero, &x, LossFlavor::Mae).item(), 1.0);
        assert_eq!(time_loss(&x, &x, LossFlavor::Mse).item(), 0.0);
        assert_eq!(time_loss(&x, &x, LossFlavor::Mae).item(), 0.0);
    }

    #[test]
    fn time_mse_gradient_is_two_diff_over_m() {
        let x_hat = rand_t(1, &[8]).with_grad();
        let x = rand_t(2, &[8]);
        let report = grad_check(|t| time_loss(&t[0], &x, LossFlavor::Mse), &[x_hat.clone()], 1e-4);
        assert!(report.passes(1e-4), "rel err {}", report.max_rel_err);

        x_hat.zero_grad();
        time_loss(&x_hat, &x, LossFlavor::Mse).backward();
        let g = x_hat.grad().unwrap();
        for i in 0..8 {
            let expected = 2.0 * (x_hat.to_vec()[i] - x.to_vec()[i]) / 8.0;
            assert!((g[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn freq_loss_hand_cell() {
        // One cell with X = 3 - 4i against a zero estimate: |3| + |-4| = 7.
        let reference = Tensor::<f32>::new(vec![3.0, -4.0], &[1, 2, 1, 1]);
        let estimate = Tensor::zeros(&[1, 2, 1, 1]);
        assert_eq!(freq_loss(&estimate, &reference, FreqNorm::L1).item(), 7.0);
        assert_eq!(freq_loss(&estimate, &reference, FreqNorm::L2).item(), 49.0);
        assert_eq!(freq_loss(&reference, &reference, FreqNorm::L1).item(), 0.0);
    }

    #[test]
    fn freq_loss_invariant_to_component_sign() {
        let reference = rand_t(3, &[1, 2, 3, 4]);
        let estimate = rand_t(4, &[1, 2, 3, 4]);
        let flipped = Tensor::new(
            estimate
                .to_vec()
                .iter()
                .enumerate()
                .map(|(i, &v)| if i < 12 { -v } else { v })
                .collect(),
            &[1, 2, 3, 4],
        );
        let a = freq_loss(&estimate, &reference, FreqNorm::L1).item();
        let b = freq_loss(&flipped, &reference, FreqNorm::L1).item();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn combined_loss_extremes_and_blend() {
        let t_hat = rand_t(5, &[64]);
        let t_ref = rand_t(6, &[64]);
        let s_hat = rand_t(7, &[1, 2, 4, 5]);
        let s_ref = rand_t(8, &[1, 2, 4, 5]);

        let mut cfg = LossConfig {
            mode: LossMode::Tf1,
            time_flavor: LossFlavor::Mse,
            alpha: 1.0,
        };
        let all_time = combined_loss(&t_hat, &t_ref, &s_hat, &s_ref, &cfg).item();
        assert!((all_time - time_loss(&t_hat, &t_ref, LossFlavor::Mse).item()).abs() < 1e-12);

        cfg.alpha = 0.0;
        let all_freq = combined_loss(&t_hat, &t_ref, &s_hat, &s_ref, &cfg).item();
        assert!((all_freq - freq_loss(&s_hat, &s_ref, FreqNorm::L1).item()).abs() < 1e-12);

        cfg.alpha = 0.8;
        let blended = combined_loss(&t_hat, &t_ref, &s_hat, &s_ref, &cfg).item();
        let expected = 0.8 * time_loss(&t_hat, &t_ref, LossFlavor::Mse).item()
            + 0.2 * freq_loss(&s_hat, &s_ref, FreqNorm::L1).item();
        assert!((blended - expected).abs() < 1e-7);

        // The worked arithmetic: alpha 0.8 with L_t = 1 and L_f = 2 gives 1.2.
        assert!((0.8f64 * 1.0 + 0.2 * 2.0 - 1.2).abs() < 1e-12);
    }

    #[test]
    fn combined_loss_is_affine_in_alpha() {
        let t_hat = rand_t(9, &[32]);
        let t_ref = rand_t(10, &[32]);
        let s_hat = rand_t(11, &[1, 2, 2, 4]);
        let s_ref = rand_t(12, &[1, 2, 2, 4]);
        let at = |alpha: f32| {
            let cfg = LossConfig {
                mode: LossMode::Tf2,
                time_flavor: LossFlavor::Mae,
                alpha,
            };
            combined_loss(&t_hat, &t_ref, &s_hat, &s_ref, &cfg).item()
        };
        let (a, b, c) = (at(0.0), at(0.5), at(1.0));
        assert!((b - 0.5 * (a + c)).abs() < 1e-12, "affine: {a} {b} {c}");
    }

    #[test]
    fn ri_mode_is_elementwise_regression() {
        let s_hat = rand_t(13, &[1, 2, 3, 2]);
        let s_ref = rand_t(14, &[1, 2, 3, 2]);
        let cfg = LossConfig {
            mode: LossMode::Ri,
            time_flavor: LossFlavor::Mae,
            alpha: 0.8,
        };
        let dummy = Tensor::zeros(&[4]);
        let got = combined_loss(&dummy, &dummy, &s_hat, &s_ref, &cfg).item();
        let manual: f64 = s_hat
            .to_vec()
            .iter()
            .zip(&s_ref.to_vec())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / s_hat.numel() as f64;
        assert!((got - manual).abs() < 1e-12);
    }

    #[test]
    fn losses_nonnegative_and_gradcheckable_away_from_kinks() {
        for seed in 0..5 {
            let t_hat = rand_t(20 + seed, &[16]).with_grad();
            let t_ref = rand_t(40 + seed, &[16]);
            assert!(time_loss(&t_hat, &t_ref, LossFlavor::Mae).item() >= 0.0);
            let report = grad_check(|t| time_loss(&t[0], &t_ref, LossFlavor::Mae), &[t_hat], 1e-4);
            assert!(report.passes(1e-3), "seed {seed}: rel err {}", report.max_rel_err);
        }
        let s_hat = rand_t(60, &[1, 2, 2, 3]).with_grad();
        let s_ref = rand_t(61, &[1, 2, 2, 3]);
        let report = grad_check(|t| freq_loss(&t[0], &s_ref, FreqNorm::L1), &[s_hat], 1e-4);
        assert!(report.passes(1e-3), "rel err {}", report.max_rel_err);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            alpha: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
