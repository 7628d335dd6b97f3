//! Folding a normalization layer that feeds a spike comparison into the
//! comparison threshold.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::tsbn::{tsbn_forward_infer, TsbnLayer};

/// Per-`(t, c)` thresholds applied directly to the raw pre-activation.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldedThreshold<S: Scalar = f32> {
    /// Name of the normalization layer this was folded from.
    pub source: String,
    /// `[T, C]`
    pub v_th_eff: Tensor<S>,
}

impl<S: Scalar> FoldedThreshold<S> {
    pub fn new(source: impl Into<String>, v_th_eff: Tensor<S>) -> Result<Self> {
        if v_th_eff.rank() != 2 {
            return shape_err(format!("folded threshold must be [T, C], got {:?}", v_th_eff.shape()));
        }
        v_th_eff.check_finite()?;
        Ok(FoldedThreshold {
            source: source.into(),
            v_th_eff,
        })
    }

    pub fn steps(&self) -> usize {
        self.v_th_eff.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.v_th_eff.shape()[1]
    }

    pub fn stored_floats(&self) -> usize {
        self.v_th_eff.numel()
    }

    pub fn cast<T: Scalar>(&self) -> FoldedThreshold<T> {
        FoldedThreshold {
            source: self.source.clone(),
            v_th_eff: self.v_th_eff.cast(),
        }
    }
}

/// `(v_th - beta) * sqrt(var + eps) / gamma + mu` from running statistics.
pub fn fold_threshold<S: Scalar>(layer: &TsbnLayer<S>, v_th: f64) -> Result<FoldedThreshold<S>> {
    if !layer.is_populated() {
        return Err(Error::StatsUnpopulated(layer.name.clone()));
    }
    let gamma = layer.gamma_values();
    let c = layer.channels();
    let (beta, mu, var) = (
        layer.beta.value.data(),
        layer.running_mu().data(),
        layer.running_var().data(),
    );
    let mut out = Vec::with_capacity(gamma.numel());
    for (k, g) in gamma.data().iter().enumerate() {
        let g = g.wide();
        if !(g > 0.0) {
            return Err(Error::NonPositiveGamma {
                layer: layer.name.clone(),
                t: k / c,
                c: k % c,
                value: g,
            });
        }
        out.push(S::cast(
            (v_th - beta[k].wide()) * (var[k].wide() + layer.eps).sqrt() / g + mu[k].wide(),
        ));
    }
    FoldedThreshold::new(
        layer.name.clone(),
        Tensor::from_vec_unchecked(&[layer.steps(), c], out)?,
    )
}

/// Reference path: normalize with running statistics, then `>= v_th`.
pub fn spike_normalized<S: Scalar>(x: &Tensor<S>, layer: &TsbnLayer<S>, v_th: f64) -> Result<Tensor<S>> {
    let z = tsbn_forward_infer(x, layer)?;
    Ok(crate::lif::threshold(&z, v_th))
}

/// Folded path: `x >= v_th_eff[t, c]`, no normalization arithmetic.
pub fn spike_folded<S: Scalar>(x: &Tensor<S>, ft: &FoldedThreshold<S>) -> Result<Tensor<S>> {
    let s = x.shape();
    if s.len() != 5 || s[2] != ft.channels() {
        return shape_err(format!(
            "folded threshold `{}` expects [T, B, {}, H, W], got {s:?}",
            ft.source,
            ft.channels()
        ));
    }
    if s[0] != ft.steps() {
        return shape_err(format!(
            "folded threshold `{}` has T = {} but input has T = {}",
            ft.source,
            ft.steps(),
            s[0]
        ));
    }
    let (b, c, plane) = (s[1], s[2], s[3] * s[4]);
    let th = ft.v_th_eff.data();
    let out = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let t = i / (b * c * plane);
            let ch = (i / plane) % c;
            if *v >= th[t * c + ch] {
                S::ONE
            } else {
                S::ZERO
            }
        })
        .collect();
    Tensor::from_vec_unchecked(s, out)
}

/// `|normalized(x) - v_th|` per element, evaluated in f64. Elements inside a
/// small band are where the two paths may legitimately round differently.
pub fn boundary_distance<S: Scalar>(x: &Tensor<S>, layer: &TsbnLayer<S>, v_th: f64) -> Result<Vec<f64>> {
    let wide = layer.cast::<f64>();
    let z = tsbn_forward_infer(&x.cast::<f64>(), &wide)?;
    Ok(z.data().iter().map(|v| (v - v_th).abs()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layer(gamma: f64, beta: f64, mu: f64, var: f64) -> TsbnLayer<f64> {
        let mut l = TsbnLayer::new("q", 1, 1, 1, true).unwrap().with_eps(1e-300).unwrap();
        l.set_gamma(Tensor::full(&[1, 1], gamma)).unwrap();
        l.set_beta(Tensor::full(&[1, 1], beta)).unwrap();
        l.set_running_stats(Tensor::full(&[1, 1], mu), Tensor::full(&[1, 1], var))
            .unwrap();
        l
    }

    #[test]
    fn fold_examples() {
        let ft = fold_threshold(&layer(2.0, 0.5, 0.3, 1.0), 1.0).unwrap();
        assert!((ft.v_th_eff.data()[0] - 0.55).abs() < 1e-12);
        assert_eq!(ft.source, "q");
        let id = fold_threshold(&layer(1.0, 0.0, 0.0, 1.0), 0.7).unwrap();
        assert!((id.v_th_eff.data()[0] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn non_positive_gamma_is_named() {
        let mut l = TsbnLayer::<f64>::new("mlp1", 2, 3, 1, false).unwrap();
        let mut g = Tensor::ones(&[2, 3]);
        g.set(&[1, 2], -1.0);
        l.set_gamma(g).unwrap();
        l.set_running_stats(Tensor::zeros(&[2, 3]), Tensor::ones(&[2, 3]))
            .unwrap();
        match fold_threshold(&l, 1.0) {
            Err(Error::NonPositiveGamma {
                layer,
                t: 1,
                c: 2,
                value,
            }) => {
                assert_eq!(layer, "mlp1");
                assert_eq!(value, -1.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unpopulated_layer_cannot_fold() {
        let l = TsbnLayer::<f64>::new("q", 1, 1, 1, true).unwrap();
        assert!(matches!(fold_threshold(&l, 1.0), Err(Error::StatsUnpopulated(_))));
    }

    #[test]
    fn boundary_and_extremes() {
        let l = layer(1.0, 0.0, 0.0, 1.0);
        let x = Tensor::<f64>::from_f64(&[1, 1, 1, 1, 3], &[1.0, -50.0, 0.999]).unwrap();
        assert_eq!(spike_normalized(&x, &l, 1.0).unwrap().data(), &[1.0, 0.0, 0.0]);
        let ft = fold_threshold(&l, 1.0).unwrap();
        assert_eq!(spike_folded(&x, &ft).unwrap().data(), &[1.0, 0.0, 0.0]);
        let low = FoldedThreshold::new("low", Tensor::<f64>::full(&[1, 1], -1e30)).unwrap();
        assert!(spike_folded(&x, &low).unwrap().data().iter().all(|&v| v == 1.0));
        let at = FoldedThreshold::new("at", Tensor::<f64>::full(&[1, 1], 0.999)).unwrap();
        assert_eq!(spike_folded(&x, &at).unwrap().data()[2], 1.0);
    }

    #[test]
    fn far_below_mean_never_spikes() {
        let l = layer(1.5, 0.2, 3.0, 0.5);
        let x = Tensor::<f64>::full(&[1, 2, 1, 3, 3], -100.0);
        assert!(spike_normalized(&x, &l, 1.0).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn step_mismatch_is_rejected() {
        let ft = FoldedThreshold::new("f", Tensor::<f64>::zeros(&[2, 1])).unwrap();
        assert!(spike_folded(&Tensor::zeros(&[3, 1, 1, 1, 1]), &ft).is_err());
    }

    proptest! {
        #[test]
        fn threshold_moves_monotonically(
            gamma in 0.05f64..5.0,
            beta in -2.0f64..2.0,
            mu in -2.0f64..2.0,
            var in 0.01f64..4.0,
            v_th in -2.0f64..2.0,
            delta in 0.01f64..1.0,
        ) {
            let base = fold_threshold(&layer(gamma, beta, mu, var), v_th).unwrap().v_th_eff.data()[0];
            let more_beta = fold_threshold(&layer(gamma, beta + delta, mu, var), v_th).unwrap().v_th_eff.data()[0];
            let more_vth = fold_threshold(&layer(gamma, beta, mu, var), v_th + delta).unwrap().v_th_eff.data()[0];
            prop_assert!(more_beta < base);
            prop_assert!(more_vth > base);
        }
    }
}
