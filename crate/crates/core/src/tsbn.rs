//! Temporal sliding batch normalization.
//!
//! Output at timestep `t` is normalized with per-channel statistics pooled
//! over a window of `w` timesteps (plus batch and spatial axes), then scaled
//! and shifted by the per-timestep affine pair `gamma[t, c]`, `beta[t, c]`.
//! At `w = T` this is time-pooled BN; at `w = 1` it is per-timestep BN.
//!
//! Inference uses per-timestep running statistics, which is also what the
//! spatial fusion and threshold folding read.

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{BackwardCtx, BackwardRule, Param, Scalar, Tape, Tensor, Var};

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-5;

/// Placement of the `w`-step window around timestep `t`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum WindowPolicy {
    /// Exactly `w` steps ending at `t`, slid right (into later steps) when
    /// `t < w - 1`. Always contains `t`; `w = T` pools the whole sequence at
    /// every step.
    #[default]
    Shifted,
    /// `[max(0, t - w + 1), t]`: never looks ahead, shrinks at the start.
    Causal,
}

impl WindowPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            WindowPolicy::Shifted => "shifted",
            WindowPolicy::Causal => "causal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "shifted" => Ok(WindowPolicy::Shifted),
            "causal" => Ok(WindowPolicy::Causal),
            other => invalid(format!("unknown window policy `{other}`")),
        }
    }
}

/// Inclusive `(start, end)` of the window for timestep `t`.
pub fn window_bounds(t: usize, w: usize, steps: usize, policy: WindowPolicy) -> (usize, usize) {
    debug_assert!(w >= 1 && w <= steps && t < steps);
    match policy {
        WindowPolicy::Causal => ((t + 1).saturating_sub(w), t),
        WindowPolicy::Shifted => {
            let start = (t + 1).saturating_sub(w).min(steps - w);
            (start, start + w - 1)
        }
    }
}

/// Scale parameter. `Log` keeps gamma strictly positive, which threshold
/// folding relies on.
#[derive(Clone, Debug)]
pub enum Gamma<S: Scalar = f32> {
    Direct(Param<S>),
    Log(Param<S>),
}

#[derive(Clone, Debug)]
pub struct TsbnLayer<S: Scalar = f32> {
    pub name: String,
    steps: usize,
    channels: usize,
    window: usize,
    policy: WindowPolicy,
    pub gamma: Gamma<S>,
    pub beta: Param<S>,
    running_mu: Tensor<S>,
    running_var: Tensor<S>,
    pub momentum: f64,
    pub eps: f64,
    batches_seen: u64,
}

impl<S: Scalar> TsbnLayer<S> {
    /// Gamma starts at 1 and beta at 0. `log_gamma` selects the positive
    /// parameterization.
    pub fn new(name: impl Into<String>, steps: usize, channels: usize, window: usize, log_gamma: bool) -> Result<Self> {
        if steps == 0 || channels == 0 {
            return invalid("TSBN needs T >= 1 and C >= 1");
        }
        if window == 0 || window > steps {
            return invalid(format!("window {window} must satisfy 1 <= w <= T = {steps}"));
        }
        let shape = [steps, channels];
        let gamma = if log_gamma {
            Gamma::Log(Param::new(Tensor::zeros(&shape)))
        } else {
            Gamma::Direct(Param::new(Tensor::ones(&shape)))
        };
        Ok(TsbnLayer {
            name: name.into(),
            steps,
            channels,
            window,
            policy: WindowPolicy::default(),
            gamma,
            beta: Param::new(Tensor::zeros(&shape)),
            running_mu: Tensor::zeros(&shape),
            running_var: Tensor::ones(&shape),
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
            batches_seen: 0,
        })
    }

    pub fn with_policy(mut self, policy: WindowPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_eps(mut self, eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return invalid(format!("eps must be positive, got {eps}"));
        }
        self.eps = eps;
        Ok(self)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn policy(&self) -> WindowPolicy {
        self.policy
    }

    pub fn is_log_gamma(&self) -> bool {
        matches!(self.gamma, Gamma::Log(_))
    }

    pub fn batches_seen(&self) -> u64 {
        self.batches_seen
    }

    pub fn is_populated(&self) -> bool {
        self.batches_seen > 0
    }

    pub fn running_mu(&self) -> &Tensor<S> {
        &self.running_mu
    }

    pub fn running_var(&self) -> &Tensor<S> {
        &self.running_var
    }

    /// Effective gamma values, `exp` applied for the log parameterization.
    pub fn gamma_values(&self) -> Tensor<S> {
        match &self.gamma {
            Gamma::Direct(p) => p.value.clone(),
            Gamma::Log(p) => Tensor::from_fn(p.value.shape(), |i| S::cast(p.value.data()[i].wide().exp())),
        }
    }

    fn check_param_shape(&self, t: &Tensor<S>, what: &str) -> Result<()> {
        if t.shape() != [self.steps, self.channels] {
            return shape_err(format!(
                "{what} for `{}` must be [{}, {}], got {:?}",
                self.name,
                self.steps,
                self.channels,
                t.shape()
            ));
        }
        Ok(())
    }

    pub fn set_gamma(&mut self, values: Tensor<S>) -> Result<()> {
        self.check_param_shape(&values, "gamma")?;
        match &mut self.gamma {
            Gamma::Direct(p) => p.value = values,
            Gamma::Log(p) => {
                if let Some(i) = values.data().iter().position(|v| v.wide() <= 0.0) {
                    return Err(Error::NonPositiveGamma {
                        layer: self.name.clone(),
                        t: i / self.channels,
                        c: i % self.channels,
                        value: values.data()[i].wide(),
                    });
                }
                p.value = Tensor::from_fn(values.shape(), |i| S::cast(values.data()[i].wide().ln()));
            }
        }
        Ok(())
    }

    pub fn set_beta(&mut self, values: Tensor<S>) -> Result<()> {
        self.check_param_shape(&values, "beta")?;
        self.beta.value = values;
        Ok(())
    }

    /// Overwrite the running statistics and mark them populated.
    pub fn set_running_stats(&mut self, mu: Tensor<S>, var: Tensor<S>) -> Result<()> {
        self.check_param_shape(&mu, "running_mu")?;
        self.check_param_shape(&var, "running_var")?;
        if var.data().iter().any(|v| v.wide() < 0.0) {
            return invalid("running variance must be non-negative");
        }
        self.running_mu = mu;
        self.running_var = var;
        self.batches_seen = self.batches_seen.max(1);
        Ok(())
    }

    pub(crate) fn set_batches_seen(&mut self, n: u64) {
        self.batches_seen = n;
    }

    /// Stored tensors by suffix: raw gamma (or log-gamma), beta, running
    /// mean, running variance.
    pub(crate) fn state_mut(&mut self) -> [(&'static str, &mut Tensor<S>); 4] {
        let gamma = match &mut self.gamma {
            Gamma::Direct(p) => ("gamma", &mut p.value),
            Gamma::Log(p) => ("log_gamma", &mut p.value),
        };
        [
            gamma,
            ("beta", &mut self.beta.value),
            ("running_mu", &mut self.running_mu),
            ("running_var", &mut self.running_var),
        ]
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        match &mut self.gamma {
            Gamma::Direct(p) | Gamma::Log(p) => f(p),
        }
        f(&mut self.beta);
    }

    pub fn trainable_count(&self) -> usize {
        2 * self.steps * self.channels
    }

    /// gamma, beta, running mean and running variance.
    pub fn stored_floats(&self) -> usize {
        4 * self.steps * self.channels
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 {
            return shape_err(format!("TSBN `{}` expects [T, B, C, H, W], got {shape:?}", self.name));
        }
        if shape[0] != self.steps || shape[2] != self.channels {
            return shape_err(format!(
                "TSBN `{}` configured for T={}, C={} but got {shape:?}",
                self.name, self.steps, self.channels
            ));
        }
        Ok(())
    }

    fn update_running(&mut self, mu: &[f64], var: &[f64]) {
        let m = self.momentum;
        for (r, &s) in self.running_mu.data_mut().iter_mut().zip(mu) {
            *r = S::cast((1.0 - m) * r.wide() + m * s);
        }
        for (r, &s) in self.running_var.data_mut().iter_mut().zip(var) {
            *r = S::cast((1.0 - m) * r.wide() + m * s);
        }
        self.batches_seen += 1;
    }

    pub fn cast<T: Scalar>(&self) -> TsbnLayer<T> {
        TsbnLayer {
            name: self.name.clone(),
            steps: self.steps,
            channels: self.channels,
            window: self.window,
            policy: self.policy,
            gamma: match &self.gamma {
                Gamma::Direct(p) => Gamma::Direct(p.cast()),
                Gamma::Log(p) => Gamma::Log(p.cast()),
            },
            beta: self.beta.cast(),
            running_mu: self.running_mu.cast(),
            running_var: self.running_var.cast(),
            momentum: self.momentum,
            eps: self.eps,
            batches_seen: self.batches_seen,
        }
    }
}

struct Layout {
    steps: usize,
    batch: usize,
    channels: usize,
    plane: usize,
}

impl Layout {
    fn of(shape: &[usize]) -> Self {
        Layout {
            steps: shape[0],
            batch: shape[1],
            channels: shape[2],
            plane: shape[3] * shape[4],
        }
    }

    #[inline]
    fn offset(&self, t: usize, b: usize, c: usize) -> usize {
        ((t * self.batch + b) * self.channels + c) * self.plane
    }
}

/// Windowed `(mean, biased variance)` per `(t, c)`, flattened `[T * C]`.
fn all_window_stats<S: Scalar>(x: &Tensor<S>, w: usize, policy: WindowPolicy) -> (Vec<f64>, Vec<f64>) {
    let l = Layout::of(x.shape());
    let d = x.data();
    let mut plane_sum = vec![0.0f64; l.steps * l.channels];
    for t in 0..l.steps {
        for b in 0..l.batch {
            for c in 0..l.channels {
                let o = l.offset(t, b, c);
                plane_sum[t * l.channels + c] += d[o..o + l.plane].iter().map(|v| v.wide()).sum::<f64>();
            }
        }
    }
    let mut mu = vec![0.0f64; l.steps * l.channels];
    let mut var = vec![0.0f64; l.steps * l.channels];
    for t in 0..l.steps {
        let (s, e) = window_bounds(t, w, l.steps, policy);
        let count = ((e - s + 1) * l.batch * l.plane) as f64;
        for c in 0..l.channels {
            let m = (s..=e).map(|tau| plane_sum[tau * l.channels + c]).sum::<f64>() / count;
            let mut acc = 0.0;
            for tau in s..=e {
                for b in 0..l.batch {
                    let o = l.offset(tau, b, c);
                    for v in &d[o..o + l.plane] {
                        let dv = v.wide() - m;
                        acc += dv * dv;
                    }
                }
            }
            mu[t * l.channels + c] = m;
            var[t * l.channels + c] = acc / count;
        }
    }
    (mu, var)
}

/// Per-channel mean and biased variance over the window for timestep `t`.
pub fn tsbn_window_stats<S: Scalar>(
    x: &Tensor<S>,
    t: usize,
    w: usize,
    policy: WindowPolicy,
) -> Result<(Tensor<S>, Tensor<S>)> {
    if x.rank() != 5 {
        return shape_err(format!("expected [T, B, C, H, W], got {:?}", x.shape()));
    }
    let (steps, channels) = (x.shape()[0], x.shape()[2]);
    if t >= steps {
        return invalid(format!("timestep {t} out of range for T = {steps}"));
    }
    if w == 0 || w > steps {
        return invalid(format!("window {w} must satisfy 1 <= w <= T = {steps}"));
    }
    let (mu, var) = all_window_stats(x, w, policy);
    let r = t * channels..(t + 1) * channels;
    Ok((
        Tensor::from_vec_unchecked(&[channels], mu[r.clone()].iter().map(|&v| S::cast(v)).collect())?,
        Tensor::from_vec_unchecked(&[channels], var[r].iter().map(|&v| S::cast(v)).collect())?,
    ))
}

/// `gamma * (x - mu) / sqrt(var + eps) + beta` for every element, with the
/// statistics indexed by `(t, c)`.
fn normalize<S: Scalar>(x: &Tensor<S>, mu: &[f64], var: &[f64], gamma: &[S], beta: &[S], eps: f64) -> Tensor<S> {
    let l = Layout::of(x.shape());
    let d = x.data();
    let mut out = vec![S::ZERO; d.len()];
    for t in 0..l.steps {
        for b in 0..l.batch {
            for c in 0..l.channels {
                let k = t * l.channels + c;
                let scale = gamma[k].wide() / (var[k] + eps).sqrt();
                let (m, sh) = (mu[k], beta[k].wide());
                let o = l.offset(t, b, c);
                for i in o..o + l.plane {
                    out[i] = S::cast(scale * (d[i].wide() - m) + sh);
                }
            }
        }
    }
    Tensor::from_vec_unchecked(x.shape(), out).expect("same shape as input")
}

struct TsbnRule {
    window: usize,
    policy: WindowPolicy,
    eps: f64,
    mu: Vec<f64>,
    var: Vec<f64>,
}

impl<S: Scalar> BackwardRule<S> for TsbnRule {
    fn backward(&self, ctx: &BackwardCtx<'_, S>) -> Result<Vec<Option<Vec<S>>>> {
        let x = ctx.input(0);
        let gamma = ctx.input(1).data();
        let dy = ctx.grad_output();
        let l = Layout::of(x.shape());
        let d = x.data();
        let mut dx = vec![0.0f64; d.len()];
        let mut dgamma = vec![0.0f64; l.steps * l.channels];
        let mut dbeta = vec![0.0f64; l.steps * l.channels];

        for t in 0..l.steps {
            let (s, e) = window_bounds(t, self.window, l.steps, self.policy);
            let count = ((e - s + 1) * l.batch * l.plane) as f64;
            for c in 0..l.channels {
                let k = t * l.channels + c;
                let (m, g) = (self.mu[k], gamma[k].wide());
                let sd = (self.var[k] + self.eps).sqrt();
                // Sums over the elements produced at timestep t.
                let (mut sum_dy, mut sum_dyx, mut sum_dyc) = (0.0, 0.0, 0.0);
                for b in 0..l.batch {
                    let o = l.offset(t, b, c);
                    for i in o..o + l.plane {
                        let gy = dy[i].wide();
                        let centered = d[i].wide() - m;
                        sum_dy += gy;
                        sum_dyc += gy * centered;
                        sum_dyx += gy * centered / sd;
                        dx[i] += gy * g / sd;
                    }
                }
                dbeta[k] = sum_dy;
                dgamma[k] = sum_dyx;
                // Through mu and var, spread over the whole window.
                let dmu = -g * sum_dy / sd;
                let dvar = -0.5 * g * sum_dyc / (sd * sd * sd);
                for tau in s..=e {
                    for b in 0..l.batch {
                        let o = l.offset(tau, b, c);
                        for i in o..o + l.plane {
                            dx[i] += (dmu + dvar * 2.0 * (d[i].wide() - m)) / count;
                        }
                    }
                }
            }
        }
        let cast = |v: Vec<f64>| -> Vec<S> { v.into_iter().map(S::cast).collect() };
        Ok(vec![Some(cast(dx)), Some(cast(dgamma)), Some(cast(dbeta))])
    }
}

/// Training-mode forward on the tape. Uses window statistics of `x` and
/// updates the layer's running statistics.
pub fn tsbn_forward_train_op<S: Scalar>(tape: &mut Tape<S>, x: Var, layer: &mut TsbnLayer<S>) -> Result<Var> {
    layer.check_input(tape.shape(x))?;
    let gamma = match &mut layer.gamma {
        Gamma::Direct(p) => p.bind(tape),
        Gamma::Log(p) => {
            let lg = p.bind(tape);
            tape.exp(lg)?
        }
    };
    let beta = layer.beta.bind(tape);
    let (mu, var) = all_window_stats(tape.value(x), layer.window, layer.policy);
    let out = normalize(
        tape.value(x),
        &mu,
        &var,
        tape.value(gamma).data(),
        tape.value(beta).data(),
        layer.eps,
    );
    layer.update_running(&mu, &var);
    let rule = TsbnRule {
        window: layer.window,
        policy: layer.policy,
        eps: layer.eps,
        mu,
        var,
    };
    Ok(tape.custom(&[x, gamma, beta], out, Box::new(rule)))
}

/// Training-mode forward without recording gradients.
pub fn tsbn_forward_train<S: Scalar>(x: &Tensor<S>, layer: &mut TsbnLayer<S>) -> Result<Tensor<S>> {
    let mut tape = Tape::no_grad();
    let xv = tape.constant(x.clone());
    let y = tsbn_forward_train_op(&mut tape, xv, layer)?;
    Ok(tape.value(y).clone())
}

/// Inference-mode forward with running statistics. Read-only.
pub fn tsbn_forward_infer<S: Scalar>(x: &Tensor<S>, layer: &TsbnLayer<S>) -> Result<Tensor<S>> {
    layer.check_input(x.shape())?;
    if !layer.is_populated() {
        return Err(Error::StatsUnpopulated(layer.name.clone()));
    }
    let mu = layer.running_mu.to_f64_vec();
    let var = layer.running_var.to_f64_vec();
    Ok(normalize(
        x,
        &mu,
        &var,
        layer.gamma_values().data(),
        layer.beta.value.data(),
        layer.eps,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-2.0..3.0))
    }

    #[test]
    fn window_bounds_by_policy() {
        use WindowPolicy::*;
        assert_eq!(window_bounds(0, 3, 4, Causal), (0, 0));
        assert_eq!(window_bounds(3, 3, 4, Causal), (1, 3));
        assert_eq!(window_bounds(0, 3, 4, Shifted), (0, 2));
        assert_eq!(window_bounds(1, 3, 4, Shifted), (0, 2));
        assert_eq!(window_bounds(3, 3, 4, Shifted), (1, 3));
        for t in 0..4 {
            assert_eq!(window_bounds(t, 4, 4, Shifted), (0, 3));
            assert_eq!(window_bounds(t, 1, 4, Shifted), (t, t));
            assert_eq!(window_bounds(t, 1, 4, Causal), (t, t));
        }
    }

    #[test]
    fn window_stats_examples() {
        let x = random_input(&[4, 2, 3, 2, 2], 1);
        // Causal window at t = 0 sees only x[0], whatever w is.
        for w in 1..=4 {
            let (mu, var) = tsbn_window_stats(&x, 0, w, WindowPolicy::Causal).unwrap();
            let (mu1, var1) = tsbn_window_stats(&x, 0, 1, WindowPolicy::Causal).unwrap();
            assert_eq!(mu, mu1);
            assert_eq!(var, var1);
        }
        // x[0] = 0, x[1] = 2 -> window mean 1 at t = 1, w = 2.
        let mut y = Tensor::<f64>::zeros(&[2, 1, 1, 2, 2]);
        for i in 4..8 {
            y.data_mut()[i] = 2.0;
        }
        let (mu, var) = tsbn_window_stats(&y, 1, 2, WindowPolicy::Causal).unwrap();
        assert_eq!(mu.data(), &[1.0]);
        assert_eq!(var.data(), &[1.0]);
        assert!(tsbn_window_stats(&y, 2, 1, WindowPolicy::Causal).is_err());
        assert!(tsbn_window_stats(&y, 0, 3, WindowPolicy::Causal).is_err());
    }

    #[test]
    fn window_larger_than_sequence_is_rejected() {
        assert!(TsbnLayer::<f64>::new("n", 4, 3, 5, false).is_err());
        assert!(TsbnLayer::<f64>::new("n", 4, 3, 0, false).is_err());
    }

    #[test]
    fn full_window_normalizes_whole_sequence() {
        let x = random_input(&[4, 3, 2, 3, 3], 7);
        let mut layer = TsbnLayer::<f64>::new("n", 4, 2, 4, false).unwrap();
        let y = tsbn_forward_train(&x, &mut layer).unwrap();
        let (_, var_x) = crate::tensor::ops::mean_var_wide(&x, &[0, 1, 3, 4]).unwrap();
        let (mean_y, var_y) = crate::tensor::ops::mean_var_wide(&y, &[0, 1, 3, 4]).unwrap();
        for c in 0..2 {
            assert!(mean_y[c].abs() < 1e-6);
            let expect = var_x[c] / (var_x[c] + layer.eps);
            assert!((var_y[c] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn unit_window_isolates_timesteps() {
        let x = random_input(&[4, 2, 2, 2, 2], 3);
        let mut layer = TsbnLayer::<f64>::new("n", 4, 2, 1, false).unwrap();
        let y = tsbn_forward_train(&x, &mut layer).unwrap();
        // Swap timesteps 0 and 3; output at t = 1 and 2 must not move.
        let per = x.numel() / 4;
        let mut xp = x.clone();
        for i in 0..per {
            xp.data_mut().swap(i, 3 * per + i);
        }
        let yp = tsbn_forward_train(&xp, &mut layer).unwrap();
        assert_eq!(&y.data()[per..3 * per], &yp.data()[per..3 * per]);
    }

    #[test]
    fn constant_window_yields_beta() {
        let x = Tensor::<f64>::full(&[3, 2, 1, 2, 2], 4.25);
        let mut layer = TsbnLayer::<f64>::new("n", 3, 1, 2, false).unwrap();
        layer.set_gamma(Tensor::full(&[3, 1], 2.0)).unwrap();
        layer.set_beta(Tensor::full(&[3, 1], 0.5)).unwrap();
        let y = tsbn_forward_train(&x, &mut layer).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn recomputed_z_scores_match_training_output() {
        let x = random_input(&[4, 2, 3, 2, 2], 11);
        for policy in [WindowPolicy::Shifted, WindowPolicy::Causal] {
            let mut layer = TsbnLayer::<f64>::new("n", 4, 3, 2, false).unwrap().with_policy(policy);
            let y = tsbn_forward_train(&x, &mut layer).unwrap();
            for t in 0..4 {
                let (mu, var) = tsbn_window_stats(&x, t, 2, policy).unwrap();
                for b in 0..2 {
                    for c in 0..3 {
                        for i in 0..4 {
                            let idx = [t, b, c, i / 2, i % 2];
                            let z = (x.get(&idx) - mu.data()[c]) / (var.data()[c] + layer.eps).sqrt();
                            assert!((y.get(&idx) - z).abs() < 1e-6);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn inference_requires_statistics() {
        let layer = TsbnLayer::<f64>::new("enc", 2, 1, 1, false).unwrap();
        let x = Tensor::<f64>::zeros(&[2, 1, 1, 1, 1]);
        assert!(matches!(tsbn_forward_infer(&x, &layer), Err(Error::StatsUnpopulated(n)) if n == "enc"));
    }

    #[test]
    fn inference_with_unit_stats_is_identity() {
        let mut layer = TsbnLayer::<f64>::new("n", 2, 3, 2, false)
            .unwrap()
            .with_eps(1e-12)
            .unwrap();
        layer
            .set_running_stats(Tensor::zeros(&[2, 3]), Tensor::ones(&[2, 3]))
            .unwrap();
        let x = random_input(&[2, 1, 3, 2, 2], 5);
        let y = tsbn_forward_infer(&x, &layer).unwrap();
        assert!(crate::tensor::max_rel_error(&y, &x) < 1e-6);
        // Batch of one is fine at inference, and repeated calls agree bitwise.
        assert_eq!(y, tsbn_forward_infer(&x, &layer).unwrap());
    }

    #[test]
    fn running_stats_converge_geometrically() {
        let x = random_input(&[3, 4, 2, 2, 2], 9);
        let mut layer = TsbnLayer::<f64>::new("n", 3, 2, 2, false).unwrap();
        let (mu, var) = all_window_stats(&x, 2, WindowPolicy::Shifted);
        let gap0: Vec<f64> = layer.running_mu().data().iter().zip(&mu).map(|(r, s)| r - s).collect();
        let vgap0: Vec<f64> = layer
            .running_var()
            .data()
            .iter()
            .zip(&var)
            .map(|(r, s)| r - s)
            .collect();
        for n in 1..=25 {
            tsbn_forward_train(&x, &mut layer).unwrap();
            let f = (1.0 - layer.momentum).powi(n);
            for k in 0..mu.len() {
                let gap = layer.running_mu().data()[k] - mu[k];
                assert!((gap - f * gap0[k]).abs() < 1e-12 * (1.0 + gap0[k].abs()));
                let vgap = layer.running_var().data()[k] - var[k];
                assert!((vgap - f * vgap0[k]).abs() < 1e-12 * (1.0 + vgap0[k].abs()));
            }
        }
    }

    #[test]
    fn inference_matches_training_after_convergence() {
        let x = random_input(&[3, 4, 2, 3, 3], 21);
        let mut layer = TsbnLayer::<f64>::new("n", 3, 2, 2, true).unwrap();
        layer.set_beta(Tensor::full(&[3, 2], 0.3)).unwrap();
        let mut y_train = None;
        for _ in 0..150 {
            y_train = Some(tsbn_forward_train(&x, &mut layer).unwrap());
        }
        let y_inf = tsbn_forward_infer(&x, &layer).unwrap();
        let diff = y_inf
            .data()
            .iter()
            .zip(y_train.unwrap().data())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff < 1e-3, "diff = {diff}");
    }

    #[test]
    fn log_gamma_rejects_non_positive() {
        let mut layer = TsbnLayer::<f64>::new("q", 2, 2, 1, true).unwrap();
        let mut g = Tensor::ones(&[2, 2]);
        g.set(&[1, 0], -0.5);
        match layer.set_gamma(g) {
            Err(Error::NonPositiveGamma { t: 1, c: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    fn check_tsbn_gradients(seed: u64, policy: WindowPolicy, w: usize) {
        let shape = [3, 2, 2, 2, 2];
        let x = random_input(&shape, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let weights = Tensor::<f64>::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));
        let gamma = Tensor::<f64>::from_fn(&[3, 2], |_| rng.gen_range(0.5..1.5));
        let beta = Tensor::<f64>::from_fn(&[3, 2], |_| rng.gen_range(-0.5..0.5));

        let make = |g: &Tensor<f64>, b: &Tensor<f64>| {
            let mut l = TsbnLayer::<f64>::new("g", 3, 2, w, false).unwrap().with_policy(policy);
            l.set_gamma(g.clone()).unwrap();
            l.set_beta(b.clone()).unwrap();
            l
        };
        let weighted = |t: &mut Tape<f64>, y: Var| -> Result<Var> {
            let r = t.constant(weights.clone());
            let p = t.mul(y, r)?;
            Ok(t.sum_all(p))
        };

        let err_x = grad_check(
            |t, xv| {
                let mut l = make(&gamma, &beta);
                let y = tsbn_forward_train_op(t, xv, &mut l)?;
                weighted(t, y)
            },
            &x,
            1e-3,
        )
        .unwrap();
        let err_g = grad_check(
            |t, gv| {
                let mut l = make(&gamma, &beta);
                let xv = t.constant(x.clone());
                let y = custom_affine(t, xv, gv, None, &mut l)?;
                weighted(t, y)
            },
            &gamma,
            1e-3,
        )
        .unwrap();
        let err_b = grad_check(
            |t, bv| {
                let mut l = make(&gamma, &beta);
                let xv = t.constant(x.clone());
                let y = custom_affine(t, xv, bv, Some(()), &mut l)?;
                weighted(t, y)
            },
            &beta,
            1e-3,
        )
        .unwrap();
        for (what, err) in [("x", err_x), ("gamma", err_g), ("beta", err_b)] {
            assert!(err < 1e-3, "seed {seed} {what}: {err}");
        }
    }

    // Route a tape variable into gamma (or beta) so grad_check can perturb it.
    fn custom_affine(
        t: &mut Tape<f64>,
        x: Var,
        p: Var,
        is_beta: Option<()>,
        layer: &mut TsbnLayer<f64>,
    ) -> Result<Var> {
        let (gamma, beta) = if is_beta.is_some() {
            (t.constant(layer.gamma_values()), p)
        } else {
            (p, t.constant(layer.beta.value.clone()))
        };
        let (mu, var) = all_window_stats(t.value(x), layer.window, layer.policy);
        let out = normalize(
            t.value(x),
            &mu,
            &var,
            t.value(gamma).data(),
            t.value(beta).data(),
            layer.eps,
        );
        let rule = TsbnRule {
            window: layer.window,
            policy: layer.policy,
            eps: layer.eps,
            mu,
            var,
        };
        Ok(t.custom(&[x, gamma, beta], out, Box::new(rule)))
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            check_tsbn_gradients(seed, WindowPolicy::Shifted, 2);
        }
        check_tsbn_gradients(42, WindowPolicy::Causal, 2);
        check_tsbn_gradients(43, WindowPolicy::Shifted, 3);
        check_tsbn_gradients(44, WindowPolicy::Shifted, 1);
    }

    #[test]
    fn log_gamma_gradient_flows_through_exp() {
        let x = random_input(&[2, 2, 1, 2, 2], 4);
        let mut layer = TsbnLayer::<f64>::new("q", 2, 1, 2, true).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = tsbn_forward_train_op(&mut tape, xv, &mut layer).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let l = tape.sum_all(sq);
        tape.backward(l).unwrap();
        let g = match &layer.gamma {
            Gamma::Log(p) => p.grad(&tape).unwrap().to_vec(),
            Gamma::Direct(_) => unreachable!(),
        };
        // d/dlog(g) sum(y^2) = 2 sum(y * xhat) * g = 2 * count * var/(var+eps) at g = 1.
        assert!(g.iter().all(|&v| v > 0.0));
    }
}
