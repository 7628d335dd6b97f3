//! Multi-branch depthwise block and its re-parameterization into one
//! per-timestep depthwise convolution.

use rand::Rng;

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::ops::conv2d_dw;
use crate::tensor::{Param, Scalar, Tape, Tensor, Var};
use crate::tsbn::{tsbn_forward_infer, tsbn_forward_train_op, TsbnLayer, WindowPolicy};
use crate::Mode;

/// Fused kernel extent.
pub const TARGET_KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchKind {
    Identity,
    Conv1x1,
    Conv3x3,
}

impl BranchKind {
    pub fn kernel_size(self) -> usize {
        match self {
            BranchKind::Identity | BranchKind::Conv1x1 => 1,
            BranchKind::Conv3x3 => 3,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            BranchKind::Identity => "id",
            BranchKind::Conv1x1 => "k1",
            BranchKind::Conv3x3 => "k3",
        }
    }
}

/// Default branch line-up.
pub const STANDARD_BRANCHES: [BranchKind; 5] = [
    BranchKind::Identity,
    BranchKind::Conv1x1,
    BranchKind::Conv1x1,
    BranchKind::Conv3x3,
    BranchKind::Conv3x3,
];

#[derive(Clone, Debug)]
pub struct Branch<S: Scalar = f32> {
    pub kind: BranchKind,
    /// `[C, k, k]`. Frozen delta for the identity branch.
    pub kernel: Param<S>,
    pub tsbn: TsbnLayer<S>,
}

impl<S: Scalar> Branch<S> {
    pub fn identity(tsbn: TsbnLayer<S>) -> Self {
        let c = tsbn.channels();
        Branch {
            kind: BranchKind::Identity,
            kernel: Param::frozen(Tensor::ones(&[c, 1, 1])),
            tsbn,
        }
    }

    pub fn conv(kind: BranchKind, kernel: Tensor<S>, tsbn: TsbnLayer<S>) -> Self {
        Branch {
            kind,
            kernel: Param::new(kernel),
            tsbn,
        }
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.value.shape()[1]
    }
}

#[derive(Clone, Debug)]
pub struct BranchBank<S: Scalar = f32> {
    pub name: String,
    pub branches: Vec<Branch<S>>,
}

impl<S: Scalar> BranchBank<S> {
    /// Check the structural invariants and build.
    pub fn from_branches(name: impl Into<String>, branches: Vec<Branch<S>>) -> Result<Self> {
        let name = name.into();
        let Some(first) = branches.first() else {
            return invalid(format!("bank `{name}` has no branches"));
        };
        let (steps, channels, window) = (first.tsbn.steps(), first.tsbn.channels(), first.tsbn.window());
        for (i, b) in branches.iter().enumerate() {
            let ks = b.kernel.value.shape();
            if ks.len() != 3 || ks[1] != ks[2] {
                return shape_err(format!(
                    "bank `{name}` branch {i}: kernel must be [C, k, k], got {ks:?}"
                ));
            }
            if ks[0] != channels || b.tsbn.channels() != channels {
                return shape_err(format!(
                    "bank `{name}` branch {i}: channel count {} / {} differs from {channels}",
                    ks[0],
                    b.tsbn.channels()
                ));
            }
            if ks[1] % 2 == 0 || ks[1] > TARGET_KERNEL {
                return invalid(format!(
                    "bank `{name}` branch {i}: kernel size {} must be odd and <= {TARGET_KERNEL}",
                    ks[1]
                ));
            }
            if b.tsbn.steps() != steps || b.tsbn.window() != window {
                return invalid(format!("bank `{name}` branch {i}: TSBN T or w differs from branch 0"));
            }
            if b.kind == BranchKind::Identity
                && (b.kernel.is_trainable() || ks[1] != 1 || b.kernel.value.data().iter().any(|&v| v != S::ONE))
            {
                return invalid(format!(
                    "bank `{name}` branch {i}: identity kernel must be a frozen unit delta"
                ));
            }
        }
        Ok(BranchBank { name, branches })
    }

    /// The five-branch bank with uniform `±sqrt(6 / k²)` kernels.
    pub fn standard<R: Rng>(
        name: &str,
        steps: usize,
        channels: usize,
        window: usize,
        policy: WindowPolicy,
        rng: &mut R,
    ) -> Result<Self> {
        let mut branches = Vec::with_capacity(STANDARD_BRANCHES.len());
        for (i, kind) in STANDARD_BRANCHES.into_iter().enumerate() {
            let tsbn = TsbnLayer::new(format!("{name}.b{i}.tsbn"), steps, channels, window, false)?.with_policy(policy);
            if kind == BranchKind::Identity {
                branches.push(Branch::identity(tsbn));
            } else {
                let k = kind.kernel_size();
                let bound = (6.0 / (k * k) as f64).sqrt();
                let kernel = Tensor::from_fn(&[channels, k, k], |_| S::cast(rng.gen_range(-bound..bound)));
                branches.push(Branch::conv(kind, kernel, tsbn));
            }
        }
        Self::from_branches(name, branches)
    }

    pub fn channels(&self) -> usize {
        self.branches[0].tsbn.channels()
    }

    pub fn steps(&self) -> usize {
        self.branches[0].tsbn.steps()
    }

    pub fn is_populated(&self) -> bool {
        self.branches.iter().all(|b| b.tsbn.is_populated())
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        for b in &mut self.branches {
            if b.kernel.is_trainable() {
                f(&mut b.kernel);
            }
            b.tsbn.visit_params_mut(f);
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.branches
            .iter()
            .map(|b| {
                let k = if b.kernel.is_trainable() {
                    b.kernel.value.numel()
                } else {
                    0
                };
                k + b.tsbn.trainable_count()
            })
            .sum()
    }

    /// Floats a checkpoint holds for this bank. The identity delta is
    /// implied by the branch kind and not stored.
    pub fn stored_floats(&self) -> usize {
        self.branches
            .iter()
            .map(|b| {
                let k = if b.kind == BranchKind::Identity {
                    0
                } else {
                    b.kernel.value.numel()
                };
                k + b.tsbn.stored_floats()
            })
            .sum()
    }

    pub fn cast<T: Scalar>(&self) -> BranchBank<T> {
        BranchBank {
            name: self.name.clone(),
            branches: self
                .branches
                .iter()
                .map(|b| Branch {
                    kind: b.kind,
                    kernel: b.kernel.cast(),
                    tsbn: b.tsbn.cast(),
                })
                .collect(),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 || shape[2] != self.channels() || shape[0] != self.steps() {
            return shape_err(format!(
                "bank `{}` expects [{}, B, {}, H, W], got {shape:?}",
                self.name,
                self.steps(),
                self.channels()
            ));
        }
        Ok(())
    }
}

/// Sum over branches of TSBN(depthwise conv). Train mode uses window
/// statistics and updates each branch's running statistics.
pub fn branch_forward<S: Scalar>(x: &Tensor<S>, bank: &mut BranchBank<S>, mode: Mode) -> Result<Tensor<S>> {
    match mode {
        Mode::Train => {
            let mut tape = Tape::no_grad();
            let xv = tape.constant(x.clone());
            let y = branch_forward_op(&mut tape, xv, bank)?;
            Ok(tape.value(y).clone())
        }
        Mode::Infer => branch_forward_infer(x, bank),
    }
}

/// Inference-mode bank forward; does not touch the bank.
pub fn branch_forward_infer<S: Scalar>(x: &Tensor<S>, bank: &BranchBank<S>) -> Result<Tensor<S>> {
    bank.check_input(x.shape())?;
    let mut acc: Option<Vec<f64>> = None;
    for b in &bank.branches {
        let y = tsbn_forward_infer(&conv2d_dw(x, &b.kernel.value)?, &b.tsbn)?;
        match &mut acc {
            None => acc = Some(y.to_f64_vec()),
            Some(a) => a.iter_mut().zip(y.data()).for_each(|(a, v)| *a += v.wide()),
        }
    }
    let acc = acc.expect("bank has at least one branch");
    Tensor::from_vec_unchecked(x.shape(), acc.into_iter().map(S::cast).collect())
}

/// Training-mode bank forward on the tape.
pub fn branch_forward_op<S: Scalar>(tape: &mut Tape<S>, x: Var, bank: &mut BranchBank<S>) -> Result<Var> {
    bank.check_input(tape.shape(x))?;
    let mut sum: Option<Var> = None;
    for b in &mut bank.branches {
        let k = b.kernel.bind(tape);
        let conv = tape.conv2d_dw(x, k)?;
        let y = tsbn_forward_train_op(tape, conv, &mut b.tsbn)?;
        sum = Some(match sum {
            None => y,
            Some(s) => tape.add(s, y)?,
        });
    }
    Ok(sum.expect("bank has at least one branch"))
}

/// Center a `[C, k, k]` kernel in a `[C, K, K]` zero field.
pub fn pad_kernel<S: Scalar>(kernel: &Tensor<S>, target: usize) -> Result<Tensor<S>> {
    let ks = kernel.shape();
    if ks.len() != 3 || ks[1] != ks[2] {
        return shape_err(format!("kernel must be [C, k, k], got {ks:?}"));
    }
    let k = ks[1];
    if k % 2 == 0 || target % 2 == 0 {
        return invalid(format!("kernel sizes must be odd, got {k} -> {target}"));
    }
    if k > target {
        return invalid(format!("cannot pad a {k}x{k} kernel down to {target}x{target}"));
    }
    let off = (target - k) / 2;
    let mut out = Tensor::zeros(&[ks[0], target, target]);
    for c in 0..ks[0] {
        for u in 0..k {
            for v in 0..k {
                out.set(&[c, u + off, v + off], kernel.get(&[c, u, v]));
            }
        }
    }
    Ok(out)
}

/// Single depthwise conv with a kernel and bias per timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedConv<S: Scalar = f32> {
    pub name: String,
    /// `[T, C, K, K]`
    pub kernel: Tensor<S>,
    /// `[T, C]`
    pub bias: Tensor<S>,
}

impl<S: Scalar> FusedConv<S> {
    pub fn new(name: impl Into<String>, kernel: Tensor<S>, bias: Tensor<S>) -> Result<Self> {
        let (ks, bs) = (kernel.shape(), bias.shape());
        if ks.len() != 4 || bs.len() != 2 || ks[0] != bs[0] || ks[1] != bs[1] || ks[2] != ks[3] || ks[2] % 2 == 0 {
            return shape_err(format!("fused kernel {ks:?} and bias {bs:?} are inconsistent"));
        }
        Ok(FusedConv {
            name: name.into(),
            kernel,
            bias,
        })
    }

    pub fn steps(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape()[2]
    }

    /// `T * C * (K^2 + 1)`
    pub fn stored_floats(&self) -> usize {
        self.kernel.numel() + self.bias.numel()
    }

    pub fn cast<T: Scalar>(&self) -> FusedConv<T> {
        FusedConv {
            name: self.name.clone(),
            kernel: self.kernel.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// Collapse the bank into one conv per timestep using running statistics.
/// Arithmetic runs in f64 before rounding to `S`.
pub fn fuse<S: Scalar>(bank: &BranchBank<S>) -> Result<FusedConv<S>> {
    if let Some(b) = bank.branches.iter().find(|b| !b.tsbn.is_populated()) {
        return Err(Error::StatsUnpopulated(b.tsbn.name.clone()));
    }
    let (steps, channels, kk) = (bank.steps(), bank.channels(), TARGET_KERNEL);
    let plane = kk * kk;
    let mut kernel = vec![0.0f64; steps * channels * plane];
    let mut bias = vec![0.0f64; steps * channels];
    for b in &bank.branches {
        let padded = pad_kernel(&b.kernel.value, kk)?.to_f64_vec();
        let gamma = b.tsbn.gamma_values();
        let (g, beta) = (gamma.data(), b.tsbn.beta.value.data());
        let (mu, var) = (b.tsbn.running_mu().data(), b.tsbn.running_var().data());
        for t in 0..steps {
            for c in 0..channels {
                let k = t * channels + c;
                let scale = g[k].wide() / (var[k].wide() + b.tsbn.eps).sqrt();
                let dst = &mut kernel[k * plane..(k + 1) * plane];
                for (d, w) in dst.iter_mut().zip(&padded[c * plane..(c + 1) * plane]) {
                    *d += scale * w;
                }
                bias[k] += beta[k].wide() - scale * mu[k].wide();
            }
        }
    }
    FusedConv::new(
        format!("{}.fused", bank.name),
        Tensor::from_vec_unchecked(&[steps, channels, kk, kk], kernel.into_iter().map(S::cast).collect())?,
        Tensor::from_vec_unchecked(&[steps, channels], bias.into_iter().map(S::cast).collect())?,
    )
}

/// `conv2d_dw(x[t], kernel[t]) + bias[t]` for every timestep.
pub fn fused_forward<S: Scalar>(fc: &FusedConv<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    if x.rank() != 5 || x.shape()[2] != fc.channels() {
        return shape_err(format!(
            "fused conv `{}` expects [T, B, {}, H, W], got {:?}",
            fc.name,
            fc.channels(),
            x.shape()
        ));
    }
    if x.shape()[0] != fc.steps() {
        return shape_err(format!(
            "fused conv `{}` has T = {} but input has T = {}",
            fc.name,
            fc.steps(),
            x.shape()[0]
        ));
    }
    let c = fc.channels();
    let mut parts = Vec::with_capacity(fc.steps());
    for t in 0..fc.steps() {
        let mut y = conv2d_dw(&x.index_axis0(t)?, &fc.kernel.index_axis0(t)?)?;
        let plane = y.shape()[2] * y.shape()[3];
        let bias = &fc.bias.data()[t * c..(t + 1) * c];
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v = S::cast(v.wide() + bias[(i / plane) % c].wide());
        }
        parts.push(y);
    }
    Tensor::stack(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::max_rel_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn single_identity(steps: usize, channels: usize) -> BranchBank<f64> {
        let tsbn = TsbnLayer::new("n", steps, channels, 1, false)
            .unwrap()
            .with_eps(1e-12)
            .unwrap();
        BranchBank::from_branches("bank", vec![Branch::identity(tsbn)]).unwrap()
    }

    #[test]
    fn pad_kernel_centers() {
        let k = Tensor::<f64>::from_f64(&[2, 1, 1], &[3.0, -1.0]).unwrap();
        let p = pad_kernel(&k, 3).unwrap();
        assert_eq!(p.shape(), &[2, 3, 3]);
        assert_eq!(p.get(&[0, 1, 1]), 3.0);
        assert_eq!(p.get(&[1, 1, 1]), -1.0);
        assert_eq!(p.data().iter().filter(|&&v| v != 0.0).count(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let k3 = random(&[2, 3, 3], &mut rng);
        assert_eq!(pad_kernel(&k3, 3).unwrap(), k3);
        assert!(pad_kernel(&k3, 1).is_err());
    }

    #[test]
    fn padded_kernel_conv_matches_original() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 3, 5, 4], &mut rng);
        let k1 = random(&[3, 1, 1], &mut rng);
        let a = conv2d_dw(&x, &k1).unwrap();
        let b = conv2d_dw(&x, &pad_kernel(&k1, 3).unwrap()).unwrap();
        let diff = a
            .data()
            .iter()
            .zip(b.data())
            .fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
        assert!(diff < 1e-6);
    }

    #[test]
    fn identity_chain_is_identity() {
        let mut bank = single_identity(2, 3);
        bank.branches[0]
            .tsbn
            .set_running_stats(Tensor::zeros(&[2, 3]), Tensor::ones(&[2, 3]))
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[2, 2, 3, 4, 4], &mut rng);
        let y = branch_forward(&x, &mut bank, Mode::Infer).unwrap();
        assert!(y.data().iter().zip(x.data()).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn duplicated_branch_doubles_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let kernel = random(&[2, 3, 3], &mut rng);
        let mut tsbn = TsbnLayer::<f64>::new("n", 2, 2, 1, false).unwrap();
        tsbn.set_running_stats(random(&[2, 2], &mut rng), Tensor::full(&[2, 2], 0.7))
            .unwrap();
        let branch = Branch::conv(BranchKind::Conv3x3, kernel, tsbn);
        let one = BranchBank::from_branches("a", vec![branch.clone()]).unwrap();
        let two = BranchBank::from_branches("b", vec![branch.clone(), branch]).unwrap();
        let x = random(&[2, 1, 2, 3, 3], &mut rng);
        let y1 = branch_forward_infer(&x, &one).unwrap();
        let y2 = branch_forward_infer(&x, &two).unwrap();
        assert!(y1.data().iter().zip(y2.data()).all(|(a, b)| 2.0 * a == *b));
    }

    #[test]
    fn inconsistent_banks_are_rejected() {
        let t2 = TsbnLayer::<f64>::new("n", 2, 2, 1, false).unwrap();
        let t3 = TsbnLayer::<f64>::new("n", 2, 3, 1, false).unwrap();
        let k2 = Tensor::<f64>::ones(&[2, 3, 3]);
        let k3 = Tensor::<f64>::ones(&[3, 3, 3]);
        let bad = vec![
            Branch::conv(BranchKind::Conv3x3, k2.clone(), t2.clone()),
            Branch::conv(BranchKind::Conv3x3, k3, t3),
        ];
        assert!(BranchBank::from_branches("x", bad).is_err());
        let big = Branch::conv(BranchKind::Conv3x3, Tensor::ones(&[2, 5, 5]), t2.clone());
        assert!(BranchBank::from_branches("x", vec![big]).is_err());
        let w2 = TsbnLayer::<f64>::new("n", 2, 2, 2, false).unwrap();
        let mixed = vec![
            Branch::conv(BranchKind::Conv3x3, k2.clone(), t2),
            Branch::conv(BranchKind::Conv3x3, k2, w2),
        ];
        assert!(BranchBank::from_branches("x", mixed).is_err());
        assert!(BranchBank::<f64>::from_branches("x", vec![]).is_err());
    }

    #[test]
    fn fuse_identity_example() {
        let mut bank = single_identity(1, 1);
        let tsbn = &mut bank.branches[0].tsbn;
        tsbn.set_gamma(Tensor::full(&[1, 1], 2.0)).unwrap();
        tsbn.set_beta(Tensor::full(&[1, 1], 0.5)).unwrap();
        tsbn.set_running_stats(Tensor::full(&[1, 1], 0.3), Tensor::ones(&[1, 1]))
            .unwrap();
        let fc = fuse(&bank).unwrap();
        assert!((fc.kernel.get(&[0, 0, 1, 1]) - 2.0).abs() < 1e-9);
        assert!((fc.bias.get(&[0, 0]) + 0.1).abs() < 1e-9);
        assert_eq!(fc.kernel.data().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn fuse_rejects_unpopulated_stats() {
        let bank = single_identity(2, 2);
        assert!(matches!(fuse(&bank), Err(Error::StatsUnpopulated(_))));
    }

    #[test]
    fn zero_gammas_give_zero_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut bank = BranchBank::<f64>::standard("s", 2, 3, 1, WindowPolicy::Shifted, &mut rng).unwrap();
        let mut beta_sum = Tensor::<f64>::zeros(&[2, 3]);
        for b in &mut bank.branches {
            b.tsbn.set_gamma(Tensor::zeros(&[2, 3])).unwrap();
            let beta = random(&[2, 3], &mut rng);
            beta_sum = crate::tensor::ops::add(&beta_sum, &beta).unwrap();
            b.tsbn.set_beta(beta).unwrap();
            b.tsbn
                .set_running_stats(random(&[2, 3], &mut rng), Tensor::ones(&[2, 3]))
                .unwrap();
        }
        let fc = fuse(&bank).unwrap();
        assert!(fc.kernel.data().iter().all(|&v| v == 0.0));
        assert!(max_rel_error(&fc.bias, &beta_sum) < 1e-12);
        let x = random(&[2, 1, 3, 2, 2], &mut rng);
        let y = fused_forward(&fc, &x).unwrap();
        for t in 0..2 {
            for c in 0..3 {
                assert_eq!(y.get(&[t, 0, c, 1, 0]), fc.bias.get(&[t, c]));
            }
        }
    }

    #[test]
    fn fused_forward_rejects_step_mismatch() {
        let fc = FusedConv::<f64>::new("f", Tensor::zeros(&[2, 1, 3, 3]), Tensor::zeros(&[2, 1])).unwrap();
        assert!(fused_forward(&fc, &Tensor::zeros(&[3, 1, 1, 2, 2])).is_err());
    }

    #[test]
    fn fusion_reads_no_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut bank = BranchBank::<f64>::standard("s", 3, 2, 2, WindowPolicy::Shifted, &mut rng).unwrap();
        branch_forward(&random(&[3, 2, 2, 4, 4], &mut rng), &mut bank, Mode::Train).unwrap();
        let a = fuse(&bank).unwrap();
        let _ = branch_forward_infer(&random(&[3, 1, 2, 4, 4], &mut rng), &bank).unwrap();
        assert_eq!(a, fuse(&bank).unwrap());
    }

    #[test]
    fn parameter_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (t, c) = (4, 8);
        let bank = BranchBank::<f32>::standard("s", t, c, 2, WindowPolicy::Shifted, &mut rng).unwrap();
        let kernels = 2 * c + 2 * 9 * c;
        assert_eq!(bank.trainable_count(), kernels + 5 * 2 * t * c);
        assert_eq!(bank.stored_floats(), kernels + 5 * 4 * t * c);
        let mut populated = bank.clone();
        for b in &mut populated.branches {
            b.tsbn
                .set_running_stats(Tensor::zeros(&[t, c]), Tensor::ones(&[t, c]))
                .unwrap();
        }
        assert_eq!(fuse(&populated).unwrap().stored_floats(), t * c * (9 + 1));
    }
}
