//! The toy spiking transformer.
//!
//! Encoder: 3x3 conv (stride from config) -> norm -> LIF.
//! Each block, in order:
//!
//! ```text
//! u1 = bank(x)                      s1 = LIF(u1)
//! q, k, v = spike(norm(conv1x1(s1)))
//! a = LIF(attention(q, k, v))       r1 = u1 + norm(conv1x1(a))
//! s2 = LIF(r1)                      h = spike(norm(conv1x1(s2)))
//! r2 = r1 + norm(conv1x1(h))        out = LIF(r2)
//! ```
//!
//! `spike` is a stateless threshold unit; its norm is fold-eligible.
//! Head: mean over time and space, then a dense layer.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::attention::{from_heads, from_heads_op, spiking_attention, spiking_attention_op, to_heads, to_heads_op};
use super::config::RtformerConfig;
use crate::energy::{OpKind, OpRecord};
use crate::error::{shape_err, Error, Result};
use crate::fold::{fold_threshold, spike_folded, FoldedThreshold};
use crate::lif::{lif_sequence, lif_sequence_membrane, lif_sequence_op, threshold, threshold_op, LifParams};
use crate::spatial::{branch_forward_infer, branch_forward_op, fuse, fused_forward, BranchBank, BranchKind, FusedConv};
use crate::tensor::ops::{self, conv2d};
use crate::tensor::{Param, Scalar, Tape, Tensor, Var};
use crate::tsbn::{tsbn_forward_infer, tsbn_forward_train_op, TsbnLayer};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetMode {
    Train,
    Infer,
    Fused,
}

impl NetMode {
    pub fn name(self) -> &'static str {
        match self {
            NetMode::Train => "train",
            NetMode::Infer => "infer",
            NetMode::Fused => "fused",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv<S: Scalar = f32> {
    pub name: String,
    /// `[Cout, Cin, k, k]`
    pub weight: Param<S>,
    pub stride: usize,
}

impl<S: Scalar> Conv<S> {
    fn init<R: Rng>(name: String, cout: usize, cin: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (cin * k * k) as f64).sqrt();
        let w = Tensor::from_fn(&[cout, cin, k, k], |_| S::cast(rng.gen_range(-bound..bound)));
        Conv {
            name,
            weight: Param::new(w),
            stride,
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        conv2d(x, &self.weight.value, self.stride)
    }

    fn forward_op(&mut self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let w = self.weight.bind(tape);
        tape.conv2d(x, w, self.stride)
    }

    /// Dense connections per sample and timestep.
    fn connections(&self, in_shape: &[usize]) -> u64 {
        let s = self.weight.value.shape();
        let r = in_shape.len();
        let ho = ops::conv_out_extent(in_shape[r - 2], s[2], self.stride);
        let wo = ops::conv_out_extent(in_shape[r - 1], s[2], self.stride);
        (s[0] * s[1] * s[2] * s[3] * ho * wo) as u64
    }

    fn cast<T: Scalar>(&self) -> Conv<T> {
        Conv {
            name: self.name.clone(),
            weight: self.weight.cast(),
            stride: self.stride,
        }
    }
}

#[derive(Clone, Debug)]
pub enum SpatialStage<S: Scalar = f32> {
    Bank(BranchBank<S>),
    Fused(FusedConv<S>),
}

#[derive(Clone, Debug)]
pub enum ThresholdStage<S: Scalar = f32> {
    Norm(TsbnLayer<S>),
    Folded(FoldedThreshold<S>),
}

/// Conv, norm, stateless threshold.
#[derive(Clone, Debug)]
pub struct SpikeUnit<S: Scalar = f32> {
    pub name: String,
    pub conv: Conv<S>,
    pub stage: ThresholdStage<S>,
}

/// Conv followed by a norm whose output stays analog.
#[derive(Clone, Debug)]
pub struct NormConv<S: Scalar = f32> {
    pub conv: Conv<S>,
    pub tsbn: TsbnLayer<S>,
}

#[derive(Clone, Debug)]
pub struct Block<S: Scalar = f32> {
    pub name: String,
    pub spatial: SpatialStage<S>,
    pub q: SpikeUnit<S>,
    pub k: SpikeUnit<S>,
    pub v: SpikeUnit<S>,
    pub proj: NormConv<S>,
    pub mlp1: SpikeUnit<S>,
    pub mlp2: NormConv<S>,
}

#[derive(Clone, Debug)]
pub struct Head<S: Scalar = f32> {
    /// `[C, classes]`
    pub weight: Param<S>,
    /// `[classes]`
    pub bias: Param<S>,
}

#[derive(Clone, Debug)]
pub struct RtformerNet<S: Scalar = f32> {
    pub config: RtformerConfig,
    pub encoder: NormConv<S>,
    pub blocks: Vec<Block<S>>,
    pub head: Head<S>,
    mode: NetMode,
}

#[derive(Clone, Copy, Debug)]
pub struct InferOptions {
    /// Reject non-binary tensors on spike paths.
    pub checked: bool,
    pub record_spikes: bool,
    /// Keep `pre-threshold value - threshold` at every spike site.
    pub record_margins: bool,
    pub record_ops: bool,
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions {
            checked: true,
            record_spikes: false,
            record_margins: false,
            record_ops: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InferenceOutput<S: Scalar = f32> {
    /// `[B, classes]`
    pub logits: Tensor<S>,
    /// Every spike tensor, in network order, when requested.
    pub spikes: Vec<(String, Tensor<S>)>,
    /// Aligned with `spikes` when margins were requested.
    pub margins: Vec<(String, Tensor<S>)>,
    pub ops: Vec<OpRecord>,
}

struct Recorder<S: Scalar> {
    opts: InferOptions,
    batch: usize,
    spikes: Vec<(String, Tensor<S>)>,
    margins: Vec<(String, Tensor<S>)>,
    ops: Vec<OpRecord>,
}

impl<S: Scalar> Recorder<S> {
    fn synapse(&mut self, id: &str, input: &Tensor<S>, connections_per_step: u64, steps: usize) {
        if !self.opts.record_ops {
            return;
        }
        let binary = input.is_binary();
        let rate = if binary { input.mean_value() } else { 1.0 };
        self.ops.push(OpRecord {
            layer_id: id.to_string(),
            kind: OpKind::Synapse {
                connections_per_step,
                steps: steps as u64,
                binary,
                rate,
            },
        });
    }

    fn affine(&mut self, id: &str, out: &Tensor<S>) {
        if self.opts.record_ops {
            self.ops.push(OpRecord {
                layer_id: id.to_string(),
                kind: OpKind::Affine {
                    elements: (out.numel() / self.batch) as u64,
                },
            });
        }
    }

    fn spikes(&mut self, id: &str, s: &Tensor<S>, margin: impl FnOnce() -> Result<Tensor<S>>) -> Result<()> {
        if self.opts.checked && !s.is_binary() {
            return Err(Error::NotBinary(id.to_string()));
        }
        if self.opts.record_spikes {
            self.spikes.push((id.to_string(), s.clone()));
        }
        if self.opts.record_margins {
            self.margins.push((id.to_string(), margin()?));
        }
        Ok(())
    }

    /// LIF layer over `u`, recorded under `id`.
    fn fire(&mut self, id: &str, u: &Tensor<S>, p: &LifParams) -> Result<Tensor<S>> {
        if !self.opts.record_margins {
            let s = lif_sequence(u, p)?;
            self.spikes(id, &s, || unreachable!())?;
            return Ok(s);
        }
        let (s, m) = lif_sequence_membrane(u, p)?;
        let v_th = p.v_th;
        self.spikes(id, &s, || Ok(ops::map(&m, |v| S::cast(v.wide() - v_th))))?;
        Ok(s)
    }
}

// `x - v_th_eff[t, c]` over `[T, B, C, H, W]`.
fn folded_margin<S: Scalar>(x: &Tensor<S>, f: &FoldedThreshold<S>) -> Result<Tensor<S>> {
    let sh = x.shape();
    let (b, c, plane) = (sh[1], sh[2], sh[3] * sh[4]);
    let th = f.v_th_eff.data();
    Ok(Tensor::from_fn(sh, |i| {
        let (t, ch) = (i / (b * c * plane), (i / plane) % c);
        S::cast(x.data()[i].wide() - th[t * c + ch].wide())
    }))
}

impl<S: Scalar> SpikeUnit<S> {
    fn infer(&self, x: &Tensor<S>, v_th: f64, rec: &mut Recorder<S>) -> Result<Tensor<S>> {
        let c = self.conv.forward(x)?;
        rec.synapse(&self.conv.name, x, self.conv.connections(x.shape()), x.shape()[0]);
        match &self.stage {
            ThresholdStage::Norm(t) => {
                rec.affine(&t.name, &c);
                let z = tsbn_forward_infer(&c, t)?;
                let s = threshold(&z, v_th);
                rec.spikes(&self.name, &s, || Ok(ops::map(&z, |v| S::cast(v.wide() - v_th))))?;
                Ok(s)
            }
            ThresholdStage::Folded(f) => {
                let s = spike_folded(&c, f)?;
                rec.spikes(&self.name, &s, || folded_margin(&c, f))?;
                Ok(s)
            }
        }
    }

    fn train_op(&mut self, tape: &mut Tape<S>, x: Var, v_th: f64, alpha: f64) -> Result<Var> {
        let c = self.conv.forward_op(tape, x)?;
        let ThresholdStage::Norm(t) = &mut self.stage else {
            return Err(Error::Mode {
                mode: "fused".into(),
                what: format!("training `{}`", self.name),
            });
        };
        let z = tsbn_forward_train_op(tape, c, t)?;
        Ok(threshold_op(tape, z, v_th, alpha))
    }

    fn cast<T: Scalar>(&self) -> SpikeUnit<T> {
        SpikeUnit {
            name: self.name.clone(),
            conv: self.conv.cast(),
            stage: match &self.stage {
                ThresholdStage::Norm(t) => ThresholdStage::Norm(t.cast()),
                ThresholdStage::Folded(f) => ThresholdStage::Folded(f.cast()),
            },
        }
    }
}

impl<S: Scalar> NormConv<S> {
    fn infer(&self, x: &Tensor<S>, rec: &mut Recorder<S>) -> Result<Tensor<S>> {
        let c = self.conv.forward(x)?;
        rec.synapse(&self.conv.name, x, self.conv.connections(x.shape()), x.shape()[0]);
        let y = tsbn_forward_infer(&c, &self.tsbn)?;
        rec.affine(&self.tsbn.name, &y);
        Ok(y)
    }

    fn train_op(&mut self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let c = self.conv.forward_op(tape, x)?;
        tsbn_forward_train_op(tape, c, &mut self.tsbn)
    }

    fn cast<T: Scalar>(&self) -> NormConv<T> {
        NormConv {
            conv: self.conv.cast(),
            tsbn: self.tsbn.cast(),
        }
    }
}

impl<S: Scalar> Block<S> {
    fn infer(&self, x: &Tensor<S>, cfg: &RtformerConfig, rec: &mut Recorder<S>) -> Result<Tensor<S>> {
        let (steps, c, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3], x.shape()[4]);
        let u1 = match &self.spatial {
            SpatialStage::Bank(bank) => {
                for (j, b) in bank.branches.iter().enumerate() {
                    let k = b.kernel_size();
                    rec.synapse(&format!("{}.b{j}", bank.name), x, (c * k * k * h * w) as u64, steps);
                    // Each branch's norm output has the shape of the input.
                    rec.affine(&b.tsbn.name, x);
                }
                branch_forward_infer(x, bank)?
            }
            SpatialStage::Fused(fc) => {
                let k = fc.kernel_size();
                rec.synapse(&fc.name, x, (c * k * k * h * w) as u64, steps);
                fused_forward(fc, x)?
            }
        };
        let lif = cfg.lif;
        let s1 = rec.fire(&format!("{}.s1", self.name), &u1, &lif)?;

        let q = self.q.infer(&s1, cfg.fold_v_th, rec)?;
        let k = self.k.infer(&s1, cfg.fold_v_th, rec)?;
        let v = self.v.infer(&s1, cfg.fold_v_th, rec)?;
        let (qh, kh, vh) = (
            to_heads(&q, cfg.heads)?,
            to_heads(&k, cfg.heads)?,
            to_heads(&v, cfg.heads)?,
        );
        let d = c / cfg.heads;
        let products = (cfg.heads * h * w * d * d) as u64;
        rec.synapse(&format!("{}.attn.kv", self.name), &kh, products, steps);
        rec.synapse(&format!("{}.attn.q", self.name), &qh, products, steps);
        let a = from_heads(
            &spiking_attention(&qh, &kh, &vh, cfg.attn_scale, rec.opts.checked)?,
            h,
            w,
        )?;
        let sa = rec.fire(&format!("{}.attn", self.name), &a, &lif.with_threshold(cfg.attn_v_th))?;

        let o = self.proj.infer(&sa, rec)?;
        let r1 = ops::add(&u1, &o)?;
        let s2 = rec.fire(&format!("{}.s2", self.name), &r1, &lif)?;

        let hdn = self.mlp1.infer(&s2, cfg.fold_v_th, rec)?;
        let m = self.mlp2.infer(&hdn, rec)?;
        let r2 = ops::add(&r1, &m)?;
        rec.fire(&format!("{}.out", self.name), &r2, &lif)
    }

    fn train_op(&mut self, tape: &mut Tape<S>, x: Var, cfg: &RtformerConfig) -> Result<Var> {
        let (h, w) = (tape.shape(x)[3], tape.shape(x)[4]);
        let SpatialStage::Bank(bank) = &mut self.spatial else {
            return Err(Error::Mode {
                mode: "fused".into(),
                what: format!("training `{}`", self.name),
            });
        };
        let u1 = branch_forward_op(tape, x, bank)?;
        let lif = cfg.lif;
        let alpha = lif.surrogate_alpha;
        let s1 = lif_sequence_op(tape, u1, &lif)?;

        let q = self.q.train_op(tape, s1, cfg.fold_v_th, alpha)?;
        let k = self.k.train_op(tape, s1, cfg.fold_v_th, alpha)?;
        let v = self.v.train_op(tape, s1, cfg.fold_v_th, alpha)?;
        let qh = to_heads_op(tape, q, cfg.heads)?;
        let kh = to_heads_op(tape, k, cfg.heads)?;
        let vh = to_heads_op(tape, v, cfg.heads)?;
        let a = spiking_attention_op(tape, qh, kh, vh, cfg.attn_scale)?;
        let a = from_heads_op(tape, a, h, w)?;
        let sa = lif_sequence_op(tape, a, &lif.with_threshold(cfg.attn_v_th))?;

        let o = self.proj.train_op(tape, sa)?;
        let r1 = tape.add(u1, o)?;
        let s2 = lif_sequence_op(tape, r1, &lif)?;
        let hdn = self.mlp1.train_op(tape, s2, cfg.fold_v_th, alpha)?;
        let m = self.mlp2.train_op(tape, hdn)?;
        let r2 = tape.add(r1, m)?;
        lif_sequence_op(tape, r2, &lif)
    }

    fn units_mut(&mut self) -> [&mut SpikeUnit<S>; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.mlp1]
    }

    fn cast<T: Scalar>(&self) -> Block<T> {
        Block {
            name: self.name.clone(),
            spatial: match &self.spatial {
                SpatialStage::Bank(b) => SpatialStage::Bank(b.cast()),
                SpatialStage::Fused(f) => SpatialStage::Fused(f.cast()),
            },
            q: self.q.cast(),
            k: self.k.cast(),
            v: self.v.cast(),
            proj: self.proj.cast(),
            mlp1: self.mlp1.cast(),
            mlp2: self.mlp2.cast(),
        }
    }
}

impl<S: Scalar> RtformerNet<S> {
    /// Deterministic initialization from `config.seed`.
    pub fn build(config: &RtformerConfig) -> Result<Self> {
        config.validate()?;
        let cfg = config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (t, c, hd) = (cfg.steps, cfg.dim, cfg.hidden());
        let tsbn = |name: String, ch: usize, log: bool| -> Result<TsbnLayer<S>> {
            let mut l = TsbnLayer::new(name, t, ch, cfg.window, log)?
                .with_policy(cfg.window_policy)
                .with_eps(cfg.tsbn_eps)?;
            l.momentum = cfg.tsbn_momentum;
            Ok(l)
        };
        let encoder = NormConv {
            conv: Conv::init(
                "encoder.conv".into(),
                c,
                cfg.in_channels,
                3,
                cfg.encoder_stride,
                &mut rng,
            ),
            tsbn: tsbn("encoder.tsbn".into(), c, false)?,
        };
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let name = format!("block{i}");
            let mut bank =
                BranchBank::standard(&format!("{name}.bank"), t, c, cfg.window, cfg.window_policy, &mut rng)?;
            for b in &mut bank.branches {
                b.tsbn = b.tsbn.clone().with_eps(cfg.tsbn_eps)?;
                b.tsbn.momentum = cfg.tsbn_momentum;
            }
            let unit = |u: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng| -> Result<SpikeUnit<S>> {
                Ok(SpikeUnit {
                    name: format!("{name}.{u}"),
                    conv: Conv::init(format!("{name}.{u}.conv"), cout, cin, 1, 1, rng),
                    stage: ThresholdStage::Norm(tsbn(format!("{name}.{u}.tsbn"), cout, true)?),
                })
            };
            let q = unit("q", c, c, &mut rng)?;
            let k = unit("k", c, c, &mut rng)?;
            let v = unit("v", c, c, &mut rng)?;
            let mlp1 = unit("mlp1", c, hd, &mut rng)?;
            let proj = NormConv {
                conv: Conv::init(format!("{name}.proj.conv"), c, c, 1, 1, &mut rng),
                tsbn: tsbn(format!("{name}.proj.tsbn"), c, false)?,
            };
            let mlp2 = NormConv {
                conv: Conv::init(format!("{name}.mlp2.conv"), c, hd, 1, 1, &mut rng),
                tsbn: tsbn(format!("{name}.mlp2.tsbn"), c, false)?,
            };
            blocks.push(Block {
                name,
                spatial: SpatialStage::Bank(bank),
                q,
                k,
                v,
                proj,
                mlp1,
                mlp2,
            });
        }
        let bound = 1.0 / (c as f64).sqrt();
        let head = Head {
            weight: Param::new(Tensor::from_fn(&[c, cfg.classes], |_| {
                S::cast(rng.gen_range(-bound..bound))
            })),
            bias: Param::new(Tensor::from_fn(&[cfg.classes], |_| {
                S::cast(rng.gen_range(-bound..bound))
            })),
        };
        Ok(RtformerNet {
            config: cfg,
            encoder,
            blocks,
            head,
            mode: NetMode::Train,
        })
    }

    pub fn mode(&self) -> NetMode {
        self.mode
    }

    pub fn is_fused(&self) -> bool {
        self.mode == NetMode::Fused
    }

    /// Switch between training and inference. Fused nets stay fused.
    pub fn set_mode(&mut self, mode: NetMode) -> Result<()> {
        if self.is_fused() || mode == NetMode::Fused {
            return Err(Error::Mode {
                mode: self.mode.name().into(),
                what: format!("switching to {} mode (use fuse_network)", mode.name()),
            });
        }
        self.mode = mode;
        Ok(())
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        let ok = shape.len() == 5
            && shape[0] == c.steps
            && shape[1] >= 1
            && shape[2] == c.in_channels
            && shape[3] == c.height
            && shape[4] == c.width;
        if !ok {
            return shape_err(format!(
                "network expects [{}, B, {}, {}, {}], got {shape:?}",
                c.steps, c.in_channels, c.height, c.width
            ));
        }
        Ok(())
    }

    /// Training forward on the tape. Returns `[B, classes]` logits.
    pub fn forward_train(&mut self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        if self.mode != NetMode::Train {
            return Err(Error::Mode {
                mode: self.mode.name().into(),
                what: "training forward".into(),
            });
        }
        self.check_input(tape.shape(x))?;
        let cfg = self.config.clone();
        let e = self.encoder.train_op(tape, x)?;
        let mut s = lif_sequence_op(tape, e, &cfg.lif)?;
        for b in &mut self.blocks {
            s = b.train_op(tape, s, &cfg)?;
        }
        let batch = tape.shape(s)[1];
        let feat = tape.mean(s, &[0, 3, 4])?;
        let feat = tape.reshape(feat, &[batch, cfg.dim])?;
        let w = self.head.weight.bind(tape);
        let b = self.head.bias.bind(tape);
        let l = tape.matmul(feat, w)?;
        tape.add(l, b)
    }

    /// Inference forward with running statistics (or fused operators).
    pub fn infer(&self, x: &Tensor<S>, opts: InferOptions) -> Result<InferenceOutput<S>> {
        self.check_input(x.shape())?;
        let cfg = &self.config;
        let mut rec = Recorder {
            opts,
            batch: x.shape()[1],
            spikes: Vec::new(),
            margins: Vec::new(),
            ops: Vec::new(),
        };
        let e = self.encoder.infer(x, &mut rec)?;
        let mut s = rec.fire("encoder", &e, &cfg.lif)?;
        for b in &self.blocks {
            s = b.infer(&s, cfg, &mut rec)?;
        }
        let batch = x.shape()[1];
        let feat = ops::mean_axes(&s, &[0, 3, 4])?.reshape(&[batch, cfg.dim])?;
        rec.synapse("head", &feat, (cfg.dim * cfg.classes) as u64, 1);
        let logits = ops::add(&ops::matmul(&feat, &self.head.weight.value)?, &self.head.bias.value)?;
        Ok(InferenceOutput {
            logits,
            spikes: rec.spikes,
            margins: rec.margins,
            ops: rec.ops,
        })
    }

    pub fn logits(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.infer(x, InferOptions::default())?.logits)
    }

    /// Trainable parameters in a fixed order (the optimizer relies on it).
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        f(&mut self.encoder.conv.weight);
        self.encoder.tsbn.visit_params_mut(f);
        for b in &mut self.blocks {
            if let SpatialStage::Bank(bank) = &mut b.spatial {
                bank.visit_params_mut(f);
            }
            for u in b.units_mut() {
                f(&mut u.conv.weight);
                if let ThresholdStage::Norm(t) = &mut u.stage {
                    t.visit_params_mut(f);
                }
            }
            for nc in [&mut b.proj, &mut b.mlp2] {
                f(&mut nc.conv.weight);
                nc.tsbn.visit_params_mut(f);
            }
        }
        f(&mut self.head.weight);
        f(&mut self.head.bias);
    }

    pub fn trainable_count(&self) -> usize {
        let mut n = 0;
        self.clone().visit_params_mut(&mut |p| {
            if p.is_trainable() {
                n += p.value.numel();
            }
        });
        n
    }

    /// Floats a checkpoint stores for this network.
    pub fn stored_floats(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Every normalization layer, including the bank branches.
    pub fn tsbn_layers(&self) -> Vec<&TsbnLayer<S>> {
        let mut out = vec![&self.encoder.tsbn];
        for b in &self.blocks {
            if let SpatialStage::Bank(bank) = &b.spatial {
                out.extend(bank.branches.iter().map(|br| &br.tsbn));
            }
            for u in [&b.q, &b.k, &b.v] {
                if let ThresholdStage::Norm(t) = &u.stage {
                    out.push(t);
                }
            }
            out.push(&b.proj.tsbn);
            if let ThresholdStage::Norm(t) = &b.mlp1.stage {
                out.push(t);
            }
            out.push(&b.mlp2.tsbn);
        }
        out
    }

    fn tsbn_layers_mut(&mut self) -> Vec<&mut TsbnLayer<S>> {
        let mut out = vec![&mut self.encoder.tsbn];
        for b in &mut self.blocks {
            if let SpatialStage::Bank(bank) = &mut b.spatial {
                out.extend(bank.branches.iter_mut().map(|br| &mut br.tsbn));
            }
            for u in [&mut b.q, &mut b.k, &mut b.v] {
                if let ThresholdStage::Norm(t) = &mut u.stage {
                    out.push(t);
                }
            }
            out.push(&mut b.proj.tsbn);
            if let ThresholdStage::Norm(t) = &mut b.mlp1.stage {
                out.push(t);
            }
            out.push(&mut b.mlp2.tsbn);
        }
        out
    }

    /// Re-parameterized copy: every bank becomes one conv, every
    /// fold-eligible norm becomes a threshold. `self` is untouched.
    pub fn fuse_network(&self) -> Result<Self> {
        if self.is_fused() {
            return Err(Error::Mode {
                mode: "fused".into(),
                what: "fusing an already fused network".into(),
            });
        }
        if let Some(l) = self.tsbn_layers().into_iter().find(|l| !l.is_populated()) {
            return Err(Error::StatsUnpopulated(l.name.clone()));
        }
        let v_th = self.config.fold_v_th;
        let mut net = self.clone();
        for b in &mut net.blocks {
            if let SpatialStage::Bank(bank) = &b.spatial {
                b.spatial = SpatialStage::Fused(fuse(bank)?);
            }
            for u in b.units_mut() {
                if let ThresholdStage::Norm(t) = &u.stage {
                    u.stage = ThresholdStage::Folded(fold_threshold(t, v_th)?);
                }
            }
        }
        net.mode = NetMode::Fused;
        Ok(net)
    }

    pub fn cast<T: Scalar>(&self) -> RtformerNet<T> {
        RtformerNet {
            config: self.config.clone(),
            encoder: self.encoder.cast(),
            blocks: self.blocks.iter().map(|b| b.cast()).collect(),
            head: Head {
                weight: self.head.weight.cast(),
                bias: self.head.bias.cast(),
            },
            mode: self.mode,
        }
    }

    /// Every stored tensor by name, in a fixed order.
    fn visit_state_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<S>) -> Result<()>) -> Result<()> {
        fn norm<S: Scalar>(
            t: &mut TsbnLayer<S>,
            f: &mut dyn FnMut(String, &mut Tensor<S>) -> Result<()>,
        ) -> Result<()> {
            let name = t.name.clone();
            for (suffix, slot) in t.state_mut() {
                f(format!("{name}.{suffix}"), slot)?;
            }
            Ok(())
        }
        f(
            format!("{}.weight", self.encoder.conv.name),
            &mut self.encoder.conv.weight.value,
        )?;
        norm(&mut self.encoder.tsbn, f)?;
        for b in &mut self.blocks {
            match &mut b.spatial {
                SpatialStage::Bank(bank) => {
                    for (j, br) in bank.branches.iter_mut().enumerate() {
                        if br.kind != BranchKind::Identity {
                            f(format!("{}.b{j}.kernel", bank.name), &mut br.kernel.value)?;
                        }
                        norm(&mut br.tsbn, f)?;
                    }
                }
                SpatialStage::Fused(fc) => {
                    f(format!("{}.kernel", fc.name), &mut fc.kernel)?;
                    f(format!("{}.bias", fc.name), &mut fc.bias)?;
                }
            }
            for u in [&mut b.q, &mut b.k, &mut b.v] {
                unit_state(u, f)?;
            }
            f(format!("{}.weight", b.proj.conv.name), &mut b.proj.conv.weight.value)?;
            norm(&mut b.proj.tsbn, f)?;
            unit_state(&mut b.mlp1, f)?;
            f(format!("{}.weight", b.mlp2.conv.name), &mut b.mlp2.conv.weight.value)?;
            norm(&mut b.mlp2.tsbn, f)?;
        }
        f("head.weight".into(), &mut self.head.weight.value)?;
        f("head.bias".into(), &mut self.head.bias.value)?;
        return Ok(());

        fn unit_state<S: Scalar>(
            u: &mut SpikeUnit<S>,
            f: &mut dyn FnMut(String, &mut Tensor<S>) -> Result<()>,
        ) -> Result<()> {
            f(format!("{}.weight", u.conv.name), &mut u.conv.weight.value)?;
            match &mut u.stage {
                ThresholdStage::Norm(t) => norm(t, f),
                ThresholdStage::Folded(ft) => f(format!("{}.fold.v_th_eff", u.name), &mut ft.v_th_eff),
            }
        }
    }

    /// Stored tensors by name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        let mut copy = self.clone();
        copy.visit_state_mut(&mut |name, t| {
            out.push((name, t.clone()));
            Ok(())
        })
        .expect("collecting never fails");
        out
    }

    /// Config pairs plus the fused flag, per-norm batch counters and fold
    /// provenance.
    pub fn config_record(&self) -> Vec<(String, String)> {
        let mut out = self.config.to_pairs();
        out.push(("fused".into(), if self.is_fused() { "1" } else { "0" }.into()));
        for l in self.tsbn_layers() {
            out.push((format!("batches.{}", l.name), l.batches_seen().to_string()));
        }
        for b in &self.blocks {
            for u in [&b.q, &b.k, &b.v, &b.mlp1] {
                if let ThresholdStage::Folded(ft) = &u.stage {
                    out.push((format!("fold.{}.source", u.name), ft.source.clone()));
                }
            }
        }
        out
    }

    /// Rebuild from [`config_record`](Self::config_record) pairs and
    /// [`tensors`](Self::tensors).
    pub fn from_record(pairs: &[(String, String)], tensors: Vec<(String, Tensor<S>)>) -> Result<Self> {
        let cfg_err = |m: String| Error::Config(m);
        let mut cfg_pairs = Vec::new();
        let mut fused = None;
        let mut batches = BTreeMap::new();
        let mut sources = BTreeMap::new();
        for (k, v) in pairs {
            if k == "fused" {
                fused = Some(match v.as_str() {
                    "0" => false,
                    "1" => true,
                    _ => return Err(cfg_err(format!("bad fused flag `{v}`"))),
                });
            } else if let Some(layer) = k.strip_prefix("batches.") {
                let n: u64 = v
                    .parse()
                    .map_err(|_| cfg_err(format!("bad batch count for `{layer}`")))?;
                batches.insert(layer.to_string(), n);
            } else if let Some(unit) = k.strip_prefix("fold.").and_then(|r| r.strip_suffix(".source")) {
                sources.insert(unit.to_string(), v.clone());
            } else {
                cfg_pairs.push((k.as_str(), v.as_str()));
            }
        }
        let config = RtformerConfig::from_pairs(cfg_pairs)?;
        let fused = fused.ok_or_else(|| cfg_err("missing `fused` flag".into()))?;

        let mut map = BTreeMap::new();
        for (name, t) in tensors {
            if map.insert(name.clone(), t).is_some() {
                return Err(cfg_err(format!("duplicate tensor `{name}`")));
            }
        }
        let has_bank = map.keys().any(|k| k.contains(".bank.b"));
        let has_fused = map.keys().any(|k| k.contains(".bank.fused.") || k.contains(".fold."));
        if fused && has_bank {
            return Err(cfg_err("fused flag set but branch-bank tensors are present".into()));
        }
        if !fused && has_fused {
            return Err(cfg_err("fused flag clear but fused tensors are present".into()));
        }

        let mut net = Self::build(&config)?;
        if fused {
            net = net.fused_skeleton()?;
        }
        net.visit_state_mut(&mut |name, slot| {
            let t = map
                .remove(&name)
                .ok_or_else(|| Error::Config(format!("missing tensor `{name}`")))?;
            if t.shape() != slot.shape() {
                return shape_err(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                ));
            }
            t.check_finite()?;
            *slot = t;
            Ok(())
        })?;
        if let Some(extra) = map.keys().next() {
            return Err(cfg_err(format!("unexpected tensor `{extra}`")));
        }
        for l in net.tsbn_layers_mut() {
            let n = batches
                .remove(&l.name)
                .ok_or_else(|| Error::Config(format!("missing batch count for `{}`", l.name)))?;
            l.set_batches_seen(n);
        }
        for b in &mut net.blocks {
            for u in b.units_mut() {
                if let ThresholdStage::Folded(ft) = &mut u.stage {
                    ft.source = sources
                        .remove(&u.name)
                        .ok_or_else(|| Error::Config(format!("missing fold source for `{}`", u.name)))?;
                }
            }
        }
        if let Some(k) = batches.keys().chain(sources.keys()).next() {
            return Err(cfg_err(format!("config names unknown layer `{k}`")));
        }
        if !fused {
            net.mode = NetMode::Infer;
        }
        Ok(net)
    }

    /// Same topology as a fused net, values zeroed.
    fn fused_skeleton(mut self) -> Result<Self> {
        for b in &mut self.blocks {
            if let SpatialStage::Bank(bank) = &b.spatial {
                let (t, c) = (bank.steps(), bank.channels());
                b.spatial = SpatialStage::Fused(FusedConv::new(
                    format!("{}.fused", bank.name),
                    Tensor::zeros(&[t, c, 3, 3]),
                    Tensor::zeros(&[t, c]),
                )?);
            }
            for u in b.units_mut() {
                if let ThresholdStage::Norm(t) = &u.stage {
                    u.stage = ThresholdStage::Folded(FoldedThreshold::new(
                        t.name.clone(),
                        Tensor::zeros(&[t.steps(), t.channels()]),
                    )?);
                }
            }
        }
        self.mode = NetMode::Fused;
        Ok(self)
    }
}

/// Build an `f32` network.
pub fn build(config: &RtformerConfig) -> Result<RtformerNet<f32>> {
    RtformerNet::build(config)
}

/// Trainable parameter count of an unfused network, in closed form.
pub fn closed_form_trainable(cfg: &RtformerConfig) -> usize {
    let (t, c, hd, k) = (cfg.steps, cfg.dim, cfg.hidden(), cfg.classes);
    let encoder = 9 * cfg.in_channels * c + 2 * t * c;
    let block = 20 * c + 20 * t * c + 4 * c * c + 2 * c * hd + 2 * t * hd;
    let head = c * k + k;
    encoder + cfg.depth * block + head
}
