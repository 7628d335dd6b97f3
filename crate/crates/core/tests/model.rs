use std::time::Instant;

use rtformer_core::io::events::toy_event_dataset;
use rtformer_core::io::Checkpoint;
use rtformer_core::model::{
    build, closed_form_trainable, cross_entropy_op, train_epoch, verify_fusion, Dataset, InferOptions, NetMode,
    RtformerConfig, RtformerNet, Sgd, VerifyOptions,
};
use rtformer_core::{Error, Tape, Tensor};

fn small() -> RtformerConfig {
    RtformerConfig {
        depth: 1,
        dim: 16,
        heads: 2,
        ..RtformerConfig::default()
    }
}

fn toy(cfg: &RtformerConfig, n: usize, seed: u64) -> Dataset {
    toy_event_dataset(cfg.classes, n, cfg.steps, seed).unwrap()
}

fn trained(cfg: &RtformerConfig, epochs: usize) -> RtformerNet {
    let data = toy(cfg, 48, 1);
    let mut net = build(cfg).unwrap();
    let mut opt = Sgd::new(0.1, 0.9);
    for e in 0..epochs {
        train_epoch(&mut net, &data, &mut opt, 8, e as u64).unwrap();
    }
    net.set_mode(NetMode::Infer).unwrap();
    net
}

fn snapshot(net: &RtformerNet) -> Vec<Vec<f32>> {
    let mut out = Vec::new();
    net.clone().visit_params_mut(&mut |p| {
        if p.is_trainable() {
            out.push(p.value.data().to_vec());
        }
    });
    out
}

// Layer-by-layer count of the trainable floats.
fn trainable_oracle(cfg: &RtformerConfig) -> usize {
    let (t, c, cin, hd, k) = (cfg.steps, cfg.dim, cfg.in_channels, cfg.hidden(), cfg.classes);
    let norm = |ch: usize| 2 * t * ch;
    let encoder = c * cin * 3 * 3 + norm(c);
    // Identity (frozen), two 1x1 and two 3x3 depthwise branches, each normalized.
    let bank = (1 + 1 + 9 + 9) * c + 5 * norm(c);
    let qkv = 3 * (c * c + norm(c));
    let proj = c * c + norm(c);
    let mlp = (c * hd + norm(hd)) + (hd * c + norm(c));
    encoder + cfg.depth * (bank + qkv + proj + mlp) + c * k + k
}

#[test]
fn parameter_count_matches_layer_oracle() {
    for cfg in [
        RtformerConfig::default(),
        small(),
        RtformerConfig { depth: 0, ..small() },
        RtformerConfig {
            steps: 2,
            window: 1,
            dim: 24,
            heads: 3,
            mlp_ratio: 3,
            in_channels: 1,
            classes: 10,
            ..RtformerConfig::default()
        },
    ] {
        let net = build(&cfg).unwrap();
        assert_eq!(net.trainable_count(), trainable_oracle(&cfg), "{cfg:?}");
        assert_eq!(closed_form_trainable(&cfg), trainable_oracle(&cfg));
    }
}

#[test]
fn build_is_seed_deterministic() {
    let a = build(&small()).unwrap();
    let b = build(&small()).unwrap();
    assert_eq!(a.tensors(), b.tensors());
    let c = build(&RtformerConfig { seed: 1, ..small() }).unwrap();
    assert_ne!(a.tensors(), c.tensors());
}

#[test]
fn zero_depth_network_trains_and_fuses() {
    let cfg = RtformerConfig { depth: 0, ..small() };
    let net = trained(&cfg, 1);
    let fused = net.fuse_network().unwrap();
    let x = toy(&cfg, 4, 2).batch(&[0, 1, 2, 3]).unwrap().0;
    assert_eq!(net.logits(&x).unwrap(), fused.logits(&x).unwrap());
}

#[test]
fn zero_learning_rate_leaves_parameters_alone() {
    let cfg = small();
    let mut net = build(&cfg).unwrap();
    let before = snapshot(&net);
    train_epoch(&mut net, &toy(&cfg, 16, 0), &mut Sgd::new(0.0, 0.9), 8, 0).unwrap();
    assert_eq!(snapshot(&net), before);
    assert!(net.tsbn_layers().iter().all(|l| l.is_populated()));
}

#[test]
fn loss_falls_over_twenty_steps() {
    let cfg = RtformerConfig { classes: 2, ..small() };
    let data = toy(&cfg, 16, 4);
    let (x, labels) = data.batch(&(0..16).collect::<Vec<_>>()).unwrap();
    let mut net = build(&cfg).unwrap();
    let mut opt = Sgd::new(0.05, 0.9);
    let mut losses = Vec::new();
    for _ in 0..20 {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let logits = net.forward_train(&mut tape, xv).unwrap();
        let loss = cross_entropy_op(&mut tape, logits, &labels).unwrap();
        losses.push(tape.value(loss).data()[0]);
        tape.backward(loss).unwrap();
        opt.step(&mut net, &tape);
    }
    assert!(losses[19] < losses[0], "{losses:?}");
}

fn gradients(cfg: &RtformerConfig) -> Vec<(usize, bool)> {
    let data = toy(cfg, 8, 6);
    let (x, labels) = data.batch(&(0..8).collect::<Vec<_>>()).unwrap();
    let mut net = build(cfg).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let logits = net.forward_train(&mut tape, xv).unwrap();
    let loss = cross_entropy_op(&mut tape, logits, &labels).unwrap();
    tape.backward(loss).unwrap();
    let mut out = Vec::new();
    net.visit_params_mut(&mut |p| {
        if p.is_trainable() {
            let nonzero = p.grad(&tape).is_some_and(|g| g.iter().any(|v| *v != 0.0));
            out.push((p.value.numel(), nonzero));
        }
    });
    out
}

#[test]
fn every_trainable_tensor_receives_gradient() {
    let g = gradients(&small());
    assert!(g.iter().all(|(_, nz)| *nz), "{g:?}");
}

#[test]
fn zero_surrogate_cuts_gradient_at_the_first_neuron() {
    let mut cfg = small();
    cfg.lif.surrogate_alpha = 0.0;
    let g = gradients(&cfg);
    // Encoder conv, then the encoder normalization's gamma and beta.
    assert!(g[..3].iter().all(|(_, nz)| !*nz), "{g:?}");
    // The head still learns.
    assert!(g[g.len() - 2..].iter().all(|(_, nz)| *nz));
}

#[test]
fn spike_paths_are_binary_in_checked_mode() {
    let net = trained(&small(), 1);
    let x = toy(&net.config, 6, 3).batch(&[0, 1, 2, 3, 4, 5]).unwrap().0;
    for n in [net.clone(), net.fuse_network().unwrap()] {
        let out = n
            .infer(
                &x,
                InferOptions {
                    record_spikes: true,
                    ..InferOptions::default()
                },
            )
            .unwrap();
        assert!(!out.spikes.is_empty());
        assert!(out.spikes.iter().all(|(_, s)| s.is_binary()));
    }
    let analog = Tensor::full(x.shape(), 0.5f32);
    assert!(net.logits(&analog).is_ok());
}

#[test]
fn fusion_lifecycle() {
    let cfg = small();
    let fresh = build(&cfg).unwrap();
    assert!(matches!(fresh.fuse_network(), Err(Error::StatsUnpopulated(_))));

    let net = trained(&cfg, 1);
    let mut fused = net.fuse_network().unwrap();
    assert!(fused.is_fused());
    assert!(fused.stored_floats() < net.stored_floats());
    assert!(fused.trainable_count() < net.trainable_count());
    assert!(matches!(fused.fuse_network(), Err(Error::Mode { .. })));
    assert!(fused.set_mode(NetMode::Train).is_err());
    let mut tape = Tape::new();
    let xv = tape.constant(toy(&cfg, 1, 0).batch(&[0]).unwrap().0);
    assert!(fused.forward_train(&mut tape, xv).is_err());
    assert!(matches!(
        build(&cfg)
            .unwrap()
            .infer(&Tensor::zeros(&[1]), InferOptions::default()),
        Err(_)
    ));
}

#[test]
fn fused_network_verifies_against_reference() {
    let net = trained(&small(), 2);
    let fused = net.fuse_network().unwrap();
    let probe = toy(&net.config, 24, 8);
    let report = verify_fusion(&net, &fused, &probe, VerifyOptions::default()).unwrap();
    assert!(report.passed(), "{}", report.summary());
    assert!(report.argmax_agreement() >= 0.99);
    assert!(verify_fusion(&fused, &net, &probe, VerifyOptions::default()).is_err());
}

#[test]
fn pipeline_is_bit_reproducible() {
    let bytes = || {
        let net = trained(&small(), 1);
        let fused = net.fuse_network().unwrap();
        (
            Checkpoint::from_net(&net).to_bytes().unwrap(),
            Checkpoint::from_net(&fused).to_bytes().unwrap(),
        )
    };
    assert_eq!(bytes(), bytes());
}

#[test]
fn checkpoints_preserve_logits() {
    let net = trained(&small(), 1);
    let x = toy(&net.config, 5, 9).batch(&[0, 1, 2, 3, 4]).unwrap().0;
    for n in [net.clone(), net.fuse_network().unwrap()] {
        let back = Checkpoint::from_bytes(&Checkpoint::from_net(&n).to_bytes().unwrap())
            .unwrap()
            .into_net()
            .unwrap();
        assert_eq!(back.is_fused(), n.is_fused());
        assert_eq!(back.logits(&x).unwrap(), n.logits(&x).unwrap());
    }
}

#[test]
fn checkpoint_records_are_strict() {
    let net = trained(&small(), 1);
    let ck = Checkpoint::from_net(&net);

    let mut missing = ck.clone();
    missing.tensors.pop();
    assert!(missing.into_net().is_err());

    let mut extra = ck.clone();
    extra.tensors.push(("stray".into(), Tensor::zeros(&[1])));
    assert!(extra.into_net().is_err());

    let mut reshaped = ck.clone();
    reshaped.tensors[0].1 = Tensor::zeros(&[1, 2, 3]);
    assert!(reshaped.into_net().is_err());

    let mut unknown_key = ck.clone();
    unknown_key.config.push(("mystery".into(), "1".into()));
    assert!(unknown_key.into_net().is_err());

    let mut flipped = ck;
    for (k, v) in &mut flipped.config {
        if k == "fused" {
            *v = "1".into();
        }
    }
    assert!(flipped.into_net().is_err());
}

#[test]
fn fused_inference_is_not_slower() {
    let cfg = RtformerConfig {
        depth: 1,
        dim: 32,
        ..RtformerConfig::default()
    };
    let net = trained(&cfg, 1);
    let fused = net.fuse_network().unwrap();
    let x = toy(&cfg, 8, 3).batch(&(0..8).collect::<Vec<_>>()).unwrap().0;
    let best = |n: &RtformerNet| {
        (0..5)
            .map(|_| {
                let t = Instant::now();
                n.logits(&x).unwrap();
                t.elapsed()
            })
            .min()
            .unwrap()
    };
    let (u, f) = (best(&net), best(&fused));
    assert!(f <= u, "fused {f:?} vs unfused {u:?}");
}
