use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::Dataset;
use super::net::{InferOptions, NetMode, RtformerNet};
use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{BackwardCtx, BackwardRule, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            lr: 0.05,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = || Error::Config(format!("bad value `{value}` for `{key}`"));
        let v = value.trim();
        match key {
            "epochs" => self.epochs = v.parse().map_err(|_| bad())?,
            "batch_size" => self.batch_size = v.parse().map_err(|_| bad())?,
            "lr" => self.lr = v.parse().map_err(|_| bad())?,
            "sgd_momentum" => self.momentum = v.parse().map_err(|_| bad())?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("sgd_momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum: `v = m v + g; p -= lr v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    buffers: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            buffers: Vec::new(),
        }
    }

    /// Apply the gradients recorded on `tape` to every trainable parameter.
    pub fn step<S: Scalar>(&mut self, net: &mut RtformerNet<S>, tape: &Tape<S>) {
        let (lr, mom) = (self.lr, self.momentum);
        let buffers = &mut self.buffers;
        let mut i = 0;
        net.visit_params_mut(&mut |p| {
            if !p.is_trainable() {
                return;
            }
            if buffers.len() <= i {
                buffers.push(vec![0.0; p.value.numel()]);
            }
            let buf = &mut buffers[i];
            if let Some(g) = p.grad(tape) {
                for ((w, v), g) in p.value.data_mut().iter_mut().zip(buf.iter_mut()).zip(g) {
                    *v = mom * *v + g.wide();
                    *w = S::cast(w.wide() - lr * *v);
                }
            } else {
                for (w, v) in p.value.data_mut().iter_mut().zip(buf.iter_mut()) {
                    *v *= mom;
                    *w = S::cast(w.wide() - lr * *v);
                }
            }
            i += 1;
        });
    }
}

struct CrossEntropyRule {
    probs: Vec<f64>,
    labels: Vec<usize>,
    classes: usize,
}

impl<S: Scalar> BackwardRule<S> for CrossEntropyRule {
    fn backward(&self, ctx: &BackwardCtx<'_, S>) -> Result<Vec<Option<Vec<S>>>> {
        let g = ctx.grad_output()[0].wide() / self.labels.len() as f64;
        let mut d = self.probs.clone();
        for (b, &l) in self.labels.iter().enumerate() {
            d[b * self.classes + l] -= 1.0;
        }
        Ok(vec![Some(d.into_iter().map(|v| S::cast(v * g)).collect())])
    }
}

fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(classes) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / z));
    }
    out
}

fn check_labels(shape: &[usize], labels: &[usize]) -> Result<()> {
    if shape.len() != 2 || shape[0] != labels.len() {
        return shape_err(format!("logits {shape:?} do not match {} labels", labels.len()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= shape[1]) {
        return invalid(format!("label {l} out of range for {} classes", shape[1]));
    }
    Ok(())
}

/// Mean cross-entropy of `[B, K]` logits.
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<f64> {
    check_labels(logits.shape(), labels)?;
    let k = logits.shape()[1];
    let p = softmax_rows(&logits.to_f64_vec(), k);
    Ok(labels.iter().enumerate().map(|(b, &l)| -p[b * k + l].ln()).sum::<f64>() / labels.len() as f64)
}

/// Recorded mean cross-entropy.
pub fn cross_entropy_op<S: Scalar>(tape: &mut Tape<S>, logits: Var, labels: &[usize]) -> Result<Var> {
    let value = tape.value(logits);
    check_labels(value.shape(), labels)?;
    let k = value.shape()[1];
    let probs = softmax_rows(&value.to_f64_vec(), k);
    let loss = labels
        .iter()
        .enumerate()
        .map(|(b, &l)| -probs[b * k + l].ln())
        .sum::<f64>()
        / labels.len() as f64;
    let rule = CrossEntropyRule {
        probs,
        labels: labels.to_vec(),
        classes: k,
    };
    Ok(tape.custom(&[logits], Tensor::scalar(S::cast(loss)), Box::new(rule)))
}

/// Index of the largest logit per row; ties go to the lower index.
pub fn argmax_rows<S: Scalar>(logits: &Tensor<S>) -> Vec<usize> {
    let k = logits.shape()[logits.rank() - 1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if v.wide() > row[best].wide() {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub test_accuracy: Option<f64>,
}

/// One pass over `data` in an order drawn from `shuffle_seed`.
pub fn train_epoch<S: Scalar>(
    net: &mut RtformerNet<S>,
    data: &Dataset<S>,
    opt: &mut Sgd,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<EpochMetrics> {
    if net.mode() != NetMode::Train {
        return Err(Error::Mode {
            mode: format!("{:?}", net.mode()).to_lowercase(),
            what: "train_epoch".into(),
        });
    }
    if data.is_empty() || batch_size == 0 {
        return invalid("training needs a non-empty dataset and batch size");
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    for chunk in order.chunks(batch_size) {
        let (x, y) = data.batch(chunk)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let logits = net.forward_train(&mut tape, xv)?;
        let loss = cross_entropy_op(&mut tape, logits, &y)?;
        let lv = tape.value(loss).data()[0].wide();
        if !lv.is_finite() {
            return Err(Error::NonFinite { index: 0, value: lv });
        }
        loss_sum += lv * chunk.len() as f64;
        correct += argmax_rows(tape.value(logits))
            .iter()
            .zip(&y)
            .filter(|(p, l)| p == l)
            .count();
        tape.backward(loss)?;
        opt.step(net, &tape);
    }
    Ok(EpochMetrics {
        epoch: 0,
        loss: loss_sum / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
        test_accuracy: None,
    })
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
}

/// Inference-mode loss and accuracy.
pub fn evaluate<S: Scalar>(net: &RtformerNet<S>, data: &Dataset<S>, batch_size: usize) -> Result<Evaluation> {
    let (mut loss_sum, mut predictions) = (0.0, Vec::with_capacity(data.len()));
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let logits = net.infer(&x, InferOptions::default())?.logits;
        loss_sum += cross_entropy(&logits, &y)? * chunk.len() as f64;
        predictions.extend(argmax_rows(&logits));
    }
    let n = data.len().max(1) as f64;
    let correct = predictions.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(Evaluation {
        loss: loss_sum / n,
        accuracy: correct as f64 / n,
        predictions,
    })
}

/// Train for `cfg.epochs`, evaluating on `test` after each epoch. The net is
/// left in inference mode.
pub fn fit<S: Scalar>(
    net: &mut RtformerNet<S>,
    train: &Dataset<S>,
    test: Option<&Dataset<S>>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    net.set_mode(NetMode::Train)?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut m = train_epoch(
            net,
            train,
            &mut opt,
            cfg.batch_size,
            cfg.seed.wrapping_add(epoch as u64),
        )?;
        m.epoch = epoch + 1;
        if let Some(t) = test {
            m.test_accuracy = Some(evaluate(net, t, cfg.batch_size)?.accuracy);
        }
        on_epoch(&m);
        history.push(m);
    }
    net.set_mode(NetMode::Infer)?;
    Ok(history)
}
