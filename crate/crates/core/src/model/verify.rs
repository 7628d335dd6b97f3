//! Sample-by-sample comparison of an unfused network against its fused form.
//!
//! Spike sites are walked in network order. At the first site where the two
//! nets disagree, each differing neuron is judged by the reference margin at
//! its first differing timestep: inside `band` it is a legitimate rounding
//! flip, otherwise a mismatch. Everything downstream of that site is
//! consequence and is not inspected.

use super::data::Dataset;
use super::net::{InferOptions, RtformerNet};
use super::train::argmax_rows;
use crate::error::{Error, Result};
use crate::tensor::{max_rel_error, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerifyOptions {
    /// Max relative logit error per sample.
    pub tolerance: f64,
    /// Half-width of the boundary band around each threshold.
    pub band: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            tolerance: 1e-4,
            band: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleCheck {
    pub index: usize,
    pub logit_error: f64,
    /// First site where spikes differ, if any.
    pub divergence: Option<String>,
    pub band_flips: usize,
    pub mismatches: usize,
    pub argmax_agrees: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    pub options: VerifyOptions,
    pub samples: Vec<SampleCheck>,
}

impl VerifyReport {
    /// Spike mismatches outside the boundary band, over all samples.
    pub fn mismatches(&self) -> usize {
        self.samples.iter().map(|s| s.mismatches).sum()
    }

    /// Samples whose spikes diverged only through in-band flips.
    pub fn band_affected(&self) -> usize {
        self.samples
            .iter()
            .filter(|s| s.divergence.is_some() && s.mismatches == 0)
            .count()
    }

    /// Samples with identical spikes whose logits still exceed the tolerance.
    pub fn logit_failures(&self) -> usize {
        self.samples
            .iter()
            .filter(|s| s.divergence.is_none() && s.logit_error >= self.options.tolerance)
            .count()
    }

    pub fn max_logit_error(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.logit_error))
    }

    pub fn argmax_agreement(&self) -> f64 {
        if self.samples.is_empty() {
            return 1.0;
        }
        self.samples.iter().filter(|s| s.argmax_agrees).count() as f64 / self.samples.len() as f64
    }

    pub fn passed(&self) -> bool {
        self.mismatches() == 0 && self.logit_failures() == 0
    }

    pub fn summary(&self) -> String {
        format!(
            "samples: {}\nmax logit relative error: {:.3e} (tolerance {:.1e})\nlogit failures: {}\n\
             samples with in-band flips: {}\nargmax agreement: {:.2}%\n{} mismatches outside boundary band\n",
            self.samples.len(),
            self.max_logit_error(),
            self.options.tolerance,
            self.logit_failures(),
            self.band_affected(),
            100.0 * self.argmax_agreement(),
            self.mismatches(),
        )
    }
}

fn check_sites<S: Scalar>(
    reference: &[(String, Tensor<S>)],
    margins: &[(String, Tensor<S>)],
    fused: &[(String, Tensor<S>)],
    band: f64,
) -> Result<(Option<String>, usize, usize)> {
    if reference.len() != fused.len() {
        return Err(Error::InvalidArgument(format!(
            "spike site count differs: {} vs {}",
            reference.len(),
            fused.len()
        )));
    }
    for (((id, a), (_, m)), (fid, b)) in reference.iter().zip(margins).zip(fused) {
        if id != fid || a.shape() != b.shape() {
            return Err(Error::InvalidArgument(format!(
                "spike site `{id}` does not line up with `{fid}`"
            )));
        }
        if a.data() == b.data() {
            continue;
        }
        let steps = a.shape()[0];
        let per = a.numel() / steps;
        let (mut flips, mut bad) = (0, 0);
        for i in 0..per {
            let first = (0..steps).map(|t| t * per + i).find(|&k| a.data()[k] != b.data()[k]);
            if let Some(k) = first {
                if m.data()[k].wide().abs() < band {
                    flips += 1;
                } else {
                    bad += 1;
                }
            }
        }
        return Ok((Some(id.clone()), flips, bad));
    }
    Ok((None, 0, 0))
}

/// Run every sample of `data` through both networks one at a time.
pub fn verify_fusion<S: Scalar>(
    reference: &RtformerNet<S>,
    fused: &RtformerNet<S>,
    data: &Dataset<S>,
    opts: VerifyOptions,
) -> Result<VerifyReport> {
    if reference.is_fused() || !fused.is_fused() {
        return Err(Error::Mode {
            mode: reference.mode().name().into(),
            what: "verification needs an unfused reference and a fused network".into(),
        });
    }
    // The seed only matters before training.
    let mut other = fused.config.clone();
    other.seed = reference.config.seed;
    if reference.config != other {
        return Err(Error::Config(
            "reference and fused networks have different configs".into(),
        ));
    }
    let rec = InferOptions {
        record_spikes: true,
        ..InferOptions::default()
    };
    let mut samples = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let (x, _) = data.batch(&[i])?;
        let r = reference.infer(
            &x,
            InferOptions {
                record_margins: true,
                ..rec
            },
        )?;
        let f = fused.infer(&x, rec)?;
        let (divergence, band_flips, mismatches) = check_sites(&r.spikes, &r.margins, &f.spikes, opts.band)?;
        samples.push(SampleCheck {
            index: i,
            logit_error: max_rel_error(&f.logits, &r.logits),
            divergence,
            band_flips,
            mismatches,
            argmax_agrees: argmax_rows(&r.logits) == argmax_rows(&f.logits),
        });
    }
    Ok(VerifyReport { options: opts, samples })
}
