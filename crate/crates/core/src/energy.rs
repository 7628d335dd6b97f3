//! Operation counting and the two-term energy estimate.
//!
//! Synaptic layers are classified at runtime: a layer whose input is exactly
//! binary performs accumulates only, scaled by the measured firing rate;
//! anything else is costed as dense multiply-accumulates. Normalization
//! affines still present at inference cost one MAC per element. Biases,
//! residual adds, membrane updates and threshold comparisons are free.
//! All counts are per sample.

use std::fmt::Write as _;

use crate::error::{invalid, Error, Result};
use crate::model::{InferOptions, NetMode, RtformerNet};
use crate::tensor::{Scalar, Tensor};

/// Energy per multiply-accumulate, picojoules.
pub const E_MAC_PJ: f64 = 4.6;
/// Energy per accumulate, picojoules.
pub const E_AC_PJ: f64 = 0.9;
pub const PJ_PER_MJ: f64 = 1e9;

/// Dense MAC count of a conv over one sample: `T * Cout * Cin * k^2 * Hout * Wout`.
pub fn count_conv_macs(steps: u64, cout: u64, cin: u64, k: u64, hout: u64, wout: u64) -> u64 {
    steps * cout * cin * k * k * hout * wout
}

/// `rate * connections * T` for a spike-driven layer.
pub fn count_spike_acs(connections_per_step: u64, steps: u64, firing_rate: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&firing_rate) {
        return invalid(format!("firing rate {firing_rate} outside [0, 1]"));
    }
    Ok(firing_rate * connections_per_step as f64 * steps as f64)
}

/// What a layer did during a probe run, before costing.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// Weighted connections; `binary` and `rate` describe the observed input.
    Synapse {
        connections_per_step: u64,
        steps: u64,
        binary: bool,
        rate: f64,
    },
    /// Elementwise scale-and-shift, one MAC per element.
    Affine { elements: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpRecord {
    pub layer_id: String,
    pub kind: OpKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpCount {
    pub layer_id: String,
    pub macs: u64,
    pub acs: f64,
    /// Mean spike rate of the input; 1 for analog inputs.
    pub firing_rate: f64,
}

impl OpCount {
    pub fn from_record(r: &OpRecord) -> Result<Self> {
        Ok(match r.kind {
            OpKind::Synapse {
                connections_per_step,
                steps,
                binary: true,
                rate,
            } => OpCount {
                layer_id: r.layer_id.clone(),
                macs: 0,
                acs: count_spike_acs(connections_per_step, steps, rate)?,
                firing_rate: rate,
            },
            OpKind::Synapse {
                connections_per_step,
                steps,
                binary: false,
                ..
            } => OpCount {
                layer_id: r.layer_id.clone(),
                macs: connections_per_step * steps,
                acs: 0.0,
                firing_rate: 1.0,
            },
            OpKind::Affine { elements } => OpCount {
                layer_id: r.layer_id.clone(),
                macs: elements,
                acs: 0.0,
                firing_rate: 1.0,
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergyReport {
    pub layers: Vec<OpCount>,
    pub e_mac_pj: f64,
    pub e_ac_pj: f64,
    pub total_pj: f64,
}

impl EnergyReport {
    pub fn new(layers: Vec<OpCount>) -> Self {
        let mut r = EnergyReport {
            layers,
            e_mac_pj: E_MAC_PJ,
            e_ac_pj: E_AC_PJ,
            total_pj: 0.0,
        };
        r.total_pj = r.e_mac_pj * r.total_macs() as f64 + r.e_ac_pj * r.total_acs();
        r
    }

    pub fn from_records(records: &[OpRecord]) -> Result<Self> {
        Ok(Self::new(
            records.iter().map(OpCount::from_record).collect::<Result<_>>()?,
        ))
    }

    pub fn total_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }

    pub fn total_acs(&self) -> f64 {
        self.layers.iter().map(|l| l.acs).sum()
    }

    pub fn total_mj(&self) -> f64 {
        pj_to_mj(self.total_pj)
    }

    pub fn layer_pj(&self, l: &OpCount) -> f64 {
        self.e_mac_pj * l.macs as f64 + self.e_ac_pj * l.acs
    }

    pub fn to_table(&self) -> String {
        let width = self.layers.iter().map(|l| l.layer_id.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "E_MAC = {} pJ, E_AC = {} pJ (per sample)",
            self.e_mac_pj, self.e_ac_pj
        );
        let _ = writeln!(
            s,
            "{:<width$}  {:>12}  {:>14}  {:>6}  {:>14}",
            "layer", "MACs", "ACs", "rate", "energy_pJ"
        );
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:<width$}  {:>12}  {:>14.1}  {:>6.4}  {:>14.1}",
                l.layer_id,
                l.macs,
                l.acs,
                l.firing_rate,
                self.layer_pj(l)
            );
        }
        let _ = writeln!(
            s,
            "{:<width$}  {:>12}  {:>14.1}  {:>6}  {:>14.1}",
            "total",
            self.total_macs(),
            self.total_acs(),
            "",
            self.total_pj
        );
        let _ = writeln!(s, "total energy: {:.6e} mJ", self.total_mj());
        s
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "layer",
            "macs",
            "acs",
            "firing_rate",
            "energy_pj",
            "e_mac_pj",
            "e_ac_pj",
        ])?;
        for l in &self.layers {
            w.write_record([
                l.layer_id.clone(),
                l.macs.to_string(),
                format!("{}", l.acs),
                format!("{}", l.firing_rate),
                format!("{}", self.layer_pj(l)),
                self.e_mac_pj.to_string(),
                self.e_ac_pj.to_string(),
            ])?;
        }
        w.write_record([
            "total".to_string(),
            self.total_macs().to_string(),
            format!("{}", self.total_acs()),
            String::new(),
            format!("{}", self.total_pj),
            self.e_mac_pj.to_string(),
            self.e_ac_pj.to_string(),
        ])?;
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Horizontal bar chart of per-layer energy.
    pub fn to_svg(&self) -> String {
        let (label_w, bar_w, row_h, top) = (220.0, 480.0, 18.0, 40.0);
        let max = self.layers.iter().map(|l| self.layer_pj(l)).fold(0.0f64, f64::max);
        let height = top + row_h * self.layers.len() as f64 + 30.0;
        let width = label_w + bar_w + 120.0;
        let mut s = String::new();
        let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" font-family="monospace" font-size="11">"#
        );
        let _ = writeln!(
            s,
            r#"<text x="10" y="20">energy per layer (pJ), E_MAC = {} pJ, E_AC = {} pJ, total {:.1} pJ</text>"#,
            self.e_mac_pj, self.e_ac_pj, self.total_pj
        );
        for (i, l) in self.layers.iter().enumerate() {
            let y = top + row_h * i as f64;
            let e = self.layer_pj(l);
            let w = if max > 0.0 { bar_w * e / max } else { 0.0 };
            let color = if l.macs > 0 { "#c0504d" } else { "#4f81bd" };
            let _ = writeln!(
                s,
                r#"<text x="10" y="{:.1}">{}</text><rect x="{label_w}" y="{:.1}" width="{w:.2}" height="{:.1}" fill="{color}"/><text x="{:.1}" y="{:.1}">{e:.1}</text>"#,
                y + 12.0,
                xml_escape(&l.layer_id),
                y + 2.0,
                row_h - 4.0,
                label_w + w + 4.0,
                y + 12.0
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn pj_to_mj(pj: f64) -> f64 {
    pj / PJ_PER_MJ
}

/// Unfused and fused reports on the same probe.
#[derive(Clone, Debug)]
pub struct EnergyComparison {
    pub unfused: EnergyReport,
    pub fused: EnergyReport,
}

impl EnergyComparison {
    /// Unfused minus fused accumulate count.
    pub fn ac_delta(&self) -> f64 {
        self.unfused.total_acs() - self.fused.total_acs()
    }

    pub fn mac_delta(&self) -> i64 {
        self.unfused.total_macs() as i64 - self.fused.total_macs() as i64
    }
}

/// Run `probe` (`[T, B, C, H, W]`) through an inference-mode network and cost it.
pub fn estimate_energy<S: Scalar>(net: &RtformerNet<S>, probe: &Tensor<S>) -> Result<EnergyReport> {
    if net.mode() == NetMode::Train {
        return Err(Error::Mode {
            mode: "train".into(),
            what: "energy estimation".into(),
        });
    }
    let out = net.infer(
        probe,
        InferOptions {
            record_ops: true,
            ..InferOptions::default()
        },
    )?;
    EnergyReport::from_records(&out.ops)
}

/// Cost an unfused `net` and its fused counterpart on the same probe.
pub fn compare_energy<S: Scalar>(net: &RtformerNet<S>, probe: &Tensor<S>) -> Result<EnergyComparison> {
    let unfused = estimate_energy(net, probe)?;
    Ok(EnergyComparison {
        unfused,
        fused: estimate_energy(&net.fuse_network()?, probe)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{train_epoch, Dataset, RtformerConfig, Sgd};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> RtformerConfig {
        RtformerConfig {
            steps: 2,
            depth: 1,
            dim: 8,
            heads: 2,
            height: 8,
            width: 8,
            ..RtformerConfig::default()
        }
    }

    fn spikes(cfg: &RtformerConfig, batch: usize, p: f64, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [cfg.steps, batch, cfg.in_channels, cfg.height, cfg.width];
        Tensor::from_fn(&shape, |_| if rng.gen::<f64>() < p { 1.0 } else { 0.0 })
    }

    // One epoch of SGD so every normalization layer has running statistics.
    fn populated_net() -> RtformerNet<f32> {
        let cfg = small_config();
        let mut net = RtformerNet::build(&cfg).unwrap();
        let samples = (0..8)
            .map(|i| {
                let s = spikes(&cfg, 1, 0.3, i);
                s.reshape(&[cfg.steps, cfg.in_channels, cfg.height, cfg.width]).unwrap()
            })
            .collect();
        let data = Dataset::new(samples, (0..8).map(|i| i % cfg.classes).collect(), cfg.classes).unwrap();
        train_epoch(&mut net, &data, &mut Sgd::new(0.05, 0.9), 4, 0).unwrap();
        net.set_mode(NetMode::Infer).unwrap();
        net
    }

    // Walk every output position, output channel, input channel and tap.
    fn brute_force_macs(steps: u64, cout: u64, cin: u64, k: u64, hout: u64, wout: u64) -> u64 {
        let mut n = 0;
        for _t in 0..steps {
            for _o in 0..cout {
                for _i in 0..hout * wout {
                    for _c in 0..cin {
                        for _tap in 0..k * k {
                            n += 1;
                        }
                    }
                }
            }
        }
        n
    }

    #[test]
    fn conv_mac_examples() {
        assert_eq!(count_conv_macs(1, 1, 1, 1, 1, 1), 1);
        assert_eq!(
            count_conv_macs(4, 8, 3, 3, 16, 16),
            brute_force_macs(4, 8, 3, 3, 16, 16)
        );
        assert_eq!(count_conv_macs(4, 8, 3, 3, 16, 16), 221_184);
        assert_eq!(count_conv_macs(4, 8, 3, 3, 32, 32), 884_736);
        assert_eq!(
            count_conv_macs(4, 8, 3, 3, 8, 8) * 4,
            count_conv_macs(4, 8, 3, 3, 16, 16)
        );
    }

    #[test]
    fn spike_ac_examples() {
        assert_eq!(count_spike_acs(4 * 9 * 64, 2, 0.0).unwrap(), 0.0);
        assert_eq!(count_spike_acs(4 * 9 * 64, 2, 1.0).unwrap(), (4 * 9 * 64 * 2) as f64);
        assert_eq!(count_spike_acs(4 * 9 * 64, 2, 0.25).unwrap(), 1152.0);
        assert!(count_spike_acs(10, 1, 1.5).is_err());
        assert!(count_spike_acs(10, 1, -0.1).is_err());
    }

    #[test]
    fn two_term_total() {
        let r = EnergyReport::new(vec![
            OpCount {
                layer_id: "enc".into(),
                macs: 1000,
                acs: 0.0,
                firing_rate: 1.0,
            },
            OpCount {
                layer_id: "blk".into(),
                macs: 0,
                acs: 2000.0,
                firing_rate: 0.1,
            },
        ]);
        assert_eq!(r.total_pj, 6400.0);
        assert_eq!(r.total_mj(), 6.4e-6);
        assert_eq!(pj_to_mj(1e9), 1.0);
    }

    #[test]
    fn record_costing() {
        let recs = [
            OpRecord {
                layer_id: "a".into(),
                kind: OpKind::Synapse {
                    connections_per_step: 100,
                    steps: 4,
                    binary: false,
                    rate: 0.3,
                },
            },
            OpRecord {
                layer_id: "b".into(),
                kind: OpKind::Synapse {
                    connections_per_step: 100,
                    steps: 4,
                    binary: true,
                    rate: 0.5,
                },
            },
            OpRecord {
                layer_id: "c".into(),
                kind: OpKind::Affine { elements: 7 },
            },
        ];
        let r = EnergyReport::from_records(&recs).unwrap();
        assert_eq!(r.layers[0].macs, 400);
        assert_eq!(r.layers[1].macs, 0);
        assert_eq!(r.layers[1].acs, 200.0);
        assert_eq!(r.layers[2].macs, 7);
        assert_eq!(r.total_macs(), 407);
    }

    #[test]
    fn reports_carry_constants() {
        let r = EnergyReport::new(vec![OpCount {
            layer_id: "x<y".into(),
            macs: 3,
            acs: 1.5,
            firing_rate: 0.5,
        }]);
        for text in [r.to_table(), r.to_csv().unwrap(), r.to_svg()] {
            assert!(text.contains("4.6"));
            assert!(text.contains("0.9"));
        }
        assert!(r.to_svg().contains("x&lt;y"));
        assert!(r.to_table().contains("mJ"));
        assert_eq!(r.to_csv().unwrap().lines().count(), 3);
    }

    proptest! {
        #[test]
        fn energy_grows_with_rate(
            macs in 0u64..1_000_000,
            conn in 1u64..100_000,
            steps in 1u64..16,
            lo in 0.0f64..1.0,
            bump in 0.0f64..1.0,
        ) {
            let hi = (lo + bump).min(1.0);
            let at = |rate: f64| {
                EnergyReport::new(vec![
                    OpCount { layer_id: "enc".into(), macs, acs: 0.0, firing_rate: 1.0 },
                    OpCount {
                        layer_id: "s".into(),
                        macs: 0,
                        acs: count_spike_acs(conn, steps, rate).unwrap(),
                        firing_rate: rate,
                    },
                ])
                .total_pj
            };
            prop_assert!(at(hi) >= at(lo));
        }
    }

    #[test]
    fn eq8_hand_example() {
        let r = EnergyReport::new(vec![
            OpCount {
                layer_id: "conv".into(),
                macs: 1000,
                acs: 0.0,
                firing_rate: 1.0,
            },
            OpCount {
                layer_id: "spk".into(),
                macs: 0,
                acs: 2000.0,
                firing_rate: 0.5,
            },
        ]);
        assert_eq!(r.total_pj, 6400.0);
    }

    #[test]
    fn train_mode_rejected() {
        let cfg = small_config();
        let net = RtformerNet::<f32>::build(&cfg).unwrap();
        assert!(matches!(
            estimate_energy(&net, &spikes(&cfg, 1, 0.3, 0)),
            Err(Error::Mode { .. })
        ));
    }

    #[test]
    fn probe_costing() {
        let net = populated_net();
        let cfg = net.config.clone();
        let probe = spikes(&cfg, 3, 0.3, 99);
        let a = estimate_energy(&net, &probe).unwrap();
        assert_eq!(a, estimate_energy(&net, &probe).unwrap());
        for l in &a.layers {
            assert!(l.acs >= 0.0 && (0.0..=1.0).contains(&l.firing_rate));
        }
        let cmp = compare_energy(&net, &probe).unwrap();
        assert!(cmp.fused.total_acs() <= cmp.unfused.total_acs());
        assert!(cmp.fused.total_macs() < cmp.unfused.total_macs());
        assert!(cmp.fused.total_pj < cmp.unfused.total_pj);
    }

    #[test]
    fn zero_probe_costs_macs_only() {
        let net = populated_net();
        let cfg = net.config.clone();
        let r = estimate_energy(&net, &spikes(&cfg, 2, 0.0, 0)).unwrap();
        assert!(r.layers.iter().all(|l| l.acs == 0.0));
        assert_eq!(r.total_pj, E_MAC_PJ * r.total_macs() as f64);
    }
}
