//! Operation counting: dense MAC work for analog layers and event-driven
//! AC work for spiking layers.
//!
//! A layer whose input is real-valued (the first layer on raw pixels, the
//! classification head on firing rates) costs one MAC per weight
//! application. A layer whose input is a spike train costs one AC per
//! accumulation actually triggered, which the rate-scaled formula
//! `static_macs x mean_input_rate x rows` counts. Counters are 64-bit
//! integers, rounded once per layer.

use crate::arch::{ArchSpec, LayerSummary, LayerTrace};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Counts for one parameterized layer over everything it processed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerEnergy {
    pub label: String,
    pub mac_ops: u64,
    pub ac_ops: u64,
    /// Input spikes seen by this layer.
    pub spike_count: u64,
    pub neuron_count: u64,
    pub timesteps: u64,
}

/// Per-layer operation ledger for one forward pass or an aggregate of
/// several. Totals are always sums over the per-layer records.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub layers: Vec<LayerEnergy>,
    /// MACs spent by the first layer on real-valued input, kept out of the
    /// AC totals so the analog entry cost stays inspectable.
    pub input_layer_macs: u64,
}

impl EnergyLedger {
    /// All multiply-accumulate work, including the input layer and head.
    pub fn total_mac_ops(&self) -> u64 {
        self.layers.iter().map(|l| l.mac_ops).sum()
    }

    pub fn total_ac_ops(&self) -> u64 {
        self.layers.iter().map(|l| l.ac_ops).sum()
    }

    pub fn total_spikes(&self) -> u64 {
        self.layers.iter().map(|l| l.spike_count).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Divide every counter by `n`, rounding to nearest; used to average
    /// ledgers over evaluation repeats.
    pub fn divided(&self, n: u64) -> Result<EnergyLedger> {
        if n == 0 {
            return Err(Error::invalid("divided", "divisor must be positive"));
        }
        let div = |v: u64| (v + n / 2) / n;
        Ok(EnergyLedger {
            layers: self
                .layers
                .iter()
                .map(|l| LayerEnergy {
                    label: l.label.clone(),
                    mac_ops: div(l.mac_ops),
                    ac_ops: div(l.ac_ops),
                    spike_count: div(l.spike_count),
                    neuron_count: l.neuron_count,
                    timesteps: l.timesteps,
                })
                .collect(),
            input_layer_macs: div(self.input_layer_macs),
        })
    }
}

/// Static per-layer MAC counts for one sample, independent of any input.
pub fn count_macs(spec: &ArchSpec) -> Result<Vec<(String, u64)>> {
    Ok(spec
        .layer_summaries()?
        .iter()
        .map(|l| (l.label.clone(), l.macs_per_sample))
        .collect())
}

/// Build a ledger from the forward trace of one batch. `summaries` must
/// come from the same spec that produced the trace; every parameterized
/// layer needs its trace entry.
pub fn ledger_from_trace(
    summaries: &[LayerSummary],
    trace: &[LayerTrace],
    t_steps: usize,
) -> Result<EnergyLedger> {
    if summaries.len() != trace.len() {
        return Err(Error::invalid(
            "ledger_from_trace",
            format!("{} layers but {} trace entries", summaries.len(), trace.len()),
        ));
    }
    let mut layers = Vec::with_capacity(trace.len());
    let mut input_layer_macs = 0u64;
    for (s, t) in summaries.iter().zip(trace) {
        if s.label != t.label {
            return Err(Error::invalid(
                "ledger_from_trace",
                format!("layer {} has trace entry {}", s.label, t.label),
            ));
        }
        if !(0.0..=1.0 + 1e-12).contains(&t.mean_input_rate) && !t.analog_input {
            return Err(Error::invalid(
                "ledger_from_trace",
                format!("spike rate {} out of range for {}", t.mean_input_rate, t.label),
            ));
        }
        let (mac_ops, ac_ops, spike_count) = if t.analog_input {
            (s.macs_per_sample * t.rows as u64, 0, 0)
        } else {
            let acs = (s.macs_per_sample as f64 * t.mean_input_rate * t.rows as f64).round();
            let spikes = (t.mean_input_rate * t.input_numel as f64).round();
            (0, acs as u64, spikes as u64)
        };
        layers.push(LayerEnergy {
            label: s.label.clone(),
            mac_ops,
            ac_ops,
            spike_count,
            neuron_count: s.out_neurons * t.rows as u64,
            timesteps: t_steps as u64,
        });
    }
    if let (Some(first), Some(t)) = (layers.first(), trace.first()) {
        if t.analog_input {
            input_layer_macs = first.mac_ops;
        }
    }
    Ok(EnergyLedger { layers, input_layer_macs })
}

/// Elementwise sum of compatible ledgers. The empty ledger is the
/// identity; non-empty ledgers must share the layer schema.
pub fn merge_ledgers(ledgers: &[EnergyLedger]) -> Result<EnergyLedger> {
    let mut acc = EnergyLedger::default();
    for l in ledgers {
        if l.is_empty() {
            continue;
        }
        if acc.is_empty() {
            acc = l.clone();
            continue;
        }
        if acc.layers.len() != l.layers.len() {
            return Err(Error::invalid("merge_ledgers", "layer count mismatch"));
        }
        for (a, b) in acc.layers.iter_mut().zip(&l.layers) {
            if a.label != b.label {
                return Err(Error::invalid(
                    "merge_ledgers",
                    format!("layer {} merged with {}", a.label, b.label),
                ));
            }
            a.mac_ops += b.mac_ops;
            a.ac_ops += b.ac_ops;
            a.spike_count += b.spike_count;
            a.neuron_count += b.neuron_count;
        }
        acc.input_layer_macs += l.input_layer_macs;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_model, tiny_spec, vgg_spec, NetKind};
    use crate::autodiff::{SpikeMode, Tape};
    use crate::snn::encode_repeat;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn linear_summary(label: &str, d_in: usize, d_out: usize) -> LayerSummary {
        LayerSummary {
            label: label.into(),
            macs_per_sample: (d_in * d_out) as u64,
            params: (d_in * d_out + d_out) as u64,
            out_neurons: d_out as u64,
        }
    }

    fn spike_trace(label: &str, spikes: &Tensor, analog: bool) -> LayerTrace {
        LayerTrace {
            label: label.into(),
            mean_input_rate: spikes.mean(),
            rows: spikes.shape[0],
            input_numel: spikes.len(),
            analog_input: analog,
        }
    }

    #[test]
    fn linear_mac_example() {
        let spec = tiny_spec(NetKind::Ann, [3, 8, 8], 4, 16, true);
        let macs = count_macs(&spec).unwrap();
        // head: 16 features to 4 classes
        assert_eq!(macs.last().unwrap().1, 64);
    }

    #[test]
    fn one_by_one_conv_example() {
        let mut spec = tiny_spec(NetKind::Ann, [3, 4, 4], 4, 8, false);
        spec.blocks = vec![crate::arch::BlockSpec::ConvBlock {
            out_channels: 8,
            kernel: 1,
            stride: 1,
            padding: 0,
        }];
        let macs = count_macs(&spec).unwrap();
        assert_eq!(macs[0].1, 384);
    }

    #[test]
    fn saturated_rate_matches_static_macs() {
        let s = linear_summary("l0", 20, 7);
        let spikes = Tensor::full(&[1, 20], 1.0);
        let ledger =
            ledger_from_trace(&[s], &[spike_trace("l0", &spikes, false)], 1).unwrap();
        assert_eq!(ledger.layers[0].ac_ops, 140);
        assert_eq!(ledger.layers[0].spike_count, 20);
    }

    #[test]
    fn zero_spikes_zero_acs() {
        let s = linear_summary("l0", 20, 7);
        let spikes = Tensor::zeros(&[4, 20]);
        let ledger =
            ledger_from_trace(&[s], &[spike_trace("l0", &spikes, false)], 4).unwrap();
        assert_eq!(ledger.layers[0].ac_ops, 0);
        assert_eq!(ledger.layers[0].spike_count, 0);
        assert_eq!(ledger.total_ac_ops(), 0);
    }

    /// Every input spike into a dense layer fans out to exactly `d_out`
    /// accumulations, so summing over individual spikes is an independent
    /// oracle for the rate-scaled formula.
    #[test]
    fn event_enumeration_oracle_linear() {
        let mut rng = crate::rng::substream(3, "energy");
        for trial in 0..10 {
            let t_steps = 1 + trial % 4;
            let b = 1 + trial % 3;
            let d_in = 5 + trial;
            let d_out = 3 + trial % 5;
            let mut spikes = Tensor::zeros(&[t_steps * b, d_in]);
            for v in spikes.data.iter_mut() {
                *v = if rng.gen_bool(0.4) { 1.0 } else { 0.0 };
            }
            let events: u64 = spikes.data.iter().map(|s| (*s as u64) * d_out as u64).sum();
            let ledger = ledger_from_trace(
                &[linear_summary("l0", d_in, d_out)],
                &[spike_trace("l0", &spikes, false)],
                t_steps,
            )
            .unwrap();
            assert_eq!(ledger.layers[0].ac_ops, events);
            let n_spikes: f64 = spikes.data.iter().sum();
            assert_eq!(ledger.layers[0].spike_count, n_spikes as u64);
        }
    }

    /// Same oracle through a two-layer stack with a prescribed trace:
    /// rate one half on half the positions.
    #[test]
    fn event_enumeration_oracle_two_layer() {
        let (d_in, d_mid, d_out, t_steps) = (8, 6, 4, 2);
        let mut l1_in = Tensor::zeros(&[t_steps, d_in]);
        for i in 0..d_in / 2 {
            l1_in.data[i] = 1.0; // half the positions spike at t=0 only
        }
        let mut l2_in = Tensor::zeros(&[t_steps, d_mid]);
        l2_in.data[0] = 1.0;
        l2_in.data[d_mid] = 1.0;
        let summaries = [
            linear_summary("l0", d_in, d_mid),
            linear_summary("l1", d_mid, d_out),
        ];
        let trace = [
            spike_trace("l0", &l1_in, false),
            spike_trace("l1", &l2_in, false),
        ];
        let ledger = ledger_from_trace(&summaries, &trace, t_steps).unwrap();
        let l1_events = 4 * d_mid as u64;
        let l2_events = 2 * d_out as u64;
        assert_eq!(ledger.layers[0].ac_ops, l1_events);
        assert_eq!(ledger.layers[1].ac_ops, l2_events);
        assert_eq!(ledger.total_ac_ops(), l1_events + l2_events);
    }

    #[test]
    fn acs_bounded_by_static_work() {
        let s = linear_summary("l0", 30, 11);
        let mut spikes = Tensor::full(&[6, 30], 0.0);
        for (i, v) in spikes.data.iter_mut().enumerate() {
            *v = (i % 3 == 0) as usize as f64;
        }
        let ledger =
            ledger_from_trace(std::slice::from_ref(&s), &[spike_trace("l0", &spikes, false)], 6)
                .unwrap();
        assert!(ledger.layers[0].ac_ops <= s.macs_per_sample * 6);
    }

    #[test]
    fn trace_mismatch_rejected() {
        let s = linear_summary("l0", 4, 2);
        let spikes = Tensor::zeros(&[1, 4]);
        assert!(ledger_from_trace(&[s.clone()], &[], 1).is_err());
        assert!(
            ledger_from_trace(&[s], &[spike_trace("other", &spikes, false)], 1).is_err()
        );
    }

    #[test]
    fn merge_identity_and_commutativity() {
        let s = linear_summary("l0", 4, 2);
        let a_spikes = Tensor::full(&[2, 4], 1.0);
        let mut b_spikes = Tensor::zeros(&[2, 4]);
        b_spikes.data[0] = 1.0;
        let a = ledger_from_trace(
            std::slice::from_ref(&s),
            &[spike_trace("l0", &a_spikes, false)],
            2,
        )
        .unwrap();
        let b = ledger_from_trace(
            std::slice::from_ref(&s),
            &[spike_trace("l0", &b_spikes, false)],
            2,
        )
        .unwrap();
        let id = EnergyLedger::default();
        assert_eq!(merge_ledgers(&[a.clone(), id]).unwrap(), a);
        assert_eq!(
            merge_ledgers(&[a.clone(), b.clone()]).unwrap(),
            merge_ledgers(&[b.clone(), a.clone()]).unwrap()
        );
        let ab = merge_ledgers(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(ab.total_ac_ops(), a.total_ac_ops() + b.total_ac_ops());
    }

    #[test]
    fn adding_spikes_never_decreases_acs() {
        let s = linear_summary("l0", 10, 3);
        let mut spikes = Tensor::zeros(&[4, 10]);
        let mut prev = 0;
        for i in 0..spikes.data.len() {
            spikes.data[i] = 1.0;
            let ledger = ledger_from_trace(
                std::slice::from_ref(&s),
                &[spike_trace("l0", &spikes, false)],
                4,
            )
            .unwrap();
            assert!(ledger.layers[0].ac_ops >= prev, "step {}", i);
            prev = ledger.layers[0].ac_ops;
        }
    }

    #[test]
    fn snn_forward_ledger_end_to_end() {
        let spec = tiny_spec(NetKind::Snn, [3, 8, 8], 4, 16, true);
        let mut model = build_model(&spec, 1).unwrap();
        let mut rng = crate::rng::substream(2, "x");
        let mut img = Tensor::uniform(&[3, 3, 8, 8], 0.5, &mut rng);
        for v in img.data.iter_mut() {
            *v += 0.5;
        }
        let enc = encode_repeat(&img, 4).unwrap();
        let mut tape = Tape::new();
        let out = model
            .forward(&mut tape, &enc, 4, SpikeMode::Hard, true)
            .unwrap();
        let summaries = spec.layer_summaries().unwrap();
        let ledger = ledger_from_trace(&summaries, &out.trace, 4).unwrap();
        // first conv runs on pixels for all T x B rows
        assert_eq!(ledger.input_layer_macs, summaries[0].macs_per_sample * 12);
        assert_eq!(ledger.layers[0].ac_ops, 0);
        // spiking layers stay within their static budget
        for (l, s) in ledger.layers.iter().zip(&summaries).skip(1) {
            assert!(l.ac_ops <= s.macs_per_sample * 12, "{}", l.label);
        }
        // head consumes rates, counted as MACs over B rows
        let head = ledger.layers.last().unwrap();
        assert_eq!(head.mac_ops, summaries.last().unwrap().macs_per_sample * 3);
        assert_eq!(head.ac_ops, 0);
    }

    #[test]
    fn static_counts_match_reference_table() {
        let spec = vgg_spec(19, false, NetKind::Ann).unwrap();
        let total: u64 = count_macs(&spec).unwrap().iter().map(|(_, m)| m).sum();
        assert!((total as f64 - 398.0e6).abs() <= 398.0e6 * 0.05);
    }
}
