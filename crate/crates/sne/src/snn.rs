//! Leaky Integrate-and-Fire dynamics, surrogate-gradient spiking, temporal
//! encoding, and firing-rate readout.
//!
//! Temporal tensors are stored time-major and flattened: row `t·B + b` of a
//! `[T·B, ...]` tensor holds timestep `t` of sample `b`. Convolutions and
//! batch norm then run once over the whole T·B batch, while LIF layers slice
//! out per-timestep blocks and carry membrane state across them.

use crate::autodiff::{SpikeMode, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// LIF neuron constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifParams {
    pub tau_m: f64,
    pub v_th: f64,
    pub v_reset: f64,
    pub surrogate_slope: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        LifParams {
            tau_m: 2.0,
            v_th: 1.0,
            v_reset: 0.0,
            surrogate_slope: 4.0,
        }
    }
}

impl LifParams {
    pub fn validate(&self) -> Result<()> {
        if self.tau_m < 1.0 {
            return Err(Error::invalid("lif_params", "tau_m must be >= 1"));
        }
        if self.v_th <= self.v_reset {
            return Err(Error::invalid("lif_params", "v_th must exceed v_reset"));
        }
        Ok(())
    }
}

/// One LIF update on the tape:
/// charge `H = V + (x − V)/τ`, fire `S = Θ(H − V_th)` (hard) or
/// `σ(a·(H − V_th))` (soft), reset `V' = H·(1 − S) + V_reset·S`.
/// Returns `(spike, new_state)`.
pub fn lif_step(
    tape: &mut Tape,
    state: Var,
    x: Var,
    params: &LifParams,
    mode: SpikeMode,
) -> Result<(Var, Var)> {
    if tape.shape(state) != tape.shape(x) {
        return Err(Error::shape(
            "lif_step",
            format!(
                "state {:?} vs input {:?}",
                tape.shape(state),
                tape.shape(x)
            ),
        ));
    }
    let drive = tape.sub(x, state)?;
    let charge = tape.scale(drive, 1.0 / params.tau_m);
    let h = tape.add(state, charge)?;
    let pre = tape.add_scalar(h, -params.v_th);
    let s = tape.spike(pre, params.surrogate_slope, mode);
    let hs = tape.mul(h, s)?;
    let kept = tape.sub(h, hs)?;
    let reset = tape.scale(s, params.v_reset);
    let v_next = tape.add(kept, reset)?;
    Ok((s, v_next))
}

/// Repeat an image batch identically for `t_steps` timesteps (time-major):
/// `[B, C, H, W] -> [T·B, C, H, W]`. Raw pixel values are used directly.
pub fn encode_repeat(image: &Tensor, t_steps: usize) -> Result<Tensor> {
    if t_steps == 0 {
        return Err(Error::invalid("encode_repeat", "T must be >= 1"));
    }
    if image.shape.is_empty() {
        return Err(Error::shape("encode_repeat", "input must be batched"));
    }
    let mut shape = image.shape.clone();
    shape[0] *= t_steps;
    let mut data = Vec::with_capacity(image.data.len() * t_steps);
    for _ in 0..t_steps {
        data.extend_from_slice(&image.data);
    }
    Tensor::new(shape, data)
}

/// Elementwise mean over the time axis: `[T·B, D] -> [B, D]`.
pub fn firing_rate_readout(spikes: &Tensor, t_steps: usize) -> Result<Tensor> {
    if t_steps == 0 || spikes.shape.is_empty() || spikes.shape[0] % t_steps != 0 {
        return Err(Error::shape(
            "firing_rate_readout",
            format!("{:?} not divisible into {} timesteps", spikes.shape, t_steps),
        ));
    }
    let b = spikes.shape[0] / t_steps;
    let rest: usize = spikes.shape[1..].iter().product();
    let mut shape = spikes.shape.clone();
    shape[0] = b;
    let mut out = Tensor::zeros(&shape);
    for t in 0..t_steps {
        for bi in 0..b {
            for i in 0..rest {
                out.data[bi * rest + i] += spikes.data[(t * b + bi) * rest + i];
            }
        }
    }
    for v in out.data.iter_mut() {
        *v /= t_steps as f64;
    }
    Ok(out)
}
