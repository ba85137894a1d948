//! Integrate-and-fire membrane dynamics.
//!
//! Non-leaky IF integrates `C_m dV/dt = I`. The leaky variant integrates
//! `(C_m R_m) dV/dt = R_m I - V` with forward Euler, which requires
//! `dt < C_m R_m`. After integration a neuron spikes when `V >= V_threshold`
//! and is then reset and held refractory for `refractory_steps` steps.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NeuronError {
    #[error("invalid neuron parameters: {0}")]
    InvalidParams(String),
    #[error("Euler step dt = {dt} must be below the membrane time constant {tau}")]
    UnstableTimestep { dt: f64, tau: f64 },
    #[error("{states} neuron states but {currents} input currents")]
    LengthMismatch { states: usize, currents: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuronModel {
    If,
    Lif,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetMode {
    /// `V <- V_reset`.
    ToResetValue,
    /// `V <- V - V_threshold`, keeping the residual charge.
    SubtractThreshold,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronParams {
    pub model: NeuronModel,
    pub c_m: f64,
    /// Membrane resistance; `f64::INFINITY` for a non-leaky membrane.
    #[serde(with = "maybe_infinite")]
    pub r_m: f64,
    pub v_threshold: f64,
    pub v_reset: f64,
    pub refractory_steps: u32,
    pub reset_mode: ResetMode,
    /// Optional floor on the membrane potential.
    pub v_min: Option<f64>,
}

impl Default for NeuronParams {
    fn default() -> Self {
        Self {
            model: NeuronModel::If,
            c_m: 1.0,
            r_m: f64::INFINITY,
            v_threshold: 1.0,
            v_reset: 0.0,
            refractory_steps: 0,
            reset_mode: ResetMode::ToResetValue,
            v_min: None,
        }
    }
}

impl NeuronParams {
    pub fn lif(c_m: f64, r_m: f64) -> Self {
        Self {
            model: NeuronModel::Lif,
            c_m,
            r_m,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), NeuronError> {
        let bad = |m: &str| Err(NeuronError::InvalidParams(m.into()));
        if !(self.c_m > 0.0 && self.c_m.is_finite()) {
            return bad("C_m must be positive and finite");
        }
        if self.r_m.is_nan() || self.r_m <= 0.0 {
            return bad("R_m must be positive or infinite");
        }
        if self.model == NeuronModel::Lif && !self.r_m.is_finite() {
            return bad("a leaky neuron needs a finite R_m");
        }
        if !(self.v_threshold.is_finite()
            && self.v_reset.is_finite()
            && self.v_threshold > self.v_reset)
        {
            return bad("V_threshold must exceed V_reset");
        }
        if let Some(v_min) = self.v_min {
            if !(v_min.is_finite() && v_min <= self.v_reset) {
                return bad("V_min must be finite and not above V_reset");
            }
        }
        Ok(())
    }

    /// Membrane time constant `C_m R_m` (infinite for IF).
    pub fn tau(&self) -> f64 {
        self.c_m * self.r_m
    }

    /// Smallest constant current that eventually makes a leaky neuron fire.
    pub fn threshold_current(&self) -> f64 {
        self.v_threshold / self.r_m
    }

    /// Check that `dt` is usable with these parameters.
    pub fn check_dt(&self, dt: f64) -> Result<(), NeuronError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(NeuronError::InvalidParams(format!(
                "dt must be positive, got {dt}"
            )));
        }
        if self.model == NeuronModel::Lif && dt >= self.tau() {
            return Err(NeuronError::UnstableTimestep {
                dt,
                tau: self.tau(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NeuronState {
    pub v_m: f64,
    pub refractory_remaining: u32,
}

#[inline]
fn settle(mut state: NeuronState, params: &NeuronParams) -> (NeuronState, bool) {
    if let Some(v_min) = params.v_min {
        state.v_m = state.v_m.max(v_min);
    }
    if state.v_m >= params.v_threshold {
        state.v_m = match params.reset_mode {
            ResetMode::ToResetValue => params.v_reset,
            ResetMode::SubtractThreshold => state.v_m - params.v_threshold,
        };
        state.refractory_remaining = params.refractory_steps;
        (state, true)
    } else {
        (state, false)
    }
}

/// One Euler step of the non-leaky integrate-and-fire neuron.
#[inline]
pub fn step_if(
    mut state: NeuronState,
    params: &NeuronParams,
    current: f64,
    dt: f64,
) -> (NeuronState, bool) {
    if state.refractory_remaining > 0 {
        state.refractory_remaining -= 1;
        return (state, false);
    }
    state.v_m += current * dt / params.c_m;
    settle(state, params)
}

/// One forward-Euler step of the leaky integrate-and-fire neuron.
pub fn step_lif(
    state: NeuronState,
    params: &NeuronParams,
    current: f64,
    dt: f64,
) -> Result<(NeuronState, bool), NeuronError> {
    params.check_dt(dt)?;
    Ok(step_lif_unchecked(state, params, current, dt))
}

#[inline]
fn step_lif_unchecked(
    mut state: NeuronState,
    params: &NeuronParams,
    current: f64,
    dt: f64,
) -> (NeuronState, bool) {
    if state.refractory_remaining > 0 {
        state.refractory_remaining -= 1;
        return (state, false);
    }
    state.v_m += dt / params.tau() * (params.r_m * current - state.v_m);
    settle(state, params)
}

/// Step every neuron of a layer in place; returns the indices that spiked,
/// ascending.
pub fn step_layer(
    states: &mut [NeuronState],
    params: &NeuronParams,
    currents: &[f64],
    dt: f64,
) -> Result<Vec<u32>, NeuronError> {
    params.check_dt(dt)?;
    let mut spikes = Vec::new();
    step_layer_into(states, params, currents, dt, &mut spikes)?;
    Ok(spikes)
}

/// Like [`step_layer`] but appends to a caller-owned buffer and skips the
/// `dt` check, which callers are expected to have done once up front.
pub fn step_layer_into(
    states: &mut [NeuronState],
    params: &NeuronParams,
    currents: &[f64],
    dt: f64,
    spikes: &mut Vec<u32>,
) -> Result<(), NeuronError> {
    if states.len() != currents.len() {
        return Err(NeuronError::LengthMismatch {
            states: states.len(),
            currents: currents.len(),
        });
    }
    match params.model {
        NeuronModel::If => {
            for (i, (s, &c)) in states.iter_mut().zip(currents).enumerate() {
                let (next, fired) = step_if(*s, params, c, dt);
                *s = next;
                if fired {
                    spikes.push(i as u32);
                }
            }
        }
        NeuronModel::Lif => {
            for (i, (s, &c)) in states.iter_mut().zip(currents).enumerate() {
                let (next, fired) = step_lif_unchecked(*s, params, c, dt);
                *s = next;
                if fired {
                    spikes.push(i as u32);
                }
            }
        }
    }
    Ok(())
}

/// Serialize `f64::INFINITY` as `null` so JSON can carry a non-leaky `R_m`.
mod maybe_infinite {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_none()
        } else {
            s.serialize_some(v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quiescent_without_input() {
        let p = NeuronParams::default();
        let mut s = NeuronState::default();
        for _ in 0..1000 {
            let (next, fired) = step_if(s, &p, 0.0, 1.0);
            assert!(!fired);
            s = next;
        }
        assert_eq!(s.v_m, 0.0);
    }

    #[test]
    fn constant_current_fires_on_fifth_step() {
        // 0.2 is inexact in binary; five additions still reach exactly 1.0.
        let p = NeuronParams::default();
        let mut s = NeuronState::default();
        let mut first = None;
        for step in 1..=10 {
            let (next, fired) = step_if(s, &p, 0.2, 1.0);
            s = next;
            if fired && first.is_none() {
                first = Some(step);
            }
        }
        assert_eq!(first, Some(5));
    }

    #[test]
    fn refractory_blocks_spikes() {
        let p = NeuronParams {
            refractory_steps: 2,
            ..NeuronParams::default()
        };
        let mut s = NeuronState::default();
        let mut fired = vec![];
        for _ in 0..7 {
            let (next, f) = step_if(s, &p, 1e6, 1.0);
            s = next;
            fired.push(f);
        }
        assert_eq!(fired, [true, false, false, true, false, false, true]);
    }

    #[test]
    fn subtract_threshold_keeps_residual() {
        let p = NeuronParams {
            reset_mode: ResetMode::SubtractThreshold,
            ..NeuronParams::default()
        };
        let (s, fired) = step_if(NeuronState::default(), &p, 1.25, 1.0);
        assert!(fired);
        assert_eq!(s.v_m, 0.25);
    }

    #[test]
    fn v_min_clamps() {
        let p = NeuronParams {
            v_min: Some(-0.5),
            ..NeuronParams::default()
        };
        let (s, _) = step_if(NeuronState::default(), &p, -3.0, 1.0);
        assert_eq!(s.v_m, -0.5);
    }

    #[test]
    fn lif_rejects_unstable_dt() {
        let p = NeuronParams::lif(1.0, 1e-3);
        assert!(matches!(
            step_lif(NeuronState::default(), &p, 1.0, 1e-3),
            Err(NeuronError::UnstableTimestep { .. })
        ));
    }

    #[test]
    fn lif_sub_threshold_equilibrium() {
        let p = NeuronParams::lif(1.0, 2.0);
        let current = 0.4; // R I = 0.8 < 1
        let mut s = NeuronState::default();
        for _ in 0..40_000 {
            let (next, fired) = step_lif(s, &p, current, 1e-3).unwrap();
            assert!(!fired);
            s = next;
        }
        assert!((s.v_m - 0.8).abs() < 1e-6);
    }

    #[test]
    fn layer_spikes_and_lengths() {
        let p = NeuronParams::default();
        assert_eq!(
            step_layer(&mut [], &p, &[], 1.0).unwrap(),
            Vec::<u32>::new()
        );
        let mut states = vec![NeuronState::default(); 1000];
        let currents = vec![0.2; 1000];
        for step in 1..=5 {
            let spikes = step_layer(&mut states, &p, &currents, 1.0).unwrap();
            if step < 5 {
                assert!(spikes.is_empty());
            } else {
                assert_eq!(spikes, (0..1000).collect::<Vec<u32>>());
            }
        }
        assert!(matches!(
            step_layer(&mut states, &p, &[0.0], 1.0),
            Err(NeuronError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn identical_neurons_stay_identical() {
        let p = NeuronParams::lif(1.0, 0.05);
        let mut states = vec![NeuronState::default(); 2];
        for t in 0..500 {
            let c = 30.0 * ((t as f64) * 0.1).sin().abs();
            step_layer(&mut states, &p, &[c, c], 1e-3).unwrap();
            assert_eq!(states[0], states[1]);
        }
    }

    #[test]
    fn params_validation() {
        assert!(NeuronParams::default().validate().is_ok());
        assert!(NeuronParams {
            c_m: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(NeuronParams {
            v_reset: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(NeuronParams {
            model: NeuronModel::Lif,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(NeuronParams::lif(1.0, 0.02).validate().is_ok());
    }

    #[test]
    fn infinite_resistance_serializes() {
        let p = NeuronParams::default();
        let json = serde_json::to_string(&p).unwrap();
        assert!(json.contains("\"r_m\":null"));
        let back: NeuronParams = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
    }

    proptest! {
        #[test]
        fn state_invariants_hold(
            v0 in -5.0f64..0.99,
            currents in prop::collection::vec(-50.0f64..50.0, 1..200),
            refractory in 0u32..4,
            leaky in any::<bool>(),
        ) {
            let p = NeuronParams {
                refractory_steps: refractory,
                ..if leaky { NeuronParams::lif(1.0, 0.02) } else { NeuronParams::default() }
            };
            let mut s = NeuronState { v_m: v0, refractory_remaining: 0 };
            for c in currents {
                let was_refractory = s.refractory_remaining > 0;
                let (next, fired) = if leaky { step_lif(s, &p, c, 1e-3).unwrap() } else { step_if(s, &p, c, 1e-3) };
                prop_assert!(next.v_m.is_finite());
                prop_assert!(next.v_m < p.v_threshold);
                prop_assert!(!(was_refractory && fired));
                prop_assert!(next.refractory_remaining <= refractory);
                s = next;
            }
        }
    }
}
