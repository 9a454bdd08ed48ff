//! Discrete-time simulation of SISO process plants `K/(τs+1)^n`.
//!
//! The plant is a cascade of `n` identical unit-DC-gain lags with the gain
//! applied at the first stage. It is sampled by exact zero-order hold: for a
//! single stage this is `x⁺ = a·x + (1−a)·K·u` with `a = exp(−Δt/τ)`; for a
//! cascade the lower-triangular transition of the full Jordan chain is used so
//! that sample instants match the continuous solution for any order.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Sampling interval of every experiment, seconds.
pub const SAMPLE_TIME: f64 = 0.5;

/// Default measurement-noise standard deviation, output units.
pub const DEFAULT_NOISE_STD: f64 = 0.01;

/// `K / (τs + 1)^n`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferFunctionSpec {
    pub gain: f64,
    pub time_constant: f64,
    pub order: u32,
}

impl TransferFunctionSpec {
    pub fn new(gain: f64, time_constant: f64, order: u32) -> Result<Self> {
        let spec = Self {
            gain,
            time_constant,
            order,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn first_order(gain: f64, time_constant: f64) -> Self {
        Self {
            gain,
            time_constant,
            order: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.gain.is_finite() || self.gain == 0.0 {
            return Err(Error::InvalidSpec(format!("gain must be finite and non-zero, got {}", self.gain)));
        }
        if !(self.time_constant.is_finite() && self.time_constant > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "time constant must be positive, got {}",
                self.time_constant
            )));
        }
        if self.order == 0 {
            return Err(Error::InvalidSpec("order must be at least 1".into()));
        }
        Ok(())
    }

    /// Noise-free response at time `t` to a unit step applied at `t = 0` from rest.
    pub fn step_response(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        self.gain * erlang_cdf(self.order as usize, t / self.time_constant)
    }
}

/// `1 − e^{−h} Σ_{k<n} h^k / k!`, the unit step response of `1/(s+1)^n` at `h`.
fn erlang_cdf(n: usize, h: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..n {
        term *= h / k as f64;
        sum += term;
    }
    1.0 - (-h).exp() * sum
}

/// One first-order stage `x⁺ = pole·x + input_coeff·(stage input)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub pole: f64,
    pub input_coeff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantModel {
    spec: TransferFunctionSpec,
    stages: Vec<Stage>,
    /// Row-major `n × n` state transition.
    transition: Vec<f64>,
    /// Response of each state to a held unit input over one sample (gain included).
    input_map: Vec<f64>,
    state: Vec<f64>,
    dt: f64,
    noise_std: f64,
}

/// Exact ZOH discretization of `spec` at sample time `dt`, with zeroed state.
pub fn discretize(spec: TransferFunctionSpec, dt: f64, noise_std: f64) -> Result<PlantModel> {
    spec.validate()?;
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidSpec(format!("sample time must be positive, got {dt}")));
    }
    if !(noise_std.is_finite() && noise_std >= 0.0) {
        return Err(Error::InvalidSpec(format!("noise std must be non-negative, got {noise_std}")));
    }
    let n = spec.order as usize;
    let h = dt / spec.time_constant;
    let pole = (-h).exp();
    let stages = vec![
        Stage {
            pole,
            input_coeff: 1.0 - pole,
        };
        n
    ];
    // e^{AΔt} of the Jordan chain: entry (i, j) = e^{−h} h^{i−j} / (i−j)! for i ≥ j.
    let mut diag_terms = vec![0.0; n];
    let mut term = 1.0;
    for (k, slot) in diag_terms.iter_mut().enumerate() {
        if k > 0 {
            term *= h / k as f64;
        }
        *slot = pole * term;
    }
    let mut transition = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            transition[i * n + j] = diag_terms[i - j];
        }
    }
    let input_map = (0..n).map(|i| spec.gain * erlang_cdf(i + 1, h)).collect();
    Ok(PlantModel {
        spec,
        stages,
        transition,
        input_map,
        state: vec![0.0; n],
        dt,
        noise_std,
    })
}

impl PlantModel {
    pub fn spec(&self) -> &TransferFunctionSpec {
        &self.spec
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn set_noise_std(&mut self, noise_std: f64) {
        self.noise_std = noise_std;
    }

    /// Current noise-free output (last stage).
    pub fn output(&self) -> f64 {
        *self.state.last().expect("plant has at least one stage")
    }

    /// Advances one sample with `u` held and returns the noise-free output.
    pub fn advance(&mut self, u: f64) -> Result<f64> {
        if !u.is_finite() {
            return Err(Error::NonFinite("plant input"));
        }
        let n = self.state.len();
        // Lower triangular: update from the last row so earlier states are still old.
        for i in (0..n).rev() {
            let row = &self.transition[i * n..i * n + i + 1];
            let free: f64 = row.iter().zip(&self.state[..=i]).map(|(p, x)| p * x).sum();
            self.state[i] = free + self.input_map[i] * u;
        }
        Ok(self.output())
    }

    /// Advances one sample and returns the measured output. One standard-normal
    /// draw is consumed from `rng` on every call, whatever the noise level.
    pub fn step<R: Rng + ?Sized>(&mut self, u: f64, rng: &mut R) -> Result<f64> {
        let y = self.advance(u)?;
        let eps: f64 = rng.sample(StandardNormal);
        Ok(y + self.noise_std * eps)
    }

    /// Puts every stage at the steady state whose output is `initial_output`.
    pub fn reset(&mut self, initial_output: f64) {
        self.state.iter_mut().for_each(|x| *x = initial_output);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn model(k: f64, tau: f64, n: u32) -> PlantModel {
        discretize(TransferFunctionSpec::new(k, tau, n).unwrap(), SAMPLE_TIME, 0.0).unwrap()
    }

    #[test]
    fn first_order_coefficients() {
        let m = model(1.0, 1.0, 1);
        assert_eq!(m.stages().len(), 1);
        assert!((m.stages()[0].pole - 0.606_531).abs() < 1e-6);
        assert!((m.stages()[0].input_coeff - 0.393_469).abs() < 1e-6);

        let m = model(-1.0, 2.0, 1);
        assert!((m.stages()[0].pole - 0.778_801).abs() < 1e-6);
        let mut m = m;
        let y = m.advance(1.0).unwrap();
        assert!((y + (1.0 - (-0.25f64).exp())).abs() < 1e-15);

        let m = model(1.0, 1.0, 3);
        assert_eq!(m.stages().len(), 3);
        assert!(m.stages().iter().all(|s| (s.pole - 0.606_531).abs() < 1e-6));
    }

    #[test]
    fn rejects_invalid_specs() {
        assert!(TransferFunctionSpec::new(1.0, 0.0, 1).is_err());
        assert!(TransferFunctionSpec::new(1.0, -1.0, 1).is_err());
        assert!(TransferFunctionSpec::new(0.0, 1.0, 1).is_err());
        assert!(TransferFunctionSpec::new(1.0, 1.0, 0).is_err());
        let spec = TransferFunctionSpec::first_order(1.0, 1.0);
        assert!(matches!(discretize(spec, 0.0, 0.0), Err(Error::InvalidSpec(_))));
        assert!(matches!(discretize(spec, -0.5, 0.0), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn step_response_samples() {
        let mut r = rng::stream(0, &[]);
        let mut m = model(1.0, 1.0, 1);
        assert_eq!(m.step(0.0, &mut r).unwrap(), 0.0);
        let mut y = 0.0;
        for _ in 0..4 {
            y = m.step(1.0, &mut r).unwrap();
        }
        assert!((y - 0.864_665).abs() < 1e-6);
        assert!((y - (1.0 - (-2.0f64).exp())).abs() < 1e-12);

        let mut m = model(-1.0, 2.0, 1);
        let mut prev = 0.0;
        for k in 1..=40 {
            let y = m.step(1.0, &mut r).unwrap();
            let t = k as f64 * SAMPLE_TIME;
            assert!((y + (1.0 - (-t / 2.0).exp())).abs() < 1e-12);
            assert!(y < prev);
            prev = y;
        }
    }

    #[test]
    fn non_finite_input_is_an_error() {
        let mut m = model(1.0, 1.0, 1);
        let mut r = rng::stream(0, &[]);
        assert!(matches!(m.step(f64::NAN, &mut r), Err(Error::NonFinite(_))));
        assert!(m.step(f64::INFINITY, &mut r).is_err());
    }

    #[test]
    fn reset_behaviour() {
        let mut r = rng::stream(0, &[]);
        let mut m = model(1.0, 1.0, 1);
        m.step(1.0, &mut r).unwrap();
        m.reset(0.0);
        assert_eq!(m.step(0.0, &mut r).unwrap(), 0.0);
        m.reset(0.5);
        assert_eq!(m.state(), &[0.5]);
        let mut noisy = discretize(TransferFunctionSpec::first_order(2.0, 1.5), 0.25, 0.3).unwrap();
        noisy.reset(0.7);
        assert_eq!(noisy.dt(), 0.25);
        assert_eq!(noisy.noise_std(), 0.3);
        // Steady state holds with the matching constant input.
        let mut m3 = model(2.0, 1.0, 3);
        m3.reset(0.8);
        for _ in 0..10 {
            let y = m3.advance(0.4).unwrap();
            assert!((y - 0.8).abs() < 1e-14);
        }
    }

    /// Continuous-time output under a piecewise-constant input, by superposing
    /// shifted analytic step responses.
    fn continuous_output(spec: &TransferFunctionSpec, inputs: &[f64], dt: f64, t: f64) -> f64 {
        let mut prev = 0.0;
        let mut y = 0.0;
        for (j, &u) in inputs.iter().enumerate() {
            let tj = j as f64 * dt;
            if tj >= t {
                break;
            }
            y += (u - prev) * spec.step_response(t - tj);
            prev = u;
        }
        y
    }

    #[test]
    fn third_order_matches_continuous_solution() {
        let spec = TransferFunctionSpec::new(1.0, 1.0, 3).unwrap();
        let mut m = discretize(spec, SAMPLE_TIME, 0.0).unwrap();
        let inputs: Vec<f64> = (0..60).map(|k| ((k / 7) as f64 * 0.37).sin() * 1.5).collect();
        for (k, &u) in inputs.iter().enumerate() {
            let y = m.advance(u).unwrap();
            let exact = continuous_output(&spec, &inputs, SAMPLE_TIME, (k + 1) as f64 * SAMPLE_TIME);
            assert!((y - exact).abs() <= 1e-9 * exact.abs().max(1e-3), "k={k} y={y} exact={exact}");
        }
    }

    #[test]
    fn measurement_noise_statistics() {
        let sigma = 0.05;
        let spec = TransferFunctionSpec::first_order(1.0, 1.0);
        let mut m = discretize(spec, SAMPLE_TIME, sigma).unwrap();
        let mut r = rng::stream(42, &[]);
        let n = 100_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for k in 0..n {
            let u = if (k / 50) % 2 == 0 { 1.0 } else { -0.5 };
            let y = m.step(u, &mut r).unwrap();
            let d = y - m.output();
            s += d;
            s2 += d * d;
        }
        let mean = s / n as f64;
        let std = (s2 / n as f64 - mean * mean).sqrt();
        assert!((std - sigma).abs() < 0.05 * sigma, "std {std}");
    }

    #[test]
    fn identical_seeds_give_identical_trajectories() {
        let spec = TransferFunctionSpec::new(-2.0, 0.5, 2).unwrap();
        let run = || {
            let mut m = discretize(spec, SAMPLE_TIME, 0.01).unwrap();
            let mut r = rng::stream(9, &[3]);
            (0..200)
                .map(|k| m.step((k as f64 * 0.1).cos(), &mut r).unwrap().to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    proptest! {
        #[test]
        fn zoh_is_exact_for_first_order(
            gain in prop_oneof![-3.0f64..-0.1, 0.1f64..3.0],
            tau in 0.2f64..5.0,
            inputs in proptest::collection::vec(-2.0f64..2.0, 1..40),
        ) {
            let spec = TransferFunctionSpec::first_order(gain, tau);
            let mut m = discretize(spec, SAMPLE_TIME, 0.0).unwrap();
            for (k, &u) in inputs.iter().enumerate() {
                let y = m.advance(u).unwrap();
                let exact = continuous_output(&spec, &inputs, SAMPLE_TIME, (k + 1) as f64 * SAMPLE_TIME);
                prop_assert!((y - exact).abs() <= 1e-9 * exact.abs().max(1e-3));
            }
        }

        #[test]
        fn dc_gain_is_reached(
            gain in prop_oneof![-3.0f64..-0.1, 0.1f64..3.0],
            tau in 0.2f64..3.0,
            order in 1u32..4,
            u in -2.0f64..2.0,
        ) {
            let spec = TransferFunctionSpec::new(gain, tau, order).unwrap();
            let mut m = discretize(spec, SAMPLE_TIME, 0.0).unwrap();
            // 20τ/Δt samples for a lag; a cascade needs proportionally longer.
            let steps = (20.0 * tau * order as f64 / SAMPLE_TIME).ceil() as usize + 10 * order as usize;
            let mut y = 0.0;
            for _ in 0..steps {
                y = m.advance(u).unwrap();
            }
            prop_assert!((y - gain * u).abs() < 1e-6);
        }
    }
}
