use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Episode, EpisodeDataset, Split};
use crate::error::{Error, Result};

/// Damped pendulum: `θ̈ = -(g/L) sin θ - c θ̇ + u / (m L²)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PendulumParams {
    pub mass: f64,
    pub length: f64,
    pub damping: f64,
    pub gravity: f64,
    pub dt: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        PendulumParams {
            mass: 1.0,
            length: 1.0,
            damping: 0.2,
            gravity: 9.81,
            dt: 0.05,
        }
    }
}

impl PendulumParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("mass", self.mass),
            ("length", self.length),
            ("damping", self.damping),
            ("gravity", self.gravity),
            ("dt", self.dt),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!(
                    "pendulum {name} must be positive, got {v}"
                )));
            }
        }
        if self.dt > 0.05 {
            return Err(Error::Config(format!(
                "pendulum dt must be at most 0.05, got {}",
                self.dt
            )));
        }
        Ok(())
    }

    /// One semi-implicit Euler step of `(θ, ω)` under torque `u` with mass `mass`.
    pub fn step(&self, theta: f64, omega: f64, u: f64, mass: f64) -> (f64, f64) {
        let l = self.length;
        let acc = -(self.gravity / l) * theta.sin() - self.damping * omega + u / (mass * l * l);
        let omega = omega + self.dt * acc;
        (theta + self.dt * omega, omega)
    }

    /// Kinetic plus potential energy, zero at rest at the bottom.
    pub fn energy(&self, theta: f64, omega: f64, mass: f64) -> f64 {
        let l = self.length;
        0.5 * mass * l * l * omega * omega + mass * self.gravity * l * (1.0 - theta.cos())
    }
}

/// Random torque: a sum of sines with random frequencies and phases, drawn
/// once per episode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MultisinePolicy {
    pub amplitude: f64,
    pub components: usize,
    /// Frequencies are drawn uniformly from `[min_freq, max_freq]` Hz.
    pub min_freq: f64,
    pub max_freq: f64,
}

impl Default for MultisinePolicy {
    fn default() -> Self {
        MultisinePolicy {
            amplitude: 3.0,
            components: 3,
            min_freq: 0.1,
            max_freq: 1.0,
        }
    }
}

impl MultisinePolicy {
    fn sample<R: Rng>(&self, rng: &mut R) -> Vec<(f64, f64, f64)> {
        (0..self.components)
            .map(|_| {
                let f = rng.gen_range(self.min_freq..=self.max_freq);
                let phase = rng.gen_range(0.0..2.0 * PI);
                let a = self.amplitude / self.components as f64 * rng.gen_range(0.5..1.5);
                (a, f, phase)
            })
            .collect()
    }
}

/// Observation noise standard deviation.
pub const OBS_NOISE: f64 = 0.01;

/// Simulates one episode with a per-step mass schedule. Observations are
/// `[sin θ, cos θ]` plus noise; the velocity and mass stay hidden.
fn simulate<R: Rng>(
    params: &PendulumParams,
    policy: &MultisinePolicy,
    masses: &[f64],
    rng: &mut R,
) -> Episode {
    let sines = policy.sample(rng);
    let noise = Normal::new(0.0, OBS_NOISE).expect("valid noise");
    let mut theta = rng.gen_range(-PI..PI);
    let mut omega = rng.gen_range(-1.0..1.0);
    let len = masses.len();
    let mut obs = Vec::with_capacity(len);
    let mut actions = Vec::with_capacity(len);
    for (t, &m) in masses.iter().enumerate() {
        let time = t as f64 * params.dt;
        let u: f64 = sines
            .iter()
            .map(|&(a, f, ph)| a * (2.0 * PI * f * time + ph).sin())
            .sum();
        obs.push(vec![
            theta.sin() + noise.sample(rng),
            theta.cos() + noise.sample(rng),
        ]);
        actions.push(vec![u]);
        (theta, omega) = params.step(theta, omega, u, m);
    }
    Episode {
        obs,
        actions,
        hidden: masses.to_vec(),
    }
}

fn check_shape(len: usize, episodes: usize) -> Result<()> {
    if len < 2 || episodes == 0 {
        return Err(Error::Config(format!(
            "need at least one episode of two steps, got {episodes} x {len}"
        )));
    }
    Ok(())
}

/// Episodes with the fixed mass of `params`.
pub fn gen_pendulum(
    params: &PendulumParams,
    policy: &MultisinePolicy,
    len: usize,
    episodes: usize,
    seed: u64,
) -> Result<EpisodeDataset> {
    params.validate()?;
    check_shape(len, episodes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masses = vec![params.mass; len];
    let eps = (0..episodes)
        .map(|_| simulate(params, policy, &masses, &mut rng))
        .collect();
    EpisodeDataset::fit(eps, Split::Train, params.dt)
}

/// Training masses of the hidden-parameter benchmark, in kg.
pub const HIP_TRAIN_MASSES: [f64; 3] = [0.5, 1.0, 2.5];
/// Held-out test masses, in kg.
pub const HIP_TEST_MASSES: [f64; 2] = [1.5, 2.0];

/// Episodes whose mass is redrawn every `segment_len` steps from the
/// split's mass set.
pub fn gen_hip_variant(
    params: &PendulumParams,
    policy: &MultisinePolicy,
    len: usize,
    episodes: usize,
    segment_len: usize,
    split: Split,
    seed: u64,
) -> Result<EpisodeDataset> {
    params.validate()?;
    check_shape(len, episodes)?;
    if segment_len == 0 {
        return Err(Error::Config("segment_len must be positive".into()));
    }
    let set: &[f64] = match split {
        Split::Train => &HIP_TRAIN_MASSES,
        Split::Test => &HIP_TEST_MASSES,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eps = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut masses = Vec::with_capacity(len);
        while masses.len() < len {
            let m = set[rng.gen_range(0..set.len())];
            let n = segment_len.min(len - masses.len());
            masses.extend(std::iter::repeat_n(m, n));
        }
        eps.push(simulate(params, policy, &masses, &mut rng));
    }
    EpisodeDataset::fit(eps, split, params.dt)
}

/// Mass schedule `1.5 + amplitude · sin(2π t / period + φ)` with a random
/// phase `φ` per episode.
pub fn drifting_mass(amplitude: f64, period: usize, phase: f64, len: usize) -> Vec<f64> {
    (0..len)
        .map(|t| 1.5 + amplitude * (2.0 * PI * t as f64 / period as f64 + phase).sin())
        .collect()
}

/// Episodes whose mass drifts slowly and smoothly.
#[allow(clippy::too_many_arguments)]
pub fn gen_two_timescale(
    params: &PendulumParams,
    policy: &MultisinePolicy,
    len: usize,
    episodes: usize,
    amplitude: f64,
    period: usize,
    split: Split,
    seed: u64,
) -> Result<EpisodeDataset> {
    params.validate()?;
    check_shape(len, episodes)?;
    if period == 0 || !(0.0..1.5).contains(&amplitude) {
        return Err(Error::Config(format!(
            "need period > 0 and 0 <= amplitude < 1.5, got {period} and {amplitude}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eps = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let phase = rng.gen_range(0.0..2.0 * PI);
        let masses = drifting_mass(amplitude, period, phase, len);
        eps.push(simulate(params, policy, &masses, &mut rng));
    }
    EpisodeDataset::fit(eps, split, params.dt)
}
