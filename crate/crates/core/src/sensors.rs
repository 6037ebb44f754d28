//! Measurement-chain emulation: quantization, additive noise and the
//! synthetic direct-on-line startup generator.
//!
//! Ground truth is integrated once on a 240 kHz base grid, which every
//! supported sampling rate divides. A dataset at rate `f_s` picks every
//! `240000 / f_s`-th base sample, and the noise added to a channel is a pure
//! function of `(seed, channel, base index)`, so a 9.6 kHz dataset decimated
//! by 2 is identical to the 4.8 kHz dataset of the same startup.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{GeneratorInfo, OutputKind, Provenance, StartupDataset};
use crate::dq::{abc_to_dq, dq_to_abc, line_to_phase, phase_to_line, DqSample, ThreePhaseSample};
use crate::error::{Error, Result};
use crate::integrate::{output_current_derivatives, output_currents, reference_solve};
use crate::model::{GridConstants, MotorParams};

/// Base integration rate of the ground-truth trace, Hz.
pub const BASE_RATE_HZ: u32 = 240_000;

/// Sampling rates of the breaker's acquisition system, Hz.
pub const BREAKER_RATES_HZ: [u32; 4] = [1200, 2400, 4800, 9600];

/// Sampling rate of the sensor boxes, Hz.
pub const SENSOR_BOX_RATE_HZ: u32 = 5000;

pub fn is_supported_rate(f_s: u32) -> bool {
    BREAKER_RATES_HZ.contains(&f_s) || f_s == SENSOR_BOX_RATE_HZ
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Voltage,
    Current,
    CurrentDerivative,
}

impl ChannelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ChannelKind::Voltage => "voltage",
            ChannelKind::Current => "current",
            ChannelKind::CurrentDerivative => "current_derivative",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "voltage" => Some(ChannelKind::Voltage),
            "current" => Some(ChannelKind::Current),
            "current_derivative" => Some(ChannelKind::CurrentDerivative),
            _ => None,
        }
    }
}

/// One three-phase acquisition channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub kind: ChannelKind,
    /// Symmetric range `[-full_scale, full_scale]` in the channel's unit.
    pub full_scale: f64,
    pub bits: u32,
    /// Sampling frequency, Hz.
    pub f_s: u32,
    /// Noise standard deviation as a fraction of `full_scale`.
    pub noise_rms: f64,
    pub seed: u64,
    /// Voltage channels only: the transducers read phase-to-phase.
    #[serde(default)]
    pub line_to_line: bool,
}

/// Default relative noise level.
pub const DEFAULT_NOISE_RMS: f64 = 0.002;

impl SensorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(8..=24).contains(&self.bits) {
            return Err(Error::Config(format!("bits must be in [8, 24], got {}", self.bits)));
        }
        if !is_supported_rate(self.f_s) {
            return Err(Error::Config(format!(
                "unsupported sampling frequency {} Hz (expected one of 1200, 2400, 4800, 9600, 5000)",
                self.f_s
            )));
        }
        if !(self.full_scale.is_finite() && self.full_scale > 0.0) {
            return Err(Error::Config(format!(
                "full_scale must be positive, got {}",
                self.full_scale
            )));
        }
        if !(self.noise_rms.is_finite() && self.noise_rms >= 0.0) {
            return Err(Error::Config(format!(
                "noise_rms must be non-negative, got {}",
                self.noise_rms
            )));
        }
        if self.line_to_line && self.kind != ChannelKind::Voltage {
            return Err(Error::Config("line_to_line applies to voltage channels only".into()));
        }
        Ok(())
    }

    /// Quantizer step `2 full_scale / 2^bits`.
    pub fn step(&self) -> f64 {
        2.0 * self.full_scale / f64::powi(2.0, self.bits as i32)
    }

    /// Breaker voltage divider: 690 Vrms phase-to-phase range, 12 bits.
    pub fn breaker_voltage(f_s: u32, seed: u64) -> Self {
        Self {
            kind: ChannelKind::Voltage,
            full_scale: 690.0 * 2f64.sqrt(),
            bits: 12,
            f_s,
            noise_rms: DEFAULT_NOISE_RMS,
            seed,
            line_to_line: true,
        }
    }

    /// Breaker Rogowski channel, 12 bits. The range is sized to a 15 kW
    /// machine's inrush di/dt rather than the breaker's 65e6 A/s fault range,
    /// which would leave the whole startup within a few LSB.
    pub fn breaker_current_derivative(f_s: u32, seed: u64) -> Self {
        Self {
            kind: ChannelKind::CurrentDerivative,
            full_scale: 2.5e5,
            bits: 12,
            f_s,
            noise_rms: DEFAULT_NOISE_RMS,
            seed,
            line_to_line: false,
        }
    }

    /// Sensor-box voltage transducer, 400 Vrms range, phase-to-neutral, 16 bits.
    pub fn sensor_box_voltage(f_s: u32, seed: u64) -> Self {
        Self {
            kind: ChannelKind::Voltage,
            full_scale: 400.0 * 2f64.sqrt(),
            bits: 16,
            f_s,
            noise_rms: DEFAULT_NOISE_RMS,
            seed,
            line_to_line: false,
        }
    }

    /// Sensor-box Hall current transducer, ±420 A, 16 bits.
    pub fn sensor_box_current(f_s: u32, seed: u64) -> Self {
        Self {
            kind: ChannelKind::Current,
            full_scale: 420.0,
            bits: 16,
            f_s,
            noise_rms: DEFAULT_NOISE_RMS,
            seed,
            line_to_line: false,
        }
    }

    pub fn with_noise(mut self, noise_rms: f64) -> Self {
        self.noise_rms = noise_rms;
        self
    }

    pub fn with_bits(mut self, bits: u32) -> Self {
        self.bits = bits;
        self
    }
}

/// Mid-tread uniform quantizer over `[-full_scale, full_scale]`. Values
/// outside the range clamp to the rail; the flag reports saturation.
pub fn quantize(value: f64, spec: &SensorSpec) -> (f64, bool) {
    let fs = spec.full_scale;
    let saturated = value.abs() > fs;
    let clamped = value.clamp(-fs, fs);
    let step = spec.step();
    let q = ((clamped / step).round() * step).clamp(-fs, fs);
    (q, saturated)
}

/// Standard normal draw that depends only on `(seed, stream, index)`.
fn gaussian_at(seed: u64, stream: u64, index: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    // two u64 draws per sample, four 32-bit words
    rng.set_word_pos(4 * index as u128);
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// First-order low-pass applied on the base grid (optional front-end model).
fn low_pass(signal: &mut [ThreePhaseSample], cutoff_hz: f64) {
    let h = 1.0 / BASE_RATE_HZ as f64;
    let alpha = h / (h + 1.0 / (2.0 * PI * cutoff_hz));
    let mut state = signal.first().copied().unwrap_or_default();
    for s in signal.iter_mut() {
        state.a += alpha * (s.a - state.a);
        state.b += alpha * (s.b - state.b);
        state.c += alpha * (s.c - state.c);
        *s = state;
    }
}

/// Describes one synthetic direct-on-line startup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartupConfig {
    pub p_true: MotorParams,
    pub grid: GridConstants,
    /// Supply line-to-line rms voltage, V.
    pub line_voltage_rms: f64,
    /// Record length, s.
    pub duration: f64,
    /// Supply angle at switch-on, rad. Drawn from `seed` when absent.
    pub energization_phase: Option<f64>,
    pub seed: u64,
    /// Optional first-order anti-aliasing filter cutoff, Hz (off by default).
    pub low_pass_hz: Option<f64>,
}

impl StartupConfig {
    pub fn new(p_true: MotorParams, seed: u64) -> Self {
        Self {
            p_true,
            grid: GridConstants::european_two_pole(),
            line_voltage_rms: 380.0,
            duration: 1.5,
            energization_phase: None,
            seed,
            low_pass_hz: None,
        }
    }

    pub fn phase(&self) -> f64 {
        self.energization_phase.unwrap_or_else(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
            rng.random::<f64>() * 2.0 * PI
        })
    }
}

/// Noise-free continuous startup sampled on the base grid.
pub struct StartupTrace {
    config: StartupConfig,
    phase: f64,
    /// Phase-to-neutral voltages.
    pub voltage: Vec<ThreePhaseSample>,
    pub current: Vec<ThreePhaseSample>,
    pub current_derivative: Vec<ThreePhaseSample>,
    pub speed: Vec<f64>,
}

impl StartupTrace {
    /// Integrates the startup with the reference solver at the base rate.
    pub fn simulate(config: &StartupConfig) -> Result<Self> {
        config.p_true.validate_physical()?;
        config.grid.validate()?;
        if !(config.duration > 0.0 && config.duration.is_finite()) {
            return Err(Error::Config(format!(
                "duration must be positive, got {}",
                config.duration
            )));
        }
        if !(config.line_voltage_rms > 0.0) {
            return Err(Error::Config("line voltage must be positive".into()));
        }
        let phase = config.phase();
        let h = 1.0 / BASE_RATE_HZ as f64;
        let n = (config.duration * BASE_RATE_HZ as f64).round() as usize + 1;
        let amp = config.line_voltage_rms * 2f64.sqrt() / 3f64.sqrt();
        let we = config.grid.omega_e;
        // a-c-b ordering: the dq image turns counter-clockwise
        let voltage: Vec<ThreePhaseSample> = (0..n)
            .map(|j| {
                let th = we * j as f64 * h + phase;
                ThreePhaseSample::new(
                    amp * th.cos(),
                    amp * (th + 2.0 * PI / 3.0).cos(),
                    amp * (th - 2.0 * PI / 3.0).cos(),
                )
            })
            .collect();
        let u: Vec<DqSample> = voltage.iter().map(|v| abc_to_dq(*v)).collect();
        let traj = reference_solve(&u, h, &config.p_true, &config.grid, 1)?;
        let speed = traj.speeds();
        check_settled(&speed, config.duration)?;
        let current = output_currents(&traj, &config.p_true)
            .into_iter()
            .map(dq_to_abc)
            .collect();
        let current_derivative = output_current_derivatives(&traj, &u, &config.p_true, &config.grid)
            .into_iter()
            .map(dq_to_abc)
            .collect();
        Ok(Self {
            config: config.clone(),
            phase,
            voltage,
            current,
            current_derivative,
            speed,
        })
    }

    pub fn config(&self) -> &StartupConfig {
        &self.config
    }

    pub fn energization_phase(&self) -> f64 {
        self.phase
    }

    /// Passes the trace through a voltage channel and an output channel.
    pub fn sample(&self, voltage_spec: &SensorSpec, output_spec: &SensorSpec) -> Result<StartupDataset> {
        voltage_spec.validate()?;
        output_spec.validate()?;
        if voltage_spec.kind != ChannelKind::Voltage {
            return Err(Error::Config("first channel must be a voltage channel".into()));
        }
        if voltage_spec.f_s != output_spec.f_s {
            return Err(Error::Config(
                "voltage and output channels must share a sampling rate".into(),
            ));
        }
        let output_kind = match output_spec.kind {
            ChannelKind::Current => OutputKind::Current,
            ChannelKind::CurrentDerivative => OutputKind::CurrentDerivative,
            ChannelKind::Voltage => return Err(Error::Config("output channel cannot be a voltage".into())),
        };
        let f_s = output_spec.f_s;
        let stride = (BASE_RATE_HZ / f_s) as usize;
        let n = (self.config.duration * f_s as f64).floor() as usize;

        let mut saturated = false;
        // stream ids keep channels independent
        let v_src = if voltage_spec.line_to_line {
            self.voltage.iter().map(|v| phase_to_line(*v)).collect::<Vec<_>>()
        } else {
            self.voltage.clone()
        };
        let y_src = match output_kind {
            OutputKind::Current => &self.current,
            OutputKind::CurrentDerivative => &self.current_derivative,
        };
        let v_meas = self.acquire(&v_src, voltage_spec, 0, stride, n, &mut saturated);
        let y_meas = self.acquire(y_src, output_spec, 3, stride, n, &mut saturated);

        let v_tol = balance_tolerance(voltage_spec, &v_meas);
        let voltage = v_meas
            .iter()
            .map(|v| {
                let phase = if voltage_spec.line_to_line {
                    line_to_phase(*v, v_tol)?
                } else {
                    *v
                };
                Ok(abc_to_dq(phase))
            })
            .collect::<Result<Vec<_>>>()?;
        let output = y_meas.iter().map(|y| abc_to_dq(*y)).collect();

        Ok(StartupDataset {
            t_s: 1.0 / f_s as f64,
            f_s,
            grid: self.config.grid,
            voltage,
            output,
            output_kind,
            saturated,
            provenance: Provenance {
                voltage: Some(*voltage_spec),
                output: Some(*output_spec),
                generator: Some(GeneratorInfo {
                    p_true: self.config.p_true,
                    line_voltage_rms: self.config.line_voltage_rms,
                    energization_phase: self.phase,
                    duration: self.config.duration,
                    seed: self.config.seed,
                    low_pass_hz: self.config.low_pass_hz,
                }),
                config_hash: None,
            },
        })
    }

    fn acquire(
        &self,
        src: &[ThreePhaseSample],
        spec: &SensorSpec,
        stream_base: u64,
        stride: usize,
        n: usize,
        saturated: &mut bool,
    ) -> Vec<ThreePhaseSample> {
        let filtered;
        let src = match self.config.low_pass_hz {
            Some(fc) => {
                let mut s = src.to_vec();
                low_pass(&mut s, fc);
                filtered = s;
                &filtered[..]
            }
            None => src,
        };
        let sigma = spec.noise_rms * spec.full_scale;
        let seed = spec.seed ^ self.config.seed.rotate_left(17);
        (0..n)
            .map(|k| {
                let j = k * stride;
                let s = src[j];
                let mut chan = |x: f64, phase: u64| {
                    let noisy = if sigma > 0.0 {
                        x + sigma * gaussian_at(seed, stream_base + phase, j as u64)
                    } else {
                        x
                    };
                    let (q, sat) = quantize(noisy, spec);
                    *saturated |= sat;
                    q
                };
                ThreePhaseSample::new(chan(s.a, 0), chan(s.b, 1), chan(s.c, 2))
            })
            .collect()
    }
}

/// Imbalance accepted on a noisy line-to-line capture: a generous multiple
/// of the per-channel noise plus quantization, relative to the smallest
/// possible largest-phase magnitude of a balanced set.
fn balance_tolerance(spec: &SensorSpec, samples: &[ThreePhaseSample]) -> f64 {
    let amp = samples
        .iter()
        .map(|s| s.a.abs().max(s.b.abs()).max(s.c.abs()))
        .fold(0.0, f64::max);
    if amp == 0.0 {
        return crate::dq::DEFAULT_BALANCE_TOL;
    }
    let per_channel = spec.noise_rms * spec.full_scale + spec.step();
    crate::dq::DEFAULT_BALANCE_TOL + 10.0 * 3f64.sqrt() * per_channel / (0.8 * amp)
}

fn check_settled(speed: &[f64], duration: f64) -> Result<()> {
    let n = speed.len();
    let last = speed[n - 1];
    let window = (n / 10).max(1);
    let change = speed[n - 1 - window..]
        .iter()
        .map(|w| (w - last).abs())
        .fold(0.0, f64::max);
    let rel = change / last.abs().max(1e-9);
    if rel > 0.01 || last.abs() < 1e-6 {
        return Err(Error::NotSettled {
            duration,
            change: 100.0 * rel,
        });
    }
    Ok(())
}

/// One startup acquired by both instruments: a current dataset and a
/// current-derivative dataset from the same continuous trace.
pub struct PairedDatasets {
    pub current: StartupDataset,
    pub derivative: StartupDataset,
}

/// Synthesizes one dataset from a startup configuration and two channels.
pub fn generate_startup(
    config: &StartupConfig,
    voltage_spec: &SensorSpec,
    output_spec: &SensorSpec,
) -> Result<StartupDataset> {
    StartupTrace::simulate(config)?.sample(voltage_spec, output_spec)
}

/// The same startup seen by the sensor boxes (current, at `current_rate`)
/// and by the breaker (current derivative, at `derivative_rate`), with the
/// default channels at `noise_rms`.
pub fn generate_paired(
    config: &StartupConfig,
    current_rate: u32,
    derivative_rate: u32,
    noise_rms: f64,
) -> Result<PairedDatasets> {
    let trace = StartupTrace::simulate(config)?;
    let seed = config.seed;
    Ok(PairedDatasets {
        current: trace.sample(
            &SensorSpec::sensor_box_voltage(current_rate, seed).with_noise(noise_rms),
            &SensorSpec::sensor_box_current(current_rate, seed).with_noise(noise_rms),
        )?,
        derivative: trace.sample(
            &SensorSpec::breaker_voltage(derivative_rate, seed).with_noise(noise_rms),
            &SensorSpec::breaker_current_derivative(derivative_rate, seed).with_noise(noise_rms),
        )?,
    })
}

/// Final rotor speed of a trace; convenience for callers checking equilibrium.
pub fn final_speed(trace: &StartupTrace) -> f64 {
    trace.speed[trace.speed.len() - 1]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec12() -> SensorSpec {
        SensorSpec::breaker_current_derivative(4800, 1)
    }

    #[test]
    fn quantize_examples() {
        let s = spec12();
        assert_eq!(quantize(0.0, &s), (0.0, false));
        assert_eq!(quantize(2.0 * s.full_scale, &s), (s.full_scale, true));
        assert_eq!(quantize(-2.0 * s.full_scale, &s), (-s.full_scale, true));
        let step = 2.0 * s.full_scale / 4096.0;
        let (q, sat) = quantize(s.full_scale / 3.0, &s);
        assert!(!sat);
        // full_scale/3 = 682.67 steps, nearest multiple is 683 steps
        assert_eq!(q, 683.0 * step);
    }

    #[test]
    fn quantization_error_within_half_step() {
        let s = spec12();
        let step = s.step();
        for i in 0..10_000 {
            let v = -s.full_scale + 2.0 * s.full_scale * i as f64 / 9999.0;
            let (q, sat) = quantize(v, &s);
            assert!(!sat);
            assert!((q - v).abs() <= 0.5 * step * (1.0 + 1e-12));
        }
    }

    #[test]
    fn gaussian_stream_is_index_addressed() {
        let a: Vec<f64> = (0..100).map(|i| gaussian_at(7, 2, i)).collect();
        let b: Vec<f64> = (0..100).rev().map(|i| gaussian_at(7, 2, i)).collect();
        let b: Vec<f64> = b.into_iter().rev().collect();
        assert_eq!(a, b);
        assert_ne!(gaussian_at(7, 2, 3), gaussian_at(7, 3, 3));
        let n = 20_000;
        let xs: Vec<f64> = (0..n).map(|i| gaussian_at(11, 0, i)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.03);
        assert!((var - 1.0).abs() < 0.05);
    }

    #[test]
    fn spec_validation() {
        assert!(spec12().validate().is_ok());
        assert!(spec12().with_bits(30).validate().is_err());
        let mut s = spec12();
        s.f_s = 3000;
        assert!(s.validate().is_err());
        s = spec12();
        s.full_scale = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn unsettled_startup_is_rejected() {
        let mut cfg = StartupConfig::new(MotorParams::reference_m1(), 3);
        cfg.duration = 0.3;
        assert!(matches!(StartupTrace::simulate(&cfg), Err(Error::NotSettled { .. })));
    }
}
