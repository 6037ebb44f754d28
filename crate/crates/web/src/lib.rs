//! Browser bindings: synthesize a startup, fit it, and run a small multistart.
//! The plain functions carry the logic; the `wasm_bindgen` wrappers only
//! convert errors.

use wasm_bindgen::prelude::*;

use motor_ident::dataset::StartupDataset;
use motor_ident::dq::abc_to_dq;
use motor_ident::identify::{identify, multistart, InitBox, StudyConfig, ACCEPT_RATIO};
use motor_ident::integrate::{output_currents, simulate, Discretization};
use motor_ident::model::MotorParams;
use motor_ident::sensors::StartupTrace;

/// One synthetic startup and its breaker-rate derivative record.
#[wasm_bindgen]
pub struct Startup {
    study: StudyConfig,
    dataset: StartupDataset,
    time: Vec<f64>,
    speed: Vec<f64>,
    current: Vec<f64>,
    phases: Vec<f64>,
    dq: Vec<f64>,
}

/// Result of one fit, with the simulated current magnitude for plotting.
#[wasm_bindgen]
pub struct Fit {
    params: Vec<f64>,
    cost: f64,
    iterations: usize,
    termination: String,
    predicted: Vec<f64>,
}

#[wasm_bindgen]
pub struct MultistartView {
    ratios: Vec<f64>,
    acceptable: usize,
    failed: usize,
}

fn method_from(name: &str) -> Result<Discretization, String> {
    name.parse().map_err(|e: motor_ident::Error| e.to_string())
}

fn sampled_magnitude(trace: &StartupTrace, f_s: u32, n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let stride = (motor_ident::sensors::BASE_RATE_HZ / f_s) as usize;
    let mut time = Vec::with_capacity(n);
    let mut speed = Vec::with_capacity(n);
    let mut current = Vec::with_capacity(n);
    for k in 0..n {
        let j = k * stride;
        time.push(k as f64 / f_s as f64);
        speed.push(trace.speed[j]);
        current.push(abc_to_dq(trace.current[j]).norm());
    }
    (time, speed, current)
}

/// Builds the default study startup with the given supply and noise seed.
pub fn build_startup(line_voltage: f64, seed: u64, f_s: u32, noise_rms: f64) -> Result<Startup, String> {
    let mut study = StudyConfig::default();
    study.startup.line_voltage_rms = line_voltage;
    study.startup.seed = seed;
    study.noise_rms = noise_rms;
    study.validate().map_err(|e| e.to_string())?;
    let trace = StartupTrace::simulate(&study.startup).map_err(|e| e.to_string())?;
    let dataset = trace
        .sample(&study.voltage_channel(f_s), &study.derivative_channel(f_s))
        .map_err(|e| e.to_string())?;
    let (time, speed, current) = sampled_magnitude(&trace, f_s, dataset.len());

    // first two supply cycles on the base grid, decimated for display
    let cycles = (2.0 * 2.0 * std::f64::consts::PI / study.startup.grid.omega_e
        * motor_ident::sensors::BASE_RATE_HZ as f64) as usize;
    let mut phases = Vec::new();
    let mut dq = Vec::new();
    for v in trace.voltage.iter().take(cycles).step_by(40) {
        phases.extend([v.a, v.b, v.c]);
        let s = abc_to_dq(*v);
        dq.extend([s.d, s.q]);
    }
    Ok(Startup {
        study,
        dataset,
        time,
        speed,
        current,
        phases,
        dq,
    })
}

impl Startup {
    pub fn fit_with(&self, method: &str) -> Result<Fit, String> {
        let method = method_from(method)?;
        let s = &self.study;
        let id =
            identify(&self.dataset, method, &s.bounds, &s.solver, &s.init.midpoint()).map_err(|e| e.to_string())?;
        let traj = simulate(
            &self.dataset.voltage,
            method,
            self.dataset.t_s,
            &id.params,
            &self.dataset.grid,
            false,
        )
        .map_err(|e| e.to_string())?;
        Ok(Fit {
            params: id.params.to_array().to_vec(),
            cost: id.report.cost,
            iterations: id.report.iterations,
            termination: id.report.termination.to_string(),
            predicted: output_currents(&traj, &id.params).iter().map(|y| y.norm()).collect(),
        })
    }

    pub fn multistart_with(&self, method: &str, starts: usize, seed: u64) -> Result<MultistartView, String> {
        let method = method_from(method)?;
        let s = &self.study;
        let init = InitBox {
            n_starts: starts,
            seed,
            ..s.init.clone()
        };
        let report = multistart(&self.dataset, method, &s.bounds, &init, &s.solver).map_err(|e| e.to_string())?;
        let mut ratios: Vec<f64> = report
            .starts
            .iter()
            .filter_map(|o| o.cost())
            .map(|c| c / report.j_min)
            .collect();
        ratios.sort_by(f64::total_cmp);
        Ok(MultistartView {
            failed: report.starts.len() - ratios.len(),
            ratios,
            acceptable: report.acceptable_count,
        })
    }
}

#[wasm_bindgen]
impl Startup {
    /// Line-to-line rms voltage, noise seed, breaker rate in Hz, and noise as
    /// a fraction of full scale.
    #[wasm_bindgen(constructor)]
    pub fn new(line_voltage: f64, seed: u32, f_s: u32, noise_rms: f64) -> Result<Startup, JsError> {
        build_startup(line_voltage, seed as u64, f_s, noise_rms).map_err(|e| JsError::new(&e))
    }

    pub fn time(&self) -> Vec<f64> {
        self.time.clone()
    }

    pub fn speed(&self) -> Vec<f64> {
        self.speed.clone()
    }

    /// Stator current magnitude at the sampling instants, A.
    pub fn current(&self) -> Vec<f64> {
        self.current.clone()
    }

    /// Phase voltages over the first two cycles, interleaved `a, b, c`.
    pub fn phase_voltages(&self) -> Vec<f64> {
        self.phases.clone()
    }

    /// The same samples in dq, interleaved `d, q`.
    pub fn dq_voltages(&self) -> Vec<f64> {
        self.dq.clone()
    }

    pub fn true_params(&self) -> Vec<f64> {
        self.study.startup.p_true.to_array().to_vec()
    }

    pub fn samples(&self) -> usize {
        self.dataset.len()
    }

    /// Fits from the init-box midpoint with `euler` or `preview`.
    pub fn fit(&self, method: &str) -> Result<Fit, JsError> {
        self.fit_with(method).map_err(|e| JsError::new(&e))
    }

    pub fn multistart(&self, method: &str, starts: usize, seed: u32) -> Result<MultistartView, JsError> {
        self.multistart_with(method, starts, seed as u64)
            .map_err(|e| JsError::new(&e))
    }
}

#[wasm_bindgen]
impl Fit {
    pub fn params(&self) -> Vec<f64> {
        self.params.clone()
    }

    pub fn cost(&self) -> f64 {
        self.cost
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn termination(&self) -> String {
        self.termination.clone()
    }

    pub fn predicted(&self) -> Vec<f64> {
        self.predicted.clone()
    }
}

#[wasm_bindgen]
impl MultistartView {
    /// Final cost over the best cost, ascending.
    pub fn ratios(&self) -> Vec<f64> {
        self.ratios.clone()
    }

    pub fn acceptable(&self) -> usize {
        self.acceptable
    }

    pub fn failed(&self) -> usize {
        self.failed
    }

    pub fn accept_ratio() -> f64 {
        ACCEPT_RATIO
    }
}

#[wasm_bindgen]
pub fn param_names() -> Vec<String> {
    MotorParams::NAMES.iter().map(|s| s.to_string()).collect()
}
