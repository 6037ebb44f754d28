//! Identification runs over startup datasets: single fits, validation error,
//! multi-start statistics and the sampling-rate and load-model studies.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{OutputKind, StartupDataset};
use crate::error::{Error, Result};
use crate::integrate::{output_currents, reference_solve, Discretization};
use crate::model::{MotorParams, N_PARAMS};
use crate::sensitivity::{predict, residual_jacobian_masked, residuals, ParamMask};
use crate::sensors::{SensorSpec, StartupConfig, StartupTrace, SENSOR_BOX_RATE_HZ};
use crate::solver::{solve, BoxConstraints, LeastSquaresProblem, SolveReport, SolverConfig};

/// Output-error fit of the discrete model to one dataset. The optimization
/// variables are the free parameters of `mask`; the others stay at `base`.
pub struct MotorProblem<'a> {
    pub dataset: &'a StartupDataset,
    pub method: Discretization,
    pub mask: ParamMask,
    pub base: MotorParams,
}

impl MotorProblem<'_> {
    pub fn full_params(&self, free: &[f64]) -> MotorParams {
        let mut p = self.base.to_array();
        for (v, i) in free.iter().zip(self.mask.free_indices()) {
            p[i] = *v;
        }
        MotorParams::from_array(p)
    }
}

impl LeastSquaresProblem for MotorProblem<'_> {
    fn residuals(&self, p: &[f64]) -> Result<DVector<f64>> {
        residuals(self.dataset, &self.full_params(p), self.method)
    }

    fn residuals_and_jacobian(&self, p: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let b = residual_jacobian_masked(self.dataset, &self.full_params(p), self.method, &self.mask)?;
        Ok((b.residuals, b.jacobian.expect("jacobian requested")))
    }
}

/// A finished identification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Identification {
    pub params: MotorParams,
    pub method: Discretization,
    pub output_kind: OutputKind,
    pub f_s: u32,
    pub fixed: Vec<usize>,
    pub report: SolveReport,
    pub warnings: Vec<String>,
}

/// Fits all seven parameters.
pub fn identify(
    ds: &StartupDataset,
    method: Discretization,
    bounds: &BoxConstraints,
    cfg: &SolverConfig,
    p0: &MotorParams,
) -> Result<Identification> {
    identify_masked(ds, method, bounds, cfg, p0, &ParamMask::all())
}

/// Fits the free parameters of `mask`; fixed ones keep their value in `p0`
/// (projected onto the bounds).
pub fn identify_masked(
    ds: &StartupDataset,
    method: Discretization,
    bounds: &BoxConstraints,
    cfg: &SolverConfig,
    p0: &MotorParams,
    mask: &ParamMask,
) -> Result<Identification> {
    ds.validate()?;
    if bounds.dim() != N_PARAMS {
        return Err(Error::Config(format!(
            "expected {N_PARAMS} bounds, got {}",
            bounds.dim()
        )));
    }
    let bounds = bounds.with_motor_interior();
    let base = MotorParams::from_array(bounds.project(&p0.to_array()).try_into().expect("seven entries"));
    let free = mask.free_indices();
    if free.is_empty() {
        return Err(Error::Config("no free parameters".into()));
    }
    let problem = MotorProblem {
        dataset: ds,
        method,
        mask: *mask,
        base,
    };
    let start: Vec<f64> = free.iter().map(|&i| base[i]).collect();
    let report = solve(&problem, &start, &bounds.select(&free), cfg)?;
    let params = problem.full_params(&report.p_hat);

    let mut warnings = Vec::new();
    if ds.saturated {
        warnings.push("dataset contains saturated samples".to_string());
    }
    if report.projected_start {
        warnings.push("initial point was outside the bounds and has been projected".to_string());
    }
    if let Some(msg) = &report.message {
        warnings.push(msg.clone());
    }
    Ok(Identification {
        params,
        method,
        output_kind: ds.output_kind,
        f_s: ds.f_s,
        fixed: (0..N_PARAMS).filter(|&i| !mask.is_free(i)).collect(),
        report,
        warnings,
    })
}

/// Model used to predict a validation record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Simulator {
    Discrete(Discretization),
    /// Fine-step RK4 with the given number of substeps per sample.
    Reference(usize),
}

/// Predicted stator currents over a current-kind dataset.
pub fn predict_currents(p: &MotorParams, ds: &StartupDataset, sim: Simulator) -> Result<Vec<crate::dq::DqSample>> {
    if ds.output_kind != OutputKind::Current {
        return Err(Error::Dataset("validation requires a current dataset".into()));
    }
    match sim {
        Simulator::Discrete(method) => predict(ds, p, method),
        Simulator::Reference(substeps) => {
            let traj = reference_solve(&ds.voltage, ds.t_s, p, &ds.grid, substeps)?;
            Ok(output_currents(&traj, p))
        }
    }
}

/// Normalized mean prediction error `sqrt(Σ|ĩ - î|² / Σ|ĩ|²)` on a
/// current-kind validation record.
pub fn nmpe(p: &MotorParams, validation: &StartupDataset, sim: Simulator) -> Result<f64> {
    let predicted = predict_currents(p, validation, sim)?;
    nmpe_of(&validation.output, &predicted)
}

pub fn nmpe_of(measured: &[crate::dq::DqSample], predicted: &[crate::dq::DqSample]) -> Result<f64> {
    if measured.len() != predicted.len() {
        return Err(Error::Dataset("measured and predicted lengths differ".into()));
    }
    let energy: f64 = measured.iter().map(|y| y.d * y.d + y.q * y.q).sum();
    if energy == 0.0 {
        return Err(Error::ZeroEnergy);
    }
    let err: f64 = measured
        .iter()
        .zip(predicted)
        .map(|(y, p)| (y.d - p.d).powi(2) + (y.q - p.q).powi(2))
        .sum();
    Ok((err / energy).sqrt())
}

/// Box from which multi-start initial points are drawn uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitBox {
    pub lower: [f64; N_PARAMS],
    pub upper: [f64; N_PARAMS],
    pub n_starts: usize,
    pub seed: u64,
}

impl Default for InitBox {
    fn default() -> Self {
        Self {
            lower: [0.0; N_PARAMS],
            upper: [10.0, 10.0, 10.0, 15.0, 2.0, 1.0, 0.042],
            n_starts: 100,
            seed: 0,
        }
    }
}

impl InitBox {
    pub fn validate(&self, bounds: &BoxConstraints) -> Result<()> {
        if self.n_starts == 0 {
            return Err(Error::Config("n_starts must be at least 1".into()));
        }
        for i in 0..N_PARAMS {
            if !(self.lower[i] <= self.upper[i]) {
                return Err(Error::Config(format!("init box lower {i} exceeds upper")));
            }
            if self.lower[i] < bounds.lower[i] || self.upper[i] > bounds.upper[i] {
                return Err(Error::Config(format!(
                    "init box component {i} leaves the admissible set"
                )));
            }
        }
        Ok(())
    }

    pub fn midpoint(&self) -> MotorParams {
        MotorParams::from_array(std::array::from_fn(|i| 0.5 * (self.lower[i] + self.upper[i])))
    }

    /// Initial point of start `i`; depends only on `seed + i`.
    pub fn start(&self, i: usize) -> MotorParams {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(i as u64));
        MotorParams::from_array(std::array::from_fn(|j| {
            if self.upper[j] > self.lower[j] {
                rng.random_range(self.lower[j]..self.upper[j])
            } else {
                self.lower[j]
            }
        }))
    }
}

/// Relative width of the multi-start acceptance interval `[J_min, 1.05 J_min]`.
pub const ACCEPT_RATIO: f64 = 1.05;

/// Upper edges of the `J / J_min` histogram bins; the last bin is open.
pub const HISTOGRAM_EDGES: [f64; 8] = [1.05, 1.1, 1.5, 2.0, 5.0, 10.0, 100.0, 1000.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartOutcome {
    pub index: usize,
    pub p0: MotorParams,
    pub result: std::result::Result<Identification, String>,
}

impl StartOutcome {
    pub fn cost(&self) -> Option<f64> {
        self.result
            .as_ref()
            .ok()
            .map(|r| r.report.cost)
            .filter(|c| c.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultistartReport {
    pub starts: Vec<StartOutcome>,
    pub j_min: f64,
    pub acceptable_count: usize,
    /// Counts per bin of `HISTOGRAM_EDGES` plus the open last bin.
    pub histogram: Vec<usize>,
}

impl MultistartReport {
    pub fn acceptable_fraction(&self) -> f64 {
        self.acceptable_count as f64 / self.starts.len() as f64
    }

    /// Best start's identification.
    pub fn best(&self) -> Option<&Identification> {
        self.starts
            .iter()
            .filter(|s| s.cost() == Some(self.j_min))
            .find_map(|s| s.result.as_ref().ok())
    }

    pub fn from_outcomes(starts: Vec<StartOutcome>) -> Self {
        let j_min = starts
            .iter()
            .filter_map(StartOutcome::cost)
            .fold(f64::INFINITY, f64::min);
        let mut histogram = vec![0; HISTOGRAM_EDGES.len() + 1];
        let mut acceptable_count = 0;
        for s in &starts {
            let Some(c) = s.cost() else {
                continue;
            };
            let ratio = c / j_min;
            if ratio <= ACCEPT_RATIO {
                acceptable_count += 1;
            }
            let bin = HISTOGRAM_EDGES
                .iter()
                .position(|e| ratio <= *e)
                .unwrap_or(HISTOGRAM_EDGES.len());
            histogram[bin] += 1;
        }
        Self {
            starts,
            j_min,
            acceptable_count,
            histogram,
        }
    }
}

/// Independent fits from uniformly drawn starts, run in parallel.
pub fn multistart(
    ds: &StartupDataset,
    method: Discretization,
    bounds: &BoxConstraints,
    init: &InitBox,
    cfg: &SolverConfig,
) -> Result<MultistartReport> {
    ds.validate()?;
    init.validate(bounds)?;
    let starts: Vec<StartOutcome> = (0..init.n_starts)
        .into_par_iter()
        .map(|i| {
            let p0 = init.start(i);
            let result = identify(ds, method, bounds, cfg, &p0).map_err(|e| e.to_string());
            StartOutcome { index: i, p0, result }
        })
        .collect();
    Ok(MultistartReport::from_outcomes(starts))
}

/// Lowest-cost fit among the init-box midpoint and `n - 1` drawn starts.
#[allow(clippy::too_many_arguments)]
pub fn identify_best_of(
    ds: &StartupDataset,
    method: Discretization,
    bounds: &BoxConstraints,
    cfg: &SolverConfig,
    init: &InitBox,
    n: usize,
    mask: &ParamMask,
    pinned: &[(usize, f64)],
) -> Result<Identification> {
    let starts: Vec<MotorParams> = std::iter::once(init.midpoint())
        .chain((0..n.saturating_sub(1)).map(|i| init.start(i)))
        .map(|p| {
            let mut a = p.to_array();
            for &(i, v) in pinned {
                a[i] = v;
            }
            MotorParams::from_array(a)
        })
        .collect();
    let fits: Vec<Result<Identification>> = starts
        .par_iter()
        .map(|p0| identify_masked(ds, method, bounds, cfg, p0, mask))
        .collect();
    let mut best: Option<Identification> = None;
    let mut first_err = None;
    for fit in fits {
        match fit {
            Ok(id) if id.report.cost.is_finite() => {
                if best.as_ref().is_none_or(|b| id.report.cost < b.report.cost) {
                    best = Some(id);
                }
            }
            Ok(_) => {}
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    best.ok_or_else(|| first_err.unwrap_or_else(|| Error::Config("no start produced a finite cost".into())))
}

/// Setup shared by the synthetic studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub startup: StartupConfig,
    pub noise_rms: f64,
    pub derivative_bits: u32,
    pub bounds: BoxConstraints,
    pub init: InitBox,
    pub solver: SolverConfig,
    /// Starts per sweep cell: the init-box midpoint plus seeded draws.
    pub starts: usize,
    /// Seed and supply angle of the held-out validation startup.
    pub validation_seed: u64,
    pub validation_phase: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        let mut startup = StartupConfig::new(MotorParams::reference_m1(), 2);
        startup.energization_phase = Some(0.3);
        Self {
            startup,
            noise_rms: crate::sensors::DEFAULT_NOISE_RMS,
            derivative_bits: 12,
            bounds: BoxConstraints::default(),
            init: InitBox::default(),
            solver: SolverConfig::default(),
            starts: 8,
            validation_seed: 1001,
            validation_phase: 2.1,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        self.init.validate(&self.bounds)?;
        self.solver.validate()?;
        self.startup.p_true.validate_physical()?;
        if self.starts == 0 {
            return Err(Error::Config("starts must be at least 1".into()));
        }
        if !(self.noise_rms >= 0.0) {
            return Err(Error::Config("noise_rms must be non-negative".into()));
        }
        Ok(())
    }

    pub fn voltage_channel(&self, f_s: u32) -> SensorSpec {
        SensorSpec::breaker_voltage(f_s, self.startup.seed).with_noise(self.noise_rms)
    }

    pub fn derivative_channel(&self, f_s: u32) -> SensorSpec {
        SensorSpec::breaker_current_derivative(f_s, self.startup.seed)
            .with_noise(self.noise_rms)
            .with_bits(self.derivative_bits)
    }

    /// Current-derivative datasets at each rate, all decimated from one
    /// acquisition at the highest requested rate.
    pub fn derivative_datasets(&self, rates: &[u32]) -> Result<Vec<StartupDataset>> {
        let top = *rates
            .iter()
            .max()
            .ok_or_else(|| Error::Config("no sampling rates".into()))?;
        let trace = StartupTrace::simulate(&self.startup)?;
        let full = trace.sample(&self.voltage_channel(top), &self.derivative_channel(top))?;
        rates
            .iter()
            .map(|&f| {
                if top % f != 0 {
                    return Err(Error::Config(format!("{f} Hz does not divide {top} Hz")));
                }
                full.decimate((top / f) as usize)
            })
            .collect()
    }

    /// The study startup acquired by both instruments.
    pub fn paired_datasets(&self, derivative_rate: u32) -> Result<crate::sensors::PairedDatasets> {
        crate::sensors::generate_paired(&self.startup, SENSOR_BOX_RATE_HZ, derivative_rate, self.noise_rms)
    }

    /// Held-out current-kind record from the sensor boxes.
    pub fn validation_dataset(&self) -> Result<StartupDataset> {
        let mut cfg = self.startup.clone();
        cfg.seed = self.validation_seed;
        cfg.energization_phase = Some(self.validation_phase);
        let f = SENSOR_BOX_RATE_HZ;
        let v = SensorSpec::sensor_box_voltage(f, cfg.seed).with_noise(self.noise_rms);
        let i = SensorSpec::sensor_box_current(f, cfg.seed).with_noise(self.noise_rms);
        StartupTrace::simulate(&cfg)?.sample(&v, &i)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub f_s: u32,
    pub method: Discretization,
    pub result: std::result::Result<Identification, String>,
    pub nmpe: Option<f64>,
}

/// Identification of the same startup at several sampling rates and with
/// each discretization; each cell keeps the best of `cfg.starts` fits.
pub fn frequency_sweep(cfg: &StudyConfig, rates: &[u32], methods: &[Discretization]) -> Result<Vec<SweepCell>> {
    cfg.validate()?;
    for f in rates {
        if !crate::sensors::BREAKER_RATES_HZ.contains(f) {
            return Err(Error::Config(format!("sweep rate {f} Hz is not a breaker rate")));
        }
    }
    let datasets = cfg.derivative_datasets(rates)?;
    let validation = cfg.validation_dataset()?;
    let jobs: Vec<(usize, Discretization)> = (0..rates.len())
        .flat_map(|r| methods.iter().map(move |m| (r, *m)))
        .collect();
    Ok(jobs
        .into_par_iter()
        .map(|(r, method)| {
            let result = identify_best_of(
                &datasets[r],
                method,
                &cfg.bounds,
                &cfg.solver,
                &cfg.init,
                cfg.starts,
                &ParamMask::all(),
                &[],
            )
            .map_err(|e| e.to_string());
            let nmpe = result
                .as_ref()
                .ok()
                .and_then(|id| nmpe(&id.params, &validation, Simulator::Discrete(method)).ok());
            SweepCell {
                f_s: rates[r],
                method,
                result,
                nmpe,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverparamRow {
    pub f_s: u32,
    pub method: Discretization,
    pub with_offset: std::result::Result<Identification, String>,
    pub without_offset: std::result::Result<Identification, String>,
}

/// Fits with the full load model and with the constant load term pinned to 0.
pub fn overparam_study(cfg: &StudyConfig, rates: &[u32], methods: &[Discretization]) -> Result<Vec<OverparamRow>> {
    cfg.validate()?;
    let datasets = cfg.derivative_datasets(rates)?;
    let mask = ParamMask::fixing(&[MotorParams::TL0]);
    let fit = |ds: &StartupDataset, method, mask: &ParamMask, pinned: &[(usize, f64)]| {
        identify_best_of(
            ds,
            method,
            &cfg.bounds,
            &cfg.solver,
            &cfg.init,
            cfg.starts,
            mask,
            pinned,
        )
        .map_err(|e| e.to_string())
    };
    let jobs: Vec<(usize, Discretization)> = (0..rates.len())
        .flat_map(|r| methods.iter().map(move |m| (r, *m)))
        .collect();
    Ok(jobs
        .into_par_iter()
        .map(|(r, method)| {
            let ds = &datasets[r];
            OverparamRow {
                f_s: rates[r],
                method,
                with_offset: fit(ds, method, &ParamMask::all(), &[]),
                without_offset: fit(ds, method, &mask, &[(MotorParams::TL0, 0.0)]),
            }
        })
        .collect())
}
