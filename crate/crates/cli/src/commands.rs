use std::fs;
use std::path::{Path, PathBuf};

use motor_ident::dataset::{write_atomic, StartupDataset};
use motor_ident::identify::{
    frequency_sweep, identify_best_of, multistart as run_multistart, nmpe_of, overparam_study, predict_currents,
    Identification, Simulator, HISTOGRAM_EDGES,
};
use motor_ident::integrate::Discretization;
use motor_ident::model::{MotorParams, N_PARAMS};
use motor_ident::sensitivity::ParamMask;
use motor_ident::sensors::{SensorSpec, StartupTrace, SENSOR_BOX_RATE_HZ};
use motor_ident::solver::{BoxConstraints, Termination};

use crate::config::{load_bounds, load_init_box, ResolvedRun, RunConfig};
use crate::error::CliError;
use crate::table::{num, Table};
use crate::{Common, FitOptions};

struct Run {
    resolved: ResolvedRun,
    out: PathBuf,
}

impl Run {
    fn start(command: &str, common: &Common) -> Result<Self, CliError> {
        let mut config = RunConfig::load(common.config.as_deref())?;
        if let Some(out) = &common.out {
            config.output_dir = out.clone();
        }
        let out = config.output_dir.clone();
        let mut resolved = ResolvedRun::new(command, config);
        if let Some(path) = &common.config {
            resolved.read_input("config", path)?;
        }
        Ok(Self { resolved, out })
    }

    fn config(&mut self) -> &mut RunConfig {
        &mut self.resolved.config
    }

    fn read_dataset(&mut self, path: &Path) -> Result<StartupDataset, CliError> {
        let text = self.resolved.read_input("dataset", path)?;
        StartupDataset::from_text(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    fn apply_fit_options(&mut self, fit: &FitOptions) -> Result<(), CliError> {
        if let Some(path) = &fit.bounds_file {
            self.resolved.read_input("bounds", path)?;
            self.config().study.bounds = load_bounds(path)?;
        }
        if let Some(path) = &fit.init_box_file {
            self.resolved.read_input("init_box", path)?;
            let base = self.config().study.init.clone();
            self.config().study.init = load_init_box(path, &base)?;
        }
        Ok(())
    }

    /// Validates the resolved config, creates the output directory and writes
    /// `run_config.toml`. Returns the config hash.
    fn commit(&self) -> Result<String, CliError> {
        self.resolved.config.study.validate()?;
        fs::create_dir_all(&self.out)
            .map_err(|e| CliError::Data(format!("cannot create {}: {e}", self.out.display())))?;
        let hash = self.resolved.hash();
        let text = format!("# config_hash: {hash}\n{}", self.resolved.to_toml());
        write_atomic(&self.out.join("run_config.toml"), text.as_bytes())?;
        Ok(hash)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn parse_method(s: &str) -> Result<Discretization, CliError> {
    s.parse()
        .map_err(|e: motor_ident::Error| CliError::Usage(e.to_string()))
}

fn parse_methods(list: &[String]) -> Result<Vec<Discretization>, CliError> {
    list.iter().map(|m| parse_method(m)).collect()
}

fn write_params(path: &Path, hash: &str, p: &MotorParams) -> Result<(), CliError> {
    let body = toml::to_string(p).expect("parameters serialize");
    write_atomic(path, format!("# config_hash: {hash}\n{body}").as_bytes())?;
    Ok(())
}

fn print_params(p: &MotorParams) {
    println!("parameter\tvalue");
    for (name, v) in MotorParams::NAMES.iter().zip(p.to_array()) {
        println!("{name}\t{v:.6}");
    }
}

pub fn simulate(common: &Common, fs: Option<Vec<u32>>, seed: Option<u64>) -> Result<(), CliError> {
    let mut run = Run::start("simulate", common)?;
    if let Some(fs) = fs {
        run.config().rates = fs;
    }
    if let Some(seed) = seed {
        run.config().study.startup.seed = seed;
    }
    let hash = run.commit()?;
    let study = &run.resolved.config.study;
    let rates = &run.resolved.config.rates;

    let mut index = Table::new(&hash, &["file", "output_kind", "f_s", "n", "saturated"]);
    let mut emit = |name: String, mut ds: StartupDataset| -> Result<(), CliError> {
        ds.provenance.config_hash = Some(hash.clone());
        write_atomic(&run.path(&name), ds.to_text().as_bytes())?;
        index.row(vec![
            name,
            ds.output_kind.to_string(),
            ds.f_s.to_string(),
            ds.len().to_string(),
            ds.saturated.to_string(),
        ]);
        Ok(())
    };
    for (f, ds) in rates.iter().zip(study.derivative_datasets(rates)?) {
        emit(format!("derivative_{f}.txt"), ds)?;
    }
    let seed = study.startup.seed;
    let trace = StartupTrace::simulate(&study.startup)?;
    let current = trace.sample(
        &SensorSpec::sensor_box_voltage(SENSOR_BOX_RATE_HZ, seed).with_noise(study.noise_rms),
        &SensorSpec::sensor_box_current(SENSOR_BOX_RATE_HZ, seed).with_noise(study.noise_rms),
    )?;
    emit(format!("current_{SENSOR_BOX_RATE_HZ}.txt"), current)?;
    emit(
        format!("validation_{SENSOR_BOX_RATE_HZ}.txt"),
        study.validation_dataset()?,
    )?;
    index.write(&run.path("datasets.tsv"))?;
    eprintln!("wrote {} datasets to {}", rates.len() + 2, run.out.display());
    Ok(())
}

fn fit_tables(hash: &str, id: &Identification, bounds: &BoxConstraints) -> (Table, Table, Table) {
    let mut estimate = Table::new(hash, &["parameter", "value", "lower", "upper", "at_bound", "fixed"]);
    let p = id.params.to_array();
    for (i, &v) in p.iter().enumerate() {
        let at_bound = v <= bounds.lower[i] || v >= bounds.upper[i];
        estimate.row(vec![
            MotorParams::NAMES[i].into(),
            num(v),
            num(bounds.lower[i]),
            num(bounds.upper[i]),
            at_bound.to_string(),
            id.fixed.contains(&i).to_string(),
        ]);
    }
    let r = &id.report;
    let mut iterations = Table::new(hash, &["iteration", "cost", "alpha"]);
    for (k, cost) in r.cost_trace.iter().enumerate() {
        let alpha = if k == 0 {
            f64::NAN
        } else {
            r.alphas.get(k - 1).copied().unwrap_or(f64::NAN)
        };
        iterations.row(vec![k.to_string(), num(*cost), num(alpha)]);
    }
    let mut report = Table::new(hash, &["key", "value"]);
    for (k, v) in [
        ("method", id.method.to_string()),
        ("output_kind", id.output_kind.to_string()),
        ("f_s", id.f_s.to_string()),
        ("cost", num(r.cost)),
        ("iterations", r.iterations.to_string()),
        ("termination", r.termination.to_string()),
        ("projected_gradient", num(r.projected_gradient)),
        ("gradient_cosine", num(r.gradient_cosine)),
    ] {
        report.row(vec![k.into(), v]);
    }
    for w in &id.warnings {
        report.row(vec!["warning".into(), w.replace(['\t', '\n'], " ")]);
    }
    (estimate, iterations, report)
}

pub fn identify(
    common: &Common,
    fit: &FitOptions,
    dataset: &Path,
    starts: usize,
    pin_offset: bool,
) -> Result<(), CliError> {
    if starts == 0 {
        return Err(CliError::Usage("--starts must be at least 1".into()));
    }
    let mut run = Run::start("identify", common)?;
    let method = parse_method(&fit.method)?;
    run.config().methods = vec![method.as_str().into()];
    run.config().study.starts = starts;
    run.apply_fit_options(fit)?;
    let ds = run.read_dataset(dataset)?;
    let hash = run.commit()?;
    let study = &run.resolved.config.study;

    let (mask, pinned) = if pin_offset {
        (ParamMask::fixing(&[MotorParams::TL0]), vec![(MotorParams::TL0, 0.0)])
    } else {
        (ParamMask::all(), vec![])
    };
    let id = identify_best_of(
        &ds,
        method,
        &study.bounds,
        &study.solver,
        &study.init,
        starts,
        &mask,
        &pinned,
    )?;
    let (estimate, iterations, report) = fit_tables(&hash, &id, &study.bounds);
    estimate.write(&run.path("estimate.tsv"))?;
    iterations.write(&run.path("iterations.tsv"))?;
    report.write(&run.path("report.tsv"))?;
    write_params(&run.path("params.toml"), &hash, &id.params)?;
    print_params(&id.params);
    eprintln!(
        "{} after {} iterations, cost {:.6e}",
        id.report.termination, id.report.iterations, id.report.cost
    );
    for w in &id.warnings {
        eprintln!("warning: {w}");
    }
    if id.report.termination == Termination::Failure {
        return Err(CliError::Numerical(
            id.report.message.clone().unwrap_or_else(|| "solver failed".into()),
        ));
    }
    Ok(())
}

pub fn multistart(
    common: &Common,
    fit: &FitOptions,
    dataset: &Path,
    starts: Option<usize>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let mut run = Run::start("multistart", common)?;
    let method = parse_method(&fit.method)?;
    run.config().methods = vec![method.as_str().into()];
    run.apply_fit_options(fit)?;
    if let Some(n) = starts {
        run.config().study.init.n_starts = n;
    }
    if let Some(seed) = seed {
        run.config().study.init.seed = seed;
    }
    if run.config().study.init.n_starts == 0 {
        return Err(CliError::Usage("--starts must be at least 1".into()));
    }
    let ds = run.read_dataset(dataset)?;
    let hash = run.commit()?;
    let study = &run.resolved.config.study;

    let report = run_multistart(&ds, method, &study.bounds, &study.init, &study.solver)?;
    let mut header = vec!["start", "status", "cost", "ratio", "acceptable", "iterations"];
    let p0_names: Vec<String> = MotorParams::NAMES.iter().map(|n| format!("p0_{n}")).collect();
    header.extend(p0_names.iter().map(String::as_str));
    header.extend(MotorParams::NAMES);
    let mut table = Table::new(&hash, &header);
    for s in &report.starts {
        let mut row = vec![s.index.to_string()];
        match (&s.result, s.cost()) {
            (Ok(id), Some(c)) => {
                let ratio = c / report.j_min;
                row.extend([
                    id.report.termination.to_string(),
                    num(c),
                    num(ratio),
                    (ratio <= motor_ident::identify::ACCEPT_RATIO).to_string(),
                    id.report.iterations.to_string(),
                ]);
                row.extend(s.p0.to_array().map(num));
                row.extend(id.params.to_array().map(num));
            }
            _ => {
                row.extend([
                    "failed".into(),
                    num(f64::NAN),
                    num(f64::NAN),
                    "false".into(),
                    "0".into(),
                ]);
                row.extend(s.p0.to_array().map(num));
                row.extend([f64::NAN; N_PARAMS].map(num));
            }
        }
        table.row(row);
    }
    table.write(&run.path("starts.tsv"))?;

    let mut hist = Table::new(&hash, &["ratio_low", "ratio_high", "count"]);
    let mut low = 1.0;
    for (i, count) in report.histogram.iter().enumerate() {
        let high = HISTOGRAM_EDGES.get(i).copied().unwrap_or(f64::INFINITY);
        hist.row(vec![num(low), num(high), count.to_string()]);
        low = high;
    }
    hist.write(&run.path("histogram.tsv"))?;

    let mut summary = Table::new(&hash, &["key", "value"]);
    summary.row(vec!["starts".into(), report.starts.len().to_string()]);
    summary.row(vec!["j_min".into(), num(report.j_min)]);
    summary.row(vec!["acceptable".into(), report.acceptable_count.to_string()]);
    summary.row(vec!["acceptable_fraction".into(), num(report.acceptable_fraction())]);
    summary.write(&run.path("summary.tsv"))?;

    let best = report
        .best()
        .ok_or_else(|| CliError::Numerical("no start produced a finite cost".into()))?;
    write_params(&run.path("params.toml"), &hash, &best.params)?;
    print_params(&best.params);
    eprintln!(
        "{} of {} starts within {:.0}% of the best cost {:.6e}",
        report.acceptable_count,
        report.starts.len(),
        100.0 * (motor_ident::identify::ACCEPT_RATIO - 1.0),
        report.j_min
    );
    Ok(())
}

fn study_overrides(
    run: &mut Run,
    fs: Option<Vec<u32>>,
    method: Option<String>,
    seed: Option<u64>,
    starts: Option<usize>,
) -> Result<(Vec<u32>, Vec<Discretization>), CliError> {
    if let Some(fs) = fs {
        run.config().rates = fs;
    }
    if let Some(m) = method {
        run.config().methods = vec![parse_method(&m)?.as_str().into()];
    }
    if let Some(seed) = seed {
        run.config().study.startup.seed = seed;
    }
    if let Some(n) = starts {
        run.config().study.starts = n;
    }
    let methods = parse_methods(&run.config().methods)?;
    Ok((run.config().rates.clone(), methods))
}

fn param_rows(out: &mut Vec<(String, String)>, id: &Identification) {
    for (name, v) in MotorParams::NAMES.iter().zip(id.params.to_array()) {
        out.push((name.to_string(), num(v)));
    }
    out.push(("cost".into(), num(id.report.cost)));
    out.push(("iterations".into(), id.report.iterations.to_string()));
}

pub fn sweep(
    common: &Common,
    fs: Option<Vec<u32>>,
    method: Option<String>,
    seed: Option<u64>,
    starts: Option<usize>,
) -> Result<(), CliError> {
    let mut run = Run::start("sweep", common)?;
    let (rates, methods) = study_overrides(&mut run, fs, method, seed, starts)?;
    let hash = run.commit()?;
    let cells = frequency_sweep(&run.resolved.config.study, &rates, &methods)?;
    let mut table = Table::new(&hash, &["f_s", "method", "status", "quantity", "value"]);
    for c in &cells {
        let mut rows = Vec::new();
        let status = match &c.result {
            Ok(id) => {
                param_rows(&mut rows, id);
                rows.push(("nmpe".into(), num(c.nmpe.unwrap_or(f64::NAN))));
                id.report.termination.to_string()
            }
            Err(e) => {
                eprintln!("{} Hz {}: {e}", c.f_s, c.method);
                "failed".to_string()
            }
        };
        for (q, v) in rows {
            table.row(vec![c.f_s.to_string(), c.method.to_string(), status.clone(), q, v]);
        }
    }
    table.write(&run.path("sweep.tsv"))?;
    eprintln!("wrote {}", run.path("sweep.tsv").display());
    if cells.iter().all(|c| c.result.is_err()) {
        return Err(CliError::Numerical("every sweep cell failed".into()));
    }
    Ok(())
}

pub fn overparam(
    common: &Common,
    fs: Option<Vec<u32>>,
    method: Option<String>,
    seed: Option<u64>,
    starts: Option<usize>,
) -> Result<(), CliError> {
    let mut run = Run::start("overparam", common)?;
    let (rates, methods) = study_overrides(&mut run, fs, method, seed, starts)?;
    let hash = run.commit()?;
    let rows = overparam_study(&run.resolved.config.study, &rates, &methods)?;
    let mut table = Table::new(&hash, &["f_s", "method", "model", "status", "quantity", "value"]);
    let mut failures = 0;
    for r in &rows {
        for (model, result) in [("with_offset", &r.with_offset), ("without_offset", &r.without_offset)] {
            let mut cells = Vec::new();
            let status = match result {
                Ok(id) => {
                    param_rows(&mut cells, id);
                    id.report.termination.to_string()
                }
                Err(e) => {
                    failures += 1;
                    eprintln!("{} Hz {} {model}: {e}", r.f_s, r.method);
                    "failed".into()
                }
            };
            for (q, v) in cells {
                table.row(vec![
                    r.f_s.to_string(),
                    r.method.to_string(),
                    model.into(),
                    status.clone(),
                    q,
                    v,
                ]);
            }
        }
    }
    table.write(&run.path("overparam.tsv"))?;
    eprintln!("wrote {}", run.path("overparam.tsv").display());
    if failures == 2 * rows.len() {
        return Err(CliError::Numerical("every fit failed".into()));
    }
    Ok(())
}

pub fn validate(common: &Common, params: &Path, dataset: &Path, method: &str) -> Result<(), CliError> {
    let mut run = Run::start("validate", common)?;
    let sim = match method {
        "reference" => Simulator::Reference(8),
        m => Simulator::Discrete(parse_method(m)?),
    };
    run.config().methods = vec![method.into()];
    let text = run.resolved.read_input("params", params)?;
    let p: MotorParams = toml::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", params.display())))?;
    p.validate()?;
    let ds = run.read_dataset(dataset)?;
    let hash = run.commit()?;

    let predicted = predict_currents(&p, &ds, sim)?;
    let e = nmpe_of(&ds.output, &predicted)?;
    let mut trace = Table::new(
        &hash,
        &["k", "t", "measured_d", "measured_q", "predicted_d", "predicted_q"],
    );
    for (k, (m, y)) in ds.output.iter().zip(&predicted).enumerate() {
        trace.row(vec![
            k.to_string(),
            num(k as f64 * ds.t_s),
            num(m.d),
            num(m.q),
            num(y.d),
            num(y.q),
        ]);
    }
    trace.write(&run.path("trace.tsv"))?;
    let mut summary = Table::new(&hash, &["simulator", "samples", "nmpe"]);
    summary.row(vec![method.into(), ds.len().to_string(), num(e)]);
    summary.write(&run.path("nmpe.tsv"))?;
    println!("nmpe\t{e:.6e}");
    Ok(())
}
