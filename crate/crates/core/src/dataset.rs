//! Startup datasets and their text file format.
//!
//! A file is a block of `key: value` header lines, a blank line, a column
//! header `k v_d v_q y_d y_q`, and one whitespace-separated row per sample.
//! Lines starting with `#` are comments.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dq::DqSample;
use crate::error::{Error, Result};
use crate::model::{GridConstants, MotorParams};
use crate::sensors::{is_supported_rate, ChannelKind, SensorSpec};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    Current,
    CurrentDerivative,
}

impl OutputKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            OutputKind::Current => "current",
            OutputKind::CurrentDerivative => "current_derivative",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "current" => Some(OutputKind::Current),
            "current_derivative" | "derivative" => Some(OutputKind::CurrentDerivative),
            _ => None,
        }
    }
}

impl std::fmt::Display for OutputKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How a synthetic dataset was produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorInfo {
    pub p_true: MotorParams,
    pub line_voltage_rms: f64,
    pub energization_phase: f64,
    pub duration: f64,
    pub seed: u64,
    pub low_pass_hz: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub voltage: Option<SensorSpec>,
    pub output: Option<SensorSpec>,
    pub generator: Option<GeneratorInfo>,
    /// Hash of the run configuration that produced the file, if any.
    pub config_hash: Option<String>,
}

/// Sampled dq voltages and outputs of one startup from standstill.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartupDataset {
    pub t_s: f64,
    pub f_s: u32,
    pub grid: GridConstants,
    pub voltage: Vec<DqSample>,
    pub output: Vec<DqSample>,
    pub output_kind: OutputKind,
    pub saturated: bool,
    pub provenance: Provenance,
}

impl StartupDataset {
    pub fn len(&self) -> usize {
        self.voltage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voltage.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if !is_supported_rate(self.f_s) {
            return Err(Error::Dataset(format!(
                "unsupported sampling frequency {} Hz",
                self.f_s
            )));
        }
        if (self.t_s * self.f_s as f64 - 1.0).abs() > 1e-9 {
            return Err(Error::Dataset(format!(
                "t_s = {} does not match f_s = {}",
                self.t_s, self.f_s
            )));
        }
        if self.voltage.len() != self.output.len() {
            return Err(Error::Dataset(format!(
                "{} voltage samples but {} output samples",
                self.voltage.len(),
                self.output.len()
            )));
        }
        if self.voltage.len() < 2 {
            return Err(Error::Dataset("dataset needs at least two samples".into()));
        }
        self.grid.validate()?;
        let finite = |s: &DqSample| s.d.is_finite() && s.q.is_finite();
        if let Some(k) = self
            .voltage
            .iter()
            .zip(&self.output)
            .position(|(v, y)| !finite(v) || !finite(y))
        {
            return Err(Error::Dataset(format!("non-finite sample at k = {k}")));
        }
        Ok(())
    }

    /// Keeps every `factor`-th sample, starting with the first.
    pub fn decimate(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.f_s.is_multiple_of(factor as u32) {
            return Err(Error::Dataset(format!("cannot decimate {} Hz by {factor}", self.f_s)));
        }
        let f_s = self.f_s / factor as u32;
        if !is_supported_rate(f_s) {
            return Err(Error::Dataset(format!("decimation to unsupported rate {f_s} Hz")));
        }
        let pick = |v: &[DqSample]| v.iter().step_by(factor).copied().collect::<Vec<_>>();
        let mut out = self.clone();
        out.f_s = f_s;
        out.t_s = 1.0 / f_s as f64;
        out.voltage = pick(&self.voltage);
        out.output = pick(&self.output);
        for spec in [&mut out.provenance.voltage, &mut out.provenance.output]
            .into_iter()
            .flatten()
        {
            spec.f_s = f_s;
        }
        Ok(out)
    }

    /// Keeps the first `n` samples.
    pub fn truncated(&self, n: usize) -> Self {
        let mut out = self.clone();
        out.voltage.truncate(n);
        out.output.truncate(n);
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "format_version: {FORMAT_VERSION}");
        let _ = writeln!(s, "t_s: {:.16e}", self.t_s);
        let _ = writeln!(s, "f_s: {}", self.f_s);
        let _ = writeln!(s, "n: {}", self.len());
        let _ = writeln!(s, "output_kind: {}", self.output_kind);
        let _ = writeln!(s, "omega_e: {:.16e}", self.grid.omega_e);
        let _ = writeln!(s, "poles: {}", self.grid.poles);
        let _ = writeln!(s, "saturated: {}", self.saturated);
        for (prefix, spec) in [
            ("voltage", &self.provenance.voltage),
            ("output", &self.provenance.output),
        ] {
            if let Some(spec) = spec {
                let _ = writeln!(
                    s,
                    "{prefix}_sensor: kind={} full_scale={:.16e} bits={} f_s={} noise_rms={:.16e} seed={} line_to_line={}",
                    spec.kind.as_str(),
                    spec.full_scale,
                    spec.bits,
                    spec.f_s,
                    spec.noise_rms,
                    spec.seed,
                    spec.line_to_line
                );
            }
        }
        if let Some(g) = &self.provenance.generator {
            let p = g.p_true.to_array();
            let _ = writeln!(
                s,
                "p_true: {}",
                p.iter().map(|v| format!("{v:.16e}")).collect::<Vec<_>>().join(" ")
            );
            let _ = writeln!(s, "line_voltage_rms: {:.16e}", g.line_voltage_rms);
            let _ = writeln!(s, "energization_phase: {:.16e}", g.energization_phase);
            let _ = writeln!(s, "duration: {:.16e}", g.duration);
            let _ = writeln!(s, "seed: {}", g.seed);
            if let Some(fc) = g.low_pass_hz {
                let _ = writeln!(s, "low_pass_hz: {fc:.16e}");
            }
        }
        if let Some(h) = &self.provenance.config_hash {
            let _ = writeln!(s, "config_hash: {h}");
        }
        s.push('\n');
        s.push_str("k v_d v_q y_d y_q\n");
        for (k, (v, y)) in self.voltage.iter().zip(&self.output).enumerate() {
            let _ = writeln!(s, "{k} {:.16e} {:.16e} {:.16e} {:.16e}", v.d, v.q, y.d, y.q);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        read_from(text.as_bytes())
    }
}

fn format_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Format { line, msg: msg.into() }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| format_err(line, format!("invalid value for {key}: {v:?}")))
}

fn parse_sensor(line: usize, v: &str) -> Result<SensorSpec> {
    let mut spec = SensorSpec {
        kind: ChannelKind::Voltage,
        full_scale: 0.0,
        bits: 0,
        f_s: 0,
        noise_rms: 0.0,
        seed: 0,
        line_to_line: false,
    };
    for field in v.split_whitespace() {
        let (k, val) = field
            .split_once('=')
            .ok_or_else(|| format_err(line, format!("malformed sensor field {field:?}")))?;
        match k {
            "kind" => {
                spec.kind =
                    ChannelKind::parse(val).ok_or_else(|| format_err(line, format!("unknown channel kind {val:?}")))?
            }
            "full_scale" => spec.full_scale = parse_num(line, k, val)?,
            "bits" => spec.bits = parse_num(line, k, val)?,
            "f_s" => spec.f_s = parse_num(line, k, val)?,
            "noise_rms" => spec.noise_rms = parse_num(line, k, val)?,
            "seed" => spec.seed = parse_num(line, k, val)?,
            "line_to_line" => spec.line_to_line = parse_num(line, k, val)?,
            _ => return Err(format_err(line, format!("unknown sensor field {k:?}"))),
        }
    }
    Ok(spec)
}

/// Parses a dataset from any reader.
pub fn read_from<R: Read>(reader: R) -> Result<StartupDataset> {
    let reader = BufReader::new(reader);
    let mut lines = reader.lines().enumerate().map(|(i, l)| (i + 1, l));

    let mut version = None;
    let mut t_s = None;
    let mut f_s = None;
    let mut n = None;
    let mut kind = None;
    let mut omega_e = None;
    let mut poles = None;
    let mut saturated = false;
    let mut provenance = Provenance::default();
    let mut p_true = None;
    let mut line_voltage_rms = None;
    let mut phase = None;
    let mut duration = None;
    let mut seed = None;
    let mut low_pass = None;

    let mut last_line = 0;
    // header
    loop {
        let Some((ln, line)) = lines.next() else {
            return Err(format_err(last_line, "unexpected end of file in header"));
        };
        last_line = ln;
        let line = line?;
        let t = line.trim();
        if t.starts_with('#') {
            continue;
        }
        if t.is_empty() {
            if version.is_some() {
                break;
            }
            continue;
        }
        let (key, v) = t
            .split_once(':')
            .ok_or_else(|| format_err(ln, format!("expected `key: value`, got {t:?}")))?;
        let v = v.trim();
        match key.trim() {
            "format_version" => {
                let ver: u32 = parse_num(ln, key, v)?;
                if ver != FORMAT_VERSION {
                    return Err(format_err(ln, format!("unsupported format_version {ver}")));
                }
                version = Some(ver);
            }
            "t_s" => t_s = Some(parse_num::<f64>(ln, key, v)?),
            "f_s" => {
                let rate: u32 = parse_num(ln, key, v)?;
                if !is_supported_rate(rate) {
                    return Err(format_err(
                        ln,
                        format!("unsupported f_s {rate} Hz (expected 1200, 2400, 4800, 9600 or 5000)"),
                    ));
                }
                f_s = Some(rate);
            }
            "n" => n = Some(parse_num::<usize>(ln, key, v)?),
            "output_kind" => {
                kind = Some(OutputKind::parse(v).ok_or_else(|| format_err(ln, format!("unknown output_kind {v:?}")))?)
            }
            "omega_e" => omega_e = Some(parse_num::<f64>(ln, key, v)?),
            "poles" => poles = Some(parse_num::<u32>(ln, key, v)?),
            "saturated" => saturated = parse_num(ln, key, v)?,
            "voltage_sensor" => provenance.voltage = Some(parse_sensor(ln, v)?),
            "output_sensor" => provenance.output = Some(parse_sensor(ln, v)?),
            "p_true" => {
                let vals = v
                    .split_whitespace()
                    .map(|x| parse_num::<f64>(ln, key, x))
                    .collect::<Result<Vec<_>>>()?;
                let arr: [f64; 7] = vals.try_into().map_err(|_| format_err(ln, "p_true needs 7 values"))?;
                p_true = Some(MotorParams::from_array(arr));
            }
            "line_voltage_rms" => line_voltage_rms = Some(parse_num::<f64>(ln, key, v)?),
            "energization_phase" => phase = Some(parse_num::<f64>(ln, key, v)?),
            "duration" => duration = Some(parse_num::<f64>(ln, key, v)?),
            "seed" => seed = Some(parse_num::<u64>(ln, key, v)?),
            "low_pass_hz" => low_pass = Some(parse_num::<f64>(ln, key, v)?),
            "config_hash" => provenance.config_hash = Some(v.to_string()),
            other => return Err(format_err(ln, format!("unknown header key {other:?}"))),
        }
    }

    let missing = |k: &str| format_err(last_line, format!("header is missing `{k}`"));
    version.ok_or_else(|| missing("format_version"))?;
    let f_s = f_s.ok_or_else(|| missing("f_s"))?;
    let t_s = t_s.unwrap_or(1.0 / f_s as f64);
    if (t_s * f_s as f64 - 1.0).abs() > 1e-9 {
        return Err(format_err(last_line, format!("t_s = {t_s} does not match f_s = {f_s}")));
    }
    let n = n.ok_or_else(|| missing("n"))?;
    let output_kind = kind.ok_or_else(|| missing("output_kind"))?;
    let grid = GridConstants::new(
        omega_e.ok_or_else(|| missing("omega_e"))?,
        poles.ok_or_else(|| missing("poles"))?,
    )
    .map_err(|e| format_err(last_line, e.to_string()))?;
    if let (Some(p_true), Some(line_voltage_rms), Some(energization_phase), Some(duration), Some(seed)) =
        (p_true, line_voltage_rms, phase, duration, seed)
    {
        provenance.generator = Some(GeneratorInfo {
            p_true,
            line_voltage_rms,
            energization_phase,
            duration,
            seed,
            low_pass_hz: low_pass,
        });
    }

    // column header
    let mut saw_columns = false;
    let mut voltage = Vec::with_capacity(n);
    let mut output = Vec::with_capacity(n);
    for (ln, line) in lines {
        last_line = ln;
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        if !saw_columns {
            let cols: Vec<&str> = t.split_whitespace().collect();
            if cols != ["k", "v_d", "v_q", "y_d", "y_q"] {
                return Err(format_err(
                    ln,
                    format!("expected column header `k v_d v_q y_d y_q`, got {t:?}"),
                ));
            }
            saw_columns = true;
            continue;
        }
        let fields: Vec<&str> = t.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(format_err(ln, format!("expected 5 columns, got {}", fields.len())));
        }
        let k: usize = parse_num(ln, "k", fields[0])?;
        if k != voltage.len() {
            return Err(format_err(
                ln,
                format!("sample index {k} out of order (expected {})", voltage.len()),
            ));
        }
        let vals = fields[1..]
            .iter()
            .map(|f| parse_num::<f64>(ln, "sample", f))
            .collect::<Result<Vec<_>>>()?;
        let [vd, vq, yd, yq] = [vals[0], vals[1], vals[2], vals[3]];
        if ![vd, vq, yd, yq].iter().all(|x| x.is_finite()) {
            return Err(format_err(ln, "non-finite sample"));
        }
        voltage.push(DqSample::new(vd, vq));
        output.push(DqSample::new(yd, yq));
    }
    if voltage.len() != n {
        return Err(format_err(
            last_line,
            format!("header declares n = {n} but {} samples were read", voltage.len()),
        ));
    }
    let ds = StartupDataset {
        t_s,
        f_s,
        grid,
        voltage,
        output,
        output_kind,
        saturated,
        provenance,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn read_dataset(path: &Path) -> Result<StartupDataset> {
    let f = std::fs::File::open(path)?;
    read_from(f)
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_dataset(path: &Path, ds: &StartupDataset) -> Result<()> {
    write_atomic(path, ds.to_text().as_bytes())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}
