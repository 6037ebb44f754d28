use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use motor_ident::identify::{InitBox, StudyConfig};
use motor_ident::sensors::BREAKER_RATES_HZ;
use motor_ident::solver::BoxConstraints;

use crate::error::CliError;

/// Everything a run depends on. Written beside the outputs of every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Not part of the recorded config: results do not depend on it.
    #[serde(skip_serializing)]
    pub output_dir: PathBuf,
    /// Breaker sampling rates for `simulate`, `sweep` and `overparam`.
    pub rates: Vec<u32>,
    /// Discretizations for `sweep` and `overparam`: `euler`, `preview`.
    pub methods: Vec<String>,
    pub study: StudyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            rates: BREAKER_RATES_HZ.to_vec(),
            methods: vec!["euler".into(), "preview".into()],
            study: StudyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = read_text(path)?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoundsFile {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

/// Reads `lower = [...]` and `upper = [...]` (seven entries each).
pub fn load_bounds(path: &Path) -> Result<BoxConstraints, CliError> {
    let text = read_text(path)?;
    let b: BoundsFile = toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    BoxConstraints::new(b.lower, b.upper).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Reads an init box: `lower`, `upper`, and optionally `n_starts` and `seed`.
pub fn load_init_box(path: &Path, base: &InitBox) -> Result<InitBox, CliError> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct InitFile {
        lower: [f64; 7],
        upper: [f64; 7],
        n_starts: Option<usize>,
        seed: Option<u64>,
    }
    let text = read_text(path)?;
    let f: InitFile = toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok(InitBox {
        lower: f.lower,
        upper: f.upper,
        n_starts: f.n_starts.unwrap_or(base.n_starts),
        seed: f.seed.unwrap_or(base.seed),
    })
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// The configuration a command actually ran with: the run config after flag
/// overrides, the command name, and the inputs it read (with their hashes).
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedRun {
    pub command: String,
    pub inputs: Vec<InputFile>,
    pub config: RunConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct InputFile {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

impl ResolvedRun {
    pub fn new(command: &str, config: RunConfig) -> Self {
        Self {
            command: command.into(),
            inputs: Vec::new(),
            config,
        }
    }

    /// Records an input file and returns its contents.
    pub fn read_input(&mut self, role: &str, path: &Path) -> Result<String, CliError> {
        let text = read_text(path)?;
        self.inputs.push(InputFile {
            role: role.into(),
            path: path.to_path_buf(),
            sha256: sha256_hex(text.as_bytes()),
        });
        Ok(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }
}
