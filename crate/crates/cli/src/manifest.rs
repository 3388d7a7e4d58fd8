use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;
use wdm3d::manifest::sha256_hex;
use wdm3d::schedule::ScheduleConfig;

pub enum CliError {
    Usage(String),
    Run(wdm3d::Error),
    Failed { code: &'static str, message: String },
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "UsageError",
            CliError::Run(e) => e.code(),
            CliError::Failed { code, .. } => code,
        }
    }

    pub fn message(&self) -> String {
        match self {
            CliError::Usage(m) => m.clone(),
            CliError::Run(e) => e.to_string(),
            CliError::Failed { message, .. } => message.clone(),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    pub fn to_json(&self) -> Value {
        serde_json::json!({
            "error": self.code(),
            "message": self.message(),
            "exit_code": self.exit_code(),
        })
    }
}

impl From<wdm3d::Error> for CliError {
    fn from(e: wdm3d::Error) -> Self {
        CliError::Run(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Run(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// State a command accumulates for its manifest, kept even when it fails midway.
#[derive(Default)]
pub struct Ctx {
    pub seed: Option<u64>,
    pub schedule: Option<ScheduleConfig>,
    pub sampler: Option<Value>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub timings: BTreeMap<String, f64>,
    pub result: Value,
    /// The command already wrote its own stdout.
    pub printed: bool,
}

fn file_checksum(p: &Path) -> CliResult<String> {
    Ok(sha256_hex(&fs::read(p)?))
}

impl Ctx {
    pub fn input(&mut self, p: &Path) -> CliResult<()> {
        let sum = file_checksum(p)?;
        self.inputs.insert(p.display().to_string(), sum);
        Ok(())
    }

    pub fn output(&mut self, p: &Path) -> CliResult<()> {
        let sum = file_checksum(p)?;
        self.outputs.insert(p.display().to_string(), sum);
        Ok(())
    }

    pub fn time(&mut self, phase: &str, start: Instant) {
        *self.timings.entry(phase.to_string()).or_default() += start.elapsed().as_secs_f64();
    }
}

#[derive(Serialize)]
pub struct ErrorRecord {
    pub code: String,
    pub message: String,
}

/// Field order is the serialized key order.
#[derive(Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command_line: Vec<String>,
    pub subcommand: String,
    pub config_hash: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub schedule: Option<ScheduleConfig>,
    pub sampler: Option<Value>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub timings: BTreeMap<String, f64>,
    pub result: Value,
    pub status: &'static str,
    pub error: Option<ErrorRecord>,
}

impl RunManifest {
    pub fn new(
        command_line: Vec<String>,
        subcommand: &str,
        config: Value,
        ctx: Ctx,
        err: Option<&CliError>,
    ) -> Self {
        let config_hash = sha256_hex(config.to_string().as_bytes());
        Self {
            tool: "wdm3d",
            version: env!("CARGO_PKG_VERSION"),
            command_line,
            subcommand: subcommand.to_string(),
            config_hash,
            config,
            seed: ctx.seed,
            schedule: ctx.schedule,
            sampler: ctx.sampler,
            inputs: ctx.inputs,
            outputs: ctx.outputs,
            timings: ctx.timings,
            result: ctx.result,
            status: if err.is_some() { "error" } else { "ok" },
            error: err.map(|e| ErrorRecord {
                code: e.code().to_string(),
                message: e.message(),
            }),
        }
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let mut text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        text.push('\n');
        fs::write(path, text)
    }
}
