//! JSON report envelope, its schema check, and CSV output.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use masq_core::io::RunConfig;
use serde::Serialize;
use serde_json::Value;

pub const SCHEMA_NAME: &str = "masq-report";
pub const SCHEMA_VERSION: u64 = 1;
/// The only field allowed to differ between reruns of the same config.
pub const TIMESTAMP_FIELD: &str = "generated_at";

/// Required keys of `body`, per command.
pub const BODY_KEYS: &[(&str, &[&str])] = &[
    ("gen-scenario", &["d_model", "depth", "modalities", "eval_sequences", "files"]),
    ("calibrate", &["layers"]),
    ("quantize", &["method", "profile", "rank_ratio", "layers", "model_file"]),
    ("evaluate", &["method", "profile", "token_counts", "output_sqnr_db", "output_mse", "layer_sqnr_db"]),
    ("report-dominance", &["layers"]),
    ("sweep-cmc-rank", &["profile", "ratios", "rows"]),
    ("theorem1", &["bits", "tokens", "jitter", "rows"]),
    ("theorem2", &["rows"]),
    ("cost-model", &["d", "rank", "modalities", "rows"]),
];

#[derive(Debug, Serialize)]
pub struct Report<'a, T: Serialize> {
    pub schema: &'static str,
    pub schema_version: u64,
    pub command: &'a str,
    pub generated_at: String,
    pub seed: u64,
    pub config: &'a RunConfig,
    pub body: T,
}

impl<'a, T: Serialize> Report<'a, T> {
    pub fn new(command: &'a str, config: &'a RunConfig, body: T) -> Self {
        Self {
            schema: SCHEMA_NAME,
            schema_version: SCHEMA_VERSION,
            command,
            generated_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            seed: config.seed,
            config,
            body,
        }
    }
}

/// Writes `<dir>/<command>.json` and returns its path.
pub fn write_report<T: Serialize>(dir: &Path, report: &Report<'_, T>) -> Result<std::path::PathBuf> {
    let path = dir.join(format!("{}.json", report.command));
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Checks the envelope and the command's required body keys.
pub fn validate_report(v: &Value) -> Result<()> {
    let obj = v.as_object().context("report is not a JSON object")?;
    let field = |k: &str| obj.get(k).with_context(|| format!("missing `{k}`"));
    if field("schema")?.as_str() != Some(SCHEMA_NAME) {
        bail!("`schema` is not `{SCHEMA_NAME}`");
    }
    if field("schema_version")?.as_u64() != Some(SCHEMA_VERSION) {
        bail!("unsupported `schema_version`");
    }
    let ts = field(TIMESTAMP_FIELD)?.as_str().context("`generated_at` is not a string")?;
    chrono::DateTime::parse_from_rfc3339(ts).context("`generated_at` is not RFC 3339")?;
    field("seed")?.as_u64().context("`seed` is not an unsigned integer")?;
    let config = field("config")?;
    serde_json::from_value::<RunConfig>(config.clone()).context("`config` is not a valid run config")?;
    let command = field("command")?.as_str().context("`command` is not a string")?;
    let keys = BODY_KEYS
        .iter()
        .find(|(c, _)| *c == command)
        .map(|(_, k)| *k)
        .with_context(|| format!("unknown command `{command}`"))?;
    let body = field("body")?.as_object().context("`body` is not an object")?;
    for k in keys {
        if !body.contains_key(*k) {
            bail!("`body` of `{command}` is missing `{k}`");
        }
    }
    let allowed = ["schema", "schema_version", "command", TIMESTAMP_FIELD, "seed", "config", "body"];
    if let Some(extra) = obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        bail!("unexpected top-level key `{extra}`");
    }
    Ok(())
}

/// The report with its timestamp removed, for reproducibility checks.
pub fn without_timestamp(mut v: Value) -> Value {
    if let Some(obj) = v.as_object_mut() {
        obj.remove(TIMESTAMP_FIELD);
    }
    v
}

/// Writes rows to `<dir>/<name>` with the header taken from the row type.
pub fn write_csv<T: Serialize>(dir: &Path, name: &str, rows: &[T]) -> Result<()> {
    let path = dir.join(name);
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
