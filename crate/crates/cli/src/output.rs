//! CSV and JSON outputs stamped with the config hash and seed.

use std::fs::File;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::config::RunConfig;
use crate::error::{io_err, CliError, Result};

pub struct Ctx {
    pub cfg: RunConfig,
    pub hash: String,
}

impl Ctx {
    pub fn new(cfg: RunConfig, subcommand: &str) -> Result<Self> {
        let hash = cfg.hash()?;
        std::fs::create_dir_all(&cfg.out).map_err(io_err(&cfg.out))?;
        let ctx = Self { cfg, hash };
        ctx.write_json(&format!("{subcommand}.config.json"), &ctx.cfg)?;
        Ok(ctx)
    }

    pub fn out(&self) -> &Path {
        &self.cfg.out
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.cfg.out.join(name)
    }

    pub fn table(&self, name: &str, header: &[&str]) -> Result<Table> {
        let path = self.path(name);
        let file = File::create(&path).map_err(io_err(&path))?;
        let mut w = csv::Writer::from_writer(file);
        let mut h = vec!["config_hash", "seed"];
        h.extend_from_slice(header);
        w.write_record(&h)?;
        Ok(Table {
            w,
            hash: self.hash.clone(),
            width: header.len(),
        })
    }

    /// Writes `value` with `config_hash` and `seed` added at the top level.
    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut v = serde_json::to_value(value)?;
        let stamp = serde_json::json!({"config_hash": self.hash, "seed": self.cfg.seed});
        match &mut v {
            Value::Object(m) => {
                m.insert("config_hash".into(), stamp["config_hash"].clone());
                m.insert("seed".into(), stamp["seed"].clone());
            }
            other => {
                v = serde_json::json!({"config_hash": self.hash, "seed": self.cfg.seed, "value": other.take()});
            }
        }
        let path = self.path(name);
        let text = serde_json::to_string_pretty(&v)?;
        std::fs::write(&path, text).map_err(io_err(&path))
    }

    pub fn meta(&self) -> Value {
        serde_json::json!({"config_hash": self.hash, "seed": self.cfg.seed, "dataset": self.cfg.dataset})
    }
}

pub struct Table {
    w: csv::Writer<File>,
    hash: String,
    width: usize,
}

impl Table {
    /// One row; `seed` is the seed that produced it.
    pub fn row(&mut self, seed: u64, fields: &[String]) -> Result<()> {
        if fields.len() != self.width {
            return Err(CliError::Usage(format!(
                "internal: row has {} fields, header {}",
                fields.len(),
                self.width
            )));
        }
        let mut r = vec![self.hash.clone(), seed.to_string()];
        r.extend_from_slice(fields);
        self.w.write_record(&r)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.w.flush().map_err(|e| CliError::Io {
            path: "csv output".into(),
            source: e,
        })
    }
}

/// Shortest round-trip representation.
pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}
