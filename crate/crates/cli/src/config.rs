//! Run configuration: preset defaults, patched by a JSON file, overridden by
//! flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use clue::baselines::{SensitivityConfig, SparsityConvention, UfidoConfig};
use clue::clue::ClueConfig;
use clue::presets::Preset;
use clue::uncertainty::UncertaintyKind;

use crate::error::{io_err, CliError, Result};
use crate::{ConventionArg, GlobalArgs, Kind, Scale};

pub const OUT_ROOT_ENV: &str = "CLUE_OUT_ROOT";
const FILE_KEYS: [&str; 10] = [
    "dataset",
    "data",
    "scale",
    "seed",
    "out",
    "preset",
    "clue",
    "sensitivity",
    "ufido",
    "framework",
];

/// Synthetic sample sizes and rejection settings of the evaluation sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameworkSettings {
    pub n_train: usize,
    pub n_test: usize,
    pub reject_fraction: f64,
    pub eval_seed: u64,
    pub ufido_convention: SparsityConvention,
}

impl Default for FrameworkSettings {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_test: 500,
            reject_fraction: clue::evalfw::DEFAULT_REJECT_FRACTION,
            eval_seed: 7,
            ufido_convention: SparsityConvention::PenalizeMasking,
        }
    }
}

/// Fully resolved settings of one invocation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub dataset: Option<String>,
    pub data: Option<PathBuf>,
    pub scale: Scale,
    pub seed: u64,
    pub preset: Option<Preset>,
    pub clue: ClueConfig,
    pub sensitivity: SensitivityConfig,
    pub ufido: UfidoConfig,
    pub framework: FrameworkSettings,
    #[serde(skip)]
    pub out: PathBuf,
}

/// RFC 7396 merge patch.
pub fn merge_patch(target: &mut Value, patch: &Value) {
    match patch {
        Value::Object(p) => {
            if !target.is_object() {
                *target = Value::Object(Default::default());
            }
            let t = target.as_object_mut().expect("object");
            for (k, v) in p {
                if v.is_null() {
                    t.remove(k);
                } else {
                    merge_patch(t.entry(k.clone()).or_insert(Value::Null), v);
                }
            }
        }
        _ => *target = patch.clone(),
    }
}

fn patched<T: Serialize + for<'de> Deserialize<'de>>(base: &T, patch: Option<&Value>, what: &str) -> Result<T> {
    let Some(p) = patch else {
        return Ok(serde_json::from_value(serde_json::to_value(base)?)?);
    };
    let mut v = serde_json::to_value(base)?;
    merge_patch(&mut v, p);
    serde_json::from_value(v).map_err(|e| CliError::Usage(format!("config section `{what}`: {e}")))
}

fn read_file(path: &Path) -> Result<serde_json::Map<String, Value>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let v: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("config file {}: {e}", path.display())))?;
    let Value::Object(map) = v else {
        return Err(CliError::Usage(format!("config file {} must hold a JSON object", path.display())));
    };
    if let Some(k) = map.keys().find(|k| !FILE_KEYS.contains(&k.as_str())) {
        return Err(CliError::Usage(format!("unknown config key `{k}` (known: {})", FILE_KEYS.join(", "))));
    }
    Ok(map)
}

fn field<T: for<'de> Deserialize<'de>>(file: &serde_json::Map<String, Value>, key: &str) -> Result<Option<T>> {
    file.get(key)
        .map(|v| serde_json::from_value(v.clone()).map_err(|e| CliError::Usage(format!("config key `{key}`: {e}"))))
        .transpose()
}

pub fn kind_of(k: Kind) -> UncertaintyKind {
    match k {
        Kind::Total => UncertaintyKind::Total,
        Kind::Aleatoric => UncertaintyKind::Aleatoric,
        Kind::Epistemic => UncertaintyKind::Epistemic,
    }
}

pub fn convention_of(c: ConventionArg) -> SparsityConvention {
    match c {
        ConventionArg::Verbatim => SparsityConvention::Verbatim,
        ConventionArg::PenalizeMasking => SparsityConvention::PenalizeMasking,
    }
}

impl RunConfig {
    /// `command` names the subcommand and its own flags; it is part of the
    /// hash.
    pub fn resolve(g: &GlobalArgs, command: String, subcommand: &str) -> Result<Self> {
        let file = match &g.config {
            Some(p) => read_file(p)?,
            None => Default::default(),
        };
        let dataset = g.dataset.clone().or(field(&file, "dataset")?);
        let data = g.data.clone().or(field(&file, "data")?);
        let scale = g.scale.or(field(&file, "scale")?).unwrap_or(Scale::Desk);
        let seed = g.seed.or(field(&file, "seed")?).unwrap_or(0);
        let out = g
            .out
            .clone()
            .or(field(&file, "out")?)
            .unwrap_or_else(|| PathBuf::from("runs").join(subcommand));
        let out = match std::env::var_os(OUT_ROOT_ENV) {
            Some(root) if out.is_relative() => PathBuf::from(root).join(out),
            _ => out,
        };

        let preset = match &dataset {
            Some(name) => {
                let base = Preset::builtin(name).map_err(|e| CliError::Usage(e.to_string()))?;
                let base = match scale {
                    Scale::Full => base,
                    Scale::Desk => base.desk(),
                };
                let p: Preset = patched(&base, file.get("preset"), "preset")?;
                p.validate().map_err(|e| CliError::Usage(format!("preset mismatch: {e}")))?;
                Some(p)
            }
            None => None,
        };

        let base_clue = preset.as_ref().map_or_else(ClueConfig::default, Preset::clue_config);
        let mut clue: ClueConfig = patched(&base_clue, file.get("clue"), "clue")?;
        let mut sensitivity: SensitivityConfig =
            patched(&SensitivityConfig::new(0.1)?, file.get("sensitivity"), "sensitivity")?;
        let mut ufido: UfidoConfig = patched(&UfidoConfig::new(1.0), file.get("ufido"), "ufido")?;
        let framework: FrameworkSettings = patched(&FrameworkSettings::default(), file.get("framework"), "framework")?;

        if let Some(v) = g.lambda_x {
            clue.lambda_x = v;
        }
        if let Some(v) = g.lambda_y {
            clue.lambda_y = v;
        }
        if let Some(v) = g.eta {
            sensitivity.eta = v;
        }
        if let Some(v) = g.lambda_b {
            ufido.lambda_b = v;
        }
        if let Some(k) = g.uncertainty {
            let k = kind_of(k);
            clue.uncertainty = k;
            sensitivity.uncertainty = k;
            ufido.uncertainty = k;
        }
        clue.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if !(sensitivity.eta >= 0.0) || !(ufido.lambda_b >= 0.0) {
            return Err(CliError::Usage("--eta and --lambda-b must be non-negative".into()));
        }
        if !(framework.reject_fraction > 0.0 && framework.reject_fraction <= 1.0) {
            return Err(CliError::Usage("framework.reject_fraction must be in (0, 1]".into()));
        }
        Ok(Self {
            command,
            dataset,
            data,
            scale,
            seed,
            preset,
            clue,
            sensitivity,
            ufido,
            framework,
            out,
        })
    }

    pub fn preset(&self) -> Result<&Preset> {
        self.preset
            .as_ref()
            .ok_or_else(|| CliError::Usage("this command needs --dataset <preset>".into()))
    }

    /// SHA-256 of the resolved configuration without the output directory.
    pub fn hash(&self) -> Result<String> {
        let text = serde_json::to_string(self)?;
        Ok(format!("{:x}", Sha256::digest(text.as_bytes())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn merge_patch_replaces_and_removes() {
        let mut t = json!({"a": 1, "b": {"c": 2, "d": 3}});
        merge_patch(&mut t, &json!({"b": {"c": 5, "d": null}, "e": [1]}));
        assert_eq!(t, json!({"a": 1, "b": {"c": 5}, "e": [1]}));
    }

    fn args(dataset: &str) -> GlobalArgs {
        GlobalArgs {
            dataset: Some(dataset.into()),
            ..Default::default()
        }
    }

    #[test]
    fn preset_lambda_is_the_default() {
        let c = RunConfig::resolve(&args("wine"), "clue".into(), "clue").unwrap();
        assert_eq!(c.clue.lambda_x, 2.5);
        let mut g = args("wine");
        g.lambda_x = Some(4.0);
        assert_eq!(RunConfig::resolve(&g, "clue".into(), "clue").unwrap().clue.lambda_x, 4.0);
    }

    #[test]
    fn flags_beat_file_beat_preset() {
        let dir = std::env::temp_dir().join(format!("clue-cli-config-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.json");
        std::fs::write(&path, r#"{"dataset": "wine", "seed": 5, "clue": {"lambda_x": 7.0, "lr": 0.2}}"#).unwrap();
        let mut g = GlobalArgs {
            config: Some(path.clone()),
            ..Default::default()
        };
        let c = RunConfig::resolve(&g, "clue".into(), "clue").unwrap();
        assert_eq!((c.seed, c.clue.lambda_x, c.clue.lr), (5, 7.0, 0.2));
        g.seed = Some(9);
        g.lambda_x = Some(1.0);
        let c = RunConfig::resolve(&g, "clue".into(), "clue").unwrap();
        assert_eq!((c.seed, c.clue.lambda_x, c.clue.lr), (9, 1.0, 0.2));
        std::fs::write(&path, r#"{"dataset": "wine", "bogus": 1}"#).unwrap();
        assert!(matches!(RunConfig::resolve(&g, "clue".into(), "clue"), Err(CliError::Usage(_))));
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn hash_ignores_output_directory() {
        let mut g = args("compas");
        g.out = Some("a".into());
        let a = RunConfig::resolve(&g, "x".into(), "x").unwrap().hash().unwrap();
        g.out = Some("b".into());
        assert_eq!(a, RunConfig::resolve(&g, "x".into(), "x").unwrap().hash().unwrap());
        g.seed = Some(1);
        assert_ne!(a, RunConfig::resolve(&g, "x".into(), "x").unwrap().hash().unwrap());
    }

    #[test]
    fn unknown_preset_is_a_usage_error() {
        assert!(matches!(
            RunConfig::resolve(&args("none"), "x".into(), "x"),
            Err(CliError::Usage(_))
        ));
    }
}
