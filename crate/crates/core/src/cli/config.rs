use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::{Ablation, TrainConfig};
use crate::indicators::DualThrustParams;
use crate::market_data::{
    load_csv, synth_series, LoadOptions, PriceSeries, SynthKind, SynthParams,
};
use crate::replay::BufferConfig;
use crate::simulator::SimConfig;

use super::CliError;

/// Synthetic data generated in place of a CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub length: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(flatten)]
    pub params: SynthParams,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// OHLC CSV file; relative paths resolve against the config file.
    pub path: Option<PathBuf>,
    pub synth: Option<SynthSpec>,
    /// Bars before this timestamp train, the rest test. Without it both use the whole series.
    pub split_timestamp: Option<i64>,
    pub strict_gaps: bool,
}

/// Everything a command needs, read from one TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds training; copied into `train.seed`.
    pub seed: u64,
    pub ablation: Ablation,
    pub out: Option<PathBuf>,
    /// Demonstration file written by `qtlab demos`; defaults to `demos.json` in the output directory.
    pub demo_file: Option<PathBuf>,
    pub data: DataConfig,
    pub sim: SimConfig,
    pub dual_thrust: DualThrustParams,
    pub buffer: BufferConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            ablation: Ablation::Qtnet,
            out: None,
            demo_file: None,
            data: DataConfig::default(),
            sim: SimConfig::default(),
            dual_thrust: DualThrustParams::default(),
            buffer: BufferConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Keys of a table, descending into nested tables with dotted names.
fn keys(value: &toml::Value, prefix: &str, out: &mut BTreeSet<String>) {
    if let toml::Value::Table(t) = value {
        for (k, v) in t {
            let name = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            keys(v, &name, out);
            out.insert(name);
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let value: toml::Value =
            toml::from_str(text).map_err(|e| CliError::input(format!("config: {e}")))?;
        // the nested sections use defaults for missing keys, so catch misspelled ones here
        let known = {
            let mut set = BTreeSet::new();
            let default = toml::Value::try_from(RunConfig::default())
                .map_err(|e| CliError::internal(e.to_string()))?;
            keys(&default, "", &mut set);
            set
        };
        let mut given = BTreeSet::new();
        for section in ["sim", "dual_thrust", "buffer", "train"] {
            if let Some(v) = value.get(section) {
                keys(v, section, &mut given);
            }
        }
        if let Some(unknown) = given.difference(&known).next() {
            return Err(CliError::input(format!("config: unknown key {unknown}")));
        }
        value
            .try_into()
            .map_err(|e: toml::de::Error| CliError::input(format!("config: {e}")))
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::input(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        resolve(&mut cfg.data.path);
        resolve(&mut cfg.demo_file);
        resolve(&mut cfg.out);
        Ok(cfg)
    }

    /// Applies the flag overrides and the ablation mode, then validates.
    pub fn finalize(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self, CliError> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if out.is_some() {
            self.out = out;
        }
        self.train.seed = self.seed;
        self.train = self.ablation.apply(self.train);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.sim.validate().map_err(CliError::input)?;
        self.dual_thrust.validate().map_err(CliError::input)?;
        self.buffer.validate().map_err(CliError::input)?;
        self.train.validate().map_err(CliError::input)?;
        self.ablation.check(&self.train).map_err(CliError::input)?;
        match (&self.data.path, &self.data.synth) {
            (Some(_), Some(_)) => {
                return Err(CliError::input(
                    "config: give either data.path or data.synth, not both",
                ))
            }
            (None, None) => {
                return Err(CliError::input(
                    "config: data.path or data.synth is required",
                ))
            }
            (Some(p), None) if !p.exists() => {
                return Err(CliError::input(format!(
                    "data file {} does not exist",
                    p.display()
                )))
            }
            _ => {}
        }
        Ok(())
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn demo_path(&self) -> PathBuf {
        self.demo_file
            .clone()
            .unwrap_or_else(|| self.out_dir().join("demos.json"))
    }

    pub fn load_series(&self) -> Result<PriceSeries, CliError> {
        match (&self.data.path, &self.data.synth) {
            (Some(p), _) => load_csv(
                p,
                &LoadOptions {
                    strict_gaps: self.data.strict_gaps,
                },
            )
            .map_err(CliError::input),
            (None, Some(s)) => {
                synth_series(s.kind, s.length, s.seed, &s.params).map_err(CliError::input)
            }
            (None, None) => Err(CliError::input("config: no data source")),
        }
    }

    /// (train, test) halves of the series.
    pub fn load_split(&self) -> Result<(PriceSeries, PriceSeries), CliError> {
        let series = self.load_series()?;
        match self.data.split_timestamp {
            Some(ts) => series.split_at_timestamp(ts).map_err(|e| {
                CliError::input(format!("split at timestamp {ts} leaves an empty side: {e}"))
            }),
            None => Ok((series.clone(), series)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
ablation = "rdpg"
[data.synth]
kind = "sine"
length = 600
period = 120.0
"#;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = RunConfig::from_toml(MINIMAL)
            .unwrap()
            .finalize(None, None)
            .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.ablation, Ablation::Rdpg);
        assert_eq!(cfg.train.lambda2, 0.0);
        assert_eq!(cfg.sim, SimConfig::default());
        let s = cfg.data.synth.as_ref().unwrap();
        assert_eq!(s.params.period, 120.0);
        assert_eq!(cfg.load_series().unwrap().len(), 600);
    }

    #[test]
    fn flags_override_file() {
        let cfg = RunConfig::from_toml(MINIMAL)
            .unwrap()
            .finalize(Some(9), Some("elsewhere".into()))
            .unwrap();
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.out_dir(), PathBuf::from("elsewhere"));
    }

    #[test]
    fn misspelled_keys_are_rejected() {
        let text = format!("{MINIMAL}\n[sim]\nfee_rat = 0.1\n");
        assert_eq!(RunConfig::from_toml(&text).unwrap_err().code, 2);
        let text = format!("sed = 1\n{MINIMAL}");
        assert_eq!(RunConfig::from_toml(&text).unwrap_err().code, 2);
    }

    #[test]
    fn cloning_modes_need_positive_lambda2() {
        let text = MINIMAL.replace("\"rdpg\"", "\"rdpg-bc\"") + "\n[train]\nlambda2 = 0.0\n";
        let err = RunConfig::from_toml(&text)
            .unwrap()
            .finalize(None, None)
            .unwrap_err();
        assert_eq!(err.code, 2);
    }

    #[test]
    fn data_source_is_required() {
        let err = RunConfig::from_toml("seed = 1")
            .unwrap()
            .finalize(None, None)
            .unwrap_err();
        assert_eq!(err.code, 2);
        let text = format!("{MINIMAL}\n[data]\npath = \"/nonexistent/x.csv\"\n");
        assert!(
            RunConfig::from_toml(&text).is_err()
                || RunConfig::from_toml(&text)
                    .unwrap()
                    .finalize(None, None)
                    .is_err()
        );
    }
}
