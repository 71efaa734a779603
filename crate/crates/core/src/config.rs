//! Run settings from defaults, a TOML file and command-line overrides.
//!
//! Keys: `K`, `L`, `re_config`, `mc_samples`, `gibbs_sweeps`, `iterations`,
//! `burn_in`, `n_starts`, `init`, `seed`, `knots`, `degree`, `threads`,
//! `nlme_tol`, `nlme_max_iter`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::msem::MsemConfig;
use crate::nlme_fit::NlmeOptions;
use crate::sim_model::RandomEffectConfig;

/// Partially specified settings; `None` falls through to the next source.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    #[serde(rename = "K")]
    pub k: Option<usize>,
    #[serde(rename = "L")]
    pub l: Option<usize>,
    pub re_config: Option<String>,
    pub mc_samples: Option<usize>,
    pub gibbs_sweeps: Option<usize>,
    pub iterations: Option<usize>,
    pub burn_in: Option<usize>,
    pub n_starts: Option<usize>,
    pub init: Option<String>,
    pub seed: Option<u64>,
    pub knots: Option<usize>,
    pub degree: Option<usize>,
    pub threads: Option<usize>,
    pub nlme_tol: Option<f64>,
    pub nlme_max_iter: Option<usize>,
}

impl Settings {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {}", e.message())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.as_ref().display())))?;
        Self::from_toml(&text)
    }

    /// Values from `over` take precedence.
    pub fn overlay(&self, over: &Settings) -> Settings {
        macro_rules! pick {
            ($($f:ident),*) => { Settings { $($f: over.$f.clone().or_else(|| self.$f.clone())),* } };
        }
        pick!(
            k,
            l,
            re_config,
            mc_samples,
            gibbs_sweeps,
            iterations,
            burn_in,
            n_starts,
            init,
            seed,
            knots,
            degree,
            threads,
            nlme_tol,
            nlme_max_iter
        )
    }

    /// Full configuration; `K` and `L` must be set.
    pub fn resolve(&self) -> Result<MsemConfig> {
        let k = self.k.ok_or_else(|| Error::Config("K is required".into()))?;
        let l = self.l.ok_or_else(|| Error::Config("L is required".into()))?;
        self.resolve_with(k, l)
    }

    /// Full configuration with the given cluster counts.
    pub fn resolve_with(&self, k: usize, l: usize) -> Result<MsemConfig> {
        let re_config: RandomEffectConfig = match &self.re_config {
            Some(s) => s.parse()?,
            None => RandomEffectConfig::new(true, false, true),
        };
        let mut cfg = MsemConfig::new(k, l, re_config);
        let d = MsemConfig::new(k, l, re_config);
        cfg.mc_samples = self.mc_samples.unwrap_or(d.mc_samples);
        cfg.gibbs_sweeps = self.gibbs_sweeps.unwrap_or(d.gibbs_sweeps);
        cfg.iterations = self.iterations.unwrap_or(d.iterations);
        cfg.burn_in = match (self.burn_in, self.iterations) {
            (Some(b), _) => b,
            (None, Some(it)) => it / 2,
            (None, None) => d.burn_in,
        };
        cfg.n_starts = self.n_starts.unwrap_or(d.n_starts);
        cfg.init = match &self.init {
            Some(s) => s.parse()?,
            None => d.init,
        };
        cfg.seed = self.seed.unwrap_or(d.seed);
        cfg.knots = self.knots.unwrap_or(d.knots);
        cfg.degree = self.degree.unwrap_or(d.degree);
        cfg.threads = self.threads.unwrap_or(d.threads);
        cfg.nlme = NlmeOptions {
            tol: self.nlme_tol.unwrap_or(d.nlme.tol),
            max_iter: self.nlme_max_iter.unwrap_or(d.nlme.max_iter),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The resolved settings as echoed in reports. Thread count is left out:
/// it never changes results, and leaving it out keeps reports identical
/// across machines.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedSettings {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub re_config: String,
    pub mc_samples: usize,
    pub gibbs_sweeps: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub n_starts: usize,
    pub init: String,
    pub seed: u64,
    pub knots: usize,
    pub degree: usize,
    pub nlme_tol: f64,
    pub nlme_max_iter: usize,
}

impl From<&MsemConfig> for ResolvedSettings {
    fn from(c: &MsemConfig) -> Self {
        ResolvedSettings {
            k: c.k,
            l: c.l,
            re_config: c.re_config.to_string(),
            mc_samples: c.mc_samples,
            gibbs_sweeps: c.gibbs_sweeps,
            iterations: c.iterations,
            burn_in: c.burn_in,
            n_starts: c.n_starts,
            init: c.init.to_string(),
            seed: c.seed,
            knots: c.knots,
            degree: c.degree,
            nlme_tol: c.nlme.tol,
            nlme_max_iter: c.nlme.max_iter,
        }
    }
}
