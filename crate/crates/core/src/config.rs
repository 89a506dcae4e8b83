//! Run configuration, read from TOML with unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Generator;
use crate::error::{Error, Result};
use crate::hybridnet::{HybridSetup, LayerSpec, NetworkSpec, SurrogateInit};
use crate::photonics::{KindName, LayerKind, MRR_A, MRR_R};
use crate::zograd::ZoConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    /// Run directory; the command line may override it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub data: DataConfig,
    pub network: NetworkSpec,
    /// Physical model of every black-box layer; required when the network has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<LayerConfig>,
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<Generator>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Dataset seed, independent of the training seed so that seeds of a
    /// sweep share one dataset.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_n() -> usize {
    2000
}

fn default_noise() -> f64 {
    0.1
}

fn default_test_fraction() -> f64 {
    0.25
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub kind: KindName,
    /// Microring round-trip transmission.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    /// Microring self-coupling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_c: Option<f64>,
}

impl LayerConfig {
    pub fn kind(&self) -> Result<LayerKind> {
        match self.kind {
            KindName::Mrr => Ok(LayerKind::Mrr {
                a: self.a.unwrap_or(MRR_A),
                r_c: self.r_c.unwrap_or(MRR_R),
            }),
            other if self.a.is_some() || self.r_c.is_some() => Err(Error::Config(format!(
                "layer.a and layer.r_c only apply to kind \"mrr\", not {other:?}"
            ))),
            other => Ok(LayerKind::from_name(other)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub eta: f64,
    pub eta_bb: f64,
    pub mu: f64,
    pub m_bb: usize,
    pub m_sm: usize,
    pub rank: usize,
    pub batch: usize,
    pub steps: u64,
    pub seed: u64,
    #[serde(default = "default_init")]
    pub init: SurrogateInit,
    #[serde(default = "default_oversample")]
    pub oversample: usize,
    /// Transpose probes for sketch initialization; defaults to `m_sm`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sketch_probes: Option<usize>,
    /// Held-out evaluation cadence in steps; 0 evaluates only at the end.
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default = "default_true")]
    pub share_directions: bool,
    /// Surrogate error measurement cadence; 0 disables it.
    #[serde(default)]
    pub sm_error_every: u64,
    /// Write measured step times instead of zeros to `wall_ms`.
    #[serde(default)]
    pub record_wall_time: bool,
    /// Initial output scale of hybrid nodes; absent means the per-kind default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_init: Option<f64>,
}

fn default_init() -> SurrogateInit {
    SurrogateInit::Oracle
}

fn default_oversample() -> usize {
    5
}

fn default_eval_every() -> u64 {
    100
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("train.{name} must be a non-negative number, got {v}")))
            }
        };
        nonneg("eta", self.eta)?;
        nonneg("eta_bb", self.eta_bb)?;
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::Config(format!("train.mu must be positive, got {}", self.mu)));
        }
        for (name, v) in [
            ("m_bb", self.m_bb),
            ("m_sm", self.m_sm),
            ("rank", self.rank),
            ("batch", self.batch),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("train.{name} must be at least 1")));
            }
        }
        if self.steps == 0 {
            return Err(Error::Config("train.steps must be at least 1".into()));
        }
        if self.sketch_probes == Some(0) {
            return Err(Error::Config("train.sketch_probes must be at least 1".into()));
        }
        if let Some(s) = self.scale_init {
            if !s.is_finite() {
                return Err(Error::Config("train.scale_init must be finite".into()));
            }
        }
        Ok(())
    }

    pub fn zo(&self) -> ZoConfig {
        ZoConfig {
            mu: self.mu,
            m_bb: self.m_bb,
            share_directions: self.share_directions,
        }
    }
}

/// Estimator-quality study settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "default_probe_dim")]
    pub d_inp: usize,
    #[serde(default = "default_probe_dim")]
    pub d_out: usize,
    #[serde(default = "default_probe_rank")]
    pub rank: usize,
    #[serde(default = "default_grid")]
    pub m_bb_grid: Vec<usize>,
    #[serde(default = "default_grid")]
    pub m_sm_grid: Vec<usize>,
    /// Independent estimates per grid point.
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_probe_dim() -> usize {
    8
}

fn default_probe_rank() -> usize {
    4
}

fn default_grid() -> Vec<usize> {
    vec![100, 1000, 10_000]
}

fn default_trials() -> usize {
    10
}

fn default_mu() -> f64 {
    1e-2
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            d_inp: default_probe_dim(),
            d_out: default_probe_dim(),
            rank: default_probe_rank(),
            m_bb_grid: default_grid(),
            m_sm_grid: default_grid(),
            trials: default_trials(),
            mu: default_mu(),
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_inp == 0 || self.d_out == 0 {
            return Err(Error::Config("probe dims must be positive".into()));
        }
        if self.rank == 0 || self.rank > self.d_inp.min(self.d_out) {
            return Err(Error::Config(format!(
                "probe.rank must lie in 1..={}",
                self.d_inp.min(self.d_out)
            )));
        }
        for (name, grid) in [("m_bb_grid", &self.m_bb_grid), ("m_sm_grid", &self.m_sm_grid)] {
            if grid.len() < 2 || grid.contains(&0) {
                return Err(Error::Config(format!(
                    "probe.{name} needs at least two positive entries"
                )));
            }
        }
        if self.trials == 0 {
            return Err(Error::Config("probe.trials must be at least 1".into()));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::Config("probe.mu must be positive".into()));
        }
        Ok(())
    }
}

impl RunConfig {
    /// Parses and validates. Parse errors carry the line and field.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::Config("name must not be empty".into()));
        }
        match (&self.data.generator, &self.data.path) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("data: give either generator or path, not both".into()))
            }
            (None, None) => return Err(Error::Config("data: one of generator or path is required".into())),
            _ => {}
        }
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            return Err(Error::Config("data.test_fraction must lie in [0, 1)".into()));
        }
        if !(self.data.noise >= 0.0 && self.data.noise.is_finite()) {
            return Err(Error::Config("data.noise must be non-negative".into()));
        }
        self.network.validate()?;
        self.train.validate()?;
        if self.network.blackbox_count() > 0 {
            let layer = self
                .layer
                .as_ref()
                .ok_or_else(|| Error::Config("network has a blackbox layer but no [layer] block".into()))?;
            let kind = layer.kind()?;
            for l in &self.network.layers {
                if let LayerSpec::Blackbox { inp, out } = *l {
                    crate::photonics::BlackBoxLayer::param_count_for(kind, inp, out)?;
                    let max_rank = inp.min(out);
                    if self.train.rank > max_rank {
                        return Err(Error::Config(format!(
                            "train.rank = {} exceeds min(inp, out) = {max_rank} of a blackbox layer",
                            self.train.rank
                        )));
                    }
                    if self.train.init == SurrogateInit::Sketch && self.train.rank + self.train.oversample > max_rank {
                        return Err(Error::Config(format!(
                            "train.rank + train.oversample exceeds {max_rank}"
                        )));
                    }
                }
            }
        } else if let Some(layer) = &self.layer {
            layer.kind()?;
        }
        if let Some(p) = &self.probe {
            p.validate()?;
        }
        Ok(())
    }

    pub fn hybrid_setup(&self) -> Result<Option<HybridSetup>> {
        let Some(layer) = &self.layer else {
            return Ok(None);
        };
        Ok(Some(HybridSetup {
            kind: layer.kind()?,
            rank: self.train.rank,
            init: self.train.init,
            oversample: self.train.oversample,
            sketch_probes: self.train.sketch_probes.unwrap_or(self.train.m_sm),
            scale_init: self.train.scale_init,
        }))
    }

    /// Copy with every defaulted field spelled out.
    pub fn resolved(&self) -> RunConfig {
        let mut r = self.clone();
        if r.train.sketch_probes.is_none() {
            r.train.sketch_probes = Some(r.train.m_sm);
        }
        if let Some(l) = &mut r.layer {
            if l.kind == KindName::Mrr {
                l.a.get_or_insert(MRR_A);
                l.r_c.get_or_insert(MRR_R);
            }
        }
        r
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }
}
