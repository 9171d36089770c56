//! Model and training hyperparameters, plus the flat `key = value` config format.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub widths: [usize; 4],
    pub blocks: [usize; 4],
    pub strides: [usize; 4],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { widths: [64, 64, 128, 256], blocks: [1, 2, 4, 14], strides: [1, 2, 2, 2] }
    }
}

impl BackboneConfig {
    /// Widths multiplied by `factor` (at least one channel each), same depth.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut c = self.clone();
        for w in &mut c.widths {
            *w = ((*w as f64 * factor).round() as usize).max(1);
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.strides != [1, 2, 2, 2] {
            return Err(Error::Config(format!("stage strides must be [1, 2, 2, 2], got {:?}", self.strides)));
        }
        if self.blocks.iter().any(|&b| b == 0) || self.widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("every stage needs at least one block and one channel".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Interleaved self/cross rounds.
    pub n_layers: usize,
    pub n_heads: usize,
    /// Token aggregation range.
    pub agg: usize,
    pub d_fine: usize,
    /// Fine patch width in pixels.
    pub patch: usize,
    pub inv_temp: f32,
    pub tau: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            n_layers: 4,
            n_heads: 8,
            agg: 4,
            d_fine: 64,
            patch: 8,
            inv_temp: 10.0,
            tau: 0.2,
        }
    }
}

impl ModelConfig {
    /// Scaled-down model that trains on a laptop CPU in minutes.
    pub fn toy() -> Self {
        ModelConfig {
            backbone: BackboneConfig { widths: [8, 8, 16, 32], blocks: [1, 2, 2, 2], strides: [1, 2, 2, 2] },
            n_layers: 2,
            n_heads: 4,
            agg: 4,
            d_fine: 16,
            patch: 8,
            inv_temp: 10.0,
            tau: 0.2,
        }
    }

    pub fn d_model(&self) -> usize {
        self.backbone.widths[3]
    }

    /// Images are padded to a multiple of this so the coarse grid divides by `agg`.
    pub fn pad_multiple(&self) -> usize {
        8 * self.agg
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let d = self.d_model();
        if d % 4 != 0 {
            return Err(Error::Config(format!("d_model {d} must be divisible by 4 for rotary encoding")));
        }
        if self.n_heads == 0 || d % self.n_heads != 0 {
            return Err(Error::Config(format!("d_model {d} not divisible by {} heads", self.n_heads)));
        }
        if self.agg == 0 || self.d_fine == 0 {
            return Err(Error::Config("agg and d_fine must be positive".into()));
        }
        if self.patch < 2 || self.patch % 2 != 0 {
            return Err(Error::Config(format!("patch width {} must be even and >= 2", self.patch)));
        }
        if !(self.inv_temp.is_finite() && self.inv_temp > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config("inv_temp must be positive and tau finite".into()));
        }
        Ok(())
    }

    /// Flat key/value form, used for container metadata.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let list = |v: &[usize; 4]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("widths".into(), list(&self.backbone.widths)),
            ("blocks".into(), list(&self.backbone.blocks)),
            ("n_layers".into(), self.n_layers.to_string()),
            ("n_heads".into(), self.n_heads.to_string()),
            ("agg".into(), self.agg.to_string()),
            ("d_fine".into(), self.d_fine.to_string()),
            ("patch".into(), self.patch.to_string()),
            ("inv_temp".into(), self.inv_temp.to_string()),
            ("tau".into(), self.tau.to_string()),
        ]
    }

    /// Applies every model key present in `kv`; unknown keys are left for the caller.
    pub fn apply(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        if let Some(p) = kv.get("preset") {
            *self = match p.as_str() {
                "toy" => ModelConfig::toy(),
                "default" => ModelConfig::default(),
                other => return Err(Error::Config(format!("unknown preset `{other}`"))),
            };
        }
        for (k, v) in kv {
            match k.as_str() {
                "widths" => self.backbone.widths = parse_list(k, v)?,
                "blocks" => self.backbone.blocks = parse_list(k, v)?,
                "n_layers" => self.n_layers = parse(k, v)?,
                "n_heads" => self.n_heads = parse(k, v)?,
                "agg" => self.agg = parse(k, v)?,
                "d_fine" => self.d_fine = parse(k, v)?,
                "patch" => self.patch = parse(k, v)?,
                "inv_temp" => self.inv_temp = parse(k, v)?,
                "tau" => self.tau = parse(k, v)?,
                _ => {}
            }
        }
        self.validate()
    }

    pub fn from_pairs(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = ModelConfig::default();
        c.apply(kv)?;
        Ok(c)
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

fn parse_list(key: &str, v: &str) -> Result<[usize; 4]> {
    let items: Vec<usize> = v.split(',').map(|x| parse(key, x)).collect::<Result<_>>()?;
    items.try_into().map_err(|_| Error::Config(format!("`{key}` needs exactly four entries")))
}

pub(crate) fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    parse(key, v)
}

/// Parses `key = value` lines. `#` starts a comment; blank lines are ignored.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected `key = value`", n + 1)));
        };
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn read_kv(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv(&text).map_err(|e| Error::format(path, e.to_string()))
}
