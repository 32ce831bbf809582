//! Flat `key = value` run configuration with strict validation: every key is
//! checked before any work starts, and unknown keys are rejected by name.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use segdev::nlinv::{CgParams, RegSchedule, WeightParams};
use segdev::Topology;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub devices: usize,
    pub topology: Option<PathBuf>,
    /// Base grid size.
    pub n: usize,
    /// Receive channels `J`.
    pub channels: usize,
    /// Compression target `J'`; `None` keeps all channels.
    pub target_channels: Option<usize>,
    pub mask_density: f64,
    pub center_band: usize,
    pub noise_sigma: f64,
    pub weights: WeightParams,
    pub reg: RegSchedule,
    pub cg: CgParams,
    pub seed: u64,
    pub out: PathBuf,
    pub frames: usize,
    pub motion_dx: f64,
    pub motion_dy: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            devices: 2,
            topology: None,
            n: 64,
            channels: 8,
            target_channels: None,
            mask_density: 0.25,
            center_band: 8,
            noise_sigma: 0.0,
            weights: WeightParams::default(),
            reg: RegSchedule::default(),
            cg: CgParams::default(),
            seed: 42,
            out: PathBuf::from("out"),
            frames: 1,
            motion_dx: 0.0,
            motion_dy: 0.0,
        }
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub devices: Option<usize>,
    pub topology: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

fn parse_kv(text: &str) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("config line {}: expected `key = value`", lineno + 1))?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("config file {}", path.display()))?;
            config.apply_text(&text)?;
        }
        if let Some(devices) = overrides.devices {
            config.devices = devices;
        }
        if let Some(topology) = &overrides.topology {
            config.topology = Some(topology.clone());
        }
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        if let Some(out) = &overrides.out {
            config.out = out.clone();
        }
        config.validate()?;
        Ok(config)
    }

    fn apply_text(&mut self, text: &str) -> Result<()> {
        let map = parse_kv(text)?;
        for (key, value) in &map {
            self.apply(key, value)
                .with_context(|| format!("config key `{key}`"))?;
        }
        Ok(())
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(value: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            value.parse::<T>().map_err(|e| anyhow!("bad value {value:?}: {e}"))
        }
        match key {
            "devices" => self.devices = num(value)?,
            "topology" => self.topology = Some(PathBuf::from(value)),
            "n" => self.n = num(value)?,
            "channels" => self.channels = num(value)?,
            "target_channels" => self.target_channels = Some(num(value)?),
            "mask_density" => self.mask_density = num(value)?,
            "center_band" => self.center_band = num(value)?,
            "noise_sigma" => self.noise_sigma = num(value)?,
            "weight_a" => self.weights.a = num(value)?,
            "weight_b" => self.weights.b = num(value)?,
            "alpha0" => self.reg.alpha0 = num(value)?,
            "q" => self.reg.q = num(value)?,
            "newton_steps" => self.reg.newton_steps = num(value)?,
            "cg_iters" => self.cg.max_iters = num(value)?,
            "cg_tol" => self.cg.tolerance = num(value)?,
            "seed" => self.seed = num(value)?,
            "out" => self.out = PathBuf::from(value),
            "frames" => self.frames = num(value)?,
            "motion_dx" => self.motion_dx = num(value)?,
            "motion_dy" => self.motion_dy = num(value)?,
            other => bail!("unknown config key `{other}`"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.devices == 0 {
            bail!("config key `devices`: must be at least 1");
        }
        if !self.n.is_power_of_two() || self.n < 4 {
            bail!("config key `n`: {} is not a power of two of at least 4", self.n);
        }
        if self.channels == 0 {
            bail!("config key `channels`: must be at least 1");
        }
        if let Some(t) = self.target_channels {
            if t == 0 || t > self.channels {
                bail!("config key `target_channels`: {t} outside 1..={}", self.channels);
            }
        }
        if !(0.0..=1.0).contains(&self.mask_density) || self.mask_density == 0.0 {
            bail!("config key `mask_density`: {} outside (0, 1]", self.mask_density);
        }
        if self.noise_sigma < 0.0 {
            bail!("config key `noise_sigma`: must be nonnegative");
        }
        if self.reg.alpha0 <= 0.0 || self.reg.q <= 0.0 || self.reg.q >= 1.0 {
            bail!("config keys `alpha0`/`q`: need alpha0 > 0 and q in (0, 1)");
        }
        if self.reg.newton_steps == 0 {
            bail!("config key `newton_steps`: must be at least 1");
        }
        if self.cg.max_iters == 0 {
            bail!("config key `cg_iters`: must be at least 1");
        }
        if self.frames == 0 {
            bail!("config key `frames`: must be at least 1");
        }
        Ok(())
    }

    /// Build the simulated environment described by this configuration.
    pub fn environment(&self) -> Result<segdev::Environment> {
        let topology = match &self.topology {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("topology file {}", path.display()))?;
                Some(Topology::parse(&text)?)
            }
            None => None,
        };
        Ok(segdev::Environment::with_config(segdev::EnvConfig {
            devices: self.devices,
            group: None,
            topology,
            arena_capacity: None,
        })?)
    }
}
