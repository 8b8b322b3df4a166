//! Settings resolution: flags, then the TOML config file, then defaults.

use std::path::Path;

use anyhow::{bail, Context, Result};
use gridshare::markov::SimulationConfig;
use gridshare::{NetworkConfig, PowerFlowModel};
use serde::Deserialize;

use crate::output::Manifest;

pub const SEED_ENV: &str = "GRIDSHARE_SEED";

/// Keys accepted in a `--config` file. Names follow the long flags with `_` for `-`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<String>,
    pub stations: Option<usize>,
    pub resistance: Option<f64>,
    pub delta: Option<f64>,
    pub capacity: Option<u32>,
    pub seed: Option<u64>,
    pub horizon: Option<f64>,
    pub burn_in: Option<f64>,
    pub replications: Option<usize>,
    pub batches: Option<usize>,
    pub method: Option<String>,
    pub axis: Option<String>,
    pub grid: Option<String>,
    pub fraction_1: Option<Vec<f64>>,
    pub total_grid: Option<String>,
    pub fraction_grid: Option<String>,
    pub lambda: Option<Vec<f64>>,
    pub total_rate: Option<f64>,
    pub fractions: Option<Vec<f64>>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Power-flow model(s) to evaluate.
pub fn parse_models(s: &str) -> Result<Vec<PowerFlowModel>> {
    if s.eq_ignore_ascii_case("both") {
        return Ok(PowerFlowModel::ALL.to_vec());
    }
    Ok(vec![s.parse::<PowerFlowModel>()?])
}

pub struct NetworkFlags<'a> {
    pub model: Option<&'a str>,
    pub stations: Option<usize>,
    pub resistance: Option<f64>,
    pub delta: Option<f64>,
    pub capacity: Option<u32>,
}

/// Resolved network settings, one config per model.
pub fn networks(flags: &NetworkFlags<'_>, file: &FileConfig, default_model: &str) -> Result<Vec<NetworkConfig>> {
    let model = flags.model.or(file.model.as_deref()).unwrap_or(default_model);
    let base = NetworkConfig::reference(PowerFlowModel::Distflow);
    let n = flags.stations.or(file.stations).unwrap_or(base.n_stations());
    let r = flags.resistance.or(file.resistance).unwrap_or(base.resistance());
    let delta = flags.delta.or(file.delta).unwrap_or(base.delta());
    let k = flags.capacity.or(file.capacity).unwrap_or(base.capacity());
    parse_models(model)?
        .into_iter()
        .map(|m| NetworkConfig::new(n, r, delta, k, m).map_err(Into::into))
        .collect()
}

pub fn record_network(manifest: &mut Manifest, cfgs: &[NetworkConfig]) {
    let cfg = &cfgs[0];
    manifest.set("model", cfgs.iter().map(|c| c.model().as_str()).collect::<Vec<_>>().join(","));
    manifest.set("stations", cfg.n_stations());
    manifest.set("resistance", cfg.resistance());
    manifest.set("delta", cfg.delta());
    manifest.set("capacity", cfg.capacity());
}

pub struct SimFlags {
    pub seed: Option<u64>,
    pub horizon: Option<f64>,
    pub burn_in: Option<f64>,
    pub replications: Option<usize>,
    pub batches: Option<usize>,
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).with_context(|| format!("{SEED_ENV}={v} is not a seed")),
        Err(_) => Ok(None),
    }
}

pub fn simulation(flags: &SimFlags, file: &FileConfig) -> Result<SimulationConfig> {
    let d = SimulationConfig::default();
    let seed = match flags.seed.or(file.seed) {
        Some(s) => s,
        None => env_seed()?.unwrap_or(d.seed),
    };
    let sim = SimulationConfig {
        horizon: flags.horizon.or(file.horizon).unwrap_or(d.horizon),
        burn_in: flags.burn_in.or(file.burn_in).unwrap_or(d.burn_in),
        seed,
        replications: flags.replications.or(file.replications).unwrap_or(d.replications),
        batches: flags.batches.or(file.batches).unwrap_or(d.batches),
    };
    sim.validate()?;
    Ok(sim)
}

pub fn record_simulation(manifest: &mut Manifest, sim: &SimulationConfig) {
    manifest.set("seed", sim.seed);
    manifest.set("horizon", sim.horizon);
    manifest.set("burn_in", sim.burn_in);
    manifest.set("replications", sim.replications);
    manifest.set("batches", sim.batches);
}

/// `start:stop:step` as an inclusive arithmetic grid, or a comma-separated list.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    let num = |p: &str| p.trim().parse::<f64>().with_context(|| format!("`{p}` in grid `{s}` is not a number"));
    match parts.as_slice() {
        [start, stop, step] => Ok(gridshare::experiments::arithmetic_grid(num(start)?, num(stop)?, num(step)?)?),
        [list] => list.split(',').map(num).collect(),
        _ => bail!("grid `{s}` must be start:stop:step or a comma-separated list"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_forms() {
        assert_eq!(parse_grid("0.1:0.3:0.1").unwrap(), vec![0.1, 0.2, 0.3]);
        assert_eq!(parse_grid("0.5,0.7").unwrap(), vec![0.5, 0.7]);
        assert!(parse_grid("0.1:0.2").is_err());
        assert!(parse_grid("a:b:c").is_err());
    }

    #[test]
    fn flags_override_file() {
        let file: FileConfig = toml::from_str("stations = 3\ndelta = 0.1\nmodel = \"linearized\"").unwrap();
        let flags = NetworkFlags { model: None, stations: Some(1), resistance: None, delta: None, capacity: None };
        let cfgs = networks(&flags, &file, "distflow").unwrap();
        assert_eq!(cfgs.len(), 1);
        assert_eq!(cfgs[0].n_stations(), 1);
        assert_eq!(cfgs[0].delta(), 0.1);
        assert_eq!(cfgs[0].model(), PowerFlowModel::LinearizedDistflow);
        assert_eq!(cfgs[0].capacity(), 100);
    }

    #[test]
    fn unknown_config_key_is_rejected() {
        assert!(toml::from_str::<FileConfig>("stationz = 3").is_err());
    }

    #[test]
    fn both_models() {
        assert_eq!(parse_models("both").unwrap(), PowerFlowModel::ALL.to_vec());
        assert!(parse_models("ac").is_err());
    }
}
