//! Flat `key = value` settings with layered overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rimesa::data::{DirectKind, Mobility};
use rimesa::harness::{parse_network, DatasetSource, MethodSpec, RunConfig, SweepAxis, SweepConfig};
use rimesa::{NetworkConfig, ScenarioConfig};

/// Every key the CLI understands, with its default and meaning.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("scenario", "cpgo-planar", "scenario preset"),
    ("robots", "3", "number of robots"),
    ("length", "100", "poses per robot"),
    ("seed", "0", "dataset and network seed"),
    ("mobility", "preset", "planar | planar3d | free3d"),
    ("direct", "preset", "none | pose | range | bearing-range"),
    ("intra_loops", "preset", "intra-robot loop closures"),
    ("indirect", "preset", "indirect inter-robot loop closures"),
    ("landmarks", "preset", "number of landmarks (0 disables observations)"),
    ("sigma_r", "0.25", "roll/pitch noise, degrees"),
    ("sigma_rz", "0.25", "yaw noise, degrees"),
    ("sigma_t", "0.05", "translation noise, meters"),
    ("outliers", "0.15", "outlier fraction over loop closures"),
    ("loop_probability", "0.2", "loop closure probability per candidate step"),
    ("observation_range", "30", "sensor range, meters"),
    ("bounds", "20", "half-width of the roaming square, meters"),
    ("dataset", "", "dataset file (overrides the scenario keys)"),
    ("methods", "rimesa", "comma separated methods"),
    ("net", "rc=1,dc=30,pc=0.9,bc=0,tg=0.05", "network: rc dc pc bc tg parallel"),
    ("out_dir", "", "output directory (RIMESA_OUT_DIR takes precedence)"),
    ("history", "false", "write per-method solution histories"),
    ("history_every", "1", "metric sampling interval in steps"),
    ("threaded", "false", "one thread per robot"),
    ("axis", "sigma_rz=0.5,1,2,4", "sweep axis: sigma_rz= | outliers= | comm=delay:rate:range,..."),
    ("trials", "5", "sweep trials per cell"),
];

#[derive(Debug, Clone, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Settings::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("config line {}: expected key = value", n + 1))?;
            s.set(k.trim(), v.trim()).with_context(|| format!("config line {}", n + 1))?;
        }
        Ok(s)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KEYS.iter().any(|(k, ..)| *k == key) {
            bail!("unknown setting `{key}`");
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair.split_once('=').ok_or_else(|| anyhow!("`{pair}` is not key=value"))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set_opt<T: ToString>(&mut self, key: &str, value: Option<T>) -> Result<()> {
        match value {
            Some(v) => self.set(key, &v.to_string()),
            None => Ok(()),
        }
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|_| anyhow!("invalid value `{v}` for `{key}`")))
            .transpose()
    }

    fn flag(&self, key: &str) -> Result<bool> {
        Ok(self.num::<bool>(key)?.unwrap_or(false))
    }

    pub fn scenario(&self) -> Result<ScenarioConfig> {
        let name = self.get("scenario").unwrap_or("cpgo-planar");
        let mut sc = ScenarioConfig::preset(name)
            .ok_or_else(|| anyhow!("unknown scenario `{name}` (known: {})", ScenarioConfig::preset_names().join(", ")))?
            .desk();
        if let Some(v) = self.num("robots")? {
            sc.robots = v;
        }
        if let Some(v) = self.num("length")? {
            sc.length = v;
        }
        if let Some(v) = self.num("seed")? {
            sc.seed = v;
        }
        if let Some(v) = self.get("mobility") {
            sc.mobility = match v {
                "planar" => Mobility::Planar,
                "planar3d" => Mobility::Planar3d,
                "free3d" => Mobility::Free3d,
                other => bail!("unknown mobility `{other}`"),
            };
        }
        if let Some(v) = self.get("direct") {
            sc.direct_inter = match v {
                "none" => None,
                "pose" => Some(DirectKind::RelativePose),
                "range" => Some(DirectKind::Range),
                "bearing-range" => Some(DirectKind::BearingRange),
                other => bail!("unknown direct measurement kind `{other}`"),
            };
        }
        if let Some(v) = self.num("intra_loops")? {
            sc.intra_loops = v;
        }
        if let Some(v) = self.num("indirect")? {
            sc.indirect_inter = v;
        }
        if let Some(v) = self.num::<usize>("landmarks")? {
            sc.num_landmarks = v;
            sc.landmark_obs = v > 0;
        }
        if let Some(v) = self.num::<f64>("sigma_r")? {
            sc.sigma_r = v.to_radians();
        }
        if let Some(v) = self.num::<f64>("sigma_rz")? {
            sc.sigma_rz = v.to_radians();
        }
        if let Some(v) = self.num("sigma_t")? {
            sc.sigma_t = v;
        }
        if let Some(v) = self.num("outliers")? {
            sc.outlier_fraction = v;
        }
        if let Some(v) = self.num("loop_probability")? {
            sc.loop_probability = v;
        }
        if let Some(v) = self.num("observation_range")? {
            sc.observation_range = v;
        }
        if let Some(v) = self.num("bounds")? {
            sc.bounds = v;
        }
        sc.validate()?;
        Ok(sc)
    }

    pub fn network(&self) -> Result<NetworkConfig> {
        Ok(parse_network(self.get("net").unwrap_or(""), &NetworkConfig::default())?)
    }

    pub fn methods(&self) -> Result<Vec<MethodSpec>> {
        Ok(MethodSpec::parse_list(self.get("methods").unwrap_or("rimesa"))?)
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        let dataset = match self.get("dataset") {
            Some(p) => DatasetSource::File(PathBuf::from(p)),
            None => DatasetSource::Scenario(self.scenario()?),
        };
        let cfg = RunConfig {
            dataset,
            network: self.network()?,
            methods: self.methods()?,
            output_dir: self.get("out_dir").map(PathBuf::from),
            record_history: self.flag("history")?,
            history_every: self.num("history_every")?.unwrap_or(1),
            seed: self.num("seed")?.unwrap_or(0),
            threaded: self.flag("threaded")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sweep_config(&self) -> Result<SweepConfig> {
        Ok(SweepConfig {
            scenario: self.scenario()?,
            network: self.network()?,
            methods: self.methods()?,
            axis: SweepAxis::parse(self.get("axis").unwrap_or("sigma_rz=0.5,1,2,4"))?,
            trials: self.num("trials")?.unwrap_or(5),
            seed: self.num("seed")?.unwrap_or(0),
            threaded: self.flag("threaded")?,
        })
    }
}

/// Table of keys and defaults for `--help`.
pub fn defaults_help() -> String {
    let mut s = String::from("Settings (config file `key = value`, or --set key=value):\n");
    for (k, d, what) in KEYS {
        let d = if d.is_empty() { "-" } else { d };
        s.push_str(&format!("  {k:<18} {d:<32} {what}\n"));
    }
    s.push_str("\nExit codes: 0 success, 1 usage or input error, 2 some trials failed.\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_file_with_comments() {
        let s = Settings::parse("# desk run\nrobots = 4\nsigma_rz=1.0  # degrees\n\nmethods = rimesa,kimesa\n").unwrap();
        let sc = s.scenario().unwrap();
        assert_eq!(sc.robots, 4);
        assert!((sc.sigma_rz - 1f64.to_radians()).abs() < 1e-15);
        assert_eq!(s.methods().unwrap().len(), 2);
    }

    #[test]
    fn rejects_unknown_keys_and_values() {
        assert!(Settings::parse("robotz = 3").is_err());
        assert!(Settings::parse("robots 3").is_err());
        let s = Settings::parse("robots = many").unwrap();
        assert!(s.scenario().is_err());
        let s = Settings::parse("scenario = nowhere").unwrap();
        assert!(s.scenario().is_err());
    }

    #[test]
    fn later_layers_override() {
        let mut s = Settings::parse("robots = 4\nnet = rc=1,dc=30").unwrap();
        s.set_pair("robots=5").unwrap();
        s.set_opt("length", Some(40)).unwrap();
        s.set_opt::<u64>("seed", None).unwrap();
        let sc = s.scenario().unwrap();
        assert_eq!((sc.robots, sc.length, sc.seed), (5, 40, 0));
        assert_eq!(s.network().unwrap().max_range, 30.0);
    }

    #[test]
    fn every_key_has_help() {
        let help = defaults_help();
        for (k, ..) in KEYS {
            assert!(help.contains(k));
        }
    }
}
