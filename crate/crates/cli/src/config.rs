//! Defaults file: per-profile windows and direction overrides.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use detprune::ranking::Direction;
use detprune::scoring::Method;

/// Environment variable naming the defaults file.
pub const CONFIG_ENV: &str = "DETPRUNE_CONFIG";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    pub window: u32,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default = "default_profiles")]
    pub profiles: BTreeMap<String, ProfileConfig>,
    /// Method name to "high" or "low".
    #[serde(default)]
    pub directions: BTreeMap<String, String>,
}

fn default_profiles() -> BTreeMap<String, ProfileConfig> {
    [("voc", 17), ("coco", 12)]
        .into_iter()
        .map(|(name, window)| (name.to_string(), ProfileConfig { window }))
        .collect()
}

impl Default for Config {
    fn default() -> Self {
        Self {
            profiles: default_profiles(),
            directions: BTreeMap::new(),
        }
    }
}

impl Config {
    /// Reads `path`, or the file named by [`CONFIG_ENV`], or falls back to
    /// the built-in defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        let from_env = std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty());
        let path = match (path, from_env.as_deref()) {
            (Some(p), _) => p.to_path_buf(),
            (None, Some(p)) => p.into(),
            (None, None) => return Ok(Self::default()),
        };
        let text = std::fs::read_to_string(&path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let config: Config =
            toml::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))?;
        for (method, dir) in &config.directions {
            method
                .parse::<Method>()
                .map_err(|e| format!("config {}: {e}", path.display()))?;
            dir.parse::<Direction>()
                .map_err(|e| format!("config {}: {e}", path.display()))?;
        }
        Ok(config)
    }

    pub fn profile_window(&self, profile: &str) -> Result<u32, String> {
        self.profiles
            .get(profile)
            .map(|p| p.window)
            .ok_or_else(|| format!("unknown profile {profile:?}"))
    }

    pub fn direction(&self, method: Method) -> Direction {
        self.directions
            .get(method.name())
            .and_then(|d| d.parse().ok())
            .unwrap_or_else(|| method.default_direction())
    }
}
