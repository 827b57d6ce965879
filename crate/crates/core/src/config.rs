//! Engine configuration, read from TOML.
//!
//! ```toml
//! max_steps = 8
//!
//! [vrag]
//! enabled = true
//! k = 3
//! index = "memory.ragx"
//!
//! [hnsw]
//! m = 16
//! ef_construction = 200
//! ef_search = 64
//!
//! [judge]
//! kind = "remote"
//! url = "http://127.0.0.1:8000"
//!
//! [[endpoints]]
//! tool_id = "remote_segmenter"
//! capability = "segment"
//! url = "http://127.0.0.1:8000"
//! timeout_ms = 30000
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{TemplateSet, DEFAULT_MAX_STEPS};
use crate::controller::AgentRuntime;
use crate::geometry::GeometryThresholds;
use crate::toolkit::{
    register_geometry_tools, Capability, CorruptionPolicy, MockKind, MockTool, RemoteTool, ToolRegistry,
};
use crate::verify::{Judge, PhantomJudge, RemoteJudge, Verifier, VerifierConfig};
use crate::vrag::embed::{Embedder, PhantomEmbedder, RemoteEmbedder};
use crate::vrag::hnsw::HnswParams;

pub const CONFIG_ENV: &str = "RADAGENTS_CONFIG";
pub const DEFAULT_K: usize = 3;
pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VragConfig {
    pub enabled: bool,
    pub k: usize,
    pub index: Option<PathBuf>,
}

impl Default for VragConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            k: DEFAULT_K,
            index: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Endpoint {
    pub tool_id: String,
    pub capability: Capability,
    pub url: String,
    #[serde(default)]
    pub cost_hint: u32,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_timeout_ms() -> u64 {
    DEFAULT_TIMEOUT_MS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    #[default]
    None,
    Phantom,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct JudgeConfig {
    pub kind: JudgeKind,
    pub url: Option<String>,
    pub timeout_ms: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    #[default]
    Phantom,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub url: Option<String>,
    pub timeout_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub max_steps: usize,
    pub templates_dir: Option<PathBuf>,
    pub vrag: VragConfig,
    pub hnsw: HnswParams,
    pub verifier: VerifierConfig,
    pub thresholds: GeometryThresholds,
    pub corruption: CorruptionPolicy,
    pub judge: JudgeConfig,
    pub embedder: EmbedderConfig,
    pub endpoints: Vec<Endpoint>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            max_steps: DEFAULT_MAX_STEPS,
            templates_dir: None,
            vrag: VragConfig::default(),
            hnsw: HnswParams::default(),
            verifier: VerifierConfig::default(),
            thresholds: GeometryThresholds::default(),
            corruption: CorruptionPolicy::none(),
            judge: JudgeConfig::default(),
            embedder: EmbedderConfig::default(),
            endpoints: Vec::new(),
        }
    }
}

fn timeout(ms: Option<u64>) -> Duration {
    Duration::from_millis(ms.unwrap_or(DEFAULT_TIMEOUT_MS))
}

fn required_url<'a>(url: &'a Option<String>, what: &str) -> Result<&'a str, ConfigError> {
    url.as_deref()
        .ok_or_else(|| ConfigError::Invalid(format!("{what} needs a url")))
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let config: Config = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut config.vrag.index, &mut config.templates_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    /// The explicit path if given, else the path in the environment
    /// variable, else defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self, ConfigError> {
        match explicit {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Self::load(PathBuf::from(p)),
                _ => Ok(Self::default()),
            },
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1".into());
        }
        if self.vrag.k == 0 {
            return bad("vrag.k must be at least 1".into());
        }
        if self.hnsw.m < 2 {
            return bad("hnsw.m must be at least 2".into());
        }
        if self.hnsw.ef_construction == 0 || self.hnsw.ef_search == 0 {
            return bad("hnsw ef values must be positive".into());
        }
        let (lo, hi) = self.verifier.mask_area_band;
        if !(0.0..=1.0).contains(&self.verifier.uncertainty_gate) || !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return bad("verifier gate or mask band out of range".into());
        }
        self.corruption.validate().map_err(ConfigError::Invalid)?;
        for (i, e) in self.endpoints.iter().enumerate() {
            if self.endpoints[..i].iter().any(|o| o.tool_id == e.tool_id) {
                return bad(format!("duplicate endpoint tool id {}", e.tool_id));
            }
        }
        if self.judge.kind == JudgeKind::Remote {
            required_url(&self.judge.url, "remote judge")?;
        }
        if self.embedder.kind == EmbedderKind::Remote {
            required_url(&self.embedder.url, "remote embedder")?;
        }
        Ok(())
    }

    /// Remote endpoints first; mocks fill every model capability no
    /// endpoint serves; geometry tools are always local.
    pub fn registry(&self) -> Result<ToolRegistry, ConfigError> {
        let mut reg = ToolRegistry::new();
        let invalid = |e: crate::toolkit::ToolError| ConfigError::Invalid(e.to_string());
        for e in &self.endpoints {
            let tool = RemoteTool::new(
                e.tool_id.clone(),
                e.capability,
                &e.url,
                e.cost_hint,
                Duration::from_millis(e.timeout_ms),
            )
            .map_err(invalid)?;
            reg.register(Arc::new(tool)).map_err(invalid)?;
        }
        for kind in MockKind::ALL {
            if !self.endpoints.iter().any(|e| e.capability == kind.capability()) {
                reg.register(Arc::new(MockTool::new(kind, self.corruption))).map_err(invalid)?;
            }
        }
        register_geometry_tools(&mut reg).map_err(invalid)?;
        Ok(reg)
    }

    pub fn judge(&self) -> Result<Option<Arc<dyn Judge>>, ConfigError> {
        Ok(match self.judge.kind {
            JudgeKind::None => None,
            JudgeKind::Phantom => Some(Arc::new(PhantomJudge)),
            JudgeKind::Remote => Some(Arc::new(RemoteJudge::new(
                required_url(&self.judge.url, "remote judge")?,
                timeout(self.judge.timeout_ms),
            ))),
        })
    }

    pub fn embedder(&self) -> Result<Arc<dyn Embedder>, ConfigError> {
        Ok(match self.embedder.kind {
            EmbedderKind::Phantom => Arc::new(PhantomEmbedder),
            EmbedderKind::Remote => Arc::new(RemoteEmbedder::new(
                required_url(&self.embedder.url, "remote embedder")?,
                timeout(self.embedder.timeout_ms),
            )),
        })
    }

    pub fn runtime(&self) -> Result<AgentRuntime, ConfigError> {
        let templates = match &self.templates_dir {
            Some(dir) => TemplateSet::load_dir(dir).map_err(|e| ConfigError::Invalid(e.to_string()))?,
            None => TemplateSet::builtin(),
        };
        Ok(AgentRuntime {
            tools: self.registry()?,
            templates,
            verifier: Verifier::new(self.verifier, self.judge()?),
            thresholds: self.thresholds,
            max_steps: self.max_steps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_the_default() {
        assert_eq!(Config::parse("").unwrap(), Config::default());
        let c = Config::default();
        assert_eq!((c.vrag.k, c.max_steps, c.hnsw.m), (3, 8, 16));
        assert_eq!(c.verifier.uncertainty_gate, 0.6);
    }

    #[test]
    fn endpoints_replace_mocks() {
        let c = Config::parse(
            r#"
            [[endpoints]]
            tool_id = "remote_segmenter"
            capability = "segment"
            url = "http://127.0.0.1:9"
            timeout_ms = 50
            "#,
        )
        .unwrap();
        let reg = c.registry().unwrap();
        let seg: Vec<&str> = reg.lookup(Capability::Segment).iter().map(|c| c.tool_id.as_str()).collect();
        assert_eq!(seg, ["remote_segmenter"]);
        assert!(reg.has_capability(Capability::Classify));
        assert!(reg.has_capability(Capability::Measure));
    }

    #[test]
    fn invalid_values_are_rejected() {
        for text in [
            "max_steps = 0",
            "[vrag]\nk = 0",
            "[corruption]\nflip_label_prob = 1.5",
            "[judge]\nkind = \"remote\"",
            "[[endpoints]]\ntool_id = \"x\"\ncapability = \"measure\"\nurl = \"http://h\"",
        ] {
            let r = Config::parse(text).and_then(|c| c.registry().map(|_| ()));
            assert!(r.is_err(), "{text}");
        }
        assert!(matches!(Config::parse("max_steps = \"x\""), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("radagents.toml");
        std::fs::write(&path, "[vrag]\nenabled = true\nindex = \"mem.ragx\"\n").unwrap();
        let c = Config::load(&path).unwrap();
        assert_eq!(c.vrag.index.unwrap(), dir.path().join("mem.ragx"));
        assert!(Config::resolve(Some(&dir.path().join("missing.toml"))).is_err());
    }
}
