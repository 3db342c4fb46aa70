//! Run configuration: a TOML file whose keys are mirrored by command-line
//! flags. Flags win.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use goalscan::corpus::SplitSpec;
use goalscan::gateway::{sha256_hex, DEFAULT_CREDENTIAL_ENV, DEFAULT_EMBEDDING_DIM, DEFAULT_EMBEDDING_MODEL, DEFAULT_MODEL};
use goalscan::prompting::{Demonstration, Instruction, InstructionOrigin};
use goalscan::selection::SelectionPolicy;
use goalscan::tuner::{read_final_instruction, TunerConfig, TuningDemos};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Not part of the fingerprint.
    pub output_dir: PathBuf,
    pub repeats: usize,
    pub parallelism: usize,
    pub model: String,
    pub temperature: f64,
    pub corpus: CorpusConfig,
    pub backend: BackendConfig,
    pub embedding: EmbeddingConfig,
    pub instruction: InstructionConfig,
    pub policy: PolicyConfig,
    pub index: Option<PathBuf>,
    pub tuner: TunerConfig,
    pub matrix: MatrixConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            repeats: goalscan::evaluation::DEFAULT_REPEATS,
            parallelism: 8,
            model: DEFAULT_MODEL.to_string(),
            temperature: 0.0,
            corpus: CorpusConfig::default(),
            backend: BackendConfig::default(),
            embedding: EmbeddingConfig::default(),
            instruction: InstructionConfig::default(),
            policy: PolicyConfig::default(),
            index: None,
            tuner: TunerConfig::default(),
            matrix: MatrixConfig::default(),
        }
    }
}

/// Either `path` plus a split, or pre-split `train`/`test` files.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub path: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Named test reports; takes precedence over `test_report_count`.
    pub test_reports: Vec<String>,
    /// Draw this many test reports using the global seed.
    pub test_report_count: Option<usize>,
}

impl CorpusConfig {
    pub fn split_spec(&self, seed: u64) -> anyhow::Result<SplitSpec> {
        if !self.test_reports.is_empty() {
            return Ok(SplitSpec::Named {
                test_report_ids: self.test_reports.iter().cloned().collect::<BTreeSet<_>>(),
            });
        }
        match self.test_report_count {
            Some(n) => Ok(SplitSpec::Sampled {
                test_report_count: n,
                seed,
            }),
            None => bail!("corpus.test_reports or corpus.test_report_count is required to split"),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ChatKind {
    #[default]
    Http,
    Scripted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: ChatKind,
    pub base_url: String,
    pub credential_env_var: String,
    pub retry_max: usize,
    pub retry_base_delay_ms: u64,
    /// Not part of the fingerprint.
    pub cache_dir: Option<PathBuf>,
    pub scenario_path: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: ChatKind::Http,
            base_url: "https://api.openai.com/v1".into(),
            credential_env_var: DEFAULT_CREDENTIAL_ENV.into(),
            retry_max: 5,
            retry_base_delay_ms: 500,
            cache_dir: None,
            scenario_path: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EmbedKind {
    #[default]
    MockEmbed,
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub kind: EmbedKind,
    pub model: String,
    pub dim: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            kind: EmbedKind::MockEmbed,
            model: DEFAULT_EMBEDDING_MODEL.into(),
            dim: DEFAULT_EMBEDDING_DIM,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum InstructionSource {
    #[default]
    BuiltinSimple,
    BuiltinExpert,
    /// Plain text file.
    File,
    /// Evolution log written by `tune`.
    Tuned,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstructionConfig {
    pub source: InstructionSource,
    pub path: Option<PathBuf>,
}

impl InstructionConfig {
    pub fn load(&self) -> anyhow::Result<Instruction> {
        let read = |origin: InstructionOrigin, tuned: bool| -> anyhow::Result<Instruction> {
            let path = self
                .path
                .as_deref()
                .context("instruction.path is required for file and tuned sources")?;
            let text = if tuned {
                read_final_instruction(path)
            } else {
                std::fs::read_to_string(path)
            }
            .with_context(|| format!("reading instruction {}", path.display()))?;
            Ok(Instruction::new(text, origin)?)
        };
        match self.source {
            InstructionSource::BuiltinSimple => Ok(Instruction::simple()),
            InstructionSource::BuiltinExpert => Ok(Instruction::expert()),
            InstructionSource::File => read(InstructionOrigin::User, false),
            InstructionSource::Tuned => read(InstructionOrigin::Tuned, true),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    #[default]
    ZeroShot,
    Static,
    Random,
    Similar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub k: usize,
    pub per_class_cap: usize,
    /// Random policy seed; defaults to the global seed.
    pub seed: Option<u64>,
    /// JSONL of `{input_text, label}`; defaults to the built-in demonstrations.
    pub demos_path: Option<PathBuf>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            kind: PolicyKind::ZeroShot,
            k: 5,
            per_class_cap: 3,
            seed: None,
            demos_path: None,
        }
    }
}

impl PolicyConfig {
    pub fn resolve(&self, kind: PolicyKind, global_seed: u64) -> anyhow::Result<SelectionPolicy> {
        Ok(match kind {
            PolicyKind::ZeroShot => SelectionPolicy::ZeroShot,
            PolicyKind::Static => match &self.demos_path {
                None => SelectionPolicy::static_builtin(),
                Some(path) => SelectionPolicy::Static {
                    demos: read_demos(path)?,
                },
            },
            PolicyKind::Random => SelectionPolicy::Random {
                k: self.k,
                seed: self.seed.unwrap_or(global_seed),
            },
            PolicyKind::Similar => SelectionPolicy::Similar {
                k: self.k,
                per_class_cap: self.per_class_cap,
            },
        })
    }
}

fn read_demos(path: &Path) -> anyhow::Result<Vec<Demonstration>> {
    let data = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    data.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixConfig {
    /// `simple`, `expert`, or a path to an instruction file.
    pub instructions: Vec<String>,
    pub strategies: Vec<PolicyKind>,
    /// Tuning demonstrations; empty skips the tuned variants.
    pub tuning: Vec<TuningDemos>,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        Self {
            instructions: vec!["simple".into(), "expert".into()],
            strategies: vec![PolicyKind::ZeroShot, PolicyKind::Static, PolicyKind::Random, PolicyKind::Similar],
            tuning: vec![TuningDemos::ZeroShot, TuningDemos::Static],
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut config: Self = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        if let Some(base) = path.parent() {
            config.rebase_inputs(base);
        }
        Ok(config)
    }

    /// Resolve relative input paths against `base`. Outputs stay relative to
    /// the working directory.
    fn rebase_inputs(&mut self, base: &Path) {
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(path) = p.as_mut().filter(|p| p.is_relative()) {
                *path = base.join(&*path);
            }
        };
        rebase(&mut self.corpus.path);
        rebase(&mut self.corpus.train);
        rebase(&mut self.corpus.test);
        rebase(&mut self.backend.scenario_path);
        rebase(&mut self.instruction.path);
        rebase(&mut self.policy.demos_path);
        rebase(&mut self.index);
        for name in &mut self.matrix.instructions {
            if !matches!(name.as_str(), "simple" | "expert") && Path::new(name.as_str()).is_relative() {
                *name = base.join(&*name).to_string_lossy().into_owned();
            }
        }
    }

    /// Referenced inputs must exist; numeric knobs must be positive.
    pub fn validate(&self) -> anyhow::Result<()> {
        if self.repeats == 0 {
            bail!("repeats must be at least 1");
        }
        if self.parallelism == 0 {
            bail!("parallelism must be at least 1");
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            bail!("temperature must be >= 0");
        }
        if self.backend.kind == ChatKind::Scripted && self.backend.scenario_path.is_none() {
            bail!("backend.scenario_path is required for the scripted backend");
        }
        let files = [
            ("corpus.path", &self.corpus.path),
            ("corpus.train", &self.corpus.train),
            ("corpus.test", &self.corpus.test),
            ("backend.scenario_path", &self.backend.scenario_path),
            ("instruction.path", &self.instruction.path),
            ("policy.demos_path", &self.policy.demos_path),
        ];
        for (key, path) in files {
            if let Some(p) = path {
                if !p.exists() {
                    bail!("{key}: {} does not exist", p.display());
                }
            }
        }
        for name in &self.matrix.instructions {
            if !matches!(name.as_str(), "simple" | "expert") && !Path::new(name).exists() {
                bail!("matrix.instructions: {name} is neither a builtin nor an existing file");
            }
        }
        Ok(())
    }

    /// Hash of the resolved configuration, excluding where outputs and
    /// caches live.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.backend.cache_dir = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        sha256_hex(json.as_bytes())[..16].to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), c);
        assert_eq!(c.repeats, 7);
        assert_eq!(c.tuner.epsilon, 0.01);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[backend]\nkind = \"carrier_pigeon\"").is_err());
    }

    #[test]
    fn fingerprint_ignores_output_location() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        b.backend.cache_dir = Some("cache".into());
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.seed = 1;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn named_reports_win_over_count() {
        let c = CorpusConfig {
            test_reports: vec!["r1".into()],
            test_report_count: Some(3),
            ..Default::default()
        };
        assert!(matches!(c.split_spec(0).unwrap(), SplitSpec::Named { .. }));
        assert!(CorpusConfig::default().split_spec(0).is_err());
    }
}
