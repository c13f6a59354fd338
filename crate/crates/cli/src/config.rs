//! Run configuration: a TOML file layered over profile and preset defaults,
//! then overridden by command-line flags.
//!
//! ```toml
//! profile = "fast"          # or "high-accuracy" (default)
//! preset = "tiny"           # benchmark preset, "desk" (default) or "tiny"
//! seed = 7                  # replaces every component seed
//! threads = 2               # 0 lets the thread pool decide
//!
//! [vocab]
//! kind = "akm"
//! words = 4096
//!
//! [assign]
//! r = 3
//! sigma = 580.0
//!
//! [index]
//! orientation_bins = 6
//!
//! [ransac]
//! iterations = 500
//!
//! [localize]
//! top_candidates = 5
//!
//! [benchmark]
//! queries = 100
//! ```

use std::path::Path;

use gtbow::bow::AssignParams;
use gtbow::eval::{BenchmarkSpec, SystemConfig, VocabSpec};
use gtbow::index::IndexParams;
use gtbow::localize::{LocalizeParams, RansacParams};
use gtbow::vocab::{BinningMode, VocabularyKind};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// Soft assignment (r=3) with weighted RANSAC.
    #[default]
    HighAccuracy,
    /// Hard assignment (r=1), unweighted RANSAC.
    Fast,
}

impl Profile {
    pub fn system(self) -> SystemConfig {
        match self {
            Profile::HighAccuracy => SystemConfig::high_accuracy(),
            Profile::Fast => SystemConfig::fast(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// 2 m x 2 m world, 2,000 database images, 400 queries.
    #[default]
    Desk,
    /// A few hundred images; runs in seconds.
    Tiny,
}

impl Preset {
    pub fn spec(self) -> BenchmarkSpec {
        match self {
            Preset::Desk => BenchmarkSpec::desk(),
            Preset::Tiny => BenchmarkSpec::tiny(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VocabConfig {
    pub kind: VocabularyKind,
    pub size_binning: bool,
    pub words: usize,
    pub branching: usize,
    pub depth: usize,
    pub iters: usize,
    pub size_bins: usize,
    pub binning: BinningMode,
    pub seed: u64,
}

impl VocabConfig {
    fn from_parts(system: &SystemConfig, spec: &VocabSpec) -> Self {
        Self {
            kind: system.vocab,
            size_binning: system.size_binning,
            words: spec.words,
            branching: spec.hkm_branching,
            depth: spec.hkm_depth,
            iters: spec.akm_iters,
            size_bins: spec.size_bins,
            binning: spec.binning_mode,
            seed: spec.seed,
        }
    }

    pub fn spec(&self) -> VocabSpec {
        VocabSpec {
            words: self.words,
            hkm_branching: self.branching,
            hkm_depth: self.depth,
            akm_iters: self.iters,
            size_bins: self.size_bins,
            binning_mode: self.binning,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizeConfig {
    pub top_candidates: usize,
    pub min_inliers: usize,
}

/// The fully resolved configuration, echoed into every output manifest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub preset: Preset,
    pub seed: Option<u64>,
    pub threads: usize,
    pub vocab: VocabConfig,
    pub assign: AssignParams,
    pub index: IndexParams,
    pub ransac: RansacParams,
    pub localize: LocalizeConfig,
    pub benchmark: BenchmarkSpec,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    profile: Option<Profile>,
    preset: Option<Preset>,
    seed: Option<u64>,
    threads: Option<usize>,
    vocab: Option<toml::Table>,
    assign: Option<toml::Table>,
    index: Option<toml::Table>,
    ransac: Option<toml::Table>,
    localize: Option<toml::Table>,
    benchmark: Option<toml::Table>,
}

/// Top-level choices that can come from flags or the environment and must
/// be known before the sections are layered.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub profile: Option<Profile>,
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

pub fn load_config(path: Option<&Path>, overrides: Overrides) -> Result<RunConfig, CliError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let name = path.map_or_else(|| "<defaults>".to_string(), |p| p.display().to_string());
    parse_config(&text, &name, overrides)
}

pub fn parse_config(text: &str, name: &str, overrides: Overrides) -> Result<RunConfig, CliError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| CliError::Config(format!("{name}: {e}")))?;
    let profile = overrides.profile.or(raw.profile).unwrap_or_default();
    let preset = overrides.preset.or(raw.preset).unwrap_or_default();
    let system = profile.system();

    let mut benchmark: BenchmarkSpec = overlay(&preset.spec(), raw.benchmark.as_ref(), name, "benchmark")?;
    let vocab: VocabConfig = overlay(
        &VocabConfig::from_parts(&system, &benchmark.vocab),
        raw.vocab.as_ref(),
        name,
        "vocab",
    )?;
    benchmark.vocab = vocab.spec();
    let mut assign: AssignParams = overlay(&system.assign, raw.assign.as_ref(), name, "assign")?;
    let index: IndexParams = overlay(&system.index_params(), raw.index.as_ref(), name, "index")?;
    let ransac: RansacParams = overlay(
        &RansacParams {
            weighted: system.weighted_ransac,
            ..RansacParams::default()
        },
        raw.ransac.as_ref(),
        name,
        "ransac",
    )?;
    let defaults = LocalizeParams::default();
    let localize: LocalizeConfig = overlay(
        &LocalizeConfig {
            top_candidates: defaults.top_candidates,
            min_inliers: defaults.min_inliers,
        },
        raw.localize.as_ref(),
        name,
        "localize",
    )?;

    if profile == Profile::Fast && assign.r != 1 {
        log::warn!("profile fast uses hard assignment; ignoring assign.r = {}", assign.r);
        assign.r = 1;
    }
    let seed = overrides.seed.or(raw.seed);
    let mut cfg = RunConfig {
        profile,
        preset,
        seed,
        threads: overrides.threads.or(raw.threads).unwrap_or(0),
        vocab,
        assign,
        index,
        ransac,
        localize,
        benchmark,
    };
    if let Some(s) = seed {
        cfg.apply_seed(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Serializes `base`, merges `patch` over it key by key and deserializes the
/// result. Keys in `patch` that `T` does not know are rejected.
fn overlay<T: Serialize + DeserializeOwned + Clone>(
    base: &T,
    patch: Option<&toml::Table>,
    file: &str,
    section: &str,
) -> Result<T, CliError> {
    let Some(patch) = patch else {
        return Ok(base.clone());
    };
    let mut merged = toml::Table::try_from(base).expect("defaults serialize to TOML");
    merge(&mut merged, patch);
    let err = |e: String| CliError::Config(format!("{file}: [{section}] {e}"));
    let value: T = match merged.try_into() {
        Ok(v) => v,
        Err(e) => {
            let e: toml::de::Error = e;
            let base = toml::Table::try_from(base).expect("defaults serialize to TOML");
            let field = offending_key::<T>(&base, patch).unwrap_or_default();
            return Err(err(format!("{field}: {}", e.message())));
        }
    };
    let known = toml::Table::try_from(&value).expect("resolved values serialize to TOML");
    if let Some(path) = unknown_key(patch, &known, "") {
        return Err(err(format!("unknown field `{path}`")));
    }
    Ok(value)
}

/// The first leaf of `patch` that alone makes `base` fail to deserialize.
fn offending_key<T: DeserializeOwned>(base: &toml::Table, patch: &toml::Table) -> Option<String> {
    let mut leaves = Vec::new();
    flatten(patch, &mut Vec::new(), &mut leaves);
    leaves.into_iter().find_map(|(path, value)| {
        let single = path.iter().rev().fold(value, |inner, key| {
            toml::Value::Table(toml::Table::from_iter([(key.clone(), inner)]))
        });
        let mut trial = base.clone();
        merge(&mut trial, single.as_table().expect("paths are non-empty"));
        trial.try_into::<T>().is_err().then(|| path.join("."))
    })
}

fn flatten(table: &toml::Table, prefix: &mut Vec<String>, out: &mut Vec<(Vec<String>, toml::Value)>) {
    for (k, v) in table {
        prefix.push(k.clone());
        match v {
            toml::Value::Table(t) => flatten(t, prefix, out),
            _ => out.push((prefix.clone(), v.clone())),
        }
        prefix.pop();
    }
}

fn merge(base: &mut toml::Table, patch: &toml::Table) {
    for (k, v) in patch {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(p)) => merge(b, p),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn unknown_key(patch: &toml::Table, known: &toml::Table, prefix: &str) -> Option<String> {
    for (k, v) in patch {
        let path = format!("{prefix}{k}");
        match (known.get(k), v) {
            // optional fields that resolved to None are absent from `known`
            (None, _) if !optional_field(&path) => return Some(path),
            (Some(toml::Value::Table(kt)), toml::Value::Table(pt)) => {
                if let Some(p) = unknown_key(pt, kt, &format!("{path}.")) {
                    return Some(p);
                }
            }
            _ => {}
        }
    }
    None
}

fn optional_field(path: &str) -> bool {
    path == "database_images"
}

impl RunConfig {
    /// Replaces the benchmark, vocabulary and RANSAC seeds.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.benchmark.seed = seed;
        self.vocab.seed = seed;
        self.benchmark.vocab.seed = seed;
        self.ransac.seed = seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.assign.r == 0 || !(self.assign.sigma > 0.0) {
            return bad(format!("assign: r must be >= 1 and sigma > 0, got {:?}", self.assign));
        }
        self.index
            .validate()
            .map_err(|e| CliError::Config(format!("index: {e}")))?;
        self.ransac
            .validate()
            .map_err(|e| CliError::Config(format!("ransac: {e}")))?;
        self.benchmark
            .observation
            .validate()
            .map_err(|e| CliError::Config(format!("benchmark.observation: {e}")))?;
        let v = &self.vocab;
        if v.words < 2 || v.branching < 2 || v.depth == 0 || v.iters == 0 || v.size_bins == 0 {
            return bad(format!(
                "vocab: sizes must be positive (words and branching >= 2), got {v:?}"
            ));
        }
        if self.localize.top_candidates == 0 {
            return bad("localize: top_candidates must be >= 1".into());
        }
        Ok(())
    }

    pub fn localize_params(&self) -> LocalizeParams {
        LocalizeParams {
            top_candidates: self.localize.top_candidates,
            min_inliers: self.localize.min_inliers,
            ransac: self.ransac,
            assign: self.assign,
            camera: self.benchmark.observation.camera,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn system_of(c: &RunConfig) -> SystemConfig {
        SystemConfig {
            vocab: c.vocab.kind,
            size_binning: c.vocab.size_binning,
            assign: c.assign,
            orientation_bins: c.index.orientation_bins,
            weighted_ransac: c.ransac.weighted,
        }
    }

    fn parse(text: &str) -> Result<RunConfig, CliError> {
        parse_config(text, "test.toml", Overrides::default())
    }

    #[test]
    fn empty_config_is_high_accuracy() {
        let c = parse("").unwrap();
        assert_eq!(c.profile, Profile::HighAccuracy);
        assert_eq!(system_of(&c), SystemConfig::high_accuracy());
        assert_eq!((c.assign.r, c.assign.sigma), (3, 580.0));
        assert_eq!(c.index.orientation_bins, 6);
        assert_eq!(c.benchmark, BenchmarkSpec::desk());
        assert_eq!(c.vocab.spec(), VocabSpec::default());
    }

    #[test]
    fn fast_profile_forces_hard_assignment() {
        let c = parse("profile = \"fast\"\n[assign]\nr = 3\n").unwrap();
        assert_eq!(c.assign.r, 1);
        assert_eq!(system_of(&c), SystemConfig::fast());
    }

    #[test]
    fn sections_override_defaults() {
        let c = parse("preset = \"tiny\"\n[vocab]\nwords = 128\n[benchmark]\nqueries = 5\n[benchmark.observation]\nbitflip_prob = 0.1\n").unwrap();
        assert_eq!(c.vocab.words, 128);
        assert_eq!(c.vocab.branching, BenchmarkSpec::tiny().vocab.hkm_branching);
        assert_eq!(c.benchmark.queries, 5);
        assert_eq!(c.benchmark.observation.bitflip_prob, 0.1);
        assert_eq!(c.benchmark.extent_mm, BenchmarkSpec::tiny().extent_mm);
    }

    #[test]
    fn flags_beat_the_file() {
        let o = Overrides {
            profile: Some(Profile::Fast),
            seed: Some(99),
            ..Overrides::default()
        };
        let c = parse_config("profile = \"high-accuracy\"\nseed = 3\n", "t", o).unwrap();
        assert_eq!(c.profile, Profile::Fast);
        assert_eq!((c.benchmark.seed, c.vocab.seed, c.ransac.seed), (99, 99, 99));
    }

    #[test]
    fn bad_numeric_is_a_structured_error() {
        let e = parse("[assign]\nsigma = \"wide\"\n").unwrap_err().to_string();
        assert!(e.contains("[assign] sigma: invalid type"), "{e}");
        let e = parse("threads = -1\n").unwrap_err().to_string();
        assert!(e.contains("line 1"), "{e}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse("colour = 1\n").is_err());
        let e = parse("[ransac]\niteration = 5\n").unwrap_err().to_string();
        assert!(e.contains("iteration"), "{e}");
        let e = parse("[benchmark.observation]\nbitflip = 0.1\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("observation.bitflip"), "{e}");
        let e = parse("[benchmark.observation.camera]\npx_per_mm = \"x\"\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("observation.camera.px_per_mm"), "{e}");
        let e = parse("[benchmark.observation]\nbitflip = 0.1\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("observation.bitflip"), "{e}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(parse("[index]\norientation_bins = 0\n").is_err());
        assert!(parse("[assign]\nsigma = -1.0\n").is_err());
        assert!(parse("[ransac]\nconfidence = 1.5\n").is_err());
    }
}
