//! Run configuration: a strict JSON schema with defaults for every field.
//!
//! Unknown keys are rejected at every nesting level. Missing keys take the
//! defaults below, so `{}` is a valid configuration describing the default
//! three-group world.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub registry: RegistryConfig,
    pub hierarchy: HierarchyConfig,
    pub denoiser: DenoiserConfig,
    pub suplora: SuploraConfig,
    pub erasure: ErasureConfig,
    pub fusion: FusionConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub image_side: usize,
    pub embed_dim: usize,
    pub descriptions_per_concept: usize,
    /// Expected Euclidean norm of the Gaussian perturbation added to a
    /// centroid before re-normalizing a description column.
    pub desc_noise_sigma: f64,
    pub timesteps: usize,
    pub beta_schedule: BetaSchedule,
    pub seed: u64,
    /// Directions reserved per group for erased-concept variation.
    pub group_block_dim: usize,
    /// Weight of the concept-specific direction relative to the supertype
    /// direction in a subtype centroid.
    pub concept_offset: f64,
    /// Weight of the direction shared by all erased concepts of a group.
    pub group_shift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BetaSchedule {
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistryConfig {
    pub supertypes: Vec<FamilyConfig>,
    pub general: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyConfig {
    pub id: String,
    pub erased: Vec<String>,
    #[serde(default)]
    pub retained: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HierarchyConfig {
    pub mode: HierarchyMode,
    pub threshold: f64,
    /// Supertype name per group index (cluster mode). Group indices follow
    /// the lexicographically smallest member id.
    pub names: BTreeMap<String, String>,
    /// Explicit groups (explicit mode).
    pub groups: Vec<ExplicitGroup>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HierarchyMode {
    Cluster,
    Explicit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitGroup {
    pub supertype: String,
    pub members: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub d_model: usize,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuploraConfig {
    pub r: usize,
    pub r_s: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErasureConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub lr: f64,
    /// Training items per optimizer step.
    pub batch: usize,
    /// Timesteps drawn for each (concept, description) pair per epoch.
    pub timesteps_per_description: usize,
    /// CSV log and bound-check interval, in optimizer steps.
    pub log_every: usize,
    /// Overrides the stream derived from the world seed.
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub ridge: f64,
    /// Relative weight of the generality term against the target term, both
    /// taken as means over their columns.
    pub term_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Seed of the initial noise shared by every evaluation sample.
    pub sample_seed: u64,
    /// Seed of the noise used to probe attention at t = T/2.
    pub probe_seed: u64,
    pub dump_images: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub workdir: Option<String>,
    pub pretrained: String,
    pub hierarchy: String,
    pub adapters_dir: String,
    pub logs_dir: String,
    pub fused: String,
    pub reports_dir: String,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            image_side: 8,
            embed_dim: 32,
            descriptions_per_concept: 8,
            desc_noise_sigma: 0.1,
            timesteps: 50,
            beta_schedule: BetaSchedule::default(),
            seed: 42,
            group_block_dim: 5,
            concept_offset: 1.0,
            group_shift: 1.0,
        }
    }
}

impl Default for BetaSchedule {
    fn default() -> Self {
        Self {
            beta_start: 1e-4,
            beta_end: 0.02,
            kind: ScheduleKind::Linear,
        }
    }
}

fn ids(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl Default for RegistryConfig {
    fn default() -> Self {
        Self {
            supertypes: vec![
                FamilyConfig {
                    id: "bird".into(),
                    erased: ids(&[
                        "african_grey",
                        "bald_eagle",
                        "great_grey_owl",
                        "jay",
                        "macaw",
                        "ostrich",
                        "peacock",
                        "spoonbill",
                        "sulphur_crested_cockatoo",
                        "toucan",
                    ]),
                    retained: ids(&["hummingbird", "indigo_bunting"]),
                },
                FamilyConfig {
                    id: "dog".into(),
                    erased: ids(&[
                        "afghan_hound",
                        "beagle",
                        "chihuahua",
                        "golden_retriever",
                        "gordon_setter",
                        "great_pyrenees",
                        "komondor",
                        "papillon",
                        "rottweiler",
                        "tibetan_mastiff",
                    ]),
                    retained: ids(&["english_springer", "west_highland_white_terrier"]),
                },
                FamilyConfig {
                    id: "vehicle".into(),
                    erased: ids(&[
                        "airliner",
                        "fire_engine",
                        "forklift",
                        "garbage_truck",
                        "horse_cart",
                        "lifeboat",
                        "police_van",
                        "recreational_vehicle",
                        "speedboat",
                        "trailer_truck",
                    ]),
                    retained: ids(&["minivan", "trolleybus"]),
                },
            ],
            general: ids(&[
                "bagel",
                "cannon",
                "daisy",
                "fountain",
                "hourglass",
                "maze",
                "pineapple",
                "volcano",
            ]),
        }
    }
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        let names = [("0", "dog"), ("1", "bird"), ("2", "vehicle")]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        Self {
            mode: HierarchyMode::Cluster,
            threshold: 0.5,
            names,
            groups: Vec::new(),
        }
    }
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            d_model: 16,
            steps: 20_000,
            lr: 1e-3,
            batch: 16,
        }
    }
}

impl Default for SuploraConfig {
    fn default() -> Self {
        Self { r: 5, r_s: 5 }
    }
}

impl Default for ErasureConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            epochs: 20,
            lr: 3e-2,
            batch: 1,
            timesteps_per_description: 10,
            log_every: 10,
            seed: None,
        }
    }
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            ridge: 1e-6,
            term_scale: 10.0,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sample_seed: 1234,
            probe_seed: 99,
            dump_images: false,
        }
    }
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            workdir: None,
            pretrained: "pretrained.supl".into(),
            hierarchy: "hierarchy.json".into(),
            adapters_dir: "adapters".into(),
            logs_dir: "logs".into(),
            fused: "fused.supl".into(),
            reports_dir: "reports".into(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Hex SHA-256 of every field that influences numbers; paths are excluded
    /// so the same run in two directories hashes identically.
    pub fn hash(&self) -> String {
        let mut view = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = view.as_object_mut() {
            obj.remove("paths");
        }
        let digest = Sha256::digest(view.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn erasure_seed(&self) -> u64 {
        self.erasure.seed.unwrap_or(self.world.seed)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let w = &self.world;
        for (name, v) in [
            ("world.image_side", w.image_side),
            ("world.embed_dim", w.embed_dim),
            ("world.descriptions_per_concept", w.descriptions_per_concept),
            ("world.timesteps", w.timesteps),
            ("world.group_block_dim", w.group_block_dim),
            ("denoiser.d_model", self.denoiser.d_model),
            ("denoiser.batch", self.denoiser.batch),
            ("suplora.r", self.suplora.r),
            ("suplora.r_s", self.suplora.r_s),
            ("erasure.batch", self.erasure.batch),
            (
                "erasure.timesteps_per_description",
                self.erasure.timesteps_per_description,
            ),
            ("erasure.log_every", self.erasure.log_every),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be at least 1"));
            }
        }
        let b = &w.beta_schedule;
        if !(0.0 < b.beta_start && b.beta_start <= b.beta_end && b.beta_end < 1.0) {
            problems.push("world.beta_schedule needs 0 < beta_start <= beta_end < 1".into());
        }
        if !(w.desc_noise_sigma >= 0.0 && w.desc_noise_sigma.is_finite()) {
            problems.push("world.desc_noise_sigma must be finite and >= 0".into());
        }
        if !(w.concept_offset > 0.0 && w.concept_offset.is_finite()) {
            problems.push("world.concept_offset must be positive".into());
        }
        if !(w.group_shift >= 0.0 && w.group_shift.is_finite()) {
            problems.push("world.group_shift must be finite and >= 0".into());
        }
        let k = self.registry.supertypes.len();
        if k == 0 {
            problems.push("registry.supertypes is empty".into());
        }
        let needed = k + 1 + k * w.group_block_dim + 1;
        if w.embed_dim < needed {
            problems.push(format!(
                "world.embed_dim {} too small: {k} supertypes with group_block_dim {} need at least {needed}",
                w.embed_dim, w.group_block_dim
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for id in self.concept_ids() {
            if id.is_empty() || id.contains('/') {
                problems.push(format!("concept id `{id}` must be non-empty without `/`"));
            }
            if !seen.insert(id) {
                problems.push(format!("concept id `{id}` is declared twice"));
            }
        }
        for f in &self.registry.supertypes {
            if f.erased.is_empty() {
                problems.push(format!("supertype `{}` has no erased concepts", f.id));
            }
        }
        let h = &self.hierarchy;
        if !(h.threshold > 0.0 && h.threshold < 1.0) {
            problems.push("hierarchy.threshold must lie in (0, 1)".into());
        }
        if h.mode == HierarchyMode::Explicit && h.groups.is_empty() {
            problems.push("hierarchy.mode is explicit but hierarchy.groups is empty".into());
        }
        if self.suplora.r + self.suplora.r_s > w.embed_dim {
            problems.push("suplora.r + suplora.r_s exceeds world.embed_dim".into());
        }
        if self.suplora.r_s > w.descriptions_per_concept * 2 {
            problems.push("suplora.r_s exceeds the supertype sample count".into());
        }
        let e = &self.erasure;
        if !(e.lambda >= 0.0 && e.lambda.is_finite()) {
            problems.push("erasure.lambda must be finite and >= 0".into());
        }
        if !(e.lr > 0.0 && e.lr.is_finite())
            || !(self.denoiser.lr > 0.0 && self.denoiser.lr.is_finite())
        {
            problems.push("learning rates must be positive".into());
        }
        if !(self.fusion.ridge >= 0.0 && self.fusion.ridge.is_finite()) {
            problems.push("fusion.ridge must be finite and >= 0".into());
        }
        if !(self.fusion.term_scale > 0.0 && self.fusion.term_scale.is_finite()) {
            problems.push("fusion.term_scale must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    fn concept_ids(&self) -> Vec<&str> {
        let mut out = Vec::new();
        for f in &self.registry.supertypes {
            out.push(f.id.as_str());
            out.extend(f.erased.iter().map(String::as_str));
            out.extend(f.retained.iter().map(String::as_str));
        }
        out.extend(self.registry.general.iter().map(String::as_str));
        out
    }
}
