//! Pixel-distance metrics, parameter accounting and the adapter ablation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapter::{SuploraAdapter, Variant};
use crate::config::RunConfig;
use crate::denoiser::{sample, DenoiserParams};
use crate::erasure::{erase_all, masked_attention};
use crate::error::{Error, Result};
use crate::hierarchy::{ConceptGroup, ConceptKind, ConceptRegistry};
use crate::world::World;

/// Which adapters are active for a given prompt.
#[derive(Clone, Copy, Debug)]
pub enum Routing<'a> {
    /// Plain weights, or weights with adapters already fused in.
    Plain,
    /// A concept's prompt runs with the adapters of its group; supertype
    /// and retained concepts use the group owning their supertype, general
    /// concepts use none.
    PerGroup {
        groups: &'a [ConceptGroup],
        adapters: &'a [[SuploraAdapter; 2]],
    },
}

/// A denoiser plus the adapter routing used to sample from it.
#[derive(Clone, Copy, Debug)]
pub struct ModelView<'a> {
    pub params: &'a DenoiserParams,
    pub routing: Routing<'a>,
}

impl<'a> ModelView<'a> {
    pub fn plain(params: &'a DenoiserParams) -> Self {
        Self {
            params,
            routing: Routing::Plain,
        }
    }

    pub fn routed(
        params: &'a DenoiserParams,
        groups: &'a [ConceptGroup],
        adapters: &'a [[SuploraAdapter; 2]],
    ) -> Self {
        Self {
            params,
            routing: Routing::PerGroup { groups, adapters },
        }
    }

    pub fn adapters_for(
        &self,
        concept_id: &str,
        registry: &ConceptRegistry,
    ) -> Result<Vec<&'a SuploraAdapter>> {
        let Routing::PerGroup { groups, adapters } = self.routing else {
            return Ok(Vec::new());
        };
        let concept = registry.get(concept_id)?;
        let owner = match concept.kind {
            ConceptKind::General => None,
            ConceptKind::Erased => groups
                .iter()
                .position(|g| g.members.iter().any(|m| m == concept_id)),
            ConceptKind::Supertype => groups.iter().position(|g| g.supertype == concept.id),
            ConceptKind::Retained => groups.iter().position(|g| g.supertype == concept.domain),
        };
        Ok(match owner {
            Some(i) => adapters
                .iter()
                .filter(|pair| pair[0].group_id == groups[i].group_id)
                .flat_map(|pair| pair.iter())
                .collect(),
            None => Vec::new(),
        })
    }

    /// Deterministic sample conditioned on the concept's centroid.
    pub fn sample_concept(&self, world: &World, concept_id: &str, seed: u64) -> Result<Vec<f64>> {
        let ads = self.adapters_for(concept_id, &world.registry)?;
        let e = &world.assets(concept_id)?.centroid;
        sample(self.params, &ads, &world.prompt(e), seed)
    }

    pub fn masked_attention(
        &self,
        world: &World,
        concept_id: &str,
        probe_seed: u64,
    ) -> Result<f64> {
        let ads = self.adapters_for(concept_id, &world.registry)?;
        masked_attention(self.params, &ads, world, concept_id, probe_seed)
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptMetrics {
    pub concept_id: String,
    /// MSE of the sample against the concept's target (erased and retained)
    /// or its base pattern (supertypes).
    pub error_before: f64,
    pub error_after: f64,
    /// Mean concept-token attention on the mask; erased concepts only.
    pub masked_attention_before: Option<f64>,
    pub masked_attention_after: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub erased_error_before: f64,
    pub erased_error_after: f64,
    pub preserved_error_before: f64,
    pub preserved_error_after: f64,
    pub supertype_drift_before: f64,
    pub supertype_drift_after: f64,
    pub masked_attention_before: f64,
    pub masked_attention_after: f64,
}

impl MetricSummary {
    /// `1 − after / before` of the masked attention mass.
    pub fn suppression(&self) -> f64 {
        if self.masked_attention_before == 0.0 {
            return 0.0;
        }
        1.0 - self.masked_attention_after / self.masked_attention_before
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErasureReport {
    pub erased: Vec<ConceptMetrics>,
    pub retained: Vec<ConceptMetrics>,
    pub supertypes: Vec<ConceptMetrics>,
    pub summary: MetricSummary,
    pub params_groupwise: usize,
    pub params_conceptwise: usize,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Samples every erased, retained and supertype concept from both models
/// with the same noise and scores them against the world's references.
pub fn erasure_metrics(
    before: ModelView<'_>,
    after: ModelView<'_>,
    world: &World,
    sample_seed: u64,
    probe_seed: u64,
    storage: &StorageReport,
) -> Result<ErasureReport> {
    let mut erased = Vec::new();
    let mut retained = Vec::new();
    let mut supertypes = Vec::new();
    for c in &world.registry.concepts {
        if c.kind == ConceptKind::General {
            continue;
        }
        // A supertype's target is its bare base pattern.
        let reference = world
            .assets(&c.id)?
            .target
            .clone()
            .expect("non-general concepts have targets");
        let s0 = before.sample_concept(world, &c.id, sample_seed)?;
        let s1 = after.sample_concept(world, &c.id, sample_seed)?;
        let mut m = ConceptMetrics {
            concept_id: c.id.clone(),
            error_before: mse(&s0, reference.as_slice()),
            error_after: mse(&s1, reference.as_slice()),
            masked_attention_before: None,
            masked_attention_after: None,
        };
        match c.kind {
            ConceptKind::Erased => {
                m.masked_attention_before =
                    Some(before.masked_attention(world, &c.id, probe_seed)?);
                m.masked_attention_after = Some(after.masked_attention(world, &c.id, probe_seed)?);
                erased.push(m);
            }
            ConceptKind::Retained => retained.push(m),
            _ => supertypes.push(m),
        }
    }
    let summary = MetricSummary {
        erased_error_before: mean(erased.iter().map(|m| m.error_before)),
        erased_error_after: mean(erased.iter().map(|m| m.error_after)),
        preserved_error_before: mean(retained.iter().map(|m| m.error_before)),
        preserved_error_after: mean(retained.iter().map(|m| m.error_after)),
        supertype_drift_before: mean(supertypes.iter().map(|m| m.error_before)),
        supertype_drift_after: mean(supertypes.iter().map(|m| m.error_after)),
        masked_attention_before: mean(erased.iter().filter_map(|m| m.masked_attention_before)),
        masked_attention_after: mean(erased.iter().filter_map(|m| m.masked_attention_after)),
    };
    Ok(ErasureReport {
        erased,
        retained,
        supertypes,
        summary,
        params_groupwise: storage.params_groupwise,
        params_conceptwise: storage.params_conceptwise,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterShape {
    pub d_out: usize,
    pub d_in: usize,
    pub r: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StorageReport {
    pub erased_concepts: usize,
    pub groups: usize,
    pub params_per_module: usize,
    pub params_groupwise: usize,
    pub params_conceptwise: usize,
    /// `params_conceptwise / params_groupwise`, which is `N / K`.
    pub ratio: f64,
}

/// Parameter counts of one adapter module per group versus one per erased
/// concept. A module holds `layers` pairs of trainable `A` and stored `B`.
/// The group count is the number of supertypes that own erased concepts.
pub fn storage_accounting(
    registry: &ConceptRegistry,
    shape: AdapterShape,
    layers: usize,
) -> Result<StorageReport> {
    let n = registry.erased_count();
    let k = registry
        .supertypes()
        .iter()
        .filter(|s| {
            registry
                .of_kind(ConceptKind::Erased)
                .any(|c| c.domain == s.id)
        })
        .count();
    if k == 0 {
        return Err(Error::Config("no group owns an erased concept".into()));
    }
    let per = layers * (shape.d_out * shape.r + shape.r * shape.d_in);
    Ok(StorageReport {
        erased_concepts: n,
        groups: k,
        params_per_module: per,
        params_groupwise: k * per,
        params_conceptwise: n * per,
        ratio: n as f64 / k as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: Variant,
    pub masked_attention_before: f64,
    pub masked_attention_after: f64,
    pub suppression: f64,
    /// Mean supertype MSE to the base pattern before erasure, and after
    /// with every prompt routed through its group's adapters.
    pub supertype_drift_before: f64,
    pub supertype_drift_after: f64,
    pub erased_error_after: f64,
    pub bound_violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<VariantRow>,
}

impl Comparison {
    pub fn row(&self, variant: Variant) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

/// Trains each variant from the same seed and config and reports erasure
/// strength and supertype drift under per-group routing.
pub fn compare_adapters(
    variants: &[Variant],
    params: &DenoiserParams,
    world: &World,
    groups: &[ConceptGroup],
    cfg: &RunConfig,
) -> Result<Comparison> {
    let storage = storage_accounting(
        &world.registry,
        AdapterShape {
            d_out: params.d_model(),
            d_in: world.embed_dim(),
            r: cfg.suplora.r,
        },
        2,
    )?;
    let mut rows = Vec::new();
    for &variant in variants {
        let trained = erase_all(params, world, groups, variant, cfg)?;
        let violations = trained.iter().map(|(_, r)| r.bound_violations).sum();
        let adapters: Vec<[SuploraAdapter; 2]> = trained.into_iter().map(|(a, _)| a).collect();
        let report = erasure_metrics(
            ModelView::plain(params),
            ModelView::routed(params, groups, &adapters),
            world,
            cfg.eval.sample_seed,
            cfg.eval.probe_seed,
            &storage,
        )?;
        let s = &report.summary;
        rows.push(VariantRow {
            variant,
            masked_attention_before: s.masked_attention_before,
            masked_attention_after: s.masked_attention_after,
            suppression: s.suppression(),
            supertype_drift_before: s.supertype_drift_before,
            supertype_drift_after: s.supertype_drift_after,
            erased_error_after: s.erased_error_after,
            bound_violations: violations,
        });
    }
    Ok(Comparison { rows })
}

/// Masked attention after / before, averaged within each supertype's erased
/// concepts.
pub fn group_mass_ratios(
    report: &ErasureReport,
    registry: &ConceptRegistry,
) -> Result<BTreeMap<String, f64>> {
    let mut sums: BTreeMap<String, (f64, f64)> = BTreeMap::new();
    for m in &report.erased {
        let domain = registry.get(&m.concept_id)?.domain.clone();
        let e = sums.entry(domain).or_default();
        e.0 += m.masked_attention_before.unwrap_or(0.0);
        e.1 += m.masked_attention_after.unwrap_or(0.0);
    }
    Ok(sums
        .into_iter()
        .map(|(k, (b, a))| (k, if b == 0.0 { 0.0 } else { a / b }))
        .collect())
}
