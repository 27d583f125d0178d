//! Concept registry and the supertype/subtype hierarchy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::RegistryConfig;
use crate::error::{Error, Result};
use crate::numerics::{dot, norm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptKind {
    Erased,
    Retained,
    Supertype,
    General,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub id: String,
    pub kind: ConceptKind,
    /// Supertype id for erased and retained concepts, the concept's own id
    /// for supertypes, `"general"` otherwise.
    pub domain: String,
}

/// Every concept of a world plus the ground-truth parent of each subtype.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptRegistry {
    pub concepts: Vec<Concept>,
}

impl ConceptRegistry {
    pub fn from_config(cfg: &RegistryConfig) -> Result<Self> {
        let mut concepts = Vec::new();
        for fam in &cfg.supertypes {
            concepts.push(Concept {
                id: fam.id.clone(),
                kind: ConceptKind::Supertype,
                domain: fam.id.clone(),
            });
            for (ids, kind) in [
                (&fam.erased, ConceptKind::Erased),
                (&fam.retained, ConceptKind::Retained),
            ] {
                concepts.extend(ids.iter().map(|id| Concept {
                    id: id.clone(),
                    kind,
                    domain: fam.id.clone(),
                }));
            }
        }
        concepts.extend(cfg.general.iter().map(|id| Concept {
            id: id.clone(),
            kind: ConceptKind::General,
            domain: "general".into(),
        }));
        let reg = Self { concepts };
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = reg.concepts.iter().find(|c| !seen.insert(c.id.as_str())) {
            return Err(Error::Config(format!(
                "concept id `{}` is declared twice",
                dup.id
            )));
        }
        Ok(reg)
    }

    pub fn get(&self, id: &str) -> Result<&Concept> {
        self.concepts
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| Error::UnknownConcept(id.to_string()))
    }

    pub fn of_kind(&self, kind: ConceptKind) -> impl Iterator<Item = &Concept> {
        self.concepts.iter().filter(move |c| c.kind == kind)
    }

    /// Supertypes in declaration order.
    pub fn supertypes(&self) -> Vec<&Concept> {
        self.of_kind(ConceptKind::Supertype).collect()
    }

    /// Position of a supertype among all supertypes.
    pub fn supertype_index(&self, id: &str) -> Result<usize> {
        self.supertypes()
            .iter()
            .position(|c| c.id == id)
            .ok_or_else(|| Error::UnknownConcept(id.to_string()))
    }

    /// Supertype of an erased or retained concept, or the concept itself for
    /// a supertype.
    pub fn parent(&self, id: &str) -> Result<Option<&Concept>> {
        let c = self.get(id)?;
        match c.kind {
            ConceptKind::General => Ok(None),
            _ => self.get(&c.domain).map(Some),
        }
    }

    pub fn erased_count(&self) -> usize {
        self.of_kind(ConceptKind::Erased).count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptGroup {
    pub group_id: usize,
    /// Sorted erased-concept ids.
    pub members: Vec<String>,
    /// Empty until [`assign_supertypes`] runs.
    pub supertype: String,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

/// Average-link agglomerative clustering on cosine similarity.
///
/// Starts from singletons and repeatedly merges the pair of clusters with
/// the highest mean pairwise similarity until that similarity drops below
/// `threshold`. Ties go to the pair whose smallest member ids sort first.
/// Groups come back ordered by smallest member id, with sorted members.
pub fn build_groups(
    concepts: &[Concept],
    embeddings: &BTreeMap<String, Vec<f64>>,
    threshold: f64,
) -> Result<Vec<ConceptGroup>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!(
            "linkage threshold {threshold} outside (0, 1)"
        )));
    }
    let mut ids: Vec<&str> = concepts.iter().map(|c| c.id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut vecs = Vec::with_capacity(ids.len());
    for id in &ids {
        let e = embeddings
            .get(*id)
            .ok_or_else(|| Error::UnknownConcept(format!("{id} (no embedding)")))?;
        vecs.push(e.as_slice());
    }
    if let Some(v) = vecs.first() {
        if vecs.iter().any(|e| e.len() != v.len()) {
            return Err(Error::Shape("embeddings differ in dimension".into()));
        }
    }
    let n = ids.len();
    let mut sim = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let s = cosine(vecs[i], vecs[j]);
            sim[i][j] = s;
            sim[j][i] = s;
        }
    }

    // Each cluster is a sorted list of indices into `ids`; since `ids` is
    // sorted, the first index is the smallest member id.
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let mut total = 0.0;
                for &i in &clusters[a] {
                    for &j in &clusters[b] {
                        total += sim[i][j];
                    }
                }
                let avg = total / (clusters[a].len() * clusters[b].len()) as f64;
                let better = match best {
                    None => true,
                    Some((s, ba, bb)) => {
                        avg > s
                            || (avg == s
                                && (clusters[a][0], clusters[b][0])
                                    < (clusters[ba][0], clusters[bb][0]))
                    }
                };
                if better {
                    best = Some((avg, a, b));
                }
            }
        }
        match best {
            Some((s, a, b)) if s >= threshold => {
                let merged = clusters.remove(b);
                clusters[a].extend(merged);
                clusters[a].sort_unstable();
            }
            _ => break,
        }
    }
    clusters.sort_by_key(|c| c[0]);
    Ok(clusters
        .into_iter()
        .enumerate()
        .map(|(group_id, c)| ConceptGroup {
            group_id,
            members: c.into_iter().map(|i| ids[i].to_string()).collect(),
            supertype: String::new(),
        })
        .collect())
}

/// Attaches a supertype name to each group, registering any supertype
/// concept that the registry does not know yet.
pub fn assign_supertypes(
    groups: &[ConceptGroup],
    names: &BTreeMap<usize, String>,
    registry: &mut ConceptRegistry,
) -> Result<Vec<ConceptGroup>> {
    let mut out = Vec::with_capacity(groups.len());
    for g in groups {
        let name = names
            .get(&g.group_id)
            .ok_or_else(|| Error::Config(format!("no supertype name for group {}", g.group_id)))?;
        if registry.get(name).is_err() {
            registry.concepts.push(Concept {
                id: name.clone(),
                kind: ConceptKind::Supertype,
                domain: name.clone(),
            });
        }
        out.push(ConceptGroup {
            supertype: name.clone(),
            ..g.clone()
        });
    }
    Ok(out)
}

/// Groups as declared by the registry: one per supertype, in declaration order.
pub fn declared_groups(registry: &ConceptRegistry) -> Vec<ConceptGroup> {
    registry
        .supertypes()
        .iter()
        .enumerate()
        .map(|(group_id, s)| {
            let mut members: Vec<String> = registry
                .of_kind(ConceptKind::Erased)
                .filter(|c| c.domain == s.id)
                .map(|c| c.id.clone())
                .collect();
            members.sort();
            ConceptGroup {
                group_id,
                members,
                supertype: s.id.clone(),
            }
        })
        .collect()
}

/// The hierarchy file written by the `hierarchy` stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hierarchy {
    pub config_hash: String,
    pub groups: Vec<ConceptGroup>,
    /// Mean cosine similarity within groups and across groups.
    pub intra_similarity: f64,
    pub inter_similarity: f64,
}

/// Mean pairwise cosine similarity of members within the same group and
/// across different groups.
pub fn group_similarity(
    groups: &[ConceptGroup],
    embeddings: &BTreeMap<String, Vec<f64>>,
) -> Result<(f64, f64)> {
    let mut labelled = Vec::new();
    for g in groups {
        for m in &g.members {
            let e = embeddings
                .get(m)
                .ok_or_else(|| Error::UnknownConcept(m.clone()))?;
            labelled.push((g.group_id, e));
        }
    }
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..labelled.len() {
        for j in i + 1..labelled.len() {
            let s = cosine(labelled[i].1, labelled[j].1);
            if labelled[i].0 == labelled[j].0 {
                intra += s;
                ni += 1;
            } else {
                inter += s;
                nx += 1;
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok((mean(intra, ni), mean(inter, nx)))
}
