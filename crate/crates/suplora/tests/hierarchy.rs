use std::collections::BTreeMap;

use proptest::prelude::*;
use suplora::config::RegistryConfig;
use suplora::hierarchy::{
    assign_supertypes, build_groups, declared_groups, group_similarity, Concept, ConceptKind,
    ConceptRegistry,
};
use suplora::rng::{gaussian_vec, stream};

fn erased(id: &str) -> Concept {
    Concept {
        id: id.into(),
        kind: ConceptKind::Erased,
        domain: "unknown".into(),
    }
}

fn jitter(center: &[f64], seed: u64, scale: f64) -> Vec<f64> {
    let noise = gaussian_vec(&mut stream(seed, "test/jitter"), center.len());
    center
        .iter()
        .zip(noise)
        .map(|(c, n)| c + scale * n)
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

#[test]
fn two_orthogonal_clusters_give_two_groups() {
    let e1 = [1.0, 0.0, 0.0, 0.0];
    let e2 = [0.0, 1.0, 0.0, 0.0];
    let mut concepts = Vec::new();
    let mut emb = BTreeMap::new();
    for i in 0..4 {
        for (tag, center) in [("a", &e1), ("b", &e2)] {
            let id = format!("{tag}{i}");
            emb.insert(
                id.clone(),
                jitter(center, i as u64 + 10 * u64::from(tag == "b"), 0.05),
            );
            concepts.push(erased(&id));
        }
    }
    let groups = build_groups(&concepts, &emb, 0.5).unwrap();
    assert_eq!(groups.len(), 2);
    assert_eq!(groups[0].members, vec!["a0", "a1", "a2", "a3"]);
    assert_eq!(groups[1].members, vec!["b0", "b1", "b2", "b3"]);
    // Brute-force check: every within-group pair is similar, every cross pair is not.
    for g in &groups {
        for h in &groups {
            for x in &g.members {
                for y in &h.members {
                    let s = cosine(&emb[x], &emb[y]);
                    if g.group_id == h.group_id {
                        assert!(s > 0.5, "{x} {y} {s}");
                    } else {
                        assert!(s < 0.5, "{x} {y} {s}");
                    }
                }
            }
        }
    }
}

#[test]
fn single_concept_is_a_singleton_group() {
    let emb = BTreeMap::from([("only".to_string(), vec![0.3, 0.4])]);
    let groups = build_groups(&[erased("only")], &emb, 0.5).unwrap();
    assert_eq!(groups.len(), 1);
    assert_eq!(groups[0].group_id, 0);
    assert_eq!(groups[0].members, vec!["only"]);
}

#[test]
fn missing_embedding_names_the_concept() {
    let emb = BTreeMap::from([("a".to_string(), vec![1.0, 0.0])]);
    let err = build_groups(&[erased("a"), erased("ghost")], &emb, 0.5).unwrap_err();
    assert!(err.to_string().contains("ghost"), "{err}");
}

#[test]
fn threshold_outside_unit_interval_is_rejected() {
    let emb = BTreeMap::from([("a".to_string(), vec![1.0])]);
    assert!(build_groups(&[erased("a")], &emb, 0.0).is_err());
    assert!(build_groups(&[erased("a")], &emb, 1.0).is_err());
}

fn two_groups() -> Vec<suplora::hierarchy::ConceptGroup> {
    let emb = BTreeMap::from([
        ("a".to_string(), vec![1.0, 0.0]),
        ("b".to_string(), vec![0.0, 1.0]),
    ]);
    build_groups(&[erased("a"), erased("b")], &emb, 0.5).unwrap()
}

#[test]
fn assign_supertypes_sets_names() {
    let mut reg = ConceptRegistry::from_config(&RegistryConfig::default()).unwrap();
    let groups = two_groups();
    let named = assign_supertypes(
        &groups[..1],
        &BTreeMap::from([(0, "bird".to_string())]),
        &mut reg,
    )
    .unwrap();
    assert_eq!(named[0].supertype, "bird");
}

#[test]
fn duplicate_supertype_names_are_accepted() {
    let mut reg = ConceptRegistry::from_config(&RegistryConfig::default()).unwrap();
    let names = BTreeMap::from([(0, "bird".to_string()), (1, "bird".to_string())]);
    let named = assign_supertypes(&two_groups(), &names, &mut reg).unwrap();
    assert_eq!(named.len(), 2);
    assert_eq!((named[0].group_id, named[1].group_id), (0, 1));
    assert!(named.iter().all(|g| g.supertype == "bird"));
}

#[test]
fn missing_supertype_name_is_an_error() {
    let mut reg = ConceptRegistry::from_config(&RegistryConfig::default()).unwrap();
    let names = BTreeMap::from([(0, "bird".to_string())]);
    assert!(assign_supertypes(&two_groups(), &names, &mut reg).is_err());
}

#[test]
fn unknown_supertype_is_registered() {
    let mut reg = ConceptRegistry::from_config(&RegistryConfig::default()).unwrap();
    let names = BTreeMap::from([(0, "reptile".to_string()), (1, "dog".to_string())]);
    assign_supertypes(&two_groups(), &names, &mut reg).unwrap();
    assert_eq!(reg.get("reptile").unwrap().kind, ConceptKind::Supertype);
}

#[test]
fn default_registry_declares_three_groups_of_ten() {
    let reg = ConceptRegistry::from_config(&RegistryConfig::default()).unwrap();
    let groups = declared_groups(&reg);
    assert_eq!(groups.len(), 3);
    assert!(groups.iter().all(|g| g.members.len() == 10));
    assert_eq!(reg.erased_count(), 30);
    assert_eq!(reg.parent("beagle").unwrap().unwrap().id, "dog");
    assert!(reg.parent("bagel").unwrap().is_none());
}

#[test]
fn duplicate_concept_ids_are_rejected() {
    let mut cfg = RegistryConfig::default();
    cfg.general.push("beagle".into());
    let err = ConceptRegistry::from_config(&cfg).unwrap_err();
    assert!(err.to_string().contains("beagle"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn clustering_partitions_and_is_deterministic(n in 1usize..12, seed in any::<u64>(), threshold in 0.05f64..0.95) {
        let mut rng = stream(seed, "test/cluster");
        let centers: Vec<Vec<f64>> = (0..3).map(|_| gaussian_vec(&mut rng, 6)).collect();
        let mut emb = BTreeMap::new();
        let mut concepts = Vec::new();
        for i in 0..n {
            let id = format!("c{i:02}");
            emb.insert(id.clone(), jitter(&centers[i % 3], seed ^ i as u64, 0.3));
            concepts.push(erased(&id));
        }
        let groups = build_groups(&concepts, &emb, threshold).unwrap();
        let again = build_groups(&concepts, &emb, threshold).unwrap();
        prop_assert_eq!(&groups, &again);

        let mut all: Vec<String> = groups.iter().flat_map(|g| g.members.clone()).collect();
        all.sort();
        let mut want: Vec<String> = emb.keys().cloned().collect();
        want.sort();
        prop_assert_eq!(all, want);
        for (i, g) in groups.iter().enumerate() {
            prop_assert_eq!(g.group_id, i);
            prop_assert!(g.members.windows(2).all(|w| w[0] < w[1]));
        }
        if groups.len() > 1 && groups.iter().any(|g| g.members.len() > 1) {
            let (intra, inter) = group_similarity(&groups, &emb).unwrap();
            prop_assert!(intra >= inter, "intra {} inter {}", intra, inter);
        }
    }
}
