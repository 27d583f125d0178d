use suplora::adapter::{init_baseline, Layer, SuploraAdapter, Variant};
use suplora::config::{FamilyConfig, RegistryConfig, WorldConfig};
use suplora::denoiser::DenoiserParams;
use suplora::eval::{erasure_metrics, storage_accounting, AdapterShape, MetricSummary, ModelView};
use suplora::hierarchy::{declared_groups, ConceptKind, ConceptRegistry};
use suplora::world::World;

const SHAPE: AdapterShape = AdapterShape {
    d_out: 16,
    d_in: 32,
    r: 5,
};

fn registry(sizes: &[usize]) -> ConceptRegistry {
    let supertypes = sizes
        .iter()
        .enumerate()
        .map(|(g, &n)| FamilyConfig {
            id: format!("s{g}"),
            erased: (0..n).map(|i| format!("c{g}_{i}")).collect(),
            retained: Vec::new(),
        })
        .collect();
    ConceptRegistry::from_config(&RegistryConfig {
        supertypes,
        general: Vec::new(),
    })
    .unwrap()
}

#[test]
fn default_world_ratio_is_ten() {
    let reg = ConceptRegistry::from_config(&RegistryConfig::default()).unwrap();
    let s = storage_accounting(&reg, SHAPE, 2).unwrap();
    assert_eq!((s.erased_concepts, s.groups), (30, 3));
    assert_eq!(s.params_per_module, 2 * (16 * 5 + 5 * 32));
    assert_eq!(s.params_conceptwise, 10 * s.params_groupwise);
    assert_eq!(s.ratio, 10.0);
}

#[test]
fn one_group_ratio_is_the_concept_count() {
    let s = storage_accounting(&registry(&[7]), SHAPE, 1).unwrap();
    assert_eq!(s.ratio, 7.0);
    assert_eq!(s.params_groupwise, s.params_per_module);
}

#[test]
fn uneven_groups_count_concepts_not_sizes() {
    let s = storage_accounting(&registry(&[1, 4, 10]), SHAPE, 2).unwrap();
    assert_eq!((s.erased_concepts, s.groups), (15, 3));
    assert_eq!(s.ratio, 5.0);
}

#[test]
fn no_erased_concepts_is_an_error() {
    let err = storage_accounting(&registry(&[0, 0]), SHAPE, 2).unwrap_err();
    assert!(
        err.to_string().contains("no group owns an erased concept"),
        "{err}"
    );
}

#[test]
fn suppression_is_relative_mass_reduction() {
    let mut s = MetricSummary {
        erased_error_before: 0.0,
        erased_error_after: 0.0,
        preserved_error_before: 0.0,
        preserved_error_after: 0.0,
        supertype_drift_before: 0.0,
        supertype_drift_after: 0.0,
        masked_attention_before: 0.4,
        masked_attention_after: 0.1,
    };
    assert!((s.suppression() - 0.75).abs() < 1e-15);
    s.masked_attention_before = 0.0;
    assert_eq!(s.suppression(), 0.0);
}

#[test]
fn identical_models_score_identically() {
    let cfg = WorldConfig::default();
    let reg = ConceptRegistry::from_config(&RegistryConfig::default()).unwrap();
    let world = World::build(&cfg, &reg).unwrap();
    let params = DenoiserParams::for_world(&world, 8, 3);
    let storage = storage_accounting(&reg, SHAPE, 2).unwrap();
    let r = erasure_metrics(
        ModelView::plain(&params),
        ModelView::plain(&params),
        &world,
        1,
        2,
        &storage,
    )
    .unwrap();
    assert_eq!(
        (r.erased.len(), r.retained.len(), r.supertypes.len()),
        (30, 6, 3)
    );
    for m in r.erased.iter().chain(&r.retained).chain(&r.supertypes) {
        assert_eq!(m.error_before, m.error_after, "{}", m.concept_id);
        assert_eq!(m.masked_attention_before, m.masked_attention_after);
    }
    assert!(r.erased.iter().all(|m| m.masked_attention_before.is_some()));
    assert!(r
        .supertypes
        .iter()
        .all(|m| m.masked_attention_before.is_none()));
    assert_eq!(r.summary.suppression(), 0.0);
    assert_eq!(r.params_conceptwise, 10 * r.params_groupwise);
}

#[test]
fn routing_picks_the_owning_group() {
    let reg = ConceptRegistry::from_config(&RegistryConfig::default()).unwrap();
    let world = World::build(&WorldConfig::default(), &reg).unwrap();
    let params = DenoiserParams::for_world(&world, 8, 3);
    let groups = declared_groups(&reg);
    let adapters: Vec<[SuploraAdapter; 2]> = groups
        .iter()
        .map(|g| {
            Layer::BOTH.map(|layer| {
                let mut ad =
                    init_baseline(Variant::VanillaLora, 32, 8, 2, g.group_id as u64, "t").unwrap();
                ad.group_id = g.group_id;
                ad.layer = layer;
                ad
            })
        })
        .collect();
    let routed = ModelView::routed(&params, &groups, &adapters);
    for g in &groups {
        let family = reg.get(&g.supertype).unwrap();
        let retained = reg
            .concepts
            .iter()
            .find(|c| c.kind == ConceptKind::Retained && c.domain == family.id)
            .unwrap();
        for id in [
            g.members[0].as_str(),
            g.supertype.as_str(),
            retained.id.as_str(),
        ] {
            let picked = routed.adapters_for(id, &reg).unwrap();
            assert_eq!(picked.len(), 2, "{id}");
            assert!(picked.iter().all(|a| a.group_id == g.group_id), "{id}");
        }
    }
    assert!(routed.adapters_for("bagel", &reg).unwrap().is_empty());
    assert!(ModelView::plain(&params)
        .adapters_for("macaw", &reg)
        .unwrap()
        .is_empty());
    assert!(routed.adapters_for("nope", &reg).is_err());
}

#[test]
fn masked_attention_is_a_probability_mass() {
    let cfg = WorldConfig::default();
    let reg = ConceptRegistry::from_config(&RegistryConfig::default()).unwrap();
    let world = World::build(&cfg, &reg).unwrap();
    let params = DenoiserParams::for_world(&world, 8, 3);
    let m = ModelView::plain(&params)
        .masked_attention(&world, "macaw", 5)
        .unwrap();
    assert!((0.0..=1.0).contains(&m), "{m}");
    assert!(ModelView::plain(&params)
        .masked_attention(&world, "nope", 5)
        .is_err());
}
