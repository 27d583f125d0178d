//! The six pipeline stages and the files they exchange inside a workdir.
//!
//! | stage       | reads                              | writes                                   |
//! |-------------|------------------------------------|------------------------------------------|
//! | `pretrain`  | config                             | pretrained checkpoint, `world.json`, log |
//! | `hierarchy` | config                             | hierarchy JSON                           |
//! | `erase`     | pretrained, hierarchy              | `2K` adapters, their init dumps, CSV logs |
//! | `fuse`      | pretrained, hierarchy, adapters    | fused checkpoint, fusion report          |
//! | `eval`      | pretrained, hierarchy, adapters, fused | erasure report                       |
//! | `checks`    | nothing                            | checks report                            |

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::{SuploraAdapter, Variant};
use crate::checkpoint::{
    adapter_checkpoint, adapter_from_checkpoint, denoiser_checkpoint, denoiser_from_checkpoint,
    Checkpoint,
};
use crate::checks::SuiteResult;
use crate::config::{HierarchyMode, RunConfig};
use crate::denoiser::{pretrain, DenoiserParams, PretrainConfig};
use crate::erasure::{erase_group, init_group, GroupErasureReport};
use crate::error::{Error, Result};
use crate::eval::{
    erasure_metrics, storage_accounting, AdapterShape, ErasureReport, ModelView, StorageReport,
};
use crate::fusion::{fuse_model, FusionReport};
use crate::hierarchy::{
    assign_supertypes, build_groups, group_similarity, ConceptGroup, ConceptKind, Hierarchy,
};
use crate::world::World;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldManifest {
    pub config_hash: String,
    pub seed: u64,
    pub embed_dim: usize,
    pub image_side: usize,
    pub timesteps: usize,
    pub concepts: Vec<WorldConcept>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConcept {
    pub id: String,
    pub kind: ConceptKind,
    pub domain: String,
    pub mask_pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub steps: usize,
    pub final_loss: f64,
    /// Mean loss over the last 1000 steps (or all of them).
    pub trailing_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionSummary {
    pub groups: usize,
    pub key: FusionReport,
    pub value: FusionReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub config_hash: String,
    pub storage: StorageReport,
    /// Pretrained model against the fused model.
    pub fused: ErasureReport,
    /// Pretrained model against per-group adapter routing.
    pub routed: ErasureReport,
}

pub struct Pipeline {
    pub config: RunConfig,
    pub workdir: PathBuf,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require(path: &Path, stage: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingInput {
            path: path.to_path_buf(),
            stage,
        })
    }
}

impl Pipeline {
    pub fn new(config: RunConfig, workdir: impl Into<PathBuf>) -> Self {
        Self {
            config,
            workdir: workdir.into(),
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.workdir.join(rel)
    }

    pub fn pretrained_path(&self) -> PathBuf {
        self.path(&self.config.paths.pretrained)
    }

    pub fn hierarchy_path(&self) -> PathBuf {
        self.path(&self.config.paths.hierarchy)
    }

    pub fn fused_path(&self) -> PathBuf {
        self.path(&self.config.paths.fused)
    }

    pub fn report_path(&self, name: &str) -> PathBuf {
        self.path(&self.config.paths.reports_dir).join(name)
    }

    pub fn log_path(&self, name: &str) -> PathBuf {
        self.path(&self.config.paths.logs_dir).join(name)
    }

    pub fn adapter_path(&self, group_id: usize, layer: crate::adapter::Layer) -> PathBuf {
        self.path(&self.config.paths.adapters_dir)
            .join(format!("group{group_id}_{}.supl", layer.name()))
    }

    /// The adapter as initialized, before training.
    pub fn init_adapter_path(&self, group_id: usize, layer: crate::adapter::Layer) -> PathBuf {
        self.path(&self.config.paths.adapters_dir)
            .join("init")
            .join(format!("group{group_id}_{}.supl", layer.name()))
    }

    pub fn world(&self) -> Result<World> {
        let registry = crate::hierarchy::ConceptRegistry::from_config(&self.config.registry)?;
        World::build(&self.config.world, &registry)
    }

    fn hash(&self) -> String {
        self.config.hash()
    }

    fn check_hash(&self, found: &str, what: &Path) -> Result<()> {
        if found == self.hash() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "{} was produced by a different configuration; rerun the earlier stages",
                what.display()
            )))
        }
    }

    pub fn pretrain(&self) -> Result<PretrainSummary> {
        let world = self.world()?;
        let seed = self.config.world.seed;
        let mut params = DenoiserParams::for_world(&world, self.config.denoiser.d_model, seed);
        let cfg = PretrainConfig {
            steps: self.config.denoiser.steps,
            lr: self.config.denoiser.lr,
            batch: self.config.denoiser.batch,
            seed,
        };
        let report = pretrain(&mut params, &world, &cfg)?;
        denoiser_checkpoint(&params, &self.hash(), seed).write(&self.pretrained_path())?;

        let manifest = WorldManifest {
            config_hash: self.hash(),
            seed,
            embed_dim: world.embed_dim(),
            image_side: self.config.world.image_side,
            timesteps: world.schedule.steps(),
            concepts: world
                .registry
                .concepts
                .iter()
                .map(|c| {
                    let a = world.assets(&c.id).expect("registry concept");
                    WorldConcept {
                        id: c.id.clone(),
                        kind: c.kind,
                        domain: c.domain.clone(),
                        mask_pixels: a
                            .mask
                            .as_ref()
                            .map_or(0, |m| m.as_slice().iter().sum::<f64>() as usize),
                    }
                })
                .collect(),
        };
        write_json(&self.path("world.json"), &manifest)?;

        let mut log = String::from("step,loss\n");
        for (i, l) in report.losses.iter().enumerate() {
            log.push_str(&format!("{},{l}\n", i + 1));
        }
        write_text(&self.log_path("pretrain.csv"), &log)?;
        Ok(PretrainSummary {
            steps: report.losses.len(),
            final_loss: report.losses.last().copied().unwrap_or(f64::NAN),
            trailing_loss: report.trailing_mean(1000),
        })
    }

    pub fn load_pretrained(&self) -> Result<DenoiserParams> {
        let path = self.pretrained_path();
        require(&path, "pretrain")?;
        let ck = Checkpoint::read(&path)?;
        self.check_hash(&ck.config_hash, &path)?;
        denoiser_from_checkpoint(&ck)
    }

    /// Groups the erased concepts, by clustering their centroids or as
    /// listed in the config, and names each group's supertype.
    pub fn build_hierarchy(&self, world: &World) -> Result<Hierarchy> {
        let h = &self.config.hierarchy;
        let groups: Vec<ConceptGroup> = match h.mode {
            HierarchyMode::Cluster => {
                let erased: Vec<_> = world
                    .registry
                    .of_kind(ConceptKind::Erased)
                    .cloned()
                    .collect();
                let raw = build_groups(&erased, &world.centroids(), h.threshold)?;
                let mut names = BTreeMap::new();
                for (k, v) in &h.names {
                    let idx = k.parse::<usize>().map_err(|_| {
                        Error::Config(format!("hierarchy.names key `{k}` is not a group index"))
                    })?;
                    names.insert(idx, v.clone());
                }
                let mut registry = world.registry.clone();
                assign_supertypes(&raw, &names, &mut registry)?
            }
            HierarchyMode::Explicit => h
                .groups
                .iter()
                .enumerate()
                .map(|(group_id, g)| {
                    let mut members = g.members.clone();
                    members.sort();
                    ConceptGroup {
                        group_id,
                        members,
                        supertype: g.supertype.clone(),
                    }
                })
                .collect(),
        };
        for g in &groups {
            let s = world.registry.get(&g.supertype).map_err(|_| {
                Error::Config(format!(
                    "group {} names supertype `{}`, which the registry lacks",
                    g.group_id, g.supertype
                ))
            })?;
            if s.kind != ConceptKind::Supertype {
                return Err(Error::Config(format!(
                    "`{}` is not a supertype",
                    g.supertype
                )));
            }
            for m in &g.members {
                if world.registry.get(m)?.kind != ConceptKind::Erased {
                    return Err(Error::Config(format!(
                        "group member `{m}` is not an erased concept"
                    )));
                }
            }
        }
        let (intra, inter) = group_similarity(&groups, &world.centroids())?;
        Ok(Hierarchy {
            config_hash: self.hash(),
            groups,
            intra_similarity: intra,
            inter_similarity: inter,
        })
    }

    pub fn hierarchy(&self) -> Result<Hierarchy> {
        let world = self.world()?;
        let h = self.build_hierarchy(&world)?;
        write_json(&self.hierarchy_path(), &h)?;
        Ok(h)
    }

    pub fn load_hierarchy(&self) -> Result<Hierarchy> {
        let path = self.hierarchy_path();
        require(&path, "hierarchy")?;
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let h: Hierarchy = serde_json::from_str(&text)?;
        self.check_hash(&h.config_hash, &path)?;
        Ok(h)
    }

    pub fn erase(&self) -> Result<Vec<GroupErasureReport>> {
        let params = self.load_pretrained()?;
        let hierarchy = self.load_hierarchy()?;
        let world = self.world()?;
        let seed = self.config.world.seed;
        let run = &self.config;
        let mut reports = Vec::new();
        for g in &hierarchy.groups {
            let init = init_group(
                &world,
                g,
                Variant::Suplora,
                run.suplora.r,
                run.suplora.r_s,
                params.d_model(),
                run.erasure_seed(),
            )?;
            for ad in &init.adapters {
                adapter_checkpoint(ad, &self.hash(), seed)
                    .write(&self.init_adapter_path(ad.group_id, ad.layer))?;
            }
            let (pair, report) = erase_group(
                &params,
                init.adapters,
                g,
                &world,
                &run.erasure,
                run.erasure_seed(),
                run.eval.probe_seed,
                &init.basis,
                &init.samples,
            )?;
            for ad in &pair {
                adapter_checkpoint(ad, &self.hash(), seed)
                    .write(&self.adapter_path(ad.group_id, ad.layer))?;
            }
            write_text(
                &self.log_path(&format!("group{}.csv", report.group_id)),
                &report.csv(),
            )?;
            reports.push(report);
        }
        write_json(&self.report_path("erasure_training.json"), &reports)?;
        if let Some(r) = reports.iter().find(|r| r.diverged_at.is_some()) {
            return Err(Error::Diverged(format!(
                "group {} stopped at step {}; its adapters hold the last finite values",
                r.group_id,
                r.diverged_at.unwrap_or(0)
            )));
        }
        Ok(reports)
    }

    /// Key and value adapters of every group in the hierarchy.
    pub fn load_adapters(&self, groups: &[ConceptGroup]) -> Result<Vec<[SuploraAdapter; 2]>> {
        let mut out = Vec::with_capacity(groups.len());
        for g in groups {
            let mut pair = Vec::with_capacity(2);
            for layer in crate::adapter::Layer::BOTH {
                let path = self.adapter_path(g.group_id, layer);
                require(&path, "erase")?;
                let ck = Checkpoint::read(&path)?;
                self.check_hash(&ck.config_hash, &path)?;
                let ad = adapter_from_checkpoint(&ck)?;
                if ad.group_id != g.group_id || ad.layer != layer {
                    return Err(Error::Checkpoint {
                        path,
                        reason: "group or layer does not match the file name".into(),
                    });
                }
                pair.push(ad);
            }
            out.push(pair.try_into().expect("two layers"));
        }
        Ok(out)
    }

    pub fn fuse(&self) -> Result<FusionSummary> {
        let params = self.load_pretrained()?;
        let hierarchy = self.load_hierarchy()?;
        let adapters = self.load_adapters(&hierarchy.groups)?;
        let world = self.world()?;
        let (fused, [key, value]) = fuse_model(
            &params,
            &adapters,
            &world,
            &hierarchy.groups,
            &self.config.fusion,
        )?;
        denoiser_checkpoint(&fused, &self.hash(), self.config.world.seed)
            .write(&self.fused_path())?;
        let summary = FusionSummary {
            groups: adapters.len(),
            key,
            value,
        };
        write_json(&self.report_path("fusion.json"), &summary)?;
        Ok(summary)
    }

    pub fn load_fused(&self) -> Result<DenoiserParams> {
        let path = self.fused_path();
        require(&path, "fuse")?;
        let ck = Checkpoint::read(&path)?;
        self.check_hash(&ck.config_hash, &path)?;
        denoiser_from_checkpoint(&ck)
    }

    pub fn storage(&self, world: &World) -> Result<StorageReport> {
        storage_accounting(
            &world.registry,
            AdapterShape {
                d_out: self.config.denoiser.d_model,
                d_in: world.embed_dim(),
                r: self.config.suplora.r,
            },
            2,
        )
    }

    pub fn eval(&self) -> Result<EvalSummary> {
        let params = self.load_pretrained()?;
        let hierarchy = self.load_hierarchy()?;
        let adapters = self.load_adapters(&hierarchy.groups)?;
        let fused = self.load_fused()?;
        let world = self.world()?;
        let storage = self.storage(&world)?;
        let e = &self.config.eval;
        let before = ModelView::plain(&params);
        let summary = EvalSummary {
            config_hash: self.hash(),
            fused: erasure_metrics(
                before,
                ModelView::plain(&fused),
                &world,
                e.sample_seed,
                e.probe_seed,
                &storage,
            )?,
            routed: erasure_metrics(
                before,
                ModelView::routed(&params, &hierarchy.groups, &adapters),
                &world,
                e.sample_seed,
                e.probe_seed,
                &storage,
            )?,
            storage,
        };
        write_json(&self.report_path("erasure.json"), &summary)?;
        if e.dump_images {
            self.dump_images(&world, &params, &fused)?;
        }
        Ok(summary)
    }

    fn dump_images(
        &self,
        world: &World,
        before: &DenoiserParams,
        after: &DenoiserParams,
    ) -> Result<()> {
        let dir = self.path(&self.config.paths.reports_dir).join("images");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let side = self.config.world.image_side;
        for c in &world.registry.concepts {
            if c.kind == ConceptKind::General {
                continue;
            }
            for (tag, params) in [("before", before), ("after", after)] {
                let px = ModelView::plain(params).sample_concept(
                    world,
                    &c.id,
                    self.config.eval.sample_seed,
                )?;
                let img = crate::numerics::Matrix::from_vec(side, side, px)?;
                crate::pgm::write(&img, &dir.join(format!("{}_{tag}.pgm", c.id)))?;
            }
        }
        Ok(())
    }

    pub fn checks(&self) -> Result<Vec<SuiteResult>> {
        let suites = crate::checks::run_all(self.config.world.seed)?;
        write_json(&self.report_path("checks.json"), &suites)?;
        Ok(suites)
    }

    /// Every stage in order.
    pub fn run_all(&self) -> Result<EvalSummary> {
        self.pretrain()?;
        self.hierarchy()?;
        self.erase()?;
        self.fuse()?;
        self.eval()
    }
}
