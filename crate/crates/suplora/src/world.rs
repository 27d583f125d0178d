//! The synthetic world: concept embeddings, description matrices, target
//! images with analytic masks, and the forward noising process.
//!
//! Embedding geometry is laid out on an orthonormal frame of ℝᵈ drawn once
//! from the world seed:
//!
//! | frame columns            | role                                       |
//! |--------------------------|--------------------------------------------|
//! | `0..K`                   | one direction per supertype                |
//! | `K`                      | the null (padding) token                   |
//! | next `K · block` columns | per-group blocks for erased-concept detail |
//! | the rest                 | retained and general concepts              |
//!
//! A subtype centroid is `normalize(s_j + offset · u)` where `u` is a unit
//! direction drawn from the group's block (erased) or from the shared rest
//! (retained). Erased directions in a group share the first block column
//! with weight `group_shift`.

use std::collections::BTreeMap;

use crate::config::WorldConfig;
use crate::error::{Error, Result};
use crate::hierarchy::{Concept, ConceptKind, ConceptRegistry};
use crate::numerics::{axpy, dot, normalize, Matrix};
use crate::rng::{gaussian_vec, stream, unit_vec};
use rand::Rng;

/// Amplitude of the concept-specific blob.
const DELTA_AMPLITUDE: f64 = 0.5;
/// Pixels where the concept blob exceeds this form the mask.
pub const MASK_THRESHOLD: f64 = 0.05;

pub type Image = Matrix;

/// Linear β schedule and its cumulative products.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(beta_start: f64, beta_end: f64, steps: usize) -> Self {
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Self {
        let mut acc = 1.0;
        let alphas_bar = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Self { betas, alphas_bar }
    }

    pub fn from_config(cfg: &WorldConfig) -> Self {
        let b = &cfg.beta_schedule;
        Self::linear(b.beta_start, b.beta_end, cfg.timesteps)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// ᾱ_t for `1 ≤ t ≤ T`, and 1 for `t = 0`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alphas_bar[t - 1]
        }
    }
}

/// Everything the world knows about one concept.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptAssets {
    pub concept_id: String,
    pub kind: ConceptKind,
    /// Index of the owning supertype, `None` for general concepts.
    pub family: Option<usize>,
    pub centroid: Vec<f64>,
    /// `d × n_desc`, unit columns.
    pub descriptions: Matrix,
    pub target: Option<Image>,
    pub mask: Option<Image>,
}

/// Orthonormal frame the embeddings live on.
#[derive(Clone, Debug, PartialEq)]
struct Frame {
    cols: Vec<Vec<f64>>,
    families: usize,
    block: usize,
}

impl Frame {
    fn new(cfg: &WorldConfig, families: usize) -> Result<Self> {
        let d = cfg.embed_dim;
        let needed = families + 1 + families * cfg.group_block_dim + 1;
        if d < needed {
            return Err(Error::Config(format!(
                "embed_dim {d} cannot host {families} supertypes (needs {needed})"
            )));
        }
        let mut rng = stream(cfg.seed, "world/frame");
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
        while cols.len() < d {
            let mut v = gaussian_vec(&mut rng, d);
            for _ in 0..2 {
                for c in &cols {
                    let p = dot(&v, c);
                    axpy(&mut v, -p, c);
                }
            }
            if normalize(&mut v) > 1e-8 {
                cols.push(v);
            }
        }
        Ok(Self {
            cols,
            families,
            block: cfg.group_block_dim,
        })
    }

    fn supertype(&self, j: usize) -> &[f64] {
        &self.cols[j]
    }

    fn null(&self) -> &[f64] {
        &self.cols[self.families]
    }

    fn block(&self, j: usize) -> &[Vec<f64>] {
        let start = self.families + 1 + j * self.block;
        &self.cols[start..start + self.block]
    }

    fn rest(&self) -> &[Vec<f64>] {
        &self.cols[self.families + 1 + self.families * self.block..]
    }
}

fn combine(basis: &[Vec<f64>], coeffs: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; basis[0].len()];
    for (b, c) in basis.iter().zip(coeffs) {
        axpy(&mut out, *c, b);
    }
    out
}

fn family_of(concept: &Concept, registry: &ConceptRegistry) -> Result<Option<usize>> {
    match concept.kind {
        ConceptKind::General => Ok(None),
        ConceptKind::Supertype => registry.supertype_index(&concept.id).map(Some),
        _ => registry.supertype_index(&concept.domain).map(Some),
    }
}

fn centroid_in(
    frame: &Frame,
    concept: &Concept,
    registry: &ConceptRegistry,
    cfg: &WorldConfig,
) -> Result<Vec<f64>> {
    let mut rng = stream(cfg.seed, &format!("world/embed/{}", concept.id));
    let family = family_of(concept, registry)?;
    let rest = frame.rest();
    let mut v = match (concept.kind, family) {
        (ConceptKind::Supertype, Some(j)) => frame.supertype(j).to_vec(),
        (ConceptKind::General, _) => combine(rest, &unit_vec(&mut rng, rest.len())),
        (kind, Some(j)) => {
            let mut u = if kind == ConceptKind::Erased {
                let block = frame.block(j);
                let mut u = combine(&block[1..], &unit_vec(&mut rng, block.len() - 1));
                axpy(&mut u, cfg.group_shift, &block[0]);
                u
            } else {
                combine(rest, &unit_vec(&mut rng, rest.len()))
            };
            normalize(&mut u);
            let mut c = frame.supertype(j).to_vec();
            axpy(&mut c, cfg.concept_offset, &u);
            c
        }
        (_, None) => unreachable!("subtypes always have a family"),
    };
    normalize(&mut v);
    Ok(v)
}

/// Unit centroid embedding of a concept; a pure function of the seed,
/// the concept id and the registry layout.
pub fn concept_embedding(
    concept: &Concept,
    cfg: &WorldConfig,
    registry: &ConceptRegistry,
) -> Result<Vec<f64>> {
    let frame = Frame::new(cfg, registry.supertypes().len())?;
    centroid_in(&frame, concept, registry, cfg)
}

fn descriptions_from(centroid: &[f64], concept_id: &str, cfg: &WorldConfig) -> Matrix {
    let d = centroid.len();
    let n = cfg.descriptions_per_concept;
    let mut rng = stream(cfg.seed, &format!("world/desc/{concept_id}"));
    let scale = cfg.desc_noise_sigma / (d as f64).sqrt();
    let mut m = Matrix::zeros(d, n);
    for j in 0..n {
        let noise = gaussian_vec(&mut rng, d);
        let mut col: Vec<f64> = centroid
            .iter()
            .zip(&noise)
            .map(|(c, e)| c + scale * e)
            .collect();
        normalize(&mut col);
        m.set_col(j, &col);
    }
    m
}

/// `d × n_desc` description embeddings: the centroid plus seeded Gaussian
/// noise of expected norm `desc_noise_sigma`, each column re-normalized.
pub fn description_matrix(
    concept: &Concept,
    cfg: &WorldConfig,
    registry: &ConceptRegistry,
) -> Result<Matrix> {
    let c = concept_embedding(concept, cfg, registry)?;
    Ok(descriptions_from(&c, &concept.id, cfg))
}

fn base_pattern(family: usize, families: usize, supertype_id: &str, cfg: &WorldConfig) -> Image {
    let side = cfg.image_side as f64;
    let scale = side / 8.0;
    let mut rng = stream(cfg.seed, &format!("world/base/{supertype_id}"));
    let mid = (side - 1.0) / 2.0;
    let cy = mid + rng.gen::<f64>() - 0.5;
    let cx = mid + rng.gen::<f64>() - 0.5;
    let frac = if families > 1 {
        family as f64 / (families - 1) as f64
    } else {
        0.0
    };
    let radius = (1.8 + 0.8 * frac) * scale;
    let width = 0.7 * scale;
    Matrix::from_fn(cfg.image_side, cfg.image_side, |y, x| {
        let r = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
        0.15 + 0.35 * (-(r - radius).powi(2) / (2.0 * width * width)).exp()
    })
}

fn delta_pattern(concept_id: &str, cfg: &WorldConfig) -> Image {
    let side = cfg.image_side as f64;
    let scale = side / 8.0;
    let mut rng = stream(cfg.seed, &format!("world/delta/{concept_id}"));
    let lo = 1.5 * scale;
    let span = (side - 2.0 * lo).max(0.0);
    let py = lo + span * rng.gen::<f64>();
    let px = lo + span * rng.gen::<f64>();
    let width = 1.3 * scale;
    Matrix::from_fn(cfg.image_side, cfg.image_side, |y, x| {
        let d2 = (y as f64 - py).powi(2) + (x as f64 - px).powi(2);
        DELTA_AMPLITUDE * (-d2 / (2.0 * width * width)).exp()
    })
}

/// Target image and mask: the supertype's ring pattern plus a
/// concept-specific blob. The mask is where the blob exceeds
/// [`MASK_THRESHOLD`], and the blob is cut to the mask, so the target equals
/// the base pattern outside it. Supertypes get the bare ring and an empty
/// mask.
pub fn render_target(
    concept: &Concept,
    cfg: &WorldConfig,
    registry: &ConceptRegistry,
) -> Result<(Image, Image)> {
    let family = family_of(concept, registry)?.ok_or_else(|| {
        Error::Config(format!(
            "general concept `{}` has no supertype pattern",
            concept.id
        ))
    })?;
    let families = registry.supertypes().len();
    let supertype = &registry.supertypes()[family].id;
    let base = base_pattern(family, families, supertype, cfg);
    let n = cfg.image_side;
    if concept.kind == ConceptKind::Supertype {
        return Ok((base, Matrix::zeros(n, n)));
    }
    let delta = delta_pattern(&concept.id, cfg);
    let mask = Matrix::from_fn(n, n, |i, j| {
        f64::from(u8::from(delta[(i, j)].abs() > MASK_THRESHOLD))
    });
    let target = Matrix::from_fn(n, n, |i, j| {
        (base[(i, j)] + mask[(i, j)] * delta[(i, j)]).clamp(0.0, 1.0)
    });
    Ok((target, mask))
}

/// The base pattern of the supertype owning `concept`.
pub fn base_image(
    concept: &Concept,
    cfg: &WorldConfig,
    registry: &ConceptRegistry,
) -> Result<Image> {
    let parent = registry.parent(&concept.id)?.ok_or_else(|| {
        Error::Config(format!(
            "general concept `{}` has no base pattern",
            concept.id
        ))
    })?;
    render_target(parent, cfg, registry).map(|(b, _)| b)
}

/// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · eps`
pub fn noise_image(
    x0: &[f64],
    t: usize,
    eps: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if t == 0 || t > schedule.steps() {
        return Err(Error::Config(format!(
            "timestep {t} outside 1..={}",
            schedule.steps()
        )));
    }
    if x0.len() != eps.len() {
        return Err(Error::Shape(format!(
            "x0 has {} pixels, eps {}",
            x0.len(),
            eps.len()
        )));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// A fully materialized world.
#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    pub registry: ConceptRegistry,
    pub schedule: NoiseSchedule,
    pub null_embedding: Vec<f64>,
    assets: BTreeMap<String, ConceptAssets>,
}

impl World {
    pub fn build(config: &WorldConfig, registry: &ConceptRegistry) -> Result<Self> {
        let families = registry.supertypes().len();
        let frame = Frame::new(config, families)?;
        let mut assets = BTreeMap::new();
        for c in &registry.concepts {
            let centroid = centroid_in(&frame, c, registry, config)?;
            let descriptions = descriptions_from(&centroid, &c.id, config);
            let (target, mask) = match c.kind {
                ConceptKind::General => (None, None),
                _ => {
                    let (t, m) = render_target(c, config, registry)?;
                    (Some(t), Some(m))
                }
            };
            assets.insert(
                c.id.clone(),
                ConceptAssets {
                    concept_id: c.id.clone(),
                    kind: c.kind,
                    family: family_of(c, registry)?,
                    centroid,
                    descriptions,
                    target,
                    mask,
                },
            );
        }
        Ok(Self {
            config: config.clone(),
            registry: registry.clone(),
            schedule: NoiseSchedule::from_config(config),
            null_embedding: frame.null().to_vec(),
            assets,
        })
    }

    pub fn assets(&self, id: &str) -> Result<&ConceptAssets> {
        self.assets
            .get(id)
            .ok_or_else(|| Error::UnknownConcept(id.to_string()))
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn n_pixels(&self) -> usize {
        self.config.image_side * self.config.image_side
    }

    /// Two-token prompt: the given embedding followed by the null token.
    pub fn prompt(&self, embedding: &[f64]) -> Matrix {
        Matrix::from_cols(&[embedding.to_vec(), self.null_embedding.clone()])
            .expect("equal lengths")
    }

    /// Centroid embeddings of every concept, keyed by id.
    pub fn centroids(&self) -> BTreeMap<String, Vec<f64>> {
        self.assets
            .iter()
            .map(|(k, a)| (k.clone(), a.centroid.clone()))
            .collect()
    }

    /// Concepts that have a target image, in registry order.
    pub fn trainable(&self) -> Vec<&ConceptAssets> {
        self.registry
            .concepts
            .iter()
            .filter(|c| c.kind != ConceptKind::General)
            .map(|c| &self.assets[&c.id])
            .collect()
    }

    /// The matrix whose principal directions define a supertype subspace:
    /// the supertype's descriptions, followed by as many copies of the null
    /// token since every prompt carries it alongside the concept token.
    pub fn supertype_samples(&self, supertype_id: &str) -> Result<Matrix> {
        let a = self.assets(supertype_id)?;
        let n = a.descriptions.cols();
        let nulls = Matrix::from_cols(&vec![self.null_embedding.clone(); n])?;
        Matrix::hcat(&[&a.descriptions, &nulls])
    }

    /// Description columns of all listed concepts, side by side.
    pub fn stacked_descriptions(&self, ids: &[String]) -> Result<Matrix> {
        let parts: Vec<&Matrix> = ids
            .iter()
            .map(|id| self.assets(id).map(|a| &a.descriptions))
            .collect::<Result<_>>()?;
        Matrix::hcat(&parts)
    }
}
