//! Seeded synthetic attribute world.
//!
//! Every entity is a tuple of `K` attribute values. Each value has a frozen
//! unit word token; a caption token is the scaled sum of the tuple's word
//! tokens and the caption embedding is `prompt_text(caption_token)`. The
//! image embedding of the same tuple is a distorted, shifted and noised copy
//! of its full caption embedding, so the two modalities are related but not
//! aligned. With probability `caption_collision_rate` a training caption
//! omits one attribute, which makes it coincide with the captions of
//! neighbouring tuples.
//!
//! Evaluation queries take a reference tuple, change one attribute, and use
//! the new value's word token as the condition. Targets are all gallery
//! entities with the edited tuple.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoders::{Composer, ComposerSpec};
use crate::error::{Error, Result};
use crate::numerics::{self, Tensor};
use crate::retrieval::{EvalTask, Gallery, Query};
use crate::rng::{derive_seed, rng_from, DetRng};
use crate::trainer::PairDataset;

fn d_attributes() -> usize {
    3
}
fn d_values() -> usize {
    8
}
fn d_dim() -> usize {
    32
}
fn d_noise() -> f32 {
    0.05
}
fn d_train() -> usize {
    4096
}
fn d_queries() -> usize {
    200
}
fn d_gallery() -> usize {
    1000
}
fn d_collision() -> f32 {
    0.1
}
fn d_gap() -> f32 {
    0.2
}
fn d_distortion() -> f32 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    #[serde(default = "d_attributes")]
    pub n_attributes: usize,
    #[serde(default = "d_values")]
    pub n_values: usize,
    #[serde(default = "d_dim")]
    pub dim: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_noise")]
    pub noise_scale: f32,
    #[serde(default = "d_train")]
    pub n_train_pairs: usize,
    #[serde(default = "d_queries")]
    pub n_eval_queries: usize,
    #[serde(default = "d_gallery")]
    pub gallery_size: usize,
    /// Fraction of training captions that omit one attribute.
    #[serde(default = "d_collision")]
    pub caption_collision_rate: f32,
    /// Norm of the constant offset added to every image embedding.
    #[serde(default = "d_gap")]
    pub gap: f32,
    /// Scale of the random linear distortion applied to image embeddings.
    #[serde(default = "d_distortion")]
    pub distortion: f32,
    /// Composer seed; derived from `seed` when absent.
    #[serde(default)]
    pub composer_seed: Option<u64>,
    #[serde(default)]
    pub composer_hidden: Option<usize>,
}

impl Default for WorldSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |name, detail: &str| Err(Error::param(name, detail.to_string()));
        if self.n_attributes < 2 {
            return bad("n_attributes", "must be >= 2");
        }
        if self.n_values < 2 {
            return bad("n_values", "must be >= 2");
        }
        if self.dim == 0 {
            return bad("dim", "must be >= 1");
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return bad("noise_scale", "must be finite and >= 0");
        }
        if self.n_eval_queries == 0 {
            return bad("n_eval_queries", "must be >= 1");
        }
        if self.gallery_size < self.n_eval_queries {
            return bad("gallery_size", "must be >= n_eval_queries");
        }
        if !(0.0..=1.0).contains(&self.caption_collision_rate) {
            return bad("caption_collision_rate", "must lie in [0, 1]");
        }
        if !(self.gap >= 0.0) || !self.gap.is_finite() {
            return bad("gap", "must be finite and >= 0");
        }
        if !(self.distortion >= 0.0) || !self.distortion.is_finite() {
            return bad("distortion", "must be finite and >= 0");
        }
        Ok(())
    }

    pub fn composer_spec(&self) -> ComposerSpec {
        ComposerSpec {
            dim: self.dim,
            seed: self.composer_seed.unwrap_or_else(|| derive_seed(self.seed, "composer-seed")),
            hidden: self.composer_hidden,
        }
    }

    /// Number of distinct tuples, saturating.
    pub fn tuple_count(&self) -> usize {
        (0..self.n_attributes).fold(1usize, |acc, _| acc.saturating_mul(self.n_values))
    }
}

pub type Tuple = Vec<usize>;

/// One evaluation query with its ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub reference_id: String,
    pub condition_id: String,
    pub target_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryTruth {
    pub reference: Tuple,
    pub attribute: usize,
    pub value: usize,
    pub edited: Tuple,
}

/// Tuple-level metadata for one training pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub id: String,
    pub tuple: Tuple,
    /// Attribute left out of the caption, if any.
    pub dropped: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct World {
    pub spec: WorldSpec,
    pub composer: Composer,
    /// `[attribute][value]` unit word tokens.
    pub word_tokens: Vec<Vec<Tensor>>,
    pub train_ids: Vec<String>,
    pub train_meta: Vec<TrainMeta>,
    pub train: PairDataset,
    pub gallery: Gallery,
    pub gallery_tuples: Vec<Tuple>,
    pub reference_ids: Vec<String>,
    pub references: Tensor,
    pub condition_ids: Vec<String>,
    pub conditions: Tensor,
    pub queries: Vec<QueryRecord>,
    pub truth: Vec<QueryTruth>,
}

struct Projection {
    distortion: Tensor,
    offset: Vec<f32>,
}

fn gaussian(rng: &mut DetRng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

fn unit(v: Vec<f32>) -> Result<Vec<f32>> {
    let n = v.len();
    Ok(numerics::l2_normalize_rows(&Tensor::matrix(1, n, v)?)?.into_data())
}

struct Builder<'a> {
    spec: &'a WorldSpec,
    composer: &'a Composer,
    words: Vec<Vec<Tensor>>,
    projection: Projection,
}

impl Builder<'_> {
    fn caption_token(&self, tuple: &[usize], dropped: Option<usize>) -> Tensor {
        let d = self.spec.dim;
        let mut acc = vec![0.0f32; d];
        let mut count = 0usize;
        for (k, &a) in tuple.iter().enumerate() {
            if Some(k) == dropped {
                continue;
            }
            count += 1;
            for (x, &w) in acc.iter_mut().zip(self.words[k][a].data()) {
                *x += w;
            }
        }
        let s = 1.0 / (count as f32).sqrt();
        Tensor::vector(acc.into_iter().map(|x| x * s).collect())
    }

    fn texts(&self, tuples: &[Tuple], dropped: &[Option<usize>]) -> Result<Tensor> {
        let d = self.spec.dim;
        let mut data = Vec::with_capacity(tuples.len() * d);
        for (t, &dr) in tuples.iter().zip(dropped) {
            data.extend_from_slice(self.caption_token(t, dr).data());
        }
        let tokens = Tensor::matrix(tuples.len(), d, data)?;
        if tuples.is_empty() {
            return Ok(tokens);
        }
        self.composer
            .synthetic_compose(crate::encoders::Template::PhotoOf, &[tokens])
    }

    fn images(&self, tuples: &[Tuple], rng: &mut DetRng) -> Result<Tensor> {
        let d = self.spec.dim;
        let clean = self.texts(tuples, &vec![None; tuples.len()])?;
        if tuples.is_empty() {
            return Ok(clean);
        }
        let distorted = numerics::matmul(&clean, &self.projection.distortion)?;
        let mut data = Vec::with_capacity(tuples.len() * d);
        for i in 0..tuples.len() {
            let noise = gaussian(rng, d);
            for j in 0..d {
                data.push(
                    clean.row(i)[j]
                        + distorted.row(i)[j]
                        + self.projection.offset[j]
                        + self.spec.noise_scale * noise[j],
                );
            }
        }
        numerics::l2_normalize_rows(&Tensor::matrix(tuples.len(), d, data)?)
    }
}

fn random_tuple(rng: &mut DetRng, k: usize, v: usize) -> Tuple {
    (0..k).map(|_| rng.random_range(0..v)).collect()
}

/// Changes attribute `attr` to a different value.
fn flip(rng: &mut DetRng, tuple: &[usize], attr: usize, v: usize) -> (Tuple, usize) {
    let mut out = tuple.to_vec();
    let value = (tuple[attr] + rng.random_range(1..v)) % v;
    out[attr] = value;
    (out, value)
}

fn stack_rows(rows: &[Tensor], d: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in rows {
        data.extend_from_slice(r.data());
    }
    Tensor::matrix(rows.len(), d, data)
}

pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let (k, v, d) = (spec.n_attributes, spec.n_values, spec.dim);
    let composer = Composer::new(spec.composer_spec())?;

    let mut token_rng = rng_from(derive_seed(spec.seed, "word-tokens"));
    let mut words = Vec::with_capacity(k);
    for _ in 0..k {
        let mut row = Vec::with_capacity(v);
        for _ in 0..v {
            row.push(Tensor::vector(unit(gaussian(&mut token_rng, d))?));
        }
        words.push(row);
    }

    let mut proj_rng = rng_from(derive_seed(spec.seed, "image-projection"));
    let g_scale = spec.distortion / (d as f32).sqrt();
    let distortion = Tensor::matrix(
        d,
        d,
        gaussian(&mut proj_rng, d * d).into_iter().map(|x| x * g_scale).collect(),
    )?;
    let offset: Vec<f32> = unit(gaussian(&mut proj_rng, d))?
        .into_iter()
        .map(|x| x * spec.gap)
        .collect();
    let b = Builder {
        spec,
        composer: &composer,
        words,
        projection: Projection { distortion, offset },
    };

    // Training pairs: distinct tuples when the space allows it.
    let mut train_rng = rng_from(derive_seed(spec.seed, "train"));
    let n = spec.n_train_pairs;
    let mut tuples: Vec<Tuple> = Vec::with_capacity(n);
    if n <= spec.tuple_count() {
        let mut seen = HashSet::with_capacity(n);
        while tuples.len() < n {
            let t = random_tuple(&mut train_rng, k, v);
            if seen.insert(t.clone()) {
                tuples.push(t);
            }
        }
    } else {
        tuples.extend((0..n).map(|_| random_tuple(&mut train_rng, k, v)));
    }
    let dropped: Vec<Option<usize>> = (0..n)
        .map(|_| {
            let hit = train_rng.random::<f32>() < spec.caption_collision_rate;
            hit.then(|| train_rng.random_range(0..k))
        })
        .collect();
    let train_texts = b.texts(&tuples, &dropped)?;
    let train_images = b.images(&tuples, &mut train_rng)?;
    let train_ids: Vec<String> = (0..n).map(|i| format!("p{:06}", i)).collect();
    let train_meta = train_ids
        .iter()
        .zip(&tuples)
        .zip(&dropped)
        .map(|((id, t), &dr)| TrainMeta {
            id: id.clone(),
            tuple: t.clone(),
            dropped: dr,
        })
        .collect();
    let train = PairDataset::new(
        if n == 0 { Tensor::zeros(vec![0, d]) } else { train_images },
        if n == 0 { Tensor::zeros(vec![0, d]) } else { train_texts },
    )?;

    // Evaluation.
    let mut eval_rng = rng_from(derive_seed(spec.seed, "eval"));
    let nq = spec.n_eval_queries;
    let mut truth = Vec::with_capacity(nq);
    for _ in 0..nq {
        let reference = random_tuple(&mut eval_rng, k, v);
        let attribute = eval_rng.random_range(0..k);
        let (edited, value) = flip(&mut eval_rng, &reference, attribute, v);
        truth.push(QueryTruth {
            reference,
            attribute,
            value,
            edited,
        });
    }
    // Targets first, then hard negatives while room remains, then random fill.
    let mut gallery_tuples: Vec<Tuple> = truth.iter().map(|t| t.edited.clone()).collect();
    let mut hard: Vec<Tuple> = Vec::new();
    for t in &truth {
        hard.push(t.reference.clone());
        for _ in 0..2 {
            let attr = eval_rng.random_range(0..k);
            hard.push(flip(&mut eval_rng, &t.reference, attr, v).0);
        }
    }
    let room = spec.gallery_size - gallery_tuples.len();
    gallery_tuples.extend(hard.into_iter().take(room));
    while gallery_tuples.len() < spec.gallery_size {
        gallery_tuples.push(random_tuple(&mut eval_rng, k, v));
    }
    gallery_tuples.shuffle(&mut eval_rng);
    let gallery_ids: Vec<String> = (0..gallery_tuples.len()).map(|i| format!("g{:06}", i)).collect();
    let gallery_vecs = b.images(&gallery_tuples, &mut eval_rng)?;
    let gallery = Gallery::new(gallery_ids.clone(), gallery_vecs)?;

    let ref_tuples: Vec<Tuple> = truth.iter().map(|t| t.reference.clone()).collect();
    let references = b.images(&ref_tuples, &mut eval_rng)?;
    let conditions = stack_rows(
        &truth.iter().map(|t| b.words[t.attribute][t.value].clone()).collect::<Vec<_>>(),
        d,
    )?;
    let queries: Vec<QueryRecord> = truth
        .iter()
        .enumerate()
        .map(|(i, t)| QueryRecord {
            query_id: format!("q{:05}", i),
            reference_id: format!("r{:05}", i),
            condition_id: format!("c{:05}", i),
            target_ids: gallery_tuples
                .iter()
                .zip(&gallery_ids)
                .filter(|(g, _)| **g == t.edited)
                .map(|(_, id)| id.clone())
                .collect(),
        })
        .collect();

    Ok(World {
        spec: spec.clone(),
        word_tokens: b.words,
        composer,
        train_ids,
        train_meta,
        train,
        gallery,
        gallery_tuples,
        reference_ids: (0..nq).map(|i| format!("r{:05}", i)).collect(),
        references,
        condition_ids: (0..nq).map(|i| format!("c{:05}", i)).collect(),
        conditions,
        queries,
        truth,
    })
}

impl World {
    pub fn eval_task(&self) -> Result<EvalTask> {
        build_task(
            self.gallery.clone(),
            &self.reference_ids,
            &self.references,
            &self.condition_ids,
            &self.conditions,
            &self.queries,
        )
    }
}

/// Resolves query records against reference and condition tables.
pub fn build_task(
    gallery: Gallery,
    reference_ids: &[String],
    references: &Tensor,
    condition_ids: &[String],
    conditions: &Tensor,
    records: &[QueryRecord],
) -> Result<EvalTask> {
    let lookup = |ids: &[String], table: &Tensor, id: &str| -> Result<Tensor> {
        let i = ids
            .iter()
            .position(|x| x == id)
            .ok_or_else(|| Error::Lookup(id.to_string()))?;
        Ok(Tensor::vector(table.row(i).to_vec()))
    };
    let queries = records
        .iter()
        .map(|r| {
            Query::new(
                r.query_id.clone(),
                lookup(reference_ids, references, &r.reference_id)?,
                lookup(condition_ids, conditions, &r.condition_id)?,
                r.target_ids.clone(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    EvalTask::new(gallery, queries)
}

/// Writes the world in the on-disk formats; see [`crate::io::WorldFiles`].
pub fn export_world(world: &World, dir: &Path) -> Result<crate::io::WorldFiles> {
    crate::io::write_world(world, dir)
}
