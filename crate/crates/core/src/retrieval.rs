//! Query composition, exhaustive cosine ranking, and R@K / mAP@K.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::encoders::{Composer, Template};
use crate::error::{Error, Result};
use crate::mappers::{map_pseudo_token, map_supplement_token, MapperPair};
use crate::numerics::{self, Tensor};

const UNIT_TOL: f32 = 1e-4;
/// Below this angle slerp degenerates to the normalized average.
pub const SLERP_MIN_ANGLE: f64 = 1e-6;

fn check_unit(what: &str, v: &[f32]) -> Result<()> {
    let n = numerics::norm(v);
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::Contract(format!("{} has norm {}, expected 1", what, n)));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub query_id: String,
    pub reference: Tensor,
    pub condition: Tensor,
    pub target_ids: Vec<String>,
}

impl Query {
    pub fn new(
        query_id: impl Into<String>,
        reference: Tensor,
        condition: Tensor,
        target_ids: Vec<String>,
    ) -> Result<Self> {
        let query_id = query_id.into();
        if reference.shape().len() != 1 || reference.shape() != condition.shape() {
            return Err(Error::shape(
                "query",
                format!(
                    "reference {:?}, condition {:?}",
                    reference.shape(),
                    condition.shape()
                ),
            ));
        }
        check_unit("reference embedding", reference.data())?;
        check_unit("condition embedding", condition.data())?;
        if target_ids.is_empty() {
            return Err(Error::Contract(format!("query {} has no targets", query_id)));
        }
        Ok(Query {
            query_id,
            reference,
            condition,
            target_ids,
        })
    }
}

/// Ordered `(id, unit vector)` collection.
#[derive(Clone, Debug, PartialEq)]
pub struct Gallery {
    ids: Vec<String>,
    vectors: Tensor,
}

impl Gallery {
    pub fn new(ids: Vec<String>, vectors: Tensor) -> Result<Self> {
        if vectors.shape().len() != 2 || vectors.rows() != ids.len() {
            return Err(Error::shape(
                "gallery",
                format!("{} ids for vectors {:?}", ids.len(), vectors.shape()),
            ));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Contract(format!("duplicate gallery id {:?}", id)));
            }
        }
        for i in 0..vectors.rows() {
            check_unit(&format!("gallery row {}", i), vectors.row(i))?;
        }
        Ok(Gallery { ids, vectors })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.ids.iter().any(|g| g == id)
    }
}

/// Descending scores, ties broken by ascending id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub items: Vec<(String, f32)>,
}

impl RankedResult {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|(id, _)| id.as_str())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Inference token `gamma * phi(ref) + (1 - gamma) * phi_ts(prompt_text(cond))`,
/// left unnormalized. The unused branch is skipped at either endpoint.
pub fn mixed_token(query: &Query, mappers: &MapperPair, composer: &Composer, gamma: f32) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::param("gamma", format!("must lie in [0, 1], got {}", gamma)));
    }
    let pseudo = || map_pseudo_token(&mappers.phi, &query.reference);
    let supplement = || {
        let text = composer.prompt_text(&query.condition)?;
        map_supplement_token(&mappers.phi_ts, &text)
    };
    if gamma == 1.0 {
        return pseudo();
    }
    if gamma == 0.0 {
        return supplement();
    }
    let p = numerics::scale(&pseudo()?, gamma);
    let s = numerics::scale(&supplement()?, 1.0 - gamma);
    numerics::add(&p, &s)
}

/// Composed query "a photo of [token] that [cond]" as a unit vector.
pub fn compose_query(query: &Query, mappers: &MapperPair, composer: &Composer, gamma: f32) -> Result<Tensor> {
    let token = mixed_token(query, mappers, composer, gamma)?;
    composer.synthetic_compose(Template::PhotoOfThat, &[token, query.condition.clone()])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    ImageOnly,
    TextOnly,
    Average,
    Slerp,
}

impl BaselineMode {
    pub const ALL: [BaselineMode; 4] = [
        BaselineMode::ImageOnly,
        BaselineMode::TextOnly,
        BaselineMode::Average,
        BaselineMode::Slerp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineMode::ImageOnly => "image_only",
            BaselineMode::TextOnly => "text_only",
            BaselineMode::Average => "average",
            BaselineMode::Slerp => "slerp",
        }
    }
}

/// Spherical interpolation from `a` (t = 0) to `b` (t = 1), renormalized.
/// Nearly parallel inputs fall back to the normalized average.
pub fn slerp(a: &Tensor, b: &Tensor, t: f32) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape("slerp", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (na, nb) = (numerics::norm(a.data()) as f64, numerics::norm(b.data()) as f64);
    let cos: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum::<f64>()
        / (na * nb);
    let omega = cos.clamp(-1.0, 1.0).acos();
    if omega < SLERP_MIN_ANGLE {
        return normalize_vec(&numerics::add(a, b)?);
    }
    let t = t as f64;
    let s = omega.sin();
    let (wa, wb) = (((1.0 - t) * omega).sin() / s, (t * omega).sin() / s);
    let out: Vec<f32> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (wa * x as f64 + wb * y as f64) as f32)
        .collect();
    normalize_vec(&Tensor::new(a.shape().to_vec(), out)?)
}

fn normalize_vec(v: &Tensor) -> Result<Tensor> {
    let shape = v.shape().to_vec();
    let row = Tensor::matrix(1, v.len(), v.data().to_vec())?;
    numerics::l2_normalize_rows(&row)?.reshape(shape)
}

/// Training-free baselines on the raw reference and condition embeddings.
pub fn baseline_compose(query: &Query, mode: BaselineMode, t: f32) -> Result<Tensor> {
    match mode {
        BaselineMode::ImageOnly => Ok(query.reference.clone()),
        BaselineMode::TextOnly => Ok(query.condition.clone()),
        BaselineMode::Average => normalize_vec(&numerics::add(&query.reference, &query.condition)?),
        BaselineMode::Slerp => slerp(&query.reference, &query.condition, t),
    }
}

/// Exhaustive top-`k` by cosine against a unit query.
pub fn rank(gallery: &Gallery, query_vec: &Tensor, k: usize) -> Result<RankedResult> {
    if query_vec.len() != gallery.dim() || query_vec.shape().len() != 1 {
        return Err(Error::shape(
            "rank",
            format!("query {:?}, gallery dim {}", query_vec.shape(), gallery.dim()),
        ));
    }
    check_unit("query vector", query_vec.data())?;
    let mut scored: Vec<(usize, f32)> = (0..gallery.len())
        .map(|i| (i, numerics::dot(gallery.vectors.row(i), query_vec.data())))
        .collect();
    scored.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| gallery.ids[a.0].cmp(&gallery.ids[b.0]))
    });
    scored.truncate(k);
    Ok(RankedResult {
        items: scored
            .into_iter()
            .map(|(i, s)| (gallery.ids[i].clone(), s))
            .collect(),
    })
}

fn check_pairs(results: &[RankedResult], queries: &[Query], k: usize) -> Result<()> {
    if results.len() != queries.len() {
        return Err(Error::shape(
            "metric",
            format!("{} results for {} queries", results.len(), queries.len()),
        ));
    }
    if queries.is_empty() {
        return Err(Error::Contract("metric over zero queries".into()));
    }
    if k == 0 {
        return Err(Error::param("k", "must be >= 1"));
    }
    Ok(())
}

/// 1 if any target is within the top `k`.
pub fn hit_at_k(result: &RankedResult, query: &Query, k: usize) -> f64 {
    let hit = result
        .ids()
        .take(k)
        .any(|id| query.target_ids.iter().any(|t| t == id));
    if hit {
        1.0
    } else {
        0.0
    }
}

/// Truncated average precision normalized by `min(k, |targets|)`.
pub fn average_precision_at_k(result: &RankedResult, query: &Query, k: usize) -> f64 {
    let targets: HashSet<&str> = query.target_ids.iter().map(String::as_str).collect();
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, id) in result.ids().take(k).enumerate() {
        if targets.contains(id) {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    sum / k.min(targets.len()) as f64
}

pub fn recall_at_k(results: &[RankedResult], queries: &[Query], k: usize) -> Result<f64> {
    check_pairs(results, queries, k)?;
    let total: f64 = results.iter().zip(queries).map(|(r, q)| hit_at_k(r, q, k)).sum();
    Ok(total / queries.len() as f64)
}

pub fn map_at_k(results: &[RankedResult], queries: &[Query], k: usize) -> Result<f64> {
    check_pairs(results, queries, k)?;
    let total: f64 = results
        .iter()
        .zip(queries)
        .map(|(r, q)| average_precision_at_k(r, q, k))
        .sum();
    Ok(total / queries.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Recall,
    Map,
}

impl Metric {
    pub fn label(self, k: usize) -> String {
        match self {
            Metric::Recall => format!("R@{}", k),
            Metric::Map => format!("mAP@{}", k),
        }
    }
}

/// Queries plus the gallery they are ranked against.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTask {
    pub gallery: Gallery,
    pub queries: Vec<Query>,
}

impl EvalTask {
    pub fn new(gallery: Gallery, queries: Vec<Query>) -> Result<Self> {
        for q in &queries {
            if q.reference.len() != gallery.dim() {
                return Err(Error::shape(
                    "eval task",
                    format!("query {} has dim {}", q.query_id, q.reference.len()),
                ));
            }
            for t in &q.target_ids {
                if !gallery.contains(t) {
                    return Err(Error::Lookup(t.clone()));
                }
            }
        }
        Ok(EvalTask { gallery, queries })
    }
}

/// Ranks every query vector; `k = None` keeps the full ordering.
pub fn rank_all(gallery: &Gallery, query_vecs: &[Tensor], k: Option<usize>) -> Result<Vec<RankedResult>> {
    let k = k.unwrap_or(gallery.len());
    query_vecs.iter().map(|q| rank(gallery, q, k)).collect()
}

/// Metric label -> value for each requested metric and cutoff.
pub fn score(
    results: &[RankedResult],
    queries: &[Query],
    metrics: &[Metric],
    ks: &[usize],
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for &m in metrics {
        for &k in ks {
            let v = match m {
                Metric::Recall => recall_at_k(results, queries, k)?,
                Metric::Map => map_at_k(results, queries, k)?,
            };
            out.insert(m.label(k), v);
        }
    }
    Ok(out)
}

pub fn composed_queries(
    task: &EvalTask,
    mappers: &MapperPair,
    composer: &Composer,
    gamma: f32,
) -> Result<Vec<Tensor>> {
    task.queries
        .iter()
        .map(|q| compose_query(q, mappers, composer, gamma))
        .collect()
}

pub fn baseline_queries(task: &EvalTask, mode: BaselineMode, t: f32) -> Result<Vec<Tensor>> {
    task.queries.iter().map(|q| baseline_compose(q, mode, t)).collect()
}
