//! Frozen encoders: the seeded prompt composer and precomputed embedding
//! tables.
//!
//! The composer plays the part of a frozen text encoder that accepts free
//! token vectors in prompt slots:
//!
//! ```text
//! out = l2_normalize( tanh( concat(template, slot_1, .., slot_k) · W1 + b1 ) · W2 )
//! ```
//!
//! `W1` is assembled per template from a template block and one slot block
//! that is shared by every slot position, so a prompt behaves like a bag of
//! tokens: `concat(t, s1, s2) · W1 = t·Wt + s1·Ws + s2·Ws`. The
//! `photo_of_that` template vector is the `photo_of` vector plus a frozen
//! "that" word vector.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{self, Tape, Tensor, Var};
use crate::rng::{derive_seed, rng_from, uniform_fan_in};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    /// "a photo of [token]"
    PhotoOf,
    /// "a photo of [token] that [cond]"
    PhotoOfThat,
}

impl Template {
    pub fn arity(self) -> usize {
        match self {
            Template::PhotoOf => 1,
            Template::PhotoOfThat => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Template::PhotoOf => "photo_of",
            Template::PhotoOfThat => "photo_of_that",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComposerSpec {
    pub dim: usize,
    pub seed: u64,
    /// Hidden width; 4 * dim when `None`.
    #[serde(default)]
    pub hidden: Option<usize>,
}

impl ComposerSpec {
    pub fn new(dim: usize, seed: u64) -> Self {
        ComposerSpec {
            dim,
            seed,
            hidden: None,
        }
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden.unwrap_or(4 * self.dim)
    }
}

/// Frozen seeded composer. Immutable after construction.
#[derive(Clone, Debug)]
pub struct Composer {
    spec: ComposerSpec,
    template_block: Tensor,
    slot_block: Tensor,
    b1: Tensor,
    w2: Tensor,
    photo_of: Tensor,
    that_word: Tensor,
    // W1 per template, rows = (1 + arity) * dim
    w1_photo_of: Tensor,
    w1_photo_of_that: Tensor,
}

impl Composer {
    pub fn new(spec: ComposerSpec) -> Result<Self> {
        let d = spec.dim;
        let h = spec.hidden_width();
        if d == 0 || h == 0 {
            return Err(Error::param("composer.dim", "dimensions must be positive"));
        }
        let mut rng = rng_from(derive_seed(spec.seed, "composer"));
        // W1 and b1 see the concat of one template vector and one slot.
        let fan1 = 2 * d;
        let template_block = Tensor::matrix(d, h, uniform_fan_in(&mut rng, d * h, fan1))?;
        let slot_block = Tensor::matrix(d, h, uniform_fan_in(&mut rng, d * h, fan1))?;
        let b1 = Tensor::vector(uniform_fan_in(&mut rng, h, fan1));
        let w2 = Tensor::matrix(h, d, uniform_fan_in(&mut rng, h * d, h))?;
        let photo_of = Tensor::vector(uniform_fan_in(&mut rng, d, d));
        let that_word = Tensor::vector(uniform_fan_in(&mut rng, d, d));

        let stack = |blocks: &[&Tensor]| -> Result<Tensor> {
            let mut data = Vec::new();
            for b in blocks {
                data.extend_from_slice(b.data());
            }
            Tensor::matrix(blocks.len() * d, h, data)
        };
        let w1_photo_of = stack(&[&template_block, &slot_block])?;
        let w1_photo_of_that = stack(&[&template_block, &slot_block, &slot_block])?;

        Ok(Composer {
            spec,
            template_block,
            slot_block,
            b1,
            w2,
            photo_of,
            that_word,
            w1_photo_of,
            w1_photo_of_that,
        })
    }

    pub fn spec(&self) -> ComposerSpec {
        self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn template_vector(&self, template: Template) -> Tensor {
        match template {
            Template::PhotoOf => self.photo_of.clone(),
            Template::PhotoOfThat => numerics::add(&self.photo_of, &self.that_word)
                .expect("template vectors share a shape"),
        }
    }

    /// `W1` for `template`: `[(1 + arity) * dim x hidden]`.
    pub fn first_layer(&self, template: Template) -> &Tensor {
        match template {
            Template::PhotoOf => &self.w1_photo_of,
            Template::PhotoOfThat => &self.w1_photo_of_that,
        }
    }

    pub fn first_bias(&self) -> &Tensor {
        &self.b1
    }

    /// `W2`: `[hidden x dim]`.
    pub fn second_layer(&self) -> &Tensor {
        &self.w2
    }

    /// SHA-256 over every frozen weight, in a fixed order.
    pub fn weights_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for t in [
            &self.template_block,
            &self.slot_block,
            &self.b1,
            &self.w2,
            &self.photo_of,
            &self.that_word,
        ] {
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{:02x}", b))
            .collect()
    }

    /// Composes a batch of prompts on `tape`. Each slot is an `[n x dim]`
    /// (or `[dim]`) node; the result is `[n x dim]` with unit rows.
    /// Gradients flow to the slots only: the frozen weights enter the tape
    /// as constants.
    pub fn compose(&self, tape: &mut Tape, template: Template, slots: &[Var]) -> Result<Var> {
        if slots.len() != template.arity() {
            return Err(Error::Template {
                template: template.name(),
                expected: template.arity(),
                got: slots.len(),
            });
        }
        let d = self.dim();
        for &s in slots {
            if tape.value(s).cols() != d {
                return Err(Error::shape(
                    "compose",
                    format!("slot width {} != dim {}", tape.value(s).cols(), d),
                ));
            }
        }
        let n = tape.value(slots[0]).rows();
        let tv = self.template_vector(template);
        let mut rows = Vec::with_capacity(n * d);
        for _ in 0..n {
            rows.extend_from_slice(tv.data());
        }
        let tpl = tape.constant(Tensor::matrix(n, d, rows)?);
        let mut parts = vec![tpl];
        parts.extend_from_slice(slots);
        let x = tape.concat_cols(&parts)?;
        let w1 = tape.constant(self.first_layer(template).clone());
        let b1 = tape.constant(self.b1.clone());
        let w2 = tape.constant(self.w2.clone());
        let pre = tape.matmul(x, w1)?;
        let pre = tape.add_bias(pre, b1)?;
        let hidden = tape.tanh(pre);
        let out = tape.matmul(hidden, w2)?;
        tape.l2_normalize_rows(out)
    }

    /// Tape-free composition of plain tensors.
    pub fn synthetic_compose(&self, template: Template, slots: &[Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = slots.iter().map(|s| tape.constant(s.clone())).collect();
        let out = self.compose(&mut tape, template, &vars)?;
        let t = tape.value(out).clone();
        if slots.first().map(|s| s.shape().len() == 1).unwrap_or(false) {
            t.reshape(vec![self.dim()])
        } else {
            Ok(t)
        }
    }

    /// "a photo of [cond]".
    pub fn prompt_text(&self, cond: &Tensor) -> Result<Tensor> {
        self.synthetic_compose(Template::PhotoOf, std::slice::from_ref(cond))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
}

/// Precomputed, frozen embeddings keyed by id. Rows are renormalized on
/// construction.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    role: Modality,
    ids: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Tensor,
}

impl EmbeddingTable {
    pub fn new(role: Modality, ids: Vec<String>, vectors: &Tensor) -> Result<Self> {
        if ids.len() != vectors.rows() || vectors.shape().len() != 2 {
            return Err(Error::shape(
                "embedding_table",
                format!("{} ids for {:?} vectors", ids.len(), vectors.shape()),
            ));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Contract(format!("duplicate id {:?}", id)));
            }
        }
        let vectors = if vectors.rows() == 0 {
            vectors.clone()
        } else {
            numerics::l2_normalize_rows(vectors)?
        };
        Ok(EmbeddingTable {
            role,
            ids,
            index,
            vectors,
        })
    }

    pub fn role(&self) -> Modality {
        self.role
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// The stored unit vector for `id`, detached from any tape.
    pub fn encode(&self, id: &str) -> Result<Tensor> {
        let i = self
            .position(id)
            .ok_or_else(|| Error::Lookup(id.to_string()))?;
        Ok(Tensor::vector(self.vectors.row(i).to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;

    fn random_vec(rng: &mut crate::rng::DetRng, d: usize) -> Tensor {
        Tensor::vector((0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect())
    }

    #[test]
    fn outputs_are_unit_norm() {
        let c = Composer::new(ComposerSpec::new(16, 5)).unwrap();
        let mut rng = rng_from(1);
        for _ in 0..20 {
            let s = random_vec(&mut rng, 16);
            let o = c.synthetic_compose(Template::PhotoOf, std::slice::from_ref(&s)).unwrap();
            assert_eq!(o.shape(), &[16]);
            assert!((numerics::norm(o.data()) - 1.0).abs() < 1e-6);
            let o2 = c
                .synthetic_compose(Template::PhotoOfThat, &[s.clone(), s])
                .unwrap();
            assert!((numerics::norm(o2.data()) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = Composer::new(ComposerSpec::new(8, 42)).unwrap();
        let b = Composer::new(ComposerSpec::new(8, 42)).unwrap();
        assert_eq!(a.weights_hash(), b.weights_hash());
        let s = Tensor::vector(vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8]);
        let oa = a.prompt_text(&s).unwrap();
        let ob = b.prompt_text(&s).unwrap();
        assert_eq!(oa.data(), ob.data());
        let c = Composer::new(ComposerSpec::new(8, 43)).unwrap();
        assert_ne!(a.weights_hash(), c.weights_hash());
    }

    #[test]
    fn arity_is_checked() {
        let c = Composer::new(ComposerSpec::new(4, 0)).unwrap();
        let s = Tensor::vector(vec![1.0, 0.0, 0.0, 0.0]);
        let err = c
            .synthetic_compose(Template::PhotoOfThat, std::slice::from_ref(&s))
            .unwrap_err();
        assert!(matches!(err, Error::Template { expected: 2, got: 1, .. }));
        assert!(c.synthetic_compose(Template::PhotoOf, &[s.clone(), s]).is_err());
        let wrong = Tensor::vector(vec![1.0; 5]);
        assert!(matches!(c.prompt_text(&wrong), Err(Error::Shape { .. })));
    }

    #[test]
    fn prompt_text_is_photo_of() {
        let c = Composer::new(ComposerSpec::new(8, 3)).unwrap();
        let s = Tensor::vector(vec![0.3; 8]);
        assert_eq!(
            c.prompt_text(&s).unwrap(),
            c.synthetic_compose(Template::PhotoOf, &[s]).unwrap()
        );
    }

    #[test]
    fn prompt_text_moves_the_condition() {
        let c = Composer::new(ComposerSpec::new(16, 11)).unwrap();
        let mut rng = rng_from(2);
        for _ in 0..100 {
            let v = random_vec(&mut rng, 16);
            let u = numerics::l2_normalize_rows(&v).unwrap();
            let p = c.prompt_text(&u).unwrap();
            assert!(numerics::dot(p.data(), u.data()) < 1.0 - 1e-4);
        }
    }

    #[test]
    fn slot_gradients_only() {
        let c = Composer::new(ComposerSpec::new(6, 9)).unwrap();
        let mut tape = Tape::new();
        let s = tape.param(Tensor::matrix(2, 6, vec![0.2; 12]).unwrap());
        let out = c.compose(&mut tape, Template::PhotoOf, &[s]).unwrap();
        let l = tape.sum(out);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.len(), 1);
        assert!(g.contains(s));
    }

    #[test]
    fn table_lookup_and_renormalization() {
        let v = Tensor::matrix(2, 4, vec![3.0, 4.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]).unwrap();
        let t = EmbeddingTable::new(Modality::Image, vec!["a".into(), "b".into()], &v).unwrap();
        let a = t.encode("a").unwrap();
        assert!(!a.requires_grad());
        assert!((a.data()[0] - 0.6).abs() < 1e-7 && (a.data()[1] - 0.8).abs() < 1e-7);
        assert_eq!(t.encode("b").unwrap().data(), &[0.0, 0.0, 1.0, 0.0]);
        assert!(matches!(t.encode("zzz"), Err(Error::Lookup(_))));
    }

    #[test]
    fn table_rejects_duplicate_ids() {
        let v = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(EmbeddingTable::new(Modality::Text, vec!["x".into(), "x".into()], &v).is_err());
    }
}
