//! Semantic-set mining.
//!
//! For image `i` the uncertainty row is the softmax of its similarities to
//! every caption in the batch at temperature `sigma`. Row `i` is selected when
//! the frozen encoders' most likely caption is not its own (`mask_f`) and that
//! caption is still close to the true one, `<w_argmax, w_i> >= lambda`
//! (`mask_s`). Selection works on detached values and never touches a tape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, Tensor};

pub const DEFAULT_SIGMA: f32 = 0.01;
pub const DEFAULT_LAMBDA: f32 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct SSetSelection {
    pub uncertainty: Tensor,
    pub argmax_index: Vec<usize>,
    pub caption_similarity: Vec<f32>,
    pub mask_f: Vec<bool>,
    pub mask_s: Vec<bool>,
    pub mask: Vec<bool>,
    pub selected: Vec<usize>,
}

impl SSetSelection {
    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }
}

/// How the semantic set is formed during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMode {
    /// Both masks, as configured.
    #[default]
    Select,
    /// No filtering: every row of the batch is in the set.
    FullBatch,
    /// Both masks with the caption threshold forced to 0.
    LambdaZero,
}

pub fn compute_uncertainty(images: &Tensor, texts: &Tensor, sigma: f32) -> Result<Tensor> {
    if images.shape() != texts.shape() {
        return Err(Error::shape(
            "compute_uncertainty",
            format!("{:?} vs {:?}", images.shape(), texts.shape()),
        ));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::param("sigma", format!("must be > 0, got {}", sigma)));
    }
    let sim = numerics::row_similarity(images, texts)?;
    numerics::scaled_row_softmax(&sim, sigma)
}

/// Row argmax; ties go to the lowest index.
pub fn row_argmax(m: &Tensor) -> Vec<usize> {
    (0..m.rows())
        .map(|i| {
            let row = m.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// `true` where the row argmax is not the row's own index, plus the argmax
/// indices themselves.
pub fn mask_f(uncertainty: &Tensor) -> (Vec<bool>, Vec<usize>) {
    let argmax = row_argmax(uncertainty);
    let mask = argmax.iter().enumerate().map(|(i, &a)| a != i).collect();
    (mask, argmax)
}

/// `true` where the predicted caption's similarity to the true caption
/// reaches `lambda`; also returns those similarities.
pub fn mask_s(texts: &Tensor, argmax: &[usize], lambda: f32) -> Result<(Vec<bool>, Vec<f32>)> {
    let n = texts.rows();
    if argmax.len() != n {
        return Err(Error::shape(
            "mask_s",
            format!("{} argmax entries for {} texts", argmax.len(), n),
        ));
    }
    let mut sims = Vec::with_capacity(n);
    for (i, &a) in argmax.iter().enumerate() {
        if a >= n {
            return Err(Error::Index { index: a, len: n });
        }
        sims.push(numerics::dot(texts.row(a), texts.row(i)));
    }
    let mask = sims.iter().map(|&s| s >= lambda).collect();
    Ok((mask, sims))
}

pub fn select(images: &Tensor, texts: &Tensor, sigma: f32, lambda: f32) -> Result<SSetSelection> {
    if images.shape() != texts.shape() {
        return Err(Error::shape(
            "select",
            format!("{:?} vs {:?}", images.shape(), texts.shape()),
        ));
    }
    let sim = numerics::row_similarity(images, texts)?;
    select_from_similarities(&sim, texts, sigma, lambda)
}

/// Selection from a precomputed `[n x n]` image-caption similarity matrix.
pub fn select_from_similarities(
    similarities: &Tensor,
    texts: &Tensor,
    sigma: f32,
    lambda: f32,
) -> Result<SSetSelection> {
    let n = texts.rows();
    if similarities.shape() != [n, n] {
        return Err(Error::shape(
            "select",
            format!("similarities {:?} for {} captions", similarities.shape(), n),
        ));
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::param("sigma", format!("must be > 0, got {}", sigma)));
    }
    let uncertainty = numerics::scaled_row_softmax(similarities, sigma)?;
    let (mf, argmax) = mask_f(&uncertainty);
    let (ms, sims) = mask_s(texts, &argmax, lambda)?;
    let mask: Vec<bool> = mf.iter().zip(&ms).map(|(&a, &b)| a && b).collect();
    let selected = mask
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect();
    Ok(SSetSelection {
        uncertainty,
        argmax_index: argmax,
        caption_similarity: sims,
        mask_f: mf,
        mask_s: ms,
        mask,
        selected,
    })
}

/// Selection under a training mode. `FullBatch` keeps the diagnostic fields
/// (uncertainty, argmax, similarity) but sets every mask to `true`.
pub fn select_with_mode(
    images: &Tensor,
    texts: &Tensor,
    sigma: f32,
    lambda: f32,
    mode: SelectMode,
) -> Result<SSetSelection> {
    match mode {
        SelectMode::Select => select(images, texts, sigma, lambda),
        SelectMode::LambdaZero => select(images, texts, sigma, 0.0),
        SelectMode::FullBatch => {
            let mut s = select(images, texts, sigma, lambda)?;
            let n = images.rows();
            s.mask_f = vec![true; n];
            s.mask_s = vec![true; n];
            s.mask = vec![true; n];
            s.selected = (0..n).collect();
            Ok(s)
        }
    }
}
