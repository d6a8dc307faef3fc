//! Training objectives.
//!
//! Every loss is recorded on a [`Tape`] so it can be differentiated with
//! respect to the mapper parameters through the frozen composer. The
//! `*_value` helpers evaluate the same graphs on plain tensors.
//!
//! | loss          | definition                                              |
//! |---------------|---------------------------------------------------------|
//! | `loss_ori`    | InfoNCE(images, composed_pseudo), both directions       |
//! | `loss_itcon`  | InfoNCE(images, composed_supplement), both directions   |
//! | `loss_mse`    | mean squared gap between the two composed blocks        |
//! | `loss_ts`     | `loss_itcon + alpha * loss_mse`                         |
//! | `loss_sset`   | `loss_itcon` restricted to the selected rows            |
//! | `loss_total`  | `loss_ori + loss_ts + beta * loss_sset`                 |

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, Tape, Tensor, Var};

pub const DEFAULT_TAU: f32 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f32,
    pub beta: f32,
    pub tau: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 2.0,
            tau: DEFAULT_TAU,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::param("tau", format!("must be > 0, got {}", self.tau)));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::param("alpha", format!("must be >= 0, got {}", self.alpha)));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::param("beta", format!("must be >= 0, got {}", self.beta)));
        }
        Ok(())
    }
}

/// One batch of aligned blocks, all `[n x d]` with unit rows.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchEmbeddings {
    pub images: Tensor,
    pub texts: Tensor,
    pub composed_pseudo: Tensor,
    pub composed_supplement: Tensor,
}

/// The same blocks recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BatchVars {
    pub images: Var,
    pub texts: Var,
    pub composed_pseudo: Var,
    pub composed_supplement: Var,
}

const UNIT_TOL: f32 = 1e-5;

impl BatchEmbeddings {
    pub fn new(
        images: Tensor,
        texts: Tensor,
        composed_pseudo: Tensor,
        composed_supplement: Tensor,
    ) -> Result<Self> {
        let shape = images.shape().to_vec();
        for (name, t) in [
            ("texts", &texts),
            ("composed_pseudo", &composed_pseudo),
            ("composed_supplement", &composed_supplement),
        ] {
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "batch",
                    format!("{} has shape {:?}, images {:?}", name, t.shape(), shape),
                ));
            }
        }
        for t in [&images, &texts, &composed_pseudo, &composed_supplement] {
            for i in 0..t.rows() {
                let n = numerics::norm(t.row(i));
                if (n - 1.0).abs() > UNIT_TOL {
                    return Err(Error::Contract(format!("row {} has norm {}", i, n)));
                }
            }
        }
        Ok(BatchEmbeddings {
            images,
            texts,
            composed_pseudo,
            composed_supplement,
        })
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records all four blocks as constants.
    pub fn record(&self, tape: &mut Tape) -> BatchVars {
        BatchVars {
            images: tape.constant(self.images.clone()),
            texts: tape.constant(self.texts.clone()),
            composed_pseudo: tape.constant(self.composed_pseudo.clone()),
            composed_supplement: tape.constant(self.composed_supplement.clone()),
        }
    }
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

/// `L_{A2B} + L_{B2A}` with `L_{A2B} = -(1/N) sum_i log softmax_i(a_i · bᵀ / tau)`.
/// A single pair has nothing to contrast against and gives exactly 0.
pub fn info_nce_bidirectional(tape: &mut Tape, a: Var, b: Var, tau: f32) -> Result<Var> {
    if tape.value(a).shape() != tape.value(b).shape() {
        return Err(Error::shape(
            "info_nce",
            format!("{:?} vs {:?}", tape.value(a).shape(), tape.value(b).shape()),
        ));
    }
    if !(tau > 0.0) {
        return Err(Error::param("tau", format!("must be > 0, got {}", tau)));
    }
    let n = tape.value(a).rows();
    if n == 0 {
        return Err(Error::shape("info_nce", "empty batch"));
    }
    if n == 1 {
        return Ok(zero(tape));
    }
    let sim = tape.row_similarity(a, b)?;
    let a2b = direction(tape, sim, tau)?;
    let sim_t = tape.transpose(sim);
    let b2a = direction(tape, sim_t, tau)?;
    tape.add(a2b, b2a)
}

fn direction(tape: &mut Tape, logits: Var, tau: f32) -> Result<Var> {
    let ls = tape.scaled_row_log_softmax(logits, tau)?;
    let d = tape.diag(ls)?;
    let m = tape.mean(d)?;
    Ok(tape.scale(m, -1.0))
}

pub fn loss_ori(tape: &mut Tape, batch: &BatchVars, tau: f32) -> Result<Var> {
    info_nce_bidirectional(tape, batch.images, batch.composed_pseudo, tau)
}

pub fn loss_itcon(tape: &mut Tape, batch: &BatchVars, tau: f32) -> Result<Var> {
    info_nce_bidirectional(tape, batch.images, batch.composed_supplement, tau)
}

pub fn loss_mse(tape: &mut Tape, batch: &BatchVars) -> Result<Var> {
    tape.mse(batch.composed_pseudo, batch.composed_supplement)
}

pub fn loss_ts(tape: &mut Tape, batch: &BatchVars, weights: &LossWeights) -> Result<Var> {
    let itcon = loss_itcon(tape, batch, weights.tau)?;
    let mse = loss_mse(tape, batch)?;
    let weighted = tape.scale(mse, weights.alpha);
    tape.add(itcon, weighted)
}

/// InfoNCE between images and composed supplements over the `selected`
/// rows only. Zero when fewer than two rows are selected.
pub fn loss_sset(tape: &mut Tape, batch: &BatchVars, selected: &[usize], tau: f32) -> Result<Var> {
    let n = tape.value(batch.images).rows();
    if let Some(&bad) = selected.iter().find(|&&i| i >= n) {
        return Err(Error::Index { index: bad, len: n });
    }
    if selected.len() <= 1 {
        return Ok(zero(tape));
    }
    let imgs = tape.select_rows(batch.images, selected)?;
    let sup = tape.select_rows(batch.composed_supplement, selected)?;
    info_nce_bidirectional(tape, imgs, sup, tau)
}

pub fn loss_total(
    tape: &mut Tape,
    batch: &BatchVars,
    selected: &[usize],
    weights: &LossWeights,
) -> Result<Var> {
    let ori = loss_ori(tape, batch, weights.tau)?;
    let ts = loss_ts(tape, batch, weights)?;
    let ss = loss_sset(tape, batch, selected, weights.tau)?;
    let ss = tape.scale(ss, weights.beta);
    let partial = tape.add(ori, ts)?;
    tape.add(partial, ss)
}

/// Per-term values of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ori: f32,
    pub itcon: f32,
    pub mse: f32,
    pub ts: f32,
    pub ss: f32,
    pub total: f32,
}

fn eval(batch: &BatchEmbeddings, f: impl FnOnce(&mut Tape, &BatchVars) -> Result<Var>) -> Result<f32> {
    let mut tape = Tape::new();
    let vars = batch.record(&mut tape);
    let out = f(&mut tape, &vars)?;
    tape.value(out).item()
}

pub fn info_nce_value(a: &Tensor, b: &Tensor, tau: f32) -> Result<f32> {
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = info_nce_bidirectional(&mut tape, va, vb, tau)?;
    tape.value(out).item()
}

pub fn loss_ori_value(batch: &BatchEmbeddings, tau: f32) -> Result<f32> {
    eval(batch, |t, v| loss_ori(t, v, tau))
}

pub fn loss_itcon_value(batch: &BatchEmbeddings, tau: f32) -> Result<f32> {
    eval(batch, |t, v| loss_itcon(t, v, tau))
}

pub fn loss_mse_value(batch: &BatchEmbeddings) -> Result<f32> {
    eval(batch, loss_mse)
}

pub fn loss_ts_value(batch: &BatchEmbeddings, weights: &LossWeights) -> Result<f32> {
    eval(batch, |t, v| loss_ts(t, v, weights))
}

pub fn loss_sset_value(batch: &BatchEmbeddings, selected: &[usize], tau: f32) -> Result<f32> {
    eval(batch, |t, v| loss_sset(t, v, selected, tau))
}

pub fn loss_total_value(
    batch: &BatchEmbeddings,
    selected: &[usize],
    weights: &LossWeights,
) -> Result<f32> {
    eval(batch, |t, v| loss_total(t, v, selected, weights))
}

pub fn breakdown(
    batch: &BatchEmbeddings,
    selected: &[usize],
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let ori = loss_ori_value(batch, weights.tau)?;
    let itcon = loss_itcon_value(batch, weights.tau)?;
    let mse = loss_mse_value(batch)?;
    let ss = loss_sset_value(batch, selected, weights.tau)?;
    Ok(LossBreakdown {
        ori,
        itcon,
        mse,
        ts: loss_ts_value(batch, weights)?,
        ss,
        total: loss_total_value(batch, selected, weights)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn orthonormal(n: usize, d: usize) -> Tensor {
        let mut v = vec![0.0; n * d];
        for i in 0..n {
            v[i * d + i] = 1.0;
        }
        Tensor::matrix(n, d, v).unwrap()
    }

    fn random_unit(rng: &mut crate::rng::DetRng, n: usize, d: usize) -> Tensor {
        let v: Vec<f32> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        numerics::l2_normalize_rows(&Tensor::matrix(n, d, v).unwrap()).unwrap()
    }

    fn batch(rng: &mut crate::rng::DetRng, n: usize, d: usize) -> BatchEmbeddings {
        BatchEmbeddings::new(
            random_unit(rng, n, d),
            random_unit(rng, n, d),
            random_unit(rng, n, d),
            random_unit(rng, n, d),
        )
        .unwrap()
    }

    #[test]
    fn info_nce_single_pair_is_zero() {
        let a = orthonormal(1, 3);
        assert_eq!(info_nce_value(&a, &a, 0.01).unwrap(), 0.0);
    }

    #[test]
    fn info_nce_orthonormal_closed_form() {
        let a = orthonormal(2, 4);
        let e = std::f64::consts::E;
        let expected = 2.0 * -(e / (e + 1.0)).ln();
        let got = f64::from(info_nce_value(&a, &a, 1.0).unwrap());
        assert!((got - expected).abs() < 1e-6, "{} vs {}", got, expected);
        assert!((expected - 0.6265).abs() < 1e-4);
    }

    #[test]
    fn info_nce_errors() {
        let a = orthonormal(2, 4);
        let b = orthonormal(3, 4);
        assert!(matches!(info_nce_value(&a, &b, 1.0), Err(Error::Shape { .. })));
        assert!(matches!(info_nce_value(&a, &a, 0.0), Err(Error::Parameter { .. })));
    }

    #[test]
    fn info_nce_joint_permutation_invariant() {
        let mut rng = rng_from(5);
        let a = random_unit(&mut rng, 5, 3);
        let b = random_unit(&mut rng, 5, 3);
        let mut perm: Vec<usize> = (0..5).collect();
        perm.shuffle(&mut rng);
        let pa = numerics::select_rows(&a, &perm).unwrap();
        let pb = numerics::select_rows(&b, &perm).unwrap();
        let l = info_nce_value(&a, &b, 0.2).unwrap();
        let lp = info_nce_value(&pa, &pb, 0.2).unwrap();
        assert!((l - lp).abs() < 1e-6);
    }

    #[test]
    fn mse_hand_cases() {
        let mut rng = rng_from(1);
        let b = batch(&mut rng, 3, 4);
        let same = BatchEmbeddings {
            composed_supplement: b.composed_pseudo.clone(),
            ..b.clone()
        };
        assert_eq!(loss_mse_value(&same).unwrap(), 0.0);

        let swapped = BatchEmbeddings {
            composed_pseudo: b.composed_supplement.clone(),
            composed_supplement: b.composed_pseudo.clone(),
            ..b.clone()
        };
        assert_eq!(loss_mse_value(&b).unwrap(), loss_mse_value(&swapped).unwrap());

        // rows differing by a constant c in every coordinate
        let c = 0.25f32;
        let p = Tensor::matrix(2, 2, vec![0.5, -0.5, 0.1, 0.3]).unwrap();
        let q = Tensor::matrix(2, 2, vec![0.5 + c, -0.5 + c, 0.1 + c, 0.3 + c]).unwrap();
        let mut tape = Tape::new();
        let (vp, vq) = (tape.constant(p), tape.constant(q));
        let m = tape.mse(vp, vq).unwrap();
        assert!((tape.value(m).item().unwrap() - c * c).abs() < 1e-7);
    }

    #[test]
    fn ts_alpha_structure() {
        let mut rng = rng_from(8);
        let b = batch(&mut rng, 4, 5);
        let w0 = LossWeights { alpha: 0.0, ..Default::default() };
        assert_eq!(
            loss_ts_value(&b, &w0).unwrap(),
            loss_itcon_value(&b, w0.tau).unwrap()
        );
        let w1 = LossWeights { alpha: 1.0, ..w0 };
        let w2 = LossWeights { alpha: 2.0, ..w0 };
        let slope = loss_ts_value(&b, &w2).unwrap() - loss_ts_value(&b, &w1).unwrap();
        assert!((slope - loss_mse_value(&b).unwrap()).abs() < 1e-5);
    }

    #[test]
    fn ts_with_identical_blocks_is_itcon() {
        let e = orthonormal(3, 3);
        let b = BatchEmbeddings::new(e.clone(), e.clone(), e.clone(), e).unwrap();
        let w = LossWeights { alpha: 1.0, tau: 0.5, beta: 2.0 };
        assert_eq!(loss_ts_value(&b, &w).unwrap(), loss_itcon_value(&b, 0.5).unwrap());
    }

    #[test]
    fn sset_degenerate_selections() {
        let mut rng = rng_from(3);
        let b = batch(&mut rng, 4, 3);
        assert_eq!(loss_sset_value(&b, &[], 0.1).unwrap(), 0.0);
        assert_eq!(loss_sset_value(&b, &[2], 0.1).unwrap(), 0.0);
        assert!(matches!(
            loss_sset_value(&b, &[0, 4], 0.1),
            Err(Error::Index { index: 4, len: 4 })
        ));
    }

    #[test]
    fn sset_full_selection_is_itcon() {
        let mut rng = rng_from(4);
        for _ in 0..20 {
            let b = batch(&mut rng, 6, 4);
            let all: Vec<usize> = (0..6).collect();
            let ss = loss_sset_value(&b, &all, 0.05).unwrap();
            let it = loss_itcon_value(&b, 0.05).unwrap();
            assert!((ss - it).abs() < 1e-6);
        }
    }

    #[test]
    fn total_is_sum_of_parts() {
        let mut rng = rng_from(6);
        let b = batch(&mut rng, 5, 4);
        let w = LossWeights { alpha: 0.7, beta: 1.3, tau: 0.2 };
        let sel = [0, 2, 3];
        let br = breakdown(&b, &sel, &w).unwrap();
        let recomposed = f64::from(br.ori)
            + f64::from(br.itcon)
            + f64::from(w.alpha) * f64::from(br.mse)
            + f64::from(w.beta) * f64::from(br.ss);
        assert!((f64::from(br.total) - recomposed).abs() < 1e-5);

        let w0 = LossWeights { beta: 0.0, ..w };
        let t0 = loss_total_value(&b, &sel, &w0).unwrap();
        assert!((t0 - (br.ori + br.ts)).abs() < 1e-6);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { alpha: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights { beta: -0.1, ..Default::default() }.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }
}
