//! Independent f64 reference implementations shared by the integration tests.
#![allow(dead_code)]

use cir_core::encoders::{Composer, Template};
use cir_core::mappers::{MapperPair, MapperVars};
use cir_core::numerics::{self, Tape, Tensor};
use cir_core::objectives::{self, BatchVars, LossWeights};
use cir_core::retrieval::{Query, RankedResult};
use cir_core::rng::DetRng;
use rand::Rng;

// ---------------------------------------------------------------- matrices

#[derive(Clone, Debug)]
pub struct Mat {
    pub r: usize,
    pub c: usize,
    pub v: Vec<f64>,
}

impl Mat {
    pub fn from_tensor(t: &Tensor) -> Mat {
        let (r, c) = t.dims2();
        Mat {
            r,
            c,
            v: t.data().iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.v[i * self.c + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.v[i * self.c..(i + 1) * self.c]
    }

    pub fn rows(&self, idx: &[usize]) -> Mat {
        let mut v = Vec::new();
        for &i in idx {
            v.extend_from_slice(self.row(i));
        }
        Mat { r: idx.len(), c: self.c, v }
    }
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.c, b.r);
    let mut v = vec![0.0; a.r * b.c];
    for i in 0..a.r {
        for j in 0..b.c {
            let mut s = 0.0;
            for k in 0..a.c {
                s += a.at(i, k) * b.at(k, j);
            }
            v[i * b.c + j] = s;
        }
    }
    Mat { r: a.r, c: b.c, v }
}

fn normalize_rows(a: &Mat) -> Mat {
    let mut v = a.v.clone();
    for i in 0..a.r {
        let n = a.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        for j in 0..a.c {
            v[i * a.c + j] /= n;
        }
    }
    Mat { r: a.r, c: a.c, v }
}

// ---------------------------------------------------------------- networks

/// Mapper parameters as `(weight [in x out], bias [out])` per layer.
pub type RefLayers = Vec<(Mat, Vec<f64>)>;

pub fn mapper_forward(layers: &RefLayers, x: &Mat) -> Mat {
    let mut h = x.clone();
    for (li, (w, b)) in layers.iter().enumerate() {
        let mut z = matmul(&h, w);
        for i in 0..z.r {
            for j in 0..z.c {
                let val = z.v[i * z.c + j] + b[j];
                z.v[i * z.c + j] = if li + 1 < layers.len() { val.tanh() } else { val };
            }
        }
        h = z;
    }
    h
}

pub fn compose(composer: &Composer, template: Template, slots: &[&Mat]) -> Mat {
    let n = slots[0].r;
    let tv: Vec<f64> = composer
        .template_vector(template)
        .data()
        .iter()
        .map(|&x| x as f64)
        .collect();
    let mut x = Vec::new();
    for i in 0..n {
        x.extend_from_slice(&tv);
        for s in slots {
            x.extend_from_slice(s.row(i));
        }
    }
    let x = Mat {
        r: n,
        c: tv.len() * (1 + slots.len()),
        v: x,
    };
    let w1 = Mat::from_tensor(composer.first_layer(template));
    let b1: Vec<f64> = composer.first_bias().data().iter().map(|&x| x as f64).collect();
    let w2 = Mat::from_tensor(composer.second_layer());
    let mut h = matmul(&x, &w1);
    for i in 0..h.r {
        for j in 0..h.c {
            h.v[i * h.c + j] = (h.v[i * h.c + j] + b1[j]).tanh();
        }
    }
    normalize_rows(&matmul(&h, &w2))
}

// ---------------------------------------------------------------- losses

fn log_softmax_at(logits: &[f64], i: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits[i] - lse
}

pub fn info_nce(a: &Mat, b: &Mat, tau: f64) -> f64 {
    let n = a.r;
    if n <= 1 {
        return 0.0;
    }
    let sim = |i: usize, j: usize| -> f64 { a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum::<f64>() / tau };
    let mut a2b = 0.0;
    let mut b2a = 0.0;
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|j| sim(i, j)).collect();
        a2b -= log_softmax_at(&row, i);
        let col: Vec<f64> = (0..n).map(|j| sim(j, i)).collect();
        b2a -= log_softmax_at(&col, i);
    }
    (a2b + b2a) / n as f64
}

pub fn mse(a: &Mat, b: &Mat) -> f64 {
    a.v.iter().zip(&b.v).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.v.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Ori,
    Itcon,
    Mse,
    Ts,
    Sset,
    Total,
}

pub const LOSS_KINDS: [LossKind; 6] = [
    LossKind::Ori,
    LossKind::Itcon,
    LossKind::Mse,
    LossKind::Ts,
    LossKind::Sset,
    LossKind::Total,
];

pub struct Case<'a> {
    pub composer: &'a Composer,
    pub images: Tensor,
    pub texts: Tensor,
    pub weights: LossWeights,
    pub selected: Vec<usize>,
    pub kind: LossKind,
}

/// Reference loss as a function of the flattened parameters of both mappers.
pub fn reference_loss(case: &Case, shapes: &ParamShapes, flat: &[f64]) -> f64 {
    let (phi, phi_ts) = shapes.unflatten(flat);
    let v = Mat::from_tensor(&case.images);
    let w = Mat::from_tensor(&case.texts);
    let vp = compose(case.composer, Template::PhotoOf, &[&mapper_forward(&phi, &v)]);
    let ws = compose(case.composer, Template::PhotoOf, &[&mapper_forward(&phi_ts, &w)]);
    let tau = case.weights.tau as f64;
    let (alpha, beta) = (case.weights.alpha as f64, case.weights.beta as f64);
    let ori = || info_nce(&v, &vp, tau);
    let itcon = || info_nce(&v, &ws, tau);
    let m = || mse(&vp, &ws);
    let ss = || {
        if case.selected.len() <= 1 {
            0.0
        } else {
            info_nce(&v.rows(&case.selected), &ws.rows(&case.selected), tau)
        }
    };
    match case.kind {
        LossKind::Ori => ori(),
        LossKind::Itcon => itcon(),
        LossKind::Mse => m(),
        LossKind::Ts => itcon() + alpha * m(),
        LossKind::Sset => ss(),
        LossKind::Total => ori() + itcon() + alpha * m() + beta * ss(),
    }
}

/// Layer shapes of a mapper pair, for flattening.
pub struct ParamShapes {
    pub dims: Vec<(usize, usize)>,
}

impl ParamShapes {
    pub fn of(m: &MapperPair) -> Self {
        let dims = m
            .phi
            .layers()
            .iter()
            .map(|l| (l.weight.rows(), l.weight.cols()))
            .collect();
        ParamShapes { dims }
    }

    pub fn flatten(m: &MapperPair) -> Vec<f64> {
        let mut out = Vec::new();
        for p in [&m.phi, &m.phi_ts] {
            for (_, t) in p.named_tensors() {
                out.extend(t.data().iter().map(|&x| x as f64));
            }
        }
        out
    }

    pub fn unflatten(&self, flat: &[f64]) -> (RefLayers, RefLayers) {
        let mut pos = 0;
        let mut take = |n: usize| -> Vec<f64> {
            let s = flat[pos..pos + n].to_vec();
            pos += n;
            s
        };
        let mut both = Vec::new();
        for _ in 0..2 {
            let mut layers = Vec::new();
            for &(i, o) in &self.dims {
                let w = Mat { r: i, c: o, v: take(i * o) };
                let b = take(o);
                layers.push((w, b));
            }
            both.push(layers);
        }
        let phi_ts = both.pop().unwrap();
        (both.pop().unwrap(), phi_ts)
    }
}

/// Loss value and flattened gradient from the library's tape.
pub fn tape_loss_and_grad(case: &Case, mappers: &MapperPair) -> (f32, Vec<f64>) {
    let mut tape = Tape::new();
    let phi = mappers.phi.register(&mut tape);
    let phi_ts = mappers.phi_ts.register(&mut tape);
    let v = tape.constant(case.images.clone());
    let w = tape.constant(case.texts.clone());
    let p = mappers.phi.forward(&mut tape, &phi, v).unwrap();
    let s = mappers.phi_ts.forward(&mut tape, &phi_ts, w).unwrap();
    let cp = case.composer.compose(&mut tape, Template::PhotoOf, &[p]).unwrap();
    let cs = case.composer.compose(&mut tape, Template::PhotoOf, &[s]).unwrap();
    let b = BatchVars {
        images: v,
        texts: w,
        composed_pseudo: cp,
        composed_supplement: cs,
    };
    let tau = case.weights.tau;
    let loss = match case.kind {
        LossKind::Ori => objectives::loss_ori(&mut tape, &b, tau),
        LossKind::Itcon => objectives::loss_itcon(&mut tape, &b, tau),
        LossKind::Mse => objectives::loss_mse(&mut tape, &b),
        LossKind::Ts => objectives::loss_ts(&mut tape, &b, &case.weights),
        LossKind::Sset => objectives::loss_sset(&mut tape, &b, &case.selected, tau),
        LossKind::Total => objectives::loss_total(&mut tape, &b, &case.selected, &case.weights),
    }
    .unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut flat = Vec::new();
    let push = |flat: &mut Vec<f64>, vars: &MapperVars| {
        for var in vars.all() {
            flat.extend(grads.get(var).unwrap().data().iter().map(|&x| x as f64));
        }
    };
    push(&mut flat, &phi);
    push(&mut flat, &phi_ts);
    (tape.value(loss).item().unwrap(), flat)
}

/// Central differences of the reference loss.
pub fn finite_difference(case: &Case, shapes: &ParamShapes, at: &[f64], step: f64) -> Vec<f64> {
    let mut x = at.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + step;
            let up = reference_loss(case, shapes, &x);
            x[i] = orig - step;
            let down = reference_loss(case, shapes, &x);
            x[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(a.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

// ---------------------------------------------------------------- random data

pub fn random_units(rng: &mut DetRng, n: usize, d: usize) -> Tensor {
    let data: Vec<f32> = (0..n * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    numerics::l2_normalize_rows(&Tensor::matrix(n, d, data).unwrap()).unwrap()
}

// ---------------------------------------------------------------- S-Set

pub struct RefSelection {
    pub argmax: Vec<usize>,
    pub mask_f: Vec<bool>,
    pub mask_s: Vec<bool>,
    pub selected: Vec<usize>,
}

/// Softmax over each image's caption similarities, argmax with lowest-index
/// ties, caption agreement against `lambda`.
pub fn reference_sset(images: &Tensor, texts: &Tensor, sigma: f64, lambda: f64) -> RefSelection {
    let v = Mat::from_tensor(images);
    let w = Mat::from_tensor(texts);
    let n = v.r;
    let mut argmax = Vec::new();
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| v.row(i).iter().zip(w.row(j)).map(|(a, b)| a * b).sum::<f64>() / sigma)
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        let u: Vec<f64> = logits.iter().map(|l| (l - m).exp() / z).collect();
        let mut best = 0;
        for j in 1..n {
            if u[j] > u[best] {
                best = j;
            }
        }
        argmax.push(best);
    }
    let mask_f: Vec<bool> = argmax.iter().enumerate().map(|(i, &a)| a != i).collect();
    let mask_s: Vec<bool> = argmax
        .iter()
        .enumerate()
        .map(|(i, &a)| w.row(a).iter().zip(w.row(i)).map(|(x, y)| x * y).sum::<f64>() >= lambda)
        .collect();
    let selected = (0..n).filter(|&i| mask_f[i] && mask_s[i]).collect();
    RefSelection {
        argmax,
        mask_f,
        mask_s,
        selected,
    }
}

// ---------------------------------------------------------------- retrieval

/// Full ordering by repeated extraction of the best remaining item.
pub fn reference_rank(ids: &[String], vectors: &Tensor, q: &Tensor) -> Vec<String> {
    let scores: Vec<f32> = (0..ids.len()).map(|i| numerics::dot(vectors.row(i), q.data())).collect();
    let mut left: Vec<usize> = (0..ids.len()).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for p in 1..left.len() {
            let (a, b) = (left[p], left[best]);
            if scores[a] > scores[b] || (scores[a] == scores[b] && ids[a] < ids[b]) {
                best = p;
            }
        }
        out.push(ids[left.remove(best)].clone());
    }
    out
}

pub fn reference_recall(order: &[Vec<String>], queries: &[Query], k: usize) -> f64 {
    let mut hits = 0.0;
    for (o, q) in order.iter().zip(queries) {
        let first = o.iter().position(|id| q.target_ids.contains(id));
        if matches!(first, Some(r) if r < k) {
            hits += 1.0;
        }
    }
    hits / queries.len() as f64
}

pub fn reference_map(order: &[Vec<String>], queries: &[Query], k: usize) -> f64 {
    let mut total = 0.0;
    for (o, q) in order.iter().zip(queries) {
        let rel: Vec<f64> = o.iter().take(k).map(|id| if q.target_ids.contains(id) { 1.0 } else { 0.0 }).collect();
        let mut ap = 0.0;
        for r in 0..rel.len() {
            let precision = rel[..=r].iter().sum::<f64>() / (r + 1) as f64;
            ap += precision * rel[r];
        }
        total += ap / (k.min(q.target_ids.len()) as f64);
    }
    total / queries.len() as f64
}

pub fn ranked_ids(r: &RankedResult) -> Vec<String> {
    r.ids().map(str::to_string).collect()
}
