use crate::error::{Error, Result};

/// Default lower bound on row norms accepted by [`l2_normalize_rows`].
pub const NORM_EPS: f32 = 1e-12;

/// Dense row-major `f32` array of rank 0, 1 or 2.
///
/// A rank-1 tensor of length `n` is treated as a `1 x n` matrix by the
/// matrix kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.len() > 2 {
            return Err(Error::shape("tensor", format!("rank {} unsupported", shape.len())));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
            requires_grad: false,
        }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            requires_grad: false,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor {
            shape: vec![n, n],
            data,
            requires_grad: false,
        }
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(
                    "from_rows",
                    format!("row {} has {} values, expected {}", i, r.len(), cols),
                ));
            }
            data.extend_from_slice(r);
        }
        Tensor::matrix(rows.len(), cols, data)
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&s| s == 1)
    }

    pub fn item(&self) -> Result<f32> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::Contract(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    /// `(rows, cols)` viewing rank-1 tensors as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => (self.shape[0], self.shape[1]),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.len() > 2 {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
        }
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f32]) -> f32 {
    dot(a, a).sqrt()
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2();
    let (k2, n) = b.dims2();
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}: inner dimensions {} != {}", a.shape, b.shape, k, k2),
        ));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Pairwise row dot products `a · bᵀ`, shape `[rows(a), rows(b)]`.
pub fn row_similarity(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, d) = a.dims2();
    let (n, d2) = b.dims2();
    if d != d2 {
        return Err(Error::shape(
            "row_similarity",
            format!("row widths {} and {}", d, d2),
        ));
    }
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let ar = &a.data[i * d..(i + 1) * d];
        for j in 0..n {
            out.push(dot(ar, &b.data[j * d..(j + 1) * d]));
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = a.dims2();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::from_parts(vec![n, m], out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_parts(a.shape.clone(), data))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
    Ok(Tensor::from_parts(a.shape.clone(), data))
}

pub fn scale(a: &Tensor, c: f32) -> Tensor {
    Tensor::from_parts(a.shape.clone(), a.data.iter().map(|x| x * c).collect())
}

/// Adds a length-`n` bias to every row of an `m x n` matrix.
pub fn add_bias(a: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2();
    if bias.len() != n {
        return Err(Error::shape(
            "add_bias",
            format!("bias of {} for rows of {}", bias.len(), n),
        ));
    }
    let mut data = a.data.clone();
    for i in 0..m {
        for (o, b) in data[i * n..(i + 1) * n].iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
    Ok(Tensor::from_parts(a.shape.clone(), data))
}

pub fn tanh(a: &Tensor) -> Tensor {
    Tensor::from_parts(a.shape.clone(), a.data.iter().map(|x| x.tanh()).collect())
}

/// Column-wise concatenation of matrices with equal row counts.
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let rows = parts
        .first()
        .map(|p| p.rows())
        .ok_or_else(|| Error::shape("concat", "no inputs"))?;
    if let Some(p) = parts.iter().find(|p| p.rows() != rows) {
        return Err(Error::shape(
            "concat",
            format!("row counts {} and {}", rows, p.rows()),
        ));
    }
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(rows * total);
    for i in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Ok(Tensor::from_parts(vec![rows, total], data))
}

pub fn select_rows(a: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let (m, n) = a.dims2();
    let mut data = Vec::with_capacity(indices.len() * n);
    for &i in indices {
        if i >= m {
            return Err(Error::Index { index: i, len: m });
        }
        data.extend_from_slice(a.row(i));
    }
    Ok(Tensor::from_parts(vec![indices.len(), n], data))
}

/// Normalizes every row to unit Euclidean norm; also returns the original
/// norms.
pub fn l2_normalize_rows_with_norms(a: &Tensor, eps: f32) -> Result<(Tensor, Vec<f32>)> {
    let (m, n) = a.dims2();
    let mut data = a.data.clone();
    let mut norms = Vec::with_capacity(m);
    for i in 0..m {
        let row = &mut data[i * n..(i + 1) * n];
        // accumulate in f64 so very large or very small rows do not overflow
        let nrm = row.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
        if !(nrm > f64::from(eps)) {
            return Err(Error::Degenerate {
                op: "l2_normalize_rows",
                detail: format!("row {} has norm {:e}", i, nrm),
            });
        }
        for x in row.iter_mut() {
            *x = (f64::from(*x) / nrm) as f32;
        }
        norms.push(nrm as f32);
    }
    Ok((Tensor::from_parts(a.shape.clone(), data), norms))
}

pub fn l2_normalize_rows(a: &Tensor) -> Result<Tensor> {
    l2_normalize_rows_with_norms(a, NORM_EPS).map(|(t, _)| t)
}

fn check_temperature(temperature: f32) -> Result<()> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::param(
            "temperature",
            format!("must be positive and finite, got {}", temperature),
        ));
    }
    Ok(())
}

/// Row-wise softmax of `logits / temperature`, stabilized by subtracting the
/// row maximum.
pub fn scaled_row_softmax(logits: &Tensor, temperature: f32) -> Result<Tensor> {
    check_temperature(temperature)?;
    let (m, n) = logits.dims2();
    let mut data = Vec::with_capacity(m * n);
    for i in 0..m {
        let row = logits.row(i);
        let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = row
            .iter()
            .map(|&x| ((f64::from(x) - f64::from(mx)) / f64::from(temperature)).exp())
            .collect();
        let z: f64 = exps.iter().sum();
        data.extend(exps.iter().map(|e| (e / z) as f32));
    }
    Ok(Tensor::from_parts(logits.shape.clone(), data))
}

/// Row-wise log-softmax of `logits / temperature`.
pub fn scaled_row_log_softmax(logits: &Tensor, temperature: f32) -> Result<Tensor> {
    check_temperature(temperature)?;
    let (m, n) = logits.dims2();
    let t = f64::from(temperature);
    let mut data = Vec::with_capacity(m * n);
    for i in 0..m {
        let row = logits.row(i);
        let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let lse = row
            .iter()
            .map(|&x| ((f64::from(x) - f64::from(mx)) / t).exp())
            .sum::<f64>()
            .ln();
        data.extend(
            row.iter()
                .map(|&x| ((f64::from(x) - f64::from(mx)) / t - lse) as f32),
        );
    }
    Ok(Tensor::from_parts(logits.shape.clone(), data))
}

pub fn diag(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2();
    if m != n {
        return Err(Error::shape("diag", format!("non-square {}x{}", m, n)));
    }
    Ok(Tensor::vector((0..m).map(|i| a.data[i * n + i]).collect()))
}

pub fn sum(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data.iter().map(|&x| f64::from(x)).sum::<f64>() as f32)
}

pub fn mean(a: &Tensor) -> Result<Tensor> {
    if a.is_empty() {
        return Err(Error::shape("mean", "empty tensor"));
    }
    let s = a.data.iter().map(|&x| f64::from(x)).sum::<f64>();
    Ok(Tensor::scalar((s / a.len() as f64) as f32))
}

/// Mean squared difference over all elements.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mse", a, b)?;
    if a.is_empty() {
        return Err(Error::shape("mse", "empty tensor"));
    }
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    Ok(Tensor::scalar((s / a.len() as f64) as f32))
}
