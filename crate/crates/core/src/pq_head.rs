//! Product-quantization head: `M` codebooks of `K` codewords each.
//!
//! Training uses the soft quantizer, a softmax-weighted combination of a
//! subspace's codewords by negative squared distance over `tau_q`. Indexing
//! uses hard nearest-codeword assignment. Soft sub-vectors are concatenated
//! without intra-normalization.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};
use crate::parallel::chunked_sum;

const GRAD_CHUNK: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct CodebookSet {
    m: usize,
    k: usize,
    subdim: usize,
    /// `[M][K][subdim]`, row-major.
    codewords: Vec<f64>,
}

impl CodebookSet {
    pub fn new(m: usize, k: usize, subdim: usize, codewords: Vec<f64>) -> Result<Self> {
        if m == 0 || subdim == 0 {
            return Err(Error::Config("codebook count and subdim must be positive".into()));
        }
        if !k.is_power_of_two() {
            return Err(Error::Config(format!("K must be a power of two, got {k}")));
        }
        if codewords.len() != m * k * subdim {
            return Err(Error::Dimension(format!(
                "{m}x{k}x{subdim} codebooks need {} values, got {}",
                m * k * subdim,
                codewords.len()
            )));
        }
        if codewords.iter().any(|c| !c.is_finite()) {
            return Err(Error::Input("non-finite codeword".into()));
        }
        Ok(Self { m, k, subdim, codewords })
    }

    /// Codewords drawn i.i.d. from `N(0, 1/subdim)`.
    pub fn random(m: usize, k: usize, subdim: usize, rng: &mut Rng) -> Result<Self> {
        let std = (1.0 / subdim as f64).sqrt();
        let cw = (0..m * k * subdim).map(|_| rng.normal(0.0, std)).collect();
        Self::new(m, k, subdim, cw)
    }

    pub fn from_tensor(t: &Tensor<f64>) -> Result<Self> {
        match t.shape() {
            &[m, k, s] => Self::new(m, k, s, t.data().to_vec()),
            s => Err(Error::Dimension(format!("codebooks must be [M, K, subdim], got {s:?}"))),
        }
    }

    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::new_unchecked_values(vec![self.m, self.k, self.subdim], self.codewords.clone())
            .expect("consistent by construction")
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn subdim(&self) -> usize {
        self.subdim
    }

    pub fn dim(&self) -> usize {
        self.m * self.subdim
    }

    /// Bits per sub-code, `log2 K`.
    pub fn code_bits(&self) -> u32 {
        self.k.trailing_zeros()
    }

    pub fn codewords(&self) -> &[f64] {
        &self.codewords
    }

    pub fn codewords_mut(&mut self) -> &mut [f64] {
        &mut self.codewords
    }

    pub fn codeword(&self, m: usize, k: usize) -> &[f64] {
        let o = (m * self.k + k) * self.subdim;
        &self.codewords[o..o + self.subdim]
    }

    fn book(&self, m: usize) -> &[f64] {
        let w = self.k * self.subdim;
        &self.codewords[m * w..(m + 1) * w]
    }

    fn check_descriptors(&self, x: &Tensor<f64>) -> Result<()> {
        x.expect_matrix(self.dim(), "descriptors")
    }
}

/// Hard assignments `[B, M]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeMatrix {
    m: usize,
    data: Vec<u32>,
}

impl CodeMatrix {
    pub fn new(m: usize, data: Vec<u32>) -> Result<Self> {
        if m == 0 || data.len() % m != 0 {
            return Err(Error::Dimension(format!(
                "{} indices do not form rows of {m}",
                data.len()
            )));
        }
        Ok(Self { m, data })
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.m
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn row(&self, n: usize) -> &[u32] {
        &self.data[n * self.m..(n + 1) * self.m]
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }
}

/// Softmax weights from [`soft_quantize`], `[B][M][K]`. Consumed by the
/// backward pass.
#[derive(Debug)]
pub struct SoftAssignTape {
    batch: usize,
    m: usize,
    k: usize,
    tau_q: f64,
    weights: Vec<f64>,
}

impl SoftAssignTape {
    pub fn weights(&self, n: usize, m: usize) -> &[f64] {
        let o = (n * self.m + m) * self.k;
        &self.weights[o..o + self.k]
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Softmax of `-‖x - c_k‖² / tau` over one codebook, written into `w`.
fn soft_weights(x: &[f64], book: &[f64], subdim: usize, tau: f64, w: &mut [f64]) {
    for (wk, c) in w.iter_mut().zip(book.chunks_exact(subdim)) {
        *wk = -sq_dist(x, c) / tau;
    }
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for wk in w.iter_mut() {
        *wk = (*wk - max).exp();
        sum += *wk;
    }
    w.iter_mut().for_each(|wk| *wk /= sum);
}

/// Soft product quantization of `[B, D]` descriptors.
pub fn soft_quantize(cb: &CodebookSet, x: &Tensor<f64>, tau_q: f64) -> Result<(Tensor<f64>, SoftAssignTape)> {
    if !(tau_q > 0.0) {
        return Err(Error::Parameter(format!("tau_q must be > 0, got {tau_q}")));
    }
    cb.check_descriptors(x)?;
    if x.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite descriptor".into()));
    }
    let (b, m, k, s) = (x.rows(), cb.m, cb.k, cb.subdim);
    let per_item: Vec<(Vec<f64>, Vec<f64>)> = (0..b)
        .into_par_iter()
        .map(|n| {
            let row = x.row(n);
            let mut z = vec![0.0; m * s];
            let mut w = vec![0.0; m * k];
            for mi in 0..m {
                let xs = &row[mi * s..(mi + 1) * s];
                let wm = &mut w[mi * k..(mi + 1) * k];
                soft_weights(xs, cb.book(mi), s, tau_q, wm);
                let zm = &mut z[mi * s..(mi + 1) * s];
                for (wk, c) in wm.iter().zip(cb.book(mi).chunks_exact(s)) {
                    zm.iter_mut().zip(c).for_each(|(a, cv)| *a += wk * cv);
                }
            }
            (z, w)
        })
        .collect();
    let mut z = Vec::with_capacity(b * m * s);
    let mut weights = Vec::with_capacity(b * m * k);
    for (zi, wi) in per_item {
        z.extend_from_slice(&zi);
        weights.extend_from_slice(&wi);
    }
    Ok((
        Tensor::new_unchecked_values(vec![b, m * s], z)?,
        SoftAssignTape {
            batch: b,
            m,
            k,
            tau_q,
            weights,
        },
    ))
}

/// Gradients of a scalar loss through [`soft_quantize`]: returns
/// `(∂L/∂codewords [M,K,subdim], ∂L/∂descriptors [B,D])`.
pub fn soft_quantize_backward(
    tape: SoftAssignTape,
    cb: &CodebookSet,
    x: &Tensor<f64>,
    grad_z: &Tensor<f64>,
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    cb.check_descriptors(x)?;
    if tape.batch != x.rows() || tape.m != cb.m || tape.k != cb.k {
        return Err(Error::Usage("tape does not match this forward pass".into()));
    }
    if grad_z.shape() != x.shape() {
        return Err(Error::Dimension(format!(
            "quantized gradient must be {:?}, got {:?}",
            x.shape(),
            grad_z.shape()
        )));
    }
    let (b, m, k, s, tau) = (x.rows(), cb.m, cb.k, cb.subdim, tape.tau_q);

    // dL/da_k = w_k (g·c_k - g·z); a_k = -‖x - c_k‖²/tau.
    let logit_grad = |n: usize, mi: usize, out: &mut [f64]| {
        let g = &grad_z.row(n)[mi * s..(mi + 1) * s];
        let w = tape.weights(n, mi);
        let gc: Vec<f64> = cb.book(mi).chunks_exact(s).map(|c| crate::numerics::dot(g, c)).collect();
        let gz: f64 = w.iter().zip(&gc).map(|(a, b)| a * b).sum();
        for kk in 0..k {
            out[kk] = w[kk] * (gc[kk] - gz);
        }
    };

    let grad_x: Vec<Vec<f64>> = (0..b)
        .into_par_iter()
        .map(|n| {
            let row = x.row(n);
            let mut gx = vec![0.0; m * s];
            let mut da = vec![0.0; k];
            for mi in 0..m {
                logit_grad(n, mi, &mut da);
                let xs = &row[mi * s..(mi + 1) * s];
                let gxs = &mut gx[mi * s..(mi + 1) * s];
                for (kk, c) in cb.book(mi).chunks_exact(s).enumerate() {
                    let f = -2.0 / tau * da[kk];
                    for j in 0..s {
                        gxs[j] += f * (xs[j] - c[j]);
                    }
                }
            }
            gx
        })
        .collect();

    let grad_c = chunked_sum(b, GRAD_CHUNK, m * k * s, |n, acc| {
        let row = x.row(n);
        let mut da = vec![0.0; k];
        for mi in 0..m {
            logit_grad(n, mi, &mut da);
            let g = &grad_z.row(n)[mi * s..(mi + 1) * s];
            let xs = &row[mi * s..(mi + 1) * s];
            let w = tape.weights(n, mi);
            for (kk, c) in cb.book(mi).chunks_exact(s).enumerate() {
                let dst = &mut acc[(mi * k + kk) * s..(mi * k + kk + 1) * s];
                let f = 2.0 / tau * da[kk];
                for j in 0..s {
                    dst[j] += w[kk] * g[j] + f * (xs[j] - c[j]);
                }
            }
        }
    });

    Ok((
        Tensor::new_unchecked_values(vec![m, k, s], grad_c)?,
        Tensor::new_unchecked_values(vec![b, m * s], grad_x.concat())?,
    ))
}

/// Index of the nearest codeword per subspace; ties go to the lowest index.
pub fn nearest_codeword(book: &[f64], subdim: usize, x: &[f64]) -> u32 {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (kk, c) in book.chunks_exact(subdim).enumerate() {
        let d = sq_dist(x, c);
        if d < best_d {
            best_d = d;
            best = kk;
        }
    }
    best as u32
}

pub fn hard_assign(cb: &CodebookSet, x: &Tensor<f64>) -> Result<CodeMatrix> {
    cb.check_descriptors(x)?;
    let s = cb.subdim;
    let data: Vec<u32> = (0..x.rows())
        .into_par_iter()
        .flat_map_iter(|n| {
            let row = x.row(n);
            (0..cb.m).map(move |mi| nearest_codeword(cb.book(mi), s, &row[mi * s..(mi + 1) * s]))
        })
        .collect();
    CodeMatrix::new(cb.m, data)
}

/// Concatenation of the selected codewords.
pub fn reconstruct(cb: &CodebookSet, codes: &CodeMatrix) -> Result<Tensor<f64>> {
    if codes.m() != cb.m {
        return Err(Error::Dimension(format!(
            "codes have {} sub-codes, codebooks {}",
            codes.m(),
            cb.m
        )));
    }
    let mut out = Vec::with_capacity(codes.rows() * cb.dim());
    for n in 0..codes.rows() {
        for (mi, &idx) in codes.row(n).iter().enumerate() {
            if idx as usize >= cb.k {
                return Err(Error::Corrupt(format!(
                    "code {idx} out of range for K={} (item {n}, subspace {mi})",
                    cb.k
                )));
            }
            out.extend_from_slice(cb.codeword(mi, idx as usize));
        }
    }
    Tensor::new_unchecked_values(vec![codes.rows(), cb.dim()], out)
}

/// Straight-through gradients for hard quantization: descriptor gradient is
/// the quantized gradient; each codeword collects the gradient of the
/// sub-vectors assigned to it.
pub fn hard_quantize_backward(cb: &CodebookSet, codes: &CodeMatrix, grad_z: &Tensor<f64>) -> Result<(Tensor<f64>, Tensor<f64>)> {
    grad_z.expect_matrix(cb.dim(), "quantized gradient")?;
    let (m, k, s) = (cb.m, cb.k, cb.subdim);
    let mut gc = vec![0.0; m * k * s];
    for n in 0..codes.rows() {
        let g = grad_z.row(n);
        for (mi, &idx) in codes.row(n).iter().enumerate() {
            let dst = &mut gc[(mi * k + idx as usize) * s..(mi * k + idx as usize + 1) * s];
            dst.iter_mut().zip(&g[mi * s..(mi + 1) * s]).for_each(|(a, b)| *a += b);
        }
    }
    Ok((Tensor::new_unchecked_values(vec![m, k, s], gc)?, grad_z.clone()))
}
