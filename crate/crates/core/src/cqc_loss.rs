//! Cross quantized contrastive loss.
//!
//! Views are interleaved: row `2n` holds the first view of item `n`, row
//! `2n + 1` the second. The anchor of one view (deep descriptor) is compared
//! against the targets (quantized descriptors) of the *opposite* view type
//! only, so each directed pair loss looks at half of the batch. By default
//! the positive itself is left out of the softmax denominator, which means
//! a pair loss can be negative.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, norm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CqcConfig {
    pub tau_cqc: f64,
    /// Add the positive back into the denominator (standard InfoNCE).
    pub include_positive_in_denominator: bool,
}

impl Default for CqcConfig {
    fn default() -> Self {
        Self {
            tau_cqc: 0.5,
            include_positive_in_denominator: false,
        }
    }
}

impl CqcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_cqc > 0.0) {
            return Err(Error::Parameter(format!("tau_cqc must be > 0, got {}", self.tau_cqc)));
        }
        Ok(())
    }
}

/// Cosine similarities between anchors and targets of opposite view type.
///
/// `first_second[a][b] = cos(anchor[2a], target[2b + 1])` and
/// `second_first[a][b] = cos(anchor[2a + 1], target[2b])`.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossSimMatrix {
    n: usize,
    first_second: Vec<f64>,
    second_first: Vec<f64>,
}

impl CrossSimMatrix {
    pub fn new(n: usize, first_second: Vec<f64>, second_first: Vec<f64>) -> Result<Self> {
        if n == 0 || first_second.len() != n * n || second_first.len() != n * n {
            return Err(Error::Dimension(format!(
                "similarity matrices must both be {n}x{n}"
            )));
        }
        if first_second.iter().chain(&second_first).any(|s| !(-1.0..=1.0).contains(s)) {
            return Err(Error::Input("cosine similarities must lie in [-1, 1]".into()));
        }
        Ok(Self { n, first_second, second_first })
    }

    /// Builds both matrices from interleaved `[2N, D]` anchors and targets.
    pub fn from_views(anchors: &Tensor<f64>, targets: &Tensor<f64>) -> Result<Self> {
        let (ua, _) = unit_rows(anchors)?;
        let (ut, _) = unit_rows(targets)?;
        if anchors.shape() != targets.shape() {
            return Err(Error::Dimension("anchors and targets differ in shape".into()));
        }
        Ok(sims_from_units(&ua, &ut, anchors.rows() / 2, anchors.row_len()))
    }

    /// Items per batch (`N_B`).
    pub fn batch(&self) -> usize {
        self.n
    }

    pub fn first_second(&self, a: usize, b: usize) -> f64 {
        self.first_second[a * self.n + b]
    }

    pub fn second_first(&self, a: usize, b: usize) -> f64 {
        self.second_first[a * self.n + b]
    }

    /// Similarity between anchor view `i` and target view `j` (opposite parity).
    pub fn get(&self, i: usize, j: usize) -> Result<f64> {
        let (row, col) = self.locate(i, j)?;
        Ok(row[col])
    }

    fn locate(&self, i: usize, j: usize) -> Result<(&[f64], usize)> {
        if i >= 2 * self.n || j >= 2 * self.n {
            return Err(Error::Usage(format!(
                "view index out of range for a batch of {} items",
                self.n
            )));
        }
        if i % 2 == j % 2 {
            return Err(Error::Usage(format!(
                "views {i} and {j} share a parity; correlated pairs are always opposite views"
            )));
        }
        let m = if i % 2 == 0 { &self.first_second } else { &self.second_first };
        let a = i / 2;
        Ok((&m[a * self.n..(a + 1) * self.n], j / 2))
    }
}

fn unit_rows(x: &Tensor<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.rank() != 2 || x.rows() % 2 != 0 || x.rows() == 0 {
        return Err(Error::Dimension(format!(
            "expected interleaved [2N, D] views, got {:?}",
            x.shape()
        )));
    }
    let mut units = Vec::with_capacity(x.len());
    let mut norms = Vec::with_capacity(x.rows());
    for (r, row) in x.iter_rows().enumerate() {
        let nr = norm(row);
        if nr == 0.0 || !nr.is_finite() {
            return Err(Error::DegenerateInput(format!("row {r} has zero or non-finite norm")));
        }
        units.extend(row.iter().map(|v| v / nr));
        norms.push(nr);
    }
    Ok((units, norms))
}

fn unit_row(u: &[f64], r: usize, d: usize) -> &[f64] {
    &u[r * d..(r + 1) * d]
}

fn sims_from_units(ua: &[f64], ut: &[f64], n: usize, d: usize) -> CrossSimMatrix {
    let build = |anchor_off: usize, target_off: usize| -> Vec<f64> {
        (0..n)
            .into_par_iter()
            .flat_map_iter(|a| {
                let ra = unit_row(ua, 2 * a + anchor_off, d);
                (0..n).map(move |b| {
                    let rt = unit_row(ut, 2 * b + target_off, d);
                    crate::numerics::dot(ra, rt).clamp(-1.0, 1.0)
                })
            })
            .collect()
    };
    CrossSimMatrix {
        n,
        first_second: build(0, 1),
        second_first: build(1, 0),
    }
}

/// Loss of one similarity row with the positive at column `pos`.
fn row_loss(row: &[f64], pos: usize, cfg: &CqcConfig) -> f64 {
    let logits: Vec<f64> = row
        .iter()
        .enumerate()
        .filter(|&(b, _)| cfg.include_positive_in_denominator || b != pos)
        .map(|(_, s)| s / cfg.tau_cqc)
        .collect();
    if logits.is_empty() {
        // A single-item batch has no negatives: the denominator is empty.
        return f64::INFINITY;
    }
    log_sum_exp(&logits) - row[pos] / cfg.tau_cqc
}

/// `ℓ(i, j)` for anchor view `i` and positive target view `j`.
pub fn pair_loss(sims: &CrossSimMatrix, i: usize, j: usize, cfg: &CqcConfig) -> Result<f64> {
    cfg.validate()?;
    let (row, col) = sims.locate(i, j)?;
    Ok(row_loss(row, col, cfg))
}

/// Mean of the `2N` directed pair losses.
pub fn batch_loss(sims: &CrossSimMatrix, cfg: &CqcConfig) -> Result<f64> {
    cfg.validate()?;
    let n = sims.n;
    let mut total = 0.0;
    for a in 0..n {
        total += row_loss(&sims.first_second[a * n..(a + 1) * n], a, cfg);
        total += row_loss(&sims.second_first[a * n..(a + 1) * n], a, cfg);
    }
    Ok(total / (2 * n) as f64)
}

/// `∂L/∂S` for one row, scaled by `scale`.
fn row_grad(row: &[f64], pos: usize, cfg: &CqcConfig, scale: f64, out: &mut [f64]) {
    let tau = cfg.tau_cqc;
    let in_denom = |b: usize| cfg.include_positive_in_denominator || b != pos;
    let max = row
        .iter()
        .enumerate()
        .filter(|&(b, _)| in_denom(b))
        .map(|(_, s)| s / tau)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (b, o) in out.iter_mut().enumerate() {
        *o = if in_denom(b) { (row[b] / tau - max).exp() } else { 0.0 };
        z += *o;
    }
    for o in out.iter_mut() {
        *o = *o / z * scale / tau;
    }
    out[pos] -= scale / tau;
}

/// Gradient of the batch loss with respect to both similarity matrices,
/// laid out like [`CrossSimMatrix`].
pub fn sim_gradients(sims: &CrossSimMatrix, cfg: &CqcConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    cfg.validate()?;
    let n = sims.n;
    let scale = 1.0 / (2 * n) as f64;
    let mut g1 = vec![0.0; n * n];
    let mut g2 = vec![0.0; n * n];
    for a in 0..n {
        row_grad(&sims.first_second[a * n..(a + 1) * n], a, cfg, scale, &mut g1[a * n..(a + 1) * n]);
        row_grad(&sims.second_first[a * n..(a + 1) * n], a, cfg, scale, &mut g2[a * n..(a + 1) * n]);
    }
    Ok((g1, g2))
}

/// Output of [`loss_backward`].
#[derive(Clone, Debug)]
pub struct LossGradients {
    pub loss: f64,
    pub anchors: Tensor<f64>,
    pub targets: Tensor<f64>,
}

/// Batch loss and its exact gradients with respect to the raw (unnormalized)
/// anchors and targets.
pub fn loss_backward(anchors: &Tensor<f64>, targets: &Tensor<f64>, cfg: &CqcConfig) -> Result<LossGradients> {
    cfg.validate()?;
    if anchors.shape() != targets.shape() {
        return Err(Error::Dimension("anchors and targets differ in shape".into()));
    }
    let (ua, na) = unit_rows(anchors)?;
    let (ut, nt) = unit_rows(targets)?;
    let (rows, d) = (anchors.rows(), anchors.row_len());
    let n = rows / 2;
    let sims = sims_from_units(&ua, &ut, n, d);
    let loss = batch_loss(&sims, cfg)?;
    let (g1, g2) = sim_gradients(&sims, cfg)?;

    let unit = |r: usize| r * d..(r + 1) * d;

    // Anchor row r: first view rows use (g1, sims.first_second) against odd
    // targets, second view rows use (g2, sims.second_first) against even ones.
    let grad_a: Vec<f64> = (0..rows)
        .into_par_iter()
        .flat_map_iter(|r| {
            let a = r / 2;
            let (g, s, toff) = if r % 2 == 0 {
                (&g1, &sims.first_second, 1)
            } else {
                (&g2, &sims.second_first, 0)
            };
            let ur = &ua[unit(r)];
            let mut acc = vec![0.0; d];
            let mut coef = 0.0;
            for b in 0..n {
                let gab = g[a * n + b];
                if gab == 0.0 {
                    continue;
                }
                coef += gab * s[a * n + b];
                let ut_b = &ut[unit(2 * b + toff)];
                acc.iter_mut().zip(ut_b).for_each(|(x, y)| *x += gab * y);
            }
            let inv = 1.0 / na[r];
            acc.into_iter().zip(ur).map(move |(x, u)| (x - coef * u) * inv)
        })
        .collect();

    // Target row r: odd rows are targets of first-view anchors (g1 column),
    // even rows targets of second-view anchors (g2 column).
    let grad_t: Vec<f64> = (0..rows)
        .into_par_iter()
        .flat_map_iter(|r| {
            let b = r / 2;
            let (g, s, aoff) = if r % 2 == 1 {
                (&g1, &sims.first_second, 0)
            } else {
                (&g2, &sims.second_first, 1)
            };
            let ur = &ut[unit(r)];
            let mut acc = vec![0.0; d];
            let mut coef = 0.0;
            for a in 0..n {
                let gab = g[a * n + b];
                if gab == 0.0 {
                    continue;
                }
                coef += gab * s[a * n + b];
                let ua_a = &ua[unit(2 * a + aoff)];
                acc.iter_mut().zip(ua_a).for_each(|(x, y)| *x += gab * y);
            }
            let inv = 1.0 / nt[r];
            acc.into_iter().zip(ur).map(move |(x, u)| (x - coef * u) * inv)
        })
        .collect();

    Ok(LossGradients {
        loss,
        anchors: Tensor::new_unchecked_values(vec![rows, d], grad_a)?,
        targets: Tensor::new_unchecked_values(vec![rows, d], grad_t)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn constant(n: usize, s: f64) -> CrossSimMatrix {
        CrossSimMatrix::new(n, vec![s; n * n], vec![s; n * n]).unwrap()
    }

    #[test]
    fn two_items_equal_sims_give_zero() {
        let sims = constant(2, 0.3);
        assert_eq!(pair_loss(&sims, 0, 1, &CqcConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn equal_sims_closed_form() {
        for n in [2, 4, 16, 256] {
            let sims = constant(n, -0.2);
            let cfg = CqcConfig::default();
            let expect = ((n - 1) as f64).ln();
            assert!((pair_loss(&sims, 2, 3, &cfg).unwrap() - expect).abs() < 1e-12);
            assert!((batch_loss(&sims, &cfg).unwrap() - expect).abs() < 1e-12);
        }
        assert!((((255f64).ln()) - 5.54126).abs() < 1e-5);
    }

    #[test]
    fn single_negative_hand_value() {
        // S(1,2) = 0.9, S(1,4) = 0.1 in one-based view numbering.
        let sims = CrossSimMatrix::new(2, vec![0.9, 0.1, 0.0, 0.0], vec![0.0; 4]).unwrap();
        let cfg = CqcConfig::default();
        let l = pair_loss(&sims, 0, 1, &cfg).unwrap();
        assert!((l - (-1.6)).abs() < 1e-12);
        // brute force: -log(exp(0.9/0.5) / exp(0.1/0.5))
        let brute = -((0.9f64 / 0.5).exp() / (0.1f64 / 0.5).exp()).ln();
        assert!((l - brute).abs() < 1e-12);
    }

    #[test]
    fn symmetric_pair_losses_average() {
        let sims = CrossSimMatrix::new(2, vec![0.9, 0.1, 0.1, 0.9], vec![0.9, 0.1, 0.1, 0.9]).unwrap();
        let cfg = CqcConfig::default();
        let a = pair_loss(&sims, 0, 1, &cfg).unwrap();
        assert!((batch_loss(&sims, &cfg).unwrap() - a).abs() < 1e-15);
    }

    #[test]
    fn same_parity_is_a_contract_violation() {
        let sims = constant(3, 0.0);
        let cfg = CqcConfig::default();
        assert!(matches!(pair_loss(&sims, 0, 2, &cfg), Err(Error::Usage(_))));
        assert!(matches!(pair_loss(&sims, 1, 3, &cfg), Err(Error::Usage(_))));
        assert!(matches!(pair_loss(&sims, 0, 9, &cfg), Err(Error::Usage(_))));
    }

    #[test]
    fn bad_tau_rejected() {
        let cfg = CqcConfig { tau_cqc: 0.0, ..Default::default() };
        assert!(matches!(batch_loss(&constant(2, 0.0), &cfg), Err(Error::Parameter(_))));
    }

    #[test]
    fn sim_gradient_rows_sum_to_zero() {
        let mut rng = Rng::new(7, 0);
        let n = 5;
        let m1: Vec<f64> = (0..n * n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let m2: Vec<f64> = (0..n * n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let sims = CrossSimMatrix::new(n, m1, m2).unwrap();
        for include in [false, true] {
            let cfg = CqcConfig { tau_cqc: 0.5, include_positive_in_denominator: include };
            let (g1, g2) = sim_gradients(&sims, &cfg).unwrap();
            for a in 0..n {
                for g in [&g1, &g2] {
                    let row = &g[a * n..(a + 1) * n];
                    assert!(row.iter().sum::<f64>().abs() < 1e-15);
                    let pos = row[a];
                    if include {
                        assert!(pos < 0.0 && pos > -1.0 / (2.0 * n as f64 * 0.5));
                    } else {
                        // Positive excluded from the softmax: its gradient is the
                        // bare numerator term.
                        assert!((pos + 1.0 / (2.0 * n as f64 * 0.5)).abs() < 1e-15);
                    }
                    assert!(row.iter().enumerate().all(|(b, &v)| b == a || v >= 0.0));
                }
            }
        }
    }

    #[test]
    fn anchor_gradients_orthogonal_to_anchors() {
        let mut rng = Rng::new(8, 0);
        let (n, d) = (4, 6);
        let mk = |rng: &mut Rng| {
            Tensor::new(vec![2 * n, d], (0..2 * n * d).map(|_| rng.normal(0.0, 2.0)).collect()).unwrap()
        };
        let x = mk(&mut rng);
        let z = mk(&mut rng);
        let g = loss_backward(&x, &z, &CqcConfig::default()).unwrap();
        for r in 0..2 * n {
            let ip: f64 = g.anchors.row(r).iter().zip(x.row(r)).map(|(a, b)| a * b).sum();
            assert!(ip.abs() < 1e-9);
            let ip: f64 = g.targets.row(r).iter().zip(z.row(r)).map(|(a, b)| a * b).sum();
            assert!(ip.abs() < 1e-9);
        }
    }

    #[test]
    fn zero_norm_row_is_degenerate() {
        let x = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let z = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        assert!(matches!(
            loss_backward(&x, &z, &CqcConfig::default()),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn raising_positive_lowers_pair_loss() {
        let mut rng = Rng::new(9, 0);
        let n = 6;
        let mut m1: Vec<f64> = (0..n * n).map(|_| rng.uniform(-0.9, 0.9)).collect();
        let m2 = m1.clone();
        let cfg = CqcConfig::default();
        let before = pair_loss(&CrossSimMatrix::new(n, m1.clone(), m2.clone()).unwrap(), 4, 5, &cfg).unwrap();
        m1[2 * n + 2] += 0.05;
        let after = pair_loss(&CrossSimMatrix::new(n, m1, m2).unwrap(), 4, 5, &cfg).unwrap();
        assert!(after < before);
    }
}
