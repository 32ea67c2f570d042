//! Memory banks, the cosine critic, negative sampling and the inter-intra
//! contrastive loss.
//!
//! For an anchor `a` with positive `p`, view-bank negatives `w_1..w_k` and
//! intra-negative bank rows `n_1..n_{k+1}`, the directional loss is
//!
//! ```text
//! L = -log( h(a,p) / (h(a,p) + Σ h(a,w_j) + Σ h(a,n_j)) ),   h(x,y) = exp(cos(x,y) / τ)
//! ```
//!
//! evaluated as a log-sum-exp over the `2(k+1)` scores. Bank rows are constants
//! with respect to differentiation.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::encoder::EmbeddingVector;
use crate::seed::rng_for;
use crate::{IicError, Result};

/// Default softmax temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BankRole {
    View1,
    View2,
    IntraNeg,
}

impl BankRole {
    pub fn code(self) -> u8 {
        match self {
            BankRole::View1 => 1,
            BankRole::View2 => 2,
            BankRole::IntraNeg => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(BankRole::View1),
            2 => Some(BankRole::View2),
            3 => Some(BankRole::IntraNeg),
            _ => None,
        }
    }
}

/// `N×d` matrix of unit rows; row `i` belongs to training video `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    rows: Array2<f64>,
    role: BankRole,
}

fn unit_rows_check(rows: &Array2<f64>) -> Result<()> {
    for (i, row) in rows.axis_iter(Axis(0)).enumerate() {
        let n = row.dot(&row).sqrt();
        if !n.is_finite() || (n - 1.0).abs() > 1e-6 {
            return Err(IicError::InvalidArgument(format!("bank row {i} has norm {n}")));
        }
    }
    Ok(())
}

impl MemoryBank {
    /// Wraps existing rows, which must all be unit length.
    pub fn from_rows(rows: Array2<f64>, role: BankRole) -> Result<Self> {
        unit_rows_check(&rows)?;
        Ok(Self { rows, role })
    }

    /// Rows drawn i.i.d. uniformly on the unit sphere.
    pub fn random(n: usize, d: usize, role: BankRole, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[0xBA4C, role.code() as u64]);
        let mut rows = Array2::zeros((n, d));
        for mut row in rows.axis_iter_mut(Axis(0)) {
            loop {
                row.iter_mut().for_each(|v: &mut f64| *v = rng.sample(StandardNormal));
                let norm = row.dot(&row).sqrt();
                if norm > 1e-12 {
                    row /= norm;
                    break;
                }
            }
        }
        Self { rows, role }
    }

    pub fn role(&self) -> BankRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn rows(&self) -> ArrayView2<'_, f64> {
        self.rows.view()
    }

    pub fn row(&self, i: usize) -> Result<ArrayView1<'_, f64>> {
        self.check_index(i)?;
        Ok(self.rows.row(i))
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.len() {
            return Err(IicError::IndexOutOfRange { index: i, len: self.len() });
        }
        Ok(())
    }

    /// Overwrites row `i` with `v`.
    pub fn update(&mut self, i: usize, v: &EmbeddingVector) -> Result<()> {
        self.update_with_momentum(i, v, 0.0)
    }

    /// `row_i ← normalize(m·row_i + (1−m)·v)`; `m = 0` is a plain overwrite.
    pub fn update_with_momentum(&mut self, i: usize, v: &EmbeddingVector, momentum: f64) -> Result<()> {
        self.check_index(i)?;
        if v.dim() != self.dim() {
            return Err(IicError::Shape(format!(
                "feature of dim {} for bank of dim {}",
                v.dim(),
                self.dim()
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(IicError::InvalidArgument(format!("bank momentum {momentum} not in [0, 1)")));
        }
        let mut row = self.rows.row_mut(i);
        if momentum == 0.0 {
            row.assign(&ArrayView1::from(v.as_slice()));
            return Ok(());
        }
        let blended: Vec<f64> =
            row.iter().zip(v.iter()).map(|(r, x)| momentum * r + (1.0 - momentum) * x).collect();
        let blended = EmbeddingVector::normalize(blended)?;
        row.assign(&ArrayView1::from(blended.as_slice()));
        Ok(())
    }

    /// Gathers rows by index into a `len(indices)×d` matrix.
    pub fn gather(&self, indices: &[usize]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((indices.len(), self.dim()));
        for (mut dst, &i) in out.axis_iter_mut(Axis(0)).zip(indices) {
            dst.assign(&self.row(i)?);
        }
        Ok(out)
    }
}

/// The three banks of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBanks {
    pub view1: MemoryBank,
    pub view2: MemoryBank,
    pub intra_neg: MemoryBank,
}

impl MemoryBanks {
    pub fn len(&self) -> usize {
        self.view1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.view1.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.view1.dim()
    }

    pub fn iter(&self) -> impl Iterator<Item = &MemoryBank> {
        [&self.view1, &self.view2, &self.intra_neg].into_iter()
    }
}

/// Three banks of `n` rows initialised uniformly on the unit sphere.
pub fn init_banks(n: usize, d: usize, seed: u64) -> MemoryBanks {
    MemoryBanks {
        view1: MemoryBank::random(n, d, BankRole::View1, seed),
        view2: MemoryBank::random(n, d, BankRole::View2, seed),
        intra_neg: MemoryBank::random(n, d, BankRole::IntraNeg, seed),
    }
}

/// Positive temperature of the critic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(IicError::InvalidArgument(format!("temperature must be > 0, got {tau}")));
        }
        Ok(Self(tau))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self(DEFAULT_TEMPERATURE)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(IicError::Shape(format!("dims {} and {} differ", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na < 1e-12 || nb < 1e-12 {
        return Err(IicError::DegenerateNorm);
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// `exp(cos(a, b) / τ)`. Inputs are re-normalised, so any nonzero vectors work.
pub fn critic(a: &[f64], b: &[f64], tau: Temperature) -> Result<f64> {
    Ok((cosine(a, b)? / tau.get()).exp())
}

/// Negatives for one anchor: `k` view-bank rows other than the anchor's own
/// and `k+1` intra-negative bank rows, which may include it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeDraw {
    pub anchor: usize,
    pub view_negatives: Vec<usize>,
    pub intra_negatives: Vec<usize>,
}

impl NegativeDraw {
    /// Number of terms in the softmax denominator, positive included.
    pub fn denominator_terms(&self) -> usize {
        1 + self.view_negatives.len() + self.intra_negatives.len()
    }

    /// Drops the intra-negatives, giving the two-view baseline draw.
    pub fn without_intra(mut self) -> Self {
        self.intra_negatives.clear();
        self
    }
}

/// Samples with replacement: view negatives uniform over `{0..n-1} \ {i}`,
/// intra-negatives uniform over `{0..n-1}`.
pub fn sample_negatives<R: Rng + ?Sized>(n: usize, k: usize, i: usize, rng: &mut R) -> Result<NegativeDraw> {
    if i >= n {
        return Err(IicError::IndexOutOfRange { index: i, len: n });
    }
    if k == 0 || k > n - 1 {
        return Err(IicError::InvalidArgument(format!("k = {k} must lie in 1..={}", n - 1)));
    }
    let view_negatives = (0..k)
        .map(|_| {
            let j = rng.random_range(0..n - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        })
        .collect();
    let intra_negatives = (0..=k).map(|_| rng.random_range(0..n)).collect();
    Ok(NegativeDraw { anchor: i, view_negatives, intra_negatives })
}

/// Non-parametric weights for one direction: gathered view-bank rows, gathered
/// intra-negative rows, and their row concatenation.
#[derive(Debug, Clone, PartialEq)]
pub struct FetchedWeights {
    pub view: Array2<f64>,
    pub intra_neg: Array2<f64>,
    pub concat: Array2<f64>,
}

/// Gathers the rows named by `draw` from a view bank and the intra-negative bank.
pub fn fetch_weights(view_bank: &MemoryBank, neg_bank: &MemoryBank, draw: &NegativeDraw) -> Result<FetchedWeights> {
    if view_bank.dim() != neg_bank.dim() {
        return Err(IicError::Shape("view and intra-negative banks differ in dim".into()));
    }
    let view = view_bank.gather(&draw.view_negatives)?;
    let intra_neg = neg_bank.gather(&draw.intra_negatives)?;
    let concat = ndarray::concatenate(Axis(0), &[view.view(), intra_neg.view()])
        .expect("column counts checked");
    Ok(FetchedWeights { view, intra_neg, concat })
}

/// Loss of one direction with gradients for both fresh embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionalLoss {
    pub loss: f64,
    pub grad_anchor: Vec<f64>,
    pub grad_positive: Vec<f64>,
}

/// Removes the component of `g` along the unit vector `u` and divides by the
/// original norm: the Jacobian-transpose of `x ↦ x/|x|`.
fn through_normalization(g: &[f64], u: &[f64], n: f64) -> Vec<f64> {
    let along: f64 = g.iter().zip(u).map(|(a, b)| a * b).sum();
    g.iter().zip(u).map(|(gi, ui)| (gi - along * ui) / n).collect()
}

/// The directional loss against an explicit weight matrix (one negative per row).
pub fn contrast_against(
    anchor: &[f64],
    positive: &[f64],
    negatives: ArrayView2<'_, f64>,
    tau: Temperature,
) -> Result<DirectionalLoss> {
    let d = anchor.len();
    if positive.len() != d || negatives.ncols() != d {
        return Err(IicError::Shape(format!(
            "anchor dim {d}, positive dim {}, weight dim {}",
            positive.len(),
            negatives.ncols()
        )));
    }
    let (na, np) = (norm(anchor), norm(positive));
    if na < 1e-12 || np < 1e-12 {
        return Err(IicError::DegenerateNorm);
    }
    let ua = Array1::from_iter(anchor.iter().map(|v| v / na));
    let up = Array1::from_iter(positive.iter().map(|v| v / np));
    let inv_tau = 1.0 / tau.get();

    let row_norms: Array1<f64> = negatives.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if row_norms.iter().any(|&n| n < 1e-12) {
        return Err(IicError::DegenerateNorm);
    }
    let pos_score = ua.dot(&up) * inv_tau;
    let neg_scores = negatives.dot(&ua) / &row_norms * inv_tau;

    let max = neg_scores.iter().copied().fold(pos_score, f64::max);
    let pos_w = (pos_score - max).exp();
    let neg_w = neg_scores.mapv(|s| (s - max).exp());
    let z = pos_w + neg_w.sum();
    let loss = max + z.ln() - pos_score;
    if !loss.is_finite() {
        return Err(IicError::NonFinite(format!("contrastive loss {loss}")));
    }

    // dL/ds_0 = p_0 - 1, dL/ds_j = p_j.
    let coef_pos = pos_w / z - 1.0;
    let coef_neg = (neg_w / z) / &row_norms;
    let mut g_ua = negatives.t().dot(&coef_neg);
    g_ua.scaled_add(coef_pos, &up);
    g_ua *= inv_tau;
    let g_up = &ua * (coef_pos * inv_tau);

    Ok(DirectionalLoss {
        loss,
        grad_anchor: through_normalization(g_ua.as_slice().expect("owned"), ua.as_slice().expect("owned"), na),
        grad_positive: through_normalization(g_up.as_slice().expect("owned"), up.as_slice().expect("owned"), np),
    })
}

/// One direction of the contrastive loss: `anchor` against `positive`, the
/// `view_bank` rows in `draw.view_negatives` and the `neg_bank` rows in
/// `draw.intra_negatives`.
pub fn loss_one_direction(
    anchor: &[f64],
    positive: &[f64],
    view_bank: &MemoryBank,
    neg_bank: &MemoryBank,
    draw: &NegativeDraw,
    tau: Temperature,
) -> Result<DirectionalLoss> {
    let weights = fetch_weights(view_bank, neg_bank, draw)?;
    contrast_against(anchor, positive, weights.concat.view(), tau)
}

/// Independent draws for the two directions of one training example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectionalDraws {
    /// View-1 anchored: negatives come from the view-2 bank.
    pub view1_anchor: NegativeDraw,
    /// View-2 anchored: negatives come from the view-1 bank.
    pub view2_anchor: NegativeDraw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub loss: f64,
    pub view1_direction: f64,
    pub view2_direction: f64,
    pub grad_v1: Vec<f64>,
    pub grad_v2: Vec<f64>,
}

/// Symmetric two-direction loss; gradients accumulate per embedding.
pub fn total_loss(
    v1: &[f64],
    v2: &[f64],
    banks: &MemoryBanks,
    draws: &DirectionalDraws,
    tau: Temperature,
) -> Result<TotalLoss> {
    let a = loss_one_direction(v1, v2, &banks.view2, &banks.intra_neg, &draws.view1_anchor, tau)?;
    let b = loss_one_direction(v2, v1, &banks.view1, &banks.intra_neg, &draws.view2_anchor, tau)?;
    let sum = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p + q).collect::<Vec<_>>();
    Ok(TotalLoss {
        loss: a.loss + b.loss,
        view1_direction: a.loss,
        view2_direction: b.loss,
        grad_v1: sum(&a.grad_anchor, &b.grad_positive),
        grad_v2: sum(&a.grad_positive, &b.grad_anchor),
    })
}
