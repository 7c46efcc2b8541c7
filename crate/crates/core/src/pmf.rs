//! Probabilistic matrix factorization of a masked similarity matrix.
//!
//! The MAP objective under spherical Gaussian priors is
//!
//! ```text
//! L(U, V) = ‖A ⊙ (W − U Vᵀ)‖²_F + λ_U ‖U‖²_F + λ_V ‖V‖²_F
//! ```
//!
//! minimized here by alternating exact ridge solves: with `V` fixed every row
//! `u_i` solves `(V_oᵀ V_o + λ_U I) u_i = V_oᵀ w_o` over its observed entries,
//! and symmetrically for `V`. Each half-step is an exact block minimization,
//! so the loss trace never increases.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::{ridge_lstsq, solve_psd};
use crate::seed::rng_for;
use crate::similarity::MaskedMatrix;
use crate::{Error, Result};

pub const DEFAULT_LAMBDA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PmfOptions {
    pub max_iter: usize,
    /// Stop once a full iteration lowers the loss by less than `tol` relative.
    pub tol: f64,
    pub seed: u64,
    /// Independent random starts; the lowest final loss wins. ALS can stall
    /// in a poor basin from an unlucky start, even on exact low-rank data.
    #[serde(default = "one")]
    pub restarts: usize,
}

fn one() -> usize {
    1
}

impl Default for PmfOptions {
    fn default() -> Self {
        PmfOptions {
            max_iter: 500,
            tol: 1e-9,
            seed: 0,
            restarts: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PmfModel {
    /// N × K instance factors.
    pub u: DMatrix<f64>,
    /// L × K pair-structure factors; the frozen basis for projection.
    pub v: DMatrix<f64>,
    pub k: usize,
    pub lambda_u: f64,
    pub lambda_v: f64,
    /// Loss after initialization, then after every accepted half-step.
    pub loss_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub seed: u64,
    /// Rows / columns with no observed entry; their factors are zero.
    pub empty_rows: Vec<usize>,
    pub empty_cols: Vec<usize>,
}

impl PmfModel {
    pub fn final_loss(&self) -> f64 {
        *self.loss_trace.last().expect("trace holds the initial loss")
    }
}

pub fn masked_loss(
    s: &MaskedMatrix,
    u: &DMatrix<f64>,
    v: &DMatrix<f64>,
    lambda_u: f64,
    lambda_v: f64,
) -> f64 {
    let mut fit = 0.0;
    for i in 0..s.rows {
        for l in 0..s.cols {
            if let Some(w) = s.get(i, l) {
                let pred = u.row(i).dot(&v.row(l));
                fit += (w - pred).powi(2);
            }
        }
    }
    fit + lambda_u * u.norm_squared() + lambda_v * v.norm_squared()
}

/// Ridge update of every row of `target` against fixed `other`.
/// `observed(r)` yields `(index into other, value)` pairs for row `r`.
fn update_rows<'a, I>(
    target: &mut DMatrix<f64>,
    other: &DMatrix<f64>,
    lambda: f64,
    observed: impl Fn(usize) -> I,
) -> Result<()>
where
    I: Iterator<Item = (usize, f64)> + 'a,
{
    let k = other.ncols();
    let mut gram = DMatrix::<f64>::zeros(k, k);
    let mut rhs = DVector::<f64>::zeros(k);
    for r in 0..target.nrows() {
        gram.fill(0.0);
        gram.fill_diagonal(lambda);
        rhs.fill(0.0);
        let mut any = false;
        for (c, w) in observed(r) {
            any = true;
            for a in 0..k {
                let va = other[(c, a)];
                rhs[a] += w * va;
                for b in 0..k {
                    gram[(a, b)] += va * other[(c, b)];
                }
            }
        }
        if !any {
            target.row_mut(r).fill(0.0);
            continue;
        }
        let sol = solve_psd(gram.clone(), &rhs)?;
        target.row_mut(r).copy_from(&sol.transpose());
    }
    Ok(())
}

pub fn fit_pmf(
    s: &MaskedMatrix,
    k: usize,
    lambda_u: f64,
    lambda_v: f64,
    opts: &PmfOptions,
) -> Result<PmfModel> {
    let (n, l) = (s.rows, s.cols);
    if k == 0 || k > n.min(l) {
        return Err(Error::invalid(format!(
            "latent rank K = {k} must lie in 1..={} for a {n}×{l} matrix",
            n.min(l)
        )));
    }
    if lambda_u < 0.0 || lambda_v < 0.0 {
        return Err(Error::invalid("regularization strengths must be non-negative"));
    }
    if opts.restarts == 0 {
        return Err(Error::invalid("at least one PMF start is required"));
    }
    let mut best = fit_from(s, k, lambda_u, lambda_v, opts, rng_for(opts.seed, "pmf-init"))?;
    for r in 1..opts.restarts {
        let rng = rng_for(opts.seed, &format!("pmf-init-{r}"));
        let cand = fit_from(s, k, lambda_u, lambda_v, opts, rng)?;
        if cand.final_loss() < best.final_loss() {
            best = cand;
        }
    }
    Ok(best)
}

fn fit_from(
    s: &MaskedMatrix,
    k: usize,
    lambda_u: f64,
    lambda_v: f64,
    opts: &PmfOptions,
    mut rng: ChaCha8Rng,
) -> Result<PmfModel> {
    let (n, l) = (s.rows, s.cols);

    let empty_rows: Vec<usize> = (0..n)
        .filter(|&i| (0..l).all(|c| !s.is_observed(i, c)))
        .collect();
    let empty_cols: Vec<usize> = (0..l)
        .filter(|&c| (0..n).all(|i| !s.is_observed(i, c)))
        .collect();
    if !empty_rows.is_empty() {
        log::warn!("{} fully masked row(s); their factors are set to zero", empty_rows.len());
    }
    if !empty_cols.is_empty() {
        log::warn!("{} fully masked column(s); their factors are set to zero", empty_cols.len());
    }

    let scale = 1.0 / (k as f64).sqrt();
    let mut u = DMatrix::from_fn(n, k, |_, _| rng.random_range(-1.0..1.0) * scale);
    let mut v = DMatrix::from_fn(l, k, |_, _| rng.random_range(-1.0..1.0) * scale);
    for &c in &empty_cols {
        v.row_mut(c).fill(0.0);
    }

    let mut trace = vec![masked_loss(s, &u, &v, lambda_u, lambda_v)];
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..opts.max_iter {
        iterations += 1;
        let before = *trace.last().unwrap();

        // A half-step is an exact block minimization, so a rise can only be
        // rounding noise at the optimum; revert it and stop.
        let prev_u = u.clone();
        update_rows(&mut u, &v, lambda_u, |i| {
            (0..l).filter_map(move |c| s.get(i, c).map(|w| (c, w)))
        })?;
        let mid = masked_loss(s, &u, &v, lambda_u, lambda_v);
        if mid > before {
            u = prev_u;
            converged = true;
            break;
        }
        trace.push(mid);

        let prev_v = v.clone();
        update_rows(&mut v, &u, lambda_v, |c| {
            (0..n).filter_map(move |i| s.get(i, c).map(|w| (i, w)))
        })?;
        let after = masked_loss(s, &u, &v, lambda_u, lambda_v);
        if after > mid {
            v = prev_v;
            converged = true;
            break;
        }
        trace.push(after);

        if after <= f64::MIN_POSITIVE || (before - after) <= opts.tol * before {
            converged = true;
            break;
        }
    }

    Ok(PmfModel {
        u,
        v,
        k,
        lambda_u,
        lambda_v,
        loss_trace: trace,
        iterations,
        converged,
        seed: opts.seed,
        empty_rows,
        empty_cols,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowError {
    pub error: f64,
    /// The row had no observed entry, so its residual is vacuous.
    pub masked: bool,
}

/// Per-instance squared residual `‖w_i − u_i Vᵀ‖²` over observed entries.
pub fn reconstruction_errors(s: &MaskedMatrix, model: &PmfModel) -> Vec<RowError> {
    (0..s.rows)
        .map(|i| {
            let mut err = 0.0;
            let mut any = false;
            for l in 0..s.cols {
                if let Some(w) = s.get(i, l) {
                    any = true;
                    err += (w - model.u.row(i).dot(&model.v.row(l))).powi(2);
                }
            }
            RowError {
                error: err,
                masked: !any,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// Masked squared error at `beta` (the ridge term is not included).
    pub residual: f64,
    pub beta: Vec<f64>,
}

/// Projects a partially observed row onto the frozen basis:
/// `beta = argmin ‖w_o − V_o β‖² + λ‖β‖²` over observed entries.
pub fn project(w_row: &[f64], mask: &[bool], v_star: &DMatrix<f64>, lambda: f64) -> Result<Projection> {
    if w_row.len() != v_star.nrows() || mask.len() != v_star.nrows() {
        return Err(Error::invalid(format!(
            "row of length {} against a basis with {} rows",
            w_row.len(),
            v_star.nrows()
        )));
    }
    if lambda < 0.0 {
        return Err(Error::invalid("projection ridge must be non-negative"));
    }
    let obs: Vec<usize> = (0..mask.len()).filter(|&l| mask[l]).collect();
    if obs.is_empty() {
        return Err(Error::invalid("cannot project a row with no observed entries"));
    }
    let k = v_star.ncols();
    let a = DMatrix::from_fn(obs.len(), k, |r, c| v_star[(obs[r], c)]);
    let b = DVector::from_iterator(obs.len(), obs.iter().map(|&l| w_row[l]));
    let beta = ridge_lstsq(&a, &b, lambda)?;
    let residual = (&b - &a * &beta).norm_squared();
    Ok(Projection {
        residual,
        beta: beta.iter().copied().collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSelection {
    pub chosen: usize,
    /// `(K, mean held-out error)` for every candidate, ascending K.
    pub errors: Vec<(usize, f64)>,
}

pub const K_TIE_TOLERANCE: f64 = 1e-9;

/// Cross-validated choice of the latent rank.
///
/// For each fold, every other observed entry of the fold's rows is hidden
/// (the first one always stays visible), the factorization is refit on what
/// remains, and the squared error on the hidden entries is averaged. The
/// candidate with the lowest mean over folds wins; candidates within
/// [`K_TIE_TOLERANCE`] of the best go to the smaller K.
pub fn select_k(
    s: &MaskedMatrix,
    row_folds: &[usize],
    candidates: &[usize],
    lambda_u: f64,
    lambda_v: f64,
    opts: &PmfOptions,
) -> Result<KSelection> {
    if candidates.is_empty() {
        return Err(Error::invalid("no candidate ranks given"));
    }
    if row_folds.len() != s.rows {
        return Err(Error::invalid("fold assignment does not cover every row"));
    }
    let mut cands = candidates.to_vec();
    cands.sort_unstable();
    cands.dedup();
    if let Some(&bad) = cands.iter().find(|&&k| k == 0 || k > s.rows.min(s.cols)) {
        return Err(Error::invalid(format!(
            "candidate K = {bad} exceeds min(N, L) = {}",
            s.rows.min(s.cols)
        )));
    }

    let mut folds: Vec<usize> = row_folds.to_vec();
    folds.sort_unstable();
    folds.dedup();

    // Per fold: the training matrix and the hidden entries.
    let mut splits = Vec::new();
    for &f in &folds {
        let mut train = s.clone();
        let mut hidden = Vec::new();
        for i in (0..s.rows).filter(|&i| row_folds[i] == f) {
            let obs: Vec<usize> = (0..s.cols).filter(|&l| s.is_observed(i, l)).collect();
            for &l in obs.iter().skip(1).step_by(2) {
                hidden.push((i, l, s.get(i, l).unwrap()));
                train.mask_out(i, l);
            }
        }
        if !hidden.is_empty() {
            splits.push((train, hidden));
        }
    }
    if splits.is_empty() {
        return Err(Error::invalid("no entries available for held-out evaluation"));
    }

    let mut errors = Vec::with_capacity(cands.len());
    for &k in &cands {
        let mut fold_means = Vec::with_capacity(splits.len());
        for (train, hidden) in &splits {
            let model = fit_pmf(train, k, lambda_u, lambda_v, opts)?;
            let sse: f64 = hidden
                .iter()
                .map(|&(i, l, w)| (w - model.u.row(i).dot(&model.v.row(l))).powi(2))
                .sum();
            fold_means.push(sse / hidden.len() as f64);
        }
        errors.push((k, fold_means.iter().sum::<f64>() / fold_means.len() as f64));
    }

    let mut best = errors[0];
    for &(k, e) in &errors[1..] {
        if e < best.1 - K_TIE_TOLERANCE {
            best = (k, e);
        }
    }
    Ok(KSelection {
        chosen: best.0,
        errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rank_one(n: usize, l: usize) -> MaskedMatrix {
        let u: Vec<f64> = (0..n).map(|i| 0.5 + i as f64 * 0.1).collect();
        let v: Vec<f64> = (0..l).map(|j| 1.0 - j as f64 * 0.05).collect();
        let vals = (0..n * l).map(|idx| u[idx / l] * v[idx % l]).collect();
        MaskedMatrix::full(n, l, vals)
    }

    fn assert_monotone(trace: &[f64]) {
        for w in trace.windows(2) {
            assert!(w[1] <= w[0], "loss rose: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn exact_rank_one_is_recovered() {
        let s = rank_one(6, 5);
        let model = fit_pmf(&s, 1, 0.0, 0.0, &PmfOptions::default()).unwrap();
        assert!(model.final_loss() < 1e-8, "loss {}", model.final_loss());
        assert_monotone(&model.loss_trace);
        for e in reconstruction_errors(&s, &model) {
            assert!(e.error < 1e-8 && !e.masked);
        }
    }

    #[test]
    fn unobserved_entries_do_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 7;
        let l = 6;
        let vals: Vec<f64> = (0..n * l).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mask: Vec<bool> = (0..n * l).map(|i| i % 4 != 1).collect();
        let perturbed: Vec<f64> = vals
            .iter()
            .zip(&mask)
            .map(|(v, &m)| if m { *v } else { v + 100.0 })
            .collect();
        let a = MaskedMatrix::new(n, l, vals, mask.clone()).unwrap();
        let b = MaskedMatrix::new(n, l, perturbed, mask).unwrap();
        let opts = PmfOptions::default();
        let fa = fit_pmf(&a, 2, 0.01, 0.01, &opts).unwrap();
        let fb = fit_pmf(&b, 2, 0.01, 0.01, &opts).unwrap();
        assert_eq!(fa.loss_trace, fb.loss_trace);
        assert_eq!(fa.u, fb.u);
        assert_eq!(fa.v, fb.v);
    }

    #[test]
    fn fully_masked_row_gets_zero_factor() {
        let mut s = rank_one(5, 4);
        for l in 0..4 {
            s.mask_out(2, l);
        }
        let model = fit_pmf(&s, 1, 0.01, 0.01, &PmfOptions::default()).unwrap();
        assert_eq!(model.empty_rows, vec![2]);
        assert_eq!(model.u.row(2).norm(), 0.0);
        let errs = reconstruction_errors(&s, &model);
        assert!(errs[2].masked && errs[2].error == 0.0);
    }

    #[test]
    fn rank_bounds_are_enforced() {
        let s = rank_one(3, 4);
        assert!(fit_pmf(&s, 4, 0.0, 0.0, &PmfOptions::default()).is_err());
        assert!(fit_pmf(&s, 0, 0.0, 0.0, &PmfOptions::default()).is_err());
        assert!(fit_pmf(&s, 1, -1.0, 0.0, &PmfOptions::default()).is_err());
    }

    #[test]
    fn fit_is_deterministic() {
        let s = rank_one(6, 5);
        let opts = PmfOptions {
            seed: 11,
            ..Default::default()
        };
        let a = fit_pmf(&s, 2, 0.01, 0.01, &opts).unwrap();
        let b = fit_pmf(&s, 2, 0.01, 0.01, &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn projection_in_and_out_of_row_space() {
        let v = DMatrix::from_row_slice(3, 1, &[1.0, 0.0, 0.0]);
        let inside = project(&[2.0, 0.0, 0.0], &[true; 3], &v, 0.0).unwrap();
        assert!(inside.residual < 1e-24);
        assert!((inside.beta[0] - 2.0).abs() < 1e-12);
        let outside = project(&[0.0, 3.0, 4.0], &[true; 3], &v, 0.0).unwrap();
        assert!((outside.residual - 25.0).abs() < 1e-12);
        assert!(project(&[1.0, 1.0, 1.0], &[false; 3], &v, 0.0).is_err());
    }

    #[test]
    fn projection_ignores_masked_entries() {
        let v = DMatrix::from_row_slice(3, 1, &[1.0, 1.0, 1.0]);
        let p = project(&[0.5, 0.5, 99.0], &[true, true, false], &v, 0.0).unwrap();
        assert!(p.residual < 1e-24);
    }

    #[test]
    fn singleton_candidate_and_tie_rule() {
        let s = rank_one(10, 6);
        let folds: Vec<usize> = (0..10).map(|i| i % 5 + 1).collect();
        let opts = PmfOptions::default();
        let sel = select_k(&s, &folds, &[2], 0.01, 0.01, &opts).unwrap();
        assert_eq!(sel.chosen, 2);
        assert!(select_k(&s, &folds, &[7], 0.01, 0.01, &opts).is_err());
    }
}
