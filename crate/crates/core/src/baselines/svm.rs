//! One-vs-rest Gaussian-kernel SVM trained by SMO over sparse TF-IDF vectors.

use crate::error::{config_err, contract_err, Result};
use crate::tfidf::SparseVector;

#[derive(Clone, Debug, PartialEq)]
pub struct SvmConfig {
    pub c: f64,
    /// Kernel width; `None` means `1 / feature_count`.
    pub gamma: Option<f64>,
    pub tol: f64,
    pub max_passes: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            gamma: None,
            tol: 1e-3,
            max_passes: 100,
        }
    }
}

impl SvmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(config_err!("svm C must be positive, got {}", self.c));
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err(config_err!("svm gamma must be positive, got {g}"));
            }
        }
        if self.tol.is_nan() || self.tol <= 0.0 || self.max_passes == 0 {
            return Err(config_err!("svm tolerance and max_passes must be positive"));
        }
        Ok(())
    }
}

/// Binary machine for one class against the rest. `coef[s] = y_s·α_s` over
/// the shared support set; decision is `Σ coef·K − rho`.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMachine {
    pub label: i32,
    pub coef: Vec<f64>,
    pub rho: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvmModel {
    pub labels: Vec<i32>,
    pub gamma: f64,
    pub c: f64,
    pub feature_count: usize,
    pub support: Vec<SparseVector>,
    pub machines: Vec<BinaryMachine>,
}

/// Gaussian kernel `exp(-γ‖x − y‖²)`.
pub fn rbf_kernel(x: &SparseVector, y: &SparseVector, gamma: f64) -> f64 {
    let d2 = (x.norm_squared() + y.norm_squared() - 2.0 * x.dot(y)).max(0.0);
    (-gamma * d2).exp()
}

/// Outcome of one binary SMO solve.
#[derive(Clone, Debug)]
pub struct SmoSolution {
    pub alpha: Vec<f64>,
    pub rho: f64,
    pub iterations: usize,
    /// Final maximal KKT violation `m(α) − M(α)`.
    pub violation: f64,
}

const TAU: f64 = 1e-12;

/// Solves `min ½αᵀQα − eᵀα` s.t. `0 ≤ α ≤ C`, `yᵀα = 0` with
/// `Q_ij = y_i y_j K_ij`, choosing the maximal violating pair each step.
pub fn smo_solve(kernel: &[f64], y: &[f64], c: f64, tol: f64, max_iter: usize) -> SmoSolution {
    let n = y.len();
    let q = |i: usize, j: usize| y[i] * y[j] * kernel[i * n + j];
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let mut iterations = 0;
    let in_up = |a: f64, yt: f64| (yt > 0.0 && a < c) || (yt < 0.0 && a > 0.0);
    let in_low = |a: f64, yt: f64| (yt > 0.0 && a > 0.0) || (yt < 0.0 && a < c);
    let violation = loop {
        let (mut i, mut gmax) = (usize::MAX, f64::NEG_INFINITY);
        let (mut j, mut gmin) = (usize::MAX, f64::INFINITY);
        for t in 0..n {
            let v = -y[t] * grad[t];
            if in_up(alpha[t], y[t]) && v > gmax {
                (i, gmax) = (t, v);
            }
            if in_low(alpha[t], y[t]) && v < gmin {
                (j, gmin) = (t, v);
            }
        }
        let gap = gmax - gmin;
        if i == usize::MAX || j == usize::MAX || gap < tol || iterations >= max_iter {
            break if i == usize::MAX || j == usize::MAX {
                0.0
            } else {
                gap
            };
        }
        iterations += 1;
        let (old_i, old_j) = (alpha[i], alpha[j]);
        if y[i] != y[j] {
            let quad = (q(i, i) + q(j, j) + 2.0 * q(i, j)).max(TAU);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (q(i, i) + q(j, j) - 2.0 * q(i, j)).max(TAU);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for (t, g) in grad.iter_mut().enumerate() {
            *g += q(i, t) * di + q(j, t) * dj;
        }
    };
    // rho: mean of y·G over free vectors, else midpoint of the feasible interval.
    let (mut free_sum, mut free_n) = (0.0, 0usize);
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] > 0.0 && alpha[t] < c {
            free_sum += yg;
            free_n += 1;
        } else if (alpha[t] >= c && y[t] < 0.0) || (alpha[t] <= 0.0 && y[t] > 0.0) {
            ub = ub.min(yg);
        } else {
            lb = lb.max(yg);
        }
    }
    let rho = if free_n > 0 {
        free_sum / free_n as f64
    } else {
        (ub + lb) / 2.0
    };
    SmoSolution {
        alpha,
        rho,
        iterations,
        violation,
    }
}

/// Trains one binary machine per distinct label.
///
/// A single distinct label yields a degenerate model that always predicts it.
pub fn svm_train(
    vectors: &[SparseVector],
    labels: &[i32],
    feature_count: usize,
    cfg: &SvmConfig,
) -> Result<SvmModel> {
    cfg.validate()?;
    if vectors.len() != labels.len() || vectors.is_empty() {
        return Err(contract_err!(
            "svm needs equal, non-zero numbers of vectors and labels"
        ));
    }
    let gamma = cfg.gamma.unwrap_or(1.0 / feature_count.max(1) as f64);
    let mut classes = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() == 1 {
        log::warn!(
            "svm training data holds only label {}; model is constant",
            classes[0]
        );
        return Ok(SvmModel {
            labels: classes,
            gamma,
            c: cfg.c,
            feature_count,
            support: Vec::new(),
            machines: Vec::new(),
        });
    }
    let n = vectors.len();
    let bytes = n.saturating_mul(n).saturating_mul(8);
    if bytes > 2 << 30 {
        return Err(config_err!(
            "svm kernel matrix for {n} essays exceeds 2 GiB; train per prompt"
        ));
    }
    let norms: Vec<f64> = vectors.iter().map(SparseVector::norm_squared).collect();
    let mut kernel = vec![0.0; n * n];
    for i in 0..n {
        kernel[i * n + i] = 1.0;
        for j in 0..i {
            let d2 = (norms[i] + norms[j] - 2.0 * vectors[i].dot(&vectors[j])).max(0.0);
            let k = (-gamma * d2).exp();
            kernel[i * n + j] = k;
            kernel[j * n + i] = k;
        }
    }
    let max_iter = cfg.max_passes.saturating_mul(n);
    let mut solutions = Vec::with_capacity(classes.len());
    for &label in &classes {
        let y: Vec<f64> = labels
            .iter()
            .map(|&l| if l == label { 1.0 } else { -1.0 })
            .collect();
        let sol = smo_solve(&kernel, &y, cfg.c, cfg.tol, max_iter);
        if sol.violation >= cfg.tol {
            log::warn!(
                "svm machine for label {label} stopped after {} iterations with KKT violation {:.3e}",
                sol.iterations,
                sol.violation
            );
        }
        solutions.push((label, y, sol));
    }
    let support_idx: Vec<usize> = (0..n)
        .filter(|&t| solutions.iter().any(|(_, _, s)| s.alpha[t] > 0.0))
        .collect();
    let machines = solutions
        .into_iter()
        .map(|(label, y, sol)| BinaryMachine {
            label,
            coef: support_idx.iter().map(|&t| y[t] * sol.alpha[t]).collect(),
            rho: sol.rho,
        })
        .collect();
    Ok(SvmModel {
        labels: classes,
        gamma,
        c: cfg.c,
        feature_count,
        support: support_idx.iter().map(|&t| vectors[t].clone()).collect(),
        machines,
    })
}

impl SvmModel {
    /// Rounds every stored real to single precision, the checkpoint format.
    pub fn round_to_f32(&mut self) {
        let r = |v: &mut f64| *v = f64::from(*v as f32);
        r(&mut self.gamma);
        r(&mut self.c);
        for m in &mut self.machines {
            r(&mut m.rho);
            m.coef.iter_mut().for_each(r);
        }
        for s in &mut self.support {
            s.entries.iter_mut().for_each(|(_, v)| r(v));
        }
    }

    /// Decision value of every machine, in label order.
    pub fn decision_values(&self, x: &SparseVector) -> Result<Vec<f64>> {
        if let Some(&(idx, _)) = x.entries.iter().find(|(i, _)| *i >= self.feature_count) {
            return Err(contract_err!(
                "feature index {idx} beyond the model's {} features",
                self.feature_count
            ));
        }
        let k: Vec<f64> = self
            .support
            .iter()
            .map(|s| rbf_kernel(s, x, self.gamma))
            .collect();
        Ok(self
            .machines
            .iter()
            .map(|m| m.coef.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() - m.rho)
            .collect())
    }

    /// Label with the largest decision value; near-ties (within 1e-12) go
    /// to the smaller label.
    pub fn predict(&self, x: &SparseVector) -> Result<i32> {
        if self.machines.is_empty() {
            return Ok(self.labels[0]);
        }
        let values = self.decision_values(x)?;
        let mut best = 0;
        for (i, v) in values.iter().enumerate().skip(1) {
            if *v > values[best] + 1e-12 {
                best = i;
            }
        }
        Ok(self.machines[best].label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sv(entries: &[(usize, f64)]) -> SparseVector {
        SparseVector {
            entries: entries.to_vec(),
            oov: Vec::new(),
        }
    }

    fn clusters() -> (Vec<SparseVector>, Vec<i32>) {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for k in 0..6 {
            let e = 0.05 * k as f64;
            let a = (1.0 - e * e).sqrt();
            xs.push(sv(&[(0, a), (2, e)]));
            ys.push(0);
            xs.push(sv(&[(1, a), (2, e)]));
            ys.push(60);
        }
        (xs, ys)
    }

    #[test]
    fn separable_clusters_are_fit_exactly() {
        let (xs, ys) = clusters();
        let cfg = SvmConfig {
            gamma: Some(1.0),
            ..Default::default()
        };
        let model = svm_train(&xs, &ys, 3, &cfg).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            assert_eq!(model.predict(x).unwrap(), *y);
        }
        for m in &model.machines {
            assert!(m.coef.iter().any(|&a| a != 0.0));
            assert!(m.coef.iter().all(|a| a.abs() <= cfg.c + 1e-12));
        }
        assert!(model.predict(&sv(&[(7, 1.0)])).is_err());
    }

    #[test]
    fn symmetric_tie_goes_to_smaller_label() {
        let xs = vec![sv(&[(0, 1.0)]), sv(&[(1, 1.0)])];
        let model = svm_train(&xs, &[0, 60], 2, &SvmConfig::default()).unwrap();
        assert_eq!(model.predict(&SparseVector::default()).unwrap(), 0);
        assert_eq!(model.predict(&xs[1]).unwrap(), 60);
    }

    #[test]
    fn single_label_is_constant() {
        let xs = vec![sv(&[(0, 1.0)]), sv(&[(1, 1.0)])];
        let model = svm_train(&xs, &[4, 4], 2, &SvmConfig::default()).unwrap();
        assert_eq!(model.predict(&xs[1]).unwrap(), 4);
        assert_eq!(model.predict(&SparseVector::default()).unwrap(), 4);
    }

    #[test]
    fn non_positive_c_is_rejected() {
        let xs = vec![sv(&[(0, 1.0)]), sv(&[(1, 1.0)])];
        for c in [0.0, -1.0] {
            let cfg = SvmConfig {
                c,
                ..Default::default()
            };
            assert!(matches!(
                svm_train(&xs, &[0, 1], 2, &cfg),
                Err(crate::Error::Config(_))
            ));
        }
    }

    #[test]
    fn kernel_is_symmetric_with_unit_diagonal() {
        let (xs, _) = clusters();
        for a in &xs {
            assert!((rbf_kernel(a, a, 0.7) - 1.0).abs() < 1e-15);
            for b in &xs {
                assert_eq!(rbf_kernel(a, b, 0.7), rbf_kernel(b, a, 0.7));
            }
        }
    }
}
