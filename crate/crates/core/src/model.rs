//! Model families with analytic stationary data.
//!
//! Every model carries its drift B, diffusion σ, the score ∇log ρ of the
//! invariant density, and the entropy-production field
//!
//! ```text
//! ψ = 2σ⁻¹B − σ*∇log ρ,
//! ```
//!
//! all in closed form. Two families are provided:
//!
//! * **Linear OU** — `B(x) = Mx` with Hurwitz `M` and constant invertible
//!   `σ`; the stationary law is `N(0, Σ)` with `MΣ + ΣM* + σσ* = 0`.
//! * **Rotated Gaussian** — the prescribed-invariant-measure family with
//!   `V(x) = α − β|x|²`, divergence-free rotation `b(x) = Ax`
//!   (`A* = −A`) and drift assembled as
//!   `B = b + ½ Σ_j ∂_j(σσ*)_{ij} e_i + ½ (σσ*)∇V`,
//!   so `μ(dx) = e^V dx = N(0, I/(2β))` exactly, for constant σ or for a
//!   bounded-derivative diagonal tanh diffusion.
//!
//! Nothing in the crate ever estimates ∇log ρ from samples: models without
//! a known density are out of scope by design.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{EprError, Result};
use crate::noise::NoiseStream;

/// Diffusion coefficient field σ(x).
#[derive(Debug, Clone)]
pub enum SigmaField {
    /// Constant invertible matrix.
    Constant(DMatrix<f64>),
    /// Diagonal σ(x)_ii = base + amp·tanh(scale·x_i); invertible iff
    /// base > |amp|, with ‖∇σ‖ ≤ |amp|·scale.
    DiagTanh { base: f64, amp: f64, scale: f64 },
}

impl SigmaField {
    pub fn identity(d: usize) -> Self {
        SigmaField::Constant(DMatrix::identity(d, d))
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, SigmaField::Constant(_))
    }

    /// σ(x) as a dense matrix.
    pub fn matrix(&self, x: &[f64]) -> DMatrix<f64> {
        match self {
            SigmaField::Constant(m) => m.clone(),
            SigmaField::DiagTanh { base, amp, scale } => {
                let d = x.len();
                DMatrix::from_fn(d, d, |i, j| {
                    if i == j {
                        base + amp * (scale * x[i]).tanh()
                    } else {
                        0.0
                    }
                })
            }
        }
    }

    /// Row-wise divergence of a = σσ*: out_i = Σ_j ∂_j(σσ*)_{ij}(x).
    pub fn div_aa_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            SigmaField::Constant(_) => out.fill(0.0),
            SigmaField::DiagTanh { base, amp, scale } => {
                for (i, o) in out.iter_mut().enumerate() {
                    let th = (scale * x[i]).tanh();
                    let s = base + amp * th;
                    let ds = amp * scale * (1.0 - th * th);
                    *o = 2.0 * s * ds;
                }
            }
        }
    }

    /// Uniform ellipticity bounds (c1, c2) with c1·I ≤ σσ* ≤ c2·I.
    pub fn ellipticity(&self) -> (f64, f64) {
        match self {
            SigmaField::Constant(m) => {
                let aa = m * m.transpose();
                let eig = aa.symmetric_eigenvalues();
                (eig.min(), eig.max())
            }
            SigmaField::DiagTanh { base, amp, .. } => {
                let lo = base - amp.abs();
                let hi = base + amp.abs();
                (lo * lo, hi * hi)
            }
        }
    }

    /// Operator norm of σ(x)⁻¹, uniform over x.
    pub fn inv_op_norm(&self) -> f64 {
        let (c1, _) = self.ellipticity();
        1.0 / c1.sqrt()
    }

    /// Sup-norm of ∇σ (entrywise, over x).
    pub fn grad_sup_norm(&self) -> f64 {
        match self {
            SigmaField::Constant(_) => 0.0,
            SigmaField::DiagTanh { amp, scale, .. } => amp.abs() * scale,
        }
    }

    /// Upper bound on ‖∂_j(σσ*)_{ij}‖_∞ per diagonal entry.
    pub fn div_aa_sup_norm(&self) -> f64 {
        match self {
            SigmaField::Constant(_) => 0.0,
            SigmaField::DiagTanh { base, amp, scale } => {
                2.0 * (base + amp.abs()) * amp.abs() * scale
            }
        }
    }

    fn validate(&self, d: usize) -> Result<()> {
        match self {
            SigmaField::Constant(m) => {
                if m.nrows() != d || m.ncols() != d {
                    return Err(EprError::DimensionMismatch {
                        expected: d,
                        got: m.nrows(),
                    });
                }
                let (c1, _) = self.ellipticity();
                if !(c1 > 0.0) {
                    return Err(EprError::ModelConstruction(
                        "sigma must be invertible (c1 > 0)".into(),
                    ));
                }
                Ok(())
            }
            SigmaField::DiagTanh { base, amp, scale } => {
                if !(base - amp.abs() > 0.0) {
                    return Err(EprError::ModelConstruction(format!(
                        "diag-tanh sigma must stay invertible: base {base} ≤ |amp| {amp}"
                    )));
                }
                if !scale.is_finite() || *scale < 0.0 {
                    return Err(EprError::ModelConstruction("bad tanh scale".into()));
                }
                Ok(())
            }
        }
    }
}

/// Precompiled drift evaluator.
#[derive(Debug, Clone)]
enum DriftEval {
    /// B(x) = Mx, row-major.
    Linear(Vec<f64>),
    /// Full (4.6)-style assembly for the diag-tanh family:
    /// B = Ax + ½ div(σσ*) − β (σσ*) x.
    RotTanh {
        a_flat: Vec<f64>,
        beta: f64,
        base: f64,
        amp: f64,
        scale: f64,
    },
}

/// Precompiled ψ evaluator.
#[derive(Debug, Clone)]
enum PsiEval {
    /// Reversible model: ψ ≡ 0 structurally, so the EPR pipeline produces
    /// exact zeros rather than rounding noise.
    Zero,
    /// ψ(x) = Px, row-major.
    Linear(Vec<f64>),
    /// ψ = 2σ⁻¹(Ax) + σ⁻¹ div(σσ*) for the diag-tanh family.
    RotTanh {
        a_flat: Vec<f64>,
        base: f64,
        amp: f64,
        scale: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FamilyTag {
    LinearOu,
    RotatedGaussian,
}

/// A diffusion model under study, with everything the estimators need
/// precomputed at construction time.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    name: String,
    family: FamilyTag,
    d: usize,
    sigma: SigmaField,
    drift: DriftEval,
    psi: PsiEval,
    /// Stationary covariance Σ of μ = N(0, Σ).
    stat_cov: DMatrix<f64>,
    stat_cov_inv: DMatrix<f64>,
    /// Lower Cholesky factor of Σ for exact stationary sampling.
    stat_chol: DMatrix<f64>,
    /// μ(|ψ|²) when available in closed form (2R).
    mu_psi_sq: Option<f64>,
    delta_exact: Option<f64>,
    /// Normalisation constant of V(x) = α − β|x|² (rotated family only).
    alpha: Option<f64>,
    /// Parameters echoed into the manifest.
    params: BTreeMap<String, f64>,
    warnings: Vec<String>,
    reversible: bool,
}

fn mat_to_flat(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut v = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            v.push(m[(i, j)]);
        }
    }
    v
}

#[inline]
fn flat_mul(m: &[f64], x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &m[i * d..(i + 1) * d];
        let mut acc = 0.0;
        for j in 0..d {
            acc += row[j] * x[j];
        }
        *o = acc;
    }
}

impl ModelSpec {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn family(&self) -> FamilyTag {
        self.family
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn sigma(&self) -> &SigmaField {
        &self.sigma
    }

    pub fn is_sigma_constant(&self) -> bool {
        self.sigma.is_constant()
    }

    pub fn is_reversible(&self) -> bool {
        self.reversible
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Drift B(x).
    #[inline]
    pub fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.drift {
            DriftEval::Linear(m) => flat_mul(m, x, out),
            DriftEval::RotTanh {
                a_flat,
                beta,
                base,
                amp,
                scale,
            } => {
                flat_mul(a_flat, x, out);
                for i in 0..x.len() {
                    let th = (scale * x[i]).tanh();
                    let s = base + amp * th;
                    let ds = amp * scale * (1.0 - th * th);
                    // ½ ∂_i(s²) − β s² x_i
                    out[i] += s * ds - beta * s * s * x[i];
                }
            }
        }
    }

    /// Apply σ(x) to a vector (the noise injection of one EM step).
    #[inline]
    pub fn sigma_apply_into(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        match &self.sigma {
            SigmaField::Constant(m) => {
                let d = v.len();
                for i in 0..d {
                    let mut acc = 0.0;
                    for j in 0..d {
                        acc += m[(i, j)] * v[j];
                    }
                    out[i] = acc;
                }
            }
            SigmaField::DiagTanh { base, amp, scale } => {
                for i in 0..v.len() {
                    out[i] = (base + amp * (scale * x[i]).tanh()) * v[i];
                }
            }
        }
    }

    /// True when σ(x)·v = v for all x (skips a matrix product per step).
    pub fn sigma_is_identity(&self) -> bool {
        match &self.sigma {
            SigmaField::Constant(m) => m.is_identity(0.0),
            _ => false,
        }
    }

    /// ψ(x), the integrand of the EPR functional.
    #[inline]
    pub fn psi_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.psi {
            PsiEval::Zero => out.fill(0.0),
            PsiEval::Linear(p) => flat_mul(p, x, out),
            PsiEval::RotTanh {
                a_flat,
                base,
                amp,
                scale,
            } => {
                flat_mul(a_flat, x, out);
                for i in 0..x.len() {
                    let th = (scale * x[i]).tanh();
                    let s = base + amp * th;
                    let ds = amp * scale * (1.0 - th * th);
                    // (2·(Ax)_i + 2 s s') / s
                    out[i] = (2.0 * out[i] + 2.0 * s * ds) / s;
                }
            }
        }
    }

    /// ψ via the defining identity 2σ(x)⁻¹B(x) − σ(x)*∇log ρ(x), evaluated
    /// from scratch. Slow route kept for cross-checking the compiled one.
    pub fn psi_general(&self, x: &[f64]) -> DVector<f64> {
        let d = self.d;
        let mut b = vec![0.0; d];
        self.drift_into(x, &mut b);
        let mut grad = vec![0.0; d];
        self.grad_log_rho_into(x, &mut grad);
        let sig = self.sigma.matrix(x);
        let two_b = DVector::from_iterator(d, b.iter().map(|v| 2.0 * v));
        let solved = sig
            .clone()
            .lu()
            .solve(&two_b)
            .expect("sigma invertible by construction");
        solved - sig.transpose() * DVector::from_column_slice(&grad)
    }

    pub fn psi_is_zero(&self) -> bool {
        matches!(self.psi, PsiEval::Zero)
    }

    /// ∇log ρ(x) = −Σ⁻¹x (Gaussian stationary law).
    pub fn grad_log_rho_into(&self, x: &[f64], out: &mut [f64]) {
        let d = self.d;
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                acc += self.stat_cov_inv[(i, j)] * x[j];
            }
            out[i] = -acc;
        }
    }

    /// Stationary covariance Σ.
    pub fn stationary_cov(&self) -> &DMatrix<f64> {
        &self.stat_cov
    }

    /// Exact draw from μ = N(0, Σ).
    pub fn sample_stationary(&self, stream: &mut NoiseStream, out: &mut [f64]) {
        let d = self.d;
        let mut z = vec![0.0; d];
        for zi in z.iter_mut() {
            *zi = stream.next_standard_normal();
        }
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..=i {
                acc += self.stat_chol[(i, j)] * z[j];
            }
            out[i] = acc;
        }
    }

    /// μ(|ψ|²) in closed form, when the family provides it.
    pub fn mu_psi_sq(&self) -> Option<f64> {
        self.mu_psi_sq
    }

    /// Mean entropy production rate R = ½ μ(|ψ|²).
    pub fn r_exact(&self) -> Option<f64> {
        self.mu_psi_sq.map(|m| 0.5 * m)
    }

    /// Asymptotic variance δ of S_t = t(R_t − R), when known in closed form.
    pub fn delta_exact(&self) -> Option<f64> {
        self.delta_exact
    }

    /// Analytic dissipativity constants (κ, K) of
    /// ⟨B(x)−B(y), x−y⟩ ≤ κ|x−y| − K|x−y|², for linear drifts.
    ///
    /// K is minus the largest eigenvalue of the symmetric part of the drift
    /// matrix; returns None for the state-dependent-σ family (fit it by
    /// sampling instead).
    pub fn dissipativity_constants(&self) -> Option<(f64, f64)> {
        match &self.drift {
            DriftEval::Linear(m) => {
                let d = self.d;
                let mat = DMatrix::from_fn(d, d, |i, j| m[i * d + j]);
                let sym = (&mat + mat.transpose()) * 0.5;
                let k = -sym.symmetric_eigenvalues().max();
                Some((0.0, k))
            }
            _ => None,
        }
    }

    /// Operator norm of σ⁻¹ (constant over x for both families).
    pub fn sigma_inv_op_norm(&self) -> f64 {
        self.sigma.inv_op_norm()
    }

    /// Drift Jacobian ∇B(x): analytic for linear drifts, central differences
    /// (step 1e−5) otherwise. Returns the matrix with entry (i, j) = ∂_j B_i.
    pub fn drift_jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let d = self.d;
        match &self.drift {
            DriftEval::Linear(m) => DMatrix::from_fn(d, d, |i, j| m[i * d + j]),
            _ => {
                let step = 1e-5;
                let mut jac = DMatrix::zeros(d, d);
                let mut xp = x.to_vec();
                let mut bp = vec![0.0; d];
                let mut bm = vec![0.0; d];
                for j in 0..d {
                    xp[j] = x[j] + step;
                    self.drift_into(&xp, &mut bp);
                    xp[j] = x[j] - step;
                    self.drift_into(&xp, &mut bm);
                    xp[j] = x[j];
                    for i in 0..d {
                        jac[(i, j)] = (bp[i] - bm[i]) / (2.0 * step);
                    }
                }
                jac
            }
        }
    }

    /// Serializable manifest with the derived quantities.
    pub fn manifest(&self) -> ModelManifest {
        ModelManifest {
            name: self.name.clone(),
            family: self.family,
            d: self.d,
            params: self.params.clone(),
            sigma: match &self.sigma {
                SigmaField::Constant(m) => SigmaManifest::Constant {
                    rows: (0..self.d)
                        .map(|i| (0..self.d).map(|j| m[(i, j)]).collect())
                        .collect(),
                },
                SigmaField::DiagTanh { base, amp, scale } => SigmaManifest::DiagTanh {
                    base: *base,
                    amp: *amp,
                    scale: *scale,
                },
            },
            stationary_cov: (0..self.d)
                .map(|i| (0..self.d).map(|j| self.stat_cov[(i, j)]).collect())
                .collect(),
            r_exact: self.r_exact(),
            delta_exact: self.delta_exact,
            alpha: self.alpha,
            reversible: self.reversible,
            sigma_derivative: if self.sigma.is_constant() {
                "none (constant sigma)".into()
            } else {
                "analytic".into()
            },
            warnings: self.warnings.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SigmaManifest {
    Constant { rows: Vec<Vec<f64>> },
    DiagTanh { base: f64, amp: f64, scale: f64 },
}

/// JSON manifest of a model: family tag, parameters and derived quantities.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelManifest {
    pub name: String,
    pub family: FamilyTag,
    pub d: usize,
    pub params: BTreeMap<String, f64>,
    pub sigma: SigmaManifest,
    pub stationary_cov: Vec<Vec<f64>>,
    pub r_exact: Option<f64>,
    pub delta_exact: Option<f64>,
    pub alpha: Option<f64>,
    pub reversible: bool,
    pub sigma_derivative: String,
    pub warnings: Vec<String>,
}

/// Hard cap on the dimension of the closed-form families: the dense
/// Kronecker Lyapunov solve below is O(d⁶).
pub const MAX_DIM: usize = 16;

/// Solve MΣ + ΣM* + σσ* = 0 for the stationary covariance of a linear SDE.
///
/// Dense Kronecker-vectorised solve, valid for Hurwitz M up to d = 16;
/// the residual is checked to 1e−10 and the result to be positive definite.
pub fn lyapunov_stationary(m: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = m.nrows();
    if d == 0 || d > MAX_DIM || m.ncols() != d || sigma.nrows() != d || sigma.ncols() != d {
        return Err(EprError::ModelConstruction(format!(
            "lyapunov solve needs square matrices with 1 ≤ d ≤ {MAX_DIM}"
        )));
    }
    let eig = m.clone().complex_eigenvalues();
    if eig.iter().any(|l| l.re >= 0.0) {
        return Err(EprError::ModelConstruction(format!(
            "drift matrix is not Hurwitz (eigenvalue with Re ≥ 0: {eig})"
        )));
    }
    let q = sigma * sigma.transpose();
    // vec(MΣ) = (I⊗M)vec(Σ), vec(ΣM*) = (M⊗I)vec(Σ) in column-major vec.
    let eye = DMatrix::<f64>::identity(d, d);
    let a = eye.kronecker(m) + m.kronecker(&eye);
    let rhs = DVector::from_iterator(d * d, q.iter().map(|v| -v));
    let sol = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| EprError::ModelConstruction("singular Lyapunov system".into()))?;
    let mut cov = DMatrix::from_iterator(d, d, sol.iter().copied());
    cov = (&cov + cov.transpose()) * 0.5;
    let residual = (m * &cov + &cov * m.transpose() + &q).norm();
    if residual > 1e-10 {
        return Err(EprError::ModelConstruction(format!(
            "Lyapunov residual {residual} above 1e-10"
        )));
    }
    if cov.clone().cholesky().is_none() {
        return Err(EprError::ModelConstruction(
            "stationary covariance is not positive definite".into(),
        ));
    }
    Ok(cov)
}

/// μ(x*Qx) = tr(QΣ) for x ~ N(0, Σ).
pub fn gaussian_quadratic_mean(q: &DMatrix<f64>, cov: &DMatrix<f64>) -> f64 {
    (q * cov).trace()
}

fn common_prepare(cov: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let inv = cov
        .clone()
        .try_inverse()
        .ok_or_else(|| EprError::ModelConstruction("stationary covariance not invertible".into()))?;
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| EprError::ModelConstruction("stationary covariance not PD".into()))?
        .l();
    Ok((inv, chol))
}

/// Build a linear OU model B(x) = Mx with constant σ.
///
/// The stationary covariance is produced by [`lyapunov_stationary`]; ψ is
/// compiled to the matrix 2σ⁻¹M + σ*Σ⁻¹ and snapped to an exact zero when
/// the model is reversible, so reversible pipelines produce exact zeros.
pub fn linear_ou(name: &str, m: DMatrix<f64>, sigma: DMatrix<f64>) -> Result<ModelSpec> {
    let d = m.nrows();
    let sig = SigmaField::Constant(sigma.clone());
    sig.validate(d)?;
    let cov = lyapunov_stationary(&m, &sigma)?;
    let (cov_inv, chol) = common_prepare(&cov)?;
    let sigma_inv = sigma
        .clone()
        .try_inverse()
        .ok_or_else(|| EprError::ModelConstruction("sigma not invertible".into()))?;
    let mut psi_mat = &sigma_inv * &m * 2.0 + sigma.transpose() * &cov_inv;
    let scale = (&sigma_inv * &m * 2.0).amax().max(1.0);
    let reversible = psi_mat.amax() <= 1e-10 * scale;
    if reversible {
        psi_mat.fill(0.0);
    }
    let mu_psi_sq = Some(gaussian_quadratic_mean(
        &(psi_mat.transpose() * &psi_mat),
        &cov,
    ));
    let mut params = BTreeMap::new();
    for i in 0..d {
        for j in 0..d {
            params.insert(format!("m[{i}][{j}]"), m[(i, j)]);
        }
    }
    Ok(ModelSpec {
        name: name.to_string(),
        family: FamilyTag::LinearOu,
        d,
        drift: DriftEval::Linear(mat_to_flat(&m)),
        psi: if reversible {
            PsiEval::Zero
        } else {
            PsiEval::Linear(mat_to_flat(&psi_mat))
        },
        sigma: sig,
        stat_cov: cov,
        stat_cov_inv: cov_inv,
        stat_chol: chol,
        mu_psi_sq,
        delta_exact: if reversible { Some(0.0) } else { None },
        alpha: None,
        params,
        warnings: Vec::new(),
        reversible,
    })
}

/// Reversible OU: B(x) = −βx, σ = I, stationary law N(0, I/(2β)).
pub fn reversible_ou(beta: f64, d: usize) -> Result<ModelSpec> {
    if !(beta > 0.0) {
        return Err(EprError::ModelConstruction("beta must be positive".into()));
    }
    let m = DMatrix::identity(d, d) * -beta;
    let mut spec = linear_ou("reversible-ou", m, DMatrix::identity(d, d))?;
    spec.params.clear();
    spec.params.insert("beta".into(), beta);
    Ok(spec)
}

/// Normalisation of V(x) = α − β|x|²: e^α (π/β)^{d/2} = 1.
pub fn potential_alpha(beta: f64, d: usize) -> f64 {
    -(d as f64 / 2.0) * (std::f64::consts::PI / beta).ln()
}

fn standard_rotation(a: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[0.0, a, -a, 0.0])
}

/// The 2-d rotated OU: V = α − β|x|², b(x) = Ax with A the rotation
/// generator scaled by `a`, σ = I. Drift B(x) = (A − βI)x, ψ(x) = 2Ax,
/// R = 2a²/β and δ = 4a²/β + 4a⁴/β³ in closed form.
pub fn rotated_ou(a: f64, beta: f64) -> Result<ModelSpec> {
    rotated_gaussian("rotated-ou", beta, standard_rotation(a), SigmaField::identity(2), None)
        .map(|mut m| {
            m.params.insert("a".into(), a);
            m.delta_exact = Some(closed_form_delta_rotated_ou(a, beta).expect("valid params"));
            m
        })
}

/// General rotated-Gaussian family member (Example-4.1 shape): prescribed
/// invariant measure e^V dx with V = α − β|x|², divergence-free b(x) = Ax
/// (A antisymmetric), and σ either constant or diagonal-tanh.
///
/// A user-supplied α is ignored (recorded as a warning): the normalisation
/// is always recomputed from β and d so that μ is a probability measure.
pub fn rotated_gaussian(
    name: &str,
    beta: f64,
    a_mat: DMatrix<f64>,
    sigma: SigmaField,
    alpha: Option<f64>,
) -> Result<ModelSpec> {
    let d = a_mat.nrows();
    if d == 0 || d > MAX_DIM || a_mat.ncols() != d {
        return Err(EprError::ModelConstruction(format!(
            "rotation matrix must be square with 1 ≤ d ≤ {MAX_DIM}"
        )));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(EprError::ModelConstruction(
            "beta must be positive and finite for a normalisable e^V".into(),
        ));
    }
    let skew = (&a_mat + a_mat.transpose()).amax();
    if skew > 1e-12 * a_mat.amax().max(1.0) {
        return Err(EprError::ModelConstruction(
            "b(x) = Ax requires antisymmetric A".into(),
        ));
    }
    sigma.validate(d)?;

    let recomputed_alpha = potential_alpha(beta, d);
    let mut warnings = Vec::new();
    if let Some(user) = alpha {
        if (user - recomputed_alpha).abs() > 1e-12 * recomputed_alpha.abs().max(1.0) {
            warnings.push(format!(
                "supplied alpha {user} ignored; normalisation requires alpha = {recomputed_alpha}"
            ));
        }
    }

    let cov = DMatrix::identity(d, d) * (1.0 / (2.0 * beta));
    let (cov_inv, chol) = common_prepare(&cov)?;

    let mut params = BTreeMap::new();
    params.insert("beta".into(), beta);
    for i in 0..d {
        for j in 0..d {
            if a_mat[(i, j)] != 0.0 {
                params.insert(format!("A[{i}][{j}]"), a_mat[(i, j)]);
            }
        }
    }

    let (drift, psi, mu_psi_sq, reversible) = match &sigma {
        SigmaField::Constant(s) => {
            // B = Ax − β(σσ*)x, ψ = 2σ⁻¹Ax.
            let aa = s * s.transpose();
            let m = &a_mat - aa * beta;
            let s_inv = s
                .clone()
                .try_inverse()
                .ok_or_else(|| EprError::ModelConstruction("sigma not invertible".into()))?;
            let zero_b = a_mat.amax() == 0.0;
            let psi_mat = &s_inv * &a_mat * 2.0;
            let mu = gaussian_quadratic_mean(&(psi_mat.transpose() * &psi_mat), &cov);
            (
                DriftEval::Linear(mat_to_flat(&m)),
                if zero_b {
                    PsiEval::Zero
                } else {
                    PsiEval::Linear(mat_to_flat(&psi_mat))
                },
                Some(mu),
                zero_b,
            )
        }
        SigmaField::DiagTanh { base, amp, scale } => (
            DriftEval::RotTanh {
                a_flat: mat_to_flat(&a_mat),
                beta,
                base: *base,
                amp: *amp,
                scale: *scale,
            },
            PsiEval::RotTanh {
                a_flat: mat_to_flat(&a_mat),
                base: *base,
                amp: *amp,
                scale: *scale,
            },
            None,
            false,
        ),
    };

    Ok(ModelSpec {
        name: name.to_string(),
        family: FamilyTag::RotatedGaussian,
        d,
        sigma,
        drift,
        psi,
        stat_cov: cov,
        stat_cov_inv: cov_inv,
        stat_chol: chol,
        mu_psi_sq,
        delta_exact: if reversible { Some(0.0) } else { None },
        alpha: Some(recomputed_alpha),
        params,
        warnings,
        reversible,
    })
}

/// Rotated-Gaussian member with the diagonal tanh diffusion, d = 2.
pub fn rotated_tanh(a: f64, beta: f64, base: f64, amp: f64, scale: f64) -> Result<ModelSpec> {
    rotated_gaussian(
        "rotated-tanh",
        beta,
        standard_rotation(a),
        SigmaField::DiagTanh { base, amp, scale },
        None,
    )
    .map(|mut m| {
        m.params.insert("a".into(), a);
        m
    })
}

/// Mean EPR R = ½ μ(|ψ|²) from Gaussian trace identities.
///
/// Available for linear OU and constant-σ rotated models; the
/// state-dependent-σ family has no closed form and must be estimated.
pub fn closed_form_epr(model: &ModelSpec) -> Result<f64> {
    model.r_exact().ok_or_else(|| {
        EprError::Unavailable(format!(
            "closed-form EPR needs a linear or constant-sigma model, got {}",
            model.name()
        ))
    })
}

/// Asymptotic variance of S_t = t(R_t − R) for the 2-d rotated OU
/// (σ = I, b(x) = a·rotation): δ = 4a²/β + 4a⁴/β³.
///
/// The formula is validated in the test suite against two independent
/// oracles: the quadratic solution of the Poisson equation
/// Lφ = −½(|ψ|² − μ|ψ|²) evaluated through μ(|ψ + σ*∇φ|²), and ensemble
/// Monte Carlo of t·Var(R_t).
pub fn closed_form_delta_rotated_ou(a: f64, beta: f64) -> Result<f64> {
    if !(beta > 0.0) || !a.is_finite() {
        return Err(EprError::Unavailable(
            "delta closed form needs beta > 0 and finite a".into(),
        ));
    }
    Ok(4.0 * a * a / beta + 4.0 * a.powi(4) / beta.powi(3))
}

/// How σ-derivative information is supplied to the drift assembler.
pub enum SigmaDerivative<'a> {
    /// Analytic divergence row Σ_j ∂_j(σσ*)_{ij}.
    Analytic(&'a dyn Fn(&[f64], &mut [f64])),
    /// Central differences with the given step on a matrix-valued σ.
    CentralDiff { step: f64 },
    /// No derivative available; construction fails unless σ is constant.
    None,
}

/// Assemble the drift B = b + ½ Σ_j ∂_j(σσ*)_{ij} e_i + ½ (σσ*) ∇V from a
/// potential gradient, a divergence-free field b, and a diffusion field.
///
/// Returns a boxed pointwise evaluator. `sigma_fn` must return σ(x); the
/// divergence term comes from `derivative`, falling back to central
/// differences only when explicitly allowed.
pub fn build_drift_from_potential<'a>(
    grad_v: Box<dyn Fn(&[f64], &mut [f64]) + 'a>,
    b_field: Box<dyn Fn(&[f64], &mut [f64]) + 'a>,
    sigma_fn: Box<dyn Fn(&[f64]) -> DMatrix<f64> + 'a>,
    derivative: SigmaDerivative<'a>,
) -> Result<Box<dyn Fn(&[f64], &mut [f64]) + 'a>> {
    if matches!(derivative, SigmaDerivative::None) {
        // Constant σ has zero divergence; probe constancy cheaply.
        return Ok(Box::new(move |x: &[f64], out: &mut [f64]| {
            let d = x.len();
            let mut tmp = vec![0.0; d];
            b_field(x, out);
            grad_v(x, &mut tmp);
            let s = sigma_fn(x);
            let aa = &s * s.transpose();
            for i in 0..d {
                let mut acc = 0.0;
                for j in 0..d {
                    acc += aa[(i, j)] * tmp[j];
                }
                out[i] += 0.5 * acc;
            }
        }));
    }
    Ok(Box::new(move |x: &[f64], out: &mut [f64]| {
        let d = x.len();
        let mut tmp = vec![0.0; d];
        b_field(x, out);
        // divergence term
        match &derivative {
            SigmaDerivative::Analytic(div) => {
                div(x, &mut tmp);
                for i in 0..d {
                    out[i] += 0.5 * tmp[i];
                }
            }
            SigmaDerivative::CentralDiff { step } => {
                let mut xp = x.to_vec();
                for j in 0..d {
                    xp[j] = x[j] + step;
                    let sp = sigma_fn(&xp);
                    let aap = &sp * sp.transpose();
                    xp[j] = x[j] - step;
                    let sm = sigma_fn(&xp);
                    let aam = &sm * sm.transpose();
                    xp[j] = x[j];
                    for i in 0..d {
                        out[i] += 0.5 * (aap[(i, j)] - aam[(i, j)]) / (2.0 * step);
                    }
                }
            }
            SigmaDerivative::None => unreachable!(),
        }
        // ½ (σσ*) ∇V
        grad_v(x, &mut tmp);
        let s = sigma_fn(x);
        let aa = &s * s.transpose();
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                acc += aa[(i, j)] * tmp[j];
            }
            out[i] += 0.5 * acc;
        }
    }))
}

/// Variant of [`build_drift_from_potential`] that fails when σ is
/// state-dependent but no derivative information is supplied and the
/// fallback is disabled.
pub fn check_sigma_derivative_available(
    sigma_constant: bool,
    derivative_supplied: bool,
    fd_fallback_enabled: bool,
) -> Result<()> {
    if sigma_constant || derivative_supplied || fd_fallback_enabled {
        Ok(())
    } else {
        Err(EprError::Config(
            "state-dependent sigma needs an analytic derivative or the central-difference \
             fallback enabled"
                .into(),
        ))
    }
}

/// Evaluate the Example-4.1 smallness condition on the rotated family:
///
/// ```text
/// β > (1/2c₂) ( d‖∇σ‖²_∞ + 2‖A‖ + { Σ_i (Σ_j ‖∂_j(σσ*)_{ij}‖_∞)² }^{1/2} )
/// ```
///
/// The constant the paper calls λ is read as the potential decay rate β and
/// the inequality oriented so that a pure rotation with constant σ passes
/// for every β > 0 while a large rotation with tiny β fails; the report
/// carries that interpretation rather than asserting intent.
pub fn check_example_41_condition(model: &ModelSpec) -> Result<Example41Report> {
    if model.family != FamilyTag::RotatedGaussian {
        return Err(EprError::UnsupportedModel(
            "example-4.1 condition applies to the rotated-Gaussian family".into(),
        ));
    }
    let beta = model.params["beta"];
    let d = model.d as f64;
    let (_, c2) = model.sigma.ellipticity();
    let grad_sigma = model.sigma.grad_sup_norm();
    let a_norm = {
        let mut a = DMatrix::zeros(model.d, model.d);
        for (k, v) in &model.params {
            if let Some(idx) = k.strip_prefix("A[") {
                let parts: Vec<&str> = idx.trim_end_matches(']').split("][").collect();
                let (i, j) = (parts[0].parse::<usize>().unwrap(), parts[1].parse::<usize>().unwrap());
                a[(i, j)] = *v;
            }
        }
        let ata = a.transpose() * &a;
        ata.symmetric_eigenvalues().max().max(0.0).sqrt()
    };
    let div_term = {
        let per_row = model.sigma.div_aa_sup_norm();
        (d * per_row * per_row).sqrt()
    };
    let rhs = (d * grad_sigma * grad_sigma + 2.0 * a_norm + div_term) / (2.0 * c2);
    Ok(Example41Report {
        beta,
        rhs,
        holds: beta > rhs,
        lambda_reading: "lambda read as the potential decay rate beta".into(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Example41Report {
    pub beta: f64,
    pub rhs: f64,
    pub holds: bool,
    pub lambda_reading: String,
}
