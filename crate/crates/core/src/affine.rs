//! Constant symplectic structures on a vector space, Hamiltonians with exact
//! derivatives, triangles and their midpoint triples, and the identification
//! of point pairs with covectors.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numerics::{condition_number, SINGULAR_CONDITION};

/// A point of the phase space, coordinates ordered `(q_1..q_n, p_1..p_n)`.
pub type PhasePoint = DVector<f64>;

/// A constant symplectic form on `R^{2n}`, stored as its matrix `Ω` with
/// `ω(u, v) = uᵀ Ω v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymplecticStructure {
    n: usize,
    omega: DMatrix<f64>,
    // (Ωᵀ)⁻¹, the map from covectors to vectors.
    sharp: DMatrix<f64>,
}

impl SymplecticStructure {
    /// The standard form with `ω(e_i, e_{n+i}) = 1`.
    pub fn standard(n: usize) -> Self {
        let dim = 2 * n;
        let mut omega = DMatrix::zeros(dim, dim);
        for i in 0..n {
            omega[(i, n + i)] = 1.0;
            omega[(n + i, i)] = -1.0;
        }
        // (Ωᵀ)⁻¹ = Ω for the standard block form
        let sharp = omega.clone();
        SymplecticStructure { n, omega, sharp }
    }

    pub fn new(omega: DMatrix<f64>) -> Result<Self> {
        if !omega.is_square() || !omega.nrows().is_multiple_of(2) || omega.nrows() == 0 {
            return Err(Error::InvalidSpec(
                "symplectic form must be a non-empty square matrix of even size".into(),
            ));
        }
        let asym = (&omega + omega.transpose()).amax();
        if asym > 1e-12 * omega.amax().max(1.0) {
            return Err(Error::InvalidSpec("symplectic form must be antisymmetric".into()));
        }
        if condition_number(&omega) > SINGULAR_CONDITION {
            return Err(Error::InvalidSpec("symplectic form must be nondegenerate".into()));
        }
        let sharp = omega
            .transpose()
            .try_inverse()
            .ok_or_else(|| Error::InvalidSpec("symplectic form must be nondegenerate".into()))?;
        Ok(SymplecticStructure {
            n: omega.nrows() / 2,
            omega,
            sharp,
        })
    }

    /// Half-dimension `n`.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        2 * self.n
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.omega
    }

    /// `ω(u, v) = uᵀ Ω v`.
    pub fn omega(&self, u: &DVector<f64>, v: &DVector<f64>) -> Result<f64> {
        check_dim(self.dim(), u.len())?;
        check_dim(self.dim(), v.len())?;
        Ok(u.dot(&(&self.omega * v)))
    }

    /// The covector `v ↦ ω(u, v)`, as the coefficient vector `Ωᵀ u`.
    pub fn flat(&self, u: &DVector<f64>) -> DVector<f64> {
        self.omega.tr_mul(u)
    }

    /// Inverse of [`flat`](Self::flat): the unique `u` with `ω(u, ·) = ξ`.
    pub fn sharp(&self, xi: &DVector<f64>) -> DVector<f64> {
        &self.sharp * xi
    }

    /// Matrix of `ω(L·, ·) = ½ xᵀ S x`'s Hamiltonian vector field, `L = (Ωᵀ)⁻¹ S`.
    pub fn hamiltonian_matrix(&self, s: &DMatrix<f64>) -> DMatrix<f64> {
        &self.sharp * s
    }

    /// Recovers `S = Ωᵀ L`, symmetrized.
    pub fn quadratic_form_of(&self, l: &DMatrix<f64>) -> DMatrix<f64> {
        let s = self.omega.tr_mul(l);
        (&s + s.transpose()) * 0.5
    }
}

/// Named Hamiltonians with closed-form derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Builtin {
    /// `H = p²/2 − cos q` on the plane.
    Pendulum,
}

impl Builtin {
    pub fn dim(self) -> usize {
        match self {
            Builtin::Pendulum => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub exp: Vec<u32>,
    pub coef: f64,
}

/// A generating function with exact value, gradient and Hessian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HamiltonianRepr", into = "HamiltonianRepr")]
pub enum HamiltonianSpec {
    /// `H(x) = ½ xᵀ S x + bᵀ x + c`.
    Quadratic {
        s: DMatrix<f64>,
        b: DVector<f64>,
        c: f64,
    },
    /// Sum of monomials in the phase-space coordinates. An empty sum is the
    /// zero function in any dimension.
    Polynomial { terms: Vec<Monomial> },
    Builtin { name: Builtin, scale: f64 },
}

impl HamiltonianSpec {
    pub fn quadratic(s: DMatrix<f64>, b: DVector<f64>, c: f64) -> Result<Self> {
        if !s.is_square() {
            return Err(Error::InvalidSpec("S must be square".into()));
        }
        check_dim(s.nrows(), b.len())?;
        if (&s - s.transpose()).amax() > 1e-12 * s.amax().max(1.0) {
            return Err(Error::InvalidSpec("S must be symmetric".into()));
        }
        if s.iter().chain(b.iter()).any(|v| !v.is_finite()) || !c.is_finite() {
            return Err(Error::InvalidSpec("quadratic coefficients must be finite".into()));
        }
        Ok(HamiltonianSpec::Quadratic { s, b, c })
    }

    /// Centered quadratic `½ xᵀ S x`.
    pub fn centered_quadratic(s: DMatrix<f64>) -> Result<Self> {
        let n = s.nrows();
        Self::quadratic(s, DVector::zeros(n), 0.0)
    }

    pub fn polynomial(terms: Vec<Monomial>) -> Result<Self> {
        if let Some(first) = terms.first() {
            let d = first.exp.len();
            if d == 0 {
                return Err(Error::InvalidSpec("monomial exponents must be non-empty".into()));
            }
            for t in &terms {
                check_dim(d, t.exp.len())?;
                if !t.coef.is_finite() {
                    return Err(Error::InvalidSpec("polynomial coefficients must be finite".into()));
                }
            }
        }
        Ok(HamiltonianSpec::Polynomial { terms })
    }

    pub fn builtin(name: Builtin) -> Self {
        HamiltonianSpec::Builtin { name, scale: 1.0 }
    }

    /// The zero Hamiltonian, valid in every dimension.
    pub fn zero() -> Self {
        HamiltonianSpec::Polynomial { terms: Vec::new() }
    }

    /// Phase-space dimension, `None` for the dimension-free zero polynomial.
    pub fn dim(&self) -> Option<usize> {
        match self {
            HamiltonianSpec::Quadratic { s, .. } => Some(s.nrows()),
            HamiltonianSpec::Polynomial { terms } => terms.first().map(|t| t.exp.len()),
            HamiltonianSpec::Builtin { name, .. } => Some(name.dim()),
        }
    }

    pub fn is_quadratic(&self) -> bool {
        matches!(self, HamiltonianSpec::Quadratic { .. })
    }

    /// `factor · H`.
    pub fn scaled(&self, factor: f64) -> Self {
        match self {
            HamiltonianSpec::Quadratic { s, b, c } => HamiltonianSpec::Quadratic {
                s: s * factor,
                b: b * factor,
                c: c * factor,
            },
            HamiltonianSpec::Polynomial { terms } => HamiltonianSpec::Polynomial {
                terms: terms
                    .iter()
                    .map(|t| Monomial {
                        exp: t.exp.clone(),
                        coef: t.coef * factor,
                    })
                    .collect(),
            },
            HamiltonianSpec::Builtin { name, scale } => HamiltonianSpec::Builtin {
                name: *name,
                scale: scale * factor,
            },
        }
    }

    /// Value at `x`. Panics if `x` has the wrong dimension.
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        match self {
            HamiltonianSpec::Quadratic { s, b, c } => 0.5 * x.dot(&(s * x)) + b.dot(x) + c,
            HamiltonianSpec::Polynomial { terms } => terms
                .iter()
                .map(|t| t.coef * monomial_derivative(&t.exp, x, &[]))
                .sum(),
            HamiltonianSpec::Builtin { name: Builtin::Pendulum, scale } => {
                scale * (0.5 * x[1] * x[1] - x[0].cos())
            }
        }
    }

    /// Gradient at `x`. Panics if `x` has the wrong dimension.
    pub fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            HamiltonianSpec::Quadratic { s, b, .. } => s * x + b,
            HamiltonianSpec::Polynomial { terms } => DVector::from_fn(x.len(), |k, _| {
                terms
                    .iter()
                    .map(|t| t.coef * monomial_derivative(&t.exp, x, &[k]))
                    .sum()
            }),
            HamiltonianSpec::Builtin { name: Builtin::Pendulum, scale } => {
                DVector::from_column_slice(&[scale * x[0].sin(), scale * x[1]])
            }
        }
    }

    /// Hessian at `x`. Panics if `x` has the wrong dimension.
    pub fn hess(&self, x: &DVector<f64>) -> DMatrix<f64> {
        match self {
            HamiltonianSpec::Quadratic { s, .. } => s.clone(),
            HamiltonianSpec::Polynomial { terms } => {
                DMatrix::from_fn(x.len(), x.len(), |i, j| {
                    terms
                        .iter()
                        .map(|t| t.coef * monomial_derivative(&t.exp, x, &[i, j]))
                        .sum()
                })
            }
            HamiltonianSpec::Builtin { name: Builtin::Pendulum, scale } => {
                DMatrix::from_row_slice(2, 2, &[scale * x[0].cos(), 0.0, 0.0, *scale])
            }
        }
    }

    fn check_point(&self, x: &DVector<f64>) -> Result<()> {
        match self.dim() {
            Some(d) => check_dim(d, x.len()),
            None => Ok(()),
        }
    }
}

/// Partial derivative of `Π x_i^{e_i}` with respect to the listed variables.
fn monomial_derivative(exp: &[u32], x: &DVector<f64>, wrt: &[usize]) -> f64 {
    let mut out = 1.0;
    for (i, &e) in exp.iter().enumerate() {
        let m = wrt.iter().filter(|&&k| k == i).count() as u32;
        if m > e {
            return 0.0;
        }
        let falling: u32 = (0..m).map(|j| e - j).product();
        out *= falling as f64 * x[i].powi((e - m) as i32);
    }
    out
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum HamiltonianRepr {
    Quadratic {
        #[serde(rename = "S")]
        s: Vec<Vec<f64>>,
        b: Vec<f64>,
        #[serde(default)]
        c: f64,
    },
    Polynomial {
        terms: Vec<Monomial>,
    },
    Builtin {
        name: Builtin,
        #[serde(default = "unit_scale", skip_serializing_if = "is_unit_scale")]
        scale: f64,
    },
}

fn unit_scale() -> f64 {
    1.0
}

fn is_unit_scale(s: &f64) -> bool {
    *s == 1.0
}

impl TryFrom<HamiltonianRepr> for HamiltonianSpec {
    type Error = Error;

    fn try_from(repr: HamiltonianRepr) -> Result<Self> {
        match repr {
            HamiltonianRepr::Quadratic { s, b, c } => {
                let n = s.len();
                if s.iter().any(|row| row.len() != n) {
                    return Err(Error::InvalidSpec("S must be square".into()));
                }
                let flat: Vec<f64> = s.into_iter().flatten().collect();
                HamiltonianSpec::quadratic(
                    DMatrix::from_row_slice(n, n, &flat),
                    DVector::from_vec(b),
                    c,
                )
            }
            HamiltonianRepr::Polynomial { terms } => HamiltonianSpec::polynomial(terms),
            HamiltonianRepr::Builtin { name, scale } => {
                if !scale.is_finite() {
                    return Err(Error::InvalidSpec("builtin scale must be finite".into()));
                }
                Ok(HamiltonianSpec::Builtin { name, scale })
            }
        }
    }
}

impl From<HamiltonianSpec> for HamiltonianRepr {
    fn from(h: HamiltonianSpec) -> Self {
        match h {
            HamiltonianSpec::Quadratic { s, b, c } => HamiltonianRepr::Quadratic {
                s: s.row_iter().map(|r| r.iter().copied().collect()).collect(),
                b: b.iter().copied().collect(),
                c,
            },
            HamiltonianSpec::Polynomial { terms } => HamiltonianRepr::Polynomial { terms },
            HamiltonianSpec::Builtin { name, scale } => HamiltonianRepr::Builtin { name, scale },
        }
    }
}

/// Anything that can drive the midpoint construction: a scalar function with
/// a gradient and, optionally, a Hessian.
pub trait GeneratingFunction {
    /// Phase-space dimension, or `None` if the function accepts any.
    fn dim(&self) -> Option<usize>;

    fn value(&self, x: &DVector<f64>) -> Result<f64>;

    fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>>;

    /// Exact Hessian when available; `None` makes solvers fall back to
    /// finite differences of the gradient.
    fn hessian(&self, _x: &DVector<f64>) -> Result<Option<DMatrix<f64>>> {
        Ok(None)
    }
}

impl GeneratingFunction for HamiltonianSpec {
    fn dim(&self) -> Option<usize> {
        HamiltonianSpec::dim(self)
    }

    fn value(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_point(x)?;
        Ok(self.eval(x))
    }

    fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_point(x)?;
        Ok(self.grad(x))
    }

    fn hessian(&self, x: &DVector<f64>) -> Result<Option<DMatrix<f64>>> {
        self.check_point(x)?;
        Ok(Some(self.hess(x)))
    }
}

impl<G: GeneratingFunction + ?Sized> GeneratingFunction for &G {
    fn dim(&self) -> Option<usize> {
        (**self).dim()
    }
    fn value(&self, x: &DVector<f64>) -> Result<f64> {
        (**self).value(x)
    }
    fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        (**self).gradient(x)
    }
    fn hessian(&self, x: &DVector<f64>) -> Result<Option<DMatrix<f64>>> {
        (**self).hessian(x)
    }
}

/// `ε · H`.
#[derive(Debug, Clone)]
pub struct Scaled<G> {
    pub inner: G,
    pub factor: f64,
}

impl<G: GeneratingFunction> GeneratingFunction for Scaled<G> {
    fn dim(&self) -> Option<usize> {
        self.inner.dim()
    }
    fn value(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.factor * self.inner.value(x)?)
    }
    fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.inner.gradient(x)? * self.factor)
    }
    fn hessian(&self, x: &DVector<f64>) -> Result<Option<DMatrix<f64>>> {
        Ok(self.inner.hessian(x)?.map(|h| h * self.factor))
    }
}

/// `x ↦ H(x − shift)`, the Hamiltonian conjugated by a translation.
#[derive(Debug, Clone)]
pub struct Translated<G> {
    pub inner: G,
    pub shift: DVector<f64>,
}

impl<G: GeneratingFunction> GeneratingFunction for Translated<G> {
    fn dim(&self) -> Option<usize> {
        Some(self.shift.len())
    }
    fn value(&self, x: &DVector<f64>) -> Result<f64> {
        check_dim(self.shift.len(), x.len())?;
        self.inner.value(&(x - &self.shift))
    }
    fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.shift.len(), x.len())?;
        self.inner.gradient(&(x - &self.shift))
    }
    fn hessian(&self, x: &DVector<f64>) -> Result<Option<DMatrix<f64>>> {
        check_dim(self.shift.len(), x.len())?;
        self.inner.hessian(&(x - &self.shift))
    }
}

/// The vector `u_x` with `ω(u_x, ·) = d_xH`. Under the standard form this is
/// the Hamiltonian vector field `(∂H/∂p, −∂H/∂q)`.
pub fn hamiltonian_displacement<G: GeneratingFunction + ?Sized>(
    space: &SymplecticStructure,
    h: &G,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_dim(space.dim(), x.len())?;
    let g = h.gradient(x)?;
    check_dim(space.dim(), g.len())?;
    Ok(space.sharp(&g))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Triangle {
    pub p: PhasePoint,
    pub q: PhasePoint,
    pub r: PhasePoint,
}

impl Triangle {
    /// Side midpoints: `x1 = mid(P, R)`, `x2 = mid(R, Q)`, `x = mid(P, Q)`.
    pub fn midpoints(&self) -> MidpointTriple {
        MidpointTriple {
            x1: (&self.p + &self.r) * 0.5,
            x2: (&self.r + &self.q) * 0.5,
            x: (&self.p + &self.q) * 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MidpointTriple {
    pub x1: PhasePoint,
    pub x2: PhasePoint,
    pub x: PhasePoint,
}

/// Signed symplectic area `½ ω(Q − P, R − P)`.
pub fn triangle_area(space: &SymplecticStructure, t: &Triangle) -> Result<f64> {
    Ok(0.5 * space.omega(&(&t.q - &t.p), &(&t.r - &t.p))?)
}

/// The triangle whose sides `PR`, `RQ`, `PQ` have midpoints `x1`, `x2`, `x`.
pub fn vertices_from_midpoints(m: &MidpointTriple) -> Triangle {
    Triangle {
        p: &m.x1 - &m.x2 + &m.x,
        r: &m.x1 + &m.x2 - &m.x,
        q: &m.x2 - &m.x1 + &m.x,
    }
}

/// `(P, Q) ↦ ((P + Q)/2, ω(Q − P, ·))`, returned as base point and the
/// covector's coefficient vector.
pub fn pair_to_cotangent(
    space: &SymplecticStructure,
    p: &PhasePoint,
    q: &PhasePoint,
) -> Result<(PhasePoint, DVector<f64>)> {
    check_dim(space.dim(), p.len())?;
    check_dim(space.dim(), q.len())?;
    Ok(((p + q) * 0.5, space.flat(&(q - p))))
}

/// Inverse of [`pair_to_cotangent`].
pub fn cotangent_to_pair(
    space: &SymplecticStructure,
    base: &PhasePoint,
    covector: &DVector<f64>,
) -> Result<(PhasePoint, PhasePoint)> {
    check_dim(space.dim(), base.len())?;
    check_dim(space.dim(), covector.len())?;
    let half = space.sharp(covector) * 0.5;
    Ok((base - &half, base + &half))
}
