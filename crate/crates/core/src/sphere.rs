//! The midpoint construction on the unit sphere.
//!
//! A pair `(P, Q)` of non-antipodal points corresponds to the tangent vector
//! `u = proj_x(Q) − proj_x(P)` at the geodesic midpoint `x`, where `proj_x`
//! drops the component along `x`. Such vectors have length `2 sin(d/2) < 2`.
//! `Φ_H` sends `P` to `Q` when the tangent vector of the pair is the
//! Hamiltonian displacement `u_x` of `H`, defined by `ω_x(u_x, ·) = dH_x`
//! with the area form `ω_x(a, b) = x · (a × b)`.
//!
//! Root-finds run in orthonormal tangent charts re-anchored at every Newton
//! iterate, with normalization as the retraction.

use nalgebra::{DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::affine::Monomial;
use crate::composition::AREA_ORIENTATION;
use crate::error::{Error, Result};
use crate::midpoint::{log_log_slope, OrderFit};
use crate::numerics::{fd_gradient, fd_jacobian, SolverConfig, SINGULAR_CONDITION};

pub type Vec3 = Vector3<f64>;

/// `‖P + Q‖` below this counts as antipodal.
pub const ANTIPODAL_TOLERANCE: f64 = 1e-9;

/// Largest `|u · x|` accepted as tangent.
pub const TANGENT_TOLERANCE: f64 = 1e-10;

/// Central-difference step for gradients of the triangle functional.
pub const AREA_STEP: f64 = 1e-5;

/// Step for the finite-difference Hessian of the triangle functional.
pub const AREA_HESSIAN_STEP: f64 = 1e-4;

/// Residual floor for the spherical stationarity solve; the finite-difference
/// gradient is noisy at the `1e-11` level.
pub const COMPOSITION_TOL: f64 = 1e-10;

/// Residual floor when `Φ_H` is driven by a composed generating function.
pub const COMPOSED_MAP_TOL: f64 = 1e-9;

/// Unit vector in 3-space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpherePoint(Vec3);

impl SpherePoint {
    /// Normalizes `v`.
    pub fn new(v: Vec3) -> Result<Self> {
        let n = v.norm();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::InvalidSpec("sphere point needs a finite non-zero vector".into()));
        }
        Ok(SpherePoint(v / n))
    }

    pub fn from_xyz(x: f64, y: f64, z: f64) -> Result<Self> {
        Self::new(Vec3::new(x, y, z))
    }

    pub fn v(&self) -> Vec3 {
        self.0
    }

    /// `p − (p · x) x`.
    pub fn project(&self, p: &Vec3) -> Vec3 {
        p - self.0 * self.0.dot(p)
    }

    /// Right-handed orthonormal tangent frame `(e1, e2)` with `e1 × e2 = x`.
    pub fn tangent_frame(&self) -> (Vec3, Vec3) {
        let x = self.0;
        let a = x.iamin();
        let mut axis = Vec3::zeros();
        axis[a] = 1.0;
        let e1 = axis.cross(&x).normalize();
        (e1, x.cross(&e1))
    }

    /// `normalize(x + a e1 + b e2)` in the frame of [`tangent_frame`](Self::tangent_frame).
    fn chart(&self, frame: &(Vec3, Vec3), a: f64, b: f64) -> SpherePoint {
        SpherePoint((self.0 + frame.0 * a + frame.1 * b).normalize())
    }
}

/// Tangent vector `u` at a sphere point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TangentAt {
    pub base: SpherePoint,
    pub u: Vec3,
}

impl TangentAt {
    pub fn new(base: SpherePoint, u: Vec3) -> Result<Self> {
        let dot = u.dot(&base.0);
        if dot.abs() > TANGENT_TOLERANCE * (1.0 + u.norm()) {
            return Err(Error::NotTangent { dot });
        }
        Ok(TangentAt { base, u })
    }

    /// The covector `u ⌟ ω`, represented by the tangent vector `x × u`.
    pub fn covector(&self) -> Vec3 {
        self.base.0.cross(&self.u)
    }
}

/// Functions on the sphere with a tangential gradient.
pub trait SphereField {
    fn value(&self, x: &SpherePoint) -> Result<f64>;
    /// Gradient along the sphere, tangent at `x`.
    fn gradient(&self, x: &SpherePoint) -> Result<Vec3>;
}

impl<T: SphereField + ?Sized> SphereField for &T {
    fn value(&self, x: &SpherePoint) -> Result<f64> {
        (**self).value(x)
    }
    fn gradient(&self, x: &SpherePoint) -> Result<Vec3> {
        (**self).gradient(x)
    }
}

/// Restriction of an ambient function of `(p_x, p_y, p_z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SphereHamiltonianRepr", into = "SphereHamiltonianRepr")]
pub enum SphereHamiltonian {
    /// `H(p) = c · p`.
    Linear { c: Vec3 },
    AmbientPolynomial { terms: Vec<Monomial> },
}

impl SphereHamiltonian {
    pub fn linear(c: Vec3) -> Self {
        SphereHamiltonian::Linear { c }
    }

    pub fn ambient_polynomial(terms: Vec<Monomial>) -> Result<Self> {
        for t in &terms {
            if t.exp.len() != 3 {
                return Err(Error::InvalidSpec("ambient monomials need three exponents".into()));
            }
            if !t.coef.is_finite() {
                return Err(Error::InvalidSpec("polynomial coefficients must be finite".into()));
            }
        }
        Ok(SphereHamiltonian::AmbientPolynomial { terms })
    }

    pub fn scaled(&self, factor: f64) -> Self {
        match self {
            SphereHamiltonian::Linear { c } => SphereHamiltonian::Linear { c: c * factor },
            SphereHamiltonian::AmbientPolynomial { terms } => SphereHamiltonian::AmbientPolynomial {
                terms: terms
                    .iter()
                    .map(|t| Monomial {
                        exp: t.exp.clone(),
                        coef: t.coef * factor,
                    })
                    .collect(),
            },
        }
    }

    pub fn eval_ambient(&self, p: &Vec3) -> f64 {
        match self {
            SphereHamiltonian::Linear { c } => c.dot(p),
            SphereHamiltonian::AmbientPolynomial { terms } => {
                terms.iter().map(|t| t.coef * monomial3(&t.exp, p, None)).sum()
            }
        }
    }

    pub fn ambient_gradient(&self, p: &Vec3) -> Vec3 {
        match self {
            SphereHamiltonian::Linear { c } => *c,
            SphereHamiltonian::AmbientPolynomial { terms } => Vec3::from_fn(|k, _| {
                terms.iter().map(|t| t.coef * monomial3(&t.exp, p, Some(k))).sum()
            }),
        }
    }
}

fn monomial3(exp: &[u32], p: &Vec3, wrt: Option<usize>) -> f64 {
    let mut out = 1.0;
    for i in 0..3 {
        let e = exp[i];
        if wrt == Some(i) {
            if e == 0 {
                return 0.0;
            }
            out *= e as f64 * p[i].powi(e as i32 - 1);
        } else {
            out *= p[i].powi(e as i32);
        }
    }
    out
}

impl SphereField for SphereHamiltonian {
    fn value(&self, x: &SpherePoint) -> Result<f64> {
        Ok(self.eval_ambient(&x.0))
    }
    fn gradient(&self, x: &SpherePoint) -> Result<Vec3> {
        Ok(x.project(&self.ambient_gradient(&x.0)))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum SphereHamiltonianRepr {
    Linear { c: [f64; 3] },
    AmbientPoly { terms: Vec<Monomial> },
}

impl TryFrom<SphereHamiltonianRepr> for SphereHamiltonian {
    type Error = Error;

    fn try_from(repr: SphereHamiltonianRepr) -> Result<Self> {
        match repr {
            SphereHamiltonianRepr::Linear { c } => {
                if c.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidSpec("linear coefficients must be finite".into()));
                }
                Ok(SphereHamiltonian::Linear { c: Vec3::from(c) })
            }
            SphereHamiltonianRepr::AmbientPoly { terms } => SphereHamiltonian::ambient_polynomial(terms),
        }
    }
}

impl From<SphereHamiltonian> for SphereHamiltonianRepr {
    fn from(h: SphereHamiltonian) -> Self {
        match h {
            SphereHamiltonian::Linear { c } => SphereHamiltonianRepr::Linear { c: [c.x, c.y, c.z] },
            SphereHamiltonian::AmbientPolynomial { terms } => SphereHamiltonianRepr::AmbientPoly { terms },
        }
    }
}

/// `x ↦ factor · H(x)`.
#[derive(Debug, Clone)]
pub struct ScaledField<G> {
    pub inner: G,
    pub factor: f64,
}

impl<G: SphereField> SphereField for ScaledField<G> {
    fn value(&self, x: &SpherePoint) -> Result<f64> {
        Ok(self.factor * self.inner.value(x)?)
    }
    fn gradient(&self, x: &SpherePoint) -> Result<Vec3> {
        Ok(self.inner.gradient(x)? * self.factor)
    }
}

/// `x ↦ H(Oᵀ x)` for a rotation `O`.
#[derive(Debug, Clone)]
pub struct Rotated<G> {
    pub inner: G,
    pub rotation: Matrix3<f64>,
}

impl<G: SphereField> Rotated<G> {
    fn pull(&self, x: &SpherePoint) -> SpherePoint {
        SpherePoint(self.rotation.tr_mul(&x.0))
    }
}

impl<G: SphereField> SphereField for Rotated<G> {
    fn value(&self, x: &SpherePoint) -> Result<f64> {
        self.inner.value(&self.pull(x))
    }
    fn gradient(&self, x: &SpherePoint) -> Result<Vec3> {
        Ok(self.rotation * self.inner.gradient(&self.pull(x))?)
    }
}

/// Midpoint of the shorter great-circle arc from `P` to `Q`.
pub fn geodesic_midpoint(p: &SpherePoint, q: &SpherePoint) -> Result<SpherePoint> {
    let s = p.0 + q.0;
    let n = s.norm();
    if n < ANTIPODAL_TOLERANCE {
        return Err(Error::AntipodalPair);
    }
    Ok(SpherePoint(s / n))
}

pub fn geodesic_distance(p: &SpherePoint, q: &SpherePoint) -> f64 {
    p.0.cross(&q.0).norm().atan2(p.0.dot(&q.0))
}

/// Rotation by π about `x`: `2 (p · x) x − p`.
pub fn point_symmetry(x: &SpherePoint, p: &SpherePoint) -> SpherePoint {
    SpherePoint(x.0 * (2.0 * p.0.dot(&x.0)) - p.0)
}

/// `σ_x` as a matrix, `2 x xᵀ − I`.
fn symmetry_matrix(x: &SpherePoint) -> Matrix3<f64> {
    x.0 * x.0.transpose() * 2.0 - Matrix3::identity()
}

/// The tangent vector representing the pair `(P, Q)`.
pub fn pair_to_tangent(p: &SpherePoint, q: &SpherePoint) -> Result<TangentAt> {
    let x = geodesic_midpoint(p, q)?;
    let u = x.project(&q.0) - x.project(&p.0);
    Ok(TangentAt { base: x, u })
}

/// Inverse of [`pair_to_tangent`]:
/// `P, Q = ∓u/2 + √(1 − ‖u‖²/4) x`.
pub fn tangent_to_pair(x: &SpherePoint, u: &Vec3) -> Result<(SpherePoint, SpherePoint)> {
    let t = TangentAt::new(*x, *u)?;
    let len = t.u.norm();
    if len.is_nan() || len >= 2.0 {
        return Err(Error::TangentTooLong { length: len });
    }
    let u = x.project(&t.u);
    let h = (1.0 - 0.25 * len * len).sqrt();
    Ok((
        SpherePoint((x.0 * h - u * 0.5).normalize()),
        SpherePoint((x.0 * h + u * 0.5).normalize()),
    ))
}

/// `ω_x(a, b) = x · (a × b)`.
pub fn area_form(x: &SpherePoint, a: &Vec3, b: &Vec3) -> f64 {
    x.0.dot(&a.cross(b))
}

/// The tangent `u` with `ω_x(u, v) = dH_x(v)`: `u = ∇H × x`.
pub fn sphere_hamiltonian_vector<G: SphereField + ?Sized>(h: &G, x: &SpherePoint) -> Result<TangentAt> {
    let g = h.gradient(x)?;
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue("sphere gradient"));
    }
    Ok(TangentAt {
        base: *x,
        u: x.project(&g.cross(&x.0)),
    })
}

/// Time-`t` Hamiltonian flow `ẋ = ∇H × x` by `steps` RK4 steps, normalized
/// after each step.
pub fn sphere_flow<G: SphereField + ?Sized>(h: &G, p: &SpherePoint, t: f64, steps: usize) -> Result<SpherePoint> {
    let f = |y: &Vec3| -> Result<Vec3> {
        let y = SpherePoint::new(*y)?;
        Ok(sphere_hamiltonian_vector(h, &y)?.u)
    };
    let dt = t / steps.max(1) as f64;
    let mut x = p.0;
    for _ in 0..steps.max(1) {
        let k1 = f(&x)?;
        let k2 = f(&(x + k1 * (dt / 2.0)))?;
        let k3 = f(&(x + k2 * (dt / 2.0)))?;
        let k4 = f(&(x + k3 * dt))?;
        x = (x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)).normalize();
    }
    Ok(SpherePoint(x))
}

/// Product of tangent charts at a list of base points.
struct Chart {
    bases: Vec<SpherePoint>,
    frames: Vec<(Vec3, Vec3)>,
}

impl Chart {
    fn at(bases: Vec<SpherePoint>) -> Self {
        let frames = bases.iter().map(SpherePoint::tangent_frame).collect();
        Chart { bases, frames }
    }

    fn dim(&self) -> usize {
        2 * self.bases.len()
    }

    fn points(&self, xi: &DVector<f64>) -> Vec<SpherePoint> {
        self.bases
            .iter()
            .zip(&self.frames)
            .enumerate()
            .map(|(k, (b, f))| b.chart(f, xi[2 * k], xi[2 * k + 1]))
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct ChartNewton {
    tol: f64,
    max_iter: usize,
    fd_step: f64,
}

/// Gauss–Newton with backtracking in charts re-anchored at each iterate.
/// `residual(chart, ξ)` is evaluated at `chart.points(ξ)`.
fn chart_newton<F>(start: Vec<SpherePoint>, residual: F, opts: ChartNewton) -> Result<(Vec<SpherePoint>, f64)>
where
    F: Fn(&Chart, &DVector<f64>) -> Result<DVector<f64>>,
{
    let mut chart = Chart::at(start);
    let zero = DVector::zeros(chart.dim());
    let mut norm = residual(&chart, &zero)?.norm();
    for iteration in 0..opts.max_iter {
        if norm <= opts.tol {
            return Ok((chart.bases, norm));
        }
        let r = residual(&chart, &zero)?;
        let jac = fd_jacobian(|xi| residual(&chart, xi), &zero, opts.fd_step)?;
        let svd = jac.svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if smin.is_nan() || smin <= smax / SINGULAR_CONDITION {
            return Err(Error::SingularJacobian { iteration });
        }
        let delta = -svd
            .solve(&r, 0.0)
            .map_err(|_| Error::SingularJacobian { iteration })?;

        let mut t = 1.0;
        let mut accepted = None;
        while t >= 1e-10 {
            let trial = &delta * t;
            if let Ok(rt) = residual(&chart, &trial) {
                let n = rt.norm();
                if n < norm {
                    accepted = Some((trial, n));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((step, n)) = accepted else {
            return Err(Error::NoConvergence {
                iterations: iteration + 1,
                residual_norm: norm,
            });
        };
        chart = Chart::at(chart.points(&step));
        norm = n;
    }
    if norm <= opts.tol {
        Ok((chart.bases, norm))
    } else {
        Err(Error::NoConvergence {
            iterations: opts.max_iter,
            residual_norm: norm,
        })
    }
}

/// `Φ_H` on the sphere.
#[derive(Debug, Clone)]
pub struct SphereMidpointMap<G> {
    pub h: G,
    pub cfg: SolverConfig,
}

impl<G: SphereField> SphereMidpointMap<G> {
    pub fn new(h: G, cfg: SolverConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(SphereMidpointMap { h, cfg })
    }

    /// First point of the pair represented by `u_x` at `x`.
    fn source_of(&self, x: &SpherePoint) -> Result<(SpherePoint, SpherePoint)> {
        let t = sphere_hamiltonian_vector(&self.h, x)?;
        tangent_to_pair(x, &t.u)
    }

    /// Solves for the midpoint `x` whose pair starts at `P`; returns `(Q, x)`.
    pub fn phi_forward(&self, p: &SpherePoint) -> Result<(SpherePoint, SpherePoint)> {
        let opts = ChartNewton {
            tol: self.cfg.tol,
            max_iter: self.cfg.max_iter,
            fd_step: self.cfg.fd_step,
        };
        let (x, _) = chart_newton(
            vec![*p],
            |chart, xi| {
                let x = chart.points(xi)[0];
                let (p_hat, _) = self.source_of(&x)?;
                Ok(DVector::from_iterator(3, (p_hat.0 - p.0).iter().copied()))
            },
            opts,
        )?;
        let (_, q) = self.source_of(&x[0])?;
        Ok((q, x[0]))
    }

    /// Determinant of the derivative of `Φ_H` at `P` in right-handed
    /// orthonormal frames at `P` and `Φ_H(P)`, by central differences.
    pub fn jacobian_determinant(&self, p: &SpherePoint, h: f64) -> Result<f64> {
        let (q0, _) = self.phi_forward(p)?;
        let fp = p.tangent_frame();
        let fq = q0.tangent_frame();
        let jac = fd_jacobian(
            |a| {
                let (q, _) = self.phi_forward(&p.chart(&fp, a[0], a[1]))?;
                Ok(DVector::from_column_slice(&[fq.0.dot(&q.0), fq.1.dot(&q.0)]))
            },
            &DVector::zeros(2),
            h,
        )?;
        Ok(jac.determinant())
    }
}

/// `Φ_H(P)` and its midpoint.
pub fn sphere_phi_forward<G: SphereField>(h: G, p: &SpherePoint, cfg: &SolverConfig) -> Result<(SpherePoint, SpherePoint)> {
    SphereMidpointMap::new(h, *cfg)?.phi_forward(p)
}

/// Gap between `Φ_{εH}(P)` and the time-`ε` flow over the given `ε`, with
/// the fitted log-log slope.
pub fn sphere_infinitesimal_order<G: SphereField>(
    h: &G,
    cfg: &SolverConfig,
    p: &SpherePoint,
    epsilons: &[f64],
) -> Result<OrderFit> {
    let mut samples = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let scaled = ScaledField { inner: h, factor: eps };
        let (q, _) = sphere_phi_forward(&scaled, p, cfg)?;
        let target = sphere_flow(h, p, eps, 200)?;
        samples.push((eps, (q.0 - target.0).norm()));
    }
    if samples.iter().all(|s| s.1 == 0.0) {
        return Err(Error::DegenerateFit("gap identically zero"));
    }
    let slope = log_log_slope(&samples)?;
    Ok(OrderFit { slope, samples })
}

/// Signed area of the geodesic triangle with shorter-arc sides, positive
/// when `det[P, Q, R] > 0`, via `tan(E/2) = det / (1 + P·Q + Q·R + R·P)`.
pub fn spherical_triangle_area(p: &SpherePoint, q: &SpherePoint, r: &SpherePoint) -> Result<f64> {
    for (a, b) in [(p, q), (q, r), (r, p)] {
        if (a.0 + b.0).norm() < ANTIPODAL_TOLERANCE {
            return Err(Error::AntipodalPair);
        }
    }
    let det = p.0.dot(&q.0.cross(&r.0));
    let den = 1.0 + p.0.dot(&q.0) + q.0.dot(&r.0) + r.0.dot(&p.0);
    Ok(2.0 * det.atan2(den))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalTriangle {
    pub p: SpherePoint,
    pub q: SpherePoint,
    pub r: SpherePoint,
}

/// Side midpoints `x1 = mid(P, R)`, `x2 = mid(R, Q)`, `x = mid(Q, P)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalMidpoints {
    pub x1: SpherePoint,
    pub x2: SpherePoint,
    pub x: SpherePoint,
}

impl SphericalTriangle {
    pub fn midpoints(&self) -> Result<SphericalMidpoints> {
        Ok(SphericalMidpoints {
            x1: geodesic_midpoint(&self.p, &self.r)?,
            x2: geodesic_midpoint(&self.r, &self.q)?,
            x: geodesic_midpoint(&self.q, &self.p)?,
        })
    }

    pub fn area(&self) -> Result<f64> {
        spherical_triangle_area(&self.p, &self.q, &self.r)
    }
}

/// Reconstructs the triangle with side midpoints `x1, x2, x`.
///
/// `P` lies on the axis of the rotation `σ_x σ_{x2} σ_{x1}`; of the two
/// antipodal candidates the one whose sides have the given midpoints on
/// their shorter arcs is kept. Then `R = σ_{x1}(P)` and `Q = σ_{x2}(R)`.
pub fn spherical_vertices_from_midpoints(
    x1: &SpherePoint,
    x2: &SpherePoint,
    x: &SpherePoint,
) -> Result<SphericalTriangle> {
    let m = symmetry_matrix(x) * symmetry_matrix(x2) * symmetry_matrix(x1) - Matrix3::identity();
    let rows = [m.row(0).transpose(), m.row(1).transpose(), m.row(2).transpose()];
    let axis = [
        rows[0].cross(&rows[1]),
        rows[0].cross(&rows[2]),
        rows[1].cross(&rows[2]),
    ]
    .into_iter()
    .max_by(|a, b| a.norm().total_cmp(&b.norm()))
    .expect("three candidates");
    if axis.norm() < 1e-12 {
        return Err(Error::DegenerateConfiguration("composite rotation is the identity"));
    }
    let mut p = SpherePoint(axis.normalize());
    if p.0.dot(&x1.0) < 0.0 {
        p = SpherePoint(-p.0);
    }
    let r = point_symmetry(x1, &p);
    let q = point_symmetry(x2, &r);
    let eps = 1e-12;
    if p.0.dot(&x1.0) <= eps || r.0.dot(&x2.0) <= eps || q.0.dot(&x.0) <= eps {
        return Err(Error::DegenerateConfiguration("no vertex choice has shorter-arc sides"));
    }
    if (point_symmetry(x, &q).0 - p.0).norm() > 1e-10 {
        return Err(Error::DegenerateConfiguration("reconstructed triangle does not close"));
    }
    Ok(SphericalTriangle { p, q, r })
}

/// Composition of two spherical generating functions through the spherical
/// triangle functional.
#[derive(Debug, Clone)]
pub struct SphereCompositionProblem<G1, G2> {
    pub h1: G1,
    pub h2: G2,
    pub cfg: SolverConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphereComposedValue {
    pub value: f64,
    pub x1: SpherePoint,
    pub x2: SpherePoint,
}

impl<G1: SphereField, G2: SphereField> SphereCompositionProblem<G1, G2> {
    pub fn new(h1: G1, h2: G2, cfg: SolverConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(SphereCompositionProblem { h1, h2, cfg })
    }

    /// `H1(x1) + H2(x2) + s · area(spherical_vertices_from_midpoints(x1, x2, x))`.
    pub fn triangle_functional(&self, x1: &SpherePoint, x2: &SpherePoint, x: &SpherePoint) -> Result<f64> {
        let tri = spherical_vertices_from_midpoints(x1, x2, x)?;
        Ok(self.h1.value(x1)? + self.h2.value(x2)? + AREA_ORIENTATION * tri.area()?)
    }

    /// Critical point in `(x1, x2)` for fixed `x`, started from the
    /// first-order predictor `(x − u2/2, x + u1/2)`.
    pub fn compose_genfun(&self, x: &SpherePoint) -> Result<SphereComposedValue> {
        let u1 = sphere_hamiltonian_vector(&self.h1, x)?.u;
        let u2 = sphere_hamiltonian_vector(&self.h2, x)?.u;
        let start = vec![SpherePoint::new(x.0 - u2 * 0.5)?, SpherePoint::new(x.0 + u1 * 0.5)?];
        let functional = |chart: &Chart, xi: &DVector<f64>| -> Result<f64> {
            let pts = chart.points(xi);
            self.triangle_functional(&pts[0], &pts[1], x)
        };
        let opts = ChartNewton {
            tol: self.cfg.tol.max(COMPOSITION_TOL),
            max_iter: self.cfg.max_iter,
            fd_step: AREA_HESSIAN_STEP,
        };
        let (pts, _) = chart_newton(
            start,
            |chart, xi| fd_gradient(|eta| functional(chart, eta), xi, AREA_STEP),
            opts,
        )?;
        Ok(SphereComposedValue {
            value: self.triangle_functional(&pts[0], &pts[1], x)?,
            x1: pts[0],
            x2: pts[1],
        })
    }

    /// Tangential gradient of the composed function at `x`: the `x`-derivative
    /// of the functional with the critical midpoints held fixed.
    pub fn envelope_gradient(&self, x: &SpherePoint, c: &SphereComposedValue) -> Result<Vec3> {
        let frame = x.tangent_frame();
        let g = fd_gradient(
            |a| {
                let tri = spherical_vertices_from_midpoints(&c.x1, &c.x2, &x.chart(&frame, a[0], a[1]))?;
                Ok(AREA_ORIENTATION * tri.area()?)
            },
            &DVector::zeros(2),
            AREA_STEP,
        )?;
        Ok(frame.0 * g[0] + frame.1 * g[1])
    }

    pub fn composed(&self) -> SphereComposedGenfun<'_, G1, G2> {
        SphereComposedGenfun { problem: self }
    }

    /// `‖Φ_H(P) − Φ_{H2}(Φ_{H1}(P))‖` for the composed `H`.
    pub fn composition_residual(&self, p: &SpherePoint) -> Result<f64> {
        let (r, _) = sphere_phi_forward(&self.h1, p, &self.cfg)?;
        let (q, _) = sphere_phi_forward(&self.h2, &r, &self.cfg)?;
        let cfg = self.cfg.with_tol(self.cfg.tol.max(COMPOSED_MAP_TOL));
        let (q_h, _) = sphere_phi_forward(self.composed(), p, &cfg)?;
        Ok((q_h.0 - q.0).norm())
    }

    pub fn verify_composition(&self, samples: &[SpherePoint]) -> Result<f64> {
        samples
            .iter()
            .map(|p| self.composition_residual(p))
            .try_fold(0.0f64, |acc, r| Ok(acc.max(r?)))
    }
}

/// The composed function of a [`SphereCompositionProblem`].
#[derive(Debug, Clone, Copy)]
pub struct SphereComposedGenfun<'a, G1, G2> {
    problem: &'a SphereCompositionProblem<G1, G2>,
}

impl<G1: SphereField, G2: SphereField> SphereField for SphereComposedGenfun<'_, G1, G2> {
    fn value(&self, x: &SpherePoint) -> Result<f64> {
        Ok(self.problem.compose_genfun(x)?.value)
    }
    fn gradient(&self, x: &SpherePoint) -> Result<Vec3> {
        let c = self.problem.compose_genfun(x)?;
        self.problem.envelope_gradient(x, &c)
    }
}

pub fn sphere_compose_genfun<G1: SphereField, G2: SphereField>(
    h1: G1,
    h2: G2,
    x: &SpherePoint,
    cfg: &SolverConfig,
) -> Result<SphereComposedValue> {
    SphereCompositionProblem::new(h1, h2, *cfg)?.compose_genfun(x)
}

pub fn sphere_verify_composition<G1: SphereField, G2: SphereField>(
    h1: G1,
    h2: G2,
    samples: &[SpherePoint],
    cfg: &SolverConfig,
) -> Result<f64> {
    SphereCompositionProblem::new(h1, h2, *cfg)?.verify_composition(samples)
}

/// Largest discrepancy between `Σ dξ_i ∧ dx_i` pulled back along
/// `(P, Q) ↦ (x, x × u)` and `ω_Q − ω_P`, over coordinate pairs of a product
/// of tangent charts at `(P, Q)`; derivatives by central differences.
pub fn pullback_defect(p: &SpherePoint, q: &SpherePoint, h: f64) -> Result<f64> {
    pair_to_tangent(p, q)?;
    let fp = p.tangent_frame();
    let fq = q.tangent_frame();
    let lift = |a: &DVector<f64>| {
        let t = pair_to_tangent(&p.chart(&fp, a[0], a[1]), &q.chart(&fq, a[2], a[3]))?;
        let (x, xi) = (t.base.0, t.covector());
        Ok(DVector::from_iterator(6, x.iter().chain(xi.iter()).copied()))
    };
    // one Richardson step: the h² term grows like 1/cos³(d/2) near antipodal pairs
    let origin = DVector::zeros(4);
    let coarse = fd_jacobian(lift, &origin, h)?;
    let fine = fd_jacobian(lift, &origin, h / 2.0)?;
    let d = (fine * 4.0 - coarse) / 3.0;
    // chart derivatives of P and Q at the origin are the frame vectors
    let dp = [fp.0, fp.1, Vec3::zeros(), Vec3::zeros()];
    let dq = [Vec3::zeros(), Vec3::zeros(), fq.0, fq.1];
    let mut defect = 0.0f64;
    for a in 0..4 {
        for b in (a + 1)..4 {
            let canonical: f64 = (0..3)
                .map(|i| d[(3 + i, a)] * d[(i, b)] - d[(3 + i, b)] * d[(i, a)])
                .sum();
            let product = area_form(q, &dq[a], &dq[b]) - area_form(p, &dp[a], &dp[b]);
            defect = defect.max((canonical - product).abs());
        }
    }
    Ok(defect)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, PI};

    fn sp(x: f64, y: f64, z: f64) -> SpherePoint {
        SpherePoint::from_xyz(x, y, z).unwrap()
    }

    fn random_point(rng: &mut ChaCha8Rng) -> SpherePoint {
        loop {
            let v = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 0.1 && n <= 1.0 {
                return SpherePoint(v / n);
            }
        }
    }

    fn near(rng: &mut ChaCha8Rng, x: &SpherePoint, r: f64) -> SpherePoint {
        let f = x.tangent_frame();
        x.chart(&f, rng.random_range(-r..r), rng.random_range(-r..r))
    }

    fn nonlinear() -> SphereHamiltonian {
        SphereHamiltonian::ambient_polynomial(vec![
            Monomial { exp: vec![0, 0, 1], coef: 0.3 },
            Monomial { exp: vec![1, 1, 0], coef: 0.1 },
        ])
        .unwrap()
    }

    fn close(a: &SpherePoint, b: &SpherePoint, tol: f64) {
        assert!((a.0 - b.0).norm() <= tol, "{:?} vs {:?}", a.0, b.0);
    }

    #[test]
    fn midpoint_examples() {
        let p = sp(1.0, 0.0, 0.0);
        close(&geodesic_midpoint(&p, &p).unwrap(), &p, 0.0);
        close(
            &geodesic_midpoint(&p, &sp(0.0, 1.0, 0.0)).unwrap(),
            &sp(FRAC_1_SQRT_2, FRAC_1_SQRT_2, 0.0),
            1e-15,
        );
        assert_eq!(geodesic_midpoint(&p, &sp(-1.0, 0.0, 0.0)), Err(Error::AntipodalPair));
    }

    #[test]
    fn point_symmetry_examples() {
        let z = sp(0.0, 0.0, 1.0);
        close(&point_symmetry(&z, &z), &z, 0.0);
        close(&point_symmetry(&z, &sp(1.0, 0.0, 0.0)), &sp(-1.0, 0.0, 0.0), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let (x, p) = (random_point(&mut rng), random_point(&mut rng));
            close(&point_symmetry(&x, &point_symmetry(&x, &p)), &p, 1e-15);
        }
    }

    #[test]
    fn frames_are_right_handed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let x = random_point(&mut rng);
            let (e1, e2) = x.tangent_frame();
            assert!((e1.cross(&e2) - x.0).norm() < 1e-15);
        }
    }

    #[test]
    fn pair_to_tangent_example() {
        let t = pair_to_tangent(&sp(1.0, 0.0, 0.0), &sp(0.0, 1.0, 0.0)).unwrap();
        close(&t.base, &sp(FRAC_1_SQRT_2, FRAC_1_SQRT_2, 0.0), 1e-15);
        assert!((t.u - Vec3::new(-1.0, 1.0, 0.0)).norm() < 1e-15);
        assert!((t.u.norm() - 2.0 * (PI / 4.0).sin()).abs() < 1e-15);

        let p = sp(0.3, -0.2, 0.9);
        let t = pair_to_tangent(&p, &p).unwrap();
        close(&t.base, &p, 1e-16);
        assert_eq!(t.u, Vec3::zeros());
    }

    #[test]
    fn tangent_length_law_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (p, q) = (random_point(&mut rng), random_point(&mut rng));
            let t = pair_to_tangent(&p, &q).unwrap();
            let d = geodesic_distance(&p, &q);
            assert!((t.u.norm() - 2.0 * (d / 2.0).sin()).abs() <= 1e-10);
            assert!(t.u.norm() < 2.0);
            let (p2, q2) = tangent_to_pair(&t.base, &t.u).unwrap();
            close(&p2, &p, 1e-12);
            close(&q2, &q, 1e-12);
        }
    }

    #[test]
    fn tangent_to_pair_in_rotated_frame() {
        // the (1,0,0)/(0,1,0) pair rotated so that its midpoint is the pole
        let x = sp(FRAC_1_SQRT_2, FRAC_1_SQRT_2, 0.0);
        let rot = Rotation3::rotation_between(&x.0, &Vec3::z()).unwrap();
        let (p, q) = tangent_to_pair(&sp(0.0, 0.0, 1.0), &(rot * Vec3::new(-1.0, 1.0, 0.0))).unwrap();
        close(&p, &SpherePoint(rot * Vec3::x()), 1e-15);
        close(&q, &SpherePoint(rot * Vec3::y()), 1e-15);
    }

    #[test]
    fn tangent_to_pair_errors() {
        let z = sp(0.0, 0.0, 1.0);
        let (p, q) = tangent_to_pair(&z, &Vec3::zeros()).unwrap();
        assert_eq!((p, q), (z, z));
        assert!(matches!(
            tangent_to_pair(&z, &Vec3::new(2.0, 0.0, 0.0)),
            Err(Error::TangentTooLong { .. })
        ));
        assert!(matches!(
            tangent_to_pair(&z, &Vec3::new(0.1, 0.0, 0.1)),
            Err(Error::NotTangent { .. })
        ));
        let near_antipodal = sp(-1.0, 1e-7, 0.0);
        let t = pair_to_tangent(&sp(1.0, 0.0, 0.0), &near_antipodal).unwrap();
        assert!(t.u.norm() < 2.0);
    }

    #[test]
    fn hamiltonian_vector_solves_the_defining_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = nonlinear();
        for _ in 0..20 {
            let x = random_point(&mut rng);
            let (e1, e2) = x.tangent_frame();
            let g = h.gradient(&x).unwrap();
            // ω(u, e_j) = dH(e_j) as a 2×2 system in the frame
            let w = nalgebra::Matrix2::new(
                area_form(&x, &e1, &e1),
                area_form(&x, &e2, &e1),
                area_form(&x, &e1, &e2),
                area_form(&x, &e2, &e2),
            );
            let c = w.lu().solve(&nalgebra::Vector2::new(g.dot(&e1), g.dot(&e2))).unwrap();
            let u = sphere_hamiltonian_vector(&h, &x).unwrap().u;
            assert!((u - (e1 * c[0] + e2 * c[1])).norm() < 1e-14);
            assert!(u.dot(&x.0).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_hamiltonian_vector() {
        let h = SphereHamiltonian::linear(Vec3::z());
        let x = sp(1.0, 0.0, 0.0);
        let u = sphere_hamiltonian_vector(&h, &x).unwrap().u;
        assert!((u.norm() - 1.0).abs() < 1e-15);
        assert!((u - Vec3::z().cross(&x.0)).norm() < 1e-15);
        let constant = SphereHamiltonian::ambient_polynomial(vec![Monomial { exp: vec![0, 0, 0], coef: 2.0 }]).unwrap();
        assert_eq!(sphere_hamiltonian_vector(&constant, &x).unwrap().u, Vec3::zeros());
    }

    #[test]
    fn json_encoding() {
        let h: SphereHamiltonian = serde_json::from_str(r#"{"type":"linear","c":[0,0,1]}"#).unwrap();
        assert_eq!(h, SphereHamiltonian::linear(Vec3::z()));
        let h: SphereHamiltonian =
            serde_json::from_str(r#"{"type":"ambient_poly","terms":[{"exp":[1,1,0],"coef":1.0}]}"#).unwrap();
        assert_eq!(h.eval_ambient(&Vec3::new(2.0, 3.0, 5.0)), 6.0);
        let back: SphereHamiltonian = serde_json::from_str(&serde_json::to_string(&h).unwrap()).unwrap();
        assert_eq!(back, h);
        assert!(serde_json::from_str::<SphereHamiltonian>(r#"{"type":"ambient_poly","terms":[{"exp":[1,1],"coef":1.0}]}"#).is_err());
    }

    #[test]
    fn constant_hamiltonian_is_identity() {
        let zero = SphereHamiltonian::linear(Vec3::zeros());
        let p = sp(0.2, 0.5, -0.7);
        let (q, x) = sphere_phi_forward(&zero, &p, &SolverConfig::default()).unwrap();
        close(&q, &p, 1e-15);
        close(&x, &p, 1e-15);
    }

    #[test]
    fn phi_forward_satisfies_the_pair_relation() {
        let map = SphereMidpointMap::new(nonlinear(), SolverConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let p = random_point(&mut rng);
            let (q, x) = map.phi_forward(&p).unwrap();
            let t = pair_to_tangent(&p, &q).unwrap();
            close(&t.base, &x, 1e-11);
            let u = sphere_hamiltonian_vector(&map.h, &x).unwrap().u;
            assert!((t.u - u).norm() < 1e-11);
        }
    }

    #[test]
    fn adding_a_constant_changes_nothing() {
        let mut terms = match nonlinear() {
            SphereHamiltonian::AmbientPolynomial { terms } => terms,
            _ => unreachable!(),
        };
        let p = sp(0.4, -0.1, 0.6);
        let cfg = SolverConfig::default();
        let a = sphere_phi_forward(SphereHamiltonian::ambient_polynomial(terms.clone()).unwrap(), &p, &cfg).unwrap();
        terms.push(Monomial { exp: vec![0, 0, 0], coef: 7.5 });
        let b = sphere_phi_forward(SphereHamiltonian::ambient_polynomial(terms).unwrap(), &p, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn small_linear_hamiltonian_follows_the_flow() {
        let h = SphereHamiltonian::linear(Vec3::z());
        let p = sp(1.0, 0.0, 0.0);
        let cfg = SolverConfig::default();
        let eps = 1e-3;
        let (q, _) = sphere_phi_forward(h.scaled(eps), &p, &cfg).unwrap();
        let u = Vec3::z().cross(&p.0);
        assert!(((q.0 - p.0) - u * eps).norm() < 2.0 * eps * eps);
        let flow = sphere_flow(&h, &p, eps, 200).unwrap();
        assert!((flow.0 - q.0).norm() < eps * eps * eps);
    }

    #[test]
    fn flow_rotates_about_the_linear_axis() {
        // ∇H × x with H = z·p rotates by angle t about z
        let h = SphereHamiltonian::linear(Vec3::z());
        let p = sp(1.0, 0.0, 0.0);
        let q = sphere_flow(&h, &p, 0.5, 400).unwrap();
        close(&q, &sp(0.5f64.cos(), 0.5f64.sin(), 0.0), 1e-12);
    }

    #[test]
    fn infinitesimal_slope() {
        let fit = sphere_infinitesimal_order(
            &nonlinear(),
            &SolverConfig::default(),
            &sp(0.3, 0.8, 0.2),
            &crate::midpoint::log_spaced(0.2, 0.02, 6),
        )
        .unwrap();
        assert!(fit.slope >= 2.0, "{fit:?}");
    }

    #[test]
    fn area_preservation() {
        let map = SphereMidpointMap::new(nonlinear(), SolverConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let p = random_point(&mut rng);
            let det = map.jacobian_determinant(&p, 1e-4).unwrap();
            assert!((det - 1.0).abs() <= 1e-6, "{det}");
        }
    }

    #[test]
    fn rotational_equivariance() {
        let h = nonlinear();
        let rot = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(Vec3::new(1.0, 2.0, -0.5)), 0.7);
        let o = *rot.matrix();
        let cfg = SolverConfig::default();
        let p = sp(0.1, -0.6, 0.4);
        let (q, _) = sphere_phi_forward(&h, &p, &cfg).unwrap();
        let rotated = Rotated { inner: &h, rotation: o };
        let (q_rot, _) = sphere_phi_forward(&rotated, &SpherePoint(o * p.0), &cfg).unwrap();
        assert!((q_rot.0 - o * q.0).norm() <= 1e-9);
    }

    #[test]
    fn too_large_hamiltonian_is_reported() {
        let h = SphereHamiltonian::linear(Vec3::z() * 3.0);
        let r = sphere_phi_forward(&h, &sp(1.0, 0.0, 0.0), &SolverConfig::default());
        assert!(r.is_err());
    }

    fn angle_excess(p: &Vec3, q: &Vec3, r: &Vec3) -> f64 {
        let angle = |a: &Vec3, b: &Vec3, c: &Vec3| {
            let tb = (b - a * a.dot(b)).normalize();
            let tc = (c - a * a.dot(c)).normalize();
            tb.dot(&tc).clamp(-1.0, 1.0).acos()
        };
        let e = angle(p, q, r) + angle(q, r, p) + angle(r, p, q) - PI;
        e * p.dot(&q.cross(r)).signum()
    }

    fn lhuilier(p: &Vec3, q: &Vec3, r: &Vec3) -> f64 {
        let d = |u: &Vec3, v: &Vec3| u.cross(v).norm().atan2(u.dot(v));
        let (a, b, c) = (d(q, r), d(r, p), d(p, q));
        let s = 0.5 * (a + b + c);
        let t = (0.5 * s).tan() * (0.5 * (s - a)).tan() * (0.5 * (s - b)).tan() * (0.5 * (s - c)).tan();
        4.0 * t.max(0.0).sqrt().atan() * p.dot(&q.cross(r)).signum()
    }

    #[test]
    fn triangle_area_examples() {
        let (x, y, z) = (sp(1.0, 0.0, 0.0), sp(0.0, 1.0, 0.0), sp(0.0, 0.0, 1.0));
        assert_eq!(spherical_triangle_area(&x, &x, &x).unwrap(), 0.0);
        assert!((spherical_triangle_area(&x, &y, &z).unwrap() - FRAC_PI_2).abs() < 1e-15);
        assert!((spherical_triangle_area(&y, &x, &z).unwrap() + FRAC_PI_2).abs() < 1e-15);
        assert_eq!(
            spherical_triangle_area(&x, &sp(-1.0, 0.0, 0.0), &z),
            Err(Error::AntipodalPair)
        );
    }

    #[test]
    fn triangle_area_matches_excess_and_lhuilier() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let (p, q, r) = (random_point(&mut rng), random_point(&mut rng), random_point(&mut rng));
            let a = spherical_triangle_area(&p, &q, &r).unwrap();
            assert!((a - angle_excess(&p.0, &q.0, &r.0)).abs() < 1e-9, "{a}");
            assert!((a - lhuilier(&p.0, &q.0, &r.0)).abs() < 1e-9, "{a}");
        }
    }

    #[test]
    fn vertices_of_collapsed_triangle() {
        let z = sp(0.0, 0.0, 1.0);
        let t = spherical_vertices_from_midpoints(&z, &z, &z).unwrap();
        for v in [t.p, t.q, t.r] {
            close(&v, &z, 1e-15);
        }
    }

    #[test]
    fn vertices_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut checked = 0;
        for _ in 0..100 {
            let tri = SphericalTriangle {
                p: random_point(&mut rng),
                q: random_point(&mut rng),
                r: random_point(&mut rng),
            };
            let m = tri.midpoints().unwrap();
            if let Ok(back) = spherical_vertices_from_midpoints(&m.x1, &m.x2, &m.x) {
                let again = back.midpoints().unwrap();
                close(&again.x1, &m.x1, 1e-10);
                close(&again.x2, &m.x2, 1e-10);
                close(&again.x, &m.x, 1e-10);
                checked += 1;
            }
        }
        assert_eq!(checked, 100);
    }

    #[test]
    fn vertices_in_the_affine_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = sp(0.0, 0.0, 1.0);
        let (e1, e2) = z.tangent_frame();
        for _ in 0..10 {
            let ms: Vec<SpherePoint> = (0..3).map(|_| near(&mut rng, &z, 5e-4)).collect();
            let tri = spherical_vertices_from_midpoints(&ms[0], &ms[1], &ms[2]).unwrap();
            let coords = |v: &SpherePoint| nalgebra::DVector::from_column_slice(&[v.0.dot(&e1), v.0.dot(&e2)]);
            let planar = crate::affine::vertices_from_midpoints(&crate::affine::MidpointTriple {
                x1: coords(&ms[0]),
                x2: coords(&ms[1]),
                x: coords(&ms[2]),
            });
            assert!((coords(&tri.p) - planar.p).norm() < 1e-5);
            assert!((coords(&tri.q) - planar.q).norm() < 1e-5);
            assert!((coords(&tri.r) - planar.r).norm() < 1e-5);
        }
    }

    #[test]
    fn identity_composite_is_degenerate() {
        // σ_z σ_y σ_x = I
        let r = spherical_vertices_from_midpoints(&sp(1.0, 0.0, 0.0), &sp(0.0, 1.0, 0.0), &sp(0.0, 0.0, 1.0));
        assert!(matches!(r, Err(Error::DegenerateConfiguration(_))));
    }

    #[test]
    fn zero_composition() {
        let zero = SphereHamiltonian::linear(Vec3::zeros());
        let x = sp(0.3, 0.3, 0.9);
        let c = sphere_compose_genfun(&zero, &zero, &x, &SolverConfig::default()).unwrap();
        assert!(c.value.abs() < 1e-14);
        close(&c.x1, &x, 1e-12);
        close(&c.x2, &x, 1e-12);
    }

    #[test]
    fn composition_with_zero_is_the_single_map() {
        let h = SphereHamiltonian::linear(Vec3::z() * 0.2);
        let zero = SphereHamiltonian::linear(Vec3::zeros());
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let samples: Vec<SpherePoint> = (0..3).map(|_| random_point(&mut rng)).collect();
        let r = sphere_verify_composition(&h, &zero, &samples, &SolverConfig::default()).unwrap();
        assert!(r <= 1e-6, "{r}");
    }

    #[test]
    fn linear_pair_composes() {
        let h = SphereHamiltonian::linear(Vec3::z() * 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples: Vec<SpherePoint> = (0..3).map(|_| random_point(&mut rng)).collect();
        let r = sphere_verify_composition(&h, &h, &samples, &SolverConfig::default()).unwrap();
        assert!(r <= 1e-5, "{r}");
    }

    #[test]
    fn pullback_matches_product_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let (p, q) = (random_point(&mut rng), random_point(&mut rng));
            let d = pullback_defect(&p, &q, 1e-4).unwrap();
            assert!(d <= 1e-5, "{d}");
        }
        let p = sp(0.2, -0.4, 0.8);
        assert!(pullback_defect(&p, &p, 1e-4).unwrap() <= 1e-7);
    }

    #[test]
    fn pullback_defect_is_rotation_invariant() {
        let (p, q) = (sp(0.5, 0.1, 0.8), sp(-0.3, 0.7, 0.2));
        let o = *Rotation3::from_axis_angle(&Vec3::y_axis(), 1.1).matrix();
        let a = pullback_defect(&p, &q, 1e-4).unwrap();
        let b = pullback_defect(&SpherePoint(o * p.0), &SpherePoint(o * q.0), 1e-4).unwrap();
        assert!((a - b).abs() <= 1e-7);
    }
}
