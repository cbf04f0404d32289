//! The midpoint map `Φ_H` of a generating function on an affine symplectic
//! space.
//!
//! For a generating function `H` the map sends `P` to `Q` whenever the
//! midpoint `x = (P + Q)/2` satisfies `Q − P = u_x`, with `u_x` the
//! Hamiltonian displacement of `H` at `x`. For quadratic `H` this is the
//! Cayley transform of the Hamiltonian matrix, implemented in closed form by
//! [`cayley_map_quadratic`] and inverted by [`genfun_of_linear_map`].

use nalgebra::{DMatrix, DVector};

use crate::affine::{hamiltonian_displacement, GeneratingFunction, PhasePoint, Scaled, SymplecticStructure};
use crate::error::{check_dim, Error, Result};
use crate::numerics::{
    condition_number, fd_jacobian, solve_newton, solve_newton_with_jacobian, SolveReport, SolverConfig,
};

/// Condition estimate above which `I ∓ L/2` counts as singular.
pub const CAYLEY_CONDITION_LIMIT: f64 = 1e12;

/// `Φ_H` for a fixed generating function and solver configuration.
#[derive(Debug, Clone)]
pub struct MidpointMap<G> {
    pub space: SymplecticStructure,
    pub h: G,
    pub cfg: SolverConfig,
}

impl<G: GeneratingFunction> MidpointMap<G> {
    pub fn new(space: SymplecticStructure, h: G, cfg: SolverConfig) -> Result<Self> {
        if let Some(d) = h.dim() {
            check_dim(space.dim(), d)?;
        }
        cfg.validate()?;
        Ok(MidpointMap { space, h, cfg })
    }

    /// Solves `x − u(x)/2 = P` and returns `(Q, x)` with `Q = 2x − P`.
    pub fn phi_forward(&self, p: &PhasePoint) -> Result<(PhasePoint, PhasePoint)> {
        check_dim(self.space.dim(), p.len())?;
        let x = self.solve_midpoint(p, -0.5)?.root;
        Ok((&x * 2.0 - p, x))
    }

    /// Solves `x + u(x)/2 = Q` and returns `(P, x)` with `P = 2x − Q`.
    pub fn phi_inverse(&self, q: &PhasePoint) -> Result<(PhasePoint, PhasePoint)> {
        check_dim(self.space.dim(), q.len())?;
        let x = self.solve_midpoint(q, 0.5)?.root;
        Ok((&x * 2.0 - q, x))
    }

    /// Root of `x + sign·u(x) − target`. Newton starts from the target; if
    /// that fails, the root is continued from `x = target` along
    /// `x + t·sign·u(x) = target` for `t` rising from 0 to 1.
    fn solve_midpoint(&self, target: &PhasePoint, sign: f64) -> Result<SolveReport> {
        let direct = self.solve_scaled(target, sign, target.clone());
        let Err(first_error) = direct else {
            return direct;
        };
        let mut t = 0.0f64;
        let mut dt = 0.25;
        let mut x = target.clone();
        let mut last = None;
        while t < 1.0 {
            let next = (t + dt).min(1.0);
            match self.solve_scaled(target, sign * next, x.clone()) {
                Ok(r) => {
                    t = next;
                    x = r.root.clone();
                    last = Some(r);
                    dt *= 2.0;
                }
                Err(_) => {
                    dt *= 0.5;
                    if dt < 1.0 / 1024.0 {
                        return Err(first_error);
                    }
                }
            }
        }
        last.ok_or(first_error)
    }

    fn solve_scaled(&self, target: &PhasePoint, sign: f64, start: PhasePoint) -> Result<SolveReport> {
        let residual = |x: &DVector<f64>| -> Result<DVector<f64>> {
            let u = hamiltonian_displacement(&self.space, &self.h, x)?;
            Ok(x + u * sign - target)
        };
        let dim = self.space.dim();
        let report = if self.h.hessian(target)?.is_some() {
            let jacobian = |x: &DVector<f64>| -> Result<DMatrix<f64>> {
                let hess = self.h.hessian(x)?.ok_or(Error::NonFiniteValue("hessian"))?;
                Ok(DMatrix::identity(dim, dim) + self.space.hamiltonian_matrix(&hess) * sign)
            };
            solve_newton_with_jacobian(residual, jacobian, &start, &self.cfg)?
        } else {
            solve_newton(residual, &start, &self.cfg)?
        };
        report.into_converged()
    }

    /// Max-norm of `DΦᵀ Ω DΦ − Ω`, with `DΦ` from central differences of
    /// [`phi_forward`](Self::phi_forward) at step `cfg.fd_step`.
    pub fn symplecticity_defect(&self, p: &PhasePoint) -> Result<f64> {
        let jac = self.jacobian(p)?;
        let omega = self.space.matrix();
        Ok((jac.transpose() * omega * &jac - omega).amax())
    }

    /// Central-difference Jacobian of `Φ_H` at `p`.
    pub fn jacobian(&self, p: &PhasePoint) -> Result<DMatrix<f64>> {
        fd_jacobian(|y| Ok(self.phi_forward(y)?.0), p, self.cfg.fd_step)
    }
}

/// `Φ = (I + L/2)(I − L/2)⁻¹` for the Hamiltonian matrix `L` of `½ xᵀ S x`.
pub fn cayley_map_quadratic(space: &SymplecticStructure, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim(space.dim(), s.nrows())?;
    check_dim(space.dim(), s.ncols())?;
    let dim = space.dim();
    let half_l = space.hamiltonian_matrix(s) * 0.5;
    let id = DMatrix::<f64>::identity(dim, dim);
    let denom = &id - &half_l;
    let condition = condition_number(&denom);
    if condition > CAYLEY_CONDITION_LIMIT {
        return Err(Error::CayleySingular { condition });
    }
    let inv = denom.try_inverse().ok_or(Error::CayleySingular { condition })?;
    Ok((id + half_l) * inv)
}

/// Inverse Cayley transform: the symmetric `S` with
/// `cayley_map_quadratic(S) = Φ`, from `L = 2(Φ − I)(Φ + I)⁻¹`.
pub fn genfun_of_linear_map(space: &SymplecticStructure, phi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim(space.dim(), phi.nrows())?;
    check_dim(space.dim(), phi.ncols())?;
    let dim = space.dim();
    let omega = space.matrix();
    let defect = (phi.transpose() * omega * phi - omega).amax();
    if defect > 1e-8 * phi.amax().powi(2).max(1.0) {
        return Err(Error::InvalidSpec(format!("linear map is not symplectic (defect {defect:e})")));
    }
    let id = DMatrix::<f64>::identity(dim, dim);
    let plus = phi + &id;
    let condition = condition_number(&plus);
    if condition > CAYLEY_CONDITION_LIMIT {
        return Err(Error::CayleySingular { condition });
    }
    let inv = plus.try_inverse().ok_or(Error::CayleySingular { condition })?;
    let l = (phi - id) * inv * 2.0;
    Ok(space.quadratic_form_of(&l))
}

/// Point of comparison for [`infinitesimal_order`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrderReference {
    /// `P + ε X_H(P)`; the gap is `O(ε²)`.
    Linearized,
    /// The time-`ε` Hamiltonian flow from a fine RK4 integration.
    Flow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderFit {
    /// Least-squares slope of `log gap` against `log ε`.
    pub slope: f64,
    /// `(ε, gap)` samples.
    pub samples: Vec<(f64, f64)>,
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(samples: &[(f64, f64)]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::DegenerateFit("need at least two samples"));
    }
    if samples
        .iter()
        .any(|&(e, d)| !(e > 0.0 && d > 0.0 && e.is_finite() && d.is_finite()))
    {
        return Err(Error::DegenerateFit("non-positive gap"));
    }
    let logs: Vec<(f64, f64)> = samples.iter().map(|&(e, d)| (e.ln(), d.ln())).collect();
    let k = logs.len() as f64;
    let mx = logs.iter().map(|l| l.0).sum::<f64>() / k;
    let my = logs.iter().map(|l| l.1).sum::<f64>() / k;
    let sxx: f64 = logs.iter().map(|l| (l.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|l| (l.0 - mx) * (l.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateFit("all step sizes equal"));
    }
    Ok(sxy / sxx)
}

/// `count` step sizes spaced logarithmically from `hi` down to `lo`.
pub fn log_spaced(hi: f64, lo: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![hi];
    }
    (0..count)
        .map(|i| hi * (lo / hi).powf(i as f64 / (count - 1) as f64))
        .collect()
}

/// Measures how fast `Φ_{εH}(P)` approaches its infinitesimal counterpart as
/// `ε → 0`.
pub fn infinitesimal_order<G: GeneratingFunction>(
    space: &SymplecticStructure,
    h: &G,
    cfg: &SolverConfig,
    p: &PhasePoint,
    epsilons: &[f64],
    reference: OrderReference,
) -> Result<OrderFit> {
    let mut samples = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let map = MidpointMap::new(space.clone(), Scaled { inner: h, factor: eps }, *cfg)?;
        let (q, _) = map.phi_forward(p)?;
        let target = match reference {
            OrderReference::Linearized => p + hamiltonian_displacement(space, h, p)? * eps,
            OrderReference::Flow => hamiltonian_flow(space, h, p, eps, 200)?,
        };
        samples.push((eps, (q - target).norm()));
    }
    if samples.iter().all(|s| s.1 == 0.0) {
        return Err(Error::DegenerateFit("gap identically zero"));
    }
    let slope = log_log_slope(&samples)?;
    Ok(OrderFit { slope, samples })
}

fn rk4_step<G: GeneratingFunction + ?Sized>(
    space: &SymplecticStructure,
    h: &G,
    x: &PhasePoint,
    dt: f64,
) -> Result<PhasePoint> {
    let f = |y: &PhasePoint| hamiltonian_displacement(space, h, y);
    let k1 = f(x)?;
    let k2 = f(&(x + &k1 * (dt / 2.0)))?;
    let k3 = f(&(x + &k2 * (dt / 2.0)))?;
    let k4 = f(&(x + &k3 * dt))?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

/// Time-`t` flow of Hamilton's equations by `steps` classical RK4 steps.
pub fn hamiltonian_flow<G: GeneratingFunction + ?Sized>(
    space: &SymplecticStructure,
    h: &G,
    p: &PhasePoint,
    t: f64,
    steps: usize,
) -> Result<PhasePoint> {
    let dt = t / steps as f64;
    let mut x = p.clone();
    for _ in 0..steps {
        x = rk4_step(space, h, &x, dt)?;
    }
    Ok(x)
}

/// A trajectory together with the energy `H` at every state.
#[derive(Debug, Clone)]
pub struct Orbit {
    pub states: Vec<PhasePoint>,
    pub energies: Vec<f64>,
    /// Step at which the iteration stopped early, and why.
    pub truncated: Option<(usize, Error)>,
}

impl Orbit {
    /// `max |H(x_k) − H(x_0)|` over the given index range.
    pub fn max_energy_error(&self, range: std::ops::Range<usize>) -> f64 {
        let e0 = self.energies[0];
        self.energies[range].iter().map(|e| (e - e0).abs()).fold(0.0, f64::max)
    }
}

/// Iterates `Φ_{εH}` `steps` times from `start`.
pub fn orbit<G: GeneratingFunction>(
    space: &SymplecticStructure,
    h: &G,
    eps: f64,
    start: &PhasePoint,
    steps: usize,
    cfg: &SolverConfig,
) -> Result<Orbit> {
    let map = MidpointMap::new(space.clone(), Scaled { inner: h, factor: eps }, *cfg)?;
    iterate(h, start, steps, |x| Ok(map.phi_forward(x)?.0))
}

/// The same experiment with one classical RK4 step of size `ε` per iteration,
/// for contrast.
pub fn rk4_orbit<G: GeneratingFunction>(
    space: &SymplecticStructure,
    h: &G,
    eps: f64,
    start: &PhasePoint,
    steps: usize,
) -> Result<Orbit> {
    iterate(h, start, steps, |x| rk4_step(space, h, x, eps))
}

fn iterate<G: GeneratingFunction>(
    h: &G,
    start: &PhasePoint,
    steps: usize,
    step: impl Fn(&PhasePoint) -> Result<PhasePoint>,
) -> Result<Orbit> {
    let mut states = Vec::with_capacity(steps + 1);
    let mut energies = Vec::with_capacity(steps + 1);
    energies.push(h.value(start)?);
    states.push(start.clone());
    let mut truncated = None;
    for k in 0..steps {
        let next = step(&states[k]).and_then(|x| Ok((h.value(&x)?, x)));
        match next {
            Ok((e, x)) => {
                energies.push(e);
                states.push(x);
            }
            Err(err) => {
                truncated = Some((k, err));
                break;
            }
        }
    }
    Ok(Orbit {
        states,
        energies,
        truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affine::{Builtin, HamiltonianSpec, Monomial, Translated};

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn cfg() -> SolverConfig {
        SolverConfig::default().with_fd_step(1e-5)
    }

    fn harmonic() -> HamiltonianSpec {
        HamiltonianSpec::centered_quadratic(DMatrix::identity(2, 2)).unwrap()
    }

    /// Exact Cayley matrix for `½ xᵀ S x` on the standard plane, assembled
    /// from the 2x2 inverse formula rather than the library path.
    fn cayley_2x2(s: &DMatrix<f64>) -> DMatrix<f64> {
        // L = Ω S with Ω = [[0, 1], [-1, 0]]
        let l = [[s[(1, 0)], s[(1, 1)]], [-s[(0, 0)], -s[(0, 1)]]];
        let a = [[1.0 - l[0][0] / 2.0, -l[0][1] / 2.0], [-l[1][0] / 2.0, 1.0 - l[1][1] / 2.0]];
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
        let b = [[1.0 + l[0][0] / 2.0, l[0][1] / 2.0], [l[1][0] / 2.0, 1.0 + l[1][1] / 2.0]];
        DMatrix::from_fn(2, 2, |i, j| b[i][0] * inv[0][j] + b[i][1] * inv[1][j])
    }

    #[test]
    fn zero_hamiltonian_is_identity() {
        let map = MidpointMap::new(SymplecticStructure::standard(1), HamiltonianSpec::zero(), cfg()).unwrap();
        let p = v(&[0.3, -0.6]);
        let (q, x) = map.phi_forward(&p).unwrap();
        assert_eq!(q, p);
        assert_eq!(x, p);
        let (p2, _) = map.phi_inverse(&q).unwrap();
        assert_eq!(p2, p);
        assert!(map.symplecticity_defect(&p).unwrap() <= 1e-10);
    }

    #[test]
    fn harmonic_oscillator_image() {
        let map = MidpointMap::new(SymplecticStructure::standard(1), harmonic(), cfg()).unwrap();
        let (q, x) = map.phi_forward(&v(&[1.0, 0.0])).unwrap();
        assert!((q - v(&[0.6, -0.8])).amax() < 1e-14);
        assert!((x - v(&[0.8, -0.4])).amax() < 1e-14);
        let oracle = cayley_2x2(&DMatrix::identity(2, 2));
        assert!((oracle - DMatrix::from_row_slice(2, 2, &[0.6, 0.8, -0.8, 0.6])).amax() < 1e-15);
    }

    #[test]
    fn linear_hamiltonian_is_a_translation() {
        let sp = SymplecticStructure::standard(1);
        let h = HamiltonianSpec::quadratic(DMatrix::zeros(2, 2), v(&[0.5, -1.5]), 2.0).unwrap();
        let u = hamiltonian_displacement(&sp, &h, &v(&[0.0, 0.0])).unwrap();
        let map = MidpointMap::new(sp, h, cfg()).unwrap();
        let p = v(&[0.1, 0.2]);
        let (q, x) = map.phi_forward(&p).unwrap();
        assert!((q - (&p + &u)).amax() < 1e-15);
        assert!((x - (&p + &u * 0.5)).amax() < 1e-15);
    }

    #[test]
    fn cayley_examples() {
        let sp = SymplecticStructure::standard(1);
        assert_eq!(cayley_map_quadratic(&sp, &DMatrix::zeros(2, 2)).unwrap(), DMatrix::identity(2, 2));
        let phi = cayley_map_quadratic(&sp, &DMatrix::identity(2, 2)).unwrap();
        assert!((&phi - DMatrix::from_row_slice(2, 2, &[0.6, 0.8, -0.8, 0.6])).amax() < 1e-15);
        // rotation by 2·arctan(1/2), clockwise under this convention
        let angle = 2.0 * 0.5f64.atan();
        assert!((phi[(0, 0)] - angle.cos()).abs() < 1e-15);
        assert!((phi[(0, 1)] - angle.sin()).abs() < 1e-15);
    }

    #[test]
    fn cayley_matches_2x2_oracle_and_inverse() {
        let sp = SymplecticStructure::standard(1);
        let s = DMatrix::from_row_slice(2, 2, &[0.7, -0.3, -0.3, 0.2]);
        let phi = cayley_map_quadratic(&sp, &s).unwrap();
        assert!((&phi - cayley_2x2(&s)).amax() < 1e-14);
        assert!((phi.determinant() - 1.0).abs() < 1e-12);

        let h = HamiltonianSpec::centered_quadratic(s.clone()).unwrap();
        let map = MidpointMap::new(sp.clone(), h, cfg()).unwrap();
        let q = v(&[0.4, -0.9]);
        let (p, _) = map.phi_inverse(&q).unwrap();
        let inv = phi.try_inverse().unwrap();
        assert!((p - inv * &q).amax() < 1e-12);
    }

    #[test]
    fn inverse_cayley_examples() {
        let sp = SymplecticStructure::standard(1);
        let s = genfun_of_linear_map(&sp, &DMatrix::identity(2, 2)).unwrap();
        assert_eq!(s, DMatrix::zeros(2, 2));
        let err = genfun_of_linear_map(&sp, &(-DMatrix::<f64>::identity(2, 2))).unwrap_err();
        assert!(matches!(err, Error::CayleySingular { .. }));

        let a = 2.0 * 0.5f64.atan();
        let rot = DMatrix::from_row_slice(2, 2, &[a.cos(), a.sin(), -a.sin(), a.cos()]);
        let s = genfun_of_linear_map(&sp, &rot).unwrap();
        assert!((s - DMatrix::identity(2, 2)).amax() < 1e-14);

        let not_symplectic = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 2.0]);
        assert!(matches!(genfun_of_linear_map(&sp, &not_symplectic), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn cayley_breakdown_is_typed() {
        // L = Ω S = diag(2, -2), so I − L/2 is singular
        let sp = SymplecticStructure::standard(1);
        let s = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 2.0, 0.0]);
        assert!(matches!(cayley_map_quadratic(&sp, &s), Err(Error::CayleySingular { .. })));
        let map = MidpointMap::new(sp, HamiltonianSpec::centered_quadratic(s).unwrap(), cfg()).unwrap();
        let err = map.phi_forward(&v(&[1.0, 1.0])).unwrap_err();
        assert!(matches!(err, Error::SingularJacobian { .. }), "{err:?}");
    }

    #[test]
    fn round_trip_on_polynomial() {
        let h = HamiltonianSpec::polynomial(vec![
            Monomial { exp: vec![3, 0], coef: 0.4 },
            Monomial { exp: vec![1, 2], coef: -0.5 },
            Monomial { exp: vec![0, 4], coef: 0.2 },
        ])
        .unwrap()
        .scaled(0.5);
        let map = MidpointMap::new(SymplecticStructure::standard(1), h, cfg()).unwrap();
        for p in [v(&[0.3, 0.1]), v(&[-0.5, 0.7]), v(&[0.0, -0.9])] {
            let (q, x) = map.phi_forward(&p).unwrap();
            let (p2, x2) = map.phi_inverse(&q).unwrap();
            assert!((&p2 - &p).norm() <= 1e-11, "{p} {q} {p2}");
            assert!((x2 - x).norm() <= 1e-11);
            let (q2, _) = map.phi_forward(&p2).unwrap();
            assert!((q2 - q).norm() <= 1e-11);
        }
    }

    #[test]
    fn pendulum_is_symplectic() {
        let map = MidpointMap::new(
            SymplecticStructure::standard(1),
            HamiltonianSpec::builtin(Builtin::Pendulum),
            SolverConfig::default().with_tol(1e-12).with_fd_step(1e-5),
        )
        .unwrap();
        let defect = map.symplecticity_defect(&v(&[0.3, 0.2])).unwrap();
        assert!(defect <= 1e-6, "{defect}");
    }

    #[test]
    fn quadratic_defect_against_exact_jacobian() {
        let sp = SymplecticStructure::standard(2);
        let s = DMatrix::from_fn(4, 4, |i, j| 0.1 * ((i + 2 * j) as f64).cos() + 0.1 * ((j + 2 * i) as f64).cos());
        let exact = cayley_map_quadratic(&sp, &s).unwrap();
        let map = MidpointMap::new(sp, HamiltonianSpec::centered_quadratic(s).unwrap(), cfg()).unwrap();
        let p = v(&[0.2, -0.1, 0.5, 0.3]);
        assert!((map.jacobian(&p).unwrap() - exact).amax() < 1e-8);
        assert!(map.symplecticity_defect(&p).unwrap() <= 1e-8);
    }

    #[test]
    fn order_for_quadratic_against_exact_flow() {
        let sp = SymplecticStructure::standard(1);
        let h = harmonic();
        let eps = log_spaced(1e-2, 1e-3, 5);
        let p = v(&[1.0, 0.5]);
        let fit = infinitesimal_order(&sp, &h, &cfg(), &p, &eps, OrderReference::Flow).unwrap();
        assert!((fit.slope - 3.0).abs() < 0.05, "{}", fit.slope);
        // exact flow of the harmonic oscillator is a clockwise rotation
        let t: f64 = 0.01;
        let exact = v(&[t.cos() * 1.0 + t.sin() * 0.5, -t.sin() * 1.0 + t.cos() * 0.5]);
        assert!((hamiltonian_flow(&sp, &h, &p, t, 200).unwrap() - exact).norm() < 1e-15);
        let lin = infinitesimal_order(&sp, &h, &cfg(), &p, &eps, OrderReference::Linearized).unwrap();
        assert!(lin.slope >= 1.9);
    }

    #[test]
    fn order_for_zero_hamiltonian_is_degenerate() {
        let sp = SymplecticStructure::standard(1);
        let err = infinitesimal_order(
            &sp,
            &HamiltonianSpec::zero(),
            &cfg(),
            &v(&[0.1, 0.1]),
            &log_spaced(1e-2, 1e-3, 4),
            OrderReference::Linearized,
        )
        .unwrap_err();
        assert!(matches!(err, Error::DegenerateFit(_)));
    }

    #[test]
    fn translation_equivariance() {
        let sp = SymplecticStructure::standard(1);
        let h = HamiltonianSpec::builtin(Builtin::Pendulum).scaled(0.3);
        let shift = v(&[0.7, -0.4]);
        let base = MidpointMap::new(sp.clone(), &h, cfg()).unwrap();
        let moved = MidpointMap::new(sp, Translated { inner: &h, shift: shift.clone() }, cfg()).unwrap();
        let p = v(&[0.2, 0.5]);
        let (q, _) = base.phi_forward(&p).unwrap();
        let (q2, _) = moved.phi_forward(&(&p + &shift)).unwrap();
        assert!((q2 - (q + shift)).norm() < 1e-9);
    }

    #[test]
    fn orbit_of_zero_hamiltonian_is_constant() {
        let sp = SymplecticStructure::standard(1);
        let o = orbit(&sp, &HamiltonianSpec::zero(), 0.01, &v(&[1.0, 2.0]), 50, &cfg()).unwrap();
        assert_eq!(o.states.len(), 51);
        assert!(o.states.iter().all(|s| *s == v(&[1.0, 2.0])));
        assert!(o.truncated.is_none());
    }

    #[test]
    fn orbit_truncates_on_solver_failure() {
        let sp = SymplecticStructure::standard(1);
        // one Newton step cannot solve the nonlinear midpoint equation
        let h = HamiltonianSpec::builtin(Builtin::Pendulum);
        let o = orbit(&sp, &h, 1.0, &v(&[2.0, 0.0]), 10, &cfg().with_max_iter(1)).unwrap();
        let (step, err) = o.truncated.expect("expected truncation");
        assert_eq!(step, 0);
        assert!(matches!(err, Error::NoConvergence { .. } | Error::SingularJacobian { .. }));
        assert_eq!(o.states.len(), 1);
    }

    #[test]
    fn log_log_slope_of_power_law() {
        let samples: Vec<(f64, f64)> = log_spaced(1.0, 1e-3, 7).into_iter().map(|e| (e, 3.0 * e.powi(2))).collect();
        assert!((log_log_slope(&samples).unwrap() - 2.0).abs() < 1e-12);
        assert!(log_log_slope(&samples[..1]).is_err());
    }
}
