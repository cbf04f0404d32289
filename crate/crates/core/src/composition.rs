//! Composition of generating functions through the triangle-area functional.
//!
//! Given `H1`, `H2` and a point `x`, the composed generating function is the
//! critical value over `(x1, x2)` of
//!
//! ```text
//! F(x1, x2, x) = H1(x1) + H2(x2) + s · area(P, Q, R)
//! ```
//!
//! where `P, Q, R` is the triangle with side midpoints `x1 = mid(P, R)`,
//! `x2 = mid(R, Q)`, `x = mid(P, Q)` and `s` is [`AREA_ORIENTATION`]. At the
//! critical point `R = Φ_{H1}(P)`, `Q = Φ_{H2}(R)`, and `∇_x F` is the
//! gradient of the composed function.

use nalgebra::{DMatrix, DVector};

use crate::affine::{
    triangle_area, vertices_from_midpoints, GeneratingFunction, HamiltonianSpec, MidpointTriple, PhasePoint,
    SymplecticStructure,
};
use crate::error::{check_dim, Error, Result};
use crate::midpoint::{cayley_map_quadratic, genfun_of_linear_map, MidpointMap};
use crate::numerics::{fd_jacobian, solve_dense, solve_newton_with_jacobian, SolveReport, SolverConfig};

/// Sign in front of the triangle area. With side assignment
/// `x1 ↔ PR`, `x2 ↔ RQ`, `x ↔ PQ` and `area = ½ ω(Q − P, R − P)`, the value
/// `−1` is the one for which stationarity reproduces `Φ_{H2} ∘ Φ_{H1}`.
pub const AREA_ORIENTATION: f64 = -1.0;

/// Two converged roots further apart than this are reported as distinct.
pub const ROOT_SEPARATION: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct CompositionProblem<G1, G2> {
    pub space: SymplecticStructure,
    pub h1: G1,
    pub h2: G2,
    pub cfg: SolverConfig,
}

/// Critical value of the triangle functional and the midpoints attaining it.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedValue {
    pub value: f64,
    pub x1: PhasePoint,
    pub x2: PhasePoint,
}

impl<G1: GeneratingFunction, G2: GeneratingFunction> CompositionProblem<G1, G2> {
    pub fn new(space: SymplecticStructure, h1: G1, h2: G2, cfg: SolverConfig) -> Result<Self> {
        for d in [h1.dim(), h2.dim()].into_iter().flatten() {
            check_dim(space.dim(), d)?;
        }
        cfg.validate()?;
        Ok(CompositionProblem { space, h1, h2, cfg })
    }

    fn dim(&self) -> usize {
        self.space.dim()
    }

    /// `H1(x1) + H2(x2) + s · area(vertices_from_midpoints(m))`.
    pub fn triangle_functional(&self, m: &MidpointTriple) -> Result<f64> {
        let tri = vertices_from_midpoints(m);
        Ok(self.h1.value(&m.x1)? + self.h2.value(&m.x2)? + AREA_ORIENTATION * triangle_area(&self.space, &tri)?)
    }

    /// `(∇_{x1} F, ∇_{x2} F)` stacked.
    fn stationarity(&self, y: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
        let d = self.dim();
        let x1 = y.rows(0, d).into_owned();
        let x2 = y.rows(d, d).into_owned();
        let w = self.space.matrix();
        let s2 = 2.0 * AREA_ORIENTATION;
        let g1 = self.h1.gradient(&x1)? + (w.tr_mul(&x2) + w * x) * s2;
        let g2 = self.h2.gradient(&x2)? + (w.tr_mul(x) + w * &x1) * s2;
        Ok(stack(&g1, &g2))
    }

    fn stationarity_jacobian(&self, y: &DVector<f64>, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let d = self.dim();
        let x1 = y.rows(0, d).into_owned();
        let x2 = y.rows(d, d).into_owned();
        let (hess1, hess2) = match (self.h1.hessian(&x1)?, self.h2.hessian(&x2)?) {
            (Some(a), Some(b)) => (a, b),
            _ => return fd_jacobian(|z| self.stationarity(z, x), y, self.cfg.fd_step),
        };
        let w = self.space.matrix();
        let s2 = 2.0 * AREA_ORIENTATION;
        let mut jac = DMatrix::zeros(2 * d, 2 * d);
        jac.view_mut((0, 0), (d, d)).copy_from(&hess1);
        jac.view_mut((d, d), (d, d)).copy_from(&hess2);
        jac.view_mut((0, d), (d, d)).copy_from(&(w.transpose() * s2));
        jac.view_mut((d, 0), (d, d)).copy_from(&(w * s2));
        Ok(jac)
    }

    fn solve_from(&self, x: &DVector<f64>, start: DVector<f64>) -> Result<SolveReport> {
        solve_newton_with_jacobian(
            |y| self.stationarity(y, x),
            |y| self.stationarity_jacobian(y, x),
            &start,
            &self.cfg,
        )?
        .into_converged()
    }

    /// Critical point of the triangle functional in `(x1, x2)` for fixed `x`.
    ///
    /// Newton runs from `(x, x)` and from the first-order predictor
    /// `(x − u2(x)/2, x + u1(x)/2)`; distinct converged roots are reported as
    /// [`Error::MultipleRootSuspected`].
    pub fn compose_genfun_numeric(&self, x: &PhasePoint) -> Result<ComposedValue> {
        check_dim(self.dim(), x.len())?;
        let d = self.dim();
        let trivial = stack(x, x);
        let u1 = self.space.sharp(&self.h1.gradient(x)?);
        let u2 = self.space.sharp(&self.h2.gradient(x)?);
        let predictor = stack(&(x - u2 * 0.5), &(x + u1 * 0.5));

        let first = self.solve_from(x, trivial);
        let second = self.solve_from(x, predictor);
        let root = match (first, second) {
            (Ok(a), Ok(b)) => {
                let separation = (&a.root - &b.root).amax();
                if separation > ROOT_SEPARATION {
                    return Err(Error::MultipleRootSuspected { separation });
                }
                a.root
            }
            (Ok(a), Err(_)) => a.root,
            (Err(_), Ok(b)) => b.root,
            (Err(e), Err(_)) => return Err(e),
        };
        let m = MidpointTriple {
            x1: root.rows(0, d).into_owned(),
            x2: root.rows(d, d).into_owned(),
            x: x.clone(),
        };
        Ok(ComposedValue {
            value: self.triangle_functional(&m)?,
            x1: m.x1,
            x2: m.x2,
        })
    }

    /// `∇_x F` at a critical point; by the envelope theorem this is the
    /// gradient of the composed generating function.
    pub fn envelope_gradient(&self, c: &ComposedValue) -> DVector<f64> {
        let w = self.space.matrix();
        (w * &c.x2 + w.tr_mul(&c.x1)) * (2.0 * AREA_ORIENTATION)
    }

    /// Hessian of the composed generating function by implicit
    /// differentiation of the stationarity system.
    pub fn composed_hessian(&self, x: &PhasePoint, c: &ComposedValue) -> Result<DMatrix<f64>> {
        let d = self.dim();
        let y = stack(&c.x1, &c.x2);
        let jac = self.stationarity_jacobian(&y, x)?;
        let w = self.space.matrix();
        let s2 = 2.0 * AREA_ORIENTATION;
        let mut dg_dx = DMatrix::zeros(2 * d, d);
        dg_dx.view_mut((0, 0), (d, d)).copy_from(&(w * s2));
        dg_dx.view_mut((d, 0), (d, d)).copy_from(&(w.transpose() * s2));
        let mut dy_dx = DMatrix::zeros(2 * d, d);
        for j in 0..d {
            let col = solve_dense(&jac, &(-dg_dx.column(j).into_owned()))
                .ok_or(Error::SingularJacobian { iteration: 0 })?;
            dy_dx.set_column(j, &col);
        }
        let dx1 = dy_dx.rows(0, d);
        let dx2 = dy_dx.rows(d, d);
        let hess = (w * dx2 + w.transpose() * dx1) * s2;
        Ok((&hess + hess.transpose()) * 0.5)
    }

    /// The composed generating function as a [`GeneratingFunction`].
    pub fn composed(&self) -> ComposedGenfun<'_, G1, G2> {
        ComposedGenfun { problem: self }
    }

    /// `‖Φ_H(P) − Φ_{H2}(Φ_{H1}(P))‖` for the composed `H` at one point.
    pub fn composition_residual(&self, p: &PhasePoint) -> Result<f64> {
        let m1 = MidpointMap::new(self.space.clone(), &self.h1, self.cfg)?;
        let m2 = MidpointMap::new(self.space.clone(), &self.h2, self.cfg)?;
        let (r, _) = m1.phi_forward(p)?;
        let (q, _) = m2.phi_forward(&r)?;
        let composed = MidpointMap::new(self.space.clone(), self.composed(), self.cfg)?;
        let (q_h, _) = composed.phi_forward(p)?;
        Ok((q_h - q).norm())
    }

    /// Max of [`composition_residual`](Self::composition_residual) over the samples.
    pub fn verify_composition(&self, samples: &[PhasePoint]) -> Result<f64> {
        samples
            .iter()
            .map(|p| self.composition_residual(p))
            .try_fold(0.0f64, |acc, r| Ok(acc.max(r?)))
    }
}

/// The composed generating function of a [`CompositionProblem`], evaluated
/// pointwise by solving for the critical midpoints.
#[derive(Debug, Clone, Copy)]
pub struct ComposedGenfun<'a, G1, G2> {
    problem: &'a CompositionProblem<G1, G2>,
}

impl<G1: GeneratingFunction, G2: GeneratingFunction> GeneratingFunction for ComposedGenfun<'_, G1, G2> {
    fn dim(&self) -> Option<usize> {
        Some(self.problem.dim())
    }

    fn value(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.problem.compose_genfun_numeric(x)?.value)
    }

    fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let c = self.problem.compose_genfun_numeric(x)?;
        Ok(self.problem.envelope_gradient(&c))
    }

    fn hessian(&self, x: &DVector<f64>) -> Result<Option<DMatrix<f64>>> {
        let c = self.problem.compose_genfun_numeric(x)?;
        Ok(Some(self.problem.composed_hessian(x, &c)?))
    }
}

/// Closed-form composition of centered quadratics: the quadratic generating
/// function of `cayley(S2) · cayley(S1)`.
pub fn compose_quadratic_closed(
    space: &SymplecticStructure,
    s1: &DMatrix<f64>,
    s2: &DMatrix<f64>,
) -> Result<HamiltonianSpec> {
    let phi = cayley_map_quadratic(space, s2)? * cayley_map_quadratic(space, s1)?;
    HamiltonianSpec::centered_quadratic(genfun_of_linear_map(space, &phi)?)
}

fn stack(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affine::{Builtin, Monomial};
    use crate::numerics::fd_gradient;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn cfg() -> SolverConfig {
        SolverConfig::default().with_fd_step(1e-5)
    }

    fn harmonic() -> HamiltonianSpec {
        HamiltonianSpec::centered_quadratic(DMatrix::identity(2, 2)).unwrap()
    }

    fn problem(h1: HamiltonianSpec, h2: HamiltonianSpec) -> CompositionProblem<HamiltonianSpec, HamiltonianSpec> {
        CompositionProblem::new(SymplecticStructure::standard(1), h1, h2, cfg()).unwrap()
    }

    #[test]
    fn functional_examples() {
        let zero = problem(HamiltonianSpec::zero(), HamiltonianSpec::zero());
        let z = v(&[0.2, -0.7]);
        let m = MidpointTriple { x1: z.clone(), x2: z.clone(), x: z.clone() };
        assert_eq!(zero.triangle_functional(&m).unwrap(), 0.0);

        // P = (−1, 1), R = (1, −1), Q = (1, 1): ½ ω((2, 0), (2, −2)) = −2
        let m = MidpointTriple {
            x1: v(&[0.0, 0.0]),
            x2: v(&[1.0, 0.0]),
            x: v(&[0.0, 1.0]),
        };
        assert_eq!(zero.triangle_functional(&m).unwrap(), AREA_ORIENTATION * -2.0);

        let pend = HamiltonianSpec::builtin(Builtin::Pendulum);
        let p = problem(harmonic(), pend.clone());
        let m = MidpointTriple { x1: z.clone(), x2: z.clone(), x: z.clone() };
        assert_eq!(p.triangle_functional(&m).unwrap(), harmonic().eval(&z) + pend.eval(&z));
    }

    #[test]
    fn area_gradients_match_finite_differences() {
        let p = problem(HamiltonianSpec::zero(), HamiltonianSpec::zero());
        let y = v(&[0.3, -0.2, 0.7, 0.1]);
        let x = v(&[-0.4, 0.5]);
        let f = |y: &DVector<f64>| {
            p.triangle_functional(&MidpointTriple {
                x1: y.rows(0, 2).into_owned(),
                x2: y.rows(2, 2).into_owned(),
                x: x.clone(),
            })
        };
        let g = fd_gradient(f, &y, 1e-5).unwrap();
        assert!((g - p.stationarity(&y, &x).unwrap()).amax() < 1e-9);
        let c = ComposedValue { value: 0.0, x1: y.rows(0, 2).into_owned(), x2: y.rows(2, 2).into_owned() };
        let gx = fd_gradient(
            |x: &DVector<f64>| {
                p.triangle_functional(&MidpointTriple { x1: c.x1.clone(), x2: c.x2.clone(), x: x.clone() })
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!((gx - p.envelope_gradient(&c)).amax() < 1e-9);
    }

    #[test]
    fn identity_composed_with_identity() {
        let p = problem(HamiltonianSpec::zero(), HamiltonianSpec::zero());
        let x = v(&[0.5, 0.25]);
        let c = p.compose_genfun_numeric(&x).unwrap();
        assert_eq!(c.value, 0.0);
        assert_eq!(c.x1, x);
        assert_eq!(c.x2, x);
        assert_eq!(p.verify_composition(&[x.clone(), v(&[0.0, -1.0])]).unwrap(), 0.0);
    }

    #[test]
    fn composing_with_identity_returns_the_other_factor() {
        let h = HamiltonianSpec::builtin(Builtin::Pendulum).scaled(0.4);
        let x = v(&[0.3, -0.2]);
        let p = problem(h.clone(), HamiltonianSpec::zero());
        let c = p.compose_genfun_numeric(&x).unwrap();
        assert!((c.value - h.eval(&x)).abs() < 1e-12);
        let g = p.envelope_gradient(&c);
        assert!((g - h.grad(&x)).amax() < 1e-12);
        let hs = p.composed_hessian(&x, &c).unwrap();
        assert!((hs - h.hess(&x)).amax() < 1e-12);

        let p = problem(HamiltonianSpec::zero(), h.clone());
        let c = p.compose_genfun_numeric(&x).unwrap();
        assert!((c.value - h.eval(&x)).abs() < 1e-12);
    }

    #[test]
    fn harmonic_pair_at_origin() {
        let p = problem(harmonic(), harmonic());
        let c = p.compose_genfun_numeric(&v(&[0.0, 0.0])).unwrap();
        assert!(c.value.abs() < 1e-15);
        assert!(c.x1.amax() < 1e-15 && c.x2.amax() < 1e-15);
    }

    #[test]
    fn closed_form_examples() {
        let sp = SymplecticStructure::standard(1);
        let s2 = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, -0.2]);
        let h = compose_quadratic_closed(&sp, &DMatrix::zeros(2, 2), &s2).unwrap();
        let HamiltonianSpec::Quadratic { s, b, c } = h else { panic!() };
        assert!((s - &s2).amax() < 1e-14);
        assert_eq!(b, DVector::zeros(2));
        assert_eq!(c, 0.0);

        // tan(2 arctan(1/2)) = 4/3, so S = (8/3) I
        let HamiltonianSpec::Quadratic { s, .. } =
            compose_quadratic_closed(&sp, &DMatrix::identity(2, 2), &DMatrix::identity(2, 2)).unwrap()
        else {
            panic!()
        };
        assert!((s - DMatrix::identity(2, 2) * (8.0 / 3.0)).amax() < 1e-14);

        let HamiltonianSpec::Quadratic { s, .. } = compose_quadratic_closed(&sp, &s2, &(-&s2)).unwrap() else {
            panic!()
        };
        assert!(s.amax() < 1e-15);
    }

    #[test]
    fn numeric_matches_closed_form_on_quadratics() {
        let sp = SymplecticStructure::standard(1);
        let s1 = DMatrix::from_row_slice(2, 2, &[0.4, -0.1, -0.1, 0.25]);
        let s2 = DMatrix::from_row_slice(2, 2, &[-0.2, 0.3, 0.3, 0.1]);
        let closed = compose_quadratic_closed(&sp, &s1, &s2).unwrap();
        let p = problem(
            HamiltonianSpec::centered_quadratic(s1).unwrap(),
            HamiltonianSpec::centered_quadratic(s2).unwrap(),
        );
        for x in [v(&[0.3, 0.1]), v(&[-0.8, 0.5]), v(&[0.0, 0.9])] {
            let c = p.compose_genfun_numeric(&x).unwrap();
            assert!((c.value - closed.eval(&x)).abs() < 1e-12);
            assert!((p.envelope_gradient(&c) - closed.grad(&x)).amax() < 1e-12);
            assert!((p.composed_hessian(&x, &c).unwrap() - closed.hess(&x)).amax() < 1e-12);
        }
        let samples = [v(&[0.3, 0.1]), v(&[-0.8, 0.5])];
        assert!(p.verify_composition(&samples).unwrap() <= 1e-12);
    }

    #[test]
    fn critical_point_is_the_composed_orbit() {
        let h1 = HamiltonianSpec::builtin(Builtin::Pendulum).scaled(0.3);
        let h2 = HamiltonianSpec::polynomial(vec![
            Monomial { exp: vec![1, 2], coef: 0.2 },
            Monomial { exp: vec![3, 0], coef: -0.1 },
        ])
        .unwrap();
        let p = problem(h1.clone(), h2.clone());
        let x = v(&[0.2, 0.4]);
        let c = p.compose_genfun_numeric(&x).unwrap();
        let tri = vertices_from_midpoints(&MidpointTriple { x1: c.x1.clone(), x2: c.x2.clone(), x: x.clone() });
        let (r, mid1) = MidpointMap::new(p.space.clone(), &h1, cfg()).unwrap().phi_forward(&tri.p).unwrap();
        let (q, mid2) = MidpointMap::new(p.space.clone(), &h2, cfg()).unwrap().phi_forward(&r).unwrap();
        let tol = 10.0 * cfg().tol;
        assert!((r - &tri.r).amax() <= tol);
        assert!((q - &tri.q).amax() <= tol);
        assert!((mid1 - &c.x1).amax() <= tol);
        assert!((mid2 - &c.x2).amax() <= tol);
    }

    #[test]
    fn envelope_gradient_matches_finite_differences_of_value() {
        let h1 = HamiltonianSpec::builtin(Builtin::Pendulum).scaled(0.5);
        let h2 = HamiltonianSpec::builtin(Builtin::Pendulum).scaled(0.1);
        let p = problem(h1, h2);
        let composed = p.composed();
        let x = v(&[0.6, -0.3]);
        let fd = fd_gradient(|y| composed.value(y), &x, 1e-5).unwrap();
        assert!((fd - composed.gradient(&x).unwrap()).amax() < 1e-6);
        let fd_h = fd_jacobian(|y| composed.gradient(y), &x, 1e-5).unwrap();
        assert!((fd_h - composed.hessian(&x).unwrap().unwrap()).amax() < 1e-6);
    }

    #[test]
    fn pendulum_after_scaled_pendulum() {
        let pend = HamiltonianSpec::builtin(Builtin::Pendulum);
        let p = problem(pend.clone(), pend.scaled(0.1));
        let samples = [v(&[0.3, 0.2]), v(&[-0.5, 0.4]), v(&[0.1, -0.8])];
        let r = p.verify_composition(&samples).unwrap();
        assert!(r <= 1e-6, "{r}");
    }

    #[test]
    fn near_singular_stationarity_is_typed() {
        // near a half-turn the stationarity system is close to singular;
        // errors must be typed rather than NaN
        let s = DMatrix::identity(2, 2) * 3.9;
        let p = problem(
            HamiltonianSpec::centered_quadratic(s.clone()).unwrap(),
            HamiltonianSpec::centered_quadratic(s).unwrap(),
        );
        match p.compose_genfun_numeric(&v(&[0.5, 0.5])) {
            Ok(c) => assert!(c.value.is_finite()),
            Err(e) => assert!(matches!(
                e,
                Error::MultipleRootSuspected { .. } | Error::NoConvergence { .. } | Error::SingularJacobian { .. }
            )),
        }
    }
}
