//! Moyal-product side of the composition rule: the triangle-area kernel, the
//! exact Gaussian integral for quadratic generating functions, and the
//! bidifferential star-product series on polynomial symbols.

use std::collections::BTreeMap;
use std::fmt::Debug;
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::{DMatrix, DVector};
use num_bigint::BigInt;
use num_complex::{Complex, Complex64};
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::affine::{triangle_area, vertices_from_midpoints, MidpointTriple, PhasePoint, SymplecticStructure};
use crate::composition::AREA_ORIENTATION;
use crate::error::{check_dim, Error, Result};
use crate::numerics::condition_number;

/// Phase forms with a Hessian condition estimate above this are degenerate.
pub const PHASE_CONDITION_LIMIT: f64 = 1e12;

/// Planck's constant `ħ > 0`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct PlanckParameter(f64);

impl PlanckParameter {
    pub fn new(hbar: f64) -> Result<Self> {
        if hbar > 0.0 && hbar.is_finite() {
            Ok(PlanckParameter(hbar))
        } else {
            Err(Error::InvalidSpec(format!("hbar must be positive, got {hbar}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// `exp(i · s · area(P, Q, R) / ħ)` for the triangle with the given side
/// midpoints.
pub fn kernel(space: &SymplecticStructure, m: &MidpointTriple, hbar: PlanckParameter) -> Result<Complex64> {
    let area = triangle_area(space, &vertices_from_midpoints(m))?;
    Ok(Complex64::from_polar(1.0, AREA_ORIENTATION * area / hbar.get()))
}

/// Stationary value and amplitude of
/// `∫ exp(i (H1(x1) + H2(x2) + s · area) / ħ) dx1 dx2` for centered
/// quadratics `Hk = ½ xᵀ Sk x`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianProduct {
    /// Critical value of the phase in `(x1, x2)`.
    pub phase: f64,
    /// `log` of the prefactor: `(d/2) log(2πħ) − ½ log|det M| + iπ sgn(M)/4`.
    pub log_amplitude: Complex64,
    /// Critical midpoints.
    pub x1: PhasePoint,
    pub x2: PhasePoint,
}

/// Evaluates the Gaussian integral exactly; for a quadratic phase the
/// stationary-phase value is the whole story.
pub fn gaussian_phase_product(
    space: &SymplecticStructure,
    s1: &DMatrix<f64>,
    s2: &DMatrix<f64>,
    x: &PhasePoint,
    hbar: PlanckParameter,
) -> Result<GaussianProduct> {
    let d = space.dim();
    for m in [s1, s2] {
        check_dim(d, m.nrows())?;
        check_dim(d, m.ncols())?;
    }
    check_dim(d, x.len())?;
    let w = space.matrix();
    let s = 2.0 * AREA_ORIENTATION;

    // phase(y) = ½ yᵀ M y + kᵀ y with y = (x1, x2)
    let mut m = DMatrix::zeros(2 * d, 2 * d);
    m.view_mut((0, 0), (d, d)).copy_from(s1);
    m.view_mut((d, d), (d, d)).copy_from(s2);
    m.view_mut((0, d), (d, d)).copy_from(&(w.transpose() * s));
    m.view_mut((d, 0), (d, d)).copy_from(&(w * s));
    let k = DVector::from_iterator(2 * d, (w * x * s).iter().chain((w.tr_mul(x) * s).iter()).copied());

    let condition = condition_number(&m);
    if condition > PHASE_CONDITION_LIMIT {
        return Err(Error::DegeneratePhase { condition });
    }
    let y = -m.clone().lu().solve(&k).ok_or(Error::DegeneratePhase { condition })?;
    let phase = 0.5 * k.dot(&y);

    let eig = m.clone().symmetric_eigen();
    let signature: i64 = eig.eigenvalues.iter().map(|l| if *l > 0.0 { 1 } else { -1 }).sum();
    let log_det: f64 = eig.eigenvalues.iter().map(|l| l.abs().ln()).sum();
    let dim = (2 * d) as f64;
    let log_amplitude = Complex64::new(
        0.5 * dim * (2.0 * std::f64::consts::PI * hbar.get()).ln() - 0.5 * log_det,
        std::f64::consts::FRAC_PI_4 * signature as f64,
    );
    Ok(GaussianProduct {
        phase,
        log_amplitude,
        x1: y.rows(0, d).into_owned(),
        x2: y.rows(d, d).into_owned(),
    })
}

/// Coefficient ring of polynomial symbols: complex numbers over either `f64`
/// or exact rationals.
pub trait Coefficient:
    Clone
    + PartialEq
    + Debug
    + Zero
    + One
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
{
    fn from_ratio(num: i64, den: i64) -> Self;
    fn imaginary_unit() -> Self;
}

pub type ExactCoefficient = Complex<BigRational>;

impl Coefficient for Complex64 {
    fn from_ratio(num: i64, den: i64) -> Self {
        Complex64::new(num as f64 / den as f64, 0.0)
    }
    fn imaginary_unit() -> Self {
        Complex64::i()
    }
}

impl Coefficient for ExactCoefficient {
    fn from_ratio(num: i64, den: i64) -> Self {
        Complex::new(BigRational::new(BigInt::from(num), BigInt::from(den)), BigRational::zero())
    }
    fn imaginary_unit() -> Self {
        Complex::new(BigRational::zero(), BigRational::one())
    }
}

/// Polynomial in the phase-space coordinates `(q_1..q_n, p_1..p_n)`, kept
/// in canonical form (no zero coefficients).
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialSymbol<C> {
    nvars: usize,
    terms: BTreeMap<Vec<u32>, C>,
}

impl<C: Coefficient> PolynomialSymbol<C> {
    pub fn zero(nvars: usize) -> Self {
        PolynomialSymbol {
            nvars,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(nvars: usize, c: C) -> Self {
        Self::from_terms(nvars, [(vec![0; nvars], c)]).expect("constant term has the right arity")
    }

    /// The coordinate function `x_index`.
    pub fn coordinate(nvars: usize, index: usize) -> Self {
        let mut exp = vec![0; nvars];
        exp[index] = 1;
        Self::from_terms(nvars, [(exp, C::one())]).expect("coordinate has the right arity")
    }

    pub fn from_terms(nvars: usize, terms: impl IntoIterator<Item = (Vec<u32>, C)>) -> Result<Self> {
        if nvars == 0 || !nvars.is_multiple_of(2) {
            return Err(Error::InvalidSpec("symbols need an even, positive number of variables".into()));
        }
        let mut out = Self::zero(nvars);
        for (exp, c) in terms {
            check_dim(nvars, exp.len())?;
            out.add_term(exp, c);
        }
        Ok(out)
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Vec<u32>, &C)> {
        self.terms.iter()
    }

    pub fn coefficient(&self, exp: &[u32]) -> C {
        self.terms.get(exp).cloned().unwrap_or_else(C::zero)
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Total degree; `None` for the zero symbol.
    pub fn degree(&self) -> Option<u32> {
        self.terms.keys().map(|e| e.iter().sum()).max()
    }

    fn add_term(&mut self, exp: Vec<u32>, c: C) {
        if c.is_zero() {
            return;
        }
        let sum = match self.terms.remove(&exp) {
            Some(prev) => prev + c,
            None => c,
        };
        if !sum.is_zero() {
            self.terms.insert(exp, sum);
        }
    }

    pub fn scale(&self, c: &C) -> Self {
        let mut out = Self::zero(self.nvars);
        for (e, v) in &self.terms {
            out.add_term(e.clone(), v.clone() * c.clone());
        }
        out
    }

    /// Partial derivative with multiplicities `orders[i]` in variable `i`.
    pub fn derivative(&self, orders: &[u32]) -> Self {
        let mut out = Self::zero(self.nvars);
        for (e, v) in &self.terms {
            if e.iter().zip(orders).any(|(ei, oi)| ei < oi) {
                continue;
            }
            let mut factor = 1i64;
            let mut exp = e.clone();
            for (ei, &oi) in exp.iter_mut().zip(orders) {
                for j in 0..oi {
                    factor *= (*ei - j) as i64;
                }
                *ei -= oi;
            }
            out.add_term(exp, v.clone() * C::from_ratio(factor, 1));
        }
        out
    }

    /// Poisson bracket `{f, g} = Σ ∂f/∂q_j ∂g/∂p_j − ∂f/∂p_j ∂g/∂q_j`.
    pub fn poisson_bracket(&self, other: &Self) -> Result<Self> {
        check_dim(self.nvars, other.nvars)?;
        let n = self.nvars / 2;
        let mut out = Self::zero(self.nvars);
        for j in 0..n {
            let dq = unit(self.nvars, j);
            let dp = unit(self.nvars, n + j);
            out = &out + &(&self.derivative(&dq) * &other.derivative(&dp));
            out = &out - &(&self.derivative(&dp) * &other.derivative(&dq));
        }
        Ok(out)
    }

    /// Evaluates at a point given as coefficients.
    pub fn eval(&self, point: &[C]) -> Result<C> {
        check_dim(self.nvars, point.len())?;
        let mut total = C::zero();
        for (e, v) in &self.terms {
            let mut term = v.clone();
            for (x, &k) in point.iter().zip(e) {
                for _ in 0..k {
                    term = term * x.clone();
                }
            }
            total = total + term;
        }
        Ok(total)
    }
}

fn unit(nvars: usize, index: usize) -> Vec<u32> {
    let mut e = vec![0; nvars];
    e[index] = 1;
    e
}

impl<C: Coefficient> Add for &PolynomialSymbol<C> {
    type Output = PolynomialSymbol<C>;
    fn add(self, rhs: Self) -> PolynomialSymbol<C> {
        assert_eq!(self.nvars, rhs.nvars, "symbol arity mismatch");
        let mut out = self.clone();
        for (e, v) in &rhs.terms {
            out.add_term(e.clone(), v.clone());
        }
        out
    }
}

impl<C: Coefficient> Sub for &PolynomialSymbol<C> {
    type Output = PolynomialSymbol<C>;
    fn sub(self, rhs: Self) -> PolynomialSymbol<C> {
        assert_eq!(self.nvars, rhs.nvars, "symbol arity mismatch");
        let mut out = self.clone();
        for (e, v) in &rhs.terms {
            out.add_term(e.clone(), -v.clone());
        }
        out
    }
}

impl<C: Coefficient> Mul for &PolynomialSymbol<C> {
    type Output = PolynomialSymbol<C>;
    fn mul(self, rhs: Self) -> PolynomialSymbol<C> {
        assert_eq!(self.nvars, rhs.nvars, "symbol arity mismatch");
        let mut out = PolynomialSymbol::zero(self.nvars);
        for (ea, va) in &self.terms {
            for (eb, vb) in &rhs.terms {
                let exp = ea.iter().zip(eb).map(|(a, b)| a + b).collect();
                out.add_term(exp, va.clone() * vb.clone());
            }
        }
        out
    }
}

impl PolynomialSymbol<Complex64> {
    /// Exact copy; every finite `f64` is a dyadic rational.
    pub fn to_exact(&self) -> Result<PolynomialSymbol<ExactCoefficient>> {
        let conv = |x: f64| BigRational::from_float(x).ok_or(Error::NonFiniteValue("symbol coefficient"));
        let mut terms = Vec::with_capacity(self.terms.len());
        for (e, v) in &self.terms {
            terms.push((e.clone(), Complex::new(conv(v.re)?, conv(v.im)?)));
        }
        PolynomialSymbol::from_terms(self.nvars, terms)
    }
}

impl PolynomialSymbol<ExactCoefficient> {
    pub fn to_float(&self) -> PolynomialSymbol<Complex64> {
        let conv = |x: &BigRational| x.to_f64().unwrap_or(f64::NAN);
        let terms = self
            .terms
            .iter()
            .map(|(e, v)| (e.clone(), Complex64::new(conv(&v.re), conv(&v.im))));
        PolynomialSymbol::from_terms(self.nvars, terms).expect("arity preserved")
    }
}

#[derive(Serialize, Deserialize)]
struct SymbolTerm {
    exp: Vec<u32>,
    re: f64,
    #[serde(default)]
    im: f64,
}

#[derive(Serialize, Deserialize)]
struct SymbolRepr {
    terms: Vec<SymbolTerm>,
}

impl Serialize for PolynomialSymbol<Complex64> {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        SymbolRepr {
            terms: self
                .terms
                .iter()
                .map(|(e, v)| SymbolTerm {
                    exp: e.clone(),
                    re: v.re,
                    im: v.im,
                })
                .collect(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for PolynomialSymbol<Complex64> {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let repr = SymbolRepr::deserialize(deserializer)?;
        let nvars = repr
            .terms
            .first()
            .map(|t| t.exp.len())
            .ok_or_else(|| serde::de::Error::custom("symbol needs at least one term to fix its arity"))?;
        PolynomialSymbol::from_terms(
            nvars,
            repr.terms.into_iter().map(|t| (t.exp, Complex64::new(t.re, t.im))),
        )
        .map_err(serde::de::Error::custom)
    }
}

/// A formal power series in `ħ` with symbol coefficients; `orders[k]` is the
/// coefficient of `ħ^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct HbarSeries<C> {
    nvars: usize,
    orders: Vec<PolynomialSymbol<C>>,
}

impl<C: Coefficient> HbarSeries<C> {
    pub fn from_symbol(f: PolynomialSymbol<C>) -> Self {
        HbarSeries {
            nvars: f.nvars,
            orders: vec![f],
        }
    }

    /// Coefficient of `ħ^k`.
    pub fn order(&self, k: usize) -> PolynomialSymbol<C> {
        self.orders.get(k).cloned().unwrap_or_else(|| PolynomialSymbol::zero(self.nvars))
    }

    /// Highest power of `ħ` with a nonzero coefficient.
    pub fn max_order(&self) -> Option<usize> {
        self.orders.iter().rposition(|o| !o.is_zero())
    }

    /// Substitutes a value for `ħ`.
    pub fn at(&self, hbar: &C) -> PolynomialSymbol<C> {
        let mut out = PolynomialSymbol::zero(self.nvars);
        let mut power = C::one();
        for o in &self.orders {
            out = &out + &o.scale(&power);
            power = power * hbar.clone();
        }
        out
    }

    fn add_at(&mut self, k: usize, f: &PolynomialSymbol<C>) {
        while self.orders.len() <= k {
            self.orders.push(PolynomialSymbol::zero(self.nvars));
        }
        self.orders[k] = &self.orders[k] + f;
    }

    fn trim(mut self) -> Self {
        while self.orders.len() > 1 && self.orders.last().is_some_and(|o| o.is_zero()) {
            self.orders.pop();
        }
        self
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (k, o) in other.orders.iter().enumerate() {
            out.add_at(k, &o.scale(&-C::one()));
        }
        out.trim()
    }

    /// Star product of series, truncated after `ħ^order`.
    pub fn star(&self, other: &Self, order: usize) -> Result<Self> {
        check_dim(self.nvars, other.nvars)?;
        let mut out = HbarSeries::from_symbol(PolynomialSymbol::zero(self.nvars));
        for (a, fa) in self.orders.iter().enumerate() {
            for (b, gb) in other.orders.iter().enumerate() {
                if a + b > order {
                    continue;
                }
                let partial = star_product(fa, gb, order - a - b)?;
                for (k, o) in partial.orders.iter().enumerate() {
                    out.add_at(a + b + k, o);
                }
            }
        }
        Ok(out.trim())
    }
}

/// `f ⋆ g = Σ_{k ≤ order} (1/k!) (iħ/2)^k Π^k(f, g)` with
/// `Π = Σ_j ∂_{q_j} ⊗ ∂_{p_j} − ∂_{p_j} ⊗ ∂_{q_j}`, as a series in `ħ`.
///
/// The series terminates: for `order ≥ min(deg f, deg g)` the result is exact.
pub fn star_product<C: Coefficient>(
    f: &PolynomialSymbol<C>,
    g: &PolynomialSymbol<C>,
    order: usize,
) -> Result<HbarSeries<C>> {
    check_dim(f.nvars, g.nvars)?;
    let nvars = f.nvars;
    let n = nvars / 2;
    let mut out = HbarSeries::from_symbol(PolynomialSymbol::zero(nvars));
    let half_i = C::imaginary_unit() * C::from_ratio(1, 2);

    // γ = (α, β): α counts ∂_q f ∂_p g pairs, β counts ∂_p f ∂_q g pairs.
    // Expanding Π^k multinomially, the 1/k! cancels against k!/(α! β!).
    for gamma in multi_indices(nvars, order as u32) {
        let (alpha, beta) = gamma.split_at(n);
        let k: u32 = gamma.iter().sum();
        let f_orders: Vec<u32> = alpha.iter().chain(beta).copied().collect();
        let g_orders: Vec<u32> = beta.iter().chain(alpha).copied().collect();
        let df = f.derivative(&f_orders);
        if df.is_zero() {
            continue;
        }
        let dg = g.derivative(&g_orders);
        if dg.is_zero() {
            continue;
        }
        let denom: i64 = gamma.iter().map(|&m| factorial(m)).product();
        let sign = if beta.iter().sum::<u32>() % 2 == 0 { 1 } else { -1 };
        let mut c = C::from_ratio(sign, denom);
        for _ in 0..k {
            c = c * half_i.clone();
        }
        out.add_at(k as usize, &(&df * &dg).scale(&c));
    }
    Ok(out.trim())
}

/// Star product with a numerical value substituted for `ħ`.
pub fn star_product_at<C: Coefficient>(
    f: &PolynomialSymbol<C>,
    g: &PolynomialSymbol<C>,
    hbar: &C,
    order: usize,
) -> Result<PolynomialSymbol<C>> {
    Ok(star_product(f, g, order)?.at(hbar))
}

fn factorial(m: u32) -> i64 {
    (1..=m as i64).product()
}

/// All multi-indices of length `len` with total at most `max_total`.
fn multi_indices(len: usize, max_total: u32) -> Vec<Vec<u32>> {
    fn rec(prefix: &mut Vec<u32>, len: usize, budget: u32, out: &mut Vec<Vec<u32>>) {
        if prefix.len() == len {
            out.push(prefix.clone());
            return;
        }
        for m in 0..=budget {
            prefix.push(m);
            rec(prefix, len, budget - m, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(len), len, max_total, &mut out);
    out
}
