//! Univariate AR, ARMA and seasonal ARMA baselines.
//!
//! Seasonal terms are additive: with period `s`,
//! `y_t = c + Σ φ_i y_(t-i) + Σ Φ_j y_(t-js) + Σ θ_i e_(t-i) + Σ Θ_j e_(t-js) + e_t`.
//! Coefficients minimize the conditional sum of squares (CSS), with
//! residuals before the first fitted step set to zero.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Ar,
    Arma,
    Sarima,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BaselineSpec {
    pub family: Family,
    pub p: usize,
    pub d: usize,
    pub q: usize,
    /// Seasonal period; 0 disables the seasonal terms.
    pub seasonal_period: usize,
    pub seasonal_p: usize,
    pub seasonal_q: usize,
}

impl BaselineSpec {
    pub fn ar(p: usize) -> Self {
        Self {
            family: Family::Ar,
            p,
            d: 0,
            q: 0,
            seasonal_period: 0,
            seasonal_p: 0,
            seasonal_q: 0,
        }
    }

    pub fn arma(p: usize, q: usize) -> Self {
        Self {
            family: Family::Arma,
            q,
            ..Self::ar(p)
        }
    }

    /// SARIMA(p,d,q) with one seasonal AR and one seasonal MA term at
    /// period `s` (none when `s == 0`).
    pub fn sarima(p: usize, d: usize, q: usize, s: usize) -> Self {
        let seasonal = usize::from(s > 0);
        Self {
            family: Family::Sarima,
            p,
            d,
            q,
            seasonal_period: s,
            seasonal_p: seasonal,
            seasonal_q: seasonal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let seasonal = self.seasonal_p + self.seasonal_q > 0;
        let ok = match self.family {
            Family::Ar => self.q == 0 && self.d == 0 && self.seasonal_period == 0 && !seasonal,
            Family::Arma => self.d == 0 && self.seasonal_period == 0 && !seasonal,
            Family::Sarima => !seasonal || self.seasonal_period >= 2,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("inconsistent baseline spec {self}")))
        }
    }

    fn ar_lags(&self) -> Vec<usize> {
        let s = self.seasonal_period;
        (1..=self.p).chain((1..=self.seasonal_p).map(|j| j * s)).collect()
    }

    fn ma_lags(&self) -> Vec<usize> {
        let s = self.seasonal_period;
        (1..=self.q).chain((1..=self.seasonal_q).map(|j| j * s)).collect()
    }

    /// Shortest history a forecast needs (after differencing is undone).
    pub fn min_history(&self) -> usize {
        let lags = self.ar_lags().into_iter().chain(self.ma_lags());
        lags.max().unwrap_or(0) + self.d
    }
}

impl fmt::Display for BaselineSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.family {
            Family::Ar => write!(f, "AR({})", self.p),
            Family::Arma => write!(f, "ARMA({},{})", self.p, self.q),
            Family::Sarima if self.seasonal_period > 0 => {
                write!(f, "SARIMA({},{},{})[{}]", self.p, self.d, self.q, self.seasonal_period)
            }
            Family::Sarima => write!(f, "SARIMA({},{},{})", self.p, self.d, self.q),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineFit {
    pub spec: BaselineSpec,
    pub intercept: f64,
    pub ar: Vec<f64>,
    pub ma: Vec<f64>,
    pub seasonal_ar: Vec<f64>,
    pub seasonal_ma: Vec<f64>,
    /// CSS divided by the number of fitted residuals.
    pub sigma2: f64,
    pub css: f64,
    pub converged: bool,
    /// All roots of the AR polynomial lie outside the unit circle.
    pub stationary: bool,
}

impl BaselineFit {
    fn params(&self) -> Params {
        Params {
            c: self.intercept,
            ar: self.ar.iter().chain(&self.seasonal_ar).copied().collect(),
            ma: self.ma.iter().chain(&self.seasonal_ma).copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Params {
    c: f64,
    ar: Vec<f64>,
    ma: Vec<f64>,
}

impl Params {
    fn to_vec(&self) -> Vec<f64> {
        std::iter::once(self.c)
            .chain(self.ar.iter().copied())
            .chain(self.ma.iter().copied())
            .collect()
    }

    fn from_slice(v: &[f64], n_ar: usize) -> Self {
        Self {
            c: v[0],
            ar: v[1..1 + n_ar].to_vec(),
            ma: v[1 + n_ar..].to_vec(),
        }
    }
}

/// Lag structure plus the index of the first fitted step.
struct Structure {
    ar_lags: Vec<usize>,
    ma_lags: Vec<usize>,
    start: usize,
}

impl Structure {
    fn new(spec: &BaselineSpec) -> Self {
        let ar_lags = spec.ar_lags();
        let start = ar_lags.iter().copied().max().unwrap_or(0);
        Self {
            ar_lags,
            ma_lags: spec.ma_lags(),
            start,
        }
    }

    fn n_params(&self) -> usize {
        1 + self.ar_lags.len() + self.ma_lags.len()
    }

    /// Conditional residuals `e_t` for every t (zero before `start`).
    fn residuals(&self, y: &[f64], p: &Params) -> Vec<f64> {
        let mut e = vec![0.0; y.len()];
        for t in self.start..y.len() {
            let mut fit = p.c;
            for (k, &l) in self.ar_lags.iter().enumerate() {
                fit += p.ar[k] * y[t - l];
            }
            for (k, &l) in self.ma_lags.iter().enumerate() {
                if t >= l {
                    fit += p.ma[k] * e[t - l];
                }
            }
            e[t] = y[t] - fit;
        }
        e
    }

    fn css(&self, y: &[f64], p: &Params) -> f64 {
        self.residuals(y, p)[self.start..].iter().map(|e| e * e).sum()
    }

    /// Residuals and their Jacobian with respect to `[c, ar.., ma..]`.
    fn jacobian(&self, y: &[f64], p: &Params) -> (Vec<f64>, DMatrix<f64>) {
        let e = self.residuals(y, p);
        let n = y.len();
        let k = self.n_params();
        let mut d = DMatrix::<f64>::zeros(n, k);
        for t in self.start..n {
            let mut row = vec![0.0; k];
            row[0] = -1.0;
            for (i, &l) in self.ar_lags.iter().enumerate() {
                row[1 + i] = -y[t - l];
            }
            let off = 1 + self.ar_lags.len();
            for (i, &l) in self.ma_lags.iter().enumerate() {
                if t >= l {
                    row[off + i] -= e[t - l];
                }
            }
            for (i, &l) in self.ma_lags.iter().enumerate() {
                if t >= l {
                    for j in 0..k {
                        row[j] -= p.ma[i] * d[(t - l, j)];
                    }
                }
            }
            for j in 0..k {
                d[(t, j)] = row[j];
            }
        }
        let rows = n - self.start;
        (e[self.start..].to_vec(), d.rows(self.start, rows).into_owned())
    }
}

/// Least squares with an intercept in column 0. Regressors without
/// variation get coefficient zero.
fn ols_with_intercept(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let (n, k) = x.shape();
    let mut beta = DVector::zeros(k);
    if n == 0 {
        return beta;
    }
    let y_mean = y.mean();
    let mut keep = Vec::new();
    let mut means = Vec::new();
    for j in 1..k {
        let col = x.column(j);
        let m = col.mean();
        let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>();
        if var > 1e-12 * (1.0 + m * m) * n as f64 {
            keep.push(j);
            means.push(m);
        }
    }
    if !keep.is_empty() {
        let xc = DMatrix::from_fn(n, keep.len(), |i, j| x[(i, keep[j])] - means[j]);
        let yc = y.map(|v| v - y_mean);
        let svd = xc.svd(true, true);
        let tol = 1e-12 * svd.singular_values.max().max(1.0);
        if let Ok(b) = svd.solve(&yc, tol) {
            for (j, &col) in keep.iter().enumerate() {
                beta[col] = b[j];
            }
        }
    }
    beta[0] = y_mean - keep.iter().zip(&means).map(|(&j, m)| beta[j] * m).sum::<f64>();
    beta
}

/// Regress `y_t` on an intercept, AR lags and (optionally) lagged proxy
/// residuals, for `t` in `from..n`.
fn lag_regression(y: &[f64], ar_lags: &[usize], ma: Option<(&[usize], &[f64])>, from: usize) -> Vec<f64> {
    let n = y.len();
    let ma_lags = ma.map_or(&[][..], |m| m.0);
    let k = 1 + ar_lags.len() + ma_lags.len();
    let rows = n.saturating_sub(from);
    let x = DMatrix::from_fn(rows, k, |i, j| {
        let t = from + i;
        if j == 0 {
            1.0
        } else if j <= ar_lags.len() {
            y[t - ar_lags[j - 1]]
        } else {
            let (lags, e) = ma.expect("MA columns requested");
            e[t - lags[j - 1 - ar_lags.len()]]
        }
    });
    let yv = DVector::from_iterator(rows, y[from..].iter().copied());
    ols_with_intercept(&x, &yv).iter().copied().collect()
}

/// Least-squares AR coefficients with every MA coefficient zero.
fn ar_start(y: &[f64], st: &Structure) -> Params {
    let mut v = lag_regression(y, &st.ar_lags, None, st.start);
    v.extend(std::iter::repeat_n(0.0, st.ma_lags.len()));
    Params::from_slice(&v, st.ar_lags.len())
}

/// Hannan-Rissanen start: a long autoregression supplies proxy residuals,
/// then the ARMA regression is solved by least squares. Falls back to zero
/// MA coefficients when the series is too short for the long AR.
fn hannan_rissanen(y: &[f64], st: &Structure) -> Params {
    let n = y.len();
    let n_ar = st.ar_lags.len();
    let fallback = || ar_start(y, st);
    if st.ma_lags.is_empty() {
        return fallback();
    }
    let max_ma = st.ma_lags.iter().copied().max().unwrap_or(0);
    let m = (st.start.max(max_ma.min(n / 4)) + 1).min(n / 3);
    if m == 0 {
        return fallback();
    }
    let long_lags: Vec<usize> = (1..=m).collect();
    let long = lag_regression(y, &long_lags, None, m);
    let long_p = Params::from_slice(&long, m);
    let long_st = Structure {
        ar_lags: long_lags,
        ma_lags: Vec::new(),
        start: m,
    };
    let proxy = long_st.residuals(y, &long_p);
    let from = st.start.max(m + max_ma);
    if n <= from + st.n_params() + 1 {
        return fallback();
    }
    let v = lag_regression(y, &st.ar_lags, Some((&st.ma_lags, &proxy)), from);
    Params::from_slice(&v, n_ar)
}

const MAX_LM_ITERATIONS: usize = 200;

/// Levenberg-Marquardt descent on the CSS; only accepts decreasing steps.
fn css_descent(y: &[f64], st: &Structure, init: Params) -> (Params, f64, bool) {
    let n_ar = st.ar_lags.len();
    let mut best = init;
    let mut best_css = st.css(y, &best);
    if st.ma_lags.is_empty() {
        // No MA terms: the regression solution is already the minimizer.
        return (best, best_css, true);
    }
    if !best_css.is_finite() {
        best.ma.iter_mut().for_each(|m| *m = 0.0);
        best_css = st.css(y, &best);
    }
    let mut mu = 1e-3;
    for _ in 0..MAX_LM_ITERATIONS {
        let (e, j) = st.jacobian(y, &best);
        let jtj = j.transpose() * &j;
        let g = j.transpose() * DVector::from_vec(e);
        if g.amax() < 1e-12 {
            return (best, best_css, true);
        }
        let mut improved = false;
        while mu < 1e12 {
            let mut a = jtj.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += mu * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-&g))) else {
                mu *= 10.0;
                continue;
            };
            let cand: Vec<f64> = best.to_vec().iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let cand = Params::from_slice(&cand, n_ar);
            let css = st.css(y, &cand);
            if css.is_finite() && css < best_css {
                let rel = (best_css - css) / best_css.max(1e-300);
                best = cand;
                best_css = css;
                mu = (mu / 10.0).max(1e-12);
                improved = true;
                if rel < 1e-12 {
                    return (best, best_css, true);
                }
                break;
            }
            mu *= 10.0;
        }
        if !improved {
            // No descent direction left at machine precision.
            return (best, best_css, true);
        }
    }
    (best, best_css, false)
}

/// Step-down (Schur-Cohn) test: the AR polynomial is stable iff every
/// reflection coefficient has modulus below one.
fn is_stationary(ar_lags: &[usize], coefs: &[f64]) -> bool {
    let order = ar_lags.iter().copied().max().unwrap_or(0);
    let mut phi = vec![0.0; order];
    for (&l, &c) in ar_lags.iter().zip(coefs) {
        phi[l - 1] += c;
    }
    while let Some(&kappa) = phi.last() {
        if !(kappa.abs() < 1.0) {
            return false;
        }
        let k = phi.len();
        let denom = 1.0 - kappa * kappa;
        phi = (0..k - 1).map(|j| (phi[j] + kappa * phi[k - 2 - j]) / denom).collect();
    }
    true
}

fn difference(y: &[f64], d: usize) -> Vec<f64> {
    let mut out = y.to_vec();
    for _ in 0..d {
        out = out.windows(2).map(|w| w[1] - w[0]).collect();
    }
    out
}

fn check_finite(series: &[f64]) -> Result<()> {
    if let Some(i) = series.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("series value at step {i}")));
    }
    Ok(())
}

fn fit_spec(series: &[f64], spec: BaselineSpec) -> Result<BaselineFit> {
    spec.validate()?;
    check_finite(series)?;
    let y = difference(series, spec.d);
    let st = Structure::new(&spec);
    // Pure AR fits are least squares and tolerate fewer rows than
    // parameters (minimum-norm solution); MA terms need room to iterate.
    let need = if st.ma_lags.is_empty() {
        st.start + 1
    } else {
        st.start + st.n_params()
    };
    if y.len() < need {
        return Err(Error::InsufficientData(format!(
            "{} points leave too few residuals for {spec}",
            series.len()
        )));
    }
    // A non-invertible Hannan-Rissanen estimate makes the residual
    // recursion explode; start from the pure AR fit when that is better.
    let hr = hannan_rissanen(&y, &st);
    let plain = ar_start(&y, &st);
    let hr_css = st.css(&y, &hr);
    let init = if hr_css.is_finite() && hr_css <= st.css(&y, &plain) {
        hr
    } else {
        plain
    };
    let (p, css, converged) = css_descent(&y, &st, init);
    let n_ar = spec.p;
    let n_ma = spec.q;
    Ok(BaselineFit {
        spec,
        intercept: p.c,
        stationary: is_stationary(&st.ar_lags, &p.ar),
        ar: p.ar[..n_ar].to_vec(),
        seasonal_ar: p.ar[n_ar..].to_vec(),
        ma: p.ma[..n_ma].to_vec(),
        seasonal_ma: p.ma[n_ma..].to_vec(),
        sigma2: css / (y.len() - st.start) as f64,
        css,
        converged,
    })
}

/// AR(p) by least squares with an intercept.
pub fn fit_ar(series: &[f64], p: usize) -> Result<BaselineFit> {
    if series.len() <= p + 2 {
        return Err(Error::InsufficientData(format!(
            "AR({p}) needs more than {} points, got {}",
            p + 2,
            series.len()
        )));
    }
    fit_spec(series, BaselineSpec::ar(p))
}

pub fn fit_arma(series: &[f64], p: usize, q: usize) -> Result<BaselineFit> {
    if series.len() <= p + q + 4 {
        return Err(Error::InsufficientData(format!(
            "ARMA({p},{q}) needs more than {} points, got {}",
            p + q + 4,
            series.len()
        )));
    }
    fit_spec(series, BaselineSpec::arma(p, q))
}

pub fn fit_sarima(series: &[f64], spec: BaselineSpec) -> Result<BaselineFit> {
    let s = spec.seasonal_period;
    if s > 0 && series.len() < 2 * s {
        return Err(Error::InsufficientData(format!(
            "{spec} needs at least {} points, got {}",
            2 * s,
            series.len()
        )));
    }
    if series.len() <= spec.p + spec.q + spec.d + 4 {
        return Err(Error::InsufficientData(format!(
            "{spec}: series of {} points",
            series.len()
        )));
    }
    fit_spec(series, spec)
}

/// Fit any spec through its family's entry point.
pub fn fit_baseline(series: &[f64], spec: BaselineSpec) -> Result<BaselineFit> {
    spec.validate()?;
    match spec.family {
        Family::Ar => fit_ar(series, spec.p),
        Family::Arma => fit_arma(series, spec.p, spec.q),
        Family::Sarima => fit_sarima(series, spec),
    }
}

/// Conditional-mean forecast of the value following `history`.
pub fn forecast_one_step(fit: &BaselineFit, history: &[f64]) -> Result<f64> {
    let need = fit.spec.min_history();
    if history.len() < need {
        return Err(Error::InsufficientData(format!(
            "{} needs {need} past values, got {}",
            fit.spec,
            history.len()
        )));
    }
    check_finite(history)?;
    let d = fit.spec.d;
    let y = difference(history, d);
    let st = Structure::new(&fit.spec);
    let p = fit.params();
    let e = st.residuals(&y, &p);
    let t = y.len();
    let mut f = p.c;
    for (k, &l) in st.ar_lags.iter().enumerate() {
        f += p.ar[k] * y[t - l];
    }
    for (k, &l) in st.ma_lags.iter().enumerate() {
        if t >= l {
            f += p.ma[k] * e[t - l];
        }
    }
    // Undo differencing: y_t = Δ^d y_t - Σ_k (-1)^k C(d,k) y_(t-k).
    let n = history.len();
    let mut binom = 1.0;
    for k in 1..=d {
        binom *= (d + 1 - k) as f64 / k as f64;
        let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
        f += sign * binom * history[n - k];
    }
    Ok(f)
}
