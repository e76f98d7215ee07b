//! Numerical checks of the InfoNCE gradient analysis: contribution curves
//! `f1`/`f2`, the closed-form gradient with respect to the anchor, the
//! normalization projector, and conformity-scaled gradient bands.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GRID_POINTS: usize = 2001;
pub const FIGURE_TAU: f64 = 0.4;

fn check_domain(x: f64, tau: f64) -> Result<()> {
    if !(-1.0..=1.0).contains(&x) {
        return Err(Error::Domain(format!("similarity {x} outside [-1, 1]")));
    }
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("tau must be > 0, got {tau}")));
    }
    Ok(())
}

/// Positive-pair contribution `√(1−p²)(exp(p/τ)−1)`.
pub fn f1(p: f64, tau: f64) -> Result<f64> {
    check_domain(p, tau)?;
    Ok((1.0 - p * p).sqrt() * ((p / tau).exp() - 1.0))
}

/// Negative-pair contribution `√(1−n²)·exp(n/τ)`.
pub fn f2(n: f64, tau: f64) -> Result<f64> {
    check_domain(n, tau)?;
    Ok((1.0 - n * n).sqrt() * (n / tau).exp())
}

pub fn grid(points: usize) -> Vec<f64> {
    (0..points).map(|i| -1.0 + 2.0 * i as f64 / (points - 1) as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionCurve {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub tau: f64,
}

impl ContributionCurve {
    pub fn f1(tau: f64) -> Result<Self> {
        let grid = grid(GRID_POINTS);
        let values = grid.iter().map(|&p| f1(p, tau)).collect::<Result<_>>()?;
        Ok(ContributionCurve { grid, values, tau })
    }

    pub fn f2(tau: f64) -> Result<Self> {
        let grid = grid(GRID_POINTS);
        let values = grid.iter().map(|&n| f2(n, tau)).collect::<Result<_>>()?;
        Ok(ContributionCurve { grid, values, tau })
    }

    /// Grid point of the maximum value (first one on ties).
    pub fn argmax(&self) -> f64 {
        let (i, _) = self
            .values
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        self.grid[i]
    }
}

fn unit(v: ArrayView1<f64>) -> Array1<f64> {
    &v / v.dot(&v).sqrt()
}

/// Which index set normalizes the softmax weights `P_vi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// All of `V`, as in the loss itself.
    FullCatalog,
    /// `V ∖ {v}`.
    ExcludePositive,
}

/// Single-pair loss `−log softmax(cos(h, x_i)/τ)[v]` over the rows of `items`.
pub fn single_pair_loss(h: ArrayView1<f64>, items: &Array2<f64>, positive: usize, tau: f64) -> f64 {
    let hb = unit(h);
    let s: Vec<f64> = items.outer_iter().map(|x| hb.dot(&unit(x)) / tau).collect();
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - s[positive]
}

/// Closed-form `∂L/∂h`: `(1/(τ‖h‖))·(c(v) + Σ_{v′≠v} c(v′))` with
/// `c(v) = −(1 − P_vv)(x̄_v − (h̄ᵀx̄_v) h̄)`, `c(v′) = P_vv′ (x̄_v′ − (h̄ᵀx̄_v′) h̄)`.
pub fn analytic_gradient(
    h: ArrayView1<f64>,
    items: &Array2<f64>,
    positive: usize,
    tau: f64,
    denominator: Denominator,
) -> Result<Array1<f64>> {
    let norm = h.dot(&h).sqrt();
    if norm == 0.0 {
        return Err(Error::Domain("anchor has zero norm".into()));
    }
    if items.nrows() < 2 || positive >= items.nrows() {
        return Err(Error::Domain("need at least two items and a valid positive".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("tau must be > 0, got {tau}")));
    }
    let hb = &h / norm;
    let xs: Vec<Array1<f64>> = items.outer_iter().map(unit).collect();
    let s: Vec<f64> = xs.iter().map(|x| hb.dot(x) / tau).collect();
    let included = |i: usize| denominator == Denominator::FullCatalog || i != positive;
    let m = s.iter().enumerate().filter(|(i, _)| included(*i)).map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = s.iter().enumerate().filter(|(i, _)| included(*i)).map(|(_, &v)| (v - m).exp()).sum();
    let p: Vec<f64> = s.iter().map(|&v| (v - m).exp() / z).collect();
    let tangent = |x: &Array1<f64>| x - &(&hb * hb.dot(x));
    let mut g = tangent(&xs[positive]) * -(1.0 - p[positive]);
    for (i, x) in xs.iter().enumerate() {
        if i != positive {
            g = g + tangent(x) * p[i];
        }
    }
    Ok(g / (tau * norm))
}

/// Central differences of [`single_pair_loss`] with respect to `h`.
pub fn numeric_gradient(h: ArrayView1<f64>, items: &Array2<f64>, positive: usize, tau: f64, step: f64) -> Array1<f64> {
    let mut g = Array1::zeros(h.len());
    let mut hp = h.to_owned();
    for k in 0..h.len() {
        let orig = hp[k];
        hp[k] = orig + step;
        let up = single_pair_loss(hp.view(), items, positive, tau);
        hp[k] = orig - step;
        let down = single_pair_loss(hp.view(), items, positive, tau);
        hp[k] = orig;
        g[k] = (up - down) / (2.0 * step);
    }
    g
}

pub fn relative_error(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let diff = (a - b).dot(&(a - b)).sqrt();
    let scale = a.dot(a).sqrt().max(b.dot(b).sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// `(1/‖h‖)(I − h̄h̄ᵀ)`.
pub fn projector(h: ArrayView1<f64>) -> Array2<f64> {
    let norm = h.dot(&h).sqrt();
    let hb = &h / norm;
    let d = h.len();
    Array2::from_shape_fn((d, d), |(i, j)| (f64::from(u8::from(i == j)) - hb[i] * hb[j]) / norm)
}

/// Central-difference Jacobian of `h ↦ h/‖h‖`.
pub fn normalization_jacobian(h: ArrayView1<f64>, step: f64) -> Array2<f64> {
    let d = h.len();
    let mut jac = Array2::zeros((d, d));
    let mut hp = h.to_owned();
    for k in 0..d {
        let orig = hp[k];
        hp[k] = orig + step;
        let up = unit(hp.view());
        hp[k] = orig - step;
        let down = unit(hp.view());
        hp[k] = orig;
        jac.column_mut(k).assign(&((up - down) / (2.0 * step)));
    }
    jac
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub instances: usize,
    pub max_relative_error: f64,
    /// Largest relative gap between the full-catalog and `V∖{v}` forms.
    pub max_variant_gap: f64,
    pub max_scaling_error: f64,
}

/// Closed form vs finite differences on random instances (`|V|` items in
/// `d` dimensions).
pub fn gradient_check(instances: usize, items: usize, dim: usize, tau: f64, seed: u64) -> Result<GradientCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = GradientCheck { instances, max_relative_error: 0.0, max_variant_gap: 0.0, max_scaling_error: 0.0 };
    for _ in 0..instances {
        let h = Array1::from_shape_simple_fn(dim, || normal.sample(&mut rng));
        let x = Array2::from_shape_simple_fn((items, dim), || normal.sample(&mut rng));
        let v = rng.random_range(0..items);
        let exact = analytic_gradient(h.view(), &x, v, tau, Denominator::FullCatalog)?;
        let appendix = analytic_gradient(h.view(), &x, v, tau, Denominator::ExcludePositive)?;
        let numeric = numeric_gradient(h.view(), &x, v, tau, 1e-6);
        out.max_relative_error = out.max_relative_error.max(relative_error(&exact, &numeric));
        out.max_variant_gap = out.max_variant_gap.max(relative_error(&exact, &appendix));
        let w: f64 = rng.random_range(0.05..1.0);
        // scaling the single-pair loss by ω scales its gradient by ω
        let scaled_numeric = numeric_gradient(h.view(), &x, v, tau, 1e-6) * w;
        out.max_scaling_error = out.max_scaling_error.max(relative_error(&(&exact * w), &scaled_numeric));
    }
    Ok(out)
}

/// Samples `ω ~ N(μ_c, σ)` clamped to `(0, 1]` and compares `ω·f` with `f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub samples: usize,
    pub mu_c: f64,
    pub sigma: f64,
    pub tau: f64,
    pub all_within_f1_band: bool,
    pub all_within_f2_band: bool,
    pub mean_scaled_f2_at_zero: f64,
    pub mean_tolerance: f64,
    pub mean_within_tolerance: bool,
    pub band_csv: String,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn sample_weights(samples: usize, mu_c: f64, sigma: f64, seed: u64) -> Result<Vec<f64>> {
    if samples < 1000 {
        return Err(Error::InvalidArgument("at least 1000 samples required".into()));
    }
    let normal = Normal::new(mu_c, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..samples).map(|_| normal.sample(&mut rng).clamp(f64::MIN_POSITIVE, 1.0)).collect())
}

pub fn scaling_distribution_check(weights: &[f64], mu_c: f64, sigma: f64, tau: f64) -> Result<ScalingReport> {
    if weights.len() < 1000 {
        return Err(Error::InvalidArgument("at least 1000 samples required".into()));
    }
    let mut sorted = weights.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (q05, q50, q95) = (quantile(&sorted, 0.05), quantile(&sorted, 0.5), quantile(&sorted, 0.95));
    let mut csv = String::from("x,f1,f2,half_f1,half_f2,f1_q05,f1_q50,f1_q95,f2_q05,f2_q50,f2_q95\n");
    let (mut ok1, mut ok2) = (true, true);
    for x in grid(GRID_POINTS) {
        let (a, b) = (f1(x, tau)?, f2(x, tau)?);
        if a > 0.0 {
            ok1 &= weights.iter().all(|&w| w * a > 0.0 && w * a <= a);
        }
        if b > 0.0 {
            ok2 &= weights.iter().all(|&w| w * b > 0.0 && w * b <= b);
        }
        writeln!(
            csv,
            "{x},{a},{b},{},{},{},{},{},{},{},{}",
            0.5 * a,
            0.5 * b,
            q05 * a,
            q50 * a,
            q95 * a,
            q05 * b,
            q50 * b,
            q95 * b
        )
        .unwrap();
    }
    let f20 = f2(0.0, tau)?;
    let mean = weights.iter().map(|w| w * f20).sum::<f64>() / weights.len() as f64;
    let tol = 3.0 * sigma / (weights.len() as f64).sqrt();
    Ok(ScalingReport {
        samples: weights.len(),
        mu_c,
        sigma,
        tau,
        all_within_f1_band: ok1,
        all_within_f2_band: ok2,
        mean_scaled_f2_at_zero: mean,
        mean_tolerance: tol,
        mean_within_tolerance: (mean - mu_c * f20).abs() <= tol,
        band_csv: csv,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheorySummary {
    pub tau: f64,
    pub checks: Vec<CheckLine>,
    pub f1_argmax: f64,
    pub f2_argmax: f64,
    pub gradient: GradientCheck,
    pub projector_max_error: f64,
    pub two_item_full_norm: f64,
    pub two_item_exclusive_norm: f64,
    pub two_item_exclusive_expected: f64,
}

impl TheorySummary {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn line(name: &str, passed: bool, detail: String) -> CheckLine {
    CheckLine { name: name.to_string(), passed, detail }
}

/// Worst entry-wise gap between the projector and the finite-difference
/// Jacobian over random anchors.
pub fn projector_check(instances: usize, dim: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let h = Array1::from_shape_simple_fn(dim, || normal.sample(&mut rng));
        let gap = (&projector(h.view()) - &normalization_jacobian(h.view(), 1e-6)).mapv(f64::abs);
        worst = worst.max(gap.iter().copied().fold(0.0, f64::max));
    }
    worst
}

/// Two-item catalog with identical item vectors. With the full-catalog
/// softmax the two contributions cancel; with `V∖{v}` only the negative
/// remains, with norm `√(1−p²)/(τ‖h‖)`.
pub fn two_item_case(h: ArrayView1<f64>, x: ArrayView1<f64>, tau: f64) -> Result<(f64, f64, f64)> {
    let items = ndarray::stack(ndarray::Axis(0), &[x, x]).expect("same length");
    let full = analytic_gradient(h, &items, 0, tau, Denominator::FullCatalog)?;
    let excl = analytic_gradient(h, &items, 0, tau, Denominator::ExcludePositive)?;
    let norm = h.dot(&h).sqrt();
    let p = unit(h).dot(&unit(x));
    let expected = (1.0 - p * p).max(0.0).sqrt() / (tau * norm);
    Ok((full.dot(&full).sqrt(), excl.dot(&excl).sqrt(), expected))
}

pub fn run_checks(tau: f64, seed: u64) -> Result<TheorySummary> {
    let mut checks = Vec::new();
    let endpoints = [f1(1.0, tau)?, f1(0.0, tau)?, f2(1.0, tau)?, f1(-1.0, tau)?, f2(-1.0, tau)?];
    checks.push(line(
        "endpoint_values",
        endpoints.iter().all(|&v| v == 0.0) && f2(0.0, tau)? == 1.0,
        format!("f1(1)={} f1(0)={} f2(1)={} f2(0)={}", endpoints[0], endpoints[1], endpoints[2], f2(0.0, tau)?),
    ));

    let gradient = gradient_check(20, 8, 6, tau, seed)?;
    checks.push(line(
        "closed_form_gradient",
        gradient.max_relative_error < 1e-5,
        format!("max relative error {:.3e} over {} instances", gradient.max_relative_error, gradient.instances),
    ));
    checks.push(line(
        "weighted_linearity",
        gradient.max_scaling_error < 1e-5,
        format!("max relative error {:.3e}", gradient.max_scaling_error),
    ));

    let projector_max_error = projector_check(20, 6, seed ^ 0x5a5a);
    checks.push(line(
        "projector_jacobian",
        projector_max_error < 1e-6,
        format!("max entry error {projector_max_error:.3e}"),
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let h = Array1::from_shape_simple_fn(6, || rng.random_range(-1.0..1.0));
    let x = Array1::from_shape_simple_fn(6, || rng.random_range(-1.0..1.0));
    let (full_norm, excl_norm, excl_expected) = two_item_case(h.view(), x.view(), tau)?;
    checks.push(line(
        "two_item_identical",
        full_norm < 1e-12 && (excl_norm - excl_expected).abs() < 1e-10 * excl_expected.max(1.0),
        format!("full {full_norm:.3e}, exclusive {excl_norm:.6} vs {excl_expected:.6}"),
    ));

    let c1 = ContributionCurve::f1(tau)?;
    let c2 = ContributionCurve::f2(tau)?;
    let f2_argmax = c2.argmax();
    checks.push(line(
        "f2_interior_maximum",
        f2_argmax > 0.85 && f2_argmax < 1.0,
        format!("grid argmax {f2_argmax:.4} (target interval (0.85, 1.0))"),
    ));

    Ok(TheorySummary {
        tau,
        checks,
        f1_argmax: c1.argmax(),
        f2_argmax,
        gradient,
        projector_max_error,
        two_item_full_norm: full_norm,
        two_item_exclusive_norm: excl_norm,
        two_item_exclusive_expected: excl_expected,
    })
}

/// Write `curves.csv`, `bands.csv` and `theory_summary.json` into `dir`.
pub fn write_outputs(dir: &Path, summary: &TheorySummary, scaling: &ScalingReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut curves = String::from("x,f1,f2\n");
    for x in grid(GRID_POINTS) {
        writeln!(curves, "{x},{},{}", f1(x, summary.tau)?, f2(x, summary.tau)?).unwrap();
    }
    let write = |name: &str, text: &str| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("curves.csv", &curves)?;
    write("bands.csv", &scaling.band_csv)?;
    let json = serde_json::json!({
        "passed": summary.passed(),
        "summary": summary,
        "scaling": {
            "samples": scaling.samples,
            "mu_c": scaling.mu_c,
            "sigma": scaling.sigma,
            "all_within_f1_band": scaling.all_within_f1_band,
            "all_within_f2_band": scaling.all_within_f2_band,
            "mean_scaled_f2_at_zero": scaling.mean_scaled_f2_at_zero,
            "mean_tolerance": scaling.mean_tolerance,
            "mean_within_tolerance": scaling.mean_within_tolerance,
        },
    });
    write("theory_summary.json", &serde_json::to_string_pretty(&json)?)
}
