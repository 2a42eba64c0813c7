//! Full-covariance bivariate Gaussian mixtures: EM fitting, BIC and bounded
//! model-order selection over seeded restarts.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::{derive_seed, tag};
use crate::stability::FeatureSet;

/// Relative BIC gap below which two orders are considered tied.
pub const BIC_TIE: f64 = 1e-6;

/// Default eigenvalue floor, in standardized feature units.
pub const DEFAULT_COV_FLOOR: f64 = 0.03;

/// Minimum points per component required to attempt a fit.
pub const MIN_POINTS_PER_COMPONENT: usize = 5;

/// Components tried as split targets when growing a fit by one order.
pub const SPLIT_CANDIDATES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: [f64; 2],
    /// Symmetric; stored in full for readability.
    pub covariance: [[f64; 2]; 2],
}

impl GaussianComponent {
    pub fn min_eigenvalue(&self) -> f64 {
        let [[a, b], [_, c]] = self.covariance;
        let half_tr = 0.5 * (a + c);
        let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        half_tr - disc
    }

    pub fn max_eigenvalue(&self) -> f64 {
        let [[a, b], [_, c]] = self.covariance;
        let half_tr = 0.5 * (a + c);
        let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        half_tr + disc
    }

    fn prepared(&self) -> Prepared {
        let [[a, b], [_, c]] = self.covariance;
        let det = a * c - b * b;
        Prepared {
            log_weight: self.weight.ln(),
            mean: self.mean,
            inv: [c / det, -b / det, a / det],
            log_norm: -(2.0 * PI).ln() - 0.5 * det.ln(),
        }
    }
}

/// Component with its inverse covariance `[p00, p01, p11]` cached.
#[derive(Debug, Clone, Copy)]
struct Prepared {
    log_weight: f64,
    mean: [f64; 2],
    inv: [f64; 3],
    log_norm: f64,
}

impl Prepared {
    #[inline]
    fn log_joint(&self, p: &[f64; 2]) -> f64 {
        let dx = p[0] - self.mean[0];
        let dy = p[1] - self.mean[1];
        let q = self.inv[0] * dx * dx + 2.0 * self.inv[1] * dx * dy + self.inv[2] * dy * dy;
        self.log_weight + self.log_norm - 0.5 * q
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    /// Relative log-likelihood improvement that ends iteration.
    pub tol: f64,
    pub max_iter: usize,
    /// Added to covariance diagonals after every M-step.
    pub reg: f64,
    /// Lower bound on covariance eigenvalues, enforced by clipping in the M-step.
    pub cov_floor: f64,
    /// Restarts per order.
    pub n_init: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            max_iter: 200,
            reg: 1e-6,
            cov_floor: DEFAULT_COV_FLOOR,
            n_init: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    pub components: Vec<GaussianComponent>,
    pub k: usize,
    pub log_likelihood: f64,
    pub bic: f64,
    pub n_iterations: usize,
    pub converged: bool,
    pub init_seed: u64,
    /// Log-likelihood evaluated before each M-step and once at the end.
    #[serde(skip)]
    pub ll_trace: Vec<f64>,
    /// Iterations (indices into `ll_trace`) after which a collapsed component was reseeded.
    #[serde(skip)]
    pub reseeds: Vec<usize>,
}

/// Number of free parameters of a `k`-component bivariate full-covariance mixture.
pub fn n_parameters(k: usize) -> usize {
    6 * k - 1
}

pub fn bic(log_likelihood: f64, k: usize, n: usize) -> f64 {
    -2.0 * log_likelihood + n_parameters(k) as f64 * (n as f64).ln()
}

/// Total log-likelihood of `points` under a mixture.
pub fn log_likelihood(components: &[GaussianComponent], points: &[[f64; 2]]) -> f64 {
    let prepared: Vec<Prepared> = components.iter().map(GaussianComponent::prepared).collect();
    let mut buf = vec![0.0; prepared.len()];
    points
        .iter()
        .map(|p| posterior_into(&prepared, p, &mut buf))
        .sum()
}

/// Posterior component probabilities, row-major `[n, k]`.
pub fn responsibilities(components: &[GaussianComponent], points: &[[f64; 2]]) -> Vec<f64> {
    let prepared: Vec<Prepared> = components.iter().map(GaussianComponent::prepared).collect();
    let k = prepared.len();
    let mut out = vec![0.0; points.len() * k];
    for (p, row) in points.iter().zip(out.chunks_mut(k)) {
        posterior_into(&prepared, p, row);
    }
    out
}

/// Fills `buf` with posterior component probabilities for `p` and returns
/// the log of its mixture density.
#[inline]
fn posterior_into(prepared: &[Prepared], p: &[f64; 2], buf: &mut [f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for (b, c) in buf.iter_mut().zip(prepared) {
        *b = c.log_joint(p);
        if *b > max {
            max = *b;
        }
    }
    let mut s = 0.0;
    for b in buf.iter_mut() {
        let d = *b - max;
        // exp(-60) is far below one ulp of the leading term
        *b = if d > -60.0 { d.exp() } else { 0.0 };
        s += *b;
    }
    let inv = 1.0 / s;
    for b in buf.iter_mut() {
        *b *= inv;
    }
    max + s.ln()
}

fn data_covariance(points: &[[f64; 2]]) -> ([f64; 2], [[f64; 2]; 2]) {
    let n = points.len() as f64;
    let mut mean = [0.0; 2];
    for p in points {
        mean[0] += p[0];
        mean[1] += p[1];
    }
    mean[0] /= n;
    mean[1] /= n;
    let mut c = [0.0; 3];
    for p in points {
        let dx = p[0] - mean[0];
        let dy = p[1] - mean[1];
        c[0] += dx * dx;
        c[1] += dx * dy;
        c[2] += dy * dy;
    }
    (mean, [[c[0] / n, c[1] / n], [c[1] / n, c[2] / n]])
}

fn sq_dist(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Greedy D²-weighted seeding: each new centre is the best of a few
/// candidates drawn proportionally to squared distance from the chosen set.
fn seed_means<R: Rng>(points: &[[f64; 2]], k: usize, rng: &mut R) -> Vec<[f64; 2]> {
    let n = points.len();
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut centres = Vec::with_capacity(k);
    centres.push(points[rng.gen_range(0..n)]);
    let mut closest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centres[0])).collect();
    let mut potential: f64 = closest.iter().sum();

    while centres.len() < k {
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let idx = if potential > 0.0 {
                let target = rng.gen::<f64>() * potential;
                let mut acc = 0.0;
                let mut chosen = n - 1;
                for (i, d) in closest.iter().enumerate() {
                    acc += d;
                    if acc >= target {
                        chosen = i;
                        break;
                    }
                }
                chosen
            } else {
                rng.gen_range(0..n)
            };
            let cand = points[idx];
            let updated: Vec<f64> = points
                .iter()
                .zip(&closest)
                .map(|(p, &d)| d.min(sq_dist(p, &cand)))
                .collect();
            let pot: f64 = updated.iter().sum();
            if best.as_ref().map_or(true, |(bp, _, _)| pot < *bp) {
                best = Some((pot, idx, updated));
            }
        }
        let (pot, idx, updated) = best.expect("at least one trial");
        centres.push(points[idx]);
        closest = updated;
        potential = pot;
    }
    centres
}

/// Clips the eigenvalues of a symmetric 2x2 matrix at `floor` (keeping
/// eigenvectors), then adds `reg` to the diagonal. The clipped matrix is the
/// constrained maximizer of the Gaussian likelihood for a given scatter, so
/// EM stays monotone.
fn conditioned(cov: [[f64; 2]; 2], floor: f64, reg: f64) -> [[f64; 2]; 2] {
    let [[a, b], [_, c]] = cov;
    let mut out = cov;
    if floor > 0.0 {
        let half_tr = 0.5 * (a + c);
        let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        let (l1, l2) = (half_tr + disc, half_tr - disc);
        if l2 < floor {
            if b.abs() <= 1e-300 {
                out = [[a.max(floor), 0.0], [0.0, c.max(floor)]];
            } else {
                // unit eigenvector of l1
                let (vx, vy) = if a >= c { (l1 - c, b) } else { (b, l1 - a) };
                let norm = (vx * vx + vy * vy).sqrt();
                let (ux, uy) = (vx / norm, vy / norm);
                let (m1, m2) = (l1.max(floor), l2.max(floor));
                // second eigenvector is (-uy, ux)
                let xy = (m1 - m2) * ux * uy;
                out = [[m1 * ux * ux + m2 * uy * uy, xy], [xy, m1 * uy * uy + m2 * ux * ux]];
            }
        }
    }
    out[0][0] += reg;
    out[1][1] += reg;
    out
}

/// Fits a `k`-component mixture by expectation-maximization from one seeded start.
pub fn fit_gmm_em(features: &FeatureSet, k: usize, init_seed: u64, config: &EmConfig) -> Result<GmmFit> {
    fit_points(&features.points, k, init_seed, config)
}

pub fn fit_points(points: &[[f64; 2]], k: usize, init_seed: u64, config: &EmConfig) -> Result<GmmFit> {
    let n = points.len();
    if k == 0 {
        return Err(Error::Config("mixture order must be at least 1".into()));
    }
    if n < MIN_POINTS_PER_COMPONENT * k {
        return Err(Error::InsufficientData(format!(
            "{n} points cannot support {k} components (need {})",
            MIN_POINTS_PER_COMPONENT * k
        )));
    }

    let mut rng = rand::SeedableRng::seed_from_u64(init_seed);
    let rng: &mut rand_chacha::ChaCha8Rng = &mut rng;
    let (_, data_cov) = data_covariance(points);
    let data_cov_reg = conditioned(data_cov, config.cov_floor, config.reg);
    let components: Vec<GaussianComponent> = seed_means(points, k, rng)
        .into_iter()
        .map(|mean| GaussianComponent {
            weight: 1.0 / k as f64,
            mean,
            covariance: data_cov_reg,
        })
        .collect();
    run_em(points, components, init_seed, config)
}

/// Runs EM from the given starting components.
pub fn fit_from(points: &[[f64; 2]], init: Vec<GaussianComponent>, config: &EmConfig) -> Result<GmmFit> {
    let k = init.len();
    if k == 0 {
        return Err(Error::Config("mixture order must be at least 1".into()));
    }
    if points.len() < MIN_POINTS_PER_COMPONENT * k {
        return Err(Error::InsufficientData(format!(
            "{} points cannot support {k} components (need {})",
            points.len(),
            MIN_POINTS_PER_COMPONENT * k
        )));
    }
    let init = init
        .into_iter()
        .map(|c| GaussianComponent {
            covariance: conditioned(c.covariance, config.cov_floor, 0.0),
            ..c
        })
        .collect();
    run_em(points, init, 0, config)
}

/// Indices of the `m` components carrying the most spread (weight times
/// largest eigenvalue), widest first.
pub fn widest_components(components: &[GaussianComponent], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..components.len()).collect();
    let spread = |i: usize| components[i].weight * components[i].max_eigenvalue();
    idx.sort_by(|&a, &b| spread(b).total_cmp(&spread(a)).then(a.cmp(&b)));
    idx.truncate(m);
    idx
}

/// Starting point for order `k + 1`: component `j` is halved along its
/// principal axis.
pub fn split_component(components: &[GaussianComponent], j: usize) -> Vec<GaussianComponent> {
    let mut out = components.to_vec();
    let c = components[j];
    let [[a, b], [_, d]] = c.covariance;
    let l1 = c.max_eigenvalue();
    let l2 = c.min_eigenvalue();
    let (vx, vy) = if b.abs() <= 1e-300 {
        if a >= d { (1.0, 0.0) } else { (0.0, 1.0) }
    } else if a >= d {
        (l1 - d, b)
    } else {
        (b, l1 - a)
    };
    let norm = (vx * vx + vy * vy).sqrt();
    let (ux, uy) = (vx / norm, vy / norm);
    let h = 0.5 * l1.sqrt();
    // principal variance of each half of a split Gaussian
    let m1 = 0.25 * l1;
    let xy = (m1 - l2) * ux * uy;
    let cov = [[m1 * ux * ux + l2 * uy * uy, xy], [xy, m1 * uy * uy + l2 * ux * ux]];
    for (slot, sign) in [(Some(j), -1.0), (None, 1.0)] {
        let half = GaussianComponent {
            weight: 0.5 * c.weight,
            mean: [c.mean[0] + sign * h * ux, c.mean[1] + sign * h * uy],
            covariance: cov,
        };
        match slot {
            Some(i) => out[i] = half,
            None => out.push(half),
        }
    }
    out
}

fn run_em(
    points: &[[f64; 2]],
    mut components: Vec<GaussianComponent>,
    init_seed: u64,
    config: &EmConfig,
) -> Result<GmmFit> {
    let n = points.len();
    let k = components.len();
    let (_, data_cov) = data_covariance(points);
    let data_cov_reg = conditioned(data_cov, config.cov_floor, config.reg);

    let mut resp = vec![0.0; n * k];
    let mut point_ll = vec![0.0; n];
    let mut ll_trace = Vec::new();
    let mut reseeds = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    loop {
        // E-step
        let prepared: Vec<Prepared> = components.iter().map(GaussianComponent::prepared).collect();
        let mut ll = 0.0;
        for ((p, row), pl) in points.iter().zip(resp.chunks_mut(k)).zip(point_ll.iter_mut()) {
            let lse = posterior_into(&prepared, p, row);
            *pl = lse;
            ll += lse;
        }
        if !ll.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite log-likelihood at iteration {iterations} (k = {k})"
            )));
        }
        if let Some(&prev) = ll_trace.last() {
            let prev: f64 = prev;
            if (ll - prev).abs() <= config.tol * prev.abs() && !reseeds.contains(&(ll_trace.len() - 1)) {
                ll_trace.push(ll);
                converged = true;
                break;
            }
        }
        ll_trace.push(ll);
        if iterations >= config.max_iter {
            break;
        }

        // M-step: zeroth, first and second raw moments in one pass
        let mut stats = vec![[0.0f64; 6]; k];
        for (p, row) in points.iter().zip(resp.chunks(k)) {
            let (x, y) = (p[0], p[1]);
            let (xx, xy, yy) = (x * x, x * y, y * y);
            for (s, &r) in stats.iter_mut().zip(row) {
                if r == 0.0 {
                    continue;
                }
                s[0] += r;
                s[1] += r * x;
                s[2] += r * y;
                s[3] += r * xx;
                s[4] += r * xy;
                s[5] += r * yy;
            }
        }
        let means: Vec<[f64; 2]> = stats
            .iter()
            .map(|s| if s[0] > 0.0 { [s[1] / s[0], s[2] / s[0]] } else { [0.0, 0.0] })
            .collect();
        for (s, m) in stats.iter_mut().zip(&means) {
            if s[0] > 0.0 {
                s[3] = (s[3] - s[0] * m[0] * m[0]).max(0.0);
                s[4] -= s[0] * m[0] * m[1];
                s[5] = (s[5] - s[0] * m[1] * m[1]).max(0.0);
            }
        }
        let mut reseeded = false;
        for (j, (c, s)) in components.iter_mut().zip(&stats).enumerate() {
            if s[0] < 1.0 {
                // collapsed: restart at the worst-explained point
                let worst = point_ll
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(j % n);
                c.mean = points[worst];
                c.covariance = data_cov_reg;
                c.weight = 1.0 / n as f64;
                point_ll[worst] = f64::INFINITY;
                reseeded = true;
            } else {
                c.weight = s[0] / n as f64;
                c.mean = means[j];
                let off = s[4] / s[0];
                c.covariance = conditioned(
                    [[s[3] / s[0], off], [off, s[5] / s[0]]],
                    config.cov_floor,
                    config.reg,
                );
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        for c in &mut components {
            c.weight /= total;
        }
        if reseeded {
            reseeds.push(ll_trace.len() - 1);
        }
        iterations += 1;
    }

    let log_likelihood = *ll_trace.last().expect("at least one E-step");
    Ok(GmmFit {
        components,
        k,
        log_likelihood,
        bic: bic(log_likelihood, k, n),
        n_iterations: iterations,
        converged,
        init_seed,
        ll_trace,
        reseeds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSelection {
    /// Best fit (highest log-likelihood over restarts) for every order that produced one.
    pub per_k_best: BTreeMap<usize, GmmFit>,
    pub selected_k: usize,
    pub k_max: usize,
    /// Orders for which every restart failed.
    pub excluded: Vec<usize>,
    /// True when the features were degenerate and no fit was attempted.
    pub degenerate: bool,
}

impl ModelSelection {
    pub fn bic_curve(&self) -> Vec<(usize, f64)> {
        self.per_k_best.iter().map(|(&k, f)| (k, f.bic)).collect()
    }

    /// The selection a run bounded by `k_max` would have produced.
    ///
    /// Fits of order `k` depend only on the data, the seeds for `k` and the fits
    /// below `k`, never on the bound, so this equals calling [`select_order`]
    /// again with the smaller bound.
    pub fn restricted(&self, k_max: usize) -> Result<ModelSelection> {
        if k_max == 0 || k_max > self.k_max {
            return Err(Error::Config(format!(
                "cannot restrict a selection bounded by {} to {k_max}",
                self.k_max
            )));
        }
        let per_k_best: BTreeMap<usize, GmmFit> = self
            .per_k_best
            .range(..=k_max)
            .map(|(&k, f)| (k, f.clone()))
            .collect();
        let selected_k = if self.degenerate {
            1
        } else {
            min_bic_order(&per_k_best).ok_or(Error::SelectionFailure)?
        };
        Ok(ModelSelection {
            per_k_best,
            selected_k,
            k_max,
            excluded: self.excluded.iter().copied().filter(|&k| k <= k_max).collect(),
            degenerate: self.degenerate,
        })
    }
}

/// Seed of restart `restart` for order `k`.
pub fn restart_seed(master_seed: u64, k: usize, restart: usize) -> u64 {
    derive_seed(master_seed, &[tag::GMM, k as u64, restart as u64])
}

/// BIC-optimal order over `1..=k_max`, each order fitted from `n_init` seeded starts.
pub fn select_order(
    features: &FeatureSet,
    k_max: usize,
    master_seed: u64,
    config: &EmConfig,
) -> Result<ModelSelection> {
    if k_max == 0 || config.n_init == 0 {
        return Err(Error::Config("k_max and n_init must be at least 1".into()));
    }
    if features.degenerate {
        return Ok(ModelSelection {
            per_k_best: BTreeMap::new(),
            selected_k: 1,
            k_max,
            excluded: Vec::new(),
            degenerate: true,
        });
    }

    let grid: Vec<(usize, usize)> = (1..=k_max)
        .flat_map(|k| (0..config.n_init).map(move |r| (k, r)))
        .collect();
    let fits: Vec<((usize, usize), Option<GmmFit>)> = grid
        .par_iter()
        .map(|&(k, r)| {
            let seed = restart_seed(master_seed, k, r);
            ((k, r), fit_points(&features.points, k, seed, config).ok())
        })
        .collect();

    let mut per_k_best: BTreeMap<usize, GmmFit> = BTreeMap::new();
    for ((k, _), fit) in fits {
        let Some(fit) = fit else { continue };
        match per_k_best.get(&k) {
            Some(best) if best.log_likelihood >= fit.log_likelihood => {}
            _ => {
                per_k_best.insert(k, fit);
            }
        }
    }
    // each order also starts from the best fit one order below with its
    // widest component split; random starts alone often land in poor optima
    // at high k
    for k in 2..=k_max {
        let Some(prev) = per_k_best.get(&(k - 1)) else { continue };
        let candidates = widest_components(&prev.components, SPLIT_CANDIDATES);
        let split_fits: Vec<GmmFit> = candidates
            .par_iter()
            .filter_map(|&j| fit_from(&features.points, split_component(&prev.components, j), config).ok())
            .collect();
        for mut fit in split_fits {
            fit.init_seed = restart_seed(master_seed, k, config.n_init);
            match per_k_best.get(&k) {
                Some(best) if best.log_likelihood >= fit.log_likelihood => {}
                _ => {
                    per_k_best.insert(k, fit);
                }
            }
        }
    }
    let excluded: Vec<usize> = (1..=k_max).filter(|k| !per_k_best.contains_key(k)).collect();
    let selected_k = min_bic_order(&per_k_best).ok_or(Error::SelectionFailure)?;
    Ok(ModelSelection {
        per_k_best,
        selected_k,
        k_max,
        excluded,
        degenerate: false,
    })
}

/// Lowest-BIC order; an order must beat every smaller one by more than
/// `BIC_TIE` to be preferred.
fn min_bic_order(per_k_best: &BTreeMap<usize, GmmFit>) -> Option<usize> {
    let mut selected: Option<(usize, f64)> = None;
    for (&k, fit) in per_k_best {
        match selected {
            Some((_, best)) if fit.bic >= best - BIC_TIE => {}
            _ => selected = Some((k, fit.bic)),
        }
    }
    selected.map(|(k, _)| k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::rng_for;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_blobs(seed: u64, centres: &[[f64; 2]], per: usize) -> Vec<[f64; 2]> {
        let mut rng = rng_for(seed, &[]);
        let mut pts = Vec::new();
        for c in centres {
            for _ in 0..per {
                let x: f64 = StandardNormal.sample(&mut rng);
                let y: f64 = StandardNormal.sample(&mut rng);
                pts.push([c[0] + x, c[1] + y]);
            }
        }
        pts
    }

    #[test]
    fn bic_formula() {
        assert!((bic(0.0, 1, 1) - 0.0).abs() < 1e-15);
        let e = std::f64::consts::E;
        // n = e is not an integer; check the penalty form directly
        assert!((-2.0 * 0.0 + 5.0 * e.ln() - 5.0).abs() < 1e-15);
        assert!((bic(-100.0, 2, 1000) - (200.0 + 11.0 * 1000f64.ln())).abs() < 1e-9);
        let grow = bic(-100.0, 2, 2000) - bic(-100.0, 2, 1000);
        assert!((grow - 11.0 * 2f64.ln()).abs() < 1e-9);
        assert_eq!(n_parameters(1), 5);
        assert_eq!(n_parameters(10), 59);
    }

    #[test]
    fn single_component_is_closed_form() {
        let pts = gaussian_blobs(1, &[[2.0, -1.0]], 400);
        let cfg = EmConfig::default();
        let fit = fit_points(&pts, 1, 9, &cfg).unwrap();
        let (mean, cov) = data_covariance(&pts);
        let c = fit.components[0];
        assert_eq!(c.weight, 1.0);
        for d in 0..2 {
            assert!((c.mean[d] - mean[d]).abs() < 1e-12);
        }
        assert!((c.covariance[0][0] - cov[0][0] - cfg.reg).abs() < 1e-12);
        assert!((c.covariance[0][1] - cov[0][1]).abs() < 1e-12);
        assert!((c.covariance[1][1] - cov[1][1] - cfg.reg).abs() < 1e-12);
        assert!(fit.converged);
        assert!(fit.n_iterations <= 2);
    }

    #[test]
    fn recovers_two_separated_components() {
        let pts = gaussian_blobs(11, &[[0.0, 0.0], [10.0, 10.0]], 1000);
        let fit = fit_points(&pts, 2, 5, &EmConfig::default()).unwrap();
        let mut comps = fit.components.clone();
        comps.sort_by(|a, b| a.mean[0].total_cmp(&b.mean[0]));
        for (c, truth) in comps.iter().zip([[0.0, 0.0], [10.0, 10.0]]) {
            assert!((c.mean[0] - truth[0]).abs() < 0.3 && (c.mean[1] - truth[1]).abs() < 0.3);
            assert!((c.weight - 0.5).abs() < 0.05);
        }
    }

    #[test]
    fn likelihood_monotone_and_responsibilities_normalized() {
        let pts = gaussian_blobs(4, &[[0.0, 0.0], [3.0, 1.0], [-2.0, 4.0]], 300);
        for k in 1..=5 {
            let fit = fit_points(&pts, k, 100 + k as u64, &EmConfig::default()).unwrap();
            for (i, w) in fit.ll_trace.windows(2).enumerate() {
                if !fit.reseeds.contains(&i) {
                    assert!(w[1] >= w[0] - 1e-8, "k={k} step {i}: {} -> {}", w[0], w[1]);
                }
            }
            let r = responsibilities(&fit.components, &pts);
            for row in r.chunks(k) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            let wsum: f64 = fit.components.iter().map(|c| c.weight).sum();
            assert!((wsum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_leaves_likelihood_unchanged() {
        let pts = gaussian_blobs(8, &[[0.0, 0.0], [5.0, 0.0]], 200);
        let fit = fit_points(&pts, 3, 2, &EmConfig::default()).unwrap();
        let mut rev = fit.components.clone();
        rev.reverse();
        let a = log_likelihood(&fit.components, &pts);
        let b = log_likelihood(&rev, &pts);
        assert!((a - b).abs() <= 1e-9 * a.abs());
        assert!((a - fit.log_likelihood).abs() <= 1e-9 * a.abs());
    }

    #[test]
    fn eigenvalue_floor_clips_only_small_axes() {
        let cov = [[1.0, 0.99], [0.99, 1.0]];
        let out = conditioned(cov, 0.1, 0.0);
        let c = GaussianComponent { weight: 1.0, mean: [0.0; 2], covariance: out };
        assert!((c.min_eigenvalue() - 0.1).abs() < 1e-12);
        let tr = out[0][0] + out[1][1];
        assert!((tr - (1.99 + 0.1)).abs() < 1e-12);
        assert_eq!(out[0][1], out[1][0]);
        assert_eq!(conditioned([[2.0, 0.0], [0.0, 0.01]], 0.1, 0.0), [[2.0, 0.0], [0.0, 0.1]]);
        assert_eq!(conditioned([[2.0, 0.3], [0.3, 1.0]], 0.1, 0.5), [[2.5, 0.3], [0.3, 1.5]]);
    }

    #[test]
    fn too_few_points() {
        let pts = gaussian_blobs(1, &[[0.0, 0.0]], 9);
        assert!(matches!(
            fit_points(&pts, 2, 0, &EmConfig::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn degenerate_features_select_one() {
        let mut fs = FeatureSet::from_points(vec![[0.0, 0.0]; 20]);
        fs.degenerate = true;
        let sel = select_order(&fs, 10, 0, &EmConfig::default()).unwrap();
        assert_eq!(sel.selected_k, 1);
        assert!(sel.degenerate);
    }

    #[test]
    fn orders_without_enough_points_are_excluded() {
        let fs = FeatureSet::from_points(gaussian_blobs(2, &[[0.0, 0.0]], 12));
        let sel = select_order(&fs, 4, 3, &EmConfig { n_init: 2, ..EmConfig::default() }).unwrap();
        assert_eq!(sel.excluded, vec![3, 4]);
        assert!(sel.selected_k <= 2);
    }

    #[test]
    fn selection_is_deterministic() {
        let fs = FeatureSet::from_points(gaussian_blobs(5, &[[0.0, 0.0], [6.0, 6.0]], 150));
        let cfg = EmConfig { n_init: 3, ..EmConfig::default() };
        let a = select_order(&fs, 5, 77, &cfg).unwrap();
        let b = select_order(&fs, 5, 77, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.selected_k, 2);
        let best = a.per_k_best[&a.selected_k].bic;
        assert!(a.per_k_best.values().all(|f| best <= f.bic + BIC_TIE));
    }
}
