//! Weighted histograms, Hellinger distance and weighted expectations.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::compactness::SamplingRegion;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::upsampler::WeightedSample;

/// Samples per accumulation shard. Fixed so merged sums do not depend on
/// the thread count.
const SHARD: usize = 8192;

/// Regular-grid histogram over a box, stored row-major over `axes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramND {
    /// Original coordinate index of each histogram axis.
    pub axes: Vec<usize>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub bins: Vec<usize>,
    pub counts: Vec<f64>,
    /// Weight that fell outside the box.
    pub overflow: f64,
    pub normalized: bool,
}

impl HistogramND {
    pub fn empty(region: &SamplingRegion, bins_per_dim: usize, axes: &[usize]) -> Result<Self> {
        if bins_per_dim == 0 {
            return Err(Error::invalid("bins per dimension must be at least 1"));
        }
        if axes.is_empty() || axes.iter().any(|a| *a >= region.dim()) {
            return Err(Error::invalid(format!("invalid histogram axes {axes:?}")));
        }
        let total = bins_per_dim
            .checked_pow(axes.len() as u32)
            .filter(|t| *t <= 1 << 28)
            .ok_or_else(|| Error::invalid("histogram too large"))?;
        Ok(Self {
            axes: axes.to_vec(),
            lower: axes.iter().map(|a| region.lower()[*a]).collect(),
            upper: axes.iter().map(|a| region.upper()[*a]).collect(),
            bins: vec![bins_per_dim; axes.len()],
            counts: vec![0.0; total],
            overflow: 0.0,
            normalized: false,
        })
    }

    pub fn dims(&self) -> usize {
        self.axes.len()
    }

    pub fn edges(&self, dim: usize) -> Vec<f64> {
        let n = self.bins[dim];
        let (lo, hi) = (self.lower[dim], self.upper[dim]);
        (0..=n).map(|k| lo + (hi - lo) * k as f64 / n as f64).collect()
    }

    pub fn bin_width(&self, dim: usize) -> f64 {
        (self.upper[dim] - self.lower[dim]) / self.bins[dim] as f64
    }

    pub fn bin_volume(&self) -> f64 {
        (0..self.dims()).map(|k| self.bin_width(k)).product()
    }

    /// Flat index of the bin containing `theta` (full coordinate vector).
    pub fn locate(&self, theta: &[f64]) -> Option<usize> {
        let mut idx = 0usize;
        for (k, &a) in self.axes.iter().enumerate() {
            let x = *theta.get(a)?;
            let (lo, hi, n) = (self.lower[k], self.upper[k], self.bins[k]);
            if !(x >= lo && x <= hi) {
                return None;
            }
            let b = (((x - lo) / (hi - lo)) * n as f64) as usize;
            idx = idx * n + b.min(n - 1);
        }
        Some(idx)
    }

    /// Multi-index of a flat bin index.
    pub fn unravel(&self, mut flat: usize) -> Vec<usize> {
        let mut out = vec![0; self.dims()];
        for k in (0..self.dims()).rev() {
            out[k] = flat % self.bins[k];
            flat /= self.bins[k];
        }
        out
    }

    pub fn center(&self, multi: &[usize]) -> Vec<f64> {
        multi
            .iter()
            .enumerate()
            .map(|(k, b)| self.lower[k] + (*b as f64 + 0.5) * self.bin_width(k))
            .collect()
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    /// Scales in-range counts to sum to 1.
    pub fn normalize(&mut self) -> Result<()> {
        let t = self.total();
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::invalid("histogram has no in-range mass"));
        }
        for c in &mut self.counts {
            *c /= t;
        }
        self.overflow /= t;
        self.normalized = true;
        Ok(())
    }

    pub fn normalized(&self) -> Result<Self> {
        let mut h = self.clone();
        h.normalize()?;
        Ok(h)
    }

    pub fn same_binning(&self, other: &Self) -> bool {
        self.axes == other.axes && self.bins == other.bins && self.lower == other.lower && self.upper == other.upper
    }

    /// Sums out every axis not listed in `keep` (positions within `axes`).
    pub fn marginalize(&self, keep: &[usize]) -> Result<Self> {
        let mut keep = keep.to_vec();
        keep.sort_unstable();
        keep.dedup();
        if keep.is_empty() || keep.iter().any(|k| *k >= self.dims()) {
            return Err(Error::invalid(format!("cannot keep axes {keep:?} of a {}-d histogram", self.dims())));
        }
        let bins: Vec<usize> = keep.iter().map(|k| self.bins[*k]).collect();
        let mut counts = vec![0.0; bins.iter().product()];
        for (flat, c) in self.counts.iter().enumerate() {
            let multi = self.unravel(flat);
            let mut idx = 0;
            for (k, &ax) in keep.iter().enumerate() {
                idx = idx * bins[k] + multi[ax];
            }
            counts[idx] += c;
        }
        Ok(Self {
            axes: keep.iter().map(|k| self.axes[*k]).collect(),
            lower: keep.iter().map(|k| self.lower[*k]).collect(),
            upper: keep.iter().map(|k| self.upper[*k]).collect(),
            bins,
            counts,
            overflow: self.overflow,
            normalized: self.normalized,
        })
    }

    /// CSV with `index_k`, `center_k`, `mass` and `density` columns, after a
    /// `#`-prefixed JSON line carrying the binning.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let meta = CsvMeta {
            axes: self.axes.clone(),
            lower: self.lower.clone(),
            upper: self.upper.clone(),
            bins: self.bins.clone(),
            overflow: self.overflow,
            normalized: self.normalized,
        };
        writeln!(out, "# {}", serde_json::to_string(&meta)?)?;
        let n = self.dims();
        let mut header: Vec<String> = (0..n).map(|k| format!("index_{k}")).collect();
        header.extend((0..n).map(|k| format!("center_{k}")));
        header.push("mass".into());
        header.push("density".into());
        writeln!(out, "{}", header.join(","))?;
        let vol = self.bin_volume();
        for (flat, c) in self.counts.iter().enumerate() {
            let multi = self.unravel(flat);
            let mut row: Vec<String> = multi.iter().map(|b| b.to_string()).collect();
            row.extend(self.center(&multi).iter().map(|x| x.to_string()));
            row.push(c.to_string());
            row.push((c / vol).to_string());
            writeln!(out, "{}", row.join(","))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let first = lines.next().ok_or_else(|| Error::invalid("empty histogram file"))??;
        let meta: CsvMeta = serde_json::from_str(
            first
                .strip_prefix('#')
                .ok_or_else(|| Error::invalid("histogram file lacks its metadata line"))?
                .trim(),
        )?;
        let n = meta.bins.len();
        if meta.axes.len() != n || meta.lower.len() != n || meta.upper.len() != n || n == 0 {
            return Err(Error::invalid("inconsistent histogram metadata"));
        }
        let _header = lines.next().ok_or_else(|| Error::invalid("histogram file lacks a header"))??;
        let total: usize = meta.bins.iter().product();
        let mut counts = vec![f64::NAN; total];
        let mut h = Self {
            axes: meta.axes,
            lower: meta.lower,
            upper: meta.upper,
            bins: meta.bins,
            counts: Vec::new(),
            overflow: meta.overflow,
            normalized: meta.normalized,
        };
        for (row_no, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 2 * n + 2 {
                return Err(Error::invalid(format!("histogram row {}: expected {} fields", row_no + 1, 2 * n + 2)));
            }
            let mut idx = 0usize;
            for k in 0..n {
                let b: usize = fields[k]
                    .trim()
                    .parse()
                    .map_err(|_| Error::invalid(format!("histogram row {}: bad index", row_no + 1)))?;
                if b >= h.bins[k] {
                    return Err(Error::invalid(format!("histogram row {}: index out of range", row_no + 1)));
                }
                idx = idx * h.bins[k] + b;
            }
            counts[idx] = fields[2 * n]
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("histogram row {}: bad mass", row_no + 1)))?;
        }
        if counts.iter().any(|c| c.is_nan()) {
            return Err(Error::invalid("histogram file is missing bins"));
        }
        h.counts = counts;
        Ok(h)
    }
}

#[derive(Serialize, Deserialize)]
struct CsvMeta {
    axes: Vec<usize>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    bins: Vec<usize>,
    overflow: f64,
    normalized: bool,
}

fn fill(
    points: &[(&[f64], f64)],
    region: &SamplingRegion,
    bins_per_dim: usize,
    marginal_dims: Option<&[usize]>,
    execution: Execution,
) -> Result<HistogramND> {
    if points.is_empty() {
        return Err(Error::invalid("cannot histogram an empty sample set"));
    }
    let all: Vec<usize> = (0..region.dim()).collect();
    let axes = marginal_dims.unwrap_or(&all);
    let mut hist = HistogramND::empty(region, bins_per_dim, axes)?;
    let partials = exec::map_chunks(execution, points, SHARD, |chunk| {
        let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
        let mut overflow = 0.0;
        for (theta, w) in chunk {
            match hist.locate(theta) {
                Some(i) => *counts.entry(i).or_insert(0.0) += w,
                None => overflow += w,
            }
        }
        (counts, overflow)
    });
    for (counts, overflow) in partials {
        for (i, c) in counts {
            hist.counts[i] += c;
        }
        hist.overflow += overflow;
    }
    Ok(hist)
}

/// Weight-summed histogram of samples over the region. `marginal_dims`
/// selects coordinates (all by default); out-of-box weight goes to
/// `overflow`.
pub fn weighted_histogram(
    samples: &[WeightedSample],
    region: &SamplingRegion,
    bins_per_dim: usize,
    marginal_dims: Option<&[usize]>,
    execution: Execution,
) -> Result<HistogramND> {
    let pts: Vec<(&[f64], f64)> = samples.iter().map(|s| (s.theta.as_slice(), s.weight)).collect();
    fill(&pts, region, bins_per_dim, marginal_dims, execution)
}

/// Histogram of unweighted points (or with explicit weights).
pub fn point_histogram(
    points: &[Vec<f64>],
    weights: Option<&[f64]>,
    region: &SamplingRegion,
    bins_per_dim: usize,
    marginal_dims: Option<&[usize]>,
    execution: Execution,
) -> Result<HistogramND> {
    if let Some(w) = weights {
        if w.len() != points.len() {
            return Err(Error::shape("weights and points differ in length"));
        }
    }
    let pts: Vec<(&[f64], f64)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (p.as_slice(), weights.map_or(1.0, |w| w[i])))
        .collect();
    fill(&pts, region, bins_per_dim, marginal_dims, execution)
}

/// `d_H = √(½ Σ (√p_i - √q_i)²)` between two histograms with identical
/// binning. Unnormalized inputs are normalized first.
pub fn hellinger(p: &HistogramND, q: &HistogramND) -> Result<f64> {
    if !p.same_binning(q) {
        return Err(Error::invalid("histograms have different binning"));
    }
    let p = if p.normalized { p.clone() } else { p.normalized()? };
    let q = if q.normalized { q.clone() } else { q.normalized()? };
    let sum: f64 = p
        .counts
        .iter()
        .zip(&q.counts)
        .map(|(a, b)| (a.max(0.0).sqrt() - b.max(0.0).sqrt()).powi(2))
        .sum();
    Ok((0.5 * sum).sqrt().min(1.0))
}

/// Self-normalized estimate with its Monte Carlo error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub mc_error: f64,
    pub ess: f64,
}

/// Kish effective sample size `(Σw)²/Σw²`.
pub fn effective_sample_size(weights: impl IntoIterator<Item = f64>) -> f64 {
    let (s, s2) = weights.into_iter().fold((0.0, 0.0), |(a, b), w| (a + w, b + w * w));
    if s2 > 0.0 {
        s * s / s2
    } else {
        0.0
    }
}

/// `Στw/Σw` with error `√(Var_w(τ)/ESS)`.
pub fn weighted_expectation(samples: &[WeightedSample], tau: impl Fn(&[f64]) -> f64) -> Result<Estimate> {
    let total: f64 = samples.iter().map(|s| s.weight).sum();
    if !(total > 0.0) {
        return Err(Error::invalid("total weight must be positive"));
    }
    let vals: Vec<f64> = samples.iter().map(|s| tau(&s.theta)).collect();
    let mean = vals.iter().zip(samples).map(|(t, s)| t * s.weight).sum::<f64>() / total;
    let var = vals.iter().zip(samples).map(|(t, s)| s.weight * (t - mean).powi(2)).sum::<f64>() / total;
    let ess = effective_sample_size(samples.iter().map(|s| s.weight));
    Ok(Estimate {
        mean,
        mc_error: (var / ess).sqrt(),
        ess,
    })
}

/// As [`weighted_expectation`], with a cluster-robust error that treats
/// samples sharing a base index as correlated:
/// `SE² = Σ_c (Σ_{k∈c} w_k(τ_k - mean))² / (Σw)²`. The reported `ess` is
/// `Var_w(τ)/SE²`.
pub fn weighted_expectation_clustered(samples: &[WeightedSample], tau: impl Fn(&[f64]) -> f64) -> Result<Estimate> {
    let plain = weighted_expectation(samples, &tau)?;
    let total: f64 = samples.iter().map(|s| s.weight).sum();
    let mut clusters: BTreeMap<usize, f64> = BTreeMap::new();
    let mut var = 0.0;
    for s in samples {
        let r = s.weight * (tau(&s.theta) - plain.mean);
        *clusters.entry(s.base_index).or_insert(0.0) += r;
        var += s.weight * (tau(&s.theta) - plain.mean).powi(2);
    }
    var /= total;
    let se2 = clusters.values().map(|r| r * r).sum::<f64>() / (total * total);
    Ok(Estimate {
        mean: plain.mean,
        mc_error: se2.sqrt(),
        ess: if se2 > 0.0 { var / se2 } else { samples.len() as f64 },
    })
}

/// Design-effect sample size `N / (1 + (m̄ - 1)ρ)`, with `ρ` the share of
/// the weighted variance of `τ` explained by the base-index clusters and
/// `m̄` the mean cluster size.
pub fn cluster_effective_sample_size(samples: &[WeightedSample], tau: impl Fn(&[f64]) -> f64) -> Result<f64> {
    let plain = weighted_expectation(samples, &tau)?;
    let total: f64 = samples.iter().map(|s| s.weight).sum();
    let mut groups: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    let mut var = 0.0;
    for s in samples {
        let t = tau(&s.theta);
        let g = groups.entry(s.base_index).or_insert((0.0, 0.0));
        g.0 += s.weight;
        g.1 += s.weight * t;
        var += s.weight * (t - plain.mean).powi(2);
    }
    var /= total;
    if var <= 0.0 {
        return Ok(groups.len() as f64);
    }
    let between = groups
        .values()
        .filter(|(w, _)| *w > 0.0)
        .map(|(w, wt)| w * (wt / w - plain.mean).powi(2))
        .sum::<f64>()
        / total;
    let rho = (between / var).clamp(0.0, 1.0);
    let n = samples.len() as f64;
    let m_bar = n / groups.len() as f64;
    Ok(n / (1.0 + (m_bar - 1.0) * rho))
}

fn simpson_step<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + simpson_step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// Adaptive Simpson integral of `f` over `[a, b]`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(&f, a, b, fa, fm, fb, whole, tol, 40)
}

/// Normalized reference histogram of a 1D density given by its log, by
/// per-bin quadrature over `[lower, upper]`.
pub fn density_histogram_1d(log_density: impl Fn(f64) -> f64, region: &SamplingRegion, bins: usize) -> Result<HistogramND> {
    if region.dim() != 1 {
        return Err(Error::invalid("density_histogram_1d needs a one-dimensional region"));
    }
    let mut h = HistogramND::empty(region, bins, &[0])?;
    let edges = h.edges(0);
    let peak = (0..=10_000)
        .map(|k| log_density(edges[0] + (edges[bins] - edges[0]) * k as f64 / 10_000.0))
        .filter(|x| x.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !peak.is_finite() {
        return Err(Error::Numeric("density is zero or non-finite over the region".into()));
    }
    let f = |x: f64| {
        let v = (log_density(x) - peak).exp();
        if v.is_finite() {
            v
        } else {
            0.0
        }
    };
    for k in 0..bins {
        h.counts[k] = integrate(f, edges[k], edges[k + 1], 1e-13 * (edges[k + 1] - edges[k]));
    }
    h.normalize()?;
    Ok(h)
}

/// Separable Gaussian blur with standard deviation `sigma_bins` (in bins),
/// truncated at 3σ and renormalized at the edges. For plot exports only.
pub fn gaussian_blur(hist: &HistogramND, sigma_bins: f64) -> HistogramND {
    if !(sigma_bins > 0.0) {
        return hist.clone();
    }
    let radius = (3.0 * sigma_bins).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-0.5 * (k as f64 / sigma_bins).powi(2)).exp())
        .collect();
    let mut data = hist.counts.clone();
    let n = hist.dims();
    for axis in 0..n {
        let stride: usize = hist.bins[axis + 1..].iter().product();
        let len = hist.bins[axis];
        let mut out = vec![0.0; data.len()];
        for (flat, slot) in out.iter_mut().enumerate() {
            let pos = (flat / stride) % len;
            let (mut acc, mut norm) = (0.0, 0.0);
            for (ki, kv) in kernel.iter().enumerate() {
                let off = ki as isize - radius;
                let q = pos as isize + off;
                if q < 0 || q >= len as isize {
                    continue;
                }
                let src = (flat as isize + off * stride as isize) as usize;
                acc += kv * data[src];
                norm += kv;
            }
            *slot = acc / norm;
        }
        data = out;
    }
    HistogramND {
        counts: data,
        ..hist.clone()
    }
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn hist(counts: Vec<f64>) -> HistogramND {
        let r = SamplingRegion::new(vec![0.0], vec![1.0]).unwrap();
        let mut h = HistogramND::empty(&r, counts.len(), &[0]).unwrap();
        h.counts = counts;
        h
    }

    fn triple() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        (2usize..12).prop_flat_map(|n| {
            let v = || prop::collection::vec(0.0f64..1.0, n).prop_filter("nonzero", |v| v.iter().sum::<f64>() > 1e-3);
            (v(), v(), v())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn hellinger_is_a_metric((a, b, c) in triple()) {
            let (p, q, r) = (hist(a), hist(b), hist(c));
            let pq = hellinger(&p, &q).unwrap();
            let qp = hellinger(&q, &p).unwrap();
            prop_assert!((pq - qp).abs() <= 1e-12);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&pq));
            prop_assert!(hellinger(&p, &p).unwrap() <= 1e-7);
            let pr = hellinger(&p, &r).unwrap();
            let rq = hellinger(&r, &q).unwrap();
            prop_assert!(pq <= pr + rq + 1e-12);
        }

        #[test]
        fn marginals_preserve_mass(counts in prop::collection::vec(0.0f64..5.0, 27), keep in prop::sample::subsequence(vec![0usize, 1, 2], 1..=2)) {
            let r = SamplingRegion::new(vec![0.0; 3], vec![1.0; 3]).unwrap();
            let mut h = HistogramND::empty(&r, 3, &[0, 1, 2]).unwrap();
            h.counts = counts;
            let m = h.marginalize(&keep).unwrap();
            prop_assert!((m.total() - h.total()).abs() <= 1e-9);
            let last = m.marginalize(&[0]).unwrap();
            let direct = h.marginalize(&[keep[0]]).unwrap();
            for (x, y) in last.counts.iter().zip(&direct.counts) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }

        #[test]
        fn ess_bounded_by_count(w in prop::collection::vec(1e-6f64..10.0, 1..200)) {
            let n = w.len() as f64;
            let e = effective_sample_size(w);
            prop_assert!(e >= 1.0 - 1e-9 && e <= n + 1e-9);
        }
    }
}
