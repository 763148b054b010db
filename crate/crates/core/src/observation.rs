//! Serial subset observation schemes, co-occurrence groups and counts, and the
//! empirical lagged-covariance estimator on co-observed pairs.
//!
//! Indices are 0-based internally: segment times are half-open `[start, end)`
//! over `0..T` and variable ranges half-open over `0..p`. The JSON form uses
//! 1-based inclusive times and 1-based half-open variable ranges.

use std::collections::{BTreeMap, HashSet};
use std::ops::Range;

use nalgebra::{DMatrix, DMatrixView, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A time segment with a fixed set of observed variables.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    /// Sorted, disjoint, non-empty variable ranges.
    pub ranges: Vec<Range<usize>>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn observes(&self, i: usize) -> bool {
        // ranges are sorted: binary search on the start points
        let k = self.ranges.partition_point(|r| r.start <= i);
        k > 0 && self.ranges[k - 1].end > i
    }

    pub fn n_observed(&self) -> usize {
        self.ranges.iter().map(|r| r.len()).sum()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.ranges.iter().flat_map(|r| r.clone())
    }
}

/// Per-time observed index sets, stored as time segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationScheme {
    pub p: usize,
    pub t: usize,
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Overlap {
    /// Fraction of `p`, rounded to the nearest count.
    Fraction(f64),
    /// Number of shared variables.
    Count(usize),
}

impl Overlap {
    fn resolve(self, p: usize) -> Result<usize> {
        match self {
            Overlap::Fraction(f) if (0.0..=1.0).contains(&f) => Ok((f * p as f64).round() as usize),
            Overlap::Fraction(f) => Err(Error::InvalidConfig(format!("overlap fraction {f} outside [0, 1]"))),
            Overlap::Count(o) => Ok(o),
        }
    }
}

fn normalize_ranges(mut ranges: Vec<Range<usize>>) -> Vec<Range<usize>> {
    ranges.retain(|r| !r.is_empty());
    ranges.sort_by_key(|r| r.start);
    let mut out: Vec<Range<usize>> = Vec::with_capacity(ranges.len());
    for r in ranges {
        match out.last_mut() {
            Some(last) if last.end >= r.start => last.end = last.end.max(r.end),
            _ => out.push(r),
        }
    }
    out
}

impl ObservationScheme {
    pub fn new(p: usize, t: usize, segments: Vec<Segment>) -> Result<Self> {
        let segments: Vec<Segment> = segments
            .into_iter()
            .map(|s| Segment { ranges: normalize_ranges(s.ranges), ..s })
            .collect();
        let scheme = Self { p, t, segments };
        scheme.validate()?;
        Ok(scheme)
    }

    /// Every variable observed at every time.
    pub fn full(p: usize, t: usize) -> Self {
        Self {
            p,
            t,
            segments: vec![Segment { start: 0, end: t, ranges: vec![0..p] }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::InvalidConfig("scheme has no segments".into()));
        }
        let mut expected = 0;
        for (k, seg) in self.segments.iter().enumerate() {
            if seg.start != expected || seg.end <= seg.start {
                return Err(Error::InvalidConfig(format!(
                    "segment {k} [{}, {}) does not continue the tiling at {expected}",
                    seg.start, seg.end
                )));
            }
            expected = seg.end;
            for w in seg.ranges.windows(2) {
                if w[0].end > w[1].start {
                    return Err(Error::InvalidConfig(format!("segment {k} has overlapping ranges")));
                }
            }
            if let Some(last) = seg.ranges.last() {
                if last.end > self.p {
                    return Err(Error::InvalidConfig(format!(
                        "segment {k} range {:?} exceeds p = {}",
                        last, self.p
                    )));
                }
            }
        }
        if expected != self.t {
            return Err(Error::InvalidConfig(format!(
                "segments cover [0, {expected}) but T = {}",
                self.t
            )));
        }
        Ok(())
    }

    pub fn segment_index(&self, t: usize) -> usize {
        self.segments.partition_point(|s| s.end <= t)
    }

    pub fn segment_at(&self, t: usize) -> &Segment {
        &self.segments[self.segment_index(t)]
    }

    pub fn is_observed(&self, t: usize, i: usize) -> bool {
        self.segment_at(t).observes(i)
    }

    /// Brute-force `|{t : i in Omega_{t+s}, j in Omega_t}|` by enumeration.
    pub fn count_by_enumeration(&self, i: usize, j: usize, s: usize) -> u64 {
        (0..self.t.saturating_sub(s))
            .filter(|&t| self.is_observed(t + s, i) && self.is_observed(t, j))
            .count() as u64
    }

    /// Apply a variable permutation: new index `perm[i]` holds old variable `i`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let segments = self
            .segments
            .iter()
            .map(|s| Segment {
                start: s.start,
                end: s.end,
                ranges: s.indices().map(|i| perm[i]..perm[i] + 1).collect(),
            })
            .collect();
        Self::new(self.p, self.t, segments)
    }

    pub fn to_json(&self) -> SchemeJson {
        SchemeJson {
            p: self.p,
            t: self.t,
            segments: self
                .segments
                .iter()
                .map(|s| SegmentJson {
                    t_start: s.start + 1,
                    t_end: s.end,
                    ranges: s.ranges.iter().map(|r| [r.start + 1, r.end + 1]).collect(),
                })
                .collect(),
        }
    }

    pub fn from_json(json: &SchemeJson) -> Result<Self> {
        let mut segments = Vec::with_capacity(json.segments.len());
        for s in &json.segments {
            if s.t_start == 0 || s.ranges.iter().any(|r| r[0] == 0 || r[1] < r[0]) {
                return Err(Error::InvalidConfig("scheme indices are 1-based".into()));
            }
            segments.push(Segment {
                start: s.t_start - 1,
                end: s.t_end,
                ranges: s.ranges.iter().map(|r| (r[0] - 1)..(r[1] - 1)).collect(),
            });
        }
        Self::new(json.p, json.t, segments)
    }
}

/// Serialized scheme: 1-based inclusive times, 1-based half-open ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeJson {
    pub p: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub segments: Vec<SegmentJson>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentJson {
    pub t_start: usize,
    pub t_end: usize,
    pub ranges: Vec<[usize; 2]>,
}

/// Two sessions: the first observes `[0, p1)`, the second `[p1 - o, p)`.
pub fn make_two_subset_scheme(p: usize, overlap: Overlap, t1: usize, t2: usize) -> Result<ObservationScheme> {
    let o = overlap.resolve(p)?;
    if o > p {
        return Err(Error::InvalidConfig(format!("overlap {o} larger than p = {p}")));
    }
    let p1 = (p + o).div_ceil(2);
    let second_start = p1 - o;
    if o > p1 || o > p - second_start {
        return Err(Error::InvalidConfig(format!("overlap {o} larger than a subset")));
    }
    ObservationScheme::new(
        p,
        t1 + t2,
        vec![
            Segment { start: 0, end: t1, ranges: vec![0..p1] },
            Segment { start: t1, end: t1 + t2, ranges: vec![second_start..p] },
        ],
    )
}

/// A chain of `k` equally long sessions over windows that overlap their
/// neighbours by `overlap` variables.
pub fn make_multi_subset_scheme(p: usize, k: usize, overlap: usize, t_each: usize) -> Result<ObservationScheme> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 subsets, got {k}")));
    }
    let width = (p + (k - 1) * overlap).div_ceil(k);
    if overlap >= width {
        return Err(Error::InvalidConfig(format!(
            "overlap {overlap} leaves no new variables in windows of width {width}"
        )));
    }
    let stride = width - overlap;
    let mut segments = Vec::with_capacity(k);
    for m in 0..k {
        let lo = m * stride;
        let hi = (lo + width).min(p);
        if lo >= hi {
            return Err(Error::InvalidConfig(format!("window {m} starts beyond p = {p}")));
        }
        segments.push(Segment { start: m * t_each, end: (m + 1) * t_each, ranges: vec![lo..hi] });
    }
    let last_end = segments.last().map(|s| s.ranges[0].end).unwrap_or(0);
    if last_end < p {
        return Err(Error::InvalidConfig(format!("windows cover only [0, {last_end}) of {p}")));
    }
    ObservationScheme::new(p, k * t_each, segments)
}

/// A maximal set of variables sharing one observation pattern.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub ranges: Vec<Range<usize>>,
    /// `observed_in[k]` is true when segment `k` observes the group.
    pub observed_in: Vec<bool>,
}

impl Group {
    pub fn size(&self) -> usize {
        self.ranges.iter().map(|r| r.len()).sum()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.ranges.iter().flat_map(|r| r.clone())
    }

    /// The `m`-th member in increasing index order.
    pub fn nth(&self, mut m: usize) -> usize {
        for r in &self.ranges {
            if m < r.len() {
                return r.start + m;
            }
            m -= r.len();
        }
        panic!("group member {m} out of range");
    }
}

/// Co-occurrence groups together with the group-level count table.
#[derive(Debug, Clone)]
pub struct CooccurrenceGroups {
    pub scheme: ObservationScheme,
    pub groups: Vec<Group>,
    var_group: Vec<u32>,
    /// Groups observed in each segment.
    pub segment_groups: Vec<Vec<usize>>,
    max_lag: usize,
    /// `counts[s][a * G + b]`: times with group `a` observed at `t + s` and `b` at `t`.
    counts: Vec<Vec<u64>>,
}

impl CooccurrenceGroups {
    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn max_lag(&self) -> usize {
        self.max_lag
    }

    pub fn group_of(&self, i: usize) -> usize {
        self.var_group[i] as usize
    }

    /// Group-level count `T^s_{ab}`.
    pub fn group_count(&self, a: usize, b: usize, s: usize) -> u64 {
        if s <= self.max_lag {
            self.counts[s][a * self.groups.len() + b]
        } else {
            interval_count(&self.scheme, &self.groups[a], &self.groups[b], s)
        }
    }

    /// `T^s_{ij} = |{t : i in Omega_{t+s}, j in Omega_t}|`.
    pub fn count(&self, i: usize, j: usize, s: usize) -> u64 {
        self.group_count(self.group_of(i), self.group_of(j), s)
    }

    /// All pairs with `T^s_{ij} > 1`, ordered by `(i, j)`. Quadratic in `p`.
    pub fn pair_set(&self, s: usize) -> PairSet {
        let g = self.groups.len();
        let mut pairs = Vec::new();
        for i in 0..self.scheme.p {
            let a = self.group_of(i);
            for j in 0..self.scheme.p {
                let b = self.group_of(j);
                if a < g && b < g && self.group_count(a, b, s) > 1 {
                    pairs.push((i, j));
                }
            }
        }
        PairSet { lag: s, pairs }
    }

    /// Up to `k` distinct pairs drawn uniformly among pairs whose count
    /// satisfies `keep`. Returns every such pair when there are at most `k`.
    pub fn sample_pairs<R: Rng + ?Sized>(
        &self,
        s: usize,
        k: usize,
        keep: impl Fn(u64) -> bool,
        rng: &mut R,
    ) -> Vec<(usize, usize)> {
        let g = self.groups.len();
        let mut blocks = Vec::new();
        let mut total = 0u64;
        for a in 0..g {
            for b in 0..g {
                if keep(self.group_count(a, b, s)) {
                    let w = (self.groups[a].size() * self.groups[b].size()) as u64;
                    if w > 0 {
                        total += w;
                        blocks.push((a, b, total));
                    }
                }
            }
        }
        if total == 0 || k == 0 {
            return Vec::new();
        }
        let decode = |mut idx: u64| -> (usize, usize) {
            let pos = blocks.partition_point(|&(_, _, cum)| cum <= idx);
            let (a, b, cum) = blocks[pos];
            let size_b = self.groups[b].size() as u64;
            let start = cum - (self.groups[a].size() as u64) * size_b;
            idx -= start;
            (self.groups[a].nth((idx / size_b) as usize), self.groups[b].nth((idx % size_b) as usize))
        };
        if total as usize <= k {
            let mut all: Vec<_> = (0..total).map(decode).collect();
            all.sort_unstable();
            return all;
        }
        let mut chosen = HashSet::with_capacity(k);
        if (k as u64) * 2 <= total {
            while chosen.len() < k {
                chosen.insert(rng.random_range(0..total));
            }
        } else {
            // Dense request: partial Fisher-Yates over the index space.
            let mut idx: Vec<u64> = (0..total).collect();
            for m in 0..k {
                let r = rng.random_range(m..idx.len());
                idx.swap(m, r);
            }
            chosen.extend(idx.into_iter().take(k));
        }
        let mut out: Vec<_> = chosen.into_iter().map(decode).collect();
        out.sort_unstable();
        out
    }
}

fn interval_count(scheme: &ObservationScheme, a: &Group, b: &Group, s: usize) -> u64 {
    let mut total = 0u64;
    for (u, su) in scheme.segments.iter().enumerate() {
        if !a.observed_in[u] || su.end <= s {
            continue;
        }
        // t + s in [su.start, su.end)  =>  t in [su.start - s, su.end - s)
        let lo_u = su.start.saturating_sub(s);
        let hi_u = su.end - s;
        for (v, sv) in scheme.segments.iter().enumerate() {
            if !b.observed_in[v] {
                continue;
            }
            let lo = lo_u.max(sv.start);
            let hi = hi_u.min(sv.end);
            if hi > lo {
                total += (hi - lo) as u64;
            }
        }
    }
    total
}

/// Partition variables by observation pattern and tabulate counts for lags
/// `0..=max_lag`.
pub fn compute_cooccurrence_groups(scheme: &ObservationScheme, max_lag: usize) -> CooccurrenceGroups {
    let nseg = scheme.segments.len();
    // Elementary intervals between all range boundaries have constant patterns.
    let mut cuts = vec![0, scheme.p];
    for seg in &scheme.segments {
        for r in &seg.ranges {
            cuts.push(r.start);
            cuts.push(r.end);
        }
    }
    cuts.sort_unstable();
    cuts.dedup();

    let mut by_pattern: BTreeMap<Vec<bool>, usize> = BTreeMap::new();
    let mut groups: Vec<Group> = Vec::new();
    let mut var_group = vec![0u32; scheme.p];
    for w in cuts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if lo >= hi {
            continue;
        }
        let pattern: Vec<bool> = scheme.segments.iter().map(|s| s.observes(lo)).collect();
        let id = *by_pattern.entry(pattern.clone()).or_insert_with(|| {
            groups.push(Group { ranges: Vec::new(), observed_in: pattern });
            groups.len() - 1
        });
        let g = &mut groups[id];
        match g.ranges.last_mut() {
            Some(last) if last.end == lo => last.end = hi,
            _ => g.ranges.push(lo..hi),
        }
        var_group[lo..hi].fill(id as u32);
    }

    let segment_groups = (0..nseg)
        .map(|k| (0..groups.len()).filter(|&g| groups[g].observed_in[k]).collect())
        .collect();

    let g = groups.len();
    let counts = (0..=max_lag)
        .map(|s| {
            let mut table = vec![0u64; g * g];
            for a in 0..g {
                for b in 0..g {
                    table[a * g + b] = interval_count(scheme, &groups[a], &groups[b], s);
                }
            }
            table
        })
        .collect();

    CooccurrenceGroups {
        scheme: scheme.clone(),
        groups,
        var_group,
        segment_groups,
        max_lag,
        counts,
    }
}

/// Pairs co-observed at least twice at one lag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    pub lag: usize,
    pub pairs: Vec<(usize, usize)>,
}

/// Data matrix with its observation scheme. Storage is time-major: entry
/// `values[t * p + i]` is variable `i` at time `t`, NaN where unobserved.
#[derive(Debug, Clone)]
pub struct MaskedTimeSeries {
    values: Vec<f64>,
    pub scheme: ObservationScheme,
    pub per_variable_mean: DVector<f64>,
}

impl MaskedTimeSeries {
    /// Wraps time-major values; the NaN pattern must match the scheme.
    pub fn new(values: Vec<f64>, scheme: ObservationScheme) -> Result<Self> {
        let (p, t) = (scheme.p, scheme.t);
        if values.len() != p * t {
            return Err(Error::Dimension(format!("{} values for T = {t}, p = {p}", values.len())));
        }
        for seg in &scheme.segments {
            for tt in seg.start..seg.end {
                let row = &values[tt * p..(tt + 1) * p];
                for (i, v) in row.iter().enumerate() {
                    let obs = seg.observes(i);
                    if obs && !v.is_finite() {
                        return Err(Error::InvalidConfig(format!(
                            "observed entry (t={}, i={}) is not finite",
                            tt + 1,
                            i + 1
                        )));
                    }
                    if !obs && !v.is_nan() {
                        return Err(Error::InvalidConfig(format!(
                            "unobserved entry (t={}, i={}) is not NaN",
                            tt + 1,
                            i + 1
                        )));
                    }
                }
            }
        }
        let per_variable_mean = observed_means(&values, &scheme);
        Ok(Self { values, scheme, per_variable_mean })
    }

    /// Masks a fully known `p x T` matrix (column `t` = `y_t`) with the scheme.
    pub fn from_full(y: &DMatrix<f64>, scheme: ObservationScheme) -> Result<Self> {
        if y.shape() != (scheme.p, scheme.t) {
            return Err(Error::Dimension(format!(
                "data is {:?}, scheme expects {}x{}",
                y.shape(),
                scheme.p,
                scheme.t
            )));
        }
        let mut values = vec![f64::NAN; scheme.p * scheme.t];
        for seg in &scheme.segments {
            for t in seg.start..seg.end {
                for r in &seg.ranges {
                    for i in r.clone() {
                        values[t * scheme.p + i] = y[(i, t)];
                    }
                }
            }
        }
        Self::new(values, scheme)
    }

    pub fn p(&self) -> usize {
        self.scheme.p
    }

    pub fn t(&self) -> usize {
        self.scheme.t
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let p = self.scheme.p;
        &self.values[t * p..(t + 1) * p]
    }

    /// `p x T` view whose column `t` is `y_t` (NaN where unobserved).
    pub fn view(&self) -> DMatrixView<'_, f64> {
        DMatrixView::from_slice(&self.values, self.scheme.p, self.scheme.t)
    }

    /// Mean-centered copy, `p x T`, unobserved entries set to zero.
    pub fn centered_filled(&self) -> DMatrix<f64> {
        let p = self.scheme.p;
        let mut out = DMatrix::zeros(p, self.scheme.t);
        for seg in &self.scheme.segments {
            for t in seg.start..seg.end {
                for i in seg.indices() {
                    out[(i, t)] = self.values[t * p + i] - self.per_variable_mean[i];
                }
            }
        }
        out
    }

    /// Observed-time variance of each variable (divisor `|O_i|`).
    pub fn observed_variance(&self) -> DVector<f64> {
        let p = self.scheme.p;
        let mut sum = DVector::zeros(p);
        let mut cnt = vec![0usize; p];
        for seg in &self.scheme.segments {
            for t in seg.start..seg.end {
                for i in seg.indices() {
                    let d = self.values[t * p + i] - self.per_variable_mean[i];
                    sum[i] += d * d;
                    cnt[i] += 1;
                }
            }
        }
        for i in 0..p {
            if cnt[i] > 0 {
                sum[i] /= cnt[i] as f64;
            }
        }
        sum
    }
}

fn observed_means(values: &[f64], scheme: &ObservationScheme) -> DVector<f64> {
    let p = scheme.p;
    let mut sum = DVector::zeros(p);
    let mut cnt = vec![0usize; p];
    for seg in &scheme.segments {
        for t in seg.start..seg.end {
            for i in seg.indices() {
                sum[i] += values[t * p + i];
                cnt[i] += 1;
            }
        }
    }
    for i in 0..p {
        sum[i] = if cnt[i] > 0 { sum[i] / cnt[i] as f64 } else { 0.0 };
    }
    sum
}

/// Centered series stored variable-major (`T x p`, column `i` contiguous in time).
pub struct VariableMajor {
    data: DMatrix<f64>,
}

impl VariableMajor {
    pub fn new(data: &MaskedTimeSeries) -> Self {
        Self { data: data.centered_filled().transpose() }
    }

    fn series(&self, i: usize) -> &[f64] {
        let t = self.data.nrows();
        &self.data.as_slice()[i * t..(i + 1) * t]
    }
}

/// `sum_t y~_i(t+s) y~_j(t)` over co-observed `t` and the co-occurrence count.
fn lagged_product(series: &VariableMajor, groups: &CooccurrenceGroups, i: usize, j: usize, s: usize) -> (f64, u64) {
    let scheme = &groups.scheme;
    let (yi, yj) = (series.series(i), series.series(j));
    let mut sum = 0.0;
    let mut count = 0u64;
    for su in &scheme.segments {
        if !su.observes(i) || su.end <= s {
            continue;
        }
        let lo_u = su.start.saturating_sub(s);
        let hi_u = su.end - s;
        for sv in &scheme.segments {
            if !sv.observes(j) {
                continue;
            }
            let lo = lo_u.max(sv.start);
            let hi = hi_u.min(sv.end);
            if hi > lo {
                count += (hi - lo) as u64;
                sum += yi[lo + s..hi + s].iter().zip(&yj[lo..hi]).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    (sum, count)
}

/// Unbiased lagged covariance estimates `1/(T^s_ij - 1) sum_t y~_i(t+s) y~_j(t)`
/// for the requested pairs, on per-variable mean-centered data.
pub fn empirical_lagged_cov(
    data: &MaskedTimeSeries,
    groups: &CooccurrenceGroups,
    s: usize,
    pairs: &[(usize, usize)],
) -> Result<Vec<f64>> {
    let series = VariableMajor::new(data);
    empirical_lagged_cov_with(&series, groups, s, pairs)
}

/// As [`empirical_lagged_cov`] with a precomputed variable-major copy.
pub fn empirical_lagged_cov_with(
    series: &VariableMajor,
    groups: &CooccurrenceGroups,
    s: usize,
    pairs: &[(usize, usize)],
) -> Result<Vec<f64>> {
    for &(i, j) in pairs {
        let count = groups.count(i, j, s);
        if count <= 1 {
            return Err(Error::InsufficientCoObservation { i, j, lag: s, count });
        }
    }
    Ok(pairs
        .par_iter()
        .map(|&(i, j)| {
            let (sum, count) = lagged_product(series, groups, i, j, s);
            sum / (count as f64 - 1.0)
        })
        .collect())
}
