//! Road-density statistics and k×-scale pool selection.
//!
//! Selection balances outward from the target density. Candidates at or
//! below the target form a low queue ordered by `(density desc, key asc)`;
//! those above form a high queue ordered by `(density asc, key asc)`. Each
//! step takes whichever queue head brings the running deviation sum closest
//! to zero, preferring the smaller key on ties. Pools at different scales are
//! not guaranteed to nest.

use std::cmp::Ordering;
use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_BASELINE_PIXELS: f64 = 6.528e9;
pub const DEFAULT_TOLERANCE_PP: f64 = 0.05;
pub const DEFAULT_TARGET_DENSITY: f64 = 0.06563;
pub const DEFAULT_BIN_WIDTH_PP: f64 = 0.25;
pub const DEFAULT_FRAME_PX: u32 = 4096;

#[derive(Debug, Error, PartialEq)]
pub enum CurateError {
    #[error("invalid pool spec: {0}")]
    Spec(String),
    #[error("invalid density {density} for frame {key}")]
    Density { key: String, density: f64 },
    #[error("bin width must be positive, got {0} pp")]
    BinWidth(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityRecord {
    pub key: String,
    pub density: f64,
}

impl DensityRecord {
    pub fn new(key: impl Into<String>, density: f64) -> Self {
        Self {
            key: key.into(),
            density,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub scale_k: f64,
    pub baseline_pixels: f64,
    pub target_mean_density: f64,
    pub tolerance_pp: f64,
    #[serde(default)]
    pub min_density: f64,
    #[serde(default = "default_frame_px")]
    pub frame_px: u32,
}

fn default_frame_px() -> u32 {
    DEFAULT_FRAME_PX
}

impl Default for PoolSpec {
    fn default() -> Self {
        Self {
            scale_k: 1.0,
            baseline_pixels: DEFAULT_BASELINE_PIXELS,
            target_mean_density: DEFAULT_TARGET_DENSITY,
            tolerance_pp: DEFAULT_TOLERANCE_PP,
            min_density: 0.0,
            frame_px: DEFAULT_FRAME_PX,
        }
    }
}

impl PoolSpec {
    pub fn new(scale_k: f64, target_mean_density: f64) -> Self {
        Self {
            scale_k,
            target_mean_density,
            ..Self::default()
        }
    }

    pub fn frame_pixels(&self) -> u64 {
        u64::from(self.frame_px) * u64::from(self.frame_px)
    }

    /// `round(k × baseline / frame_px²)`.
    pub fn implied_count(&self) -> usize {
        (self.scale_k * self.baseline_pixels / self.frame_pixels() as f64).round() as usize
    }

    pub fn target_pixels(&self) -> f64 {
        self.scale_k * self.baseline_pixels
    }

    pub fn validate(&self) -> Result<(), CurateError> {
        let bad = |m: &str| Err(CurateError::Spec(m.to_string()));
        if !(self.scale_k > 0.0 && self.scale_k.is_finite()) {
            return bad("scale_k must be positive");
        }
        if !(self.baseline_pixels > 0.0 && self.baseline_pixels.is_finite()) {
            return bad("baseline_pixels must be positive");
        }
        if !(0.0..=1.0).contains(&self.target_mean_density) {
            return bad("target_mean_density must lie in [0, 1]");
        }
        if !(self.tolerance_pp >= 0.0) {
            return bad("tolerance_pp must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.min_density) {
            return bad("min_density must lie in [0, 1]");
        }
        if self.frame_px == 0 {
            return bad("frame_px must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSelection {
    pub spec: PoolSpec,
    pub members: Vec<String>,
    pub achieved_mean: f64,
    pub achieved_pixels: u64,
    pub min_density: f64,
    pub max_density: f64,
    pub infeasible: bool,
    pub diagnostics: Vec<String>,
}

/// Neumaier-compensated running sum.
#[derive(Debug, Default, Clone, Copy)]
struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

fn check_records(records: &[DensityRecord]) -> Result<(), CurateError> {
    match records.iter().find(|r| !(0.0..=1.0).contains(&r.density)) {
        Some(r) => Err(CurateError::Density {
            key: r.key.clone(),
            density: r.density,
        }),
        None => Ok(()),
    }
}

fn by_key(a: &DensityRecord, b: &DensityRecord) -> Ordering {
    a.key.cmp(&b.key).then(a.density.total_cmp(&b.density))
}

pub fn select_pool(
    records: &[DensityRecord],
    spec: &PoolSpec,
) -> Result<PoolSelection, CurateError> {
    spec.validate()?;
    check_records(records)?;
    let target = spec.target_mean_density;
    let want = spec.implied_count();

    let mut pool: Vec<&DensityRecord> = records
        .iter()
        .filter(|r| r.density >= spec.min_density)
        .collect();
    pool.sort_by(|a, b| by_key(a, b));
    pool.dedup_by(|a, b| a.key == b.key);
    let mut diagnostics = Vec::new();
    let filtered = records.len() - pool.len();
    if filtered > 0 {
        diagnostics.push(format!(
            "{filtered} record(s) removed by min-density filter or duplicate key"
        ));
    }

    let (mut low, mut high): (Vec<&DensityRecord>, Vec<&DensityRecord>) =
        pool.iter().partition(|r| r.density <= target);
    low.sort_by(|a, b| {
        b.density
            .total_cmp(&a.density)
            .then_with(|| a.key.cmp(&b.key))
    });
    high.sort_by(|a, b| {
        a.density
            .total_cmp(&b.density)
            .then_with(|| a.key.cmp(&b.key))
    });
    let mut low: VecDeque<_> = low.into();
    let mut high: VecDeque<_> = high.into();

    let mut chosen: Vec<&DensityRecord> = Vec::with_capacity(want.min(pool.len()));
    let mut dev = CompensatedSum::default();
    while chosen.len() < want {
        let pick_low = match (low.front(), high.front()) {
            (None, None) => break,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (Some(l), Some(h)) => {
                let s = dev.value();
                let dl = (s + (l.density - target)).abs();
                let dh = (s + (h.density - target)).abs();
                match dl.total_cmp(&dh) {
                    Ordering::Less => true,
                    Ordering::Greater => false,
                    Ordering::Equal => l.key <= h.key,
                }
            }
        };
        let r = if pick_low {
            low.pop_front()
        } else {
            high.pop_front()
        }
        .unwrap();
        dev.add(r.density - target);
        chosen.push(r);
    }

    let n = chosen.len();
    let achieved_mean = if n == 0 {
        0.0
    } else {
        target + dev.value() / n as f64
    };
    let mut infeasible = false;
    if n < want {
        infeasible = true;
        diagnostics.push(format!("insufficient records: need {want}, have {n}"));
    }
    let miss_pp = (achieved_mean - target).abs() * 100.0;
    if n > 0 && miss_pp > spec.tolerance_pp {
        infeasible = true;
        diagnostics.push(format!(
            "achieved mean {achieved_mean:.6} misses target {target:.6} by {miss_pp:.4} pp (tolerance {} pp)",
            spec.tolerance_pp
        ));
    }
    let min_density = chosen
        .iter()
        .map(|r| r.density)
        .fold(f64::INFINITY, f64::min);
    let max_density = chosen
        .iter()
        .map(|r| r.density)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut members: Vec<String> = chosen.iter().map(|r| r.key.clone()).collect();
    members.sort();
    Ok(PoolSelection {
        spec: spec.clone(),
        achieved_pixels: n as u64 * spec.frame_pixels(),
        members,
        achieved_mean,
        min_density: if n == 0 { 0.0 } else { min_density },
        max_density: if n == 0 { 0.0 } else { max_density },
        infeasible,
        diagnostics,
    })
}

/// One row of the pool size / density table.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PoolReport {
    pub count: usize,
    pub pixels: u64,
    pub mean_density: f64,
    pub min_density: f64,
    pub max_density: f64,
}

pub fn pool_report(sel: &PoolSelection) -> PoolReport {
    if sel.members.is_empty() {
        return PoolReport::default();
    }
    PoolReport {
        count: sel.members.len(),
        pixels: sel.achieved_pixels,
        mean_density: sel.achieved_mean,
        min_density: sel.min_density,
        max_density: sel.max_density,
    }
}

impl PoolReport {
    pub fn csv_header() -> &'static str {
        "count,pixels,mean_density_pct,min_density_pct,max_density_pct"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.4e},{:.4},{:.4},{:.4}",
            self.count,
            self.pixels as f64,
            self.mean_density * 100.0,
            self.min_density * 100.0,
            self.max_density * 100.0
        )
    }
}

/// Pool file body: member keys, one per line.
pub fn pool_file_text(sel: &PoolSelection) -> String {
    let mut s = String::with_capacity(sel.members.len() * 16);
    for k in &sel.members {
        s.push_str(k);
        s.push('\n');
    }
    s
}

pub fn read_pool_file(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: u64,
}

/// Index of the bin `[i·w, (i+1)·w)` that holds `d`.
fn bin_index(d: f64, w: f64) -> usize {
    let mut i = (d / w).floor().max(0.0) as usize;
    while i > 0 && d < i as f64 * w {
        i -= 1;
    }
    while d >= (i + 1) as f64 * w {
        i += 1;
    }
    i
}

/// Fixed-width density bins covering `[0, max]`. Width is in percentage points.
pub fn density_histogram(
    records: &[DensityRecord],
    bin_width_pp: f64,
) -> Result<Vec<HistogramBin>, CurateError> {
    if !(bin_width_pp > 0.0 && bin_width_pp.is_finite()) {
        return Err(CurateError::BinWidth(bin_width_pp));
    }
    check_records(records)?;
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let w = bin_width_pp / 100.0;
    let max = records.iter().map(|r| r.density).fold(0.0, f64::max);
    let mut counts = vec![0u64; bin_index(max, w) + 1];
    for r in records {
        counts[bin_index(r.density, w)] += 1;
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            lo: i as f64 * w,
            hi: (i + 1) as f64 * w,
            count,
        })
        .collect())
}

/// Comma-separated table with densities in percent.
pub fn histogram_table(bins: &[HistogramBin]) -> String {
    let mut s = String::from("lo_pct,hi_pct,count\n");
    for b in bins {
        let _ = writeln!(s, "{:.4},{:.4},{}", b.lo * 100.0, b.hi * 100.0, b.count);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn key(i: usize) -> String {
        format!("18_{}_{}", (i % 1000) * 16, (i / 1000) * 16)
    }

    #[test]
    fn implied_counts() {
        assert_eq!(PoolSpec::new(1.0, 0.06).implied_count(), 389);
        assert_eq!(PoolSpec::new(100.0, 0.06).implied_count(), 38910);
        let mass = PoolSpec {
            baseline_pixels: 2.601e9,
            ..PoolSpec::new(1.0, 0.06)
        };
        assert_eq!(mass.implied_count(), 155);
    }

    #[test]
    fn uniform_pool_takes_first_keys() {
        let recs: Vec<_> = (0..1000)
            .rev()
            .map(|i| DensityRecord::new(format!("k{i:04}"), 0.06563))
            .collect();
        let sel = select_pool(&recs, &PoolSpec::new(1.0, 0.06563)).unwrap();
        let expect: Vec<String> = (0..389).map(|i| format!("k{i:04}")).collect();
        assert_eq!(sel.members, expect);
        assert_eq!(sel.achieved_mean, 0.06563);
        assert!(!sel.infeasible);
        assert_eq!(sel.achieved_pixels, 389 * 16_777_216);
    }

    fn brute_force_best(ds: &[f64], n: usize, target: f64) -> f64 {
        fn go(
            ds: &[f64],
            start: usize,
            left: usize,
            sum: f64,
            n: usize,
            target: f64,
            best: &mut f64,
        ) {
            if left == 0 {
                *best = best.min((sum / n as f64 - target).abs());
                return;
            }
            for i in start..=ds.len() - left {
                go(ds, i + 1, left - 1, sum + ds[i], n, target, best);
            }
        }
        let mut best = f64::INFINITY;
        go(ds, 0, n, 0.0, n, target, &mut best);
        best
    }

    #[test]
    fn bimodal_small_instance_vs_exhaustive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let recs: Vec<_> = (0..50)
            .map(|i| {
                let base = if i % 2 == 0 { 0.02 } else { 0.10 };
                DensityRecord::new(key(i), base + rng.random_range(-0.002..0.002))
            })
            .collect();
        // 4 frames
        let spec = PoolSpec {
            baseline_pixels: 4.0 * 16_777_216.0,
            ..PoolSpec::new(1.0, 0.06)
        };
        let sel = select_pool(&recs, &spec).unwrap();
        assert_eq!(sel.members.len(), 4);
        let ds: Vec<f64> = recs.iter().map(|r| r.density).collect();
        let best = brute_force_best(&ds, 4, 0.06);
        let got = (sel.achieved_mean - 0.06).abs();
        assert!(best <= 0.0005);
        assert!(got <= 0.0005, "greedy miss {got}, exhaustive best {best}");
        let direct: f64 = recs
            .iter()
            .filter(|r| sel.members.contains(&r.key))
            .map(|r| r.density)
            .sum::<f64>()
            / 4.0;
        assert!((direct - sel.achieved_mean).abs() < 1e-15);
    }

    #[test]
    fn bimodal_large_pool_hits_tolerance() {
        let recs: Vec<_> = (0..4000)
            .map(|i| DensityRecord::new(key(i), if i % 2 == 0 { 0.02 } else { 0.10 }))
            .collect();
        let sel = select_pool(&recs, &PoolSpec::new(1.0, 0.06)).unwrap();
        assert_eq!(sel.members.len(), 389);
        assert!((sel.achieved_mean - 0.06).abs() * 100.0 <= 0.05);
        assert!(!sel.infeasible);
    }

    #[test]
    fn input_order_is_irrelevant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut recs: Vec<_> = (0..3000)
            .map(|i| DensityRecord::new(key(i), rng.random_range(0.0..0.15)))
            .collect();
        let spec = PoolSpec::new(2.0, 0.05);
        let a = select_pool(&recs, &spec).unwrap();
        recs.shuffle(&mut rng);
        let b = select_pool(&recs, &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn infeasible_when_short() {
        let recs: Vec<_> = (0..10).map(|i| DensityRecord::new(key(i), 0.01)).collect();
        let sel = select_pool(&recs, &PoolSpec::new(1.0, 0.06)).unwrap();
        assert!(sel.infeasible);
        assert_eq!(sel.members.len(), 10);
        assert_eq!(sel.diagnostics.len(), 2);
    }

    #[test]
    fn min_density_filter() {
        let recs: Vec<_> = (0..800)
            .map(|i| DensityRecord::new(key(i), if i < 400 { 0.0 } else { 0.05 }))
            .collect();
        let spec = PoolSpec {
            min_density: 0.001,
            ..PoolSpec::new(1.0, 0.0)
        };
        let sel = select_pool(&recs, &spec).unwrap();
        assert_eq!(sel.min_density, 0.05);
    }

    #[test]
    fn report_rows() {
        let empty = PoolSelection {
            spec: PoolSpec::default(),
            members: vec![],
            achieved_mean: 0.0,
            achieved_pixels: 0,
            min_density: 0.0,
            max_density: 0.0,
            infeasible: true,
            diagnostics: vec![],
        };
        assert_eq!(pool_report(&empty), PoolReport::default());
        let recs: Vec<_> = (0..500)
            .map(|i| DensityRecord::new(key(i), 0.06563))
            .collect();
        let r = pool_report(&select_pool(&recs, &PoolSpec::default()).unwrap());
        assert_eq!(r.pixels, 6_526_337_024);
        assert!(r.csv_row().starts_with("389,6.5263e9,6.5630"));
    }

    #[test]
    fn histogram_cases() {
        let zeros = vec![DensityRecord::new("a", 0.0), DensityRecord::new("b", 0.0)];
        let h = density_histogram(&zeros, 0.25).unwrap();
        assert_eq!(h.len(), 1);
        assert_eq!(h[0].count, 2);

        let two = vec![DensityRecord::new("a", 0.04), DensityRecord::new("b", 0.06)];
        let h = density_histogram(&two, 1.0).unwrap();
        let populated: Vec<_> = h.iter().filter(|b| b.count > 0).collect();
        assert_eq!(populated.len(), 2);
        assert!(populated.iter().all(|b| b.count == 1));
        assert!(populated[0].lo <= 0.04 && 0.04 < populated[0].hi);
        assert!(histogram_table(&h).starts_with("lo_pct,hi_pct,count\n0.0000,1.0000,0\n"));
    }

    #[test]
    fn histogram_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let recs: Vec<_> = (0..10_000)
            .map(|i| {
                let d = if i % 10 == 0 {
                    // exact bin edges
                    (rng.random_range(0..40) as f64) * 0.0025
                } else {
                    rng.random_range(0.0..0.12)
                };
                DensityRecord::new(key(i), d)
            })
            .collect();
        let h = density_histogram(&recs, 0.25).unwrap();
        for b in &h {
            let n = recs
                .iter()
                .filter(|r| b.lo <= r.density && r.density < b.hi)
                .count() as u64;
            assert_eq!(n, b.count);
        }
        assert_eq!(h.iter().map(|b| b.count).sum::<u64>(), 10_000);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(density_histogram(&[], 0.0).is_err());
        assert!(select_pool(&[DensityRecord::new("a", 1.5)], &PoolSpec::default()).is_err());
        assert!(select_pool(&[], &PoolSpec::new(0.0, 0.06)).is_err());
    }
}
