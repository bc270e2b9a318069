//! Undersampling masks.
//!
//! 1D kinds select whole phase-encode columns (the readout direction, rows,
//! is always fully sampled). 2D kinds select individual cells. All kinds keep
//! a centered, fully sampled calibration (ACS) region.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    Gaussian1d,
    Gaussian2d,
    Poisson2d,
    Random1d,
    Full,
}

impl MaskKind {
    pub fn is_1d(self) -> bool {
        matches!(self, MaskKind::Gaussian1d | MaskKind::Random1d)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MaskKind::Gaussian1d => "gaussian1d",
            MaskKind::Gaussian2d => "gaussian2d",
            MaskKind::Poisson2d => "poisson2d",
            MaskKind::Random1d => "random1d",
            MaskKind::Full => "full",
        }
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian1d" => Ok(MaskKind::Gaussian1d),
            "gaussian2d" => Ok(MaskKind::Gaussian2d),
            "poisson2d" => Ok(MaskKind::Poisson2d),
            "random1d" => Ok(MaskKind::Random1d),
            "full" => Ok(MaskKind::Full),
            other => Err(Error::Parameter(format!("unknown mask kind '{other}'"))),
        }
    }
}

/// A binary sampling pattern with provenance metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    height: usize,
    width: usize,
    cells: Vec<bool>,
    kind: MaskKind,
    requested_af: f64,
    acs_lines: usize,
}

impl SamplingMask {
    pub fn full(height: usize, width: usize) -> Self {
        SamplingMask {
            height,
            width,
            cells: vec![true; height * width],
            kind: MaskKind::Full,
            requested_af: 1.0,
            acs_lines: 0,
        }
    }

    /// Builds a mask from explicit cells; at least one must be set.
    pub fn from_cells(height: usize, width: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != height * width || height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!(
                "mask of {} cells does not match {height}x{width}",
                cells.len()
            )));
        }
        if !cells.iter().any(|&c| c) {
            return Err(Error::InvalidInput("mask samples no cells".into()));
        }
        Ok(Self::from_cells_unchecked(height, width, cells))
    }

    /// Like [`SamplingMask::from_cells`] but accepts an empty pattern.
    pub fn from_cells_unchecked(height: usize, width: usize, cells: Vec<bool>) -> Self {
        let sampled = cells.iter().filter(|&&c| c).count().max(1);
        SamplingMask {
            height,
            width,
            requested_af: (height * width) as f64 / sampled as f64,
            cells,
            kind: MaskKind::Full,
            acs_lines: 0,
        }
    }

    pub fn with_meta(mut self, kind: MaskKind, requested_af: f64, acs_lines: usize) -> Self {
        self.kind = kind;
        self.requested_af = requested_af;
        self.acs_lines = acs_lines;
        self
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.width + col]
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn requested_af(&self) -> f64 {
        self.requested_af
    }

    pub fn acs_lines(&self) -> usize {
        self.acs_lines
    }

    pub fn sampled_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    /// Whether every column is uniformly sampled or uniformly skipped.
    pub fn is_column_constant(&self) -> bool {
        (0..self.width).all(|c| {
            let first = self.get(0, c);
            (1..self.height).all(|r| self.get(r, c) == first)
        })
    }

    pub fn sampled_columns(&self) -> Vec<usize> {
        (0..self.width).filter(|&c| self.get(0, c)).collect()
    }
}

/// Total cells divided by sampled cells.
pub fn realized_af(mask: &SamplingMask) -> Result<f64> {
    let sampled = mask.sampled_count();
    if sampled == 0 {
        return Err(Error::InvalidInput("mask samples no cells".into()));
    }
    Ok(mask.cells.len() as f64 / sampled as f64)
}

/// Parameters for [`make_mask`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub kind: MaskKind,
    pub af: f64,
    /// ACS lines for 1D kinds, ACS radius in cells for 2D kinds.
    pub acs: usize,
    /// Gaussian density width as a fraction of the half extent.
    #[serde(default = "default_sigma_frac")]
    pub sigma_frac: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_sigma_frac() -> f64 {
    0.25
}

impl MaskSpec {
    pub fn new(kind: MaskKind, af: f64, acs: usize, seed: u64) -> Self {
        MaskSpec {
            kind,
            af,
            acs,
            sigma_frac: default_sigma_frac(),
            seed,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        MaskSpec { seed, ..self }
    }

    fn acs_cells(&self, height: usize, width: usize) -> usize {
        if self.kind.is_1d() {
            self.acs.min(width) * height
        } else {
            acs_disk(height, width, self.acs).len()
        }
    }

    /// Checks the spec against a target grid.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if height == 0 || width == 0 {
            return Err(Error::Parameter("mask dimensions must be positive".into()));
        }
        if self.kind == MaskKind::Full {
            return Ok(());
        }
        if !(self.af > 1.0 && self.af.is_finite()) {
            return Err(Error::Parameter(format!(
                "acceleration factor must exceed 1, got {}",
                self.af
            )));
        }
        if !(self.sigma_frac > 0.0 && self.sigma_frac <= 1.0) {
            return Err(Error::Parameter(format!(
                "sigma_frac must lie in (0, 1], got {}",
                self.sigma_frac
            )));
        }
        let (total, acs) = if self.kind.is_1d() {
            (width, self.acs)
        } else {
            (height * width, self.acs_cells(height, width))
        };
        if self.kind.is_1d() && self.acs > width {
            return Err(Error::Parameter(format!(
                "{} ACS lines exceed width {width}",
                self.acs
            )));
        }
        let max_af = total as f64 / (acs + 1) as f64;
        if self.af > max_af {
            return Err(Error::Parameter(format!(
                "acceleration {} unachievable: at most {max_af:.3} with this ACS",
                self.af
            )));
        }
        Ok(())
    }
}

fn centered_range(n: usize, len: usize) -> std::ops::Range<usize> {
    let len = len.min(n);
    let start = n / 2 - len / 2;
    start..start + len
}

/// Cells within `radius` of the k-space center.
fn acs_disk(height: usize, width: usize, radius: usize) -> Vec<usize> {
    if radius == 0 {
        return Vec::new();
    }
    let (cr, cc) = ((height / 2) as f64, (width / 2) as f64);
    let r2 = (radius as f64).powi(2);
    let mut out = Vec::new();
    for r in 0..height {
        for c in 0..width {
            if (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2) <= r2 {
                out.push(r * width + c);
            }
        }
    }
    out
}

/// Weighted sampling without replacement (Efraimidis-Spirakis keys).
/// Ties fall to the random keys, never to the candidate order.
fn weighted_choice(
    candidates: &[usize],
    weights: &[f64],
    count: usize,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = candidates
        .iter()
        .zip(weights)
        .map(|(&c, &w)| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            (u.ln() / w.max(1e-300), c)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0));
    keyed.into_iter().take(count).map(|(_, c)| c).collect()
}

fn gaussian_weight(d2: f64, sigma: f64) -> f64 {
    (-d2 / (2.0 * sigma * sigma)).exp()
}

fn make_1d(spec: &MaskSpec, height: usize, width: usize, rng: &mut impl Rng) -> Vec<bool> {
    let target = ((width as f64 / spec.af).round() as usize).clamp(spec.acs.max(1), width);
    let acs = centered_range(width, spec.acs);
    let center = (width / 2) as f64;
    let sigma = spec.sigma_frac * width as f64 / 2.0;
    let candidates: Vec<usize> = (0..width).filter(|c| !acs.contains(c)).collect();
    let weights: Vec<f64> = candidates
        .iter()
        .map(|&c| match spec.kind {
            MaskKind::Gaussian1d => gaussian_weight((c as f64 - center).powi(2), sigma),
            _ => 1.0,
        })
        .collect();
    let mut columns = vec![false; width];
    for c in acs.clone() {
        columns[c] = true;
    }
    for c in weighted_choice(&candidates, &weights, target - acs.len(), rng) {
        columns[c] = true;
    }
    (0..height * width).map(|i| columns[i % width]).collect()
}

fn make_gaussian_2d(spec: &MaskSpec, height: usize, width: usize, rng: &mut impl Rng) -> Vec<bool> {
    let total = height * width;
    let target = ((total as f64 / spec.af).round() as usize).max(1);
    let acs = acs_disk(height, width, spec.acs);
    let mut cells = vec![false; total];
    for &i in &acs {
        cells[i] = true;
    }
    let (cr, cc) = ((height / 2) as f64, (width / 2) as f64);
    let (sr, sc) = (
        spec.sigma_frac * height as f64 / 2.0,
        spec.sigma_frac * width as f64 / 2.0,
    );
    let candidates: Vec<usize> = (0..total).filter(|&i| !cells[i]).collect();
    let weights: Vec<f64> = candidates
        .iter()
        .map(|&i| {
            let (r, c) = ((i / width) as f64, (i % width) as f64);
            (-((r - cr) / sr).powi(2) / 2.0 - ((c - cc) / sc).powi(2) / 2.0).exp()
        })
        .collect();
    for i in weighted_choice(&candidates, &weights, target.saturating_sub(acs.len()), rng) {
        cells[i] = true;
    }
    cells
}

/// Local Poisson-disc radius: grows linearly from `scale` at the center to
/// `scale * (1 + POISSON_GROWTH)` at the corners.
const POISSON_GROWTH: f64 = 2.0;

struct PoissonGeometry {
    height: usize,
    width: usize,
    center: (f64, f64),
    max_dist: f64,
    /// Per-cell radius multiplier, `1 + POISSON_GROWTH * d / max_dist`.
    factor: Vec<f64>,
}

impl PoissonGeometry {
    fn new(height: usize, width: usize) -> Self {
        let center = ((height / 2) as f64, (width / 2) as f64);
        let max_dist = center
            .0
            .max(height as f64 - 1.0 - center.0)
            .hypot(center.1.max(width as f64 - 1.0 - center.1))
            .max(1.0);
        let factor = (0..height * width)
            .map(|i| {
                let d = ((i / width) as f64 - center.0).hypot((i % width) as f64 - center.1);
                1.0 + POISSON_GROWTH * d / max_dist
            })
            .collect();
        PoissonGeometry {
            height,
            width,
            center,
            max_dist,
            factor,
        }
    }

    fn radius(&self, scale: f64, r: usize, c: usize) -> f64 {
        let d = (r as f64 - self.center.0).hypot(c as f64 - self.center.1);
        scale * (1.0 + POISSON_GROWTH * d / self.max_dist)
    }
}

/// Dart throwing over a fixed candidate order. A candidate is kept when every
/// kept non-ACS sample lies closer than `max(r(candidate), r(sample))` to none.
/// Kept darts live in buckets no smaller than the largest radius, so only the
/// 3x3 neighbouring buckets can conflict.
fn poisson_throw(geo: &PoissonGeometry, scale: f64, order: &[usize], acs: &[bool]) -> Vec<bool> {
    let (h, w) = (geo.height, geo.width);
    let bucket = (scale * (1.0 + POISSON_GROWTH)).ceil().max(1.0) as usize;
    let (nbr, nbc) = (h.div_ceil(bucket), w.div_ceil(bucket));
    let mut buckets: Vec<Vec<u32>> = vec![Vec::new(); nbr * nbc];
    let mut darts = vec![false; h * w];
    for &i in order {
        if acs[i] {
            continue;
        }
        let (r, c) = (i / w, i % w);
        let rc = scale * geo.factor[i];
        let (br, bc) = (r / bucket, c / bucket);
        let mut ok = true;
        'search: for qr in br.saturating_sub(1)..=(br + 1).min(nbr - 1) {
            for qc in bc.saturating_sub(1)..=(bc + 1).min(nbc - 1) {
                for &j in &buckets[qr * nbc + qc] {
                    let j = j as usize;
                    let dr = (j / w) as f64 - r as f64;
                    let dc = (j % w) as f64 - c as f64;
                    let m = rc.max(scale * geo.factor[j]);
                    if dr * dr + dc * dc < m * m {
                        ok = false;
                        break 'search;
                    }
                }
            }
        }
        if ok {
            darts[i] = true;
            buckets[br * nbc + bc].push(i as u32);
        }
    }
    darts
}

/// Returns the cells and the radius scale that produced them.
fn make_poisson_2d(
    spec: &MaskSpec,
    height: usize,
    width: usize,
    rng: &mut impl Rng,
) -> (Vec<bool>, f64) {
    let total = height * width;
    let target = total as f64 / spec.af;
    let mut acs = vec![false; total];
    for i in acs_disk(height, width, spec.acs) {
        acs[i] = true;
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(rng);
    let geo = PoissonGeometry::new(height, width);
    let merge = |darts: Vec<bool>| -> Vec<bool> {
        darts.iter().zip(&acs).map(|(&d, &a)| d || a).collect()
    };
    // Sample count decreases with the radius scale; bisect on it.
    let (mut lo, mut hi) = (0.05_f64, (total as f64).sqrt());
    let mut best = (merge(poisson_throw(&geo, lo, &order, &acs)), lo);
    let mut best_err = f64::INFINITY;
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let cells = merge(poisson_throw(&geo, mid, &order, &acs));
        let n = cells.iter().filter(|&&x| x).count() as f64;
        let err = (n - target).abs();
        if err < best_err {
            best_err = err;
            best = (cells, mid);
        }
        if err <= 0.01 * target || hi - lo < 1e-4 {
            break;
        }
        if n > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    best
}

/// Generates a mask for a `height x width` grid. Deterministic in `spec.seed`.
pub fn make_mask(spec: &MaskSpec, height: usize, width: usize) -> Result<SamplingMask> {
    spec.validate(height, width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cells = match spec.kind {
        MaskKind::Full => return Ok(SamplingMask::full(height, width)),
        MaskKind::Gaussian1d | MaskKind::Random1d => make_1d(spec, height, width, &mut rng),
        MaskKind::Gaussian2d => make_gaussian_2d(spec, height, width, &mut rng),
        MaskKind::Poisson2d => make_poisson_2d(spec, height, width, &mut rng).0,
    };
    Ok(SamplingMask::from_cells(height, width, cells)?.with_meta(spec.kind, spec.af, spec.acs))
}

/// Minimum pairwise distance among non-ACS samples divided by the larger local
/// radius of each pair, for inspecting Poisson-disc masks.
pub fn poisson_spacing_ratio(mask: &SamplingMask, scale: f64) -> f64 {
    let (h, w) = mask.shape();
    let geo = PoissonGeometry::new(h, w);
    let acs: Vec<bool> = {
        let mut a = vec![false; h * w];
        for i in acs_disk(h, w, mask.acs_lines()) {
            a[i] = true;
        }
        a
    };
    let pts: Vec<(usize, usize)> = (0..h * w)
        .filter(|&i| mask.cells()[i] && !acs[i])
        .map(|i| (i / w, i % w))
        .collect();
    let mut worst = f64::INFINITY;
    for (a, &(r1, c1)) in pts.iter().enumerate() {
        for &(r2, c2) in &pts[a + 1..] {
            let d = (r1 as f64 - r2 as f64).hypot(c1 as f64 - c2 as f64);
            let rad = geo.radius(scale, r1, c1).max(geo.radius(scale, r2, c2));
            worst = worst.min(d / rad);
        }
    }
    worst
}

/// Radius scale chosen by the Poisson-disc generator for `spec`.
pub fn poisson_radius_scale(spec: &MaskSpec, height: usize, width: usize) -> Result<f64> {
    spec.validate(height, width)?;
    if spec.kind != MaskKind::Poisson2d {
        return Err(Error::Parameter(format!("{} mask has no disc radius", spec.kind)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(make_poisson_2d(spec, height, width, &mut rng).1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian1d_paper_configuration() {
        let spec = MaskSpec::new(MaskKind::Gaussian1d, 8.0, 12, 7);
        let m = make_mask(&spec, 320, 320).unwrap();
        let cols = m.sampled_columns();
        assert_eq!(cols.len(), 40);
        for c in 154..166 {
            assert!(cols.contains(&c), "ACS column {c} missing");
        }
        assert!(m.is_column_constant());
        assert_eq!(realized_af(&m).unwrap(), 8.0);
    }

    #[test]
    fn random1d_half() {
        let m = make_mask(&MaskSpec::new(MaskKind::Random1d, 2.0, 0, 3), 4, 4).unwrap();
        assert_eq!(m.sampled_columns().len(), 2);
        assert_eq!(realized_af(&m).unwrap(), 2.0);
    }

    #[test]
    fn realized_af_basics() {
        assert_eq!(realized_af(&SamplingMask::full(5, 5)).unwrap(), 1.0);
        let half: Vec<bool> = (0..16).map(|i| i % 4 < 2).collect();
        let m = SamplingMask::from_cells(4, 4, half).unwrap();
        assert_eq!(realized_af(&m).unwrap(), 2.0);
        let empty = SamplingMask::from_cells_unchecked(2, 2, vec![false; 4]);
        assert!(realized_af(&empty).is_err());
        assert!(SamplingMask::from_cells(2, 2, vec![false; 4]).is_err());
    }

    #[test]
    fn poisson_hits_target_and_spacing() {
        let spec = MaskSpec::new(MaskKind::Poisson2d, 15.0, 8, 5);
        let m = make_mask(&spec, 320, 320).unwrap();
        let expected = 320.0 * 320.0 / 15.0;
        let n = m.sampled_count() as f64;
        assert!((n - expected).abs() <= 0.1 * expected, "count {n}");
        let scale = poisson_radius_scale(&spec, 320, 320).unwrap();
        assert!(poisson_spacing_ratio(&m, scale) >= 1.0 - 1e-9);
    }

    #[test]
    fn acs_always_sampled() {
        let m = make_mask(&MaskSpec::new(MaskKind::Gaussian2d, 6.0, 5, 1), 64, 64).unwrap();
        for i in acs_disk(64, 64, 5) {
            assert!(m.cells()[i]);
        }
        let m = make_mask(&MaskSpec::new(MaskKind::Random1d, 4.0, 6, 1), 32, 32).unwrap();
        for c in 13..19 {
            assert!(m.get(0, c) && m.get(31, c));
        }
    }

    #[test]
    fn unachievable_af_is_rejected() {
        let spec = MaskSpec::new(MaskKind::Gaussian1d, 8.0, 12, 0);
        assert!(matches!(make_mask(&spec, 64, 64), Err(Error::Parameter(_))));
        let spec = MaskSpec::new(MaskKind::Random1d, 0.5, 0, 0);
        assert!(make_mask(&spec, 16, 16).is_err());
    }

    #[test]
    fn deterministic_in_seed() {
        for kind in [
            MaskKind::Gaussian1d,
            MaskKind::Gaussian2d,
            MaskKind::Poisson2d,
            MaskKind::Random1d,
        ] {
            let spec = MaskSpec::new(kind, 4.0, 4, 99);
            assert_eq!(
                make_mask(&spec, 48, 48).unwrap(),
                make_mask(&spec, 48, 48).unwrap()
            );
            assert_ne!(
                make_mask(&spec, 48, 48).unwrap().cells(),
                make_mask(&spec.with_seed(100), 48, 48).unwrap().cells()
            );
        }
    }

    #[test]
    fn gaussian1d_density_decays_with_distance() {
        let w = 64;
        let mut freq = vec![0usize; w];
        for seed in 0..200 {
            let m = make_mask(&MaskSpec::new(MaskKind::Gaussian1d, 4.0, 4, seed), 8, w).unwrap();
            for c in m.sampled_columns() {
                freq[c] += 1;
            }
        }
        // Bin by distance from the center, outside the ACS block.
        let center = w / 2;
        let mut by_dist = vec![0.0; w / 2];
        let mut counts = vec![0.0; w / 2];
        for (c, &f) in freq.iter().enumerate() {
            let d = (c as isize - center as isize).unsigned_abs();
            if d >= 3 && d < w / 2 {
                by_dist[d] += f as f64;
                counts[d] += 1.0;
            }
        }
        let mean: Vec<f64> = (3..w / 2).map(|d| by_dist[d] / counts[d]).collect();
        // Compare coarse bands to absorb sampling noise.
        let band = |lo: usize, hi: usize| mean[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
        let bands = [band(0, 7), band(7, 14), band(14, 21), band(21, 29)];
        for pair in bands.windows(2) {
            assert!(pair[0] >= pair[1], "{bands:?}");
        }
    }
}
