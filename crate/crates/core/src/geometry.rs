//! Differentiable stacked-disk (Simpson) volume surrogate.
//!
//! A [`ChordSet`] lists `L` chords from apex (index 0) to the mitral annulus
//! (index `L-1`). Every chord after the first becomes one disk: its diameter is
//! the chord length and its height is the perpendicular distance from the
//! previous chord's midpoint to the current chord's line. The geometric losses
//! compare predicted and reference chord sets, and their gradients with respect
//! to every predicted coordinate are derived by hand below.
//!
//! All quantities are in pixel units of the image grid; volumes are pixel³.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chord {
    pub p1: Point,
    pub p2: Point,
}

impl Chord {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            p1: Point::new(x1, y1),
            p2: Point::new(x2, y2),
        }
    }

    pub fn from_coords(c: [f64; 4]) -> Self {
        Self::new(c[0], c[1], c[2], c[3])
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.p1.x, self.p1.y, self.p2.x, self.p2.y]
    }

    fn check(&self) -> Result<()> {
        if self.p1.is_finite() && self.p2.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidCoordinate(format!("{:?}", self.coords())))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Ed,
    Es,
}

impl Phase {
    pub fn index(self) -> usize {
        match self {
            Phase::Ed => 0,
            Phase::Es => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChordSet {
    pub phase: Phase,
    pub chords: Vec<Chord>,
}

impl ChordSet {
    pub fn new(phase: Phase, chords: Vec<Chord>) -> Self {
        Self { phase, chords }
    }

    /// Builds a set from a flat `[x1, y1, x2, y2, ...]` slice.
    pub fn from_flat(phase: Phase, flat: &[f64]) -> Result<Self> {
        if !flat.len().is_multiple_of(4) {
            return Err(Error::ShapeMismatch(format!(
                "flat chord buffer of length {} is not a multiple of 4",
                flat.len()
            )));
        }
        let chords = flat
            .chunks_exact(4)
            .map(|c| Chord::new(c[0], c[1], c[2], c[3]))
            .collect();
        Ok(Self { phase, chords })
    }

    pub fn flat(&self) -> Vec<f64> {
        self.chords.iter().flat_map(|c| c.coords()).collect()
    }

    pub fn len(&self) -> usize {
        self.chords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chords.is_empty()
    }
}

/// Disks built from levels `2..=L`; every vector has `L - 1` entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiskGeometry {
    pub diameters: Vec<f64>,
    pub heights: Vec<f64>,
    pub disk_volumes: Vec<f64>,
    pub total_volume: f64,
}

/// Partial derivatives of a scalar with respect to each chord's `(x1, y1, x2, y2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeoGradient {
    pub d_coords: Vec<[f64; 4]>,
}

impl GeoGradient {
    fn zeros(len: usize) -> Self {
        Self {
            d_coords: vec![[0.0; 4]; len],
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.d_coords.iter().flatten().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.d_coords.iter().flatten().all(|v| v.is_finite())
    }
}

pub fn chord_diameter(chord: &Chord) -> Result<f64> {
    chord.check()?;
    Ok(diameter(chord))
}

pub fn chord_center(chord: &Chord) -> Result<Point> {
    chord.check()?;
    Ok(center(chord))
}

/// Distance from `point` to the infinite line through `line_chord`. A chord
/// with coincident endpoints degrades to the point-to-point distance.
pub fn point_line_distance(point: &Point, line_chord: &Chord) -> Result<f64> {
    if !point.is_finite() {
        return Err(Error::InvalidCoordinate(format!("{point:?}")));
    }
    line_chord.check()?;
    Ok(line_distance(point, line_chord))
}

pub fn simpson_geometry(chords: &ChordSet) -> Result<DiskGeometry> {
    if chords.len() < 2 {
        return Err(Error::InsufficientChords {
            needed: 2,
            got: chords.len(),
        });
    }
    for c in &chords.chords {
        c.check()?;
    }
    Ok(disks(&chords.chords))
}

/// Geometric EF in percent: `(V_ed - V_es) / V_ed * 100`.
pub fn ef_surrogate(ed: &DiskGeometry, es: &DiskGeometry) -> Result<f64> {
    if !(ed.total_volume > 0.0) {
        return Err(Error::DegenerateVolume(ed.total_volume));
    }
    Ok((ed.total_volume - es.total_volume) / ed.total_volume * 100.0)
}

fn diameter(c: &Chord) -> f64 {
    (c.p1.x - c.p2.x).hypot(c.p1.y - c.p2.y)
}

fn center(c: &Chord) -> Point {
    Point::new(0.5 * (c.p1.x + c.p2.x), 0.5 * (c.p1.y + c.p2.y))
}

fn line_distance(p: &Point, c: &Chord) -> f64 {
    let dx = c.p2.x - c.p1.x;
    let dy = c.p2.y - c.p1.y;
    let len = dx.hypot(dy);
    if len == 0.0 {
        return (p.x - c.p1.x).hypot(p.y - c.p1.y);
    }
    let cross = dx * (p.y - c.p1.y) - dy * (p.x - c.p1.x);
    cross.abs() / len
}

fn disks(chords: &[Chord]) -> DiskGeometry {
    let n = chords.len() - 1;
    let mut diameters = Vec::with_capacity(n);
    let mut heights = Vec::with_capacity(n);
    let mut disk_volumes = Vec::with_capacity(n);
    for pair in chords.windows(2) {
        let b = diameter(&pair[1]);
        let h = line_distance(&center(&pair[0]), &pair[1]);
        diameters.push(b);
        heights.push(h);
        disk_volumes.push(PI * (0.5 * b) * (0.5 * b) * h);
    }
    let total_volume = disk_volumes.iter().sum();
    DiskGeometry {
        diameters,
        heights,
        disk_volumes,
        total_volume,
    }
}

/// d(diameter)/d(x1, y1, x2, y2); zero for a zero-length chord.
fn diameter_grad(c: &Chord) -> [f64; 4] {
    let dx = c.p1.x - c.p2.x;
    let dy = c.p1.y - c.p2.y;
    let len = dx.hypot(dy);
    if len == 0.0 {
        return [0.0; 4];
    }
    let (gx, gy) = (dx / len, dy / len);
    [gx, gy, -gx, -gy]
}

/// Gradient of `line_distance(center(prev), cur)` with respect to the
/// coordinates of `prev` and `cur`.
fn height_grad(prev: &Chord, cur: &Chord) -> ([f64; 4], [f64; 4]) {
    let c = center(prev);
    let dx = cur.p2.x - cur.p1.x;
    let dy = cur.p2.y - cur.p1.y;
    let len = dx.hypot(dy);
    // d/d(center), d/d(p1), d/d(p2)
    let (gc, g1, g2);
    if len == 0.0 {
        let mx = 0.5 * (cur.p1.x + cur.p2.x);
        let my = 0.5 * (cur.p1.y + cur.p2.y);
        let (ux, uy) = (c.x - mx, c.y - my);
        let dist = ux.hypot(uy);
        if dist == 0.0 {
            return ([0.0; 4], [0.0; 4]);
        }
        let (ux, uy) = (ux / dist, uy / dist);
        gc = (ux, uy);
        g1 = (-0.5 * ux, -0.5 * uy);
        g2 = (-0.5 * ux, -0.5 * uy);
    } else {
        let (rx, ry) = (c.x - cur.p1.x, c.y - cur.p1.y);
        let cross = dx * ry - dy * rx;
        // Subgradient 0 of |cross| on the line itself.
        let sign = if cross > 0.0 {
            1.0
        } else if cross < 0.0 {
            -1.0
        } else {
            0.0
        };
        let inv = 1.0 / len;
        let dist = cross.abs() * inv;
        // d/dr and d/dd of |cross| / |d|
        let gr = (-sign * dy * inv, sign * dx * inv);
        let gd = (
            sign * ry * inv - dist * dx * inv * inv,
            -sign * rx * inv - dist * dy * inv * inv,
        );
        gc = gr;
        g1 = (-gr.0 - gd.0, -gr.1 - gd.1);
        g2 = gd;
    }
    (
        [0.5 * gc.0, 0.5 * gc.1, 0.5 * gc.0, 0.5 * gc.1],
        [g1.0, g1.1, g2.0, g2.1],
    )
}

/// One sample's predicted and reference chord sets for both phases.
#[derive(Clone, Copy, Debug)]
pub struct ChordSample<'a> {
    pub pred_ed: &'a ChordSet,
    pub pred_es: &'a ChordSet,
    pub gt_ed: &'a ChordSet,
    pub gt_es: &'a ChordSet,
}

impl<'a> ChordSample<'a> {
    pub fn new(
        pred_ed: &'a ChordSet,
        pred_es: &'a ChordSet,
        gt_ed: &'a ChordSet,
        gt_es: &'a ChordSet,
    ) -> Self {
        Self {
            pred_ed,
            pred_es,
            gt_ed,
            gt_es,
        }
    }

    fn pairs(&self) -> [(&'a ChordSet, &'a ChordSet); 2] {
        [(self.pred_ed, self.gt_ed), (self.pred_es, self.gt_es)]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GeoLosses {
    pub l_pts: f64,
    pub l_b: f64,
    pub l_db: f64,
    pub l_h: f64,
    pub l_geo: f64,
}

/// Gradients of `l_geo` for one sample's predicted ED and ES chord sets.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleGradient {
    pub ed: GeoGradient,
    pub es: GeoGradient,
}

fn validate_batch(batch: &[ChordSample<'_>]) -> Result<usize> {
    let first = batch
        .first()
        .ok_or_else(|| Error::ShapeMismatch("empty chord batch".into()))?;
    let l = first.pred_ed.len();
    for s in batch {
        for set in [s.pred_ed, s.pred_es, s.gt_ed, s.gt_es] {
            if set.len() != l {
                return Err(Error::ShapeMismatch(format!(
                    "chord sets of length {} and {} in one batch",
                    l,
                    set.len()
                )));
            }
            for c in &set.chords {
                c.check()?;
            }
        }
    }
    if l < 3 {
        return Err(Error::InsufficientChords { needed: 3, got: l });
    }
    Ok(l)
}

pub fn geometric_losses(batch: &[ChordSample<'_>]) -> Result<GeoLosses> {
    Ok(evaluate(batch, false)?.0)
}

/// Losses plus the exact gradient of `l_geo` with respect to every predicted
/// coordinate.
pub fn geometric_losses_gradient(
    batch: &[ChordSample<'_>],
) -> Result<(GeoLosses, Vec<SampleGradient>)> {
    evaluate(batch, true)
}

fn evaluate(
    batch: &[ChordSample<'_>],
    with_grad: bool,
) -> Result<(GeoLosses, Vec<SampleGradient>)> {
    let l = validate_batch(batch)?;
    let n = batch.len() as f64;
    // Per-coordinate mean for the point term; batch mean for the others.
    let pts_norm = n * (2 * l * 4) as f64;
    let mut losses = GeoLosses::default();
    let mut grads = Vec::with_capacity(if with_grad { batch.len() } else { 0 });

    for sample in batch {
        let mut phase_grads = [GeoGradient::zeros(l), GeoGradient::zeros(l)];
        for (phase, (pred, gt)) in sample.pairs().into_iter().enumerate() {
            let pd = disks(&pred.chords);
            let rf = disks(&gt.chords);

            let mut pts = 0.0;
            for (cp, cg) in pred.chords.iter().zip(&gt.chords) {
                for (a, b) in cp.coords().iter().zip(cg.coords()) {
                    pts += (a - b) * (a - b);
                }
            }
            losses.l_pts += pts / pts_norm;

            // Index k refers to level k + 2 (disks start at the second chord).
            let eb: Vec<f64> = pd
                .diameters
                .iter()
                .zip(&rf.diameters)
                .map(|(a, b)| a - b)
                .collect();
            let eh: Vec<f64> = pd
                .heights
                .iter()
                .zip(&rf.heights)
                .map(|(a, b)| a - b)
                .collect();
            // Taper term over levels 2..L-1: (B_{i+1} - B_i) differences.
            let ed: Vec<f64> = eb.windows(2).map(|w| w[1] - w[0]).collect();

            losses.l_b += eb.iter().map(|e| e * e).sum::<f64>() / n;
            losses.l_db += ed.iter().map(|e| e * e).sum::<f64>() / n;
            losses.l_h += eh.iter().map(|e| e * e).sum::<f64>() / n;

            if !with_grad {
                continue;
            }
            let g = &mut phase_grads[phase].d_coords;
            for (i, (cp, cg)) in pred.chords.iter().zip(&gt.chords).enumerate() {
                let (a, b) = (cp.coords(), cg.coords());
                for j in 0..4 {
                    g[i][j] += 2.0 * (a[j] - b[j]) / pts_norm;
                }
            }
            let mut d_b: Vec<f64> = eb.iter().map(|e| 2.0 * e / n).collect();
            for (k, e) in ed.iter().enumerate() {
                d_b[k + 1] += 2.0 * e / n;
                d_b[k] -= 2.0 * e / n;
            }
            for (k, db) in d_b.iter().enumerate() {
                let gb = diameter_grad(&pred.chords[k + 1]);
                for j in 0..4 {
                    g[k + 1][j] += db * gb[j];
                }
            }
            for (k, e) in eh.iter().enumerate() {
                let dh = 2.0 * e / n;
                let (gp, gc) = height_grad(&pred.chords[k], &pred.chords[k + 1]);
                for j in 0..4 {
                    g[k][j] += dh * gp[j];
                    g[k + 1][j] += dh * gc[j];
                }
            }
        }
        if with_grad {
            let [ed, es] = phase_grads;
            grads.push(SampleGradient { ed, es });
        }
    }
    losses.l_geo = losses.l_pts + losses.l_b + losses.l_db + losses.l_h;
    Ok((losses, grads))
}
