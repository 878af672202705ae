//! Structured planar BV deformations and Radon bending measures.
//!
//! A scene is a rectangle `ω` partitioned into convex polygonal regions, each
//! carrying an affine map `u(x) = M x + c`, plus straight jump segments and an
//! optional horizontal devil's staircase `u_c(x) = a·cantor(x₂)` spanning the
//! full width of `ω`. Bending measures are kept as symbolic parts (area
//! densities per region, line densities on segments, atoms, a Cantor part) so
//! that the carrier of every part is known exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{CosseratVector, PlanarMatrix};

/// Geometric coincidence tolerance.
pub const GEOMETRY_TOL: f64 = 1e-9;
/// Near-misses closer than this (but farther than [`GEOMETRY_TOL`]) are ambiguous.
pub const NEAR_MISS: f64 = 1e-6;

pub type Point = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    /// Convex polygon, vertices in either orientation.
    pub polygon: Vec<Point>,
    pub gradient: PlanarMatrix,
    pub offset: CosseratVector,
}

impl Region {
    pub fn eval(&self, x: Point) -> CosseratVector {
        CosseratVector(self.gradient.apply(x)).add(&self.offset)
    }

    pub fn area(&self) -> f64 {
        polygon_area(&self.polygon).abs()
    }

    pub fn centroid(&self) -> Point {
        let n = self.polygon.len() as f64;
        let s = self.polygon.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0], a[1] + p[1]]);
        [s[0] / n, s[1] / n]
    }

    fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let n = self.polygon.len();
        (0..n).map(move |i| (self.polygon[i], self.polygon[(i + 1) % n]))
    }

    fn on_boundary(&self, p: Point) -> bool {
        self.edges().any(|(a, b)| point_segment_distance(p, a, b) <= GEOMETRY_TOL)
    }

    /// Closed containment test with tolerance.
    pub fn contains(&self, p: Point) -> bool {
        let sign = polygon_area(&self.polygon).signum();
        self.edges().all(|(a, b)| sign * cross(sub(b, a), sub(p, a)) >= -GEOMETRY_TOL * norm2(sub(b, a)))
    }
}

/// A straight piece of the jump set with its constant jump `u⁺ − u⁻` and the
/// unit normal pointing from the `minus` region into the `plus` region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpSegment {
    pub from: Point,
    pub to: Point,
    pub minus: usize,
    pub plus: usize,
    pub jump: CosseratVector,
    pub normal: [f64; 2],
}

impl JumpSegment {
    pub fn length(&self) -> f64 {
        norm2(sub(self.to, self.from))
    }
}

/// `u_c(x) = a·cantor((x₂ − y₀)/(y₁ − y₀))` across the full width of `ω`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Staircase {
    pub amplitude: CosseratVector,
    pub x2_range: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanarScene {
    /// `[x0, y0, x1, y1]`.
    pub domain: [f64; 4],
    pub regions: Vec<Region>,
    #[serde(default)]
    pub jumps: Vec<JumpSegment>,
    #[serde(default)]
    pub staircase: Option<Staircase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinePart {
    pub from: Point,
    pub to: Point,
    /// Density with respect to length.
    pub density: CosseratVector,
}

impl LinePart {
    pub fn length(&self) -> f64 {
        norm2(sub(self.to, self.from))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub at: Point,
    pub weight: CosseratVector,
}

/// `κ · (μ ⊗ ℋ¹)` where `μ` is the Cantor probability measure on `x2_range`
/// and `ℋ¹` is length along the full width of `ω`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CantorPart {
    pub density: CosseratVector,
    pub x2_range: [f64; 2],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BendingMeasure {
    /// Area density per region; empty means zero everywhere.
    #[serde(default)]
    pub ac: Vec<CosseratVector>,
    #[serde(default)]
    pub lines: Vec<LinePart>,
    #[serde(default)]
    pub atoms: Vec<Atom>,
    #[serde(default)]
    pub cantor: Option<CantorPart>,
}

/// A scene and its bending measure, as read from one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    #[serde(flatten)]
    pub scene: PlanarScene,
    #[serde(default)]
    pub measure: BendingMeasure,
}

impl SceneFile {
    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Scene and measure findings together.
    pub fn validate(&self) -> ValidationReport {
        let mut report = validate_scene(&self.scene);
        report.findings.extend(self.measure.validate(&self.scene).findings);
        report
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FindingKind {
    NonFinite,
    DegenerateDomain,
    DegenerateRegion,
    NonConvexRegion,
    RegionOutsideDomain,
    PartitionOverlap,
    PartitionGap,
    BadRegionIndex,
    DegenerateSegment,
    SegmentOffBoundary,
    NormalNotUnit,
    NormalOrientation,
    TraceMismatch,
    UndeclaredJump,
    StaircaseRange,
    MeasureShape,
    MeasureOutsideDomain,
    OverlappingLines,
}

impl FindingKind {
    pub fn label(self) -> &'static str {
        match self {
            FindingKind::NonFinite => "non-finite value",
            FindingKind::DegenerateDomain => "degenerate domain",
            FindingKind::DegenerateRegion => "degenerate region",
            FindingKind::NonConvexRegion => "non-convex region",
            FindingKind::RegionOutsideDomain => "region outside domain",
            FindingKind::PartitionOverlap => "partition overlap",
            FindingKind::PartitionGap => "partition gap",
            FindingKind::BadRegionIndex => "bad region index",
            FindingKind::DegenerateSegment => "degenerate segment",
            FindingKind::SegmentOffBoundary => "segment off region boundary",
            FindingKind::NormalNotUnit => "normal not unit",
            FindingKind::NormalOrientation => "normal orientation",
            FindingKind::TraceMismatch => "trace mismatch",
            FindingKind::UndeclaredJump => "undeclared jump",
            FindingKind::StaircaseRange => "staircase range",
            FindingKind::MeasureShape => "measure shape",
            FindingKind::MeasureOutsideDomain => "measure outside domain",
            FindingKind::OverlappingLines => "overlapping line parts",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub kind: FindingKind,
    pub message: String,
}

impl std::fmt::Display for Finding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.kind.label(), self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn has(&self, kind: FindingKind) -> bool {
        self.findings.iter().any(|f| f.kind == kind)
    }

    /// `Err(Error::Scene)` listing every finding, if any.
    pub fn into_result(self) -> Result<()> {
        if self.findings.is_empty() {
            Ok(())
        } else {
            Err(Error::Scene {
                findings: self.findings.iter().map(|f| f.to_string()).collect(),
            })
        }
    }

    fn push(&mut self, kind: FindingKind, message: String) {
        self.findings.push(Finding { kind, message });
    }
}

#[inline]
fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
fn cross(a: Point, b: Point) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

#[inline]
fn dot2(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
fn norm2(a: Point) -> f64 {
    a[0].hypot(a[1])
}

fn lerp(a: Point, b: Point, t: f64) -> Point {
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
}

/// Signed shoelace area.
fn polygon_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    (0..n).map(|i| cross(poly[i], poly[(i + 1) % n])).sum::<f64>() / 2.0
}

fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = sub(b, a);
    let len2 = dot2(ab, ab);
    let t = if len2 > 0.0 { (dot2(sub(p, a), ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    norm2(sub(p, lerp(a, b, t)))
}

/// Distance from `p` to the infinite line through `a`, `b`.
fn point_line_distance(p: Point, a: Point, b: Point) -> f64 {
    cross(sub(b, a), sub(p, a)).abs() / norm2(sub(b, a))
}

/// Parameter interval of `[c, d]` projected onto `[a, b]`, clipped to `[0, 1]`.
fn projected_overlap(a: Point, b: Point, c: Point, d: Point) -> Option<(f64, f64)> {
    let ab = sub(b, a);
    let len2 = dot2(ab, ab);
    let tc = dot2(sub(c, a), ab) / len2;
    let td = dot2(sub(d, a), ab) / len2;
    let (lo, hi) = (tc.min(td).max(0.0), tc.max(td).min(1.0));
    (hi > lo).then_some((lo, hi))
}

/// How segment `[c, d]` sits relative to segment `[a, b]`.
enum Coincidence {
    /// Collinear within tolerance; overlap parameters on `[a, b]`.
    Collinear(f64, f64),
    Disjoint,
    /// Nearly collinear and overlapping, but farther apart than the tolerance.
    NearMiss(f64),
}

fn coincidence(a: Point, b: Point, c: Point, d: Point) -> Coincidence {
    let dist = point_line_distance(c, a, b).max(point_line_distance(d, a, b));
    let Some((lo, hi)) = projected_overlap(a, b, c, d) else {
        return Coincidence::Disjoint;
    };
    if (hi - lo) * norm2(sub(b, a)) <= GEOMETRY_TOL {
        return Coincidence::Disjoint;
    }
    if dist <= GEOMETRY_TOL {
        Coincidence::Collinear(lo, hi)
    } else if dist <= NEAR_MISS {
        Coincidence::NearMiss(dist)
    } else {
        Coincidence::Disjoint
    }
}

fn is_convex(poly: &[Point]) -> bool {
    let n = poly.len();
    let sign = polygon_area(poly).signum();
    (0..n).all(|i| {
        let (a, b, c) = (poly[i], poly[(i + 1) % n], poly[(i + 2) % n]);
        sign * cross(sub(b, a), sub(c, b)) >= -GEOMETRY_TOL * norm2(sub(b, a)) * norm2(sub(c, b))
    })
}

/// Separating-axis test: do the interiors of two convex polygons meet?
fn interiors_overlap(p: &[Point], q: &[Point]) -> bool {
    for poly in [p, q] {
        let n = poly.len();
        for i in 0..n {
            let e = sub(poly[(i + 1) % n], poly[i]);
            let len = norm2(e);
            if len == 0.0 {
                continue;
            }
            let axis = [-e[1] / len, e[0] / len];
            let span = |s: &[Point]| s.iter().map(|v| dot2(*v, axis)).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
            let (a0, a1) = span(p);
            let (b0, b1) = span(q);
            if a1 <= b0 + GEOMETRY_TOL || b1 <= a0 + GEOMETRY_TOL {
                return false;
            }
        }
    }
    true
}

impl PlanarScene {
    pub fn area(&self) -> f64 {
        (self.domain[2] - self.domain[0]) * (self.domain[3] - self.domain[1])
    }

    pub fn width(&self) -> f64 {
        self.domain[2] - self.domain[0]
    }

    fn in_domain(&self, p: Point) -> bool {
        let [x0, y0, x1, y1] = self.domain;
        p[0] >= x0 - GEOMETRY_TOL && p[0] <= x1 + GEOMETRY_TOL && p[1] >= y0 - GEOMETRY_TOL && p[1] <= y1 + GEOMETRY_TOL
    }

    /// Index of the first region containing `p`.
    pub fn region_at(&self, p: Point) -> Option<usize> {
        self.regions.iter().position(|r| r.contains(p))
    }

    /// `u(x)`: affine part of the containing region plus the staircase.
    pub fn eval(&self, p: Point) -> Option<CosseratVector> {
        let r = self.region_at(p)?;
        let mut u = self.regions[r].eval(p);
        if let Some(s) = &self.staircase {
            u = u.add(&s.amplitude.scale(staircase_profile(s.x2_range, p[1])));
        }
        Some(u)
    }

    /// `ℋ¹(J_u)`.
    pub fn jump_length(&self) -> f64 {
        self.jumps.iter().map(|j| j.length()).sum()
    }
}

/// `cantor((x₂ − y₀)/(y₁ − y₀))`, clamped to `[0, 1]` outside the range.
pub fn staircase_profile(range: [f64; 2], x2: f64) -> f64 {
    cantor_function((x2 - range[0]) / (range[1] - range[0]))
}

/// The middle-thirds Cantor function on `[0, 1]`.
pub fn cantor_function(t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    if t >= 1.0 {
        return 1.0;
    }
    let (mut x, mut value, mut weight) = (t, 0.0, 0.5);
    for _ in 0..64 {
        x *= 3.0;
        if x >= 2.0 {
            value += weight;
            x -= 2.0;
        } else if x >= 1.0 {
            return value + weight;
        }
        weight *= 0.5;
    }
    value
}

/// Checks every scene invariant and reports each violation.
pub fn validate_scene(scene: &PlanarScene) -> ValidationReport {
    let mut report = ValidationReport::default();
    let [x0, y0, x1, y1] = scene.domain;
    if !scene.domain.iter().all(|v| v.is_finite()) || !(x1 > x0 && y1 > y0) {
        report.push(FindingKind::DegenerateDomain, format!("domain {:?} is not a proper rectangle", scene.domain));
        return report;
    }
    if scene.regions.is_empty() {
        report.push(FindingKind::PartitionGap, "scene has no regions".into());
        return report;
    }

    let mut usable = vec![true; scene.regions.len()];
    for (i, r) in scene.regions.iter().enumerate() {
        let finite = r.polygon.iter().flatten().all(|v| v.is_finite()) && r.gradient.is_finite() && r.offset.is_finite();
        if !finite {
            report.push(FindingKind::NonFinite, format!("region {i} has non-finite data"));
            usable[i] = false;
            continue;
        }
        if r.polygon.len() < 3 || r.area() <= GEOMETRY_TOL {
            report.push(FindingKind::DegenerateRegion, format!("region {i} has no area"));
            usable[i] = false;
            continue;
        }
        if !is_convex(&r.polygon) {
            report.push(FindingKind::NonConvexRegion, format!("region {i} is not convex; split it"));
            usable[i] = false;
        }
        if let Some(v) = r.polygon.iter().find(|v| !scene.in_domain(**v)) {
            report.push(FindingKind::RegionOutsideDomain, format!("region {i} vertex {v:?} lies outside the domain"));
        }
    }
    for i in 0..scene.regions.len() {
        for j in i + 1..scene.regions.len() {
            if usable[i] && usable[j] && interiors_overlap(&scene.regions[i].polygon, &scene.regions[j].polygon) {
                report.push(FindingKind::PartitionOverlap, format!("regions {i} and {j} overlap"));
            }
        }
    }
    let covered: f64 = scene.regions.iter().map(|r| r.area()).sum();
    let area = scene.area();
    if covered < area - GEOMETRY_TOL * area.max(1.0) {
        report.push(FindingKind::PartitionGap, format!("regions cover {covered} of the domain area {area}"));
    } else if covered > area + GEOMETRY_TOL * area.max(1.0) && !report.has(FindingKind::PartitionOverlap) {
        report.push(FindingKind::PartitionOverlap, format!("regions cover {covered}, more than the domain area {area}"));
    }

    for (k, jmp) in scene.jumps.iter().enumerate() {
        let finite = jmp.from.iter().chain(&jmp.to).chain(&jmp.normal).all(|v| v.is_finite()) && jmp.jump.is_finite();
        if !finite {
            report.push(FindingKind::NonFinite, format!("jump {k} has non-finite data"));
            continue;
        }
        let len = jmp.length();
        if len <= GEOMETRY_TOL {
            report.push(FindingKind::DegenerateSegment, format!("jump {k} has zero length"));
            continue;
        }
        if jmp.minus >= scene.regions.len() || jmp.plus >= scene.regions.len() || jmp.minus == jmp.plus {
            report.push(FindingKind::BadRegionIndex, format!("jump {k} names regions {} and {}", jmp.minus, jmp.plus));
            continue;
        }
        let nn = norm2(jmp.normal);
        let tangent = sub(jmp.to, jmp.from);
        if (nn - 1.0).abs() > GEOMETRY_TOL || dot2(jmp.normal, tangent).abs() > GEOMETRY_TOL * len {
            report.push(FindingKind::NormalNotUnit, format!("jump {k} normal {:?} is not a unit normal to the segment", jmp.normal));
        }
        let (minus, plus) = (&scene.regions[jmp.minus], &scene.regions[jmp.plus]);
        let mid = lerp(jmp.from, jmp.to, 0.5);
        for (name, r) in [("minus", minus), ("plus", plus)] {
            if ![jmp.from, mid, jmp.to].iter().all(|p| r.on_boundary(*p)) {
                report.push(FindingKind::SegmentOffBoundary, format!("jump {k} does not lie on the boundary of its {name} region"));
            }
        }
        if dot2(sub(plus.centroid(), mid), jmp.normal) <= 0.0 || dot2(sub(minus.centroid(), mid), jmp.normal) >= 0.0 {
            report.push(FindingKind::NormalOrientation, format!("jump {k} normal does not point from region {} into region {}", jmp.minus, jmp.plus));
        }
        for (end, p) in [("start", jmp.from), ("end", jmp.to)] {
            let actual = plus.eval(p).sub(&minus.eval(p));
            let gap = actual.sub(&jmp.jump).norm();
            if gap > GEOMETRY_TOL * (1.0 + jmp.jump.norm()) {
                report.push(
                    FindingKind::TraceMismatch,
                    format!("jump {k} declares {:?} but the adjacent maps differ by {:?} at its {end}", jmp.jump.0, actual.0),
                );
            }
        }
    }

    // Shared edges whose maps disagree must be covered by declared jumps.
    for i in 0..scene.regions.len() {
        for j in i + 1..scene.regions.len() {
            if !(usable[i] && usable[j]) {
                continue;
            }
            let (ri, rj) = (&scene.regions[i], &scene.regions[j]);
            for (a, b) in ri.edges() {
                for (c, d) in rj.edges() {
                    let Coincidence::Collinear(lo, hi) = coincidence(a, b, c, d) else {
                        continue;
                    };
                    let (p, q) = (lerp(a, b, lo), lerp(a, b, hi));
                    let differs = [p, q].iter().any(|x| rj.eval(*x).sub(&ri.eval(*x)).norm() > GEOMETRY_TOL);
                    if !differs {
                        continue;
                    }
                    let shared = norm2(sub(q, p));
                    let declared: f64 = scene
                        .jumps
                        .iter()
                        .filter(|jm| (jm.minus == i && jm.plus == j) || (jm.minus == j && jm.plus == i))
                        .filter_map(|jm| match coincidence(p, q, jm.from, jm.to) {
                            Coincidence::Collinear(s, t) => Some((t - s) * shared),
                            _ => None,
                        })
                        .sum();
                    if declared < shared - GEOMETRY_TOL {
                        report.push(
                            FindingKind::UndeclaredJump,
                            format!("regions {i} and {j} disagree along {p:?}–{q:?} without a declared jump"),
                        );
                    }
                }
            }
        }
    }

    if let Some(s) = &scene.staircase {
        let [a, b] = s.x2_range;
        if !s.amplitude.is_finite() || !(a.is_finite() && b.is_finite()) {
            report.push(FindingKind::NonFinite, "staircase has non-finite data".into());
        } else if !(b > a) || a < y0 - GEOMETRY_TOL || b > y1 + GEOMETRY_TOL {
            report.push(FindingKind::StaircaseRange, format!("staircase range {:?} is not a sub-interval of the x₂ extent", s.x2_range));
        }
    }
    report
}

impl BendingMeasure {
    pub fn zero() -> Self {
        Self::default()
    }

    /// Area density of region `r` (zero when `ac` is empty).
    pub fn ac_density(&self, r: usize) -> CosseratVector {
        self.ac.get(r).copied().unwrap_or_default()
    }

    pub fn validate(&self, scene: &PlanarScene) -> ValidationReport {
        let mut report = ValidationReport::default();
        if !self.ac.is_empty() && self.ac.len() != scene.regions.len() {
            report.push(
                FindingKind::MeasureShape,
                format!("{} area densities for {} regions", self.ac.len(), scene.regions.len()),
            );
        }
        if self.ac.iter().any(|d| !d.is_finite()) {
            report.push(FindingKind::NonFinite, "area density has non-finite entries".into());
        }
        for (k, l) in self.lines.iter().enumerate() {
            if !l.density.is_finite() || !l.from.iter().chain(&l.to).all(|v| v.is_finite()) {
                report.push(FindingKind::NonFinite, format!("line part {k} has non-finite data"));
                continue;
            }
            if l.length() <= GEOMETRY_TOL {
                report.push(FindingKind::DegenerateSegment, format!("line part {k} has zero length"));
                continue;
            }
            if !scene.in_domain(l.from) || !scene.in_domain(l.to) {
                report.push(FindingKind::MeasureOutsideDomain, format!("line part {k} leaves the domain"));
            }
            for (m, other) in self.lines.iter().enumerate().skip(k + 1) {
                if other.length() > GEOMETRY_TOL {
                    if let Coincidence::Collinear(..) = coincidence(l.from, l.to, other.from, other.to) {
                        report.push(FindingKind::OverlappingLines, format!("line parts {k} and {m} overlap; merge them"));
                    }
                }
            }
        }
        for (k, a) in self.atoms.iter().enumerate() {
            if !a.weight.is_finite() || !a.at.iter().all(|v| v.is_finite()) {
                report.push(FindingKind::NonFinite, format!("atom {k} has non-finite data"));
            } else if !scene.in_domain(a.at) {
                report.push(FindingKind::MeasureOutsideDomain, format!("atom {k} at {:?} lies outside the domain", a.at));
            }
        }
        if let Some(c) = &self.cantor {
            let [a, b] = c.x2_range;
            if !c.density.is_finite() || !(a.is_finite() && b.is_finite()) {
                report.push(FindingKind::NonFinite, "Cantor part has non-finite data".into());
            } else if !(b > a) || a < scene.domain[1] - GEOMETRY_TOL || b > scene.domain[3] + GEOMETRY_TOL {
                report.push(FindingKind::MeasureOutsideDomain, format!("Cantor range {:?} leaves the x₂ extent", c.x2_range));
            }
        }
        report
    }

    /// Multiplies the singular parts (lines, atoms, Cantor) by `t`.
    pub fn scale_singular(&self, t: f64) -> Self {
        let mut out = self.clone();
        out.lines.iter_mut().for_each(|l| l.density = l.density.scale(t));
        out.atoms.iter_mut().for_each(|a| a.weight = a.weight.scale(t));
        if let Some(c) = out.cantor.as_mut() {
            c.density = c.density.scale(t);
        }
        out
    }
}

/// A line density carried by (a piece of) jump segment `jump`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JumpLinePart {
    pub jump: usize,
    pub from: Point,
    pub to: Point,
    pub density: CosseratVector,
}

/// `b̄ = b̄^a + b̄^j + b̄^c + b̄^σ`, mutually singular by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BesicovitchSplit {
    /// Area density per region.
    pub b_a: Vec<CosseratVector>,
    pub b_j: Vec<JumpLinePart>,
    pub b_c: Option<CantorPart>,
    /// Atoms plus line and Cantor mass off the carriers of `D_α u`.
    pub b_sigma: BendingMeasure,
}

impl BesicovitchSplit {
    /// The four parts summed back into one measure.
    pub fn recombine(&self) -> BendingMeasure {
        let mut lines: Vec<LinePart> = self
            .b_j
            .iter()
            .map(|p| LinePart {
                from: p.from,
                to: p.to,
                density: p.density,
            })
            .collect();
        lines.extend(self.b_sigma.lines.iter().cloned());
        BendingMeasure {
            ac: self.b_a.clone(),
            lines,
            atoms: self.b_sigma.atoms.clone(),
            cantor: self.b_c.clone().or_else(|| self.b_sigma.cantor.clone()),
        }
    }
}

/// Routes each part of `b̄` to the carrier it lives on. Line parts are cut at
/// the endpoints of jump segments and each piece routed separately; atoms
/// always go to `b̄^σ`.
pub fn besicovitch_split(scene: &PlanarScene, measure: &BendingMeasure) -> Result<BesicovitchSplit> {
    let b_a: Vec<CosseratVector> = (0..scene.regions.len()).map(|r| measure.ac_density(r)).collect();
    let mut b_j = Vec::new();
    let mut sigma_lines = Vec::new();
    for (k, line) in measure.lines.iter().enumerate() {
        let mut covered: Vec<(f64, f64, usize)> = Vec::new();
        for (m, jmp) in scene.jumps.iter().enumerate() {
            match coincidence(line.from, line.to, jmp.from, jmp.to) {
                Coincidence::Collinear(lo, hi) => covered.push((lo, hi, m)),
                Coincidence::NearMiss(d) => {
                    return Err(Error::Ambiguity(format!(
                        "line part {k} runs {d:.2e} away from jump {m}: neither on nor off the jump set"
                    )))
                }
                Coincidence::Disjoint => {}
            }
        }
        covered.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut cursor = 0.0;
        let piece = |s: f64, t: f64| (lerp(line.from, line.to, s), lerp(line.from, line.to, t));
        for (lo, hi, m) in covered {
            let lo = lo.max(cursor);
            if hi <= lo {
                continue;
            }
            if lo > cursor {
                let (from, to) = piece(cursor, lo);
                sigma_lines.push(LinePart { from, to, density: line.density });
            }
            let (from, to) = piece(lo, hi);
            b_j.push(JumpLinePart {
                jump: m,
                from,
                to,
                density: line.density,
            });
            cursor = hi;
        }
        if cursor < 1.0 {
            let (from, to) = piece(cursor, 1.0);
            if norm2(sub(to, from)) > GEOMETRY_TOL {
                sigma_lines.push(LinePart { from, to, density: line.density });
            } else if let Some(last) = b_j.last_mut() {
                // Absorb a sub-tolerance tail so no mass is dropped.
                last.to = to;
            }
        }
    }

    let (mut b_c, mut sigma_cantor) = (None, None);
    if let Some(c) = &measure.cantor {
        let aligned = match &scene.staircase {
            Some(s) if s.amplitude.norm() > 0.0 => {
                let off = (c.x2_range[0] - s.x2_range[0]).abs().max((c.x2_range[1] - s.x2_range[1]).abs());
                if off <= GEOMETRY_TOL {
                    true
                } else if off <= NEAR_MISS {
                    return Err(Error::Ambiguity(format!(
                        "Cantor part range {:?} misses the staircase range {:?} by {off:.2e}",
                        c.x2_range, s.x2_range
                    )));
                } else {
                    false
                }
            }
            _ => false,
        };
        if aligned {
            b_c = Some(c.clone());
        } else {
            sigma_cantor = Some(c.clone());
        }
    }

    Ok(BesicovitchSplit {
        b_a,
        b_j,
        b_c,
        b_sigma: BendingMeasure {
            ac: Vec::new(),
            lines: sigma_lines,
            atoms: measure.atoms.clone(),
            cantor: sigma_cantor,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TotalVariations {
    pub area: f64,
    /// `|D_α u|(ω)`.
    pub du: f64,
    /// `ℋ¹(J_u)`.
    pub jump_length: f64,
    /// `|D^c_α u|(ω)`.
    pub cantor: f64,
    /// `|b̄|(ω)`.
    pub measure: f64,
}

/// Closed-form total variations; the Cantor function has variation 1 on its
/// interval, so the staircase contributes `|a|` times the domain width.
pub fn total_variations(scene: &PlanarScene, measure: &BendingMeasure) -> TotalVariations {
    let width = scene.width();
    let bulk: f64 = scene.regions.iter().map(|r| r.area() * r.gradient.norm()).sum();
    let jumps: f64 = scene.jumps.iter().map(|j| j.length() * j.jump.norm()).sum();
    let cantor = scene.staircase.as_ref().map_or(0.0, |s| s.amplitude.norm() * width);
    let ac: f64 = scene.regions.iter().enumerate().map(|(i, r)| r.area() * measure.ac_density(i).norm()).sum();
    let lines: f64 = measure.lines.iter().map(|l| l.length() * l.density.norm()).sum();
    let atoms: f64 = measure.atoms.iter().map(|a| a.weight.norm()).sum();
    let cantor_mass = measure.cantor.as_ref().map_or(0.0, |c| c.density.norm() * width);
    TotalVariations {
        area: scene.area(),
        du: bulk + jumps + cantor,
        jump_length: scene.jump_length(),
        cantor,
        measure: ac + lines + atoms + cantor_mass,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureConfig {
    /// Each triangle of a region fan is split into `4^area_level` pieces.
    pub area_level: u32,
    /// Composite pieces per line part.
    pub line_pieces: usize,
    /// Triadic level of the Cantor approximation.
    pub cantor_level: u32,
    /// Composite pieces across the width for the Cantor part.
    pub cantor_width_pieces: usize,
    /// Cap on test-function evaluations.
    pub max_evals: usize,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self {
            area_level: 3,
            line_pieces: 16,
            cantor_level: 10,
            cantor_width_pieces: 8,
            max_evals: 5_000_000,
        }
    }
}

/// `∫φ db̄` with the reported truncation bound of the Cantor approximation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pairing<T> {
    pub value: T,
    pub truncation: f64,
}

const GAUSS5: [(f64, f64); 5] = [
    (-0.906_179_845_938_664, 0.236_926_885_056_189_1),
    (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (0.0, 0.568_888_888_888_888_9),
    (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (0.906_179_845_938_664, 0.236_926_885_056_189_1),
];

/// Composite 5-point Gauss rule on `[a, b]` with `pieces` panels.
pub(crate) fn gauss_line<F: FnMut(f64) -> f64>(a: f64, b: f64, pieces: usize, mut f: F) -> f64 {
    let h = (b - a) / pieces as f64;
    let mut total = 0.0;
    for p in 0..pieces {
        let mid = a + (p as f64 + 0.5) * h;
        for (x, w) in GAUSS5 {
            total += w * 0.5 * h * f(mid + 0.5 * h * x);
        }
    }
    total
}

fn triangle_rule<F: FnMut(Point) -> f64>(p0: Point, p1: Point, p2: Point, level: u32, f: &mut F) -> f64 {
    if level > 0 {
        let (a, b, c) = (lerp(p0, p1, 0.5), lerp(p1, p2, 0.5), lerp(p2, p0, 0.5));
        return triangle_rule(p0, a, c, level - 1, f)
            + triangle_rule(a, p1, b, level - 1, f)
            + triangle_rule(c, b, p2, level - 1, f)
            + triangle_rule(a, b, c, level - 1, f);
    }
    // Collapsed-square map x = p0 + u(p1 − p0) + uv(p2 − p1), Jacobian 2A·u.
    let jac = cross(sub(p1, p0), sub(p2, p0)).abs();
    let mut total = 0.0;
    for (xu, wu) in GAUSS5 {
        let u = 0.5 * (xu + 1.0);
        for (xv, wv) in GAUSS5 {
            let v = 0.5 * (xv + 1.0);
            let x = [
                p0[0] + u * (p1[0] - p0[0]) + u * v * (p2[0] - p1[0]),
                p0[1] + u * (p1[1] - p0[1]) + u * v * (p2[1] - p1[1]),
            ];
            total += 0.25 * wu * wv * jac * u * f(x);
        }
    }
    total
}

/// `∫_{region} φ dx` over a convex polygon by fan triangulation.
pub(crate) fn region_integral<F: FnMut(Point) -> f64>(region: &Region, level: u32, f: &mut F) -> f64 {
    let p = &region.polygon;
    (1..p.len() - 1).map(|i| triangle_rule(p[0], p[i], p[i + 1], level, f)).sum()
}

struct Budget {
    used: usize,
    cap: usize,
}

impl Budget {
    fn charge(&mut self, n: usize) -> bool {
        self.used += n;
        self.used <= self.cap
    }
}

/// Level-`k` approximation of `∫ φ(x₁, x₂) d(μ ⊗ ℋ¹)` with `μ` the Cantor
/// measure on `range`; the bound sums each interval's mass times the largest
/// deviation of `φ` from its midpoint value at the interval ends.
fn cantor_integral<F: FnMut(Point) -> f64>(domain: [f64; 4], range: [f64; 2], cfg: &QuadratureConfig, f: &mut F) -> (f64, f64) {
    let k = cfg.cantor_level;
    let count = 1usize << k;
    let len = (range[1] - range[0]) / 3f64.powi(k as i32);
    let mass = 1.0 / count as f64;
    let (mut value, mut bound) = (0.0, 0.0);
    for idx in 0..count {
        // Left endpoint: the base-3 digits are twice the binary digits of idx.
        let mut left = 0.0;
        let mut scale = 1.0 / 3.0;
        for bit in (0..k).rev() {
            if (idx >> bit) & 1 == 1 {
                left += 2.0 * scale;
            }
            scale /= 3.0;
        }
        let y_lo = range[0] + left * (range[1] - range[0]);
        let y_hi = y_lo + len;
        let y_mid = 0.5 * (y_lo + y_hi);
        let mut osc = 0.0f64;
        let v = gauss_line(domain[0], domain[2], cfg.cantor_width_pieces, |x1| {
            let m = f([x1, y_mid]);
            osc = osc.max((f([x1, y_lo]) - m).abs()).max((f([x1, y_hi]) - m).abs());
            m
        });
        value += mass * v;
        bound += mass * osc * (domain[2] - domain[0]);
    }
    (value, bound)
}

/// Evaluations a pairing will spend.
fn pairing_cost(scene: &PlanarScene, measure: &BendingMeasure, cfg: &QuadratureConfig) -> usize {
    let tri = 25 * 4usize.pow(cfg.area_level);
    let area: usize = if measure.ac.iter().any(|d| d.norm() > 0.0) {
        scene.regions.iter().map(|r| (r.polygon.len() - 2) * tri).sum()
    } else {
        0
    };
    let lines = measure.lines.len() * 5 * cfg.line_pieces;
    let cantor = measure.cantor.as_ref().map_or(0, |_| (1usize << cfg.cantor_level) * 15 * cfg.cantor_width_pieces);
    area + lines + measure.atoms.len() + cantor
}

/// `∫ φ db̄ ∈ R³` for a scalar test function, part by part.
pub fn weakstar_pairing<F>(scene: &PlanarScene, measure: &BendingMeasure, test: F, cfg: &QuadratureConfig) -> Result<Pairing<CosseratVector>>
where
    F: Fn(Point) -> f64,
{
    let mut budget = Budget { used: 0, cap: cfg.max_evals };
    let mut value = CosseratVector::ZERO;
    let over = |value: CosseratVector, what: &str| Error::Quadrature {
        message: format!("{what} would exceed {} test-function evaluations", cfg.max_evals),
        partial: value.0.to_vec(),
    };
    let mut f = |p: Point| test(p);

    for a in &measure.atoms {
        if !budget.charge(1) {
            return Err(over(value, "atoms"));
        }
        value = value.add(&a.weight.scale(f(a.at)));
    }
    for l in &measure.lines {
        if !budget.charge(5 * cfg.line_pieces) {
            return Err(over(value, "line parts"));
        }
        let len = l.length();
        let s = gauss_line(0.0, 1.0, cfg.line_pieces, |t| f(lerp(l.from, l.to, t)));
        value = value.add(&l.density.scale(s * len));
    }
    for (i, r) in scene.regions.iter().enumerate() {
        let d = measure.ac_density(i);
        if d.norm() == 0.0 {
            continue;
        }
        if !budget.charge((r.polygon.len() - 2) * 25 * 4usize.pow(cfg.area_level)) {
            return Err(over(value, "area part"));
        }
        value = value.add(&d.scale(region_integral(r, cfg.area_level, &mut f)));
    }
    let mut truncation = 0.0;
    if let Some(c) = &measure.cantor {
        if !budget.charge((1usize << cfg.cantor_level) * 15 * cfg.cantor_width_pieces) {
            return Err(over(value, "Cantor part"));
        }
        let (v, bound) = cantor_integral(scene.domain, c.x2_range, cfg, &mut f);
        value = value.add(&c.density.scale(v));
        truncation = bound * c.density.norm();
    }
    Ok(Pairing { value, truncation })
}

/// `∫ φ · db̄` for a vector test function.
pub fn weakstar_pairing_vector<F>(scene: &PlanarScene, measure: &BendingMeasure, test: F, cfg: &QuadratureConfig) -> Result<Pairing<f64>>
where
    F: Fn(Point) -> [f64; 3],
{
    if 3 * pairing_cost(scene, measure, cfg) > cfg.max_evals {
        // Report the scalar partials of the first component before giving up.
        let partial = weakstar_pairing(scene, measure, |p| test(p)[0], &QuadratureConfig { max_evals: cfg.max_evals / 3, ..*cfg })
            .map(|p| p.value.0[0])
            .unwrap_or(f64::NAN);
        return Err(Error::Quadrature {
            message: format!("vector pairing would exceed {} test-function evaluations", cfg.max_evals),
            partial: vec![partial],
        });
    }
    let mut value = 0.0;
    let mut truncation = 0.0;
    for c in 0..3 {
        let p = weakstar_pairing(scene, measure, |x| test(x)[c], cfg)?;
        value += p.value.0[c];
        truncation += p.truncation;
    }
    Ok(Pairing { value, truncation })
}
