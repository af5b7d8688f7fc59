//! Topology of the link and the per-step geometry.
//!
//! Frame: the point transmitter sits at the origin and the absorbing
//! receiver is centred on the +z axis at `r0 = d + r_r`. The reflecting
//! plane is nominally `z = d_a` with normal +z. A radial offset moves the
//! aperture centre by `r_off` in the direction `phi_off`; a tilt rotates the
//! plane by `theta` about an in-plane axis through the aperture centre that
//! is perpendicular to both the z axis and the offset direction.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points whose normal distance to the plane is below this are "on" it.
pub const PLANE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    #[inline]
    pub fn dot(self, other: Point3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    #[inline]
    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    #[inline]
    pub fn lerp(self, other: Point3, s: f64) -> Point3 {
        self + (other - self) * s
    }
}

impl Add for Point3 {
    type Output = Point3;
    #[inline]
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Point3 {
    type Output = Point3;
    #[inline]
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    #[inline]
    fn mul(self, k: f64) -> Point3 {
        Point3::new(self.x * k, self.y * k, self.z * k)
    }
}

impl Neg for Point3 {
    type Output = Point3;
    fn neg(self) -> Point3 {
        Point3::new(-self.x, -self.y, -self.z)
    }
}

/// One proposed diffusion step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start: Point3,
    pub end: Point3,
}

impl Segment {
    pub const fn new(start: Point3, end: Point3) -> Self {
        Self { start, end }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Free(Point3),
    Reflected(Point3),
    Absorbed(Point3),
}

impl StepOutcome {
    pub fn point(self) -> Point3 {
        match self {
            StepOutcome::Free(p) | StepOutcome::Reflected(p) | StepOutcome::Absorbed(p) => p,
        }
    }
}

/// Which half-space of the plane a molecule is in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// The transmitter's side.
    Tx,
    /// The receiver's side.
    Rx,
}

/// User-facing description of the apertured plane, lengths in µm and
/// angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApertureSpec {
    pub d_a: f64,
    pub r_a: f64,
    #[serde(default)]
    pub r_off: f64,
    #[serde(default)]
    pub phi_off: f64,
    #[serde(default)]
    pub theta: f64,
}

impl ApertureSpec {
    pub fn concentric(d_a: f64, r_a: f64) -> Self {
        Self {
            d_a,
            r_a,
            r_off: 0.0,
            phi_off: 0.0,
            theta: 0.0,
        }
    }
}

/// Unvalidated topology as it appears in config files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    /// Closest transmitter to receiver-surface distance (µm).
    pub d: f64,
    /// Receiver radius (µm).
    pub r_r: f64,
    /// Diffusion coefficient (µm²/s).
    #[serde(rename = "D", alias = "diffusion")]
    pub diffusion: f64,
    /// `None` is the free-space link without any plane.
    #[serde(default)]
    pub plane: Option<ApertureSpec>,
}

impl TopologySpec {
    /// d = 5 µm, r_r = 5 µm, D = 79.4 µm²/s, no plane.
    pub fn free_space_default() -> Self {
        Self {
            d: 5.0,
            r_r: 5.0,
            diffusion: 79.4,
            plane: None,
        }
    }

    pub fn with_plane(mut self, plane: ApertureSpec) -> Self {
        self.plane = Some(plane);
        self
    }
}

/// The apertured plane in resolved geometric form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: Point3,
    pub center: Point3,
    pub r_a: f64,
}

impl Plane {
    #[inline]
    pub fn signed_distance(&self, p: Point3) -> f64 {
        self.normal.dot(p - self.center)
    }

    #[inline]
    fn contains_in_aperture(&self, p: Point3) -> bool {
        let q = p - self.center;
        let q = q - self.normal * self.normal.dot(q);
        q.norm_sq() < self.r_a * self.r_a
    }

    #[inline]
    fn mirror(&self, p: Point3, dist: f64) -> Point3 {
        p - self.normal * (2.0 * dist)
    }
}

/// A validated topology. Serializes as its [`TopologySpec`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TopologySpec", into = "TopologySpec")]
pub struct Topology {
    spec: TopologySpec,
    r0: f64,
    receiver_center: Point3,
    plane: Option<Plane>,
}

impl TryFrom<TopologySpec> for Topology {
    type Error = Error;

    fn try_from(spec: TopologySpec) -> Result<Self> {
        Topology::new(spec)
    }
}

impl From<Topology> for TopologySpec {
    fn from(t: Topology) -> Self {
        t.spec
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidTopology(msg.into())
}

impl Topology {
    pub fn new(spec: TopologySpec) -> Result<Self> {
        let TopologySpec {
            d,
            r_r,
            diffusion,
            plane,
        } = spec;
        for (name, v) in [("d", d), ("r_r", r_r), ("D", diffusion)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        let r0 = d + r_r;
        let receiver_center = Point3::new(0.0, 0.0, r0);

        let plane = match plane {
            None => None,
            Some(ap) => {
                let ApertureSpec {
                    d_a,
                    r_a,
                    r_off,
                    phi_off,
                    theta,
                } = ap;
                for (name, v) in [
                    ("d_a", d_a),
                    ("r_a", r_a),
                    ("r_off", r_off),
                    ("phi_off", phi_off),
                    ("theta", theta),
                ] {
                    if !v.is_finite() {
                        return Err(invalid(format!("{name} must be finite, got {v}")));
                    }
                }
                if r_a < 0.0 {
                    return Err(invalid(format!("r_a must be >= 0, got {r_a}")));
                }
                if r_off < 0.0 {
                    return Err(invalid(format!("r_off must be >= 0, got {r_off}")));
                }
                if !(d_a > 0.0 && d_a < d) {
                    return Err(invalid(format!(
                        "plane must lie strictly between transmitter and receiver: 0 < d_a < d, got d_a = {d_a}, d = {d}"
                    )));
                }
                if theta.abs() >= std::f64::consts::FRAC_PI_2 {
                    return Err(invalid(format!("|theta| must be < pi/2, got {theta}")));
                }
                let (sp, cp) = phi_off.sin_cos();
                let (st, ct) = theta.sin_cos();
                let plane = Plane {
                    normal: Point3::new(st * cp, st * sp, ct),
                    center: Point3::new(r_off * cp, r_off * sp, d_a),
                    r_a,
                };
                let rx_clearance = plane.signed_distance(receiver_center);
                if rx_clearance <= r_r {
                    return Err(invalid(format!(
                        "tilted plane intersects the receiver: centre-to-plane distance {rx_clearance:.6} <= r_r = {r_r}"
                    )));
                }
                if plane.signed_distance(Point3::ORIGIN) >= 0.0 {
                    return Err(invalid("transmitter is not on the transmitter side of the plane"));
                }
                Some(plane)
            }
        };

        Ok(Self {
            spec,
            r0,
            receiver_center,
            plane,
        })
    }

    pub fn spec(&self) -> &TopologySpec {
        &self.spec
    }

    pub fn d(&self) -> f64 {
        self.spec.d
    }

    pub fn r_r(&self) -> f64 {
        self.spec.r_r
    }

    pub fn diffusion(&self) -> f64 {
        self.spec.diffusion
    }

    /// Transmitter to receiver-centre distance.
    pub fn r0(&self) -> f64 {
        self.r0
    }

    pub fn receiver_center(&self) -> Point3 {
        self.receiver_center
    }

    pub fn plane(&self) -> Option<&Plane> {
        self.plane.as_ref()
    }

    pub fn has_plane(&self) -> bool {
        self.plane.is_some()
    }

    /// Same link with the plane removed.
    pub fn without_plane(&self) -> Topology {
        let mut spec = self.spec;
        spec.plane = None;
        Topology::new(spec).expect("a valid topology stays valid without its plane")
    }

    /// Classifies a point, using the direction of travel for points on the plane.
    #[inline]
    fn side_of(dist: f64, incoming: f64) -> Side {
        if dist.abs() < PLANE_EPS {
            if incoming > 0.0 {
                Side::Rx
            } else {
                Side::Tx
            }
        } else if dist > 0.0 {
            Side::Rx
        } else {
            Side::Tx
        }
    }

    /// Where a segment crosses the plane, as `(s, point)` with `s` in (0, 1].
    pub fn plane_crossing(&self, seg: Segment) -> Option<(f64, Point3)> {
        let plane = self.plane.as_ref()?;
        let d0 = plane.signed_distance(seg.start);
        let d1 = plane.signed_distance(seg.end);
        let start_side = Self::side_of(d0, 0.0);
        self.crossing_from(plane, seg, d0, d1, start_side)
    }

    #[inline]
    fn crossing_from(
        &self,
        plane: &Plane,
        seg: Segment,
        d0: f64,
        d1: f64,
        start_side: Side,
    ) -> Option<(f64, Point3)> {
        if Self::side_of(d1, d1 - d0) == start_side {
            return None;
        }
        let denom = d0 - d1;
        let s = if denom == 0.0 {
            1.0
        } else {
            (d0 / denom).clamp(f64::MIN_POSITIVE, 1.0)
        };
        let mut point = seg.start.lerp(seg.end, s);
        // Project onto the plane to remove interpolation round-off.
        point = point - plane.normal * plane.signed_distance(point);
        Some((s, point))
    }

    /// In-plane distance from the aperture centre is strictly below `r_a`.
    /// Always false without a plane.
    pub fn in_aperture(&self, point: Point3) -> bool {
        self.plane
            .as_ref()
            .is_some_and(|p| p.contains_in_aperture(point))
    }

    /// Resolves the plane for one step: passes through the aperture, mirrors
    /// off the plane body, or leaves the step untouched.
    pub fn reflect_step(&self, seg: Segment) -> StepOutcome {
        let Some(plane) = self.plane.as_ref() else {
            return StepOutcome::Free(seg.end);
        };
        let d0 = plane.signed_distance(seg.start);
        self.reflect_from(plane, seg, d0, Self::side_of(d0, 0.0)).0
    }

    #[inline]
    fn reflect_from(
        &self,
        plane: &Plane,
        seg: Segment,
        d0: f64,
        start_side: Side,
    ) -> (StepOutcome, Side) {
        let d1 = plane.signed_distance(seg.end);
        match self.crossing_from(plane, seg, d0, d1, start_side) {
            None => (StepOutcome::Free(seg.end), start_side),
            Some((_, hit)) if plane.contains_in_aperture(hit) => {
                let side = match start_side {
                    Side::Tx => Side::Rx,
                    Side::Rx => Side::Tx,
                };
                (StepOutcome::Free(seg.end), side)
            }
            Some(_) => (StepOutcome::Reflected(plane.mirror(seg.end, d1)), start_side),
        }
    }

    /// `|point - receiver_center| <= r_r`.
    #[inline]
    pub fn sphere_hit(&self, point: Point3) -> bool {
        (point - self.receiver_center).norm_sq() <= self.spec.r_r * self.spec.r_r
    }

    /// Plane resolution followed by the receiver test on the final endpoint.
    pub fn resolve_step(&self, seg: Segment) -> StepOutcome {
        let outcome = self.reflect_step(seg);
        let p = outcome.point();
        if self.sphere_hit(p) {
            StepOutcome::Absorbed(p)
        } else {
            outcome
        }
    }

    /// Side-tracking version of [`Topology::resolve_step`] used by the walker.
    /// Molecules resting exactly on the plane keep the side they came from.
    #[inline]
    pub fn advance(&self, seg: Segment, side: Side) -> (StepOutcome, Side) {
        let (outcome, side) = match self.plane.as_ref() {
            None => (StepOutcome::Free(seg.end), side),
            Some(plane) => {
                let d0 = plane.signed_distance(seg.start);
                self.reflect_from(plane, seg, d0, side)
            }
        };
        let p = outcome.point();
        if self.sphere_hit(p) {
            (StepOutcome::Absorbed(p), side)
        } else {
            (outcome, side)
        }
    }

    /// Distance from `p` to the nearest feature that can do more than mirror
    /// a molecule on `side`: the aperture disc, and on the receiver side the
    /// receiver together with its mirror image. Infinite when nothing is
    /// reachable.
    pub fn clearance(&self, p: Point3, side: Side) -> f64 {
        let sphere = |c: Point3| (p - c).norm() - self.spec.r_r;
        let Some(plane) = self.plane.as_ref() else {
            return sphere(self.receiver_center);
        };
        let disc = if plane.r_a > 0.0 {
            let q = p - plane.center;
            let h = plane.normal.dot(q);
            let rho = (q - plane.normal * h).norm();
            let out = (rho - plane.r_a).max(0.0);
            (h * h + out * out).sqrt()
        } else {
            f64::INFINITY
        };
        match side {
            Side::Tx => disc,
            Side::Rx => {
                let c = self.receiver_center;
                let image = plane.mirror(c, plane.signed_distance(c));
                disc.min(sphere(c)).min(sphere(image))
            }
        }
    }

    /// Mirrors `p` back onto `side` if it lies beyond the plane.
    #[inline]
    pub fn fold(&self, p: Point3, side: Side) -> Point3 {
        let Some(plane) = self.plane.as_ref() else {
            return p;
        };
        let dist = plane.signed_distance(p);
        let crossed = match side {
            Side::Tx => dist > 0.0,
            Side::Rx => dist < 0.0,
        };
        if crossed {
            plane.mirror(p, dist)
        } else {
            p
        }
    }

    /// Canonical bytes for content hashing: every float bit-exact, with
    /// `-0.0` folded to `0.0` and the offset direction dropped when there is
    /// no offset.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        fn push(out: &mut Vec<u8>, v: f64) {
            let v = if v == 0.0 { 0.0 } else { v };
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        let mut out = Vec::with_capacity(80);
        out.extend_from_slice(b"topo");
        push(&mut out, self.spec.d);
        push(&mut out, self.spec.r_r);
        push(&mut out, self.spec.diffusion);
        match self.spec.plane {
            None => out.push(0),
            Some(ap) => {
                out.push(1);
                push(&mut out, ap.d_a);
                push(&mut out, ap.r_a);
                push(&mut out, ap.r_off);
                let phi = if ap.r_off == 0.0 && ap.theta == 0.0 {
                    0.0
                } else {
                    ap.phi_off
                };
                push(&mut out, phi);
                push(&mut out, ap.theta);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Plane at z = 3 with the given aperture; receiver far beyond it.
    fn plane_z3(r_a: f64) -> Topology {
        Topology::new(TopologySpec {
            d: 5.0,
            r_r: 5.0,
            diffusion: 79.4,
            plane: Some(ApertureSpec::concentric(3.0, r_a)),
        })
        .unwrap()
    }

    fn p(x: f64, y: f64, z: f64) -> Point3 {
        Point3::new(x, y, z)
    }

    #[test]
    fn crossing_examples() {
        let t = plane_z3(2.0);
        let (s, q) = t.plane_crossing(Segment::new(p(0., 0., 2.), p(0., 0., 4.))).unwrap();
        assert_relative_eq!(s, 0.5);
        assert_relative_eq!(q.z, 3.0);
        assert!(t.plane_crossing(Segment::new(p(0., 0., 1.), p(0., 0., 2.))).is_none());
        let (s, q) = t
            .plane_crossing(Segment::new(p(0., 0., 2.9), p(1., 0., 3.1)))
            .unwrap();
        assert_relative_eq!(s, 0.5, epsilon = 1e-12);
        assert_relative_eq!(q.x, 0.5, epsilon = 1e-12);
        assert_relative_eq!(q.z, 3.0, epsilon = 1e-12);
        assert!(plane_z3(2.0).without_plane().plane_crossing(Segment::new(p(0., 0., 2.), p(0., 0., 4.))).is_none());
    }

    #[test]
    fn aperture_membership() {
        let t = plane_z3(2.4);
        assert!(t.in_aperture(p(0., 0., 3.)));
        assert!(!t.in_aperture(p(2.5, 0., 3.)));
        assert!(!t.in_aperture(p(2.4, 0., 3.)), "boundary is excluded");
        let off = Topology::new(TopologySpec {
            plane: Some(ApertureSpec {
                r_off: 1.5,
                ..ApertureSpec::concentric(3.0, 0.5)
            }),
            ..TopologySpec::free_space_default()
        })
        .unwrap();
        assert!(off.in_aperture(p(1.5, 0., 3.)));
        assert!(!off.in_aperture(p(0., 0., 3.)));
    }

    #[test]
    fn reflect_examples() {
        let t = plane_z3(2.0);
        assert_eq!(
            t.reflect_step(Segment::new(p(0., 0., 2.9), p(0., 0., 3.1))),
            StepOutcome::Free(p(0., 0., 3.1))
        );
        match t.reflect_step(Segment::new(p(5., 0., 2.9), p(5., 0., 3.1))) {
            StepOutcome::Reflected(q) => {
                assert_relative_eq!(q.x, 5.0);
                assert_relative_eq!(q.z, 2.9, epsilon = 1e-12);
            }
            other => panic!("expected reflection, got {other:?}"),
        }
        assert_eq!(
            t.reflect_step(Segment::new(p(5., 0., 2.0), p(5., 0., 2.5))),
            StepOutcome::Free(p(5., 0., 2.5))
        );
    }

    #[test]
    fn sphere_examples() {
        let t = plane_z3(2.0);
        assert!(t.sphere_hit(p(0., 0., 10.)));
        assert!(t.sphere_hit(p(0., 0., 5.)));
        assert!(!t.sphere_hit(Point3::ORIGIN));
        assert!(!t.sphere_hit(p(0., 0., 4.999)));
    }

    #[test]
    fn absorbed_after_passing_aperture() {
        let t = Topology::new(TopologySpec {
            d: 1.0,
            r_r: 5.0,
            diffusion: 1.0,
            plane: Some(ApertureSpec::concentric(0.5, 1.0)),
        })
        .unwrap();
        let out = t.resolve_step(Segment::new(p(0., 0., 0.4), p(0., 0., 1.2)));
        assert_eq!(out, StepOutcome::Absorbed(p(0., 0., 1.2)));
        // Outside the aperture the mirrored point is not absorbed.
        let out = t.resolve_step(Segment::new(p(3., 0., 0.4), p(3., 0., 1.2)));
        assert!(matches!(out, StepOutcome::Reflected(_)));
    }

    #[test]
    fn validation_rejects_bad_geometry() {
        let base = TopologySpec::free_space_default();
        assert!(Topology::new(TopologySpec { d: 0.0, ..base }).is_err());
        assert!(Topology::new(TopologySpec { r_r: -1.0, ..base }).is_err());
        assert!(Topology::new(TopologySpec { diffusion: 0.0, ..base }).is_err());
        assert!(Topology::new(base.with_plane(ApertureSpec::concentric(5.0, 1.0))).is_err());
        assert!(Topology::new(base.with_plane(ApertureSpec::concentric(0.0, 1.0))).is_err());
        assert!(Topology::new(base.with_plane(ApertureSpec::concentric(2.0, -0.1))).is_err());
        assert!(Topology::new(base.with_plane(ApertureSpec::concentric(2.0, f64::NAN))).is_err());
    }

    #[test]
    fn tilt_ceiling_matches_sphere_clearance() {
        // d_a = 2, r_r = 5, r0 = 10: (10 - 2) cos(theta) > 5 <=> theta < acos(5/8) ~ 51.3 deg
        let tilt = |deg: f64| {
            Topology::new(TopologySpec::free_space_default().with_plane(ApertureSpec {
                theta: deg.to_radians(),
                ..ApertureSpec::concentric(2.0, 3.0)
            }))
        };
        assert!(tilt(50.0).is_ok());
        assert!(tilt(51.0).is_ok());
        assert!(tilt(51.4).is_err());
        assert!(tilt(60.0).is_err());
        let ceiling = (5.0f64 / 8.0).acos().to_degrees();
        assert!(tilt(ceiling - 1e-6).is_ok());
        assert!(tilt(ceiling + 1e-6).is_err());
    }

    #[test]
    fn tilted_plane_mirrors_along_normal() {
        let t = Topology::new(TopologySpec::free_space_default().with_plane(ApertureSpec {
            theta: 30f64.to_radians(),
            ..ApertureSpec::concentric(2.0, 0.5)
        }))
        .unwrap();
        let plane = *t.plane().unwrap();
        let start = p(0., 3.0, 1.5);
        let end = p(0., 3.0, 2.5);
        assert!(plane.signed_distance(start) < 0.0 && plane.signed_distance(end) > 0.0);
        match t.reflect_step(Segment::new(start, end)) {
            StepOutcome::Reflected(q) => {
                assert_relative_eq!(
                    plane.signed_distance(q),
                    -plane.signed_distance(end),
                    epsilon = 1e-12
                );
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn landing_on_the_plane_uses_incoming_direction() {
        let t = plane_z3(1.0);
        // Lands exactly on the plane body coming from below: counts as a
        // crossing and is mirrored back onto the plane, side unchanged.
        let (out, side) = t.advance(Segment::new(p(4., 0., 2.5), p(4., 0., 3.0)), Side::Tx);
        assert!(matches!(out, StepOutcome::Reflected(_)));
        assert_eq!(side, Side::Tx);
        // From there, moving further +z must still be blocked.
        let (out, side) = t.advance(Segment::new(out.point(), p(4., 0., 3.4)), side);
        assert!(matches!(out, StepOutcome::Reflected(_)));
        assert_eq!(side, Side::Tx);
        assert!(out.point().z < 3.0);
        // Moving back -z from the plane is a free step.
        let (out, side) = t.advance(Segment::new(p(4., 0., 3.0), p(4., 0., 2.6)), Side::Tx);
        assert_eq!(out, StepOutcome::Free(p(4., 0., 2.6)));
        assert_eq!(side, Side::Tx);
    }

    #[test]
    fn zero_offset_shares_canonical_bytes() {
        let a = Topology::new(TopologySpec::free_space_default().with_plane(ApertureSpec {
            phi_off: 1.0,
            ..ApertureSpec::concentric(3.0, 2.0)
        }))
        .unwrap();
        let b = Topology::new(
            TopologySpec::free_space_default().with_plane(ApertureSpec::concentric(3.0, 2.0)),
        )
        .unwrap();
        assert_eq!(a.canonical_bytes(), b.canonical_bytes());
        let c = Topology::new(
            TopologySpec::free_space_default().with_plane(ApertureSpec::concentric(3.0, 2.2)),
        )
        .unwrap();
        assert_ne!(a.canonical_bytes(), c.canonical_bytes());
    }

    #[test]
    fn serde_roundtrip_validates() {
        let json = r#"{"d":5,"r_r":5,"D":79.4,"plane":{"d_a":3,"r_a":2.4}}"#;
        let t: Topology = serde_json::from_str(json).unwrap();
        assert_eq!(t.plane().unwrap().r_a, 2.4);
        let bad = r#"{"d":5,"r_r":5,"D":79.4,"plane":{"d_a":6,"r_a":2.4}}"#;
        assert!(serde_json::from_str::<Topology>(bad).is_err());
    }

    fn arb_topology() -> impl Strategy<Value = Topology> {
        (0.5f64..4.5, 0.0f64..4.0, 0.0f64..2.0, 0.0f64..6.3, -0.6f64..0.6).prop_filter_map(
            "valid geometry",
            |(d_a, r_a, r_off, phi_off, theta)| {
                Topology::new(TopologySpec::free_space_default().with_plane(ApertureSpec {
                    d_a,
                    r_a,
                    r_off,
                    phi_off,
                    theta,
                }))
                .ok()
            },
        )
    }

    fn arb_point() -> impl Strategy<Value = Point3> {
        (-8.0f64..8.0, -8.0f64..8.0, -3.0f64..8.0).prop_map(|(x, y, z)| p(x, y, z))
    }

    #[test]
    fn clearance_examples() {
        let t = plane_z3(2.0);
        // Straight below the disc, then off to the side of its rim.
        assert_relative_eq!(t.clearance(p(0., 0., 1.), Side::Tx), 2.0, epsilon = 1e-12);
        assert_relative_eq!(t.clearance(p(5., 0., -1.), Side::Tx), 5.0, epsilon = 1e-12);
        // Receiver side: receiver surface at z = 5, its mirror image at z = 1.
        assert_relative_eq!(t.clearance(p(0., 0., 4.5), Side::Rx), 0.5, epsilon = 1e-12);
        let far = t.clearance(p(40., 0., 3.5), Side::Rx);
        assert_relative_eq!(far, (1600.0f64 + 6.5 * 6.5).sqrt() - 5.0, epsilon = 1e-12);
        assert_eq!(plane_z3(0.0).clearance(p(0., 0., 2.9), Side::Tx), f64::INFINITY);
        let free = t.without_plane();
        assert_relative_eq!(free.clearance(Point3::ORIGIN, Side::Tx), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn fold_mirrors_only_across() {
        let t = plane_z3(2.0);
        assert_eq!(t.fold(p(7., 1., 2.), Side::Tx), p(7., 1., 2.));
        let q = t.fold(p(7., 1., 4.5), Side::Tx);
        assert_relative_eq!(q.z, 1.5, epsilon = 1e-12);
        let q = t.fold(p(7., 1., 2.), Side::Rx);
        assert_relative_eq!(q.z, 4.0, epsilon = 1e-12);
        assert_eq!(t.without_plane().fold(p(0., 0., 9.), Side::Tx), p(0., 0., 9.));
    }

    proptest! {
        #[test]
        fn reflection_stays_on_start_side(t in arb_topology(), a in arb_point(), b in arb_point()) {
            let plane = *t.plane().unwrap();
            prop_assume!(plane.signed_distance(a).abs() > 1e-9);
            if let StepOutcome::Reflected(q) = t.reflect_step(Segment::new(a, b)) {
                prop_assert!(plane.signed_distance(q) * plane.signed_distance(a) >= 0.0);
                // Mirroring twice recovers the proposal.
                let back = plane.mirror(q, plane.signed_distance(q));
                prop_assert!((back - b).norm() < 1e-9);
            }
        }

        #[test]
        fn concentric_aperture_is_rotationally_symmetric(r in 0.0f64..5.0, a in 0.0f64..6.3, b in 0.0f64..6.3) {
            let t = plane_z3(2.4);
            let (sa, ca) = a.sin_cos();
            let (sb, cb) = b.sin_cos();
            prop_assume!((r - 2.4).abs() > 1e-9);
            prop_assert_eq!(
                t.in_aperture(p(r * ca, r * sa, 3.0)),
                t.in_aperture(p(r * cb, r * sb, 3.0))
            );
        }

        #[test]
        fn crossing_point_lies_on_plane(t in arb_topology(), a in arb_point(), b in arb_point()) {
            let plane = *t.plane().unwrap();
            if let Some((s, q)) = t.plane_crossing(Segment::new(a, b)) {
                prop_assert!(s > 0.0 && s <= 1.0);
                prop_assert!(plane.signed_distance(q).abs() < 1e-9);
            }
        }
    }
}
