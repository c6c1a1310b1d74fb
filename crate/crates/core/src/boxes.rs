//! 7-parameter 3D boxes and rotated-rectangle IoU.
//!
//! The intersection of two rotated BEV rectangles is computed exactly by
//! Sutherland-Hodgman convex clipping plus the shoelace area. The clipping
//! code is generic over a scalar so the same algorithm serves both the
//! plain `f64` metric and the autodiff loss path (branch decisions are
//! taken on forward values either way).

use crate::tensor::tape::Var;

/// A 7-parameter box: center, extents, yaw. At regression time the center
/// fields hold offsets relative to a voxel center; after decoding they are
/// absolute world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    /// Length along the heading axis.
    pub l: f64,
    /// Width across the heading axis.
    pub w: f64,
    /// Vertical extent.
    pub h: f64,
    /// Heading in radians, normalized to [-pi, pi).
    pub yaw: f64,
}

impl Box3D {
    pub fn new(cx: f64, cy: f64, cz: f64, l: f64, w: f64, h: f64, yaw: f64) -> Self {
        Box3D { cx, cy, cz, l, w, h, yaw: wrap_angle(yaw) }
    }

    pub fn bev_area(&self) -> f64 {
        self.l * self.w
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    /// BEV corners in counterclockwise order.
    pub fn bev_corners(&self) -> [(f64, f64); 4] {
        bev_corners_generic(self.cx, self.cy, self.l, self.w, self.yaw)
    }

    /// True when `(x, y)` lies inside the BEV rectangle (boundary included).
    pub fn contains_bev(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        let lx = dx * c + dy * s;
        let ly = -dx * s + dy * c;
        lx.abs() <= self.l * 0.5 && ly.abs() <= self.w * 0.5
    }

    /// True when the 3D point lies inside the box (boundary included).
    pub fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        self.contains_bev(x, y) && (z - self.cz).abs() <= self.h * 0.5
    }

    /// Axis-aligned BEV bounding rectangle `(min_x, min_y, max_x, max_y)`.
    pub fn bev_aabb(&self) -> (f64, f64, f64, f64) {
        let cs = self.bev_corners();
        let mut min_x = f64::INFINITY;
        let mut min_y = f64::INFINITY;
        let mut max_x = f64::NEG_INFINITY;
        let mut max_y = f64::NEG_INFINITY;
        for (x, y) in cs {
            min_x = min_x.min(x);
            min_y = min_y.min(y);
            max_x = max_x.max(x);
            max_y = max_y.max(y);
        }
        (min_x, min_y, max_x, max_y)
    }
}

/// Normalize an angle to [-pi, pi).
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut x = (a + std::f64::consts::PI).rem_euclid(two_pi);
    if x < 0.0 {
        x += two_pi;
    }
    x - std::f64::consts::PI
}

/// Scalar abstraction shared by the f64 and autodiff IoU paths. Branching
/// is always done on the forward value.
pub trait Real: Copy {
    fn val(self) -> f64;
    /// A constant literal in the same computational context as `self`.
    fn lit(self, v: f64) -> Self;
    fn add(self, o: Self) -> Self;
    fn sub(self, o: Self) -> Self;
    fn mul(self, o: Self) -> Self;
    fn div(self, o: Self) -> Self;
    fn sin_r(self) -> Self;
    fn cos_r(self) -> Self;
    fn min_r(self, o: Self) -> Self;
    fn max_r(self, o: Self) -> Self;
}

impl Real for f64 {
    fn val(self) -> f64 { self }
    fn lit(self, v: f64) -> Self { v }
    fn add(self, o: Self) -> Self { self + o }
    fn sub(self, o: Self) -> Self { self - o }
    fn mul(self, o: Self) -> Self { self * o }
    fn div(self, o: Self) -> Self { self / o }
    fn sin_r(self) -> Self { self.sin() }
    fn cos_r(self) -> Self { self.cos() }
    fn min_r(self, o: Self) -> Self { self.min(o) }
    fn max_r(self, o: Self) -> Self { self.max(o) }
}

impl<'t> Real for Var<'t> {
    fn val(self) -> f64 { self.item() }
    fn lit(self, v: f64) -> Self { self.tape().scalar(v) }
    fn add(self, o: Self) -> Self { Var::add(self, o) }
    fn sub(self, o: Self) -> Self { Var::sub(self, o) }
    fn mul(self, o: Self) -> Self { Var::mul(self, o) }
    fn div(self, o: Self) -> Self { Var::div(self, o) }
    fn sin_r(self) -> Self { self.sin() }
    fn cos_r(self) -> Self { self.cos() }
    fn min_r(self, o: Self) -> Self { self.min2(o) }
    fn max_r(self, o: Self) -> Self { self.max2(o) }
}

/// Box parameters over a generic scalar (used by the differentiable loss).
#[derive(Clone, Copy)]
pub struct BoxParams<T: Real> {
    pub cx: T,
    pub cy: T,
    pub cz: T,
    pub l: T,
    pub w: T,
    pub h: T,
    pub yaw: T,
}

impl From<Box3D> for BoxParams<f64> {
    fn from(b: Box3D) -> Self {
        BoxParams { cx: b.cx, cy: b.cy, cz: b.cz, l: b.l, w: b.w, h: b.h, yaw: b.yaw }
    }
}

fn bev_corners_generic_t<T: Real>(cx: T, cy: T, l: T, w: T, yaw: T) -> [(T, T); 4] {
    let half = cx.lit(0.5);
    let hl = l.mul(half);
    let hw = w.mul(half);
    let c = yaw.cos_r();
    let s = yaw.sin_r();
    let zero = cx.lit(0.0);
    let neg = |t: T| zero.sub(t);
    // counterclockwise in the local frame
    let local = [(hl, hw), (neg(hl), hw), (neg(hl), neg(hw)), (hl, neg(hw))];
    local.map(|(x, y)| {
        (
            cx.add(x.mul(c).sub(y.mul(s))),
            cy.add(x.mul(s).add(y.mul(c))),
        )
    })
}

fn bev_corners_generic(cx: f64, cy: f64, l: f64, w: f64, yaw: f64) -> [(f64, f64); 4] {
    bev_corners_generic_t(cx, cy, l, w, yaw)
}

/// Clip a convex polygon against the half-plane left of edge `(e1, e2)`.
fn clip_edge<T: Real>(poly: &[(T, T)], e1: (T, T), e2: (T, T)) -> Vec<(T, T)> {
    let mut out = Vec::with_capacity(poly.len() + 1);
    let n = poly.len();
    let side = |p: &(T, T)| -> T {
        // cross((e2 - e1), (p - e1)): positive inside for CCW clip polygons
        let ex = e2.0.sub(e1.0);
        let ey = e2.1.sub(e1.1);
        let px = p.0.sub(e1.0);
        let py = p.1.sub(e1.1);
        ex.mul(py).sub(ey.mul(px))
    };
    for i in 0..n {
        let cur = poly[i];
        let nxt = poly[(i + 1) % n];
        let d_cur = side(&cur);
        let d_nxt = side(&nxt);
        let cur_in = d_cur.val() >= 0.0;
        let nxt_in = d_nxt.val() >= 0.0;
        if cur_in {
            out.push(cur);
        }
        if cur_in != nxt_in {
            // intersection point: cur + t (nxt - cur), t = d_cur / (d_cur - d_nxt)
            let t = d_cur.div(d_cur.sub(d_nxt));
            let ix = cur.0.add(t.mul(nxt.0.sub(cur.0)));
            let iy = cur.1.add(t.mul(nxt.1.sub(cur.1)));
            out.push((ix, iy));
        }
    }
    out
}

/// Signed shoelace area (positive for counterclockwise polygons).
fn shoelace<T: Real>(poly: &[(T, T)]) -> T {
    let zero = poly[0].0.lit(0.0);
    let mut acc = zero;
    let n = poly.len();
    for i in 0..n {
        let (x1, y1) = poly[i];
        let (x2, y2) = poly[(i + 1) % n];
        acc = acc.add(x1.mul(y2).sub(x2.mul(y1)));
    }
    acc.mul(zero.lit(0.5))
}

/// Intersection area of two rotated BEV rectangles (exact, via clipping).
pub fn bev_intersection_area<T: Real>(a: &BoxParams<T>, b: &BoxParams<T>) -> T {
    let zero = a.cx.lit(0.0);
    let pa = bev_corners_generic_t(a.cx, a.cy, a.l, a.w, a.yaw);
    let pb = bev_corners_generic_t(b.cx, b.cy, b.l, b.w, b.yaw);
    let mut poly: Vec<(T, T)> = pa.to_vec();
    for i in 0..4 {
        if poly.len() < 3 {
            return zero;
        }
        poly = clip_edge(&poly, pb[i], pb[(i + 1) % 4]);
    }
    if poly.len() < 3 {
        return zero;
    }
    let area = shoelace(&poly);
    // clipping a CCW polygon by a CCW polygon keeps CCW order; clamp
    // tiny negatives from degenerate slivers
    area.max_r(zero)
}

/// Rotated BEV IoU in [0, 1]. Degenerate (non-positive area) boxes give 0.
pub fn rotated_bev_iou_generic<T: Real>(a: &BoxParams<T>, b: &BoxParams<T>) -> T {
    let zero = a.cx.lit(0.0);
    let area_a = a.l.mul(a.w);
    let area_b = b.l.mul(b.w);
    if area_a.val() <= 0.0 || area_b.val() <= 0.0 {
        return zero;
    }
    let inter = bev_intersection_area(a, b);
    let union = area_a.add(area_b).sub(inter);
    if union.val() <= 0.0 {
        return zero;
    }
    inter.div(union)
}

/// Rotated IoU extended to 3D by z-interval overlap.
pub fn rotated_iou_3d_generic<T: Real>(a: &BoxParams<T>, b: &BoxParams<T>) -> T {
    let zero = a.cx.lit(0.0);
    let vol_a = a.l.mul(a.w).mul(a.h);
    let vol_b = b.l.mul(b.w).mul(b.h);
    if vol_a.val() <= 0.0 || vol_b.val() <= 0.0 {
        return zero;
    }
    let half = a.cx.lit(0.5);
    let top = a.cz.add(a.h.mul(half)).min_r(b.cz.add(b.h.mul(half)));
    let bot = a.cz.sub(a.h.mul(half)).max_r(b.cz.sub(b.h.mul(half)));
    let dz = top.sub(bot).max_r(zero);
    let inter = bev_intersection_area(a, b).mul(dz);
    let union = vol_a.add(vol_b).sub(inter);
    if union.val() <= 0.0 {
        return zero;
    }
    inter.div(union)
}

/// Exact rotated BEV IoU of two boxes. Symmetric by construction (the
/// argument pair is canonically ordered before clipping) and exactly 1 for
/// identical non-degenerate boxes.
pub fn rotated_bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    if a.bev_area() <= 0.0 || b.bev_area() <= 0.0 {
        return 0.0;
    }
    if a == b {
        return 1.0;
    }
    let key = |x: &Box3D| (x.cx, x.cy, x.l, x.w, x.yaw);
    let (first, second) = if key(a) <= key(b) { (a, b) } else { (b, a) };
    rotated_bev_iou_generic::<f64>(&(*first).into(), &(*second).into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mc_bev_iou(a: &Box3D, b: &Box3D, n_side: usize, seed: u64) -> f64 {
        // stratified jittered sampling over the union AABB
        let (ax0, ay0, ax1, ay1) = a.bev_aabb();
        let (bx0, by0, bx1, by1) = b.bev_aabb();
        let (x0, y0) = (ax0.min(bx0), ay0.min(by0));
        let (x1, y1) = (ax1.max(bx1), ay1.max(by1));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut hits_both, mut hits_any) = (0u64, 0u64);
        for i in 0..n_side {
            for j in 0..n_side {
                let x = x0 + (x1 - x0) * ((i as f64 + rng.gen::<f64>()) / n_side as f64);
                let y = y0 + (y1 - y0) * ((j as f64 + rng.gen::<f64>()) / n_side as f64);
                let ina = a.contains_bev(x, y);
                let inb = b.contains_bev(x, y);
                if ina && inb {
                    hits_both += 1;
                }
                if ina || inb {
                    hits_any += 1;
                }
            }
        }
        if hits_any == 0 {
            0.0
        } else {
            hits_both as f64 / hits_any as f64
        }
    }

    #[test]
    fn identical_boxes_iou_one() {
        let b = Box3D::new(1.0, 2.0, 0.5, 4.0, 2.0, 1.5, 0.3);
        assert_eq!(rotated_bev_iou(&b, &b), 1.0);
    }

    #[test]
    fn disjoint_boxes_iou_zero() {
        let a = Box3D::new(0.0, 0.0, 0.0, 2.0, 2.0, 1.0, 0.0);
        let b = Box3D::new(10.0, 0.0, 0.0, 2.0, 2.0, 1.0, 0.7);
        assert_eq!(rotated_bev_iou(&a, &b), 0.0);
    }

    #[test]
    fn unit_squares_at_45_degrees() {
        // coincident centers, one square rotated 45 degrees:
        // intersection is a regular octagon with area 8 (sqrt(2) - 1).
        let a = Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        let b = Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, std::f64::consts::FRAC_PI_4);
        let inter = 8.0 * (std::f64::consts::SQRT_2 - 1.0) / 4.0 * 0.5;
        // analytic: octagon area = 2 (sqrt 2 - 1) for unit squares
        let analytic_inter = 2.0 * (std::f64::consts::SQRT_2 - 1.0);
        let _ = inter;
        let analytic_iou = analytic_inter / (2.0 - analytic_inter);
        let got = rotated_bev_iou(&a, &b);
        assert!((got - analytic_iou).abs() < 1e-12, "got {got}, want {analytic_iou}");
        let mc = mc_bev_iou(&a, &b, 1500, 9);
        assert!((got - mc).abs() < 1e-3, "mc {mc} vs exact {got}");
    }

    #[test]
    fn symmetry_and_self() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let a = random_box(&mut rng);
            let b = random_box(&mut rng);
            let ab = rotated_bev_iou(&a, &b);
            let ba = rotated_bev_iou(&b, &a);
            assert!((ab - ba).abs() < 1e-12);
            assert_eq!(rotated_bev_iou(&a, &a), 1.0);
        }
    }

    #[test]
    fn translation_and_joint_rotation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let a = random_box(&mut rng);
            let b = random_box(&mut rng);
            let base = rotated_bev_iou(&a, &b);
            // translate both
            let t = |bx: &Box3D| Box3D::new(bx.cx + 3.5, bx.cy - 1.25, bx.cz, bx.l, bx.w, bx.h, bx.yaw);
            let shifted = rotated_bev_iou(&t(&a), &t(&b));
            assert!((base - shifted).abs() < 1e-9);
            // rotate both about the origin by the same angle
            let ang: f64 = 0.83;
            let r = |bx: &Box3D| {
                let (c, s) = (ang.cos(), ang.sin());
                Box3D::new(
                    bx.cx * c - bx.cy * s,
                    bx.cx * s + bx.cy * c,
                    bx.cz,
                    bx.l,
                    bx.w,
                    bx.h,
                    bx.yaw + ang,
                )
            };
            let rotated = rotated_bev_iou(&r(&a), &r(&b));
            assert!((base - rotated).abs() < 1e-9, "base {base} rotated {rotated}");
        }
    }

    #[test]
    fn degenerate_box_gives_zero() {
        let a = Box3D::new(0.0, 0.0, 0.0, 0.0, 2.0, 1.0, 0.0);
        let b = Box3D::new(0.0, 0.0, 0.0, 2.0, 2.0, 1.0, 0.0);
        assert_eq!(rotated_bev_iou(&a, &b), 0.0);
    }

    #[test]
    fn monte_carlo_agreement_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for case in 0..30 {
            let a = random_box(&mut rng);
            // keep b in a's neighborhood so overlaps actually occur
            let b = Box3D::new(
                a.cx + rng.gen_range(-2.0..2.0),
                a.cy + rng.gen_range(-2.0..2.0),
                0.0,
                rng.gen_range(0.8..5.0),
                rng.gen_range(0.8..3.0),
                1.0,
                rng.gen_range(-3.1..3.1),
            );
            let exact = rotated_bev_iou(&a, &b);
            let mc = mc_bev_iou(&a, &b, 1500, 100 + case);
            assert!((exact - mc).abs() < 1.5e-3, "case {case}: exact {exact} mc {mc}");
        }
    }

    fn random_box(rng: &mut ChaCha8Rng) -> Box3D {
        Box3D::new(
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-5.0..5.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(0.8..5.0),
            rng.gen_range(0.8..3.0),
            rng.gen_range(0.5..2.5),
            rng.gen_range(-3.1..3.1),
        )
    }

    #[test]
    fn wrap_angle_range() {
        for a in [-10.0, -3.15, 0.0, 3.15, 10.0, 100.0] {
            let w = wrap_angle(a);
            assert!((-std::f64::consts::PI..std::f64::consts::PI).contains(&w));
        }
    }
}
