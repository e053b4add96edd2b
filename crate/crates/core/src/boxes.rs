//! Axis-aligned box algebra and the IoU loss family.
//!
//! Boxes are center-size `(cx, cy, w, h)`. Every function is written once
//! against [`BoxScalar`], so the same code evaluates plain values and
//! forward-mode [`Dual`] numbers carrying the gradient with respect to the
//! predicted box.

use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::error::{Error, Result};
use crate::graph::{Graph, Value, Var};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Guard added to every denominator.
pub const BOX_EPS: f64 = 1e-9;
/// Auxiliary box scale used by Inner-IoU unless configured otherwise.
pub const DEFAULT_INNER_RATIO: f64 = 1.25;
/// Exponent of the SIoU shape cost.
pub const SHAPE_THETA: i32 = 4;

pub trait BoxScalar:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;

    fn max(self, o: Self) -> Self {
        if self.value() >= o.value() {
            self
        } else {
            o
        }
    }

    fn min(self, o: Self) -> Self {
        if self.value() <= o.value() {
            self
        } else {
            o
        }
    }

    fn powi(self, n: i32) -> Self {
        (1..n).fold(self, |acc, _| acc * self)
    }
}

macro_rules! float_box_scalar {
    ($t:ty) => {
        impl BoxScalar for $t {
            fn cst(v: f64) -> Self {
                v as $t
            }
            fn value(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
        }
    };
}

float_box_scalar!(f32);
float_box_scalar!(f64);

/// Value plus partial derivatives with respect to the four coordinates of
/// one box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual<T> {
    pub v: T,
    pub d: [T; 4],
}

impl<T: Scalar> Dual<T> {
    pub fn constant(v: T) -> Self {
        Dual { v, d: [T::zero(); 4] }
    }

    pub fn variable(v: T, i: usize) -> Self {
        let mut d = [T::zero(); 4];
        d[i] = T::one();
        Dual { v, d }
    }

    fn chain(self, v: T, dv: T) -> Self {
        Dual { v, d: self.d.map(|x| x * dv) }
    }
}

impl<T: Scalar> Add for Dual<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Dual { v: self.v + o.v, d: std::array::from_fn(|i| self.d[i] + o.d[i]) }
    }
}

impl<T: Scalar> Sub for Dual<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Dual { v: self.v - o.v, d: std::array::from_fn(|i| self.d[i] - o.d[i]) }
    }
}

impl<T: Scalar> Mul for Dual<T> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Dual { v: self.v * o.v, d: std::array::from_fn(|i| self.d[i] * o.v + self.v * o.d[i]) }
    }
}

impl<T: Scalar> Div for Dual<T> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let q = self.v / o.v;
        Dual { v: q, d: std::array::from_fn(|i| (self.d[i] - q * o.d[i]) / o.v) }
    }
}

impl<T: Scalar> Neg for Dual<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Dual { v: -self.v, d: self.d.map(|x| -x) }
    }
}

impl<T: Scalar> BoxScalar for Dual<T> {
    fn cst(v: f64) -> Self {
        Dual::constant(T::lit(v))
    }
    fn value(self) -> f64 {
        self.v.to_f64_lossy()
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e)
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        // d sqrt at 0 is unbounded; report zero there rather than inf.
        let ds = if s > T::zero() { T::lit(0.5) / s } else { T::zero() };
        self.chain(s, ds)
    }
    fn abs(self) -> Self {
        let sign = if self.v > T::zero() {
            T::one()
        } else if self.v < T::zero() {
            -T::one()
        } else {
            T::zero()
        };
        self.chain(self.v.abs(), sign)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bbox<T> {
    pub cx: T,
    pub cy: T,
    pub w: T,
    pub h: T,
}

/// Corner form `(x1, y1, x2, y2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Corners<T> {
    pub x1: T,
    pub y1: T,
    pub x2: T,
    pub y2: T,
}

impl<T: Copy> Bbox<T> {
    pub fn new(cx: T, cy: T, w: T, h: T) -> Self {
        Bbox { cx, cy, w, h }
    }

    pub fn from_array(a: [T; 4]) -> Self {
        Bbox { cx: a[0], cy: a[1], w: a[2], h: a[3] }
    }

    pub fn to_array(self) -> [T; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

impl<T: BoxScalar> Bbox<T> {
    pub fn corners(self) -> Corners<T> {
        let half = T::cst(0.5);
        Corners {
            x1: self.cx - half * self.w,
            y1: self.cy - half * self.h,
            x2: self.cx + half * self.w,
            y2: self.cy + half * self.h,
        }
    }

    pub fn from_corners(c: Corners<T>) -> Self {
        let half = T::cst(0.5);
        Bbox { cx: half * (c.x1 + c.x2), cy: half * (c.y1 + c.y2), w: c.x2 - c.x1, h: c.y2 - c.y1 }
    }

    /// Area from the corner form, so a box intersected with itself gives
    /// exactly its own area.
    pub fn area(self) -> T {
        let c = self.corners();
        let zero = T::cst(0.0);
        (c.x2 - c.x1).max(zero) * (c.y2 - c.y1).max(zero)
    }

    /// Same center, sides multiplied by `ratio`.
    pub fn scaled(self, ratio: f64) -> Self {
        let r = T::cst(ratio);
        Bbox { cx: self.cx, cy: self.cy, w: self.w * r, h: self.h * r }
    }
}

impl Bbox<f64> {
    pub fn lift<T: Scalar>(self) -> Bbox<T> {
        Bbox { cx: T::lit(self.cx), cy: T::lit(self.cy), w: T::lit(self.w), h: T::lit(self.h) }
    }
}

fn overlap<T: BoxScalar>(lo_a: T, hi_a: T, lo_b: T, hi_b: T) -> T {
    (hi_a.min(hi_b) - lo_a.max(lo_b)).max(T::cst(0.0))
}

/// Intersection and union areas.
pub fn inter_union<T: BoxScalar>(a: Bbox<T>, b: Bbox<T>) -> (T, T) {
    let (p, q) = (a.corners(), b.corners());
    let inter = overlap(p.x1, p.x2, q.x1, q.x2) * overlap(p.y1, p.y2, q.y1, q.y2);
    (inter, a.area() + b.area() - inter)
}

/// Width and height of the smallest box enclosing both.
pub fn hull<T: BoxScalar>(a: Bbox<T>, b: Bbox<T>) -> (T, T) {
    let (p, q) = (a.corners(), b.corners());
    (p.x2.max(q.x2) - p.x1.min(q.x1), p.y2.max(q.y2) - p.y1.min(q.y1))
}

fn guarded<T: BoxScalar>(x: T) -> T {
    x.max(T::cst(BOX_EPS))
}

pub fn iou<T: BoxScalar>(a: Bbox<T>, b: Bbox<T>) -> T {
    let (inter, union) = inter_union(a, b);
    inter / guarded(union)
}

pub fn giou<T: BoxScalar>(a: Bbox<T>, b: Bbox<T>) -> T {
    let (inter, union) = inter_union(a, b);
    let (hw, hh) = hull(a, b);
    let enclosing = guarded(hw * hh);
    // The hull contains the union; for nested boxes the difference can
    // round to a hair below zero.
    let gap = (enclosing - union).max(T::cst(0.0));
    inter / guarded(union) - gap / enclosing
}

/// IoU of the two boxes after scaling each about its own center.
pub fn inner_iou<T: BoxScalar>(a: Bbox<T>, b: Bbox<T>, ratio: f64) -> T {
    iou(a.scaled(ratio), b.scaled(ratio))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SiouTerms<T> {
    pub loss: T,
    pub iou: T,
    pub angle: T,
    pub distance: T,
    pub shape: T,
}

/// SIoU loss of `pred` against `gt`.
///
/// The angle cost `1 - 2 sin²(arcsin(c_h/σ) - π/4)` equals `sin(2 arcsin(c_h/σ))`,
/// computed here as `2 c_w c_h / σ²`, which stays smooth at the axes.
pub fn siou<T: BoxScalar>(pred: Bbox<T>, gt: Bbox<T>) -> SiouTerms<T> {
    let zero = T::cst(0.0);
    let one = T::cst(1.0);
    let iou_v = iou(pred, gt);
    let c_w = (gt.cx - pred.cx).abs();
    let c_h = (gt.cy - pred.cy).abs();
    let sigma = guarded((c_w * c_w + c_h * c_h).sqrt());
    let angle = T::cst(2.0) * c_w * c_h / (sigma * sigma);

    let (hw, hh) = hull(pred, gt);
    let rho_x = (c_w / guarded(hw)).powi(2);
    let rho_y = (c_h / guarded(hh)).powi(2);
    let gamma = T::cst(2.0) - angle;
    let distance = (one - (zero - gamma * rho_x).exp()) + (one - (zero - gamma * rho_y).exp());

    let omega_w = (pred.w - gt.w).abs() / guarded(pred.w.max(gt.w));
    let omega_h = (pred.h - gt.h).abs() / guarded(pred.h.max(gt.h));
    let shape = (one - (-omega_w).exp()).powi(SHAPE_THETA) + (one - (-omega_h).exp()).powi(SHAPE_THETA);

    let loss = one - iou_v + T::cst(0.5) * (distance + shape);
    SiouTerms { loss, iou: iou_v, angle, distance, shape }
}

/// `L_SIoU + IoU - InnerIoU(ratio)`.
pub fn inner_siou_loss<T: BoxScalar>(pred: Bbox<T>, gt: Bbox<T>, ratio: f64) -> T {
    let s = siou(pred, gt);
    s.loss + s.iou - inner_iou(pred, gt, ratio)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub iou: f64,
    pub giou: f64,
    pub siou: f64,
    pub inner_iou: f64,
    pub inner_siou: f64,
    pub angle_cost: f64,
    pub distance_cost: f64,
    pub shape_cost: f64,
}

pub fn breakdown(pred: Bbox<f64>, gt: Bbox<f64>, ratio: f64) -> LossBreakdown {
    let s = siou(pred, gt);
    LossBreakdown {
        iou: s.iou,
        giou: giou(pred, gt),
        siou: s.loss,
        inner_iou: inner_iou(pred, gt, ratio),
        inner_siou: inner_siou_loss(pred, gt, ratio),
        angle_cost: s.angle,
        distance_cost: s.distance,
        shape_cost: s.shape,
    }
}

/// Box regression loss used for matched pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BoxLoss {
    /// `1 - GIoU`.
    Giou,
    Siou,
    InnerSiou { ratio: f64 },
}

impl BoxLoss {
    pub fn parse(name: &str, ratio: f64) -> Result<Self> {
        match name {
            "giou" => Ok(BoxLoss::Giou),
            "siou" => Ok(BoxLoss::Siou),
            "inner_siou" | "inner-siou" => {
                if !(ratio > 0.0 && ratio.is_finite()) {
                    return Err(Error::Config(format!("inner ratio must be positive, got {ratio}")));
                }
                Ok(BoxLoss::InnerSiou { ratio })
            }
            other => Err(Error::Config(format!("unknown box loss `{other}` (expected giou, siou or inner_siou)"))),
        }
    }

    pub fn eval<T: BoxScalar>(self, pred: Bbox<T>, gt: Bbox<T>) -> T {
        match self {
            BoxLoss::Giou => T::cst(1.0) - giou(pred, gt),
            BoxLoss::Siou => siou(pred, gt).loss,
            BoxLoss::InnerSiou { ratio } => inner_siou_loss(pred, gt, ratio),
        }
    }

    /// Loss value and its gradient with respect to `pred`'s `(cx, cy, w, h)`.
    pub fn value_and_grad<T: Scalar>(self, pred: Bbox<T>, gt: Bbox<T>) -> (T, [T; 4]) {
        value_and_grad(|p, g| self.eval(p, g), pred, gt)
    }
}

/// Evaluates `f(pred, gt)` with dual numbers seeded on `pred`.
pub fn value_and_grad<T: Scalar>(
    f: impl Fn(Bbox<Dual<T>>, Bbox<Dual<T>>) -> Dual<T>,
    pred: Bbox<T>,
    gt: Bbox<T>,
) -> (T, [T; 4]) {
    let p = Bbox::from_array(std::array::from_fn(|i| Dual::variable(pred.to_array()[i], i)));
    let g = Bbox::from_array(gt.to_array().map(Dual::constant));
    let out = f(p, g);
    (out.v, out.d)
}

impl<T: Scalar> Graph<T> {
    /// `Σ_i loss(pred_i, gt_i)` for predictions laid out as `(1, 4, N, 1)`.
    pub fn box_loss_sum(&mut self, pred: Var, gts: &[Bbox<f64>], loss: BoxLoss) -> Result<Var> {
        let t = self.try_tensor(pred)?;
        let s = t.shape();
        if s != Shape::new(1, 4, gts.len(), 1) {
            return Err(Error::Shape(format!("box_loss_sum needs (1, 4, {}, 1) predictions, got {s}", gts.len())));
        }
        let mut total = T::zero();
        let mut grad = Tensor::zeros(s);
        for (i, gt) in gts.iter().enumerate() {
            let p = Bbox::from_array(std::array::from_fn(|j| t.at(0, j, i, 0)));
            let (v, d) = loss.value_and_grad(p, gt.lift());
            total += v;
            for (j, dj) in d.into_iter().enumerate() {
                grad.set(0, j, i, 0, dj);
            }
        }
        Ok(self.record_real(
            "box_loss_sum",
            &[pred],
            Tensor::scalar(total),
            Box::new(move |g, _, _| {
                let k = g.as_real()?.item()?;
                Ok(vec![Some(Value::Real(grad.map(|v| v * k)))])
            }),
        ))
    }
}

/// Ground-truth or detected boxes of one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BoxSet {
    pub boxes: Vec<Bbox<f64>>,
    pub classes: Vec<usize>,
    /// Detection confidences; empty for ground truth.
    pub scores: Vec<f64>,
}

impl BoxSet {
    pub fn new(boxes: Vec<Bbox<f64>>, classes: Vec<usize>) -> Result<Self> {
        if boxes.len() != classes.len() {
            return Err(Error::Construction(format!("{} boxes but {} class ids", boxes.len(), classes.len())));
        }
        Ok(BoxSet { boxes, classes, scores: Vec::new() })
    }

    pub fn scored(boxes: Vec<Bbox<f64>>, classes: Vec<usize>, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != boxes.len() {
            return Err(Error::Construction(format!("{} boxes but {} scores", boxes.len(), scores.len())));
        }
        let mut s = Self::new(boxes, classes)?;
        s.scores = scores;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Checks the ground-truth invariants: positive sizes inside `[0, 1]`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for (b, &c) in self.boxes.iter().zip(&self.classes) {
            let k = b.corners();
            let inside = [k.x1, k.y1, k.x2, k.y2].iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v));
            if !(b.w > 0.0 && b.h > 0.0 && inside) {
                return Err(Error::Contract(format!("box {b:?} is degenerate or outside the unit square")));
            }
            if c >= num_classes {
                return Err(Error::Contract(format!("class id {c} out of range for {num_classes} classes")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> Bbox<f64> {
        Bbox::new(cx, cy, w, h)
    }

    #[test]
    fn giou_of_nested_boxes_never_exceeds_iou() {
        let outer = b(0.6330660068981555, 0.7289770276454691, 0.49827840174695975, 0.4951696568298767);
        let inner = b(0.6416286670141631, 0.8809595439351802, 0.3184895925526813, 0.015458402177134744);
        assert!(giou(outer, inner) <= iou(outer, inner));
        assert_eq!(giou(outer, inner), iou(outer, inner));
    }

    #[test]
    fn corner_roundtrip() {
        let x = b(0.3, 0.7, 0.2, 0.05);
        let c = x.corners();
        assert!((c.x1 - 0.2).abs() < 1e-15 && (c.y2 - 0.725).abs() < 1e-15);
        let y = Bbox::from_corners(c);
        for (p, q) in x.to_array().iter().zip(y.to_array()) {
            assert!((p - q).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_boxes() {
        let x = b(0.5, 0.5, 0.3, 0.2);
        assert_eq!(iou(x, x), 1.0);
        assert_eq!(giou(x, x), 1.0);
        let s = siou(x, x);
        assert_eq!((s.loss, s.angle, s.distance, s.shape), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(inner_siou_loss(x, x, 1.25), 0.0);
    }

    #[test]
    fn disjoint_boxes_have_negative_giou() {
        let (x, y) = (b(0.1, 0.1, 0.1, 0.1), b(0.9, 0.9, 0.1, 0.1));
        assert_eq!(iou(x, y), 0.0);
        assert!(giou(x, y) < 0.0);
    }

    #[test]
    fn inner_iou_hand_case() {
        // Unit boxes offset by 0.5: scaled sides 1.25 overlap over 1.25 - 0.5.
        let (x, y) = (b(0.0, 0.0, 1.0, 1.0), b(0.5, 0.0, 1.0, 1.0));
        let inter = 0.75 * 1.25;
        let expect = inter / (2.0 * 1.25 * 1.25 - inter);
        assert!((inner_iou(x, y, 1.25) - expect).abs() < 1e-15);
        assert!((iou(x, y) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn vertical_shift_has_zero_angle_cost() {
        let (x, y) = (b(0.5, 0.4, 0.2, 0.2), b(0.5, 0.5, 0.2, 0.2));
        let s = siou(x, y);
        assert!(s.angle.abs() < 1e-15);
        // ρ_y = (0.1 / 0.3)^2, γ = 2
        let expect = 1.0 - (-2.0 * (0.1f64 / 0.3).powi(2)).exp();
        assert!((s.distance - expect).abs() < 1e-12);
    }

    #[test]
    fn dual_matches_central_difference() {
        let (p, g) = (b(0.42, 0.31, 0.2, 0.13), b(0.5, 0.35, 0.18, 0.2));
        for loss in [BoxLoss::Giou, BoxLoss::Siou, BoxLoss::InnerSiou { ratio: 1.25 }] {
            let (v, d) = loss.value_and_grad(p, g);
            assert!((v - loss.eval(p, g)).abs() < 1e-15);
            for i in 0..4 {
                let mut up = p.to_array();
                let mut dn = p.to_array();
                up[i] += 1e-6;
                dn[i] -= 1e-6;
                let fd = (loss.eval(Bbox::from_array(up), g) - loss.eval(Bbox::from_array(dn), g)) / 2e-6;
                assert!((fd - d[i]).abs() < 1e-6 * fd.abs().max(1.0), "{loss:?} coord {i}: {fd} vs {}", d[i]);
            }
        }
    }

    #[test]
    fn parse_rejects_unknown() {
        assert_eq!(BoxLoss::parse("giou", 1.25).unwrap(), BoxLoss::Giou);
        assert!(BoxLoss::parse("diou", 1.25).is_err());
        assert!(BoxLoss::parse("inner_siou", 0.0).is_err());
    }

    #[test]
    fn boxset_validation() {
        let ok = BoxSet::new(vec![b(0.5, 0.5, 0.2, 0.2)], vec![1]).unwrap();
        assert!(ok.validate(3).is_ok());
        assert!(ok.validate(1).is_err());
        assert!(BoxSet::new(vec![b(0.95, 0.5, 0.2, 0.2)], vec![0]).unwrap().validate(3).is_err());
        assert!(BoxSet::new(vec![], vec![0]).is_err());
    }
}
