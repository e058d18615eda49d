//! Axis-aligned 3D box arithmetic: corners, IoU, FCOS-style boundary
//! encoding, pairwise center offsets, and greedy NMS.
//!
//! Everything here is a pure function over plain values; all other modules
//! build on these primitives.

use crate::error::{Error, Result};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

/// A point or displacement in room coordinates (meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Self = Self { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn add(&self, o: &Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(&self, o: &Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn scale(&self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn dot(&self, o: &Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(&self, o: &Vec3) -> f64 {
        self.sub(o).norm()
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// Axis-aligned box given by center and full extents. Extents are strictly
/// positive and all components finite; construction enforces both.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    center: Vec3,
    size: Vec3,
}

#[derive(Serialize, Deserialize)]
struct AabbRepr {
    cx: f64,
    cy: f64,
    cz: f64,
    sx: f64,
    sy: f64,
    sz: f64,
}

impl Serialize for Aabb {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        AabbRepr {
            cx: self.center.x,
            cy: self.center.y,
            cz: self.center.z,
            sx: self.size.x,
            sy: self.size.y,
            sz: self.size.z,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Aabb {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = AabbRepr::deserialize(d)?;
        Aabb::new(Vec3::new(r.cx, r.cy, r.cz), Vec3::new(r.sx, r.sy, r.sz))
            .map_err(serde::de::Error::custom)
    }
}

impl Aabb {
    pub fn new(center: Vec3, size: Vec3) -> Result<Self> {
        if !center.is_finite() || !size.is_finite() {
            return Err(Error::Geometry("box components must be finite".into()));
        }
        if size.x <= 0.0 || size.y <= 0.0 || size.z <= 0.0 {
            return Err(Error::Geometry(format!(
                "box extents must be positive, got ({}, {}, {})",
                size.x, size.y, size.z
            )));
        }
        Ok(Self { center, size })
    }

    pub fn from_min_max(min: Vec3, max: Vec3) -> Result<Self> {
        Aabb::new(min.add(&max).scale(0.5), max.sub(&min))
    }

    pub fn center(&self) -> Vec3 {
        self.center
    }

    pub fn size(&self) -> Vec3 {
        self.size
    }

    pub fn min_corner(&self) -> Vec3 {
        self.center.sub(&self.size.scale(0.5))
    }

    pub fn max_corner(&self) -> Vec3 {
        self.center.add(&self.size.scale(0.5))
    }

    pub fn volume(&self) -> f64 {
        self.size.x * self.size.y * self.size.z
    }

    /// Point strictly inside the open box (faces excluded).
    pub fn contains_strict(&self, p: &Vec3) -> bool {
        let lo = self.min_corner();
        let hi = self.max_corner();
        p.x > lo.x && p.x < hi.x && p.y > lo.y && p.y < hi.y && p.z > lo.z && p.z < hi.z
    }

    /// Point inside the closed box (faces included).
    pub fn contains(&self, p: &Vec3) -> bool {
        let lo = self.min_corner();
        let hi = self.max_corner();
        p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y && p.z >= lo.z && p.z <= hi.z
    }

    /// Distance from `p` to the box surface (0 for points on a face).
    pub fn surface_distance(&self, p: &Vec3) -> f64 {
        let lo = self.min_corner();
        let hi = self.max_corner();
        let ox = (lo.x - p.x).max(0.0).max(p.x - hi.x);
        let oy = (lo.y - p.y).max(0.0).max(p.y - hi.y);
        let oz = (lo.z - p.z).max(0.0).max(p.z - hi.z);
        let outside = (ox * ox + oy * oy + oz * oz).sqrt();
        if outside > 0.0 {
            return outside;
        }
        // Inside: nearest face along any axis.
        let dx = (p.x - lo.x).min(hi.x - p.x);
        let dy = (p.y - lo.y).min(hi.y - p.y);
        let dz = (p.z - lo.z).min(hi.z - p.z);
        dx.min(dy).min(dz)
    }
}

/// Nonnegative distances from a reference point to the six box faces,
/// in the order (xmin, xmax, ymin, ymax, zmin, zmax).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryDistances {
    pub d_xmin: f64,
    pub d_xmax: f64,
    pub d_ymin: f64,
    pub d_ymax: f64,
    pub d_zmin: f64,
    pub d_zmax: f64,
}

impl BoundaryDistances {
    pub fn new(d: [f64; 6]) -> Result<Self> {
        if d.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Geometry(
                "boundary distances must be finite and nonnegative".into(),
            ));
        }
        Ok(Self {
            d_xmin: d[0],
            d_xmax: d[1],
            d_ymin: d[2],
            d_ymax: d[3],
            d_zmin: d[4],
            d_zmax: d[5],
        })
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.d_xmin, self.d_xmax, self.d_ymin, self.d_ymax, self.d_zmin, self.d_zmax]
    }
}

/// The 8 box vertices in x-fastest lexicographic order over (min, max) per
/// axis: index bit 0 selects x max, bit 1 y max, bit 2 z max. Fixed so that
/// downstream corner-based encodings are deterministic.
pub fn corners(b: &Aabb) -> [Vec3; 8] {
    let lo = b.min_corner();
    let hi = b.max_corner();
    let mut out = [Vec3::ZERO; 8];
    for (i, c) in out.iter_mut().enumerate() {
        *c = Vec3::new(
            if i & 1 == 0 { lo.x } else { hi.x },
            if i & 2 == 0 { lo.y } else { hi.y },
            if i & 4 == 0 { lo.z } else { hi.z },
        );
    }
    out
}

/// Intersection volume over union volume. Boxes sharing only a face or an
/// edge have intersection volume 0 and therefore IoU 0.
pub fn iou(a: &Aabb, b: &Aabb) -> f64 {
    let inter = intersection_volume(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.volume() + b.volume() - inter)
}

pub fn intersection_volume(a: &Aabb, b: &Aabb) -> f64 {
    let alo = a.min_corner();
    let ahi = a.max_corner();
    let blo = b.min_corner();
    let bhi = b.max_corner();
    let ix = (ahi.x.min(bhi.x) - alo.x.max(blo.x)).max(0.0);
    let iy = (ahi.y.min(bhi.y) - alo.y.max(blo.y)).max(0.0);
    let iz = (ahi.z.min(bhi.z) - alo.z.max(blo.z)).max(0.0);
    ix * iy * iz
}

/// Distances from an interior point to the six faces. The point must be
/// strictly inside the box.
pub fn encode_boundaries(point: &Vec3, b: &Aabb) -> Result<BoundaryDistances> {
    if !b.contains_strict(point) {
        return Err(Error::Geometry("point outside box".into()));
    }
    let lo = b.min_corner();
    let hi = b.max_corner();
    BoundaryDistances::new([
        point.x - lo.x,
        hi.x - point.x,
        point.y - lo.y,
        hi.y - point.y,
        point.z - lo.z,
        hi.z - point.z,
    ])
}

/// Inverse of [`encode_boundaries`]: center = point + (d_max - d_min) / 2
/// per axis, size = d_min + d_max per axis.
pub fn decode_boundaries(point: &Vec3, d: &BoundaryDistances) -> Result<Aabb> {
    let center = Vec3::new(
        point.x + (d.d_xmax - d.d_xmin) / 2.0,
        point.y + (d.d_ymax - d.d_ymin) / 2.0,
        point.z + (d.d_zmax - d.d_zmin) / 2.0,
    );
    let size = Vec3::new(
        d.d_xmin + d.d_xmax,
        d.d_ymin + d.d_ymax,
        d.d_zmin + d.d_zmax,
    );
    Aabb::new(center, size)
}

/// Pairwise componentwise offsets: `offsets[[i, j, c]] = centers[j][c] - centers[i][c]`.
pub fn center_offsets(centers: &[Vec3]) -> Array3<f64> {
    let m = centers.len();
    let mut out = Array3::zeros((m, m, 3));
    for i in 0..m {
        for j in 0..m {
            let d = centers[j].sub(&centers[i]);
            out[[i, j, 0]] = d.x;
            out[[i, j, 1]] = d.y;
            out[[i, j, 2]] = d.z;
        }
    }
    out
}

/// Greedy non-maximum suppression. Candidates are visited in descending
/// score order (ties broken by lower index); a candidate is dropped when its
/// IoU with an already kept box strictly exceeds `iou_threshold`. Returns
/// kept indices in visit order.
pub fn nms(boxes: &[Aabb], scores: &[f64], iou_threshold: f64) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::Geometry(format!(
            "nms: {} boxes but {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(Error::Geometry(format!(
            "nms: threshold {} outside [0, 1]",
            iou_threshold
        )));
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_threshold) {
            kept.push(i);
        }
    }
    Ok(kept)
}
