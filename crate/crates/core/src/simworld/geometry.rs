//! Ray intersection against the primitive shapes the simulator supports.

use serde::{Deserialize, Serialize};

use crate::types::Vec3;

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

/// Vertical finite cylinder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cylinder {
    pub center: [f64; 2],
    pub radius: f64,
    pub z_min: f64,
    pub z_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Box(Aabb),
    Cylinder(Cylinder),
}

impl Aabb {
    pub fn from_center(c: Vec3, half: [f64; 3]) -> Aabb {
        Aabb { min: [c.x - half[0], c.y - half[1], c.z - half[2]], max: [c.x + half[0], c.y + half[1], c.z + half[2]] }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        (0..3).all(|i| other.min[i] >= self.min[i] && other.max[i] <= self.max[i])
    }

    pub fn is_valid(&self) -> bool {
        (0..3).all(|i| self.min[i].is_finite() && self.max[i].is_finite() && self.min[i] < self.max[i])
    }

    /// Slab test; distance to the first surface crossing with `t > eps`.
    pub fn ray_hit(&self, o: &Vec3, d: &Vec3, eps: f64) -> Option<f64> {
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        for i in 0..3 {
            if d[i] == 0.0 {
                if o[i] < self.min[i] || o[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[i];
            let (mut a, mut b) = ((self.min[i] - o[i]) * inv, (self.max[i] - o[i]) * inv);
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        if t0 > t1 {
            return None;
        }
        if t0 > eps {
            Some(t0)
        } else if t1 > eps {
            // origin inside: the exit face is the visible surface
            Some(t1)
        } else {
            None
        }
    }
}

impl Cylinder {
    pub fn bounds(&self) -> Aabb {
        Aabb {
            min: [self.center[0] - self.radius, self.center[1] - self.radius, self.z_min],
            max: [self.center[0] + self.radius, self.center[1] + self.radius, self.z_max],
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        let (dx, dy) = (p.x - self.center[0], p.y - self.center[1]);
        dx * dx + dy * dy <= self.radius * self.radius && p.z >= self.z_min && p.z <= self.z_max
    }

    pub fn ray_hit(&self, o: &Vec3, d: &Vec3, eps: f64) -> Option<f64> {
        let mut best = f64::INFINITY;
        let (ox, oy) = (o.x - self.center[0], o.y - self.center[1]);
        let a = d.x * d.x + d.y * d.y;
        if a > 0.0 {
            let b = 2.0 * (ox * d.x + oy * d.y);
            let c = ox * ox + oy * oy - self.radius * self.radius;
            let disc = b * b - 4.0 * a * c;
            if disc >= 0.0 {
                let sq = disc.sqrt();
                for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                    if t > eps && t < best {
                        let z = o.z + t * d.z;
                        if z >= self.z_min && z <= self.z_max {
                            best = t;
                        }
                    }
                }
            }
        }
        if d.z != 0.0 {
            for zc in [self.z_min, self.z_max] {
                let t = (zc - o.z) / d.z;
                if t > eps && t < best {
                    let (x, y) = (ox + t * d.x, oy + t * d.y);
                    if x * x + y * y <= self.radius * self.radius {
                        best = t;
                    }
                }
            }
        }
        best.is_finite().then_some(best)
    }
}

impl Shape {
    pub fn bounds(&self) -> Aabb {
        match self {
            Shape::Box(b) => *b,
            Shape::Cylinder(c) => c.bounds(),
        }
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        match self {
            Shape::Box(b) => b.contains(p),
            Shape::Cylinder(c) => c.contains(p),
        }
    }

    pub fn ray_hit(&self, o: &Vec3, d: &Vec3, eps: f64) -> Option<f64> {
        match self {
            Shape::Box(b) => b.ray_hit(o, d, eps),
            Shape::Cylinder(c) => c.ray_hit(o, d, eps),
        }
    }
}
