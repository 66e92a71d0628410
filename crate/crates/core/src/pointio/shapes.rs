//! Primitive shapes and area-uniform surface sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geom::{Point, PointCloud};

/// A flat parallelogram `center + s·u + t·v` for `s, t ∈ [-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Panel {
    pub center: Point,
    pub u: Point,
    pub v: Point,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Axis-aligned cuboid surface with full side lengths `extents`.
    Box {
        extents: [f64; 3],
    },
    Sphere {
        radius: f64,
    },
    /// Closed cylinder along z, centred at the origin.
    Cylinder {
        radius: f64,
        height: f64,
    },
    PlaneComposite {
        panels: Vec<Panel>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSpec {
    pub primitive: Primitive,
    /// Row-major rotation applied before `translation`.
    pub rotation: [[f64; 3]; 3],
    pub translation: Point,
    pub category: String,
}

const IDENTITY: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

fn cross(a: Point, b: Point) -> Point {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: Point) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

fn positive(what: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::contract(format!("degenerate shape: {what} = {v}")))
    }
}

/// A surface patch that can be sampled uniformly, weighted by area.
enum Piece {
    Panel(Panel),
    Sphere(f64),
    Tube { radius: f64, half: f64 },
    Disk { radius: f64, z: f64 },
}

impl Piece {
    fn area(&self) -> f64 {
        match self {
            Piece::Panel(p) => 4.0 * norm(cross(p.u, p.v)),
            Piece::Sphere(r) => 4.0 * std::f64::consts::PI * r * r,
            Piece::Tube { radius, half } => 2.0 * std::f64::consts::PI * radius * 2.0 * half,
            Piece::Disk { radius, .. } => std::f64::consts::PI * radius * radius,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Point {
        match self {
            Piece::Panel(p) => {
                let s: f64 = rng.gen_range(-1.0..=1.0);
                let t: f64 = rng.gen_range(-1.0..=1.0);
                std::array::from_fn(|i| p.center[i] + s * p.u[i] + t * p.v[i])
            }
            Piece::Sphere(r) => loop {
                let g: Point = std::array::from_fn(|_| StandardNormal.sample(rng));
                let len = norm(g);
                if len > 1e-12 {
                    break g.map(|c| r * c / len);
                }
            },
            Piece::Tube { radius, half } => {
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                [
                    radius * a.cos(),
                    radius * a.sin(),
                    rng.gen_range(-half..=*half),
                ]
            }
            Piece::Disk { radius, z } => {
                let r = radius * rng.gen::<f64>().sqrt();
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                [r * a.cos(), r * a.sin(), *z]
            }
        }
    }
}

/// Box faces as panels: two per axis at `±extent/2`.
fn box_panels(extents: [f64; 3]) -> Vec<Panel> {
    let h = extents.map(|e| e / 2.0);
    let mut panels = Vec::with_capacity(6);
    for axis in 0..3 {
        let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
        for sign in [-1.0, 1.0] {
            let mut center = [0.0; 3];
            center[axis] = sign * h[axis];
            let mut u = [0.0; 3];
            u[a] = h[a];
            let mut v = [0.0; 3];
            v[b] = h[b];
            panels.push(Panel { center, u, v });
        }
    }
    panels
}

impl Primitive {
    fn pieces(&self) -> Result<Vec<Piece>> {
        match self {
            Primitive::Box { extents } => {
                for (axis, e) in extents.iter().enumerate() {
                    positive(&format!("box extent {axis}"), *e)?;
                }
                Ok(box_panels(*extents).into_iter().map(Piece::Panel).collect())
            }
            Primitive::Sphere { radius } => {
                positive("sphere radius", *radius)?;
                Ok(vec![Piece::Sphere(*radius)])
            }
            Primitive::Cylinder { radius, height } => {
                positive("cylinder radius", *radius)?;
                positive("cylinder height", *height)?;
                let half = height / 2.0;
                Ok(vec![
                    Piece::Tube {
                        radius: *radius,
                        half,
                    },
                    Piece::Disk {
                        radius: *radius,
                        z: -half,
                    },
                    Piece::Disk {
                        radius: *radius,
                        z: half,
                    },
                ])
            }
            Primitive::PlaneComposite { panels } => {
                if panels.is_empty() {
                    return Err(Error::contract(
                        "degenerate shape: composite without panels",
                    ));
                }
                let pieces: Vec<Piece> = panels.iter().cloned().map(Piece::Panel).collect();
                for (i, p) in pieces.iter().enumerate() {
                    positive(&format!("panel {i} area"), p.area())?;
                }
                Ok(pieces)
            }
        }
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let q: [f64; 4] = loop {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let len = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if len > 1e-12 {
            break q.map(|x| x / len);
        }
    };
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Top slab with two side panels and an optional back panel.
fn random_composite(rng: &mut ChaCha8Rng) -> Vec<Panel> {
    let a = rng.gen_range(0.3..0.5);
    let b = rng.gen_range(0.2..0.4);
    let h = rng.gen_range(0.15..0.3);
    let mut panels = vec![
        Panel {
            center: [0.0, 0.0, 0.0],
            u: [a, 0.0, 0.0],
            v: [0.0, b, 0.0],
        },
        Panel {
            center: [-a, 0.0, -h],
            u: [0.0, b, 0.0],
            v: [0.0, 0.0, h],
        },
        Panel {
            center: [a, 0.0, -h],
            u: [0.0, b, 0.0],
            v: [0.0, 0.0, h],
        },
    ];
    if rng.gen_bool(0.5) {
        let up = rng.gen_range(0.15..0.35);
        panels.push(Panel {
            center: [0.0, b, up],
            u: [a, 0.0, 0.0],
            v: [0.0, 0.0, up],
        });
    }
    panels
}

impl ShapeSpec {
    /// An unposed shape.
    pub fn new(primitive: Primitive, category: impl Into<String>) -> Self {
        ShapeSpec {
            primitive,
            rotation: IDENTITY,
            translation: [0.0; 3],
            category: category.into(),
        }
    }

    /// A random member of `category` (`box`, `sphere`, `cylinder` or
    /// `composite`) with a random rotation and small offset.
    pub fn random(category: &str, rng: &mut ChaCha8Rng) -> Result<Self> {
        let primitive = match category {
            "box" => Primitive::Box {
                extents: std::array::from_fn(|_| rng.gen_range(0.3..1.0)),
            },
            "sphere" => Primitive::Sphere {
                radius: rng.gen_range(0.3..0.5),
            },
            "cylinder" => Primitive::Cylinder {
                radius: rng.gen_range(0.15..0.5),
                height: rng.gen_range(0.3..1.0),
            },
            "composite" => Primitive::PlaneComposite {
                panels: random_composite(rng),
            },
            other => return Err(Error::contract(format!("unknown shape category {other:?}"))),
        };
        Ok(ShapeSpec {
            primitive,
            rotation: random_rotation(rng),
            translation: std::array::from_fn(|_| rng.gen_range(-0.1..0.1)),
            category: category.to_string(),
        })
    }

    fn place(&self, p: Point) -> Point {
        let r = &self.rotation;
        std::array::from_fn(|i| {
            r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + self.translation[i]
        })
    }
}

/// `n` points drawn uniformly by area from the surface of `spec`.
pub fn sample_surface(spec: &ShapeSpec, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::contract("sample_surface needs n ≥ 1"));
    }
    let pieces = spec.primitive.pieces()?;
    let mut cumulative = Vec::with_capacity(pieces.len());
    let mut total = 0.0;
    for p in &pieces {
        total += p.area();
        cumulative.push(total);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| {
            let u = rng.gen::<f64>() * total;
            let i = cumulative
                .partition_point(|&c| c <= u)
                .min(pieces.len() - 1);
            spec.place(pieces[i].sample(&mut rng))
        })
        .collect();
    PointCloud::new(points)
}

/// Centres the bounding box at the origin and scales its longest side to 1,
/// so every coordinate lies in `[-0.5, 0.5]`.
pub fn normalize(cloud: &PointCloud) -> Result<PointCloud> {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in cloud.points() {
        for i in 0..3 {
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
    }
    let extent = (0..3).map(|i| hi[i] - lo[i]).fold(0.0, f64::max);
    positive("cloud extent", extent)?;
    let center: Point = std::array::from_fn(|i| (lo[i] + hi[i]) / 2.0);
    let points = cloud
        .points()
        .iter()
        .map(|p| std::array::from_fn(|i| ((p[i] - center[i]) / extent).clamp(-0.5, 0.5)))
        .collect();
    PointCloud::new(points)
}
