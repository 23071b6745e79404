//! Point-cloud primitives: synthetic shape generation, unit-sphere
//! normalization, and farthest point sampling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;

pub const NUM_SHAPE_CLASSES: u16 = 8;

/// An ordered set of 3-D points with a class label and a sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub id: u64,
    pub class_id: u16,
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(id: u64, class_id: u16, points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::domain("point cloud must contain at least one point"));
        }
        for (k, p) in points.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("point {k} of cloud {id}"),
                });
            }
        }
        Ok(PointCloud { id, class_id, points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The cloud restricted to `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            id: self.id,
            class_id: self.class_id,
            points: indices.iter().map(|&k| self.points[k]).collect(),
        }
    }
}

fn unit_gaussian_dir(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

const TAU: f64 = std::f64::consts::TAU;

fn sample_sphere_surface(rng: &mut ChaCha8Rng, n: usize, out: &mut Vec<[f64; 3]>) {
    // Antithetic pairs: each point is emitted with its antipode, which pins
    // the sample centroid to zero exactly. Marginally each point is still
    // uniform on the sphere.
    let pairs = n / 2;
    for _ in 0..pairs {
        let p = unit_gaussian_dir(rng);
        out.push(p);
        out.push([-p[0], -p[1], -p[2]]);
    }
    if n % 2 == 1 {
        out.push(unit_gaussian_dir(rng));
    }
}

fn sample_cube_surface(rng: &mut ChaCha8Rng, n: usize, out: &mut Vec<[f64; 3]>) {
    // Side-2 cube centered at the origin; faces have equal area.
    for _ in 0..n {
        let face = rng.random_range(0..6u8);
        let u = rng.random_range(-1.0..1.0);
        let v = rng.random_range(-1.0..1.0);
        let p = match face {
            0 => [1.0, u, v],
            1 => [-1.0, u, v],
            2 => [u, 1.0, v],
            3 => [u, -1.0, v],
            4 => [u, v, 1.0],
            _ => [u, v, -1.0],
        };
        out.push(p);
    }
}

fn sample_cylinder(rng: &mut ChaCha8Rng, n: usize, out: &mut Vec<[f64; 3]>) {
    // Radius 1, z in [-1, 1], lateral surface plus both end caps,
    // picked proportionally to area (4pi lateral vs 2pi caps).
    for _ in 0..n {
        let u: f64 = rng.random();
        let theta = rng.random_range(0.0..TAU);
        if u < 2.0 / 3.0 {
            let z = rng.random_range(-1.0..1.0);
            out.push([theta.cos(), theta.sin(), z]);
        } else {
            let z = if u < 5.0 / 6.0 { 1.0 } else { -1.0 };
            let r = rng.random::<f64>().sqrt();
            out.push([r * theta.cos(), r * theta.sin(), z]);
        }
    }
}

fn sample_cone(rng: &mut ChaCha8Rng, n: usize, out: &mut Vec<[f64; 3]>) {
    // Apex (0,0,1), base disc of radius 1 at z = -1.
    let lateral_area = std::f64::consts::PI * 5.0_f64.sqrt();
    let base_area = std::f64::consts::PI;
    let p_lateral = lateral_area / (lateral_area + base_area);
    for _ in 0..n {
        let theta = rng.random_range(0.0..TAU);
        if rng.random::<f64>() < p_lateral {
            // fraction of the slant from the apex; area grows quadratically
            let s = rng.random::<f64>().sqrt();
            out.push([s * theta.cos(), s * theta.sin(), 1.0 - 2.0 * s]);
        } else {
            let r = rng.random::<f64>().sqrt();
            out.push([r * theta.cos(), r * theta.sin(), -1.0]);
        }
    }
}

fn sample_torus(rng: &mut ChaCha8Rng, n: usize, out: &mut Vec<[f64; 3]>) {
    // R = 1, r = 0.4; tube angle rejection keeps the surface density uniform.
    let (big_r, small_r) = (1.0, 0.4);
    for _ in 0..n {
        let phi = rng.random_range(0.0..TAU);
        let theta = loop {
            let theta = rng.random_range(0.0..TAU);
            let accept = (big_r + small_r * theta.cos()) / (big_r + small_r);
            if rng.random::<f64>() < accept {
                break theta;
            }
        };
        let w = big_r + small_r * theta.cos();
        out.push([w * phi.cos(), w * phi.sin(), small_r * theta.sin()]);
    }
}

fn sample_disc(rng: &mut ChaCha8Rng, n: usize, out: &mut Vec<[f64; 3]>) {
    for _ in 0..n {
        let theta = rng.random_range(0.0..TAU);
        let r = rng.random::<f64>().sqrt();
        out.push([r * theta.cos(), r * theta.sin(), 0.0]);
    }
}

fn sample_dumbbell(rng: &mut ChaCha8Rng, n: usize, out: &mut Vec<[f64; 3]>) {
    // Two radius-0.5 spheres centered at x = +-0.75.
    for _ in 0..n {
        let cx = if rng.random::<f64>() < 0.5 { 0.75 } else { -0.75 };
        let d = unit_gaussian_dir(rng);
        out.push([cx + 0.5 * d[0], 0.5 * d[1], 0.5 * d[2]]);
    }
}

fn sample_helix_tube(rng: &mut ChaCha8Rng, n: usize, out: &mut Vec<[f64; 3]>) {
    // Tube of radius 0.15 around the helix (cos t, sin t, c(t - 2pi)),
    // t in [0, 4pi]. Constant curve speed makes uniform t uniform in
    // arclength; the tube angle is rejection-corrected for curvature.
    let c: f64 = 0.12;
    let rt = 0.15;
    let kappa = 1.0 / (1.0 + c * c);
    let speed = (1.0 + c * c).sqrt();
    for _ in 0..n {
        let t = rng.random_range(0.0..2.0 * TAU);
        let phi = loop {
            let phi = rng.random_range(0.0..TAU);
            let accept = (1.0 - kappa * rt * phi.cos()) / (1.0 + kappa * rt);
            if rng.random::<f64>() < accept {
                break phi;
            }
        };
        let center = [t.cos(), t.sin(), c * (t - TAU)];
        let normal = [-t.cos(), -t.sin(), 0.0];
        let tangent = [-t.sin() / speed, t.cos() / speed, c / speed];
        // binormal = tangent x normal
        let binormal = [
            tangent[1] * normal[2] - tangent[2] * normal[1],
            tangent[2] * normal[0] - tangent[0] * normal[2],
            tangent[0] * normal[1] - tangent[1] * normal[0],
        ];
        let (cp, sp) = (phi.cos(), phi.sin());
        out.push([
            center[0] + rt * (normal[0] * cp + binormal[0] * sp),
            center[1] + rt * (normal[1] * cp + binormal[1] * sp),
            center[2] + rt * (normal[2] * cp + binormal[2] * sp),
        ]);
    }
}

/// Generate a normalized synthetic shape.
///
/// Classes: 0 sphere, 1 cube surface, 2 cylinder, 3 cone, 4 torus,
/// 5 flat disc, 6 dumbbell, 7 helix tube. Points are sampled from the
/// surface by a seeded stream, perturbed by isotropic Gaussian jitter,
/// then unit-sphere normalized. Deterministic in all four arguments.
pub fn gen_shape(class_id: u16, n_points: usize, seed: u64, jitter_sigma: f64) -> Result<PointCloud> {
    if class_id >= NUM_SHAPE_CLASSES {
        return Err(Error::domain(format!(
            "unknown class id {class_id} (valid: 0..{NUM_SHAPE_CLASSES})"
        )));
    }
    if n_points < 8 {
        return Err(Error::domain(format!(
            "n_points must be >= 8, got {n_points}"
        )));
    }
    if !(jitter_sigma.is_finite() && jitter_sigma >= 0.0) {
        return Err(Error::domain("jitter_sigma must be finite and >= 0"));
    }

    let mut rng = rng::stream(seed, "shape", &[u64::from(class_id), n_points as u64]);
    let mut points = Vec::with_capacity(n_points);
    match class_id {
        0 => sample_sphere_surface(&mut rng, n_points, &mut points),
        1 => sample_cube_surface(&mut rng, n_points, &mut points),
        2 => sample_cylinder(&mut rng, n_points, &mut points),
        3 => sample_cone(&mut rng, n_points, &mut points),
        4 => sample_torus(&mut rng, n_points, &mut points),
        5 => sample_disc(&mut rng, n_points, &mut points),
        6 => sample_dumbbell(&mut rng, n_points, &mut points),
        7 => sample_helix_tube(&mut rng, n_points, &mut points),
        _ => unreachable!(),
    }

    if jitter_sigma > 0.0 {
        for p in &mut points {
            for v in p.iter_mut() {
                let eps: f64 = StandardNormal.sample(&mut rng);
                *v += jitter_sigma * eps;
            }
        }
    }

    normalize_unit_sphere(&PointCloud {
        id: 0,
        class_id,
        points,
    })
}

/// Center the cloud on its centroid and scale so the farthest point has
/// norm 1. Rejects clouds whose points all coincide.
pub fn normalize_unit_sphere(pc: &PointCloud) -> Result<PointCloud> {
    let n = pc.points.len() as f64;
    let mut centroid = [0.0; 3];
    for p in &pc.points {
        for a in 0..3 {
            centroid[a] += p[a];
        }
    }
    for c in centroid.iter_mut() {
        *c /= n;
    }

    let mut centered: Vec<[f64; 3]> = pc
        .points
        .iter()
        .map(|p| [p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]])
        .collect();

    let max_norm = centered
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0, f64::max);
    if max_norm < 1e-12 {
        return Err(Error::DegenerateCloud);
    }
    for p in &mut centered {
        for v in p.iter_mut() {
            *v /= max_norm;
        }
    }

    Ok(PointCloud {
        id: pc.id,
        class_id: pc.class_id,
        points: centered,
    })
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Farthest point sampling.
///
/// Index 0 of the result is `start_index`; each subsequent pick maximizes
/// the minimum squared Euclidean distance to all previously selected
/// points, breaking ties by the smallest index.
pub fn fps(pc: &PointCloud, m: usize, start_index: usize) -> Result<Vec<usize>> {
    let n = pc.points.len();
    if m == 0 || m > n {
        return Err(Error::domain(format!(
            "fps: m must be in [1, {n}], got {m}"
        )));
    }
    if start_index >= n {
        return Err(Error::domain(format!(
            "fps: start_index must be in [0, {n}), got {start_index}"
        )));
    }

    let mut selected = Vec::with_capacity(m);
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut last = start_index;
    selected.push(start_index);

    while selected.len() < m {
        let last_point = pc.points[last];
        let mut best = usize::MAX;
        let mut best_d2 = f64::NEG_INFINITY;
        for k in 0..n {
            let d = dist2(&pc.points[k], &last_point);
            if d < min_d2[k] {
                min_d2[k] = d;
            }
            // skip already-selected points (their min distance is 0, and a
            // zero can only win if every candidate coincides with the set;
            // excluding them keeps indices distinct)
            if min_d2[k] == 0.0 && selected.contains(&k) {
                continue;
            }
            if min_d2[k] > best_d2 {
                best_d2 = min_d2[k];
                best = k;
            }
        }
        debug_assert!(best != usize::MAX);
        selected.push(best);
        last = best;
    }
    Ok(selected)
}
