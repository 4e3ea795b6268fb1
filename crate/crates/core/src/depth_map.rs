//! The global 2.5D depth map: a regular grid over world x-y whose node values
//! are surface depth (z), with bilinear interpolation between nodes.
//!
//! Grid convention: node `(m, n)` sits at world `origin + resolution * (m, n)`
//! with `m` along x and `n` along y; continuous grid coordinates are
//! `q = (world_xy - origin) / resolution`. Node values are queried through
//! bilinear interpolation, so gradients produced here are expressed per grid
//! cell, not per metre; the `1/resolution` factor belongs to the caller's
//! chain rule.

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::io::PointCloud;
use nalgebra::{DMatrix, Vector2, Vector3};
use std::io::Write;
use std::path::Path;

/// Shape and placement of the depth-map grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridGeometry {
    /// Node count along x.
    pub rows: usize,
    /// Node count along y.
    pub cols: usize,
    /// Metres between adjacent nodes.
    pub resolution: f64,
    /// World x-y of node (0, 0).
    pub origin: Vector2<f64>,
}

impl GridGeometry {
    /// Continuous grid coordinates of a world x-y position.
    pub fn grid_coords(&self, world_xy: Vector2<f64>) -> Vector2<f64> {
        (world_xy - self.origin) / self.resolution
    }

    /// World x-y of a grid node.
    pub fn node_world(&self, m: usize, n: usize) -> Vector2<f64> {
        self.origin + Vector2::new(m as f64, n as f64) * self.resolution
    }

    pub fn cell_count(&self) -> usize {
        self.rows * self.cols
    }
}

/// The four interpolation nodes around a continuous grid location, in the
/// order `(m,n), (m+1,n), (m,n+1), (m+1,n+1)`, with their bilinear weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridLocator {
    pub m: usize,
    pub n: usize,
    pub weights: [f64; 4],
}

impl GridLocator {
    /// The four node indices in weight order.
    pub fn nodes(&self) -> [(usize, usize); 4] {
        [
            (self.m, self.n),
            (self.m + 1, self.n),
            (self.m, self.n + 1),
            (self.m + 1, self.n + 1),
        ]
    }
}

/// Query outside the interpolable grid area. Callers typically drop the
/// residual and count the skip rather than treating this as a failure.
#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("grid query ({0}, {1}) outside interpolable bounds")]
pub struct OutOfGrid(pub f64, pub f64);

/// The global 2.5D depth map.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub geometry: GridGeometry,
    /// Depth per node, metres; `rows x cols`.
    pub values: DMatrix<f64>,
    /// Whether any point was binned into the node during initialization.
    pub observed: DMatrix<bool>,
    /// Number of points binned into the node.
    pub obs_count: DMatrix<u32>,
}

/// Diagnostics from [`initialize`].
#[derive(Debug, Clone)]
pub struct InitStats {
    /// Points whose projection left the grid and were not binned.
    pub dropped_out_of_grid: usize,
    /// Nodes with no observation before hole filling.
    pub unobserved_nodes: usize,
    /// Unobserved nodes filled by the Laplace solve.
    pub laplace_filled: usize,
    /// Unobserved nodes in components with no observed contact, set to the
    /// global mean depth.
    pub mean_filled: usize,
    /// No node observed at all (legal, but the map carries no data).
    pub all_unobserved: bool,
    /// Per-node variance of binned depth values; diagnoses surfaces that
    /// violate the single-valued-z assumption.
    pub z_variance: DMatrix<f64>,
}

impl InitStats {
    pub fn max_z_variance(&self) -> f64 {
        self.z_variance.iter().cloned().fold(0.0, f64::max)
    }
}

/// Fits an axis-aligned grid over every projected point, expanded by `margin`
/// nodes on each side and quantised to `resolution`.
pub fn fit_bounds(
    clouds: &[PointCloud],
    poses: &[Pose],
    resolution: f64,
    margin: usize,
) -> Result<GridGeometry> {
    assert!(resolution > 0.0, "resolution must be positive");
    assert_eq!(clouds.len(), poses.len(), "one pose per cloud");
    let mut min = Vector2::new(f64::INFINITY, f64::INFINITY);
    let mut max = Vector2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut any = false;
    for (cloud, pose) in clouds.iter().zip(poses) {
        for p in &cloud.points {
            let g = pose.transform_point(p);
            min.x = min.x.min(g.x);
            min.y = min.y.min(g.y);
            max.x = max.x.max(g.x);
            max.y = max.y.max(g.y);
            any = true;
        }
    }
    if !any {
        return Err(Error::NoPoints);
    }

    let lo = Vector2::new(
        (min.x / resolution).floor() as i64 - margin as i64,
        (min.y / resolution).floor() as i64 - margin as i64,
    );
    let hi = Vector2::new(
        (max.x / resolution).ceil() as i64 + margin as i64,
        (max.y / resolution).ceil() as i64 + margin as i64,
    );
    // Interpolation needs at least a 2x2 grid.
    let rows = ((hi.x - lo.x + 1).max(2)) as usize;
    let cols = ((hi.y - lo.y + 1).max(2)) as usize;
    Ok(GridGeometry {
        rows,
        cols,
        resolution,
        origin: Vector2::new(lo.x as f64, lo.y as f64) * resolution,
    })
}

/// Builds the initial map by averaging projected depth values per node
/// (round-to-nearest binning) and filling unobserved nodes with the discrete
/// Laplace solution over observed boundaries.
pub fn initialize(
    clouds: &[PointCloud],
    poses: &[Pose],
    geometry: GridGeometry,
) -> (DepthMap, InitStats) {
    assert_eq!(clouds.len(), poses.len(), "one pose per cloud");
    let (rows, cols) = (geometry.rows, geometry.cols);
    // Compensated per-node sums keep the averages independent of input order.
    let mut sum = DMatrix::<f64>::zeros(rows, cols);
    let mut comp = DMatrix::<f64>::zeros(rows, cols);
    let mut sum_sq = DMatrix::<f64>::zeros(rows, cols);
    let mut comp_sq = DMatrix::<f64>::zeros(rows, cols);
    let mut count = DMatrix::<u32>::zeros(rows, cols);
    let mut dropped = 0usize;

    for (cloud, pose) in clouds.iter().zip(poses) {
        for p in &cloud.points {
            let g = pose.transform_point(p);
            let q = geometry.grid_coords(Vector2::new(g.x, g.y));
            let m = q.x.round();
            let n = q.y.round();
            if m < 0.0 || n < 0.0 || m >= rows as f64 || n >= cols as f64 {
                dropped += 1;
                continue;
            }
            let (m, n) = (m as usize, n as usize);
            kahan_add(&mut sum[(m, n)], &mut comp[(m, n)], g.z);
            kahan_add(&mut sum_sq[(m, n)], &mut comp_sq[(m, n)], g.z * g.z);
            count[(m, n)] += 1;
        }
    }

    let mut values = DMatrix::<f64>::zeros(rows, cols);
    let mut observed = DMatrix::<bool>::from_element(rows, cols, false);
    let mut z_variance = DMatrix::<f64>::zeros(rows, cols);
    let mut unobserved = 0usize;
    let mut mean_sum = 0.0;
    let mut mean_comp = 0.0;
    let mut mean_count = 0usize;
    for m in 0..rows {
        for n in 0..cols {
            let c = count[(m, n)];
            if c > 0 {
                let mean = sum[(m, n)] / c as f64;
                values[(m, n)] = mean;
                observed[(m, n)] = true;
                z_variance[(m, n)] = (sum_sq[(m, n)] / c as f64 - mean * mean).max(0.0);
                kahan_add(&mut mean_sum, &mut mean_comp, mean);
                mean_count += 1;
            } else {
                unobserved += 1;
            }
        }
    }

    let all_unobserved = mean_count == 0;
    let global_mean = if all_unobserved {
        0.0
    } else {
        mean_sum / mean_count as f64
    };

    let (laplace_filled, mean_filled) = fill_holes(&mut values, &observed, rows, cols, global_mean);

    let map = DepthMap {
        geometry,
        values,
        observed,
        obs_count: count,
    };
    let stats = InitStats {
        dropped_out_of_grid: dropped,
        unobserved_nodes: unobserved,
        laplace_filled,
        mean_filled,
        all_unobserved,
        z_variance,
    };
    (map, stats)
}

fn kahan_add(sum: &mut f64, comp: &mut f64, value: f64) {
    let y = value - *comp;
    let t = *sum + y;
    *comp = (t - *sum) - y;
    *sum = t;
}

/// Solves the discrete Laplace equation on unobserved nodes with observed
/// nodes as Dirichlet boundary. Connected components that touch no observed
/// node get `fallback` instead. Returns (laplace-filled, fallback-filled).
fn fill_holes(
    values: &mut DMatrix<f64>,
    observed: &DMatrix<bool>,
    rows: usize,
    cols: usize,
    fallback: f64,
) -> (usize, usize) {
    let idx = |m: usize, n: usize| m * cols + n;
    let neighbours = |m: usize, n: usize| {
        let mut out: [(usize, usize); 4] = [(usize::MAX, usize::MAX); 4];
        let mut k = 0;
        if m > 0 {
            out[k] = (m - 1, n);
            k += 1;
        }
        if m + 1 < rows {
            out[k] = (m + 1, n);
            k += 1;
        }
        if n > 0 {
            out[k] = (m, n - 1);
            k += 1;
        }
        if n + 1 < cols {
            out[k] = (m, n + 1);
            k += 1;
        }
        (out, k)
    };

    // Component labelling over unobserved nodes; a component is "anchored"
    // when some member has an observed 4-neighbour.
    let mut visited = vec![false; rows * cols];
    let mut laplace_nodes: Vec<(usize, usize)> = Vec::new();
    let mut mean_filled = 0usize;
    for m0 in 0..rows {
        for n0 in 0..cols {
            if observed[(m0, n0)] || visited[idx(m0, n0)] {
                continue;
            }
            let mut stack = vec![(m0, n0)];
            visited[idx(m0, n0)] = true;
            let mut component = Vec::new();
            let mut anchored = false;
            while let Some((m, n)) = stack.pop() {
                component.push((m, n));
                let (nbrs, k) = neighbours(m, n);
                for &(mm, nn) in &nbrs[..k] {
                    if observed[(mm, nn)] {
                        anchored = true;
                    } else if !visited[idx(mm, nn)] {
                        visited[idx(mm, nn)] = true;
                        stack.push((mm, nn));
                    }
                }
            }
            if anchored {
                laplace_nodes.extend(component);
            } else {
                for (m, n) in component {
                    values[(m, n)] = fallback;
                    mean_filled += 1;
                }
            }
        }
    }

    if laplace_nodes.is_empty() {
        return (0, mean_filled);
    }

    // Jacobi-preconditioned conjugate gradient on the SPD hole system:
    // deg(u) x_u - sum_{unobserved nbr} x_v = sum_{observed nbr} D_v.
    let mut id_of = vec![usize::MAX; rows * cols];
    for (i, &(m, n)) in laplace_nodes.iter().enumerate() {
        id_of[idx(m, n)] = i;
    }
    let dim = laplace_nodes.len();
    let mut degree = vec![0.0f64; dim];
    let mut rhs = vec![0.0f64; dim];
    let mut links: Vec<Vec<usize>> = vec![Vec::new(); dim];
    for (i, &(m, n)) in laplace_nodes.iter().enumerate() {
        let (nbrs, k) = neighbours(m, n);
        for &(mm, nn) in &nbrs[..k] {
            degree[i] += 1.0;
            if observed[(mm, nn)] {
                rhs[i] += values[(mm, nn)];
            } else {
                let j = id_of[idx(mm, nn)];
                if j != usize::MAX {
                    links[i].push(j);
                } else {
                    // Neighbour sits in a mean-filled component: Dirichlet.
                    rhs[i] += values[(mm, nn)];
                }
            }
        }
    }

    let matvec = |x: &[f64], out: &mut [f64]| {
        for i in 0..dim {
            let mut acc = degree[i] * x[i];
            for &j in &links[i] {
                acc -= x[j];
            }
            out[i] = acc;
        }
    };

    let mut x = vec![fallback; dim];
    let mut r = vec![0.0; dim];
    matvec(&x, &mut r);
    for i in 0..dim {
        r[i] = rhs[i] - r[i];
    }
    let mut z: Vec<f64> = (0..dim).map(|i| r[i] / degree[i]).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let rhs_norm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    let mut ap = vec![0.0; dim];
    for _ in 0..(10 * dim + 100) {
        let rnorm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rnorm <= 1e-12 * rhs_norm {
            break;
        }
        matvec(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        let alpha = rz / pap;
        for i in 0..dim {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..dim {
            z[i] = r[i] / degree[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..dim {
            p[i] = z[i] + beta * p[i];
        }
    }
    for (i, &(m, n)) in laplace_nodes.iter().enumerate() {
        values[(m, n)] = x[i];
    }
    (dim, mean_filled)
}

impl DepthMap {
    /// Locates `q` (grid units) among its four interpolation nodes.
    pub fn locate(&self, q: Vector2<f64>) -> std::result::Result<GridLocator, OutOfGrid> {
        let max_m = (self.geometry.rows - 1) as f64;
        let max_n = (self.geometry.cols - 1) as f64;
        if !(q.x >= 0.0 && q.x <= max_m && q.y >= 0.0 && q.y <= max_n) {
            return Err(OutOfGrid(q.x, q.y));
        }
        let m = (q.x.floor() as usize).min(self.geometry.rows - 2);
        let n = (q.y.floor() as usize).min(self.geometry.cols - 2);
        let a = q.x - m as f64;
        let b = q.y - n as f64;
        Ok(GridLocator {
            m,
            n,
            weights: [(1.0 - a) * (1.0 - b), a * (1.0 - b), (1.0 - a) * b, a * b],
        })
    }

    /// Bilinear depth at `q` in grid units.
    pub fn interpolate(&self, q: Vector2<f64>) -> std::result::Result<f64, OutOfGrid> {
        let loc = self.locate(q)?;
        Ok(self.interpolate_at(&loc))
    }

    /// Bilinear depth at an already-resolved locator.
    pub fn interpolate_at(&self, loc: &GridLocator) -> f64 {
        loc.nodes()
            .iter()
            .zip(&loc.weights)
            .map(|(&(m, n), w)| w * self.values[(m, n)])
            .sum()
    }

    /// Depth at the world x-y of a projected point.
    pub fn depth_at_world(&self, world_xy: Vector2<f64>) -> std::result::Result<f64, OutOfGrid> {
        self.interpolate(self.geometry.grid_coords(world_xy))
    }

    /// Per-node map gradient in grid units: central differences in the
    /// interior, one-sided at the borders.
    pub fn node_gradients(&self) -> MapGradients {
        let (rows, cols) = (self.geometry.rows, self.geometry.cols);
        let mut dm = DMatrix::<f64>::zeros(rows, cols);
        let mut dn = DMatrix::<f64>::zeros(rows, cols);
        for m in 0..rows {
            for n in 0..cols {
                dm[(m, n)] = if m == 0 {
                    self.values[(1, n)] - self.values[(0, n)]
                } else if m == rows - 1 {
                    self.values[(m, n)] - self.values[(m - 1, n)]
                } else {
                    (self.values[(m + 1, n)] - self.values[(m - 1, n)]) * 0.5
                };
                dn[(m, n)] = if n == 0 {
                    self.values[(m, 1)] - self.values[(m, 0)]
                } else if n == cols - 1 {
                    self.values[(m, n)] - self.values[(m, n - 1)]
                } else {
                    (self.values[(m, n + 1)] - self.values[(m, n - 1)]) * 0.5
                };
            }
        }
        MapGradients { dm, dn }
    }

    /// Bilinear interpolation of the node gradients at `q`.
    pub fn interpolate_gradient(
        &self,
        gradients: &MapGradients,
        q: Vector2<f64>,
    ) -> std::result::Result<Vector2<f64>, OutOfGrid> {
        let loc = self.locate(q)?;
        Ok(gradients.interpolate_at(&loc))
    }

    /// Writes the map as CSV: header line, then `rows` lines of `cols` values.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(
            out,
            "# depthmap s={} origin={},{}",
            self.geometry.resolution, self.geometry.origin.x, self.geometry.origin.y
        )
        .expect("write to vec");
        for m in 0..self.geometry.rows {
            let line: Vec<String> = (0..self.geometry.cols)
                .map(|n| format!("{}", self.values[(m, n)]))
                .collect();
            writeln!(out, "{}", line.join(",")).expect("write to vec");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Writes the map as a 16-bit binary PGM. Depths map affinely onto
    /// `0..=65535`; the min/max of the mapping are recorded in a header
    /// comment so the scaling can be inverted.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in self.values.iter() {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
        if !lo.is_finite() || hi <= lo {
            hi = lo + 1.0;
        }
        let scale = 65535.0 / (hi - lo);
        let mut out = Vec::new();
        write!(
            out,
            "P5\n# depth min={lo} max={hi} (value = min + sample/65535*(max-min))\n{} {}\n65535\n",
            self.geometry.cols, self.geometry.rows
        )
        .expect("write to vec");
        for m in 0..self.geometry.rows {
            for n in 0..self.geometry.cols {
                let v = ((self.values[(m, n)] - lo) * scale)
                    .round()
                    .clamp(0.0, 65535.0) as u16;
                out.extend_from_slice(&v.to_be_bytes());
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Node gradients of a depth map, per axis, in grid units.
#[derive(Debug, Clone, PartialEq)]
pub struct MapGradients {
    pub dm: DMatrix<f64>,
    pub dn: DMatrix<f64>,
}

impl MapGradients {
    pub fn interpolate_at(&self, loc: &GridLocator) -> Vector2<f64> {
        let mut g = Vector2::zeros();
        for (&(m, n), w) in loc.nodes().iter().zip(&loc.weights) {
            g.x += w * self.dm[(m, n)];
            g.y += w * self.dn[(m, n)];
        }
        g
    }
}

/// Transforms every cloud by its pose and concatenates the result.
pub fn merge_clouds(clouds: &[PointCloud], poses: &[Pose]) -> PointCloud {
    assert_eq!(clouds.len(), poses.len(), "one pose per cloud");
    let mut points = Vec::with_capacity(clouds.iter().map(|c| c.points.len()).sum());
    for (cloud, pose) in clouds.iter().zip(poses) {
        let r = pose.rotation();
        points.extend(cloud.points.iter().map(|p| r * p + pose.t));
    }
    PointCloud {
        frame_id: "merged".to_string(),
        points,
    }
}

/// Convenience for tests and generators: a single-frame cloud at identity.
pub fn cloud_from_points(frame_id: &str, points: Vec<Vector3<f64>>) -> PointCloud {
    PointCloud {
        frame_id: frame_id.to_string(),
        points,
    }
}
