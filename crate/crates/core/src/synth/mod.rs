//! Synthetic 2.5D scenes: analytic surfaces, a serpentine sensor sweep with
//! guaranteed footprint overlap, per-frame point sampling with depth noise,
//! and perturbed initial poses. Everything is a pure function of the scene
//! spec and its seed.
//!
//! The [`oracle`] submodule holds the independent reference implementations
//! (brute-force cost, finite-difference Jacobians) used to cross-check the
//! production evaluation path.

pub mod oracle;

use crate::depth_map::{DepthMap, GridGeometry};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::io::PointCloud;
use nalgebra::{DMatrix, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::Normal;
use std::fmt::Write as _;

/// One Gaussian bump of a [`Surface::GaussianBumps`] field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bump {
    pub cx: f64,
    pub cy: f64,
    pub sigma: f64,
    pub amp: f64,
}

/// Analytic height field z = f(x, y).
#[derive(Debug, Clone, PartialEq)]
pub enum Surface {
    /// z = a·x + b·y + c
    Plane { a: f64, b: f64, c: f64 },
    /// Base height plus a sum of Gaussian bumps.
    GaussianBumps { base: f64, bumps: Vec<Bump> },
    /// Constant-height slabs along x starting at x = 0.
    StepTerrace { heights: Vec<f64>, slab_width: f64 },
}

impl Surface {
    pub fn height(&self, x: f64, y: f64) -> f64 {
        match self {
            Surface::Plane { a, b, c } => a * x + b * y + c,
            Surface::GaussianBumps { base, bumps } => {
                base + bumps
                    .iter()
                    .map(|b| {
                        let d2 = (x - b.cx).powi(2) + (y - b.cy).powi(2);
                        b.amp * (-d2 / (2.0 * b.sigma * b.sigma)).exp()
                    })
                    .sum::<f64>()
            }
            Surface::StepTerrace {
                heights,
                slab_width,
            } => {
                let i = ((x / slab_width).floor() as i64).clamp(0, heights.len() as i64 - 1);
                heights[i as usize]
            }
        }
    }

    /// Upper bound on the magnitude of second derivatives, used to budget
    /// bilinear interpolation error. Terraces are discontinuous, so they
    /// report infinity.
    pub fn curvature_bound(&self) -> f64 {
        match self {
            Surface::Plane { .. } => 0.0,
            Surface::GaussianBumps { bumps, .. } => bumps
                .iter()
                .map(|b| b.amp.abs() / (b.sigma * b.sigma))
                .sum(),
            Surface::StepTerrace { .. } => f64::INFINITY,
        }
    }

    /// Depth map whose node values sample this surface exactly.
    pub fn to_depth_map(&self, geometry: GridGeometry) -> DepthMap {
        let (rows, cols) = (geometry.rows, geometry.cols);
        let values = DMatrix::from_fn(rows, cols, |m, n| {
            let w = geometry.node_world(m, n);
            self.height(w.x, w.y)
        });
        DepthMap {
            geometry,
            values,
            observed: DMatrix::from_element(rows, cols, true),
            obs_count: DMatrix::from_element(rows, cols, 1),
        }
    }

    /// A jittered grid of bumps covering the extent, so the surface carries
    /// x-y registration signal everywhere.
    pub fn bump_field(extent: (f64, f64), base: f64, rng: &mut impl Rng) -> Surface {
        let spacing = 0.5;
        let mut bumps = Vec::new();
        let mut cy = spacing * 0.5;
        while cy < extent.1 {
            let mut cx = spacing * 0.5;
            while cx < extent.0 {
                bumps.push(Bump {
                    cx: cx + rng.random_range(-0.12..0.12),
                    cy: cy + rng.random_range(-0.12..0.12),
                    sigma: rng.random_range(0.15..0.30),
                    amp: rng.random_range(-0.15..0.15),
                });
                cx += spacing;
            }
            cy += spacing;
        }
        Surface::GaussianBumps { base, bumps }
    }
}

/// Full description of a synthetic scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub surface: Surface,
    /// Scene extent in metres (x, y), anchored at the origin.
    pub extent: (f64, f64),
    pub frames: usize,
    /// Sensor footprint per frame, metres.
    pub footprint: (f64, f64),
    pub points_per_frame: usize,
    /// Depth noise standard deviation, metres.
    pub noise_sigma: f64,
    /// Uniform bound on the initial-pose translation perturbation, metres.
    pub perturb_translation: f64,
    /// Uniform bound on the initial-pose rotation perturbation, radians.
    pub perturb_rotation: f64,
    /// Nominal sensor height above z = 0.
    pub height: f64,
    pub seed: u64,
}

impl SceneSpec {
    /// A bump-field scene with the given extent; everything else defaulted.
    pub fn bumps(extent: (f64, f64), frames: usize, seed: u64) -> SceneSpec {
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x5eed_f1e1d);
        SceneSpec {
            surface: Surface::bump_field(extent, 0.8, &mut rng),
            extent,
            frames,
            footprint: (0.6 * extent.0, 0.6 * extent.1),
            points_per_frame: 2000,
            noise_sigma: 0.002,
            perturb_translation: 0.05,
            perturb_rotation: 2.0_f64.to_radians(),
            height: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.extent.0.is_finite()
            && self.extent.1.is_finite()
            && self.footprint.0.is_finite()
            && self.footprint.1.is_finite()
            && self.noise_sigma.is_finite()
            && self.perturb_translation.is_finite()
            && self.perturb_rotation.is_finite()
            && self.height.is_finite();
        if !finite {
            return Err(Error::InvalidSpec("non-finite parameter".into()));
        }
        if self.extent.0 <= 0.0 || self.extent.1 <= 0.0 {
            return Err(Error::InvalidSpec("extent must be positive".into()));
        }
        if self.footprint.0 <= 0.0
            || self.footprint.1 <= 0.0
            || self.footprint.0 > self.extent.0
            || self.footprint.1 > self.extent.1
        {
            return Err(Error::InvalidSpec(
                "footprint must be positive and fit inside the extent".into(),
            ));
        }
        if self.frames == 0 {
            return Err(Error::InvalidSpec("frames must be >= 1".into()));
        }
        if self.points_per_frame == 0 {
            return Err(Error::InvalidSpec("points_per_frame must be >= 1".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidSpec("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }

    /// Parses a scene from `key = value` pairs (see `read_key_values`).
    ///
    /// Keys: `surface` (plane|bumps|terrace), `plane` (a,b,c), `bumps_base`,
    /// `bump` (cx,cy,sigma,amp; repeatable), `terrace_heights` (list),
    /// `extent` (x,y), `frames`, `footprint` (x,y), `points_per_frame`,
    /// `noise_sigma`, `perturb_translation`, `perturb_rotation`, `height`,
    /// `seed`.
    pub fn from_key_values(pairs: &[(String, String, usize)]) -> Result<SceneSpec> {
        let bad = |line: usize, msg: String| Error::InvalidSpec(format!("line {line}: {msg}"));
        let parse_f64 = |v: &str, line: usize| {
            v.parse::<f64>()
                .map_err(|_| bad(line, format!("cannot parse number '{v}'")))
        };
        let parse_list = |v: &str, line: usize| -> Result<Vec<f64>> {
            v.split(',')
                .map(|f| parse_f64(f.trim(), line))
                .collect::<Result<Vec<f64>>>()
        };

        let mut surface_kind: Option<String> = None;
        let mut plane = (0.0, 0.0, 0.8);
        let mut bumps_base = 0.8;
        let mut bumps: Vec<Bump> = Vec::new();
        let mut terrace: Vec<f64> = Vec::new();
        let mut extent = (3.0, 3.0);
        let mut frames = 10usize;
        let mut footprint: Option<(f64, f64)> = None;
        let mut points_per_frame = 2000usize;
        let mut noise_sigma = 0.002;
        let mut perturb_translation = 0.05;
        let mut perturb_rotation = 2.0_f64.to_radians();
        let mut height = 1.0;
        let mut seed = 7u64;

        for (key, value, line) in pairs {
            let line = *line;
            match key.as_str() {
                "surface" => surface_kind = Some(value.clone()),
                "plane" => {
                    let v = parse_list(value, line)?;
                    if v.len() != 3 {
                        return Err(bad(line, "plane needs a,b,c".into()));
                    }
                    plane = (v[0], v[1], v[2]);
                }
                "bumps_base" => bumps_base = parse_f64(value, line)?,
                "bump" => {
                    let v = parse_list(value, line)?;
                    if v.len() != 4 {
                        return Err(bad(line, "bump needs cx,cy,sigma,amp".into()));
                    }
                    if v[2] <= 0.0 {
                        return Err(bad(line, "bump sigma must be positive".into()));
                    }
                    bumps.push(Bump {
                        cx: v[0],
                        cy: v[1],
                        sigma: v[2],
                        amp: v[3],
                    });
                }
                "terrace_heights" => terrace = parse_list(value, line)?,
                "extent" => {
                    let v = parse_list(value, line)?;
                    if v.len() != 2 {
                        return Err(bad(line, "extent needs x,y".into()));
                    }
                    extent = (v[0], v[1]);
                }
                "footprint" => {
                    let v = parse_list(value, line)?;
                    if v.len() != 2 {
                        return Err(bad(line, "footprint needs x,y".into()));
                    }
                    footprint = Some((v[0], v[1]));
                }
                "frames" => {
                    frames = value
                        .parse()
                        .map_err(|_| bad(line, format!("cannot parse frames '{value}'")))?
                }
                "points_per_frame" => {
                    points_per_frame = value
                        .parse()
                        .map_err(|_| bad(line, format!("cannot parse count '{value}'")))?
                }
                "noise_sigma" => noise_sigma = parse_f64(value, line)?,
                "perturb_translation" => perturb_translation = parse_f64(value, line)?,
                "perturb_rotation" => perturb_rotation = parse_f64(value, line)?,
                "height" => height = parse_f64(value, line)?,
                "seed" => {
                    seed = value
                        .parse()
                        .map_err(|_| bad(line, format!("cannot parse seed '{value}'")))?
                }
                other => {
                    return Err(Error::InvalidSpec(format!(
                        "line {line}: unknown key '{other}'"
                    )))
                }
            }
        }

        let surface = match surface_kind.as_deref() {
            Some("plane") => Surface::Plane {
                a: plane.0,
                b: plane.1,
                c: plane.2,
            },
            Some("terrace") => {
                if terrace.is_empty() {
                    return Err(Error::InvalidSpec(
                        "terrace surface needs terrace_heights".into(),
                    ));
                }
                Surface::StepTerrace {
                    slab_width: extent.0 / terrace.len() as f64,
                    heights: terrace,
                }
            }
            Some("bumps") | None => {
                if bumps.is_empty() {
                    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x5eed_f1e1d);
                    Surface::bump_field(extent, bumps_base, &mut rng)
                } else {
                    Surface::GaussianBumps {
                        base: bumps_base,
                        bumps,
                    }
                }
            }
            Some(other) => {
                return Err(Error::InvalidSpec(format!("unknown surface '{other}'")));
            }
        };

        let spec = SceneSpec {
            surface,
            extent,
            frames,
            footprint: footprint.unwrap_or((0.6 * extent.0, 0.6 * extent.1)),
            points_per_frame,
            noise_sigma,
            perturb_translation,
            perturb_rotation,
            height,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Config-file form of this spec; parseable by [`from_key_values`].
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        match &self.surface {
            Surface::Plane { a, b, c } => {
                writeln!(out, "surface = plane").unwrap();
                writeln!(out, "plane = {a},{b},{c}").unwrap();
            }
            Surface::GaussianBumps { base, bumps } => {
                writeln!(out, "surface = bumps").unwrap();
                writeln!(out, "bumps_base = {base}").unwrap();
                for b in bumps {
                    writeln!(out, "bump = {},{},{},{}", b.cx, b.cy, b.sigma, b.amp).unwrap();
                }
            }
            Surface::StepTerrace { heights, .. } => {
                writeln!(out, "surface = terrace").unwrap();
                let list: Vec<String> = heights.iter().map(|h| format!("{h}")).collect();
                writeln!(out, "terrace_heights = {}", list.join(",")).unwrap();
            }
        }
        writeln!(out, "extent = {},{}", self.extent.0, self.extent.1).unwrap();
        writeln!(out, "frames = {}", self.frames).unwrap();
        writeln!(out, "footprint = {},{}", self.footprint.0, self.footprint.1).unwrap();
        writeln!(out, "points_per_frame = {}", self.points_per_frame).unwrap();
        writeln!(out, "noise_sigma = {}", self.noise_sigma).unwrap();
        writeln!(out, "perturb_translation = {}", self.perturb_translation).unwrap();
        writeln!(out, "perturb_rotation = {}", self.perturb_rotation).unwrap();
        writeln!(out, "height = {}", self.height).unwrap();
        writeln!(out, "seed = {}", self.seed).unwrap();
        out
    }
}

/// A generated scene: per-frame local clouds, the true poses, the perturbed
/// starting poses, and the analytic surface they sample.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub clouds: Vec<PointCloud>,
    pub gt_poses: Vec<Pose>,
    pub init_poses: Vec<Pose>,
    pub surface: Surface,
}

/// Sensor centres of a serpentine sweep over the extent.
fn sweep_centers(spec: &SceneSpec) -> Vec<(f64, f64)> {
    let (ex, ey) = spec.extent;
    let (fx, fy) = spec.footprint;
    if spec.frames == 1 {
        return vec![(ex / 2.0, ey / 2.0)];
    }
    let rows = ((ey / fy).round() as usize).clamp(1, spec.frames);
    let cols = spec.frames.div_ceil(rows);
    let mut centers = Vec::with_capacity(spec.frames);
    'outer: for r in 0..rows {
        let y = if rows == 1 {
            ey / 2.0
        } else {
            fy / 2.0 + (ey - fy) * r as f64 / (rows - 1) as f64
        };
        let mut xs: Vec<f64> = (0..cols)
            .map(|c| {
                if cols == 1 {
                    ex / 2.0
                } else {
                    fx / 2.0 + (ex - fx) * c as f64 / (cols - 1) as f64
                }
            })
            .collect();
        if r % 2 == 1 {
            xs.reverse();
        }
        for x in xs {
            centers.push((x, y));
            if centers.len() == spec.frames {
                break 'outer;
            }
        }
    }
    centers
}

/// Overlap-area fraction of two footprints offset by (dx, dy).
fn overlap_fraction(footprint: (f64, f64), dx: f64, dy: f64) -> f64 {
    let ox = (footprint.0 - dx.abs()).max(0.0) / footprint.0;
    let oy = (footprint.1 - dy.abs()).max(0.0) / footprint.1;
    ox * oy
}

/// Generates the scene. Deterministic for a given spec (including its seed).
pub fn generate(spec: &SceneSpec) -> Result<SynthScene> {
    spec.validate()?;
    let centers = sweep_centers(spec);
    for (i, pair) in centers.windows(2).enumerate() {
        let frac = overlap_fraction(spec.footprint, pair[1].0 - pair[0].0, pair[1].1 - pair[0].1);
        if frac < 0.2 {
            return Err(Error::InvalidSpec(format!(
                "consecutive footprints {i} and {} overlap by {:.0}% (< 20%); \
                 use fewer frames or a larger footprint",
                i + 1,
                frac * 100.0
            )));
        }
    }

    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sigma.max(1e-300)).expect("valid sigma");
    let mut gt_poses = Vec::with_capacity(spec.frames);
    let mut clouds = Vec::with_capacity(spec.frames);
    for (i, &(cx, cy)) in centers.iter().enumerate() {
        let pose = Pose::new(
            Vector3::new(cx, cy, spec.height + rng.random_range(-0.02..0.02)),
            Vector3::new(
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
            ),
        );
        let points: Vec<Vector3<f64>> = (0..spec.points_per_frame)
            .map(|_| {
                let x = cx + rng.random_range(-spec.footprint.0 / 2.0..spec.footprint.0 / 2.0);
                let y = cy + rng.random_range(-spec.footprint.1 / 2.0..spec.footprint.1 / 2.0);
                let mut z = spec.surface.height(x, y);
                if spec.noise_sigma > 0.0 {
                    z += noise.sample(&mut rng);
                }
                pose.inverse_transform_point(&Vector3::new(x, y, z))
            })
            .collect();
        gt_poses.push(pose);
        clouds.push(PointCloud::new(format!("f{i:03}"), points));
    }

    let bt = spec.perturb_translation;
    let br = spec.perturb_rotation;
    let init_poses: Vec<Pose> = gt_poses
        .iter()
        .map(|p| {
            let dt = if bt > 0.0 {
                Vector3::new(
                    rng.random_range(-bt..bt),
                    rng.random_range(-bt..bt),
                    rng.random_range(-bt..bt),
                )
            } else {
                Vector3::zeros()
            };
            let dr = if br > 0.0 {
                Vector3::new(
                    rng.random_range(-br..br),
                    rng.random_range(-br..br),
                    rng.random_range(-br..br),
                )
            } else {
                Vector3::zeros()
            };
            let mut pose = Pose::new(p.t + dt, p.theta + dr);
            pose.normalize_angles();
            pose
        })
        .collect();

    Ok(SynthScene {
        clouds,
        gt_poses,
        init_poses,
        surface: spec.surface.clone(),
    })
}

/// A random problem for Jacobian verification: a random *affine* map (the
/// interpolated-node-gradient Jacobian is exact only there), random poses,
/// and points whose projections stay at least 0.05 grid units away from cell
/// edges so finite-difference probes cannot cross an interpolation boundary.
pub fn jacobian_check_problem(
    seed: u64,
    frames: usize,
    grid: usize,
    points_per_frame: usize,
) -> (crate::problem::ProblemState, Vec<PointCloud>) {
    use crate::problem::ProblemState;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let resolution = 0.05;
    let slope_a = rng.random_range(-0.05..0.05);
    let slope_b = rng.random_range(-0.05..0.05);
    let base = rng.random_range(0.6..1.0);
    let geometry = GridGeometry {
        rows: grid,
        cols: grid,
        resolution,
        origin: nalgebra::Vector2::new(0.0, 0.0),
    };
    let values = DMatrix::from_fn(grid, grid, |m, n| {
        base + slope_a * m as f64 + slope_b * n as f64
    });
    let map = DepthMap {
        geometry,
        values,
        observed: DMatrix::from_element(grid, grid, true),
        obs_count: DMatrix::from_element(grid, grid, 1),
    };

    let mut poses = Vec::with_capacity(frames);
    let mut clouds = Vec::with_capacity(frames);
    for i in 0..frames {
        let pose = Pose::new(
            Vector3::new(
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
            ),
            Vector3::new(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
            ),
        );
        let points: Vec<Vector3<f64>> = (0..points_per_frame)
            .map(|_| {
                let gm = rng.random_range(1..grid - 2) as f64 + rng.random_range(0.05..0.95);
                let gn = rng.random_range(1..grid - 2) as f64 + rng.random_range(0.05..0.95);
                let world = Vector3::new(
                    gm * resolution,
                    gn * resolution,
                    base + rng.random_range(-0.2..0.2),
                );
                pose.inverse_transform_point(&world)
            })
            .collect();
        poses.push(pose);
        clouds.push(PointCloud::new(format!("f{i}"), points));
    }
    (ProblemState::new(poses, map, 0), clouds)
}
