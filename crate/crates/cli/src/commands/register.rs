//! The registration pipeline: read clouds and initial poses, fit and
//! initialize the depth map, run the solver, and write the outputs.
//!
//! Outputs are staged to `*.tmp` files and renamed only after every file has
//! been produced, so a failed run never leaves partial outputs behind.

use anyhow::{anyhow, bail, Context};
use clap::Args;
use depthreg_core::depth_map;
use depthreg_core::error::Error;
use depthreg_core::io::{self, CloudFormat, PointCloud, TrajectoryRecord};
use depthreg_core::problem::{default_smooth_weight, ProblemState, RobustLoss, Weights};
use depthreg_core::solver::{self, Damping, LinearSolver, SolveReport, SolverConfig, Termination};
use depthreg_core::Pose;
use std::collections::HashMap;
use std::path::{Path, PathBuf};

#[derive(Args, Debug)]
pub struct RegisterArgs {
    /// Input point clouds in frame order (.ply or .xyz).
    pub clouds: Vec<PathBuf>,

    /// Flat key=value config file; command-line flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Initial trajectory file (frame_id tx ty tz qx qy qz qw).
    #[arg(long)]
    pub init_traj: Option<PathBuf>,

    /// Start every pose at the identity (near-aligned datasets).
    #[arg(long)]
    pub identity_init: bool,

    /// Depth-map resolution in metres per cell.
    #[arg(long)]
    pub resolution: Option<f64>,

    /// Extra grid cells added around the data bounds.
    #[arg(long)]
    pub margin: Option<usize>,

    /// Depth-term weight.
    #[arg(long)]
    pub wd: Option<f64>,

    /// Smoothing-term weight (default scales with points per cell).
    #[arg(long)]
    pub ws: Option<f64>,

    #[arg(long)]
    pub max_iters: Option<usize>,

    /// Undamped Gauss-Newton steps (no step rejection).
    #[arg(long)]
    pub pure_gn: bool,

    /// Initial Levenberg damping parameter.
    #[arg(long)]
    pub damping: Option<f64>,

    /// Step infinity-norm convergence tolerance.
    #[arg(long)]
    pub step_tol: Option<f64>,

    /// Relative cost-decrease convergence tolerance.
    #[arg(long)]
    pub cost_tol: Option<f64>,

    /// Huber loss scale for depth residuals (off when absent).
    #[arg(long)]
    pub huber: Option<f64>,

    /// Linear solver backend.
    #[arg(long, value_parser = ["direct", "cg"])]
    pub linear_solver: Option<String>,

    #[arg(long)]
    pub cg_max_iters: Option<usize>,

    #[arg(long)]
    pub cg_tol: Option<f64>,

    /// Re-initialize the map from current poses every K accepted iterations.
    #[arg(long)]
    pub reinit_map_every: Option<usize>,

    /// Coordinate scale applied to input clouds (e.g. 0.001 for mm data).
    #[arg(long)]
    pub scale: Option<f64>,

    #[arg(long)]
    pub out_dir: Option<PathBuf>,

    /// Format of the merged global cloud output.
    #[arg(long, value_parser = ["ply-ascii", "ply-binary", "xyz"])]
    pub merged_format: Option<String>,
}

/// Fully resolved run configuration (defaults < config file < flags).
#[derive(Debug, Clone)]
struct RunConfig {
    clouds: Vec<PathBuf>,
    init_traj: Option<PathBuf>,
    identity_init: bool,
    resolution: f64,
    margin: usize,
    wd: f64,
    ws: Option<f64>,
    max_iters: usize,
    pure_gn: bool,
    damping: f64,
    step_tol: f64,
    cost_tol: f64,
    huber: Option<f64>,
    linear_solver: String,
    cg_max_iters: usize,
    cg_tol: f64,
    reinit_map_every: Option<usize>,
    scale: f64,
    out_dir: PathBuf,
    merged_format: CloudFormat,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            clouds: Vec::new(),
            init_traj: None,
            identity_init: false,
            resolution: 0.05,
            margin: 2,
            wd: 1.0,
            ws: None,
            max_iters: 50,
            pure_gn: false,
            damping: 1e-4,
            step_tol: 1e-6,
            cost_tol: 1e-8,
            huber: None,
            linear_solver: "direct".to_string(),
            cg_max_iters: 2000,
            cg_tol: 1e-10,
            reinit_map_every: None,
            scale: 1.0,
            out_dir: PathBuf::from("out"),
            merged_format: CloudFormat::PlyBinaryLe,
        }
    }
}

impl RunConfig {
    fn apply_file(&mut self, path: &Path) -> anyhow::Result<()> {
        let parse = |v: &str, line: usize, key: &str| -> anyhow::Result<f64> {
            v.parse()
                .map_err(|_| anyhow!("{}:{line}: cannot parse {key} '{v}'", path.display()))
        };
        for (key, value, line) in io::read_key_values(path)? {
            match key.as_str() {
                "clouds" => {
                    self.clouds = value.split(',').map(|p| PathBuf::from(p.trim())).collect()
                }
                "init_traj" => self.init_traj = Some(PathBuf::from(&value)),
                "identity_init" => self.identity_init = value == "true",
                "resolution" => self.resolution = parse(&value, line, &key)?,
                "margin" => self.margin = parse(&value, line, &key)? as usize,
                "wd" => self.wd = parse(&value, line, &key)?,
                "ws" => self.ws = Some(parse(&value, line, &key)?),
                "max_iters" => self.max_iters = parse(&value, line, &key)? as usize,
                "pure_gn" => self.pure_gn = value == "true",
                "damping" => self.damping = parse(&value, line, &key)?,
                "step_tol" => self.step_tol = parse(&value, line, &key)?,
                "cost_tol" => self.cost_tol = parse(&value, line, &key)?,
                "huber" => self.huber = Some(parse(&value, line, &key)?),
                "linear_solver" => self.linear_solver = value,
                "cg_max_iters" => self.cg_max_iters = parse(&value, line, &key)? as usize,
                "cg_tol" => self.cg_tol = parse(&value, line, &key)?,
                "reinit_map_every" => {
                    self.reinit_map_every = Some(parse(&value, line, &key)? as usize)
                }
                "scale" => self.scale = parse(&value, line, &key)?,
                "out_dir" => self.out_dir = PathBuf::from(&value),
                "merged_format" => {
                    self.merged_format = CloudFormat::parse(&value).ok_or_else(|| {
                        anyhow!("{}:{line}: unknown cloud format '{value}'", path.display())
                    })?
                }
                other => bail!("{}:{line}: unknown config key '{other}'", path.display()),
            }
        }
        Ok(())
    }

    fn apply_flags(&mut self, args: &RegisterArgs) {
        if !args.clouds.is_empty() {
            self.clouds = args.clouds.clone();
        }
        if args.init_traj.is_some() {
            self.init_traj = args.init_traj.clone();
        }
        if args.identity_init {
            self.identity_init = true;
        }
        if let Some(v) = args.resolution {
            self.resolution = v;
        }
        if let Some(v) = args.margin {
            self.margin = v;
        }
        if let Some(v) = args.wd {
            self.wd = v;
        }
        if let Some(v) = args.ws {
            self.ws = Some(v);
        }
        if let Some(v) = args.max_iters {
            self.max_iters = v;
        }
        if args.pure_gn {
            self.pure_gn = true;
        }
        if let Some(v) = args.damping {
            self.damping = v;
        }
        if let Some(v) = args.step_tol {
            self.step_tol = v;
        }
        if let Some(v) = args.cost_tol {
            self.cost_tol = v;
        }
        if args.huber.is_some() {
            self.huber = args.huber;
        }
        if let Some(v) = &args.linear_solver {
            self.linear_solver = v.clone();
        }
        if let Some(v) = args.cg_max_iters {
            self.cg_max_iters = v;
        }
        if let Some(v) = args.cg_tol {
            self.cg_tol = v;
        }
        if args.reinit_map_every.is_some() {
            self.reinit_map_every = args.reinit_map_every;
        }
        if let Some(v) = args.scale {
            self.scale = v;
        }
        if let Some(v) = &args.out_dir {
            self.out_dir = v.clone();
        }
        if let Some(v) = &args.merged_format {
            self.merged_format = CloudFormat::parse(v).expect("validated by clap");
        }
    }

    fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            max_iterations: self.max_iters,
            step_tolerance: self.step_tol,
            cost_relative_tolerance: self.cost_tol,
            damping: if self.pure_gn {
                Damping::None
            } else {
                Damping::Levenberg {
                    initial: self.damping,
                    increase: 10.0,
                    decrease: 0.5,
                }
            },
            linear_solver: if self.linear_solver == "cg" {
                LinearSolver::ConjugateGradient {
                    max_iterations: self.cg_max_iters,
                    tolerance: self.cg_tol,
                }
            } else {
                LinearSolver::SparseDirect
            },
            loss: match self.huber {
                Some(scale) => RobustLoss::Huber { scale },
                None => RobustLoss::None,
            },
            reinit_map_every: self.reinit_map_every.filter(|&k| k > 0),
        }
    }
}

pub fn run(args: RegisterArgs) -> anyhow::Result<u8> {
    let mut config = RunConfig::default();
    if let Some(path) = &args.config {
        config.apply_file(path)?;
    }
    config.apply_flags(&args);

    if config.clouds.len() < 2 {
        bail!(
            "registration needs at least 2 cloud files, got {}",
            config.clouds.len()
        );
    }
    if config.resolution <= 0.0 {
        bail!("resolution must be positive");
    }
    if !config.identity_init && config.init_traj.is_none() {
        bail!("provide --init-traj or pass --identity-init");
    }

    let mut clouds = Vec::with_capacity(config.clouds.len());
    for path in &config.clouds {
        let (cloud, dropped) =
            io::read_cloud(path).with_context(|| format!("reading cloud {}", path.display()))?;
        if dropped > 0 {
            log::warn!("{}: dropped {dropped} non-finite rows", path.display());
        }
        if cloud.is_empty() {
            return Err(Error::EmptyCloud(cloud.frame_id).into());
        }
        clouds.push(if config.scale != 1.0 {
            cloud.scaled(config.scale)
        } else {
            cloud
        });
    }

    let poses = initial_poses(&clouds, &config)?;

    let geometry = depth_map::fit_bounds(&clouds, &poses, config.resolution, config.margin)?;
    let (map, stats) = depth_map::initialize(&clouds, &poses, geometry);
    let total_points: usize = clouds.iter().map(PointCloud::len).sum();
    let cells = map.geometry.cell_count();
    println!(
        "grid {}x{} cells ({} total), {} points, {} unobserved nodes, {} dropped",
        map.geometry.rows,
        map.geometry.cols,
        cells,
        total_points,
        stats.unobserved_nodes,
        stats.dropped_out_of_grid
    );
    if stats.all_unobserved {
        log::warn!("the depth map has no observed nodes");
    }
    if stats.max_z_variance() > 0.05 {
        log::warn!(
            "max per-cell depth variance {:.3} m^2 suggests surfaces violating the \
             single-height assumption",
            stats.max_z_variance()
        );
    }

    let weights = Weights::new(
        config.wd,
        config
            .ws
            .unwrap_or_else(|| default_smooth_weight(total_points as f64 / cells as f64)),
    );
    println!("weights: depth {} smooth {}", weights.depth, weights.smooth);

    let state = ProblemState::new(poses, map, 0);
    let (solved, report) = match solver::solve(state, &clouds, weights, &config.solver_config()) {
        Ok(result) => result,
        Err(e @ Error::LinearSolver(_)) => {
            eprintln!("error: {e}");
            return Ok(3);
        }
        Err(e) => return Err(e.into()),
    };

    print!("{}", report.to_text());

    write_outputs(&config, &clouds, &solved, &report)?;
    println!("outputs written to {}", config.out_dir.display());

    Ok(match report.termination {
        Termination::ConvergedStep | Termination::ConvergedCost => 0,
        Termination::MaxIterations => 2,
        Termination::LinearSolverFailure => 3,
    })
}

fn initial_poses(clouds: &[PointCloud], config: &RunConfig) -> anyhow::Result<Vec<Pose>> {
    if config.identity_init {
        return Ok(vec![Pose::identity(); clouds.len()]);
    }
    let path = config.init_traj.as_ref().expect("checked above");
    let records = io::read_trajectory(path)?;
    let by_id: HashMap<&str, &Pose> = records
        .iter()
        .map(|r| (r.frame_id.as_str(), &r.pose))
        .collect();
    clouds
        .iter()
        .map(|c| {
            by_id
                .get(c.frame_id.as_str())
                .map(|p| (*p).clone())
                .ok_or_else(|| {
                    anyhow!(
                        "initial trajectory {} has no pose for frame '{}'",
                        path.display(),
                        c.frame_id
                    )
                })
        })
        .collect()
}

fn write_outputs(
    config: &RunConfig,
    clouds: &[PointCloud],
    solved: &ProblemState,
    report: &SolveReport,
) -> anyhow::Result<()> {
    std::fs::create_dir_all(&config.out_dir)
        .with_context(|| format!("creating {}", config.out_dir.display()))?;

    let records: Vec<TrajectoryRecord> = clouds
        .iter()
        .zip(&solved.poses)
        .map(|(c, p)| TrajectoryRecord {
            frame_id: c.frame_id.clone(),
            pose: p.clone(),
        })
        .collect();
    let merged = depth_map::merge_clouds(clouds, &solved.poses);
    let merged_ext = match config.merged_format {
        CloudFormat::XyzText => "xyz",
        _ => "ply",
    };

    // Stage everything in .tmp files, then rename; a failure part-way leaves
    // no recognised outputs behind.
    let out = |name: &str| config.out_dir.join(name);
    let staged: Vec<(PathBuf, PathBuf)> = [
        "trajectory.txt".to_string(),
        format!("merged.{merged_ext}"),
        "depthmap.csv".to_string(),
        "depthmap.pgm".to_string(),
        "report.json".to_string(),
        "report.txt".to_string(),
    ]
    .iter()
    .map(|n| (out(&format!("{n}.tmp")), out(n)))
    .collect();

    let write_all = || -> anyhow::Result<()> {
        io::write_trajectory(&records, &staged[0].0)?;
        io::write_cloud(&merged, &staged[1].0, config.merged_format)?;
        solved.map.write_csv(&staged[2].0)?;
        solved.map.write_pgm(&staged[3].0)?;
        std::fs::write(&staged[4].0, report.to_json()).map_err(|e| Error::io(&staged[4].0, e))?;
        std::fs::write(&staged[5].0, report.to_text()).map_err(|e| Error::io(&staged[5].0, e))?;
        Ok(())
    };
    if let Err(e) = write_all() {
        for (tmp, _) in &staged {
            let _ = std::fs::remove_file(tmp);
        }
        return Err(e);
    }
    for (tmp, final_path) in &staged {
        std::fs::rename(tmp, final_path).with_context(|| format!("renaming {}", tmp.display()))?;
    }
    Ok(())
}
