//! Synthetic scene generation: writes per-frame clouds, ground-truth and
//! perturbed trajectories, and an echo of the scene spec.

use anyhow::{anyhow, Context};
use clap::Args;
use depthreg_core::io::{self, CloudFormat, TrajectoryRecord};
use depthreg_core::synth::{generate, SceneSpec};
use std::path::PathBuf;

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Scene spec file (key = value); a default bump-field scene when absent.
    #[arg(long)]
    pub spec: Option<PathBuf>,

    /// Overrides the spec's RNG seed.
    #[arg(long)]
    pub seed: Option<u64>,

    #[arg(long, default_value = "synth_out")]
    pub out_dir: PathBuf,

    /// Cloud file format.
    #[arg(long, default_value = "ply-binary", value_parser = ["ply-ascii", "ply-binary", "xyz"])]
    pub format: String,
}

pub fn run(args: SynthArgs) -> anyhow::Result<u8> {
    let mut spec = match &args.spec {
        Some(path) => {
            let pairs = io::read_key_values(path)?;
            SceneSpec::from_key_values(&pairs)
                .with_context(|| format!("parsing {}", path.display()))?
        }
        None => SceneSpec::bumps((3.0, 3.0), 10, 7),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let format = CloudFormat::parse(&args.format).ok_or_else(|| anyhow!("unknown format"))?;

    let scene = generate(&spec)?;
    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;

    let ext = match format {
        CloudFormat::XyzText => "xyz",
        _ => "ply",
    };
    for cloud in &scene.clouds {
        let path = args.out_dir.join(format!("{}.{ext}", cloud.frame_id));
        io::write_cloud(cloud, &path, format)?;
    }
    let to_records = |poses: &[depthreg_core::Pose]| -> Vec<TrajectoryRecord> {
        scene
            .clouds
            .iter()
            .zip(poses)
            .map(|(c, p)| TrajectoryRecord {
                frame_id: c.frame_id.clone(),
                pose: p.clone(),
            })
            .collect()
    };
    io::write_trajectory(
        &to_records(&scene.gt_poses),
        &args.out_dir.join("gt_trajectory.txt"),
    )?;
    io::write_trajectory(
        &to_records(&scene.init_poses),
        &args.out_dir.join("init_trajectory.txt"),
    )?;
    std::fs::write(args.out_dir.join("scene.cfg"), spec.to_config_string())
        .with_context(|| "writing scene.cfg")?;

    println!(
        "wrote {} frames ({} points each) to {}",
        scene.clouds.len(),
        spec.points_per_frame,
        args.out_dir.display()
    );
    Ok(0)
}
