//! Cloud conversion and merged-cloud export.

use anyhow::{anyhow, bail, Context};
use clap::Args;
use depthreg_core::depth_map::merge_clouds;
use depthreg_core::io::{self, CloudFormat};
use depthreg_core::Pose;
use std::collections::HashMap;
use std::path::PathBuf;

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// Clouds to merge into one global cloud (requires --trajectory).
    pub clouds: Vec<PathBuf>,

    /// Poses used to place the merged clouds.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,

    /// Convert a single cloud file instead of merging.
    #[arg(long, conflicts_with = "trajectory")]
    pub cloud: Option<PathBuf>,

    #[arg(long)]
    pub out: PathBuf,

    #[arg(long, default_value = "ply-binary", value_parser = ["ply-ascii", "ply-binary", "xyz"])]
    pub format: String,

    /// Coordinate scale applied on read.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
}

pub fn run(args: ExportArgs) -> anyhow::Result<u8> {
    let format = CloudFormat::parse(&args.format).ok_or_else(|| anyhow!("unknown format"))?;

    if let Some(single) = &args.cloud {
        let (cloud, dropped) = io::read_cloud(single)?;
        if dropped > 0 {
            log::warn!("{}: dropped {dropped} non-finite rows", single.display());
        }
        let cloud = cloud.scaled(args.scale);
        io::write_cloud(&cloud, &args.out, format)?;
        println!("wrote {} points to {}", cloud.len(), args.out.display());
        return Ok(0);
    }

    if args.clouds.is_empty() {
        bail!("pass cloud files to merge (with --trajectory) or --cloud to convert one file");
    }
    let trajectory = args
        .trajectory
        .as_ref()
        .ok_or_else(|| anyhow!("merging clouds requires --trajectory"))?;
    let records = io::read_trajectory(trajectory)?;
    let by_id: HashMap<&str, &Pose> = records
        .iter()
        .map(|r| (r.frame_id.as_str(), &r.pose))
        .collect();

    let mut clouds = Vec::new();
    let mut poses = Vec::new();
    for path in &args.clouds {
        let (cloud, _) =
            io::read_cloud(path).with_context(|| format!("reading {}", path.display()))?;
        let pose = by_id
            .get(cloud.frame_id.as_str())
            .map(|p| (*p).clone())
            .ok_or_else(|| anyhow!("no pose for frame '{}'", cloud.frame_id))?;
        clouds.push(cloud.scaled(args.scale));
        poses.push(pose);
    }
    let merged = merge_clouds(&clouds, &poses);
    io::write_cloud(&merged, &args.out, format)?;
    println!(
        "merged {} frames ({} points) into {}",
        clouds.len(),
        merged.len(),
        args.out.display()
    );
    Ok(0)
}
