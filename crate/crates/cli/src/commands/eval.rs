//! Trajectory accuracy metrics and optional marker-distance evaluation.

use anyhow::{anyhow, Context};
use clap::Args;
use depthreg_core::error::{Error, Location};
use depthreg_core::eval::{
    align_gauge, marker_distance_errors, pose_errors, DistanceAxis, MarkerObservation,
    MarkerReference,
};
use depthreg_core::io;
use nalgebra::Vector3;
use std::path::{Path, PathBuf};

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Estimated trajectory file.
    #[arg(long)]
    pub est: PathBuf,

    /// Ground-truth trajectory file.
    #[arg(long)]
    pub gt: Option<PathBuf>,

    /// Skip the gauge alignment onto the first frame.
    #[arg(long)]
    pub no_align: bool,

    /// Also write the summary as JSON to this path ('-' for stdout).
    #[arg(long)]
    pub json: Option<PathBuf>,

    /// Marker observation file: `marker_id frame_id x y z` per line.
    #[arg(long)]
    pub markers: Option<PathBuf>,

    /// Marker reference file: `marker_a marker_b axis distance` per line.
    #[arg(long)]
    pub marker_refs: Option<PathBuf>,
}

pub fn run(args: EvalArgs) -> anyhow::Result<u8> {
    let est = io::read_trajectory(&args.est)?;
    let mut json = serde_json::Map::new();

    if let Some(gt_path) = &args.gt {
        let gt = io::read_trajectory(gt_path)?;
        let aligned = if args.no_align {
            est.clone()
        } else {
            align_gauge(&est, &gt)?
        };
        let summary = pose_errors(&aligned, &gt)?;
        print!("{}", summary.to_table());
        json.insert(
            "pose_errors".to_string(),
            serde_json::from_str(&summary.to_json())?,
        );
    }

    if let Some(markers_path) = &args.markers {
        let refs_path = args
            .marker_refs
            .as_ref()
            .ok_or_else(|| anyhow!("--markers requires --marker-refs"))?;
        let observations = read_markers(markers_path)?;
        let references = read_marker_refs(refs_path)?;
        let errors = marker_distance_errors(&observations, &est, &references)?;
        println!(
            "{:<8} {:<8} {:<10} {:>10} {:>10} {:>10}",
            "marker", "marker", "axis", "reference", "estimated", "error"
        );
        for e in &errors {
            println!(
                "{:<8} {:<8} {:<10} {:>10.4} {:>10.4} {:>10.4}",
                e.a,
                e.b,
                format!("{:?}", e.axis).to_lowercase(),
                e.reference,
                e.estimated,
                e.error
            );
        }
        json.insert("marker_errors".to_string(), serde_json::to_value(&errors)?);
    }

    if args.gt.is_none() && args.markers.is_none() {
        return Err(anyhow!("nothing to evaluate: pass --gt and/or --markers"));
    }

    if let Some(json_path) = &args.json {
        let text = serde_json::to_string_pretty(&serde_json::Value::Object(json))?;
        if json_path.as_os_str() == "-" {
            println!("{text}");
        } else {
            std::fs::write(json_path, text)
                .with_context(|| format!("writing {}", json_path.display()))?;
        }
    }
    Ok(0)
}

fn read_markers(path: &Path) -> anyhow::Result<Vec<MarkerObservation>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::parse(
                path,
                Location::Line(lineno + 1),
                format!("expected 5 fields, found {}", fields.len()),
            )
            .into());
        }
        let coord = |i: usize| -> anyhow::Result<f64> {
            fields[i].parse().map_err(|_| {
                Error::parse(
                    path,
                    Location::Line(lineno + 1),
                    format!("cannot parse '{}'", fields[i]),
                )
                .into()
            })
        };
        out.push(MarkerObservation {
            marker_id: fields[0].to_string(),
            frame_id: fields[1].to_string(),
            point: Vector3::new(coord(2)?, coord(3)?, coord(4)?),
        });
    }
    Ok(out)
}

fn read_marker_refs(path: &Path) -> anyhow::Result<Vec<MarkerReference>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                path,
                Location::Line(lineno + 1),
                format!("expected 4 fields, found {}", fields.len()),
            )
            .into());
        }
        let axis = DistanceAxis::parse(fields[2]).ok_or_else(|| {
            Error::parse(
                path,
                Location::Line(lineno + 1),
                format!("unknown axis '{}'", fields[2]),
            )
        })?;
        let distance: f64 = fields[3].parse().map_err(|_| {
            Error::parse(
                path,
                Location::Line(lineno + 1),
                format!("cannot parse '{}'", fields[3]),
            )
        })?;
        out.push(MarkerReference {
            a: fields[0].to_string(),
            b: fields[1].to_string(),
            axis,
            distance,
        });
    }
    Ok(out)
}
