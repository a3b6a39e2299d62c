//! Forward-pass cost sweep over the clip length.

use std::io::Write;
use std::time::Instant;

use crate::error::{IvtError, Result};
use crate::synth::{generate, SceneSpec};
use crate::tensor::Graph;
use crate::train::RunConfig;

/// Cost of one forward pass over a `frames`-frame clip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub frames: usize,
    pub tokenize_macs: u64,
    pub spatial_macs: u64,
    pub temporal_macs: u64,
    pub total_macs: u64,
    /// Median wall time over the repeats, in milliseconds.
    pub wall_ms: f64,
}

/// Runs the configured model on synthetic clips of every requested length.
pub fn frame_sweep(run: &RunConfig, frames: &[usize], repeats: usize) -> Result<Vec<BenchRow>> {
    if frames.is_empty() || frames.contains(&0) || repeats == 0 {
        return Err(IvtError::config("frame counts and repeats must be positive"));
    }
    let (model, params) = run.init_model()?;
    let mut rows = Vec::with_capacity(frames.len());
    for &t in frames {
        let scene = generate(&SceneSpec {
            frames: t,
            ..run.scene.clone()
        })?;
        let teacher: Vec<_> = scene.targets.iter().map(|x| x.offsets2d.clone()).collect();
        let mut times = Vec::with_capacity(repeats);
        let mut row = None;
        for _ in 0..repeats {
            let start = Instant::now();
            let mut g = Graph::new();
            let out = model.forward(&mut g, &params, &scene.features, &scene.flows, Some(&teacher))?;
            times.push(start.elapsed().as_secs_f64() * 1e3);
            row = Some(BenchRow {
                frames: t,
                tokenize_macs: out.macs.tokenize,
                spatial_macs: out.macs.spatial,
                temporal_macs: out.macs.temporal,
                total_macs: g.macs(),
                wall_ms: 0.0,
            });
        }
        times.sort_by(f64::total_cmp);
        let mut row = row.expect("repeats ≥ 1");
        row.wall_ms = times[times.len() / 2];
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_bench_csv<W: Write>(w: W, rows: &[BenchRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let err = |e: csv::Error| IvtError::Io(std::io::Error::other(e));
    wr.write_record(["frames", "tokenize_macs", "spatial_macs", "temporal_macs", "total_macs", "wall_ms"])
        .map_err(err)?;
    for r in rows {
        wr.write_record([
            r.frames.to_string(),
            r.tokenize_macs.to_string(),
            r.spatial_macs.to_string(),
            r.temporal_macs.to_string(),
            r.total_macs.to_string(),
            format!("{:.3}", r.wall_ms),
        ])
        .map_err(err)?;
    }
    wr.flush()?;
    Ok(())
}
