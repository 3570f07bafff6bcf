//! Calibration accuracy as a function of the number of points and views.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{runs_rmse, CORE_PARAMS};
use crate::model::{PlenopticIntrinsics, Pose};
use crate::observations::Observation;
use crate::par;
use crate::pipeline::{calibrate, CalibrationInput, PipelineOptions};
use crate::plenoptic_init::ScaleConstraint;
use crate::synthgen::SyntheticDataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub point_counts: Vec<usize>,
    pub view_counts: Vec<usize>,
    pub repeats: usize,
    pub seed: u64,
    pub pipeline: PipelineOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub points: usize,
    pub views: usize,
    /// Runs that produced a calibration.
    pub succeeded: usize,
    /// One message per failed run.
    pub failures: Vec<String>,
    /// Relative RMSE per core parameter over the successful runs.
    pub rmse: Vec<(String, f64)>,
    /// Largest relative error of any core parameter in any successful run.
    pub max_relative_error: Option<f64>,
    /// Final cost of every successful run; all finite when the cell passes.
    pub final_costs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub cells: Vec<SweepCell>,
}

impl SweepGrid {
    pub fn cell(&self, points: usize, views: usize) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.points == points && c.views == views)
    }

    /// One row per cell; RMSE columns in percent, empty when no run succeeded.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("points,views,succeeded,failed");
        for p in CORE_PARAMS {
            let _ = write!(s, ",rmse_{}_pct", p.name());
        }
        s.push('\n');
        for c in &self.cells {
            let _ = write!(s, "{},{},{},{}", c.points, c.views, c.succeeded, c.failures.len());
            for p in CORE_PARAMS {
                match c.rmse.iter().find(|(n, _)| n == p.name()) {
                    Some((_, v)) => {
                        let _ = write!(s, ",{:.6}", 100.0 * v);
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Random subset of `num_points` points and `num_views` views, renumbered
/// contiguously in their original order, with the matching ground-truth
/// poses. Endpoints of scale constraints are kept whenever `num_points`
/// allows: they stand for a physical reference of known length.
pub fn subsample(
    ds: &SyntheticDataset,
    num_points: usize,
    num_views: usize,
    rng: &mut ChaCha8Rng,
) -> (CalibrationInput, Vec<Pose>) {
    let pick = |n: usize, k: usize, required: &[usize], rng: &mut ChaCha8Rng| -> Vec<Option<usize>> {
        let mut chosen: Vec<usize> = if k >= n {
            (0..n).collect()
        } else if required.len() <= k {
            let rest: Vec<usize> = (0..n).filter(|i| !required.contains(i)).collect();
            let mut c = required.to_vec();
            c.extend(sample(rng, rest.len(), k - required.len()).into_iter().map(|i| rest[i]));
            c
        } else {
            sample(rng, n, k).into_vec()
        };
        chosen.sort_unstable();
        let mut map = vec![None; n];
        for (new, old) in chosen.iter().enumerate() {
            map[*old] = Some(new);
        }
        map
    };
    let mut anchors: Vec<usize> = ds
        .scale_constraints
        .iter()
        .flat_map(|c| [c.point_a, c.point_b])
        .collect();
    anchors.sort_unstable();
    anchors.dedup();
    let pmap = pick(ds.points_gt.len(), num_points, &anchors, rng);
    let vmap = pick(ds.poses_gt.len(), num_views, &[], rng);
    let records: Vec<Observation> = ds
        .observations
        .records()
        .iter()
        .filter_map(|o| {
            Some(Observation {
                point: pmap[o.point]?,
                view: vmap[o.view]?,
                ..*o
            })
        })
        .collect();
    let mut input = CalibrationInput::from_synthetic(ds);
    input.observations = crate::observations::ObservationSet::new(records)
        .expect("subset of a valid set")
        .filter_min_views(2)
        .0;
    input.scale_constraints = ds
        .scale_constraints
        .iter()
        .filter_map(|c| {
            Some(ScaleConstraint {
                point_a: pmap[c.point_a]?,
                point_b: pmap[c.point_b]?,
                ..*c
            })
        })
        .collect();
    let poses = ds
        .poses_gt
        .iter()
        .zip(&vmap)
        .filter_map(|(p, m)| m.map(|_| *p))
        .collect();
    (input, poses)
}

/// Runs the pipeline `repeats` times for every `(points, views)` cell on
/// subsets of `ds`. Failures are recorded per cell.
pub fn robustness_sweep(ds: &SyntheticDataset, options: &SweepOptions) -> SweepGrid {
    let mut jobs = Vec::new();
    for &p in &options.point_counts {
        for &v in &options.view_counts {
            for r in 0..options.repeats.max(1) {
                jobs.push((p, v, r));
            }
        }
    }
    let gt = ds.intrinsics_gt;
    let results = par::map_slice(&jobs, |&(p, v, r)| -> Result<(PlenopticIntrinsics, f64), String> {
        if p < 8 || v < 2 {
            return Err(format!("{p} points / {v} views is below the minimum (8 / 2)"));
        }
        let seed = options.seed ^ ((p as u64) << 40) ^ ((v as u64) << 20) ^ r as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (input, _) = subsample(ds, p, v, &mut rng);
        let mut pipeline = options.pipeline.clone();
        pipeline.sfm.seed = seed;
        calibrate(&input, &pipeline)
            .map(|res| (res.problem.intrinsics, res.report.final_cost))
            .map_err(|e| format!("{}: {e}", e.stage()))
    });
    let mut cells = Vec::new();
    for &p in &options.point_counts {
        for &v in &options.view_counts {
            let runs: Vec<&Result<_, _>> = jobs
                .iter()
                .zip(&results)
                .filter(|((jp, jv, _), _)| *jp == p && *jv == v)
                .map(|(_, r)| r)
                .collect();
            let ok: Vec<PlenopticIntrinsics> = runs.iter().filter_map(|r| r.as_ref().ok().map(|x| x.0)).collect();
            let max_rel = ok
                .iter()
                .flat_map(|e| {
                    CORE_PARAMS
                        .iter()
                        .map(move |q| ((e.get(*q) - gt.get(*q)) / gt.get(*q)).abs())
                })
                .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))));
            cells.push(SweepCell {
                points: p,
                views: v,
                succeeded: ok.len(),
                failures: runs.iter().filter_map(|r| r.as_ref().err().cloned()).collect(),
                rmse: if ok.is_empty() {
                    Vec::new()
                } else {
                    runs_rmse(&ok, &gt, &CORE_PARAMS).unwrap_or_default()
                },
                max_relative_error: max_rel,
                final_costs: runs.iter().filter_map(|r| r.as_ref().ok().map(|x| x.1)).collect(),
            });
        }
    }
    SweepGrid { cells }
}
