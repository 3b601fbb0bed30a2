//! End-to-end registration: matching statistics, overlap prediction, edge
//! selection, pairwise registration, confidence attributes, spanning-tree
//! initialization, the sync network and translation refinement.
//!
//! Synthetic scenes skip the point-level stages: their statistics come from
//! the planted overlap and their edge measurements are planted.

use std::fs;
use std::path::Path;

use mdgd_core::geometry::{PoseJson, RigidPose};
use mdgd_core::matching::{compute_stats_with, mutual_match, DescriptorSet, MatchStats, OverlapNet};
use mdgd_core::posegraph::{
    compute_icr, compute_ipr, full_edges, merged_inlier_cloud, ransac_register, select_topk, spanning_init,
    PairMeasure, PlaneConfig, PoseGraph, RansacConfig, RelMeasure, SpanningInit,
};
use mdgd_core::sync::{GraphInput, SyncNet, SyncPrediction};
use mdgd_core::synth::{derive_seed, scene_stats_with, SyntheticScene};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{GraphKind, RunConfig};
use crate::error::{Error, Result, StageExt};
use crate::eval::{evaluate, EvalReport, EvalThresholds};

const RANSAC_DOMAIN: u64 = 0x11u64 << 56;
const PLANE_DOMAIN: u64 = 0x13u64 << 56;

pub struct Models {
    pub overlap: OverlapNet,
    pub sync: SyncNet,
}

impl Models {
    /// Loads both checkpoints named in `cfg`.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        for p in [&cfg.overlap_checkpoint, &cfg.sync_checkpoint] {
            if !Path::new(p).is_file() {
                return Err(Error::MissingCheckpoint(p.clone()));
            }
        }
        let ot = &cfg.overlap_train;
        let mut overlap = OverlapNet::new(ot.width, ot.n_cap, ot.seed);
        overlap.load(Path::new(&cfg.overlap_checkpoint)).stage("load overlap")?;
        let sync = SyncNet::load(cfg.sync, Path::new(&cfg.sync_checkpoint)).stage("load sync")?;
        Ok(Models { overlap, sync })
    }
}

pub enum Input<'a> {
    Synthetic(&'a SyntheticScene),
    Descriptors(&'a [DescriptorSet]),
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub stats: Vec<Vec<MatchStats>>,
    /// Predicted overlap, symmetric with zero diagonal.
    pub overlap: Vec<Vec<f64>>,
    /// Directed edges selected for registration.
    pub edges: Vec<(usize, usize)>,
    /// Selected pairs whose registration failed and were dropped.
    pub dropped: Vec<(usize, usize)>,
    pub graph: PoseGraph,
    pub init: SpanningInit,
    pub prediction: SyncPrediction,
}

impl PipelineOutput {
    pub fn poses(&self) -> Vec<RigidPose> {
        self.prediction.poses()
    }
}

fn predict_overlap(net: &OverlapNet, stats: &[Vec<MatchStats>]) -> Vec<Vec<f64>> {
    let n = stats.len();
    let flat: Vec<MatchStats> = (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v))).map(|(u, v)| stats[u][v]).collect();
    let pred = net.predict_batch(&flat);
    let mut o = vec![vec![0.0; n]; n];
    let mut k = 0;
    for u in 0..n {
        for v in u + 1..n {
            o[u][v] = pred[k];
            o[v][u] = pred[k];
            k += 1;
        }
    }
    o
}

fn select_edges(cfg: &RunConfig, overlap: &[Vec<f64>]) -> Result<Vec<(usize, usize)>> {
    match cfg.graph {
        GraphKind::Full => Ok(full_edges(overlap.len())),
        GraphKind::Sparse => select_topk(overlap, cfg.k).stage("select"),
    }
}

/// Registers `v` onto `u` and measures the pair's confidence attributes.
fn register_pair(
    sets: &[DescriptorSet],
    corr: &mdgd_core::matching::CorrespondenceSet,
    u: usize,
    v: usize,
    overlap: f64,
    cfg: &RunConfig,
) -> mdgd_core::Result<PairMeasure> {
    let (a, b) = (&sets[u], &sets[v]);
    let rc = RansacConfig {
        seed: derive_seed(RANSAC_DOMAIN ^ cfg.ransac.seed, cfg.seed, (u * sets.len() + v) as u64),
        ..cfg.ransac
    };
    let res = ransac_register(corr, a, b, &rc)?;
    let t = res.pose;
    let icr = compute_icr(corr, a, b, &t, rc.tau);
    let reversed = mdgd_core::matching::CorrespondenceSet {
        pairs: corr.pairs.iter().map(|&(i, j)| (j, i)).collect(),
        distances: corr.distances.clone(),
    };
    let icr_reverse = compute_icr(&reversed, b, a, &t.inverse(), rc.tau);
    let plane = PlaneConfig {
        seed: derive_seed(PLANE_DOMAIN ^ cfg.plane.seed, cfg.seed, (u * sets.len() + v) as u64),
        ..cfg.plane
    };
    let ipr = compute_ipr(&merged_inlier_cloud(corr, a, b, &t, &res.inliers), &plane);
    Ok(PairMeasure {
        u,
        v,
        forward: RelMeasure {
            transform: t,
            overlap,
            icr,
            ipr,
        },
        icr_reverse,
    })
}

fn synchronize(models: &Models, graph: &PoseGraph) -> Result<(SpanningInit, SyncPrediction)> {
    let init = spanning_init(graph).stage("init")?;
    let g = GraphInput::new(graph, &init, models.sync.cfg.residual_heads).stage("sync")?;
    let prediction = models.sync.predict(&g).stage("sync")?;
    Ok((init, prediction))
}

pub fn run_pipeline(input: Input<'_>, models: &Models, cfg: &RunConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    match input {
        Input::Synthetic(scene) => {
            let stats = scene_stats_with(scene, cfg.seed, &cfg.ecdf_thresholds);
            let overlap = predict_overlap(&models.overlap, &stats);
            let edges = select_edges(cfg, &overlap)?;
            let (graph, _) = scene.graph_on(&edges).stage("register")?;
            let (init, prediction) = synchronize(models, &graph)?;
            Ok(PipelineOutput {
                stats,
                overlap,
                edges,
                dropped: Vec::new(),
                graph,
                init,
                prediction,
            })
        }
        Input::Descriptors(sets) => {
            let n = sets.len();
            let pairs: Vec<(usize, usize)> = (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v))).collect();
            let matched: Vec<_> = pairs
                .par_iter()
                .map(|&(u, v)| mutual_match(&sets[u], &sets[v]))
                .collect::<mdgd_core::Result<_>>()
                .stage("match")?;
            let mut stats = vec![vec![MatchStats::EMPTY; n]; n];
            for (&(u, v), c) in pairs.iter().zip(&matched) {
                let s = compute_stats_with(&c.distances, &cfg.ecdf_thresholds);
                stats[u][v] = s;
                stats[v][u] = s;
            }
            let overlap = predict_overlap(&models.overlap, &stats);
            let edges = select_edges(cfg, &overlap)?;
            let chosen: Vec<(usize, usize, usize)> = pairs
                .iter()
                .enumerate()
                .filter(|(_, p)| edges.binary_search(p).is_ok())
                .map(|(k, &(u, v))| (k, u, v))
                .collect();
            let measured: Vec<Option<PairMeasure>> = chosen
                .par_iter()
                .map(|&(k, u, v)| register_pair(sets, &matched[k], u, v, overlap[u][v], cfg).ok())
                .collect();
            let mut kept = Vec::new();
            let mut dropped = Vec::new();
            for (m, &(_, u, v)) in measured.into_iter().zip(&chosen) {
                match m {
                    Some(m) => kept.push(m),
                    None => dropped.push((u, v)),
                }
            }
            let graph = PoseGraph::from_pairs(n, &kept).stage("register")?;
            graph.validate().stage("register")?;
            let (init, prediction) = synchronize(models, &graph)?;
            Ok(PipelineOutput {
                stats,
                overlap,
                edges,
                dropped,
                graph,
                init,
                prediction,
            })
        }
    }
}

pub fn thresholds(cfg: &RunConfig) -> EvalThresholds {
    EvalThresholds {
        te: cfg.profile.te_threshold(),
        re_gate_deg: cfg.rr_rotation_gate_deg,
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn pose_json(p: &[RigidPose]) -> Vec<PoseJson> {
    p.iter().map(PoseJson::from).collect()
}

/// Writes `poses.json`, plus `report.json` when ground truth is given and
/// every stage's artifact when `cfg.dump_intermediates` is set.
pub fn write_outputs(
    out: &PipelineOutput,
    gt: Option<&[RigidPose]>,
    cfg: &RunConfig,
    dir: &Path,
) -> Result<Option<EvalReport>> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("poses.json"), &pose_json(&out.poses()))?;
    let report = match gt {
        Some(gt) => {
            let r = evaluate(&out.poses(), gt, thresholds(cfg))?;
            write_json(&dir.join("report.json"), &r)?;
            Some(r)
        }
        None => None,
    };
    if cfg.dump_intermediates {
        write_json(&dir.join("stats.json"), &out.stats)?;
        write_json(&dir.join("overlap.json"), &out.overlap)?;
        write_json(&dir.join("edges.json"), &out.edges)?;
        write_json(&dir.join("dropped.json"), &out.dropped)?;
        write_json(&dir.join("graph.json"), &out.graph.to_json())?;
        write_json(&dir.join("init_poses.json"), &pose_json(&out.init.poses))?;
        write_json(&dir.join("coarse_poses.json"), &pose_json(&out.prediction.coarse_poses()))?;
        write_json(&dir.join("edge_weights.json"), &out.prediction.weights)?;
    }
    Ok(report)
}
