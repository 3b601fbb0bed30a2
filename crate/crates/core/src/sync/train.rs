//! Single-graph AdamW training on synthetic scenes with exact resume.
//!
//! Scenes are drawn from a fixed pool whose seeds derive from the training
//! seed; each epoch visits the pool in a seeded shuffle. A checkpoint holds
//! parameters, optimizer moments and the step counter, so a resumed run is
//! bit-identical to an uninterrupted one.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{checkpoint, cosine_lr, AdamW, AdamWConfig, Real, Tape, Tensor};
use crate::posegraph::spanning_init;
use crate::synth::{derive_seed, domain, gen_scene, SceneSpec, SyntheticScene};

use super::{motion_loss, GraphInput, MotionTargets, SyncConfig, SyncNet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyncTrainConfig {
    pub net: SyncConfig,
    pub optim: AdamWConfig,
    /// Spec of the training scenes (its seed is ignored).
    pub scenes: SceneSpec,
    pub pool_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SyncTrainConfig {
    fn default() -> Self {
        SyncTrainConfig {
            net: SyncConfig::default(),
            optim: AdamWConfig::default(),
            scenes: SceneSpec::default(),
            pool_size: 2000,
            epochs: 15,
            seed: 0,
        }
    }
}

impl SyncTrainConfig {
    pub fn total_steps(&self) -> usize {
        self.pool_size * self.epochs
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub rot: f64,
    pub trans: f64,
    pub lr: f64,
}

/// Loss and per-parameter gradients of `net` on one graph.
pub fn loss_and_grads<S: Real>(
    net: &SyncNet,
    g: &GraphInput,
    tg: &MotionTargets,
) -> Result<((f64, f64, f64), Vec<Vec<f64>>)> {
    let mut tape = Tape::<S>::new();
    let p = net.params.bind(&mut tape);
    let trace = net.forward(&mut tape, &p, g, true)?;
    let l = motion_loss(&mut tape, &trace, tg, net.cfg.gamma, net.cfg.beta)?;
    let grads = tape.backward(l.total)?;
    let flat = p
        .vars()
        .iter()
        .map(|&v| {
            let n = tape.value(v).len();
            grads.get_or_zero(v, n).iter().map(|&x| Real::to_f64(x)).collect()
        })
        .collect();
    let f = |v| Real::to_f64(tape.scalar(v));
    Ok(((f(l.total), f(l.rot), f(l.trans)), flat))
}

/// Builds network input and loss targets for a synthetic scene.
pub fn scene_example(scene: &SyntheticScene, residual: bool) -> Result<(GraphInput, MotionTargets)> {
    let s = spanning_init(&scene.graph)?;
    let g = GraphInput::new(&scene.graph, &s, residual)?;
    let tg = MotionTargets::from_absolute(&scene.gt, &g)?;
    Ok((g, tg))
}

#[derive(Debug, Clone)]
pub struct SyncTrainer {
    pub cfg: SyncTrainConfig,
    pub net: SyncNet,
    opt: AdamW,
    step: usize,
}

const STEP_KEY: &str = "trainer.step";

impl SyncTrainer {
    pub fn new(cfg: SyncTrainConfig) -> Result<Self> {
        if cfg.total_steps() == 0 {
            return Err(Error::EmptyDataset);
        }
        cfg.scenes.validate()?;
        let net = SyncNet::new(cfg.net);
        let opt = AdamW::new(cfg.optim, &net.params);
        Ok(SyncTrainer { cfg, net, opt, step: 0 })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn done(&self) -> bool {
        self.step >= self.cfg.total_steps()
    }

    /// Scene spec visited at global step `step`.
    pub fn scene_spec(&self, step: usize) -> SceneSpec {
        let pool = self.cfg.pool_size;
        let epoch = step / pool;
        let mut order: Vec<usize> = (0..pool).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(domain::TRAIN_SCENES ^ 1, self.cfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        let idx = order[step % pool];
        self.cfg
            .scenes
            .with_seed(derive_seed(domain::TRAIN_SCENES, self.cfg.seed, idx as u64))
    }

    pub fn train_step(&mut self) -> Result<StepLog> {
        let scene = gen_scene(&self.scene_spec(self.step))?;
        let (g, tg) = scene_example(&scene, self.cfg.net.residual_heads)?;
        let ((loss, rot, trans), grads) = loss_and_grads::<f32>(&self.net, &g, &tg)?;
        if !loss.is_finite() {
            return Err(Error::InvalidSpec(format!("non-finite loss at step {}", self.step)));
        }
        let lr = cosine_lr(self.cfg.optim.lr, self.step, self.cfg.total_steps());
        self.opt.step(&mut self.net.params, &grads, lr)?;
        let log = StepLog {
            step: self.step,
            loss,
            rot,
            trans,
            lr,
        };
        self.step += 1;
        Ok(log)
    }

    /// Runs until `max_steps` more steps are done or training completes.
    pub fn run(&mut self, max_steps: usize, mut on_step: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        let mut logs = Vec::new();
        for _ in 0..max_steps {
            if self.done() {
                break;
            }
            let l = self.train_step()?;
            on_step(&l);
            logs.push(l);
        }
        Ok(logs)
    }

    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = self.net.named_tensors();
        out.extend(self.opt.state_tensors(&self.net.params));
        let s = self.step as u64;
        out.push((
            STEP_KEY.into(),
            Tensor {
                shape: vec![2],
                data: vec![(s & 0xfff) as f32, (s >> 12) as f32],
            },
        ));
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_checkpoint(path, &self.state_tensors())
    }

    /// Restores a trainer saved with [`SyncTrainer::save`]. The config
    /// must match the one used for the original run.
    pub fn resume(cfg: SyncTrainConfig, path: &Path) -> Result<Self> {
        let mut t = SyncTrainer::new(cfg)?;
        let entries = checkpoint::read_checkpoint(path)?;
        t.net.params.load_from(&entries)?;
        t.opt.load_state(&t.net.params, &entries)?;
        let s = entries
            .iter()
            .find(|(n, _)| n == STEP_KEY)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::MissingParameter(STEP_KEY.into()))?;
        if s.len() != 2 {
            return Err(Error::Format(format!("{STEP_KEY} must hold two values")));
        }
        t.step = (s.data[0] as u64 | ((s.data[1] as u64) << 12)) as usize;
        Ok(t)
    }
}

/// Trains to completion and returns the network and per-step log.
pub fn train_sync(cfg: SyncTrainConfig) -> Result<(SyncNet, Vec<StepLog>)> {
    let mut t = SyncTrainer::new(cfg)?;
    let logs = t.run(usize::MAX, |_| {})?;
    Ok((t.net, logs))
}
