//! Mutual nearest-neighbor matching in descriptor space, matching-distance
//! statistics, and the small network that regresses pairwise overlap from
//! those statistics.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::optim::cosine_lr;
use crate::nn::{checkpoint, AdamW, AdamWConfig, Bound, Dense, Mlp, ParamStore, Tape, Tensor, Var};

/// Distance thresholds of the four eCDF features.
pub const ECDF_THRESHOLDS: [f64; 4] = [0.25, 0.30, 0.35, 0.40];
/// Default keypoint budget used to normalize the correspondence count.
pub const DEFAULT_N_CAP: f64 = 5000.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    pub keypoints: Vec<Vector3<f64>>,
    /// Row-major `n × dim`, each row unit-norm.
    pub descriptors: Vec<f32>,
    pub dim: usize,
}

impl DescriptorSet {
    /// Normalizes every descriptor to unit length. Zero rows are left as is.
    pub fn new(keypoints: Vec<Vector3<f64>>, mut descriptors: Vec<f32>, dim: usize) -> Result<Self> {
        if dim == 0 || descriptors.len() != keypoints.len() * dim {
            return Err(Error::LengthMismatch {
                expected: keypoints.len() * dim,
                got: descriptors.len(),
            });
        }
        if keypoints.is_empty() {
            return Err(Error::InvalidSpec("descriptor set is empty".into()));
        }
        for row in descriptors.chunks_exact_mut(dim) {
            let n = row.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            if n > 0.0 {
                for x in row.iter_mut() {
                    *x = (*x as f64 / n) as f32;
                }
            }
        }
        Ok(DescriptorSet {
            keypoints,
            descriptors,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn descriptor(&self, i: usize) -> &[f32] {
        &self.descriptors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * (3 + self.dim) * self.len());
        out.extend_from_slice(b"MDSC");
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for p in &self.keypoints {
            for k in 0..3 {
                out.extend_from_slice(&(p[k] as f32).to_le_bytes());
            }
        }
        for &x in &self.descriptors {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let u32_at = |o: usize| -> Result<u32> {
            buf.get(o..o + 4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .ok_or_else(|| Error::Format("truncated descriptor file".into()))
        };
        if buf.get(..4) != Some(b"MDSC".as_slice()) {
            return Err(Error::Format("bad magic, expected MDSC".into()));
        }
        if u32_at(4)? != 1 {
            return Err(Error::Format("unsupported descriptor file version".into()));
        }
        let n = u32_at(8)? as usize;
        let dim = u32_at(12)? as usize;
        let expected = 16 + 4 * n * (3 + dim);
        if buf.len() != expected {
            return Err(Error::Format(format!(
                "descriptor file has {} bytes, header implies {expected}",
                buf.len()
            )));
        }
        let f = |i: usize| {
            let o = 16 + 4 * i;
            f32::from_le_bytes([buf[o], buf[o + 1], buf[o + 2], buf[o + 3]])
        };
        let keypoints = (0..n)
            .map(|i| Vector3::new(f(3 * i) as f64, f(3 * i + 1) as f64, f(3 * i + 2) as f64))
            .collect();
        let descriptors = (0..n * dim).map(|i| f(3 * n + i)).collect();
        DescriptorSet::new(keypoints, descriptors, dim)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorrespondenceSet {
    pub pairs: Vec<(usize, usize)>,
    pub distances: Vec<f64>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Index of the nearest row of `set` to `q`; ties go to the lower index.
fn nearest(q: &[f32], set: &DescriptorSet) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for j in 0..set.len() {
        let d = sq_dist(q, set.descriptor(j));
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Pairs `(i, j)` where each is the other's nearest neighbor, sorted by `i`.
pub fn mutual_match(a: &DescriptorSet, b: &DescriptorSet) -> Result<CorrespondenceSet> {
    if a.dim != b.dim {
        return Err(Error::LengthMismatch {
            expected: a.dim,
            got: b.dim,
        });
    }
    let b_to_a: Vec<usize> = (0..b.len()).map(|j| nearest(b.descriptor(j), a).0).collect();
    let mut out = CorrespondenceSet::default();
    for i in 0..a.len() {
        let (j, d2) = nearest(a.descriptor(i), b);
        if b_to_a[j] == i {
            out.pairs.push((i, j));
            out.distances.push(d2.sqrt());
        }
    }
    Ok(out)
}

/// Summary of a pair's matching distances. An empty correspondence set maps
/// to the all-zero sentinel ([`MatchStats::EMPTY`]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchStats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub ecdf: [f64; 4],
}

impl MatchStats {
    pub const EMPTY: MatchStats = MatchStats {
        count: 0,
        mean: 0.0,
        median: 0.0,
        std: 0.0,
        ecdf: [0.0; 4],
    };

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Network input: normalized count, mean, median, std, four eCDF values.
    pub fn features(&self, n_cap: f64) -> [f64; 8] {
        let c = (1.0 + self.count as f64).ln() / (1.0 + n_cap).ln();
        [
            c,
            self.mean,
            self.median,
            self.std,
            self.ecdf[0],
            self.ecdf[1],
            self.ecdf[2],
            self.ecdf[3],
        ]
    }
}

/// Population statistics of `distances` with the default eCDF thresholds;
/// the median of an even count is the lower middle element.
pub fn compute_stats(distances: &[f64]) -> MatchStats {
    compute_stats_with(distances, &ECDF_THRESHOLDS)
}

/// [`compute_stats`] with custom eCDF thresholds.
pub fn compute_stats_with(distances: &[f64], thresholds: &[f64; 4]) -> MatchStats {
    if distances.is_empty() {
        return MatchStats::EMPTY;
    }
    let mut d = distances.to_vec();
    d.sort_by(f64::total_cmp);
    let n = d.len();
    // summing the sorted values keeps the result independent of input order
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    let median = d[(n - 1) / 2];
    let mut ecdf = [0.0; 4];
    for (e, &eps) in ecdf.iter_mut().zip(thresholds) {
        *e = d.partition_point(|&x| x <= eps) as f64 / n as f64;
    }
    MatchStats {
        count: n,
        mean,
        median,
        std: var.sqrt(),
        ecdf,
    }
}

/// Projection, inverted residual blocks, regression head and sigmoid.
#[derive(Debug, Clone)]
pub struct OverlapNet {
    pub params: ParamStore,
    proj: Dense,
    blocks: Vec<(Dense, Dense)>,
    head: Mlp,
    pub n_cap: f64,
}

impl OverlapNet {
    pub const N_BLOCKS: usize = 3;

    pub fn new(width: usize, n_cap: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let proj = Dense::new(&mut params, "overlap.proj", 8, width, &mut rng);
        let blocks = (0..Self::N_BLOCKS)
            .map(|i| {
                let up = Dense::new(&mut params, &format!("overlap.block{i}.up"), width, 4 * width, &mut rng);
                let down = Dense::new(&mut params, &format!("overlap.block{i}.down"), 4 * width, width, &mut rng);
                (up, down)
            })
            .collect();
        let head = Mlp::new(&mut params, "overlap.head", &[width, width, 1], &mut rng);
        OverlapNet {
            params,
            proj,
            blocks,
            head,
            n_cap,
        }
    }

    /// Maps `x [n, 8]` to overlap predictions `[n, 1]`.
    pub fn forward<S: crate::nn::Real>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = self.proj.forward(tape, p, x)?;
        h = tape.relu(h);
        for (up, down) in &self.blocks {
            let e = up.forward(tape, p, h)?;
            let e = tape.relu(e);
            let c = down.forward(tape, p, e)?;
            h = tape.add(h, c);
        }
        let o = self.head.forward(tape, p, h)?;
        Ok(tape.sigmoid(o))
    }

    pub fn predict_batch(&self, stats: &[MatchStats]) -> Vec<f64> {
        let live: Vec<usize> = (0..stats.len()).filter(|&i| !stats[i].is_empty()).collect();
        let mut out = vec![0.0; stats.len()];
        if live.is_empty() {
            return out;
        }
        let mut tape = Tape::<f32>::new();
        let p = self.params.bind(&mut tape);
        let x: Vec<f64> = live.iter().flat_map(|&i| stats[i].features(self.n_cap)).collect();
        let x = tape.leaf_f64(live.len(), 8, &x);
        let y = self.forward(&mut tape, &p, x).expect("overlap net shapes are fixed");
        for (k, &i) in live.iter().enumerate() {
            out[i] = tape.value(y)[k] as f64;
        }
        out
    }

    pub fn predict(&self, s: &MatchStats) -> f64 {
        self.predict_batch(std::slice::from_ref(s))[0]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<(String, Tensor)> =
            self.params.named().map(|(n, t)| (n.to_string(), t.clone())).collect();
        checkpoint::write_checkpoint(path, &entries)
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.params.load_from(&checkpoint::read_checkpoint(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OverlapTrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub width: usize,
    pub n_cap: f64,
    pub seed: u64,
}

impl Default for OverlapTrainConfig {
    fn default() -> Self {
        OverlapTrainConfig {
            lr: 0.01,
            weight_decay: 1e-4,
            batch_size: 32,
            epochs: 1,
            width: 64,
            n_cap: DEFAULT_N_CAP,
            seed: 0,
        }
    }
}

/// Mean smooth-L1 between predictions and targets on one batch; returns
/// the loss and per-parameter gradients.
pub fn overlap_loss_and_grads(
    net: &OverlapNet,
    batch: &[(MatchStats, f64)],
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::<f32>::new();
    let p = net.params.bind(&mut tape);
    let x: Vec<f64> = batch.iter().flat_map(|(s, _)| s.features(net.n_cap)).collect();
    let y: Vec<f64> = batch.iter().map(|(_, o)| *o).collect();
    let x = tape.leaf_f64(batch.len(), 8, &x);
    let target = tape.leaf_f64(batch.len(), 1, &y);
    let pred = net.forward(&mut tape, &p, x)?;
    let r = tape.sub(pred, target);
    let l = tape.smooth_l1(r);
    let loss = tape.mean(l);
    let g = tape.backward(loss)?;
    let grads = net
        .params
        .ids()
        .map(|id| {
            g.get_or_zero(p[id], net.params.get(id).len())
                .into_iter()
                .map(|v| v as f64)
                .collect()
        })
        .collect();
    Ok((tape.scalar(loss) as f64, grads))
}

/// Trains with AdamW and a cosine schedule over all steps. Empty-stat
/// samples are skipped since they never reach the network. Returns the
/// trained net and the per-step `(loss, lr)` log.
pub fn train_overlap(
    data: &[(MatchStats, f64)],
    cfg: &OverlapTrainConfig,
) -> Result<(OverlapNet, Vec<(f64, f64)>)> {
    let live: Vec<(MatchStats, f64)> = data.iter().filter(|(s, _)| !s.is_empty()).copied().collect();
    if live.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut net = OverlapNet::new(cfg.width, cfg.n_cap, cfg.seed);
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
        &net.params,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_0ce7);
    let bs = cfg.batch_size.max(1);
    let steps_per_epoch = live.len().div_ceil(bs);
    let horizon = steps_per_epoch * cfg.epochs;
    let mut log = Vec::with_capacity(horizon);
    let mut order: Vec<usize> = (0..live.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            let batch: Vec<(MatchStats, f64)> = chunk.iter().map(|&i| live[i]).collect();
            let (loss, grads) = overlap_loss_and_grads(&net, &batch)?;
            let lr = cosine_lr(cfg.lr, log.len(), horizon);
            opt.step(&mut net.params, &grads, lr)?;
            log.push((loss, lr));
        }
    }
    Ok((net, log))
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Random descriptors for quick tests: `n` points with Gaussian features.
pub fn random_descriptor_set<R: Rng + ?Sized>(rng: &mut R, n: usize, dim: usize) -> DescriptorSet {
    let kp = (0..n)
        .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    let d = (0..n * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    DescriptorSet::new(kp, d, dim).expect("sizes agree")
}
