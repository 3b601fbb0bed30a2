//! Dense layers, MLP stacks, layer normalization, the GRU cell and softmax
//! attention, with shape checks at the entry points.

use std::rc::Rc;

use rand::Rng;

use super::params::{Bound, ParamId, ParamStore};
use super::tape::{Segments, Tape, Var};
use super::Real;
use crate::error::{Error, Result};

fn mismatch(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

/// `x·W + b` for `x [n,d_in]`, `W [d_in,d_out]`, `b [1,d_out]`.
pub fn dense<S: Real>(tape: &mut Tape<S>, x: Var, w: Var, b: Var) -> Result<Var> {
    let (_, d_in) = tape.shape(x);
    let (wr, wc) = tape.shape(w);
    if wr != d_in {
        return Err(mismatch("dense", format!("x has {d_in} cols, W is {wr}x{wc}")));
    }
    if tape.shape(b) != (1, wc) {
        return Err(mismatch("dense", format!("bias {:?} vs 1x{wc}", tape.shape(b))));
    }
    let y = tape.matmul(x, w);
    Ok(tape.add_row(y, b))
}

/// Row-wise layer normalization (ε = 1e-5) with per-feature gain and bias.
pub fn layernorm<S: Real>(tape: &mut Tape<S>, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let (_, d) = tape.shape(x);
    if d < 2 {
        return Err(mismatch("layernorm", format!("need d >= 2, got {d}")));
    }
    if tape.shape(gain) != (1, d) || tape.shape(bias) != (1, d) {
        return Err(mismatch("layernorm", "gain/bias must be 1xd".into()));
    }
    Ok(tape.layer_norm(x, gain, bias))
}

pub fn smooth_l1<S: Real>(tape: &mut Tape<S>, x: Var) -> Var {
    tape.smooth_l1(x)
}

/// Scaled dot-product attention of a single query over `m` keys:
/// `softmax(q·kᵀ/√d)·v`.
pub fn softmax_attention<S: Real>(tape: &mut Tape<S>, q: Var, k: Var, v: Var) -> Result<Var> {
    let (qr, d) = tape.shape(q);
    let (m, kd) = tape.shape(k);
    let (vm, _) = tape.shape(v);
    if qr != 1 || kd != d || vm != m || m == 0 {
        return Err(mismatch(
            "softmax_attention",
            format!("q 1x{d}, k {m}x{kd}, v rows {vm}"),
        ));
    }
    let logits = tape.matmul_t(k, q); // [m,1]
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let seg = Rc::new(Segments::new(vec![0; m], 1));
    let alpha = tape.segment_softmax(logits, seg); // [m,1]
    let alpha_row = tape.transpose(alpha); // [1,m]
    Ok(tape.matmul(alpha_row, v))
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add_uniform(format!("{name}.w"), d_in, d_out, d_in, rng);
        let b = store.add_uniform(format!("{name}.b"), 1, d_out, d_in, rng);
        Dense { w, b, d_in, d_out }
    }

    /// Layer whose weights and bias start at zero.
    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.add_const(format!("{name}.w"), d_in, d_out, 0.0);
        let b = store.add_const(format!("{name}.b"), 1, d_out, 0.0);
        Dense { w, b, d_in, d_out }
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Result<Var> {
        dense(tape, x, p[self.w], p[self.b])
    }
}

/// Dense layers with ReLU between them and a linear output.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// `dims = [d_in, hidden.., d_out]`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    /// Same as [`new`](Self::new) but the final layer starts at zero, so the
    /// head initially outputs exactly zero.
    pub fn new_zero_head<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2);
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let lname = format!("{name}.{i}");
                if i + 1 == n {
                    Dense::zeros(store, &lname, w[0], w[1])
                } else {
                    Dense::new(store, &lname, w[0], w[1], rng)
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(tape, p, h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().map(|l| l.d_out).unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub d: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gain = store.add_const(format!("{name}.gain"), 1, d, 1.0);
        let bias = store.add_const(format!("{name}.bias"), 1, d, 0.0);
        LayerNorm { gain, bias, d }
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Result<Var> {
        layernorm(tape, x, p[self.gain], p[self.bias])
    }
}

/// Gated recurrent unit with gates packed as `[reset | update | candidate]`.
///
/// `r = σ(x Wxr + bxr + h Whr + bhr)`, `z = σ(x Wxz + bxz + h Whz + bhz)`,
/// `ñ = tanh(x Wxn + bxn + r ⊙ (h Whn + bhn))`, `h' = (1 − z) ⊙ h + z ⊙ ñ`.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub wx: ParamId,
    pub bx: ParamId,
    pub wh: ParamId,
    pub bh: ParamId,
    pub d_in: usize,
    pub d: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d: usize,
        rng: &mut R,
    ) -> Self {
        let wx = store.add_uniform(format!("{name}.wx"), d_in, 3 * d, d, rng);
        let bx = store.add_uniform(format!("{name}.bx"), 1, 3 * d, d, rng);
        let wh = store.add_uniform(format!("{name}.wh"), d, 3 * d, d, rng);
        let bh = store.add_uniform(format!("{name}.bh"), 1, 3 * d, d, rng);
        GruCell {
            wx,
            bx,
            wh,
            bh,
            d_in,
            d,
        }
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<S>, p: &Bound, h: Var, x: Var) -> Result<Var> {
        gru_cell(tape, h, x, p[self.wx], p[self.bx], p[self.wh], p[self.bh])
    }
}

pub fn gru_cell<S: Real>(
    tape: &mut Tape<S>,
    h: Var,
    x: Var,
    wx: Var,
    bx: Var,
    wh: Var,
    bh: Var,
) -> Result<Var> {
    let (n, d) = tape.shape(h);
    let (nx, d_in) = tape.shape(x);
    if n != nx {
        return Err(mismatch("gru_cell", format!("h has {n} rows, x has {nx}")));
    }
    if tape.shape(wx) != (d_in, 3 * d) || tape.shape(wh) != (d, 3 * d) {
        return Err(mismatch(
            "gru_cell",
            format!(
                "Wx {:?} (want {d_in}x{}), Wh {:?} (want {d}x{})",
                tape.shape(wx),
                3 * d,
                tape.shape(wh),
                3 * d
            ),
        ));
    }
    let gx = dense(tape, x, wx, bx)?;
    let gh = dense(tape, h, wh, bh)?;
    let gx_rz = tape.slice_cols(gx, 0, 2 * d);
    let gh_rz = tape.slice_cols(gh, 0, 2 * d);
    let rz = tape.add(gx_rz, gh_rz);
    let rz = tape.sigmoid(rz);
    let r = tape.slice_cols(rz, 0, d);
    let z = tape.slice_cols(rz, d, d);
    let gx_n = tape.slice_cols(gx, 2 * d, d);
    let gh_n = tape.slice_cols(gh, 2 * d, d);
    let rn = tape.mul(r, gh_n);
    let cand = tape.add(gx_n, rn);
    let cand = tape.tanh(cand);
    let diff = tape.sub(cand, h);
    let step = tape.mul(z, diff);
    Ok(tape.add(h, step))
}
