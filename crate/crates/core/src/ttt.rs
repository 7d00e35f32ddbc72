//! TTT-Linear: a sequence layer whose hidden state is a weight matrix
//! trained by one gradient step per token.
//!
//! With training view `k = θ_K x`, label view `v = θ_V x` and test view
//! `q = θ_Q x`, each token updates `W ← W − 2η (W k − v) kᵀ` and emits
//! `z = W q` using the updated state.

use rand::Rng;
use ttt_omics_autodiff::kernels::{dot, matvec, matvec_t, rank1_update};
use ttt_omics_autodiff::{CustomOp, Shape, Tape, Var};

use crate::params::{ParamId, ParamStore, Session};
use crate::{CoreError, Result};

/// Plain-value parameters of one TTT layer. Matrices are row-major `d×d`.
#[derive(Clone, Debug, PartialEq)]
pub struct TttLayerParams {
    pub d: usize,
    pub theta_k: Vec<f64>,
    pub theta_v: Vec<f64>,
    pub theta_q: Vec<f64>,
    pub w0: Vec<f64>,
    pub eta: f64,
}

impl TttLayerParams {
    /// All projections and the initial state set to the identity.
    pub fn identity(d: usize, eta: f64) -> Self {
        let eye = identity(d);
        TttLayerParams {
            d,
            theta_k: eye.clone(),
            theta_v: eye.clone(),
            theta_q: eye.clone(),
            w0: eye,
            eta,
        }
    }

    pub fn random<R: Rng>(d: usize, eta: f64, rng: &mut R) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let mut m = || (0..d * d).map(|_| rng.random_range(-bound..=bound)).collect::<Vec<_>>();
        TttLayerParams {
            d,
            theta_k: m(),
            theta_v: m(),
            theta_q: m(),
            w0: m(),
            eta,
        }
    }

    fn check(&self, op: &'static str, x: &[f64]) -> Result<()> {
        let d2 = self.d * self.d;
        if [&self.theta_k, &self.theta_v, &self.theta_q, &self.w0].iter().any(|m| m.len() != d2) {
            return Err(CoreError::contract(op, format!("parameter matrices must be {0}×{0}", self.d)));
        }
        if x.len() != self.d {
            return Err(CoreError::contract(op, format!("token has width {}, expected {}", x.len(), self.d)));
        }
        if !(self.eta >= 0.0) {
            return Err(CoreError::contract(op, "eta must be non-negative"));
        }
        Ok(())
    }
}

pub(crate) fn identity(d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = 1.0;
    }
    m
}

/// Fast-weight state after `step` tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TttState {
    pub w: Vec<f64>,
    pub step: usize,
}

impl TttState {
    pub fn initial(p: &TttLayerParams) -> Self {
        TttState { w: p.w0.clone(), step: 0 }
    }
}

fn project(m: &[f64], d: usize, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; d];
    matvec(m, d, d, x, &mut y);
    y
}

/// Self-supervised loss `‖W θ_K x − θ_V x‖²` of a single token.
pub fn inner_loss(w: &[f64], x: &[f64], p: &TttLayerParams) -> Result<f64> {
    p.check("inner_loss", x)?;
    if w.len() != p.d * p.d {
        return Err(CoreError::contract("inner_loss", "fast weight has the wrong size"));
    }
    let k = project(&p.theta_k, p.d, x);
    let v = project(&p.theta_v, p.d, x);
    let wk = project(w, p.d, &k);
    Ok(wk.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// One gradient step of the inner loss.
pub fn state_update(state: &TttState, x: &[f64], p: &TttLayerParams) -> Result<TttState> {
    p.check("state_update", x)?;
    if state.w.len() != p.d * p.d {
        return Err(CoreError::contract("state_update", "fast weight has the wrong size"));
    }
    let k = project(&p.theta_k, p.d, x);
    let v = project(&p.theta_v, p.d, x);
    let mut e = project(&state.w, p.d, &k);
    e.iter_mut().zip(&v).for_each(|(a, b)| *a -= b);
    let mut w = state.w.clone();
    rank1_update(&mut w, -2.0 * p.eta, &e, &k);
    Ok(TttState {
        w,
        step: state.step + 1,
    })
}

/// Run the layer over `tokens` (`n×d`, row-major) without recording
/// anything; returns outputs and the final state.
pub fn forward_sequence_values(tokens: &[f64], p: &TttLayerParams) -> Result<(Vec<f64>, TttState)> {
    let d = p.d;
    if d == 0 || tokens.is_empty() || tokens.len() % d != 0 {
        return Err(CoreError::contract("forward_sequence", "need a non-empty n×d token matrix"));
    }
    let mut state = TttState::initial(p);
    let mut out = Vec::with_capacity(tokens.len());
    for x in tokens.chunks_exact(d) {
        state = state_update(&state, x, p)?;
        let q = project(&p.theta_q, d, x);
        out.extend(project(&state.w, d, &q));
    }
    Ok((out, state))
}

/// Layer parameters as tape variables. `log_eta` is a scalar holding
/// `ln η`, so η stays positive while it is learned.
#[derive(Clone, Copy, Debug)]
pub struct TttLayerVars {
    pub theta_k: Var,
    pub theta_v: Var,
    pub theta_q: Var,
    pub w0: Var,
    pub log_eta: Var,
}

impl TttLayerVars {
    /// Record `p` on `tape` as trainable leaves.
    pub fn from_params(tape: &mut Tape, p: &TttLayerParams) -> Result<Self> {
        let d = p.d;
        let mut leaf = |data: &[f64], dims: &[usize]| -> Result<Var> {
            let t = ttt_omics_autodiff::Tensor::new(dims, data.to_vec())?;
            Ok(tape.param(&t))
        };
        Ok(TttLayerVars {
            theta_k: leaf(&p.theta_k, &[d, d])?,
            theta_v: leaf(&p.theta_v, &[d, d])?,
            theta_q: leaf(&p.theta_q, &[d, d])?,
            w0: leaf(&p.w0, &[d, d])?,
            log_eta: leaf(&[p.eta.ln()], &[])?,
        })
    }
}

/// Steps between stored states. Backward recomputes the states inside each
/// segment, so memory stays at `O(n/SEGMENT · d²)` and a long sequence
/// does not spill out of cache.
const SEGMENT: usize = 64;

/// One recurrence step: `W ← W − 2η (W k − v) kᵀ`. `e` receives `W k − v`.
fn ogd_step(w: &mut [f64], d: usize, eta: f64, k: &[f64], v: &[f64], e: &mut [f64]) {
    matvec(w, d, d, k, e);
    e.iter_mut().zip(v).for_each(|(a, b)| *a -= b);
    rank1_update(w, -2.0 * eta, e, k);
}

/// The recurrence over precomputed views, recorded as one tape node.
struct Recurrence {
    n: usize,
    d: usize,
    eta: f64,
    /// `W_0, W_SEGMENT, W_2·SEGMENT, …`, each `d×d`.
    checkpoints: Vec<f64>,
}

impl CustomOp for Recurrence {
    fn name(&self) -> &'static str {
        "ttt_recurrence"
    }

    fn backward(&self, inputs: &[&[f64]], _output: &[f64], grad_output: &[f64]) -> Vec<Vec<f64>> {
        let (n, d, eta) = (self.n, self.d, self.eta);
        let d2 = d * d;
        let (ks, vs, qs) = (inputs[0], inputs[1], inputs[2]);
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut dq = vec![0.0; n * d];
        let mut dw = vec![0.0; d2];
        let mut deta = 0.0;
        let mut e = vec![0.0; d];
        let mut g = vec![0.0; d];
        let mut tmp = vec![0.0; d];
        let mut states = Vec::with_capacity((SEGMENT + 1) * d2);
        for t in (0..n).rev() {
            let row = t * d..(t + 1) * d;
            let (k, v, q, dz) = (&ks[row.clone()], &vs[row.clone()], &qs[row.clone()], &grad_output[row.clone()]);
            let start = t - t % SEGMENT;
            if t == n - 1 || t % SEGMENT == SEGMENT - 1 {
                // Rebuild W_start … W_{t+1} for this segment.
                let c = start / SEGMENT;
                states.clear();
                states.extend_from_slice(&self.checkpoints[c * d2..(c + 1) * d2]);
                for s in start..=t {
                    let prev = states.len() - d2;
                    states.extend_from_within(prev..);
                    ogd_step(&mut states[prev + d2..], d, eta, &ks[s * d..(s + 1) * d], &vs[s * d..(s + 1) * d], &mut e);
                }
            }
            let local = t - start;
            let w_prev = &states[local * d2..(local + 1) * d2];
            let w_t = &states[(local + 1) * d2..(local + 2) * d2];
            // z_t = W_t q_t
            rank1_update(&mut dw, 1.0, dz, q);
            matvec_t(w_t, d, d, dz, &mut dq[row.clone()]);
            // W_t = W_{t-1} − 2η e kᵀ, e = W_{t-1} k − v
            matvec(w_prev, d, d, k, &mut e);
            e.iter_mut().zip(v).for_each(|(a, b)| *a -= b);
            matvec(&dw, d, d, k, &mut g);
            deta -= 2.0 * dot(&e, &g);
            g.iter_mut().for_each(|x| *x *= -2.0 * eta);
            let de = &g;
            let dk_t = &mut dk[row.clone()];
            matvec_t(&dw, d, d, &e, dk_t);
            dk_t.iter_mut().for_each(|x| *x *= -2.0 * eta);
            matvec_t(w_prev, d, d, de, &mut tmp);
            dk_t.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
            dv[row].iter_mut().zip(de).for_each(|(a, b)| *a = -b);
            rank1_update(&mut dw, 1.0, de, k);
        }
        vec![dk, dv, dq, dw, vec![deta * eta]]
    }
}

/// Outputs `z_1..z_n` for views `k`, `v`, `q` (each `n×d`), initial state
/// `w0` (`d×d`) and scalar `log_eta`. Also returns the final state.
pub fn ttt_recurrence(tape: &mut Tape, k: Var, v: Var, q: Var, w0: Var, log_eta: Var) -> Result<(Var, TttState)> {
    let sk = tape.shape(k);
    let (n, d) = sk
        .as_matrix()
        .ok_or_else(|| CoreError::contract("ttt_recurrence", format!("views must be n×d, got {sk}")))?;
    if n == 0 {
        return Err(CoreError::contract("forward_sequence", "empty sequence"));
    }
    for (name, var, want) in [
        ("v", v, Shape::matrix(n, d)),
        ("q", q, Shape::matrix(n, d)),
        ("w0", w0, Shape::matrix(d, d)),
    ] {
        let s = tape.shape(var);
        if s != want {
            return Err(CoreError::contract("ttt_recurrence", format!("{name} has shape {s}, expected {want}")));
        }
    }
    if !tape.shape(log_eta).is_scalar() {
        return Err(CoreError::contract("ttt_recurrence", "log_eta must be a scalar"));
    }
    let eta = tape.value(log_eta)[0].exp();
    let mut w = tape.value(w0).to_vec();
    let mut checkpoints = Vec::with_capacity(n.div_ceil(SEGMENT) * d * d);
    let mut out = vec![0.0; n * d];
    let mut e = vec![0.0; d];
    {
        let (ks, vs, qs) = (tape.value(k), tape.value(v), tape.value(q));
        for t in 0..n {
            if t % SEGMENT == 0 {
                checkpoints.extend_from_slice(&w);
            }
            let row = t * d..(t + 1) * d;
            ogd_step(&mut w, d, eta, &ks[row.clone()], &vs[row.clone()], &mut e);
            matvec(&w, d, d, &qs[row.clone()], &mut out[row]);
        }
    }
    let final_state = TttState { w, step: n };
    let op = Recurrence { n, d, eta, checkpoints };
    let z = tape.custom(&[k, v, q, w0, log_eta], Shape::matrix(n, d), out, Box::new(op))?;
    Ok((z, final_state))
}

/// TTT layer over `x` (`n×d`): projections, then the recurrence.
pub fn forward_sequence(tape: &mut Tape, x: Var, p: &TttLayerVars) -> Result<(Var, TttState)> {
    let sx = tape.shape(x);
    let (_, d) = sx
        .as_matrix()
        .ok_or_else(|| CoreError::contract("forward_sequence", format!("tokens must be n×d, got {sx}")))?;
    let st = tape.shape(p.theta_k);
    if st != Shape::matrix(d, d) {
        return Err(ttt_omics_autodiff::AutodiffError::Dimension {
            op: "forward_sequence",
            lhs: sx,
            rhs: st,
        }
        .into());
    }
    let mut view = |theta: Var| -> Result<Var> {
        let tt = tape.transpose(theta)?;
        Ok(tape.matmul(x, tt)?)
    };
    let k = view(p.theta_k)?;
    let v = view(p.theta_v)?;
    let q = view(p.theta_q)?;
    ttt_recurrence(tape, k, v, q, p.w0, p.log_eta)
}

/// A TTT layer and a `d → 4d → d` GELU MLP, each behind RMSNorm with a
/// residual connection.
#[derive(Clone, Copy, Debug)]
pub struct TttBlockVars {
    pub ttt: TttLayerVars,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub norm1: Var,
    pub norm2: Var,
}

pub fn ttt_block_forward(tape: &mut Tape, x: Var, p: &TttBlockVars, eps: f64) -> Result<Var> {
    let h = tape.rms_norm(x, p.norm1, eps)?;
    let (z, _) = forward_sequence(tape, h, &p.ttt)?;
    let x1 = tape.add(z, x)?;
    let h = tape.rms_norm(x1, p.norm2, eps)?;
    let h = tape.matmul(h, p.w1)?;
    let h = tape.add_row(h, p.b1)?;
    let h = tape.gelu(h)?;
    let h = tape.matmul(h, p.w2)?;
    let h = tape.add_row(h, p.b2)?;
    Ok(tape.add(h, x1)?)
}

/// Parameter handles of one block inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TttBlockIds {
    pub theta_k: ParamId,
    pub theta_v: ParamId,
    pub theta_q: ParamId,
    pub w0: ParamId,
    pub log_eta: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub norm1: ParamId,
    pub norm2: ParamId,
}

impl TttBlockIds {
    /// Register a freshly initialized block under `prefix`.
    ///
    /// Projections, `W0` and the first MLP matrix are uniform in
    /// `±1/√d`, the second MLP matrix in `±1/√(4d)`; biases start at 0 and
    /// norm gains at 1.
    pub fn create<R: Rng>(store: &mut ParamStore, prefix: &str, d: usize, eta_init: f64, rng: &mut R) -> Result<Self> {
        if !(eta_init > 0.0) {
            return Err(CoreError::Config(format!("eta_init must be positive, got {eta_init}")));
        }
        let b = 1.0 / (d as f64).sqrt();
        let b4 = 1.0 / ((4 * d) as f64).sqrt();
        Ok(TttBlockIds {
            theta_k: store.add_uniform(&format!("{prefix}.ttt.theta_k"), &[d, d], b, rng)?,
            theta_v: store.add_uniform(&format!("{prefix}.ttt.theta_v"), &[d, d], b, rng)?,
            theta_q: store.add_uniform(&format!("{prefix}.ttt.theta_q"), &[d, d], b, rng)?,
            w0: store.add_uniform(&format!("{prefix}.ttt.w0"), &[d, d], b, rng)?,
            log_eta: store.add(format!("{prefix}.ttt.log_eta"), &[], vec![eta_init.ln()])?,
            w1: store.add_uniform(&format!("{prefix}.mlp.w1"), &[d, 4 * d], b, rng)?,
            b1: store.add_filled(&format!("{prefix}.mlp.b1"), &[4 * d], 0.0)?,
            w2: store.add_uniform(&format!("{prefix}.mlp.w2"), &[4 * d, d], b4, rng)?,
            b2: store.add_filled(&format!("{prefix}.mlp.b2"), &[d], 0.0)?,
            norm1: store.add_filled(&format!("{prefix}.norm1"), &[d], 1.0)?,
            norm2: store.add_filled(&format!("{prefix}.norm2"), &[d], 1.0)?,
        })
    }

    /// Look the block up by name prefix in an existing store.
    pub fn find(store: &ParamStore, prefix: &str) -> Result<Self> {
        let f = |suffix: &str| {
            let name = format!("{prefix}.{suffix}");
            store
                .find(&name)
                .ok_or_else(|| CoreError::Config(format!("missing parameter {name}")))
        };
        Ok(TttBlockIds {
            theta_k: f("ttt.theta_k")?,
            theta_v: f("ttt.theta_v")?,
            theta_q: f("ttt.theta_q")?,
            w0: f("ttt.w0")?,
            log_eta: f("ttt.log_eta")?,
            w1: f("mlp.w1")?,
            b1: f("mlp.b1")?,
            w2: f("mlp.w2")?,
            b2: f("mlp.b2")?,
            norm1: f("norm1")?,
            norm2: f("norm2")?,
        })
    }

    pub fn bind(&self, s: &mut Session) -> TttBlockVars {
        TttBlockVars {
            ttt: TttLayerVars {
                theta_k: s.param(self.theta_k),
                theta_v: s.param(self.theta_v),
                theta_q: s.param(self.theta_q),
                w0: s.param(self.w0),
                log_eta: s.param(self.log_eta),
            },
            w1: s.param(self.w1),
            b1: s.param(self.b1),
            w2: s.param(self.w2),
            b2: s.param(self.b2),
            norm1: s.param(self.norm1),
            norm2: s.param(self.norm2),
        }
    }
}
