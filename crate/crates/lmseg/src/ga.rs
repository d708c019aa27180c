//! Geometry aggregation layer: relative-feature messages, sinusoidal
//! positional embedding modulation, and the fixed-plus-learnable
//! aggregation stack. The hierarchical (HGA+) and local (LGA+) variants
//! differ only in the edge set they consume: directed (target, source)
//! pairs, messages flowing source -> target.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::error::Result;
use crate::nn::{Ctx, Mlp, NormKind, ParamStore, ResMlp};

/// Hyper-parameters of one GA+ layer.
#[derive(Debug, Clone, Copy)]
pub struct GaConfig {
    /// Positional granularity.
    pub alpha: f64,
    /// Base frequency of the sinusoid ladder.
    pub beta: f64,
    /// Message and embedding width; split into three even blocks, one per
    /// spatial component, so it must be divisible by 6.
    pub d: usize,
    /// Stabilizer for the relative-feature normalization.
    pub eps: f64,
    /// Embed the source's absolute position instead of the relative offset.
    pub absolute_pe: bool,
}

impl GaConfig {
    pub fn new(d: usize) -> Self {
        assert!(d % 6 == 0, "embedding width {d} must be divisible by 6");
        Self {
            alpha: 100.0,
            beta: 1000.0,
            d,
            eps: 1e-5,
            absolute_pe: false,
        }
    }
}

/// Frequency matrix mapping a 3-vector to the d/2 sinusoid arguments:
/// block b of size d/6 embeds component b with the ladder
/// alpha / beta^(2c/d) over the block's local channel pairs c.
fn frequency_matrix<T: Scalar>(cfg: &GaConfig) -> Tensor<T> {
    let half = cfg.d / 2;
    let block = cfg.d / 6;
    let mut data = vec![T::zero(); 3 * half];
    for b in 0..3 {
        for c in 0..block {
            let freq = cfg.alpha / cfg.beta.powf(2.0 * c as f64 / cfg.d as f64);
            data[b * half + b * block + c] = T::from_f64(freq);
        }
    }
    Tensor::new(vec![3, half], data).expect("3 x d/2")
}

/// Sinusoidal positional embedding of per-edge offsets; channels pair
/// sin/cos at each frequency, so the output lies in [-1, 1]^d.
pub fn positional_embedding<T: Scalar>(
    tape: &Tape<T>,
    v_rel: Var,
    cfg: &GaConfig,
) -> Result<Var> {
    let freqs = tape.leaf(frequency_matrix::<T>(cfg));
    let args = tape.matmul(v_rel, freqs)?;
    let s = tape.sin(args);
    let c = tape.cos(args);
    tape.interleave_cols(s, c)
}

/// Normalized relative node features along directed edges:
/// (x_src - x_dst) / (sigma + eps) with sigma the per-channel standard
/// deviation of the differences over this invocation's edges.
pub fn relative_features<T: Scalar>(
    tape: &Tape<T>,
    x_target: Var,
    x_source: Var,
    eps: f64,
) -> Result<Var> {
    let diff = tape.sub(x_source, x_target)?;
    Ok(tape.row_std_normalize(diff, T::from_f64(eps)))
}

/// Channelwise softmax-weighted sum per group with inverse temperature t
/// (a one-element variable participating in backward).
pub fn softmax_aggregate<T: Scalar>(
    tape: &Tape<T>,
    h: Var,
    groups: Rc<Vec<u32>>,
    n_out: usize,
    t: Var,
) -> Result<Var> {
    let th = tape.mul_scalar_var(h, t)?;
    let weights = tape.group_softmax(th, groups.clone(), n_out)?;
    let weighted = tape.mul(weights, h)?;
    tape.scatter_sum(weighted, groups, n_out)
}

/// max + mean + softmax(t) aggregation; t appears only in the softmax term.
pub fn combined_aggregate<T: Scalar>(
    tape: &Tape<T>,
    h: Var,
    groups: Rc<Vec<u32>>,
    n_out: usize,
    t: Var,
) -> Result<Var> {
    let mx = tape.scatter_max(h, groups.clone(), n_out)?;
    let mn = tape.scatter_mean(h, groups.clone(), n_out)?;
    let sm = softmax_aggregate(tape, h, groups, n_out, t)?;
    let fixed = tape.add(mx, mn)?;
    tape.add(fixed, sm)
}

/// One GA+ layer: message function psi (shared MLP), update function phi
/// (shared ResMLP), and the learnable inverse temperature.
#[derive(Debug, Clone)]
pub struct GaPlusLayer {
    pub psi: Mlp,
    pub phi: ResMlp,
    pub t_name: String,
    pub cfg: GaConfig,
    pub in_dim: usize,
}

impl GaPlusLayer {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        cfg: GaConfig,
        norm: NormKind,
    ) -> Self {
        let psi = Mlp::init(
            store,
            rng,
            &format!("{name}.psi"),
            &[3 + 2 * in_dim, cfg.d, cfg.d],
            norm,
        );
        let phi = ResMlp::init(store, rng, &format!("{name}.phi"), cfg.d, cfg.d, norm);
        let t_name = format!("{name}.t");
        store.add_param(&t_name, Tensor::scalar(T::one()));
        Self {
            psi,
            phi,
            t_name,
            cfg,
            in_dim,
        }
    }

    /// Per-edge updated messages h^PE: psi over (target position, target
    /// features, normalized relative features), modulated by the positional
    /// embedding of the edge offset and refined by phi.
    #[allow(clippy::too_many_arguments)]
    pub fn messages<T: Scalar>(
        &self,
        ctx: &Ctx<T>,
        target_positions: &[[f64; 3]],
        source_positions: &[[f64; 3]],
        x_target: Var,
        x_source: Var,
        edges: &[(u32, u32)],
    ) -> Result<Var> {
        let tape = ctx.tape;
        let idx_i: Rc<Vec<u32>> = Rc::new(edges.iter().map(|&(i, _)| i).collect());
        let idx_j: Rc<Vec<u32>> = Rc::new(edges.iter().map(|&(_, j)| j).collect());
        let xi = tape.gather_rows(x_target, idx_i)?;
        let xj = tape.gather_rows(x_source, idx_j)?;
        let x_rel = relative_features(tape, xi, xj, self.cfg.eps)?;

        let e = edges.len();
        let mut vi = vec![T::zero(); e * 3];
        let mut vrel = vec![T::zero(); e * 3];
        for (row, &(i, j)) in edges.iter().enumerate() {
            let pi = target_positions[i as usize];
            let pj = source_positions[j as usize];
            for a in 0..3 {
                vi[row * 3 + a] = T::from_f64(pi[a]);
                vrel[row * 3 + a] = if self.cfg.absolute_pe {
                    T::from_f64(pj[a])
                } else {
                    T::from_f64(pj[a] - pi[a])
                };
            }
        }
        let vi = tape.leaf(Tensor::new(vec![e, 3], vi)?);
        let vrel = tape.leaf(Tensor::new(vec![e, 3], vrel)?);

        let psi_in = tape.concat_cols(&[vi, xi, x_rel])?;
        let h = self.psi.forward(ctx, psi_in)?;
        let pe = positional_embedding(tape, vrel, &self.cfg)?;
        let modulated = tape.mul(h, pe)?;
        let with_pe = tape.add(modulated, pe)?;
        self.phi.forward(ctx, with_pe)
    }

    /// Forward over directed (target, source) edges. Targets and sources
    /// may be the same node set (LGA+, stem) or consecutive hierarchy
    /// levels (HGA+). Targets with no incoming edge aggregate to zeros.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        ctx: &Ctx<T>,
        target_positions: &[[f64; 3]],
        source_positions: &[[f64; 3]],
        x_target: Var,
        x_source: Var,
        edges: &[(u32, u32)],
        n_targets: usize,
    ) -> Result<Var> {
        let tape = ctx.tape;
        if edges.is_empty() {
            return Ok(tape.leaf(Tensor::zeros(vec![n_targets, self.cfg.d])));
        }
        let hpe = self.messages(ctx, target_positions, source_positions, x_target, x_source, edges)?;
        let groups: Rc<Vec<u32>> = Rc::new(edges.iter().map(|&(i, _)| i).collect());
        let t = ctx.param(&self.t_name);
        combined_aggregate(tape, hpe, groups, n_targets, t)
    }

    /// Ablation variant: fixed max + mean aggregation only, no learnable
    /// softmax term.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_fixed<T: Scalar>(
        &self,
        ctx: &Ctx<T>,
        target_positions: &[[f64; 3]],
        source_positions: &[[f64; 3]],
        x_target: Var,
        x_source: Var,
        edges: &[(u32, u32)],
        n_targets: usize,
    ) -> Result<Var> {
        let tape = ctx.tape;
        if edges.is_empty() {
            return Ok(tape.leaf(Tensor::zeros(vec![n_targets, self.cfg.d])));
        }
        let hpe = self.messages(ctx, target_positions, source_positions, x_target, x_source, edges)?;
        let groups: Rc<Vec<u32>> = Rc::new(edges.iter().map(|&(i, _)| i).collect());
        let mx = tape.scatter_max(hpe, groups.clone(), n_targets)?;
        let mn = tape.scatter_mean(hpe, groups, n_targets)?;
        tape.add(mx, mn)
    }
}
