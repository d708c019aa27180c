//! Named parameter storage and the shared-MLP / residual-MLP building
//! blocks. A shared MLP layer is affine -> feature normalization -> relu;
//! the normalization is batch norm by default with a layer-norm switch.

use std::cell::RefCell;

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnStats, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    Batch,
    Layer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T: Scalar> {
    pub value: Tensor<T>,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

/// Ordered map of learnable parameters plus batch-norm running buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Scalar> {
    pub params: IndexMap<String, ParamEntry<T>>,
    pub bn: IndexMap<String, BnStats<T>>,
    /// AdamW timestep, shared across parameters.
    pub step: u64,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
            bn: IndexMap::new(),
            step: 0,
        }
    }

    pub fn add_param(&mut self, name: &str, value: Tensor<T>) {
        let m = Tensor::zeros(value.shape().to_vec());
        let v = Tensor::zeros(value.shape().to_vec());
        let prev = self.params.insert(name.to_string(), ParamEntry { value, m, v });
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn add_bn(&mut self, name: &str, features: usize) {
        let prev = self.bn.insert(name.to_string(), BnStats::new(features));
        assert!(prev.is_none(), "duplicate bn stats {name}");
    }

    pub fn value(&self, name: &str) -> &Tensor<T> {
        &self.params[name].value
    }

    pub fn set_value(&mut self, name: &str, value: Tensor<T>) {
        self.params[name].value = value;
    }

    /// Total learnable scalar count (running buffers excluded).
    pub fn param_count(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        ParamEntry {
                            value: p.value.cast(),
                            m: p.m.cast(),
                            v: p.v.cast(),
                        },
                    )
                })
                .collect(),
            bn: self
                .bn
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        BnStats {
                            mean: s.mean.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
                            var: s.var.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
                        },
                    )
                })
                .collect(),
            step: self.step,
        }
    }
}

/// Forward context: binds one tape to one parameter store for a step.
pub struct Ctx<'a, T: Scalar> {
    pub tape: &'a Tape<T>,
    store: RefCell<&'a mut ParamStore<T>>,
    vars: RefCell<IndexMap<String, Var>>,
    pub training: bool,
    pub bn_momentum: T,
    pub norm_eps: T,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a Tape<T>, store: &'a mut ParamStore<T>, training: bool) -> Self {
        Self {
            tape,
            store: RefCell::new(store),
            vars: RefCell::new(IndexMap::new()),
            training,
            bn_momentum: T::from_f64(0.1),
            norm_eps: T::from_f64(1e-5),
        }
    }

    /// Bind an externally created tape variable to a parameter name;
    /// subsequent `param` calls return it. Gradient checks perturb
    /// parameters this way.
    pub fn bind_param(&self, name: &str, var: Var) {
        self.vars.borrow_mut().insert(name.to_string(), var);
    }

    /// Tape variable for a named parameter, created once per step.
    pub fn param(&self, name: &str) -> Var {
        if let Some(&v) = self.vars.borrow().get(name) {
            return v;
        }
        let value = self.store.borrow().value(name).clone();
        let var = self.tape.param(value);
        self.vars.borrow_mut().insert(name.to_string(), var);
        var
    }

    pub fn scalar_param_value(&self, name: &str) -> f64 {
        self.store.borrow().value(name).data()[0].to_f64()
    }

    fn norm(&self, kind: NormKind, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"));
        let beta = self.param(&format!("{prefix}.beta"));
        match kind {
            NormKind::Batch => {
                let mut store = self.store.borrow_mut();
                let stats = store
                    .bn
                    .get_mut(prefix)
                    .unwrap_or_else(|| panic!("missing bn stats {prefix}"));
                self.tape.batch_norm(
                    x,
                    gamma,
                    beta,
                    stats,
                    self.training,
                    self.bn_momentum,
                    self.norm_eps,
                )
            }
            NormKind::Layer => self.tape.layer_norm(x, gamma, beta, self.norm_eps),
        }
    }

    /// Gradients in store order after a backward pass.
    pub fn grads(&self) -> Result<Vec<(String, Tensor<T>)>> {
        let vars = self.vars.borrow();
        let mut out = Vec::new();
        for (name, &var) in vars.iter() {
            if let Some(g) = self.tape.grad(var) {
                if !g.is_finite() {
                    return Err(Error::NonFinite("gradient"));
                }
                out.push((name.clone(), g));
            }
        }
        Ok(out)
    }
}

fn uniform_init<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// Affine transform y = xW + b.
#[derive(Debug, Clone)]
pub struct Affine {
    pub w: String,
    pub b: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Affine {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        store.add_param(&format!("{name}.w"), uniform_init(rng, vec![in_dim, out_dim], bound));
        store.add_param(&format!("{name}.b"), uniform_init(rng, vec![out_dim], bound));
        Self {
            w: format!("{name}.w"),
            b: format!("{name}.b"),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.param(&self.w);
        let b = ctx.param(&self.b);
        let xw = ctx.tape.matmul(x, w)?;
        ctx.tape.add_bias(xw, b)
    }
}

fn init_norm<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, dim: usize, kind: NormKind) {
    store.add_param(&format!("{prefix}.gamma"), Tensor::full(vec![dim], T::one()));
    store.add_param(&format!("{prefix}.beta"), Tensor::zeros(vec![dim]));
    if kind == NormKind::Batch {
        store.add_bn(prefix, dim);
    }
}

/// Shared MLP: per layer affine -> normalization -> relu.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<(Affine, String)>,
    norm: NormKind,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Mlp {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dims: &[usize],
        norm: NormKind,
    ) -> Self {
        assert!(dims.len() >= 2, "mlp needs input and output widths");
        let mut layers = Vec::new();
        for i in 0..dims.len() - 1 {
            let lname = format!("{name}.l{i}");
            let affine = Affine::init(store, rng, &lname, dims[i], dims[i + 1]);
            let nprefix = format!("{lname}.norm");
            init_norm(store, &nprefix, dims[i + 1], norm);
            layers.push((affine, nprefix));
        }
        Self {
            layers,
            norm,
            in_dim: dims[0],
            out_dim: *dims.last().unwrap(),
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (affine, nprefix) in &self.layers {
            h = affine.forward(ctx, h)?;
            h = ctx.norm(self.norm, nprefix, h)?;
            h = ctx.tape.relu(h);
        }
        Ok(h)
    }
}

/// Residual MLP: y = x + MLP(x), with a learned projection on the skip
/// path when the block changes width.
#[derive(Debug, Clone)]
pub struct ResMlp {
    proj: Option<Affine>,
    mlp: Mlp,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl ResMlp {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        norm: NormKind,
    ) -> Self {
        let proj = (in_dim != out_dim)
            .then(|| Affine::init(store, rng, &format!("{name}.proj"), in_dim, out_dim));
        let mlp = Mlp::init(
            store,
            rng,
            &format!("{name}.mlp"),
            &[in_dim, out_dim, out_dim],
            norm,
        );
        Self {
            proj,
            mlp,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<T>, x: Var) -> Result<Var> {
        let skip = match &self.proj {
            Some(p) => p.forward(ctx, x)?,
            None => x,
        };
        let h = self.mlp.forward(ctx, x)?;
        ctx.tape.add(skip, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, CheckInput};
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Straight-line reference: affine -> batch-norm (population stats)
    /// -> relu per layer, written with plain loops.
    fn mlp_reference(
        store: &ParamStore<f64>,
        name: &str,
        dims: &[usize],
        x: &Tensor<f64>,
    ) -> Vec<f64> {
        let n = x.rows();
        let mut h: Vec<f64> = x.data().to_vec();
        let mut width = dims[0];
        for (i, &out_dim) in dims[1..].iter().enumerate() {
            let w = store.value(&format!("{name}.l{i}.w"));
            let b = store.value(&format!("{name}.l{i}.b"));
            let gamma = store.value(&format!("{name}.l{i}.norm.gamma"));
            let beta = store.value(&format!("{name}.l{i}.norm.beta"));
            let mut out = vec![0.0; n * out_dim];
            for r in 0..n {
                for c in 0..out_dim {
                    let mut acc = b.data()[c];
                    for k in 0..width {
                        acc += h[r * width + k] * w.at(k, c);
                    }
                    out[r * out_dim + c] = acc;
                }
            }
            // population batch norm
            for c in 0..out_dim {
                let mean: f64 = (0..n).map(|r| out[r * out_dim + c]).sum::<f64>() / n as f64;
                let var: f64 = (0..n)
                    .map(|r| (out[r * out_dim + c] - mean).powi(2))
                    .sum::<f64>()
                    / n as f64;
                let inv = 1.0 / (var + 1e-5).sqrt();
                for r in 0..n {
                    let xhat = (out[r * out_dim + c] - mean) * inv;
                    out[r * out_dim + c] = (gamma.data()[c] * xhat + beta.data()[c]).max(0.0);
                }
            }
            h = out;
            width = out_dim;
        }
        h
    }

    #[test]
    fn mlp_matches_straight_line_reference() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_from_seed(7);
        let dims = [6usize, 8, 5];
        let mlp = Mlp::init(&mut store, &mut rng, "m", &dims, NormKind::Batch);
        let x = random_tensor(&mut rng, vec![5, 6]);
        let want = mlp_reference(&store, "m", &dims, &x);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &mut store, true);
        let xv = tape.leaf(x);
        let y = mlp.forward(&ctx, xv).unwrap();
        let got = tape.value(y);
        assert_eq!(got.data().len(), want.len());
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn resmlp_zero_weights_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_from_seed(8);
        let block = ResMlp::init(&mut store, &mut rng, "r", 4, 4, NormKind::Batch);
        // zero the MLP branch
        let names: Vec<String> = store.params.keys().cloned().collect();
        for name in names {
            if name.starts_with("r.mlp") {
                let shape = store.value(&name).shape().to_vec();
                store.set_value(&name, Tensor::zeros(shape));
            }
        }
        let mut rng2 = rng_from_seed(9);
        let x = random_tensor(&mut rng2, vec![6, 4]);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &mut store, true);
        let xv = tape.leaf(x.clone());
        let y = block.forward(&ctx, xv).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn resmlp_width_change_reduces_to_projection() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_from_seed(10);
        let block = ResMlp::init(&mut store, &mut rng, "r", 3, 5, NormKind::Batch);
        let names: Vec<String> = store.params.keys().cloned().collect();
        for name in names {
            if name.starts_with("r.mlp") {
                let shape = store.value(&name).shape().to_vec();
                store.set_value(&name, Tensor::zeros(shape));
            }
        }
        let mut rng2 = rng_from_seed(11);
        let x = random_tensor(&mut rng2, vec![4, 3]);
        // reference projection
        let w = store.value("r.proj.w").clone();
        let b = store.value("r.proj.b").clone();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &mut store, true);
        let xv = tape.leaf(x.clone());
        let y = block.forward(&ctx, xv).unwrap();
        let got = tape.value(y);
        for r in 0..4 {
            for c in 0..5 {
                let mut want = b.data()[c];
                for k in 0..3 {
                    want += x.at(r, k) * w.at(k, c);
                }
                assert!((got.at(r, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resmlp_random_matches_composed_reference() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_from_seed(12);
        let block = ResMlp::init(&mut store, &mut rng, "r", 4, 6, NormKind::Batch);
        let x = random_tensor(&mut rng, vec![7, 4]);
        // reference: proj(x) + mlp_reference(x)
        let w = store.value("r.proj.w").clone();
        let b = store.value("r.proj.b").clone();
        let mlp_out = mlp_reference(&store, "r.mlp", &[4, 6, 6], &x);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &mut store, true);
        let xv = tape.leaf(x.clone());
        let y = block.forward(&ctx, xv).unwrap();
        let got = tape.value(y);
        for r in 0..7 {
            for c in 0..6 {
                let mut skip = b.data()[c];
                for k in 0..4 {
                    skip += x.at(r, k) * w.at(k, c);
                }
                let want = skip + mlp_out[r * 6 + c];
                assert!((got.at(r, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mlp_gradients_pass_finite_difference() {
        let mut base = ParamStore::<f64>::new();
        let mut rng = rng_from_seed(13);
        let mlp = Mlp::init(&mut base, &mut rng, "m", &[3, 4, 4], NormKind::Batch);
        let x = random_tensor(&mut rng, vec![5, 3]);
        let names: Vec<String> = base.params.keys().cloned().collect();
        let inputs: Vec<CheckInput> = std::iter::once(CheckInput::new("x", x))
            .chain(
                names
                    .iter()
                    .map(|n| CheckInput::new(n, base.value(n).clone())),
            )
            .collect();
        let report = grad_check(
            |tape, vars| {
                let mut store = base.clone();
                for (name, var) in names.iter().zip(&vars[1..]) {
                    store.set_value(name, tape.value(*var));
                }
                // wire the externally perturbed values back through ctx
                let ctx = Ctx::new(tape, &mut store, true);
                for (name, var) in names.iter().zip(&vars[1..]) {
                    ctx.bind_param(name, *var);
                }
                let y = mlp.forward(&ctx, vars[0])?;
                Ok(tape.sum_all(y))
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn layer_norm_variant_runs_and_checks() {
        let mut base = ParamStore::<f64>::new();
        let mut rng = rng_from_seed(14);
        let mlp = Mlp::init(&mut base, &mut rng, "m", &[3, 4], NormKind::Layer);
        let x = random_tensor(&mut rng, vec![4, 3]);
        let names: Vec<String> = base.params.keys().cloned().collect();
        let inputs: Vec<CheckInput> = std::iter::once(CheckInput::new("x", x))
            .chain(names.iter().map(|n| CheckInput::new(n, base.value(n).clone())))
            .collect();
        let report = grad_check(
            |tape, vars| {
                let mut store = base.clone();
                let ctx = Ctx::new(tape, &mut store, true);
                for (name, var) in names.iter().zip(&vars[1..]) {
                    ctx.bind_param(name, *var);
                }
                let y = mlp.forward(&ctx, vars[0])?;
                Ok(tape.sum_all(y))
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }
}
