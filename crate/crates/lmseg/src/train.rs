//! Training: geometric augmentation, inverse-frequency class weights,
//! label-smoothed weighted cross entropy, AdamW with cosine annealing, and
//! the epoch loop with per-epoch validation and best-checkpoint tracking.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tape, Tensor};
use crate::dual::DualGraph;
use crate::error::{Error, Result};
use crate::metrics::SegReport;
use crate::net::{ArchConfig, LmsegModel};
use crate::nn::{Ctx, ParamStore};
use crate::rng::{derive_seed, rng_from_seed};

fn default_weight_decay() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    1
}
fn default_epochs() -> usize {
    30
}
fn default_smoothing() -> f64 {
    0.1
}
fn default_seed() -> u64 {
    42
}
fn default_true() -> bool {
    true
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Initial learning rate; when omitted in config files it defaults to
    /// 0.01 for binary tasks and 0.005 otherwise.
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_smoothing")]
    pub label_smoothing: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub class_count: usize,
    #[serde(default = "default_true")]
    pub augment: bool,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
}

impl TrainConfig {
    pub fn default_lr_for_classes(class_count: usize) -> f64 {
        if class_count == 2 {
            0.01
        } else {
            0.005
        }
    }

    pub fn new(class_count: usize) -> Self {
        Self {
            lr: Self::default_lr_for_classes(class_count),
            weight_decay: default_weight_decay(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            label_smoothing: default_smoothing(),
            seed: default_seed(),
            class_count,
            augment: true,
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::InvalidConfig("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::InvalidConfig("smoothing must be in [0,1)".into()));
        }
        if self.epochs < 1 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

fn rotation_matrix(theta_z: f64, theta_x: f64, theta_y: f64) -> [[f64; 3]; 3] {
    let (sz, cz) = theta_z.sin_cos();
    let (sx, cx) = theta_x.sin_cos();
    let (sy, cy) = theta_y.sin_cos();
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for (k, row) in b.iter().enumerate() {
                    out[i][j] += a[i][k] * row[j];
                }
            }
        }
        out
    };
    // applied in order: z first, then x, then y
    mul(ry, mul(rx, rz))
}

fn apply_rotation(r: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
        r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
        r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
    ]
}

/// Geometric augmentation of a normalized graph: z rotation in
/// [-180, 180] degrees, x/y rotations in [-1, 1] degrees, per-node jitter
/// in [-0.001, 0.001]^3. Normal features rotate with the graph; HSV is
/// untouched. Draw order is fixed: theta_z, theta_x, theta_y, then jitter.
pub fn augment(graph: &DualGraph, seed: u64) -> DualGraph {
    let mut rng = rng_from_seed(seed);
    let theta_z = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let small = 1.0f64.to_radians();
    let theta_x = rng.gen_range(-small..small);
    let theta_y = rng.gen_range(-small..small);
    let r = rotation_matrix(theta_z, theta_x, theta_y);
    let mut out = graph.clone();
    for p in out.positions.iter_mut() {
        let rotated = apply_rotation(&r, *p);
        *p = [
            rotated[0] + rng.gen_range(-0.001..0.001),
            rotated[1] + rng.gen_range(-0.001..0.001),
            rotated[2] + rng.gen_range(-0.001..0.001),
        ];
    }
    if let Some(offset) = graph.feature_spec.normal_offset() {
        let c = graph.feature_dim;
        for i in 0..out.node_count() {
            let row = &mut out.features[i * c + offset..i * c + offset + 3];
            let rotated = apply_rotation(&r, [row[0], row[1], row[2]]);
            row.copy_from_slice(&rotated);
        }
    }
    out
}

/// Inverse-frequency weights normalized so present classes average to 1;
/// absent classes get weight 0.
pub fn class_weights(histogram: &[u64]) -> Result<Vec<f64>> {
    let present: Vec<usize> = (0..histogram.len()).filter(|&k| histogram[k] > 0).collect();
    if present.is_empty() {
        return Err(Error::AllZeroHistogram);
    }
    let inv_sum: f64 = present.iter().map(|&k| 1.0 / histogram[k] as f64).sum();
    let scale = present.len() as f64 / inv_sum;
    Ok(histogram
        .iter()
        .map(|&f| if f > 0 { scale / f as f64 } else { 0.0 })
        .collect())
}

/// Cosine annealing from lr0 to 0 across total steps.
pub fn cosine_lr(lr0: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let progress = (step as f64 / total_steps as f64).clamp(0.0, 1.0);
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// One AdamW update with decoupled weight decay. Parameters without a
/// gradient this step are left untouched.
pub fn adamw_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &[(String, Tensor<T>)],
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    store.step += 1;
    let t = store.step as i32;
    let b1 = T::from_f64(config.beta1);
    let b2 = T::from_f64(config.beta2);
    let eps = T::from_f64(config.adam_eps);
    let bias1 = T::one() - b1.powi(t);
    let bias2 = T::one() - b2.powi(t);
    let lr_t = T::from_f64(lr);
    let wd = T::from_f64(config.weight_decay);
    for (name, grad) in grads {
        if !grad.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        let entry = store
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
        let g = grad.data();
        let w = entry.value.data_mut();
        let m = entry.m.data_mut();
        let v = entry.v.data_mut();
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            w[i] = w[i] - lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * w[i]);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub miou: f64,
    pub oa: f64,
    pub macc: f64,
    pub f1: f64,
}

pub struct TrainOutcome {
    /// Parameters at the best validation mIoU.
    pub best_store: ParamStore<f32>,
    pub best_miou: f64,
    pub best_epoch: usize,
    pub final_store: ParamStore<f32>,
    pub trace: Vec<EpochMetrics>,
}

/// Label histogram across a dataset.
pub fn label_histogram(graphs: &[DualGraph], k: usize) -> Result<Vec<u64>> {
    let mut hist = vec![0u64; k];
    for g in graphs {
        let labels = g
            .labels
            .as_ref()
            .ok_or(Error::InvalidConfig("training graph without labels".into()))?;
        for &l in labels {
            if l as usize >= k {
                return Err(Error::InvalidLabel {
                    label: l as usize,
                    classes: k,
                });
            }
            hist[l as usize] += 1;
        }
    }
    Ok(hist)
}

/// Argmax prediction per node from eval-mode logits.
pub fn predict(
    model: &LmsegModel,
    store: &mut ParamStore<f32>,
    graph: &DualGraph,
    seed: u64,
) -> Result<(Vec<u16>, Vec<f32>)> {
    let tape = Tape::<f32>::new();
    let ctx = Ctx::new(&tape, store, false);
    let logits = model.forward(&ctx, graph, seed)?;
    let values = tape.value(logits);
    let mut labels = Vec::with_capacity(values.rows());
    let mut confidence = Vec::with_capacity(values.rows());
    for i in 0..values.rows() {
        let row = values.row(i);
        let mut best = 0usize;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        // softmax probability of the winning class
        let maxv = row[best];
        let z: f32 = row.iter().map(|&v| (v - maxv).exp()).sum();
        labels.push(best as u16);
        confidence.push(1.0 / z);
    }
    Ok((labels, confidence))
}

/// Aggregate validation metrics over a tile set (shared confusion matrix).
pub fn validate_tiles(
    model: &LmsegModel,
    store: &mut ParamStore<f32>,
    tiles: &[DualGraph],
    k: usize,
    seed: u64,
) -> Result<SegReport> {
    let mut confusion = vec![vec![0u64; k]; k];
    for (ti, graph) in tiles.iter().enumerate() {
        let (pred, _) = predict(model, store, graph, derive_seed(seed, 0x7a1, ti as u64))?;
        let gt = graph
            .labels
            .as_ref()
            .ok_or(Error::InvalidConfig("validation graph without labels".into()))?;
        for (p, &g) in pred.iter().zip(gt) {
            confusion[g as usize][*p as usize] += 1;
        }
    }
    Ok(SegReport::from_confusion(confusion))
}

/// Full training loop: augment -> forward -> loss -> backward -> AdamW with
/// cosine annealing, gradient accumulation across the batch, per-epoch
/// validation, best-mIoU checkpointing.
pub fn train(
    arch: &ArchConfig,
    config: &TrainConfig,
    train_tiles: &[DualGraph],
    val_tiles: &[DualGraph],
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_tiles.is_empty() {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    let k = config.class_count;
    let mut store = ParamStore::<f32>::new();
    let model = LmsegModel::init(&mut store, arch, config.seed)?;
    let hist = label_histogram(train_tiles, k)?;
    let weights: Rc<Vec<f32>> = Rc::new(class_weights(&hist)?.iter().map(|&w| w as f32).collect());

    let steps_per_epoch = train_tiles.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut opt_step = 0usize;
    let mut best_miou = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_store = store.clone();
    let mut trace = Vec::new();

    for epoch in 0..config.epochs {
        let mut epoch_loss = 0.0f64;
        let mut order: Vec<usize> = (0..train_tiles.len()).collect();
        // seeded shuffle per epoch
        let mut rng = rng_from_seed(derive_seed(config.seed, 0x0d9, epoch as u64));
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for batch in order.chunks(config.batch_size) {
            let mut accumulated: Option<Vec<(String, Tensor<f32>)>> = None;
            for &tile_idx in batch {
                let graph = &train_tiles[tile_idx];
                let step_seed =
                    derive_seed(config.seed, epoch as u64, tile_idx as u64);
                let input = if config.augment {
                    augment(graph, derive_seed(step_seed, 0xa06, 0))
                } else {
                    graph.clone()
                };
                let labels: Rc<Vec<u32>> = Rc::new(
                    input
                        .labels
                        .as_ref()
                        .ok_or(Error::InvalidConfig("training graph without labels".into()))?
                        .iter()
                        .map(|&l| l as u32)
                        .collect(),
                );
                let tape = Tape::<f32>::new();
                let ctx = Ctx::new(&tape, &mut store, true);
                let logits = model.forward(&ctx, &input, step_seed)?;
                let loss = tape.smoothed_ce(
                    logits,
                    labels,
                    weights.clone(),
                    config.label_smoothing as f32,
                )?;
                let loss_value = tape.value(loss).data()[0] as f64;
                if !loss_value.is_finite() {
                    return Err(Error::NonFinite("loss"));
                }
                epoch_loss += loss_value;
                tape.backward(loss)?;
                let grads = ctx.grads()?;
                match &mut accumulated {
                    None => accumulated = Some(grads),
                    Some(acc) => {
                        // tiles can touch different parameter subsets only
                        // when branches are ablated; align by name
                        for (name, g) in grads {
                            if let Some((_, total)) = acc.iter_mut().find(|(n, _)| *n == name) {
                                for (o, &v) in total.data_mut().iter_mut().zip(g.data()) {
                                    *o += v;
                                }
                            } else {
                                acc.push((name, g));
                            }
                        }
                    }
                }
            }
            let mut grads = accumulated.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f32;
            for (_, g) in grads.iter_mut() {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            let lr = cosine_lr(config.lr, opt_step, total_steps);
            adamw_step(&mut store, &grads, lr, config)?;
            opt_step += 1;
        }
        let report = validate_tiles(&model, &mut store, val_tiles, k, config.seed)?;
        let metrics = EpochMetrics {
            epoch,
            loss: epoch_loss / train_tiles.len() as f64,
            miou: report.miou,
            oa: report.oa,
            macc: report.macc,
            f1: report.f1,
        };
        on_epoch(&metrics);
        if report.miou > best_miou {
            best_miou = report.miou;
            best_epoch = epoch;
            best_store = store.clone();
        }
        trace.push(metrics);
    }
    Ok(TrainOutcome {
        best_store,
        best_miou,
        best_epoch,
        final_store: store,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dual::{build_dual, normalize_scale, FeatureSpec};

    fn toy_graph(seed: u64) -> DualGraph {
        let mesh = crate::synth::synth_tile(seed, 60);
        normalize_scale(&build_dual(&mesh, FeatureSpec::default()).unwrap())
    }

    #[test]
    fn augment_identity_when_disabled_path_unused() {
        // disabled augmentation is just "don't call augment"; here we check
        // determinism instead: same seed, same output
        let graph = toy_graph(1);
        let a = augment(&graph, 7);
        let b = augment(&graph, 7);
        assert_eq!(a, b);
        let c = augment(&graph, 8);
        assert_ne!(a.positions, c.positions);
    }

    #[test]
    fn augment_preserves_pairwise_distances_and_normal_norms() {
        let graph = toy_graph(2);
        let rotated = augment(&graph, 3);
        let n = graph.node_count();
        let dist = |p: &[[f64; 3]], i: usize, j: usize| {
            ((p[i][0] - p[j][0]).powi(2) + (p[i][1] - p[j][1]).powi(2) + (p[i][2] - p[j][2]).powi(2))
                .sqrt()
        };
        // jitter moves each node by at most 0.001 sqrt(3) in each term
        for (i, j) in [(0, n - 1), (1, n / 2), (n / 3, 2 * n / 3)] {
            let before = dist(&graph.positions, i, j);
            let after = dist(&rotated.positions, i, j);
            assert!((before - after).abs() < 4.0e-3, "{before} vs {after}");
        }
        let offset = graph.feature_spec.normal_offset().unwrap();
        let c = graph.feature_dim;
        for i in 0..n {
            let row = &rotated.features[i * c + offset..i * c + offset + 3];
            let norm = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
        // HSV untouched
        for i in 0..n {
            assert_eq!(
                &graph.features[i * c..i * c + 3],
                &rotated.features[i * c..i * c + 3]
            );
        }
    }

    #[test]
    fn pure_rotation_is_isometry() {
        // rotation matrix path without jitter: check orthogonality directly
        let r = rotation_matrix(1.1, 0.01, -0.015);
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][a] * r[k][b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn class_weights_examples() {
        assert_eq!(class_weights(&[10, 10]).unwrap(), vec![1.0, 1.0]);
        let w = class_weights(&[90, 10]).unwrap();
        assert!((w[0] - 0.2).abs() < 1e-12);
        assert!((w[1] - 1.8).abs() < 1e-12);
        assert_eq!(class_weights(&[5, 0, 5]).unwrap(), vec![1.0, 0.0, 1.0]);
        assert!(matches!(
            class_weights(&[0, 0]),
            Err(Error::AllZeroHistogram)
        ));
        // mean of nonzero weights is 1
        let w = class_weights(&[3, 17, 0, 112, 9]).unwrap();
        let nonzero: Vec<f64> = w.iter().copied().filter(|&x| x > 0.0).collect();
        let mean = nonzero.iter().sum::<f64>() / nonzero.len() as f64;
        assert!((mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn smoothed_ce_uniform_logits_is_ln_k() {
        let tape = Tape::<f64>::new();
        let logits = tape.param(Tensor::zeros(vec![3, 4]));
        let loss = tape
            .smoothed_ce(
                logits,
                Rc::new(vec![0, 1, 2]),
                Rc::new(vec![1.0; 4]),
                0.0,
            )
            .unwrap();
        assert!((tape.value(loss).data()[0] - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn smoothed_ce_perfect_prediction_approaches_zero() {
        let tape = Tape::<f64>::new();
        let big = 50.0;
        let logits = tape.param(
            Tensor::from_rows(&[vec![big, 0.0], vec![0.0, big]]),
        );
        let loss = tape
            .smoothed_ce(logits, Rc::new(vec![0, 1]), Rc::new(vec![1.0, 1.0]), 0.0)
            .unwrap();
        assert!(tape.value(loss).data()[0] < 1e-12);
    }

    #[test]
    fn smoothed_ce_matches_direct_formula() {
        let mut rng = rng_from_seed(70);
        let n = 8;
        let k = 3;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let labels: Vec<u32> = (0..n).map(|_| rng.gen_range(0..k as u32)).collect();
        let weights = vec![0.7, 1.5, 0.9];
        let s = 0.1f64;
        let tape = Tape::<f64>::new();
        let logits = tape.param(Tensor::from_rows(&rows));
        let loss = tape
            .smoothed_ce(
                logits,
                Rc::new(labels.clone()),
                Rc::new(weights.clone()),
                s,
            )
            .unwrap();
        // straight-line oracle
        let mut want = 0.0;
        for i in 0..n {
            let row = &rows[i];
            let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - maxv).exp()).sum();
            let log_z = z.ln() + maxv;
            let mut ce = 0.0;
            for c in 0..k {
                let mut target = s / k as f64;
                if c == labels[i] as usize {
                    target += 1.0 - s;
                }
                ce -= target * (row[c] - log_z);
            }
            want += weights[labels[i] as usize] * ce;
        }
        want /= n as f64;
        assert!((tape.value(loss).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn smoothed_ce_bounded_by_target_entropy() {
        let mut rng = rng_from_seed(71);
        for _ in 0..10 {
            let n = 6;
            let k = 4;
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect())
                .collect();
            let labels: Vec<u32> = (0..n).map(|_| rng.gen_range(0..k as u32)).collect();
            let s = 0.2f64;
            let tape = Tape::<f64>::new();
            let logits = tape.param(Tensor::from_rows(&rows));
            let loss = tape
                .smoothed_ce(logits, Rc::new(labels), Rc::new(vec![1.0; k]), s)
                .unwrap();
            // entropy of the smoothed target distribution
            let u = s / k as f64;
            let top = 1.0 - s + u;
            let entropy = -(top * top.ln() + (k as f64 - 1.0) * u * u.ln());
            assert!(tape.value(loss).data()[0] >= entropy - 1e-9);
        }
    }

    #[test]
    fn smoothed_ce_gradients_verified() {
        use crate::autodiff::{grad_check, CheckInput};
        let mut rng = rng_from_seed(72);
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let labels = Rc::new(vec![0u32, 2, 1, 1, 0]);
        let weights = Rc::new(vec![1.0, 0.5, 2.0]);
        let report = grad_check(
            |tape, vars| tape.smoothed_ce(vars[0], labels.clone(), weights.clone(), 0.1),
            &[CheckInput::new("logits", Tensor::from_rows(&rows))],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn invalid_label_rejected() {
        let tape = Tape::<f64>::new();
        let logits = tape.param(Tensor::zeros(vec![1, 2]));
        assert!(matches!(
            tape.smoothed_ce(logits, Rc::new(vec![5]), Rc::new(vec![1.0, 1.0]), 0.0),
            Err(Error::InvalidLabel { .. })
        ));
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_identity() {
        let mut store = ParamStore::<f64>::new();
        store.add_param("w", Tensor::from_rows(&[vec![1.0, -2.0]]));
        let mut config = TrainConfig::new(2);
        config.weight_decay = 0.0;
        let grads = vec![("w".to_string(), Tensor::zeros(vec![1, 2]))];
        adamw_step(&mut store, &grads, 0.1, &config).unwrap();
        assert_eq!(store.value("w").data(), &[1.0, -2.0]);
    }

    #[test]
    fn adamw_decoupled_decay_signature() {
        let mut store = ParamStore::<f64>::new();
        store.add_param("w", Tensor::from_rows(&[vec![2.0, -4.0]]));
        let mut config = TrainConfig::new(2);
        config.weight_decay = 0.01;
        let eta = 0.5;
        let grads = vec![("w".to_string(), Tensor::zeros(vec![1, 2]))];
        adamw_step(&mut store, &grads, eta, &config).unwrap();
        let factor = 1.0 - eta * 0.01;
        assert_eq!(store.value("w").data(), &[2.0 * factor, -4.0 * factor]);
    }

    #[test]
    fn adamw_minimizes_quadratic_bowl() {
        // f(w) = sum(w^2); gradient 2w
        let mut store = ParamStore::<f64>::new();
        store.add_param("w", Tensor::from_rows(&[vec![3.0, -2.0, 1.5]]));
        let mut config = TrainConfig::new(2);
        config.weight_decay = 0.0;
        let mut losses = Vec::new();
        for _ in 0..10 {
            let w = store.value("w").clone();
            losses.push(w.data().iter().map(|&x| x * x).sum::<f64>());
            let grad = w.map(|x| 2.0 * x);
            adamw_step(&mut store, &[("w".to_string(), grad)], 0.1, &config).unwrap();
        }
        // monotone decrease once the moment estimates have warmed up
        for step in 3..losses.len() {
            assert!(
                losses[step] <= losses[step - 1] + 1e-12,
                "step {step}: {} > {}",
                losses[step],
                losses[step - 1]
            );
        }
        assert!(losses[9] < losses[0]);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.01, 0, 100), 0.01);
        assert!(cosine_lr(0.01, 100, 100) < 1e-9);
        assert!((cosine_lr(0.01, 50, 100) - 0.005).abs() < 1e-12);
        // monotone decreasing
        let mut last = f64::INFINITY;
        for step in 0..=100 {
            let lr = cosine_lr(0.01, step, 100);
            assert!(lr <= last);
            last = lr;
        }
    }

    #[test]
    fn one_tile_one_epoch_smoke() {
        let mut arch = ArchConfig::with_classes(2);
        arch.stem_width = 8;
        arch.stem_ga_width = 6;
        arch.stage_widths = vec![8, 16];
        arch.ga_widths = vec![6, 6];
        arch.k_hier = 5;
        arch.head_hidden = 8;
        let mut config = TrainConfig::new(2);
        config.epochs = 1;
        config.seed = 3;
        let tile = toy_graph(9);
        let outcome = train(&arch, &config, &[tile.clone()], &[tile], |_| {}).unwrap();
        assert_eq!(outcome.trace.len(), 1);
        assert!(outcome.trace[0].loss.is_finite());
    }
}
