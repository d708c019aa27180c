//! Full encoder-decoder assembly: stem MLP + GA+ over the original dual
//! edges, four encoder blocks (random sub-sampling, HGA+ over hierarchical
//! edges, edge similarity pooling, LGA+ over local edges, ResMLP), a
//! symmetric feature-propagation decoder, and the classification head.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BnStats, Scalar, Tape, Tensor, Var};
use crate::dual::{DualGraph, FeatureSpec};
use crate::error::{Error, Result};
use crate::ga::{GaConfig, GaPlusLayer};
use crate::nn::{Affine, Ctx, Mlp, NormKind, ParamStore, ResMlp};
use crate::pooling::{edge_similarity_pool, hierarchical_edges, knn_edges, random_subsample};
use crate::rng::{derive_seed, rng_from_seed};

fn default_stem_width() -> usize {
    32
}
fn default_stem_ga_width() -> usize {
    30
}
fn default_stage_widths() -> Vec<usize> {
    vec![64, 128, 256, 512]
}
fn default_ga_widths() -> Vec<usize> {
    vec![24, 48, 96, 192]
}
fn default_ratio() -> f64 {
    1.0 / 3.0
}
fn default_k_hier() -> usize {
    20
}
fn default_k_local() -> usize {
    3
}
fn default_pe_alpha() -> f64 {
    100.0
}
fn default_pe_beta() -> f64 {
    1000.0
}
fn default_head_hidden() -> usize {
    64
}
fn default_true() -> bool {
    true
}

/// Architecture hyper-parameters. The GA message widths are the largest
/// convenient multiples of six below each stage width so the positional
/// embedding splits into three even blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    #[serde(default = "default_stem_width")]
    pub stem_width: usize,
    #[serde(default = "default_stem_ga_width")]
    pub stem_ga_width: usize,
    #[serde(default = "default_stage_widths")]
    pub stage_widths: Vec<usize>,
    #[serde(default = "default_ga_widths")]
    pub ga_widths: Vec<usize>,
    #[serde(default = "default_ratio")]
    pub subsample_ratio: f64,
    #[serde(default = "default_k_hier")]
    pub k_hier: usize,
    #[serde(default = "default_k_local")]
    pub k_local: usize,
    #[serde(default)]
    pub sim_threshold: f64,
    #[serde(default = "default_pe_alpha")]
    pub pe_alpha: f64,
    #[serde(default = "default_pe_beta")]
    pub pe_beta: f64,
    pub num_classes: usize,
    #[serde(default)]
    pub feature_spec: FeatureSpec,
    #[serde(default = "default_true")]
    pub use_hga: bool,
    #[serde(default = "default_true")]
    pub use_lga: bool,
    #[serde(default = "default_true")]
    pub learnable_aggregation: bool,
    #[serde(default)]
    pub norm: NormKind,
    #[serde(default = "default_head_hidden")]
    pub head_hidden: usize,
    #[serde(default)]
    pub head_dropout: f64,
    #[serde(default)]
    pub absolute_pe: bool,
}

impl ArchConfig {
    pub fn with_classes(num_classes: usize) -> Self {
        Self {
            stem_width: default_stem_width(),
            stem_ga_width: default_stem_ga_width(),
            stage_widths: default_stage_widths(),
            ga_widths: default_ga_widths(),
            subsample_ratio: default_ratio(),
            k_hier: default_k_hier(),
            k_local: default_k_local(),
            sim_threshold: 0.0,
            pe_alpha: default_pe_alpha(),
            pe_beta: default_pe_beta(),
            num_classes,
            feature_spec: FeatureSpec::default(),
            use_hga: true,
            use_lga: true,
            learnable_aggregation: true,
            norm: NormKind::Batch,
            head_hidden: default_head_hidden(),
            head_dropout: 0.0,
            absolute_pe: false,
        }
    }

    pub fn stages(&self) -> usize {
        self.stage_widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.is_empty() {
            return Err(Error::InvalidConfig("at least one encoder stage".into()));
        }
        if self.ga_widths.len() != self.stage_widths.len() {
            return Err(Error::InvalidConfig(
                "ga_widths must align with stage_widths".into(),
            ));
        }
        for w in self.stage_widths.windows(2) {
            if w[1] != w[0] * 2 {
                return Err(Error::InvalidConfig(format!(
                    "stage widths must double: {} then {}",
                    w[0], w[1]
                )));
            }
        }
        for &d in std::iter::once(&self.stem_ga_width).chain(&self.ga_widths) {
            if d % 6 != 0 || d == 0 {
                return Err(Error::InvalidConfig(format!(
                    "GA width {d} must be a positive multiple of 6"
                )));
            }
        }
        if !(self.subsample_ratio > 0.0 && self.subsample_ratio <= 1.0) {
            return Err(Error::InvalidConfig("subsample ratio must be in (0,1]".into()));
        }
        if !self.use_hga && !self.use_lga {
            return Err(Error::InvalidConfig(
                "at least one of the HGA+/LGA+ branches must be enabled".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("need at least two classes".into()));
        }
        if self.feature_spec.feature_dim() == 0 {
            return Err(Error::InvalidFeatureSpec);
        }
        Ok(())
    }

    fn ga_config(&self, d: usize) -> GaConfig {
        GaConfig {
            alpha: self.pe_alpha,
            beta: self.pe_beta,
            d,
            eps: 1e-5,
            absolute_pe: self.absolute_pe,
        }
    }
}

struct EncoderBlock {
    hga: Option<GaPlusLayer>,
    lga: Option<GaPlusLayer>,
    res: ResMlp,
}

struct DecoderBlock {
    proj: Affine,
    mlp: Mlp,
}

/// LMSeg network bound to one architecture config.
pub struct LmsegModel {
    pub cfg: ArchConfig,
    stem_mlp: Mlp,
    /// Input GA+ over the original dual edges; part of the local-edge
    /// family, so the LGA+ ablation removes it too.
    stem_ga: Option<GaPlusLayer>,
    blocks: Vec<EncoderBlock>,
    decoders: Vec<DecoderBlock>,
    head_mlp: Mlp,
    head_out: Affine,
    pub learnable_aggregation: bool,
}

impl LmsegModel {
    /// Register all parameters into the store with a seeded initializer.
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, cfg: &ArchConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from_seed(derive_seed(seed, 0x11717, 0));
        let in_features = cfg.feature_spec.feature_dim();
        let stem_mlp = Mlp::init(store, &mut rng, "stem.mlp", &[in_features, cfg.stem_width], cfg.norm);
        let stem_ga = cfg.use_lga.then(|| {
            GaPlusLayer::init(
                store,
                &mut rng,
                "stem.ga",
                cfg.stem_width,
                cfg.ga_config(cfg.stem_ga_width),
                cfg.norm,
            )
        });
        let level0_width = if stem_ga.is_some() {
            cfg.stem_ga_width
        } else {
            cfg.stem_width
        };
        let mut blocks = Vec::new();
        let mut width = level0_width;
        for (s, (&w, &d)) in cfg.stage_widths.iter().zip(&cfg.ga_widths).enumerate() {
            let hga = cfg.use_hga.then(|| {
                GaPlusLayer::init(
                    store,
                    &mut rng,
                    &format!("enc{s}.hga"),
                    width,
                    cfg.ga_config(d),
                    cfg.norm,
                )
            });
            // the block is a sequence: LGA+ transforms the HGA+ output when
            // both stages are present
            let lga_in = if cfg.use_hga { d } else { width };
            let lga = cfg.use_lga.then(|| {
                GaPlusLayer::init(
                    store,
                    &mut rng,
                    &format!("enc{s}.lga"),
                    lga_in,
                    cfg.ga_config(d),
                    cfg.norm,
                )
            });
            let branches = hga.is_some() as usize + lga.is_some() as usize;
            let res = ResMlp::init(store, &mut rng, &format!("enc{s}.res"), branches * d, w, cfg.norm);
            blocks.push(EncoderBlock { hga, lga, res });
            width = w;
        }
        // decoder mirrors the encoder levels down to the stem GA+ output
        let mut decoders = Vec::new();
        let mut coarse = *cfg.stage_widths.last().unwrap();
        for s in (0..cfg.stages()).rev() {
            let fine = if s == 0 {
                level0_width
            } else {
                cfg.stage_widths[s - 1]
            };
            let proj = Affine::init(store, &mut rng, &format!("dec{s}.proj"), coarse, fine);
            let mlp = Mlp::init(store, &mut rng, &format!("dec{s}.mlp"), &[fine, fine], cfg.norm);
            decoders.push(DecoderBlock { proj, mlp });
            coarse = fine;
        }
        let head_mlp = Mlp::init(
            store,
            &mut rng,
            "head.mlp",
            &[level0_width, cfg.head_hidden],
            cfg.norm,
        );
        let head_out = Affine::init(store, &mut rng, "head.out", cfg.head_hidden, cfg.num_classes);
        Ok(Self {
            cfg: cfg.clone(),
            stem_mlp,
            stem_ga,
            blocks,
            decoders,
            head_mlp,
            head_out,
            learnable_aggregation: cfg.learnable_aggregation,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn run_ga<T: Scalar>(
        &self,
        layer: &GaPlusLayer,
        ctx: &Ctx<T>,
        target_positions: &[[f64; 3]],
        source_positions: &[[f64; 3]],
        x_target: Var,
        x_source: Var,
        edges: &[(u32, u32)],
        n_targets: usize,
    ) -> Result<Var> {
        if self.learnable_aggregation {
            layer.forward(ctx, target_positions, source_positions, x_target, x_source, edges, n_targets)
        } else {
            layer.forward_fixed(ctx, target_positions, source_positions, x_target, x_source, edges, n_targets)
        }
    }

    /// Per-node class logits for one normalized graph. `seed` drives the
    /// per-stage random sub-sampling (and head dropout when configured);
    /// identical seeds give bit-identical results.
    pub fn forward<T: Scalar>(
        &self,
        ctx: &Ctx<T>,
        graph: &DualGraph,
        seed: u64,
    ) -> Result<Var> {
        let n = graph.node_count();
        if graph.feature_dim != self.cfg.feature_spec.feature_dim() {
            return Err(Error::FeatureSpecMismatch {
                expected: self.cfg.feature_spec.to_string(),
                actual: format!("{} features", graph.feature_dim),
            });
        }
        let tape = ctx.tape;
        let x = tape.leaf(Tensor::new(
            vec![n, graph.feature_dim],
            graph.features.iter().map(|&v| T::from_f64(v)).collect(),
        )?);
        let x = self.stem_mlp.forward(ctx, x)?;
        let h0 = match &self.stem_ga {
            Some(stem_ga) => self.run_ga(
                stem_ga,
                ctx,
                &graph.positions,
                &graph.positions,
                x,
                x,
                &graph.directed_edges(),
                n,
            )?,
            None => x,
        };

        let mut skip_positions: Vec<Vec<[f64; 3]>> = vec![graph.positions.clone()];
        let mut skip_feats: Vec<Var> = vec![h0];
        let mut parent_positions = graph.positions.clone();
        let mut parent_edges = graph.edges.clone();
        let mut parent_feats = h0;

        for (s, block) in self.blocks.iter().enumerate() {
            let mut level = random_subsample(
                &parent_positions,
                &parent_edges,
                self.cfg.subsample_ratio,
                derive_seed(seed, s as u64 + 1, 0x5a),
                s as u32 + 1,
            );
            let survivors = level.node_count();
            let idx: Rc<Vec<u32>> = Rc::new(level.parent_index.clone());
            let surv_feats = tape.gather_rows(parent_feats, idx)?;

            let mut stage_outputs = Vec::new();
            let mut sequence = surv_feats;
            if let Some(hga) = &block.hga {
                let k = self.cfg.k_hier.min(parent_positions.len());
                hierarchical_edges(&mut level, &parent_positions, k)?;
                sequence = self.run_ga(
                    hga,
                    ctx,
                    &level.positions,
                    &parent_positions,
                    surv_feats,
                    parent_feats,
                    &level.edges_hier,
                    survivors,
                )?;
                stage_outputs.push(sequence);
            }
            // similarity pooling runs on the embeddings entering the block;
            // deeper levels pool over the resulting local edges
            let feats64: Vec<f64> = tape
                .value(surv_feats)
                .data()
                .iter()
                .map(|&v| Scalar::to_f64(v))
                .collect();
            let width = tape.value(surv_feats).cols();
            edge_similarity_pool(
                &mut level,
                &feats64,
                width,
                self.cfg.k_local,
                self.cfg.sim_threshold,
            )?;
            if let Some(lga) = &block.lga {
                let out = self.run_ga(
                    lga,
                    ctx,
                    &level.positions,
                    &level.positions,
                    sequence,
                    sequence,
                    &level.directed_local_edges(),
                    survivors,
                )?;
                stage_outputs.push(out);
            }
            let merged = if stage_outputs.len() == 1 {
                stage_outputs[0]
            } else {
                tape.concat_cols(&stage_outputs)?
            };
            let h = block.res.forward(ctx, merged)?;

            skip_positions.push(level.positions.clone());
            skip_feats.push(h);
            parent_positions = level.positions.clone();
            parent_edges = level.edges_local.clone();
            parent_feats = h;
        }

        // decoder: progressively interpolate back up and fuse with skips
        let mut feats = parent_feats;
        let mut coarse_positions = parent_positions;
        for (d, dec) in self.decoders.iter().enumerate() {
            let s = self.cfg.stages() - 1 - d;
            let fine_positions = &skip_positions[s];
            let interp = feature_propagation(tape, &coarse_positions, fine_positions, feats, 3)?;
            let projected = dec.proj.forward(ctx, interp)?;
            let fused = tape.add(projected, skip_feats[s])?;
            feats = dec.mlp.forward(ctx, fused)?;
            coarse_positions = fine_positions.clone();
        }

        let mut h = self.head_mlp.forward(ctx, feats)?;
        if ctx.training && self.cfg.head_dropout > 0.0 {
            h = tape.dropout(h, self.cfg.head_dropout, derive_seed(seed, 0xd20, 0));
        }
        self.head_out.forward(ctx, h)
    }
}

/// Inverse-distance-weighted interpolation of coarse features onto fine
/// positions over the k nearest coarse nodes (w = 1 / (d^2 + 1e-8)).
pub fn feature_propagation<T: Scalar>(
    tape: &Tape<T>,
    coarse_positions: &[[f64; 3]],
    fine_positions: &[[f64; 3]],
    coarse_feats: Var,
    k: usize,
) -> Result<Var> {
    if coarse_positions.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "feature_propagation",
            detail: "no coarse nodes".into(),
        });
    }
    let k_eff = k.min(coarse_positions.len());
    let edges = knn_edges(fine_positions, coarse_positions, k_eff, false)?;
    let mut combos: Vec<Vec<(u32, T)>> = vec![Vec::with_capacity(k_eff); fine_positions.len()];
    for chunk in edges.chunks(k_eff) {
        let fine = chunk[0].0 as usize;
        let fp = fine_positions[fine];
        let mut weights = Vec::with_capacity(k_eff);
        let mut total = 0.0f64;
        for &(_, coarse) in chunk {
            let cp = coarse_positions[coarse as usize];
            let d2 = (fp[0] - cp[0]).powi(2) + (fp[1] - cp[1]).powi(2) + (fp[2] - cp[2]).powi(2);
            let w = 1.0 / (d2 + 1e-8);
            weights.push((coarse, w));
            total += w;
        }
        combos[fine] = weights
            .into_iter()
            .map(|(coarse, w)| (coarse, T::from_f64(w / total)))
            .collect();
    }
    tape.linear_combine_rows(coarse_feats, Rc::new(combos))
}

/// Expected level sizes floor(N * ratio^s) for s = 0..stages.
pub fn hierarchy_schedule(n: usize, ratio: f64, stages: usize) -> Vec<usize> {
    let mut sizes = vec![n];
    let mut cur = n;
    for _ in 0..stages {
        cur = (((cur as f64) * ratio + 1e-9).floor() as usize).max(1);
        sizes.push(cur);
    }
    sizes
}

const CKPT_MAGIC: &[u8; 5] = b"LMSC1";

/// Trained model state: architecture config plus named parameter and
/// buffer blobs with optimizer state.
pub struct Checkpoint {
    pub config: ArchConfig,
    pub store: ParamStore<f32>,
}

fn write_blob<W: Write>(w: &mut W, data: &[f32]) -> Result<()> {
    w.write_all(&(data.len() as u32).to_le_bytes())?;
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_blob<R: Read>(r: &mut R) -> Result<Vec<f32>> {
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let len = u32::from_le_bytes(b4) as usize;
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        r.read_exact(&mut b4)?;
        out.push(f32::from_le_bytes(b4));
    }
    Ok(out)
}

fn write_name<W: Write>(w: &mut W, name: &str) -> Result<()> {
    let bytes = name.as_bytes();
    w.write_all(&(bytes.len() as u16).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_name<R: Read>(r: &mut R) -> Result<String> {
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2)?;
    let len = u16::from_le_bytes(b2) as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::BadCheckpoint("non-utf8 name".into()))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(CKPT_MAGIC)?;
    let json = serde_json::to_vec(&ckpt.config)
        .map_err(|e| Error::BadCheckpoint(format!("config serialize: {e}")))?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&ckpt.store.step.to_le_bytes())?;
    w.write_all(&(ckpt.store.params.len() as u32).to_le_bytes())?;
    for (name, entry) in &ckpt.store.params {
        write_name(&mut w, name)?;
        let shape = entry.value.shape();
        w.write_all(&(shape.len() as u8).to_le_bytes())?;
        for &dim in shape {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        write_blob(&mut w, entry.value.data())?;
        write_blob(&mut w, entry.m.data())?;
        write_blob(&mut w, entry.v.data())?;
    }
    w.write_all(&(ckpt.store.bn.len() as u32).to_le_bytes())?;
    for (name, stats) in &ckpt.store.bn {
        write_name(&mut w, name)?;
        write_blob(&mut w, &stats.mean)?;
        write_blob(&mut w, &stats.var)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::BadCheckpoint("bad magic".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let json_len = u32::from_le_bytes(b4) as usize;
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json)?;
    let config: ArchConfig = serde_json::from_slice(&json)
        .map_err(|e| Error::BadCheckpoint(format!("config parse: {e}")))?;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let step = u64::from_le_bytes(b8);
    r.read_exact(&mut b4)?;
    let n_params = u32::from_le_bytes(b4) as usize;
    let mut store = ParamStore::<f32>::new();
    store.step = step;
    for _ in 0..n_params {
        let name = read_name(&mut r)?;
        let mut b1 = [0u8; 1];
        r.read_exact(&mut b1)?;
        let ndim = b1[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            r.read_exact(&mut b4)?;
            shape.push(u32::from_le_bytes(b4) as usize);
        }
        let value = Tensor::new(shape.clone(), read_blob(&mut r)?)
            .map_err(|_| Error::BadCheckpoint(format!("blob shape mismatch for {name}")))?;
        let m = Tensor::new(shape.clone(), read_blob(&mut r)?)
            .map_err(|_| Error::BadCheckpoint(format!("moment shape mismatch for {name}")))?;
        let v = Tensor::new(shape, read_blob(&mut r)?)
            .map_err(|_| Error::BadCheckpoint(format!("moment shape mismatch for {name}")))?;
        store.add_param(&name, value);
        let entry = store.params.get_mut(&name).expect("just inserted");
        entry.m = m;
        entry.v = v;
    }
    r.read_exact(&mut b4)?;
    let n_bn = u32::from_le_bytes(b4) as usize;
    for _ in 0..n_bn {
        let name = read_name(&mut r)?;
        let mean = read_blob(&mut r)?;
        let var = read_blob(&mut r)?;
        store.bn.insert(name, BnStats { mean, var });
    }
    Ok(Checkpoint { config, store })
}
