//! Segmentation network, its ablations, training and probes.
//!
//! Pipeline for one cloud:
//!
//! 1. kNN patches `(x_j - x_i, x_i)` -> VN-ReLU -> mean over neighbours,
//!    then further VN-ReLU layers per point.
//! 2. Optionally one broadcast channel carrying the unit symmetry direction.
//! 3. Optionally cross-product attention over points on those features.
//! 4. Two orientation-aware blocks: a direction field `J = W_j H` feeding the
//!    complex linear layer (or a plain VN linear map in the ablations),
//!    followed by VN-ReLU.
//! 5. Invariant layer and a pointwise affine head with two logits.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, OptimState, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{
    embed_neighbors, knn, mirror_residual, norm, random_o3, random_o3_with, scale, PointCloud,
    TransformO3, Vec3,
};
use crate::layers::{
    broadcast_points, complex_linear, cross_attention, ATTENTION_EPS, vn_global_mean, vn_invariant, vn_linear,
    vn_mean_pool, vn_relu, ComplexWeights,
};
use crate::symmetry::planar_symmetry_direction;

/// Which components are wired into the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Symmetry channel, attention and complex linear layers.
    #[serde(rename = "OAVNN")]
    Oavnn,
    /// Plain vector neurons: no symmetry channel, no attention, no complex layers.
    #[serde(rename = "VNN")]
    Vnn,
    /// Symmetry channel and attention; VN linear maps in place of complex layers.
    ShellOnly,
    /// Attention and complex layers; no symmetry channel.
    ComplexOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Oavnn,
        Variant::Vnn,
        Variant::ShellOnly,
        Variant::ComplexOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Oavnn => "OAVNN",
            Variant::Vnn => "VNN",
            Variant::ShellOnly => "ShellOnly",
            Variant::ComplexOnly => "ComplexOnly",
        }
    }

    pub fn uses_symmetry(self) -> bool {
        matches!(self, Variant::Oavnn | Variant::ShellOnly)
    }

    pub fn uses_attention(self) -> bool {
        !matches!(self, Variant::Vnn)
    }

    pub fn uses_complex(self) -> bool {
        matches!(self, Variant::Oavnn | Variant::ComplexOnly)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant {:?}", s)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub k_neighbors: usize,
    pub n_shells: usize,
    /// Patch layer width followed by per-point encoder widths.
    pub encoder_widths: Vec<usize>,
    /// Width of both orientation-aware blocks.
    pub block_width: usize,
    pub attention_width: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Augment with reflections as well as rotations.
    pub improper_augmentation: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Oavnn,
            k_neighbors: 10,
            n_shells: 4,
            encoder_widths: vec![16, 32],
            block_width: 32,
            attention_width: 8,
            seed: 0,
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 4,
            improper_augmentation: false,
        }
    }
}

impl ModelConfig {
    pub fn with_variant(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return bad(format!("encoder widths must be non-empty and >= 1: {:?}", self.encoder_widths));
        }
        if self.block_width == 0 {
            return bad("block_width must be >= 1".into());
        }
        if self.variant.uses_attention() && self.attention_width == 0 {
            return bad("attention_width must be >= 1 when attention is wired".into());
        }
        if self.k_neighbors == 0 {
            return bad("k_neighbors must be >= 1".into());
        }
        if self.n_shells < 2 {
            return bad("n_shells must be >= 2".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        Ok(())
    }

    fn point_width(&self) -> usize {
        *self.encoder_widths.last().expect("validated")
    }

    /// Channels entering the attention projections.
    fn attention_input(&self) -> usize {
        self.point_width() + usize::from(self.variant.uses_symmetry())
    }

    /// Channels entering the first orientation-aware block.
    fn block_input(&self) -> usize {
        let mut c = self.attention_input();
        if self.variant.uses_attention() {
            c += self.attention_width;
        }
        c
    }

    /// Parameter names and shapes in a fixed order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut prev = 2;
        for (i, &w) in self.encoder_widths.iter().enumerate() {
            out.push((format!("enc{i}.w"), vec![w, prev]));
            out.push((format!("enc{i}.u"), vec![w, prev]));
            prev = w;
        }
        if self.variant.uses_attention() {
            for p in ["q", "k", "v"] {
                out.push((format!("attn.{p}"), vec![self.attention_width, self.attention_input()]));
            }
        }
        let bw = self.block_width;
        for (b, cin) in [(0, self.block_input()), (1, bw)] {
            if self.variant.uses_complex() {
                out.push((format!("blk{b}.j"), vec![cin, cin]));
                for p in ["a", "b", "c"] {
                    out.push((format!("blk{b}.{p}"), vec![bw, cin]));
                }
            } else {
                out.push((format!("blk{b}.lin"), vec![bw, cin]));
            }
            out.push((format!("blk{b}.relu.w"), vec![bw, bw]));
            out.push((format!("blk{b}.relu.u"), vec![bw, bw]));
        }
        out.push(("inv.t".into(), vec![3, 2 * bw]));
        out.push(("head.w".into(), vec![2, 3 * bw]));
        out.push(("head.b".into(), vec![2]));
        out
    }
}

/// Named parameter tensors together with the configuration that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn has(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }
}

/// Randomly initialised parameters for `config`.
pub fn build_model(config: &ModelConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut tensors = BTreeMap::new();
    for (name, shape) in config.parameter_shapes() {
        let t = if name == "head.b" {
            Tensor::zeros(&shape)
        } else {
            let fan_in = shape[1] as f64;
            let dist = Normal::new(0.0, 1.0 / fan_in.sqrt()).expect("finite std");
            Tensor::from_fn(&shape, |_| dist.sample(&mut rng))
        };
        tensors.insert(name, t);
    }
    Ok(ModelParams {
        config: config.clone(),
        tensors,
    })
}

/// A cloud with its neighbourhoods and symmetry channel precomputed.
#[derive(Clone, Debug)]
pub struct PreparedCloud {
    pub points: Vec<Vec3>,
    pub neighbors: Vec<Vec<usize>>,
    /// Unit symmetry direction, or zero when degenerate or unused.
    pub symmetry: Vec3,
    pub labels: Option<Vec<u8>>,
}

impl PreparedCloud {
    pub fn new(cloud: &PointCloud, config: &ModelConfig) -> Result<Self> {
        let neighbors = knn(&cloud.points, config.k_neighbors)?;
        let symmetry = if config.variant.uses_symmetry() {
            planar_symmetry_direction(&cloud.points, config.n_shells)?
                .unit_direction
                .unwrap_or([0.0; 3])
        } else {
            [0.0; 3]
        };
        Ok(Self {
            points: cloud.points.clone(),
            neighbors,
            symmetry,
            labels: cloud.labels.clone(),
        })
    }

    /// The same cloud under `p -> p * M`. Neighbour ranks are distance based
    /// and carry over; the symmetry direction is a pseudovector and maps to
    /// `det(M) * (s * M)`.
    pub fn transformed(&self, t: &TransformO3) -> Self {
        Self {
            points: self.points.iter().map(|&p| t.apply(p)).collect(),
            neighbors: self.neighbors.clone(),
            symmetry: scale(t.apply(self.symmetry), t.det),
            labels: self.labels.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Parameters placed on a tape.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, params: &ModelParams, trainable: bool) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Self { vars }
    }

    fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

fn at_layer<T>(layer: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite(op) => Error::NonFinite(format!("{op} in layer {layer}")),
        other => other,
    })
}

/// Intermediate results of one forward pass.
pub struct Forward {
    /// Equivariant point features before the invariant layer, `[N, C, 3]`.
    pub features: Var,
    pub logits: Var,
    /// Attention queries and keys when attention is wired; see
    /// [`crate::autodiff::attention_weights`].
    pub attention: Option<(Var, Var)>,
}

/// Records the network on `tape` for one prepared cloud.
pub fn forward_tape(
    tape: &mut Tape,
    params: &BoundParams,
    config: &ModelConfig,
    cloud: &PreparedCloud,
) -> Result<Forward> {
    let n = cloud.len();
    let k = cloud.neighbors.first().map_or(0, Vec::len);
    let patches = tape.constant(embed_neighbors(&cloud.points, &cloud.neighbors));

    // Patch layer over [N, k, C, 3], pooled over neighbours.
    let mut x = at_layer("enc0", {
        let h = vn_relu(tape, patches, params.get("enc0.w")?, params.get("enc0.u")?);
        h.and_then(|h| vn_mean_pool(tape, h, 1))
    })?;
    debug_assert_eq!(tape.shape(x)[0], n);
    let _ = k;
    for i in 1..config.encoder_widths.len() {
        let name = format!("enc{i}");
        x = at_layer(
            &name,
            vn_relu(
                tape,
                x,
                params.get(&format!("{name}.w"))?,
                params.get(&format!("{name}.u"))?,
            ),
        )?;
    }

    let mut parts = vec![x];
    if config.variant.uses_symmetry() {
        let s = tape.constant(Tensor::new(vec![1, 1, 3], cloud.symmetry.to_vec())?);
        parts.push(broadcast_points(tape, s, n)?);
    }
    let feats = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat(&parts, 1)?
    };

    let mut attention = None;
    let h = if config.variant.uses_attention() {
        let out = at_layer("attention", {
            let q = vn_linear(tape, feats, params.get("attn.q")?)?;
            let kk = vn_linear(tape, feats, params.get("attn.k")?)?;
            let v = vn_linear(tape, feats, params.get("attn.v")?)?;
            attention = Some((q, kk));
            tape.cross_attention(q, kk, v, ATTENTION_EPS)
        })?;
        tape.concat(&[feats, out], 1)?
    } else {
        feats
    };

    let mut y = h;
    for b in 0..2 {
        let name = format!("blk{b}");
        y = at_layer(&name, {
            let mixed = if config.variant.uses_complex() {
                let j = vn_linear(tape, y, params.get(&format!("{name}.j"))?)?;
                let w = ComplexWeights {
                    a: params.get(&format!("{name}.a"))?,
                    b: params.get(&format!("{name}.b"))?,
                    c: params.get(&format!("{name}.c"))?,
                };
                complex_linear(tape, y, j, &w)?
            } else {
                vn_linear(tape, y, params.get(&format!("{name}.lin"))?)?
            };
            vn_relu(
                tape,
                mixed,
                params.get(&format!("{name}.relu.w"))?,
                params.get(&format!("{name}.relu.u"))?,
            )
        })?;
    }

    let logits = at_layer("head", {
        let inv = vn_invariant(tape, y, params.get("inv.t")?)?;
        let width = tape.shape(inv)[1];
        let inv = tape.reshape(inv, &[n, width, 1])?;
        let z = tape.channel_contract(params.get("head.w")?, inv)?;
        let z = tape.reshape(z, &[n, 2])?;
        tape.add(z, params.get("head.b")?)
    })?;

    Ok(Forward {
        features: y,
        logits,
        attention,
    })
}

/// Logits `[N, 2]` for a cloud.
pub fn forward_segmentation(params: &ModelParams, cloud: &PointCloud) -> Result<Tensor> {
    let prepared = PreparedCloud::new(cloud, &params.config)?;
    forward_prepared(params, &prepared)
}

pub fn forward_prepared(params: &ModelParams, cloud: &PreparedCloud) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, false);
    let f = forward_tape(&mut tape, &bound, &params.config, cloud)?;
    Ok(tape.value(f.logits).clone())
}

fn check_labels(labels: &[u8], n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Contract(format!("{} labels for {} points", labels.len(), n)));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Contract(format!("label {l} is not 0 or 1")));
    }
    Ok(())
}

/// Mean pointwise cross-entropy, recorded on the tape.
pub fn loss_ce_tape(tape: &mut Tape, logits: Var, labels: &[u8]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 2 || s[1] != 2 {
        return Err(Error::Shape {
            op: "loss_ce",
            detail: format!("logits {:?}", s),
        });
    }
    check_labels(labels, s[0])?;
    let logp = tape.log_softmax(logits, 1)?;
    let onehot = Tensor::from_fn(&s, |i| f64::from(u8::from(labels[i / 2] as usize == i % 2)));
    let onehot = tape.constant(onehot);
    let picked = tape.mul(logp, onehot)?;
    let total = tape.sum_all(picked)?;
    tape.scale(total, -1.0 / s[0] as f64)
}

pub fn loss_ce(logits: &Tensor, labels: &[u8]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = loss_ce_tape(&mut tape, l, labels)?;
    Ok(tape.value(loss).data()[0])
}

/// Argmax per row; ties go to class 0.
pub fn predict(logits: &Tensor) -> Vec<u8> {
    logits
        .data()
        .chunks(2)
        .map(|r| u8::from(r[1] > r[0]))
        .collect()
}

pub fn pointwise_accuracy(logits: &Tensor, labels: &[u8]) -> f64 {
    let pred = predict(logits);
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_accuracy: f64,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub test_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub records: Vec<EpochRecord>,
    pub wall_time_secs: f64,
}

impl Metrics {
    /// First epoch whose test accuracy reaches `threshold`.
    pub fn epochs_to(&self, threshold: f64) -> Option<usize> {
        self.records
            .iter()
            .find(|r| r.test_accuracy >= threshold)
            .map(|r| r.epoch)
    }

    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.records.last().map(|r| r.test_accuracy)
    }
}

fn prepare_all(set: &[PointCloud], config: &ModelConfig, what: &str) -> Result<Vec<PreparedCloud>> {
    if set.is_empty() {
        return Err(Error::Contract(format!("{what} set is empty")));
    }
    set.iter()
        .map(|c| {
            let labels = c
                .labels
                .as_ref()
                .ok_or_else(|| Error::Contract(format!("{what} cloud {} is unlabelled", c.name)))?;
            check_labels(labels, c.len())?;
            PreparedCloud::new(c, config)
        })
        .collect()
}

/// Mean accuracy and loss over prepared, labelled clouds.
pub fn evaluate_prepared(params: &ModelParams, set: &[PreparedCloud]) -> Result<(f64, f64)> {
    let mut acc = 0.0;
    let mut loss = 0.0;
    for c in set {
        let labels = c
            .labels
            .as_ref()
            .ok_or_else(|| Error::Contract("evaluation needs labels".into()))?;
        let logits = forward_prepared(params, c)?;
        acc += pointwise_accuracy(&logits, labels);
        loss += loss_ce(&logits, labels)?;
    }
    let n = set.len() as f64;
    Ok((acc / n, loss / n))
}

/// Test clouds as seen by [`train`]: each gets one random rotation drawn
/// from a stream seeded by `config.seed`.
pub fn prepare_test_set(config: &ModelConfig, test_set: &[PointCloud]) -> Result<Vec<PreparedCloud>> {
    let base = prepare_all(test_set, config, "test")?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7e57_7e57);
    Ok(base
        .iter()
        .map(|c| c.transformed(&random_o3_with(&mut rng, false)))
        .collect())
}

/// Fraction of points whose argmax logit matches the label, averaged over clouds.
pub fn evaluate(params: &ModelParams, dataset: &[PointCloud]) -> Result<f64> {
    let prepared = prepare_all(dataset, &params.config, "evaluation")?;
    Ok(evaluate_prepared(params, &prepared)?.0)
}

/// Train with Adam on randomly rotated copies of `train_set`, recording train
/// and test accuracy each epoch. Test clouds get one fixed random rotation each.
pub fn train(
    config: &ModelConfig,
    train_set: &[PointCloud],
    test_set: &[PointCloud],
) -> Result<(ModelParams, Metrics)> {
    train_with(config, train_set, test_set, |_| {})
}

pub fn train_with(
    config: &ModelConfig,
    train_set: &[PointCloud],
    test_set: &[PointCloud],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelParams, Metrics)> {
    train_until(config, train_set, test_set, |r| {
        on_epoch(r);
        true
    })
}

/// Like [`train_with`], but stops after any epoch for which `on_epoch`
/// returns `false`.
pub fn train_until(
    config: &ModelConfig,
    train_set: &[PointCloud],
    test_set: &[PointCloud],
    mut on_epoch: impl FnMut(&EpochRecord) -> bool,
) -> Result<(ModelParams, Metrics)> {
    let start = Instant::now();
    let mut params = build_model(config)?;
    let train_prep = prepare_all(train_set, config, "training")?;
    let test_prep = prepare_test_set(config, test_set)?;

    let names: Vec<String> = params.tensors.keys().cloned().collect();
    let mut state = OptimState::new(
        AdamConfig {
            lr: config.learning_rate,
            ..AdamConfig::default()
        },
        &params.tensors.values().cloned().collect::<Vec<_>>(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xa11_0e5);
    let mut metrics = Metrics::default();
    let mut order: Vec<usize> = (0..train_prep.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut acc_sum, mut loss_sum) = (0.0, 0.0);
        for (bi, batch) in order.chunks(config.batch_size).enumerate() {
            let mut grads: Vec<Tensor> = params.tensors.values().map(|t| Tensor::zeros(t.shape())).collect();
            for &idx in batch {
                let improper = config.improper_augmentation && rng.random_bool(0.5);
                let rot = random_o3_with(&mut rng, improper);
                let cloud = train_prep[idx].transformed(&rot);
                let labels = cloud.labels.as_deref().expect("checked in prepare_all");

                let mut tape = Tape::new();
                let bound = BoundParams::bind(&mut tape, &params, true);
                let f = forward_tape(&mut tape, &bound, config, &cloud).map_err(|e| Error::Divergence {
                    epoch,
                    batch: bi,
                    detail: e.to_string(),
                })?;
                let loss = loss_ce_tape(&mut tape, f.logits, labels)?;
                let lv = tape.value(loss).data()[0];
                if !lv.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        batch: bi,
                        detail: format!("loss is {lv}"),
                    });
                }
                acc_sum += pointwise_accuracy(tape.value(f.logits), labels);
                loss_sum += lv;
                let g = tape.backward(loss)?;
                let scale = 1.0 / batch.len() as f64;
                for (acc, name) in grads.iter_mut().zip(&names) {
                    let gi = g.wrt(bound.get(name)?);
                    acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, b)| *a += scale * b);
                }
            }
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    detail: "non-finite gradient".into(),
                });
            }
            let mut values: Vec<Tensor> = std::mem::take(&mut params.tensors).into_values().collect();
            adam_step(&mut values, &grads, &mut state)?;
            params.tensors = names.iter().cloned().zip(values).collect();
        }
        let n = train_prep.len() as f64;
        let (test_accuracy, test_loss) = evaluate_prepared(&params, &test_prep)?;
        let record = EpochRecord {
            epoch,
            train_accuracy: acc_sum / n,
            train_loss: loss_sum / n,
            test_accuracy,
            test_loss,
        };
        let go_on = on_epoch(&record);
        metrics.records.push(record);
        if !go_on {
            break;
        }
    }
    metrics.wall_time_secs = start.elapsed().as_secs_f64();
    Ok((params, metrics))
}

// ---------------------------------------------------------------------------
// Probes

/// How a stage is expected to respond to `X -> X * R`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Behavior {
    /// `f(X R) = f(X) R`.
    Equivariant,
    /// `f(X R) = f(X)`.
    Invariant,
    /// `f(X R) = det(R) f(X) R`.
    Pseudovector,
    /// Deliberately not equivariant under the probed transforms.
    Sensitive,
}

impl fmt::Display for Behavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Behavior::Equivariant => "equivariant",
            Behavior::Invariant => "invariant",
            Behavior::Pseudovector => "pseudovector",
            Behavior::Sensitive => "sensitive",
        })
    }
}

/// Stages that can be probed for equivariance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    VnLinear,
    VnRelu,
    VnMeanPool,
    VnInvariant,
    ComplexLinear,
    CrossAttention,
    SymmetryDirection,
    Model(Variant),
}

impl Stage {
    pub fn all() -> Vec<Stage> {
        let mut v = vec![
            Stage::VnLinear,
            Stage::VnRelu,
            Stage::VnMeanPool,
            Stage::VnInvariant,
            Stage::ComplexLinear,
            Stage::CrossAttention,
            Stage::SymmetryDirection,
        ];
        v.extend(Variant::ALL.map(Stage::Model));
        v
    }

    pub fn name(&self) -> String {
        match self {
            Stage::VnLinear => "vn_linear".into(),
            Stage::VnRelu => "vn_relu".into(),
            Stage::VnMeanPool => "vn_mean_pool".into(),
            Stage::VnInvariant => "vn_invariant".into(),
            Stage::ComplexLinear => "complex_linear".into(),
            Stage::CrossAttention => "cross_attention".into(),
            Stage::SymmetryDirection => "symmetry_direction".into(),
            Stage::Model(v) => format!("model_{}", v.as_str().to_lowercase()),
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        Stage::all().into_iter().find(|st| st.name() == s)
    }

    /// Expected response to the probed transforms.
    pub fn expected(&self, improper: bool) -> Behavior {
        match self {
            Stage::VnLinear | Stage::VnRelu | Stage::VnMeanPool => Behavior::Equivariant,
            Stage::VnInvariant | Stage::Model(Variant::Vnn) => Behavior::Invariant,
            Stage::SymmetryDirection => Behavior::Pseudovector,
            Stage::ComplexLinear | Stage::CrossAttention => {
                if improper {
                    Behavior::Sensitive
                } else {
                    Behavior::Equivariant
                }
            }
            Stage::Model(_) => {
                if improper {
                    Behavior::Sensitive
                } else {
                    Behavior::Invariant
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub stage: String,
    pub expected: Behavior,
    pub trials: usize,
    pub improper: bool,
    /// Max over trials of `|f(X R) - T(f(X))| / |f(X)|` against the
    /// equivariant (or invariant) prediction `T`.
    pub max_error: f64,
}

impl ProbeReport {
    /// Exact behaviours must stay under `tolerance`; sensitive stages must
    /// exceed `sensitivity`.
    pub fn passes(&self, tolerance: f64, sensitivity: f64) -> bool {
        match self.expected {
            Behavior::Sensitive => self.max_error > sensitivity,
            _ => self.max_error < tolerance,
        }
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn relative(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b) * (a.len() as f64).sqrt() / b.norm().max(1e-300)
}

/// Runs a stage on random inputs and on transformed inputs.
///
/// Layer stages use `N = 64` points and `C = 8` channels; model stages use
/// synthetic airplanes. With `improper`, half of the trials use reflections.
pub fn equivariance_probe(stage: Stage, trials: usize, improper: bool, seed: u64) -> Result<ProbeReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c) = (64, 8);
    let mut worst = 0.0f64;
    let mut model_cache: Option<(ModelParams, PreparedCloud)> = None;
    for trial in 0..trials {
        let reflect = improper && trial % 2 == 1;
        let r = random_o3_with(&mut rng, reflect);
        let mut w = |shape: &[usize]| rand_tensor(&mut rng, shape);
        let err = match stage {
            Stage::VnLinear | Stage::VnRelu | Stage::VnMeanPool | Stage::VnInvariant => {
                let x = if stage == Stage::VnMeanPool { w(&[n, 4, c, 3]) } else { w(&[n, c, 3]) };
                let wt = w(&[c, c]);
                let ut = w(&[c, c]);
                let tt = w(&[3, 2 * c]);
                let run = |x: &Tensor| -> Result<Tensor> {
                    let mut t = Tape::new();
                    let xv = t.constant(x.clone());
                    let (wv, uv, tv) = (t.constant(wt.clone()), t.constant(ut.clone()), t.constant(tt.clone()));
                    let y = match stage {
                        Stage::VnLinear => vn_linear(&mut t, xv, wv)?,
                        Stage::VnRelu => vn_relu(&mut t, xv, wv, uv)?,
                        Stage::VnMeanPool => vn_mean_pool(&mut t, xv, 1)?,
                        _ => vn_invariant(&mut t, xv, tv)?,
                    };
                    Ok(t.value(y).clone())
                };
                let base = run(&x)?;
                let moved = run(&r.apply_tensor(&x))?;
                let expect = if stage == Stage::VnInvariant { base } else { r.apply_tensor(&base) };
                relative(&moved, &expect)
            }
            Stage::ComplexLinear => {
                let (v, j) = (w(&[n, c, 3]), w(&[n, c, 3]));
                let (a, b, cc) = (w(&[c, c]), w(&[c, c]), w(&[c, c]));
                let run = |v: &Tensor, j: &Tensor| -> Result<Tensor> {
                    let mut t = Tape::new();
                    let (vv, jv) = (t.constant(v.clone()), t.constant(j.clone()));
                    let wts = ComplexWeights {
                        a: t.constant(a.clone()),
                        b: t.constant(b.clone()),
                        c: t.constant(cc.clone()),
                    };
                    let y = complex_linear(&mut t, vv, jv, &wts)?;
                    Ok(t.value(y).clone())
                };
                let base = run(&v, &j)?;
                let moved = run(&r.apply_tensor(&v), &r.apply_tensor(&j))?;
                relative(&moved, &r.apply_tensor(&base))
            }
            Stage::CrossAttention => {
                let (q, k, v) = (w(&[n, c, 3]), w(&[n, c, 3]), w(&[n, c, 3]));
                let run = |q: &Tensor, k: &Tensor, v: &Tensor| -> Result<Tensor> {
                    let mut t = Tape::new();
                    let (qv, kv, vv) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
                    let (y, _) = cross_attention(&mut t, qv, kv, vv)?;
                    Ok(t.value(y).clone())
                };
                let base = run(&q, &k, &v)?;
                let moved = run(&r.apply_tensor(&q), &r.apply_tensor(&k), &r.apply_tensor(&v))?;
                relative(&moved, &r.apply_tensor(&base))
            }
            Stage::SymmetryDirection => {
                let pts: Vec<Vec3> = (0..n)
                    .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                    .collect();
                let base = planar_symmetry_direction(&pts, 4)?.direction;
                let moved_pts: Vec<Vec3> = pts.iter().map(|&p| r.apply(p)).collect();
                let moved = planar_symmetry_direction(&moved_pts, 4)?.direction;
                let expect = scale(r.apply(base), r.det);
                norm(crate::geometry::sub(moved, expect)) / norm(base).max(1e-300)
            }
            Stage::Model(variant) => {
                if model_cache.is_none() {
                    let config = ModelConfig {
                        seed,
                        ..ModelConfig::with_variant(variant)
                    };
                    let params = build_model(&config)?;
                    let cloud = crate::shapes::gen_shape(&crate::shapes::ShapeSpec::new(
                        crate::shapes::ShapeKind::Airplane,
                        128,
                        seed,
                        0.0,
                    ))?;
                    // Probe on a generic pose so no point sits on a coordinate plane.
                    let cloud = crate::geometry::apply_transform(&cloud, &random_o3(seed ^ 0x5eed, false));
                    let prepared = PreparedCloud::new(&cloud, &config)?;
                    model_cache = Some((params, prepared));
                }
                let (params, base_cloud) = model_cache.as_ref().expect("just filled");
                let base = forward_prepared(params, base_cloud)?;
                // Recompute neighbourhoods and symmetry from the moved points.
                let moved_cloud = PointCloud::new(
                    base_cloud.points.iter().map(|&p| r.apply(p)).collect(),
                    None,
                    "probe",
                )?;
                let moved = forward_segmentation(params, &moved_cloud)?;
                relative(&moved, &base)
            }
        };
        worst = worst.max(err);
    }
    Ok(ProbeReport {
        stage: stage.name(),
        expected: stage.expected(improper),
        trials,
        improper,
        max_error: worst,
    })
}

/// Result of [`symmetry_ambiguity_demo`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityReport {
    /// `max_c |<g_c, n>|` over channels of the pooled feature `g`.
    pub perpendicular: f64,
    /// Frobenius norm of the pooled feature.
    pub feature_norm: f64,
}

impl AmbiguityReport {
    pub fn relative(&self) -> f64 {
        self.perpendicular / self.feature_norm.max(1e-300)
    }
}

/// Component of the network's pooled equivariant features along `normal`.
/// No symmetry requirement on the input.
pub fn perpendicular_component(params: &ModelParams, cloud: &PointCloud, normal: Vec3) -> Result<AmbiguityReport> {
    let nn = norm(normal);
    if !(nn > 0.0) {
        return Err(Error::Degenerate("plane normal is zero".into()));
    }
    let u = scale(normal, 1.0 / nn);
    let prepared = PreparedCloud::new(cloud, &params.config)?;
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, false);
    let f = forward_tape(&mut tape, &bound, &params.config, &prepared)?;
    let g = vn_global_mean(&mut tape, f.features)?;
    let g = tape.value(g);
    let perpendicular = g
        .data()
        .chunks(3)
        .map(|v| (v[0] * u[0] + v[1] * u[1] + v[2] * u[2]).abs())
        .fold(0.0, f64::max);
    Ok(AmbiguityReport {
        perpendicular,
        feature_norm: g.norm(),
    })
}

/// Pooled-feature component along the normal of an exact mirror plane.
/// For an O(3)-equivariant encoder it must vanish.
pub fn symmetry_ambiguity_demo(params: &ModelParams, cloud: &PointCloud, normal: Vec3) -> Result<AmbiguityReport> {
    let residual = mirror_residual(&cloud.points, normal);
    if residual > 1e-9 {
        return Err(Error::Contract(format!(
            "cloud is not mirror symmetric about the given plane (residual {:.3e})",
            residual
        )));
    }
    perpendicular_component(params, cloud, normal)
}

#[cfg(test)]
mod tests;
