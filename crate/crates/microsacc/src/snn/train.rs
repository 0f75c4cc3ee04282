//! Training: losses, single optimization steps, the full per-eye loop with
//! cosine-annealed Adam, history CSV, and best-validation checkpointing.

use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array4, Axis, NdFloat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{cosine_lr, Adam};
use super::checkpoint::{self, CheckpointMeta};
use super::lif::SpikeMode;
use super::model::{Model, ModelConfig};
use crate::dataset::{read_stream, DatasetManifest, Eye, Split};
use crate::error::{Error, Result};
use crate::flow::{bin_events, flow_targets, FarnebackParams, FlowField, VoxelGrid};
use crate::seeds;

/// Softmax cross-entropy over a batch; returns the mean loss and dL/dlogits.
pub fn softmax_cross_entropy<F: NdFloat>(
    logits: &Array2<F>,
    labels: &[u8],
) -> Result<(f64, Array2<F>)> {
    let (b, k) = logits.dim();
    if labels.len() != b {
        return Err(Error::domain("label count does not match batch"));
    }
    let mut dlogits = Array2::<F>::zeros((b, k));
    let mut loss = 0.0f64;
    let inv_b = F::from(1.0 / b as f64).expect("fits");
    for (i, &label) in labels.iter().enumerate() {
        if label as usize >= k {
            return Err(Error::domain(format!("label {label} out of range")));
        }
        let row = logits.index_axis(Axis(0), i);
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let exps: Vec<F> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: F = exps.iter().fold(F::zero(), |a, &b| a + b);
        let logp = (row[label as usize] - max).to_f64().expect("finite")
            - sum.to_f64().expect("finite").ln();
        loss -= logp;
        let mut drow = dlogits.index_axis_mut(Axis(0), i);
        for (j, e) in exps.iter().enumerate() {
            let p = *e / sum;
            let onehot = if j == label as usize { F::one() } else { F::zero() };
            drow[j] = (p - onehot) * inv_b;
        }
    }
    Ok((loss / b as f64, dlogits))
}

/// Mean squared flow error matching [`crate::flow::flow_loss`] semantics over
/// a `(B*(T-1), 2, H, W)` tensor: per field pair `(1/(H*W)) sum[(du)^2+(dv)^2]`,
/// averaged over pairs and batch. Returns the loss and dL/dpred.
pub fn flow_mse<F: NdFloat>(pred: &Array4<F>, target: &Array4<F>) -> Result<(f64, Array4<F>)> {
    if pred.dim() != target.dim() {
        return Err(Error::domain("flow prediction/target shapes differ"));
    }
    let (v, _, h, w) = pred.dim();
    let norm = (v * h * w) as f64;
    let mut loss = 0.0f64;
    let mut grad = Array4::<F>::zeros(pred.raw_dim());
    let scale = F::from(2.0 / norm).expect("fits");
    ndarray::Zip::from(&mut grad)
        .and(pred)
        .and(target)
        .for_each(|g, &p, &t| {
            let d = p - t;
            loss += (d * d).to_f64().expect("finite");
            *g = scale * d;
        });
    Ok((loss / norm, grad))
}

/// Losses from one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub class: f64,
    pub flow: f64,
}

/// One training step: forward, total loss `class + lambda * flow`, BPTT
/// backward, Adam update at `lr`.
pub fn train_step<F: NdFloat + Send + Sync>(
    model: &mut Model<F>,
    adam: &mut Adam<F>,
    lr: f64,
    input: &Array4<F>,
    labels: &[u8],
    flow_target: Option<&Array4<F>>,
    mode: SpikeMode,
) -> Result<StepLosses> {
    let lambda = model.config.lambda;
    let use_flow = flow_target.is_some() && lambda > 0.0;
    if model.arch.flow_head && lambda > 0.0 && flow_target.is_none() {
        return Err(Error::domain(
            "flow head enabled with lambda > 0 but no flow targets supplied",
        ));
    }
    let batch = labels.len();
    model.zero_grads();
    let (out, trace) = model.forward_train(input, batch, mode, use_flow)?;
    let (class_loss, dlogits) = softmax_cross_entropy(&out.logits, labels)?;
    let (flow_loss, dflow) = match (out.flow.as_ref(), flow_target) {
        (Some(pred), Some(tgt)) if use_flow => {
            let (l, mut g) = flow_mse(pred, tgt)?;
            let lam = F::from(lambda).expect("fits");
            g.mapv_inplace(|v| v * lam);
            (l, Some(g))
        }
        _ => (0.0, None),
    };
    model.backward(&trace, &dlogits, dflow.as_ref())?;
    adam.step(model.params_mut(), lr);
    Ok(StepLosses {
        total: class_loss + lambda * flow_loss,
        class: class_loss,
        flow: flow_loss,
    })
}

/// Compare analytic gradients of the total loss against central finite
/// differences for every parameter entry, in soft-spike mode. Returns the
/// worst relative error and the parameter holding it.
pub fn gradient_check(
    model: &mut Model<f64>,
    input: &Array4<f64>,
    labels: &[u8],
    flow_target: Option<&Array4<f64>>,
    h: f64,
) -> Result<(f64, String)> {
    let lambda = model.config.lambda;
    let batch = labels.len();
    let use_flow = flow_target.is_some() && lambda > 0.0;

    let loss_of = |model: &mut Model<f64>| -> Result<f64> {
        // Preserve BN running stats: training-mode forward updates them, and
        // repeated probes must all see the identical function.
        let saved = {
            let (rm, rv) = model.bn_state();
            (rm.to_vec(), rv.to_vec())
        };
        let (out, _trace) = model.forward_train(input, batch, SpikeMode::Soft, use_flow)?;
        {
            let (rm, rv) = model.bn_state_mut();
            *rm = saved.0;
            *rv = saved.1;
        }
        let (class_loss, _) = softmax_cross_entropy(&out.logits, labels)?;
        let flow_loss = match (out.flow.as_ref(), flow_target) {
            (Some(pred), Some(tgt)) if use_flow => flow_mse(pred, tgt)?.0,
            _ => 0.0,
        };
        Ok(class_loss + lambda * flow_loss)
    };

    // Analytic pass.
    model.zero_grads();
    let saved = {
        let (rm, rv) = model.bn_state();
        (rm.to_vec(), rv.to_vec())
    };
    let (out, trace) = model.forward_train(input, batch, SpikeMode::Soft, use_flow)?;
    {
        let (rm, rv) = model.bn_state_mut();
        *rm = saved.0;
        *rv = saved.1;
    }
    let (_, dlogits) = softmax_cross_entropy(&out.logits, labels)?;
    let dflow = match (out.flow.as_ref(), flow_target) {
        (Some(pred), Some(tgt)) if use_flow => {
            let (_, mut g) = flow_mse(pred, tgt)?;
            g.mapv_inplace(|v| v * lambda);
            Some(g)
        }
        _ => None,
    };
    model.backward(&trace, &dlogits, dflow.as_ref())?;
    let analytic: Vec<(String, Vec<f64>)> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.grad.iter().copied().collect()))
        .collect();

    let mut worst = (0.0f64, String::new());
    for (pi, (name, grads)) in analytic.iter().enumerate() {
        for ei in 0..grads.len() {
            let orig = model.params()[pi].value.as_slice().expect("contiguous")[ei];
            model.params_mut()[pi].value.as_slice_mut().expect("contiguous")[ei] = orig + h;
            let above = loss_of(model)?;
            model.params_mut()[pi].value.as_slice_mut().expect("contiguous")[ei] = orig - h;
            let below = loss_of(model)?;
            model.params_mut()[pi].value.as_slice_mut().expect("contiguous")[ei] = orig;
            let numeric = (above - below) / (2.0 * h);
            let a = grads[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{ei}]"));
            }
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSettings {
    pub enabled: bool,
    /// Max horizontal jitter in pixels (uniform in [-j, j]).
    pub jitter_px: u16,
    /// Per-event survival is Bernoulli(1 - drop_fraction).
    pub drop_fraction: f64,
}

impl Default for AugmentSettings {
    fn default() -> Self {
        AugmentSettings {
            enabled: false,
            jitter_px: 2,
            drop_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    /// Learning rate at the reference batch size.
    pub base_lr: f64,
    pub base_batch: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Cosine-annealing segment length, epochs.
    pub schedule_period: usize,
    pub eta_min: f64,
    pub seed: u64,
    pub augment: AugmentSettings,
    /// Permute training labels (control experiments).
    pub shuffle_labels: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 30,
            base_lr: 0.01,
            base_batch: 64,
            batch_size: 16,
            weight_decay: 1e-4,
            schedule_period: 10,
            eta_min: 0.0,
            seed: 42,
            augment: AugmentSettings::default(),
            shuffle_labels: false,
        }
    }
}

impl TrainSettings {
    /// Linear batch-size scaling of the learning rate.
    pub fn effective_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / self.base_batch as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub checkpoint_path: PathBuf,
    pub history_path: PathBuf,
}

/// One loaded sample: binned input, label, and the manifest digest that keys
/// its flow-target cache entry.
pub struct LoadedSample {
    pub grid: VoxelGrid,
    pub input: Array4<f32>,
    pub label: u8,
    pub digest: String,
}

/// Load and bin every sample of `(eye, split)` in manifest order.
pub fn load_split(
    manifest: &DatasetManifest,
    data_dir: &Path,
    eye: Eye,
    split: Split,
    t_bins: usize,
    window_ns: u64,
) -> Result<Vec<LoadedSample>> {
    let records: Vec<_> = manifest.records_for(eye, split).collect();
    records
        .par_iter()
        .map(|rec| {
            let sample = read_stream(&data_dir.join(&rec.path))?;
            let grid = bin_events(&sample.stream, t_bins, window_ns)?;
            let input = grid_to_input(&grid);
            Ok(LoadedSample {
                grid,
                input,
                label: rec.class_id,
                digest: rec.digest.clone(),
            })
        })
        .collect()
}

/// Voxel counts as model input, shape (T, 2, H, W).
pub fn grid_to_input(grid: &VoxelGrid) -> Array4<f32> {
    grid.counts.mapv(|c| c as f32)
}

fn fields_to_array(fields: &[FlowField]) -> Array4<f32> {
    let (h, w) = fields[0].dim();
    let mut out = Array4::<f32>::zeros((fields.len(), 2, h, w));
    for (i, f) in fields.iter().enumerate() {
        out.slice_mut(s![i, 0, .., ..]).assign(&f.u);
        out.slice_mut(s![i, 1, .., ..]).assign(&f.v);
    }
    out
}

fn array_to_fields(arr: &Array4<f32>) -> Vec<FlowField> {
    (0..arr.dim().0)
        .map(|i| FlowField {
            u: arr.slice(s![i, 0, .., ..]).to_owned(),
            v: arr.slice(s![i, 1, .., ..]).to_owned(),
        })
        .collect()
}

/// Flow targets for one sample, via the digest-keyed cache when available.
pub fn flow_targets_cached(
    grid: &VoxelGrid,
    params: &FarnebackParams,
    cache_dir: Option<&Path>,
    digest: &str,
) -> Result<Array4<f32>> {
    if let Some(dir) = cache_dir {
        let path = dir.join(format!("{digest}.evfl"));
        if path.is_file() {
            let fields = crate::flow::read_flow_cache(&path)?;
            if fields.len() == grid.t_bins() - 1
                && fields[0].dim() == (grid.height(), grid.width())
            {
                return Ok(fields_to_array(&fields));
            }
        }
        let fields = flow_targets(grid, params)?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        crate::flow::write_flow_cache(&path, &fields)?;
        Ok(fields_to_array(&fields))
    } else {
        Ok(fields_to_array(&flow_targets(grid, params)?))
    }
}

/// Horizontal jitter plus event-drop thinning on a binned input (and the
/// matching jitter on flow targets).
fn augment_sample(
    input: &Array4<f32>,
    flow: Option<&Array4<f32>>,
    cfg: &AugmentSettings,
    rng: &mut ChaCha8Rng,
) -> (Array4<f32>, Option<Array4<f32>>) {
    let jitter = if cfg.jitter_px > 0 {
        rng.random_range(-(cfg.jitter_px as i64)..=cfg.jitter_px as i64)
    } else {
        0
    };
    let shift_cols = |a: &Array4<f32>| -> Array4<f32> {
        if jitter == 0 {
            return a.clone();
        }
        let (d0, d1, h, w) = a.dim();
        let mut out = Array4::<f32>::zeros((d0, d1, h, w));
        for x in 0..w as i64 {
            let src = x - jitter;
            if src >= 0 && src < w as i64 {
                out.slice_mut(s![.., .., .., x as usize])
                    .assign(&a.slice(s![.., .., .., src as usize]));
            }
        }
        out
    };
    let mut input = shift_cols(input);
    let flow = flow.map(shift_cols);
    if cfg.drop_fraction > 0.0 {
        let keep = 1.0 - cfg.drop_fraction;
        for v in input.iter_mut() {
            let count = *v as u32;
            if count > 0 {
                let mut kept = 0u32;
                for _ in 0..count {
                    if rng.random_bool(keep) {
                        kept += 1;
                    }
                }
                *v = kept as f32;
            }
        }
    }
    (input, flow)
}

/// Assemble a batch input tensor (B*T, 2, H, W) from per-sample grids.
fn stack_batch(samples: &[&Array4<f32>]) -> Array4<f32> {
    let (t, c, h, w) = samples[0].dim();
    let mut out = Array4::<f32>::zeros((samples.len() * t, c, h, w));
    for (i, s) in samples.iter().enumerate() {
        out.slice_mut(s![i * t..(i + 1) * t, .., .., ..]).assign(s);
    }
    out
}

/// Train one per-eye model from the manifest's train split, validating each
/// epoch on the val split; saves the best-validation checkpoint and a history
/// CSV (epoch, lr, train_loss, val_loss, val_acc) under `out_dir`.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model_cfg: &ModelConfig,
    settings: &TrainSettings,
    window_ns: u64,
    farneback_params: &FarnebackParams,
    manifest: &DatasetManifest,
    data_dir: &Path,
    eye: Eye,
    flow_cache_dir: Option<&Path>,
    out_dir: &Path,
) -> Result<TrainReport> {
    model_cfg.validate()?;
    let train_data = load_split(manifest, data_dir, eye, Split::Train, model_cfg.t_bins, window_ns)?;
    let val_data = load_split(manifest, data_dir, eye, Split::Val, model_cfg.t_bins, window_ns)?;
    if train_data.is_empty() || val_data.is_empty() {
        return Err(Error::domain("train and val splits must be non-empty"));
    }

    let use_flow = model_cfg.preset.flow_head() && model_cfg.lambda > 0.0;
    let flow_data: Vec<Option<Array4<f32>>> = if use_flow {
        train_data
            .par_iter()
            .map(|s| flow_targets_cached(&s.grid, farneback_params, flow_cache_dir, &s.digest).map(Some))
            .collect::<Result<Vec<_>>>()?
    } else {
        train_data.iter().map(|_| None).collect()
    };

    let mut labels: Vec<u8> = train_data.iter().map(|s| s.label).collect();
    if settings.shuffle_labels {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::mix(settings.seed, &[30]));
        for i in (1..labels.len()).rev() {
            let j = rng.random_range(0..=i);
            labels.swap(i, j);
        }
    }

    let mut model: Model<f32> = Model::new(model_cfg.clone())?;
    model.init(settings.seed);
    let mut adam = Adam::new(model.params(), settings.weight_decay);
    let eff_lr = settings.effective_lr();

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut history: Vec<EpochStats> = Vec::with_capacity(settings.epochs);
    let mut best: Option<(usize, f64, Vec<ndarray::ArrayD<f32>>, Vec<ndarray::Array1<f32>>, Vec<ndarray::Array1<f32>>)> =
        None;

    let mut order: Vec<usize> = (0..train_data.len()).collect();
    for epoch in 0..settings.epochs {
        let lr = cosine_lr(eff_lr, settings.eta_min, epoch, settings.schedule_period);
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::mix(settings.seed, &[10, epoch as u64]));
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(settings.batch_size) {
            let mut inputs: Vec<Array4<f32>> = Vec::with_capacity(chunk.len());
            let mut flows: Vec<Array4<f32>> = Vec::new();
            let mut batch_labels: Vec<u8> = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (inp, fl) = if settings.augment.enabled {
                    let mut arng = ChaCha8Rng::seed_from_u64(seeds::mix(
                        settings.seed,
                        &[20, epoch as u64, i as u64],
                    ));
                    augment_sample(
                        &train_data[i].input,
                        flow_data[i].as_ref(),
                        &settings.augment,
                        &mut arng,
                    )
                } else {
                    (train_data[i].input.clone(), flow_data[i].clone())
                };
                inputs.push(inp);
                if let Some(f) = fl {
                    flows.push(f);
                }
                batch_labels.push(labels[i]);
            }
            let input_refs: Vec<&Array4<f32>> = inputs.iter().collect();
            let batch_input = stack_batch(&input_refs);
            let flow_target = if use_flow {
                let refs: Vec<&Array4<f32>> = flows.iter().collect();
                Some(stack_batch(&refs))
            } else {
                None
            };
            let losses = train_step(
                &mut model,
                &mut adam,
                lr,
                &batch_input,
                &batch_labels,
                flow_target.as_ref(),
                SpikeMode::Hard,
            )?;
            epoch_loss += losses.total;
            steps += 1;
        }
        let train_loss = epoch_loss / steps.max(1) as f64;

        let (val_loss, val_acc) = evaluate_split(&model, &val_data, settings.batch_size)?;
        eprintln!(
            "epoch {epoch:3}  lr {lr:.5}  train {train_loss:.4}  val {val_loss:.4}  acc {:.2}%",
            val_acc * 100.0
        );
        history.push(EpochStats {
            epoch,
            lr,
            train_loss,
            val_loss,
            val_acc,
        });
        let improved = best.as_ref().map(|b| val_acc > b.1).unwrap_or(true);
        if improved {
            let params = model.params().iter().map(|p| p.value.clone()).collect();
            let (rm, rv) = model.bn_state();
            best = Some((epoch, val_acc, params, rm.to_vec(), rv.to_vec()));
        }
    }

    let (best_epoch, best_val_acc, best_params, best_rm, best_rv) =
        best.expect("at least one epoch");
    for (p, v) in model.params_mut().iter_mut().zip(best_params) {
        p.value = v;
    }
    {
        let (rm, rv) = model.bn_state_mut();
        *rm = best_rm;
        *rv = best_rv;
    }

    let checkpoint_path = out_dir.join(format!("{}-{}.msck", model_cfg.preset, eye.dir_name()));
    checkpoint::save(
        &model,
        &CheckpointMeta {
            config: model_cfg.clone(),
            eye: Some(eye),
            window_ns,
            seed: settings.seed,
            best_epoch,
            best_val_acc,
        },
        &checkpoint_path,
    )?;

    let history_path = out_dir.join(format!("history-{}.csv", eye.dir_name()));
    let mut csv = String::from("epoch,lr,train_loss,val_loss,val_acc\n");
    for h in &history {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            h.epoch, h.lr, h.train_loss, h.val_loss, h.val_acc
        ));
    }
    std::fs::write(&history_path, csv).map_err(|e| Error::io(&history_path, e))?;

    Ok(TrainReport {
        history,
        best_epoch,
        best_val_acc,
        checkpoint_path,
        history_path,
    })
}

/// Mean cross-entropy and accuracy of `model` over loaded samples.
pub fn evaluate_split(
    model: &Model<f32>,
    data: &[LoadedSample],
    batch_size: usize,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::domain("empty evaluation split"));
    }
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<&Array4<f32>> = chunk.iter().map(|sample| &sample.input).collect();
        let input = stack_batch(&refs);
        let labels: Vec<u8> = chunk.iter().map(|sample| sample.label).collect();
        let logits = model.forward_eval(&input, chunk.len())?;
        let (l, _) = softmax_cross_entropy(&logits, &labels)?;
        loss_sum += l * chunk.len() as f64;
        for (i, &label) in labels.iter().enumerate() {
            let row = logits.index_axis(Axis(0), i);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(j, _)| j)
                .expect("nonempty row");
            if argmax == label as usize {
                correct += 1;
            }
        }
    }
    Ok((loss_sum / data.len() as f64, correct as f64 / data.len() as f64))
}
