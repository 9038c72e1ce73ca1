//! Epoch loop, validation-based model selection, and evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::metrics::{binarize, case_metrics, BinaryMask, MetricsReport};
use crate::model::Network;
use crate::tensor::{Scalar, Tensor};
use crate::train::adamw::{adamw_step, OptimizerState, TrainConfig};
use crate::train::augment::augment_hflip;
use crate::train::data::{Dataset, Sample};

/// Probability above which a pixel is foreground.
pub const THRESHOLD: f64 = 0.5;
const EVAL_BATCH: usize = 8;

/// One row of the training curves. Undefined validation values are NaN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based
    pub epoch: usize,
    pub train_loss: f64,
    pub val_iou: f64,
    pub val_hd95: f64,
    pub val_fn: f64,
}

pub const CURVES_HEADER: &str = "epoch,train_loss,val_iou,val_hd95,val_fn";

fn field(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

pub fn curves_to_csv(records: &[EpochRecord]) -> String {
    let mut s = format!("{CURVES_HEADER}\n");
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.epoch,
            field(r.train_loss),
            field(r.val_iou),
            field(r.val_hd95),
            field(r.val_fn)
        );
    }
    s
}

pub fn curves_from_csv(text: &str) -> Result<Vec<EpochRecord>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CURVES_HEADER) {
        return Err(Error::Format(format!("curves must start with `{CURVES_HEADER}`")));
    }
    let num = |s: &str| -> Result<f64> {
        if s.is_empty() {
            Ok(f64::NAN)
        } else {
            s.parse().map_err(|_| Error::Format(format!("bad number {s:?} in curves")))
        }
    };
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.trim().split(',').collect();
            let &[e, loss, iou, hd, fnr] = f.as_slice() else {
                return Err(Error::Format(format!("curve row {l:?} needs 5 fields")));
            };
            Ok(EpochRecord {
                epoch: e.parse().map_err(|_| Error::Format(format!("bad epoch {e:?}")))?,
                train_loss: num(loss)?,
                val_iou: num(iou)?,
                val_hd95: num(hd)?,
                val_fn: num(fnr)?,
            })
        })
        .collect()
}

/// Everything needed to continue training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    pub params: ParamStore<T>,
    pub optimizer: OptimizerState<T>,
    /// Completed epochs.
    pub epoch: usize,
    pub best_params: ParamStore<T>,
    /// 0 until the first epoch completes.
    pub best_epoch: usize,
    pub best_val_iou: f64,
    pub curves: Vec<EpochRecord>,
}

impl<T: Scalar> TrainState<T> {
    pub fn fresh(params: ParamStore<T>) -> Self {
        TrainState {
            optimizer: OptimizerState::new(&params),
            best_params: params.clone(),
            params,
            epoch: 0,
            best_epoch: 0,
            best_val_iou: f64::NEG_INFINITY,
            curves: Vec::new(),
        }
    }

    /// Last-epoch parameters, optimizer moments and counters as checkpoint entries.
    pub fn to_entries(&self) -> BTreeMap<String, Tensor<T>> {
        let mut out: BTreeMap<String, Tensor<T>> = self.params.as_map().clone();
        for (k, t) in &self.optimizer.m {
            out.insert(format!("optim.m.{k}"), t.clone());
        }
        for (k, t) in &self.optimizer.v {
            out.insert(format!("optim.v.{k}"), t.clone());
        }
        let counter = |v: u64| Tensor::scalar(T::from_f64_lossy(v as f64));
        out.insert("optim.t".into(), counter(self.optimizer.t));
        out.insert("train.epoch".into(), counter(self.epoch as u64));
        out.insert("train.best_epoch".into(), counter(self.best_epoch as u64));
        out
    }

    /// Inverse of [`to_entries`](Self::to_entries); best parameters and curves are supplied separately.
    pub fn from_entries(
        mut entries: BTreeMap<String, Tensor<T>>,
        best_params: ParamStore<T>,
        curves: Vec<EpochRecord>,
    ) -> Result<Self> {
        let mut take_counter = |name: &str| -> Result<u64> {
            let t = entries
                .remove(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
            let v = t.data().first().map(|v| v.to_f64_lossy()).unwrap_or(f64::NAN);
            if t.numel() != 1 || v < 0.0 || v.fract() != 0.0 {
                return Err(Error::Format(format!("checkpoint entry {name} is not a counter")));
            }
            Ok(v as u64)
        };
        let t = take_counter("optim.t")?;
        let epoch = take_counter("train.epoch")? as usize;
        let best_epoch = take_counter("train.best_epoch")? as usize;
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        let mut params = BTreeMap::new();
        for (k, t) in entries {
            if let Some(name) = k.strip_prefix("optim.m.") {
                m.insert(name.to_string(), t);
            } else if let Some(name) = k.strip_prefix("optim.v.") {
                v.insert(name.to_string(), t);
            } else {
                params.insert(k, t);
            }
        }
        let params = ParamStore::from_map(params);
        let optimizer = OptimizerState { m, v, t };
        optimizer.check_against(&params)?;
        if curves.len() != epoch {
            return Err(Error::Format(format!(
                "checkpoint is at epoch {epoch} but {} curve rows were supplied",
                curves.len()
            )));
        }
        // taken from the curves so the selection threshold keeps full precision
        let best_val_iou = match best_epoch {
            0 => f64::NEG_INFINITY,
            e if e <= epoch => curves[e - 1].val_iou,
            e => return Err(Error::Format(format!("best epoch {e} is beyond epoch {epoch}"))),
        };
        Ok(TrainState {
            params,
            optimizer,
            epoch,
            best_params,
            best_epoch,
            best_val_iou,
            curves,
        })
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

fn stack_batch<T: Scalar>(samples: &[Sample<T>]) -> Result<(Tensor<T>, Tensor<T>)> {
    let images: Vec<&Tensor<T>> = samples.iter().map(|s| &s.image).collect();
    let masks: Vec<&Tensor<T>> = samples.iter().map(|s| &s.mask).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}

/// Runs the remaining epochs of `cfg` from `state`, calling `on_epoch` after each.
///
/// Epoch `e` draws its shuffle order and flips from a stream keyed by
/// `(cfg.seed, e)`, so a resumed run follows the same trajectory.
pub fn train<T: Scalar>(
    network: &Network,
    data: &Dataset<T>,
    cfg: &TrainConfig,
    mut state: TrainState<T>,
    mut on_epoch: impl FnMut(&TrainState<T>) -> Result<()>,
) -> Result<TrainState<T>> {
    cfg.validate()?;
    data.check_disjoint()?;
    if data.train.is_empty() {
        return Err(Error::Value("training split is empty".into()));
    }
    state.params.check_against(&network.param_defs())?;
    let param_count = state.params.count_params();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch + 1;
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Sample<T>> = chunk
                .iter()
                .map(|&i| augment_hflip(&data.train[i], cfg.augment_hflip_prob, &mut rng))
                .collect();
            let (x, y) = stack_batch(&batch)?;
            let mut tape = Tape::new();
            let bound = state.params.bind(&mut tape, true);
            let input = tape.constant(x);
            let out = network.forward(&mut tape, &bound, input)?;
            let prob = tape.sigmoid(out.logits);
            let loss = tape.dice_loss(prob, &y)?;
            let loss_value = tape.value(loss).data()[0].to_f64_lossy();
            if !loss_value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    detail: format!("loss is {loss_value}"),
                });
            }
            let mut grads = tape.backward(loss)?;
            let grads = bound.gradients(&mut grads);
            if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    detail: format!("non-finite gradient for {name}"),
                });
            }
            adamw_step(&mut state.params, &grads, &mut state.optimizer, cfg)?;
            loss_sum += loss_value;
            steps += 1;
        }
        let val = if data.val.is_empty() {
            None
        } else {
            Some(evaluate(network, &state.params, &data.val, param_count)?)
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / steps as f64,
            val_iou: val.as_ref().map_or(f64::NAN, |r| r.iou.mean),
            val_hd95: val.as_ref().map_or(f64::NAN, |r| r.hd95.mean),
            val_fn: val.as_ref().map_or(f64::NAN, |r| r.fn_rate.mean),
        };
        // Without a validation split the latest epoch is kept.
        if val.is_none() || state.best_epoch == 0 || record.val_iou > state.best_val_iou {
            state.best_params = state.params.clone();
            state.best_epoch = epoch;
            state.best_val_iou = record.val_iou;
        }
        state.curves.push(record);
        state.epoch = epoch;
        on_epoch(&state)?;
    }
    Ok(state)
}

/// Foreground probabilities `[1, H, W]` per sample.
pub fn predict_probs<T: Scalar>(
    network: &Network,
    params: &ParamStore<T>,
    samples: &[Sample<T>],
) -> Result<Vec<Tensor<T>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let images: Vec<&Tensor<T>> = chunk.iter().map(|s| &s.image).collect();
        let logits = network.predict(params, &Tensor::stack(&images)?)?;
        let [_, c, h, w] = logits.dims4()?;
        if c != 1 {
            return Err(Error::Shape(format!("binary evaluation needs one output channel, got {c}")));
        }
        let probs = logits.map(crate::autograd::stable_sigmoid);
        for (i, _) in chunk.iter().enumerate() {
            let plane = probs.data()[i * h * w..(i + 1) * h * w].to_vec();
            out.push(Tensor::from_vec(vec![1, h, w], plane)?);
        }
    }
    Ok(out)
}

/// Predicted and ground-truth masks per sample.
pub fn predict_masks<T: Scalar>(
    network: &Network,
    params: &ParamStore<T>,
    samples: &[Sample<T>],
) -> Result<Vec<(BinaryMask, BinaryMask)>> {
    let probs = predict_probs(network, params, samples)?;
    samples
        .iter()
        .zip(probs)
        .map(|(s, p)| {
            let (h, w) = (s.height(), s.width());
            Ok((binarize(p.data(), h, w, THRESHOLD)?, BinaryMask::from_tensor(&s.mask, h, w)?))
        })
        .collect()
}

pub fn evaluate<T: Scalar>(
    network: &Network,
    params: &ParamStore<T>,
    samples: &[Sample<T>],
    param_count: usize,
) -> Result<MetricsReport> {
    let masks = predict_masks(network, params, samples)?;
    let cases = samples
        .iter()
        .zip(&masks)
        .map(|(s, (pred, gt))| case_metrics(s.id.clone(), pred, gt))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_cases(cases, param_count))
}
