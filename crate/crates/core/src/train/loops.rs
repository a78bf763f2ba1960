//! Pre-training, fine-tuning, evaluation and the pooling benchmark.
//!
//! All randomness in a step (masks, mask noise, dropout, random pooling)
//! comes from [`step_rng`], and the batch for a step is a pure function of
//! the data seed and the step number, so a run resumed from a checkpoint
//! continues exactly as an uninterrupted one would.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autograd::Graph;
use crate::bestrq::{self, PretrainBatchLoss, QuantizerState};
use crate::config::RunConfig;
use crate::corpus::{FeatureSet, Vocabulary};
use crate::encoder::{self, EncoderConfig};
use crate::frontend::LogMelFrames;
use crate::model::{stack_frames, SpeakerModel};
use crate::params::{apply_buffer_updates, ParamStore, Session};
use crate::pooling::PoolingConfig;
use crate::tensor::Tensor;
use crate::train::{lr_at, AdamW, Checkpoint, ScheduleConfig};
use crate::{Error, Result};

pub const PRETRAIN_CHECKPOINT: &str = "pretrain.ckpt";
pub const PRETRAIN_METRICS: &str = "pretrain_metrics.jsonl";
pub const FINETUNE_CHECKPOINT: &str = "finetune.ckpt";
pub const FINETUNE_METRICS: &str = "finetune_metrics.jsonl";
pub const FINETUNE_EVAL: &str = "finetune_eval.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";

const EVAL_BATCH: usize = 16;

/// One optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub acc: f64,
}

/// Accuracies after one fine-tuning epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: u64,
    pub step: u64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
}

/// Append-only JSON-lines writer.
pub struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsLog {
    pub fn create(path: impl AsRef<Path>, append: bool) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            out: BufWriter::new(file),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// The rng for step `step` of a run seeded with `seed`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Member indices of the batch used at 1-based `step`.
fn batch_for_step(n: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch_size) as u64;
    let g = step - 1;
    let order = crate::corpus::epoch_order(n, seed, g / per_epoch);
    let start = (g % per_epoch) as usize * batch_size;
    order[start..(start + batch_size).min(n)].to_vec()
}

fn schedule_for(base: &ScheduleConfig, total: u64) -> Result<ScheduleConfig> {
    let s = ScheduleConfig {
        total_steps: total,
        ..*base
    };
    s.validate()?;
    Ok(s)
}

fn insert_store(ckpt: &mut Checkpoint, store: &ParamStore, optimizer: &AdamW) {
    for (k, v) in store.params() {
        ckpt.tensors.insert(format!("param/{k}"), v.clone());
    }
    for (k, v) in store.buffers() {
        ckpt.tensors.insert(format!("buffer/{k}"), v.clone());
    }
    for (k, v) in &optimizer.state.first {
        ckpt.tensors.insert(format!("adam.m/{k}"), v.clone());
    }
    for (k, v) in &optimizer.state.second {
        ckpt.tensors.insert(format!("adam.v/{k}"), v.clone());
    }
}

fn restore_store(ckpt: &Checkpoint) -> ParamStore {
    let mut store = ParamStore::new();
    for (k, v) in ckpt.group("param") {
        store.insert(k, v.clone());
    }
    for (k, v) in ckpt.group("buffer") {
        store.insert_buffer(k, v.clone());
    }
    store
}

fn restore_optimizer(ckpt: &Checkpoint, config: &RunConfig) -> Result<AdamW> {
    let mut opt = AdamW::new(config.optimizer);
    opt.state.step = meta_u64(ckpt, "optimizer_step")?;
    opt.state.first = ckpt.group("adam.m").map(|(k, v)| (k.to_string(), v.clone())).collect();
    opt.state.second = ckpt.group("adam.v").map(|(k, v)| (k.to_string(), v.clone())).collect();
    Ok(opt)
}

fn meta<'a>(ckpt: &'a Checkpoint, key: &str) -> Result<&'a serde_json::Value> {
    ckpt.metadata
        .get(key)
        .ok_or_else(|| Error::Checkpoint(format!("metadata lacks `{key}`")))
}

fn meta_u64(ckpt: &Checkpoint, key: &str) -> Result<u64> {
    meta(ckpt, key)?
        .as_u64()
        .ok_or_else(|| Error::Checkpoint(format!("metadata `{key}` is not an integer")))
}

fn expect_kind(ckpt: &Checkpoint, kind: &str) -> Result<()> {
    match meta(ckpt, "kind")?.as_str() {
        Some(k) if k == kind => Ok(()),
        other => Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {other:?}"))),
    }
}

fn check_finite(loss: f64, step: u64, lr: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "loss became {loss} at step {step} (lr {lr:.3e}); lower the learning rate or resume from an earlier checkpoint"
        )))
    }
}

/// Clean features together with their quantizer labels.
pub struct PretrainData {
    pub features: FeatureSet,
    pub labels: Vec<Vec<usize>>,
}

impl PretrainData {
    pub fn new(features: FeatureSet, quantizer: &QuantizerState) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Empty("no utterances to pre-train on".into()));
        }
        let labels = features
            .frames
            .iter()
            .map(|f| bestrq::quantize_targets(f, quantizer))
            .collect::<Result<_>>()?;
        Ok(Self { features, labels })
    }
}

pub struct Pretrainer {
    pub config: RunConfig,
    pub encoder: EncoderConfig,
    pub store: ParamStore,
    pub quantizer: QuantizerState,
    pub optimizer: AdamW,
    /// Completed optimizer steps.
    pub step: u64,
}

impl Pretrainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let encoder = config.encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        encoder::init_params(&encoder, &mut rng, &mut store)?;
        bestrq::init_head(&mut store, &mut rng, encoder.hidden_size, bestrq::CODEBOOK_SIZE);
        let quantizer = QuantizerState::init(config.pretrain.quantizer_seed, encoder.n_mels);
        Ok(Self {
            optimizer: AdamW::new(config.optimizer),
            config,
            encoder,
            store,
            quantizer,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        expect_kind(ckpt, "pretrain")?;
        let config: RunConfig = serde_json::from_value(meta(ckpt, "config")?.clone())?;
        config.validate()?;
        let quantizer = QuantizerState::from_parts(
            ckpt.tensor("quantizer/projection")?.clone(),
            ckpt.tensor("quantizer/codebook")?.clone(),
            meta_u64(ckpt, "quantizer_seed")?,
        )?;
        Ok(Self {
            encoder: config.encoder(),
            store: restore_store(ckpt),
            optimizer: restore_optimizer(ckpt, &config)?,
            quantizer,
            step: meta_u64(ckpt, "step")?,
            config,
        })
    }

    pub fn schedule(&self) -> Result<ScheduleConfig> {
        schedule_for(&self.config.pretrain.schedule, self.config.pretrain.steps)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let lr = lr_at(self.step.min(self.config.pretrain.steps), &self.schedule()?)?;
        let mut ckpt = Checkpoint::new(json!({
            "kind": "pretrain",
            "config": self.config,
            "encoder": self.encoder,
            "step": self.step,
            "lr": lr,
            "seed": self.config.seed,
            "quantizer_seed": self.quantizer.seed(),
            "optimizer_step": self.optimizer.state.step,
        }));
        insert_store(&mut ckpt, &self.store, &self.optimizer);
        ckpt.tensors
            .insert("quantizer/projection".into(), self.quantizer.projection().clone());
        ckpt.tensors.insert("quantizer/codebook".into(), self.quantizer.codebook().clone());
        Ok(ckpt)
    }

    /// One masked-prediction update on the batch scheduled for the next step.
    pub fn train_step(&mut self, data: &PretrainData) -> Result<(StepRecord, PretrainBatchLoss)> {
        let step = self.step + 1;
        let schedule = self.schedule()?;
        let lr = lr_at(step, &schedule)?;
        let cfg = &self.config.pretrain;
        let members = batch_for_step(data.features.len(), cfg.batch_size, self.config.seed, step);
        let mut rng = step_rng(self.config.seed, step);
        let mut masked = Vec::with_capacity(members.len());
        let mut plans = Vec::with_capacity(members.len());
        let mut labels = Vec::with_capacity(members.len());
        for &i in &members {
            let clean = &data.features.frames[i];
            let plan = bestrq::make_mask_plan(clean.num_frames(), &cfg.mask, &mut rng)?;
            masked.push(bestrq::apply_mask(clean, &plan, &mut rng)?);
            plans.push(plan);
            labels.push(data.labels[i].clone());
        }
        let input = stack_frames(&masked.iter().collect::<Vec<_>>())?;
        let (grads, updates, stats) = {
            let g = Graph::new();
            let sess = Session::new(&g, &self.store, true, ChaCha8Rng::seed_from_u64(rng.random()));
            let x = g.constant(input);
            let h = encoder::encode(&sess, x, &self.encoder)?;
            let (loss, stats) = bestrq::bestrq_loss_graph(&sess, h, &labels, &plans)?;
            check_finite(stats.loss, step, lr)?;
            let mut gr = g.backward(loss);
            (sess.gradients(&mut gr), sess.take_buffer_updates(), stats)
        };
        self.optimizer.step(&mut self.store, &grads, lr)?;
        apply_buffer_updates(&mut self.store, updates);
        self.step = step;
        Ok((
            StepRecord {
                step,
                lr,
                loss: stats.loss,
                acc: stats.accuracy,
            },
            stats,
        ))
    }

    /// Trains up to `config.pretrain.steps`, appending to the metrics log
    /// and writing checkpoints under `out_dir` when given.
    pub fn run(&mut self, data: &PretrainData, out_dir: Option<&Path>) -> Result<Vec<StepRecord>> {
        let mut log = match out_dir {
            Some(d) => Some(MetricsLog::create(d.join(PRETRAIN_METRICS), self.step > 0)?),
            None => None,
        };
        let every = self.config.pretrain.checkpoint_every;
        let mut records = Vec::new();
        while self.step < self.config.pretrain.steps {
            let (rec, _) = self.train_step(data)?;
            log::debug!("pretrain step {} lr {:.3e} loss {:.4} acc {:.3}", rec.step, rec.lr, rec.loss, rec.acc);
            if let Some(l) = log.as_mut() {
                l.write(&rec)?;
            }
            records.push(rec);
            if let Some(d) = out_dir {
                if every > 0 && self.step % every == 0 && self.step < self.config.pretrain.steps {
                    self.checkpoint()?.save(d.join(format!("pretrain_step{:06}.ckpt", self.step)))?;
                }
            }
        }
        if let Some(d) = out_dir {
            self.checkpoint()?.save(d.join(PRETRAIN_CHECKPOINT))?;
        }
        Ok(records)
    }
}

/// Result of a fine-tuning run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FinetuneReport {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

pub struct Finetuner {
    pub config: RunConfig,
    pub model: SpeakerModel,
    pub store: ParamStore,
    pub optimizer: AdamW,
    pub vocab: Vocabulary,
    pub step: u64,
    pub epoch: u64,
}

impl Finetuner {
    /// Fresh model; with `init`, encoder parameters and statistics are taken
    /// from a pre-training checkpoint.
    pub fn new(config: RunConfig, vocab: Vocabulary, mel_frames: usize, init: Option<&Checkpoint>) -> Result<Self> {
        config.validate()?;
        let model = SpeakerModel::new(
            config.encoder(),
            config.pooling,
            mel_frames,
            vocab.len(),
            config.classifier.margin,
            config.classifier.scale,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        model.init_params(&mut rng, &mut store)?;
        if let Some(ckpt) = init {
            expect_kind(ckpt, "pretrain")?;
            let enc: EncoderConfig = serde_json::from_value(meta(ckpt, "encoder")?.clone())?;
            if enc != model.encoder {
                return Err(Error::Checkpoint(format!(
                    "checkpoint encoder {enc:?} does not match the configured {:?}",
                    model.encoder
                )));
            }
            let n = store.copy_prefix_from(&restore_store(ckpt), &format!("{}.", encoder::PREFIX));
            log::info!("initialized {n} encoder tensors from the pre-training checkpoint");
        }
        Ok(Self {
            optimizer: AdamW::new(config.optimizer),
            config,
            model,
            store,
            vocab,
            step: 0,
            epoch: 0,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        expect_kind(ckpt, "finetune")?;
        let config: RunConfig = serde_json::from_value(meta(ckpt, "config")?.clone())?;
        let model: SpeakerModel = serde_json::from_value(meta(ckpt, "model")?.clone())?;
        let vocab = Vocabulary::from_json(meta(ckpt, "vocab")?)?;
        Ok(Self {
            store: restore_store(ckpt),
            optimizer: restore_optimizer(ckpt, &config)?,
            step: meta_u64(ckpt, "step")?,
            epoch: meta_u64(ckpt, "epoch")?,
            config,
            model,
            vocab,
        })
    }

    pub fn batches_per_epoch(&self, train: &FeatureSet) -> u64 {
        train.len().div_ceil(self.config.finetune.batch_size) as u64
    }

    pub fn schedule(&self, train: &FeatureSet) -> Result<ScheduleConfig> {
        let total = self.config.finetune.epochs * self.batches_per_epoch(train);
        let s = self.config.finetune.schedule.rescaled(total);
        s.validate()?;
        Ok(s)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new(json!({
            "kind": "finetune",
            "config": self.config,
            "model": self.model,
            "step": self.step,
            "epoch": self.epoch,
            "seed": self.config.seed,
            "optimizer_step": self.optimizer.state.step,
            "vocab": self.vocab.to_json(),
        }));
        insert_store(&mut ckpt, &self.store, &self.optimizer);
        ckpt
    }

    fn train_step(&mut self, train: &FeatureSet, schedule: &ScheduleConfig) -> Result<StepRecord> {
        let step = self.step + 1;
        let lr = lr_at(step, schedule)?;
        let bs = self.config.finetune.batch_size;
        let members = batch_for_step(train.len(), bs, self.config.seed, step);
        let frames: Vec<&LogMelFrames> = members.iter().map(|&i| &train.frames[i]).collect();
        let targets: Vec<usize> = members.iter().map(|&i| train.labels[i]).collect();
        let input = stack_frames(&frames)?;
        let mut rng = step_rng(self.config.seed, step);
        let (grads, updates, loss, acc) = {
            let g = Graph::new();
            let head = Session::new(&g, &self.store, true, ChaCha8Rng::seed_from_u64(rng.random()));
            let x = g.constant(input);
            let (loss, acc) = if self.config.finetune.freeze_encoder {
                let enc = Session::eval(&g, &self.store, ChaCha8Rng::seed_from_u64(rng.random()))
                    .freeze_prefix(format!("{}.", encoder::PREFIX));
                let h = encoder::encode(&enc, x, &self.model.encoder)?;
                self.model.head_loss(&head, h, &targets)?
            } else {
                self.model.loss(&head, x, &targets)?
            };
            let value = g.value_ref(loss).item();
            check_finite(value, step, lr)?;
            let mut gr = g.backward(loss);
            (head.gradients(&mut gr), head.take_buffer_updates(), value, acc)
        };
        self.optimizer.step(&mut self.store, &grads, lr)?;
        apply_buffer_updates(&mut self.store, updates);
        self.step = step;
        Ok(StepRecord { step, lr, loss, acc })
    }

    /// One pass over the training set.
    pub fn train_epoch(&mut self, train: &FeatureSet) -> Result<Vec<StepRecord>> {
        if train.is_empty() {
            return Err(Error::Empty("empty training split".into()));
        }
        let schedule = self.schedule(train)?;
        let per_epoch = self.batches_per_epoch(train);
        let mut out = Vec::with_capacity(per_epoch as usize);
        for _ in 0..per_epoch {
            out.push(self.train_step(train, &schedule)?);
        }
        self.epoch += 1;
        Ok(out)
    }

    pub fn evaluate(&self, set: &FeatureSet) -> Result<f64> {
        evaluate(&self.model, &self.store, set, self.config.seed)
    }

    /// Trains for the configured epochs, evaluating after each. With
    /// `out_dir`, writes step and epoch logs, the final checkpoint and the
    /// vocabulary.
    pub fn run(&mut self, train: &FeatureSet, test: Option<&FeatureSet>, out_dir: Option<&Path>) -> Result<FinetuneReport> {
        let mut logs = match out_dir {
            Some(d) => Some((
                MetricsLog::create(d.join(FINETUNE_METRICS), self.step > 0)?,
                MetricsLog::create(d.join(FINETUNE_EVAL), self.step > 0)?,
            )),
            None => None,
        };
        let mut report = FinetuneReport::default();
        while self.epoch < self.config.finetune.epochs {
            let steps = self.train_epoch(train)?;
            let rec = EvalRecord {
                epoch: self.epoch,
                step: self.step,
                train_acc: self.evaluate(train)?,
                test_acc: test.filter(|t| !t.is_empty()).map(|t| self.evaluate(t)).transpose()?,
            };
            log::info!(
                "epoch {} step {} train acc {:.3} test acc {}",
                rec.epoch,
                rec.step,
                rec.train_acc,
                rec.test_acc.map_or("-".into(), |a| format!("{a:.3}"))
            );
            if let Some((s, e)) = logs.as_mut() {
                for r in &steps {
                    s.write(r)?;
                }
                e.write(&rec)?;
            }
            report.steps.extend(steps);
            report.evals.push(rec);
        }
        if let Some(d) = out_dir {
            self.checkpoint().save(d.join(FINETUNE_CHECKPOINT))?;
            let path = d.join(VOCAB_FILE);
            std::fs::write(&path, serde_json::to_string_pretty(&self.vocab.to_json())?)
                .map_err(|e| Error::io(&path, e))?;
        }
        Ok(report)
    }
}

/// Predicted ids for every utterance of `set` (evaluation mode).
pub fn predictions(model: &SpeakerModel, store: &ParamStore, set: &FeatureSet, seed: u64) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(set.len());
    for (b, chunk) in set.frames.chunks(EVAL_BATCH).enumerate() {
        let g = Graph::no_grad();
        let sess = Session::eval(&g, store, step_rng(seed ^ 0xe7a1, b as u64));
        let x = g.constant(stack_frames(&chunk.iter().collect::<Vec<_>>())?);
        out.extend(model.predict(&sess, x)?);
    }
    Ok(out)
}

/// Top-1 accuracy over `set`.
pub fn evaluate(model: &SpeakerModel, store: &ParamStore, set: &FeatureSet, seed: u64) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Empty("cannot evaluate an empty split".into()));
    }
    let pred = predictions(model, store, set, seed)?;
    Ok(accuracy(&pred, &set.labels))
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    let correct = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    correct as f64 / labels.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub pooling: String,
    pub accuracy: f64,
}

/// Fine-tunes every benchmark pooling variant from the same encoder
/// initialization and seed and reports held-out accuracy.
pub fn pool_bench(
    config: &RunConfig,
    vocab: &Vocabulary,
    train: &FeatureSet,
    test: &FeatureSet,
    encoder_init: Option<&Checkpoint>,
) -> Result<Vec<BenchRow>> {
    let mel_frames = train
        .frames
        .first()
        .ok_or_else(|| Error::Empty("empty training split".into()))?
        .num_frames();
    let mut rows = Vec::new();
    for (label, pooling) in PoolingConfig::benchmark_variants(config.finetune.bench_heads) {
        let cfg = RunConfig {
            pooling,
            ..config.clone()
        };
        let mut ft = Finetuner::new(cfg, vocab.clone(), mel_frames, encoder_init)?;
        for _ in 0..ft.config.finetune.epochs {
            ft.train_epoch(train)?;
        }
        let accuracy = ft.evaluate(test)?;
        log::info!("poolbench {label}: {accuracy:.4}");
        rows.push(BenchRow {
            pooling: label.to_string(),
            accuracy,
        });
    }
    Ok(rows)
}

/// Parameters by top-level group (`enc`, `pool`, `cls`, ...).
pub fn param_groups(store: &ParamStore) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for (k, v) in store.params() {
        let group = k.split('.').next().unwrap_or("").to_string();
        *out.entry(group).or_insert(0) += v.len();
    }
    out
}

/// All-zero utterance features, for shape-only runs.
pub fn silent_frames(frames: usize, n_mels: usize) -> LogMelFrames {
    LogMelFrames::new(Tensor::zeros(vec![frames, n_mels]), 10.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_each_epoch() {
        let mut seen: Vec<usize> = (1..=3).flat_map(|s| batch_for_step(10, 4, 5, s)).collect();
        assert_eq!(batch_for_step(10, 4, 5, 3).len(), 2);
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_for_step(10, 4, 5, 4), batch_for_step(10, 4, 5, 4));
    }

    #[test]
    fn accuracy_counts() {
        assert_eq!(accuracy(&[0, 0, 0, 0], &[0, 1, 2, 3]), 0.25);
        assert_eq!(accuracy(&[1, 2], &[1, 2]), 1.0);
    }
}
