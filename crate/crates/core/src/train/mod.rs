//! Minibatch training with Adam, evaluation, and fine-tuning from a
//! checkpoint.
//!
//! One training step:
//!
//! 1. draw the next `batch_size` samples of a shuffled epoch,
//! 2. forward pass to softmax probabilities,
//! 3. cross-entropy loss and its gradient,
//! 4. backward pass,
//! 5. Adam update of every parameter that is not frozen.

mod adam;
mod loss;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use loss::{argmax, cross_entropy_loss, Loss};

use std::fmt::Write as _;
use std::fs;
use std::ops::ControlFlow;
use std::path::Path;
use std::time::Instant;

use crate::checkpoint::{swap_head, Checkpoint};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{Gradients, Network, Workspace};
use crate::rng::{streams, Rng};
use crate::tensor::Tensor;

/// Samples per forward pass during evaluation.
pub const EVAL_BATCH: usize = 16;

pub const METRICS_HEADER: &str = "step,train_loss,train_acc,test_loss,test_acc,wall_seconds";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// A metrics row is recorded every `eval_interval` steps and after the
    /// last step.
    pub eval_interval: usize,
    pub seed: u64,
    pub freeze_conv: bool,
    /// Reshuffle the sample order every epoch; otherwise iterate in dataset
    /// order.
    pub shuffle: bool,
    /// Record elapsed time in metrics. When off, `wall_seconds` is written
    /// as zero so repeated runs produce identical files.
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            batch_size: 16,
            adam: AdamConfig::default(),
            eval_interval: 50,
            seed: 0,
            freeze_conv: false,
            shuffle: true,
            record_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.eval_interval == 0 {
            return Err(Error::invalid("evaluation interval must be at least 1"));
        }
        self.adam.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub wall_seconds: f64,
}

/// CSV with [`METRICS_HEADER`], six decimals, LF line endings.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.step, r.train_loss, r.train_accuracy, r.test_loss, r.test_accuracy, r.wall_seconds
        );
    }
    out
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, metrics_csv(rows))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    /// Mean cross-entropy.
    pub loss: f64,
    /// Fraction of samples whose most probable class is the label.
    pub accuracy: f64,
}

/// Loss and accuracy over a whole dataset.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<Evaluation> {
    Evaluator::default().run(net, data)
}

/// Reuses activation buffers across evaluations.
#[derive(Default)]
struct Evaluator {
    ws: Workspace,
    batch: Option<Tensor>,
}

impl Evaluator {
    fn run(&mut self, net: &Network, data: &Dataset) -> Result<Evaluation> {
        if data.is_empty() {
            return Err(Error::EmptyDataset("nothing to evaluate".into()));
        }
        check_classes(net, data)?;
        let mut loss = 0.0;
        let mut correct = 0usize;
        let indices: Vec<usize> = (0..data.len()).collect();
        for chunk in indices.chunks(EVAL_BATCH) {
            let batch = self
                .batch
                .get_or_insert_with(|| Tensor::zeros(&[1]).expect("valid"));
            let labels = data.gather(chunk, batch)?;
            let fwd = net.forward_train(batch, &mut self.ws)?;
            let l = cross_entropy_loss(&fwd.probs, &labels)?;
            loss += l.per_sample.iter().sum::<f64>();
            let t = net.num_classes();
            correct += fwd
                .probs
                .data()
                .chunks(t)
                .zip(&labels)
                .filter(|(p, &y)| argmax(p) == y)
                .count();
        }
        let n = data.len() as f64;
        Ok(Evaluation {
            loss: loss / n,
            accuracy: correct as f64 / n,
        })
    }
}

fn check_classes(net: &Network, data: &Dataset) -> Result<()> {
    if net.num_classes() != data.num_classes() {
        return Err(Error::ClassCountMismatch {
            expected: net.num_classes(),
            found: data.num_classes(),
        });
    }
    Ok(())
}

/// Endless sequence of sample indices, one permutation per epoch.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
    shuffle: bool,
}

impl Sampler {
    fn new(n: usize, rng: Rng, shuffle: bool) -> Self {
        Sampler {
            order: (0..n).collect(),
            pos: n,
            rng,
            shuffle,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                if self.shuffle {
                    self.rng.shuffle(&mut self.order);
                }
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
    pub optimizer: Adam,
}

/// Trains `net` for `cfg.steps` steps. See [`train_with_observer`].
pub fn train(
    net: Network,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    train_with_observer(net, train_set, test_set, cfg, |_, _| {
        ControlFlow::Continue(())
    })
}

/// Trains and calls `observe` after each recorded metrics row. Returning
/// `Break` ends the run after that row.
///
/// The step counter of the returned checkpoint is the number of steps
/// actually taken.
pub fn train_with_observer<F>(
    mut net: Network,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    mut observe: F,
) -> Result<TrainOutput>
where
    F: FnMut(&MetricsRow, &Network) -> ControlFlow<()>,
{
    cfg.validate()?;
    for (what, d) in [("training", train_set), ("test", test_set)] {
        if d.is_empty() {
            return Err(Error::EmptyDataset(format!("{what} set has no samples")));
        }
        check_classes(&net, d)?;
    }
    if train_set.class_labels != test_set.class_labels {
        return Err(Error::invalid(
            "training and test sets disagree on class labels",
        ));
    }

    let started = Instant::now();
    let mut optimizer = Adam::new(&net, cfg.adam)?;
    let mut sampler = Sampler::new(
        train_set.len(),
        Rng::new(cfg.seed).fork(streams::BATCHES),
        cfg.shuffle,
    );
    let mut grads = Gradients::new();
    let mut batch = Tensor::zeros(&[1])?;
    // evaluation shares the training activation buffers
    let mut evaluator = Evaluator::default();
    let mut metrics = Vec::new();
    let mut taken = 0;

    for step in 1..=cfg.steps {
        let labels = train_set.gather(&sampler.next_batch(cfg.batch_size), &mut batch)?;
        let fwd = net.forward_train(&batch, &mut evaluator.ws)?;
        let loss = cross_entropy_loss(&fwd.probs, &labels)?;
        net.backward(
            &mut evaluator.ws,
            &loss.dlogits,
            cfg.freeze_conv,
            &mut grads,
        )?;
        optimizer.step(&mut net, &grads)?;
        taken = step;

        if step % cfg.eval_interval == 0 || step == cfg.steps {
            let tr = evaluator.run(&net, train_set)?;
            let te = evaluator.run(&net, test_set)?;
            let row = MetricsRow {
                step,
                train_loss: tr.loss,
                train_accuracy: tr.accuracy,
                test_loss: te.loss,
                test_accuracy: te.accuracy,
                wall_seconds: if cfg.record_time {
                    started.elapsed().as_secs_f64()
                } else {
                    0.0
                },
            };
            log::info!(
                "step {step}: train loss {:.4} acc {:.4}, test loss {:.4} acc {:.4}",
                row.train_loss,
                row.train_accuracy,
                row.test_loss,
                row.test_accuracy
            );
            metrics.push(row);
            if observe(&row, &net).is_break() {
                break;
            }
        }
    }

    let checkpoint = Checkpoint::new(net, train_set.class_labels.clone(), taken as u64, cfg.seed)?;
    Ok(TrainOutput {
        checkpoint,
        metrics,
        optimizer,
    })
}

/// Replaces the output layer of `base` with a fresh `new_classes`-way one
/// and trains on the new task. With `cfg.freeze_conv` the convolution
/// tensors stay exactly as in `base`.
pub fn transfer_train(
    base: &Checkpoint,
    new_classes: usize,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    transfer_train_with_observer(base, new_classes, train_set, test_set, cfg, |_, _| {
        ControlFlow::Continue(())
    })
}

pub fn transfer_train_with_observer<F>(
    base: &Checkpoint,
    new_classes: usize,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    observe: F,
) -> Result<TrainOutput>
where
    F: FnMut(&MetricsRow, &Network) -> ControlFlow<()>,
{
    if new_classes != train_set.num_classes() {
        return Err(Error::ClassCountMismatch {
            expected: new_classes,
            found: train_set.num_classes(),
        });
    }
    let mut rng = Rng::new(cfg.seed).fork(streams::HEAD);
    let fresh = swap_head(base, new_classes, train_set.class_labels.clone(), &mut rng)?;
    train_with_observer(fresh.network, train_set, test_set, cfg, observe)
}
