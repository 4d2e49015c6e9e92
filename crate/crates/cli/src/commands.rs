use anyhow::{Context, Result};
use crackcnn::checkpoint::{adam_path, file_digest, save_adam};
use crackcnn::data::{
    class_names, generate_synthetic, load_all, load_dataset, load_image, IMAGE_DIMS,
};
use crackcnn::layers::LrnParams;
use crackcnn::rng::streams;
use crackcnn::train::{
    evaluate, train, transfer_train, write_metrics_csv, AdamConfig, TrainOutput,
};
use crackcnn::verify::{verify_gradients, VerifyOptions};
use crackcnn::{Checkpoint, Dataset, Error, Network, NetworkConfig, Rng, TrainConfig};

use crate::report;
use crate::{
    Command, EvalArgs, ParamsArgs, PredictArgs, Switch, SynthArgs, TrainArgs, TrainingOptions,
    TransferArgs, VerifyArgs,
};

/// Runs one command. `Ok(false)` means the command ran but its check failed.
pub(crate) fn run(command: Command, deterministic: bool) -> Result<bool> {
    match command {
        Command::Train(a) => cmd_train(a, deterministic),
        Command::Transfer(a) => cmd_transfer(a, deterministic),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Params(a) => cmd_params(a),
        Command::VerifyGrads(a) => cmd_verify(a),
    }
}

impl TrainingOptions {
    fn config(&self, deterministic: bool, freeze_conv: bool) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch,
            adam: AdamConfig {
                learning_rate: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                epsilon: self.epsilon,
            },
            eval_interval: self.eval_interval,
            seed: self.seed,
            freeze_conv,
            record_time: !deterministic,
            ..TrainConfig::default()
        }
    }

    /// Checks the class count before decoding any image, then splits.
    fn load(&self) -> Result<(Dataset, Dataset)> {
        let names = class_names(&self.data)
            .with_context(|| format!("reading dataset {}", self.data.display()))?;
        if names.len() != self.classes {
            return Err(Error::ClassCountMismatch {
                expected: self.classes,
                found: names.len(),
            }
            .into());
        }
        let (train_set, test_set) = load_dataset(&self.data, self.test_frac, self.seed)?;
        log::info!(
            "loaded {} training and {} test images, classes {:?}",
            train_set.len(),
            test_set.len(),
            train_set.class_labels
        );
        Ok((train_set, test_set))
    }

    fn finish(&self, out: TrainOutput, base: Option<String>) -> Result<bool> {
        let TrainOutput {
            mut checkpoint,
            metrics,
            optimizer,
        } = out;
        checkpoint.base = base;
        checkpoint
            .save(&self.out)
            .with_context(|| format!("writing {}", self.out.display()))?;
        write_metrics_csv(&metrics, &self.metrics)
            .with_context(|| format!("writing {}", self.metrics.display()))?;
        if self.save_optimizer {
            save_adam(&optimizer, adam_path(&self.out))?;
        }
        log::info!(
            "wrote {} and {}",
            self.out.display(),
            self.metrics.display()
        );
        if let Some(target) = self.report_steps_to {
            println!("{}", report::steps_to(&metrics, target));
        }
        if let Some(last) = metrics.last() {
            println!("final test accuracy {:.6}", last.test_accuracy);
        }
        Ok(true)
    }
}

fn cmd_train(a: TrainArgs, deterministic: bool) -> Result<bool> {
    let cfg = a.opts.config(deterministic, false);
    cfg.validate()?;
    let config = NetworkConfig {
        lrn: (a.lrn == Switch::On).then(LrnParams::default),
        ..NetworkConfig::standard(a.opts.classes)
    };
    config.validate()?;
    let (train_set, test_set) = a.opts.load()?;
    let net = Network::new(config, &mut Rng::new(a.opts.seed).fork(streams::INIT))?;
    let out = train(net, &train_set, &test_set, &cfg)?;
    a.opts.finish(out, None)
}

fn cmd_transfer(a: TransferArgs, deterministic: bool) -> Result<bool> {
    let cfg = a.opts.config(deterministic, a.freeze_conv);
    cfg.validate()?;
    let base = Checkpoint::load(&a.base)
        .with_context(|| format!("loading base model {}", a.base.display()))?;
    let digest = file_digest(&a.base)?;
    log::info!(
        "base {} ({}-way, sha256 {digest})",
        a.base.display(),
        base.network.num_classes()
    );
    let (train_set, test_set) = a.opts.load()?;
    let out = transfer_train(&base, a.opts.classes, &train_set, &test_set, &cfg)?;
    a.opts.finish(out, Some(digest))
}

fn cmd_eval(a: EvalArgs) -> Result<bool> {
    let model = Checkpoint::load(&a.model)
        .with_context(|| format!("loading model {}", a.model.display()))?;
    let data = load_all(&a.data)?;
    if data.num_classes() != model.labels.len() {
        return Err(Error::ClassCountMismatch {
            expected: model.labels.len(),
            found: data.num_classes(),
        }
        .into());
    }
    if data.class_labels != model.labels {
        anyhow::bail!(
            "dataset classes {:?} differ from model classes {:?}",
            data.class_labels,
            model.labels
        );
    }
    let e = evaluate(&model.network, &data)?;
    println!("loss {:.6}", e.loss);
    println!("accuracy {:.6}", e.accuracy);
    Ok(true)
}

fn cmd_predict(a: PredictArgs) -> Result<bool> {
    let model = Checkpoint::load(&a.model)
        .with_context(|| format!("loading model {}", a.model.display()))?;
    let pixels = load_image(&a.image)?;
    let [c, h, w] = IMAGE_DIMS;
    let x = pixels.reshape(&[1, c, h, w])?;
    let probs = model.network.forward(&x)?.probs.into_vec();
    print!("{}", report::prediction(&model.labels, &probs));
    Ok(true)
}

fn cmd_synth(a: SynthArgs) -> Result<bool> {
    let n = generate_synthetic(a.task, a.n, a.seed, &a.out)?;
    println!("wrote {n} images to {}", a.out.display());
    Ok(true)
}

fn cmd_params(a: ParamsArgs) -> Result<bool> {
    let config = NetworkConfig {
        lrn: (a.lrn == Switch::On).then(LrnParams::default),
        ..NetworkConfig::standard(a.classes)
    };
    print!("{}", report::layer_table(&config.layers()?));
    Ok(true)
}

fn cmd_verify(a: VerifyArgs) -> Result<bool> {
    let report = verify_gradients(&VerifyOptions {
        seed: a.seed,
        corrupt_conv: a.corrupt_conv,
    })?;
    print!("{report}");
    let passed = report.passed();
    println!(
        "{}",
        if passed {
            "all checks passed"
        } else {
            "gradient check FAILED"
        }
    );
    Ok(passed)
}
