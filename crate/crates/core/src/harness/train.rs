use rand::Rng as _;

use crate::episodes::{sample_episode, split_base_novel, Dataset, Episode, EpisodeConfig};
use crate::error::{Error, Result};
use crate::numerics::{Gradients, Tape, Var};
use crate::rng::{derive_seed, seeded, stream};

use super::config::{MetaSource, TrainConfig};
use super::model::{argmax, Bound, Group, Model};
use super::optim::Adam;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    /// Mini-batch loss before each update.
    pub losses: Vec<f64>,
    /// Accuracy over every base item after training.
    pub train_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaTrainReport {
    /// Episode loss before each update.
    pub losses: Vec<f64>,
}

/// Rewrites numeric failures during training as a divergence at `step`.
fn diverged(stage: &'static str, step: usize) -> impl Fn(Error) -> Error {
    move |e| {
        if e.is_numeric() {
            Error::Divergence {
                stage,
                step,
                loss: f64::NAN,
            }
        } else {
            e
        }
    }
}

fn check_loss(stage: &'static str, step: usize, loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Divergence { stage, step, loss })
    }
}

fn apply(
    model: &mut Model,
    bound: &Bound,
    grads: &Gradients,
    opt: &mut Adam,
    trains: impl Fn(Group) -> bool,
) -> Result<()> {
    opt.begin_step();
    for slot in model.slots(bound) {
        if !trains(slot.group) {
            continue;
        }
        let g = grads.get_or_zero(slot.var, slot.values.len());
        opt.update(&slot.name, slot.values, &g);
        if slot.values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                op: "optimizer update",
            });
        }
    }
    Ok(())
}

/// Builds a fresh model for `base` and runs stage 1 on it.
pub fn pretrain(base: &Dataset, config: &TrainConfig) -> Result<(Model, PretrainReport)> {
    let mut model = Model::init(
        config,
        base.num_classes(),
        &mut seeded(derive_seed(config.seed, stream::INIT)),
    )?;
    model.check_data(base)?;
    let report = pretrain_model(&mut model, base)?;
    Ok((model, report))
}

/// Stage 1: cross-entropy over the base classes, updating encoder, `W_base` and `tau`.
pub fn pretrain_model(model: &mut Model, base: &Dataset) -> Result<PretrainReport> {
    let cfg = model.config.stage1.clone();
    if base.num_classes() != model.classifier.base_classes() {
        return Err(Error::Dimension {
            expected: model.classifier.base_classes(),
            found: base.num_classes(),
        });
    }
    let mut rng = seeded(derive_seed(model.config.seed, stream::STAGE1_BATCH));
    let mut opt = Adam::new(cfg.learning_rate);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(0..base.len()))
            .collect();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape)?;
        let (loss, grads) = (|| {
            let mut terms = Vec::with_capacity(batch.len());
            for &i in &batch {
                let item = base.item(i);
                let logits = model.base_logits_on(&mut tape, &bound, &item.payload)?;
                terms.push(tape.cross_entropy(logits, item.label)?);
            }
            let loss = tape.mean(&terms)?;
            Ok::<_, Error>((tape.scalar_value(loss), tape.backward(loss)?))
        })()
        .map_err(diverged("stage1", step))?;
        losses.push(check_loss("stage1", step, loss)?);
        apply(model, &bound, &grads, &mut opt, |g| g != Group::Routing)
            .map_err(diverged("stage1", step))?;
        model.progress.stage1_steps += 1;
    }
    let train_accuracy = base_accuracy(model, base)?;
    log::info!(
        "stage 1: {} steps, final loss {:.4}, train accuracy {:.4}",
        cfg.steps,
        losses.last().copied().unwrap_or(f64::NAN),
        train_accuracy
    );
    Ok(PretrainReport {
        losses,
        train_accuracy,
    })
}

/// Fraction of `base` items whose highest base-class score is their own class.
pub fn base_accuracy(model: &Model, base: &Dataset) -> Result<f64> {
    let mut correct = 0;
    for item in base.items() {
        let e = model.embed(&item.payload)?;
        if argmax(model.classifier.base_scores(&e)?.data()) == item.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / base.len() as f64)
}

/// Stage-2 episode sampling settings derived from the configuration.
pub fn meta_episode_config(config: &TrainConfig) -> EpisodeConfig {
    EpisodeConfig {
        way: config.stage2.way,
        shot: config.stage2.shot,
        queries: config.stage2.queries,
        seed: derive_seed(config.seed, stream::META_EPISODE),
    }
}

/// Stage 2: one optimizer step per sampled episode on the episode loss.
pub fn meta_train(model: &mut Model, dataset: &Dataset) -> Result<MetaTrainReport> {
    model.check_data(dataset)?;
    let ep_cfg = meta_episode_config(&model.config);
    let mut opt = Adam::new(model.config.stage2.learning_rate);
    let episodes = model.config.stage2.episodes;
    let mut losses = Vec::with_capacity(episodes);
    for step in 0..episodes {
        let episode = sample_episode(dataset, &ep_cfg, step as u64)?;
        losses.push(meta_step(model, dataset, &episode, &mut opt, step)?);
    }
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        log::info!("stage 2: {episodes} episodes, loss {first:.4} -> {last:.4}");
    }
    Ok(MetaTrainReport { losses })
}

/// One stage-2 update on `episode`; returns the loss before the update.
pub fn meta_step(
    model: &mut Model,
    dataset: &Dataset,
    episode: &Episode,
    opt: &mut Adam,
    step: usize,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape)?;
    let (loss, grads) = (|| {
        let loss: Var = model.episode_loss_on(&mut tape, &bound, dataset, episode)?;
        Ok::<_, Error>((tape.scalar_value(loss), tape.backward(loss)?))
    })()
    .map_err(diverged("stage2", step))?;
    check_loss("stage2", step, loss)?;
    let freeze_tau = model.config.stage2.freeze_tau;
    apply(model, &bound, &grads, opt, |g| {
        !(freeze_tau && g == Group::Tau)
    })
    .map_err(diverged("stage2", step))?;
    model.progress.stage2_episodes += 1;
    Ok(loss)
}

/// Class splits used by an end-to-end run.
#[derive(Clone, Debug)]
pub struct Splits {
    pub base: Dataset,
    /// Episodes for stage 2 come from here.
    pub meta: Dataset,
    /// Held-out classes for evaluation.
    pub test: Dataset,
}

/// Splits `dataset` per `config.data`.
pub fn make_splits(dataset: &Dataset, config: &TrainConfig) -> Result<Splits> {
    let (base, novel) = split_base_novel(dataset, config.data.num_base, config.seed)?;
    match config.data.meta_source {
        MetaSource::Base => Ok(Splits {
            meta: base.clone(),
            base,
            test: novel,
        }),
        MetaSource::NovelTrain => {
            let k = config.data.novel_train_classes;
            if k >= novel.num_classes() {
                return Err(Error::InsufficientData(format!(
                    "{k} novel-train classes leaves no test classes out of {}",
                    novel.num_classes()
                )));
            }
            let ids: Vec<usize> = (0..novel.num_classes()).collect();
            Ok(Splits {
                meta: novel.subset(&ids[..k])?,
                test: novel.subset(&ids[k..])?,
                base,
            })
        }
    }
}

/// Result of both training stages.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: Model,
    pub splits: Splits,
    pub pretrain: PretrainReport,
    pub meta: MetaTrainReport,
}

/// Splits the data, then runs stage 1 and stage 2.
pub fn train_end_to_end(dataset: &Dataset, config: &TrainConfig) -> Result<TrainedModel> {
    config.validate()?;
    let splits = make_splits(dataset, config)?;
    let (mut model, pretrain) = pretrain(&splits.base, config)?;
    let meta = meta_train(&mut model, &splits.meta)?;
    Ok(TrainedModel {
        model,
        splits,
        pretrain,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::episodes::gen_synthetic;

    fn config(d: usize) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.encoder = EncoderConfig::precomputed(d);
        cfg.routing.dmm.capsules = 2;
        cfg.routing.qim.capsules = 2;
        cfg.stage1.steps = 0;
        cfg.stage2.episodes = 0;
        cfg
    }

    #[test]
    fn zero_steps_keeps_initialisation() {
        let ds = gen_synthetic(3, 10, 8, 6.0, 1.0, 1).unwrap();
        let cfg = config(8);
        let (model, report) = pretrain(&ds, &cfg).unwrap();
        let fresh = Model::init(&cfg, 3, &mut seeded(derive_seed(cfg.seed, stream::INIT))).unwrap();
        assert_eq!(model, fresh);
        assert!(report.losses.is_empty());
    }

    #[test]
    fn stage1_leaves_routing_untouched() {
        let ds = gen_synthetic(3, 10, 8, 6.0, 1.0, 1).unwrap();
        let mut cfg = config(8);
        cfg.stage1.steps = 5;
        let (model, report) = pretrain(&ds, &cfg).unwrap();
        let fresh = Model::init(&cfg, 3, &mut seeded(derive_seed(cfg.seed, stream::INIT))).unwrap();
        assert_eq!(model.dmm, fresh.dmm);
        assert_eq!(model.qim, fresh.qim);
        assert_ne!(model.classifier, fresh.classifier);
        assert_eq!(report.losses.len(), 5);
    }

    #[test]
    fn frozen_tau_stays_put() {
        let ds = gen_synthetic(6, 15, 8, 6.0, 1.0, 1).unwrap();
        let mut cfg = config(8);
        cfg.stage2.episodes = 3;
        cfg.stage2.freeze_tau = true;
        cfg.stage2.way = 3;
        let (mut model, _) = pretrain(&ds, &cfg).unwrap();
        let tau = model.classifier.log_tau;
        meta_train(&mut model, &ds).unwrap();
        assert_eq!(model.classifier.log_tau, tau);
    }

    #[test]
    fn novel_train_split_sizes() {
        let ds = gen_synthetic(30, 2, 4, 6.0, 1.0, 1).unwrap();
        let mut cfg = config(4);
        cfg.data.meta_source = MetaSource::NovelTrain;
        cfg.data.novel_train_classes = 4;
        let s = make_splits(&ds, &cfg).unwrap();
        assert_eq!(
            (
                s.base.num_classes(),
                s.meta.num_classes(),
                s.test.num_classes()
            ),
            (20, 4, 6)
        );
        cfg.data.novel_train_classes = 10;
        assert!(make_splits(&ds, &cfg).is_err());
    }
}
