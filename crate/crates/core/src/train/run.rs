//! Training loop, evaluation and the per-epoch report.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::capsule::{margin_loss_var, MarginConfig};
use crate::checkpoint;
use crate::data::{augment_with, load_named, synthetic, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model};
use crate::ortho::{orthogonality_metric, HouseholderStack};
use crate::routing::Projection;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};
use crate::train::config::{RunConfig, TrainConfig};
use crate::train::optim::{lr_at, optimizer_step, AdamState};

/// One row per epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub seconds: f64,
    /// Training samples per second.
    pub fps: f64,
    pub retained: usize,
    pub params: usize,
    pub skipped_steps: u64,
    /// `‖WᵀW − I‖_F` per routing map, maximized over groups.
    pub ortho: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub ortho_names: Vec<String>,
    pub rows: Vec<EpochRow>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub params_full: usize,
    pub best_test_acc: f64,
}

impl RunReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,train_acc,test_acc,seconds,fps,retained,params,params_full,skipped_steps,ortho_max");
        for n in &self.ortho_names {
            s += &format!(",o_{n}");
        }
        s.push('\n');
        for r in &self.rows {
            let omax = r.ortho.iter().cloned().fold(0.0, f64::max);
            s += &format!(
                "{},{:.6e},{:.6},{:.6},{:.6},{:.3},{:.1},{},{},{},{},{:.3e}",
                r.epoch, r.lr, r.train_loss, r.train_acc, r.test_acc, r.seconds, r.fps, r.retained, r.params,
                self.params_full, r.skipped_steps, omax
            );
            for o in &r.ortho {
                s += &format!(",{o:.3e}");
            }
            s.push('\n');
        }
        s
    }

    /// The largest orthogonality defect over every epoch and map.
    pub fn max_ortho(&self) -> f64 {
        self.rows.iter().flat_map(|r| r.ortho.iter().cloned()).fold(0.0, f64::max)
    }
}

/// `‖WᵀW − I‖_F` of a routing map, maximized over its groups.
pub fn projection_metric<T: Scalar>(model: &Model<T>, proj: &Projection) -> Result<f64> {
    let value = &model.store.get(proj.param()).value;
    let d = *value.shape().last().unwrap();
    let groups = value.len() / (d * d);
    let mut worst = 0.0f64;
    for g in 0..groups {
        let slab = Tensor::new(&[d, d], value.data()[g * d * d..(g + 1) * d * d].to_vec())?;
        let w = match proj {
            Projection::Orthogonal(_) => HouseholderStack::from_vectors(slab)?.materialize()?,
            Projection::Dense(_) => slab,
        };
        worst = worst.max(orthogonality_metric(&w)?.as_f64());
    }
    Ok(worst)
}

pub fn ortho_metrics<T: Scalar>(model: &Model<T>) -> Result<(Vec<String>, Vec<f64>)> {
    let maps = model.routing_maps();
    let names = maps.iter().map(|(n, _)| n.clone()).collect();
    let values = maps.iter().map(|(_, p)| projection_metric(model, p)).collect::<Result<_>>()?;
    Ok((names, values))
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn correct<T: Scalar>(lengths: &Tensor<T>, labels: &[usize]) -> usize {
    let k = lengths.shape()[1];
    lengths.data().chunks(k).zip(labels).filter(|(row, &l)| argmax(row) == l).count()
}

/// Accuracy with the frozen prune mask.
pub fn evaluate<T: Scalar>(model: &Model<T>, ds: &Dataset, batch: usize) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for chunk in (0..ds.len()).collect::<Vec<_>>().chunks(batch.max(1)) {
        let (x, y) = ds.batch::<T>(chunk);
        hits += correct(&model.predict(&x)?, &y);
    }
    Ok(hits as f64 / ds.len() as f64)
}

/// Train and test sets named by the config.
pub fn load_data(cfg: &TrainConfig, root: Option<&Path>) -> Result<(Dataset, Dataset)> {
    let (train, test) = if cfg.dataset == "synthetic" {
        let all = synthetic(cfg.synthetic_classes, cfg.synthetic_per_class, cfg.synthetic_size, cfg.seed.wrapping_add(0x5EED))?;
        all.split(cfg.test_fraction)
    } else {
        let root = root.ok_or_else(|| Error::Config(format!("dataset '{}' needs --data-root", cfg.dataset)))?;
        (load_named(&cfg.dataset, root, Split::Train)?, load_named(&cfg.dataset, root, Split::Test)?)
    };
    let limit = |ds: Dataset, n: usize| if n > 0 { ds.take(n) } else { ds };
    Ok((limit(train, cfg.train_limit), limit(test, cfg.test_limit)))
}

pub struct TrainOutcome<T: Scalar = f64> {
    pub report: RunReport,
    /// Parameters after the last epoch.
    pub model: Model<T>,
    /// Parameters of the epoch with the best test accuracy.
    pub best: Model<T>,
}

fn check_data(cfg: &RunConfig, ds: &Dataset, which: &str) -> Result<()> {
    let (c, h, w) = cfg.model.input;
    if ds.image_shape() != (c, h, w) {
        return Err(Error::Config(format!(
            "{which} images are {:?}, model expects {c}x{h}x{w}",
            ds.image_shape()
        )));
    }
    if ds.classes() > cfg.model.classes {
        return Err(Error::Config(format!(
            "{which} set has labels up to {}, model has {} classes",
            ds.classes() - 1,
            cfg.model.classes
        )));
    }
    Ok(())
}

/// Runs shuffled minibatch training and evaluates after every epoch.
/// With `out`, writes `report.csv` and the best checkpoint `model.ckpt`.
pub fn train<T: Scalar>(cfg: &RunConfig, train_set: &Dataset, test_set: &Dataset, out: Option<&Path>) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    check_data(cfg, train_set, "training")?;
    check_data(cfg, test_set, "test")?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let tc = &cfg.train;
    let mut model = Model::<T>::new(cfg.model.clone(), tc.seed)?;
    let mut state = AdamState::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x9E37_79B9_7F4A_7C15);
    let adam = tc.adam();
    let margin = MarginConfig::default();
    let spe = train_set.len().div_ceil(tc.batch_size);
    let (ortho_names, _) = ortho_metrics(&model)?;
    let mut report = RunReport {
        ortho_names,
        rows: Vec::new(),
        step_losses: Vec::new(),
        params_full: model.stack().total_params(),
        best_test_acc: f64::NEG_INFINITY,
    };
    let mut best = model.clone();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..tc.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits, mut lr) = (0.0, 0, 0.0);
        for (step, chunk) in order.chunks(tc.batch_size).enumerate() {
            lr = lr_at(epoch, step, tc.lr, tc.epochs, tc.warmup_epochs, spe);
            let (x, y) = train_set.batch::<T>(chunk);
            let x = augment_with(&x, &tc.augment, &mut rng);
            let g = Graph::new();
            let p = model.store.bind(&g);
            let fwd = model.forward(&p, g.input(x), ForwardOptions::train(&mut rng))?;
            let loss = margin_loss_var(fwd.lengths, &y, &margin)?;
            let loss_v = loss.to_tensor().item().as_f64();
            hits += correct(&fwd.lengths.value(), &y);
            let grads = g.backward(loss)?;
            let gs: Vec<Tensor<T>> = p.vars().iter().map(|&v| grads.get(v)).collect();
            optimizer_step(&mut model.store, &gs, &mut state, &adam, lr);
            model.ema.update(&fwd.mask);
            loss_sum += loss_v * chunk.len() as f64;
            report.step_losses.push(loss_v);
        }
        let seconds = start.elapsed().as_secs_f64();
        let test_acc = evaluate(&model, test_set, tc.eval_batch)?;
        let (_, ortho) = ortho_metrics(&model)?;
        let row = EpochRow {
            epoch,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: hits as f64 / train_set.len() as f64,
            test_acc,
            seconds,
            fps: train_set.len() as f64 / seconds.max(1e-12),
            retained: model.ema.retained(),
            params: model.parameter_report().total_pruned(),
            skipped_steps: state.skipped,
            ortho,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} train {:.3} test {:.3} n' {} ({:.1}s)",
            row.train_loss, row.train_acc, row.test_acc, row.retained, seconds
        );
        if test_acc > report.best_test_acc {
            report.best_test_acc = test_acc;
            best = model.clone();
        }
        report.rows.push(row);
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.csv"), report.to_csv())?;
        checkpoint::save(&best, &dir.join("model.ckpt"))?;
        std::fs::write(dir.join("params.csv"), best.parameter_report().to_csv())?;
    }
    Ok(TrainOutcome { report, model, best })
}
