//! Capsule-similarity histograms and threshold sweeps.

use std::collections::BTreeMap;

use crate::capsule::similarity_matrix;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, Model};
use crate::scalar::Scalar;
use crate::tensor::Graph;
use crate::train::config::RunConfig;
use crate::train::run::train;

pub const BINS: usize = 64;

/// Pairwise cosine similarities binned over `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub counts: [usize; BINS],
    /// Pair similarities, unbinned.
    pub values: Vec<f64>,
}

impl Histogram {
    pub fn from_values(values: Vec<f64>) -> Self {
        let mut counts = [0; BINS];
        for &v in &values {
            let b = (((v + 1.0) / 2.0 * BINS as f64).floor() as isize).clamp(0, BINS as isize - 1);
            counts[b as usize] += 1;
        }
        Self { counts, values }
    }

    pub fn total(&self) -> usize {
        self.values.len()
    }

    /// Share of pairs with similarity strictly above `x`.
    pub fn fraction_above(&self, x: f64) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().filter(|&&v| v > x).count() as f64 / self.values.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,count,fraction\n");
        let total = self.total().max(1) as f64;
        for (i, &c) in self.counts.iter().enumerate() {
            let lo = -1.0 + 2.0 * i as f64 / BINS as f64;
            s += &format!("{lo:.5},{:.5},{c},{:.6}\n", lo + 2.0 / BINS as f64, c as f64 / total);
        }
        s
    }
}

/// Tags a model exposes: `pcl`, `pruned`, `c<k>` per ConvCaps layer and
/// `block<k>` per block.
pub fn available_tags(model: &Model<impl Scalar>) -> Vec<String> {
    let mut tags = vec!["pcl".to_string(), "pruned".to_string()];
    let cfg = &model.cfg;
    tags.extend((1..=cfg.blocks * cfg.layers_per_block).map(|k| format!("c{k}")));
    tags.extend((1..=cfg.blocks).map(|k| format!("block{k}")));
    tags
}

/// Batch-mean similarity over the whole dataset at each tag, as
/// histograms of the pairs `i < j`.
pub fn histogram_similarity<T: Scalar>(
    model: &Model<T>,
    ds: &Dataset,
    tags: &[String],
    batch: usize,
) -> Result<BTreeMap<String, Histogram>> {
    let known = available_tags(model);
    if let Some(bad) = tags.iter().find(|t| !known.contains(t)) {
        return Err(Error::Config(format!("unknown layer tag '{bad}' (available: {})", known.join(", "))));
    }
    let mut sums: BTreeMap<String, (Vec<f64>, usize)> = BTreeMap::new();
    let mut total = 0usize;
    for chunk in (0..ds.len()).collect::<Vec<_>>().chunks(batch.max(1)) {
        let (x, _) = ds.batch::<T>(chunk);
        let g = Graph::new();
        let p = model.store.bind_frozen(&g);
        let fwd = model.forward(&p, g.constant(x), ForwardOptions::eval().with_taps())?;
        for tap in fwd.taps.iter().filter(|t| tags.contains(&t.tag)) {
            let sim = similarity_matrix(&tap.caps.flatten())?;
            let n = sim.n();
            let vals: Vec<f64> = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).map(|(i, j)| sim.get(i, j).as_f64()).collect();
            let entry = sums.entry(tap.tag.clone()).or_insert_with(|| (vec![0.0; vals.len()], 0));
            for (acc, v) in entry.0.iter_mut().zip(&vals) {
                *acc += v * chunk.len() as f64;
            }
            entry.1 = n;
        }
        total += chunk.len();
    }
    Ok(sums
        .into_iter()
        .map(|(tag, (acc, _))| (tag, Histogram::from_values(acc.into_iter().map(|v| v / total.max(1) as f64).collect())))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub theta: f64,
    /// Retained types of the run trained at `theta`.
    pub retained: usize,
    /// Retained types when `theta` is applied to the reference run's
    /// capsules; non-decreasing in `theta` by construction.
    pub retained_reference: usize,
    pub accuracy: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("theta,retained,retained_reference,accuracy\n");
    for r in rows {
        s += &format!("{},{},{},{:.6}\n", r.theta, r.retained, r.retained_reference, r.accuracy);
    }
    s
}

/// Retained count when `theta` prunes the capsules `model` produces on `ds`
/// (batch-mean statistics over the whole set).
pub fn retained_at<T: Scalar>(model: &Model<T>, ds: &Dataset, theta: f64, batch: usize) -> Result<usize> {
    let pcl = collect_primary(model, ds, batch)?;
    Ok(crate::capsule::prune_mask(&pcl, theta)?.retained())
}

fn collect_primary<T: Scalar>(model: &Model<T>, ds: &Dataset, batch: usize) -> Result<crate::capsule::CapsuleTensor<T>> {
    let mut parts = Vec::new();
    let mut shape = Vec::new();
    for chunk in (0..ds.len()).collect::<Vec<_>>().chunks(batch.max(1)) {
        let (x, _) = ds.batch::<T>(chunk);
        let g = Graph::new();
        let p = model.store.bind_frozen(&g);
        let fwd = model.forward(&p, g.constant(x), ForwardOptions::eval().with_taps())?;
        let tap = fwd.taps.into_iter().find(|t| t.tag == "pcl").expect("pcl tap");
        shape = tap.caps.tensor().shape().to_vec();
        parts.extend(tap.caps.into_tensor().into_data());
    }
    shape[0] = ds.len();
    crate::capsule::CapsuleTensor::new(crate::tensor::Tensor::new(&shape, parts)?)
}

/// Trains one short run per threshold. The reference run is the one at the
/// largest threshold.
pub fn sweep_theta<T: Scalar>(thetas: &[f64], cfg: &RunConfig, train_set: &Dataset, test_set: &Dataset) -> Result<Vec<SweepRow>> {
    if let Some(&t) = thetas.iter().find(|&&t| !(t > 0.0 && t <= 1.0)) {
        return Err(Error::Config(format!("threshold {t} outside (0, 1]")));
    }
    let mut runs = Vec::new();
    for &theta in thetas {
        let mut c = cfg.clone();
        c.model.theta = theta;
        let out = train::<T>(&c, train_set, test_set, None)?;
        let acc = out.report.rows.last().map_or(0.0, |r| r.test_acc);
        runs.push((theta, out.model, acc));
    }
    let reference = runs
        .iter()
        .max_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
        .map(|r| collect_primary(&r.1, test_set, cfg.train.eval_batch))
        .transpose()?;
    runs.iter()
        .map(|(theta, model, acc)| {
            let retained_reference = match &reference {
                Some(pcl) => crate::capsule::prune_mask(pcl, *theta)?.retained(),
                None => model.cfg.n_caps,
            };
            Ok(SweepRow { theta: *theta, retained: model.ema.retained(), retained_reference, accuracy: *acc })
        })
        .collect()
}
