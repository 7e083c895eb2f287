use std::process::Command;

use orthcaps::checkpoint;
use orthcaps::data::{synthetic, Dataset};
use orthcaps::model::{Model, ModelConfig};
use orthcaps::params::{ParamKind, ParamStore};
use orthcaps::train::analysis::retained_at;
use orthcaps::train::bench::speedup;
use orthcaps::train::{
    bench_routing, evaluate, histogram_similarity, lr_at, optimizer_step, sweep_theta, train, AdamConfig, AdamState,
    BenchShape, RunConfig, RunReport, TrainConfig,
};
use orthcaps::{Error, Tensor};

fn quick_config(classes: usize, epochs: usize) -> RunConfig {
    RunConfig {
        model: ModelConfig { dropout: 0.0, ..ModelConfig::shallow_synthetic(classes) },
        train: TrainConfig { epochs, warmup_epochs: 0, batch_size: 16, lr: 5e-3, ..TrainConfig::default() },
    }
}

fn two_class() -> (Dataset, Dataset) {
    (synthetic(2, 64, 16, 1).unwrap(), synthetic(2, 16, 16, 2).unwrap())
}

/// The report with wall-clock columns cleared.
fn timeless(mut r: RunReport) -> RunReport {
    for row in &mut r.rows {
        row.seconds = 0.0;
        row.fps = 0.0;
    }
    r
}

fn scalar_store(v: f64, kind: ParamKind) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.add("p", Tensor::new(&[1], vec![v]).unwrap(), kind);
    s
}

#[test]
fn optimizer_examples() {
    let cfg = AdamConfig { weight_decay: 0.0, ..AdamConfig::default() };
    let mut s = scalar_store(0.0, ParamKind::Weight);
    let mut st = AdamState::new(&s);
    optimizer_step(&mut s, &[Tensor::new(&[1], vec![1.0]).unwrap()], &mut st, &cfg, 5e-3);
    let p = s.iter().next().unwrap().1.value.item();
    assert!((p + 5e-3).abs() < 1e-9, "{p}");

    let mut s = scalar_store(0.3, ParamKind::Weight);
    let mut st = AdamState::new(&s);
    optimizer_step(&mut s, &[Tensor::zeros(&[1])], &mut st, &cfg, 5e-3);
    assert_eq!(s.iter().next().unwrap().1.value.item(), 0.3);

    let decay = AdamConfig { weight_decay: 0.1, ..AdamConfig::default() };
    let mut s = scalar_store(1.0, ParamKind::Weight);
    let mut st = AdamState::new(&s);
    optimizer_step(&mut s, &[Tensor::zeros(&[1])], &mut st, &decay, 0.1);
    assert!((s.iter().next().unwrap().1.value.item() - 0.99).abs() < 1e-12);

    let mut s = scalar_store(1.0, ParamKind::Householder);
    let mut st = AdamState::new(&s);
    optimizer_step(&mut s, &[Tensor::zeros(&[1])], &mut st, &decay, 0.1);
    assert_eq!(s.iter().next().unwrap().1.value.item(), 1.0);

    let mut s = scalar_store(1.0, ParamKind::Weight);
    let mut st = AdamState::new(&s);
    assert!(!optimizer_step(&mut s, &[Tensor::new(&[1], vec![f64::NAN]).unwrap()], &mut st, &cfg, 0.1));
    assert_eq!(st.skipped, 1);
    assert_eq!(s.iter().next().unwrap().1.value.item(), 1.0);
}

#[test]
fn schedule_examples() {
    let (lr, epochs, warm, spe) = (5e-3, 10, 5, 8);
    assert_eq!(lr_at(0, 0, lr, epochs, warm, spe), 0.0);
    assert!((lr_at(5, 0, lr, epochs, warm, spe) - lr).abs() < 1e-15);
    assert!(lr_at(9, 7, lr, epochs, warm, spe).abs() <= 1e-9 * lr);
    let mut prev = f64::INFINITY;
    for e in 5..10 {
        for s in 0..spe {
            let v = lr_at(e, s, lr, epochs, warm, spe);
            assert!(v <= prev);
            prev = v;
        }
    }
    for s in 1..(warm * spe) {
        assert!(lr_at(s / spe, s % spe, lr, epochs, warm, spe) > lr_at((s - 1) / spe, (s - 1) % spe, lr, epochs, warm, spe));
    }
}

#[test]
fn one_epoch_lowers_the_loss() {
    let (tr, te) = two_class();
    let out = train::<f64>(&quick_config(2, 1), &tr, &te, None).unwrap();
    let l = &out.report.step_losses;
    assert_eq!(l.len(), 8);
    let head = (l[0] + l[1]) / 2.0;
    let tail = (l[l.len() - 2] + l[l.len() - 1]) / 2.0;
    assert!(tail < head, "{l:?}");
}

#[test]
fn fixed_seed_reproduces_the_report() {
    let (tr, te) = two_class();
    let cfg = quick_config(2, 2);
    let a = train::<f64>(&cfg, &tr, &te, None).unwrap();
    let b = train::<f64>(&cfg, &tr, &te, None).unwrap();
    assert_eq!(timeless(a.report.clone()), timeless(b.report));
    let mut other = cfg.clone();
    other.train.seed = 1;
    let c = train::<f64>(&other, &tr, &te, None).unwrap();
    assert_ne!(a.report.step_losses, c.report.step_losses);
}

#[test]
fn orthogonality_holds_every_epoch() {
    let (tr, te) = two_class();
    let mut cfg = quick_config(2, 2);
    cfg.model.blocks = 1;
    cfg.model.layers_per_block = 2;
    let out = train::<f64>(&cfg, &tr, &te, None).unwrap();
    assert!(out.report.ortho_names.len() >= 3);
    for row in &out.report.rows {
        assert_eq!(row.ortho.len(), out.report.ortho_names.len());
        assert!(row.ortho.iter().all(|&o| o <= 1e-8), "{:?}", row.ortho);
    }
}

#[test]
fn outputs_and_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (tr, te) = two_class();
    let out = train::<f64>(&quick_config(2, 1), &tr, &te, Some(dir.path())).unwrap();
    for f in ["report.csv", "params.csv", "model.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let loaded: Model<f64> = checkpoint::load(&dir.path().join("model.ckpt")).unwrap();
    assert_eq!(loaded.cfg, out.best.cfg);
    assert_eq!(loaded.ema, out.best.ema);
    for ((_, a), (_, b)) in loaded.store.iter().zip(out.best.store.iter()) {
        assert_eq!(a, b);
    }
    let x = te.batch::<f64>(&[0, 1, 2]).0;
    assert_eq!(loaded.predict(&x).unwrap(), out.best.predict(&x).unwrap());
    assert_eq!(evaluate(&loaded, &te, 7).unwrap(), out.report.best_test_acc);

    let mut bytes = checkpoint::encode(&out.best);
    assert!(matches!(checkpoint::decode::<f64>(&bytes[..bytes.len() - 3]), Err(Error::Length { .. })));
    bytes[0] = b'X';
    assert!(matches!(checkpoint::decode::<f64>(&bytes), Err(Error::Format(_))));
}

#[test]
fn class_mismatch_is_a_config_error() {
    let tr = synthetic(4, 8, 16, 1).unwrap();
    let te = synthetic(4, 2, 16, 2).unwrap();
    assert!(matches!(train::<f64>(&quick_config(2, 1), &tr, &te, None), Err(Error::Config(_))));
    let small = synthetic(2, 8, 12, 1).unwrap();
    assert!(matches!(train::<f64>(&quick_config(2, 1), &small, &small, None), Err(Error::Config(_))));
}

#[test]
fn bench_reports_every_router() {
    let rows = bench_routing(&[BenchShape { batch: 8, n: 8, d: 8 }], 3, 1, 1.5, 0).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.router.as_str()).collect();
    assert_eq!(names, ["attention", "attention-softmax", "simplified", "dynamic-t3"]);
    let soft = rows.iter().find(|r| r.router == "attention-softmax").unwrap();
    assert_eq!(soft.sparsity, 0.0);
    assert!(rows.iter().all(|r| r.fps > 0.0 && r.median_seconds > 0.0));
    assert!(speedup(&rows, "attention", "dynamic-t3").unwrap() > 0.0);
}

#[test]
fn histograms_reject_unknown_tags() {
    let model = Model::<f64>::new(ModelConfig::shallow_synthetic(2), 0).unwrap();
    let ds = synthetic(2, 4, 16, 0).unwrap();
    let e = histogram_similarity(&model, &ds, &["block9".to_string()], 4).unwrap_err();
    assert!(matches!(e, Error::Config(_)));
    let h = histogram_similarity(&model, &ds, &["pcl".to_string(), "pruned".to_string()], 4).unwrap();
    assert_eq!(h["pcl"].total(), 16 * 15 / 2);
}

#[test]
fn sweep_is_monotone_and_theta_one_keeps_all() {
    let (tr, te) = (synthetic(2, 16, 16, 3).unwrap(), synthetic(2, 8, 16, 4).unwrap());
    let cfg = quick_config(2, 1);
    let rows = sweep_theta::<f64>(&[0.2, 0.5, 1.0], &cfg, &tr, &te).unwrap();
    assert_eq!(rows.last().unwrap().retained, cfg.model.n_caps);
    assert_eq!(rows.last().unwrap().retained_reference, cfg.model.n_caps);
    for w in rows.windows(2) {
        assert!(w[0].retained_reference <= w[1].retained_reference);
    }
    let model = Model::<f64>::new(cfg.model, 0).unwrap();
    let counts: Vec<usize> = [0.05, 0.2, 0.4, 0.6, 0.8, 1.0].iter().map(|&t| retained_at(&model, &te, t, 8).unwrap()).collect();
    assert!(counts.windows(2).all(|w| w[0] <= w[1]), "{counts:?}");
    assert_eq!(*counts.last().unwrap(), 16);
}

#[test]
fn cli_gradcheck_and_train() {
    let exe = env!("CARGO_BIN_EXE_orthcaps");
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(exe).args(["gradcheck"]).arg("--out").arg(dir.path()).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "dataset = synthetic\nsynthetic_classes = 2\nsynthetic_per_class = 16\nclasses = 2\nepochs = 1\nwarmup_epochs = 0\nbatch_size = 16\n").unwrap();
    let out = Command::new(exe).arg("train").arg("--config").arg(&cfg).arg("--out").arg(dir.path()).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("trained 1 epochs"));
    assert!(dir.path().join("model.ckpt").exists());

    std::fs::write(&cfg, "bogus = 1\n").unwrap();
    let out = Command::new(exe).arg("train").arg("--config").arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn duplicated_capsules_fill_the_top_bin() {
    use orthcaps::capsule::{similarity_matrix, CapsuleTensor};
    use orthcaps::train::analysis::BINS;
    use orthcaps::train::Histogram;
    let row = [0.3, -1.2, 0.8, 2.0];
    let data: Vec<f64> = (0..5).flat_map(|k| row.map(|v| v * (k + 1) as f64)).collect();
    let u = CapsuleTensor::new(Tensor::new(&[1, 5, 4, 1, 1], data).unwrap()).unwrap();
    let sim = similarity_matrix(&u.flatten()).unwrap();
    let h = Histogram::from_values(sim.pair_values(&[0, 1, 2, 3, 4]));
    assert_eq!(h.total(), 10);
    assert_eq!(h.counts[BINS - 1], 10);
    assert_eq!(h.fraction_above(0.99), 1.0);
}
