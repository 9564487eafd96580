use volta_core::data::{FeatureDataset, Role};
use volta_core::synth::{make_blobs, BlobSpec};
use volta_core::train::{accuracy_on, dataset_loss, train, TrainConfig, Variant};
use volta_core::model::Mode;

fn two_blobs() -> (FeatureDataset, FeatureDataset) {
    let spec = BlobSpec {
        classes: 2,
        dim: 8,
        per_class: 150,
        ood_per_class: 1,
        separation: 8.0,
        std: 1.0,
        seed: 42,
    };
    let (id, _) = make_blobs(&spec).unwrap();
    let (mut tr, mut va) = (Vec::new(), Vec::new());
    for i in 0..id.len() {
        if i % 150 < 100 { tr.push(i) } else { va.push(i) }
    }
    (id.subset(&tr, Role::Train), id.subset(&va, Role::Val))
}

fn config() -> TrainConfig {
    TrainConfig {
        epochs: 100,
        batch_size: 16,
        embed_dim: 8,
        seed: 42,
        ..TrainConfig::default()
    }
}

#[test]
fn separable_blobs_train_to_zero_error() {
    let (tr, va) = two_blobs();
    let (model, hist) = train(&tr, &va, &config()).unwrap();
    assert_eq!(accuracy_on(&model, &tr).unwrap(), 1.0);
    assert!(hist.best_val_loss() < hist.initial_val_loss);
    let last = hist.epochs.last().unwrap();
    eprintln!("{:?} epochs={}", last, hist.epochs.len());
    assert!(last.train_loss < 0.05, "final train loss {}", last.train_loss);
}

#[test]
fn training_is_bit_reproducible() {
    let (tr, va) = two_blobs();
    let cfg = TrainConfig { epochs: 5, ..config() };
    let a = train(&tr, &va, &cfg).unwrap();
    let b = train(&tr, &va, &cfg).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}

#[test]
fn restored_model_has_minimum_validation_loss() {
    let (tr, va) = two_blobs();
    let (model, hist) = train(&tr, &va, &TrainConfig { epochs: 15, patience: 3, ..config() }).unwrap();
    assert_eq!(dataset_loss(&model, &va).unwrap(), hist.best_val_loss());
}

#[test]
fn patience_zero_stops_at_first_stall() {
    let (tr, va) = two_blobs();
    let (_, hist) = train(&tr, &va, &TrainConfig { epochs: 200, patience: 0, ..config() }).unwrap();
    let n = hist.epochs.len();
    if hist.stopped_early {
        let last = hist.epochs[n - 1].val_loss;
        let before = hist.epochs[..n - 1].iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert!(last >= before);
        for w in hist.epochs[..n - 1].windows(2) {
            assert!(w[1].val_loss < w[0].val_loss);
        }
    } else {
        assert_eq!(n, 200);
    }
}

#[test]
fn fixed_tau_variant_keeps_unit_temperature() {
    let (tr, va) = two_blobs();
    let (model, hist) = train(&tr, &va, &TrainConfig { epochs: 5, variant: Variant::FixedTau, tau0: 0.3, ..config() }).unwrap();
    assert!(hist.epochs.iter().all(|e| e.tau == 1.0));
    assert_eq!(model.temperature.tau, 1.0);
}

#[test]
fn prototypes_stay_unit_norm_after_training() {
    let (tr, va) = two_blobs();
    let (model, _) = train(&tr, &va, &TrainConfig { epochs: 3, ..config() }).unwrap();
    for row in model.prototypes.unit().row_iter() {
        let n: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-10);
    }
    assert!(model.temperature.tau >= 1e-3);
    let _ = model.forward(va.features(), Mode::Eval).unwrap();
}
