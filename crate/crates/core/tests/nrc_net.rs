use nrc_core::autodiff::{Graph, ParamSet, Tensor};
use nrc_core::nrc_net::{batch_tensor, train, Dataset, NrcNet, NrcNetConfig, TrainConfig};
use nrc_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Parameter count of the default network, frozen.
const DEFAULT_PARAM_COUNT: usize = 1_086_069;
const MOBILENET_V2_PARAMS: usize = 2_571_589;

fn random_batch(n: usize, size: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![n, size, size, 3], (0..n * size * size * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
}

fn conv(k: usize, cin: usize, cout: usize) -> usize {
    k * k * cin * cout + cout
}

fn dense(din: usize, dout: usize) -> usize {
    din * dout + dout
}

fn lstm(din: usize, h: usize) -> usize {
    4 * h * (din + h + 1)
}

#[test]
fn parameter_count_is_frozen_and_under_budget() {
    // Independent tally of the layer list.
    let mut expected = 0;
    let mut cin = 3;
    for c in [16, 32, 64, 64, 128, 128] {
        expected += conv(3, cin, c) + 2 * c;
        cin = c;
    }
    expected += conv(1, 128, 32) + conv(1, 32, 64) + conv(3, 32, 64) + 2 * conv(3, 128, 128);
    expected += dense(128, 16) + dense(16, 128);
    expected += 2 * lstm(384, 64) + 2 * lstm(128, 32);
    let mut din = 64;
    for u in [512, 256, 128, 64, 32] {
        expected += dense(din, u);
        din = u;
    }
    expected += dense(32, 5);
    assert_eq!(expected, DEFAULT_PARAM_COUNT);

    let model = NrcNet::<f32>::new(NrcNetConfig::default(), 0).unwrap();
    assert_eq!(model.count_params(), DEFAULT_PARAM_COUNT);
    assert!(model.count_params() < MOBILENET_V2_PARAMS);

    let mut lone = ParamSet::<f32>::new();
    lone.add("w", Tensor::zeros(&[10, 5]));
    lone.add("b", Tensor::zeros(&[5]));
    assert_eq!(lone.count(), 55);
    assert_eq!(conv(3, 3, 16), 448);
}

#[test]
fn config_invariants_are_enforced() {
    let mut c = NrcNetConfig::default();
    c.sfeb_channels.pop();
    assert!(matches!(NrcNet::<f32>::new(c, 0), Err(Error::Config(_))));
    let mut c = NrcNetConfig::default();
    c.tcb_units.push(16);
    assert!(matches!(NrcNet::<f32>::new(c, 0), Err(Error::Config(_))));
    let c = NrcNetConfig {
        dropout: 1.0,
        ..NrcNetConfig::default()
    };
    assert!(matches!(NrcNet::<f32>::new(c, 0), Err(Error::Config(_))));
    let c = NrcNetConfig {
        input_size: 32,
        ..NrcNetConfig::default()
    };
    assert!(matches!(NrcNet::<f32>::new(c, 0), Err(Error::Config(_))));
}

#[test]
fn same_seed_same_initial_parameters() {
    let a = NrcNet::<f32>::new(NrcNetConfig::default(), 5).unwrap();
    let b = NrcNet::<f32>::new(NrcNetConfig::default(), 5).unwrap();
    let c = NrcNet::<f32>::new(NrcNetConfig::default(), 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.params, c.params);
}

#[test]
fn default_forward_shape_normalization_and_near_uniform() {
    let model = NrcNet::<f32>::new(NrcNetConfig::default(), 1).unwrap();
    let mut max_probs = Vec::new();
    for s in 0..4 {
        let probs = model.predict(&random_batch(16, 224, s)).unwrap();
        assert_eq!(probs.shape, [16, 5]);
        for row in probs.data.chunks(5) {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            max_probs.push(row.iter().cloned().fold(0.0f32, f32::max));
        }
    }
    let mean = max_probs.iter().sum::<f32>() / max_probs.len() as f32;
    assert!(mean < 0.6, "mean max probability {mean}");
}

#[test]
fn modes_touch_only_their_state() {
    let mut model = NrcNet::<f32>::new(NrcNetConfig::reduced(), 2).unwrap();
    let x = random_batch(3, 224, 9);
    let before = model.clone();
    let a = model.predict(&x).unwrap();
    let b = model.predict(&x).unwrap();
    assert_eq!(a, b);
    assert_eq!(model, before);

    model.forward_graph(&x, true).unwrap();
    assert_eq!(model.params, before.params);
    assert_ne!(model.bn, before.bn);

    assert!(matches!(model.predict(&random_batch(1, 200, 0)), Err(Error::Shape(_))));
}

#[test]
fn excitation_preserves_zero_and_sign() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::new(vec![1, 2, 2, 2], vec![0.0, -1.0, 0.0, 2.0, 0.0, -3.0, 0.0, 0.5]).unwrap());
    let z = g.input(Tensor::new(vec![1, 2], vec![3.0, -4.0]).unwrap());
    let s = g.sigmoid(z);
    let y = g.channel_scale(x, s).unwrap();
    for (&out, &inp) in g.value(y).data.iter().zip(&g.value(x).data) {
        assert_eq!(out == 0.0, inp == 0.0);
        assert_eq!(out.signum(), inp.signum());
        assert!(out.abs() < inp.abs() || inp == 0.0);
    }
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut model = NrcNet::<f32>::new(NrcNetConfig::reduced(), 3).unwrap();
    model.forward_graph(&random_batch(2, 224, 1), true).unwrap();
    model.save(&path).unwrap();
    let back = NrcNet::<f32>::load(&path).unwrap();
    assert_eq!(back, model);
    let x = random_batch(2, 224, 4);
    let (a, b) = (model.predict(&x).unwrap(), back.predict(&x).unwrap());
    assert!(a.data.iter().zip(&b.data).all(|(p, q)| p.to_bits() == q.to_bits()));

    std::fs::write(&path, b"{\"dtype\":\"f32\"}\n").unwrap();
    assert!(matches!(NrcNet::<f32>::load(&path), Err(Error::Checkpoint(_))));
}

fn toy_dataset(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = Dataset::default();
    for i in 0..n {
        let label = i % 5;
        // Class shows up as a bright horizontal band.
        let img: Vec<f32> = (0..224 * 224 * 3)
            .map(|j| {
                let row = j / (224 * 3);
                let band = row / 45 == label;
                (if band { 0.8 } else { 0.1 }) + 0.1 * rng.random::<f32>()
            })
            .collect();
        d.images.push(img);
        d.labels.push(label);
    }
    d
}

#[test]
fn zero_epochs_changes_nothing() {
    let mut model = NrcNet::<f32>::new(NrcNetConfig::reduced(), 0).unwrap();
    let before = model.clone();
    let data = toy_dataset(5, 1);
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let h = train(&mut model, &data, &data, &cfg).unwrap();
    assert!(h.epochs.is_empty());
    assert_eq!(model, before);
}

#[test]
fn training_is_deterministic_and_records_history() {
    let data = toy_dataset(10, 2);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        seed: 11,
        ..TrainConfig::default()
    };
    let run = || {
        let mut model = NrcNet::<f32>::new(NrcNetConfig::reduced(), 4).unwrap();
        let h = train(&mut model, &data, &data, &cfg).unwrap();
        (h, model)
    };
    let (h1, m1) = run();
    let (h2, m2) = run();
    assert_eq!(h1, h2);
    assert_eq!(m1, m2);
    assert_eq!(h1.epochs.len(), 2);
    let csv = h1.to_csv();
    assert!(csv.starts_with("epoch,train_loss,train_acc,val_loss,val_acc\n"));
    assert_eq!(csv.lines().count(), 3);
    let best = h1.best_epoch.unwrap();
    assert_eq!(h1.best_val_acc, Some(h1.epochs[best - 1].val_acc));
}

#[test]
fn batch_tensor_checks_image_size() {
    let img = vec![0.5f32; 224 * 224 * 3];
    let t = batch_tensor::<f64>(&[&img, &img], 224, 3).unwrap();
    assert_eq!(t.shape, [2, 224, 224, 3]);
    assert!(matches!(batch_tensor::<f64>(&[&img[1..]], 224, 3), Err(Error::Shape(_))));
}
