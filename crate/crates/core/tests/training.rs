use btn::datagen::{generate_split, Sample, SceneConfig, Split};
use btn::model::{build_mcnn_micro, ColumnConfig, ModelConfig, Network};
use btn::rng::{CounterRng, Stream};
use btn::trainer::{checkpoint_to_bytes, Trainer, TrainConfig};
use btn::Tensor;
use std::path::PathBuf;

fn tiny_model(seed: u64) -> ModelConfig {
    ModelConfig {
        input_shape: [1, 16, 16],
        columns: vec![
            ColumnConfig {
                kernels: vec![5, 3, 3],
                channels: vec![3, 4, 2],
            },
            ColumnConfig {
                kernels: vec![3, 3, 1],
                channels: vec![2, 3, 2],
            },
        ],
        seed,
    }
}

fn tiny_data() -> (Vec<Sample<f64>>, Vec<Sample<f64>>) {
    let scene = SceneConfig {
        canvas: [16, 16],
        count_range: [1, 5],
        seed: 3,
        ..SceneConfig::default()
    };
    (
        generate_split(&scene, 16, Split::Train).unwrap().samples,
        generate_split(&scene, 6, Split::Val).unwrap().samples,
    )
}

fn run(model: ModelConfig, cfg: TrainConfig, train: &[Sample<f64>], val: &[Sample<f64>]) -> Trainer {
    let mut t = Trainer::new(model, cfg).unwrap();
    while !t.is_done() {
        t.run_epoch(train, val).unwrap();
    }
    t
}

#[test]
fn seed_13_twice_gives_identical_checkpoints() {
    let (train, val) = tiny_data();
    let cfg = TrainConfig {
        total_epochs: 4,
        warmup_epochs: 1,
        ramp_epochs: 2,
        batch_size: 4,
        seed: 13,
        ..TrainConfig::default()
    };
    let a = run(tiny_model(13), cfg.clone(), &train, &val);
    let b = run(tiny_model(13), cfg, &train, &val);
    assert_eq!(
        checkpoint_to_bytes(&a.checkpoint()).unwrap(),
        checkpoint_to_bytes(&b.checkpoint()).unwrap()
    );
}

/// Hand-written SGD with momentum on `(1/2N) sum ||f(x) - y||^2`, shuffled
/// with the same stream as the trainer.
fn plain_mse(model: &ModelConfig, cfg: &TrainConfig, train: &[Sample<f64>]) -> Vec<f64> {
    let mut m = build_mcnn_micro::<f64>(model).unwrap();
    let mut rng = CounterRng::new(cfg.seed, Stream::Shuffle);
    let mut velocity = m.zero_grads();
    for _ in 0..cfg.total_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng.shuffle(&mut order);
        for idx in order.chunks(cfg.batch_size) {
            let mut grads = m.zero_grads();
            for &i in idx {
                let (pred, tape) = m.forward_taped(&train[i].image).unwrap();
                let g = pred.sub(&train[i].gt_density).unwrap().scale(1.0 / idx.len() as f64);
                m.backward(&tape, &g, Some(&mut grads), false).unwrap();
            }
            for ((p, g), v) in m.parameters_mut().into_iter().zip(&grads).zip(&mut velocity) {
                for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                    *vi = cfg.momentum * *vi + gi;
                    *pi -= cfg.learning_rate * *vi;
                }
            }
        }
    }
    m.flat_parameters()
}

#[test]
fn pinned_kappa_without_reg_is_plain_mse_training() {
    let (train, val) = tiny_data();
    let cfg = TrainConfig {
        total_epochs: 3,
        warmup_epochs: 1,
        ramp_epochs: 1,
        kappa_end: 1.0,
        lambda_l1: 0.0,
        epsilon_target: 0.05,
        batch_size: 5,
        learning_rate: 5e-3,
        seed: 4,
        ..TrainConfig::default()
    };
    let t = run(tiny_model(4), cfg.clone(), &train, &val);
    assert!(t.log().iter().all(|r| r.certify == 0.0 && r.reg == 0.0));
    let expected = plain_mse(&tiny_model(4), &cfg, &train);
    let got = t.model().flat_parameters();
    let worst = got
        .iter()
        .zip(&expected)
        .map(|(a, b)| (a - b).abs() / b.abs().max(1e-3))
        .fold(0.0, f64::max);
    assert!(worst < 1e-10, "max relative parameter gap {worst:e}");
}

#[test]
fn certified_training_reduces_certified_error() {
    let (train, val) = tiny_data();
    let cfg = TrainConfig {
        total_epochs: 12,
        warmup_epochs: 2,
        ramp_epochs: 5,
        batch_size: 4,
        learning_rate: 5e-3,
        epsilon_target: 2.0 / 255.0,
        seed: 5,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(tiny_model(5), cfg).unwrap();
    let before = btn::metrics::evaluate(t.model(), &val, &btn::bounds::PerturbationSpec::linf(2.0 / 255.0))
        .unwrap()
        .0
        .ct_mae;
    while !t.is_done() {
        t.run_epoch(&train, &val).unwrap();
    }
    let after = t.log().last().unwrap().val_ct_mae;
    assert!(after < before, "certify-tight MAE {before} -> {after}");
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden_forward.txt")
}

/// Seed-7 default model on the first synthetic test image. Each line is the
/// bit pattern of one output value. Set `BTN_BLESS=1` to rewrite.
#[test]
fn seeded_forward_matches_golden_file() {
    let mut m = build_mcnn_micro::<f64>(&ModelConfig {
        seed: 7,
        ..ModelConfig::default()
    })
    .unwrap();
    // Zero biases would leave most units off on blank background.
    let mut rng = CounterRng::new(7, Stream::Sampling);
    for (i, p) in m.parameters_mut().into_iter().enumerate() {
        if i % 2 == 1 {
            p.data_mut().iter_mut().for_each(|v| *v = rng.uniform(-0.05, 0.05));
        }
    }
    let x = &generate_split(&SceneConfig::default(), 1, Split::Test).unwrap().samples[0].image;
    let y: Tensor<f64> = m.forward(x).unwrap();
    let text: String = y.data().iter().map(|v| format!("{:016x}\n", v.to_bits())).collect();
    let path = golden_path();
    if std::env::var_os("BTN_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, &text).unwrap();
    }
    let golden = std::fs::read_to_string(&path).unwrap();
    assert_eq!(golden.lines().count(), 256);
    assert!(y.data().iter().any(|&v| v != 0.0));
    assert_eq!(text, golden);
}
