use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dvk_core::dosimetry::{generate_dataset, Dataset, GenerateConfig, Split, TissueClass};
use dvk_core::loss::{mean_iou, soft_iou};
use dvk_core::nn::conv::conv2d_forward;
use dvk_core::nn::{LayerSpec, Mode};
use dvk_core::optim::Optimizer;
use dvk_core::unet::eval::evaluate_predictions;
use dvk_core::unet::{build_unet, train_step, Checkpoint, TrainConfig, UNetSpec};
use dvk_core::{Error, Tensor};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

#[test]
fn conv2d_matches_naive_cross_correlation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (n, h, w, c, k, o) = (2, 7, 6, 3, 3, 4);
    let x = random(&mut rng, &[n, h, w, c]);
    let wt = random(&mut rng, &[k, k, c, o]);
    let b = random(&mut rng, &[o]);
    let y = conv2d_forward(&x, &wt, &b).unwrap();
    let (oh, ow) = (h - k + 1, w - k + 1);
    assert_eq!(y.shape(), &[n, oh, ow, o]);
    let xi = |bb: usize, i: usize, j: usize, cc: usize| x.data()[((bb * h + i) * w + j) * c + cc];
    let wi = |a: usize, bb: usize, cc: usize, oo: usize| wt.data()[((a * k + bb) * c + cc) * o + oo];
    for bb in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                for oo in 0..o {
                    let mut acc = b.data()[oo];
                    for a in 0..k {
                        for q in 0..k {
                            for cc in 0..c {
                                acc += wi(a, q, cc, oo) * xi(bb, i + a, j + q, cc);
                            }
                        }
                    }
                    let got = y.data()[((bb * oh + i) * ow + j) * o + oo];
                    assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                }
            }
        }
    }
}

#[test]
fn soft_iou_hand_values() {
    let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
    let y = Tensor::new(vec![3], vec![2.0, 2.0, 1.0]).unwrap();
    // Σmin = 1 + 2 + 1, Σmax = 2 + 2 + 3
    assert!((soft_iou(&x, &y).unwrap() - 4.0 / 7.0).abs() < 1e-15);
    let a = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.5, 0.5]).unwrap();
    let b = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.5, 0.5]).unwrap();
    // per-sample mean of 0 and 1
    assert!((mean_iou(&a, &b).unwrap() - 0.5).abs() < 1e-15);
}

#[test]
fn unet_blocks_put_batch_norm_after_the_activation() {
    let net = build_unet(&UNetSpec::default()).unwrap();
    let kinds: Vec<&str> = net.layers.iter().map(|l| l.spec.kind()).collect();
    for (i, l) in net.layers.iter().enumerate() {
        if matches!(l.spec, LayerSpec::Conv2D { kernel: (3, 3), .. }) {
            assert_eq!(&kinds[i + 1..i + 3], &["leaky_relu", "batch_norm"], "after layer {i}");
        }
        if let LayerSpec::LeakyRelu { alpha } = l.spec {
            assert_eq!(alpha, 5.5);
        }
    }
    assert_eq!(kinds.last(), Some(&"reshape"));
    assert_eq!(kinds[kinds.len() - 2], "sigmoid");
}

#[test]
fn dataset_survives_disk_round_trip() {
    let data = generate_dataset(&GenerateConfig {
        per_class: 3,
        seed: 5,
        ..GenerateConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    data.write(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.manifest(), data.manifest());
    for (a, b) in data.samples.iter().zip(&back.samples) {
        assert_eq!((a.index, a.class, a.split), (b.index, b.class, b.split));
        let same = |p: &Tensor, q: &Tensor| p.data().iter().zip(q.data()).all(|(u, v)| u.to_bits() == v.to_bits());
        assert!(same(&a.density, &b.density) && same(&a.dose, &b.dose));
    }
    // 15 pairs at 0.7 train
    assert_eq!(data.split(Split::Train).count(), 11);
    assert_eq!(data.split(Split::Val).count(), 4);
}

#[test]
fn dataset_load_rejects_tampered_manifest() {
    let data = generate_dataset(&GenerateConfig {
        per_class: 1,
        ..GenerateConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    data.write(dir.path()).unwrap();
    let manifest = dir.path().join("manifest.txt");
    let text = std::fs::read_to_string(&manifest).unwrap();
    std::fs::write(&manifest, text.replace("density/00000.dvkt", "density/99999.dvkt")).unwrap();
    assert!(matches!(Dataset::load(dir.path()), Err(Error::Io(_)) | Err(Error::Format(_))));
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let spec = UNetSpec {
        filter_divisor: 8,
        ..UNetSpec::default()
    };
    let cfg = TrainConfig {
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::from_fn(vec![2, 9, 9, 9], |_| rng.random_range(0.1..0.9));
    let t = Tensor::from_fn(vec![2, 9, 9, 9], |_| rng.random_range(0.1..0.9));

    let mut net = build_unet(&spec).unwrap();
    let mut opt = Optimizer::new(cfg.optimizer_config()).unwrap();
    for _ in 0..2 {
        train_step(&mut net, &mut opt, &x, &t, cfg.loss).unwrap();
    }
    let ck = Checkpoint::capture(&net, &spec, Some(&opt), 2);
    let mut resumed = ck.restore().unwrap();
    let mut resumed_opt = ck.restore_optimizer(&resumed).unwrap().expect("optimizer state");
    net.reseed(77);
    resumed.reseed(77);
    for _ in 0..3 {
        let a = train_step(&mut net, &mut opt, &x, &t, cfg.loss).unwrap();
        let b = train_step(&mut resumed, &mut resumed_opt, &x, &t, cfg.loss).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
    for (p, q) in net.params().zip(resumed.params()) {
        assert!(p.value.data().iter().zip(q.value.data()).all(|(u, v)| u.to_bits() == v.to_bits()), "{}", p.name);
    }
    net.set_mode(Mode::Infer);
    resumed.set_mode(Mode::Infer);
    assert_eq!(net.predict(&x).unwrap().data(), resumed.predict(&x).unwrap().data());
}

#[test]
fn perfect_predictions_score_perfectly() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let targets: Vec<Tensor> = (0..4).map(|_| Tensor::from_fn(vec![9, 9, 9], |_| rng.random_range(0.1..0.9))).collect();
    let classes = [TissueClass::Bone, TissueClass::Lung, TissueClass::Lung, TissueClass::Soft];
    let report = evaluate_predictions(&targets, &targets, &classes).unwrap();
    assert_eq!(report.total.iou, 1.0);
    assert_eq!(report.total.mae, 0.0);
    assert_eq!(report.total.samples, 4);
    // five organ rows plus the soft-tissue row that was seen
    assert_eq!(report.classes.len(), 6);
    let kidney = report.classes.iter().find(|(c, _)| *c == TissueClass::Kidney).unwrap();
    assert!(kidney.1.is_none());
    assert!(report.render().lines().last().unwrap().starts_with("total"));
}
