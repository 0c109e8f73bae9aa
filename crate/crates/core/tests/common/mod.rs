#![allow(dead_code)]

use std::path::{Path, PathBuf};

use aal_core::data::{load_cifar10_bin, load_mnist_idx};
use aal_core::{Dataset, Error, Split};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-subset")
}

pub fn mnist(split: Split) -> Dataset {
    let d = mnist_dir();
    let (images, labels) = match split {
        Split::Train => ("train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz"),
        Split::Test => ("t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz"),
    };
    load_mnist_idx(d.join(images), d.join(labels), split).unwrap()
}

/// The golden fixtures parse to the values they were written with.
pub fn golden_fixtures_parse() -> Result<(), String> {
    let f = fixtures();
    for images in ["two-images-idx3-ubyte", "two-images-idx3-ubyte.gz"] {
        let ds = load_mnist_idx(f.join(images), f.join("two-labels-idx1-ubyte"), Split::Test)
            .map_err(|e| format!("{images}: {e}"))?;
        if ds.images().shape() != [2, 1, 28, 28] || ds.labels() != [3, 9] {
            return Err(format!("{images}: shape {:?} labels {:?}", ds.images().shape(), ds.labels()));
        }
        for (i, &v) in ds.images().data().iter().enumerate() {
            if v != ((i * 7) % 256) as f32 / 255.0 {
                return Err(format!("{images}: pixel {i} = {v}"));
            }
        }
    }
    let ds = load_cifar10_bin(f.join("two-records.bin"), Split::Train).map_err(|e| e.to_string())?;
    if ds.images().shape() != [2, 3, 32, 32] || ds.labels() != [7, 0] {
        return Err(format!("cifar: shape {:?} labels {:?}", ds.images().shape(), ds.labels()));
    }
    let px = ds.images().data();
    if px[0] != 1.0 || px[1] != 13.0 / 255.0 || px[3072] != 0.0 || px[3073] != 14.0 / 255.0 {
        return Err("cifar: pixel values differ from fixture".into());
    }
    Ok(())
}

/// Writes each documented malformed input under `dir` and reports whether
/// the parser rejected it with the matching error.
pub fn malformed_variants(dir: &Path) -> Vec<(&'static str, bool)> {
    let f = fixtures();
    let images = std::fs::read(f.join("two-images-idx3-ubyte")).unwrap();
    let labels = std::fs::read(f.join("two-labels-idx1-ubyte")).unwrap();
    let cifar = std::fs::read(f.join("two-records.bin")).unwrap();
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        std::fs::write(&p, bytes).unwrap();
        p
    };
    let good_images = write("images", &images);
    let good_labels = write("labels", &labels);

    let mut bad_magic = images.clone();
    bad_magic[3] = 0x01;
    let mut bad_label_magic = labels.clone();
    bad_label_magic[3] = 0x03;
    let truncated = &images[..images.len() - 100];
    let mut three_labels = labels.clone();
    three_labels[7] = 3;
    three_labels.push(1);
    let mut bad_label = cifar.clone();
    bad_label[3073] = 10;

    let idx = |im: &Path, lb: &Path| load_mnist_idx(im, lb, Split::Train);
    vec![
        (
            "idx image magic",
            matches!(idx(&write("m1", &bad_magic), &good_labels), Err(Error::BadMagic { .. })),
        ),
        (
            "idx label magic",
            matches!(idx(&good_images, &write("m2", &bad_label_magic)), Err(Error::BadMagic { .. })),
        ),
        (
            "idx truncated payload",
            matches!(idx(&write("m3", truncated), &good_labels), Err(Error::TruncatedPayload { .. })),
        ),
        (
            "idx count mismatch",
            matches!(idx(&good_images, &write("m4", &three_labels)), Err(Error::CountMismatch { .. })),
        ),
        (
            "cifar record length",
            matches!(
                load_cifar10_bin(write("m5", &cifar[..cifar.len() - 1]), Split::Train),
                Err(Error::Malformed { .. })
            ),
        ),
        (
            "cifar label byte",
            matches!(load_cifar10_bin(write("m6", &bad_label), Split::Train), Err(Error::Malformed { .. })),
        ),
    ]
}

pub mod anchors {
    //! Hand-written reference trajectories for the reduction anchors.

    use aal_core::model::{ForwardOptions, ModelParams};
    use aal_core::optim::cosine_lr;
    use aal_core::rng::{stream_rng, Stream};
    use aal_core::train::{Direction, StepContext};
    use aal_core::{
        aal_step, AttackConfig, Classifier, KernelKind, SmallCnn, SmallCnnConfig, Tape, Tensor,
        TrainConfig,
    };
    use rand::Rng;

    pub const STEPS: usize = 5;

    fn model(seed: u64) -> SmallCnn<f32> {
        let config = SmallCnnConfig {
            widths: [4, 4, 8],
            ..Default::default()
        };
        SmallCnn::new(config, &mut stream_rng(seed, Stream::Init, 0)).unwrap()
    }

    fn batch(seed: u64, n: usize) -> (Tensor<f32>, Vec<usize>) {
        let mut rng = stream_rng(seed, Stream::Shuffle, 99);
        let x = (0..n * 28 * 28).map(|_| rng.random_range(0.0..=1.0)).collect();
        let labels = (0..n).map(|_| rng.random_range(0..10)).collect();
        (Tensor::from_vec([n, 1, 28, 28], x).unwrap(), labels)
    }

    fn param_grads(model: &SmallCnn<f32>, x: &Tensor<f32>, labels: &[usize]) -> Vec<Tensor<f32>> {
        let mut tape = Tape::new();
        let opts = ForwardOptions {
            param_grad: true,
            ..Default::default()
        };
        let pass = model.forward(&mut tape, x.clone(), opts).unwrap();
        let loss = tape.softmax_cross_entropy(pass.logits, labels).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        pass.params.iter().map(|&p| grads.take(p).unwrap()).collect()
    }

    fn sgd(params: &mut ModelParams<f32>, grads: &[Tensor<f32>], lr: f32, mu: f32, wd: f32) {
        for (p, g) in params.iter_mut().zip(grads) {
            let values = p.value.data_mut();
            let velocity = p.momentum.data_mut();
            for i in 0..values.len() {
                velocity[i] = mu * velocity[i] + (g.data()[i] + wd * values[i]);
                values[i] -= lr * velocity[i];
            }
        }
    }

    fn fgsm_batch(model: &SmallCnn<f32>, x: &Tensor<f32>, labels: &[usize], eps: f32, sign: f32) -> Tensor<f32> {
        let (_, g) = model.loss_and_input_grad(x, labels).unwrap();
        let adv = x
            .data()
            .iter()
            .zip(g.data())
            .map(|(&xv, &gv)| {
                let s = if gv > 0.0 {
                    1.0
                } else if gv < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                (xv + eps * (sign * s)).max(0.0).min(1.0)
            })
            .collect();
        Tensor::from_vec(x.shape().to_vec(), adv).unwrap()
    }

    fn first_difference(a: &SmallCnn<f32>, b: &SmallCnn<f32>) -> Option<String> {
        for (pa, pb) in a.params().iter().zip(b.params().iter()) {
            for (what, ta, tb) in [("value", &pa.value, &pb.value), ("momentum", &pa.momentum, &pb.momentum)] {
                if let Some(i) = ta.data().iter().zip(tb.data()).position(|(x, y)| x.to_bits() != y.to_bits()) {
                    return Some(format!("{} {what}[{i}]: {} vs {}", pa.name, ta.data()[i], tb.data()[i]));
                }
            }
        }
        None
    }

    /// Runs `config` through `aal_step` next to an independent loop that does
    /// clean SGD (`fgsm_sign = None`) or FGSM training with the given sign.
    pub fn compare(config: &TrainConfig, fgsm_sign: Option<f32>) -> Result<(), String> {
        let mut model = model(3);
        let mut reference = model.clone();
        let mut history = None;
        let mut rng = stream_rng(0, Stream::TrainAttack, 0);
        for step in 0..STEPS {
            let (x, labels) = batch(step as u64, 8);
            let lr = cosine_lr(step, STEPS, config.lr0);
            let ctx = StepContext { epoch: 0, step, lr };
            aal_step(&mut model, &x, &labels, &mut history, config, ctx, &mut rng).map_err(|e| e.to_string())?;

            let x_train = match fgsm_sign {
                None => x,
                Some(sign) => fgsm_batch(&reference, &x, &labels, config.attack.epsilon as f32, sign),
            };
            let grads = param_grads(&reference, &x_train, &labels);
            sgd(reference.params_mut(), &grads, lr as f32, config.momentum as f32, config.weight_decay as f32);
            if let Some(diff) = first_difference(&model, &reference) {
                return Err(format!("step {step}: {diff}"));
            }
        }
        Ok(())
    }

    /// `attack = none`, `ξ₂ = 0` against plain SGD.
    pub fn clean_sgd() -> Result<(), String> {
        let config = TrainConfig {
            attack: AttackConfig::none(),
            xi2: 0.0,
            lr0: 0.05,
            ..Default::default()
        };
        compare(&config, None)
    }

    /// `k ≡ 1`, `ξ₂ = 0`, `ζ = 1` against FGSM training, in both sign conventions.
    pub fn fgsm_training() -> Result<(), String> {
        for (direction, sign) in [(Direction::Descent, -1.0), (Direction::Ascent, 1.0)] {
            let config = TrainConfig {
                attack: AttackConfig::fgsm(8.0 / 255.0),
                xi2: 0.0,
                zeta: 1.0,
                lr0: 0.05,
                fgsm_direction: direction,
                ..Default::default()
            };
            assert_eq!(config.attack.kernel, KernelKind::Global);
            compare(&config, Some(sign)).map_err(|e| format!("{direction:?}: {e}"))?;
        }
        Ok(())
    }
}
