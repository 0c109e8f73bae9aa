mod common;

use aal_core::attention::{AssociationParams, AttentionState};
use aal_core::data::checkpoint::{decode_checkpoint, encode_checkpoint, MAGIC};
use aal_core::data::{dump_attention_pgm, load_checkpoint, save_checkpoint};
use aal_core::rng::{stream_rng, RngState, Stream};
use aal_core::train::TrainingState;
use aal_core::{CouplingHistory, Error, SmallCnn, SmallCnnConfig, Split, Tensor};
use rand::Rng;

#[test]
fn golden_fixtures_parse() {
    common::golden_fixtures_parse().unwrap();
}

#[test]
fn malformed_inputs_are_rejected_with_typed_errors() {
    let dir = tempfile::tempdir().unwrap();
    for (name, rejected) in common::malformed_variants(dir.path()) {
        assert!(rejected, "{name} was not rejected with its documented error");
    }
}

#[test]
fn missing_file_is_an_io_error() {
    let err = aal_core::data::load_cifar10_bin("/nonexistent/batch.bin", Split::Train).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
}

#[test]
fn vendored_mnist_subset_is_balanced() {
    let train = common::mnist(Split::Train);
    let test = common::mnist(Split::Test);
    assert_eq!((train.len(), test.len()), (5000, 1000));
    for (data, per_class) in [(&train, 500), (&test, 100)] {
        let mut counts = [0usize; 10];
        for &l in data.labels() {
            counts[l] += 1;
        }
        assert_eq!(counts, [per_class; 10]);
    }
}

#[test]
fn balanced_subset_is_deterministic_per_seed() {
    let train = common::mnist(Split::Train);
    let a = train.balanced_subset(20, Some(3)).unwrap();
    let b = train.balanced_subset(20, Some(3)).unwrap();
    let c = train.balanced_subset(20, Some(4)).unwrap();
    assert_eq!(a.len(), 200);
    assert_eq!(a.images(), b.images());
    assert_ne!(a.images(), c.images());
}

fn trained_state(seed: u64) -> (SmallCnn<f32>, TrainingState<f32>) {
    let config = SmallCnnConfig {
        widths: [2, 3, 4],
        ..Default::default()
    };
    let mut model = SmallCnn::new(config, &mut stream_rng(seed, Stream::Init, 0)).unwrap();
    let mut rng = stream_rng(seed, Stream::TrainAttack, 0);
    for p in model.params_mut().iter_mut() {
        for v in p.momentum.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    model.set_normalization(vec![0.13], vec![0.31]).unwrap();
    // Advance the generator so the saved position is not trivially zero.
    for _ in 0..37 {
        let _: u32 = rng.random();
    }
    let map = |rng: &mut rand_chacha::ChaCha8Rng| {
        Tensor::from_vec([1, 1, 28, 28], (0..784).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    };
    let history = CouplingHistory {
        prev_m: map(&mut rng),
        prev_delta: map(&mut rng),
    };
    let state = TrainingState {
        epoch: 3,
        step: 237,
        rng: RngState::capture(&rng),
        history: Some(history),
    };
    (model, state)
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (model, state) = trained_state(1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    let run = serde_json::json!({ "lr0": 0.1, "seed": 1 });
    save_checkpoint(&path, &model, &state, &run).unwrap();
    let back = load_checkpoint(&path).unwrap();

    for (a, b) in model.params().iter().zip(back.model.params().iter()) {
        assert_eq!(a.name, b.name);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value));
        assert_eq!(bits(&a.momentum), bits(&b.momentum));
    }
    assert_eq!(back.model, model);
    assert_eq!(back.state, state);
    assert_eq!(back.run_config, run);

    // The restored generator continues the same sequence.
    let (mut r1, mut r2) = (state.rng.restore(), back.state.rng.restore());
    for _ in 0..10 {
        assert_eq!(r1.random::<u64>(), r2.random::<u64>());
    }

    let no_history = TrainingState { history: None, ..state };
    let bytes = encode_checkpoint(&model, &no_history, &run).unwrap();
    assert_eq!(decode_checkpoint(&bytes).unwrap().state, no_history);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let (model, state) = trained_state(2);
    let bytes = encode_checkpoint(&model, &state, &serde_json::Value::Null).unwrap();

    let mut flipped = bytes.clone();
    let mid = bytes.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(matches!(decode_checkpoint(&flipped), Err(Error::Checksum { .. })));

    let mut version = bytes.clone();
    version[MAGIC.len()] += 1;
    assert!(matches!(
        decode_checkpoint(&version),
        Err(Error::CheckpointVersion { found: 2, expected: 1 })
    ));

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(decode_checkpoint(&magic), Err(Error::CheckpointMagic)));
    assert!(matches!(decode_checkpoint(&bytes[..4]), Err(Error::CheckpointMagic)));

    assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    // Header only: every section is missing.
    assert!(matches!(
        decode_checkpoint(&bytes[..MAGIC.len() + 4]),
        Err(Error::MissingSection(_))
    ));
}

#[test]
fn attention_dump_names_and_values() {
    let m = Tensor::from_vec([2, 1, 2, 2], vec![1.0f64, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5]).unwrap();
    let zeros = Tensor::<f64>::zeros([2, 1, 2, 2]);
    let state = AttentionState::associate(
        m,
        &zeros,
        zeros.clone(),
        &zeros,
        None,
        &AssociationParams::default(),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("maps");
    let files = dump_attention_pgm(&state, &out).unwrap();
    let mut names: Vec<String> = files
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(
        names,
        ["0_M.pgm", "0_Massoc.pgm", "0_Mhat.pgm", "1_M.pgm", "1_Massoc.pgm", "1_Mhat.pgm"]
    );
    let header = b"P5\n2 2\n255\n";
    let first = std::fs::read(out.join("0_M.pgm")).unwrap();
    assert_eq!(&first[..header.len()], header);
    assert_eq!(&first[header.len()..], &[255; 4]);
    let second = std::fs::read(out.join("1_Massoc.pgm")).unwrap();
    assert_eq!(&second[header.len()..], &[128; 4]);
}
