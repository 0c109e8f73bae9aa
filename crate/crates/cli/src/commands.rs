use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use aal_core::data::{dump_attention_pgm, load_checkpoint, load_cifar10_bin, load_mnist_idx, save_checkpoint, Checkpoint};
use aal_core::gradcheck::{run_suite, worst, Fault, SUITE};
use aal_core::rng::{stream_rng, Stream};
use aal_core::train::{associate_batch, EvalConfig};
use aal_core::{Dataset, KernelKind, MetricsRow, Mode, SmallCnn, Split, Tensor, Trainer};
use log::info;
use serde::Serialize;

use crate::config::{DatasetKind, RunConfig};
use crate::error::CliError;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const CONFIG_ECHO_FILE: &str = "config.json";

/// Largest accepted gradient-check error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn first_existing(root: &Path, name: &str) -> Result<PathBuf, CliError> {
    let plain = root.join(name);
    let gz = root.join(format!("{name}.gz"));
    [plain, gz]
        .into_iter()
        .find(|p| p.is_file())
        .ok_or_else(|| CliError::Config(format!("missing {name}[.gz] under {}", root.display())))
}

fn concat(parts: Vec<Dataset>, split: Split) -> Result<Dataset, CliError> {
    let mut parts = parts.into_iter();
    let first = parts.next().ok_or_else(|| CliError::Config("no data files found".into()))?;
    let mut shape = first.images().shape().to_vec();
    let mut images = first.images().data().to_vec();
    let mut labels = first.labels().to_vec();
    for p in parts {
        images.extend_from_slice(p.images().data());
        labels.extend_from_slice(p.labels());
    }
    shape[0] = labels.len();
    Ok(Dataset::new(Tensor::from_vec(shape, images)?, labels, first.num_classes(), split)?)
}

/// Loads one split as configured, applying the balanced subset if set.
pub fn load_split(config: &RunConfig, split: Split) -> Result<Dataset, CliError> {
    let root = config.data_root()?;
    let full = match config.dataset.kind {
        DatasetKind::Mnist => {
            let prefix = match split {
                Split::Train => "train",
                Split::Test => "t10k",
            };
            load_mnist_idx(
                first_existing(&root, &format!("{prefix}-images-idx3-ubyte"))?,
                first_existing(&root, &format!("{prefix}-labels-idx1-ubyte"))?,
                split,
            )?
        }
        DatasetKind::Cifar10 => {
            let names: Vec<String> = match split {
                Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
                Split::Test => vec!["test_batch.bin".into()],
            };
            let parts = names
                .iter()
                .map(|n| root.join(n))
                .filter(|p| p.is_file())
                .map(|p| load_cifar10_bin(p, split))
                .collect::<Result<Vec<_>, _>>()?;
            if parts.is_empty() {
                return Err(CliError::Config(format!(
                    "no CIFAR-10 {split:?} batches under {}",
                    root.display()
                )));
            }
            concat(parts, split)?
        }
    };
    let per_class = match split {
        Split::Train => config.dataset.train_per_class,
        Split::Test => config.dataset.test_per_class,
    };
    Ok(match per_class {
        Some(k) => full.balanced_subset(k, None)?,
        None => full,
    })
}

fn build_model(config: &RunConfig, train: &Dataset) -> Result<SmallCnn<f32>, CliError> {
    let model_config = config.model_config(train.channels(), train.image_size(), train.num_classes());
    let mut model = SmallCnn::new(model_config, &mut stream_rng(config.train.seed, Stream::Init, 0))?;
    let (mean, std) = train.normalization();
    model.set_normalization(mean.to_vec(), std.to_vec())?;
    Ok(model)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("config serializes");
    std::fs::write(path, text + "\n").map_err(CliError::io(format!("writing {}", path.display())))
}

/// Trains one configuration into `out_dir` and returns its metrics.
pub fn train_run(config: &RunConfig, out_dir: &Path) -> Result<Vec<MetricsRow>, CliError> {
    let mut effective = config.effective()?;
    effective.output_dir = out_dir.to_path_buf();
    std::fs::create_dir_all(out_dir).map_err(CliError::io(format!("creating {}", out_dir.display())))?;
    write_json(&out_dir.join(CONFIG_ECHO_FILE), &effective)?;

    let train = load_split(&effective, Split::Train)?;
    let test = load_split(&effective, Split::Test)?;
    info!("train {} samples, test {} samples", train.len(), test.len());
    let model = build_model(&effective, &train)?;
    let mut trainer = Trainer::new(model, effective.train.clone())?;

    let metrics_path = out_dir.join(METRICS_FILE);
    let file = File::create(&metrics_path).map_err(CliError::io(format!("creating {}", metrics_path.display())))?;
    let mut metrics = BufWriter::new(file);
    let io_err = |e: std::io::Error| aal_core::Error::Io {
        path: metrics_path.clone(),
        source: e,
    };
    writeln!(metrics, "{}", MetricsRow::HEADER).map_err(io_err)?;
    let result = trainer.fit(&train, &test, &effective.eval, |row, _| {
        info!(
            "epoch {} lr {:.5} loss {:.4} clean {:.4} fgsm {:.4} pgd {:.4}",
            row.epoch, row.lr, row.train_loss, row.clean_acc, row.fgsm_acc, row.pgd_acc
        );
        writeln!(metrics, "{}", row.to_csv()).and_then(|_| metrics.flush()).map_err(io_err)
    });
    metrics.flush().map_err(CliError::io(format!("writing {}", metrics_path.display())))?;
    let rows = result?;

    let run_config = serde_json::to_value(&effective).expect("config serializes");
    save_checkpoint(out_dir.join(CHECKPOINT_FILE), trainer.model(), &trainer.state(), &run_config)?;
    Ok(rows)
}

pub fn cmd_train(config_path: &Path, output_dir: Option<&Path>) -> Result<(), CliError> {
    let config = RunConfig::load(config_path)?;
    let out = output_dir.map(Path::to_path_buf).unwrap_or_else(|| config.output_dir.clone());
    let rows = train_run(&config, &out)?;
    if let Some(last) = rows.last() {
        println!(
            "{}",
            serde_json::json!({
                "epochs": rows.len(),
                "clean_acc": last.clean_acc,
                "fgsm_acc": last.fgsm_acc,
                "pgd_acc": last.pgd_acc,
                "output_dir": out,
            })
        );
    }
    Ok(())
}

/// A checkpoint together with the run configuration stored in it.
fn open_checkpoint(path: &Path, data_dir: Option<&Path>) -> Result<(Checkpoint, RunConfig), CliError> {
    if !path.is_file() {
        return Err(CliError::Config(format!("checkpoint {} does not exist", path.display())));
    }
    let ckpt = load_checkpoint(path)?;
    let mut config: RunConfig = serde_json::from_value(ckpt.run_config.clone())
        .map_err(|e| CliError::Config(format!("{}: stored run config: {e}", path.display())))?;
    if let Some(dir) = data_dir {
        config.dataset.root = Some(dir.to_path_buf());
    }
    Ok((ckpt, config))
}

/// Overrides applied to the checkpoint's evaluation settings.
#[derive(Debug, Clone, Default)]
pub struct EvalOverrides {
    pub epsilon: Option<f64>,
    pub pgd_step_size: Option<f64>,
    pub pgd_iterations: Option<usize>,
    pub batch_size: Option<usize>,
}

impl EvalOverrides {
    fn apply(&self, mut eval: EvalConfig) -> EvalConfig {
        if let Some(eps) = self.epsilon {
            eval.fgsm.epsilon = eps;
            eval.pgd.epsilon = eps;
        }
        if let Some(step) = self.pgd_step_size {
            eval.pgd.step_size = step;
        }
        if let Some(iters) = self.pgd_iterations {
            eval.pgd.iterations = iters;
        }
        if let Some(b) = self.batch_size {
            eval.batch_size = b;
        }
        eval
    }
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub clean_acc: f64,
    pub fgsm_acc: f64,
    pub pgd_acc: f64,
    pub epsilon: f64,
}

pub fn evaluate_checkpoint(path: &Path, data_dir: Option<&Path>, overrides: &EvalOverrides) -> Result<EvalReport, CliError> {
    let (ckpt, config) = open_checkpoint(path, data_dir)?;
    let eval = overrides.apply(config.eval.clone());
    for a in [&eval.fgsm, &eval.pgd] {
        a.validate().map_err(|e| CliError::Config(e.to_string()))?;
    }
    if eval.batch_size == 0 {
        return Err(CliError::Config("batch size must be >= 1".into()));
    }
    let test = load_split(&config, Split::Test)?;
    let mut model = ckpt.model;
    model.set_mode(Mode::Inference);
    let seed = config.train.seed;
    let acc = |attack| aal_core::evaluate(&model, &test, attack, eval.batch_size, seed);
    Ok(EvalReport {
        samples: test.len(),
        clean_acc: acc(&aal_core::AttackConfig::none())?,
        fgsm_acc: acc(&eval.fgsm)?,
        pgd_acc: acc(&eval.pgd)?,
        epsilon: eval.fgsm.epsilon,
    })
}

pub fn cmd_eval(path: &Path, data_dir: Option<&Path>, overrides: &EvalOverrides) -> Result<(), CliError> {
    let report = evaluate_checkpoint(path, data_dir, overrides)?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

/// Parses `op` or `op=bias` into a gradient fault.
pub fn parse_fault(arg: &str) -> Result<Fault, CliError> {
    let (op, bias) = match arg.split_once('=') {
        Some((op, b)) => (
            op,
            b.parse::<f64>()
                .map_err(|_| CliError::Config(format!("bad fault bias {b:?}")))?,
        ),
        None => (arg, 0.01),
    };
    if !SUITE.contains(&op) {
        return Err(CliError::Config(format!("unknown op {op:?}; known ops: {}", SUITE.join(", "))));
    }
    Ok(Fault {
        op: op.to_string(),
        relative_bias: bias,
    })
}

pub fn cmd_gradcheck(seeds: u64, fault: Option<&str>) -> Result<(), CliError> {
    if seeds == 0 {
        return Err(CliError::Config("seeds must be >= 1".into()));
    }
    let fault = fault.map(parse_fault).transpose()?;
    let results = run_suite(0..seeds, 1e-5, fault.as_ref())?;
    for r in &results {
        let verdict = if r.max_rel_error <= GRADCHECK_TOLERANCE { "ok" } else { "FAIL" };
        println!("{:<24} {:.3e} {verdict}", r.op, r.max_rel_error);
    }
    let w = worst(&results).expect("suite is not empty");
    println!("worst: {} {:.3e}", w.op, w.max_rel_error);
    if w.max_rel_error <= GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "gradient check failed: {} at {:.3e} > {GRADCHECK_TOLERANCE:e}",
            w.op, w.max_rel_error
        )))
    }
}

/// Parameters a sweep can vary.
pub const SWEEP_PARAMS: [&str; 7] = ["xi1", "xi2", "zeta", "epsilon", "lr0", "seed", "kernel"];

/// Returns `config` with `param` set to `value`.
pub fn with_param(config: &RunConfig, param: &str, value: &str) -> Result<RunConfig, CliError> {
    let mut c = config.clone();
    let float = || {
        value
            .parse::<f64>()
            .map_err(|_| CliError::Config(format!("{param}: {value:?} is not a number")))
    };
    match param {
        "xi1" => c.train.xi1 = float()?,
        "xi2" => c.train.xi2 = float()?,
        "zeta" => c.train.zeta = float()?,
        "epsilon" => c.train.attack.epsilon = float()?,
        "lr0" => c.train.lr0 = float()?,
        "seed" => {
            c.train.seed = value
                .parse()
                .map_err(|_| CliError::Config(format!("seed: {value:?} is not an integer")))?
        }
        "kernel" => {
            c.train.attack.kernel = KernelKind::parse(value).ok_or_else(|| {
                let names: Vec<&str> = KernelKind::ALL.iter().map(|k| k.name()).collect();
                CliError::Config(format!("unknown kernel {value:?}; expected one of {}", names.join(", ")))
            })?
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown sweep parameter {other:?}; expected one of {}",
                SWEEP_PARAMS.join(", ")
            )))
        }
    }
    c.validate()?;
    Ok(c)
}

pub fn cmd_sweep(config_path: &Path, param: &str, values: &[String], output_dir: Option<&Path>) -> Result<(), CliError> {
    let config = RunConfig::load(config_path)?;
    if values.is_empty() {
        return Err(CliError::Config("no sweep values given".into()));
    }
    // Validate every value before training anything.
    let runs = values
        .iter()
        .map(|v| with_param(&config, param, v).map(|c| (v, c)))
        .collect::<Result<Vec<_>, _>>()?;
    let out = output_dir.map(Path::to_path_buf).unwrap_or_else(|| config.output_dir.clone());
    std::fs::create_dir_all(&out).map_err(CliError::io(format!("creating {}", out.display())))?;

    let mut lines = vec!["value,clean_acc,attacked_acc".to_string()];
    for (value, run) in runs {
        info!("sweep {param} = {value}");
        let rows = train_run(&run, &out.join(format!("{param}={value}")))?;
        let last = rows.last().expect("at least one epoch");
        lines.push(format!("{value},{},{}", last.clean_acc, last.fgsm_acc));
    }
    let csv = lines.join("\n") + "\n";
    let path = out.join(format!("sweep_{param}.csv"));
    std::fs::write(&path, &csv).map_err(CliError::io(format!("writing {}", path.display())))?;
    print!("{csv}");
    Ok(())
}

pub fn cmd_dump_attention(
    path: &Path,
    n: usize,
    out: &Path,
    data_dir: Option<&Path>,
) -> Result<Vec<PathBuf>, CliError> {
    let (ckpt, config) = open_checkpoint(path, data_dir)?;
    std::fs::create_dir_all(out).map_err(CliError::io(format!("creating {}", out.display())))?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let test = load_split(&config, Split::Test)?;
    if n > test.len() {
        return Err(CliError::Config(format!("n = {n} exceeds the {} test samples", test.len())));
    }
    let idx: Vec<usize> = (0..n).collect();
    let (x, labels) = test.batch::<f32>(&idx)?;
    let state = associate_batch(&ckpt.model, &x, &labels, ckpt.state.history, &config.train)?;
    Ok(dump_attention_pgm(&state, out)?)
}
