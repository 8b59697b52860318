//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 6 and 7 train `mnist-cnn` on MNIST three times through the CLI
//! (two identical pruning runs and one dense baseline). The data is read from
//! `$ASWL_DATA_DIR` or `<workspace>/data/mnist`.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use aswl::data::{batches, Batch, Dataset};
use aswl::pruning::{self, magnitude_mask, model_sparsity, pruning_ratio, sparsity_regularizer};
use aswl::store::{export_sparse, import_sparse, load_checkpoint, save_checkpoint};
use aswl::tape::Tape;
use aswl::train::{compute_gradients, loss_value};
use aswl::{Architecture, AttentionLayer, Model, Split, Tensor, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 5] = [
        ("gradient fidelity", gradient_fidelity),
        ("pruning oracle equivalence", pruning_oracle),
        ("ratio/sparsity/regularizer examples", reference_values),
        ("dense-trainer oracle", dense_trainer_oracle),
        ("fold roundtrip and resume", fold_and_resume),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        failed += report(i + 1, name, run);
    }
    let (desk, determinism) = desk_scale();
    failed += report(6, "desk-scale end-to-end", || desk.clone());
    failed += report(7, "determinism", || determinism.clone());
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn report(n: usize, name: &str, run: impl FnOnce() -> Outcome) -> usize {
    let start = Instant::now();
    let outcome = run();
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("criterion {n} ({name}): PASS [{secs:.2}s] {detail}");
            0
        }
        Err(detail) => {
            println!("criterion {n} ({name}): FAIL [{secs:.2}s] {detail}");
            1
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn dataset(n: usize, shape: &[usize], classes: usize, seed: u64) -> Dataset {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let per: usize = shape.iter().product();
    let full = match *shape {
        [d] => vec![n, 1, d, 1],
        _ => [&[n], shape].concat(),
    };
    Dataset::new(
        Tensor::new(full, (0..n * per).map(|_| r.random::<f32>()).collect()).unwrap(),
        (0..n).map(|_| r.random_range(0..classes) as u8).collect(),
        classes,
        Split::Train,
    )
    .unwrap()
}

/// Random descriptor with at most three prunable layers and 500 weights.
fn random_arch(r: &mut ChaCha8Rng) -> Architecture {
    loop {
        let mut text = String::new();
        let layers = r.random_range(1..=3);
        if r.random_bool(0.5) {
            text += &format!("input = {}\n", r.random_range(2..12));
            for l in 0..layers {
                if l > 0 {
                    text += "relu\n";
                }
                text += &format!("dense units={}\n", r.random_range(2..9));
            }
        } else {
            let (h, c) = (r.random_range(4..8), r.random_range(1..3));
            text += &format!("input = {h}x{h}x{c}\n");
            let convs = r.random_range(1..layers.max(2));
            for _ in 0..convs.min(layers - 1).max(1) {
                text += &format!(
                    "conv kernel={} filters={} stride={} padding={}\nrelu\n",
                    r.random_range(1..4),
                    r.random_range(1..4),
                    r.random_range(1..3),
                    r.random_range(0..2)
                );
                if r.random_bool(0.3) {
                    text += "maxpool size=2\n";
                }
            }
            text += &format!("flatten\ndense units={}\n", r.random_range(2..6));
        }
        if let Ok(arch) = Architecture::parse(&text) {
            let n: usize = arch.layers().iter().map(|l| l.weight.iter().product::<usize>()).sum();
            if arch.layers().len() <= 3 && n <= 500 {
                return arch;
            }
        }
    }
}

fn rebuilt(model: &Model<f64>, i: usize, edit: impl FnOnce(&mut [f64], &mut [f64], &mut f64)) -> Model<f64> {
    let mut layers = model.layers().to_vec();
    let old = &layers[i];
    let (mut w, mut b, mut a) = (old.weights().clone(), old.bias().clone(), old.attention());
    edit(w.data_mut(), b.data_mut(), &mut a);
    let mut layer = AttentionLayer::new(old.kind(), w, b, a).unwrap();
    layer.set_mask(old.mask().to_vec()).unwrap();
    layers[i] = layer;
    Model::from_layers(model.arch().clone(), layers).unwrap()
}

fn gradient_fidelity() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(2024);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut params = 0usize;
    for m in 0..20 {
        let arch = random_arch(&mut r);
        let alpha = [1.0, 1.5, 2.0][m % 3];
        let cfg = TrainConfig {
            alpha,
            gamma: 0.5,
            lambda: 0.01,
            ..TrainConfig::default()
        };
        let mut model = Model::<f64>::build(&arch, m as u64);
        for i in 0..model.layers().len() {
            let a = r.random_range(0.1..0.95);
            model = rebuilt(&model, i, |_, b, att| {
                b.iter_mut().for_each(|x| *x = 0.0);
                *att = a;
            });
            let layer = &mut model.layers_mut()[i];
            pruning::prune_layer(layer, pruning_ratio(a, alpha).unwrap()).unwrap();
        }
        for i in 0..model.layers().len() {
            let biases: Vec<f64> = (0..model.layers()[i].bias().numel()).map(|_| r.random_range(-0.5..0.5)).collect();
            model = rebuilt(&model, i, |_, b, _| b.copy_from_slice(&biases));
        }
        let ds = dataset(4, arch.input_shape(), arch.classes(), m as u64 + 100);
        let batch: Batch<f64> = ds.gather(&[0, 1, 2, 3]).unwrap();
        let (_, grads, _) = compute_gradients(&model, &batch, &cfg).map_err(|e| e.to_string())?;
        let loss = |m: &Model<f64>| loss_value(m, &batch, &cfg).unwrap().total;
        let mut compare = |what: String, fd: f64, ad: f64| -> Result<(), String> {
            let err = (fd - ad).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
            params += 1;
            check(err < 1e-6, || format!("model {m} {what}: fd {fd:e} vs tape {ad:e}"))
        };
        for i in 0..model.layers().len() {
            for j in 0..model.layers()[i].n_w() {
                let fd = (loss(&rebuilt(&model, i, |w, _, _| w[j] += h))
                    - loss(&rebuilt(&model, i, |w, _, _| w[j] -= h)))
                    / (2.0 * h);
                compare(format!("layer {i} weight {j}"), fd, grads.weights[i][j])?;
            }
            for j in 0..model.layers()[i].bias().numel() {
                let fd = (loss(&rebuilt(&model, i, |_, b, _| b[j] += h))
                    - loss(&rebuilt(&model, i, |_, b, _| b[j] -= h)))
                    / (2.0 * h);
                compare(format!("layer {i} bias {j}"), fd, grads.biases[i][j])?;
            }
            let fd = (loss(&rebuilt(&model, i, |_, _, a| *a += h)) - loss(&rebuilt(&model, i, |_, _, a| *a -= h)))
                / (2.0 * h);
            compare(format!("layer {i} attention"), fd, grads.attentions[i])?;
        }
    }
    Ok(format!("20 models, {params} parameters, max rel. error {worst:.2e}"))
}

fn pruning_oracle() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(99);
    let grid = [0u64, 10, 20, 30, 40, 50, 60, 70, 80, 90, 99];
    for v in 0..1000 {
        let n = r.random_range(1..=300);
        let tied = v % 2 == 0;
        let w: Vec<f32> = (0..n)
            .map(|_| {
                if tied {
                    r.random_range(-4i32..=4) as f32 / 8.0
                } else {
                    r.random_range(-1.0..1.0)
                }
            })
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| w[i].abs().total_cmp(&w[j].abs()).then(i.cmp(&j)));
        for &pct in &grid {
            let k = (pct * n as u64).div_ceil(100) as usize;
            let mut expected = vec![true; n];
            for &i in &order[..k] {
                expected[i] = false;
            }
            let got = magnitude_mask(&w, pct as f32 / 100.0).map_err(|e| e.to_string())?;
            check(got == expected, || format!("vector {v} (n={n}) at p={pct}%"))?;
        }
    }
    Ok("1000 vectors x 11 ratios, exact masks".into())
}

fn reference_values() -> Outcome {
    let near = |got: f64, want: f64, what: &str| check((got - want).abs() <= 1e-12, || format!("{what}: {got} != {want}"));
    let e = |r: aswl::Result<f64>| r.map_err(|e| e.to_string());
    near(e(pruning_ratio(0.5, 1.0))?, 0.5, "p(0.5, 1)")?;
    near(e(pruning_ratio(0.5, 2.0))?, 0.25, "p(0.5, 2)")?;
    near(e(pruning_ratio(1.0, 1.7))?, 0.0, "p(1, 1.7)")?;
    near(e(pruning_ratio(1e-4, 1.0))?, 0.99, "p(1e-4, 1)")?;
    near(e(model_sparsity(&[0.5, 0.5], &[100, 300], 1.0))?, 0.5, "S alpha=1")?;
    near(e(model_sparsity(&[0.5, 0.5], &[100, 300], 2.0))?, 0.75, "S alpha=2")?;
    near(e(model_sparsity(&[1.0], &[17], 1.0))?, 1.0, "S unpruned")?;
    let (psi, g) = sparsity_regularizer(&[0.5, 0.5], &[100, 300], 1.0).map_err(|e| e.to_string())?;
    near(psi, 0.25, "psi")?;
    near(g[0], 0.25, "dpsi/da1")?;
    near(g[1], 0.75, "dpsi/da2")?;
    let (psi, g) = sparsity_regularizer(&[1.0], &[10], 1.0).map_err(|e| e.to_string())?;
    near(psi, 1.0, "psi at a=1")?;
    near(g[0], 2.0, "dpsi/da at a=1, alpha=1")?;
    let (_, g) = sparsity_regularizer(&[1.0], &[10], 2.0).map_err(|e| e.to_string())?;
    near(g[0], 0.0, "dpsi/da at a=1, alpha=2")?;
    let (_, g) = sparsity_regularizer(&[1e-4, 0.5], &[10, 10], 1.0).map_err(|e| e.to_string())?;
    near(g[0], 0.0, "capped layer gradient")?;
    Ok("14 values within 1e-12".into())
}

/// Textbook Adam on one flat parameter vector.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn step(&mut self, p: &mut [f64], g: &[f64], t: i32, lr: f64) {
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        for i in 0..p.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = self.m[i] / (1.0 - b1.powi(t));
            let v_hat = self.v[i] / (1.0 - b2.powi(t));
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Plain network (no masks, no gates) trained with CE + λΣw².
fn dense_step(arch: &Architecture, w: &[Tensor<f64>], b: &[Tensor<f64>], batch: &Batch<f64>, lambda: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    use aswl::StageSpec;
    let mut t = Tape::new();
    let wv: Vec<_> = w.iter().map(|x| t.param(x.clone())).collect();
    let bv: Vec<_> = b.iter().map(|x| t.param(x.clone())).collect();
    let n = batch.labels.len();
    let mut shape = vec![n];
    shape.extend_from_slice(arch.input_shape());
    let mut cur = t.constant(batch.images.clone().reshape(shape).unwrap());
    let mut l = 0;
    for stage in arch.stages() {
        cur = match *stage {
            StageSpec::Dense { .. } => {
                let z = t.matmul(cur, wv[l]).unwrap();
                l += 1;
                t.add_bias(z, bv[l - 1]).unwrap()
            }
            StageSpec::Conv { stride, padding, .. } => {
                let z = t.conv2d(cur, wv[l], stride, padding).unwrap();
                l += 1;
                t.add_bias(z, bv[l - 1]).unwrap()
            }
            StageSpec::Relu => t.relu(cur).unwrap(),
            StageSpec::MaxPool { size } => t.max_pool(cur, size).unwrap(),
            StageSpec::Flatten => {
                let s = t.value(cur).unwrap().shape().to_vec();
                t.reshape(cur, vec![s[0], s[1..].iter().product()]).unwrap()
            }
        };
    }
    let ce = t.softmax_cross_entropy(cur, &batch.labels).unwrap();
    let sq = t.sum_of_squares(&wv).unwrap();
    let l2 = t.scale(sq, lambda).unwrap();
    let loss = t.add(ce, l2).unwrap();
    let g = t.backward(loss).unwrap();
    (
        wv.iter().map(|&v| g.get(v).unwrap().data().to_vec()).collect(),
        bv.iter().map(|&v| g.get(v).unwrap().data().to_vec()).collect(),
    )
}

fn dense_trainer_oracle() -> Outcome {
    let arch = Architecture::parse(
        "input = 6x6x2\nconv kernel=3 filters=3 stride=1 padding=1\nrelu\nmaxpool size=2\nflatten\ndense units=8\nrelu\ndense units=4\n",
    )
    .unwrap();
    let ds = dataset(40, &[6, 6, 2], 4, 5);
    let cfg = TrainConfig {
        gamma: 0.0,
        freeze_attention: true,
        batch_size: 8,
        seed: 31,
        ..TrainConfig::default()
    };
    let mut model = Model::<f64>::build(&arch, 17);
    model.set_attentions(1.0);
    let mut w: Vec<Tensor<f64>> = model.layers().iter().map(|l| l.weights().clone()).collect();
    let mut b: Vec<Tensor<f64>> = model.layers().iter().map(|l| l.bias().clone()).collect();
    let mut adam_w: Vec<Adam> = w.iter().map(|x| Adam::new(x.numel())).collect();
    let mut adam_b: Vec<Adam> = b.iter().map(|x| Adam::new(x.numel())).collect();
    let mut trainer = Trainer::new(model, cfg.clone()).map_err(|e| e.to_string())?;

    let mut step = 0;
    for epoch in 0..10 {
        let lr = cfg.lr * cfg.lr_decay.powi(epoch);
        for batch in batches::<f64>(&ds, cfg.batch_size, trainer.epoch_seed(epoch as usize), true).unwrap() {
            step += 1;
            trainer.train_step(&batch).map_err(|e| e.to_string())?;
            let (gw, gb) = dense_step(&arch, &w, &b, &batch, cfg.lambda);
            for i in 0..w.len() {
                adam_w[i].step(w[i].data_mut(), &gw[i], step, lr);
                adam_b[i].step(b[i].data_mut(), &gb[i], step, lr);
            }
            for (i, layer) in trainer.model.layers().iter().enumerate() {
                let same = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits());
                check(same(layer.weights().data(), w[i].data()) && same(layer.bias().data(), b[i].data()), || {
                    format!("step {step}, layer {i} differs from the dense trainer")
                })?;
            }
        }
        trainer.epoch += 1;
    }
    check(step == 50, || format!("ran {step} steps"))?;
    Ok("50 steps bit-identical (f64)".into())
}

fn fold_and_resume() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let arch = Architecture::preset("mnist-cnn").unwrap();
    let ds = dataset(96, &[28, 28, 1], 10, 3);
    let cfg = TrainConfig {
        gamma: 3.0,
        lr: 0.01,
        batch_size: 16,
        seed: 4,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(Model::<f32>::build(&arch, 4), cfg.clone()).map_err(|e| e.to_string())?;
    trainer.train_epoch(&ds, None, |_| {}).map_err(|e| e.to_string())?;
    let model = &trainer.model;

    let path = dir.path().join("model.aswl");
    export_sparse(model).write(&path).map_err(|e| e.to_string())?;
    let inference = import_sparse(&path).map_err(|e| e.to_string())?;
    let mut r = ChaCha8Rng::seed_from_u64(8);
    for i in 0..100 {
        let x = Tensor::new(vec![1, 28, 28, 1], (0..784).map(|_| r.random_range(0.0..1.0)).collect()).unwrap();
        let a = model.forward(&x).map_err(|e| e.to_string())?;
        let b = inference.forward(&x).map_err(|e| e.to_string())?;
        check(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()), || {
            format!("input {i}: folded logits differ")
        })?;
    }

    let steps: Vec<Batch<f32>> = batches(&ds, 16, 77, true).unwrap().chain(batches(&ds, 16, 78, true).unwrap()).collect();
    let steps = &steps[..10];
    let mut straight = trainer.clone();
    let expected: Vec<_> = steps.iter().map(|b| straight.train_step(b).unwrap()).collect();
    let mut half = trainer.clone();
    let mut got: Vec<_> = steps[..5].iter().map(|b| half.train_step(b).unwrap()).collect();
    let ckpt = dir.path().join("checkpoint.bin");
    save_checkpoint(&half, &ckpt).map_err(|e| e.to_string())?;
    let mut resumed = load_checkpoint::<f32>(&ckpt).map_err(|e| e.to_string())?;
    got.extend(steps[5..].iter().map(|b| resumed.train_step(b).unwrap()));
    check(got == expected, || "resumed metrics differ".into())?;
    check(resumed == straight, || "resumed model or optimizer state differs".into())?;
    Ok(format!(
        "100 inputs bit-exact at {:.1}% pruned; 5+5 resumed steps identical to 10",
        100.0 * pruning::global_pruned_ratio(model)
    ))
}

fn data_dir() -> Option<PathBuf> {
    let root = std::env::var_os("ASWL_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    let has = |d: &Path| d.join("train-images-idx3-ubyte").exists() || d.join("train-images-idx3-ubyte.gz").exists();
    [root.join("mnist"), root].into_iter().find(|d| has(d))
}

struct Run {
    accuracy: f64,
    pruned: f64,
    metrics: String,
}

fn parse_run(out: &Path, stdout: &[u8]) -> Result<Run, String> {
    let line = String::from_utf8_lossy(stdout);
    let field = |key: &str| -> Result<f64, String> {
        line.split_whitespace()
            .find_map(|kv| kv.strip_prefix(key))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| format!("no {key} in output {line:?}"))
    };
    Ok(Run {
        accuracy: field("accuracy=")?,
        pruned: field("pruned_ratio=")?,
        metrics: std::fs::read_to_string(out.join("metrics.csv")).map_err(|e| e.to_string())?,
    })
}

fn ratio_column(metrics: &str) -> Vec<f64> {
    metrics
        .lines()
        .skip(1)
        .filter_map(|l| l.rsplit(',').next()?.parse().ok())
        .collect()
}

/// Trains the two pruning runs and the baseline concurrently, one
/// single-threaded process each.
fn desk_scale() -> (Outcome, Outcome) {
    let Some(data) = data_dir() else {
        let msg = "MNIST not found (set ASWL_DATA_DIR or populate data/mnist)".to_string();
        return (Err(msg.clone()), Err(msg));
    };
    let dir = tempfile::tempdir().unwrap();
    let start = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let child = Command::new(env!("CARGO_BIN_EXE_aswl"))
            .args(["train", "--arch", "mnist-cnn", "--dataset", "mnist", "--alpha", "1", "--gamma", "0.5"])
            .args(["--lambda", "5e-4", "--optimizer", "adam", "--lr", "0.001", "--lr-decay", "0.98"])
            .args(["--epochs", "5", "--batch-size", "64", "--seed", "7"])
            .arg("--data-dir")
            .arg(&data)
            .arg("--out")
            .arg(&out)
            .args(extra)
            .stderr(std::process::Stdio::inherit())
            .stdout(std::process::Stdio::piped())
            .spawn()
            .unwrap();
        (out, child)
    };
    let runs = [start("aswl-a", &[]), start("aswl-b", &[]), start("dense", &["--dense-baseline"])];
    let mut results = Vec::new();
    for (out, child) in runs {
        let o = child.wait_with_output().unwrap();
        if !o.status.success() {
            let msg = format!("training run {} exited with {}", out.display(), o.status);
            return (Err(msg.clone()), Err(msg));
        }
        match parse_run(&out, &o.stdout) {
            Ok(r) => results.push(r),
            Err(e) => return (Err(e.clone()), Err(e)),
        }
    }
    let (a, b, dense) = (&results[0], &results[1], &results[2]);

    let ratios = ratio_column(&a.metrics);
    let desk = (|| {
        let detail = format!(
            "test acc {:.4} vs dense {:.4}; pruned ratio epoch 1 {:.4} -> final {:.4}",
            a.accuracy,
            dense.accuracy,
            ratios.first().copied().unwrap_or(f64::NAN),
            a.pruned
        );
        check(ratios.len() == 5, || format!("expected 5 metric rows; {detail}"))?;
        check(a.accuracy >= dense.accuracy - 0.01, || format!("(a) accuracy; {detail}"))?;
        check(a.pruned >= 0.5, || format!("(b) final ratio below 0.5; {detail}"))?;
        check(ratios[4] > ratios[0], || format!("(c) ratio did not grow; {detail}"))?;
        Ok(detail)
    })();
    let determinism = if a.metrics == b.metrics {
        Ok(format!("metrics.csv identical across two runs ({} bytes)", a.metrics.len()))
    } else {
        Err("metrics.csv differs between identical runs".into())
    };
    (desk, determinism)
}
