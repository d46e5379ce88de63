//! Training and evaluation loops.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{GraphSample, Target};
use crate::error::{arg_err, Error, Result};
use crate::network::{dropout_seed, Mode, Network, NetworkConfig, OutputKind};
use crate::params::{Binding, ParamStore};
use crate::tensor::{rng_from_seed, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Hyperparameters of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Threads evaluating the samples of a batch. Gradients are merged in
    /// sample order, so results do not depend on this.
    pub workers: usize,
    pub arch: String,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: Optimizer::default(),
            seed: 0,
            workers: 1,
            arch: String::new(),
            network: NetworkConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return arg_err(format!(
                "learning rate must be a finite non-negative number, got {}",
                self.learning_rate
            ));
        }
        if self.epochs == 0 {
            return arg_err("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return arg_err("batch size must be at least 1");
        }
        if self.workers == 0 {
            return arg_err("workers must be at least 1");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classify,
    Reconstruct,
}

/// Loss and prediction quality of one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleResult {
    pub loss: f64,
    /// Whether the argmax class was right (classification only).
    pub correct: Option<bool>,
}

/// Anything trainable on [`GraphSample`]s.
pub trait Model: Sync {
    fn task(&self) -> Task;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Scalar loss of one sample on `tape`; also reports correctness.
    fn loss(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        sample: &GraphSample,
        mode: Mode,
    ) -> Result<(Var, Option<bool>)>;
}

/// Index of the first maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl Model for Network {
    fn task(&self) -> Task {
        match self.output() {
            OutputKind::Vector(_) => Task::Classify,
            OutputKind::Nodes(_) => Task::Reconstruct,
        }
    }

    fn params(&self) -> &ParamStore {
        Network::params(self)
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        Network::params_mut(self)
    }

    fn loss(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        sample: &GraphSample,
        mode: Mode,
    ) -> Result<(Var, Option<bool>)> {
        let x = tape.constant(sample.signal.features().clone());
        let y = self.forward(tape, bind, &sample.graph, x, mode)?;
        match &sample.target {
            Target::Class(c) => {
                let logits = tape.value(y);
                if logits.rows() != 1 || *c >= logits.cols() {
                    return arg_err(format!(
                        "class {c} does not fit network output {:?}",
                        logits.shape()
                    ));
                }
                let correct = argmax(logits.data()) == *c;
                Ok((tape.softmax_cross_entropy(y, &[*c])?, Some(correct)))
            }
            Target::Signal(t) => Ok((tape.mse(y, t.data())?, None)),
        }
    }
}

/// Mean loss and accuracy or MSE over a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub mse: Option<f64>,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mse: Option<f64>,
    pub wall_ms: u64,
}

fn summarise(task: Task, results: &[SampleResult]) -> Metrics {
    let n = results.len() as f64;
    let loss = results.iter().map(|r| r.loss).sum::<f64>() / n;
    match task {
        Task::Classify => Metrics {
            loss,
            accuracy: Some(results.iter().filter(|r| r.correct == Some(true)).count() as f64 / n),
            mse: None,
        },
        Task::Reconstruct => Metrics {
            loss,
            accuracy: None,
            mse: Some(loss),
        },
    }
}

fn eval_sample<M: Model + ?Sized>(model: &M, sample: &GraphSample) -> Result<SampleResult> {
    let mut tape = Tape::new();
    let bind = model.params().bind(&mut tape, false);
    let (loss, correct) = model.loss(&mut tape, &bind, sample, Mode::Eval)?;
    Ok(SampleResult {
        loss: tape.value(loss).item(),
        correct,
    })
}

// Runs `f` over `items` on up to `workers` threads, keeping input order.
fn map_ordered<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(usize, &T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(j, t)| f(c * chunk + j, t))
                        .collect::<Result<Vec<R>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

/// Evaluates `model` on `data`. The task must match the model.
pub fn evaluate_model<M: Model + ?Sized>(
    model: &M,
    data: &[GraphSample],
    task: Task,
    workers: usize,
) -> Result<Metrics> {
    if data.is_empty() {
        return arg_err("cannot evaluate on an empty dataset");
    }
    if model.task() != task {
        return arg_err(format!("model performs {:?}, not {task:?}", model.task()));
    }
    let results = map_ordered(data, workers, |_, s| eval_sample(model, s))?;
    Ok(summarise(task, &results))
}

struct OptimizerState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl OptimizerState {
    fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, opt: Optimizer, lr: f64, params: &mut ParamStore, grads: &[Tensor]) {
        self.t += 1;
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            match opt {
                Optimizer::Sgd => {
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(self.t);
                    let c2 = 1.0 - beta2.powi(self.t);
                    let m = self.m[i].data_mut();
                    let v = self.v[i].data_mut();
                    for (((w, d), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                        *m = beta1 * *m + (1.0 - beta1) * d;
                        *v = beta2 * *v + (1.0 - beta2) * d * d;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Loss value and parameter gradients of one sample.
pub fn sample_gradients<M: Model + ?Sized>(
    model: &M,
    sample: &GraphSample,
    mode: Mode,
) -> Result<(SampleResult, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bind = model.params().bind(&mut tape, true);
    let (loss, correct) = model.loss(&mut tape, &bind, sample, mode)?;
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    let g = bind
        .vars()
        .iter()
        .map(|&v| grads.take(v).expect("parameters are differentiable"))
        .collect();
    Ok((
        SampleResult {
            loss: value,
            correct,
        },
        g,
    ))
}

/// Trains `model` and returns one [`MetricsRecord`] per epoch and split.
///
/// Each epoch visits the training set in a seeded order; a batch's gradient
/// is the mean of its sample gradients, summed in sample order. Records are
/// also written to `log` as JSON lines when given.
pub fn fit<M: Model>(
    model: &mut M,
    train: &[GraphSample],
    test: &[GraphSample],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    if train.is_empty() {
        return arg_err("training set is empty");
    }
    let task = model.task();
    let mut state = OptimizerState::new(model.params());
    let mut history = Vec::new();
    let start = Instant::now();
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_from_seed(dropout_seed(
            cfg.seed,
            epoch,
            usize::MAX,
        )));
        let mut results = Vec::with_capacity(train.len());
        for batch in order.chunks(cfg.batch_size) {
            let per_sample = map_ordered(batch, cfg.workers, |_, &i| {
                let mode = Mode::Train {
                    seed: dropout_seed(cfg.seed, epoch, i),
                };
                sample_gradients(&*model, &train[i], mode)
            })?;
            let mut total: Vec<Tensor> = model
                .params()
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect();
            for (r, g) in &per_sample {
                results.push(*r);
                for (acc, gi) in total.iter_mut().zip(g) {
                    for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                        *a += b;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            total
                .iter_mut()
                .for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= scale));
            state.step(cfg.optimizer, cfg.learning_rate, model.params_mut(), &total);
            if let Some((name, _)) = model.params().iter().find(|(_, t)| !t.all_finite()) {
                return Err(Error::Argument(format!(
                    "epoch {epoch}: parameter `{name}` became non-finite after an update"
                )));
            }
        }
        let mut push = |split: &str, m: Metrics, log: &mut Option<&mut dyn Write>| -> Result<()> {
            let rec = MetricsRecord {
                epoch,
                split: split.into(),
                loss: m.loss,
                accuracy: m.accuracy,
                mse: m.mse,
                wall_ms: start.elapsed().as_millis() as u64,
            };
            if let Some(w) = log.as_deref_mut() {
                writeln!(
                    w,
                    "{}",
                    serde_json::to_string(&rec).expect("record serialises")
                )?;
            }
            history.push(rec);
            Ok(())
        };
        push("train", summarise(task, &results), &mut log)?;
        if !test.is_empty() {
            push(
                "test",
                evaluate_model(&*model, test, task, cfg.workers)?,
                &mut log,
            )?;
        }
    }
    Ok(history)
}

/// Reproduction record written next to every run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub arch: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: TrainConfig,
}

impl RunMetadata {
    pub fn new(arch: String, cfg: &TrainConfig) -> Self {
        Self {
            arch,
            seed: cfg.seed,
            config_hash: cfg.hash(),
            config: cfg.clone(),
        }
    }
}

/// Output of [`train_to_dir`].
pub struct RunOutput {
    pub history: Vec<MetricsRecord>,
}

/// Runs [`fit`] and writes `metrics.jsonl`, `model.ckpt` and `run.json`
/// into `out_dir`.
pub fn train_to_dir<M: Model>(
    model: &mut M,
    train: &[GraphSample],
    test: &[GraphSample],
    cfg: &TrainConfig,
    canonical_arch: &str,
    out_dir: &Path,
) -> Result<RunOutput> {
    std::fs::create_dir_all(out_dir)?;
    let meta = RunMetadata::new(canonical_arch.to_string(), cfg);
    std::fs::write(
        out_dir.join("run.json"),
        serde_json::to_string_pretty(&meta).expect("metadata serialises") + "\n",
    )?;
    let mut log = std::io::BufWriter::new(std::fs::File::create(out_dir.join("metrics.jsonl"))?);
    let history = fit(model, train, test, cfg, Some(&mut log))?;
    log.flush()?;
    let mut ckpt = std::io::BufWriter::new(std::fs::File::create(out_dir.join("model.ckpt"))?);
    model.params().write_checkpoint(&mut ckpt)?;
    ckpt.flush()?;
    Ok(RunOutput { history })
}

/// Builds the network named by `cfg.arch` and trains it.
pub fn train_model(
    cfg: &TrainConfig,
    input_dim: usize,
    train: &[GraphSample],
    test: &[GraphSample],
    log: Option<&mut dyn Write>,
) -> Result<(Network, Vec<MetricsRecord>)> {
    let spec = crate::arch::parse_arch(&cfg.arch)?;
    let mut net = crate::network::build_network(&spec, input_dim, cfg.seed, &cfg.network)?;
    let history = fit(&mut net, train, test, cfg, log)?;
    Ok((net, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::parse_arch;
    use crate::graph::{DirectedGraph, GraphSignal};
    use crate::network::build_network;

    fn toy(n: usize, seed: u64) -> Vec<GraphSample> {
        use rand::Rng as _;
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|i| {
                let c = i % 2;
                let nodes = rng.random_range(1..5);
                let sign = if c == 0 { 1.0 } else { -1.0 };
                let feats: Vec<f64> = (0..nodes * 2)
                    .map(|k| {
                        if k % 2 == 0 {
                            sign * rng.random_range(0.5..2.0)
                        } else {
                            rng.random_range(-1.0..1.0)
                        }
                    })
                    .collect();
                GraphSample {
                    graph: DirectedGraph::empty(nodes, 2),
                    signal: GraphSignal::new(Tensor::matrix(nodes, 2, feats).unwrap()).unwrap(),
                    target: Target::Class(c),
                }
            })
            .collect()
    }

    fn features_after_gmp(s: &GraphSample) -> Vec<f64> {
        let f = s.signal.features();
        (0..2)
            .map(|j| {
                (0..f.rows())
                    .map(|i| f.get(i, j))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    }

    #[test]
    fn fc_only_learns_separable_toy_graphs() {
        let data = toy(60, 1);
        // oracle: plain logistic regression on the pooled features separates the set
        let (mut w, mut b) = ([0.0f64; 2], 0.0f64);
        for _ in 0..500 {
            for s in &data {
                let x = features_after_gmp(s);
                let y = if s.class() == Some(1) { 1.0 } else { 0.0 };
                let p = 1.0 / (1.0 + (-(w[0] * x[0] + w[1] * x[1] + b)).exp());
                w[0] -= 0.1 * (p - y) * x[0];
                w[1] -= 0.1 * (p - y) * x[1];
                b -= 0.1 * (p - y);
            }
        }
        let oracle_acc = data
            .iter()
            .filter(|s| {
                ((w[0] * features_after_gmp(s)[0] + w[1] * features_after_gmp(s)[1] + b) > 0.0)
                    == (s.class() == Some(1))
            })
            .count() as f64
            / data.len() as f64;
        assert_eq!(oracle_acc, 1.0);

        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 4,
            learning_rate: 0.05,
            arch: "GMP-FC(2)".into(),
            ..TrainConfig::default()
        };
        let (net, history) = train_model(&cfg, 2, &data, &[], None).unwrap();
        assert!(history.last().unwrap().accuracy.unwrap() >= 0.99);
        assert!(
            evaluate_model(&net, &data, Task::Classify, 1)
                .unwrap()
                .accuracy
                .unwrap()
                >= 0.99
        );
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let data = toy(8, 2);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 3,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let mut net =
            build_network(&parse_arch("GMP-FC(4)-FC(2)").unwrap(), 2, 0, &cfg.network).unwrap();
        let before = net.params().clone();
        fit(&mut net, &data, &[], &cfg, None).unwrap();
        assert_eq!(net.params(), &before);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![0.5, -1.5]));
        let before = store.clone();
        let mut st = OptimizerState::new(&store);
        st.step(
            Optimizer::default(),
            1e-3,
            &mut store,
            &[Tensor::zeros(&[2])],
        );
        assert_eq!(store, before);
    }

    #[test]
    fn runs_are_reproducible_and_worker_independent() {
        let data = toy(12, 3);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 5,
            arch: "GMP-FC(4)-D(0.3)-FC(2)".into(),
            ..TrainConfig::default()
        };
        let strip = |h: Vec<MetricsRecord>| {
            h.into_iter()
                .map(|r| (r.epoch, r.split, r.loss.to_bits()))
                .collect::<Vec<_>>()
        };
        let (a, ha) = train_model(&cfg, 2, &data, &data, None).unwrap();
        let (b, hb) = train_model(&cfg, 2, &data, &data, None).unwrap();
        let (c, hc) = train_model(
            &TrainConfig {
                workers: 3,
                ..cfg.clone()
            },
            2,
            &data,
            &data,
            None,
        )
        .unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(a.params(), c.params());
        let (ha, hb, hc) = (strip(ha), strip(hb), strip(hc));
        assert_eq!(ha, hb);
        assert_eq!(ha, hc);
    }

    #[test]
    fn evaluation_metrics_and_errors() {
        let data = toy(10, 4);
        let net = build_network(
            &parse_arch("GMP-FC(2)").unwrap(),
            2,
            0,
            &NetworkConfig::default(),
        )
        .unwrap();
        assert!(evaluate_model(&net, &[], Task::Classify, 1).is_err());
        assert!(evaluate_model(&net, &data, Task::Reconstruct, 1).is_err());
        let m = evaluate_model(&net, &data, Task::Classify, 1).unwrap();
        assert!(m.accuracy.unwrap() >= 0.0 && m.mse.is_none());
    }

    #[test]
    fn metrics_lines_are_json() {
        let data = toy(4, 5);
        let cfg = TrainConfig {
            epochs: 1,
            arch: "GMP-FC(2)".into(),
            ..TrainConfig::default()
        };
        let mut buf = Vec::new();
        train_model(&cfg, 2, &data, &data, Some(&mut buf)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<MetricsRecord> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1].split, "test");
        assert!(text.contains("\"accuracy\"") && text.contains("\"wall_ms\""));
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = TrainConfig::default();
        let b = TrainConfig {
            seed: 1,
            ..a.clone()
        };
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
