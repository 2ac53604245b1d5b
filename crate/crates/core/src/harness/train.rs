use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{backbone_forward, BackboneParams, Mode};
use crate::error::{Error, Result};
use crate::gcm::{calibration_loss, identity_loss, memory_classify, IdentityKey, PrototypeMemory};
use crate::lpm::{LpmRecord, Perturber};
use crate::rng::{self, Purpose};
use crate::synthdata::{sample_batch, Benchmark};
use crate::tensor::{Graph, Tensor};

use super::config::TrainConfig;
use super::eval::{embed, evaluate_domain, Metric, Retrieval};
use super::optim::{learning_rate, Adam};

/// Trained weights, memory and the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: BackboneParams,
    pub memory: PrototypeMemory,
}

/// Means over the iterations of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss_id: f64,
    pub loss_g: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub epochs: Vec<EpochMetrics>,
    /// One entry per source domain, scored on its held-out identities.
    pub source: Vec<Retrieval>,
    pub target: Vec<Retrieval>,
    pub wall_clock_secs: f64,
}

impl MetricsReport {
    pub fn source_map(&self) -> f64 {
        mean(self.source.iter().map(|r| r.map))
    }

    pub fn target_map(&self) -> f64 {
        mean(self.target.iter().map(|r| r.map))
    }

    pub fn source_rank1(&self) -> f64 {
        mean(self.source.iter().map(|r| r.rank1))
    }

    pub fn target_rank1(&self) -> f64 {
        mean(self.target.iter().map(|r| r.rank1))
    }

    /// Epoch rows followed by one row per evaluated domain. Wall-clock time
    /// is left out so that identical runs give identical files.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("kind,index,lr,loss_id,loss_g,loss,map,rank1\n");
        for e in &self.epochs {
            let _ = writeln!(out, "epoch,{},{},{},{},{},,", e.epoch, e.lr, e.loss_id, e.loss_g, e.loss);
        }
        for (kind, rows) in [("source", &self.source), ("target", &self.target)] {
            for (k, r) in rows.iter().enumerate() {
                let _ = writeln!(out, "{kind},{k},,,,,{},{}", r.map, r.rank1);
            }
        }
        out
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = it.collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Loss terms of a single iteration, as reported.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationLog {
    pub iteration: u64,
    pub epoch: usize,
    pub loss_id: f64,
    pub loss_g: f64,
    pub lambda: f64,
    pub loss: f64,
}

/// Ordering instrumentation for memory reads and writes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainEvent {
    /// Global moments were computed from memory at `version`.
    MomentsRead { iteration: u64, version: u64 },
    OptimizerStep { iteration: u64 },
    /// Memory moved to `version`.
    MemoryUpdated { iteration: u64, version: u64 },
}

/// Everything a training run produces.
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub report: MetricsReport,
    pub iterations: Vec<IterationLog>,
    pub events: Vec<TrainEvent>,
    pub lpm_records: Vec<LpmRecord>,
}

fn at_iteration(iteration: u64, e: Error) -> Error {
    match e {
        Error::Numerics(m) => Error::Numerics(format!("diverged at iteration {iteration}: {m}")),
        other => other,
    }
}

/// Writes each source identity's mean clean embedding as its first prototype.
pub fn seed_memory(memory: &mut PrototypeMemory, params: &BackboneParams, cfg: &TrainConfig, data: &Benchmark) -> Result<()> {
    let bcfg = cfg.backbone_config();
    for (k, domain) in data.sources.iter().enumerate() {
        let v = embed(params, &bcfg, &domain.images)?;
        let d = v.shape()[1];
        let n = domain.spec.n_identities;
        let mut sums = vec![0.0; n * d];
        let mut counts = vec![0usize; n];
        for (row, &label) in v.data().chunks(d).zip(&domain.labels) {
            counts[label] += 1;
            for (s, x) in sums[label * d..(label + 1) * d].iter_mut().zip(row) {
                *s += x;
            }
        }
        let mut rows = Vec::new();
        let mut keys = Vec::new();
        for id in 0..n {
            if counts[id] > 0 {
                rows.extend(sums[id * d..(id + 1) * d].iter().map(|s| s / counts[id] as f64));
                keys.push((k, id));
            }
        }
        memory.update(&Tensor::new(vec![keys.len(), d], rows)?, &keys)?;
    }
    Ok(())
}

/// Trains on the source domains of `data`, then scores source and target retrieval.
pub fn train(config: &TrainConfig, data: &Benchmark) -> Result<(Checkpoint, MetricsReport)> {
    let run = train_run(config, data, Metric::Cosine)?;
    Ok((run.checkpoint, run.report))
}

pub fn train_run(config: &TrainConfig, data: &Benchmark, metric: Metric) -> Result<TrainRun> {
    config.validate()?;
    if data.sources.len() < 2 {
        return Err(Error::Contract(format!(
            "training needs at least 2 source domains, got {}",
            data.sources.len()
        )));
    }
    let started = Instant::now();
    let bcfg = config.backbone_config();
    let mut params = BackboneParams::init(&bcfg, config.seed)?;
    let counts: Vec<usize> = data.sources.iter().map(|d| d.spec.n_identities).collect();
    let mut memory = PrototypeMemory::new(&counts, bcfg.feature_dim, config.tau, config.beta)?;
    seed_memory(&mut memory, &params, config, data)?;
    let mut version = 0u64;

    let mut perturber = Perturber::new(config.seed, config.eps_num);
    let mut opt = Adam::new(config.weight_decay);
    let lambda = config.effective_lambda();
    let per_epoch = config.iterations_per_epoch.unwrap_or_else(|| {
        data.sources
            .iter()
            .map(|d| d.len().div_ceil(config.p * config.kins))
            .max()
            .unwrap_or(1)
    });
    let (warmup, milestones) = (config.warmup(), config.decay_epochs());

    let mut iterations = Vec::new();
    let mut events = Vec::new();
    let mut epochs = Vec::new();
    for epoch in 0..config.epochs {
        let lr = learning_rate(epoch, config.base_lr, warmup, &milestones);
        let mut sums = [0.0; 3];
        for step in 0..per_epoch {
            let it = (epoch * per_epoch + step) as u64;
            let log = train_step(
                config,
                data,
                &mut params,
                &mut memory,
                &mut perturber,
                &mut opt,
                StepState {
                    iteration: it,
                    lr,
                    lambda,
                    version: &mut version,
                    events: &mut events,
                },
            )
            .map_err(|e| at_iteration(it, e))?;
            sums[0] += log.loss_id;
            sums[1] += log.loss_g;
            sums[2] += log.loss;
            iterations.push(IterationLog { epoch, ..log });
        }
        let n = per_epoch as f64;
        epochs.push(EpochMetrics {
            epoch,
            lr,
            loss_id: sums[0] / n,
            loss_g: sums[1] / n,
            loss: sums[2] / n,
        });
    }

    let source = data
        .source_tests
        .iter()
        .map(|d| evaluate_domain(&params, &bcfg, d, metric))
        .collect::<Result<Vec<_>>>()?;
    let target = data
        .targets
        .iter()
        .map(|d| evaluate_domain(&params, &bcfg, d, metric))
        .collect::<Result<Vec<_>>>()?;
    let report = MetricsReport {
        epochs,
        source,
        target,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainRun {
        checkpoint: Checkpoint {
            config: config.clone(),
            params,
            memory,
        },
        report,
        iterations,
        events,
        lpm_records: perturber.records().to_vec(),
    })
}

struct StepState<'a> {
    iteration: u64,
    lr: f64,
    lambda: f64,
    version: &'a mut u64,
    events: &'a mut Vec<TrainEvent>,
}

/// One batch per source domain, forward, loss, step, then memory refresh.
fn train_step(
    config: &TrainConfig,
    data: &Benchmark,
    params: &mut BackboneParams,
    memory: &mut PrototypeMemory,
    perturber: &mut Perturber,
    opt: &mut Adam,
    st: StepState<'_>,
) -> Result<IterationLog> {
    let it = st.iteration;
    let bcfg = config.backbone_config();
    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let mut v_hats = Vec::with_capacity(data.sources.len());
    let mut keys: Vec<Vec<IdentityKey>> = Vec::with_capacity(data.sources.len());
    let mut id_losses = Vec::with_capacity(data.sources.len());
    for (k, domain) in data.sources.iter().enumerate() {
        let mut s = rng::stream(config.seed, Purpose::Sampler, it, k as u64, 0);
        let batch = sample_batch(domain, config.p, config.kins, &mut s)?;
        let x = g.constant(batch.images);
        let tags = vec![k; batch.labels.len()];
        let mode = if config.perturbs() {
            Mode::Train {
                perturber: &mut *perturber,
                domains: &tags,
                iteration: it,
            }
        } else {
            Mode::Eval
        };
        let out = backbone_forward(&mut g, x, &vars, &bcfg, mode)?;
        let labels: Vec<IdentityKey> = batch.labels.iter().map(|&y| (k, y)).collect();
        let logits = memory_classify(&mut g, out.embedding, memory)?;
        id_losses.push(identity_loss(&mut g, &logits, &labels)?);
        v_hats.push(out.embedding);
        keys.push(labels);
    }
    let flat = id_losses.iter().map(|&l| g.reshape(l, &[1])).collect::<Result<Vec<_>>>()?;
    let stacked = g.concat(&flat, 0)?;
    let loss_id = g.mean(stacked)?;

    let moments = memory.global_moments()?;
    st.events.push(TrainEvent::MomentsRead {
        iteration: it,
        version: *st.version,
    });
    let loss_g = calibration_loss(&mut g, &v_hats, &moments, config.eps_num)?;
    let loss = if st.lambda == 0.0 {
        loss_id
    } else {
        let weighted = g.scale(loss_g, st.lambda)?;
        g.add(loss_id, weighted)?
    };
    let (lid, lg, l) = (g.value(loss_id).item()?, g.value(loss_g).item()?, g.value(loss).item()?);
    if !l.is_finite() {
        return Err(Error::Numerics(format!("loss is {l}")));
    }

    let grads = g.backward(loss)?;
    let grad_tensors: Vec<Tensor> = vars.vars().into_iter().map(|v| grads.get(v)).collect();
    opt.step(&mut params.tensors_mut(), &grad_tensors, st.lr)?;
    st.events.push(TrainEvent::OptimizerStep { iteration: it });

    for (v, labels) in v_hats.iter().zip(&keys) {
        memory.update(g.value(*v), labels)?;
    }
    *st.version += 1;
    st.events.push(TrainEvent::MemoryUpdated {
        iteration: it,
        version: *st.version,
    });
    Ok(IterationLog {
        iteration: it,
        epoch: 0,
        loss_id: lid,
        loss_g: lg,
        lambda: st.lambda,
        loss: l,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, PerturbPlan};
    use crate::harness::config::DataConfig;
    use crate::synthdata::DataTemplate;

    fn small() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            iterations_per_epoch: Some(2),
            backbone: BackboneConfig {
                stage_channels: vec![4, 8],
                stage_strides: vec![1, 2],
                feature_dim: 8,
                ..BackboneConfig::default()
            },
            data: DataConfig {
                template: DataTemplate {
                    n_identities: 6,
                    source_test_identities: 4,
                    target_identities: 4,
                    ..DataTemplate::default()
                },
                ..DataConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn reported_loss_is_composed() {
        let cfg = TrainConfig { lambda: 3.0, ..small() };
        let data = cfg.data.generate().unwrap();
        let run = train_run(&cfg, &data, Metric::Cosine).unwrap();
        assert_eq!(run.iterations.len(), 4);
        for log in &run.iterations {
            assert!((log.loss - (log.loss_id + 3.0 * log.loss_g)).abs() <= 1e-12);
            assert!(log.loss_g >= 0.0);
        }
    }

    #[test]
    fn gcm_off_reports_identity_loss_only() {
        let cfg = TrainConfig {
            gcm_enabled: false,
            ..small()
        };
        let data = cfg.data.generate().unwrap();
        let run = train_run(&cfg, &data, Metric::Cosine).unwrap();
        for e in &run.report.epochs {
            assert_eq!(e.loss, e.loss_id);
        }
        let zero = TrainConfig { lambda: 0.0, ..small() };
        let run0 = train_run(&zero, &data, Metric::Cosine).unwrap();
        assert_eq!(run0.report.epochs, run.report.epochs);
    }

    #[test]
    fn switches_off_equal_baseline_path() {
        let base = TrainConfig {
            lpm_enabled: false,
            gcm_enabled: false,
            ..small()
        };
        let off = TrainConfig {
            lambda: 0.0,
            lpm_enabled: true,
            perturb_plan: PerturbPlan::None,
            ..small()
        };
        let data = base.data.generate().unwrap();
        let a = train_run(&base, &data, Metric::Cosine).unwrap();
        let b = train_run(&off, &data, Metric::Cosine).unwrap();
        assert_eq!(a.checkpoint.params, b.checkpoint.params);
        assert!(b.lpm_records.is_empty());
    }

    #[test]
    fn memory_read_precedes_step_and_update() {
        let cfg = small();
        let data = cfg.data.generate().unwrap();
        let run = train_run(&cfg, &data, Metric::Cosine).unwrap();
        assert_eq!(run.events.len(), 3 * run.iterations.len());
        for (i, chunk) in run.events.chunks(3).enumerate() {
            let it = i as u64;
            assert_eq!(chunk[0], TrainEvent::MomentsRead { iteration: it, version: it });
            assert_eq!(chunk[1], TrainEvent::OptimizerStep { iteration: it });
            assert_eq!(chunk[2], TrainEvent::MemoryUpdated { iteration: it, version: it + 1 });
        }
    }

    #[test]
    fn deterministic() {
        let cfg = small();
        let data = cfg.data.generate().unwrap();
        let a = train_run(&cfg, &data, Metric::Cosine).unwrap();
        let b = train_run(&cfg, &data, Metric::Cosine).unwrap();
        assert_eq!(a.report.metrics_csv(), b.report.metrics_csv());
        assert_eq!(a.checkpoint, b.checkpoint);
    }

    #[test]
    fn divergence_names_the_iteration() {
        let cfg = TrainConfig {
            base_lr: 1e300,
            warmup_epochs: Some(1),
            ..small()
        };
        let data = cfg.data.generate().unwrap();
        match train(&cfg, &data) {
            Err(Error::Numerics(m)) => assert!(m.contains("iteration"), "{m}"),
            other => panic!("expected a numerics error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn needs_two_sources() {
        let cfg = small();
        let mut data = cfg.data.generate().unwrap();
        data.sources.truncate(1);
        assert!(matches!(train(&cfg, &data), Err(Error::Contract(_))));
    }

    #[test]
    fn scores_are_in_range() {
        let cfg = small();
        let data = cfg.data.generate().unwrap();
        let (_, report) = train(&cfg, &data).unwrap();
        for r in report.source.iter().chain(&report.target) {
            assert!((0.0..=1.0).contains(&r.map) && (0.0..=1.0).contains(&r.rank1));
        }
        assert_eq!(report.source.len(), 3);
        assert!(!report.metrics_csv().contains("wall"));
    }
}
