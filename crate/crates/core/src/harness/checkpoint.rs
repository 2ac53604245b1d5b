//! Checkpoints in the tensor file format.
//!
//! Configuration scalars are stored as rank-0 tensors under `config.*`, the
//! backbone weights under their parameter names and the memory under
//! `memory.*`. The data configuration is not part of a checkpoint.

use std::path::Path;

use crate::backbone::{BackboneConfig, BackboneParams, PerturbPlan, PerturbSite};
use crate::error::{Error, Result};
use crate::gcm::PrototypeMemory;
use crate::tensor::{io, Tensor};

use super::config::TrainConfig;
use super::train::Checkpoint;

fn scalar(name: &str, v: f64) -> Result<(String, Tensor)> {
    Ok((format!("config.{name}"), Tensor::scalar(v)?))
}

fn vector(name: &str, v: &[usize]) -> Result<(String, Tensor)> {
    Ok((format!("config.{name}"), Tensor::vector(v.iter().map(|&x| x as f64).collect())?))
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn plan_code(plan: &PerturbPlan) -> f64 {
    match plan {
        PerturbPlan::None => 0.0,
        PerturbPlan::Shallow => 1.0,
        PerturbPlan::Deep => 2.0,
        PerturbPlan::All => 3.0,
        PerturbPlan::Mask(_) => 4.0,
    }
}

pub fn to_records(ckpt: &Checkpoint) -> Result<Vec<(String, Tensor)>> {
    let c = &ckpt.config;
    let b = &c.backbone;
    let mut out = vec![
        scalar("lambda", c.lambda)?,
        scalar("beta", c.beta)?,
        scalar("tau", c.tau)?,
        scalar("epochs", c.epochs as f64)?,
        scalar("base_lr", c.base_lr)?,
        scalar("weight_decay", c.weight_decay)?,
        scalar("P", c.p as f64)?,
        scalar("Kins", c.kins as f64)?,
        scalar("lpm_enabled", flag(c.lpm_enabled))?,
        scalar("gcm_enabled", flag(c.gcm_enabled))?,
        // split so that every u64 survives the f64 payload
        scalar("seed_hi", (c.seed >> 32) as f64)?,
        scalar("seed_lo", (c.seed & 0xFFFF_FFFF) as f64)?,
        scalar("eps_num", c.eps_num)?,
        scalar("perturb_plan", plan_code(&c.perturb_plan))?,
        scalar("backbone.in_channels", b.in_channels as f64)?,
        vector("backbone.stage_channels", &b.stage_channels)?,
        vector("backbone.stage_strides", &b.stage_strides)?,
        scalar("backbone.feature_dim", b.feature_dim as f64)?,
        scalar("backbone.perturb_plan", plan_code(&b.perturb_plan))?,
        scalar("backbone.perturb_site", flag(b.perturb_site == PerturbSite::Output))?,
    ];
    if let PerturbPlan::Mask(m) = &c.perturb_plan {
        out.push(vector("perturb_mask", &m.iter().map(|&x| x as usize).collect::<Vec<_>>())?);
    }
    if let PerturbPlan::Mask(m) = &b.perturb_plan {
        out.push(vector("backbone.perturb_mask", &m.iter().map(|&x| x as usize).collect::<Vec<_>>())?);
    }
    if let Some(w) = c.warmup_epochs {
        out.push(scalar("warmup_epochs", w as f64)?);
    }
    if let Some(m) = &c.milestones {
        out.push(vector("milestones", m)?);
    }
    if let Some(n) = c.iterations_per_epoch {
        out.push(scalar("iterations_per_epoch", n as f64)?);
    }
    for (name, t) in ckpt.params.names().into_iter().zip(ckpt.params.tensors()) {
        out.push((name, t.clone()));
    }
    out.extend(ckpt.memory.to_records()?);
    Ok(out)
}

struct Reader<'a>(&'a [(String, Tensor)]);

impl Reader<'_> {
    fn f(&self, name: &str) -> Result<f64> {
        io::find(self.0, &format!("config.{name}"))?.item()
    }

    fn has(&self, name: &str) -> bool {
        io::find(self.0, &format!("config.{name}")).is_ok()
    }

    fn u(&self, name: &str) -> Result<usize> {
        as_index(self.f(name)?)
    }

    fn b(&self, name: &str) -> Result<bool> {
        Ok(self.f(name)? != 0.0)
    }

    fn list(&self, name: &str) -> Result<Vec<usize>> {
        io::find(self.0, &format!("config.{name}"))?
            .data()
            .iter()
            .map(|&v| as_index(v))
            .collect()
    }

    fn plan(&self, prefix: &str) -> Result<PerturbPlan> {
        Ok(match self.u(&format!("{prefix}perturb_plan"))? {
            0 => PerturbPlan::None,
            1 => PerturbPlan::Shallow,
            2 => PerturbPlan::Deep,
            3 => PerturbPlan::All,
            4 => PerturbPlan::Mask(self.list(&format!("{prefix}perturb_mask"))?.iter().map(|&x| x != 0).collect()),
            other => return Err(Error::Format(format!("unknown perturbation plan code {other}"))),
        })
    }
}

fn as_index(v: f64) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < 9.0e15 {
        Ok(v as usize)
    } else {
        Err(Error::Format(format!("expected a non-negative integer, found {v}")))
    }
}

pub fn from_records(records: &[(String, Tensor)]) -> Result<Checkpoint> {
    let r = Reader(records);
    let backbone = BackboneConfig {
        in_channels: r.u("backbone.in_channels")?,
        stage_channels: r.list("backbone.stage_channels")?,
        stage_strides: r.list("backbone.stage_strides")?,
        feature_dim: r.u("backbone.feature_dim")?,
        perturb_plan: r.plan("backbone.")?,
        perturb_site: if r.b("backbone.perturb_site")? {
            PerturbSite::Output
        } else {
            PerturbSite::Input
        },
    };
    let config = TrainConfig {
        lambda: r.f("lambda")?,
        beta: r.f("beta")?,
        tau: r.f("tau")?,
        epochs: r.u("epochs")?,
        warmup_epochs: if r.has("warmup_epochs") { Some(r.u("warmup_epochs")?) } else { None },
        base_lr: r.f("base_lr")?,
        milestones: if r.has("milestones") { Some(r.list("milestones")?) } else { None },
        weight_decay: r.f("weight_decay")?,
        p: r.u("P")?,
        kins: r.u("Kins")?,
        iterations_per_epoch: if r.has("iterations_per_epoch") {
            Some(r.u("iterations_per_epoch")?)
        } else {
            None
        },
        perturb_plan: r.plan("")?,
        lpm_enabled: r.b("lpm_enabled")?,
        gcm_enabled: r.b("gcm_enabled")?,
        seed: ((r.u("seed_hi")? as u64) << 32) | r.u("seed_lo")? as u64,
        eps_num: r.f("eps_num")?,
        backbone,
        data: Default::default(),
    };
    let bcfg = config.backbone_config();
    let names = BackboneParams::init(&bcfg, 0)?.names();
    let get = |name: &String| io::find(records, name).cloned();
    let stages = bcfg.stages();
    let mut kernels = Vec::with_capacity(stages);
    let mut biases = Vec::with_capacity(stages);
    for i in 0..stages {
        kernels.push(get(&names[2 * i])?);
        biases.push(get(&names[2 * i + 1])?);
    }
    let params = BackboneParams {
        kernels,
        biases,
        projection: get(&names[2 * stages])?,
    };
    params.check(&bcfg).map_err(|e| Error::Format(e.to_string()))?;
    Ok(Checkpoint {
        config,
        params,
        memory: PrototypeMemory::from_records(records)?,
    })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    io::save(path, &to_records(ckpt)?)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_records(&io::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gcm::{DEFAULT_BETA, DEFAULT_TAU};

    fn sample(cfg: TrainConfig) -> Checkpoint {
        let bcfg = cfg.backbone_config();
        let params = BackboneParams::init(&bcfg, 7).unwrap();
        let mut memory = PrototypeMemory::new(&[2, 3], bcfg.feature_dim, DEFAULT_TAU, DEFAULT_BETA).unwrap();
        let v = Tensor::full(&[1, bcfg.feature_dim], 0.5);
        memory.update(&v, &[(1, 2)]).unwrap();
        Checkpoint {
            config: cfg,
            params,
            memory,
        }
    }

    #[test]
    fn round_trip() {
        let ckpt = sample(TrainConfig {
            seed: u64::MAX - 3,
            milestones: Some(vec![3, 9]),
            perturb_plan: PerturbPlan::Mask(vec![true, false, false, true]),
            ..TrainConfig::default()
        });
        let back = from_records(&to_records(&ckpt).unwrap()).unwrap();
        assert_eq!(back, ckpt);
        let plain = sample(TrainConfig::default());
        assert_eq!(from_records(&to_records(&plain).unwrap()).unwrap(), plain);
    }

    #[test]
    fn file_round_trip() {
        let path = std::env::temp_dir().join(format!("peca-ckpt-{}.bin", std::process::id()));
        let ckpt = sample(TrainConfig::default());
        save(&path, &ckpt).unwrap();
        assert_eq!(load(&path).unwrap(), ckpt);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn missing_tensor_is_a_format_error() {
        let ckpt = sample(TrainConfig::default());
        let records: Vec<_> = to_records(&ckpt)
            .unwrap()
            .into_iter()
            .filter(|(n, _)| n != "backbone.projection")
            .collect();
        assert!(matches!(from_records(&records), Err(Error::Format(_))));
    }
}
