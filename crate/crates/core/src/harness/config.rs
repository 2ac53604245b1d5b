use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, PerturbPlan};
use crate::error::{Error, Result};
use crate::gcm::{DEFAULT_BETA, DEFAULT_TAU};
use crate::lpm::EPS_NUM;
use crate::synthdata::{self, Benchmark, DataTemplate};

/// Which domains to generate and from which seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub k_source: usize,
    pub k_target: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub template: DataTemplate,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            k_source: 3,
            k_target: 1,
            seed: 0,
            template: DataTemplate::default(),
        }
    }
}

impl DataConfig {
    pub fn generate(&self) -> Result<Benchmark> {
        synthdata::make_domains(self.k_source, self.k_target, &self.template, self.seed)
    }
}

/// Training hyperparameters. JSON field names match the struct fields,
/// except `P` and `Kins`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the calibration loss.
    pub lambda: f64,
    /// EMA momentum of the prototype memory.
    pub beta: f64,
    /// Classifier temperature.
    pub tau: f64,
    pub epochs: usize,
    /// Defaults to 10% of `epochs`, at least 1.
    pub warmup_epochs: Option<usize>,
    pub base_lr: f64,
    /// Epochs at which the rate is multiplied by 0.1. Defaults to 50% and
    /// 5/6 of `epochs`.
    pub milestones: Option<Vec<usize>>,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
    #[serde(rename = "P")]
    pub p: usize,
    #[serde(rename = "Kins")]
    pub kins: usize,
    /// Defaults to one pass over the largest source domain.
    pub iterations_per_epoch: Option<usize>,
    pub perturb_plan: PerturbPlan,
    pub lpm_enabled: bool,
    pub gcm_enabled: bool,
    /// Training randomness: initialization, sampling, perturbation noise.
    pub seed: u64,
    pub eps_num: f64,
    /// Layer layout. Its own `perturb_plan` is replaced by the one above.
    pub backbone: BackboneConfig,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            beta: DEFAULT_BETA,
            tau: DEFAULT_TAU,
            epochs: 20,
            warmup_epochs: None,
            base_lr: 3.5e-3,
            milestones: None,
            weight_decay: 5e-4,
            p: 4,
            kins: 4,
            iterations_per_epoch: None,
            perturb_plan: PerturbPlan::All,
            lpm_enabled: true,
            gcm_enabled: true,
            seed: 0,
            eps_num: EPS_NUM,
            backbone: BackboneConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Contract(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Contract(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Contract(format!("tau must be positive, got {}", self.tau)));
        }
        if self.epochs == 0 {
            return Err(Error::Contract("epochs must be >= 1".into()));
        }
        if !(self.base_lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Contract("base_lr must be positive and weight_decay >= 0".into()));
        }
        if self.p == 0 || self.kins == 0 || self.p * self.kins < 2 {
            return Err(Error::Contract("each domain batch needs at least 2 samples".into()));
        }
        if !(self.eps_num > 0.0) {
            return Err(Error::Contract("eps_num must be positive".into()));
        }
        if self.iterations_per_epoch == Some(0) {
            return Err(Error::Contract("iterations_per_epoch must be >= 1".into()));
        }
        self.backbone_config().validate()
    }

    pub fn warmup(&self) -> usize {
        self.warmup_epochs
            .unwrap_or_else(|| ((self.epochs as f64 * 0.1).round() as usize).max(1))
    }

    pub fn decay_epochs(&self) -> Vec<usize> {
        self.milestones.clone().unwrap_or_else(|| {
            let e = self.epochs as f64;
            vec![(e * 0.5).round() as usize, (e * 50.0 / 60.0).round() as usize]
        })
    }

    /// Weight actually applied to the calibration loss.
    pub fn effective_lambda(&self) -> f64 {
        if self.gcm_enabled {
            self.lambda
        } else {
            0.0
        }
    }

    /// Whether any stage is perturbed.
    pub fn perturbs(&self) -> bool {
        self.lpm_enabled && self.perturb_plan != PerturbPlan::None
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            perturb_plan: self.perturb_plan.clone(),
            ..self.backbone.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_field_names() {
        let cfg = TrainConfig::from_json(
            r#"{"lambda": 10, "beta": 0.5, "tau": 0.1, "epochs": 60, "warmup_epochs": 10,
                "base_lr": 0.001, "P": 8, "Kins": 2, "perturb_plan": "shallow",
                "lpm_enabled": false, "gcm_enabled": true, "seed": 3, "eps_num": 1e-6}"#,
        )
        .unwrap();
        assert_eq!(cfg.lambda, 10.0);
        assert_eq!((cfg.p, cfg.kins), (8, 2));
        assert_eq!(cfg.perturb_plan, PerturbPlan::Shallow);
        assert_eq!(cfg.warmup(), 10);
        assert_eq!(cfg.decay_epochs(), vec![30, 50]);
        assert!(TrainConfig::from_json(r#"{"lamda": 1}"#).is_err());
    }

    #[test]
    fn defaults() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.warmup(), 2);
        assert_eq!(cfg.decay_epochs(), vec![10, 17]);
        let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invariants_enforced() {
        let bad = |f: fn(&mut TrainConfig)| {
            let mut c = TrainConfig::default();
            f(&mut c);
            matches!(c.validate(), Err(Error::Contract(_)))
        };
        assert!(bad(|c| c.lambda = -1.0));
        assert!(bad(|c| c.beta = 1.5));
        assert!(bad(|c| c.epochs = 0));
        assert!(bad(|c| c.tau = 0.0));
    }

    #[test]
    fn switches() {
        let mut c = TrainConfig::default();
        c.gcm_enabled = false;
        assert_eq!(c.effective_lambda(), 0.0);
        c.lpm_enabled = true;
        c.perturb_plan = PerturbPlan::None;
        assert!(!c.perturbs());
    }
}
