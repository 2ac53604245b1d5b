//! Reverse-mode gradients of the full training loss against central
//! differences, on a model small enough to difference every parameter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::backbone::{backbone_forward, BackboneConfig, BackboneParams, Mode, PerturbPlan};
use crate::error::{Error, Result};
use crate::gcm::{calibration_loss, identity_loss, memory_classify, IdentityKey, PrototypeMemory, DEFAULT_BETA, DEFAULT_TAU};
use crate::lpm::{Freeze, Perturber, EPS_NUM};
use crate::tensor::{finite_diff_grad, max_relative_error, Graph, OpKind, Tensor};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-3;
/// Denominator floor of the relative error.
pub const FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockError {
    pub name: String,
    pub len: usize,
    pub max_relative_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub lambda: f64,
    pub parameter_count: usize,
    pub blocks: Vec<BlockError>,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_relative_error).fold(0.0, f64::max)
    }

    /// Blocks whose error reaches `TOLERANCE`.
    pub fn failures(&self) -> Vec<&BlockError> {
        self.blocks.iter().filter(|b| !(b.max_relative_error < TOLERANCE)).collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

/// Two domains, two identities each, one 2-instance batch per domain.
struct Fixture {
    config: BackboneConfig,
    params: BackboneParams,
    batches: Vec<(Tensor, Vec<IdentityKey>)>,
    memory: PrototypeMemory,
}

fn fixture(seed: u64) -> Result<Fixture> {
    let config = BackboneConfig {
        in_channels: 2,
        stage_channels: vec![3, 4],
        stage_strides: vec![1, 2],
        feature_dim: 4,
        perturb_plan: PerturbPlan::All,
        ..BackboneConfig::default()
    };
    let params = BackboneParams::init(&config, seed)?;
    let mut s = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut s)).collect() };
    let mut batches = Vec::new();
    for k in 0..2 {
        let shift = k as f64;
        let images: Vec<f64> = normal(2 * 2 * 4 * 4).into_iter().map(|v| v + shift).collect();
        batches.push((Tensor::new(vec![2, 2, 4, 4], images)?, vec![(k, 0), (k, 1)]));
    }
    let mut memory = PrototypeMemory::new(&[2, 2], config.feature_dim, DEFAULT_TAU, DEFAULT_BETA)?;
    let keys = [(0, 0), (0, 1), (1, 0), (1, 1)];
    memory.update(&Tensor::new(vec![4, 4], normal(16))?, &keys)?;
    Ok(Fixture {
        config,
        params,
        batches,
        memory,
    })
}

/// `mean_k L_id^k + lambda L_g` on the fixture, with gradients when `grad`.
fn loss_and_grads(
    fx: &Fixture,
    params: &BackboneParams,
    perturber: &mut Perturber,
    lambda: f64,
    fault: Option<OpKind>,
    grad: bool,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = match fault {
        Some(kind) => Graph::with_fault(kind),
        None => Graph::new(),
    };
    let vars = params.register(&mut g);
    let mut v_hats = Vec::new();
    let mut id_losses = Vec::new();
    for (k, (images, keys)) in fx.batches.iter().enumerate() {
        let x = g.constant(images.clone());
        let tags = vec![k; keys.len()];
        let out = backbone_forward(
            &mut g,
            x,
            &vars,
            &fx.config,
            Mode::Train {
                perturber: &mut *perturber,
                domains: &tags,
                iteration: 0,
            },
        )?;
        let logits = memory_classify(&mut g, out.embedding, &fx.memory)?;
        let l = identity_loss(&mut g, &logits, keys)?;
        id_losses.push(g.reshape(l, &[1])?);
        v_hats.push(out.embedding);
    }
    let stacked = g.concat(&id_losses, 0)?;
    let loss_id = g.mean(stacked)?;
    let loss_g = calibration_loss(&mut g, &v_hats, &fx.memory.global_moments()?, EPS_NUM)?;
    let weighted = g.scale(loss_g, lambda)?;
    let loss = g.add(loss_id, weighted)?;
    let value = g.value(loss).item()?;
    if !grad {
        return Ok((value, Vec::new()));
    }
    let grads = g.backward(loss)?;
    Ok((value, vars.vars().into_iter().map(|v| grads.get(v)).collect()))
}

/// Checks every parameter block at `lambda`. `fault` corrupts one backward
/// rule, for negative controls.
pub fn gradcheck(lambda: f64, fault: Option<OpKind>) -> Result<GradcheckReport> {
    let fx = fixture(11)?;
    let mut perturber = Perturber::new(5, EPS_NUM);
    perturber.set_freeze(Freeze::Record);
    let (_, analytic) = loss_and_grads(&fx, &fx.params, &mut perturber, lambda, fault, true)?;
    perturber.set_freeze(Freeze::Replay);
    let names = fx.params.names();
    let mut blocks = Vec::with_capacity(names.len());
    for (i, name) in names.into_iter().enumerate() {
        let x = fx.params.tensors()[i].clone();
        let numeric = finite_diff_grad(
            |t| {
                let mut p = fx.params.clone();
                *p.tensors_mut()[i] = t.clone();
                Ok(loss_and_grads(&fx, &p, &mut perturber, lambda, None, false)?.0)
            },
            &x,
            STEP,
        )?;
        blocks.push(BlockError {
            name,
            len: x.len(),
            max_relative_error: max_relative_error(&analytic[i], &numeric, FLOOR),
        });
    }
    Ok(GradcheckReport {
        lambda,
        parameter_count: fx.config.parameter_count(),
        blocks,
    })
}

/// Gradcheck at every lambda; an error lists the offending blocks.
pub fn run(lambdas: &[f64]) -> Result<Vec<GradcheckReport>> {
    let reports = lambdas.iter().map(|&l| gradcheck(l, None)).collect::<Result<Vec<_>>>()?;
    let bad: Vec<String> = reports
        .iter()
        .flat_map(|r| {
            r.failures()
                .into_iter()
                .map(move |b| format!("{} at lambda={} (error {:.3e})", b.name, r.lambda, b.max_relative_error))
        })
        .collect();
    if bad.is_empty() {
        Ok(reports)
    } else {
        Err(Error::Oracle(format!("gradient mismatch in {}", bad.join(", "))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_is_tiny() {
        let r = gradcheck(0.0, None).unwrap();
        assert!(r.parameter_count <= 500);
        assert_eq!(r.blocks.iter().map(|b| b.len).sum::<usize>(), r.parameter_count);
    }

    #[test]
    fn identity_path_passes() {
        let r = gradcheck(0.0, None).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn full_path_passes() {
        let r = gradcheck(1.0, None).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn corrupted_rule_is_caught() {
        let r = gradcheck(1.0, Some(OpKind::Conv2d)).unwrap();
        assert!(r.max_error() > 1e-1, "{r:?}");
        assert!(!r.passed());
    }
}
