use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backbone::PerturbPlan;
use crate::error::{Error, Result};
use crate::synthdata::Benchmark;

use super::config::TrainConfig;
use super::train::{train, MetricsReport};

/// Which regularizers are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Setting {
    Baseline,
    Lpm,
    Gcm,
    Full,
}

impl Setting {
    pub fn label(self) -> &'static str {
        match self {
            Setting::Baseline => "baseline",
            Setting::Lpm => "+lpm",
            Setting::Gcm => "+gcm",
            Setting::Full => "full",
        }
    }

    pub fn switches(self) -> (bool, bool) {
        match self {
            Setting::Baseline => (false, false),
            Setting::Lpm => (true, false),
            Setting::Gcm => (false, true),
            Setting::Full => (true, true),
        }
    }
}

/// One cell of an ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub setting: Setting,
    pub lambda: f64,
    pub plan: PerturbPlan,
}

impl Variant {
    pub fn new(setting: Setting, lambda: f64, plan: PerturbPlan) -> Self {
        Variant { setting, lambda, plan }
    }

    pub fn label(&self) -> String {
        format!("{}/lambda={}/plan={}", self.setting.label(), self.lambda, self.plan.label())
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let (lpm, gcm) = self.setting.switches();
        TrainConfig {
            lpm_enabled: lpm,
            gcm_enabled: gcm,
            lambda: self.lambda,
            perturb_plan: self.plan.clone(),
            ..base.clone()
        }
    }
}

/// Key under which two variants train identically.
fn effective_key(cfg: &TrainConfig) -> String {
    let plan = if cfg.perturbs() { cfg.perturb_plan.label() } else { "-".into() };
    format!("{}|{}|{}", plan, cfg.effective_lambda(), cfg.seed)
}

/// Component study at `lambda = 1, plan = all`, the lambda sweep and the
/// placement sweep for the full model. Duplicates are dropped.
pub fn standard_grid() -> Vec<Variant> {
    let mut out: Vec<Variant> = Vec::new();
    let mut push = |v: Variant| {
        if !out.contains(&v) {
            out.push(v);
        }
    };
    for s in [Setting::Baseline, Setting::Lpm, Setting::Gcm, Setting::Full] {
        push(Variant::new(s, 1.0, PerturbPlan::All));
    }
    for l in [0.1, 1.0, 10.0, 100.0] {
        push(Variant::new(Setting::Full, l, PerturbPlan::All));
    }
    for p in [PerturbPlan::None, PerturbPlan::Shallow, PerturbPlan::Deep, PerturbPlan::All] {
        push(Variant::new(Setting::Full, 1.0, p));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub source_map: f64,
    pub source_rank1: f64,
    pub target_map: f64,
    pub target_rank1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub variant: String,
    pub seeds: usize,
    pub source_map: f64,
    pub target_map: f64,
    pub target_rank1: f64,
    /// Half the range of per-seed target mAP.
    pub target_map_spread: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl AblationTable {
    pub fn rows_for(&self, variant: &Variant) -> Vec<&AblationRow> {
        let label = variant.label();
        self.rows.iter().filter(|r| r.variant == label).collect()
    }

    pub fn summary(&self, variant: &Variant) -> Option<AblationSummary> {
        let rows = self.rows_for(variant);
        if rows.is_empty() {
            return None;
        }
        let col = |f: fn(&AblationRow) -> f64| rows.iter().map(|r| f(r)).collect::<Vec<_>>();
        let t = col(|r| r.target_map);
        let (lo, hi) = t.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        Some(AblationSummary {
            variant: variant.label(),
            seeds: rows.len(),
            source_map: median(&col(|r| r.source_map)),
            target_map: median(&t),
            target_rank1: median(&col(|r| r.target_rank1)),
            target_map_spread: 0.5 * (hi - lo),
        })
    }

    /// One row per (variant, seed).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,seed,source_map,source_rank1,target_map,target_rank1\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.variant, r.seed, r.source_map, r.source_rank1, r.target_map, r.target_rank1
            );
        }
        out
    }

    pub fn summary_csv(&self, variants: &[Variant]) -> String {
        let mut out = String::from("variant,seeds,median_source_map,median_target_map,median_target_rank1,target_map_spread\n");
        for s in variants.iter().filter_map(|v| self.summary(v)) {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6}",
                s.variant, s.seeds, s.source_map, s.target_map, s.target_rank1, s.target_map_spread
            );
        }
        out
    }
}

/// Trains every variant for every seed on fixed `data`.
///
/// Variants that train identically (for instance `+gcm` and `full` with
/// plan `none`) share one run per seed.
pub fn ablate(base: &TrainConfig, data: &Benchmark, variants: &[Variant], seeds: &[u64]) -> Result<AblationTable> {
    if seeds.is_empty() || variants.is_empty() {
        return Err(Error::Contract("ablation needs at least one variant and one seed".into()));
    }
    let mut cache: HashMap<String, MetricsReport> = HashMap::new();
    let mut rows = Vec::with_capacity(variants.len() * seeds.len());
    for v in variants {
        for &seed in seeds {
            let cfg = TrainConfig { seed, ..v.apply(base) };
            let key = effective_key(&cfg);
            let report = match cache.get(&key) {
                Some(r) => r.clone(),
                None => {
                    let (_, r) = train(&cfg, data)?;
                    cache.insert(key, r.clone());
                    r
                }
            };
            rows.push(AblationRow {
                variant: v.label(),
                seed,
                source_map: report.source_map(),
                source_rank1: report.source_rank1(),
                target_map: report.target_map(),
                target_rank1: report.target_rank1(),
            });
        }
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::harness::config::DataConfig;
    use crate::synthdata::DataTemplate;

    fn tiny() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            iterations_per_epoch: Some(1),
            backbone: BackboneConfig {
                stage_channels: vec![4, 4],
                stage_strides: vec![1, 2],
                feature_dim: 4,
                ..BackboneConfig::default()
            },
            data: DataConfig {
                template: DataTemplate {
                    n_identities: 4,
                    source_test_identities: 3,
                    target_identities: 3,
                    ..DataTemplate::default()
                },
                ..DataConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn grid_is_deduplicated() {
        let g = standard_grid();
        assert_eq!(g.len(), 10);
        let labels: std::collections::HashSet<String> = g.iter().map(Variant::label).collect();
        assert_eq!(labels.len(), 10);
    }

    #[test]
    fn lpm_row_ignores_lambda() {
        let cfg = Variant::new(Setting::Lpm, 10.0, PerturbPlan::All).apply(&TrainConfig::default());
        assert!(!cfg.gcm_enabled);
        assert_eq!(cfg.effective_lambda(), 0.0);
    }

    #[test]
    fn row_count_is_settings_times_seeds() {
        let base = tiny();
        let data = base.data.generate().unwrap();
        let variants = [
            Variant::new(Setting::Baseline, 1.0, PerturbPlan::All),
            Variant::new(Setting::Full, 1.0, PerturbPlan::All),
        ];
        let table = ablate(&base, &data, &variants, &[0, 1, 2]).unwrap();
        assert_eq!(table.rows.len(), 6);
        assert_eq!(table.to_csv().lines().count(), 7);
        assert_eq!(table.summary(&variants[1]).unwrap().seeds, 3);
    }

    #[test]
    fn equivalent_variants_share_results() {
        let base = tiny();
        let data = base.data.generate().unwrap();
        let a = Variant::new(Setting::Gcm, 1.0, PerturbPlan::All);
        let b = Variant::new(Setting::Full, 1.0, PerturbPlan::None);
        let table = ablate(&base, &data, &[a.clone(), b.clone()], &[4]).unwrap();
        let (ra, rb) = (table.rows_for(&a)[0], table.rows_for(&b)[0]);
        assert_eq!((ra.source_map, ra.target_map), (rb.source_map, rb.target_map));
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
