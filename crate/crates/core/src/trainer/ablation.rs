//! Component ablations run under one shared budget.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{test_report, train, RunPaths, TrainConfig};
use crate::datasets::DatasetSplit;
use crate::error::Result;
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// The full model followed by one row per removed or added component.
pub fn ablation_variants(model: &ModelConfig, train: &TrainConfig) -> Vec<Variant> {
    let v = |name: &str, f: &dyn Fn(&mut ModelConfig, &mut TrainConfig)| {
        let (mut m, mut t) = (model.clone(), train.clone());
        f(&mut m, &mut t);
        Variant {
            name: name.to_string(),
            model: m,
            train: t,
        }
    };
    vec![
        v("Full", &|_, _| {}),
        v("w/o CoT", &|m, _| m.reasoner.steps = 1),
        v("w/o Diffusion", &|m, _| m.use_diffusion = false),
        v("w/o RL", &|_, t| t.beta = 0.0),
        v("w/o MSE", &|_, t| t.alpha = 0.0),
        v("with KL", &|_, t| t.with_kl = true),
        v("with Two-stage", &|_, t| t.two_stage = true),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub best_epoch: Option<usize>,
    pub valid_best: Option<f64>,
    /// Test metrics of the best-validation model.
    pub test: BTreeMap<String, f64>,
    pub train_ms_per_batch: f64,
    pub infer_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Metric columns in name order, then timing.
    pub fn to_csv(&self) -> String {
        let cols: Vec<&String> = self.rows.first().map(|r| r.test.keys().collect()).unwrap_or_default();
        let mut s = String::from("variant");
        for c in &cols {
            let _ = write!(s, ",{c}");
        }
        s.push_str(",best_epoch,train_ms_per_batch,infer_seconds\n");
        for r in &self.rows {
            s.push_str(&r.name);
            for c in &cols {
                let _ = write!(s, ",{:.6}", r.test.get(*c).copied().unwrap_or(f64::NAN));
            }
            let be = r.best_epoch.map(|e| e.to_string()).unwrap_or_default();
            let _ = writeln!(s, ",{be},{:.3},{:.4}", r.train_ms_per_batch, r.infer_seconds);
        }
        s
    }
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

/// Trains and tests every variant. With `out`, each variant gets its own
/// sub-directory.
pub fn run_ablation(
    split: &DatasetSplit,
    variants: &[Variant],
    out: Option<&std::path::Path>,
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        log::info!("ablation: {}", v.name);
        let paths = out.map(|d| RunPaths::new(d.join(slug(&v.name))));
        let res = train(split, &v.model, &v.train, paths.as_ref(), None)?;
        let test = test_report(&res.best, split, &v.train)?;
        let n = res.timing.len().max(1) as f64;
        rows.push(AblationRow {
            name: v.name.clone(),
            best_epoch: res.best_epoch,
            valid_best: res.best_metric,
            test: test.metrics,
            train_ms_per_batch: res.timing.iter().map(|t| t.train_ms_per_batch).sum::<f64>() / n,
            infer_seconds: res.timing.iter().map(|t| t.infer_seconds).sum::<f64>() / n,
        });
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_wiring() {
        let vs = ablation_variants(&ModelConfig::default(), &TrainConfig::default());
        let names: Vec<&str> = vs.iter().map(|v| v.name.as_str()).collect();
        assert_eq!(
            names,
            ["Full", "w/o CoT", "w/o Diffusion", "w/o RL", "w/o MSE", "with KL", "with Two-stage"]
        );
        assert_eq!(vs[1].model.reasoner.steps, 1);
        assert!(!vs[2].model.use_diffusion);
        assert_eq!(vs[3].train.beta, 0.0);
        assert_eq!(vs[4].train.alpha, 0.0);
        assert!(vs[5].train.with_kl);
        assert!(vs[6].train.two_stage);
        assert_eq!(slug("w/o RL"), "w_o_rl");
    }
}
