//! Per-stage diagnostics for one example: the rank of the target under each
//! thinking token and the final anchor, plus their pairwise cosine
//! similarities.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::rank_of_target;
use crate::datasets::Example;
use crate::error::{Error, Result};
use crate::model::Arch;
use crate::numerics::{ParamStore, RandomSource};

/// `step1 .. stepR`, then `diffusion` for the anchor.
pub fn stage_names(arch: &Arch) -> Vec<String> {
    (1..=arch.cfg.reasoner.steps)
        .map(|i| format!("step{i}"))
        .chain(std::iter::once("diffusion".to_string()))
        .collect()
}

/// Cosine similarity; zero vectors give 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub stages: Vec<String>,
    pub ranks: Vec<usize>,
    pub similarity: Vec<Vec<f64>>,
}

pub fn trajectory_report(
    arch: &Arch,
    store: &ParamStore,
    example: &Example,
    src: &RandomSource,
    key: u64,
) -> Result<TrajectoryReport> {
    let inf = arch.infer(store, &example.input, src, key)?;
    let vecs: Vec<&Vec<f64>> = inf.tokens.iter().chain(std::iter::once(&inf.anchor)).collect();
    let ranks = vecs
        .iter()
        .map(|z| rank_of_target(&arch.backbone.score_values(store, z), example.target))
        .collect();
    let n = vecs.len();
    let mut similarity = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let c = cosine(vecs[i], vecs[j]);
            similarity[i][j] = c;
            similarity[j][i] = c;
        }
    }
    Ok(TrajectoryReport {
        stages: stage_names(arch),
        ranks,
        similarity,
    })
}

fn write(path: &Path, s: String) -> Result<()> {
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn write_similarity_csv(path: &Path, rep: &TrajectoryReport) -> Result<()> {
    let mut s = format!("stage,{}\n", rep.stages.join(","));
    for (name, row) in rep.stages.iter().zip(&rep.similarity) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(s, "{name},{}", cells.join(","));
    }
    write(path, s)
}

/// Rows of `(user, stage, rank)` for many reports.
pub fn write_stage_ranks_csv(path: &Path, reports: &[(u64, TrajectoryReport)]) -> Result<()> {
    let mut s = String::from("user,stage,rank\n");
    for (user, rep) in reports {
        for (name, r) in rep.stages.iter().zip(&rep.ranks) {
            let _ = writeln!(s, "{user},{name},{r}");
        }
    }
    write(path, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};

    fn tiny(steps: usize, diffusion: bool) -> Model {
        let mut cfg = ModelConfig::default();
        cfg.backbone.d_model = 8;
        cfg.backbone.max_len = 5;
        cfg.backbone.ffn_dim = 8;
        cfg.reasoner.ffn_dim = 8;
        cfg.reasoner.steps = steps;
        cfg.diffusion.steps = 3;
        cfg.use_diffusion = diffusion;
        Model::new(&cfg, 9, 11).unwrap()
    }

    fn ex() -> Example {
        Example {
            input: vec![0, 0, 3, 4, 5],
            next: vec![0, 0, 4, 5, 6],
            target: 6,
        }
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 2.0]), 0.0);
        assert!((cosine(&[1.0, 1.0], &[2.0, 2.0]) - 1.0).abs() < 1e-15);
        assert!((cosine(&[1.0, 2.0], &[-1.0, -2.0]) + 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
    }

    #[test]
    fn single_step_without_diffusion_collapses() {
        let m = tiny(1, false);
        let rep = trajectory_report(&m.arch, &m.store, &ex(), &RandomSource::new(0), 0).unwrap();
        assert_eq!(rep.stages, vec!["step1", "diffusion"]);
        assert_eq!(rep.ranks[0], rep.ranks[1]);
        for row in &rep.similarity {
            for &v in row {
                assert!((v - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn similarity_is_symmetric_with_unit_diagonal() {
        let m = tiny(3, true);
        let rep = trajectory_report(&m.arch, &m.store, &ex(), &RandomSource::new(0), 4).unwrap();
        let n = rep.stages.len();
        assert_eq!(n, 4);
        for i in 0..n {
            assert_eq!(rep.similarity[i][i], 1.0);
            for j in 0..n {
                assert_eq!(rep.similarity[i][j], rep.similarity[j][i]);
                assert!(rep.similarity[i][j].abs() <= 1.0);
            }
        }
        assert!(rep.ranks.iter().all(|&r| (1..=9).contains(&r)));
        let dir = tempfile::tempdir().unwrap();
        write_similarity_csv(&dir.path().join("s.csv"), &rep).unwrap();
        write_stage_ranks_csv(&dir.path().join("r.csv"), &[(7, rep)]).unwrap();
        let text = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
        assert_eq!(text.lines().count(), 5);
    }
}
