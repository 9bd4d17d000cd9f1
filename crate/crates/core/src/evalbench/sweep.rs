//! One-dimensional hyperparameter sweeps of the alignment stage.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{LarrError, Result};
use crate::fusion::FusionConfig;
use crate::pipeline::{evaluate, fusion_stage, Dataset, Metrics};
use crate::scenecache::EmbeddingCache;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    /// Alignment-loss temperature.
    Temperature,
    /// Extra uniformly sampled alignment negatives per batch row.
    NegativeRatio,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Temperature => "temperature",
            SweepParam::NegativeRatio => "negative_ratio",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "temperature" | "tau" => Ok(SweepParam::Temperature),
            "negative_ratio" | "negative-ratio" => Ok(SweepParam::NegativeRatio),
            _ => Err(LarrError::InvalidConfig(format!("unknown sweep parameter `{s}`"))),
        }
    }

    fn set(self, cfg: &mut FusionConfig, value: f64) {
        match self {
            SweepParam::Temperature => cfg.tau = value,
            SweepParam::NegativeRatio => cfg.negative_ratio = value,
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub param: SweepParam,
    pub seed: u64,
    pub points: Vec<SweepPoint>,
}

impl Curve {
    /// Two-column table `param<TAB>ctr_auc`, one row per grid point.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("{}\tctr_auc\n", self.param);
        for p in &self.points {
            out.push_str(&format!("{}\t{:.6}\n", p.value, p.metrics.ctr_auc));
        }
        out
    }

    /// Grid values ordered by descending CTR AUC (ties keep grid order).
    pub fn ranking(&self) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..self.points.len()).collect();
        idx.sort_by(|&a, &b| self.points[b].metrics.ctr_auc.total_cmp(&self.points[a].metrics.ctr_auc));
        idx.into_iter().map(|i| self.points[i].value).collect()
    }
}

/// Retrains the alignment stage once per grid value with everything else
/// fixed, including the seed, and evaluates on the test split.
pub fn sweep(param: SweepParam, grid: &[f64], ds: &Dataset, cache: &EmbeddingCache, base: &FusionConfig) -> Result<Curve> {
    if grid.is_empty() {
        return Err(LarrError::Empty("sweep grid"));
    }
    let mut points = Vec::with_capacity(grid.len());
    for &value in grid {
        let mut cfg = base.clone();
        param.set(&mut cfg, value);
        cfg.validate()?;
        let (model, _) = fusion_stage(ds, Some(cache), &cfg)?;
        let metrics = evaluate(&model, ds, Some(cache))?;
        log::info!("stage=sweep param={param} value={value} ctr_auc={:.4}", metrics.ctr_auc);
        points.push(SweepPoint { value, metrics });
    }
    Ok(Curve {
        param,
        seed: base.seed,
        points,
    })
}
