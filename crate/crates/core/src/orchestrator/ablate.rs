//! Variant grid: fusion block × constraint chain.

use std::path::Path;

use serde::Serialize;

use crate::config::RunConfig;
use crate::detector::FusionMode;
use crate::error::{Error, Result};

use super::{evaluate, run_all, Dataset, RunDir};

/// Cumulative constraint sets, each adding one loss to the previous.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Chain {
    #[serde(rename = "cdcm")]
    Cdcm,
    #[serde(rename = "+scm")]
    Scm,
    #[serde(rename = "+clem")]
    Clem,
    #[serde(rename = "+plm")]
    Plm,
}

impl Chain {
    pub const ALL: [Chain; 4] = [Chain::Cdcm, Chain::Scm, Chain::Clem, Chain::Plm];

    pub fn name(self) -> &'static str {
        match self {
            Chain::Cdcm => "cdcm",
            Chain::Scm => "+scm",
            Chain::Clem => "+clem",
            Chain::Plm => "+plm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Chain::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::config("variants", format!("unknown constraint set `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Variant {
    pub fusion: FusionMode,
    pub chain: Chain,
}

impl Variant {
    pub fn name(&self) -> String {
        format!("{}:{}", self.fusion.name(), self.chain.name())
    }

    /// `fusion:chain` (e.g. `dam:+clem`); a bare fusion mode means the full
    /// chain and a bare chain means the `dam` block.
    pub fn parse(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some((f, c)) => Ok(Self {
                fusion: f.parse()?,
                chain: Chain::parse(c)?,
            }),
            None => match s.parse::<FusionMode>() {
                Ok(fusion) => Ok(Self {
                    fusion,
                    chain: Chain::Plm,
                }),
                Err(_) => Ok(Self {
                    fusion: FusionMode::Dam,
                    chain: Chain::parse(s)?,
                }),
            },
        }
    }

    pub fn grid() -> Vec<Variant> {
        FusionMode::ALL
            .into_iter()
            .flat_map(|fusion| Chain::ALL.into_iter().map(move |chain| Variant { fusion, chain }))
            .collect()
    }

    /// The base configuration with this variant's fusion block and with the
    /// weights of constraints outside the chain set to zero. Every variant
    /// keeps both training stages, so all train for the same number of epochs.
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.detector.fusion = self.fusion;
        let w = &mut cfg.weights;
        if self.chain < Chain::Scm {
            w.w_sem = 0.0;
        }
        if self.chain < Chain::Clem {
            w.w_clem = 0.0;
        }
        if self.chain < Chain::Plm {
            w.w_plm = 0.0;
        }
        cfg
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub fusion: FusionMode,
    pub constraints: Chain,
    pub seeds: Vec<u64>,
    pub test_iou: Vec<f64>,
    pub test_f1: Vec<f64>,
    pub median_iou: f64,
    pub median_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn get(&self, fusion: FusionMode, chain: Chain) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.fusion == fusion && r.constraints == chain)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }
}

/// Trains and tests every variant once per seed under `out/<variant>/seed-<s>`
/// and writes `out/ablation.json`.
pub fn ablate(
    base: &RunConfig,
    data: &Dataset,
    variants: &[Variant],
    seeds: &[u64],
    out: &Path,
) -> Result<AblationTable> {
    base.validate()?;
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::config("variants", "need at least one variant and one seed"));
    }
    let mut rows = Vec::new();
    for v in variants {
        let mut row = AblationRow {
            variant: v.name(),
            fusion: v.fusion,
            constraints: v.chain,
            seeds: seeds.to_vec(),
            test_iou: Vec::new(),
            test_f1: Vec::new(),
            median_iou: 0.0,
            median_f1: 0.0,
        };
        for &seed in seeds {
            let mut cfg = v.apply(base);
            cfg.seed = seed;
            let dir = out
                .join(v.name().replace(':', "_").replace('+', "plus-"))
                .join(format!("seed-{seed}"));
            let run = RunDir::new(dir);
            run_all(&run, &cfg, data)?;
            let m = evaluate(&run, &cfg, data, "test")?;
            log::info!("{} seed {seed}: test IoU {:.4}", v.name(), m.iou);
            row.test_iou.push(m.iou);
            row.test_f1.push(m.f1);
        }
        row.median_iou = median(&row.test_iou);
        row.median_f1 = median(&row.test_f1);
        rows.push(row);
    }
    let table = AblationTable { rows };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("ablation.json");
    std::fs::write(&path, table.to_json()).map_err(|e| Error::io(&path, e))?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_forms() {
        assert_eq!(
            Variant::parse("concat:+scm").unwrap(),
            Variant {
                fusion: FusionMode::Concat,
                chain: Chain::Scm
            }
        );
        assert_eq!(Variant::parse("subtract").unwrap().chain, Chain::Plm);
        assert_eq!(Variant::parse("cdcm").unwrap().fusion, FusionMode::Dam);
        assert!(Variant::parse("dam:+xyz").is_err());
        assert_eq!(Variant::grid().len(), 12);
    }

    #[test]
    fn chain_zeroes_later_weights() {
        let base = RunConfig::default();
        let c = Variant::parse("cdcm").unwrap().apply(&base);
        assert_eq!((c.weights.w_sem, c.weights.w_clem, c.weights.w_plm), (0.0, 0.0, 0.0));
        let c = Variant::parse("+clem").unwrap().apply(&base);
        assert!(c.weights.w_clem > 0.0);
        assert_eq!(c.weights.w_plm, 0.0);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    }
}
