use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{Toggles, TrainConfig};
use super::data::Workspace;
use super::model::Decoding;
use super::{evaluate, pretrain_backbone, train_with};
use crate::error::{Error, Result};
use crate::evalmetrics::Scores;
use crate::sfn::FusionMode;
use crate::synthdata::Split;

/// Fewest training seeds an ablation accepts.
pub const MIN_SEEDS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub toggles: Toggles,
    pub fusion_mode: FusionMode,
}

impl AblationRow {
    pub fn new(toggles: Toggles, fusion_mode: FusionMode) -> Self {
        Self {
            name: toggles.label(),
            toggles,
            fusion_mode,
        }
    }
}

/// Incremental-contribution rows: the text-prompt baseline, then each
/// component added.
pub fn component_rows() -> Vec<AblationRow> {
    ["i2t", "i2t,i2i", "i2t,sfn", "i2t,i2i,sfn"]
        .iter()
        .map(|t| AblationRow::new(t.parse().expect("valid toggles"), FusionMode::CrossAttention))
        .collect()
}

/// The full model under every fusion mode.
pub fn fusion_rows() -> Vec<AblationRow> {
    FusionMode::ALL
        .iter()
        .map(|&m| AblationRow {
            name: format!("{} [{m}]", Toggles::FULL.label()),
            toggles: Toggles::FULL,
            fusion_mode: m,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub row: AblationRow,
    pub seeds: Vec<u64>,
    pub scores: Vec<Scores>,
    pub bleu4_mean: f64,
    pub bleu4_sd: f64,
    pub cider_mean: f64,
    pub cider_sd: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<RowResult>,
}

/// Mean and sample standard deviation.
fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains and tests every row under every seed. Each seed's backbone is
/// pretrained once and shared by all rows; test captions use beam search.
/// CIDEr in the table is reported in points (x100).
pub fn run_ablation(base: &TrainConfig, ws: &Workspace, rows: &[AblationRow], seeds: &[u64]) -> Result<AblationTable> {
    if rows.is_empty() {
        return Err(Error::Config("ablation grid is empty".into()));
    }
    if seeds.len() < MIN_SEEDS {
        return Err(Error::Config(format!("ablation needs at least {MIN_SEEDS} seeds, got {}", seeds.len())));
    }
    for row in rows {
        let mut c = base.clone();
        c.toggles = row.toggles;
        c.fusion_mode = row.fusion_mode;
        c.validate()?;
    }
    let train_ret = ws.retrieve(Split::Train, base.k, base.m)?;
    let val_ret = ws.retrieve(Split::Val, base.k, base.m)?;
    let test_ret = ws.retrieve(Split::Test, base.k, base.m)?;
    let mut backbones = BTreeMap::new();
    let mut results: Vec<RowResult> = Vec::new();
    for row in rows {
        let start = Instant::now();
        let mut scores = Vec::new();
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.toggles = row.toggles;
            cfg.fusion_mode = row.fusion_mode;
            if !backbones.contains_key(&seed) {
                let (d, _) = pretrain_backbone(ws, &cfg, &train_ret)?;
                backbones.insert(seed, d);
            }
            let train = ws.prepare(Split::Train, &train_ret, &cfg)?;
            let val = ws.prepare(Split::Val, &val_ret, &cfg)?;
            let test = ws.prepare(Split::Test, &test_ret, &cfg)?;
            let out = train_with(&cfg, ws, &train, &val, backbones[&seed].clone())?;
            let (s, _) = evaluate(&out.model, &test, Decoding::Beam(cfg.beam), cfg.max_gen_len, ws)?;
            log::info!("{} seed {seed}: test BLEU4 {:.2}, CIDEr {:.4}", row.name, s.bleu4, s.cider);
            scores.push(s);
        }
        let (bleu4_mean, bleu4_sd) = mean_sd(&scores.iter().map(|s| s.bleu4).collect::<Vec<_>>());
        let (cider_mean, cider_sd) = mean_sd(&scores.iter().map(|s| 100.0 * s.cider).collect::<Vec<_>>());
        results.push(RowResult {
            row: row.clone(),
            seeds: seeds.to_vec(),
            scores,
            bleu4_mean,
            bleu4_sd,
            cider_mean,
            cider_sd,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(AblationTable { rows: results })
}

fn mark(b: bool) -> &'static str {
    if b {
        "x"
    } else {
        "-"
    }
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&RowResult> {
        self.rows.iter().find(|r| r.row.name == name)
    }

    /// Aligned human-readable table.
    pub fn render(&self) -> String {
        let cells: Vec<[String; 7]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.row.name.clone(),
                    mark(r.row.toggles.use_i2t).into(),
                    mark(r.row.toggles.use_i2i).into(),
                    mark(r.row.toggles.use_sfn).into(),
                    r.row.fusion_mode.to_string(),
                    format!("{:.2} ± {:.2}", r.bleu4_mean, r.bleu4_sd),
                    format!("{:.2} ± {:.2}", r.cider_mean, r.cider_sd),
                ]
            })
            .collect();
        let header = ["Variant", "I2T", "I2I", "SFN", "Fusion", "BLEU@4", "CIDEr"];
        let mut width: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
        for c in &cells {
            for (w, s) in width.iter_mut().zip(c) {
                *w = (*w).max(s.chars().count());
            }
        }
        let line = |cols: &[String]| {
            let mut s = String::new();
            for (i, (c, w)) in cols.iter().zip(&width).enumerate() {
                let pad = w - c.chars().count();
                if i == 0 || i == 4 {
                    s.push_str(c);
                    s.push_str(&" ".repeat(pad));
                } else {
                    s.push_str(&" ".repeat(pad));
                    s.push_str(c);
                }
                if i + 1 < cols.len() {
                    s.push_str("  ");
                }
            }
            s.trim_end().to_string() + "\n"
        };
        let mut out = line(&header.map(String::from));
        out.push_str(&"-".repeat(width.iter().sum::<usize>() + 2 * (width.len() - 1)));
        out.push('\n');
        for c in &cells {
            out.push_str(&line(c));
        }
        out
    }

    /// Tab-separated lines with a header.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("variant\ti2t\ti2i\tsfn\tfusion\tseeds\tbleu4_mean\tbleu4_sd\tcider_mean\tcider_sd\n");
        for r in &self.rows {
            let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                r.row.name,
                r.row.toggles.use_i2t,
                r.row.toggles.use_i2i,
                r.row.toggles.use_sfn,
                r.row.fusion_mode,
                seeds.join(","),
                r.bleu4_mean,
                r.bleu4_sd,
                r.cider_mean,
                r.cider_sd
            );
        }
        out
    }
}
