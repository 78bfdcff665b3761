use std::fmt;

use log::info;
use serde::{Deserialize, Serialize};

use super::bench::{evaluate, EvalOptions, Task};
use super::config::{Method, TrainConfig};
use super::train::train;
use crate::augment::AugmentConfig;
use crate::error::{config_err, Result};
use crate::par;
use crate::synthdata::Dataset;

/// Rungs of the cumulative augmentation ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rung {
    /// Contrastive baseline with generic jitter only.
    Baseline,
    Swap,
    Calcium,
    Mix,
}

impl Rung {
    pub const LADDER: [Rung; 4] = [Rung::Baseline, Rung::Swap, Rung::Calcium, Rung::Mix];

    pub fn name(self) -> &'static str {
        match self {
            Rung::Baseline => "simclr_no_swap",
            Rung::Swap => "+swap",
            Rung::Calcium => "+calcium",
            Rung::Mix => "+mix",
        }
    }

    /// Augmentations of this rung: every earlier rung's families stay on.
    pub fn augment(self) -> AugmentConfig {
        let full = AugmentConfig::default();
        let mut a = AugmentConfig::jitter_only();
        if self == Rung::Baseline {
            return a;
        }
        a.swap_behavior = full.swap_behavior;
        a.swap_neural = full.swap_neural;
        a.neighbors = full.neighbors;
        if matches!(self, Rung::Calcium | Rung::Mix) {
            a.calcium = full.calcium;
            a.calcium_kernel = full.calcium_kernel;
        }
        if self == Rung::Mix {
            a.mix = full.mix;
            a.mix_alpha = full.mix_alpha;
        }
        a
    }

    pub fn config(self, base: &TrainConfig, seed: u64) -> TrainConfig {
        let mut c = base.clone();
        c.method = if self == Rung::Baseline { Method::SimclrNoSwap } else { Method::Ours };
        c.augment = Some(self.augment());
        c.seed = seed;
        c
    }
}

impl fmt::Display for Rung {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Mean accuracies (fractions) of one trained rung.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub method: String,
    pub single: f64,
    pub across: f64,
    pub identity: f64,
    pub seed: u64,
}

/// Change of the seed-averaged metrics from the previous rung, in points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RungDelta {
    pub rung: String,
    pub single: f64,
    pub across: f64,
    pub identity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub deltas: Vec<RungDelta>,
}

impl AblationTable {
    fn from_rows(rows: Vec<AblationRow>) -> Self {
        let means: Vec<(f64, f64, f64)> = Rung::LADDER
            .iter()
            .map(|r| {
                let mine: Vec<&AblationRow> = rows.iter().filter(|x| x.method == r.name()).collect();
                let k = mine.len().max(1) as f64;
                (
                    mine.iter().map(|x| x.single).sum::<f64>() / k,
                    mine.iter().map(|x| x.across).sum::<f64>() / k,
                    mine.iter().map(|x| x.identity).sum::<f64>() / k,
                )
            })
            .collect();
        let deltas = (1..means.len())
            .map(|i| RungDelta {
                rung: Rung::LADDER[i].name().to_string(),
                single: 100.0 * (means[i].0 - means[i - 1].0),
                across: 100.0 * (means[i].1 - means[i - 1].1),
                identity: 100.0 * (means[i].2 - means[i - 1].2),
            })
            .collect();
        Self { rows, deltas }
    }

    pub fn delta(&self, rung: Rung) -> Option<&RungDelta> {
        self.deltas.iter().find(|d| d.rung == rung.name())
    }

    /// Per-run rows as CSV with header `method,single,across,identity,seed`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut c = csv::Writer::from_writer(w);
        for r in &self.rows {
            c.serialize(r)?;
        }
        c.flush()?;
        Ok(())
    }

    pub fn write_deltas_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut c = csv::Writer::from_writer(w);
        for d in &self.deltas {
            c.serialize(d)?;
        }
        c.flush()?;
        Ok(())
    }
}

/// Trains every rung of the ladder for every seed and probes the encoders.
pub fn run_ablation(ds: &Dataset, base: &TrainConfig, seeds: &[u64], opts: &EvalOptions) -> Result<AblationTable> {
    if seeds.len() < 3 {
        return Err(config_err(format!("ablation needs at least 3 seeds, got {}", seeds.len())));
    }
    let runs: Vec<(Rung, u64)> = Rung::LADDER.iter().flat_map(|&r| seeds.iter().map(move |&s| (r, s))).collect();
    let rows = par::try_map_range(runs.len(), |i| {
        let (rung, seed) = runs[i];
        let model = train(ds, &rung.config(base, seed))?;
        let reports = evaluate(&model, ds, &Task::ALL, opts)?;
        let get = |t: Task| reports.iter().find(|r| r.task == t).map_or(f64::NAN, |r| r.mean);
        let row = AblationRow {
            method: rung.name().to_string(),
            single: get(Task::Single),
            across: get(Task::Across),
            identity: get(Task::Identity),
            seed,
        };
        info!("ablation {rung} seed {seed}: single {:.3} across {:.3} identity {:.3}", row.single, row.across, row.identity);
        Ok::<_, crate::Error>(row)
    })?;
    Ok(AblationTable::from_rows(rows))
}
