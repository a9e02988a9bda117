//! Ablation grid driver over head count, auxiliary loss and AGDA mode.

use serde::{Deserialize, Serialize};

use crate::agda::AgdaMode;
use crate::config::{AuxLoss, TrainConfig};
use crate::data::Dataset;
use crate::error::Result;
use crate::metrics::{median_overlap, EvalReport};
use crate::train::Trainer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub num_attentions: usize,
    pub aux_loss: AuxLoss,
    pub agda: AgdaMode,
}

impl GridCell {
    pub fn new(num_attentions: usize, aux_loss: AuxLoss, agda: AgdaMode) -> Self {
        GridCell {
            num_attentions,
            aux_loss,
            agda,
        }
    }

    pub fn apply(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.num_attentions = self.num_attentions;
        cfg.aux_loss = self.aux_loss;
        cfg.agda.mode = self.agda;
        cfg.seed = seed;
        cfg
    }
}

/// The seven loss/AGDA rows, in table order, at the base head count.
pub fn loss_agda_cells(num_attentions: usize) -> Vec<GridCell> {
    use AgdaMode::*;
    use AuxLoss::*;
    [
        (None, Off),
        (Ams, Off),
        (Ril, Off),
        (Ams, Hard),
        (Ril, Hard),
        (Ams, Soft),
        (Ril, Soft),
    ]
    .into_iter()
    .map(|(l, a)| GridCell::new(num_attentions, l, a))
    .collect()
}

/// `M = 1..=5`; the single-head model runs without RIL and AGDA.
pub fn attention_count_cells() -> Vec<GridCell> {
    (1..=5)
        .map(|m| {
            if m == 1 {
                GridCell::new(1, AuxLoss::None, AgdaMode::Off)
            } else {
                GridCell::new(m, AuxLoss::Ril, AgdaMode::Soft)
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub num_attentions: usize,
    pub loss: AuxLoss,
    pub agda: AgdaMode,
    pub seed: u64,
    pub report: Option<EvalReport>,
    /// Median over test samples of the mean pairwise head cosine; absent
    /// for single-head cells.
    pub overlap_cosine: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<CellResult>,
}

impl AblationTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serialises")
    }

    pub fn cell<'a>(&'a self, loss: AuxLoss, agda: AgdaMode) -> impl Iterator<Item = &'a CellResult> + 'a {
        self.rows.iter().filter(move |r| r.loss == loss && r.agda == agda)
    }
}

/// Trains on `train` from scratch and evaluates on `test`.
pub fn train_and_evaluate(cfg: TrainConfig, train: &Dataset, test: &Dataset) -> Result<(EvalReport, Option<f64>)> {
    let mut t = Trainer::new(cfg)?;
    t.fit(train, None, |_, _| Ok(()))?;
    let (report, _) = t.evaluate(test)?;
    let overlap = if t.cfg.num_attentions > 1 {
        Some(median_overlap(&mut t.model, test, t.cfg.batch_size)?)
    } else {
        None
    };
    Ok((report, overlap))
}

/// Trains every cell under every seed. A failing cell is recorded with
/// its error and the grid moves on.
pub fn run_ablation_grid(
    base: &TrainConfig,
    cells: &[GridCell],
    seeds: &[u64],
    train: &Dataset,
    test: &Dataset,
    mut progress: impl FnMut(&CellResult),
) -> AblationTable {
    let mut rows = Vec::with_capacity(cells.len() * seeds.len());
    for cell in cells {
        for &seed in seeds {
            let outcome = train_and_evaluate(cell.apply(base, seed), train, test);
            let (report, overlap_cosine, error) = match outcome {
                Ok((r, o)) => (Some(r), o, None),
                Err(e) => (None, None, Some(e.to_string())),
            };
            let row = CellResult {
                num_attentions: cell.num_attentions,
                loss: cell.aux_loss,
                agda: cell.agda,
                seed,
                report,
                overlap_cosine,
                error,
            };
            progress(&row);
            rows.push(row);
        }
    }
    AblationTable { rows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, SynthConfig};

    fn tiny_sets() -> (Dataset, Dataset) {
        let ds = synthesize(&SynthConfig {
            size: 32,
            cue_size: 4,
            videos: 12,
            frames_per_video: 1,
            ..Default::default()
        })
        .unwrap();
        (ds.subset(&(0..8).collect::<Vec<_>>()), ds.subset(&(8..12).collect::<Vec<_>>()))
    }

    #[test]
    fn table_layouts() {
        let rows = loss_agda_cells(4);
        assert_eq!(rows.len(), 7);
        assert_eq!((rows[0].aux_loss, rows[0].agda), (AuxLoss::None, AgdaMode::Off));
        assert_eq!((rows[6].aux_loss, rows[6].agda), (AuxLoss::Ril, AgdaMode::Soft));
        let ms: Vec<usize> = attention_count_cells().iter().map(|c| c.num_attentions).collect();
        assert_eq!(ms, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn single_cell_grid_equals_a_direct_run() {
        let (train, test) = tiny_sets();
        let base = TrainConfig::toy();
        let cell = GridCell::new(2, AuxLoss::Ril, AgdaMode::Soft);
        let table = run_ablation_grid(&base, &[cell.clone()], &[5], &train, &test, |_| {});
        let (report, overlap) = train_and_evaluate(cell.apply(&base, 5), &train, &test).unwrap();
        assert_eq!(table.rows[0].report.as_ref(), Some(&report));
        assert_eq!(table.rows[0].overlap_cosine, overlap);
    }

    #[test]
    fn failing_cells_are_recorded() {
        let (train, test) = tiny_sets();
        let mut base = TrainConfig::toy();
        base.patch_size = 3;
        let cells = [GridCell::new(2, AuxLoss::None, AgdaMode::Off)];
        let table = run_ablation_grid(&base, &cells, &[0, 1], &train, &test, |_| {});
        assert_eq!(table.rows.len(), 2);
        assert!(table.rows.iter().all(|r| r.error.is_some() && r.report.is_none()));
    }
}
