//! Ablation grids. Every cell of a grid is trained with the same seeds, so
//! cells see identical data order and differ only in their switches.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use asanet_core::eval::{extract_features, pose_distance_ratio};
use asanet_core::model::{Branches, Fusion};
use asanet_core::synth::Dataset;
use clap::ValueEnum;
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::Result;
use crate::runner::{evaluate_split, fit_to_dataset, train, TrainOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Every non-empty subset of the three enhanced identity features.
    Branches,
    /// Fusion strategy × enhancement module × PMI loss.
    AsrePmi,
    /// Fusion b with the enhancement module, attribute loss off and on.
    Bce,
}

/// Switches of one grid row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub fusion: Fusion,
    pub use_asre: bool,
    pub use_pmi: bool,
    pub use_bce: bool,
    pub branches: Branches,
    pub fuse_attributes: bool,
}

impl Cell {
    /// The complete model: every branch, attribute fusion, ASRE, PMI and BCE.
    pub const FULL: Cell = Cell {
        fusion: Fusion::B,
        use_asre: true,
        use_pmi: true,
        use_bce: true,
        branches: Branches::ALL,
        fuse_attributes: true,
    };

    pub fn label(&self) -> String {
        let fusion = match self.fusion {
            Fusion::A => "a",
            Fusion::B => "b",
        };
        let on = |b: bool| if b { "on" } else { "off" };
        let b = self.branches;
        let branches: Vec<&str> = [(b.identity, "id"), (b.id_relevant, "re"), (b.id_irrelevant, "ir")]
            .iter()
            .filter(|x| x.0)
            .map(|x| x.1)
            .collect();
        format!(
            "fusion={fusion} asre={} pmi={} bce={} branches={} attr={}",
            on(self.use_asre),
            on(self.use_pmi),
            on(self.use_bce),
            branches.join("+"),
            on(self.fuse_attributes)
        )
    }

    pub fn apply(&self, cfg: &mut RunConfig) {
        cfg.model.fusion = self.fusion;
        cfg.model.use_asre = self.use_asre;
        cfg.model.branches = self.branches;
        cfg.model.fuse_attributes = self.fuse_attributes;
        cfg.loss.use_pmi = self.use_pmi;
        cfg.loss.use_bce = self.use_bce;
    }
}

/// Rows of a preset, in the order of the corresponding results table.
pub fn grid(preset: Preset) -> Vec<Cell> {
    match preset {
        Preset::Branches => {
            let subsets = [
                (true, false, false),
                (false, true, false),
                (false, false, true),
                (true, true, false),
                (true, false, true),
                (false, true, true),
                (true, true, true),
            ];
            subsets
                .iter()
                .map(|&(identity, id_relevant, id_irrelevant)| Cell {
                    branches: Branches {
                        identity,
                        id_relevant,
                        id_irrelevant,
                    },
                    fuse_attributes: false,
                    ..Cell::FULL
                })
                .collect()
        }
        Preset::AsrePmi => {
            let mut v = Vec::new();
            for fusion in [Fusion::A, Fusion::B] {
                for use_asre in [false, true] {
                    for use_pmi in [false, true] {
                        v.push(Cell {
                            fusion,
                            use_asre,
                            use_pmi,
                            ..Cell::FULL
                        });
                    }
                }
            }
            v
        }
        Preset::Bce => [false, true]
            .iter()
            .map(|&use_bce| Cell {
                use_pmi: false,
                use_bce,
                ..Cell::FULL
            })
            .collect(),
    }
}

/// One trained cell under one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Run {
    pub row: usize,
    pub seed: u64,
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank20: f64,
    /// Same-pose over cross-pose distance among same-identity descriptors.
    pub pose_ratio: Option<f64>,
}

/// Seed-averaged row of a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub row: usize,
    pub cell: Cell,
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank20: f64,
    pub pose_ratio: Option<f64>,
}

/// Thread cap from `ASARE_THREADS`, defaulting to the available cores.
pub fn thread_cap() -> usize {
    std::env::var("ASARE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Train and evaluate one cell with one seed.
pub fn run_cell(base: &RunConfig, ds: &Dataset, row: usize, cell: &Cell, seed: u64) -> Result<Run> {
    let mut cfg = base.clone();
    cell.apply(&mut cfg);
    cfg.seed = seed;
    fit_to_dataset(&mut cfg, ds);
    let (mut trainer, _) = train(&cfg, ds, &TrainOptions::default())?;
    let (r, _, _) = evaluate_split(&mut trainer, ds, &cfg.eval)?;
    let labelled: Vec<usize> = (0..ds.tracklets.len())
        .filter(|&t| ds.tracklets[t].identity.is_some_and(|i| i < ds.config.num_identities))
        .collect();
    let f = extract_features(&mut trainer.model, ds, &labelled, &cfg.eval)?;
    let ids: Vec<usize> = f.ids.iter().map(|i| i.expect("labelled tracklet")).collect();
    let poses: Vec<_> = labelled.iter().map(|&t| ds.tracklets[t].pose).collect();
    let run = Run {
        row,
        seed,
        map: r.map,
        rank1: r.rank(1),
        rank5: r.rank(5),
        rank20: r.rank(20),
        pose_ratio: pose_distance_ratio(&f.features, &ids, &poses),
    };
    info!("{} seed {seed}: mAP {:.4} rank-1 {:.4}", cell.label(), run.map, run.rank1);
    Ok(run)
}

/// Train every cell of `preset` under every seed, at most `threads` at a time.
/// Runs come back sorted by (row, seed) whatever the scheduling.
pub fn run_grid(preset: Preset, base: &RunConfig, ds: &Dataset, seeds: &[u64], threads: usize) -> Result<(Vec<Row>, Vec<Run>)> {
    let cells = grid(preset);
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|r| seeds.iter().map(move |&s| (r, s))).collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Result<Run>>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(row, seed)) = jobs.get(i) else { break };
                let r = run_cell(base, ds, row, &cells[row], seed);
                results.lock().expect("no panics while holding the lock").push(r);
            });
        }
    });
    let mut runs = results
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .collect::<Result<Vec<Run>>>()?;
    runs.sort_by_key(|r| (r.row, r.seed));
    let rows = cells
        .iter()
        .enumerate()
        .map(|(row, cell)| {
            let mine: Vec<&Run> = runs.iter().filter(|r| r.row == row).collect();
            let n = mine.len().max(1) as f64;
            let mean = |f: fn(&Run) -> f64| mine.iter().map(|r| f(r)).sum::<f64>() / n;
            let ratios: Vec<f64> = mine.iter().filter_map(|r| r.pose_ratio).collect();
            Row {
                row,
                cell: *cell,
                map: mean(|r| r.map),
                rank1: mean(|r| r.rank1),
                rank5: mean(|r| r.rank5),
                rank20: mean(|r| r.rank20),
                pose_ratio: (ratios.len() == mine.len() && !ratios.is_empty())
                    .then(|| ratios.iter().sum::<f64>() / ratios.len() as f64),
            }
        })
        .collect();
    Ok((rows, runs))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// `ablation.csv` (one row per table row, seed means) and `ablation_runs.csv`.
pub fn write_csv(rows: &[Row], runs: &[Run], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| crate::Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut w = csv::Writer::from_path(dir.join("ablation.csv"))?;
    w.write_record(["row", "config", "map", "rank1", "rank5", "rank20", "pose_ratio"])?;
    for r in rows {
        w.write_record([
            r.row.to_string(),
            r.cell.label(),
            r.map.to_string(),
            r.rank1.to_string(),
            r.rank5.to_string(),
            r.rank20.to_string(),
            opt(r.pose_ratio),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    let mut w = csv::Writer::from_path(dir.join("ablation_runs.csv"))?;
    w.write_record(["row", "seed", "map", "rank1", "rank5", "rank20", "pose_ratio"])?;
    for r in runs {
        w.write_record([
            r.row.to_string(),
            r.seed.to_string(),
            r.map.to_string(),
            r.rank1.to_string(),
            r.rank5.to_string(),
            r.rank20.to_string(),
            opt(r.pose_ratio),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
