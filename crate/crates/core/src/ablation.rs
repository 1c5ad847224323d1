//! Ablation sweeps with a fixed row layout per table: component
//! toggle columns, an optional trainable-parameter column, and one accuracy
//! column per source modality (`-` where a row has no entry for that modality).

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterVariant, EnsembleMode, Guidance};
use crate::backbone::AdapterPosition;
use crate::dataset::{BenchmarkSpec, Dataset};
use crate::error::{Error, Result};
use crate::model::{build_backbone, PeMode, TrainConfig};
use crate::projection::ProjectionMode;
use crate::train::{param_report_for, train};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableKind {
    /// Virtual projection and guided adapter on/off.
    Main,
    /// Positional encoding source.
    Vp,
    /// Adapter internals.
    Adapter,
    /// Adapter position and insertion depth.
    Depth,
    /// Projection type and view count.
    View,
    /// Patch, line and voxel sizes.
    Size,
    /// Guidance source of the local aggregation.
    Agg,
}

impl TableKind {
    pub const ALL: [TableKind; 7] = [
        TableKind::Main,
        TableKind::Vp,
        TableKind::Adapter,
        TableKind::Depth,
        TableKind::View,
        TableKind::Size,
        TableKind::Agg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TableKind::Main => "main",
            TableKind::Vp => "vp",
            TableKind::Adapter => "adapter",
            TableKind::Depth => "depth",
            TableKind::View => "view",
            TableKind::Size => "size",
            TableKind::Agg => "agg",
        }
    }
}

impl fmt::Display for TableKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TableKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TableKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown ablation table `{s}`")))
    }
}

/// One modality entry of a row.
#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    /// The row has no entry for this modality.
    NotApplicable,
    /// The setting is listed but not implemented.
    Unsupported(&'static str),
    Run(Box<TrainConfig>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub toggles: Vec<String>,
    /// 1D then 2D.
    pub cells: [Cell; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub kind: TableKind,
    pub columns: Vec<&'static str>,
    pub show_params: bool,
    pub rows: Vec<AblationRow>,
}

const MODALITY_COLUMNS: [&str; 2] = ["acc_1d", "acc_2d"];

fn mark(on: bool) -> String {
    if on { "x" } else { "-" }.into()
}

fn run(cfg: TrainConfig) -> Cell {
    Cell::Run(Box::new(cfg))
}

/// Expands `kind` into concrete configurations derived from `base`. The 1D
/// column uses the language geometry and the 2D column the vision geometry.
pub fn build_table(kind: TableKind, base: &TrainConfig) -> AblationTable {
    let one = base.with_mode(ProjectionMode::Line1d);
    let two = base.with_mode(ProjectionMode::Plane2d);
    let both = |f: &dyn Fn(&mut TrainConfig)| -> [Cell; 2] {
        let (mut a, mut b) = (one.clone(), two.clone());
        f(&mut a);
        f(&mut b);
        [run(a), run(b)]
    };
    let only = |mode: ProjectionMode, f: &dyn Fn(&mut TrainConfig)| -> [Cell; 2] {
        match mode {
            ProjectionMode::Line1d => {
                let mut a = one.clone();
                f(&mut a);
                [run(a), Cell::NotApplicable]
            }
            ProjectionMode::Plane2d => {
                let mut b = two.clone();
                f(&mut b);
                [Cell::NotApplicable, run(b)]
            }
        }
    };
    let n = base.backbone.n_blocks;
    let mut rows = Vec::new();
    let (columns, show_params): (Vec<&'static str>, bool) = match kind {
        TableKind::Main => {
            for (vp, ga) in [(false, false), (true, false), (false, true), (true, true)] {
                rows.push(AblationRow {
                    toggles: vec![mark(vp), mark(ga)],
                    cells: both(&|c| {
                        c.pe_mode = if vp { PeMode::VirtualProjection } else { PeMode::None };
                        c.insertion_depth = if ga { n } else { 0 };
                    }),
                });
            }
            (vec!["virtual_projection", "guided_adapter"], true)
        }
        TableKind::Vp => {
            for pe in [PeMode::None, PeMode::Sinusoidal3d, PeMode::Learnable3d, PeMode::VirtualProjection] {
                rows.push(AblationRow {
                    toggles: vec![
                        mark(pe == PeMode::Sinusoidal3d),
                        mark(pe == PeMode::Learnable3d),
                        mark(pe == PeMode::VirtualProjection),
                    ],
                    cells: both(&|c| c.pe_mode = pe),
                });
            }
            (vec!["sinusoidal", "learnable", "virtual_projection"], false)
        }
        TableKind::Adapter => {
            let settings = [
                (false, false, AdapterVariant::MlpBaseline, EnsembleMode::Adaptive),
                (true, false, AdapterVariant::Full, EnsembleMode::Mean),
                (true, true, AdapterVariant::Full, EnsembleMode::Adaptive),
            ];
            for (la, ens, variant, ensemble) in settings {
                rows.push(AblationRow {
                    toggles: vec![mark(la), mark(ens)],
                    cells: both(&|c| {
                        c.adapter.variant = variant;
                        c.adapter.ensemble = ensemble;
                    }),
                });
            }
            (vec!["guided_local_aggregation", "adaptive_ensemble"], true)
        }
        TableKind::Depth => {
            let depths: Vec<usize> = (1..=4).map(|q| (n * q).div_ceil(4)).collect();
            for pos in [AdapterPosition::After, AdapterPosition::Before, AdapterPosition::Parallel] {
                for &d in &depths {
                    rows.push(AblationRow {
                        toggles: vec![
                            mark(pos == AdapterPosition::After),
                            mark(pos == AdapterPosition::Before),
                            mark(pos == AdapterPosition::Parallel),
                            d.to_string(),
                        ],
                        cells: both(&|c| {
                            c.adapter_position = pos;
                            c.insertion_depth = d;
                        }),
                    });
                }
            }
            (vec!["after", "before", "parallel", "insertion_depth"], false)
        }
        TableKind::View => {
            for m in [4, 6, 8] {
                rows.push(AblationRow {
                    toggles: vec![mark(true), mark(false), mark(false), m.to_string()],
                    cells: only(ProjectionMode::Plane2d, &|c| c.m_views = m),
                });
            }
            for m in [4, 6, 8] {
                rows.push(AblationRow {
                    toggles: vec![mark(false), mark(true), mark(false), m.to_string()],
                    cells: [Cell::NotApplicable, Cell::Unsupported("realistic projection is not implemented")],
                });
            }
            for m in [4, 6, 8] {
                rows.push(AblationRow {
                    toggles: vec![mark(false), mark(false), mark(true), m.to_string()],
                    cells: only(ProjectionMode::Line1d, &|c| c.m_views = m),
                });
            }
            (vec!["proj_2d_v1", "proj_2d_v2", "proj_1d", "views"], false)
        }
        TableKind::Size => {
            for grid in [0.08, 0.16] {
                for patch in [16, 26, 34] {
                    rows.push(AblationRow {
                        toggles: vec![patch.to_string(), "-".into(), grid.to_string()],
                        cells: only(ProjectionMode::Plane2d, &|c| {
                            c.projection.patch_size = patch;
                            c.adapter.grid_size_3d = grid;
                        }),
                    });
                }
            }
            for grid in [0.08, 0.16] {
                for line in [1, 2, 3] {
                    rows.push(AblationRow {
                        toggles: vec!["-".into(), line.to_string(), grid.to_string()],
                        cells: only(ProjectionMode::Line1d, &|c| {
                            c.projection.segment_size = line;
                            c.adapter.grid_size_3d = grid;
                        }),
                    });
                }
            }
            (vec!["patch_size", "line_size", "grid_size"], false)
        }
        TableKind::Agg => {
            for (mode, guided) in [
                (ProjectionMode::Plane2d, Guidance::Voxel3d),
                (ProjectionMode::Plane2d, Guidance::Projected),
                (ProjectionMode::Line1d, Guidance::Voxel3d),
                (ProjectionMode::Line1d, Guidance::Projected),
            ] {
                let projected = guided == Guidance::Projected;
                rows.push(AblationRow {
                    toggles: vec![
                        mark(!projected),
                        mark(projected && mode == ProjectionMode::Plane2d),
                        mark(projected && mode == ProjectionMode::Line1d),
                    ],
                    cells: only(mode, &|c| c.adapter.guidance = guided),
                });
            }
            (vec!["guided_3d", "guided_2d", "guided_1d"], false)
        }
    };
    AblationTable {
        kind,
        columns,
        show_params,
        rows,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Outcome {
    NotApplicable,
    Unsupported(String),
    /// Mean test accuracy over the seeds.
    Accuracy(f64),
    Error(String),
}

impl Outcome {
    fn render(&self) -> String {
        match self {
            Outcome::NotApplicable => "-".into(),
            Outcome::Unsupported(why) => format!("unsupported: {why}"),
            Outcome::Accuracy(a) => format!("{a:.4}"),
            Outcome::Error(e) => format!("error: {e}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub toggles: Vec<String>,
    /// Trainable parameters in millions, from the first runnable cell.
    pub params_m: Option<f64>,
    pub outcomes: Vec<Outcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub kind: TableKind,
    pub columns: Vec<String>,
    pub show_params: bool,
    pub rows: Vec<ResultRow>,
}

impl AblationResult {
    pub fn header(&self) -> Vec<String> {
        let mut h = self.columns.clone();
        if self.show_params {
            h.push("params_m".into());
        }
        h.extend(MODALITY_COLUMNS.iter().map(|s| s.to_string()));
        h
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.header())?;
        for r in &self.rows {
            let mut rec = r.toggles.clone();
            if self.show_params {
                rec.push(r.params_m.map_or("-".into(), |p| format!("{p:.6}")));
            }
            rec.extend(r.outcomes.iter().map(Outcome::render));
            w.write_record(rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Numeric(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Trains one configuration per seed and averages the final accuracy.
fn run_cell(cfg: &TrainConfig, seeds: &[u64], data: &[(u64, Dataset<f32>)]) -> Result<f64> {
    let mut total = 0.0;
    for (&seed, (_, ds)) in seeds.iter().zip(data) {
        let cfg = TrainConfig {
            seed,
            backbone_seed: seed,
            eval_every: cfg.epochs,
            ..cfg.clone()
        };
        let backbone = Arc::new(build_backbone::<f32>(&cfg)?);
        let out = train(&ds.train, &ds.test, backbone, &cfg)?;
        total += out
            .metrics
            .final_accuracy()
            .ok_or_else(|| Error::InvalidConfig("the benchmark has no test split".into()))?;
    }
    Ok(total / seeds.len() as f64)
}

/// Trains every cell on the benchmark regenerated with each seed. A failing
/// cell is recorded as an error and the sweep continues.
pub fn run_ablation(
    table: &AblationTable,
    bench: &BenchmarkSpec,
    seeds: &[u64],
    progress: &mut dyn FnMut(usize, &ResultRow),
) -> Result<AblationResult> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("an ablation needs at least one seed".into()));
    }
    let data = seeds
        .iter()
        .map(|&s| Ok((s, BenchmarkSpec { seed: s, ..bench.clone() }.generate::<f32>()?)))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(table.rows.len());
    for (i, row) in table.rows.iter().enumerate() {
        let params_m = row.cells.iter().find_map(|c| match c {
            Cell::Run(cfg) => Some(param_report_for(cfg).trainable as f64 / 1e6),
            _ => None,
        });
        let outcomes = row
            .cells
            .iter()
            .map(|c| match c {
                Cell::NotApplicable => Outcome::NotApplicable,
                Cell::Unsupported(why) => Outcome::Unsupported((*why).into()),
                Cell::Run(cfg) => match run_cell(cfg, seeds, &data) {
                    Ok(a) => Outcome::Accuracy(a),
                    Err(e) => Outcome::Error(e.to_string()),
                },
            })
            .collect();
        let r = ResultRow {
            toggles: row.toggles.clone(),
            params_m,
            outcomes,
        };
        progress(i, &r);
        rows.push(r);
    }
    Ok(AblationResult {
        kind: table.kind,
        columns: table.columns.iter().map(|s| s.to_string()).collect(),
        show_params: table.show_params,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_shapes_match_the_expected_layouts() {
        let base = TrainConfig::desk();
        let shape = |k| {
            let t = build_table(k, &base);
            (t.rows.len(), t.columns.len(), t.show_params)
        };
        assert_eq!(shape(TableKind::Main), (4, 2, true));
        assert_eq!(shape(TableKind::Vp), (4, 3, false));
        assert_eq!(shape(TableKind::Adapter), (3, 2, true));
        assert_eq!(shape(TableKind::Depth), (12, 4, false));
        assert_eq!(shape(TableKind::View), (9, 4, false));
        assert_eq!(shape(TableKind::Size), (12, 3, false));
        assert_eq!(shape(TableKind::Agg), (4, 3, false));
    }

    #[test]
    fn every_runnable_cell_is_valid() {
        let base = TrainConfig::desk();
        for k in TableKind::ALL {
            for row in build_table(k, &base).rows {
                for c in row.cells {
                    if let Cell::Run(cfg) = c {
                        cfg.validate().unwrap();
                    }
                }
            }
        }
    }

    #[test]
    fn depth_rows_scale_with_block_count() {
        let t = build_table(TableKind::Depth, &TrainConfig::reference());
        let depths: Vec<&str> = t.rows[..4].iter().map(|r| r.toggles[3].as_str()).collect();
        assert_eq!(depths, ["3", "6", "9", "12"]);
        let t = build_table(TableKind::Depth, &TrainConfig::desk());
        let depths: Vec<&str> = t.rows[..4].iter().map(|r| r.toggles[3].as_str()).collect();
        assert_eq!(depths, ["1", "2", "3", "4"]);
    }

    #[test]
    fn table_names_round_trip() {
        for k in TableKind::ALL {
            assert_eq!(k.name().parse::<TableKind>().unwrap(), k);
        }
        assert!("bogus".parse::<TableKind>().is_err());
    }
}
