//! Routing, placement, balance-weight and expert-count sweeps with shared seeds.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::envgraph::{Episode, Granularity, NavGraph};
use crate::metrics::{MetricConfig, MetricsReport};
use crate::moe::Placement;
use crate::policy::PolicyConfig;
use crate::trainer::{evaluate, train, EvalReport, TrainConfig, TrainError};

#[derive(Debug, thiserror::Error)]
pub enum AblationError {
    #[error("unknown ablation axis '{0}' (expected routing, placement, lambda or nk)")]
    UnknownAxis(String),
    #[error("bad grid value '{value}' for axis {axis}")]
    BadGridValue { axis: &'static str, value: String },
    #[error("empty grid")]
    EmptyGrid,
    #[error("cell '{label}': {source}")]
    Cell {
        label: String,
        #[source]
        source: TrainError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Routing,
    Placement,
    Lambda,
    Nk,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Routing => "routing",
            Axis::Placement => "placement",
            Axis::Lambda => "lambda",
            Axis::Nk => "nk",
        }
    }

    /// Grid values swept when none are given.
    pub fn default_grid(self) -> Vec<String> {
        let v: Vec<&str> = match self {
            Axis::Routing => vec!["token", "task", "text", "text_task", "multimodal", "multimodal_task", "none"],
            Axis::Placement => vec!["ffn", "visual_query", "textual_kv"],
            Axis::Lambda => vec!["0.2", "0.5", "0.8", "1.0"],
            Axis::Nk => vec!["1:1", "2:1", "3:1", "3:2", "4:2"],
        };
        v.into_iter().map(String::from).collect()
    }
}

impl FromStr for Axis {
    type Err = AblationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "routing" => Ok(Axis::Routing),
            "placement" => Ok(Axis::Placement),
            "lambda" => Ok(Axis::Lambda),
            "nk" => Ok(Axis::Nk),
            _ => Err(AblationError::UnknownAxis(s.to_string())),
        }
    }
}

/// One grid point: a label and the configs it trains with.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub label: String,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
}

/// Expands `values` along `axis` on top of the base configs. Seeds are left untouched.
pub fn build_grid(
    axis: Axis,
    values: &[String],
    base_policy: &PolicyConfig,
    base_train: &TrainConfig,
) -> Result<Vec<Cell>, AblationError> {
    if values.is_empty() {
        return Err(AblationError::EmptyGrid);
    }
    let bad = |v: &str| AblationError::BadGridValue {
        axis: axis.name(),
        value: v.to_string(),
    };
    values
        .iter()
        .map(|v| {
            let mut policy = base_policy.clone();
            let mut train = base_train.clone();
            match axis {
                Axis::Routing if v == "none" => policy.moe_placement = Placement::None,
                Axis::Routing => policy.routing_kind = v.parse().map_err(|_| bad(v))?,
                Axis::Placement => policy.moe_placement = v.parse().map_err(|_| bad(v))?,
                Axis::Lambda => {
                    train.lambda = v.parse().map_err(|_| bad(v))?;
                    if !(train.lambda >= 0.0) {
                        return Err(bad(v));
                    }
                }
                Axis::Nk => {
                    let (n, k) = v.split_once(':').ok_or_else(|| bad(v))?;
                    policy.experts = n.trim().parse().map_err(|_| bad(v))?;
                    policy.top_k = k.trim().parse().map_err(|_| bad(v))?;
                }
            }
            policy.validate().map_err(|_| bad(v))?;
            Ok(Cell {
                label: v.clone(),
                policy,
                train,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub label: String,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
    pub final_loss: f64,
    pub aggregate: MetricsReport,
    pub by_granularity: BTreeMap<Granularity, MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: Axis,
    pub seed: u64,
    pub cells: Vec<CellResult>,
}

/// Trains and evaluates every cell on the same worlds, episodes and seed.
pub fn run_grid(
    axis: Axis,
    cells: &[Cell],
    train_worlds: &[NavGraph],
    eval_worlds: &[NavGraph],
    eval_episodes: &[(usize, Episode)],
    mut progress: impl FnMut(&CellResult),
) -> Result<AblationTable, AblationError> {
    let seed = cells.first().map_or(0, |c| c.train.seed);
    let mut out = Vec::with_capacity(cells.len());
    for cell in cells {
        let wrap = |source| AblationError::Cell {
            label: cell.label.clone(),
            source,
        };
        let trained = train(&cell.train, &cell.policy, train_worlds, None, &mut std::io::sink()).map_err(wrap)?;
        let EvalReport {
            aggregate,
            by_granularity,
            ..
        } = evaluate(&trained.policy, eval_worlds, eval_episodes, &MetricConfig::default()).map_err(wrap)?;
        let tail = trained.updates.len().min(10);
        let final_loss = if tail == 0 {
            f64::NAN
        } else {
            trained.updates[trained.updates.len() - tail..].iter().map(|u| u.loss_total).sum::<f64>() / tail as f64
        };
        let r = CellResult {
            label: cell.label.clone(),
            policy: cell.policy.clone(),
            train: cell.train.clone(),
            final_loss,
            aggregate,
            by_granularity,
        };
        progress(&r);
        out.push(r);
    }
    Ok(AblationTable { axis, seed, cells: out })
}

/// Aligned plain-text rendering with one row per cell.
pub fn render_table(t: &AblationTable) -> String {
    let mut header = vec![t.axis.name().to_string()];
    header.extend(["SR", "SPL", "nDTW", "NE", "GP", "TL"].map(String::from));
    header.extend(Granularity::ALL.map(|g| format!("SR:{}", gran_name(g))));
    header.push("loss".into());
    let mut rows = vec![header];
    for c in &t.cells {
        let a = &c.aggregate;
        let mut row = vec![
            c.label.clone(),
            pct(a.sr),
            pct(a.spl),
            pct(a.ndtw),
            format!("{:.2}", a.ne_m),
            format!("{:.2}", a.gp_m),
            format!("{:.2}", a.tl_m),
        ];
        row.extend(Granularity::ALL.map(|g| c.by_granularity.get(&g).map_or("-".into(), |r| pct(r.sr))));
        row.push(format!("{:.4}", c.final_loss));
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|i| rows.iter().map(|r| r[i].len()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for (ri, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, v)| if i == 0 { format!("{v:<w$}", w = widths[i]) } else { format!("{v:>w$}", w = widths[i]) })
            .collect();
        let _ = writeln!(s, "{}", cells.join("  ").trim_end());
        if ri == 0 {
            let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            let _ = writeln!(s, "{}", "-".repeat(total));
        }
    }
    s
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

fn gran_name(g: Granularity) -> &'static str {
    match g {
        Granularity::Fine => "fine",
        Granularity::Coarse => "coarse",
        Granularity::Zero => "zero",
    }
}
