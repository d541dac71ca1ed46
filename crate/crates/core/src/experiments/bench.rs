//! Rank x buckets sweeps over lookup functions on a shared base config.

use std::io::Write;

use rayon::prelude::*;

use crate::error::Result;
use crate::experiments::config::{BenchEntry, ExperimentConfig};
use crate::experiments::fmt_float;
use crate::experiments::model::LanguageModel;
use crate::experiments::train::train_model;
use crate::memory_lookup::{partial_expert_param_count, LookupKind};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    /// `None` for the memory-free reference row.
    pub entry: Option<BenchEntry>,
    /// `max(2 rank, 1) * buckets`.
    pub comparison_params: usize,
    /// `max(2 rank, 1) * buckets * d` per table, times the number of tables.
    pub formula_params: usize,
    /// Non-embedding scalars added by expert tables, measured on the model.
    pub added_params: usize,
    pub router_params: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
}

fn cell_config(base: &ExperimentConfig, entry: Option<&BenchEntry>) -> ExperimentConfig {
    let mut cfg = base.clone();
    match entry {
        Some(e) => {
            cfg.memory.lookup = Some(e.lookup);
            cfg.memory.rank = e.rank;
            cfg.memory.buckets = e.buckets;
        }
        None => cfg.memory.lookup = None,
    }
    cfg
}

/// Trains every grid entry (plus the reference row when enabled) with the
/// base seed; rows follow grid order.
pub fn run_lookup_benchmark(base: &ExperimentConfig, grid: &[BenchEntry]) -> Result<Vec<BenchRow>> {
    let mut cells: Vec<Option<&BenchEntry>> = Vec::new();
    if base.bench.include_baseline {
        cells.push(None);
    }
    cells.extend(grid.iter().map(Some));
    let reference = LanguageModel::new(&cell_config(base, None))?.count_params().non_embedding;
    cells
        .into_par_iter()
        .map(|entry| {
            let cfg = cell_config(base, entry);
            cfg.validate()?;
            let tables = cfg.memory_layer_count();
            let router_params = match entry {
                Some(e) if e.lookup == LookupKind::Softmax => tables * e.buckets * cfg.model.d,
                _ => 0,
            };
            let out = train_model(&cfg, None)?;
            let last = out.final_eval().cloned();
            let (train_loss, eval_loss, eval_accuracy) =
                last.map_or((f64::NAN, f64::NAN, f64::NAN), |r| (r.train_loss, r.eval_loss, r.eval_accuracy));
            let (comparison_params, formula_params) = match entry {
                Some(e) => {
                    let c = partial_expert_param_count(e.rank, e.buckets, cfg.model.d);
                    (c.comparison, c.full * tables)
                }
                None => (0, 0),
            };
            Ok(BenchRow {
                entry: entry.cloned(),
                comparison_params,
                formula_params,
                added_params: out.counts.non_embedding - reference - router_params,
                router_params,
                train_loss,
                eval_loss,
                eval_accuracy,
            })
        })
        .collect()
}

pub const CSV_HEADER: &str =
    "lookup,rank,buckets,comparison_params,formula_params,added_params,router_params,train_loss,eval_loss,eval_accuracy";

pub fn write_csv<W: Write>(mut out: W, rows: &[BenchRow]) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        let (lookup, rank, buckets) = match &r.entry {
            Some(e) => (e.lookup.name(), e.rank, e.buckets),
            None => ("none", 0, 0),
        };
        writeln!(
            out,
            "{lookup},{rank},{buckets},{},{},{},{},{},{},{}",
            r.comparison_params,
            r.formula_params,
            r.added_params,
            r.router_params,
            fmt_float(r.train_loss),
            fmt_float(r.eval_loss),
            fmt_float(r.eval_accuracy)
        )?;
    }
    Ok(())
}
