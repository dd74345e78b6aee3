use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, PreparedScene};

use super::{evaluate, EvalConfig, COMPRESSION_RATIOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: usize,
    pub map03: Option<f64>,
    pub map05: Option<f64>,
}

/// Validated, deduplicated, ascending.
pub fn normalize_ratios(ratios: &[usize]) -> Result<Vec<usize>> {
    if let Some(r) = ratios.iter().find(|r| !COMPRESSION_RATIOS.contains(r)) {
        return Err(Error::invalid("sweep", format!("unsupported compression ratio {r}")));
    }
    let mut out = ratios.to_vec();
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Evaluates one model per ratio on the same scenes. `model_for` supplies the
/// model trained with that ratio's adapters.
pub fn sweep_compression(
    mut model_for: impl FnMut(usize) -> Result<Model>,
    scenes: &[PreparedScene],
    ratios: &[usize],
    cfg: &EvalConfig,
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for ratio in normalize_ratios(ratios)? {
        let model = model_for(ratio)?;
        if model.cfg.compression_ratio != ratio {
            return Err(Error::invalid(
                "sweep",
                format!("model for ratio {ratio} was built with ratio {}", model.cfg.compression_ratio),
            ));
        }
        let report = evaluate(&model, scenes, cfg, jobs)?;
        rows.push(SweepRow { ratio, map03: report.map03, map05: report.map05 });
    }
    Ok(rows)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| x.to_string())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("ratio,map03,map05\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.ratio, cell(r.map03), cell(r.map05)));
    }
    out
}

/// Whitespace-separated columns for gnuplot-style plotting.
pub fn sweep_plot_data(rows: &[SweepRow]) -> String {
    let mut out = String::from("# ratio map03 map05\n");
    for r in rows {
        out.push_str(&format!("{} {} {}\n", r.ratio, cell(r.map03), cell(r.map05)));
    }
    out
}
