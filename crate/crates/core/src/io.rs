//! File artifacts: columnar CSV for surfaces and paths, JSON for metadata
//! and reports. Outputs carry no wall-clock data, so a rerun with the same
//! config, seed, and thread count reproduces every byte.

use crate::control::PathBundle;
use crate::error::{Error, Result};
use crate::grid::SpaceTimeGrid;
use crate::params::RobustParams;
use crate::pde::{SolveMeta, ValueSolution};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fs;
use std::io::Write;
use std::path::Path;

pub const SOLUTION_CSV: &str = "w.csv";
pub const SOLUTION_META: &str = "meta.json";
pub const CONFIG_ECHO: &str = "config.toml";

/// Hex SHA-256 of the raw config text; stored in solution metadata and
/// checked by downstream commands.
pub fn config_hash(text: &str) -> String {
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    let digest = h.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Write a solved surface: `w.csv` with one row per node plus the JSON
/// sidecar, and the config echoed verbatim when given.
pub fn write_solution(dir: &Path, sol: &ValueSolution, config_text: Option<&str>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let grid = &sol.grid;
    let dim = grid.dim();
    let inv_beta = 1.0 / sol.params.beta;

    let mut wtr = csv::Writer::from_path(dir.join(SOLUTION_CSV))?;
    let mut header = vec!["t".to_string(), "y1".to_string()];
    if dim > 1 {
        header.push("y2".into());
    }
    header.push("w".into());
    header.push("v".into());
    header.push("dw1".into());
    if dim > 1 {
        header.push("dw2".into());
    }
    wtr.write_record(&header)?;
    for j in 0..grid.n_t() {
        let s = grid.time_to_go(j);
        let s_pow = s.powf(inv_beta);
        for i0 in 0..grid.n_y(0) {
            for i1 in 0..grid.n_y1_or_1() {
                let y = grid.point(i0, i1);
                let w = sol.w[[j, i0, i1]];
                let mut rec = vec![grid.t_nodes[j].to_string(), y[0].to_string()];
                if dim > 1 {
                    rec.push(y[1].to_string());
                }
                rec.push(w.to_string());
                rec.push((w / s_pow).to_string());
                rec.push(sol.dw[0][[j, i0, i1]].to_string());
                if dim > 1 {
                    rec.push(sol.dw[1][[j, i0, i1]].to_string());
                }
                wtr.write_record(&rec)?;
            }
        }
    }
    wtr.flush()?;

    write_json(dir.join(SOLUTION_META), &sol.meta)?;
    if let Some(text) = config_text {
        fs::write(dir.join(CONFIG_ECHO), text)?;
    }
    Ok(())
}

/// Read a solved surface back (inverse of [`write_solution`]).
pub fn read_solution(dir: &Path) -> Result<ValueSolution> {
    let meta: SolveMeta = serde_json::from_str(&fs::read_to_string(dir.join(SOLUTION_META))?)?;
    let params = RobustParams::new(meta.p, meta.m, meta.horizon, meta.theta)?;

    let mut rdr = csv::Reader::from_path(dir.join(SOLUTION_CSV))?;
    let headers = rdr.headers()?.clone();
    let dim = if headers.iter().any(|h| h == "y2") { 2 } else { 1 };
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Serde(format!("column `{name}` missing from {SOLUTION_CSV}")))
    };
    let (ct, cy1, cw, cdw1) = (col("t")?, col("y1")?, col("w")?, col("dw1")?);
    let (cy2, cdw2) = if dim > 1 { (col("y2")?, col("dw2")?) } else { (0, 0) };

    let mut rows: Vec<(f64, f64, f64, f64, f64, f64)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let get = |i: usize| -> Result<f64> {
            rec.get(i)
                .ok_or_else(|| Error::Serde("short csv row".into()))?
                .parse::<f64>()
                .map_err(|e| Error::Serde(e.to_string()))
        };
        rows.push((
            get(ct)?,
            get(cy1)?,
            if dim > 1 { get(cy2)? } else { 0.0 },
            get(cw)?,
            get(cdw1)?,
            if dim > 1 { get(cdw2)? } else { 0.0 },
        ));
    }

    let mut t_nodes: Vec<f64> = rows.iter().map(|r| r.0).collect();
    t_nodes.sort_by(f64::total_cmp);
    t_nodes.dedup();
    let mut y1_nodes: Vec<f64> = rows.iter().map(|r| r.1).collect();
    y1_nodes.sort_by(f64::total_cmp);
    y1_nodes.dedup();
    let mut y2_nodes: Vec<f64> = rows.iter().map(|r| r.2).collect();
    y2_nodes.sort_by(f64::total_cmp);
    y2_nodes.dedup();

    let nt = t_nodes.len();
    let n0 = y1_nodes.len();
    let n1 = if dim > 1 { y2_nodes.len() } else { 1 };
    if nt * n0 * n1 != rows.len() {
        return Err(Error::Serde(format!(
            "csv is not a full tensor grid: {} rows vs {nt} x {n0} x {n1} nodes",
            rows.len()
        )));
    }
    let tau_min = meta.horizon - t_nodes[nt - 1];
    let grid = SpaceTimeGrid {
        horizon: meta.horizon,
        tau_min,
        t_nodes,
        y_nodes: if dim > 1 {
            vec![y1_nodes, y2_nodes]
        } else {
            vec![y1_nodes]
        },
    };

    let find = |nodes: &[f64], x: f64| -> usize {
        nodes
            .iter()
            .position(|&v| (v - x).abs() <= 1e-12 * (1.0 + x.abs()))
            .expect("node from csv row must exist")
    };
    let mut w = ndarray::Array3::zeros((nt, n0, n1));
    let mut dw: Vec<ndarray::Array3<f64>> =
        (0..dim).map(|_| ndarray::Array3::zeros((nt, n0, n1))).collect();
    for r in &rows {
        let j = find(&grid.t_nodes, r.0);
        let i0 = find(&grid.y_nodes[0], r.1);
        let i1 = if dim > 1 { find(&grid.y_nodes[1], r.2) } else { 0 };
        w[[j, i0, i1]] = r.3;
        dw[0][[j, i0, i1]] = r.4;
        if dim > 1 {
            dw[1][[j, i0, i1]] = r.5;
        }
    }

    Ok(ValueSolution { grid, w, dw, meta, params })
}

/// Serialize any report as pretty JSON (stable field order).
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut f = fs::File::create(path.as_ref())?;
    let text = serde_json::to_string_pretty(value)?;
    f.write_all(text.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Dump full simulated paths as CSV (flag-gated by the caller; large).
pub fn write_paths_csv(path: impl AsRef<Path>, paths: &[PathBundle], dim: usize) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path.as_ref())?;
    let mut header = vec!["path".to_string(), "t".to_string(), "y1".to_string()];
    if dim > 1 {
        header.push("y2".into());
    }
    header.extend(["x".to_string(), "xi".to_string(), "vartheta1".to_string()]);
    if dim > 1 {
        header.push("vartheta2".into());
    }
    wtr.write_record(&header)?;
    for (idx, p) in paths.iter().enumerate() {
        for k in 0..p.times.len() {
            let mut rec = vec![
                idx.to_string(),
                p.times[k].to_string(),
                p.y[k][0].to_string(),
            ];
            if dim > 1 {
                rec.push(p.y[k][1].to_string());
            }
            rec.push(p.x[k].to_string());
            rec.push(p.xi[k].to_string());
            rec.push(p.vartheta[k][0].to_string());
            if dim > 1 {
                rec.push(p.vartheta[k][1].to_string());
            }
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Per-path cost summaries as CSV.
pub fn write_path_summaries(path: impl AsRef<Path>, paths: &[PathBundle]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path.as_ref())?;
    wtr.write_record([
        "path",
        "impact",
        "risk",
        "penalty",
        "tail_value",
        "total",
        "logweight",
        "x_end",
        "reflected_steps",
    ])?;
    for (idx, p) in paths.iter().enumerate() {
        wtr.write_record(&[
            idx.to_string(),
            p.cost.impact.to_string(),
            p.cost.risk.to_string(),
            p.cost.penalty.to_string(),
            p.cost.tail_value.to_string(),
            p.cost.total().to_string(),
            p.logweight.to_string(),
            p.x_end.to_string(),
            p.reflected_steps.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::SpaceBox;
    use crate::model::FactorModel;
    use crate::pde::{solve_singular, SolverOptions};

    #[test]
    fn solution_roundtrip_is_bitexact() {
        let model = FactorModel::ou_liquidity(0.0, 1.0, 0.5, 0.3).unwrap();
        let params = RobustParams::new(2.0, 4.0, 1.0, 0.1).unwrap();
        let grid = SpaceTimeGrid::new(
            1.0,
            1e-4,
            24,
            &SpaceBox::new([-2.0, -2.0], [2.0, 2.0]),
            &[8, 6],
        )
        .unwrap();
        let sol = solve_singular(
            &model,
            &params,
            &grid,
            &SolverOptions { estimate_error: false, ..Default::default() },
        )
        .unwrap();
        let dir = std::env::temp_dir().join(format!("robliq-io-test-{}", std::process::id()));
        write_solution(&dir, &sol, Some("# config echo")).unwrap();
        let back = read_solution(&dir).unwrap();
        assert_eq!(back.w, sol.w);
        assert_eq!(back.dw[0], sol.dw[0]);
        assert_eq!(back.dw[1], sol.dw[1]);
        assert_eq!(back.meta.theta, sol.meta.theta);
        assert_eq!(
            std::fs::read_to_string(dir.join(CONFIG_ECHO)).unwrap(),
            "# config echo"
        );
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = config_hash("alpha");
        let b = config_hash("alpha");
        let c = config_hash("beta");
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 64);
    }
}
