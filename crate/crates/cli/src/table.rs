//! Mean ± std summaries of a results.csv.

use std::io::Read;

use anyhow::{anyhow, Context, Result};

use dcdp::solver::fmt6;

const METRICS: [&str; 5] = ["psnr", "ssim", "mse", "nfe", "wall_time"];

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub task: String,
    pub sigma_y: String,
    pub method: String,
    pub n: usize,
    pub failed: usize,
    /// `(mean, std)` per metric, in the order of `METRICS`.
    pub stats: Vec<(f64, f64)>,
}

/// Sample mean and standard deviation (n − 1 denominator; 0 for one value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() == 1 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups rows by (task, σ_y, method) in order of first appearance.
/// Failed cells are counted but excluded from the statistics.
pub fn summarize<R: Read>(input: R) -> Result<Vec<Group>> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| anyhow!("results are missing the {name:?} column"))
    };
    let (task, sigma, method, status) = (col("task")?, col("sigma_y")?, col("method")?, col("status")?);
    let metric_cols: Vec<usize> = METRICS.iter().map(|m| col(m)).collect::<Result<_>>()?;

    let mut keys: Vec<(String, String, String)> = Vec::new();
    let mut values: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut failed: Vec<usize> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let key = (rec[task].to_string(), rec[sigma].to_string(), rec[method].to_string());
        let g = match keys.iter().position(|k| *k == key) {
            Some(g) => g,
            None => {
                keys.push(key);
                values.push(vec![Vec::new(); METRICS.len()]);
                failed.push(0);
                keys.len() - 1
            }
        };
        if &rec[status] != "ok" {
            failed[g] += 1;
            continue;
        }
        for (m, &c) in metric_cols.iter().enumerate() {
            let v: f64 = rec[c]
                .parse()
                .with_context(|| format!("row {}: {} = {:?}", line + 2, METRICS[m], &rec[c]))?;
            values[g][m].push(v);
        }
    }
    Ok(keys
        .into_iter()
        .zip(values)
        .zip(failed)
        .map(|(((task, sigma_y, method), vals), failed)| Group {
            task,
            sigma_y,
            method,
            n: vals[0].len(),
            failed,
            stats: vals.iter().map(|v| mean_std(v)).collect(),
        })
        .collect())
}

pub fn to_csv(groups: &[Group]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["task".to_string(), "sigma_y".into(), "method".into(), "n".into(), "failed".into()];
    for m in METRICS {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    w.write_record(&header)?;
    for g in groups {
        let mut row = vec![g.task.clone(), g.sigma_y.clone(), g.method.clone(), g.n.to_string(), g.failed.to_string()];
        for &(m, s) in &g.stats {
            row.push(fmt6(m));
            row.push(fmt6(s));
        }
        w.write_record(&row)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// Column-aligned text table.
pub fn to_text(groups: &[Group]) -> String {
    let mut rows: Vec<Vec<String>> = vec![["task", "sigma_y", "method", "n", "failed"]
        .iter()
        .map(|s| s.to_string())
        .chain(METRICS.iter().map(|s| s.to_string()))
        .collect()];
    for g in groups {
        let mut r = vec![g.task.clone(), g.sigma_y.clone(), g.method.clone(), g.n.to_string(), g.failed.to_string()];
        r.extend(g.stats.iter().map(|&(m, s)| format!("{m:.4} ± {s:.4}")));
        rows.push(r);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in rows {
        let cells: Vec<String> = r
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell}{}", " ".repeat(w - cell.chars().count())))
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "task,method,sigma_y,seed,psnr,ssim,mse,nfe,wall_time,status\n";

    #[test]
    fn empty_results_give_only_the_header() {
        let g = summarize(HEADER.as_bytes()).unwrap();
        assert!(g.is_empty());
        assert_eq!(to_text(&g).lines().count(), 1);
        assert_eq!(to_csv(&g).unwrap().lines().count(), 1);
    }

    #[test]
    fn single_row_has_zero_spread() {
        let text = format!("{HEADER}sr:4,DPS,0.05,0,25.5,0.8,0.01,1000,4.2,ok\n");
        let g = summarize(text.as_bytes()).unwrap();
        assert_eq!(g[0].stats[0], (25.5, 0.0));
        assert_eq!(g[0].stats[3], (1000.0, 0.0));
    }

    #[test]
    fn failed_cells_are_counted_not_averaged() {
        let text = format!("{HEADER}sr:4,DPS,0.05,0,25,0.8,0.01,1000,4,ok\nsr:4,DPS,0.05,1,,,,,,error: diverged\n");
        let g = summarize(text.as_bytes()).unwrap();
        assert_eq!((g[0].n, g[0].failed), (1, 1));
    }

    #[test]
    fn missing_columns_are_reported() {
        let err = summarize("task,method\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("sigma_y"));
    }
}
