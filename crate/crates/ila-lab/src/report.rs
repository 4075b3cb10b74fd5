//! Deterministic CSV and JSON artifacts. All float formatting uses Rust's
//! shortest-roundtrip `{}` form, so emit/parse cycles are lossless and
//! identical inputs produce identical bytes.

use std::fs;
use std::path::Path;

use ila_core::analysis::{CkaMatrix, CostReport};
use serde::Serialize;

use crate::{LabError, Result};

#[derive(Debug, Clone, Serialize)]
pub struct AccuracyRow {
    pub variant: String,
    pub rsds: String,
    pub dataset: String,
    pub seed: u64,
    pub lr: f64,
    pub accuracy: f64,
}

pub const ACCURACY_HEADER: &str = "variant,rsds,dataset,seed,lr,accuracy";

pub fn accuracy_csv(rows: &[AccuracyRow]) -> String {
    let mut out = String::from(ACCURACY_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.variant, r.rsds, r.dataset, r.seed, r.lr, r.accuracy
        ));
    }
    out
}

/// Mean and sample standard deviation (n-1 denominator, 0 for n=1).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregate rows sharing (variant, rsds, dataset) into mean +- std lines.
pub fn aggregate_csv(rows: &[AccuracyRow]) -> String {
    let mut out = String::from("variant,rsds,dataset,seeds,mean_accuracy,std_accuracy\n");
    let mut keys: Vec<(String, String, String)> = rows
        .iter()
        .map(|r| (r.variant.clone(), r.rsds.clone(), r.dataset.clone()))
        .collect();
    keys.sort();
    keys.dedup();
    for (variant, rsds, dataset) in keys {
        let accs: Vec<f64> = rows
            .iter()
            .filter(|r| r.variant == variant && r.rsds == rsds && r.dataset == dataset)
            .map(|r| r.accuracy)
            .collect();
        let (mean, std) = mean_std(&accs);
        out.push_str(&format!(
            "{variant},{rsds},{dataset},{},{mean},{std}\n",
            accs.len()
        ));
    }
    out
}

pub fn cka_csv(m: &CkaMatrix) -> String {
    let n = m.labels.len();
    let mut out = String::from("layer");
    for l in &m.labels {
        out.push(',');
        out.push_str(l);
    }
    out.push('\n');
    for i in 0..n {
        out.push_str(&m.labels[i]);
        for j in 0..n {
            out.push_str(&format!(",{}", m.get(i, j)));
        }
        out.push('\n');
    }
    out
}

pub fn parse_cka_csv(text: &str) -> Result<CkaMatrix> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| LabError::Config("empty CKA CSV".into()))?;
    let labels: Vec<String> = header.split(',').skip(1).map(String::from).collect();
    let n = labels.len();
    let mut values = Vec::with_capacity(n * n);
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != n + 1 {
            return Err(LabError::Config(format!(
                "CKA CSV row has {} cells, expected {}",
                cells.len(),
                n + 1
            )));
        }
        for c in &cells[1..] {
            values.push(
                c.parse::<f64>()
                    .map_err(|e| LabError::Config(format!("bad CKA cell `{c}`: {e}")))?,
            );
        }
    }
    if values.len() != n * n {
        return Err(LabError::Config(format!(
            "CKA CSV has {} values, expected {}",
            values.len(),
            n * n
        )));
    }
    Ok(CkaMatrix { labels, values })
}

#[derive(Debug, Serialize)]
struct CostJson {
    conventions: Conventions,
    total_params: u64,
    trainable_params: u64,
    trainable_fraction: f64,
    flops_forward: u64,
    layers: Vec<LayerJson>,
}

#[derive(Debug, Serialize)]
struct LayerJson {
    name: String,
    params_total: u64,
    params_trainable: u64,
    flops: u64,
}

#[derive(Debug, Serialize)]
struct Conventions {
    mac_flops: u32,
    note: &'static str,
}

/// Cost report JSON with an embedded conventions block so the numbers are
/// auditable.
pub fn cost_json(report: &CostReport) -> Result<String> {
    let doc = CostJson {
        conventions: Conventions {
            mac_flops: 2,
            note: "multiply-accumulate = 2 FLOPs; norms and activations counted per element (LN/BN 8, GELU 6, softmax 4, add/mul 1)",
        },
        total_params: report.params_total,
        trainable_params: report.params_trainable,
        trainable_fraction: report.params_trainable as f64 / report.params_total.max(1) as f64,
        flops_forward: report.flops,
        layers: report
            .layers
            .iter()
            .map(|l| LayerJson {
                name: l.name.clone(),
                params_total: l.params_total,
                params_trainable: l.params_trainable,
                flops: l.flops,
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn cost_csv(report: &CostReport) -> String {
    let mut out = String::from("layer,params_total,params_trainable,flops\n");
    for l in &report.layers {
        out.push_str(&format!(
            "{},{},{},{}\n",
            l.name, l.params_total, l.params_trainable, l.flops
        ));
    }
    out.push_str(&format!(
        "total,{},{},{}\n",
        report.params_total, report.params_trainable, report.flops
    ));
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_rows_give_header_only() {
        assert_eq!(accuracy_csv(&[]), format!("{ACCURACY_HEADER}\n"));
    }

    #[test]
    fn csv_is_reproducible() {
        let rows = vec![AccuracyRow {
            variant: "ila".into(),
            rsds: "dwc-near-ones".into(),
            dataset: "synthetic".into(),
            seed: 1,
            lr: 0.03,
            accuracy: 51.25,
        }];
        assert_eq!(accuracy_csv(&rows), accuracy_csv(&rows));
        assert!(accuracy_csv(&rows).contains("ila,dwc-near-ones,synthetic,1,0.03,51.25"));
    }

    #[test]
    fn cka_roundtrip_exact() {
        let m = CkaMatrix {
            labels: vec!["layer1".into(), "layer2".into(), "layer3".into()],
            values: vec![
                1.0,
                0.123456789012345,
                0.5,
                0.123456789012345,
                1.0,
                1.0 / 3.0,
                0.5,
                1.0 / 3.0,
                1.0,
            ],
        };
        let parsed = parse_cka_csv(&cka_csv(&m)).unwrap();
        assert_eq!(parsed.labels, m.labels);
        for (a, b) in parsed.values.iter().zip(&m.values) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn mean_std_hand_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
        let (m1, s1) = mean_std(&[5.0]);
        assert_eq!((m1, s1), (5.0, 0.0));
    }

    #[test]
    fn aggregate_groups_by_key() {
        let mk = |seed, acc| AccuracyRow {
            variant: "ila".into(),
            rsds: "none".into(),
            dataset: "d".into(),
            seed,
            lr: 0.1,
            accuracy: acc,
        };
        let csv = aggregate_csv(&[mk(1, 40.0), mk(2, 60.0)]);
        assert!(csv.contains("ila,none,d,2,50,"), "{csv}");
    }
}
