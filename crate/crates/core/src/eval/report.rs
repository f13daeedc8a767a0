use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{accuracy, average_precision};
use crate::data::Family;
use crate::error::{arg_err, IaplError, Result};

/// Scores on one family. AP is measured on that family together with every
/// real sample, so it is absent for the real family itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyMetrics {
    pub acc: f64,
    pub ap: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Micro accuracy over every sample.
    pub acc: f64,
    /// Micro AP over every sample; absent without fake samples.
    pub ap: Option<f64>,
    /// Mean of the per-family accuracies.
    pub macro_acc: f64,
    /// Mean of the per-family APs that exist.
    pub macro_ap: Option<f64>,
    pub per_family: BTreeMap<String, FamilyMetrics>,
    pub n_samples: usize,
    /// Samples whose token tuning failed and fell back to the untuned decision.
    pub tta_failures: usize,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub wall_time: f64,
}

/// Output format of [`emit_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Svg,
}

impl std::str::FromStr for ReportFormat {
    type Err = IaplError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "svg" => Ok(Self::Svg),
            other => arg_err(format!("unknown report format `{other}`")),
        }
    }
}

/// Per-sample outcome fed to [`MetricsReport::from_scores`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub prob: f64,
    pub label: u8,
    pub family: Family,
}

impl MetricsReport {
    pub fn from_scores(scored: &[Scored], seed: u64, config: BTreeMap<String, String>) -> Result<Self> {
        if scored.is_empty() {
            return Err(IaplError::Metric("no samples to score".into()));
        }
        let probs: Vec<f64> = scored.iter().map(|s| s.prob).collect();
        let labels: Vec<u8> = scored.iter().map(|s| s.label).collect();
        let acc = accuracy(&probs, &labels, 0.5)?;
        let ap = labels.contains(&1).then(|| average_precision(&probs, &labels)).transpose()?;

        let mut per_family = BTreeMap::new();
        for fam in Family::ALL {
            let idx: Vec<usize> = (0..scored.len()).filter(|&i| scored[i].family == fam).collect();
            if idx.is_empty() {
                continue;
            }
            let fp: Vec<f64> = idx.iter().map(|&i| probs[i]).collect();
            let fl: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
            let fam_acc = accuracy(&fp, &fl, 0.5)?;
            let fam_ap = if fam.label() == 1 {
                let with_real: Vec<usize> = (0..scored.len())
                    .filter(|&i| scored[i].family == fam || scored[i].family == Family::Real)
                    .collect();
                let p: Vec<f64> = with_real.iter().map(|&i| probs[i]).collect();
                let l: Vec<u8> = with_real.iter().map(|&i| labels[i]).collect();
                Some(average_precision(&p, &l)?)
            } else {
                None
            };
            per_family.insert(fam.name().to_string(), FamilyMetrics { acc: fam_acc, ap: fam_ap, count: idx.len() });
        }
        let macro_acc = per_family.values().map(|m| m.acc).sum::<f64>() / per_family.len() as f64;
        let aps: Vec<f64> = per_family.values().filter_map(|m| m.ap).collect();
        let macro_ap = (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64);
        Ok(Self {
            acc,
            ap,
            macro_acc,
            macro_ap,
            per_family,
            n_samples: scored.len(),
            tta_failures: 0,
            config,
            seed,
            wall_time: 0.0,
        })
    }

    /// Copy with the wall-clock field zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        Self { wall_time: 0.0, ..self.clone() }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| IaplError::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| IaplError::Format(e.to_string()))
    }

    /// Rows `family,acc,ap,count`: one per family, then `micro` and `macro`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| IaplError::Format(e.to_string());
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record(["family", "acc", "ap", "count"]).map_err(io)?;
        for (name, m) in &self.per_family {
            w.write_record([name.clone(), m.acc.to_string(), opt(m.ap), m.count.to_string()])
                .map_err(io)?;
        }
        let n = self.n_samples.to_string();
        w.write_record(["micro".to_string(), self.acc.to_string(), opt(self.ap), n.clone()])
            .map_err(io)?;
        w.write_record(["macro".to_string(), self.macro_acc.to_string(), opt(self.macro_ap), n])
            .map_err(io)?;
        let bytes = w.into_inner().map_err(|e| IaplError::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| IaplError::Format(e.to_string()))
    }

    /// Bar chart of per-family accuracy.
    pub fn to_svg(&self) -> String {
        let bar_w = 60.0;
        let gap = 20.0;
        let h = 200.0;
        let n = self.per_family.len() as f64;
        let width = gap + n * (bar_w + gap);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{}" viewBox="0 0 {width} {}">"#,
            h + 60.0,
            h + 60.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{gap}" y="16" font-family="sans-serif" font-size="12">accuracy by family (micro {:.4})</text>"#,
            self.acc
        );
        let base = h + 30.0;
        let _ = writeln!(s, r#"<line x1="0" y1="{base}" x2="{width}" y2="{base}" stroke="black"/>"#);
        for (i, (name, m)) in self.per_family.iter().enumerate() {
            let x = gap + i as f64 * (bar_w + gap);
            let bh = m.acc.clamp(0.0, 1.0) * h;
            let _ = writeln!(
                s,
                r##"<rect x="{x}" y="{}" width="{bar_w}" height="{bh}" fill="#4a7bb7"><title>{name}: {:.4}</title></rect>"##,
                base - bh,
                m.acc
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{name}</text>"#,
                x + bar_w / 2.0,
                base + 15.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{:.3}</text>"#,
                x + bar_w / 2.0,
                base - bh - 4.0,
                m.acc
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

pub fn emit_report(report: &MetricsReport, path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Csv => report.to_csv()?,
        ReportFormat::Json => report.to_json()?,
        ReportFormat::Svg => report.to_svg(),
    };
    std::fs::write(path, text)?;
    Ok(())
}
