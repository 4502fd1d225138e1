//! Training reports: per-epoch JSONL records, the benchmark comparison
//! table, and minimal SVG line plots.
//!
//! Wall-clock time is kept in memory and in the bench CSV but never
//! serialized to JSONL, so reports from identical runs are byte identical.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    /// Mean reward over every candidate sampled this epoch (RL runs).
    pub mean_train_reward: Option<f64>,
    /// Mean per-step training loss (MLE runs).
    pub mean_train_loss: Option<f64>,
    pub dev_bleu: f64,
    /// Reward-queue baseline at epoch end (RL runs).
    pub baseline: Option<f64>,
    /// Total candidates sampled this epoch.
    pub sum_k: u64,
    pub retained_forward_passes: u64,
    pub peak_retained_activation_scalars: u64,
    pub greedy_fallbacks: u64,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub method: String,
    pub records: Vec<EpochRecord>,
    /// Per-step batch losses (MLE) for curve diagnostics; not serialized.
    pub step_losses: Vec<f64>,
    /// Per-batch mean rewards (RL) for curve diagnostics; not serialized.
    pub step_rewards: Vec<f64>,
}

impl TrainReport {
    pub fn new(method: &str) -> TrainReport {
        TrainReport {
            method: method.to_string(),
            ..TrainReport::default()
        }
    }

    pub fn push(&mut self, record: EpochRecord) {
        if let Some(last) = self.records.last() {
            assert!(record.epoch > last.epoch, "epoch records must increase");
        }
        self.records.push(record);
    }

    /// One JSON object per epoch per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> serde_json::Result<TrainReport> {
        let mut report = TrainReport::default();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            report.records.push(serde_json::from_str(line)?);
        }
        Ok(report)
    }

    pub fn final_dev_bleu(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.dev_bleu)
    }

    pub fn best_dev_bleu(&self) -> f64 {
        self.records.iter().map(|r| r.dev_bleu).fold(0.0, f64::max)
    }

    pub fn total_sum_k(&self) -> u64 {
        self.records.iter().map(|r| r.sum_k).sum()
    }

    pub fn total_retained_passes(&self) -> u64 {
        self.records.iter().map(|r| r.retained_forward_passes).sum()
    }

    pub fn peak_activation_scalars(&self) -> u64 {
        self.records
            .iter()
            .map(|r| r.peak_retained_activation_scalars)
            .max()
            .unwrap_or(0)
    }

    pub fn total_wall_clock(&self) -> f64 {
        self.records.iter().map(|r| r.wall_clock_secs).sum()
    }
}

/// One row of the method comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: String,
    pub sum_k: u64,
    pub retained_forward_passes: u64,
    pub peak_activation_scalars: u64,
    pub wall_clock_secs: f64,
    pub final_dev_bleu: f64,
    /// Retained-pass count relative to the first naive method in the table.
    pub passes_ratio_vs_naive: Option<f64>,
    pub scalars_ratio_vs_naive: Option<f64>,
}

/// Builds the comparison table from per-method reports. Ratios are taken
/// against the first conventional-sampling method present (reinforce/mrt).
pub fn bench_report(reports: &[TrainReport]) -> Vec<BenchRow> {
    assert!(reports.len() >= 2, "bench_report compares at least two runs");
    let naive = reports
        .iter()
        .find(|r| r.method == "reinforce" || r.method == "mrt");
    let mut rows = Vec::with_capacity(reports.len());
    for r in reports {
        let (passes_ratio, scalars_ratio) = match naive {
            Some(n) if n.total_retained_passes() > 0 => (
                Some(r.total_retained_passes() as f64 / n.total_retained_passes() as f64),
                Some(r.peak_activation_scalars() as f64 / n.peak_activation_scalars().max(1) as f64),
            ),
            _ => (None, None),
        };
        rows.push(BenchRow {
            method: r.method.clone(),
            sum_k: r.total_sum_k(),
            retained_forward_passes: r.total_retained_passes(),
            peak_activation_scalars: r.peak_activation_scalars(),
            wall_clock_secs: r.total_wall_clock(),
            final_dev_bleu: r.final_dev_bleu(),
            passes_ratio_vs_naive: passes_ratio,
            scalars_ratio_vs_naive: scalars_ratio,
        });
    }
    rows
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(
        "method,sum_k,retained_forward_passes,peak_activation_scalars,wall_clock_secs,final_dev_bleu,passes_ratio_vs_naive,scalars_ratio_vs_naive\n",
    );
    for r in rows {
        let fmt_ratio = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        out.push_str(&format!(
            "{},{},{},{},{:.3},{:.6},{},{}\n",
            r.method,
            r.sum_k,
            r.retained_forward_passes,
            r.peak_activation_scalars,
            r.wall_clock_secs,
            r.final_dev_bleu,
            fmt_ratio(r.passes_ratio_vs_naive),
            fmt_ratio(r.scalars_ratio_vs_naive),
        ));
    }
    out
}

const PLOT_COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Minimal static line plot: one polyline per named series.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h) = (640.0, 400.0);
    let (ml, mr, mt, mb) = (70.0, 20.0, 40.0, 50.0);
    let points: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if points.is_empty() {
        x0 = 0.0;
        x1 = 1.0;
        y0 = 0.0;
        y1 = 1.0;
    }
    if (x1 - x0).abs() < 1e-12 {
        x1 = x0 + 1.0;
    }
    if (y1 - y0).abs() < 1e-12 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| ml + (x - x0) / (x1 - x0) * (w - ml - mr);
    let sy = |y: f64| h - mb - (y - y0) / (y1 - y0) * (h - mt - mb);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <text x=\"{tx}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">{title}</text>\n",
        tx = w / 2.0
    );
    // axes
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{yb}\" x2=\"{xr}\" y2=\"{yb}\" stroke=\"black\"/>\n\
         <line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{yb}\" stroke=\"black\"/>\n",
        yb = h - mb,
        xr = w - mr,
    ));
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{:.3}</text>\n",
            sx(fx),
            h - mb + 18.0,
            fx
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{:.3}</text>\n",
            ml - 6.0,
            sy(fy) + 4.0,
            fy
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{x_label}</text>\n",
        (ml + w - mr) / 2.0,
        h - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{:.1}\" transform=\"rotate(-90 16 {:.1})\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{y_label}</text>\n",
        (mt + h - mb) / 2.0,
        (mt + h - mb) / 2.0
    ));
    for (si, (name, pts)) in series.iter().enumerate() {
        let color = PLOT_COLORS[si % PLOT_COLORS.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"{color}\">{name}</text>\n",
            w - mr - 150.0,
            mt + 16.0 * si as f64 + 4.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(epoch: u64) -> EpochRecord {
        EpochRecord {
            epoch,
            mean_train_reward: Some(0.5),
            mean_train_loss: None,
            dev_bleu: 0.25 * epoch as f64,
            baseline: Some(0.4),
            sum_k: 100,
            retained_forward_passes: 10,
            peak_retained_activation_scalars: 999,
            greedy_fallbacks: 0,
            wall_clock_secs: 1.25,
        }
    }

    #[test]
    fn jsonl_round_trips_and_omits_wall_clock() {
        let mut r = TrainReport::new("esrl-metric");
        r.push(record(1));
        r.push(record(2));
        let text = r.to_jsonl();
        assert_eq!(text.lines().count(), 2);
        assert!(!text.contains("wall_clock"));
        let back = TrainReport::from_jsonl(&text).unwrap();
        assert_eq!(back.records.len(), 2);
        assert_eq!(back.records[1].epoch, 2);
        assert_eq!(back.records[1].wall_clock_secs, 0.0);
    }

    #[test]
    #[should_panic(expected = "epoch records must increase")]
    fn records_must_increase_in_epoch() {
        let mut r = TrainReport::new("mle");
        r.push(record(2));
        r.push(record(2));
    }

    #[test]
    fn bench_rows_carry_ratios_against_naive() {
        let mut esrl = TrainReport::new("esrl-metric");
        let mut naive = TrainReport::new("reinforce");
        let mut e1 = record(1);
        e1.retained_forward_passes = 10;
        esrl.push(e1);
        let mut n1 = record(1);
        n1.retained_forward_passes = 90;
        naive.push(n1);
        let rows = bench_report(&[esrl, naive]);
        assert_eq!(rows.len(), 2);
        let r = rows.iter().find(|r| r.method == "esrl-metric").unwrap();
        assert!((r.passes_ratio_vs_naive.unwrap() - 10.0 / 90.0).abs() < 1e-12);
        let csv = bench_csv(&rows);
        assert!(csv.starts_with("method,"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn identical_reports_produce_identical_rows() {
        let mut a = TrainReport::new("esrl-metric");
        a.push(record(1));
        let mut b = TrainReport::new("reinforce");
        b.push(record(1));
        let rows1 = bench_report(&[a.clone(), b.clone()]);
        let rows2 = bench_report(&[a, b]);
        assert_eq!(rows1, rows2);
    }

    #[test]
    fn svg_plot_contains_series() {
        let svg = line_plot_svg(
            "reward vs epoch",
            "epoch",
            "reward",
            &[("esrl".to_string(), vec![(1.0, 0.2), (2.0, 0.5)])],
        );
        assert!(svg.contains("<svg"));
        assert!(svg.contains("polyline"));
        assert!(svg.contains("esrl"));
    }
}
