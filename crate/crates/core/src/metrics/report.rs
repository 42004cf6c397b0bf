//! Multi-run aggregation across input resolutions: per-pathology summary
//! statistics, pairwise significance tests, and a grouped bar chart.

use std::collections::BTreeMap;

use crate::data::manifest::{NUM_CLASSES, PATHOLOGIES};
use crate::error::{Error, Result};

use super::{welch_t_test, TTestReport};

/// One run's per-pathology validation AUROC. `None` marks a class that was
/// undefined for the split (no positives or no negatives).
#[derive(Debug, Clone, PartialEq)]
pub struct RunAuroc {
    pub input_size: usize,
    pub seed: u64,
    pub per_class: [Option<f64>; NUM_CLASSES],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub input_size: usize,
    pub class_index: usize,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairTestRow {
    pub class_index: usize,
    pub size_a: usize,
    pub size_b: usize,
    pub test: TTestReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub summary: Vec<SummaryRow>,
    pub tests: Vec<PairTestRow>,
}

/// Group runs by input size, summarize each (size, pathology), and run a
/// Welch test per pathology for every size pair. Unequal run counts across
/// sizes are fine; fewer than two runs in a group are not.
pub fn resolution_ablation_report(runs: &[RunAuroc]) -> Result<AblationReport> {
    let mut groups: BTreeMap<usize, Vec<&RunAuroc>> = BTreeMap::new();
    for run in runs {
        groups.entry(run.input_size).or_default().push(run);
    }
    if groups.len() < 2 {
        return Err(Error::Config(format!(
            "ablation needs at least 2 resolutions, got {}",
            groups.len()
        )));
    }
    for (&size, group) in &groups {
        if group.len() < 2 {
            return Err(Error::Config(format!(
                "resolution {size} has {} run(s); at least 2 required",
                group.len()
            )));
        }
    }

    let class_values = |group: &[&RunAuroc], k: usize| -> Vec<f64> {
        group.iter().filter_map(|r| r.per_class[k]).collect()
    };

    let mut summary = Vec::new();
    for (&size, group) in &groups {
        for k in 0..NUM_CLASSES {
            let vals = class_values(group, k);
            if vals.len() < 2 {
                return Err(Error::Config(format!(
                    "resolution {size}, class {k}: fewer than 2 defined AUROC values"
                )));
            }
            let n = vals.len();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
            summary.push(SummaryRow { input_size: size, class_index: k, mean, std: var.sqrt(), n });
        }
    }

    let sizes: Vec<usize> = groups.keys().copied().collect();
    let mut tests = Vec::new();
    for k in 0..NUM_CLASSES {
        for i in 0..sizes.len() {
            for j in i + 1..sizes.len() {
                let a = class_values(&groups[&sizes[i]], k);
                let b = class_values(&groups[&sizes[j]], k);
                tests.push(PairTestRow {
                    class_index: k,
                    size_a: sizes[i],
                    size_b: sizes[j],
                    test: welch_t_test(&a, &b)?,
                });
            }
        }
    }
    Ok(AblationReport { summary, tests })
}

pub fn summary_to_csv(report: &AblationReport) -> String {
    let mut out = String::from("input_size,pathology,mean_auroc,std_auroc,n_runs\n");
    for row in &report.summary {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.input_size, PATHOLOGIES[row.class_index], row.mean, row.std, row.n
        ));
    }
    out
}

pub fn tests_to_csv(report: &AblationReport) -> String {
    let mut out = String::from("pathology,size_a,size_b,t,df,p,significant\n");
    for row in &report.tests {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            PATHOLOGIES[row.class_index],
            row.size_a,
            row.size_b,
            row.test.t,
            row.test.df,
            row.test.p,
            row.test.significant
        ));
    }
    out
}

const BAR_COLORS: [&str; 6] = ["#4878cf", "#ee854a", "#6acc65", "#d65f5f", "#956cb4", "#8c613c"];

/// Static grouped bar chart: one group per pathology, one bar per input
/// size, mean AUROC with a std whisker.
pub fn chart_svg(report: &AblationReport) -> String {
    let sizes: Vec<usize> = {
        let mut s: Vec<usize> = report.summary.iter().map(|r| r.input_size).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    let (width, height) = (780.0, 440.0);
    let (left, right, top, bottom) = (60.0, 20.0, 40.0, 70.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;
    let y_of = |v: f64| top + plot_h * (1.0 - v);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">\
         Validation AUROC by input size</text>\n",
        width / 2.0
    ));

    for i in 0..=10 {
        let v = i as f64 / 10.0;
        let y = y_of(v);
        svg.push_str(&format!(
            "<line x1=\"{left}\" y1=\"{y}\" x2=\"{:.1}\" y2=\"{y}\" stroke=\"#dddddd\"/>\n",
            left + plot_w
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.1}</text>\n",
            left - 6.0,
            y + 4.0
        ));
    }

    let group_w = plot_w / NUM_CLASSES as f64;
    let bar_w = (group_w * 0.8) / sizes.len() as f64;
    for k in 0..NUM_CLASSES {
        let gx = left + k as f64 * group_w;
        svg.push_str(&format!("<g class=\"pathology-group\" data-pathology=\"{}\">\n", PATHOLOGIES[k]));
        for (si, &size) in sizes.iter().enumerate() {
            if let Some(row) = report
                .summary
                .iter()
                .find(|r| r.class_index == k && r.input_size == size)
            {
                let x = gx + group_w * 0.1 + si as f64 * bar_w;
                let y = y_of(row.mean);
                let color = BAR_COLORS[si % BAR_COLORS.len()];
                svg.push_str(&format!(
                    "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{:.2}\" \
                     fill=\"{color}\"/>\n",
                    bar_w * 0.9,
                    y_of(0.0) - y
                ));
                let cx = x + bar_w * 0.45;
                let y_lo = y_of((row.mean - row.std).max(0.0));
                let y_hi = y_of((row.mean + row.std).min(1.0));
                svg.push_str(&format!(
                    "<line x1=\"{cx:.2}\" y1=\"{y_lo:.2}\" x2=\"{cx:.2}\" y2=\"{y_hi:.2}\" \
                     stroke=\"#333333\"/>\n"
                ));
            }
        }
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            gx + group_w / 2.0,
            top + plot_h + 18.0,
            PATHOLOGIES[k]
        ));
        svg.push_str("</g>\n");
    }

    for (si, &size) in sizes.iter().enumerate() {
        let x = left + si as f64 * 110.0;
        let y = height - 26.0;
        let color = BAR_COLORS[si % BAR_COLORS.len()];
        svg.push_str(&format!(
            "<rect x=\"{x}\" y=\"{:.1}\" width=\"12\" height=\"12\" fill=\"{color}\"/>\n",
            y - 10.0
        ));
        svg.push_str(&format!("<text x=\"{:.1}\" y=\"{y}\">{size}x{size}</text>\n", x + 16.0));
    }
    svg.push_str("</svg>\n");
    svg
}
