//! Classification metrics: confusion counts, rank-based AUROC with ties,
//! undefined-metric handling and report rendering.
//!
//! Run with `cargo run --example evaluate_metrics`.

use toxpipe::metrics::{
    auroc, auroc_by_pair_enumeration, render_report_csv, render_report_text, score_histogram,
    EvalReport,
};

fn main() {
    let scores = [0.92, 0.81, 0.75, 0.75, 0.44, 0.31, 0.22, 0.10];
    let labels = [1u8, 1, 0, 1, 0, 1, 0, 0];

    let fast = auroc(&scores, &labels).unwrap().unwrap();
    let slow = auroc_by_pair_enumeration(&scores, &labels).unwrap();
    println!("auroc rank-based {fast:.6} / pair enumeration {slow:.6}");

    let report = EvalReport::from_scores(&scores, &labels, 0.5).unwrap();
    println!(
        "counts: tp={} tn={} fp={} fn={}",
        report.counts.tp, report.counts.tn, report.counts.fp, report.counts.fn_
    );

    // A degenerate scorer that never predicts positive leaves precision
    // undefined; reports mark it instead of writing a silent zero.
    let never = EvalReport::from_scores(&[0.1, 0.2, 0.3], &[1, 0, 1], 0.5).unwrap();

    let rows = vec![
        ("mixed-scorer".to_string(), report),
        ("never-positive".to_string(), never),
    ];
    println!("\n{}", render_report_text(&rows).unwrap());
    println!("{}", render_report_csv(&rows).unwrap());

    let histogram = score_histogram(&scores).unwrap();
    println!("score histogram:\n{}", histogram.to_csv());
}
