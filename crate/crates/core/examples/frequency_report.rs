//! Category shares for a label histogram under both rounding modes.
//!
//! cargo run --example frequency_report

use qse_core::taxonomy::{report_from_histogram, CategoryHistogram, Rounding};
use qse_core::ChallengeCategory::*;

fn main() {
    let counts = [
        (Tooling, 596),
        (Conceptual, 610),
        (Errors, 815),
        (Theoretical, 415),
        (ApiUsage, 227),
        (Learning, 166),
    ];
    let labels = counts.iter().flat_map(|&(c, n)| std::iter::repeat_n(c, n));
    let histogram = CategoryHistogram::from_labels(labels);
    for rounding in [Rounding::HalfUp, Rounding::Truncate] {
        let report = report_from_histogram(histogram.clone(), rounding);
        println!("{rounding:?} (sum {:.2}%)", report.percent_sum());
        print!("{}", report.to_csv());
        println!();
    }
}
