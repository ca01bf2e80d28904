//! Build per-epoch perturbation plans from class statistics under the three
//! split modes and print the per-class bounds.

use lpg::schedule::build_plan;
use lpg::{ClassStats, PlanConfig, SplitMode, Threshold};

fn main() -> lpg::Result<()> {
    let mut stats = ClassStats::new(vec![500, 300, 120, 40, 10]);
    stats.accuracy = vec![0.95, 0.9, 0.7, 0.4, 0.1];
    stats.variance = vec![0.05, 0.08, 0.2, 0.35, 0.3];
    for split in [SplitMode::Accuracy, SplitMode::Frequency, SplitMode::Variance] {
        let cfg = PlanConfig {
            split,
            epsilon: 0.1,
            delta_epsilon: 0.2,
            tau: Threshold::Median,
        };
        let plan = build_plan(&stats, &cfg)?;
        println!("{}: tau = {:.3}", split.as_str(), plan.tau_raw);
        for c in 0..plan.num_classes() {
            println!("  class {c}: {:?} eps_c = {:.4}", plan.membership[c], plan.eps_c[c]);
        }
        println!("  mean eps = {:.4}", plan.mean_epsilon(&stats.counts)?);
    }
    Ok(())
}
