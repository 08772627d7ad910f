mod common;

use common::small_config;
use ecacl::experiment::{ablate, final_accuracies, over_split_seeds, sweep, SweepParam};

#[test]
fn results_do_not_depend_on_job_count() {
    let configs = over_split_seeds(&small_config(), &[0, 1, 2]);
    let one = final_accuracies(&configs, 1).unwrap();
    let three = final_accuracies(&configs, 3).unwrap();
    assert_eq!(one, three);
    assert!(one.iter().all(|a| (0.0..=1.0).contains(a)));
}

#[test]
fn ablation_report_has_baseline_and_eight_rows() {
    let r = ablate(&small_config(), &[0, 1], 2).unwrap();
    assert_eq!(r.rows.len(), 8);
    assert_eq!(r.baseline.per_seed.len(), 2);
    let table = r.table();
    assert_eq!(table.lines().count(), 10);
    assert!(table.contains("CA x SA x CONA x"));
}

#[test]
fn sweep_reports_one_point_per_value() {
    let r = sweep(&small_config(), SweepParam::Sigma, &[0.5, 0.9], &[0], 1).unwrap();
    assert_eq!(r.points.len(), 2);
    assert!(r.spread() >= 0.0);
    assert!(sweep(&small_config(), SweepParam::Sigma, &[1.5], &[0], 1).is_err());
}
