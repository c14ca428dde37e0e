//! Alone in its binary: the store byte counters are process-wide.

mod common;

use common::{marker_data, small_config};
use minidisc::distiller::{sandwich_train, DistillConfig, Teacher};
use minidisc::ledger::TrialLedger;
use minidisc::model::{ParamStore, StructureMask};
use minidisc::pruner::{build_grid, RankMode};

#[test]
fn sandwich_training_holds_one_shared_store_regardless_of_grid_size() {
    let cfg = small_config(2, 4, 16, 32);
    let teacher = ParamStore::<f32>::init(&cfg, 1).unwrap();
    let full = StructureMask::full(&cfg);
    let data = marker_data(128, 2);
    let batches = vec![(0..32).collect::<Vec<_>>()];
    let mut optimizer_bytes = Vec::new();
    for n in [2, 5, 19] {
        let (grid, _) = build_grid(&teacher, &data, &batches, 0.05, n, RankMode::Global).unwrap();
        let mut shared = teacher.clone();
        let dcfg = DistillConfig {
            steps: 3,
            eta: 2,
            ..DistillConfig::default()
        };
        let mut ledger = TrialLedger::default();
        let report = sandwich_train(&mut shared, &grid, Teacher { store: &teacher, mask: &full }, None, &data, &dcfg, &mut ledger).unwrap();
        assert_eq!(report.peak_param_bytes, teacher.bytes() + shared.bytes(), "n = {n}");
        optimizer_bytes.push(report.optimizer_bytes);
    }
    assert!(optimizer_bytes.iter().all(|&b| b == optimizer_bytes[0]));
    assert_eq!(optimizer_bytes[0], 2 * teacher.bytes());
}
