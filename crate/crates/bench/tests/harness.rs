use std::fs;

use zolab_bench::grid::{cell_config, CellResult, GRID_CSV};
use zolab_bench::runner::{read_steps_csv, read_summary, STEPS_CSV, SUMMARY_JSON};
use zolab_bench::{compare_grid, run_experiment, ConfigMap, Outcome, RunConfig, Totals};
use zolab_core::footprint::OptimizerFamily;

fn base(steps: usize) -> RunConfig {
    let mut map = ConfigMap::new();
    map.set("train.steps", steps.to_string()).unwrap();
    map.build().unwrap()
}

const FAMILIES: [OptimizerFamily; 3] = [OptimizerFamily::Mezo, OptimizerFamily::Adam, OptimizerFamily::Sgd];

#[test]
fn grid_cells_match_standalone_runs() {
    for parallel in [false, true] {
        let grid = compare_grid(&base(2), &FAMILIES, &[2, 8], parallel).unwrap();
        assert_eq!(grid.cells.len(), 6);
        for cell in &grid.cells {
            let alone = run_experiment(&cell_config(&base(2), cell.optimizer, cell.batch_size, None)).unwrap();
            match &cell.result {
                CellResult::Fits { peak, final_loss, .. } => {
                    assert_eq!(*peak, alone.totals.peak, "{:?} B={}", cell.optimizer, cell.batch_size);
                    assert_eq!(Some(*final_loss), alone.totals.final_loss);
                }
                other => panic!("unexpected cell {other:?}"),
            }
        }
    }
}

#[test]
fn grid_records_errors_and_keeps_going() {
    // 512 rows cannot fill a batch of 1024, so that column errors while B=2 runs
    let grid = compare_grid(&base(1), &[OptimizerFamily::Mezo], &[1024, 2], false).unwrap();
    assert!(matches!(grid.cells[0].result, CellResult::Error { .. }));
    assert!(matches!(grid.cells[1].result, CellResult::Fits { .. }));
}

#[test]
fn oom_cells_carry_no_memory_figures() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = base(2);
    cfg.budget_bytes = Some(3_500_000);
    cfg.out_dir = Some(dir.path().to_path_buf());
    let grid = compare_grid(&cfg, &[OptimizerFamily::Adam], &[8], false).unwrap();
    let CellResult::Oom { step } = grid.cells[0].result else { panic!("{:?}", grid.cells[0].result) };
    let text = fs::read_to_string(dir.path().join(GRID_CSV)).unwrap();
    let row = text.lines().nth(1).unwrap();
    assert_eq!(row, format!("adam,8,OOM,OOM,OOM,OOM,OOM,OOM,OOM,OOM,OOM,{step},"));
}

#[test]
fn reports_are_deterministic_and_self_consistent() {
    let dir = tempfile::tempdir().unwrap();
    for family in FAMILIES {
        let mut runs = Vec::new();
        for i in 0..2 {
            let mut cfg = base(3).with_family(family);
            cfg.out_dir = Some(dir.path().join(format!("{family}{i}")));
            let report = run_experiment(&cfg).unwrap();
            assert_eq!(report.outcome, Outcome::Ok);
            let steps = read_steps_csv(&dir.path().join(format!("{family}{i}")).join(STEPS_CSV)).unwrap();
            let summary = read_summary(&dir.path().join(format!("{family}{i}")).join(SUMMARY_JSON)).unwrap();
            assert_eq!(summary.totals, Totals::from_steps(&steps));
            assert_eq!(summary.totals, report.totals);
            runs.push(steps);
        }
        for (a, b) in runs[0].iter().zip(&runs[1]) {
            assert_eq!(
                (a.step, a.loss.to_bits(), a.loss_evaluations, a.peak),
                (b.step, b.loss.to_bits(), b.loss_evaluations, b.peak)
            );
        }
    }
}

#[test]
fn trains_on_csv_data() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.csv");
    let mut text = String::from("text,label\n");
    for i in 0..16 {
        text.push_str(&format!("\"sample {i} {}\",{}\n", if i % 2 == 1 { "great" } else { "awful" }, i % 2));
    }
    fs::write(&path, text).unwrap();
    let mut map = ConfigMap::new();
    for (k, v) in [
        ("data.csv", path.to_str().unwrap()),
        ("opt.kind", "adam"),
        ("opt.lr", "1e-3"),
        ("train.batch_size", "16"),
        ("train.steps", "20"),
    ] {
        map.set(k, v).unwrap();
    }
    let report = run_experiment(&map.build().unwrap()).unwrap();
    assert_eq!(report.outcome, Outcome::Ok);
    let (first, last) = (report.totals.initial_loss.unwrap(), report.totals.final_loss.unwrap());
    assert!(last < first, "{first} -> {last}");
}
