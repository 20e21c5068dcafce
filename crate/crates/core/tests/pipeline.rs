use qmri::acquisition::MaskPattern;
use qmri::eval::{emit_figures, load_cell_maps, load_ground_truth, nrmse, run_experiment, ExperimentConfig, Method, MetricsTable};
use qmri::lorein::TrainConfig;
use qmri::MapKind;

fn small_config(dir: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.phantom.shape = [16, 16, 8];
    cfg.phantom.n_coils = 2;
    cfg.mask.r = vec![1.0];
    cfg.mask.pattern = MaskPattern::Full;
    cfg.noise_sigma = 0.0;
    cfg.methods = vec![Method::ZeroFilled];
    cfg.output_dir = dir.to_path_buf();
    cfg
}

#[test]
fn noiseless_full_sampling_recovers_maps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let report = run_experiment(&cfg).unwrap();
    assert!(report.succeeded(), "{:?}", report.failures);
    let t1 = report.table.get(Method::ZeroFilled, 1.0, MapKind::T1).unwrap();
    let t2s = report.table.get(Method::ZeroFilled, 1.0, MapKind::T2s).unwrap();
    assert!(t1 < 5e-3 && t2s < 5e-3, "t1 {t1}, t2s {t2s}");

    // stored artifacts re-score to the reported values
    let (truth, mask) = load_ground_truth(dir.path(), &cfg.protocol).unwrap();
    for row in &report.table.rows {
        let maps = load_cell_maps(dir.path(), row.method, row.r, &[row.map]).unwrap();
        let again = nrmse(maps.require(row.map).unwrap(), truth.require(row.map).unwrap(), cfg.clamp(row.map), &mask).unwrap();
        assert!((again - row.nrmse).abs() <= 1e-9);
    }

    let figures = emit_figures(dir.path()).unwrap();
    assert_eq!(figures.len(), cfg.protocol.required_maps().len());
    assert!(std::fs::read_to_string(&figures[0]).unwrap().contains("data:image/png;base64,"));
}

#[test]
fn identical_runs_give_identical_tables() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut cfg = small_config(a.path());
    cfg.mask.r = vec![4.0];
    cfg.mask.pattern = MaskPattern::VariableDensity;
    cfg.noise_sigma = 0.005;
    cfg.methods = vec![Method::Lorein, Method::ZeroFilled];
    cfg.lorein = TrainConfig { pretrain_epochs: 2, epochs: 3, ..TrainConfig::dataset1() };
    run_experiment(&cfg).unwrap();
    cfg.output_dir = b.path().to_path_buf();
    run_experiment(&cfg).unwrap();
    let first = std::fs::read(a.path().join("metrics.csv")).unwrap();
    assert_eq!(first, std::fs::read(b.path().join("metrics.csv")).unwrap());
    let table = MetricsTable::from_csv(std::str::from_utf8(&first).unwrap()).unwrap();
    assert_eq!(table.rows.len(), 2 * cfg.protocol.required_maps().len());
}

#[test]
fn failing_cell_does_not_stop_others() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.methods = vec![Method::Lorein, Method::ZeroFilled];
    // a step size this large sends the relaxation fields to infinity
    cfg.lorein = TrainConfig { pretrain_epochs: 1, epochs: 3, learning_rate: 1e12, ..TrainConfig::dataset1() };
    let report = run_experiment(&cfg).unwrap();
    assert!(!report.succeeded());
    assert_eq!(report.failures.len(), 1);
    assert_eq!(report.failures[0].method, Method::Lorein);
    assert!(report.failures[0].message.contains("diverged"), "{}", report.failures[0].message);
    assert!(report.table.get(Method::ZeroFilled, 1.0, MapKind::T1).is_some());
}
