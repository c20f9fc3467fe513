use amn_browser::{run_demo, schedule, shape_plot, DemoOptions};
use amn_core::modular::UnitKind;

#[test]
fn schedule_rises_then_decays() {
    let lr = schedule(50, 0.02, 0.2).unwrap();
    let peak = lr.iter().cloned().fold(0.0, f64::max);
    assert_eq!(peak, 0.02);
    assert!(schedule(0, 0.02, 0.2).is_err());
}

#[test]
fn each_unit_kind_trains_and_plots() {
    for unit in [UnitKind::Anb, UnitKind::Linear, UnitKind::Exu] {
        let r = run_demo(&DemoOptions {
            length: 250,
            epochs: 1,
            grid: 8,
            unit,
            ..DemoOptions::default()
        })
        .unwrap();
        assert_eq!(r.val_curve.len(), r.epochs_run);
        assert!(r.test_loss.is_finite());
        let json = r.explanation.to_json().unwrap();
        for i in 0..r.explanation.shape_functions.len() {
            assert!(shape_plot(&json, i).unwrap().contains("</svg>"));
        }
    }
}
