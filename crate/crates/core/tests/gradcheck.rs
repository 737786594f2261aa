use avatar_core::field::FieldParams;
use avatar_core::gradcheck::{run, run_with, tiny_arch, GradCheckConfig};

#[test]
fn default_tiny_network_passes() {
    let report = run(&GradCheckConfig::default());
    println!("{}", report.to_text());
    assert!(report.passed());
    let (passed, compared) = report.totals("field.");
    assert!(passed as f64 >= 0.95 * compared as f64);
    for c in &report.components {
        assert!(c.compared > 0, "{} compared nothing", c.name);
    }
}

#[test]
fn report_lists_every_parameter_group() {
    let report = run(&GradCheckConfig { probes: 60, ..GradCheckConfig::default() });
    let params = FieldParams::<f64>::init(0, &tiny_arch()).unwrap();
    for (name, _) in params.layout().groups() {
        assert!(report.component(&format!("field.{name}")).is_some(), "missing field.{name}");
    }
    for name in [
        "field.shape",
        "field.inputs",
        "composite.color",
        "composite.density",
        "loss.density",
        "loss.normal",
        "loss.orientation",
        "loss.proposal",
        "loss.mask",
        "render.field",
        "render.shape",
        "render.lighting",
    ] {
        assert!(report.component(name).is_some(), "missing {name}");
    }
}

#[test]
fn sabotaged_backward_fails() {
    let cfg = GradCheckConfig { probes: 60, ..GradCheckConfig::default() };
    let report = run_with(&cfg, &mut |name, g| {
        if name == "render.lighting" {
            for v in g.iter_mut() {
                *v *= 1.1;
            }
        }
    });
    assert!(!report.passed());
    let failing: Vec<_> = report.components.iter().filter(|c| !c.ok).map(|c| c.name.as_str()).collect();
    assert_eq!(failing, ["render.lighting"]);

    let report = run_with(&cfg, &mut |name, g| {
        if name == "field.params" {
            g.iter_mut().for_each(|v| *v = -*v);
        }
    });
    assert!(report.components.iter().any(|c| c.name.starts_with("field.") && !c.ok));
    assert!(report.components.iter().filter(|c| !c.name.starts_with("field.")).all(|c| c.ok));
}

#[test]
fn seeds_are_reproducible() {
    let cfg = GradCheckConfig { probes: 40, seed: 3, ..GradCheckConfig::default() };
    assert_eq!(run(&cfg), run(&cfg));
}
