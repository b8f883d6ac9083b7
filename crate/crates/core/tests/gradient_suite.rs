use csts_core::autograd::{set_gradient_sabotage, OP_NAMES};
use csts_core::gradsuite::{module_of, run_model_cases, run_op_cases, run_suite};
use csts_core::model::ModelConfig;

#[test]
fn desk_model_passes_at_1e_4() {
    let report = run_suite(&ModelConfig::desk(), 0, 2).unwrap();
    let bad = report.failures(1e-4);
    assert!(bad.is_empty(), "{bad:#?}");
    let modules: Vec<&str> = report.worst_by_module().iter().map(|c| c.module.as_str()).collect();
    for m in ["ops", "video", "audio", "fusion.spatial", "fusion.temporal", "decoder", "contrast"] {
        assert!(modules.contains(&m), "{m} missing from {modules:?}");
    }
    // zero tolerance is unsatisfiable
    assert!(!report.failures(0.0).is_empty());
}

#[test]
fn op_cases_cover_every_tape_op() {
    let names: Vec<String> = run_op_cases(1e-5).unwrap().into_iter().map(|c| c.name).collect();
    for op in OP_NAMES {
        assert!(names.iter().any(|n| n == op), "no case for {op}");
    }
}

#[test]
fn sabotaged_op_is_named() {
    for op in ["softmax_last", "matmul", "layer_norm", "resize_linear"] {
        set_gradient_sabotage(Some(op));
        let cases = run_op_cases(1e-5).unwrap();
        set_gradient_sabotage(None);
        let failing: Vec<&str> = cases.iter().filter(|c| !(c.max_rel_error < 1e-4)).map(|c| c.name.as_str()).collect();
        assert!(failing.contains(&op), "{op}: {failing:?}");
    }
}

#[test]
fn sabotage_shows_up_in_model_parameters() {
    set_gradient_sabotage(Some("gelu"));
    let cases = run_model_cases(&ModelConfig::desk(), 1, 1, 1e-5).unwrap();
    set_gradient_sabotage(None);
    assert!(cases.iter().any(|c| c.max_rel_error > 1e-4));
}

#[test]
fn module_names() {
    assert_eq!(module_of("fusion.spatial.block.attn.q.weight"), "fusion.spatial");
    assert_eq!(module_of("fusion.fc1.weight"), "fusion");
    assert_eq!(module_of("video.s0.b0.norm1.gamma"), "video");
}
