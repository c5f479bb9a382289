use std::collections::HashMap;

use rationale_core::backend::{Responder, ScriptedFactory, ScriptedModel, StubDistribution};
use rationale_core::dualteacher::{Stage, StageManifest};
use rationale_core::text::Vocab;
use rationale_core::{run_dual_teacher, DualTeacherConfig, Example, PromptFormat, Role};

fn data() -> (Vec<Example>, Vec<Example>, Vec<Example>) {
    let d_l = vec![Example::new("l0 red", "A", "red means A"), Example::new("l1 blue", "B", "blue means B")];
    let d_u = (0..5).map(|i| Example::unlabeled(format!("u{i} thing"))).collect();
    let d_val = vec![Example::new("v0 red", "A", "red means A")];
    (d_l, d_u, d_val)
}

/// Predictor labels for the unlabeled inputs: u1 is mislabeled and u3 gets
/// no label at all.
fn predicted() -> Vec<(&'static str, &'static str)> {
    vec![("u0 thing", "A"), ("u1 thing", "B"), ("u2 thing", "A"), ("u3 thing", ""), ("u4 thing", "B")]
}

fn factory(fmt: &PromptFormat) -> ScriptedFactory {
    let mut p_table: HashMap<String, String> = predicted().into_iter().map(|(i, l)| (fmt.predictor_input(i), l.to_string())).collect();
    p_table.insert(fmt.predictor_input("v0 red"), "A".into());
    let mut r_table = HashMap::new();
    for (input, label) in predicted() {
        // u2 gets no explanation, so it cannot enter the joint training mix.
        let expl = if input.starts_with("u2") { String::new() } else { format!("because {label} fits {input}") };
        r_table.insert(fmt.rationalizer_input(input, label), expl);
    }
    let vocab = Vocab::build(["A B C D"]);
    ScriptedFactory::new(move |role, _, _| match role {
        Role::Predictor => ScriptedModel::new(
            role,
            Responder::Table {
                table: p_table.clone(),
                default: "A".into(),
            },
        )
        .with_vocab(vocab.clone())
        .with_distribution(StubDistribution::Uniform),
        Role::Rationalizer => ScriptedModel::new(
            role,
            Responder::Table {
                table: r_table.clone(),
                default: "red means A".into(),
            },
        ),
        Role::Joint => ScriptedModel::new(role, Responder::Constant("A explanation: red means A".into())).memorizing(),
    })
}

fn config(dir: Option<&std::path::Path>) -> DualTeacherConfig {
    let mut cfg = DualTeacherConfig::new(7);
    cfg.predictor.max_iterations = 3;
    cfg.rationalizer.max_iterations = 3;
    cfg.artifact_dir = dir.map(|d| d.to_path_buf());
    cfg
}

#[test]
fn stages_run_in_order_and_build_the_expected_mix() {
    let fmt = PromptFormat::default();
    let (d_l, d_u, d_val) = data();
    let f = factory(&fmt);
    let tmp = tempfile::tempdir().unwrap();
    let r = run_dual_teacher(&f, &d_l, &d_u, &d_val, &fmt, &config(Some(tmp.path()))).unwrap();

    assert_eq!(
        r.events,
        vec![Stage::PredictorSelfTrain, Stage::PredictPseudo, Stage::RationalizerSelfTrain, Stage::RationalizePseudo, Stage::JointTrain]
    );

    // Two labeled records plus u0, u1 and u4.
    assert_eq!(r.d_final_size, 5);
    let by_input: HashMap<&str, _> = r.pseudo_labels.iter().map(|p| (p.input_text.as_str(), p)).collect();
    assert!(!by_input.contains_key("u2 thing") && !by_input.contains_key("u3 thing"));
    assert_eq!(r.d_final_size, r.pseudo_labels.len() + d_l.len());
    // The rationalizer explains the predictor's label, not the gold one.
    assert_eq!(by_input["u1 thing"].pseudo_label, "B");
    assert_eq!(by_input["u1 thing"].pseudo_explanation, "because B fits u1 thing");
    // Joint confidence is the product of a uniform predictor (1/|V| per
    // token) and a one-hot rationalizer.
    let v = Vocab::build(["A B C D"]).len() as f64;
    for p in &r.pseudo_labels {
        assert!((p.confidence - 1.0 / v).abs() < 1e-9, "{} has confidence {}", p.input_text, p.confidence);
    }

    let events = f.events.events();
    let pos = |needle: &str| events.iter().position(|e| e == needle).unwrap_or_else(|| panic!("missing {needle}"));
    let last = |prefix: &str| events.iter().rposition(|e| e.starts_with(prefix)).unwrap();
    let first = |prefix: &str| events.iter().position(|e| e.starts_with(prefix)).unwrap();
    assert!(last("generate:predictor") < first("create:rationalizer"));
    assert!(last("generate:rationalizer") < pos("create:joint:0"));
    assert!(events.iter().any(|e| e == "train_step:joint:0"));
    assert_eq!(events.iter().filter(|e| e.starts_with("create:joint")).count(), 1);

    let manifest: StageManifest = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("stages.json")).unwrap()).unwrap();
    let names: Vec<&str> = manifest.stages.iter().map(|s| s.stage.as_str()).collect();
    assert_eq!(names, ["predictor-ST", "predict-pseudo", "rationalizer-ST", "rationalize-pseudo", "joint-train"]);
    assert_eq!(manifest.data_digests.len(), 3);
}

#[test]
fn identical_inputs_give_identical_runs() {
    let fmt = PromptFormat::default();
    let (d_l, d_u, d_val) = data();
    let a = run_dual_teacher(&factory(&fmt), &d_l, &d_u, &d_val, &fmt, &config(None)).unwrap();
    let b = run_dual_teacher(&factory(&fmt), &d_l, &d_u, &d_val, &fmt, &config(None)).unwrap();
    assert_eq!(a.pseudo_labels, b.pseudo_labels);
    assert_eq!(a.d_final_size, b.d_final_size);
}

#[test]
fn unlabeled_gold_set_is_rejected() {
    let fmt = PromptFormat::default();
    let (mut d_l, d_u, d_val) = data();
    d_l.push(Example::unlabeled("oops"));
    assert!(run_dual_teacher(&factory(&fmt), &d_l, &d_u, &d_val, &fmt, &config(None)).is_err());
}
