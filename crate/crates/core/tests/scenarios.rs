//! Scripted end-to-end runs over the bundled fixtures, checked against
//! hand-traced expectations.

use std::path::PathBuf;
use std::sync::Arc;

use chemau_core::controller::{Controller, ControllerConfig, IterationTrace, Mode};
use chemau_core::estimators::HeuristicWeights;
use chemau_core::gateway::mock::MockBackend;
use chemau_core::gateway::ModelRole;
use chemau_core::harness::compare::{compare_estimators, CompareCase, ThetaSweep};
use chemau_core::harness::{load_dataset, run_eval, EvalOptions, QuestionRecord, TraceDocument};
use chemau_core::knowledge::{DecompositionPath, Verdict};
use chemau_core::templates::PromptTemplates;
use chemau_core::{Answer, Backends, EstimatorKind};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn mock(set: &str) -> Arc<MockBackend> {
    Arc::new(MockBackend::from_path(fixture(&format!("{set}.script.json"))).unwrap())
}

fn dataset(set: &str) -> Vec<QuestionRecord> {
    load_dataset(fixture(&format!("{set}.jsonl"))).unwrap()
}

fn run_set(set: &str, config: &ControllerConfig) -> (Vec<TraceDocument>, Arc<MockBackend>) {
    let m = mock(set);
    let backends = Backends::shared(m.clone());
    let templates = PromptTemplates::default();
    let opts = EvalOptions {
        workers: 4,
        templates: &templates,
        weights: &HeuristicWeights,
    };
    let run = run_eval(&dataset(set), config, &backends, &opts).unwrap();
    (run.traces, m)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-9
}

fn score(it: &IterationTrace, step: usize) -> Option<f64> {
    it.steps[step - 1].score
}

#[test]
fn ferrocyanide_correction_traced_step_by_step() {
    let m = mock("formula-fix");
    let backends = Backends::shared(m.clone());
    let config = ControllerConfig::default();
    let templates = PromptTemplates::default();
    let q = &dataset("formula-fix")[0];
    let outcome = Controller {
        config: &config,
        backends: &backends,
        templates: &templates,
        weights: &HeuristicWeights,
    }
    .run(&q.question, &q.options)
    .unwrap();

    assert_eq!(outcome.final_answer, Answer::Letter('B'));
    assert_eq!(outcome.iterations_used, 2);
    assert!(outcome.warnings.is_empty());

    let first = &outcome.per_iteration_traces[0];
    assert_eq!(first.chain_len, 3);
    assert_eq!(first.positional_len, 3);
    assert_eq!(first.first_scored, 1);
    assert!(first.confirmed_before.is_empty());
    // -ln 0.24 + 0.08 * (3 - 1)
    assert!(close(score(first, 1).unwrap(), -(0.24f64).ln() + 0.16));
    assert!(close(score(first, 2).unwrap(), -(0.97f64).ln() + 0.08));
    assert!(close(score(first, 3).unwrap(), -(0.97f64).ln()));
    assert_eq!(first.flagged_step, Some(1));
    assert_eq!(first.answer, Answer::Letter('A'));
    // Max(-log p) alone would not have fired on step 1.
    assert!(first.steps[0].readout.unwrap().maxnlp < 1.5);

    let bridge = first.bridge.as_ref().unwrap();
    let decomposition = bridge.decomposition.as_ref().unwrap();
    assert_eq!(decomposition.path, DecompositionPath::Model);
    assert_eq!(
        decomposition.claims,
        ["Potassium ferrocyanide has the formula K3[Fe(CN)6]."]
    );
    assert_eq!(bridge.units.len(), 1);
    assert_eq!(bridge.units[0].verdict, Verdict::Inaccurate);
    assert_eq!(bridge.units[0].correction, "Potassium ferrocyanide is K4[Fe(CN)6].");
    let block = bridge.block.as_ref().unwrap();
    assert_eq!(block.entries.len(), 1);
    assert_eq!(block.entries[0].text, "Potassium ferrocyanide is K4[Fe(CN)6].");

    let second = &outcome.per_iteration_traces[1];
    assert!(second.confirmed_before.is_empty());
    let user = &second.prompt.last().unwrap().content;
    assert!(user.contains("Initial Reasoning Steps:\n(none)"));
    assert!(user.contains("Knowledge:\n- Potassium ferrocyanide is K4[Fe(CN)6]."));
    assert_eq!(second.flagged_step, None);
    assert!(second.steps.iter().all(|s| !s.flagged));
    assert_eq!(outcome.final_chain.steps[0].text, "The formula of potassium ferrocyanide is K4[Fe(CN)6].");

    let roles: Vec<ModelRole> = m.calls().iter().map(|c| c.role).collect();
    assert_eq!(
        roles,
        [ModelRole::General, ModelRole::General, ModelRole::Domain, ModelRole::General]
    );
}

#[test]
fn fixture_set_baseline_versus_full() {
    let (base, _) = run_set("formula-fix", &ControllerConfig::default().with_mode(Mode::Baseline));
    let (full, _) = run_set("formula-fix", &ControllerConfig::default());
    assert!(base.iter().all(|t| !t.correct && t.iterations_used == 1));
    assert!(full.iter().all(|t| t.correct && t.iterations_used == 2));
}

#[test]
fn confirmed_prefix_carried_into_regeneration() {
    let (traces, _) = run_set("ablation", &ControllerConfig::default());
    let t = traces.iter().find(|t| t.question_id == "sodium-chloride-mass").unwrap();
    let first = &t.iterations[0];
    assert_eq!(first.flagged_step, Some(2));
    assert!(!first.steps[0].flagged);
    assert!(close(score(first, 2).unwrap(), -(0.1f64).ln()));

    let second = &t.iterations[1];
    let prefix = "The molar mass of sodium chloride (NaCl) is 58.44 g/mol.";
    assert_eq!(second.confirmed_before, [prefix]);
    assert_eq!(second.first_scored, 2);
    assert_eq!(score(second, 1), None);
    assert!(score(second, 2).is_some());
    let user = &second.prompt.last().unwrap().content;
    let steps_at = user.find(&format!("-- {prefix}")).unwrap();
    assert!(steps_at < user.find("Knowledge:").unwrap());
    assert_eq!(t.final_answer, Answer::Letter('B'));
}

#[test]
fn ablation_modes() {
    let expected = [
        (Mode::Full, 3),
        (Mode::NoDomain, 1),
        (Mode::ChainLevel, 2),
        (Mode::Baseline, 0),
    ];
    for (mode, correct) in expected {
        let (traces, _) = run_set("ablation", &ControllerConfig::default().with_mode(mode));
        let got = traces.iter().filter(|t| t.correct).count();
        assert_eq!(got, correct, "{mode}");
        assert!(traces.iter().all(|t| t.error.is_none()), "{mode}");
    }
}

#[test]
fn no_domain_uses_error_notice() {
    let (traces, m) = run_set("ablation", &ControllerConfig::default().with_mode(Mode::NoDomain));
    assert!(m.calls().iter().all(|c| c.role == ModelRole::General));
    let t = &traces[1];
    let bridge = t.iterations[0].bridge.as_ref().unwrap();
    assert!(bridge.block.is_none());
    let notice = bridge.notice.as_ref().unwrap();
    assert!(notice.contains("Step 2"));
    let user = &t.iterations[1].prompt.last().unwrap().content;
    assert!(user.contains("Potential Error:\n- Step 2"));
    assert!(!user.contains("Knowledge:"));
}

#[test]
fn chain_level_scores_whole_response_once() {
    let (traces, _) = run_set("ablation", &ControllerConfig::default().with_mode(Mode::ChainLevel));
    for t in &traces {
        let it = &t.iterations[0];
        assert_eq!(it.steps.len(), 1);
        assert_eq!(it.positional_len, 1);
        let readout = it.steps[0].readout.unwrap();
        assert_eq!(readout.adaptive, readout.maxnlp);
        assert!(t.iterations.len() <= 2);
    }
    // calcium hydroxide's formula slip sits below θ without the positional term
    assert_eq!(traces[0].iterations.len(), 1);
    assert_eq!(traces[2].iterations.len(), 2);
}

#[test]
fn oscillation_terminates() {
    for max_iterations in 1..=6 {
        for stuck_step_limit in 1..=4 {
            let config = ControllerConfig {
                max_iterations,
                stuck_step_limit,
                ..ControllerConfig::default()
            };
            let (traces, m) = run_set("oscillating", &config);
            let t = &traces[0];
            assert!(t.error.is_none());
            assert!(t.iterations_used <= max_iterations);
            let generations = m
                .calls()
                .iter()
                .filter(|c| c.role == ModelRole::General && !c.prompt.contains("Decompose the following"))
                .count();
            assert!(generations as u32 <= max_iterations);
            assert!(matches!(t.final_answer, Answer::Letter(_) | Answer::Unparsed));
        }
    }
    let (traces, _) = run_set("oscillating", &ControllerConfig::default());
    assert!(traces[0].warnings.iter().any(|w| w.contains("stuck")));
}

#[test]
fn nothing_flags_means_baseline_output() {
    for set in ["formula-fix", "ablation"] {
        for q in dataset(set) {
            let run = |mode| {
                let backends = Backends::shared(mock(set));
                let mut config = ControllerConfig::default().with_mode(mode);
                config.estimator.theta = 1e9;
                let templates = PromptTemplates::default();
                let outcome = Controller {
                    config: &config,
                    backends: &backends,
                    templates: &templates,
                    weights: &HeuristicWeights,
                }
                .run(&q.question, &q.options)
                .unwrap();
                serde_json::to_string(&outcome).unwrap()
            };
            assert_eq!(run(Mode::Full), run(Mode::Baseline), "{}", q.id);
        }
    }
}

#[test]
fn traces_round_trip_and_feed_compare() {
    let (traces, _) = run_set("ablation", &ControllerConfig::default());
    for t in &traces {
        let json = t.to_json();
        let back = TraceDocument::from_json(&json).unwrap();
        assert_eq!(&back, t);
        assert_eq!(back.to_json(), json);
    }
    let cases: Vec<CompareCase> = traces.iter().map(|t| CompareCase::from_trace(t).unwrap()).collect();
    let cmp = compare_estimators(&cases, 0.08, &ThetaSweep::single(1.5)).unwrap();
    assert_eq!(cmp.steps.len(), 3 + 2 + 2);
    // the calcium hydroxide step is the one only the adaptive score flags
    let ca = &cmp.steps[0];
    assert!(ca.flags[&EstimatorKind::Adaptive][0]);
    assert!(!ca.flags[&EstimatorKind::MaxNegLogprob][0]);

    let mut stripped = traces[0].clone();
    stripped.iterations[0].steps[0].token_probs.clear();
    assert!(CompareCase::from_trace(&stripped).is_err());
}

#[test]
fn backend_failure_keeps_partial_trace() {
    // the script has no regeneration turn for this question
    let script = r#"{"schema":"mock-script/1","turns":[
        {"role":"general","unless":"Decompose","segments":[
            {"text":"-- Iron rusts as ","prob":0.97},{"text":"FeO","prob":0.05},{"text":".\nAnswer: (A)","prob":0.97}]},
        {"role":"general","match":"Decompose","text":"Rust is FeO.","prob":0.9},
        {"role":"domain","text":"Incorrect. Rust is mainly Fe2O3.","prob":0.9}]}"#;
    let backends = Backends::shared(Arc::new(MockBackend::from_script_str(script).unwrap()));
    let q = QuestionRecord::new("rust", "What is rust?", &[('A', "FeO"), ('B', "Fe2O3")], 'B');
    let templates = PromptTemplates::default();
    let opts = EvalOptions {
        workers: 1,
        templates: &templates,
        weights: &HeuristicWeights,
    };
    let run = run_eval(&[q], &ControllerConfig::default(), &backends, &opts).unwrap();
    let t = &run.traces[0];
    assert_eq!(t.final_answer, Answer::Unparsed);
    assert_eq!(t.iterations.len(), 1);
    assert!(t.error.as_deref().unwrap().contains("underrun"));
    assert_eq!(run.summary.unparsed, 1);
    assert_eq!(run.summary.failures, 1);
}
