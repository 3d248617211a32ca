//! Per-question orchestration: generate a chain, score its steps in order,
//! bridge knowledge for the earliest flagged step, and regenerate from the
//! confirmed prefix until the chain comes back clean or the budget runs out.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{
    extract_answer, parse_chain, render_step, Answer, ChainError, ReasoningChain,
};
use crate::estimators::{
    self, canonical_score, clamped_count, EstimatorError, EstimatorKind, EstimatorReadout,
    HeuristicWeights, StepScore, WeightProvider,
};
use crate::gateway::{
    ChatMessage, GatewayError, ModelBackend, ModelResponse, ModelRole, SamplingConfig,
};
use crate::knowledge::{
    consolidate, extract_atomic_units, verify_and_correct, Decomposition, DecompositionStrategy,
    KnowledgeBlock, KnowledgeUnit,
};
use crate::templates::{fill, PromptTemplates};
use crate::EstimatorConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Step-wise detection with domain-model knowledge.
    Full,
    /// Single generation, no intervention.
    Baseline,
    /// Step-wise detection, regeneration guided only by an error notice.
    NoDomain,
    /// Whole chain scored and corrected as one unit.
    ChainLevel,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Full, Mode::Baseline, Mode::NoDomain, Mode::ChainLevel];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::Baseline => "baseline",
            Mode::NoDomain => "no-domain",
            Mode::ChainLevel => "chain-level",
        }
    }

    pub fn needs_domain(&self) -> bool {
        matches!(self, Mode::Full | Mode::ChainLevel)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s || m.as_str().replace('-', "_") == s)
            .ok_or_else(|| format!("unknown mode {s:?} (baseline|full|no-domain|chain-level)"))
    }
}

/// Which chain length the positional term uses after regeneration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChainLengthBasis {
    /// Length of the chain being scored.
    #[default]
    Current,
    /// Length of the first chain generated for the question.
    Initial,
}

impl FromStr for ChainLengthBasis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "current" => Ok(Self::Current),
            "initial" => Ok(Self::Initial),
            _ => Err(format!("unknown chain length basis {s:?} (current|initial)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub estimator: EstimatorConfig,
    pub max_iterations: u32,
    pub mode: Mode,
    pub stuck_step_limit: u32,
    #[serde(default)]
    pub chain_length_basis: ChainLengthBasis,
    #[serde(default)]
    pub decomposition: DecompositionStrategy,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            estimator: EstimatorConfig::default(),
            max_iterations: 5,
            mode: Mode::Full,
            stuck_step_limit: 2,
            chain_length_basis: ChainLengthBasis::Current,
            decomposition: DecompositionStrategy::Model,
        }
    }
}

impl ControllerConfig {
    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<(), ControllerError> {
        if self.max_iterations < 1 {
            return Err(ControllerError::Precondition("max_iterations must be >= 1".into()));
        }
        if self.stuck_step_limit < 1 {
            return Err(ControllerError::Precondition("stuck_step_limit must be >= 1".into()));
        }
        self.estimator.validate()?;
        Ok(())
    }
}

#[derive(Clone)]
pub struct Backends {
    pub general: Arc<dyn ModelBackend>,
    pub domain: Option<Arc<dyn ModelBackend>>,
}

impl Backends {
    pub fn new(general: Arc<dyn ModelBackend>, domain: Option<Arc<dyn ModelBackend>>) -> Self {
        Self { general, domain }
    }

    /// One backend serving both roles (typically a mock script).
    pub fn shared(backend: Arc<dyn ModelBackend>) -> Self {
        Self {
            general: backend.clone(),
            domain: Some(backend),
        }
    }

    pub fn is_scripted(&self) -> bool {
        self.general.is_scripted() || self.domain.as_ref().is_some_and(|d| d.is_scripted())
    }
}

impl fmt::Debug for Backends {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Backends")
            .field("general", &self.general.name())
            .field("domain", &self.domain.as_ref().map(|d| d.name().to_string()))
            .finish()
    }
}

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("{mode} mode needs a domain backend")]
    MissingDomain { mode: Mode },
    #[error("backend failure: {0}")]
    Backend(#[from] GatewayError),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

/// Labeled multiple-choice options in display order.
pub type Options = BTreeMap<char, String>;

fn render_options(options: &Options) -> String {
    options
        .iter()
        .map(|(k, v)| format!("({k}) {v}"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn assemble(system: String, user: String, system_role: bool) -> Vec<ChatMessage> {
    if system_role {
        vec![ChatMessage::system(system), ChatMessage::user(user)]
    } else {
        vec![ChatMessage::user(format!("{system}\n\n{user}"))]
    }
}

pub fn build_initial_prompt(
    question: &str,
    options: &Options,
    system_role: bool,
    templates: &PromptTemplates,
) -> Result<Vec<ChatMessage>, ControllerError> {
    if options.is_empty() {
        return Err(ControllerError::Precondition("options must not be empty".into()));
    }
    let user = fill(
        &templates.question,
        &[("question", question), ("options", &render_options(options))],
    );
    Ok(assemble(templates.initial_system.clone(), user, system_role))
}

/// What the regeneration prompt carries besides the confirmed steps.
#[derive(Debug, Clone, Copy)]
pub enum Guidance<'a> {
    /// Knowledge blocks from every bridging pass, oldest first.
    Knowledge(&'a [KnowledgeBlock]),
    /// Potential-error notices, oldest first.
    ErrorNotices(&'a [String]),
}

pub fn render_guidance(guidance: Guidance<'_>) -> String {
    match guidance {
        Guidance::Knowledge(blocks) => {
            let lines: Vec<String> = blocks
                .iter()
                .flat_map(|b| b.entries.iter().map(|e| format!("- {}", e.text)))
                .collect();
            format!("Knowledge:\n{}", lines.join("\n"))
        }
        Guidance::ErrorNotices(notices) => {
            let lines: Vec<String> = notices.iter().map(|n| format!("- {n}")).collect();
            format!("Potential Error:\n{}", lines.join("\n"))
        }
    }
}

pub fn error_notice(step_index: usize, step_text: &str) -> String {
    format!("Step {step_index} may contain an error: \"{step_text}\"")
}

pub fn build_regeneration_prompt(
    question: &str,
    options: &Options,
    confirmed_steps: &[String],
    guidance: Guidance<'_>,
    system_role: bool,
    templates: &PromptTemplates,
) -> Result<Vec<ChatMessage>, ControllerError> {
    if options.is_empty() {
        return Err(ControllerError::Precondition("options must not be empty".into()));
    }
    let system = match guidance {
        Guidance::Knowledge(blocks) => {
            if blocks.iter().all(|b| b.is_empty()) {
                return Err(ControllerError::Precondition(
                    "regeneration needs at least one knowledge entry".into(),
                ));
            }
            templates.regenerate_system.clone()
        }
        Guidance::ErrorNotices(_) => templates.reflect_system.clone(),
    };
    let steps = if confirmed_steps.is_empty() {
        "(none)".to_string()
    } else {
        confirmed_steps
            .iter()
            .map(|s| render_step(s))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let user = fill(
        &templates.regenerate_user,
        &[
            ("question", question),
            ("options", &render_options(options)),
            ("steps", &steps),
            ("guidance", &render_guidance(guidance)),
        ],
    );
    Ok(assemble(system, user, system_role))
}

/// Smallest step index with `flagged` set.
pub fn detect_first_flagged<T>(scores: &[StepScore<T>]) -> Option<usize> {
    scores.iter().find(|s| s.flagged).map(|s| s.step_index)
}

/// Per-question loop state.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub confirmed_steps: Vec<String>,
    pub knowledge: Vec<KnowledgeBlock>,
    pub notices: Vec<String>,
    pub iteration: u32,
    /// Times each step text has been flagged.
    pub flag_history: BTreeMap<String, u32>,
    pub initial_chain_len: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub index: usize,
    pub text: String,
    pub token_texts: Vec<String>,
    pub token_probs: Vec<f64>,
    /// Tokens whose probability was raised to the floor before the log.
    pub clamped_tokens: usize,
    /// Every estimator, canonical orientation. Absent for a step without tokens.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub readout: Option<EstimatorReadout<f64>>,
    /// Active estimator value in the configured orientation, when the step
    /// was part of this pass's scoring window.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default)]
    pub flagged: bool,
    /// The step was flagged but accepted after repeated flags.
    #[serde(default)]
    pub stuck_accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeTrace {
    pub step_index: usize,
    pub decomposition: Option<Decomposition>,
    pub units: Vec<KnowledgeUnit>,
    pub block: Option<KnowledgeBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notice: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iteration: u32,
    pub prompt: Vec<ChatMessage>,
    pub raw_text: String,
    pub structured: bool,
    pub chain_len: usize,
    /// L_R used for the positional term.
    pub positional_len: usize,
    /// One-based index of the first step scored in this pass.
    pub first_scored: usize,
    pub confirmed_before: Vec<String>,
    pub steps: Vec<StepTrace>,
    pub flagged_step: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bridge: Option<BridgeTrace>,
    pub answer: Answer,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionOutcome {
    pub final_answer: Answer,
    pub iterations_used: u32,
    pub final_chain: ReasoningChain,
    pub per_iteration_traces: Vec<IterationTrace>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Error)]
#[error("{error}")]
pub struct QuestionFailure {
    #[source]
    pub error: ControllerError,
    /// Iterations completed before the failure.
    pub partial: Vec<IterationTrace>,
}

/// Runs questions against one set of backends.
pub struct Controller<'a> {
    pub config: &'a ControllerConfig,
    pub backends: &'a Backends,
    pub templates: &'a PromptTemplates,
    pub weights: &'a dyn WeightProvider,
}

/// Convenience wrapper with default templates and heuristic SCW weights.
pub fn run_question(
    question: &str,
    options: &Options,
    config: &ControllerConfig,
    backends: &Backends,
) -> Result<QuestionOutcome, QuestionFailure> {
    let templates = PromptTemplates::default();
    Controller {
        config,
        backends,
        templates: &templates,
        weights: &HeuristicWeights,
    }
    .run(question, options)
}

struct Generation {
    response: ModelResponse,
    chain: ReasoningChain,
    structured: bool,
}

fn fail(partial: &[IterationTrace]) -> impl FnOnce(ControllerError) -> QuestionFailure + '_ {
    move |error| QuestionFailure {
        error,
        partial: partial.to_vec(),
    }
}

impl<'a> Controller<'a> {
    pub fn run(&self, question: &str, options: &Options) -> Result<QuestionOutcome, QuestionFailure> {
        self.config.validate().map_err(fail(&[]))?;
        if options.is_empty() {
            return Err(fail(&[])(ControllerError::Precondition(
                "options must not be empty".into(),
            )));
        }
        if self.config.mode.needs_domain() && self.backends.domain.is_none() {
            return Err(fail(&[])(ControllerError::MissingDomain {
                mode: self.config.mode,
            }));
        }
        match self.config.mode {
            Mode::Baseline => self.run_baseline(question, options),
            Mode::Full | Mode::NoDomain => self.run_stepwise(question, options),
            Mode::ChainLevel => self.run_chain_level(question, options),
        }
    }

    fn option_letters(options: &Options) -> Vec<char> {
        options.keys().copied().collect()
    }

    fn generate(&self, prompt: &[ChatMessage]) -> Result<Generation, ControllerError> {
        let response =
            self.backends
                .general
                .complete(prompt, &SamplingConfig::general(), ModelRole::General)?;
        match parse_chain(&response) {
            Ok(chain) => Ok(Generation {
                response,
                chain,
                structured: true,
            }),
            Err(ChainError::Unstructured) => {
                tracing::warn!("no step markers in response; treating it as a single step");
                let chain = ReasoningChain::single_unit(&response);
                Ok(Generation {
                    response,
                    chain,
                    structured: false,
                })
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Readouts for every step plus active scores for steps in the window.
    fn score_pass(
        &self,
        generation: &Generation,
        first_scored: usize,
        positional_len: usize,
    ) -> Result<Vec<StepTrace>, ControllerError> {
        let params = &self.config.estimator;
        let mut traces = Vec::with_capacity(generation.chain.length());
        for step in &generation.chain.steps {
            let tokens = &generation.response.tokens[step.token_span.clone()];
            let probs: Vec<f64> = tokens.iter().map(|t| t.prob).collect();
            let weights = self.weights.weights(&step.text, tokens);
            let position = step.index.min(positional_len);
            let readout = if probs.is_empty() {
                None
            } else {
                Some(EstimatorReadout::compute(
                    &probs,
                    &weights,
                    position,
                    positional_len,
                    params.alpha,
                )?)
            };
            let score = if step.index >= first_scored && readout.is_some() {
                let canonical =
                    canonical_score(params, &probs, Some(&weights), position, positional_len)?;
                Some(params.orient(canonical))
            } else {
                None
            };
            traces.push(StepTrace {
                index: step.index,
                text: step.text.clone(),
                token_texts: tokens.iter().map(|t| t.token_text.clone()).collect(),
                token_probs: probs.clone(),
                clamped_tokens: clamped_count(&probs),
                readout,
                score,
                flagged: score.is_some_and(|v| params.flag(v)),
                stuck_accepted: false,
            });
        }
        Ok(traces)
    }

    fn finish(
        &self,
        generation: Generation,
        traces: Vec<IterationTrace>,
        options: &Options,
        warnings: Vec<String>,
    ) -> QuestionOutcome {
        let final_answer = extract_answer(&generation.chain, &Self::option_letters(options));
        QuestionOutcome {
            final_answer,
            iterations_used: traces.len() as u32,
            final_chain: generation.chain,
            per_iteration_traces: traces,
            warnings,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn iteration_trace(
        &self,
        iteration: u32,
        prompt: Vec<ChatMessage>,
        generation: &Generation,
        positional_len: usize,
        first_scored: usize,
        confirmed_before: Vec<String>,
        steps: Vec<StepTrace>,
        options: &Options,
    ) -> IterationTrace {
        IterationTrace {
            iteration,
            prompt,
            raw_text: generation.response.text.clone(),
            structured: generation.structured,
            chain_len: generation.chain.length(),
            positional_len,
            first_scored,
            confirmed_before,
            steps,
            flagged_step: None,
            bridge: None,
            answer: extract_answer(&generation.chain, &Self::option_letters(options)),
            warnings: Vec::new(),
        }
    }

    fn run_baseline(&self, question: &str, options: &Options) -> Result<QuestionOutcome, QuestionFailure> {
        let system_role = self.backends.general.supports_system_role();
        let prompt =
            build_initial_prompt(question, options, system_role, self.templates).map_err(fail(&[]))?;
        let generation = self.generate(&prompt).map_err(fail(&[]))?;
        let len = generation.chain.length().max(1);
        let steps = self.score_pass(&generation, 1, len).map_err(fail(&[]))?;
        let mut trace = self.iteration_trace(1, prompt, &generation, len, 1, Vec::new(), steps, options);
        let mut warnings = Vec::new();
        if !generation.structured {
            let w = "unstructured chain treated as a single step".to_string();
            trace.warnings.push(w.clone());
            warnings.push(w);
        }
        Ok(self.finish(generation, vec![trace], options, warnings))
    }

    fn run_stepwise(&self, question: &str, options: &Options) -> Result<QuestionOutcome, QuestionFailure> {
        let config = self.config;
        let system_role = self.backends.general.supports_system_role();
        let mut state = ChainState::default();
        let mut traces: Vec<IterationTrace> = Vec::new();
        let mut warnings: Vec<String> = Vec::new();

        loop {
            state.iteration += 1;
            let prompt = if state.iteration == 1 {
                build_initial_prompt(question, options, system_role, self.templates)
            } else {
                let guidance = match config.mode {
                    Mode::NoDomain => Guidance::ErrorNotices(&state.notices),
                    _ => Guidance::Knowledge(&state.knowledge),
                };
                build_regeneration_prompt(
                    question,
                    options,
                    &state.confirmed_steps,
                    guidance,
                    system_role,
                    self.templates,
                )
            }
            .map_err(fail(&traces))?;
            let generation = self.generate(&prompt).map_err(fail(&traces))?;
            let mut iteration_warnings = Vec::new();
            if !generation.structured {
                iteration_warnings.push("unstructured chain treated as a single step".to_string());
            }

            let chain = &generation.chain;
            let prefix_len = state.confirmed_steps.len();
            let anchored = chain.length() >= prefix_len
                && chain.steps[..prefix_len]
                    .iter()
                    .zip(&state.confirmed_steps)
                    .all(|(s, c)| &s.text == c);
            if !anchored {
                iteration_warnings.push(format!(
                    "regenerated chain does not reproduce the {prefix_len} confirmed step(s); scoring from step 1"
                ));
            }
            let first_scored = if anchored { prefix_len + 1 } else { 1 };
            let initial_len = *state.initial_chain_len.get_or_insert(chain.length());
            let positional_len = match config.chain_length_basis {
                ChainLengthBasis::Current => chain.length(),
                ChainLengthBasis::Initial => initial_len,
            }
            .max(1);

            let mut steps = self
                .score_pass(&generation, first_scored, positional_len)
                .map_err(fail(&traces))?;

            // Earliest flag wins; a step flagged too often is accepted instead.
            let mut flagged_step = None;
            for st in steps.iter_mut().filter(|s| s.score.is_some()) {
                if !st.flagged {
                    continue;
                }
                let count = state.flag_history.entry(st.text.clone()).or_insert(0);
                *count += 1;
                if *count >= config.stuck_step_limit {
                    st.stuck_accepted = true;
                    iteration_warnings.push(format!(
                        "step {} flagged {} times; accepted as stuck",
                        st.index, count
                    ));
                    continue;
                }
                flagged_step = Some(st.index);
                break;
            }

            let mut trace = self.iteration_trace(
                state.iteration,
                prompt,
                &generation,
                positional_len,
                first_scored,
                state.confirmed_steps.clone(),
                steps,
                options,
            );
            trace.flagged_step = flagged_step;

            let Some(flagged) = flagged_step else {
                trace.warnings = iteration_warnings;
                warnings.extend(trace.warnings.iter().cloned());
                traces.push(trace);
                return Ok(self.finish(generation, traces, options, warnings));
            };

            if anchored {
                let newly: Vec<String> = chain.steps[prefix_len..flagged - 1]
                    .iter()
                    .map(|s| s.text.clone())
                    .collect();
                state.confirmed_steps.extend(newly);
            }

            if state.iteration >= config.max_iterations {
                iteration_warnings.push(format!(
                    "iteration budget of {} exhausted; using the last chain",
                    config.max_iterations
                ));
                trace.warnings = iteration_warnings;
                warnings.extend(trace.warnings.iter().cloned());
                traces.push(trace);
                return Ok(self.finish(generation, traces, options, warnings));
            }

            let step = &chain.steps[flagged - 1];
            let bridge = match config.mode {
                Mode::NoDomain => {
                    let notice = error_notice(flagged, &step.text);
                    state.notices.push(notice.clone());
                    BridgeTrace {
                        step_index: flagged,
                        decomposition: None,
                        units: Vec::new(),
                        block: None,
                        notice: Some(notice),
                    }
                }
                _ => {
                    let domain = self.backends.domain.as_deref().expect("checked in run");
                    let decomposition = extract_atomic_units(
                        step,
                        self.backends.general.as_ref(),
                        self.templates,
                        config.decomposition,
                    );
                    let units: Vec<KnowledgeUnit> = decomposition
                        .claims
                        .iter()
                        .map(|c| verify_and_correct(c, flagged, domain, self.templates))
                        .collect();
                    let block = consolidate(&units, state.iteration);
                    state.knowledge.push(block.clone());
                    BridgeTrace {
                        step_index: flagged,
                        decomposition: Some(decomposition),
                        units,
                        block: Some(block),
                        notice: None,
                    }
                }
            };
            trace.bridge = Some(bridge);
            trace.warnings = iteration_warnings;
            warnings.extend(trace.warnings.iter().cloned());
            traces.push(trace);
        }
    }

    fn run_chain_level(&self, question: &str, options: &Options) -> Result<QuestionOutcome, QuestionFailure> {
        let config = self.config;
        let params = &config.estimator;
        let system_role = self.backends.general.supports_system_role();
        let prompt =
            build_initial_prompt(question, options, system_role, self.templates).map_err(fail(&[]))?;
        let generation = self.generate(&prompt).map_err(fail(&[]))?;

        // The whole response is one unit: i = L_R = 1.
        let unit = Generation {
            chain: ReasoningChain::single_unit(&generation.response),
            response: generation.response.clone(),
            structured: generation.structured,
        };
        let steps = self.score_pass(&unit, 1, 1).map_err(fail(&[]))?;
        let flagged = steps[0].flagged;
        let mut trace =
            self.iteration_trace(1, prompt, &generation, 1, 1, Vec::new(), steps, options);
        if !generation.structured {
            trace.warnings.push("unstructured chain treated as a single step".to_string());
        }
        if !flagged || config.max_iterations < 2 {
            let warnings = trace.warnings.clone();
            return Ok(self.finish(generation, vec![trace], options, warnings));
        }
        trace.flagged_step = Some(1);

        let domain = self.backends.domain.as_deref().expect("checked in run");
        let whole = generation.response.text.trim().to_string();
        let units = vec![verify_and_correct(&whole, 1, domain, self.templates)];
        let block = consolidate(&units, 1);
        trace.bridge = Some(BridgeTrace {
            step_index: 1,
            decomposition: None,
            units,
            block: Some(block.clone()),
            notice: None,
        });
        let mut traces = vec![trace];

        let knowledge = [block];
        let prompt = build_regeneration_prompt(
            question,
            options,
            &[],
            Guidance::Knowledge(&knowledge),
            system_role,
            self.templates,
        )
        .map_err(fail(&traces))?;
        let regenerated = self.generate(&prompt).map_err(fail(&traces))?;
        let regenerated_unit = Generation {
            chain: ReasoningChain::single_unit(&regenerated.response),
            response: regenerated.response.clone(),
            structured: regenerated.structured,
        };
        let mut steps = self.score_pass(&regenerated_unit, 1, 1).map_err(fail(&traces))?;
        // Recorded only; chain-level mode regenerates once.
        for s in &mut steps {
            s.flagged = s.score.is_some_and(|v| params.flag(v));
        }
        let mut trace =
            self.iteration_trace(2, prompt, &regenerated, 1, 1, Vec::new(), steps, options);
        if !regenerated.structured {
            trace.warnings.push("unstructured chain treated as a single step".to_string());
        }
        traces.push(trace);
        let warnings = traces.iter().flat_map(|t| t.warnings.iter().cloned()).collect();
        Ok(self.finish(regenerated, traces, options, warnings))
    }
}

/// Scores used by [`estimators::score_chain`] for the first pass; exposed
/// for callers that want the active scores without running the loop.
pub fn initial_scores(
    chain: &ReasoningChain,
    response: &ModelResponse,
    config: &ControllerConfig,
    weights: &dyn WeightProvider,
) -> Result<Vec<StepScore<f64>>, EstimatorError> {
    let provider = (config.estimator.kind == EstimatorKind::Scw).then_some(weights);
    estimators::score_chain(chain, response, &config.estimator, provider)
}
