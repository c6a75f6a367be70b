use std::sync::Arc;

use super::{
    validate_final, Choice, Correction, Decision, FinalModel, InputSelection, MaskOutcome, MaskedModel,
    ParetoArtifact, Session, SessionError, Stage, Store, TargetFront,
};
use crate::data::{Role, TimeSeriesDataset};
use crate::model::{DynamicalModel, ModelCatalog};
use crate::reduction::{mask_search, output_significance, sensitivity, ReductionError};
use crate::symreg::{build_regression_table, evolve};
use crate::training::{architecture_sweep, sweep_grid, train, ExperimentRecord};
use crate::ude::{fit_reference_normalizer, AugmentedModel};

fn invalid(stage: Stage, reason: impl Into<String>) -> SessionError {
    SessionError::InvalidDecision {
        stage,
        reason: reason.into(),
    }
}

fn malformed(reason: impl Into<String>) -> SessionError {
    SessionError::MalformedDecision(reason.into())
}

fn comma_list(x: &str) -> Vec<String> {
    x.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

/// Logs a decision for the current stage after checking it against the
/// session. `stage`, when given, must equal the current stage. The first
/// decision logged for a stage wins; later ones are refused.
pub fn submit_decision(
    session: &mut Session,
    catalog: &ModelCatalog,
    stage: Option<Stage>,
    choice: Choice,
    note: impl Into<String>,
) -> Result<(), SessionError> {
    let current = session.stage;
    if let Some(s) = stage {
        if s != current {
            return Err(invalid(current, format!("the decision targets {s}")));
        }
    }
    if !current.is_awaiting() {
        return Err(invalid(current, "the session is not awaiting a decision"));
    }
    if session.pending_decision().is_some() {
        return Err(SessionError::DecisionPending(current));
    }
    if let Choice::Choose(x) = &choice {
        check_choice(session, catalog, x)?;
    }
    session.decisions.push(Decision {
        stage: current,
        choice,
        timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        note: note.into(),
    });
    Ok(())
}

fn check_choice(session: &Session, catalog: &ModelCatalog, x: &str) -> Result<(), SessionError> {
    match session.stage {
        Stage::AwaitingArchDecision => {
            let sweep = session.experiments.as_ref().ok_or(SessionError::NotReady("experiments"))?;
            sweep
                .find(x)
                .map(|_| ())
                .ok_or_else(|| malformed(format!("no experiment `{x}`")))
        }
        Stage::AwaitingMaskDecision => {
            let n = session
                .mask_report
                .as_ref()
                .ok_or(SessionError::NotReady("mask report"))?
                .report
                .ordering
                .len();
            parse_k(x, n).map(|_| ())
        }
        Stage::AwaitingInputDecision => {
            let model = catalog.get(&session.model)?;
            let sel = parse_inputs(&model, x)?;
            if sel.states.is_empty() && sel.params.is_empty() {
                return Err(malformed("no inputs selected"));
            }
            Ok(())
        }
        Stage::AwaitingExpressionDecision => {
            let pareto = session.pareto.as_ref().ok_or(SessionError::NotReady("pareto fronts"))?;
            parse_picks(x, pareto).map(|_| ())
        }
        other => Err(invalid(other, "the session is not awaiting a decision")),
    }
}

fn parse_k(x: &str, n: usize) -> Result<usize, SessionError> {
    match x.parse::<usize>() {
        Ok(k) if (1..=n).contains(&k) => Ok(k),
        _ => Err(malformed(format!("`{x}` is not an output count in 1..={n}"))),
    }
}

fn parse_inputs(model: &DynamicalModel, x: &str) -> Result<InputSelection, SessionError> {
    let mut sel = InputSelection {
        states: Vec::new(),
        params: Vec::new(),
    };
    for name in comma_list(x) {
        if model.state_index(&name).is_some() {
            if !sel.states.contains(&name) {
                sel.states.push(name);
            }
        } else if model.param_index(&name).is_some() {
            if !sel.params.contains(&name) {
                sel.params.push(name);
            }
        } else {
            return Err(malformed(format!("`{name}` is neither a state nor a parameter")));
        }
    }
    Ok(sel)
}

/// One front index per target, comma separated.
fn parse_picks(x: &str, pareto: &ParetoArtifact) -> Result<Vec<usize>, SessionError> {
    let parts = comma_list(x);
    if parts.len() != pareto.targets.len() {
        return Err(malformed(format!(
            "expected {} comma-separated front indices, got {}",
            pareto.targets.len(),
            parts.len()
        )));
    }
    parts
        .iter()
        .zip(&pareto.targets)
        .map(|(p, t)| match p.parse::<usize>() {
            Ok(i) if i < t.front.len() => Ok(i),
            _ => Err(malformed(format!(
                "`{p}` is not an entry of the {} front (0..{})",
                t.equation,
                t.front.len()
            ))),
        })
        .collect()
}

/// Model and datasets of a session, loaded from disk.
struct Inputs {
    model: Arc<DynamicalModel>,
    train: Vec<TimeSeriesDataset>,
    test: Vec<TimeSeriesDataset>,
}

impl Inputs {
    fn load(session: &Session, catalog: &ModelCatalog) -> Result<Self, SessionError> {
        let model = catalog.get(&session.model)?;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for entry in &session.datasets {
            let ds = entry.load(&model)?;
            match entry.role {
                Role::Train => train.push(ds),
                Role::Test => test.push(ds),
            }
        }
        Ok(Inputs { model, train, test })
    }

    /// Network over every state correcting every differential equation.
    fn full_aug(&self, session: &Session) -> Result<AugmentedModel, SessionError> {
        let dt = session.settings.dt;
        let norm = fit_reference_normalizer(&self.model, &self.train, dt)?;
        Ok(AugmentedModel::full(
            self.model.clone(),
            &session.settings.hidden[0],
            norm,
            dt,
        )?)
    }

    fn selected(&self, session: &Session) -> Result<(AugmentedModel, ExperimentRecord), SessionError> {
        let sweep = session.experiments.as_ref().ok_or(SessionError::NotReady("experiments"))?;
        let id = session
            .selected_experiment
            .as_ref()
            .ok_or(SessionError::NotReady("architecture decision"))?;
        let record = sweep.find(id).ok_or(SessionError::NotReady("selected experiment"))?.clone();
        let aug = self.full_aug(session)?.with_architecture(&record.spec.hidden, &record.spec)?;
        Ok((aug, record))
    }

    fn masked(&self, session: &Session) -> Result<(AugmentedModel, ExperimentRecord), SessionError> {
        let masked = session.masked.as_ref().ok_or(SessionError::NotReady("mask decision"))?;
        let (aug, _) = self.selected(session)?;
        Ok((aug.with_output_mask(masked.output_mask.clone())?, masked.record.clone()))
    }
}

/// Performs one persisted transition. Artifacts are saved before the stage
/// changes, and artifacts already on file (from an interrupted run) are
/// reused.
pub fn step(store: &Store, catalog: &ModelCatalog, session: &mut Session) -> Result<Stage, SessionError> {
    let stage = session.stage;
    if stage.is_terminal() {
        return Err(SessionError::Terminal(stage));
    }
    let next = match stage {
        Stage::Created => {
            if session.experiments.is_none() {
                let inputs = Inputs::load(session, catalog)?;
                let aug = inputs.full_aug(session)?;
                let s = &session.settings;
                let specs = sweep_grid(&aug, &s.hidden, &s.activations, &s.arch_seeds());
                let sweep = architecture_sweep(&aug, &inputs.train, &specs, &s.training)?;
                session.experiments = Some(sweep);
                store.save(session)?;
            }
            Stage::Trained
        }
        Stage::Trained => Stage::AwaitingArchDecision,
        Stage::Masked => Stage::AwaitingMaskDecision,
        Stage::Analyzed => Stage::AwaitingInputDecision,
        Stage::Regressed => Stage::AwaitingExpressionDecision,
        _ => {
            let decision = session
                .pending_decision()
                .cloned()
                .ok_or(SessionError::MissingDecision(stage))?;
            if decision.choice == Choice::Reject {
                Stage::Rejected
            } else {
                decide(catalog, session, &decision.choice)?;
                store.save(session)?;
                match stage {
                    Stage::AwaitingArchDecision => Stage::Masked,
                    Stage::AwaitingMaskDecision => Stage::Analyzed,
                    Stage::AwaitingInputDecision => Stage::Regressed,
                    _ => Stage::Finalized,
                }
            }
        }
    };
    session.stage = next;
    store.save(session)?;
    Ok(next)
}

/// Runs the automated work that follows a non-reject decision.
fn decide(catalog: &ModelCatalog, session: &mut Session, choice: &Choice) -> Result<(), SessionError> {
    let inputs = Inputs::load(session, catalog)?;
    let chosen = match choice {
        Choice::Choose(x) => Some(x.as_str()),
        _ => None,
    };
    match session.stage {
        Stage::AwaitingArchDecision => {
            if session.mask_report.is_some() {
                return Ok(());
            }
            let sweep = session.experiments.as_ref().ok_or(SessionError::NotReady("experiments"))?;
            let id = match chosen {
                Some(x) => x.to_string(),
                None => sweep.best_record().id.clone(),
            };
            session.selected_experiment = Some(id);
            let (aug, record) = inputs.selected(session)?;
            let ratios = output_significance(&aug, &record.theta, &inputs.train)?;
            let s = &session.settings;
            let outcome = match mask_search(&aug, &record, &inputs.train, &ratios, &s.training, s.tolerance) {
                Ok(report) => MaskOutcome { feasible: true, report },
                Err(ReductionError::NoFeasibleK(report)) => MaskOutcome {
                    feasible: false,
                    report: *report,
                },
                Err(e) => return Err(e.into()),
            };
            session.mask_report = Some(outcome);
        }
        Stage::AwaitingMaskDecision => {
            if session.masked.is_none() {
                let (aug, full) = inputs.selected(session)?;
                let outcome = session.mask_report.as_ref().ok_or(SessionError::NotReady("mask report"))?;
                let report = &outcome.report;
                let n = report.ordering.len();
                let k = match chosen {
                    Some(x) => parse_k(x, n)?,
                    None => report.chosen_k,
                };
                let masked = if k == report.chosen_k {
                    MaskedModel {
                        k,
                        output_mask: report.output_mask.clone(),
                        record: report.record.clone(),
                    }
                } else {
                    let mut mask = vec![false; n];
                    for &eq in &report.ordering[..k] {
                        mask[eq] = true;
                    }
                    let record = if k == n {
                        full
                    } else {
                        train(&aug.with_output_mask(mask.clone())?, &inputs.train, &session.settings.training)?
                    };
                    MaskedModel {
                        k,
                        output_mask: mask,
                        record,
                    }
                };
                session.masked = Some(masked);
            }
            if session.sensitivity.is_none() {
                let (aug, record) = inputs.masked(session)?;
                let report = sensitivity(&aug, &record.theta, &inputs.train, session.settings.top_m)?;
                session.sensitivity = Some(report);
            }
        }
        Stage::AwaitingInputDecision => {
            if session.inputs.is_none() {
                let selection = match chosen {
                    Some(x) => parse_inputs(&inputs.model, x)?,
                    None => default_inputs(session, &inputs)?,
                };
                session.inputs = Some(selection);
            }
            if session.pareto.is_none() {
                let (aug, record) = inputs.masked(session)?;
                let sel = session.inputs.as_ref().expect("set above");
                let model = &inputs.model;
                let states: Vec<usize> = sel.states.iter().filter_map(|n| model.state_index(n)).collect();
                let params: Vec<usize> = sel.params.iter().filter_map(|n| model.param_index(n)).collect();
                let table = build_regression_table(&aug, &record.theta, &inputs.train, &states, &params)?;
                let fronts = evolve(&table, &session.settings.symreg)?;
                let targets = table
                    .target_names
                    .iter()
                    .zip(fronts)
                    .map(|(eq, front)| {
                        let knee = front.knee()?;
                        let knee = front
                            .entries
                            .iter()
                            .position(|e| e.complexity == knee.complexity)
                            .expect("knee is an entry");
                        Ok(TargetFront {
                            equation: eq.clone(),
                            front,
                            knee,
                        })
                    })
                    .collect::<Result<Vec<_>, SessionError>>()?;
                session.pareto = Some(ParetoArtifact {
                    columns: table.columns.clone(),
                    targets,
                });
            }
        }
        Stage::AwaitingExpressionDecision => {
            if session.final_model.is_none() {
                let pareto = session.pareto.as_ref().ok_or(SessionError::NotReady("pareto fronts"))?;
                let picks = match chosen {
                    Some(x) => parse_picks(x, pareto)?,
                    None => pareto.targets.iter().map(|t| t.knee).collect(),
                };
                let corrections = pareto
                    .targets
                    .iter()
                    .zip(picks)
                    .map(|(t, i)| Correction {
                        equation: t.equation.clone(),
                        expression: t.front.entries[i].expression.clone(),
                    })
                    .collect();
                session.final_model = Some(FinalModel {
                    base_model: session.model.clone(),
                    corrections,
                    dt: session.settings.dt,
                    session_id: session.id.clone(),
                    decision_log_hash: session.decision_log_hash(),
                });
            }
            let final_model = session.final_model.as_ref().expect("set above");
            session.validation = inputs
                .test
                .iter()
                .map(|ds| validate_final(final_model, catalog, ds))
                .collect::<Result<Vec<_>, _>>()?;
        }
        other => return Err(invalid(other, "the session is not awaiting a decision")),
    }
    Ok(())
}

/// The top-ranked states plus every parameter that differs between training
/// datasets.
fn default_inputs(session: &Session, inputs: &Inputs) -> Result<InputSelection, SessionError> {
    let report = session.sensitivity.as_ref().ok_or(SessionError::NotReady("sensitivity"))?;
    let names = inputs.model.state_names();
    let states = report.selected().iter().map(|&i| names[i].clone()).collect();
    let first = &inputs.train[0].config;
    let params = inputs
        .model
        .params()
        .iter()
        .enumerate()
        .filter(|(i, _)| inputs.train.iter().any(|d| d.config[*i] != first[*i]))
        .map(|(_, p)| p.name.clone())
        .collect();
    Ok(InputSelection { states, params })
}

/// Logs `decision` (if any) and runs transitions until the session awaits
/// the next decision or ends. Returns the stages entered.
pub fn advance(
    store: &Store,
    catalog: &ModelCatalog,
    session: &mut Session,
    decision: Option<(Choice, String)>,
) -> Result<Vec<Stage>, SessionError> {
    if session.stage.is_terminal() {
        return Err(SessionError::Terminal(session.stage));
    }
    if let Some((choice, note)) = decision {
        submit_decision(session, catalog, None, choice, note)?;
        store.save(session)?;
    }
    let mut entered = Vec::new();
    loop {
        let stage = step(store, catalog, session)?;
        entered.push(stage);
        if stage.is_awaiting() || stage.is_terminal() {
            return Ok(entered);
        }
    }
}

/// Accepts every proposal until the session is finalized, or stops at a
/// decision point where [`Session::problems`] reports something.
pub fn run_auto(store: &Store, catalog: &ModelCatalog, session: &mut Session) -> Result<Vec<Stage>, SessionError> {
    let mut entered = Vec::new();
    while !session.stage.is_terminal() {
        if session.stage.is_awaiting() && !session.problems().is_empty() && session.pending_decision().is_none() {
            break;
        }
        let decision = (session.stage.is_awaiting() && session.pending_decision().is_none())
            .then(|| (Choice::Accept, String::new()));
        entered.extend(advance(store, catalog, session, decision)?);
    }
    Ok(entered)
}
