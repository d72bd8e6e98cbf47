//! Plain-text views of a query and a line-driven interactive loop on top of
//! [`QueryService`].

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use aggquery_core::aggregate::AnswerSet;
use aggquery_core::filter::{PlanDecision, TrailEntry};
use serde_json::Value;

use crate::engine::{
    ClarificationReply, CreateQuery, Phase, QueryService, QueryView, RollbackRequest, StepOutcome, StepRequest,
};
use crate::error::ApiError;

pub fn render_query(view: &QueryView) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "query {} on {} [{:?}]", view.query_id, view.corpus_id, view.phase);
    let _ = writeln!(out, "  question: {}", view.question);
    if view.spec.raw_text != view.question {
        let _ = writeln!(out, "  rewritten: {}", view.spec.raw_text);
    }
    let _ = writeln!(out, "  entity type: {}", view.spec.entity_type);
    for c in &view.spec.conditions {
        let _ = writeln!(out, "  condition {}: {}", c.condition_id, c.text);
    }
    for c in &view.clarifications {
        let state = match &c.answer {
            Some(a) => format!("-> {a}"),
            None => "(open)".into(),
        };
        let _ = writeln!(out, "  [{}] {} {}: {} {}", c.clarification_id, c.code, c.fragment, c.question, state);
    }
    if let Some(f) = &view.filter {
        let _ = writeln!(
            out,
            "  snapshots (active {}, {} of {} planner steps used):",
            f.active_snapshot, f.iterations_used, f.budget
        );
        for s in &f.snapshots {
            let marker = if s.snapshot_id == f.active_snapshot { '*' } else { ' ' };
            let parent = s.parent_id.map_or("-".to_string(), |p| p.to_string());
            let _ = writeln!(
                out,
                "   {marker}{:>3}  parent {:>3}  kept {:>6}  dropped {:>6}  {}",
                s.snapshot_id,
                parent,
                s.retained,
                s.discarded,
                s.invocation.as_deref().unwrap_or("(corpus)")
            );
        }
    }
    if let Some(n) = view.answer_count {
        let _ = writeln!(out, "  answer: {n} entities");
    }
    if let Some(e) = &view.error {
        let _ = writeln!(out, "  error: {}", e.message);
    }
    out
}

pub fn render_trail(trail: &[TrailEntry]) -> String {
    let mut out = String::new();
    for t in trail {
        match t {
            TrailEntry::Tool { invocation, snapshot_id, retained } => {
                let _ = writeln!(out, "{invocation} => snapshot {snapshot_id} ({retained} kept)");
            }
            TrailEntry::Rollback { from, to } => {
                let _ = writeln!(out, "rollback {from} -> {to}");
            }
        }
    }
    out
}

pub fn render_step(step: &StepOutcome) -> String {
    let mut out = match &step.decision {
        PlanDecision::Invoke { invocation } => format!("applied {invocation}\n"),
        PlanDecision::Rollback { snapshot_id, then } => match then {
            Some(inv) => format!("rolled back to {snapshot_id}, then applied {inv}\n"),
            None => format!("rolled back to {snapshot_id}\n"),
        },
        PlanDecision::Done { exhausted: true } => "planner budget exhausted; ready to aggregate\n".into(),
        PlanDecision::Done { exhausted: false } => "filtering finished; ready to aggregate\n".into(),
    };
    if let Some(obs) = &step.observation {
        let _ = writeln!(
            out,
            "snapshot {}: {} kept, {} dropped, {} tokens",
            obs.snapshot_id, obs.retained_count, obs.discarded_count, obs.retained_tokens
        );
        for s in &obs.retained_samples {
            let _ = writeln!(out, "  + [{}] {}", s.chunk_id, s.summary);
        }
        for s in &obs.discarded_samples {
            let _ = writeln!(out, "  - [{}] {}", s.chunk_id, s.summary);
        }
    }
    if let Some(r) = &step.overfilter {
        if r.overfiltered() {
            let _ = writeln!(
                out,
                "warning: possible over-filtering (below floor: {}, relevant discarded: {})",
                r.below_floor,
                r.relevant.join(", ")
            );
        }
    }
    out
}

pub fn render_answer(answer: &AnswerSet) -> String {
    let mut out = format!("{} entities\n", answer.count);
    for e in &answer.entities {
        let _ = writeln!(
            out,
            "  {} ({}) evidence: {}",
            e.canonical,
            e.surfaces.join(" / "),
            e.evidence_chunk_ids.join(", ")
        );
    }
    out
}

const HELP: &str = "commands:
  answer <id> <text>     answer a clarification
  skip <id>              keep the literal reading
  step                   let the planner choose the next filter
  tool <name> <json>     apply a filter tool, e.g. tool exact_match {\"term\": \"law\"}
  rollback [snapshot]    make an earlier snapshot active
  trail                  show applied tools and rollbacks
  show                   show the query
  aggregate              judge the active snapshot and print the answer
  quit
";

/// Drive one query from `input` commands. Returns the final view.
pub fn run_console<R: BufRead, W: Write>(
    service: &QueryService,
    create: CreateQuery,
    input: R,
    mut output: W,
) -> anyhow::Result<QueryView> {
    let view = service.create_query(create)?;
    let id = view.query_id.clone();
    write!(output, "{}", render_query(&view))?;
    if view.phase == Phase::Clarifying {
        writeln!(output, "answer or skip each clarification; `help` lists commands")?;
    }
    for line in input.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (cmd, rest) = line.split_once(' ').unwrap_or((line, ""));
        let rest = rest.trim();
        let result: Result<String, ApiError> = match cmd {
            "help" => Ok(HELP.to_string()),
            "quit" | "exit" => break,
            "show" => service.get(&id).map(|v| render_query(&v)),
            "trail" => service.get(&id).map(|v| v.filter.map(|f| render_trail(&f.trail)).unwrap_or_default()),
            "answer" => {
                let (cid, text) = rest.split_once(' ').unwrap_or((rest, ""));
                let reply = ClarificationReply { answer: Some(text.trim().to_string()), skip: false };
                service.clarify(&id, cid, reply).map(|v| render_query(&v))
            }
            "skip" => {
                service.clarify(&id, rest, ClarificationReply { answer: None, skip: true }).map(|v| render_query(&v))
            }
            "step" => service.filter_step(&id, StepRequest::default()).map(|s| render_step(&s)),
            "tool" => {
                let (name, params) = rest.split_once(' ').unwrap_or((rest, "{}"));
                match serde_json::from_str::<Value>(params) {
                    Ok(params) => service
                        .filter_step(&id, StepRequest { tool: Some(name.to_string()), params: Some(params) })
                        .map(|s| render_step(&s)),
                    Err(e) => Ok(format!("parameters must be JSON: {e}\n")),
                }
            }
            "rollback" => {
                let snapshot_id = if rest.is_empty() {
                    None
                } else {
                    match rest.parse() {
                        Ok(n) => Some(n),
                        Err(_) => {
                            writeln!(output, "snapshot id must be a number")?;
                            continue;
                        }
                    }
                };
                service.rollback(&id, RollbackRequest { snapshot_id }).map(|v| render_query(&v))
            }
            "aggregate" => service.aggregate(&id).map(|a| render_answer(&a)),
            other => Ok(format!("unknown command `{other}`; try `help`\n")),
        };
        match result {
            Ok(text) => write!(output, "{text}")?,
            Err(e) => writeln!(output, "error ({:?}): {}", e.code, e.message)?,
        }
        if service.get(&id)?.phase == Phase::Done {
            break;
        }
    }
    Ok(service.get(&id)?)
}
