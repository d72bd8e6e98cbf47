//! Completeness-aware filtering over immutable chunk snapshots.
//!
//! A [`FilterSession`] starts from snapshot 0 (the whole corpus). Each tool
//! application narrows the active snapshot into a new child; discarded chunks
//! stay recorded on the child so nothing is lost. Widening is only possible by
//! rolling back to an earlier snapshot, which moves the active pointer and
//! never deletes anything.

pub mod tools;

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ChunkId, Corpus};
use crate::index::{EmbedError, EmbeddingProvider, TrigramHashEmbedder};
use crate::llm::{parse_json_response, CompletionRequest, LlmClient, LlmError, Message, Purpose};
use crate::prompts::{render, PromptSet, TemplateError};
use crate::query::QuerySpec;

pub use tools::{Tool, ToolInvocation, TOOL_DESCRIPTIONS, TOOL_NAMES};

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("unknown tool `{0}`")]
    UnknownTool(String),
    #[error("invalid parameter `{field}` for {tool}: {reason}")]
    InvalidParams { tool: String, field: String, reason: String },
    #[error("invocation targets snapshot {got} but the active snapshot is {expected}")]
    WrongTarget { expected: u32, got: u32 },
    #[error("unknown snapshot {0}")]
    UnknownSnapshot(u32),
    #[error("malformed plan ({reason}): {raw}")]
    MalformedPlan { reason: String, raw: String },
    #[error("malformed probe response ({reason}): {raw}")]
    MalformedProbe { reason: String, raw: String },
    #[error("replay diverged: {0}")]
    Replay(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("embedding failed: {0}")]
    Embed(EmbedError),
}

/// When the filter hands its candidates to aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Handoff {
    /// Retained chunk count at or below the value.
    Chunks(usize),
    /// Retained token total at or below the value.
    Tokens(usize),
    /// Only the planner or the budget ends filtering.
    Never,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Over-filter floor as a fraction of snapshot 0.
    pub floor_fraction: f64,
    /// Discarded chunks sampled per over-filter probe.
    pub probe_size: usize,
    pub handoff: Handoff,
    pub seed: u64,
    /// Chunks sampled per side in an observation.
    pub sample_size: usize,
    pub summary_chars: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            floor_fraction: 0.01,
            probe_size: 5,
            // four batches at the default judge budget (8000 context - 1000 overhead)
            handoff: Handoff::Tokens(4 * 7000),
            seed: 0,
            sample_size: 3,
            summary_chars: 160,
        }
    }
}

pub const DEFAULT_BUDGET: u32 = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub snapshot_id: u32,
    pub parent_id: Option<u32>,
    pub retained: BTreeSet<ChunkId>,
    /// Chunks of the parent that this step dropped.
    pub discarded: BTreeSet<ChunkId>,
    pub invocation: Option<ToolInvocation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkSummary {
    pub chunk_id: ChunkId,
    pub summary: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverfilterFlags {
    pub below_floor: bool,
    /// Result of the last discarded-chunk probe on this snapshot, if any.
    pub probe_hit: Option<bool>,
}

impl OverfilterFlags {
    pub fn any(&self) -> bool {
        self.below_floor || self.probe_hit == Some(true)
    }

    fn describe(&self) -> String {
        let mut out = Vec::new();
        if self.below_floor {
            out.push("below_floor");
        }
        if self.probe_hit == Some(true) {
            out.push("probe_hit");
        }
        if out.is_empty() {
            "none".into()
        } else {
            out.join(", ")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub snapshot_id: u32,
    pub retained_count: usize,
    pub discarded_count: usize,
    pub retained_tokens: usize,
    pub retained_samples: Vec<ChunkSummary>,
    pub discarded_samples: Vec<ChunkSummary>,
    pub flags: OverfilterFlags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum HistoryEvent {
    Planned { iteration: u32, response: String },
    ToolApplied { invocation: ToolInvocation, snapshot_id: u32, observation: Observation },
    Rollback { from: u32, to: u32 },
    Probe { snapshot_id: u32, probed: Vec<ChunkId>, relevant: Vec<ChunkId> },
}

/// Replayable record of the state-changing events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrailEntry {
    Tool { invocation: ToolInvocation, snapshot_id: u32, retained: usize },
    Rollback { from: u32, to: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub query_id: String,
    pub snapshot_id: u32,
    pub chunk_ids: Vec<ChunkId>,
    pub trail: Vec<TrailEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverfilterReport {
    pub snapshot_id: u32,
    /// False when no tool has been applied yet; all flags are then false.
    pub applicable: bool,
    pub retained: usize,
    pub floor_count: f64,
    pub below_floor: bool,
    pub probed: Vec<ChunkId>,
    pub relevant: Vec<ChunkId>,
    pub probe_hit: bool,
}

impl OverfilterReport {
    pub fn overfiltered(&self) -> bool {
        self.below_floor || self.probe_hit
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum PlanDecision {
    Invoke { invocation: ToolInvocation },
    Rollback { snapshot_id: u32, then: Option<ToolInvocation> },
    Done { exhausted: bool },
}

#[derive(Debug, Deserialize)]
struct PlanToolBody {
    tool: String,
    #[serde(default)]
    params: serde_json::Value,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
enum PlanResponse {
    Tool {
        tool: String,
        #[serde(default)]
        params: serde_json::Value,
    },
    Rollback {
        #[serde(default)]
        snapshot_id: Option<u32>,
        #[serde(default)]
        then: Option<PlanToolBody>,
    },
    Done,
}

#[derive(Debug, Deserialize)]
struct ProbeResponse {
    relevant: Vec<ChunkId>,
}

/// Serializable session state: everything except the corpus and embedder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub corpus_id: String,
    pub query: QuerySpec,
    pub config: FilterConfig,
    pub budget: u32,
    pub iterations_used: u32,
    pub snapshots: Vec<Snapshot>,
    pub active: u32,
    pub history: Vec<HistoryEvent>,
}

impl SessionState {
    /// Tool applications and rollbacks, in order.
    pub fn trail(&self) -> Vec<TrailEntry> {
        self.history
            .iter()
            .filter_map(|e| match e {
                HistoryEvent::ToolApplied { invocation, snapshot_id, observation } => Some(TrailEntry::Tool {
                    invocation: invocation.clone(),
                    snapshot_id: *snapshot_id,
                    retained: observation.retained_count,
                }),
                HistoryEvent::Rollback { from, to } => Some(TrailEntry::Rollback { from: *from, to: *to }),
                _ => None,
            })
            .collect()
    }
}

pub struct FilterSession {
    corpus: Arc<Corpus>,
    embedder: Arc<dyn EmbeddingProvider>,
    state: SessionState,
}

impl std::fmt::Debug for FilterSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FilterSession")
            .field("corpus", &self.corpus.id())
            .field("active", &self.state.active)
            .field("snapshots", &self.state.snapshots.len())
            .finish()
    }
}

fn summarize(text: &str, max_chars: usize) -> String {
    let flat = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if flat.chars().count() <= max_chars {
        flat
    } else {
        let cut: String = flat.chars().take(max_chars).collect();
        format!("{cut}...")
    }
}

impl FilterSession {
    pub fn open(corpus: Arc<Corpus>, query: QuerySpec, budget: u32, config: FilterConfig) -> Result<Self, FilterError> {
        Self::open_with_embedder(corpus, query, budget, config, Arc::new(TrigramHashEmbedder::default()))
    }

    pub fn open_with_embedder(
        corpus: Arc<Corpus>,
        query: QuerySpec,
        budget: u32,
        config: FilterConfig,
        embedder: Arc<dyn EmbeddingProvider>,
    ) -> Result<Self, FilterError> {
        if corpus.is_empty() {
            return Err(FilterError::EmptyCorpus);
        }
        let root = Snapshot {
            snapshot_id: 0,
            parent_id: None,
            retained: corpus.chunk_ids().cloned().collect(),
            discarded: BTreeSet::new(),
            invocation: None,
        };
        let state = SessionState {
            corpus_id: corpus.id().to_string(),
            query,
            config,
            budget,
            iterations_used: 0,
            snapshots: vec![root],
            active: 0,
            history: Vec::new(),
        };
        Ok(Self { corpus, embedder, state })
    }

    /// Rebuild a session from saved state. The corpus must be the one the
    /// state was recorded on.
    pub fn restore(
        corpus: Arc<Corpus>,
        state: SessionState,
        embedder: Arc<dyn EmbeddingProvider>,
    ) -> Result<Self, FilterError> {
        if state.corpus_id != corpus.id() {
            return Err(FilterError::Replay(format!(
                "state is for corpus {} but {} was given",
                state.corpus_id,
                corpus.id()
            )));
        }
        if state.snapshot(state.active).is_none() {
            return Err(FilterError::UnknownSnapshot(state.active));
        }
        Ok(Self { corpus, embedder, state })
    }

    /// Re-run a trail from snapshot 0 on a fresh session.
    pub fn replay(
        corpus: Arc<Corpus>,
        query: QuerySpec,
        budget: u32,
        config: FilterConfig,
        embedder: Arc<dyn EmbeddingProvider>,
        trail: &[TrailEntry],
    ) -> Result<Self, FilterError> {
        let mut session = Self::open_with_embedder(corpus, query, budget, config, embedder)?;
        for entry in trail {
            match entry {
                TrailEntry::Tool { invocation, snapshot_id, retained } => {
                    let id = session.apply_tool(invocation)?;
                    if id != *snapshot_id {
                        return Err(FilterError::Replay(format!("expected snapshot {snapshot_id}, produced {id}")));
                    }
                    let got = session.active_snapshot().retained.len();
                    if got != *retained {
                        return Err(FilterError::Replay(format!(
                            "snapshot {id}: expected {retained} retained, got {got}"
                        )));
                    }
                }
                TrailEntry::Rollback { to, .. } => {
                    session.rollback(*to)?;
                }
            }
        }
        Ok(session)
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn into_state(self) -> SessionState {
        self.state
    }

    pub fn corpus(&self) -> &Arc<Corpus> {
        &self.corpus
    }

    pub fn query(&self) -> &QuerySpec {
        &self.state.query
    }

    pub fn config(&self) -> &FilterConfig {
        &self.state.config
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.state.snapshots
    }

    pub fn snapshot(&self, id: u32) -> Option<&Snapshot> {
        self.state.snapshot(id)
    }

    pub fn active_id(&self) -> u32 {
        self.state.active
    }

    pub fn active_snapshot(&self) -> &Snapshot {
        self.state.snapshot(self.state.active).expect("active snapshot exists")
    }

    pub fn history(&self) -> &[HistoryEvent] {
        &self.state.history
    }

    pub fn budget_remaining(&self) -> u32 {
        self.state.budget.saturating_sub(self.state.iterations_used)
    }

    /// Retained count below which a snapshot counts as over-filtered.
    pub fn floor_count(&self) -> f64 {
        self.state.config.floor_fraction * self.state.snapshots[0].retained.len() as f64
    }

    fn below_floor(&self, snap: &Snapshot) -> bool {
        snap.retained.is_empty() || (snap.retained.len() as f64) < self.floor_count()
    }

    /// Apply a tool to the active snapshot and make the result active.
    pub fn apply_tool(&mut self, inv: &ToolInvocation) -> Result<u32, FilterError> {
        let tool = Tool::from_invocation(inv)?;
        if inv.target != self.state.active {
            return Err(FilterError::WrongTarget { expected: self.state.active, got: inv.target });
        }
        let matcher = tool.matcher(self.embedder.as_ref())?;
        let parent = self.active_snapshot();
        let mut retained = BTreeSet::new();
        let mut discarded = BTreeSet::new();
        for id in &parent.retained {
            let chunk = self.corpus.chunk(id).expect("snapshot ids come from the corpus");
            if matcher.matches(&chunk.text)? {
                retained.insert(id.clone());
            } else {
                discarded.insert(id.clone());
            }
        }
        let snapshot_id = self.state.snapshots.len() as u32;
        self.state.snapshots.push(Snapshot {
            snapshot_id,
            parent_id: Some(parent.snapshot_id),
            retained,
            discarded,
            invocation: Some(inv.clone()),
        });
        self.state.active = snapshot_id;
        let observation = self.observe(snapshot_id)?;
        log::debug!("{inv} -> snapshot {snapshot_id} ({} retained)", observation.retained_count);
        self.state.history.push(HistoryEvent::ToolApplied { invocation: inv.clone(), snapshot_id, observation });
        Ok(snapshot_id)
    }

    pub fn observe(&self, snapshot_id: u32) -> Result<Observation, FilterError> {
        let snap = self.snapshot(snapshot_id).ok_or(FilterError::UnknownSnapshot(snapshot_id))?;
        let cfg = &self.state.config;
        let seed = cfg.seed ^ (snapshot_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |set: &BTreeSet<ChunkId>| -> Vec<ChunkSummary> {
            let ids: Vec<&ChunkId> = set.iter().collect();
            let mut picks = sample(&mut rng, ids.len(), cfg.sample_size.min(ids.len())).into_vec();
            picks.sort_unstable();
            picks
                .into_iter()
                .map(|i| {
                    let chunk = self.corpus.chunk(ids[i]).expect("snapshot ids come from the corpus");
                    ChunkSummary {
                        chunk_id: chunk.chunk_id.clone(),
                        summary: summarize(&chunk.text, cfg.summary_chars),
                    }
                })
                .collect()
        };
        let retained_samples = draw(&snap.retained);
        let discarded_samples = draw(&snap.discarded);
        let probe_hit = self.state.history.iter().rev().find_map(|e| match e {
            HistoryEvent::Probe { snapshot_id: s, relevant, .. } if *s == snapshot_id => Some(!relevant.is_empty()),
            _ => None,
        });
        Ok(Observation {
            snapshot_id,
            retained_count: snap.retained.len(),
            discarded_count: snap.discarded.len(),
            retained_tokens: self.retained_tokens(snap),
            retained_samples,
            discarded_samples,
            flags: OverfilterFlags { below_floor: self.below_floor(snap), probe_hit },
        })
    }

    fn retained_tokens(&self, snap: &Snapshot) -> usize {
        snap.retained.iter().filter_map(|id| self.corpus.chunk(id)).map(|c| c.token_count).sum()
    }

    /// Check the active snapshot for over-filtering. With a client, up to
    /// `probe_size` of the chunks discarded by the step that produced it are
    /// sampled and shown to the judge.
    pub fn detect_overfilter(
        &mut self,
        judge: Option<(&LlmClient, &PromptSet)>,
    ) -> Result<OverfilterReport, FilterError> {
        let snap = self.active_snapshot().clone();
        let applied = self.state.history.iter().any(|e| matches!(e, HistoryEvent::ToolApplied { .. }));
        let mut report = OverfilterReport {
            snapshot_id: snap.snapshot_id,
            applicable: applied,
            retained: snap.retained.len(),
            floor_count: self.floor_count(),
            below_floor: false,
            probed: Vec::new(),
            relevant: Vec::new(),
            probe_hit: false,
        };
        if !applied {
            return Ok(report);
        }
        report.below_floor = self.below_floor(&snap);
        let Some((client, prompts)) = judge else {
            return Ok(report);
        };
        if snap.discarded.is_empty() || self.state.config.probe_size == 0 {
            return Ok(report);
        }
        let ids: Vec<&ChunkId> = snap.discarded.iter().collect();
        let seed = self.state.config.seed ^ 0x5052_4F42_4500_0000 ^ snap.snapshot_id as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picks = sample(&mut rng, ids.len(), self.state.config.probe_size.min(ids.len())).into_vec();
        picks.sort_unstable();
        let probed: Vec<ChunkId> = picks.into_iter().map(|i| ids[i].clone()).collect();
        let chunks_text = probed
            .iter()
            .map(|id| format!("[{id}] {}", self.corpus.chunk(id).map(|c| c.text.as_str()).unwrap_or("")))
            .collect::<Vec<_>>()
            .join("\n");
        let prompt = render(&prompts.probe, &[("question", &self.state.query.raw_text), ("chunks", &chunks_text)])?;
        let req = CompletionRequest::new(Purpose::Probe, vec![Message::system(&prompts.system), Message::user(prompt)])
            .with_fixture_key(format!("probe:{}:{}", self.state.query.query_id, probed.join(",")));
        let completion = client.complete(&req)?;
        let parsed: ProbeResponse = parse_json_response(&completion.text)
            .map_err(|reason| FilterError::MalformedProbe { reason, raw: completion.text.clone() })?;
        let probed_set: BTreeSet<&ChunkId> = probed.iter().collect();
        let relevant: Vec<ChunkId> = parsed
            .relevant
            .into_iter()
            .filter(|id| probed_set.contains(id))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        report.probe_hit = !relevant.is_empty();
        report.probed = probed.clone();
        report.relevant = relevant.clone();
        self.state.history.push(HistoryEvent::Probe { snapshot_id: snap.snapshot_id, probed, relevant });
        Ok(report)
    }

    /// Make an earlier (or later) snapshot active. Nothing is deleted.
    pub fn rollback(&mut self, snapshot_id: u32) -> Result<u32, FilterError> {
        if self.snapshot(snapshot_id).is_none() {
            return Err(FilterError::UnknownSnapshot(snapshot_id));
        }
        let from = self.state.active;
        self.state.active = snapshot_id;
        self.state.history.push(HistoryEvent::Rollback { from, to: snapshot_id });
        Ok(snapshot_id)
    }

    /// Most recent snapshot, other than the active one, whose retained count
    /// exceeds the floor. Falls back to snapshot 0.
    pub fn default_rollback_target(&self) -> u32 {
        let floor = self.floor_count();
        self.state
            .snapshots
            .iter()
            .rev()
            .find(|s| s.snapshot_id != self.state.active && s.retained.len() as f64 > floor && !s.retained.is_empty())
            .map(|s| s.snapshot_id)
            .unwrap_or(0)
    }

    fn handoff_reached(&self, snap: &Snapshot) -> bool {
        match self.state.config.handoff {
            Handoff::Chunks(n) => snap.retained.len() <= n,
            Handoff::Tokens(n) => self.retained_tokens(snap) <= n,
            Handoff::Never => false,
        }
    }

    /// Ask the planner for the next move. Consumes one iteration of budget
    /// when the planner is called.
    pub fn plan_step(&mut self, client: &LlmClient, prompts: &PromptSet) -> Result<PlanDecision, FilterError> {
        if self.state.iterations_used >= self.state.budget {
            return Ok(PlanDecision::Done { exhausted: true });
        }
        let obs = self.observe(self.state.active)?;
        if !obs.flags.any() && self.handoff_reached(self.active_snapshot()) {
            return Ok(PlanDecision::Done { exhausted: false });
        }
        self.state.iterations_used += 1;
        let iteration = self.state.iterations_used;
        let prompt = self.render_plan_prompt(prompts, &obs, iteration)?;
        let req = CompletionRequest::new(Purpose::Plan, vec![Message::system(&prompts.system), Message::user(prompt)])
            .with_fixture_key(format!("plan:{}:{}", self.state.query.query_id, iteration));
        let completion = client.complete(&req)?;
        let raw = completion.text;
        self.state.history.push(HistoryEvent::Planned { iteration, response: raw.clone() });
        let parsed: PlanResponse =
            parse_json_response(&raw).map_err(|reason| FilterError::MalformedPlan { reason, raw: raw.clone() })?;
        let decision = match parsed {
            PlanResponse::Tool { tool, params } => {
                let invocation = ToolInvocation::new(tool, params, self.state.active);
                Tool::from_invocation(&invocation)?;
                PlanDecision::Invoke { invocation }
            }
            PlanResponse::Rollback { snapshot_id, then } => {
                let target = snapshot_id.unwrap_or_else(|| self.default_rollback_target());
                if self.snapshot(target).is_none() {
                    return Err(FilterError::MalformedPlan {
                        reason: format!("rollback to unknown snapshot {target}"),
                        raw,
                    });
                }
                let then = then.map(|b| ToolInvocation::new(b.tool, b.params, target));
                if let Some(inv) = &then {
                    Tool::from_invocation(inv)?;
                }
                PlanDecision::Rollback { snapshot_id: target, then }
            }
            PlanResponse::Done => PlanDecision::Done { exhausted: false },
        };
        Ok(decision)
    }

    /// Carry out a planner decision. Returns the active snapshot afterwards.
    pub fn execute(&mut self, decision: &PlanDecision) -> Result<u32, FilterError> {
        match decision {
            PlanDecision::Invoke { invocation } => self.apply_tool(invocation),
            PlanDecision::Rollback { snapshot_id, then } => {
                self.rollback(*snapshot_id)?;
                match then {
                    Some(inv) => self.apply_tool(inv),
                    None => Ok(*snapshot_id),
                }
            }
            PlanDecision::Done { .. } => Ok(self.state.active),
        }
    }

    /// Plan and execute until the planner finishes or the budget runs out.
    /// Probes for over-filtering after each step when `probe` is set.
    pub fn run(&mut self, client: &LlmClient, prompts: &PromptSet, probe: bool) -> Result<CandidateSet, FilterError> {
        loop {
            let decision = self.plan_step(client, prompts)?;
            if let PlanDecision::Done { exhausted } = decision {
                if exhausted {
                    log::info!("filter budget exhausted at snapshot {}", self.state.active);
                }
                break;
            }
            self.execute(&decision)?;
            if probe {
                self.detect_overfilter(Some((client, prompts)))?;
            }
        }
        Ok(self.finalize_candidates())
    }

    fn render_plan_prompt(
        &self,
        prompts: &PromptSet,
        obs: &Observation,
        iteration: u32,
    ) -> Result<String, FilterError> {
        let samples = |xs: &[ChunkSummary]| {
            if xs.is_empty() {
                "(none)".to_string()
            } else {
                xs.iter().map(|s| format!("[{}] {}", s.chunk_id, s.summary)).collect::<Vec<_>>().join("\n")
            }
        };
        let history = if self.state.history.is_empty() {
            "(none)".to_string()
        } else {
            self.state
                .history
                .iter()
                .filter_map(|e| match e {
                    HistoryEvent::ToolApplied { invocation, snapshot_id, observation } => Some(format!(
                        "- snapshot {snapshot_id}: {} {} -> retained {}, discarded {}, flags {}",
                        invocation.tool,
                        invocation.params,
                        observation.retained_count,
                        observation.discarded_count,
                        observation.flags.describe()
                    )),
                    HistoryEvent::Rollback { from, to } => Some(format!("- rollback {from} -> {to}")),
                    HistoryEvent::Probe { snapshot_id, relevant, .. } => Some(format!(
                        "- probe on snapshot {snapshot_id}: {} discarded chunks still relevant",
                        relevant.len()
                    )),
                    HistoryEvent::Planned { .. } => None,
                })
                .collect::<Vec<_>>()
                .join("\n")
        };
        let step = iteration.to_string();
        let budget = self.state.budget.to_string();
        let sid = obs.snapshot_id.to_string();
        let retained = obs.retained_count.to_string();
        let discarded = obs.discarded_count.to_string();
        Ok(render(
            &prompts.plan,
            &[
                ("question", &self.state.query.raw_text),
                ("entity_type", &self.state.query.entity_type),
                ("step", &step),
                ("budget", &budget),
                ("snapshot_id", &sid),
                ("retained", &retained),
                ("discarded", &discarded),
                ("flags", &obs.flags.describe()),
                ("retained_samples", &samples(&obs.retained_samples)),
                ("discarded_samples", &samples(&obs.discarded_samples)),
                ("history", &history),
                ("tools", TOOL_DESCRIPTIONS),
            ],
        )?)
    }

    pub fn trail(&self) -> Vec<TrailEntry> {
        self.state.trail()
    }

    pub fn finalize_candidates(&self) -> CandidateSet {
        CandidateSet {
            query_id: self.state.query.query_id.clone(),
            snapshot_id: self.state.active,
            chunk_ids: self.active_snapshot().retained.iter().cloned().collect(),
            trail: self.trail(),
        }
    }
}

impl SessionState {
    pub fn snapshot(&self, id: u32) -> Option<&Snapshot> {
        self.snapshots.get(id as usize).filter(|s| s.snapshot_id == id)
    }
}
