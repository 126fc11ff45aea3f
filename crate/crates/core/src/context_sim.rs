//! Context assembly with thinking retention, and a Monte-Carlo simulator of
//! test-time context management for long tool-using trajectories.
//!
//! A simulated step appends one tool-call/result pair: an assistant message
//! issuing the call and a tool message carrying its result, which may hold
//! one evidence item. A trajectory succeeds once it holds all `K` items at
//! the same time, counting both live tool results and retained notes.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{LabError, Result};
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Message {
    pub role: Role,
    /// Reasoning block; only assistant messages carry one.
    pub reasoning: Option<String>,
    pub body: String,
    pub token_cost: u64,
    /// Evidence item found by this tool result.
    pub evidence: Option<usize>,
}

impl Message {
    pub fn new(role: Role, body: impl Into<String>, token_cost: u64) -> Self {
        Self {
            role,
            reasoning: None,
            body: body.into(),
            token_cost,
            evidence: None,
        }
    }

    pub fn with_reasoning(mut self, reasoning: impl Into<String>) -> Self {
        self.reasoning = Some(reasoning.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.reasoning.is_some() && self.role != Role::Assistant {
            return Err(LabError::Invalid(format!(
                "{:?} message carries reasoning",
                self.role
            )));
        }
        if self.evidence.is_some() && self.role != Role::Tool {
            return Err(LabError::Invalid(format!(
                "{:?} message carries evidence",
                self.role
            )));
        }
        Ok(())
    }
}

/// Drops each assistant reasoning block that has a later user message and
/// keeps everything else, in order.
pub fn assemble_context(messages: &[Message]) -> Vec<Message> {
    let last_user = messages.iter().rposition(|m| m.role == Role::User);
    messages
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let mut m = m.clone();
            if m.role == Role::Assistant && last_user.is_some_and(|u| u > i) {
                m.reasoning = None;
            }
            m
        })
        .collect()
}

/// Evidence carried across resets.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Notes {
    pub items: BTreeSet<usize>,
    pub cost: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrajectoryState {
    pub messages: Vec<Message>,
    pub notes: Notes,
    pub tokens_used: u64,
    pub steps: usize,
}

impl TrajectoryState {
    pub fn new(messages: Vec<Message>) -> Self {
        let mut s = Self {
            messages,
            notes: Notes::default(),
            tokens_used: 0,
            steps: 0,
        };
        s.recompute_tokens();
        s
    }

    pub fn recompute_tokens(&mut self) {
        self.tokens_used =
            self.messages.iter().map(|m| m.token_cost).sum::<u64>() + self.notes.cost;
    }

    pub fn held_evidence(&self) -> BTreeSet<usize> {
        let mut held = self.notes.items.clone();
        held.extend(self.messages.iter().filter_map(|m| m.evidence));
        held
    }

    /// Start indices of assistant messages immediately answered by a tool
    /// message.
    pub fn tool_pairs(&self) -> Vec<usize> {
        self.messages
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[0].role == Role::Assistant && w[1].role == Role::Tool)
            .map(|(i, _)| i)
            .collect()
    }

    fn is_tool_history(&self, i: usize, pairs: &[usize]) -> bool {
        self.messages[i].role == Role::Tool || pairs.contains(&i)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Budget {
    pub window: u64,
    pub trigger_fraction: f64,
}

impl Budget {
    pub const DEFAULT_TRIGGER: f64 = 0.8;

    pub fn new(window: u64, trigger_fraction: f64) -> Result<Self> {
        if window == 0 {
            return Err(LabError::Invalid("window must be positive".into()));
        }
        if !(trigger_fraction > 0.0 && trigger_fraction < 1.0) {
            return Err(LabError::Invalid(format!(
                "trigger fraction {trigger_fraction} outside (0, 1)"
            )));
        }
        Ok(Self {
            window,
            trigger_fraction,
        })
    }

    pub fn triggered(&self, tokens_used: u64) -> bool {
        tokens_used as f64 >= self.trigger_fraction * self.window as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    Summary,
    Discard75,
    DiscardAll,
    ParallelFewestStep(usize),
    NoManagement,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Summary => f.write_str("Summary"),
            Strategy::Discard75 => f.write_str("Discard75"),
            Strategy::DiscardAll => f.write_str("DiscardAll"),
            Strategy::ParallelFewestStep(n) => write!(f, "ParallelFewestStep({n})"),
            Strategy::NoManagement => f.write_str("NoManagement"),
        }
    }
}

impl FromStr for Strategy {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "Summary" => Ok(Strategy::Summary),
            "Discard75" => Ok(Strategy::Discard75),
            "DiscardAll" => Ok(Strategy::DiscardAll),
            "NoManagement" => Ok(Strategy::NoManagement),
            _ => {
                let n = s
                    .strip_prefix("ParallelFewestStep(")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|n| n.parse::<usize>().ok())
                    .ok_or_else(|| LabError::Parse(format!("unknown strategy {s:?}")))?;
                if n == 0 {
                    return Err(LabError::Invalid("parallel strategy needs N ≥ 1".into()));
                }
                Ok(Strategy::ParallelFewestStep(n))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticTask {
    pub evidence_required: usize,
    pub find_prob: f64,
    /// Tool-pair cost is uniform on `[step_cost_min, step_cost_max]`.
    pub step_cost_min: u64,
    pub step_cost_max: u64,
    pub fidelity: f64,
    pub system_cost: u64,
    pub user_cost: u64,
    /// Cost of the note a summary leaves behind.
    pub summary_cost: u64,
    /// Cost of the findings note kept across a full discard.
    pub note_cost: u64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            evidence_required: 4,
            find_prob: 0.1,
            step_cost_min: 40,
            step_cost_max: 160,
            fidelity: 0.7,
            system_cost: 200,
            user_cost: 100,
            summary_cost: 120,
            note_cost: 40,
        }
    }
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        if self.evidence_required == 0 {
            return Err(LabError::Invalid("K must be at least 1".into()));
        }
        for (name, p) in [("find_prob", self.find_prob), ("fidelity", self.fidelity)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(LabError::Invalid(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if self.step_cost_min > self.step_cost_max {
            return Err(LabError::Invalid("step cost range is empty".into()));
        }
        Ok(())
    }

    fn prompt(&self) -> Vec<Message> {
        vec![
            Message::new(Role::System, "system", self.system_cost),
            Message::new(Role::User, "task", self.user_cost),
        ]
    }
}

/// Compresses tool history. Fails with `Degenerate` when the result would
/// not fit below the window.
pub fn apply_strategy(
    state: &TrajectoryState,
    strategy: Strategy,
    task: &SyntheticTask,
    budget: &Budget,
    rng: &mut Stream,
) -> Result<TrajectoryState> {
    let pairs = state.tool_pairs();
    let mut next = state.clone();
    match strategy {
        Strategy::NoManagement => {
            return Err(LabError::Invalid(
                "NoManagement has no compression step".into(),
            ));
        }
        Strategy::ParallelFewestStep(_) => {
            return Err(LabError::Invalid(
                "parallel sampling acts on whole trajectories".into(),
            ));
        }
        Strategy::Summary => {
            let held = state.held_evidence();
            next.notes = Notes {
                items: held
                    .into_iter()
                    .filter(|_| rng.bernoulli(task.fidelity))
                    .collect(),
                cost: task.summary_cost,
            };
            next.messages = keep_where(state, |i| !state.is_tool_history(i, &pairs));
        }
        Strategy::Discard75 => {
            let drop: BTreeSet<usize> = pairs[..pairs.len() * 3 / 4]
                .iter()
                .flat_map(|&i| [i, i + 1])
                .collect();
            next.messages = keep_where(state, |i| !drop.contains(&i));
        }
        Strategy::DiscardAll => {
            next.notes.items = state.held_evidence();
            if !next.notes.items.is_empty() {
                next.notes.cost = next.notes.cost.max(task.note_cost);
            }
            next.messages = keep_where(state, |i| !state.is_tool_history(i, &pairs));
        }
    }
    next.recompute_tokens();
    if next.tokens_used >= budget.window {
        return Err(LabError::Degenerate(format!(
            "{strategy} leaves {} tokens in a window of {}",
            next.tokens_used, budget.window
        )));
    }
    Ok(next)
}

fn keep_where(state: &TrajectoryState, keep: impl Fn(usize) -> bool) -> Vec<Message> {
    state
        .messages
        .iter()
        .enumerate()
        .filter(|(i, _)| keep(*i))
        .map(|(_, m)| m.clone())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrialResult {
    pub success: bool,
    pub steps: usize,
    /// Tokens processed over the trajectory, summed over parallel members.
    pub total_tokens: u64,
}

/// Runs one trajectory, calling `observe` after every strategy application.
pub fn run_trajectory_observed(
    task: &SyntheticTask,
    budget: &Budget,
    strategy: Strategy,
    max_steps: usize,
    seed: u64,
    observe: &mut dyn FnMut(&TrajectoryState),
) -> Result<TrialResult> {
    task.validate()?;
    if max_steps == 0 {
        return Err(LabError::Invalid("max_steps must be at least 1".into()));
    }
    if let Strategy::ParallelFewestStep(n) = strategy {
        return run_parallel(task, budget, n, max_steps, seed, observe);
    }
    let mut rng = Stream::new(seed, "ctx.trajectory", 0);
    let mut compress_rng = Stream::new(seed, "ctx.compress", 0);
    let mut state = TrajectoryState::new(task.prompt());
    let mut total_tokens = state.tokens_used;
    let k = task.evidence_required;
    let fail = |steps, total_tokens| TrialResult {
        success: false,
        steps,
        total_tokens,
    };
    if state.tokens_used >= budget.window {
        return Ok(fail(0, total_tokens));
    }
    while state.steps < max_steps {
        // draws are taken unconditionally so every strategy sees the same
        // sequence of step outcomes
        let cost = task.step_cost_min + rng.below(task.step_cost_max - task.step_cost_min + 1);
        let found = rng.bernoulli(task.find_prob);
        let pick = rng.uniform();

        let managed = strategy != Strategy::NoManagement;
        let mut compress = |state: &mut TrajectoryState| -> Result<bool> {
            match apply_strategy(state, strategy, task, budget, &mut compress_rng) {
                Ok(next) => {
                    *state = next;
                    observe(state);
                    Ok(true)
                }
                Err(LabError::Degenerate(_)) => Ok(false),
                Err(e) => Err(e),
            }
        };
        if managed && budget.triggered(state.tokens_used) && !compress(&mut state)? {
            return Ok(fail(state.steps, total_tokens));
        }
        if state.tokens_used + cost >= budget.window
            && (!managed || !compress(&mut state)? || state.tokens_used + cost >= budget.window)
        {
            return Ok(fail(state.steps, total_tokens));
        }

        let held = state.held_evidence();
        let missing: Vec<usize> = (0..k).filter(|e| !held.contains(e)).collect();
        let call_cost = cost / 4;
        let mut result = Message::new(Role::Tool, "result", cost - call_cost);
        if found && !missing.is_empty() {
            let idx = ((pick * missing.len() as f64) as usize).min(missing.len() - 1);
            result.evidence = Some(missing[idx]);
        }
        state
            .messages
            .push(Message::new(Role::Assistant, "call", call_cost).with_reasoning("plan"));
        state.messages.push(result);
        state.steps += 1;
        state.recompute_tokens();
        total_tokens += cost;
        if state.held_evidence().len() == k {
            return Ok(TrialResult {
                success: true,
                steps: state.steps,
                total_tokens,
            });
        }
    }
    Ok(fail(state.steps, total_tokens))
}

pub fn run_trajectory(
    task: &SyntheticTask,
    budget: &Budget,
    strategy: Strategy,
    max_steps: usize,
    seed: u64,
) -> Result<TrialResult> {
    run_trajectory_observed(task, budget, strategy, max_steps, seed, &mut |_| {})
}

/// Seed of parallel member `j`; independent of the member count.
pub fn parallel_member_seed(seed: u64, j: usize) -> u64 {
    Stream::child_seed(seed, "ctx.parallel", j as u64)
}

/// Member results of a parallel run, in member order.
pub fn parallel_members(
    task: &SyntheticTask,
    budget: &Budget,
    n: usize,
    max_steps: usize,
    seed: u64,
) -> Result<Vec<TrialResult>> {
    (0..n)
        .map(|j| {
            run_trajectory(
                task,
                budget,
                Strategy::NoManagement,
                max_steps,
                parallel_member_seed(seed, j),
            )
        })
        .collect()
}

fn run_parallel(
    task: &SyntheticTask,
    budget: &Budget,
    n: usize,
    max_steps: usize,
    seed: u64,
    observe: &mut dyn FnMut(&TrajectoryState),
) -> Result<TrialResult> {
    if n == 0 {
        return Err(LabError::Invalid("parallel strategy needs N ≥ 1".into()));
    }
    let members = (0..n)
        .map(|j| {
            run_trajectory_observed(
                task,
                budget,
                Strategy::NoManagement,
                max_steps,
                parallel_member_seed(seed, j),
                observe,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let total_tokens = members.iter().map(|m| m.total_tokens).sum();
    let best = members.iter().filter(|m| m.success).min_by_key(|m| m.steps);
    Ok(match best {
        Some(b) => TrialResult {
            success: true,
            steps: b.steps,
            total_tokens,
        },
        None => TrialResult {
            success: false,
            steps: members.iter().map(|m| m.steps).max().unwrap_or(0),
            total_tokens,
        },
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentGrid {
    pub strategies: Vec<Strategy>,
    pub windows: Vec<u64>,
    pub trigger_fraction: f64,
    pub trials: usize,
    pub max_steps: usize,
    pub task: SyntheticTask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentRow {
    pub strategy: Strategy,
    pub window: u64,
    pub success_rate: f64,
    pub mean_steps: f64,
    pub mean_tokens: f64,
}

pub const EXPERIMENT_CSV_HEADER: &str = "strategy,window,success_rate,mean_steps,mean_tokens";

impl ExperimentRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:?},{:?},{:?}",
            self.strategy, self.window, self.success_rate, self.mean_steps, self.mean_tokens
        )
    }
}

/// Seed of trial `i`, shared by every cell of the grid.
pub fn trial_seed(seed: u64, i: usize) -> u64 {
    Stream::child_seed(seed, "ctx.trial", i as u64)
}

pub fn run_experiment(grid: &ExperimentGrid, seed: u64) -> Result<Vec<ExperimentRow>> {
    if grid.trials == 0 {
        return Err(LabError::Invalid("trial count must be at least 1".into()));
    }
    let mut rows = Vec::with_capacity(grid.strategies.len() * grid.windows.len());
    for &strategy in &grid.strategies {
        for &window in &grid.windows {
            let budget = Budget::new(window, grid.trigger_fraction)?;
            let (mut wins, mut steps, mut tokens) = (0usize, 0usize, 0u64);
            for i in 0..grid.trials {
                let r = run_trajectory(
                    &grid.task,
                    &budget,
                    strategy,
                    grid.max_steps,
                    trial_seed(seed, i),
                )?;
                wins += r.success as usize;
                steps += r.steps;
                tokens += r.total_tokens;
            }
            let n = grid.trials as f64;
            rows.push(ExperimentRow {
                strategy,
                window,
                success_rate: wins as f64 / n,
                mean_steps: steps as f64 / n,
                mean_tokens: tokens as f64 / n,
            });
        }
    }
    Ok(rows)
}

pub fn experiment_csv(rows: &[ExperimentRow]) -> String {
    let mut out = String::from(EXPERIMENT_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assistant(reasoning: &str) -> Message {
        Message::new(Role::Assistant, "a", 5).with_reasoning(reasoning)
    }

    fn tool(cost: u64, evidence: Option<usize>) -> Message {
        Message {
            evidence,
            ..Message::new(Role::Tool, "t", cost)
        }
    }

    fn prompt() -> Vec<Message> {
        vec![
            Message::new(Role::System, "s", 10),
            Message::new(Role::User, "u", 7),
        ]
    }

    #[test]
    fn reasoning_kept_without_later_user() {
        let mut msgs = prompt();
        msgs.extend([assistant("r1"), tool(3, None), assistant("r2")]);
        assert_eq!(assemble_context(&msgs), msgs);
    }

    #[test]
    fn reasoning_dropped_before_new_user() {
        let mut msgs = prompt();
        msgs.extend([
            assistant("r1"),
            tool(3, None),
            Message::new(Role::User, "u2", 2),
            assistant("r2"),
        ]);
        let out = assemble_context(&msgs);
        assert_eq!(out[2].reasoning, None);
        assert_eq!(out[3], msgs[3]);
        assert_eq!(out[5].reasoning.as_deref(), Some("r2"));
    }

    #[test]
    fn no_reasoning_is_identity() {
        let mut msgs = prompt();
        msgs.extend([
            Message::new(Role::Assistant, "a", 1),
            tool(3, None),
            Message::new(Role::User, "u", 1),
        ]);
        assert_eq!(assemble_context(&msgs), msgs);
    }

    fn budget() -> Budget {
        Budget::new(1000, 0.8).unwrap()
    }

    fn state_with_pairs(n: usize, evidence: bool) -> TrajectoryState {
        let mut msgs = prompt();
        for i in 0..n {
            msgs.push(assistant("r"));
            msgs.push(tool(20, evidence.then_some(i)));
        }
        TrajectoryState::new(msgs)
    }

    #[test]
    fn discard_all_leaves_prompt_cost() {
        let s = state_with_pairs(3, false);
        let mut rng = Stream::new(0, "test.ctx", 0);
        let out = apply_strategy(
            &s,
            Strategy::DiscardAll,
            &SyntheticTask::default(),
            &budget(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(out.tokens_used, 17);
        assert!(out.notes.items.is_empty());
    }

    #[test]
    fn discard_all_moves_findings_to_notes() {
        let s = state_with_pairs(3, true);
        let mut rng = Stream::new(0, "test.ctx", 0);
        let task = SyntheticTask::default();
        let out = apply_strategy(&s, Strategy::DiscardAll, &task, &budget(), &mut rng).unwrap();
        assert_eq!(out.held_evidence(), s.held_evidence());
        assert_eq!(out.tokens_used, 17 + task.note_cost);
    }

    #[test]
    fn discard75_removes_three_of_four_oldest_pairs() {
        let s = state_with_pairs(4, true);
        let mut rng = Stream::new(0, "test.ctx", 0);
        let out = apply_strategy(
            &s,
            Strategy::Discard75,
            &SyntheticTask::default(),
            &budget(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(out.tool_pairs().len(), 1);
        assert_eq!(out.messages[3].evidence, Some(3));
        assert_eq!(out.held_evidence(), BTreeSet::from([3]));
    }

    #[test]
    fn summary_boundary_fidelities() {
        let s = state_with_pairs(3, true);
        for (fidelity, expect) in [(1.0, s.held_evidence()), (0.0, BTreeSet::new())] {
            let task = SyntheticTask {
                fidelity,
                ..SyntheticTask::default()
            };
            let mut rng = Stream::new(0, "test.ctx", 0);
            let out = apply_strategy(&s, Strategy::Summary, &task, &budget(), &mut rng).unwrap();
            assert_eq!(out.notes.items, expect);
            assert!(out.tool_pairs().is_empty());
            assert_eq!(out.tokens_used, 17 + task.summary_cost);
        }
    }

    #[test]
    fn no_management_rejected() {
        let s = state_with_pairs(1, false);
        let mut rng = Stream::new(0, "test.ctx", 0);
        assert!(apply_strategy(
            &s,
            Strategy::NoManagement,
            &SyntheticTask::default(),
            &budget(),
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn deterministic_task_takes_k_steps() {
        let task = SyntheticTask {
            find_prob: 1.0,
            evidence_required: 3,
            ..SyntheticTask::default()
        };
        let b = Budget::new(1_000_000, 0.8).unwrap();
        let r = run_trajectory(&task, &b, Strategy::NoManagement, 50, 9).unwrap();
        assert!(r.success);
        assert_eq!(r.steps, 3);
    }

    #[test]
    fn unreachable_trigger_matches_no_management() {
        let task = SyntheticTask::default();
        let b = Budget::new(
            10 * (task.system_cost + task.user_cost + 30 * task.step_cost_max),
            0.8,
        )
        .unwrap();
        for seed in 0..20 {
            let base = run_trajectory(&task, &b, Strategy::NoManagement, 30, seed).unwrap();
            for s in [Strategy::Summary, Strategy::Discard75, Strategy::DiscardAll] {
                assert_eq!(run_trajectory(&task, &b, s, 30, seed).unwrap(), base);
            }
        }
    }

    #[test]
    fn parallel_of_one_is_the_derived_member() {
        let task = SyntheticTask::default();
        let b = Budget::new(3000, 0.8).unwrap();
        for seed in 0..20 {
            let p = run_trajectory(&task, &b, Strategy::ParallelFewestStep(1), 100, seed).unwrap();
            let m = run_trajectory(
                &task,
                &b,
                Strategy::NoManagement,
                100,
                parallel_member_seed(seed, 0),
            )
            .unwrap();
            assert_eq!(p, m);
        }
    }

    #[test]
    fn parallel_returns_fewest_successful_steps() {
        let task = SyntheticTask::default();
        let b = Budget::new(4000, 0.8).unwrap();
        for seed in 0..50 {
            let p = run_trajectory(&task, &b, Strategy::ParallelFewestStep(6), 100, seed).unwrap();
            let members = parallel_members(&task, &b, 6, 100, seed).unwrap();
            let mut best = None;
            for m in members.iter().filter(|m| m.success) {
                if best.is_none_or(|s| m.steps < s) {
                    best = Some(m.steps);
                }
            }
            assert_eq!(p.success, best.is_some());
            if let Some(s) = best {
                assert_eq!(p.steps, s);
            }
            assert_eq!(
                p.total_tokens,
                members.iter().map(|m| m.total_tokens).sum::<u64>()
            );
        }
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in [
            Strategy::Summary,
            Strategy::Discard75,
            Strategy::DiscardAll,
            Strategy::ParallelFewestStep(4),
            Strategy::NoManagement,
        ] {
            assert_eq!(s.to_string().parse::<Strategy>().unwrap(), s);
        }
        assert!("ParallelFewestStep(0)".parse::<Strategy>().is_err());
        assert!("Nope".parse::<Strategy>().is_err());
    }

    #[test]
    fn single_trial_row_reproduces_trajectory() {
        let grid = ExperimentGrid {
            strategies: vec![Strategy::DiscardAll],
            windows: vec![2000],
            trigger_fraction: 0.8,
            trials: 1,
            max_steps: 80,
            task: SyntheticTask::default(),
        };
        let rows = run_experiment(&grid, 5).unwrap();
        let r = run_trajectory(
            &grid.task,
            &Budget::new(2000, 0.8).unwrap(),
            Strategy::DiscardAll,
            80,
            trial_seed(5, 0),
        )
        .unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].success_rate, if r.success { 1.0 } else { 0.0 });
        assert_eq!(rows[0].mean_steps, r.steps as f64);
        assert_eq!(rows[0].mean_tokens, r.total_tokens as f64);
        assert!(experiment_csv(&rows)
            .starts_with("strategy,window,success_rate,mean_steps,mean_tokens\nDiscardAll,2000,"));
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(Budget::new(0, 0.8).is_err());
        assert!(Budget::new(10, 1.0).is_err());
        let task = SyntheticTask {
            evidence_required: 0,
            ..SyntheticTask::default()
        };
        assert!(run_trajectory(&task, &budget(), Strategy::Summary, 10, 0).is_err());
        assert!(run_trajectory(
            &SyntheticTask::default(),
            &budget(),
            Strategy::Summary,
            0,
            0
        )
        .is_err());
    }
}
