//! Skill-graph planner and episode loop.
//!
//! [`plan`] decomposes a goal item into an ordered skill list by simulating
//! acquisitions against a virtual inventory: to obtain an item, apply its
//! producing skill one attempt at a time, recursively acquiring tools,
//! stations, and ingredients first. The emitted order is therefore executable
//! as-is when every attempt succeeds, which the dry-run check relies on.
//!
//! [`run_episode`] is the multi-round loop: plan from the current state,
//! execute the top skill, observe the outcome, replan.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::kb::{reachable_items, CraftingGraph, ItemCounts, ItemId, Skill, SkillId, TaskSpec};
use crate::seed;
use crate::sim::{self, SkillOutcome, SkillStatus, TraceHeader, TraceStep, WorldState};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanProvenance {
    GraphSearch,
    Replan,
}

/// An ordered skill plan; `steps` pairs a skill with its repeat count.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Plan {
    pub steps: Vec<(SkillId, u32)>,
    pub provenance: PlanProvenance,
}

impl Plan {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Total attempts across all steps.
    pub fn total_attempts(&self) -> u32 {
        self.steps.iter().map(|(_, n)| n).sum()
    }

    /// The skill multiset as sorted (skill, count) pairs, for oracle comparison.
    pub fn skill_multiset(&self) -> SkillCounts {
        let mut m = SkillCounts::new();
        for (skill, n) in &self.steps {
            *m.entry(skill.clone()).or_insert(0) += *n;
        }
        m
    }

    pub fn first_skill(&self) -> Option<&SkillId> {
        self.steps.first().map(|(s, _)| s)
    }
}

pub type SkillCounts = std::collections::BTreeMap<SkillId, u32>;

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error("goal {0} is not plannable from the current state")]
    Unplannable(ItemId),
    #[error("unknown goal item {0}")]
    UnknownGoal(ItemId),
}

struct Decomposer<'a> {
    graph: &'a CraftingGraph,
    /// Items obtainable from the planning state; producers whose tool or
    /// station cannot ever be obtained are excluded up front.
    reachable: BTreeSet<ItemId>,
    inventory: ItemCounts,
    emitted: Vec<SkillId>,
    in_progress: BTreeSet<ItemId>,
}

impl<'a> Decomposer<'a> {
    fn count(&self, item: &ItemId) -> u32 {
        self.inventory.get(item).copied().unwrap_or(0)
    }

    /// Pick the producer for `item`: the lexicographically first skill, among
    /// those producing it, whose own requirements are reachable.
    fn producer(&self, item: &ItemId) -> Option<&'a Skill> {
        self.graph
            .skills
            .values()
            .filter(|s| s.produces.contains_key(item))
            .find(|s| {
                let tool_ok = s
                    .requires_tool
                    .as_ref()
                    .map_or(true, |t| self.reachable.contains(t));
                let station_ok = s
                    .requires_station
                    .item()
                    .map_or(true, |st| self.reachable.contains(&st));
                let inputs_ok = s.consumes.keys().all(|i| self.reachable.contains(i));
                tool_ok && station_ok && inputs_ok
            })
    }

    fn acquire(&mut self, item: &ItemId, count: u32) -> Result<(), PlanError> {
        if self.count(item) >= count {
            return Ok(());
        }
        if self.in_progress.contains(item) {
            return Err(PlanError::Unplannable(item.clone()));
        }
        self.in_progress.insert(item.clone());
        while self.count(item) < count {
            let skill = self
                .producer(item)
                .ok_or_else(|| PlanError::Unplannable(item.clone()))?
                .clone();
            // Acquiring one requirement can consume another (sticks eat the
            // planks acquired just before), so loop until all hold at once.
            // Production chains form a DAG, so this terminates.
            loop {
                let mut needs: Vec<(ItemId, u32)> = Vec::new();
                if let Some(tool) = &skill.requires_tool {
                    needs.push((tool.clone(), 1));
                }
                if let Some(station) = skill.requires_station.item() {
                    needs.push((station, 1));
                }
                for (input, n) in &skill.consumes {
                    needs.push((input.clone(), *n));
                }
                match needs.into_iter().find(|(i, n)| self.count(i) < *n) {
                    None => break,
                    Some((item, n)) => self.acquire(&item, n)?,
                }
            }
            for (input, n) in &skill.consumes {
                let entry = self.inventory.get_mut(input).expect("acquired above");
                *entry -= n;
                if *entry == 0 {
                    self.inventory.remove(input);
                }
            }
            for (produced, n) in &skill.produces {
                *self.inventory.entry(produced.clone()).or_insert(0) += n;
            }
            self.emitted.push(skill.id.clone());
        }
        self.in_progress.remove(item);
        Ok(())
    }
}

/// Plan an ordered skill list that obtains `goal` from `state`.
pub fn plan(
    graph: &CraftingGraph,
    goal: &(ItemId, u32),
    state: &WorldState,
) -> Result<Plan, PlanError> {
    plan_with_provenance(graph, goal, state, PlanProvenance::GraphSearch)
}

fn plan_with_provenance(
    graph: &CraftingGraph,
    goal: &(ItemId, u32),
    state: &WorldState,
    provenance: PlanProvenance,
) -> Result<Plan, PlanError> {
    let (goal_item, goal_count) = goal;
    if !graph.items.contains_key(goal_item) {
        return Err(PlanError::UnknownGoal(goal_item.clone()));
    }
    if state.count_of(goal_item) >= *goal_count {
        return Ok(Plan {
            steps: Vec::new(),
            provenance,
        });
    }
    let reachable = reachable_items(graph, &state.inventory);
    if !reachable.contains(goal_item) {
        return Err(PlanError::Unplannable(goal_item.clone()));
    }
    let mut decomposer = Decomposer {
        graph,
        reachable,
        inventory: state.inventory.clone(),
        emitted: Vec::new(),
        in_progress: BTreeSet::new(),
    };
    decomposer.acquire(goal_item, *goal_count)?;
    let mut steps: Vec<(SkillId, u32)> = Vec::new();
    for skill in decomposer.emitted {
        match steps.last_mut() {
            Some((last, n)) if *last == skill => *n += 1,
            _ => steps.push((skill, 1)),
        }
    }
    Ok(Plan { steps, provenance })
}

/// Stateless replanning from the current state; the previous round's outcome
/// is recorded in the episode trace only.
pub fn replan(
    graph: &CraftingGraph,
    goal: &(ItemId, u32),
    state: &WorldState,
    _last_outcome: &SkillOutcome,
) -> Result<Plan, PlanError> {
    plan_with_provenance(graph, goal, state, PlanProvenance::Replan)
}

/// Verify a plan executes to the goal when every attempt succeeds.
///
/// Runs the plan in a copy of the simulator with success forced and an
/// unlimited budget; any precondition failure is reported.
pub fn dry_run(
    graph: &CraftingGraph,
    plan: &Plan,
    state: &WorldState,
    goal: &(ItemId, u32),
) -> Result<u32, String> {
    let mut forced = graph.clone();
    for skill in forced.skills.values_mut() {
        skill.base_success_prob = 1.0;
    }
    let mut current = state.clone();
    current.max_steps = u32::MAX;
    let mut steps_total = 0u32;
    for (skill_id, repeat) in &plan.steps {
        for _ in 0..*repeat {
            let (next, outcome) =
                sim::execute_skill(&forced, &current, skill_id).map_err(|e| e.to_string())?;
            if outcome.status != SkillStatus::Success {
                return Err(format!(
                    "dry-run failure at {skill_id}: {:?}",
                    outcome.fail_reason
                ));
            }
            steps_total += outcome.steps_consumed;
            current = next;
        }
    }
    if current.count_of(&goal.0) < goal.1 {
        return Err(format!(
            "plan completes with {} of {}, needed {}",
            current.count_of(&goal.0),
            goal.0,
            goal.1
        ));
    }
    Ok(steps_total)
}

/// One plan/execute/observe round of an episode.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub plan: Plan,
    pub executed: Option<SkillId>,
    pub outcome: Option<SkillOutcome>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub task: String,
    pub seed: u64,
    pub success: bool,
    pub rounds: u32,
    pub steps_used: u32,
    pub trace: Vec<RoundRecord>,
}

/// Round cap preventing livelock when the budget is large and a skill's
/// success probability is tiny.
pub const DEFAULT_ROUND_CAP: u32 = 100;

/// Run one seeded episode of `task`: plan, execute the top skill, replan.
pub fn run_episode(graph: &CraftingGraph, task: &TaskSpec, seed_value: u64) -> EpisodeResult {
    run_episode_capped(graph, task, seed_value, DEFAULT_ROUND_CAP)
}

pub fn run_episode_capped(
    graph: &CraftingGraph,
    task: &TaskSpec,
    seed_value: u64,
    round_cap: u32,
) -> EpisodeResult {
    let goal = (task.goal.clone(), task.goal_count);
    let mut state = sim::reset(graph, task, seed_value);
    let mut trace = Vec::new();
    let mut last_outcome: Option<SkillOutcome> = None;
    let mut round = 0u32;
    let success = loop {
        round += 1;
        if round > round_cap {
            break false;
        }
        let planned = match last_outcome {
            None => plan(graph, &goal, &state),
            Some(outcome) => replan(graph, &goal, &state, &outcome),
        };
        let current_plan = match planned {
            Ok(p) => p,
            Err(_) => break false,
        };
        if current_plan.is_empty() {
            trace.push(RoundRecord {
                round,
                plan: current_plan,
                executed: None,
                outcome: None,
            });
            break true;
        }
        let skill_id = current_plan.first_skill().unwrap().clone();
        let (next, outcome) =
            sim::execute_skill(graph, &state, &skill_id).expect("planned skills exist");
        trace.push(RoundRecord {
            round,
            plan: current_plan,
            executed: Some(skill_id),
            outcome: Some(outcome),
        });
        state = next;
        if outcome.fail_reason == Some(crate::sim::FailReason::BudgetExhausted) {
            break false;
        }
        last_outcome = Some(outcome);
    };
    EpisodeResult {
        task: task.id.clone(),
        seed: seed_value,
        success,
        rounds: round.min(round_cap),
        steps_used: state.steps_used,
        trace,
    }
}

/// Convert an episode trace to the replayable on-disk format.
pub fn episode_trace(result: &EpisodeResult) -> (TraceHeader, Vec<TraceStep>) {
    let header = TraceHeader {
        version: 1,
        task: result.task.clone(),
        seed: result.seed,
    };
    let mut steps_used = 0u32;
    let steps = result
        .trace
        .iter()
        .filter_map(|r| {
            let skill = r.executed.clone()?;
            let outcome = r.outcome?;
            steps_used = match outcome.fail_reason {
                Some(crate::sim::FailReason::BudgetExhausted) => result.steps_used,
                _ => steps_used + outcome.steps_consumed,
            };
            Some(TraceStep {
                skill,
                status: outcome.status,
                fail_reason: outcome.fail_reason,
                steps_used,
            })
        })
        .collect();
    (header, steps)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    pub category: String,
    pub episodes: u32,
    pub successes: u32,
    pub success_rate: f64,
    pub mean_rounds: f64,
    pub mean_steps: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SppReport {
    pub master_seed: u64,
    pub episodes_per_task: u32,
    pub tasks: Vec<TaskReport>,
}

impl SppReport {
    pub fn mean_success_rate(&self) -> f64 {
        if self.tasks.is_empty() {
            return 0.0;
        }
        self.tasks.iter().map(|t| t.success_rate).sum::<f64>() / self.tasks.len() as f64
    }
}

/// Run every task for `episodes_per_task` seeded episodes and aggregate
/// success rates. Episode seeds derive from (master seed, task id, index),
/// so the same master seed always reproduces the same report.
pub fn run_benchmark(
    graph: &CraftingGraph,
    tasks: &[TaskSpec],
    episodes_per_task: u32,
    master_seed: u64,
) -> SppReport {
    use rayon::prelude::*;
    let mut task_reports: Vec<TaskReport> = tasks
        .par_iter()
        .map(|task| {
            let results: Vec<EpisodeResult> = (0..episodes_per_task)
                .into_par_iter()
                .map(|i| {
                    let s =
                        seed::mix_indexed(master_seed, &format!("episode:{}", task.id), i as u64);
                    run_episode(graph, task, s)
                })
                .collect();
            let successes = results.iter().filter(|r| r.success).count() as u32;
            let n = results.len() as f64;
            TaskReport {
                task: task.id.clone(),
                category: task.category.as_str().to_string(),
                episodes: episodes_per_task,
                successes,
                success_rate: successes as f64 / episodes_per_task as f64,
                mean_rounds: results.iter().map(|r| r.rounds as f64).sum::<f64>() / n,
                mean_steps: results.iter().map(|r| r.steps_used as f64).sum::<f64>() / n,
            }
        })
        .collect();
    task_reports.sort_by(|a, b| (&a.category, &a.task).cmp(&(&b.category, &b.task)));
    SppReport {
        master_seed,
        episodes_per_task,
        tasks: task_reports,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture_kb_dir;
    use crate::kb::load_registry;

    fn graph() -> CraftingGraph {
        load_registry(fixture_kb_dir()).unwrap()
    }

    fn forced(p: f64) -> CraftingGraph {
        let mut g = graph();
        for skill in g.skills.values_mut() {
            skill.base_success_prob = p;
        }
        g
    }

    #[test]
    fn stick_plan_from_empty_inventory() {
        let graph = graph();
        let task = graph.task("stick").unwrap();
        let state = sim::reset(&graph, task, 0);
        let plan = plan(&graph, &(ItemId::from("stick"), 1), &state).unwrap();
        let ids: Vec<&str> = plan.steps.iter().map(|(s, _)| s.as_str()).collect();
        assert_eq!(ids, ["gather_log", "craft_planks", "craft_stick"]);
        assert_eq!(plan.total_attempts(), 3);
    }

    #[test]
    fn satisfied_goal_plans_empty() {
        let graph = graph();
        let task = graph.task("stick").unwrap();
        let mut state = sim::reset(&graph, task, 0);
        state.inventory.insert(ItemId::from("stick"), 1);
        let plan = plan(&graph, &(ItemId::from("stick"), 1), &state).unwrap();
        assert!(plan.is_empty());
    }

    #[test]
    fn unreachable_goal_is_unplannable() {
        let mut graph = graph();
        graph.skills.retain(|_, s| s.id.as_str() != "mine_cobblestone");
        let task = graph.task("stick").unwrap();
        let state = sim::reset(&graph, task, 0);
        let err = plan(&graph, &(ItemId::from("cobblestone"), 1), &state).unwrap_err();
        assert!(matches!(err, PlanError::Unplannable(_)));
    }

    #[test]
    fn midway_state_drops_satisfied_subgoals() {
        let graph = graph();
        let task = graph.task("stick").unwrap();
        let mut state = sim::reset(&graph, task, 0);
        state.inventory.insert(ItemId::from("planks"), 4);
        let plan = plan(&graph, &(ItemId::from("stick"), 1), &state).unwrap();
        let ids: Vec<&str> = plan.steps.iter().map(|(s, _)| s.as_str()).collect();
        assert_eq!(ids, ["craft_stick"]);
    }

    #[test]
    fn all_fixture_task_plans_pass_dry_run() {
        let graph = graph();
        for task in &graph.tasks {
            let state = sim::reset(&graph, task, 123);
            let goal = (task.goal.clone(), task.goal_count);
            let p = plan(&graph, &goal, &state).unwrap_or_else(|e| panic!("{}: {e}", task.id));
            let steps =
                dry_run(&graph, &p, &state, &goal).unwrap_or_else(|e| panic!("{}: {e}", task.id));
            assert!(
                steps <= task.max_steps,
                "{}: plan needs {steps} steps, budget {}",
                task.id,
                task.max_steps
            );
        }
    }

    #[test]
    fn replanning_is_stateless() {
        let graph = forced(1.0);
        let task = graph.task("stick").unwrap();
        let state = sim::reset(&graph, task, 5);
        let goal = (ItemId::from("stick"), 1);
        let first = plan(&graph, &goal, &state).unwrap();
        let fail = SkillOutcome {
            status: SkillStatus::Fail,
            steps_consumed: 200,
            fail_reason: Some(crate::sim::FailReason::RandomFailure),
        };
        // Inventory unchanged after a failure, so the replanned steps match.
        let second = replan(&graph, &goal, &state, &fail).unwrap();
        assert_eq!(first.steps, second.steps);
        assert_eq!(second.provenance, PlanProvenance::Replan);
    }

    #[test]
    fn stick_episode_uses_220_steps_when_deterministic() {
        let graph = forced(1.0);
        let task = graph.task("stick").unwrap();
        let result = run_episode(&graph, task, 77);
        assert!(result.success);
        assert_eq!(result.steps_used, 220);
        // Three skill rounds plus the empty-plan success round.
        assert_eq!(result.rounds, 4);
    }

    #[test]
    fn tiny_budget_fails_with_budget_exhausted() {
        let graph = forced(1.0);
        let mut task = graph.task("stick").unwrap().clone();
        task.max_steps = 1;
        let result = run_episode(&graph, &task, 1);
        assert!(!result.success);
        let last = result.trace.last().unwrap();
        assert_eq!(
            last.outcome.unwrap().fail_reason,
            Some(crate::sim::FailReason::BudgetExhausted)
        );
    }

    #[test]
    fn episodes_are_reproducible() {
        let graph = graph();
        let task = graph.task("torch").unwrap();
        let a = run_episode(&graph, task, 9);
        let b = run_episode(&graph, task, 9);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn deterministic_benchmark_hits_every_task() {
        let graph = forced(1.0);
        let report = run_benchmark(&graph, &graph.tasks, 3, 42);
        assert_eq!(report.tasks.len(), 24);
        for task in &report.tasks {
            assert_eq!(task.success_rate, 1.0, "task {}", task.task);
        }
    }

    #[test]
    fn zero_probability_means_zero_success() {
        let mut graph = graph();
        graph
            .skills
            .get_mut(&SkillId::from("gather_log"))
            .unwrap()
            .base_success_prob = f64::MIN_POSITIVE;
        let task = graph.task("stick").unwrap().clone();
        let report = run_benchmark(&graph, &[task], 5, 3);
        assert_eq!(report.tasks[0].success_rate, 0.0);
    }

    #[test]
    fn benchmark_report_bytes_are_reproducible() {
        let graph = graph();
        let tasks: Vec<TaskSpec> = graph.tasks.iter().take(4).cloned().collect();
        let a = run_benchmark(&graph, &tasks, 5, 11);
        let b = run_benchmark(&graph, &tasks, 5, 11);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn raising_success_prob_never_lowers_paired_success() {
        let base = forced(0.5);
        let better = forced(0.9);
        let task = base.task("stick").unwrap();
        for s in 0..30 {
            let a = run_episode(&base, task, s);
            let b = run_episode(&better, task, s);
            // Paired seeds: the stronger agent succeeds whenever the weaker
            // one does on this single-path task.
            if a.success {
                assert!(b.success, "seed {s}");
            }
        }
    }
}
