//! Deterministic seeded simulator: world state, skill execution, observations,
//! and snapshot/trajectory sampling for dataset generation and benchmarks.
//!
//! Every episode owns its own generator state, so independent episodes can run
//! in parallel and replaying a recorded (seed, skill sequence) reproduces every
//! state and outcome bit-for-bit.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::kb::{CraftingGraph, ItemCounts, ItemId, ObjectId, Skill, SkillId, TaskSpec};
use crate::seed;

pub const INVENTORY_SLOTS: u32 = 36;
pub const MAX_LIFE: u32 = 20;
pub const MAX_FOOD: u32 = 20;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkillStatus {
    Running,
    Success,
    Fail,
}

impl SkillStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SkillStatus::Running => "running",
            SkillStatus::Success => "success",
            SkillStatus::Fail => "fail",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailReason {
    MissingTool,
    MissingStation,
    MissingIngredients,
    TargetAbsent,
    BudgetExhausted,
    RandomFailure,
}

impl FailReason {
    pub fn as_str(self) -> &'static str {
        match self {
            FailReason::MissingTool => "missing_tool",
            FailReason::MissingStation => "missing_station",
            FailReason::MissingIngredients => "missing_ingredients",
            FailReason::TargetAbsent => "target_absent",
            FailReason::BudgetExhausted => "budget_exhausted",
            FailReason::RandomFailure => "random_failure",
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct SkillOutcome {
    pub status: SkillStatus,
    pub steps_consumed: u32,
    pub fail_reason: Option<FailReason>,
}

impl SkillOutcome {
    fn success(steps: u32) -> Self {
        SkillOutcome {
            status: SkillStatus::Success,
            steps_consumed: steps,
            fail_reason: None,
        }
    }

    fn fail(steps: u32, reason: FailReason) -> Self {
        SkillOutcome {
            status: SkillStatus::Fail,
            steps_consumed: steps,
            fail_reason: Some(reason),
        }
    }
}

/// The agent's full simulated situation.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub inventory: ItemCounts,
    /// Held tool; set when a skill that requires a tool runs.
    pub equipment: Option<ItemId>,
    pub life: u32,
    pub food: u32,
    pub nearby: BTreeMap<ObjectId, u32>,
    pub sky_visible: bool,
    pub steps_used: u32,
    pub max_steps: u32,
    rng: ChaCha8Rng,
}

/// Pure read-out of the six captioned aspects plus the step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub inventory: ItemCounts,
    pub equipment: Option<ItemId>,
    pub in_sight: BTreeMap<ObjectId, u32>,
    pub life: u32,
    pub food: u32,
    pub sky_visible: bool,
    pub steps_used: u32,
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("unknown skill {0}")]
    UnknownSkill(SkillId),
    #[error("inventory overflow applying skill {0}")]
    InventoryOverflow(SkillId),
}

/// Slots needed to hold `counts`, given per-item stack limits.
pub fn slots_used(graph: &CraftingGraph, counts: &ItemCounts) -> u32 {
    counts
        .iter()
        .map(|(item, &count)| {
            let stack = graph.items.get(item).map_or(64, |i| i.max_stack).max(1);
            count.div_ceil(stack)
        })
        .sum()
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ResetOptions {
    /// Force an underground/night start: the sky is not visible.
    pub night_cave: bool,
}

/// Seeded reset for a task: full life and food, the task's initial items, and
/// nearby objects drawn from the task category's spawn table.
pub fn reset(graph: &CraftingGraph, task: &TaskSpec, seed_value: u64) -> WorldState {
    reset_with(graph, task, seed_value, ResetOptions::default())
}

pub fn reset_with(
    graph: &CraftingGraph,
    task: &TaskSpec,
    seed_value: u64,
    options: ResetOptions,
) -> WorldState {
    let mut rng = seed::rng(seed::mix(seed_value, &["reset", &task.id]));
    let table = &graph.spawn_tables[&task.category];
    let mut nearby = BTreeMap::new();
    for (object, lo, hi) in &table.objects {
        let count = rng.gen_range(*lo..=*hi);
        if count > 0 {
            nearby.insert(object.clone(), count);
        }
    }
    let sky_visible = if options.night_cave {
        false
    } else {
        // Mostly open-air starts; occasionally the agent wakes under cover.
        rng.gen_bool(0.75)
    };
    WorldState {
        inventory: task.initial_items.clone(),
        equipment: None,
        life: MAX_LIFE,
        food: MAX_FOOD,
        nearby,
        sky_visible,
        steps_used: 0,
        max_steps: task.max_steps,
        rng,
    }
}

impl WorldState {
    pub fn observe(&self) -> Observation {
        Observation {
            inventory: self.inventory.clone(),
            equipment: self.equipment.clone(),
            in_sight: self.nearby.clone(),
            life: self.life,
            food: self.food,
            sky_visible: self.sky_visible,
            steps_used: self.steps_used,
        }
    }

    pub fn has_items(&self, needed: &ItemCounts) -> bool {
        needed
            .iter()
            .all(|(item, &count)| self.inventory.get(item).copied().unwrap_or(0) >= count)
    }

    pub fn count_of(&self, item: &ItemId) -> u32 {
        self.inventory.get(item).copied().unwrap_or(0)
    }

    pub fn remaining_steps(&self) -> u32 {
        self.max_steps.saturating_sub(self.steps_used)
    }

    /// Scripted damage/hunger event; the simulator itself never changes
    /// life or food during skill execution.
    pub fn apply_damage_event(&mut self, life_loss: u32, food_loss: u32) {
        self.life = self.life.saturating_sub(life_loss);
        self.food = self.food.saturating_sub(food_loss);
    }

    fn add_items(&mut self, items: &ItemCounts) {
        for (item, count) in items {
            *self.inventory.entry(item.clone()).or_insert(0) += count;
        }
    }

    fn remove_items(&mut self, items: &ItemCounts) {
        for (item, count) in items {
            let entry = self.inventory.get_mut(item).expect("checked before remove");
            *entry -= count;
            if *entry == 0 {
                self.inventory.remove(item);
            }
        }
    }
}

/// Execute one attempt of `skill` against `state`.
///
/// Check order: budget, tool, station, ingredients, target, then the seeded
/// success draw. Failed attempts consume steps but leave the rest of the
/// state untouched; successful attempts apply consumes/produces and decrement
/// a gathered target.
pub fn execute_skill(
    graph: &CraftingGraph,
    state: &WorldState,
    skill_id: &SkillId,
) -> Result<(WorldState, SkillOutcome), SimError> {
    let skill = graph
        .skill(skill_id)
        .ok_or_else(|| SimError::UnknownSkill(skill_id.clone()))?;
    let mut next = state.clone();

    if state.steps_used + skill.step_cost > state.max_steps {
        next.steps_used = state.max_steps;
        return Ok((next, SkillOutcome::fail(skill.step_cost, FailReason::BudgetExhausted)));
    }
    next.steps_used += skill.step_cost;

    if let Some(tool) = &skill.requires_tool {
        if state.count_of(tool) == 0 {
            return Ok((next, SkillOutcome::fail(skill.step_cost, FailReason::MissingTool)));
        }
        next.equipment = Some(tool.clone());
    }
    if let Some(station_item) = skill.requires_station.item() {
        if state.count_of(&station_item) == 0 {
            return Ok((next, SkillOutcome::fail(skill.step_cost, FailReason::MissingStation)));
        }
    }
    if !state.has_items(&skill.consumes) {
        return Ok((next, SkillOutcome::fail(skill.step_cost, FailReason::MissingIngredients)));
    }
    if let Some(target) = &skill.target {
        if next.nearby.get(target).copied().unwrap_or(0) == 0 {
            return Ok((next, SkillOutcome::fail(skill.step_cost, FailReason::TargetAbsent)));
        }
    }

    let roll: f64 = next.rng.gen();
    if roll >= skill.base_success_prob {
        return Ok((next, SkillOutcome::fail(skill.step_cost, FailReason::RandomFailure)));
    }

    next.remove_items(&skill.consumes);
    next.add_items(&skill.produces);
    if slots_used(graph, &next.inventory) > INVENTORY_SLOTS {
        return Err(SimError::InventoryOverflow(skill_id.clone()));
    }
    if skill.consumes_target() {
        let target = skill.target.as_ref().unwrap();
        let left = next.nearby.get_mut(target).unwrap();
        *left -= 1;
        if *left == 0 {
            next.nearby.remove(target);
        }
    }
    Ok((next, SkillOutcome::success(skill.step_cost)))
}

/// Ground-truth status of one skill attempt at checkpoint step `t`.
///
/// An attempt spans `step_cost` environment steps: before that the skill is
/// still running; at or after it the outcome is decided.
pub fn sample_trajectory(
    graph: &CraftingGraph,
    skill_id: &SkillId,
    seed_value: u64,
    t: u32,
) -> Result<TrajectorySample, SimError> {
    assert!(t >= 1, "checkpoint must be at least 1");
    let skill = graph
        .skill(skill_id)
        .ok_or_else(|| SimError::UnknownSkill(skill_id.clone()))?;
    let state = trajectory_context(graph, skill, seed_value);
    let start = state.observe();
    if t < skill.step_cost {
        return Ok(TrajectorySample {
            skill: skill_id.clone(),
            start,
            checkpoint: state.observe(),
            label: SkillOutcome {
                status: SkillStatus::Running,
                steps_consumed: t,
                fail_reason: None,
            },
            t,
        });
    }
    let (end, outcome) = execute_skill(graph, &state, skill_id)?;
    Ok(TrajectorySample {
        skill: skill_id.clone(),
        start,
        checkpoint: end.observe(),
        label: outcome,
        t,
    })
}

/// A start/checkpoint observation pair with its ground-truth label.
#[derive(Clone, Debug)]
pub struct TrajectorySample {
    pub skill: SkillId,
    pub start: Observation,
    pub checkpoint: Observation,
    pub label: SkillOutcome,
    pub t: u32,
}

/// Seeded context for a skill attempt: a task reset whose inventory is
/// stocked with the skill's requirements roughly half the time, so sampled
/// labels cover success, failure, and running.
fn trajectory_context(graph: &CraftingGraph, skill: &Skill, seed_value: u64) -> WorldState {
    let mut rng = seed::rng(seed::mix(seed_value, &["trajectory", skill.id.as_str()]));
    let task_idx = rng.gen_range(0..graph.tasks.len());
    let task = &graph.tasks[task_idx];
    let mut state = reset(graph, task, seed::mix(seed_value, &["trajectory-reset"]));
    state.max_steps = u32::MAX - skill.step_cost;
    if rng.gen_bool(0.5) {
        let mut stock = skill.consumes.clone();
        if let Some(tool) = &skill.requires_tool {
            stock.entry(tool.clone()).or_insert(1);
        }
        if let Some(station) = skill.requires_station.item() {
            stock.entry(station).or_insert(1);
        }
        state.add_items(&stock);
    }
    if let Some(target) = &skill.target {
        // Half the contexts guarantee the target, half drop it.
        if rng.gen_bool(0.5) {
            state.nearby.entry(target.clone()).or_insert(1);
        } else {
            state.nearby.remove(target);
        }
    }
    state
}

/// A random simulator-reachable snapshot for captioning datasets: reset a
/// seeded task, walk a few random skills, then apply a scripted damage event.
pub fn sample_snapshot(graph: &CraftingGraph, seed_value: u64) -> Observation {
    let mut rng = seed::rng(seed::mix(seed_value, &["snapshot"]));
    let task_idx = rng.gen_range(0..graph.tasks.len());
    let task = &graph.tasks[task_idx];
    let options = ResetOptions {
        night_cave: rng.gen_bool(0.2),
    };
    let mut state = reset_with(graph, task, seed::mix(seed_value, &["snapshot-reset"]), options);
    let skills: Vec<&SkillId> = graph.skills.keys().collect();
    let walk_len = rng.gen_range(0..6);
    for _ in 0..walk_len {
        let skill = skills[rng.gen_range(0..skills.len())];
        if let Ok((next, _)) = execute_skill(graph, &state, skill) {
            state = next;
        }
    }
    if rng.gen_bool(0.4) {
        state.apply_damage_event(rng.gen_range(0..=10), rng.gen_range(0..=10));
    }
    state.observe()
}

// ---------------------------------------------------------------------------
// Trajectory recording / replay
// ---------------------------------------------------------------------------

/// One executed step of a recorded episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub skill: SkillId,
    pub status: SkillStatus,
    pub fail_reason: Option<FailReason>,
    pub steps_used: u32,
}

/// Header + steps of a recorded episode, written one JSON record per line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub version: u32,
    pub task: String,
    pub seed: u64,
}

pub fn write_trace(header: &TraceHeader, steps: &[TraceStep]) -> String {
    let mut out = serde_json::to_string(header).expect("header serializes");
    out.push('\n');
    for step in steps {
        out.push_str(&serde_json::to_string(step).expect("step serializes"));
        out.push('\n');
    }
    out
}

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("empty trace file")]
    Empty,
    #[error("bad trace record on line {line}: {message}")]
    Bad { line: usize, message: String },
}

pub fn parse_trace(text: &str) -> Result<(TraceHeader, Vec<TraceStep>), TraceError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header_line) = lines.next().ok_or(TraceError::Empty)?;
    let header: TraceHeader = serde_json::from_str(header_line).map_err(|e| TraceError::Bad {
        line: 1,
        message: e.to_string(),
    })?;
    let mut steps = Vec::new();
    for (idx, line) in lines {
        steps.push(serde_json::from_str(line).map_err(|e| TraceError::Bad {
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok((header, steps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::load_registry;
    use crate::fixture_kb_dir;

    fn graph() -> CraftingGraph {
        load_registry(fixture_kb_dir()).unwrap()
    }

    fn force_prob(graph: &mut CraftingGraph, p: f64) {
        for skill in graph.skills.values_mut() {
            skill.base_success_prob = p;
        }
    }

    #[test]
    fn reset_matches_task_setup() {
        let graph = graph();
        let stick = graph.task("stick").unwrap();
        let state = reset(&graph, stick, 42);
        assert!(state.inventory.is_empty());
        assert_eq!(state.life, 20);
        assert_eq!(state.food, 20);
        assert!(state.nearby.get(&ObjectId::from("tree")).copied().unwrap_or(0) >= 1);

        let sp = graph.task("stone_pickaxe").unwrap();
        let state = reset(&graph, sp, 7);
        assert_eq!(state.count_of(&ItemId::from("wooden_pickaxe")), 1);
    }

    #[test]
    fn reset_is_deterministic() {
        let graph = graph();
        let task = graph.task("torch").unwrap();
        assert_eq!(reset(&graph, task, 5), reset(&graph, task, 5));
        // Different seeds give different spawn draws at least sometimes.
        let draws: Vec<_> = (0..20).map(|s| reset(&graph, task, s).nearby).collect();
        assert!(draws.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn craft_stick_applies_recipe_arithmetic() {
        let mut graph = graph();
        force_prob(&mut graph, 1.0);
        let task = graph.task("stick").unwrap();
        let mut state = reset(&graph, task, 1);
        state.add_items(&ItemCounts::from([(ItemId::from("planks"), 2)]));
        let (next, outcome) = execute_skill(&graph, &state, &SkillId::from("craft_stick")).unwrap();
        assert_eq!(outcome.status, SkillStatus::Success);
        assert_eq!(next.count_of(&ItemId::from("stick")), 4);
        assert_eq!(next.count_of(&ItemId::from("planks")), 0);
        assert_eq!(next.steps_used, 10);
    }

    #[test]
    fn missing_ingredients_leaves_inventory_untouched() {
        let graph = graph();
        let task = graph.task("stick").unwrap();
        let state = reset(&graph, task, 1);
        let (next, outcome) = execute_skill(&graph, &state, &SkillId::from("craft_stick")).unwrap();
        assert_eq!(outcome.status, SkillStatus::Fail);
        assert_eq!(outcome.fail_reason, Some(FailReason::MissingIngredients));
        assert_eq!(next.inventory, state.inventory);
        assert_eq!(next.steps_used, state.steps_used + 10);
    }

    #[test]
    fn mining_without_pickaxe_fails_missing_tool() {
        let graph = graph();
        let task = graph.task("stick").unwrap();
        let state = reset(&graph, task, 3);
        let (_, outcome) = execute_skill(&graph, &state, &SkillId::from("mine_cobblestone")).unwrap();
        assert_eq!(outcome.fail_reason, Some(FailReason::MissingTool));
    }

    #[test]
    fn budget_exhaustion_caps_steps() {
        let graph = graph();
        let task = graph.task("stick").unwrap();
        let mut state = reset(&graph, task, 3);
        state.max_steps = 150;
        let (next, outcome) = execute_skill(&graph, &state, &SkillId::from("gather_log")).unwrap();
        assert_eq!(outcome.fail_reason, Some(FailReason::BudgetExhausted));
        assert_eq!(next.steps_used, 150);
    }

    #[test]
    fn unknown_skill_is_an_error() {
        let graph = graph();
        let task = graph.task("stick").unwrap();
        let state = reset(&graph, task, 3);
        assert!(matches!(
            execute_skill(&graph, &state, &SkillId::from("no_such_skill")),
            Err(SimError::UnknownSkill(_))
        ));
    }

    #[test]
    fn conservation_of_inventory() {
        let graph = graph();
        for task in &graph.tasks {
            let mut state = reset(&graph, task, 99);
            for skill_id in graph.skills.keys() {
                let skill = &graph.skills[skill_id];
                let before = state.inventory.clone();
                let (next, outcome) = execute_skill(&graph, &state, skill_id).unwrap();
                match outcome.status {
                    SkillStatus::Success => {
                        let mut expected = before.clone();
                        for (item, count) in &skill.consumes {
                            let e = expected.get_mut(item).unwrap();
                            *e -= count;
                            if *e == 0 {
                                expected.remove(item);
                            }
                        }
                        for (item, count) in &skill.produces {
                            *expected.entry(item.clone()).or_insert(0) += count;
                        }
                        assert_eq!(next.inventory, expected, "skill {skill_id}");
                    }
                    _ => assert_eq!(next.inventory, before, "skill {skill_id}"),
                }
                state = next;
            }
        }
    }

    #[test]
    fn replay_reproduces_states_exactly() {
        let graph = graph();
        let task = graph.task("wooden_pickaxe").unwrap();
        let sequence = [
            "gather_log",
            "craft_planks",
            "craft_stick",
            "gather_log",
            "craft_planks",
            "craft_crafting_table",
            "craft_wooden_pickaxe",
        ];
        let run = |_| {
            let mut state = reset(&graph, task, 11);
            let mut log = Vec::new();
            for id in sequence {
                let (next, outcome) = execute_skill(&graph, &state, &SkillId::from(id)).unwrap();
                log.push((next.clone(), outcome));
                state = next;
            }
            log
        };
        assert_eq!(run(0), run(1));
    }

    #[test]
    fn empirical_success_rate_matches_probability() {
        let mut graph = graph();
        let p = 0.7;
        force_prob(&mut graph, p);
        let task = graph.task("stick").unwrap();
        let n = 10_000u32;
        let mut successes = 0u32;
        for i in 0..n {
            let state = reset(&graph, task, i as u64);
            let (_, outcome) = execute_skill(&graph, &state, &SkillId::from("gather_log")).unwrap();
            if outcome.status == SkillStatus::Success {
                successes += 1;
            }
        }
        let rate = successes as f64 / n as f64;
        let bound = 4.0 * (p * (1.0 - p) / n as f64).sqrt();
        assert!((rate - p).abs() <= bound, "rate {rate} vs p {p} (bound {bound})");
    }

    #[test]
    fn trajectory_labels_cover_running_success_fail() {
        let graph = graph();
        let mut seen = std::collections::BTreeSet::new();
        for s in 0..200 {
            let t = if s % 2 == 0 { 50 } else { 400 };
            let sample = sample_trajectory(&graph, &SkillId::from("gather_log"), s, t).unwrap();
            if sample.label.status == SkillStatus::Running {
                assert!(t < 200);
                assert_eq!(sample.start, sample.checkpoint);
            }
            seen.insert(sample.label.status.as_str());
        }
        assert_eq!(seen.len(), 3, "saw {seen:?}");
    }

    #[test]
    fn night_cave_flag_hides_sky() {
        let graph = graph();
        let task = graph.task("stick").unwrap();
        for s in 0..10 {
            let state = reset_with(&graph, task, s, ResetOptions { night_cave: true });
            assert!(!state.sky_visible);
        }
    }

    #[test]
    fn trace_roundtrip() {
        let header = TraceHeader {
            version: 1,
            task: "stick".into(),
            seed: 9,
        };
        let steps = vec![TraceStep {
            skill: SkillId::from("gather_log"),
            status: SkillStatus::Success,
            fail_reason: None,
            steps_used: 200,
        }];
        let text = write_trace(&header, &steps);
        let (h, s) = parse_trace(&text).unwrap();
        assert_eq!(h, header);
        assert_eq!(s, steps);
    }
}
