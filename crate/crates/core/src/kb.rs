//! Crafting knowledge base: items, recipes, skills, tasks.
//!
//! The registry is loaded from four TOML files (`items.toml`, `recipes.toml`,
//! `skills.toml`, `tasks.toml`) in a single directory and validated into an
//! immutable [`CraftingGraph`]. `docs/formats.md` documents every field.
//! [`save_registry`] writes the same four files in canonical form, and
//! canonical files round-trip byte-for-byte.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Stable item key, e.g. `"wooden_pickaxe"`.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub String);

/// Stable skill key, e.g. `"craft_planks"`.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SkillId(pub String);

/// World-object key used by gather/interact targets and spawn tables,
/// e.g. `"tree"` or `"cow"`. Objects are not items: they live in the world,
/// not in the inventory.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObjectId(pub String);

macro_rules! id_impls {
    ($t:ident) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }
        impl fmt::Debug for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{:?}", self.0)
            }
        }
        impl From<&str> for $t {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }
        impl $t {
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }
    };
}
id_impls!(ItemId);
id_impls!(SkillId);
id_impls!(ObjectId);

/// Multiset of items with positive counts. Zero-count entries are never stored.
pub type ItemCounts = BTreeMap<ItemId, u32>;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemCategory {
    Material,
    Tool,
    Food,
    Block,
    Station,
    MobDrop,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Station {
    None,
    CraftingTable,
    Furnace,
}

impl Station {
    /// The inventory item that satisfies this station requirement, if any.
    pub fn item(self) -> Option<ItemId> {
        match self {
            Station::None => None,
            Station::CraftingTable => Some(ItemId::from("crafting_table")),
            Station::Furnace => Some(ItemId::from("furnace")),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkillKind {
    Gather,
    Craft,
    Smelt,
    Interact,
    Place,
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskCategory {
    Wood,
    Stone,
    Mob,
}

impl TaskCategory {
    pub const ALL: [TaskCategory; 3] = [TaskCategory::Wood, TaskCategory::Stone, TaskCategory::Mob];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskCategory::Wood => "wood",
            TaskCategory::Stone => "stone",
            TaskCategory::Mob => "mob",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub id: ItemId,
    pub display_name: String,
    pub max_stack: u32,
    pub category: ItemCategory,
}

/// One shaped recipe: up to nine input cells on a 3x3 grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Recipe {
    pub output: ItemId,
    pub output_count: u32,
    /// Row-major 3x3 grid; `None` is an empty cell.
    pub grid: [Option<(ItemId, u32)>; 9],
    pub station: Station,
}

impl Recipe {
    /// Aggregate the grid cells into an input multiset.
    pub fn inputs(&self) -> ItemCounts {
        let mut m = ItemCounts::new();
        for cell in self.grid.iter().flatten() {
            *m.entry(cell.0.clone()).or_insert(0) += cell.1;
        }
        m
    }

    pub fn occupied_cells(&self) -> usize {
        self.grid.iter().filter(|c| c.is_some()).count()
    }
}

/// A parametric skill primitive with preconditions, effects, a step cost,
/// and a per-attempt success probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Skill {
    pub id: SkillId,
    pub kind: SkillKind,
    /// World object a gather/interact/place skill acts on.
    pub target: Option<ObjectId>,
    pub requires_tool: Option<ItemId>,
    pub requires_station: Station,
    pub consumes: ItemCounts,
    pub produces: ItemCounts,
    /// For craft/smelt skills, the output item of the recipe they apply.
    pub recipe: Option<ItemId>,
    pub base_success_prob: f64,
    pub step_cost: u32,
}

impl Skill {
    /// Gather skills remove their target from the world on success;
    /// interact skills leave it in place.
    pub fn consumes_target(&self) -> bool {
        self.kind == SkillKind::Gather && self.target.is_some()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub id: String,
    pub goal: ItemId,
    pub goal_count: u32,
    pub initial_items: ItemCounts,
    pub max_steps: u32,
    pub episodes: u32,
    pub category: TaskCategory,
}

/// Seeded spawn table for one task category: each entry is
/// (object, min count, max count), drawn uniformly inclusive at reset.
#[derive(Clone, Debug, PartialEq)]
pub struct SpawnTable {
    pub category: TaskCategory,
    pub objects: Vec<(ObjectId, u32, u32)>,
}

/// The validated, immutable registry. Safe to share across threads.
#[derive(Clone, Debug)]
pub struct CraftingGraph {
    pub items: BTreeMap<ItemId, Item>,
    /// One recipe per output item.
    pub recipes: BTreeMap<ItemId, Recipe>,
    pub skills: BTreeMap<SkillId, Skill>,
    pub tasks: Vec<TaskSpec>,
    pub spawn_tables: BTreeMap<TaskCategory, SpawnTable>,
}

#[derive(Debug, thiserror::Error)]
pub enum KbError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {file}: {message}")]
    Parse { file: String, message: String },
    #[error("validation error: {0}")]
    Validation(String),
}

impl KbError {
    fn invalid(msg: impl Into<String>) -> Self {
        KbError::Validation(msg.into())
    }
}

// ---------------------------------------------------------------------------
// On-disk schema (serde structs kept separate from the domain types so the
// file layout can evolve without touching the rest of the crate).
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ItemsFile {
    #[serde(default)]
    item: Vec<ItemEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ItemEntry {
    id: String,
    name: String,
    max_stack: u32,
    category: ItemCategory,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecipesFile {
    #[serde(default)]
    recipe: Vec<RecipeEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecipeEntry {
    output: String,
    count: u32,
    station: Station,
    /// Nine row-major cells: `""` empty, `"item"`, or `"item*count"`.
    grid: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SkillsFile {
    #[serde(default)]
    skill: Vec<SkillEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SkillEntry {
    id: String,
    kind: SkillKind,
    #[serde(default)]
    target: Option<String>,
    #[serde(default)]
    requires_tool: Option<String>,
    #[serde(default)]
    recipe: Option<String>,
    #[serde(default)]
    consumes: BTreeMap<String, u32>,
    #[serde(default)]
    produces: BTreeMap<String, u32>,
    success_prob: f64,
    step_cost: u32,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TasksFile {
    #[serde(default)]
    task: Vec<TaskEntry>,
    #[serde(default)]
    spawn_table: Vec<SpawnTableEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskEntry {
    id: String,
    goal: String,
    goal_count: u32,
    initial: BTreeMap<String, u32>,
    max_steps: u32,
    #[serde(default = "default_episodes")]
    episodes: u32,
    category: TaskCategory,
}

fn default_episodes() -> u32 {
    30
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SpawnTableEntry {
    category: TaskCategory,
    objects: Vec<(String, u32, u32)>,
}

fn parse_cell(cell: &str, file: &str) -> Result<Option<(ItemId, u32)>, KbError> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Ok(None);
    }
    match cell.split_once('*') {
        None => Ok(Some((ItemId::from(cell), 1))),
        Some((item, count)) => {
            let count: u32 = count.trim().parse().map_err(|_| KbError::Parse {
                file: file.to_string(),
                message: format!("bad cell count in {cell:?}"),
            })?;
            Ok(Some((ItemId::from(item.trim()), count)))
        }
    }
}

fn to_item_counts(raw: &BTreeMap<String, u32>) -> ItemCounts {
    raw.iter()
        .map(|(k, v)| (ItemId::from(k.as_str()), *v))
        .collect()
}

fn read_and_parse<T: serde::de::DeserializeOwned>(dir: &Path, name: &str) -> Result<T, KbError> {
    let path = dir.join(name);
    let text = fs::read_to_string(&path).map_err(|source| KbError::Io {
        path: path.display().to_string(),
        source,
    })?;
    toml::from_str(&text).map_err(|e| KbError::Parse {
        file: name.to_string(),
        message: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Load + validate
// ---------------------------------------------------------------------------

/// Load the four registry files from `dir` and validate them into a graph.
pub fn load_registry(dir: impl AsRef<Path>) -> Result<CraftingGraph, KbError> {
    let dir = dir.as_ref();
    let items_file: ItemsFile = read_and_parse(dir, "items.toml")?;
    let recipes_file: RecipesFile = read_and_parse(dir, "recipes.toml")?;
    let skills_file: SkillsFile = read_and_parse(dir, "skills.toml")?;
    let tasks_file: TasksFile = read_and_parse(dir, "tasks.toml")?;

    let mut items = BTreeMap::new();
    for entry in items_file.item {
        if entry.id.is_empty() {
            return Err(KbError::invalid("item with empty id"));
        }
        if entry.max_stack < 1 {
            return Err(KbError::invalid(format!("item {}: max_stack < 1", entry.id)));
        }
        let id = ItemId(entry.id);
        let prev = items.insert(
            id.clone(),
            Item {
                id: id.clone(),
                display_name: entry.name,
                max_stack: entry.max_stack,
                category: entry.category,
            },
        );
        if prev.is_some() {
            return Err(KbError::invalid(format!("duplicate item id {id}")));
        }
    }
    if items.is_empty() {
        return Err(KbError::invalid("registry has no items"));
    }

    let mut recipes: BTreeMap<ItemId, Recipe> = BTreeMap::new();
    for entry in &recipes_file.recipe {
        if entry.grid.len() != 9 {
            return Err(KbError::Parse {
                file: "recipes.toml".into(),
                message: format!("recipe {}: grid must have 9 cells", entry.output),
            });
        }
        let mut grid: [Option<(ItemId, u32)>; 9] = Default::default();
        for (i, cell) in entry.grid.iter().enumerate() {
            grid[i] = parse_cell(cell, "recipes.toml")?;
        }
        let recipe = Recipe {
            output: ItemId::from(entry.output.as_str()),
            output_count: entry.count,
            grid,
            station: entry.station,
        };
        if entry.count < 1 {
            return Err(KbError::invalid(format!("recipe {}: output count < 1", entry.output)));
        }
        if recipe.occupied_cells() == 0 {
            return Err(KbError::invalid(format!("recipe {}: no input cells", entry.output)));
        }
        let inputs = recipe.inputs();
        if inputs.len() == 1 {
            let (item, count) = inputs.iter().next().unwrap();
            if *item == recipe.output && *count == recipe.output_count {
                return Err(KbError::invalid(format!("recipe {}: no-op recipe", entry.output)));
            }
        }
        for cell in recipe.grid.iter().flatten() {
            if cell.1 < 1 {
                return Err(KbError::invalid(format!("recipe {}: zero-count cell", entry.output)));
            }
            if !items.contains_key(&cell.0) {
                return Err(KbError::invalid(format!(
                    "recipe {}: unknown input item {}",
                    entry.output, cell.0
                )));
            }
        }
        if !items.contains_key(&recipe.output) {
            return Err(KbError::invalid(format!("recipe {}: unknown output item", entry.output)));
        }
        let output = recipe.output.clone();
        if recipes.insert(output.clone(), recipe).is_some() {
            return Err(KbError::invalid(format!("duplicate recipe for {output}")));
        }
    }

    let mut spawn_tables = BTreeMap::new();
    let mut known_objects: BTreeSet<ObjectId> = BTreeSet::new();
    for entry in tasks_file.spawn_table {
        let table = SpawnTable {
            category: entry.category,
            objects: entry
                .objects
                .iter()
                .map(|(o, lo, hi)| (ObjectId::from(o.as_str()), *lo, *hi))
                .collect(),
        };
        for (obj, lo, hi) in &table.objects {
            if lo > hi {
                return Err(KbError::invalid(format!(
                    "spawn table {}: empty range for {obj}",
                    entry.category.as_str()
                )));
            }
            known_objects.insert(obj.clone());
        }
        if spawn_tables.insert(entry.category, table).is_some() {
            return Err(KbError::invalid(format!(
                "duplicate spawn table for category {}",
                entry.category.as_str()
            )));
        }
    }

    let mut skills = BTreeMap::new();
    for entry in skills_file.skill {
        let id = SkillId(entry.id.clone());
        let mut skill = Skill {
            id: id.clone(),
            kind: entry.kind,
            target: entry.target.as_deref().map(ObjectId::from),
            requires_tool: entry.requires_tool.as_deref().map(ItemId::from),
            requires_station: Station::None,
            consumes: to_item_counts(&entry.consumes),
            produces: to_item_counts(&entry.produces),
            recipe: entry.recipe.as_deref().map(ItemId::from),
            base_success_prob: entry.success_prob,
            step_cost: entry.step_cost,
        };
        if !(skill.base_success_prob > 0.0 && skill.base_success_prob <= 1.0) {
            return Err(KbError::invalid(format!("skill {id}: success_prob out of (0, 1]")));
        }
        if skill.step_cost < 1 {
            return Err(KbError::invalid(format!("skill {id}: step_cost < 1")));
        }
        match skill.kind {
            SkillKind::Craft | SkillKind::Smelt => {
                let recipe_id = skill.recipe.clone().ok_or_else(|| {
                    KbError::invalid(format!("skill {id}: craft/smelt needs a recipe"))
                })?;
                let recipe = recipes.get(&recipe_id).ok_or_else(|| {
                    KbError::invalid(format!("skill {id}: unknown recipe {recipe_id}"))
                })?;
                if !skill.consumes.is_empty() || !skill.produces.is_empty() {
                    return Err(KbError::invalid(format!(
                        "skill {id}: craft/smelt effects come from the recipe"
                    )));
                }
                if skill.target.is_some() {
                    return Err(KbError::invalid(format!("skill {id}: craft/smelt has no target")));
                }
                skill.consumes = recipe.inputs();
                skill.produces =
                    ItemCounts::from([(recipe.output.clone(), recipe.output_count)]);
                skill.requires_station = recipe.station;
            }
            SkillKind::Gather | SkillKind::Interact => {
                if skill.recipe.is_some() {
                    return Err(KbError::invalid(format!("skill {id}: unexpected recipe")));
                }
                if skill.target.is_none() {
                    return Err(KbError::invalid(format!("skill {id}: gather/interact needs a target")));
                }
                if skill.produces.is_empty() {
                    return Err(KbError::invalid(format!("skill {id}: produces nothing")));
                }
                // Tool-only preconditions: consumes empty or exactly the tool.
                let tool_only = skill.consumes.is_empty()
                    || (skill.consumes.len() == 1
                        && skill.requires_tool.as_ref().is_some_and(|t| {
                            skill.consumes.get(t).copied() == Some(1)
                        }));
                if !tool_only {
                    return Err(KbError::invalid(format!(
                        "skill {id}: gather/interact consumes must be empty or the tool"
                    )));
                }
            }
            SkillKind::Place => {
                if skill.consumes.is_empty() {
                    return Err(KbError::invalid(format!("skill {id}: place consumes nothing")));
                }
            }
        }
        if let Some(target) = &skill.target {
            if !known_objects.contains(target) {
                return Err(KbError::invalid(format!(
                    "skill {id}: target {target} absent from all spawn tables"
                )));
            }
        }
        if let Some(tool) = &skill.requires_tool {
            if !items.contains_key(tool) {
                return Err(KbError::invalid(format!("skill {id}: unknown tool {tool}")));
            }
        }
        for item in skill.consumes.keys().chain(skill.produces.keys()) {
            if !items.contains_key(item) {
                return Err(KbError::invalid(format!("skill {id}: unknown item {item}")));
            }
        }
        if skills.insert(id.clone(), skill).is_some() {
            return Err(KbError::invalid(format!("duplicate skill id {id}")));
        }
    }

    let mut tasks = Vec::new();
    let mut task_ids = BTreeSet::new();
    for entry in tasks_file.task {
        let task = TaskSpec {
            id: entry.id.clone(),
            goal: ItemId::from(entry.goal.as_str()),
            goal_count: entry.goal_count,
            initial_items: to_item_counts(&entry.initial),
            max_steps: entry.max_steps,
            episodes: entry.episodes,
            category: entry.category,
        };
        if !task_ids.insert(task.id.clone()) {
            return Err(KbError::invalid(format!("duplicate task id {}", task.id)));
        }
        if !items.contains_key(&task.goal) {
            return Err(KbError::invalid(format!("task {}: unknown goal item", task.id)));
        }
        if !(3000..=10000).contains(&task.max_steps) {
            return Err(KbError::invalid(format!(
                "task {}: max_steps outside [3000, 10000]",
                task.id
            )));
        }
        if task.goal_count < 1 || task.episodes < 1 {
            return Err(KbError::invalid(format!("task {}: zero goal count or episodes", task.id)));
        }
        for item in task.initial_items.keys() {
            if !items.contains_key(item) {
                return Err(KbError::invalid(format!("task {}: unknown initial item {item}", task.id)));
            }
        }
        if !spawn_tables.contains_key(&task.category) {
            return Err(KbError::invalid(format!(
                "task {}: no spawn table for category {}",
                task.id,
                task.category.as_str()
            )));
        }
        tasks.push(task);
    }

    let graph = CraftingGraph {
        items,
        recipes,
        skills,
        tasks,
        spawn_tables,
    };
    graph.check_acyclic()?;
    for task in &graph.tasks {
        let reach = reachable_items(&graph, &task.initial_items);
        if !reach.contains(&task.goal) {
            return Err(KbError::invalid(format!(
                "task {}: goal {} not reachable from its initial items",
                task.id, task.goal
            )));
        }
    }
    Ok(graph)
}

impl CraftingGraph {
    /// The unique recipe producing `item`, or `None` for primitives.
    pub fn lookup_recipe(&self, item: &ItemId) -> Option<&Recipe> {
        self.recipes.get(item)
    }

    pub fn task(&self, id: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.id == id)
    }

    pub fn skill(&self, id: &SkillId) -> Option<&Skill> {
        self.skills.get(id)
    }

    /// Skills that produce `item`, in id order.
    pub fn producers_of(&self, item: &ItemId) -> Vec<&Skill> {
        self.skills
            .values()
            .filter(|s| s.produces.contains_key(item))
            .collect()
    }

    /// All world objects named by any spawn table, sorted.
    pub fn world_objects(&self) -> Vec<ObjectId> {
        let mut set = BTreeSet::new();
        for table in self.spawn_tables.values() {
            for (obj, _, _) in &table.objects {
                set.insert(obj.clone());
            }
        }
        set.into_iter().collect()
    }

    /// Rejects cycles in the craft/smelt dependency relation
    /// (recipe output depends on each input item).
    fn check_acyclic(&self) -> Result<(), KbError> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            Visiting,
            Done,
        }
        fn visit(
            graph: &CraftingGraph,
            item: &ItemId,
            marks: &mut BTreeMap<ItemId, Mark>,
        ) -> Result<(), KbError> {
            match marks.get(item) {
                Some(Mark::Done) => return Ok(()),
                Some(Mark::Visiting) => {
                    return Err(KbError::invalid(format!("recipe cycle through {item}")))
                }
                None => {}
            }
            marks.insert(item.clone(), Mark::Visiting);
            if let Some(recipe) = graph.recipes.get(item) {
                for input in recipe.inputs().keys() {
                    visit(graph, input, marks)?;
                }
            }
            marks.insert(item.clone(), Mark::Done);
            Ok(())
        }
        let mut marks = BTreeMap::new();
        for output in self.recipes.keys() {
            visit(self, output, &mut marks)?;
        }
        Ok(())
    }
}

/// Fixpoint closure of items obtainable from `initial` by repeatedly applying
/// skills whose tool, station, and ingredient requirements are already in the
/// closure. World-object availability is assumed; this is the graph-level
/// oracle the planner is checked against.
pub fn reachable_items(graph: &CraftingGraph, initial: &ItemCounts) -> BTreeSet<ItemId> {
    let mut reach: BTreeSet<ItemId> = initial
        .iter()
        .filter(|(_, &c)| c > 0)
        .map(|(i, _)| i.clone())
        .collect();
    loop {
        let mut changed = false;
        for skill in graph.skills.values() {
            let tool_ok = skill
                .requires_tool
                .as_ref()
                .map_or(true, |t| reach.contains(t));
            let station_ok = skill
                .requires_station
                .item()
                .map_or(true, |s| reach.contains(&s));
            let inputs_ok = skill.consumes.keys().all(|i| reach.contains(i));
            if tool_ok && station_ok && inputs_ok {
                for item in skill.produces.keys() {
                    if reach.insert(item.clone()) {
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            return reach;
        }
    }
}

// ---------------------------------------------------------------------------
// Canonical writer
// ---------------------------------------------------------------------------

fn fmt_cell(cell: &Option<(ItemId, u32)>) -> String {
    match cell {
        None => String::new(),
        Some((item, 1)) => item.to_string(),
        Some((item, n)) => format!("{item}*{n}"),
    }
}

fn fmt_counts(counts: &ItemCounts) -> String {
    if counts.is_empty() {
        return "{}".to_string();
    }
    let body: Vec<String> = counts.iter().map(|(k, v)| format!("{k} = {v}")).collect();
    format!("{{ {} }}", body.join(", "))
}

fn fmt_prob(p: f64) -> String {
    // Shortest representation that reparses exactly, always with a decimal point.
    let s = format!("{p}");
    if s.contains('.') {
        s
    } else {
        format!("{s}.0")
    }
}

/// Render the four registry files in canonical form. Keys are sorted, so
/// loading and re-saving a canonical directory is byte-identical.
pub fn render_registry(graph: &CraftingGraph) -> BTreeMap<&'static str, String> {
    let mut items = String::from("# forge knowledge base: items\n");
    for item in graph.items.values() {
        items.push_str(&format!(
            "\n[[item]]\nid = \"{}\"\nname = \"{}\"\nmax_stack = {}\ncategory = \"{}\"\n",
            item.id,
            item.display_name,
            item.max_stack,
            toml_enum(&item.category)
        ));
    }

    let mut recipes = String::from("# forge knowledge base: recipes\n");
    for recipe in graph.recipes.values() {
        recipes.push_str(&format!(
            "\n[[recipe]]\noutput = \"{}\"\ncount = {}\nstation = \"{}\"\ngrid = [\n",
            recipe.output,
            recipe.output_count,
            toml_enum(&recipe.station)
        ));
        for row in 0..3 {
            let cells: Vec<String> = (0..3)
                .map(|col| format!("\"{}\"", fmt_cell(&recipe.grid[row * 3 + col])))
                .collect();
            recipes.push_str(&format!("    {},\n", cells.join(", ")));
        }
        recipes.push_str("]\n");
    }

    let mut skills = String::from("# forge knowledge base: skills\n");
    for skill in graph.skills.values() {
        skills.push_str(&format!(
            "\n[[skill]]\nid = \"{}\"\nkind = \"{}\"\n",
            skill.id,
            toml_enum(&skill.kind)
        ));
        if let Some(target) = &skill.target {
            skills.push_str(&format!("target = \"{target}\"\n"));
        }
        if let Some(tool) = &skill.requires_tool {
            skills.push_str(&format!("requires_tool = \"{tool}\"\n"));
        }
        match skill.kind {
            SkillKind::Craft | SkillKind::Smelt => {
                skills.push_str(&format!("recipe = \"{}\"\n", skill.recipe.as_ref().unwrap()));
            }
            _ => {
                if !skill.consumes.is_empty() {
                    skills.push_str(&format!("consumes = {}\n", fmt_counts(&skill.consumes)));
                }
                skills.push_str(&format!("produces = {}\n", fmt_counts(&skill.produces)));
            }
        }
        skills.push_str(&format!(
            "success_prob = {}\nstep_cost = {}\n",
            fmt_prob(skill.base_success_prob),
            skill.step_cost
        ));
    }

    let mut tasks = String::from("# forge knowledge base: tasks\n");
    let mut sorted_tasks: Vec<&TaskSpec> = graph.tasks.iter().collect();
    sorted_tasks.sort_by(|a, b| a.id.cmp(&b.id));
    for task in sorted_tasks {
        tasks.push_str(&format!(
            "\n[[task]]\nid = \"{}\"\ngoal = \"{}\"\ngoal_count = {}\ninitial = {}\nmax_steps = {}\nepisodes = {}\ncategory = \"{}\"\n",
            task.id,
            task.goal,
            task.goal_count,
            fmt_counts(&task.initial_items),
            task.max_steps,
            task.episodes,
            task.category.as_str()
        ));
    }
    for table in graph.spawn_tables.values() {
        let objects: Vec<String> = table
            .objects
            .iter()
            .map(|(o, lo, hi)| format!("[\"{o}\", {lo}, {hi}]"))
            .collect();
        tasks.push_str(&format!(
            "\n[[spawn_table]]\ncategory = \"{}\"\nobjects = [{}]\n",
            table.category.as_str(),
            objects.join(", ")
        ));
    }

    BTreeMap::from([
        ("items.toml", items),
        ("recipes.toml", recipes),
        ("skills.toml", skills),
        ("tasks.toml", tasks),
    ])
}

/// Write the canonical registry files into `dir`.
pub fn save_registry(graph: &CraftingGraph, dir: impl AsRef<Path>) -> Result<(), KbError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| KbError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    for (name, text) in render_registry(graph) {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|source| KbError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(())
}

fn toml_enum<T: Serialize>(value: &T) -> String {
    // serde_json renders the snake_case rename; strip the quotes.
    let s = serde_json::to_string(value).expect("enum serializes");
    s.trim_matches('"').to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture_kb_dir;

    fn core_graph() -> CraftingGraph {
        load_registry(fixture_kb_dir()).expect("core fixture loads")
    }

    #[test]
    fn core_fixture_loads_with_24_tasks() {
        let graph = core_graph();
        assert!(graph.items.len() >= 40, "got {} items", graph.items.len());
        assert_eq!(graph.tasks.len(), 24);
        let wood = graph
            .tasks
            .iter()
            .filter(|t| t.category == TaskCategory::Wood)
            .count();
        let stone = graph
            .tasks
            .iter()
            .filter(|t| t.category == TaskCategory::Stone)
            .count();
        let mob = graph
            .tasks
            .iter()
            .filter(|t| t.category == TaskCategory::Mob)
            .count();
        assert_eq!((wood, stone, mob), (7, 7, 10));
    }

    #[test]
    fn stick_recipe_matches_fixture() {
        let graph = core_graph();
        let recipe = graph.lookup_recipe(&ItemId::from("stick")).expect("stick has a recipe");
        assert_eq!(recipe.output_count, 4);
        assert_eq!(recipe.station, Station::None);
        assert_eq!(recipe.inputs(), ItemCounts::from([(ItemId::from("planks"), 2)]));
        // Vertical layout: two planks stacked in one column.
        assert_eq!(recipe.grid[1], Some((ItemId::from("planks"), 1)));
        assert_eq!(recipe.grid[4], Some((ItemId::from("planks"), 1)));
    }

    #[test]
    fn primitives_and_unknowns_have_no_recipe() {
        let graph = core_graph();
        assert!(graph.lookup_recipe(&ItemId::from("log")).is_none());
        assert!(graph.lookup_recipe(&ItemId::from("not_an_item")).is_none());
    }

    #[test]
    fn empty_items_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("items.toml"), "").unwrap();
        std::fs::write(dir.path().join("recipes.toml"), "").unwrap();
        std::fs::write(dir.path().join("skills.toml"), "").unwrap();
        std::fs::write(dir.path().join("tasks.toml"), "").unwrap();
        let err = load_registry(dir.path()).unwrap_err();
        assert!(matches!(err, KbError::Validation(_)), "{err}");
    }

    #[test]
    fn recipe_cycle_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("items.toml"),
            r#"
[[item]]
id = "a"
name = "A"
max_stack = 64
category = "material"

[[item]]
id = "b"
name = "B"
max_stack = 64
category = "material"
"#,
        )
        .unwrap();
        std::fs::write(
            dir.path().join("recipes.toml"),
            r#"
[[recipe]]
output = "a"
count = 1
station = "none"
grid = ["b", "", "", "", "", "", "", "", ""]

[[recipe]]
output = "b"
count = 1
station = "none"
grid = ["a", "", "", "", "", "", "", "", ""]
"#,
        )
        .unwrap();
        std::fs::write(dir.path().join("skills.toml"), "").unwrap();
        std::fs::write(dir.path().join("tasks.toml"), "").unwrap();
        let err = load_registry(dir.path()).unwrap_err();
        assert!(err.to_string().contains("cycle"), "{err}");
    }

    #[test]
    fn malformed_toml_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("items.toml"), "[[item]\nid=").unwrap();
        std::fs::write(dir.path().join("recipes.toml"), "").unwrap();
        std::fs::write(dir.path().join("skills.toml"), "").unwrap();
        std::fs::write(dir.path().join("tasks.toml"), "").unwrap();
        let err = load_registry(dir.path()).unwrap_err();
        assert!(matches!(err, KbError::Parse { .. }), "{err}");
    }

    #[test]
    fn reachability_from_empty_inventory() {
        let graph = core_graph();
        let reach = reachable_items(&graph, &ItemCounts::new());
        assert!(reach.contains(&ItemId::from("stick")));
        assert!(reach.contains(&ItemId::from("wooden_pickaxe")));
        assert!(reach.contains(&ItemId::from("cobblestone")));
        // Nothing produces diamond_sword, so mob kills stay out of reach.
        assert!(!reach.contains(&ItemId::from("diamond_sword")));
        assert!(!reach.contains(&ItemId::from("beef")));
    }

    #[test]
    fn reachability_without_gather_skills_is_empty() {
        let mut graph = core_graph();
        graph.skills.retain(|_, s| s.kind != SkillKind::Gather);
        let reach = reachable_items(&graph, &ItemCounts::new());
        assert!(reach.is_empty());
    }

    #[test]
    fn pickaxe_unlocks_cobblestone() {
        let graph = core_graph();
        let initial = ItemCounts::from([(ItemId::from("wooden_pickaxe"), 1)]);
        let reach = reachable_items(&graph, &initial);
        assert!(reach.contains(&ItemId::from("cobblestone")));
    }

    #[test]
    fn reachability_is_monotone() {
        let graph = core_graph();
        let mut rng = crate::seed::rng(11);
        use rand::seq::IteratorRandom;
        use rand::Rng;
        let all: Vec<ItemId> = graph.items.keys().cloned().collect();
        for _ in 0..50 {
            let k_small = rng.gen_range(0..4);
            let small: ItemCounts = all
                .iter()
                .choose_multiple(&mut rng, k_small)
                .into_iter()
                .map(|i| (i.clone(), 1))
                .collect();
            let mut big = small.clone();
            let k_extra = rng.gen_range(0..4);
            for extra in all.iter().choose_multiple(&mut rng, k_extra) {
                big.entry(extra.clone()).or_insert(1);
            }
            let r_small = reachable_items(&graph, &small);
            let r_big = reachable_items(&graph, &big);
            assert!(r_small.is_subset(&r_big));
        }
    }

    #[test]
    fn canonical_roundtrip_is_byte_identical() {
        let graph = core_graph();
        let dir = tempfile::tempdir().unwrap();
        save_registry(&graph, dir.path()).unwrap();
        for name in ["items.toml", "recipes.toml", "skills.toml", "tasks.toml"] {
            let original = std::fs::read_to_string(fixture_kb_dir().join(name)).unwrap();
            let written = std::fs::read_to_string(dir.path().join(name)).unwrap();
            assert_eq!(original, written, "{name} differs from canonical form");
        }
    }

    #[test]
    fn load_is_deterministic() {
        let a = core_graph();
        let b = core_graph();
        assert_eq!(render_registry(&a), render_registry(&b));
    }
}
