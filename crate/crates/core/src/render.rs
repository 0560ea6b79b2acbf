//! Schematic, losslessly parseable rendering of inventories, recipes, and
//! agent observations, plus the caption grammar the evaluators parse.
//!
//! Layout: cells are 16x16 px with 1 px grid lines, so a grid image is
//! `cols*17+1` wide and `rows*17+1` high. An occupied cell is filled with the
//! item's palette color; its count is a bottom bar of `ceil(count/8)` pixels
//! plus a residue pixel in the top-right corner, exact up to stacks of 64.

use std::collections::BTreeMap;
use std::path::Path;

use crate::kb::{CraftingGraph, ItemId, Recipe, Station};
use crate::sim::Observation;

pub const CELL: u32 = 16;
pub const PITCH: u32 = CELL + 1;

pub const COLOR_GRID: [u8; 3] = [0, 0, 0];
pub const COLOR_EMPTY: [u8; 3] = [255, 255, 255];
pub const COLOR_SKY_VISIBLE: [u8; 3] = [120, 180, 255];
pub const COLOR_SKY_HIDDEN: [u8; 3] = [25, 25, 35];
pub const COLOR_LIFE: [u8; 3] = [200, 30, 30];
pub const COLOR_FOOD: [u8; 3] = [180, 120, 30];
pub const COLOR_TICK_OFF: [u8; 3] = [70, 70, 70];
pub const COLOR_STATION_NONE: [u8; 3] = [230, 230, 230];
pub const COLOR_STATION_TABLE: [u8; 3] = [140, 100, 40];
pub const COLOR_STATION_FURNACE: [u8; 3] = [105, 105, 105];

/// Plain RGB8 pixel buffer.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct SchematicImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
}

impl SchematicImage {
    pub fn filled(width: u32, height: u32, color: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity((width * height * 3) as usize);
        for _ in 0..width * height {
            pixels.extend_from_slice(&color);
        }
        SchematicImage {
            width,
            height,
            pixels,
        }
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: u32, y: u32, color: [u8; 3]) {
        let i = ((y * self.width + x) * 3) as usize;
        self.pixels[i..i + 3].copy_from_slice(&color);
    }

    pub fn fill_rect(&mut self, x0: u32, y0: u32, w: u32, h: u32, color: [u8; 3]) {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                self.set(x, y, color);
            }
        }
    }

    /// Pad right/bottom with the empty color so both dimensions divide `m`.
    pub fn padded_to_multiple(&self, m: u32) -> SchematicImage {
        self.padded_to(self.width.div_ceil(m) * m, self.height.div_ceil(m) * m)
    }

    /// Pad right/bottom with the empty color up to `w` x `h`.
    pub fn padded_to(&self, w: u32, h: u32) -> SchematicImage {
        assert!(w >= self.width && h >= self.height);
        let mut out = SchematicImage::filled(w, h, COLOR_EMPTY);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(x, y, self.get(x, y));
            }
        }
        out
    }

    /// Top-left crop.
    pub fn cropped(&self, w: u32, h: u32) -> SchematicImage {
        assert!(w <= self.width && h <= self.height);
        let mut out = SchematicImage::filled(w, h, COLOR_EMPTY);
        for y in 0..h {
            for x in 0..w {
                out.set(x, y, self.get(x, y));
            }
        }
        out
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), RenderError> {
        let img = image::RgbImage::from_raw(self.width, self.height, self.pixels.clone())
            .expect("buffer matches dimensions");
        img.save_with_format(path.as_ref(), image::ImageFormat::Png)
            .map_err(|e| RenderError::Io(e.to_string()))
    }

    /// Encode to PNG bytes in memory (deterministic for a given buffer).
    pub fn png_bytes(&self) -> Vec<u8> {
        let img = image::RgbImage::from_raw(self.width, self.height, self.pixels.clone())
            .expect("buffer matches dimensions");
        let mut out = std::io::Cursor::new(Vec::new());
        img.write_to(&mut out, image::ImageFormat::Png)
            .expect("png encode");
        out.into_inner()
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<SchematicImage, RenderError> {
        let img = image::open(path.as_ref())
            .map_err(|e| RenderError::Io(e.to_string()))?
            .to_rgb8();
        Ok(SchematicImage {
            width: img.width(),
            height: img.height(),
            pixels: img.into_raw(),
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("unknown item {0}")]
    UnknownItem(String),
    #[error("count {count} exceeds the cell encoding limit for {item}")]
    CountOutOfRange { item: String, count: u32 },
    #[error("decode error: {0}")]
    Decode(String),
    #[error("image i/o: {0}")]
    Io(String),
}

/// Injective color assignment over the sorted item and world-object ids.
///
/// Colors come from the 216-entry web-safe cube (channels in
/// {32, 68, 104, 140, 176, 212}), which never collides with the reserved
/// structural colors above.
#[derive(Clone, Debug)]
pub struct Palette {
    forward: BTreeMap<String, [u8; 3]>,
    reverse: BTreeMap<[u8; 3], String>,
}

impl Palette {
    pub fn for_graph(graph: &CraftingGraph) -> Palette {
        let mut ids: Vec<String> = graph.items.keys().map(|i| i.0.clone()).collect();
        ids.extend(graph.world_objects().iter().map(|o| o.0.clone()));
        ids.sort();
        ids.dedup();
        Palette::from_sorted_ids(&ids)
    }

    pub fn from_sorted_ids(ids: &[String]) -> Palette {
        assert!(ids.len() <= 216, "palette supports at most 216 ids");
        let mut forward = BTreeMap::new();
        let mut reverse = BTreeMap::new();
        for (i, id) in ids.iter().enumerate() {
            let color = [
                32 + 36 * (i % 6) as u8,
                32 + 36 * ((i / 6) % 6) as u8,
                32 + 36 * ((i / 36) % 6) as u8,
            ];
            forward.insert(id.clone(), color);
            reverse.insert(color, id.clone());
        }
        Palette { forward, reverse }
    }

    pub fn color(&self, id: &str) -> Option<[u8; 3]> {
        self.forward.get(id).copied()
    }

    pub fn id_of(&self, color: [u8; 3]) -> Option<&str> {
        self.reverse.get(&color).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    /// Sidecar legend: one `id #rrggbb` line per entry, sorted by id.
    pub fn legend(&self) -> String {
        let mut out = String::new();
        for (id, c) in &self.forward {
            out.push_str(&format!("{id} #{:02x}{:02x}{:02x}\n", c[0], c[1], c[2]));
        }
        out
    }
}

const RESIDUE_STEP: u8 = 28;

fn paint_cell(img: &mut SchematicImage, x0: u32, y0: u32, color: [u8; 3], count: u32) {
    img.fill_rect(x0, y0, CELL, CELL, color);
    debug_assert!((1..=64).contains(&count));
    let bar = count.div_ceil(8);
    let residue = count - (bar - 1) * 8; // 1..=8
    for x in 0..bar {
        img.set(x0 + x, y0 + CELL - 1, COLOR_GRID);
    }
    img.set(
        x0 + CELL - 1,
        y0,
        [RESIDUE_STEP * residue as u8, 0, 228 - RESIDUE_STEP * residue as u8],
    );
}

fn read_cell(
    img: &SchematicImage,
    palette: &Palette,
    x0: u32,
    y0: u32,
) -> Result<Option<(ItemId, u32)>, RenderError> {
    let fill = img.get(x0 + 7, y0 + 7);
    if fill == COLOR_EMPTY {
        return Ok(None);
    }
    let id = palette
        .id_of(fill)
        .ok_or_else(|| RenderError::Decode(format!("unregistered cell color {fill:?}")))?;
    let mut bar = 0u32;
    while bar < 8 && img.get(x0 + bar, y0 + CELL - 1) == COLOR_GRID {
        bar += 1;
    }
    if bar == 0 {
        return Err(RenderError::Decode("occupied cell without a count bar".into()));
    }
    let corner = img.get(x0 + CELL - 1, y0);
    let residue = corner[0] / RESIDUE_STEP;
    if corner[1] != 0
        || !(1..=8).contains(&residue)
        || corner[0] % RESIDUE_STEP != 0
        || corner[2] != 228 - RESIDUE_STEP * residue
    {
        return Err(RenderError::Decode(format!("bad residue pixel {corner:?}")));
    }
    Ok(Some((ItemId::from(id), (bar - 1) * 8 + residue as u32)))
}

fn draw_grid_lines(img: &mut SchematicImage, x0: u32, y0: u32, rows: u32, cols: u32) {
    for r in 0..=rows {
        img.fill_rect(x0, y0 + r * PITCH, cols * PITCH + 1, 1, COLOR_GRID);
    }
    for c in 0..=cols {
        img.fill_rect(x0 + c * PITCH, y0, 1, rows * PITCH + 1, COLOR_GRID);
    }
}

fn cell_origin(x0: u32, y0: u32, row: u32, col: u32) -> (u32, u32) {
    (x0 + col * PITCH + 1, y0 + row * PITCH + 1)
}

// ---------------------------------------------------------------------------
// Inventory grids (icon images)
// ---------------------------------------------------------------------------

pub const INVENTORY_ROWS: usize = 4;
pub const INVENTORY_COLS: usize = 9;

pub type InventoryGrid = [[Option<(ItemId, u32)>; INVENTORY_COLS]; INVENTORY_ROWS];

pub const INVENTORY_CAPTION_HEAD: &str =
    "There is a Minecraft inventory with 4 rows. From left to right, they are";

/// Render a 4x9 inventory grid and its caption.
pub fn render_inventory_grid(
    palette: &Palette,
    grid: &InventoryGrid,
) -> Result<(SchematicImage, String), RenderError> {
    let rows = INVENTORY_ROWS as u32;
    let cols = INVENTORY_COLS as u32;
    let mut img = SchematicImage::filled(cols * PITCH + 1, rows * PITCH + 1, COLOR_EMPTY);
    draw_grid_lines(&mut img, 0, 0, rows, cols);
    let mut listed = Vec::new();
    for (r, row) in grid.iter().enumerate() {
        for (c, cell) in row.iter().enumerate() {
            if let Some((item, count)) = cell {
                let color = palette
                    .color(item.as_str())
                    .ok_or_else(|| RenderError::UnknownItem(item.to_string()))?;
                if !(1..=64).contains(count) {
                    return Err(RenderError::CountOutOfRange {
                        item: item.to_string(),
                        count: *count,
                    });
                }
                let (x0, y0) = cell_origin(0, 0, r as u32, c as u32);
                paint_cell(&mut img, x0, y0, color, *count);
                listed.push(format!("{count} {item}"));
            }
        }
    }
    let caption = if listed.is_empty() {
        format!("{INVENTORY_CAPTION_HEAD} all empty.")
    } else {
        format!("{INVENTORY_CAPTION_HEAD} {}.", listed.join(", "))
    };
    Ok((img, caption))
}

/// Inverse of [`render_inventory_grid`].
pub fn parse_inventory_image(
    palette: &Palette,
    img: &SchematicImage,
) -> Result<InventoryGrid, RenderError> {
    let rows = INVENTORY_ROWS as u32;
    let cols = INVENTORY_COLS as u32;
    if img.width != cols * PITCH + 1 || img.height != rows * PITCH + 1 {
        return Err(RenderError::Decode(format!(
            "bad inventory image dimensions {}x{}",
            img.width, img.height
        )));
    }
    let mut grid: InventoryGrid = Default::default();
    for r in 0..rows {
        for c in 0..cols {
            let (x0, y0) = cell_origin(0, 0, r, c);
            grid[r as usize][c as usize] = read_cell(img, palette, x0, y0)?;
        }
    }
    Ok(grid)
}

// ---------------------------------------------------------------------------
// Recipe images
// ---------------------------------------------------------------------------

pub const RECIPE_INPUT_W: u32 = 3 * PITCH + 1; // 52
pub const RECIPE_ARROW_W: u32 = 16;
pub const RECIPE_OUTPUT_W: u32 = PITCH + 1; // 18
pub const RECIPE_W: u32 = RECIPE_INPUT_W + RECIPE_ARROW_W + RECIPE_OUTPUT_W; // 86
pub const RECIPE_STRIP_H: u32 = 4;
pub const RECIPE_H: u32 = RECIPE_INPUT_W + RECIPE_STRIP_H; // 56

fn station_color(station: Station) -> [u8; 3] {
    match station {
        Station::None => COLOR_STATION_NONE,
        Station::CraftingTable => COLOR_STATION_TABLE,
        Station::Furnace => COLOR_STATION_FURNACE,
    }
}

/// Render a recipe: 3x3 input grid, arrow, output cell, station strip.
pub fn render_recipe(palette: &Palette, recipe: &Recipe) -> Result<SchematicImage, RenderError> {
    let mut img = SchematicImage::filled(RECIPE_W, RECIPE_H, COLOR_EMPTY);
    draw_grid_lines(&mut img, 0, 0, 3, 3);
    for (i, cell) in recipe.grid.iter().enumerate() {
        if let Some((item, count)) = cell {
            let color = palette
                .color(item.as_str())
                .ok_or_else(|| RenderError::UnknownItem(item.to_string()))?;
            let (x0, y0) = cell_origin(0, 0, i as u32 / 3, i as u32 % 3);
            paint_cell(&mut img, x0, y0, color, *count);
        }
    }
    // Arrow glyph pointing at the output cell.
    let ax = RECIPE_INPUT_W;
    let ay = RECIPE_INPUT_W / 2;
    img.fill_rect(ax + 2, ay, 10, 1, COLOR_GRID);
    for d in 1..4 {
        img.set(ax + 12 - d, ay - d, COLOR_GRID);
        img.set(ax + 12 - d, ay + d, COLOR_GRID);
    }
    let out_x = RECIPE_INPUT_W + RECIPE_ARROW_W;
    let out_y = PITCH;
    draw_grid_lines(&mut img, out_x, out_y, 1, 1);
    let color = palette
        .color(recipe.output.as_str())
        .ok_or_else(|| RenderError::UnknownItem(recipe.output.to_string()))?;
    let (x0, y0) = cell_origin(out_x, out_y, 0, 0);
    paint_cell(&mut img, x0, y0, color, recipe.output_count);
    img.fill_rect(0, RECIPE_INPUT_W, RECIPE_W, RECIPE_STRIP_H, station_color(recipe.station));
    Ok(img)
}

/// Exact cell-by-cell inverse of [`render_recipe`].
pub fn parse_recipe_image(
    palette: &Palette,
    img: &SchematicImage,
) -> Result<Recipe, RenderError> {
    if img.width != RECIPE_W || img.height != RECIPE_H {
        return Err(RenderError::Decode(format!(
            "bad recipe image dimensions {}x{}",
            img.width, img.height
        )));
    }
    let mut grid: [Option<(ItemId, u32)>; 9] = Default::default();
    for (i, slot) in grid.iter_mut().enumerate() {
        let (x0, y0) = cell_origin(0, 0, i as u32 / 3, i as u32 % 3);
        *slot = read_cell(img, palette, x0, y0)?;
    }
    let (x0, y0) = cell_origin(RECIPE_INPUT_W + RECIPE_ARROW_W, PITCH, 0, 0);
    let (output, output_count) = read_cell(img, palette, x0, y0)?
        .ok_or_else(|| RenderError::Decode("empty output cell".into()))?;
    let strip = img.get(1, RECIPE_INPUT_W + 1);
    let station = if strip == COLOR_STATION_NONE {
        Station::None
    } else if strip == COLOR_STATION_TABLE {
        Station::CraftingTable
    } else if strip == COLOR_STATION_FURNACE {
        Station::Furnace
    } else {
        return Err(RenderError::Decode(format!("unknown station strip color {strip:?}")));
    };
    Ok(Recipe {
        output,
        output_count,
        grid,
        station,
    })
}

// ---------------------------------------------------------------------------
// Observation snapshots
// ---------------------------------------------------------------------------

pub const OBS_W: u32 = 9 * PITCH + 1; // 154
const OBS_SKY_H: u32 = 8;
const OBS_STRIP_Y: u32 = OBS_SKY_H;
const OBS_LIFE_Y: u32 = OBS_STRIP_Y + PITCH + 1 + 2; // nearby strip then bars
const OBS_FOOD_Y: u32 = OBS_LIFE_Y + 5;
const OBS_EQUIP_Y: u32 = OBS_FOOD_Y + 7;
const OBS_HOTBAR_Y: u32 = OBS_EQUIP_Y + PITCH + 1 + 2;
pub const OBS_H: u32 = OBS_HOTBAR_Y + PITCH + 1 + 2;

fn tick_bar(img: &mut SchematicImage, y: u32, value: u32, on: [u8; 3]) {
    for i in 0..20 {
        let color = if (i as u32) < value { on } else { COLOR_TICK_OFF };
        img.fill_rect(2 + i * 7, y, 6, 4, color);
    }
}

fn counts_phrase<'a, I>(entries: I, empty_word: &str) -> String
where
    I: Iterator<Item = (&'a str, u32)>,
{
    let parts: Vec<String> = entries.map(|(id, n)| format!("{n} {id}")).collect();
    if parts.is_empty() {
        empty_word.to_string()
    } else {
        parts.join(", ")
    }
}

/// Render the six-aspect snapshot image and its caption.
///
/// The caption is the ground-truth answer text for perception samples and is
/// exactly recoverable by `eval::extract_answers`.
pub fn render_observation(
    palette: &Palette,
    obs: &Observation,
) -> Result<(SchematicImage, String), RenderError> {
    let mut img = SchematicImage::filled(OBS_W, OBS_H, COLOR_EMPTY);
    let sky = if obs.sky_visible {
        COLOR_SKY_VISIBLE
    } else {
        COLOR_SKY_HIDDEN
    };
    img.fill_rect(0, 0, OBS_W, OBS_SKY_H, sky);

    // Nearby-object strip: one cell per distinct object, sorted by id.
    draw_grid_lines(&mut img, 0, OBS_STRIP_Y, 1, 9);
    for (i, (object, count)) in obs.in_sight.iter().take(9).enumerate() {
        if let Some(color) = palette.color(object.as_str()) {
            let (x0, y0) = cell_origin(0, OBS_STRIP_Y, 0, i as u32);
            paint_cell(&mut img, x0, y0, color, (*count).clamp(1, 64));
        }
    }

    tick_bar(&mut img, OBS_LIFE_Y, obs.life, COLOR_LIFE);
    tick_bar(&mut img, OBS_FOOD_Y, obs.food, COLOR_FOOD);

    draw_grid_lines(&mut img, 0, OBS_EQUIP_Y, 1, 1);
    if let Some(item) = &obs.equipment {
        if let Some(color) = palette.color(item.as_str()) {
            let (x0, y0) = cell_origin(0, OBS_EQUIP_Y, 0, 0);
            paint_cell(&mut img, x0, y0, color, 1);
        }
    }

    draw_grid_lines(&mut img, 0, OBS_HOTBAR_Y, 1, 9);
    for (i, (item, count)) in obs.inventory.iter().take(9).enumerate() {
        if let Some(color) = palette.color(item.as_str()) {
            let (x0, y0) = cell_origin(0, OBS_HOTBAR_Y, 0, i as u32);
            paint_cell(&mut img, x0, y0, color, (*count).clamp(1, 64));
        }
    }

    let caption = observation_caption(obs);
    Ok((img, caption))
}

/// The six-section caption grammar.
pub fn observation_caption(obs: &Observation) -> String {
    let inventory = counts_phrase(
        obs.inventory.iter().map(|(i, &n)| (i.as_str(), n)),
        "empty",
    );
    let equipment = obs
        .equipment
        .as_ref()
        .map_or("none".to_string(), |e| e.to_string());
    let in_sight = counts_phrase(
        obs.in_sight.iter().map(|(o, &n)| (o.as_str(), n)),
        "nothing",
    );
    let sky = if obs.sky_visible { "yes" } else { "no" };
    format!(
        "Inventory: {inventory}. Equipment: {equipment}. In sight: {in_sight}. Life: {}/20. Food: {}/20. Sky visible: {sky}.",
        obs.life, obs.food
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixture_kb_dir;
    use crate::kb::load_registry;
    use crate::sim;

    fn setup() -> (CraftingGraph, Palette) {
        let graph = load_registry(fixture_kb_dir()).unwrap();
        let palette = Palette::for_graph(&graph);
        (graph, palette)
    }

    #[test]
    fn palette_is_injective_and_order_independent() {
        let (graph, palette) = setup();
        let mut seen = std::collections::BTreeSet::new();
        for id in graph.items.keys() {
            let color = palette.color(id.as_str()).unwrap();
            assert!(seen.insert(color), "color collision for {id}");
            assert_ne!(color, COLOR_EMPTY);
            assert_ne!(color, COLOR_GRID);
        }
        // Assignment depends only on the sorted id list.
        let mut ids: Vec<String> = graph.items.keys().map(|i| i.0.clone()).collect();
        ids.extend(graph.world_objects().iter().map(|o| o.0.clone()));
        ids.sort();
        ids.dedup();
        let mut shuffled = ids.clone();
        shuffled.reverse();
        shuffled.sort();
        let again = Palette::from_sorted_ids(&shuffled);
        for id in &ids {
            assert_eq!(palette.color(id), again.color(id));
        }
    }

    #[test]
    fn empty_grid_caption_is_the_forced_template() {
        let (_, palette) = setup();
        let grid: InventoryGrid = Default::default();
        let (_, caption) = render_inventory_grid(&palette, &grid).unwrap();
        assert_eq!(
            caption,
            "There is a Minecraft inventory with 4 rows. From left to right, they are all empty."
        );
    }

    #[test]
    fn grid_caption_lists_row_major() {
        let (_, palette) = setup();
        let mut grid: InventoryGrid = Default::default();
        grid[0][0] = Some((ItemId::from("log"), 3));
        grid[2][4] = Some((ItemId::from("stick"), 1));
        let (img, caption) = render_inventory_grid(&palette, &grid).unwrap();
        assert!(caption.ends_with("they are 3 log, 1 stick."));
        let (x0, y0) = cell_origin(0, 0, 0, 0);
        assert_eq!(img.get(x0 + 7, y0 + 7), palette.color("log").unwrap());
    }

    #[test]
    fn inventory_roundtrip_all_counts() {
        let (_, palette) = setup();
        let mut grid: InventoryGrid = Default::default();
        // Exercise every count residue and several bar lengths.
        let counts = [1u32, 2, 7, 8, 9, 15, 16, 17, 31, 32, 33, 47, 48, 63, 64];
        let items = ["log", "planks", "stick", "cobblestone", "wool"];
        for (i, &count) in counts.iter().enumerate() {
            let item = items[i % items.len()];
            grid[i / 9][i % 9] = Some((ItemId::from(item), count));
        }
        let (img, _) = render_inventory_grid(&palette, &grid).unwrap();
        let parsed = parse_inventory_image(&palette, &img).unwrap();
        assert_eq!(parsed, grid);
    }

    #[test]
    fn recipe_roundtrip_on_every_fixture_recipe() {
        let (graph, palette) = setup();
        for recipe in graph.recipes.values() {
            let img = render_recipe(&palette, recipe).unwrap();
            let parsed = parse_recipe_image(&palette, &img).unwrap();
            assert_eq!(&parsed, recipe, "recipe {}", recipe.output);
        }
    }

    #[test]
    fn recipe_rendering_is_deterministic() {
        let (graph, palette) = setup();
        let recipe = graph.lookup_recipe(&ItemId::from("stick")).unwrap();
        let a = render_recipe(&palette, recipe).unwrap();
        let b = render_recipe(&palette, recipe).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn furnace_recipe_paints_station_strip() {
        let (graph, palette) = setup();
        let recipe = graph.lookup_recipe(&ItemId::from("charcoal")).unwrap();
        let img = render_recipe(&palette, recipe).unwrap();
        assert_eq!(img.get(1, RECIPE_INPUT_W + 1), COLOR_STATION_FURNACE);
    }

    #[test]
    fn recolored_cell_is_a_decode_error() {
        let (graph, palette) = setup();
        let recipe = graph.lookup_recipe(&ItemId::from("stick")).unwrap();
        let mut img = render_recipe(&palette, recipe).unwrap();
        let (x0, y0) = cell_origin(0, 0, 0, 1);
        img.fill_rect(x0, y0, CELL, CELL, [1, 2, 3]);
        assert!(matches!(
            parse_recipe_image(&palette, &img),
            Err(RenderError::Decode(_))
        ));
    }

    #[test]
    fn swapped_cell_parses_to_a_different_recipe() {
        let (graph, palette) = setup();
        let recipe = graph.lookup_recipe(&ItemId::from("wooden_pickaxe")).unwrap();
        let mut mutant = recipe.clone();
        mutant.grid.swap(0, 8); // move a planks cell to the empty corner
        let img = render_recipe(&palette, &mutant).unwrap();
        let parsed = parse_recipe_image(&palette, &img).unwrap();
        assert_ne!(&parsed, recipe);
        assert_eq!(parsed, mutant);
    }

    #[test]
    fn observation_caption_covers_all_sections() {
        let (graph, palette) = setup();
        let task = graph.task("stone_pickaxe").unwrap();
        let state = sim::reset(&graph, task, 4);
        let obs = state.observe();
        let (img, caption) = render_observation(&palette, &obs).unwrap();
        assert!(caption.contains("Life: 20/20"));
        assert!(caption.contains("Food: 20/20"));
        assert!(caption.contains("1 wooden_pickaxe"));
        assert_eq!(img.width, OBS_W);
        // Sky band matches the flag.
        let expected = if obs.sky_visible {
            COLOR_SKY_VISIBLE
        } else {
            COLOR_SKY_HIDDEN
        };
        assert_eq!(img.get(3, 3), expected);
    }

    #[test]
    fn caption_empty_sections_use_keywords() {
        let obs = Observation {
            inventory: Default::default(),
            equipment: None,
            in_sight: Default::default(),
            life: 20,
            food: 20,
            sky_visible: false,
            steps_used: 0,
        };
        let caption = observation_caption(&obs);
        assert!(caption.contains("Inventory: empty."));
        assert!(caption.contains("Equipment: none."));
        assert!(caption.contains("In sight: nothing."));
        assert!(caption.contains("Sky visible: no."));
    }

    #[test]
    fn padding_preserves_content() {
        let (graph, palette) = setup();
        let recipe = graph.lookup_recipe(&ItemId::from("torch")).unwrap();
        let img = render_recipe(&palette, recipe).unwrap();
        let padded = img.padded_to_multiple(8);
        assert_eq!(padded.width % 8, 0);
        assert_eq!(padded.height % 8, 0);
        for y in 0..img.height {
            for x in 0..img.width {
                assert_eq!(img.get(x, y), padded.get(x, y));
            }
        }
    }

    #[test]
    fn png_roundtrip() {
        let (graph, palette) = setup();
        let recipe = graph.lookup_recipe(&ItemId::from("bed")).unwrap();
        let img = render_recipe(&palette, recipe).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bed.png");
        img.save_png(&path).unwrap();
        let back = SchematicImage::load_png(&path).unwrap();
        assert_eq!(img, back);
    }
}
