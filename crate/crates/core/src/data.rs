//! Deterministic synthetic dataset: colored geometric shapes on a
//! black 28x28 canvas, templated captions, and ground-truth instruction
//! dialogues. Scenes place 1-3 objects with distinct (color, shape)
//! types on a 2x2 cell grid that coincides with the 14x14 patch grid,
//! so every object owns exactly one patch — the grounding mask the
//! diagnostics use.
//!
//! All rasterization thresholds are integer-only and all sampling runs
//! through seeded ChaCha streams: a (seed, counts) pair produces
//! byte-identical images and manifests on any platform.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instruct::DialogueTurn;
use crate::vision::ImageTensor;

pub const CANVAS: usize = 28;
pub const CELL: usize = 14;
pub const GRID: usize = 2;
pub const N_CELLS: usize = GRID * GRID;
pub const EVAL_POOL: usize = 512;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("requested {requested} samples but only {available} distinct scenes exist")]
    NotEnoughScenes { requested: usize, available: usize },
    #[error("scene invalid: {what}")]
    BadScene { what: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image file {path} corrupt: {what}")]
    BadImage { path: PathBuf, what: String },
    #[error("manifest line {line} invalid: {source}")]
    BadManifest {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }
}

/// All 12 (color, shape) object types in a fixed enumeration order.
pub fn object_types() -> Vec<(Color, Shape)> {
    let mut out = Vec::with_capacity(12);
    for color in Color::ALL {
        for shape in Shape::ALL {
            out.push((color, shape));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub color: Color,
    pub shape: Shape,
    /// Row-major cell index on the GRID x GRID placement grid; cells
    /// coincide with vision patches.
    pub cell: usize,
}

/// A renderable scene: 1-3 objects, distinct (color, shape) types,
/// distinct cells, stored sorted by cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    objects: Vec<SceneObject>,
}

impl SceneSpec {
    pub fn new(mut objects: Vec<SceneObject>) -> Result<Self, DataError> {
        if objects.is_empty() || objects.len() > 3 {
            return Err(DataError::BadScene { what: format!("{} objects", objects.len()) });
        }
        objects.sort_by_key(|o| o.cell);
        for pair in objects.windows(2) {
            if pair[0].cell == pair[1].cell {
                return Err(DataError::BadScene {
                    what: format!("two objects share cell {}", pair[0].cell),
                });
            }
        }
        for o in &objects {
            if o.cell >= N_CELLS {
                return Err(DataError::BadScene { what: format!("cell {} out of grid", o.cell) });
            }
        }
        for i in 0..objects.len() {
            for j in (i + 1)..objects.len() {
                if objects[i].color == objects[j].color && objects[i].shape == objects[j].shape {
                    return Err(DataError::BadScene {
                        what: format!(
                            "duplicate object type {} {}",
                            objects[i].color.word(),
                            objects[i].shape.word()
                        ),
                    });
                }
            }
        }
        Ok(Self { objects })
    }

    /// Empty scene; renders to the blank image.
    pub fn empty() -> Self {
        Self { objects: Vec::new() }
    }

    pub fn objects(&self) -> &[SceneObject] {
        &self.objects
    }

    pub fn count(&self) -> usize {
        self.objects.len()
    }

    pub fn contains(&self, color: Color, shape: Shape) -> bool {
        self.objects.iter().any(|o| o.color == color && o.shape == shape)
    }

    /// Colors of objects with the given shape.
    pub fn colors_of(&self, shape: Shape) -> Vec<Color> {
        self.objects.iter().filter(|o| o.shape == shape).map(|o| o.color).collect()
    }

    /// Patch indices covered by objects (cell == patch).
    pub fn object_patches(&self) -> Vec<usize> {
        self.objects.iter().map(|o| o.cell).collect()
    }
}

// ─────────────────────────── rendering ──────────────────────────────

/// Integer point-in-shape test on pixel centers. Coordinates are
/// doubled so centers land on odd integers; no floating point anywhere.
fn inside(shape: Shape, dx: usize, dy: usize) -> bool {
    let px = (2 * dx + 1) as i64;
    let py = (2 * dy + 1) as i64;
    match shape {
        // Disc of radius 5; cell center (6.5, 6.5) doubles to (13, 13).
        Shape::Circle => {
            let ddx = px - 13;
            let ddy = py - 13;
            ddx * ddx + ddy * ddy <= 100
        }
        // 8x8 axis-aligned square.
        Shape::Square => (3..=10).contains(&dx) && (3..=10).contains(&dy),
        // Upward triangle via integer edge functions; vertices in
        // doubled coordinates: apex (13,5), base (3,23)-(23,23).
        Shape::Triangle => {
            let verts = [(13i64, 5i64), (23, 23), (3, 23)];
            let mut sign_ok = true;
            for i in 0..3 {
                let (ax, ay) = verts[i];
                let (bx, by) = verts[(i + 1) % 3];
                let cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax);
                sign_ok &= cross >= 0;
            }
            sign_ok
        }
    }
}

/// Deterministic rasterization: black background, each object drawn in
/// its pure color inside its own cell.
pub fn render(scene: &SceneSpec) -> ImageTensor {
    let mut img = ImageTensor::blank(CANVAS, CANVAS);
    for obj in &scene.objects {
        let (gy, gx) = (obj.cell / GRID, obj.cell % GRID);
        let rgb = obj.color.rgb();
        for dy in 0..CELL {
            for dx in 0..CELL {
                if inside(obj.shape, dx, dy) {
                    for (c, &v) in rgb.iter().enumerate() {
                        img.set(c, gy * CELL + dy, gx * CELL + dx, v);
                    }
                }
            }
        }
    }
    img
}

// ─────────────────────────── captions ───────────────────────────────

fn phrase(obj: &SceneObject) -> String {
    format!("{} {}", obj.color.word(), obj.shape.word())
}

/// Templated caption naming every object, ordered by grid position.
/// Template choice is seeded; three-object scenes always use the bare
/// comma list so every caption tokenizes to at most 48 ids.
pub fn caption(scene: &SceneSpec, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phrases: Vec<String> = scene.objects.iter().map(phrase).collect();
    match phrases.len() {
        0 => "a black background".to_string(),
        1 => {
            let p = &phrases[0];
            match rng.random_range(0..4u32) {
                0 => format!("a {p}"),
                1 => format!("a photo of a {p}"),
                2 => format!("there is a {p}"),
                _ => format!("a {p} on black"),
            }
        }
        2 => {
            let (p0, p1) = (&phrases[0], &phrases[1]);
            match rng.random_range(0..4u32) {
                0 => format!("a {p0} and a {p1}"),
                1 => format!("a {p0} with a {p1}"),
                2 => format!("{p0} and {p1}"),
                _ => format!("{p0}, {p1}"),
            }
        }
        _ => phrases.join(", "),
    }
}

// ─────────────────────────── dialogues ──────────────────────────────

fn count_word(n: usize) -> &'static str {
    match n {
        0 => "zero.",
        1 => "one.",
        2 => "two.",
        _ => "three.",
    }
}

/// Ground-truth existence / counting / attribute turns derived from
/// the scene. 1-2 turns, seeded; answers come straight from the spec
/// so they are correct by construction.
pub fn make_instructions(scene: &SceneSpec, seed: u64) -> Vec<DialogueTurn> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_turns = if rng.random_bool(0.5) { 2 } else { 1 };

    // Question kinds: 0 existence-yes, 1 existence-no, 2 count,
    // 3 attribute (only for shapes appearing exactly once).
    let unique_shapes: Vec<Shape> = Shape::ALL
        .into_iter()
        .filter(|&s| scene.colors_of(s).len() == 1)
        .collect();
    let absent: Vec<(Color, Shape)> = object_types()
        .into_iter()
        .filter(|&(c, s)| !scene.contains(c, s))
        .collect();

    let mut kinds: Vec<u32> = vec![1, 2];
    if !scene.objects.is_empty() {
        kinds.push(0);
    }
    if !unique_shapes.is_empty() {
        kinds.push(3);
    }

    let mut turns = Vec::with_capacity(n_turns);
    let mut used = Vec::new();
    for _ in 0..n_turns {
        let available: Vec<u32> = kinds.iter().copied().filter(|k| !used.contains(k)).collect();
        let kind = available[rng.random_range(0..available.len())];
        used.push(kind);
        let turn = match kind {
            0 => {
                let obj = &scene.objects()[rng.random_range(0..scene.count())];
                DialogueTurn {
                    query: format!("is there a {} {}?", obj.color.word(), obj.shape.word()),
                    response: "yes.".to_string(),
                }
            }
            1 => {
                let (c, s) = absent[rng.random_range(0..absent.len())];
                DialogueTurn {
                    query: format!("is there a {} {}?", c.word(), s.word()),
                    response: "no.".to_string(),
                }
            }
            2 => DialogueTurn {
                query: "how many shapes?".to_string(),
                response: count_word(scene.count()).to_string(),
            },
            _ => {
                let shape = unique_shapes[rng.random_range(0..unique_shapes.len())];
                let color = scene.colors_of(shape)[0];
                DialogueTurn {
                    query: format!("what color is the {}?", shape.word()),
                    response: format!("{}.", color.word()),
                }
            }
        };
        turns.push(turn);
    }
    turns
}

/// Canned scene-free dialogues for the blank-image placeholder path.
pub fn text_only_turns(seed: u64) -> Vec<DialogueTurn> {
    let canned = [
        ("is red a color?", "yes."),
        ("is a circle a shape?", "yes."),
        ("is blue a shape?", "no."),
        ("how many is a pair?", "two."),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (q, r) = canned[rng.random_range(0..canned.len())];
    vec![DialogueTurn { query: q.to_string(), response: r.to_string() }]
}

// ─────────────────────── scene enumeration ──────────────────────────

/// Every distinct scene, fixed order: object count ascending, then
/// lexicographic over type combinations, cell choices and assignments.
pub fn enumerate_scenes() -> Vec<SceneSpec> {
    let types = object_types();
    let mut scenes = Vec::new();
    for n in 1..=3usize {
        let type_combos = combinations(types.len(), n);
        let cell_combos = combinations(N_CELLS, n);
        for tc in &type_combos {
            for cc in &cell_combos {
                for perm in permutations(n) {
                    let objects: Vec<SceneObject> = (0..n)
                        .map(|i| {
                            let (color, shape) = types[tc[i]];
                            SceneObject { color, shape, cell: cc[perm[i]] }
                        })
                        .collect();
                    scenes.push(SceneSpec::new(objects).expect("enumeration is valid"));
                }
            }
        }
    }
    scenes
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if current.len() == k {
            out.push(current.clone());
            return;
        }
        for i in start..n {
            current.push(i);
            rec(i + 1, n, k, current, out);
            current.pop();
        }
    }
    rec(0, n, k, &mut current, &mut out);
    out
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut items: Vec<usize> = (0..n).collect();
    fn rec(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
        if k == items.len() {
            out.push(items.clone());
            return;
        }
        for i in k..items.len() {
            items.swap(k, i);
            rec(items, k + 1, out);
            items.swap(k, i);
        }
    }
    rec(&mut items, 0, &mut out);
    out
}

// ───────────────────────── manifests & IO ───────────────────────────

/// One dataset record. `image` is None for text-only samples (the
/// blank placeholder is used at load time). Captions are present on
/// every image-bearing record; dialogue turns only on instruction and
/// eval records.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SampleRecord {
    pub id: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub turns: Vec<ManifestTurn>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ManifestTurn {
    pub query: String,
    pub response: String,
}

impl From<&DialogueTurn> for ManifestTurn {
    fn from(t: &DialogueTurn) -> Self {
        Self { query: t.query.clone(), response: t.response.clone() }
    }
}

impl ManifestTurn {
    pub fn to_turn(&self) -> DialogueTurn {
        DialogueTurn { query: self.query.clone(), response: self.response.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub split: String,
    pub fraction: f64,
    pub seed: u64,
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut buf = Vec::new();
        for record in &self.records {
            serde_json::to_writer(&mut buf, record).expect("record serializes");
            buf.push(b'\n');
        }
        fs::write(path, buf).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path, split: &str, fraction: f64, seed: u64) -> Result<Self, DataError> {
        let text = fs::read_to_string(path)
            .map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: SampleRecord = serde_json::from_str(line)
                .map_err(|source| DataError::BadManifest { line: i + 1, source })?;
            records.push(record);
        }
        Ok(Self { split: split.to_string(), fraction, seed, records })
    }
}

pub const IMAGE_MAGIC: &[u8; 8] = b"CGVLIMG0";

/// Raw image container: magic, u32 height, u32 width (little endian),
/// then 3*H*W f64 pixel values, channel-major.
pub fn write_image(path: &Path, image: &ImageTensor) -> Result<(), DataError> {
    let mut buf = Vec::with_capacity(16 + image.data().len() * 8);
    buf.extend_from_slice(IMAGE_MAGIC);
    buf.extend_from_slice(&(image.height() as u32).to_le_bytes());
    buf.extend_from_slice(&(image.width() as u32).to_le_bytes());
    for v in image.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

pub fn read_image(path: &Path) -> Result<ImageTensor, DataError> {
    let mut file = fs::File::open(path)
        .map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    let mut header = [0u8; 16];
    file.read_exact(&mut header)
        .map_err(|_| DataError::BadImage { path: path.to_path_buf(), what: "truncated header".into() })?;
    if &header[0..8] != IMAGE_MAGIC {
        return Err(DataError::BadImage { path: path.to_path_buf(), what: "bad magic".into() });
    }
    let h = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let mut raw = Vec::new();
    file.read_to_end(&mut raw)
        .map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    if raw.len() != 3 * h * w * 8 {
        return Err(DataError::BadImage {
            path: path.to_path_buf(),
            what: format!("expected {} payload bytes, found {}", 3 * h * w * 8, raw.len()),
        });
    }
    let data: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ImageTensor::new(h, w, data)
        .map_err(|e| DataError::BadImage { path: path.to_path_buf(), what: e.to_string() })
}

/// The generated dataset layout on disk.
pub struct SplitFiles {
    pub pretrain: PathBuf,
    pub instruct_100: PathBuf,
    pub instruct_010: PathBuf,
    pub instruct_001: PathBuf,
    pub eval: PathBuf,
}

fn fraction_len(total: usize, fraction: f64) -> usize {
    ((total as f64 * fraction).floor() as usize).max(1)
}

/// Builds disjoint pretrain / instruct / eval pools from the seeded
/// shuffle of all distinct scenes and writes manifests plus image
/// binaries under `out`.
///
/// Fraction manifests are strict prefixes of the instruct pool; the
/// eval pool (512 scenes) never overlaps the training pools. Every
/// 16th instruction record and every 32nd eval record is a text-only
/// dialogue over the blank placeholder image.
pub fn build_splits(
    out: &Path,
    n_pretrain: usize,
    n_instruct: usize,
    seed: u64,
) -> Result<SplitFiles, DataError> {
    let mut scenes = enumerate_scenes();
    let needed = n_pretrain + n_instruct + EVAL_POOL;
    if needed > scenes.len() {
        return Err(DataError::NotEnoughScenes { requested: needed, available: scenes.len() });
    }
    if n_pretrain == 0 || n_instruct == 0 {
        return Err(DataError::BadScene { what: "pool sizes must be positive".into() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    scenes.shuffle(&mut rng);

    let images_dir = out.join("images");
    fs::create_dir_all(&images_dir)
        .map_err(|source| DataError::Io { path: images_dir.clone(), source })?;

    let record_seed = |id: usize| seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(id as u64);

    let write_scene_image = |id: usize, scene: &SceneSpec| -> Result<String, DataError> {
        let rel = format!("images/img_{id:05}.bin");
        write_image(&out.join(&rel), &render(scene))?;
        Ok(rel)
    };

    // Pretrain pool: captioned image-text pairs.
    let mut pretrain_records = Vec::with_capacity(n_pretrain);
    for (offset, scene) in scenes[..n_pretrain].iter().enumerate() {
        let id = offset;
        let rel = write_scene_image(id, scene)?;
        pretrain_records.push(SampleRecord {
            id,
            image: Some(rel),
            caption: Some(caption(scene, record_seed(id))),
            turns: Vec::new(),
            scene: Some(scene.clone()),
        });
    }

    // Instruction pool: dialogues, sprinkled text-only placeholders.
    let mut instruct_records = Vec::with_capacity(n_instruct);
    for (offset, scene) in scenes[n_pretrain..n_pretrain + n_instruct].iter().enumerate() {
        let id = n_pretrain + offset;
        let text_only = offset % 16 == 15;
        let record = if text_only {
            SampleRecord {
                id,
                image: None,
                caption: None,
                turns: text_only_turns(record_seed(id)).iter().map(ManifestTurn::from).collect(),
                scene: None,
            }
        } else {
            let rel = write_scene_image(id, scene)?;
            SampleRecord {
                id,
                image: Some(rel),
                caption: Some(caption(scene, record_seed(id))),
                turns: make_instructions(scene, record_seed(id)).iter().map(ManifestTurn::from).collect(),
                scene: Some(scene.clone()),
            }
        };
        instruct_records.push(record);
    }

    // Eval pool.
    let mut eval_records = Vec::with_capacity(EVAL_POOL);
    for (offset, scene) in scenes[n_pretrain + n_instruct..needed].iter().enumerate() {
        let id = n_pretrain + n_instruct + offset;
        let text_only = offset % 32 == 31;
        let record = if text_only {
            SampleRecord {
                id,
                image: None,
                caption: None,
                turns: text_only_turns(record_seed(id)).iter().map(ManifestTurn::from).collect(),
                scene: None,
            }
        } else {
            let rel = write_scene_image(id, scene)?;
            SampleRecord {
                id,
                image: Some(rel),
                caption: Some(caption(scene, record_seed(id))),
                turns: make_instructions(scene, record_seed(id)).iter().map(ManifestTurn::from).collect(),
                scene: Some(scene.clone()),
            }
        };
        eval_records.push(record);
    }

    let files = SplitFiles {
        pretrain: out.join("pretrain.jsonl"),
        instruct_100: out.join("instruct_100.jsonl"),
        instruct_010: out.join("instruct_010.jsonl"),
        instruct_001: out.join("instruct_001.jsonl"),
        eval: out.join("eval.jsonl"),
    };

    DatasetManifest {
        split: "pretrain".into(),
        fraction: 1.0,
        seed,
        records: pretrain_records,
    }
    .save(&files.pretrain)?;

    for (path, fraction) in [
        (&files.instruct_100, 1.0),
        (&files.instruct_010, 0.10),
        (&files.instruct_001, 0.01),
    ] {
        let len = fraction_len(instruct_records.len(), fraction);
        DatasetManifest {
            split: "instruct".into(),
            fraction,
            seed,
            records: instruct_records[..len].to_vec(),
        }
        .save(path)?;
    }

    DatasetManifest { split: "eval".into(), fraction: 1.0, seed, records: eval_records }
        .save(&files.eval)?;

    Ok(files)
}

/// Loads a record's image, substituting the blank placeholder for
/// text-only records.
pub fn load_record_image(data_dir: &Path, record: &SampleRecord) -> Result<ImageTensor, DataError> {
    match &record.image {
        Some(rel) => read_image(&data_dir.join(rel)),
        None => Ok(ImageTensor::blank(CANVAS, CANVAS)),
    }
}
