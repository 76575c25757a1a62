//! Deterministic synthetic scenes: colored rectangles drifting horizontally
//! over a flat background, plus attribute-conjunction referring queries.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::geometry::{iou, BBox};
use crate::metrics::{write_ground_truth, GtRow};

pub const FRAME_HEIGHT: usize = 64;
pub const FRAME_WIDTH: usize = 96;
pub const BACKGROUND: [f64; 3] = [0.15, 0.15, 0.15];

const PLACEMENT_RETRIES: usize = 200;
const SCENE_RETRIES: usize = 50;
const MAX_PAIR_IOU: f64 = 0.3;

/// Closed token vocabulary understood by the text encoder.
pub const VOCABULARY: [&str; 9] = [
    "red", "blue", "green", "moving", "left", "right", "small", "large", "car",
];

pub fn token_index(token: &str) -> Result<usize> {
    VOCABULARY
        .iter()
        .position(|&v| v == token)
        .ok_or_else(|| CoreError::UnknownToken(token.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Red,
    Blue,
    Green,
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Blue, Color::Green];

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Blue => [0.1, 0.25, 0.95],
            Color::Green => [0.1, 0.8, 0.2],
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Blue => "blue",
            Color::Green => "green",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Left,
    Right,
}

impl Direction {
    pub const ALL: [Direction; 2] = [Direction::Left, Direction::Right];

    pub fn token(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
        }
    }

    fn sign(self) -> f64 {
        match self {
            Direction::Left => -1.0,
            Direction::Right => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SizeClass {
    Small,
    Large,
}

impl SizeClass {
    pub const ALL: [SizeClass; 2] = [SizeClass::Small, SizeClass::Large];

    pub fn token(self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Large => "large",
        }
    }

    /// Box extent in pixels (width, height).
    pub fn pixels(self) -> (f64, f64) {
        match self {
            SizeClass::Small => (16.0, 16.0),
            SizeClass::Large => (24.0, 24.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Attributes {
    pub color: Color,
    pub direction: Direction,
    pub size: SizeClass,
}

impl fmt::Display for Attributes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|{}|{}", self.color.token(), self.direction.token(), self.size.token())
    }
}

impl std::str::FromStr for Attributes {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split('|').collect();
        if parts.len() != 3 {
            return Err(format!("expected color|direction|size, got {s:?}"));
        }
        let color = Color::ALL
            .into_iter()
            .find(|c| c.token() == parts[0])
            .ok_or_else(|| format!("unknown color {:?}", parts[0]))?;
        let direction = Direction::ALL
            .into_iter()
            .find(|d| d.token() == parts[1])
            .ok_or_else(|| format!("unknown direction {:?}", parts[1]))?;
        let size = SizeClass::ALL
            .into_iter()
            .find(|z| z.token() == parts[2])
            .ok_or_else(|| format!("unknown size {:?}", parts[2]))?;
        Ok(Attributes { color, direction, size })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub object_id: u32,
    pub attributes: Attributes,
    pub trajectory: Vec<BBox>,
}

/// An `H×W×3` image with values in `[0, 1]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Frame {
    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Frame { height, width, pixels }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn to_tensor(&self) -> rmot_autograd::Tensor {
        rmot_autograd::Tensor::new(vec![self.height, self.width, 3], self.pixels.clone())
            .expect("frame buffer matches its shape")
    }

    pub fn from_tensor(t: &rmot_autograd::Tensor) -> Result<Self> {
        match t.shape() {
            &[height, width, 3] => Ok(Frame { height, width, pixels: t.data().to_vec() }),
            s => Err(CoreError::Invalid(format!("frame tensor must be H×W×3, got {s:?}"))),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer size matches dimensions");
        img.save(path)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneParams {
    pub n_objects: usize,
    pub length: usize,
    /// Maximum per-frame positional jitter in pixels.
    pub jitter: f64,
    /// Upper bound on object count, normally the model's query count.
    pub max_objects: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams { n_objects: 4, length: 24, jitter: 0.3, max_objects: 8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneState {
    pub seed: u64,
    pub objects: Vec<SceneObject>,
    pub frames: Vec<Frame>,
    pub length: usize,
}

impl SceneState {
    /// Ground-truth boxes of the given objects at frame `t`, in object order.
    pub fn boxes_at(&self, t: usize) -> Vec<BBox> {
        self.objects.iter().map(|o| o.trajectory[t]).collect()
    }
}

pub fn gen_scene(seed: u64, params: &SceneParams) -> Result<SceneState> {
    let fail = |reason: String| CoreError::SceneGeneration { seed, reason };
    if params.n_objects < 2 || params.n_objects > params.max_objects {
        return Err(fail(format!(
            "n_objects must lie in [2, {}], got {}",
            params.max_objects, params.n_objects
        )));
    }
    if params.length == 0 {
        return Err(fail("scene length must be positive".into()));
    }
    if !(params.jitter >= 0.0 && params.jitter < 4.0) {
        return Err(fail(format!("jitter {} outside [0, 4) pixels", params.jitter)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..SCENE_RETRIES {
        if let Some(objects) = try_place(&mut rng, params) {
            let mut scene = SceneState { seed, objects, frames: Vec::new(), length: params.length };
            scene.frames = (0..params.length).map(|t| render(&scene, t)).collect();
            return Ok(scene);
        }
    }
    Err(fail(format!("no non-overlapping placement after {SCENE_RETRIES} attempts")))
}

fn sample_attributes(rng: &mut ChaCha8Rng) -> Attributes {
    Attributes {
        color: *Color::ALL.choose(rng).unwrap(),
        direction: *Direction::ALL.choose(rng).unwrap(),
        size: *SizeClass::ALL.choose(rng).unwrap(),
    }
}

fn shares_attribute(a: &Attributes, b: &Attributes) -> bool {
    a.color == b.color || a.direction == b.direction || a.size == b.size
}

fn try_place(rng: &mut ChaCha8Rng, params: &SceneParams) -> Option<Vec<SceneObject>> {
    let (w0, h0) = (FRAME_WIDTH as f64, FRAME_HEIGHT as f64);
    let mut attrs: Vec<Attributes> = (0..params.n_objects).map(|_| sample_attributes(rng)).collect();
    // Two objects always share the binary attributes by pigeonhole once there
    // are three; with two objects force a shared direction.
    if !shares_attribute(&attrs[0], &attrs[1]) && params.n_objects == 2 {
        attrs[1].direction = attrs[0].direction;
    }

    let mut objects: Vec<SceneObject> = Vec::with_capacity(params.n_objects);
    for (k, a) in attrs.into_iter().enumerate() {
        let (pw, ph) = a.size.pixels();
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let speed = rng.gen_range(1.0..1.8) * a.direction.sign();
            let travel = speed * (params.length - 1) as f64;
            let margin_x = pw / 2.0 + params.jitter;
            let margin_y = ph / 2.0 + params.jitter;
            let (lo, hi) = if travel >= 0.0 {
                (margin_x, w0 - margin_x - travel)
            } else {
                (margin_x - travel, w0 - margin_x)
            };
            if lo >= hi {
                return None;
            }
            let cx0 = rng.gen_range(lo..hi);
            let cy = rng.gen_range(margin_y..h0 - margin_y);
            let trajectory: Vec<BBox> = (0..params.length)
                .map(|t| {
                    let (jx, jy) = if params.jitter > 0.0 {
                        (
                            rng.gen_range(-params.jitter..=params.jitter),
                            rng.gen_range(-params.jitter..=params.jitter),
                        )
                    } else {
                        (0.0, 0.0)
                    };
                    BBox::new(
                        (cx0 + speed * t as f64 + jx) / w0,
                        (cy + jy) / h0,
                        pw / w0,
                        ph / h0,
                    )
                })
                .collect();
            let clear = objects.iter().all(|o| {
                o.trajectory
                    .iter()
                    .zip(&trajectory)
                    .all(|(p, q)| iou(p, q) <= MAX_PAIR_IOU)
            });
            if clear {
                placed = Some(trajectory);
                break;
            }
        }
        objects.push(SceneObject { object_id: k as u32 + 1, attributes: a, trajectory: placed? });
    }
    Some(objects)
}

/// Rasterizes frame `t`. A pixel takes an object's color when its center lies
/// inside the box; later objects paint over earlier ones.
pub fn render(scene: &SceneState, t: usize) -> Frame {
    assert!(t < scene.length, "frame {t} outside scene of length {}", scene.length);
    let mut frame = Frame::filled(FRAME_HEIGHT, FRAME_WIDTH, BACKGROUND);
    for obj in &scene.objects {
        paint(&mut frame, &obj.trajectory[t], obj.attributes.color.rgb());
    }
    frame
}

fn paint(frame: &mut Frame, b: &BBox, rgb: [f64; 3]) {
    let (w0, h0) = (frame.width as f64, frame.height as f64);
    let (x0, x1) = ((b.cx - b.w / 2.0) * w0, (b.cx + b.w / 2.0) * w0);
    let (y0, y1) = ((b.cy - b.h / 2.0) * h0, (b.cy + b.h / 2.0) * h0);
    for y in 0..frame.height {
        let py = y as f64 + 0.5;
        if py < y0 || py >= y1 {
            continue;
        }
        for x in 0..frame.width {
            let px = x as f64 + 0.5;
            if px >= x0 && px < x1 {
                let i = (y * frame.width + x) * 3;
                frame.pixels[i..i + 3].copy_from_slice(&rgb);
            }
        }
    }
}

/// A conjunction over the three attribute families; `None` leaves a family
/// unconstrained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AttributeFilter {
    pub color: Option<Color>,
    pub direction: Option<Direction>,
    pub size: Option<SizeClass>,
}

impl AttributeFilter {
    pub fn matches(&self, a: &Attributes) -> bool {
        self.color.map_or(true, |c| c == a.color)
            && self.direction.map_or(true, |d| d == a.direction)
            && self.size.map_or(true, |s| s == a.size)
    }

    pub fn arity(&self) -> usize {
        self.color.is_some() as usize + self.direction.is_some() as usize + self.size.is_some() as usize
    }

    /// Token form, e.g. `large red car moving left`.
    pub fn tokens(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(s) = self.size {
            out.push(s.token());
        }
        if let Some(c) = self.color {
            out.push(c.token());
        }
        out.push("car");
        if let Some(d) = self.direction {
            out.push("moving");
            out.push(d.token());
        }
        out.into_iter().map(String::from).collect()
    }

    pub fn parse_tokens(tokens: &[String]) -> Result<Self> {
        let mut f = AttributeFilter { color: None, direction: None, size: None };
        for t in tokens {
            token_index(t)?;
            if let Some(c) = Color::ALL.into_iter().find(|c| c.token() == t) {
                f.color = Some(c);
            } else if let Some(d) = Direction::ALL.into_iter().find(|d| d.token() == t) {
                f.direction = Some(d);
            } else if let Some(s) = SizeClass::ALL.into_iter().find(|s| s.token() == t) {
                f.size = Some(s);
            }
        }
        Ok(f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferringQuery {
    pub tokens: Vec<String>,
    pub filter: AttributeFilter,
    pub referent_ids: BTreeSet<u32>,
}

impl ReferringQuery {
    pub fn from_filter(scene: &SceneState, filter: AttributeFilter) -> Self {
        let referent_ids = scene
            .objects
            .iter()
            .filter(|o| filter.matches(&o.attributes))
            .map(|o| o.object_id)
            .collect();
        ReferringQuery { tokens: filter.tokens(), filter, referent_ids }
    }

    /// Per-object referent flags in scene object order.
    pub fn referent_flags(&self, scene: &SceneState) -> Vec<bool> {
        scene.objects.iter().map(|o| self.referent_ids.contains(&o.object_id)).collect()
    }
}

/// Every 1–3 attribute conjunction drawn from some object's attributes that
/// selects a non-empty proper subset of the scene, in a canonical order.
pub fn valid_filters(scene: &SceneState) -> Vec<AttributeFilter> {
    let mut set = BTreeSet::new();
    for o in &scene.objects {
        let a = o.attributes;
        for mask in 1u8..8 {
            set.insert(AttributeFilter {
                color: (mask & 1 != 0).then_some(a.color),
                direction: (mask & 2 != 0).then_some(a.direction),
                size: (mask & 4 != 0).then_some(a.size),
            });
        }
    }
    set.into_iter()
        .filter(|f| {
            let n = scene.objects.iter().filter(|o| f.matches(&o.attributes)).count();
            n > 0 && n < scene.objects.len()
        })
        .collect()
}

pub fn gen_query(scene: &SceneState, seed: u64) -> Result<ReferringQuery> {
    let filters = valid_filters(scene);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let filter = filters.choose(&mut rng).ok_or_else(|| {
        CoreError::NoValidQuery(format!("scene seed {} has no discriminative conjunction", scene.seed))
    })?;
    Ok(ReferringQuery::from_filter(scene, *filter))
}

/// Writes `frame_XXXX.png` images, `gt.txt` and `query.txt` into `dir`.
pub fn export_scene(scene: &SceneState, query: &ReferringQuery, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (t, frame) in scene.frames.iter().enumerate() {
        frame.save_png(&dir.join(format!("frame_{t:04}.png")))?;
    }
    let rows: Vec<GtRow> = (0..scene.length)
        .flat_map(|t| {
            scene.objects.iter().map(move |o| GtRow {
                frame: t,
                id: o.object_id,
                bbox: o.trajectory[t],
                attributes: o.attributes,
                referent: query.referent_ids.contains(&o.object_id),
            })
        })
        .collect();
    write_ground_truth(&dir.join("gt.txt"), &rows)?;
    fs::write(dir.join("query.txt"), query.tokens.join(" ") + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed_scene(attrs: &[Attributes]) -> SceneState {
        let objects = attrs
            .iter()
            .enumerate()
            .map(|(k, &a)| SceneObject {
                object_id: k as u32 + 1,
                attributes: a,
                trajectory: vec![BBox::new(0.15 + 0.3 * k as f64, 0.5, 0.1, 0.2)],
            })
            .collect();
        SceneState { seed: 0, objects, frames: Vec::new(), length: 1 }
    }

    fn attrs(color: Color, direction: Direction) -> Attributes {
        Attributes { color, direction, size: SizeClass::Small }
    }

    #[test]
    fn same_seed_gives_identical_pixels() {
        let p = SceneParams::default();
        let a = gen_scene(11, &p).unwrap();
        let b = gen_scene(11, &p).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.frames, gen_scene(12, &p).unwrap().frames);
    }

    #[test]
    fn object_ids_are_distinct() {
        let p = SceneParams { n_objects: 4, ..Default::default() };
        let s = gen_scene(3, &p).unwrap();
        let ids: BTreeSet<u32> = s.objects.iter().map(|o| o.object_id).collect();
        assert_eq!(ids.len(), 4);
    }

    #[test]
    fn rejects_object_count_outside_bounds() {
        let p = SceneParams { n_objects: 1, ..Default::default() };
        assert!(matches!(gen_scene(0, &p), Err(CoreError::SceneGeneration { seed: 0, .. })));
        let p = SceneParams { n_objects: 9, ..Default::default() };
        assert!(gen_scene(0, &p).is_err());
    }

    #[test]
    fn empty_scene_renders_uniform_background() {
        let s = SceneState { seed: 0, objects: vec![], frames: vec![], length: 1 };
        let f = render(&s, 0);
        assert!(f.pixels.chunks(3).all(|p| p == BACKGROUND));
    }

    #[test]
    fn object_center_has_its_color() {
        let s = gen_scene(5, &SceneParams::default()).unwrap();
        for t in [0, 10, 23] {
            let f = render(&s, t);
            // The last object is painted on top, so its center is never covered.
            let o = s.objects.last().unwrap();
            let b = o.trajectory[t];
            let x = (b.cx * FRAME_WIDTH as f64) as usize;
            let y = (b.cy * FRAME_HEIGHT as f64) as usize;
            assert_eq!(f.pixel(y, x), o.attributes.color.rgb());
            assert_eq!(f, render(&s, t));
        }
    }

    #[test]
    fn query_set_semantics() {
        let s = fixed_scene(&[
            attrs(Color::Red, Direction::Left),
            attrs(Color::Red, Direction::Right),
            attrs(Color::Blue, Direction::Left),
        ]);
        let red = AttributeFilter { color: Some(Color::Red), direction: None, size: None };
        let q = ReferringQuery::from_filter(&s, red);
        assert_eq!(q.referent_ids, BTreeSet::from([1, 2]));
        let red_left = AttributeFilter { direction: Some(Direction::Left), ..red };
        let q = ReferringQuery::from_filter(&s, red_left);
        assert_eq!(q.referent_ids, BTreeSet::from([1]));
        assert_eq!(q.tokens, ["red", "car", "moving", "left"]);
        assert_eq!(AttributeFilter::parse_tokens(&q.tokens).unwrap(), red_left);
    }

    #[test]
    fn unknown_token_is_named() {
        let err = AttributeFilter::parse_tokens(&["purple".to_string()]).unwrap_err();
        assert!(err.to_string().contains("purple"));
    }

    #[test]
    fn no_discriminative_query_is_rejected() {
        let same = attrs(Color::Red, Direction::Left);
        let s = fixed_scene(&[same, same]);
        assert!(matches!(gen_query(&s, 0), Err(CoreError::NoValidQuery(_))));
    }

    #[test]
    fn attributes_round_trip_through_text() {
        let a = Attributes { color: Color::Green, direction: Direction::Right, size: SizeClass::Large };
        assert_eq!(a.to_string(), "green|right|large");
        assert_eq!("green|right|large".parse::<Attributes>().unwrap(), a);
    }
}
