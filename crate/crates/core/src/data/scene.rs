//! Synthetic referring-segmentation scenes.
//!
//! A scene is a textured background with a handful of flat-colored shapes. One
//! of them is the target; its expression uses the fewest attributes (color,
//! size, position) that single it out among the others.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::raster::{Mask, Raster};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Diamond,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 5] = [
        Shape::Circle,
        Shape::Square,
        Shape::Triangle,
        Shape::Diamond,
        Shape::Cross,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Diamond => "diamond",
            Shape::Cross => "cross",
        }
    }

    /// Whether the point `(dx, dy)` relative to the center lies inside a shape of radius `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs().max(dy.abs()) <= 0.85 * r,
            Shape::Diamond => dx.abs() + dy.abs() <= r,
            Shape::Cross => {
                let arm = r / 3.0;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
            Shape::Triangle => {
                // Apex up, base at dy = r/2, half-width at base r*sqrt(3)/2.
                if !(-r..=0.5 * r).contains(&dy) {
                    return false;
                }
                let half = (dy + r) / 1.5 * (3f64.sqrt() / 2.0);
                dx.abs() <= half
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Orange,
    Purple,
    Cyan,
    White,
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Orange,
        Color::Purple,
        Color::Cyan,
        Color::White,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Orange => "orange",
            Color::Purple => "purple",
            Color::Cyan => "cyan",
            Color::White => "white",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.86, 0.12, 0.10],
            Color::Green => [0.12, 0.70, 0.20],
            Color::Blue => [0.15, 0.30, 0.92],
            Color::Yellow => [0.95, 0.88, 0.12],
            Color::Orange => [1.00, 0.55, 0.08],
            Color::Purple => [0.60, 0.18, 0.80],
            Color::Cyan => [0.10, 0.86, 0.86],
            Color::White => [0.96, 0.96, 0.96],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

impl SizeClass {
    pub const ALL: [SizeClass; 3] = [SizeClass::Small, SizeClass::Medium, SizeClass::Large];

    pub fn word(self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Medium => "medium",
            SizeClass::Large => "large",
        }
    }
}

/// One of nine cells of a 3x3 partition of the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Position {
    pub row: u8,
    pub col: u8,
}

impl Position {
    pub fn all() -> impl Iterator<Item = Position> {
        (0..3u8).flat_map(|row| (0..3u8).map(move |col| Position { row, col }))
    }

    pub fn phrase(self) -> &'static str {
        match (self.row, self.col) {
            (0, 0) => "in the top left",
            (0, 1) => "at the top",
            (0, 2) => "in the top right",
            (1, 0) => "on the left",
            (1, 1) => "in the center",
            (1, 2) => "on the right",
            (2, 0) => "in the bottom left",
            (2, 1) => "at the bottom",
            (2, 2) => "in the bottom right",
            _ => unreachable!("position cell out of range"),
        }
    }

    pub fn tag(self) -> String {
        self.phrase()
            .split(' ')
            .skip(2)
            .collect::<Vec<_>>()
            .join("_")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub size: SizeClass,
    pub position: Position,
    pub center: (f64, f64),
    pub radius: f64,
}

impl SceneObject {
    fn contains(&self, x: f64, y: f64) -> bool {
        self.shape
            .contains(x - self.center.0, y - self.center.1, self.radius)
    }
}

/// Parameters of the scene distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Side of the square source image in pixels.
    pub side: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Probability that the target is drawn from the small size class.
    pub tiny_fraction: f64,
    /// Probability that each distractor copies the target's shape and color,
    /// so only size or position can separate them.
    pub confusable_fraction: f64,
    /// Radius ranges per size class as fractions of `side`.
    pub radius_small: (f64, f64),
    pub radius_medium: (f64, f64),
    pub radius_large: (f64, f64),
    pub palette: Vec<Color>,
    pub shapes: Vec<Shape>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            side: 800,
            min_objects: 2,
            max_objects: 6,
            tiny_fraction: 0.5,
            confusable_fraction: 0.3,
            radius_small: (0.020, 0.032),
            radius_medium: (0.050, 0.065),
            radius_large: (0.085, 0.105),
            palette: Color::ALL.to_vec(),
            shapes: Shape::ALL.to_vec(),
        }
    }
}

impl SceneSpec {
    fn radius_range(&self, size: SizeClass) -> (f64, f64) {
        let (lo, hi) = match size {
            SizeClass::Small => self.radius_small,
            SizeClass::Medium => self.radius_medium,
            SizeClass::Large => self.radius_large,
        };
        // At least 2 px so the object survives nearest-neighbour mask resizing.
        let s = self.side as f64;
        ((lo * s).max(2.0), (hi * s).max(2.0))
    }

    fn check(&self) -> Result<()> {
        if self.min_objects < 1 || self.min_objects > self.max_objects {
            return Err(Error::Generation(format!(
                "object count range {}..={} is empty",
                self.min_objects, self.max_objects
            )));
        }
        if self.max_objects > 6 {
            return Err(Error::Generation("at most 6 objects fit the layout".into()));
        }
        if self.palette.is_empty() || self.shapes.is_empty() {
            return Err(Error::Generation(
                "palette and shape set must be nonempty".into(),
            ));
        }
        if self.side < 24 {
            return Err(Error::Generation("side must be at least 24 px".into()));
        }
        Ok(())
    }
}

/// Descriptive metadata carried along with each sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    /// Target category used for per-category breakdowns (the shape word).
    pub category: String,
    pub size: SizeClass,
    pub tiny: bool,
    pub position: String,
    pub objects: Vec<SceneObject>,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Raster,
    pub mask: Mask,
    pub expression: String,
    pub meta: SampleMeta,
}

#[derive(Clone, Copy)]
enum Attr {
    Color,
    Size,
    Position,
}

/// Attribute subsets tried in order; the first that is unique wins.
const ATTR_SETS: [&[Attr]; 8] = [
    &[],
    &[Attr::Color],
    &[Attr::Size],
    &[Attr::Position],
    &[Attr::Size, Attr::Color],
    &[Attr::Color, Attr::Position],
    &[Attr::Size, Attr::Position],
    &[Attr::Size, Attr::Color, Attr::Position],
];

fn matches(o: &SceneObject, t: &SceneObject, attrs: &[Attr]) -> bool {
    o.shape == t.shape
        && attrs.iter().all(|a| match a {
            Attr::Color => o.color == t.color,
            Attr::Size => o.size == t.size,
            Attr::Position => o.position == t.position,
        })
}

/// Shortest description of `objects[target]` that no other object matches.
pub fn describe(objects: &[SceneObject], target: usize) -> Option<String> {
    let t = &objects[target];
    let attrs = ATTR_SETS.iter().find(|attrs| {
        objects
            .iter()
            .enumerate()
            .all(|(i, o)| i == target || !matches(o, t, attrs))
    })?;
    let has = |a: fn(&Attr) -> bool| attrs.iter().any(a);
    let mut words = vec!["the"];
    if has(|a| matches!(a, Attr::Size)) {
        words.push(t.size.word());
    }
    if has(|a| matches!(a, Attr::Color)) {
        words.push(t.color.word());
    }
    words.push(t.shape.word());
    if has(|a| matches!(a, Attr::Position)) {
        words.push(t.position.phrase());
    }
    Some(words.join(" "))
}

/// Indices of objects consistent with every attribute named in `expression`.
pub fn resolve_expression(expression: &str, objects: &[SceneObject]) -> Vec<usize> {
    let text = expression.to_lowercase();
    let words: Vec<&str> = text.split_whitespace().collect();
    let shape = Shape::ALL.into_iter().find(|s| words.contains(&s.word()));
    let color = Color::ALL.into_iter().find(|c| words.contains(&c.word()));
    let size = SizeClass::ALL
        .into_iter()
        .find(|s| words.contains(&s.word()));
    let position = Position::all().find(|p| text.contains(p.phrase()));
    objects
        .iter()
        .enumerate()
        .filter(|(_, o)| {
            shape.map_or(true, |s| o.shape == s)
                && color.map_or(true, |c| o.color == c)
                && size.map_or(true, |s| o.size == s)
                && position.map_or(true, |p| o.position == p)
        })
        .map(|(i, _)| i)
        .collect()
}

fn render_background(side: usize, rng: &mut impl Rng) -> Raster {
    // Smooth value noise on a coarse lattice, tinted earth-gray.
    let cells = 8;
    let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1))
        .map(|_| rng.gen::<f64>())
        .collect();
    let base = [
        rng.gen_range(0.30..0.42),
        rng.gen_range(0.30..0.40),
        rng.gen_range(0.24..0.34),
    ];
    let mut img = Raster::new(side, side, 3);
    for y in 0..side {
        let fy = (y as f64 + 0.5) / side as f64 * cells as f64;
        let (iy, ty) = ((fy.floor() as usize).min(cells - 1), fy - fy.floor());
        for x in 0..side {
            let fx = (x as f64 + 0.5) / side as f64 * cells as f64;
            let (ix, tx) = ((fx.floor() as usize).min(cells - 1), fx - fx.floor());
            let l = |a: usize, b: usize| lattice[a * (cells + 1) + b];
            let n = (l(iy, ix) * (1.0 - tx) + l(iy, ix + 1) * tx) * (1.0 - ty)
                + (l(iy + 1, ix) * (1.0 - tx) + l(iy + 1, ix + 1) * tx) * ty;
            for c in 0..3 {
                let i = img.idx(y, x, c);
                img.data[i] = (base[c] + 0.12 * (n - 0.5)) as f32;
            }
        }
    }
    img
}

fn place(
    spec: &SceneSpec,
    rng: &mut impl Rng,
    placed: &[SceneObject],
    shape: Shape,
    color: Color,
    size: SizeClass,
) -> Option<SceneObject> {
    let side = spec.side as f64;
    let cell = side / 3.0;
    let (rlo, rhi) = spec.radius_range(size);
    for _ in 0..60 {
        let radius = rng.gen_range(rlo..=rhi);
        let position = Position {
            row: rng.gen_range(0..3),
            col: rng.gen_range(0..3),
        };
        // Keep centres in the inner part of their cell so the position word is unambiguous.
        let jitter = |k: u8, rng: &mut dyn rand::RngCore| {
            let lo = k as f64 * cell + 0.3 * cell;
            let hi = k as f64 * cell + 0.7 * cell;
            rng.gen_range(lo..hi)
        };
        let cx = jitter(position.col, rng);
        let cy = jitter(position.row, rng);
        if cx - radius < 1.0
            || cy - radius < 1.0
            || cx + radius > side - 1.0
            || cy + radius > side - 1.0
        {
            continue;
        }
        let clear = placed.iter().all(|o| {
            let d = ((o.center.0 - cx).powi(2) + (o.center.1 - cy).powi(2)).sqrt();
            d > o.radius + radius + 0.02 * side
        });
        if clear {
            return Some(SceneObject {
                shape,
                color,
                size,
                position,
                center: (cx, cy),
                radius,
            });
        }
    }
    None
}

fn try_generate(spec: &SceneSpec, rng: &mut impl Rng) -> Option<(Vec<SceneObject>, usize)> {
    let n = rng.gen_range(spec.min_objects..=spec.max_objects);
    let pick_size = |rng: &mut dyn rand::RngCore| *SizeClass::ALL.choose(rng).unwrap();
    let target_size = if rng.gen_bool(spec.tiny_fraction.clamp(0.0, 1.0)) {
        SizeClass::Small
    } else if rng.gen_bool(0.5) {
        SizeClass::Medium
    } else {
        SizeClass::Large
    };
    let shape = *spec.shapes.choose(rng)?;
    let color = *spec.palette.choose(rng)?;
    let mut objects = vec![place(spec, rng, &[], shape, color, target_size)?];
    for _ in 1..n {
        let (s, c) = if rng.gen_bool(spec.confusable_fraction.clamp(0.0, 1.0)) {
            (shape, color)
        } else {
            (*spec.shapes.choose(rng)?, *spec.palette.choose(rng)?)
        };
        let size = pick_size(rng);
        objects.push(place(spec, rng, &objects, s, c, size)?);
    }
    // The target sits at a random index so it is not always drawn first.
    let target = rng.gen_range(0..objects.len());
    objects.swap(0, target);
    describe(&objects, target)?;
    Some((objects, target))
}

/// Generate one sample; identical `(seed, spec)` give identical samples.
pub fn generate_sample(seed: u64, spec: &SceneSpec) -> Result<Sample> {
    spec.check()?;
    let mut rng = rng::stream(seed, "scene");
    let (objects, target) = (0..200)
        .find_map(|_| try_generate(spec, &mut rng))
        .ok_or_else(|| {
            Error::Generation(format!(
                "could not place {}..={} objects with a unique description on a {} px canvas",
                spec.min_objects, spec.max_objects, spec.side
            ))
        })?;
    let expression = describe(&objects, target).expect("checked during generation");

    let side = spec.side;
    let mut image = render_background(side, &mut rng);
    let mut mask = Mask::new(side, side, 1);
    for (k, obj) in objects.iter().enumerate() {
        let rgb = obj.color.rgb();
        let (x0, x1) = (
            (obj.center.0 - obj.radius).floor().max(0.0) as usize,
            ((obj.center.0 + obj.radius).ceil() as usize).min(side - 1),
        );
        let (y0, y1) = (
            (obj.center.1 - obj.radius).floor().max(0.0) as usize,
            ((obj.center.1 + obj.radius).ceil() as usize).min(side - 1),
        );
        for y in y0..=y1 {
            for x in x0..=x1 {
                if obj.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    for (c, v) in rgb.iter().enumerate() {
                        let i = image.idx(y, x, c);
                        image.data[i] = *v;
                    }
                    if k == target {
                        let i = mask.idx(y, x, 0);
                        mask.data[i] = 1;
                    }
                }
            }
        }
    }
    if mask.count() == 0 {
        return Err(Error::Generation("target rasterized to zero pixels".into()));
    }
    let t = &objects[target];
    let meta = SampleMeta {
        category: t.shape.word().to_string(),
        size: t.size,
        tiny: t.size == SizeClass::Small,
        position: t.position.tag(),
        objects: objects.clone(),
        target,
    };
    Ok(Sample {
        image,
        mask,
        expression,
        meta,
    })
}

/// `count` samples with per-sample seeds derived from `seed`.
pub fn generate_set(seed: u64, count: usize, spec: &SceneSpec) -> Result<Vec<Sample>> {
    let mut rng = rng::stream(seed, "scene-set");
    (0..count)
        .map(|_| generate_sample(rng.gen(), spec))
        .collect()
}

/// Rasterize a single object into a fresh mask; independent of `generate_sample`.
pub fn rasterize_object(obj: &SceneObject, side: usize) -> Mask {
    let mut m = Mask::new(side, side, 1);
    for y in 0..side {
        for x in 0..side {
            if obj.contains(x as f64 + 0.5, y as f64 + 0.5) {
                m.data[y * side + x] = 1;
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SceneSpec {
        SceneSpec {
            side: 128,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn same_seed_same_sample() {
        let a = generate_sample(7, &small_spec()).unwrap();
        let b = generate_sample(7, &small_spec()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate_sample(0, &small_spec()).unwrap();
        let b = generate_sample(1, &small_spec()).unwrap();
        assert_ne!(a.image.data, b.image.data);
    }

    #[test]
    fn mask_is_exactly_the_target_rasterization() {
        for seed in 0..20 {
            let s = generate_sample(seed, &small_spec()).unwrap();
            let expected = rasterize_object(&s.meta.objects[s.meta.target], 128);
            assert_eq!(s.mask, expected, "seed {seed}");
            assert!(s.mask.data.iter().all(|&v| v <= 1));
            assert!(s.mask.count() > 0);
        }
    }

    #[test]
    fn expression_resolves_to_target_only() {
        for seed in 0..60 {
            let s = generate_sample(seed, &small_spec()).unwrap();
            assert_eq!(
                resolve_expression(&s.expression, &s.meta.objects),
                vec![s.meta.target],
                "seed {seed}: {}",
                s.expression
            );
        }
    }

    #[test]
    fn single_object_scene_names_only_the_shape() {
        let spec = SceneSpec {
            min_objects: 1,
            max_objects: 1,
            ..small_spec()
        };
        let s = generate_sample(3, &spec).unwrap();
        assert_eq!(s.expression, format!("the {}", s.meta.category));
        assert_eq!(s.meta.objects.len(), 1);
    }

    #[test]
    fn describe_uses_the_minimal_attribute_set() {
        let obj = |color, size, row, col| SceneObject {
            shape: Shape::Circle,
            color,
            size,
            position: Position { row, col },
            center: (0.0, 0.0),
            radius: 1.0,
        };
        let objects = vec![
            obj(Color::Red, SizeClass::Small, 1, 0),
            obj(Color::Red, SizeClass::Large, 1, 0),
            obj(Color::Red, SizeClass::Small, 1, 2),
        ];
        assert_eq!(
            describe(&objects, 0).unwrap(),
            "the small circle on the left"
        );
        let twins = vec![objects[0].clone(), objects[0].clone()];
        assert!(describe(&twins, 0).is_none());
    }

    #[test]
    fn infeasible_spec_is_reported() {
        let spec = SceneSpec {
            side: 24,
            min_objects: 6,
            max_objects: 6,
            radius_small: (0.3, 0.3),
            radius_medium: (0.3, 0.3),
            radius_large: (0.3, 0.3),
            ..SceneSpec::default()
        };
        let err = generate_sample(0, &spec).unwrap_err();
        assert!(matches!(err, Error::Generation(_)));
        assert!(err.to_string().contains("unique description"));
    }

    #[test]
    fn tiny_fraction_controls_target_size() {
        let spec = SceneSpec {
            tiny_fraction: 1.0,
            ..small_spec()
        };
        let set = generate_set(5, 10, &spec).unwrap();
        assert!(set.iter().all(|s| s.meta.tiny));
    }
}
