use std::fmt;

use serde::{Deserialize, Serialize};

use crate::encoders::VideoClip;
use crate::error::{CloverError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
    Bar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
    White,
    Black,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    Left,
    Right,
    Up,
    Down,
    Still,
    Spin,
}

/// Object size. `Medium` is left out of captions.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    #[default]
    Medium,
    Large,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Square, Shape::Circle, Shape::Triangle, Shape::Bar];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
            Shape::Bar => "bar",
        }
    }
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Purple,
        Color::Orange,
        Color::White,
        Color::Black,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
            Color::White => "white",
            Color::Black => "black",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Green => [0.1, 0.8, 0.2],
            Color::Blue => [0.15, 0.25, 0.9],
            Color::Yellow => [0.95, 0.9, 0.1],
            Color::Purple => [0.55, 0.15, 0.7],
            Color::Orange => [1.0, 0.55, 0.05],
            Color::White => [1.0, 1.0, 1.0],
            Color::Black => [0.0, 0.0, 0.0],
        }
    }

    pub fn index(self) -> usize {
        Color::ALL
            .iter()
            .position(|&c| c == self)
            .expect("palette member")
    }
}

impl Motion {
    pub const ALL: [Motion; 6] = [
        Motion::Left,
        Motion::Right,
        Motion::Up,
        Motion::Down,
        Motion::Still,
        Motion::Spin,
    ];

    /// Caption phrase for the motion.
    pub fn phrase(self) -> &'static [&'static str] {
        match self {
            Motion::Left => &["sliding", "left"],
            Motion::Right => &["sliding", "right"],
            Motion::Up => &["rising"],
            Motion::Down => &["falling"],
            Motion::Still => &["resting"],
            Motion::Spin => &["spinning"],
        }
    }

    pub fn index(self) -> usize {
        Motion::ALL
            .iter()
            .position(|&m| m == self)
            .expect("motion member")
    }
}

impl Size {
    pub const ALL: [Size; 3] = [Size::Small, Size::Medium, Size::Large];

    pub fn word(self) -> Option<&'static str> {
        match self {
            Size::Small => Some("small"),
            Size::Medium => None,
            Size::Large => Some("large"),
        }
    }

    fn radius_fraction(self) -> f64 {
        match self {
            Size::Small => 0.14,
            Size::Medium => 0.2,
            Size::Large => 0.27,
        }
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

/// One procedurally rendered scene: a single shape over a flat background.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub shape: Shape,
    pub color: Color,
    pub motion: Motion,
    pub background: Color,
    #[serde(default)]
    pub size: Size,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.color == self.background {
            return Err(CloverError::invalid(
                "background",
                "must differ from the object color",
            ));
        }
        if self.frames == 0 {
            return Err(CloverError::invalid("frames", "must be positive"));
        }
        if self.height < 8 || self.width < 8 {
            return Err(CloverError::invalid(
                "height",
                "frames must be at least 8×8 pixels",
            ));
        }
        Ok(())
    }

    /// Object center `(x, y)` in pixels at frame `f`.
    pub fn center(&self, f: usize) -> (f64, f64) {
        let (w, h) = (self.width as f64, self.height as f64);
        let t = if self.frames > 1 {
            f as f64 / (self.frames - 1) as f64
        } else {
            0.0
        };
        let travel = 0.36;
        let (sx, sy) = match self.motion {
            Motion::Left => (0.5 + travel / 2.0 - travel * t, 0.5),
            Motion::Right => (0.5 - travel / 2.0 + travel * t, 0.5),
            Motion::Up => (0.5, 0.5 + travel / 2.0 - travel * t),
            Motion::Down => (0.5, 0.5 - travel / 2.0 + travel * t),
            Motion::Still | Motion::Spin => (0.5, 0.5),
        };
        (sx * w, sy * h)
    }

    /// Rotation angle at frame `f`.
    pub fn angle(&self, f: usize) -> f64 {
        match self.motion {
            Motion::Spin => f as f64 * std::f64::consts::FRAC_PI_3,
            _ => 0.0,
        }
    }

    fn radius(&self) -> f64 {
        self.size.radius_fraction() * self.height.min(self.width) as f64
    }
}

/// Whether the point `(u, v)` in object coordinates (radius `r`) lies inside the shape.
fn inside(shape: Shape, u: f64, v: f64, r: f64) -> bool {
    match shape {
        Shape::Square => u.abs() <= r && v.abs() <= r,
        Shape::Circle => u * u + v * v <= r * r,
        // Apex up; the base spans the full width at v = r.
        Shape::Triangle => v >= -r && v <= r && u.abs() <= (v + r) / 2.0,
        Shape::Bar => u.abs() <= r * 1.2 && v.abs() <= r * 0.45,
    }
}

/// Rasterizes a scene into a `[frames, height, width, 3]` clip with values in `[0, 1]`.
///
/// Each object carries a small notch so rotation is visible for every shape.
pub fn render(scene: &SceneSpec) -> Result<VideoClip> {
    scene.validate()?;
    let (h, w) = (scene.height, scene.width);
    let mut clip = VideoClip::zeros(scene.frames, h, w, 3);
    let (fg, bg) = (scene.color.rgb(), scene.background.rgb());
    let r = scene.radius();
    for f in 0..scene.frames {
        let (cx, cy) = scene.center(f);
        let (sin, cos) = scene.angle(f).sin_cos();
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                // Rotate into object coordinates.
                let (u, v) = (cos * dx + sin * dy, -sin * dx + cos * dy);
                let notch = (u - r * 0.45).abs() <= r * 0.22 && v.abs() <= r * 0.22;
                let color = if inside(scene.shape, u, v, r) && !notch {
                    fg
                } else {
                    bg
                };
                let base = clip.index(f, y, x, 0);
                clip.pixels[base..base + 3].copy_from_slice(&color);
            }
        }
    }
    Ok(clip)
}

/// Caption words for a video scene.
pub fn caption(scene: &SceneSpec) -> Vec<String> {
    let mut words = vec!["a"];
    words.extend(scene.size.word());
    words.extend([scene.color.word(), scene.shape.word()]);
    words.extend(scene.motion.phrase());
    words.extend(["over", "a", scene.background.word(), "background"]);
    words.into_iter().map(String::from).collect()
}

/// Caption words for a still image of the scene.
pub fn image_caption(scene: &SceneSpec) -> Vec<String> {
    let mut words = vec!["a", "picture", "of", "a"];
    words.extend(scene.size.word());
    words.extend([
        scene.color.word(),
        scene.shape.word(),
        "over",
        "a",
        scene.background.word(),
        "background",
    ]);
    words.into_iter().map(String::from).collect()
}
