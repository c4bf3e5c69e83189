//! Procedural clips of solid squares sliding across a black canvas.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media::{VideoClip, SPATIAL_RATE};
use crate::rng::Rng;
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

    pub fn channel(self) -> usize {
        self as usize
    }

    pub fn rgb(self) -> [f64; 3] {
        let mut c = [0.0; 3];
        c[self.channel()] = 1.0;
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Up, Direction::Down];

    pub fn horizontal(self) -> bool {
        matches!(self, Direction::Left | Direction::Right)
    }

    /// +1 when the coordinate grows over time (right, down).
    pub fn sign(self) -> i64 {
        match self {
            Direction::Right | Direction::Down => 1,
            Direction::Left | Direction::Up => -1,
        }
    }
}

macro_rules! word_enum {
    ($ty:ty { $($variant:path => $word:literal),* }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $word),* })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($word => Ok($variant),)*
                    other => Err(Error::Param(format!("unknown {} `{other}`", stringify!($ty).to_lowercase()))),
                }
            }
        }
    };
}

word_enum!(Color { Color::Red => "red", Color::Green => "green", Color::Blue => "blue" });
word_enum!(Direction {
    Direction::Left => "left",
    Direction::Right => "right",
    Direction::Up => "up",
    Direction::Down => "down"
});

/// One scene: `count` squares of one color moving together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub count: usize,
    pub color: Color,
    pub direction: Direction,
    /// Side length in pixels.
    pub size: usize,
    /// Position along the motion axis in the first frame.
    pub start: usize,
    /// Pixels moved per frame.
    pub step: usize,
}

impl SceneSpec {
    pub fn new(count: usize, color: Color, direction: Direction) -> Self {
        Self { count, color, direction, size: 16, start: 0, step: 2 }
    }

    pub fn prompt(&self) -> String {
        format!("{} {} squares moving {}", self.count, self.color, self.direction)
    }

    /// Top-left corners along the axis perpendicular to motion. Lanes are
    /// separated by one latent cell so objects stay distinct after pooling.
    pub fn lanes(&self, extent: usize) -> Result<Vec<usize>> {
        if !(1..=3).contains(&self.count) {
            return Err(Error::Param(format!("object count {} outside 1..=3", self.count)));
        }
        let gap = SPATIAL_RATE;
        let total = self.count * self.size + (self.count - 1) * gap;
        if total > extent {
            return Err(Error::Param(format!("{} objects of size {} do not fit in {extent}", self.count, self.size)));
        }
        let offset = (extent - total) / 2 / SPATIAL_RATE * SPATIAL_RATE;
        Ok((0..self.count).map(|i| offset + i * (self.size + gap)).collect())
    }

    /// Position along the motion axis at frame `f`.
    pub fn position(&self, f: usize) -> i64 {
        self.start as i64 + self.direction.sign() * (self.step * f) as i64
    }

    /// Checks that every object stays inside the frame for `frames` frames.
    pub fn check_bounds(&self, frames: usize, height: usize, width: usize) -> Result<()> {
        let (along, across) = if self.direction.horizontal() { (width, height) } else { (height, width) };
        self.lanes(across)?;
        let last = self.position(frames.saturating_sub(1));
        let lo = self.position(0).min(last);
        let hi = self.position(0).max(last) + self.size as i64;
        if lo < 0 || hi > along as i64 || self.size == 0 {
            return Err(Error::Param(format!("scene leaves the {along}px frame along its motion axis")));
        }
        Ok(())
    }

    /// Valid starting positions on the latent grid for a canvas.
    pub fn start_candidates(&self, canvas: &Canvas) -> Vec<usize> {
        let along = if self.direction.horizontal() { canvas.width } else { canvas.height };
        (0..along)
            .step_by(SPATIAL_RATE)
            .filter(|&s| SceneSpec { start: s, ..*self }.check_bounds(canvas.frames, canvas.height, canvas.width).is_ok())
            .collect()
    }
}

impl fmt::Display for SceneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.prompt())
    }
}

/// Accepts either the prompt form "2 red squares moving left" or the short
/// form "2 red left".
impl FromStr for SceneSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let words: Vec<&str> = s.split(|c: char| c.is_whitespace() || c == ',').filter(|w| !w.is_empty()).collect();
        let (count, color, direction) = match words.as_slice() {
            [n, c, "squares", "moving", d] | [n, c, d] => (*n, *c, *d),
            _ => return Err(Error::Param(format!("cannot read scene from `{s}`"))),
        };
        let count = count.parse().map_err(|_| Error::Param(format!("bad object count `{count}`")))?;
        Ok(SceneSpec::new(count, color.parse()?, direction.parse()?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Canvas {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for Canvas {
    fn default() -> Self {
        Self { frames: 9, height: 64, width: 64 }
    }
}

pub fn render(spec: &SceneSpec, canvas: &Canvas) -> Result<VideoClip> {
    let Canvas { frames, height, width } = *canvas;
    spec.check_bounds(frames, height, width)?;
    let lanes = spec.lanes(if spec.direction.horizontal() { height } else { width })?;
    let rgb = spec.color.rgb();
    let mut px = vec![0.0; frames * height * width * 3];
    for f in 0..frames {
        let along = spec.position(f) as usize;
        for &lane in &lanes {
            let (y0, x0) = if spec.direction.horizontal() { (lane, along) } else { (along, lane) };
            for y in y0..y0 + spec.size {
                for x in x0..x0 + spec.size {
                    px[((f * height + y) * width + x) * 3..][..3].copy_from_slice(&rgb);
                }
            }
        }
    }
    VideoClip::new(Tensor::new(px, &[frames, height, width, 3], DType::F64)?)
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub clip: VideoClip,
    pub prompt: String,
    pub spec: SceneSpec,
}

/// Every (count, color, direction) combination.
pub fn all_scenes() -> Vec<(usize, Color, Direction)> {
    let mut out = Vec::new();
    for count in 1..=3 {
        for color in Color::ALL {
            for direction in Direction::ALL {
                out.push((count, color, direction));
            }
        }
    }
    out
}

/// Draws `count` scenes, distinct in (count, color, direction) while the
/// combinations last, with seeded grid-aligned start positions.
pub fn synth_dataset(seed: u64, count: usize, canvas: Canvas, size: usize, step: usize) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(Error::Param("dataset needs at least one clip".into()));
    }
    let mut rng = Rng::stream(seed, "scenes");
    let combos = all_scenes();
    let mut order: Vec<usize> = Vec::new();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        if order.is_empty() {
            order = (0..combos.len()).collect();
            rng.shuffle(&mut order);
            order.reverse();
        }
        let (n, color, direction) = combos[order.pop().expect("refilled above")];
        let base = SceneSpec { size, step, ..SceneSpec::new(n, color, direction) };
        let starts = base.start_candidates(&canvas);
        if starts.is_empty() {
            return Err(Error::Param(format!("no room for `{base}` on a {}x{} canvas", canvas.height, canvas.width)));
        }
        let spec = SceneSpec { start: starts[rng.below(starts.len())], ..base };
        out.push(Sample { clip: render(&spec, &canvas)?, prompt: spec.prompt(), spec });
    }
    Ok(out)
}
