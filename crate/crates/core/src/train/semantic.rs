//! Toy semantic checker for generated clips: object count, color and
//! direction of motion.

use serde::{Deserialize, Serialize};

use super::dataset::{Color, Direction, SceneSpec};
use crate::media::VideoClip;

const FOREGROUND: f64 = 0.5;
const MIN_AREA: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SemanticScores {
    pub count_ok: u8,
    pub color_ok: u8,
    pub direction_ok: u8,
}

impl SemanticScores {
    pub fn all_ok(&self) -> bool {
        self.count_ok == 1 && self.color_ok == 1 && self.direction_ok == 1
    }
}

#[derive(Debug, Clone)]
struct Component {
    area: usize,
    sum_y: f64,
    sum_x: f64,
    rgb: [f64; 3],
}

/// 4-connected components of the foreground mask in one frame, dropping
/// specks smaller than the minimum area.
fn components(clip: &VideoClip, f: usize) -> Vec<Component> {
    let (_, h, w) = clip.dims();
    let fg: Vec<bool> = (0..h * w)
        .map(|i| clip.pixel(f, i / w, i % w).iter().cloned().fold(f64::MIN, f64::max) > FOREGROUND)
        .collect();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if seen[start] || !fg[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut comp = Component { area: 0, sum_y: 0.0, sum_x: 0.0, rgb: [0.0; 3] };
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            comp.area += 1;
            comp.sum_y += y as f64;
            comp.sum_x += x as f64;
            for (k, v) in clip.pixel(f, y, x).iter().enumerate() {
                comp.rgb[k] += v;
            }
            let neighbours = [
                (y > 0).then(|| i - w),
                (y + 1 < h).then(|| i + w),
                (x > 0).then(|| i - 1),
                (x + 1 < w).then(|| i + 1),
            ];
            for j in neighbours.into_iter().flatten() {
                if fg[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        if comp.area >= MIN_AREA {
            out.push(comp);
        }
    }
    out
}

fn nearest_color(rgb: [f64; 3]) -> Color {
    let mut best = Color::Red;
    let mut best_d = f64::INFINITY;
    for c in Color::ALL {
        let d: f64 = rgb.iter().zip(c.rgb()).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

/// Scores a clip against a scene description. Each score is 0 or 1; a clip
/// with nothing detected scores zero everywhere.
pub fn semantic_eval(clip: &VideoClip, spec: &SceneSpec) -> SemanticScores {
    let (frames, _, _) = clip.dims();
    let per_frame: Vec<Vec<Component>> = (0..frames).map(|f| components(clip, f)).collect();
    let detected: Vec<usize> = (0..frames).filter(|&f| !per_frame[f].is_empty()).collect();
    let (Some(&first), Some(&last)) = (detected.first(), detected.last()) else {
        return SemanticScores::default();
    };

    let mut counts: Vec<usize> = per_frame.iter().map(Vec::len).collect();
    counts.sort_unstable();
    let median = counts[counts.len() / 2];

    let color_ok = per_frame.iter().flatten().all(|c| {
        let mean = c.rgb.map(|v| v / c.area as f64);
        nearest_color(mean) == spec.color
    });

    let centroid = |f: usize| {
        let comps = &per_frame[f];
        let area: usize = comps.iter().map(|c| c.area).sum();
        let y: f64 = comps.iter().map(|c| c.sum_y).sum();
        let x: f64 = comps.iter().map(|c| c.sum_x).sum();
        (x / area as f64, y / area as f64)
    };
    let (x0, y0) = centroid(first);
    let (x1, y1) = centroid(last);
    let (dx, dy) = (x1 - x0, y1 - y0);
    let observed = if dx == 0.0 && dy == 0.0 {
        None
    } else if dx.abs() > dy.abs() {
        Some(if dx > 0.0 { Direction::Right } else { Direction::Left })
    } else {
        Some(if dy > 0.0 { Direction::Down } else { Direction::Up })
    };

    SemanticScores {
        count_ok: u8::from(median == spec.count),
        color_ok: u8::from(color_ok),
        direction_ok: u8::from(observed == Some(spec.direction)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::Codec;
    use crate::tensor::{DType, Tensor};
    use crate::train::dataset::{all_scenes, render, Canvas};

    fn every_spec() -> Vec<SceneSpec> {
        let canvas = Canvas::default();
        all_scenes()
            .into_iter()
            .flat_map(|(n, c, d)| {
                let base = SceneSpec::new(n, c, d);
                base.start_candidates(&canvas).into_iter().map(move |start| SceneSpec { start, ..base })
            })
            .collect()
    }

    #[test]
    fn rendered_clips_score_perfectly() {
        for spec in every_spec() {
            let clip = render(&spec, &Canvas::default()).unwrap();
            assert!(semantic_eval(&clip, &spec).all_ok(), "{spec} start {}", spec.start);
        }
    }

    #[test]
    fn codec_roundtrip_keeps_semantics() {
        let codec = Codec::new(8, DType::F64).unwrap();
        for spec in every_spec() {
            let clip = render(&spec, &Canvas::default()).unwrap();
            let back = codec.decompress(&codec.compress(&clip).unwrap()).unwrap();
            assert!(semantic_eval(&back, &spec).all_ok(), "{spec} start {}", spec.start);
        }
    }

    #[test]
    fn swapped_color_fails_only_color() {
        let spec = SceneSpec { start: 8, ..SceneSpec::new(2, Color::Red, Direction::Down) };
        let clip = render(&SceneSpec { color: Color::Blue, ..spec }, &Canvas::default()).unwrap();
        assert_eq!(semantic_eval(&clip, &spec), SemanticScores { count_ok: 1, color_ok: 0, direction_ok: 1 });
    }

    #[test]
    fn wrong_count_and_direction_are_caught() {
        let spec = SceneSpec { start: 8, ..SceneSpec::new(2, Color::Green, Direction::Right) };
        let clip = render(&SceneSpec { count: 3, ..spec }, &Canvas::default()).unwrap();
        assert_eq!(semantic_eval(&clip, &spec).count_ok, 0);
        let clip = render(&SceneSpec { direction: Direction::Left, start: 40, ..spec }, &Canvas::default()).unwrap();
        assert_eq!(semantic_eval(&clip, &spec), SemanticScores { count_ok: 1, color_ok: 1, direction_ok: 0 });
        let clip = render(&SceneSpec { direction: Direction::Down, ..spec }, &Canvas::default()).unwrap();
        assert_eq!(semantic_eval(&clip, &spec).direction_ok, 0);
    }

    #[test]
    fn black_clip_scores_zero() {
        let clip = VideoClip::new(Tensor::zeros(&[9, 64, 64, 3], DType::F64)).unwrap();
        let spec = SceneSpec::new(1, Color::Red, Direction::Left);
        assert_eq!(semantic_eval(&clip, &spec), SemanticScores::default());
    }

    #[test]
    fn static_object_has_no_direction() {
        let spec = SceneSpec { step: 0, start: 16, ..SceneSpec::new(1, Color::Red, Direction::Right) };
        let clip = render(&spec, &Canvas::default()).unwrap();
        assert_eq!(semantic_eval(&clip, &spec), SemanticScores { count_ok: 1, color_ok: 1, direction_ok: 0 });
    }
}
