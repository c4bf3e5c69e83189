//! Rule-based clip curation over JSON-lines records. All scores arrive
//! precomputed. Nothing here looks at media bytes.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One candidate clip. Every field is optional in the input. A missing
/// field fails the first rule that needs it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motion_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub black_area: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub brightness: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub black_frame_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aesthetic: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ocr_coverage: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub watermark: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip_score: Option<f64>,
}

impl ClipRecord {
    /// Parses one JSON line. `line` is 1-based and only used for errors.
    pub fn parse(text: &str, line: usize) -> Result<Self> {
        let record: ClipRecord =
            serde_json::from_str(text).map_err(|e| Error::Record { line, msg: e.to_string() })?;
        record.check(line)?;
        Ok(record)
    }

    fn check(&self, line: usize) -> Result<()> {
        let fractions = [
            ("black_area", self.black_area),
            ("brightness", self.brightness),
            ("black_frame_rate", self.black_frame_rate),
            ("ocr_coverage", self.ocr_coverage),
        ];
        for (name, value) in fractions {
            if let Some(v) = value {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Record { line, msg: format!("`{name}` = {v} is not a fraction in [0, 1]") });
                }
            }
        }
        for (name, value) in [("fps", self.fps), ("duration_s", self.duration_s), ("motion_score", self.motion_score)] {
            if let Some(v) = value {
                if v < 0.0 {
                    return Err(Error::Record { line, msg: format!("`{name}` = {v} is negative") });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Basic,
    Quality,
    Aesthetic,
    Watermark,
    Caption,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Basic => "basic",
            Stage::Quality => "quality",
            Stage::Aesthetic => "aesthetic",
            Stage::Watermark => "watermark",
            Stage::Caption => "caption",
        };
        f.write_str(name)
    }
}

pub const PASS: &str = "pass";
pub const MIN_FRAMES: u64 = 65;
pub const MIN_DURATION_S: f64 = 1.0;
pub const ASPECT_RANGE: (f64, f64) = (1.0, 2.0);
pub const MAX_BLACK_AREA: f64 = 0.8;
pub const MIN_BRIGHTNESS: f64 = 0.2;
pub const MAX_BLACK_FRAME_RATE: f64 = 0.4;
pub const MIN_AESTHETIC: f64 = 4.0;
pub const MAX_OCR_COVERAGE: f64 = 0.1;
/// Largest tolerated repetition rate for 2-, 5- and 10-grams.
pub const MAX_REPETITION: [(usize, f64, &str); 3] =
    [(2, 0.056, "rep_2gram"), (5, 0.047, "rep_5gram"), (10, 0.045, "rep_10gram")];
pub const MIN_CLIP_SCORE: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub kept: bool,
    pub stage: Stage,
    pub reason: String,
}

impl FilterOutcome {
    fn pass(stage: Stage) -> Self {
        Self { kept: true, stage, reason: PASS.into() }
    }

    fn drop(stage: Stage, reason: &str) -> Self {
        Self { kept: false, stage, reason: reason.into() }
    }
}

type Rule = fn(&ClipRecord) -> Option<bool>;

/// Metadata rules in stage order. Each returns `Some(true)` when the clip
/// must be dropped and `None` when the field it needs is absent.
const METADATA_RULES: [(Stage, &str, Rule); 10] = [
    (Stage::Basic, "min_frames", |r| r.frames.map(|f| f < MIN_FRAMES)),
    (Stage::Basic, "min_duration", |r| r.duration_s.map(|d| d < MIN_DURATION_S)),
    (Stage::Basic, "aspect_ratio", |r| {
        let (w, h) = (r.width?, r.height?);
        let aspect = w as f64 / h as f64;
        Some(!(aspect >= ASPECT_RANGE.0 && aspect <= ASPECT_RANGE.1))
    }),
    (Stage::Basic, "zero_motion", |r| r.motion_score.map(|m| m == 0.0)),
    (Stage::Quality, "black_area", |r| r.black_area.map(|v| v > MAX_BLACK_AREA)),
    (Stage::Quality, "brightness", |r| r.brightness.map(|v| v < MIN_BRIGHTNESS)),
    (Stage::Quality, "black_frame_rate", |r| r.black_frame_rate.map(|v| v > MAX_BLACK_FRAME_RATE)),
    (Stage::Aesthetic, "aesthetic", |r| r.aesthetic.map(|v| v < MIN_AESTHETIC)),
    (Stage::Aesthetic, "ocr_coverage", |r| r.ocr_coverage.map(|v| v > MAX_OCR_COVERAGE)),
    (Stage::Watermark, "watermark", |r| r.watermark),
];

/// Basic, quality, aesthetic and watermark rules. The first failure wins.
pub fn metadata_rules_eval(record: &ClipRecord) -> FilterOutcome {
    for (stage, reason, rule) in METADATA_RULES {
        match rule(record) {
            None => return FilterOutcome::drop(stage, "missing_field"),
            Some(true) => return FilterOutcome::drop(stage, reason),
            Some(false) => {}
        }
    }
    FilterOutcome::pass(Stage::Watermark)
}

/// `1 − distinct/total` over whitespace-separated n-grams. Captions shorter
/// than `n` tokens have rate 0.
pub fn ngram_repetition(caption: &str, n: usize) -> f64 {
    assert!(n >= 1, "n-gram size must be at least 1");
    let tokens: Vec<&str> = caption.split_whitespace().collect();
    if tokens.len() < n {
        return 0.0;
    }
    let grams: Vec<&[&str]> = tokens.windows(n).collect();
    let distinct: HashSet<&[&str]> = grams.iter().copied().collect();
    // (total − distinct) / total rounds once, so a rate of exactly 7/125 equals 0.056
    (grams.len() - distinct.len()) as f64 / grams.len() as f64
}

/// Repetition and caption-consistency rules.
pub fn caption_rules_eval(record: &ClipRecord) -> FilterOutcome {
    let Some(caption) = record.caption.as_deref() else {
        return FilterOutcome::drop(Stage::Caption, "missing_caption");
    };
    for (n, limit, reason) in MAX_REPETITION {
        if ngram_repetition(caption, n) > limit {
            return FilterOutcome::drop(Stage::Caption, reason);
        }
    }
    match record.clip_score {
        None => FilterOutcome::drop(Stage::Caption, "missing_field"),
        Some(s) if s < MIN_CLIP_SCORE => FilterOutcome::drop(Stage::Caption, "clip_score"),
        Some(_) => FilterOutcome::pass(Stage::Caption),
    }
}

/// Metadata rules followed by caption rules.
pub fn evaluate(record: &ClipRecord) -> FilterOutcome {
    let meta = metadata_rules_eval(record);
    if meta.kept {
        caption_rules_eval(record)
    } else {
        meta
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub input_count: usize,
    pub kept_count: usize,
    pub drops_by_reason: BTreeMap<String, usize>,
}

impl PipelineReport {
    pub fn dropped(&self) -> usize {
        self.drops_by_reason.values().sum()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let body = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }
}

/// Filters a JSON-lines file. Kept lines are copied byte for byte in input
/// order. Blank lines are skipped. Lines that fail to parse count as
/// `parse_error` drops.
pub fn run_pipeline(records: impl AsRef<Path>, out: impl AsRef<Path>) -> Result<PipelineReport> {
    let (records, out) = (records.as_ref(), out.as_ref());
    let input = std::fs::File::open(records).map_err(|e| Error::io(records, e))?;
    let output = std::fs::File::create(out).map_err(|e| Error::io(out, e))?;
    let mut writer = BufWriter::new(output);
    let mut report = PipelineReport::default();
    let mut reader = BufReader::new(input);
    let mut raw = Vec::new();
    let mut line_no = 0;
    loop {
        raw.clear();
        if reader.read_until(b'\n', &mut raw).map_err(|e| Error::io(records, e))? == 0 {
            break;
        }
        line_no += 1;
        let body = raw.strip_suffix(b"\n").unwrap_or(&raw);
        let body = body.strip_suffix(b"\r").unwrap_or(body);
        if body.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        report.input_count += 1;
        let outcome = std::str::from_utf8(body)
            .map_err(|e| Error::Record { line: line_no, msg: e.to_string() })
            .and_then(|text| ClipRecord::parse(text, line_no));
        let reason = match outcome {
            Err(_) => "parse_error".to_string(),
            Ok(record) => {
                let verdict = evaluate(&record);
                if verdict.kept {
                    writer.write_all(body).and_then(|_| writer.write_all(b"\n")).map_err(|e| Error::io(out, e))?;
                    report.kept_count += 1;
                    continue;
                }
                verdict.reason
            }
        };
        *report.drops_by_reason.entry(reason).or_default() += 1;
    }
    writer.flush().map_err(|e| Error::io(out, e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn clean() -> ClipRecord {
        ClipRecord {
            path: Some("clip.mp4".into()),
            frames: Some(120),
            width: Some(1280),
            height: Some(720),
            fps: Some(24.0),
            duration_s: Some(5.0),
            motion_score: Some(1.5),
            black_area: Some(0.1),
            brightness: Some(0.5),
            black_frame_rate: Some(0.0),
            aesthetic: Some(5.2),
            ocr_coverage: Some(0.0),
            watermark: Some(false),
            caption: Some("a small boat drifts across a calm lake at dusk".into()),
            clip_score: Some(0.31),
        }
    }

    /// Repetition rate by listing every n-gram as an owned string.
    fn brute_rate(caption: &str, n: usize) -> f64 {
        let t: Vec<&str> = caption.split_whitespace().collect();
        if t.len() < n {
            return 0.0;
        }
        let mut seen: Vec<String> = Vec::new();
        let mut total = 0;
        for i in 0..=t.len() - n {
            let g = t[i..i + n].join("\u{1}");
            total += 1;
            if !seen.contains(&g) {
                seen.push(g);
            }
        }
        (total - seen.len()) as f64 / total as f64
    }

    #[test]
    fn ngram_examples() {
        assert!((ngram_repetition("a a a a", 2) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(ngram_repetition("a a a a", 2), brute_rate("a a a a", 2));
        assert_eq!(ngram_repetition("the cat sat", 2), 0.0);
        assert_eq!(ngram_repetition("the cat sat", 4), 0.0);
        assert_eq!(ngram_repetition("", 1), 0.0);
    }

    #[test]
    fn metadata_examples() {
        let r = ClipRecord { frames: Some(64), ..clean() };
        assert_eq!(metadata_rules_eval(&r), FilterOutcome::drop(Stage::Basic, "min_frames"));
        let r = ClipRecord { width: Some(1000), height: Some(400), ..clean() };
        assert_eq!(metadata_rules_eval(&r).reason, "aspect_ratio");
        assert_eq!(metadata_rules_eval(&clean()), FilterOutcome::pass(Stage::Watermark));
        assert_eq!(evaluate(&clean()), FilterOutcome::pass(Stage::Caption));
    }

    #[test]
    fn every_rule_fires_with_its_stage() {
        let cases: [(ClipRecord, Stage, &str); 10] = [
            (ClipRecord { frames: Some(10), ..clean() }, Stage::Basic, "min_frames"),
            (ClipRecord { duration_s: Some(0.5), ..clean() }, Stage::Basic, "min_duration"),
            (ClipRecord { width: Some(500), height: Some(600), ..clean() }, Stage::Basic, "aspect_ratio"),
            (ClipRecord { motion_score: Some(0.0), ..clean() }, Stage::Basic, "zero_motion"),
            (ClipRecord { black_area: Some(0.81), ..clean() }, Stage::Quality, "black_area"),
            (ClipRecord { brightness: Some(0.19), ..clean() }, Stage::Quality, "brightness"),
            (ClipRecord { black_frame_rate: Some(0.41), ..clean() }, Stage::Quality, "black_frame_rate"),
            (ClipRecord { aesthetic: Some(3.9), ..clean() }, Stage::Aesthetic, "aesthetic"),
            (ClipRecord { ocr_coverage: Some(0.2), ..clean() }, Stage::Aesthetic, "ocr_coverage"),
            (ClipRecord { watermark: Some(true), ..clean() }, Stage::Watermark, "watermark"),
        ];
        for (r, stage, reason) in cases {
            assert_eq!(metadata_rules_eval(&r), FilterOutcome::drop(stage, reason));
        }
    }

    #[test]
    fn boundary_values_are_kept() {
        let r = ClipRecord {
            frames: Some(65),
            duration_s: Some(1.0),
            width: Some(200),
            height: Some(100),
            black_area: Some(0.8),
            brightness: Some(0.2),
            black_frame_rate: Some(0.4),
            aesthetic: Some(4.0),
            ocr_coverage: Some(0.1),
            clip_score: Some(0.25),
            ..clean()
        };
        assert!(evaluate(&r).kept);
        assert!(metadata_rules_eval(&ClipRecord { width: Some(100), height: Some(100), ..clean() }).kept);
    }

    #[test]
    fn first_failure_wins() {
        let r = ClipRecord { brightness: Some(0.0), watermark: Some(true), frames: Some(3), ..clean() };
        assert_eq!(metadata_rules_eval(&r).reason, "min_frames");
        let r = ClipRecord { caption: Some("a a a a".into()), clip_score: Some(0.1), ..clean() };
        assert_eq!(caption_rules_eval(&r).reason, "rep_2gram");
    }

    #[test]
    fn missing_fields_are_dropped() {
        assert_eq!(
            metadata_rules_eval(&ClipRecord { brightness: None, ..clean() }),
            FilterOutcome::drop(Stage::Quality, "missing_field")
        );
        assert_eq!(metadata_rules_eval(&ClipRecord::default()).reason, "missing_field");
        assert_eq!(caption_rules_eval(&ClipRecord { caption: None, ..clean() }).reason, "missing_caption");
        assert_eq!(caption_rules_eval(&ClipRecord { clip_score: None, ..clean() }).reason, "missing_field");
        // fps and path are informational only
        assert!(evaluate(&ClipRecord { fps: None, path: None, ..clean() }).kept);
    }

    #[test]
    fn caption_examples() {
        let r = ClipRecord { caption: Some("a a a a".into()), clip_score: Some(0.5), ..clean() };
        assert_eq!(caption_rules_eval(&r).reason, "rep_2gram");
        assert_eq!(caption_rules_eval(&ClipRecord { clip_score: Some(0.20), ..clean() }).reason, "clip_score");
        assert!(caption_rules_eval(&ClipRecord { clip_score: Some(0.30), ..clean() }).kept);
    }

    #[test]
    fn parse_reports_the_line() {
        assert!(matches!(ClipRecord::parse("{not json", 7), Err(Error::Record { line: 7, .. })));
        assert!(matches!(ClipRecord::parse(r#"{"black_area": 1.5}"#, 2), Err(Error::Record { line: 2, .. })));
        assert!(matches!(ClipRecord::parse(r#"{"frames": -3}"#, 1), Err(Error::Record { .. })));
        assert_eq!(ClipRecord::parse(r#"{"frames": 70, "extra": 1}"#, 1).unwrap().frames, Some(70));
    }

    fn line(r: &ClipRecord) -> String {
        serde_json::to_string(r).unwrap()
    }

    fn run(lines: &[String]) -> (PipelineReport, String) {
        let dir = tempfile::tempdir().unwrap();
        let (inp, out) = (dir.path().join("in.jsonl"), dir.path().join("out.jsonl"));
        std::fs::write(&inp, lines.iter().map(|l| format!("{l}\n")).collect::<String>()).unwrap();
        let report = run_pipeline(&inp, &out).unwrap();
        (report, std::fs::read_to_string(out).unwrap())
    }

    #[test]
    fn three_record_pipeline() {
        let lines = vec![
            line(&ClipRecord { width: Some(3000), height: Some(1000), ..clean() }),
            line(&ClipRecord { clip_score: Some(0.1), ..clean() }),
            line(&clean()),
        ];
        let (report, out) = run(&lines);
        assert_eq!(report.input_count, 3);
        assert_eq!(report.kept_count, 1);
        let want: BTreeMap<String, usize> = [("aspect_ratio".to_string(), 1), ("clip_score".to_string(), 1)].into();
        assert_eq!(report.drops_by_reason, want);
        assert_eq!(out, format!("{}\n", lines[2]));
    }

    #[test]
    fn empty_input() {
        let (report, out) = run(&[]);
        assert_eq!(report, PipelineReport::default());
        assert!(out.is_empty());
    }

    #[test]
    fn twenty_record_fixture() {
        let mut records: Vec<ClipRecord> = Vec::new();
        for i in 0..20u64 {
            let mut r = clean();
            r.path = Some(format!("clip{i:02}.mp4"));
            match i % 5 {
                0 => {}
                1 => r.frames = Some(30 + i),
                2 => r.brightness = Some(0.05),
                3 => r.caption = Some("one two one two one two one two".into()),
                _ => r.clip_score = Some(0.1 + 0.001 * i as f64),
            }
            records.push(r);
        }
        let mut lines: Vec<String> = records.iter().map(line).collect();
        lines.insert(7, "{\"frames\": ".into());
        let (report, out) = run(&lines);

        // independent oracle: count each rule by hand from the construction
        let mut want: BTreeMap<String, usize> = BTreeMap::new();
        for i in 0..20 {
            let reason = ["pass", "min_frames", "brightness", "rep_2gram", "clip_score"][i % 5];
            if reason != "pass" {
                *want.entry(reason.into()).or_default() += 1;
            }
        }
        want.insert("parse_error".into(), 1);
        assert_eq!(report.input_count, 21);
        assert_eq!(report.kept_count, 4);
        assert_eq!(report.drops_by_reason, want);
        assert_eq!(report.input_count, report.kept_count + report.dropped());
        let kept: Vec<&str> = out.lines().collect();
        let expected: Vec<String> = records.iter().step_by(5).map(line).collect();
        assert_eq!(kept, expected);

        // kept output passes again unchanged
        let (again, out2) = run(&kept.iter().map(|s| s.to_string()).collect::<Vec<_>>());
        assert_eq!(again.kept_count, 4);
        assert_eq!(out2, out);
    }

    #[test]
    fn kept_lines_keep_their_bytes() {
        let spaced = line(&clean()).replace(",", " ,  ");
        let (report, out) = run(&[spaced.clone(), String::new(), "   ".into()]);
        assert_eq!(report.input_count, 1);
        assert_eq!(out, format!("{spaced}\n"));
    }

    proptest! {
        #[test]
        fn ngram_matches_brute_force(words in proptest::collection::vec(0u8..4, 0..30), n in 1usize..12) {
            let caption = words.iter().map(|w| ["x", "y", "z", "w"][*w as usize]).collect::<Vec<_>>().join(" ");
            let rate = ngram_repetition(&caption, n);
            prop_assert_eq!(rate.to_bits(), brute_rate(&caption, n).to_bits());
            prop_assert!((0.0..1.0).contains(&rate));
        }

        #[test]
        fn counts_balance_and_rerun_is_stable(
            picks in proptest::collection::vec((0u8..8, 0u64..200, 0.0f64..1.0), 0..25)
        ) {
            let lines: Vec<String> = picks
                .iter()
                .map(|&(kind, frames, x)| match kind {
                    0 => "garbage".into(),
                    1 => line(&ClipRecord { frames: Some(frames), ..clean() }),
                    2 => line(&ClipRecord { brightness: Some(x), ..clean() }),
                    3 => line(&ClipRecord { clip_score: Some(x), ..clean() }),
                    4 => line(&ClipRecord { black_area: Some(x), ..clean() }),
                    5 => line(&ClipRecord { watermark: None, ..clean() }),
                    _ => line(&clean()),
                })
                .collect();
            let (a, out_a) = run(&lines);
            let (b, out_b) = run(&lines);
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(&out_a, &out_b);
            prop_assert_eq!(a.input_count, a.kept_count + a.dropped());
            let (again, out_again) = run(&out_a.lines().map(String::from).collect::<Vec<_>>());
            prop_assert_eq!(again.kept_count, a.kept_count);
            prop_assert_eq!(out_again, out_a);
        }
    }
}
