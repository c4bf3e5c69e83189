//! Runs the same training job under different fuser configurations.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{sample, semantic_eval, train_run, training_set, Model, TrainOutcome};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fuser::FuserFlags;

/// Number of training prompts sampled per arm for semantic scoring.
pub const SEMANTIC_PROMPTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arm {
    /// Encoder tokens only.
    Baseline,
    /// Decoder tokens pooled and added with no normalization or zero-conv.
    DirectSum,
    Norm,
    NormSs,
    ZeroConv,
    ZeroConvSs,
    /// Normalization, zero-conv and the stabilizer tokens.
    Full,
}

impl Arm {
    pub const ALL: [Arm; 7] =
        [Arm::Baseline, Arm::DirectSum, Arm::Norm, Arm::NormSs, Arm::ZeroConv, Arm::ZeroConvSs, Arm::Full];

    pub fn index(self) -> usize {
        Arm::ALL.iter().position(|a| *a == self).expect("listed") + 1
    }

    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::DirectSum => "direct_sum",
            Arm::Norm => "norm",
            Arm::NormSs => "norm_ss",
            Arm::ZeroConv => "zero_conv",
            Arm::ZeroConvSs => "zero_conv_ss",
            Arm::Full => "full",
        }
    }

    pub fn flags(self) -> FuserFlags {
        let f = |use_decoder, use_norm, use_zero_conv, use_ss| FuserFlags { use_decoder, use_norm, use_zero_conv, use_ss };
        match self {
            Arm::Baseline => f(false, false, false, false),
            Arm::DirectSum => f(true, false, false, false),
            Arm::Norm => f(true, true, false, false),
            Arm::NormSs => f(true, true, false, true),
            Arm::ZeroConv => f(true, false, true, false),
            Arm::ZeroConvSs => f(true, false, true, true),
            Arm::Full => f(true, true, true, true),
        }
    }

    /// `config` with this arm's fuser flags.
    pub fn apply(self, config: &RunConfig) -> RunConfig {
        let mut cfg = config.clone();
        cfg.fuser.flags = self.flags();
        cfg
    }

    /// Parses a comma-separated list such as `a1,a7` or `baseline,full`.
    pub fn parse_list(list: &str) -> Result<Vec<Arm>> {
        list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect()
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "a{}", self.index())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Arm::ALL
            .into_iter()
            .find(|a| a.to_string() == lower || a.name() == lower)
            .ok_or_else(|| Error::Param(format!("unknown arm `{s}` (expected a1..a7 or an arm name)")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SemanticSummary {
    pub count_ok: f64,
    pub color_ok: f64,
    pub direction_ok: f64,
    pub all_ok: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: String,
    pub name: String,
    pub steps_run: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub diverged: bool,
    pub semantic: SemanticSummary,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub rows: Vec<ArmResult>,
}

impl AblationReport {
    pub fn row(&self, arm: Arm) -> Option<&ArmResult> {
        self.rows.iter().find(|r| r.arm == arm.to_string())
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("arm,name,steps_run,initial_loss,final_loss,diverged,count_ok,color_ok,direction_ok,all_ok\n");
        for r in &self.rows {
            let s = &r.semantic;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.arm,
                r.name,
                r.steps_run,
                r.initial_loss,
                r.final_loss,
                r.diverged,
                s.count_ok,
                s.color_ok,
                s.direction_ok,
                s.all_ok
            ));
        }
        out
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("report.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        // the JSON summary leaves out the per-step curves, which live in each arm's metrics.csv
        let summary: Vec<serde_json::Value> = self
            .rows
            .iter()
            .map(|r| {
                serde_json::json!({
                    "arm": r.arm, "name": r.name, "steps_run": r.steps_run,
                    "initial_loss": r.initial_loss, "final_loss": r.final_loss,
                    "diverged": r.diverged, "semantic": r.semantic,
                })
            })
            .collect();
        let json = dir.join("report.json");
        let body = serde_json::to_string_pretty(&serde_json::json!({ "seed": self.seed, "arms": summary }))?;
        std::fs::write(&json, body).map_err(|e| Error::io(&json, e))
    }
}

/// Samples the first few training prompts and averages the semantic scores.
pub fn semantic_summary(model: &Model, sample_seed: u64) -> Result<SemanticSummary> {
    let data = training_set(model)?;
    let picked = &data[..data.len().min(SEMANTIC_PROMPTS)];
    let mut sum = SemanticSummary::default();
    for (sample_item, _) in picked {
        let clip = sample(model, &sample_item.prompt, model.config.train.sample_steps, sample_seed)?;
        let s = semantic_eval(&clip, &sample_item.spec);
        sum.count_ok += f64::from(s.count_ok);
        sum.color_ok += f64::from(s.color_ok);
        sum.direction_ok += f64::from(s.direction_ok);
        sum.all_ok += f64::from(u8::from(s.all_ok()));
    }
    let n = picked.len() as f64;
    Ok(SemanticSummary {
        count_ok: sum.count_ok / n,
        color_ok: sum.color_ok / n,
        direction_ok: sum.direction_ok / n,
        all_ok: sum.all_ok / n,
    })
}

fn summarize(arm: Arm, outcome: &TrainOutcome, window: usize, semantic: SemanticSummary) -> ArmResult {
    ArmResult {
        arm: arm.to_string(),
        name: arm.name().to_string(),
        steps_run: outcome.losses.len(),
        initial_loss: outcome.initial_loss(),
        final_loss: outcome.final_loss(window),
        diverged: outcome.diverged,
        semantic,
        losses: outcome.losses.clone(),
    }
}

/// Trains every requested arm on the same data and random streams. With
/// `out_dir`, each arm writes its run into `out_dir/aN` and the combined
/// report goes to `report.csv` and `report.json`.
pub fn ablation_run(
    config: &RunConfig,
    arms: &[Arm],
    out_dir: Option<&Path>,
    mut progress: impl FnMut(Arm, usize, f64),
) -> Result<AblationReport> {
    if arms.is_empty() {
        return Err(Error::Param("no arms requested".into()));
    }
    let mut rows = Vec::with_capacity(arms.len());
    for &arm in arms {
        let cfg = arm.apply(config);
        let run_dir = out_dir.map(|d| d.join(arm.to_string()));
        let outcome = train_run(&cfg, run_dir.as_deref(), |step, loss| progress(arm, step, loss))?;
        let semantic =
            if outcome.diverged { SemanticSummary::default() } else { semantic_summary(&outcome.model, cfg.seed)? };
        rows.push(summarize(arm, &outcome, cfg.train.final_window, semantic));
    }
    let report = AblationReport { seed: config.seed, rows };
    if let Some(dir) = out_dir {
        report.write(dir)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.seed = 11;
        cfg.model.d_model = 16;
        cfg.model.heads = 2;
        cfg.model.depth = 1;
        cfg.train.steps = 5;
        cfg.train.batch = 2;
        cfg.train.clips = 2;
        cfg.train.sample_steps = 2;
        cfg
    }

    #[test]
    fn arms_parse_by_index_and_name() {
        assert_eq!(Arm::parse_list("a1, a7").unwrap(), vec![Arm::Baseline, Arm::Full]);
        assert_eq!(Arm::parse_list("direct_sum,NORM_SS").unwrap(), vec![Arm::DirectSum, Arm::NormSs]);
        assert!(matches!("a8".parse::<Arm>(), Err(Error::Param(_))));
        assert!(matches!(Arm::parse_list("a1,bogus"), Err(Error::Param(_))));
        for arm in Arm::ALL {
            assert_eq!(arm.to_string().parse::<Arm>().unwrap(), arm);
        }
    }

    #[test]
    fn report_lists_requested_arms_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let arms = [Arm::Full, Arm::Baseline, Arm::DirectSum];
        let report = ablation_run(&tiny(), &arms, Some(dir.path()), |_, _, _| {}).unwrap();
        let names: Vec<_> = report.rows.iter().map(|r| r.arm.as_str()).collect();
        assert_eq!(names, ["a7", "a1", "a2"]);
        let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(dir.path().join("report.json").exists());
        assert!(dir.path().join("a7/metrics.csv").exists());
        assert!(report.rows.iter().all(|r| r.steps_run == 5 && r.losses.len() == 5));
    }

    #[test]
    fn baseline_ignores_the_decoder_branch() {
        let mut salted = tiny();
        salted.text.answer_salt = 12345;
        let a = ablation_run(&tiny(), &[Arm::Baseline, Arm::Full], None, |_, _, _| {}).unwrap();
        let b = ablation_run(&salted, &[Arm::Baseline, Arm::Full], None, |_, _, _| {}).unwrap();
        let bits = |r: &ArmResult| r.losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.rows[0]), bits(&b.rows[0]));
        assert_ne!(bits(&a.rows[1]), bits(&b.rows[1]));
    }

    #[test]
    fn full_arm_without_decoder_equals_baseline() {
        let mut cfg = Arm::Full.apply(&tiny());
        cfg.fuser.flags.use_decoder = false;
        let full_off = train_run(&cfg, None, |_, _| {}).unwrap();
        let base = train_run(&Arm::Baseline.apply(&tiny()), None, |_, _| {}).unwrap();
        assert_eq!(
            full_off.losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            base.losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
