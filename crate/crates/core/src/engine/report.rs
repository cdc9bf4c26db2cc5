use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Engine, Method, Mode, RunConfig, SkillTraining};
use crate::error::{Error, Result};
use crate::kb::KnowledgeBase;

/// `(SR_gt − ASR) / SR_gt`; undefined when `SR_gt = 0`.
pub fn forgetting_rate(sr_gt: f64, asr: f64) -> Option<f64> {
    (sr_gt > 0.0).then(|| (sr_gt - asr) / sr_gt)
}

/// Serialises a missing forgetting rate as the string `"undefined"`.
mod undefined_as_string {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Value(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => Repr::Value(*x),
            None => Repr::Text("undefined".into()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Value(x) => Ok(Some(x)),
            Repr::Text(t) if t == "undefined" => Ok(None),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("unexpected value {t:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillReport {
    pub skill_id: u32,
    pub name: String,
    pub holdout: bool,
    /// Success rate after the whole stream was learned.
    pub asr: f64,
    /// Success rate right after the skill was learned.
    pub sr_gt: Option<f64>,
    #[serde(with = "undefined_as_string")]
    pub fr: Option<f64>,
    /// Ω averaged over the skill's evaluation episodes.
    pub omega: Vec<f64>,
    /// One character per layer, `1` = inject.
    pub gates: String,
    pub initial_loss: Option<f64>,
    pub first_epoch_loss: Option<f64>,
    pub final_epoch_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub method: Method,
    pub mode: Mode,
    pub skills: Vec<SkillReport>,
    /// `trajectory[s][i]`: success rate of skill `i` after stage `s`.
    pub trajectory: Vec<Vec<f64>>,
    pub average_asr: f64,
    #[serde(with = "undefined_as_string")]
    pub average_fr: Option<f64>,
    pub holdout_asr: Option<f64>,
    pub routing_accuracy: f64,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::Format(format!("run report: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn training_skills(&self) -> impl Iterator<Item = &SkillReport> {
        self.skills.iter().filter(|s| !s.holdout)
    }

    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"));
        let mut out = String::from("skill_id,name,holdout,asr,sr_gt,fr\n");
        for s in &self.skills {
            let _ = writeln!(
                out,
                "{},\"{}\",{},{:.6},{},{}",
                s.skill_id,
                s.name.replace('"', "'"),
                s.holdout,
                s.asr,
                fmt(s.sr_gt),
                fmt(s.fr)
            );
        }
        out
    }

    /// Per-skill success after each stage, `null` before the skill is learned.
    pub fn plotdata(&self) -> serde_json::Value {
        let series: Vec<serde_json::Value> = self
            .training_skills()
            .enumerate()
            .map(|(i, s)| {
                let asr: Vec<Option<f64>> = self.trajectory.iter().map(|row| row.get(i).copied()).collect();
                serde_json::json!({ "skill_id": s.skill_id, "name": s.name, "asr": asr })
            })
            .collect();
        serde_json::json!({
            "method": self.method,
            "stages": self.trajectory.len(),
            "series": series,
        })
    }
}

/// Wall-clock measurements, kept apart so reports stay byte-reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_secs: f64,
    pub stage_secs: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub kb: KnowledgeBase,
    pub report: RunReport,
    pub timing: Timing,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Plotdata,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "plotdata" => Ok(ReportFormat::Plotdata),
            other => Err(Error::usage(format!("unknown report format {other:?}"))),
        }
    }
}

/// Writes `report` into `dir` and returns the file path.
pub fn emit_report(report: &RunReport, format: ReportFormat, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (name, body) = match format {
        ReportFormat::Json => ("report.json", report.to_json()?),
        ReportFormat::Csv => ("report.csv", report.to_csv()),
        ReportFormat::Plotdata => ("plotdata.json", serde_json::to_string_pretty(&report.plotdata())?),
    };
    let path = dir.join(name);
    std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl Engine {
    /// Evaluates a stored knowledge base; no trajectory or loss history.
    pub fn evaluate_report(&self, kb: &KnowledgeBase, mode: Mode) -> Result<RunReport> {
        self.build_report(kb, mode, &[], &[])
    }

    /// Final evaluation of `kb` folded into a report.
    pub(super) fn build_report(
        &self,
        kb: &KnowledgeBase,
        mode: Mode,
        trajectory: &[Vec<f64>],
        trainings: &[SkillTraining],
    ) -> Result<RunReport> {
        let evals = self.evaluate(kb, mode)?;
        let mut skills = Vec::with_capacity(evals.len());
        for (i, (spec, eval)) in self.stream.skills.iter().zip(&evals).enumerate() {
            let record = kb.record(spec.skill_id);
            let sr_gt = record.and_then(|r| r.sr_gt);
            let training = trainings.get(i).filter(|_| !spec.holdout);
            skills.push(SkillReport {
                skill_id: spec.skill_id,
                name: spec.name.clone(),
                holdout: spec.holdout,
                asr: eval.asr,
                sr_gt,
                fr: sr_gt.and_then(|g| forgetting_rate(g, eval.asr)),
                omega: eval.omega.clone(),
                gates: record
                    .map(|r| {
                        r.adapter
                            .gate_decisions
                            .iter()
                            .map(|&g| if g { '1' } else { '0' })
                            .collect()
                    })
                    .unwrap_or_default(),
                initial_loss: training.map(SkillTraining::initial_loss),
                first_epoch_loss: training.map(SkillTraining::first_epoch_loss),
                final_epoch_loss: training.map(SkillTraining::final_epoch_loss),
            });
        }
        let train_asr: Vec<f64> = skills.iter().filter(|s| !s.holdout).map(|s| s.asr).collect();
        let frs: Vec<f64> = skills.iter().filter_map(|s| s.fr).collect();
        let holdout: Vec<f64> = skills.iter().filter(|s| s.holdout).map(|s| s.asr).collect();
        Ok(RunReport {
            config: self.cfg.clone(),
            method: self.cfg.method,
            mode,
            average_asr: mean(&train_asr).unwrap_or(0.0),
            average_fr: mean(&frs),
            holdout_asr: mean(&holdout),
            routing_accuracy: self.routing_accuracy(kb)?,
            skills,
            trajectory: trajectory.to_vec(),
        })
    }
}
