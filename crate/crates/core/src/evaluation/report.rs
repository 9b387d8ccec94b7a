//! Evaluation report assembly. Aggregates are always recomputed from the raw
//! per-patch and per-slide entries handed in.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::classifier::{FoolingReport, PatchVerdict, RateCount};
use crate::blindtest::BlindReport;
use crate::error::{Error, Result};
use crate::types::InkCategory;

pub const REPORT_VERSION: &str = "inkrestore-eval/1";
/// JSON schema of [`EvalReport`], shipped with the crate.
pub const REPORT_SCHEMA: &str = include_str!("../../schema/eval_report.schema.json");

/// Published reference values the desk-scale numbers are compared against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct References {
    pub fooling_rate_overall: (f64, f64),
    pub fooling_rate_per_category: BTreeMap<InkCategory, f64>,
    pub grad_corr_mean: f64,
    pub grad_corr_std: f64,
    pub grad_corr_opaque_mean: f64,
    pub blind_corrected_as_original_rate: f64,
    pub blind_clean_as_corrected_rate: f64,
}

impl Default for References {
    fn default() -> Self {
        References {
            fooling_rate_overall: (0.96, 0.97),
            fooling_rate_per_category: [
                (InkCategory::Black, 0.98),
                (InkCategory::Green, 0.94),
                (InkCategory::Blue, 0.96),
                (InkCategory::Opaque, 0.97),
            ]
            .into_iter()
            .collect(),
            grad_corr_mean: 0.93,
            grad_corr_std: 0.02,
            grad_corr_opaque_mean: 0.61,
            blind_corrected_as_original_rate: 0.70,
            blind_clean_as_corrected_rate: 0.40,
        }
    }
}

/// Population statistics of a set of values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Stats {
    /// Two-pass mean and population standard deviation; `None` when empty.
    pub fn of(values: &[f64]) -> Option<Stats> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Stats {
            n: values.len(),
            mean,
            std: var.sqrt(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

/// One input/output correlation; `r = None` marks an undefined correlation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrEntry {
    pub id: String,
    pub category: Option<InkCategory>,
    pub r: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCorrSection {
    pub overall: Option<Stats>,
    pub per_category: BTreeMap<InkCategory, Stats>,
    /// Entries whose correlation was undefined; excluded from the statistics.
    pub undefined: usize,
    pub entries: Vec<CorrEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NucleiEntry {
    pub slide_id: String,
    pub before: usize,
    pub after: usize,
    pub revived: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NucleiSection {
    pub slides: Vec<NucleiEntry>,
    pub total_before: usize,
    pub total_after: usize,
    pub total_revived: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoolingSection {
    pub overall: RateCount,
    pub per_category: BTreeMap<InkCategory, RateCount>,
    pub log: Vec<PatchVerdict>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Identifiers {
    pub model_checkpoint: Option<String>,
    pub classifier_checkpoint: Option<String>,
    pub seed: Option<u64>,
    /// Effective configuration the numbers were produced under.
    pub config: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: String,
    pub identifiers: Identifiers,
    pub fooling_rate: Option<FoolingSection>,
    pub grad_corr: Option<GradCorrSection>,
    pub nuclei: Option<NucleiSection>,
    pub blindtest: Option<BlindReport>,
    pub references: References,
}

#[derive(Clone, Debug, Default)]
pub struct ReportInputs {
    pub identifiers: Identifiers,
    pub fooling_log: Option<Vec<PatchVerdict>>,
    pub grad_corr: Option<Vec<CorrEntry>>,
    pub nuclei: Option<Vec<NucleiEntry>>,
    pub blindtest: Option<BlindReport>,
}

fn grad_section(entries: Vec<CorrEntry>) -> Result<GradCorrSection> {
    if let Some(e) = entries
        .iter()
        .find(|e| e.r.is_some_and(|r| !(-1.0..=1.0).contains(&r)))
    {
        return Err(Error::Report(format!("correlation of `{}` lies outside [-1, 1]", e.id)));
    }
    let defined = |cat: Option<InkCategory>| -> Vec<f64> {
        entries
            .iter()
            .filter(|e| cat.is_none() || e.category == cat)
            .filter_map(|e| e.r)
            .collect()
    };
    let per_category = InkCategory::ALL
        .into_iter()
        .filter_map(|c| Stats::of(&defined(Some(c))).map(|s| (c, s)))
        .collect();
    Ok(GradCorrSection {
        overall: Stats::of(&defined(None)),
        per_category,
        undefined: entries.iter().filter(|e| e.r.is_none()).count(),
        entries,
    })
}

fn nuclei_section(slides: Vec<NucleiEntry>) -> Result<NucleiSection> {
    if let Some(s) = slides
        .iter()
        .find(|s| s.revived != s.after as i64 - s.before as i64)
    {
        return Err(Error::Report(format!(
            "slide `{}`: revived {} is not after {} - before {}",
            s.slide_id, s.revived, s.after, s.before
        )));
    }
    Ok(NucleiSection {
        total_before: slides.iter().map(|s| s.before).sum(),
        total_after: slides.iter().map(|s| s.after).sum(),
        total_revived: slides.iter().map(|s| s.revived).sum(),
        slides,
    })
}

fn blind_section(b: BlindReport) -> Result<BlindReport> {
    let again = BlindReport::from_confusion(b.confusion, b.total);
    if b.total < b.confusion.total() {
        return Err(Error::Report("blind-test confusion exceeds its item count".into()));
    }
    Ok(again)
}

pub fn assemble_report(inputs: ReportInputs) -> Result<EvalReport> {
    if inputs.fooling_log.is_none()
        && inputs.grad_corr.is_none()
        && inputs.nuclei.is_none()
        && inputs.blindtest.is_none()
    {
        return Err(Error::Report("a report needs at least one metric section".into()));
    }
    let fooling_rate = inputs.fooling_log.map(|log| {
        let f = FoolingReport::from_log(log);
        FoolingSection {
            overall: f.overall,
            per_category: f.per_category,
            log: f.log,
        }
    });
    Ok(EvalReport {
        version: REPORT_VERSION.to_string(),
        identifiers: inputs.identifiers,
        fooling_rate,
        grad_corr: inputs.grad_corr.map(grad_section).transpose()?,
        nuclei: inputs.nuclei.map(nuclei_section).transpose()?,
        blindtest: inputs.blindtest.map(blind_section).transpose()?,
        references: References::default(),
    })
}

impl EvalReport {
    /// Re-derives every aggregate from the raw entries and checks they match.
    pub fn verify(&self) -> Result<()> {
        if self.version != REPORT_VERSION {
            return Err(Error::Report(format!("unsupported report version `{}`", self.version)));
        }
        let rebuilt = assemble_report(ReportInputs {
            identifiers: self.identifiers.clone(),
            fooling_log: self.fooling_rate.as_ref().map(|f| f.log.clone()),
            grad_corr: self.grad_corr.as_ref().map(|g| g.entries.clone()),
            nuclei: self.nuclei.as_ref().map(|n| n.slides.clone()),
            blindtest: self.blindtest,
        })?;
        // Compared through JSON so floats match exactly as they would after a round trip.
        if json(&rebuilt.fooling_rate) != json(&self.fooling_rate)
            || json(&rebuilt.grad_corr) != json(&self.grad_corr)
            || json(&rebuilt.nuclei) != json(&self.nuclei)
            || json(&rebuilt.blindtest) != json(&self.blindtest)
        {
            return Err(Error::Report("aggregates do not match their entries".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Report(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: EvalReport = serde_json::from_str(&text).map_err(|e| Error::Report(e.to_string()))?;
        r.verify()?;
        Ok(r)
    }
}

fn json<T: Serialize>(t: &T) -> serde_json::Value {
    serde_json::to_value(t).unwrap_or(serde_json::Value::Null)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blindtest::Confusion;

    fn corr(vals: &[Option<f64>]) -> Vec<CorrEntry> {
        vals.iter()
            .enumerate()
            .map(|(i, &r)| CorrEntry {
                id: format!("p{i}"),
                category: Some(if i % 2 == 0 { InkCategory::Black } else { InkCategory::Blue }),
                r,
            })
            .collect()
    }

    #[test]
    fn grad_only_report_leaves_other_sections_null() {
        let r = assemble_report(ReportInputs {
            grad_corr: Some(corr(&[Some(0.9), Some(0.8), None])),
            ..Default::default()
        })
        .unwrap();
        assert!(r.fooling_rate.is_none() && r.nuclei.is_none() && r.blindtest.is_none());
        let g = r.grad_corr.as_ref().unwrap();
        assert_eq!(g.undefined, 1);
        assert_eq!(g.overall.unwrap().n, 2);
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert!(json["nuclei"].is_null());
        r.verify().unwrap();
    }

    #[test]
    fn empty_inputs_and_bad_revived_are_rejected() {
        assert!(matches!(assemble_report(ReportInputs::default()), Err(Error::Report(_))));
        let bad = ReportInputs {
            nuclei: Some(vec![NucleiEntry {
                slide_id: "s".into(),
                before: 10,
                after: 15,
                revived: 4,
            }]),
            ..Default::default()
        };
        assert!(matches!(assemble_report(bad), Err(Error::Report(_))));
    }

    #[test]
    fn stats_match_direct_two_pass() {
        let v = [0.91, 0.95, 0.89, 0.97, 0.93];
        let s = Stats::of(&v).unwrap();
        let mean = (0.91 + 0.95 + 0.89 + 0.97 + 0.93) / 5.0;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 5.0;
        assert!((s.mean - mean).abs() < 1e-9);
        assert!((s.std - var.sqrt()).abs() < 1e-9);
        assert_eq!((s.min, s.max), (0.89, 0.97));
    }

    #[test]
    fn tampered_aggregates_fail_verification() {
        let mut r = assemble_report(ReportInputs {
            grad_corr: Some(corr(&[Some(0.5), Some(0.7)])),
            blindtest: Some(BlindReport::from_confusion(
                Confusion {
                    clean_as_clean: 1,
                    clean_as_corrected: 1,
                    corrected_as_clean: 1,
                    corrected_as_corrected: 1,
                },
                4,
            )),
            ..Default::default()
        })
        .unwrap();
        r.verify().unwrap();
        r.grad_corr.as_mut().unwrap().overall.as_mut().unwrap().mean = 0.99;
        assert!(matches!(r.verify(), Err(Error::Report(_))));
    }

    #[test]
    fn schema_parses_and_names_every_section() {
        let schema: serde_json::Value = serde_json::from_str(REPORT_SCHEMA).unwrap();
        for key in ["version", "identifiers", "fooling_rate", "grad_corr", "nuclei", "blindtest", "references"] {
            assert!(schema["properties"].get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn populated_report_validates_against_schema() {
        let schema: serde_json::Value = serde_json::from_str(REPORT_SCHEMA).unwrap();
        let validator = jsonschema::validator_for(&schema).unwrap();
        let r = assemble_report(ReportInputs {
            identifiers: Identifiers {
                model_checkpoint: Some("model.ckpt".into()),
                seed: Some(7),
                ..Default::default()
            },
            fooling_log: Some(vec![PatchVerdict {
                id: "a".into(),
                category: Some(InkCategory::Green),
                p_marker: 0.2,
                classified_clean: true,
            }]),
            grad_corr: Some(corr(&[Some(0.9), None])),
            nuclei: Some(vec![NucleiEntry {
                slide_id: "s".into(),
                before: 3,
                after: 5,
                revived: 2,
            }]),
            blindtest: Some(BlindReport::from_confusion(Confusion::default(), 0)),
        })
        .unwrap();
        let value: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        let errors: Vec<String> = validator.iter_errors(&value).map(|e| e.to_string()).collect();
        assert!(errors.is_empty(), "{errors:?}");
        let mut broken = value.clone();
        broken["nuclei"]["slides"][0]["before"] = serde_json::json!(-1);
        assert!(!validator.is_valid(&broken));
    }
}
