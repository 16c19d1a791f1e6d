use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{assd, dice, skeleton_metrics, BinaryMask};
use crate::error::{Error, Result};
use crate::par;
use crate::volio::{LabelMask, AORTA, CORONARY};

const FOREGROUND: [u8; 2] = [AORTA, CORONARY];

/// Label set that feeds the skeleton rates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkeletonScope {
    #[default]
    Foreground,
    Coronary,
}

impl SkeletonScope {
    fn classes(self) -> &'static [u8] {
        match self {
            SkeletonScope::Foreground => &FOREGROUND,
            SkeletonScope::Coronary => &[CORONARY],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub skeleton_scope: SkeletonScope,
}

/// Which fields were set by an empty-mask convention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricFlags {
    pub dice_empty: bool,
    pub dice_a_empty: bool,
    pub dice_c_empty: bool,
    pub assd_undefined: bool,
    pub sp_degenerate: bool,
    pub sr_degenerate: bool,
}

impl MetricFlags {
    pub fn any(&self) -> bool {
        self.dice_empty
            || self.dice_a_empty
            || self.dice_c_empty
            || self.assd_undefined
            || self.sp_degenerate
            || self.sr_degenerate
    }

    fn labels(&self) -> String {
        let named = [
            (self.dice_empty, "dice_empty"),
            (self.dice_a_empty, "dice_a_empty"),
            (self.dice_c_empty, "dice_c_empty"),
            (self.assd_undefined, "assd_undefined"),
            (self.sp_degenerate, "sp_degenerate"),
            (self.sr_degenerate, "sr_degenerate"),
        ];
        named
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect::<Vec<_>>()
            .join("|")
    }
}

/// Scores of one prediction against its ground truth. Rates are fractions in [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dice: f64,
    pub dice_a: f64,
    pub dice_c: f64,
    /// `None` when either foreground surface is empty.
    pub assd_mm: Option<f64>,
    pub sp: f64,
    pub sr: f64,
    pub flags: MetricFlags,
}

/// DICE and ASSD use the aorta and coronary union; DICE_A and DICE_C the single classes.
pub fn evaluate(pred: &LabelMask, gt: &LabelMask, opts: &EvalOptions) -> Result<MetricsReport> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape())));
    }
    if pred.spacing != gt.spacing {
        return Err(Error::Shape(format!("spacing {:?} vs {:?}", pred.spacing, gt.spacing)));
    }
    let mask = |m: &LabelMask, c: &[u8]| BinaryMask::from_labels(m, c);
    let (sf, gf) = (mask(pred, &FOREGROUND), mask(gt, &FOREGROUND));
    let d = dice(&sf, &gf)?;
    let da = dice(&mask(pred, &[AORTA]), &mask(gt, &[AORTA]))?;
    let dc = dice(&mask(pred, &[CORONARY]), &mask(gt, &[CORONARY]))?;
    let assd_mm = match assd(&sf, &gf) {
        Ok(v) => Some(v),
        Err(Error::Degenerate(_)) => None,
        Err(e) => return Err(e),
    };
    let scope = opts.skeleton_scope.classes();
    let sk = skeleton_metrics(&mask(pred, scope), &mask(gt, scope))?;
    Ok(MetricsReport {
        dice: d.value,
        dice_a: da.value,
        dice_c: dc.value,
        assd_mm,
        sp: sk.sp.value,
        sr: sk.sr.value,
        flags: MetricFlags {
            dice_empty: d.degenerate,
            dice_a_empty: da.degenerate,
            dice_c_empty: dc.degenerate,
            assd_undefined: assd_mm.is_none(),
            sp_degenerate: sk.sp.degenerate,
            sr_degenerate: sk.sr.degenerate,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortRow {
    pub id: String,
    pub report: MetricsReport,
}

/// Column means; ASSD averages only the volumes where it is defined.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortMean {
    pub dice: f64,
    pub dice_a: f64,
    pub dice_c: f64,
    pub assd_mm: Option<f64>,
    pub sp: f64,
    pub sr: f64,
    pub volumes: usize,
    pub flagged: usize,
}

/// Per-volume reports for a test split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CohortReport {
    pub rows: Vec<CohortRow>,
}

#[derive(Serialize)]
struct CsvRecord<'a> {
    id: &'a str,
    dice: f64,
    dice_a: f64,
    dice_c: f64,
    assd_mm: String,
    sp: f64,
    sr: f64,
    flags: String,
}

#[derive(Serialize)]
struct Summary<'a> {
    mean: CohortMean,
    volumes: &'a [CohortRow],
}

impl CohortReport {
    /// Scores `(id, prediction, ground truth)` triples, fanning out across volumes.
    pub fn evaluate_all(cases: &[(String, LabelMask, LabelMask)], opts: &EvalOptions) -> Result<Self> {
        let reports = par::map_range(cases.len(), |i| evaluate(&cases[i].1, &cases[i].2, opts));
        let mut rows = Vec::with_capacity(cases.len());
        for (case, report) in cases.iter().zip(reports) {
            rows.push(CohortRow {
                id: case.0.clone(),
                report: report?,
            });
        }
        Ok(CohortReport { rows })
    }

    pub fn push(&mut self, id: impl Into<String>, report: MetricsReport) {
        self.rows.push(CohortRow { id: id.into(), report });
    }

    pub fn mean(&self) -> CohortMean {
        let n = self.rows.len().max(1) as f64;
        let avg = |f: fn(&MetricsReport) -> f64| self.rows.iter().map(|r| f(&r.report)).sum::<f64>() / n;
        let assd: Vec<f64> = self.rows.iter().filter_map(|r| r.report.assd_mm).collect();
        CohortMean {
            dice: avg(|r| r.dice),
            dice_a: avg(|r| r.dice_a),
            dice_c: avg(|r| r.dice_c),
            assd_mm: (!assd.is_empty()).then(|| assd.iter().sum::<f64>() / assd.len() as f64),
            sp: avg(|r| r.sp),
            sr: avg(|r| r.sr),
            volumes: self.rows.len(),
            flagged: self.rows.iter().filter(|r| r.report.flags.any()).count(),
        }
    }

    /// One row per volume followed by a `mean` row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let fmt_assd = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for row in &self.rows {
            let r = &row.report;
            w.serialize(CsvRecord {
                id: &row.id,
                dice: r.dice,
                dice_a: r.dice_a,
                dice_c: r.dice_c,
                assd_mm: fmt_assd(r.assd_mm),
                sp: r.sp,
                sr: r.sr,
                flags: r.flags.labels(),
            })
            .map_err(csv_err)?;
        }
        let m = self.mean();
        w.serialize(CsvRecord {
            id: "mean",
            dice: m.dice,
            dice_a: m.dice_a,
            dice_c: m.dice_c,
            assd_mm: fmt_assd(m.assd_mm),
            sp: m.sp,
            sr: m.sr,
            flags: format!("flagged={}", m.flagged),
        })
        .map_err(csv_err)?;
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn summary_json(&self) -> String {
        let s = Summary {
            mean: self.mean(),
            volumes: &self.rows,
        };
        serde_json::to_string_pretty(&s).expect("report serializes")
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        let json_path = dir.join(format!("{stem}.json"));
        std::fs::write(&json_path, self.summary_json()).map_err(|e| Error::io(&json_path, e))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volio::BACKGROUND;

    fn two_class(shape: [usize; 3]) -> LabelMask {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|i| match i % 7 {
                0 | 1 => AORTA,
                3 => CORONARY,
                _ => BACKGROUND,
            })
            .collect();
        LabelMask::new(data, shape, [1.0; 3]).unwrap()
    }

    #[test]
    fn identity_scores_perfectly() {
        let g = two_class([6, 6, 6]);
        let r = evaluate(&g, &g, &EvalOptions::default()).unwrap();
        assert_eq!((r.dice, r.dice_a, r.dice_c, r.sp, r.sr), (1.0, 1.0, 1.0, 1.0, 1.0));
        assert_eq!(r.assd_mm, Some(0.0));
        assert!(!r.flags.any());
    }

    #[test]
    fn empty_prediction_is_flagged() {
        let g = two_class([6, 6, 6]);
        let p = LabelMask::zeros([6, 6, 6], [1.0; 3]).unwrap();
        let r = evaluate(&p, &g, &EvalOptions::default()).unwrap();
        assert_eq!(r.dice, 0.0);
        assert_eq!(r.assd_mm, None);
        assert!(r.flags.assd_undefined && r.flags.sp_degenerate && !r.flags.dice_empty);
    }

    #[test]
    fn csv_has_mean_row() {
        let g = two_class([6, 6, 6]);
        let cases = vec![("a".to_string(), g.clone(), g.clone()), ("b".to_string(), LabelMask::zeros([6, 6, 6], [1.0; 3]).unwrap(), g)];
        let c = CohortReport::evaluate_all(&cases, &EvalOptions::default()).unwrap();
        let text = c.to_csv().unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "id,dice,dice_a,dice_c,assd_mm,sp,sr,flags");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("mean,0.5,0.5,0.5,0,0.5,0.5,flagged=1"));
        let m = c.mean();
        assert_eq!(m.assd_mm, Some(0.0));
        let v: serde_json::Value = serde_json::from_str(&c.summary_json()).unwrap();
        assert_eq!(v["volumes"].as_array().unwrap().len(), 2);
    }
}
