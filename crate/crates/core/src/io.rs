//! File formats: IPD CSV, aggregate-data JSON, results CSV, truth and
//! calibration JSON, weight and bootstrap dumps.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::ReplicateRow;
use crate::metrics::MetricsCell;
use crate::model::{
    AggregateData, Anchoring, Arm, ArmSummary, CovariateSet, EstimateRecord, EstimatorSpec, Method, MomentVector,
    TrialIpd, TrialLabel,
};
use crate::weights::WeightFit;

/// Reads IPD with header `id,trial,arm,<covariates...>,y`.
///
/// `arm_map` translates user arm labels onto A/B/C; labels not in the map
/// must already be A, B or C.
pub fn read_ipd_csv<R: Read>(reader: R, arm_map: &HashMap<String, Arm>) -> Result<TrialIpd> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let expect = |pos: usize, name: &str| -> Result<()> {
        if headers.get(pos).map(String::as_str) != Some(name) {
            return Err(Error::Validation {
                row: 0,
                field: name.into(),
                message: format!("expected header `id,trial,arm,<covariates...>,y`, got {headers:?}"),
            });
        }
        Ok(())
    };
    expect(0, "id")?;
    expect(1, "trial")?;
    expect(2, "arm")?;
    if headers.len() < 4 || headers.last().map(String::as_str) != Some("y") {
        return Err(Error::Validation {
            row: 0,
            field: "y".into(),
            message: "last column must be `y`".into(),
        });
    }
    let names: Vec<String> = headers[3..headers.len() - 1].to_vec();
    let mut ids = Vec::new();
    let mut arms = Vec::new();
    let mut outcome = Vec::new();
    let mut values = Vec::new();
    let mut trial_id: Option<String> = None;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |j: usize| rec.get(j).unwrap_or("");
        let num = |j: usize| -> Result<f64> {
            field(j).parse::<f64>().map_err(|_| Error::Validation {
                row,
                field: headers[j].clone(),
                message: format!("not a number: `{}`", field(j)),
            })
        };
        ids.push(field(0).parse::<u64>().map_err(|_| Error::Validation {
            row,
            field: "id".into(),
            message: format!("not an integer id: `{}`", field(0)),
        })?);
        let trial = field(1).to_string();
        match &trial_id {
            None => trial_id = Some(trial),
            Some(t) if *t != trial => {
                return Err(Error::Validation {
                    row,
                    field: "trial".into(),
                    message: format!("file mixes trials `{t}` and `{trial}`"),
                })
            }
            Some(_) => {}
        }
        let label = field(2);
        let arm = match arm_map.get(label) {
            Some(&a) => a,
            None => label.parse::<Arm>().map_err(|_| Error::Validation {
                row,
                field: "arm".into(),
                message: format!("unknown arm `{label}`"),
            })?,
        };
        arms.push(arm);
        for (j, header) in headers.iter().enumerate().take(headers.len() - 1).skip(3) {
            let v = num(j)?;
            if !v.is_finite() {
                return Err(Error::Validation {
                    row,
                    field: header.clone(),
                    message: "non-finite value".into(),
                });
            }
            values.push(v);
        }
        let y = num(headers.len() - 1)?;
        if !y.is_finite() {
            return Err(Error::Validation {
                row,
                field: "y".into(),
                message: "non-finite value".into(),
            });
        }
        outcome.push(y);
    }
    let n = arms.len();
    Ok(TrialIpd {
        trial_id: trial_id.unwrap_or_default(),
        ids,
        covariates: CovariateSet::new(names, values, n)?,
        arms,
        outcome,
    })
}

pub fn write_ipd_csv<W: Write>(writer: W, trial: &TrialIpd) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["id".to_string(), "trial".into(), "arm".into()];
    header.extend(trial.covariates.names().iter().cloned());
    header.push("y".into());
    w.write_record(&header)?;
    for i in 0..trial.len() {
        let mut rec = vec![
            trial.ids[i].to_string(),
            trial.trial_id.clone(),
            trial.arms[i].to_string(),
        ];
        rec.extend(trial.covariates.row(i).iter().map(|v| v.to_string()));
        rec.push(trial.outcome[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MomentEntry {
    mean: f64,
    variance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AgdFile {
    trial_id: String,
    moments: BTreeMap<String, MomentEntry>,
    n: usize,
    arms: BTreeMap<String, ArmSummary>,
}

pub fn aggregate_from_json(text: &str, arm_map: &HashMap<String, Arm>) -> Result<AggregateData> {
    let file: AgdFile = serde_json::from_str(text)?;
    let names: Vec<String> = file.moments.keys().cloned().collect();
    let means = file.moments.values().map(|m| m.mean).collect();
    let variances = if file.moments.values().all(|m| m.variance.is_some()) && !file.moments.is_empty() {
        Some(file.moments.values().map(|m| m.variance.unwrap_or_default()).collect())
    } else {
        None
    };
    let mut arms = BTreeMap::new();
    for (label, summary) in file.arms {
        let arm = match arm_map.get(&label) {
            Some(&a) => a,
            None => label.parse()?,
        };
        arms.insert(arm, summary);
    }
    let agd = AggregateData {
        trial_id: file.trial_id,
        moments: MomentVector {
            names,
            means,
            variances,
            n: file.n,
        },
        arms,
    };
    agd.validate()?;
    Ok(agd)
}

pub fn aggregate_to_json(agd: &AggregateData) -> Result<String> {
    let moments = agd
        .moments
        .names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            (
                name.clone(),
                MomentEntry {
                    mean: agd.moments.means[j],
                    variance: agd.moments.variances.as_ref().map(|v| v[j]),
                },
            )
        })
        .collect();
    let file = AgdFile {
        trial_id: agd.trial_id.clone(),
        moments,
        n: agd.moments.n,
        arms: agd.arms.iter().map(|(a, s)| (a.to_string(), *s)).collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dgm: u8,
    pub iteration: usize,
    pub method: Method,
    pub anchoring: Anchoring,
    pub adjustment_set: String,
    pub estimate: Option<f64>,
    pub se: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub ess: f64,
    pub converged: bool,
    pub seed: u64,
}

impl ResultRow {
    pub fn from_record(dgm: u8, r: &EstimateRecord) -> Self {
        Self {
            dgm,
            iteration: r.iteration,
            method: r.spec.method,
            anchoring: r.spec.anchoring,
            adjustment_set: r.spec.adjustment_label(),
            estimate: r.delta_hat,
            se: r.se,
            ci_low: r.ci_low,
            ci_high: r.ci_high,
            ess: r.ess,
            converged: r.converged,
            seed: r.seed,
        }
    }

    pub fn spec(&self) -> EstimatorSpec {
        EstimatorSpec {
            method: self.method,
            anchoring: self.anchoring,
            adjustment_set: EstimatorSpec::parse_adjustment(&self.adjustment_set),
        }
    }

    pub fn to_record(&self) -> EstimateRecord {
        EstimateRecord {
            spec: self.spec(),
            delta_hat: self.estimate,
            se: self.se,
            ci_low: self.ci_low,
            ci_high: self.ci_high,
            ess: self.ess,
            converged: self.converged,
            iteration: self.iteration,
            seed: self.seed,
            link: "identity".into(),
            diagnostic: None,
        }
    }
}

pub fn read_results_csv<R: Read>(reader: R) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn results_writer<W: Write>(writer: W) -> csv::Writer<W> {
    csv::Writer::from_writer(writer)
}

/// `dgm -> true effect`, keyed by the DGM number as a string.
pub fn truth_to_json(truths: &BTreeMap<u8, f64>) -> Result<String> {
    let map: BTreeMap<String, f64> = truths.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    Ok(serde_json::to_string_pretty(&map)?)
}

pub fn truth_from_json(text: &str) -> Result<BTreeMap<u8, f64>> {
    let map: BTreeMap<String, f64> = serde_json::from_str(text)?;
    map.into_iter()
        .map(|(k, v)| {
            k.trim_start_matches("dgm")
                .parse::<u8>()
                .map(|id| (id, v))
                .map_err(|_| Error::Invalid(format!("bad DGM key `{k}` in truth file")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub dgm: u8,
    pub beta0: f64,
    pub n: usize,
    pub tolerance: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub id: u64,
    pub method: Method,
    pub weight: f64,
    pub propensity: Option<f64>,
}

/// Per-subject weights, rescaled to mean 1, for overlap diagnostics.
pub fn weight_rows(trial_a: &TrialIpd, fit: &WeightFit) -> Vec<WeightRow> {
    let normalized = fit.normalized();
    (0..trial_a.len())
        .map(|i| WeightRow {
            id: trial_a.ids[i],
            method: fit.method,
            weight: normalized[i],
            propensity: fit.propensity.as_ref().map(|p| p[i]),
        })
        .collect()
}

pub fn write_csv_rows<W: Write, T: Serialize>(writer: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Replicate dump row with the study cell it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReplicateRow {
    pub dgm: u8,
    pub iteration: usize,
    pub method: Method,
    pub anchoring: Anchoring,
    pub adjustment_set: String,
    pub replicate: usize,
    pub trial: TrialLabel,
    pub arm: Arm,
    pub mean: Option<f64>,
    pub converged: bool,
}

impl CellReplicateRow {
    pub fn new(dgm: u8, iteration: usize, spec: &EstimatorSpec, row: ReplicateRow) -> Self {
        Self {
            dgm,
            iteration,
            method: spec.method,
            anchoring: spec.anchoring,
            adjustment_set: spec.adjustment_label(),
            replicate: row.replicate,
            trial: row.trial,
            arm: row.arm,
            mean: row.mean,
            converged: row.converged,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryFile {
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub cells: Vec<MetricsCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongRow {
    pub metric: String,
    pub cell: String,
    pub value: f64,
}

/// Plot-ready long format: one row per (metric, cell).
pub fn long_rows(cells: &[MetricsCell]) -> Vec<LongRow> {
    let mut out = Vec::new();
    for c in cells {
        let cell = c.label();
        let metrics = [
            ("bias", c.bias),
            ("rmse", c.rmse),
            ("vr", c.vr),
            ("coverage", c.coverage),
            ("n_total", Some(c.n_total as f64)),
            ("n_converged", Some(c.n_converged as f64)),
            ("truth", Some(c.truth)),
        ];
        for (metric, value) in metrics {
            if let Some(value) = value {
                out.push(LongRow {
                    metric: metric.into(),
                    cell: cell.clone(),
                    value,
                });
            }
        }
    }
    out
}

pub fn read_to_string(path: &Path) -> Result<String> {
    let mut s = String::new();
    BufReader::new(File::open(path)?).read_to_string(&mut s)?;
    Ok(s)
}

pub fn write_string(path: &Path, contents: &str) -> Result<()> {
    let mut f = File::create(path)?;
    f.write_all(contents.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}
