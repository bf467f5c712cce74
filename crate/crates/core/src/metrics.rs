//! Evaluation metrics, agreement statistics and cohort summaries.

use crate::error::{PvcError, Result};
use crate::losses::{imbv, ssim_forward, SsimParams};
use crate::volume::{TemplateSet, Volume};
use serde::{Deserialize, Serialize};
use std::path::Path;

fn same_grid(op: &'static str, y: &Volume, x: &Volume) -> Result<()> {
    if y.dims != x.dims {
        return Err(PvcError::dim(op, format!("dims differ: {:?} vs {:?}", y.dims, x.dims)));
    }
    Ok(())
}

pub fn mse(y: &Volume, x: &Volume) -> Result<f64> {
    same_grid("mse", y, x)?;
    Ok(y.data.iter().zip(&x.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64)
}

pub fn rmse(y: &Volume, x: &Volume) -> Result<f64> {
    Ok(mse(y, x)?.sqrt())
}

/// `20 log10(max Y) - 10 log10(MSE)`; `+inf` when the volumes are identical.
pub fn psnr(y: &Volume, x: &Volume) -> Result<f64> {
    let m = mse(y, x)?;
    let peak = y.max();
    if !(peak > 0.0) {
        return Err(PvcError::DegenerateRegion("PSNR reference has zero peak".into()));
    }
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * peak.log10() - 10.0 * m.log10())
}

/// Three-plane SSIM with range `max Y`; orientations too thin for the
/// window are skipped.
pub fn ssim_eval(y: &Volume, x: &Volume) -> Result<f64> {
    same_grid("ssim", y, x)?;
    let (yt, xt) = (y.to_tensor(), x.to_tensor());
    let p = SsimParams::for_reference(&yt).lenient();
    Ok(ssim_forward(&xt, &yt, &p)?.0)
}

/// Sub-volume made of the listed transverse slices, in order.
pub fn select_slices(v: &Volume, slices: &[usize]) -> Result<Volume> {
    let plane = v.dims[1] * v.dims[2];
    if slices.is_empty() {
        return Err(PvcError::MissingData("no slices selected".into()));
    }
    let mut data = Vec::with_capacity(slices.len() * plane);
    for &z in slices {
        if z >= v.dims[0] {
            return Err(PvcError::dim("select_slices", format!("slice {z} out of {}", v.dims[0])));
        }
        data.extend_from_slice(&v.data[z * plane..(z + 1) * plane]);
    }
    Ok(Volume {
        dims: [slices.len(), v.dims[1], v.dims[2]],
        spacing: v.spacing,
        data,
    })
}

/// Metrics of one method's output against one reference for one case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub method: String,
    pub reference: String,
    pub imbv: f64,
    pub ssim: f64,
    pub psnr_db: f64,
    pub rmse: f64,
}

/// IMBV of `x` on the full grid; SSIM, PSNR and RMSE against `y`, restricted
/// to heart-bearing slices when `heart_only` is set.
pub fn case_metrics(
    case_id: &str,
    method: &str,
    reference: &str,
    y: &Volume,
    x: &Volume,
    templates: &TemplateSet,
    heart_only: bool,
) -> Result<CaseMetrics> {
    same_grid("case_metrics", y, x)?;
    templates.check_matches(x)?;
    let (ys, xs) = if heart_only {
        let slices = templates.heart_slices();
        (select_slices(y, &slices)?, select_slices(x, &slices)?)
    } else {
        (y.clone(), x.clone())
    };
    Ok(CaseMetrics {
        case_id: case_id.to_string(),
        method: method.to_string(),
        reference: reference.to_string(),
        imbv: imbv(x, templates)?,
        ssim: ssim_eval(&ys, &xs)?,
        psnr_db: psnr(&ys, &xs)?,
        rmse: rmse(&ys, &xs)?,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; 0 for a single value.
pub fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|&x| if x == m { 0.0 } else { (x - m).powi(2) }).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    pub n: usize,
    /// Mean of `a - b`.
    pub bias: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
}

impl BlandAltman {
    pub fn contains(&self, diff: f64) -> bool {
        diff >= self.lower && diff <= self.upper
    }
}

pub fn bland_altman(a: &[f64], b: &[f64]) -> Result<BlandAltman> {
    if a.len() != b.len() {
        return Err(PvcError::dim("bland_altman", format!("lengths differ: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(PvcError::MissingData("Bland-Altman needs at least two pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (bias, sd) = (mean(&d), sample_sd(&d));
    Ok(BlandAltman {
        n: d.len(),
        bias,
        sd,
        lower: bias - 1.96 * sd,
        upper: bias + 1.96 * sd,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// `None` when `y` has zero variance.
    pub r_squared: Option<f64>,
    pub pearson: Option<f64>,
}

impl LinearFit {
    pub fn is_degenerate(&self) -> bool {
        self.pearson.is_none()
    }
}

/// Ordinary least squares `y = slope * x + intercept`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() {
        return Err(PvcError::dim("linear_fit", format!("lengths differ: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(PvcError::MissingData("linear fit needs at least two points".into()));
    }
    let (mx, my) = (mean(x), mean(y));
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(PvcError::DegenerateRegion("zero variance in x".into()));
    }
    let slope = sxy / sxx;
    let pearson = (syy > 0.0).then(|| (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0));
    Ok(LinearFit {
        slope,
        intercept: my - slope * mx,
        r_squared: pearson.map(|r| r * r),
        pearson,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub bland_altman: BlandAltman,
    /// Fit of the method values (y) on the reference values (x).
    pub fit: LinearFit,
}

/// Agreement of `method` values against `reference` values.
pub fn agreement(method: &[f64], reference: &[f64]) -> Result<AgreementReport> {
    Ok(AgreementReport {
        bland_altman: bland_altman(method, reference)?,
        fit: linear_fit(reference, method)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(v: &[f64]) -> MeanSd {
        MeanSd {
            mean: mean(v),
            sd: sample_sd(v),
        }
    }

    /// `mean±sd` with `decimals` digits, e.g. `0.209±0.042`.
    pub fn format(&self, decimals: usize) -> String {
        format!("{:.*}±{:.*}", decimals, self.mean, decimals, self.sd)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortRow {
    pub method: String,
    pub reference: String,
    pub n: usize,
    pub imbv: MeanSd,
    pub ssim: MeanSd,
    pub psnr_db: MeanSd,
    pub rmse: MeanSd,
}

impl CohortRow {
    /// Table cells: IMBV, SSIM and RMSE with three decimals, PSNR with two.
    pub fn cells(&self) -> [String; 4] {
        [
            self.imbv.format(3),
            self.ssim.format(3),
            self.psnr_db.format(2),
            self.rmse.format(3),
        ]
    }
}

/// One row per (method, reference) pair, in order of first appearance.
pub fn cohort_table(cases: &[CaseMetrics]) -> Result<Vec<CohortRow>> {
    if cases.is_empty() {
        return Err(PvcError::MissingData("cohort table needs at least one case".into()));
    }
    let mut keys: Vec<(String, String)> = Vec::new();
    for c in cases {
        let k = (c.method.clone(), c.reference.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    Ok(keys
        .into_iter()
        .map(|(method, reference)| {
            let rows: Vec<&CaseMetrics> = cases
                .iter()
                .filter(|c| c.method == method && c.reference == reference)
                .collect();
            let col = |f: fn(&CaseMetrics) -> f64| MeanSd::of(&rows.iter().map(|c| f(c)).collect::<Vec<_>>());
            CohortRow {
                n: rows.len(),
                imbv: col(|c| c.imbv),
                ssim: col(|c| c.ssim),
                psnr_db: col(|c| c.psnr_db),
                rmse: col(|c| c.rmse),
                method,
                reference,
            }
        })
        .collect())
}

/// Per-case IMBV values of `method`, ordered by case id of `reference_method`.
pub fn paired_imbv(cases: &[CaseMetrics], method: &str, reference_method: &str, reference: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let pick = |m: &str| -> Vec<&CaseMetrics> {
        cases.iter().filter(|c| c.method == m && c.reference == reference).collect()
    };
    let (a, b) = (pick(method), pick(reference_method));
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for r in &b {
        let m = a
            .iter()
            .find(|c| c.case_id == r.case_id)
            .ok_or_else(|| PvcError::MissingData(format!("no {method} row for case {}", r.case_id)))?;
        xs.push(m.imbv);
        ys.push(r.imbv);
    }
    Ok((xs, ys))
}

pub fn write_metrics_csv(path: &Path, rows: &[CaseMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<CaseMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<CaseMetrics>, _>>()?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedAgreement {
    pub method: String,
    pub versus: String,
    pub reference: String,
    pub report: AgreementReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub cohort: Vec<CohortRow>,
    pub agreement: Vec<NamedAgreement>,
}

/// Cohort table plus IMBV agreement of every method against `versus`
/// (per reference) when at least two cases are paired.
pub fn summarize(cases: &[CaseMetrics], versus: &str) -> Result<Summary> {
    let cohort = cohort_table(cases)?;
    let mut agreements = Vec::new();
    for row in &cohort {
        if row.method == versus {
            continue;
        }
        if !cohort.iter().any(|r| r.method == versus && r.reference == row.reference) {
            continue;
        }
        let (m, v) = paired_imbv(cases, &row.method, versus, &row.reference)?;
        if m.len() >= 2 && v.iter().any(|x| (x - v[0]).abs() > 0.0) {
            agreements.push(NamedAgreement {
                method: row.method.clone(),
                versus: versus.to_string(),
                reference: row.reference.clone(),
                report: agreement(&m, &v)?,
            });
        }
    }
    Ok(Summary {
        cohort,
        agreement: agreements,
    })
}
