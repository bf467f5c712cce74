//! Image-domain Gaussian system model and iterative Yang (iY) correction.

use crate::error::{PvcError, Result};
use crate::losses::imbv;
use crate::volume::{Label, TemplateSet, Volume};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Separable Gaussian point spread function.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsfModel {
    /// Full width at half maximum per axis (D, H, W), in mm. Zero means no
    /// blur along that axis.
    pub fwhm_mm: [f64; 3],
    /// Kernel half-width in standard deviations.
    pub truncation: f64,
}

impl Default for PsfModel {
    fn default() -> Self {
        PsfModel::isotropic(10.0)
    }
}

/// `FWHM = 2 sqrt(2 ln 2) sigma`.
pub fn fwhm_to_sigma(fwhm: f64) -> f64 {
    fwhm / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt())
}

impl PsfModel {
    pub fn isotropic(fwhm_mm: f64) -> Self {
        PsfModel {
            fwhm_mm: [fwhm_mm; 3],
            truncation: 4.0,
        }
    }

    pub fn delta() -> Self {
        Self::isotropic(0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fwhm_mm.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
            return Err(PvcError::Config(format!("PSF FWHM must be finite and >= 0, got {:?}", self.fwhm_mm)));
        }
        if !(self.truncation.is_finite() && self.truncation > 0.0) {
            return Err(PvcError::Config(format!("PSF truncation must be > 0, got {}", self.truncation)));
        }
        Ok(())
    }

    pub fn is_delta(&self) -> bool {
        self.fwhm_mm.iter().all(|&f| f == 0.0)
    }

    /// Normalised 1D kernel for one axis, centre tap at index `radius`.
    pub fn kernel(&self, axis: usize, spacing_mm: f64) -> Vec<f64> {
        let sigma = fwhm_to_sigma(self.fwhm_mm[axis]) / spacing_mm;
        if sigma == 0.0 {
            return vec![1.0];
        }
        let radius = (self.truncation * sigma).ceil() as isize;
        let taps: Vec<f64> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f64 = taps.iter().sum();
        taps.into_iter().map(|t| t / total).collect()
    }
}

/// Symmetric (edge-duplicating) reflection of `i` into `0..len`.
pub(crate) fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn convolve_axis(data: &[f64], dims: [usize; 3], axis: usize, taps: &[f64]) -> Vec<f64> {
    if taps.len() == 1 {
        return data.iter().map(|v| v * taps[0]).collect();
    }
    let strides = [dims[1] * dims[2], dims[2], 1];
    let (len, stride) = (dims[axis], strides[axis]);
    let radius = (taps.len() / 2) as isize;
    let mut out = vec![0.0; data.len()];
    let mut line = vec![0.0; len];
    for base in 0..data.len() {
        if (base / stride) % len != 0 {
            continue;
        }
        for (i, l) in line.iter_mut().enumerate() {
            *l = data[base + i * stride];
        }
        for i in 0..len {
            let mut acc = 0.0;
            for (t, w) in taps.iter().enumerate() {
                acc += w * line[reflect(i as isize + t as isize - radius, len)];
            }
            out[base + i * stride] = acc;
        }
    }
    out
}

/// Separable Gaussian blur with symmetric boundary reflection.
pub fn blur(v: &Volume, psf: &PsfModel) -> Result<Volume> {
    psf.validate()?;
    let mut data = v.data.clone();
    for axis in 0..3 {
        let k = psf.kernel(axis, v.spacing[axis]);
        if k.len() > 1 {
            data = convolve_axis(&data, v.dims, axis, &k);
        }
    }
    Ok(v.with_data(data))
}

/// Mean activity per label present in `t`. Myocardium and blood pool must be
/// present.
pub fn region_means(v: &Volume, t: &TemplateSet) -> Result<BTreeMap<Label, f64>> {
    t.check_matches(v)?;
    let mut acc: BTreeMap<Label, (f64, usize)> = BTreeMap::new();
    for (x, &l) in v.data.iter().zip(&t.labels) {
        let e = acc.entry(l).or_insert((0.0, 0));
        e.0 += x;
        e.1 += 1;
    }
    for required in [Label::Myocardium, Label::BloodPool] {
        if !acc.contains_key(&required) {
            return Err(PvcError::DegenerateRegion(format!("{} region is empty", required.name())));
        }
    }
    Ok(acc.into_iter().map(|(l, (s, n))| (l, s / n as f64)).collect())
}

/// Piecewise-constant volume carrying `means[label]` on every voxel of that label.
pub fn template_volume(t: &TemplateSet, means: &BTreeMap<Label, f64>, spacing: [f64; 3]) -> Volume {
    Volume {
        dims: t.dims,
        spacing,
        data: t.labels.iter().map(|l| means.get(l).copied().unwrap_or(0.0)).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IyOptions {
    pub iterations: usize,
    /// Divisor floor relative to the template maximum.
    pub epsilon: f64,
    /// Upper clamp on the correction factor (lower clamp is 0).
    pub max_factor: f64,
}

impl Default for IyOptions {
    fn default() -> Self {
        IyOptions {
            iterations: 10,
            epsilon: 1e-8,
            max_factor: 10.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct IyResult {
    pub corrected: Volume,
    /// Region means of every iterate, starting with the observed volume.
    pub means: Vec<BTreeMap<Label, f64>>,
    /// Voxels whose factor hit `max_factor` in the last iteration.
    pub clamped_voxels: usize,
    pub max_factor: f64,
}

/// Iterative Yang: `f_{k+1} = observed * T_k / max(blur(T_k), eps * max T_k)`,
/// where `T_k` is the piecewise-constant template of `f_k`'s region means and
/// the factor is clamped to `[0, max_factor]`.
pub fn iy_correct(observed: &Volume, t: &TemplateSet, psf: &PsfModel, opts: &IyOptions) -> Result<IyResult> {
    psf.validate()?;
    if !(opts.epsilon > 0.0) {
        return Err(PvcError::Config(format!("epsilon must be > 0, got {}", opts.epsilon)));
    }
    if !(opts.max_factor > 0.0) {
        return Err(PvcError::Config(format!("max_factor must be > 0, got {}", opts.max_factor)));
    }
    t.check_matches(observed)?;
    let mut f = observed.clone();
    let mut history = vec![region_means(&f, t)?];
    let mut clamped = 0;
    for _ in 0..opts.iterations {
        let means = history.last().expect("history starts non-empty");
        let template = template_volume(t, means, observed.spacing);
        let blurred = blur(&template, psf)?;
        let floor = opts.epsilon * template.max();
        clamped = 0;
        let data = observed
            .data
            .iter()
            .zip(&template.data)
            .zip(&blurred.data)
            .map(|((&o, &tv), &bv)| {
                let denom = bv.max(floor);
                let c = if denom > 0.0 { tv / denom } else { 0.0 };
                if c >= opts.max_factor {
                    clamped += 1;
                }
                o * c.clamp(0.0, opts.max_factor)
            })
            .collect();
        f = observed.with_data(data);
        history.push(region_means(&f, t)?);
    }
    Ok(IyResult {
        corrected: f,
        means: history,
        clamped_voxels: clamped,
        max_factor: opts.max_factor,
    })
}

/// Moves every label by `shift` voxels (D, H, W); vacated voxels become background.
pub fn shift_templates(t: &TemplateSet, shift: [isize; 3]) -> TemplateSet {
    let [d, h, w] = t.dims;
    let mut labels = vec![Label::Background; t.labels.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let src = [z as isize - shift[0], y as isize - shift[1], x as isize - shift[2]];
                if src.iter().zip(&t.dims).all(|(&s, &n)| s >= 0 && (s as usize) < n) {
                    let si = (src[0] as usize * h + src[1] as usize) * w + src[2] as usize;
                    labels[(z * h + y) * w + x] = t.labels[si];
                }
            }
        }
    }
    TemplateSet { dims: t.dims, labels }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MismatchReport {
    pub shift: [isize; 3],
    /// IMBV of the aligned-template correction (measured with true templates).
    pub aligned_imbv: f64,
    /// IMBV of the shifted-template correction (measured with true templates).
    pub shifted_imbv: f64,
    /// `shifted_imbv - aligned_imbv`.
    pub difference: f64,
    pub true_imbv: Option<f64>,
    pub aligned_abs_error: Option<f64>,
    pub shifted_abs_error: Option<f64>,
    pub iterations: usize,
    pub max_factor: f64,
}

/// Runs iY twice, with the true templates and with templates shifted by
/// `shift`, and compares the IMBV of both results on the true anatomy.
pub fn iy_mismatch_demo(
    observed: &Volume,
    templates: &TemplateSet,
    shift: [isize; 3],
    psf: &PsfModel,
    opts: &IyOptions,
    true_imbv: Option<f64>,
) -> Result<(Volume, MismatchReport)> {
    let aligned = iy_correct(observed, templates, psf, opts)?;
    let wrong = shift_templates(templates, shift);
    let shifted = iy_correct(observed, &wrong, psf, opts)?;
    let a = imbv(&aligned.corrected, templates)?;
    let s = imbv(&shifted.corrected, templates)?;
    let report = MismatchReport {
        shift,
        aligned_imbv: a,
        shifted_imbv: s,
        difference: s - a,
        true_imbv,
        aligned_abs_error: true_imbv.map(|t| (a - t).abs()),
        shifted_abs_error: true_imbv.map(|t| (s - t).abs()),
        iterations: opts.iterations,
        max_factor: opts.max_factor,
    };
    Ok((shifted.corrected, report))
}
