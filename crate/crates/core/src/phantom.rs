//! Synthetic cardiac phantoms: ellipsoidal organ templates, piecewise-constant
//! activity, Gaussian blur and Poisson noise, plus rotation augmentation and
//! dataset splitting.

use crate::error::{PvcError, Result};
use crate::losses::imbv;
use crate::pvc::{blur, PsfModel};
use crate::volume::{Label, TemplateSet, Volume};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

/// Axis-aligned ellipsoid in mm, centre relative to the grid centre.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center_mm: [f64; 3],
    pub semi_axes_mm: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center_mm[a]) / self.semi_axes_mm[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    fn grown(&self, by_mm: f64) -> Ellipsoid {
        Ellipsoid {
            center_mm: self.center_mm,
            semi_axes_mm: self.semi_axes_mm.map(|s| s + by_mm),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Activities {
    pub blood_pool: f64,
    pub myocardium: f64,
    pub liver: f64,
    pub lung: f64,
    pub background: f64,
}

impl Default for Activities {
    fn default() -> Self {
        Activities {
            blood_pool: 1.0,
            myocardium: 0.25,
            liver: 0.35,
            lung: 0.05,
            background: 0.1,
        }
    }
}

impl Activities {
    pub fn of(&self, l: Label) -> f64 {
        match l {
            Label::Background => self.background,
            Label::Myocardium => self.myocardium,
            Label::BloodPool => self.blood_pool,
            Label::Liver => self.liver,
            Label::Lung => self.lung,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    /// Left-ventricular cavity; the myocardium is the shell around it.
    pub blood_pool: Ellipsoid,
    pub myocardium_thickness_mm: f64,
    pub liver: Ellipsoid,
    pub lungs: [Ellipsoid; 2],
    pub activities: Activities,
    pub psf: PsfModel,
    /// Expected counts per unit activity; 0 disables noise.
    pub noise_scale: f64,
    /// Relative per-case perturbation of geometry and activities; 0 disables it.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [32, 48, 48],
            spacing_mm: [4.0; 3],
            blood_pool: Ellipsoid {
                center_mm: [0.0, -4.0, 8.0],
                semi_axes_mm: [22.0, 16.0, 16.0],
            },
            myocardium_thickness_mm: 10.0,
            liver: Ellipsoid {
                center_mm: [40.0, 24.0, -36.0],
                semi_axes_mm: [26.0, 40.0, 44.0],
            },
            lungs: [
                Ellipsoid {
                    center_mm: [-4.0, -8.0, 60.0],
                    semi_axes_mm: [50.0, 44.0, 30.0],
                },
                Ellipsoid {
                    center_mm: [-4.0, -8.0, -56.0],
                    semi_axes_mm: [50.0, 44.0, 30.0],
                },
            ],
            activities: Activities::default(),
            psf: PsfModel::isotropic(10.0),
            noise_scale: 100.0,
            jitter: 0.1,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    /// Noise-free, unperturbed phantom.
    pub fn noiseless() -> Self {
        PhantomSpec {
            noise_scale: 0.0,
            jitter: 0.0,
            ..Default::default()
        }
    }

    /// 50 x 70 x 70 grid.
    pub fn full_size() -> Self {
        PhantomSpec {
            dims: [50, 70, 70],
            ..Default::default()
        }
    }

    /// 12 x 20 x 20 field of view around a smaller heart, for fast training.
    pub fn compact() -> Self {
        PhantomSpec {
            dims: [12, 20, 20],
            blood_pool: Ellipsoid {
                center_mm: [0.0, -2.0, 2.0],
                semi_axes_mm: [12.0, 10.0, 10.0],
            },
            myocardium_thickness_mm: 8.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(PvcError::Config(format!("phantom dims must be positive, got {:?}", self.dims)));
        }
        if self.spacing_mm.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(PvcError::Config(format!("spacing must be positive, got {:?}", self.spacing_mm)));
        }
        let a = &self.activities;
        for (name, v) in [
            ("blood_pool", a.blood_pool),
            ("myocardium", a.myocardium),
            ("liver", a.liver),
            ("lung", a.lung),
            ("background", a.background),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(PvcError::Config(format!("activity {name} must be >= 0, got {v}")));
            }
        }
        if !(a.blood_pool > 0.0) {
            return Err(PvcError::Config("blood pool activity must be positive".into()));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(PvcError::Config(format!("noise_scale must be >= 0, got {}", self.noise_scale)));
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return Err(PvcError::Config(format!("jitter must be in [0, 0.5), got {}", self.jitter)));
        }
        if !(self.myocardium_thickness_mm > 0.0) {
            return Err(PvcError::Config("myocardium thickness must be positive".into()));
        }
        self.psf.validate()
    }

    /// Geometry and activities perturbed by `jitter` using the spec seed.
    fn perturbed(&self, rng: &mut ChaCha8Rng) -> PhantomSpec {
        let mut s = self.clone();
        if self.jitter == 0.0 {
            return s;
        }
        let j = self.jitter;
        let factor = |rng: &mut ChaCha8Rng| 1.0 + rng.random_range(-j..=j);
        let shift = self.spacing_mm.map(|sp| rng.random_range(-sp..=sp));
        for a in 0..3 {
            s.blood_pool.center_mm[a] += shift[a];
            s.blood_pool.semi_axes_mm[a] *= factor(rng);
            s.liver.semi_axes_mm[a] *= factor(rng);
        }
        s.myocardium_thickness_mm *= factor(rng);
        let act = &mut s.activities;
        act.blood_pool *= factor(rng);
        act.myocardium *= factor(rng);
        act.liver *= factor(rng);
        act.lung *= factor(rng);
        act.background *= factor(rng);
        s
    }

    /// Label map: blood pool over myocardium over liver over lung.
    pub fn templates(&self) -> Result<TemplateSet> {
        let [d, h, w] = self.dims;
        let centre = [d, h, w].map(|n| (n as f64 - 1.0) / 2.0);
        let outer = self.blood_pool.grown(self.myocardium_thickness_mm);
        let mut labels = Vec::with_capacity(d * h * w);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let idx = [z, y, x];
                    let p: [f64; 3] = std::array::from_fn(|a| (idx[a] as f64 - centre[a]) * self.spacing_mm[a]);
                    labels.push(if self.blood_pool.contains(p) {
                        Label::BloodPool
                    } else if outer.contains(p) {
                        Label::Myocardium
                    } else if self.liver.contains(p) {
                        Label::Liver
                    } else if self.lungs.iter().any(|l| l.contains(p)) {
                        Label::Lung
                    } else {
                        Label::Background
                    });
                }
            }
        }
        let t = TemplateSet::new(self.dims, labels)?;
        for l in [Label::Myocardium, Label::BloodPool] {
            if t.count(l) == 0 {
                return Err(PvcError::DegenerateRegion(format!("phantom has no {} voxels", l.name())));
            }
        }
        Ok(t)
    }
}

#[derive(Clone, Debug)]
pub struct PhantomCase {
    /// Spec after per-case perturbation.
    pub spec: PhantomSpec,
    pub templates: TemplateSet,
    pub truth: Volume,
    pub blurred: Volume,
    pub observed: Volume,
    pub ct: Volume,
    pub true_imbv: f64,
}

/// Assigns `activities` per label.
pub fn activity_map(t: &TemplateSet, activities: &Activities, spacing: [f64; 3]) -> Volume {
    Volume {
        dims: t.dims,
        spacing,
        data: t.labels.iter().map(|&l| activities.of(l)).collect(),
    }
}

/// Attenuation-like second channel derived from the labels.
pub fn ct_channel(t: &TemplateSet, spacing: [f64; 3]) -> Volume {
    let mu = |l: Label| match l {
        Label::Background => 0.35,
        Label::Myocardium => 0.45,
        Label::BloodPool => 0.55,
        Label::Liver => 0.5,
        Label::Lung => 0.02,
    };
    Volume {
        dims: t.dims,
        spacing,
        data: t.labels.iter().map(|&l| mu(l)).collect(),
    }
}

/// `Poisson(expected * scale) / scale` per voxel; `scale == 0` returns the input.
pub fn poisson_observe(expected: &Volume, scale: f64, rng: &mut impl Rng) -> Result<Volume> {
    if scale == 0.0 {
        return Ok(expected.clone());
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(PvcError::Config(format!("noise scale must be >= 0, got {scale}")));
    }
    let data = expected
        .data
        .iter()
        .map(|&m| {
            let lambda = m * scale;
            if lambda <= 0.0 {
                return Ok(0.0);
            }
            let p = Poisson::new(lambda).map_err(|e| PvcError::Config(format!("poisson mean {lambda}: {e}")))?;
            Ok(p.sample(rng) / scale)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(expected.with_data(data))
}

pub fn generate(spec: &PhantomSpec) -> Result<PhantomCase> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let spec = spec.perturbed(&mut rng);
    let templates = spec.templates()?;
    let truth = activity_map(&templates, &spec.activities, spec.spacing_mm);
    let blurred = blur(&truth, &spec.psf)?;
    let observed = poisson_observe(&blurred, spec.noise_scale, &mut rng)?;
    let ct = ct_channel(&templates, spec.spacing_mm);
    let true_imbv = imbv(&truth, &templates)?;
    Ok(PhantomCase {
        spec,
        templates,
        truth,
        blurred,
        observed,
        ct,
        true_imbv,
    })
}

/// `n` cases whose seeds are `base.seed + i`.
pub fn cohort(base: &PhantomSpec, n: usize) -> Result<Vec<PhantomCase>> {
    (0..n)
        .map(|i| {
            generate(&PhantomSpec {
                seed: base.seed.wrapping_add(i as u64),
                ..base.clone()
            })
        })
        .collect()
}

#[allow(clippy::redundant_guards)]
fn exact_cos_sin(degrees: f64) -> (f64, f64) {
    let turn = degrees.rem_euclid(360.0);
    match turn {
        t if t == 0.0 => (1.0, 0.0),
        t if t == 90.0 => (0.0, 1.0),
        t if t == 180.0 => (-1.0, 0.0),
        t if t == 270.0 => (0.0, -1.0),
        t => {
            let r = t.to_radians();
            (r.cos(), r.sin())
        }
    }
}

/// For each output voxel, the source coordinate under a rotation of
/// `degrees` about `axis` through the grid centre (index space).
fn source_coords(dims: [usize; 3], axis: usize, degrees: f64) -> impl Iterator<Item = [f64; 3]> {
    let (a, b) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (c, s) = exact_cos_sin(degrees);
    let centre = dims.map(|n| (n as f64 - 1.0) / 2.0);
    let [d, h, w] = dims;
    (0..d * h * w).map(move |i| {
        let p = [(i / (h * w)) as f64, ((i / w) % h) as f64, (i % w) as f64];
        let (u, v) = (p[a] - centre[a], p[b] - centre[b]);
        let mut q = p;
        q[a] = c * u + s * v + centre[a];
        q[b] = -s * u + c * v + centre[b];
        q
    })
}

fn inside(q: [f64; 3], dims: [usize; 3]) -> bool {
    const TOL: f64 = 1e-9;
    q.iter().zip(&dims).all(|(&c, &n)| c >= -TOL && c <= n as f64 - 1.0 + TOL)
}

/// Trilinear rotation; samples falling outside the grid are zero.
pub fn rotate_volume(v: &Volume, axis: usize, degrees: f64) -> Result<Volume> {
    if axis > 2 {
        return Err(PvcError::Config(format!("rotation axis must be 0, 1 or 2, got {axis}")));
    }
    let [d, h, w] = v.dims;
    let data = source_coords(v.dims, axis, degrees)
        .map(|q| {
            if !inside(q, v.dims) {
                return 0.0;
            }
            let q = [
                q[0].clamp(0.0, (d - 1) as f64),
                q[1].clamp(0.0, (h - 1) as f64),
                q[2].clamp(0.0, (w - 1) as f64),
            ];
            let base = q.map(|c| c.floor() as usize);
            let frac = [q[0] - base[0] as f64, q[1] - base[1] as f64, q[2] - base[2] as f64];
            let mut acc = 0.0;
            for corner in 0..8 {
                let off = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
                let mut weight = 1.0;
                let mut idx = [0usize; 3];
                for k in 0..3 {
                    weight *= if off[k] == 1 { frac[k] } else { 1.0 - frac[k] };
                    idx[k] = base[k] + off[k];
                }
                if weight == 0.0 || idx[0] >= d || idx[1] >= h || idx[2] >= w {
                    continue;
                }
                acc += weight * v.at(idx[0], idx[1], idx[2]);
            }
            acc
        })
        .collect();
    Ok(v.with_data(data))
}

/// Nearest-neighbour rotation; voxels from outside the grid become background.
pub fn rotate_labels(t: &TemplateSet, axis: usize, degrees: f64) -> Result<TemplateSet> {
    if axis > 2 {
        return Err(PvcError::Config(format!("rotation axis must be 0, 1 or 2, got {axis}")));
    }
    let [_, h, w] = t.dims;
    let labels = source_coords(t.dims, axis, degrees)
        .map(|q| {
            let r = q.map(|c| c.round());
            if !inside(r, t.dims) {
                return Label::Background;
            }
            t.labels[(r[0] as usize * h + r[1] as usize) * w + r[2] as usize]
        })
        .collect();
    TemplateSet::new(t.dims, labels)
}

/// `(axis, degrees)` pairs: every multiple of `step` in `(0, 360)` about
/// each of the three axes.
pub fn rotation_schedule(step_degrees: f64) -> Result<Vec<(usize, f64)>> {
    if !(step_degrees > 0.0 && step_degrees < 360.0) {
        return Err(PvcError::Config(format!("rotation step must be in (0, 360), got {step_degrees}")));
    }
    let per_axis = ((360.0 / step_degrees) - 1e-9).floor() as usize;
    Ok((0..3)
        .flat_map(|axis| (1..=per_axis).map(move |k| (axis, k as f64 * step_degrees)))
        .collect())
}

/// Original sample followed by every rotation in the schedule; channels
/// and labels receive the same rotation.
pub fn augment_rotations(
    channels: &[Volume],
    labels: &TemplateSet,
    step_degrees: f64,
) -> Result<Vec<(Vec<Volume>, TemplateSet)>> {
    let mut out = vec![(channels.to_vec(), labels.clone())];
    for (axis, deg) in rotation_schedule(step_degrees)? {
        let rotated = channels
            .iter()
            .map(|c| rotate_volume(c, axis, deg))
            .collect::<Result<Vec<_>>>()?;
        out.push((rotated, rotate_labels(labels, axis, deg)?));
    }
    Ok(out)
}

/// Shuffled train/validation/test indices. Split sizes are the rounded
/// weight shares of `n`; the test split takes the remainder.
pub fn dataset_split(n: usize, weights: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
        return Err(PvcError::Config(format!("split weights must be >= 0 with a positive sum, got {weights:?}")));
    }
    let total: f64 = weights.iter().sum();
    let train = (n as f64 * weights[0] / total).round() as usize;
    let val = ((n as f64 * weights[1] / total).round() as usize).min(n - train.min(n));
    let train = train.min(n);
    let sizes = [train, val, n - train - val];
    for (k, name) in ["train", "validation", "test"].iter().enumerate() {
        if weights[k] > 0.0 && sizes[k] == 0 {
            return Err(PvcError::Config(format!("{name} split is empty for {n} cases")));
        }
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = idx.split_off(train + val);
    let valid = idx.split_off(train);
    Ok([idx, valid, test])
}
