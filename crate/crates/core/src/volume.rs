//! Scalar voxel grids and organ label maps.

use crate::error::{PvcError, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// A `[D, H, W]` grid of non-negative activity values with voxel spacing in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        check_dims(dims, spacing)?;
        if data.len() != dims.iter().product::<usize>() {
            return Err(PvcError::Contract(format!(
                "volume of dims {dims:?} needs {} values, got {}",
                dims.iter().product::<usize>(),
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(PvcError::Contract(format!("volume values must be finite and >= 0, found {v}")));
        }
        Ok(Volume { dims, spacing, data })
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], value: f64) -> Self {
        Volume {
            dims,
            spacing,
            data: vec![value; dims.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(z, y, x)]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Same grid, new values.
    pub fn with_data(&self, data: Vec<f64>) -> Volume {
        debug_assert_eq!(data.len(), self.data.len());
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            data,
        }
    }

    /// `[1, 1, D, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let [d, h, w] = self.dims;
        Tensor::from_parts(vec![1, 1, d, h, w], self.data.clone())
    }

    /// Stacks single-channel volumes (or channel groups) into
    /// `[N, C, D, H, W]`; `items[n]` lists the channels of item `n`.
    pub fn batch(items: &[Vec<&Volume>]) -> Result<Tensor> {
        let first = items
            .first()
            .and_then(|i| i.first())
            .ok_or_else(|| PvcError::MissingData("empty batch".into()))?;
        let c = items[0].len();
        let dims = first.dims;
        let mut data = Vec::with_capacity(items.len() * c * first.len());
        for item in items {
            if item.len() != c {
                return Err(PvcError::dim("batch", "items differ in channel count"));
            }
            for v in item {
                if v.dims != dims {
                    return Err(PvcError::dim("batch", format!("volume dims {:?} vs {dims:?}", v.dims)));
                }
                data.extend_from_slice(&v.data);
            }
        }
        Ok(Tensor::from_parts(vec![items.len(), c, dims[0], dims[1], dims[2]], data))
    }

    /// Splits `[N, 1, D, H, W]` into volumes; negative values are clamped to 0.
    pub fn unbatch(t: &Tensor, spacing: [f64; 3]) -> Result<Vec<Volume>> {
        let &[n, 1, d, h, w] = t.shape() else {
            return Err(PvcError::dim("unbatch", format!("expected [N, 1, D, H, W], got {:?}", t.shape())));
        };
        let vol = d * h * w;
        Ok((0..n)
            .map(|i| Volume {
                dims: [d, h, w],
                spacing,
                data: t.data()[i * vol..(i + 1) * vol].iter().map(|v| v.max(0.0)).collect(),
            })
            .collect())
    }
}

fn check_dims(dims: [usize; 3], spacing: [f64; 3]) -> Result<()> {
    if dims.contains(&0) {
        return Err(PvcError::Contract(format!("dims must be positive, got {dims:?}")));
    }
    if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(PvcError::Contract(format!("spacing must be positive, got {spacing:?}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Label {
    Background = 0,
    Myocardium = 1,
    BloodPool = 2,
    Liver = 3,
    Lung = 4,
}

impl Label {
    pub const ALL: [Label; 5] = [
        Label::Background,
        Label::Myocardium,
        Label::BloodPool,
        Label::Liver,
        Label::Lung,
    ];

    pub fn code(self) -> u16 {
        self as u16
    }

    pub fn from_code(code: u16) -> Result<Label> {
        Label::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| PvcError::Format(format!("unknown label code {code}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Background => "background",
            Label::Myocardium => "myocardium",
            Label::BloodPool => "blood_pool",
            Label::Liver => "liver",
            Label::Lung => "lung",
        }
    }
}

/// One label per voxel of a `[D, H, W]` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateSet {
    pub dims: [usize; 3],
    pub labels: Vec<Label>,
}

impl TemplateSet {
    pub fn new(dims: [usize; 3], labels: Vec<Label>) -> Result<Self> {
        if dims.contains(&0) || labels.len() != dims.iter().product::<usize>() {
            return Err(PvcError::Contract(format!(
                "label map of {} voxels does not fit dims {dims:?}",
                labels.len()
            )));
        }
        Ok(TemplateSet { dims, labels })
    }

    pub fn from_codes(dims: [usize; 3], codes: &[u16]) -> Result<Self> {
        let labels = codes.iter().map(|&c| Label::from_code(c)).collect::<Result<Vec<_>>>()?;
        Self::new(dims, labels)
    }

    pub fn codes(&self) -> Vec<u16> {
        self.labels.iter().map(|l| l.code()).collect()
    }

    /// Flat voxel indices carrying `label`.
    pub fn mask(&self, label: Label) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == label).then_some(i))
            .collect()
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn check_matches(&self, v: &Volume) -> Result<()> {
        if self.dims != v.dims {
            return Err(PvcError::dim(
                "templates",
                format!("label map dims {:?} differ from volume dims {:?}", self.dims, v.dims),
            ));
        }
        Ok(())
    }

    /// Transverse (first-axis) slices containing myocardium or blood pool.
    pub fn heart_slices(&self) -> Vec<usize> {
        let plane = self.dims[1] * self.dims[2];
        (0..self.dims[0])
            .filter(|&z| {
                self.labels[z * plane..(z + 1) * plane]
                    .iter()
                    .any(|&l| matches!(l, Label::Myocardium | Label::BloodPool))
            })
            .collect()
    }
}
