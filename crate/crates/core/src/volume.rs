//! Core voxel-grid types: scalar volumes, landmark sets and dense
//! displacement fields.
//!
//! Voxel storage is x-fastest: the voxel at `(i, j, k)` lives at index
//! `i + nx * (j + ny * k)`. Displacements are kept in voxel units of the
//! owning grid and converted to mm only at evaluation time.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntensityUnit {
    Hu,
    Normalized,
    Arbitrary,
}

/// A 3D scalar voxel grid with physical spacing in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3 {
    dims: [usize; 3],
    spacing: [f32; 3],
    voxels: Vec<f32>,
    intensity_unit: IntensityUnit,
}

impl Volume3 {
    pub fn new(
        dims: [usize; 3],
        spacing: [f32; 3],
        voxels: Vec<f32>,
        intensity_unit: IntensityUnit,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("volume dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Invalid(format!(
                "spacing components must be strictly positive, got {spacing:?}"
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        if voxels.len() != n {
            return Err(Error::Dimension(format!(
                "voxel count {} does not match dims {:?} (expected {})",
                voxels.len(),
                dims,
                n
            )));
        }
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("volume contains non-finite voxels".into()));
        }
        Ok(Self {
            dims,
            spacing,
            voxels,
            intensity_unit,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn intensity_unit(&self) -> IntensityUnit {
        self.intensity_unit
    }

    pub fn with_unit(mut self, unit: IntensityUnit) -> Self {
        self.intensity_unit = unit;
        self
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.voxels[self.index(i, j, k)]
    }

    /// Sample with edge-replicated (clamped) integer coordinates.
    #[inline]
    pub fn get_clamped(&self, i: i64, j: i64, k: i64) -> f32 {
        let ci = i.clamp(0, self.dims[0] as i64 - 1) as usize;
        let cj = j.clamp(0, self.dims[1] as i64 - 1) as usize;
        let ck = k.clamp(0, self.dims[2] as i64 - 1) as usize;
        self.get(ci, cj, ck)
    }

    /// Trilinear sample at a continuous voxel coordinate; out-of-bounds
    /// coordinates are clamped to the grid. Exact at integer coordinates.
    pub fn trilinear(&self, p: [f32; 3]) -> f32 {
        let (c, f, d) = corner_and_frac(p, self.dims);
        if f == [0.0, 0.0, 0.0] {
            return self.get(c[0], c[1], c[2]);
        }
        let [i0, j0, k0] = c;
        let [i1, j1, k1] = d;
        let [fx, fy, fz] = f;
        let v000 = self.get(i0, j0, k0);
        let v100 = self.get(i1, j0, k0);
        let v010 = self.get(i0, j1, k0);
        let v110 = self.get(i1, j1, k0);
        let v001 = self.get(i0, j0, k1);
        let v101 = self.get(i1, j0, k1);
        let v011 = self.get(i0, j1, k1);
        let v111 = self.get(i1, j1, k1);
        lerp(
            lerp(lerp(v000, v100, fx), lerp(v010, v110, fx), fy),
            lerp(lerp(v001, v101, fx), lerp(v011, v111, fx), fy),
            fz,
        )
    }

    /// Resample onto an isotropic-or-not target spacing by trilinear
    /// interpolation; the physical extent is preserved up to rounding.
    pub fn resample(&self, new_spacing: [f32; 3]) -> Result<Volume3> {
        if new_spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Invalid("resample spacing must be positive".into()));
        }
        let mut new_dims = [0usize; 3];
        for a in 0..3 {
            let extent = self.dims[a] as f32 * self.spacing[a];
            new_dims[a] = ((extent / new_spacing[a]).round() as usize).max(1);
        }
        let scale = [
            new_spacing[0] / self.spacing[0],
            new_spacing[1] / self.spacing[1],
            new_spacing[2] / self.spacing[2],
        ];
        let mut voxels = vec![0f32; new_dims[0] * new_dims[1] * new_dims[2]];
        for k in 0..new_dims[2] {
            for j in 0..new_dims[1] {
                for i in 0..new_dims[0] {
                    let p = [i as f32 * scale[0], j as f32 * scale[1], k as f32 * scale[2]];
                    voxels[i + new_dims[0] * (j + new_dims[1] * k)] = self.trilinear(p);
                }
            }
        }
        Volume3::new(new_dims, new_spacing, voxels, self.intensity_unit)
    }
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

#[inline]
fn corner_and_frac(p: [f32; 3], dims: [usize; 3]) -> ([usize; 3], [f32; 3], [usize; 3]) {
    let mut c = [0usize; 3];
    let mut f = [0f32; 3];
    let mut d = [0usize; 3];
    for a in 0..3 {
        let max = (dims[a] - 1) as f32;
        let x = p[a].max(0.0).min(max);
        let i0 = x.floor();
        c[a] = i0 as usize;
        f[a] = x - i0;
        d[a] = (c[a] + 1).min(dims[a] - 1);
    }
    (c, f, d)
}

/// Continuous voxel-coordinate landmarks, one point per annotation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LandmarkSet {
    pub points: Vec<[f32; 3]>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f32; 3]>) -> Self {
        Self { points }
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    /// Shift one-based coordinates (DIR-Lab convention) to the library's
    /// zero-based convention.
    pub fn to_zero_based(&self) -> LandmarkSet {
        LandmarkSet {
            points: self
                .points
                .iter()
                .map(|p| [p[0] - 1.0, p[1] - 1.0, p[2] - 1.0])
                .collect(),
        }
    }
}

/// Dense displacement field on a fixed voxel grid, vectors in voxel units.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseField {
    dims: [usize; 3],
    spacing: [f32; 3],
    vectors: Vec<[f32; 3]>,
}

impl DenseField {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], vectors: Vec<[f32; 3]>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("field dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Invalid("field spacing must be strictly positive".into()));
        }
        let n = dims[0] * dims[1] * dims[2];
        if vectors.len() != n {
            return Err(Error::Dimension(format!(
                "vector count {} does not match dims {:?}",
                vectors.len(),
                dims
            )));
        }
        if vectors.iter().any(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::Invalid("field contains non-finite components".into()));
        }
        Ok(Self {
            dims,
            spacing,
            vectors,
        })
    }

    pub fn zeros(dims: [usize; 3], spacing: [f32; 3]) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        DenseField::new(dims, spacing, vec![[0.0; 3]; n])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn vectors(&self) -> &[[f32; 3]] {
        &self.vectors
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> [f32; 3] {
        self.vectors[self.index(i, j, k)]
    }

    /// Trilinear sample of the vector field at a continuous voxel coordinate.
    pub fn trilinear(&self, p: [f32; 3]) -> [f32; 3] {
        let (c, f, d) = corner_and_frac(p, self.dims);
        if f == [0.0, 0.0, 0.0] {
            return self.get(c[0], c[1], c[2]);
        }
        let [i0, j0, k0] = c;
        let [i1, j1, k1] = d;
        let [fx, fy, fz] = f;
        let mut out = [0f32; 3];
        for a in 0..3 {
            let v000 = self.get(i0, j0, k0)[a];
            let v100 = self.get(i1, j0, k0)[a];
            let v010 = self.get(i0, j1, k0)[a];
            let v110 = self.get(i1, j1, k0)[a];
            let v001 = self.get(i0, j0, k1)[a];
            let v101 = self.get(i1, j0, k1)[a];
            let v011 = self.get(i0, j1, k1)[a];
            let v111 = self.get(i1, j1, k1)[a];
            out[a] = lerp(
                lerp(lerp(v000, v100, fx), lerp(v010, v110, fx), fy),
                lerp(lerp(v001, v101, fx), lerp(v011, v111, fx), fy),
                fz,
            );
        }
        out
    }
}
