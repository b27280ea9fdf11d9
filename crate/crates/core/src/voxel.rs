//! Dense label volumes and the connectivity / distance kernels built on them.
//!
//! Data is stored x-fastest, so ascending linear index is ascending (z, y, x)
//! order. Every routine that returns voxels returns them in that order.

use std::collections::VecDeque;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integer voxel coordinate `(x, y, z)`.
pub type Voxel = [usize; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelVolume {
    dims: [usize; 3],
    spacing: [f32; 3],
    data: Vec<u8>,
    class_count: u16,
}

impl VoxelVolume {
    /// All-zero volume with unit spacing.
    pub fn zeros(dims: [usize; 3], class_count: u16) -> Result<Self> {
        check_dims(dims)?;
        let class_count = class_count.max(1);
        Ok(Self {
            dims,
            spacing: [1.0; 3],
            data: vec![0; dims[0] * dims[1] * dims[2]],
            class_count,
        })
    }

    /// Empty binary mask (class_count 2).
    pub fn mask(dims: [usize; 3]) -> Result<Self> {
        Self::zeros(dims, 2)
    }

    pub fn from_data(dims: [usize; 3], spacing: [f32; 3], class_count: u16, data: Vec<u8>) -> Result<Self> {
        check_dims(dims)?;
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidSpacing(spacing));
        }
        let expected = dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(Error::DataLength { expected, got: data.len() });
        }
        if class_count == 0 {
            return Err(Error::LabelOutOfRange { label: 0, class_count });
        }
        if let Some(&label) = data.iter().find(|&&l| l as u16 >= class_count) {
            return Err(Error::LabelOutOfRange { label, class_count });
        }
        Ok(Self { dims, spacing, data, class_count })
    }

    /// Binary mask whose foreground is exactly the given linear indices.
    pub fn from_indices(dims: [usize; 3], indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut vol = Self::mask(dims)?;
        for i in indices {
            vol.data[i] = 1;
        }
        Ok(vol)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn set_spacing(&mut self, spacing: [f32; 3]) -> Result<()> {
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidSpacing(spacing));
        }
        self.spacing = spacing;
        Ok(())
    }

    pub fn class_count(&self) -> u16 {
        self.class_count
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, v: Voxel) -> usize {
        v[0] + self.dims[0] * (v[1] + self.dims[1] * v[2])
    }

    #[inline]
    pub fn coord(&self, idx: usize) -> Voxel {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    pub fn contains(&self, v: [i64; 3]) -> bool {
        (0..3).all(|a| v[a] >= 0 && (v[a] as usize) < self.dims[a])
    }

    #[inline]
    pub fn get(&self, v: Voxel) -> u8 {
        self.data[self.index(v)]
    }

    #[inline]
    pub fn at(&self, idx: usize) -> u8 {
        self.data[idx]
    }

    /// Label at a signed coordinate; out-of-grid reads as 0.
    #[inline]
    pub fn get_or_zero(&self, v: [i64; 3]) -> u8 {
        if self.contains(v) {
            self.get([v[0] as usize, v[1] as usize, v[2] as usize])
        } else {
            0
        }
    }

    pub fn set(&mut self, v: Voxel, label: u8) -> Result<()> {
        let idx = self.index(v);
        self.set_at(idx, label)
    }

    pub fn set_at(&mut self, idx: usize, label: u8) -> Result<()> {
        if label as u16 >= self.class_count {
            return Err(Error::LabelOutOfRange { label, class_count: self.class_count });
        }
        self.data[idx] = label;
        Ok(())
    }

    #[inline]
    pub fn is_foreground_at(&self, idx: usize) -> bool {
        self.data[idx] > 0
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&l| l > 0).count()
    }

    /// Linear indices of foreground voxels, ascending.
    pub fn foreground_indices(&self) -> Vec<usize> {
        (0..self.data.len()).filter(|&i| self.data[i] > 0).collect()
    }

    pub fn background_indices(&self) -> Vec<usize> {
        (0..self.data.len()).filter(|&i| self.data[i] == 0).collect()
    }

    pub fn foreground_voxels(&self) -> Vec<Voxel> {
        self.foreground_indices().into_iter().map(|i| self.coord(i)).collect()
    }

    /// Binary (0/1, class_count 2) copy.
    pub fn to_binary(&self) -> Self {
        Self {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&l| (l > 0) as u8).collect(),
            class_count: 2,
        }
    }

    pub fn same_dims(&self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimsMismatch(self.dims, other.dims));
        }
        Ok(())
    }

    /// True when every foreground voxel of `self` is foreground in `other`.
    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.dims == other.dims && self.data.iter().zip(&other.data).all(|(&a, &b)| a == 0 || b > 0)
    }

    /// Foreground of `self` minus foreground of `other`, as a binary mask.
    pub fn difference(&self, other: &Self) -> Result<Self> {
        self.same_dims(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| (a > 0 && b == 0) as u8).collect();
        Self::from_data(self.dims, self.spacing, 2, data)
    }

    /// Foreground union as a binary mask.
    pub fn union(&self, other: &Self) -> Result<Self> {
        self.same_dims(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| (a > 0 || b > 0) as u8).collect();
        Self::from_data(self.dims, self.spacing, 2, data)
    }

    pub(crate) fn raw_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }
}

fn check_dims(dims: [usize; 3]) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidDims(dims));
    }
    Ok(())
}

/// Foreground adjacency.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "6")]
    Six,
    #[default]
    #[serde(rename = "26")]
    TwentySix,
}

impl Connectivity {
    pub fn offsets(self) -> &'static [[i64; 3]] {
        match self {
            Connectivity::Six => &FACE_OFFSETS,
            Connectivity::TwentySix => &FULL_OFFSETS,
        }
    }
}

pub const FACE_OFFSETS: [[i64; 3]; 6] = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];

pub const FULL_OFFSETS: [[i64; 3]; 26] = {
    let mut out = [[0i64; 3]; 26];
    let mut n = 0;
    let mut dz = -1;
    while dz <= 1 {
        let mut dy = -1;
        while dy <= 1 {
            let mut dx = -1;
            while dx <= 1 {
                if !(dx == 0 && dy == 0 && dz == 0) {
                    out[n] = [dx, dy, dz];
                    n += 1;
                }
                dx += 1;
            }
            dy += 1;
        }
        dz += 1;
    }
    out
};

/// Calls `f` with the linear index of every in-grid neighbor of `idx`.
#[inline]
pub fn for_each_neighbor(dims: [usize; 3], idx: usize, conn: Connectivity, mut f: impl FnMut(usize)) {
    let nx = dims[0] as i64;
    let ny = dims[1] as i64;
    let nz = dims[2] as i64;
    let i = idx as i64;
    let x = i % nx;
    let y = (i / nx) % ny;
    let z = i / (nx * ny);
    for o in conn.offsets() {
        let (a, b, c) = (x + o[0], y + o[1], z + o[2]);
        if a >= 0 && a < nx && b >= 0 && b < ny && c >= 0 && c < nz {
            f((a + nx * (b + ny * c)) as usize);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentLabeling {
    /// Per-voxel component id, 0 on background.
    pub labels: Vec<u32>,
    pub count: usize,
    /// `sizes[k]` is the voxel count of component `k + 1`.
    pub sizes: Vec<usize>,
}

impl ComponentLabeling {
    /// Linear indices of each component, ascending within a component.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = self.sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
        for (i, &l) in self.labels.iter().enumerate() {
            if l > 0 {
                out[l as usize - 1].push(i);
            }
        }
        out
    }
}

/// Labels foreground components. Ids follow first-visit order of the scan.
pub fn connected_components(vol: &VoxelVolume, conn: Connectivity) -> ComponentLabeling {
    let dims = vol.dims();
    let mut labels = vec![0u32; vol.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..vol.len() {
        if !vol.is_foreground_at(start) || labels[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        labels[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(cur) = queue.pop_front() {
            size += 1;
            for_each_neighbor(dims, cur, conn, |n| {
                if labels[n] == 0 && vol.is_foreground_at(n) {
                    labels[n] = id;
                    queue.push_back(n);
                }
            });
        }
        sizes.push(size);
    }
    ComponentLabeling { count: sizes.len(), labels, sizes }
}

/// Number of 26-connected foreground components.
pub fn count_components(vol: &VoxelVolume) -> usize {
    connected_components(vol, Connectivity::TwentySix).count
}

/// Foreground voxels with at least one 6-neighbor that is background or off-grid.
pub fn boundary_voxels(vol: &VoxelVolume) -> Vec<Voxel> {
    let dims = vol.dims();
    let mut out = Vec::new();
    for idx in 0..vol.len() {
        if !vol.is_foreground_at(idx) {
            continue;
        }
        let v = vol.coord(idx);
        let on_edge = (0..3).any(|a| v[a] == 0 || v[a] + 1 == dims[a]);
        let mut exposed = on_edge;
        if !exposed {
            for_each_neighbor(dims, idx, Connectivity::Six, |n| {
                if !vol.is_foreground_at(n) {
                    exposed = true;
                }
            });
        }
        if exposed {
            out.push(v);
        }
    }
    out
}

/// Per-voxel real field on a volume grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceField {
    pub dims: [usize; 3],
    pub values: Vec<f64>,
}

impl DistanceField {
    #[inline]
    pub fn at(&self, idx: usize) -> f64 {
        self.values[idx]
    }

    pub fn get(&self, v: Voxel) -> f64 {
        self.values[v[0] + self.dims[0] * (v[1] + self.dims[1] * v[2])]
    }
}

const FAR: f64 = f64::INFINITY;

/// Exact squared Euclidean distance from every voxel center to the nearest
/// seed voxel center (separable lower-envelope transform). Non-seed lines
/// stay infinite until a later axis reaches a seed.
pub fn squared_distance_to(dims: [usize; 3], is_seed: impl Fn(usize) -> bool) -> Vec<f64> {
    let n = dims[0] * dims[1] * dims[2];
    let mut field: Vec<f64> = (0..n).map(|i| if is_seed(i) { 0.0 } else { FAR }).collect();
    let longest = *dims.iter().max().unwrap();
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut env = Envelope::with_capacity(longest);
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let len = dims[axis];
        let stride = strides[axis];
        let (o1, o2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for b in 0..dims[o2] {
            for a in 0..dims[o1] {
                let base = a * strides[o1] + b * strides[o2];
                for k in 0..len {
                    line[k] = field[base + k * stride];
                }
                env.transform(&line[..len], &mut out[..len]);
                for k in 0..len {
                    field[base + k * stride] = out[k];
                }
            }
        }
    }
    field
}

struct Envelope {
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Self { v: Vec::with_capacity(n), z: Vec::with_capacity(n + 1) }
    }

    fn transform(&mut self, f: &[f64], out: &mut [f64]) {
        self.v.clear();
        self.z.clear();
        for q in 0..f.len() {
            if !f[q].is_finite() {
                continue;
            }
            let qf = q as f64;
            loop {
                match self.v.last() {
                    None => {
                        self.v.push(q);
                        self.z.push(f64::NEG_INFINITY);
                        break;
                    }
                    Some(&p) => {
                        let pf = p as f64;
                        let s = ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * qf - 2.0 * pf);
                        if s <= *self.z.last().unwrap() {
                            self.v.pop();
                            self.z.pop();
                        } else {
                            self.v.push(q);
                            self.z.push(s);
                            break;
                        }
                    }
                }
            }
        }
        if self.v.is_empty() {
            out.iter_mut().for_each(|o| *o = FAR);
            return;
        }
        let mut k = 0;
        for (q, o) in out.iter_mut().enumerate() {
            let qf = q as f64;
            while k + 1 < self.v.len() && self.z[k + 1] < qf {
                k += 1;
            }
            let p = self.v[k];
            let d = qf - p as f64;
            *o = d * d + f[p];
        }
    }
}

/// Exact Euclidean distance (unit spacing) from each foreground voxel to the
/// nearest background voxel center; 0 on background.
pub fn distance_transform(vol: &VoxelVolume) -> Result<DistanceField> {
    if vol.data().iter().all(|&l| l > 0) {
        return Err(Error::NoBackground);
    }
    let sq = squared_distance_to(vol.dims(), |i| !vol.is_foreground_at(i));
    Ok(DistanceField { dims: vol.dims(), values: sq.into_iter().map(f64::sqrt).collect() })
}

/// Binary mask of voxels whose center lies within `radius` of some seed center.
pub fn dilate_ball(seeds: &[Voxel], radius: f64, dims: [usize; 3]) -> Result<VoxelVolume> {
    check_dims(dims)?;
    if !(radius >= 0.0) {
        return Err(Error::NegativeRadius(radius));
    }
    let mut seed_mask = vec![false; dims[0] * dims[1] * dims[2]];
    for s in seeds {
        if (0..3).any(|a| s[a] >= dims[a]) {
            return Err(Error::SeedOutOfBounds(*s, dims));
        }
        seed_mask[s[0] + dims[0] * (s[1] + dims[1] * s[2])] = true;
    }
    let sq = squared_distance_to(dims, |i| seed_mask[i]);
    let r2 = radius * radius;
    let data = sq.iter().map(|&d| (d <= r2) as u8).collect();
    VoxelVolume::from_data(dims, [1.0; 3], 2, data)
}

const MAGIC: &[u8; 4] = b"VVOL";
const HEADER_LEN: usize = 4 + 1 + 1 + 2 + 12 + 12 + 2;

/// Serializes to the `VVOL` v1 byte layout.
pub fn encode_volume(vol: &VoxelVolume) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + vol.len());
    out.extend_from_slice(MAGIC);
    out.push(1);
    out.push(0);
    out.extend_from_slice(&[0, 0]);
    for d in vol.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in vol.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.extend_from_slice(&vol.class_count.to_le_bytes());
    out.extend_from_slice(&vol.data);
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<VoxelVolume> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedHeader);
    }
    if bytes[4] != 1 {
        return Err(Error::UnsupportedVersion(bytes[4]));
    }
    if bytes[5] != 0 {
        return Err(Error::UnsupportedDtype(bytes[5]));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let dims = [u32_at(8), u32_at(12), u32_at(16)];
    let spacing = [f32_at(20), f32_at(24), f32_at(28)];
    let class_count = u16::from_le_bytes([bytes[32], bytes[33]]);
    check_dims(dims)?;
    let expected = dims[0] * dims[1] * dims[2];
    let found = bytes.len() - HEADER_LEN;
    if found < expected {
        return Err(Error::TruncatedPayload { expected, found });
    }
    if found > expected {
        return Err(Error::PayloadMismatch { expected, found });
    }
    VoxelVolume::from_data(dims, spacing, class_count, bytes[HEADER_LEN..].to_vec())
}

pub fn write_volume(vol: &VoxelVolume, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_volume(vol))?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<VoxelVolume> {
    decode_volume(&fs::read(path)?)
}
