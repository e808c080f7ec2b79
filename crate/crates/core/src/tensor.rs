//! Dense and sparse tensor containers.
//!
//! Sparse voxel tensors keep their coordinates in canonical `(b, z, y, x)`
//! ascending order together with a hash index, so coordinate lookups are O(1)
//! and iteration order is deterministic.

use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::Arc;

use num_traits::Float;
use rand::Rng;

use crate::error::{shape_err, Error, Result};

/// Floating point element type used by every layer.
///
/// Forward passes run in `f32`; gradient probes instantiate the same code at
/// `f64`.
pub trait Scalar:
    Float + Default + Debug + Display + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an `f64` literal into any [`Scalar`].
#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    T::from(x).expect("f64 literal representable")
}

/// Casts between scalar types.
#[inline]
pub fn cast<A: Scalar, B: Scalar>(x: A) -> B {
    B::from(x).expect("scalar cast")
}

/// Voxel coordinate `(batch, z, y, x)`. The derived ordering is the canonical
/// order used everywhere.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Coord {
    pub b: u32,
    pub z: u32,
    pub y: u32,
    pub x: u32,
}

impl Coord {
    pub const fn new(b: u32, z: u32, y: u32, x: u32) -> Self {
        Self { b, z, y, x }
    }

    pub fn spatial(&self) -> [u32; 3] {
        [self.z, self.y, self.x]
    }
}

impl Display for Coord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.b, self.z, self.y, self.x)
    }
}

/// Spatial grid size in voxels, `(D, H, W)` for the `(z, y, x)` axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Extent {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Extent {
    pub const fn new(d: usize, h: usize, w: usize) -> Self {
        Self { d, h, w }
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.d, self.h, self.w]
    }

    pub fn from_array(a: [usize; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn volume(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn contains(&self, c: &Coord) -> bool {
        (c.z as usize) < self.d && (c.y as usize) < self.h && (c.x as usize) < self.w
    }
}

impl Display for Extent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.d, self.h, self.w)
    }
}

/// Row-major dense tensor. Shapes are `(batch, channel, spatial...)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> DenseTensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(shape_err!("dimension sizes must be >= 1, got {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!("shape {shape:?} needs {n} values, got {}", data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![T::zero(); n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn l1_norm(&self) -> T {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> DenseTensor<U> {
        DenseTensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| cast(v)).collect() }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }
}

/// Ordered coordinate list plus hash index, shared between tensors that live on
/// the same sparsity pattern.
#[derive(Debug, PartialEq, Eq)]
pub struct CoordSet {
    coords: Vec<Coord>,
    lookup: HashMap<Coord, u32>,
}

impl CoordSet {
    /// Builds from coordinates that are already strictly ascending.
    pub(crate) fn from_sorted(coords: Vec<Coord>) -> Self {
        debug_assert!(coords.windows(2).all(|w| w[0] < w[1]));
        let lookup = coords.iter().enumerate().map(|(i, &c)| (c, i as u32)).collect();
        Self { coords, lookup }
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn find(&self, c: &Coord) -> Option<usize> {
        self.lookup.get(c).map(|&i| i as usize)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Set of active voxels with one feature row per voxel.
#[derive(Clone, Debug)]
pub struct SparseVoxelTensor<T = f32> {
    extent: Extent,
    batch: usize,
    channels: usize,
    coords: Arc<CoordSet>,
    features: Vec<T>,
}

impl<T: Scalar> PartialEq for SparseVoxelTensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.extent == other.extent
            && self.batch == other.batch
            && self.channels == other.channels
            && self.coords.coords == other.coords.coords
            && self.features == other.features
    }
}

impl<T: Scalar> SparseVoxelTensor<T> {
    /// Validates and canonicalizes. Rows are reordered together with their
    /// coordinates into `(b, z, y, x)` ascending order.
    pub fn new(extent: Extent, batch: usize, channels: usize, coords: Vec<Coord>, features: Vec<T>) -> Result<Self> {
        if extent.volume() == 0 || batch == 0 {
            return Err(shape_err!("extent {extent} and batch {batch} must be non-empty"));
        }
        if channels == 0 {
            return Err(shape_err!("feature width must be >= 1"));
        }
        if features.len() != coords.len() * channels {
            return Err(shape_err!(
                "{} coords x {channels} channels needs {} values, got {}",
                coords.len(),
                coords.len() * channels,
                features.len()
            ));
        }
        for c in &coords {
            if !extent.contains(c) || c.b as usize >= batch {
                return Err(Error::Range(format!("{c} outside extent {extent} / batch {batch}")));
            }
        }
        let mut order: Vec<usize> = (0..coords.len()).collect();
        order.sort_unstable_by_key(|&i| coords[i]);
        if let Some(w) = order.windows(2).find(|w| coords[w[0]] == coords[w[1]]) {
            return Err(Error::Alignment(format!("duplicate coordinate {}", coords[w[0]])));
        }
        let sorted: Vec<Coord> = order.iter().map(|&i| coords[i]).collect();
        let mut feats = Vec::with_capacity(features.len());
        for &i in &order {
            feats.extend_from_slice(&features[i * channels..(i + 1) * channels]);
        }
        Ok(Self { extent, batch, channels, coords: Arc::new(CoordSet::from_sorted(sorted)), features: feats })
    }

    pub fn empty(extent: Extent, batch: usize, channels: usize) -> Result<Self> {
        Self::new(extent, batch, channels, Vec::new(), Vec::new())
    }

    pub(crate) fn from_parts(
        extent: Extent,
        batch: usize,
        channels: usize,
        coords: Arc<CoordSet>,
        features: Vec<T>,
    ) -> Self {
        debug_assert_eq!(features.len(), coords.len() * channels);
        Self { extent, batch, channels, coords, features }
    }

    /// Same sparsity pattern, new feature matrix.
    pub fn with_features(&self, channels: usize, features: Vec<T>) -> Result<Self> {
        if channels == 0 || features.len() != self.len() * channels {
            return Err(shape_err!(
                "{} rows x {channels} channels needs {} values, got {}",
                self.len(),
                self.len() * channels,
                features.len()
            ));
        }
        Ok(Self::from_parts(self.extent, self.batch, channels, self.coords.clone(), features))
    }

    pub fn extent(&self) -> Extent {
        self.extent
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords.coords
    }

    pub fn coord_set(&self) -> &Arc<CoordSet> {
        &self.coords
    }

    pub fn find(&self, c: &Coord) -> Option<usize> {
        self.coords.find(c)
    }

    pub fn features(&self) -> &[T] {
        &self.features
    }

    pub fn into_features(self) -> Vec<T> {
        self.features
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    /// Number of active voxels, M'.
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn same_pattern(&self, other: &Self) -> bool {
        self.extent == other.extent
            && self.batch == other.batch
            && (Arc::ptr_eq(&self.coords, &other.coords) || self.coords.coords == other.coords.coords)
    }

    pub fn cast<U: Scalar>(&self) -> SparseVoxelTensor<U> {
        SparseVoxelTensor {
            extent: self.extent,
            batch: self.batch,
            channels: self.channels,
            coords: self.coords.clone(),
            features: self.features.iter().map(|&v| cast(v)).collect(),
        }
    }

    pub fn densify(&self) -> DenseTensor<T> {
        densify(self)
    }
}

/// Scatters a sparse tensor into a zero-filled `(B, C, D, H, W)` grid.
pub fn densify<T: Scalar>(s: &SparseVoxelTensor<T>) -> DenseTensor<T> {
    let Extent { d, h, w } = s.extent;
    let c = s.channels;
    let vol = d * h * w;
    let mut data = vec![T::zero(); s.batch * c * vol];
    for (row, coord) in s.coords().iter().enumerate() {
        let base = coord.b as usize * c * vol + spatial_index(s.extent, coord);
        for (ch, &v) in s.row(row).iter().enumerate() {
            data[base + ch * vol] = v;
        }
    }
    DenseTensor { shape: vec![s.batch, c, d, h, w], data }
}

#[inline]
fn spatial_index(e: Extent, c: &Coord) -> usize {
    (c.z as usize * e.h + c.y as usize) * e.w + c.x as usize
}

/// Gathers features from a `(B, C, D, H, W)` dense tensor at the mask
/// coordinates. The result is in canonical order.
pub fn sparsify<T: Scalar>(d: &DenseTensor<T>, mask: &[Coord]) -> Result<SparseVoxelTensor<T>> {
    let [batch, c, dd, hh, ww] = dense5(d)?;
    let extent = Extent::new(dd, hh, ww);
    for m in mask {
        if !extent.contains(m) || m.b as usize >= batch {
            return Err(Error::Range(format!("{m} outside extent {extent} / batch {batch}")));
        }
    }
    let mut sorted = mask.to_vec();
    sorted.sort_unstable();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Alignment(format!("duplicate mask coordinate {}", w[0])));
    }
    Ok(gather_at(d, extent, batch, c, Arc::new(CoordSet::from_sorted(sorted))))
}

/// Gathers at an existing coordinate set without revalidating it.
pub(crate) fn gather_at<T: Scalar>(
    d: &DenseTensor<T>,
    extent: Extent,
    batch: usize,
    c: usize,
    set: Arc<CoordSet>,
) -> SparseVoxelTensor<T> {
    let vol = extent.volume();
    let mut features = Vec::with_capacity(set.len() * c);
    for coord in set.coords() {
        let base = coord.b as usize * c * vol + spatial_index(extent, coord);
        features.extend((0..c).map(|ch| d.data[base + ch * vol]));
    }
    SparseVoxelTensor::from_parts(extent, batch, c, set, features)
}

fn dense5<T: Scalar>(d: &DenseTensor<T>) -> Result<[usize; 5]> {
    match *d.shape() {
        [b, c, z, y, x] => Ok([b, c, z, y, x]),
        _ => Err(shape_err!("expected (B, C, D, H, W), got {:?}", d.shape())),
    }
}

/// Column-wise concatenation of two tensors on the same coordinate set.
pub fn concat_features<T: Scalar>(a: &SparseVoxelTensor<T>, b: &SparseVoxelTensor<T>) -> Result<SparseVoxelTensor<T>> {
    if !a.same_pattern(b) {
        return Err(Error::Alignment(format!(
            "coordinate sets differ ({} vs {} voxels, extents {} vs {})",
            a.len(),
            b.len(),
            a.extent,
            b.extent
        )));
    }
    let c = a.channels + b.channels;
    let mut features = Vec::with_capacity(a.len() * c);
    for i in 0..a.len() {
        features.extend_from_slice(a.row(i));
        features.extend_from_slice(b.row(i));
    }
    Ok(SparseVoxelTensor::from_parts(a.extent, a.batch, c, a.coords.clone(), features))
}

/// Backward of [`concat_features`]: splits a gradient row-wise at column `left`.
pub fn split_features<T: Scalar>(g: &SparseVoxelTensor<T>, left: usize) -> Result<(Vec<T>, Vec<T>)> {
    if left == 0 || left >= g.channels {
        return Err(shape_err!("split column {left} outside 1..{}", g.channels));
    }
    let right = g.channels - left;
    let mut a = Vec::with_capacity(g.len() * left);
    let mut b = Vec::with_capacity(g.len() * right);
    for i in 0..g.len() {
        let row = g.row(i);
        a.extend_from_slice(&row[..left]);
        b.extend_from_slice(&row[left..]);
    }
    Ok((a, b))
}

/// A learnable tensor with an optional accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Value<T = f32> {
    pub data: Vec<T>,
    pub shape: Vec<usize>,
    pub grad: Option<Vec<T>>,
    pub requires_grad: bool,
}

impl<T: Scalar> Value<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!("shape {shape:?} needs {n} values, got {}", data.len()));
        }
        Ok(Self { data, shape, grad: None, requires_grad: true })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { data: vec![T::zero(); n], shape, grad: None, requires_grad: true }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: Vec<usize>, bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| lit(rng.random_range(-bound..=bound))).collect();
        Self { data, shape, grad: None, requires_grad: true }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer; a no-op when `requires_grad` is off.
    pub fn accumulate_grad(&mut self, g: &[T]) {
        assert_eq!(g.len(), self.data.len(), "gradient shape mismatch");
        if !self.requires_grad {
            return;
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn cast<U: Scalar>(&self) -> Value<U> {
        Value {
            data: self.data.iter().map(|&v| cast(v)).collect(),
            shape: self.shape.clone(),
            grad: self.grad.as_ref().map(|g| g.iter().map(|&v| cast(v)).collect()),
            requires_grad: self.requires_grad,
        }
    }
}

/// Anything that owns learnable [`Value`]s.
pub trait Parameters<T: Scalar> {
    fn params(&self) -> Vec<&Value<T>>;
    fn params_mut(&mut self) -> Vec<&mut Value<T>>;

    fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Value::zero_grad);
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn densify_single_voxel() {
        let s = SparseVoxelTensor::new(Extent::new(4, 4, 4), 1, 1, vec![Coord::new(0, 2, 1, 0)], vec![5.0f32]).unwrap();
        let d = s.densify();
        assert_eq!(d.shape(), &[1, 1, 4, 4, 4]);
        let idx = (2 * 4 + 1) * 4;
        for (i, &v) in d.data().iter().enumerate() {
            assert_eq!(v, if i == idx { 5.0 } else { 0.0 });
        }
    }

    #[test]
    fn densify_empty() {
        let s = SparseVoxelTensor::<f32>::empty(Extent::new(2, 2, 2), 1, 3).unwrap();
        let d = s.densify();
        assert_eq!(d.shape(), &[1, 3, 2, 2, 2]);
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sparsify_gather_and_full_mask() {
        let d = DenseTensor::new(vec![1, 1, 2, 2, 2], vec![7.0f32; 8]).unwrap();
        let s = sparsify(&d, &[Coord::new(0, 0, 0, 0)]).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.features(), &[7.0]);

        let mut all = Vec::new();
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    all.push(Coord::new(0, z, y, x));
                }
            }
        }
        all.reverse();
        let s = sparsify(&d, &all).unwrap();
        assert_eq!(s.len(), 8);
        assert!(s.coords().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn sparsify_out_of_range() {
        let d = DenseTensor::<f32>::zeros(vec![1, 1, 2, 2, 2]).unwrap();
        assert!(matches!(sparsify(&d, &[Coord::new(0, 3, 0, 0)]), Err(Error::Range(_))));
    }

    #[test]
    fn concat_shapes_and_alignment() {
        let e = Extent::new(4, 4, 4);
        let coords: Vec<_> = (0..5).map(|i| Coord::new(0, i % 4, i / 2, 1)).collect();
        let a = SparseVoxelTensor::new(e, 1, 2, coords.clone(), (0..10).map(|v| v as f32).collect()).unwrap();
        let b = SparseVoxelTensor::new(e, 1, 3, coords.clone(), (0..15).map(|v| -(v as f32)).collect()).unwrap();
        let ab = concat_features(&a, &b).unwrap();
        assert_eq!(ab.channels(), 5);
        assert_eq!(ab.len(), 5);

        let aa = concat_features(&a, &a).unwrap();
        for i in 0..aa.len() {
            assert_eq!(&aa.row(i)[..2], a.row(i));
            assert_eq!(&aa.row(i)[2..], a.row(i));
        }

        let mut other = coords;
        other[0] = Coord::new(0, 3, 3, 3);
        let c = SparseVoxelTensor::new(e, 1, 2, other, vec![0.0; 10]).unwrap();
        assert!(matches!(concat_features(&a, &c), Err(Error::Alignment(_))));
    }

    #[test]
    fn rejects_duplicates_and_bad_batch() {
        let e = Extent::new(2, 2, 2);
        let c = Coord::new(0, 1, 1, 1);
        assert!(SparseVoxelTensor::new(e, 1, 1, vec![c, c], vec![1.0f32, 2.0]).is_err());
        assert!(SparseVoxelTensor::new(e, 1, 1, vec![Coord::new(1, 0, 0, 0)], vec![1.0f32]).is_err());
    }

    #[test]
    fn value_accumulates() {
        let mut v = Value::<f64>::zeros(vec![2]);
        v.accumulate_grad(&[1.0, 2.0]);
        v.accumulate_grad(&[1.0, 2.0]);
        assert_eq!(v.grad(), Some(&[2.0, 4.0][..]));
        v.requires_grad = false;
        v.zero_grad();
        v.accumulate_grad(&[1.0, 1.0]);
        assert!(v.grad().is_none());
    }

    fn arb_sparse() -> impl Strategy<Value = SparseVoxelTensor<f32>> {
        (1usize..6, 1usize..6, 1usize..6, 1usize..3, 1usize..4).prop_flat_map(|(d, h, w, b, c)| {
            let n = d * h * w * b;
            (proptest::collection::vec(any::<bool>(), n), proptest::collection::vec(-10.0f32..10.0, n * c)).prop_map(
                move |(mask, vals)| {
                    let mut coords = Vec::new();
                    let mut feats = Vec::new();
                    let mut k = 0;
                    for bb in 0..b {
                        for z in 0..d {
                            for y in 0..h {
                                for x in 0..w {
                                    if mask[k] {
                                        coords.push(Coord::new(bb as u32, z as u32, y as u32, x as u32));
                                        feats.extend_from_slice(&vals[k * c..(k + 1) * c]);
                                    }
                                    k += 1;
                                }
                            }
                        }
                    }
                    coords.reverse();
                    let mut rf = Vec::new();
                    for i in (0..coords.len()).rev() {
                        rf.extend_from_slice(&feats[i * c..(i + 1) * c]);
                    }
                    SparseVoxelTensor::new(Extent::new(d, h, w), b, c, coords, rf).unwrap()
                },
            )
        })
    }

    proptest! {
        #[test]
        fn densify_sparsify_round_trip(s in arb_sparse()) {
            let d = densify(&s);
            let back = sparsify(&d, s.coords()).unwrap();
            prop_assert_eq!(&back, &s);
            let l1: f32 = s.features().iter().map(|v| v.abs()).sum();
            prop_assert!((d.l1_norm() - l1).abs() <= 1e-4 * (1.0 + l1));
        }

        #[test]
        fn concat_is_associative(s in arb_sparse()) {
            let t = s.with_features(1, (0..s.len()).map(|i| i as f32).collect()).unwrap();
            let left = concat_features(&concat_features(&s, &t).unwrap(), &s).unwrap();
            let right = concat_features(&s, &concat_features(&t, &s).unwrap()).unwrap();
            prop_assert_eq!(left, right);
        }
    }
}
