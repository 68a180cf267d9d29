//! Keypoint sets, feature distances and feature-space matching.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pixel, Point3};

pub const DEFAULT_FEATURE_DIM: usize = 128;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("feature dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("keypoint set has no features")]
    MissingFeatures,
    #[error("empty keypoint set")]
    EmptySet,
    #[error("parallel lists differ in length: {0} coordinates vs {1} features")]
    LengthMismatch(usize, usize),
    #[error("duplicate pixel at ({0}, {1})")]
    DuplicatePixel(f64, f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("correspondence ({0}, {1}) is out of range")]
    IndexOutOfRange(usize, usize),
    #[error("correspondence set repeats an index but is flagged one-to-one")]
    NotOneToOne,
    #[error("invalid match config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self(self.0.iter().map(|x| x * s).collect())
    }
}

fn check_features(features: &[FeatureVector], n: usize) -> Result<(), FeatureError> {
    if features.len() != n {
        return Err(FeatureError::LengthMismatch(n, features.len()));
    }
    if let Some(first) = features.first() {
        let d = first.dim();
        for f in features {
            if f.dim() != d {
                return Err(FeatureError::DimensionMismatch(d, f.dim()));
            }
            if f.0.iter().any(|x| !x.is_finite()) {
                return Err(FeatureError::NonFinite("feature"));
            }
        }
    }
    Ok(())
}

/// Detected pixels, optionally with per-pixel descriptors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KeypointSet2D {
    pixels: Vec<Pixel>,
    features: Option<Vec<FeatureVector>>,
}

impl KeypointSet2D {
    pub fn new(pixels: Vec<Pixel>, features: Option<Vec<FeatureVector>>) -> Result<Self, FeatureError> {
        if pixels.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
            return Err(FeatureError::NonFinite("pixel"));
        }
        let mut keys: Vec<(u64, u64)> = pixels.iter().map(|p| (p.x.to_bits(), p.y.to_bits())).collect();
        keys.sort_unstable();
        if let Some(w) = keys.windows(2).find(|w| w[0] == w[1]) {
            return Err(FeatureError::DuplicatePixel(f64::from_bits(w[0].0), f64::from_bits(w[0].1)));
        }
        if let Some(f) = &features {
            check_features(f, pixels.len())?;
        }
        Ok(Self { pixels, features })
    }

    pub fn from_pixels(pixels: Vec<Pixel>) -> Result<Self, FeatureError> {
        Self::new(pixels, None)
    }

    pub fn pixels(&self) -> &[Pixel] {
        &self.pixels
    }

    pub fn features(&self) -> Option<&[FeatureVector]> {
        self.features.as_deref()
    }

    pub fn require_features(&self) -> Result<&[FeatureVector], FeatureError> {
        self.features().ok_or(FeatureError::MissingFeatures)
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// 3D points, optionally with per-point descriptors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KeypointSet3D {
    points: Vec<Point3>,
    features: Option<Vec<FeatureVector>>,
}

impl KeypointSet3D {
    pub fn new(points: Vec<Point3>, features: Option<Vec<FeatureVector>>) -> Result<Self, FeatureError> {
        if points.iter().any(|p| p.coords.iter().any(|x| !x.is_finite())) {
            return Err(FeatureError::NonFinite("point"));
        }
        if let Some(f) = &features {
            check_features(f, points.len())?;
        }
        Ok(Self { points, features })
    }

    pub fn from_points(points: Vec<Point3>) -> Result<Self, FeatureError> {
        Self::new(points, None)
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn features(&self) -> Option<&[FeatureVector]> {
        self.features.as_deref()
    }

    pub fn require_features(&self) -> Result<&[FeatureVector], FeatureError> {
        self.features().ok_or(FeatureError::MissingFeatures)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Subset in the given index order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            features: self
                .features
                .as_ref()
                .map(|f| indices.iter().map(|&i| f[i].clone()).collect()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    /// Feature-distance threshold for a correspondence.
    pub delta: f64,
    /// Unit-normalize each descriptor before taking the L2 distance.
    pub normalize: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            delta: 0.5,
            normalize: true,
        }
    }
}

impl MatchConfig {
    pub fn new(delta: f64, normalize: bool) -> Result<Self, FeatureError> {
        if !(delta > 0.0) {
            return Err(FeatureError::InvalidConfig(format!("delta must be > 0, got {delta}")));
        }
        Ok(Self { delta, normalize })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    /// Index into the 2D keypoint set.
    pub i: usize,
    /// Index into the 3D keypoint set.
    pub j: usize,
    /// Feature distance of the pair.
    pub score: f64,
}

/// Sparse boolean matching between a 2D and a 3D keypoint set.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrespondenceSet {
    pub pairs: Vec<Correspondence>,
    one_to_one: bool,
}

impl CorrespondenceSet {
    pub fn new(pairs: Vec<Correspondence>) -> Self {
        Self { pairs, one_to_one: false }
    }

    /// Builds a set flagged as a matching; fails if any index repeats.
    pub fn one_to_one(pairs: Vec<Correspondence>) -> Result<Self, FeatureError> {
        let set = Self { pairs, one_to_one: true };
        if !set.has_unique_indices() {
            return Err(FeatureError::NotOneToOne);
        }
        Ok(set)
    }

    pub fn from_index_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        Self::new(pairs.into_iter().map(|(i, j)| Correspondence { i, j, score: 0.0 }).collect())
    }

    pub fn is_one_to_one(&self) -> bool {
        self.one_to_one
    }

    pub fn has_unique_indices(&self) -> bool {
        let mut is: Vec<usize> = self.pairs.iter().map(|c| c.i).collect();
        let mut js: Vec<usize> = self.pairs.iter().map(|c| c.j).collect();
        is.sort_unstable();
        js.sort_unstable();
        is.windows(2).all(|w| w[0] != w[1]) && js.windows(2).all(|w| w[0] != w[1])
    }

    pub fn validate(&self, n2d: usize, n3d: usize) -> Result<(), FeatureError> {
        match self.pairs.iter().find(|c| c.i >= n2d || c.j >= n3d) {
            Some(c) => Err(FeatureError::IndexOutOfRange(c.i, c.j)),
            None => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Correspondence> {
        self.pairs.iter()
    }
}

pub fn feature_distance(a: &FeatureVector, b: &FeatureVector, cfg: &MatchConfig) -> Result<f64, FeatureError> {
    if a.dim() != b.dim() {
        return Err(FeatureError::DimensionMismatch(a.dim(), b.dim()));
    }
    Ok(distance_unchecked(a.as_slice(), b.as_slice(), cfg.normalize))
}

fn distance_unchecked(a: &[f64], b: &[f64], normalize: bool) -> f64 {
    let (sa, sb) = if normalize {
        (inv_norm(a), inv_norm(b))
    } else {
        (1.0, 1.0)
    };
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x * sa - y * sb;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn inv_norm(a: &[f64]) -> f64 {
    let n = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    // Zero vectors stay zero.
    if n > 0.0 {
        1.0 / n
    } else {
        0.0
    }
}

fn check_dims(a: &[FeatureVector], b: &[FeatureVector]) -> Result<(), FeatureError> {
    match (a.first(), b.first()) {
        (Some(x), Some(y)) if x.dim() != y.dim() => Err(FeatureError::DimensionMismatch(x.dim(), y.dim())),
        _ => Ok(()),
    }
}

/// Dense `M × N` feature-distance matrix, row-major.
pub fn distance_matrix(
    i2d: &KeypointSet2D,
    p3d: &KeypointSet3D,
    cfg: &MatchConfig,
) -> Result<Vec<Vec<f64>>, FeatureError> {
    let fa = i2d.require_features()?;
    let fb = p3d.require_features()?;
    check_dims(fa, fb)?;
    Ok(fa
        .par_iter()
        .map(|a| fb.iter().map(|b| distance_unchecked(a.as_slice(), b.as_slice(), cfg.normalize)).collect())
        .collect())
}

/// All pairs whose feature distance is at most `delta`, in row-major order.
pub fn match_by_threshold(
    i2d: &KeypointSet2D,
    p3d: &KeypointSet3D,
    cfg: &MatchConfig,
) -> Result<CorrespondenceSet, FeatureError> {
    let dists = distance_matrix(i2d, p3d, cfg)?;
    let pairs = dists
        .iter()
        .enumerate()
        .flat_map(|(i, row)| {
            row.iter()
                .enumerate()
                .filter(|(_, &d)| d <= cfg.delta)
                .map(move |(j, &d)| Correspondence { i, j, score: d })
        })
        .collect();
    Ok(CorrespondenceSet::new(pairs))
}

/// Argmin of the feature distance over `p3d`; ties go to the lowest index.
pub fn nearest_3d_match(
    q_feature: &FeatureVector,
    p3d: &KeypointSet3D,
    cfg: &MatchConfig,
) -> Result<(usize, f64), FeatureError> {
    let fb = p3d.require_features()?;
    if fb.is_empty() {
        return Err(FeatureError::EmptySet);
    }
    if fb[0].dim() != q_feature.dim() {
        return Err(FeatureError::DimensionMismatch(q_feature.dim(), fb[0].dim()));
    }
    Ok(argmin_distance(q_feature.as_slice(), fb, cfg.normalize))
}

fn argmin_distance(q: &[f64], fb: &[FeatureVector], normalize: bool) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, f) in fb.iter().enumerate() {
        let d = distance_unchecked(q, f.as_slice(), normalize);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Nearest 3D feature for every 2D keypoint, as `(argmin index, distance)`.
pub fn nearest_3d_matches(
    i2d: &KeypointSet2D,
    p3d: &KeypointSet3D,
    cfg: &MatchConfig,
) -> Result<Vec<(usize, f64)>, FeatureError> {
    let fa = i2d.require_features()?;
    let fb = p3d.require_features()?;
    if fb.is_empty() {
        return Err(FeatureError::EmptySet);
    }
    check_dims(fa, fb)?;
    Ok(fa.par_iter().map(|a| argmin_distance(a.as_slice(), fb, cfg.normalize)).collect())
}

/// One pair per 2D keypoint: its nearest 3D feature, kept when within `delta`.
pub fn match_nearest(
    i2d: &KeypointSet2D,
    p3d: &KeypointSet3D,
    cfg: &MatchConfig,
) -> Result<CorrespondenceSet, FeatureError> {
    let pairs = nearest_3d_matches(i2d, p3d, cfg)?
        .into_iter()
        .enumerate()
        .filter(|(_, (_, d))| *d <= cfg.delta)
        .map(|(i, (j, score))| Correspondence { i, j, score })
        .collect();
    Ok(CorrespondenceSet::new(pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_features(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<FeatureVector> {
        (0..n)
            .map(|_| FeatureVector((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect()
    }

    fn sets(seed: u64, m: usize, n: usize, d: usize) -> (KeypointSet2D, KeypointSet3D) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels = (0..m).map(|i| Pixel::new(i as f64, 0.5 * i as f64)).collect();
        let points = (0..n).map(|i| Point3::new(i as f64, 0.0, 1.0)).collect();
        let fa = random_features(&mut rng, m, d);
        let fb = random_features(&mut rng, n, d);
        (
            KeypointSet2D::new(pixels, Some(fa)).unwrap(),
            KeypointSet3D::new(points, Some(fb)).unwrap(),
        )
    }

    // Scalar loop kept deliberately naive.
    fn oracle_distance(a: &[f64], b: &[f64], normalize: bool) -> f64 {
        let mut na = 0.0;
        let mut nb = 0.0;
        for k in 0..a.len() {
            na += a[k] * a[k];
            nb += b[k] * b[k];
        }
        na = na.sqrt();
        nb = nb.sqrt();
        let mut acc = 0.0;
        for k in 0..a.len() {
            let x = if normalize && na > 0.0 { a[k] / na } else if normalize { 0.0 } else { a[k] };
            let y = if normalize && nb > 0.0 { b[k] / nb } else if normalize { 0.0 } else { b[k] };
            acc += (x - y) * (x - y);
        }
        acc.sqrt()
    }

    #[test]
    fn distance_examples() {
        let cfg = MatchConfig::default();
        let a = FeatureVector(vec![1.0, 0.0, 0.0]);
        let b = FeatureVector(vec![0.0, 1.0, 0.0]);
        assert_eq!(feature_distance(&a, &a, &cfg).unwrap(), 0.0);
        assert!((feature_distance(&a, &b, &cfg).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        let z = FeatureVector(vec![0.0; 3]);
        assert_eq!(feature_distance(&a, &z, &cfg).unwrap(), 1.0);
        let raw = MatchConfig { normalize: false, ..cfg };
        assert_eq!(feature_distance(&a.scaled(3.0), &a, &raw).unwrap(), 2.0);
        assert_eq!(
            feature_distance(&a, &FeatureVector(vec![1.0]), &cfg),
            Err(FeatureError::DimensionMismatch(3, 1))
        );
    }

    #[test]
    fn distance_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for normalize in [true, false] {
            let cfg = MatchConfig { delta: 1.0, normalize };
            for _ in 0..50 {
                let f = random_features(&mut rng, 2, 16);
                let d = feature_distance(&f[0], &f[1], &cfg).unwrap();
                assert!((d - oracle_distance(&f[0].0, &f[1].0, normalize)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn threshold_matching_examples() {
        let (i2d, p3d) = sets(1, 5, 7, 8);
        let cfg = MatchConfig { delta: f64::MIN_POSITIVE, normalize: true };
        assert!(match_by_threshold(&i2d, &p3d, &cfg).unwrap().is_empty());
        let cfg = MatchConfig { delta: 10.0, normalize: true };
        assert_eq!(match_by_threshold(&i2d, &p3d, &cfg).unwrap().len(), 35);

        let mut all: Vec<f64> = distance_matrix(&i2d, &p3d, &cfg).unwrap().concat();
        all.sort_by(f64::total_cmp);
        let cfg = MatchConfig { delta: all[all.len() / 2], normalize: true };
        let got = match_by_threshold(&i2d, &p3d, &cfg).unwrap();
        let fa = i2d.features().unwrap();
        let fb = p3d.features().unwrap();
        let mut expected = Vec::new();
        for i in 0..5 {
            for j in 0..7 {
                let d = oracle_distance(&fa[i].0, &fb[j].0, true);
                if d <= cfg.delta {
                    expected.push((i, j));
                }
            }
        }
        let got: Vec<_> = got.iter().map(|c| (c.i, c.j)).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn missing_features_rejected() {
        let i2d = KeypointSet2D::from_pixels(vec![Pixel::new(0.0, 0.0)]).unwrap();
        let (_, p3d) = sets(2, 1, 3, 4);
        assert_eq!(
            match_by_threshold(&i2d, &p3d, &MatchConfig::default()).unwrap_err(),
            FeatureError::MissingFeatures
        );
        let empty = KeypointSet3D::new(vec![], Some(vec![])).unwrap();
        assert_eq!(
            nearest_3d_match(&FeatureVector(vec![1.0]), &empty, &MatchConfig::default()).unwrap_err(),
            FeatureError::EmptySet
        );
    }

    #[test]
    fn nearest_examples() {
        let cfg = MatchConfig::default();
        let (i2d, p3d) = sets(3, 1, 64, 8);
        let single = p3d.select(&[5]);
        let q = &i2d.features().unwrap()[0];
        let (j, s) = nearest_3d_match(q, &single, &cfg).unwrap();
        assert_eq!(j, 0);
        assert_eq!(s, feature_distance(q, &single.features().unwrap()[0], &cfg).unwrap());

        let target = p3d.features().unwrap()[3].clone();
        assert_eq!(nearest_3d_match(&target, &p3d, &cfg).unwrap(), (3, 0.0));

        let fb = p3d.features().unwrap();
        let (mut bj, mut bd) = (usize::MAX, f64::INFINITY);
        for (j, f) in fb.iter().enumerate() {
            let d = oracle_distance(&q.0, &f.0, true);
            if d < bd {
                bj = j;
                bd = d;
            }
        }
        let (j, s) = nearest_3d_match(q, &p3d, &cfg).unwrap();
        assert_eq!(j, bj);
        assert!((s - bd).abs() < 1e-12);
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let f = FeatureVector(vec![1.0, 2.0]);
        let p3d = KeypointSet3D::new(
            vec![Point3::origin(); 3],
            Some(vec![FeatureVector(vec![-1.0, 0.0]), f.clone(), f.scaled(2.0)]),
        )
        .unwrap();
        assert_eq!(nearest_3d_match(&f, &p3d, &MatchConfig::default()).unwrap().0, 1);
    }

    #[test]
    fn set_invariants() {
        assert!(matches!(
            KeypointSet2D::from_pixels(vec![Pixel::new(1.0, 2.0), Pixel::new(1.0, 2.0)]),
            Err(FeatureError::DuplicatePixel(..))
        ));
        assert!(matches!(
            KeypointSet3D::new(vec![Point3::origin()], Some(vec![])),
            Err(FeatureError::LengthMismatch(1, 0))
        ));
        let pairs = vec![
            Correspondence { i: 0, j: 1, score: 0.0 },
            Correspondence { i: 1, j: 1, score: 0.0 },
        ];
        assert_eq!(CorrespondenceSet::one_to_one(pairs.clone()).unwrap_err(), FeatureError::NotOneToOne);
        let c = CorrespondenceSet::new(pairs);
        assert!(c.validate(2, 2).is_ok());
        assert_eq!(c.validate(1, 2), Err(FeatureError::IndexOutOfRange(1, 1)));
    }

    #[test]
    fn nearest_row_minimum_of_distance_matrix() {
        let (i2d, p3d) = sets(11, 9, 20, 6);
        let cfg = MatchConfig::default();
        let dm = distance_matrix(&i2d, &p3d, &cfg).unwrap();
        for (row, (j, s)) in dm.iter().zip(nearest_3d_matches(&i2d, &p3d, &cfg).unwrap()) {
            let min = row.iter().cloned().fold(f64::INFINITY, f64::min);
            assert_eq!(s, min);
            assert_eq!(row[j], min);
        }
    }

    proptest! {
        #[test]
        fn threshold_matching_monotone(seed in 0u64..1000, d1 in 0.01f64..2.0, d2 in 0.01f64..2.0) {
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let (i2d, p3d) = sets(seed, 6, 8, 5);
            let a = match_by_threshold(&i2d, &p3d, &MatchConfig { delta: lo, normalize: true }).unwrap();
            let b = match_by_threshold(&i2d, &p3d, &MatchConfig { delta: hi, normalize: true }).unwrap();
            let bs: std::collections::HashSet<_> = b.iter().map(|c| (c.i, c.j)).collect();
            prop_assert!(a.iter().all(|c| bs.contains(&(c.i, c.j))));
        }

        #[test]
        fn normalized_argmin_scale_invariant(seed in 0u64..1000, lambda in 0.01f64..100.0) {
            let (i2d, p3d) = sets(seed, 4, 16, 5);
            let cfg = MatchConfig::default();
            let scaled = KeypointSet3D::new(
                p3d.points().to_vec(),
                Some(p3d.features().unwrap().iter().map(|f| f.scaled(lambda)).collect()),
            ).unwrap();
            for q in i2d.features().unwrap() {
                let a = nearest_3d_match(q, &p3d, &cfg).unwrap();
                let b = nearest_3d_match(&q.scaled(lambda), &scaled, &cfg).unwrap();
                prop_assert_eq!(a.0, b.0);
            }
        }
    }
}
