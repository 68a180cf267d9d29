//! On-disk formats: scene directories, keypoint and correspondence CSVs,
//! ASCII PLY clouds and solver traces.
//!
//! A scene directory holds `intrinsics.json`, `pose_gt.json`, `cloud.ply`,
//! `pixels.csv`, `features_2d.csv`, `features_3d.csv`, `depth.csv`,
//! `gt_pairs.csv` and `meta.json`. Floats are written in shortest
//! round-trip form so reloading is exact.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use crate::chamfer::SolverIteration;
use crate::features::{Correspondence, CorrespondenceSet, FeatureError, FeatureVector, KeypointSet2D, KeypointSet3D};
use crate::geometry::{CameraIntrinsics, Pixel, Point3, Pose};
use crate::keypoint::KeypointSelection;
use crate::synth::{SceneMeta, ScenePair};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> IoError + '_ {
    move |source| IoError::Csv { path: path.to_path_buf(), source }
}

fn parse_err(path: &Path, message: impl Into<String>) -> IoError {
    IoError::Parse { path: path.to_path_buf(), message: message.into() }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|source| IoError::Json { path: path.to_path_buf(), source })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| IoError::Json { path: path.to_path_buf(), source })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>, IoError> {
    csv::Writer::from_path(path).map_err(csv_err(path))
}

fn csv_rows(path: &Path) -> Result<Vec<Vec<f64>>, IoError> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err(path))?;
        let row = record
            .iter()
            .map(|s| s.trim().parse::<f64>().map_err(|e| parse_err(path, format!("{s:?}: {e}"))))
            .collect::<Result<Vec<f64>, _>>()?;
        rows.push(row);
    }
    Ok(rows)
}

fn write_rows<'a>(
    path: &Path,
    header: &[String],
    rows: impl Iterator<Item = Vec<String>> + 'a,
) -> Result<(), IoError> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(csv_err(path))?;
    for row in rows {
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn feature_header(dim: usize) -> Vec<String> {
    (0..dim).map(|d| format!("f{d}")).collect()
}

fn features_dim(f: Option<&[FeatureVector]>) -> usize {
    f.and_then(|f| f.first()).map_or(0, FeatureVector::dim)
}

pub fn write_features_csv(path: &Path, features: &[FeatureVector]) -> Result<(), IoError> {
    let dim = features_dim(Some(features));
    write_rows(
        path,
        &feature_header(dim),
        features.iter().map(|f| f.0.iter().map(f64::to_string).collect()),
    )
}

pub fn read_features_csv(path: &Path) -> Result<Vec<FeatureVector>, IoError> {
    Ok(csv_rows(path)?.into_iter().map(FeatureVector).collect())
}

/// ASCII PLY with `x y z` vertex properties.
pub fn write_ply(path: &Path, points: &[Point3]) -> Result<(), IoError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut body = || -> std::io::Result<()> {
        writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", points.len())?;
        writeln!(w, "property double x\nproperty double y\nproperty double z\nend_header")?;
        for p in points {
            writeln!(w, "{} {} {}", p.x, p.y, p.z)?;
        }
        w.flush()
    };
    body().map_err(io_err(path))
}

pub fn read_ply(path: &Path) -> Result<Vec<Point3>, IoError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines();
    let mut count = None;
    loop {
        let line = lines
            .next()
            .ok_or_else(|| parse_err(path, "missing end_header"))?
            .map_err(io_err(path))?;
        let line = line.trim();
        if line == "end_header" {
            break;
        }
        if let Some(rest) = line.strip_prefix("element vertex ") {
            count = Some(rest.trim().parse::<usize>().map_err(|e| parse_err(path, e.to_string()))?);
        } else if line.starts_with("format") && line != "format ascii 1.0" {
            return Err(parse_err(path, format!("unsupported PLY format {line:?}")));
        }
    }
    let count = count.ok_or_else(|| parse_err(path, "missing vertex count"))?;
    let mut points = Vec::with_capacity(count);
    for line in lines.take(count) {
        let line = line.map_err(io_err(path))?;
        let xs: Vec<f64> = line
            .split_whitespace()
            .take(3)
            .map(|s| s.parse::<f64>().map_err(|e| parse_err(path, format!("{s:?}: {e}"))))
            .collect::<Result<_, _>>()?;
        if xs.len() != 3 {
            return Err(parse_err(path, format!("vertex line {line:?} needs 3 coordinates")));
        }
        points.push(Point3::new(xs[0], xs[1], xs[2]));
    }
    if points.len() != count {
        return Err(parse_err(path, format!("expected {count} vertices, found {}", points.len())));
    }
    Ok(points)
}

fn write_pixels_csv(path: &Path, pixels: &[Pixel]) -> Result<(), IoError> {
    write_rows(
        path,
        &["u".into(), "v".into()],
        pixels.iter().map(|q| vec![q.x.to_string(), q.y.to_string()]),
    )
}

fn read_pixels_csv(path: &Path) -> Result<Vec<Pixel>, IoError> {
    csv_rows(path)?
        .into_iter()
        .map(|r| match r[..] {
            [u, v] => Ok(Pixel::new(u, v)),
            _ => Err(parse_err(path, "pixel rows need u,v")),
        })
        .collect()
}

/// One row per keypoint: `u,v` then feature components.
pub fn write_keypoints_2d_csv(path: &Path, set: &KeypointSet2D) -> Result<(), IoError> {
    let mut header = vec!["u".to_string(), "v".to_string()];
    header.extend(feature_header(features_dim(set.features())));
    write_rows(
        path,
        &header,
        set.pixels().iter().enumerate().map(|(i, q)| {
            let mut row = vec![q.x.to_string(), q.y.to_string()];
            if let Some(f) = set.features() {
                row.extend(f[i].0.iter().map(f64::to_string));
            }
            row
        }),
    )
}

pub fn read_keypoints_2d_csv(path: &Path) -> Result<KeypointSet2D, IoError> {
    let rows = csv_rows(path)?;
    let (coords, features) = split_rows(path, rows, 2)?;
    let pixels = coords.iter().map(|c| Pixel::new(c[0], c[1])).collect();
    Ok(KeypointSet2D::new(pixels, features)?)
}

/// One row per keypoint: `x,y,z` then feature components.
pub fn write_keypoints_3d_csv(path: &Path, set: &KeypointSet3D) -> Result<(), IoError> {
    let mut header = vec!["x".to_string(), "y".to_string(), "z".to_string()];
    header.extend(feature_header(features_dim(set.features())));
    write_rows(
        path,
        &header,
        set.points().iter().enumerate().map(|(i, p)| {
            let mut row = vec![p.x.to_string(), p.y.to_string(), p.z.to_string()];
            if let Some(f) = set.features() {
                row.extend(f[i].0.iter().map(f64::to_string));
            }
            row
        }),
    )
}

pub fn read_keypoints_3d_csv(path: &Path) -> Result<KeypointSet3D, IoError> {
    let rows = csv_rows(path)?;
    let (coords, features) = split_rows(path, rows, 3)?;
    let points = coords.iter().map(|c| Point3::new(c[0], c[1], c[2])).collect();
    Ok(KeypointSet3D::new(points, features)?)
}

type SplitRows = (Vec<Vec<f64>>, Option<Vec<FeatureVector>>);

fn split_rows(path: &Path, rows: Vec<Vec<f64>>, n_coords: usize) -> Result<SplitRows, IoError> {
    let width = rows.first().map_or(n_coords, Vec::len);
    if width < n_coords {
        return Err(parse_err(path, format!("rows need at least {n_coords} columns")));
    }
    let mut coords = Vec::with_capacity(rows.len());
    let mut features = Vec::with_capacity(rows.len());
    for mut r in rows {
        let f = r.split_off(n_coords);
        coords.push(r);
        features.push(FeatureVector(f));
    }
    Ok((coords, (width > n_coords).then_some(features)))
}

#[derive(Serialize, Deserialize)]
struct KeypointsJson<C> {
    coords: Vec<C>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<Vec<FeatureVector>>,
}

pub fn write_keypoints_2d_json(path: &Path, set: &KeypointSet2D) -> Result<(), IoError> {
    let doc = KeypointsJson {
        coords: set.pixels().iter().map(|q| [q.x, q.y]).collect(),
        features: set.features().map(<[FeatureVector]>::to_vec),
    };
    write_json(path, &doc)
}

pub fn read_keypoints_2d_json(path: &Path) -> Result<KeypointSet2D, IoError> {
    let doc: KeypointsJson<[f64; 2]> = read_json(path)?;
    let pixels = doc.coords.iter().map(|c| Pixel::new(c[0], c[1])).collect();
    Ok(KeypointSet2D::new(pixels, doc.features)?)
}

pub fn write_keypoints_3d_json(path: &Path, set: &KeypointSet3D) -> Result<(), IoError> {
    let doc = KeypointsJson {
        coords: set.points().iter().map(|p| [p.x, p.y, p.z]).collect(),
        features: set.features().map(<[FeatureVector]>::to_vec),
    };
    write_json(path, &doc)
}

pub fn read_keypoints_3d_json(path: &Path) -> Result<KeypointSet3D, IoError> {
    let doc: KeypointsJson<[f64; 3]> = read_json(path)?;
    let points = doc.coords.iter().map(|c| Point3::new(c[0], c[1], c[2])).collect();
    Ok(KeypointSet3D::new(points, doc.features)?)
}

/// `i,j,score` triples.
pub fn write_correspondences_csv(path: &Path, c: &CorrespondenceSet) -> Result<(), IoError> {
    let mut w = csv_writer(path)?;
    for pair in c.iter() {
        w.serialize(pair).map_err(csv_err(path))?;
    }
    if c.is_empty() {
        w.write_record(["i", "j", "score"]).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_correspondences_csv(path: &Path) -> Result<CorrespondenceSet, IoError> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let pairs = reader
        .deserialize::<Correspondence>()
        .collect::<Result<Vec<_>, _>>()
        .map_err(csv_err(path))?;
    Ok(CorrespondenceSet::new(pairs))
}

pub fn write_scene(dir: &Path, scene: &ScenePair) -> Result<(), IoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_json(&dir.join("intrinsics.json"), &scene.k)?;
    write_json(&dir.join("pose_gt.json"), &scene.t_gt)?;
    write_json(&dir.join("meta.json"), &scene.meta)?;
    write_ply(&dir.join("cloud.ply"), scene.cloud.points())?;
    write_pixels_csv(&dir.join("pixels.csv"), scene.pixels.pixels())?;
    if let Some(f) = scene.pixels.features() {
        write_features_csv(&dir.join("features_2d.csv"), f)?;
    }
    if let Some(f) = scene.cloud.features() {
        write_features_csv(&dir.join("features_3d.csv"), f)?;
    }
    let depth_path = dir.join("depth.csv");
    write_rows(
        &depth_path,
        &["depth".into()],
        scene.depth.iter().map(|d| vec![d.map_or(String::new(), |z| z.to_string())]),
    )?;
    write_correspondences_csv(&dir.join("gt_pairs.csv"), &scene.gt_pairs)
}

fn read_depth(path: &Path) -> Result<Vec<Option<f64>>, IoError> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err(path))?;
    reader
        .records()
        .map(|r| {
            let r = r.map_err(csv_err(path))?;
            let s = r.get(0).unwrap_or("").trim();
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<f64>().map(Some).map_err(|e| parse_err(path, format!("{s:?}: {e}")))
            }
        })
        .collect()
}

fn optional_features(path: &Path) -> Result<Option<Vec<FeatureVector>>, IoError> {
    if path.exists() {
        read_features_csv(path).map(Some)
    } else {
        Ok(None)
    }
}

pub fn read_scene(dir: &Path) -> Result<ScenePair, IoError> {
    let k: CameraIntrinsics = read_json(&dir.join("intrinsics.json"))?;
    let t_gt: Pose = read_json(&dir.join("pose_gt.json"))?;
    let meta: SceneMeta = read_json(&dir.join("meta.json"))?;
    let cloud = KeypointSet3D::new(
        read_ply(&dir.join("cloud.ply"))?,
        optional_features(&dir.join("features_3d.csv"))?,
    )?;
    let pixels = KeypointSet2D::new(
        read_pixels_csv(&dir.join("pixels.csv"))?,
        optional_features(&dir.join("features_2d.csv"))?,
    )?;
    let depth_path = dir.join("depth.csv");
    let depth = if depth_path.exists() {
        read_depth(&depth_path)?
    } else {
        vec![None; pixels.len()]
    };
    if depth.len() != pixels.len() {
        return Err(parse_err(&depth_path, format!("{} depths for {} pixels", depth.len(), pixels.len())));
    }
    let pairs_path = dir.join("gt_pairs.csv");
    let gt_pairs = if pairs_path.exists() {
        let set = read_correspondences_csv(&pairs_path)?;
        set.validate(pixels.len(), cloud.len())?;
        CorrespondenceSet::one_to_one(set.pairs)?
    } else {
        CorrespondenceSet::default()
    };
    Ok(ScenePair { cloud, pixels, t_gt, k, depth, gt_pairs, meta })
}

/// Subdirectories of `root` that contain a `meta.json`, sorted by name.
pub fn list_scene_dirs(root: &Path) -> Result<Vec<PathBuf>, IoError> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let path = entry.map_err(io_err(root))?.path();
        if path.is_dir() && path.join("meta.json").exists() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// PLY of the selected points plus a `point_index,source,score` sidecar.
pub fn write_selection(ply_path: &Path, sidecar_path: &Path, sel: &KeypointSelection) -> Result<(), IoError> {
    write_ply(ply_path, sel.points.points())?;
    let mut w = csv_writer(sidecar_path)?;
    w.write_record(["point_index", "source", "score"]).map_err(csv_err(sidecar_path))?;
    for e in &sel.entries {
        w.write_record([e.point_index.to_string(), e.source.to_string(), e.score.to_string()])
            .map_err(csv_err(sidecar_path))?;
    }
    w.flush().map_err(io_err(sidecar_path))
}

/// `iteration,cost,step,rot_err_deg,trans_err_m`; error columns are empty
/// without a reference pose.
pub fn write_trace_csv(path: &Path, trace: &[SolverIteration], reference: Option<&Pose>) -> Result<(), IoError> {
    write_rows(
        path,
        &["iteration", "cost", "step", "rot_err_deg", "trans_err_m"].map(String::from),
        trace.iter().map(|it| {
            let (r, t) = reference.map_or((String::new(), String::new()), |g| {
                (it.pose.rotation_error_deg(g).to_string(), it.pose.translation_error(g).to_string())
            });
            vec![it.iteration.to_string(), it.cost.to_string(), it.step.to_string(), r, t]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, NoiseSpec, SceneConfig};

    #[test]
    fn scene_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig { n_points: 40, feature_dim: 8, ..Default::default() };
        let noise = NoiseSpec { pixel_noise_sigma: 0.3, outlier_rate: 0.2, dropout_rate: 0.1, ..NoiseSpec::noiseless(5) };
        let scene = generate_scene(&cfg, &noise).unwrap();
        write_scene(dir.path(), &scene).unwrap();
        let back = read_scene(dir.path()).unwrap();
        assert_eq!(back.cloud, scene.cloud);
        assert_eq!(back.pixels, scene.pixels);
        assert_eq!(back.t_gt, scene.t_gt);
        assert_eq!(back.depth, scene.depth);
        assert_eq!(back.gt_pairs, scene.gt_pairs);
        assert_eq!(back.meta, scene.meta);
        assert_eq!(back, scene);
        let root = dir.path().parent().unwrap();
        assert!(list_scene_dirs(root).unwrap().contains(&dir.path().to_path_buf()));
    }

    #[test]
    fn keypoint_files() {
        let dir = tempfile::tempdir().unwrap();
        let set = KeypointSet2D::new(
            vec![Pixel::new(0.1, 2.5), Pixel::new(1e-17, -3.0)],
            Some(vec![FeatureVector(vec![0.3, 1.0 / 3.0]), FeatureVector(vec![-2.0, 7e300])]),
        )
        .unwrap();
        let p = dir.path().join("k.csv");
        write_keypoints_2d_csv(&p, &set).unwrap();
        assert_eq!(read_keypoints_2d_csv(&p).unwrap(), set);
        let p = dir.path().join("k.json");
        write_keypoints_2d_json(&p, &set).unwrap();
        assert_eq!(read_keypoints_2d_json(&p).unwrap(), set);

        let bare = KeypointSet3D::from_points(vec![Point3::new(1.0, 2.0, 3.0)]).unwrap();
        let p = dir.path().join("p.csv");
        write_keypoints_3d_csv(&p, &bare).unwrap();
        assert_eq!(read_keypoints_3d_csv(&p).unwrap(), bare);
    }

    #[test]
    fn ply_rejects_truncated_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ply");
        fs::write(&p, "ply\nformat ascii 1.0\nelement vertex 2\nproperty double x\nend_header\n1 2 3\n").unwrap();
        assert!(matches!(read_ply(&p), Err(IoError::Parse { .. })));
        fs::write(&p, "ply\nformat binary_little_endian 1.0\nend_header\n").unwrap();
        assert!(matches!(read_ply(&p), Err(IoError::Parse { .. })));
    }

    #[test]
    fn correspondence_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        let c = CorrespondenceSet::new(vec![
            Correspondence { i: 0, j: 3, score: 0.125 },
            Correspondence { i: 2, j: 1, score: 0.1 },
        ]);
        write_correspondences_csv(&p, &c).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "i,j,score\n0,3,0.125\n2,1,0.1\n");
        assert_eq!(read_correspondences_csv(&p).unwrap(), c);
        write_correspondences_csv(&p, &CorrespondenceSet::default()).unwrap();
        assert!(read_correspondences_csv(&p).unwrap().is_empty());
    }
}
