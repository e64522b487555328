//! Manifest-backed dataset access: index parsing, the train/held-out view
//! split, and sample loading.
//!
//! Split convention: the frontal view (view 0) of each identity is the
//! source for every pair; the last `holdout` views are reserved for
//! evaluation and the rest are training targets, self-pair included.

use crate::body::BodyParams;
use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::image_io::{read_point_map, read_ppm, Image, PointMap};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Default)]
pub struct ViewAssets {
    pub image: PathBuf,
    pub points: PathBuf,
    pub pose: PathBuf,
}

#[derive(Debug, Clone, Default)]
pub struct IdentityEntry {
    pub params: PathBuf,
    pub views: Vec<ViewAssets>,
}

/// Parsed manifest: per-identity asset paths, resolved against the
/// manifest's directory.
#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub identities: Vec<IdentityEntry>,
}

/// One training or evaluation pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub identity: usize,
    pub source_view: usize,
    pub target_view: usize,
}

/// Fully loaded pair: everything one forward/backward step consumes.
#[derive(Debug, Clone)]
pub struct Sample {
    pub pair: Pair,
    pub source_image: Image,
    pub source_pose: CameraPose,
    pub target_image: Image,
    pub target_points: PointMap,
    pub target_pose: CameraPose,
    pub body: BodyParams,
}

impl DatasetIndex {
    pub fn load(manifest: &Path) -> Result<DatasetIndex> {
        let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let root = manifest
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let mut ids: BTreeMap<usize, BTreeMap<i64, ViewAssets>> = BTreeMap::new();
        let mut params: BTreeMap<usize, PathBuf> = BTreeMap::new();
        for (ln, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 5 {
                return Err(Error::Contract(format!(
                    "manifest line {}: expected 5 columns, got {}",
                    ln + 1,
                    cols.len()
                )));
            }
            let bad = |what: &str| {
                Error::Contract(format!("manifest line {}: bad {what}: {line}", ln + 1))
            };
            let identity: usize = cols[0].parse().map_err(|_| bad("identity"))?;
            let view: i64 = cols[1].parse().map_err(|_| bad("view"))?;
            let path = root.join(cols[2 + 1]);
            if !path.exists() {
                return Err(Error::Contract(format!(
                    "manifest references missing file {}",
                    path.display()
                )));
            }
            match cols[2] {
                "params" => {
                    params.insert(identity, path);
                }
                role @ ("image" | "points" | "pose") => {
                    let entry = ids.entry(identity).or_default().entry(view).or_default();
                    match role {
                        "image" => entry.image = path,
                        "points" => entry.points = path,
                        _ => entry.pose = path,
                    }
                }
                other => {
                    return Err(Error::Contract(format!(
                        "manifest line {}: unknown role {other}",
                        ln + 1
                    )));
                }
            }
        }
        let mut identities = Vec::new();
        for (identity, views) in ids {
            if identity != identities.len() {
                return Err(Error::Contract(format!(
                    "manifest identities are not contiguous at {identity}"
                )));
            }
            let params = params
                .remove(&identity)
                .ok_or_else(|| Error::Contract(format!("identity {identity} has no params row")))?;
            let mut list = Vec::new();
            for (view, assets) in views {
                if view != list.len() as i64 {
                    return Err(Error::Contract(format!(
                        "identity {identity}: views are not contiguous at {view}"
                    )));
                }
                for (what, p) in [
                    ("image", &assets.image),
                    ("points", &assets.points),
                    ("pose", &assets.pose),
                ] {
                    if p.as_os_str().is_empty() {
                        return Err(Error::Contract(format!(
                            "identity {identity} view {view} is missing its {what} row"
                        )));
                    }
                }
                list.push(assets);
            }
            if list.is_empty() {
                return Err(Error::Contract(format!("identity {identity} has no views")));
            }
            identities.push(IdentityEntry { params, views: list });
        }
        if identities.is_empty() {
            return Err(Error::Contract("manifest lists no identities".into()));
        }
        Ok(DatasetIndex { root, identities })
    }

    pub fn views(&self, identity: usize) -> usize {
        self.identities[identity].views.len()
    }

    /// Held-out view count for an identity: the requested holdout, clamped
    /// so at least one training target remains.
    pub fn effective_holdout(&self, identity: usize, holdout: usize) -> usize {
        holdout.min(self.views(identity) - 1)
    }

    pub fn train_pairs(&self, holdout: usize) -> Vec<Pair> {
        let mut pairs = Vec::new();
        for identity in 0..self.identities.len() {
            let keep = self.views(identity) - self.effective_holdout(identity, holdout);
            for target_view in 0..keep {
                pairs.push(Pair {
                    identity,
                    source_view: 0,
                    target_view,
                });
            }
        }
        pairs
    }

    pub fn heldout_pairs(&self, holdout: usize) -> Vec<Pair> {
        let mut pairs = Vec::new();
        for identity in 0..self.identities.len() {
            let views = self.views(identity);
            let keep = views - self.effective_holdout(identity, holdout);
            for target_view in keep..views {
                pairs.push(Pair {
                    identity,
                    source_view: 0,
                    target_view,
                });
            }
        }
        pairs
    }

    pub fn load_sample(&self, pair: Pair) -> Result<Sample> {
        let entry = self
            .identities
            .get(pair.identity)
            .ok_or_else(|| Error::Contract(format!("identity {} out of range", pair.identity)))?;
        let pick = |view: usize| -> Result<&ViewAssets> {
            entry.views.get(view).ok_or_else(|| {
                Error::Contract(format!("identity {} view {view} out of range", pair.identity))
            })
        };
        let src = pick(pair.source_view)?;
        let tgt = pick(pair.target_view)?;
        let source_image = read_ppm(&src.image)?;
        let source_pose = read_pose(&src.pose, source_image.w, source_image.h)?;
        let target_image = read_ppm(&tgt.image)?;
        let target_points = read_point_map(&tgt.points)?;
        let target_pose = read_pose(&tgt.pose, target_image.w, target_image.h)?;
        let body_text = fs::read_to_string(&entry.params).map_err(|e| Error::io(&entry.params, e))?;
        let body = BodyParams::from_record(&body_text)?;
        Ok(Sample {
            pair,
            source_image,
            source_pose,
            target_image,
            target_points,
            target_pose,
            body,
        })
    }
}

fn read_pose(path: &Path, width: usize, height: usize) -> Result<CameraPose> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    CameraPose::from_record(&text, width, height)
}
