//! Per-category visual prototypes built from unpaired images.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::{argmax, dot, norm, normalize, EncoderBackend, VisualFeature};
use crate::error::{Error, Result};
use crate::reconstruction::IntensityImage;

const BANK_FORMAT: &str = "eventclip-prototype-bank";
const BANK_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Linkage {
    #[default]
    Average,
    Single,
    Complete,
}

/// `L` unit-length prototypes for each category.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    categories: Vec<String>,
    clusters: usize,
    dim: usize,
    /// `categories x clusters x dim`
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BankFile {
    format: String,
    version: u32,
    clusters: usize,
    dim: usize,
    categories: Vec<String>,
    prototypes: Vec<Vec<Vec<f64>>>,
}

impl PrototypeBank {
    /// `prototypes[c][l]` is normalised to unit length. Rows that already are
    /// (to 1e-12) are stored unchanged so that a saved bank reloads exactly.
    pub fn new(categories: Vec<String>, prototypes: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        if categories.len() != prototypes.len() || categories.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "{} categories but {} prototype groups",
                categories.len(),
                prototypes.len()
            )));
        }
        let clusters = prototypes[0].len();
        let dim = prototypes[0].first().map_or(0, Vec::len);
        if clusters == 0 || dim == 0 {
            return Err(Error::ShapeMismatch("empty prototype bank".into()));
        }
        let mut data = Vec::with_capacity(categories.len() * clusters * dim);
        for (name, group) in categories.iter().zip(prototypes) {
            if group.len() != clusters {
                return Err(Error::ShapeMismatch(format!(
                    "category {name} has {} prototypes, expected {clusters}",
                    group.len()
                )));
            }
            for mut row in group {
                if row.len() != dim {
                    return Err(Error::ShapeMismatch(format!(
                        "prototype of {name} has wrong dim"
                    )));
                }
                if (norm(&row) - 1.0).abs() > 1e-12 {
                    normalize(&mut row)?;
                }
                data.extend(row);
            }
        }
        Ok(Self {
            categories,
            clusters,
            dim,
            data,
        })
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }
    pub fn clusters(&self) -> usize {
        self.clusters
    }
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn category_index(&self, name: &str) -> Result<usize> {
        self.categories
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::UnknownCategory(name.to_string()))
    }

    pub fn prototype(&self, category: usize, cluster: usize) -> &[f64] {
        let start = (category * self.clusters + cluster) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// Closest prototype of category index `category` (lowest index on ties).
    pub fn assign_index(&self, v: &[f64], category: usize) -> Result<usize> {
        if category >= self.categories.len() {
            return Err(Error::UnknownCategory(format!("category index {category}")));
        }
        if v.len() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "feature dim {} vs bank dim {}",
                v.len(),
                self.dim
            )));
        }
        let sims: Vec<f64> = (0..self.clusters)
            .map(|l| dot(v, self.prototype(category, l)))
            .collect();
        Ok(argmax(&sims).expect("bank has at least one cluster"))
    }

    /// Reorders the bank to follow `categories`; every name must be present.
    pub fn aligned_to(&self, categories: &[String]) -> Result<Self> {
        let missing: Vec<&str> = categories
            .iter()
            .filter(|c| !self.categories.contains(c))
            .map(String::as_str)
            .collect();
        if !missing.is_empty() {
            return Err(Error::UnknownCategory(format!(
                "prototype bank has no entry for {}",
                missing.join(", ")
            )));
        }
        let mut data = Vec::with_capacity(categories.len() * self.clusters * self.dim);
        for c in categories {
            let i = self.category_index(c)?;
            for l in 0..self.clusters {
                data.extend_from_slice(self.prototype(i, l));
            }
        }
        Ok(Self {
            categories: categories.to_vec(),
            clusters: self.clusters,
            dim: self.dim,
            data,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let prototypes = (0..self.categories.len())
            .map(|c| {
                (0..self.clusters)
                    .map(|l| self.prototype(c, l).to_vec())
                    .collect()
            })
            .collect();
        let file = BankFile {
            format: BANK_FORMAT.into(),
            version: BANK_VERSION,
            clusters: self.clusters,
            dim: self.dim,
            categories: self.categories.clone(),
            prototypes,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: BankFile = serde_json::from_str(text)?;
        if file.format != BANK_FORMAT {
            return Err(Error::Integrity(format!(
                "not a prototype bank: {}",
                file.format
            )));
        }
        if file.version != BANK_VERSION {
            return Err(Error::Version {
                found: file.version,
                supported: BANK_VERSION,
            });
        }
        let bank = Self::new(file.categories, file.prototypes)?;
        if bank.clusters != file.clusters || bank.dim != file.dim {
            return Err(Error::Integrity(
                "bank header disagrees with its arrays".into(),
            ));
        }
        Ok(bank)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Closest prototype of the named category.
pub fn assign_cluster(v: &VisualFeature, category: &str, bank: &PrototypeBank) -> Result<usize> {
    bank.assign_index(v.data(), bank.category_index(category)?)
}

/// Agglomerative clustering with cosine distance. Returns one cluster label
/// per point, labels numbered by first appearance.
pub fn agglomerative(points: &[Vec<f64>], clusters: usize, linkage: Linkage) -> Result<Vec<usize>> {
    let n = points.len();
    if clusters == 0 || clusters > n {
        return Err(Error::InvalidConfig(format!(
            "cannot form {clusters} clusters from {n} points"
        )));
    }
    let cosine = |a: &[f64], b: &[f64]| {
        let d = (dot(a, a) * dot(b, b)).sqrt();
        if d > 0.0 {
            1.0 - dot(a, b) / d
        } else {
            1.0
        }
    };
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = cosine(&points[i], &points[j]);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let mut members: Vec<Option<Vec<usize>>> = (0..n).map(|i| Some(vec![i])).collect();
    let mut alive = n;
    while alive > clusters {
        let mut best: Option<(usize, usize)> = None;
        for i in 0..n {
            if members[i].is_none() {
                continue;
            }
            for j in i + 1..n {
                if members[j].is_none() {
                    continue;
                }
                if best.is_none_or(|(a, b)| dist[i][j] < dist[a][b]) {
                    best = Some((i, j));
                }
            }
        }
        let (i, j) = best.expect("at least two live clusters");
        let mj = members[j].take().expect("live cluster");
        let (ni, nj) = (
            members[i].as_ref().expect("live cluster").len() as f64,
            mj.len() as f64,
        );
        for k in 0..n {
            if k == i || members[k].is_none() {
                continue;
            }
            let d = match linkage {
                Linkage::Average => (ni * dist[k][i] + nj * dist[k][j]) / (ni + nj),
                Linkage::Single => dist[k][i].min(dist[k][j]),
                Linkage::Complete => dist[k][i].max(dist[k][j]),
            };
            dist[k][i] = d;
            dist[i][k] = d;
        }
        members[i].as_mut().expect("live cluster").extend(mj);
        alive -= 1;
    }
    let mut labels = vec![usize::MAX; n];
    let mut next = 0;
    for p in 0..n {
        if labels[p] != usize::MAX {
            continue;
        }
        let group = members
            .iter()
            .flatten()
            .find(|g| g.contains(&p))
            .expect("every point belongs to a cluster");
        for &q in group {
            labels[q] = next;
        }
        next += 1;
    }
    Ok(labels)
}

/// Normalised mean feature of each cluster.
pub fn cluster_means(
    points: &[Vec<f64>],
    labels: &[usize],
    clusters: usize,
) -> Result<Vec<Vec<f64>>> {
    let dim = points.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; dim]; clusters];
    for (p, &l) in points.iter().zip(labels) {
        for (s, x) in sums[l].iter_mut().zip(p) {
            *s += x;
        }
    }
    for s in &mut sums {
        normalize(s)?;
    }
    Ok(sums)
}

/// Encodes every image with the frozen backend and clusters each category
/// independently.
pub fn build_prototypes(
    backend: &dyn EncoderBackend,
    images_by_category: &[(String, Vec<IntensityImage>)],
    clusters: usize,
    linkage: Linkage,
) -> Result<PrototypeBank> {
    if clusters == 0 {
        return Err(Error::InvalidConfig(
            "at least one cluster per category".into(),
        ));
    }
    let mut names = Vec::with_capacity(images_by_category.len());
    let mut groups = Vec::with_capacity(images_by_category.len());
    for (name, images) in images_by_category {
        if images.len() < clusters {
            return Err(Error::TooFewImages {
                category: name.clone(),
                available: images.len(),
                required: clusters,
            });
        }
        let features = images
            .iter()
            .map(|img| backend.encode_image(img).map(|v| v.data().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let labels = agglomerative(&features, clusters, linkage)?;
        groups.push(cluster_means(&features, &labels, clusters)?);
        names.push(name.clone());
    }
    PrototypeBank::new(names, groups)
}

pub fn load_png(path: &Path) -> Result<IntensityImage> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let data = img
        .into_raw()
        .into_iter()
        .map(|v| v as f64 / 255.0)
        .collect();
    IntensityImage::new(h as usize, w as usize, data)
}

/// Reads `<dir>/<category>/*.png`, categories and files in name order.
pub fn load_image_dir(dir: &Path) -> Result<Vec<(String, Vec<IntensityImage>)>> {
    let sorted_entries = |d: &Path| -> Result<Vec<PathBuf>> {
        let mut v = std::fs::read_dir(d)
            .map_err(|e| Error::io(d, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(d, err)))
            .collect::<Result<Vec<_>>>()?;
        v.sort();
        Ok(v)
    };
    let mut out = Vec::new();
    for sub in sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()) {
        let name = sub
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Validation(format!("bad directory name {}", sub.display())))?
            .to_string();
        let images = sorted_entries(&sub)?
            .into_iter()
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
            })
            .map(|p| load_png(&p))
            .collect::<Result<Vec<_>>>()?;
        out.push((name, images));
    }
    Ok(out)
}
