//! Problem instances: the adversarial lower-bound construction, synthetic
//! generators, and catalog files.
//!
//! Synthetic generators reserve the last feature coordinate for a constant
//! intercept `β`, so `θ*` can shift every `μ(i)` into `[0, 1]` without
//! rejection sampling. The remaining `d − 1` coordinates carry the
//! product-specific geometry.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::environment::{dot, norm, Catalog, GroundTruth};
use crate::error::{Error, Result};
use crate::seed::rng_from_seed;

/// Intercept value stored in the last coordinate of synthetic features.
pub const FEATURE_BIAS: f64 = 0.5;

const REALIZABILITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceKind {
    LowerBound,
    ClusteredGaussian,
    UniformSphere,
    FromFile,
}

impl std::str::FromStr for InstanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "lower_bound" | "lowerbound" => Ok(InstanceKind::LowerBound),
            "clustered_gaussian" | "clustered" => Ok(InstanceKind::ClusteredGaussian),
            "uniform_sphere" | "sphere" | "uniform" => Ok(InstanceKind::UniformSphere),
            "from_file" | "file" => Ok(InstanceKind::FromFile),
            other => Err(Error::domain(format!("unknown instance kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub kind: InstanceKind,
    pub n_products: usize,
    pub dim: usize,
    pub k_select: usize,
    #[serde(default = "default_clusters")]
    pub cluster_count: usize,
    #[serde(default = "default_spread")]
    pub cluster_spread: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

fn default_clusters() -> usize {
    8
}

fn default_spread() -> f64 {
    0.05
}

impl InstanceSpec {
    pub fn lower_bound(dim: usize, k_select: usize) -> Self {
        Self {
            kind: InstanceKind::LowerBound,
            n_products: dim * k_select,
            dim,
            k_select,
            cluster_count: default_clusters(),
            cluster_spread: default_spread(),
            seed: 0,
            path: None,
        }
    }

    pub fn clustered(
        n_products: usize,
        dim: usize,
        k_select: usize,
        cluster_count: usize,
        cluster_spread: f64,
        seed: u64,
    ) -> Self {
        Self {
            kind: InstanceKind::ClusteredGaussian,
            n_products,
            dim,
            k_select,
            cluster_count,
            cluster_spread,
            seed,
            path: None,
        }
    }

    pub fn uniform_sphere(n_products: usize, dim: usize, k_select: usize, seed: u64) -> Self {
        Self {
            kind: InstanceKind::UniformSphere,
            n_products,
            dim,
            k_select,
            cluster_count: default_clusters(),
            cluster_spread: default_spread(),
            seed,
            path: None,
        }
    }

    pub fn from_file(path: impl Into<PathBuf>, k_select: usize) -> Self {
        Self {
            kind: InstanceKind::FromFile,
            n_products: 0,
            dim: 0,
            k_select,
            cluster_count: default_clusters(),
            cluster_spread: default_spread(),
            seed: 0,
            path: Some(path.into()),
        }
    }

    /// Applies the kind-specific constraints (`N = K·d` for the lower bound).
    pub fn normalized(mut self) -> Self {
        if self.kind == InstanceKind::LowerBound {
            self.n_products = self.k_select * self.dim;
        }
        self
    }
}

/// Builds the catalog and ground truth an [`InstanceSpec`] describes.
pub fn build_instance(spec: &InstanceSpec) -> Result<(Catalog, GroundTruth)> {
    let (catalog, truth) = match spec.kind {
        InstanceKind::LowerBound => lower_bound_instance(spec.dim, spec.k_select)?,
        InstanceKind::ClusteredGaussian => clustered_gaussian_instance(spec)?,
        InstanceKind::UniformSphere => {
            uniform_sphere_instance(spec.n_products, spec.dim, spec.seed)?
        }
        InstanceKind::FromFile => {
            let path = spec
                .path
                .as_ref()
                .ok_or_else(|| Error::domain("from_file instance needs a path"))?;
            match load_catalog(path)? {
                (c, Some(t)) => (c, t),
                (_, None) => {
                    return Err(Error::domain(format!(
                        "{}: catalog has no mu column, cannot simulate",
                        path.display()
                    )))
                }
            }
        }
    };
    if spec.k_select > catalog.n_products() {
        return Err(Error::domain(format!(
            "k_select = {} exceeds catalog size {}",
            spec.k_select,
            catalog.n_products()
        )));
    }
    Ok((catalog, truth))
}

/// `d` groups of `K` identical products; group `i` (1-based) has feature
/// `(1/2 + i/(2d)) e_i` and `θ* = e₁`. Product `j` belongs to group
/// `j / K + 1`.
pub fn lower_bound_instance(dim: usize, k_select: usize) -> Result<(Catalog, GroundTruth)> {
    if dim < 2 {
        return Err(Error::domain(format!("lower-bound instance needs d >= 2, got {dim}")));
    }
    if k_select == 0 {
        return Err(Error::domain("lower-bound instance needs K >= 1"));
    }
    let n = dim * k_select;
    let mut features = vec![0.0; n * dim];
    for group in 0..dim {
        let scale = 0.5 + (group + 1) as f64 / (2 * dim) as f64;
        for member in 0..k_select {
            let row = group * k_select + member;
            features[row * dim + group] = scale;
        }
    }
    let catalog = Catalog::new(n, dim, features)?;
    let mut theta = vec![0.0; dim];
    theta[0] = 1.0;
    let truth = GroundTruth::new(&catalog, theta)?;
    Ok((catalog, truth))
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit_vec<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, len);
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Embeds `d − 1`-dimensional geometry rows (each of norm ≤ 1) with the
/// intercept and draws a feasible `θ*`.
fn embed_with_intercept<R: Rng + ?Sized>(
    geometry: &[Vec<f64>],
    dim: usize,
    rng: &mut R,
) -> Result<(Catalog, GroundTruth)> {
    let scale = (1.0 - FEATURE_BIAS * FEATURE_BIAS).sqrt();
    let mut features = Vec::with_capacity(geometry.len() * dim);
    for z in geometry {
        features.extend(z.iter().map(|v| v * scale));
        features.push(FEATURE_BIAS);
    }
    let catalog = Catalog::new(geometry.len(), dim, features)?;

    // θ* uniform on the unit ball, then its geometry part is rescaled and
    // the intercept weight chosen so that min μ = 0 and max μ ≤ 1.
    let radius = rng.random::<f64>().powf(1.0 / dim as f64);
    let direction: Vec<f64> = unit_vec(rng, dim).into_iter().map(|v| v * radius).collect();
    let v = &direction[..dim - 1];
    let spread = (0..catalog.n_products())
        .map(|i| dot(&catalog.feature(i)[..dim - 1], v))
        .fold(0.0f64, |m, g| m.max(g.abs()));
    let mut theta = vec![0.0; dim];
    if spread < 1e-12 {
        theta[dim - 1] = 0.5 / FEATURE_BIAS;
    } else {
        let v_norm2 = dot(v, v);
        let s = (0.5 / spread)
            .min(1.0 / (v_norm2 + (spread / FEATURE_BIAS).powi(2)).sqrt());
        for (t, vi) in theta.iter_mut().zip(v) {
            *t = s * vi;
        }
        theta[dim - 1] = s * spread / FEATURE_BIAS;
    }
    let truth = GroundTruth::new(&catalog, theta)?;
    Ok((catalog, truth))
}

fn check_generated(n_products: usize, dim: usize) -> Result<()> {
    if dim < 2 {
        return Err(Error::domain(format!(
            "synthetic instances need d >= 2 (one coordinate is the intercept), got {dim}"
        )));
    }
    if n_products == 0 {
        return Err(Error::domain("n_products must be at least 1"));
    }
    Ok(())
}

/// Products spread uniformly over the unit sphere of the geometry
/// coordinates.
pub fn uniform_sphere_instance(
    n_products: usize,
    dim: usize,
    seed: u64,
) -> Result<(Catalog, GroundTruth)> {
    check_generated(n_products, dim)?;
    let mut rng = rng_from_seed(seed);
    let geometry: Vec<Vec<f64>> = (0..n_products).map(|_| unit_vec(&mut rng, dim - 1)).collect();
    embed_with_intercept(&geometry, dim, &mut rng)
}

/// Products grouped around `cluster_count` random unit centroids with
/// Gaussian perturbation of scale `cluster_spread`. Product `i` belongs to
/// cluster `i mod cluster_count`. Rows longer than 1 are scaled back onto
/// the unit sphere.
pub fn clustered_gaussian_instance(spec: &InstanceSpec) -> Result<(Catalog, GroundTruth)> {
    let (n, dim, clusters) = (spec.n_products, spec.dim, spec.cluster_count);
    check_generated(n, dim)?;
    if clusters == 0 || clusters > n {
        return Err(Error::domain(format!(
            "cluster_count must lie in 1..={n}, got {clusters}"
        )));
    }
    if !(spec.cluster_spread >= 0.0 && spec.cluster_spread.is_finite()) {
        return Err(Error::domain("cluster_spread must be finite and >= 0"));
    }
    let mut rng = rng_from_seed(spec.seed);
    let g = dim - 1;
    let centroids: Vec<Vec<f64>> = (0..clusters).map(|_| unit_vec(&mut rng, g)).collect();
    let mut geometry: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let c = &centroids[i % clusters];
            if spec.cluster_spread == 0.0 {
                return c.clone();
            }
            let noise = gaussian_vec(&mut rng, g);
            c.iter()
                .zip(noise)
                .map(|(ci, e)| ci + spec.cluster_spread * e)
                .collect()
        })
        .collect();
    for z in &mut geometry {
        let n = norm(z);
        if n > 1.0 {
            for v in z.iter_mut() {
                *v /= n;
            }
        }
    }
    embed_with_intercept(&geometry, dim, &mut rng)
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads a catalog CSV with header `id,f0,…,f{d-1}[,mu]`.
///
/// When a `mu` column is present, `θ*` is refit by least squares and the
/// fitted `μ = Xθ*` is what the returned ground truth holds.
pub fn load_catalog(path: impl AsRef<Path>) -> Result<(Catalog, Option<GroundTruth>)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let headers = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.first() != Some(&"id") {
        return Err(parse_err(path, 1, "first column must be 'id'"));
    }
    let has_mu = cols.last() == Some(&"mu");
    let dim = cols.len() - 1 - usize::from(has_mu);
    if dim == 0 {
        return Err(parse_err(path, 1, "no feature columns"));
    }
    for (j, name) in cols[1..=dim].iter().enumerate() {
        if *name != format!("f{j}") {
            return Err(parse_err(path, 1, format!("expected column 'f{j}', found '{name}'")));
        }
    }

    let mut labels = Vec::new();
    let mut features = Vec::new();
    let mut mu = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != cols.len() {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", cols.len(), record.len()),
            ));
        }
        labels.push(record[0].to_string());
        for j in 1..cols.len() {
            let v: f64 = record[j]
                .parse()
                .map_err(|_| parse_err(path, line, format!("bad number '{}'", &record[j])))?;
            if j <= dim {
                features.push(v);
            } else {
                mu.push(v);
            }
        }
    }
    let n = labels.len();
    if n == 0 {
        return Err(parse_err(path, 1, "catalog has no products"));
    }
    let catalog = Catalog::new(n, dim, features)?.with_labels(labels)?;
    let truth = if has_mu {
        Some(fit_ground_truth(&catalog, &mu, path)?)
    } else {
        None
    };
    Ok((catalog, truth))
}

fn fit_ground_truth(catalog: &Catalog, mu: &[f64], path: &Path) -> Result<GroundTruth> {
    let (n, d) = (catalog.n_products(), catalog.dim());
    let x = DMatrix::from_row_slice(n, d, catalog.features());
    let y = DVector::from_column_slice(mu);
    let theta = x
        .clone()
        .svd(true, true)
        .solve(&y, 1e-14)
        .map_err(|e| Error::Conditioning(format!("least-squares fit failed: {e}")))?;
    let truth = GroundTruth::new(catalog, theta.as_slice().to_vec())?;
    let residual = truth
        .mu()
        .iter()
        .zip(mu)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if residual > REALIZABILITY_TOL {
        warn!(
            "{}: mu is not linear in the features (max residual {residual:e}); using the fitted values",
            path.display()
        );
    }
    Ok(truth)
}

/// Writes a catalog (and optionally `μ`) in the format [`load_catalog`]
/// reads. Values use the shortest representation that round-trips.
pub fn save_catalog(
    path: impl AsRef<Path>,
    catalog: &Catalog,
    truth: Option<&GroundTruth>,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let mut header = String::from("id");
    for j in 0..catalog.dim() {
        header.push_str(&format!(",f{j}"));
    }
    if truth.is_some() {
        header.push_str(",mu");
    }
    writeln!(out, "{header}").map_err(io)?;
    for i in 0..catalog.n_products() {
        let mut row = catalog.label(i);
        for v in catalog.feature(i) {
            row.push_str(&format!(",{v}"));
        }
        if let Some(t) = truth {
            row.push_str(&format!(",{}", t.mu()[i]));
        }
        writeln!(out, "{row}").map_err(io)?;
    }
    out.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lower_bound_small() {
        let (c, t) = lower_bound_instance(2, 1).unwrap();
        assert_eq!(c.feature(0), &[0.75, 0.0]);
        assert_eq!(c.feature(1), &[0.0, 1.0]);
        assert_eq!(t.mu(), &[0.75, 0.0]);
        assert_eq!(t.theta_star(), &[1.0, 0.0]);
    }

    #[test]
    fn lower_bound_optimal_value() {
        let (c, t) = lower_bound_instance(10, 100).unwrap();
        assert_eq!(c.n_products(), 1000);
        assert!((t.optimal_value(100).unwrap() - 55.0).abs() < 1e-9);
        for i in 0..1000 {
            let group = i / 100 + 1;
            let expected = 0.5 + group as f64 / 20.0;
            assert!((norm(c.feature(i)) - expected).abs() < 1e-15);
            assert!(norm(c.feature(i)) <= 1.0);
        }
        assert!(lower_bound_instance(1, 5).is_err());
    }

    #[test]
    fn generated_instances_are_feasible() {
        let spec = InstanceSpec::clustered(1000, 20, 10, 8, 0.05, 7);
        let (c, t) = build_instance(&spec).unwrap();
        assert!(norm(t.theta_star()) <= 1.0 + 1e-9);
        for i in 0..c.n_products() {
            assert!(norm(c.feature(i)) <= 1.0 + 1e-9);
        }
        assert!(t.mu().iter().all(|&m| (-1e-9..=1.0 + 1e-9).contains(&m)));

        let (c, t) = uniform_sphere_instance(300, 5, 1).unwrap();
        assert!(norm(t.theta_star()) <= 1.0 + 1e-9);
        assert!((0..300).all(|i| norm(c.feature(i)) <= 1.0 + 1e-9));
        assert!(t.mu().iter().all(|&m| (-1e-9..=1.0 + 1e-9).contains(&m)));
    }

    #[test]
    fn zero_spread_collapses_clusters() {
        let spec = InstanceSpec::clustered(40, 6, 4, 4, 0.0, 3);
        let (c, _) = build_instance(&spec).unwrap();
        for i in 4..40 {
            assert_eq!(c.feature(i), c.feature(i % 4));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = InstanceSpec::clustered(100, 8, 4, 3, 0.1, 42);
        assert_eq!(build_instance(&spec).unwrap(), build_instance(&spec).unwrap());
        let other = InstanceSpec { seed: 43, ..spec.clone() };
        assert_ne!(build_instance(&spec).unwrap().0, build_instance(&other).unwrap().0);
    }

    #[test]
    fn lower_bound_spec_forces_size() {
        let mut spec = InstanceSpec::lower_bound(4, 3);
        spec.n_products = 7;
        assert_eq!(spec.normalized().n_products, 12);
    }

    #[test]
    fn instance_kind_parses() {
        assert_eq!("lower_bound".parse::<InstanceKind>().unwrap(), InstanceKind::LowerBound);
        assert_eq!("clustered".parse::<InstanceKind>().unwrap(), InstanceKind::ClusteredGaussian);
        assert!("bogus".parse::<InstanceKind>().is_err());
    }

    #[test]
    fn catalog_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lb.csv");
        let (c, t) = lower_bound_instance(3, 2).unwrap();
        save_catalog(&path, &c, Some(&t)).unwrap();
        let (c2, t2) = load_catalog(&path).unwrap();
        assert_eq!(c2.features(), c.features());
        assert_eq!(c2.dim(), c.dim());
        let t2 = t2.unwrap();
        for (a, b) in t2.mu().iter().zip(t.mu()) {
            assert!((a - b).abs() < 1e-12);
        }

        let (c, t) = uniform_sphere_instance(50, 4, 9).unwrap();
        save_catalog(&path, &c, None).unwrap();
        let (c3, none) = load_catalog(&path).unwrap();
        assert!(none.is_none());
        assert_eq!(c3.features(), c.features());
        assert_eq!(c3.label(7), "7");
        drop(t);
    }

    #[test]
    fn ragged_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "id,f0,f1\na,0.1,0.2\nb,0.3\n").unwrap();
        match load_catalog(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        std::fs::write(&path, "id,f0,f2\na,0.1,0.2\n").unwrap();
        assert!(matches!(load_catalog(&path), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(
            load_catalog(dir.path().join("missing.csv")),
            Err(Error::Io { .. })
        ));
    }
}
