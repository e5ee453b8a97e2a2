//! Maps between embedding spaces of different widths, fitted on anchor
//! tokens whose embeddings are known on both sides.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::Tensor;
use crate::linalg;
use crate::{Error, Result};

/// Row `i` of `source` and row `i` of `target` embed the same token.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    source: Tensor,
    target: Tensor,
}

impl AnchorSet {
    pub fn new(source: Tensor, target: Tensor) -> Result<Self> {
        if source.shape().len() != 2 || target.shape().len() != 2 {
            return Err(Error::shape("anchor matrices must be two-dimensional"));
        }
        if source.rows() != target.rows() {
            return Err(Error::shape(format!(
                "{} source anchors but {} target anchors",
                source.rows(),
                target.rows()
            )));
        }
        if source.rows() == 0 {
            return Err(Error::invalid("anchor set is empty"));
        }
        Ok(AnchorSet { source, target })
    }

    pub fn source(&self) -> &Tensor {
        &self.source
    }

    pub fn target(&self) -> &Tensor {
        &self.target
    }

    pub fn len(&self) -> usize {
        self.source.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_src(&self) -> usize {
        self.source.cols()
    }

    pub fn d_tgt(&self) -> usize {
        self.target.cols()
    }

    /// Fewer anchors than source dimensions leaves the fit underdetermined.
    pub fn is_well_posed(&self) -> bool {
        self.len() >= self.d_src()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapMethod {
    Lstsq,
    Procrustes,
}

impl fmt::Display for MapMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MapMethod::Lstsq => "lstsq",
            MapMethod::Procrustes => "procrustes",
        })
    }
}

impl FromStr for MapMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstsq" => Ok(MapMethod::Lstsq),
            "procrustes" => Ok(MapMethod::Procrustes),
            _ => Err(Error::invalid(format!("unknown map method '{s}'"))),
        }
    }
}

/// A fitted `d_src × d_tgt` map applied as `x·W`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMap {
    pub w: Tensor,
    pub method: MapMethod,
    /// Mean squared Euclidean distance `‖x_i W − y_i‖²` over the anchors.
    pub residual: f64,
}

impl LinearMap {
    pub fn d_src(&self) -> usize {
        self.w.rows()
    }

    pub fn d_tgt(&self) -> usize {
        self.w.cols()
    }
}

/// Mean over anchors of `‖x_i W − y_i‖²`.
pub fn residual(anchors: &AnchorSet, w: &Tensor) -> Result<f64> {
    let pred = anchors.source.matmul(w)?;
    if pred.shape() != anchors.target.shape() {
        return Err(Error::shape("map output width differs from target anchors"));
    }
    let sq: f64 = pred.data().iter().zip(anchors.target.data()).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sq / anchors.len() as f64)
}

/// A ridge of `1e-6` times the mean squared anchor coordinate, the default
/// used when no ridge is given.
pub fn default_ridge(anchors: &AnchorSet) -> f64 {
    let x = anchors.source.data();
    1e-6 * x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Minimises `mean ‖x_i W − y_i‖² + ridge·‖W‖²` through the normal
/// equations `(XᵀX + N·ridge·I) W = XᵀY`.
pub fn fit_lstsq(anchors: &AnchorSet, ridge: f64) -> Result<LinearMap> {
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::invalid(format!("ridge {ridge} must be a non-negative number")));
    }
    let n = anchors.len() as f64;
    let mut xtx = linalg::gram(&anchors.source, &anchors.source);
    let d = xtx.rows();
    for i in 0..d {
        xtx.data_mut()[i * d + i] += n * ridge;
    }
    let xty = linalg::gram(&anchors.source, &anchors.target);
    let w = linalg::cholesky_solve(&xtx, &xty, 1e-12).ok_or_else(|| {
        Error::Numerical(format!(
            "least-squares system is singular ({} anchors, {} source dims); use a ridge > 0",
            anchors.len(),
            d
        ))
    })?;
    let residual = residual(anchors, &w)?;
    Ok(LinearMap {
        w,
        method: MapMethod::Lstsq,
        residual,
    })
}

/// The same objective as [`fit_lstsq`] minimised by full-batch gradient
/// descent from `W = 0`. The step is `1 / L` with `L` the trace bound on the
/// largest Hessian eigenvalue; iteration stops after `max_iters` or once the
/// gradient norm falls below `tol` times its initial value.
pub fn fit_lstsq_gd(anchors: &AnchorSet, ridge: f64, max_iters: usize, tol: f64) -> Result<LinearMap> {
    let n = anchors.len() as f64;
    let xtx = linalg::gram(&anchors.source, &anchors.source);
    let xty = linalg::gram(&anchors.source, &anchors.target);
    let d = xtx.rows();
    let lipschitz = (0..d).map(|i| xtx.get(i, i)).sum::<f64>() / n + ridge;
    if lipschitz <= 0.0 {
        return Err(Error::Numerical("source anchors are all zero".into()));
    }
    let step = 1.0 / lipschitz;
    let mut w = Tensor::zeros(&[d, anchors.d_tgt()]);
    let mut first = None;
    for _ in 0..max_iters {
        // ∇/2 = (XᵀX W − XᵀY)/N + ridge·W
        let mut g = xtx.matmul(&w)?;
        for ((gi, yi), wi) in g.data_mut().iter_mut().zip(xty.data()).zip(w.data()) {
            *gi = (*gi - yi) / n + ridge * wi;
        }
        let norm = g.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let first = *first.get_or_insert(norm);
        if norm <= tol * first || norm == 0.0 {
            break;
        }
        for (wi, gi) in w.data_mut().iter_mut().zip(g.data()) {
            *wi -= step * gi;
        }
    }
    let residual = residual(anchors, &w)?;
    Ok(LinearMap {
        w,
        method: MapMethod::Lstsq,
        residual,
    })
}

fn unit_rows(t: &Tensor) -> Result<Tensor> {
    let mut out = t.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Numerical(format!("row {i} has zero norm")));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

/// Orthogonal Procrustes: with `sourceᵀ·target = U Σ Vᵀ`, `W = U Vᵀ`, which
/// has orthonormal rows. `normalize` fits on unit-length anchor rows instead
/// of the raw ones; the residual is always reported on the raw anchors.
pub fn fit_procrustes(anchors: &AnchorSet, normalize: bool) -> Result<LinearMap> {
    if anchors.d_src() > anchors.d_tgt() {
        return Err(Error::shape(format!(
            "procrustes needs d_src ≤ d_tgt, got {} > {}; swap the roles of the two spaces",
            anchors.d_src(),
            anchors.d_tgt()
        )));
    }
    let m = if normalize {
        linalg::gram(&unit_rows(&anchors.source)?, &unit_rows(&anchors.target)?)
    } else {
        linalg::gram(&anchors.source, &anchors.target)
    };
    let w = linalg::polar_factor(&m)?;
    let residual = residual(anchors, &w)?;
    Ok(LinearMap {
        w,
        method: MapMethod::Procrustes,
        residual,
    })
}

pub fn apply_map(map: &LinearMap, embeddings: &Tensor) -> Result<Tensor> {
    if embeddings.shape().len() != 2 || embeddings.cols() != map.d_src() {
        return Err(Error::shape(format!(
            "embeddings have shape {:?}, map expects {} columns",
            embeddings.shape(),
            map.d_src()
        )));
    }
    embeddings.matmul(&map.w)
}

/// `1 − cos(a, b)`, clamped at zero. Both vectors must be non-zero.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (1.0 - dot / (na * nb)).max(0.0)
}

pub(crate) fn check_nonzero_rows(t: &Tensor, what: &str) -> Result<()> {
    for i in 0..t.rows() {
        if t.row(i).iter().all(|&v| v == 0.0) {
            return Err(Error::Numerical(format!("{what} row {i} has zero norm; cosine is undefined")));
        }
    }
    Ok(())
}

/// Indices and cosine distances of the `k` rows of `pool` nearest to
/// `query`, closest first, ties broken by the lower index.
pub fn nearest_rows(query: &[f64], pool: &Tensor, k: usize) -> Vec<(usize, f64)> {
    let mut d: Vec<(usize, f64)> = (0..pool.rows()).map(|j| (j, cosine_distance(query, pool.row(j)))).collect();
    d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    d.truncate(k);
    d
}

/// Each row becomes `Σ w_i · target_i` over its `k` cosine-nearest source
/// anchors, with `w_i ∝ 1 / (dist_i + 1e-8)` summing to one.
pub fn knn_transform(new_embeddings: &Tensor, anchors: &AnchorSet, k: usize) -> Result<Tensor> {
    if k == 0 || k > anchors.len() {
        return Err(Error::invalid(format!("k = {k} must be in 1..={}", anchors.len())));
    }
    if new_embeddings.shape().len() != 2 || new_embeddings.cols() != anchors.d_src() {
        return Err(Error::shape(format!(
            "embeddings have shape {:?}, anchors have {} source columns",
            new_embeddings.shape(),
            anchors.d_src()
        )));
    }
    check_nonzero_rows(new_embeddings, "embedding")?;
    check_nonzero_rows(&anchors.source, "source anchor")?;
    let mut out = Tensor::zeros(&[new_embeddings.rows(), anchors.d_tgt()]);
    for i in 0..new_embeddings.rows() {
        let nearest = nearest_rows(new_embeddings.row(i), &anchors.source, k);
        let weights: Vec<f64> = nearest.iter().map(|(_, d)| 1.0 / (d + 1e-8)).collect();
        let total: f64 = weights.iter().sum();
        let row = out.row_mut(i);
        for ((j, _), w) in nearest.iter().zip(&weights) {
            let w = w / total;
            row.iter_mut().zip(anchors.target.row(*j)).for_each(|(o, t)| *o += w * t);
        }
    }
    Ok(out)
}

const EMB_HEADER: &str = "emb";

fn emb_bytes(t: &Tensor, method: Option<MapMethod>) -> Vec<u8> {
    let mut out = format!("{EMB_HEADER} v1 {} {}\n", t.rows(), t.cols()).into_bytes();
    if let Some(m) = method {
        out.extend_from_slice(format!("method {m}\n").as_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

fn take_line<'a>(buf: &mut &'a [u8], kind: &'static str) -> Result<&'a str> {
    let nl = buf.iter().position(|&b| b == b'\n').ok_or(Error::Truncated { kind })?;
    let line = std::str::from_utf8(&buf[..nl]).map_err(|_| Error::Format {
        kind,
        detail: "header is not UTF-8".into(),
    })?;
    *buf = &buf[nl + 1..];
    Ok(line)
}

fn parse_emb(mut buf: &[u8], kind: &'static str, with_method: bool) -> Result<(Tensor, Option<MapMethod>)> {
    let bad = |detail: &str| Error::Format {
        kind,
        detail: detail.to_string(),
    };
    let header = take_line(&mut buf, kind)?;
    let parts: Vec<&str> = header.split(' ').collect();
    if parts.len() != 4 || parts[0] != EMB_HEADER {
        return Err(bad("bad header"));
    }
    if parts[1] != "v1" {
        return Err(Error::Version {
            kind,
            found: parts[1].to_string(),
        });
    }
    let rows: usize = parts[2].parse().map_err(|_| bad("bad row count"))?;
    let cols: usize = parts[3].parse().map_err(|_| bad("bad column count"))?;
    let method = if with_method {
        let line = take_line(&mut buf, kind)?;
        let tag = line.strip_prefix("method ").ok_or_else(|| bad("missing method line"))?;
        Some(tag.parse()?)
    } else {
        None
    };
    let want = rows * cols * 4;
    if buf.len() < want {
        return Err(Error::Truncated { kind });
    }
    if buf.len() > want {
        return Err(bad("trailing bytes"));
    }
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok((Tensor::from_vec(&[rows, cols], data)?, method))
}

/// Writes `emb v1 <rows> <cols>` followed by 32-bit little-endian values.
pub fn save_embeddings(path: &Path, t: &Tensor) -> Result<()> {
    std::fs::write(path, emb_bytes(t, None)).map_err(|e| Error::io(path, e))
}

pub fn load_embeddings(path: &Path) -> Result<Tensor> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_emb(&buf, "embedding matrix", false)?.0)
}

/// Same layout as an embedding file with a `method <tag>` line after the
/// header. The residual is not stored.
pub fn save_map(path: &Path, map: &LinearMap) -> Result<()> {
    std::fs::write(path, emb_bytes(&map.w, Some(map.method))).map_err(|e| Error::io(path, e))
}

pub fn load_map(path: &Path) -> Result<LinearMap> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, method) = parse_emb(&buf, "linear map", true)?;
    Ok(LinearMap {
        w,
        method: method.expect("parsed with method"),
        residual: f64::NAN,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = crate::seed::rng(seed);
        Tensor::from_vec(&[rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn orthogonal(d: usize, seed: u64) -> Tensor {
        linalg::polar_factor(&random(d, d, seed)).unwrap()
    }

    #[test]
    fn lstsq_identity() {
        let x = random(20, 6, 1);
        let map = fit_lstsq(&AnchorSet::new(x.clone(), x).unwrap(), 0.0).unwrap();
        let eye = Tensor::from_vec(&[6, 6], (0..36).map(|i| if i % 7 == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
        assert!(map.w.max_abs_diff(&eye) < 1e-8);
    }

    #[test]
    fn lstsq_singular_without_ridge() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]]).unwrap();
        let y = random(3, 3, 2);
        let anchors = AnchorSet::new(x, y).unwrap();
        let err = fit_lstsq(&anchors, 0.0).unwrap_err();
        assert!(err.to_string().contains("ridge"));
        assert!(fit_lstsq(&anchors, 1e-3).is_ok());
    }

    #[test]
    fn lstsq_scale_equivariance() {
        let x = random(30, 4, 3);
        let y = random(30, 7, 4);
        let w1 = fit_lstsq(&AnchorSet::new(x.clone(), y.clone()).unwrap(), 0.0).unwrap().w;
        let y3 = Tensor::from_vec(y.shape(), y.data().iter().map(|v| 3.0 * v).collect()).unwrap();
        let w3 = fit_lstsq(&AnchorSet::new(x, y3).unwrap(), 0.0).unwrap().w;
        let scaled = Tensor::from_vec(w1.shape(), w1.data().iter().map(|v| 3.0 * v).collect()).unwrap();
        assert!(w3.max_abs_diff(&scaled) < 1e-10);
    }

    #[test]
    fn gradient_descent_matches_closed_form() {
        let anchors = AnchorSet::new(random(80, 6, 5), random(80, 9, 6)).unwrap();
        let exact = fit_lstsq(&anchors, 0.0).unwrap();
        let gd = fit_lstsq_gd(&anchors, 0.0, 20_000, 1e-10).unwrap();
        assert!((gd.residual - exact.residual).abs() < 1e-3);
        assert!(gd.residual >= exact.residual - 1e-12);
    }

    #[test]
    fn procrustes_embeds_into_larger_space() {
        // Orthonormal columns, target padded with zeros.
        let q = orthogonal(6, 7);
        let x = Tensor::from_vec(&[6, 3], (0..6).flat_map(|i| q.row(i)[..3].to_vec()).collect()).unwrap();
        let y = Tensor::from_vec(&[6, 5], (0..6).flat_map(|i| {
            let mut r = q.row(i)[..3].to_vec();
            r.extend([0.0, 0.0]);
            r
        }).collect()).unwrap();
        let map = fit_procrustes(&AnchorSet::new(x, y).unwrap(), false).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((map.w.get(i, j) - want).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn procrustes_rotation_invariance() {
        let anchors = AnchorSet::new(random(40, 4, 8), random(40, 6, 9)).unwrap();
        let w = fit_procrustes(&anchors, false).unwrap().w;
        let r = orthogonal(6, 10);
        let rotated = AnchorSet::new(anchors.source().clone(), anchors.target().matmul(&r).unwrap()).unwrap();
        let w2 = fit_procrustes(&rotated, false).unwrap().w;
        assert!(w2.max_abs_diff(&w.matmul(&r).unwrap()) < 1e-8);
    }

    #[test]
    fn procrustes_rejects_shrinking_map() {
        let anchors = AnchorSet::new(random(10, 5, 1), random(10, 3, 2)).unwrap();
        assert!(matches!(fit_procrustes(&anchors, false), Err(Error::Shape(_))));
    }

    #[test]
    fn normalized_procrustes_is_still_orthonormal() {
        let anchors = AnchorSet::new(random(30, 3, 11), random(30, 4, 12)).unwrap();
        let w = fit_procrustes(&anchors, true).unwrap().w;
        let wwt = w.matmul(&w.transpose()).unwrap();
        for i in 0..3 {
            assert!((wwt.get(i, i) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn apply_map_checks() {
        let map = LinearMap {
            w: random(3, 4, 13),
            method: MapMethod::Lstsq,
            residual: 0.0,
        };
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap();
        let y = apply_map(&map, &x).unwrap();
        for j in 0..4 {
            let want: f64 = (0..3).map(|i| x.get(0, i) * map.w.get(i, j)).sum();
            assert!((y.get(0, j) - want).abs() < 1e-15);
        }
        let zero = apply_map(&map, &Tensor::zeros(&[2, 3])).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        assert!(apply_map(&map, &Tensor::zeros(&[2, 4])).is_err());
    }

    #[test]
    fn knn_inverse_distance_weights() {
        // cos = 0.9 and 0.7: distances 0.1 and 0.3.
        let at = |c: f64| vec![c, (1.0 - c * c).sqrt()];
        let source = Tensor::from_rows(&[at(0.9), at(0.7)]).unwrap();
        let target = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let anchors = AnchorSet::new(source, target).unwrap();
        let out = knn_transform(&Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(), &anchors, 2).unwrap();
        assert!((out.get(0, 0) - 0.75).abs() < 1e-6);
        assert!((out.get(0, 1) - 0.25).abs() < 1e-6);
    }

    #[test]
    fn knn_coincident_and_single_neighbour() {
        let anchors = AnchorSet::new(random(10, 4, 14), random(10, 6, 15)).unwrap();
        let query = Tensor::from_vec(&[1, 4], anchors.source().row(3).to_vec()).unwrap();
        let out = knn_transform(&query, &anchors, 5).unwrap();
        let diff: f64 = out.row(0).iter().zip(anchors.target().row(3)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6);

        let q = random(7, 4, 16);
        let out = knn_transform(&q, &anchors, 1).unwrap();
        for i in 0..7 {
            let (j, _) = nearest_rows(q.row(i), anchors.source(), 1)[0];
            assert_eq!(out.row(i), anchors.target().row(j));
        }
    }

    #[test]
    fn knn_errors() {
        let anchors = AnchorSet::new(random(3, 2, 1), random(3, 2, 2)).unwrap();
        assert!(knn_transform(&Tensor::zeros(&[1, 2]), &anchors, 1).is_err());
        assert!(knn_transform(&random(1, 2, 3), &anchors, 4).is_err());
        assert!(knn_transform(&random(1, 2, 3), &anchors, 0).is_err());
    }

    #[test]
    fn embedding_and_map_files() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 3.0], vec![0.0, 1.0]]).unwrap();
        let p = dir.path().join("e.emb");
        save_embeddings(&p, &t).unwrap();
        assert!(std::fs::read(&p).unwrap().starts_with(b"emb v1 3 2\n"));
        assert_eq!(load_embeddings(&p).unwrap(), t);

        let map = LinearMap {
            w: t.clone(),
            method: MapMethod::Procrustes,
            residual: 0.5,
        };
        let mp = dir.path().join("m.map");
        save_map(&mp, &map).unwrap();
        let back = load_map(&mp).unwrap();
        assert_eq!((back.w, back.method), (t, MapMethod::Procrustes));
        assert!(load_embeddings(&mp).is_err());

        let mut bytes = std::fs::read(&p).unwrap();
        bytes.pop();
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_embeddings(&p), Err(Error::Truncated { .. })));
    }
}
