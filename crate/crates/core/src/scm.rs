//! Invertible structural causal model over a [`LatentGraph`].
//!
//! Every latent and observable node applies a square mixing function to the
//! concatenation of its parents' values. A mixing function is a stack of
//! orthogonal linear maps, each followed by an element-wise leaky slope, so it
//! is bijective with a closed-form inverse and a Jacobian whose singular values
//! never drop below `alpha^layers`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{DimMap, GraphError, LatentGraph, Mask, NodeId, NodeKind, NodeSet};
use crate::locate::SharedInfo;
use crate::scalar::{lit, type_name, Scalar};

#[derive(Debug, Error)]
pub enum ScmError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("node `{0}` is exogenous and has no mixing function")]
    Exogenous(String),
    #[error("dimension mismatch at `{node}`: expected {expected}, got {got}")]
    DimensionMismatch { node: String, expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("node `{0}` cannot be recovered from the observables")]
    Unrecoverable(String),
    #[error("node `{0}` is missing from the dataset")]
    MissingNode(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("dataset format error: {0}")]
    Format(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ScmError + '_ {
    move |source| ScmError::Io { path: path.display().to_string(), source }
}

/// One orthogonal layer followed by a leaky slope.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T: Scalar> {
    pub weight: DMatrix<T>,
    pub bias: DVector<T>,
    /// Slope on negative pre-activations; 1 makes the layer linear.
    pub slope: T,
}

impl<T: Scalar> Layer<T> {
    fn act(&self, t: T) -> T {
        if t >= T::zero() {
            t
        } else {
            self.slope * t
        }
    }

    fn act_inv(&self, t: T) -> T {
        if t >= T::zero() {
            t
        } else {
            t / self.slope
        }
    }

    fn act_grad(&self, t: T) -> T {
        if t >= T::zero() {
            T::one()
        } else {
            self.slope
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixingFunction<T: Scalar> {
    dim: usize,
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> MixingFunction<T> {
    pub fn new(dim: usize, layers: Vec<Layer<T>>) -> Result<Self, ScmError> {
        for (i, l) in layers.iter().enumerate() {
            if l.weight.nrows() != dim || l.weight.ncols() != dim || l.bias.len() != dim {
                return Err(ScmError::Config(format!("layer {i} is not {dim}x{dim}")));
            }
            if !(l.slope > T::zero() && l.slope <= T::one()) {
                return Err(ScmError::Config(format!("layer {i} slope {} outside (0, 1]", l.slope)));
            }
        }
        Ok(MixingFunction { dim, layers })
    }

    /// Orthogonal factors from the QR decomposition of Gaussian matrices.
    pub fn random(dim: usize, layers: usize, slope: T, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let layers = (0..layers)
            .map(|_| {
                let g = DMatrix::<f64>::from_fn(dim, dim, |_, _| StandardNormal.sample(rng));
                let qr = g.qr();
                let (mut q, r) = (qr.q(), qr.r());
                for j in 0..dim {
                    if r[(j, j)] < 0.0 {
                        q.column_mut(j).neg_mut();
                    }
                }
                let b = if bias {
                    DVector::from_fn(dim, |_, _| {
                        let z: f64 = StandardNormal.sample(rng);
                        lit::<T>(0.5 * z)
                    })
                } else {
                    DVector::zeros(dim)
                };
                Layer { weight: q.map(T::from_f64_lossy), bias: b, slope }
            })
            .collect();
        MixingFunction { dim, layers }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    fn check(&self, node: &str, got: usize) -> Result<(), ScmError> {
        if got == self.dim {
            Ok(())
        } else {
            Err(ScmError::DimensionMismatch { node: node.to_owned(), expected: self.dim, got })
        }
    }

    pub fn forward(&self, x: &DVector<T>) -> DVector<T> {
        let mut h = x.clone();
        for l in &self.layers {
            h = (&l.weight * h + &l.bias).map(|t| l.act(t));
        }
        h
    }

    pub fn inverse(&self, y: &DVector<T>) -> DVector<T> {
        let mut h = y.clone();
        for l in self.layers.iter().rev() {
            h = l.weight.tr_mul(&(h.map(|t| l.act_inv(t)) - &l.bias));
        }
        h
    }

    /// Row-wise forward map; each row of `x` is one input.
    pub fn forward_rows(&self, x: &DMatrix<T>) -> DMatrix<T> {
        let mut h = x.clone();
        for l in &self.layers {
            h = &h * l.weight.transpose();
            for mut row in h.row_iter_mut() {
                row += l.bias.transpose();
            }
            h.apply(|t| *t = l.act(*t));
        }
        h
    }

    pub fn inverse_rows(&self, y: &DMatrix<T>) -> DMatrix<T> {
        let mut h = y.clone();
        for l in self.layers.iter().rev() {
            h.apply(|t| *t = l.act_inv(*t));
            for mut row in h.row_iter_mut() {
                row -= l.bias.transpose();
            }
            h = &h * &l.weight;
        }
        h
    }

    pub fn jacobian(&self, x: &DVector<T>) -> DMatrix<T> {
        let mut j = DMatrix::<T>::identity(self.dim, self.dim);
        let mut h = x.clone();
        for l in &self.layers {
            let pre = &l.weight * h + &l.bias;
            let mut lj = &l.weight * j;
            for (i, mut row) in lj.row_iter_mut().enumerate() {
                row *= l.act_grad(pre[i]);
            }
            j = lj;
            h = pre.map(|t| l.act(t));
        }
        j
    }

    pub fn min_singular_value(&self, x: &DVector<T>) -> T {
        if self.dim == 0 {
            return T::one();
        }
        self.jacobian(x).singular_values().min()
    }
}

/// Construction parameters for [`build_scm`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScmConfig {
    /// Dimensions of exogenous nodes; missing entries default to 1.
    pub exo_dims: DimMap,
    pub layers: usize,
    pub alpha: f64,
    pub bias: bool,
    pub seed: u64,
}

impl Default for ScmConfig {
    fn default() -> Self {
        ScmConfig { exo_dims: DimMap::new(), layers: 2, alpha: 0.2, bias: false, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct ScmSpec<T: Scalar> {
    graph: LatentGraph,
    dims: Vec<usize>,
    dim_map: DimMap,
    mixers: Vec<Option<MixingFunction<T>>>,
    config: ScmConfig,
}

const MIXER_DOMAIN: &str = "mixer";
const NOISE_DOMAIN: &str = "noise";

fn fnv1a(parts: &[&str]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in parts {
        for b in p.bytes().chain([0xff]) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

/// Generator keyed by seed and node id, independent of node order.
fn node_rng(seed: u64, domain: &str, id: &NodeId) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(&[domain, id.as_str()]));
    rng
}

pub fn build_scm<T: Scalar>(g: &LatentGraph, config: &ScmConfig) -> Result<ScmSpec<T>, ScmError> {
    g.ensure_valid()?;
    if !(config.alpha > 0.0 && config.alpha <= 1.0) {
        return Err(ScmError::Config(format!("alpha {} outside (0, 1]", config.alpha)));
    }
    if config.layers == 0 {
        return Err(ScmError::Config("at least one layer is required".into()));
    }
    let dims = g.additive_dims_idx(&config.exo_dims)?;
    let slope = lit::<T>(config.alpha);
    let mixers = (0..g.node_count())
        .map(|v| {
            (g.kind_at(v) != NodeKind::Exogenous).then(|| {
                let mut rng = node_rng(config.seed, MIXER_DOMAIN, g.id(v));
                MixingFunction::random(dims[v], config.layers, slope, config.bias, &mut rng)
            })
        })
        .collect();
    let dim_map = g.nodes().map(|(id, _)| id.clone()).zip(dims.iter().copied()).collect();
    Ok(ScmSpec { graph: g.clone(), dims, dim_map, mixers, config: config.clone() })
}

impl<T: Scalar> ScmSpec<T> {
    pub fn graph(&self) -> &LatentGraph {
        &self.graph
    }

    pub fn dims(&self) -> &DimMap {
        &self.dim_map
    }

    pub fn dim(&self, id: &str) -> Result<usize, ScmError> {
        Ok(self.dims[self.graph.idx(id)?])
    }

    /// Total width of a node set.
    pub fn width(&self, set: &NodeSet) -> Result<usize, ScmError> {
        set.iter().map(|id| self.dim(id.as_str())).sum()
    }

    pub fn config(&self) -> &ScmConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn alpha(&self) -> f64 {
        self.config.alpha
    }

    pub fn layers(&self) -> usize {
        self.config.layers
    }

    pub fn mixer(&self, id: &str) -> Result<&MixingFunction<T>, ScmError> {
        self.mixers[self.graph.idx(id)?].as_ref().ok_or_else(|| ScmError::Exogenous(id.to_owned()))
    }

    /// Parent blocks of `v` in input order with their widths.
    pub fn input_blocks(&self, id: &str) -> Result<Vec<(NodeId, usize)>, ScmError> {
        let v = self.graph.idx(id)?;
        Ok(self.graph.parents_at(v).iter().map(|&p| (self.graph.id(p).clone(), self.dims[p])).collect())
    }

    fn spans(&self) -> BTreeMap<NodeId, (usize, usize)> {
        let mut offset = 0;
        self.graph
            .nodes()
            .zip(&self.dims)
            .map(|((id, _), &d)| {
                offset += d;
                (id.clone(), (offset - d, d))
            })
            .collect()
    }

    /// Ancestral sampling with standard normal exogenous draws.
    pub fn sample(&self, n: usize, seed: u64) -> Dataset<T> {
        let spans = self.spans();
        let width = self.dims.iter().sum();
        let mut values = DMatrix::<T>::zeros(n, width);
        let offsets: Vec<usize> = spans.values().map(|s| s.0).collect();
        let g = &self.graph;
        for v in g.topo_indices().expect("validated graph is acyclic") {
            let (off, d) = (offsets[v], self.dims[v]);
            match &self.mixers[v] {
                None => {
                    let mut rng = node_rng(seed, NOISE_DOMAIN, g.id(v));
                    for r in 0..n {
                        for k in 0..d {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            values[(r, off + k)] = lit(z);
                        }
                    }
                }
                Some(mixer) => {
                    let input = self.gather(&values, &offsets, g.parents_at(v));
                    let out = mixer.forward_rows(&input);
                    values.columns_mut(off, d).copy_from(&out);
                }
            }
        }
        Dataset { values, spans, seed }
    }

    fn gather(&self, values: &DMatrix<T>, offsets: &[usize], parents: &[usize]) -> DMatrix<T> {
        let width = parents.iter().map(|&p| self.dims[p]).sum();
        let mut input = DMatrix::<T>::zeros(values.nrows(), width);
        let mut at = 0;
        for &p in parents {
            let d = self.dims[p];
            input.columns_mut(at, d).copy_from(&values.columns(offsets[p], d));
            at += d;
        }
        input
    }

    /// Forward map of one node applied to its concatenated parent input.
    pub fn forward_node(&self, id: &str, input: &DVector<T>) -> Result<DVector<T>, ScmError> {
        let mixer = self.mixer(id)?;
        mixer.check(id, input.len())?;
        Ok(mixer.forward(input))
    }

    /// Inverts one node's mixing function and splits the result into parent blocks.
    pub fn invert_node(&self, id: &str, value: &DVector<T>) -> Result<BTreeMap<NodeId, DVector<T>>, ScmError> {
        let mixer = self.mixer(id)?;
        mixer.check(id, value.len())?;
        let x = mixer.inverse(value);
        let mut at = 0;
        let mut out = BTreeMap::new();
        for (p, d) in self.input_blocks(id)? {
            out.insert(p, x.rows(at, d).into_owned());
            at += d;
        }
        Ok(out)
    }

    pub fn jacobian_min_singular_value(&self, id: &str, point: &DVector<T>) -> Result<T, ScmError> {
        let mixer = self.mixer(id)?;
        mixer.check(id, point.len())?;
        Ok(mixer.min_singular_value(point))
    }

    /// Rebuilds every node's columns from the observable columns alone by
    /// inverting mixing functions from the bottom up.
    pub fn invert_from_observables(&self, ds: &Dataset<T>) -> Result<Dataset<T>, ScmError> {
        let g = &self.graph;
        let spans = self.spans();
        if spans != ds.spans {
            return Err(ScmError::Format("dataset spans do not match the model".into()));
        }
        let offsets: Vec<usize> = spans.values().map(|s| s.0).collect();
        let n = ds.n();
        let mut values = DMatrix::<T>::zeros(n, ds.width());
        let mut known = vec![false; g.node_count()];
        for v in 0..g.node_count() {
            if g.kind_at(v) == NodeKind::Observable {
                let (off, d) = (offsets[v], self.dims[v]);
                values.columns_mut(off, d).copy_from(&ds.values.columns(off, d));
                known[v] = true;
            }
        }
        let mut order = g.topo_indices()?;
        order.reverse();
        for v in order {
            let Some(mixer) = &self.mixers[v] else { continue };
            if !known[v] {
                return Err(ScmError::Unrecoverable(g.id(v).to_string()));
            }
            let x = mixer.inverse_rows(&values.columns(offsets[v], self.dims[v]).into_owned());
            let mut at = 0;
            for &p in g.parents_at(v) {
                let d = self.dims[p];
                if !known[p] {
                    values.columns_mut(offsets[p], d).copy_from(&x.columns(at, d));
                    known[p] = true;
                }
                at += d;
            }
        }
        Ok(Dataset { values, spans, seed: ds.seed })
    }

    /// Largest per-row relative error of the exogenous coordinates recovered
    /// by [`ScmSpec::invert_from_observables`].
    pub fn max_exogenous_relative_error(&self, ds: &Dataset<T>) -> Result<f64, ScmError> {
        let rec = self.invert_from_observables(ds)?;
        let exo: NodeSet = self.graph.nodes_of(NodeKind::Exogenous).cloned().collect();
        let truth = ds.columns_of(&exo)?;
        let got = rec.columns_of(&exo)?;
        let mut worst = 0.0f64;
        for r in 0..ds.n() {
            let (mut num, mut den) = (0.0f64, 0.0f64);
            for k in 0..truth.ncols() {
                let t = truth[(r, k)].as_f64();
                num += (got[(r, k)].as_f64() - t).powi(2);
                den += t * t;
            }
            worst = worst.max(num.sqrt() / den.sqrt().max(f64::MIN_POSITIVE));
        }
        Ok(worst)
    }
}

/// Sampled values of every node coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T: Scalar> {
    /// `n x D`, one row per sample.
    pub values: DMatrix<T>,
    /// node -> (column offset, width), tiling the columns in canonical node order
    pub spans: BTreeMap<NodeId, (usize, usize)>,
    pub seed: u64,
}

/// The five column blocks associated with a mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Blocks<T: Scalar> {
    pub c: DMatrix<T>,
    pub s_m: DMatrix<T>,
    pub s_mc: DMatrix<T>,
    pub x_m: DMatrix<T>,
    pub x_mc: DMatrix<T>,
}

#[derive(Serialize, Deserialize)]
struct SpanEntry {
    node: NodeId,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    dtype: String,
    rows: usize,
    cols: usize,
    order: String,
    endianness: String,
    seed: u64,
    spans: Vec<SpanEntry>,
    dims: DimMap,
}

const FORMAT_TAG: &str = "latentlab-dataset-v1";

impl<T: Scalar> Dataset<T> {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn span(&self, id: &str) -> Result<(usize, usize), ScmError> {
        self.spans.get(&NodeId::from(id)).copied().ok_or_else(|| ScmError::MissingNode(id.to_owned()))
    }

    pub fn block(&self, id: &str) -> Result<DMatrix<T>, ScmError> {
        let (off, d) = self.span(id)?;
        Ok(self.values.columns(off, d).into_owned())
    }

    /// Columns of a node set, concatenated in canonical node order.
    pub fn columns_of(&self, set: &NodeSet) -> Result<DMatrix<T>, ScmError> {
        self.columns_in_order(set.iter())
    }

    /// Columns of the given nodes in the given order.
    pub fn columns_in_order<'a>(&self, ids: impl IntoIterator<Item = &'a NodeId>) -> Result<DMatrix<T>, ScmError> {
        let spans = ids.into_iter().map(|id| self.span(id.as_str())).collect::<Result<Vec<_>, _>>()?;
        let width = spans.iter().map(|s| s.1).sum();
        let mut out = DMatrix::<T>::zeros(self.n(), width);
        let mut at = 0;
        for (off, d) in spans {
            out.columns_mut(at, d).copy_from(&self.values.columns(off, d));
            at += d;
        }
        Ok(out)
    }

    /// Observable columns in the graph's layout order.
    pub fn observables(&self, g: &LatentGraph) -> Result<DMatrix<T>, ScmError> {
        self.columns_in_order(g.layout())
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names = vec![String::new(); self.width()];
        for (id, &(off, d)) in &self.spans {
            for k in 0..d {
                names[off + k] = format!("{id}[{k}]");
            }
        }
        names
    }

    /// Writes the matrix column-major as little-endian values to `path`, and
    /// a JSON header to `path` with `.json` appended.
    pub fn write_binary(&self, path: impl AsRef<Path>) -> Result<(), ScmError> {
        let path = path.as_ref();
        let mut bytes = Vec::with_capacity(self.values.len() * T::BYTES);
        for &v in self.values.iter() {
            v.write_le(&mut bytes);
        }
        fs::write(path, bytes).map_err(io_err(path))?;
        let header = Header {
            format: FORMAT_TAG.into(),
            dtype: type_name::<T>().into(),
            rows: self.n(),
            cols: self.width(),
            order: "column-major".into(),
            endianness: "little".into(),
            seed: self.seed,
            spans: self.spans.iter().map(|(id, &(offset, len))| SpanEntry { node: id.clone(), offset, len }).collect(),
            dims: self.spans.iter().map(|(id, s)| (id.clone(), s.1)).collect(),
        };
        let side = sidecar(path);
        let text = serde_json::to_string_pretty(&header).map_err(|e| ScmError::Format(e.to_string()))?;
        fs::write(&side, text + "\n").map_err(io_err(&side))
    }

    pub fn read_binary(path: impl AsRef<Path>) -> Result<Self, ScmError> {
        let path = path.as_ref();
        let side = sidecar(path);
        let text = fs::read_to_string(&side).map_err(io_err(&side))?;
        let header: Header = serde_json::from_str(&text).map_err(|e| ScmError::Format(e.to_string()))?;
        if header.format != FORMAT_TAG || header.order != "column-major" || header.endianness != "little" {
            return Err(ScmError::Format(format!("unsupported header in {}", side.display())));
        }
        if header.dtype != type_name::<T>() {
            return Err(ScmError::Format(format!("file holds {}, expected {}", header.dtype, type_name::<T>())));
        }
        let bytes = fs::read(path).map_err(io_err(path))?;
        if bytes.len() != header.rows * header.cols * T::BYTES {
            return Err(ScmError::Format(format!("{} has {} bytes, header implies {}", path.display(), bytes.len(), header.rows * header.cols * T::BYTES)));
        }
        let values = DMatrix::from_iterator(header.rows, header.cols, bytes.chunks_exact(T::BYTES).map(T::read_le));
        let spans: BTreeMap<NodeId, (usize, usize)> =
            header.spans.into_iter().map(|s| (s.node, (s.offset, s.len))).collect();
        let mut expect = 0;
        for &(off, d) in spans.values() {
            if off != expect {
                return Err(ScmError::Format("spans do not tile the columns".into()));
            }
            expect += d;
        }
        if expect != header.cols {
            return Err(ScmError::Format("spans do not tile the columns".into()));
        }
        Ok(Dataset { values, spans, seed: header.seed })
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "{}", self.column_names().join(","))?;
        for row in self.values.row_iter() {
            let cells: Vec<String> = row.iter().map(|v| format!("{:e}", v.as_f64())).collect();
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Splits a dataset into the shared, specific and observable blocks.
pub fn extract_blocks<T: Scalar>(
    ds: &Dataset<T>,
    g: &LatentGraph,
    mask: &Mask,
    info: &SharedInfo,
) -> Result<Blocks<T>, ScmError> {
    Ok(Blocks {
        c: ds.columns_of(&info.c)?,
        s_m: ds.columns_of(&info.s_m)?,
        s_mc: ds.columns_of(&info.s_mc)?,
        x_m: ds.columns_of(mask.masked())?,
        x_mc: ds.columns_of(&mask.visible(g))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    fn chain() -> LatentGraph {
        LatentGraph::from_json_str(
            r#"{"nodes":[{"id":"z","kind":"latent"},{"id":"x","kind":"observable"}],
                "edges":[["z","x"]],"layout":["x"]}"#,
        )
        .unwrap()
    }

    #[test]
    fn chain_dims() {
        let mut cfg = ScmConfig::default();
        cfg.exo_dims.insert("eps_z".into(), 2);
        let scm = build_scm::<f64>(&chain(), &cfg).unwrap();
        assert_eq!(scm.dim("z").unwrap(), 2);
        assert_eq!(scm.dim("x").unwrap(), 3);
        assert_eq!(scm.input_blocks("x").unwrap(), vec![("z".into(), 2), ("eps_x".into(), 1)]);
    }

    #[test]
    fn rejects_bad_config() {
        let g = chain();
        let cfg = ScmConfig { alpha: 0.0, ..Default::default() };
        assert!(matches!(build_scm::<f64>(&g, &cfg), Err(ScmError::Config(_))));
        let cfg = ScmConfig { layers: 0, ..Default::default() };
        assert!(matches!(build_scm::<f64>(&g, &cfg), Err(ScmError::Config(_))));
        let mut cfg = ScmConfig::default();
        cfg.exo_dims.insert("z".into(), 2);
        assert!(matches!(build_scm::<f64>(&g, &cfg), Err(ScmError::Graph(GraphError::BadDimension(_)))));
    }

    #[test]
    fn mixers_are_orthogonal() {
        let scm = build_scm::<f64>(&fixtures::fig4(), &ScmConfig::default()).unwrap();
        let m = scm.mixer("x2").unwrap();
        for l in m.layers() {
            let gram = l.weight.tr_mul(&l.weight);
            assert!((gram - DMatrix::identity(m.dim(), m.dim())).amax() < 1e-12);
        }
        assert!(matches!(scm.mixer("eps_x2"), Err(ScmError::Exogenous(_))));
    }

    #[test]
    fn batch_and_vector_paths_agree() {
        let cfg = ScmConfig { bias: true, ..Default::default() };
        let scm = build_scm::<f64>(&fixtures::fig4(), &cfg).unwrap();
        let m = scm.mixer("x3").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DMatrix::<f64>::from_fn(5, m.dim(), |_, _| StandardNormal.sample(&mut rng));
        let y = m.forward_rows(&x);
        for r in 0..5 {
            let xr = x.row(r).transpose();
            assert!((m.forward(&xr) - y.row(r).transpose()).amax() < 1e-12);
        }
        assert!((m.inverse_rows(&y) - x).amax() < 1e-12);
    }

    #[test]
    fn invert_rejects_wrong_width() {
        let scm = build_scm::<f64>(&chain(), &ScmConfig::default()).unwrap();
        let err = scm.invert_node("x", &DVector::zeros(5)).unwrap_err();
        assert!(matches!(err, ScmError::DimensionMismatch { expected: 2, got: 5, .. }));
    }

    #[test]
    fn fnv_separates_parts() {
        assert_ne!(fnv1a(&["ab", "c"]), fnv1a(&["a", "bc"]));
    }
}
