//! Real NVP density model: alternating-mask affine coupling layers over
//! flattened windows, a standard-normal base distribution, and exact
//! log-likelihood via the change-of-variables formula.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffcore::{DenseArray, NodeId, ParamNode, Tape};
use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.8378770664093453;

/// Fully-connected layer `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamNode,
    pub b: ParamNode,
}

impl Dense {
    /// Uniform fan-in initialization: `W ~ U(-1/sqrt(in), 1/sqrt(in))`, `b = 0`.
    fn fan_in(name: &str, n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (n_in as f64).sqrt();
        let w: Vec<f64> = (0..n_in * n_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            w: ParamNode::new(
                format!("{name}.w"),
                DenseArray::matrix(n_in, n_out, w).expect("dense init shape"),
            ),
            b: ParamNode::new(format!("{name}.b"), DenseArray::vector(vec![0.0; n_out])),
        }
    }

    fn zeroed(name: &str, n_in: usize, n_out: usize) -> Self {
        Self {
            w: ParamNode::new(format!("{name}.w"), DenseArray::zeros(vec![n_in, n_out])),
            b: ParamNode::new(format!("{name}.b"), DenseArray::vector(vec![0.0; n_out])),
        }
    }

    fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let w = tape.param(&self.w);
        let b = tape.param(&self.b);
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }
}

/// Small fully-connected network with tanh hidden activations.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Dense>,
    /// Apply tanh to the final layer's output (the scale nets do, the
    /// translation nets stay linear).
    output_tanh: bool,
}

impl Mlp {
    /// `dims` is the full chain, e.g. `[d, 32, 32, d]`. Hidden layers use
    /// fan-in initialization; the final layer starts at zero so a fresh
    /// coupling layer is exactly the identity.
    fn new(name: &str, dims: &[usize], output_tanh: bool, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for i in 0..dims.len() - 1 {
            let lname = format!("{name}.fc{i}");
            let layer = if i == dims.len() - 2 {
                Dense::zeroed(&lname, dims[i], dims[i + 1])
            } else {
                Dense::fan_in(&lname, dims[i], dims[i + 1], rng)
            };
            layers.push(layer);
        }
        Self { layers, output_tanh }
    }

    fn forward(&self, tape: &mut Tape, mut x: NodeId) -> Result<NodeId> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, x)?;
            if i < last || self.output_tanh {
                x = tape.tanh(x);
            }
        }
        Ok(x)
    }

    fn params(&self) -> impl Iterator<Item = &ParamNode> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b])
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut ParamNode> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b])
    }
}

/// One affine coupling layer. Coordinates with `mask == 1` pass through
/// unchanged; the rest map to `x * exp(s(x_masked)) + t(x_masked)`.
#[derive(Debug, Clone)]
pub struct CouplingLayer {
    mask: Vec<f64>,
    inv_mask: Vec<f64>,
    s_net: Mlp,
    t_net: Mlp,
}

impl CouplingLayer {
    pub fn new(name: &str, mask: Vec<f64>, hidden: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = mask.len();
        if !mask.iter().all(|&m| m == 0.0 || m == 1.0) {
            return Err(Error::Contract("coupling mask must be 0/1-valued".into()));
        }
        let ones = mask.iter().filter(|&&m| m == 1.0).count();
        if ones == 0 || ones == d {
            return Err(Error::Contract(
                "coupling mask must contain at least one 0 and one 1".into(),
            ));
        }
        let dims = [d, hidden, hidden, d];
        Ok(Self {
            inv_mask: mask.iter().map(|&m| 1.0 - m).collect(),
            mask,
            s_net: Mlp::new(&format!("{name}.s"), &dims, true, rng),
            t_net: Mlp::new(&format!("{name}.t"), &dims, false, rng),
        })
    }

    pub fn dim(&self) -> usize {
        self.mask.len()
    }

    pub fn mask(&self) -> &[f64] {
        &self.mask
    }

    fn check_input(&self, tape: &Tape, x: NodeId) -> Result<()> {
        let v = tape.value(x);
        if v.cols() != self.dim() {
            return Err(Error::dims("coupling input width", v.shape(), &[self.dim()]));
        }
        if !v.all_finite() {
            return Err(Error::Numeric("non-finite coupling input".into()));
        }
        Ok(())
    }

    /// Forward transform of a batch `[m, d]`. Returns `(y, log_det)` with
    /// `log_det` shaped `[m, 1]`: the per-sample sum of `s` over the
    /// transformed coordinates.
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<(NodeId, NodeId)> {
        self.check_input(tape, x)?;
        let mask = tape.constant(DenseArray::vector(self.mask.clone()));
        let inv_mask = tape.constant(DenseArray::vector(self.inv_mask.clone()));

        let xm = tape.mul_row(x, mask)?;
        let s_raw = self.s_net.forward(tape, xm)?;
        let t = self.t_net.forward(tape, xm)?;
        let s = tape.mul_row(s_raw, inv_mask)?;

        let scale = tape.exp(s);
        let scaled = tape.mul(x, scale)?;
        let affine = tape.add(scaled, t)?;
        let open = tape.mul_row(affine, inv_mask)?;
        let y = tape.add(xm, open)?;
        let log_det = tape.sum_rows(s)?;
        Ok((y, log_det))
    }

    /// Inverse transform: `x = (y - t(y_masked)) * exp(-s(y_masked))` on the
    /// transformed coordinates, pass-through elsewhere.
    pub fn inverse(&self, tape: &mut Tape, y: NodeId) -> Result<NodeId> {
        self.check_input(tape, y)?;
        let mask = tape.constant(DenseArray::vector(self.mask.clone()));
        let inv_mask = tape.constant(DenseArray::vector(self.inv_mask.clone()));

        let ym = tape.mul_row(y, mask)?;
        let s_raw = self.s_net.forward(tape, ym)?;
        let t = self.t_net.forward(tape, ym)?;
        let s = tape.mul_row(s_raw, inv_mask)?;

        let shifted = tape.sub(y, t)?;
        let neg_s = tape.neg(s);
        let scale = tape.exp(neg_s);
        let unscaled = tape.mul(shifted, scale)?;
        let open = tape.mul_row(unscaled, inv_mask)?;
        tape.add(ym, open)
    }
}

/// Stack of coupling layers with alternating even/odd masks.
#[derive(Debug, Clone)]
pub struct FlowModel {
    layers: Vec<CouplingLayer>,
    dim: usize,
    hidden: usize,
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PFLOWCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

impl FlowModel {
    /// Build a flow over `dim`-dimensional inputs. Layer `k` passes through
    /// coordinates `i` with `(i + k) % 2 == 0`, so consecutive masks differ
    /// and every coordinate is transformed by half the layers.
    pub fn new(dim: usize, n_layers: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Contract(format!("flow needs dim >= 2, got {dim}")));
        }
        if n_layers == 0 {
            return Err(Error::Contract("flow needs at least one layer".into()));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for k in 0..n_layers {
            let mask: Vec<f64> = (0..dim)
                .map(|i| if (i + k) % 2 == 0 { 1.0 } else { 0.0 })
                .collect();
            layers.push(CouplingLayer::new(&format!("flow.l{k}"), mask, hidden, rng)?);
        }
        Ok(Self { layers, dim, hidden })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn params(&self) -> Vec<&ParamNode> {
        self.layers
            .iter()
            .flat_map(|l| l.s_net.params().chain(l.t_net.params()))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamNode> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.s_net.params_mut().chain(l.t_net.params_mut()))
            .collect()
    }

    /// Map a batch `[m, d]` to latent space. Returns `(z, log_det)` with
    /// `log_det [m,1]` equal to the sum of per-layer log-determinants.
    pub fn forward_latent(&self, tape: &mut Tape, x: NodeId) -> Result<(NodeId, NodeId)> {
        let mut z = x;
        let mut total: Option<NodeId> = None;
        for layer in &self.layers {
            let (y, ld) = layer.forward(tape, z)?;
            z = y;
            total = Some(match total {
                None => ld,
                Some(t) => tape.add(t, ld)?,
            });
        }
        Ok((z, total.expect("at least one layer")))
    }

    /// Inverse flow of a latent batch `[m, d]`.
    pub fn inverse(&self, tape: &mut Tape, z: NodeId) -> Result<NodeId> {
        let mut x = z;
        for layer in self.layers.iter().rev() {
            x = layer.inverse(tape, x)?;
        }
        Ok(x)
    }

    /// Exact log-likelihood of each row of `x`:
    /// `log N(z; 0, I) + sum(log_det)` with
    /// `log N(z; 0, I) = -d/2 ln(2 pi) - ||z||^2 / 2`. Output `[m, 1]`.
    pub fn log_prob(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let (z, log_det) = self.forward_latent(tape, x)?;
        let zz = tape.mul(z, z)?;
        let sq_norm = tape.sum_rows(zz)?;
        let half = tape.scale(sq_norm, -0.5);
        let base = tape.add_scalar(half, -0.5 * self.dim as f64 * LN_2PI)?;
        tape.add(base, log_det)
    }

    /// Log-likelihood values for a batch without gradient bookkeeping.
    pub fn log_prob_batch(&self, xs: &DenseArray) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x = tape.constant(xs.clone());
        let lp = self.log_prob(&mut tape, x)?;
        Ok(tape.value(lp).data().to_vec())
    }

    /// Draw `count` samples by pushing standard-normal draws through the
    /// inverse flow. Deterministic for a fixed seed.
    pub fn sample(&self, count: usize, seed: u64) -> Result<DenseArray> {
        if count == 0 {
            return Err(Error::Contract("sample count must be >= 1".into()));
        }
        let draws = standard_normal_matrix(count, self.dim, seed);
        let mut tape = Tape::new();
        let z = tape.constant(draws);
        let x = self.inverse(&mut tape, z)?;
        Ok(tape.value(x).clone())
    }

    /// Write a versioned little-endian checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.hidden as u32).to_le_bytes());
        for layer in &self.layers {
            for &m in &layer.mask {
                buf.push(m as u8);
            }
        }
        let params = self.params();
        buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for p in params {
            write_named_array(&mut buf, p);
        }
        f.write_all(&buf)?;
        Ok(())
    }

    /// Load a checkpoint written by [`FlowModel::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = ByteReader::new(&bytes, path);
        let magic = r.take(8)?;
        if magic != CHECKPOINT_MAGIC {
            return r.fail("bad checkpoint magic");
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return r.fail(&format!("unsupported checkpoint version {version}"));
        }
        let dim = r.u32()? as usize;
        let n_layers = r.u32()? as usize;
        let hidden = r.u32()? as usize;
        let mut masks = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let raw = r.take(dim)?;
            masks.push(raw.iter().map(|&b| b as f64).collect::<Vec<f64>>());
        }
        // Structure first, then overwrite every parameter from the file.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut layers = Vec::with_capacity(n_layers);
        for (k, mask) in masks.into_iter().enumerate() {
            layers.push(CouplingLayer::new(&format!("flow.l{k}"), mask, hidden, &mut rng)?);
        }
        let mut model = Self { layers, dim, hidden };
        let n_params = r.u32()? as usize;
        let mut params = model.params_mut();
        if n_params != params.len() {
            return Err(Error::Parse {
                file: path.display().to_string(),
                line: 0,
                message: format!("expected {} parameters, file has {n_params}", params.len()),
            });
        }
        for p in params.iter_mut() {
            read_named_array(&mut r, p)?;
        }
        Ok(model)
    }
}

use rand::SeedableRng;

/// `[rows, cols]` of standard-normal draws from a seeded generator.
pub fn standard_normal_matrix(rows: usize, cols: usize, seed: u64) -> DenseArray {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    DenseArray::new(vec![rows, cols], data).expect("normal matrix shape")
}

fn write_named_array(buf: &mut Vec<u8>, p: &ParamNode) {
    let name = p.name().as_bytes();
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name);
    buf.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
    for &s in p.value.shape() {
        buf.extend_from_slice(&(s as u32).to_le_bytes());
    }
    for &v in p.value.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_named_array(r: &mut ByteReader, p: &mut ParamNode) -> Result<()> {
    let name_len = r.u32()? as usize;
    let name = String::from_utf8_lossy(r.take(name_len)?).to_string();
    if name != p.name() {
        return r.fail(&format!("parameter order mismatch: {} vs {}", name, p.name()));
    }
    let ndim = r.u32()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u32()? as usize);
    }
    if shape != p.value.shape() {
        return r.fail(&format!("shape mismatch for {name}"));
    }
    let n: usize = shape.iter().product();
    let raw = r.take(n * 8)?;
    for (i, chunk) in raw.chunks_exact(8).enumerate() {
        p.value.data_mut()[i] = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
    }
    Ok(())
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: String,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &Path) -> Self {
        Self {
            bytes,
            pos: 0,
            file: path.display().to_string(),
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse {
                file: self.file.clone(),
                line: 0,
                message: "truncated file".into(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let raw = self.take(4)?;
        Ok(u32::from_le_bytes(raw.try_into().expect("4-byte chunk")))
    }

    pub(crate) fn fail<T>(&self, message: &str) -> Result<T> {
        Err(Error::Parse {
            file: self.file.clone(),
            line: 0,
            message: message.into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// A d=2 layer with mask [1, 0] and all-zero networks, except the
    /// translation net's output bias which is forced to `t_bias`.
    fn forced_layer(t_bias: [f64; 2]) -> CouplingLayer {
        let mut layer = CouplingLayer::new("l", vec![1.0, 0.0], 4, &mut rng(0)).unwrap();
        for p in layer.s_net.params_mut().chain(layer.t_net.params_mut()) {
            p.value.fill(0.0);
        }
        let t_out_bias = layer.t_net.layers.last_mut().unwrap();
        t_out_bias.b.value.data_mut().copy_from_slice(&t_bias);
        layer
    }

    #[test]
    fn zero_weight_layer_is_identity() {
        let layer = forced_layer([0.0, 0.0]);
        let mut tape = Tape::new();
        let x = tape.constant(DenseArray::matrix(1, 2, vec![0.7, -1.3]).unwrap());
        let (y, ld) = layer.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.7, -1.3]);
        assert_eq!(tape.value(ld).data(), &[0.0]);
        let back = layer.inverse(&mut tape, y).unwrap();
        assert_eq!(tape.value(back).data(), &[0.7, -1.3]);
    }

    #[test]
    fn forced_translation_example() {
        // s = 0, t = (_, 0.5), x = (1.0, 2.0) -> y = (1.0, 2.5), log_det = 0
        let layer = forced_layer([0.0, 0.5]);
        let mut tape = Tape::new();
        let x = tape.constant(DenseArray::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let (y, ld) = layer.forward(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.5]);
        assert_eq!(tape.value(ld).data(), &[0.0]);

        let yv = tape.value(y).clone();
        let mut tape2 = Tape::new();
        let yn = tape2.constant(yv);
        let x_back = layer.inverse(&mut tape2, yn).unwrap();
        assert_relative_eq!(tape2.value(x_back).data()[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(tape2.value(x_back).data()[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn random_layer_round_trip() {
        let mut r = rng(42);
        for trial in 0..20 {
            let d = 2 + (trial % 5);
            let mask: Vec<f64> = (0..d).map(|i| ((i + trial) % 2) as f64).collect();
            let mut layer = CouplingLayer::new("l", mask, 8, &mut r).unwrap();
            // Perturb the zero-initialized output layers so the transform is
            // nontrivial.
            for p in layer.s_net.params_mut().chain(layer.t_net.params_mut()) {
                for v in p.value.data_mut() {
                    *v += r.random_range(-0.5..0.5);
                }
            }
            let x0: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
            let mut tape = Tape::new();
            let x = tape.constant(DenseArray::matrix(1, d, x0.clone()).unwrap());
            let (y, _) = layer.forward(&mut tape, x).unwrap();
            let back = layer.inverse(&mut tape, y).unwrap();
            for (a, b) in tape.value(back).data().iter().zip(&x0) {
                assert!((a - b).abs() < 1e-9, "round trip error {}", (a - b).abs());
            }
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let layer = forced_layer([0.0, 0.0]);
        let mut tape = Tape::new();
        let x = tape.constant(DenseArray::matrix(1, 2, vec![f64::NAN, 0.0]).unwrap());
        assert!(matches!(layer.forward(&mut tape, x), Err(Error::Numeric(_))));
    }

    #[test]
    fn identity_model_log_prob_is_base_density() {
        let model = FlowModel::new(2, 4, 8, &mut rng(1)).unwrap();
        let lp = model
            .log_prob_batch(&DenseArray::matrix(1, 2, vec![0.0, 0.0]).unwrap())
            .unwrap();
        assert_relative_eq!(lp[0], -LN_2PI, epsilon = 1e-12);

        // At any point the zero-initialized flow is the identity, so the
        // log-prob equals the standard-normal log-density exactly.
        let x = vec![0.3, -1.7];
        let lp = model
            .log_prob_batch(&DenseArray::matrix(1, 2, x.clone()).unwrap())
            .unwrap();
        let expected = -LN_2PI - 0.5 * (x[0] * x[0] + x[1] * x[1]);
        assert_eq!(lp[0], expected);
    }

    #[test]
    fn model_log_det_is_sum_of_layer_log_dets() {
        let mut r = rng(7);
        let mut model = FlowModel::new(4, 4, 8, &mut r).unwrap();
        for p in model.params_mut() {
            for v in p.value.data_mut() {
                *v += r.random_range(-0.3..0.3);
            }
        }
        let x0: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let x = tape.constant(DenseArray::matrix(1, 4, x0.clone()).unwrap());
        let (_, total) = model.forward_latent(&mut tape, x).unwrap();

        let mut z = tape.constant(DenseArray::matrix(1, 4, x0).unwrap());
        let mut sum = 0.0;
        for layer in model.layers() {
            let (y, ld) = layer.forward(&mut tape, z).unwrap();
            sum += tape.value(ld).data()[0];
            z = y;
        }
        assert_relative_eq!(tape.value(total).data()[0], sum, epsilon = 1e-12);
    }

    #[test]
    fn sampling_is_deterministic_and_identity_at_init() {
        let model = FlowModel::new(3, 4, 8, &mut rng(3)).unwrap();
        let a = model.sample(5, 99).unwrap();
        let b = model.sample(5, 99).unwrap();
        assert_eq!(a.data(), b.data());
        // Identity-initialized flow returns the Gaussian draws unchanged.
        let draws = standard_normal_matrix(5, 3, 99);
        assert_eq!(a.data(), draws.data());
    }

    #[test]
    fn consecutive_masks_differ() {
        let model = FlowModel::new(6, 4, 8, &mut rng(5)).unwrap();
        for pair in model.layers().windows(2) {
            assert_ne!(pair[0].mask(), pair[1].mask());
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let mut r = rng(11);
        let mut model = FlowModel::new(6, 4, 16, &mut r).unwrap();
        for p in model.params_mut() {
            for v in p.value.data_mut() {
                *v += r.random_range(-0.2..0.2);
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        model.save(&path).unwrap();
        let loaded = FlowModel::load(&path).unwrap();
        for (a, b) in model.params().iter().zip(loaded.params()) {
            assert_eq!(a.name(), b.name());
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let x = DenseArray::matrix(2, 6, (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
        assert_eq!(
            model.log_prob_batch(&x).unwrap(),
            loaded.log_prob_batch(&x).unwrap()
        );
    }
}
