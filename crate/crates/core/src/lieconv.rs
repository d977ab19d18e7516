//! Group-equivariant convolution over token sequences.
//!
//! A layer lifts token positions to elements of a chosen group, evaluates a
//! learned kernel on the Lie-algebra coordinates of window-relative offsets,
//! and integrates kernel-weighted features over a quadrature of the window.
//!
//! Every supported group is abelian, so with relative arguments the kernel
//! sees the same offsets in every window. The layer exploits that: the
//! kernel network runs once per forward over the quadrature nodes, the
//! result is scattered into an ordinary `[taps, d, s]` kernel tensor, and
//! the whole convolution reduces to one `conv1d_valid` over a (possibly
//! boundary-extended) input. A lookup kernel skips the network entirely and
//! is then exactly a standard convolution, which pins the reduction down to
//! bitwise agreement. Absolute-argument kernels break the sharing and take
//! a per-window path; they exist to ablate equivariance, not to be fast.

use thiserror::Error;

use crate::liegroup::{Group, GroupError};
use crate::ndtensor::{Params, Tape, TensorError, TensorId};
use crate::real::Real;
use crate::rng::RngStream;
use rand::Rng;

#[derive(Debug, Error)]
pub enum LieConvError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Group(#[from] GroupError),
    #[error("lookup kernels require the window lattice with relative arguments")]
    LookupNeedsLattice,
    #[error("quadrature offset {offset} outside the window span [-0.5, {hi})")]
    OffsetOutsideWindow { offset: f64, hi: f64 },
    #[error("monte carlo quadrature needs at least one node")]
    EmptyQuadrature,
}

pub type Result<T> = std::result::Result<T, LieConvError>;

/// Node placement for the window integral.
#[derive(Debug, Clone, PartialEq)]
pub enum Quadrature {
    /// One node per token offset `0..width`, unit weights. The exact
    /// discrete convolution.
    WindowLattice,
    /// Stratified uniform offsets over the continuous window span
    /// `[-0.5, width-0.5)`, weight `width/nodes` each, resampled per
    /// forward pass. Features at fractional offsets interpolate linearly.
    MonteCarlo { nodes: usize },
    /// Caller-supplied offsets in token units, weighted as Monte Carlo.
    /// Lets a sampled quadrature be replayed exactly.
    Fixed { offsets: Vec<f64> },
}

/// What the kernel network is given for each quadrature node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelArg {
    /// Algebra coordinates of the window-relative offset
    /// `inverse(g_i) . g_{i+delta}`. Shared across windows; equivariant.
    Relative,
    /// Algebra coordinates of the neighbor's absolute lifted position.
    /// Window-dependent, so the layer is no longer shift-equivariant.
    Absolute,
}

/// How windows behave at the sequence ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    /// Only fully interior windows: `n - width + 1` outputs. Fractional
    /// offsets outside the sequence clamp to the edge rows.
    Valid,
    /// Indices wrap modulo the sequence length: `n` outputs, and a cyclic
    /// shift of the input cyclically shifts the output.
    Circular,
}

/// Kernel parameterization.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelKind {
    /// Fully-connected relu network from algebra coordinates to a
    /// `d*s` kernel slice, one hidden width per entry.
    Mlp { hidden: Vec<usize> },
    /// Free `[width, d, s]` table indexed by lattice tap. Only valid on
    /// the window lattice with relative arguments, where it reduces the
    /// layer to a standard convolution.
    Lookup,
}

/// Fully-connected kernel network `algebra -> d*s`.
#[derive(Debug, Clone)]
pub struct KernelMlp {
    pub in_dim: usize,
    pub hidden: Vec<usize>,
    pub out_dim: usize,
}

impl KernelMlp {
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fin = self.in_dim;
        for &h in &self.hidden {
            dims.push((fin, h));
            fin = h;
        }
        dims.push((fin, self.out_dim));
        dims
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(fin, fout)| fin * fout + fout)
            .sum()
    }

    pub fn register<R: Real>(
        &self,
        params: &mut Params<R>,
        prefix: &str,
        rng: &mut RngStream,
    ) -> crate::ndtensor::Result<()> {
        for (i, (fin, fout)) in self.layer_dims().into_iter().enumerate() {
            let w = glorot::<R>(fin, fout, rng);
            params.register(&format!("{prefix}.w{i}"), &[fin, fout], w)?;
            params.register(&format!("{prefix}.b{i}"), &[fout], vec![R::zero(); fout])?;
        }
        Ok(())
    }

    /// Evaluate the network at a batch of algebra coordinates
    /// `[k, in_dim] -> [k, out_dim]`.
    pub fn eval<R: Real>(
        &self,
        tape: &mut Tape<R>,
        params: &Params<R>,
        prefix: &str,
        args: TensorId,
    ) -> crate::ndtensor::Result<TensorId> {
        let n_layers = self.layer_dims().len();
        let mut z = args;
        for i in 0..n_layers {
            let w = tape.param(params, &format!("{prefix}.w{i}"))?;
            let b = tape.param(params, &format!("{prefix}.b{i}"))?;
            z = tape.matmul(z, w)?;
            z = tape.add_bias(z, b)?;
            if i + 1 < n_layers {
                z = tape.relu(z)?;
            }
        }
        Ok(z)
    }
}

fn glorot<R: Real>(fin: usize, fout: usize, rng: &mut RngStream) -> Vec<R> {
    let a = (6.0 / (fin + fout) as f64).sqrt();
    (0..fin * fout)
        .map(|_| R::from_f64(rng.gen_range(-a..a)))
        .collect()
}

/// One group-convolution layer: `[n, d] -> [m, s]`.
#[derive(Debug, Clone)]
pub struct LieConvLayer {
    pub name: String,
    pub group: Group,
    /// Window length in tokens.
    pub width: usize,
    /// Input feature channels.
    pub feature_dim: usize,
    /// Output channels.
    pub filters: usize,
    pub kernel: KernelKind,
    pub quadrature: Quadrature,
    pub boundary: Boundary,
    pub kernel_arg: KernelArg,
    /// Token index to algebra coordinate scale for the lift.
    pub position_scale: f64,
}

impl LieConvLayer {
    pub fn new(name: &str, group: Group, width: usize, feature_dim: usize, filters: usize) -> Self {
        LieConvLayer {
            name: name.to_string(),
            group,
            width,
            feature_dim,
            filters,
            kernel: KernelKind::Mlp {
                hidden: vec![32, 12],
            },
            quadrature: Quadrature::WindowLattice,
            boundary: Boundary::Valid,
            kernel_arg: KernelArg::Relative,
            position_scale: 1.0,
        }
    }

    fn mlp(&self, hidden: &[usize]) -> KernelMlp {
        KernelMlp {
            in_dim: self.group.algebra_dim(),
            hidden: hidden.to_vec(),
            out_dim: self.feature_dim * self.filters,
        }
    }

    pub fn parameter_count(&self) -> usize {
        let kernel = match &self.kernel {
            KernelKind::Mlp { hidden } => self.mlp(hidden).parameter_count(),
            KernelKind::Lookup => self.width * self.feature_dim * self.filters,
        };
        kernel + self.filters
    }

    pub fn register_params<R: Real>(
        &self,
        params: &mut Params<R>,
        rng: &mut RngStream,
    ) -> crate::ndtensor::Result<()> {
        match &self.kernel {
            KernelKind::Mlp { hidden } => {
                self.mlp(hidden)
                    .register(params, &format!("{}.k", self.name), rng)?;
            }
            KernelKind::Lookup => {
                let (l, d, s) = (self.width, self.feature_dim, self.filters);
                let table = glorot::<R>(l * d, s, rng);
                params.register(&format!("{}.table", self.name), &[l, d, s], table)?;
            }
        }
        params.register(
            &format!("{}.bias", self.name),
            &[self.filters],
            vec![R::zero(); self.filters],
        )?;
        Ok(())
    }

    /// Quadrature nodes as `(token offset, weight)` pairs, sampling fresh
    /// strata in Monte Carlo mode.
    fn window_nodes(&self, rng: &mut RngStream) -> Result<Vec<(f64, f64)>> {
        let l = self.width as f64;
        match &self.quadrature {
            Quadrature::WindowLattice => {
                Ok((0..self.width).map(|j| (j as f64, 1.0)).collect())
            }
            Quadrature::MonteCarlo { nodes } => {
                if *nodes == 0 {
                    return Err(LieConvError::EmptyQuadrature);
                }
                let k = *nodes as f64;
                Ok((0..*nodes)
                    .map(|i| {
                        let u: f64 = rng.gen();
                        (-0.5 + (i as f64 + u) * l / k, l / k)
                    })
                    .collect())
            }
            Quadrature::Fixed { offsets } => {
                if offsets.is_empty() {
                    return Err(LieConvError::EmptyQuadrature);
                }
                let w = l / offsets.len() as f64;
                offsets
                    .iter()
                    .map(|&o| {
                        if !(-0.5..l - 0.5).contains(&o) {
                            Err(LieConvError::OffsetOutsideWindow {
                                offset: o,
                                hi: l - 0.5,
                            })
                        } else {
                            Ok((o, w))
                        }
                    })
                    .collect()
            }
        }
    }

    /// Algebra coordinates the kernel sees for a relative offset of
    /// `delta` tokens.
    fn relative_arg(&self, delta: f64) -> Result<[f64; 2]> {
        let g = self.group.lift(delta, self.position_scale, 1)?[0];
        Ok(self.group.log(g)?)
    }

    /// Convolve one sequence `[n, d] -> [m, s]`.
    pub fn forward<R: Real>(
        &self,
        tape: &mut Tape<R>,
        params: &Params<R>,
        x: TensorId,
        rng: &mut RngStream,
    ) -> Result<TensorId> {
        match self.kernel_arg {
            KernelArg::Relative => self.forward_relative(tape, params, x, rng),
            KernelArg::Absolute => self.forward_absolute(tape, params, x, rng),
        }
    }

    /// Convolve a single window `[width, d] -> [1, s]`.
    pub fn forward_window<R: Real>(
        &self,
        tape: &mut Tape<R>,
        params: &Params<R>,
        window: TensorId,
        rng: &mut RngStream,
    ) -> Result<TensorId> {
        if tape.shape(window) != [self.width, self.feature_dim] {
            return Err(TensorError::ShapeMismatch {
                op: "lie_conv_window",
                lhs: tape.shape(window).to_vec(),
                rhs: vec![self.width, self.feature_dim],
            }
            .into());
        }
        // a single valid window regardless of the layer's boundary mode
        let mut one = self.clone();
        one.boundary = Boundary::Valid;
        one.forward(tape, params, window, rng)
    }

    fn forward_relative<R: Real>(
        &self,
        tape: &mut Tape<R>,
        params: &Params<R>,
        x: TensorId,
        rng: &mut RngStream,
    ) -> Result<TensorId> {
        let (d, s) = (self.feature_dim, self.filters);
        let bias = tape.param(params, &format!("{}.bias", self.name))?;

        if let KernelKind::Lookup = self.kernel {
            if self.quadrature != Quadrature::WindowLattice {
                return Err(LieConvError::LookupNeedsLattice);
            }
            let table = tape.param(params, &format!("{}.table", self.name))?;
            let x_ext = self.extend_input(tape, x, 0, self.width as i64 - 1)?;
            return Ok(tape.conv1d_valid(x_ext, table, bias)?);
        }
        let hidden = match &self.kernel {
            KernelKind::Mlp { hidden } => hidden.clone(),
            KernelKind::Lookup => unreachable!(),
        };

        let nodes = self.window_nodes(rng)?;
        let adim = self.group.algebra_dim();
        let mut args = Vec::with_capacity(nodes.len() * adim);
        for &(delta, _) in &nodes {
            let a = self.relative_arg(delta)?;
            args.extend(a[..adim].iter().map(|&v| R::from_f64(v)));
        }
        let args = tape.constant(&[nodes.len(), adim], args)?;
        let kvals = self.mlp(&hidden).eval(tape, params, &format!("{}.k", self.name), args)?;

        if self.quadrature == Quadrature::WindowLattice {
            // unit weights, one node per tap: the network output is already
            // the kernel tensor
            let kernel = tape.reshape(kvals, &[self.width, d, s])?;
            let x_ext = self.extend_input(tape, x, 0, self.width as i64 - 1)?;
            return Ok(tape.conv1d_valid(x_ext, kernel, bias)?);
        }

        // Fractional offsets: scatter each node's kernel slice onto the two
        // neighboring integer taps with linear-interpolation coefficients.
        // Positions clamp to the tap hull so the edge half-cells land on the
        // edge taps; each tap's tent mass then integrates to exactly 1 and a
        // constant kernel reproduces the lattice sum in expectation.
        let (t0, t1) = (0i64, self.width as i64 - 1);
        let taps = (t1 - t0 + 1) as usize;
        let hull = t1 as f64;
        let mut coeffs = vec![R::zero(); taps * nodes.len()];
        for (k, &(delta, w)) in nodes.iter().enumerate() {
            let pos = delta.clamp(0.0, hull);
            let lo = pos.floor();
            let f = pos - lo;
            let col = lo as usize;
            coeffs[col * nodes.len() + k] = R::from_f64(w * (1.0 - f));
            if f > 0.0 {
                coeffs[(col + 1) * nodes.len() + k] = R::from_f64(w * f);
            }
        }
        let coeffs = tape.constant(&[taps, nodes.len()], coeffs)?;
        let kernel = tape.matmul(coeffs, kvals)?;
        let kernel = tape.reshape(kernel, &[taps, d, s])?;
        let x_ext = self.extend_input(tape, x, t0, t1)?;
        Ok(tape.conv1d_valid(x_ext, kernel, bias)?)
    }

    /// Extend the input rows so a valid convolution over taps `[t0, t1]`
    /// yields the boundary semantics: clamped edge rows for valid mode,
    /// wrapped rows for circular mode (which also appends a full extra
    /// window so every start position is covered).
    fn extend_input<R: Real>(
        &self,
        tape: &mut Tape<R>,
        x: TensorId,
        t0: i64,
        t1: i64,
    ) -> Result<TensorId> {
        let n = tape.shape(x)[0] as i64;
        if n == 0 {
            return Err(TensorError::EmptyInput { op: "lie_conv" }.into());
        }
        let rows: Vec<usize> = match self.boundary {
            Boundary::Valid => {
                if n < self.width as i64 {
                    return Err(TensorError::TooShort {
                        op: "lie_conv",
                        n: n as usize,
                        l: self.width,
                    }
                    .into());
                }
                if t0 == 0 && t1 == self.width as i64 - 1 {
                    return Ok(x); // no extension needed
                }
                (t0..n + (t1 - (self.width as i64 - 1)))
                    .map(|i| i.clamp(0, n - 1) as usize)
                    .collect()
            }
            Boundary::Circular => (t0..n + t1).map(|i| i.rem_euclid(n) as usize).collect(),
        };
        Ok(tape.row_gather(x, &rows)?)
    }

    /// Per-window kernel arguments: the neighbor's absolute lifted
    /// position. One kernel network pass over all window/node pairs, then
    /// an explicit per-window contraction.
    fn forward_absolute<R: Real>(
        &self,
        tape: &mut Tape<R>,
        params: &Params<R>,
        x: TensorId,
        rng: &mut RngStream,
    ) -> Result<TensorId> {
        let hidden = match &self.kernel {
            KernelKind::Mlp { hidden } => hidden.clone(),
            KernelKind::Lookup => return Err(LieConvError::LookupNeedsLattice),
        };
        let (d, s) = (self.feature_dim, self.filters);
        let n = tape.shape(x)[0];
        let nodes = self.window_nodes(rng)?;
        let m = match self.boundary {
            Boundary::Valid => {
                if n < self.width {
                    return Err(TensorError::TooShort {
                        op: "lie_conv",
                        n,
                        l: self.width,
                    }
                    .into());
                }
                n - self.width + 1
            }
            Boundary::Circular => n,
        };
        let adim = self.group.algebra_dim();
        let k = nodes.len();

        // absolute positions i + delta, lifted and logged
        let mut args = Vec::with_capacity(m * k * adim);
        let mut lo_rows = Vec::with_capacity(m * k);
        let mut hi_rows = Vec::with_capacity(m * k);
        let mut lo_coef = Vec::with_capacity(m * k * d);
        let mut hi_coef = Vec::with_capacity(m * k * d);
        let clampi = |i: i64| -> usize {
            match self.boundary {
                Boundary::Valid => i.clamp(0, n as i64 - 1) as usize,
                Boundary::Circular => i.rem_euclid(n as i64) as usize,
            }
        };
        for i in 0..m {
            for &(delta, _) in &nodes {
                let pos = i as f64 + delta;
                let g = self.group.lift(pos, self.position_scale, 1)?[0];
                let a = self.group.log(g)?;
                args.extend(a[..adim].iter().map(|&v| R::from_f64(v)));
                let lo = pos.floor();
                let f = pos - lo;
                lo_rows.push(clampi(lo as i64));
                hi_rows.push(clampi(lo as i64 + 1));
                lo_coef.extend(std::iter::repeat(R::from_f64(1.0 - f)).take(d));
                hi_coef.extend(std::iter::repeat(R::from_f64(f)).take(d));
            }
        }
        let args = tape.constant(&[m * k, adim], args)?;
        let kvals = self.mlp(&hidden).eval(tape, params, &format!("{}.k", self.name), args)?;

        let x_lo = tape.row_gather(x, &lo_rows)?;
        let x_hi = tape.row_gather(x, &hi_rows)?;
        let c_lo = tape.constant(&[m * k, d], lo_coef)?;
        let c_hi = tape.constant(&[m * k, d], hi_coef)?;
        let p_lo = tape.mul(x_lo, c_lo)?;
        let p_hi = tape.mul(x_hi, c_hi)?;
        let x_interp = tape.add(p_lo, p_hi)?;

        let mut out_rows = Vec::with_capacity(m);
        for i in 0..m {
            let mut acc: Option<TensorId> = None;
            for (j, &(_, w)) in nodes.iter().enumerate() {
                let r = i * k + j;
                let xr = tape.row_gather(x_interp, &[r])?;
                let kr = tape.row_gather(kvals, &[r])?;
                let km = tape.reshape(kr, &[d, s])?;
                let term = tape.matmul(xr, km)?;
                let term = tape.scale(term, R::from_f64(w))?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => tape.add(a, term)?,
                });
            }
            let row = tape.reshape(acc.expect("nodes nonempty"), &[s])?;
            out_rows.push(row);
        }
        let out = tape.stack_rows(&out_rows)?;
        let bias = tape.param(params, &format!("{}.bias", self.name))?;
        Ok(tape.add_bias(out, bias)?)
    }
}

/// Max-pool each feature map over its rows and concatenate the results
/// into one feature vector.
pub fn pool_and_concat<R: Real>(
    tape: &mut Tape<R>,
    maps: &[TensorId],
) -> crate::ndtensor::Result<TensorId> {
    let mut pooled = Vec::with_capacity(maps.len());
    for &m in maps {
        pooled.push(tape.max_over_time(m)?);
    }
    tape.concat(&pooled)
}

/// Outcome of the lookup-reduction parity check.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ParityReport {
    pub instances: usize,
    pub mismatches: usize,
    pub first_mismatch: Option<usize>,
}

impl ParityReport {
    pub fn exact(&self) -> bool {
        self.mismatches == 0
    }
}

/// Runs `instances` randomized layers with lookup kernels and compares the
/// reduced forward against a direct `conv1d_valid` on the same tensors.
/// Agreement must be bitwise: both paths are required to execute the same
/// floating-point operations in the same order.
pub fn reduction_parity(instances: usize, seed: u64) -> Result<ParityReport> {
    let mut mismatches = 0;
    let mut first_mismatch = None;
    for i in 0..instances {
        let mut rng = crate::rng::stream(seed, &format!("parity-{i}"));
        let width = rng.gen_range(2..=6usize);
        let d = rng.gen_range(1..=6usize);
        let s = rng.gen_range(1..=6usize);
        let n = width + rng.gen_range(0..12usize);
        let mut layer = LieConvLayer::new("lc", Group::T1, width, d, s);
        layer.kernel = KernelKind::Lookup;
        let mut params = Params::<f64>::new();
        layer.register_params(&mut params, &mut rng)?;
        let xdata: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let x = tape.leaf(&[n, d], xdata.clone(), false)?;
        let y = layer.forward(&mut tape, &params, x, &mut rng)?;
        let via_layer = tape.value(y).to_vec();

        let mut direct = Tape::<f64>::new();
        let x2 = direct.leaf(&[n, d], xdata, false)?;
        let k = direct.param(&params, "lc.table")?;
        let b = direct.param(&params, "lc.bias")?;
        let y2 = direct.conv1d_valid(x2, k, b)?;
        if via_layer != direct.value(y2) {
            mismatches += 1;
            first_mismatch.get_or_insert(i);
        }
    }
    Ok(ParityReport {
        instances,
        mismatches,
        first_mismatch,
    })
}
