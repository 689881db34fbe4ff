//! Capsule packing, transformation, trainable coupling and squashing.
//!
//! A capsule tensor has shape `(batch, num_capsules, capsule_shape..)`.
//! Capsules can be vectors, matrices or any higher-rank block; the
//! transformation contracts a child capsule's last axis `m_k` with a
//! matrix of shape `(m_k, n_1..n_k)`, so a `(m_1..m_k)` child yields a
//! `(m_1..m_{k-1}, n_1..n_k)` prediction.
//!
//! Parents are a coupling-weighted sum of child predictions. The coupling
//! coefficients are ordinary trainable parameters; there is no routing loop.

use serde::{Deserialize, Serialize};

use crate::tape::{OpKind, Var, NORM_EPS};
use crate::tensor::{numel, Result, Scalar, Tensor, TensorError};

/// How conv feature maps are regrouped into capsules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PackingMode {
    /// One capsule per (map group, position): `dim` consecutive maps at the
    /// same pixel.
    Across,
    /// One capsule per row of one feature map.
    Within,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SquashVariant {
    /// `‖v‖²/(1+‖v‖²) · v/‖v‖`
    Ratio,
    /// `(1 − e^{−‖v‖}) · v/‖v‖`
    Exp,
}

/// How raw coupling parameters become the weights used in the sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CouplingMode {
    /// Used as-is; unconstrained reals.
    Raw,
    /// Softmax over the parent axis first.
    Softmax,
}

fn invalid(op: &'static str, reason: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        reason: reason.into(),
    }
}

/// A plain capsule tensor: `data.shape == (batch, num_capsules) ++ capsule_shape`.
#[derive(Debug, Clone, PartialEq)]
pub struct CapsuleTensor<T> {
    data: Tensor<T>,
    capsule_rank: usize,
}

impl<T: Scalar> CapsuleTensor<T> {
    pub fn new(data: Tensor<T>, capsule_rank: usize) -> Result<Self> {
        if capsule_rank == 0 || data.rank() != capsule_rank + 2 {
            return Err(invalid(
                "capsule tensor",
                format!(
                    "shape {:?} cannot hold capsules of rank {capsule_rank}",
                    data.shape()
                ),
            ));
        }
        Ok(CapsuleTensor { data, capsule_rank })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn num_capsules(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn capsule_shape(&self) -> &[usize] {
        &self.data.shape()[2..]
    }

    pub fn capsule_len(&self) -> usize {
        numel(self.capsule_shape())
    }

    /// The elements of capsule `n` in sample `b`.
    pub fn capsule(&self, b: usize, n: usize) -> &[T] {
        let len = self.capsule_len();
        let start = (b * self.num_capsules() + n) * len;
        &self.data.data()[start..start + len]
    }

    /// Euclidean length of every capsule, `(batch, num_capsules)`.
    pub fn norms(&self) -> Tensor<T> {
        let len = self.capsule_len();
        let data = self
            .data
            .data()
            .chunks(len)
            .map(|c| c.iter().map(|&x| x * x).sum::<T>().sqrt())
            .collect();
        Tensor::from_parts(vec![self.batch(), self.num_capsules()], data)
    }
}

/// Capsules recorded on a tape.
#[derive(Debug, Clone)]
pub struct Capsules<'t, T: Scalar> {
    pub var: Var<'t, T>,
    capsule_shape: Vec<usize>,
    /// `(types, rows, cols)` when the capsules sit on a spatial grid,
    /// ordered type-major.
    grid: Option<(usize, usize, usize)>,
}

impl<'t, T: Scalar> Capsules<'t, T> {
    pub fn new(var: Var<'t, T>, capsule_rank: usize) -> Result<Self> {
        let shape = var.shape();
        if capsule_rank == 0 || shape.len() != capsule_rank + 2 {
            return Err(invalid(
                "capsules",
                format!("shape {shape:?} cannot hold capsules of rank {capsule_rank}"),
            ));
        }
        Ok(Capsules {
            var,
            capsule_shape: shape[2..].to_vec(),
            grid: None,
        })
    }

    pub fn with_grid(mut self, types: usize, rows: usize, cols: usize) -> Result<Self> {
        if types * rows * cols != self.num_capsules() {
            return Err(invalid(
                "capsules",
                format!(
                    "grid {types}x{rows}x{cols} does not cover {} capsules",
                    self.num_capsules()
                ),
            ));
        }
        self.grid = Some((types, rows, cols));
        Ok(self)
    }

    pub fn grid(&self) -> Option<(usize, usize, usize)> {
        self.grid
    }

    pub fn batch(&self) -> usize {
        self.var.shape()[0]
    }

    pub fn num_capsules(&self) -> usize {
        self.var.shape()[1]
    }

    pub fn capsule_shape(&self) -> &[usize] {
        &self.capsule_shape
    }

    pub fn capsule_len(&self) -> usize {
        numel(&self.capsule_shape)
    }

    pub fn to_tensor(&self) -> CapsuleTensor<T> {
        CapsuleTensor {
            data: self.var.value().as_ref().clone(),
            capsule_rank: self.capsule_shape.len(),
        }
    }

    fn rewrap(&self, var: Var<'t, T>) -> Self {
        Capsules {
            var,
            capsule_shape: self.capsule_shape.clone(),
            grid: self.grid,
        }
    }

    /// `(batch, num_capsules)` lengths; argmax over capsules is the class.
    pub fn norms(&self) -> Var<'t, T> {
        let flat = self
            .var
            .reshape(&[self.batch(), self.num_capsules(), self.capsule_len()])
            .expect("capsule flatten");
        flat.norm(2).expect("capsule axis")
    }
}

fn check_pack(shape: &[usize], mode: PackingMode, dim: usize) -> Result<[usize; 4]> {
    let &[b, c, h, w] = shape else {
        return Err(invalid("pack_capsules", format!("expected (B,C,H,W), got {shape:?}")));
    };
    if dim == 0 {
        return Err(invalid("pack_capsules", "capsule dimension must be positive"));
    }
    match mode {
        PackingMode::Across if c % dim != 0 => Err(invalid(
            "pack_capsules",
            format!("{c} maps do not split into {dim}-D capsules"),
        )),
        PackingMode::Within if w != dim => Err(invalid(
            "pack_capsules",
            format!("row capsules need width {w} == dim {dim}"),
        )),
        _ => Ok([b, c, h, w]),
    }
}

/// Packs `(B,C,H,W)` maps into capsules.
///
/// Across: capsule `g·H·W + h·W + w` is `(map_{g·dim+k}[h,w])_k`.
/// Within: capsule `c·H + h` is row `h` of map `c`.
pub fn pack<'t, T: Scalar>(maps: Var<'t, T>, mode: PackingMode, dim: usize) -> Result<Capsules<'t, T>> {
    let [b, c, h, w] = check_pack(&maps.shape(), mode, dim)?;
    match mode {
        PackingMode::Across => {
            let g = c / dim;
            let v = maps
                .reshape(&[b, g, dim, h, w])?
                .permute(&[0, 1, 3, 4, 2])?
                .reshape(&[b, g * h * w, dim])?;
            Capsules::new(v, 1)?.with_grid(g, h, w)
        }
        PackingMode::Within => {
            let v = maps.reshape(&[b, c * h, w])?;
            Capsules::new(v, 1)?.with_grid(c, h, 1)
        }
    }
}

/// Plain-tensor form of [`pack`].
pub fn pack_capsules<T: Scalar>(maps: &Tensor<T>, mode: PackingMode, dim: usize) -> Result<CapsuleTensor<T>> {
    let [b, c, h, w] = check_pack(maps.shape(), mode, dim)?;
    let data = match mode {
        PackingMode::Across => {
            let g = c / dim;
            maps.reshape(&[b, g, dim, h, w])?
                .permute(&[0, 1, 3, 4, 2])?
                .reshape(&[b, g * h * w, dim])?
        }
        PackingMode::Within => maps.reshape(&[b, c * h, w])?,
    };
    CapsuleTensor::new(data, 1)
}

/// Inverse of [`pack_capsules`] for maps of shape `(B,C,H,W)`.
pub fn unpack_capsules<T: Scalar>(
    caps: &CapsuleTensor<T>,
    mode: PackingMode,
    maps_shape: [usize; 4],
) -> Result<Tensor<T>> {
    let [b, c, h, w] = maps_shape;
    let dim = caps.capsule_len();
    check_pack(&maps_shape, mode, dim)?;
    if caps.tensor().numel() != b * c * h * w {
        return Err(TensorError::ReshapeMismatch {
            from: caps.tensor().shape().to_vec(),
            to: maps_shape.to_vec(),
        });
    }
    match mode {
        PackingMode::Across => {
            let g = c / dim;
            caps.tensor()
                .reshape(&[b, g, h, w, dim])?
                .permute(&[0, 1, 4, 2, 3])?
                .reshape(&maps_shape)
        }
        PackingMode::Within => caps.tensor().reshape(&maps_shape),
    }
}

/// Predictions `û_{j|i}` with shape `(B, N, M, E)`; `capsule_shape` is the
/// shape of one prediction (`E` elements).
#[derive(Debug, Clone)]
pub struct Predictions<'t, T: Scalar> {
    pub var: Var<'t, T>,
    pub capsule_shape: Vec<usize>,
}

/// `û[b,i,j] = W[i mod Nw, j] · u[b,i]`, contracting the child's last axis.
///
/// `w` has shape `(Nw, M, d_in, n_1..n_k)`. With `Nw == N` every child has
/// its own matrices; a smaller `Nw` dividing `N` shares them.
pub fn transform<'t, T: Scalar>(u: &Capsules<'t, T>, w: Var<'t, T>) -> Result<Predictions<'t, T>> {
    let ws = w.shape();
    let cs = u.capsule_shape().to_vec();
    let d_in = *cs.last().expect("capsule rank >= 1");
    if ws.len() < 4 || ws[2] != d_in {
        return Err(invalid(
            "capsule_transform",
            format!("weights {ws:?} cannot contract capsules of shape {cs:?}"),
        ));
    }
    let (batch, n) = (u.batch(), u.num_capsules());
    let (nw, m) = (ws[0], ws[1]);
    if n % nw != 0 {
        return Err(invalid(
            "capsule_transform",
            format!("{n} children cannot share {nw} weight sets"),
        ));
    }
    let r = numel(&cs[..cs.len() - 1]);
    let d_out = numel(&ws[3..]);
    let mut out_caps: Vec<usize> = cs[..cs.len() - 1].to_vec();
    out_caps.extend_from_slice(&ws[3..]);
    let e = r * d_out;

    let uv = u.var.value();
    let wv = w.value();
    let mut out = vec![T::zero(); batch * n * m * e];
    {
        let (ud, wd) = (uv.data(), wv.data());
        for b in 0..batch {
            for i in 0..n {
                let ubase = (b * n + i) * r * d_in;
                let wi = i % nw;
                for j in 0..m {
                    let wbase = (wi * m + j) * d_in * d_out;
                    let obase = ((b * n + i) * m + j) * e;
                    for ri in 0..r {
                        let dst = &mut out[obase + ri * d_out..obase + (ri + 1) * d_out];
                        for d in 0..d_in {
                            let a = ud[ubase + ri * d_in + d];
                            let wrow = &wd[wbase + d * d_out..wbase + (d + 1) * d_out];
                            for (o, &wv) in dst.iter_mut().zip(wrow) {
                                *o += a * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    let u_shape = uv.shape().to_vec();
    let w_shape = ws.clone();
    let var = w.tape().custom(
        OpKind::CapsuleTransform,
        Tensor::from_parts(vec![batch, n, m, e], out),
        &[u.var, w],
        Box::new(move |g, needs| {
            let (ud, wd, gd) = (uv.data(), wv.data(), g.data());
            let mut du = needs[0].then(|| vec![T::zero(); ud.len()]);
            let mut dw = needs[1].then(|| vec![T::zero(); wd.len()]);
            for b in 0..batch {
                for i in 0..n {
                    let ubase = (b * n + i) * r * d_in;
                    let wi = i % nw;
                    for j in 0..m {
                        let wbase = (wi * m + j) * d_in * d_out;
                        let gbase = ((b * n + i) * m + j) * e;
                        for ri in 0..r {
                            let grow = &gd[gbase + ri * d_out..gbase + (ri + 1) * d_out];
                            for d in 0..d_in {
                                let wrow = wbase + d * d_out..wbase + (d + 1) * d_out;
                                if let Some(du) = du.as_mut() {
                                    let s: T = wd[wrow.clone()]
                                        .iter()
                                        .zip(grow)
                                        .map(|(&a, &b)| a * b)
                                        .sum();
                                    du[ubase + ri * d_in + d] += s;
                                }
                                if let Some(dw) = dw.as_mut() {
                                    let a = ud[ubase + ri * d_in + d];
                                    for (o, &gv) in dw[wrow].iter_mut().zip(grow) {
                                        *o += a * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![
                du.map(|d| Tensor::from_parts(u_shape.clone(), d)),
                dw.map(|d| Tensor::from_parts(w_shape.clone(), d)),
            ]
        }),
    );
    Ok(Predictions {
        var,
        capsule_shape: out_caps,
    })
}

/// `v[b,g,j] = Σ_i c[g,i,j] · û[b,g,i,j]` for predictions `(B,G,I,J,E)` and
/// coupling `(G,I,J)`. `G` indexes independent groups (output positions of
/// a convolutional layer); a fully-connected layer has `G = 1`.
pub fn coupled_sum<'t, T: Scalar>(pred: Var<'t, T>, c: Var<'t, T>) -> Result<Var<'t, T>> {
    let ps = pred.shape();
    let cs = c.shape();
    let (&[batch, groups, ni, nj, e], &[cg, ci, cj]) = (ps.as_slice(), cs.as_slice()) else {
        return Err(TensorError::ShapeMismatch {
            op: "coupled_sum",
            lhs: ps,
            rhs: cs,
        });
    };
    if (cg, ci, cj) != (groups, ni, nj) {
        return Err(TensorError::ShapeMismatch {
            op: "coupled_sum",
            lhs: ps,
            rhs: cs,
        });
    }
    let pv = pred.value();
    let cv = c.value();
    let mut out = vec![T::zero(); batch * groups * nj * e];
    {
        let (pd, cd) = (pv.data(), cv.data());
        for b in 0..batch {
            for g in 0..groups {
                for i in 0..ni {
                    for j in 0..nj {
                        let coef = cd[(g * ni + i) * nj + j];
                        let src = &pd[(((b * groups + g) * ni + i) * nj + j) * e..][..e];
                        let dst = &mut out[((b * groups + g) * nj + j) * e..][..e];
                        for (o, &s) in dst.iter_mut().zip(src) {
                            *o += coef * s;
                        }
                    }
                }
            }
        }
    }
    Ok(pred.tape().custom(
        OpKind::CoupledSum,
        Tensor::from_parts(vec![batch, groups, nj, e], out),
        &[pred, c],
        Box::new(move |gout, needs| {
            let (pd, cd, gd) = (pv.data(), cv.data(), gout.data());
            let mut dp = needs[0].then(|| vec![T::zero(); pd.len()]);
            let mut dc = needs[1].then(|| vec![T::zero(); cd.len()]);
            for b in 0..batch {
                for g in 0..groups {
                    for i in 0..ni {
                        for j in 0..nj {
                            let ci = (g * ni + i) * nj + j;
                            let pbase = (((b * groups + g) * ni + i) * nj + j) * e;
                            let grow = &gd[((b * groups + g) * nj + j) * e..][..e];
                            if let Some(dp) = dp.as_mut() {
                                let coef = cd[ci];
                                for (o, &gv) in dp[pbase..pbase + e].iter_mut().zip(grow) {
                                    *o = coef * gv;
                                }
                            }
                            if let Some(dc) = dc.as_mut() {
                                let s: T = pd[pbase..pbase + e]
                                    .iter()
                                    .zip(grow)
                                    .map(|(&a, &b)| a * b)
                                    .sum();
                                dc[ci] += s;
                            }
                        }
                    }
                }
            }
            vec![
                dp.map(|d| Tensor::from_parts(pv.shape().to_vec(), d)),
                dc.map(|d| Tensor::from_parts(cv.shape().to_vec(), d)),
            ]
        }),
    ))
}

/// Applies `v ↦ f(s)·v` per capsule of `len` elements, where
/// `s = √(‖v‖² + ε)` and `scale(s) = (f(s), f'(s))`.
fn norm_scaled<'t, T, F>(x: Var<'t, T>, len: usize, kind: OpKind, scale: F) -> Var<'t, T>
where
    T: Scalar,
    F: Fn(T) -> (T, T) + 'static,
{
    let xv = x.value();
    let eps = T::lit(NORM_EPS);
    let rows = xv.numel() / len;
    let mut out = vec![T::zero(); xv.numel()];
    let mut factors = Vec::with_capacity(rows);
    for (row, dst) in xv.data().chunks(len).zip(out.chunks_mut(len)) {
        let s = (row.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
        let (f, df) = scale(s);
        for (o, &v) in dst.iter_mut().zip(row) {
            *o = f * v;
        }
        factors.push((s, f, df));
    }
    x.tape().custom(
        kind,
        Tensor::from_parts(xv.shape().to_vec(), out),
        &[x],
        Box::new(move |g, _| {
            let mut d = vec![T::zero(); xv.numel()];
            for (((row, grow), drow), &(s, f, df)) in xv
                .data()
                .chunks(len)
                .zip(g.data().chunks(len))
                .zip(d.chunks_mut(len))
                .zip(&factors)
            {
                let dot: T = row.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                let k = df / s * dot;
                for ((o, &v), &gv) in drow.iter_mut().zip(row).zip(grow) {
                    *o = f * gv + k * v;
                }
            }
            vec![Some(Tensor::from_parts(xv.shape().to_vec(), d))]
        }),
    )
}

/// The squash scale `f(s)` and its derivative, for `v' = f(‖v‖)·v`.
pub fn squash_scale<T: Scalar>(variant: SquashVariant, s: T) -> (T, T) {
    let one = T::one();
    match variant {
        SquashVariant::Ratio => {
            let q = one + s * s;
            (s / q, (one - s * s) / (q * q))
        }
        SquashVariant::Exp => {
            let em1 = (-s).exp_m1();
            let f = -em1 / s;
            let df = if s < T::lit(1e-3) {
                T::lit(-0.5) + s / T::lit(3.0)
            } else {
                (s * (-s).exp() + em1) / (s * s)
            };
            (f, df)
        }
    }
}

pub fn squash<'t, T: Scalar>(v: &Capsules<'t, T>, variant: SquashVariant) -> Capsules<'t, T> {
    let out = norm_scaled(v.var, v.capsule_len(), OpKind::Squash, move |s| {
        squash_scale(variant, s)
    });
    v.rewrap(out)
}

/// Norm gate `max(0, ‖v‖ − τ) · v/‖v‖`.
pub fn capsule_relu<'t, T: Scalar>(v: &Capsules<'t, T>, tau: T) -> Result<Capsules<'t, T>> {
    if !(tau >= T::zero()) {
        return Err(invalid("capsule_relu", "threshold must be non-negative"));
    }
    let out = norm_scaled(v.var, v.capsule_len(), OpKind::CapsuleRelu, move |s| {
        if s > tau {
            (T::one() - tau / s, tau / (s * s))
        } else {
            (T::zero(), T::zero())
        }
    });
    Ok(v.rewrap(out))
}

/// Selects capsules along axis 1: `out[b,k] = in[b, index[k]]`.
pub fn gather<'t, T: Scalar>(u: &Capsules<'t, T>, index: &[usize]) -> Result<Capsules<'t, T>> {
    let n = u.num_capsules();
    if let Some(&bad) = index.iter().find(|&&i| i >= n) {
        return Err(invalid("gather", format!("index {bad} out of range for {n} capsules")));
    }
    let len = u.capsule_len();
    let batch = u.batch();
    let xv = u.var.value();
    let k = index.len();
    let mut out = Vec::with_capacity(batch * k * len);
    for b in 0..batch {
        for &i in index {
            out.extend_from_slice(&xv.data()[(b * n + i) * len..][..len]);
        }
    }
    let mut shape = vec![batch, k];
    shape.extend_from_slice(u.capsule_shape());
    let index = index.to_vec();
    let in_shape = xv.shape().to_vec();
    let var = u.var.tape().custom(
        OpKind::Gather,
        Tensor::from_parts(shape, out),
        &[u.var],
        Box::new(move |g, _| {
            let mut d = vec![T::zero(); numel(&in_shape)];
            for b in 0..batch {
                for (kk, &i) in index.iter().enumerate() {
                    let src = &g.data()[(b * k + kk) * len..][..len];
                    for (o, &s) in d[(b * n + i) * len..][..len].iter_mut().zip(src) {
                        *o += s;
                    }
                }
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), d))]
        }),
    );
    Capsules::new(var, u.capsule_shape().len())
}

fn effective_coupling<'t, T: Scalar>(c: Var<'t, T>, mode: CouplingMode) -> Var<'t, T> {
    match mode {
        CouplingMode::Raw => c,
        CouplingMode::Softmax => c.softmax_last(),
    }
}

/// Fully-connected capsule layer before the squash: transform every child
/// for every parent and take the coupled sum.
///
/// `w: (N, M, d_in, n..)`, `c: (N, M)`.
pub fn capsule_fc_presquash<'t, T: Scalar>(
    u: &Capsules<'t, T>,
    w: Var<'t, T>,
    c: Var<'t, T>,
    coupling: CouplingMode,
) -> Result<Capsules<'t, T>> {
    let n = u.num_capsules();
    let ws = w.shape();
    let cs = c.shape();
    if ws.first() != Some(&n) || cs != [n, ws.get(1).copied().unwrap_or(0)] {
        return Err(invalid(
            "capsule_fc",
            format!("{n} children vs weights {ws:?} and coupling {cs:?}"),
        ));
    }
    let m = ws[1];
    let pred = transform(u, w)?;
    let e = numel(&pred.capsule_shape);
    let batch = u.batch();
    let c = effective_coupling(c, coupling).reshape(&[1, n, m])?;
    let v = coupled_sum(pred.var.reshape(&[batch, 1, n, m, e])?, c)?;
    let mut shape = vec![batch, m];
    shape.extend_from_slice(&pred.capsule_shape);
    Capsules::new(v.reshape(&shape)?, pred.capsule_shape.len())
}

pub fn capsule_fc_forward<'t, T: Scalar>(
    u: &Capsules<'t, T>,
    w: Var<'t, T>,
    c: Var<'t, T>,
    coupling: CouplingMode,
    variant: SquashVariant,
) -> Result<Capsules<'t, T>> {
    Ok(squash(&capsule_fc_presquash(u, w, c, coupling)?, variant))
}

/// Geometry of a convolutional capsule layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CapsuleConvGeometry {
    pub types_in: usize,
    pub rows: usize,
    pub cols: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub out_rows: usize,
    pub out_cols: usize,
}

impl CapsuleConvGeometry {
    pub fn new(grid: (usize, usize, usize), kernel: (usize, usize), stride: usize) -> Result<Self> {
        let (types_in, rows, cols) = grid;
        if stride == 0 || kernel.0 == 0 || kernel.1 == 0 {
            return Err(invalid("capsule_conv", "kernel and stride must be positive"));
        }
        if kernel.0 > rows || kernel.1 > cols {
            return Err(invalid(
                "capsule_conv",
                format!("kernel {kernel:?} does not fit a {rows}x{cols} capsule grid"),
            ));
        }
        Ok(CapsuleConvGeometry {
            types_in,
            rows,
            cols,
            kernel,
            stride,
            out_rows: (rows - kernel.0) / stride + 1,
            out_cols: (cols - kernel.1) / stride + 1,
        })
    }

    pub fn positions_out(&self) -> usize {
        self.out_rows * self.out_cols
    }

    pub fn kernel_extent(&self) -> usize {
        self.kernel.0 * self.kernel.1
    }

    /// Child index for every (output position, kernel offset, type), in
    /// that nesting order.
    pub fn window_index(&self) -> Vec<usize> {
        let mut idx = Vec::with_capacity(self.positions_out() * self.kernel_extent() * self.types_in);
        for oy in 0..self.out_rows {
            for ox in 0..self.out_cols {
                for ky in 0..self.kernel.0 {
                    for kx in 0..self.kernel.1 {
                        let (y, x) = (oy * self.stride + ky, ox * self.stride + kx);
                        for t in 0..self.types_in {
                            idx.push((t * self.rows + y) * self.cols + x);
                        }
                    }
                }
            }
        }
        idx
    }
}

/// Convolutional capsule layer before the squash.
///
/// `w: (types_in, types_out, d_in, n..)` is shared over positions;
/// `c: (positions_out, kernel_extent, types_in, types_out)` is local to
/// each output position. Output capsules are ordered `(type, row, col)`.
pub fn capsule_conv_presquash<'t, T: Scalar>(
    u: &Capsules<'t, T>,
    w: Var<'t, T>,
    c: Var<'t, T>,
    kernel: (usize, usize),
    stride: usize,
    coupling: CouplingMode,
) -> Result<Capsules<'t, T>> {
    let grid = u
        .grid()
        .ok_or_else(|| invalid("capsule_conv", "input capsules carry no spatial grid"))?;
    let geo = CapsuleConvGeometry::new(grid, kernel, stride)?;
    let ws = w.shape();
    if ws.first() != Some(&geo.types_in) || ws.len() < 4 {
        return Err(invalid(
            "capsule_conv",
            format!("weights {ws:?} do not match {} input types", geo.types_in),
        ));
    }
    let types_out = ws[1];
    let (p, q, t) = (geo.positions_out(), geo.kernel_extent(), geo.types_in);
    if c.shape() != [p, q, t, types_out] {
        return Err(invalid(
            "capsule_conv",
            format!("coupling {:?}, expected {:?}", c.shape(), [p, q, t, types_out]),
        ));
    }
    let windows = gather(u, &geo.window_index())?;
    let pred = transform(&windows, w)?;
    let e = numel(&pred.capsule_shape);
    let batch = u.batch();
    let c = effective_coupling(c, coupling).reshape(&[p, q * t, types_out])?;
    let v = coupled_sum(pred.var.reshape(&[batch, p, q * t, types_out, e])?, c)?;
    let v = v.permute(&[0, 2, 1, 3])?;
    let mut shape = vec![batch, types_out * p];
    shape.extend_from_slice(&pred.capsule_shape);
    Capsules::new(v.reshape(&shape)?, pred.capsule_shape.len())?.with_grid(
        types_out,
        geo.out_rows,
        geo.out_cols,
    )
}

pub fn capsule_conv_forward<'t, T: Scalar>(
    u: &Capsules<'t, T>,
    w: Var<'t, T>,
    c: Var<'t, T>,
    kernel: (usize, usize),
    stride: usize,
    coupling: CouplingMode,
    variant: SquashVariant,
) -> Result<Capsules<'t, T>> {
    Ok(squash(
        &capsule_conv_presquash(u, w, c, kernel, stride, coupling)?,
        variant,
    ))
}
