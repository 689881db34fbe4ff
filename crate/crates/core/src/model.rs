//! Model presets, the parameter registry and the full forward pass.
//!
//! Every model is `conv → relu → conv → pack → squash → capsule layers`,
//! optionally followed by a reconstruction decoder. Parameters live here as
//! plain tensors and are registered on a fresh tape for each step.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::capsule::{
    capsule_conv_presquash, capsule_fc_presquash, capsule_relu, pack, squash, Capsules,
    CapsuleConvGeometry, CouplingMode, PackingMode, SquashVariant,
};
use crate::conv;
use crate::objectives::{
    l2_regularization, margin_loss, reconstruction_loss, squared_error_loss, total_objective,
    DataTerm, Decoder, DecoderShape, ObjectiveConfig,
};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{numel, Result, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    FcGcaps,
    ConvGcaps,
    MultiLayer,
    TinyFc,
    TinyConv,
    TinyMulti,
}

impl Arch {
    pub const ALL: [Arch; 6] = [
        Arch::FcGcaps,
        Arch::ConvGcaps,
        Arch::MultiLayer,
        Arch::TinyFc,
        Arch::TinyConv,
        Arch::TinyMulti,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arch::FcGcaps => "fc_gcaps",
            Arch::ConvGcaps => "conv_gcaps",
            Arch::MultiLayer => "multi_layer",
            Arch::TinyFc => "tiny_fc",
            Arch::TinyConv => "tiny_conv",
            Arch::TinyMulti => "tiny_multi",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Conv,
    Transform,
    Coupling,
    Decoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Conv,
        ParamGroup::Transform,
        ParamGroup::Coupling,
        ParamGroup::Decoder,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ParamGroup::Conv => "conv",
            ParamGroup::Transform => "W",
            ParamGroup::Coupling => "c",
            ParamGroup::Decoder => "decoder",
        }
    }

    /// Groups covered by the L2 term.
    pub fn regularized(self) -> bool {
        matches!(self, ParamGroup::Transform | ParamGroup::Coupling)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub layer: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerKind {
    /// Every child to every one of `parents` capsules.
    Fc { parents: usize },
    /// Shared `W` per (type_in, type_out) over a spatial window.
    Conv {
        types_out: usize,
        kernel: usize,
        stride: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Squash,
    /// Norm gate with the configured threshold.
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapsuleLayerSpec {
    pub kind: LayerKind,
    /// Output extents `n_1..n_k` of each transformation matrix.
    pub out_shape: Vec<usize>,
    pub activation: Activation,
}

/// Everything needed to build and run a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub arch: Arch,
    pub input: [usize; 3],
    pub conv1: ConvSpec,
    pub primary: ConvSpec,
    pub packing: PackingMode,
    /// Capsule length for across packing; within packing uses the map width.
    pub primary_dim: usize,
    pub layers: Vec<CapsuleLayerSpec>,
    pub squash: SquashVariant,
    pub coupling: CouplingMode,
    pub relu_tau: f64,
    pub reconstruction: bool,
    pub objective: ObjectiveConfig,
}

fn fc(parents: usize, out_shape: &[usize], activation: Activation) -> CapsuleLayerSpec {
    CapsuleLayerSpec {
        kind: LayerKind::Fc { parents },
        out_shape: out_shape.to_vec(),
        activation,
    }
}

impl ModelSpec {
    pub fn preset(arch: Arch) -> Self {
        let base = |input: [usize; 3], conv1: ConvSpec, primary: ConvSpec, dim, layers| ModelSpec {
            arch,
            input,
            conv1,
            primary,
            packing: PackingMode::Across,
            primary_dim: dim,
            layers,
            squash: SquashVariant::Ratio,
            coupling: CouplingMode::Raw,
            relu_tau: 0.2,
            reconstruction: false,
            objective: ObjectiveConfig::default(),
        };
        let mnist = [1, 28, 28];
        let c1 = ConvSpec {
            out_channels: 256,
            kernel: 9,
            stride: 1,
        };
        let c2 = ConvSpec {
            out_channels: 256,
            kernel: 9,
            stride: 2,
        };
        let tiny1 = ConvSpec {
            out_channels: 2,
            kernel: 3,
            stride: 1,
        };
        let tiny2 = |out| ConvSpec {
            out_channels: out,
            kernel: 2,
            stride: 1,
        };
        match arch {
            Arch::FcGcaps => base(mnist, c1, c2, 8, vec![fc(10, &[16], Activation::Squash)]),
            Arch::ConvGcaps => base(
                mnist,
                c1,
                c2,
                8,
                vec![CapsuleLayerSpec {
                    kind: LayerKind::Conv {
                        types_out: 10,
                        kernel: 6,
                        stride: 1,
                    },
                    out_shape: vec![4, 4],
                    activation: Activation::Squash,
                }],
            ),
            Arch::MultiLayer => base(
                mnist,
                c1,
                c2,
                8,
                vec![
                    fc(16, &[16], Activation::Relu),
                    fc(10, &[16], Activation::Squash),
                ],
            ),
            Arch::TinyFc => base([1, 5, 5], tiny1, tiny2(2), 2, vec![fc(2, &[2], Activation::Squash)]),
            Arch::TinyConv => base(
                [1, 5, 5],
                tiny2(2),
                tiny2(4),
                2,
                vec![CapsuleLayerSpec {
                    kind: LayerKind::Conv {
                        types_out: 1,
                        kernel: 2,
                        stride: 1,
                    },
                    out_shape: vec![2],
                    activation: Activation::Squash,
                }],
            ),
            Arch::TinyMulti => base(
                [1, 5, 5],
                tiny1,
                tiny2(2),
                2,
                vec![fc(3, &[2], Activation::Relu), fc(2, &[2], Activation::Squash)],
            ),
        }
    }

    /// Spatial extents after both conv layers: `(channels, rows, cols)`.
    pub fn primary_maps(&self) -> Result<[usize; 3]> {
        let extent = |n: usize, c: ConvSpec| {
            if c.kernel == 0 || c.stride == 0 || c.kernel > n {
                Err(spec_error(format!("kernel {} stride {} does not fit extent {n}", c.kernel, c.stride)))
            } else {
                Ok(conv::output_extent(n, c.kernel, c.stride))
            }
        };
        let [_, h, w] = self.input;
        let (h1, w1) = (extent(h, self.conv1)?, extent(w, self.conv1)?);
        let (h2, w2) = (extent(h1, self.primary)?, extent(w1, self.primary)?);
        Ok([self.primary.out_channels, h2, w2])
    }

    /// Capsule length used when packing primary maps.
    pub fn pack_dim(&self) -> Result<usize> {
        Ok(match self.packing {
            PackingMode::Across => self.primary_dim,
            PackingMode::Within => self.primary_maps()?[2],
        })
    }

    /// `(count, capsule_shape, grid)` of the primary capsules.
    fn primary_capsules(&self) -> Result<(usize, Vec<usize>, (usize, usize, usize))> {
        let [c, h, w] = self.primary_maps()?;
        let dim = self.pack_dim()?;
        match self.packing {
            PackingMode::Across => {
                if dim == 0 || c % dim != 0 {
                    return Err(spec_error(format!("{c} maps do not split into {dim}-D capsules")));
                }
                Ok((c / dim * h * w, vec![dim], (c / dim, h, w)))
            }
            PackingMode::Within => Ok((c * h, vec![w], (c, h, 1))),
        }
    }

    /// Capsule parameter shapes and the `(count, capsule_len)` of the
    /// final layer.
    fn walk_capsule_layers(&self) -> Result<(Vec<ShapeEntry>, (usize, usize))> {
        let mut out = Vec::new();
        let (mut n, mut shape, primary_grid) = self.primary_capsules()?;
        let mut grid = Some(primary_grid);
        for (k, layer) in self.layers.iter().enumerate() {
            let name = format!("caps{}", k + 1);
            let d_in = *shape.last().expect("capsule rank");
            let (mut ws, cs) = match layer.kind {
                LayerKind::Fc { parents } => {
                    let shapes = (vec![n, parents, d_in], vec![n, parents]);
                    n = parents;
                    grid = None;
                    shapes
                }
                LayerKind::Conv {
                    types_out,
                    kernel,
                    stride,
                } => {
                    let g = grid.ok_or_else(|| spec_error(format!("{name} needs a spatial grid")))?;
                    let geo = CapsuleConvGeometry::new(g, (kernel, kernel), stride)?;
                    n = types_out * geo.positions_out();
                    grid = Some((types_out, geo.out_rows, geo.out_cols));
                    (
                        vec![geo.types_in, types_out, d_in],
                        vec![geo.positions_out(), geo.kernel_extent(), geo.types_in, types_out],
                    )
                }
            };
            ws.extend_from_slice(&layer.out_shape);
            out.push((format!("{name}.W"), name.clone(), ParamGroup::Transform, ws));
            out.push((format!("{name}.c"), name, ParamGroup::Coupling, cs));
            shape.pop();
            shape.extend_from_slice(&layer.out_shape);
        }
        Ok((out, (n, numel(&shape))))
    }

    /// Parameter names, layers, groups and shapes in registration order.
    pub fn parameter_shapes(&self) -> Result<Vec<ShapeEntry>> {
        let mut out = Vec::new();
        for (layer, spec, cin) in [
            ("conv1", self.conv1, self.input[0]),
            ("primary", self.primary, self.conv1.out_channels),
        ] {
            out.push((
                format!("{layer}.weight"),
                layer.to_string(),
                ParamGroup::Conv,
                vec![spec.out_channels, cin, spec.kernel, spec.kernel],
            ));
            out.push((format!("{layer}.bias"), layer.to_string(), ParamGroup::Conv, vec![spec.out_channels]));
        }
        out.extend(self.walk_capsule_layers()?.0);
        if self.reconstruction {
            for (k, (i, o)) in self.decoder_shape()?.layers().into_iter().enumerate() {
                let name = format!("decoder.fc{}", k + 1);
                out.push((format!("{name}.weight"), "decoder".into(), ParamGroup::Decoder, vec![i, o]));
                out.push((format!("{name}.bias"), "decoder".into(), ParamGroup::Decoder, vec![o]));
            }
        }
        Ok(out)
    }

    /// `(classes, capsule_len)` of the final layer.
    pub fn class_capsules(&self) -> Result<(usize, usize)> {
        Ok(self.walk_capsule_layers()?.1)
    }

    pub fn decoder_shape(&self) -> Result<DecoderShape> {
        let (classes, len) = self.class_capsules()?;
        let pixels = numel(&self.input);
        Ok(if self.arch == Arch::TinyFc || self.arch == Arch::TinyConv || self.arch == Arch::TinyMulti {
            DecoderShape {
                input: classes * len,
                hidden: [6, 8],
                output: pixels,
            }
        } else {
            DecoderShape::standard(classes * len, pixels)
        })
    }
}

/// `(name, layer, group, shape)`.
pub type ShapeEntry = (String, String, ParamGroup, Vec<usize>);

fn spec_error(reason: String) -> TensorError {
    TensorError::Invalid {
        op: "model",
        reason,
    }
}

/// Per-layer and per-group parameter counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub layers: Vec<(String, usize)>,
    pub groups: Vec<(ParamGroup, usize)>,
    pub total: usize,
}

impl std::fmt::Display for ParamCount {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<12} {:>12}", "layer", "parameters")?;
        for (name, n) in &self.layers {
            writeln!(f, "{:<12} {:>12}", name, group_digits(*n))?;
        }
        writeln!(f, "{:<12} {:>12}", "group", "parameters")?;
        for (g, n) in &self.groups {
            writeln!(f, "{:<12} {:>12}", g.label(), group_digits(*n))?;
        }
        write!(f, "{:<12} {:>12}", "total", group_digits(self.total))
    }
}

/// `1234567` → `"1,234,567"`.
pub fn group_digits(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Result of one forward pass on a tape.
pub struct Forward<'t, T: Scalar> {
    pub loss: Var<'t, T>,
    /// Class capsule lengths `(batch, classes)`.
    pub norms: Var<'t, T>,
    /// One tape handle per parameter, in registration order.
    pub params: Vec<Var<'t, T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar> {
    pub spec: ModelSpec,
    pub params: Vec<Parameter<T>>,
}

impl<T: Scalar> Model<T> {
    /// Builds and initializes: conv weights `N(0, 2/fan_in)` with zero
    /// biases, `W ~ N(0, 0.05²)`, `c = 1/num_parents`, decoder weights
    /// uniform in `±1/√fan_in` with zero biases.
    pub fn new(spec: ModelSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.objective.validate()?;
        if spec.relu_tau < 0.0 {
            return Err(spec_error("capsule-relu threshold must be non-negative".into()));
        }
        let normal = Normal::new(0.0, 0.05).expect("valid normal");
        let shapes = spec.parameter_shapes()?;
        let mut params = Vec::with_capacity(shapes.len());
        for (name, layer, group, shape) in shapes {
            let value = match group {
                ParamGroup::Conv if name.ends_with(".weight") => {
                    let he = Normal::new(0.0, (2.0 / numel(&shape[1..]) as f64).sqrt()).expect("valid normal");
                    Tensor::from_fn(&shape, |_| T::lit(he.sample(rng)))
                }
                ParamGroup::Conv => Tensor::zeros(&shape),
                ParamGroup::Transform => Tensor::from_fn(&shape, |_| T::lit(normal.sample(rng))),
                ParamGroup::Coupling => {
                    let parents = *shape.last().expect("coupling rank");
                    Tensor::full(&shape, T::lit(1.0 / parents as f64))
                }
                ParamGroup::Decoder if name.ends_with(".weight") => {
                    let bound = 1.0 / (shape[0] as f64).sqrt();
                    Tensor::from_fn(&shape, |_| T::lit(rng.random_range(-bound..bound)))
                }
                ParamGroup::Decoder => Tensor::zeros(&shape),
            };
            params.push(Parameter {
                name,
                layer,
                group,
                value,
                grad: None,
                trainable: true,
            });
        }
        Ok(Model { spec, params })
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Counts every trainable scalar.
    pub fn count_parameters(&self) -> ParamCount {
        let mut layers: Vec<(String, usize)> = Vec::new();
        let mut groups: Vec<(ParamGroup, usize)> = ParamGroup::ALL.iter().map(|&g| (g, 0)).collect();
        for p in self.params.iter().filter(|p| p.trainable) {
            let n = p.value.numel();
            match layers.iter_mut().find(|(l, _)| *l == p.layer) {
                Some((_, c)) => *c += n,
                None => layers.push((p.layer.clone(), n)),
            }
            groups.iter_mut().find(|(g, _)| *g == p.group).expect("group").1 += n;
        }
        groups.retain(|&(g, n)| n > 0 || g != ParamGroup::Decoder);
        let total = layers.iter().map(|(_, n)| n).sum();
        ParamCount { layers, groups, total }
    }

    /// Registers every parameter on `tape`; frozen ones become constants.
    pub fn register<'t>(&self, tape: &'t Tape<T>) -> Vec<Var<'t, T>> {
        self.params
            .iter()
            .map(|p| {
                if p.trainable {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// Class capsules for `images: (B, C, H, W)`.
    pub fn class_capsules<'t>(&self, tape: &'t Tape<T>, vars: &[Var<'t, T>], images: &Tensor<T>) -> Result<Capsules<'t, T>> {
        let spec = &self.spec;
        let x = tape.constant(images.clone());
        let h = x.conv2d(vars[0], vars[1], spec.conv1.stride)?.relu();
        let maps = h.conv2d(vars[2], vars[3], spec.primary.stride)?;
        let (_, _, grid) = spec.primary_capsules()?;
        let mut u = squash(&pack(maps, spec.packing, spec.pack_dim()?)?, spec.squash).with_grid(grid.0, grid.1, grid.2)?;
        let tau = T::lit(spec.relu_tau);
        for (k, layer) in spec.layers.iter().enumerate() {
            let (w, c) = (vars[4 + 2 * k], vars[5 + 2 * k]);
            let pre = match layer.kind {
                LayerKind::Fc { .. } => capsule_fc_presquash(&u, w, c, spec.coupling)?,
                LayerKind::Conv { kernel, stride, .. } => {
                    capsule_conv_presquash(&u, w, c, (kernel, kernel), stride, spec.coupling)?
                }
            };
            u = match layer.activation {
                Activation::Squash => squash(&pre, spec.squash),
                Activation::Relu => capsule_relu(&pre, tau)?,
            };
        }
        Ok(u)
    }

    /// Full objective for one batch.
    pub fn forward<'t>(&self, tape: &'t Tape<T>, images: &Tensor<T>, labels: &Tensor<T>) -> Result<Forward<'t, T>> {
        let vars = self.register(tape);
        let v = self.class_capsules(tape, &vars, images)?;
        let norms = v.norms();
        let cfg = &self.spec.objective;
        let data = match cfg.data_term {
            DataTerm::Margin => margin_loss(norms, labels, &cfg.margin)?,
            DataTerm::SquaredError => squared_error_loss(norms, labels)?,
        };
        let recon = if self.spec.reconstruction {
            let base = 4 + 2 * self.spec.layers.len();
            let l = |k: usize| (vars[base + 2 * k], vars[base + 2 * k + 1]);
            let decoder = Decoder {
                layers: [l(0), l(1), l(2)],
            };
            Some(reconstruction_loss(&v, labels, images, &decoder)?)
        } else {
            None
        };
        let regularized: Vec<Var<'t, T>> = self
            .params
            .iter()
            .zip(&vars)
            .filter(|(p, _)| p.group.regularized())
            .map(|(_, v)| *v)
            .collect();
        let l2 = l2_regularization(tape, &regularized, cfg.weight_decay)?;
        let loss = total_objective(data, recon, l2, cfg)?;
        Ok(Forward {
            loss,
            norms,
            params: vars,
        })
    }

    /// Moves gradients for every trainable parameter out of `grads`.
    pub fn collect_grads(&mut self, grads: &mut Gradients<T>, vars: &[Var<'_, T>]) {
        for (p, v) in self.params.iter_mut().zip(vars) {
            if p.trainable {
                p.grad = grads.take(*v);
            }
        }
    }

    /// Class-capsule lengths `(B, classes)` without building the loss.
    pub fn predict_norms(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let vars: Vec<Var<'_, T>> = self.params.iter().map(|p| tape.constant(p.value.clone())).collect();
        let v = self.class_capsules(&tape, &vars, images)?;
        Ok(v.norms().value().as_ref().clone())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    layer: p.layer.clone(),
                    group: p.group,
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(|g| g.cast()),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }
}

/// Row-wise argmax.
pub fn predictions<T: Scalar>(norms: &Tensor<T>) -> Vec<usize> {
    let classes = norms.shape()[1];
    norms
        .data()
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn count(arch: Arch, recon: bool) -> ParamCount {
        let mut spec = ModelSpec::preset(arch);
        spec.reconstruction = recon;
        // shapes only: a zero-sized RNG draw is not needed for counting
        let shapes = spec.parameter_shapes().unwrap();
        let mut layers: Vec<(String, usize)> = Vec::new();
        let mut groups: Vec<(ParamGroup, usize)> = ParamGroup::ALL.iter().map(|&g| (g, 0)).collect();
        for (_, layer, group, shape) in shapes {
            let n = numel(&shape);
            match layers.iter_mut().find(|(l, _)| *l == layer) {
                Some((_, c)) => *c += n,
                None => layers.push((layer, n)),
            }
            groups.iter_mut().find(|(g, _)| *g == group).unwrap().1 += n;
        }
        let total = layers.iter().map(|(_, n)| n).sum();
        ParamCount { layers, groups, total }
    }

    fn group(c: &ParamCount, g: ParamGroup) -> usize {
        c.groups.iter().find(|(x, _)| *x == g).map_or(0, |(_, n)| *n)
    }

    #[test]
    fn fc_gcaps_counts() {
        let c = count(Arch::FcGcaps, true);
        assert_eq!(group(&c, ParamGroup::Conv), 5_329_664);
        assert_eq!(group(&c, ParamGroup::Transform), 1_474_560);
        assert_eq!(group(&c, ParamGroup::Coupling), 11_520);
        assert_eq!(group(&c, ParamGroup::Decoder), 1_411_344);
        assert_eq!(c.total, 8_227_088);
        assert_eq!(count(Arch::FcGcaps, false).total, 6_815_744);
    }

    #[test]
    fn within_packing_keeps_w_count() {
        let mut spec = ModelSpec::preset(Arch::FcGcaps);
        spec.packing = PackingMode::Within;
        let shapes = spec.parameter_shapes().unwrap();
        let w = shapes.iter().find(|s| s.0 == "caps1.W").unwrap();
        assert_eq!(w.3, vec![1536, 10, 6, 16]);
        assert_eq!(numel(&w.3), 1_474_560);
    }

    #[test]
    fn conv_gcaps_shapes() {
        let shapes = ModelSpec::preset(Arch::ConvGcaps).parameter_shapes().unwrap();
        let w = shapes.iter().find(|s| s.0 == "caps1.W").unwrap();
        let c = shapes.iter().find(|s| s.0 == "caps1.c").unwrap();
        assert_eq!(w.3, vec![32, 10, 8, 4, 4]);
        assert_eq!(c.3, vec![1, 36, 32, 10]);
        assert_eq!(ModelSpec::preset(Arch::ConvGcaps).class_capsules().unwrap(), (10, 16));
    }

    #[test]
    fn tiny_models_are_small() {
        for arch in [Arch::TinyFc, Arch::TinyConv, Arch::TinyMulti] {
            let mut spec = ModelSpec::preset(arch);
            spec.reconstruction = true;
            let m = Model::<f64>::new(spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert!(m.count_parameters().total <= 500, "{arch:?}");
        }
        let mut spec = ModelSpec::preset(Arch::TinyFc);
        spec.reconstruction = true;
        assert_eq!(count(Arch::TinyFc, true).total, 389);
    }

    #[test]
    fn single_dense_layer_formula() {
        let d = DecoderShape {
            input: 7,
            hidden: [3, 5],
            output: 2,
        };
        assert_eq!(d.parameter_count(), 8 * 3 + 4 * 5 + 6 * 2);
    }

    #[test]
    fn registry_count_matches_shapes() {
        let mut spec = ModelSpec::preset(Arch::TinyConv);
        spec.reconstruction = true;
        let m = Model::<f32>::new(spec.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let c = m.count_parameters();
        assert_eq!(c.total, count(Arch::TinyConv, true).total);
        let mut frozen = m.clone();
        frozen.params[0].trainable = false;
        assert_eq!(frozen.count_parameters().total, c.total - m.params[0].value.numel());
    }

    #[test]
    fn coupling_starts_uniform() {
        let m = Model::<f32>::new(ModelSpec::preset(Arch::TinyMulti), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(m.param("caps1.c").unwrap().value.data().iter().all(|&v| v == 1.0 / 3.0));
        assert!(m.param("caps2.c").unwrap().value.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn forward_runs_for_every_tiny_preset() {
        for arch in [Arch::TinyFc, Arch::TinyConv, Arch::TinyMulti] {
            let mut spec = ModelSpec::preset(arch);
            spec.reconstruction = true;
            spec.objective.reconstruction_enabled = true;
            let m = Model::<f64>::new(spec.clone(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            let (classes, _) = spec.class_capsules().unwrap();
            let mut shape = vec![2];
            shape.extend_from_slice(&spec.input);
            let x = Tensor::from_fn(&shape, |i| (i as f64 * 0.37).sin().abs());
            let y = crate::objectives::one_hot(&[0, classes - 1], classes);
            let tape = Tape::new();
            let f = m.forward(&tape, &x, &y).unwrap();
            assert!(f.loss.value().item().is_finite());
            assert_eq!(f.norms.shape(), vec![2, classes]);
            assert!(f.norms.value().data().iter().all(|&n| n < 1.0));
        }
    }

    #[test]
    fn argmax_predictions() {
        let n = Tensor::new(&[2, 3], vec![0.1f32, 0.9, 0.2, 0.5, 0.4, 0.3]).unwrap();
        assert_eq!(predictions(&n), vec![1, 0]);
    }

    #[test]
    fn digit_grouping() {
        assert_eq!(group_digits(8_227_088), "8,227,088");
        assert_eq!(group_digits(389), "389");
        assert_eq!(group_digits(1000), "1,000");
    }
}
