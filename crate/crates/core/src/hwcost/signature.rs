use std::fmt;

use serde::{Deserialize, Serialize};

use crate::space::{Layer, Network};
use crate::tensor::kernels::ConvGeometry;
use crate::tensor::{Dims, KernelShape, Padding, Shape3, Stride};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Conv,
    Add,
    Gap,
    Softmax,
    /// Fused into the preceding convolution on the target.
    Relu,
    /// Identity at inference.
    Dropout,
}

impl OpKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::Conv => "conv",
            OpKind::Add => "add",
            OpKind::Gap => "gap",
            OpKind::Softmax => "softmax",
            OpKind::Relu => "relu",
            OpKind::Dropout => "dropout",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "conv" => OpKind::Conv,
            "add" => OpKind::Add,
            "gap" => OpKind::Gap,
            "softmax" => OpKind::Softmax,
            "relu" => OpKind::Relu,
            "dropout" => OpKind::Dropout,
            _ => return None,
        })
    }
}

/// Storage format of activations and weights for memory accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    Int8,
    Float32,
}

impl Precision {
    pub fn bytes(self) -> u64 {
        match self {
            Precision::Int8 => 1,
            Precision::Float32 => 4,
        }
    }
}

/// One executable operator variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct OpSignature {
    pub kind: OpKind,
    pub input: Shape3,
    /// `(k_t, k_s)` for convolutions.
    pub kernel: Option<(usize, usize)>,
    pub stride: Stride,
    pub padding: Padding,
    pub f_out: usize,
}

impl OpSignature {
    pub fn conv(input: Shape3, kt: usize, ks: usize, stride: Stride, f_out: usize) -> Self {
        Self {
            kind: OpKind::Conv,
            input,
            kernel: Some((kt, ks)),
            stride,
            padding: Padding::Same,
            f_out,
        }
    }

    fn elementwise(kind: OpKind, input: Shape3) -> Self {
        Self {
            kind,
            input,
            kernel: None,
            stride: Stride::unit(),
            padding: Padding::Valid,
            f_out: input.f,
        }
    }

    pub fn add(shape: Shape3) -> Self {
        Self::elementwise(OpKind::Add, shape)
    }

    pub fn gap(input: Shape3) -> Self {
        Self::elementwise(OpKind::Gap, input)
    }

    pub fn softmax(classes: usize) -> Self {
        Self::elementwise(OpKind::Softmax, Shape3::new(1, 1, classes))
    }

    pub fn relu(shape: Shape3) -> Self {
        Self::elementwise(OpKind::Relu, shape)
    }

    pub fn dropout(shape: Shape3) -> Self {
        Self::elementwise(OpKind::Dropout, shape)
    }

    pub fn geometry(&self) -> Option<ConvGeometry> {
        let (kt, ks) = self.kernel?;
        let kernel = KernelShape::new(kt, ks, self.input.f, self.f_out);
        ConvGeometry::new(self.input, kernel, self.stride, self.padding).ok()
    }

    pub fn output(&self) -> Shape3 {
        match self.kind {
            OpKind::Conv => self.geometry().map_or(self.input, |g| g.output),
            OpKind::Gap => Shape3::new(1, 1, self.input.f),
            _ => self.input,
        }
    }

    pub fn weight_elements(&self) -> u64 {
        self.kernel
            .map_or(0, |(kt, ks)| (kt * ks * self.input.f * self.f_out) as u64)
    }

    /// Multiply-accumulates; element count for the non-convolution ops that
    /// do work, zero for fused and no-op kinds.
    pub fn macs(&self) -> u64 {
        match self.kind {
            OpKind::Conv => self.geometry().map_or(0, |g| g.macs()),
            OpKind::Add | OpKind::Gap | OpKind::Softmax => self.input.len() as u64,
            OpKind::Relu | OpKind::Dropout => 0,
        }
    }

    /// Bytes read and written: input, output and weights.
    pub fn bytes_moved(&self, precision: Precision) -> u64 {
        let elems = match self.kind {
            OpKind::Relu | OpKind::Dropout => 0,
            OpKind::Add => 3 * self.input.len() as u64,
            _ => (self.input.len() + self.output().len()) as u64 + self.weight_elements(),
        };
        elems * precision.bytes()
    }

    /// Injective text key used by tables.
    pub fn canonical(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for OpSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let Shape3 { t, s, f: fi } = self.input;
        let kernel = self.kernel.map_or("-".to_string(), |(kt, ks)| format!("{kt}x{ks}"));
        let pad = match self.padding {
            Padding::Same => "same",
            Padding::Valid => "valid",
        };
        write!(
            f,
            "{}:{t}x{s}x{fi}:k{kernel}:s{}x{}:{pad}:{}",
            self.kind.as_str(),
            self.stride.t,
            self.stride.s,
            self.f_out
        )
    }
}

/// Signature of every layer, `None` for ops that cost nothing (zero fill).
pub fn network_signatures(net: &Network) -> Vec<Option<OpSignature>> {
    net.layers()
        .iter()
        .map(|node| match &node.layer {
            Layer::Conv {
                input, weight, stride, ..
            } => {
                let Dims::Kernel(k) = net.params().get(*weight).dims else { return None };
                Some(OpSignature::conv(net.value_shape(*input), k.kt, k.ks, *stride, k.f_out))
            }
            Layer::Add { a, .. } => Some(OpSignature::add(net.value_shape(*a))),
            Layer::Gap { input } => Some(OpSignature::gap(net.value_shape(*input))),
            Layer::Softmax { input } => Some(OpSignature::softmax(net.value_shape(*input).f)),
            Layer::Zeros => None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_macs_count_padded_taps() {
        let sig = OpSignature::conv(Shape3::new(8, 1, 1), 3, 1, Stride::new(2, 1), 1);
        assert_eq!(sig.output(), Shape3::new(4, 1, 1));
        assert_eq!(sig.macs(), 12);
        assert_eq!(OpSignature::add(Shape3::new(4, 2, 8)).macs(), 64);
    }

    #[test]
    fn canonical_keys_differ_per_field() {
        let base = OpSignature::conv(Shape3::new(16, 9, 4), 3, 1, Stride::new(2, 1), 8);
        let variants = [
            OpSignature::conv(Shape3::new(16, 9, 4), 5, 1, Stride::new(2, 1), 8),
            OpSignature::conv(Shape3::new(16, 9, 4), 3, 1, Stride::new(1, 1), 8),
            OpSignature::conv(Shape3::new(16, 9, 8), 3, 1, Stride::new(2, 1), 8),
            OpSignature::conv(Shape3::new(16, 9, 4), 3, 1, Stride::new(2, 1), 4),
            OpSignature {
                padding: Padding::Valid,
                ..base
            },
        ];
        for v in variants {
            assert_ne!(v.canonical(), base.canonical());
        }
        assert_eq!(base.canonical(), "conv:16x9x4:k3x1:s2x1:same:8");
        assert_ne!(OpSignature::add(Shape3::new(4, 4, 4)).canonical(), OpSignature::gap(Shape3::new(4, 4, 4)).canonical());
    }

    #[test]
    fn float_bytes_are_four_times_int8() {
        let sig = OpSignature::gap(Shape3::new(16, 9, 8));
        assert_eq!(sig.bytes_moved(Precision::Float32), 4 * sig.bytes_moved(Precision::Int8));
        assert_eq!(sig.input.len(), 1152);
    }
}
