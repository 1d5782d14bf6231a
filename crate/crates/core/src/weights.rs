//! CSEW binary weight files.
//!
//! Little-endian layout:
//!
//! ```text
//! "CSEW" | u32 version (1) | u32 biased-layer count
//! per biased layer: u8 kind (0 = conv2d, 1 = linear) | u32 ndims | u32 dims[ndims]
//!                   | f32 weights[prod(dims)] | u32 bias len | f32 bias[len]
//! footer: f32 channel means[3] | u32 vector count
//!         per vector: f32 input[3*64*64] | f32 expected logits[classes]
//! ```
//!
//! Conv weights are `[out, in, 3, 3]`, linear weights `[out, in]`. The
//! ReLU/pooling layers are implied by the fixed topology (see
//! [`Network::from_biased_layers`]).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Conv2d, Layer, Linear, Network, INPUT_SHAPE};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CSEW";
pub const VERSION: u32 = 1;
const TAG_CONV: u8 = 0;
const TAG_LINEAR: u8 = 1;

/// The committed reference classifier, trained on the planted-patch corpus.
pub const REFERENCE_WEIGHTS: &[u8] = include_bytes!("../assets/reference.csew");

/// An input with the logits a reference implementation produced for it.
#[derive(Debug, Clone, PartialEq)]
pub struct ParityVector {
    pub input: Tensor,
    pub expected_logits: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct WeightFile {
    pub network: Network,
    pub parity: Vec<ParityVector>,
}

impl WeightFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn reference() -> Self {
        Self::from_bytes(REFERENCE_WEIGHTS).expect("committed reference weights are valid")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::WeightFormat("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::WeightFormat(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut convs = Vec::new();
        let mut linears = Vec::new();
        for index in 0..count {
            let tag = r.u8()?;
            let ndims = r.u32()? as usize;
            let dims = (0..ndims)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let weight = r.f32s(dims.iter().product())?;
            let bias_len = r.u32()? as usize;
            let bias = r.f32s(bias_len)?;
            match (tag, dims.as_slice()) {
                (TAG_CONV, &[out, inp, 3, 3]) => {
                    if !linears.is_empty() {
                        return Err(Error::WeightFormat(format!(
                            "layer {index}: convolution after linear layer"
                        )));
                    }
                    convs.push(Conv2d {
                        in_channels: inp,
                        out_channels: out,
                        weight,
                        bias,
                    })
                }
                (TAG_LINEAR, &[out, inp]) => linears.push(Linear {
                    in_features: inp,
                    out_features: out,
                    weight,
                    bias,
                }),
                _ => {
                    return Err(Error::WeightFormat(format!(
                        "layer {index}: unsupported kind {tag} with dims {dims:?}"
                    )))
                }
            }
        }
        let means = r.f32s(3)?;
        let network = Network::from_biased_layers(convs, linears, INPUT_SHAPE.to_vec())
            .map_err(|e| Error::WeightFormat(e.to_string()))?
            .with_channel_means([means[0], means[1], means[2]]);
        let input_len: usize = INPUT_SHAPE.iter().product();
        let classes = network.num_classes();
        let n_vectors = r.u32()? as usize;
        let mut parity = Vec::with_capacity(n_vectors);
        for _ in 0..n_vectors {
            let input = Tensor::new(INPUT_SHAPE.to_vec(), r.f32s(input_len)?)
                .map_err(|e| Error::WeightFormat(e.to_string()))?;
            parity.push(ParityVector {
                input,
                expected_logits: r.f32s(classes)?,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::WeightFormat(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { network, parity })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let biased: Vec<&Layer> = self.network.layers().iter().filter(|l| l.bias().is_some()).collect();
        out.extend_from_slice(&(biased.len() as u32).to_le_bytes());
        for layer in biased {
            let (tag, dims, weight, bias) = match layer {
                Layer::Conv2d(c) => (TAG_CONV, vec![c.out_channels, c.in_channels, 3, 3], &c.weight, &c.bias),
                Layer::Linear(l) => (TAG_LINEAR, vec![l.out_features, l.in_features], &l.weight, &l.bias),
                _ => unreachable!("filtered to biased layers"),
            };
            out.push(tag);
            put_u32(&mut out, dims.len());
            for d in dims {
                put_u32(&mut out, d);
            }
            put_f32s(&mut out, weight);
            put_u32(&mut out, bias.len());
            put_f32s(&mut out, bias);
        }
        put_f32s(&mut out, &self.network.channel_means());
        put_u32(&mut out, self.parity.len());
        for v in &self.parity {
            if v.input.shape() != INPUT_SHAPE || v.expected_logits.len() != self.network.num_classes() {
                return Err(Error::WeightFormat("parity vector does not match the network".into()));
            }
            put_f32s(&mut out, v.input.data());
            put_f32s(&mut out, &v.expected_logits);
        }
        Ok(out)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::WeightFormat(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::WeightFormat("size overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
