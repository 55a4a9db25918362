//! Single-file model format.
//!
//! Layout (all integers little-endian): `"SGFL"`, `u32` version, `u64` C,
//! `u64` T, `u64` layer count, then per layer a `u8` tag (0 squeeze,
//! 1 coupling, 2 rotate, 3 hartley). A coupling layer carries four
//! convolutions (F hidden, F output, G hidden, G output), each as `u64`
//! C_out, C_in, K followed by the kernel and bias `f64` blobs. The prior
//! closes the file: `u64` classes, `u64` dim, means, log-stds.

use std::path::Path;

use crate::binio::{checked_product, read_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::flow::{CouplingBlock, FlowModel, Layer, Subnet};
use crate::ops::Conv1dParams;
use crate::prior::ClassConditionalGaussian;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SGFL";
pub const MODEL_FORMAT_VERSION: u32 = 1;

const TAG_SQUEEZE: u8 = 0;
const TAG_COUPLING: u8 = 1;
const TAG_ROTATE: u8 = 2;
const TAG_HARTLEY: u8 = 3;

fn write_conv(w: &mut Writer, p: &Conv1dParams) {
    w.u64(p.c_out());
    w.u64(p.c_in());
    w.u64(p.kernel_size());
    w.f64s(p.kernels.data());
    w.f64s(p.bias.data());
}

fn read_conv(r: &mut Reader) -> Result<Conv1dParams> {
    let (c_out, c_in, k) = (r.len()?, r.len()?, r.len()?);
    let n = checked_product(&[c_out, c_in, k], "convolution")?;
    let kernels = Tensor::new(vec![c_out, c_in, k], r.f64s(n)?)?;
    let bias = Tensor::new(vec![c_out], r.f64s(c_out)?)?;
    Conv1dParams::new(kernels, bias)
}

pub fn model_to_bytes(model: &FlowModel) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(MODEL_FORMAT_VERSION);
    let (c, t) = model.input_shape();
    w.u64(c);
    w.u64(t);
    w.u64(model.layers().len());
    for layer in model.layers() {
        match layer {
            Layer::Squeeze => w.u8(TAG_SQUEEZE),
            Layer::Coupling(b) => {
                w.u8(TAG_COUPLING);
                for p in [&b.f.hidden, &b.f.output, &b.g.hidden, &b.g.output] {
                    write_conv(&mut w, p);
                }
            }
            Layer::RotateChannels => w.u8(TAG_ROTATE),
            Layer::Hartley => w.u8(TAG_HARTLEY),
        }
    }
    let prior = model.prior();
    w.u64(prior.n_classes());
    w.u64(prior.dim());
    w.f64s(prior.means().data());
    w.f64s(prior.log_stds().data());
    w.finish()
}

pub fn model_from_bytes(buf: &[u8]) -> Result<FlowModel> {
    let mut r = Reader::new(buf, "model file");
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::Version {
            what: "model format",
            found: version,
            expected: MODEL_FORMAT_VERSION,
        });
    }
    let (c, t) = (r.len()?, r.len()?);
    let n_layers = r.len()?;
    // every layer occupies at least one byte
    if n_layers > buf.len() {
        return Err(Error::Format(format!("model file: implausible layer count {n_layers}")));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let layer = match r.u8()? {
            TAG_SQUEEZE => Layer::Squeeze,
            TAG_COUPLING => {
                let f = Subnet {
                    hidden: read_conv(&mut r)?,
                    output: read_conv(&mut r)?,
                };
                let g = Subnet {
                    hidden: read_conv(&mut r)?,
                    output: read_conv(&mut r)?,
                };
                Layer::Coupling(CouplingBlock { f, g })
            }
            TAG_ROTATE => Layer::RotateChannels,
            TAG_HARTLEY => Layer::Hartley,
            other => return Err(Error::Format(format!("model file: unknown layer tag {other}"))),
        };
        layers.push(layer);
    }
    let (k, d) = (r.len()?, r.len()?);
    let n = checked_product(&[k, d], "prior")?;
    let means = Tensor::new(vec![k, d], r.f64s(n)?)?;
    let log_stds = Tensor::new(vec![k, d], r.f64s(n)?)?;
    r.finish()?;
    FlowModel::new((c, t), layers, ClassConditionalGaussian::new(means, log_stds)?)
}

pub fn save_model(model: &FlowModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model_to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<FlowModel> {
    model_from_bytes(&read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{build_architecture, ArchitectureConfig};

    fn model() -> FlowModel {
        build_architecture(&ArchitectureConfig {
            channels: 2,
            samples: 8,
            n_stages: Some(2),
            kernel_size: 3,
            init_seed: 5,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn bytes_round_trip() {
        let m = model();
        let bytes = model_to_bytes(&m);
        assert_eq!(model_from_bytes(&bytes).unwrap(), m);
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = model_to_bytes(&model());
        bytes[4] = 9;
        let err = model_from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Version { found: 9, .. }), "{err}");
    }

    #[test]
    fn corruption_is_an_error() {
        let bytes = model_to_bytes(&model());
        assert!(model_from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(model_from_bytes(b"NOPE").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(model_from_bytes(&extra).is_err());
    }
}
