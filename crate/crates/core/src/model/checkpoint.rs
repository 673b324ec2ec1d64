//! Checkpoint container: header, JSON model config, then per-path tensors
//! (path, shape, little-endian f64 data) in canonical order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::encoder::check_params;
use super::params::ParamTree;
use crate::container::{expect_version, Reader, Writer};
use crate::error::Result;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"LNTCKPT\0";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(out: W, config: &ModelConfig, params: &ParamTree) -> Result<W> {
    check_params(params, config)?;
    let mut w = Writer::new(out, MAGIC, VERSION)?;
    w.str(&serde_json::to_string(config)?)?;
    w.u64(params.layout().len() as u64)?;
    for (path, t) in params.iter() {
        w.str(path)?;
        w.shape(t.shape())?;
        w.f64s(t.data())?;
    }
    w.finish()
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<(ModelConfig, ParamTree)> {
    let (mut r, version) = Reader::new(input, MAGIC)?;
    expect_version(version, VERSION, "checkpoint")?;
    let config: ModelConfig = serde_json::from_str(&r.str()?)?;
    let n = r.u64()? as usize;
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let path = r.str()?;
        let shape = r.shape()?;
        let numel = shape.iter().product();
        let data = r.f64s(numel)?;
        pairs.push((path, Tensor::new(shape, data)?));
    }
    r.finish()?;
    let params = ParamTree::from_tensors(pairs)?;
    check_params(&params, &config)?;
    Ok((config, params))
}

pub fn save_checkpoint(path: impl AsRef<Path>, config: &ModelConfig, params: &ParamTree) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    write_checkpoint(file, config, params)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelConfig, ParamTree)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::Head;
    use crate::model::encoder::build_model;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 13,
            hidden: 8,
            num_layers: 3,
            num_heads: 4,
            intermediate: 12,
            max_positions: 10,
            type_vocab: 2,
            eps: 1e-12,
            head: Head::Regression,
        }
    }

    #[test]
    fn round_trip_is_bit_exact_and_byte_stable() {
        let config = cfg();
        let params = build_model(&config, 42).unwrap();
        let bytes = write_checkpoint(Vec::new(), &config, &params).unwrap();
        let again = write_checkpoint(Vec::new(), &config, &params).unwrap();
        assert_eq!(bytes, again);
        let (c2, p2) = read_checkpoint(&bytes[..]).unwrap();
        assert_eq!(c2, config);
        for ((pa, ta), (pb, tb)) in params.iter().zip(p2.iter()) {
            assert_eq!(pa, pb);
            let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn rejects_corruption() {
        let config = cfg();
        let params = build_model(&config, 1).unwrap();
        let mut bytes = write_checkpoint(Vec::new(), &config, &params).unwrap();
        assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        bytes.push(0);
        assert!(read_checkpoint(&bytes[..]).is_err());
        bytes[0] = b'X';
        assert!(read_checkpoint(&bytes[..]).is_err());
    }
}
