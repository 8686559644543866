//! Binary checkpoint format.
//!
//! ```text
//! QPCNv1 <num_tensors>\n
//! <name> <ndim> <d0> <d1> ...\n<prod(d) little-endian binary64 values>
//! ...
//! META <seed> <epochs> <final_loss>\n
//! ```
//!
//! A four-directional checkpoint is four such sections, each preceded by a
//! `DIR <quarter_turns>\n` line.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::nn::Tensor;
use crate::quadro::QuadroParams;
use crate::scalar::Scalar;

const MAGIC: &str = "QPCNv1";

/// Training metadata stored alongside the weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs: usize,
    pub final_loss: f64,
}

impl Default for TrainMeta {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 0,
            final_loss: f64::NAN,
        }
    }
}

/// What a checkpoint file turned out to contain.
#[derive(Debug, Clone)]
pub enum Checkpoint<T> {
    Single(ModelParams<T>, TrainMeta),
    Quadro(QuadroParams<T>, [TrainMeta; 4]),
}

fn write_section<T: Scalar>(out: &mut impl Write, params: &ModelParams<T>, meta: &TrainMeta) -> Result<()> {
    let tensors = params.tensors();
    writeln!(out, "{MAGIC} {}", tensors.len())?;
    for (name, t) in params.tensor_names().iter().zip(tensors) {
        write!(out, "{name} {}", t.shape().len())?;
        for d in t.shape() {
            write!(out, " {d}")?;
        }
        out.write_all(b"\n")?;
        let mut bytes = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            bytes.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        out.write_all(&bytes)?;
    }
    writeln!(out, "META {} {} {}", meta.seed, meta.epochs, meta.final_loss)?;
    Ok(())
}

pub fn write_checkpoint<T: Scalar>(out: &mut impl Write, params: &ModelParams<T>, meta: &TrainMeta) -> Result<()> {
    write_section(out, params, meta)
}

pub fn write_quadro_checkpoint<T: Scalar>(out: &mut impl Write, quadro: &QuadroParams<T>, metas: &[TrainMeta; 4]) -> Result<()> {
    for (k, (model, meta)) in quadro.sub_models().iter().zip(metas).enumerate() {
        writeln!(out, "DIR {k}")?;
        write_section(out, model, meta)?;
    }
    Ok(())
}

/// Reads one `\n`-terminated ASCII line; `None` at clean end of input.
fn read_line(input: &mut impl BufRead) -> Result<Option<String>> {
    let mut buf = Vec::new();
    let n = input.read_until(b'\n', &mut buf)?;
    if n == 0 {
        return Ok(None);
    }
    if buf.pop() != Some(b'\n') {
        return Err(Error::Format("truncated file: unterminated header line".into()));
    }
    String::from_utf8(buf)
        .map(Some)
        .map_err(|_| Error::Format("header line is not valid UTF-8".into()))
}

fn expect_line(input: &mut impl BufRead, what: &str) -> Result<String> {
    read_line(input)?.ok_or_else(|| Error::Format(format!("truncated file: expected {what}")))
}

fn parse_num<N: std::str::FromStr>(tok: Option<&str>, what: &str) -> Result<N> {
    tok.and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::Format(format!("invalid {what}")))
}

fn read_section<T: Scalar>(input: &mut impl BufRead) -> Result<(ModelParams<T>, TrainMeta)> {
    let header = expect_line(input, "QPCNv1 header")?;
    let mut toks = header.split(' ');
    let magic = toks.next().unwrap_or("");
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let count: usize = parse_num(toks.next(), "tensor count")?;
    if toks.next().is_some() {
        return Err(Error::Format("unexpected tokens after tensor count".into()));
    }
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let line = expect_line(input, "tensor descriptor")?;
        let mut toks = line.split(' ');
        let name = toks.next().filter(|n| !n.is_empty()).ok_or_else(|| Error::Format("empty tensor name".into()))?;
        let ndim: usize = parse_num(toks.next(), "tensor rank")?;
        let shape: Vec<usize> = (0..ndim).map(|_| parse_num(toks.next(), "tensor dimension")).collect::<Result<_>>()?;
        if toks.next().is_some() {
            return Err(Error::Format(format!("descriptor of {name} has extra tokens")));
        }
        let len: usize = shape.iter().product();
        let mut bytes = vec![0u8; len * 8];
        input
            .read_exact(&mut bytes)
            .map_err(|_| Error::Format(format!("truncated file: tensor {name} data incomplete")))?;
        let data: Vec<T> = bytes
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        tensors.push((name.to_string(), Tensor::from_vec(&shape, data)?));
    }
    let meta_line = expect_line(input, "META line")?;
    let mut toks = meta_line.split(' ');
    if toks.next() != Some("META") {
        return Err(Error::Format("expected META line after tensors".into()));
    }
    let meta = TrainMeta {
        seed: parse_num(toks.next(), "META seed")?,
        epochs: parse_num(toks.next(), "META epochs")?,
        final_loss: parse_num(toks.next(), "META final loss")?,
    };
    let params = ModelParams::from_named_tensors(tensors)?;
    Ok((params, meta))
}

/// Reads a single-model or four-directional checkpoint.
pub fn read_checkpoint<T: Scalar>(input: &mut impl BufRead) -> Result<Checkpoint<T>> {
    let is_quadro = input.fill_buf()?.starts_with(b"DIR ");
    let out = if is_quadro {
        let mut models = Vec::with_capacity(4);
        let mut metas = [TrainMeta::default(); 4];
        for (k, meta_slot) in metas.iter_mut().enumerate() {
            let line = expect_line(input, "DIR line")?;
            if line != format!("DIR {k}") {
                return Err(Error::Format(format!("expected \"DIR {k}\", found {line:?}")));
            }
            let (model, meta) = read_section(input)?;
            models.push(model);
            *meta_slot = meta;
        }
        let models: [ModelParams<T>; 4] = models.try_into().map_err(|_| Error::Format("four directions".into()))?;
        Checkpoint::Quadro(QuadroParams::new(models)?, metas)
    } else {
        let (model, meta) = read_section(input)?;
        Checkpoint::Single(model, meta)
    };
    if !input.fill_buf()?.is_empty() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(out)
}

pub fn checkpoint_bytes<T: Scalar>(params: &ModelParams<T>, meta: &TrainMeta) -> Vec<u8> {
    let mut out = Vec::new();
    write_checkpoint(&mut out, params, meta).expect("writing to memory");
    out
}

pub fn quadro_checkpoint_bytes<T: Scalar>(quadro: &QuadroParams<T>, metas: &[TrainMeta; 4]) -> Vec<u8> {
    let mut out = Vec::new();
    write_quadro_checkpoint(&mut out, quadro, metas).expect("writing to memory");
    out
}

pub fn save_checkpoint<T: Scalar>(params: &ModelParams<T>, meta: &TrainMeta, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(params, meta))?;
    Ok(())
}

pub fn save_quadro_checkpoint<T: Scalar>(quadro: &QuadroParams<T>, metas: &[TrainMeta; 4], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, quadro_checkpoint_bytes(quadro, metas))?;
    Ok(())
}

pub fn load_any_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path.as_ref())?;
    read_checkpoint(&mut bytes.as_slice())
}

/// Loads a single-model checkpoint.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(ModelParams<T>, TrainMeta)> {
    match load_any_checkpoint(path)? {
        Checkpoint::Single(p, m) => Ok((p, m)),
        Checkpoint::Quadro(..) => Err(Error::Format("expected a single-model checkpoint, found four directions".into())),
    }
}

/// Loads a four-directional checkpoint.
pub fn load_quadro_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(QuadroParams<T>, [TrainMeta; 4])> {
    match load_any_checkpoint(path)? {
        Checkpoint::Quadro(q, m) => Ok((q, m)),
        Checkpoint::Single(..) => Err(Error::Format("expected a four-directional checkpoint".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model(seed: u64) -> ModelParams<f64> {
        let cfg = ModelConfig {
            num_classes: 4,
            num_layers: 3,
            features: 4,
            first_kernel: 5,
            hidden_kernel: 3,
            head_channels: 6,
        };
        ModelParams::init(cfg, seed).unwrap()
    }

    fn meta() -> TrainMeta {
        TrainMeta {
            seed: 42,
            epochs: 3,
            final_loss: 0.123_456_789_012_345_67,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model(1);
        let bytes = checkpoint_bytes(&m, &meta());
        match read_checkpoint::<f64>(&mut bytes.as_slice()).unwrap() {
            Checkpoint::Single(back, meta_back) => {
                assert_eq!(back.config(), m.config());
                let a: Vec<u64> = m.to_flat().iter().map(|x| x.to_bits()).collect();
                let b: Vec<u64> = back.to_flat().iter().map(|x| x.to_bits()).collect();
                assert_eq!(a, b);
                assert_eq!(meta_back, meta());
                assert_eq!(checkpoint_bytes(&back, &meta_back), bytes);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn header_layout() {
        let bytes = checkpoint_bytes(&model(2), &meta());
        let n = model(2).tensors().len();
        assert!(bytes.starts_with(format!("QPCNv1 {n}\nlayer0.vertical.weight 4 8 4 5 5\n").as_bytes()));
        assert!(bytes.ends_with(b"META 42 3 0.12345678901234566\n"));
    }

    #[test]
    fn quadro_round_trip() {
        let q = QuadroParams::new([model(1), model(2), model(3), model(4)]).unwrap();
        let metas = [meta(); 4];
        let bytes = quadro_checkpoint_bytes(&q, &metas);
        assert!(bytes.starts_with(b"DIR 0\nQPCNv1 "));
        match read_checkpoint::<f64>(&mut bytes.as_slice()).unwrap() {
            Checkpoint::Quadro(back, _) => assert_eq!(back, q),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = checkpoint_bytes(&model(1), &meta());
        for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
            let err = read_checkpoint::<f64>(&mut &bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format(_)), "cut {cut}: {err:?}");
        }
        assert!(matches!(read_checkpoint::<f64>(&mut &b""[..]), Err(Error::Format(_))));
    }

    #[test]
    fn bad_magic_is_named() {
        let mut bytes = checkpoint_bytes(&model(1), &meta());
        bytes[..6].copy_from_slice(b"XXXXv1");
        match read_checkpoint::<f64>(&mut bytes.as_slice()) {
            Err(Error::Format(msg)) => assert!(msg.contains("XXXX"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn shape_errors_detected() {
        let text = checkpoint_bytes(&model(1), &meta());
        // Rewrite the head bias descriptor to claim a different length.
        let needle = b"head.out.bias 1 4\n";
        let pos = text.windows(needle.len()).position(|w| w == needle).unwrap();
        let mut bad = text[..pos].to_vec();
        bad.extend_from_slice(b"head.out.bias 1 5\n");
        bad.extend_from_slice(&text[pos + needle.len()..pos + needle.len() + 32]);
        bad.extend_from_slice(&[0u8; 8]);
        bad.extend_from_slice(b"META 42 3 0.5\n");
        assert!(matches!(read_checkpoint::<f64>(&mut bad.as_slice()), Err(Error::ShapeMismatch(_))));
    }
}
