//! `.xlm` model container.
//!
//! ```text
//! magic    "XLM1"
//! u32      format version (1)
//! u32      hidden width
//! u32      input width per frame (49)
//! u32      class count (3)
//! u8       layer-norm sites present (bit 0 input, bit 1 recurrent, bit 2 cell)
//! u32      tensor count
//! tensor*  u16 name length, name (utf-8), u8 rank, u32 dims[rank], f64 values[Π dims]
//! ```
//!
//! All integers and floats little-endian.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{CoreError, Result};
use crate::layer_norm::LayerNormParams;
use crate::lstm::{InputScaler, LnLstmParams, NUM_CLASSES};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::window::FRAME_WIDTH;

pub const MAGIC: &[u8; 4] = b"XLM1";
pub const FORMAT_VERSION: u32 = 1;

struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

fn put<W: Write>(out: &mut W, name: &str, dims: &[usize], data: impl Iterator<Item = f64>) -> Result<()> {
    out.write_u16::<LittleEndian>(name.len() as u16)?;
    out.write_all(name.as_bytes())?;
    out.write_u8(dims.len() as u8)?;
    for &d in dims {
        out.write_u32::<LittleEndian>(d as u32)?;
    }
    for v in data {
        out.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

pub fn write_model<T: Scalar, W: Write>(p: &LnLstmParams<T>, out: &mut W) -> Result<()> {
    p.validate()?;
    let h = p.hidden;
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    out.write_u32::<LittleEndian>(h as u32)?;
    out.write_u32::<LittleEndian>(FRAME_WIDTH as u32)?;
    out.write_u32::<LittleEndian>(NUM_CLASSES as u32)?;
    let lns = [
        ("ln_input", &p.ln_input),
        ("ln_recurrent", &p.ln_recurrent),
        ("ln_cell", &p.ln_cell),
    ];
    let mut flags = 0u8;
    for (bit, (_, ln)) in lns.iter().enumerate() {
        if ln.is_some() {
            flags |= 1 << bit;
        }
    }
    out.write_u8(flags)?;
    let count = 7 + 3 * lns.iter().filter(|(_, l)| l.is_some()).count();
    out.write_u32::<LittleEndian>(count as u32)?;

    let f = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>().into_iter();
    put(out, "scaler.mean", &[FRAME_WIDTH], f(&p.scaler.mean))?;
    put(out, "scaler.scale", &[FRAME_WIDTH], f(&p.scaler.scale))?;
    put(out, "w_input", &[4 * h, FRAME_WIDTH], f(p.w_input.as_slice()))?;
    put(out, "w_recurrent", &[4 * h, h], f(p.w_recurrent.as_slice()))?;
    put(out, "gate_bias", &[4 * h], f(&p.gate_bias))?;
    for (name, ln) in lns {
        if let Some(ln) = ln {
            put(out, &format!("{name}.gain"), &[ln.width()], f(&ln.gain))?;
            put(out, &format!("{name}.bias"), &[ln.width()], f(&ln.bias))?;
            put(out, &format!("{name}.var_eps"), &[1], std::iter::once(ln.var_eps.as_f64()))?;
        }
    }
    put(out, "head.weight", &[NUM_CLASSES, h], f(p.head_weight.as_slice()))?;
    put(out, "head.bias", &[NUM_CLASSES], f(&p.head_bias))?;
    Ok(())
}

pub fn read_model<T: Scalar, R: Read>(input: &mut R) -> Result<LnLstmParams<T>> {
    let bad = |m: String| CoreError::ModelFormat(m);
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let version = input.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let h = input.read_u32::<LittleEndian>()? as usize;
    let width = input.read_u32::<LittleEndian>()? as usize;
    let classes = input.read_u32::<LittleEndian>()? as usize;
    if width != FRAME_WIDTH || classes != NUM_CLASSES || h == 0 {
        return Err(bad(format!("header hidden={h} width={width} classes={classes}")));
    }
    let flags = input.read_u8()?;
    let count = input.read_u32::<LittleEndian>()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = input.read_u16::<LittleEndian>()? as usize;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
        let rank = input.read_u8()? as usize;
        let dims = (0..rank)
            .map(|_| input.read_u32::<LittleEndian>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        if n > 1 << 28 {
            return Err(bad(format!("tensor {name} too large")));
        }
        let mut data = vec![0.0; n];
        input.read_f64_into::<LittleEndian>(&mut data)?;
        tensors.insert(name, Tensor { dims, data });
    }

    let mut take = |name: &str, dims: &[usize]| -> Result<Vec<T>> {
        let t = tensors
            .remove(name)
            .ok_or_else(|| bad(format!("missing tensor {name}")))?;
        if t.dims != dims {
            return Err(bad(format!("tensor {name}: dims {:?}, expected {dims:?}", t.dims)));
        }
        Ok(t.data.into_iter().map(T::lit).collect())
    };
    let mat = |r: usize, c: usize, v: Vec<T>| Matrix::from_vec(r, c, v).expect("dims checked");

    let scaler = InputScaler {
        mean: take("scaler.mean", &[FRAME_WIDTH])?,
        scale: take("scaler.scale", &[FRAME_WIDTH])?,
    };
    let w_input = mat(4 * h, FRAME_WIDTH, take("w_input", &[4 * h, FRAME_WIDTH])?);
    let w_recurrent = mat(4 * h, h, take("w_recurrent", &[4 * h, h])?);
    let gate_bias = take("gate_bias", &[4 * h])?;
    let mut ln = |bit: u8, name: &str, width: usize| -> Result<Option<LayerNormParams<T>>> {
        if flags & (1 << bit) == 0 {
            return Ok(None);
        }
        Ok(Some(LayerNormParams {
            gain: take(&format!("{name}.gain"), &[width])?,
            bias: take(&format!("{name}.bias"), &[width])?,
            var_eps: take(&format!("{name}.var_eps"), &[1])?[0],
        }))
    };
    let ln_input = ln(0, "ln_input", 4 * h)?;
    let ln_recurrent = ln(1, "ln_recurrent", 4 * h)?;
    let ln_cell = ln(2, "ln_cell", h)?;
    let head_weight = mat(NUM_CLASSES, h, take("head.weight", &[NUM_CLASSES, h])?);
    let head_bias = take("head.bias", &[NUM_CLASSES])?;
    let p = LnLstmParams {
        hidden: h,
        scaler,
        w_input,
        w_recurrent,
        gate_bias,
        ln_input,
        ln_recurrent,
        ln_cell,
        head_weight,
        head_bias,
    };
    p.validate()?;
    Ok(p)
}

pub fn save_model<T: Scalar>(p: &LnLstmParams<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_model(p, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<LnLstmParams<T>> {
    let bytes = std::fs::read(path)?;
    read_model(&mut bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_exact() {
        let p = LnLstmParams::<f64>::random(5, 42);
        let mut buf = Vec::new();
        write_model(&p, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"XLM1");
        let q: LnLstmParams<f64> = read_model(&mut buf.as_slice()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn pass_through_sites_roundtrip() {
        let mut p = LnLstmParams::<f64>::random(3, 1);
        p.ln_recurrent = None;
        let mut buf = Vec::new();
        write_model(&p, &mut buf).unwrap();
        let q: LnLstmParams<f64> = read_model(&mut buf.as_slice()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let p = LnLstmParams::<f64>::random(3, 1);
        let mut buf = Vec::new();
        write_model(&p, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'Y';
        assert!(matches!(
            read_model::<f64, _>(&mut bad.as_slice()),
            Err(CoreError::ModelFormat(_))
        ));
        buf.truncate(buf.len() - 8);
        assert!(read_model::<f64, _>(&mut buf.as_slice()).is_err());
    }
}
