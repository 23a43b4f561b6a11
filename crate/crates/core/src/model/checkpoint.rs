use std::fs;
use std::path::Path;

use serde_json::{Map, Value};

use super::{HyperParams, ModelParams};
use crate::diffcore::{ParamSet, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 7] = b"RLT4REC";
const VERSION: u32 = 1;

/// Binary layout (little endian):
///
/// ```text
/// "RLT4REC" | u32 version | u32 header_len | header (key=value lines)
/// u32 n_tensors | per tensor: u32 name_len, name, u32 rank,
///                 rank x u64 extents, row-major f32 data
/// ```
pub fn to_bytes(params: &ModelParams<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let header = header_text(&params.hp)?;
    put_u32(&mut out, header.len())?;
    out.extend_from_slice(header.as_bytes());
    put_u32(&mut out, params.tensors.len())?;
    for (name, t) in params.tensors.iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len())?;
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = r.u32()? as usize;
    let header = std::str::from_utf8(r.take(hlen)?)
        .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
    let hp = parse_header(header)?;
    let n = r.u32()? as usize;
    let mut tensors = ParamSet::new();
    for _ in 0..n {
        let nlen = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let e = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            shape.push(usize::try_from(e).map_err(|_| Error::Checkpoint("extent overflow".into()))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: extent overflow")))?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(name, Tensor::new(shape, data)?.with_grad());
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let params = ModelParams { hp, tensors };
    params.check_shapes()?;
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(params)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams<f32>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    from_bytes(&fs::read(path)?)
}

fn header_text(hp: &HyperParams) -> Result<String> {
    let Value::Object(map) = serde_json::to_value(hp)? else {
        unreachable!("hyperparameters serialize to an object")
    };
    Ok(map.iter().map(|(k, v)| format!("{k}={v}\n")).collect())
}

fn parse_header(text: &str) -> Result<HyperParams> {
    let mut map = Map::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("header line without '=': {line}")))?;
        let v: Value = serde_json::from_str(v)
            .map_err(|e| Error::Checkpoint(format!("header value for {k}: {e}")))?;
        map.insert(k.to_string(), v);
    }
    serde_json::from_value(Value::Object(map)).map_err(|e| Error::Checkpoint(format!("header: {e}")))
}

fn put_u32(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Checkpoint(format!("{n} does not fit in u32")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
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
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
