//! Versioned binary checkpoints: named parameter table, optimizer state,
//! RNG state, and epoch counter.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::tensor::Tensor;
use super::NnError;

const MAGIC: &[u8; 8] = b"NNCKPT01";
const VERSION: u32 = 1;
/// Precision flag: all tensors in this crate are 64-bit.
const PRECISION_F64: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha20Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model_kind: String,
    /// Model-specific metadata (hyperparameters that shapes alone do not pin).
    pub meta_json: String,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Vec<(String, Tensor)>,
    pub rng: Option<RngState>,
    pub epoch: u64,
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn write_table(w: &mut impl Write, table: &[(String, Tensor)]) -> std::io::Result<()> {
    write_u32(w, table.len() as u32)?;
    for (name, t) in table {
        write_str(w, name)?;
        write_u32(w, t.shape().len() as u32)?;
        for &d in t.shape() {
            write_u64(w, d as u64)?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact_n(r: &mut impl Read, n: usize) -> std::io::Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let b = read_exact_n(r, 4)?;
    Ok(u32::from_le_bytes(b.try_into().unwrap()))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let b = read_exact_n(r, 8)?;
    Ok(u64::from_le_bytes(b.try_into().unwrap()))
}

fn read_str(r: &mut impl Read) -> Result<String, NnError> {
    let n = read_u32(r)? as usize;
    let b = read_exact_n(r, n)?;
    String::from_utf8(b).map_err(|_| NnError::Corrupt("non-utf8 string in checkpoint"))
}

fn read_table(r: &mut impl Read) -> Result<Vec<(String, Tensor)>, NnError> {
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name = read_str(r)?;
        let ndim = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let b = read_exact_n(r, 8)?;
            data.push(f64::from_le_bytes(b.try_into().unwrap()));
        }
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    Ok(out)
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        write_u32(&mut w, VERSION)?;
        w.write_all(&[PRECISION_F64])?;
        write_str(&mut w, &self.model_kind)?;
        write_str(&mut w, &self.meta_json)?;
        write_table(&mut w, &self.params)?;
        write_table(&mut w, &self.optimizer)?;
        match &self.rng {
            Some(state) => {
                w.write_all(&[1u8])?;
                w.write_all(&state.seed)?;
                write_u64(&mut w, state.stream)?;
                w.write_all(&state.word_pos.to_le_bytes())?;
            }
            None => w.write_all(&[0u8])?,
        }
        write_u64(&mut w, self.epoch)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let magic = read_exact_n(&mut r, 8)?;
        if magic != MAGIC {
            return Err(NnError::Corrupt("bad checkpoint magic"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(NnError::Corrupt("unsupported checkpoint version"));
        }
        let precision = read_exact_n(&mut r, 1)?[0];
        if precision != PRECISION_F64 {
            return Err(NnError::Corrupt("unsupported precision flag"));
        }
        let model_kind = read_str(&mut r)?;
        let meta_json = read_str(&mut r)?;
        let params = read_table(&mut r)?;
        let optimizer = read_table(&mut r)?;
        let has_rng = read_exact_n(&mut r, 1)?[0];
        let rng = if has_rng == 1 {
            let seed: [u8; 32] = read_exact_n(&mut r, 32)?.try_into().unwrap();
            let stream = read_u64(&mut r)?;
            let word_pos = u128::from_le_bytes(read_exact_n(&mut r, 16)?.try_into().unwrap());
            Some(RngState { seed, stream, word_pos })
        } else {
            None
        };
        let epoch = read_u64(&mut r)?;
        Ok(Checkpoint { model_kind, meta_json, params, optimizer, rng, epoch })
    }

    pub fn find(&self, name: &str) -> Result<&Tensor, NnError> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or(NnError::Corrupt("missing parameter in checkpoint"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");

        let mut rng = ChaCha20Rng::seed_from_u64(9);
        rng.set_stream(3);
        let _ = rng.next_u64();

        let ck = Checkpoint {
            model_kind: "test".into(),
            meta_json: "{\"k\":1}".into(),
            params: vec![(
                "w".into(),
                Tensor::from_vec(&[2, 2], vec![1.0, -0.25, 3.5e-300, f64::MIN_POSITIVE]).unwrap(),
            )],
            optimizer: vec![],
            rng: Some(RngState::capture(&rng)),
            epoch: 17,
        };
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.model_kind, "test");
        assert_eq!(back.meta_json, ck.meta_json);
        assert_eq!(back.params[0].1, ck.params[0].1);
        assert_eq!(back.epoch, 17);

        // The restored RNG continues the exact stream.
        let mut a = back.rng.unwrap().restore();
        let mut b = rng;
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxx").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
