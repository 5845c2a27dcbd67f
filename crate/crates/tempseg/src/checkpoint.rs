//! Checkpoint container: "CKP1" magic, the model spec as a key=value text
//! block, epoch/step counters, the training RNG state, and a list of named
//! tensors ("TSR1" each) covering model parameters and optimizer state.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::Tensor;

const MAGIC: &[u8; 4] = b"CKP1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec_block: String,
    pub epoch: u32,
    pub step: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn write<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        let spec = self.spec_block.as_bytes();
        w.write_all(&(spec.len() as u32).to_le_bytes())?;
        w.write_all(spec)?;
        w.write_all(&self.epoch.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&self.rng_seed)?;
        w.write_all(&self.rng_word_pos.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, tensor) in &self.tensors {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u32).to_le_bytes())?;
            w.write_all(nb)?;
            tensor.write_tsr(w)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> std::io::Result<Self> {
        fn bad(msg: &str) -> std::io::Error {
            std::io::Error::new(std::io::ErrorKind::InvalidData, msg.to_string())
        }
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("bad checkpoint magic (expected CKP1)"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let spec_len = u32::from_le_bytes(b4) as usize;
        let mut spec = vec![0u8; spec_len];
        r.read_exact(&mut spec)?;
        let spec_block =
            String::from_utf8(spec).map_err(|_| bad("spec block is not UTF-8"))?;
        r.read_exact(&mut b4)?;
        let epoch = u32::from_le_bytes(b4);
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let step = u64::from_le_bytes(b8);
        let mut rng_seed = [0u8; 32];
        r.read_exact(&mut rng_seed)?;
        let mut b16 = [0u8; 16];
        r.read_exact(&mut b16)?;
        let rng_word_pos = u128::from_le_bytes(b16);
        r.read_exact(&mut b4)?;
        let count = u32::from_le_bytes(b4) as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut b4)?;
            let name_len = u32::from_le_bytes(b4) as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
            tensors.push((name, Tensor::read_tsr(r)?));
        }
        Ok(Checkpoint { spec_block, epoch, step, rng_seed, rng_word_pos, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf).map_err(|e| Error::io(path, e))?;
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::read(&mut bytes.as_slice()).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}
