//! PRDB1 container for embedders and codebooks.
//!
//! ```text
//! magic      8 bytes  "PRDB1\0\0\0"
//! extent     u32
//! code_dim   u32      0 when no embedder is stored
//! n_embed    u32      number of embedder records
//! n_patches  u32      number of codebook records
//! stride     u32      codebook stride, 0 when no codebook
//! embedder   u32 kind (0 coarse, 1 detailed), extent³·code_dim f32 weights
//!            (column-major), code_dim f32 biases
//! patch      3 × u32 corner, ⌈extent³/8⌉ bytes of occupancy bits (LSB first)
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use super::codebook::Codebook;
use super::embed::{Embedder, EmbedderKind};
use crate::error::{format_err, invalid, Result};
use crate::voxelgrid::Patch;

pub const MAGIC: &[u8; 8] = b"PRDB1\0\0\0";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Database {
    pub embedders: Vec<Embedder>,
    pub codebook: Option<Codebook>,
}

impl Database {
    pub fn embedder(&self, kind: EmbedderKind) -> Option<&Embedder> {
        self.embedders.iter().find(|e| e.kind() == kind)
    }
}

pub fn encode_database(db: &Database) -> Result<Vec<u8>> {
    let extent = db
        .embedders
        .first()
        .map(|e| e.extent())
        .or(db.codebook.as_ref().map(|c| c.extent()))
        .ok_or_else(|| invalid("nothing to store"))?;
    let code_dim = db.embedders.first().map_or(0, |e| e.code_dim());
    if db.embedders.iter().any(|e| e.extent() != extent || e.code_dim() != code_dim) {
        return Err(invalid("stored embedders must share extent and code_dim"));
    }
    if db.codebook.as_ref().is_some_and(|c| c.extent() != extent) {
        return Err(invalid("codebook extent differs from the embedder extent"));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let n_patches = db.codebook.as_ref().map_or(0, |c| c.len());
    let stride = db.codebook.as_ref().map_or(0, |c| c.stride());
    for v in [extent, code_dim, db.embedders.len(), n_patches, stride] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for e in &db.embedders {
        let kind: u32 = match e.kind() {
            EmbedderKind::Coarse => 0,
            EmbedderKind::Detailed => 1,
        };
        out.extend_from_slice(&kind.to_le_bytes());
        for &w in e.weights().iter().chain(e.bias()) {
            out.extend_from_slice(&(w as f32).to_le_bytes());
        }
    }
    if let Some(cb) = &db.codebook {
        let n_bytes = extent.pow(3).div_ceil(8);
        for p in cb.patches() {
            for c in p.corner() {
                out.extend_from_slice(&(c as u32).to_le_bytes());
            }
            let mut bits = vec![0u8; n_bytes];
            for (i, &v) in p.values().iter().enumerate() {
                if v >= 0.5 {
                    bits[i / 8] |= 1 << (i % 8);
                }
            }
            out.extend_from_slice(&bits);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(format_err(self.pos, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn f32(&mut self, what: &str) -> Result<f64> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes(b.try_into().unwrap()) as f64)
    }
}

pub fn decode_database(bytes: &[u8]) -> Result<Database> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(format_err(0, "not a PRDB1 file"));
    }
    let extent = r.u32("extent")?;
    let code_dim = r.u32("code_dim")?;
    let n_embed = r.u32("embedder count")?;
    let n_patches = r.u32("patch count")?;
    let stride = r.u32("stride")?;
    if extent == 0 || extent > 64 {
        return Err(format_err(8, format!("unsupported extent {extent}")));
    }
    if n_embed > 2 {
        return Err(format_err(16, format!("at most two embedders, found {n_embed}")));
    }
    let n_in = extent.pow(3);
    let mut embedders = Vec::with_capacity(n_embed);
    for _ in 0..n_embed {
        let at = r.pos;
        let kind = match r.u32("embedder kind")? {
            0 => EmbedderKind::Coarse,
            1 => EmbedderKind::Detailed,
            k => return Err(format_err(at, format!("unknown embedder kind {k}"))),
        };
        let need = (n_in + 1) * code_dim * 4;
        if bytes.len() - r.pos < need {
            return Err(format_err(r.pos, "truncated embedder weights"));
        }
        let weights = (0..n_in * code_dim).map(|_| r.f32("weights")).collect::<Result<Vec<_>>>()?;
        let bias = (0..code_dim).map(|_| r.f32("bias")).collect::<Result<Vec<_>>>()?;
        let e = Embedder::from_parts(kind, extent, code_dim, weights, bias)
            .map_err(|e| format_err(at, e.to_string()))?;
        embedders.push(e);
    }
    let codebook = if n_patches > 0 {
        let n_bytes = n_in.div_ceil(8);
        let mut patches = Vec::with_capacity(n_patches.min(1 << 20));
        for _ in 0..n_patches {
            let corner = [r.u32("corner")?, r.u32("corner")?, r.u32("corner")?];
            let bits = r.take(n_bytes, "patch occupancy")?;
            let data = (0..n_in).map(|i| ((bits[i / 8] >> (i % 8)) & 1) as f32).collect();
            patches.push(Patch::from_values(extent, data).with_corner(corner));
        }
        Some(Codebook::from_patches(extent, stride, patches)?)
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(format_err(r.pos, "trailing bytes after the last record"));
    }
    Ok(Database { embedders, codebook })
}

pub fn save_database(db: &Database, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_database(db)?)?;
    Ok(())
}

pub fn load_database(path: impl AsRef<Path>) -> Result<Database> {
    decode_database(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::build_codebook;
    use crate::voxelgrid::VoxelGrid;
    use rand::SeedableRng;

    fn sample_db() -> Database {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let c = Embedder::random(EmbedderKind::Coarse, 3, 5, &mut rng);
        // f32 round trip is exact only for f32-representable weights
        let round = |e: &Embedder| {
            Embedder::from_parts(
                e.kind(),
                e.extent(),
                e.code_dim(),
                e.weights().iter().map(|&w| w as f32 as f64).collect(),
                e.bias().iter().map(|&w| w as f32 as f64 + 0.25).collect(),
            )
            .unwrap()
        };
        let c = round(&c);
        let d = c.clone().with_kind(EmbedderKind::Detailed);
        let mut g = VoxelGrid::empty(8);
        g.set(1, 2, 3, 1.0);
        g.set(5, 5, 5, 1.0);
        Database {
            embedders: vec![c, d],
            codebook: Some(build_codebook(&g, 3, 2).unwrap()),
        }
    }

    #[test]
    fn round_trip() {
        let db = sample_db();
        let bytes = encode_database(&db).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(decode_database(&bytes).unwrap(), db);
        let only = Database {
            embedders: vec![],
            codebook: db.codebook.clone(),
        };
        assert_eq!(decode_database(&encode_database(&only).unwrap()).unwrap(), only);
    }

    #[test]
    fn header_layout() {
        let db = sample_db();
        let bytes = encode_database(&db).unwrap();
        let field = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap());
        assert_eq!([field(0), field(1), field(2), field(4)], [3, 5, 2, 2]);
        assert_eq!(field(3) as usize, db.codebook.as_ref().unwrap().len());
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = encode_database(&sample_db()).unwrap();
        assert!(decode_database(b"PVOX1\0\0\0").is_err());
        for cut in [4, 12, 40, bytes.len() - 1] {
            assert!(matches!(decode_database(&bytes[..cut]), Err(crate::Error::Format { .. })), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_database(&extra).is_err());
        let mut kind = bytes;
        kind[28] = 7;
        assert!(decode_database(&kind).is_err());
    }
}
