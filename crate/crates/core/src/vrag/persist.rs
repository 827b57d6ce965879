//! Binary index files. All integers and floats are little-endian.
//!
//! ```text
//! magic      4 bytes  "RAGX"
//! version    u32      1
//! dim        u32
//! m          u32
//! ef_c       u32
//! ef_s       u32
//! seed       u64
//! count      u64
//! records    count x { study_id str, image str, report str, labels str (JSON), vector dim x f32 }
//! entry      i64      -1 when empty
//! adjacency  count x { layers u32, layers x { n u32, n x u32 } }
//! ```
//! A `str` is a u32 byte length followed by UTF-8 bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::{EmbeddingRecord, HnswIndex, HnswParams, Memory, VragError};

pub const MAGIC: &[u8; 4] = b"RAGX";
pub const VERSION: u32 = 1;

fn put_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_u32::<LE>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn get_str(r: &mut impl Read) -> Result<String, VragError> {
    let len = r.read_u32::<LE>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| VragError::Format(format!("invalid utf-8: {e}")))
}

pub fn encode(index: &HnswIndex, w: &mut impl Write) -> Result<(), VragError> {
    let memory = crate::vrag::VectorStore::memory(index);
    let p = index.params();
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    w.write_u32::<LE>(memory.dim() as u32)?;
    for v in [p.m, p.ef_construction, p.ef_search] {
        w.write_u32::<LE>(v as u32)?;
    }
    w.write_u64::<LE>(p.seed)?;
    w.write_u64::<LE>(memory.len() as u64)?;
    for r in memory.records() {
        put_str(w, &r.study_id)?;
        put_str(w, &r.image)?;
        put_str(w, &r.report_text)?;
        put_str(w, &serde_json::to_string(&r.labels).expect("findings serialize"))?;
        for x in &r.vector {
            w.write_f32::<LE>(*x)?;
        }
    }
    w.write_i64::<LE>(index.entry().map(i64::from).unwrap_or(-1))?;
    for node in index.links() {
        w.write_u32::<LE>(node.len() as u32)?;
        for layer in node {
            w.write_u32::<LE>(layer.len() as u32)?;
            for n in layer {
                w.write_u32::<LE>(*n)?;
            }
        }
    }
    Ok(())
}

pub fn decode(r: &mut impl Read) -> Result<HnswIndex, VragError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(VragError::Format("bad magic".into()));
    }
    let version = r.read_u32::<LE>()?;
    if version != VERSION {
        return Err(VragError::Format(format!("unsupported version {version}")));
    }
    let dim = r.read_u32::<LE>()? as usize;
    let params = HnswParams {
        m: r.read_u32::<LE>()? as usize,
        ef_construction: r.read_u32::<LE>()? as usize,
        ef_search: r.read_u32::<LE>()? as usize,
        seed: r.read_u64::<LE>()?,
    };
    let count = r.read_u64::<LE>()? as usize;
    let mut memory = Memory::with_dim(dim);
    for _ in 0..count {
        let study_id = get_str(r)?;
        let image = get_str(r)?;
        let report_text = get_str(r)?;
        let labels = serde_json::from_str(&get_str(r)?).map_err(|e| VragError::Format(format!("labels: {e}")))?;
        let mut vector = vec![0f32; dim];
        r.read_f32_into::<LE>(&mut vector)?;
        memory.insert_stored(EmbeddingRecord {
            study_id,
            image,
            vector,
            report_text,
            labels,
        })?;
    }
    let entry = match r.read_i64::<LE>()? {
        -1 => None,
        e if e >= 0 => Some(e as u32),
        e => return Err(VragError::Format(format!("bad entry point {e}"))),
    };
    let mut links = Vec::with_capacity(count);
    for _ in 0..count {
        let layers = r.read_u32::<LE>()? as usize;
        if layers == 0 {
            return Err(VragError::Format("node without layers".into()));
        }
        let mut node = Vec::with_capacity(layers);
        for _ in 0..layers {
            let n = r.read_u32::<LE>()? as usize;
            let mut ids = vec![0u32; n];
            r.read_u32_into::<LE>(&mut ids)?;
            node.push(ids);
        }
        links.push(node);
    }
    HnswIndex::from_parts(params, memory, links, entry)
}

pub fn write_index(index: &HnswIndex, path: impl AsRef<Path>) -> Result<(), VragError> {
    let mut w = BufWriter::new(File::create(path)?);
    encode(index, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_index(path: impl AsRef<Path>) -> Result<HnswIndex, VragError> {
    decode(&mut BufReader::new(File::open(path)?))
}
