//! Little-endian binary formats: raw clips (`IICCLIP1`), encoder weights
//! (`IICWGT1`), memory banks (`IICBNK1`) and feature sets (`IICFTR1`).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array4};

use crate::contrastive::{BankRole, MemoryBank, MemoryBanks};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::retrieval::FeatureRecord;
use crate::{IicError, Result};

pub const CLIP_MAGIC: &[u8; 8] = b"IICCLIP1";
pub const WEIGHTS_MAGIC: &[u8; 7] = b"IICWGT1";
pub const BANK_MAGIC: &[u8; 7] = b"IICBNK1";
pub const FEATURE_MAGIC: &[u8; 7] = b"IICFTR1";

fn read_exact_vec<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|e| IicError::Format(format!("truncated {what}: {e}")))?;
    Ok(buf)
}

fn read_u8<R: Read>(r: &mut R, what: &str) -> Result<u8> {
    Ok(read_exact_vec(r, 1, what)?[0])
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let b = read_exact_vec(r, 4, what)?;
    Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let b = read_exact_vec(r, 8, what)?;
    Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
}

fn read_f32s<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<f32>> {
    let bytes = read_exact_vec(r, n.checked_mul(4).ok_or_else(|| too_large(what))?, what)?;
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
}

fn read_f64s<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<f64>> {
    let bytes = read_exact_vec(r, n.checked_mul(8).ok_or_else(|| too_large(what))?, what)?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

fn too_large(what: &str) -> IicError {
    IicError::Format(format!("{what}: declared size overflows"))
}

fn expect_magic<R: Read>(r: &mut R, magic: &[u8], what: &str) -> Result<()> {
    let got = read_exact_vec(r, magic.len(), what)?;
    if got != magic {
        return Err(IicError::Format(format!(
            "{what}: bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&got),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

fn expect_eof<R: Read>(r: &mut R, what: &str) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(IicError::Format(format!("{what}: trailing bytes"))),
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| IicError::Format(format!("{what} = {v} does not fit in u32")))
}

/// One stored video (or clip): frames plus its label and id.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipFile {
    pub frames: Array4<f32>,
    pub class_label: u32,
    pub video_id: u32,
}

pub fn write_clip<W: Write>(w: &mut W, clip: &ClipFile) -> Result<()> {
    let (t, h, wd, c) = clip.frames.dim();
    w.write_all(CLIP_MAGIC)?;
    for v in [t, h, wd, c] {
        w.write_all(&to_u32(v, "clip dim")?.to_le_bytes())?;
    }
    w.write_all(&clip.class_label.to_le_bytes())?;
    w.write_all(&clip.video_id.to_le_bytes())?;
    // Standard layout iteration order is t, h, w, c.
    for v in clip.frames.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_clip<R: Read>(r: &mut R) -> Result<ClipFile> {
    expect_magic(r, CLIP_MAGIC, "clip file")?;
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = read_u32(r, "clip header")? as usize;
    }
    let class_label = read_u32(r, "clip header")?;
    let video_id = read_u32(r, "clip header")?;
    let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| too_large("clip"))?;
    let data = read_f32s(r, n, "clip frames")?;
    expect_eof(r, "clip file")?;
    let frames = Array4::from_shape_vec((dims[0], dims[1], dims[2], dims[3]), data)
        .map_err(|e| IicError::Format(e.to_string()))?;
    Ok(ClipFile { frames, class_label, video_id })
}

pub fn save_clip(path: &Path, clip: &ClipFile) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_clip(&mut w, clip)?;
    w.flush()?;
    Ok(())
}

pub fn load_clip(path: &Path) -> Result<ClipFile> {
    let mut r = BufReader::new(File::open(path)?);
    read_clip(&mut r).map_err(|e| match e {
        IicError::Format(m) => IicError::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_encoder<W: Write>(w: &mut W, config: &EncoderConfig, params: &EncoderParams) -> Result<()> {
    w.write_all(WEIGHTS_MAGIC)?;
    let header = [
        config.in_channels,
        config.clip_len,
        config.height,
        config.width,
        config.kernel_t,
        config.kernel_s,
        config.embedding_dim,
        config.standardize_input as usize,
        config.stage_channels.len(),
    ];
    for v in header.into_iter().chain(config.stage_channels.iter().copied()) {
        w.write_all(&to_u32(v, "encoder config")?.to_le_bytes())?;
    }
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for v in params.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_encoder<R: Read>(r: &mut R) -> Result<(EncoderConfig, EncoderParams)> {
    expect_magic(r, WEIGHTS_MAGIC, "weights file")?;
    let mut header = [0usize; 9];
    for h in &mut header {
        *h = read_u32(r, "weights header")? as usize;
    }
    let [in_channels, clip_len, height, width, kernel_t, kernel_s, embedding_dim, standardize, n_stages] = header;
    if standardize > 1 {
        return Err(IicError::Format(format!("bad standardisation flag {standardize}")));
    }
    if n_stages > 64 {
        return Err(IicError::Format(format!("implausible stage count {n_stages}")));
    }
    let stage_channels = (0..n_stages)
        .map(|_| read_u32(r, "weights header").map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let n = read_u64(r, "weights header")? as usize;
    let values = read_f64s(r, n, "weights")?;
    expect_eof(r, "weights file")?;
    let config = EncoderConfig {
        in_channels,
        stage_channels,
        kernel_t,
        kernel_s,
        embedding_dim,
        clip_len,
        height,
        width,
        standardize_input: standardize == 1,
    };
    Ok((config, EncoderParams::from_vec(values)))
}

fn write_bank<W: Write>(w: &mut W, bank: &MemoryBank) -> Result<()> {
    w.write_all(BANK_MAGIC)?;
    w.write_all(&[bank.role().code()])?;
    w.write_all(&to_u32(bank.len(), "bank rows")?.to_le_bytes())?;
    w.write_all(&to_u32(bank.dim(), "bank dim")?.to_le_bytes())?;
    for v in bank.rows().iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_bank<R: Read>(r: &mut R) -> Result<MemoryBank> {
    expect_magic(r, BANK_MAGIC, "bank file")?;
    let code = read_u8(r, "bank header")?;
    let role = BankRole::from_code(code)
        .ok_or_else(|| IicError::Format(format!("unknown bank role byte {code}")))?;
    let n = read_u32(r, "bank header")? as usize;
    let d = read_u32(r, "bank header")? as usize;
    let data = read_f64s(r, n.checked_mul(d).ok_or_else(|| too_large("bank"))?, "bank rows")?;
    let rows = Array2::from_shape_vec((n, d), data).map_err(|e| IicError::Format(e.to_string()))?;
    MemoryBank::from_rows(rows, role).map_err(|e| IicError::Format(e.to_string()))
}

/// Writes the three banks as consecutive bank records (view 1, view 2, intra-negative).
pub fn write_banks<W: Write>(w: &mut W, banks: &MemoryBanks) -> Result<()> {
    banks.iter().try_for_each(|b| write_bank(w, b))
}

pub fn read_banks<R: Read>(r: &mut R) -> Result<MemoryBanks> {
    let mut view1 = None;
    let mut view2 = None;
    let mut intra_neg = None;
    for _ in 0..3 {
        let bank = read_bank(r)?;
        let slot = match bank.role() {
            BankRole::View1 => &mut view1,
            BankRole::View2 => &mut view2,
            BankRole::IntraNeg => &mut intra_neg,
        };
        if slot.replace(bank).is_some() {
            return Err(IicError::Format("duplicate bank role".into()));
        }
    }
    expect_eof(r, "bank file")?;
    let (view1, view2, intra_neg) = (view1.unwrap(), view2.unwrap(), intra_neg.unwrap());
    if view1.len() != view2.len() || view1.len() != intra_neg.len() || view1.dim() != view2.dim() || view1.dim() != intra_neg.dim() {
        return Err(IicError::Format("banks disagree in shape".into()));
    }
    Ok(MemoryBanks { view1, view2, intra_neg })
}

/// Feature vectors are stored as f32; reading widens them back to f64.
pub fn write_features<W: Write>(w: &mut W, records: &[FeatureRecord]) -> Result<()> {
    let dim = records.first().map_or(0, |r| r.feature.len());
    if records.iter().any(|r| r.feature.len() != dim) {
        return Err(IicError::Shape("feature records differ in dimension".into()));
    }
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&to_u32(records.len(), "feature count")?.to_le_bytes())?;
    w.write_all(&to_u32(dim, "feature dim")?.to_le_bytes())?;
    for rec in records {
        w.write_all(&rec.video_id.to_le_bytes())?;
        w.write_all(&rec.class_label.to_le_bytes())?;
        for &v in &rec.feature {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_features<R: Read>(r: &mut R) -> Result<Vec<FeatureRecord>> {
    expect_magic(r, FEATURE_MAGIC, "feature file")?;
    let count = read_u32(r, "feature header")? as usize;
    let dim = read_u32(r, "feature header")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let video_id = read_u32(r, "feature record")?;
        let class_label = read_u32(r, "feature record")?;
        let feature = read_f32s(r, dim, "feature record")?.into_iter().map(f64::from).collect();
        out.push(FeatureRecord { video_id, class_label, feature });
    }
    expect_eof(r, "feature file")?;
    Ok(out)
}

macro_rules! file_pair {
    ($save:ident, $load:ident, $write:ident, $read:ident, ($($arg:ident: $ty:ty),*), $out:ty) => {
        pub fn $save(path: &Path, $($arg: $ty),*) -> Result<()> {
            let mut w = BufWriter::new(File::create(path)?);
            $write(&mut w, $($arg),*)?;
            w.flush()?;
            Ok(())
        }

        pub fn $load(path: &Path) -> Result<$out> {
            let mut r = BufReader::new(File::open(path)?);
            $read(&mut r).map_err(|e| match e {
                IicError::Format(m) => IicError::Format(format!("{}: {m}", path.display())),
                other => other,
            })
        }
    };
}

file_pair!(save_encoder, load_encoder, write_encoder, read_encoder,
    (config: &EncoderConfig, params: &EncoderParams), (EncoderConfig, EncoderParams));
file_pair!(save_banks, load_banks, write_banks, read_banks, (banks: &MemoryBanks), MemoryBanks);
file_pair!(save_features, load_features, write_features, read_features,
    (records: &[FeatureRecord]), Vec<FeatureRecord>);
