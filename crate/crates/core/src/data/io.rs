//! `CPSV` volume files and the tab-separated dataset manifest.

use std::fs;
use std::path::Path;

use super::{Dataset, SegSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CPSV";
const VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.tsv";

/// Decoded contents of a volume file.
#[derive(Clone, Debug, PartialEq)]
pub enum Volume {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

pub fn write_volume(vol: &Volume) -> Vec<u8> {
    let (code, shape) = match vol {
        Volume::F32 { shape, .. } => (0u8, shape),
        Volume::U8 { shape, .. } => (1u8, shape),
    };
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(code);
    out.push(shape.len() as u8);
    for &e in shape {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    match vol {
        Volume::F32 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Volume::U8 { data, .. } => out.extend_from_slice(data),
    }
    out
}

/// Little-endian reader that reports the byte offset of whatever went wrong.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn fail<T>(&self, reason: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.pos as u64,
            reason: reason.into(),
        })
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub(crate) fn magic(&mut self, magic: &[u8; 4], version: u32) -> Result<()> {
        if self.take(4, "magic")? != magic {
            self.pos = 0;
            return self.fail(format!("bad magic, expected {:?}", String::from_utf8_lossy(magic)));
        }
        let start = self.pos;
        let v = self.u32("version")?;
        if v != version {
            self.pos = start;
            return self.fail(format!("unsupported version {v}"));
        }
        Ok(())
    }

    /// Rank byte followed by that many u32 extents, each at least 1.
    pub(crate) fn extents(&mut self) -> Result<Vec<usize>> {
        let rank = self.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let at = self.pos;
            let e = self.u32("extent")? as usize;
            if e == 0 {
                self.pos = at;
                return self.fail("zero extent");
            }
            shape.push(e);
        }
        Ok(shape)
    }

    /// Element count of `shape`, failing on overflow or too few remaining bytes.
    pub(crate) fn payload(&mut self, shape: &[usize], elem: usize) -> Result<&'a [u8]> {
        let n = shape.iter().try_fold(elem, |acc, &e| acc.checked_mul(e));
        match n {
            Some(n) => self.take(n, "data"),
            None => self.fail("extents overflow"),
        }
    }
}

pub fn read_volume(bytes: &[u8]) -> Result<Volume> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC, VERSION)?;
    let code_at = r.offset();
    let code = r.u8("dtype")?;
    let shape = r.extents()?;
    let vol = match code {
        0 => Volume::F32 {
            data: r
                .payload(&shape, 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            shape,
        },
        1 => Volume::U8 {
            data: r.payload(&shape, 1)?.to_vec(),
            shape,
        },
        other => {
            return Err(Error::Format {
                offset: code_at as u64,
                reason: format!("unknown dtype code {other}"),
            })
        }
    };
    if !r.is_done() {
        return r.fail("trailing bytes after data");
    }
    Ok(vol)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes one image and one mask volume per sample plus the manifest.
pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (i, s) in data.samples.iter().enumerate() {
        let (img, mask) = (format!("image_{i:05}.cpsv"), format!("mask_{i:05}.cpsv"));
        let image = Volume::F32 {
            shape: s.image.shape().to_vec(),
            data: s.image.data().iter().map(|&v| v as f32).collect(),
        };
        let labels = Volume::U8 {
            shape: s.spatial().to_vec(),
            data: s.mask.clone(),
        };
        write_file(&dir.join(&img), &write_volume(&image))?;
        write_file(&dir.join(&mask), &write_volume(&labels))?;
        manifest.push_str(&format!("{img}\t{mask}\n"));
    }
    write_file(&dir.join(MANIFEST_NAME), manifest.as_bytes())
}

/// Loads the dataset described by `path`, either a manifest file or a
/// directory holding one. The class count is the largest label plus one (at least 2).
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest = if path.is_dir() { path.join(MANIFEST_NAME) } else { path.to_path_buf() };
    let base = manifest.parent().unwrap_or(Path::new("."));
    let text = String::from_utf8(read_file(&manifest)?)
        .map_err(|e| Error::Format { offset: e.utf8_error().valid_up_to() as u64, reason: "manifest is not UTF-8".into() })?;
    let mut samples = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let Some((img, mask)) = line.split_once('\t') else {
            return Err(Error::ManifestMismatch(format!(
                "{}:{}: expected image<TAB>mask",
                manifest.display(),
                line_no + 1
            )));
        };
        let image = match read_volume(&read_file(&base.join(img))?)? {
            Volume::F32 { shape, data } => Tensor::from_vec(&shape, data.into_iter().map(f64::from).collect())?,
            Volume::U8 { .. } => return Err(Error::ManifestMismatch(format!("{img}: image volume stored as u8"))),
        };
        let labels = match read_volume(&read_file(&base.join(mask))?)? {
            Volume::U8 { shape, data } => {
                if shape != image.shape()[1..] {
                    return Err(Error::ManifestMismatch(format!(
                        "{mask}: mask extents {shape:?} differ from image {:?}",
                        image.shape()
                    )));
                }
                data
            }
            Volume::F32 { .. } => return Err(Error::ManifestMismatch(format!("{mask}: mask volume stored as f32"))),
        };
        samples.push(SegSample::new(image, labels)?);
    }
    let classes = samples
        .iter()
        .flat_map(|s| s.mask.iter())
        .map(|&l| l as usize + 1)
        .max()
        .unwrap_or(2)
        .max(2);
    Ok(Dataset { samples, classes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_shapes_2d;

    #[test]
    fn volume_round_trip_and_layout() {
        let v = Volume::U8 { shape: vec![2, 3], data: vec![1, 2, 3, 4, 5, 6] };
        let bytes = write_volume(&v);
        assert_eq!(&bytes[..4], b"CPSV");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(bytes[8..10], [1, 2]);
        assert_eq!(&bytes[10..18], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(read_volume(&bytes).unwrap(), v);
    }

    #[test]
    fn truncation_and_bad_headers_are_format_errors() {
        let v = Volume::F32 { shape: vec![4], data: vec![0.5; 4] };
        let bytes = write_volume(&v);
        for cut in 0..bytes.len() {
            assert!(matches!(read_volume(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(read_volume(&bad), Err(Error::Format { offset: 8, .. })));
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(matches!(read_volume(&bad), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn dataset_round_trip_preserves_order() {
        let dir = tempfile::tempdir().unwrap();
        let d = gen_shapes_2d(6, 4, 16, 3).unwrap();
        save_dataset(dir.path(), &d).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.samples, d.samples);
        let manifest = fs::read_to_string(dir.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(manifest.lines().next(), Some("image_00000.cpsv\tmask_00000.cpsv"));
    }
}
