//! Checkpoint container: `DRWK` magic, format version, a textual key=value
//! header (config, step, schedule, RNG state), then four tensor sections —
//! model, EMA shadow, Adam first/second moments — each a list of
//! (name, shape, raw little-endian f32) entries. Saves go through a temp file
//! and rename so a crash never leaves a partial checkpoint behind.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use std::fs;
use std::io::Write;
use std::path::Path;

pub const CKPT_MAGIC: &[u8; 4] = b"DRWK";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    /// Ordered key=value pairs; keys and values must not contain '\n' or '='.
    pub header: Vec<(String, String)>,
    pub model: ParamSet,
    pub ema: ParamSet,
    pub opt_m: ParamSet,
    pub opt_v: ParamSet,
}

impl Checkpoint {
    pub fn header_get(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn header_set(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        match self.header.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.header.push((key.to_string(), value)),
        }
    }

    /// Required header lookup parsed into a target type.
    pub fn header_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .header_get(key)
            .ok_or_else(|| Error::Invalid(format!("checkpoint header missing key '{key}'")))?;
        raw.parse()
            .map_err(|_| Error::Invalid(format!("checkpoint header key '{key}': bad value '{raw}'")))
    }
}

fn push_set(buf: &mut Vec<u8>, ps: &ParamSet) {
    buf.extend_from_slice(&(ps.items.len() as u64).to_le_bytes());
    for t in &ps.items {
        buf.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(t.name.as_bytes());
        buf.extend_from_slice(&(t.rows as u64).to_le_bytes());
        buf.extend_from_slice(&(t.cols as u64).to_le_bytes());
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn checkpoint_save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let mut header = String::new();
    for (k, v) in &ckpt.header {
        if k.contains(['\n', '=']) || v.contains('\n') {
            return Err(Error::Invalid(format!("checkpoint header key/value '{k}' contains '=' or newline")));
        }
        header.push_str(k);
        header.push('=');
        header.push_str(v);
        header.push('\n');
    }
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    for ps in [&ckpt.model, &ckpt.ema, &ckpt.opt_m, &ckpt.opt_v] {
        push_set(&mut buf, ps);
    }

    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&buf)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::CkptTruncated);
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn take_u32(r: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(r, 4)?.try_into().unwrap()))
}

fn take_u64(r: &mut &[u8]) -> Result<u64> {
    Ok(u64::from_le_bytes(take(r, 8)?.try_into().unwrap()))
}

fn read_set(r: &mut &[u8]) -> Result<ParamSet> {
    let count = take_u64(r)? as usize;
    let mut ps = ParamSet::new();
    for _ in 0..count {
        let name_len = take_u32(r)? as usize;
        if name_len > 4096 {
            return Err(Error::CkptShape(format!("tensor name length {name_len} is implausible")));
        }
        let name = std::str::from_utf8(take(r, name_len)?)
            .map_err(|_| Error::CkptShape("tensor name is not UTF-8".into()))?
            .to_string();
        let rows = take_u64(r)? as usize;
        let cols = take_u64(r)? as usize;
        let numel = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::CkptShape(format!("{name}: shape {rows}×{cols} overflows")))?;
        let bytes = take(r, numel * 4)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ps.add(name, rows, cols, data)?;
    }
    Ok(ps)
}

pub fn checkpoint_load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let mut r = bytes.as_slice();
    if take(&mut r, 4)? != CKPT_MAGIC {
        return Err(Error::CkptMagic);
    }
    let version = take_u32(&mut r)?;
    if version != CKPT_VERSION {
        return Err(Error::CkptVersion(version));
    }
    let header_len = take_u64(&mut r)? as usize;
    let header_raw = std::str::from_utf8(take(&mut r, header_len)?)
        .map_err(|_| Error::Invalid("checkpoint header is not UTF-8".into()))?;
    let mut header = Vec::new();
    for line in header_raw.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Invalid(format!("checkpoint header line without '=': '{line}'")))?;
        header.push((k.to_string(), v.to_string()));
    }
    let model = read_set(&mut r)?;
    let ema = read_set(&mut r)?;
    let opt_m = read_set(&mut r)?;
    let opt_v = read_set(&mut r)?;
    if !r.is_empty() {
        return Err(Error::Invalid(format!("checkpoint has {} trailing bytes", r.len())));
    }
    Ok(Checkpoint { header, model, ema, opt_m, opt_v })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn sample_ckpt() -> Checkpoint {
        let mut rng = Rng::new(11);
        let mut model = ParamSet::new();
        let mut blob = vec![0f32; 6];
        rng.fill_normal(&mut blob);
        model.add("a.w", 2, 3, blob.clone()).unwrap();
        model.add("b.w", 1, 4, vec![0.5, -0.5, f32::MIN_POSITIVE, 1e30]).unwrap();
        let mut ema = ParamSet::new();
        ema.add("a.w", 2, 3, vec![0.25; 6]).unwrap();
        let mut ckpt = Checkpoint { model, ema, ..Default::default() };
        ckpt.header_set("step", "42");
        ckpt.header_set("rng_state", format!("{}", rng.state()));
        ckpt.header_set("model.d", "384");
        ckpt
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.drwk");
        let p2 = dir.path().join("b.drwk");
        let ckpt = sample_ckpt();
        checkpoint_save(&p1, &ckpt).unwrap();
        let loaded = checkpoint_load(&p1).unwrap();
        checkpoint_save(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.header_parse::<u64>("step").unwrap(), 42);
        assert_eq!(loaded.model.items.len(), 2);
        let a = loaded.model.get("a.w").unwrap();
        let orig = ckpt.model.get("a.w").unwrap();
        assert!(a.data.iter().zip(&orig.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!((a.rows, a.cols), (2, 3));
        assert_eq!(loaded.opt_m.items.len(), 0);
    }

    #[test]
    fn bad_magic_version_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.drwk");
        checkpoint_save(&p, &sample_ckpt()).unwrap();
        let good = std::fs::read(&p).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(checkpoint_load(&p), Err(Error::CkptMagic)));

        let mut bad = good.clone();
        bad[4] = 99;
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(checkpoint_load(&p), Err(Error::CkptVersion(99))));

        for cut in [3, 7, 20, good.len() - 1] {
            std::fs::write(&p, &good[..cut]).unwrap();
            assert!(
                matches!(checkpoint_load(&p), Err(Error::CkptTruncated)),
                "cut at {cut} must surface truncation"
            );
        }
    }

    #[test]
    fn header_rejects_reserved_characters() {
        let dir = tempfile::tempdir().unwrap();
        let mut ckpt = sample_ckpt();
        ckpt.header_set("bad=key", "v");
        assert!(checkpoint_save(&dir.path().join("d.drwk"), &ckpt).is_err());
    }

    #[test]
    fn save_is_atomic_on_failure_path() {
        // Saving over an existing file either fully replaces it or leaves it
        // untouched; the temp file never lingers.
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.drwk");
        checkpoint_save(&p, &sample_ckpt()).unwrap();
        let mut second = sample_ckpt();
        second.header_set("step", "43");
        checkpoint_save(&p, &second).unwrap();
        let loaded = checkpoint_load(&p).unwrap();
        assert_eq!(loaded.header_parse::<u64>("step").unwrap(), 43);
        let leftovers = std::fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(leftovers, 1, "no temp files may remain");
    }
}
