//! Dataset container format (binary, little-endian):
//!
//! ```text
//! magic "IVTW" · version u32 · config text (u32 len + UTF-8 key=value)
//! episode count u64
//! per episode:
//!   label u16 · question_type u8 (255 for shell game) · frame count u16
//!   H u16 · W u16 · frames as raw u8 RGB · trace text (u32 len + UTF-8)
//! ```
//!
//! Readers reject unknown magic or version.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::DataError;
use crate::sim::render::Frame;

pub const MAGIC: [u8; 4] = *b"IVTW";
pub const VERSION: u32 = 1;
/// `question_type` sentinel for shell-game episodes.
pub const QT_SHELL: u8 = 255;

/// One stored episode: rendered frames plus the symbolic trace that can
/// regenerate its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub label: u16,
    pub question_type: u8,
    pub h: u16,
    pub w: u16,
    pub frames: Vec<Vec<u8>>,
    pub trace: String,
}

impl Episode {
    pub fn frame(&self, i: usize) -> Frame {
        Frame { h: self.h as usize, w: self.w as usize, rgb: self.frames[i].clone() }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source: e }
}

pub fn write_dataset(path: &Path, config_text: &str, episodes: &[Episode]) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let put = |w: &mut BufWriter<File>, bytes: &[u8]| -> Result<(), DataError> {
        w.write_all(bytes).map_err(|e| io_err(path, e))
    };
    put(&mut w, &MAGIC)?;
    put(&mut w, &VERSION.to_le_bytes())?;
    put(&mut w, &(config_text.len() as u32).to_le_bytes())?;
    put(&mut w, config_text.as_bytes())?;
    put(&mut w, &(episodes.len() as u64).to_le_bytes())?;
    for ep in episodes {
        put(&mut w, &ep.label.to_le_bytes())?;
        put(&mut w, &[ep.question_type])?;
        put(&mut w, &(ep.frames.len() as u16).to_le_bytes())?;
        put(&mut w, &ep.h.to_le_bytes())?;
        put(&mut w, &ep.w.to_le_bytes())?;
        let frame_len = ep.h as usize * ep.w as usize * 3;
        for f in &ep.frames {
            assert_eq!(f.len(), frame_len, "frame bytes disagree with header dims");
            put(&mut w, f)?;
        }
        put(&mut w, &(ep.trace.len() as u32).to_le_bytes())?;
        put(&mut w, ep.trace.as_bytes())?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub struct Dataset {
    pub config_text: String,
    pub episodes: Vec<Episode>,
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DataError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, path)?;
    if magic != MAGIC {
        return Err(DataError::BadMagic { found: magic });
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(DataError::BadVersion(version));
    }
    let cfg_len = read_u32(&mut r, path)? as usize;
    let mut cfg = vec![0u8; cfg_len];
    read_exact(&mut r, &mut cfg, path)?;
    let config_text = String::from_utf8(cfg)
        .map_err(|_| DataError::Invalid("config block is not UTF-8".into()))?;

    let count = read_u64(&mut r, path)? as usize;
    let mut episodes = Vec::with_capacity(count);
    for index in 0..count {
        let label = read_u16(&mut r, path)?;
        let mut qt = [0u8; 1];
        read_exact(&mut r, &mut qt, path)?;
        let frame_count = read_u16(&mut r, path)? as usize;
        let h = read_u16(&mut r, path)?;
        let w = read_u16(&mut r, path)?;
        let frame_len = h as usize * w as usize * 3;
        if frame_len == 0 || frame_count == 0 {
            return Err(DataError::CorruptEpisode { index, msg: "empty frames".into() });
        }
        let mut frames = Vec::with_capacity(frame_count);
        for _ in 0..frame_count {
            let mut buf = vec![0u8; frame_len];
            read_exact(&mut r, &mut buf, path)?;
            frames.push(buf);
        }
        let trace_len = read_u32(&mut r, path)? as usize;
        let mut trace = vec![0u8; trace_len];
        read_exact(&mut r, &mut trace, path)?;
        let trace = String::from_utf8(trace)
            .map_err(|_| DataError::CorruptEpisode { index, msg: "trace is not UTF-8".into() })?;
        episodes.push(Episode { label, question_type: qt[0], h, w, frames, trace });
    }
    Ok(Dataset { config_text, episodes })
}

fn read_exact(r: &mut BufReader<File>, buf: &mut [u8], path: &Path) -> Result<(), DataError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            DataError::Truncated
        } else {
            io_err(path, e)
        }
    })
}

fn read_u16(r: &mut BufReader<File>, path: &Path) -> Result<u16, DataError> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b, path)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut BufReader<File>, path: &Path) -> Result<u32, DataError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut BufReader<File>, path: &Path) -> Result<u64, DataError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, path)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_episode(label: u16) -> Episode {
        Episode {
            label,
            question_type: QT_SHELL,
            h: 4,
            w: 4,
            frames: vec![vec![label as u8; 48]; 3],
            trace: format!("shell grid=2 frames=3\nlabel {label}\n"),
        }
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let dir = std::env::temp_dir().join("ivtw_test_roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("d.ivtw");
        let eps = vec![sample_episode(1), sample_episode(7)];
        write_dataset(&path, "task = shell_game\n", &eps).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back.config_text, "task = shell_game\n");
        assert_eq!(back.episodes, eps);
    }

    #[test]
    fn unknown_magic_rejected() {
        let dir = std::env::temp_dir().join("ivtw_test_magic");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ivtw");
        std::fs::write(&path, b"NOPE0000").unwrap();
        match read_dataset(&path) {
            Err(DataError::BadMagic { found }) => assert_eq!(&found, b"NOPE"),
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn unknown_version_rejected() {
        let dir = std::env::temp_dir().join("ivtw_test_version");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("v9.ivtw");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&MAGIC);
        bytes.extend_from_slice(&9u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_dataset(&path), Err(DataError::BadVersion(9))));
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = std::env::temp_dir().join("ivtw_test_trunc");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.ivtw");
        write_dataset(&path, "x = 1\n", &[sample_episode(3)]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(read_dataset(&path), Err(DataError::Truncated)));
    }
}
