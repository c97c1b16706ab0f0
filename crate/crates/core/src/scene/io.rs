//! On-disk scene layout:
//!
//! ```text
//! <dir>/image.ppm          plain-text pixmap (P3, maxval 255)
//! <dir>/mask_<id>.pgm      binary graymap (P5, maxval 255, foreground 255)
//! <dir>/segments.txt       `segment_id class is_thing`
//! <dir>/phrases.txt        `phrase_id class is_thing is_plural segment_ids`
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{PhraseSpec, SyntheticScene};
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;

pub fn write_scene(dir: &Path, scene: &SyntheticScene, phrases: &[PhraseSpec]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = (scene.height(), scene.width());

    let mut ppm = format!("P3\n{w} {h}\n255\n");
    for y in 0..h {
        let row: Vec<String> = (0..w * 3)
            .map(|i| {
                let v = scene.image.data()[y * w * 3 + i];
                ((v.clamp(0.0, 1.0) * 255.0).round() as u8).to_string()
            })
            .collect();
        ppm.push_str(&row.join(" "));
        ppm.push('\n');
    }
    write(dir.join("image.ppm"), ppm.as_bytes())?;

    let mut seg_lines = String::new();
    for seg in &scene.segments {
        write_pgm(&dir.join(format!("mask_{}.pgm", seg.id)), &seg.mask)?;
        writeln!(seg_lines, "{} {} {}", seg.id, seg.class, seg.is_thing as u8).unwrap();
    }
    write(dir.join("segments.txt"), seg_lines.as_bytes())?;
    write(dir.join("phrases.txt"), phrases_txt(phrases).as_bytes())
}

pub fn phrases_txt(phrases: &[PhraseSpec]) -> String {
    let mut out = String::new();
    for p in phrases {
        let ids: Vec<String> = p.segment_ids.iter().map(usize::to_string).collect();
        writeln!(
            out,
            "{} {} {} {} {}",
            p.id,
            p.class,
            p.is_thing as u8,
            p.is_plural as u8,
            ids.join(",")
        )
        .unwrap();
    }
    out
}

/// A phrase line as stored on disk (the descriptor is not serialized).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhraseRecord {
    pub id: usize,
    pub class: usize,
    pub is_thing: bool,
    pub is_plural: bool,
    pub segment_ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredScene {
    /// 8-bit RGB, row-major.
    pub image: Vec<u8>,
    pub height: usize,
    pub width: usize,
    /// `(segment_id, class, is_thing, mask)`.
    pub segments: Vec<(usize, usize, bool, BinaryMask)>,
    pub phrases: Vec<PhraseRecord>,
}

pub fn read_scene(dir: &Path) -> Result<StoredScene> {
    let ppm = read_text(&dir.join("image.ppm"))?;
    let mut tokens = ppm.split_whitespace();
    if tokens.next() != Some("P3") {
        return Err(Error::Parse("image.ppm: expected P3".into()));
    }
    let nums: Vec<usize> = tokens
        .map(|t| t.parse().map_err(|_| Error::Parse(format!("image.ppm: bad token {t}"))))
        .collect::<Result<_>>()?;
    let [width, height, maxval, ref px @ ..] = nums[..] else {
        return Err(Error::Parse("image.ppm: truncated header".into()));
    };
    if maxval != 255 || px.len() != width * height * 3 {
        return Err(Error::Parse("image.ppm: unexpected maxval or pixel count".into()));
    }
    let image = px.iter().map(|&v| v as u8).collect();

    let mut segments = Vec::new();
    for line in read_text(&dir.join("segments.txt"))?.lines().filter(|l| !l.trim().is_empty()) {
        let f = fields(line, 3, "segments.txt")?;
        let id: usize = parse(f[0], line)?;
        let mask = read_pgm(&dir.join(format!("mask_{id}.pgm")))?;
        segments.push((id, parse(f[1], line)?, f[2] == "1", mask));
    }

    let mut phrases = Vec::new();
    for line in read_text(&dir.join("phrases.txt"))?.lines().filter(|l| !l.trim().is_empty()) {
        let f = fields(line, 5, "phrases.txt")?;
        phrases.push(PhraseRecord {
            id: parse(f[0], line)?,
            class: parse(f[1], line)?,
            is_thing: f[2] == "1",
            is_plural: f[3] == "1",
            segment_ids: f[4].split(',').map(|s| parse(s, line)).collect::<Result<_>>()?,
        });
    }
    Ok(StoredScene {
        image,
        height,
        width,
        segments,
        phrases,
    })
}

pub fn write_pgm(path: &Path, mask: &BinaryMask) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    bytes.extend(mask.bits().iter().map(|&b| if b { 255u8 } else { 0 }));
    write(path.to_path_buf(), &bytes)
}

pub fn read_pgm(path: &Path) -> Result<BinaryMask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    // Header: magic, width, height, maxval, each followed by one whitespace byte.
    let mut pos = 0;
    let mut header = Vec::new();
    while header.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse(format!("{}: truncated header", path.display())));
        }
        header.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let bad = || Error::Parse(format!("{}: not a P5 graymap with maxval 255", path.display()));
    if header[0] != "P5" || header[3] != "255" {
        return Err(bad());
    }
    let width: usize = header[1].parse().map_err(|_| bad())?;
    let height: usize = header[2].parse().map_err(|_| bad())?;
    let data = bytes.get(pos..pos + width * height).ok_or_else(bad)?;
    BinaryMask::new(height, width, data.iter().map(|&v| v >= 128).collect())
}

fn write(path: std::path::PathBuf, bytes: &[u8]) -> Result<()> {
    fs::write(&path, bytes).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn fields<'a>(line: &'a str, n: usize, file: &str) -> Result<Vec<&'a str>> {
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() != n {
        return Err(Error::Parse(format!("{file}: expected {n} fields: {line}")));
    }
    Ok(f)
}

fn parse(s: &str, line: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::Parse(format!("bad integer {s:?} in line {line:?}")))
}
