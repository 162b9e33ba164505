//! On-disk sequence format: one directory per sequence holding `NNNNNN.ppm`
//! frames and `groundtruth.txt` with lines `frame_index x y w h visible_flag`
//! (top-left corner and size in frame pixels).

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{Frame, FrameEvents, SyntheticSequence};
use crate::bbox::BBox;
use crate::error::{Error, Result};

pub const ANNOTATION_FILE: &str = "groundtruth.txt";

pub fn frame_file(index: usize) -> String {
    format!("{index:06}.ppm")
}

/// Binary PPM (`P6`, maxval 255).
pub fn write_ppm(path: &Path, frame: &Frame) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write!(w, "P6\n{} {}\n255\n", frame.width, frame.height)?;
    w.write_all(&frame.pixels)?;
    w.flush()?;
    Ok(())
}

/// Grayscale PGM (`P5`) from values in `[0, 1]`.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write!(w, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

fn ppm_err(path: &Path, msg: &str) -> Error {
    Error::Parse {
        what: "ppm header",
        line: 1,
        msg: format!("{}: {msg}", path.display()),
    }
}

pub fn read_ppm(path: &Path) -> Result<Frame> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    // header: magic, width, height, maxval, separated by whitespace, comments allowed
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(ppm_err(path, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(ppm_err(path, "expected binary P6 with maxval 255"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| ppm_err(path, "bad dimension"));
    let (width, height) = (parse(&fields[1])?, parse(&fields[2])?);
    let n = width * height * 3;
    if bytes.len() < pos + n {
        return Err(ppm_err(path, "truncated pixel data"));
    }
    Ok(Frame {
        width,
        height,
        pixels: bytes[pos..pos + n].to_vec(),
    })
}

/// Writes one sequence into `dir` (created if missing).
pub fn export_sequence(seq: &SyntheticSequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (t, f) in seq.frames.iter().enumerate() {
        write_ppm(&dir.join(frame_file(t)), f)?;
    }
    let mut w = BufWriter::new(fs::File::create(dir.join(ANNOTATION_FILE))?);
    for (t, (b, e)) in seq.gt.iter().zip(&seq.events).enumerate() {
        writeln!(w, "{t} {} {} {} {} {}", b.x1(), b.y1(), b.w, b.h, u8::from(e.visible))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes every sequence under `root/<name>/`.
pub fn export_suite(seqs: &[SyntheticSequence], root: &Path) -> Result<()> {
    seqs.iter().try_for_each(|s| export_sequence(s, &root.join(&s.name)))
}

/// Parses `frame_index x y w h visible_flag` lines.
pub fn read_annotations(path: &Path) -> Result<Vec<(BBox, bool)>> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse {
            what: "annotation",
            line: i + 1,
            msg,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(bad(format!("expected 6 fields, got {}", f.len())));
        }
        let idx: usize = f[0].parse().map_err(|_| bad(format!("bad frame index {:?}", f[0])))?;
        if idx != out.len() {
            return Err(bad(format!("frame index {idx}, expected {}", out.len())));
        }
        let mut v = [0.0; 4];
        for (k, s) in f[1..5].iter().enumerate() {
            v[k] = s.parse().map_err(|_| bad(format!("bad number {s:?}")))?;
        }
        let visible = match f[5] {
            "1" => true,
            "0" => false,
            s => return Err(bad(format!("visible flag must be 0 or 1, got {s:?}"))),
        };
        out.push((BBox::from_xywh(v[0], v[1], v[2], v[3]), visible));
    }
    Ok(out)
}

pub fn load_sequence(dir: &Path) -> Result<SyntheticSequence> {
    let ann = read_annotations(&dir.join(ANNOTATION_FILE))?;
    let frames = (0..ann.len())
        .map(|t| read_ppm(&dir.join(frame_file(t))))
        .collect::<Result<Vec<_>>>()?;
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut seq = SyntheticSequence {
        name,
        frames,
        gt: ann.iter().map(|a| a.0).collect(),
        events: ann
            .iter()
            .map(|a| FrameEvents {
                visible: a.1,
                occluded: !a.1,
            })
            .collect(),
        occlusions: vec![],
    };
    seq.occlusions = seq.occlusion_intervals();
    Ok(seq)
}

/// Sequence directories under `root`, sorted by name.
pub fn sequence_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(ANNOTATION_FILE).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

pub fn load_suite(root: &Path) -> Result<Vec<SyntheticSequence>> {
    sequence_dirs(root)?.iter().map(|d| load_sequence(d)).collect()
}
