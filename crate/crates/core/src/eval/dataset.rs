use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::ImagePatch;

pub const GROUNDTRUTH_FILE: &str = "groundtruth.txt";
pub const LANGUAGE_FILE: &str = "nlp.txt";
pub const FRAME_DIR: &str = "img";
/// Flag files whose set frames are treated as target-absent.
pub const ABSENCE_FLAGS: [&str; 2] = ["full_occlusion", "out_of_view"];

/// One annotated sequence in the LaSOT-style layout:
///
/// ```text
/// <dir>/groundtruth.txt      one "x,y,w,h" line per frame
/// <dir>/img/*.png            frames, ordered by file name
/// <dir>/nlp.txt              optional language annotation
/// <dir>/<flag>.txt           optional per-frame 0/1 flags
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub name: String,
    pub frames: Vec<PathBuf>,
    /// `None` marks a frame whose target is absent.
    pub boxes: Vec<Option<BBox>>,
    pub language: Option<String>,
    pub flags: BTreeMap<String, Vec<bool>>,
}

impl SequenceDataset {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Whether frame `i` is excluded from metrics.
    pub fn is_absent(&self, i: usize) -> bool {
        self.boxes[i].is_none()
            || ABSENCE_FLAGS
                .iter()
                .any(|f| self.flags.get(*f).is_some_and(|v| v[i]))
    }

    pub fn load_frame(&self, i: usize) -> Result<ImagePatch> {
        let path = self
            .frames
            .get(i)
            .ok_or_else(|| Error::Data(format!("sequence `{}` has no frame {i}", self.name)))?;
        ImagePatch::load_png(path)
    }
}

/// Parse one box line. Accepts commas, tabs or spaces between the four
/// numbers. A box with zero width or height marks an absent target.
pub fn parse_box_line(line: &str, line_no: usize) -> Result<Option<BBox>> {
    let fields: Vec<&str> = line
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .collect();
    if fields.len() != 4 {
        return Err(Error::Parse {
            line: line_no,
            message: format!("expected 4 values x,y,w,h, found {}", fields.len()),
        });
    }
    let mut v = [0.0; 4];
    for (slot, f) in v.iter_mut().zip(&fields) {
        *slot = f.parse::<f64>().map_err(|e| Error::Parse {
            line: line_no,
            message: format!("`{f}`: {e}"),
        })?;
        if !slot.is_finite() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("`{f}` is not finite"),
            });
        }
    }
    if v[2] < 0.0 || v[3] < 0.0 {
        return Err(Error::Parse {
            line: line_no,
            message: "negative box extent".into(),
        });
    }
    if v[2] == 0.0 || v[3] == 0.0 {
        return Ok(None);
    }
    Ok(Some(BBox::new_unchecked(v[0], v[1], v[2], v[3])))
}

/// Parse a whole box file, skipping blank lines but counting them for
/// error positions.
pub fn parse_boxes(text: &str) -> Result<Vec<Option<BBox>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_box_line(l.trim(), i + 1))
        .collect()
}

pub fn read_boxes(path: &Path) -> Result<Vec<Option<BBox>>> {
    parse_boxes(&std::fs::read_to_string(path)?)
}

/// `x,y,w,h` lines with shortest round-trip number formatting; absent
/// targets are written as `0,0,0,0`.
pub fn format_boxes(boxes: &[Option<BBox>]) -> String {
    let mut out = String::new();
    for b in boxes {
        match b {
            Some(b) => out.push_str(&format!("{},{},{},{}\n", b.x, b.y, b.w, b.h)),
            None => out.push_str("0,0,0,0\n"),
        }
    }
    out
}

pub fn write_boxes(path: &Path, boxes: &[Option<BBox>]) -> Result<()> {
    write_atomic(path, format_boxes(boxes).as_bytes())
}

fn parse_flags(text: &str, name: &str) -> Result<Vec<bool>> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|t| match t {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(Error::Data(format!("flag file `{name}` holds `{other}`, expected 0 or 1"))),
        })
        .collect()
}

pub fn load_sequence(dir: &Path) -> Result<SequenceDataset> {
    let gt_path = dir.join(GROUNDTRUTH_FILE);
    if !gt_path.is_file() {
        return Err(Error::Data(format!("{} not found", gt_path.display())));
    }
    let boxes = read_boxes(&gt_path)?;
    if boxes.is_empty() {
        return Err(Error::Empty("groundtruth"));
    }

    let img_dir = dir.join(FRAME_DIR);
    let mut frames = Vec::new();
    if img_dir.is_dir() {
        for entry in std::fs::read_dir(&img_dir)? {
            let p = entry?.path();
            if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
                frames.push(p);
            }
        }
        frames.sort();
        if frames.len() != boxes.len() {
            return Err(Error::Data(format!(
                "{} frames but {} groundtruth lines in {}",
                frames.len(),
                boxes.len(),
                dir.display()
            )));
        }
    }

    let lang_path = dir.join(LANGUAGE_FILE);
    let language = if lang_path.is_file() {
        Some(std::fs::read_to_string(lang_path)?)
    } else {
        None
    };

    let mut flags = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        let Some(stem) = p.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let is_txt = p.extension().is_some_and(|e| e == "txt");
        if !is_txt || !p.is_file() || stem == "groundtruth" || stem == "nlp" {
            continue;
        }
        let v = parse_flags(&std::fs::read_to_string(&p)?, stem)?;
        if v.len() != boxes.len() {
            return Err(Error::Data(format!(
                "flag file `{stem}` has {} values for {} frames",
                v.len(),
                boxes.len()
            )));
        }
        flags.insert(stem.to_string(), v);
    }

    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".into());
    Ok(SequenceDataset {
        name,
        frames,
        boxes,
        language,
        flags,
    })
}

/// Write frames, groundtruth, language and flags in the layout read by
/// [`load_sequence`].
pub fn write_sequence(
    dir: &Path,
    frames: &[ImagePatch],
    boxes: &[Option<BBox>],
    language: Option<&str>,
    flags: &BTreeMap<String, Vec<bool>>,
) -> Result<()> {
    if !frames.is_empty() && frames.len() != boxes.len() {
        return Err(Error::Data(format!("{} frames for {} boxes", frames.len(), boxes.len())));
    }
    std::fs::create_dir_all(dir.join(FRAME_DIR))?;
    for (i, f) in frames.iter().enumerate() {
        f.save_png(&dir.join(FRAME_DIR).join(format!("{:08}.png", i + 1)))?;
    }
    write_boxes(&dir.join(GROUNDTRUTH_FILE), boxes)?;
    if let Some(l) = language {
        write_atomic(&dir.join(LANGUAGE_FILE), l.as_bytes())?;
    }
    for (name, v) in flags {
        let text: Vec<&str> = v.iter().map(|b| if *b { "1" } else { "0" }).collect();
        write_atomic(&dir.join(format!("{name}.txt")), format!("{}\n", text.join(",")).as_bytes())?;
    }
    Ok(())
}
