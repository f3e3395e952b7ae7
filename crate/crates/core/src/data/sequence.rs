use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use image::RgbImage;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::imaging::{load_ppm, save_ppm};

/// One video: frames, per-frame boxes and absence flags.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub class_id: String,
    pub frames: Vec<Arc<RgbImage>>,
    /// For absent frames this is the hidden box, not a visible one.
    pub boxes: Vec<BBox>,
    pub absent: Vec<bool>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn visible_frames(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.absent[i]).collect()
    }

    pub fn absent_frames(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.absent[i]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.boxes.len() != self.frames.len() || self.absent.len() != self.frames.len() {
            return Err(Error::Data(format!(
                "sequence {}: {} frames, {} boxes, {} absence flags",
                self.name,
                self.frames.len(),
                self.boxes.len(),
                self.absent.len()
            )));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if !self.absent[i] && (!b.is_valid() || b.area() <= 0.0) {
                return Err(Error::Data(format!("sequence {} frame {i}: invalid box {b:?}", self.name)));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, f) in self.frames.iter().enumerate() {
            save_ppm(f, &dir.join(format!("{i:08}.ppm")))?;
        }
        let mut gt = String::new();
        let mut absence = String::new();
        for (b, a) in self.boxes.iter().zip(&self.absent) {
            writeln!(gt, "{},{},{},{}", b.x, b.y, b.w, b.h).expect("string write");
            writeln!(absence, "{}", u8::from(*a)).expect("string write");
        }
        let write = |name: &str, text: &str| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(p, e))
        };
        write("groundtruth.txt", &gt)?;
        write("absence.label", &absence)?;
        write("meta.ini", &format!("class_id={}\n", self.class_id))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| Error::io(p, e))
        };
        let bad = |what: &str, line: usize, text: &str| {
            Error::Data(format!("{}/{what}:{}: cannot parse {text:?}", dir.display(), line + 1))
        };
        let mut boxes = Vec::new();
        for (i, line) in read("groundtruth.txt")?.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let v: Vec<f64> = line
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("groundtruth.txt", i, line))?;
            if v.len() != 4 {
                return Err(bad("groundtruth.txt", i, line));
            }
            boxes.push(BBox::new(v[0], v[1], v[2], v[3]));
        }
        let absent = match dir.join("absence.label").exists() {
            true => read("absence.label")?
                .lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(i, l)| match l.trim() {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    _ => Err(bad("absence.label", i, l)),
                })
                .collect::<Result<Vec<_>>>()?,
            false => vec![false; boxes.len()],
        };
        let class_id = match dir.join("meta.ini").exists() {
            true => read("meta.ini")?
                .lines()
                .find_map(|l| l.trim().strip_prefix("class_id=").map(|s| s.trim().to_string()))
                .unwrap_or_default(),
            false => String::new(),
        };
        let frames = (0..boxes.len())
            .map(|i| load_ppm(&dir.join(format!("{i:08}.ppm"))).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let seq = Self {
            name,
            class_id,
            frames,
            boxes,
            absent,
        };
        seq.validate()?;
        Ok(seq)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn num_frames(&self) -> usize {
        self.sequences.iter().map(Sequence::len).sum()
    }

    pub fn classes(&self) -> Vec<String> {
        let mut c: Vec<String> = self.sequences.iter().map(|s| s.class_id.clone()).collect();
        c.sort();
        c.dedup();
        c
    }

    /// Every subdirectory of `root` is a sequence, loaded in name order.
    pub fn load(root: &Path) -> Result<Self> {
        let mut dirs: Vec<_> = fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        if dirs.is_empty() {
            return Err(Error::Data(format!("{}: no sequence directories", root.display())));
        }
        let sequences = dirs.iter().map(|d| Sequence::load(d)).collect::<Result<Vec<_>>>()?;
        Ok(Self { sequences })
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        for s in &self.sequences {
            s.save(&root.join(&s.name))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_sequence() -> Sequence {
        Sequence {
            name: "seq_0".into(),
            class_id: "disk".into(),
            frames: (0..3)
                .map(|i| Arc::new(RgbImage::from_fn(8, 6, move |x, y| image::Rgb([x as u8 * 20, y as u8 * 30, i * 50]))))
                .collect(),
            boxes: vec![BBox::new(1.0, 1.0, 3.0, 2.0), BBox::new(1.5, 1.0, 3.25, 2.0), BBox::new(2.0, 1.0, 3.0, 2.0)],
            absent: vec![false, true, false],
        }
    }

    #[test]
    fn directory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let seq = tiny_sequence();
        seq.save(&dir.path().join("seq_0")).unwrap();
        let ds = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.sequences, vec![seq]);
        let gt = fs::read_to_string(dir.path().join("seq_0/groundtruth.txt")).unwrap();
        assert_eq!(gt.lines().next(), Some("1,1,3,2"));
        assert!(dir.path().join("seq_0/00000002.ppm").exists());
    }

    #[test]
    fn malformed_groundtruth_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let seq_dir = dir.path().join("s");
        tiny_sequence().save(&seq_dir).unwrap();
        fs::write(seq_dir.join("groundtruth.txt"), "1,2,3\n").unwrap();
        let err = Sequence::load(&seq_dir).unwrap_err().to_string();
        assert!(err.contains("groundtruth.txt:1"), "{err}");
    }

    #[test]
    fn length_mismatch_is_invalid() {
        let mut s = tiny_sequence();
        s.absent.pop();
        assert!(s.validate().is_err());
    }
}
