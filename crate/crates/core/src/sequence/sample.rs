use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Maximum regions per frame.
pub const MAX_REGIONS_PER_FRAME: usize = 5;

/// Reserved vocabulary entries. Word ids start at [`FIRST_WORD_ID`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpecialToken {
    Cls,
    Sep,
    Mask,
    Act,
    Region,
}

impl SpecialToken {
    pub const ALL: [SpecialToken; 5] = [Self::Cls, Self::Sep, Self::Mask, Self::Act, Self::Region];

    pub const fn id(self) -> u32 {
        match self {
            Self::Cls => 0,
            Self::Sep => 1,
            Self::Mask => 2,
            Self::Act => 3,
            Self::Region => 4,
        }
    }

    pub fn from_id(id: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.id() == id)
    }
}

pub const FIRST_WORD_ID: u32 = 5;

/// Axis-aligned box in pixel coordinates of a `frame_width x frame_height` frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub frame_width: f64,
    pub frame_height: f64,
}

impl BoundingBox {
    pub fn validate(&self) -> Result<()> {
        let ok = self.frame_width > 0.0
            && self.frame_height > 0.0
            && 0.0 <= self.x1
            && self.x1 < self.x2
            && self.x2 <= self.frame_width
            && 0.0 <= self.y1
            && self.y1 < self.y2
            && self.y2 <= self.frame_height;
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("degenerate or out-of-frame box {self:?}")))
        }
    }
}

/// Normalized corners plus the area fraction:
/// `(x1/W, y1/H, x2/W, y2/H, (x2-x1)(y2-y1)/(WH))`.
pub fn spatial_position_vector(b: &BoundingBox) -> Result<Tensor> {
    b.validate()?;
    let (w, h) = (b.frame_width, b.frame_height);
    Ok(Tensor::vector(vec![
        b.x1 / w,
        b.y1 / h,
        b.x2 / w,
        b.y2 / h,
        (b.x2 - b.x1) * (b.y2 - b.y1) / (w * h),
    ]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub feature: Tensor,
    pub bbox: BoundingBox,
    pub teacher: Tensor,
    /// Latent object class the region was drawn from.
    pub object_label: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub action_feature: Tensor,
    pub action_label: u32,
    /// Regions grouped by frame.
    pub frames: Vec<Vec<Region>>,
}

impl Clip {
    pub fn regions(&self) -> impl Iterator<Item = &Region> {
        self.frames.iter().flatten()
    }

    pub fn num_regions(&self) -> usize {
        self.frames.iter().map(Vec::len).sum()
    }
}

/// Text tokens, clips and their ground truth for one video-text pair.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTextSample {
    pub id: u64,
    pub word_ids: Vec<u32>,
    /// Clip index whose narration window contains each word.
    pub word_segments: Vec<u32>,
    /// Sorted word indices followed by a sentence-separating `[SEP]`.
    pub sentence_breaks: Vec<usize>,
    pub clips: Vec<Clip>,
    /// 1 when the text describes the clips.
    pub match_label: u8,
}

impl VideoTextSample {
    pub fn validate(&self) -> Result<()> {
        let n = self.word_ids.len();
        if n == 0 {
            return Err(Error::Validation(format!("sample {}: empty text", self.id)));
        }
        if self.clips.is_empty() {
            return Err(Error::Validation(format!("sample {}: no clips", self.id)));
        }
        if self.word_segments.len() != n {
            return Err(Error::Validation(format!(
                "sample {}: {} words but {} segment entries",
                self.id,
                n,
                self.word_segments.len()
            )));
        }
        if let Some(&w) = self.word_ids.iter().find(|&&w| w < FIRST_WORD_ID) {
            return Err(Error::Validation(format!(
                "sample {}: word id {w} collides with a reserved token",
                self.id
            )));
        }
        if !self.sentence_breaks.windows(2).all(|w| w[0] < w[1])
            || self.sentence_breaks.last().is_some_and(|&b| b + 1 >= n)
        {
            return Err(Error::Validation(format!(
                "sample {}: sentence breaks must be increasing and precede the last word",
                self.id
            )));
        }
        if self.match_label > 1 {
            return Err(Error::Validation(format!("sample {}: match label must be 0 or 1", self.id)));
        }
        for (ci, clip) in self.clips.iter().enumerate() {
            for (fi, frame) in clip.frames.iter().enumerate() {
                if frame.len() > MAX_REGIONS_PER_FRAME {
                    return Err(Error::Validation(format!(
                        "sample {} clip {ci} frame {fi}: {} regions exceeds {MAX_REGIONS_PER_FRAME}",
                        self.id,
                        frame.len()
                    )));
                }
                for r in frame {
                    r.bbox.validate()?;
                    crate::numerics::ops::validate_distribution(&r.teacher, "teacher distribution")?;
                }
            }
        }
        Ok(())
    }

    pub fn num_regions(&self) -> usize {
        self.clips.iter().map(Clip::num_regions).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox { x1, y1, x2, y2, frame_width: w, frame_height: h }
    }

    #[test]
    fn spatial_vector_cases() {
        let v = spatial_position_vector(&bx(0.0, 0.0, 640.0, 480.0, 640.0, 480.0)).unwrap();
        assert_eq!(v.data(), &[0.0, 0.0, 1.0, 1.0, 1.0]);

        let v = spatial_position_vector(&bx(10.0, 20.0, 30.0, 60.0, 100.0, 100.0)).unwrap();
        let expect = [0.1, 0.2, 0.3, 0.6, 0.08];
        for (a, b) in v.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }

        let v = spatial_position_vector(&bx(0.0, 0.0, 50.0, 30.0, 100.0, 60.0)).unwrap();
        assert_eq!(v.data(), &[0.0, 0.0, 0.5, 0.5, 0.25]);
    }

    #[test]
    fn degenerate_boxes_are_rejected() {
        assert!(spatial_position_vector(&bx(5.0, 5.0, 5.0, 9.0, 10.0, 10.0)).is_err());
        assert!(spatial_position_vector(&bx(0.0, 0.0, 11.0, 9.0, 10.0, 10.0)).is_err());
    }

    #[test]
    fn special_ids_are_reserved() {
        for t in SpecialToken::ALL {
            assert!(t.id() < FIRST_WORD_ID);
            assert_eq!(SpecialToken::from_id(t.id()), Some(t));
        }
    }
}
