use serde::{Deserialize, Serialize};

use crate::error::{GemtError, Result};

pub const AS_CLASSES: usize = 4;
pub const AS_CLASS_NAMES: [&str; AS_CLASSES] = ["healthy", "mild", "moderate", "severe"];

/// Segmentation and key-frame supervision for one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoSupervision {
    pub ed_index: usize,
    pub es_index: usize,
    /// H×W bits (0/1), row-major, at the ED frame.
    pub ed_mask: Vec<u8>,
    /// H×W bits (0/1), row-major, at the ES frame.
    pub es_mask: Vec<u8>,
}

/// K grayscale videos of T frames (H×W) plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub sample_id: String,
    pub k: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    /// K·T·H·W intensities in [0,1], row-major over (k, t, y, x).
    pub videos: Vec<f32>,
    pub ef_label: Option<f32>,
    /// Index of the hot entry of the 4-way severity label.
    pub as_label: Option<usize>,
    /// One entry per video when present.
    pub supervision: Option<Vec<VideoSupervision>>,
}

impl VideoSample {
    pub fn frame_len(&self) -> usize {
        self.h * self.w
    }

    pub fn frame(&self, k: usize, t: usize) -> &[f32] {
        let n = self.frame_len();
        let at = (k * self.t + t) * n;
        &self.videos[at..at + n]
    }

    pub fn frame_mut(&mut self, k: usize, t: usize) -> &mut [f32] {
        let n = self.frame_len();
        let at = (k * self.t + t) * n;
        &mut self.videos[at..at + n]
    }

    pub fn as_one_hot(&self) -> Option<[f32; AS_CLASSES]> {
        self.as_label.map(|c| {
            let mut v = [0.0; AS_CLASSES];
            v[c] = 1.0;
            v
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GemtError::arg("VideoSample", format!("{}: {m}", self.sample_id)));
        if self.k == 0 || self.t == 0 || self.h == 0 || self.w == 0 {
            return bad("empty dimension".into());
        }
        if self.videos.len() != self.k * self.t * self.h * self.w {
            return bad(format!(
                "{} intensities for {}x{}x{}x{}",
                self.videos.len(),
                self.k,
                self.t,
                self.h,
                self.w
            ));
        }
        if let Some(v) = self.videos.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return bad(format!("intensity {v} outside [0,1]"));
        }
        if let Some(y) = self.ef_label {
            if !(0.0..=1.0).contains(&y) {
                return bad(format!("ef label {y} outside [0,1]"));
            }
        }
        if let Some(c) = self.as_label {
            if c >= AS_CLASSES {
                return bad(format!("as class {c}"));
            }
        }
        if let Some(sup) = &self.supervision {
            if sup.len() != self.k {
                return bad(format!("{} supervision entries for {} videos", sup.len(), self.k));
            }
            for s in sup {
                if s.ed_index == s.es_index || s.ed_index >= self.t || s.es_index >= self.t {
                    return bad(format!("ed/es indices {} {}", s.ed_index, s.es_index));
                }
                let n = self.frame_len();
                if s.ed_mask.len() != n || s.es_mask.len() != n {
                    return bad("mask size".into());
                }
                if s.ed_mask.iter().chain(&s.es_mask).any(|&b| b > 1) {
                    return bad("mask is not binary".into());
                }
            }
        }
        Ok(())
    }
}
