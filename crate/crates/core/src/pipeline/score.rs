//! Differentiable scorers: a text-image similarity over colour and size
//! features, and an identity similarity over the face patch.

use super::render::{ImageVars, RADIUS_MAX, RADIUS_MIN};
use super::table::{attr, IDENTITY_DIM};
use super::{assign_slots, Pipeline, PipelineError, Slot};
use crate::autodiff::{cosine, AutodiffError, Tape, Value};
use crate::image::Image;

/// Length of the text feature vector: inner RGB, outer RGB, size.
pub const TEXT_FEATURES: usize = 7;

/// Pooled ground-truth attributes of a target concept, centered at 0.5.
#[derive(Clone, Debug, PartialEq)]
pub struct TextTarget {
    pub tokens: Vec<String>,
    centered: [f64; TEXT_FEATURES],
}

impl TextTarget {
    /// Target feature vector minus 0.5.
    pub fn centered(&self) -> &[f64; TEXT_FEATURES] {
        &self.centered
    }
}

/// Cosine between centered image features and a text target.
pub fn text_similarity(features: &[f64; TEXT_FEATURES], target: &TextTarget) -> f64 {
    let f: Vec<f64> = features.iter().map(|x| x - 0.5).collect();
    cosine(&f, &target.centered)
}

/// Similarity of two identity codes in `[0, 1]^q`: cosine of `2v - 1`.
pub fn identity_similarity(a: &[f64], b: &[f64]) -> f64 {
    let c = |v: &[f64]| v.iter().map(|x| 2.0 * x - 1.0).collect::<Vec<f64>>();
    cosine(&c(a), &c(b))
}

fn clamp01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

impl Pipeline {
    pub fn text_target<S: AsRef<str>>(&self, tokens: &[S]) -> Result<TextTarget, PipelineError> {
        let slots = assign_slots(tokens);
        let mut obj = [0.0; super::ATTR_DIM];
        let mut sur = [0.0; super::ATTR_DIM];
        for (t, slot) in tokens.iter().zip(slots) {
            let entry = self
                .table()
                .get(t.as_ref())
                .ok_or_else(|| PipelineError::UnknownToken(t.as_ref().to_string()))?;
            let acc = match slot {
                Slot::Object => &mut obj,
                Slot::Surroundings => &mut sur,
                _ => continue,
            };
            for (a, x) in acc.iter_mut().zip(&entry.attributes) {
                *a += x - 0.5;
            }
        }
        let mut centered = [0.0; TEXT_FEATURES];
        for c in 0..3 {
            centered[c] = clamp01(0.5 + obj[attr::HUE.start + c]) - 0.5;
            centered[3 + c] = clamp01(0.5 + sur[attr::HUE.start + c] + obj[attr::SURROUND.start + c]) - 0.5;
        }
        centered[6] = clamp01(0.5 + obj[attr::SIZE]) - 0.5;
        Ok(TextTarget {
            tokens: tokens.iter().map(|t| t.as_ref().to_string()).collect(),
            centered,
        })
    }

    pub fn text_target_from_text(&self, text: &str) -> Result<TextTarget, PipelineError> {
        self.text_target(&super::tokenize(text))
    }

    /// Image features on the tape: mean colour of the always-object centre,
    /// mean colour of the never-object border, and a size estimate from how
    /// much of the annulus between the minimum and maximum radius is covered.
    pub fn text_features_on_tape(&self, tape: &mut Tape, channels: &[Value; 3]) -> Result<Value, AutodiffError> {
        let g = self.geometry();
        let w_in = tape.vector(g.inner_weights.clone());
        let w_out = tape.vector(g.outer_weights.clone());
        let w_ann = tape.vector(g.annulus_weights.clone());
        let mut inner = Vec::with_capacity(3);
        let mut outer = Vec::with_capacity(3);
        let mut annulus = Vec::with_capacity(3);
        for &ch in channels {
            inner.push(tape.dot(ch, w_in)?);
            outer.push(tape.dot(ch, w_out)?);
            annulus.push(tape.dot(ch, w_ann)?);
        }
        let i = tape.concat(&inner)?;
        let o = tape.concat(&outer)?;
        let a = tape.concat(&annulus)?;
        let contrast = tape.sub(i, o)?;
        let covered = tape.sub(a, o)?;
        let num = tape.dot(contrast, covered)?;
        let den = tape.dot(contrast, contrast)?;
        let den = tape.offset(den, 1e-4)?;
        let cov = tape.div(num, den)?;
        let cov = tape.clamp01(cov)?;
        let (r0, r1) = (RADIUS_MIN * RADIUS_MIN, RADIUS_MAX * RADIUS_MAX);
        let r2 = tape.scale(cov, r1 - r0)?;
        let r2 = tape.offset(r2, r0)?;
        let r = tape.sqrt(r2)?;
        let size = tape.offset(r, -RADIUS_MIN)?;
        let size = tape.scale(size, 1.0 / (RADIUS_MAX - RADIUS_MIN))?;
        tape.concat(&[i, o, size])
    }

    /// Text similarity of rendered channels against `target`, on the tape.
    pub fn text_score_on_tape(
        &self,
        tape: &mut Tape,
        image: &ImageVars,
        target: &TextTarget,
    ) -> Result<Value, AutodiffError> {
        let f = self.text_features_on_tape(tape, &image.channels)?;
        let f = tape.offset(f, -0.5)?;
        let t = tape.vector(target.centered.to_vec());
        tape.cosine(f, t)
    }

    fn check_image(&self, image: &Image) -> Result<(), PipelineError> {
        let (h, w) = (self.config().height, self.config().width);
        if image.height() != h || image.width() != w {
            return Err(PipelineError::ImageSize {
                h,
                w,
                got_h: image.height(),
                got_w: image.width(),
            });
        }
        Ok(())
    }

    fn image_on_tape(tape: &mut Tape, image: &Image) -> [Value; 3] {
        image.channels().map(|c| tape.vector(c))
    }

    pub fn text_features(&self, image: &Image) -> Result<[f64; TEXT_FEATURES], PipelineError> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let ch = Self::image_on_tape(&mut tape, image);
        let f = self.text_features_on_tape(&mut tape, &ch)?;
        let mut out = [0.0; TEXT_FEATURES];
        out.copy_from_slice(tape.data(f));
        Ok(out)
    }

    pub fn score_text(&self, image: &Image, target: &TextTarget) -> Result<f64, PipelineError> {
        Ok(text_similarity(&self.text_features(image)?, target))
    }

    /// Identity code read back from the face patch through the projection's
    /// pseudo-inverse.
    pub fn identity_on_tape(&self, tape: &mut Tape, channels: &[Value; 3]) -> Result<Value, AutodiffError> {
        let g = self.geometry();
        let mut means = Vec::with_capacity(12);
        for w in &g.cell_weights {
            let w = tape.vector(w.clone());
            for &ch in channels {
                means.push(tape.dot(ch, w)?);
            }
        }
        let cells = tape.concat(&means)?;
        let pinv = tape.matrix(IDENTITY_DIM, means.len(), g.projection_pinv.clone())?;
        tape.matvec(pinv, cells)
    }

    pub fn identity_score_on_tape(
        &self,
        tape: &mut Tape,
        image: &ImageVars,
        target: &[f64; IDENTITY_DIM],
    ) -> Result<Value, AutodiffError> {
        let v = self.identity_on_tape(tape, &image.channels)?;
        let v = tape.scale(v, 2.0)?;
        let v = tape.offset(v, -1.0)?;
        let t = tape.vector(target.iter().map(|x| 2.0 * x - 1.0).collect());
        tape.cosine(v, t)
    }

    pub fn extract_identity(&self, image: &Image) -> Result<[f64; IDENTITY_DIM], PipelineError> {
        self.check_image(image)?;
        let mut tape = Tape::new();
        let ch = Self::image_on_tape(&mut tape, image);
        let v = self.identity_on_tape(&mut tape, &ch)?;
        let mut out = [0.0; IDENTITY_DIM];
        out.copy_from_slice(tape.data(v));
        Ok(out)
    }

    pub fn score_identity(&self, image: &Image, target: &[f64]) -> Result<f64, PipelineError> {
        let t = check_identity(target)?;
        Ok(identity_similarity(&self.extract_identity(image)?, &t))
    }
}

/// Validates a q-dimensional identity in `[0, 1]^q`.
pub fn check_identity(v: &[f64]) -> Result<[f64; IDENTITY_DIM], PipelineError> {
    if v.len() != IDENTITY_DIM || v.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(PipelineError::InvalidIdentity {
            expected: IDENTITY_DIM,
            got: v.to_vec(),
        });
    }
    let mut out = [0.0; IDENTITY_DIM];
    out.copy_from_slice(v);
    Ok(out)
}
