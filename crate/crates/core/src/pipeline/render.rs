//! Embeddings -> scene parameters -> soft-mask rendering, all recorded on an
//! autodiff tape so gradients reach the embedding rows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::table::{attr, ATTR_DIM, IDENTITY_DIM};
use super::{EmbeddingList, Pipeline, PipelineError, Slot};
use crate::autodiff::{AutodiffError, Tape, Value};
use crate::image::Image;

/// Object radius at size 0 and size 1, in normalized device coordinates.
pub(crate) const RADIUS_MIN: f64 = 0.25;
pub(crate) const RADIUS_MAX: f64 = 0.55;
/// Scorer regions: the inner disk is always covered by the object, the
/// outer region (beyond this radius) never is.
pub(crate) const INNER_RADIUS: f64 = 0.15;
pub(crate) const OUTER_RADIUS: f64 = 0.85;
/// Background brightness is drawn from `[1 - span, 1]`.
const BRIGHTNESS_SPAN: f64 = 0.04;
/// Largest boundary displacement, in pixels.
const BOUNDARY_JITTER: f64 = 0.25;
const PATCH_CELLS: usize = 4;

/// Noise-driven values that carry no semantics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nuisance {
    pub brightness: f64,
    /// Object-centre offset in normalized coordinates, at most one pixel.
    pub jitter: [f64; 2],
}

impl Nuisance {
    pub fn none() -> Self {
        Self {
            brightness: 1.0,
            jitter: [0.0, 0.0],
        }
    }
}

/// Everything a noise seed contributes to one decode.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise {
    pub nuisance: Nuisance,
    /// Identity detail used where the prompt leaves the identity unspecified.
    pub identity: [f64; IDENTITY_DIM],
    /// Direction in tail space; the object's tail projected on it displaces
    /// the mask boundary.
    pub direction: Vec<f64>,
}

impl Noise {
    pub fn from_seed(seed: u64, width: usize, tail_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixel = 2.0 / width as f64;
        let brightness = 1.0 - BRIGHTNESS_SPAN * rng.random::<f64>();
        let jitter = [pixel * rng.random_range(-1.0..1.0), pixel * rng.random_range(-1.0..1.0)];
        let mut identity = [0.0; IDENTITY_DIM];
        identity.iter_mut().for_each(|v| *v = rng.random::<f64>());
        let scale = 1.0 / tail_dim.max(1) as f64;
        let direction = (0..tail_dim)
            .map(|_| { let x: f64 = StandardNormal.sample(&mut rng); scale * x })
            .collect();
        Self {
            nuisance: Nuisance { brightness, jitter },
            identity,
            direction,
        }
    }
}

/// Decoder intermediate with every field in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneParams {
    pub object: [f64; 3],
    pub background: [f64; 3],
    pub size: f64,
    /// 0 = disk, 1 = square.
    pub shape: f64,
    /// Weight of the identity patch; 1 means a face scene.
    pub face: f64,
    pub identity: [f64; IDENTITY_DIM],
    /// Sub-pixel boundary displacement, 0.5 = none.
    pub boundary: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            object: [0.5; 3],
            background: [0.5; 3],
            size: 0.5,
            shape: 0.5,
            face: 0.0,
            identity: [0.5; IDENTITY_DIM],
            boundary: 0.5,
        }
    }
}

/// Scene parameters recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct SceneVars {
    /// RGB, vector of 3.
    pub object: Value,
    pub background: Value,
    pub size: Value,
    pub shape: Value,
    pub face: Value,
    /// Vector of [`IDENTITY_DIM`].
    pub identity: Value,
    pub boundary: Value,
}

/// Rendered planar channels and object mask, on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ImageVars {
    pub channels: [Value; 3],
    pub mask: Value,
}

/// A rendered image with the object mask that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendering {
    pub image: Image,
    pub object_mask: Vec<f64>,
}

impl Rendering {
    /// Pixels that belong to the surroundings: object mask below `threshold`.
    pub fn background_region(&self, threshold: f64) -> Vec<bool> {
        self.object_mask.iter().map(|&m| m < threshold).collect()
    }
}

/// Precomputed pixel geometry, projection matrices and scorer weights.
#[derive(Clone, Debug)]
pub(crate) struct Geometry {
    pub height: usize,
    pub width: usize,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// `(pixels x PATCH_CELLS)` row-major indicator of each patch cell.
    pub cell_indicator: Vec<f64>,
    /// 1 inside the identity patch.
    pub patch: Vec<f64>,
    /// Per-channel `(PATCH_CELLS x IDENTITY_DIM)` blocks of the projection.
    pub projection: [Vec<f64>; 3],
    /// Pseudo-inverse `(IDENTITY_DIM x 3 * PATCH_CELLS)`, columns ordered
    /// cell-major (`cell * 3 + channel`).
    pub projection_pinv: Vec<f64>,
    pub inner_weights: Vec<f64>,
    pub outer_weights: Vec<f64>,
    pub annulus_weights: Vec<f64>,
    pub cell_weights: [Vec<f64>; PATCH_CELLS],
}

fn normalized(mask: impl Iterator<Item = bool>) -> Vec<f64> {
    let m: Vec<f64> = mask.map(|b| if b { 1.0 } else { 0.0 }).collect();
    let total: f64 = m.iter().sum();
    assert!(total > 0.0, "empty scorer region");
    m.into_iter().map(|x| x / total).collect()
}

/// Row `cell * 3 + channel` of the projection: weight 0.55 on identity
/// component `(cell + channel) % 4` and 0.15 on the others. Rows are convex
/// combinations, so identities in the unit cube render to valid colours.
pub(crate) fn projection_row(cell: usize, channel: usize) -> [f64; IDENTITY_DIM] {
    let mut row = [0.15; IDENTITY_DIM];
    row[(cell + channel) % IDENTITY_DIM] = 0.55;
    row
}

fn invert4(m: [[f64; 4]; 4]) -> [[f64; 4]; 4] {
    let mut a = m;
    let mut inv = [[0.0; 4]; 4];
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for col in 0..4 {
        let pivot = (col..4)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        inv.swap(col, pivot);
        let p = a[col][col];
        for j in 0..4 {
            a[col][j] /= p;
            inv[col][j] /= p;
        }
        for i in 0..4 {
            if i != col {
                let f = a[i][col];
                for j in 0..4 {
                    a[i][j] -= f * a[col][j];
                    inv[i][j] -= f * inv[col][j];
                }
            }
        }
    }
    inv
}

impl Geometry {
    pub fn new(height: usize, width: usize) -> Self {
        let n = height * width;
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for r in 0..height {
            for c in 0..width {
                xs.push(2.0 * (c as f64 + 0.5) / width as f64 - 1.0);
                ys.push(2.0 * (r as f64 + 0.5) / height as f64 - 1.0);
            }
        }

        let (ph, pw) = (height / 8, width / 8);
        let (r0, c0) = (height / 2 - ph, width / 2 - pw);
        let mut cell_indicator = vec![0.0; n * PATCH_CELLS];
        let mut patch = vec![0.0; n];
        let mut cell_of = vec![None; n];
        for r in r0..r0 + 2 * ph {
            for c in c0..c0 + 2 * pw {
                let i = r * width + c;
                let cell = ((r - r0) / ph) * 2 + (c - c0) / pw;
                cell_indicator[i * PATCH_CELLS + cell] = 1.0;
                patch[i] = 1.0;
                cell_of[i] = Some(cell);
            }
        }

        let projection = [0, 1, 2].map(|ch| {
            (0..PATCH_CELLS)
                .flat_map(|cell| projection_row(cell, ch))
                .collect::<Vec<f64>>()
        });
        let rows: Vec<[f64; IDENTITY_DIM]> = (0..PATCH_CELLS)
            .flat_map(|cell| (0..3).map(move |ch| projection_row(cell, ch)))
            .collect();
        let mut gram = [[0.0; 4]; 4];
        for row in &rows {
            for i in 0..4 {
                for j in 0..4 {
                    gram[i][j] += row[i] * row[j];
                }
            }
        }
        let gram_inv = invert4(gram);
        let mut projection_pinv = vec![0.0; IDENTITY_DIM * rows.len()];
        for i in 0..IDENTITY_DIM {
            for (k, row) in rows.iter().enumerate() {
                projection_pinv[i * rows.len() + k] = (0..4).map(|j| gram_inv[i][j] * row[j]).sum();
            }
        }

        let radius: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| x.hypot(*y)).collect();
        let inner_weights = normalized(radius.iter().map(|&r| r < INNER_RADIUS));
        let outer_weights = normalized(radius.iter().map(|&r| r > OUTER_RADIUS));
        let annulus_weights = normalized(radius.iter().map(|&r| (RADIUS_MIN..RADIUS_MAX).contains(&r)));
        let cell_weights = [0, 1, 2, 3].map(|cell| normalized(cell_of.iter().map(|c| *c == Some(cell))));

        Self {
            height,
            width,
            xs,
            ys,
            cell_indicator,
            patch,
            projection,
            projection_pinv,
            inner_weights,
            outer_weights,
            annulus_weights,
            cell_weights,
        }
    }

    fn pixels(&self) -> usize {
        self.height * self.width
    }
}

impl Pipeline {
    /// Pools slot attributes into scene parameters.
    ///
    /// Attributes are read relative to [`Pipeline::attribute_center`] and
    /// summed over each phrase; a pooled level is `clamp01(0.5 + sum)`. The
    /// background takes the surroundings' hue plus the object's cast colour.
    /// Identity is a blend of the prompt's identity code and the noise draw,
    /// weighted by how specific the object phrase is.
    pub fn scene_on_tape(
        &self,
        tape: &mut Tape,
        rows: &[Value],
        slots: &[Slot],
        noise: &Noise,
    ) -> Result<SceneVars, AutodiffError> {
        assert_eq!(rows.len(), slots.len());
        let center = self.attribute_center();
        let pooled = |tape: &mut Tape, want: Slot| -> Result<Value, AutodiffError> {
            let mut acc: Option<Value> = None;
            for (&row, &slot) in rows.iter().zip(slots) {
                if slot != want {
                    continue;
                }
                let a = tape.slice(row, 0, ATTR_DIM)?;
                let a = tape.offset(a, -center)?;
                acc = Some(match acc {
                    Some(prev) => tape.add(prev, a)?,
                    None => a,
                });
            }
            Ok(match acc {
                Some(v) => v,
                None => tape.vector(vec![0.0; ATTR_DIM]),
            })
        };
        let obj = pooled(tape, Slot::Object)?;
        let sur = pooled(tape, Slot::Surroundings)?;

        let dim = self.config.dim;
        let mut object_tail: Option<Value> = None;
        for (&row, &slot) in rows.iter().zip(slots) {
            if slot == Slot::Object {
                let t = tape.slice(row, ATTR_DIM, dim - ATTR_DIM)?;
                object_tail = Some(match object_tail {
                    Some(prev) => tape.add(prev, t)?,
                    None => t,
                });
            }
        }

        let levels = tape.offset(obj, 0.5)?;
        let levels = tape.clamp01(levels)?;
        let object = tape.slice(levels, attr::HUE.start, 3)?;
        let size = tape.element(levels, attr::SIZE)?;
        let shape = tape.element(levels, attr::SHAPE)?;
        let code = tape.slice(levels, attr::IDENTITY.start, IDENTITY_DIM)?;

        let hue_b = tape.slice(sur, attr::HUE.start, 3)?;
        let cast = tape.slice(obj, attr::SURROUND.start, 3)?;
        let background = tape.add(hue_b, cast)?;
        let background = tape.offset(background, 0.5)?;
        let background = tape.clamp01(background)?;

        let face = tape.element(obj, attr::FACE)?;
        let face = tape.scale(face, 4.0)?;
        let face = tape.offset(face, -0.5)?;
        let face = tape.clamp01(face)?;

        let spec = tape.element(obj, attr::SPECIFICITY)?;
        let spec = tape.scale(spec, 2.0)?;
        let spec = tape.offset(spec, 0.25)?;
        let spec = tape.clamp01(spec)?;
        let unspec = tape.scale(spec, -1.0)?;
        let unspec = tape.offset(unspec, 1.0)?;
        let noise_id = tape.vector(noise.identity.to_vec());
        let from_prompt = tape.scale_by(spec, code)?;
        let from_noise = tape.scale_by(unspec, noise_id)?;
        let identity = tape.add(from_prompt, from_noise)?;

        let boundary = match object_tail {
            Some(t) => {
                let z = tape.vector(noise.direction.clone());
                let s = tape.dot(t, z)?;
                let s = tape.scale(s, 2.0)?;
                tape.sigmoid(s)?
            }
            None => tape.constant_scalar(0.5),
        };

        Ok(SceneVars {
            object,
            background,
            size,
            shape,
            face,
            identity,
            boundary,
        })
    }

    /// Lifts plain scene parameters onto a tape as constants.
    pub fn scene_constants(&self, tape: &mut Tape, scene: &SceneParams) -> SceneVars {
        SceneVars {
            object: tape.vector(scene.object.to_vec()),
            background: tape.vector(scene.background.to_vec()),
            size: tape.constant_scalar(scene.size),
            shape: tape.constant_scalar(scene.shape),
            face: tape.constant_scalar(scene.face),
            identity: tape.vector(scene.identity.to_vec()),
            boundary: tape.constant_scalar(scene.boundary),
        }
    }

    /// Soft-mask rendering: a disk/square blend of the object colour over a
    /// brightness-scaled background, with the identity patch composited at
    /// the centre with weight `face`.
    pub fn render_on_tape(
        &self,
        tape: &mut Tape,
        scene: &SceneVars,
        nuisance: &Nuisance,
    ) -> Result<ImageVars, AutodiffError> {
        let g = &self.geometry;
        let n = g.pixels();
        let [jx, jy] = nuisance.jitter;
        let disk: Vec<f64> = g.xs.iter().zip(&g.ys).map(|(x, y)| (x - jx).hypot(y - jy)).collect();
        let square_minus_disk: Vec<f64> = g
            .xs
            .iter()
            .zip(&g.ys)
            .zip(&disk)
            .map(|((x, y), d)| (x - jx).abs().max((y - jy).abs()) - d)
            .collect();

        let pixel = 2.0 / g.width as f64;
        let radius = tape.scale(scene.size, RADIUS_MAX - RADIUS_MIN)?;
        let radius = tape.offset(radius, RADIUS_MIN)?;
        let shift = tape.offset(scene.boundary, -0.5)?;
        let shift = tape.scale(shift, 2.0 * BOUNDARY_JITTER * pixel)?;
        let radius = tape.add(radius, shift)?;
        let radius = tape.broadcast(radius, n)?;
        let blend = tape.vector(square_minus_disk);
        let blend = tape.scale_by(scene.shape, blend)?;
        let disk = tape.vector(disk);
        let dist = tape.add(disk, blend)?;
        let signed = tape.sub(radius, dist)?;
        let signed = tape.scale(signed, self.config.sharpness)?;
        let mask = tape.sigmoid(signed)?;
        let inv_mask = tape.scale(mask, -1.0)?;
        let inv_mask = tape.offset(inv_mask, 1.0)?;
        let background = tape.scale(scene.background, nuisance.brightness)?;

        let indicator = tape.matrix(n, PATCH_CELLS, g.cell_indicator.clone())?;
        let patch = tape.vector(g.patch.clone());
        let mut channels = Vec::with_capacity(3);
        for ch in 0..3 {
            let obj = tape.element(scene.object, ch)?;
            let bg = tape.element(background, ch)?;
            let fg = tape.scale_by(obj, mask)?;
            let bg = tape.scale_by(bg, inv_mask)?;
            let pix = tape.add(fg, bg)?;

            let proj = tape.matrix(PATCH_CELLS, IDENTITY_DIM, g.projection[ch].clone())?;
            let cells = tape.matvec(proj, scene.identity)?;
            let painted = tape.matvec(indicator, cells)?;
            let covered = tape.mul(pix, patch)?;
            let delta = tape.sub(painted, covered)?;
            let delta = tape.scale_by(scene.face, delta)?;
            let pix = tape.add(pix, delta)?;
            channels.push(tape.clamp01(pix)?);
        }
        Ok(ImageVars {
            channels: [channels[0], channels[1], channels[2]],
            mask,
        })
    }

    /// Records the full decoder for the given embedding rows.
    pub fn decode_on_tape(
        &self,
        tape: &mut Tape,
        rows: &[Value],
        slots: &[Slot],
        noise: &Noise,
    ) -> Result<ImageVars, AutodiffError> {
        let scene = self.scene_on_tape(tape, rows, slots, noise)?;
        self.render_on_tape(tape, &scene, &noise.nuisance)
    }

    pub fn noise(&self, seed: u64) -> Noise {
        Noise::from_seed(seed, self.config.width, self.config.dim - ATTR_DIM)
    }

    fn read_rendering(&self, tape: &Tape, out: &ImageVars) -> Rendering {
        let [r, g, b] = out.channels.map(|c| tape.data(c));
        Rendering {
            image: Image::from_channels(self.config.height, self.config.width, [r, g, b]),
            object_mask: tape.data(out.mask).to_vec(),
        }
    }

    /// Scene parameters the decoder derives from `list` under `seed`.
    pub fn scene(&self, list: &EmbeddingList, seed: u64) -> Result<SceneParams, PipelineError> {
        self.check_list(list)?;
        let mut tape = Tape::new();
        let rows: Vec<Value> = list.rows().iter().map(|r| tape.vector(r.clone())).collect();
        let s = self.scene_on_tape(&mut tape, &rows, list.slots(), &self.noise(seed))?;
        let three = |v: Value| {
            let d = tape.data(v);
            [d[0], d[1], d[2]]
        };
        let id = tape.data(s.identity);
        Ok(SceneParams {
            object: three(s.object),
            background: three(s.background),
            size: tape.scalar(s.size),
            shape: tape.scalar(s.shape),
            face: tape.scalar(s.face),
            identity: [id[0], id[1], id[2], id[3]],
            boundary: tape.scalar(s.boundary),
        })
    }

    pub fn decode(&self, list: &EmbeddingList, seed: u64) -> Result<Image, PipelineError> {
        Ok(self.decode_full(list, seed)?.image)
    }

    /// Decodes and also returns the object mask.
    pub fn decode_full(&self, list: &EmbeddingList, seed: u64) -> Result<Rendering, PipelineError> {
        self.check_list(list)?;
        let mut tape = Tape::new();
        let rows: Vec<Value> = list.rows().iter().map(|r| tape.vector(r.clone())).collect();
        let out = self.decode_on_tape(&mut tape, &rows, list.slots(), &self.noise(seed))?;
        Ok(self.read_rendering(&tape, &out))
    }

    /// Renders scene parameters directly, bypassing the encoder side.
    pub fn render(&self, scene: &SceneParams, nuisance: &Nuisance) -> Result<Rendering, PipelineError> {
        let mut tape = Tape::new();
        let vars = self.scene_constants(&mut tape, scene);
        let out = self.render_on_tape(&mut tape, &vars, nuisance)?;
        Ok(self.read_rendering(&tape, &out))
    }

    pub(crate) fn geometry(&self) -> &Geometry {
        &self.geometry
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{PipelineConfig, TokenTable};

    fn masked_mean(r: &Rendering, threshold: f64) -> [f64; 3] {
        let mut sum = [0.0; 3];
        let mut n = 0.0;
        for (i, &m) in r.object_mask.iter().enumerate() {
            if m >= threshold {
                let p = r.image.pixel(i);
                for c in 0..3 {
                    sum[c] += p[c];
                }
                n += 1.0;
            }
        }
        sum.map(|s| s / n)
    }

    #[test]
    fn projection_pseudo_inverse_is_left_inverse() {
        let g = Geometry::new(32, 32);
        for i in 0..4 {
            for j in 0..4 {
                let v: f64 = (0..4)
                    .flat_map(|cell| (0..3).map(move |ch| (cell, ch)))
                    .enumerate()
                    .map(|(k, (cell, ch))| g.projection_pinv[i * 12 + k] * projection_row(cell, ch)[j])
                    .sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((v - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_embeddings_different_noise_keep_object_hue() {
        let p = Pipeline::default();
        let e = p.encode_text("a yellow hawk amidst white flowers").unwrap();
        let s1 = p.scene(&e, 1).unwrap();
        let s2 = p.scene(&e, 2).unwrap();
        for c in 0..3 {
            assert!((s1.object[c] - s2.object[c]).abs() < 1e-9);
        }
        assert_eq!(s1.background, s2.background);
        let r1 = p.decode_full(&e, 1).unwrap();
        let r2 = p.decode_full(&e, 2).unwrap();
        assert_ne!(r1.image, r2.image);
        // Deep inside the object the colour is the object hue regardless of noise.
        let c1 = masked_mean(&r1, 0.999);
        let c2 = masked_mean(&r2, 0.999);
        for c in 0..3 {
            assert!((c1[c] - c2[c]).abs() < 1e-3);
        }
    }

    #[test]
    fn yellow_object_renders_yellow_inside_mask() {
        let p = Pipeline::default();
        let scene = SceneParams {
            object: [1.0, 1.0, 0.0],
            ..Default::default()
        };
        let r = p.render(&scene, &Nuisance::none()).unwrap();
        let m = masked_mean(&r, 0.9);
        assert!((m[0] - 1.0).abs() < 0.05 && (m[1] - 1.0).abs() < 0.05 && m[2] < 0.05, "{m:?}");

        // Same through the encoder with mixing disabled.
        let cfg = PipelineConfig {
            mixing: 0.0,
            ..Default::default()
        };
        let p0 = Pipeline::new(cfg, TokenTable::default()).unwrap();
        let e = p0.encode(&["yellow"]).unwrap();
        assert_eq!(p0.scene(&e, 3).unwrap().object, [1.0, 1.0, 0.0]);
        let m = masked_mean(&p0.decode_full(&e, 3).unwrap(), 0.9);
        assert!((m[0] - 1.0).abs() < 0.05 && (m[1] - 1.0).abs() < 0.05 && m[2] < 0.05, "{m:?}");
    }

    #[test]
    fn all_pad_is_neutral_gray() {
        let p = Pipeline::default();
        let e = p.encode::<&str>(&[]).unwrap();
        let s = p.scene(&e, 0).unwrap();
        assert_eq!(s.object, [0.5; 3]);
        assert_eq!(s.background, [0.5; 3]);
        assert_eq!(s.size, 0.5);
        assert_eq!(s.face, 0.0);
        let img = p.render(&s, &Nuisance::none()).unwrap().image;
        assert!(img.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn decode_is_deterministic() {
        let p = Pipeline::default();
        let e = p.encode_text("face of a blonde woman at the park").unwrap();
        assert_eq!(p.decode(&e, 9).unwrap(), p.decode(&e, 9).unwrap());
        assert_eq!(p.scene(&e, 9).unwrap().face, 1.0);
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let p = Pipeline::default();
        for prompt in ["fiery armor on lava", "face of a woman", "white flowers"] {
            let e = p.encode_text(prompt).unwrap();
            for seed in 0..4 {
                let img = p.decode(&e, seed).unwrap();
                assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
