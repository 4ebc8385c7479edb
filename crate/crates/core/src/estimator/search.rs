use std::cmp::Ordering;

use crate::error::{param, Result};
use crate::geometry::Pose6D;
use crate::likelihood::{BackgroundModel, NeuralMesh};
use crate::render::{FeatureMap, SplatPoint, Splatter};

use super::nms::{greedy_keep, NmsRadii};
use super::templates::{Template, TemplateCache};
use super::Proposal;

/// Per-pixel constants of the template score.
pub(crate) struct SceneTerms<'a> {
    features: &'a FeatureMap,
    /// `f_i . b` per pixel.
    fb: Vec<f64>,
    half_bb: f64,
    /// Background-only NLL of the whole map.
    base: f64,
}

impl<'a> SceneTerms<'a> {
    pub fn new(features: &'a FeatureMap, bg: &BackgroundModel) -> Self {
        let b = bg.mean();
        let half_bb = 0.5 * b.iter().map(|x| x * x).sum::<f64>();
        let mut fb = Vec::with_capacity(features.num_pixels());
        let mut base = 0.0;
        for f in features.pixels() {
            let dot: f64 = f.iter().zip(b).map(|(x, y)| x * y).sum();
            let ff: f64 = f.iter().map(|x| x * x).sum();
            fb.push(dot);
            base += 0.5 * ff - dot + half_bb;
        }
        Self {
            features,
            fb,
            half_bb,
            base,
        }
    }
}

/// A template rendered at one sub-pixel shift on a lattice padded by one image
/// size on every side.
struct ShiftedRender {
    /// (col, row) relative to the real lattice origin, before the integer shift.
    cells: Vec<(i64, i64)>,
    /// Blended features, `cells x c`.
    blends: Vec<f64>,
    /// `0.5 |F|^2` per cell.
    half_norms: Vec<f64>,
}

fn render_shifted(
    template: &Template,
    mesh: &NeuralMesh,
    x0: f64,
    y0: f64,
    width: usize,
    height: usize,
) -> ShiftedRender {
    let c = mesh.channels();
    let (pw, ph) = (3 * width, 3 * height);
    let mut splatter = Splatter::new(pw * ph, false);
    let points = template.points.iter().map(|p| SplatPoint {
        vertex: p.vertex as usize,
        x: x0 + p.dx + width as f64,
        y: y0 + p.dy + height as f64,
        depth: p.depth,
        scale: p.scale,
    });
    splatter.splat(points, mesh.features(), c, pw, ph);
    let n = splatter.num_slots();
    let mut cells = Vec::with_capacity(n);
    let mut half_norms = Vec::with_capacity(n);
    for s in 0..n {
        splatter.resolve_slot(s, c);
        let p = splatter.slot_pixel[s];
        cells.push(((p % pw) as i64 - width as i64, (p / pw) as i64 - height as i64));
        let blend = &splatter.acc[s * c..(s + 1) * c];
        half_norms.push(0.5 * blend.iter().map(|x| x * x).sum::<f64>());
    }
    ShiftedRender {
        cells,
        blends: splatter.acc,
        half_norms,
    }
}

impl ShiftedRender {
    /// Eq. 3 NLL of the render moved by whole pixels `(iu, iv)`.
    fn score(&self, terms: &SceneTerms, iu: i64, iv: i64, c: usize) -> f64 {
        let (w, h) = (terms.features.width() as i64, terms.features.height() as i64);
        let mut total = terms.base;
        for (s, &(col, row)) in self.cells.iter().enumerate() {
            let (col, row) = (col + iu, row + iv);
            if col < 0 || row < 0 || col >= w || row >= h {
                continue;
            }
            let p = (row * w + col) as usize;
            let f = terms.features.pixel(p);
            let blend = &self.blends[s * c..(s + 1) * c];
            let dot: f64 = f.iter().zip(blend).map(|(x, y)| x * y).sum();
            total += self.half_norms[s] - terms.half_bb + terms.fb[p] - dot;
        }
        total
    }
}

/// A scored (template, offset) pair.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Candidate {
    pub score: f64,
    pub template: usize,
    /// Index into the (u, v) offset grid, u-major.
    pub offset: usize,
}

fn by_rank(a: &Candidate, b: &Candidate) -> Ordering {
    a.score
        .total_cmp(&b.score)
        .then(a.template.cmp(&b.template))
        .then(a.offset.cmp(&b.offset))
}

/// Scores every (u, v) offset of one template.
fn score_offsets(
    template: &Template,
    cache: &TemplateCache,
    mesh: &NeuralMesh,
    terms: &SceneTerms,
) -> Vec<f64> {
    let grid = cache.grid();
    let cam = cache.camera();
    let (cx, cy) = (cam.cx(), cam.cy());
    let (us, vs) = (grid.us(), grid.vs());
    let mut scores = vec![f64::INFINITY; us.len() * vs.len()];
    if !template.valid {
        return scores;
    }
    let split = |x: f64| {
        let i = x.floor();
        (i as i64, x - i)
    };
    // Group offsets by their fractional part so each group needs one splat.
    let mut groups: Vec<((u64, u64), Vec<(usize, i64, i64)>)> = Vec::new();
    for (iu, &u) in us.iter().enumerate() {
        let (su, fu) = split(u - cx);
        for (iv, &v) in vs.iter().enumerate() {
            let (sv, fv) = split(v - cy);
            let key = (fu.to_bits(), fv.to_bits());
            let entry = (iu * vs.len() + iv, su, sv);
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, list)) => list.push(entry),
                None => groups.push((key, vec![entry])),
            }
        }
    }
    let c = mesh.channels();
    for ((fu, fv), list) in groups {
        let shifted = render_shifted(
            template,
            mesh,
            cx + f64::from_bits(fu),
            cy + f64::from_bits(fv),
            cam.width,
            cam.height,
        );
        for (idx, su, sv) in list {
            scores[idx] = shifted.score(terms, su, sv, c);
        }
    }
    scores
}

/// Offsets that are local minima over their 8-neighborhood under the
/// (score, offset index) order.
fn local_minima(scores: &[f64], nu: usize, nv: usize, template: usize) -> Vec<Candidate> {
    let mut out = Vec::new();
    for iu in 0..nu {
        for iv in 0..nv {
            let idx = iu * nv + iv;
            let s = scores[idx];
            if !s.is_finite() {
                continue;
            }
            let mut best = true;
            'n: for du in -1i64..=1 {
                for dv in -1i64..=1 {
                    let (ju, jv) = (iu as i64 + du, iv as i64 + dv);
                    if (du == 0 && dv == 0) || ju < 0 || jv < 0 || ju >= nu as i64 || jv >= nv as i64 {
                        continue;
                    }
                    let j = ju as usize * nv + jv as usize;
                    if scores[j] < s || (scores[j] == s && j < idx) {
                        best = false;
                        break 'n;
                    }
                }
            }
            if best {
                out.push(Candidate {
                    score: s,
                    template,
                    offset: idx,
                });
            }
        }
    }
    out
}

/// Every template/offset score, template-major. Used by tests and diagnostics.
pub fn score_all(
    features: &FeatureMap,
    cache: &TemplateCache,
    mesh: &NeuralMesh,
    bg: &BackgroundModel,
) -> Result<Vec<Vec<f64>>> {
    check_inputs(features, cache, mesh, bg)?;
    let terms = SceneTerms::new(features, bg);
    Ok(crate::par::map_indexed(cache.len(), |t| {
        score_offsets(&cache.entries()[t], cache, mesh, &terms)
    }))
}

fn check_inputs(
    features: &FeatureMap,
    cache: &TemplateCache,
    mesh: &NeuralMesh,
    bg: &BackgroundModel,
) -> Result<()> {
    features.check_camera(cache.camera())?;
    if features.channels() != mesh.channels() || bg.channels() != mesh.channels() {
        return Err(param(format!(
            "channel mismatch: features {}, mesh {}, background {}",
            features.channels(),
            mesh.channels(),
            bg.channels()
        )));
    }
    if cache.mesh_len() != mesh.len() {
        return Err(param("template cache was built for a different mesh"));
    }
    Ok(())
}

/// Proposal pose of template `t` at offset index `offset`.
pub(crate) fn candidate_pose(cache: &TemplateCache, template: usize, offset: usize) -> Pose6D {
    let grid = cache.grid();
    let t = &cache.entries()[template];
    let nv = grid.vs().len();
    grid.pose(t.rotation, offset / nv, offset % nv, t.distance)
}

/// Two-phase coarse search: score every (u, v) offset per template and keep the
/// local minima, then rank all kept candidates and suppress with 6D NMS.
pub fn search_proposals(
    features: &FeatureMap,
    cache: &TemplateCache,
    mesh: &NeuralMesh,
    bg: &BackgroundModel,
    top_k: usize,
    nms: &NmsRadii,
) -> Result<Vec<Proposal>> {
    nms.validate()?;
    if top_k == 0 {
        return Ok(Vec::new());
    }
    let scores = score_all(features, cache, mesh, bg)?;
    let (nu, nv) = (cache.grid().us().len(), cache.grid().vs().len());
    let mut kept: Vec<Candidate> = scores
        .iter()
        .enumerate()
        .flat_map(|(t, s)| local_minima(s, nu, nv, t))
        .collect();
    kept.sort_by(by_rank);
    let poses: Vec<Pose6D> = kept
        .iter()
        .map(|c| candidate_pose(cache, c.template, c.offset))
        .collect();
    Ok(greedy_keep(&poses, nms, top_k)
        .into_iter()
        .map(|i| Proposal {
            pose: poses[i],
            score: kept[i].score,
            template: Some(kept[i].template),
        })
        .collect())
}
