//! Linear structure from motion: camera translations and per-observation
//! line depths from colinearity and coplanarity constraints.
//!
//! A tracked line observed in frame `i` has its mid-point at
//! `P = T_i + λ D`, where `D` is the unit viewing ray through the segment
//! mid-point. Every constraint is linear in `T` and `λ`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::config::SfmConfig;
use crate::coplanarity::{CoplanarityRelation, RelationKind};
use crate::error::{Error, Result};
use crate::geometry::{pixel_to_global_ray, Axis, FrameRotations, Intrinsics, LineSegment2D, ManhattanFrame};
use crate::qp::{solve_bounded, KktResiduals};
use crate::tracking::LineTrack;
use crate::union_find::UnionFind;

/// One (track, frame) observation and its global viewing ray.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub track: usize,
    pub frame_id: u32,
    pub segment: usize,
    pub label: Axis,
    pub ray: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Colinearity,
    Coplanarity,
    Floor,
    Gauge,
}

/// `Σ tᵀ T_frame + Σ c λ_obs = rhs`, with frames given as indices into
/// [`SfmSystem::frame_ids`] and depths as indices into the observations.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintRow {
    pub kind: RowKind,
    pub translations: Vec<(usize, Vector3<f64>)>,
    pub depths: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl ConstraintRow {
    pub fn nonzeros(&self) -> usize {
        self.translations
            .iter()
            .map(|(_, v)| v.iter().filter(|x| **x != 0.0).count())
            .sum::<usize>()
            + self.depths.iter().filter(|(_, c)| *c != 0.0).count()
    }

    pub fn evaluate(&self, translations: &[Vector3<f64>], depths: &[f64]) -> f64 {
        self.translations
            .iter()
            .map(|(f, t)| t.dot(&translations[*f]))
            .sum::<f64>()
            + self.depths.iter().map(|(o, c)| c * depths[*o]).sum::<f64>()
            - self.rhs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SfmSystem {
    pub frame_ids: Vec<u32>,
    pub observations: Vec<Observation>,
    pub rows: Vec<ConstraintRow>,
}

pub fn viewing_ray(segment: &LineSegment2D, k: &Intrinsics, rotations: &FrameRotations) -> Result<Vector3<f64>> {
    let r = rotations.require(segment.frame_id)?;
    Ok(pixel_to_global_ray(&segment.midpoint(), k, r)?.into_inner())
}

/// Row `n·(P_a − P_b) = 0` between two observations.
fn difference_row(
    kind: RowKind,
    n: &Vector3<f64>,
    a: usize,
    b: usize,
    obs: &[Observation],
    slot: &BTreeMap<u32, usize>,
) -> ConstraintRow {
    let (oa, ob) = (&obs[a], &obs[b]);
    let (fa, fb) = (slot[&oa.frame_id], slot[&ob.frame_id]);
    let translations = if fa == fb {
        Vec::new()
    } else {
        vec![(fa, *n), (fb, -*n)]
    };
    ConstraintRow {
        kind,
        translations,
        depths: vec![(a, n.dot(&Vector3::from(oa.ray))), (b, -n.dot(&Vector3::from(ob.ray)))],
        rhs: 0.0,
    }
}

fn gauge_row(depths: &[usize], weight: f64) -> ConstraintRow {
    let w = weight.sqrt();
    let c = w / depths.len() as f64;
    ConstraintRow {
        kind: RowKind::Gauge,
        translations: Vec::new(),
        depths: depths.iter().map(|&o| (o, c)).collect(),
        rhs: w,
    }
}

/// Builds colinearity rows for every pair of frames of every track, one row
/// per deduplicated pairwise relation, a chain of floor rows, and the scale
/// row over all depths.
pub fn assemble(
    segments: &[LineSegment2D],
    tracks: &[LineTrack],
    relations: &[CoplanarityRelation],
    rotations: &FrameRotations,
    k: &Intrinsics,
    frame: &ManhattanFrame,
    cfg: &SfmConfig,
) -> Result<SfmSystem> {
    let frame_ids = rotations.ids.clone();
    let slot: BTreeMap<u32, usize> = frame_ids.iter().enumerate().map(|(i, f)| (*f, i)).collect();
    let mut observations = Vec::new();
    let mut index: BTreeMap<(usize, u32), usize> = BTreeMap::new();
    for t in tracks {
        for o in &t.observations {
            index.insert((t.id, o.frame_id), observations.len());
            observations.push(Observation {
                track: t.id,
                frame_id: o.frame_id,
                segment: o.segment,
                label: t.label,
                ray: viewing_ray(&segments[o.segment], k, rotations)?.into(),
            });
        }
    }
    let mut rows = Vec::new();
    for t in tracks {
        let axes = t.label.others().map(|a| *frame.axis(a).as_vector());
        let ids: Vec<usize> = t.observations.iter().map(|o| index[&(t.id, o.frame_id)]).collect();
        for (x, &a) in ids.iter().enumerate() {
            for &b in &ids[x + 1..] {
                for n in &axes {
                    rows.push(difference_row(RowKind::Colinearity, n, a, b, &observations, &slot));
                }
            }
        }
    }
    let lookup = |track: usize, frame_id: u32| {
        index.get(&(track, frame_id)).copied().ok_or_else(|| {
            Error::InvalidInput(format!(
                "relation refers to track {track} which is not observed in frame {frame_id}"
            ))
        })
    };
    let mut seen = BTreeSet::new();
    for rel in relations {
        let n = rel.plane_normal(frame);
        if rel.kind == RelationKind::Floor {
            let ids = rel
                .members
                .iter()
                .map(|m| lookup(m.track, m.frame_id))
                .collect::<Result<Vec<_>>>()?;
            for w in ids.windows(2) {
                rows.push(difference_row(RowKind::Floor, &n, w[0], w[1], &observations, &slot));
            }
            continue;
        }
        let (ma, mb) = (&rel.members[0], &rel.members[1]);
        if !seen.insert((
            ma.frame_id,
            mb.frame_id,
            ma.track.min(mb.track),
            ma.track.max(mb.track),
            rel.normal_axis,
        )) {
            continue;
        }
        let (a, b) = (lookup(ma.track, ma.frame_id)?, lookup(mb.track, mb.frame_id)?);
        rows.push(difference_row(RowKind::Coplanarity, &n, a, b, &observations, &slot));
    }
    if rows.is_empty() {
        return Err(Error::UnderConstrained(
            "no colinearity or coplanarity constraints".into(),
        ));
    }
    let all: Vec<usize> = (0..observations.len()).collect();
    rows.push(gauge_row(&all, cfg.scale_weight));
    Ok(SfmSystem {
        frame_ids,
        observations,
        rows,
    })
}

/// Connected components of frames linked through observations and rows,
/// each as sorted frame indices, largest first (ties: lowest frame first).
pub fn components(system: &SfmSystem) -> Vec<Vec<usize>> {
    let nf = system.frame_ids.len();
    let slot: BTreeMap<u32, usize> = system.frame_ids.iter().enumerate().map(|(i, f)| (*f, i)).collect();
    let mut uf = UnionFind::new(nf + system.observations.len());
    for (o, obs) in system.observations.iter().enumerate() {
        uf.union(nf + o, slot[&obs.frame_id]);
    }
    for row in system.rows.iter().filter(|r| r.kind != RowKind::Gauge) {
        let nodes: Vec<usize> = row
            .translations
            .iter()
            .map(|(f, _)| *f)
            .chain(row.depths.iter().map(|(o, _)| nf + o))
            .collect();
        for w in nodes.windows(2) {
            uf.union(w[0], w[1]);
        }
    }
    let mut comps: Vec<Vec<usize>> = uf
        .sets()
        .into_iter()
        .map(|s| s.into_iter().filter(|&x| x < nf).collect::<Vec<_>>())
        .filter(|s| !s.is_empty())
        .collect();
    comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
    comps
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthValue {
    pub track: usize,
    pub frame_id: u32,
    pub segment: usize,
    pub depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowResidual {
    pub kind: RowKind,
    pub count: usize,
    pub rms: f64,
    pub max_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SfmSolution {
    pub frame_ids: Vec<u32>,
    /// `None` for frames outside the solved component.
    pub translations: Vec<Option<[f64; 3]>>,
    pub depths: Vec<DepthValue>,
    pub pinned_frame: u32,
    pub components: Vec<Vec<u32>>,
    pub registered_ratio: f64,
    pub iterations: usize,
    pub kkt: KktResiduals,
    pub objective: f64,
    pub residuals: Vec<RowResidual>,
}

impl SfmSolution {
    pub fn translation(&self, frame_id: u32) -> Option<Vector3<f64>> {
        let i = self.frame_ids.binary_search(&frame_id).ok()?;
        self.translations[i].map(Vector3::from)
    }

    pub fn depth(&self, track: usize, frame_id: u32) -> Option<f64> {
        self.depths
            .binary_search_by(|d| (d.track, d.frame_id).cmp(&(track, frame_id)))
            .ok()
            .map(|i| self.depths[i].depth)
    }

    pub fn registered_frames(&self) -> Vec<u32> {
        self.frame_ids
            .iter()
            .zip(&self.translations)
            .filter_map(|(f, t)| t.map(|_| *f))
            .collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Export(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Fraction of frames in the solved component.
pub fn registered_ratio(solution: &SfmSolution) -> f64 {
    solution.translations.iter().filter(|t| t.is_some()).count() as f64 / solution.translations.len().max(1) as f64
}

/// Solves the largest connected component with its lowest frame pinned at
/// the origin and the mean depth softly held at one.
pub fn solve(system: &SfmSystem, cfg: &SfmConfig) -> Result<SfmSolution> {
    let comps = components(system);
    let comp = comps
        .first()
        .ok_or_else(|| Error::UnderConstrained("no frames".into()))?
        .clone();
    let nf = system.frame_ids.len();
    let pinned = comp[0];
    let mut t_var: Vec<Option<usize>> = vec![None; nf];
    let mut n = 0;
    for &f in comp.iter().skip(1) {
        t_var[f] = Some(n);
        n += 3;
    }
    let in_comp: Vec<bool> = (0..nf).map(|f| comp.binary_search(&f).is_ok()).collect();
    let slot: BTreeMap<u32, usize> = system.frame_ids.iter().enumerate().map(|(i, f)| (*f, i)).collect();
    let obs_in: Vec<usize> = (0..system.observations.len())
        .filter(|&o| in_comp[slot[&system.observations[o].frame_id]])
        .collect();
    if obs_in.is_empty() {
        return Err(Error::UnderConstrained(
            "the largest component has no observations".into(),
        ));
    }
    let mut d_var: Vec<Option<usize>> = vec![None; system.observations.len()];
    for &o in &obs_in {
        d_var[o] = Some(n);
        n += 1;
    }
    let gauge = gauge_row(&obs_in, cfg.scale_weight);
    let rows: Vec<&ConstraintRow> = system
        .rows
        .iter()
        .filter(|r| r.kind != RowKind::Gauge && r.depths.iter().all(|(o, _)| d_var[*o].is_some()))
        .chain(std::iter::once(&gauge))
        .collect();
    let mut h = DMatrix::<f64>::zeros(n, n);
    let mut c = DVector::<f64>::zeros(n);
    let mut entries: Vec<(usize, f64)> = Vec::with_capacity(8);
    for row in &rows {
        entries.clear();
        for (f, t) in &row.translations {
            if let Some(v) = t_var[*f] {
                for a in 0..3 {
                    if t[a] != 0.0 {
                        entries.push((v + a, t[a]));
                    }
                }
            }
        }
        for (o, coef) in &row.depths {
            entries.push((d_var[*o].expect("filtered"), *coef));
        }
        for &(i, ai) in &entries {
            c[i] -= ai * row.rhs;
            for &(j, aj) in &entries {
                h[(i, j)] += ai * aj;
            }
        }
    }
    let bounded: Vec<usize> = obs_in.iter().map(|&o| d_var[o].expect("assigned")).collect();
    let qp = solve_bounded(&h, &c, &bounded, cfg.depth_epsilon, cfg.max_iterations)?;
    if qp.x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("linear solution".into()));
    }
    let translations_v: Vec<Vector3<f64>> = (0..nf)
        .map(|f| match t_var[f] {
            Some(v) => Vector3::new(qp.x[v], qp.x[v + 1], qp.x[v + 2]),
            None => Vector3::zeros(),
        })
        .collect();
    let depths_v: Vec<f64> = (0..system.observations.len())
        .map(|o| d_var[o].map_or(0.0, |v| qp.x[v]))
        .collect();
    let mut residuals: BTreeMap<RowKind, (usize, f64, f64)> = BTreeMap::new();
    let mut objective = 0.0;
    for row in &rows {
        let r = row.evaluate(&translations_v, &depths_v);
        objective += r * r;
        let e = residuals.entry(row.kind).or_insert((0, 0.0, 0.0));
        e.0 += 1;
        e.1 += r * r;
        e.2 = f64::max(e.2, r.abs());
    }
    let mut depths: Vec<DepthValue> = obs_in
        .iter()
        .map(|&o| {
            let ob = &system.observations[o];
            DepthValue {
                track: ob.track,
                frame_id: ob.frame_id,
                segment: ob.segment,
                depth: depths_v[o],
            }
        })
        .collect();
    depths.sort_by_key(|d| (d.track, d.frame_id));
    let translations: Vec<Option<[f64; 3]>> = (0..nf).map(|f| in_comp[f].then(|| translations_v[f].into())).collect();
    let mut out = SfmSolution {
        frame_ids: system.frame_ids.clone(),
        translations,
        depths,
        pinned_frame: system.frame_ids[pinned],
        components: comps
            .iter()
            .map(|c| c.iter().map(|&f| system.frame_ids[f]).collect())
            .collect(),
        registered_ratio: 0.0,
        iterations: qp.iterations,
        kkt: qp.kkt,
        objective,
        residuals: residuals
            .into_iter()
            .map(|(kind, (count, ss, mx))| RowResidual {
                kind,
                count,
                rms: (ss / count as f64).sqrt(),
                max_abs: mx,
            })
            .collect(),
    };
    out.registered_ratio = registered_ratio(&out);
    Ok(out)
}
