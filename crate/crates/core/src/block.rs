//! Classical block-matching motion estimation and compensation.
//!
//! Seven search strategies over a +/-p window with SAD cost on luma:
//! exhaustive (ES), three-step (TSS), new three-step (NTSS), simple and
//! efficient (SES, the quadrant-elimination TSS variant), four-step (FSS),
//! diamond (DS) and adaptive rood pattern (ARPS). Pattern details follow the
//! published algorithm literature.
//!
//! Candidate rule: a displacement is explored only if the target block's
//! in-frame footprint lands fully inside the reference frame after the shift.
//! Costing always covers the nominal mb x mb window with replication-clamped
//! reads, so partial blocks at the right/bottom edges are costed over
//! replicated samples. Ties break toward smaller |dx|+|dy|, then raster
//! order, which pins static content to the zero vector.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::video::Frame;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    Es,
    Tss,
    Ntss,
    Ses,
    Fss,
    Ds,
    Arps,
}

impl Algorithm {
    pub const ALL: [Algorithm; 7] = [
        Algorithm::Es,
        Algorithm::Tss,
        Algorithm::Ntss,
        Algorithm::Ses,
        Algorithm::Fss,
        Algorithm::Ds,
        Algorithm::Arps,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Es => "es",
            Algorithm::Tss => "tss",
            Algorithm::Ntss => "ntss",
            Algorithm::Ses => "ses",
            Algorithm::Fss => "fss",
            Algorithm::Ds => "ds",
            Algorithm::Arps => "arps",
        }
    }

    pub fn id(&self) -> u8 {
        match self {
            Algorithm::Es => 0,
            Algorithm::Tss => 1,
            Algorithm::Ntss => 2,
            Algorithm::Ses => 3,
            Algorithm::Fss => 4,
            Algorithm::Ds => 5,
            Algorithm::Arps => 6,
        }
    }

    pub fn from_id(id: u8) -> Result<Algorithm> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.id() == id)
            .ok_or_else(|| Error::Format(format!("unknown block algorithm id {id}")))
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Algorithm> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown block algorithm {s}")))
    }
}

/// Per-block displacement vectors for one frame transition. A vector (dx, dy)
/// means the target block matches the reference block shifted by (dx, dy).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MotionField {
    pub block_w: usize,
    pub block_h: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    pub vectors: Vec<(i32, i32)>,
    pub costs: Vec<u64>,
    pub eval_counts: Vec<u32>,
}

impl MotionField {
    pub fn zero(frame_w: usize, frame_h: usize, mb: usize) -> MotionField {
        let grid_w = frame_w.div_ceil(mb);
        let grid_h = frame_h.div_ceil(mb);
        MotionField {
            block_w: mb,
            block_h: mb,
            grid_w,
            grid_h,
            vectors: vec![(0, 0); grid_w * grid_h],
            costs: vec![0; grid_w * grid_h],
            eval_counts: vec![0; grid_w * grid_h],
        }
    }

    pub fn at(&self, bx: usize, by: usize) -> (i32, i32) {
        self.vectors[by * self.grid_w + bx]
    }

    pub fn nonzero_count(&self) -> usize {
        self.vectors.iter().filter(|v| **v != (0, 0)).count()
    }

    pub fn mean_evals(&self) -> f64 {
        if self.eval_counts.is_empty() {
            return 0.0;
        }
        self.eval_counts.iter().map(|&e| e as f64).sum::<f64>() / self.eval_counts.len() as f64
    }
}

/// Search state for one target block: cost cache, eval counter and the
/// candidate validity rule.
struct BlockCtx<'a> {
    reference: &'a [u8],
    target: &'a [u8],
    w: i64,
    h: i64,
    bx: i64,
    by: i64,
    mb: i64,
    fit_w: i64, // in-frame extent of the target block
    fit_h: i64,
    p: i64,
    cache: Vec<Option<u64>>,
    evals: u32,
}

/// Candidate ordering: lowest cost, then smallest |dx|+|dy|, then raster.
type Key = (u64, i64, i64, i64);

#[inline]
fn key(cost: u64, dx: i64, dy: i64) -> Key {
    (cost, dx.abs() + dy.abs(), dy, dx)
}

impl<'a> BlockCtx<'a> {
    fn new(
        reference: &'a [u8],
        target: &'a [u8],
        w: usize,
        h: usize,
        bx: usize,
        by: usize,
        mb: usize,
        p: usize,
    ) -> Self {
        let side = 2 * p + 1;
        BlockCtx {
            reference,
            target,
            w: w as i64,
            h: h as i64,
            bx: bx as i64,
            by: by as i64,
            mb: mb as i64,
            fit_w: (w as i64 - bx as i64).min(mb as i64),
            fit_h: (h as i64 - by as i64).min(mb as i64),
            p: p as i64,
            cache: vec![None; side * side],
            evals: 0,
        }
    }

    #[inline]
    fn valid(&self, dx: i64, dy: i64) -> bool {
        dx.abs() <= self.p
            && dy.abs() <= self.p
            && self.bx + dx >= 0
            && self.by + dy >= 0
            && self.bx + dx + self.fit_w <= self.w
            && self.by + dy + self.fit_h <= self.h
    }

    fn cost(&mut self, dx: i64, dy: i64) -> Option<u64> {
        if !self.valid(dx, dy) {
            return None;
        }
        let slot = ((dy + self.p) * (2 * self.p + 1) + dx + self.p) as usize;
        if let Some(c) = self.cache[slot] {
            return Some(c);
        }
        let c = self.sad(dx, dy);
        self.cache[slot] = Some(c);
        self.evals += 1;
        Some(c)
    }

    fn sad(&self, dx: i64, dy: i64) -> u64 {
        let (w, h) = (self.w, self.h);
        let full_fit = self.fit_w == self.mb
            && self.fit_h == self.mb
            && self.bx + dx + self.mb <= w
            && self.by + dy + self.mb <= h;
        let mut acc: u64 = 0;
        if full_fit {
            for j in 0..self.mb {
                let t_row = ((self.by + j) * w + self.bx) as usize;
                let r_row = ((self.by + dy + j) * w + self.bx + dx) as usize;
                let t = &self.target[t_row..t_row + self.mb as usize];
                let r = &self.reference[r_row..r_row + self.mb as usize];
                for (tv, rv) in t.iter().zip(r.iter()) {
                    acc += (*tv as i64 - *rv as i64).unsigned_abs();
                }
            }
        } else {
            for j in 0..self.mb {
                let ty = (self.by + j).clamp(0, h - 1);
                let ry = (self.by + dy + j).clamp(0, h - 1);
                for i in 0..self.mb {
                    let tx = (self.bx + i).clamp(0, w - 1);
                    let rx = (self.bx + dx + i).clamp(0, w - 1);
                    let tv = self.target[(ty * w + tx) as usize] as i64;
                    let rv = self.reference[(ry * w + rx) as usize] as i64;
                    acc += (tv - rv).unsigned_abs();
                }
            }
        }
        acc
    }

    /// Costs every offset in `offsets` (relative to `center`), returning the
    /// best (key-ordered) explored candidate including `center` itself.
    fn best_of(&mut self, center: (i64, i64), offsets: &[(i64, i64)]) -> ((i64, i64), u64) {
        let c_cost = self.cost(center.0, center.1).expect("center must be valid");
        let mut best = (center, c_cost);
        let mut best_key = key(c_cost, center.0, center.1);
        for &(ox, oy) in offsets {
            let (dx, dy) = (center.0 + ox, center.1 + oy);
            if let Some(c) = self.cost(dx, dy) {
                let k = key(c, dx, dy);
                if k < best_key {
                    best_key = k;
                    best = ((dx, dy), c);
                }
            }
        }
        best
    }
}

const RING8: [(i64, i64); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

fn ring8_scaled(s: i64) -> [(i64, i64); 8] {
    RING8.map(|(x, y)| (x * s, y * s))
}

fn prev_power_of_two(p: usize) -> i64 {
    let mut s = 1i64;
    while s * 2 <= p as i64 {
        s *= 2;
    }
    s
}

fn search_es(ctx: &mut BlockCtx) -> ((i64, i64), u64) {
    let mut best = ((0i64, 0i64), ctx.cost(0, 0).expect("zero vector is always valid"));
    let mut best_key = key(best.1, 0, 0);
    for dy in -ctx.p..=ctx.p {
        for dx in -ctx.p..=ctx.p {
            if let Some(c) = ctx.cost(dx, dy) {
                let k = key(c, dx, dy);
                if k < best_key {
                    best_key = k;
                    best = ((dx, dy), c);
                }
            }
        }
    }
    best
}

fn search_tss(ctx: &mut BlockCtx) -> ((i64, i64), u64) {
    let mut center = (0i64, 0i64);
    let mut best = ctx.cost(0, 0).expect("zero vector");
    let mut s = prev_power_of_two(ctx.p as usize);
    while s >= 1 {
        let (c, cost) = ctx.best_of(center, &ring8_scaled(s));
        center = c;
        best = cost;
        s /= 2;
    }
    (center, best)
}

fn search_ntss(ctx: &mut BlockCtx) -> ((i64, i64), u64) {
    let s = prev_power_of_two(ctx.p as usize);
    // first step: the TSS ring plus the 8 unit neighbors of the center
    let mut offsets: Vec<(i64, i64)> = ring8_scaled(s).to_vec();
    offsets.extend_from_slice(&RING8);
    let (best, cost) = ctx.best_of((0, 0), &offsets);
    if best == (0, 0) {
        return (best, cost); // center-bias early termination
    }
    if best.0.abs() <= 1 && best.1.abs() <= 1 {
        // best on the unit ring: one refinement around it, then stop
        return ctx.best_of(best, &RING8);
    }
    // otherwise continue as TSS with halved steps
    let mut center = best;
    let mut cost = cost;
    let mut step = s / 2;
    while step >= 1 {
        let (c, cst) = ctx.best_of(center, &ring8_scaled(step));
        center = c;
        cost = cst;
        step /= 2;
    }
    (center, cost)
}

fn search_ses(ctx: &mut BlockCtx) -> ((i64, i64), u64) {
    let mut center = (0i64, 0i64);
    let mut best = ctx.cost(0, 0).expect("zero vector");
    let mut s = prev_power_of_two(ctx.p as usize);
    while s >= 1 {
        let c_cost = ctx.cost(center.0, center.1).unwrap();
        let cost_a = ctx.cost(center.0 + s, center.1);
        let cost_b = ctx.cost(center.0, center.1 + s);
        // pick the promising quadrant from the two axis probes
        let sx: i64 = if cost_a.is_some_and(|a| a < c_cost) { 1 } else { -1 };
        let sy: i64 = if cost_b.is_some_and(|b| b < c_cost) { 1 } else { -1 };
        let mut offsets: Vec<(i64, i64)> = vec![(s, 0), (0, s), (sx * s, sy * s)];
        if sx < 0 {
            offsets.push((-s, 0));
        }
        if sy < 0 {
            offsets.push((0, -s));
        }
        let (c, cost) = ctx.best_of(center, &offsets);
        center = c;
        best = cost;
        s /= 2;
    }
    (center, best)
}

fn search_fss(ctx: &mut BlockCtx) -> ((i64, i64), u64) {
    let ring2 = ring8_scaled(2);
    let (mut center, _) = ctx.best_of((0, 0), &ring2);
    if center != (0, 0) {
        // at most two more large steps before the final small one
        for _ in 0..2 {
            let (c, _) = ctx.best_of(center, &ring2);
            if c == center {
                break;
            }
            center = c;
        }
    }
    ctx.best_of(center, &RING8)
}

const LDSP: [(i64, i64); 8] = [
    (0, -2),
    (-1, -1),
    (1, -1),
    (-2, 0),
    (2, 0),
    (-1, 1),
    (1, 1),
    (0, 2),
];
const SDSP: [(i64, i64); 4] = [(0, -1), (-1, 0), (1, 0), (0, 1)];

fn search_ds(ctx: &mut BlockCtx) -> ((i64, i64), u64) {
    let mut center = (0i64, 0i64);
    loop {
        let (c, _) = ctx.best_of(center, &LDSP);
        if c == center {
            break;
        }
        // each move strictly improves the ordering key, so this terminates
        center = c;
    }
    ctx.best_of(center, &SDSP)
}

fn search_arps(ctx: &mut BlockCtx, predicted: (i64, i64)) -> ((i64, i64), u64) {
    let zero_cost = ctx.cost(0, 0).expect("zero vector");
    if zero_cost == 0 {
        return ((0, 0), 0); // zero-motion early exit
    }
    let gamma = predicted.0.abs().max(predicted.1.abs());
    let gamma = if gamma == 0 { 2 } else { gamma };
    let mut offsets: Vec<(i64, i64)> = vec![(gamma, 0), (-gamma, 0), (0, gamma), (0, -gamma)];
    if predicted != (0, 0) {
        offsets.push(predicted); // the rood is centered on (0,0); include the predictor point
    }
    let (mut center, _) = ctx.best_of((0, 0), &offsets);
    loop {
        let (c, cost) = ctx.best_of(center, &SDSP);
        if c == center {
            return (c, cost);
        }
        center = c;
    }
}

/// Finds, for every target block, the displacement into `reference` that the
/// chosen algorithm settles on. `eval_counts` records unique SAD evaluations.
pub fn block_search(
    reference: &Frame,
    target: &Frame,
    algorithm: Algorithm,
    mb: usize,
    p: usize,
) -> Result<MotionField> {
    if (reference.width, reference.height) != (target.width, target.height) {
        return Err(Error::shape(
            "block_search frames",
            format!("{}x{}", reference.width, reference.height),
            format!("{}x{}", target.width, target.height),
        ));
    }
    if mb > target.width || mb > target.height {
        return Err(Error::Size(format!(
            "macroblock {} larger than frame {}x{}",
            mb, target.width, target.height
        )));
    }
    assert!(p >= 1, "search range must be at least 1");
    let (w, h) = (target.width, target.height);
    let ref_luma = reference.luma()?;
    let tgt_luma = target.luma()?;

    let grid_w = w.div_ceil(mb);
    let grid_h = h.div_ceil(mb);

    // rows are independent; ARPS carries its left-neighbor predictor along a row
    let rows: Vec<Vec<((i32, i32), u64, u32)>> = (0..grid_h)
        .into_par_iter()
        .map(|by| {
            let mut row = Vec::with_capacity(grid_w);
            let mut left: (i64, i64) = (0, 0);
            for bx in 0..grid_w {
                let mut ctx =
                    BlockCtx::new(ref_luma, tgt_luma, w, h, bx * mb, by * mb, mb, p);
                let ((dx, dy), cost) = match algorithm {
                    Algorithm::Es => search_es(&mut ctx),
                    Algorithm::Tss => search_tss(&mut ctx),
                    Algorithm::Ntss => search_ntss(&mut ctx),
                    Algorithm::Ses => search_ses(&mut ctx),
                    Algorithm::Fss => search_fss(&mut ctx),
                    Algorithm::Ds => search_ds(&mut ctx),
                    Algorithm::Arps => {
                        let pred = if bx == 0 { (0, 0) } else { left };
                        search_arps(&mut ctx, pred)
                    }
                };
                left = (dx, dy);
                row.push(((dx as i32, dy as i32), cost, ctx.evals));
            }
            row
        })
        .collect();

    let mut field = MotionField::zero(w, h, mb);
    for (by, row) in rows.into_iter().enumerate() {
        for (bx, (v, cost, evals)) in row.into_iter().enumerate() {
            let i = by * grid_w + bx;
            field.vectors[i] = v;
            field.costs[i] = cost;
            field.eval_counts[i] = evals;
        }
    }
    Ok(field)
}

/// Copies each target block from the reference at its displaced location,
/// clamping reads to the frame bounds. All channels move together.
pub fn motion_compensate(reference: &Frame, field: &MotionField) -> Result<Frame> {
    let (w, h, ch) = (reference.width, reference.height, reference.channels);
    let mb_w = field.block_w;
    let mb_h = field.block_h;
    let mut out = vec![0u8; w * h * ch];
    for c in 0..ch {
        let plane = reference.plane(c)?;
        let out_plane = &mut out[c * w * h..(c + 1) * w * h];
        for by in 0..field.grid_h {
            for bx in 0..field.grid_w {
                let (dx, dy) = field.at(bx, by);
                let y0 = by * mb_h;
                let x0 = bx * mb_w;
                for j in 0..mb_h.min(h - y0) {
                    let sy = (y0 as i64 + dy as i64 + j as i64).clamp(0, h as i64 - 1) as usize;
                    for i in 0..mb_w.min(w - x0) {
                        let sx = (x0 as i64 + dx as i64 + i as i64).clamp(0, w as i64 - 1) as usize;
                        out_plane[(y0 + j) * w + x0 + i] = plane[sy * w + sx];
                    }
                }
            }
        }
    }
    Frame::from_bytes(w, h, ch, out)
}

/// Fine-grained exhaustive flow proxy: ES over 4x4 blocks.
pub fn dense_flow(prev: &Frame, next: &Frame, p: usize) -> Result<MotionField> {
    block_search(prev, next, Algorithm::Es, 4, p)
}
