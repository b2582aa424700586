//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::{HashMap, VecDeque};

use groundkie::geometry::{PixelPolygon, Point};
use groundkie::metrics::AnswerTree;
use rand::Rng;

// ---------------------------------------------------------------------------
// Trees: exhaustive enumeration and breadth-first edit-script search.

#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct T {
    pub label: u8,
    pub kids: Vec<T>,
}

pub type Forest = Vec<T>;

fn size(f: &[T]) -> usize {
    f.iter().map(|t| 1 + size(&t.kids)).sum()
}

/// Every ordered forest with exactly `n` nodes over labels `0..labels`.
pub fn forests(n: usize, labels: u8) -> Vec<Forest> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    // first tree takes k nodes (1 root + k-1 below), the rest form a forest
    for k in 1..=n {
        for kids in forests(k - 1, labels) {
            for rest in forests(n - k, labels) {
                for l in 0..labels {
                    let mut f = vec![T {
                        label: l,
                        kids: kids.clone(),
                    }];
                    f.extend(rest.iter().cloned());
                    out.push(f);
                }
            }
        }
    }
    out
}

/// Every ordered tree with `1..=max` nodes.
pub fn all_trees(max: usize, labels: u8) -> Vec<T> {
    (1..=max)
        .flat_map(|n| forests(n, labels))
        .filter(|f| f.len() == 1)
        .map(|mut f| f.pop().unwrap())
        .collect()
}

pub fn to_answer_tree(t: &T) -> AnswerTree {
    AnswerTree::node(
        ((b'a' + t.label) as char).to_string(),
        t.kids.iter().map(to_answer_tree).collect(),
    )
}

/// All forests one edit away, restricted to at most `cap` nodes.
fn neighbours(f: &Forest, labels: u8, cap: usize) -> Vec<Forest> {
    let mut out = Vec::new();
    edits_in(f, labels, &mut |g| out.push(g));
    if size(f) < cap {
        inserts_in(f, labels, &mut |g| out.push(g));
    }
    out
}

/// Relabels and deletions anywhere in the forest.
fn edits_in(f: &Forest, labels: u8, emit: &mut dyn FnMut(Forest)) {
    for i in 0..f.len() {
        // relabel node i
        for l in 0..labels {
            if l != f[i].label {
                let mut g = f.clone();
                g[i].label = l;
                emit(g);
            }
        }
        // delete node i, splicing its children in its place
        let mut g = f[..i].to_vec();
        g.extend(f[i].kids.iter().cloned());
        g.extend(f[i + 1..].iter().cloned());
        emit(g);
        // edits below node i
        edits_in(&f[i].kids, labels, &mut |kids| {
            let mut g = f.clone();
            g[i].kids = kids;
            emit(g);
        });
    }
}

/// Insertions: a new node adopting a contiguous run of siblings, at any
/// level.
fn inserts_in(f: &Forest, labels: u8, emit: &mut dyn FnMut(Forest)) {
    for a in 0..=f.len() {
        for b in a..=f.len() {
            for l in 0..labels {
                let mut g = f[..a].to_vec();
                g.push(T {
                    label: l,
                    kids: f[a..b].to_vec(),
                });
                g.extend(f[b..].iter().cloned());
                emit(g);
            }
        }
    }
    for i in 0..f.len() {
        inserts_in(&f[i].kids, labels, &mut |kids| {
            let mut g = f.clone();
            g[i].kids = kids;
            emit(g);
        });
    }
}

/// Unit-cost edit distances from `src` to every forest reachable without
/// exceeding `cap` nodes.
pub fn bfs_distances(src: &T, labels: u8, cap: usize) -> HashMap<Forest, usize> {
    let start = vec![src.clone()];
    let mut dist = HashMap::from([(start.clone(), 0)]);
    let mut queue = VecDeque::from([start]);
    while let Some(f) = queue.pop_front() {
        let d = dist[&f];
        for g in neighbours(&f, labels, cap) {
            if !dist.contains_key(&g) {
                dist.insert(g.clone(), d + 1);
                queue.push_back(g);
            }
        }
    }
    dist
}

// ---------------------------------------------------------------------------
// Strings.

/// Textbook full-matrix Levenshtein distance.
pub fn edit_distance_dp(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

pub fn anls_oracle(pred: &str, gold: &str) -> f64 {
    let (p, g) = (pred.to_lowercase(), gold.to_lowercase());
    let longest = p.chars().count().max(g.chars().count());
    if longest == 0 {
        return 1.0;
    }
    let nl = edit_distance_dp(&p, &g) as f64 / longest as f64;
    if nl < 0.5 {
        1.0 - nl
    } else {
        0.0
    }
}

pub fn random_string<R: Rng>(rng: &mut R, alphabet: &[char], max: usize) -> String {
    let n = rng.gen_range(0..=max);
    (0..n).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect()
}

// ---------------------------------------------------------------------------
// Polygons.

/// Random convex quadrilateral inside `[0, span]²`: four angles on an
/// ellipse-ish curve, one per quadrant, then a shear.
pub fn random_convex<R: Rng>(rng: &mut R, span: f64) -> [Point; 4] {
    let mut angles: Vec<f64> = (0..4)
        .map(|q| (q as f64 + rng.gen_range(0.1..0.9)) * std::f64::consts::FRAC_PI_2)
        .collect();
    angles.sort_by(f64::total_cmp);
    let r = rng.gen_range(0.08..0.25) * span;
    let (cx, cy) = (rng.gen_range(0.3..0.7) * span, rng.gen_range(0.3..0.7) * span);
    let (sx, sy, sh) = (
        rng.gen_range(0.6..1.4),
        rng.gen_range(0.6..1.4),
        rng.gen_range(-0.3..0.3),
    );
    let pts: Vec<Point> = angles
        .iter()
        .map(|t| {
            let (u, v) = (r * t.cos(), r * t.sin());
            Point::new(cx + sx * u + sh * v, cy + sy * v)
        })
        .collect();
    [pts[0], pts[1], pts[2], pts[3]]
}

/// x-extent of a convex polygon along the horizontal line at `y`.
fn span_at(pts: &[Point; 4], y: f64) -> Option<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for k in 0..4 {
        let (a, b) = (pts[k], pts[(k + 1) % 4]);
        if (a.y <= y && y <= b.y) || (b.y <= y && y <= a.y) {
            let x = if (b.y - a.y).abs() < 1e-15 {
                lo = lo.min(a.x.min(b.x));
                hi = hi.max(a.x.max(b.x));
                continue;
            } else {
                a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y)
            };
            lo = lo.min(x);
            hi = hi.max(x);
        }
    }
    (lo <= hi).then_some((lo, hi))
}

/// Pixel centers `x0 + (i + 0.5) * step` inside `[lo, hi]`.
fn centers_in(lo: f64, hi: f64, x0: f64, step: f64, n: usize) -> i64 {
    if hi < lo {
        return 0;
    }
    let first = ((lo - x0) / step - 0.5).ceil().max(0.0) as i64;
    let last = (((hi - x0) / step - 0.5).floor() as i64).min(n as i64 - 1);
    (last - first + 1).max(0)
}

/// IoU by counting the centers of an `n × n` pixel grid laid over the
/// union's bounding box that fall in each polygon.
pub fn raster_iou(a: &PixelPolygon, b: &PixelPolygon, n: usize) -> f64 {
    let (pa, pb) = (a.points(), b.points());
    let all = pa.iter().chain(pb.iter());
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in all {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    let (sx, sy) = ((x1 - x0) / n as f64, (y1 - y0) / n as f64);
    let (mut inter, mut ca, mut cb) = (0i64, 0i64, 0i64);
    for j in 0..n {
        let y = y0 + (j as f64 + 0.5) * sy;
        let ra = span_at(pa, y);
        let rb = span_at(pb, y);
        if let Some((l, h)) = ra {
            ca += centers_in(l, h, x0, sx, n);
        }
        if let Some((l, h)) = rb {
            cb += centers_in(l, h, x0, sx, n);
        }
        if let (Some((la, ha)), Some((lb, hb))) = (ra, rb) {
            inter += centers_in(la.max(lb), ha.min(hb), x0, sx, n);
        }
    }
    let union = ca + cb - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}
