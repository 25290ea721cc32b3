//! Reference implementations and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use reftrack_core::tracker::TrackingResult;
use reftrack_core::{BBox, ImageDims};

/// Plain-arithmetic IoU, written independently of the library.
pub fn ref_iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2().min(b.x2()) - a.x1().max(b.x1())).max(0.0);
    let iy = (a.y2().min(b.y2()) - a.y1().max(b.y1())).max(0.0);
    let inter = ix * iy;
    let union = (a.x2() - a.x1()) * (a.y2() - a.y1()) + (b.x2() - b.x1()) * (b.y2() - b.y1()) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Every injective partial map from rows to columns, as `(row, col)` lists.
pub fn partial_matchings(rows: usize, cols: usize) -> Vec<Vec<(usize, usize)>> {
    fn go(r: usize, rows: usize, cols: usize, used: &mut Vec<bool>, cur: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
        if r == rows {
            out.push(cur.clone());
            return;
        }
        go(r + 1, rows, cols, used, cur, out);
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                cur.push((r, c));
                go(r + 1, rows, cols, used, cur, out);
                cur.pop();
                used[c] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(0, rows, cols, &mut vec![false; cols], &mut Vec::new(), &mut out);
    out
}

/// Minimum total cost over all complete assignments of the smaller side.
/// Each candidate is summed in row order.
pub fn brute_force_min_cost(cost: &[Vec<f64>]) -> f64 {
    fn go(k: usize, n_small: usize, n_large: usize, used: &mut [bool], cur: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize])) {
        if k == n_small {
            visit(cur);
            return;
        }
        for c in 0..n_large {
            if !used[c] {
                used[c] = true;
                cur.push(c);
                go(k + 1, n_small, n_large, used, cur, visit);
                cur.pop();
                used[c] = false;
            }
        }
    }
    let rows = cost.len();
    let cols = if rows == 0 { 0 } else { cost[0].len() };
    let mut best = f64::INFINITY;
    if rows <= cols {
        go(0, rows, cols, &mut vec![false; cols], &mut Vec::new(), &mut |perm| {
            best = best.min(perm.iter().enumerate().map(|(r, &c)| cost[r][c]).sum::<f64>());
        });
    } else {
        go(0, cols, rows, &mut vec![false; rows], &mut Vec::new(), &mut |perm| {
            let mut pairs: Vec<(usize, usize)> = perm.iter().enumerate().map(|(c, &r)| (r, c)).collect();
            pairs.sort();
            best = best.min(pairs.iter().map(|&(r, c)| cost[r][c]).sum::<f64>());
        });
    }
    best
}

/// Maximum summed IoU over injective matchings that only use pairs with
/// IoU >= tau.
pub fn brute_force_gated_iou(dets: &[BBox], gts: &[BBox], tau: f64) -> f64 {
    partial_matchings(dets.len(), gts.len())
        .into_iter()
        .filter_map(|m| {
            let ious: Vec<f64> = m.iter().map(|&(d, g)| ref_iou(&dets[d], &gts[g])).collect();
            ious.iter().all(|&v| v >= tau).then(|| ious.iter().sum::<f64>())
        })
        .fold(0.0, f64::max)
}

/// `(DetA, AssA)` at `alpha`, by exhaustive per-frame matching and explicit
/// per-TP association sets.
pub fn reference_det_ass(pred: &TrackingResult, gt: &TrackingResult, alpha: f64) -> (f64, f64) {
    let frames: Vec<u32> = (1..=gt.frame_count).collect();
    let mut potential: BTreeMap<(u64, u64), f64> = BTreeMap::new();
    let mut gt_count: BTreeMap<u64, f64> = BTreeMap::new();
    let mut pr_count: BTreeMap<u64, f64> = BTreeMap::new();
    for &f in &frames {
        let g = gt.boxes(f);
        let p = pred.boxes(f);
        for a in g {
            *gt_count.entry(a.id).or_default() += 1.0;
        }
        for b in p {
            *pr_count.entry(b.id).or_default() += 1.0;
        }
        for a in g {
            for b in p {
                let s = ref_iou(&a.bbox, &b.bbox);
                let row: f64 = p.iter().map(|x| ref_iou(&a.bbox, &x.bbox)).sum();
                let col: f64 = g.iter().map(|x| ref_iou(&x.bbox, &b.bbox)).sum();
                let den = row + col - s;
                if den > f64::EPSILON {
                    *potential.entry((a.id, b.id)).or_default() += s / den;
                }
            }
        }
    }
    let align = |gid: u64, pid: u64| {
        let pot = potential.get(&(gid, pid)).copied().unwrap_or(0.0);
        let den = gt_count[&gid] + pr_count[&pid] - pot;
        if den > 0.0 {
            pot / den
        } else {
            0.0
        }
    };

    let mut tps: Vec<(u64, u64)> = Vec::new();
    let (mut n_gt, mut n_pr) = (0.0, 0.0);
    for &f in &frames {
        let g = gt.boxes(f);
        let p = pred.boxes(f);
        n_gt += g.len() as f64;
        n_pr += p.len() as f64;
        let mut best: Option<(f64, Vec<(usize, usize)>)> = None;
        for m in partial_matchings(g.len(), p.len()) {
            let score: f64 = m.iter().map(|&(i, j)| align(g[i].id, p[j].id) * ref_iou(&g[i].bbox, &p[j].bbox)).sum();
            if best.as_ref().map_or(true, |(b, _)| score > *b + 1e-12) {
                best = Some((score, m));
            }
        }
        if let Some((_, m)) = best {
            for (i, j) in m {
                let s = ref_iou(&g[i].bbox, &p[j].bbox);
                if s > 0.0 && s >= alpha - f64::EPSILON {
                    tps.push((g[i].id, p[j].id));
                }
            }
        }
    }
    let tp = tps.len() as f64;
    let det_a = if tp > 0.0 { tp / (n_gt + n_pr - tp) } else { 0.0 };
    let mut ass_sum = 0.0;
    for &(gid, pid) in &tps {
        let tpa = tps.iter().filter(|&&x| x == (gid, pid)).count() as f64;
        let fna = gt_count[&gid] - tpa;
        let fpa = pr_count[&pid] - tpa;
        ass_sum += tpa / (tpa + fna + fpa);
    }
    let ass_a = if tp > 0.0 { ass_sum / tp } else { 0.0 };
    (det_a, ass_a)
}

/// Up to 3 gt and 3 predicted tracks over up to 8 frames, boxes packed into a
/// small area so overlaps are common.
pub fn micro_instance(rng: &mut ChaCha8Rng) -> (TrackingResult, TrackingResult) {
    let frames = rng.random_range(1..=8u32);
    let dims = ImageDims::new(64, 64).unwrap();
    let mut gt = TrackingResult::new("m", frames, dims);
    let mut pred = TrackingResult::new("m", frames, dims);
    let n_gt = rng.random_range(1..=3u64);
    let n_pr = rng.random_range(0..=3u64);
    let random_box = |rng: &mut ChaCha8Rng| {
        let x = rng.random_range(0.0..30.0);
        let y = rng.random_range(0.0..30.0);
        BBox::from_xywh(x, y, rng.random_range(5.0..25.0), rng.random_range(5.0..25.0)).unwrap()
    };
    for f in 1..=frames {
        let mut gboxes = Vec::new();
        for id in 1..=n_gt {
            if rng.random_bool(0.8) {
                let b = random_box(rng);
                gt.push(f, id, b);
                gboxes.push(b);
            }
        }
        for id in 1..=n_pr {
            if !rng.random_bool(0.8) {
                continue;
            }
            // mostly near a gt box, sometimes anywhere
            let b = match gboxes.get(rng.random_range(0..gboxes.len().max(1))) {
                Some(g) if rng.random_bool(0.7) => {
                    let dx = rng.random_range(-4.0..4.0);
                    let dy = rng.random_range(-4.0..4.0);
                    BBox::new(g.x1() + dx, g.y1() + dy, g.x2() + dx, g.y2() + dy).unwrap()
                }
                _ => random_box(rng),
            };
            pred.push(f, 10 + id, b);
        }
    }
    (pred, gt)
}

pub struct MockRequest {
    pub path: String,
    pub body: String,
}

/// Minimal HTTP/1.1 server on an ephemeral port. Each connection gets one
/// response produced by `respond(path, body) -> (status, body)`.
pub struct MockServer {
    pub url: String,
    pub requests: Arc<Mutex<Vec<MockRequest>>>,
}

impl MockServer {
    pub fn start<F>(respond: F) -> Self
    where
        F: Fn(&str, &str) -> (u16, String) + Send + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&requests);
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut line = String::new();
                if reader.read_line(&mut line).is_err() {
                    continue;
                }
                let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
                let mut length = 0usize;
                loop {
                    let mut h = String::new();
                    if reader.read_line(&mut h).unwrap_or(0) == 0 || h == "\r\n" {
                        break;
                    }
                    let lower = h.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        length = v.trim().parse().unwrap_or(0);
                    }
                }
                let mut body = vec![0u8; length];
                let _ = reader.read_exact(&mut body);
                let body = String::from_utf8_lossy(&body).into_owned();
                let (status, reply) = respond(&path, &body);
                log.lock().unwrap().push(MockRequest { path, body });
                let head = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                    reply.len()
                );
                let _ = stream.write_all(head.as_bytes());
                let _ = stream.write_all(reply.as_bytes());
                let _ = stream.flush();
            }
        });
        Self { url, requests }
    }

    pub fn request_count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }
}
