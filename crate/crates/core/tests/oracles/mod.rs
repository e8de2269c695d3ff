//! Brute-force reference implementations, written independently of the library.
#![allow(dead_code)]

use std::collections::VecDeque;

/// Attention maps as nested vectors: `maps[token][layer][head][row][col]`.
pub type Maps = Vec<Vec<Vec<Vec<Vec<f64>>>>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleLocalization {
    pub bbox: OracleBox,
    /// (left, top, right, bottom) in each image.
    pub rect_a: (usize, usize, usize, usize),
    pub rect_b: (usize, usize, usize, usize),
}

pub fn oracle_reduce(maps: &Maps) -> Vec<Vec<f64>> {
    let n = maps.len();
    let (gh, gw) = (maps[0][0][0].len(), maps[0][0][0][0].len());
    let mut out = vec![vec![0.0; gw]; gh];
    for r in 0..gh {
        for c in 0..gw {
            let mut total = 0.0;
            for token in maps {
                let count = (token.len() * token[0].len()) as f64;
                let mut s = 0.0;
                for layer in token {
                    for head in layer {
                        s += head[r][c];
                    }
                }
                total += s / count;
            }
            out[r][c] = total / n as f64;
        }
    }
    out
}

pub fn oracle_normalize(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let flat: Vec<f64> = m.iter().flatten().copied().collect();
    let lo = flat.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = flat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m.iter()
        .map(|row| {
            row.iter()
                .map(|&v| if hi > lo { (255.0 * (v - lo) / (hi - lo)).round() } else { 0.0 })
                .collect()
        })
        .collect()
}

/// Percentile by full sort and linear interpolation between neighbours.
pub fn oracle_percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = p / 100.0 * (v.len() as f64 - 1.0);
    let i = pos.floor() as usize;
    if i + 1 >= v.len() {
        return v[v.len() - 1];
    }
    v[i] + (pos - i as f64) * (v[i + 1] - v[i])
}

/// Breadth-first flood fill; components as cell lists in discovery order.
pub fn oracle_components(mask: &[Vec<bool>]) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = (mask.len(), mask[0].len());
    let mut label = vec![vec![usize::MAX; w]; h];
    let mut comps = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask[r][c] || label[r][c] != usize::MAX {
                continue;
            }
            let id = comps.len();
            let mut cells = Vec::new();
            let mut queue = VecDeque::from([(r, c)]);
            label[r][c] = id;
            while let Some((y, x)) = queue.pop_front() {
                cells.push((y, x));
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask[ny][nx] && label[ny][nx] == usize::MAX {
                            label[ny][nx] = id;
                            queue.push_back((ny, nx));
                        }
                    }
                }
            }
            comps.push(cells);
        }
    }
    comps
}

pub fn oracle_localize(
    maps: &Maps,
    percentile: f64,
    kernel: usize,
    size_a: (usize, usize),
    size_b: (usize, usize),
) -> Option<OracleLocalization> {
    let norm = oracle_normalize(&oracle_reduce(maps));
    let (gh, gw) = (norm.len(), norm[0].len());
    let flat: Vec<f64> = norm.iter().flatten().copied().collect();
    let tau = oracle_percentile(&flat, percentile);
    let mask: Vec<Vec<bool>> = norm.iter().map(|row| row.iter().map(|&v| v >= tau).collect()).collect();

    // largest area; ties broken by the smallest (row, col) cell of the component
    let mut best: Option<(usize, (usize, usize), Vec<(usize, usize)>)> = None;
    for cells in oracle_components(&mask) {
        let seed = *cells.iter().min().unwrap();
        let better = match &best {
            None => true,
            Some((area, s, _)) => cells.len() > *area || (cells.len() == *area && seed < *s),
        };
        if better {
            best = Some((cells.len(), seed, cells));
        }
    }
    let (_, _, cells) = best?;

    // a cell is in the dilation when some component cell lies within the kernel radius
    let r = (kernel / 2) as i64;
    let mut top = usize::MAX;
    let mut left = usize::MAX;
    let mut bottom = 0;
    let mut right = 0;
    for y in 0..gh {
        for x in 0..gw {
            let hit = cells
                .iter()
                .any(|&(cy, cx)| (cy as i64 - y as i64).abs() <= r && (cx as i64 - x as i64).abs() <= r);
            if hit {
                top = top.min(y);
                left = left.min(x);
                bottom = bottom.max(y);
                right = right.max(x);
            }
        }
    }
    let bbox = OracleBox {
        x: left,
        y: top,
        w: right - left + 1,
        h: bottom - top + 1,
    };
    // scale before dividing so exact quotients stay exact in f64
    let rect = |(w, h): (usize, usize)| {
        let sx = |v: usize| (v * w) as f64 / gw as f64;
        let sy = |v: usize| (v * h) as f64 / gh as f64;
        (
            (sx(bbox.x).floor() as usize).min(w),
            (sy(bbox.y).floor() as usize).min(h),
            (sx(bbox.x + bbox.w).ceil() as usize).min(w),
            (sy(bbox.y + bbox.h).ceil() as usize).min(h),
        )
    };
    let rect_a = rect(size_a);
    let rect_b = rect(size_b);
    if rect_a.0 == rect_a.2 || rect_a.1 == rect_a.3 || rect_b.0 == rect_b.2 || rect_b.1 == rect_b.3 {
        return None;
    }
    Some(OracleLocalization { bbox, rect_a, rect_b })
}

/// Flattens nested maps into the library's `[token][layer][head][row][col]` layout.
pub fn flatten(maps: &Maps) -> Vec<f64> {
    maps.iter().flatten().flatten().flatten().flatten().copied().collect()
}

/// Levenshtein distance from a complete (m+1)×(n+1) table.
pub fn oracle_levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (m, n) = (a.len(), b.len());
    let mut d = vec![vec![0usize; n + 1]; m + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=n {
        d[0][j] = j;
    }
    for i in 1..=m {
        for j in 1..=n {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[m][n]
}

/// LCS length from a complete table.
pub fn oracle_lcs<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t[a.len()][b.len()]
}

/// ROUGE-L F1 × 100 from the LCS table.
pub fn oracle_rouge_l<T: PartialEq>(cand: &[T], refr: &[T]) -> f64 {
    let l = oracle_lcs(cand, refr) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / cand.len() as f64;
    let r = l / refr.len() as f64;
    100.0 * 2.0 * p * r / (p + r)
}

/// One randomized localization case.
#[derive(Debug, Clone)]
pub struct StackCase {
    pub maps: Maps,
    pub percentile: f64,
    pub kernel: usize,
    pub size_a: (usize, usize),
    pub size_b: (usize, usize),
}

/// Grids up to 32×32 and up to 4 tokens, layers and heads. Value patterns mix
/// continuous noise, heavy ties, constant stacks and sparse peaks.
pub fn random_case(rng: &mut impl rand::Rng) -> StackCase {
    let gh = rng.random_range(1..=32);
    let gw = rng.random_range(1..=32);
    let (nt, nl, nh) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
    let pattern = rng.random_range(0..4);
    let constant: f64 = rng.random();
    let mut maps: Maps = Vec::with_capacity(nt);
    for _ in 0..nt {
        let mut token = Vec::with_capacity(nl);
        for _ in 0..nl {
            let mut layer = Vec::with_capacity(nh);
            for _ in 0..nh {
                let mut grid = vec![vec![0.0; gw]; gh];
                for cell in grid.iter_mut().flatten() {
                    *cell = match pattern {
                        0 => rng.random::<f64>(),
                        1 => rng.random_range(0..3) as f64,
                        2 => constant,
                        _ if rng.random_bool(0.05) => rng.random_range(1.0..10.0),
                        _ => 0.0,
                    };
                }
                layer.push(grid);
            }
            token.push(layer);
        }
        maps.push(token);
    }
    let percentile = match rng.random_range(0..4) {
        0 => 75.0,
        1 => 90.0,
        2 => 95.0,
        _ => rng.random_range(0.0..=100.0),
    };
    StackCase {
        maps,
        percentile,
        kernel: [1, 3, 5][rng.random_range(0..3)],
        size_a: (rng.random_range(1..=300), rng.random_range(1..=300)),
        size_b: (rng.random_range(1..=300), rng.random_range(1..=300)),
    }
}

fn count_in<T: PartialEq>(grams: &[&[T]], g: &[T]) -> usize {
    grams.iter().filter(|x| **x == g).count()
}

/// Clipped n-gram matches counted by linear scans.
fn oracle_matches<T: PartialEq>(cand: &[T], refr: &[T], n: usize) -> (usize, usize, usize) {
    let cg: Vec<&[T]> = if cand.len() >= n { cand.windows(n).collect() } else { Vec::new() };
    let rg: Vec<&[T]> = if refr.len() >= n { refr.windows(n).collect() } else { Vec::new() };
    let mut seen: Vec<&[T]> = Vec::new();
    let mut matches = 0;
    for g in &cg {
        if seen.contains(g) {
            continue;
        }
        seen.push(g);
        matches += count_in(&cg, g).min(count_in(&rg, g));
    }
    (matches, cg.len(), rg.len())
}

pub fn oracle_rouge_n<T: PartialEq>(cand: &[T], refr: &[T], n: usize) -> f64 {
    let (m, c, r) = oracle_matches(cand, refr, n);
    if m == 0 {
        return 0.0;
    }
    let (p, rc) = (m as f64 / c as f64, m as f64 / r as f64);
    100.0 * 2.0 * p * rc / (p + rc)
}

/// BLEU-4, single reference, `1/(2·count)` smoothing above unigrams.
pub fn oracle_bleu4<T: PartialEq>(cand: &[T], refr: &[T]) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let mut product = 1.0;
    for n in 1..=4 {
        let (m, c, _) = oracle_matches(cand, refr, n);
        let p = if m > 0 {
            m as f64 / c as f64
        } else if n == 1 {
            return 0.0;
        } else {
            0.5 / c.max(1) as f64
        };
        product *= p;
    }
    let bp = if cand.len() >= refr.len() {
        1.0
    } else {
        (1.0 - refr.len() as f64 / cand.len() as f64).exp()
    };
    100.0 * bp * product.powf(0.25)
}
