//! Plain binary PGM/PPM images of learned fields and rollouts.

use vinlab_tensor::{Real, Tape, Tensor};

use crate::gridworld::{GridMap, Pos};
use crate::models::ModelWeights;
use crate::{Error, Result};

pub const BLACK: [u8; 3] = [0, 0, 0];
pub const WHITE: [u8; 3] = [255, 255, 255];
pub const GREEN: [u8; 3] = [0, 255, 0];
pub const BLUE: [u8; 3] = [0, 0, 255];
pub const PURPLE: [u8; 3] = [128, 0, 128];

/// Reward and value fields of a planner on one map, each `[m, n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Fields<T: Real> {
    pub reward: Tensor<T>,
    pub value: Tensor<T>,
}

/// The learned reward map and the value after the last VI iteration. For the
/// hierarchical model both come from the full-resolution level.
pub fn planner_fields<T: Real>(weights: &ModelWeights<T>, map: &GridMap) -> Result<Fields<T>> {
    let cfg = weights.config();
    if !cfg.family.is_planner() {
        return Err(Error::Config(format!("{} has no reward or value field", cfg.family)));
    }
    if (cfg.m, cfg.n) != (map.rows(), map.cols()) {
        return Err(Error::Config(format!(
            "model expects {}x{} maps, got {}x{}",
            cfg.m,
            cfg.n,
            map.rows(),
            map.cols()
        )));
    }
    let mut tape = Tape::new();
    let net = weights.bind(&mut tape)?;
    let q = net.plan(&mut tape, &map.image())?;
    let v = tape.channel_max(q)?;
    let x = tape.input(map.image())?;
    let r = net.reward_map(&mut tape, x, "")?;
    let flat = |t: &Tensor<T>| t.clone().reshape(&[cfg.m, cfg.n]);
    Ok(Fields {
        reward: flat(tape.value(r))?,
        value: flat(tape.value(v))?,
    })
}

/// 8-bit grayscale P5 image of an `[m, n]` (or `[1, m, n]`) field, scaled so
/// the minimum maps to 0 and the maximum to 255. A constant field is black.
pub fn pgm<T: Real>(field: &Tensor<T>) -> Result<Vec<u8>> {
    let (m, n) = match field.shape() {
        [m, n] | [1, m, n] => (*m, *n),
        s => return Err(Error::Config(format!("cannot draw a field of shape {s:?}"))),
    };
    if !field.is_finite() {
        return Err(Error::Config("field has non-finite values".into()));
    }
    let vals: Vec<f64> = field.data().iter().map(|v| v.as_f64()).collect();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{n} {m}\n255\n").into_bytes();
    out.extend(vals.iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

/// P6 render of a map: obstacles black, free cells white, the optimal path
/// blue with the predicted path purple on top, and the goal green. Each cell
/// becomes a `scale x scale` block.
pub fn ppm_paths(map: &GridMap, optimal: &[Pos], predicted: &[Pos], scale: usize) -> Result<Vec<u8>> {
    if scale == 0 {
        return Err(Error::Config("image scale must be positive".into()));
    }
    let mut cells: Vec<[u8; 3]> = (0..map.rows() * map.cols())
        .map(|c| if map.is_obstacle(map.pos(c)) { BLACK } else { WHITE })
        .collect();
    for (path, color) in [(optimal, BLUE), (predicted, PURPLE)] {
        for &p in path {
            if !map.in_bounds(p) {
                return Err(Error::Config(format!("path cell {p:?} outside the map")));
            }
            cells[map.cell(p)] = color;
        }
    }
    cells[map.cell(map.goal())] = GREEN;
    let (h, w) = (map.rows() * scale, map.cols() * scale);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            out.extend_from_slice(&cells[(y / scale) * map.cols() + x / scale]);
        }
    }
    Ok(out)
}

/// Parsed header and pixel bytes of a binary PGM/PPM written by this module.
pub fn parse_pnm(bytes: &[u8]) -> Result<(String, usize, usize, &[u8])> {
    let bad = |r: &str| Error::format("image", r);
    let mut fields = Vec::new();
    let mut at = 0;
    while fields.len() < 4 {
        while at < bytes.len() && bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..at]).map_err(|_| bad("header is not ASCII"))?);
        at += 1;
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h) = (num(fields[1])?, num(fields[2])?);
    let depth = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(bad("unknown magic")),
    };
    let pixels = bytes.get(at..).ok_or_else(|| bad("missing pixels"))?;
    if pixels.len() != w * h * depth {
        return Err(bad("pixel count does not match header"));
    }
    Ok((fields[0].to_string(), w, h, pixels))
}
