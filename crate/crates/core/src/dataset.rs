//! Expert demonstration datasets and their binary file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "VIND" | version u32 | m u16 | n u16 | n_domains u32 | obstacle_fraction f32 | seed u64
//! per domain:
//!   obstacle bitmap, ceil(m*n/8) bytes, bit k (LSB first) = row-major cell k
//!   goal (u16, u16) | n_traj u16
//!   per trajectory: start (u16, u16) | len u16 | len action bytes
//! ```

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use crate::gridworld::{generate_map, sample_trajectory, shortest_paths, Action, GridMap, Pos};
use crate::rng::{derive_seed, Rng};
use crate::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"VIND";
pub const DATASET_VERSION: u32 = 1;

/// Seed stream reserved for held-out maps.
const HELD_OUT_STREAM: u64 = 0x4845_4c44_4f55_5400;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trajectory {
    pub start: Pos,
    pub actions: Vec<Action>,
}

impl Trajectory {
    /// `(state, action)` pairs along the trajectory.
    pub fn pairs<'a>(&'a self, map: &'a GridMap) -> impl Iterator<Item = (Pos, Action)> + 'a {
        let mut p = self.start;
        self.actions.iter().map(move |&a| {
            let here = p;
            p = map.neighbor(p, a).unwrap_or(p);
            (here, a)
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Domain {
    pub map: GridMap,
    pub trajectories: Vec<Trajectory>,
}

/// One supervised pair: the agent cell within a domain and the expert label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sample {
    pub domain: usize,
    pub state: Pos,
    pub label: Action,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub m: usize,
    pub n: usize,
    pub obstacle_fraction: f32,
    pub seed: u64,
    pub domains: Vec<Domain>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetConfig {
    pub m: usize,
    pub n: usize,
    pub n_domains: usize,
    pub n_traj: usize,
    pub obstacle_fraction: f64,
    pub seed: u64,
}

impl DatasetConfig {
    fn validate(&self) -> Result<()> {
        if self.n_domains == 0 || self.n_traj == 0 {
            return Err(Error::Config("domain and trajectory counts must be positive".into()));
        }
        if self.n_domains > u32::MAX as usize || self.n_traj > u16::MAX as usize {
            return Err(Error::Config(
                "domain or trajectory count too large for the file format".into(),
            ));
        }
        Ok(())
    }
}

impl Dataset {
    pub fn samples(&self) -> Vec<Sample> {
        self.domains
            .iter()
            .enumerate()
            .flat_map(|(d, dom)| {
                dom.trajectories.iter().flat_map(move |t| {
                    t.pairs(&dom.map).map(move |(state, label)| Sample {
                        domain: d,
                        state,
                        label,
                    })
                })
            })
            .collect()
    }

    /// Distinct `(domain, start)` pairs, in file order.
    pub fn starts(&self) -> Vec<(usize, Pos)> {
        self.domains
            .iter()
            .enumerate()
            .flat_map(|(d, dom)| dom.trajectories.iter().map(move |t| (d, t.start)))
            .collect()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&u16_of(self.m, "m")?.to_le_bytes());
        out.extend_from_slice(&u16_of(self.n, "n")?.to_le_bytes());
        let nd = u32::try_from(self.domains.len()).map_err(|_| Error::format("dataset", "too many domains"))?;
        out.extend_from_slice(&nd.to_le_bytes());
        out.extend_from_slice(&self.obstacle_fraction.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        let cells = self.m * self.n;
        for dom in &self.domains {
            if (dom.map.rows(), dom.map.cols()) != (self.m, self.n) {
                return Err(Error::format("dataset", "domain extents differ from header"));
            }
            let mut bits = vec![0u8; cells.div_ceil(8)];
            for (k, &o) in dom.map.obstacles().iter().enumerate() {
                if o {
                    bits[k / 8] |= 1 << (k % 8);
                }
            }
            out.extend_from_slice(&bits);
            put_pos(&mut out, dom.map.goal());
            out.extend_from_slice(&u16_of(dom.trajectories.len(), "trajectory count")?.to_le_bytes());
            for t in &dom.trajectories {
                put_pos(&mut out, t.start);
                out.extend_from_slice(&u16_of(t.actions.len(), "trajectory length")?.to_le_bytes());
                out.extend(t.actions.iter().map(|a| a.index() as u8));
            }
        }
        Ok(out)
    }

    /// Parses and validates a dataset: maps must be valid domains and every
    /// trajectory must be a legal path ending at its goal.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "dataset");
        if r.take(4)? != DATASET_MAGIC {
            return Err(Error::format("dataset", "bad magic"));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::format("dataset", format!("unsupported version {version}")));
        }
        let m = r.u16()? as usize;
        let n = r.u16()? as usize;
        let nd = r.u32()? as usize;
        let obstacle_fraction = f32::from_le_bytes(r.array()?);
        let seed = u64::from_le_bytes(r.array()?);
        if m == 0 || n == 0 {
            return Err(Error::format("dataset", "zero grid extent"));
        }
        let cells = m * n;
        let mut domains = Vec::with_capacity(nd.min(1 << 16));
        for d in 0..nd {
            let bits = r.take(cells.div_ceil(8))?;
            let obstacles = (0..cells).map(|k| bits[k / 8] >> (k % 8) & 1 == 1).collect();
            let goal = r.pos()?;
            let map = GridMap::new(m, n, obstacles, goal)
                .map_err(|e| Error::format("dataset", format!("domain {d}: {e}")))?;
            let nt = r.u16()? as usize;
            let mut trajectories = Vec::with_capacity(nt);
            for _ in 0..nt {
                let start = r.pos()?;
                let len = r.u16()? as usize;
                let actions = r
                    .take(len)?
                    .iter()
                    .map(|&b| Action::new(b as usize))
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| Error::format("dataset", format!("domain {d}: action code out of range")))?;
                let t = Trajectory { start, actions };
                check_trajectory(&map, &t)
                    .map_err(|reason| Error::format("dataset", format!("domain {d}: {reason}")))?;
                trajectories.push(t);
            }
            domains.push(Domain { map, trajectories });
        }
        if !r.done() {
            return Err(Error::format("dataset", "trailing bytes"));
        }
        Ok(Self {
            m,
            n,
            obstacle_fraction,
            seed,
            domains,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.encode()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }
}

fn check_trajectory(map: &GridMap, t: &Trajectory) -> std::result::Result<(), String> {
    if !map.is_free(t.start) {
        return Err(format!("start {:?} is not a free cell", t.start));
    }
    let mut p = t.start;
    for &a in &t.actions {
        p = map
            .legal_move(p, a)
            .ok_or_else(|| format!("illegal move {} at {p:?}", a.name()))?;
    }
    if p != map.goal() {
        return Err(format!("trajectory from {:?} does not end at the goal", t.start));
    }
    Ok(())
}

fn u16_of(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::format("dataset", format!("{what} {v} exceeds u16")))
}

fn put_pos(out: &mut Vec<u8>, p: Pos) {
    // extents are checked to fit u16 when the map is built
    out.extend_from_slice(&(p.i as u16).to_le_bytes());
    out.extend_from_slice(&(p.j as u16).to_le_bytes());
}

/// Little-endian cursor over a file image.
pub(crate) struct Reader<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) at: usize,
    pub(crate) what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Self { bytes, at: 0, what }
    }

    pub(crate) fn done(&self) -> bool {
        self.at == self.bytes.len()
    }

    pub(crate) fn take(&mut self, k: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(k).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.what, "truncated file"))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    pub(crate) fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn pos(&mut self) -> Result<Pos> {
        Ok(Pos::new(self.u16()? as usize, self.u16()? as usize))
    }
}

/// One domain from its own seed: a random map plus up to `n_traj` expert
/// trajectories from distinct reachable starts.
pub fn build_domain(m: usize, n: usize, obstacle_fraction: f64, n_traj: usize, seed: u64) -> Result<Domain> {
    let map = generate_map(m, n, obstacle_fraction, seed)?;
    let paths = shortest_paths(&map);
    let mut starts: Vec<Pos> = map
        .free_cells()
        .filter(|&p| p != map.goal() && paths.is_reachable(p))
        .collect();
    // the start draw uses its own stream so map layout and starts are independent
    let mut rng = Rng::new(derive_seed(seed, 1));
    rng.shuffle(&mut starts);
    starts.truncate(n_traj);
    let trajectories = starts
        .into_iter()
        .map(|start| {
            let pairs = sample_trajectory(&map, start, &paths)?;
            Ok(Trajectory {
                start,
                actions: pairs.into_iter().map(|(_, a)| a).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Domain { map, trajectories })
}

/// Training set: domain `d` is drawn from `derive_seed(seed, d)`.
pub fn build_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let domains = (0..cfg.n_domains)
        .map(|d| {
            build_domain(
                cfg.m,
                cfg.n,
                cfg.obstacle_fraction,
                cfg.n_traj,
                derive_seed(cfg.seed, d as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        m: cfg.m,
        n: cfg.n,
        obstacle_fraction: cfg.obstacle_fraction as f32,
        seed: cfg.seed,
        domains,
    })
}

/// Held-out set of `n_domains` maps from an independent seed stream. Any
/// map identical to a training map is skipped, so the split is disjoint.
pub fn build_held_out(cfg: &DatasetConfig, n_domains: usize, train: &Dataset) -> Result<Dataset> {
    let seed = derive_seed(cfg.seed, HELD_OUT_STREAM);
    let test_cfg = DatasetConfig {
        n_domains,
        seed,
        ..*cfg
    };
    test_cfg.validate()?;
    let seen: HashSet<&GridMap> = train.domains.iter().map(|d| &d.map).collect();
    let mut domains = Vec::with_capacity(n_domains);
    let mut stream = 0u64;
    while domains.len() < n_domains {
        let dom = build_domain(
            cfg.m,
            cfg.n,
            cfg.obstacle_fraction,
            cfg.n_traj,
            derive_seed(seed, stream),
        )?;
        stream += 1;
        if !seen.contains(&dom.map) {
            domains.push(dom);
        }
        if stream > 100 * n_domains as u64 + 1000 {
            return Err(Error::Config(
                "could not draw enough maps disjoint from the training set".into(),
            ));
        }
    }
    Ok(Dataset {
        m: cfg.m,
        n: cfg.n,
        obstacle_fraction: cfg.obstacle_fraction as f32,
        seed,
        domains,
    })
}

/// Keeps `ceil(fraction * n_domains)` whole domains chosen with `seed`,
/// in their original order.
pub fn subsample_dataset(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("data fraction {fraction} not in (0, 1]")));
    }
    let total = ds.domains.len();
    let keep = ((fraction * total as f64) - 1e-9).ceil().max(0.0) as usize;
    if keep == 0 {
        return Err(Error::Empty("subsampling kept no domains".into()));
    }
    let mut idx: Vec<usize> = (0..total).collect();
    Rng::new(seed).shuffle(&mut idx);
    idx.truncate(keep);
    idx.sort_unstable();
    Ok(Dataset {
        domains: idx.into_iter().map(|i| ds.domains[i].clone()).collect(),
        ..ds.clone_header()
    })
}

impl Dataset {
    fn clone_header(&self) -> Dataset {
        Dataset {
            m: self.m,
            n: self.n,
            obstacle_fraction: self.obstacle_fraction,
            seed: self.seed,
            domains: Vec::new(),
        }
    }
}
