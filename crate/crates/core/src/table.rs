//! Plain-text format for tabulated homogenized models.
//!
//! ```text
//! homogenized-table v1
//! dim_slow <m>
//! dim_obs <d>
//! interpolation <nearest|multilinear>
//! axis <lo> <hi> <count>                       (one line per slow dimension)
//! averager <burn_in> <sample_horizon> <dt> <replicates>
//! root_seed <u64>
//! nodes <count>
//! node <drift[m]> <diffsq[m*m]> <diff[m*m]> <obs[d]> <drift_se[m]> <diffsq_se[m*m]> <obs_se[d]>
//! ```
//!
//! Node lines follow the grid's row-major order (last axis fastest), matrices
//! are row-major, and floats are written in Rust's shortest round-trip form so
//! a reloaded table answers every query bit-identically. Lines starting with
//! `#` are comments.

use std::fmt::Write as _;

use crate::averaging::{GridAxis, HomogenizedModel, Interpolation, NodeValues, StationaryAverager, TabulationGrid, Table};
use crate::error::{Error, Result};

const MAGIC: &str = "homogenized-table v1";

fn push_values(line: &mut String, values: &[f64]) {
    for v in values {
        let _ = write!(line, " {v:?}");
    }
}

pub fn write_table(model: &HomogenizedModel) -> Result<String> {
    let table = model
        .table()
        .ok_or_else(|| Error::invalid("model", "only tabulated models can be written"))?;
    Ok(render(model.dim_slow(), model.dim_obs(), table))
}

pub fn render(dim_slow: usize, dim_obs: usize, table: &Table) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{MAGIC}");
    let _ = writeln!(s, "dim_slow {dim_slow}");
    let _ = writeln!(s, "dim_obs {dim_obs}");
    let _ = writeln!(s, "interpolation {}", table.grid.interpolation.as_str());
    for a in &table.grid.axes {
        let _ = writeln!(s, "axis {:?} {:?} {}", a.lo, a.hi, a.count);
    }
    let c = &table.averager;
    let _ = writeln!(
        s,
        "averager {:?} {:?} {:?} {}",
        c.burn_in, c.sample_horizon, c.dt, c.replicates
    );
    let _ = writeln!(s, "root_seed {}", table.root_seed);
    let _ = writeln!(s, "nodes {}", table.nodes.len());
    for n in &table.nodes {
        let mut line = String::from("node");
        for part in [&n.drift, &n.diffsq, &n.diff, &n.obs, &n.drift_se, &n.diffsq_se, &n.obs_se] {
            push_values(&mut line, part);
        }
        s.push_str(&line);
        s.push('\n');
    }
    s
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next_line(&mut self) -> Result<(usize, &'a str)> {
        loop {
            match self.inner.next() {
                Some((i, l)) => {
                    let t = l.trim();
                    if t.is_empty() || t.starts_with('#') {
                        continue;
                    }
                    return Ok((i + 1, t));
                }
                None => {
                    return Err(Error::Parse {
                        line: 0,
                        msg: "unexpected end of table".into(),
                    })
                }
            }
        }
    }

    fn keyed(&mut self, key: &str) -> Result<(usize, Vec<&'a str>)> {
        let (line, text) = self.next_line()?;
        let mut tokens = text.split_whitespace();
        match tokens.next() {
            Some(k) if k == key => Ok((line, tokens.collect())),
            other => Err(Error::Parse {
                line,
                msg: format!("expected `{key}`, found `{}`", other.unwrap_or("")),
            }),
        }
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, tok: &str) -> Result<T> {
    tok.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("invalid number `{tok}`"),
    })
}

fn single<T: std::str::FromStr>(line: usize, toks: &[&str]) -> Result<T> {
    match toks {
        [t] => parse_num(line, t),
        _ => Err(Error::Parse {
            line,
            msg: format!("expected one value, found {}", toks.len()),
        }),
    }
}

pub fn parse_table(text: &str) -> Result<HomogenizedModel> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
    };
    let (line, header) = lines.next_line()?;
    if header != MAGIC {
        return Err(Error::Parse {
            line,
            msg: format!("expected header `{MAGIC}`"),
        });
    }
    let (l, t) = lines.keyed("dim_slow")?;
    let m: usize = single(l, &t)?;
    let (l, t) = lines.keyed("dim_obs")?;
    let d: usize = single(l, &t)?;
    let (l, t) = lines.keyed("interpolation")?;
    let interpolation = match t.as_slice() {
        ["nearest"] => Interpolation::Nearest,
        ["multilinear"] => Interpolation::Multilinear,
        _ => {
            return Err(Error::Parse {
                line: l,
                msg: "unknown interpolation".into(),
            })
        }
    };
    let mut axes = Vec::with_capacity(m);
    for _ in 0..m {
        let (l, t) = lines.keyed("axis")?;
        if t.len() != 3 {
            return Err(Error::Parse {
                line: l,
                msg: "axis needs lo hi count".into(),
            });
        }
        axes.push(GridAxis {
            lo: parse_num(l, t[0])?,
            hi: parse_num(l, t[1])?,
            count: parse_num(l, t[2])?,
        });
    }
    let (l, t) = lines.keyed("averager")?;
    if t.len() != 4 {
        return Err(Error::Parse {
            line: l,
            msg: "averager needs burn_in sample_horizon dt replicates".into(),
        });
    }
    let averager = StationaryAverager {
        burn_in: parse_num(l, t[0])?,
        sample_horizon: parse_num(l, t[1])?,
        dt: parse_num(l, t[2])?,
        replicates: parse_num(l, t[3])?,
    };
    let (l, t) = lines.keyed("root_seed")?;
    let root_seed: u64 = single(l, &t)?;
    let (l, t) = lines.keyed("nodes")?;
    let count: usize = single(l, &t)?;

    let sizes = [m, m * m, m * m, d, m, m * m, d];
    let width: usize = sizes.iter().sum();
    let mut nodes = Vec::with_capacity(count);
    for _ in 0..count {
        let (l, t) = lines.keyed("node")?;
        if t.len() != width {
            return Err(Error::Parse {
                line: l,
                msg: format!("node has {} values, expected {width}", t.len()),
            });
        }
        let values = t
            .iter()
            .map(|tok| parse_num::<f64>(l, tok))
            .collect::<Result<Vec<_>>>()?;
        let mut parts = Vec::with_capacity(sizes.len());
        let mut offset = 0;
        for s in sizes {
            parts.push(values[offset..offset + s].to_vec());
            offset += s;
        }
        let mut it = parts.into_iter();
        let mut next = || it.next().unwrap_or_default();
        nodes.push(NodeValues {
            drift: next(),
            diffsq: next(),
            diff: next(),
            obs: next(),
            drift_se: next(),
            diffsq_se: next(),
            obs_se: next(),
        });
    }
    let grid = TabulationGrid::new(axes, interpolation)?;
    HomogenizedModel::from_table(
        m,
        d,
        Table {
            grid,
            averager,
            root_seed,
            nodes,
        },
    )
}
