//! Ensemble files.
//!
//! Binary layout, all little-endian:
//!
//! ```text
//! magic      8 bytes   b"MSDEENS1"
//! d_total    u32
//! d_x        u32
//! d_y        u32
//! d_f        u32
//! d_g        u32
//! n_times    u64       L
//! n_traj     u64       M
//! seed       u64
//! dt         f64
//! times      L × f64
//! states     M × L × D_total × f64      (trajectory, time, coordinate)
//! noise      M × (L−1) × D_y × f64      (trajectory, step, coordinate)
//! ```
//!
//! The CSV export has header `trajectory,time,state_0,...,state_{D-1}` and one
//! row per `(trajectory, time)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::simulate::TrajectoryEnsemble;
use crate::system::SystemDimensions;

pub const MAGIC: &[u8; 8] = b"MSDEENS1";

fn io_err(e: std::io::Error) -> Error {
    Error::Format(e.to_string())
}

pub fn write_binary<W: Write>(ens: &TrajectoryEnsemble, mut w: W) -> Result<()> {
    let d = ens.dims;
    (|| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        for v in [d.total, d.x, d.y, d.feature_f, d.feature_g] {
            w.write_u32::<LittleEndian>(v as u32)?;
        }
        w.write_u64::<LittleEndian>(ens.n_times() as u64)?;
        w.write_u64::<LittleEndian>(ens.n_trajectories as u64)?;
        w.write_u64::<LittleEndian>(ens.seed)?;
        w.write_f64::<LittleEndian>(ens.dt)?;
        for block in [&ens.times, &ens.states, &ens.noise_increments] {
            for &v in block.iter() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        w.flush()
    })()
    .map_err(io_err)
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<f64>> {
    let mut out = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut out)?;
    Ok(out)
}

pub fn read_binary<R: Read>(mut r: R) -> Result<TrajectoryEnsemble> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let mut header = [0usize; 5];
    for h in &mut header {
        *h = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    }
    let [total, dx, dy, df, dg] = header;
    let dims = SystemDimensions::new(dx, dy, df, dg)?;
    if dims.total != total {
        return Err(Error::Format(format!("D_total {total} != D_x + D_y")));
    }
    let n_t = r.read_u64::<LittleEndian>().map_err(io_err)? as usize;
    let m = r.read_u64::<LittleEndian>().map_err(io_err)? as usize;
    let seed = r.read_u64::<LittleEndian>().map_err(io_err)?;
    let dt = r.read_f64::<LittleEndian>().map_err(io_err)?;
    if n_t < 2 {
        return Err(Error::Format("fewer than two time points".into()));
    }
    let times = read_f64s(&mut r, n_t).map_err(io_err)?;
    let states = read_f64s(&mut r, m * n_t * total).map_err(io_err)?;
    let noise = read_f64s(&mut r, m * (n_t - 1) * dy).map_err(io_err)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(io_err)? != 0 {
        return Err(Error::Format("trailing bytes after noise block".into()));
    }
    TrajectoryEnsemble::from_parts(dims, times, states, noise, m, seed, dt)
}

pub fn save(ens: &TrajectoryEnsemble, path: &Path) -> Result<()> {
    crate::atomic_write(path, |w| write_binary(ens, BufWriter::new(w)))
}

pub fn load(path: &Path) -> Result<TrajectoryEnsemble> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_binary(BufReader::new(f))
}

pub fn write_csv<W: Write>(ens: &TrajectoryEnsemble, mut w: W) -> Result<()> {
    (|| -> std::io::Result<()> {
        write!(w, "trajectory,time")?;
        for i in 0..ens.dims.total {
            write!(w, ",state_{i}")?;
        }
        writeln!(w)?;
        for m in 0..ens.n_trajectories {
            for (l, t) in ens.times.iter().enumerate() {
                write!(w, "{m},{t}")?;
                for v in ens.state(m, l) {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
        w.flush()
    })()
    .map_err(io_err)
}

pub fn save_csv(ens: &TrajectoryEnsemble, path: &Path) -> Result<()> {
    crate::atomic_write(path, |w| write_csv(ens, BufWriter::new(w)))
}
