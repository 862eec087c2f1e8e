//! Versioned little-endian archive of retained posterior draws.
//!
//! The byte layout is described in `docs/draw-archive.md`. Readers reject
//! unknown versions and any trailing bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::copula::{CorrelationMatrix, PriorMode};
use crate::error::{Error, Result};
use crate::marginal::MarginalParams;
use crate::model::PosteriorDraw;
use crate::outcome::OutcomeParams;

pub const MAGIC: [u8; 8] = *b"MMDRAWS\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveHeader {
    pub k: usize,
    pub p: usize,
    pub n: usize,
    pub lower: f64,
    /// Free-form UTF-8 text, typically the run configuration.
    pub metadata: String,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Archive(msg.into())
}

fn io(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        corrupt("unexpected end of file")
    } else {
        corrupt(e.to_string())
    }
}

struct Out<W: Write>(W);

impl<W: Write> Out<W> {
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.0.write_all(b).map_err(io)
    }

    fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }

    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| corrupt(format!("{v} does not fit in 32 bits")))?;
        self.bytes(&v.to_le_bytes())
    }

    fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn f64s(&mut self, v: &[f64]) -> Result<()> {
        v.iter().try_for_each(|x| self.f64(*x))
    }

    fn matrix(&mut self, m: &DMatrix<f64>) -> Result<()> {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                self.f64(m[(i, j)])?;
            }
        }
        Ok(())
    }
}

struct In<R: Read>(R);

impl<R: Read> In<R> {
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b).map_err(io)?;
        Ok(b)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    fn matrix(&mut self, r: usize, c: usize) -> Result<DMatrix<f64>> {
        let v = self.f64s(r * c)?;
        Ok(DMatrix::from_row_slice(r, c, &v))
    }

    /// Length field guarded against absurd values from corrupt input.
    fn len(&mut self, what: &str, max: usize) -> Result<usize> {
        let v = self.u32()?;
        if v > max {
            return Err(corrupt(format!("{what} = {v} exceeds {max}")));
        }
        Ok(v)
    }
}

const MAX_DIM: usize = 1 << 16;
const MAX_TEXT: usize = 1 << 24;

fn write_marginal<W: Write>(o: &mut Out<W>, m: &MarginalParams) -> Result<()> {
    o.u32(m.k_max())?;
    o.f64s(&m.intercepts)?;
    o.f64s(&m.precisions)?;
    o.f64s(&m.sticks)?;
    o.f64s(&m.weights)?;
    o.f64s(&m.beta)?;
    o.f64s(&[m.lambda, m.mu, m.s, m.a_star, m.lower])
}

fn read_marginal<R: Read>(i: &mut In<R>, p: usize) -> Result<MarginalParams> {
    let k = i.len("k_max", MAX_DIM)?;
    let intercepts = i.f64s(k)?;
    let precisions = i.f64s(k)?;
    let sticks = i.f64s(k)?;
    let weights = i.f64s(k)?;
    let beta = i.f64s(p)?;
    let tail = i.f64s(5)?;
    let m = MarginalParams {
        intercepts,
        precisions,
        beta,
        sticks,
        weights,
        lambda: tail[0],
        mu: tail[1],
        s: tail[2],
        a_star: tail[3],
        lower: tail[4],
    };
    m.validate().map_err(|e| corrupt(format!("margin: {e}")))?;
    Ok(m)
}

fn write_outcome<W: Write>(o: &mut Out<W>, p: &OutcomeParams) -> Result<()> {
    let d = p.dim();
    o.u32(d)?;
    o.u32(p.truncation())?;
    o.f64s(&p.mu)?;
    for s in &p.sigma {
        o.matrix(s)?;
    }
    o.f64s(&p.sticks)?;
    o.f64s(&p.weights)?;
    o.f64(p.alpha)?;
    o.f64(p.k0)?;
    o.f64s(&p.m1)?;
    o.matrix(&p.psi1)
}

fn read_outcome<R: Read>(i: &mut In<R>) -> Result<OutcomeParams> {
    let d = i.len("outcome dimension", MAX_DIM)?;
    let l = i.len("outcome truncation", MAX_DIM)?;
    let mu = i.f64s(l * d)?;
    let sigma = (0..l).map(|_| i.matrix(d, d)).collect::<Result<Vec<_>>>()?;
    let p = OutcomeParams {
        mu,
        sigma,
        sticks: i.f64s(l)?,
        weights: i.f64s(l)?,
        alpha: i.f64()?,
        k0: i.f64()?,
        m1: i.f64s(d)?,
        psi1: i.matrix(d, d)?,
    };
    p.validate().map_err(|e| corrupt(format!("outcome: {e}")))?;
    Ok(p)
}

fn write_draw<W: Write>(o: &mut Out<W>, d: &PosteriorDraw) -> Result<()> {
    o.u64(d.iteration() as u64)?;
    o.bytes(&d.rng_position().to_le_bytes())?;
    for m in d.marginals() {
        write_marginal(o, m)?;
    }
    let c = d.correlation();
    o.u8(match c.mode() {
        PriorMode::Uniform => 0,
        PriorMode::RhoConstrained => 1,
    })?;
    o.f64(c.rho().unwrap_or(f64::NAN))?;
    o.matrix(c.matrix())?;
    write_outcome(o, d.outcome(0))?;
    write_outcome(o, d.outcome(1))?;
    o.f64s(d.mediators())
}

fn read_draw<R: Read>(i: &mut In<R>, h: &ArchiveHeader) -> Result<PosteriorDraw> {
    let iteration = i.u64()? as usize;
    let rng_position = u128::from_le_bytes(i.array()?);
    let dim = 2 * h.k;
    let marginals = (0..dim).map(|_| read_marginal(i, h.p)).collect::<Result<Vec<_>>>()?;
    let mode = match i.u8()? {
        0 => PriorMode::Uniform,
        1 => PriorMode::RhoConstrained,
        m => return Err(corrupt(format!("unknown correlation mode {m}"))),
    };
    let rho = i.f64()?;
    let r = i.matrix(dim, dim)?;
    let correlation = CorrelationMatrix::from_matrix(r, mode).map_err(|e| corrupt(format!("correlation: {e}")))?;
    if correlation.rho().is_some_and(|x| x != rho) {
        return Err(corrupt("stored rho disagrees with the correlation matrix"));
    }
    let outcome = [read_outcome(i)?, read_outcome(i)?];
    let mediators = i.f64s(h.n * dim)?;
    PosteriorDraw::new(iteration, rng_position, marginals, correlation, outcome, mediators).map_err(|e| corrupt(format!("draw: {e}")))
}

pub fn write_archive<W: Write>(w: W, header: &ArchiveHeader, draws: &[PosteriorDraw]) -> Result<()> {
    let mut o = Out(w);
    for d in draws {
        if d.k() != header.k || d.n() != header.n || d.marginals().iter().any(|m| m.p() != header.p) {
            return Err(corrupt(format!("draw at iteration {} does not match the header dimensions", d.iteration())));
        }
    }
    o.bytes(&MAGIC)?;
    o.u32(VERSION as usize)?;
    o.u32(header.k)?;
    o.u32(header.p)?;
    o.u32(header.n)?;
    o.u32(draws.len())?;
    o.f64(header.lower)?;
    o.u32(header.metadata.len())?;
    o.bytes(header.metadata.as_bytes())?;
    for d in draws {
        write_draw(&mut o, d)?;
    }
    o.0.flush().map_err(io)
}

pub fn read_archive<R: Read>(r: R) -> Result<(ArchiveHeader, Vec<PosteriorDraw>)> {
    let mut i = In(r);
    if i.array::<8>()? != MAGIC {
        return Err(corrupt("not a draw archive (bad magic)"));
    }
    let version = i.u32()? as u32;
    if version != VERSION {
        return Err(corrupt(format!("unsupported archive version {version}, expected {VERSION}")));
    }
    let k = i.len("K", MAX_DIM)?;
    let p = i.len("P", MAX_DIM)?;
    let n = i.u32()?;
    let n_draws = i.u32()?;
    let lower = i.f64()?;
    let text_len = i.len("metadata length", MAX_TEXT)?;
    let mut text = vec![0u8; text_len];
    i.0.read_exact(&mut text).map_err(io)?;
    let metadata = String::from_utf8(text).map_err(|_| corrupt("metadata is not UTF-8"))?;
    let header = ArchiveHeader { k, p, n, lower, metadata };
    let mut draws = Vec::with_capacity(n_draws.min(1 << 16));
    for _ in 0..n_draws {
        draws.push(read_draw(&mut i, &header)?);
    }
    let mut probe = [0u8; 1];
    match i.0.read(&mut probe) {
        Ok(0) => Ok((header, draws)),
        Ok(_) => Err(corrupt("trailing bytes after the last draw")),
        Err(e) => Err(io(e)),
    }
}

pub fn save_draws(path: &Path, header: &ArchiveHeader, draws: &[PosteriorDraw]) -> Result<()> {
    let f = File::create(path).map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
    write_archive(BufWriter::new(f), header, draws)
}

pub fn load_draws(path: &Path) -> Result<(ArchiveHeader, Vec<PosteriorDraw>)> {
    let f = File::open(path).map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
    read_archive(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::copula::build_constrained_r;
    use crate::testutil::{assemble_draw, equicorrelated, linear_outcome, margins, random_dataset};

    fn draws() -> (ArchiveHeader, Vec<PosteriorDraw>) {
        let data = random_dataset(12, 2, 1, 1);
        let mut o1 = linear_outcome(1.0, &[0.3, -0.2, 0.5, 1.0, 0.1], 0.5);
        o1.mu.extend_from_slice(&[2.0, 1.0, 1.0, -1.0, 0.5, 0.0]);
        o1.sigma.push(DMatrix::identity(6, 6));
        o1.sticks = vec![0.6, 1.0];
        o1.weights = vec![0.6, 0.4];
        let a = assemble_draw(&data, margins(2, 1), equicorrelated(4, 0.25), [linear_outcome(0.0, &[0.1; 5], 1.0), o1.clone()], 2);
        let r = build_constrained_r(&equicorrelated(2, 0.3), &equicorrelated(2, 0.1), 0.7).unwrap();
        let b = PosteriorDraw::new(17, 123_456_789_012_345_678_901, margins(2, 1), r, [o1.clone(), o1], a.mediators().to_vec()).unwrap();
        let header = ArchiveHeader {
            k: 2,
            p: 1,
            n: 12,
            lower: f64::NEG_INFINITY,
            metadata: "seed = 4\nnote = \"ü\"".into(),
        };
        (header, vec![a, b])
    }

    #[test]
    fn round_trip_is_exact() {
        let (h, d) = draws();
        let mut buf = Vec::new();
        write_archive(&mut buf, &h, &d).unwrap();
        assert_eq!(&buf[..8], b"MMDRAWS\0");
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), VERSION);
        let (h2, d2) = read_archive(buf.as_slice()).unwrap();
        assert_eq!(h2, h);
        assert_eq!(d2, d);
        assert_eq!(d2[1].correlation().rho(), Some(0.7));
        assert_eq!(d2[1].rng_position(), 123_456_789_012_345_678_901);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let (h, d) = draws();
        let mut buf = Vec::new();
        write_archive(&mut buf, &h, &d).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_archive(bad.as_slice()), Err(Error::Archive(m)) if m.contains("magic")));
        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(matches!(read_archive(bad.as_slice()), Err(Error::Archive(m)) if m.contains("version")));
        assert!(matches!(read_archive(&buf[..buf.len() - 3]), Err(Error::Archive(m)) if m.contains("end of file")));
        let mut long = buf.clone();
        long.push(0);
        assert!(read_archive(long.as_slice()).is_err());
    }

    #[test]
    fn header_must_match_draws() {
        let (mut h, d) = draws();
        h.n = 11;
        assert!(write_archive(Vec::new(), &h, &d).is_err());
    }

    #[test]
    fn file_round_trip() {
        let (h, d) = draws();
        let dir = std::env::temp_dir().join(format!("mm-archive-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("draws.bin");
        save_draws(&path, &h, &d).unwrap();
        assert_eq!(load_draws(&path).unwrap().1, d);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
