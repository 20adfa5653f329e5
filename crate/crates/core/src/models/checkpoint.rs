//! Binary checkpoints: magic `OODA`, format version, network kind, an
//! architecture header (layers, heads, widths, time width, a, b, n_max, M),
//! the SDE pair for score networks, then little-endian `f32` parameter
//! blocks in declaration order, each prefixed by its `rows, cols`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::networks::{GraphClassifier, ScoreNetwork};
use super::transformer::{ArchConfig, GraphDims};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::sde::{DiffusionSde, SdeKind};
use crate::tensor::Matrix;

const MAGIC: &[u8; 4] = b"OODA";
const VERSION: u32 = 1;
const KIND_SCORE: u8 = 0;
const KIND_CLASSIFIER: u8 = 1;

/// Architecture fields stored in (and checked against) a checkpoint header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchHeader {
    pub arch: ArchConfig,
    pub dims: GraphDims,
    pub num_classes: usize,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f64) {
        self.0.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "unexpected end of file at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as f64)
    }
}

fn write_header(w: &mut Writer, kind: u8, h: &ArchHeader) {
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION as usize);
    w.u8(kind);
    for v in [
        h.arch.num_layers,
        h.arch.num_heads,
        h.arch.hidden_x,
        h.arch.hidden_a,
        h.arch.time_dim,
        h.dims.node_dim,
        h.dims.edge_dim,
        h.dims.n_max,
        h.num_classes,
    ] {
        w.u32(v);
    }
}

fn read_header(r: &mut Reader<'_>, expected_kind: u8) -> Result<ArchHeader> {
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let kind = r.u8()?;
    if kind != expected_kind {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds network kind {kind}, expected {expected_kind}"
        )));
    }
    let mut f = [0usize; 9];
    for v in &mut f {
        *v = r.u32()?;
    }
    Ok(ArchHeader {
        arch: ArchConfig {
            num_layers: f[0],
            num_heads: f[1],
            hidden_x: f[2],
            hidden_a: f[3],
            time_dim: f[4],
        },
        dims: GraphDims {
            node_dim: f[5],
            edge_dim: f[6],
            n_max: f[7],
        },
        num_classes: f[8],
    })
}

fn write_sde(w: &mut Writer, sde: &DiffusionSde) {
    w.u8(match sde.kind {
        SdeKind::Vp => 0,
        SdeKind::Ve => 1,
    });
    w.f64(sde.beta_min);
    w.f64(sde.beta_max);
    w.u32(sde.num_steps);
    w.f64(sde.eps_time);
}

fn read_sde(r: &mut Reader<'_>) -> Result<DiffusionSde> {
    let kind = match r.u8()? {
        0 => SdeKind::Vp,
        1 => SdeKind::Ve,
        k => return Err(Error::Checkpoint(format!("unknown SDE kind {k}"))),
    };
    Ok(DiffusionSde {
        kind,
        beta_min: r.f64()?,
        beta_max: r.f64()?,
        num_steps: r.u32()?,
        eps_time: r.f64()?,
    })
}

fn write_params(w: &mut Writer, params: &ParamStore) {
    w.u32(params.len());
    for m in params.values() {
        w.u32(m.rows());
        w.u32(m.cols());
        for &v in m.data() {
            w.f32(v);
        }
    }
}

fn read_params_into(r: &mut Reader<'_>, params: &mut ParamStore) -> Result<()> {
    let count = r.u32()?;
    if count != params.len() {
        return Err(Error::Checkpoint(format!(
            "{count} parameter blocks, architecture declares {}",
            params.len()
        )));
    }
    for (k, slot) in params.values_mut().iter_mut().enumerate() {
        let (rows, cols) = (r.u32()?, r.u32()?);
        if (rows, cols) != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "block {k} is {rows}x{cols}, expected {:?}",
                slot.shape()
            )));
        }
        let data = (0..rows * cols).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        *slot = Matrix::from_vec(rows, cols, data)?;
    }
    if r.pos != r.buf.len() {
        return Err(Error::Checkpoint("trailing bytes after parameter blocks".into()));
    }
    Ok(())
}

fn check_expected(found: &ArchHeader, expected: Option<&ArchHeader>) -> Result<()> {
    if let Some(exp) = expected {
        if found != exp {
            return Err(Error::Checkpoint(format!(
                "header mismatch: checkpoint has {found:?}, expected {exp:?}"
            )));
        }
    }
    Ok(())
}

pub fn score_header(net: &ScoreNetwork) -> ArchHeader {
    ArchHeader {
        arch: net.arch(),
        dims: net.dims(),
        num_classes: 0,
    }
}

pub fn classifier_header(phi: &GraphClassifier) -> ArchHeader {
    use super::networks::ClassGuide;
    ArchHeader {
        arch: phi.arch(),
        dims: phi.dims(),
        num_classes: phi.num_classes(),
    }
}

pub fn encode_score(net: &ScoreNetwork) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    write_header(&mut w, KIND_SCORE, &score_header(net));
    write_sde(&mut w, &net.sde_x);
    write_sde(&mut w, &net.sde_a);
    write_params(&mut w, &net.params);
    w.0
}

pub fn decode_score(bytes: &[u8], expected: Option<&ArchHeader>) -> Result<ScoreNetwork> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let header = read_header(&mut r, KIND_SCORE)?;
    check_expected(&header, expected)?;
    let sde_x = read_sde(&mut r)?;
    let sde_a = read_sde(&mut r)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = ScoreNetwork::new(header.arch, header.dims, sde_x, sde_a, &mut rng)?;
    read_params_into(&mut r, &mut net.params)?;
    Ok(net)
}

pub fn encode_classifier(phi: &GraphClassifier) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    write_header(&mut w, KIND_CLASSIFIER, &classifier_header(phi));
    write_params(&mut w, &phi.params);
    w.0
}

pub fn decode_classifier(bytes: &[u8], expected: Option<&ArchHeader>) -> Result<GraphClassifier> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let header = read_header(&mut r, KIND_CLASSIFIER)?;
    check_expected(&header, expected)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut phi = GraphClassifier::new(header.arch, header.dims, header.num_classes, &mut rng)?;
    read_params_into(&mut r, &mut phi.params)?;
    Ok(phi)
}

pub fn save_score(net: &ScoreNetwork, path: &Path) -> Result<()> {
    fs::write(path, encode_score(net)).map_err(|e| Error::io(path, e))
}

pub fn load_score(path: &Path, expected: Option<&ArchHeader>) -> Result<ScoreNetwork> {
    decode_score(&fs::read(path).map_err(|e| Error::io(path, e))?, expected)
}

pub fn save_classifier(phi: &GraphClassifier, path: &Path) -> Result<()> {
    fs::write(path, encode_classifier(phi)).map_err(|e| Error::io(path, e))
}

pub fn load_classifier(path: &Path, expected: Option<&ArchHeader>) -> Result<GraphClassifier> {
    decode_classifier(&fs::read(path).map_err(|e| Error::io(path, e))?, expected)
}
