//! RIS-assisted channel generation.
//!
//! Geometry conventions:
//!
//! * The base station and the RIS are both half-wavelength uniform linear
//!   arrays whose axis is the global x-axis.
//! * Element `m` of the steering vector towards direction `u` is
//!   `exp(-jπ·m·sin φ)` where `sin φ = (u · x̂) / ‖u‖` is the direction cosine
//!   of the line of sight projected on the array axis.
//! * The RIS–server LoS matrix is `a_M(sin φ_server) · a_N(sin φ_ris)^H`, the
//!   outer product of the steering vector at the server and the one at the RIS.
//! * Direct user–server links are pure Rayleigh; the user–RIS and RIS–server
//!   links are Rician. Uplink and downlink fades are drawn independently.
//!
//! Large-scale quantities live in [`SceneGeometry`] and are computed once per
//! scene; small-scale fades are redrawn every slot.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::io::{self, Read, Write};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::{SceneSpec, SystemConfig};
use crate::error::ChannelError;

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

/// Rician factors at or above this value are treated as pure line of sight.
pub const RICIAN_LOS_LIMIT: f64 = 1e12;

const TWO_PI: f64 = 2.0 * PI;

/// Diagonal RIS reflection matrix with unit amplitudes.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseShiftMatrix {
    phases: Vec<f64>,
}

impl PhaseShiftMatrix {
    /// Wraps every phase into `[0, 2π)`.
    pub fn new(phases: impl IntoIterator<Item = f64>) -> Self {
        Self {
            phases: phases.into_iter().map(wrap_phase).collect(),
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self { phases: vec![0.0; n] }
    }

    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }

    /// Diagonal entries `e^{jθ_n}`.
    pub fn diagonal(&self) -> Vec<Complex64> {
        self.phases.iter().map(|&t| Complex64::from_polar(1.0, t)).collect()
    }
}

fn wrap_phase(t: f64) -> f64 {
    let w = t.rem_euclid(TWO_PI);
    // rem_euclid can round up to exactly 2π for tiny negative inputs
    if w >= TWO_PI {
        0.0
    } else {
        w
    }
}

/// `ρ · d^(−α)`.
pub fn path_gain(rho: f64, distance: f64, exponent: f64) -> Result<f64, ChannelError> {
    if !(distance > 0.0) {
        return Err(ChannelError::ZeroDistance(distance));
    }
    Ok(rho * distance.powf(-exponent))
}

/// ULA steering vector for an angle measured from array broadside.
pub fn ula_steering(angle: f64, length: usize) -> CVector {
    steering_from_sine(angle.sin(), length)
}

pub fn steering_from_sine(sin_angle: f64, length: usize) -> CVector {
    CVector::from_iterator(
        length,
        (0..length).map(|m| Complex64::from_polar(1.0, -PI * m as f64 * sin_angle)),
    )
}

/// Direction cosine of `to - from` with respect to the x-axis.
pub fn axis_sine(from: [f64; 3], to: [f64; 3]) -> Result<f64, ChannelError> {
    let d = distance(from, to);
    if !(d > 0.0) {
        return Err(ChannelError::ZeroDistance(d));
    }
    Ok((to[0] - from[0]) / d)
}

pub fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Circularly-symmetric standard complex Gaussian matrix.
pub fn draw_cn<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> CMatrix {
    CMatrix::from_fn(rows, cols, |_, _| {
        let x: f64 = rng.sample(StandardNormal);
        let y: f64 = rng.sample(StandardNormal);
        Complex64::new(x * FRAC_1_SQRT_2, y * FRAC_1_SQRT_2)
    })
}

/// `√gain · (√(G/(G+1))·los + √(1/(G+1))·nlos)` with a fresh NLoS draw.
///
/// The NLoS term is always drawn so the rng stream does not depend on `G`.
pub fn rician_channel<R: Rng + ?Sized>(
    los: &CMatrix,
    rician_factor: f64,
    gain: f64,
    rng: &mut R,
) -> CMatrix {
    let nlos = draw_cn(los.nrows(), los.ncols(), rng);
    let amp = gain.sqrt();
    if rician_factor >= RICIAN_LOS_LIMIT {
        return los.map(|z| z * amp);
    }
    let w_los = (rician_factor / (rician_factor + 1.0)).sqrt();
    let w_nlos = (1.0 / (rician_factor + 1.0)).sqrt();
    los.zip_map(&nlos, |l, n| (l * w_los + n * w_nlos) * amp)
}

/// `direct + ris_link · diag(e^{jθ}) · user_link`.
pub fn effective_channel(
    direct: &CVector,
    ris_link: &CMatrix,
    theta: &PhaseShiftMatrix,
    user_link: &CVector,
) -> Result<CVector, ChannelError> {
    let (m, n) = ris_link.shape();
    if direct.len() != m || user_link.len() != n || theta.len() != n {
        return Err(ChannelError::Dimension {
            expected: format!("direct {m}, ris link {m}x{n}, user link {n}, phases {n}"),
            got: format!(
                "direct {}, ris link {m}x{n}, user link {}, phases {}",
                direct.len(),
                user_link.len(),
                theta.len()
            ),
        });
    }
    let reflected = CVector::from_iterator(
        n,
        theta.diagonal().into_iter().zip(user_link.iter()).map(|(p, h)| p * h),
    );
    Ok(direct + ris_link * reflected)
}

/// Per-scene large-scale parameters: distances, path gains and LoS steering.
#[derive(Clone, Debug)]
pub struct SceneGeometry {
    pub user_server_m: Vec<f64>,
    pub user_ris_m: Vec<f64>,
    pub ris_server_m: f64,
    pub user_server_gain: Vec<f64>,
    pub user_ris_gain: Vec<f64>,
    pub ris_server_gain: f64,
    /// LoS component at the RIS for each user (N×K, column per user).
    pub user_ris_los: CMatrix,
    /// RIS–server LoS matrix (M×N), shared by both directions.
    pub ris_server_los: CMatrix,
    rician: crate::config::RicianFactors,
    num_antennas: usize,
    num_elements: usize,
}

impl SceneGeometry {
    pub fn new(scene: &SceneSpec, cfg: &SystemConfig) -> Result<Self, ChannelError> {
        let k = scene.user_positions_m.len();
        let (m, n) = (cfg.num_antennas, cfg.num_ris_elements);
        let qa = cfg.server_position_m;
        let qr = cfg.ris_position_m;
        let exps = cfg.pathloss_exponents;
        let mut user_server_m = Vec::with_capacity(k);
        let mut user_ris_m = Vec::with_capacity(k);
        let mut user_server_gain = Vec::with_capacity(k);
        let mut user_ris_gain = Vec::with_capacity(k);
        let mut user_ris_los = CMatrix::zeros(n, k);
        for (j, &qk) in scene.user_positions_m.iter().enumerate() {
            let dka = distance(qk, qa);
            let dkr = distance(qk, qr);
            user_server_gain.push(path_gain(cfg.pathloss_ref, dka, exps.user_server)?);
            user_ris_gain.push(path_gain(cfg.pathloss_ref, dkr, exps.user_ris)?);
            user_server_m.push(dka);
            user_ris_m.push(dkr);
            let a = steering_from_sine(axis_sine(qr, qk)?, n);
            user_ris_los.set_column(j, &a);
        }
        let dra = distance(qr, qa);
        let ris_server_gain = path_gain(cfg.pathloss_ref, dra, exps.ris_server)?;
        let at_server = steering_from_sine(axis_sine(qa, qr)?, m);
        let at_ris = steering_from_sine(axis_sine(qr, qa)?, n);
        let ris_server_los = &at_server * at_ris.adjoint();
        Ok(Self {
            user_server_m,
            user_ris_m,
            ris_server_m: dra,
            user_server_gain,
            user_ris_gain,
            ris_server_gain,
            user_ris_los,
            ris_server_los,
            rician: cfg.rician_factors,
            num_antennas: m,
            num_elements: n,
        })
    }

    pub fn num_users(&self) -> usize {
        self.user_server_gain.len()
    }

    /// Draws one slot's small-scale fades. Draw order: uplink direct links
    /// (user by user), uplink user–RIS links, RIS–server; then the same for
    /// the downlink.
    pub fn sample_parts<R: Rng + ?Sized>(&self, rng: &mut R) -> ChannelParts {
        let (ul_direct, ul_user_ris, ul_ris) =
            self.sample_direction(self.rician.ris_server, rng);
        let (dl_direct, dl_user_ris, dl_ris) =
            self.sample_direction(self.rician.server_ris, rng);
        ChannelParts {
            direct_ul: ul_direct,
            direct_dl: dl_direct,
            user_ris_ul: ul_user_ris,
            ris_user_dl: dl_user_ris,
            ris_server_ul: ul_ris,
            server_ris_dl: dl_ris,
        }
    }

    fn sample_direction<R: Rng + ?Sized>(
        &self,
        ris_server_factor: f64,
        rng: &mut R,
    ) -> (CMatrix, CMatrix, CMatrix) {
        let k = self.num_users();
        let (m, n) = (self.num_antennas, self.num_elements);
        let mut direct = CMatrix::zeros(m, k);
        for j in 0..k {
            let h = draw_cn(m, 1, rng) * Complex64::from(self.user_server_gain[j].sqrt());
            direct.set_column(j, &h.column(0));
        }
        let mut user_ris = CMatrix::zeros(n, k);
        for j in 0..k {
            let los = CMatrix::from_column_slice(n, 1, self.user_ris_los.column(j).as_slice());
            let h = rician_channel(&los, self.rician.user_ris, self.user_ris_gain[j], rng);
            user_ris.set_column(j, &h.column(0));
        }
        let ris = rician_channel(&self.ris_server_los, ris_server_factor, self.ris_server_gain, rng);
        (direct, user_ris, ris)
    }
}

/// Direct and cascaded channel components of one slot, before the RIS
/// phases are applied. Column `k` belongs to user `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelParts {
    /// `h_{k,a}`, M×K.
    pub direct_ul: CMatrix,
    /// `h_{a,k}`, M×K.
    pub direct_dl: CMatrix,
    /// `h_{k,r}`, N×K.
    pub user_ris_ul: CMatrix,
    /// `h_{r,k}`, N×K.
    pub ris_user_dl: CMatrix,
    /// `H_{r,a}`, M×N.
    pub ris_server_ul: CMatrix,
    /// `H_{a,r}`, M×N.
    pub server_ris_dl: CMatrix,
}

impl ChannelParts {
    pub fn compose(&self, theta: &PhaseShiftMatrix) -> Result<ChannelSet, ChannelError> {
        let effective_ul = compose_all(&self.direct_ul, &self.ris_server_ul, theta, &self.user_ris_ul)?;
        let effective_dl = compose_all(&self.direct_dl, &self.server_ris_dl, theta, &self.ris_user_dl)?;
        Ok(ChannelSet {
            parts: self.clone(),
            effective_ul,
            effective_dl,
        })
    }
}

fn compose_all(
    direct: &CMatrix,
    ris_link: &CMatrix,
    theta: &PhaseShiftMatrix,
    user_links: &CMatrix,
) -> Result<CMatrix, ChannelError> {
    let (m, k) = direct.shape();
    if user_links.ncols() != k {
        return Err(ChannelError::Dimension {
            expected: format!("{k} user links"),
            got: format!("{}", user_links.ncols()),
        });
    }
    let mut out = CMatrix::zeros(m, k);
    for j in 0..k {
        let h = effective_channel(
            &direct.column(j).into_owned(),
            ris_link,
            theta,
            &user_links.column(j).into_owned(),
        )?;
        out.set_column(j, &h);
    }
    Ok(out)
}

/// All channels of one slot, including the RIS-composed effective channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSet {
    pub parts: ChannelParts,
    /// `h^UL_{k,a}`, M×K.
    pub effective_ul: CMatrix,
    /// `h^DL_{a,k}`, M×K.
    pub effective_dl: CMatrix,
}

/// Builds the scene geometry and draws one slot of channels.
pub fn sample_channel_set<R: Rng + ?Sized>(
    scene: &SceneSpec,
    cfg: &SystemConfig,
    theta: &PhaseShiftMatrix,
    rng: &mut R,
) -> Result<ChannelSet, ChannelError> {
    SceneGeometry::new(scene, cfg)?.sample_parts(rng).compose(theta)
}

/// Header of one record in a channel dump.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelDumpHeader {
    pub num_users: usize,
    pub num_antennas: usize,
    pub num_ris_elements: usize,
    pub seed: u64,
    pub slot: usize,
}

/// Writes one slot record: a little-endian `u32` header length, the JSON
/// header, then every array as little-endian `f32` (re, im) pairs in the
/// order direct_ul, direct_dl, user_ris_ul, ris_user_dl (each K rows of
/// length M or N), ris_server_ul, server_ris_dl (M rows of length N),
/// effective_ul, effective_dl (K rows of length M).
pub fn write_channel_record<W: Write>(
    out: &mut W,
    header: &ChannelDumpHeader,
    set: &ChannelSet,
) -> io::Result<()> {
    let json = serde_json::to_vec(header).map_err(io::Error::other)?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    let p = &set.parts;
    for per_user in [&p.direct_ul, &p.direct_dl, &p.user_ris_ul, &p.ris_user_dl] {
        write_rows(out, &per_user.transpose())?;
    }
    write_rows(out, &p.ris_server_ul)?;
    write_rows(out, &p.server_ris_dl)?;
    write_rows(out, &set.effective_ul.transpose())?;
    write_rows(out, &set.effective_dl.transpose())?;
    Ok(())
}

fn write_rows<W: Write>(out: &mut W, m: &CMatrix) -> io::Result<()> {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let z = m[(i, j)];
            out.write_all(&(z.re as f32).to_le_bytes())?;
            out.write_all(&(z.im as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads one record written by [`write_channel_record`]. Returns `None` at a
/// clean end of stream.
pub fn read_channel_record<R: Read>(
    input: &mut R,
) -> io::Result<Option<(ChannelDumpHeader, ChannelSet)>> {
    let mut len = [0u8; 4];
    match input.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    input.read_exact(&mut json)?;
    let header: ChannelDumpHeader = serde_json::from_slice(&json).map_err(io::Error::other)?;
    let (k, m, n) = (header.num_users, header.num_antennas, header.num_ris_elements);
    let direct_ul = read_rows(input, k, m)?.transpose();
    let direct_dl = read_rows(input, k, m)?.transpose();
    let user_ris_ul = read_rows(input, k, n)?.transpose();
    let ris_user_dl = read_rows(input, k, n)?.transpose();
    let ris_server_ul = read_rows(input, m, n)?;
    let server_ris_dl = read_rows(input, m, n)?;
    let effective_ul = read_rows(input, k, m)?.transpose();
    let effective_dl = read_rows(input, k, m)?.transpose();
    Ok(Some((
        header,
        ChannelSet {
            parts: ChannelParts {
                direct_ul,
                direct_dl,
                user_ris_ul,
                ris_user_dl,
                ris_server_ul,
                server_ris_dl,
            },
            effective_ul,
            effective_dl,
        },
    )))
}

fn read_rows<R: Read>(input: &mut R, rows: usize, cols: usize) -> io::Result<CMatrix> {
    let mut buf = vec![0u8; rows * cols * 8];
    input.read_exact(&mut buf)?;
    let vals: Vec<f32> = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(CMatrix::from_fn(rows, cols, |i, j| {
        let at = 2 * (i * cols + j);
        Complex64::new(vals[at] as f64, vals[at + 1] as f64)
    }))
}
