//! Seeded forward model: sensing field, measurement noise, sigmoid mapping,
//! randomized on/off symbols, Rayleigh block fading and AWGN at the reader.
//!
//! Every random draw comes from its own ChaCha stream keyed by
//! `(kind, slot, sensor)`, so growing `L` or `N` (or `M`, which only extends
//! each stream) never perturbs draws that already existed. Sweeps over those
//! parameters therefore compare like with like.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::distributions::{clamp_theta, sigmoid_map, SensingPrior};
use crate::error::{ensure_finite, ensure_positive, Error, Result};

#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub(crate) enum Stream {
    Field = 1,
    Measurement = 2,
    Symbol = 3,
    Channel = 4,
    Awgn = 5,
    Variational = 6,
}

pub(crate) fn stream_rng(seed: u64, kind: Stream, slot: usize, sensor: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = ((kind as u64) << 56) | ((slot as u64 & 0xFFFF_FFFF) << 20) | (sensor as u64 & 0xF_FFFF);
    rng.set_stream(id);
    rng
}

#[inline]
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Transmit amplitude `sqrt(P_t)` that realises `snr_db = 10 log10(P_t / sigma_w2)`.
pub fn snr_to_sigma(snr_db: f64, sigma_w2: f64) -> Result<f64> {
    ensure_finite("snr_db", snr_db)?;
    ensure_positive("sigma_w2", sigma_w2)?;
    Ok((10f64.powf(snr_db / 10.0) * sigma_w2).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelConfig {
    pub antennas: usize,
    pub sensors: usize,
    pub slots: usize,
    /// Per-component variance of each channel coefficient.
    pub sigma_h2: f64,
    /// Per-component variance of the receiver noise.
    pub sigma_w2: f64,
    pub tx_scale: f64,
    pub rho_bar: f64,
}

impl ChannelConfig {
    pub fn new(
        antennas: usize,
        sensors: usize,
        slots: usize,
        sigma_h2: f64,
        sigma_w2: f64,
        snr_db: f64,
    ) -> Result<Self> {
        let cfg = Self {
            antennas,
            sensors,
            slots,
            sigma_h2,
            sigma_w2,
            tx_scale: snr_to_sigma(snr_db, sigma_w2)?,
            rho_bar: 1.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (what, v) in [
            ("antennas", self.antennas),
            ("sensors", self.sensors),
            ("slots", self.slots),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{what} must be at least 1")));
            }
        }
        ensure_positive("sigma_h2", self.sigma_h2)?;
        ensure_positive("sigma_w2", self.sigma_w2)?;
        ensure_positive("tx_scale", self.tx_scale)?;
        ensure_positive("rho_bar", self.rho_bar)?;
        Ok(())
    }

    pub fn snr_db(&self) -> f64 {
        10.0 * (self.tx_scale * self.tx_scale / self.sigma_w2).log10()
    }
}

/// True field, its per-slot noisy measurements and the mapped probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldRealization {
    pub x: Vec<f64>,
    /// `slots x sensors`
    pub x_tilde: Vec<Vec<f64>>,
    /// `slots x sensors`, every entry in `[1e-9, 1 - 1e-9]`
    pub theta: Vec<Vec<f64>>,
    pub delta2: f64,
}

impl FieldRealization {
    pub fn slots(&self) -> usize {
        self.theta.len()
    }

    pub fn sensors(&self) -> usize {
        self.x.len()
    }
}

/// Draws `x ~ N(mu, Sigma_x)` once, then `slots` rounds of i.i.d. measurement noise.
pub fn sample_field(prior: &SensingPrior, delta2: f64, slots: usize, seed: u64) -> Result<FieldRealization> {
    let factor = prior.sampling_factor()?;
    let n = prior.len();
    let z: Vec<f64> = (0..n)
        .map(|k| normal(&mut stream_rng(seed, Stream::Field, 0, k)))
        .collect();
    let x: Vec<f64> = (0..n)
        .map(|j| prior.mu[j] + (0..=j).map(|k| factor[(j, k)] * z[k]).sum::<f64>())
        .collect();
    field_given_x(x, prior, delta2, slots, seed)
}

/// Measurement noise and mapping for a known field `x`.
pub fn field_given_x(
    x: Vec<f64>,
    prior: &SensingPrior,
    delta2: f64,
    slots: usize,
    seed: u64,
) -> Result<FieldRealization> {
    if x.len() != prior.len() {
        return Err(Error::DimensionMismatch {
            what: "x",
            expected: prior.len(),
            got: x.len(),
        });
    }
    ensure_finite("delta2", delta2)?;
    if delta2 < 0.0 {
        return Err(Error::OutOfDomain {
            what: "delta2",
            value: delta2,
            domain: "[0, inf)",
        });
    }
    let sd = delta2.sqrt();
    let mut x_tilde = Vec::with_capacity(slots);
    let mut theta = Vec::with_capacity(slots);
    for i in 0..slots {
        let row: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(k, &xk)| {
                if delta2 > 0.0 {
                    xk + sd * normal(&mut stream_rng(seed, Stream::Measurement, i, k))
                } else {
                    xk
                }
            })
            .collect();
        let mapped = row
            .iter()
            .enumerate()
            .map(|(k, &v)| sigmoid_map(v, prior.mu[k], prior.sigma[k]).map(clamp_theta))
            .collect::<Result<Vec<_>>>()?;
        x_tilde.push(row);
        theta.push(mapped);
    }
    Ok(FieldRealization {
        x,
        x_tilde,
        theta,
        delta2,
    })
}

/// Ground truth kept alongside simulated observations.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotDiagnostics {
    pub true_t: Vec<usize>,
    /// `slots x sensors` on/off symbols
    pub symbols: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub antennas: usize,
    pub sensors: usize,
    /// `slots x antennas`; empty when the set was built from norms alone.
    pub y: Vec<Vec<Complex64>>,
    pub y_norm2: Vec<f64>,
    pub diagnostics: Option<SlotDiagnostics>,
}

impl ObservationSet {
    pub fn slots(&self) -> usize {
        self.y_norm2.len()
    }

    /// Inference only needs squared norms; this builds a set from them directly.
    pub fn from_norms(y_norm2: Vec<f64>, antennas: usize, sensors: usize) -> Result<Self> {
        for &v in &y_norm2 {
            ensure_finite("y_norm2", v)?;
            if v < 0.0 {
                return Err(Error::OutOfDomain {
                    what: "y_norm2",
                    value: v,
                    domain: "[0, inf)",
                });
            }
        }
        Ok(Self {
            antennas,
            sensors,
            y: Vec::new(),
            y_norm2,
            diagnostics: None,
        })
    }

    fn from_samples(y: Vec<Vec<Complex64>>, sensors: usize, diagnostics: Option<SlotDiagnostics>) -> Self {
        let antennas = y.first().map_or(0, Vec::len);
        let y_norm2 = y.iter().map(|row| row.iter().map(|v| v.norm_sqr()).sum()).collect();
        Self {
            antennas,
            sensors,
            y,
            y_norm2,
            diagnostics,
        }
    }

    /// Writes the column-oriented text dump: a comment header and one
    /// `slot antenna re im` line per complex sample.
    pub fn write_dump<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# backsense observations v1")?;
        writeln!(
            out,
            "# antennas {} sensors {} slots {}",
            self.antennas,
            self.sensors,
            self.slots()
        )?;
        writeln!(out, "slot antenna re im")?;
        let mut line = String::new();
        for (i, row) in self.y.iter().enumerate() {
            for (a, v) in row.iter().enumerate() {
                line.clear();
                let _ = writeln!(line, "{i} {a} {} {}", v.re, v.im);
                out.write_all(line.as_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_dump<R: BufRead>(input: R) -> Result<Self> {
        let mut header: Option<(usize, usize, usize)> = None;
        let mut y: Vec<Vec<Complex64>> = Vec::new();
        for (idx, line) in input.lines().enumerate() {
            let line = line?;
            let lineno = idx + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed == "slot antenna re im" {
                continue;
            }
            if let Some(rest) = trimmed.strip_prefix('#') {
                let words: Vec<&str> = rest.split_whitespace().collect();
                if words.first() == Some(&"antennas") {
                    let num = |k: usize| -> Result<usize> {
                        words
                            .get(k)
                            .and_then(|w| w.parse().ok())
                            .ok_or_else(|| Error::Parse {
                                line: lineno,
                                msg: "malformed dimension header".into(),
                            })
                    };
                    let dims = (num(1)?, num(3)?, num(5)?);
                    y = vec![vec![Complex64::new(f64::NAN, f64::NAN); dims.0]; dims.2];
                    header = Some(dims);
                }
                continue;
            }
            let (antennas, _, slots) = header.ok_or_else(|| Error::Parse {
                line: lineno,
                msg: "sample before dimension header".into(),
            })?;
            let fields: Vec<&str> = trimmed.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected 4 columns, found {}", fields.len()),
                });
            }
            let bad = |msg: &str| Error::Parse {
                line: lineno,
                msg: msg.to_string(),
            };
            let slot: usize = fields[0].parse().map_err(|_| bad("bad slot index"))?;
            let ant: usize = fields[1].parse().map_err(|_| bad("bad antenna index"))?;
            let re: f64 = fields[2].parse().map_err(|_| bad("bad real part"))?;
            let im: f64 = fields[3].parse().map_err(|_| bad("bad imaginary part"))?;
            if slot >= slots || ant >= antennas {
                return Err(bad("index outside declared dimensions"));
            }
            y[slot][ant] = Complex64::new(re, im);
        }
        let (_, sensors, _) = header.ok_or(Error::Parse {
            line: 0,
            msg: "missing dimension header".into(),
        })?;
        if y.iter().flatten().any(|v| v.re.is_nan() || v.im.is_nan()) {
            return Err(Error::Parse {
                line: 0,
                msg: "dump is missing samples".into(),
            });
        }
        Ok(Self::from_samples(y, sensors, None))
    }
}

fn check_dims(field: &FieldRealization, cfg: &ChannelConfig) -> Result<()> {
    cfg.validate()?;
    if field.sensors() != cfg.sensors {
        return Err(Error::DimensionMismatch {
            what: "field sensors",
            expected: cfg.sensors,
            got: field.sensors(),
        });
    }
    if field.slots() < cfg.slots {
        return Err(Error::DimensionMismatch {
            what: "field slots",
            expected: cfg.slots,
            got: field.slots(),
        });
    }
    Ok(())
}

fn draw_symbols(field: &FieldRealization, slot: usize, seed: u64) -> Vec<bool> {
    field.theta[slot]
        .iter()
        .enumerate()
        .map(|(n, &t)| {
            let chi: f64 = stream_rng(seed, Stream::Symbol, slot, n).random();
            chi < t
        })
        .collect()
}

fn awgn(seed: u64, slot: usize, antennas: usize, sd: f64) -> Vec<Complex64> {
    let mut rng = stream_rng(seed, Stream::Awgn, slot, 0);
    (0..antennas)
        .map(|_| {
            let re = normal(&mut rng);
            let im = normal(&mut rng);
            Complex64::new(sd * re, sd * im)
        })
        .collect()
}

/// Runs the random encoder at every sensor and propagates the symbols through
/// an i.i.d. Rayleigh block-fading channel: `y = tx_scale * H s + w`.
pub fn encode_and_transmit(field: &FieldRealization, cfg: &ChannelConfig, seed: u64) -> Result<ObservationSet> {
    check_dims(field, cfg)?;
    let sd_h = cfg.sigma_h2.sqrt();
    let sd_w = cfg.sigma_w2.sqrt();
    let mut y = Vec::with_capacity(cfg.slots);
    let mut true_t = Vec::with_capacity(cfg.slots);
    let mut symbols = Vec::with_capacity(cfg.slots);
    for i in 0..cfg.slots {
        let s = draw_symbols(field, i, seed);
        let mut row = awgn(seed, i, cfg.antennas, sd_w);
        for (n, _) in s.iter().enumerate().filter(|(_, &on)| on) {
            let mut rng = stream_rng(seed, Stream::Channel, i, n);
            let gain = cfg.tx_scale * cfg.rho_bar * sd_h;
            for v in row.iter_mut() {
                let re = normal(&mut rng);
                let im = normal(&mut rng);
                *v += Complex64::new(gain * re, gain * im);
            }
        }
        true_t.push(s.iter().filter(|&&on| on).count());
        symbols.push(s);
        y.push(row);
    }
    Ok(ObservationSet::from_samples(
        y,
        cfg.sensors,
        Some(SlotDiagnostics { true_t, symbols }),
    ))
}

/// Variant with one known, real channel gain shared by every sensor and slot
/// (the idealised setting of the sample-mean baseline).
pub fn encode_fixed_channel(
    field: &FieldRealization,
    cfg: &ChannelConfig,
    gain: f64,
    seed: u64,
) -> Result<ObservationSet> {
    check_dims(field, cfg)?;
    ensure_finite("gain", gain)?;
    let sd_w = cfg.sigma_w2.sqrt();
    let mut y = Vec::with_capacity(cfg.slots);
    let mut true_t = Vec::with_capacity(cfg.slots);
    let mut symbols = Vec::with_capacity(cfg.slots);
    for i in 0..cfg.slots {
        let s = draw_symbols(field, i, seed);
        let active = s.iter().filter(|&&on| on).count();
        let signal = cfg.tx_scale * cfg.rho_bar * gain * active as f64;
        let row = awgn(seed, i, cfg.antennas, sd_w)
            .into_iter()
            .map(|w| w + signal)
            .collect();
        true_t.push(active);
        symbols.push(s);
        y.push(row);
    }
    Ok(ObservationSet::from_samples(
        y,
        cfg.sensors,
        Some(SlotDiagnostics { true_t, symbols }),
    ))
}
