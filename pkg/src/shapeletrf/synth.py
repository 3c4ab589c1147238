"""Synthetic multi-device, multi-domain I/Q generator.

Device identity lives in transmitter hardware impairments (CFO, I/Q
imbalance, DC offset, PA nonlinearity, phase noise); domains differ only in
the propagation channel (multipath taps and SNR).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .signal import Dataset, DatasetManifest, IQFrame, manifest_for

SAMPLES_PER_SYMBOL = 4
RRC_ROLLOFF = 0.35
RRC_SPAN = 8  # symbols
CARRIER_HZ = 2.4e9
SAMPLE_RATE_HZ = 20e6
PA_MAX_AMPLITUDE = 2.0  # RRC-shaped unit-power QPSK peaks near 1.7


@dataclass(frozen=True)
class ImpairmentProfile:
    cfo_ppm: float = 0.0
    iq_gain_db: float = 0.0
    iq_phase_deg: float = 0.0
    dc_offset: complex = 0j
    pa_a3: float = 0.0
    pa_a5: float = 0.0
    phase_noise_std: float = 0.0

    def vector(self) -> np.ndarray:
        return np.array([self.cfo_ppm, self.iq_gain_db, self.iq_phase_deg,
                         self.dc_offset.real, self.dc_offset.imag,
                         self.pa_a3, self.pa_a5, self.phase_noise_std])

    def pa_is_monotone(self, max_amplitude: float = PA_MAX_AMPLITUDE) -> bool:
        r = np.linspace(0.0, max_amplitude, 1001)
        slope = 1 + 3 * self.pa_a3 * r**2 + 5 * self.pa_a5 * r**4
        return bool(np.all(slope > 0))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dc_offset"] = [self.dc_offset.real, self.dc_offset.imag]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ImpairmentProfile":
        d = dict(d)
        dc = d.get("dc_offset", 0j)
        if isinstance(dc, (list, tuple)):
            d["dc_offset"] = complex(dc[0], dc[1])
        return cls(**d)


@dataclass(frozen=True)
class ChannelProfile:
    """Propagation channel of one domain.  ``snr_db = inf`` means noiseless."""

    snr_db: float = math.inf
    multipath_taps: tuple = (1 + 0j,)
    domain_label: int = 0
    name: str = ""

    def __post_init__(self):
        taps = np.asarray(self.multipath_taps, dtype=np.complex128).reshape(-1)
        if taps.size == 0:
            raise ValueError("channel needs at least one tap")
        energy = np.sum(np.abs(taps) ** 2)
        if energy == 0:
            raise ValueError("channel taps have zero energy")
        if abs(energy - 1.0) > 1e-12:  # already-normalized taps stay bit-identical
            taps = taps / np.sqrt(energy)
        object.__setattr__(self, "multipath_taps", tuple(complex(t) for t in taps))
        if math.isnan(self.snr_db):
            raise ValueError("snr_db must not be NaN")

    def to_dict(self) -> dict:
        return {"snr_db": self.snr_db, "domain_label": self.domain_label, "name": self.name,
                "multipath_taps": [[t.real, t.imag] for t in self.multipath_taps]}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelProfile":
        taps = tuple(complex(t[0], t[1]) if isinstance(t, (list, tuple)) else complex(t)
                     for t in d.get("multipath_taps", [[1.0, 0.0]]))
        return cls(float(d.get("snr_db", math.inf)), taps, int(d.get("domain_label", 0)), d.get("name", ""))


@dataclass
class FleetSpread:
    """Standard deviations of the per-device impairment draws."""

    cfo_ppm: float = 8.0
    iq_gain_db: float = 0.4
    iq_phase_deg: float = 2.0
    dc_offset: float = 0.08
    pa_a3: float = 0.02
    pa_a5: float = 0.002
    phase_noise_std: float = 0.002

    def scaled(self, s: float) -> "FleetSpread":
        return FleetSpread(**{k: v * s for k, v in asdict(self).items()})


def make_device_fleet(C: int, spread=1.0, seed: int = 0) -> list[ImpairmentProfile]:
    """Draw ``C`` distinct impairment profiles.

    ``spread`` is either a scalar multiplier on the default spreads or a
    ``FleetSpread``.  Magnitudes are clipped to CFO <= 20 ppm, gain <= 1 dB
    and phase <= 5 degrees.
    """
    if C < 2:
        raise ValueError("a fleet needs at least two devices")
    spread = FleetSpread().scaled(float(spread)) if not isinstance(spread, FleetSpread) else spread
    rng = np.random.default_rng(seed)
    fleet = []
    for _ in range(C):
        dc = complex(rng.normal(0, spread.dc_offset), rng.normal(0, spread.dc_offset))
        p = ImpairmentProfile(
            cfo_ppm=float(np.clip(rng.normal(0, spread.cfo_ppm), -20, 20)),
            iq_gain_db=float(np.clip(rng.normal(0, spread.iq_gain_db), -1, 1)),
            iq_phase_deg=float(np.clip(rng.normal(0, spread.iq_phase_deg), -5, 5)),
            dc_offset=dc,
            pa_a3=float(np.clip(-abs(rng.normal(0, spread.pa_a3)), -0.08, 0.0)),
            pa_a5=float(np.clip(abs(rng.normal(0, spread.pa_a5)), 0.0, 0.01)),
            phase_noise_std=float(abs(rng.normal(0, spread.phase_noise_std))),
        )
        if not p.pa_is_monotone():
            raise ValueError(f"PA coefficients ({p.pa_a3}, {p.pa_a5}) are not monotone; reduce the spread")
        fleet.append(p)
    vecs = np.stack([p.vector() for p in fleet])
    for i in range(C):
        for j in range(i + 1, C):
            if not np.any(vecs[i] != vecs[j]):
                raise ValueError(f"devices {i} and {j} have identical impairments")
    return fleet


def rrc_taps(rolloff: float = RRC_ROLLOFF, sps: int = SAMPLES_PER_SYMBOL, span: int = RRC_SPAN) -> np.ndarray:
    """Unit-energy root-raised-cosine filter, ``span * sps + 1`` taps."""
    t = np.arange(-span * sps / 2, span * sps / 2 + 1) / sps
    h = np.empty_like(t)
    b = rolloff
    for i, ti in enumerate(t):
        if ti == 0:
            h[i] = 1 - b + 4 * b / np.pi
        elif b > 0 and abs(abs(ti) - 1 / (4 * b)) < 1e-12:
            h[i] = b / np.sqrt(2) * ((1 + 2 / np.pi) * np.sin(np.pi / (4 * b))
                                     + (1 - 2 / np.pi) * np.cos(np.pi / (4 * b)))
        else:
            h[i] = (np.sin(np.pi * ti * (1 - b)) + 4 * b * ti * np.cos(np.pi * ti * (1 + b))) \
                / (np.pi * ti * (1 - (4 * b * ti) ** 2))
    return h / np.sqrt(np.sum(h * h))


_RRC = rrc_taps()


def shaped_payload(payload_seed: int, length: int = 256) -> np.ndarray:
    """Random QPSK symbols, RRC-shaped at 4 samples/symbol, unit average power."""
    rng = np.random.default_rng(payload_seed)
    sps = SAMPLES_PER_SYMBOL
    n_sym = length // sps + RRC_SPAN + 1
    bits = rng.integers(0, 2, size=(n_sym, 2))
    symbols = ((2 * bits[:, 0] - 1) + 1j * (2 * bits[:, 1] - 1)) / np.sqrt(2)
    up = np.zeros(n_sym * sps, dtype=np.complex128)
    up[::sps] = symbols
    full = np.convolve(up, _RRC)
    start = RRC_SPAN * sps  # skip the filter transient
    # RRC with unit-energy taps and one symbol per sps samples -> power 1/sps
    return full[start:start + length] * np.sqrt(sps)


def apply_impairments(x: np.ndarray, profile: ImpairmentProfile, rng: np.random.Generator) -> np.ndarray:
    p = profile
    mag2 = np.abs(x) ** 2
    y = x + p.pa_a3 * x * mag2 + p.pa_a5 * x * mag2**2
    g = 10 ** (p.iq_gain_db / 20)
    phi = np.deg2rad(p.iq_phase_deg)
    i, q = y.real, y.imag
    y = g * i + 1j * (q * np.cos(phi) + i * np.sin(phi))
    y = y + p.dc_offset
    n = np.arange(len(y))
    f_off = p.cfo_ppm * 1e-6 * CARRIER_HZ / SAMPLE_RATE_HZ
    y = y * np.exp(2j * np.pi * f_off * n)
    if p.phase_noise_std > 0:
        y = y * np.exp(1j * np.cumsum(rng.normal(0, p.phase_noise_std, len(y))))
    return y


def apply_channel(x: np.ndarray, channel: ChannelProfile, rng: np.random.Generator) -> np.ndarray:
    y = np.convolve(x, np.asarray(channel.multipath_taps))[: len(x)]
    if math.isfinite(channel.snr_db):
        p_sig = np.mean(np.abs(y) ** 2)
        p_noise = p_sig / 10 ** (channel.snr_db / 10)
        y = y + np.sqrt(p_noise / 2) * (rng.normal(size=len(y)) + 1j * rng.normal(size=len(y)))
    return y


def synth_frame(profile: ImpairmentProfile, channel: ChannelProfile, payload_seed: int,
                device_label: int = 0, length: int = 256, noise_seed: int | None = None) -> IQFrame:
    """Synthesize one unit-power 2 x ``length`` frame.

    The payload depends only on ``payload_seed``; phase noise and additive
    noise draw from ``noise_seed`` (defaults to ``payload_seed``).
    """
    rng = np.random.default_rng(payload_seed if noise_seed is None else noise_seed)
    x = shaped_payload(payload_seed, length)
    x = apply_impairments(x, profile, rng)
    x = apply_channel(x, channel, rng)
    x = x / np.sqrt(np.mean(np.abs(x) ** 2) / 2)  # RMS over the 2*T real entries = 1
    return IQFrame(np.stack([x.real, x.imag]), device_label, channel.domain_label)


def frame_seeds(seed: int, n: int) -> np.ndarray:
    return np.random.SeedSequence(seed).generate_state(n, dtype=np.uint64)


def synth_dataset(fleet, channels, frames_per_cell: int, seed: int = 0, length: int = 256):
    """Generate a cell-major dataset of ``len(fleet) * len(channels) * frames_per_cell`` frames."""
    if not fleet or not channels:
        raise ValueError("fleet and channel list must be non-empty")
    C, D = len(fleet), len(channels)
    n = C * D * frames_per_cell
    frames = np.zeros((n, 2, length), dtype=np.float32)
    dev = np.zeros(n, dtype=np.int64)
    dom = np.zeros(n, dtype=np.int64)
    seeds = frame_seeds(seed, 2 * n)
    domain_ids = sorted({ch.domain_label for ch in channels})
    if domain_ids != list(range(D)):
        raise ValueError("channel domain labels must be 0..len(channels)-1")
    channels = sorted(channels, key=lambda ch: ch.domain_label)
    i = 0
    for c, profile in enumerate(fleet):
        for ch in channels:
            for _ in range(frames_per_cell):
                f = synth_frame(profile, ch, int(seeds[2 * i]), c, length, int(seeds[2 * i + 1]))
                frames[i] = f.samples
                dev[i] = c
                dom[i] = ch.domain_label
                i += 1
    names = [ch.name or f"domain{ch.domain_label}" for ch in channels]
    data = Dataset(frames, dev, dom, C, names)
    return data, manifest_for(data, "")


def default_channels(source_domains: int = 2, target_domains: int = 1, seed: int = 0) -> list[ChannelProfile]:
    """Source channels are mild; target channels have a different delay profile and lower SNR."""
    rng = np.random.default_rng(seed)
    chans = []
    for k in range(source_domains + target_domains):
        target = k >= source_domains
        n_taps = 4 if target else 2
        decay = 0.6 if target else 0.25
        taps = [1.0 + 0j] + [decay ** m * np.exp(2j * np.pi * rng.uniform()) for m in range(1, n_taps)]
        snr = 15.0 if target else float(25.0 - 5.0 * k)
        chans.append(ChannelProfile(snr, tuple(taps), k, f"{'target' if target else 'source'}{k}"))
    return chans


@dataclass
class SynthConfig:
    """Structured config for ``synth``: fleet size, spreads, channels and counts."""

    devices: int = 8
    spread: float = 1.0
    frames_per_cell: int = 500
    source_domains: int = 2
    target_domains: int = 1
    seed: int = 0
    channels: list = field(default_factory=list)  # optional explicit ChannelProfile dicts

    def build(self):
        fleet = make_device_fleet(self.devices, self.spread, self.seed)
        if self.channels:
            chans = [ChannelProfile.from_dict(c) for c in self.channels]
        else:
            chans = default_channels(self.source_domains, self.target_domains, self.seed + 1)
        return fleet, chans
