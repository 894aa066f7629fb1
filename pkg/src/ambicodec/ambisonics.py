"""B-format conventions (ACN order, SN3D normalization), plane-wave encoding,
order truncation, mode-matching loudspeaker decoding, and the circular-harmonic
pressure-field expansion with its cylindrical Bessel functions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

MAX_ENCODE_ORDER = 4
DECODER_REGULARIZATION = 1e-9


def channel_count(order: int) -> int:
    """Number of B-format channels for Ambisonics order ``order``."""
    if order < 0:
        raise ValueError("order must be non-negative")
    return (order + 1) ** 2


def order_from_channels(n_channels: int) -> int:
    order = math.isqrt(n_channels) - 1
    if order < 0 or channel_count(order) != n_channels:
        raise ValueError(f"{n_channels} channels is not a full-sphere B-format channel count")
    return order


def acn_index(n: int, m: int) -> int:
    return n * n + n + m


def acn_degree_order(acn: int) -> tuple[int, int]:
    n = math.isqrt(acn)
    return n, acn - n * n - n


@dataclass
class BFormatSignal:
    order: int
    sample_rate: int
    samples: np.ndarray  # [channels, frames], ACN / SN3D

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if self.samples.shape[0] != channel_count(self.order):
            raise ValueError(f"order {self.order} needs {channel_count(self.order)} channels, "
                             f"got {self.samples.shape[0]}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("non-finite B-format samples")

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]


# ---------------------------------------------------------------- spherical harmonics

def _legendre_table(order: int, x: float) -> np.ndarray:
    """Associated Legendre P_n^m(x) for 0 <= m <= n <= order, without the
    Condon-Shortley phase. Returned as ``table[n, m]``."""
    table = np.zeros((order + 1, order + 1))
    s = math.sqrt(max(0.0, 1.0 - x * x))
    table[0, 0] = 1.0
    for m in range(1, order + 1):
        table[m, m] = (2 * m - 1) * s * table[m - 1, m - 1]
    for m in range(order):
        table[m + 1, m] = (2 * m + 1) * x * table[m, m]
    for m in range(order + 1):
        for n in range(m + 2, order + 1):
            table[n, m] = ((2 * n - 1) * x * table[n - 1, m] - (n + m - 1) * table[n - 2, m]) / (n - m)
    return table


def sn3d_harmonics(azimuth: float, elevation: float, order: int) -> np.ndarray:
    """Real SN3D spherical harmonics in ACN order for one direction."""
    p = _legendre_table(order, math.sin(elevation))
    out = np.empty(channel_count(order))
    for n in range(order + 1):
        for m in range(-n, n + 1):
            am = abs(m)
            norm = math.sqrt((1.0 if m == 0 else 2.0) * math.factorial(n - am) / math.factorial(n + am))
            if m > 0:
                trig = math.cos(m * azimuth)
            elif m < 0:
                trig = math.sin(am * azimuth)
            else:
                trig = 1.0
            out[acn_index(n, m)] = norm * p[n, am] * trig
    return out


def encode_plane_wave(azimuth: float, elevation: float, order: int, mono,
                      sample_rate: int = 44100) -> BFormatSignal:
    """Pan a mono signal to direction ``(azimuth, elevation)`` (radians)."""
    if not 0 <= order <= MAX_ENCODE_ORDER:
        raise ValueError(f"encoding supports orders 0..{MAX_ENCODE_ORDER}, got {order}")
    gains = sn3d_harmonics(azimuth, elevation, order)
    mono = np.asarray(mono, dtype=np.float64).reshape(-1)
    return BFormatSignal(order, sample_rate, gains[:, None] * mono[None, :])


def truncate_order(b: BFormatSignal, new_order: int) -> BFormatSignal:
    if new_order < 0 or new_order > b.order:
        raise ValueError(f"cannot truncate order {b.order} to {new_order}")
    return BFormatSignal(new_order, b.sample_rate, b.samples[:channel_count(new_order)].copy())


# ---------------------------------------------------------------- rendering

class DegenerateLayoutError(ValueError):
    pass


@dataclass
class SpeakerLayout:
    name: str
    directions: list[tuple[float, float]]  # (azimuth, elevation) in radians, one per fed speaker
    # output positions carrying silence (LFE); feeds are interleaved around them
    silent_outputs: tuple[int, ...] = field(default=())
    labels: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if not self.directions:
            raise ValueError("a layout needs at least one speaker")
        if not self.labels:
            self.labels = tuple(f"spk{i + 1}" for i in range(self.n_outputs))
        if len(self.labels) != self.n_outputs:
            raise ValueError("one label per output is required")
        units = [_unit(a, e) for a, e in self.directions]
        for i in range(len(units)):
            for j in range(i):
                if np.linalg.norm(units[i] - units[j]) < 1e-9:
                    raise ValueError(f"speakers {j} and {i} share a direction")

    @property
    def n_outputs(self) -> int:
        return len(self.directions) + len(self.silent_outputs)


def _unit(az: float, el: float) -> np.ndarray:
    return np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])


def speaker_matrix(layout: SpeakerLayout, order: int) -> np.ndarray:
    """``[channels, speakers]`` matrix of SN3D harmonics at the speaker directions."""
    return np.stack([sn3d_harmonics(a, e, order) for a, e in layout.directions], axis=1)


def decoding_matrix(layout: SpeakerLayout, order: int, eps: float = DECODER_REGULARIZATION,
                    rank_tol: float = 1e-8) -> np.ndarray:
    """Tikhonov-regularized pseudoinverse of :func:`speaker_matrix`, ``[speakers, channels]``."""
    y = speaker_matrix(layout, order)
    u, s, vt = np.linalg.svd(y, full_matrices=False)
    if s[-1] <= rank_tol * s[0]:
        raise DegenerateLayoutError(
            f"layout {layout.name!r} is rank deficient for order {order} "
            f"(singular values {s[0]:.3g} .. {s[-1]:.3g})")
    return vt.T @ np.diag(s / (s * s + eps)) @ u.T


def render(b: BFormatSignal, layout: SpeakerLayout) -> np.ndarray:
    """Mode-matching decode to speaker feeds ``[n_outputs, frames]``."""
    feeds = decoding_matrix(layout, b.order) @ b.samples
    if not layout.silent_outputs:
        return feeds
    out = np.zeros((layout.n_outputs, b.samples.shape[1]))
    fed = [i for i in range(layout.n_outputs) if i not in set(layout.silent_outputs)]
    out[fed] = feeds
    return out


def _deg(*pairs):
    return [(math.radians(a), math.radians(e)) for a, e in pairs]


LAYOUTS = {
    # L R C LFE Ls Rs Lb Rb Ltf Rtf Ltb Rtb; azimuth positive to the left
    "7.1.4": SpeakerLayout("7.1.4", _deg((30, 0), (-30, 0), (0, 0), (90, 0), (-90, 0), (135, 0), (-135, 0),
                                         (45, 35), (-45, 35), (135, 35), (-135, 35)),
                           silent_outputs=(3,),
                           labels=("L", "R", "C", "LFE", "Ls", "Rs", "Lb", "Rb", "Ltf", "Rtf", "Ltb", "Rtb")),
    "cube8": SpeakerLayout("cube8", _deg(*[(az, el) for el in (35.26439, -35.26439)
                                           for az in (45, 135, -135, -45)])),
    "stereo": SpeakerLayout("stereo", _deg((30, 0), (-30, 0)), labels=("L", "R")),
}


def get_layout(name: str) -> SpeakerLayout:
    try:
        return LAYOUTS[name]
    except KeyError:
        raise KeyError(f"unknown layout {name!r}; choose from {sorted(LAYOUTS)}") from None


def spread_layout(n: int, name: str | None = None) -> SpeakerLayout:
    """``n`` speakers on a Fibonacci sphere lattice."""
    golden = math.pi * (3.0 - math.sqrt(5.0))
    dirs = []
    for i in range(n):
        z = 1.0 - 2.0 * (i + 0.5) / n
        dirs.append((math.remainder(golden * i, 2 * math.pi), math.asin(z)))
    return SpeakerLayout(name or f"spread{n}", dirs)


# ---------------------------------------------------------------- Bessel / pressure field

_SERIES_LIMIT = 12.0


def _bessel_series(m: int, x: float) -> float:
    half = 0.5 * x
    term = half ** m / math.factorial(m)
    total = term
    q = -half * half
    k = 0
    while True:
        k += 1
        term *= q / (k * (k + m))
        total += term
        if abs(term) < 1e-17 * max(1.0, abs(total)) and k > 2:
            return total


def _bessel_miller(m: int, x: float) -> float:
    """Downward recurrence from a high start order, normalized by
    ``J_0 + 2 * sum_k J_2k = 1``."""
    start = 2 * ((max(m, int(x)) + 20 + int(math.sqrt(60.0 * max(m, x)))) // 2)
    j_next, j = 0.0, 1e-300
    norm = 0.0
    result = 0.0
    for n in range(start, 0, -1):
        j_prev = 2.0 * n / x * j - j_next
        j_next, j = j, j_prev
        if abs(j) > 1e250:
            j *= 1e-250
            j_next *= 1e-250
            result *= 1e-250
            norm *= 1e-250
        if n - 1 == m:
            result = j
        if (n - 1) % 2 == 0 and n - 1 > 0:
            norm += 2.0 * j
    norm += j  # J_0 term
    return result / norm


def bessel_j(m: int, x: float) -> float:
    """Cylindrical Bessel function of the first kind, integer order ``m >= 0``."""
    if m < 0:
        raise ValueError("order must be non-negative")
    if not math.isfinite(x):
        raise ValueError("argument must be finite")
    if x < 0:
        return (-1) ** m * bessel_j(m, -x)
    if x == 0.0:
        return 1.0 if m == 0 else 0.0
    if x < _SERIES_LIMIT:
        return _bessel_series(m, x)
    return _bessel_miller(m, x)


@dataclass
class PressureFieldSpec:
    coefficients: list[tuple[int, int, float]]  # (m, +1 | -1, value)
    truncation_order: int
    wave_number: float
    radius: float
    angle: float

    def __post_init__(self):
        if self.truncation_order < 0:
            raise ValueError("truncation order must be non-negative")
        for m, sign, _ in self.coefficients:
            if not 0 <= m <= self.truncation_order:
                raise ValueError(f"coefficient order {m} outside 0..{self.truncation_order}")
            if sign not in (1, -1):
                raise ValueError("sign must be +1 or -1")
            if m == 0 and sign != 1:
                raise ValueError("order 0 has only the +1 (cosine) term")


def pressure_field(spec: PressureFieldSpec) -> float:
    """Pressure at ``(radius, angle)`` from circular-harmonic coefficients ``B_mm^{+-1}``."""
    kr = spec.wave_number * spec.radius
    cos_terms: dict[int, float] = {}
    sin_terms: dict[int, float] = {}
    for m, sign, value in spec.coefficients:
        bucket = cos_terms if sign == 1 else sin_terms
        bucket[m] = bucket.get(m, 0.0) + value
    p = cos_terms.get(0, 0.0) * bessel_j(0, kr)
    for m in range(1, spec.truncation_order + 1):
        a, b = cos_terms.get(m, 0.0), sin_terms.get(m, 0.0)
        if a or b:
            p += bessel_j(m, kr) * math.sqrt(2.0) * (a * math.cos(m * spec.angle) + b * math.sin(m * spec.angle))
    return p
