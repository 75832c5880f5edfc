"""Image-space robustness attacks and bit-accuracy scoring.

Each attack maps a [0, 1] image to a distorted image of the same size.
Stochastic parameters (rotation angle, scale factor, resize factor) are
drawn once per invocation from the attack's seed, so a given (image, spec)
pair always produces the same output.
"""

from dataclasses import dataclass

import numpy as np
from scipy.fft import dctn, idctn

ATTACK_KINDS = ("none", "noise", "rotation", "scaling", "blur", "crop",
                "resize", "jpeg")

DEFAULT_PARAMETERS = {
    "none": 0.0,
    "noise": 0.1,
    "rotation": np.pi / 6.0,
    "scaling": 0.25,
    "blur": 0.1,
    "crop": 0.20,
    "resize": (0.9, 1.0),
    "jpeg": 50.0,
}

# Standard JPEG luminance quantization table.
_JPEG_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=float)


@dataclass
class AttackSpec:
    """One distortion: its kind, strength parameter, and RNG seed."""

    kind: str
    parameter: object = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; choose from {ATTACK_KINDS}")
        if self.parameter is None:
            self.parameter = DEFAULT_PARAMETERS[self.kind]
        _validate_parameter(self.kind, self.parameter)


def _validate_parameter(kind, p):
    if kind == "none":
        return
    if kind == "noise" and not 0 <= p:
        raise ValueError(f"noise std must be >= 0, got {p}")
    elif kind == "rotation" and not 0 <= p <= np.pi:
        raise ValueError(f"rotation bound must be in [0, pi] radians, got {p}")
    elif kind == "scaling" and not 0 <= p <= 0.25:
        raise ValueError(f"scaling fraction must be in [0, 0.25], got {p}")
    elif kind == "blur" and not 0 <= p:
        raise ValueError(f"blur sigma must be >= 0, got {p}")
    elif kind == "crop" and not 0 <= p < 1:
        raise ValueError(f"crop fraction must be in [0, 1), got {p}")
    elif kind == "resize":
        lo, hi = p if np.ndim(p) else (float(p), 1.0)
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"resize range must satisfy 0 < lo <= hi <= 1, got {p}")
    elif kind == "jpeg" and not 1 <= p <= 100:
        raise ValueError(f"jpeg quality must be in [1, 100], got {p}")


def default_suite(seed=0):
    """The standard robustness suite: one spec per attack kind."""
    return [AttackSpec(kind, seed=seed + i) for i, kind in enumerate(ATTACK_KINDS)]


def _bilinear(img, rows, cols):
    """Sample a 2-D image at float coordinates; zero outside the frame."""
    h, w = img.shape
    r0 = np.floor(rows).astype(int)
    c0 = np.floor(cols).astype(int)
    dr = rows - r0
    dc = cols - c0
    out = np.zeros(rows.shape)
    for ro, co, wgt in ((r0, c0, (1 - dr) * (1 - dc)),
                        (r0, c0 + 1, (1 - dr) * dc),
                        (r0 + 1, c0, dr * (1 - dc)),
                        (r0 + 1, c0 + 1, dr * dc)):
        ok = (ro >= 0) & (ro < h) & (co >= 0) & (co < w)
        out[ok] += wgt[ok] * img[ro[ok], co[ok]]
    return out


def _rotate(channel, angle):
    h, w = channel.shape
    cr, cc = (h - 1) / 2.0, (w - 1) / 2.0
    rr, cc_grid = np.meshgrid(np.arange(h, dtype=float),
                              np.arange(w, dtype=float), indexing="ij")
    ca, sa = np.cos(angle), np.sin(angle)
    # inverse map: rotate destination coords by -angle about the center
    dy, dx = rr - cr, cc_grid - cc
    src_r = ca * dy - sa * dx + cr
    src_c = sa * dy + ca * dx + cc
    return _bilinear(channel, src_r, src_c)


def _scale_about_center(channel, factor):
    h, w = channel.shape
    cr, cc = (h - 1) / 2.0, (w - 1) / 2.0
    rr, cc_grid = np.meshgrid(np.arange(h, dtype=float),
                              np.arange(w, dtype=float), indexing="ij")
    src_r = (rr - cr) / factor + cr
    src_c = (cc_grid - cc) / factor + cc
    return _bilinear(channel, src_r, src_c)


def _resize_to(channel, hs, ws):
    h, w = channel.shape
    rows = np.linspace(0, h - 1, hs) if hs > 1 else np.array([(h - 1) / 2.0])
    cols = np.linspace(0, w - 1, ws) if ws > 1 else np.array([(w - 1) / 2.0])
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return _bilinear(channel, rr, cc)


def _gaussian_blur(channel, sigma):
    radius = int(np.ceil(3.0 * sigma))
    if radius < 1:
        return channel.copy()
    x = np.arange(-radius, radius + 1, dtype=float)
    kernel = np.exp(-x**2 / (2.0 * sigma**2))
    kernel /= kernel.sum()
    padded = np.pad(channel, radius, mode="reflect")
    tmp = np.apply_along_axis(np.convolve, 1, padded, kernel, mode="valid")
    out = np.apply_along_axis(np.convolve, 0, tmp, kernel, mode="valid")
    return out


def _jpeg_roundtrip(channel, quality):
    """From-scratch JPEG-style degradation: blockwise DCT quantization.

    Works on the 0..255 scale with the usual 128 level shift; the luminance
    table is scaled by (200 - 2q)/100 for q >= 50 (else 5000/q/100), entries
    floored at 1. No entropy coding: the goal is the codec's
    frequency-selective loss, not byte compatibility.
    """
    scale = (200.0 - 2.0 * quality) / 100.0 if quality >= 50 else 50.0 / quality
    qtable = np.maximum(np.round(_JPEG_LUMA * scale), 1.0)
    h, w = channel.shape
    ph, pw = (-h) % 8, (-w) % 8
    padded = np.pad(channel * 255.0 - 128.0, ((0, ph), (0, pw)), mode="edge")
    hb, wb = padded.shape[0] // 8, padded.shape[1] // 8
    blocks = padded.reshape(hb, 8, wb, 8).transpose(0, 2, 1, 3)
    coeffs = dctn(blocks, type=2, norm="ortho", axes=(2, 3))
    coeffs = np.round(coeffs / qtable) * qtable
    rec = idctn(coeffs, type=2, norm="ortho", axes=(2, 3))
    rec = rec.transpose(0, 2, 1, 3).reshape(padded.shape)
    return np.clip((rec[:h, :w] + 128.0) / 255.0, 0.0, 1.0)


def apply_attack(image, spec: AttackSpec):
    """Apply one distortion; the result has the input's shape and dtype float."""
    img = np.asarray(image, dtype=float)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, np.newaxis]
    h, w, k = img.shape
    rng = np.random.default_rng(spec.seed)
    p = spec.parameter

    if spec.kind == "none":
        out = img.copy()
    elif spec.kind == "noise":
        out = np.clip(img + rng.normal(0.0, p, size=img.shape), 0.0, 1.0)
    elif spec.kind == "rotation":
        angle = rng.uniform(-p, p)
        out = np.stack([_rotate(img[:, :, c], angle) for c in range(k)], axis=2)
    elif spec.kind == "scaling":
        factor = rng.uniform(1.0 - p, 1.0 + p)
        out = np.stack([_scale_about_center(img[:, :, c], factor) for c in range(k)], axis=2)
    elif spec.kind == "blur":
        out = np.stack([_gaussian_blur(img[:, :, c], p) for c in range(k)], axis=2)
    elif spec.kind == "crop":
        keep_h = int(round(h * np.sqrt(1.0 - p)))
        keep_w = int(round(w * np.sqrt(1.0 - p)))
        out = np.zeros_like(img)
        r0, c0 = (h - keep_h) // 2, (w - keep_w) // 2
        out[r0:r0 + keep_h, c0:c0 + keep_w] = img[r0:r0 + keep_h, c0:c0 + keep_w]
    elif spec.kind == "resize":
        lo, hi = p if np.ndim(p) else (float(p), 1.0)
        factor = rng.uniform(lo, hi)
        hs, ws = max(int(round(h * factor)), 1), max(int(round(w * factor)), 1)
        out = np.stack([_resize_to(_resize_to(img[:, :, c], hs, ws), h, w)
                        for c in range(k)], axis=2)
    elif spec.kind == "jpeg":
        out = np.stack([_jpeg_roundtrip(img[:, :, c], p) for c in range(k)], axis=2)
    else:  # pragma: no cover - guarded by AttackSpec
        raise ValueError(spec.kind)

    return out[:, :, 0] if squeeze else out


def bit_accuracy(soft_bits, message_bits):
    """Fraction of thresholded soft bits matching the message.

    The threshold is strict: a soft bit of exactly 0.5 decodes as 0.
    """
    soft = np.asarray(soft_bits, dtype=float)
    bits = np.asarray(message_bits, dtype=int)
    if soft.shape != bits.shape:
        raise ValueError(f"length mismatch: {soft.shape} vs {bits.shape}")
    return float(np.mean((soft > 0.5) == (bits == 1)))


# --- suite files --------------------------------------------------------------

def write_suite(path, specs):
    """Attack suite file: one `kind parameter seed` triple per line."""
    with open(path, "w") as fh:
        for s in specs:
            if np.ndim(s.parameter):
                param = ":".join("%.10g" % v for v in s.parameter)
            else:
                param = "%.10g" % s.parameter
            fh.write(f"{s.kind} {param} {s.seed}\n")


def read_suite(path):
    specs = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            kind, param, seed = line.split()
            parameter = tuple(float(v) for v in param.split(":")) if ":" in param \
                else float(param)
            specs.append(AttackSpec(kind=kind, parameter=parameter, seed=int(seed)))
    return specs


def write_results(path, rows):
    """Results CSV with header attack,parameter,bit_acc."""
    with open(path, "w") as fh:
        fh.write("attack,parameter,bit_acc\n")
        for kind, param, acc in rows:
            if np.ndim(param):
                param = ":".join("%.10g" % v for v in param)
            else:
                param = "%.10g" % param
            fh.write(f"{kind},{param},{acc:.10g}\n")
