"""Desk-scale differentiable splat renderer.

Isotropic 3D Gaussians are viewed by an orthographic camera that circles the
vertical axis. Pixels are alpha-composited front to back; because the
composite is linear in each primitive's appearance value once geometry and
opacity are fixed, the exact appearance Jacobian is available in closed form
and is what the embedding loop differentiates through.

Images travel as float arrays in [0, 1]; for interchange they serialize as
plain-text PGM (P2, maxval 65535) or as a raw little-endian float64 dump
with an (H, W) uint32 header.
"""

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

CUTOFF_SIGMAS = 3.0  # cull a primitive's footprint beyond this many radii


@dataclass
class Viewpoint:
    """Orthographic camera on the azimuth ring.

    azimuth is degrees in [0, 360); ortho_extent is the scene half-width
    mapped onto the image width (pixel size = 2 * extent / W, square pixels).
    """

    azimuth: float
    image_size: tuple = (64, 64)
    ortho_extent: float = 1.0

    def __post_init__(self):
        self.azimuth = float(self.azimuth) % 360.0
        h, w = self.image_size
        if h < 8 or w < 8:
            raise ValueError(f"image must be at least 8x8, got {self.image_size}")
        if self.ortho_extent <= 0:
            raise ValueError("ortho_extent must be positive")


@dataclass
class GaussianFrame:
    """One timestep's Gaussian population, stored as arrays.

    mu: (N, 3) centers; scale: (N,) isotropic footprint radii > 0;
    opacity: (N,) in [0, 1]; appearance: (N, k) DC values in [0, 1].
    """

    mu: np.ndarray
    scale: np.ndarray
    opacity: np.ndarray
    appearance: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.scale = np.asarray(self.scale, dtype=float)
        self.opacity = np.asarray(self.opacity, dtype=float)
        self.appearance = np.asarray(self.appearance, dtype=float)
        if self.appearance.ndim == 1:
            self.appearance = self.appearance[:, np.newaxis]
        n = self.mu.shape[0]
        if n < 1:
            raise ValueError("frame must contain at least one primitive")
        if self.mu.shape != (n, 3):
            raise ValueError(f"mu must be (N, 3), got {self.mu.shape}")
        if self.scale.shape != (n,) or np.any(self.scale <= 0):
            raise ValueError("scale must be positive, one per primitive")
        if self.opacity.shape != (n,) or np.any((self.opacity < 0) | (self.opacity > 1)):
            raise ValueError("opacity must lie in [0, 1], one per primitive")
        if self.appearance.shape[0] != n:
            raise ValueError("appearance must have one row per primitive")

    def __len__(self):
        return self.mu.shape[0]

    @property
    def k(self):
        return self.appearance.shape[1]

    def copy(self):
        return GaussianFrame(self.mu.copy(), self.scale.copy(),
                             self.opacity.copy(), self.appearance.copy())


@dataclass
class SceneSequence:
    """Time-indexed Gaussian populations plus bookkeeping for kinematics.

    path_ids[t][i] maps the i-th primitive of frame t to its underlying
    trajectory, surviving any per-frame reshuffling or resampling.
    """

    frames: list
    dt: float = 1.0
    path_ids: list = field(default=None, repr=False)

    def __post_init__(self):
        if not self.frames:
            raise ValueError("scene needs at least one frame")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.path_ids is None:
            self.path_ids = [np.arange(len(f)) for f in self.frames]

    def __len__(self):
        return len(self.frames)

    def copy(self):
        return SceneSequence(frames=[f.copy() for f in self.frames], dt=self.dt,
                             path_ids=[np.asarray(p).copy() for p in self.path_ids])


def azimuth_rotation(azimuth_deg):
    """Rotation matrix about the vertical (y) axis for the given azimuth."""
    th = np.deg2rad(azimuth_deg)
    c, s = np.cos(th), np.sin(th)
    return np.array([[c, 0.0, s],
                     [0.0, 1.0, 0.0],
                     [-s, 0.0, c]])


def pixels_per_unit(view: Viewpoint):
    """Pixels per scene unit at this view's orthographic scale."""
    return view.image_size[1] / (2.0 * view.ortho_extent)


def project(mu, view: Viewpoint, scale=1.0):
    """Project centers into pixel coordinates under the view's azimuth.

    Returns (centers_px (N, 2) as (col, row), depth (N,), footprint radius
    in pixels). The camera looks along -z after rotation, so larger depth is
    closer. Pixel centers sit at half-integer offsets: scene x spanning
    [-extent, extent] maps onto columns [-0.5, W - 0.5].
    """
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    h, w = view.image_size
    rot = mu @ azimuth_rotation(view.azimuth).T
    ppu = pixels_per_unit(view)
    col = rot[:, 0] * ppu + w / 2.0 - 0.5
    row = -rot[:, 1] * ppu + h / 2.0 - 0.5
    centers = np.stack([col, row], axis=1)
    return centers, rot[:, 2], np.asarray(scale, dtype=float) * ppu


def _footprints(frame: GaussianFrame, view: Viewpoint):
    """Per-primitive projected center, pixel radius, and depth order."""
    centers, depth, radii = project(frame.mu, view, frame.scale)
    order = np.lexsort((np.arange(len(frame)), -depth))  # front first, ties by index
    return centers, radii, order


def _gaussian_patch(center, radius, h, w):
    """Footprint window and exp(-d^2 / (2 rho^2)) values, or None if off-screen."""
    cut = CUTOFF_SIGMAS * radius
    c0 = max(int(np.ceil(center[0] - cut)), 0)
    c1 = min(int(np.floor(center[0] + cut)), w - 1)
    r0 = max(int(np.ceil(center[1] - cut)), 0)
    r1 = min(int(np.floor(center[1] + cut)), h - 1)
    if c0 > c1 or r0 > r1:
        return None
    cols = np.arange(c0, c1 + 1)
    rows = np.arange(r0, r1 + 1)
    d2 = ((cols - center[0]) ** 2)[np.newaxis, :] + ((rows - center[1]) ** 2)[:, np.newaxis]
    g = np.exp(-d2 / (2.0 * radius**2))
    return (slice(r0, r1 + 1), slice(c0, c1 + 1)), g


def render_appearance_jacobian(frame: GaussianFrame, view: Viewpoint):
    """Exact per-pixel compositing weight of each primitive's appearance.

    Returns a CSR matrix of shape (H * W, N): pixel p's rendered value is
    row p dotted with the appearance column. Weights are alpha * G' times
    the transmittance of everything in front, so each row sums to <= 1.
    """
    h, w = view.image_size
    centers, radii, order = _footprints(frame, view)
    transmittance = np.ones((h, w))
    flat_index = np.arange(h * w).reshape(h, w)
    rows, cols, vals = [], [], []
    for i in order:
        patch = _gaussian_patch(centers[i], radii[i], h, w)
        if patch is None:
            continue
        window, g = patch
        weight = frame.opacity[i] * g * transmittance[window]
        rows.append(flat_index[window].ravel())
        cols.append(np.full(weight.size, i))
        vals.append(weight.ravel())
        transmittance[window] = transmittance[window] * (1.0 - frame.opacity[i] * g)
    if rows:
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(h * w, len(frame)))


def render(frame: GaussianFrame, view: Viewpoint, jacobian=None):
    """Alpha-composite the frame into an (H, W, k) image.

    Primitives are blended front to back over a black background:
    sum_k c_k alpha_k G'_k prod_{l before k} (1 - alpha_l G'_l). The result
    is exactly the appearance Jacobian applied to the appearance vector, so
    pixels stay in [0, 1] whenever appearance and opacity do. A precomputed
    Jacobian may be passed to skip rasterization.
    """
    h, w = view.image_size
    if jacobian is None:
        jacobian = render_appearance_jacobian(frame, view)
    img = jacobian @ frame.appearance
    return img.reshape(h, w, frame.k)


def view_ring(interval_deg=15.0, image_size=(64, 64), extent=1.0):
    """Uniform azimuth ring: 360 / interval viewpoints starting at 0 degrees."""
    n = 360.0 / interval_deg
    if abs(n - round(n)) > 1e-9:
        raise ValueError(f"interval {interval_deg} does not divide 360")
    return [Viewpoint(azimuth=i * interval_deg, image_size=image_size,
                      ortho_extent=extent) for i in range(int(round(n)))]


# --- image interchange -------------------------------------------------------

def write_pgm(path, image, maxval=65535):
    """Plain-text PGM (P2) of a grayscale [0, 1] image."""
    img = np.asarray(image, dtype=float)
    if img.ndim == 3:
        img = img.mean(axis=2)
    levels = np.clip(np.round(img * maxval), 0, maxval).astype(int)
    h, w = levels.shape
    with open(path, "w") as fh:
        fh.write(f"P2\n{w} {h}\n{maxval}\n")
        for row in levels:
            fh.write(" ".join(str(v) for v in row) + "\n")


def read_pgm(path):
    """Read a plain-text PGM (P2) back into a float [0, 1] array."""
    with open(path) as fh:
        tokens = []
        for line in fh:
            hash_pos = line.find("#")
            if hash_pos >= 0:
                line = line[:hash_pos]
            tokens.extend(line.split())
    if tokens[0] != "P2":
        raise ValueError(f"not a plain PGM file: magic {tokens[0]!r}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    data = np.array(tokens[4:4 + w * h], dtype=float).reshape(h, w)
    return data / maxval


def write_raw(path, image):
    """Raw dump: uint32-LE (H, W) header then row-major float64-LE pixels."""
    img = np.asarray(image, dtype="<f8")
    if img.ndim == 3:
        img = img.mean(axis=2)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", h, w))
        fh.write(img.tobytes())


def read_raw(path):
    """Read the raw float64 image format written by write_raw."""
    with open(path, "rb") as fh:
        h, w = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(8 * h * w), dtype="<f8")
    return data.reshape(h, w).copy()
