"""Watermark embedding: wavelet analysis, frozen decoder, losses, routing.

The message is pressed into the appearance values of a Gaussian scene by
plain gradient descent. Every supervised (timestep, view) render is pushed
so that a frozen random linear probe of its coarsest Haar low-pass band
recovers the payload bits, while wavelet-detail and pixel reconstruction
terms hold fidelity and the transport-aligned consistency energy keeps the
signal coherent across frames. Gradients of the watermark terms are gated
per primitive by the kinematic confidence weight, so high-curvature motion
is shielded.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import energy as energy_mod
from . import transport
from .attacks import bit_accuracy
from .kinematics import Trajectory, kinematic_profile, normalize_weights
from .splat_field import GaussianFrame, SceneSequence, render_appearance_jacobian

SOFT_BIT_CLAMP = 1e-7


# --- payload ------------------------------------------------------------------

@dataclass
class WatermarkMessage:
    """An L-bit binary payload."""

    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=int)
        if self.bits.ndim != 1 or self.bits.size < 1:
            raise ValueError("message must be a nonempty 1-D bit sequence")
        if not np.all((self.bits == 0) | (self.bits == 1)):
            raise ValueError("message bits must be 0 or 1")

    def __len__(self):
        return self.bits.size

    @classmethod
    def random(cls, length=48, seed=0):
        rng = np.random.default_rng(seed)
        return cls(rng.integers(0, 2, size=length))


def write_message(path, message: WatermarkMessage):
    with open(path, "w") as fh:
        fh.write("".join(str(b) for b in message.bits) + "\n")


def read_message(path) -> WatermarkMessage:
    with open(path) as fh:
        line = fh.readline().strip()
    if not line or set(line) - {"0", "1"}:
        raise ValueError(f"message file must hold one line of 0/1 characters, got {line!r}")
    return WatermarkMessage(np.array([int(c) for c in line]))


# --- Haar wavelet pyramid -----------------------------------------------------

@dataclass
class WaveletPyramid:
    """Orthonormal 2-D Haar decomposition.

    ll is the coarsest low-pass band; details[l] = (LH, HL, HH) with level 0
    the finest. The transform is orthogonal, so the inverse is exact and
    coefficient energy equals image energy.
    """

    ll: np.ndarray
    details: list
    levels: int


def _haar_split(img):
    a = img[0::2, 0::2]
    b = img[0::2, 1::2]
    c = img[1::2, 0::2]
    d = img[1::2, 1::2]
    ll = (a + b + c + d) / 2.0
    lh = (a - b + c - d) / 2.0
    hl = (a + b - c - d) / 2.0
    hh = (a - b - c + d) / 2.0
    return ll, lh, hl, hh


def _haar_merge(ll, lh, hl, hh):
    h2, w2 = ll.shape
    out = np.empty((2 * h2, 2 * w2))
    out[0::2, 0::2] = (ll + lh + hl + hh) / 2.0
    out[0::2, 1::2] = (ll - lh + hl - hh) / 2.0
    out[1::2, 0::2] = (ll + lh - hl - hh) / 2.0
    out[1::2, 1::2] = (ll - lh - hl + hh) / 2.0
    return out


def dwt_forward(image, levels=2) -> WaveletPyramid:
    """Multi-level orthonormal Haar analysis of a 2-D image."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise ValueError(f"dwt_forward expects a 2-D image, got shape {img.shape}")
    if levels < 1:
        raise ValueError("levels must be >= 1")
    h, w = img.shape
    div = 2**levels
    if h % div or w % div:
        raise ValueError(f"image dims {h}x{w} must be divisible by 2^levels = {div}")
    details = []
    ll = img
    for _ in range(levels):
        ll, lh, hl, hh = _haar_split(ll)
        details.append((lh, hl, hh))
    return WaveletPyramid(ll=ll, details=details, levels=levels)


def dwt_inverse(pyramid: WaveletPyramid):
    """Exact inverse of dwt_forward."""
    img = pyramid.ll
    for lh, hl, hh in reversed(pyramid.details):
        if lh.shape != img.shape:
            raise ValueError("pyramid band shapes are inconsistent")
        img = _haar_merge(img, lh, hl, hh)
    return img


# --- frozen decoder -----------------------------------------------------------

_SM_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SM_M1 = np.uint64(0xBF58476D1CE4E5B9)
_SM_M2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(seed, count):
    """First `count` outputs of the splitmix64 stream seeded at `seed`."""
    idx = np.arange(1, count + 1, dtype=np.uint64)
    z = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + idx * _SM_GAMMA
    z = (z ^ (z >> np.uint64(30))) * _SM_M1
    z = (z ^ (z >> np.uint64(27))) * _SM_M2
    return z ^ (z >> np.uint64(31))


def _seeded_normals(seed, count):
    """Standard normals from splitmix64 words via Box-Muller."""
    pairs = (count + 1) // 2
    words = _splitmix64(seed, 2 * pairs)
    u1 = (((words[:pairs] >> np.uint64(11)).astype(np.float64)) + 1.0) * 2.0**-53
    u2 = ((words[pairs:] >> np.uint64(11)).astype(np.float64)) * 2.0**-53
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    return np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:count]


@dataclass
class FrozenDecoder:
    """Fixed random linear probe of the coarsest LL band(s).

    ll_shape is (H, W) for grayscale input or (H, W, k) for k-channel input
    (per-channel LL bands concatenated). Weights and bias regenerate
    bit-exactly from (seed, n_bits, ll_shape); they are never updated during
    embedding. Each weight row is centered to zero sum, so the probe ignores
    uniform brightness shifts and responds only to LL structure.
    """

    seed: int
    n_bits: int
    ll_shape: tuple
    weight: np.ndarray = field(repr=False, default=None)
    bias: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        self.ll_shape = tuple(int(v) for v in self.ll_shape)
        p = int(np.prod(self.ll_shape))
        if self.weight is None:
            draws = _seeded_normals(self.seed, self.n_bits * p + self.n_bits)
            sigma = 1.0 / math.sqrt(p)
            w = (draws[: self.n_bits * p] * sigma).reshape(self.n_bits, p)
            self.weight = w - w.mean(axis=1, keepdims=True)
            self.bias = draws[self.n_bits * p:] / p
        if self.bias is None:
            self.bias = np.zeros(self.n_bits)

    def logits(self, ll_band):
        ll = np.asarray(ll_band, dtype=float)
        if ll.shape != self.ll_shape:
            raise ValueError(f"LL band shape {ll.shape} does not match decoder {self.ll_shape}")
        return self.weight @ ll.ravel() + self.bias


def decode_message(ll_band, decoder: FrozenDecoder):
    """Soft bits logistic(W @ ll + b), each in (0, 1)."""
    return 1.0 / (1.0 + np.exp(-decoder.logits(ll_band)))


def write_decoder_spec(path, decoder: FrozenDecoder):
    with open(path, "w") as fh:
        fh.write(f"seed = {decoder.seed}\n")
        fh.write(f"n_bits = {decoder.n_bits}\n")
        fh.write("ll_shape = " + " ".join(str(v) for v in decoder.ll_shape) + "\n")


def read_decoder_spec(path) -> FrozenDecoder:
    fields = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
    try:
        return FrozenDecoder(seed=int(fields["seed"]), n_bits=int(fields["n_bits"]),
                             ll_shape=tuple(int(v) for v in fields["ll_shape"].split()))
    except KeyError as exc:
        raise ValueError(f"decoder spec missing key {exc}") from exc


# --- losses -------------------------------------------------------------------

def _clamped(soft_bits):
    return np.clip(np.asarray(soft_bits, dtype=float),
                   SOFT_BIT_CLAMP, 1.0 - SOFT_BIT_CLAMP)


def message_loss(soft_bits, message: WatermarkMessage):
    """Binary cross entropy between soft bits (clamped) and the payload."""
    soft = _clamped(soft_bits)
    if soft.size != len(message):
        raise ValueError(f"got {soft.size} soft bits for a {len(message)}-bit message")
    b = message.bits
    return float(-np.sum(b * np.log(soft) + (1 - b) * np.log(1.0 - soft)))


def message_loss_grad(soft_bits, message: WatermarkMessage):
    """Gradient of message_loss with respect to the soft bits.

    Zero where the clamp is active (the loss is flat there).
    """
    raw = np.asarray(soft_bits, dtype=float)
    if raw.size != len(message):
        raise ValueError(f"got {raw.size} soft bits for a {len(message)}-bit message")
    soft = _clamped(raw)
    b = message.bits
    grad = -b / soft + (1 - b) / (1.0 - soft)
    grad[(raw < SOFT_BIT_CLAMP) | (raw > 1.0 - SOFT_BIT_CLAMP)] = 0.0
    return grad


def wavelet_subband_loss(image, reference, levels=2):
    """Mean absolute difference over every high-frequency Haar coefficient."""
    image = np.asarray(image, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if image.shape != reference.shape:
        raise ValueError(f"image shapes differ: {image.shape} vs {reference.shape}")
    pa = dwt_forward(image, levels)
    pb = dwt_forward(reference, levels)
    total = 0.0
    count = 0
    for bands_a, bands_b in zip(pa.details, pb.details):
        for ba, bb in zip(bands_a, bands_b):
            total += float(np.sum(np.abs(ba - bb)))
            count += ba.size
    return total / count


@dataclass
class LossWeights:
    """Multipliers of the four loss terms."""

    wm: float = 1.0
    wav: float = 0.5
    con: float = 0.1
    rec: float = 1.0

    def __post_init__(self):
        if min(self.wm, self.wav, self.con, self.rec) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class LossTerms:
    """Values of the four loss terms."""

    wm: float = 0.0
    wav: float = 0.0
    con: float = 0.0
    rec: float = 0.0


def total_loss(components: LossTerms, lambdas: LossWeights):
    """Weighted sum lambda_wm*wm + lambda_wav*wav + lambda_con*con + lambda_rec*rec."""
    return (lambdas.wm * components.wm + lambdas.wav * components.wav
            + lambdas.con * components.con + lambdas.rec * components.rec)


def routed_gradient(rec_grad, wm_grad, w):
    """Kinematic gradient routing: out[i] = rec_grad[i] + w[i] * wm_grad[i].

    rec_grad carries the ungated terms, wm_grad the watermark-related ones;
    w in [0, 1] shields high-curvature primitives from the latter.
    """
    rec_grad = np.asarray(rec_grad, dtype=float)
    wm_grad = np.asarray(wm_grad, dtype=float)
    w = np.asarray(w, dtype=float)
    if rec_grad.shape != wm_grad.shape or w.shape[0] != rec_grad.shape[0]:
        raise ValueError("gradient and weight lengths must agree")
    gate = w if rec_grad.ndim == 1 else w[:, np.newaxis]
    return rec_grad + gate * wm_grad


# --- embedding loop -----------------------------------------------------------

@dataclass
class EmbedConfig:
    """Knobs of the embedding optimizer and its regularizers."""

    lambdas: LossWeights = field(default_factory=LossWeights)
    step: float = 0.05
    max_epochs: int = 2000
    patience: int = 25
    levels: int = 2
    tau: float = 1.0
    eps: float = 1e-8
    knn: int = 8
    sigma_s: float = None
    ot_reg: float = None
    ot_tol: float = 1e-6
    ot_max_iter: int = 1000
    temporal: bool = True
    spatial: bool = True
    curvature: bool = True
    double_gate: bool = False
    train_views: list = None   # indices into the view list; None = all


@dataclass
class EmbedResult:
    """Watermarked scene plus the optimization record."""

    scene: SceneSequence
    trace: list                 # rows of (epoch, total, wm, wav, con, rec, acc)
    converged_epoch: int        # first epoch with all-view accuracy 1.0 (-1 if never)
    epochs_run: int
    weights: list               # per-frame gating weights actually used


TRACE_HEADER = "epoch,loss_total,loss_wm,loss_wav,loss_con,loss_rec,bit_acc"


def write_trace(path, trace):
    with open(path, "w") as fh:
        fh.write(TRACE_HEADER + "\n")
        for row in trace:
            fh.write("%d,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g\n" % tuple(row))


def scene_trajectories(scene: SceneSequence):
    """Per-path position sequences (P, T, 3) gathered from the frames.

    Requires every path to appear in every frame (stable topology up to
    reshuffling); resampled scenes should carry explicit trajectories.
    """
    ids = [np.asarray(p) for p in scene.path_ids]
    all_ids = sorted(set(np.concatenate(ids).tolist()))
    lookup = {pid: k for k, pid in enumerate(all_ids)}
    T = len(scene)
    out = np.full((len(all_ids), T, 3), np.nan)
    for t, frame in enumerate(scene.frames):
        for i, pid in enumerate(ids[t]):
            out[lookup[pid], t] = frame.mu[i]
    if np.any(np.isnan(out)):
        raise ValueError("scene topology is unstable; provide explicit trajectories")
    return out, lookup


def gating_weights(scene: SceneSequence, trajectories=None, tau=1.0, eps=1e-8,
                   curvature=True):
    """Per-frame gating weights from trajectory curvature.

    Raw confidence exp(-kappa/tau) is computed per (path, timestep) and then
    batch-normalized over every weight the scene actually uses. With the
    curvature gate disabled, every weight is 1.
    """
    if not curvature:
        return [np.ones(len(f)) for f in scene.frames]
    if trajectories is None:
        trajectories, lookup = scene_trajectories(scene)
    else:
        trajectories = np.asarray(trajectories, dtype=float)
        lookup = {pid: pid for pid in range(trajectories.shape[0])}
    raw = np.empty(trajectories.shape[:2])
    for p in range(trajectories.shape[0]):
        prof = kinematic_profile(Trajectory(trajectories[p], scene.dt),
                                 eps=eps, tau=tau)
        raw[p] = prof.weight
    per_frame_raw = [np.array([raw[lookup[pid], t] for pid in scene.path_ids[t]])
                     for t in range(len(scene))]
    flat = np.concatenate(per_frame_raw)
    flat_norm = normalize_weights(flat)
    out = []
    start = 0
    for arr in per_frame_raw:
        out.append(flat_norm[start:start + arr.size])
        start += arr.size
    return out


def image_ll_stack(image, levels):
    """Per-channel Haar pyramids and the stacked coarsest LL bands.

    Returns (ll, pyramids): ll is (h, w) for single-channel input and
    (h, w, k) otherwise, matching the decoder's ll_shape convention.
    """
    img = np.asarray(image, dtype=float)
    if img.ndim == 2:
        img = img[:, :, np.newaxis]
    pyrs = [dwt_forward(img[:, :, c], levels) for c in range(img.shape[2])]
    lls = np.stack([p.ll for p in pyrs], axis=2)
    return (lls[:, :, 0] if img.shape[2] == 1 else lls), pyrs


def _detail_bands(pyr):
    return [band for bands in pyr.details for band in bands]


def embed(scene: SceneSequence, message: WatermarkMessage, decoder: FrozenDecoder,
          views, config: EmbedConfig = None) -> EmbedResult:
    """Gradient-descent watermark embedding into appearance values.

    Geometry, scales and opacities stay frozen; only appearance moves, and it
    is clamped to [0, 1] after every step. Each epoch sweeps every supervised
    (timestep, view) pair, averages the loss gradients, routes the watermark
    part through the kinematic gate, and takes one descent step. Stops once
    every supervised view decodes the full message for `patience` consecutive
    epochs, or at max_epochs.
    """
    cfg = config or EmbedConfig()
    lam = cfg.lambdas
    out = scene.copy()
    T = len(out)
    train_idx = list(range(len(views))) if cfg.train_views is None else list(cfg.train_views)
    sup_views = [views[j] for j in train_idx]
    n_pairs = T * len(sup_views)

    weights = gating_weights(out, tau=cfg.tau, eps=cfg.eps, curvature=cfg.curvature)

    # Geometry is frozen, so jacobians, graphs and transport plans are fixed.
    jac = [[render_appearance_jacobian(out.frames[t], v) for v in sup_views]
           for t in range(T)]
    jac_t = [[j.T.tocsr() for j in row] for row in jac]
    pristine = [[jac[t][j] @ out.frames[t].appearance for j in range(len(sup_views))]
                for t in range(T)]
    pristine_details = []
    for t in range(T):
        row = []
        for j, v in enumerate(sup_views):
            img = pristine[t][j].reshape(v.image_size[0], v.image_size[1], -1)
            _, pyrs = image_ll_stack(img, cfg.levels)
            row.append([_detail_bands(p) for p in pyrs])
        pristine_details.append(row)

    graphs = []
    for t in range(T):
        n = len(out.frames[t])
        if cfg.spatial and n > cfg.knn:
            graphs.append(energy_mod.knn_graph(out.frames[t].mu, cfg.knn, cfg.sigma_s))
        else:
            graphs.append(energy_mod.empty_graph(n))

    row_norm_plans = []
    for t in range(1, T):
        mu_t = transport.DiscreteMeasure(out.frames[t].mu)
        mu_prev = transport.DiscreteMeasure(out.frames[t - 1].mu)
        plan = transport.sinkhorn(mu_t, mu_prev, reg=cfg.ot_reg,
                                  max_iter=cfg.ot_max_iter, tol=cfg.ot_tol)
        gamma = plan.coupling
        row_norm_plans.append(gamma / gamma.sum(axis=1, keepdims=True))

    bits = message.bits
    trace = []
    converged_epoch = -1
    streak = 0
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        terms = LossTerms()
        acc_min = 1.0
        acc_sum = 0.0
        rec_grads = [np.zeros_like(f.appearance) for f in out.frames]
        wm_grads = [np.zeros_like(f.appearance) for f in out.frames]

        for t in range(T):
            frame = out.frames[t]
            n, k = frame.appearance.shape
            for j, view in enumerate(sup_views):
                h, w = view.image_size
                img = (jac[t][j] @ frame.appearance).reshape(h, w, k)
                ref = pristine[t][j].reshape(h, w, k)

                diff = img - ref
                terms.rec += float(np.mean(diff**2))
                g_rec_img = (lam.rec * 2.0 / diff.size) * diff

                ll, pyrs = image_ll_stack(img, cfg.levels)
                soft = decode_message(ll, decoder)
                terms.wm += message_loss(soft, message)
                clamped = (soft < SOFT_BIT_CLAMP) | (soft > 1.0 - SOFT_BIT_CLAMP)
                g_logits = np.where(clamped, 0.0, soft - bits)
                g_ll = (decoder.weight.T @ g_logits).reshape(decoder.ll_shape)
                if g_ll.ndim == 2:
                    g_ll = g_ll[:, :, np.newaxis]

                n_det = k * sum(b.size for b in pristine_details[t][j][0])
                g_wm_img = np.empty_like(img)
                wav_sum = 0.0
                for c in range(k):
                    det = _detail_bands(pyrs[c])
                    det_ref = pristine_details[t][j][c]
                    g_details = []
                    for ba, bb in zip(det, det_ref):
                        d = ba - bb
                        wav_sum += float(np.sum(np.abs(d)))
                        g_details.append((lam.wav / n_det) * np.sign(d))
                    grad_pyr = WaveletPyramid(
                        ll=lam.wm * g_ll[:, :, c],
                        details=[tuple(g_details[3 * lev + s] for s in range(3))
                                 for lev in range(cfg.levels)],
                        levels=cfg.levels)
                    g_wm_img[:, :, c] = dwt_inverse(grad_pyr)
                terms.wav += wav_sum / n_det

                rec_grads[t] += (jac_t[t][j] @ g_rec_img.reshape(-1, k)) / n_pairs
                wm_grads[t] += (jac_t[t][j] @ g_wm_img.reshape(-1, k)) / n_pairs

                acc = bit_accuracy(soft, bits)
                acc_sum += acc
                acc_min = min(acc_min, acc)

            if t >= 1 and (cfg.temporal or cfg.spatial):
                z_t = energy_mod.state_vectors(frame.mu, frame.appearance)
                z_prev = energy_mod.state_vectors(out.frames[t - 1].mu,
                                                  out.frames[t - 1].appearance)
                z_hat = row_norm_plans[t - 1] @ z_prev
                terms.con += energy_mod.gated_consistency_loss(
                    z_t, z_hat, graphs[t], weights[t],
                    temporal=cfg.temporal, spatial=cfg.spatial) / max(T - 1, 1)
                g_con = energy_mod.consistency_gradient(
                    z_t, z_hat, graphs[t], weights[t],
                    temporal=cfg.temporal, spatial=cfg.spatial)[:, 3:] / max(T - 1, 1)
                if cfg.double_gate:
                    wm_grads[t] += lam.con * g_con
                else:
                    rec_grads[t] += lam.con * g_con

        terms.rec /= n_pairs
        terms.wm /= n_pairs
        terms.wav /= n_pairs
        total = total_loss(terms, lam)
        if not np.isfinite(total):
            raise FloatingPointError(
                f"non-finite loss at epoch {epoch}: wm={terms.wm} wav={terms.wav} "
                f"con={terms.con} rec={terms.rec}")
        acc_mean = acc_sum / n_pairs
        trace.append((epoch, total, terms.wm, terms.wav, terms.con, terms.rec, acc_mean))

        if acc_min >= 1.0:
            if converged_epoch < 0:
                converged_epoch = epoch
            streak += 1
            if streak >= cfg.patience:
                break
        else:
            streak = 0

        for t in range(T):
            grad = routed_gradient(rec_grads[t], wm_grads[t], weights[t])
            out.frames[t].appearance = np.clip(
                out.frames[t].appearance - cfg.step * grad, 0.0, 1.0)

    return EmbedResult(scene=out, trace=trace, converged_epoch=converged_epoch,
                       epochs_run=epoch, weights=weights)


# --- evaluation helpers -------------------------------------------------------

def decode_rendered(image, decoder: FrozenDecoder, levels=2):
    """Soft bits decoded from a rendered (or attacked) image."""
    ll, _ = image_ll_stack(np.asarray(image, dtype=float), levels)
    return decode_message(ll, decoder)


def scene_bit_accuracy(scene: SceneSequence, views, decoder: FrozenDecoder,
                       message: WatermarkMessage, levels=2):
    """Mean and min bit accuracy over every (timestep, view) render."""
    from .splat_field import render
    accs = []
    for frame in scene.frames:
        for v in views:
            soft = decode_rendered(render(frame, v), decoder, levels)
            accs.append(bit_accuracy(soft, message.bits))
    return float(np.mean(accs)), float(np.min(accs))


def flicker_proxy(scene_wm: SceneSequence, scene_ref: SceneSequence, views):
    """Extra inter-frame render energy introduced by the watermark.

    mean over adjacent frame pairs and views of ||render(t+1) - render(t)||^2
    (per-pixel mean), for the watermarked scene minus the reference scene.
    Positive values mean added temporal flicker.
    """
    from .splat_field import render

    def inter_frame(scene):
        vals = []
        for v in views:
            imgs = [render(f, v) for f in scene.frames]
            for a, b in zip(imgs[:-1], imgs[1:]):
                vals.append(float(np.mean((b - a) ** 2)))
        return float(np.mean(vals))

    return inter_frame(scene_wm) - inter_frame(scene_ref)
