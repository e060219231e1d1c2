"""Sensor alignment, frame windows, the score VAE and its training loops.

The VAE encodes W-by-S sensor windows with two 1-D convolutions, pools over
time and projects to a latent mean/log-variance pair. Training combines a
KL term, reconstruction of the window's last reading, a VicReg-style
variance-invariance-covariance term over temporally paired windows, and an
anchoring term that holds replayed windows near their first latent position
during online increments. Optimization is plain seeded gradient descent on
the reverse-mode tape.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, asdict

import numpy as np

from . import io
from .autodiff import Tensor, conv1d, finite_difference_check, relu
from .errors import InvalidInputError, NoOverlapError, TooShortError
from .synthworld import GroupStream

_VAR_EPS = 1e-8  # inside the variance-hinge sqrt; keeps gradients finite


@dataclass
class AlignedTickTable:
    timestamps: np.ndarray  # (T,), strictly increasing, master rate
    values: np.ndarray  # (T, S)


@dataclass
class SensorFrame:
    data: np.ndarray  # (W, S)
    t_end: float  # timestamp of the last row
    terrain_gt: int | None = None  # evaluation only


@dataclass(frozen=True)
class VaeHyper:
    window_len: int = 100
    latent_dim: int = 16
    kernel_sizes: tuple = (11, 7)
    channels: tuple = (64, 64)
    kl_weight: float = 16.0
    rec_weight: float = 16.0
    vic_weight: float = 3.0
    invariance_weight: float = 25.0
    variance_weight: float = 25.0
    covariance_weight: float = 1.0
    pair_threshold_s: float = 1.6
    logvar_clamp: float = 10.0

    @property
    def anchor_weight(self) -> float:
        return (self.kl_weight + self.rec_weight + self.vic_weight) / 3.0


@dataclass
class LatentEmbedding:
    mean: np.ndarray  # (L,)
    logvar: np.ndarray  # (L,), clamped
    t: float
    terrain_gt: int | None = None


def frame_key(t_end: float) -> int:
    """Stable integer identity for a frame (microsecond-quantized end time)."""
    return int(round(t_end * 1e6))


class AnchorSet:
    """First-recorded latent means, immutable once stored."""

    def __init__(self):
        self._anchors: dict[int, np.ndarray] = {}

    def add(self, t_end: float, mean: np.ndarray) -> None:
        key = frame_key(t_end)
        if key in self._anchors:
            return  # first position wins; later phases never overwrite
        self._anchors[key] = np.asarray(mean, dtype=float).copy()

    def get(self, t_end: float) -> np.ndarray | None:
        return self._anchors.get(frame_key(t_end))

    def __contains__(self, t_end: float) -> bool:
        return frame_key(t_end) in self._anchors

    def __len__(self) -> int:
        return len(self._anchors)

    def as_dict(self) -> dict[int, np.ndarray]:
        return dict(self._anchors)


@dataclass
class VaeParams:
    hyper: VaeHyper
    n_channels: int
    enc_w1: Tensor
    enc_b1: Tensor
    enc_w2: Tensor
    enc_b2: Tensor
    head_mean_w: Tensor
    head_mean_b: Tensor
    head_logvar_w: Tensor
    head_logvar_b: Tensor
    dec_w1: Tensor
    dec_b1: Tensor
    dec_w2: Tensor
    dec_b2: Tensor

    _PARAM_NAMES = (
        "enc_w1", "enc_b1", "enc_w2", "enc_b2",
        "head_mean_w", "head_mean_b", "head_logvar_w", "head_logvar_b",
        "dec_w1", "dec_b1", "dec_w2", "dec_b2",
    )

    def parameters(self) -> list[Tensor]:
        return [getattr(self, n) for n in self._PARAM_NAMES]

    def copy(self) -> "VaeParams":
        kw = {n: Tensor(getattr(self, n).data.copy(), requires_grad=True)
              for n in self._PARAM_NAMES}
        return VaeParams(hyper=self.hyper, n_channels=self.n_channels, **kw)


def init_vae_params(n_channels: int, hyper: VaeHyper = VaeHyper(), seed: int = 0) -> VaeParams:
    rng = np.random.default_rng([seed, 808])
    c1, c2 = hyper.channels
    k1, k2 = hyper.kernel_sizes
    ld = hyper.latent_dim

    def conv_w(c_out, c_in, k):
        return Tensor(rng.normal(0.0, math.sqrt(2.0 / (c_in * k)), (c_out, c_in, k)),
                      requires_grad=True)

    def lin_w(d_in, d_out):
        return Tensor(rng.normal(0.0, math.sqrt(1.0 / d_in), (d_in, d_out)),
                      requires_grad=True)

    def bias(n):
        return Tensor(np.zeros(n), requires_grad=True)

    return VaeParams(
        hyper=hyper,
        n_channels=n_channels,
        enc_w1=conv_w(c1, n_channels, k1), enc_b1=bias(c1),
        enc_w2=conv_w(c2, c1, k2), enc_b2=bias(c2),
        head_mean_w=lin_w(c2, ld), head_mean_b=bias(ld),
        head_logvar_w=lin_w(c2, ld), head_logvar_b=bias(ld),
        dec_w1=conv_w(c1, ld, 1), dec_b1=bias(c1),
        dec_w2=conv_w(n_channels, c1, 1), dec_b2=bias(n_channels),
    )


@contextmanager
def _frozen(params: VaeParams):
    saved = [(t, t.requires_grad) for t in params.parameters()]
    for t, _ in saved:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, flag in saved:
            t.requires_grad = flag


# ---------------------------------------------------------------------------
# synchronization and framing


def synchronize(streams: list[GroupStream]) -> AlignedTickTable:
    """Resample every stream to the fastest rate over the common interval."""
    if not streams:
        raise InvalidInputError("no streams")
    for s in streams:
        if len(s.timestamps) == 0:
            raise InvalidInputError(f"stream {s.group!r} is empty")
        if np.any(np.diff(s.timestamps) <= 0):
            raise InvalidInputError(f"stream {s.group!r} timestamps not increasing")
    master_rate = max(s.rate_hz for s in streams)
    t0 = max(s.timestamps[0] for s in streams)
    t1 = min(s.timestamps[-1] for s in streams)
    if t1 < t0:
        raise NoOverlapError("streams share no common time interval")
    n = int(math.floor((t1 - t0) * master_rate + 1e-9)) + 1
    grid = t0 + np.arange(n) / master_rate
    columns = []
    for s in streams:
        for ch in range(s.values.shape[1]):
            columns.append(np.interp(grid, s.timestamps, s.values[:, ch]))
    return AlignedTickTable(timestamps=grid, values=np.stack(columns, axis=1))


def partition(table: AlignedTickTable, window_len: int, stride: int,
              terrain_gt: np.ndarray | None = None) -> list[SensorFrame]:
    """Windows ending at rows W-1, W-1+stride, ... of the aligned table."""
    t_len = len(table.timestamps)
    if window_len > t_len:
        raise TooShortError(f"table has {t_len} rows, window needs {window_len}")
    if stride < 1:
        raise InvalidInputError("stride must be >= 1")
    frames = []
    for end in range(window_len - 1, t_len, stride):
        gt = int(terrain_gt[end]) if terrain_gt is not None else None
        frames.append(SensorFrame(
            data=table.values[end - window_len + 1 : end + 1].copy(),
            t_end=float(table.timestamps[end]),
            terrain_gt=gt,
        ))
    return frames


# ---------------------------------------------------------------------------
# forward passes


def _encode_t(x: Tensor, p: VaeParams) -> tuple[Tensor, Tensor]:
    """x: (B, S, W) -> latent mean and clamped logvar, each (B, L)."""
    h = relu(conv1d(x, p.enc_w1, p.enc_b1))
    h = relu(conv1d(h, p.enc_w2, p.enc_b2))
    pooled = h.mean(axis=2)  # adaptive average pool over time
    mean = (pooled @ p.head_mean_w) + p.head_mean_b
    logvar = ((pooled @ p.head_logvar_w) + p.head_logvar_b).clip(
        -p.hyper.logvar_clamp, p.hyper.logvar_clamp)
    return mean, logvar


def _decode_t(z: Tensor, p: VaeParams) -> Tensor:
    """z: (B, L) -> reconstruction of the last reading, (B, S)."""
    b, ld = z.shape
    h = z.reshape(b, ld, 1)
    h = relu(conv1d(h, p.dec_w1, p.dec_b1))
    y = conv1d(h, p.dec_w2, p.dec_b2)
    return y.reshape(b, p.n_channels)


def _check_frame(frame: SensorFrame, params: VaeParams) -> None:
    if frame.data.ndim != 2 or frame.data.shape[1] != params.n_channels:
        raise InvalidInputError(
            f"frame shape {frame.data.shape} incompatible with S={params.n_channels}")


def encode(frame: SensorFrame, params: VaeParams) -> LatentEmbedding:
    """Deterministic (mean, logvar) embedding of one frame."""
    _check_frame(frame, params)
    with _frozen(params):
        mean, logvar = _encode_t(Tensor(frame.data.T[None]), params)
    return LatentEmbedding(mean=mean.data[0], logvar=logvar.data[0],
                           t=frame.t_end, terrain_gt=frame.terrain_gt)


def encode_frames(frames: list[SensorFrame], params: VaeParams,
                  chunk: int = 256) -> list[LatentEmbedding]:
    """Batched eval-mode encoding; order-independent per frame."""
    out = []
    with _frozen(params):
        for start in range(0, len(frames), chunk):
            part = frames[start : start + chunk]
            x = np.stack([f.data.T for f in part])
            mean, logvar = _encode_t(Tensor(x), params)
            for f, m, lv in zip(part, mean.data, logvar.data):
                out.append(LatentEmbedding(mean=m, logvar=lv, t=f.t_end,
                                           terrain_gt=f.terrain_gt))
    return out


def decode(latent: LatentEmbedding, params: VaeParams) -> np.ndarray:
    """Reconstruct an S-dim reading from the latent mean."""
    if latent.mean.shape != (params.hyper.latent_dim,):
        raise InvalidInputError("latent dimension mismatch")
    with _frozen(params):
        y = _decode_t(Tensor(latent.mean[None]), params)
    return y.data[0]


# ---------------------------------------------------------------------------
# losses (tensor forms used in training; float wrappers for the public API)


def _kl_t(mean: Tensor, logvar: Tensor) -> Tensor:
    return ((mean * mean + logvar.exp() - 1.0 - logvar) * 0.5).mean()


def _rec_t(y: Tensor, target: np.ndarray) -> Tensor:
    d = y - Tensor(target)
    return (d * d).mean()


def _vic_t(z: Tensor, z_ref: Tensor, hyper: VaeHyper) -> Tensor:
    b, ld = z.shape
    if b < 2:
        raise InvalidInputError("VicReg term needs a batch of at least 2")
    d = z - z_ref
    invariance = (d * d).mean()
    centered = z - z.mean(axis=0, keepdims=True)
    var = (centered * centered).sum(axis=0) * (1.0 / (b - 1))
    std = (var + _VAR_EPS).sqrt()
    variance = relu(1.0 - std).mean()
    cov = (centered.transpose((1, 0)) @ centered) * (1.0 / (b - 1))
    off_mask = 1.0 - np.eye(ld)
    covariance = ((cov * Tensor(off_mask)) ** 2.0).sum() * (1.0 / (ld * (ld - 1)))
    return (hyper.invariance_weight * invariance
            + hyper.variance_weight * variance
            + hyper.covariance_weight * covariance)


def _inc_t(mean: Tensor, anchor: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean over anchored batch rows of per-row anchor MSE; 0 if none."""
    n_active = float(mask.sum())
    if n_active == 0:
        return Tensor(0.0)
    d = mean - Tensor(anchor)
    weights = mask[:, None] / (n_active * mean.shape[1])
    return (d * d * Tensor(weights)).sum()


def loss_kl(latent: LatentEmbedding) -> float:
    m, lv = latent.mean, latent.logvar
    return float(np.mean(0.5 * (m * m + np.exp(lv) - 1.0 - lv)))


def loss_rec(y: np.ndarray, frame: SensorFrame) -> float:
    return float(np.mean((np.asarray(y) - frame.data[-1]) ** 2))


def loss_vic(pairs: list[tuple[LatentEmbedding, LatentEmbedding]],
             hyper: VaeHyper = VaeHyper()) -> float:
    if len(pairs) < 2:
        raise InvalidInputError("VicReg needs at least 2 pairs")
    z = Tensor(np.stack([p[0].mean for p in pairs]))
    z_ref = Tensor(np.stack([p[1].mean for p in pairs]))
    return float(_vic_t(z, z_ref, hyper).data)


def loss_inc(latent: LatentEmbedding, anchors: AnchorSet) -> float:
    anchor = anchors.get(latent.t)
    if anchor is None:
        return 0.0
    return float(np.mean((latent.mean - anchor) ** 2))


def loss_total(kl: float, rec: float, vic: float, inc: float,
               hyper: VaeHyper = VaeHyper()) -> float:
    return (hyper.kl_weight * kl + hyper.rec_weight * rec
            + hyper.vic_weight * vic + hyper.anchor_weight * inc)


# ---------------------------------------------------------------------------
# training


def _pair_refs(frames: list[SensorFrame], threshold_s: float) -> np.ndarray:
    """Reference index per frame: its predecessor in time when closer than
    the pairing threshold, itself otherwise."""
    refs = np.arange(len(frames))
    order = sorted(range(len(frames)), key=lambda i: frames[i].t_end)
    for k in range(1, len(order)):
        i, j = order[k], order[k - 1]
        if frames[i].t_end - frames[j].t_end < threshold_s:
            refs[i] = j
    return refs


def _batch_loss_t(x: np.ndarray, x_ref: np.ndarray, params: VaeParams,
                  noise: np.ndarray, anchor_arr: np.ndarray | None,
                  anchor_mask: np.ndarray | None) -> Tensor:
    """Total loss tensor for one assembled batch.

    x, x_ref: (B, W, S) window arrays; noise: (B, L) reparameterization
    draws; anchor_arr/mask select rows whose latent is held near a stored
    anchor.
    """
    hyp = params.hyper
    xt = Tensor(np.ascontiguousarray(x.transpose(0, 2, 1)))
    mean, logvar = _encode_t(xt, params)
    z = mean + (logvar * 0.5).exp() * Tensor(noise)
    y = _decode_t(z, params)
    kl = _kl_t(mean, logvar)
    rec = _rec_t(y, x[:, -1, :])
    xrt = Tensor(np.ascontiguousarray(x_ref.transpose(0, 2, 1)))
    mean_ref, _ = _encode_t(xrt, params)
    vic = _vic_t(mean, mean_ref, hyp)
    total = hyp.kl_weight * kl + hyp.rec_weight * rec + hyp.vic_weight * vic
    if anchor_arr is not None and anchor_mask is not None and anchor_mask.any():
        total = total + hyp.anchor_weight * _inc_t(mean, anchor_arr, anchor_mask)
    return total


def _gd_step(params: VaeParams, lr: float) -> None:
    for p in params.parameters():
        if p.grad is not None:
            p.data -= lr * p.grad
        p.grad = None


def vae_train_base(frames: list[SensorFrame], params: VaeParams,
                   epochs: int = 13, lr: float = 1e-3, batch: int = 128,
                   seed: int = 0) -> tuple[VaeParams, AnchorSet]:
    """Base-phase training; records every frame's anchor afterwards."""
    if not frames:
        raise InvalidInputError("empty training set")
    for f in frames:
        _check_frame(f, params)
    refs = _pair_refs(frames, params.hyper.pair_threshold_s)
    x_all = np.stack([f.data for f in frames])
    rng = np.random.default_rng([seed, 909])
    ld = params.hyper.latent_dim
    for _ in range(epochs):
        perm = rng.permutation(len(frames))
        for start in range(0, len(perm), batch):
            idx = perm[start : start + batch]
            if len(idx) < 2:
                continue
            noise = rng.standard_normal((len(idx), ld))
            loss = _batch_loss_t(x_all[idx], x_all[refs[idx]], params, noise, None, None)
            loss.backward()
            _gd_step(params, lr)
    anchors = AnchorSet()
    for emb in encode_frames(frames, params):
        anchors.add(emb.t, emb.mean)
    return params, anchors


def _online_batches(n_new: int, n_old: int, batch: int, old_fraction: float,
                    rng: np.random.Generator):
    """Yield (new_indices, old_indices) with a fixed old/new split per batch."""
    n_old_per = int(round(old_fraction * batch))
    n_new_per = max(1, batch - n_old_per)
    perm = rng.permutation(n_new)
    for start in range(0, n_new, n_new_per):
        chunk = perm[start : start + n_new_per]
        if n_old > 0 and n_old_per > 0:
            old_idx = rng.choice(n_old, size=n_old_per, replace=n_old < n_old_per)
        else:
            old_idx = np.empty(0, dtype=np.intp)
        yield chunk, old_idx


def vae_train_online(new_frames: list[SensorFrame], old_frames: list[SensorFrame],
                     params: VaeParams, anchors: AnchorSet, lr: float = 1e-5,
                     batch: int = 128, seed: int = 0,
                     old_fraction: float = 0.2) -> VaeParams:
    """One epoch over the new frames, each batch topped up with replayed old
    frames (default 20%) whose latents are anchored."""
    if not new_frames:
        return params
    for f in old_frames:
        if f.t_end not in anchors:
            raise InvalidInputError("old frame lacks an anchor")
    hyp = params.hyper
    refs_new = _pair_refs(new_frames, hyp.pair_threshold_s)
    x_new = np.stack([f.data for f in new_frames])
    if old_frames:
        refs_old = _pair_refs(old_frames, hyp.pair_threshold_s)
        x_old = np.stack([f.data for f in old_frames])
        anchor_old = np.stack([anchors.get(f.t_end) for f in old_frames])
    rng = np.random.default_rng([seed, 1010])
    for chunk, old_idx in _online_batches(len(new_frames), len(old_frames),
                                          batch, old_fraction, rng):
        xs = [x_new[chunk]]
        xrs = [x_new[refs_new[chunk]]]
        if len(old_idx):
            xs.append(x_old[old_idx])
            xrs.append(x_old[refs_old[old_idx]])
            anchor_arr = np.concatenate(
                [np.zeros((len(chunk), hyp.latent_dim)), anchor_old[old_idx]])
            anchor_mask = np.concatenate(
                [np.zeros(len(chunk)), np.ones(len(old_idx))])
        else:
            anchor_arr, anchor_mask = None, None
        x = np.concatenate(xs)
        if len(x) < 2:
            continue
        noise = rng.standard_normal((len(x), hyp.latent_dim))
        loss = _batch_loss_t(x, np.concatenate(xrs), params, noise,
                             anchor_arr, anchor_mask)
        loss.backward()
        _gd_step(params, lr)
    for emb in encode_frames(new_frames, params):
        anchors.add(emb.t, emb.mean)
    return params


def grad_check(params: VaeParams, frames: list[SensorFrame],
               eps: float = 1e-4, seed: int = 0) -> float:
    """Max relative error of the total-loss gradient vs central differences."""
    if len(frames) < 2:
        raise InvalidInputError("grad_check needs at least 2 frames")
    refs = _pair_refs(frames, params.hyper.pair_threshold_s)
    x = np.stack([f.data for f in frames])
    noise = np.random.default_rng([seed, 1111]).standard_normal(
        (len(frames), params.hyper.latent_dim))

    def loss_fn():
        return _batch_loss_t(x, x[refs], params, noise, None, None)

    return finite_difference_check(loss_fn, params.parameters(), eps=eps)


# ---------------------------------------------------------------------------
# checkpoints


def save_vae(path, params: VaeParams, anchors: AnchorSet | None = None) -> None:
    header = {"kind": "vae", "n_channels": params.n_channels,
              "hyper": asdict(params.hyper)}
    arrays = {n: getattr(params, n).data for n in VaeParams._PARAM_NAMES}
    if anchors is not None:
        keys = sorted(anchors.as_dict())
        header["anchor_keys"] = keys
        if keys:
            arrays["anchors"] = np.stack([anchors.as_dict()[k] for k in keys])
    io.save_blob(path, header, arrays)


def load_vae(path) -> tuple[VaeParams, AnchorSet]:
    header, arrays = io.load_blob(path)
    hyper_kw = dict(header["hyper"])
    hyper_kw["kernel_sizes"] = tuple(hyper_kw["kernel_sizes"])
    hyper_kw["channels"] = tuple(hyper_kw["channels"])
    hyper = VaeHyper(**hyper_kw)
    kw = {n: Tensor(arrays[n], requires_grad=True) for n in VaeParams._PARAM_NAMES}
    params = VaeParams(hyper=hyper, n_channels=int(header["n_channels"]), **kw)
    anchors = AnchorSet()
    for key, mean in zip(header.get("anchor_keys", []),
                         arrays.get("anchors", np.zeros((0, hyper.latent_dim)))):
        anchors._anchors[int(key)] = mean
    return params, anchors
