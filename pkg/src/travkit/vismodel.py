"""Trainable visual head over the patch-feature backbone stand-in.

A pointwise two-layer decoder (linear, batch norm, ReLU, twice) maps
backbone patch features to C-dimensional visual features, which are
bilinearly interpolated to pixel resolution. Predictions are cosine
similarities against a fixed reference feature, rescaled to [0, 1], and the
alignment loss pins those rescaled cosines to the supervision mask.
Training is SGD with momentum and weight decay; an optional direct
regression head (plain masked MSE on a scalar output) is kept for
ablations.
"""

from __future__ import annotations

import functools
import math
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, asdict

import numpy as np

from . import io
from .autodiff import Tensor, relu
from .errors import InvalidInputError
from .synthworld import PatchFeatureImage

_NORM_EPS2 = 1e-24  # added under the per-pixel norm sqrt


@dataclass(frozen=True)
class DecoderHyper:
    in_dim: int = 64
    hidden_dim: int = 64
    out_dim: int = 64
    pixels_per_patch: int = 4
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    head: str = "alignment"  # "alignment" | "regression"


@dataclass
class DecoderParams:
    hyper: DecoderHyper
    w1: Tensor
    g1: Tensor
    b1: Tensor
    w2: Tensor
    g2: Tensor
    b2: Tensor
    reg_w: Tensor
    reg_b: Tensor
    # running statistics: tracked, never optimized
    rm1: np.ndarray
    rv1: np.ndarray
    rm2: np.ndarray
    rv2: np.ndarray

    _PARAM_NAMES = ("w1", "g1", "b1", "w2", "g2", "b2", "reg_w", "reg_b")

    def named_parameters(self) -> dict[str, Tensor]:
        return {n: getattr(self, n) for n in self._PARAM_NAMES}

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def copy(self) -> "DecoderParams":
        kw = {n: Tensor(getattr(self, n).data.copy(), requires_grad=True)
              for n in self._PARAM_NAMES}
        return DecoderParams(hyper=self.hyper, rm1=self.rm1.copy(), rv1=self.rv1.copy(),
                             rm2=self.rm2.copy(), rv2=self.rv2.copy(), **kw)


@dataclass
class ReferenceFeatures:
    mean_feature: np.ndarray  # (C,)
    n_images: int
    n_subsampled: int = 100


@dataclass
class FeatureMap:
    values: np.ndarray  # (H, W, C) pixel features


@dataclass
class PredictionMap:
    values: np.ndarray  # (H, W) rescaled scores in [0, 1]
    raw_cos: np.ndarray  # (H, W) cosine similarities
    degenerate: np.ndarray  # (H, W) bool, near-zero feature norm


def init_decoder_params(hyper: DecoderHyper = DecoderHyper(), seed: int = 0) -> DecoderParams:
    rng = np.random.default_rng([seed, 1212])

    def lin(d_in, d_out):
        return Tensor(rng.normal(0.0, math.sqrt(2.0 / d_in), (d_in, d_out)),
                      requires_grad=True)

    return DecoderParams(
        hyper=hyper,
        w1=lin(hyper.in_dim, hyper.hidden_dim),
        g1=Tensor(np.ones(hyper.hidden_dim), requires_grad=True),
        b1=Tensor(np.zeros(hyper.hidden_dim), requires_grad=True),
        w2=lin(hyper.hidden_dim, hyper.out_dim),
        g2=Tensor(np.ones(hyper.out_dim), requires_grad=True),
        b2=Tensor(np.zeros(hyper.out_dim), requires_grad=True),
        reg_w=lin(hyper.out_dim, 1),
        reg_b=Tensor(np.zeros(1), requires_grad=True),
        rm1=np.zeros(hyper.hidden_dim), rv1=np.ones(hyper.hidden_dim),
        rm2=np.zeros(hyper.out_dim), rv2=np.ones(hyper.out_dim),
    )


@contextmanager
def frozen(params: DecoderParams):
    saved = [(t, t.requires_grad) for t in params.parameters()]
    for t, _ in saved:
        t.requires_grad = False
    try:
        yield
    finally:
        for t, flag in saved:
            t.requires_grad = flag


def _bn(h: Tensor, gamma: Tensor, beta: Tensor, rmean: np.ndarray, rvar: np.ndarray,
        eps: float, momentum: float, training: bool) -> Tensor:
    if training:
        mu = h.mean(axis=0, keepdims=True)
        centered = h - mu
        var = (centered * centered).mean(axis=0, keepdims=True)
        rmean *= 1.0 - momentum
        rmean += momentum * mu.data[0]
        rvar *= 1.0 - momentum
        rvar += momentum * var.data[0]
        xhat = centered / (var + eps).sqrt()
    else:
        xhat = (h - Tensor(rmean)) / Tensor(np.sqrt(rvar + eps))
    return xhat * gamma + beta


def decode_patches(x: Tensor, params: DecoderParams, training: bool) -> Tensor:
    """(N, in_dim) backbone features -> (N, out_dim) visual features.

    The stack ends in batch norm without a trailing ReLU: the rescaled
    cosine (cos+1)/2 must be able to reach the full [0, 1] supervision
    range, which non-negative features cannot express.
    """
    hyp = params.hyper
    h = relu(_bn(x @ params.w1, params.g1, params.b1, params.rm1, params.rv1,
                 hyp.bn_eps, hyp.bn_momentum, training))
    return _bn(h @ params.w2, params.g2, params.b2, params.rm2, params.rv2,
               hyp.bn_eps, hyp.bn_momentum, training)


@functools.lru_cache(maxsize=64)
def _interp_matrix(h_p: int, w_p: int, ps: int) -> np.ndarray:
    """Bilinear patch-to-pixel interpolation matrix of shape (H*W, h_p*w_p)."""
    h, w = h_p * ps, w_p * ps
    m = np.zeros((h * w, h_p * w_p))
    for i in range(h):
        pr = np.clip((i + 0.5) / ps - 0.5, 0.0, h_p - 1.0)
        r0 = int(np.floor(pr))
        r1 = min(r0 + 1, h_p - 1)
        fr = pr - r0
        for j in range(w):
            pc = np.clip((j + 0.5) / ps - 0.5, 0.0, w_p - 1.0)
            c0 = int(np.floor(pc))
            c1 = min(c0 + 1, w_p - 1)
            fc = pc - c0
            row = i * w + j
            m[row, r0 * w_p + c0] += (1 - fr) * (1 - fc)
            m[row, r0 * w_p + c1] += (1 - fr) * fc
            m[row, r1 * w_p + c0] += fr * (1 - fc)
            m[row, r1 * w_p + c1] += fr * fc
    return m


def interp_tensor(patch_feats: Tensor, h_p: int, w_p: int, ps: int) -> Tensor:
    """(h_p*w_p, C) -> (H*W, C) bilinear pixel features on the tape."""
    return Tensor(_interp_matrix(h_p, w_p, ps)) @ patch_feats


def upsample_labels(labels: np.ndarray, ps: int) -> np.ndarray:
    return np.repeat(np.repeat(labels, ps, axis=0), ps, axis=1)


def upsample_mask(values: np.ndarray, ps: int) -> np.ndarray:
    return np.repeat(np.repeat(values, ps, axis=0), ps, axis=1)


def extract(image: PatchFeatureImage, params: DecoderParams) -> FeatureMap:
    """Eval-mode decoding and interpolation to pixel resolution."""
    h_p, w_p, c_in = image.features.shape
    if c_in != params.hyper.in_dim:
        raise InvalidInputError(
            f"feature dim {c_in} does not match decoder input {params.hyper.in_dim}")
    ps = params.hyper.pixels_per_patch
    with frozen(params):
        dec = decode_patches(Tensor(image.features.reshape(-1, c_in)), params,
                             training=False)
        pix = interp_tensor(dec, h_p, w_p, ps)
    return FeatureMap(values=pix.data.reshape(h_p * ps, w_p * ps, params.hyper.out_dim))


def compute_reference(reference_images: list[PatchFeatureImage],
                      params: DecoderParams, seed: int, reference_terrain: int,
                      n_subsample: int = 100) -> ReferenceFeatures:
    """Mean of seeded-random subsampled pixel features on the reference terrain."""
    if not reference_images:
        raise InvalidInputError("need at least one reference image")
    ps = params.hyper.pixels_per_patch
    pool = []
    for img in reference_images:
        fmap = extract(img, params)
        labels = upsample_labels(img.terrain_gt, ps)
        sel = labels == reference_terrain
        pool.append(fmap.values[sel])
    pool = np.concatenate(pool, axis=0)
    if pool.shape[0] == 0:
        raise InvalidInputError("reference terrain absent from the reference images")
    rng = np.random.default_rng([seed, 1313])
    replace = pool.shape[0] < n_subsample
    if replace:
        warnings.warn("fewer reference-terrain pixels than requested; "
                      "sampling with replacement", stacklevel=2)
    idx = rng.choice(pool.shape[0], size=n_subsample, replace=replace)
    return ReferenceFeatures(mean_feature=pool[idx].mean(axis=0),
                             n_images=len(reference_images),
                             n_subsampled=n_subsample)


def predict(fmap: FeatureMap, ref: ReferenceFeatures) -> PredictionMap:
    """Per-pixel rescaled cosine against the reference feature."""
    feats = fmap.values
    ref_vec = ref.mean_feature
    ref_norm = np.linalg.norm(ref_vec)
    if ref_norm < 1e-12:
        raise InvalidInputError("degenerate reference feature")
    norms = np.linalg.norm(feats, axis=2)
    degenerate = norms < 1e-12
    safe = np.where(degenerate, 1.0, norms)
    cos = (feats @ ref_vec) / (safe * ref_norm)
    cos = np.where(degenerate, 0.0, cos)
    values = np.clip((cos + 1.0) / 2.0, 0.0, 1.0)
    return PredictionMap(values=values, raw_cos=cos, degenerate=degenerate)


def loss_align(prediction: PredictionMap, sup_values: np.ndarray,
               sup_valid: np.ndarray) -> float:
    """Masked MSE between rescaled cosines and supervision values."""
    if not sup_valid.any():
        return 0.0
    rescaled = (prediction.raw_cos + 1.0) / 2.0
    diff = (rescaled - sup_values)[sup_valid]
    return float(np.mean(diff**2))


def _align_loss_t(pix: Tensor, ref_vec: np.ndarray, sup_values: np.ndarray,
                  sup_valid: np.ndarray) -> Tensor | None:
    """Tensor form over flat pixels; None when no pixel is valid."""
    mask = sup_valid.ravel().astype(float)
    n_valid = mask.sum()
    if n_valid == 0:
        return None
    ref_norm = np.linalg.norm(ref_vec)
    if ref_norm < 1e-12:
        raise InvalidInputError("degenerate reference feature")
    ref_unit = ref_vec / ref_norm
    dots = (pix * Tensor(ref_unit[None, :])).sum(axis=1)
    norms = ((pix * pix).sum(axis=1) + _NORM_EPS2).sqrt()
    score = (dots / norms + 1.0) * 0.5
    diff = (score - Tensor(sup_values.ravel())) * Tensor(mask)
    return (diff * diff).sum() * (1.0 / n_valid)


def _regression_loss_t(pix: Tensor, params: DecoderParams, sup_values: np.ndarray,
                       sup_valid: np.ndarray) -> Tensor | None:
    mask = sup_valid.ravel().astype(float)
    n_valid = mask.sum()
    if n_valid == 0:
        return None
    pred = (pix @ params.reg_w + params.reg_b).reshape(pix.shape[0])
    diff = (pred - Tensor(sup_values.ravel())) * Tensor(mask)
    return (diff * diff).sum() * (1.0 / n_valid)


def predict_regression(fmap: FeatureMap, params: DecoderParams) -> PredictionMap:
    """Scalar-head prediction, clipped to [0, 1] at inference."""
    flat = fmap.values.reshape(-1, params.hyper.out_dim)
    raw = (flat @ params.reg_w.data + params.reg_b.data).reshape(fmap.values.shape[:2])
    values = np.clip(raw, 0.0, 1.0)
    return PredictionMap(values=values, raw_cos=raw,
                         degenerate=np.zeros_like(values, dtype=bool))


@dataclass
class TrainSample:
    features: np.ndarray  # (H_p, W_p, C_b)
    sup_values: np.ndarray  # (H_p, W_p) patch-level supervision
    sup_valid: np.ndarray  # (H_p, W_p)


class SgdState:
    """Per-parameter momentum buffers."""

    def __init__(self):
        self.velocity: dict[str, np.ndarray] = {}


def sgd_step(params: DecoderParams, state: SgdState, lr: float,
             momentum: float = 0.9, weight_decay: float = 1e-4) -> None:
    for name, p in params.named_parameters().items():
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        grad = grad + weight_decay * p.data
        v = state.velocity.get(name)
        v = grad if v is None else momentum * v + grad
        state.velocity[name] = v
        p.data -= lr * v
        p.grad = None


def visual_train_step(samples: list[TrainSample], params: DecoderParams,
                      ref: ReferenceFeatures, state: SgdState,
                      rng: np.random.Generator, lr: float = 1e-5,
                      momentum: float = 0.9, weight_decay: float = 1e-4,
                      replay_loss_fn=None, replay_weight: float = 20.0,
                      flip_prob: float = 0.5, feat_noise: float = 0.0) -> float:
    """One SGD step on the batch; returns the supervised loss value."""
    hyp = params.hyper
    ps = hyp.pixels_per_patch
    prepared = []
    for s in samples:
        feats, vals, valid = s.features, s.sup_values, s.sup_valid
        if flip_prob > 0 and rng.random() < flip_prob:
            feats = feats[:, ::-1]
            vals = vals[:, ::-1]
            valid = valid[:, ::-1]
        if feat_noise > 0:
            feats = feats + rng.standard_normal(feats.shape) * (
                feat_noise / math.sqrt(feats.shape[2]))
        prepared.append((np.ascontiguousarray(feats), vals, valid))

    flat = np.concatenate([f.reshape(-1, hyp.in_dim) for f, _, _ in prepared])
    decoded = decode_patches(Tensor(flat), params, training=True)
    terms = []
    offset = 0
    for feats, vals, valid in prepared:
        h_p, w_p = feats.shape[:2]
        n = h_p * w_p
        pix = interp_tensor(decoded.narrow(offset, offset + n), h_p, w_p, ps)
        offset += n
        sup_vals = upsample_mask(vals, ps)
        sup_valid = upsample_mask(valid, ps)
        if hyp.head == "regression":
            term = _regression_loss_t(pix, params, sup_vals, sup_valid)
        else:
            term = _align_loss_t(pix, ref.mean_feature, sup_vals, sup_valid)
        if term is not None:
            terms.append(term)

    loss = None
    if terms:
        loss = terms[0]
        for t in terms[1:]:
            loss = loss + t
        loss = loss * (1.0 / len(terms))
    supervised_value = float(loss.data) if loss is not None else 0.0
    if replay_loss_fn is not None:
        rep = replay_loss_fn(params)
        if rep is not None:
            loss = rep * replay_weight if loss is None else loss + rep * replay_weight
    if loss is not None and loss.requires_grad:
        loss.backward()
    sgd_step(params, state, lr=lr, momentum=momentum, weight_decay=weight_decay)
    return supervised_value


# ---------------------------------------------------------------------------
# checkpoints


def save_decoder(path, params: DecoderParams, ref: ReferenceFeatures | None = None) -> None:
    header = {"kind": "visual", "hyper": asdict(params.hyper)}
    arrays = {n: getattr(params, n).data for n in DecoderParams._PARAM_NAMES}
    arrays.update({"rm1": params.rm1, "rv1": params.rv1,
                   "rm2": params.rm2, "rv2": params.rv2})
    if ref is not None:
        header["ref"] = {"n_images": ref.n_images, "n_subsampled": ref.n_subsampled}
        arrays["ref_mean"] = ref.mean_feature
    io.save_blob(path, header, arrays)


def load_decoder(path) -> tuple[DecoderParams, ReferenceFeatures | None]:
    header, arrays = io.load_blob(path)
    hyper = DecoderHyper(**header["hyper"])
    kw = {n: Tensor(arrays[n], requires_grad=True) for n in DecoderParams._PARAM_NAMES}
    params = DecoderParams(hyper=hyper, rm1=arrays["rm1"], rv1=arrays["rv1"],
                           rm2=arrays["rm2"], rv2=arrays["rv2"], **kw)
    ref = None
    if "ref" in header:
        ref = ReferenceFeatures(mean_feature=arrays["ref_mean"],
                                n_images=int(header["ref"]["n_images"]),
                                n_subsampled=int(header["ref"]["n_subsampled"]))
    return params, ref
