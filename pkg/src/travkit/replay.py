"""Diversity-aware continual learning via farthest-point feature replay.

Incoming backbone features accumulate in a temporary buffer; at a fixed
update interval the replay buffer is rebuilt as the farthest-point-sampled
subset of the union, and every retained entry stores the current decoder
output as its target. The replay loss pins current decoder outputs to those
targets; feature cut-mix injects buffered features into unannotated patches
so replayed terrain keeps appearing in the supervision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import io
from .autodiff import Tensor
from .errors import InvalidInputError
from .vismodel import DecoderParams, ReferenceFeatures, TrainSample, decode_patches, frozen


@dataclass
class BufferEntry:
    feature: np.ndarray  # backbone feature (decoder input)
    stored_target: np.ndarray | None  # decoder output, replay buffers only
    origin_step: int


@dataclass
class FeatureBuffer:
    kind: str  # "temporary" | "replay"
    capacity: int | None = None  # replay buffers only
    entries: list[BufferEntry] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("temporary", "replay"):
            raise InvalidInputError(f"unknown buffer kind {self.kind!r}")
        if self.kind == "replay" and (self.capacity is None or self.capacity < 1):
            raise InvalidInputError("replay buffer needs a positive capacity")

    def __len__(self):
        return len(self.entries)

    def features(self) -> np.ndarray:
        if not self.entries:
            return np.zeros((0, 0))
        return np.stack([e.feature for e in self.entries])

    def add(self, feature: np.ndarray, origin_step: int) -> None:
        if self.kind != "temporary":
            raise InvalidInputError("only temporary buffers accept raw additions")
        self.entries.append(BufferEntry(np.asarray(feature, float).copy(), None,
                                        origin_step))


@dataclass(frozen=True)
class ReplaySchedule:
    update_interval: int = 100  # iterations between buffer rebuilds
    replay_interval: int = 1  # iterations between replay-loss applications
    weight: float = 20.0  # replay-loss multiplier

    def __post_init__(self):
        if self.update_interval < 1 or self.replay_interval < 1 or self.weight <= 0:
            raise InvalidInputError("invalid replay schedule")


def fps_select(features: np.ndarray, k: int) -> list[int]:
    """Greedy farthest-point subset of size k (selection order).

    Starts at the point farthest from the centroid, then repeatedly adds the
    point maximizing its minimum squared Euclidean distance to the selected
    set. Ties break to the lowest index. Squared distances keep the tie rule
    exactly reproducible by the quadratic-scan reference.
    """
    feats = np.asarray(features, dtype=float)
    n = feats.shape[0]
    if k > n:
        raise InvalidInputError(f"cannot select {k} of {n} features")
    if k == 0:
        return []
    centroid = feats.mean(axis=0)
    d2_centroid = ((feats - centroid) ** 2).sum(axis=1)
    first = int(np.argmax(d2_centroid))
    selected = [first]
    min_d2 = ((feats - feats[first]) ** 2).sum(axis=1)
    min_d2[first] = -1.0  # never re-selected
    while len(selected) < k:
        nxt = int(np.argmax(min_d2))
        selected.append(nxt)
        d2 = ((feats - feats[nxt]) ** 2).sum(axis=1)
        np.minimum(min_d2, d2, out=min_d2, where=min_d2 >= 0.0)
        min_d2[nxt] = -1.0
    return selected


def buffer_update(replay: FeatureBuffer, temp: FeatureBuffer,
                  params: DecoderParams) -> FeatureBuffer:
    """Rebuild the replay buffer from the union and refresh every target.

    The temporary buffer is cleared. Entry features are never mutated; only
    the stored targets are recomputed with the current decoder.
    """
    if replay.kind != "replay" or temp.kind != "temporary":
        raise InvalidInputError("buffer_update needs (replay, temporary) buffers")
    union = replay.entries + temp.entries
    if union and len(union) > replay.capacity:
        feats = np.stack([e.feature for e in union])
        keep = sorted(fps_select(feats, replay.capacity))
        union = [union[i] for i in keep]
    targets = _decode_features(np.stack([e.feature for e in union]), params) \
        if union else np.zeros((0, 0))
    replay.entries = [BufferEntry(e.feature, targets[i].copy(), e.origin_step)
                      for i, e in enumerate(union)]
    temp.entries.clear()
    return replay


def _decode_features(features: np.ndarray, params: DecoderParams) -> np.ndarray:
    with frozen(params):
        out = decode_patches(Tensor(features), params, training=False)
    return out.data


def replay_loss_t(replay: FeatureBuffer, params: DecoderParams) -> Tensor | None:
    """MSE between current decoder outputs and stored targets, on the tape.

    Eval-mode batch norm keeps stored targets comparable across steps.
    None when the buffer is empty.
    """
    if not replay.entries:
        return None
    feats = replay.features()
    targets = np.stack([e.stored_target for e in replay.entries])
    out = decode_patches(Tensor(feats), params, training=False)
    d = out - Tensor(targets)
    return (d * d).mean()


def loss_replay(replay: FeatureBuffer, params: DecoderParams) -> float:
    term = replay_loss_t(replay, params)
    return 0.0 if term is None else float(term.data)


def feature_cutmix(sample: TrainSample, replay: FeatureBuffer,
                   ref: ReferenceFeatures, rng: np.random.Generator,
                   p: float = 0.5) -> TrainSample:
    """Fill unannotated patches with replayed features and their known scores.

    Each patch with no valid supervision is, with probability p, replaced by
    a random replay feature; its supervision becomes the stored target's
    rescaled cosine against the reference. Annotated patches are untouched.
    """
    if not replay.entries:
        return sample
    invalid = ~sample.sup_valid
    if not invalid.any():
        return sample
    ref_vec = ref.mean_feature
    ref_norm = np.linalg.norm(ref_vec)
    feats = sample.features.copy()
    vals = sample.sup_values.copy()
    valid = sample.sup_valid.copy()
    rows, cols = np.nonzero(invalid)
    for r, c in zip(rows, cols):
        if rng.random() >= p:
            continue
        entry = replay.entries[int(rng.integers(len(replay.entries)))]
        feats[r, c] = entry.feature
        target = entry.stored_target
        norm = np.linalg.norm(target)
        cos = 0.0 if norm < 1e-12 or ref_norm < 1e-12 else \
            float(target @ ref_vec) / (norm * ref_norm)
        vals[r, c] = np.clip((cos + 1.0) / 2.0, 0.0, 1.0)
        valid[r, c] = True
    return TrainSample(features=feats, sup_values=vals, sup_valid=valid)


# ---------------------------------------------------------------------------
# checkpoints


def save_buffer(path, buf: FeatureBuffer) -> None:
    header = {"kind": buf.kind, "capacity": buf.capacity,
              "origins": [e.origin_step for e in buf.entries]}
    arrays = {}
    if buf.entries:
        arrays["features"] = np.stack([e.feature for e in buf.entries])
        if buf.kind == "replay":
            arrays["targets"] = np.stack([e.stored_target for e in buf.entries])
    io.save_blob(path, header, arrays)


def load_buffer(path) -> FeatureBuffer:
    header, arrays = io.load_blob(path)
    buf = FeatureBuffer(kind=header["kind"], capacity=header["capacity"])
    feats = arrays.get("features")
    targets = arrays.get("targets")
    for i, origin in enumerate(header["origins"]):
        buf.entries.append(BufferEntry(
            feature=feats[i],
            stored_target=None if targets is None else targets[i],
            origin_step=int(origin),
        ))
    return buf
