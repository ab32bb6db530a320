"""Supervised downstream training on top of the feature extractor, with
station-wise masking augmentation, plus the comparison baselines (constant,
naive, output ensemble, denoising autoencoder, random erasing, inpainting).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .core import (
    MaskSet,
    MultiStationSample,
    RandomStream,
    apply_input_mask,
    sample_mask_matrix,
    sample_mask_set,
)
from .crossl import FeatureExtractor, build_extractor
from .nnkit import (
    BatchNorm,
    Dense,
    Dropout,
    FitResult,
    MlpStack,
    Relu,
    TrainConfig,
    fit_loop,
    masked_mse_loss,
    mlp_head,
    mse_loss,
)
from .pipeline import Dataset

HEAD_HIDDEN = 64


@dataclass(frozen=True)
class AugmentConfig:
    kind: str = "none"  # none | sma | random_erase
    p_mask: float = 0.5
    erase_range: Tuple[float, float] = (0.4, 0.6)
    p_aug: float = 0.5  # per-sample application probability (online strategy)
    strategy: str = "offline_double"  # offline_double | online

    def __post_init__(self):
        if self.kind not in ("none", "sma", "random_erase"):
            raise ValueError(f"unknown augmentation kind {self.kind}")
        if self.strategy not in ("offline_double", "online"):
            raise ValueError(f"unknown augmentation strategy {self.strategy}")
        s_l, s_h = self.erase_range
        if not (0.0 <= s_l <= s_h <= 1.0):
            raise ValueError("erase_range must satisfy 0 <= s_l <= s_h <= 1")
        for p in (self.p_mask, self.p_aug):
            if not (0.0 <= p <= 1.0):
                raise ValueError("probabilities must be in [0, 1]")


# ---------------------------------------------------------------------------
# augmentations
# ---------------------------------------------------------------------------


def sma_augment(x: MultiStationSample, p_mask: float, rng: RandomStream) -> MultiStationSample:
    """Zero whole stations, each independently with probability p_mask."""
    return apply_input_mask(x, sample_mask_set(p_mask, x.n_stations, rng))


def sma_augment_batch(xb: np.ndarray, p_mask: float, rng: RandomStream) -> np.ndarray:
    mask = sample_mask_matrix(p_mask, xb.shape[0], xb.shape[1], rng)
    return xb * (~mask)[:, :, None]


def random_erase(
    x: MultiStationSample, s_l: float, s_h: float, rng: RandomStream
) -> MultiStationSample:
    """Per observed station, zero one contiguous subcarrier run whose length
    fraction is drawn from U[s_l, s_h]. Missing stations are untouched."""
    if not (0.0 <= s_l <= s_h <= 1.0):
        raise ValueError("require 0 <= s_l <= s_h <= 1")
    k = x.k
    stations = []
    for s in x.stations:
        if s.missing:
            stations.append(s)
            continue
        f = rng.uniform(s_l, s_h)
        run = int(np.ceil(f * k))
        if run == 0:
            stations.append(s)
            continue
        start = int(rng.integers(0, k - run + 1))
        v = s.values.copy()
        v[start : start + run] = 0.0
        stations.append(type(s)(v, missing=False))
    return MultiStationSample(tuple(stations))


def random_erase_batch(
    xb: np.ndarray, missing: np.ndarray, s_l: float, s_h: float, rng: RandomStream
) -> np.ndarray:
    n, n_d, k = xb.shape
    out = xb.copy()
    fracs = rng.uniform(s_l, s_h, (n, n_d))
    runs = np.ceil(fracs * k).astype(int)
    for i in range(n):
        for d in range(n_d):
            if missing[i, d] or runs[i, d] == 0:
                continue
            start = int(rng.integers(0, k - runs[i, d] + 1))
            out[i, d, start : start + runs[i, d]] = 0.0
    return out


def _apply_augment_batch(
    xb: np.ndarray, missing: np.ndarray, aug: AugmentConfig, rng: RandomStream
) -> np.ndarray:
    if aug.kind == "none":
        return xb
    if aug.kind == "sma":
        return sma_augment_batch(xb, aug.p_mask, rng)
    return random_erase_batch(xb, missing, aug.erase_range[0], aug.erase_range[1], rng)


# ---------------------------------------------------------------------------
# sensing model
# ---------------------------------------------------------------------------


class SensingModel:
    """Feature extractor (possibly none = raw concatenation) plus a scalar
    regression head. mode 'frozen' keeps extractor parameters fixed."""

    def __init__(self, extractor: Optional[FeatureExtractor], head: MlpStack, mode: str = "joint"):
        if mode not in ("frozen", "joint"):
            raise ValueError(f"mode must be frozen or joint, got {mode}")
        if extractor is None and mode == "frozen":
            mode = "joint"  # nothing to freeze
        self.extractor = extractor
        self.head = head
        self.mode = mode

    def predict(self, xb: np.ndarray) -> np.ndarray:
        """Deterministic inference-mode forward over a (n, N_d, K) batch."""
        xb = np.asarray(xb, dtype=np.float32)
        if self.extractor is None:
            feats = xb.reshape(xb.shape[0], -1)
        else:
            feats = self.extractor.embed(xb, "eval")
        out, _ = self.head.forward(feats, "eval", None)
        return out[:, 0]

    def predict_sample(self, x: MultiStationSample) -> float:
        return float(self.predict(x.matrix()[None, :, :])[0])


def build_head(n_in: int, rng: RandomStream, hidden: int = HEAD_HIDDEN) -> MlpStack:
    return mlp_head("head", n_in, hidden, 1, rng)


def train_downstream(
    model: SensingModel,
    labeled: Dataset,
    aug: AugmentConfig,
    tc: TrainConfig,
    rng: RandomStream,
) -> FitResult:
    """Minimize MSE of head(aggregate(encode(augmented x))) against labels.

    offline_double pre-expands the training set once (original + augmented
    copy); online applies the augmentation per epoch with probability p_aug.
    """
    if labeled.n == 0 or labeled.labels is None:
        raise ValueError("non-empty labeled dataset required")
    if model.extractor is not None and (
        labeled.n_stations != model.extractor.n_stations or labeled.k != model.extractor.input_dim
    ):
        raise ValueError("dataset shape incompatible with extractor manifest")
    x = labeled.x.astype(np.float32)
    missing = labeled.missing
    y = labeled.labels.astype(np.float32)[:, None]

    if aug.kind != "none" and aug.strategy == "offline_double":
        x_aug = _apply_augment_batch(x, missing, aug, rng.child("offline_aug"))
        x = np.concatenate([x, x_aug])
        missing = np.concatenate([missing, missing])
        y = np.concatenate([y, y])

    joint = model.mode == "joint" and model.extractor is not None
    params = dict(model.head.params())
    buffers = dict(model.head.buffers())
    if joint:
        params.update(model.extractor.params())
        buffers.update(model.extractor.buffers())

    fx = model.extractor
    online = aug.kind != "none" and aug.strategy == "online"

    def step(idx, srng):
        xb = x[idx]
        if online:
            arng = srng.child("aug")
            applied = arng.random(len(idx)) < aug.p_aug
            if applied.any():
                xb = xb.copy()
                xb[applied] = _apply_augment_batch(
                    xb[applied], missing[idx][applied], aug, arng.child("draw")
                )
        if fx is None:
            feats = xb.reshape(len(idx), -1)
        elif joint:
            q, enc_caches = fx.encode_batch(xb, "train", srng.child("enc"))
            feats, agg_caches = fx.aggregate_batch(q, "train", srng.child("agg"))
        else:
            feats = fx.embed(xb, "eval")
        pred, head_caches = model.head.forward(feats, "train", srng.child("head"))
        loss, dpred = mse_loss(pred, y[idx])
        dfeats, grads = model.head.backward(head_caches, dpred)
        if joint:
            dq, agg_grads = fx.aggregate_backward(agg_caches, dfeats)
            grads.update(agg_grads)
            grads.update(fx.encode_backward(enc_caches, dq))
        return loss, grads

    return fit_loop(params, step, len(x), tc, rng.child("downstream"), buffers)


def predict(model: SensingModel, x: MultiStationSample) -> float:
    return model.predict_sample(x)


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


class ConstantModel:
    """Non-learning baseline: always predicts a fixed value."""

    def __init__(self, value: float = 0.5):
        self.value = value

    def predict(self, xb: np.ndarray) -> np.ndarray:
        return np.full(np.asarray(xb).shape[0], self.value)

    def predict_sample(self, x: MultiStationSample) -> float:
        return self.value


def constant_baseline(value: float = 0.5) -> ConstantModel:
    return ConstantModel(value)


def train_naive(
    labeled: Dataset,
    tc: TrainConfig,
    rng: RandomStream,
    variant: str = "office",
) -> SensingModel:
    """NaiveSupervised: no pre-training, no augmentation.

    office variant: head directly on the concatenated station inputs.
    factory variant: fresh extractor trained end-to-end with the head.
    """
    if variant == "office":
        head = build_head(labeled.n_stations * labeled.k, rng.child("init"))
        model = SensingModel(None, head, "joint")
    elif variant == "factory":
        fx = build_extractor(labeled.n_stations, labeled.k, rng.child("init/fx"))
        head = build_head(fx.embedding_dim, rng.child("init/head"))
        model = SensingModel(fx, head, "joint")
    else:
        raise ValueError(f"unknown naive variant {variant}")
    train_downstream(model, labeled, AugmentConfig(kind="none"), tc, rng)
    return model


class EnsembleModel:
    """One independent model per station; prediction is the member mean.
    Members of missing stations still see the zero placeholder."""

    def __init__(self, members: List[SensingModel]):
        self.members = members

    def predict(self, xb: np.ndarray) -> np.ndarray:
        xb = np.asarray(xb, dtype=np.float32)
        preds = [
            m.predict(xb[:, d : d + 1, :]) for d, m in enumerate(self.members)
        ]
        return np.mean(preds, axis=0)

    def predict_sample(self, x: MultiStationSample) -> float:
        return float(self.predict(x.matrix()[None, :, :])[0])


def train_ensemble(labeled: Dataset, tc: TrainConfig, rng: RandomStream) -> EnsembleModel:
    members = []
    for d in range(labeled.n_stations):
        sub = Dataset(
            split=labeled.split,
            x=labeled.x[:, d : d + 1, :],
            missing=labeled.missing[:, d : d + 1],
            labels=labeled.labels,
            timestamps=labeled.timestamps,
            provenance=dict(labeled.provenance),
        )
        head = build_head(labeled.k, rng.child(f"member{d}/init"))
        model = SensingModel(None, head, "joint")
        train_downstream(model, sub, AugmentConfig(kind="none"), tc, rng.child(f"member{d}"))
        members.append(model)
    return EnsembleModel(members)


class DaeModel:
    """Encoder-decoder trained to reconstruct masked stations; the encoder
    doubles as a feature extractor (aggregator over raw concatenated input)."""

    def __init__(self, extractor: FeatureExtractor, decoder: MlpStack):
        self.extractor = extractor
        self.decoder = decoder

    def reconstruct(self, xb: np.ndarray) -> np.ndarray:
        """(n, N_d, K) -> (n, N_d, K) reconstruction, inference mode."""
        z = self.extractor.embed(np.asarray(xb, dtype=np.float32), "eval")
        flat, _ = self.decoder.forward(z, "eval", None)
        return flat.reshape(xb.shape)


def train_dae(
    unlabeled: Dataset,
    p_mask: float,
    tc: TrainConfig,
    rng: RandomStream,
    embedding_dim: int = 64,
) -> Tuple[DaeModel, FitResult]:
    """Station-wise masking on the input; MSE over the masked stations'
    coordinates only. The decoder exists during training only; the encoder is
    what downstream consumers keep."""
    n_d, k = unlabeled.n_stations, unlabeled.k
    fx = build_extractor(n_d, k, rng.child("init/enc"), embedding_dim=embedding_dim)
    drng = rng.child("init/dec")
    # symmetric but shallower reconstruction net: two dense layers, BN + dropout
    decoder = MlpStack(
        [
            Dense("dec.d0", embedding_dim, 128, drng.child("d0")),
            Relu("dec.relu"),
            BatchNorm("dec.bn", 128),
            Dropout("dec.drop", 0.3),
            Dense("dec.d1", 128, n_d * k, drng.child("d1")),
        ]
    )
    x_all = unlabeled.x.astype(np.float32)
    params = dict(fx.params())
    params.update(decoder.params())
    buffers = dict(fx.buffers())
    buffers.update(decoder.buffers())

    def step(idx, srng):
        xb = x_all[idx]
        n = len(idx)
        mask = sample_mask_matrix(p_mask, n, n_d, srng.child("mask"))
        xin = xb * (~mask)[:, :, None]
        q, enc_caches = fx.encode_batch(xin, "train", srng.child("enc"))
        z, agg_caches = fx.aggregate_batch(q, "train", srng.child("agg"))
        recon, dec_caches = decoder.forward(z, "train", srng.child("dec"))
        coord_mask = np.repeat(mask, k, axis=1)  # (n, N_d*K)
        loss, drecon = masked_mse_loss(recon, xb.reshape(n, -1), coord_mask)
        dz, grads = decoder.backward(dec_caches, drecon)
        dq, agg_grads = fx.aggregate_backward(agg_caches, dz)
        grads.update(agg_grads)
        grads.update(fx.encode_backward(enc_caches, dq))
        return loss, grads

    result = fit_loop(params, step, unlabeled.n, tc, rng.child("dae"), buffers)
    return DaeModel(fx, decoder), result


def inpaint_batch(reconstructor: DaeModel, xb: np.ndarray, missing: np.ndarray) -> np.ndarray:
    """Splice reconstructed values into missing stations only; observed
    coordinates are untouched."""
    if not missing.any():
        return xb
    recon = reconstructor.reconstruct(xb)
    out = xb.copy()
    out[missing] = recon[missing]
    return out


def inpaint_predict(
    model, reconstructor: DaeModel, x: MultiStationSample
) -> float:
    """Recover missing stations with the encoder-decoder, then predict."""
    xb = x.matrix()[None, :, :].astype(np.float32)
    miss = np.array([[d in x.observed_missing for d in range(x.n_stations)]])
    filled = inpaint_batch(reconstructor, xb, miss)
    return float(model.predict(filled)[0])


class InpaintingModel:
    """Naive supervised predictor preceded by reconstruction of any missing
    (all-zero flagged) stations."""

    def __init__(self, base: SensingModel, reconstructor: DaeModel):
        self.base = base
        self.reconstructor = reconstructor

    def predict(self, xb: np.ndarray, missing: Optional[np.ndarray] = None) -> np.ndarray:
        xb = np.asarray(xb, dtype=np.float32)
        if missing is None:
            # infer missingness from all-zero station rows
            missing = np.all(xb == 0.0, axis=2)
        return self.base.predict(inpaint_batch(self.reconstructor, xb, missing))

    def predict_sample(self, x: MultiStationSample) -> float:
        return float(self.predict(x.matrix()[None, :, :])[0])


# ---------------------------------------------------------------------------
# model checkpoints
# ---------------------------------------------------------------------------


def save_model(model: SensingModel, path, meta: Optional[dict] = None) -> None:
    from .nnkit import write_bundle

    manifest = {
        "type": "sensing_model",
        "mode": model.mode,
        "head": model.head.manifest(),
        "extractor": None,
        "meta": meta or {},
    }
    arrays = {f"head/param:{k}": v for k, v in model.head.params().items()}
    arrays.update({f"head/buffer:{k}": v for k, v in model.head.buffers().items()})
    fx = model.extractor
    if fx is not None:
        manifest["extractor"] = {
            "n_stations": fx.n_stations,
            "input_dim": fx.input_dim,
            "encoder_dim": fx.encoder_dim,
            "embedding_dim": fx.embedding_dim,
            "aggregator": fx.aggregator.manifest(),
            "encoders": None if fx.encoders is None else [e.manifest() for e in fx.encoders],
        }
        arrays.update({f"fx/param:{k}": v for k, v in fx.params().items()})
        arrays.update({f"fx/buffer:{k}": v for k, v in fx.buffers().items()})
    write_bundle(path, manifest, arrays)


def load_model(path) -> SensingModel:
    from .nnkit import read_bundle

    manifest, arrays = read_bundle(path)
    if manifest.get("type") != "sensing_model":
        raise ValueError("not a sensing model checkpoint")
    head = MlpStack.from_manifest(manifest["head"])
    head.set_params({k[len("head/param:"):]: v for k, v in arrays.items() if k.startswith("head/param:")})
    head.set_buffers({k[len("head/buffer:"):]: v for k, v in arrays.items() if k.startswith("head/buffer:")})
    fx = None
    if manifest["extractor"] is not None:
        fm = manifest["extractor"]
        aggregator = MlpStack.from_manifest(fm["aggregator"])
        encoders = None
        if fm["encoders"] is not None:
            encoders = [MlpStack.from_manifest(m) for m in fm["encoders"]]
        fx = FeatureExtractor(
            fm["n_stations"], fm["input_dim"], aggregator, encoders,
            fm["encoder_dim"], fm["embedding_dim"],
        )
        for name, p in fx.params().items():
            p[...] = arrays[f"fx/param:{name}"]
        for name, b in fx.buffers().items():
            b[...] = arrays[f"fx/buffer:{name}"]
    return SensingModel(fx, head, manifest["mode"])
