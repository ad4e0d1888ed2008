"""Local-data corruptions used by adversarial devices.

* ``fgsm``: L2-normalised input-gradient step scaled to the power budget.
* ``awgn``: Gaussian direction rescaled to exactly the same norm.
* ``flip``: labels remapped through a derangement.

Budgets come from the PNR/PSR/SNR relation ``PNR = PSR + SNR`` (all in dB).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from fedpoison import model as fm
from fedpoison.datakit import LabeledDataset, frame_energy
from fedpoison.errors import ConfigurationError
from fedpoison.grad_core import ParamSet

DEGENERATE_GRAD_NORM = 1e-12
ATTACK_KINDS = ("none", "fgsm", "awgn", "flip")

# per-frame AWGN substreams: (seed, _AWGN_STREAM, device, round, frame)
_AWGN_STREAM = 0xA3


def pairwise_flip_map(num_classes: int) -> tuple[int, ...]:
    """Swap (0,1), (2,3), ...; with odd C the last three classes form a 3-cycle."""
    if num_classes < 2:
        raise ConfigurationError("label flipping needs at least 2 classes")
    m = list(range(num_classes))
    pairs_end = num_classes if num_classes % 2 == 0 else num_classes - 3
    for i in range(0, pairs_end, 2):
        m[i], m[i + 1] = i + 1, i
    if num_classes % 2:
        a, b, c = num_classes - 3, num_classes - 2, num_classes - 1
        m[a], m[b], m[c] = b, c, a
    return tuple(m)


def check_derangement(flip_map, num_classes: int | None = None) -> tuple[int, ...]:
    fm_ = tuple(int(v) for v in flip_map)
    n = len(fm_)
    if num_classes is not None and n != num_classes:
        raise ConfigurationError(f"flip_map has {n} entries for {num_classes} classes")
    if sorted(fm_) != list(range(n)):
        raise ConfigurationError(f"flip_map {list(fm_)} is not a permutation of 0..{n - 1}")
    fixed = [i for i, v in enumerate(fm_) if i == v]
    if fixed:
        raise ConfigurationError(f"flip_map has fixed points {fixed}; labels would not be flipped")
    return fm_


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "none"
    pnr_db: float = 8.1
    alpha: float = 1.0
    flip_map: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigurationError(f"attack kind must be one of {ATTACK_KINDS}, got {self.kind!r}")
        if not self.alpha > 0:
            raise ConfigurationError(f"alpha must be positive, got {self.alpha}")
        if self.kind in ("fgsm", "awgn") and not math.isfinite(self.pnr_db):
            raise ConfigurationError(f"pnr_db must be finite, got {self.pnr_db}")
        if self.flip_map is not None:
            object.__setattr__(self, "flip_map", check_derangement(self.flip_map))


@dataclass(frozen=True)
class PowerBudget:
    P: float
    pnr_db: float
    psr_db: float
    snr_db: float

    @property
    def norm(self) -> float:
        return math.sqrt(self.P)


def budget_from_pnr(pnr_db: float, snr_db: float, signal_energy: float = 1.0) -> PowerBudget:
    """Squared-L2 budget ``P = E * 10**(PSR/10)`` with ``PSR = PNR - SNR``."""
    if not signal_energy > 0:
        raise ConfigurationError(f"signal_energy must be positive, got {signal_energy}")
    psr_db = pnr_db - snr_db
    return PowerBudget(P=signal_energy * 10.0 ** (psr_db / 10.0), pnr_db=pnr_db, psr_db=psr_db, snr_db=snr_db)


@dataclass
class AttackStats:
    kind: str
    round: int | None = None
    delta_norms: list[float] = field(default_factory=list)
    degenerate_count: int = 0
    flipped: int = 0

    @property
    def mean_delta_norm(self) -> float:
        return float(np.mean(self.delta_norms)) if self.delta_norms else 0.0


def _fgsm_batch(frames, labels, params: ParamSet, norms: np.ndarray, chunk: int = 256):
    """Perturbed frames, delta norms and a degenerate mask for a batch."""
    out = np.empty(frames.shape, dtype=np.float64)
    delta_norm = np.zeros(len(frames))
    degenerate = np.zeros(len(frames), dtype=bool)
    for s in range(0, len(frames), chunk):
        x = frames[s : s + chunk]
        g = fm.gradients(params, x, labels[s : s + chunk], reduction="sum").input_grad
        g = np.asarray(g, dtype=np.float64).reshape(len(x), -1)
        gnorm = np.linalg.norm(g, axis=1)
        bad = gnorm < DEGENERATE_GRAD_NORM
        scale = np.where(bad, 0.0, norms[s : s + chunk] / np.where(bad, 1.0, gnorm))
        delta = (g * scale[:, None]).reshape(x.shape)
        out[s : s + chunk] = np.asarray(x, dtype=np.float64) + delta
        delta_norm[s : s + chunk] = np.linalg.norm(delta.reshape(len(x), -1), axis=1)
        degenerate[s : s + chunk] = bad
    return out, delta_norm, degenerate


def craft_fgsm(frame: np.ndarray, label: int, params: ParamSet, budget: PowerBudget):
    """``r + sqrt(P) * g / ||g||`` with ``g`` the loss gradient w.r.t. the frame.

    Returns ``(perturbed, delta_norm)``.  A vanishing gradient leaves the
    frame untouched and reports ``delta_norm = 0``.  The result is not
    re-normalised.
    """
    frame = np.asarray(frame)
    out, norm, _ = _fgsm_batch(frame[None], np.array([label]), params, np.array([budget.norm]))
    return out[0], float(norm[0])


def _awgn_delta(shape, norm: float, rng: np.random.Generator) -> np.ndarray:
    d = rng.standard_normal(shape)
    n = np.linalg.norm(d)
    return d * (norm / n) if n > 0 else np.zeros(shape)


def craft_awgn(frame: np.ndarray, budget: PowerBudget, rng: np.random.Generator):
    """Gaussian perturbation rescaled to ``||delta|| = sqrt(P)`` exactly."""
    frame = np.asarray(frame, dtype=np.float64)
    delta = _awgn_delta(frame.shape, budget.norm, rng)
    return frame + delta, float(np.linalg.norm(delta))


def flip_labels(shard: LabeledDataset, flip_map) -> LabeledDataset:
    m = np.asarray(check_derangement(flip_map, shard.num_classes))
    return shard.replace(labels=m[shard.labels])


def frame_rng(seed: int, device: int, rnd: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, _AWGN_STREAM, device, rnd, index])


def poison_shard(
    shard: LabeledDataset,
    spec: AttackSpec,
    params: ParamSet,
    snr_db: float,
    seed: int = 0,
    device: int = 0,
    rnd: int = 0,
) -> tuple[LabeledDataset, AttackStats]:
    """Corrupt a whole shard against the current global ``params``.

    AWGN uses one counter-based RNG substream per frame, keyed by
    ``(seed, device, rnd, frame index)``, so the result does not depend on
    processing order.
    """
    if spec.kind == "none":
        raise ConfigurationError("poison_shard called with attack kind 'none'")
    stats = AttackStats(kind=spec.kind, round=rnd)
    if spec.kind == "flip":
        flip_map = spec.flip_map or pairwise_flip_map(shard.num_classes)
        stats.flipped = len(shard)
        return flip_labels(shard, flip_map), stats
    if len(shard) == 0:
        return shard, stats

    energy = frame_energy(shard.frames)
    budgets = [budget_from_pnr(spec.pnr_db, snr_db, e) for e in energy]
    norms = np.array([b.norm for b in budgets])
    if spec.kind == "fgsm":
        perturbed, dnorm, degenerate = _fgsm_batch(shard.frames, shard.labels, params, norms)
        stats.degenerate_count = int(degenerate.sum())
        stats.delta_norms = dnorm[~degenerate].tolist()
    else:
        perturbed = np.empty(shard.frames.shape)
        dnorm = np.empty(len(shard))
        for i in range(len(shard)):
            perturbed[i], dnorm[i] = craft_awgn(shard.frames[i], budgets[i], frame_rng(seed, device, rnd, i))
        stats.delta_norms = dnorm.tolist()
    return shard.replace(frames=perturbed), stats
