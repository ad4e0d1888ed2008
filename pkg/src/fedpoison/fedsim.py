"""Federated training with evasion-based poisoning.

Each round every device starts from the same global weights.  Benign
devices (and adversarial ones up to and including round ``t0``) train on
their clean shards; after ``t0`` adversarial devices first corrupt their
shard against the current global weights, then train on it.  The server
aggregates with size weights and per-device ``alpha`` scaling.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from fedpoison import attacks
from fedpoison import model as fm
from fedpoison.attacks import AttackSpec, AttackStats
from fedpoison.config import RunConfig
from fedpoison.datakit import (
    ChannelSpec,
    LabeledDataset,
    PartitionPlan,
    generate_dataset,
    load_dataset,
    partition_iid,
    partition_noniid,
    split_train_test,
)
from fedpoison.errors import ConfigurationError, FedPoisonError, RoundError
from fedpoison.grad_core import ParamSet

log = logging.getLogger(__name__)

# RNG stream ids; each stream is seeded from (run seed, stream id, ...).
STREAM_SPLIT = 1
STREAM_PARTITION = 2
STREAM_INIT = 3
STREAM_ADVERSARIES = 4
STREAM_SHUFFLE = 5

FINAL_WINDOW = 5


def derive_seed(*key: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class ScheduleConfig:
    total_rounds: int
    attack_start: int
    K: int
    A: int
    seed: int = 0

    def __post_init__(self):
        if self.total_rounds < 1:
            raise ConfigurationError("total_rounds must be positive")
        if not 0 <= self.attack_start <= self.total_rounds:
            raise ConfigurationError(f"need 0 <= t0 <= T, got t0={self.attack_start}, T={self.total_rounds}")
        if not 0 <= self.A <= self.K:
            raise ConfigurationError(f"need 0 <= A <= K, got A={self.A}, K={self.K}")

    @property
    def Q(self) -> int:
        return self.K - self.A

    def attack_active(self, t: int) -> bool:
        return t > self.attack_start


@dataclass
class DeviceState:
    id: int
    role: str
    shard: LabeledDataset
    attack: AttackSpec | None = None

    @property
    def size(self) -> int:
        return len(self.shard)

    @property
    def adversarial(self) -> bool:
        return self.role == "adversarial"


@dataclass
class RoundMetrics:
    round: int
    global_accuracy: float
    per_class_accuracy: tuple[float | None, ...]
    mean_loss: float
    attack_active: bool
    mean_delta_norm: float
    degenerate_count: int
    device_stats: dict[int, AttackStats] = field(default_factory=dict)
    param_digest: str = ""


@dataclass
class ExperimentResult:
    metrics: list[RoundMetrics]
    params: ParamSet
    adversaries: list[int]
    plan: PartitionPlan
    scheme_names: tuple[str, ...]

    def accuracies(self) -> list[float]:
        return [m.global_accuracy for m in self.metrics]


def aggregate(locals_: Sequence[ParamSet], sizes: Sequence[int], alphas: Sequence[float] | None = None) -> ParamSet:
    """``sum_k |D_k| / sum_i |D_i| * alpha_k * w_k``, accumulated in list order."""
    if not locals_:
        raise ConfigurationError("nothing to aggregate")
    alphas = [1.0] * len(locals_) if alphas is None else list(alphas)
    if not len(locals_) == len(sizes) == len(alphas):
        raise ConfigurationError("locals, sizes and alphas must have equal length")
    if any(s <= 0 for s in sizes):
        raise ConfigurationError(f"device sizes must be positive, got {list(sizes)}")
    ref = locals_[0]
    for p in locals_[1:]:
        ref.check_compatible(p, "aggregate")
    total = float(sum(sizes))
    weights = [float(s) / total * float(a) for s, a in zip(sizes, alphas)]
    out = {}
    for name in ref:
        acc = np.zeros(ref[name].shape, dtype=np.float64)
        for w, p in zip(weights, locals_):
            acc += w * p[name].astype(np.float64)
        out[name] = acc.astype(ref[name].dtype)
    return ParamSet(out)


def run_round(
    global_params: ParamSet,
    devices: Sequence[DeviceState],
    t: int,
    schedule: ScheduleConfig,
    tc: fm.TrainConfig,
    test_set: LabeledDataset,
    snr_db: float,
) -> tuple[ParamSet, RoundMetrics]:
    """One round (1-based ``t``); returns the next global weights and metrics on ``test_set``."""
    if not devices:
        raise ConfigurationError("run_round needs at least one device")
    active = schedule.attack_active(t)
    locals_, sizes, alphas = [], [], []
    stats: dict[int, AttackStats] = {}
    for dev in sorted(devices, key=lambda d: d.id):
        shard, alpha = dev.shard, 1.0
        try:
            if active and dev.adversarial and dev.attack is not None and dev.attack.kind != "none":
                shard, st = attacks.poison_shard(
                    dev.shard, dev.attack, global_params, snr_db, seed=schedule.seed, device=dev.id, rnd=t
                )
                stats[dev.id] = st
                alpha = dev.attack.alpha
            dtc = fm.TrainConfig(tc.lr, tc.batch_size, tc.local_epochs, derive_seed(schedule.seed, STREAM_SHUFFLE, dev.id, t))
            local = fm.local_train_round(global_params, shard, dtc)
        except FedPoisonError as exc:
            raise RoundError(f"round {t}: {exc}", dev.id) from exc
        locals_.append(local)
        sizes.append(dev.size)
        alphas.append(alpha)
    nxt = aggregate(locals_, sizes, alphas)
    ev = fm.evaluate(nxt, test_set)
    norms = [n for st in stats.values() for n in st.delta_norms]
    metrics = RoundMetrics(
        round=t,
        global_accuracy=ev.accuracy,
        per_class_accuracy=ev.per_class_accuracy,
        mean_loss=ev.mean_loss,
        attack_active=bool(stats),
        mean_delta_norm=float(np.mean(norms)) if norms else 0.0,
        degenerate_count=sum(st.degenerate_count for st in stats.values()),
        device_stats=stats,
        param_digest=nxt.digest(),
    )
    return nxt, metrics


def prepare_data(rc: RunConfig) -> tuple[LabeledDataset, LabeledDataset]:
    d = rc.dataset
    if d.path:
        full = load_dataset(d.path)
    else:
        full = generate_dataset(
            d.schemes,
            d.frames_per_class,
            ChannelSpec(d.snr_db, d.fading, rc.seed),
            length=d.length,
            seed=rc.seed,
            samples_per_symbol=d.samples_per_symbol,
        )
    return split_train_test(full, d.train_fraction, derive_seed(rc.seed, STREAM_SPLIT))


def make_partition(rc: RunConfig, train: LabeledDataset) -> PartitionPlan:
    p = rc.partition
    pseed = derive_seed(rc.seed, STREAM_PARTITION)
    if p.mode == "iid":
        return partition_iid(train, p.K, pseed)
    return partition_noniid(train, p.K, p.quantity_mean, p.quantity_std, p.labels_per_device, pseed)


def choose_adversaries(K: int, A: int, seed: int) -> list[int]:
    """First ``A`` ids of a seeded permutation; sets are nested in ``A``."""
    perm = np.random.default_rng(derive_seed(seed, STREAM_ADVERSARIES)).permutation(K)
    return sorted(int(i) for i in perm[:A])


def run_experiment(rc: RunConfig, progress=None) -> ExperimentResult:
    """Build data, partition it, pick adversaries and run all rounds.

    ``progress`` (optional) is called with each :class:`RoundMetrics`.
    """
    train, test = prepare_data(rc)
    plan = make_partition(rc, train)
    K = rc.partition.K
    A = rc.schedule.num_adversaries(K)
    snr_db = float(train.meta.get("snr_db", rc.dataset.snr_db))
    schedule = ScheduleConfig(rc.schedule.rounds, rc.schedule.attack_start, K, A, rc.seed)
    spec = rc.attack.spec(train.num_classes)
    adversaries = choose_adversaries(K, A, rc.seed) if spec.kind != "none" else []
    devices = []
    for k, idx in enumerate(plan.device_index_lists):
        if len(idx) == 0:
            raise ConfigurationError(f"device {k} received no data")
        adv = k in adversaries
        devices.append(DeviceState(k, "adversarial" if adv else "benign", train.subset(idx), spec if adv else None))

    mc = rc.model.build_config(train.length, train.num_classes, derive_seed(rc.seed, STREAM_INIT))
    params = fm.build(mc)
    tc = rc.train.build_config()
    metrics = []
    for t in range(1, schedule.total_rounds + 1):
        params, m = run_round(params, devices, t, schedule, tc, test, snr_db)
        metrics.append(m)
        log.debug("round %d acc=%.4f loss=%.4f attack=%s", t, m.global_accuracy, m.mean_loss, m.attack_active)
        if progress is not None:
            progress(m)
    return ExperimentResult(metrics, params, adversaries, plan, train.scheme_names)


def final_accuracy(series, window: int = FINAL_WINDOW) -> float:
    """Mean accuracy over the last ``window`` rounds (RoundMetrics or floats)."""
    vals = [m.global_accuracy if isinstance(m, RoundMetrics) else float(m) for m in series]
    if not vals:
        raise ConfigurationError("empty metrics series")
    return float(np.mean(vals[-window:]))


def accuracy_penalty(metrics_attacked, metrics_clean, window: int = FINAL_WINDOW) -> float:
    """Clean minus attacked final accuracy, in percentage points."""
    if len(metrics_attacked) != len(metrics_clean):
        raise ConfigurationError(
            f"series lengths differ: {len(metrics_attacked)} attacked vs {len(metrics_clean)} clean"
        )
    return 100.0 * (final_accuracy(metrics_clean, window) - final_accuracy(metrics_attacked, window))
