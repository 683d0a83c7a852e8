"""Round-based FL simulation with poisoning, detection, and robust aggregation.

One experiment = partition the training data over N clients, let the first
floor(malicious_fraction * N) clients (after a seeded shuffle) poison their
shard once up front, then run R rounds of select -> local train -> (detect)
-> aggregate -> evaluate. Everything is keyed off cfg.seed, so a run is a
pure function of (config, datasets).
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import defenses as dfs
from . import metrics
from . import nn
from .attacks import AttackPlan, apply_attack
from .data import LabeledDataset, partition_dirichlet, partition_iid
from .errors import DefenseError, InputError
from .seeding import spawn

AGGREGATOR_KINDS = ("fedavg", "multikrum", "signguard", "lasa")
DETECTOR_KINDS = ("pca", "kmeans", "cosine", "dnc", "interval_distance", "consistency")
INTERVAL_DETECTORS = ("interval_distance", "consistency")


@dataclass(frozen=True)
class AggregatorSpec:
    kind: str = "fedavg"
    krum_f: int = 1
    krum_m: int = 0  # 0 -> B - f
    signguard_band: tuple = (0.1, 3.0)
    signguard_subsample: int = 2000
    lasa_k_frac: float = 0.3
    lasa_mag_band: tuple = (0.5, 2.0)
    lasa_purity_min: float = 0.5

    def __post_init__(self):
        if self.kind not in AGGREGATOR_KINDS:
            raise InputError(f"unknown aggregator {self.kind!r}")


@dataclass(frozen=True)
class DefenseSpec:
    detector: str
    window: int = 10  # interval detectors review the last `window` rounds
    kappa: float = 2.0
    pca_k: int = 2
    dnc_subsample: int = 2000
    dnc_c_mult: float = 1.0
    dnc_f_est: int = 0  # 0 -> max(1, round(0.2 * B))

    def __post_init__(self):
        if self.detector not in DETECTOR_KINDS:
            raise InputError(f"unknown detector {self.detector!r}")
        if self.window < 1:
            raise InputError("window must be >= 1")


@dataclass(frozen=True)
class FlConfig:
    n_clients: int = 20
    client_fraction: float = 0.5
    rounds: int = 30
    local_epochs: int = 5
    batch_size: int = 32
    lr: float = 0.05
    malicious_fraction: float = 0.0
    attack: AttackPlan = None
    aggregator: AggregatorSpec = AggregatorSpec()
    defense: DefenseSpec = None
    partition: str = "iid"  # iid | dirichlet
    dirichlet_alpha: float = 0.5
    classifier_hidden: tuple = (128,)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.client_fraction <= 1.0:
            raise InputError("client_fraction must be in (0, 1]")
        if not 0.0 <= self.malicious_fraction <= 1.0:
            raise InputError("malicious_fraction must be in [0, 1]")
        if self.n_clients < 1 or self.rounds < 0:
            raise InputError("need n_clients >= 1 and rounds >= 0")
        if self.partition not in ("iid", "dirichlet"):
            raise InputError(f"unknown partition mode {self.partition!r}")

    @property
    def clients_per_round(self) -> int:
        return max(1, math.ceil(self.client_fraction * self.n_clients))


@dataclass
class RoundRecord:
    round_index: int
    selected: np.ndarray
    updates: dfs.UpdateMatrix
    global_params: np.ndarray
    accuracy: float
    report: dfs.DetectionReport = None
    dropped: tuple = ()


def select_clients(n_clients: int, fraction: float, round_index: int, seed: int) -> np.ndarray:
    """ceil(fraction * N) distinct ids, uniform, deterministic in (seed, round)."""
    if not 0.0 < fraction <= 1.0:
        raise InputError("fraction must be in (0, 1]")
    b = max(1, math.ceil(fraction * n_clients))
    rng = spawn(seed, "select", round_index)
    return np.sort(rng.permutation(n_clients)[:b])


def local_train(global_pv: nn.ParamVector, ds: LabeledDataset, spec: nn.NetworkSpec,
                epochs: int, batch_size: int, lr: float, seed: int) -> nn.ParamVector:
    """Local SGD from the received global model; returns the new flat params."""
    net = nn.unflatten(global_pv, spec)
    trained = nn.train_network(net, ds.features, ds.labels, epochs, batch_size, lr, seed)
    return nn.flatten(trained)


def aggregate_fedavg(updates: list) -> nn.ParamVector:
    """Coordinate-wise mean of ParamVectors with identical layouts."""
    if not updates:
        raise InputError("no updates to aggregate")
    layout = updates[0].layout
    for pv in updates[1:]:
        if pv.layout != layout:
            raise InputError("updates have mismatched layouts")
    return nn.ParamVector(dfs.aggregate_fedavg(np.stack([pv.values for pv in updates])), layout)


def attack_effectiveness(clean_trace, attacked_trace) -> np.ndarray:
    """Per-round accuracy reduction a_r - a_r_attacked."""
    clean = np.asarray(clean_trace, dtype=np.float64)
    attacked = np.asarray(attacked_trace, dtype=np.float64)
    if clean.shape != attacked.shape:
        raise InputError("traces have different lengths")
    return clean - attacked


def malicious_ids(cfg: FlConfig) -> set:
    """Fixed compromised subset: first floor(mf * N) after a seeded shuffle."""
    count = int(math.floor(cfg.malicious_fraction * cfg.n_clients))
    if count == 0 or cfg.attack is None:
        return set()
    order = spawn(cfg.seed, "malicious").permutation(cfg.n_clients)
    return set(int(i) for i in order[:count])


def _partition(cfg: FlConfig, train: LabeledDataset):
    if cfg.partition == "iid":
        plan = partition_iid(train, cfg.n_clients, spawn(cfg.seed, "partition").integers(2 ** 31))
    else:
        plan = partition_dirichlet(train, cfg.n_clients, cfg.dirichlet_alpha,
                                   spawn(cfg.seed, "partition").integers(2 ** 31))
    return [train.subset(idx) for idx in plan.assignments]


def _run_detector(cfg: FlConfig, round_index: int, updates: dfs.UpdateMatrix,
                  window_records: list):
    """Returns a DetectionReport or None when the detector cannot run yet."""
    spec = cfg.defense
    if spec.detector in INTERVAL_DETECTORS:
        if round_index < spec.window:
            return None
        window = {rec.round_index: rec.updates for rec in window_records[-spec.window:]}
        rows = metrics.project_window(window, truth=set())
        history = metrics.projection_history(rows)
        min_points = 3 if spec.detector == "consistency" else 1
        history = {cid: pts for cid, pts in history.items() if len(pts) >= min_points}
        if len(history) < 2:
            return None
        if spec.detector == "interval_distance":
            return dfs.interval_distance(history)
        return dfs.detect_consistency(history)

    if updates.n_clients < 4:
        return None
    if spec.detector == "pca":
        return dfs.detect_pca(updates, k=spec.pca_k, kappa=spec.kappa)
    if spec.detector == "kmeans":
        return dfs.detect_kmeans(updates, k=spec.pca_k,
                                 seed=spawn(cfg.seed, "kmeans", round_index).integers(2 ** 31))
    if spec.detector == "cosine":
        return dfs.detect_cosine(updates, kappa=spec.kappa)
    f_est = spec.dnc_f_est if spec.dnc_f_est > 0 else max(1, round(0.2 * updates.n_clients))
    return dfs.detect_dnc(updates, subsample_dim=spec.dnc_subsample, c_mult=spec.dnc_c_mult,
                          f_est=f_est, seed=spawn(cfg.seed, "dnc", round_index).integers(2 ** 31))


def _aggregate(cfg: FlConfig, round_index: int, updates: dfs.UpdateMatrix,
               layout, prev_global: np.ndarray) -> np.ndarray:
    agg = cfg.aggregator
    if agg.kind == "fedavg":
        return dfs.aggregate_fedavg(updates.rows)
    if agg.kind == "multikrum":
        m = agg.krum_m if agg.krum_m > 0 else updates.n_clients - agg.krum_f
        value, _ = dfs.aggregate_multikrum(updates, f=agg.krum_f, m=m)
        return value
    if agg.kind == "signguard":
        value, _ = dfs.aggregate_signguard(
            updates, norm_band=agg.signguard_band, subsample_dim=agg.signguard_subsample,
            seed=spawn(cfg.seed, "signguard", round_index).integers(2 ** 31))
        return value
    value, _ = dfs.aggregate_lasa(updates, layout, prev_global, k_frac=agg.lasa_k_frac,
                                  mag_band=agg.lasa_mag_band, purity_min=agg.lasa_purity_min)
    return value


def run_experiment(cfg: FlConfig, train: LabeledDataset, test: LabeledDataset) -> list:
    """Full federated run; returns one RoundRecord per round."""
    if train.dim != test.dim or train.class_count != test.class_count:
        raise InputError("train and test datasets disagree on shape")
    if cfg.n_clients > len(train):
        raise InputError("more clients than training samples")
    if cfg.aggregator.kind == "multikrum":
        b = cfg.clients_per_round
        if b < 2 * cfg.aggregator.krum_f + 3:
            raise InputError(f"multikrum needs B >= 2f + 3; B={b}, f={cfg.aggregator.krum_f}")

    shards = _partition(cfg, train)
    bad_ids = malicious_ids(cfg)
    for cid in sorted(bad_ids):
        if cfg.attack.kind != "constant_update":
            shards[cid] = apply_attack(shards[cid], cfg.attack,
                                       seed=spawn(cfg.seed, "attack", cid).integers(2 ** 31))

    spec = nn.NetworkSpec((train.dim, *cfg.classifier_hidden, train.class_count))
    layout = nn.spec_layout(spec)
    global_pv = nn.flatten(nn.init_network(spec, seed=spawn(cfg.seed, "init").integers(2 ** 31)))

    records = []
    cached_uploads = {}  # constant_update attackers re-upload their first update
    for round_index in range(1, cfg.rounds + 1):
        selected = select_clients(cfg.n_clients, cfg.client_fraction, round_index, cfg.seed)
        rows = np.empty((len(selected), global_pv.dim))
        for i, cid in enumerate(selected):
            cid = int(cid)
            if cid in bad_ids and cfg.attack.kind == "constant_update" and cid in cached_uploads:
                rows[i] = cached_uploads[cid]
                continue
            update = local_train(global_pv, shards[cid], spec, cfg.local_epochs,
                                 cfg.batch_size, cfg.lr,
                                 seed=spawn(cfg.seed, "local", cid, round_index).integers(2 ** 31))
            rows[i] = update.values
            if cid in bad_ids and cfg.attack is not None and cfg.attack.kind == "constant_update":
                cached_uploads[cid] = update.values.copy()
        updates = dfs.UpdateMatrix(selected, rows)

        report = _run_detector(cfg, round_index, updates, records) if cfg.defense else None
        dropped = ()
        survivors = updates
        if report is not None:
            flagged = report.flagged_ids() & set(int(c) for c in selected)
            if flagged:
                keep = np.array([int(c) not in flagged for c in selected])
                dropped = tuple(sorted(flagged))
                if keep.any():
                    survivors = dfs.UpdateMatrix(selected[keep], rows[keep])
                else:
                    survivors = None

        if survivors is None:
            new_global = global_pv.values  # everyone flagged: carry forward
        else:
            try:
                new_global = _aggregate(cfg, round_index, survivors, layout, global_pv.values)
            except DefenseError:
                new_global = global_pv.values

        global_pv = nn.ParamVector(new_global, layout)
        accuracy = nn.evaluate_accuracy(nn.unflatten(global_pv, spec), test.features, test.labels)
        records.append(RoundRecord(round_index, selected, updates, global_pv.values.copy(),
                                   accuracy, report, dropped))
    return records


def accuracy_trace(records: list) -> np.ndarray:
    return np.array([rec.accuracy for rec in records])
