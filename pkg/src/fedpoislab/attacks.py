"""Data poisoning attacks: a uniform (dataset, plan, seed) -> dataset interface.

All attacks are pure: the benign dataset is never touched and the output is
a deterministic function of (dataset, plan, seed). Baseline attacks poison
all of a malicious client's data; the diffusion attack replaces the shard
with generated samples outright.
"""

from dataclasses import dataclass, field

import numpy as np

from . import diffusion as df
from .data import LabeledDataset
from .errors import InputError
from .seeding import spawn

LIGHT_GAUSS_SIGMA = 0.1
HEAVY_GAUSS_SIGMA = 0.5
SAP_PROBABILITY = 0.1

ATTACK_KINDS = ("label_flip", "noise", "pcdm", "constant_update")
NOISE_KINDS = ("light_gauss", "heavy_gauss", "sap")


@dataclass(frozen=True)
class AttackPlan:
    """What a malicious client does to its shard (or, for constant_update,
    to its uploads). Which clients are malicious lives in the federation
    config, not here.
    """

    kind: str
    noise_kind: str = "light_gauss"
    noise_param: float = 0.0  # 0 -> kind default
    # diffusion attack parameters
    jump: df.JumpSchedule = None
    sigma_v: float = 1.0
    mu_v: float = 5.0
    resample_context: bool = False
    epochs: int = 30
    denoiser_lr: float = 0.1
    denoiser_hidden: tuple = (128,)
    batch_size: int = 32
    k_p: int = 0  # 0 -> shard size
    seed: int = 0  # keys the global poisoning vector

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise InputError(f"unknown attack kind {self.kind!r}")
        if self.kind == "noise" and self.noise_kind not in NOISE_KINDS:
            raise InputError(f"unknown noise kind {self.noise_kind!r}")
        if self.kind == "pcdm" and self.jump is None:
            raise InputError("pcdm plan needs a jump schedule")


def default_noise_param(noise_kind: str) -> float:
    return {"light_gauss": LIGHT_GAUSS_SIGMA,
            "heavy_gauss": HEAVY_GAUSS_SIGMA,
            "sap": SAP_PROBABILITY}[noise_kind]


def poison_label_flip(ds: LabeledDataset, seed: int = 0) -> LabeledDataset:
    """Shift every label to the next class: y -> (y + 1) mod C."""
    if ds.class_count < 2:
        raise InputError("label flipping needs at least 2 classes")
    return LabeledDataset(ds.features, (ds.labels + 1) % ds.class_count, ds.class_count)


def poison_noise(ds: LabeledDataset, kind: str, param: float, seed: int) -> LabeledDataset:
    """Superimpose noise on the features; labels untouched.

    gauss: x <- clip(x + sigma * z). sap: with probability p a coordinate is
    replaced by -1 or +1 with equal odds.
    """
    rng = spawn(seed, "noise")
    if kind in ("light_gauss", "heavy_gauss"):
        if param <= 0:
            raise InputError("gaussian noise sigma must be > 0")
        noisy = np.clip(ds.features + param * rng.standard_normal(ds.features.shape), -1.0, 1.0)
    elif kind == "sap":
        if not 0.0 < param < 1.0:
            raise InputError("salt-and-pepper probability must be in (0, 1)")
        hit = rng.random(ds.features.shape) < param
        salt = rng.random(ds.features.shape) < 0.5
        noisy = np.where(hit, np.where(salt, 1.0, -1.0), ds.features)
    else:
        raise InputError(f"unknown noise kind {kind!r}")
    return LabeledDataset(noisy, ds.labels, ds.class_count)


def poison_pcdm(ds: LabeledDataset, plan: AttackPlan, seed: int) -> LabeledDataset:
    """Train the conditioned denoiser on the shard, then replace the shard
    with generated samples (labels copied from the shard)."""
    if plan.kind != "pcdm":
        raise InputError("plan kind must be pcdm")
    pv = df.PoisonVectorSpec(plan.sigma_v, plan.mu_v, ds.dim, seed=plan.seed,
                             resample=plan.resample_context)
    denoiser = df.train_denoiser(ds, plan.jump, pv, plan.epochs, plan.denoiser_lr,
                                 plan.batch_size, seed=spawn(seed, "pcdm-train").integers(2 ** 31),
                                 hidden=plan.denoiser_hidden)
    k_p = plan.k_p if plan.k_p > 0 else len(ds)
    return df.generate_poisoned_dataset(denoiser, plan.jump, pv, ds.labels, k_p,
                                        seed=spawn(seed, "pcdm-gen").integers(2 ** 31),
                                        class_count=ds.class_count)


def apply_attack(ds: LabeledDataset, plan: AttackPlan, seed: int) -> LabeledDataset:
    """Dispatch on plan.kind. constant_update leaves the data alone; it is
    an upload-level behavior handled by the federation loop."""
    if plan.kind == "label_flip":
        return poison_label_flip(ds, seed)
    if plan.kind == "noise":
        param = plan.noise_param if plan.noise_param > 0 else default_noise_param(plan.noise_kind)
        return poison_noise(ds, plan.noise_kind, param, seed)
    if plan.kind == "pcdm":
        return poison_pcdm(ds, plan, seed)
    return ds
