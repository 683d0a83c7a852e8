"""Forward/reverse diffusion with poisoning-vector conditioning.

Two schedule types drive everything. ``DiffusionSchedule`` is the usual
linear-beta process over T steps. ``JumpSchedule`` compresses it: each
compressed step t spans a stride of e_t base steps and absorbs the base
noise accumulated over that stride, so beta_hat_t ~= e_t * beta_t and the
total injected variance matches the base schedule (exactly when the strides
tile the base horizon, within 5% otherwise, enforced at construction). With
mean stride e-bar, the compressed horizon is T_hat = round(T / e-bar).

The denoiser is an MLP over (noised sample | sinusoidal time embedding |
label one-hot). A realized poisoning context c = sigma_v * z + mu_v * 1 is
added to the sample before both noising (training) and denoising input
(generation); with sigma_v = mu_v = 0 the whole pipeline reduces bitwise to
an unconditioned model. The forward sampler takes no poisoning input at all:
the forward process is invariant by construction.
"""

from dataclasses import dataclass

import numpy as np

from . import nn
from .data import LabeledDataset
from .errors import InputError, NumericError, ScheduleError
from .seeding import spawn


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ScheduleError("need at least one beta")
        if betas.min() <= 0.0 or betas.max() >= 1.0:
            raise ScheduleError("betas must lie strictly inside (0, 1)")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", 1.0 - betas)
        object.__setattr__(self, "alpha_bars", np.cumprod(1.0 - betas))

    @property
    def horizon(self) -> int:
        return self.betas.size


def make_linear_schedule(horizon: int, beta_start: float = 1e-4,
                         beta_end: float = 0.02) -> DiffusionSchedule:
    if horizon < 1:
        raise InputError("horizon must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise InputError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    return DiffusionSchedule(np.linspace(beta_start, beta_end, horizon))


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _stride_block_sums(betas: np.ndarray, boundaries: np.ndarray) -> np.ndarray:
    """Base noise accumulated inside each stride block.

    Treats the base schedule as a step function (beta_s on the unit interval
    (s-1, s]) and integrates it between consecutive stride boundaries, so
    integer boundaries reduce to exact slice sums and e_t = 1 reproduces the
    base betas bitwise.
    """
    horizon = betas.size
    sums = np.empty(boundaries.size - 1)
    for t in range(boundaries.size - 1):
        lo = float(boundaries[t])
        hi = float(min(boundaries[t + 1], horizon))
        if hi <= lo:
            raise ScheduleError(f"stride sequence exhausts the base schedule at step {t + 1}")
        lo_int = int(np.ceil(lo))
        hi_int = int(np.floor(hi))
        total = betas[lo_int:hi_int].sum() if hi_int > lo_int else 0.0
        if lo_int > lo:
            total += (lo_int - lo) * betas[lo_int - 1]
        if hi > hi_int:
            total += (hi - hi_int) * betas[hi_int]
        sums[t] = total
    return sums


@dataclass(frozen=True)
class JumpSchedule:
    """Compressed schedule: e_t base steps collapsed into one noisy stride."""

    base: DiffusionSchedule
    expansion: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.expansion, dtype=np.float64)
        if e.ndim != 1 or e.size < 1:
            raise ScheduleError("expansion sequence must be non-empty")
        if e.min() < 1.0:
            raise ScheduleError("every expansion factor must be >= 1")
        mean_stride = float(e.mean())
        horizon_hat = e.size
        expected = _round_half_up(self.base.horizon / mean_stride)
        if horizon_hat != expected:
            raise ScheduleError(
                f"compressed horizon {horizon_hat} != round(T / mean stride) = {expected}")
        boundaries = np.concatenate(([0.0], np.cumsum(e)))
        betas_hat = _stride_block_sums(self.base.betas, boundaries)
        if betas_hat.min() <= 0.0 or betas_hat.max() >= 1.0:
            raise ScheduleError(
                f"compressed betas leave (0, 1): range [{betas_hat.min()}, {betas_hat.max()}]")
        base_total = float(self.base.betas.sum())
        drift = abs(float(betas_hat.sum()) - base_total)
        if drift > 0.05 * base_total:
            raise ScheduleError(
                f"accumulated noise drifts {drift / base_total:.1%} from the base schedule (limit 5%)")
        object.__setattr__(self, "expansion", e)
        object.__setattr__(self, "betas_hat", betas_hat)
        object.__setattr__(self, "alphas_hat", 1.0 - betas_hat)
        object.__setattr__(self, "alpha_bars_hat", np.cumprod(1.0 - betas_hat))
        object.__setattr__(self, "mean_stride", mean_stride)
        object.__setattr__(self, "horizon_hat", horizon_hat)

    @property
    def compressed(self) -> DiffusionSchedule:
        return DiffusionSchedule(self.betas_hat)


def make_jump_schedule(base: DiffusionSchedule, expansion) -> JumpSchedule:
    return JumpSchedule(base, np.asarray(expansion, dtype=np.float64))


def constant_expansion(horizon: int, stride: float) -> np.ndarray:
    """e_t = stride for all compressed steps; horizon_hat = round(T / stride)."""
    if stride < 1.0:
        raise InputError("stride must be >= 1")
    steps = _round_half_up(horizon / stride)
    if steps < 1:
        raise InputError(f"stride {stride} leaves no compressed steps for horizon {horizon}")
    return np.full(steps, float(stride))


def arithmetic_expansion(horizon: int, first: float, last: float) -> np.ndarray:
    """Linearly varying strides from first to last."""
    if min(first, last) < 1.0:
        raise InputError("expansion factors must be >= 1")
    steps = _round_half_up(horizon / ((first + last) / 2.0))
    if steps < 1:
        raise InputError("expansion too aggressive for this horizon")
    return np.linspace(first, last, steps)


def geometric_expansion(horizon: int, first: float, last: float) -> np.ndarray:
    """Geometrically varying strides; step count solved by fixpoint iteration."""
    if min(first, last) < 1.0:
        raise InputError("expansion factors must be >= 1")
    steps = max(1, _round_half_up(horizon / ((first + last) / 2.0)))
    for _ in range(100):
        seq = np.geomspace(first, last, steps)
        new_steps = _round_half_up(horizon / float(seq.mean()))
        if new_steps == steps:
            return seq
        steps = max(1, new_steps)
    raise ScheduleError("geometric expansion did not converge to a consistent step count")


def flat_beta_horizon(beta_hat: float, log_alpha_bar_target: float = -5.0) -> int:
    """Steps needed for log(alpha-bar) to reach the target at a constant beta.

    Example: beta_hat = 0.1 needs ceil(5 / 0.105) = 48 steps.
    """
    if not 0.0 < beta_hat < 1.0:
        raise InputError("beta_hat must be in (0, 1)")
    if log_alpha_bar_target >= 0.0:
        raise InputError("target log alpha-bar must be negative")
    per_step = -np.log1p(-beta_hat)
    return int(np.ceil(-log_alpha_bar_target / per_step))


def _schedule_arrays(schedule):
    """Accept either schedule type; a JumpSchedule contributes its compressed arrays."""
    if isinstance(schedule, JumpSchedule):
        return schedule.betas_hat, schedule.alphas_hat, schedule.alpha_bars_hat
    return schedule.betas, schedule.alphas, schedule.alpha_bars


def forward_sample(schedule, x0: np.ndarray, t, noise: np.ndarray) -> np.ndarray:
    """Closed-form forward draw: sqrt(abar_t) x0 + sqrt(1 - abar_t) noise.

    Note the signature: there is no poisoning input here. Conditioning only
    ever touches the reverse side, so forward invariance holds structurally.
    """
    _, _, alpha_bars = _schedule_arrays(schedule)
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > alpha_bars.size):
        raise InputError(f"t must lie in [1, {alpha_bars.size}]")
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != x0.shape:
        raise InputError(f"noise shape {noise.shape} != sample shape {x0.shape}")
    abar = alpha_bars[t_arr - 1]
    if x0.ndim == 2 and t_arr.ndim == 1:
        abar = abar[:, None]
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * noise


@dataclass(frozen=True)
class PoisonVectorSpec:
    """Scale/shift parameters of the global poisoning context.

    By default the context is one global draw shared by training and
    generation. With ``resample=True`` a fresh context is drawn per sample,
    which is what turns sigma_v into a between-sample diversity knob.
    """

    sigma_v: float
    mu_v: float
    dim: int
    seed: int
    resample: bool = False

    def __post_init__(self):
        if self.sigma_v < 0:
            raise InputError("sigma_v must be >= 0")
        if self.dim < 1:
            raise InputError("dim must be >= 1")

    def realize(self) -> np.ndarray:
        """One draw c = sigma_v * z + mu_v * 1, fixed per attack instance."""
        z = spawn(self.seed, "poison-vector").standard_normal(self.dim)
        return self.sigma_v * z + self.mu_v

    def draw(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """Per-sample contexts from a caller-owned stream (resample mode)."""
        return self.sigma_v * rng.standard_normal((count, self.dim)) + self.mu_v


def time_embedding(t, width: int) -> np.ndarray:
    """Sinusoidal embedding of integer time steps, transformer-style."""
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = width // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    angles = t_arr[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


@dataclass(frozen=True)
class Denoiser:
    """MLP noise predictor over (sample | time embedding | label one-hot)."""

    net: nn.Network
    sample_dim: int
    class_count: int
    time_dim: int = 16

    def __post_init__(self):
        expected_in = self.sample_dim + self.time_dim + self.class_count
        if self.net.spec.input_size != expected_in:
            raise InputError(f"denoiser input size {self.net.spec.input_size} != {expected_in}")
        if self.net.spec.output_size != self.sample_dim:
            raise InputError("denoiser output dimension must equal sample dimension")


def init_denoiser(sample_dim: int, class_count: int, hidden=(128,),
                  time_dim: int = 16, seed: int = 0) -> Denoiser:
    spec = nn.NetworkSpec((sample_dim + time_dim + class_count, *hidden, sample_dim),
                          activation="relu", output_head="linear-mse")
    return Denoiser(nn.init_network(spec, seed), sample_dim, class_count, time_dim)


def _denoiser_input(denoiser: Denoiser, x: np.ndarray, t, labels) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    t_arr = np.broadcast_to(np.asarray(t), (n,))
    emb = time_embedding(t_arr, denoiser.time_dim)
    onehot = np.zeros((n, denoiser.class_count))
    onehot[np.arange(n), np.broadcast_to(np.asarray(labels), (n,))] = 1.0
    return np.concatenate([x, emb, onehot], axis=1)


def predict_noise(denoiser: Denoiser, x: np.ndarray, t, labels) -> np.ndarray:
    return nn.forward(denoiser.net, _denoiser_input(denoiser, x, t, labels))


def train_denoiser_with_history(dataset: LabeledDataset, schedule, pv: PoisonVectorSpec,
                                epochs: int, lr: float, batch_size: int, seed: int,
                                hidden=(128,), time_dim: int = 16):
    """Denoising-loss training; returns (denoiser, per-epoch mean losses).

    Each step draws (x, y) batches, per-sample t uniform on [1, T_hat] and
    eps ~ N(0, I), noises x + c with the realized poisoning context c, and
    takes one SGD step on || eps - predicted ||^2.
    """
    if epochs < 0:
        raise InputError("epochs must be >= 0")
    if pv.dim != dataset.dim:
        raise InputError(f"poison vector dim {pv.dim} != sample dim {dataset.dim}")
    _, _, alpha_bars = _schedule_arrays(schedule)
    horizon = alpha_bars.size
    context = pv.realize()
    denoiser = init_denoiser(dataset.dim, dataset.class_count, hidden, time_dim,
                             seed=spawn(seed, "denoiser-init").integers(2 ** 31))
    if epochs == 0:
        return denoiser, np.array([])

    rng = spawn(seed, "denoiser-train")
    net = denoiser.net
    n = len(dataset)
    epoch_losses = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        step_losses = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            t_batch = rng.integers(1, horizon + 1, size=len(idx))
            eps = rng.standard_normal((len(idx), dataset.dim))
            ctx = pv.draw(rng, len(idx)) if pv.resample else context
            abar = alpha_bars[t_batch - 1][:, None]
            noised = np.sqrt(abar) * (dataset.features[idx] + ctx) + np.sqrt(1.0 - abar) * eps
            batch_in = _denoiser_input(
                Denoiser(net, dataset.dim, dataset.class_count, time_dim),
                noised, t_batch, dataset.labels[idx])
            try:
                loss, grad = nn.loss_and_grad(net, batch_in, eps)
            except NumericError as err:
                raise NumericError(f"epoch {epoch} step {start // batch_size}: {err}") from err
            net = nn.sgd_step(net, grad, lr)
            step_losses.append(loss)
        epoch_losses.append(float(np.mean(step_losses)))
    return Denoiser(net, dataset.dim, dataset.class_count, time_dim), np.asarray(epoch_losses)


def train_denoiser(dataset: LabeledDataset, schedule, pv: PoisonVectorSpec,
                   epochs: int, lr: float, batch_size: int, seed: int,
                   hidden=(128,), time_dim: int = 16) -> Denoiser:
    denoiser, _ = train_denoiser_with_history(dataset, schedule, pv, epochs, lr,
                                              batch_size, seed, hidden, time_dim)
    return denoiser


def reverse_sample_step(denoiser: Denoiser, schedule, x_t: np.ndarray, t: int,
                        context: np.ndarray, z: np.ndarray, sigma_t: float,
                        labels) -> np.ndarray:
    """One reverse step with the poisoning context injected:

        x_{t-1} = (x_t + c - (1 - a_t)/sqrt(1 - abar_t) * eps(x_t + c, t)) / sqrt(a_t)
                  + sigma_t * z
    """
    betas, alphas, alpha_bars = _schedule_arrays(schedule)
    if not 1 <= t <= betas.size:
        raise InputError(f"t must lie in [1, {betas.size}]")
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    x_cond = x_t + context
    eps = predict_noise(denoiser, x_cond, t, labels)
    alpha_t = alphas[t - 1]
    abar_t = alpha_bars[t - 1]
    mean = (x_cond - (1.0 - alpha_t) / np.sqrt(1.0 - abar_t) * eps) / np.sqrt(alpha_t)
    return mean + sigma_t * np.asarray(z, dtype=np.float64)


def generate_poisoned_dataset(denoiser: Denoiser, schedule, pv: PoisonVectorSpec,
                              labels_source: np.ndarray, k_p: int, seed: int,
                              class_count=None) -> LabeledDataset:
    """Sample k_p poisoned rows by reverse diffusion from pure noise.

    Labels are copied from the source: the full multiset when k_p matches the
    source size, otherwise drawn with replacement from it. Per-sample noise
    streams are keyed by (seed, sample index), so the output is independent
    of how samples are batched. Outputs are clipped to [-1, 1].
    """
    if k_p < 1:
        raise InputError("k_p must be >= 1")
    labels_source = np.asarray(labels_source, dtype=np.int64)
    if labels_source.size == 0:
        raise InputError("labels_source is empty")
    betas, _, _ = _schedule_arrays(schedule)
    horizon = betas.size
    dim = denoiser.sample_dim
    if class_count is None:
        class_count = denoiser.class_count

    if k_p == labels_source.size:
        labels = labels_source.copy()
    else:
        labels = spawn(seed, "gen-labels").choice(labels_source, size=k_p, replace=True)

    x = np.empty((k_p, dim))
    step_noise = np.empty((k_p, horizon - 1, dim)) if horizon > 1 else None
    if pv.resample:
        context = np.empty((k_p, dim))
    else:
        context = pv.realize()
    for k in range(k_p):
        stream = spawn(seed, "gen", k)
        if pv.resample:
            context[k] = pv.draw(stream, 1)[0]
        x[k] = stream.standard_normal(dim)
        if horizon > 1:
            step_noise[k] = stream.standard_normal((horizon - 1, dim))

    for t in range(horizon, 0, -1):
        if t > 1:
            sigma_t = float(np.sqrt(betas[t - 1]))
            z = step_noise[:, horizon - t, :]
        else:
            sigma_t = 0.0
            z = np.zeros_like(x)
        x = reverse_sample_step(denoiser, schedule, x, t, context, z, sigma_t, labels)

    return LabeledDataset(np.clip(x, -1.0, 1.0), labels, class_count)
