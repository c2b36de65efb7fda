"""Class-conditional diffusion over class prototypes.

Forward marginal, with ``f`` the frozen detector's class probabilities::

    y_t = sqrt(abar_t) y_0 + sqrt(1 - abar_t) eps + (1 - sqrt(abar_t)) f

which corresponds to the one-step kernel
``y_t = sqrt(alpha_t) y_{t-1} + (1 - sqrt(alpha_t)) f + sqrt(beta_t) z``.
The reverse step samples the Gaussian posterior of that kernel given the
denoiser's estimate of ``y_0``.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .acd import InstanceSet, StabParams, predict_logits
from .autograd import Tensor
from .errors import ConfigurationError, ContractError
from .nn import make_optimizer, squared_error

# named sub-streams derived from the run seed
STREAM_INIT = 11
STREAM_ORDER = 12
STREAM_T = 13
STREAM_EPS = 14
STREAM_SAMPLE = 15


@dataclass(frozen=True)
class DiffusionSchedule:
    beta: np.ndarray  # beta[t-1] for t = 1..T
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def abar(self, t):
        """abar_t with abar_0 = 1; ``t`` may be an int array."""
        t = np.asarray(t)
        padded = np.concatenate(([1.0], self.alpha_bar))
        return padded[t]


def make_schedule(T_steps: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    if T_steps < 1:
        raise ConfigurationError(f"T_steps must be >= 1, got {T_steps}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigurationError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T_steps) if T_steps > 1 else np.array([beta_start])
    return schedule_from_betas(beta)


def schedule_from_betas(beta: Sequence[float]) -> DiffusionSchedule:
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1 or beta.size == 0 or np.any(beta <= 0) or np.any(beta >= 1):
        raise ConfigurationError("every beta_t must lie in (0, 1)")
    alpha = 1.0 - beta
    return DiffusionSchedule(beta, alpha, np.cumprod(alpha))


def _check_t(t, schedule: DiffusionSchedule, lo: int = 1) -> np.ndarray:
    t = np.asarray(t)
    if np.any(t < lo) or np.any(t > schedule.T):
        raise ContractError(f"timestep outside [{lo}, {schedule.T}]: {t}")
    return t


def _col(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v[..., None] if v.ndim else v


# -- closed forms -----------------------------------------------------------------


def prior_from_logits(logits: np.ndarray) -> np.ndarray:
    """Softmax of detector logits: the conditioning prior f(x)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def prior(inst: InstanceSet, acd_params: StabParams) -> np.ndarray:
    """f_phi(x) for every instance, computed with the frozen detector."""
    return prior_from_logits(predict_logits(inst, acd_params))


def forward_diffuse(y0, f, t, eps, schedule: DiffusionSchedule) -> np.ndarray:
    """Noised prototype at step ``t`` (t = 0 returns y0)."""
    t = _check_t(t, schedule, lo=0)
    sa = _col(np.sqrt(schedule.abar(t)))
    return sa * y0 + np.sqrt(1.0 - sa**2) * eps + (1.0 - sa) * f


def reconstruct_y0(y_t, t, eps_hat, f, schedule: DiffusionSchedule) -> np.ndarray:
    t = _check_t(t, schedule, lo=0)
    abar = schedule.abar(t)
    if np.any(abar == 0):
        raise ContractError("abar_t = 0; y_0 is not recoverable")
    sa = _col(np.sqrt(abar))
    return (y_t - np.sqrt(1.0 - sa**2) * eps_hat - (1.0 - sa) * f) / sa


def posterior_coefficients(t: int, schedule: DiffusionSchedule) -> tuple[float, float, float, float]:
    """(gamma_0, gamma_1, gamma_2, posterior variance) for the step t -> t-1."""
    _check_t(t, schedule)
    beta = schedule.beta[t - 1]
    alpha = schedule.alpha[t - 1]
    abar = float(schedule.abar(t))
    abar_prev = float(schedule.abar(t - 1))
    denom = 1.0 - abar
    g0 = beta * math.sqrt(abar_prev) / denom
    g1 = (1.0 - abar_prev) * math.sqrt(alpha) / denom
    g2 = 1.0 + (math.sqrt(abar) - 1.0) * (math.sqrt(alpha) + math.sqrt(abar_prev)) / denom
    var = beta * (1.0 - abar_prev) / denom
    return g0, g1, g2, var


def reverse_step(y_t, t: int, eps_hat, f, schedule: DiffusionSchedule, z=None,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Sample y_{t-1}; the noise is dropped at t = 1."""
    g0, g1, g2, var = posterior_coefficients(t, schedule)
    y0_hat = reconstruct_y0(y_t, t, eps_hat, f, schedule)
    mean = g0 * y0_hat + g1 * y_t + g2 * f
    if t == 1:
        return mean
    if z is None:
        z = (rng or np.random.default_rng()).standard_normal(np.shape(y_t))
    return mean + math.sqrt(var) * z


def stepwise_forward(y0, f, t: int, schedule: DiffusionSchedule, rng: np.random.Generator) -> np.ndarray:
    """Apply the one-step noising kernel t times."""
    y = np.array(y0, dtype=np.float64)
    for s in range(1, t + 1):
        a = schedule.alpha[s - 1]
        y = math.sqrt(a) * y + (1.0 - math.sqrt(a)) * f + math.sqrt(1.0 - a) * rng.standard_normal(y.shape)
    return y


# -- denoiser network ----------------------------------------------------------------


def timestep_embedding(t, dim: int = 16) -> np.ndarray:
    """Sinusoidal features of integer timesteps, [B, dim]."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class DenoiserParams:
    """Three fully connected layers on [summary, y_t, f, embed(t)]."""

    weights: dict[str, Tensor]
    summary_dim: int
    K: int
    time_dim: int = 16

    @property
    def width(self) -> int:
        return self.weights["w1"].shape[1]

    def state(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.weights.items()}
        out["meta.summary_dim"] = np.array(float(self.summary_dim))
        out["meta.K"] = np.array(float(self.K))
        out["meta.time_dim"] = np.array(float(self.time_dim))
        return out

    @classmethod
    def from_state(cls, state: dict[str, np.ndarray]) -> "DenoiserParams":
        w = {k: ag.parameter(v, k) for k, v in state.items() if not k.startswith("meta.")}
        return cls(w, int(state["meta.summary_dim"]), int(state["meta.K"]), int(state["meta.time_dim"]))


def init_denoiser(summary_dim: int, K: int, width: int, rng: np.random.Generator, time_dim: int = 16) -> DenoiserParams:
    n_in = summary_dim + 2 * K + time_dim

    def layer(i, o, gain=math.sqrt(2.0)):
        return rng.normal(0.0, gain / math.sqrt(i), size=(i, o))

    w = {
        "w1": layer(n_in, width), "b1": np.zeros(width),
        "w2": layer(width, width), "b2": np.zeros(width),
        "w3": layer(width, K, 1.0), "b3": np.zeros(K),
    }
    return DenoiserParams({k: ag.parameter(v, k) for k, v in w.items()}, summary_dim, K, time_dim)


def denoise(params: DenoiserParams, summary, y_t, f, t) -> Tensor:
    """eps_theta(x, y_t, f(x), t) -> [B, K]."""
    summary = np.atleast_2d(np.asarray(summary, dtype=np.float64))
    B = summary.shape[0]
    temb = timestep_embedding(np.broadcast_to(np.asarray(t), (B,)), params.time_dim)
    y_t = y_t if isinstance(y_t, Tensor) else np.atleast_2d(y_t)
    x = ag.concat([summary, y_t, np.atleast_2d(f), temb], axis=-1)
    w = params.weights
    h = ag.relu(ag.add(ag.matmul(x, w["w1"]), w["b1"]))
    h = ag.relu(ag.add(ag.matmul(h, w["w2"]), w["b2"]))
    return ag.add(ag.matmul(h, w["w3"]), w["b3"])


EpsModel = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], "Tensor | np.ndarray"]


def as_eps_model(denoiser: DenoiserParams | EpsModel) -> EpsModel:
    if isinstance(denoiser, DenoiserParams):
        return lambda s, y, f, t: denoise(denoiser, s, y, f, t)
    return denoiser


def diffusion_loss(y0: np.ndarray, f: np.ndarray, summary: np.ndarray, schedule: DiffusionSchedule,
                   denoiser: DenoiserParams | EpsModel, rng: np.random.Generator | None = None,
                   t: np.ndarray | None = None, eps: np.ndarray | None = None) -> Tensor:
    """Batch mean of ||eps - eps_theta(x, y_t, f, t)||^2 with y_t from forward_diffuse."""
    y0 = np.atleast_2d(np.asarray(y0, dtype=np.float64))
    if y0.shape[0] == 0:
        raise ContractError("diffusion_loss on an empty batch")
    B, K = y0.shape
    if t is None:
        t = rng.integers(1, schedule.T + 1, size=B)
    if eps is None:
        eps = rng.standard_normal((B, K))
    t = _check_t(np.broadcast_to(np.asarray(t), (B,)), schedule)
    y_t = forward_diffuse(y0, f, t, eps, schedule)
    pred = as_eps_model(denoiser)(summary, y_t, f, t)
    return squared_error(pred if isinstance(pred, Tensor) else ag.tensor(pred), eps)


@dataclass
class CcdConfig:
    T_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    width: int = 128
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 64
    N: int = 100
    refine: str = "mean"
    seed: int = 0

    def validate(self) -> None:
        if self.N < 2:
            raise ConfigurationError(f"N must be >= 2 to form an interval, got {self.N}")
        if self.refine not in ("mean", "vote"):
            raise ConfigurationError(f"refine rule must be mean or vote, got {self.refine!r}")
        make_schedule(self.T_steps, self.beta_start, self.beta_end)

    def schedule(self) -> DiffusionSchedule:
        return make_schedule(self.T_steps, self.beta_start, self.beta_end)


def ccd_train(summaries: np.ndarray, priors: np.ndarray, labels: np.ndarray, K: int, cfg: CcdConfig,
              log=None) -> tuple[DenoiserParams, list[float]]:
    """Fit eps_theta on one-hot targets; the detector (priors, summaries) stays frozen."""
    cfg.validate()
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ConfigurationError("no training instances for the diffusion stage")
    schedule = cfg.schedule()
    y0 = np.eye(K)[labels]
    params = init_denoiser(summaries.shape[1], K, cfg.width, np.random.default_rng([cfg.seed, STREAM_INIT]))
    opt = make_optimizer("adam", params.weights, cfg.lr)
    order_rng = np.random.default_rng([cfg.seed, STREAM_ORDER])
    t_rng = np.random.default_rng([cfg.seed, STREAM_T])
    eps_rng = np.random.default_rng([cfg.seed, STREAM_EPS])
    curve = []
    n = labels.size
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = perm[s : s + cfg.batch_size]
            t = t_rng.integers(1, schedule.T + 1, size=idx.size)
            eps = eps_rng.standard_normal((idx.size, K))
            loss = diffusion_loss(y0[idx], priors[idx], summaries[idx], schedule, params, t=t, eps=eps)
            opt.step(ag.gradients(loss, params.weights))
            total += loss.item() * idx.size
        curve.append(total / n)
        if log is not None and (epoch + 1) % 25 == 0:
            log(f"ccd epoch {epoch + 1}/{cfg.epochs} loss {curve[-1]:.4f}")
    return params, curve


# -- sampling ------------------------------------------------------------------------


def sample_chains(summary: np.ndarray, f: np.ndarray, denoiser: DenoiserParams | EpsModel,
                  schedule: DiffusionSchedule, noise: np.ndarray) -> np.ndarray:
    """Run independent reverse chains.

    summary [B, S], f [B, K]; noise [B, T+1, K] where noise[:, 0] seeds
    y_T ~ N(f, I) and noise[:, t] drives step t. Returns y_0 per chain.
    """
    model = as_eps_model(denoiser)
    y = f + noise[:, 0]
    with ag.no_grad():
        for t in range(schedule.T, 0, -1):
            eps_hat = model(summary, y, f, np.full(y.shape[0], t))
            eps_hat = eps_hat.data if isinstance(eps_hat, Tensor) else np.asarray(eps_hat)
            y = reverse_step(y, t, eps_hat, f, schedule, z=noise[:, t] if t > 1 else None)
    return y


def chain_noise(seed: int, instance_id: int, sample: int, T: int, K: int) -> np.ndarray:
    """Noise for one chain, from a stream keyed by (seed, instance, sample)."""
    return np.random.default_rng([seed, STREAM_SAMPLE, instance_id, sample]).standard_normal((T + 1, K))


def sample_reconstruction(summary, f, denoiser, schedule: DiffusionSchedule, rng: np.random.Generator) -> np.ndarray:
    """One reconstructed prototype for a single instance."""
    f = np.atleast_2d(np.asarray(f, dtype=np.float64))
    noise = rng.standard_normal((1, schedule.T + 1, f.shape[1]))
    return sample_chains(np.atleast_2d(summary), f, denoiser, schedule, noise)[0]


def interval_width(samples: np.ndarray, lo: float = 2.5, hi: float = 97.5) -> np.ndarray:
    """Per-class gap between the hi and lo percentiles (linear interpolation)."""
    return np.percentile(samples, hi, axis=0) - np.percentile(samples, lo, axis=0)


def refine_class(samples: np.ndarray, rule: str = "mean") -> int:
    if rule == "mean":
        return int(np.argmax(samples.mean(axis=0)))
    votes = np.bincount(samples.argmax(axis=1), minlength=samples.shape[1])
    return int(np.argmax(votes))


@dataclass
class PredictionRecord:
    video_id: str
    t: int
    box: tuple[float, ...]
    acd_scores: np.ndarray
    refined_class: int
    reconstructions: np.ndarray = field(repr=False)
    iw: np.ndarray = field(repr=False)

    @property
    def mean_scores(self) -> np.ndarray:
        return self.reconstructions.mean(axis=0)

    def to_json(self) -> dict:
        return {
            "video_id": self.video_id,
            "t": self.t,
            "box": [float(v) for v in self.box],
            "refined_class": int(self.refined_class),
            "mean_scores": [float(v) for v in self.mean_scores],
            "iw": [float(v) for v in self.iw],
            "source": "ccd",
        }


def record_from_samples(samples: np.ndarray, rule: str = "mean", **meta) -> PredictionRecord:
    if samples.shape[0] < 2:
        raise ConfigurationError("need N >= 2 reconstructions for an interval width")
    return PredictionRecord(refined_class=refine_class(samples, rule), reconstructions=samples,
                            iw=interval_width(samples), **meta)


def predict_with_confidence(summaries: np.ndarray, priors: np.ndarray, denoiser, schedule: DiffusionSchedule,
                            N: int = 100, seed: int = 0, meta: Sequence[dict] | None = None,
                            acd_scores: np.ndarray | None = None, rule: str = "mean",
                            chunk: int = 32) -> list[PredictionRecord]:
    """N reconstructions per instance, refined class and per-class IW."""
    if N < 2:
        raise ConfigurationError(f"N must be >= 2, got {N}")
    summaries = np.atleast_2d(summaries)
    priors = np.atleast_2d(priors)
    B, K = priors.shape
    meta = meta or [{"video_id": "", "t": 0, "box": (0.0, 0.0, 1.0, 1.0)} for _ in range(B)]
    acd_scores = priors if acd_scores is None else acd_scores
    out = []
    for s in range(0, B, chunk):
        ids = range(s, min(s + chunk, B))
        noise = np.stack([chain_noise(seed, i, n, schedule.T, K) for i in ids for n in range(N)])
        rep = np.repeat(np.arange(s, s + len(ids)), N)
        y0 = sample_chains(summaries[rep], priors[rep], denoiser, schedule, noise)
        for j, i in enumerate(ids):
            m = meta[i]
            out.append(record_from_samples(
                y0[j * N : (j + 1) * N], rule,
                video_id=m["video_id"], t=m["t"], box=tuple(m["box"]), acd_scores=acd_scores[i],
            ))
    return out
