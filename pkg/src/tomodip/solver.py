"""Alternating network / volume updates on ``L = F + G``.

Each outer iteration ``k``

1. takes ``N`` Adam steps on the network weights with the volume frozen,
2. builds the quadratic surrogate of the prior at ``z^{k-1}``,
3. takes one explicit gradient step on ``F + S(. | z^{k-1})`` in ``z``.

``F(phi, z) = ||A f_phi(z) - y||^2 + lambda ||z - f_phi(z)||^2``, summed over
slices.  In ``aseqdip`` mode step 3 is replaced by the input refresh
``z <- f_phi(z)`` and the prior is switched off; ``aseqdip_tv`` is the
surrogate step with the denominator frozen at 1.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor
from .network import NetworkParams, NetworkSpec, forward, init_network
from .operators import SinogramSet
from .prior import (
    PriorConfig,
    SurrogateState,
    build_surrogate,
    eval_fractional,
    eval_surrogate,
    lipschitz_bound,
    surrogate_gradient_at_anchor,
)

__all__ = [
    "MODES",
    "SolverConfig",
    "SolverError",
    "IterationLog",
    "RunResult",
    "WarmStart",
    "warm_start",
    "loss_F",
    "step_phi",
    "step_z",
    "surrogate_objective",
    "run",
]

MODES = ("fastdip", "aseqdip", "aseqdip_tv")
Z_INITS = ("random", "fbp", "measurements")
LOG_COLUMNS = ("iter", "F", "G", "Ls_pre", "Ls_post", "dz_norm", "psnr", "seconds")


class SolverError(RuntimeError):
    """A step produced a non-finite value; ``log`` holds the rows written so far."""

    def __init__(self, message: str, log: "IterationLog | None" = None):
        super().__init__(message)
        self.log = log


@dataclass(frozen=True)
class SolverConfig:
    lambda_ae: float = 1.0
    prior: PriorConfig = field(default_factory=PriorConfig)
    alpha_lr: float = 1e-4
    beta_step: float = 0.1
    outer_iters: int = 800
    inner_steps: int = 2
    mode: str = "fastdip"
    z_init: str = "fbp"
    two_stage: bool = False
    stage1_iters: int = 0
    seed: int = 0
    beta_safeguard: str = "fixed"   # or "lipschitz"
    fixed_denominator: float | None = None
    slice_schedule: str = "all"     # or "cyclic": one slice per inner step
    stage1_schedule: str = "cyclic"
    early_stop: bool = False
    tol: float = 1e-6
    patience: int = 10
    power_iters: int = 2
    lipschitz_safety: float = 2.0
    deterministic: bool = True

    def __post_init__(self):
        if isinstance(self.prior, dict):
            object.__setattr__(self, "prior", PriorConfig(**self.prior))
        if self.lambda_ae < 0:
            raise ValueError("lambda_ae must be non-negative")
        # Zero learning rate, step size or inner count are allowed so that
        # the degenerate cases reduce to identities.
        if self.alpha_lr < 0 or self.beta_step < 0:
            raise ValueError("alpha_lr and beta_step must be non-negative")
        if self.outer_iters < 1:
            raise ValueError("outer_iters must be >= 1")
        if self.inner_steps < 0 or self.stage1_iters < 0:
            raise ValueError("inner_steps and stage1_iters must be non-negative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.z_init not in Z_INITS:
            raise ValueError(f"z_init must be one of {Z_INITS}, got {self.z_init!r}")
        if self.beta_safeguard not in ("fixed", "lipschitz"):
            raise ValueError("beta_safeguard must be 'fixed' or 'lipschitz'")
        if self.slice_schedule not in ("all", "cyclic") or self.stage1_schedule not in ("all", "cyclic"):
            raise ValueError("slice schedules must be 'all' or 'cyclic'")
        if self.fixed_denominator is not None and self.fixed_denominator <= 0:
            raise ValueError("fixed_denominator must be positive")
        if self.power_iters < 1 or self.lipschitz_safety <= 0:
            raise ValueError("power_iters must be >= 1 and lipschitz_safety positive")

    @property
    def effective_prior(self) -> PriorConfig:
        if self.mode == "aseqdip":
            return replace(self.prior, gamma=0.0)
        return self.prior

    @property
    def effective_denominator(self) -> float | None:
        return 1.0 if self.mode == "aseqdip_tv" else self.fixed_denominator

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        d = dict(d)
        if "prior" in d:
            d["prior"] = PriorConfig(**d["prior"])
        return cls(**d)


@dataclass
class IterationLog:
    rows: list[dict] = field(default_factory=list)
    warmup_F: list[float] = field(default_factory=list)

    def append(self, **row) -> None:
        missing = set(LOG_COLUMNS) - set(row)
        if missing:
            raise KeyError(f"log row is missing {sorted(missing)}")
        for key in LOG_COLUMNS:
            val = row[key]
            # psnr is NaN when no ground truth is supplied
            if key != "psnr" and not math.isfinite(val):
                raise SolverError(f"non-finite {key}={val} at iteration {row['iter']}", self)
        self.rows.append({k: row[k] for k in LOG_COLUMNS})

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: repr(float(v)) if k != "iter" else int(v) for k, v in r.items()})
        tmp.replace(path)

    @classmethod
    def from_csv(cls, path: str | Path) -> "IterationLog":
        log = cls()
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                log.rows.append({k: (int(r[k]) if k == "iter" else float(r[k])) for k in LOG_COLUMNS})
        return log


@dataclass
class RunResult:
    volume: np.ndarray
    params: NetworkParams
    log: IterationLog
    z_init: np.ndarray

    def __iter__(self):
        # allows ``z, params, log = run(...)``
        return iter((self.volume, self.params, self.log))


def _as_array(y) -> np.ndarray:
    return y.data if isinstance(y, SinogramSet) else np.asarray(y, dtype=np.float64)


def _network_output(params: NetworkParams, z: Tensor) -> Tensor:
    s, h, w = z.shape
    x = ad.reshape(z, (s, 1, h, w))
    return ad.reshape(forward(params, x), (s, h, w))


def _objective(params: NetworkParams, z: Tensor, y: np.ndarray, operator,
               lambda_ae: float) -> tuple[Tensor, Tensor]:
    if z.data.ndim != 3:
        raise ValueError(f"volume must be (S, H, W), got {z.shape}")
    expected = tuple(operator.measurement_shape(z.shape))
    if tuple(y.shape) != expected:
        raise ValueError(f"measurements have shape {y.shape}, operator expects {expected}")
    f = _network_output(params, z)
    af = ad.linear_map(f, operator.forward, operator.adjoint, "A")
    loss = ad.mse_sum(af, Tensor(y))
    if lambda_ae != 0:
        loss = loss + ad.scale(ad.mse_sum(z, f), lambda_ae)
    return loss, f


def loss_F(params: NetworkParams, z, y, operator, lambda_ae: float = 1.0) -> Tensor:
    """Data fidelity plus autoencoding penalty, summed over slices."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    return _objective(params, z, _as_array(y), operator, lambda_ae)[0]


def _F_value(params: NetworkParams, z: np.ndarray, y: np.ndarray, operator, lam: float
             ) -> tuple[float, np.ndarray]:
    loss, f = _objective(params.frozen(), Tensor(z), y, operator, lam)
    return loss.item(), f.data


def _grad_z(params: NetworkParams, z: np.ndarray, y: np.ndarray, operator, lam: float
            ) -> tuple[float, np.ndarray]:
    zt = Tensor(z, requires_grad=True)
    loss, _ = _objective(params.frozen(), zt, y, operator, lam)
    ad.backward(loss)
    return loss.item(), zt.grad


def step_phi(params: NetworkParams, z, y, operator, cfg: SolverConfig,
             adam_state: ad.AdamState | None = None, slice_offset: int = 0
             ) -> tuple[NetworkParams, ad.AdamState, float]:
    """``cfg.inner_steps`` Adam steps on the weights with ``z`` frozen.

    Returns the updated parameters, the optimizer state and the loss seen by
    the last inner step (the value its gradient was taken at).  With the
    cyclic schedule inner step ``n`` uses slice ``slice_offset + n``.
    """
    z = np.asarray(z, dtype=np.float64)
    y = _as_array(y)
    if adam_state is None:
        adam_state = ad.adam_init(params.arrays(), lr=cfg.alpha_lr)
    if cfg.inner_steps == 0 or cfg.alpha_lr == 0:
        loss, _ = _F_value(params, z, y, operator, cfg.lambda_ae)
        return params, adam_state, loss
    last = float("nan")
    for n in range(cfg.inner_steps):
        if cfg.slice_schedule == "cyclic":
            s = (slice_offset + n) % z.shape[0]
            z_n, y_n = z[s:s + 1], y[s:s + 1]
        else:
            z_n, y_n = z, y
        p = params.trainable()
        try:
            loss, _ = _objective(p, Tensor(z_n), y_n, operator, cfg.lambda_ae)
            ad.backward(loss)
        except NonFiniteError as exc:
            raise SolverError(f"network update produced a non-finite value at inner step {n}: {exc}") from exc
        last = loss.item()
        arrays, adam_state = ad.adam_step(p.arrays(), p.grads(), adam_state)
        params = NetworkParams.from_arrays(params.spec, arrays)
    return params, adam_state, last


def surrogate_objective(params: NetworkParams, z, y, operator, state: SurrogateState | None,
                        cfg: SolverConfig) -> float:
    """``L_s(z | anchor) = F(phi, z) + S(z | anchor)`` (``S = 0`` without a prior)."""
    z = np.asarray(z, dtype=np.float64)
    val, _ = _F_value(params, z, _as_array(y), operator, cfg.lambda_ae)
    if state is not None:
        val += eval_surrogate(z, state, cfg.effective_prior)
    return val


@dataclass
class _PowerState:
    vector: np.ndarray | None = None
    estimate: float = 0.0


def _hessian_norm_estimate(params, z, grad0, y, operator, cfg: SolverConfig,
                           power: _PowerState, rng: np.random.Generator) -> float:
    """Power iteration on the Hessian of ``F`` in ``z`` with forward-difference
    Hessian-vector products, warm-started from the previous iteration."""
    v = power.vector
    if v is None or v.shape != z.shape:
        v = rng.standard_normal(z.shape)
    v = v / np.linalg.norm(v)
    h = 1e-4 * max(1.0, float(np.linalg.norm(z)) / math.sqrt(z.size))
    est = 0.0
    for _ in range(cfg.power_iters):
        _, g1 = _grad_z(params, z + h * v, y, operator, cfg.lambda_ae)
        hv = (g1 - grad0) / h
        est = float(np.linalg.norm(hv))
        if est == 0.0 or not math.isfinite(est):
            break
        v = hv / est
    power.vector = v
    power.estimate = est
    return est


def step_z(params: NetworkParams, z_prev, y, operator, cfg: SolverConfig,
           state: SurrogateState | None = None, power: _PowerState | None = None,
           rng: np.random.Generator | None = None) -> tuple[np.ndarray, dict]:
    """One volume update.

    ``z_next = z_prev - beta * (grad_z F + v)`` with ``v`` the surrogate
    gradient at its anchor, or ``z_next = f_phi(z_prev)`` in ``aseqdip``
    mode.  With the Lipschitz safeguard ``beta = min(beta_step, 1 / L)``
    where ``L`` adds the surrogate Hessian bound to ``lipschitz_safety``
    times a power-iteration estimate for ``F``.
    """
    z_prev = np.asarray(z_prev, dtype=np.float64)
    y = _as_array(y)
    if cfg.mode == "aseqdip":
        f_val, f = _F_value(params, z_prev, y, operator, cfg.lambda_ae)
        return f.copy(), {"F_prev": f_val, "S_prev": 0.0, "beta": float("nan")}
    prior = cfg.effective_prior
    if state is None:
        state = build_surrogate(z_prev, prior, cfg.effective_denominator)
    v = surrogate_gradient_at_anchor(z_prev, state, prior)
    try:
        f_val, g = _grad_z(params, z_prev, y, operator, cfg.lambda_ae)
    except NonFiniteError as exc:
        raise SolverError(f"volume gradient is non-finite: {exc}") from exc
    beta = cfg.beta_step
    if cfg.beta_safeguard == "lipschitz" and beta > 0:
        power = power if power is not None else _PowerState()
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        l_f = _hessian_norm_estimate(params, z_prev, g, y, operator, cfg, power, rng)
        l_hat = cfg.lipschitz_safety * l_f + lipschitz_bound(state, prior)
        if l_hat > 0:
            beta = min(beta, 1.0 / l_hat)
    step = g + v
    if not np.all(np.isfinite(step)):
        raise SolverError("volume gradient is non-finite")
    z_next = z_prev - beta * step
    s_prev = eval_surrogate(z_prev, state, prior)
    return z_next, {"F_prev": f_val, "S_prev": s_prev, "beta": beta, "state": state}


def _initial_volume(y: np.ndarray, operator, cfg: SolverConfig) -> np.ndarray:
    shape = tuple(operator.volume_shape(y.shape))
    if cfg.z_init == "random":
        return np.random.default_rng(cfg.seed).uniform(0.0, 1.0, size=shape)
    if cfg.z_init == "fbp":
        return np.asarray(operator.pseudo_inverse(y), dtype=np.float64)
    if tuple(y.shape) != shape:
        raise ValueError("z_init='measurements' needs measurements shaped like the volume")
    return y.copy()


@dataclass
class WarmStart:
    """State after the network-only first stage; reusable across modes."""

    params: NetworkParams
    adam: ad.AdamState
    volume: np.ndarray
    z_init: np.ndarray
    warmup_F: list[float]
    slice_offset: int


def warm_start(y, operator, cfg: SolverConfig, network: NetworkSpec | None = None,
               params: NetworkParams | None = None) -> WarmStart:
    """Initial volume, fresh network and (with ``two_stage``) the first stage.

    The first stage fits the weights to ``z_init`` with the volume frozen and
    then replaces the volume by the network output.  It does not depend on
    ``mode`` or the prior.
    """
    y = _as_array(y)
    if params is None:
        params = init_network(network if network is not None else NetworkSpec(seed=cfg.seed))
    z = _initial_volume(y, operator, cfg)
    z0 = z.copy()
    adam = ad.adam_init(params.arrays(), lr=cfg.alpha_lr)
    warm_F: list[float] = []
    offset = 0
    if cfg.two_stage and cfg.stage1_iters > 0:
        cfg1 = replace(cfg, slice_schedule=cfg.stage1_schedule)
        for _ in range(cfg.stage1_iters):
            params, adam, f_val = step_phi(params, z, y, operator, cfg1, adam, offset)
            offset += cfg.inner_steps
            warm_F.append(f_val)
        z = _F_value(params, z, y, operator, cfg.lambda_ae)[1].copy()
    return WarmStart(params, adam, z, z0, warm_F, offset)


def _psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((a - b) ** 2))
    return 99.0 if mse == 0 else min(99.0, 10.0 * math.log10(1.0 / mse))


def run(y, operator, cfg: SolverConfig, ground_truth: np.ndarray | None = None,
        network: NetworkSpec | None = None, params: NetworkParams | None = None,
        callback: Callable[[int, np.ndarray, np.ndarray, NetworkParams, dict], None] | None = None,
        warm: WarmStart | None = None) -> RunResult:
    """Run the outer loop for ``cfg.outer_iters`` iterations.

    ``warm`` reuses a precomputed :func:`warm_start` (it is not modified).
    ``callback(k, z_prev, z_next, params, info)`` is called after every
    outer iteration (``params`` are the weights used for the z-step).
    """
    y = _as_array(y)
    log = IterationLog()
    try:
        if warm is None:
            warm = warm_start(y, operator, cfg, network, params)
    except (SolverError, NonFiniteError) as exc:
        raise SolverError(str(exc), log) from exc
    params, adam, z, offset = warm.params, warm.adam, warm.volume.copy(), warm.slice_offset
    log.warmup_F = list(warm.warmup_F)
    gt = None if ground_truth is None else np.asarray(ground_truth, dtype=np.float64)
    if gt is not None and gt.shape != z.shape:
        raise ValueError(f"ground truth shape {gt.shape} does not match volume {z.shape}")
    rng = np.random.default_rng(cfg.seed + 1)
    power = _PowerState()
    prior = cfg.effective_prior
    try:
        quiet = 0
        for k in range(1, cfg.outer_iters + 1):
            t0 = time.perf_counter()
            params, adam, _ = step_phi(params, z, y, operator, cfg, adam, offset)
            offset += cfg.inner_steps
            z_next, info = step_z(params, z, y, operator, cfg, power=power, rng=rng)
            state = info.get("state")
            f_post, _ = _F_value(params, z_next, y, operator, cfg.lambda_ae)
            s_post = eval_surrogate(z_next, state, prior) if state is not None else 0.0
            dz = float(np.linalg.norm(z_next - z))
            log.append(
                iter=k, F=f_post, G=eval_fractional(z_next, cfg.prior),
                Ls_pre=info["F_prev"] + info["S_prev"], Ls_post=f_post + s_post,
                dz_norm=dz, psnr=_psnr(z_next, gt) if gt is not None else float("nan"),
                seconds=time.perf_counter() - t0,
            )
            if callback is not None:
                callback(k, z, z_next, params, info)
            rel = dz / max(float(np.linalg.norm(z)), 1e-300)
            z = z_next
            quiet = quiet + 1 if rel < cfg.tol else 0
            if cfg.early_stop and quiet >= cfg.patience:
                break
    except (SolverError, NonFiniteError) as exc:
        raise SolverError(str(exc), log) from exc
    return RunResult(z, params, log, warm.z_init)
