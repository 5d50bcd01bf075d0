"""Stochastic natural-gradient ascent on the global variational parameters.

For conjugate exponential-family factors the natural gradient of the bound
with respect to one factor's natural parameters is simply (CAVI target) -
(current), so no Fisher matrix is ever inverted in the hot path; the Fisher
blocks here exist to let tests certify that identity. Each iteration draws
a minibatch, refreshes its local factors, and moves every factor group
along its natural gradient with an adaptively chosen step in (0, 1].

Factor groups are visited in a fixed order within an iteration, each
target computed after the previous groups have moved (the minibatch
reductions stay frozen). With a full batch and unit steps the loop is
therefore exact coordinate ascent, and the bound is monotone over sweeps.
The standalone `estimate_gradient` evaluates all targets simultaneously at
the input state; it shares its fixed points with the sequential loop.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import families as fam
from .model import Architecture, Dataset, DmfaParams, validate_architecture
from .variational import (
    KINDS,
    KIND_FAMILY,
    KIND_PARAMS,
    GlobalFactorSet,
    LayerGlobals,
    LocalFactorSet,
    PriorHyperparams,
    elbo,
    init_variational,
    layer_reductions,
    local_step,
    point_estimates,
    targets_for_kind,
)

__all__ = [
    "FitConfig",
    "FitTrace",
    "FitResult",
    "FitDivergedError",
    "NaturalGradient",
    "batch_size",
    "draw_minibatch",
    "estimate_gradient",
    "fisher_block",
    "step_from_moments",
    "adaptive_step",
    "StepSizeEstimator",
    "elbo_gradient_unconstrained",
    "fit",
    "save_checkpoint",
    "load_checkpoint",
    "write_trace_csv",
    "read_trace_csv",
]

logger = logging.getLogger(__name__)

CHECKPOINT_SCHEMA_VERSION = 1
ADAPTIVE_WINDOW = 32
INIT_SEED_OFFSET = 1
BATCH_SEED_OFFSET = 2


class FitDivergedError(RuntimeError):
    """Raised when the recorded bound goes non-finite; carries the trace."""

    def __init__(self, message: str, trace: "FitTrace"):
        super().__init__(message)
        self.trace = trace


@dataclass
class FitConfig:
    batch_fraction: float = 0.05
    batch_min: int = 1
    batch_max: int = 1024
    max_iterations: int = 1000
    seed: int = 0
    elbo_record_stride: int = 1
    convergence_window: int = 0     # 0 disables early stopping
    convergence_tol: float = 0.0
    step_rule: str = "adaptive"     # adaptive | decay | constant
    decay_a0: float = 1.0
    decay_tau: float = 32.0
    constant_step: float = 1.0

    def validate(self) -> None:
        if not 0.0 < self.batch_fraction <= 1.0:
            raise ValueError("batch_fraction must be in (0, 1]")
        if self.batch_min < 1 or self.batch_max < self.batch_min:
            raise ValueError("need 1 <= batch_min <= batch_max")
        if self.step_rule not in ("adaptive", "decay", "constant"):
            raise ValueError(f"unknown step_rule {self.step_rule!r}")
        if self.max_iterations < 0 or self.elbo_record_stride < 1:
            raise ValueError("bad iteration/stride settings")


@dataclass
class FitTrace:
    iterations: list[int] = field(default_factory=list)
    elbo: list[float] = field(default_factory=list)
    step: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def append(self, iteration: int, elbo_value: float, step: float,
               seconds: float) -> None:
        self.iterations.append(int(iteration))
        self.elbo.append(float(elbo_value))
        self.step.append(float(step))
        self.seconds.append(float(seconds))

    def elbo_at(self, iteration: int) -> float:
        return self.elbo[self.iterations.index(iteration)]


@dataclass
class FitResult:
    params: DmfaParams
    lam_g: GlobalFactorSet
    lam_l: LocalFactorSet
    trace: FitTrace
    arch: Architecture
    prior: PriorHyperparams
    config: FitConfig
    stop_reason: str
    final_elbo: float


@dataclass
class NaturalGradient:
    """Per-factor-group increments in natural-parameter coordinates, keyed
    by (kind, layer); zero at a full-batch CAVI fixed point."""

    groups: dict[tuple[str, int], tuple[np.ndarray, ...]]

    def max_abs(self) -> float:
        return max(float(np.max(np.abs(a))) for g in self.groups.values()
                   for a in g)


# --------------------------------------------------------------------------
# minibatches
# --------------------------------------------------------------------------

def batch_size(n: int, config: FitConfig) -> int:
    """clamp(ceil(batch_fraction * n), batch_min, batch_max), never above n."""
    raw = int(np.ceil(config.batch_fraction * n))
    return min(max(raw, config.batch_min), config.batch_max, n)


def draw_minibatch(n: int, config: FitConfig, rng: np.random.Generator) -> np.ndarray:
    """Uniform subset without replacement, size per the clamp rule."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return np.sort(rng.choice(n, size=batch_size(n, config), replace=False))


# --------------------------------------------------------------------------
# natural-parameter plumbing
# --------------------------------------------------------------------------

_TO_NATURAL = {
    "gaussian": fam.gaussian_to_natural,
    "invgamma": fam.invgamma_to_natural,
    "gamma": fam.gamma_to_natural,
    "dirichlet": lambda alpha: (np.asarray(alpha, dtype=float),),
}

_FROM_NATURAL = {
    "gaussian": fam.gaussian_from_natural,
    "invgamma": fam.invgamma_from_natural,
    "gamma": fam.gamma_from_natural,
    "dirichlet": lambda alpha: (alpha,),
}


def _kind_params(lg: LayerGlobals, kind: str) -> tuple[np.ndarray, ...]:
    return tuple(getattr(lg, attr) for attr in KIND_PARAMS[kind])


def _kind_to_natural(lg: LayerGlobals, kind: str) -> tuple[np.ndarray, ...]:
    nat = _TO_NATURAL[KIND_FAMILY[kind]](*_kind_params(lg, kind))
    return nat if isinstance(nat, tuple) else (nat,)


def _params_to_natural(kind: str, arrs: tuple[np.ndarray, ...]) -> tuple[np.ndarray, ...]:
    nat = _TO_NATURAL[KIND_FAMILY[kind]](*arrs)
    return nat if isinstance(nat, tuple) else (nat,)


def _clamp_natural(kind: str, nat: list[np.ndarray], group: tuple[str, int]) -> list[np.ndarray]:
    """Keep natural parameters inside the family domain. Steps in (0, 1]
    preserve the domain exactly, so clamping only fires on floating-point
    pathologies; fires are logged."""
    family = KIND_FAMILY[kind]
    fired = False
    if family == "gaussian":
        bad = nat[1] >= -1e-300
        if np.any(bad):
            nat[1] = np.where(bad, -1e-300, nat[1])
            fired = True
    elif family == "invgamma":
        bad1 = nat[0] > -1.0 - 1e-12
        bad2 = nat[1] >= -1e-300
        if np.any(bad1) or np.any(bad2):
            nat[0] = np.where(bad1, -1.0 - 1e-12, nat[0])
            nat[1] = np.where(bad2, -1e-300, nat[1])
            fired = True
    elif family == "gamma":
        bad1 = nat[0] < -1.0 + 1e-12
        bad2 = nat[1] >= -1e-300
        if np.any(bad1) or np.any(bad2):
            nat[0] = np.where(bad1, -1.0 + 1e-12, nat[0])
            nat[1] = np.where(bad2, -1e-300, nat[1])
            fired = True
    else:  # dirichlet
        bad = nat[0] < 1e-12
        if np.any(bad):
            nat[0] = np.maximum(nat[0], 1e-12)
            fired = True
    if fired:
        logger.warning("natural-parameter clamp triggered for %s/l%d", *group)
    return nat


def _set_kind_from_natural(lg: LayerGlobals, kind: str,
                           nat: tuple[np.ndarray, ...]) -> None:
    arrs = _FROM_NATURAL[KIND_FAMILY[kind]](*nat)
    for attr, arr in zip(KIND_PARAMS[kind], arrs):
        setattr(lg, attr, np.asarray(arr, dtype=float))


def estimate_gradient(data: Dataset, arch: Architecture,
                      prior: PriorHyperparams, lam_g: GlobalFactorSet,
                      lam_l: LocalFactorSet,
                      rows: np.ndarray | None = None) -> NaturalGradient:
    """Natural gradient of the minibatch-scaled bound at the input state:
    per factor, (scaled CAVI-target natural parameters) - (current ones).

    Local factors for ``rows`` must already be refreshed against ``lam_g``
    (one `local_step` pass); the full index set gives the exact gradient.
    """
    scale = 1.0 if rows is None else data.n / len(rows)
    groups: dict[tuple[str, int], tuple[np.ndarray, ...]] = {}
    for l in range(arch.L):
        stats = layer_reductions(data, lam_l, l, rows, scale)
        for kind in KINDS:
            target = targets_for_kind(kind, l, arch, prior, lam_g, stats)
            t_nat = _params_to_natural(kind, target)
            c_nat = _kind_to_natural(lam_g.layers[l], kind)
            groups[(kind, l)] = tuple(t - c for t, c in zip(t_nat, c_nat))
    return NaturalGradient(groups=groups)


# --------------------------------------------------------------------------
# Fisher information
# --------------------------------------------------------------------------

def fisher_block(lam_g: GlobalFactorSet, factor_id: tuple) -> np.ndarray:
    """Exact Fisher matrix of one factor in its stored parameterization:
    (mean, variance) for Gaussians, (shape, scale)/(shape, rate) for the
    inverse-gamma/gamma factors, the concentration vector for Dirichlets.
    """
    kind, l, *idx = factor_id
    family = KIND_FAMILY[kind]
    arrs = [getattr(lam_g.layers[l], attr) for attr in KIND_PARAMS[kind]]
    if family == "dirichlet":
        alpha = arrs[0]
        if np.any(alpha <= 0):
            raise ValueError(f"degenerate Dirichlet factor {factor_id}: {alpha}")
        return fam.dirichlet_fisher_stored(alpha)
    p1, p2 = (a[tuple(idx)] for a in arrs)
    if family == "gaussian":
        if p2 <= 0:
            raise ValueError(f"degenerate Gaussian factor {factor_id}: var={p2}")
        return fam.gaussian_fisher_stored(p1, p2)
    if p1 <= 0 or p2 <= 0:
        raise ValueError(f"degenerate {family} factor {factor_id}: ({p1}, {p2})")
    if family == "invgamma":
        return fam.invgamma_fisher_stored(p1, p2)
    return fam.gamma_fisher_stored(p1, p2)


# --------------------------------------------------------------------------
# step sizes
# --------------------------------------------------------------------------

def step_from_moments(mean: np.ndarray, second: np.ndarray) -> float:
    """s = g^T g / tr(V + g g^T) given the gradient-mean estimate and the
    elementwise second-moment estimate; 1.0 in the noiseless limit."""
    num = float(np.sum(np.square(mean)))
    den = float(np.sum(second))
    if den <= 0.0:
        return 1.0
    return float(min(max(num / den, np.finfo(float).tiny), 1.0))


class StepSizeEstimator:
    """Exponentially weighted gradient moments (window tau=32) per factor
    group; the first observation initializes the moments exactly."""

    def __init__(self, window: int = ADAPTIVE_WINDOW):
        self.weight = 1.0 / window
        self.mean: dict[tuple, np.ndarray] = {}
        self.second: dict[tuple, np.ndarray] = {}

    def update(self, group: tuple, grad: np.ndarray) -> float:
        grad = np.ravel(grad)
        if group not in self.mean:
            self.mean[group] = grad.copy()
            self.second[group] = grad**2
        else:
            w = self.weight
            self.mean[group] = (1.0 - w) * self.mean[group] + w * grad
            self.second[group] = (1.0 - w) * self.second[group] + w * grad**2
        return step_from_moments(self.mean[group], self.second[group])


def adaptive_step(gradient_history, t: int | None = None) -> float:
    """Step size from a gradient history (most recent last): exponentially
    weighted moments with window 32, then s = g^T g / tr(V + g g^T)."""
    history = [np.ravel(np.asarray(g, dtype=float)) for g in gradient_history]
    if t is not None:
        history = history[:t]
    if not history:
        raise ValueError("need at least one gradient")
    est = StepSizeEstimator()
    for g in history:
        s = est.update("g", g)
    return s


def decay_step(t: int, a0: float, tau: float) -> float:
    """Robbins-Monro fallback schedule a_t = a0 * (1 + t/tau)^(-3/4)."""
    return a0 * (1.0 + t / tau) ** -0.75


# --------------------------------------------------------------------------
# analytic ELBO gradient (unconstrained coordinates)
# --------------------------------------------------------------------------

def elbo_gradient_unconstrained(data: Dataset, arch: Architecture,
                                prior: PriorHyperparams,
                                lam_g: GlobalFactorSet, lam_l: LocalFactorSet,
                                rows: np.ndarray | None = None
                                ) -> dict[tuple[str, int], np.ndarray]:
    """Gradient of the (full or minibatch-estimated) bound with respect to
    every global variational parameter in unconstrained coordinates:
    (mean, log variance), (log shape, log scale|rate), log concentration.

    Uses the conjugate identity grad_eta L = I(eta) (eta_target - eta), then
    transforms by the chain rule; locals are held fixed.
    """
    grad = estimate_gradient(data, arch, prior, lam_g, lam_l, rows)
    out: dict[tuple[str, int], np.ndarray] = {}
    for (kind, l), delta in grad.groups.items():
        lg = lam_g.layers[l]
        family = KIND_FAMILY[kind]
        arrs = _kind_params(lg, kind)
        if family == "dirichlet":
            alpha = arrs[0]
            g_eta = fam.dirichlet_fisher_natural(alpha) @ delta[0]
            out[(kind, l)] = alpha * g_eta
            continue
        if family == "gaussian":
            fisher = fam.gaussian_fisher_natural(*arrs)
            jac = fam.gaussian_jacobian_unconstrained(*arrs)
        elif family == "invgamma":
            fisher = fam.invgamma_fisher_natural(*arrs)
            jac = fam.invgamma_jacobian_unconstrained(*arrs)
        else:
            fisher = fam.gamma_fisher_natural(*arrs)
            jac = fam.gamma_jacobian_unconstrained(*arrs)
        d_eta = np.stack(delta, axis=-1)
        g_eta = np.einsum("...ij,...j->...i", fisher, d_eta)
        out[(kind, l)] = np.einsum("...ij,...i->...j", jac, g_eta)
    return out


# --------------------------------------------------------------------------
# the fit loop
# --------------------------------------------------------------------------

def _sweep(data: Dataset, arch: Architecture, prior: PriorHyperparams,
           lam_g: GlobalFactorSet, lam_l: LocalFactorSet,
           rows: np.ndarray | None, scale: float,
           step_for_group) -> float:
    """One ordered pass over all factor groups, moving each along its
    natural gradient; mutates ``lam_g`` and returns the mean step taken."""
    steps = []
    for l in range(arch.L):
        stats = layer_reductions(data, lam_l, l, rows, scale)
        lg = lam_g.layers[l]
        for kind in KINDS:
            target = targets_for_kind(kind, l, arch, prior, lam_g, stats)
            t_nat = _params_to_natural(kind, target)
            c_nat = _kind_to_natural(lg, kind)
            delta = tuple(t - c for t, c in zip(t_nat, c_nat))
            a = step_for_group((kind, l), delta)
            new_nat = [c + a * d for c, d in zip(c_nat, delta)]
            new_nat = _clamp_natural(kind, new_nat, (kind, l))
            _set_kind_from_natural(lg, kind, tuple(new_nat))
            steps.append(a)
    return float(np.mean(steps))


def fit(data: Dataset, arch: Architecture, prior: PriorHyperparams,
        config: FitConfig,
        initial: tuple[GlobalFactorSet, LocalFactorSet] | None = None) -> FitResult:
    """Nested local/global loop: draw a minibatch, refresh its local
    factors, move every global factor group along its natural gradient,
    and record the minibatch bound at the new iterate.
    """
    config.validate()
    if data.n < 1:
        raise ValueError("cannot fit an empty dataset")
    report = validate_architecture(arch)
    if not report:
        raise ValueError(f"invalid architecture: {report.message}")

    if initial is None:
        lam_g, lam_l = init_variational(
            arch, data, prior, seed=config.seed + INIT_SEED_OFFSET)
    else:
        lam_g, lam_l = initial[0].copy(), initial[1].copy()
    rng = np.random.default_rng(config.seed + BATCH_SEED_OFFSET)
    est = StepSizeEstimator()
    trace = FitTrace()
    start = time.perf_counter()
    stop_reason = "max_iterations"

    def step_for_group(group, delta):
        if config.step_rule == "constant":
            return config.constant_step
        if config.step_rule == "decay":
            return decay_step(t, config.decay_a0, config.decay_tau)
        return est.update(group, np.concatenate([np.ravel(d) for d in delta]))

    for t in range(1, config.max_iterations + 1):
        rows = draw_minibatch(data.n, config, rng)
        lam_l.assign_rows(rows, local_step(data, arch, lam_g, rows))
        scale = data.n / len(rows)
        mean_step = _sweep(data, arch, prior, lam_g, lam_l, rows, scale,
                           step_for_group)
        if t % config.elbo_record_stride == 0:
            value = elbo(data, arch, prior, lam_g, lam_l, subset=rows).total
            trace.append(t, value, mean_step, time.perf_counter() - start)
            if not np.isfinite(value):
                raise FitDivergedError(
                    f"non-finite ELBO estimate at iteration {t}", trace)
            w = config.convergence_window
            if w > 0 and len(trace.elbo) >= 2 * w:
                prev = float(np.mean(trace.elbo[-2 * w:-w]))
                cur = float(np.mean(trace.elbo[-w:]))
                if abs(cur - prev) <= config.convergence_tol * (1.0 + abs(prev)):
                    stop_reason = f"converged at iteration {t}"
                    break

    final = trace.elbo[-1] if trace.elbo else float("nan")
    return FitResult(params=point_estimates(lam_g, arch), lam_g=lam_g,
                     lam_l=lam_l, trace=trace, arch=arch, prior=prior,
                     config=config, stop_reason=stop_reason, final_elbo=final)


# --------------------------------------------------------------------------
# artifacts: checkpoint JSON and trace CSV
# --------------------------------------------------------------------------

def save_checkpoint(path, arch: Architecture, prior: PriorHyperparams,
                    config: FitConfig, lam_g: GlobalFactorSet,
                    rng_state: dict | None = None, iteration: int = 0) -> None:
    doc = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "architecture": {"L": arch.L, "D": list(arch.D), "K": list(arch.K)},
        "prior": {
            "G": prior.G.tolist(),
            "nu": prior.nu.tolist(),
            "A": prior.A.tolist(),
            "rho": [r.tolist() for r in prior.rho],
        },
        "config": asdict(config),
        "iteration": int(iteration),
        "global_factors": [
            {attr: getattr(lg, attr).tolist()
             for attrs in KIND_PARAMS.values() for attr in attrs}
            for lg in lam_g.layers
        ],
        "rng_state": rng_state,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    version = doc.get("schema_version")
    if version != CHECKPOINT_SCHEMA_VERSION:
        raise ValueError(f"unsupported checkpoint schema version {version!r}")
    arch = Architecture(L=doc["architecture"]["L"],
                        D=tuple(doc["architecture"]["D"]),
                        K=tuple(doc["architecture"]["K"]))
    prior = PriorHyperparams(
        G=np.asarray(doc["prior"]["G"], dtype=float),
        nu=np.asarray(doc["prior"]["nu"], dtype=float),
        A=np.asarray(doc["prior"]["A"], dtype=float),
        rho=[np.asarray(r, dtype=float) for r in doc["prior"]["rho"]],
    )
    config = FitConfig(**doc["config"])
    layers = [LayerGlobals(**{attr: np.asarray(vals, dtype=float)
                              for attr, vals in layer.items()})
              for layer in doc["global_factors"]]
    lam_g = GlobalFactorSet(layers=layers)
    lam_g.validate_domains()
    return arch, prior, config, lam_g, doc.get("rng_state"), doc["iteration"]


def write_trace_csv(path, trace: FitTrace) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("iter,elbo,step,seconds\n")
        for i, e, s, sec in zip(trace.iterations, trace.elbo, trace.step,
                                trace.seconds):
            fh.write(f"{i},{e!r},{s!r},{sec:.6f}\n")


def read_trace_csv(path) -> FitTrace:
    trace = FitTrace()
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "iter,elbo,step,seconds":
            raise ValueError(f"unexpected trace header {header!r}")
        for line in fh:
            i, e, s, sec = line.strip().split(",")
            trace.append(int(i), float(e), float(s), float(sec))
    return trace
