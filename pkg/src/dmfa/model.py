"""Layered mixture-of-factor-analyzers model: architecture, generative
sampling, the collapsed Gaussian-mixture view, densities, and clustering.

The generative process stacks factor models. Observations live at level 0;
at each layer l = 1..L a component k is drawn with probability p_k and

    z^(l-1) = mu_k^(l) + B_k^(l) z^(l) + eps,    eps ~ N(0, diag(delta_k^(l)))

with z^(L) ~ N(0, I). Choosing one component per layer ("a path") makes the
marginal of the data an ordinary Gaussian mixture with prod_l K^(l)
components, which is what `collapse_to_gmm` materializes.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.special

__all__ = [
    "Architecture",
    "ValidityReport",
    "DmfaParams",
    "GmmComponent",
    "Dataset",
    "LatentRecord",
    "validate_architecture",
    "sample_dataset",
    "collapse_to_gmm",
    "log_density",
    "cluster_scores",
    "log_cluster_scores",
    "assign_clusters",
    "arch_to_string",
    "parse_arch_string",
]


@dataclass(frozen=True)
class Architecture:
    """Layer count ``L``, level dimensions ``D`` (length L+1, D[0] is the
    observed dimension), and per-layer component counts ``K`` (length L)."""

    L: int
    D: tuple[int, ...]
    K: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "D", tuple(int(d) for d in self.D))
        object.__setattr__(self, "K", tuple(int(k) for k in self.K))
        if self.L < 1:
            raise ValueError(f"layer count must be >= 1, got {self.L}")
        if len(self.D) != self.L + 1:
            raise ValueError(
                f"D must have length L+1={self.L + 1}, got {len(self.D)}")
        if len(self.K) != self.L:
            raise ValueError(
                f"K must have length L={self.L}, got {len(self.K)}")

    def kappa(self, layer: int) -> int:
        """Loading-entry count per component at 1-based layer ``layer``."""
        return self.D[layer - 1] * self.D[layer]

    @property
    def n_paths(self) -> int:
        return int(np.prod(self.K))

    def n_free_parameters(self) -> int:
        """Free parameters of the point model (weights, means, loadings,
        noise); used as the tie-break key in model selection."""
        total = 0
        for l in range(1, self.L + 1):
            din, dout, k = self.D[l - 1], self.D[l], self.K[l - 1]
            total += k * (2 * din + din * dout) + (k - 1)
        return total


@dataclass(frozen=True)
class ValidityReport:
    valid: bool
    message: str = "ok"

    def __bool__(self) -> bool:
        return self.valid


def validate_architecture(arch: Architecture, enforce_ar: bool = False) -> ValidityReport:
    """Check dimension/component positivity and, optionally, the
    dimension-halving rule D[l+1] <= (D[l]-1)/2 for l = 0..L-1."""
    for l, d in enumerate(arch.D):
        if d < 1:
            return ValidityReport(False, f"D[{l}]={d} must be >= 1")
    for l, k in enumerate(arch.K):
        if k < 1:
            return ValidityReport(False, f"K[{l + 1}]={k} must be >= 1")
    if enforce_ar:
        for l in range(arch.L):
            if 2 * arch.D[l + 1] > arch.D[l] - 1:
                return ValidityReport(
                    False,
                    f"dimension rule violated at level {l}: "
                    f"D[{l + 1}]={arch.D[l + 1]} > (D[{l}]-1)/2={(arch.D[l] - 1) / 2}")
    return ValidityReport(True)


@dataclass
class DmfaParams:
    """Point parameters per layer: weights ``p[l]`` (K_l,), means ``mu[l]``
    (K_l, D[l-1]), loadings ``B[l]`` (K_l, D[l-1], D[l]), and diagonal noise
    ``delta[l]`` (K_l, D[l-1]); lists are indexed by 0-based layer."""

    p: list[np.ndarray]
    mu: list[np.ndarray]
    B: list[np.ndarray]
    delta: list[np.ndarray]

    def validate(self, arch: Architecture) -> None:
        if not (len(self.p) == len(self.mu) == len(self.B) == len(self.delta) == arch.L):
            raise ValueError("parameter lists must have one entry per layer")
        for l in range(arch.L):
            k, din, dout = arch.K[l], arch.D[l], arch.D[l + 1]
            if self.p[l].shape != (k,):
                raise ValueError(f"p[{l}] has shape {self.p[l].shape}, want ({k},)")
            if self.mu[l].shape != (k, din):
                raise ValueError(f"mu[{l}] has shape {self.mu[l].shape}, want ({k}, {din})")
            if self.B[l].shape != (k, din, dout):
                raise ValueError(
                    f"B[{l}] has shape {self.B[l].shape}, want ({k}, {din}, {dout})")
            if self.delta[l].shape != (k, din):
                raise ValueError(
                    f"delta[{l}] has shape {self.delta[l].shape}, want ({k}, {din})")
            if np.any(self.p[l] < 0) or abs(self.p[l].sum() - 1.0) > 1e-12:
                raise ValueError(f"p[{l}] is not a probability simplex")
            if np.any(self.delta[l] <= 0):
                raise ValueError(f"delta[{l}] has nonpositive entries")


@dataclass(frozen=True)
class GmmComponent:
    """One collapsed mixture component: its path, weight, mean and full
    covariance at the observed level."""

    path: tuple[int, ...]
    weight: float
    mean: np.ndarray
    cov: np.ndarray


@dataclass
class Dataset:
    y: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.y = np.atleast_2d(np.asarray(self.y, dtype=float))
        if not np.all(np.isfinite(self.y)):
            raise ValueError("dataset contains non-finite entries")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=int)
            if self.labels.shape != (self.y.shape[0],):
                raise ValueError("labels length must match row count")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def d(self) -> int:
        return self.y.shape[1]


@dataclass
class LatentRecord:
    """Latents drawn alongside a sampled dataset: per layer the factor
    values ``z[l]`` (n, D[l+1]) and 0-based component picks ``gamma[l]``."""

    z: list[np.ndarray] = field(default_factory=list)
    gamma: list[np.ndarray] = field(default_factory=list)


def sample_dataset(arch: Architecture, params: DmfaParams, n: int,
                   seed: int | np.random.Generator = 0) -> tuple[Dataset, LatentRecord]:
    """Draw ``n`` observations from the generative process; deterministic
    given the seed. Returns the dataset and all latent draws."""
    params.validate(arch)
    if n < 0:
        raise ValueError("n must be >= 0")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    gammas = [rng.choice(arch.K[l], size=n, p=params.p[l]) for l in range(arch.L)]
    z = rng.standard_normal((n, arch.D[arch.L]))
    zs: list[np.ndarray] = [None] * arch.L  # zs[l] holds z^(l+1) in paper terms
    zs[arch.L - 1] = z
    current = z
    for l in range(arch.L - 1, -1, -1):
        k = gammas[l]
        eps = rng.standard_normal((n, arch.D[l])) * np.sqrt(params.delta[l][k])
        current = params.mu[l][k] + np.einsum(
            "nij,nj->ni", params.B[l][k], current) + eps
        if l > 0:
            zs[l - 1] = current
    record = LatentRecord(z=zs, gamma=gammas)
    return Dataset(y=current.reshape(n, arch.D[0])), record


def collapse_to_gmm(arch: Architecture, params: DmfaParams) -> list[GmmComponent]:
    """Enumerate all paths and return the equivalent Gaussian mixture.

    weight(k) = prod_l p_{k_l}; mean and covariance accumulate the chained
    loadings. The covariance includes the final (prod B)(prod B)^T term
    required by the standard-normal top-layer factors.
    """
    params.validate(arch)
    d = arch.D[0]
    components: list[GmmComponent] = []

    def descend(l: int, path: tuple[int, ...], weight: float,
                mean: np.ndarray, cov: np.ndarray, chain: np.ndarray) -> None:
        # chain = B_{k_1} ... B_{k_l}, mapping layer-l factors to data space
        if l == arch.L:
            cov = cov + chain @ chain.T
            components.append(GmmComponent(
                path=path, weight=weight,
                mean=mean.copy(), cov=0.5 * (cov + cov.T)))
            return
        for k in range(arch.K[l]):
            w = weight * params.p[l][k]
            if l == 0:
                m = params.mu[0][k].copy()
                c = np.diag(params.delta[0][k]).astype(float)
                nchain = params.B[0][k]
            else:
                m = mean + chain @ params.mu[l][k]
                c = cov + (chain * params.delta[l][k]) @ chain.T
                nchain = chain @ params.B[l][k]
            descend(l + 1, path + (k,), w, m, c, nchain)

    descend(0, (), 1.0, np.zeros(d), np.zeros((d, d)), np.eye(d))
    return components


def _component_log_pdf(y: np.ndarray, comp: GmmComponent) -> np.ndarray:
    """Log normal density of rows of ``y`` under one component.

    Uses a Cholesky factorization; a singular covariance raises rather than
    being silently regularized so degenerate parameters surface in tests.
    """
    d = comp.mean.size
    try:
        chol = scipy.linalg.cholesky(comp.cov, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            f"covariance for path {comp.path} is not positive definite: {exc}"
        ) from exc
    diff = np.atleast_2d(y) - comp.mean
    sol = scipy.linalg.solve_triangular(chol, diff.T, lower=True)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    return -0.5 * (d * np.log(2.0 * np.pi) + logdet + (sol**2).sum(axis=0))


def _path_log_weights(y: np.ndarray, components: list[GmmComponent]) -> np.ndarray:
    """(n, n_paths) array of log weight + log density per path."""
    y = np.atleast_2d(y)
    out = np.empty((y.shape[0], len(components)))
    for j, comp in enumerate(components):
        if comp.weight == 0.0:
            out[:, j] = -np.inf
        else:
            out[:, j] = np.log(comp.weight) + _component_log_pdf(y, comp)
    return out


def log_density(y, arch: Architecture, params: DmfaParams):
    """Log mixture density of point(s) ``y``, log-sum-exp stabilized.

    Accepts a single point (1-D) or a matrix of rows; returns a scalar or a
    vector accordingly.
    """
    y_arr = np.asarray(y, dtype=float)
    single = y_arr.ndim == 1
    lw = _path_log_weights(y_arr, collapse_to_gmm(arch, params))
    out = scipy.special.logsumexp(lw, axis=1)
    return float(out[0]) if single else out


def log_cluster_scores(y, arch: Architecture, params: DmfaParams) -> np.ndarray:
    """Per-row log of p_k^(1) * p(y | first-layer component k), the
    sub-mixture over all paths sharing first-layer component k."""
    y_arr = np.atleast_2d(np.asarray(y, dtype=float))
    components = collapse_to_gmm(arch, params)
    lw = _path_log_weights(y_arr, components)
    k1 = np.array([comp.path[0] for comp in components])
    out = np.full((y_arr.shape[0], arch.K[0]), -np.inf)
    for k in range(arch.K[0]):
        cols = np.flatnonzero(k1 == k)
        out[:, k] = scipy.special.logsumexp(lw[:, cols], axis=1)
    return out


def cluster_scores(y, arch: Architecture, params: DmfaParams):
    """Linear-scale first-layer scores; they sum to the mixture density.

    Scores of far-out points can underflow to zero in linear scale; use
    `log_cluster_scores` (what `assign_clusters` does) when only the argmax
    matters.
    """
    y_arr = np.asarray(y, dtype=float)
    scores = np.exp(log_cluster_scores(y_arr, arch, params))
    return scores[0] if y_arr.ndim == 1 else scores


def assign_clusters(data: Dataset, arch: Architecture, params: DmfaParams) -> np.ndarray:
    """1-based first-layer cluster labels, argmax of the cluster scores.

    Ties break toward the lowest component index.
    """
    return np.argmax(log_cluster_scores(data.y, arch, params), axis=1) + 1


def arch_to_string(arch: Architecture) -> str:
    """Canonical flag form `K=k1,...;D=d1,...` (D excludes the observed
    dimension, which comes from the data)."""
    ks = ",".join(str(k) for k in arch.K)
    ds = ",".join(str(d) for d in arch.D[1:])
    return f"K={ks};D={ds}"


def parse_arch_string(text: str, d: int) -> Architecture:
    """Inverse of `arch_to_string` given the observed dimension ``d``;
    parse(print(a), d) == a."""
    parts = dict()
    for chunk in text.strip().split(";"):
        if "=" not in chunk:
            raise ValueError(f"bad architecture string {text!r}: "
                             f"expected K=...;D=...")
        key, _, val = chunk.partition("=")
        parts[key.strip().upper()] = val
    if set(parts) != {"K", "D"}:
        raise ValueError(f"bad architecture string {text!r}: "
                         f"need exactly K= and D= sections")
    try:
        ks = tuple(int(v) for v in parts["K"].split(","))
        ds = tuple(int(v) for v in parts["D"].split(","))
    except ValueError as exc:
        raise ValueError(f"bad architecture string {text!r}: {exc}") from exc
    if len(ks) != len(ds):
        raise ValueError(f"bad architecture string {text!r}: "
                         f"K and D must list one value per layer")
    return Architecture(L=len(ks), D=(d,) + ds, K=ks)
