"""Variational family, closed-form ELBO, and coordinate updates.

The posterior over the augmented parameter set is approximated by a fully
factorized family. Global factors (shared across observations):

* Gaussian per mean entry ``mu`` and loading entry ``B``,
* inverse-gamma per noise entry ``delta``, its scale ``psi``, the mean's
  Cauchy auxiliary ``g``, and the loading shrinkage scales ``tau``/``xi``,
* gamma (rate parameterization) per local shrinkage precision ``h`` and its
  rate ``c``,
* one Dirichlet per layer for the weights ``p``.

Local factors (per observation): a Gaussian per latent coordinate and a
categorical per layer over components.

All priors are conditionally conjugate with this family, so every global
factor has an exact coordinate-ascent update in closed form: the factor
proportional to exp(E[log joint]) with all other factors fixed. Those
updates, the exact ELBO, and the one-pass layerwise local approximation
live here; the stochastic natural-gradient loop that drives them is in
`dmfa.optimizer`.

Layer indexing is 0-based throughout: layer ``l`` maps inputs of dimension
``D[l]`` (the data when l == 0, otherwise the latent below) to latents of
dimension ``D[l+1]``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.cluster.vq import kmeans2
from scipy.special import gammaln, logsumexp

from . import families as fam
from .model import Architecture, Dataset, DmfaParams

__all__ = [
    "PriorHyperparams",
    "LayerGlobals",
    "GlobalFactorSet",
    "LocalFactorSet",
    "ElboBreakdown",
    "KINDS",
    "KIND_FAMILY",
    "KIND_PARAMS",
    "init_variational",
    "elbo",
    "update_global_factor",
    "apply_global_update",
    "global_cavi_targets",
    "targets_for_kind",
    "layer_reductions",
    "local_step",
    "update_local_categorical",
    "update_local_z_exact",
    "point_estimates",
    "collapsed_latent_moments",
]

LOCAL_VAR_FLOOR = 1e-12

# factor kinds in their sweep order; hierarchy factors follow the
# likelihood-facing ones so Gauss-Seidel sweeps stay exact CAVI
KINDS = ("p", "mu", "B", "delta", "g", "psi", "tau", "xi", "h", "c")

KIND_FAMILY = {
    "p": "dirichlet",
    "mu": "gaussian",
    "B": "gaussian",
    "delta": "invgamma",
    "g": "invgamma",
    "psi": "invgamma",
    "tau": "invgamma",
    "xi": "invgamma",
    "h": "gamma",
    "c": "gamma",
}

# parameter-array attribute pair per kind ((array,) for the Dirichlet)
KIND_PARAMS = {
    "p": ("p_alpha",),
    "mu": ("mu_mean", "mu_var"),
    "B": ("B_mean", "B_var"),
    "delta": ("delta_a", "delta_b"),
    "g": ("g_a", "g_b"),
    "psi": ("psi_a", "psi_b"),
    "tau": ("tau_a", "tau_b"),
    "xi": ("xi_a", "xi_b"),
    "h": ("h_a", "h_b"),
    "c": ("c_a", "c_b"),
}


@dataclass
class PriorHyperparams:
    """Per-layer prior scales: Cauchy scale ``G`` for means, global
    horseshoe scale ``nu`` for loadings, half-Cauchy scale ``A`` for noise
    standard deviations, and Dirichlet concentrations ``rho`` (one vector
    per layer)."""

    G: np.ndarray
    nu: np.ndarray
    A: np.ndarray
    rho: list[np.ndarray]

    @classmethod
    def defaults(cls, arch: Architecture, overfitted: bool = False,
                 G: float = 2.0, nu: float | np.ndarray = 1.0,
                 A: float = 2.5) -> "PriorHyperparams":
        """Standard defaults: G=2, nu=1, A=2.5; rho entries 1 when the
        component counts are trusted, 0.5 for overfitted mixtures."""
        rho_val = 0.5 if overfitted else 1.0
        return cls(
            G=np.full(arch.L, float(G)),
            nu=np.broadcast_to(np.asarray(nu, dtype=float), (arch.L,)).copy(),
            A=np.full(arch.L, float(A)),
            rho=[np.full(arch.K[l], rho_val) for l in range(arch.L)],
        )

    def validate(self, arch: Architecture) -> None:
        for name, arr in (("G", self.G), ("nu", self.nu), ("A", self.A)):
            if arr.shape != (arch.L,) or np.any(arr <= 0):
                raise ValueError(f"prior {name} must be {arch.L} positive values")
        if len(self.rho) != arch.L:
            raise ValueError("rho needs one concentration vector per layer")
        for l, r in enumerate(self.rho):
            if r.shape != (arch.K[l],) or np.any(r <= 0):
                raise ValueError(f"rho[{l}] must be {arch.K[l]} positive values")


@dataclass
class LayerGlobals:
    """Variational parameters of every global factor at one layer."""

    mu_mean: np.ndarray
    mu_var: np.ndarray
    B_mean: np.ndarray
    B_var: np.ndarray
    delta_a: np.ndarray
    delta_b: np.ndarray
    psi_a: np.ndarray
    psi_b: np.ndarray
    g_a: np.ndarray
    g_b: np.ndarray
    tau_a: np.ndarray
    tau_b: np.ndarray
    xi_a: np.ndarray
    xi_b: np.ndarray
    h_a: np.ndarray
    h_b: np.ndarray
    c_a: np.ndarray
    c_b: np.ndarray
    p_alpha: np.ndarray


@dataclass
class GlobalFactorSet:
    layers: list[LayerGlobals]

    def copy(self) -> "GlobalFactorSet":
        return copy.deepcopy(self)

    def validate_domains(self) -> None:
        for li, lg in enumerate(self.layers):
            for kind, attrs in KIND_PARAMS.items():
                for attr in attrs:
                    arr = getattr(lg, attr)
                    if not np.all(np.isfinite(arr)):
                        raise ValueError(f"{kind} factor at layer {li}: non-finite {attr}")
                    if attr not in ("mu_mean", "B_mean") and np.any(arr <= 0):
                        raise ValueError(f"{kind} factor at layer {li}: nonpositive {attr}")


@dataclass
class LocalFactorSet:
    """Per-observation factors: ``z_mean[l]``/``z_var[l]`` are (n, D[l+1])
    and ``resp[l]`` is the (n, K[l]) categorical table."""

    z_mean: list[np.ndarray]
    z_var: list[np.ndarray]
    resp: list[np.ndarray]

    @property
    def n(self) -> int:
        return self.resp[0].shape[0]

    def copy(self) -> "LocalFactorSet":
        return copy.deepcopy(self)

    def assign_rows(self, rows: np.ndarray, other: "LocalFactorSet") -> None:
        for l in range(len(self.z_mean)):
            self.z_mean[l][rows] = other.z_mean[l]
            self.z_var[l][rows] = other.z_var[l]
            self.resp[l][rows] = other.resp[l]

    def take_rows(self, rows: np.ndarray) -> "LocalFactorSet":
        return LocalFactorSet(
            z_mean=[a[rows] for a in self.z_mean],
            z_var=[a[rows] for a in self.z_var],
            resp=[a[rows] for a in self.resp],
        )


@dataclass
class ElboBreakdown:
    """Named expected-log-joint and entropy contributions plus their sum."""

    terms: dict[str, float]
    total: float = field(init=False)

    def __post_init__(self):
        self.total = float(sum(self.terms.values()))
        for name, value in self.terms.items():
            if not np.isfinite(value):
                raise ValueError(f"non-finite ELBO term {name!r}: {value}")


# --------------------------------------------------------------------------
# moments and shared building blocks
# --------------------------------------------------------------------------

def _layer_input_moments(data: Dataset, lam_l: LocalFactorSet, l: int,
                         rows: np.ndarray | None = None):
    """Mean/variance of the layer's input (the data at l=0, else the latent
    below); variance is the scalar 0.0 for observed data."""
    if l == 0:
        y = data.y if rows is None else data.y[rows]
        return y, np.zeros_like(y)
    if rows is None:
        return lam_l.z_mean[l - 1], lam_l.z_var[l - 1]
    return lam_l.z_mean[l - 1][rows], lam_l.z_var[l - 1][rows]


def _quad_expectation(mt, vt, mz, vz, lg: LayerGlobals) -> np.ndarray:
    """E[(t_j - mu_kj - B_kj. z)^2] for every (row, component, coordinate),
    all factors independent under q. Shape (n, K, D_in)."""
    B_m, B_v = lg.B_mean, lg.B_var
    pred = mt[:, None, :] - lg.mu_mean[None, :, :] - np.einsum(
        "kjr,ir->ikj", B_m, mz)
    second = np.einsum("kjr,ir->ikj", B_m**2 + B_v, mz**2 + vz)
    first_sq = np.einsum("kjr,ir->ikj", B_m**2, mz**2)
    return vt[:, None, :] + pred**2 + lg.mu_var[None, :, :] + second - first_sq


def _expected_loglik(data: Dataset, lam_l: LocalFactorSet, lg: LayerGlobals,
                     l: int, rows: np.ndarray | None = None) -> np.ndarray:
    """(n, K) matrix of E[log N(input | mu_k + B_k z, delta_k)]."""
    mt, vt = _layer_input_moments(data, lam_l, l, rows)
    mz = lam_l.z_mean[l] if rows is None else lam_l.z_mean[l][rows]
    vz = lam_l.z_var[l] if rows is None else lam_l.z_var[l][rows]
    quad = _quad_expectation(mt, vt, mz, vz, lg)
    e_log_delta = fam.invgamma_mean_log(lg.delta_a, lg.delta_b)
    e_inv_delta = fam.invgamma_mean_inv(lg.delta_a, lg.delta_b)
    per_coord = (-0.5 * np.log(2.0 * np.pi)
                 - 0.5 * e_log_delta[None, :, :]
                 - 0.5 * e_inv_delta[None, :, :] * quad)
    return per_coord.sum(axis=2)


@dataclass
class LayerStats:
    """Responsibility-weighted minibatch reductions feeding every global
    update of one layer; ``scale`` (n/|A|) is already applied."""

    S0: np.ndarray    # (K,)
    St: np.ndarray    # (K, D_in)      sum r * E[t]
    St2: np.ndarray   # (K, D_in)      sum r * E[t^2]
    Sz: np.ndarray    # (K, D_out)     sum r * E[z]
    Szz: np.ndarray   # (K, D_out, D_out) sum r * E[z z^T]
    Stz: np.ndarray   # (K, D_in, D_out)  sum r * E[t] E[z]^T


def layer_reductions(data: Dataset, lam_l: LocalFactorSet, l: int,
                     rows: np.ndarray | None = None,
                     scale: float = 1.0) -> LayerStats:
    mt, vt = _layer_input_moments(data, lam_l, l, rows)
    mz = lam_l.z_mean[l] if rows is None else lam_l.z_mean[l][rows]
    vz = lam_l.z_var[l] if rows is None else lam_l.z_var[l][rows]
    r = lam_l.resp[l] if rows is None else lam_l.resp[l][rows]
    S0 = scale * r.sum(axis=0)
    St = scale * np.einsum("ik,ij->kj", r, mt)
    St2 = scale * np.einsum("ik,ij->kj", r, mt**2 + vt)
    Sz = scale * np.einsum("ik,ir->kr", r, mz)
    Szz = scale * (np.einsum("ik,ir,is->krs", r, mz, mz)
                   + np.einsum("rs,ik,ir->krs", np.eye(mz.shape[1]), r, vz))
    Stz = scale * np.einsum("ik,ij,ir->kjr", r, mt, mz)
    return LayerStats(S0=S0, St=St, St2=St2, Sz=Sz, Szz=Szz, Stz=Stz)


# --------------------------------------------------------------------------
# exact conjugate targets
# --------------------------------------------------------------------------

def targets_for_kind(kind: str, l: int, arch: Architecture,
                     prior: PriorHyperparams, lam_g: GlobalFactorSet,
                     stats: LayerStats) -> tuple[np.ndarray, ...]:
    """Exact coordinate-ascent target parameters for one factor kind at one
    layer, given the current remaining factors and the (scaled) data
    reductions. Returns stored-parameterization arrays."""
    lg = lam_g.layers[l]
    if kind == "p":
        return (prior.rho[l] + stats.S0,)

    e_inv_delta = fam.invgamma_mean_inv(lg.delta_a, lg.delta_b)
    if kind == "mu":
        prec = (fam.invgamma_mean_inv(lg.g_a, lg.g_b) / prior.G[l]
                + e_inv_delta * stats.S0[:, None])
        mean_prec = e_inv_delta * (
            stats.St - np.einsum("kjr,kr->kj", lg.B_mean, stats.Sz))
        var = 1.0 / prec
        return mean_prec * var, var
    if kind == "B":
        diag_szz = np.einsum("krr->kr", stats.Szz)
        prec = (lg.h_a / lg.h_b
                * fam.invgamma_mean_inv(lg.tau_a, lg.tau_b)[:, None, None]
                + e_inv_delta[:, :, None] * diag_szz[:, None, :])
        cross = (np.einsum("kjs,krs->kjr", lg.B_mean, stats.Szz)
                 - lg.B_mean * diag_szz[:, None, :])
        mean_prec = e_inv_delta[:, :, None] * (
            stats.Stz - lg.mu_mean[:, :, None] * stats.Sz[:, None, :] - cross)
        var = 1.0 / prec
        return mean_prec * var, var
    if kind == "delta":
        e_mu2 = lg.mu_mean**2 + lg.mu_var
        diag_szz = np.einsum("krr->kr", stats.Szz)
        quad = (stats.St2
                - 2.0 * lg.mu_mean * stats.St
                - 2.0 * np.einsum("kjr,kjr->kj", lg.B_mean, stats.Stz)
                + e_mu2 * stats.S0[:, None]
                + 2.0 * lg.mu_mean * np.einsum("kjr,kr->kj", lg.B_mean, stats.Sz)
                + np.einsum("kjr,krs,kjs->kj", lg.B_mean, stats.Szz, lg.B_mean)
                + np.einsum("kjr,kr->kj", lg.B_var, diag_szz))
        a = 0.5 + 0.5 * stats.S0[:, None] + np.zeros_like(lg.delta_a)
        b = fam.invgamma_mean_inv(lg.psi_a, lg.psi_b) + 0.5 * quad
        return a, b
    if kind == "g":
        e_mu2 = lg.mu_mean**2 + lg.mu_var
        return np.ones_like(lg.g_a), 0.5 + e_mu2 / (2.0 * prior.G[l])
    if kind == "psi":
        return (np.ones_like(lg.psi_a),
                prior.A[l] ** -2 + fam.invgamma_mean_inv(lg.delta_a, lg.delta_b))
    if kind == "tau":
        e_b2 = lg.B_mean**2 + lg.B_var
        load = 0.5 * np.einsum("kjr,kjr->k", e_b2, lg.h_a / lg.h_b)
        a = np.full_like(lg.tau_a, 0.5 + 0.5 * arch.kappa(l + 1))
        return a, fam.invgamma_mean_inv(lg.xi_a, lg.xi_b) + load
    if kind == "xi":
        return (np.ones_like(lg.xi_a),
                prior.nu[l] ** -2 + fam.invgamma_mean_inv(lg.tau_a, lg.tau_b))
    if kind == "h":
        e_b2 = lg.B_mean**2 + lg.B_var
        e_inv_tau = fam.invgamma_mean_inv(lg.tau_a, lg.tau_b)
        return (np.ones_like(lg.h_a),
                lg.c_a / lg.c_b + 0.5 * e_b2 * e_inv_tau[:, None, None])
    if kind == "c":
        return np.ones_like(lg.c_a), 1.0 + lg.h_a / lg.h_b
    raise ValueError(f"unknown factor kind {kind!r}")


def global_cavi_targets(data: Dataset, arch: Architecture,
                        prior: PriorHyperparams, lam_g: GlobalFactorSet,
                        lam_l: LocalFactorSet,
                        rows: np.ndarray | None = None,
                        scale: float | None = None) -> GlobalFactorSet:
    """Targets of every global factor computed simultaneously at the input
    state. ``rows``/``scale`` select a minibatch and its n/|A| reweighting."""
    if scale is None:
        scale = 1.0 if rows is None else data.n / len(rows)
    out_layers = []
    for l in range(arch.L):
        stats = layer_reductions(data, lam_l, l, rows, scale)
        vals = {}
        for kind in KINDS:
            arrs = targets_for_kind(kind, l, arch, prior, lam_g, stats)
            for attr, arr in zip(KIND_PARAMS[kind], arrs):
                vals[attr] = arr
        out_layers.append(LayerGlobals(**vals))
    return GlobalFactorSet(layers=out_layers)


def update_global_factor(factor_id: tuple, data: Dataset, arch: Architecture,
                         prior: PriorHyperparams, lam_g: GlobalFactorSet,
                         lam_l: LocalFactorSet) -> tuple:
    """Exact full-batch update of a single factor, all others fixed.

    ``factor_id`` is ("p", l), ("tau"|"xi", l, k), ("mu"|"delta"|"g"|"psi",
    l, k, j) or ("B"|"h"|"c", l, k, j, r) with 0-based indices. Returns the
    factor's new stored parameters: an alpha vector for the Dirichlet, a
    (mean, variance) or (shape, scale/rate) pair otherwise.
    """
    kind, l, *idx = factor_id
    if kind not in KIND_FAMILY:
        raise ValueError(f"unknown factor kind {kind!r}")
    stats = layer_reductions(data, lam_l, l)
    arrs = targets_for_kind(kind, l, arch, prior, lam_g, stats)
    if kind == "p":
        return (arrs[0],)
    return tuple(a[tuple(idx)] for a in arrs)


def apply_global_update(factor_id: tuple, data: Dataset, arch: Architecture,
                        prior: PriorHyperparams, lam_g: GlobalFactorSet,
                        lam_l: LocalFactorSet) -> GlobalFactorSet:
    """Copy of ``lam_g`` with one factor set to its exact update."""
    new_vals = update_global_factor(factor_id, data, arch, prior, lam_g, lam_l)
    kind, l, *idx = factor_id
    out = lam_g.copy()
    lg = out.layers[l]
    for attr, val in zip(KIND_PARAMS[kind], new_vals):
        if kind == "p":
            setattr(lg, attr, np.asarray(val, dtype=float))
        else:
            getattr(lg, attr)[tuple(idx)] = val
    return out


# --------------------------------------------------------------------------
# ELBO
# --------------------------------------------------------------------------

def elbo(data: Dataset, arch: Architecture, prior: PriorHyperparams,
         lam_g: GlobalFactorSet, lam_l: LocalFactorSet,
         subset: np.ndarray | None = None) -> ElboBreakdown:
    """Closed-form evidence lower bound, split into named terms.

    With ``subset`` given, the per-observation contributions are evaluated
    on those rows only and rescaled by n/|subset|: the unbiased minibatch
    estimator. ``subset=None`` (or the full index set) gives the exact
    bound.
    """
    prior.validate(arch)
    terms: dict[str, float] = {}
    half_log_2pi = 0.5 * np.log(2.0 * np.pi)
    lg05 = gammaln(0.5)

    for l in range(arch.L):
        lg = lam_g.layers[l]
        G, nu, A, rho = prior.G[l], prior.nu[l], prior.A[l], prior.rho[l]
        e_mu2 = lg.mu_mean**2 + lg.mu_var
        e_b2 = lg.B_mean**2 + lg.B_var
        e_log_g = fam.invgamma_mean_log(lg.g_a, lg.g_b)
        e_inv_g = fam.invgamma_mean_inv(lg.g_a, lg.g_b)
        e_log_tau = fam.invgamma_mean_log(lg.tau_a, lg.tau_b)
        e_inv_tau = fam.invgamma_mean_inv(lg.tau_a, lg.tau_b)
        e_log_xi = fam.invgamma_mean_log(lg.xi_a, lg.xi_b)
        e_inv_xi = fam.invgamma_mean_inv(lg.xi_a, lg.xi_b)
        e_log_psi = fam.invgamma_mean_log(lg.psi_a, lg.psi_b)
        e_inv_psi = fam.invgamma_mean_inv(lg.psi_a, lg.psi_b)
        e_log_delta = fam.invgamma_mean_log(lg.delta_a, lg.delta_b)
        e_inv_delta = fam.invgamma_mean_inv(lg.delta_a, lg.delta_b)
        e_h, e_log_h = lg.h_a / lg.h_b, fam.gamma_mean_log(lg.h_a, lg.h_b)
        e_c, e_log_c = lg.c_a / lg.c_b, fam.gamma_mean_log(lg.c_a, lg.c_b)

        terms[f"mu_prior/l{l}"] = float(np.sum(
            -half_log_2pi - 0.5 * np.log(G) - 0.5 * e_log_g
            - e_mu2 * e_inv_g / (2.0 * G)))
        terms[f"mu_entropy/l{l}"] = float(np.sum(fam.gaussian_entropy(lg.mu_var)))
        terms[f"g_prior/l{l}"] = float(np.sum(
            0.5 * np.log(0.5) - lg05 - 1.5 * e_log_g - 0.5 * e_inv_g))
        terms[f"g_entropy/l{l}"] = float(np.sum(fam.invgamma_entropy(lg.g_a, lg.g_b)))

        terms[f"B_prior/l{l}"] = float(np.sum(
            -half_log_2pi - 0.5 * e_log_tau[:, None, None] + 0.5 * e_log_h
            - 0.5 * e_b2 * e_h * e_inv_tau[:, None, None]))
        terms[f"B_entropy/l{l}"] = float(np.sum(fam.gaussian_entropy(lg.B_var)))
        terms[f"tau_prior/l{l}"] = float(np.sum(
            -0.5 * e_log_xi - lg05 - 1.5 * e_log_tau - e_inv_xi * e_inv_tau))
        terms[f"tau_entropy/l{l}"] = float(np.sum(fam.invgamma_entropy(lg.tau_a, lg.tau_b)))
        terms[f"xi_prior/l{l}"] = float(np.sum(
            -np.log(nu) - lg05 - 1.5 * e_log_xi - e_inv_xi / nu**2))
        terms[f"xi_entropy/l{l}"] = float(np.sum(fam.invgamma_entropy(lg.xi_a, lg.xi_b)))
        terms[f"h_prior/l{l}"] = float(np.sum(
            0.5 * e_log_c - lg05 - 0.5 * e_log_h - e_c * e_h))
        terms[f"h_entropy/l{l}"] = float(np.sum(fam.gamma_entropy(lg.h_a, lg.h_b)))
        terms[f"c_prior/l{l}"] = float(np.sum(-lg05 - 0.5 * e_log_c - e_c))
        terms[f"c_entropy/l{l}"] = float(np.sum(fam.gamma_entropy(lg.c_a, lg.c_b)))

        terms[f"delta_prior/l{l}"] = float(np.sum(
            -0.5 * e_log_psi - lg05 - 1.5 * e_log_delta - e_inv_psi * e_inv_delta))
        terms[f"delta_entropy/l{l}"] = float(np.sum(
            fam.invgamma_entropy(lg.delta_a, lg.delta_b)))
        terms[f"psi_prior/l{l}"] = float(np.sum(
            -np.log(A) - lg05 - 1.5 * e_log_psi - e_inv_psi / A**2))
        terms[f"psi_entropy/l{l}"] = float(np.sum(
            fam.invgamma_entropy(lg.psi_a, lg.psi_b)))

        e_log_p = fam.dirichlet_mean_log(lg.p_alpha)
        terms[f"p_prior/l{l}"] = float(
            gammaln(rho.sum()) - gammaln(rho).sum() + np.dot(rho - 1.0, e_log_p))
        terms[f"p_entropy/l{l}"] = float(fam.dirichlet_entropy(lg.p_alpha))

    if data.n > 0:
        rows = None if subset is None else np.asarray(subset, dtype=int)
        scale = 1.0 if rows is None else data.n / len(rows)
        for l in range(arch.L):
            lg = lam_g.layers[l]
            r = lam_l.resp[l] if rows is None else lam_l.resp[l][rows]
            loglik = _expected_loglik(data, lam_l, lg, l, rows)
            terms[f"loglik/l{l}"] = float(scale * np.sum(r * loglik))
            e_log_p = fam.dirichlet_mean_log(lg.p_alpha)
            terms[f"gamma_prior/l{l}"] = float(scale * np.sum(r @ e_log_p))
            terms[f"gamma_entropy/l{l}"] = float(
                scale * np.sum(fam.categorical_entropy(r)))
            mz = lam_l.z_mean[l] if rows is None else lam_l.z_mean[l][rows]
            vz = lam_l.z_var[l] if rows is None else lam_l.z_var[l][rows]
            terms[f"z_entropy/l{l}"] = float(
                scale * np.sum(fam.gaussian_entropy(vz)))
            if l == arch.L - 1:
                terms["z_top_prior"] = float(
                    scale * np.sum(-half_log_2pi - 0.5 * (mz**2 + vz)))
    return ElboBreakdown(terms=terms)


# --------------------------------------------------------------------------
# local factors
# --------------------------------------------------------------------------

def point_estimates(lam_g: GlobalFactorSet, arch: Architecture) -> DmfaParams:
    """Point model from the variational factors: means for Gaussian and
    Dirichlet factors, the mode for the (possibly heavy-tailed)
    inverse-gamma noise factors."""
    p, mu, B, delta = [], [], [], []
    for lg in lam_g.layers:
        p.append(fam.dirichlet_mean(lg.p_alpha))
        mu.append(lg.mu_mean.copy())
        B.append(lg.B_mean.copy())
        delta.append(fam.invgamma_mode(lg.delta_a, lg.delta_b))
    return DmfaParams(p=p, mu=mu, B=B, delta=delta)


def collapsed_latent_moments(params: DmfaParams, arch: Architecture):
    """Gaussian moment-matched marginals of each layer's latent under the
    point model; prior_m[l]/prior_S[l] describe z at level l+1."""
    prior_m = [None] * arch.L
    prior_S = [None] * arch.L
    prior_m[arch.L - 1] = np.zeros(arch.D[arch.L])
    prior_S[arch.L - 1] = np.eye(arch.D[arch.L])
    for l in range(arch.L - 2, -1, -1):
        pl, mul, Bl, dl = (params.p[l + 1], params.mu[l + 1],
                           params.B[l + 1], params.delta[l + 1])
        centers = mul + np.einsum("kjr,r->kj", Bl, prior_m[l + 1])
        m = np.einsum("k,kj->j", pl, centers)
        S = np.zeros((arch.D[l + 1], arch.D[l + 1]))
        for k in range(len(pl)):
            S += pl[k] * (np.diag(dl[k])
                          + Bl[k] @ prior_S[l + 1] @ Bl[k].T
                          + np.outer(centers[k], centers[k]))
        S -= np.outer(m, m)
        prior_m[l], prior_S[l] = m, 0.5 * (S + S.T)
    return prior_m, prior_S


def _gaussian_logpdf_rows(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    chol = scipy.linalg.cholesky(cov, lower=True)
    sol = scipy.linalg.solve_triangular(chol, (x - mean).T, lower=True)
    return (-0.5 * x.shape[1] * np.log(2.0 * np.pi)
            - np.log(np.diag(chol)).sum() - 0.5 * (sol**2).sum(axis=0))


def local_step(data: Dataset, arch: Architecture, lam_g: GlobalFactorSet,
               rows: np.ndarray | None = None) -> LocalFactorSet:
    """One-pass layerwise estimate of the local factors for ``rows``.

    Sets the globals to their point estimates, picks the most likely
    component per layer by scoring the input against each component's
    collapsed Gaussian (deeper layers moment-matched to a single Gaussian),
    then conditions the latent linearly on the current input mean under the
    chosen component. No inner iteration; variances are floored at 1e-12.
    The categorical factors returned are the exact soft responsibilities
    given the new latent factors.
    """
    rows = np.arange(data.n) if rows is None else np.asarray(rows, dtype=int)
    params = point_estimates(lam_g, arch)
    prior_m, prior_S = collapsed_latent_moments(params, arch)

    x = data.y[rows]
    z_mean, z_var = [], []
    for l in range(arch.L):
        K, dout = arch.K[l], arch.D[l + 1]
        scores = np.empty((x.shape[0], K))
        with np.errstate(divide="ignore"):
            log_p = np.log(params.p[l])
        for k in range(K):
            cov = (np.diag(params.delta[l][k])
                   + params.B[l][k] @ prior_S[l] @ params.B[l][k].T)
            scores[:, k] = log_p[k] + _gaussian_logpdf_rows(
                x, params.mu[l][k] + params.B[l][k] @ prior_m[l], cov)
        pick = np.argmax(scores, axis=1)

        S_inv = scipy.linalg.inv(prior_S[l])
        mean_l = np.empty((x.shape[0], dout))
        var_l = np.empty((x.shape[0], dout))
        for k in np.unique(pick):
            sel = pick == k
            Bk, dk = params.B[l][k], params.delta[l][k]
            lam = S_inv + (Bk / dk[:, None]).T @ Bk
            cov_post = scipy.linalg.inv(lam)
            proj = cov_post @ (Bk / dk[:, None]).T
            base = cov_post @ (S_inv @ prior_m[l]) - proj @ params.mu[l][k]
            mean_l[sel] = x[sel] @ proj.T + base
            var_l[sel] = np.maximum(np.diag(cov_post), LOCAL_VAR_FLOOR)
        z_mean.append(mean_l)
        z_var.append(np.ascontiguousarray(var_l))
        x = mean_l

    out = LocalFactorSet(
        z_mean=z_mean, z_var=z_var,
        resp=[np.empty((len(rows), arch.K[l])) for l in range(arch.L)])
    sub = data.y[rows]
    sub_data = Dataset(y=sub) if len(rows) else Dataset(y=np.zeros((0, data.d)))
    out.resp = update_local_categorical(sub_data, arch, lam_g, out)
    return out


def update_local_z_exact(data: Dataset, arch: Architecture,
                         lam_g: GlobalFactorSet,
                         lam_l: LocalFactorSet) -> LocalFactorSet:
    """Exact mean-field updates of every latent Gaussian coordinate, one
    Gauss-Seidel pass in layer-then-coordinate order; mutates ``lam_l``.

    This is the iterative local optimization the one-pass `local_step`
    approximates. It is used by tests to reach genuine full-CAVI fixed
    points and to audit the approximation; the fit loop never calls it.
    """
    for l in range(arch.L):
        lg = lam_g.layers[l]
        e_inv_delta = fam.invgamma_mean_inv(lg.delta_a, lg.delta_b)
        eb2 = lg.B_mean**2 + lg.B_var
        # within-layer couplings of the latent coordinates
        w = np.einsum("kj,kjr->kr", e_inv_delta, eb2)
        q = np.einsum("kj,kjr->kr", e_inv_delta, lg.B_mean**2)
        a_lin = e_inv_delta[:, :, None] * lg.B_mean   # (K, D_in, D_out)
        r = lam_l.resp[l]
        mt, _ = _layer_input_moments(data, lam_l, l)
        mz, vz = lam_l.z_mean[l], lam_l.z_var[l]
        resid = (mt[:, None, :] - lg.mu_mean[None, :, :]
                 - np.einsum("kjr,ir->ikj", lg.B_mean, mz))
        if l == arch.L - 1:
            prec_deep = np.ones(mz.shape)
            lin_deep = np.zeros(mz.shape)
        else:
            lg_up = lam_g.layers[l + 1]
            e_inv_up = fam.invgamma_mean_inv(lg_up.delta_a, lg_up.delta_b)
            r_up = lam_l.resp[l + 1]
            centers = (lg_up.mu_mean[None, :, :] + np.einsum(
                "kjr,ir->ikj", lg_up.B_mean, lam_l.z_mean[l + 1]))
            prec_deep = r_up @ e_inv_up
            lin_deep = np.einsum("ik,kj,ikj->ij", r_up, e_inv_up, centers)
        for j in range(arch.D[l + 1]):
            prec = prec_deep[:, j] + r @ w[:, j]
            lin = (lin_deep[:, j]
                   + np.einsum("ik,ikj,kj->i", r, resid, a_lin[:, :, j])
                   + mz[:, j] * (r @ q[:, j]))
            new_mean = lin / prec
            resid -= np.einsum("i,kj->ikj", new_mean - mz[:, j],
                               lg.B_mean[:, :, j])
            mz[:, j] = new_mean
            vz[:, j] = np.maximum(1.0 / prec, LOCAL_VAR_FLOOR)
    return lam_l


def update_local_categorical(data: Dataset, arch: Architecture,
                             lam_g: GlobalFactorSet, lam_l: LocalFactorSet,
                             rows: np.ndarray | None = None) -> list[np.ndarray]:
    """Exact mean-field categorical updates: responsibilities proportional
    to exp(E[log p_k] + E[log component likelihood]) per layer."""
    out = []
    for l in range(arch.L):
        lg = lam_g.layers[l]
        log_rho = (fam.dirichlet_mean_log(lg.p_alpha)[None, :]
                   + _expected_loglik(data, lam_l, lg, l, rows))
        log_rho -= logsumexp(log_rho, axis=1, keepdims=True)
        out.append(np.exp(log_rho))
    return out


# --------------------------------------------------------------------------
# initialization
# --------------------------------------------------------------------------

def _kmeans_partition(x: np.ndarray, k: int, rng: np.random.Generator):
    """k-means++ style partition; guarantees every component has a center."""
    if k == 1:
        return np.zeros(x.shape[0], dtype=int), x.mean(axis=0, keepdims=True)
    centers, labels = kmeans2(x, k, minit="++", seed=rng, missing="warn")
    for k_empty in np.setdiff1d(np.arange(k), np.unique(labels)):
        donor = rng.integers(x.shape[0])
        labels[donor] = k_empty
        centers[k_empty] = x[donor]
    return labels, centers


def init_variational(arch: Architecture, data: Dataset,
                     prior: PriorHyperparams, seed: int = 0
                     ) -> tuple[GlobalFactorSet, LocalFactorSet]:
    """Deterministic data-driven initialization.

    Mean factors come from recursive k-means++ partitioning of the data and
    its layerwise factor scores; loading factors from scaled principal
    directions of within-cluster residuals; noise from residual variances;
    scale factors sit at prior-implied moments; locals from one local_step
    pass.
    """
    prior.validate(arch)
    if data.n < arch.K[0]:
        raise ValueError(
            f"need at least K[1]={arch.K[0]} observations, got {data.n}")
    rng = np.random.default_rng(seed)

    layers = []
    x = data.y
    for l in range(arch.L):
        K, din, dout = arch.K[l], arch.D[l], arch.D[l + 1]
        labels, centers = _kmeans_partition(x, K, rng)
        B0 = np.empty((K, din, dout))
        delta0 = np.empty((K, din))
        counts = np.empty(K)
        scores = np.empty((x.shape[0], dout))
        for k in range(K):
            members = labels == k
            counts[k] = members.sum()
            resid = x[members] - centers[k]
            B0[k] = 0.01 * rng.standard_normal((din, dout))
            if resid.shape[0] >= 2:
                u, s, _ = np.linalg.svd(resid, full_matrices=False)
                ncomp = min(dout, s.size)
                B0[k][:, :ncomp] = (resid.T @ u[:, :ncomp]) / np.sqrt(resid.shape[0])
            total_var = resid.var(axis=0) if resid.shape[0] >= 2 else np.ones(din)
            delta0[k] = np.maximum(total_var - (B0[k] ** 2).sum(axis=1), 0.05)
            # ridge factor scores feed the next layer's partition
            gram = B0[k].T @ (B0[k] / delta0[k][:, None])
            solve = np.linalg.solve(np.eye(dout) + gram,
                                    (B0[k] / delta0[k][:, None]).T)
            scores[members] = (x[members] - centers[k]) @ solve.T

        shrink = counts[:, None] + 1.0
        delta_a = 0.5 + 0.5 * counts[:, None] + np.zeros((K, din))
        delta_b = delta0 * (delta_a + 1.0)
        layers.append(LayerGlobals(
            mu_mean=centers.astype(float).copy(),
            mu_var=delta0 / shrink,
            B_mean=B0,
            B_var=np.broadcast_to(
                np.maximum(delta0[:, :, None], 0.05) / shrink[:, :, None],
                (K, din, dout)).copy(),
            delta_a=delta_a,
            delta_b=delta_b,
            psi_a=np.full((K, din), 0.5),
            psi_b=np.full((K, din), prior.A[l] ** -2),
            g_a=np.full((K, din), 0.5),
            g_b=np.full((K, din), 0.5),
            tau_a=np.full(K, 0.5),
            tau_b=np.full(K, prior.nu[l] ** 2 / 2.0),
            xi_a=np.full(K, 0.5),
            xi_b=np.full(K, prior.nu[l] ** -2),
            h_a=np.full((K, din, dout), 0.5),
            h_b=np.full((K, din, dout), 0.5),
            c_a=np.full((K, din, dout), 0.5),
            c_b=np.full((K, din, dout), 1.0),
            p_alpha=prior.rho[l] + data.n / K,
        ))
        x = scores
    lam_g = GlobalFactorSet(layers=layers)
    lam_l = local_step(data, arch, lam_g)
    return lam_g, lam_l
