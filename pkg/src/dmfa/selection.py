"""Architecture choice: overfitted-mixture pruning, candidate enumeration
under the dimension-halving rule, short-run scoring, and the final pick.

Scoring runs the fitting loop for exactly 250 iterations per candidate and
averages the recorded bound over iterations 238..250 (13 values). Candidates
are independent: each gets a seed derived as base_seed + candidate_index,
so any execution order (or a worker pool) produces identical reports.
"""

from __future__ import annotations

import itertools
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import families as fam
from .model import Architecture, Dataset, arch_to_string, validate_architecture
from .optimizer import FitConfig, fit
from .variational import GlobalFactorSet, PriorHyperparams

__all__ = [
    "ArchitectureCandidate",
    "PruneReport",
    "SHORT_RUN_ITERATIONS",
    "SCORE_TAIL_START",
    "prune_components",
    "default_overfitted_k",
    "enumerate_architectures",
    "score_architecture",
    "score_candidates",
    "select_model",
    "write_selection_csv",
]

SHORT_RUN_ITERATIONS = 250
SCORE_TAIL_START = 238  # mean over iterations 238..250 inclusive, 13 values
PRUNE_THRESHOLD = 0.01


@dataclass
class ArchitectureCandidate:
    arch: Architecture
    score: float = float("nan")
    status: str = "pending"        # pending | scored | failed
    seconds: float = 0.0
    error: str = ""


@dataclass
class PruneReport:
    layer: int
    surviving: list[int]
    removed: list[int]
    weights: np.ndarray

    @property
    def renormalized_weights(self) -> np.ndarray:
        kept = self.weights[self.surviving]
        return kept / kept.sum()


def prune_components(lam_g: GlobalFactorSet, arch: Architecture,
                     threshold: float = PRUNE_THRESHOLD
                     ) -> tuple[list[PruneReport], Architecture]:
    """Drop components whose variational-mean weight falls below the
    threshold, per layer. The surviving set is never empty: if everything
    is below threshold the largest component is kept and the report says
    so via a single survivor. Callers should refit with the reduced
    component counts rather than keep the overfitted state."""
    reports = []
    new_K = []
    for l, lg in enumerate(lam_g.layers):
        weights = fam.dirichlet_mean(lg.p_alpha)
        surviving = [int(k) for k in np.flatnonzero(weights >= threshold)]
        if not surviving:
            surviving = [int(np.argmax(weights))]
        removed = [int(k) for k in range(weights.size) if k not in surviving]
        reports.append(PruneReport(layer=l, surviving=surviving,
                                   removed=removed, weights=weights))
        new_K.append(len(surviving))
    reduced = Architecture(L=arch.L, D=arch.D, K=tuple(new_K))
    return reports, reduced


def default_overfitted_k(n: int) -> int:
    """floor(sqrt(n)): the overfitted first-layer component count used
    when the cluster count is unknown."""
    return int(np.floor(np.sqrt(n)))


def enumerate_architectures(d: int, layers=(2, 3),
                            k_first: int = 1,
                            k_deeper=(1, 2, 3)) -> list[Architecture]:
    """All architectures with the requested layer counts whose dimensions
    satisfy D[l+1] <= (D[l]-1)/2 down from the data dimension ``d``,
    crossed with the component proposals for the deeper layers."""
    if d < 1:
        raise ValueError("data dimension must be >= 1")
    out: list[Architecture] = []
    for L in sorted(layers):
        prefixes: list[tuple[int, ...]] = [()]
        for _ in range(L):
            prefixes = [
                prefix + (dd,)
                for prefix in prefixes
                for dd in range(1, ((prefix[-1] if prefix else d) - 1) // 2 + 1)
            ]
        for dims in prefixes:
            for ks in itertools.product(k_deeper, repeat=L - 1):
                arch = Architecture(L=L, D=(d,) + dims, K=(k_first,) + ks)
                assert validate_architecture(arch, enforce_ar=True)
                out.append(arch)
    return out


def score_architecture(data: Dataset, arch: Architecture,
                       prior: PriorHyperparams, config: FitConfig,
                       ) -> ArchitectureCandidate:
    """Short-run score: fit for exactly 250 iterations, then average the
    recorded stochastic bound over iterations 238..250. Failures are
    captured in the candidate status instead of aborting a sweep."""
    cand = ArchitectureCandidate(arch=arch)
    start = time.perf_counter()
    run_cfg = replace(config, max_iterations=SHORT_RUN_ITERATIONS,
                      elbo_record_stride=1, convergence_window=0)
    try:
        result = fit(data, arch, prior, run_cfg)
        tail = [result.trace.elbo_at(t)
                for t in range(SCORE_TAIL_START, SHORT_RUN_ITERATIONS + 1)]
        cand.score = float(np.mean(tail))
        cand.status = "scored"
    except Exception as exc:  # noqa: BLE001 - sweep must survive any candidate
        cand.status = "failed"
        cand.error = f"{type(exc).__name__}: {exc}"
    cand.seconds = time.perf_counter() - start
    return cand


def _score_one(args):
    data, arch, prior, config = args
    return score_architecture(data, arch, prior, config)


def score_candidates(data: Dataset, candidates: list[Architecture],
                     prior_for, config: FitConfig, jobs: int = 1
                     ) -> list[ArchitectureCandidate]:
    """Score all candidates with per-candidate seeds (base + index);
    results are merged by index so parallel schedules change nothing."""
    tasks = []
    for i, arch in enumerate(candidates):
        cfg = replace(config, seed=config.seed + i)
        tasks.append((data, arch, prior_for(arch), cfg))
    if jobs <= 1:
        return [_score_one(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_score_one, tasks))


def select_model(candidates: list[ArchitectureCandidate]) -> Architecture:
    """Highest-scoring candidate; exact ties go to the architecture with
    fewer free parameters. The chosen model is meant to be refit to full
    convergence afterwards."""
    scored = [c for c in candidates if c.status == "scored"]
    if not scored:
        raise ValueError("no candidate was scored successfully")
    best = max(scored,
               key=lambda c: (c.score, -c.arch.n_free_parameters()))
    return best.arch


def write_selection_csv(path, candidates: list[ArchitectureCandidate]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("arch,score,status,params,seconds\n")
        for c in candidates:
            score = "" if np.isnan(c.score) else repr(c.score)
            fh.write(f"\"{arch_to_string(c.arch)}\",{score},{c.status},"
                     f"{c.arch.n_free_parameters()},{c.seconds:.3f}\n")
