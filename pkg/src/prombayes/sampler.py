"""No-U-Turn sampler with dual-averaging step size and diagonal mass matrix.

One transition builds a leapfrog trajectory by iterative doubling, samples
the proposal multinomially by trajectory weight (log-weight arithmetic
throughout), and stops on the generalized U-turn criterion or at the tree
depth cap.  Warmup interleaves dual averaging of the step size toward a
target acceptance statistic with Stan-style expanding estimation windows
for the diagonal mass matrix (75-step initial buffer, doubling windows,
50-step terminal buffer); both are frozen for the sampling phase.

Chains use independent counter-based streams keyed by (seed, chain index),
so results are bitwise reproducible regardless of whether chains run
sequentially or in parallel worker processes.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

DIVERGENCE_THRESHOLD = 1000.0
STATS_FIELDS = ("divergent", "tree_depth", "accept", "energy")

PROCS_ENV_VAR = "PROMBAYES_CHAIN_PROCS"


class SamplerError(RuntimeError):
    """Numerical failure inside the sampler (bad init, degenerate warmup)."""


@dataclass(frozen=True)
class NutsConfig:
    seed: int
    chains: int = 4
    warmup: int = 600
    samples: int = 900
    target_accept: float = 0.8
    max_tree_depth: int = 10

    def __post_init__(self):
        if self.chains < 1:
            raise ValueError("chains must be >= 1")
        if self.warmup < 100:
            raise ValueError("warmup must be >= 100")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must be in (0, 1)")
        if self.max_tree_depth < 1:
            raise ValueError("max_tree_depth must be >= 1")

    def to_dict(self) -> dict:
        return {"seed": self.seed, "chains": self.chains, "warmup": self.warmup,
                "samples": self.samples, "target_accept": self.target_accept,
                "max_tree_depth": self.max_tree_depth}


def _philox_key(seed: int, chain: int) -> np.ndarray:
    return np.array([seed & 0xFFFFFFFFFFFFFFFF, chain], dtype=np.uint64)


def chain_rng(seed: int, chain: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=_philox_key(seed, chain)))


def init_points(space, seed: int, chains: int):
    """Per-chain starting points, uniform in [-2, 2] per coordinate.

    Mirrors exactly the first draw each chain's stream makes, so the
    preview equals what the sampler actually uses.
    """
    if chains < 1:
        raise ValueError("chains must be >= 1")
    return [chain_rng(seed, c).uniform(-2.0, 2.0, space.dim)
            for c in range(chains)]


# -- adaptation ----------------------------------------------------------------


class DualAveraging:
    """Nesterov dual averaging of log step size (gamma=0.05, t0=10, kappa=0.75)."""

    GAMMA = 0.05
    T0 = 10.0
    KAPPA = 0.75

    def __init__(self, eps0: float):
        self.mu = math.log(10.0 * eps0)
        self.log_eps = math.log(eps0)
        self.log_eps_bar = 0.0
        self.h_bar = 0.0
        self.t = 0

    def update(self, accept_stat: float, target: float) -> float:
        self.t += 1
        eta = 1.0 / (self.t + self.T0)
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (target - accept_stat)
        self.log_eps = self.mu - math.sqrt(self.t) / self.GAMMA * self.h_bar
        w = self.t ** (-self.KAPPA)
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar
        return math.exp(self.log_eps)

    def final(self) -> float:
        return math.exp(self.log_eps_bar)


class Welford:
    """Online mean/variance accumulator for the mass-matrix windows."""

    def __init__(self, dim: int):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def update(self, x: np.ndarray) -> None:
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    def regularized_variance(self) -> np.ndarray:
        if self.n < 2:
            return np.ones_like(self.mean)
        var = self.m2 / (self.n - 1)
        w = self.n / (self.n + 5.0)
        return w * var + (1.0 - w) * 1e-3


def warmup_windows(warmup: int, init_buffer: int = 75, term_buffer: int = 50,
                   base_window: int = 25):
    """Half-open mass-estimation windows [(start, end), ...]."""
    if init_buffer + base_window + term_buffer > warmup:
        init_buffer = max(1, int(0.15 * warmup))
        term_buffer = max(1, int(0.10 * warmup))
        base_window = warmup - init_buffer - term_buffer
    windows = []
    start = init_buffer
    end = warmup - term_buffer
    w = base_window
    while start < end:
        if start + 3 * w >= end:
            w = end - start
        windows.append((start, start + w))
        start += w
        w *= 2
    return windows


# -- Hamiltonian trajectory ------------------------------------------------------


def _kinetic(r: np.ndarray, inv_mass: np.ndarray) -> float:
    return 0.5 * float(np.dot(r, r * inv_mass))


def _leapfrog(logp_grad, x, g, r, eps, inv_mass):
    r = r + 0.5 * eps * g
    x = x + eps * (r * inv_mass)
    lp, g = logp_grad(x)
    r = r + 0.5 * eps * g
    return x, r, lp, g


def find_reasonable_epsilon(rng, logp_grad, x, lp, g, inv_mass) -> float:
    """Double/halve the step until one-step acceptance crosses 0.5."""
    eps = 1.0
    r = rng.standard_normal(x.size) / np.sqrt(inv_mass)
    h0 = -lp + _kinetic(r, inv_mass)

    def log_accept(eps):
        x1, r1, lp1, _ = _leapfrog(logp_grad, x, g, r, eps, inv_mass)
        h1 = -lp1 + _kinetic(r1, inv_mass)
        if not np.isfinite(h1):
            return -np.inf
        return h0 - h1

    direction = 1.0 if log_accept(eps) > math.log(0.5) else -1.0
    while direction * log_accept(eps) > direction * math.log(0.5):
        eps *= 2.0 ** direction
        if eps < 1e-10 or eps > 1e7:
            break
    return float(min(max(eps, 1e-10), 1e7))


class _Tree:
    """One trajectory segment: endpoint states, candidate, and merge stats."""

    __slots__ = ("x_bwd", "r_bwd", "g_bwd", "lp_bwd",
                 "x_fwd", "r_fwd", "g_fwd", "lp_fwd",
                 "sel", "log_w", "sum_r", "turning", "divergent",
                 "alpha_sum", "n_alpha", "abs_dh_sum")

    def __init__(self, x, r, g, lp, log_w, divergent, alpha, abs_dh):
        self.x_bwd = self.x_fwd = x
        self.r_bwd = self.r_fwd = r
        self.g_bwd = self.g_fwd = g
        self.lp_bwd = self.lp_fwd = lp
        self.sel = (x, lp, g, r)
        self.log_w = log_w
        self.sum_r = r
        self.turning = False
        self.divergent = divergent
        self.alpha_sum = alpha
        self.n_alpha = 1
        self.abs_dh_sum = abs_dh


def _no_uturn(lower: _Tree, upper: _Tree, inv_mass) -> bool:
    """Generalized criterion over the merged segment and both sub-joins."""
    def ok(rho, r_a, r_b):
        return (np.dot(rho, r_a * inv_mass) > 0.0
                and np.dot(rho, r_b * inv_mass) > 0.0)

    if not ok(lower.sum_r + upper.sum_r, lower.r_bwd, upper.r_fwd):
        return False
    if not ok(lower.sum_r + upper.r_bwd, lower.r_bwd, upper.r_bwd):
        return False
    if not ok(lower.r_fwd + upper.sum_r, lower.r_fwd, upper.r_fwd):
        return False
    return True


def _glue(first: _Tree, second: _Tree, v: int, inv_mass) -> None:
    """Merge ``second`` (grown in direction v) into ``first`` in place.

    The U-turn check runs before endpoints are reassigned, while both trees
    still describe their own segments; in integration-time order the lower
    segment is ``first`` when growing forward and ``second`` when growing
    backward.
    """
    lower, upper = (first, second) if v > 0 else (second, first)
    turning = not _no_uturn(lower, upper, inv_mass)
    if v > 0:
        first.x_fwd, first.r_fwd = second.x_fwd, second.r_fwd
        first.g_fwd, first.lp_fwd = second.g_fwd, second.lp_fwd
    else:
        first.x_bwd, first.r_bwd = second.x_bwd, second.r_bwd
        first.g_bwd, first.lp_bwd = second.g_bwd, second.lp_bwd
    first.sum_r = first.sum_r + second.sum_r
    first.turning = turning


def _build_tree(rng, logp_grad, tree_end, depth, v, eps, inv_mass, h0):
    """Build a depth-j segment continuing from ``tree_end`` in direction v."""
    if depth == 0:
        x, r, g, lp = tree_end
        x1, r1, lp1, g1 = _leapfrog(logp_grad, x, g, r, v * eps, inv_mass)
        if np.isfinite(lp1):
            h1 = -lp1 + _kinetic(r1, inv_mass)
        else:
            h1 = np.inf
        dh = h1 - h0 if np.isfinite(h1) else np.inf
        log_w = -dh
        divergent = dh > DIVERGENCE_THRESHOLD
        alpha = math.exp(min(0.0, log_w)) if np.isfinite(log_w) else 0.0
        abs_dh = abs(dh) if np.isfinite(dh) else DIVERGENCE_THRESHOLD
        return _Tree(x1, r1, g1, lp1, log_w, divergent, alpha, abs_dh)

    first = _build_tree(rng, logp_grad, tree_end, depth - 1, v, eps, inv_mass, h0)
    if first.divergent or first.turning:
        return first
    outer = ((first.x_fwd, first.r_fwd, first.g_fwd, first.lp_fwd) if v > 0
             else (first.x_bwd, first.r_bwd, first.g_bwd, first.lp_bwd))
    second = _build_tree(rng, logp_grad, outer, depth - 1, v, eps, inv_mass, h0)

    first.alpha_sum += second.alpha_sum
    first.n_alpha += second.n_alpha
    first.abs_dh_sum += second.abs_dh_sum
    if second.divergent or second.turning:
        first.divergent |= second.divergent
        first.turning |= second.turning
        return first

    # Multinomial selection within the combined segment.
    total = np.logaddexp(first.log_w, second.log_w)
    if math.log(rng.random()) < second.log_w - total:
        first.sel = second.sel
    first.log_w = total
    _glue(first, second, v, inv_mass)
    return first


def _transition(rng, logp_grad, x, lp, g, eps, inv_mass, cfg: NutsConfig):
    """One NUTS draw; returns (x, lp, g, stats dict)."""
    r0 = rng.standard_normal(x.size) / np.sqrt(inv_mass)
    h0 = -lp + _kinetic(r0, inv_mass)
    tree = _Tree(x, r0, g, lp, log_w=0.0, divergent=False, alpha=1.0, abs_dh=0.0)
    tree.n_alpha = 0
    tree.alpha_sum = 0.0

    depth = 0
    divergent = False
    while depth < cfg.max_tree_depth:
        v = 1 if rng.random() < 0.5 else -1
        tree_end = ((tree.x_fwd, tree.r_fwd, tree.g_fwd, tree.lp_fwd) if v > 0
                    else (tree.x_bwd, tree.r_bwd, tree.g_bwd, tree.lp_bwd))
        sub = _build_tree(rng, logp_grad, tree_end, depth, v, eps, inv_mass, h0)
        tree.alpha_sum += sub.alpha_sum
        tree.n_alpha += sub.n_alpha
        tree.abs_dh_sum += sub.abs_dh_sum
        divergent |= sub.divergent
        if sub.divergent or sub.turning:
            break
        # Biased progressive sampling: prefer the fresh half of the tree.
        if math.log(rng.random()) < sub.log_w - tree.log_w:
            tree.sel = sub.sel
        tree.log_w = np.logaddexp(tree.log_w, sub.log_w)
        _glue(tree, sub, v, inv_mass)
        depth += 1
        if tree.turning:
            break

    x_new, lp_new, g_new, r_new = tree.sel
    n_pts = max(tree.n_alpha, 1)
    stats = {
        "divergent": divergent,
        "tree_depth": depth,
        "accept": tree.alpha_sum / n_pts,
        "energy": -lp_new + _kinetic(r_new, inv_mass),
        "energy_error": tree.abs_dh_sum / n_pts,
    }
    return x_new, lp_new, g_new, stats


# -- chain driver ----------------------------------------------------------------


def _run_chain(logp_grad, dim, cfg: NutsConfig, chain: int):
    rng = chain_rng(cfg.seed, chain)

    x = lp = g = None
    for _ in range(101):
        x = rng.uniform(-2.0, 2.0, dim)
        lp, g = logp_grad(x)
        if np.isfinite(lp) and np.all(np.isfinite(g)):
            break
    else:
        raise SamplerError(
            "non-finite log-density at initialization after 100 jittered retries")

    inv_mass = np.ones(dim)
    eps = find_reasonable_epsilon(rng, logp_grad, x, lp, g, inv_mass)
    da = DualAveraging(eps)
    windows = warmup_windows(cfg.warmup)
    window_ends = {end for _, end in windows}
    acc = Welford(dim)

    divergent_warmup = 0
    for it in range(cfg.warmup):
        x, lp, g, st = _transition(rng, logp_grad, x, lp, g, eps, inv_mass, cfg)
        divergent_warmup += int(st["divergent"])
        eps = da.update(st["accept"], cfg.target_accept)
        if any(s <= it < e for s, e in windows):
            acc.update(x)
        if it + 1 in window_ends:
            inv_mass = acc.regularized_variance()
            acc = Welford(dim)
            eps = find_reasonable_epsilon(rng, logp_grad, x, lp, g, inv_mass)
            da = DualAveraging(eps)
    if divergent_warmup == cfg.warmup:
        raise SamplerError("every warmup iteration diverged")
    eps = da.final()

    draws = np.empty((cfg.samples, dim))
    stats = {k: np.empty(cfg.samples) for k in
             ("accept", "energy", "energy_error")}
    stats["divergent"] = np.empty(cfg.samples, dtype=bool)
    stats["tree_depth"] = np.empty(cfg.samples, dtype=int)
    stats["step_size"] = np.full(cfg.samples, eps)
    for it in range(cfg.samples):
        x, lp, g, st = _transition(rng, logp_grad, x, lp, g, eps, inv_mass, cfg)
        draws[it] = x
        stats["divergent"][it] = st["divergent"]
        stats["tree_depth"][it] = st["tree_depth"]
        stats["accept"][it] = st["accept"]
        stats["energy"][it] = st["energy"]
        stats["energy_error"][it] = st["energy_error"]
    adaptation = {"step_size": eps, "inv_mass_diag": inv_mass}
    return draws, stats, adaptation


def _run_chain_star(args):
    return _run_chain(*args)


def _resolve_procs(chains: int) -> int:
    env = os.environ.get(PROCS_ENV_VAR)
    if env is not None:
        return max(1, min(int(env), chains))
    return max(1, min(os.cpu_count() or 1, chains))


# -- draw container ----------------------------------------------------------------


@dataclass
class PosteriorDraws:
    """Constrained named draws plus per-draw sampler statistics."""

    param_names: tuple
    params: np.ndarray           # (chains, draws, n_params)
    stats: dict = field(default_factory=dict)   # name -> (chains, draws)
    adaptation: list = field(default_factory=list)
    config: NutsConfig = None

    def __post_init__(self):
        if self.params.ndim != 3 or self.params.shape[2] != len(self.param_names):
            raise ValueError("params must be (chains, draws, n_params)")
        for name, arr in self.stats.items():
            if arr.shape != self.params.shape[:2]:
                raise ValueError(f"stats[{name}] shape mismatch")

    @property
    def n_chains(self) -> int:
        return self.params.shape[0]

    @property
    def n_draws(self) -> int:
        return self.params.shape[1]

    def index(self, name: str) -> int:
        return self.param_names.index(name)

    def get(self, name: str) -> np.ndarray:
        return self.params[:, :, self.index(name)]

    def pooled(self, name: str) -> np.ndarray:
        return self.get(name).reshape(-1)

    @property
    def divergence_count(self) -> int:
        return int(np.sum(self.stats["divergent"]))

    @property
    def divergence_rate(self) -> float:
        return self.divergence_count / (self.n_chains * self.n_draws)

    def write_ndjson(self, path) -> None:
        with open(path, "w") as fh:
            for c in range(self.n_chains):
                for d in range(self.n_draws):
                    rec = {
                        "chain": c,
                        "draw": d,
                        "params": {name: float(self.params[c, d, j])
                                   for j, name in enumerate(self.param_names)},
                        "stats": {
                            "divergent": bool(self.stats["divergent"][c, d]),
                            "tree_depth": int(self.stats["tree_depth"][c, d]),
                            "accept": float(self.stats["accept"][c, d]),
                            "energy": float(self.stats["energy"][c, d]),
                        },
                    }
                    fh.write(json.dumps(rec) + "\n")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("chain", "draw") + tuple(self.param_names)
                            + STATS_FIELDS)
            for c in range(self.n_chains):
                for d in range(self.n_draws):
                    writer.writerow(
                        [c, d]
                        + [repr(float(v)) for v in self.params[c, d]]
                        + [int(self.stats["divergent"][c, d]),
                           int(self.stats["tree_depth"][c, d]),
                           repr(float(self.stats["accept"][c, d])),
                           repr(float(self.stats["energy"][c, d]))])

    @classmethod
    def read_ndjson(cls, path) -> "PosteriorDraws":
        by_chain = {}
        names = None
        with open(path) as fh:
            for line in fh:
                rec = json.loads(line)
                if names is None:
                    names = tuple(rec["params"].keys())
                by_chain.setdefault(rec["chain"], []).append(rec)
        if not by_chain:
            raise ValueError(f"{path}: no draws")
        chains = sorted(by_chain)
        n_draws = len(by_chain[chains[0]])
        params = np.empty((len(chains), n_draws, len(names)))
        stats = {
            "divergent": np.zeros((len(chains), n_draws), dtype=bool),
            "tree_depth": np.zeros((len(chains), n_draws), dtype=int),
            "accept": np.zeros((len(chains), n_draws)),
            "energy": np.zeros((len(chains), n_draws)),
        }
        for ci, c in enumerate(chains):
            recs = sorted(by_chain[c], key=lambda r: r["draw"])
            if len(recs) != n_draws:
                raise ValueError(f"{path}: ragged chains")
            for d, rec in enumerate(recs):
                params[ci, d] = [rec["params"][n] for n in names]
                for k in STATS_FIELDS:
                    stats[k][ci, d] = rec["stats"][k]
        return cls(param_names=names, params=params, stats=stats)


def sample(logp_and_grad, space, cfg: NutsConfig) -> PosteriorDraws:
    """Run NUTS chains and return constrained named draws.

    ``logp_and_grad`` maps an unconstrained vector to (logp, grad);
    ``space`` supplies ``dim``, ``flat_names`` and ``constrain_flat``.
    Chains run in worker processes when available (override the count with
    the PROMBAYES_CHAIN_PROCS environment variable); results are identical
    either way.
    """
    dim = space.dim
    jobs = [(logp_and_grad, dim, cfg, chain) for chain in range(cfg.chains)]
    procs = _resolve_procs(cfg.chains)
    if procs > 1:
        import multiprocessing

        try:
            ctx = multiprocessing.get_context("fork")
        except ValueError:
            ctx = None
        if ctx is not None:
            with ProcessPoolExecutor(procs, mp_context=ctx) as pool:
                results = list(pool.map(_run_chain_star, jobs))
        else:
            results = [_run_chain(*job) for job in jobs]
    else:
        results = [_run_chain(*job) for job in jobs]

    names = tuple(space.flat_names)
    params = np.empty((cfg.chains, cfg.samples, len(names)))
    stats = {
        "divergent": np.empty((cfg.chains, cfg.samples), dtype=bool),
        "tree_depth": np.empty((cfg.chains, cfg.samples), dtype=int),
        "accept": np.empty((cfg.chains, cfg.samples)),
        "energy": np.empty((cfg.chains, cfg.samples)),
        "energy_error": np.empty((cfg.chains, cfg.samples)),
        "step_size": np.empty((cfg.chains, cfg.samples)),
    }
    adaptation = []
    for c, (draws, chain_stats, adapt) in enumerate(results):
        for d in range(cfg.samples):
            params[c, d] = space.constrain_flat(draws[d])
        for k in stats:
            stats[k][c] = chain_stats[k]
        adaptation.append(adapt)
    return PosteriorDraws(param_names=names, params=params, stats=stats,
                          adaptation=adaptation, config=cfg)
