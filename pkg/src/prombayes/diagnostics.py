"""Convergence diagnostics, HDR summaries, posterior predictive checks,
and the naive frequentist baseline.

R-hat is the classic split-chain potential scale reduction (each chain cut
in half, W/B over the half-chains); the paper-era <= 1.005 convention
predates rank-normalized variants, so the classic form is what reports
check.  Effective sample size is the autocorrelation-based bulk estimate:
rank-normalize the pooled draws, FFT autocovariances per chain, combine,
and truncate with Geyer's initial monotone sequence.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .cohort import ALL_OUTCOMES, CONTINUOUS_OUTCOMES, PreparedData
from .model import ModelSpec, poscon_category_probs
from .ordinal import K_CATEGORIES

PPC_CHANNELS = CONTINUOUS_OUTCOMES + ("cs", "poscon")


# -- convergence ---------------------------------------------------------------


def _split_halves(chains: np.ndarray) -> np.ndarray:
    m, n = chains.shape
    half = n // 2
    return np.vstack([chains[:, :half], chains[:, n - half:]])


def split_rhat(chains) -> float:
    """Split-chain potential scale reduction factor.

    ``chains`` is (n_chains, n_draws); each chain is split in half and the
    2m half-chains enter the classic sqrt(((n-1)/n W + B/n) / W).
    """
    x = np.asarray(chains, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 4:
        raise ValueError("split_rhat needs >= 2 chains of >= 4 draws")
    halves = _split_halves(x)
    n = halves.shape[1]
    w = float(np.mean(np.var(halves, axis=1, ddof=1)))
    if w == 0.0:
        raise ValueError("zero within-chain variance")
    b = n * float(np.var(np.mean(halves, axis=1), ddof=1))
    var_hat = (n - 1) / n * w + b / n
    return float(np.sqrt(var_hat / w))


def _norm_ppf(p):
    """Acklam's rational approximation to the standard normal quantile."""
    p = np.asarray(p, dtype=float)
    a = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
         1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
    b = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
         6.680131188771972e+01, -1.328068155288572e+01)
    c = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
         -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
    d = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
         3.754408661907416e+00)
    plow = 0.02425
    out = np.empty_like(p)

    lo = p < plow
    hi = p > 1 - plow
    mid = ~(lo | hi)

    if np.any(mid):
        q = p[mid] - 0.5
        r = q * q
        num = ((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]
        den = (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0)
        out[mid] = num * q / den
    if np.any(lo):
        q = np.sqrt(-2.0 * np.log(p[lo]))
        num = ((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]
        den = ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
        out[lo] = num / den
    if np.any(hi):
        q = np.sqrt(-2.0 * np.log(1.0 - p[hi]))
        num = ((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]
        den = ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0)
        out[hi] = -num / den
    return out


def _rank_normalize(chains: np.ndarray) -> np.ndarray:
    flat = chains.reshape(-1)
    order = np.argsort(flat, kind="mergesort")
    ranks = np.empty_like(flat)
    ranks[order] = np.arange(1, flat.size + 1, dtype=float)
    # midranks for ties
    uniq, inv, counts = np.unique(flat, return_inverse=True, return_counts=True)
    if uniq.size != flat.size:
        cum = np.cumsum(counts)
        mid = cum - counts + (counts + 1) / 2.0
        ranks = mid[inv]
    z = _norm_ppf((ranks - 0.375) / (flat.size + 0.25))
    return z.reshape(chains.shape)


def _autocov(x: np.ndarray) -> np.ndarray:
    n = x.size
    xc = x - np.mean(x)
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, nfft)
    return np.fft.irfft(f * np.conj(f), nfft)[:n] / n


def ess_bulk(chains) -> float:
    """Bulk effective sample size on rank-normalized pooled chains."""
    x = np.asarray(chains, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 4:
        raise ValueError("ess_bulk needs >= 2 chains of >= 4 draws")
    if float(np.var(x)) == 0.0:
        raise ValueError("degenerate (constant) chains")
    z = _rank_normalize(x)
    m, n = z.shape
    acovs = np.vstack([_autocov(row) for row in z])
    w = float(np.mean(acovs[:, 0] * n / (n - 1)))
    var_plus = w * (n - 1) / n + float(np.var(np.mean(z, axis=1), ddof=1))
    if var_plus == 0.0:
        raise ValueError("degenerate variance")
    mean_acov = np.mean(acovs, axis=0)
    rho = np.empty(n)
    rho[0] = 1.0
    rho[1:] = 1.0 - (w - mean_acov[1:]) / var_plus

    # Geyer: sum positive, monotone-capped pair sums.
    pairs = []
    k = 0
    while 2 * k + 1 < n:
        p = rho[2 * k] + rho[2 * k + 1]
        if p <= 0.0:
            break
        pairs.append(p)
        k += 1
    for i in range(1, len(pairs)):
        pairs[i] = min(pairs[i], pairs[i - 1])
    tau = max(-1.0 + 2.0 * sum(pairs), 1.0 / (m * n))
    return float(m * n / tau)


def hdr(samples, mass: float = 0.95):
    """Narrowest contiguous interval holding ceil(mass * N) sorted samples."""
    x = np.sort(np.asarray(samples, dtype=float).reshape(-1))
    if x.size < 20:
        raise ValueError("hdr needs at least 20 samples")
    if not 0.0 < mass < 1.0:
        raise ValueError("mass must be in (0, 1)")
    k = int(math.ceil(mass * x.size))
    k = min(max(k, 2), x.size)
    widths = x[k - 1:] - x[:x.size - k + 1]
    i = int(np.argmin(widths))
    return float(x[i]), float(x[i + k - 1])


def ks_distance(samples, cdf) -> float:
    """Kolmogorov-Smirnov distance between a sample and an analytic CDF."""
    x = np.sort(np.asarray(samples, dtype=float).reshape(-1))
    n = x.size
    f = np.asarray(cdf(x), dtype=float)
    upper = np.max(np.arange(1, n + 1) / n - f)
    lower = np.max(f - np.arange(0, n) / n)
    return float(max(upper, lower))


# -- fit report ----------------------------------------------------------------


@dataclass
class FitReport:
    parameters: dict           # name -> summary dict
    divergence_count: int
    divergence_rate: float
    max_tree_depth_hits: int
    hdr_mass: float

    @property
    def max_rhat(self):
        vals = [v["rhat"] for v in self.parameters.values() if v["rhat"] is not None]
        return max(vals) if vals else None

    def to_dict(self) -> dict:
        return {
            "hdr_mass": self.hdr_mass,
            "divergence_count": self.divergence_count,
            "divergence_rate": self.divergence_rate,
            "max_tree_depth_hits": self.max_tree_depth_hits,
            "max_rhat": self.max_rhat,
            "parameters": self.parameters,
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def fit_report(draws, mass: float = 0.95) -> FitReport:
    """Per-parameter convergence and interval summary of a draw table."""
    if not 0.0 < mass < 1.0:
        raise ValueError("mass must be in (0, 1)")
    params = {}
    for name in draws.param_names:
        x = draws.get(name)
        pooled = x.reshape(-1)
        try:
            rhat = split_rhat(x) if x.shape[0] >= 2 else None
        except ValueError:
            rhat = None
        try:
            ess = ess_bulk(x) if x.shape[0] >= 2 else None
        except ValueError:
            ess = None
        lo, hi = hdr(pooled, mass)
        pd = max(float(np.mean(pooled > 0)), float(np.mean(pooled < 0)))
        params[name] = {
            "mean": float(np.mean(pooled)),
            "sd": float(np.std(pooled, ddof=1)),
            "rhat": rhat,
            "ess_bulk": ess,
            "hdr_lo": lo,
            "hdr_hi": hi,
            "prob_direction": pd,
        }
    depth = draws.stats["tree_depth"]
    max_depth = draws.config.max_tree_depth if draws.config else int(depth.max())
    return FitReport(
        parameters=params,
        divergence_count=draws.divergence_count,
        divergence_rate=draws.divergence_rate,
        max_tree_depth_hits=int(np.sum(depth >= max_depth)),
        hdr_mass=mass,
    )


# -- coefficient summaries (forest-plot data) ------------------------------------


def beta_draws(draws, outcome: str, family: str) -> np.ndarray:
    """Recombine one hierarchical coefficient from its non-centered blocks."""
    return (draws.get(f"mu[{family}]")
            + draws.get(f"sigma[{family}]") * draws.get(f"z[{outcome}][{family}]"))


def forest_rows(draws, mass: float = 0.95, spec: ModelSpec = None):
    """(name, mean, hdr_lo, hdr_hi, significant) per tracked coefficient.

    Significance here means the HDR excludes zero, matching how the fitted
    intervals are read clinically.
    """
    if not 0.0 < mass < 1.0:
        raise ValueError("mass must be in (0, 1)")
    spec = spec or ModelSpec()
    rows = []
    for out, fam in spec.coefficient_ids():
        b = beta_draws(draws, out, fam).reshape(-1)
        lo, hi = hdr(b, mass)
        rows.append({
            "parameter": f"beta[{out}][{fam}]",
            "mean": float(np.mean(b)),
            "hdr_lo": lo,
            "hdr_hi": hi,
            "significant": not (lo <= 0.0 <= hi),
        })
    return rows


def write_forest_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("parameter", "mean", "hdr_lo", "hdr_hi", "significant"))
        for r in rows:
            writer.writerow((r["parameter"], repr(r["mean"]), repr(r["hdr_lo"]),
                             repr(r["hdr_hi"]), int(r["significant"])))


# -- posterior predictive check ---------------------------------------------------


@dataclass
class PPCResult:
    """Replicated channels (original scale) next to the observed ones."""

    observed: dict                 # channel -> 1d array
    replicates: dict               # channel -> (n_rep, len(observed)) array
    clamped: int                   # inverse-transform range violations
    n_rep: int

    def replicate_means(self, channel: str) -> np.ndarray:
        return np.mean(self.replicates[channel], axis=1)

    def replicate_sds(self, channel: str) -> np.ndarray:
        return np.std(self.replicates[channel], axis=1, ddof=1)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("channel", "replicate", "bin_lo", "bin_hi", "count"))
            for channel in PPC_CHANNELS:
                obs = self.observed[channel]
                edges = _ppc_bin_edges(channel, obs)
                for name, values in itertools.chain(
                        [("observed", obs)],
                        ((str(i), rep) for i, rep in
                         enumerate(self.replicates[channel]))):
                    clipped = np.clip(values, edges[0], edges[-1])
                    counts, _ = np.histogram(clipped, bins=edges)
                    for j, cnt in enumerate(counts):
                        writer.writerow((channel, name, repr(float(edges[j])),
                                         repr(float(edges[j + 1])), int(cnt)))


def _ppc_bin_edges(channel: str, observed: np.ndarray) -> np.ndarray:
    if channel == "poscon":
        return np.arange(-0.5, K_CATEGORIES + 0.5, 1.0)
    if channel == "cs":
        return np.array([-0.5, 0.5, 1.5])
    lo, hi = float(np.min(observed)), float(np.max(observed))
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    return np.linspace(lo, hi, 13)


def posterior_predictive(draws, data: PreparedData, n_rep: int = 200,
                         seed: int = 0, spec: ModelSpec = None) -> PPCResult:
    """Simulate the six observed channels from evenly thinned posterior draws.

    Replicates use parameters and covariates only: the latent score is drawn
    from its imputation pmf for every row (observed values never leak in),
    outcomes are drawn on the transformed scale and mapped back through the
    recorded transforms.  Inverse-transform range violations are clamped to
    the boundary and counted.
    """
    spec = spec or ModelSpec()
    total = draws.n_chains * draws.n_draws
    if not 1 <= n_rep <= total:
        raise ValueError(f"n_rep must be in 1..{total}")
    idx = np.round(np.linspace(0, total - 1, n_rep)).astype(int)
    pooled = draws.params.reshape(total, -1)
    names = draws.param_names
    rng = np.random.Generator(np.random.Philox(key=seed & 0xFFFFFFFFFFFFFFFF))

    obs_idx = data.poscon_obs_idx
    observed = {}
    for out in CONTINUOUS_OUTCOMES:
        present = data.y_mask[out] > 0
        observed[out] = data.transforms[out].invert(data.y[out][present])
    observed["cs"] = data.cs.copy()
    observed["poscon"] = data.poscon_values[obs_idx].astype(float)

    reps = {ch: np.empty((n_rep, observed[ch].size)) for ch in PPC_CHANNELS}
    clamped = 0

    for r, row_i in enumerate(idx):
        params = dict(zip(names, pooled[row_i]))
        probs = poscon_category_probs(data, params)
        u = rng.random(data.n)
        k_rep = np.sum(u[:, None] > np.cumsum(probs, axis=1), axis=1)
        k_rep = np.clip(k_rep, 0, K_CATEGORIES - 1)
        pc_dev = k_rep.astype(float) - data.poscon_mean

        for out in CONTINUOUS_OUTCOMES:
            pred = _predictor_values(data, spec, params, out, pc_dev)
            z = rng.normal(pred, params[f"sigma_out[{out}]"])
            tr = data.transforms[out]
            y, n_clamped = _invert_clamped(z, tr)
            clamped += n_clamped
            present = data.y_mask[out] > 0
            reps[out][r] = y[present]

        pred_cs = _predictor_values(data, spec, params, "cs", pc_dev)
        p_cs = 1.0 / (1.0 + np.exp(-pred_cs))
        reps["cs"][r] = (rng.random(data.n) < p_cs).astype(float)
        reps["poscon"][r] = k_rep[obs_idx].astype(float)

    return PPCResult(observed=observed, replicates=reps, clamped=clamped,
                     n_rep=n_rep)


def _predictor_values(data: PreparedData, spec: ModelSpec, params: dict,
                      outcome: str, pc_dev: np.ndarray) -> np.ndarray:
    from .model import beta_value

    cols = data.design_columns[outcome]
    bvec = np.array([beta_value(params, outcome, fam) for fam in cols])
    return data.design[outcome] @ bvec + beta_value(params, outcome, "poscon") * pc_dev


def _invert_clamped(z: np.ndarray, tr) -> tuple:
    if tr.lam == 0.0:
        return np.exp(z * tr.scale + tr.center), 0
    base = tr.lam * (z * tr.scale + tr.center) + 1.0
    bad = base <= 0.0
    if np.any(bad):
        base = np.where(bad, 1e-12, base)
    return np.power(base, 1.0 / tr.lam), int(np.sum(bad))


# -- naive frequentist baseline ----------------------------------------------------


def _midranks(pooled: np.ndarray) -> np.ndarray:
    uniq, inv, counts = np.unique(pooled, return_inverse=True, return_counts=True)
    cum = np.cumsum(counts)
    mid = cum - counts + (counts + 1) / 2.0
    return mid[inv]


def _norm_sf2(z: float) -> float:
    """Two-sided tail probability of a standard normal statistic."""
    return math.erfc(abs(z) / math.sqrt(2.0))


def mann_whitney_u(group_a, group_b):
    """Mann-Whitney U with midrank ties; returns (U_a, two-sided p).

    Exact p by enumerating rank assignments when the combined sample has at
    most 12 untied observations; otherwise a normal approximation with tie
    and continuity corrections.
    """
    a = np.asarray(group_a, dtype=float).reshape(-1)
    b = np.asarray(group_b, dtype=float).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise ValueError("both groups must be nonempty")
    na, nb = a.size, b.size
    n = na + nb
    pooled = np.concatenate([a, b])
    ranks = _midranks(pooled)
    u_a = float(np.sum(ranks[:na]) - na * (na + 1) / 2.0)

    has_ties = np.unique(pooled).size != n
    if n <= 12 and not has_ties:
        le = ge = 0
        count = 0
        for combo in itertools.combinations(range(1, n + 1), na):
            u = sum(combo) - na * (na + 1) / 2.0
            le += u <= u_a + 1e-9
            ge += u >= u_a - 1e-9
            count += 1
        p = 2.0 * min(le, ge) / count
        return u_a, float(min(p, 1.0))

    mu = na * nb / 2.0
    _, counts = np.unique(pooled, return_counts=True)
    tie_term = float(np.sum(counts.astype(float) ** 3 - counts))
    var = na * nb / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    if var <= 0.0:
        return u_a, 1.0
    z = max(abs(u_a - mu) - 0.5, 0.0) / math.sqrt(var)
    return u_a, float(min(_norm_sf2(z), 1.0))


def two_proportion_test(group_a, group_b):
    """Pooled two-proportion z-test; returns (z, two-sided p)."""
    a = np.asarray(group_a, dtype=float).reshape(-1)
    b = np.asarray(group_b, dtype=float).reshape(-1)
    if a.size == 0 or b.size == 0:
        raise ValueError("both groups must be nonempty")
    pa, pb = float(np.mean(a)), float(np.mean(b))
    pool = float(np.mean(np.concatenate([a, b])))
    se2 = pool * (1.0 - pool) * (1.0 / a.size + 1.0 / b.size)
    if se2 <= 0.0:
        return 0.0, 1.0
    z = (pa - pb) / math.sqrt(se2)
    return float(z), float(min(_norm_sf2(z), 1.0))


def baseline_tests(cohort) -> dict:
    """The naive by-arm analysis: Mann-Whitney per time outcome, CS by
    two-proportion test, ignoring the assignment mechanism entirely."""
    from .cohort import OUTCOME_FIELDS

    pit = [r for r in cohort.records if r.treatment == "PIT"]
    miso = [r for r in cohort.records if r.treatment == "MISO"]
    if not pit or not miso:
        raise ValueError("baseline needs both treatment arms nonempty")
    out = {"n_pit": len(pit), "n_miso": len(miso), "outcomes": {}}
    for name, fld in OUTCOME_FIELDS.items():
        a = [getattr(r, fld) for r in pit if getattr(r, fld) is not None]
        b = [getattr(r, fld) for r in miso if getattr(r, fld) is not None]
        u, p = mann_whitney_u(a, b)
        out["outcomes"][name] = {"U": u, "p": p, "n_pit": len(a), "n_miso": len(b)}
    z, p = two_proportion_test([float(r.cs) for r in pit],
                               [float(r.cs) for r in miso])
    out["outcomes"]["cs"] = {"z": z, "p": p, "n_pit": len(pit), "n_miso": len(miso)}
    return out
