"""Joint log-density of the hierarchical outcome model.

The generative structure, as a function of the unconstrained parameter
vector:

* imputation block: two standard-normal weights (nullip, treatment) and a
  Cauchy(0,1) intercept feed a per-row ordinal predictor eta; an anchored
  cutpoint set (uniform anchor on (0,4), Dirichlet(1) simplex) turns eta
  into category probabilities for the Position+Consistency score;
* hierarchical coefficients: every covariate family carries a Gaussian
  location and HalfNormal(1) scale hyperprior, and each outcome-specific
  coefficient is non-centered, beta = mu + sigma * z with z ~ N(0,1);
* likelihoods: four Gaussian outcomes on the transformed/standardized
  scale with HalfNormal(1) noise scales, and a Bernoulli-logit Cesarean
  outcome.  Rows with missing Position+Consistency are marginalized exactly
  over the five categories (log-sum-exp of the per-category row
  likelihood), the Rao-Blackwellized form of drawing the latent score.

All positivity/interval constraints live in the parameter transforms, so
the density is defined (and differentiable) on all of R^dim.
"""

from __future__ import annotations

import json
import math

import numpy as np

from . import autodiff as ad
from .cohort import (
    ALL_OUTCOMES,
    CONTINUOUS_OUTCOMES,
    EXTRA_COVARIATES,
    SHARED_COVARIATES,
    PreparedData,
)
from .ordinal import K_CATEGORIES, ordered_logistic_logpmf

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
LOG_HALF_NORMAL_CONST = 0.5 * math.log(2.0 / math.pi)
LOG_DIRICHLET1_CONST = math.lgamma(K_CATEGORIES)  # Dirichlet(1) is uniform

EXTRA_FAMILIES = ("gbs", "nullip", "epidural", "fgr", "bmi", "ga")


class ModelSpec:
    """Covariate -> outcome wiring plus the hyperprior family map."""

    def __init__(self, shared_covariates=SHARED_COVARIATES,
                 extra_covariates=None):
        self.shared_covariates = tuple(shared_covariates)
        self.extra_covariates = {
            out: tuple(v) for out, v in (extra_covariates or EXTRA_COVARIATES).items()
        }
        if set(self.extra_covariates) != set(ALL_OUTCOMES):
            raise ValueError("extra_covariates must cover exactly the five outcomes")
        for out, extras in self.extra_covariates.items():
            overlap = set(extras) & set(self.shared_covariates)
            if overlap:
                raise ValueError(
                    f"{out}: {sorted(overlap)} cannot be both shared and extra")

    def covariates(self, outcome: str):
        if outcome not in self.extra_covariates:
            raise KeyError(f"unknown outcome {outcome!r}")
        return self.shared_covariates + self.extra_covariates[outcome]

    @property
    def families(self):
        extras = []
        for fam in EXTRA_FAMILIES:
            if any(fam in v for v in self.extra_covariates.values()):
                extras.append(fam)
        return self.shared_covariates + tuple(extras)

    def family_members(self, family: str):
        return tuple(out for out in ALL_OUTCOMES
                     if family in self.covariates(out))

    @property
    def hyperprior_sharing(self):
        return {fam: tuple(f"z[{out}][{fam}]" for out in self.family_members(fam))
                for fam in self.families}

    def coefficient_ids(self):
        return tuple((out, fam) for out in ALL_OUTCOMES
                     for fam in self.covariates(out))

    def to_dict(self) -> dict:
        return {
            "outcomes": list(ALL_OUTCOMES),
            "shared_covariates": list(self.shared_covariates),
            "extra_covariates": {o: list(v) for o, v in self.extra_covariates.items()},
            "hyperprior_sharing": {f: list(v) for f, v in self.hyperprior_sharing.items()},
        }

    def to_json(self, indent=2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)


class ParameterSpace:
    """Named unconstrained layout with constrained <-> unconstrained maps.

    Unconstrained layout: [aleph_nullip, aleph_pit, b_pc, phi (scaled
    logit), 4 stick-breaking coordinates, family locations, family
    log-scales, non-centered coefficient scores, outcome log noise scales].
    """

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        fams = spec.families
        coef_ids = spec.coefficient_ids()
        self.families = fams
        self.coef_ids = coef_ids

        self.i_aleph_nullip = 0
        self.i_aleph_pit = 1
        self.i_b_pc = 2
        self.i_phi = 3
        self.sl_simplex = slice(4, 8)
        self.sl_mu = slice(8, 8 + len(fams))
        self.sl_log_sigma = slice(8 + len(fams), 8 + 2 * len(fams))
        z0 = 8 + 2 * len(fams)
        self.sl_z = slice(z0, z0 + len(coef_ids))
        s0 = z0 + len(coef_ids)
        self.sl_log_sigma_out = slice(s0, s0 + len(CONTINUOUS_OUTCOMES))
        self.dim = s0 + len(CONTINUOUS_OUTCOMES)

        self.family_index = {f: i for i, f in enumerate(fams)}
        self.coef_index = {cid: i for i, cid in enumerate(coef_ids)}
        self.flat_names = tuple(
            ["aleph_nullip", "aleph_pit", "b_pc", "phi"]
            + [f"p[{k}]" for k in range(K_CATEGORIES)]
            + [f"mu[{f}]" for f in fams]
            + [f"sigma[{f}]" for f in fams]
            + [f"z[{out}][{fam}]" for out, fam in coef_ids]
            + [f"sigma_out[{out}]" for out in CONTINUOUS_OUTCOMES]
        )
        self.con_dim = len(self.flat_names)

    def constrain_flat(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.shape != (self.dim,):
            raise ValueError(f"expected unconstrained vector of length {self.dim}")
        c = np.empty(self.con_dim)
        c[0:3] = u[0:3]
        c[3] = 4.0 * _sigmoid(u[self.i_phi])
        c[4:9] = _stick_forward(u[self.sl_simplex])
        nf = len(self.families)
        c[9:9 + nf] = u[self.sl_mu]
        c[9 + nf:9 + 2 * nf] = np.exp(u[self.sl_log_sigma])
        z_lo = 9 + 2 * nf
        c[z_lo:z_lo + len(self.coef_ids)] = u[self.sl_z]
        c[z_lo + len(self.coef_ids):] = np.exp(u[self.sl_log_sigma_out])
        return c

    def unconstrain_flat(self, c: np.ndarray) -> np.ndarray:
        c = np.asarray(c, dtype=float)
        if c.shape != (self.con_dim,):
            raise ValueError(f"expected constrained vector of length {self.con_dim}")
        u = np.empty(self.dim)
        u[0:3] = c[0:3]
        u[self.i_phi] = _logit(c[3] / 4.0)
        u[self.sl_simplex] = _stick_inverse(c[4:9])
        nf = len(self.families)
        u[self.sl_mu] = c[9:9 + nf]
        u[self.sl_log_sigma] = np.log(c[9 + nf:9 + 2 * nf])
        z_lo = 9 + 2 * nf
        u[self.sl_z] = c[z_lo:z_lo + len(self.coef_ids)]
        u[self.sl_log_sigma_out] = np.log(c[z_lo + len(self.coef_ids):])
        return u

    def named(self, u: np.ndarray) -> dict:
        return dict(zip(self.flat_names, self.constrain_flat(u)))


def _sigmoid(x):
    z = np.exp(-np.abs(x))
    return np.where(np.asarray(x) >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def _logit(q):
    return np.log(q) - np.log1p(-q)


def _stick_forward(u):
    p = np.empty(K_CATEGORIES)
    rem = 1.0
    for j in range(K_CATEGORIES - 1):
        z = _sigmoid(u[j] - math.log(K_CATEGORIES - 1 - j))
        p[j] = rem * z
        rem = rem * (1.0 - z)
    p[-1] = rem
    return p


def _stick_inverse(p):
    u = np.empty(K_CATEGORIES - 1)
    rem = 1.0
    for j in range(K_CATEGORIES - 1):
        z = p[j] / rem
        u[j] = _logit(z) + math.log(K_CATEGORIES - 1 - j)
        rem -= p[j]
    return u


def _stick_break(u_vec):
    """Stick-breaking simplex with log-Jacobian; Var- and array-capable.

    Returns (list of 5 scalar category probabilities, log |J|).
    """
    probs = []
    rem = 1.0
    log_jac = 0.0
    for j in range(K_CATEGORIES - 1):
        z = ad.sigmoid(u_vec[j] - math.log(K_CATEGORIES - 1 - j))
        probs.append(rem * z)
        # dp_j/du_j = rem * z * (1-z); the triangular Jacobian determinant
        # is the product of these diagonal terms.
        log_jac = log_jac + ad.log(z) + ad.log(1.0 - z) + _safe_log(rem)
        rem = rem * (1.0 - z)
    probs.append(rem)
    return probs, log_jac


def _safe_log(x):
    if isinstance(x, ad.Var):
        return ad.log(x)
    return math.log(x)


def _std_normal_lp(x, size):
    return -0.5 * ad.vsum(x * x) - size * HALF_LOG_2PI


def _half_normal_lp(t, size):
    """HalfNormal(1) on exp(t), including the log-transform Jacobian."""
    return (size * LOG_HALF_NORMAL_CONST
            - 0.5 * ad.vsum(ad.exp(2.0 * t)) + ad.vsum(t))


class PosteriorDensity:
    """Callable joint log-density with gradient; picklable for chain workers.

    ``__call__`` returns ``(logp, grad)`` via a fresh reverse-mode tape;
    ``value`` runs the identical computation on plain arrays (bitwise equal
    to the tape's forward value).
    """

    def __init__(self, data: PreparedData, spec: ModelSpec = None,
                 space: ParameterSpace = None):
        self.spec = spec or ModelSpec()
        self.space = space or ParameterSpace(self.spec)
        self.data = data

        obs = data.poscon_obs_idx
        mis = data.poscon_mis_idx
        self.n_obs = obs.size
        self.n_mis = mis.size

        # Gather maps that recombine all non-centered coefficients in one
        # vectorized beta = mu + sigma * z over the coefficient axis.
        sp = self.space
        self.mu_idx = np.array([sp.sl_mu.start + sp.family_index[fam]
                                for _, fam in sp.coef_ids])
        self.lsig_idx = np.array([sp.sl_log_sigma.start + sp.family_index[fam]
                                  for _, fam in sp.coef_ids])
        self.col_idx = {out: np.array([sp.coef_index[(out, fam)]
                                       for fam in data.design_columns[out]])
                        for out in ALL_OUTCOMES}
        self.pc_pos = {out: sp.coef_index[(out, "poscon")]
                       for out in ALL_OUTCOMES}

        self.X_obs, self.X_mis = {}, {}
        self.y_obs, self.y_mis, self.w_obs, self.w_mis = {}, {}, {}, {}
        for out in ALL_OUTCOMES:
            self.X_obs[out] = data.design[out][obs]
            self.X_mis[out] = data.design[out][mis]
        for out in CONTINUOUS_OUTCOMES:
            self.y_obs[out] = data.y[out][obs]
            self.y_mis[out] = data.y[out][mis]
            self.w_obs[out] = data.y_mask[out][obs]
            self.w_mis[out] = data.y_mask[out][mis]
        cs_sign = 2.0 * data.cs - 1.0
        self.cs_sign_obs = cs_sign[obs]
        self.cs_sign_mis = cs_sign[mis]

        self.pc_dev_obs = data.poscon_values[obs].astype(float) - data.poscon_mean
        self.k_dev = [float(k) - data.poscon_mean for k in range(K_CATEGORIES)]
        self.k_dev_col = np.array(self.k_dev).reshape(K_CATEGORIES, 1)

        # Observed rows grouped by category: the ordinal likelihood for a
        # group is one vectorized branch evaluation.
        self.obs_groups = []
        kv = data.poscon_values[obs]
        for k in range(K_CATEGORIES):
            sel = np.nonzero(kv == k)[0]
            if sel.size:
                self.obs_groups.append(
                    (k, data.nullip_raw[obs][sel], data.pit_raw[obs][sel]))
        self.nullip_mis = data.nullip_raw[mis]
        self.pit_mis = data.pit_raw[mis]

    # -- public evaluation -------------------------------------------------

    def __call__(self, theta):
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return ad.grad(self._build, theta)

    def value(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.space.dim,):
            raise ValueError(f"expected parameter vector of length {self.space.dim}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("non-finite parameter vector")
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return float(self._build(theta))

    # -- density construction (shared by tape and plain paths) --------------

    def _build(self, u):
        sp = self.space
        an = u[sp.i_aleph_nullip]
        apit = u[sp.i_aleph_pit]
        b_pc = u[sp.i_b_pc]
        phi_t = u[sp.i_phi]
        mu = u[sp.sl_mu]
        log_sig = u[sp.sl_log_sigma]
        z = u[sp.sl_z]
        log_sig_out = u[sp.sl_log_sigma_out]

        probs, stick_jac = _stick_break(u[sp.sl_simplex])
        lp = self._prior(an, apit, b_pc, phi_t, mu, log_sig, z, log_sig_out,
                         stick_jac)
        phi = 4.0 * ad.sigmoid(phi_t)
        cuts = _anchored_cutpoints(probs, phi)

        # Ordinal likelihood of the observed scores.
        for k, nullip_g, pit_g in self.obs_groups:
            eta_g = an * nullip_g + apit * pit_g + b_pc
            lp = lp + ad.vsum(ordered_logistic_logpmf(k, eta_g, cuts))

        # All coefficients at once: beta = mu[family] + sigma[family] * z.
        beta_vec = (ad.take(u, self.mu_idx)
                    + ad.exp(ad.take(u, self.lsig_idx)) * u[sp.sl_z])

        # Fully observed rows: one Gaussian/Bernoulli block per outcome.
        for i_out, out in enumerate(CONTINUOUS_OUTCOMES):
            t = u[sp.sl_log_sigma_out.start + i_out]
            pred = (ad.matvec(self.X_obs[out], ad.take(beta_vec, self.col_idx[out]))
                    + beta_vec[self.pc_pos[out]] * self.pc_dev_obs)
            lp = lp + _gaussian_block(self.y_obs[out], pred, self.w_obs[out], t)
        pred_cs = (ad.matvec(self.X_obs["cs"], ad.take(beta_vec, self.col_idx["cs"]))
                   + beta_vec[self.pc_pos["cs"]] * self.pc_dev_obs)
        lp = lp + ad.vsum(ad.log_sigmoid(self.cs_sign_obs * pred_cs))

        # Missing-score rows: exact five-category mixture, batched as a
        # (category, row) matrix.
        if self.n_mis:
            eta_m = an * self.nullip_mis + apit * self.pit_mis + b_pc
            mix = ad.stack([ordered_logistic_logpmf(k, eta_m, cuts)
                            for k in range(K_CATEGORIES)])
            for i_out, out in enumerate(CONTINUOUS_OUTCOMES):
                t = u[sp.sl_log_sigma_out.start + i_out]
                base = ad.matvec(self.X_mis[out],
                                 ad.take(beta_vec, self.col_idx[out]))
                pred = base + beta_vec[self.pc_pos[out]] * self.k_dev_col
                mix = mix + _gaussian_rows(self.y_mis[out], pred,
                                           self.w_mis[out], t)
            base_cs = ad.matvec(self.X_mis["cs"],
                                ad.take(beta_vec, self.col_idx["cs"]))
            pred_cs_k = base_cs + beta_vec[self.pc_pos["cs"]] * self.k_dev_col
            mix = mix + ad.log_sigmoid(self.cs_sign_mis * pred_cs_k)
            lp = lp + ad.vsum(ad.logsumexp(mix, axis=0))
        return lp

    def _prior(self, an, apit, b_pc, phi_t, mu, log_sig, z, log_sig_out,
               stick_jac):
        lp = _std_normal_lp(an, 1) + _std_normal_lp(apit, 1)
        lp = lp + (-math.log(math.pi) - ad.log1p(b_pc * b_pc))
        # Uniform(0,4) anchor through a scaled logit; the log 4 of the
        # density and of the Jacobian cancel.
        lp = lp + ad.log_sigmoid(phi_t) + ad.log_sigmoid(-phi_t)
        lp = lp + LOG_DIRICHLET1_CONST + stick_jac
        lp = lp + _std_normal_lp(mu, len(self.space.families))
        lp = lp + _half_normal_lp(log_sig, len(self.space.families))
        lp = lp + _std_normal_lp(z, len(self.space.coef_ids))
        lp = lp + _half_normal_lp(log_sig_out, len(CONTINUOUS_OUTCOMES))
        return lp

def _anchored_cutpoints(probs, phi):
    cuts = []
    cum = probs[0]
    for k in range(K_CATEGORIES - 1):
        cuts.append(phi + ad.log(cum) - ad.log1p(-cum))
        if k + 1 < K_CATEGORIES - 1:
            cum = cum + probs[k + 1]
    return cuts


def _gaussian_block(y, pred, w, t):
    """Masked Gaussian log-likelihood total; t is the log noise scale."""
    r = y - pred
    nw = float(np.sum(w))
    return (-0.5 * ad.exp(-2.0 * t) * ad.vsum(r * r * w)
            - nw * t - nw * HALF_LOG_2PI)


def _gaussian_rows(y, pred, w, t):
    """Per-row masked Gaussian log-likelihood (for the category mixture)."""
    r = y - pred
    return (-0.5 * ad.exp(-2.0 * t)) * (r * r * w) - (t + HALF_LOG_2PI) * w


# -- reference (per-row) evaluation and public entry points -------------------


def log_posterior(theta, data: PreparedData, spec: ModelSpec = None) -> float:
    """Joint log-density at an unconstrained parameter vector."""
    return PosteriorDensity(data, spec).value(theta)


def prior_logdensity(theta, space: ParameterSpace) -> float:
    """Prior + transform-Jacobian part of the joint, in unconstrained space."""
    u = np.asarray(theta, dtype=float)
    if u.shape != (space.dim,):
        raise ValueError(f"expected parameter vector of length {space.dim}")
    dummy = PosteriorDensity.__new__(PosteriorDensity)
    dummy.space = space
    _, stick_jac = _stick_break(u[space.sl_simplex])
    with np.errstate(over="ignore"):
        return float(dummy._prior(
            u[space.i_aleph_nullip], u[space.i_aleph_pit], u[space.i_b_pc],
            u[space.i_phi], u[space.sl_mu], u[space.sl_log_sigma],
            u[space.sl_z], u[space.sl_log_sigma_out], stick_jac))


def beta_value(params: dict, outcome: str, family: str) -> float:
    """Recombine one non-centered coefficient from named constrained values."""
    return (params[f"mu[{family}]"]
            + params[f"sigma[{family}]"] * params[f"z[{outcome}][{family}]"])


def cutpoints_of(params: dict) -> np.ndarray:
    p = np.array([params[f"p[{k}]"] for k in range(K_CATEGORIES)])
    cum = np.cumsum(p)[:-1]
    return params["phi"] + np.log(cum) - np.log1p(-cum)


def outcome_mean(data: PreparedData, row: int, params: dict, outcome: str,
                 poscon_value: int, spec: ModelSpec = None) -> float:
    """Linear predictor for one row at a given Position+Consistency value.

    On the transformed/standardized scale; for ``cs`` the value is a logit.
    """
    spec = spec or ModelSpec()
    if outcome not in ALL_OUTCOMES:
        raise ValueError(f"unknown outcome {outcome!r}")
    if not 0 <= poscon_value < K_CATEGORIES:
        raise ValueError("poscon_value outside 0..4")
    cols = data.design_columns[outcome]
    x = data.design[outcome][row]
    mean = sum(beta_value(params, outcome, fam) * x[j]
               for j, fam in enumerate(cols))
    mean += beta_value(params, outcome, "poscon") * (poscon_value - data.poscon_mean)
    return float(mean)


def ordinal_eta(data: PreparedData, row: int, params: dict) -> float:
    return float(params["aleph_nullip"] * data.nullip_raw[row]
                 + params["aleph_pit"] * data.pit_raw[row] + params["b_pc"])


def _row_terms(data: PreparedData, row: int, params: dict, k: int) -> float:
    """Outcome log-likelihood of one row given a candidate score k."""
    total = 0.0
    for out in CONTINUOUS_OUTCOMES:
        if data.y_mask[out][row] > 0:
            sig = params[f"sigma_out[{out}]"]
            mu = outcome_mean(data, row, params, out, k)
            r = (data.y[out][row] - mu) / sig
            total += -0.5 * r * r - math.log(sig) - HALF_LOG_2PI
    pred = outcome_mean(data, row, params, "cs", k)
    s = 2.0 * data.cs[row] - 1.0
    total += float(ad.log_sigmoid(s * pred))
    return total


def row_loglik_marginal(data: PreparedData, row: int, params: dict) -> float:
    """Exact five-term mixture log-likelihood for a missing-score row."""
    if data.poscon_values[row] >= 0:
        raise ValueError(f"row {row} has an observed poscon value")
    eta = ordinal_eta(data, row, params)
    cuts = cutpoints_of(params)
    terms = np.array([
        ordered_logistic_logpmf(k, eta, cuts) + _row_terms(data, row, params, k)
        for k in range(K_CATEGORIES)
    ])
    m = float(np.max(terms))
    return m + math.log(float(np.sum(np.exp(terms - m))))


def row_loglik_observed(data: PreparedData, row: int, params: dict) -> float:
    k = int(data.poscon_values[row])
    if k < 0:
        raise ValueError(f"row {row} has a missing poscon value")
    eta = ordinal_eta(data, row, params)
    cuts = cutpoints_of(params)
    return float(ordered_logistic_logpmf(k, eta, cuts)) + _row_terms(
        data, row, params, k)


def poscon_category_probs(data: PreparedData, params: dict) -> np.ndarray:
    """Imputation pmf f(k | eta_i, c) for every row, shape (n, 5)."""
    cuts = cutpoints_of(params)
    eta = (params["aleph_nullip"] * data.nullip_raw
           + params["aleph_pit"] * data.pit_raw + params["b_pc"])
    out = np.column_stack([
        np.exp(ordered_logistic_logpmf(k, eta, cuts))
        for k in range(K_CATEGORIES)
    ])
    return out
