import math

import numpy as np
import pytest

from prombayes.cohort import (
    ALL_OUTCOMES,
    CONTINUOUS_OUTCOMES,
    PreparedData,
    preprocess_outcomes,
)
from prombayes.model import (
    ModelSpec,
    ParameterSpace,
    PosteriorDensity,
    beta_value,
    cutpoints_of,
    log_posterior,
    outcome_mean,
    ordinal_eta,
    poscon_category_probs,
    prior_logdensity,
    row_loglik_marginal,
    row_loglik_observed,
)
from prombayes.simulate import default_truth, simulate_cohort

SPEC = ModelSpec()
SPACE = ParameterSpace(SPEC)


def make_prepared(n=10, seed=3):
    cohort, _ = simulate_cohort(default_truth(), n, seed=seed)
    prepared, _ = preprocess_outcomes(cohort)
    return prepared


def random_theta(rng, scale=0.7):
    return rng.uniform(-scale, scale, SPACE.dim)


def take_rows(data: PreparedData, keep: np.ndarray) -> PreparedData:
    """Row subset with the original transforms/centering kept fixed."""
    return PreparedData(
        n=int(np.sum(keep)) if keep.dtype == bool else keep.size,
        design={o: m[keep] for o, m in data.design.items()},
        design_columns=data.design_columns,
        y={o: v[keep] for o, v in data.y.items()},
        y_mask={o: v[keep] for o, v in data.y_mask.items()},
        cs=data.cs[keep],
        nullip_raw=data.nullip_raw[keep],
        pit_raw=data.pit_raw[keep],
        poscon_values=data.poscon_values[keep],
        poscon_mean=data.poscon_mean,
        transforms=data.transforms,
    )


def drop_row(data: PreparedData, i: int) -> PreparedData:
    return take_rows(data, np.arange(data.n) != i)


# -- independent oracles -------------------------------------------------------


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def oracle_ordinal_pmf(k, eta, cuts):
    """Direct three-branch evaluation, independent of the package path."""
    if k == 0:
        return 1.0 - sigmoid(eta - cuts[0])
    if k == len(cuts):
        return sigmoid(eta - cuts[-1])
    return sigmoid(eta - cuts[k - 1]) - sigmoid(eta - cuts[k])


def oracle_row_loglik(data, i, params, k):
    """Hand-composed likelihood of row i given score k (no package calls)."""
    total = math.log(max(oracle_ordinal_pmf(
        k, ordinal_eta_oracle(data, i, params), oracle_cutpoints(params)), 1e-300))
    for out in CONTINUOUS_OUTCOMES:
        if data.y_mask[out][i] > 0:
            mu = oracle_mean(data, i, params, out, k)
            sig = params[f"sigma_out[{out}]"]
            total += (-0.5 * ((data.y[out][i] - mu) / sig) ** 2
                      - math.log(sig) - 0.5 * math.log(2 * math.pi))
    logit = oracle_mean(data, i, params, "cs", k)
    p = sigmoid(logit)
    total += math.log(p if data.cs[i] else 1.0 - p)
    return total


def oracle_cutpoints(params):
    p = np.array([params[f"p[{j}]"] for j in range(5)])
    cum = np.cumsum(p)[:4]
    return params["phi"] + np.log(cum / (1 - cum))


def ordinal_eta_oracle(data, i, params):
    return (params["aleph_nullip"] * data.nullip_raw[i]
            + params["aleph_pit"] * data.pit_raw[i] + params["b_pc"])


def oracle_mean(data, i, params, out, k):
    cols = data.design_columns[out]
    total = 0.0
    for j, fam in enumerate(cols):
        beta = params[f"mu[{fam}]"] + params[f"sigma[{fam}]"] * params[f"z[{out}][{fam}]"]
        total += beta * data.design[out][i, j]
    beta_pc = (params["mu[poscon]"]
               + params["sigma[poscon]"] * params[f"z[{out}][poscon]"])
    return total + beta_pc * (k - data.poscon_mean)


def oracle_prior(theta, space):
    """Prior + Jacobians composed from scipy densities and a numerical
    stick-breaking Jacobian determinant."""
    from scipy import stats

    from prombayes.model import _stick_forward

    u = np.asarray(theta)
    total = 0.0
    total += stats.norm.logpdf(u[0]) + stats.norm.logpdf(u[1])
    total += stats.cauchy.logpdf(u[2])
    # phi ~ U(0,4) through 4*sigmoid(t).
    t = u[3]
    phi = 4.0 * sigmoid(t)
    total += stats.uniform.logpdf(phi, 0, 4) + math.log(4.0 * sigmoid(t) * sigmoid(-t))
    # simplex ~ Dirichlet(1) through stick-breaking; Jacobian numerically.
    su = u[4:8]
    p = _stick_forward(su)
    total += stats.dirichlet.logpdf(p, np.ones(5))
    h = 1e-6
    jac = np.empty((4, 4))
    for j in range(4):
        up, um = su.copy(), su.copy()
        up[j] += h
        um[j] -= h
        jac[:, j] = (_stick_forward(up)[:4] - _stick_forward(um)[:4]) / (2 * h)
    total += math.log(abs(np.linalg.det(jac)))
    nf = len(space.families)
    mu = u[space.sl_mu]
    lsig = u[space.sl_log_sigma]
    total += float(np.sum(stats.norm.logpdf(mu)))
    total += float(np.sum(stats.halfnorm.logpdf(np.exp(lsig)) + lsig))
    total += float(np.sum(stats.norm.logpdf(u[space.sl_z])))
    lso = u[space.sl_log_sigma_out]
    total += float(np.sum(stats.halfnorm.logpdf(np.exp(lso)) + lso))
    return total


# -- tests ----------------------------------------------------------------------


class TestModelSpec:
    def test_five_outcomes_wired(self):
        assert set(SPEC.extra_covariates) == set(ALL_OUTCOMES)
        assert SPEC.covariates("aug_deliv") == (
            "dilation", "effacement", "station", "poscon", "treatment",
            "nullip", "epidural", "fgr")

    def test_every_coefficient_in_exactly_one_family(self):
        seen = {}
        for fam, members in SPEC.hyperprior_sharing.items():
            for name in members:
                assert name not in seen, f"{name} in {fam} and {seen[name]}"
                seen[name] = fam
        assert len(seen) == len(SPEC.coefficient_ids())

    def test_rejects_overlapping_extras(self):
        with pytest.raises(ValueError):
            ModelSpec(extra_covariates={**SPEC.extra_covariates,
                                        "cs": ("bmi", "ga", "treatment")})

    def test_json_round_trip(self):
        import json

        doc = json.loads(SPEC.to_json())
        assert doc["extra_covariates"]["aug_fully"] == ["nullip", "epidural"]
        assert set(doc["hyperprior_sharing"]) == set(SPEC.families)


class TestParameterSpace:
    def test_dimensions(self):
        assert SPACE.dim == 68
        assert SPACE.con_dim == 69
        assert len(SPACE.flat_names) == 69

    def test_round_trip_blockwise(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            u = rng.uniform(-2, 2, SPACE.dim)
            c = SPACE.constrain_flat(u)
            back = SPACE.unconstrain_flat(c)
            np.testing.assert_allclose(back, u, atol=1e-10)

    def test_constrained_values_respect_supports(self):
        rng = np.random.default_rng(6)
        u = rng.uniform(-3, 3, SPACE.dim)
        named = SPACE.named(u)
        assert 0.0 < named["phi"] < 4.0
        simplex = [named[f"p[{k}]"] for k in range(5)]
        assert all(v > 0 for v in simplex)
        assert sum(simplex) == pytest.approx(1.0, abs=1e-12)
        for fam in SPACE.families:
            assert named[f"sigma[{fam}]"] > 0


class TestLogPosterior:
    def test_zero_vector_matches_oracle_composition(self):
        pytest.importorskip("scipy")
        # Three rows (one with a missing score), carved out of a larger
        # prepared cohort so the fitted transforms stay valid.
        big = make_prepared(n=40, seed=9)
        rows = [int(big.poscon_mis_idx[0]), int(big.poscon_obs_idx[0]),
                int(big.poscon_obs_idx[1])]
        data = take_rows(big, np.array(rows))
        theta = np.zeros(SPACE.dim)
        params = SPACE.named(theta)
        expected = oracle_prior(theta, SPACE)
        for i in range(data.n):
            k = data.poscon_values[i]
            if k >= 0:
                expected += oracle_row_loglik(data, i, params, k)
            else:
                terms = [oracle_row_loglik(data, i, params, kk)
                         for kk in range(5)]
                m = max(terms)
                expected += m + math.log(sum(math.exp(t - m) for t in terms))
        got = log_posterior(theta, data, SPEC)
        assert math.isfinite(got)
        assert got == pytest.approx(expected, abs=1e-8)

    def test_random_points_match_oracle(self):
        pytest.importorskip("scipy")
        data = make_prepared(n=7, seed=13)
        rng = np.random.default_rng(0)
        density = PosteriorDensity(data, SPEC, SPACE)
        for _ in range(5):
            theta = random_theta(rng)
            params = SPACE.named(theta)
            expected = oracle_prior(theta, SPACE)
            for i in range(data.n):
                k = data.poscon_values[i]
                if k >= 0:
                    expected += oracle_row_loglik(data, i, params, k)
                else:
                    terms = [oracle_row_loglik(data, i, params, kk)
                             for kk in range(5)]
                    m = max(terms)
                    expected += m + math.log(sum(math.exp(t - m) for t in terms))
            assert density.value(theta) == pytest.approx(expected, abs=1e-7)

    def test_row_dropping_is_additive(self):
        data = make_prepared(n=12, seed=21)
        rng = np.random.default_rng(5)
        theta = random_theta(rng)
        params = SPACE.named(theta)
        full = log_posterior(theta, data, SPEC)
        for i in (0, data.n - 1):
            reduced = log_posterior(theta, drop_row(data, i), SPEC)
            if data.poscon_values[i] >= 0:
                contribution = row_loglik_observed(data, i, params)
            else:
                contribution = row_loglik_marginal(data, i, params)
            assert full - reduced == pytest.approx(contribution, abs=1e-9)

    def test_huge_noise_scale_decreases_without_nan(self):
        data = make_prepared(n=10, seed=4)
        theta = np.zeros(SPACE.dim)
        base = log_posterior(theta, data, SPEC)
        worse = theta.copy()
        worse[SPACE.sl_log_sigma_out] = 40.0
        val = log_posterior(worse, data, SPEC)
        assert not math.isnan(val)
        assert val < base

    def test_dimension_mismatch_rejected(self):
        data = make_prepared(n=5, seed=2)
        with pytest.raises(ValueError):
            PosteriorDensity(data, SPEC, SPACE).value(np.zeros(10))

    def test_nonfinite_input_rejected(self):
        data = make_prepared(n=5, seed=2)
        theta = np.zeros(SPACE.dim)
        theta[0] = np.nan
        with pytest.raises(ValueError):
            PosteriorDensity(data, SPEC, SPACE).value(theta)

    def test_deterministic_bitwise(self):
        data = make_prepared(n=20, seed=30)
        rng = np.random.default_rng(8)
        theta = random_theta(rng)
        density = PosteriorDensity(data, SPEC, SPACE)
        values = {density.value(theta.copy()) for _ in range(5)}
        assert len(values) == 1


class TestGradient:
    def test_gradient_matches_finite_differences(self):
        data = make_prepared(n=10, seed=17)
        density = PosteriorDensity(data, SPEC, SPACE)
        rng = np.random.default_rng(42)
        h = 1e-5
        for _ in range(50):
            theta = random_theta(rng)
            _, grad = density(theta)
            for i in rng.choice(SPACE.dim, 6, replace=False):
                up, um = theta.copy(), theta.copy()
                up[i] += h
                um[i] -= h
                fd = (density.value(up) - density.value(um)) / (2 * h)
                err = abs(grad[i] - fd) / max(abs(fd), 1e-6)
                assert err < 1e-4, f"coord {i}: grad {grad[i]} vs fd {fd}"

    def test_tape_value_equals_plain_value_bitwise(self):
        data = make_prepared(n=9, seed=23)
        density = PosteriorDensity(data, SPEC, SPACE)
        rng = np.random.default_rng(1)
        for _ in range(10):
            theta = random_theta(rng)
            v, _ = density(theta)
            assert v == density.value(theta)


class TestRowLoglik:
    def test_brute_force_marginalization_oracle(self):
        data = make_prepared(n=30, seed=29)
        mis = data.poscon_mis_idx
        assert mis.size > 0
        rng = np.random.default_rng(11)
        for _ in range(100):
            params = SPACE.named(random_theta(rng))
            i = int(rng.choice(mis))
            terms = [oracle_row_loglik(data, i, params, k) for k in range(5)]
            m = max(terms)
            expected = m + math.log(sum(math.exp(t - m) for t in terms))
            assert row_loglik_marginal(data, i, params) == pytest.approx(
                expected, abs=1e-10)

    def test_point_mass_mixture_equals_observed(self):
        data = make_prepared(n=25, seed=31)
        i = int(data.poscon_mis_idx[0])
        eps = 1e-13
        theta = np.zeros(SPACE.dim)
        params = SPACE.named(theta)
        # Concentrate the imputation pmf on k=2 at this row's eta.
        params["phi"] = ordinal_eta(data, i, params)
        for k, v in enumerate([eps, eps, 1 - 4 * eps, eps, eps]):
            params[f"p[{k}]"] = v
        marginal = row_loglik_marginal(data, i, params)
        forced = PreparedData(
            n=data.n, design=data.design, design_columns=data.design_columns,
            y=data.y, y_mask=data.y_mask, cs=data.cs,
            nullip_raw=data.nullip_raw, pit_raw=data.pit_raw,
            poscon_values=np.where(np.arange(data.n) == i, 2,
                                   data.poscon_values),
            poscon_mean=data.poscon_mean, transforms=data.transforms)
        observed = row_loglik_observed(forced, i, params)
        assert marginal == pytest.approx(observed, abs=1e-10)

    def test_all_outcomes_missing_leaves_ordinal_and_cs(self):
        data = make_prepared(n=25, seed=33)
        i = int(data.poscon_mis_idx[0])
        blanked = PreparedData(
            n=data.n, design=data.design, design_columns=data.design_columns,
            y=data.y,
            y_mask={o: np.where(np.arange(data.n) == i, 0.0, m)
                    for o, m in data.y_mask.items()},
            cs=data.cs, nullip_raw=data.nullip_raw, pit_raw=data.pit_raw,
            poscon_values=data.poscon_values, poscon_mean=data.poscon_mean,
            transforms=data.transforms)
        rng = np.random.default_rng(3)
        params = SPACE.named(random_theta(rng))
        got = row_loglik_marginal(blanked, i, params)
        eta = ordinal_eta(data, i, params)
        cuts = oracle_cutpoints(params)
        terms = []
        for k in range(5):
            logit = oracle_mean(data, i, params, "cs", k)
            p = sigmoid(logit)
            terms.append(math.log(oracle_ordinal_pmf(k, eta, cuts))
                         + math.log(p if data.cs[i] else 1 - p))
        m = max(terms)
        expected = m + math.log(sum(math.exp(t - m) for t in terms))
        assert got == pytest.approx(expected, abs=1e-10)

    def test_masked_observation_bounds(self):
        data = make_prepared(n=40, seed=37)
        rng = np.random.default_rng(7)
        params = SPACE.named(random_theta(rng))
        for i in data.poscon_obs_idx[:5]:
            i = int(i)
            masked = PreparedData(
                n=data.n, design=data.design,
                design_columns=data.design_columns, y=data.y,
                y_mask=data.y_mask, cs=data.cs, nullip_raw=data.nullip_raw,
                pit_raw=data.pit_raw,
                poscon_values=np.where(np.arange(data.n) == i, -1,
                                       data.poscon_values),
                poscon_mean=data.poscon_mean, transforms=data.transforms)
            marginal = row_loglik_marginal(masked, i, params)
            observed = row_loglik_observed(data, i, params)
            assert marginal >= observed - math.log(5) - 1e-12
            # And never exceeds the 5-term log-sum upper bound.
            terms = [oracle_row_loglik(data, i, params, k) for k in range(5)]
            m = max(terms)
            upper = m + math.log(sum(math.exp(t - m) for t in terms))
            assert marginal <= upper + 1e-12


class TestOutcomeMean:
    def test_zero_coefficients_give_zero(self):
        data = make_prepared(n=8, seed=41)
        params = {name: 0.0 for name in SPACE.flat_names}
        for out in ALL_OUTCOMES:
            assert outcome_mean(data, 0, params, out, 2) == 0.0

    def test_fgr_wiring_isolation(self):
        data = make_prepared(n=8, seed=43)
        params = {name: 0.0 for name in SPACE.flat_names}
        params["sigma[fgr]"] = 1.0
        params["z[aug_deliv][fgr]"] = 1.0
        row = 0
        j = data.design_columns["aug_deliv"].index("fgr")
        expected = data.design["aug_deliv"][row, j]
        assert outcome_mean(data, row, params, "aug_deliv", 2) == pytest.approx(
            expected)
        for out in ("rom_admit", "rom_agent", "aug_fully", "cs"):
            assert outcome_mean(data, row, params, out, 2) == 0.0

    def test_matches_dot_product_oracle(self):
        data = make_prepared(n=15, seed=47)
        rng = np.random.default_rng(19)
        for _ in range(20):
            params = SPACE.named(random_theta(rng))
            i = int(rng.integers(data.n))
            k = int(rng.integers(5))
            out = ALL_OUTCOMES[int(rng.integers(5))]
            assert outcome_mean(data, i, params, out, k) == pytest.approx(
                oracle_mean(data, i, params, out, k), abs=1e-12)

    def test_unknown_covariate_rejected(self):
        data = make_prepared(n=8, seed=48)
        params = {name: 0.0 for name in SPACE.flat_names}
        with pytest.raises(ValueError):
            outcome_mean(data, 0, params, "delivery_speed", 2)
        with pytest.raises(ValueError):
            outcome_mean(data, 0, params, "aug_deliv", 9)


class TestPrior:
    def test_matches_scipy_composition_at_origin(self):
        pytest.importorskip("scipy")
        theta = np.zeros(SPACE.dim)
        assert prior_logdensity(theta, SPACE) == pytest.approx(
            oracle_prior(theta, SPACE), abs=1e-7)

    def test_matches_scipy_composition_at_random_points(self):
        pytest.importorskip("scipy")
        rng = np.random.default_rng(53)
        for _ in range(10):
            theta = random_theta(rng, scale=1.5)
            assert prior_logdensity(theta, SPACE) == pytest.approx(
                oracle_prior(theta, SPACE), abs=1e-6)

    def test_cauchy_mode_density(self):
        theta = np.zeros(SPACE.dim)
        base = prior_logdensity(theta, SPACE)
        moved = theta.copy()
        moved[SPACE.i_b_pc] = 1.0
        delta = prior_logdensity(moved, SPACE) - base
        # Cauchy(0,1): logpdf(0) = -log(pi), logpdf(1) = -log(2 pi).
        assert delta == pytest.approx(-math.log(2.0), abs=1e-12)

    def test_hyper_scale_coordinate_is_blockwise(self):
        theta = np.zeros(SPACE.dim)
        moved = theta.copy()
        idx = SPACE.sl_log_sigma.start
        moved[idx] = 2.0 * (theta[idx] + 0.5)
        delta = prior_logdensity(moved, SPACE) - prior_logdensity(theta, SPACE)
        # Only the half-normal + Jacobian term for that one scale changes.
        expected = (-0.5 * math.exp(2.0) + 1.0) - (-0.5 * 1.0 + 0.0)
        assert delta == pytest.approx(expected, abs=1e-12)


class TestNonCenteredEquivalence:
    def test_implied_beta_prior_is_standard_normal(self):
        rng = np.random.default_rng(61)
        z = rng.standard_normal(100_000)
        params = {"mu[station]": 0.0, "sigma[station]": 1.0}
        betas = np.array([
            beta_value({**params, "z[aug_deliv][station]": zi},
                       "aug_deliv", "station")
            for zi in z[:100]])
        np.testing.assert_allclose(betas, z[:100])
        # Full-sample KS against the standard normal CDF.
        beta_all = 0.0 + 1.0 * z
        from prombayes.diagnostics import ks_distance

        d = ks_distance(beta_all,
                        lambda t: 0.5 * (1 + np.vectorize(math.erf)(t / math.sqrt(2))))
        assert d < 0.02


class TestPosconCategoryProbs:
    def test_rows_normalize_and_match_pmf(self):
        data = make_prepared(n=12, seed=67)
        rng = np.random.default_rng(71)
        params = SPACE.named(random_theta(rng))
        probs = poscon_category_probs(data, params)
        assert probs.shape == (data.n, 5)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
        cuts = cutpoints_of(params)
        i = 3
        eta = ordinal_eta(data, i, params)
        expected = [oracle_ordinal_pmf(k, eta, cuts) for k in range(5)]
        np.testing.assert_allclose(probs[i], expected, atol=1e-12)
