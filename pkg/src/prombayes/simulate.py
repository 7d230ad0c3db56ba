"""Synthetic-cohort generator for the clinical decision process.

The generative story mirrors how the confound arises in practice: each
patient has true cervical-exam components; the total score is measured
with rounded Gaussian error; a per-patient soft threshold decides the
treatment arm (above: Pitocin, below: buccal misoprostol); outcomes are
then driven by the *true* components plus a treatment effect that defaults
to zero.  A naive arm comparison therefore shows a treatment "effect"
manufactured entirely by the assignment rule, while the component-adjusted
model should not.

Outcomes are generated on the Box-Cox-transformed scale with
sample-centered covariate columns and inverted back to hours, so the
fitted model is exactly well-specified under these truths; calibration
tests then isolate sampler and model correctness from robustness
questions.  The Position+Consistency score is blanked completely at
random, matching the ignorability the model assumes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .cohort import ALL_OUTCOMES, CONTINUOUS_OUTCOMES, Cohort, PatientRecord
from .model import ModelSpec
from .ordinal import K_CATEGORIES, ordered_logistic_logpmf

BISHOP_COMPONENTS = ("dilation", "effacement", "station")

DEFAULT_MISSING_RATE = 36.0 / 82.0


@dataclass(frozen=True)
class SimTruth:
    """Ground-truth generative parameters; the unit of every calibration test.

    Coefficients are per covariate unit on the transformed-outcome scale
    (logit scale for ``cs``); the hidden-truth table emitted next to each
    cohort records the latent quantities a fitted model never sees.
    """

    beta: dict                    # outcome -> {family: coefficient}
    sigma_out: dict               # continuous outcome -> noise sd
    lam: dict                     # continuous outcome -> Box-Cox exponent
    location: dict                # continuous outcome -> transformed-scale offset
    poscon_eta_const: float
    poscon_eta_nullip: float
    poscon_cutpoints: tuple
    threshold_mean: float = 4.0
    threshold_sd: float = 1.0
    measurement_noise_sd: float = 1.0
    missing_rate: float = DEFAULT_MISSING_RATE
    nullip_rate: float = 0.5
    gbs_rate: float = 0.25
    fgr_rate: float = 0.10
    epidural_rate: float = 0.70
    bmi_mean: float = 30.0
    bmi_sd: float = 6.0
    ga_mean: float = 39.0
    ga_sd: float = 1.2
    component_probs: dict = field(default_factory=dict)

    def __post_init__(self):
        spec = ModelSpec()
        for out in ALL_OUTCOMES:
            if out not in self.beta:
                raise ValueError(f"beta missing outcome {out!r}")
            missing = set(spec.covariates(out)) - set(self.beta[out])
            if missing:
                raise ValueError(f"beta[{out}] missing {sorted(missing)}")
        for out in CONTINUOUS_OUTCOMES:
            for name, table in (("sigma_out", self.sigma_out),
                                ("lam", self.lam), ("location", self.location)):
                if out not in table:
                    raise ValueError(f"{name} missing outcome {out!r}")
            if not self.sigma_out[out] > 0.0:
                raise ValueError(f"sigma_out[{out}] must be positive")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("missing_rate must be in [0, 1)")
        if self.threshold_sd < 0.0:
            raise ValueError("threshold_sd must be >= 0")
        if self.measurement_noise_sd < 0.0:
            raise ValueError("measurement_noise_sd must be >= 0")
        cuts = tuple(float(c) for c in self.poscon_cutpoints)
        if len(cuts) != K_CATEGORIES - 1 or any(np.diff(cuts) <= 0):
            raise ValueError("poscon_cutpoints must be 4 strictly increasing values")
        object.__setattr__(self, "poscon_cutpoints", cuts)
        probs = dict(self.component_probs)
        for comp in BISHOP_COMPONENTS:
            if comp not in probs:
                raise ValueError(f"component_probs missing {comp!r}")
            p = np.asarray(probs[comp], dtype=float)
            if p.shape != (4,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
                raise ValueError(f"component_probs[{comp}] must be a 4-simplex")
            probs[comp] = tuple(float(v) for v in p)
        object.__setattr__(self, "component_probs", probs)

    def to_dict(self) -> dict:
        return {
            "beta": {o: dict(v) for o, v in self.beta.items()},
            "sigma_out": dict(self.sigma_out),
            "lambda": dict(self.lam),
            "location": dict(self.location),
            "poscon_eta_const": self.poscon_eta_const,
            "poscon_eta_nullip": self.poscon_eta_nullip,
            "poscon_cutpoints": list(self.poscon_cutpoints),
            "threshold_mean": self.threshold_mean,
            "threshold_sd": self.threshold_sd,
            "measurement_noise_sd": self.measurement_noise_sd,
            "missing_rate": self.missing_rate,
            "nullip_rate": self.nullip_rate,
            "gbs_rate": self.gbs_rate,
            "fgr_rate": self.fgr_rate,
            "epidural_rate": self.epidural_rate,
            "bmi_mean": self.bmi_mean,
            "bmi_sd": self.bmi_sd,
            "ga_mean": self.ga_mean,
            "ga_sd": self.ga_sd,
            "component_probs": {c: list(v) for c, v in self.component_probs.items()},
        }

    def to_json(self, indent=2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SimTruth":
        required = ("beta", "sigma_out", "lambda", "location",
                    "poscon_eta_const", "poscon_eta_nullip", "poscon_cutpoints")
        for key in required:
            if key not in d:
                raise ValueError(f"truth document missing field {key!r}")
        kwargs = dict(d)
        kwargs["lam"] = kwargs.pop("lambda")
        kwargs["poscon_cutpoints"] = tuple(kwargs["poscon_cutpoints"])
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text: str) -> "SimTruth":
        return cls.from_dict(json.loads(text))


def default_truth() -> SimTruth:
    """The headline null scenario: real Bishop effects, zero treatment effect.

    Signs follow the qualitative clinical picture (higher station and FGR
    shorten labor; nulliparity lengthens it; more effaced patients wait
    longer for the agent), with magnitudes chosen to give an unmistakable
    naive arm difference at a few hundred patients.
    """
    beta = {
        "rom_admit": {"dilation": -0.16, "effacement": -0.06, "station": -0.08,
                      "poscon": -0.07, "treatment": 0.0, "gbs": -0.15},
        "rom_agent": {"dilation": -0.14, "effacement": 0.10, "station": -0.06,
                      "poscon": -0.06, "treatment": 0.0, "gbs": -0.10},
        "aug_fully": {"dilation": -0.10, "effacement": -0.07, "station": -0.14,
                      "poscon": -0.10, "treatment": 0.0,
                      "nullip": 0.22, "epidural": -0.08},
        "aug_deliv": {"dilation": -0.12, "effacement": -0.08, "station": -0.16,
                      "poscon": -0.11, "treatment": 0.0,
                      "nullip": 0.25, "epidural": 0.08, "fgr": -0.22},
        "cs": {"dilation": -0.15, "effacement": -0.10, "station": -0.22,
               "poscon": -0.15, "treatment": 0.0, "bmi": 0.35, "ga": 0.15},
    }
    return SimTruth(
        beta=beta,
        sigma_out={"rom_admit": 0.55, "rom_agent": 0.50,
                   "aug_fully": 0.45, "aug_deliv": 0.45},
        lam={"rom_admit": 0.0, "rom_agent": 0.0,
             "aug_fully": 0.3, "aug_deliv": 0.3},
        location={"rom_admit": 1.4, "rom_agent": 2.2,
                  "aug_fully": 3.1, "aug_deliv": 3.3},
        poscon_eta_const=1.8,
        poscon_eta_nullip=-0.6,
        poscon_cutpoints=(0.0, 1.2, 2.4, 3.6),
        component_probs={
            "dilation": (0.45, 0.35, 0.15, 0.05),
            "effacement": (0.30, 0.40, 0.20, 0.10),
            "station": (0.35, 0.40, 0.20, 0.05),
        },
    )


def calibration_truth() -> SimTruth:
    """Recovery scenario: widely spread, nonzero effects in every shared family."""
    base = default_truth()
    beta = {o: dict(v) for o, v in base.beta.items()}
    spread = {
        "dilation": {"rom_admit": -0.25, "rom_agent": -0.10, "aug_fully": -0.05,
                     "aug_deliv": -0.20, "cs": -0.35},
        "effacement": {"rom_admit": 0.15, "rom_agent": -0.20, "aug_fully": -0.05,
                       "aug_deliv": -0.10, "cs": 0.25},
        "station": {"rom_admit": -0.05, "rom_agent": -0.30, "aug_fully": -0.20,
                    "aug_deliv": -0.10, "cs": -0.45},
        "poscon": {"rom_admit": -0.20, "rom_agent": -0.05, "aug_fully": -0.15,
                   "aug_deliv": -0.25, "cs": 0.10},
        "treatment": {"rom_admit": -0.10, "rom_agent": 0.05, "aug_fully": -0.20,
                      "aug_deliv": -0.30, "cs": -0.50},
    }
    for fam, per_out in spread.items():
        for out, value in per_out.items():
            beta[out][fam] = value
    return replace(base, beta=beta)


def _categorical(rng: np.random.Generator, probs: np.ndarray, n: int) -> np.ndarray:
    """Inverse-CDF categorical draws; probs is (k,) or (n, k)."""
    p = np.asarray(probs, dtype=float)
    if p.ndim == 1:
        p = np.broadcast_to(p, (n, p.size))
    u = rng.random(n)
    return np.minimum(np.sum(u[:, None] > np.cumsum(p, axis=1), axis=1),
                      p.shape[1] - 1)


def _poscon_probs(truth: SimTruth, nullip: np.ndarray) -> np.ndarray:
    eta = truth.poscon_eta_const + truth.poscon_eta_nullip * nullip
    cuts = np.asarray(truth.poscon_cutpoints)
    return np.column_stack([
        np.exp(ordered_logistic_logpmf(k, eta, cuts))
        for k in range(K_CATEGORIES)
    ])


def simulate_cohort(truth: SimTruth, n: int, seed: int):
    """Generate a cohort plus its hidden-truth table.

    Returns ``(Cohort, hidden)`` where ``hidden`` maps column name to array
    (true Position+Consistency, true and measured total score, per-patient
    threshold draw).  Same (truth, n, seed) always yields identical output.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.Generator(np.random.Philox(key=seed & 0xFFFFFFFFFFFFFFFF))

    nullip = (rng.random(n) < truth.nullip_rate).astype(float)
    epidural = (rng.random(n) < truth.epidural_rate).astype(float)
    fgr = (rng.random(n) < truth.fgr_rate).astype(float)
    gbs = (rng.random(n) < truth.gbs_rate).astype(float)
    bmi = rng.normal(truth.bmi_mean, truth.bmi_sd, n)
    ga = rng.normal(truth.ga_mean, truth.ga_sd, n)

    comps = {c: _categorical(rng, np.asarray(truth.component_probs[c]), n)
             for c in BISHOP_COMPONENTS}
    poscon = _categorical(rng, _poscon_probs(truth, nullip), n)

    total = comps["dilation"] + comps["effacement"] + comps["station"] + poscon
    measured = total + np.rint(rng.normal(0.0, truth.measurement_noise_sd, n))
    threshold = rng.normal(truth.threshold_mean, truth.threshold_sd, n)
    pit = (measured > threshold).astype(float)

    # Covariate columns exactly as the model codes them: everything centered
    # on the realized sample (bmi/ga z-scored), so the fit is well-specified.
    def zscore(x):
        sd = float(np.std(x, ddof=1))
        return (x - np.mean(x)) / (sd if sd > 0 else 1.0)

    cols = {
        "dilation": comps["dilation"] - np.mean(comps["dilation"]),
        "effacement": comps["effacement"] - np.mean(comps["effacement"]),
        "station": comps["station"] - np.mean(comps["station"]),
        "poscon": poscon - np.mean(poscon),
        "treatment": pit - np.mean(pit),
        "nullip": nullip - np.mean(nullip),
        "epidural": epidural - np.mean(epidural),
        "fgr": fgr - np.mean(fgr),
        "gbs": gbs - np.mean(gbs),
        "bmi": zscore(bmi),
        "ga": zscore(ga),
    }

    spec = ModelSpec()
    outcomes = {}
    for out in CONTINUOUS_OUTCOMES:
        mu = truth.location[out] + sum(
            truth.beta[out][fam] * cols[fam] for fam in spec.covariates(out))
        z = mu + rng.normal(0.0, truth.sigma_out[out], n)
        lam = truth.lam[out]
        if lam != 0.0:
            for _ in range(1000):
                bad = lam * z + 1.0 <= 0.0
                if not np.any(bad):
                    break
                z[bad] = mu[bad] + rng.normal(0.0, truth.sigma_out[out],
                                              int(np.sum(bad)))
            else:
                raise RuntimeError(
                    f"{out}: inverse Box-Cox redraw limit exceeded")
            outcomes[out] = np.power(lam * z + 1.0, 1.0 / lam)
        else:
            outcomes[out] = np.exp(z)

    cs_logit = sum(truth.beta["cs"][fam] * cols[fam]
                   for fam in spec.covariates("cs"))
    cs = rng.random(n) < 1.0 / (1.0 + np.exp(-cs_logit))

    missing = rng.random(n) < truth.missing_rate

    width = max(4, len(str(n)))
    records = []
    for i in range(n):
        records.append(PatientRecord(
            id=f"p{i + 1:0{width}d}",
            dilation_pts=int(comps["dilation"][i]),
            effacement_pts=int(comps["effacement"][i]),
            station_pts=int(comps["station"][i]),
            poscon_pts=None if missing[i] else int(poscon[i]),
            nullip=bool(nullip[i]),
            epidural=bool(epidural[i]),
            fgr=bool(fgr[i]),
            gbs=bool(gbs[i]),
            ga_weeks=float(ga[i]),
            bmi=float(bmi[i]),
            treatment="PIT" if pit[i] else "MISO",
            rom_admit_h=float(outcomes["rom_admit"][i]),
            rom_agent_h=float(outcomes["rom_agent"][i]),
            aug_fully_h=float(outcomes["aug_fully"][i]),
            aug_deliv_h=float(outcomes["aug_deliv"][i]),
            cs=bool(cs[i]),
        ))
    cohort = Cohort(records=tuple(records), provenance="synthetic")
    hidden = {
        "id": np.array([r.id for r in records]),
        "true_poscon": poscon.astype(int),
        "true_total": total.astype(int),
        "measured_score": measured.astype(int),
        "threshold": threshold,
    }
    return cohort, hidden


def write_hidden_truth_csv(hidden: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("id", "true_poscon", "true_total",
                         "measured_score", "threshold"))
        for i in range(hidden["id"].size):
            writer.writerow((hidden["id"][i], int(hidden["true_poscon"][i]),
                             int(hidden["true_total"][i]),
                             int(hidden["measured_score"][i]),
                             repr(float(hidden["threshold"][i]))))
