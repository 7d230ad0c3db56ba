"""Cohort data model, CSV ingestion, and outcome preprocessing.

A cohort row carries the three fully observed Bishop components (0..3
points each), the partially observed Position+Consistency sum (0..4),
binary and continuous covariates, the treatment arm, four positive time
outcomes (hours), and the Cesarean indicator.  Time outcomes are heavily
right-skewed, so fitting works on Box-Cox transformed, standardized values;
the fitted transform is recorded per outcome so draws can be mapped back.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

CSV_COLUMNS = (
    "id", "dilation_pts", "effacement_pts", "station_pts", "poscon_pts",
    "nullip", "epidural", "fgr", "gbs", "ga_weeks", "bmi", "treatment",
    "rom_admit_h", "rom_agent_h", "aug_fully_h", "aug_deliv_h", "cs",
)

CONTINUOUS_OUTCOMES = ("rom_admit", "rom_agent", "aug_fully", "aug_deliv")
ALL_OUTCOMES = CONTINUOUS_OUTCOMES + ("cs",)
OUTCOME_FIELDS = {
    "rom_admit": "rom_admit_h",
    "rom_agent": "rom_agent_h",
    "aug_fully": "aug_fully_h",
    "aug_deliv": "aug_deliv_h",
}

# Covariate wiring: the five shared covariates hit every outcome; the extras
# were restricted by clinical judgment to the outcomes listed here.
SHARED_COVARIATES = ("dilation", "effacement", "station", "poscon", "treatment")
EXTRA_COVARIATES = {
    "rom_admit": ("gbs",),
    "rom_agent": ("gbs",),
    "aug_fully": ("nullip", "epidural"),
    "aug_deliv": ("nullip", "epidural", "fgr"),
    "cs": ("bmi", "ga"),
}

LAMBDA_GRID = np.round(np.arange(-2.0, 2.0 + 1e-9, 0.01), 10)

POINTS_MAX = {"dilation_pts": 3, "effacement_pts": 3, "station_pts": 3,
              "poscon_pts": 4}


class CohortError(ValueError):
    """Raised when a cohort file or record set fails validation."""


class RowDiagnostic(NamedTuple):
    row: int          # 1-based data-row number (header excluded)
    reason: str


@dataclass(frozen=True)
class PatientRecord:
    id: str
    dilation_pts: int
    effacement_pts: int
    station_pts: int
    poscon_pts: Optional[int]
    nullip: bool
    epidural: bool
    fgr: bool
    gbs: bool
    ga_weeks: float
    bmi: float
    treatment: str
    rom_admit_h: Optional[float]
    rom_agent_h: Optional[float]
    aug_fully_h: Optional[float]
    aug_deliv_h: Optional[float]
    cs: bool

    def __post_init__(self):
        for name in ("dilation_pts", "effacement_pts", "station_pts"):
            v = getattr(self, name)
            if not 0 <= v <= POINTS_MAX[name]:
                raise ValueError(
                    f"{name}={v} outside 0..{POINTS_MAX[name]} points")
        if self.poscon_pts is not None and not 0 <= self.poscon_pts <= 4:
            raise ValueError(
                f"poscon_pts={self.poscon_pts} outside 0..4 points")
        if self.treatment not in ("PIT", "MISO"):
            raise ValueError(f"unknown treatment label {self.treatment!r}")
        for name in OUTCOME_FIELDS.values():
            v = getattr(self, name)
            if v is not None and not v > 0.0:
                raise ValueError(f"{name}={v} must be strictly positive")


@dataclass(frozen=True)
class Cohort:
    records: tuple
    provenance: str = "synthetic"

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if self.provenance not in ("real", "synthetic"):
            raise ValueError("provenance must be 'real' or 'synthetic'")
        if len(self.records) < 1:
            raise CohortError("cohort must contain at least one record")
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise CohortError("duplicate patient ids")

    @property
    def n(self) -> int:
        return len(self.records)

    def column(self, field: str) -> np.ndarray:
        vals = [getattr(r, field) for r in self.records]
        if any(v is None for v in vals):
            return np.array([np.nan if v is None else float(v) for v in vals])
        return np.asarray(vals, dtype=float)


# -- CSV ingestion ------------------------------------------------------------


def _parse_bool(text: str, column: str) -> bool:
    if text == "0":
        return False
    if text == "1":
        return True
    raise ValueError(f"{column}={text!r} is not 0/1")


def _parse_row(raw: dict) -> PatientRecord:
    def opt_int(col):
        return None if raw[col] == "" else int(raw[col])

    def opt_float(col):
        return None if raw[col] == "" else float(raw[col])

    return PatientRecord(
        id=raw["id"],
        dilation_pts=int(raw["dilation_pts"]),
        effacement_pts=int(raw["effacement_pts"]),
        station_pts=int(raw["station_pts"]),
        poscon_pts=opt_int("poscon_pts"),
        nullip=_parse_bool(raw["nullip"], "nullip"),
        epidural=_parse_bool(raw["epidural"], "epidural"),
        fgr=_parse_bool(raw["fgr"], "fgr"),
        gbs=_parse_bool(raw["gbs"], "gbs"),
        ga_weeks=float(raw["ga_weeks"]),
        bmi=float(raw["bmi"]),
        treatment=raw["treatment"],
        rom_admit_h=opt_float("rom_admit_h"),
        rom_agent_h=opt_float("rom_agent_h"),
        aug_fully_h=opt_float("aug_fully_h"),
        aug_deliv_h=opt_float("aug_deliv_h"),
        cs=_parse_bool(raw["cs"], "cs"),
    )


def parse_rows(rows: Sequence[dict]):
    """Parse raw string rows; total over input.

    Every row either yields a record or a diagnostic, never both, so
    ``len(records) + len(diagnostics) == len(rows)``.
    """
    records, diagnostics = [], []
    seen_ids = set()
    for i, raw in enumerate(rows, start=1):
        try:
            rec = _parse_row(raw)
            if rec.id in seen_ids:
                raise ValueError(f"duplicate id {rec.id!r}")
            seen_ids.add(rec.id)
            records.append(rec)
        except (ValueError, KeyError) as exc:
            diagnostics.append(RowDiagnostic(row=i, reason=str(exc)))
    return records, diagnostics


def read_cohort_rows(path, schema: Optional[dict] = None):
    """Read raw rows, mapping external header names through ``schema``.

    ``schema`` maps canonical column names to the names used in the file;
    by default the file must carry the canonical headers.
    """
    schema = schema or {}
    source = {canon: schema.get(canon, canon) for canon in CSV_COLUMNS}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise CohortError(f"{path}: empty file")
        missing = [ext for ext in source.values() if ext not in reader.fieldnames]
        if missing:
            raise CohortError(f"{path}: missing columns {missing}")
        return [{canon: raw[ext].strip() for canon, ext in source.items()}
                for raw in reader]


def load_cohort(path, schema: Optional[dict] = None,
                provenance: str = "synthetic") -> Cohort:
    """Load and validate a cohort CSV; any bad row fails the whole load."""
    rows = read_cohort_rows(path, schema)
    records, diagnostics = parse_rows(rows)
    if diagnostics:
        detail = "; ".join(f"row {d.row}: {d.reason}" for d in diagnostics[:5])
        more = "" if len(diagnostics) <= 5 else f" (+{len(diagnostics) - 5} more)"
        raise CohortError(f"{path}: {len(diagnostics)} bad rows: {detail}{more}")
    return Cohort(records=tuple(records), provenance=provenance)


def save_cohort(cohort: Cohort, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in cohort.records:
            writer.writerow([
                r.id, r.dilation_pts, r.effacement_pts, r.station_pts,
                "" if r.poscon_pts is None else r.poscon_pts,
                int(r.nullip), int(r.epidural), int(r.fgr), int(r.gbs),
                repr(r.ga_weeks), repr(r.bmi), r.treatment,
                *("" if v is None else repr(v)
                  for v in (r.rom_admit_h, r.rom_agent_h,
                            r.aug_fully_h, r.aug_deliv_h)),
                int(r.cs),
            ])


# -- Box-Cox ------------------------------------------------------------------


# Below this the power form (y^lam - 1)/lam has no float precision left;
# the log limit is the better evaluation and keeps the transform invertible.
_LAM_TINY = 1e-6


def boxcox(y, lam: float):
    """(y^lam - 1)/lam for lam != 0, ln(y) at lam = 0; requires y > 0."""
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0.0):
        raise ValueError("Box-Cox requires strictly positive values")
    if abs(lam) < _LAM_TINY:
        out = np.log(y)
    else:
        out = (np.power(y, lam) - 1.0) / lam
    return float(out) if out.ndim == 0 else out


def inv_boxcox(z, lam: float):
    """Inverse transform; defined where lam*z + 1 > 0 (always, at lam = 0)."""
    z = np.asarray(z, dtype=float)
    if abs(lam) < _LAM_TINY:
        out = np.exp(z)
    else:
        base = lam * z + 1.0
        if np.any(base <= 0.0):
            raise ValueError("inverse Box-Cox undefined: lam*z + 1 <= 0")
        out = np.power(base, 1.0 / lam)
    return float(out) if out.ndim == 0 else out


def boxcox_loglik(values: np.ndarray, lam: float) -> float:
    """Gaussian profile log-likelihood of the transformed sample."""
    t = boxcox(values, lam)
    var = float(np.var(t))
    if var <= 0.0:
        return -np.inf
    n = values.size
    return -0.5 * n * np.log(var) + (lam - 1.0) * float(np.sum(np.log(values)))


def fit_lambda(values) -> float:
    """Pick the Box-Cox exponent by profile likelihood over a fixed grid.

    The grid is lam in [-2, 2] with step 0.01; ties resolve to the first
    grid maximum, so the result is deterministic.
    """
    values = np.asarray(values, dtype=float)
    if values.size < 5:
        raise ValueError("fit_lambda needs at least 5 values")
    if np.any(values <= 0.0):
        raise ValueError("fit_lambda requires strictly positive values")
    if float(np.var(np.log(values))) == 0.0:
        raise ValueError("degenerate sample: zero variance")
    lls = np.array([boxcox_loglik(values, lam) for lam in LAMBDA_GRID])
    return float(LAMBDA_GRID[int(np.argmax(lls))])


@dataclass(frozen=True)
class OutcomeTransform:
    """Fitted Box-Cox + standardization for one outcome; invertible on y>0."""

    outcome_name: str
    lam: float
    center: float
    scale: float

    def __post_init__(self):
        if not self.scale > 0.0:
            raise ValueError("scale must be positive")

    def apply(self, y):
        return (boxcox(y, self.lam) - self.center) / self.scale

    def invert(self, z):
        return inv_boxcox(np.asarray(z, dtype=float) * self.scale + self.center,
                          self.lam)

    def to_dict(self) -> dict:
        return {"outcome": self.outcome_name, "lambda": self.lam,
                "center": self.center, "scale": self.scale}


# -- preprocessing ------------------------------------------------------------


@dataclass(frozen=True)
class PreparedData:
    """Model-ready view of a cohort.

    Design matrices hold centered covariate columns (the Position+Consistency
    covariate is handled separately because its value varies over the
    marginalized categories for rows where it is missing).  Continuous
    outcomes are Box-Cox transformed and standardized; absent cells carry a
    zero with a zero mask weight.
    """

    n: int
    design: dict            # outcome -> (n, p) ndarray
    design_columns: dict    # outcome -> tuple of family names
    y: dict                 # continuous outcome -> standardized values (0 where absent)
    y_mask: dict            # continuous outcome -> 0/1 weights
    cs: np.ndarray          # 0/1
    nullip_raw: np.ndarray  # 0/1, for the ordinal imputation predictor
    pit_raw: np.ndarray     # 0/1
    poscon_values: np.ndarray   # int, -1 where missing
    poscon_mean: float          # mean over observed values
    transforms: dict        # outcome -> OutcomeTransform

    def __post_init__(self):
        for out, mat in self.design.items():
            if mat.shape[0] != self.n:
                raise ValueError(f"design[{out}] row count != n")
        for out in CONTINUOUS_OUTCOMES:
            if self.y[out].shape != (self.n,) or self.y_mask[out].shape != (self.n,):
                raise ValueError(f"outcome block {out} shape mismatch")

    @property
    def poscon_obs_idx(self) -> np.ndarray:
        return np.nonzero(self.poscon_values >= 0)[0]

    @property
    def poscon_mis_idx(self) -> np.ndarray:
        return np.nonzero(self.poscon_values < 0)[0]


def _covariate_column(cohort: Cohort, family: str) -> np.ndarray:
    if family == "dilation":
        return cohort.column("dilation_pts")
    if family == "effacement":
        return cohort.column("effacement_pts")
    if family == "station":
        return cohort.column("station_pts")
    if family == "treatment":
        return np.array([1.0 if r.treatment == "PIT" else 0.0
                         for r in cohort.records])
    if family in ("nullip", "epidural", "fgr", "gbs"):
        return cohort.column(family)
    if family == "bmi":
        return cohort.column("bmi")
    if family == "ga":
        return cohort.column("ga_weeks")
    raise KeyError(f"no covariate column for family {family!r}")


def preprocess_outcomes(cohort: Cohort, lambdas: Optional[dict] = None):
    """Build the model-ready design and outcome blocks.

    Continuous outcomes get a per-outcome Box-Cox exponent (profile
    likelihood unless pinned via ``lambdas``), then standardization to
    sample mean 0 / sd 1 over present values.  Covariate columns are
    centered (bmi and ga z-scored); the intercept-free linear predictors
    rely on every column having mean zero against the mean-zero outcomes.

    Returns ``(PreparedData, [OutcomeTransform, ...])``.
    """
    lambdas = lambdas or {}
    n = cohort.n

    transforms = []
    y, y_mask = {}, {}
    for out in CONTINUOUS_OUTCOMES:
        raw = cohort.column(OUTCOME_FIELDS[out])
        present = ~np.isnan(raw)
        vals = raw[present]
        if vals.size < 5:
            raise ValueError(f"outcome {out}: fewer than 5 present values")
        lam = float(lambdas[out]) if out in lambdas else fit_lambda(vals)
        t = boxcox(vals, lam)
        center = float(np.mean(t))
        scale = float(np.std(t, ddof=1))
        if scale <= 0.0:
            raise ValueError(f"outcome {out}: degenerate variance")
        tr = OutcomeTransform(out, lam, center, scale)
        transforms.append(tr)
        z = np.zeros(n)
        z[present] = (t - center) / scale
        y[out] = z
        y_mask[out] = present.astype(float)

    columns = {}
    for family in ("dilation", "effacement", "station", "treatment",
                   "nullip", "epidural", "fgr", "gbs", "bmi", "ga"):
        col = _covariate_column(cohort, family)
        if family in ("bmi", "ga"):
            sd = float(np.std(col, ddof=1))
            col = (col - np.mean(col)) / (sd if sd > 0 else 1.0)
        else:
            col = col - np.mean(col)
        columns[family] = col

    design, design_columns = {}, {}
    for out in ALL_OUTCOMES:
        fams = tuple(f for f in SHARED_COVARIATES if f != "poscon")
        fams = fams + EXTRA_COVARIATES[out]
        design[out] = np.column_stack([columns[f] for f in fams])
        design_columns[out] = fams

    poscon = np.array([-1 if r.poscon_pts is None else r.poscon_pts
                       for r in cohort.records], dtype=int)
    observed = poscon[poscon >= 0]
    if observed.size == 0:
        raise ValueError("no observed poscon values in cohort")
    prepared = PreparedData(
        n=n,
        design=design,
        design_columns=design_columns,
        y=y,
        y_mask=y_mask,
        cs=cohort.column("cs"),
        nullip_raw=cohort.column("nullip"),
        pit_raw=np.array([1.0 if r.treatment == "PIT" else 0.0
                          for r in cohort.records]),
        poscon_values=poscon,
        poscon_mean=float(np.mean(observed)),
        transforms={t.outcome_name: t for t in transforms},
    )
    return prepared, transforms
