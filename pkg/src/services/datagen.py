"""Synthetic multi-site datasets for the simulation study.

Each dataset draws per-site random effects (mu1, mu2, mu3) ~ N(0, s^2 I3).
mu1 shifts the site's log-odds; mu2 and mu3 perturb the per-row
sensitivity and specificity draws of an imperfect test recorded in the truth
sidecar. Every dataset is a pure function of (seed, setting_id, dataset_index)
through a counter-based Philox stream.
"""

import csv
import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from config.settings import settings
from src.models.domain import SiteData
from src.services.model_core import sigmoid

logger = logging.getLogger(__name__)

TRUE_BETA: Tuple[float, ...] = (-1.5, 0.1, -0.5, -0.3, 0.4, -0.2, -0.25, 0.35, -0.1, 0.5)
BERNOULLI_P = (0.1, 0.3, 0.5)
NORMAL_SPREAD = (0.5, 1.0, 1.5)
UNIFORM_HALF_WIDTH = (0.5, 0.7, 1.0)

# setting_id -> (num_sites, site_size, variance_label)
SETTINGS_TABLE: Dict[int, Tuple[int, int, str]] = {
    1: (2, 500, "small"),
    2: (2, 500, "large"),
    3: (10, 500, "small"),
    4: (10, 500, "large"),
    5: (2, 30, "small"),
    6: (2, 30, "large"),
    7: (10, 30, "small"),
    8: (10, 30, "large"),
}

TRUTH_HEADER = "kind,site_id,index,value"
_META_KINDS = ("setting", "dataset", "seed")
_ROW_KINDS = ("log_odds", "sensitivity_draw", "specificity_draw", "tp", "fn", "tn", "fp")


class DatasetFormatError(Exception):
    """Raised when a data or truth file cannot be read."""

    def __init__(self, path, message: str, line: Optional[int] = None, column: Optional[int] = None):
        self.path = str(path)
        self.line = line
        self.column = column
        location = self.path
        if line is not None:
            location += f":{line}"
            if column is not None:
                location += f":{column}"
        self.message = f"{location}: {message}"
        super().__init__(self.message)


class GenSetting(BaseModel):
    """One row of the settings table plus the generator knobs."""
    setting_id: int = Field(..., ge=1, le=8)
    num_sites: int
    site_size: int
    variance_label: Literal["small", "large"]
    num_datasets: int = Field(default=20, ge=1)
    seed: int = Field(default=settings.DEFAULT_SEED, ge=0, lt=2 ** 64)
    true_beta: Tuple[float, ...] = TRUE_BETA
    sen: float = Field(default=0.6, ge=0.0, le=1.0)
    sp: float = Field(default=0.9, ge=0.0, le=1.0)
    small_sd: float = Field(default=1.0, gt=0.0)
    large_sd: float = Field(default=2.0, gt=0.0)
    spread_is_variance: bool = False
    epsilon_sd: float = Field(default=0.0, ge=0.0)

    model_config = ConfigDict(frozen=True, extra="forbid")

    @model_validator(mode="after")
    def _matches_table(self):
        expected = SETTINGS_TABLE[self.setting_id]
        if (self.num_sites, self.site_size, self.variance_label) != expected:
            raise ValueError(f"Setting {self.setting_id} is {expected}, got "
                             f"{(self.num_sites, self.site_size, self.variance_label)}")
        if len(self.true_beta) != len(TRUE_BETA):
            raise ValueError(f"true_beta must have {len(TRUE_BETA)} entries")
        return self

    @classmethod
    def from_table(cls, setting_id: int, **knobs) -> "GenSetting":
        if setting_id not in SETTINGS_TABLE:
            raise ValueError(f"Unknown setting {setting_id}; valid settings are 1..8")
        num_sites, site_size, variance_label = SETTINGS_TABLE[setting_id]
        return cls(setting_id=setting_id, num_sites=num_sites, site_size=site_size,
                   variance_label=variance_label, **knobs)

    @property
    def random_effect_sd(self) -> float:
        return self.small_sd if self.variance_label == "small" else self.large_sd

    @property
    def normal_sds(self) -> Tuple[float, ...]:
        if self.spread_is_variance:
            return tuple(math.sqrt(v) for v in NORMAL_SPREAD)
        return NORMAL_SPREAD


@dataclass(eq=False)
class DatasetTruth:
    """Ground truth behind one generated dataset; per-row arrays follow site order."""
    true_beta: np.ndarray
    random_effects: np.ndarray
    log_odds: np.ndarray
    sensitivity_draw: np.ndarray
    specificity_draw: np.ndarray
    tp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray
    fp: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, DatasetTruth):
            return NotImplemented
        return all(np.array_equal(getattr(self, name), getattr(other, name)) for name in self.__dataclass_fields__)

    __hash__ = None

    def confusion_totals(self) -> Dict[str, int]:
        return {name: int(np.sum(getattr(self, name))) for name in ("tp", "fn", "tn", "fp")}


@dataclass(eq=False)
class GeneratedDataset:
    setting_id: int
    dataset_index: int
    seed: int
    sites: List[SiteData]
    truth: DatasetTruth

    def __eq__(self, other):
        if not isinstance(other, GeneratedDataset):
            return NotImplemented
        return (
            (self.setting_id, self.dataset_index, self.seed) == (other.setting_id, other.dataset_index, other.seed)
            and self.sites == other.sites
            and self.truth == other.truth
        )

    __hash__ = None

    @property
    def stem(self) -> str:
        return dataset_stem(self.setting_id, self.dataset_index)


@dataclass(frozen=True)
class DatasetFiles:
    data_path: Path
    truth_path: Path


def dataset_stem(setting_id: int, dataset_index: int) -> str:
    return f"setting{setting_id}_{dataset_index:02d}"


def _stream(seed: int, setting_id: int, dataset_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, setting_id, dataset_index])))


def generate(setting: GenSetting, dataset_index: int) -> GeneratedDataset:
    """Draw one dataset of the given setting.

    Args:
        setting: Settings row and generator knobs
        dataset_index: 0 <= dataset_index < setting.num_datasets

    Returns:
        GeneratedDataset with site_ids 1..num_sites and its ground truth
    """
    if not 0 <= dataset_index < setting.num_datasets:
        raise ValueError(f"dataset_index must be in [0, {setting.num_datasets}), got {dataset_index}")

    rng = _stream(setting.seed, setting.setting_id, dataset_index)
    beta = np.asarray(setting.true_beta, dtype=float)
    n = setting.site_size
    s = setting.random_effect_sd

    sites, effects = [], []
    per_row: Dict[str, List[np.ndarray]] = {name: [] for name in _ROW_KINDS}
    for site_id in range(1, setting.num_sites + 1):
        mu = rng.normal(0.0, s, size=3)
        columns = [np.ones(n)]
        columns += [(rng.random(n) < p).astype(float) for p in BERNOULLI_P]
        columns += [rng.normal(0.0, sd, size=n) for sd in setting.normal_sds]
        columns += [rng.uniform(-a, a, size=n) for a in UNIFORM_HALF_WIDTH]
        X = np.column_stack(columns)

        log_odds = X @ beta + mu[0]
        if setting.epsilon_sd > 0.0:
            log_odds = log_odds + rng.normal(0.0, setting.epsilon_sd, size=n)
        y = rng.random(n) < sigmoid(log_odds)

        # mu2, mu3 perturb the test's sensitivity and specificity
        sen_draw = rng.random(n) < np.clip(setting.sen + mu[1], 0.0, 1.0)
        sp_draw = rng.random(n) < np.clip(setting.sp + mu[2], 0.0, 1.0)
        test_positive = np.where(y, sen_draw, ~sp_draw)

        sites.append(SiteData(site_id=site_id, X=X, y=y.astype(float)))
        effects.append(mu)
        per_row["log_odds"].append(log_odds)
        per_row["sensitivity_draw"].append(sen_draw.astype(int))
        per_row["specificity_draw"].append(sp_draw.astype(int))
        per_row["tp"].append((y & test_positive).astype(int))
        per_row["fn"].append((y & ~test_positive).astype(int))
        per_row["tn"].append((~y & ~test_positive).astype(int))
        per_row["fp"].append((~y & test_positive).astype(int))

    truth = DatasetTruth(
        true_beta=beta,
        random_effects=np.array(effects),
        **{name: np.concatenate(parts) for name, parts in per_row.items()},
    )
    logger.debug(f"Generated setting {setting.setting_id} dataset {dataset_index}: "
                 f"prevalence {np.mean([s.y.mean() for s in sites]):.3f}")
    return GeneratedDataset(setting.setting_id, dataset_index, setting.seed, sites, truth)


def _real(x: float) -> str:
    return format(float(x), ".17g")


def data_header(p: int) -> str:
    return ",".join(["site_id", "y"] + [f"x{j}" for j in range(1, p + 1)])


def write_sites(sites: List[SiteData], path: Path) -> Path:
    """Write sites as one comma-separated table, header site_id,y,x1..xp."""
    path = Path(path)
    p = sites[0].p
    lines = [data_header(p)]
    for site in sites:
        for x, y in zip(site.X, site.y):
            lines.append(",".join([str(site.site_id), str(int(y))] + [_real(v) for v in x]))
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise DatasetFormatError(path, f"cannot write data file: {e}")
    return path


def write_dataset(ds: GeneratedDataset, directory) -> DatasetFiles:
    """Write the data table and its truth sidecar into directory."""
    directory = Path(directory)
    data_path = write_sites(ds.sites, directory / f"{ds.stem}.csv")
    truth_path = directory / f"{ds.stem}_truth.csv"

    lines = [TRUTH_HEADER]
    lines += [f"{kind},0,0,{value}" for kind, value in zip(_META_KINDS, (ds.setting_id, ds.dataset_index, ds.seed))]
    lines += [f"beta,0,{j},{_real(b)}" for j, b in enumerate(ds.truth.true_beta)]
    for site, mu in zip(ds.sites, ds.truth.random_effects):
        lines += [f"mu,{site.site_id},{k},{_real(v)}" for k, v in enumerate(mu)]
    offset = 0
    for site in ds.sites:
        for kind in _ROW_KINDS:
            values = getattr(ds.truth, kind)[offset:offset + site.n_i]
            render = _real if kind == "log_odds" else (lambda v: str(int(v)))
            lines += [f"{kind},{site.site_id},{j},{render(v)}" for j, v in enumerate(values)]
        offset += site.n_i
    try:
        truth_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise DatasetFormatError(truth_path, f"cannot write truth file: {e}")
    return DatasetFiles(data_path=data_path, truth_path=truth_path)


def _open_rows(path: Path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise DatasetFormatError(path, f"cannot read file: {e}")
    except UnicodeDecodeError as e:
        raise DatasetFormatError(path, f"not UTF-8 text: {e}")
    return list(csv.reader(text.splitlines()))


def read_sites(path) -> List[SiteData]:
    """Parse a site_id,y,x1..xp table into SiteData ordered by site_id.

    Raises:
        DatasetFormatError: With line and column of the first offending field
    """
    path = Path(path)
    rows = _open_rows(path)
    if not rows:
        raise DatasetFormatError(path, "empty file", line=1)
    header = rows[0]
    p = len(header) - 2
    if p < 1 or ",".join(header) != data_header(p):
        raise DatasetFormatError(path, f"header must be {data_header(max(p, 1))!r}, got {','.join(header)!r}", line=1)

    by_site: Dict[int, Tuple[List[List[float]], List[float]]] = {}
    for line_no, fields in enumerate(rows[1:], start=2):
        if not fields:
            continue
        if len(fields) != p + 2:
            raise DatasetFormatError(path, f"expected {p + 2} fields, got {len(fields)}", line=line_no,
                                     column=min(len(fields), p + 2) + 1)
        try:
            site_id = int(fields[0])
        except ValueError:
            raise DatasetFormatError(path, f"site_id {fields[0]!r} is not an integer", line=line_no, column=1)
        if fields[1] not in ("0", "1"):
            raise DatasetFormatError(path, f"outcome {fields[1]!r} is not 0 or 1", line=line_no, column=2)
        x = []
        for col, field in enumerate(fields[2:], start=3):
            try:
                value = float(field)
            except ValueError:
                raise DatasetFormatError(path, f"covariate {field!r} is not a number", line=line_no, column=col)
            if not math.isfinite(value):
                raise DatasetFormatError(path, f"covariate {field!r} is not finite", line=line_no, column=col)
            x.append(value)
        if x[0] != 1.0:
            raise DatasetFormatError(path, "x1 must be the intercept column of ones", line=line_no, column=3)
        xs, ys = by_site.setdefault(site_id, ([], []))
        xs.append(x)
        ys.append(float(fields[1]))

    if not by_site:
        raise DatasetFormatError(path, "no data rows", line=2)
    return [SiteData(site_id=sid, X=np.array(xs), y=np.array(ys)) for sid, (xs, ys) in sorted(by_site.items())]


def truth_path_for(data_path) -> Path:
    data_path = Path(data_path)
    return data_path.with_name(f"{data_path.stem}_truth.csv")


def read_truth(path, sites: List[SiteData]) -> Tuple[Tuple[int, int, int], DatasetTruth]:
    path = Path(path)
    rows = _open_rows(path)
    if not rows or ",".join(rows[0]) != TRUTH_HEADER:
        raise DatasetFormatError(path, f"header must be {TRUTH_HEADER!r}", line=1)

    meta: Dict[str, int] = {}
    beta: Dict[int, float] = {}
    mu: Dict[Tuple[int, int], float] = {}
    per_row: Dict[str, Dict[Tuple[int, int], float]] = {kind: {} for kind in _ROW_KINDS}
    for line_no, fields in enumerate(rows[1:], start=2):
        if not fields:
            continue
        if len(fields) != 4:
            raise DatasetFormatError(path, f"expected 4 fields, got {len(fields)}", line=line_no)
        kind = fields[0]
        try:
            site_id, index = int(fields[1]), int(fields[2])
        except ValueError:
            raise DatasetFormatError(path, "site_id and index must be integers", line=line_no, column=2)
        try:
            value = int(fields[3]) if kind in _META_KINDS else float(fields[3])
        except ValueError:
            raise DatasetFormatError(path, f"value {fields[3]!r} is not a number", line=line_no, column=4)
        if kind in _META_KINDS:
            meta[kind] = value
        elif kind == "beta":
            beta[index] = value
        elif kind == "mu":
            mu[(site_id, index)] = value
        elif kind in per_row:
            per_row[kind][(site_id, index)] = value
        else:
            raise DatasetFormatError(path, f"unknown kind {kind!r}", line=line_no, column=1)

    missing = [k for k in _META_KINDS if k not in meta]
    if missing:
        raise DatasetFormatError(path, f"missing {', '.join(missing)} records")

    def collect(kind: str, dtype):
        try:
            return np.array([per_row[kind][(s.site_id, j)] for s in sites for j in range(s.n_i)], dtype=dtype)
        except KeyError as e:
            raise DatasetFormatError(path, f"{kind} record missing for (site_id, index) {e.args[0]}")

    try:
        effects = np.array([[mu[(s.site_id, k)] for k in range(3)] for s in sites])
    except KeyError as e:
        raise DatasetFormatError(path, f"mu record missing for (site_id, index) {e.args[0]}")
    truth = DatasetTruth(
        true_beta=np.array([beta[j] for j in sorted(beta)]),
        random_effects=effects,
        log_odds=collect("log_odds", float),
        **{kind: collect(kind, int) for kind in _ROW_KINDS if kind != "log_odds"},
    )
    return (meta["setting"], meta["dataset"], meta["seed"]), truth


def read_dataset(data_path, truth_path=None) -> GeneratedDataset:
    """Inverse of write_dataset."""
    sites = read_sites(data_path)
    truth_path = truth_path_for(data_path) if truth_path is None else Path(truth_path)
    (setting_id, dataset_index, seed), truth = read_truth(truth_path, sites)
    return GeneratedDataset(setting_id, dataset_index, seed, sites, truth)


def generate_setting(setting: GenSetting, directory) -> List[DatasetFiles]:
    """Generate and write every dataset of a setting."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for index in range(setting.num_datasets):
        files.append(write_dataset(generate(setting, index), directory))
    logger.info(f"Wrote {len(files)} datasets of setting {setting.setting_id} to {directory}")
    return files


_STEM = re.compile(r"^setting(\d+)_(\d+)$")


def parse_stem(stem: str) -> Optional[Tuple[int, int]]:
    m = _STEM.match(stem)
    return (int(m.group(1)), int(m.group(2))) if m else None
