"""Domain types and long-format CSV ingestion for asynchronous multimodal data.

A record holds the modality blocks observed at one subject visit.  Blocks are
always stored concatenated in ascending modality order, whatever the column
order of the source file.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import yaml

from .errors import ConfigError, DataError

DEFAULT_MISSING = ("", "NA")


@dataclass(frozen=True)
class ModalityLayout:
    """Number of modalities, their block sizes and labels."""

    dims: tuple[int, ...]
    modality_names: tuple[str, ...]
    variable_names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "modality_names", tuple(self.modality_names))
        object.__setattr__(self, "variable_names", tuple(self.variable_names))
        if len(self.dims) < 1:
            raise ConfigError("layout needs at least one modality")
        if any(d < 1 for d in self.dims):
            raise ConfigError(f"every modality needs at least one variable, got dims {self.dims}")
        if len(self.modality_names) != len(self.dims):
            raise ConfigError("one name per modality required")
        if len(self.variable_names) != sum(self.dims):
            raise ConfigError("one name per variable required")
        if len(set(self.variable_names)) != len(self.variable_names):
            raise ConfigError("variable labels must be unique")

    @classmethod
    def from_blocks(cls, blocks: Mapping[str, Sequence[str]]) -> "ModalityLayout":
        names = list(blocks)
        variables = [v for n in names for v in blocks[n]]
        return cls(tuple(len(blocks[n]) for n in names), tuple(names), tuple(variables))

    @classmethod
    def generic(cls, dims: Sequence[int]) -> "ModalityLayout":
        names = tuple(f"m{k + 1}" for k in range(len(dims)))
        variables = tuple(f"y{k + 1}_{a + 1}" for k, d in enumerate(dims) for a in range(d))
        return cls(tuple(dims), names, variables)

    @property
    def K(self) -> int:
        return len(self.dims)

    @property
    def p(self) -> int:
        return sum(self.dims)

    @property
    def offsets(self) -> tuple[int, ...]:
        return tuple(int(o) for o in np.concatenate([[0], np.cumsum(self.dims)[:-1]]))

    def block(self, k: int) -> slice:
        o = self.offsets[k]
        return slice(o, o + self.dims[k])

    def indices(self, mask: Iterable[int]) -> np.ndarray:
        """Variable indices of the observed blocks, in ascending modality order."""
        return np.concatenate([np.arange(self.block(k).start, self.block(k).stop)
                               for k in sorted(mask)])

    def full_mask(self) -> tuple[int, ...]:
        return tuple(range(self.K))

    def block_variables(self, k: int) -> tuple[str, ...]:
        return self.variable_names[self.block(k)]


@dataclass(frozen=True)
class ObservationRecord:
    """One subject visit.  ``mask`` holds 0-based modality indices."""

    subject_id: str
    visit: int
    time: float
    covariates: np.ndarray
    mask: tuple[int, ...]
    y_obs: np.ndarray

    def __post_init__(self):
        mask = tuple(sorted(int(k) for k in self.mask))
        if not mask:
            raise DataError(f"record {self.subject_id}/{self.visit}: empty modality mask")
        if len(set(mask)) != len(mask):
            raise DataError(f"record {self.subject_id}/{self.visit}: repeated modality in mask")
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "covariates", np.asarray(self.covariates, dtype=float).reshape(-1))
        object.__setattr__(self, "y_obs", np.asarray(self.y_obs, dtype=float).reshape(-1))
        object.__setattr__(self, "time", float(self.time))
        object.__setattr__(self, "visit", int(self.visit))

    @property
    def m(self) -> int:
        return len(self.mask)

    def block(self, k: int, layout: ModalityLayout) -> np.ndarray:
        """The observed values of modality ``k`` (which must be in the mask)."""
        if k not in self.mask:
            raise KeyError(k)
        start = sum(layout.dims[j] for j in self.mask if j < k)
        return self.y_obs[start:start + layout.dims[k]]

    def __eq__(self, other):
        if not isinstance(other, ObservationRecord):
            return NotImplemented
        return (self.subject_id == other.subject_id and self.visit == other.visit
                and self.time == other.time and self.mask == other.mask
                and np.array_equal(self.covariates, other.covariates)
                and np.array_equal(self.y_obs, other.y_obs))

    __hash__ = None


def build_design(record: ObservationRecord, include_time: bool = True) -> np.ndarray:
    """Design vector ``(1, t, x...)``; the time slot is dropped when ``include_time`` is off."""
    head = [1.0, record.time] if include_time else [1.0]
    return np.concatenate([head, record.covariates])


def design_names(covariate_names: Sequence[str], include_time: bool = True) -> tuple[str, ...]:
    head = ("intercept", "time") if include_time else ("intercept",)
    return head + tuple(covariate_names)


@dataclass(frozen=True, eq=False)
class Dataset:
    layout: ModalityLayout
    records: tuple[ObservationRecord, ...]
    covariate_names: tuple[str, ...] = ()
    subjects: dict = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        index: dict[str, list[int]] = {}
        q0 = len(self.covariate_names)
        for pos, rec in enumerate(self.records):
            if any(k < 0 or k >= self.layout.K for k in rec.mask):
                raise DataError(f"record {rec.subject_id}/{rec.visit}: mask {rec.mask} "
                                f"outside layout with K={self.layout.K}")
            want = sum(self.layout.dims[k] for k in rec.mask)
            if rec.y_obs.size != want:
                raise DataError(f"record {rec.subject_id}/{rec.visit}: {rec.y_obs.size} values "
                                f"for mask {rec.mask}, expected {want}")
            if rec.covariates.size != q0:
                raise DataError(f"record {rec.subject_id}/{rec.visit}: {rec.covariates.size} "
                                f"covariates, expected {q0}")
            index.setdefault(rec.subject_id, []).append(pos)
        object.__setattr__(self, "subjects", {s: tuple(v) for s, v in index.items()})

    @property
    def subject_ids(self) -> tuple[str, ...]:
        return tuple(self.subjects)

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    def subject_rows(self) -> np.ndarray:
        """Row of each record's subject in ``subject_ids`` order."""
        order = {s: i for i, s in enumerate(self.subjects)}
        return np.array([order[r.subject_id] for r in self.records], dtype=int)

    def masks(self) -> list[tuple[int, ...]]:
        return sorted({r.mask for r in self.records})

    def dense(self) -> np.ndarray:
        """``n x p`` matrix with NaN for unobserved blocks."""
        out = np.full((len(self.records), self.layout.p), np.nan)
        for i, rec in enumerate(self.records):
            out[i, self.layout.indices(rec.mask)] = rec.y_obs
        return out

    def design_matrix(self, include_time: bool = True) -> np.ndarray:
        width = len(self.covariate_names) + (2 if include_time else 1)
        return np.array([build_design(r, include_time) for r in self.records]).reshape(
            len(self.records), width)

    def covariate_matrix(self) -> np.ndarray:
        return np.array([r.covariates for r in self.records]).reshape(
            len(self.records), len(self.covariate_names))

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.layout == other.layout and self.covariate_names == other.covariate_names
                and self.records == other.records)

    __hash__ = None


def validate(dataset: Dataset) -> dict:
    """Summary of record counts, mask patterns and synchrony."""
    n = len(dataset.records)
    if n == 0:
        raise DataError("no records")
    full = dataset.layout.full_mask()
    patterns = Counter(r.mask for r in dataset.records)
    n_full = patterns.get(full, 0)
    return {
        "n_records": n,
        "n_subjects": dataset.n_subjects,
        "records_per_subject": {s: len(v) for s, v in dataset.subjects.items()},
        "pattern_counts": {
            "+".join(dataset.layout.modality_names[k] for k in m): c
            for m, c in sorted(patterns.items())
        },
        "n_synchronous": n_full,
        "synchrony_pct": 100.0 * n_full / n,
    }


# --------------------------------------------------------------------------
# Long-format CSV
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class LayoutConfig:
    """Column mapping for the long-format CSV plus the modality layout."""

    layout: ModalityLayout
    covariates: tuple[str, ...] = ()
    subject_column: str = "subject_id"
    visit_column: str = "visit"
    time_column: str = "time"
    missing: tuple[str, ...] = DEFAULT_MISSING
    include_time: bool = True

    @classmethod
    def from_dict(cls, cfg: Mapping) -> "LayoutConfig":
        if "modalities" not in cfg:
            raise ConfigError("layout config: missing field 'modalities'")
        mods = cfg["modalities"]
        if not isinstance(mods, Mapping) or not mods:
            raise ConfigError("layout config: 'modalities' must map names to column lists")
        blocks = {str(k): [str(c) for c in v] for k, v in mods.items()}
        missing = cfg.get("missing", list(DEFAULT_MISSING))
        if isinstance(missing, str):
            missing = [missing]
        return cls(
            layout=ModalityLayout.from_blocks(blocks),
            covariates=tuple(str(c) for c in cfg.get("covariates", []) or []),
            subject_column=str(cfg.get("subject_column", "subject_id")),
            visit_column=str(cfg.get("visit_column", "visit")),
            time_column=str(cfg.get("time_column", "time")),
            missing=tuple("" if m is None else str(m) for m in missing),
            include_time=bool(cfg.get("include_time", True)),
        )

    def to_dict(self) -> dict:
        lay = self.layout
        return {
            "modalities": {lay.modality_names[k]: list(lay.block_variables(k)) for k in range(lay.K)},
            "covariates": list(self.covariates),
            "subject_column": self.subject_column,
            "visit_column": self.visit_column,
            "time_column": self.time_column,
            "missing": list(self.missing),
            "include_time": self.include_time,
        }


def load_layout_config(path) -> LayoutConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read layout config {path}: {exc}") from exc
    return LayoutConfig.from_dict(cfg)


def save_layout_config(cfg: LayoutConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


def _number(text: str, where: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise DataError(f"{where}: non-numeric value {text!r}") from None


def ingest_csv(path, config: LayoutConfig) -> Dataset:
    """Read a long-format CSV, one record per row."""
    layout = config.layout
    missing = set(config.missing)
    records = []
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        need = [config.subject_column, config.visit_column, config.time_column,
                *config.covariates, *layout.variable_names]
        absent = [c for c in need if c not in header]
        if absent:
            raise DataError(f"{path}: missing columns {absent}")
        for lineno, row in enumerate(reader, start=2):
            sid = row[config.subject_column]
            where = f"row {lineno} (subject {sid})"
            visit_text = row[config.visit_column]
            try:
                visit = int(visit_text)
            except ValueError:
                raise DataError(f"{where}: non-integer visit {visit_text!r}") from None
            time = _number(row[config.time_column], where)
            covs = []
            for c in config.covariates:
                if row[c].strip() in missing:
                    raise DataError(f"{where}: missing covariate {c!r}")
                covs.append(_number(row[c], where))
            mask, values = [], []
            for k in range(layout.K):
                cells = [row[v].strip() for v in layout.block_variables(k)]
                absent_cells = [c in missing for c in cells]
                if all(absent_cells):
                    continue
                if any(absent_cells):
                    raise DataError(f"{where}: partial modality block "
                                    f"{layout.modality_names[k]!r}")
                mask.append(k)
                values.extend(_number(c, where) for c in cells)
            if not mask:
                raise DataError(f"{where}: no modality observed")
            records.append(ObservationRecord(sid, visit, time, np.array(covs), tuple(mask),
                                             np.array(values)))
    return Dataset(layout, tuple(records), config.covariates)


def write_csv(dataset: Dataset, path, config: LayoutConfig | None = None) -> None:
    """Write ``dataset`` in long format; floats use the shortest round-trip repr."""
    if config is None:
        config = LayoutConfig(dataset.layout, dataset.covariate_names)
    layout = dataset.layout
    token = config.missing[0] if config.missing else ""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([config.subject_column, config.visit_column, config.time_column,
                    *config.covariates, *layout.variable_names])
        for rec in dataset.records:
            cells = [token] * layout.p
            for k in rec.mask:
                vals = rec.block(k, layout)
                for a, v in zip(range(layout.block(k).start, layout.block(k).stop), vals):
                    cells[a] = repr(float(v))
            w.writerow([rec.subject_id, rec.visit, repr(rec.time),
                        *(repr(float(c)) for c in rec.covariates), *cells])


def group_by_mask(dataset: Dataset) -> dict[tuple[int, ...], np.ndarray]:
    """Record positions for each distinct mask."""
    groups: dict[tuple[int, ...], list[int]] = {}
    for i, rec in enumerate(dataset.records):
        groups.setdefault(rec.mask, []).append(i)
    return {m: np.array(v, dtype=int) for m, v in sorted(groups.items())}
