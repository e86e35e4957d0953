"""Observed longitudinal data, term-based designs and regimen enumeration.

A dataset holds ``K`` periods.  Period ``k`` contributes a covariate block
``L_k`` (possibly empty) followed by a binary treatment ``A_k``; a single
real outcome ``Y`` is observed at the end.  Periods are 1-based everywhere in
the public API, matching the usual ``L_1, A_1, ..., L_K, A_K, Y`` notation.

Design matrices are built from small immutable term objects.  Every term is
evaluated against a dataset and an ``(n, K)`` treatment matrix ``T`` whose
columns hold either observed treatments or counterfactual values, so the
same spec can be evaluated on the observed history, on a counterfactual tail
``a_{k+1..K}``, or on a fully specified regimen.
"""
from __future__ import annotations

import csv
import io
import itertools
import os
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from .errors import (
    ConfigError,
    KTooLarge,
    MissingColumn,
    NonBinaryTreatment,
    NonNumericCell,
    TermPeriodOutOfRange,
)

MAX_K = 16


@dataclass(frozen=True, eq=False)
class LongitudinalDataset:
    """n subjects observed over K periods.

    Parameters
    ----------
    covariates : sequence of (n, p_k) arrays, one per period (p_k may be 0)
    treatments : (n, K) array of 0/1
    outcome : (n,) array
    covariate_names : per-period column labels
    treatment_names, outcome_name : labels used when writing CSV
    """

    covariates: tuple
    treatments: np.ndarray
    outcome: np.ndarray
    covariate_names: tuple
    treatment_names: tuple = ()
    outcome_name: str = "Y"
    _index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        A = np.asarray(self.treatments)
        if A.ndim != 2 or A.shape[1] < 1:
            raise ConfigError("treatments must be an (n, K) array with K >= 1")
        n, K = A.shape
        if not np.all((A == 0) | (A == 1)):
            bad = np.argwhere((A != 0) & (A != 1))[0]
            raise NonBinaryTreatment(
                f"non-binary treatment at row {bad[0] + 1}, period {bad[1] + 1}")
        covs = tuple(np.asarray(c, dtype=float).reshape(n, -1) for c in self.covariates)
        if len(covs) != K:
            raise ConfigError(f"expected {K} covariate blocks, got {len(covs)}")
        y = np.asarray(self.outcome, dtype=float).reshape(-1)
        if y.shape[0] != n:
            raise ConfigError("outcome length differs from number of subjects")
        names = tuple(tuple(str(s) for s in blk) for blk in self.covariate_names)
        if len(names) != K or any(len(nm) != c.shape[1] for nm, c in zip(names, covs)):
            raise ConfigError("covariate_names do not match covariate blocks")
        tnames = tuple(self.treatment_names) or tuple(f"A{k}" for k in range(1, K + 1))
        object.__setattr__(self, "covariates", covs)
        object.__setattr__(self, "treatments", A.astype(np.int8))
        object.__setattr__(self, "outcome", y)
        object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "treatment_names", tnames)
        index = {}
        for k, blk in enumerate(names, start=1):
            for j, nm in enumerate(blk):
                index[nm] = (k, j)
        object.__setattr__(self, "_index", index)

    @property
    def n(self) -> int:
        return self.treatments.shape[0]

    @property
    def K(self) -> int:
        return self.treatments.shape[1]

    def treatment_matrix(self) -> np.ndarray:
        return self.treatments.astype(float)

    def locate(self, name: str) -> tuple:
        """(period, column) of a named covariate."""
        try:
            return self._index[name]
        except KeyError:
            raise MissingColumn(f"unknown covariate {name!r}") from None

    def column(self, period: int, column) -> np.ndarray:
        if isinstance(column, str):
            p, j = self.locate(column)
            if p != period:
                raise TermPeriodOutOfRange(
                    f"covariate {column} belongs to period {p}, not {period}")
            column = j
        if not 1 <= period <= self.K:
            raise TermPeriodOutOfRange(f"period {period} outside 1..{self.K}")
        blk = self.covariates[period - 1]
        if not 0 <= column < blk.shape[1]:
            raise MissingColumn(f"period {period} has no column {column}")
        return blk[:, column]

    def take(self, idx) -> "LongitudinalDataset":
        idx = np.asarray(idx)
        return LongitudinalDataset(
            covariates=tuple(c[idx] for c in self.covariates),
            treatments=self.treatments[idx],
            outcome=self.outcome[idx],
            covariate_names=self.covariate_names,
            treatment_names=self.treatment_names,
            outcome_name=self.outcome_name,
        )

    def drop_covariate(self, name: str) -> "LongitudinalDataset":
        k, j = self.locate(name)
        covs = list(self.covariates)
        names = list(self.covariate_names)
        covs[k - 1] = np.delete(covs[k - 1], j, axis=1)
        names[k - 1] = tuple(s for s in names[k - 1] if s != name)
        return LongitudinalDataset(tuple(covs), self.treatments, self.outcome,
                                   tuple(names), self.treatment_names, self.outcome_name)

    def with_outcome(self, y) -> "LongitudinalDataset":
        return LongitudinalDataset(self.covariates, self.treatments, y,
                                   self.covariate_names, self.treatment_names,
                                   self.outcome_name)

    def columns(self) -> list:
        """Column names in period order: L_1 block, A_1, ..., L_K block, A_K, Y."""
        out = []
        for k in range(self.K):
            out.extend(self.covariate_names[k])
            out.append(self.treatment_names[k])
        out.append(self.outcome_name)
        return out

    def schema(self) -> dict:
        sch = {}
        for k in range(self.K):
            for nm in self.covariate_names[k]:
                sch[nm] = {"role": "covariate", "period": k + 1}
            sch[self.treatment_names[k]] = {"role": "treatment", "period": k + 1}
        sch[self.outcome_name] = {"role": "outcome"}
        return sch


# ---------------------------------------------------------------------------
# terms


class Term:
    """Base class; subclasses are frozen dataclasses."""

    def evaluate(self, data: LongitudinalDataset, T: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def children(self) -> tuple:
        return ()

    def walk(self):
        yield self
        for c in self.children():
            yield from c.walk()


@dataclass(frozen=True)
class Intercept(Term):
    def evaluate(self, data, T):
        return np.ones(T.shape[0])

    def __str__(self):
        return "1"


@dataclass(frozen=True)
class Covariate(Term):
    period: int
    column: Union[int, str]

    def evaluate(self, data, T):
        return data.column(self.period, self.column)

    def __str__(self):
        return self.column if isinstance(self.column, str) else f"L{self.period}[{self.column}]"


@dataclass(frozen=True)
class Treatment(Term):
    """Treatment at a period inside the model's own history."""

    period: int

    def evaluate(self, data, T):
        return T[:, self.period - 1]

    def __str__(self):
        return f"A{self.period}"


@dataclass(frozen=True)
class FutureTreatment(Term):
    """Counterfactual treatment a_j for a period after the model's own."""

    period: int

    def evaluate(self, data, T):
        return T[:, self.period - 1]

    def __str__(self):
        return f"a{self.period}"


@dataclass(frozen=True)
class Square(Term):
    term: Term

    def evaluate(self, data, T):
        v = self.term.evaluate(data, T)
        return v * v

    def children(self):
        return (self.term,)

    def __str__(self):
        return f"sq({self.term})"


@dataclass(frozen=True)
class Interaction(Term):
    left: Term
    right: Term

    def evaluate(self, data, T):
        return self.left.evaluate(data, T) * self.right.evaluate(data, T)

    def children(self):
        return (self.left, self.right)

    def __str__(self):
        return f"{self.left}*{self.right}"


@dataclass(frozen=True)
class IndicatorPositive(Term):
    term: Term

    def evaluate(self, data, T):
        return (self.term.evaluate(data, T) > 0).astype(float)

    def children(self):
        return (self.term,)

    def __str__(self):
        return f"pos({self.term})"


@dataclass(frozen=True)
class TermSpec:
    """Ordered list of terms defining the columns of a design matrix."""

    terms: tuple

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))

    def __len__(self):
        return len(self.terms)

    def __iter__(self):
        return iter(self.terms)

    def __str__(self):
        return " + ".join(str(t) for t in self.terms)

    @property
    def has_future(self) -> bool:
        return any(isinstance(t, FutureTreatment) for term in self.terms for t in term.walk())

    def covariate_names(self) -> set:
        return {t.column for term in self.terms for t in term.walk()
                if isinstance(t, Covariate) and isinstance(t.column, str)}

    def without_covariate(self, name: str) -> "TermSpec":
        """Drop every term that touches covariate ``name``."""
        keep = [t for t in self.terms
                if not any(isinstance(s, Covariate) and s.column == name for s in t.walk())]
        return TermSpec(tuple(keep))

    def validate(self, data: LongitudinalDataset, period: int,
                 max_treatment: int | None = None, allow_future: bool = True) -> None:
        """Check that every term is evaluable for a model at ``period``.

        ``max_treatment`` bounds ``Treatment`` periods (``period - 1`` for a
        propensity model, ``period`` for an outcome model).
        """
        K = data.K
        if not 1 <= period <= K:
            raise TermPeriodOutOfRange(f"model period {period} outside 1..{K}")
        mt = period if max_treatment is None else max_treatment
        for term in self.terms:
            for t in term.walk():
                if isinstance(t, Covariate):
                    if not 1 <= t.period <= period:
                        raise TermPeriodOutOfRange(
                            f"term {t} references period {t.period} in a period-{period} model")
                    data.column(t.period, t.column)
                elif isinstance(t, Treatment):
                    if not 1 <= t.period <= mt:
                        raise TermPeriodOutOfRange(
                            f"term {t} references treatment period {t.period}; allowed 1..{mt}")
                elif isinstance(t, FutureTreatment):
                    if not allow_future or not period < t.period <= K:
                        raise TermPeriodOutOfRange(
                            f"term {t} must reference a period in {period + 1}..{K}")


def as_spec(terms) -> TermSpec:
    if isinstance(terms, TermSpec):
        return terms
    return TermSpec(tuple(terms))


def design_from_T(data: LongitudinalDataset, spec: TermSpec, T: np.ndarray) -> np.ndarray:
    """Evaluate ``spec`` with treatment matrix ``T`` (no validation)."""
    n = data.n
    if len(spec) == 0:
        return np.zeros((n, 0))
    cols = [np.broadcast_to(t.evaluate(data, T), (n,)) for t in spec.terms]
    return np.column_stack(cols).astype(float, copy=False)


def treatment_matrix(data: LongitudinalDataset, period: int, tail=None, override=None) -> np.ndarray:
    """Observed treatments with an optional prefix override and counterfactual tail."""
    T = data.treatment_matrix()
    if override is not None:
        ov = np.asarray(override, dtype=float)
        m = ov.shape[-1]
        if m > period:
            raise TermPeriodOutOfRange(f"override of length {m} exceeds period {period}")
        T[:, :m] = ov
    if tail is not None:
        tl = np.asarray(tail, dtype=float)
        if tl.shape[-1] != data.K - period:
            raise TermPeriodOutOfRange(
                f"tail length {tl.shape[-1]} != K - period = {data.K - period}")
        T[:, period:] = tl
    return T


def build_design(data: LongitudinalDataset, spec, period: int, tail=None,
                 override=None) -> np.ndarray:
    """Design matrix (n x p) for a model at ``period``.

    ``tail`` supplies the counterfactual treatments a_{k+1..K} (a vector of
    length K - period, or an (n, K - period) array); ``override`` replaces
    the observed prefix A_1..A_m, m <= period.
    """
    spec = as_spec(spec)
    spec.validate(data, period)
    if spec.has_future and tail is None:
        raise TermPeriodOutOfRange("spec has future-treatment terms but no tail given")
    T = treatment_matrix(data, period, tail, override)
    return design_from_T(data, spec, T)


def enumerate_regimens(K: int) -> np.ndarray:
    """All 2^K binary regimens in lexicographic order, shape (2^K, K)."""
    if K < 1:
        raise KTooLarge(f"K must be >= 1, got {K}")
    if K > MAX_K:
        raise KTooLarge(f"K={K} exceeds the cap of {MAX_K}")
    return np.array(list(itertools.product((0, 1), repeat=K)), dtype=np.int8).reshape(2 ** K, K)


# ---------------------------------------------------------------------------
# term parsing

_NAME = re.compile(r"[A-Za-z_][A-Za-z_0-9]*")


def parse_term(text: str, data_or_names) -> Term:
    """Parse a single term.

    Grammar: ``1`` | covariate name | ``A<j>`` | ``a<j>`` | ``sq(t)`` |
    ``pos(t)`` | ``t*t``.  Covariate names are resolved against a dataset (or
    a ``{name: (period, column)}`` mapping); they take priority over the
    treatment shorthands.
    """
    if isinstance(data_or_names, LongitudinalDataset):
        lookup = data_or_names._index
    else:
        lookup = dict(data_or_names)
    s = text.replace(" ", "")
    if not s:
        raise ConfigError("empty term")

    def split_top(expr, sep):
        depth, parts, cur = 0, [], ""
        for ch in expr:
            if ch == "(":
                depth += 1
            elif ch == ")":
                depth -= 1
            if ch == sep and depth == 0:
                parts.append(cur)
                cur = ""
            else:
                cur += ch
        parts.append(cur)
        return parts

    def parse(expr):
        parts = split_top(expr, "*")
        if len(parts) > 1:
            t = parse(parts[0])
            for p in parts[1:]:
                t = Interaction(t, parse(p))
            return t
        if expr == "1":
            return Intercept()
        for fn, cls in (("sq", Square), ("pos", IndicatorPositive)):
            if expr.startswith(fn + "(") and expr.endswith(")"):
                return cls(parse(expr[len(fn) + 1:-1]))
        if _NAME.fullmatch(expr):
            if expr in lookup:
                p, _ = lookup[expr]
                return Covariate(p, expr)
            m = re.fullmatch(r"A(\d+)", expr)
            if m:
                return Treatment(int(m.group(1)))
            m = re.fullmatch(r"a(\d+)", expr)
            if m:
                return FutureTreatment(int(m.group(1)))
        raise ConfigError(f"cannot parse term {expr!r}")

    return parse(s)


def parse_terms(text, data_or_names) -> TermSpec:
    """Parse ``"1 + A1 + L11 + pos(L12)"`` (or a list of term strings)."""
    items = text.split("+") if isinstance(text, str) else list(text)
    return TermSpec(tuple(parse_term(t, data_or_names) for t in items if t.strip()))


# ---------------------------------------------------------------------------
# CSV ingestion


def _read_text(source) -> str:
    if hasattr(source, "read"):
        return source.read()
    if isinstance(source, (str, os.PathLike)) and os.path.exists(source):
        with open(source, newline="") as fh:
            return fh.read()
    return str(source)


def load_dataset(source, schema: Mapping) -> LongitudinalDataset:
    """Read a CSV (path, stream or text) using an explicit column-role schema.

    ``schema`` maps column name -> ``{"role": "covariate"|"treatment"|"outcome",
    "period": k}``.  Columns absent from the schema are ignored.
    """
    reader = csv.reader(io.StringIO(_read_text(source)))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise MissingColumn("empty file: no header row") from None
    rows = [r for r in reader if r]

    roles = {}
    for name, spec in schema.items():
        if isinstance(spec, str):
            spec = {"role": spec}
        roles[name] = (spec["role"], int(spec.get("period", 0)))
    for name, (role, _) in roles.items():
        if name not in header:
            raise MissingColumn(f"schema column {name!r} missing from header")
        if role not in ("covariate", "treatment", "outcome"):
            raise ConfigError(f"unknown role {role!r} for column {name!r}")
    treat = sorted((p, nm) for nm, (r, p) in roles.items() if r == "treatment")
    outs = [nm for nm, (r, _) in roles.items() if r == "outcome"]
    if len(outs) != 1:
        raise MissingColumn("schema must assign exactly one outcome column")
    K = len(treat)
    if K < 1 or [p for p, _ in treat] != list(range(1, K + 1)):
        raise MissingColumn("schema must assign one treatment column to each period 1..K")
    covs = [[] for _ in range(K)]
    for nm in header:
        if nm in roles and roles[nm][0] == "covariate":
            p = roles[nm][1]
            if not 1 <= p <= K:
                raise ConfigError(f"covariate {nm!r} has period {p} outside 1..{K}")
            covs[p - 1].append(nm)

    col_of = {nm: header.index(nm) for nm in roles}

    def cell(i, nm):
        r = rows[i]
        j = col_of[nm]
        raw = r[j].strip() if j < len(r) else ""
        if raw == "":
            raise NonNumericCell(f"missing value at row {i + 1}, column {nm}")
        try:
            return float(raw)
        except ValueError:
            raise NonNumericCell(f"non-numeric value {raw!r} at row {i + 1}, column {nm}") from None

    n = len(rows)
    A = np.empty((n, K))
    for k, (_, nm) in enumerate(treat):
        for i in range(n):
            v = cell(i, nm)
            if v not in (0.0, 1.0):
                raise NonBinaryTreatment(f"non-binary value {v!r} at row {i + 1}, column {nm}")
            A[i, k] = v
    blocks = [np.array([[cell(i, nm) for nm in covs[k]] for i in range(n)]).reshape(n, len(covs[k]))
              for k in range(K)]
    y = np.array([cell(i, outs[0]) for i in range(n)])
    return LongitudinalDataset(tuple(blocks), A, y, tuple(tuple(c) for c in covs),
                               tuple(nm for _, nm in treat), outs[0])


def write_dataset(data: LongitudinalDataset, target=None) -> str:
    """Write CSV in period order with round-trip (repr) float formatting."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(data.columns())
    cols = []
    for k in range(data.K):
        cols.extend(data.covariates[k].T)
        cols.append(data.treatments[:, k])
    cols.append(data.outcome)
    for i in range(data.n):
        w.writerow([repr(float(c[i])) if c.dtype.kind == "f" else str(int(c[i])) for c in cols])
    text = buf.getvalue()
    if target is not None:
        if hasattr(target, "write"):
            target.write(text)
        else:
            with open(target, "w", newline="") as fh:
                fh.write(text)
    return text


def regimen_treatments(n: int, regimen: Sequence[int]) -> np.ndarray:
    """(n, K) treatment matrix with every row set to ``regimen``."""
    return np.broadcast_to(np.asarray(regimen, dtype=float), (n, len(regimen))).copy()


@dataclass(frozen=True)
class StructuralModelSpec:
    """Linear MSQM h(a, Z; theta) = theta' features(a, Z) and weight function rho.

    ``h_terms`` may use ``Treatment`` terms (bound to the regimen) and
    period-1 covariates (the baseline set Z).  ``rho`` is ``"unit"`` or
    ``"stabilized"``.
    """

    h_terms: TermSpec
    rho: str = "stabilized"

    def __post_init__(self):
        object.__setattr__(self, "h_terms", as_spec(self.h_terms))
        if self.rho not in ("unit", "stabilized"):
            raise ConfigError(f"rho must be 'unit' or 'stabilized', got {self.rho!r}")

    @property
    def Z(self) -> tuple:
        """Names of the baseline covariates entering h."""
        out = []
        for term in self.h_terms:
            for t in term.walk():
                if isinstance(t, Covariate) and t.column not in out:
                    out.append(t.column)
        return tuple(out)

    def validate(self, data: LongitudinalDataset) -> None:
        for term in self.h_terms:
            for t in term.walk():
                if isinstance(t, Covariate) and t.period != 1:
                    raise TermPeriodOutOfRange(f"h may only use period-1 covariates, got {t}")
                if isinstance(t, FutureTreatment):
                    raise TermPeriodOutOfRange("use A<j> terms for regimen components in h")
        self.h_terms.validate(data, data.K)

    def features(self, data: LongitudinalDataset, regimens) -> np.ndarray:
        """(n, R, p) array of h-features at every subject and regimen."""
        self.validate(data)
        regs = np.atleast_2d(regimens)
        return np.stack([design_from_T(data, self.h_terms, regimen_treatments(data.n, r))
                         for r in regs], axis=1)

    def observed_features(self, data: LongitudinalDataset) -> np.ndarray:
        self.validate(data)
        return design_from_T(data, self.h_terms, data.treatment_matrix())


def linear_msqm(K: int, rho: str = "stabilized") -> StructuralModelSpec:
    """h = theta_0 + sum_k theta_k a_k."""
    return StructuralModelSpec(TermSpec((Intercept(),) + tuple(Treatment(k) for k in range(1, K + 1))), rho)
