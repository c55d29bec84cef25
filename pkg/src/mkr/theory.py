"""Executable checks of the algebra behind the feature-sharing layers.

* ``check_max_cross_degree``: expands the layer stack symbolically with
  exact rational coefficients and verifies that the highest-order mixed
  item/entity monomial reachable after L layers has item-degree and
  entity-degree exactly 2^(L-1).
* ``check_scalar_sum_form``: the summed layer-1 output collapses to a
  bias plus a double sum with pairwise weights w_i + w_j (the
  factorization-machine-style form).
* ``check_dcn_restriction``: with the first-term projection normalized to 1
  and the second-term partner frozen at its layer-0 value, the unit reduces
  to the residual crossing layer.
* ``check_transfer_matrix_form``: bias-free, the unit equals a 2x2 transfer
  matrix of projection scalars applied blockwise (the cross-stitch form).
* ``correlation_study``: buckets sampled item pairs by common raters and
  reports mean common KG neighbors per bucket (and the reverse direction).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import autodiff as ad
from . import units as un
from .autodiff import ParameterStore, Tensor
from .data import DatasetBundle
from .errors import ContractError, DataError

TERM_BUDGET = 1_000_000


class SymbolTable:
    """Bidirectional name <-> index map for polynomial variables."""

    def __init__(self):
        self.names: list[str] = []
        self._index: dict[str, int] = {}

    def add(self, name: str) -> int:
        if name in self._index:
            raise ContractError(f"duplicate symbol {name!r}")
        self._index[name] = len(self.names)
        self.names.append(name)
        return self._index[name]

    def index(self, name: str) -> int:
        return self._index[name]

    def __len__(self) -> int:
        return len(self.names)


class MultivariatePolynomial:
    """Sparse exponent-vector -> Fraction map; arithmetic is exact.

    Exponent vectors are tuples of length ``n_vars``. Zero coefficients are
    never stored, so equality is plain dict equality.
    """

    __slots__ = ("n_vars", "terms")

    def __init__(self, n_vars: int, terms: dict[tuple[int, ...], Fraction] | None = None):
        self.n_vars = n_vars
        self.terms = terms if terms is not None else {}

    @staticmethod
    def constant(n_vars: int, value) -> "MultivariatePolynomial":
        value = Fraction(value)
        if value == 0:
            return MultivariatePolynomial(n_vars)
        return MultivariatePolynomial(n_vars, {(0,) * n_vars: value})

    @staticmethod
    def variable(n_vars: int, index: int) -> "MultivariatePolynomial":
        exp = [0] * n_vars
        exp[index] = 1
        return MultivariatePolynomial(n_vars, {tuple(exp): Fraction(1)})

    def __add__(self, other: "MultivariatePolynomial") -> "MultivariatePolynomial":
        terms = dict(self.terms)
        for exp, coeff in other.terms.items():
            new = terms.get(exp, Fraction(0)) + coeff
            if new == 0:
                terms.pop(exp, None)
            else:
                terms[exp] = new
        return MultivariatePolynomial(self.n_vars, terms)

    def __neg__(self) -> "MultivariatePolynomial":
        return MultivariatePolynomial(
            self.n_vars, {exp: -c for exp, c in self.terms.items()})

    def __sub__(self, other: "MultivariatePolynomial") -> "MultivariatePolynomial":
        return self + (-other)

    def __mul__(self, other: "MultivariatePolynomial") -> "MultivariatePolynomial":
        terms: dict[tuple[int, ...], Fraction] = {}
        for exp_a, ca in self.terms.items():
            for exp_b, cb in other.terms.items():
                exp = tuple(x + y for x, y in zip(exp_a, exp_b))
                new = terms.get(exp, Fraction(0)) + ca * cb
                if new == 0:
                    terms.pop(exp, None)
                else:
                    terms[exp] = new
        return MultivariatePolynomial(self.n_vars, terms)

    def __eq__(self, other) -> bool:
        return isinstance(other, MultivariatePolynomial) and self.terms == other.terms

    def __len__(self) -> int:
        return len(self.terms)

    def evaluate(self, values: np.ndarray) -> float:
        total = 0.0
        for exp, coeff in self.terms.items():
            prod = float(coeff)
            for i, p in enumerate(exp):
                if p:
                    prod *= values[i] ** p
            total += prod
        return total

    def degree_in(self, indices: set[int]) -> int:
        """Max total degree restricted to the given variable indices."""
        best = 0
        for exp in self.terms:
            best = max(best, sum(exp[i] for i in indices))
        return best


def _monomial_str(exp: tuple[int, ...], symbols: SymbolTable) -> str:
    parts = []
    for i, p in enumerate(exp):
        if p == 1:
            parts.append(symbols.names[i])
        elif p > 1:
            parts.append(f"{symbols.names[i]}^{p}")
    return "*".join(parts) if parts else "1"


def symbolic_cross_compress(L: int, d: int):
    """Expand L layers symbolically; returns (v_polys, e_polys, symbols).

    Every weight and bias component is a distinct degree-0-counted symbol.
    Guarded to L <= 3, d <= 2 so the term count stays far below the budget.
    """
    if L < 1 or d < 1:
        raise ContractError("L and d must be >= 1")
    if L > 3 or d > 2:
        raise ContractError(f"term budget guard: need L <= 3 and d <= 2, got L={L}, d={d}")
    symbols = SymbolTable()
    v_idx = [symbols.add(f"v{i + 1}") for i in range(d)]
    e_idx = [symbols.add(f"e{i + 1}") for i in range(d)]
    layer_syms = []
    for l in range(L):
        layer_syms.append({
            kind: [symbols.add(f"{kind}{l}_{i + 1}") for i in range(d)]
            for kind in ("w_vv", "w_ev", "w_ve", "w_ee", "b_v", "b_e")
        })
    n = len(symbols)
    var = lambda i: MultivariatePolynomial.variable(n, i)

    v_cur = [var(i) for i in v_idx]
    e_cur = [var(i) for i in e_idx]
    for l in range(L):
        syms = layer_syms[l]
        zero = MultivariatePolynomial(n)
        s_vv = sum((e_cur[j] * var(syms["w_vv"][j]) for j in range(d)), zero)
        s_ev = sum((v_cur[j] * var(syms["w_ev"][j]) for j in range(d)), zero)
        s_ve = sum((e_cur[j] * var(syms["w_ve"][j]) for j in range(d)), zero)
        s_ee = sum((v_cur[j] * var(syms["w_ee"][j]) for j in range(d)), zero)
        v_next = [v_cur[i] * s_vv + e_cur[i] * s_ev + var(syms["b_v"][i]) for i in range(d)]
        e_next = [v_cur[i] * s_ve + e_cur[i] * s_ee + var(syms["b_e"][i]) for i in range(d)]
        v_cur, e_cur = v_next, e_next
        total_terms = sum(len(p) for p in v_cur) + sum(len(p) for p in e_cur)
        if total_terms > TERM_BUDGET:
            raise ContractError(f"term budget exceeded at layer {l + 1}: {total_terms}")
    return v_cur, e_cur, symbols


def check_max_cross_degree(L: int, d: int) -> dict:
    """Verify the 2^(L-1) mixed-degree property on the summed outputs."""
    v_polys, e_polys, symbols = symbolic_cross_compress(L, d)
    v_vars = {symbols.index(f"v{i + 1}") for i in range(d)}
    e_vars = {symbols.index(f"e{i + 1}") for i in range(d)}
    expected = 2 ** (L - 1)
    zero = MultivariatePolynomial(len(symbols))
    report = {"check": "max_cross_degree", "params": {"L": L, "d": d},
              "expected_degree": expected}
    passed = True
    for side, polys in (("v", v_polys), ("e", e_polys)):
        summed = sum(polys, zero)
        cross_terms = {
            exp: c for exp, c in summed.terms.items()
            if sum(exp[i] for i in v_vars) >= 1 and sum(exp[i] for i in e_vars) >= 1
        }
        if not cross_terms:
            passed = False
            report[f"{side}_max_degrees"] = (0, 0)
            continue
        max_v = max(sum(exp[i] for i in v_vars) for exp in cross_terms)
        max_e = max(sum(exp[i] for i in e_vars) for exp in cross_terms)
        report[f"{side}_max_degrees"] = (max_v, max_e)
        witness = max(
            cross_terms,
            key=lambda exp: (sum(exp[i] for i in v_vars) + sum(exp[i] for i in e_vars),
                             sum(exp[i] for i in v_vars)),
        )
        report[f"{side}_witness"] = _monomial_str(witness, symbols)
        wv = sum(witness[i] for i in v_vars)
        we = sum(witness[i] for i in e_vars)
        passed = passed and max_v == expected and max_e == expected \
            and wv == expected and we == expected
    report["status"] = "pass" if passed else "fail"
    return report


def _unit_with_params(d: int) -> tuple[ParameterStore, un.CrossCompressUnit]:
    store = ParameterStore()
    unit = un.CrossCompressUnit(store, "unit", d, np.random.default_rng(0))
    return store, unit


def check_scalar_sum_form(trials: int, d: int, seed: int) -> dict:
    """|sum(v1)| vs |sum(b_v) + sum_ij (w_ev_i + w_vv_j) v_i e_j| over random draws."""
    rng = np.random.default_rng(seed)
    _, unit = _unit_with_params(d)
    worst = 0.0
    for _ in range(trials):
        v = rng.normal(size=d)
        e = rng.normal(size=d)
        for t in (unit.w_vv, unit.w_ev, unit.w_ve, unit.w_ee, unit.b_v, unit.b_e):
            t.data[...] = rng.normal(size=d)
        v1, _ = un.cross_compress_apply(Tensor(v), Tensor(e), unit)
        lhs = abs(v1.data.sum())
        pair_weights = unit.w_ev.data[:, None] + unit.w_vv.data[None, :]
        rhs = abs(unit.b_v.data.sum() + (pair_weights * np.outer(v, e)).sum())
        worst = max(worst, abs(lhs - rhs))
    return {"check": "scalar_sum_form", "params": {"trials": trials, "d": d, "seed": seed},
            "max_deviation": worst, "skipped": 0}


def check_dcn_restriction(trials: int, d: int, seed: int) -> dict:
    """Restricted unit (normalized first term, frozen second-term partner)
    against the residual crossing layer; draws where the normalizing dot is
    ~0 are unsatisfiable and skipped."""
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    layer = un.DcnLayer(store, "dcn", d, rng)
    _, unit = _unit_with_params(d)
    worst = 0.0
    skipped = 0
    for _ in range(trials):
        v = rng.normal(size=d)
        e = rng.normal(size=d)
        v0 = rng.normal(size=d)
        e0 = rng.normal(size=d)
        w_vv = rng.normal(size=d)
        w_ee = rng.normal(size=d)
        denom_v = float(e @ w_vv)
        denom_e = float(v @ w_ee)
        if abs(denom_v) < 1e-6 or abs(denom_e) < 1e-6:
            skipped += 1
            continue
        unit.w_vv.data[...] = w_vv / denom_v
        unit.w_ee.data[...] = w_ee / denom_e
        unit.w_ev.data[...] = rng.normal(size=d)
        unit.w_ve.data[...] = rng.normal(size=d)
        unit.b_v.data[...] = rng.normal(size=d)
        unit.b_e.data[...] = rng.normal(size=d)
        layer.w_ev.data[...] = unit.w_ev.data
        layer.w_ve.data[...] = unit.w_ve.data
        layer.b_v.data[...] = unit.b_v.data
        layer.b_e.data[...] = unit.b_e.data

        vt, et, v0t, e0t = Tensor(v), Tensor(e), Tensor(v0), Tensor(e0)
        # matrix-route restricted unit: second-term partner replaced by the anchor
        dd = (d, 1)
        v_rest = un.cross(vt, et) @ unit.w_vv.reshape(dd) \
            + un.cross(e0t, vt) @ unit.w_ev.reshape(dd)
        v_rest = v_rest.reshape((d,)) + unit.b_v
        e_rest = un.cross(v0t, et) @ unit.w_ve.reshape(dd) \
            + un.cross(et, vt) @ unit.w_ee.reshape(dd)
        e_rest = e_rest.reshape((d,)) + unit.b_e

        layer.capture_anchors(v0t, e0t)
        v_dcn, e_dcn = un.dcn_apply(vt, et, layer)
        worst = max(worst,
                    float(np.abs(v_rest.data - v_dcn.data).max()),
                    float(np.abs(e_rest.data - e_dcn.data).max()))
    return {"check": "dcn_restriction", "params": {"trials": trials, "d": d, "seed": seed},
            "max_deviation": worst, "skipped": skipped}


def check_transfer_matrix_form(trials: int, d: int, seed: int) -> dict:
    """Bias-free unit vs the 2x2 transfer-matrix (cross-stitch) evaluation."""
    rng = np.random.default_rng(seed)
    _, unit = _unit_with_params(d)
    unit.b_v.data[...] = 0.0
    unit.b_e.data[...] = 0.0
    worst = 0.0
    for _ in range(trials):
        v = rng.normal(size=d)
        e = rng.normal(size=d)
        for t in (unit.w_vv, unit.w_ev, unit.w_ve, unit.w_ee):
            t.data[...] = rng.normal(size=d)
        v1, e1 = un.cross_compress_apply(Tensor(v), Tensor(e), unit)
        a_vv = float(e @ unit.w_vv.data)
        a_ev = float(v @ unit.w_ev.data)
        a_ve = float(e @ unit.w_ve.data)
        a_ee = float(v @ unit.w_ee.data)
        v1_ref = a_vv * v + a_ev * e
        e1_ref = a_ve * v + a_ee * e
        worst = max(worst,
                    float(np.abs(v1.data - v1_ref).max()),
                    float(np.abs(e1.data - e1_ref).max()))
    return {"check": "transfer_matrix_form",
            "params": {"trials": trials, "d": d, "seed": seed},
            "max_deviation": worst, "skipped": 0}


def symbolic_numeric_agreement(L: int, d: int, seed: int) -> float:
    """Max |symbolic evaluation - direct forward| over random substitutions."""
    v_polys, e_polys, symbols = symbolic_cross_compress(L, d)
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    units = [un.CrossCompressUnit(store, f"u{l}", d, rng) for l in range(L)]
    values = np.zeros(len(symbols))
    v = rng.uniform(-1, 1, size=d)
    e = rng.uniform(-1, 1, size=d)
    for i in range(d):
        values[symbols.index(f"v{i + 1}")] = v[i]
        values[symbols.index(f"e{i + 1}")] = e[i]
    for l, unit in enumerate(units):
        for kind, tensor in (("w_vv", unit.w_vv), ("w_ev", unit.w_ev),
                             ("w_ve", unit.w_ve), ("w_ee", unit.w_ee),
                             ("b_v", unit.b_v), ("b_e", unit.b_e)):
            tensor.data[...] = rng.uniform(-1, 1, size=d)
            for i in range(d):
                values[symbols.index(f"{kind}{l}_{i + 1}")] = tensor.data[i]
    vt, et = Tensor(v), Tensor(e)
    for unit in units:
        vt, et = un.cross_compress_apply(vt, et, unit)
    worst = 0.0
    for i in range(d):
        worst = max(worst, abs(v_polys[i].evaluate(values) - vt.data[i]))
        worst = max(worst, abs(e_polys[i].evaluate(values) - et.data[i]))
    return worst


# ---------------------------------------------------------------------------
# empirical correlation study


@dataclass
class BucketStat:
    lo: float
    hi: float
    count: int
    mean: float


@dataclass
class CorrelationReport:
    """Bucketed co-engagement vs KG co-neighborhood statistics, both ways."""

    rs_to_kg: list[BucketStat] = field(default_factory=list)
    kg_to_rs: list[BucketStat] = field(default_factory=list)
    pair_count: int = 0

    def to_dict(self) -> dict:
        def rows(buckets):
            return [{"lo": b.lo, "hi": b.hi, "count": b.count, "mean": b.mean}
                    for b in buckets]
        return {"pair_count": self.pair_count,
                "rs_to_kg": rows(self.rs_to_kg), "kg_to_rs": rows(self.kg_to_rs)}


def _bucketize(x: np.ndarray, y: np.ndarray, n_buckets: int) -> list[BucketStat]:
    """Near-equal-mass buckets over x, never splitting equal x values."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ys = y[order]
    n = len(xs)
    # candidate cut positions: first index of each distinct value
    change = np.flatnonzero(np.diff(xs)) + 1
    cuts = [0]
    for k in range(1, n_buckets):
        target = round(n * k / n_buckets)
        pos = change[np.searchsorted(change, target)] if np.any(change >= target) else n
        if pos > cuts[-1] and pos < n:
            cuts.append(int(pos))
    cuts.append(n)
    buckets = []
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        seg_y = ys[lo:hi]
        buckets.append(BucketStat(lo=float(xs[lo]), hi=float(xs[hi - 1]),
                                  count=hi - lo, mean=float(seg_y.mean())))
    return buckets


def _common_count_matrix(membership: np.ndarray) -> np.ndarray:
    # membership: (n_items, n_other) boolean; result[i, j] = |row_i & row_j|
    m = membership.astype(np.float64)
    return m @ m.T


def correlation_study(bundle: DatasetBundle, pair_samples: int, seed: int,
                      n_buckets: int = 5) -> CorrelationReport:
    """Sample item pairs; relate common raters to common KG neighbors."""
    if bundle.n_items < 2:
        raise DataError("correlation study needs at least two items")
    rng = np.random.default_rng(seed)
    n_items = bundle.n_items

    rater = np.zeros((n_items, bundle.n_users), dtype=bool)
    positive = bundle.labels == 1
    rater[bundle.items[positive], bundle.users[positive]] = True

    neighbor = np.zeros((n_items, bundle.n_entities), dtype=bool)
    adjacency: list[set[int]] = [set() for _ in range(bundle.n_entities)]
    for h, t in zip(bundle.heads.tolist(), bundle.tails.tolist()):
        adjacency[h].add(t)
        adjacency[t].add(h)
    for item in range(n_items):
        for entity in bundle.alignment.item_entities[item]:
            for nb in adjacency[int(entity)]:
                neighbor[item, nb] = True

    common_raters = _common_count_matrix(rater)
    common_neighbors = _common_count_matrix(neighbor)

    i = rng.integers(0, n_items, size=pair_samples)
    j = rng.integers(0, n_items, size=pair_samples)
    keep = i != j
    i, j = i[keep], j[keep]
    x_rs = common_raters[i, j]
    x_kg = common_neighbors[i, j]

    return CorrelationReport(
        rs_to_kg=_bucketize(x_rs, x_kg, n_buckets),
        kg_to_rs=_bucketize(x_kg, x_rs, n_buckets),
        pair_count=int(len(i)),
    )


# ---------------------------------------------------------------------------
# verification suite


def _gradient_spot_check(seed: int) -> dict:
    """Finite-difference check of a layered forward through every unit type."""
    rng = np.random.default_rng(seed)
    d = 3
    store = ParameterStore()
    unit = un.CrossCompressUnit(store, "full_unit", d, rng)
    dcn = un.DcnLayer(store, "dcn_unit", d, rng)
    stitch = un.StitchUnit(store, "stitch_unit", d, rng)
    dense = un.DenseLayer(store, "dense", d, d, "relu", rng)
    x = store.register("x", rng.normal(size=(4, d)))
    y = store.register("y", rng.normal(size=(4, d)))

    def forward():
        a, b = un.cross_compress_apply(x, y, unit)
        dcn.capture_anchors(x, y)
        a, b = un.dcn_apply(a, b, dcn)
        a, b = un.stitch_apply(a, b, stitch)
        a = dense(a)
        return ad.sigmoid(ad.mul(a, b).sum()).sum()

    err = ad.max_relative_gradient_error(forward, store)
    return {"check": "gradient_check", "params": {"seed": seed, "d": d},
            "max_relative_error": err,
            "status": "pass" if err < 1e-4 else "fail"}


def run_verification(seed: int = 0, trials: int = 1000) -> list[dict]:
    """The full verifier battery; each entry carries its own pass/fail."""
    reports: list[dict] = []
    for L in (1, 2, 3):
        for d in (1, 2):
            reports.append(check_max_cross_degree(L, d))
    for d in (1, 2, 8):
        r = check_scalar_sum_form(trials, d, seed)
        r["status"] = "pass" if r["max_deviation"] < 1e-10 else "fail"
        reports.append(r)
    for d in (1, 2, 8):
        r = check_dcn_restriction(trials, d, seed)
        r["status"] = "pass" if r["max_deviation"] < 1e-10 else "fail"
        reports.append(r)
    for d in (1, 2, 8):
        r = check_transfer_matrix_form(trials, d, seed)
        r["status"] = "pass" if r["max_deviation"] < 1e-12 else "fail"
        reports.append(r)
    agreement = symbolic_numeric_agreement(2, 2, seed)
    reports.append({"check": "symbolic_numeric_agreement",
                    "params": {"L": 2, "d": 2, "seed": seed},
                    "max_deviation": agreement,
                    "status": "pass" if agreement < 1e-9 else "fail"})
    reports.append(_gradient_spot_check(seed))
    return reports
