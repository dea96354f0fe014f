"""Residue-based topological recursion for open intersection numbers.

Computes the correlation differentials W_{g,n}(z_1, ..., z_n) on the spectral
curve x = z^2/2, y = z, where the (augmented) genus g runs over half-integers.
The recursion takes a single residue at w = 0:

    W_{g,n+1}(z0, zvec) = Res_{w->0} { K2(z0,w) [ R2 + D1 W_{g-1/2,n+1}(w,zvec) ]
                                     + K3(z0,w) [ R3 - D2 W_{g-1,n+1}(w,zvec) ] }

with quadratic block R2 = Wt_{g-1,n+2}(w,w,zvec) + sum' W(w,Z1) W(w,Z2) and a
cubic block R3 containing the triple-diagonal, a mixed W * Wt(w,w,.) sum and a
triple-product sum.  Primed sums omit every pairing of the full correlator
W_{g,n+1}(w,zvec) against copies of W_{0,1}.  Wt is W with the renormalized
diagonal: Wt_{0,2}(w,w) = dw^2/(4 w^2); every other key has Wt = W.

Initial data: W_{0,1} = -z^2 dz, W_{1/2,1} = dz/z, W_{0,2} = the Bergman
kernel B(z1,z2) = dz1 dz2/(z1-z2)^2, which only ever enters integrands through
its expansion around w = 0.

Genus is tracked as ``g2`` = twice the genus, so half-integers stay exact.
Correlators are stored over canonical variables z1..zn; z1 is the slot fed by
the recursion root z0 (immaterial for the symmetric baseline, meaningful for
the experimental Q-graded variant).
"""

from __future__ import annotations

import io
import os
import threading
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from .laurent import (
    AlgebraError,
    LaurentDifferential,
    UnrenormalizedDiagonal,
    align,
    mul_window,
)

HALF = Fraction(1, 2)


class ContractError(AlgebraError):
    """A module contract was violated (unstable key, missing dependency...)."""


@dataclass(frozen=True, order=True)
class CorrelatorKey:
    """(twice-genus, number of marked points)."""

    g2: int
    n: int

    def __post_init__(self):
        if self.g2 < 0 or self.n < 1:
            raise ContractError(f"invalid correlator key {self}")

    @property
    def complexity(self) -> int:
        """2g - 2 + n; positive exactly for stable keys."""
        return self.g2 - 2 + self.n

    @property
    def is_stable(self) -> bool:
        return self.complexity > 0

    @property
    def size(self) -> int:
        """4g + n, the budget measure; strictly decreases along dependencies."""
        return 2 * self.g2 + self.n

    def genus_str(self) -> str:
        return str(self.g2 // 2) if self.g2 % 2 == 0 else f"{self.g2}/2"

    def __str__(self) -> str:
        return f"W[{self.genus_str()},{self.n}]"


def parse_genus(text: str) -> int:
    """Parse a genus given as an integer or exact half like ``3/2``; returns 2g."""
    text = text.strip()
    if "/" in text:
        num, den = text.split("/", 1)
        if den.strip() != "2":
            raise ContractError(f"genus must be integer or half-integer, got {text!r}")
        return int(num)
    return 2 * int(text)


def stable_keys(budget: int):
    """All stable keys with 4g + n <= budget, in dependency-safe order."""
    keys = [
        CorrelatorKey(g2, n)
        for g2 in range(0, budget // 2 + 1)
        for n in range(1, budget - 2 * g2 + 1)
        if g2 - 2 + n > 0
    ]
    keys.sort(key=lambda k: (k.size, k.g2, k.n))
    return keys


# ---------------------------------------------------------------------------
# initial data and kernels
# ---------------------------------------------------------------------------

class BergmanKernel:
    """The (0,2) correlator dz1 dz2 / (z1 - z2)^2.

    Not a Laurent differential, so it is never stored in closed form; inside
    residue integrands it appears only through :func:`bergman_expansion` with
    the residue variable as the small one.  Identifying its two arguments is
    the classic divergence, reported explicitly.
    """

    names = ("z1", "z2")

    def render(self) -> str:
        return "dz1 dz2 / (z1 - z2)^2"

    def expand(self, small: str, large: str, order: int) -> LaurentDifferential:
        return bergman_expansion(small, large, order)

    def diagonal(self):
        raise UnrenormalizedDiagonal(
            "B(w, w) is divergent; use tilde_w02_diagonal() for the "
            "renormalized diagonal dw^2/(4 w^2)"
        )


def base_correlator(key: CorrelatorKey):
    """Initial data of the recursion (the three unstable keys)."""
    if key == CorrelatorKey(0, 1):
        return LaurentDifferential.monomial(-1, {"z1": 2}, {"z1": 1})
    if key == CorrelatorKey(1, 1):
        return LaurentDifferential.monomial(1, {"z1": -1}, {"z1": 1})
    if key == CorrelatorKey(0, 2):
        return BergmanKernel()
    raise ContractError(f"{key} is stable; use compute_correlator")


def bergman_expansion(small: str, large: str, order: int) -> LaurentDifferential:
    """B(small, large) expanded for |small| < |large|:
    sum_{k>=1} k small^(k-1) large^-(k+1) d(small) d(large), truncated."""
    if small == large:
        raise UnrenormalizedDiagonal("diagonal Bergman expansion requested")
    terms = {(k - 1, -(k + 1)): Fraction(k) for k in range(1, order + 1)}
    return LaurentDifferential((small, large), (1, 1), terms)


def tilde_w02_diagonal(var: str = "w") -> LaurentDifferential:
    """Renormalized Bergman diagonal: d(var)^2 / (4 var^2)."""
    return LaurentDifferential.monomial(Fraction(1, 4), {var: -2}, {var: 2})


def expand_B_integral(sign: int, order: int, zvar: str = "z0", wvar: str = "w") -> LaurentDifferential:
    """int_{0}^{sign*w} B(z0, zeta) = sum_{k=1}^{order} (sign*w)^k z0^-(k+1) dz0.

    The integration consumes d(zeta), so ``wvar`` carries no differential
    weight here; kernels divide by powers of (-w^2 dw) afterwards.
    """
    if sign not in (1, -1):
        raise ContractError("sign must be +1 or -1")
    if order < 1:
        raise ContractError("order must be >= 1")
    terms = {(-(k + 1), k): Fraction(sign**k) for k in range(1, order + 1)}
    return LaurentDifferential((zvar, wvar), (1, 0), terms)


def kernel(j: int, order: int, zvar: str = "z0", wvar: str = "w") -> LaurentDifferential:
    """Recursion kernel K^(j), truncated at w-power <= order.

    K^(j)(z0,w) = [ (-1)^j int_0^{-w} B(z0,.) - int_0^{w} B(z0,.) ]
                  / ( 2 j (-w^2 dw)^(j-1) )

    which leaves only odd powers of w for j = 2 and even powers for j = 3:

      K^(2) = (dz0/dw)   sum_{i>=0} w^(2i-1) / (2 z0^(2i+2))
      K^(3) = -(dz0/dw^2) sum_{i>=1} w^(2i-4) / (3 z0^(2i+1))
    """
    if j not in (2, 3):
        raise ContractError("kernel index must be 2 or 3")
    plus = expand_B_integral(1, order + 2 * j, zvar, wvar)
    minus = expand_B_integral(-1, order + 2 * j, zvar, wvar)
    if j == 2:
        num = minus - plus
    else:
        num = minus.scale(-1) - plus
    # divide by 2 j (-w^2 dw)^(j-1)
    denom_coeff = Fraction(1, 2 * j) * Fraction(-1) ** (j - 1)
    out = num.scale(denom_coeff).shift(wvar, -2 * (j - 1)).raise_weight(wvar, -(j - 1))
    keep = {e: c for e, c in out.terms.items() if e[out.index_of(wvar)] <= order}
    return LaurentDifferential(out.names, out.weights, keep)


def apply_D1(a: LaurentDifferential, var: str) -> LaurentDifferential:
    """D1 = dv (-d/dv + 1/v); raises the differential weight in ``var`` by 1."""
    out = a.differentiate(var).scale(-1) + a.shift(var, -1)
    return out.raise_weight(var, 1)


def apply_D2(a: LaurentDifferential, var: str) -> LaurentDifferential:
    """D2 = (dv^2/2)(d^2/dv^2 - (3/v) d/dv + 3/v^2); weight in ``var`` rises by 2."""
    d1 = a.differentiate(var)
    out = (
        d1.differentiate(var)
        + d1.shift(var, -1).scale(-3)
        + a.shift(var, -2).scale(3)
    )
    return out.scale(HALF).raise_weight(var, 2)


def required_kernel_order(key: CorrelatorKey) -> int:
    """Sufficient w-truncation for the kernels and Bergman expansions of
    ``key``: the integrand pole order in w is bounded by 6g - 6 + 4(n+2) + 4
    (from the pole-order homogeneity of all sub-correlators)."""
    if not key.is_stable:
        raise ContractError(f"{key} is unstable")
    return max(8, 3 * key.g2 + 4 * key.n + 6)


# ---------------------------------------------------------------------------
# recursion variants (baseline / experimental Q-grading)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RecursionVariant:
    """Baseline recursion, or the Q-graded experiment that multiplies
    W_{1/2,1} by Q and D_i by Q^i (coefficients become polynomials in Q)."""

    q_graded: bool = False

    @property
    def tag(self) -> str:
        return "q" if self.q_graded else "baseline"


BASELINE = RecursionVariant(False)
Q_GRADED = RecursionVariant(True)

_Q = "Q"


def _q_power(power: int) -> LaurentDifferential:
    return LaurentDifferential.monomial(1, {_Q: power}, {_Q: 0})


# ---------------------------------------------------------------------------
# correlator store (memoization + optional persistent cache)
# ---------------------------------------------------------------------------

class CorrelatorStore:
    """Publish-once memo of computed correlators.

    Concurrent readers are safe; at most one computation per key is in
    flight (first writer publishes, racers reuse).  With ``cache_dir`` set,
    records are persisted in a deterministic binary format and reloaded on
    demand; cache hits are byte-identical across platforms.
    """

    def __init__(self, variant: RecursionVariant = BASELINE, cache_dir: str | os.PathLike | None = None):
        self.variant = variant
        self.cache_dir = Path(cache_dir) if cache_dir else None
        if self.cache_dir:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
        self._data: dict[CorrelatorKey, LaurentDifferential] = {}
        self._guard = threading.Lock()
        self._key_locks: dict[CorrelatorKey, threading.Lock] = {}

    def _lock_for(self, key: CorrelatorKey) -> threading.Lock:
        with self._guard:
            return self._key_locks.setdefault(key, threading.Lock())

    def _record_path(self, key: CorrelatorKey) -> Path:
        assert self.cache_dir is not None
        return self.cache_dir / f"{self.variant.tag}_w_{key.g2}_{key.n}.rec"

    def peek(self, key: CorrelatorKey) -> LaurentDifferential | None:
        with self._guard:
            return self._data.get(key)

    def keys(self):
        with self._guard:
            return sorted(self._data)

    def get(self, key: CorrelatorKey) -> LaurentDifferential:
        if not key.is_stable:
            raise ContractError(f"{key} is unstable; use base_correlator")
        found = self.peek(key)
        if found is not None:
            return found
        with self._lock_for(key):
            found = self.peek(key)
            if found is not None:
                return found
            value = None
            if self.cache_dir:
                path = self._record_path(key)
                if path.exists():
                    rkey, value = decode_record(path.read_bytes())
                    if rkey != key:
                        raise ContractError(f"cache record {path} holds {rkey}, not {key}")
            if value is None:
                value = compute_correlator(key, self, self.variant)
                if self.cache_dir:
                    self._record_path(key).write_bytes(encode_record(key, value))
            with self._guard:
                self._data[key] = value
            return value


def compute_all(store: CorrelatorStore, budget: int, threads: int = 1) -> list[CorrelatorKey]:
    """Compute every stable key with 4g + n <= budget.

    Keys are processed in waves of equal 4g + n, so all dependencies of a wave
    are already published.  ``threads`` caps parallelism inside a wave; exact
    arithmetic makes the result identical to the sequential run.
    """
    keys = stable_keys(budget)
    if threads <= 1:
        for k in keys:
            store.get(k)
        return keys
    from concurrent.futures import ThreadPoolExecutor

    by_size: dict[int, list[CorrelatorKey]] = {}
    for k in keys:
        by_size.setdefault(k.size, []).append(k)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for size in sorted(by_size):
            list(pool.map(store.get, by_size[size]))
    return keys


# ---------------------------------------------------------------------------
# integrand assembly
# ---------------------------------------------------------------------------

def _factor(
    g2: int,
    vars_: tuple[str, ...],
    store: CorrelatorStore,
    variant: RecursionVariant,
    order: int,
    memo: dict,
) -> LaurentDifferential:
    """W_{g, len(vars_)} evaluated at (possibly repeated) named variables.

    The first slot is the residue variable whenever a Bergman factor occurs,
    so (0,2) expands in powers of vars_[0].  Repeated variables on stable
    correlators merge exponents (no diagonal poles there).
    """
    cached = memo.get((g2, vars_))
    if cached is not None:
        return cached
    m = len(vars_)
    if (g2, m) == (0, 1):
        out = LaurentDifferential.monomial(-1, {vars_[0]: 2}, {vars_[0]: 1})
    elif (g2, m) == (1, 1):
        out = LaurentDifferential.monomial(1, {vars_[0]: -1}, {vars_[0]: 1})
        if variant.q_graded:
            out = out * _q_power(1)
    elif (g2, m) == (0, 2):
        if vars_[0] == vars_[1]:
            raise UnrenormalizedDiagonal(
                "B(w, w) requested inside an integrand; route diagonals "
                "through the renormalized tilde value"
            )
        out = bergman_expansion(vars_[0], vars_[1], order)
    else:
        stored = store.get(CorrelatorKey(g2, m))
        out = stored.rename({f"z{i + 1}": v for i, v in enumerate(vars_)})
    memo[(g2, vars_)] = out
    return out


def _tilde_factor(
    g2: int,
    vars_: tuple[str, ...],
    store: CorrelatorStore,
    variant: RecursionVariant,
    order: int,
    memo: dict,
) -> LaurentDifferential:
    """Wt_{g, len(vars_)}: the first two slots coincide (the diagonal)."""
    if (g2, len(vars_)) == (0, 2):
        return tilde_w02_diagonal(vars_[0])
    return _factor(g2, vars_, store, variant, order, memo)


def _bounded_product(factors: list[LaurentDifferential], wvar: str, lo: int, hi: int) -> LaurentDifferential:
    """Product of ``factors`` keeping only final w-exponents in [lo, hi];
    intermediate windows widen by what the remaining factors can contribute."""
    ranges = []
    for f in factors:
        if wvar in f.names:
            ranges.append(f.exponent_range(wvar))
        else:
            ranges.append((0, 0))
    acc = factors[0]
    for j in range(1, len(factors)):
        rem_lo = sum(r[0] for r in ranges[j + 1:])
        rem_hi = sum(r[1] for r in ranges[j + 1:])
        acc = mul_window(acc, factors[j], wvar, lo - rem_hi, hi - rem_lo)
    return acc


def _accumulate(acc: LaurentDifferential | None, term: LaurentDifferential) -> LaurentDifferential:
    if acc is None:
        return term
    a, b = align(acc, term)
    return a + b


def _ordered_splits(items: tuple[str, ...]):
    """All ordered 2-splits (as tuples) of the spectator variables."""
    n = len(items)
    for mask in range(1 << n):
        left = tuple(items[i] for i in range(n) if mask >> i & 1)
        right = tuple(items[i] for i in range(n) if not mask >> i & 1)
        yield mask, left, right


def assemble_R2(
    key: CorrelatorKey,
    store: CorrelatorStore,
    variant: RecursionVariant = BASELINE,
    order: int | None = None,
    wvar: str = "w",
) -> LaurentDifferential:
    """Quadratic integrand block for ``key`` = (g, n+1), in variables
    (w, z1..zn): the renormalized diagonal Wt_{g-1,n+2}(w,w,zvec) plus the
    pair sum over genus splits g1+g2 = g and spectator splits, omitting the
    two pairings of the full correlator with W_{0,1}."""
    if order is None:
        order = required_kernel_order(key)
    n = key.n - 1
    zs = tuple(f"z{i}" for i in range(1, n + 1))
    memo: dict = {}
    acc: LaurentDifferential | None = None

    if key.g2 - 2 >= 0:
        acc = _accumulate(acc, _tilde_factor(key.g2 - 2, (wvar, wvar) + zs, store, variant, order, memo))

    hi_keep = 1  # bracket w-exponents above 1 can never reach the residue
    lo_keep = -(order + 2)
    for mask, left, right in _ordered_splits(zs):
        comask = ((1 << n) - 1) ^ mask
        for tg1 in range(0, key.g2 + 1):
            tg2 = key.g2 - tg1
            # canonical unordered representative; count both orderings
            if (tg1, mask) > (tg2, comask):
                continue
            mult = 1 if (tg1, mask) == (tg2, comask) else 2
            if (tg1, len(left) + 1) == (key.g2, key.n):
                continue  # no full-correlator pairings
            if (tg2, len(right) + 1) == (key.g2, key.n):
                continue
            f1 = _factor(tg1, (wvar,) + left, store, variant, order, memo)
            f2 = _factor(tg2, (wvar,) + right, store, variant, order, memo)
            prod = _bounded_product([f1, f2], wvar, lo_keep, hi_keep)
            if mult != 1:
                prod = prod.scale(mult)
            acc = _accumulate(acc, prod)
    if acc is None:
        acc = LaurentDifferential.zero((wvar,) + zs, (2,) + (1,) * n)
    return acc


def assemble_R3(
    key: CorrelatorKey,
    store: CorrelatorStore,
    variant: RecursionVariant = BASELINE,
    order: int | None = None,
    wvar: str = "w",
) -> LaurentDifferential:
    """Cubic integrand block for ``key`` = (g, n+1): the triple diagonal
    W_{g-2,n+3}(w,w,w,zvec), the mixed sum
    3 sum_{g1+g2=g-1} W(w,Z1) Wt(w,w,Z2), and the triple-product sum over
    g1+g2+g3 = g omitting any factor equal to the full correlator."""
    if order is None:
        order = required_kernel_order(key)
    n = key.n - 1
    zs = tuple(f"z{i}" for i in range(1, n + 1))
    memo: dict = {}
    acc: LaurentDifferential | None = None
    hi_keep = 1
    lo_keep = -(order + 2)

    if key.g2 - 4 >= 0:
        acc = _accumulate(acc, _factor(key.g2 - 4, (wvar, wvar, wvar) + zs, store, variant, order, memo))

    if key.g2 - 2 >= 0:
        for mask, left, right in _ordered_splits(zs):
            for tga in range(0, key.g2 - 2 + 1):
                tgb = key.g2 - 2 - tga
                f1 = _factor(tga, (wvar,) + left, store, variant, order, memo)
                f2 = _tilde_factor(tgb, (wvar, wvar) + right, store, variant, order, memo)
                prod = _bounded_product([f1, f2], wvar, lo_keep, hi_keep).scale(3)
                acc = _accumulate(acc, prod)

    full = (1 << n) - 1
    target = (key.g2, key.n)
    seen_products: dict = {}
    for mask1 in range(1 << n):
        rest = full ^ mask1
        sub = rest
        while True:
            mask2 = sub
            mask3 = rest ^ mask2
            for tg1 in range(0, key.g2 + 1):
                for tg2 in range(0, key.g2 - tg1 + 1):
                    tg3 = key.g2 - tg1 - tg2
                    ids = sorted([(tg1, mask1), (tg2, mask2), (tg3, mask3)])
                    if ((tg1, mask1), (tg2, mask2), (tg3, mask3)) != tuple(ids):
                        continue  # canonical ordering only; multiplicity below
                    if any(
                        (tg, bin(m).count("1") + 1) == target and m == full
                        for tg, m in ids
                    ):
                        continue  # no full-correlator factors
                    mult = _orderings(ids)
                    prod = seen_products.get(tuple(ids))
                    if prod is None:
                        fs = [
                            _factor(
                                tg,
                                (wvar,) + tuple(zs[i] for i in range(n) if m >> i & 1),
                                store,
                                variant,
                                order,
                                memo,
                            )
                            for tg, m in ids
                        ]
                        prod = _bounded_product(fs, wvar, lo_keep, hi_keep)
                        seen_products[tuple(ids)] = prod
                    acc = _accumulate(acc, prod.scale(mult))
            if sub == 0:
                break
            sub = (sub - 1) & rest
    if acc is None:
        acc = LaurentDifferential.zero((wvar,) + zs, (3,) + (1,) * n)
    return acc


def _orderings(ids: list[tuple[int, int]]) -> int:
    if ids[0] == ids[1] == ids[2]:
        return 1
    if ids[0] == ids[1] or ids[1] == ids[2]:
        return 3
    return 6


# ---------------------------------------------------------------------------
# the recursion itself
# ---------------------------------------------------------------------------

def compute_correlator(
    key: CorrelatorKey,
    store: CorrelatorStore,
    variant: RecursionVariant = BASELINE,
    order: int | None = None,
) -> LaurentDifferential:
    """Evaluate the residue formula for a stable key.

    All dependencies are pulled from ``store`` (computing them on demand);
    the result is a symmetric Laurent differential over z1..zn with poles
    only at z_i = 0, validated against the pole-order homogeneity
    sum_i e_i = 6g - 6 + 4n before being returned.
    """
    if not key.is_stable:
        raise ContractError(f"{key} is unstable; the recursion starts above it")
    if order is None:
        order = required_kernel_order(key)
    n = key.n - 1
    zs = tuple(f"z{i}" for i in range(1, n + 1))
    memo: dict = {}
    wvar = "w"

    bracket2 = assemble_R2(key, store, variant, order, wvar)
    if key.g2 - 1 >= 0:
        arg = _factor(key.g2 - 1, (wvar,) + zs, store, variant, order, memo)
        term = apply_D1(arg, wvar)
        if variant.q_graded:
            term = term * _q_power(1)
        bracket2 = _accumulate(bracket2, term)

    bracket3 = assemble_R3(key, store, variant, order, wvar)
    if key.g2 - 2 >= 0:
        arg = _factor(key.g2 - 2, (wvar,) + zs, store, variant, order, memo)
        term = apply_D2(arg, wvar).scale(-1)
        if variant.q_graded:
            term = term * _q_power(2)
        bracket3 = _accumulate(bracket3, term)

    for bracket, j in ((bracket2, 2), (bracket3, 3)):
        if bracket and bracket.weight_of(wvar) != j:
            raise ContractError(f"bracket {j} carries dw^{bracket.weight_of(wvar)}")
        lo = bracket.exponent_range(wvar)[0] if bracket else 0
        if lo < -(order + 1):
            raise ContractError(
                f"kernel order {order} insufficient for {key}: bracket pole {lo}"
            )

    k2 = kernel(2, order, "z0", wvar)
    k3 = kernel(3, order, "z0", wvar)
    integrand = _accumulate(
        mul_window(k2, bracket2, wvar, -1, -1),
        mul_window(k3, bracket3, wvar, -1, -1),
    )
    if integrand.weight_of(wvar) != 1:
        raise ContractError("integrand dw-weight != 1 at residue time")
    res = integrand.residue(wvar)

    shift = {f"z{i}": f"z{i + 1}" for i in range(0, n + 1)}
    out = res.rename(shift)
    _validate(key, out, variant)
    return out


def _validate(key: CorrelatorKey, value: LaurentDifferential, variant: RecursionVariant) -> None:
    znames = tuple(f"z{i}" for i in range(1, key.n + 1))
    for name in znames:
        if name not in value.names:
            # a variable may drop out only if the correlator is zero
            if value.is_zero():
                return
            raise ContractError(f"{key}: missing variable {name}")
        if value.weight_of(name) != 1:
            raise ContractError(f"{key}: weight in {name} is {value.weight_of(name)}")
    target = 3 * key.g2 - 6 + 4 * key.n
    zidx = [value.index_of(nm) for nm in znames]
    qidx = value.index_of(_Q) if _Q in value.names else None
    for e in value.terms:
        total = -sum(e[i] for i in zidx)
        if total != target:
            raise ContractError(
                f"{key}: pole-order homogeneity violated: {total} != {target}"
            )
        if qidx is not None:
            qe = e[qidx]
            if qe < 0 or qe > key.g2 or (qe - key.g2) % 2 != 0:
                raise ContractError(f"{key}: Q-exponent {qe} out of range/parity")


# ---------------------------------------------------------------------------
# persistent record format
# ---------------------------------------------------------------------------

_MAGIC = b"OPENREC-CORR"
_VERSION = 1


def _write_uvarint(buf: io.BytesIO, v: int) -> None:
    if v < 0:
        raise ValueError("uvarint requires v >= 0")
    while True:
        b = v & 0x7F
        v >>= 7
        if v:
            buf.write(bytes([b | 0x80]))
        else:
            buf.write(bytes([b]))
            return


def _read_uvarint(view: memoryview, pos: int) -> tuple[int, int]:
    out = 0
    shift = 0
    while True:
        b = view[pos]
        pos += 1
        out |= (b & 0x7F) << shift
        if not b & 0x80:
            return out, pos
        shift += 7


def _zig(v: int) -> int:
    return (v << 1) if v >= 0 else ((-v << 1) - 1)


def _unzig(v: int) -> int:
    return (v >> 1) if v % 2 == 0 else -((v + 1) >> 1)


def _write_bigint(buf: io.BytesIO, v: int) -> None:
    sign = 1 if v < 0 else 0
    mag = abs(v)
    raw = mag.to_bytes((mag.bit_length() + 7) // 8 or 1, "big")
    buf.write(bytes([sign]))
    _write_uvarint(buf, len(raw))
    buf.write(raw)


def _read_bigint(view: memoryview, pos: int) -> tuple[int, int]:
    sign = view[pos]
    pos += 1
    ln, pos = _read_uvarint(view, pos)
    mag = int.from_bytes(bytes(view[pos:pos + ln]), "big")
    return (-mag if sign else mag), pos + ln


def encode_record(key: CorrelatorKey, value: LaurentDifferential) -> bytes:
    """Deterministic record: text header with the canonical rendering, then a
    binary sparse encoding (version, key, term count, per term the exponent
    vector as zigzag varints and the coefficient as num/den byte strings)."""
    head = io.BytesIO()
    head.write(_MAGIC + b"\n")
    head.write(f"version {_VERSION}\n".encode())
    head.write(f"key {key.g2} {key.n}\n".encode())
    head.write(("vars " + " ".join(f"{n}:{w}" for n, w in zip(value.names, value.weights)) + "\n").encode())
    head.write(("text " + value.render() + "\n").encode())
    body = io.BytesIO()
    _write_uvarint(body, len(value.terms))
    for e in sorted(value.terms):
        for k in e:
            _write_uvarint(body, _zig(k))
        c = value.terms[e]
        _write_bigint(body, c.numerator)
        _write_bigint(body, c.denominator)
    payload = body.getvalue()
    head.write(f"bytes {len(payload)}\n".encode())
    return head.getvalue() + payload


def decode_record(blob: bytes) -> tuple[CorrelatorKey, LaurentDifferential]:
    text, _, rest = blob.partition(b"text ")
    lines = text.decode().splitlines()
    if not lines or lines[0] != _MAGIC.decode():
        raise ContractError("bad record magic")
    fields = dict(line.split(" ", 1) for line in lines[1:] if line)
    if int(fields["version"]) != _VERSION:
        raise ContractError(f"unsupported record version {fields['version']}")
    g2, n = (int(x) for x in fields["key"].split())
    vars_ = [v.split(":") for v in fields["vars"].split()] if fields.get("vars") else []
    names = tuple(v[0] for v in vars_)
    weights = tuple(int(v[1]) for v in vars_)
    _, _, tail = rest.partition(b"\n")
    size_line, _, payload = tail.partition(b"\n")
    if not size_line.startswith(b"bytes "):
        raise ContractError("bad record layout")
    nbytes = int(size_line.split()[1])
    view = memoryview(payload[:nbytes])
    pos = 0
    count, pos = _read_uvarint(view, pos)
    terms: dict = {}
    for _ in range(count):
        e = []
        for _ in names:
            v, pos = _read_uvarint(view, pos)
            e.append(_unzig(v))
        num, pos = _read_bigint(view, pos)
        den, pos = _read_bigint(view, pos)
        terms[tuple(e)] = Fraction(num, den)
    return CorrelatorKey(g2, n), LaurentDifferential(names, weights, terms)
