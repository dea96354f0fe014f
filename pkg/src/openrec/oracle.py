"""W-algebra constraint oracle for the open intersection free energy.

This module is the independent computation path against which the residue
recursion is checked.  It works on the truncated free energy

    F = sum_{2h >= 0} u^(2h-2) F_h(t),   F_h = sum_n F_{h,n},

with F_{h,n} an exact polynomial, homogeneous of degree n in t_1, t_2, ...
and of weight sum k_i = 6h - 6 + 3n (every other monomial vanishes).  Three
independent pieces live here:

* current-algebra operators: modes J_k (multiplication by k t_k u^(k/3-1)
  for k < 0, u^(1-k/3) d/dt_k for k > 0), the quadratic modes
  L_k = (1/2) sum :J_a J_b: and cubic modes M_k = (1/3) sum :J_a J_b J_c:,
  and the shifted combinations

      Lhat_k = L_{2k} + (k+2) J_{2k} + (13/8) delta_{k,0} - J_{2k+3}
      Mhat_k = -M_{2k} + 2(L_{2k+3} - L_{2k}) + 2 J_{2k+3}
               + (2/3 k^2 + 2k + 1/12) J_{2k} + (3/4) delta_{k,0} - J_{2k+6}

  that annihilate e^F for all k >= 0;

* an order-by-order solver for F, driven by the two ladder equations that
  express every dt_j-derivative of F through strictly smaller data (the
  constraint system rolled into generating form in z);

* master-equation residuals: with eta = -z^2 dz, U = Utilde + delta and the
  renormalized diagonal delta(t-source) = dz^2/(4 z^2),

      P2[ (U^2 + u^-1 D1 U) . 1 / (2 eta)   ] = 0
      P3[ (U^3 - u^-2 D2 U) . 1 / (3 eta^2) ] = 0

  where P2 / P3 project onto the spans of dz/z^(2a+2) and dz/z^(2a+3).

Only the exact-algebra layer is shared with the recursion module, so
agreement of the two pipelines is a genuine cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Iterator

from .laurent import AlgebraError, LaurentDifferential

# ---------------------------------------------------------------------------
# sparse t-polynomials
# ---------------------------------------------------------------------------

# monomial: sorted ((index, multiplicity), ...); the empty tuple is 1
TMono = tuple[tuple[int, int], ...]
TPoly = dict[TMono, Fraction]

ONE: TMono = ()


def mono(*indices: int) -> TMono:
    out: dict[int, int] = {}
    for i in indices:
        if i < 1:
            raise AlgebraError(f"t-index must be >= 1, got {i}")
        out[i] = out.get(i, 0) + 1
    return tuple(sorted(out.items()))


def mono_mul(a: TMono, b: TMono) -> TMono:
    out = dict(a)
    for i, m in b:
        out[i] = out.get(i, 0) + m
    return tuple(sorted(out.items()))


def mono_weight(m: TMono) -> int:
    return sum(i * k for i, k in m)


def mono_degree(m: TMono) -> int:
    return sum(k for _, k in m)


def mono_mult(m: TMono, idx: int) -> int:
    for i, k in m:
        if i == idx:
            return k
    return 0


def mono_strip(m: TMono, idx: int) -> TMono:
    """Remove one factor t_idx (caller guarantees it is present)."""
    out = []
    for i, k in m:
        if i == idx:
            if k > 1:
                out.append((i, k - 1))
        else:
            out.append((i, k))
    return tuple(out)


def tp_add_into(dst: TPoly, m: TMono, c: Fraction) -> None:
    s = dst.get(m, Fraction(0)) + c
    if s == 0:
        dst.pop(m, None)
    else:
        dst[m] = s


def tp_scale(p: TPoly, c: Fraction) -> TPoly:
    if c == 0:
        return {}
    return {m: c * v for m, v in p.items()}


def tp_mul(a: TPoly, b: TPoly) -> TPoly:
    out: TPoly = {}
    for ma, ca in a.items():
        for mb, cb in b.items():
            tp_add_into(out, mono_mul(ma, mb), ca * cb)
    return out


def tp_deriv(p: TPoly, idx: int) -> TPoly:
    out: TPoly = {}
    for m, c in p.items():
        k = mono_mult(m, idx)
        if k:
            tp_add_into(out, mono_strip(m, idx), c * k)
    return out


# ---------------------------------------------------------------------------
# the truncated free energy
# ---------------------------------------------------------------------------

def slot_weight(g2: int, n: int) -> int:
    """Homogeneous t-weight of F_{h,n}: 6h - 6 + 3n."""
    return 3 * g2 - 6 + 3 * n


@dataclass
class FreeEnergy:
    """F_{h,n} polynomials keyed by (2h, n), complete through a complexity
    bound (complexity = 2h - 2 + n)."""

    slots: dict[tuple[int, int], TPoly]
    solved_complexity: int

    def poly(self, g2: int, n: int) -> TPoly:
        return self.slots.get((g2, n), {})

    def coefficient(self, g2: int, m: TMono) -> Fraction:
        return self.poly(g2, mono_degree(m)).get(m, Fraction(0))

    def max_index(self) -> int:
        best = 0
        for p in self.slots.values():
            for m in p:
                if m:
                    best = max(best, m[-1][0])
        return best

    def copy(self) -> "FreeEnergy":
        return FreeEnergy({k: dict(v) for k, v in self.slots.items()}, self.solved_complexity)

    def check_homogeneity(self) -> None:
        for (g2, n), p in self.slots.items():
            w = slot_weight(g2, n)
            for m in p:
                if mono_degree(m) != n or mono_weight(m) != w:
                    raise AlgebraError(f"slot ({g2},{n}): inhomogeneous monomial {m}")


def _slot_pairs(g2_total: int, n_total: int) -> Iterator[tuple[tuple[int, int], tuple[int, int]]]:
    """Ordered pairs of slots with given twice-genus and marked-point totals."""
    if g2_total < 0:
        return
    for gA in range(0, g2_total + 1):
        for nA in range(1, n_total):
            nB = n_total - nA
            yield (gA, nA), (g2_total - gA, nB)


def _slot_triples(g2_total: int, n_total: int) -> Iterator[tuple[tuple[int, int], ...]]:
    if g2_total < 0:
        return
    for gA in range(0, g2_total + 1):
        for gB in range(0, g2_total - gA + 1):
            gC = g2_total - gA - gB
            for nA in range(1, n_total - 1):
                for nB in range(1, n_total - nA):
                    nC = n_total - nA - nB
                    yield (gA, nA), (gB, nB), (gC, nC)


# ---------------------------------------------------------------------------
# ladder equations: right-hand sides of the two generating displays
# ---------------------------------------------------------------------------

class _Derivs:
    """Cache of first derivatives per slot for one solver pass."""

    def __init__(self, F: FreeEnergy):
        self.F = F
        self._cache: dict[tuple[int, int], dict[int, TPoly]] = {}

    def table(self, g2: int, n: int) -> dict[int, TPoly]:
        if g2 < 0 or n < 1:
            return {}
        key = (g2, n)
        if key not in self._cache:
            p = self.F.poly(g2, n)
            idxs = sorted({i for m in p for i, _ in m})
            self._cache[key] = {j: d for j in idxs if (d := tp_deriv(p, j))}
        return self._cache[key]

    def odd(self, g2: int, n: int) -> list[tuple[int, TPoly]]:
        return [(j, d) for j, d in self.table(g2, n).items() if j % 2 == 1]

    def even(self, g2: int, n: int) -> list[tuple[int, TPoly]]:
        return [(j, d) for j, d in self.table(g2, n).items() if j % 2 == 0]

    def by_parity(self, g2: int, n: int, odd: bool) -> list[tuple[int, TPoly]]:
        return self.odd(g2, n) if odd else self.even(g2, n)


def _rhs_add(rhs: dict[int, TPoly], j: int, m: TMono, c: Fraction) -> None:
    if j < 1 or c == 0:
        return
    tp_add_into(rhs.setdefault(j, {}), m, c)


def _rhs_add_poly(rhs: dict[int, TPoly], j: int, p: TPoly, c: Fraction = Fraction(1)) -> None:
    if j < 1:
        return
    for m, v in p.items():
        _rhs_add(rhs, j, m, v * c)


def _second_derivs(F: FreeEnergy, g2: int, n: int) -> dict[tuple[int, int], TPoly]:
    """All nonzero d_a d_b of one slot, keyed by ordered (a, b)."""
    p = F.poly(g2, n)
    out: dict[tuple[int, int], TPoly] = {}
    idxs = sorted({i for m in p for i, _ in m})
    firsts = {a: tp_deriv(p, a) for a in idxs}
    for a, da in firsts.items():
        for b in sorted({i for m in da for i, _ in m}):
            d2 = tp_deriv(da, b)
            if d2:
                out[(a, b)] = d2
    return out


def _third_derivs(F: FreeEnergy, g2: int, n: int) -> dict[tuple[int, int, int], TPoly]:
    out: dict[tuple[int, int, int], TPoly] = {}
    for (a, b), d2 in _second_derivs(F, g2, n).items():
        for c in sorted({i for m in d2 for i, _ in m}):
            d3 = tp_deriv(d2, c)
            if d3:
                out[(a, b, c)] = d3
    return out


def even_pole_rhs(F: FreeEnergy, g2: int, n: int, derivs: _Derivs | None = None) -> dict[int, TPoly]:
    """Right-hand side of the even-pole ladder for slot (2h, n): a map
    j (odd) -> polynomial equal to dF_{h,n}/dt_j.

    Every source slot has strictly smaller complexity, which is what makes
    the order-by-order solve well-founded.
    """
    D = derivs or _Derivs(F)
    rhs: dict[int, TPoly] = {}
    half = Fraction(1, 2)

    # explicit low-complexity sources
    if (g2, n) == (2, 1):
        _rhs_add(rhs, 3, ONE, Fraction(13, 8))
    if (g2, n) == (1, 2):
        _rhs_add(rhs, 1, mono(2), Fraction(2))
    if (g2, n) == (0, 3):
        _rhs_add(rhs, 1, mono(1, 1), half)

    # first-order ladder from the half-genus-down slot
    for b, d in D.even(g2 - 1, n):
        _rhs_add_poly(rhs, b + 3, d, Fraction(b + 4, 2))

    # quadratic convolution over ordered slot pairs (one genus down)
    for (gA, nA), (gB, nB) in _slot_pairs(g2 - 2, n + 1):
        for odd in (True, False):
            for a, dA in D.by_parity(gA, nA, odd):
                for b, dB in D.by_parity(gB, nB, odd):
                    _rhs_add_poly(rhs, a + b + 3, tp_mul(dA, dB), half)

    # diagonal second derivatives (one genus down, one extra point)
    if g2 - 2 >= 0:
        for (a, b), d2 in _second_derivs(F, g2 - 2, n + 1).items():
            if a % 2 == b % 2:
                _rhs_add_poly(rhs, a + b + 3, d2, half)

    # time-multiplication ladder within the same slot column
    for parity in (1, 0):
        for b, d in D.by_parity(g2, n - 1, parity == 1):
            for a in range(2 - parity, b + 3, 2):
                j = b + 3 - a
                if j >= 1:
                    _rhs_add_poly(rhs, j, {mono_mul(m, mono(a)): c for m, c in d.items()}, Fraction(a))
    return rhs


def odd_pole_rhs(F: FreeEnergy, g2: int, n: int, derivs: _Derivs | None = None) -> dict[int, TPoly]:
    """Right-hand side of the odd-pole ladder for slot (2h, n): a map
    j (even) -> dF_{h,n}/dt_j."""
    D = derivs or _Derivs(F)
    rhs: dict[int, TPoly] = {}
    third = Fraction(1, 3)

    if (g2, n) == (3, 1):
        _rhs_add(rhs, 6, ONE, Fraction(3, 4))
    if (g2, n) == (2, 2):
        _rhs_add(rhs, 2, mono(4), Fraction(-5))
        _rhs_add(rhs, 4, mono(2), Fraction(-5, 2))
    if (g2, n) == (1, 2):
        _rhs_add(rhs, 2, mono(1), Fraction(2))
    if (g2, n) == (1, 3):
        _rhs_add(rhs, 2, mono(2, 2), Fraction(-4))
        _rhs_add(rhs, 2, mono(1, 3), Fraction(-6))
        _rhs_add(rhs, 4, mono(1, 1), Fraction(-1))
    if (g2, n) == (0, 4):
        _rhs_add(rhs, 2, mono(1, 1, 2), Fraction(-2))

    # even shift of the odd ladder, half genus down
    for a, d in D.odd(g2 - 1, n):
        _rhs_add_poly(rhs, a + 3, d, Fraction(2))

    # second-order ladder one genus down
    for b, d in D.even(g2 - 2, n):
        _rhs_add_poly(rhs, b + 6, d, Fraction(b * b + 6 * b, 1) / 6 + Fraction(1, 12))

    # mixed quadratic convolution, one genus down
    for (gA, nA), (gB, nB) in _slot_pairs(g2 - 2, n + 1):
        for a, dA in D.odd(gA, nA):
            for b, dB in D.even(gB, nB):
                _rhs_add_poly(rhs, a + b + 3, tp_mul(dA, dB), Fraction(2))

    # mixed diagonal second derivatives, one genus down
    if g2 - 2 >= 0:
        for (a, b), d2 in _second_derivs(F, g2 - 2, n + 1).items():
            if a % 2 != b % 2:
                _rhs_add_poly(rhs, a + b + 3, d2)

    # same-parity quadratic convolution, three half-genera down
    for (gA, nA), (gB, nB) in _slot_pairs(g2 - 3, n + 1):
        for odd in (True, False):
            for a, dA in D.by_parity(gA, nA, odd):
                for b, dB in D.by_parity(gB, nB, odd):
                    _rhs_add_poly(rhs, a + b + 6, tp_mul(dA, dB), Fraction(-1))

    # same-parity diagonal second derivatives, three half-genera down
    if g2 - 3 >= 0:
        for (a, b), d2 in _second_derivs(F, g2 - 3, n + 1).items():
            if a % 2 == b % 2:
                _rhs_add_poly(rhs, a + b + 6, d2, Fraction(-1))

    # cubic convolution over ordered slot triples, two genera down
    for sA, sB, sC in _slot_triples(g2 - 4, n + 2):
        for a, dA in D.even(*sA):
            for b, dB in D.even(*sB):
                for c, dC in D.even(*sC):
                    _rhs_add_poly(rhs, a + b + c + 6, tp_mul(tp_mul(dA, dB), dC), -third)
        for a, dA in D.odd(*sA):
            for b, dB in D.odd(*sB):
                for c, dC in D.even(*sC):
                    _rhs_add_poly(rhs, a + b + c + 6, tp_mul(tp_mul(dA, dB), dC), Fraction(-1))

    # diagonal third derivatives, two genera down (even total index only)
    if g2 - 4 >= 0:
        for (a, b, c), d3 in _third_derivs(F, g2 - 4, n + 2).items():
            if (a + b + c) % 2 == 0:
                _rhs_add_poly(rhs, a + b + c + 6, d3, -third)

    # derivative-of-product terms, two genera down
    for (gA, nA), (gB, nB) in _slot_pairs(g2 - 4, n + 2):
        secondA = _second_derivs(F, gA, nA)
        secondB = _second_derivs(F, gB, nB)
        for a_parity, coeff in ((1, Fraction(-1)), (0, Fraction(-1, 2))):
            patterns: list[tuple[int, int]]
            if a_parity == 1:
                patterns = [(1, 0)]  # p odd from A, q even from B
            else:
                patterns = [(1, 1), (0, 0)]
            for p_par, q_par in patterns:
                for (a, p), d2 in secondA.items():
                    if a % 2 != a_parity or p % 2 != p_par:
                        continue
                    for q, dB in D.by_parity(gB, nB, q_par == 1):
                        _rhs_add_poly(rhs, a + p + q + 6, tp_mul(d2, dB), coeff)
                for p, dA in D.by_parity(gA, nA, p_par == 1):
                    for (a, q), d2 in secondB.items():
                        if a % 2 != a_parity or q % 2 != q_par:
                            continue
                        _rhs_add_poly(rhs, a + p + q + 6, tp_mul(dA, d2), coeff)

    # time-multiplication ladders
    for a_par, b_par in ((1, 0), (0, 1)):
        for b, d in D.by_parity(g2, n - 1, b_par == 1):
            for a in range(2 - a_par, b + 2, 2):
                j = b + 3 - a
                if j >= 2:
                    _rhs_add_poly(rhs, j, {mono_mul(m, mono(a)): c for m, c in d.items()}, Fraction(2 * a))
    for par in (1, 0):
        for b, d in D.by_parity(g2 - 1, n - 1, par == 1):
            for a in range(2 - par, b + 5, 2):
                j = b + 6 - a
                if j >= 2:
                    _rhs_add_poly(rhs, j, {mono_mul(m, mono(a)): c for m, c in d.items()}, Fraction(-2 * a))

    # double-time ladder within the same column
    for a_par, b_par, c_par, coeff in (
        (1, 0, 1, Fraction(-2)),
        (1, 1, 0, Fraction(-1)),
        (0, 0, 0, Fraction(-1)),
    ):
        for c, d in D.by_parity(g2, n - 2, c_par == 1):
            for a in range(2 - a_par, c + 5, 2):
                for b in range(2 - b_par, c + 6 - a, 2):
                    j = c + 6 - a - b
                    if j >= 2:
                        tm = mono_mul(mono(a), mono(b))
                        _rhs_add_poly(
                            rhs, j, {mono_mul(m, tm): v for m, v in d.items()}, Fraction(a * b) * coeff
                        )

    # time-times-quadratic terms, one genus down
    for (gA, nA), (gB, nB) in _slot_pairs(g2 - 2, n):
        for p, dA in D.odd(gA, nA):
            for q, dB in D.even(gB, nB):
                prod = tp_mul(dA, dB)
                for a in range(1, p + q + 5, 2):
                    j = p + q + 6 - a
                    if j >= 2:
                        _rhs_add_poly(rhs, j, {mono_mul(m, mono(a)): v for m, v in prod.items()}, Fraction(-2 * a))
        for odd in (True, False):
            for p, dA in D.by_parity(gA, nA, odd):
                for q, dB in D.by_parity(gB, nB, odd):
                    prod = tp_mul(dA, dB)
                    for a in range(2, p + q + 5, 2):
                        j = p + q + 6 - a
                        if j >= 2:
                            _rhs_add_poly(rhs, j, {mono_mul(m, mono(a)): v for m, v in prod.items()}, Fraction(-a))

    # time-times-second-derivative terms, one genus down
    if g2 - 2 >= 0:
        for (p, q), d2 in _second_derivs(F, g2 - 2, n).items():
            if p % 2 != q % 2:
                for a in range(1, p + q + 5, 2):
                    j = p + q + 6 - a
                    if j >= 2:
                        _rhs_add_poly(rhs, j, {mono_mul(m, mono(a)): v for m, v in d2.items()}, Fraction(-a))
            else:
                for a in range(2, p + q + 5, 2):
                    j = p + q + 6 - a
                    if j >= 2:
                        _rhs_add_poly(rhs, j, {mono_mul(m, mono(a)): v for m, v in d2.items()}, Fraction(-a))
    return rhs


def solve_free_energy(max_complexity: int) -> FreeEnergy:
    """Solve the constraint system order by order in complexity 2h - 2 + n.

    Each slot's monomial coefficients are forced by the ladder equations;
    when a coefficient is reachable through several derivative directions the
    values must agree, otherwise the transcription of the system is wrong and
    an error names the offending monomial.
    """
    F = FreeEnergy({}, 0)
    for c in range(1, max_complexity + 1):
        D = _Derivs(F)
        for n in range(1, c + 3):
            g2 = c + 2 - n
            if g2 < 0:
                continue
            target_w = slot_weight(g2, n)
            if target_w < n:  # smallest possible weight of a degree-n monomial
                continue
            rhs_even = even_pole_rhs(F, g2, n, D)
            rhs_odd = odd_pole_rhs(F, g2, n, D)
            poly: TPoly = {}
            seen: dict[TMono, tuple[Fraction, int]] = {}
            for rhs in (rhs_even, rhs_odd):
                for j, p in rhs.items():
                    for nu, val in p.items():
                        if mono_weight(nu) + j != target_w or mono_degree(nu) + 1 != n:
                            raise AlgebraError(
                                f"slot ({g2},{n}): source row j={j} breaks "
                                f"homogeneity at {nu}"
                            )
                        mu = mono_mul(nu, mono(j))
                        coeff = val / mono_mult(mu, j)
                        if mu in seen:
                            prev, prev_j = seen[mu]
                            if prev != coeff:
                                raise AlgebraError(
                                    f"inconsistent forcing of coefficient {mu} in "
                                    f"slot ({g2},{n}): {prev} via t_{prev_j}, "
                                    f"{coeff} via t_{j}"
                                )
                        else:
                            seen[mu] = (coeff, j)
                            if coeff != 0:
                                poly[mu] = coeff
            # cross-check: every derivative direction of the assembled slot
            # must reproduce the corresponding ladder row exactly.
            for j in sorted({i for m in poly for i, _ in m}):
                rhs = rhs_even if j % 2 == 1 else rhs_odd
                if tp_deriv(poly, j) != rhs.get(j, {}):
                    raise AlgebraError(
                        f"slot ({g2},{n}): ladder row t_{j} disagrees with "
                        f"the assembled polynomial"
                    )
            if poly:
                F.slots[(g2, n)] = poly
        F.solved_complexity = c
    F.check_homogeneity()
    return F


# ---------------------------------------------------------------------------
# current-algebra operators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CurrentTerm:
    """One normal-ordered monomial c u^(u3/3) (prod t_i) (prod d/dt_j)."""

    coeff: Fraction
    u3: int
    mults: TMono
    derivs: tuple[int, ...]


def _current_factor(k: int) -> tuple[Fraction, int, int | None, int | None] | None:
    """(coefficient, u3, multiplication index, derivative index) of J_k."""
    if k == 0:
        return None
    if k > 0:
        return (Fraction(1), 3 - k, None, k)
    a = -k
    return (Fraction(a), a - 3, a, None)


def _combine(factors: Iterable[tuple[Fraction, int, int | None, int | None]], scale: Fraction) -> CurrentTerm:
    coeff = scale
    u3 = 0
    mults: list[int] = []
    derivs: list[int] = []
    for c, u, m, d in factors:
        coeff *= c
        u3 += u
        if m is not None:
            mults.append(m)
        if d is not None:
            derivs.append(d)
    return CurrentTerm(coeff, u3, mono(*mults), tuple(sorted(derivs)))


def virasoro_terms(K: int, idx_bound: int) -> list[CurrentTerm]:
    """L_K = (1/2) sum_{a+b=K} :J_a J_b: with indices cut at ``idx_bound``."""
    out = []
    for a in range(-idx_bound, idx_bound + 1):
        b = K - a
        if abs(b) > idx_bound:
            continue
        fa, fb = _current_factor(a), _current_factor(b)
        if fa is None or fb is None:
            continue
        out.append(_combine((fa, fb), Fraction(1, 2)))
    return out


def cubic_terms(K: int, idx_bound: int) -> list[CurrentTerm]:
    """M_K = (1/3) sum_{a+b+c=K} :J_a J_b J_c: with indices cut at ``idx_bound``."""
    out = []
    for a in range(-idx_bound, idx_bound + 1):
        for b in range(a, idx_bound + 1):
            c = K - a - b
            if c < b or abs(c) > idx_bound:
                continue
            fa, fb, fc = _current_factor(a), _current_factor(b), _current_factor(c)
            if fa is None or fb is None or fc is None:
                continue
            if a == b == c:
                orderings = 1
            elif a == b or b == c:
                orderings = 3
            else:
                orderings = 6
            out.append(_combine((fa, fb, fc), Fraction(orderings, 3)))
    return out


def _current_terms(k: int, idx_bound: int) -> list[CurrentTerm]:
    f = _current_factor(k)
    return [] if f is None else [_combine((f,), Fraction(1))]


def lhat_terms(k: int, idx_bound: int) -> list[CurrentTerm]:
    terms = virasoro_terms(2 * k, idx_bound)
    terms += [
        CurrentTerm(t.coeff * (k + 2), t.u3, t.mults, t.derivs)
        for t in _current_terms(2 * k, idx_bound)
    ]
    if k == 0:
        terms.append(CurrentTerm(Fraction(13, 8), 0, ONE, ()))
    terms += [
        CurrentTerm(-t.coeff, t.u3, t.mults, t.derivs)
        for t in _current_terms(2 * k + 3, idx_bound)
    ]
    return terms


def mhat_terms(k: int, idx_bound: int) -> list[CurrentTerm]:
    terms = [
        CurrentTerm(-t.coeff, t.u3, t.mults, t.derivs)
        for t in cubic_terms(2 * k, idx_bound)
    ]
    terms += [
        CurrentTerm(2 * t.coeff, t.u3, t.mults, t.derivs)
        for t in virasoro_terms(2 * k + 3, idx_bound)
    ]
    terms += [
        CurrentTerm(-2 * t.coeff, t.u3, t.mults, t.derivs)
        for t in virasoro_terms(2 * k, idx_bound)
    ]
    terms += [
        CurrentTerm(2 * t.coeff, t.u3, t.mults, t.derivs)
        for t in _current_terms(2 * k + 3, idx_bound)
    ]
    jcoeff = Fraction(2 * k * k, 3) + 2 * k + Fraction(1, 12)
    terms += [
        CurrentTerm(jcoeff * t.coeff, t.u3, t.mults, t.derivs)
        for t in _current_terms(2 * k, idx_bound)
    ]
    if k == 0:
        terms.append(CurrentTerm(Fraction(3, 4), 0, ONE, ()))
    terms += [
        CurrentTerm(-t.coeff, t.u3, t.mults, t.derivs)
        for t in _current_terms(2 * k + 6, idx_bound)
    ]
    return terms


# graded polynomial states: (u-exponent in thirds, monomial) -> coefficient
GradedPoly = dict[tuple[int, TMono], Fraction]


def gp_add_into(dst: GradedPoly, key: tuple[int, TMono], c: Fraction) -> None:
    s = dst.get(key, Fraction(0)) + c
    if s == 0:
        dst.pop(key, None)
    else:
        dst[key] = s


def gp_mul(a: GradedPoly, b: GradedPoly) -> GradedPoly:
    out: GradedPoly = {}
    for (ua, ma), ca in a.items():
        for (ub, mb), cb in b.items():
            gp_add_into(out, (ua + ub, mono_mul(ma, mb)), ca * cb)
    return out


def act_on_state(terms: list[CurrentTerm], state: GradedPoly) -> GradedPoly:
    """Raw operator action on a polynomial state (no e^F conjugation)."""
    out: GradedPoly = {}
    for t in terms:
        for (u3, m), c in state.items():
            cur: TPoly = {m: c}
            for j in t.derivs:
                cur = tp_deriv(cur, j)
                if not cur:
                    break
            if not cur:
                continue
            for mm, cc in cur.items():
                gp_add_into(out, (u3 + t.u3, mono_mul(mm, t.mults)), cc * t.coeff)
    return out


def f_partial(F: FreeEnergy, idxs: tuple[int, ...]) -> GradedPoly:
    """Mixed partial of the full graded F: sum over slots of d..d F_{h,n},
    graded at u^(2h-2)."""
    out: GradedPoly = {}
    for (g2, n), p in F.slots.items():
        cur = p
        for j in idxs:
            cur = tp_deriv(cur, j)
            if not cur:
                break
        if not cur:
            continue
        u3 = 3 * (g2 - 2)
        for m, c in cur.items():
            gp_add_into(out, (u3, m), c)
    return out


def _expF_derivative_block(F: FreeEnergy, derivs: tuple[int, ...]) -> GradedPoly:
    """(prod_j d/dt_j) e^F / e^F as a graded polynomial (|derivs| <= 3)."""
    if not derivs:
        return {(0, ONE): Fraction(1)}
    if len(derivs) == 1:
        return f_partial(F, derivs)
    if len(derivs) == 2:
        i, j = derivs
        out = dict(f_partial(F, (i, j)))
        for key, c in gp_mul(f_partial(F, (i,)), f_partial(F, (j,))).items():
            gp_add_into(out, key, c)
        return out
    i, j, k = derivs
    out = dict(f_partial(F, (i, j, k)))
    for (a, b), c in (((i, j), k), ((i, k), j), ((j, k), i)):
        for key, v in gp_mul(f_partial(F, (a, b)), f_partial(F, (c,))).items():
            gp_add_into(out, key, v)
    triple = gp_mul(gp_mul(f_partial(F, (i,)), f_partial(F, (j,))), f_partial(F, (k,)))
    for key, v in triple.items():
        gp_add_into(out, key, v)
    return out


def conjugated_action(terms: list[CurrentTerm], F: FreeEnergy) -> GradedPoly:
    """(sum of terms acting on e^F) / e^F, exact for the given truncated F."""
    out: GradedPoly = {}
    blocks: dict[tuple[int, ...], GradedPoly] = {}
    for t in terms:
        block = blocks.get(t.derivs)
        if block is None:
            block = _expF_derivative_block(F, t.derivs)
            blocks[t.derivs] = block
        for (u3, m), c in block.items():
            gp_add_into(out, (u3 + t.u3, mono_mul(m, t.mults)), c * t.coeff)
    return out


def apply_current(k: int, F: FreeEnergy) -> GradedPoly:
    """(J_k e^F)/e^F."""
    bound = abs(k) + 1
    return conjugated_action(_current_terms(k, bound), F)


def _residual_bound(F: FreeEnergy, k: int, weight_bound: int) -> int:
    return max(F.max_index(), weight_bound) + 2 * k + 9


def apply_lhat(k: int, F: FreeEnergy, weight_bound: int | None = None) -> GradedPoly:
    """(Lhat_k e^F)/e^F, exact on monomials of weight <= weight_bound."""
    if k < 0:
        raise AlgebraError("shifted constraints are defined for k >= 0")
    wb = weight_bound if weight_bound is not None else F.max_index()
    return conjugated_action(lhat_terms(k, _residual_bound(F, k, wb)), F)


def apply_mhat(k: int, F: FreeEnergy, weight_bound: int | None = None) -> GradedPoly:
    """(Mhat_k e^F)/e^F, exact on monomials of weight <= weight_bound."""
    if k < 0:
        raise AlgebraError("shifted constraints are defined for k >= 0")
    wb = weight_bound if weight_bound is not None else F.max_index()
    return conjugated_action(mhat_terms(k, _residual_bound(F, k, wb)), F)


def residual_window(kind: str, k: int, u3: int, degree: int) -> int:
    """Complexity of the deepest source that can feed a residual slot.

    The slot is trustworthy (must vanish) iff this is <= the solved
    complexity of F.  The deepest source is the leading-derivative one:
    d/dt_{2k+3} F (kind "L", current shift -2k thirds) or d/dt_{2k+6} F
    (kind "M", shift -2k-3), so its slot satisfies 3(2h-2) = u3 + 2k (+3).
    """
    off = 0 if kind == "L" else 3
    g2_lead3 = u3 + 2 * k + off + 6
    if g2_lead3 % 3 != 0 or g2_lead3 < 0:
        return 10 ** 9  # no integral-genus source: slot cannot be fed at all
    g2_lead = g2_lead3 // 3
    return g2_lead - 2 + degree + 1


def max_checkable_weight(kind: str, k: int, u3: int, degree: int, solved_complexity: int) -> bool:
    return residual_window(kind, k, u3, degree) <= solved_complexity


def assert_annihilated(
    F: FreeEnergy,
    k_max: int = 4,
    weight_bound: int | None = None,
) -> list[str]:
    """Check Lhat_k e^F = 0 = Mhat_k e^F on every trustworthy slot.

    Returns a list of human-readable failures (empty = all residuals vanish).
    """
    wb = weight_bound if weight_bound is not None else 3 * F.solved_complexity + 3
    failures = []
    for k in range(0, k_max + 1):
        for kind, res in (("L", apply_lhat(k, F, wb)), ("M", apply_mhat(k, F, wb))):
            for (u3, m), c in sorted(res.items()):
                if mono_weight(m) > wb:
                    continue
                if residual_window(kind, k, u3, mono_degree(m)) <= F.solved_complexity:
                    failures.append(
                        f"{kind}hat_{k}: residual {c} at u^({u3}/3) {m}"
                    )
    return failures


# ---------------------------------------------------------------------------
# projections on Laurent differentials in one variable
# ---------------------------------------------------------------------------

def project_poles(a: LaurentDifferential, which: int) -> LaurentDifferential:
    """P2 (even poles >= 2) or P3 (odd poles >= 3) on a one-variable
    Laurent differential."""
    if which not in (2, 3):
        raise AlgebraError("projection index must be 2 or 3")
    if len(a.names) != 1:
        raise AlgebraError("projection expects a single-variable differential")
    keep = {}
    for e, c in a.terms.items():
        k = e[0]
        if which == 2 and k <= -2 and k % 2 == 0:
            keep[e] = c
        if which == 3 and k <= -3 and k % 2 == 1:
            keep[e] = c
    return LaurentDifferential(a.names, a.weights, keep)


def projection_via_residue(a: LaurentDifferential, which: int) -> LaurentDifferential:
    """The same projections computed as residues against the integrated
    Bergman kernels

        p2(z,w) = sum_{k odd >= 1} w^k z^-(k+1) dz
        p3(z,w) = sum_{k even >= 2} w^k z^-(k+1) dz

    via P[gamma(z) dz] = Res_{w -> 0} p(z, w) gamma(w) dw.  Must agree with
    :func:`project_poles` identically (self-test of the residue lemma).
    """
    if len(a.names) != 1:
        raise AlgebraError("projection expects a single-variable differential")
    (zname,) = a.names
    if a.weights != (1,):
        raise AlgebraError("projection expects a 1-form")
    aux = "w" if zname != "w" else "v"
    lo, _ = a.exponent_range(zname)
    order = max(2, -lo + 1)
    start = 1 if which == 2 else 2
    kern_terms = {}
    for k in range(start, order + 1, 2):
        kern_terms[(-(k + 1), k)] = Fraction(1)
    kern = LaurentDifferential((zname, aux), (1, 0), kern_terms)
    gamma = a.rename({zname: aux})
    return (kern * gamma).residue(aux)


# ---------------------------------------------------------------------------
# master-equation residuals
# ---------------------------------------------------------------------------

# graded Laurent data: (u-exponent, z-exponent, monomial) -> coefficient
GL = dict[tuple[int, int, TMono], Fraction]


def gl_add_into(dst: GL, key: tuple[int, int, TMono], c: Fraction) -> None:
    s = dst.get(key, Fraction(0)) + c
    if s == 0:
        dst.pop(key, None)
    else:
        dst[key] = s


def gl_mul(a: GL, b: GL) -> GL:
    out: GL = {}
    for (ua, ea, ma), ca in a.items():
        for (ub, eb, mb), cb in b.items():
            gl_add_into(out, (ua + ub, ea + eb, mono_mul(ma, mb)), ca * cb)
    return out


def gl_delta(a: GL) -> GL:
    """The loop-insertion derivation delta = sum_j z^-(j+1) dz d/dt_j,
    evaluated back at the same z (diagonal); adds one dz of weight."""
    out: GL = {}
    for (u, e, m), c in a.items():
        for idx, mult in m:
            gl_add_into(out, (u, e - idx - 1, mono_strip(m, idx)), c * mult)
    return out


def gl_d1(a: GL) -> GL:
    """dz (-d/dz + 1/z) on the z-dependence."""
    out: GL = {}
    for (u, e, m), c in a.items():
        gl_add_into(out, (u, e - 1, m), c * (1 - e))
    return out


def gl_d2(a: GL) -> GL:
    """(dz^2/2)(d^2/dz^2 - (3/z) d/dz + 3/z^2) on the z-dependence."""
    out: GL = {}
    for (u, e, m), c in a.items():
        gl_add_into(out, (u, e - 2, m), c * Fraction((e - 1) * (e - 3), 2))
    return out


def gl_shift_u(a: GL, du: int) -> GL:
    return {(u + du, e, m): c for (u, e, m), c in a.items()}


def build_u_tilde(F: FreeEnergy, t_index_bound: int) -> GL:
    """Utilde = delta F + u^-2 (t-source - z^2 dz) + u^-1 dz/z as a graded
    one-form; the t-source sum_j j t_j z^(j-1) dz is truncated at
    ``t_index_bound`` (indices above it cannot touch monomials within the
    solved weight budget)."""
    out: GL = {}
    gl_add_into(out, (-2, 2, ONE), Fraction(-1))
    gl_add_into(out, (-1, -1, ONE), Fraction(1))
    for j in range(1, t_index_bound + 1):
        gl_add_into(out, (-2, j - 1, mono(j)), Fraction(j))
    for (g2, n), p in F.slots.items():
        u = g2 - 2
        for m, c in p.items():
            for idx, mult in m:
                gl_add_into(out, (u, -idx - 1, mono_strip(m, idx)), c * mult)
    return out


def delta_u_tilde(F: FreeEnergy) -> GL:
    """delta Utilde with the renormalized diagonal: the divergent
    delta(t-source) is set to dz^2/(4 z^2); the other unstable pieces are
    t-free, so only the stable part of Utilde is differentiated."""
    stable: GL = {}
    for (g2, n), p in F.slots.items():
        u = g2 - 2
        for m, c in p.items():
            for idx, mult in m:
                gl_add_into(stable, (u, -idx - 1, mono_strip(m, idx)), c * mult)
    out = gl_delta(stable)
    gl_add_into(out, (-2, -2, ONE), Fraction(1, 4))
    return out


def master_equation_residual(which: int, F: FreeEnergy) -> GL:
    """Residual of the quadratic (which=2) or cubic (which=3) master equation.

    Zero on every trustworthy slot iff the constraints hold for F.  The
    output is the projected one-form, keyed by (u-exponent, z-exponent,
    t-monomial).
    """
    if which not in (2, 3):
        raise AlgebraError("master equation index must be 2 or 3")
    tb = max(3 * F.solved_complexity + 3, F.max_index())
    U = build_u_tilde(F, tb)
    dU = delta_u_tilde(F)
    if which == 2:
        expr: GL = gl_mul(U, U)
        for key, c in dU.items():
            gl_add_into(expr, key, c)
        for key, c in gl_shift_u(gl_d1(U), -1).items():
            gl_add_into(expr, key, c)
        # divide by 2 eta = -2 z^2 dz, then project on even poles
        out: GL = {}
        for (u, e, m), c in expr.items():
            e2 = e - 2
            if e2 <= -2 and e2 % 2 == 0:
                gl_add_into(out, (u, e2, m), c * Fraction(-1, 2))
        return out
    expr = gl_mul(U, gl_mul(U, U))
    for key, c in gl_mul(U, dU).items():
        gl_add_into(expr, key, 3 * c)
    for key, c in gl_delta(dU).items():
        gl_add_into(expr, key, c)
    for key, c in gl_shift_u(gl_d2(U), -2).items():
        gl_add_into(expr, key, -c)
    out = {}
    for (u, e, m), c in expr.items():
        e3 = e - 4
        if e3 <= -3 and e3 % 2 == 1:
            gl_add_into(out, (u, e3, m), c * Fraction(1, 3))
    return out


def master_residual_failures(which: int, F: FreeEnergy) -> list[str]:
    """Nonzero residual entries on slots that the solved budget fully
    determines.  Complexity of the deepest source of a slot at u-power p and
    t-degree d is p + d + 3 (quadratic) or p + d + 5 (cubic)."""
    res = master_equation_residual(which, F)
    off = 3 if which == 2 else 5
    out = []
    for (u, e, m), c in sorted(res.items()):
        if u + mono_degree(m) + off <= F.solved_complexity:
            out.append(f"P{which}: residual {c} at u^{u} z^{e} {m}")
    return out
