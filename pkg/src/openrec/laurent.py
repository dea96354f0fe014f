"""Exact sparse Laurent-differential arithmetic.

A :class:`LaurentDifferential` is a finite sum of terms

    coeff * v1^e1 * ... * vm^em * dv1^w1 * ... * dvm^wm

over a fixed ordered set of named variables.  Exponents ``ei`` are arbitrary
integers (poles allowed), coefficients are exact rationals, and each variable
carries a differential weight ``wi`` (the number of attached ``dv`` factors;
negative weights occur in recursion kernels, which divide by differentials).

The representation is sparse at the term level: ``terms`` maps dense exponent
tuples (one integer per variable, in registry order) to nonzero coefficients.
Zero is the empty term dict.  Values are immutable after construction, so they
can be shared freely between threads; every operation returns a new value.
"""

from __future__ import annotations

import re
from fractions import Fraction
from typing import Iterable, Iterator, Mapping

Rational = Fraction
Exponents = tuple[int, ...]


class AlgebraError(ValueError):
    """Structural misuse of the algebra (mismatched variables/weights...)."""


class UnrenormalizedDiagonal(AlgebraError):
    """A diagonal evaluation of the Bergman kernel B(w, w) was requested."""


_VAR_RE = re.compile(r"^([A-Za-z]+)([0-9]*)$")


def variable_sort_key(name: str) -> tuple[int, str, int]:
    """Canonical registry order: z-variables first by index, then the rest
    alphabetically (also by index).  Fixes deterministic iteration, rendering
    and serialization."""
    m = _VAR_RE.match(name)
    if not m:
        raise AlgebraError(f"bad variable name {name!r}")
    prefix, num = m.group(1), m.group(2)
    return (0 if prefix == "z" else 1, prefix, int(num) if num else -1)


def _as_fraction(c) -> Fraction:
    if isinstance(c, Fraction):
        return c
    if isinstance(c, int):
        return Fraction(c)
    raise AlgebraError(f"coefficient must be exact (int or Fraction), got {type(c)}")


class LaurentDifferential:
    """Immutable sparse Laurent differential over named variables."""

    __slots__ = ("names", "weights", "terms")

    def __init__(
        self,
        names: Iterable[str],
        weights: Iterable[int],
        terms: Mapping[Exponents, Fraction] | None = None,
    ):
        names = tuple(names)
        weights = tuple(weights)
        if len(names) != len(weights):
            raise AlgebraError("names and weights must have equal length")
        if len(set(names)) != len(names):
            raise AlgebraError(f"duplicate variable in {names}")
        order = sorted(range(len(names)), key=lambda i: variable_sort_key(names[i]))
        perm_needed = order != list(range(len(names)))
        self_names = tuple(names[i] for i in order)
        self_weights = tuple(weights[i] for i in order)
        clean: dict[Exponents, Fraction] = {}
        if terms:
            for exps, c in terms.items():
                c = _as_fraction(c)
                if c == 0:
                    continue
                exps = tuple(exps)
                if len(exps) != len(names):
                    raise AlgebraError(
                        f"exponent arity {len(exps)} != variable count {len(names)}"
                    )
                if perm_needed:
                    exps = tuple(exps[i] for i in order)
                if exps in clean:
                    c = clean[exps] + c
                    if c == 0:
                        del clean[exps]
                        continue
                clean[exps] = c
        object.__setattr__(self, "names", self_names)
        object.__setattr__(self, "weights", self_weights)
        object.__setattr__(self, "terms", clean)

    def __setattr__(self, *a):  # pragma: no cover - guard only
        raise AttributeError("LaurentDifferential is immutable")

    # -- constructors -------------------------------------------------------

    @classmethod
    def zero(cls, names: Iterable[str] = (), weights: Iterable[int] = ()) -> "LaurentDifferential":
        return cls(names, weights, {})

    @classmethod
    def constant(cls, c) -> "LaurentDifferential":
        c = _as_fraction(c)
        return cls((), (), {(): c} if c else {})

    @classmethod
    def monomial(cls, coeff, exps: Mapping[str, int], weights: Mapping[str, int]) -> "LaurentDifferential":
        """Single term; ``exps``/``weights`` keyed by variable name."""
        names = sorted(set(exps) | set(weights), key=variable_sort_key)
        return cls(
            names,
            tuple(weights.get(v, 0) for v in names),
            {tuple(exps.get(v, 0) for v in names): coeff},
        )

    # -- inspection ---------------------------------------------------------

    def is_zero(self) -> bool:
        return not self.terms

    def __bool__(self) -> bool:
        return bool(self.terms)

    def __len__(self) -> int:
        return len(self.terms)

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise AlgebraError(f"unknown variable {name!r} (have {self.names})") from None

    def weight_of(self, name: str) -> int:
        return self.weights[self.index_of(name)]

    def coefficient(self, exps: Iterable[int]) -> Fraction:
        exps = tuple(exps)
        if len(exps) != len(self.names):
            raise AlgebraError("exponent arity mismatch")
        return self.terms.get(exps, Fraction(0))

    def exponent_range(self, name: str) -> tuple[int, int]:
        """(min, max) exponent of ``name`` over all terms; (0, 0) if zero."""
        i = self.index_of(name)
        if not self.terms:
            return (0, 0)
        es = [e[i] for e in self.terms]
        return (min(es), max(es))

    def items(self) -> Iterator[tuple[Exponents, Fraction]]:
        return iter(self.terms.items())

    # -- ring operations ----------------------------------------------------

    def _check_same_shape(self, other: "LaurentDifferential") -> None:
        if self.names != other.names or self.weights != other.weights:
            raise AlgebraError(
                f"shape mismatch: {self.names}/{self.weights} vs "
                f"{other.names}/{other.weights}"
            )

    def __add__(self, other: "LaurentDifferential") -> "LaurentDifferential":
        self._check_same_shape(other)
        out = dict(self.terms)
        for e, c in other.terms.items():
            s = out.get(e, Fraction(0)) + c
            if s == 0:
                out.pop(e, None)
            else:
                out[e] = s
        return _raw(self.names, self.weights, out)

    def __neg__(self) -> "LaurentDifferential":
        return _raw(self.names, self.weights, {e: -c for e, c in self.terms.items()})

    def __sub__(self, other: "LaurentDifferential") -> "LaurentDifferential":
        return self + (-other)

    def scale(self, c) -> "LaurentDifferential":
        c = _as_fraction(c)
        if c == 0:
            return _raw(self.names, self.weights, {})
        return _raw(self.names, self.weights, {e: c * v for e, v in self.terms.items()})

    def __mul__(self, other: "LaurentDifferential") -> "LaurentDifferential":
        a, b = align(self, other)
        out: dict[Exponents, Fraction] = {}
        for ea, ca in a.terms.items():
            for eb, cb in b.terms.items():
                e = tuple(x + y for x, y in zip(ea, eb))
                s = out.get(e, Fraction(0)) + ca * cb
                if s == 0:
                    out.pop(e, None)
                else:
                    out[e] = s
        weights = tuple(wa + wb for wa, wb in zip(a.weights, b.weights))
        return _raw(a.names, weights, out)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LaurentDifferential):
            return NotImplemented
        a, b = align(self, other)
        return a.weights == b.weights and a.terms == b.terms

    __hash__ = None  # mutable-dict payload; value equality only

    # -- calculus -----------------------------------------------------------

    def differentiate(self, name: str) -> "LaurentDifferential":
        """d/dname acting on the coefficient function only: v^k -> k v^(k-1).
        Differential weights are unchanged; callers attach extra dv weight
        explicitly when building operators like D1/D2."""
        i = self.index_of(name)
        out: dict[Exponents, Fraction] = {}
        for e, c in self.terms.items():
            k = e[i]
            if k == 0:
                continue
            ne = e[:i] + (k - 1,) + e[i + 1:]
            s = out.get(ne, Fraction(0)) + c * k
            if s == 0:
                out.pop(ne, None)
            else:
                out[ne] = s
        return _raw(self.names, self.weights, out)

    def shift(self, name: str, k: int) -> "LaurentDifferential":
        """Multiply by name^k."""
        i = self.index_of(name)
        return _raw(
            self.names,
            self.weights,
            {e[:i] + (e[i] + k,) + e[i + 1:]: c for e, c in self.terms.items()},
        )

    def raise_weight(self, name: str, dw: int) -> "LaurentDifferential":
        """Attach dw extra differential factors d(name)^dw (dw may be negative)."""
        i = self.index_of(name)
        ws = list(self.weights)
        ws[i] += dw
        return _raw(self.names, tuple(ws), self.terms)

    def with_variables(self, extra: Mapping[str, int]) -> "LaurentDifferential":
        """Extend the variable registry by ``extra`` (name -> weight), exponent 0."""
        new = [n for n in extra if n not in self.names]
        if not new:
            return self
        names = self.names + tuple(new)
        weights = self.weights + tuple(extra[n] for n in new)
        pad = (0,) * len(new)
        return LaurentDifferential(names, weights, {e + pad: c for e, c in self.terms.items()})

    def rename(self, mapping: Mapping[str, str]) -> "LaurentDifferential":
        """Simultaneous substitution of variable names.

        Several old variables may map to the same new name: their exponents and
        differential weights are then summed (the diagonal evaluation used for
        terms like W(w, w, ...)).  The caller is responsible for having removed
        any pole on the identified diagonal first.
        """
        tgt = [mapping.get(n, n) for n in self.names]
        new_names = sorted(set(tgt), key=variable_sort_key)
        pos = {n: j for j, n in enumerate(new_names)}
        weights = [0] * len(new_names)
        for n, w in zip(tgt, self.weights):
            weights[pos[n]] += w
        out: dict[Exponents, Fraction] = {}
        for e, c in self.terms.items():
            ne = [0] * len(new_names)
            for n, k in zip(tgt, e):
                ne[pos[n]] += k
            key = tuple(ne)
            s = out.get(key, Fraction(0)) + c
            if s == 0:
                out.pop(key, None)
            else:
                out[key] = s
        return _raw(tuple(new_names), tuple(weights), out)

    def set_equal(self, from_names: Iterable[str], to_name: str) -> "LaurentDifferential":
        """Identify all ``from_names`` variables with ``to_name``."""
        for n in from_names:
            self.index_of(n)
        return self.rename({n: to_name for n in from_names})

    def residue(self, name: str) -> "LaurentDifferential":
        """Coefficient of name^(-1) d(name); removes ``name`` from the registry.

        The differential weight in ``name`` must be exactly 1 at residue time;
        anything else signals an integrand-assembly bug upstream.
        """
        i = self.index_of(name)
        if self.weights[i] != 1:
            raise AlgebraError(
                f"residue in {name!r} requires differential weight 1, "
                f"found {self.weights[i]}"
            )
        names = self.names[:i] + self.names[i + 1:]
        weights = self.weights[:i] + self.weights[i + 1:]
        out: dict[Exponents, Fraction] = {}
        for e, c in self.terms.items():
            if e[i] != -1:
                continue
            ne = e[:i] + e[i + 1:]
            s = out.get(ne, Fraction(0)) + c
            if s == 0:
                out.pop(ne, None)
            else:
                out[ne] = s
        return _raw(names, weights, out)

    def specialize(self, name: str, value) -> "LaurentDifferential":
        """Substitute a rational value for a weight-0 variable and drop it."""
        value = _as_fraction(value)
        i = self.index_of(name)
        if self.weights[i] != 0:
            raise AlgebraError(f"cannot specialize {name!r}: carries differential weight")
        names = self.names[:i] + self.names[i + 1:]
        weights = self.weights[:i] + self.weights[i + 1:]
        out: dict[Exponents, Fraction] = {}
        for e, c in self.terms.items():
            if e[i] < 0 and value == 0:
                raise AlgebraError("pole at specialization point")
            ne = e[:i] + e[i + 1:]
            s = out.get(ne, Fraction(0)) + c * value ** e[i]
            if s == 0:
                out.pop(ne, None)
            else:
                out[ne] = s
        return _raw(names, weights, out)

    # -- rendering ----------------------------------------------------------

    def render(self) -> str:
        """Canonical text form, e.g. ``-1/3 * z0^-3 w^-2 dz0 dw^2``.

        Terms are sorted lexicographically on exponent vectors; coefficients
        print as exact rationals.  Used by golden tests and exports.
        """
        if not self.terms:
            return "0"
        pieces = []
        for e in sorted(self.terms):
            c = self.terms[e]
            factors = [
                f"{n}^{k}" if k != 1 else n
                for n, k in zip(self.names, e)
                if k != 0
            ]
            diffs = [
                f"d{n}^{w}" if w != 1 else f"d{n}"
                for n, w in zip(self.names, self.weights)
                if w != 0
            ]
            body = " ".join(factors + diffs)
            pieces.append(f"{c} * {body}" if body else f"{c}")
        return " + ".join(pieces)

    def __repr__(self) -> str:
        return f"<LaurentDifferential {self.render()}>"


def _raw(names: tuple[str, ...], weights: tuple[int, ...], terms: dict) -> LaurentDifferential:
    """Internal constructor for already-canonical data (names sorted, no zeros)."""
    out = LaurentDifferential.__new__(LaurentDifferential)
    object.__setattr__(out, "names", names)
    object.__setattr__(out, "weights", weights)
    object.__setattr__(out, "terms", terms)
    return out


def align(a: LaurentDifferential, b: LaurentDifferential) -> tuple[LaurentDifferential, LaurentDifferential]:
    """Extend both operands to the union variable set (weight 0 for absentees)."""
    if a.names == b.names:
        return a, b
    a2 = a.with_variables({n: 0 for n in b.names})
    b2 = b.with_variables({n: 0 for n in a.names})
    return a2, b2


def add(a: LaurentDifferential, b: LaurentDifferential) -> LaurentDifferential:
    """Exact sum; operands must share variable set and per-variable weight."""
    return a + b


def mul(a: LaurentDifferential, b: LaurentDifferential) -> LaurentDifferential:
    """Exact product over the union variable set; weights add per variable."""
    return a * b


def mul_window(
    a: LaurentDifferential,
    b: LaurentDifferential,
    name: str,
    lo: int,
    hi: int,
) -> LaurentDifferential:
    """Product keeping only terms whose ``name``-exponent lies in [lo, hi].

    Truncation support for residue integrands: exponents outside the window
    cannot reach the residue once the remaining factors are taken into
    account, so dropping them early keeps intermediate products small.
    """
    a, b = align(a, b)
    i = a.index_of(name)
    by_exp: dict[int, list[tuple[Exponents, Fraction]]] = {}
    for eb, cb in b.terms.items():
        by_exp.setdefault(eb[i], []).append((eb, cb))
    out: dict[Exponents, Fraction] = {}
    for ea, ca in a.terms.items():
        ka = ea[i]
        for kb, bucket in by_exp.items():
            if not lo <= ka + kb <= hi:
                continue
            for eb, cb in bucket:
                e = tuple(x + y for x, y in zip(ea, eb))
                s = out.get(e, Fraction(0)) + ca * cb
                if s == 0:
                    out.pop(e, None)
                else:
                    out[e] = s
    weights = tuple(wa + wb for wa, wb in zip(a.weights, b.weights))
    return _raw(a.names, weights, out)
