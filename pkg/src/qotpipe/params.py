"""Protocol parameters and the security/performance calculus.

All epsilon arithmetic runs through :mod:`mpmath` so that terms such as
``2**-253`` or ``2**-(N_raw/2)`` never underflow.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import mpmath

# Private context: 128-bit mantissa without touching mpmath's global precision.
_mp = mpmath.MPContext()
_mp.prec = 128
mpf = _mp.mpf

TABLE_I = {
    "alpha": 0.35,
    "f_ec": 1.0270,
    "n0": 3_200_000,
    "p_max": 0.014,
    "delta1": 1.34e-2,
    "delta2": 5e-3,
    "eps_ir": 2.0**-96,
    "eps_bind": 2.0**-253,
    "n_out": 128,
    "eps_total_target": 2.35e-8,
}


@dataclass(frozen=True)
class ProtocolParams:
    alpha: float = TABLE_I["alpha"]
    f_ec: float = TABLE_I["f_ec"]
    n0: int = TABLE_I["n0"]
    p_max: float = TABLE_I["p_max"]
    delta1: float = TABLE_I["delta1"]
    delta2: float = TABLE_I["delta2"]
    eps_ir: float = TABLE_I["eps_ir"]
    eps_bind: float = TABLE_I["eps_bind"]
    n_out: int = TABLE_I["n_out"]
    eps_total_target: float = TABLE_I["eps_total_target"]

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0 < self.p_max <= 0.5:
            raise ValueError(f"p_max must lie in (0, 1/2], got {self.p_max}")
        if not 0 < self.delta1 < 0.5 or not 0 < self.delta2 < 0.5:
            raise ValueError("delta1 and delta2 must lie in (0, 1/2)")
        if self.f_ec < 1:
            raise ValueError(f"f_ec must be >= 1, got {self.f_ec}")
        if self.n_out < 1:
            raise ValueError(f"n_out must be >= 1, got {self.n_out}")
        if self.n0 < 1:
            raise ValueError(f"n0 must be >= 1, got {self.n0}")
        for name in ("eps_ir", "eps_bind", "eps_total_target"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")

    def replace(self, **changes) -> "ProtocolParams":
        return dataclasses.replace(self, **changes)

    @property
    def counts(self) -> "DerivedCounts":
        return derived_counts(self)

    def to_config(self) -> str:
        """Flat ``key=value`` text, one symbol per line."""
        lines = [f"{f.name}={_fmt(getattr(self, f.name))}" for f in dataclasses.fields(self)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_config(cls, text: str) -> "ProtocolParams":
        values = {}
        names = {f.name: f.type for f in dataclasses.fields(cls)}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in names:
                raise ValueError(f"line {lineno}: unknown parameter {key!r}")
            values[key] = int(float(value)) if key in ("n0", "n_out") else float(value)
        return cls(**values)

    def digest(self) -> bytes:
        """SHA-256 over the canonical config text; used for peer agreement."""
        return hashlib.sha256(self.to_config().encode()).digest()


def _fmt(value) -> str:
    if isinstance(value, int):
        return str(value)
    return repr(float(value))


@dataclass(frozen=True)
class DerivedCounts:
    n_test: int
    n_check: int
    n_raw: int


def derived_counts(params: ProtocolParams, n0: int | None = None) -> DerivedCounts:
    # Exact decimal arithmetic: alpha = 0.35 must give floor(0.35 * 320000) = 112000.
    n0 = params.n0 if n0 is None else n0
    a, d2 = Fraction(repr(params.alpha)), Fraction(repr(params.delta2))
    half = Fraction(1, 2)
    n_test = math.floor(a * n0)
    n_check = math.floor((half - d2) * a * n0)
    n_raw = math.floor((half - d2) * (1 - a) * n0)
    return DerivedCounts(n_test=n_test, n_check=n_check, n_raw=n_raw)


@dataclass(frozen=True)
class SecurityBudget:
    """Correctness (``eps_correct``) and honest-sender (``eps_sender``) terms.

    ``eps_total`` is their sum; the commitment binding parameter is kept
    apart in ``eps_commitment`` and is not folded into the total.
    """

    eps_correct: mpf
    eps_sender: mpf
    eps_total: mpf
    eps_commitment: mpf
    terms: dict = field(default_factory=dict)

    @property
    def log10_total(self) -> float:
        if self.eps_total == 0:
            return -math.inf
        return float(_mp.log10(self.eps_total))


def binary_entropy(p) -> mpf:
    p = mpf(p)
    if p < 0 or p > 1:
        raise ValueError(f"binary entropy undefined for p={p}")
    if p == 0 or p == 1:
        return mpf(0)
    return -p * _mp.log(p, 2) - (1 - p) * _mp.log(1 - p, 2)


def kl_divergence_binary(p, q) -> mpf:
    """Binary relative entropy D(p || q) in bits."""
    p, q = mpf(p), mpf(q)
    if not (0 < p < 1 and 0 < q < 1):
        raise ValueError("kl_divergence_binary needs p, q in the open interval (0, 1)")
    return p * _mp.log(p / q, 2) + (1 - p) * _mp.log((1 - p) / (1 - q), 2)


def key_rate_bracket(params: ProtocolParams, f: float | None = None, p_max: float | None = None) -> mpf:
    """Per-raw-bit extractable fraction that multiplies N_raw in the bounds."""
    f = params.f_ec if f is None else f
    p_max = params.p_max if p_max is None else p_max
    half_d2 = mpf(1) / 2 - mpf(params.delta2)
    pe = mpf(p_max) + mpf(params.delta1)
    if pe / half_d2 > 1 or pe > 1:
        return mpf(-1)
    return half_d2 - binary_entropy(pe / half_d2) - mpf(f) * binary_entropy(pe)


def asymptotic_key_rate(params: ProtocolParams) -> mpf:
    """Oblivious-key bits per shared state; non-positive means no key."""
    half_d2 = mpf(1) / 2 - mpf(params.delta2)
    return (1 - mpf(params.alpha)) * half_d2 * key_rate_bracket(params)


def epsilon_budget(params: ProtocolParams, n: int, n0: int | None = None, f: float | None = None) -> SecurityBudget:
    counts = derived_counts(params, n0)
    n0 = params.n0 if n0 is None else n0
    if n > counts.n_raw:
        raise ValueError(f"requested length {n} exceeds N_raw={counts.n_raw}")
    a, d1, d2 = mpf(params.alpha), mpf(params.delta1), mpf(params.delta2)
    half = mpf(1) / 2
    n_raw = mpf(counts.n_raw)

    correct_len = mpf(2) ** (-(n_raw - n) / 2)
    correct_ir = 2 * mpf(params.eps_ir)

    sample_a = _mp.exp(-half * (1 - a) ** 2 * counts.n_test * d1**2)
    sample_b = _mp.exp(-half * counts.n_check * d1**2)
    sampling = _mp.sqrt(2) * _mp.sqrt(sample_a + sample_b)
    # Chernoff tail: exponent needs the divergence in nats.
    kl_nats = kl_divergence_binary(half - d2, half) * _mp.log(2)
    basis_split = _mp.exp(-kl_nats * (1 - a) * n0)
    exponent = n - n_raw * key_rate_bracket(params, f=f)
    leftover = half * mpf(2) ** exponent

    eps_correct = correct_len + correct_ir
    eps_sender = sampling + basis_split + leftover
    return SecurityBudget(
        eps_correct=_clip(eps_correct),
        eps_sender=_clip(eps_sender),
        eps_total=_clip(eps_correct + eps_sender),
        eps_commitment=mpf(params.eps_bind),
        terms={
            "correct_length": correct_len,
            "correct_ir": correct_ir,
            "sampling": sampling,
            "basis_split": basis_split,
            "leftover_hash": leftover,
        },
    )


def _clip(x: mpf) -> mpf:
    return min(x, mpf(1))


def max_secure_length(n_raw: int, params: ProtocolParams, f_actual: float, eps_target: float | None = None) -> int:
    """Largest output length whose leftover-hash term stays within a third of ``eps_target``."""
    if f_actual < 1:
        raise ValueError("f_actual must be >= 1")
    eps_target = params.eps_total_target if eps_target is None else eps_target
    if eps_target <= 0:
        return 0
    sub_budget = mpf(eps_target) / 3
    bracket = key_rate_bracket(params, f=f_actual)
    if bracket <= 0:
        return 0

    def ok(n: int) -> bool:
        return mpf(1) / 2 * mpf(2) ** (n - mpf(n_raw) * bracket) <= sub_budget

    guess = int(_mp.floor(mpf(n_raw) * bracket + _mp.log(2 * sub_budget, 2)))
    guess = max(0, min(guess, n_raw))
    while guess > 0 and not ok(guess):
        guess -= 1
    while guess < n_raw and ok(guess + 1):
        guess += 1
    return guess if ok(guess) else 0


def required_n0(params: ProtocolParams, eps: float, n: int | None = None, hi: int = 10**10) -> int | None:
    """Smallest block size whose total budget at length ``n`` is at most ``eps``."""
    n = params.n_out if n is None else n
    target = mpf(eps)

    def fits(n0: int) -> bool:
        if derived_counts(params, n0).n_raw < n:
            return False
        return epsilon_budget(params, n, n0=n0).eps_total <= target

    if not fits(hi):
        return None
    lo = 1
    while lo < hi:
        mid = (lo + hi) // 2
        if fits(mid):
            hi = mid
        else:
            lo = mid + 1
    return lo


@dataclass(frozen=True)
class RateRow:
    eps: float
    loss_db: float
    fiber_km: float
    n0: int | None
    qber: float
    ot_per_s: float
    feasible: bool


RATE_CSV_HEADER = ("eps", "loss_db", "fiber_km", "n0", "qber", "ot_per_s", "feasible")


def ot_rate_curve(source, params: ProtocolParams, eps_grid: Sequence[float], loss_grid: Sequence[float]) -> list[RateRow]:
    """OT/s over an (eps, loss) grid: one OT per block of N0 coincidences."""
    from .qsim import channel_at

    if not eps_grid or not loss_grid:
        raise ValueError("eps_grid and loss_grid must be non-empty")
    rows = []
    n0_cache = {eps: required_n0(params, eps) for eps in eps_grid}
    for eps in eps_grid:
        n0 = n0_cache[eps]
        for loss in loss_grid:
            rate_hz, qber_hv, qber_da = channel_at(source, loss)
            qber = (qber_hv + qber_da) / 2
            feasible = n0 is not None and qber <= params.p_max
            ot_per_s = rate_hz / n0 if feasible else 0.0
            rows.append(RateRow(
                eps=float(eps), loss_db=float(loss), fiber_km=float(loss) / source.fiber_db_per_km,
                n0=n0, qber=float(qber), ot_per_s=float(ot_per_s), feasible=bool(feasible),
            ))
    return rows


def accumulation_time(n0: int, coincidence_hz: float) -> float:
    """Seconds of source time needed to record one block."""
    return n0 / coincidence_hz


def write_rate_csv(rows: Iterable[RateRow], fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(RATE_CSV_HEADER)
    for r in rows:
        writer.writerow([
            f"{r.eps:.6g}", f"{r.loss_db:.4f}", f"{r.fiber_km:.4f}",
            "" if r.n0 is None else str(r.n0), f"{r.qber:.6f}", f"{r.ot_per_s:.6e}", int(r.feasible),
        ])


def read_rate_csv(fh) -> list[RateRow]:
    reader = csv.DictReader(fh)
    if tuple(reader.fieldnames or ()) != RATE_CSV_HEADER:
        raise ValueError(f"unexpected rate table header {reader.fieldnames}")
    return [
        RateRow(
            eps=float(d["eps"]), loss_db=float(d["loss_db"]), fiber_km=float(d["fiber_km"]),
            n0=int(d["n0"]) if d["n0"] else None, qber=float(d["qber"]),
            ot_per_s=float(d["ot_per_s"]), feasible=d["feasible"] == "1",
        )
        for d in reader
    ]
