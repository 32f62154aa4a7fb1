"""Closed-form per-head decode cost and compression ratios, in exact arithmetic."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .errors import ConfigError

ABLATION_SEQ_LENS = (1024, 2048, 4096, 8192, 16384, 32768)
ABLATION_RHO2 = (Fraction(9, 10), Fraction(7, 10), Fraction(1, 2))


@dataclass(frozen=True)
class CostInputs:
    E: int
    H: int
    L: int
    r: int
    R: int
    n_heads: int = 1

    def __post_init__(self):
        for name in ("E", "H", "L", "r", "R", "n_heads"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.r > self.H:
            raise ConfigError(f"r={self.r} exceeds H={self.H}")
        if self.R > self.E:
            raise ConfigError(f"R={self.R} exceeds E={self.E}")
        if self.H > self.E:
            raise ConfigError(f"H={self.H} exceeds E={self.E}")


def latent_cost(L: int, width: int, H: int) -> tuple[int, int]:
    """``(gamma, eta)`` for one head rebuilding keys from a latent of ``width`` columns."""
    return L * width * H, L * width


def gamma_eta(c: CostInputs) -> dict[str, int]:
    g_svd, e_svd = latent_cost(c.L, c.R, c.H)
    g_wsvd, e_wsvd = latent_cost(c.L, c.r, c.H)
    return {"gamma_svd": g_svd, "eta_svd": e_svd, "gamma_wsvd": g_wsvd, "eta_wsvd": e_wsvd}


def traffic_ratio(c: CostInputs) -> Fraction:
    """``gamma_wsvd / gamma_svd == eta_wsvd / eta_svd == r / R``."""
    ge = gamma_eta(c)
    return Fraction(ge["eta_wsvd"], ge["eta_svd"])


def rho(c: CostInputs) -> dict[str, Fraction]:
    """Parameter ratio ``(E + H) r / (E H)`` and cache ratio ``r / H``."""
    rho1 = Fraction((c.E + c.H) * c.r, c.E * c.H)
    rho2 = Fraction(c.r, c.H)
    return {"rho1": rho1, "rho2": rho2, "correction": rho1 - rho2}


def ablation_table(E: int = 4096, H: int = 128, seq_lens=ABLATION_SEQ_LENS, rho2s=ABLATION_RHO2) -> list[dict]:
    """Rows over sequence length and cache ratio.

    ``r`` is the nearest integer to ``rho2 * H`` (0.9 * 128 is not an integer),
    and R is matched so that ``R / E == r / H`` exactly; the reported rho2 is
    the achieved one.
    """
    if E % H:
        raise ConfigError(f"H={H} must divide E={E} to match the shared latent width")
    rows = []
    for L in seq_lens:
        for target in rho2s:
            r = max(1, min(H, round(Fraction(target) * H)))
            R = r * (E // H)
            c = CostInputs(E=E, H=H, L=L, r=r, R=R)
            ge = gamma_eta(c)
            ratios = rho(c)
            rows.append({
                "L": L, "r": r, "R": R, "rho2_target": str(Fraction(target)),
                "rho1": str(ratios["rho1"]), "rho2": str(ratios["rho2"]),
                "rho1_decimal": float(ratios["rho1"]), "rho2_decimal": float(ratios["rho2"]),
                "eta_orig": L * H, **ge,
                "ratio": str(traffic_ratio(c)),
            })
    return rows


def format_table(rows: list[dict]) -> str:
    cols = ("L", "r", "R", "rho1_decimal", "rho2_decimal", "eta_orig", "eta_wsvd", "eta_svd", "gamma_wsvd", "gamma_svd", "ratio")
    lines = ["\t".join(cols)]
    for row in rows:
        lines.append("\t".join(f"{row[c]:.6f}" if isinstance(row[c], float) else str(row[c]) for c in cols))
    return "\n".join(lines)
