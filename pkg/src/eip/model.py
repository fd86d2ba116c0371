"""Closed-form worst-case model of a reflection attack against EIP reflectors.

All bandwidths are in bits per second and packet sizes in bits.
"""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

from .wire import D_PUZ, D_PUZ_TABLE2, D_REQ, D_REQ_CERT


class Scenario(enum.IntEnum):
    BASELINE = 1
    CERT_CHECKS = 2
    CERT_PLUS_PUZZLES = 3
    PUZZLES_PLUS_SHAPERS = 4

    @classmethod
    def parse(cls, text: str | int) -> "Scenario":
        if isinstance(text, int) or str(text).isdigit():
            return cls(int(text))
        return cls[str(text).strip().upper().replace("-", "_")]


FORMULAS = {
    Scenario.BASELINE: "R_a / D_req * D_req * A_f",
    Scenario.CERT_CHECKS: "R_a / D_req_cert * D_req * A_f",
    Scenario.CERT_PLUS_PUZZLES: "R_a / D_req_cert * D_puz",
    Scenario.PUZZLES_PLUS_SHAPERS: "R * R_shap * D_puz",
}

# values printed in the published results table at R_a = 1 Gbps
PRINTED_TABLE2_BPS = {
    Scenario.BASELINE: 1e9,
    Scenario.CERT_CHECKS: 222e6,
    Scenario.CERT_PLUS_PUZZLES: 604e6,
    Scenario.PUZZLES_PLUS_SHAPERS: 12.76e6,
}


@dataclass(frozen=True)
class ModelParams:
    r_a: float = 1e9
    d_req: float = D_REQ
    d_req_cert: float = D_REQ_CERT
    d_puz: float = D_PUZ
    a_f: float = 1.0
    r: float = 1000
    r_shap: float = 10

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if value < 0 or (value == 0 and name in ("d_req", "d_req_cert", "d_puz")):
                raise ValueError(f"{name} must be positive, got {value}")


PRESETS = {
    "paper-text": ModelParams(),
    "table2-replication": ModelParams(d_puz=D_PUZ_TABLE2),
}

PRESET_NOTES = {
    "paper-text": "D_puz = 272 bytes = 2176 bits as defined in the model text",
    "table2-replication": (
        "D_puz = 1276 bits: the value implied by the printed 12.76 Mbps, 63.8 Mbps "
        "and ~1 million reflectors figures, which disagree with the 2176-bit text constant"
    ),
}


def preset(name: str, **overrides) -> ModelParams:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides)


def victim_bandwidth(p: ModelParams, s: Scenario) -> float:
    if s is Scenario.BASELINE:
        return p.r_a / p.d_req * p.d_req * p.a_f
    if s is Scenario.CERT_CHECKS:
        return p.r_a / p.d_req_cert * p.d_req * p.a_f
    if s is Scenario.CERT_PLUS_PUZZLES:
        return p.r_a / p.d_req_cert * p.d_puz
    if s is Scenario.PUZZLES_PLUS_SHAPERS:
        return p.r * p.r_shap * p.d_puz
    raise ValueError(s)


def victim_packet_rate(p: ModelParams, s: Scenario) -> float:
    if s is Scenario.BASELINE:
        return p.r_a / p.d_req
    if s in (Scenario.CERT_CHECKS, Scenario.CERT_PLUS_PUZZLES):
        return p.r_a / p.d_req_cert
    return p.r * p.r_shap


def attack_bw_vs_shaper(r: float, d_puz: float, rates: Iterable[float]) -> list[tuple[float, float]]:
    return [(rate, r * rate * d_puz) for rate in rates]


def reflectors_per_gbps(r_shap: float, d_puz: float) -> float:
    if r_shap <= 0:
        return math.inf
    return 1e9 / (r_shap * d_puz)


def collision_probability(n_trials: int, k_bits: int) -> float:
    """``1 - exp(-N(N-1) / 2**K)`` evaluated without cancellation."""
    if n_trials < 1 or k_bits < 1:
        raise ValueError("n_trials and k_bits must be >= 1")
    x = (n_trials * (n_trials - 1)) / (1 << k_bits)
    return -math.expm1(-x)


DEFAULT_RATES: Sequence[float] = tuple(range(1, 101))


def write_model_outputs(
    out_dir: Path, params: ModelParams, preset_name: str, rates: Sequence[float] = DEFAULT_RATES
) -> dict[str, Path]:
    """Emit table2.csv, fig2.csv, fig3.csv and model_meta.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {name: out_dir / name for name in ("table2.csv", "fig2.csv", "fig3.csv", "model_meta.json")}

    with paths["table2.csv"].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(
            ["scenario", "formula", "r_a_bps", "d_req", "d_req_cert", "d_puz", "a_f", "r", "r_shap",
             "r_v_bps", "r_v_pps", "printed_bps"]
        )
        for s in Scenario:
            w.writerow(
                [s.value, FORMULAS[s], _num(params.r_a), _num(params.d_req), _num(params.d_req_cert),
                 _num(params.d_puz), _num(params.a_f), _num(params.r), _num(params.r_shap),
                 _num(victim_bandwidth(params, s)), _num(victim_packet_rate(params, s)),
                 _num(PRINTED_TABLE2_BPS[s])]
            )

    with paths["fig2.csv"].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rate", "bps"])
        for rate, bps in attack_bw_vs_shaper(params.r, params.d_puz, rates):
            w.writerow([_num(rate), _num(bps)])

    with paths["fig3.csv"].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rate", "reflectors_per_gbps"])
        for rate in rates:
            w.writerow([_num(rate), _num(reflectors_per_gbps(rate, params.d_puz))])

    meta = {
        "preset": preset_name,
        "note": PRESET_NOTES.get(preset_name, "custom parameters"),
        "params": asdict(params),
        "discrepancies": [
            "scenario 4 with R=1000, R_shap=10: 12.76 Mbps needs D_puz=1276 bits; "
            "the 2176-bit text constant gives 21.76 Mbps",
            "baseline packet rate at R_a=1 Gbps, D_req=800 bits is 1.25 Mpps; 12.5 Mpps is printed",
            "the printed 604 Mbps for scenario 3 needs D_puz=2176 bits, so no single D_puz "
            "reproduces every printed row",
        ],
        "scenario4_bps": {
            name: victim_bandwidth(replace(p, r_a=params.r_a), Scenario.PUZZLES_PLUS_SHAPERS)
            for name, p in PRESETS.items()
        },
    }
    paths["model_meta.json"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return paths


def _num(x: float) -> str:
    """Stable textual form for CSV cells."""
    if isinstance(x, int) or (math.isfinite(x) and float(x).is_integer()):
        return str(int(x))
    return repr(round(float(x), 6))
