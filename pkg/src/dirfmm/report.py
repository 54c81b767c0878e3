"""Machine-readable run reports.

Everything that depends on wall-clock time lives under the top-level
``"timing"`` key; the rest of a report is a deterministic function of the
configuration and seed.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources

import jsonschema
import numpy as np

SCHEMA_VERSION = 1
TABLE_COLUMNS = ("hf_m2m", "hf_m2l_l2l", "lf_m2l_l2l", "comm", "total")


def load_schema() -> dict:
    return json.loads(resources.files("dirfmm").joinpath("report_schema.json").read_text())


def potentials_checksum(u: np.ndarray) -> dict:
    u = np.ascontiguousarray(u, dtype="<c16")
    return {"sha256": hashlib.sha256(u.tobytes()).hexdigest(),
            "l2_norm": float(np.linalg.norm(u)),
            "sum_re": float(u.real.sum()), "sum_im": float(u.imag.sum())}


def _empty_comm() -> dict:
    return {"pairs": [], "phases": {n: {"messages": 0, "bytes": 0} for n in ("hf", "lf", "gather")},
            "conserved": True}


@dataclass
class RunReport:
    config: dict
    N: int
    n_partition_boxes: int
    n_nonempty_partition_boxes: int
    boxes_per_level: list[int]
    operation_counts: dict
    comm: dict
    separation_ranks: dict
    checksum: dict
    timing: dict
    relative_error: float | None = None
    validation: dict | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_run(cls, tree, cache, potentials, p, mode, phase_times, operation_counts,
                 comm=None, worker_times=None) -> "RunReport":
        cfg = tree.config
        timing = {k: float(v) for k, v in phase_times.items()}
        if worker_times:
            timing["workers"] = {str(q): {k: float(v) for k, v in t.items()}
                                 for q, t in worker_times.items()}
        return cls(
            config={"K": cfg.K, "L": cfg.L, "epsilon": cfg.epsilon, "seed": cfg.seed,
                    "leaf_capacity": cfg.leaf_capacity, "p": int(p), "mode": mode},
            N=int(len(potentials)),
            n_partition_boxes=8 ** tree.partition_level,
            n_nonempty_partition_boxes=len(tree.levels[tree.partition_level]),
            boxes_per_level=[len(lvl) for lvl in tree.levels],
            operation_counts={k: int(v) for k, v in sorted(operation_counts.items())},
            comm=comm if comm is not None else _empty_comm(),
            separation_ranks={repr(float(w)): int(r) for w, r in cache.rank_table().items()},
            checksum=potentials_checksum(potentials),
            timing=timing,
        )

    def to_dict(self) -> dict:
        d = {"schema_version": SCHEMA_VERSION, "config": self.config, "N": self.N,
             "n_partition_boxes": self.n_partition_boxes,
             "n_nonempty_partition_boxes": self.n_nonempty_partition_boxes,
             "boxes_per_level": self.boxes_per_level,
             "operation_counts": self.operation_counts, "comm": self.comm,
             "separation_ranks": self.separation_ranks, "checksum": self.checksum,
             "timing": self.timing}
        if self.relative_error is not None:
            d["relative_error"] = self.relative_error
            d["validation"] = self.validation or {}
        d.update(copy.deepcopy(self.extra))
        return d

    def to_json(self) -> str:
        d = self.to_dict()
        validate_report(d)
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        validate_report(d)
        known = {"schema_version", "config", "N", "n_partition_boxes",
                 "n_nonempty_partition_boxes", "boxes_per_level", "operation_counts", "comm",
                 "separation_ranks", "checksum", "timing", "relative_error", "validation"}
        return cls(d["config"], d["N"], d["n_partition_boxes"], d["n_nonempty_partition_boxes"],
                   d["boxes_per_level"], d["operation_counts"], d["comm"], d["separation_ranks"],
                   d["checksum"], d["timing"], d.get("relative_error"), d.get("validation"),
                   {k: v for k, v in d.items() if k not in known})

    def table_row(self) -> dict:
        """Phase times in the column layout of the benchmark CSV."""
        return {c: self.timing.get(c, 0.0) for c in ("lf_m2m",) + TABLE_COLUMNS}


def validate_report(d: dict) -> None:
    jsonschema.validate(d, load_schema())


def deterministic_view(d: dict) -> dict:
    """Report without wall-clock fields, for bitwise comparisons between runs."""
    out = copy.deepcopy(d)
    out.pop("timing", None)
    return out
