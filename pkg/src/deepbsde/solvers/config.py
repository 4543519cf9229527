from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping

METHODS = ("DBSDE", "DBDP1", "DBDP2", "DS", "MDBDP")
BACKWARD_METHODS = ("DBDP1", "DBDP2", "DS", "MDBDP")


@dataclass
class SolverConfig:
    method: str = "DBSDE"
    n_steps: int = 40
    batch: int = 64
    val_size: int = 2048
    lr: float = 0.01
    iters_forward: int = 8000
    iters_first: int = 16000
    iters_rest: int = 3000
    seed: int = 0
    hidden: list[int] = field(default_factory=lambda: [128, 128])
    activation: str = "relu"
    lr_decay: bool = False
    eval_every: int = 100
    batch_norm: bool = False

    def __post_init__(self):
        self.method = str(self.method).upper()
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        for name in ("n_steps", "batch", "val_size", "iters_forward", "iters_first",
                     "iters_rest", "eval_every"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer, got {getattr(self, name)}")
            setattr(self, name, int(getattr(self, name)))
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        self.hidden = [int(h) for h in self.hidden]
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ValueError("hidden widths must be positive")

    def replace(self, **changes) -> "SolverConfig":
        kw = asdict(self)
        kw.update(changes)
        return SolverConfig(**kw)

    @property
    def is_backward(self) -> bool:
        return self.method in BACKWARD_METHODS


def decayed_lr(cfg: SolverConfig, it: int, budget: int) -> float:
    """Learning rate at iteration ``it`` of a ``budget``; x0.1 at 50% and 75% when decay is on."""
    if not cfg.lr_decay:
        return cfg.lr
    return cfg.lr * 0.1 ** ((it >= budget // 2) + (it >= (3 * budget) // 4))


def _parse_bool(value: str) -> bool:
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def config_from_mapping(section: Mapping[str, str], **defaults) -> SolverConfig:
    known = {f.name for f in fields(SolverConfig)}
    kw = dict(defaults)
    for key, value in section.items():
        if key not in known:
            raise KeyError(f"unknown solver key {key!r}; valid keys: {sorted(known)}")
        if key == "hidden":
            kw[key] = [int(h) for h in str(value).replace(",", " ").split()]
        elif key in ("method", "activation"):
            kw[key] = str(value)
        elif key == "lr":
            kw[key] = float(value)
        elif key in ("lr_decay", "batch_norm"):
            kw[key] = _parse_bool(value)
        else:
            kw[key] = int(value)
    return SolverConfig(**kw)


def config_to_mapping(cfg: SolverConfig) -> dict[str, str]:
    out = {}
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        out[f.name] = " ".join(map(str, value)) if f.name == "hidden" else str(value)
    return out


@dataclass
class SolverRun:
    config: SolverConfig
    price: float
    loss_curve: list[tuple[int, float]]
    wall_time: float
    seed: int
    status: str = "ok"
    message: str = ""

    CSV_FIELDS = ("method", "seed", "n_steps", "batch", "price", "final_val_loss", "status")

    def csv_row(self) -> dict[str, str]:
        last = self.loss_curve[-1][1] if self.loss_curve else float("nan")
        return {"method": self.config.method, "seed": str(self.seed),
                "n_steps": str(self.config.n_steps), "batch": str(self.config.batch),
                "price": repr(float(self.price)), "final_val_loss": repr(float(last)),
                "status": self.status}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerow(self.csv_row())
        return buf.getvalue()

    def loss_curve_csv(self) -> str:
        lines = ["iteration,val_loss"]
        lines += [f"{it},{loss!r}" for it, loss in self.loss_curve]
        return "\n".join(lines) + "\n"


class SolverDivergence(RuntimeError):
    """Training produced non-finite values; carries the partial run."""

    def __init__(self, message: str, run: SolverRun | None = None, step: int | None = None):
        super().__init__(message)
        self.run = run
        self.step = step
