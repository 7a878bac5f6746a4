"""Versioned checkpoints and metrics export.

Checkpoint layout: a one-line header ``adaptint-checkpoint <version> <module>
sha256=<hex>`` followed by canonical JSON. The digest covers the JSON body, so
truncation or edits are caught on load. Python's JSON float encoding
round-trips doubles exactly, which is what makes resumed runs bit-faithful.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .simulator import BanditEpisode, LinearEnvSpec, MetricsTable, policy_from_state, policy_state
from .survival import HazardModel

__all__ = [
    "FORMAT_VERSION",
    "CheckpointError",
    "ChecksumError",
    "VersionError",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "export_metrics",
    "read_metrics",
    "METRIC_COLUMNS",
]

FORMAT_VERSION = 1
MAGIC = "adaptint-checkpoint"
METRIC_COLUMNS = ("scenario", "replication", "round", "metric", "value")


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


@dataclass(frozen=True)
class Checkpoint:
    version: int
    module: str
    checksum: str
    path: Path


def _encode(obj) -> tuple[str, dict]:
    if isinstance(obj, BanditEpisode):
        spec = obj.spec
        state = obj.checkpoint_state()
        state["spec"] = {
            "theta": spec.theta.tolist(),
            "noise_sd": spec.noise_sd,
            "context": spec.context,
            "horizon": spec.horizon,
            "seed": spec.seed,
        }
        return "bandit-episode", state
    if isinstance(obj, HazardModel):
        return "hazard-model", obj.to_dict()
    return "policy", policy_state(obj)


def _decode(module: str, state: dict):
    if module == "bandit-episode":
        return BanditEpisode.from_checkpoint(LinearEnvSpec(**state["spec"]), state)
    if module == "hazard-model":
        return HazardModel.from_dict(state)
    if module == "policy":
        return policy_from_state(state)
    raise CheckpointError(f"unknown checkpoint module {module!r}")


def _body(state: dict) -> bytes:
    return json.dumps(state, sort_keys=True, separators=(",", ":"), allow_nan=True).encode()


def save_checkpoint(obj, path) -> Checkpoint:
    """Write a policy, a bandit episode (with its random streams) or a hazard model."""
    module, state = _encode(obj)
    body = _body(state)
    digest = hashlib.sha256(body).hexdigest()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"{MAGIC} {FORMAT_VERSION} {module} sha256={digest}\n".encode())
        fh.write(body)
    return Checkpoint(FORMAT_VERSION, module, digest, path)


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    head, sep, body = raw.partition(b"\n")
    parts = head.decode(errors="replace").split()
    if len(parts) != 4 or parts[0] != MAGIC or not parts[3].startswith("sha256="):
        raise CheckpointError("not a checkpoint file")
    try:
        version = int(parts[1])
    except ValueError:
        raise CheckpointError("unreadable checkpoint version") from None
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    if not sep or hashlib.sha256(body).hexdigest() != parts[3][len("sha256=") :]:
        raise ChecksumError("checkpoint checksum mismatch")
    return _decode(parts[2], json.loads(body))


def _rep_key(rep):
    if isinstance(rep, (int, np.integer)):
        return (0, int(rep), "")
    return (1, 0, str(rep))


def _round_key(rnd):
    if isinstance(rnd, (int, np.integer)):
        return (0, int(rnd))
    return (1, 0)


def export_metrics(results: MetricsTable, path) -> Path:
    """Write metrics as CSV ordered by replication, then round, then metric name."""
    rows = sorted(results.rows, key=lambda r: (str(r[0]), _rep_key(r[1]), _round_key(r[2]), r[3]))
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for scenario, rep, rnd, metric, value in rows:
            writer.writerow([scenario, rep, rnd, metric, repr(float(value))])
    return path


def read_metrics(path) -> MetricsTable:
    table = MetricsTable()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != METRIC_COLUMNS:
            raise ValueError(f"metrics file must have header {','.join(METRIC_COLUMNS)}")
        for scenario, rep, rnd, metric, value in reader:
            table.rows.append(
                (
                    scenario,
                    int(rep) if rep.lstrip("-").isdigit() else rep,
                    int(rnd) if rnd.lstrip("-").isdigit() else rnd,
                    metric,
                    float(value),
                )
            )
    return table
