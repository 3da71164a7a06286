"""Versioned JSON artifacts and JSON-lines trajectory ingestion.

Every artifact carries a schema marker and enough provenance (config
hash, seed) that a run can be reproduced from the artifact alone.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .ct_hmm import EmissionParams, ModelParams, Trajectory
from .errors import ArtifactError, ValidationError
from .regime import BasisSpec, PolicyParams

SCHEMA_VERSION = 1


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def _wrap(kind: str, payload: dict, provenance: Optional[dict] = None) -> dict:
    doc = {"schema": kind, "version": SCHEMA_VERSION, **payload}
    if provenance:
        doc["provenance"] = provenance
    return doc


def _load(path, kind: str) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ArtifactError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"{path} is not valid JSON: {exc}") from exc
    if doc.get("schema") != kind:
        raise ArtifactError(f"{path}: expected schema {kind!r}, found {doc.get('schema')!r}")
    if doc.get("version") != SCHEMA_VERSION:
        raise ArtifactError(f"{path}: unsupported schema version {doc.get('version')}")
    return doc


def _write(path, doc: dict) -> None:
    try:
        Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise ArtifactError(f"cannot write {path}: {exc}") from exc


def model_to_dict(params: ModelParams) -> dict:
    payload = {
        "K": params.K,
        "L": params.L,
        "p": params.p,
        "layout": "row-major",
        "rates": params.rates.tolist(),
        "mu": params.emission.mu.tolist(),
        "psi": params.emission.psi.tolist(),
        "sigma": params.emission.sigma.tolist(),
        "init_dist": params.init_dist.tolist(),
        "ar_intercept": params.ar_intercept,
    }
    if params.emission.sigma_init is not None:
        payload["sigma_init"] = params.emission.sigma_init.tolist()
    return _wrap("model_params", payload)


def model_from_dict(doc: dict) -> ModelParams:
    emission = EmissionParams(
        mu=np.array(doc["mu"]),
        psi=np.array(doc["psi"]),
        sigma=np.array(doc["sigma"]),
        sigma_init=np.array(doc["sigma_init"]) if "sigma_init" in doc else None,
    )
    return ModelParams(
        rates=np.array(doc["rates"]),
        emission=emission,
        init_dist=np.array(doc["init_dist"]),
        ar_intercept=bool(doc.get("ar_intercept", False)),
    )


def save_model(path, params: ModelParams, provenance: Optional[dict] = None) -> None:
    doc = model_to_dict(params)
    if provenance:
        doc["provenance"] = provenance
    _write(path, doc)


def load_model(path) -> ModelParams:
    return model_from_dict(_load(path, "model_params"))


def policy_to_dict(policy: PolicyParams) -> dict:
    basis = policy.basis or BasisSpec()
    return _wrap(
        "policy_params",
        {
            "xi": policy.xi.tolist(),
            "kind": policy.kind,
            "floor": policy.floor,
            "basis": {
                "kind": basis.kind,
                "use_belief": basis.use_belief,
                "use_x": basis.use_x,
                "intercept": basis.intercept,
            },
        },
    )


def policy_from_dict(doc: dict) -> PolicyParams:
    b = doc["basis"]
    return PolicyParams(
        xi=np.array(doc["xi"]),
        kind=doc["kind"],
        floor=float(doc["floor"]),
        basis=BasisSpec(
            kind=b["kind"],
            use_belief=b["use_belief"],
            use_x=b["use_x"],
            intercept=b["intercept"],
        ),
    )


def save_policy(path, policy: PolicyParams, provenance: Optional[dict] = None) -> None:
    doc = policy_to_dict(policy)
    if provenance:
        doc["provenance"] = provenance
    _write(path, doc)


def load_policy(path) -> PolicyParams:
    return policy_from_dict(_load(path, "policy_params"))


def save_json(path, kind: str, payload: dict, provenance: Optional[dict] = None) -> None:
    _write(path, _wrap(kind, payload, provenance))


def load_json(path, kind: str) -> dict:
    return _load(path, kind)


# ---------------------------------------------------------------------------
# MDP tuple files: JSON lines, one record per transition


def write_tuples(path, tuples) -> None:
    try:
        with open(path, "w") as fh:
            fh.write(json.dumps({"schema": "mdp_tuples", "version": SCHEMA_VERSION}) + "\n")
            for t in tuples:
                fh.write(
                    json.dumps(
                        {
                            "subject_id": t.subject_id,
                            "j": t.j,
                            "belief": t.s.belief.tolist(),
                            "x": t.s.x.tolist(),
                            "a": t.a,
                            "u": t.u,
                            "belief_next": t.s_next.belief.tolist(),
                            "x_next": t.s_next.x.tolist(),
                            "behavior_prob": t.behavior_prob,
                        }
                    )
                    + "\n"
                )
    except OSError as exc:
        raise ArtifactError(f"cannot write {path}: {exc}") from exc


def read_tuples(path) -> list:
    from .belief_transform import MdpTuple, SummaryState

    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ArtifactError(f"cannot read {path}: {exc}") from exc
    if not lines:
        raise ArtifactError(f"{path}: empty tuple file")
    header = json.loads(lines[0])
    if header.get("schema") != "mdp_tuples" or header.get("version") != SCHEMA_VERSION:
        raise ArtifactError(f"{path}: missing or mismatched mdp_tuples header")
    out = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        rec = json.loads(line)
        out.append(
            MdpTuple(
                subject_id=str(rec["subject_id"]),
                j=int(rec["j"]),
                s=SummaryState(np.array(rec["belief"]), np.array(rec["x"])),
                a=int(rec["a"]),
                u=float(rec["u"]),
                s_next=SummaryState(np.array(rec["belief_next"]), np.array(rec["x_next"])),
                behavior_prob=float(rec["behavior_prob"]),
            )
        )
    return out


# ---------------------------------------------------------------------------
# trajectory files: JSON lines, one record per visit


def write_trajectories(path, dataset: Sequence[Trajectory]) -> None:
    try:
        with open(path, "w") as fh:
            for traj in dataset:
                for j in range(traj.J):
                    rec = {
                        "subject_id": traj.subject_id,
                        "time": float(traj.times[j]),
                        "action": int(traj.actions[j]),
                    }
                    for i in range(traj.x.shape[1]):
                        rec[f"x_{i + 1}"] = float(traj.x[j, i])
                    fh.write(json.dumps(rec) + "\n")
    except OSError as exc:
        raise ArtifactError(f"cannot write {path}: {exc}") from exc


def read_trajectories(path) -> list:
    """Strictly-validated JSONL ingestion; rows grouped by subject_id in
    order of first appearance."""
    groups: dict = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ArtifactError(f"cannot read {path}: {exc}") from exc
    p = None
    for ln, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ArtifactError(f"{path}:{ln}: invalid JSON: {exc}") from exc
        missing = {"subject_id", "time", "action"} - rec.keys()
        if missing:
            raise ArtifactError(f"{path}:{ln}: missing fields {sorted(missing)}")
        xkeys = sorted(k for k in rec if k.startswith("x_"))
        expected = [f"x_{i + 1}" for i in range(len(xkeys))]
        if xkeys != expected:
            raise ArtifactError(f"{path}:{ln}: covariate fields must be x_1..x_p")
        if p is None:
            p = len(xkeys)
        elif len(xkeys) != p:
            raise ArtifactError(f"{path}:{ln}: inconsistent covariate dimension")
        unknown = rec.keys() - ({"subject_id", "time", "action"} | set(xkeys))
        if unknown:
            raise ArtifactError(f"{path}:{ln}: unknown fields {sorted(unknown)}")
        groups.setdefault(str(rec["subject_id"]), []).append(
            (ln, float(rec["time"]), int(rec["action"]), [float(rec[k]) for k in expected])
        )
    if not groups:
        raise ArtifactError(f"{path}: no visit records found")
    dataset = []
    for sid, rows in groups.items():
        times = np.array([r[1] for r in rows])
        if np.any(np.diff(times) <= 0):
            bad = rows[int(np.argmax(np.diff(times) <= 0)) + 1][0]
            raise ValidationError(
                f"{path}: subject {sid}: times not strictly increasing at line {bad}"
            )
        dataset.append(
            Trajectory(
                times=times,
                actions=np.array([r[2] for r in rows]),
                x=np.array([r[3] for r in rows]),
                subject_id=sid,
            )
        )
    return dataset
